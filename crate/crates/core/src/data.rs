//! Synthetic tasks, vocabularies and JSON Lines datasets.
//!
//! Token ids `0..3` are reserved for padding, start-of-sequence and unknown
//! words in every vocabulary and every generator.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Sequence(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub premise: Vec<usize>,
    /// Empty for sequence-to-sequence tasks.
    pub hypothesis: Vec<usize>,
    pub label: Label,
}

impl Example {
    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            Label::Sequence(_) => None,
        }
    }
}

/// Entailment classes in logit order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Entailment {
    Entails = 0,
    Contradicts = 1,
    Neutral = 2,
}

impl Entailment {
    pub const ALL: [Entailment; 3] = [Self::Entails, Self::Contradicts, Self::Neutral];

    /// Parses the JSON Lines label names; anything else is `None`.
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "entailment" => Some(Self::Entails),
            "contradiction" => Some(Self::Contradicts),
            "neutral" => Some(Self::Neutral),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Entails => "entailment",
            Self::Contradicts => "contradiction",
            Self::Neutral => "neutral",
        }
    }
}

/// Token/id bijection with the three reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub const RESERVED_TOKENS: [&'static str; RESERVED] = ["<pad>", "<s>", "<unk>"];

    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in Self::RESERVED_TOKENS {
            v.push(t);
        }
        v
    }

    fn push(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if v.index.contains_key(line) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("duplicate token {line:?}"),
                });
            }
            v.push(line);
        }
        if v.tokens.len() < RESERVED
            || v.tokens[..RESERVED]
                .iter()
                .zip(Self::RESERVED_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "vocabulary must start with the reserved tokens".into(),
            });
        }
        Ok(v)
    }
}

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Frequency-ranked vocabulary of at most `max_size` entries including the
/// reserved ids. Ties are broken lexicographically.
pub fn build_vocab<'a, I>(tokens: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    if max_size <= RESERVED {
        return Err(Error::InvalidArgument(format!(
            "vocabulary size must exceed {RESERVED} (got {max_size})"
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokens {
        if !Vocab::RESERVED_TOKENS.contains(&t) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut vocab = Vocab::new();
    for (t, _) in ranked.into_iter().take(max_size - RESERVED) {
        vocab.push(t);
    }
    Ok(vocab)
}

/// Random token sequences whose target is the sequence itself.
pub fn gen_copy_task(n: usize, seq_len: usize, vocab_size: usize, seed: u64) -> Result<Vec<Example>> {
    if vocab_size <= RESERVED || seq_len == 0 {
        return Err(Error::InvalidArgument(format!(
            "copy task needs vocab_size > {RESERVED} and seq_len >= 1 (got {vocab_size}, {seq_len})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let seq: Vec<usize> = (0..seq_len)
                .map(|_| rng.gen_range(RESERVED..vocab_size))
                .collect();
            Example {
                premise: seq.clone(),
                hypothesis: Vec::new(),
                label: Label::Sequence(seq),
            }
        })
        .collect())
}

/// Token layout of the key-value recall task: keys occupy the lower half of
/// the non-reserved ids, values the upper half.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KvLayout {
    pub vocab_size: usize,
    pub key_start: usize,
    pub value_start: usize,
}

impl KvLayout {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < RESERVED + 2 {
            return Err(Error::InvalidArgument(format!(
                "kv recall needs vocab_size >= {} (got {vocab_size})",
                RESERVED + 2
            )));
        }
        let n_keys = (vocab_size - RESERVED) / 2;
        Ok(Self {
            vocab_size,
            key_start: RESERVED,
            value_start: RESERVED + n_keys,
        })
    }

    pub fn n_keys(&self) -> usize {
        self.value_start - self.key_start
    }

    /// Number of distinct value tokens, which is also the class count.
    pub fn n_values(&self) -> usize {
        self.vocab_size - self.value_start
    }
}

/// Premise `k_1 v_1 ... k_n v_n` with distinct keys, hypothesis one queried
/// key, label the queried value as a class id (`value - value_start`).
pub fn gen_kv_recall_task(
    n: usize,
    n_pairs: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    let layout = KvLayout::new(vocab_size)?;
    if n_pairs < 1 || n_pairs > layout.n_keys() {
        return Err(Error::InvalidArgument(format!(
            "kv recall with vocab {vocab_size} supports 1..={} unique keys (got {n_pairs})",
            layout.n_keys()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all_keys: Vec<usize> = (layout.key_start..layout.value_start).collect();
    Ok((0..n)
        .map(|_| {
            let keys: Vec<usize> = all_keys
                .choose_multiple(&mut rng, n_pairs)
                .copied()
                .collect();
            let values: Vec<usize> = (0..n_pairs)
                .map(|_| rng.gen_range(layout.value_start..vocab_size))
                .collect();
            let q = rng.gen_range(0..n_pairs);
            let premise = keys
                .iter()
                .zip(&values)
                .flat_map(|(&k, &v)| [k, v])
                .collect();
            Example {
                premise,
                hypothesis: vec![keys[q]],
                label: Label::Class(values[q] - layout.value_start),
            }
        })
        .collect())
}

/// Parameters of the templated entailment world.
///
/// Premises list `agent attribute` facts with distinct agents; a hypothesis
/// is one `agent attribute` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntailGrammar {
    pub n_agents: usize,
    pub n_attrs: usize,
    /// Premise length bounds in tokens (two tokens per fact).
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for EntailGrammar {
    fn default() -> Self {
        Self {
            n_agents: 30,
            n_attrs: 31,
            min_len: 12,
            max_len: 40,
        }
    }
}

impl EntailGrammar {
    /// Vocabulary covering reserved ids, agents and attributes.
    pub fn vocab_size(&self) -> usize {
        RESERVED + self.n_agents + self.n_attrs
    }

    pub fn agent_token(&self, a: usize) -> usize {
        RESERVED + a
    }

    pub fn attr_token(&self, x: usize) -> usize {
        RESERVED + self.n_agents + x
    }

    fn fact_range(&self) -> (usize, usize) {
        (self.min_len.div_ceil(2), self.max_len / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.fact_range();
        if lo < 1 || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "premise length range {}..={} holds no whole fact",
                self.min_len, self.max_len
            )));
        }
        if hi + 1 > self.n_agents {
            return Err(Error::InvalidArgument(format!(
                "{} agents cannot fill {hi} distinct facts plus an absent agent",
                self.n_agents
            )));
        }
        if self.n_attrs < 2 {
            return Err(Error::InvalidArgument("need at least two attributes".into()));
        }
        Ok(())
    }
}

/// Balanced entails / contradicts / neutral pairs over random worlds.
///
/// The discriminating fact sits at a uniformly random position among the
/// premise facts.
pub fn gen_toy_entailment(n: usize, seed: u64, grammar: &EntailGrammar) -> Result<Vec<Example>> {
    grammar.validate()?;
    let (lo, hi) = grammar.fact_range();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents: Vec<usize> = (0..grammar.n_agents).collect();
    let mut out: Vec<Example> = (0..n)
        .map(|i| {
            let label = Entailment::ALL[i % 3];
            let n_facts = rng.gen_range(lo..=hi);
            let chosen: Vec<usize> = agents
                .choose_multiple(&mut rng, n_facts + 1)
                .copied()
                .collect();
            let attrs: Vec<usize> = (0..n_facts)
                .map(|_| rng.gen_range(0..grammar.n_attrs))
                .collect();
            let pos = rng.gen_range(0..n_facts);
            let (agent, attr) = match label {
                Entailment::Entails => (chosen[pos], attrs[pos]),
                Entailment::Contradicts => {
                    let shift = rng.gen_range(1..grammar.n_attrs);
                    (chosen[pos], (attrs[pos] + shift) % grammar.n_attrs)
                }
                Entailment::Neutral => (chosen[n_facts], rng.gen_range(0..grammar.n_attrs)),
            };
            let premise = chosen[..n_facts]
                .iter()
                .zip(&attrs)
                .flat_map(|(&a, &x)| [grammar.agent_token(a), grammar.attr_token(x)])
                .collect();
            Example {
                premise,
                hypothesis: vec![grammar.agent_token(agent), grammar.attr_token(attr)],
                label: Label::Class(label as usize),
            }
        })
        .collect();
    out.shuffle(&mut rng);
    Ok(out)
}

/// A premise/hypothesis/label triple as stored in a JSON Lines file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawPair {
    pub premise: String,
    pub hypothesis: String,
    pub label: String,
}

/// Reads every line of a JSON Lines file with string fields `premise`,
/// `hypothesis` and `label`. Blank lines are ignored.
pub fn read_jsonl(path: &Path) -> Result<Vec<RawPair>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let v: Value = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let field = |name: &str| -> Result<String> {
            v.get(name)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| err(format!("missing string field {name:?}")))
        };
        out.push(RawPair {
            premise: field("premise")?,
            hypothesis: field("hypothesis")?,
            label: field("label")?,
        });
    }
    Ok(out)
}

/// Loads labelled pairs, returning the examples and how many lines were
/// skipped for carrying an unknown label such as `-`.
pub fn load_jsonl(path: &Path, vocab: &Vocab) -> Result<(Vec<Example>, usize)> {
    let mut skipped = 0;
    let mut out = Vec::new();
    for raw in read_jsonl(path)? {
        let Some(label) = Entailment::from_name(&raw.label) else {
            skipped += 1;
            continue;
        };
        out.push(Example {
            premise: vocab.encode(&raw.premise),
            hypothesis: vocab.encode(&raw.hypothesis),
            label: Label::Class(label as usize),
        });
    }
    Ok((out, skipped))
}

/// Writes class-labelled examples back out as JSON Lines.
pub fn write_jsonl(path: &Path, examples: &[Example], vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let text = |ids: &[usize]| -> String {
        ids.iter()
            .map(|&i| vocab.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for ex in examples {
        let label = ex
            .class()
            .and_then(|c| Entailment::ALL.get(c))
            .map_or("-", |l| l.name());
        let obj = serde_json::json!({
            "premise": text(&ex.premise),
            "hypothesis": text(&ex.hypothesis),
            "label": label,
        });
        writeln!(w, "{obj}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_task_basics() {
        let d = gen_copy_task(20, 1, 10, 4).unwrap();
        assert!(d.iter().all(|e| e.premise.len() == 1));
        assert!(d.iter().all(|e| e.label == Label::Sequence(e.premise.clone())));
        assert_eq!(d, gen_copy_task(20, 1, 10, 4).unwrap());
        assert!(gen_copy_task(1, 5, 3, 0).is_err());
        assert!(gen_copy_task(1, 0, 10, 0).is_err());
    }

    #[test]
    fn copy_task_tokens_uniform() {
        let d = gen_copy_task(10_000, 10, 8, 1).unwrap();
        let mut counts = [0usize; 8];
        for e in &d {
            for &t in &e.premise {
                counts[t] += 1;
            }
        }
        assert_eq!(counts[..RESERVED].iter().sum::<usize>(), 0);
        let expected = 100_000.0 / 5.0;
        for &c in &counts[RESERVED..] {
            assert!((c as f64 - expected).abs() / expected < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn kv_single_pair_and_errors() {
        let d = gen_kv_recall_task(10, 1, 20, 0).unwrap();
        let layout = KvLayout::new(20).unwrap();
        for e in &d {
            assert_eq!(e.premise.len(), 2);
            assert_eq!(e.hypothesis, vec![e.premise[0]]);
            assert_eq!(e.class(), Some(e.premise[1] - layout.value_start));
        }
        assert!(gen_kv_recall_task(1, 0, 20, 0).is_err());
        assert!(gen_kv_recall_task(1, 9, 20, 0).is_err());
    }

    #[test]
    fn kv_query_position_uniform() {
        let n = 100_000;
        let d = gen_kv_recall_task(n, 10, 64, 3).unwrap();
        let mut counts = [0usize; 10];
        for e in &d {
            let pos = e.premise.iter().step_by(2).position(|&k| k == e.hypothesis[0]);
            counts[pos.unwrap()] += 1;
        }
        for &c in &counts {
            assert!((c as f64 - 10_000.0).abs() / 10_000.0 < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn toy_entailment_construction_rules() {
        let g = EntailGrammar::default();
        let d = gen_toy_entailment(300, 1, &g).unwrap();
        let mut counts = [0usize; 3];
        for e in &d {
            counts[e.class().unwrap()] += 1;
            assert!(e.premise.len() >= g.min_len && e.premise.len() <= g.max_len);
        }
        assert_eq!(counts, [100, 100, 100]);
        assert!(gen_toy_entailment(3, 0, &EntailGrammar { n_agents: 5, ..g }).is_err());
    }

    #[test]
    fn vocab_examples() {
        let v = build_vocab(["hello", "hello"], 10).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("hello"), 3);
        assert_eq!(v.id("nope"), UNK);

        let v = build_vocab(["b", "a", "c", "a", "b"], 5).unwrap();
        assert_eq!(&v.tokens()[3..], ["a", "b"]);
        assert!(build_vocab(["a"], 3).is_err());
    }
}
