//! Task-level networks: the two-layer sentence-pair classifier and the
//! Dual AM-GRU auto-encoder, plus their checkpoint format.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::am_rnn::{AmRnn, AmRnnConfig, KeyProjection, StepTrace};
use crate::autodiff::{ParamId, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::cells::{CellFunction, CellState, GruCell};
use crate::data::{Example, Label, PAD, START};
use crate::error::{Error, Result};
use crate::hrr::{make_permutations, PermutationSet};
use crate::real::Real;
use crate::train::{dropout, DropoutMode, Model, Score};

/// Bottom-layer architecture of the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Plain GRU, hypothesis starts from the final premise state.
    Gru,
    /// AM-GRU, hypothesis memory starts as the final premise memory.
    AmGru,
    /// Dual AM-GRU, hypothesis has its own memory and reads the premise's.
    DualAmGru,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Gru => "gru",
            Arch::AmGru => "am-gru",
            Arch::DualAmGru => "dual-am-gru",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(Arch::Gru),
            "am-gru" => Ok(Arch::AmGru),
            "dual-am-gru" => Ok(Arch::DualAmGru),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture {other:?} (expected gru, am-gru or dual-am-gru)"
            ))),
        }
    }
}

pub const DEFAULT_EMBED_INIT: f64 = 1.0;
pub const DEFAULT_KEY_INIT_GAIN: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EntailConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub redundancy: usize,
    pub n_classes: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    /// Premise and hypothesis bottom layers use the same weights.
    pub shared_params: bool,
    /// `r'_t = r_t` in the dual read.
    pub shared_dual_key: bool,
    /// Embeddings start uniform in `±embed_init`.
    pub embed_init: f64,
    /// Key projections start uniform in `±key_init_gain / sqrt(fan_in)`.
    pub key_init_gain: f64,
    pub seed: u64,
}

impl Default for EntailConfig {
    fn default() -> Self {
        Self {
            arch: Arch::DualAmGru,
            vocab_size: 64,
            embed_dim: 32,
            hidden: 64,
            redundancy: 8,
            n_classes: 3,
            mlp_hidden: 64,
            dropout: 0.1,
            shared_params: true,
            shared_dual_key: true,
            embed_init: DEFAULT_EMBED_INIT,
            key_init_gain: DEFAULT_KEY_INIT_GAIN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Bottom<T> {
    Gru(GruCell),
    Am(AmRnn<T, GruCell>),
}

struct BottomRun {
    outputs: Vec<Var>,
    final_h: Var,
    final_memory: Option<Var>,
    trace: Vec<StepTrace>,
}

/// Token sequences of a batch laid out time-major and padded with [`PAD`].
#[derive(Clone, Debug)]
pub struct Steps {
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl Steps {
    pub fn new(seqs: &[&[usize]]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptySequence("batch"));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        if lengths.iter().any(|&l| l == 0) {
            return Err(Error::EmptySequence("token sequence"));
        }
        let t_max = *lengths.iter().max().expect("non-empty");
        let ids = (0..t_max)
            .map(|t| seqs.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect())
            .collect();
        Ok(Self { ids, lengths })
    }

    pub fn is_ragged(&self) -> bool {
        self.lengths.iter().any(|&l| l != self.ids.len())
    }

    fn lengths_if_ragged(&self) -> Option<&[usize]> {
        self.is_ragged().then_some(&self.lengths[..])
    }
}

/// Per-sequence internals of one classifier forward pass.
#[derive(Clone, Debug)]
pub struct EntailForward {
    pub logits: Var,
    pub premise_out: Var,
    pub hypothesis_out: Var,
    /// `[o_p; o_h; |o_p - o_h|]`
    pub features: Var,
    /// Final premise memory `m^x` (AM architectures).
    pub premise_memory: Option<Var>,
    /// Initial hypothesis memory `m^y_0` (AM architectures).
    pub hypothesis_init_memory: Option<Var>,
    /// Final hypothesis memory (AM architectures).
    pub hypothesis_memory: Option<Var>,
    pub premise_outputs: Vec<Var>,
    pub hypothesis_outputs: Vec<Var>,
    pub premise_trace: Vec<StepTrace>,
    pub hypothesis_trace: Vec<StepTrace>,
}

/// Embedding, recurrent bottom layer, GRU top layer and a two-layer ReLU
/// classifier over `[o_p; o_h; |o_p - o_h|]`.
#[derive(Clone, Debug)]
pub struct EntailModel<T> {
    config: EntailConfig,
    store: ParamStore<T>,
    embed: ParamId,
    premise_bottom: Bottom<T>,
    hypothesis_bottom: Bottom<T>,
    top: GruCell,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

fn am_bottom<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    cfg: &EntailConfig,
    perms: &Arc<PermutationSet>,
    dual: bool,
    rng: &mut ChaCha8Rng,
) -> Result<AmRnn<T, GruCell>> {
    let am_cfg = AmRnnConfig {
        input_size: cfg.embed_dim,
        hidden_size: cfg.hidden,
        memory_size: cfg.hidden,
        redundancy: cfg.redundancy,
        dual,
        shared_dual_key: cfg.shared_dual_key,
    };
    let cell = GruCell::new(store, &format!("{name}.cell"), am_cfg.cell_input_size(), cfg.hidden, rng);
    let proj = KeyProjection::new(
        store,
        &format!("{name}.key"),
        cfg.embed_dim + cfg.hidden,
        cfg.hidden,
        dual && !cfg.shared_dual_key,
        cfg.key_init_gain,
        rng,
    );
    AmRnn::new(cell, proj, perms.clone(), am_cfg)
}

fn check_hidden(hidden: usize, redundancy: usize) -> Result<()> {
    if hidden == 0 || hidden % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "hidden size must be even so the state maps onto complex memory (got {hidden})"
        )));
    }
    if redundancy == 0 {
        return Err(Error::InvalidArgument("redundancy must be >= 1".into()));
    }
    Ok(())
}

impl<T: Real> EntailModel<T> {
    pub fn new(config: EntailConfig) -> Result<Self> {
        check_hidden(config.hidden, config.redundancy)?;
        if config.n_classes < 2 || config.vocab_size <= START {
            return Err(Error::InvalidArgument(
                "classifier needs >= 2 classes and a non-trivial vocabulary".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let perms = Arc::new(make_permutations(
            config.redundancy,
            config.hidden / 2,
            config.seed ^ 0x5eed_0f_9e77,
        )?);
        let mut store = ParamStore::new();
        let embed = store.add(
            "embed",
            Tensor::uniform(config.vocab_size, config.embed_dim, config.embed_init, &mut rng),
        );
        let (premise_bottom, hypothesis_bottom) = match config.arch {
            Arch::Gru => {
                let p = GruCell::new(&mut store, "bottom", config.embed_dim, config.hidden, &mut rng);
                let h = if config.shared_params {
                    p.clone()
                } else {
                    GruCell::new(&mut store, "bottom_hyp", config.embed_dim, config.hidden, &mut rng)
                };
                (Bottom::Gru(p), Bottom::Gru(h))
            }
            Arch::AmGru => {
                let p = am_bottom(&mut store, "bottom", &config, &perms, false, &mut rng)?;
                let h = if config.shared_params {
                    p.clone()
                } else {
                    am_bottom(&mut store, "bottom_hyp", &config, &perms, false, &mut rng)?
                };
                (Bottom::Am(p), Bottom::Am(h))
            }
            Arch::DualAmGru => {
                if config.shared_params {
                    let net = am_bottom(&mut store, "bottom", &config, &perms, true, &mut rng)?;
                    (Bottom::Am(net.clone()), Bottom::Am(net))
                } else {
                    let p = am_bottom(&mut store, "bottom", &config, &perms, false, &mut rng)?;
                    let h = am_bottom(&mut store, "bottom_hyp", &config, &perms, true, &mut rng)?;
                    (Bottom::Am(p), Bottom::Am(h))
                }
            }
        };
        let top = GruCell::new(&mut store, "top", config.hidden, config.hidden, &mut rng);
        let f = 3 * config.hidden;
        let l1 = (6.0 / (f + config.mlp_hidden) as f64).sqrt();
        let l2 = (6.0 / (config.mlp_hidden + config.n_classes) as f64).sqrt();
        let mlp_w1 = store.add("mlp.w1", Tensor::uniform(f, config.mlp_hidden, l1, &mut rng));
        let mlp_b1 = store.add("mlp.b1", Tensor::zeros(1, config.mlp_hidden));
        let mlp_w2 = store.add(
            "mlp.w2",
            Tensor::uniform(config.mlp_hidden, config.n_classes, l2, &mut rng),
        );
        let mlp_b2 = store.add("mlp.b2", Tensor::zeros(1, config.n_classes));
        Ok(Self {
            config,
            store,
            embed,
            premise_bottom,
            hypothesis_bottom,
            top,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
        })
    }

    pub fn config(&self) -> &EntailConfig {
        &self.config
    }

    /// Permutations shared by every memory in the model (AM architectures).
    pub fn perms(&self) -> Option<&Arc<PermutationSet>> {
        match &self.premise_bottom {
            Bottom::Am(net) => Some(net.perms()),
            Bottom::Gru(_) => None,
        }
    }

    fn embed_steps(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        steps: &Steps,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        steps
            .ids
            .iter()
            .map(|ids| {
                let e = tape.gather_rows(p[self.embed], ids)?;
                self.apply_dropout(tape, e, rng)
            })
            .collect()
    }

    fn apply_dropout(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => {
                dropout(tape, x, self.config.dropout, DropoutMode::Train, r)
            }
            _ => Ok(x),
        }
    }

    fn run_gru(
        cell: &GruCell,
        tape: &mut Tape<T>,
        p: &ParamVars,
        inputs: &[Var],
        h0: Var,
        lengths: Option<&[usize]>,
    ) -> Result<(Vec<Var>, Var)> {
        let mut h = h0;
        let mut outs = Vec::with_capacity(inputs.len());
        for (t, &x) in inputs.iter().enumerate() {
            let state = CellState {
                memory: h,
                remainder: None,
            };
            let (_, next) = cell.step(tape, p, x, &state)?;
            h = match lengths {
                Some(lens) => {
                    let mask: Vec<bool> = lens.iter().map(|&l| t < l).collect();
                    tape.mask_rows(next, h, &mask)?
                }
                None => next,
            };
            outs.push(h);
        }
        Ok((outs, h))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_bottom(
        &self,
        bottom: &Bottom<T>,
        tape: &mut Tape<T>,
        p: &ParamVars,
        inputs: &[Var],
        steps: &Steps,
        init_h: Option<Var>,
        init_memory: Option<Var>,
        source: Option<Var>,
        record: bool,
    ) -> Result<BottomRun> {
        let batch = steps.lengths.len();
        let lengths = steps.lengths_if_ragged();
        match bottom {
            Bottom::Gru(cell) => {
                let h0 = init_h.unwrap_or_else(|| tape.zeros(batch, self.config.hidden));
                let (outputs, final_h) = Self::run_gru(cell, tape, p, inputs, h0, lengths)?;
                Ok(BottomRun {
                    outputs,
                    final_h,
                    final_memory: None,
                    trace: Vec::new(),
                })
            }
            Bottom::Am(net) => {
                let mut init = net.zero_state(tape, batch);
                if let Some(m) = init_memory {
                    init.memory = m;
                }
                let run = match source {
                    Some(mx) => net.dual_am_run(tape, p, inputs, init, mx, lengths, record)?,
                    None => net.am_run(tape, p, inputs, init, lengths, record)?,
                };
                Ok(BottomRun {
                    final_h: run.final_state.h,
                    final_memory: Some(run.final_state.memory),
                    outputs: run.outputs,
                    trace: run.trace,
                })
            }
        }
    }

    /// Runs the premise, then the hypothesis conditioned on it according to
    /// the architecture, without the top layer or classifier.
    #[allow(clippy::type_complexity)]
    fn encode_pair(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        premise: &Steps,
        hypothesis: &Steps,
        rng: &mut Option<&mut ChaCha8Rng>,
        record: bool,
    ) -> Result<(BottomRun, BottomRun, Option<Var>)> {
        let px = self.embed_steps(tape, p, premise, rng)?;
        let hx = self.embed_steps(tape, p, hypothesis, rng)?;
        let prem = self.run_bottom(&self.premise_bottom, tape, p, &px, premise, None, None, None, record)?;
        let (hyp, init_mem) = match self.config.arch {
            Arch::Gru => {
                let run = self.run_bottom(
                    &self.hypothesis_bottom,
                    tape,
                    p,
                    &hx,
                    hypothesis,
                    Some(prem.final_h),
                    None,
                    None,
                    record,
                )?;
                (run, None)
            }
            Arch::AmGru => {
                let mx = prem.final_memory.expect("AM bottom");
                let run = self.run_bottom(
                    &self.hypothesis_bottom,
                    tape,
                    p,
                    &hx,
                    hypothesis,
                    None,
                    Some(mx),
                    None,
                    record,
                )?;
                (run, Some(mx))
            }
            Arch::DualAmGru => {
                let mx = prem.final_memory.expect("AM bottom");
                let run = self.run_bottom(
                    &self.hypothesis_bottom,
                    tape,
                    p,
                    &hx,
                    hypothesis,
                    None,
                    None,
                    Some(mx),
                    record,
                )?;
                let zero = match &self.hypothesis_bottom {
                    Bottom::Am(net) => net.zero_state(tape, hypothesis.lengths.len()).memory,
                    Bottom::Gru(_) => unreachable!(),
                };
                (run, Some(zero))
            }
        };
        Ok((prem, hyp, init_mem))
    }

    /// Bottom layers only: premise outputs, hypothesis outputs, `m^x` and traces.
    pub fn conditional_encode(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        batch: &[&Example],
        record: bool,
    ) -> Result<EntailForward> {
        self.forward(tape, p, batch, None, record)
    }

    /// `[a; b; |a - b|]`
    pub fn pair_features(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
        let diff = tape.sub(a, b)?;
        let diff = tape.abs(diff);
        tape.concat(&[a, b, diff])
    }

    /// Full forward pass. `rng` enables dropout (training mode).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        batch: &[&Example],
        mut rng: Option<&mut ChaCha8Rng>,
        record: bool,
    ) -> Result<EntailForward> {
        let premise = Steps::new(&batch.iter().map(|e| &e.premise[..]).collect::<Vec<_>>())?;
        let hypothesis = Steps::new(&batch.iter().map(|e| &e.hypothesis[..]).collect::<Vec<_>>())?;
        let (prem, hyp, init_mem) =
            self.encode_pair(tape, p, &premise, &hypothesis, &mut rng, record)?;

        let rows = batch.len();
        let top_p = {
            let h0 = tape.zeros(rows, self.config.hidden);
            Self::run_gru(&self.top, tape, p, &prem.outputs, h0, premise.lengths_if_ragged())?.1
        };
        let top_h = {
            let h0 = tape.zeros(rows, self.config.hidden);
            Self::run_gru(&self.top, tape, p, &hyp.outputs, h0, hypothesis.lengths_if_ragged())?.1
        };
        let o_p = self.apply_dropout(tape, top_p, &mut rng)?;
        let o_h = self.apply_dropout(tape, top_h, &mut rng)?;
        let features = Self::pair_features(tape, o_p, o_h)?;
        let z = tape.matmul(features, p[self.mlp_w1])?;
        let z = tape.add_bias(z, p[self.mlp_b1])?;
        let z = tape.relu(z);
        let logits = tape.matmul(z, p[self.mlp_w2])?;
        let logits = tape.add_bias(logits, p[self.mlp_b2])?;
        Ok(EntailForward {
            logits,
            premise_out: o_p,
            hypothesis_out: o_h,
            features,
            premise_memory: prem.final_memory,
            hypothesis_init_memory: init_mem,
            hypothesis_memory: hyp.final_memory,
            premise_outputs: prem.outputs,
            hypothesis_outputs: hyp.outputs,
            premise_trace: prem.trace,
            hypothesis_trace: hyp.trace,
        })
    }

    /// Class logits for a batch in evaluation mode.
    pub fn logits(&self, batch: &[&Example]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.store.bind_constants(&mut tape);
        let fwd = self.forward(&mut tape, &p, batch, None, false)?;
        Ok(tape.value(fwd.logits).clone())
    }
}

fn class_labels(batch: &[&Example], n_classes: usize) -> Result<Vec<usize>> {
    batch
        .iter()
        .map(|e| match e.label {
            Label::Class(c) if c < n_classes => Ok(c),
            Label::Class(c) => Err(Error::InvalidArgument(format!(
                "label {c} out of range for {n_classes} classes"
            ))),
            Label::Sequence(_) => Err(Error::InvalidArgument(
                "classifier given a sequence-labelled example".into(),
            )),
        })
        .collect()
}

/// Softmax cross-entropy averaged over the batch.
pub fn entail_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> Model<T> for EntailModel<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn loss(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        batch: &[&Example],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let labels = class_labels(batch, self.config.n_classes)?;
        let fwd = self.forward(tape, p, batch, rng, false)?;
        entail_loss(tape, fwd.logits, &labels)
    }

    fn score(&self, batch: &[&Example]) -> Result<Score> {
        let labels = class_labels(batch, self.config.n_classes)?;
        let mut tape = Tape::new();
        let p = self.store.bind_constants(&mut tape);
        let fwd = self.forward(&mut tape, &p, batch, None, false)?;
        let loss = entail_loss(&mut tape, fwd.logits, &labels)?;
        let logits = tape.value(fwd.logits);
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(r, &l)| argmax(logits.row_slice(*r)) == l)
            .count();
        Ok(Score {
            correct,
            count: batch.len(),
            loss_sum: tape.value(loss).item().as_f64() * batch.len() as f64,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub redundancy: usize,
    pub shared_dual_key: bool,
    pub dropout: f64,
    pub embed_init: f64,
    pub key_init_gain: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            embed_dim: 32,
            hidden: 64,
            redundancy: 8,
            shared_dual_key: true,
            dropout: 0.0,
            embed_init: DEFAULT_EMBED_INIT,
            key_init_gain: DEFAULT_KEY_INIT_GAIN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AutoencodeForward {
    /// One `batch x vocab` tensor per target step.
    pub logits: Vec<Var>,
    /// Mean per-step cross-entropy against the source tokens.
    pub loss: Var,
    pub encoder_trace: Vec<StepTrace>,
    pub decoder_trace: Vec<StepTrace>,
    pub source_memory: Var,
}

/// AM-GRU encoder writing `m^x`, Dual AM-GRU decoder reading it, each with
/// its own embeddings and weights, and a vocabulary projection.
#[derive(Clone, Debug)]
pub struct AutoencoderModel<T> {
    config: AutoencoderConfig,
    store: ParamStore<T>,
    enc_embed: ParamId,
    dec_embed: ParamId,
    encoder: AmRnn<T, GruCell>,
    decoder: AmRnn<T, GruCell>,
    out_w: ParamId,
    out_b: ParamId,
}

impl<T: Real> AutoencoderModel<T> {
    pub fn new(config: AutoencoderConfig) -> Result<Self> {
        check_hidden(config.hidden, config.redundancy)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let perms = Arc::new(make_permutations(
            config.redundancy,
            config.hidden / 2,
            config.seed ^ 0x5eed_0f_9e77,
        )?);
        let mut store = ParamStore::new();
        let ec = EntailConfig {
            arch: Arch::DualAmGru,
            vocab_size: config.vocab_size,
            embed_dim: config.embed_dim,
            hidden: config.hidden,
            redundancy: config.redundancy,
            n_classes: config.vocab_size,
            mlp_hidden: 0,
            dropout: config.dropout,
            shared_params: false,
            shared_dual_key: config.shared_dual_key,
            embed_init: config.embed_init,
            key_init_gain: config.key_init_gain,
            seed: config.seed,
        };
        let enc_embed = store.add(
            "encoder.embed",
            Tensor::uniform(config.vocab_size, config.embed_dim, config.embed_init, &mut rng),
        );
        let encoder = am_bottom(&mut store, "encoder", &ec, &perms, false, &mut rng)?;
        let dec_embed = store.add(
            "decoder.embed",
            Tensor::uniform(config.vocab_size, config.embed_dim, config.embed_init, &mut rng),
        );
        let decoder = am_bottom(&mut store, "decoder", &ec, &perms, true, &mut rng)?;
        let lim = (6.0 / (config.hidden + config.vocab_size) as f64).sqrt();
        let out_w = store.add(
            "decoder.out_w",
            Tensor::uniform(config.hidden, config.vocab_size, lim, &mut rng),
        );
        let out_b = store.add("decoder.out_b", Tensor::zeros(1, config.vocab_size));
        Ok(Self {
            config,
            store,
            enc_embed,
            dec_embed,
            encoder,
            decoder,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn encoder(&self) -> &AmRnn<T, GruCell> {
        &self.encoder
    }

    pub fn decoder(&self) -> &AmRnn<T, GruCell> {
        &self.decoder
    }

    /// Teacher-forced pass: the decoder sees `<s> x_1 .. x_{T-1}` and is
    /// scored against `x_1 .. x_T`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        batch: &[&Example],
        mut rng: Option<&mut ChaCha8Rng>,
        record: bool,
    ) -> Result<AutoencodeForward> {
        let source = Steps::new(&batch.iter().map(|e| &e.premise[..]).collect::<Vec<_>>())?;
        if source.is_ragged() {
            return Err(Error::InvalidArgument(
                "auto-encoding batches must have equal source lengths".into(),
            ));
        }
        let rows = batch.len();
        let drop = |tape: &mut Tape<T>, x: Var, rng: &mut Option<&mut ChaCha8Rng>| match rng {
            Some(r) if self.config.dropout > 0.0 => {
                dropout(tape, x, self.config.dropout, DropoutMode::Train, r)
            }
            _ => Ok(x),
        };

        let mut enc_in = Vec::with_capacity(source.ids.len());
        for ids in &source.ids {
            let e = tape.gather_rows(p[self.enc_embed], ids)?;
            enc_in.push(drop(tape, e, &mut rng)?);
        }
        let init = self.encoder.zero_state(tape, rows);
        let enc = self.encoder.am_run(tape, p, &enc_in, init, None, record)?;
        let mx = enc.final_state.memory;

        let mut dec_in = Vec::with_capacity(source.ids.len());
        for t in 0..source.ids.len() {
            let ids = if t == 0 {
                vec![START; rows]
            } else {
                source.ids[t - 1].clone()
            };
            let e = tape.gather_rows(p[self.dec_embed], &ids)?;
            dec_in.push(drop(tape, e, &mut rng)?);
        }
        let init = self.decoder.zero_state(tape, rows);
        let dec = self.decoder.dual_am_run(tape, p, &dec_in, init, mx, None, record)?;

        let mut logits = Vec::with_capacity(dec.outputs.len());
        let mut total: Option<Var> = None;
        for (t, &h) in dec.outputs.iter().enumerate() {
            let h = drop(tape, h, &mut rng)?;
            let l = tape.matmul(h, p[self.out_w])?;
            let l = tape.add_bias(l, p[self.out_b])?;
            let step_loss = tape.softmax_cross_entropy(l, &source.ids[t])?;
            total = Some(match total {
                Some(acc) => tape.add(acc, step_loss)?,
                None => step_loss,
            });
            logits.push(l);
        }
        let loss = tape.scale(
            total.expect("non-empty"),
            T::one() / T::lit(source.ids.len() as f64),
        );
        Ok(AutoencodeForward {
            logits,
            loss,
            encoder_trace: enc.trace,
            decoder_trace: dec.trace,
            source_memory: mx,
        })
    }
}

impl<T: Real> Model<T> for AutoencoderModel<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn loss(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        batch: &[&Example],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        Ok(self.forward(tape, p, batch, rng, false)?.loss)
    }

    /// Token-level accuracy.
    fn score(&self, batch: &[&Example]) -> Result<Score> {
        let mut tape = Tape::new();
        let p = self.store.bind_constants(&mut tape);
        let fwd = self.forward(&mut tape, &p, batch, None, false)?;
        let mut correct = 0;
        for (t, &l) in fwd.logits.iter().enumerate() {
            let v = tape.value(l);
            correct += batch
                .iter()
                .enumerate()
                .filter(|(r, e)| argmax(v.row_slice(*r)) == e.premise[t])
                .count();
        }
        let steps = fwd.logits.len();
        Ok(Score {
            correct,
            count: batch.len() * steps,
            loss_sum: tape.value(fwd.loss).item().as_f64() * (batch.len() * steps) as f64,
        })
    }
}

const CHECKPOINT_MAGIC: &str = "amrnn-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes every tensor of `store` as a text header followed by
/// little-endian `f32` data in header order.
///
/// ```text
/// amrnn-checkpoint 1
/// tensors <count>
/// <name> <rows> <cols>      (one line per tensor)
/// end
/// <raw f32 LE data>
/// ```
pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
    writeln!(out, "tensors {}", store.len())?;
    for (name, t) in store.names().iter().zip(store.tensors()) {
        if name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("tensor name {name:?} contains whitespace")));
        }
        writeln!(out, "{name} {} {}", t.rows(), t.cols())?;
    }
    writeln!(out, "end")?;
    for t in store.tensors() {
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint into `(name, tensor)` pairs.
pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<fs::File>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    let magic = next_line(&mut r)?;
    if magic != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
        return Err(Error::Checkpoint(format!("unsupported header {magic:?}")));
    }
    let count: usize = next_line(&mut r)?
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing tensor count".into()))?;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let l = next_line(&mut r)?;
        let parts: Vec<&str> = l.split(' ').collect();
        let parsed = match parts.as_slice() {
            [name, rows, cols] => rows
                .parse::<usize>()
                .ok()
                .zip(cols.parse::<usize>().ok())
                .map(|(a, b)| (name.to_string(), a, b)),
            _ => None,
        };
        shapes.push(parsed.ok_or_else(|| Error::Checkpoint(format!("bad tensor line {l:?}")))?);
    }
    if next_line(&mut r)? != "end" {
        return Err(Error::Checkpoint("missing end of header".into()));
    }
    let mut out = Vec::with_capacity(count);
    for (name, rows, cols) in shapes {
        let mut buf = vec![0u8; rows * cols * 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated data for {name}")))?;
        let data = buf
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        out.push((name, Tensor::new(rows, cols, data)?));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(out)
}

/// Loads a checkpoint into a store whose names and shapes must match.
pub fn load_checkpoint<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let entries = read_checkpoint::<T>(path)?;
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for ((name, _), expected) in entries.iter().zip(store.names()) {
        if name != expected {
            return Err(Error::Checkpoint(format!(
                "tensor {name} where {expected} was expected"
            )));
        }
    }
    store.load(entries.into_iter().map(|(_, t)| t).collect())
}

/// Unit key `exp(i·θ)` for the fixed-key projection, laid out `[re; im]`.
pub fn unit_key<T: Real>(phases: &[f64]) -> Vec<T> {
    let mut key: Vec<T> = phases.iter().map(|p| T::lit(p.cos())).collect();
    key.extend(phases.iter().map(|p| T::lit(p.sin())));
    key
}
