//! Flat `key = value` experiment configuration and the runner behind each
//! CLI subcommand. Every run writes into a fresh timestamped directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{
    emit_heatmap, encoder_key_collapse_metric, key_vectors, noise_bench, trace_heatmap,
    write_noise_csv, WrittenContent,
};
use crate::autodiff::Tape;
use crate::data::{
    build_vocab, gen_copy_task, gen_kv_recall_task, gen_toy_entailment, load_jsonl, read_jsonl,
    tokenize, EntailGrammar, Example, KvLayout, Vocab,
};
use crate::error::{Error, Result};
use crate::models::{
    load_checkpoint, save_checkpoint, Arch, DEFAULT_EMBED_INIT, DEFAULT_KEY_INIT_GAIN, AutoencoderConfig, AutoencoderModel, EntailConfig,
    EntailModel,
};
use crate::train::{
    evaluate, train_loop, train_step, AdamConfig, AdamState, Model, TrainConfig, METRICS_HEADER,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Heatmap,
    Autoencode,
    NoiseBench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Heatmap => "heatmap",
            Command::Autoencode => "autoencode",
            Command::NoiseBench => "noise-bench",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Command::Train),
            "eval" => Ok(Command::Eval),
            "heatmap" => Ok(Command::Heatmap),
            "autoencode" => Ok(Command::Autoencode),
            "noise-bench" => Ok(Command::NoiseBench),
            other => Err(Error::InvalidArgument(format!("unknown subcommand {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Copy,
    Kv,
    Entail,
    Snli,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Kv => "kv",
            Task::Entail => "entail",
            Task::Snli => "snli",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "kv" => Ok(Task::Kv),
            "entail" => Ok(Task::Entail),
            "snli" => Ok(Task::Snli),
            other => Err(Error::InvalidArgument(format!(
                "unknown task {other:?} (expected copy, kv, entail or snli)"
            ))),
        }
    }
}

/// Every knob of an experiment. Serialises to and from `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub arch: Arch,
    pub hidden: usize,
    pub embed_dim: usize,
    pub redundancy: usize,
    pub shared_params: bool,
    pub shared_dual_key: bool,
    pub dropout: f64,
    pub embed_init: f64,
    pub key_init_gain: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub halve_lr: bool,
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub kv_pairs: usize,
    pub seq_len: usize,
    pub entail_min_len: usize,
    pub entail_max_len: usize,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub vocab_max: usize,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub heatmap_content: WrittenContent,
    pub heatmap_samples: usize,
    pub collapse_interval: usize,
    pub noise_dims: Vec<usize>,
    pub noise_items: Vec<usize>,
    pub noise_redundancy: Vec<usize>,
    pub noise_trials: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Kv,
            arch: Arch::DualAmGru,
            hidden: 64,
            embed_dim: 32,
            redundancy: 8,
            shared_params: true,
            shared_dual_key: true,
            dropout: 0.1,
            embed_init: DEFAULT_EMBED_INIT,
            key_init_gain: DEFAULT_KEY_INIT_GAIN,
            lr: 1e-3,
            batch_size: 50,
            max_steps: 20_000,
            eval_interval: 1000,
            clip_norm: 0.0,
            halve_lr: true,
            seed: 0,
            n_train: 5000,
            n_dev: 1000,
            n_test: 1000,
            vocab_size: 64,
            kv_pairs: 10,
            seq_len: 12,
            entail_min_len: 12,
            entail_max_len: 40,
            train_path: None,
            dev_path: None,
            test_path: None,
            vocab_max: 20_000,
            checkpoint: None,
            out_dir: PathBuf::from("runs"),
            heatmap_content: WrittenContent::Delta,
            heatmap_samples: 10,
            collapse_interval: 500,
            noise_dims: vec![64],
            noise_items: vec![1, 2, 4, 8, 16, 32],
            noise_redundancy: vec![1, 2, 4, 8, 16],
            noise_trials: 100,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("invalid value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "task" => self.task = v.parse()?,
            "arch" => self.arch = v.parse()?,
            "hidden" => self.hidden = parse_value(key, v)?,
            "embed_dim" => self.embed_dim = parse_value(key, v)?,
            "redundancy" => self.redundancy = parse_value(key, v)?,
            "shared_params" => self.shared_params = parse_value(key, v)?,
            "shared_dual_key" => self.shared_dual_key = parse_value(key, v)?,
            "dropout" => self.dropout = parse_value(key, v)?,
            "embed_init" => self.embed_init = parse_value(key, v)?,
            "key_init_gain" => self.key_init_gain = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "max_steps" => self.max_steps = parse_value(key, v)?,
            "eval_interval" => self.eval_interval = parse_value(key, v)?,
            "clip_norm" => self.clip_norm = parse_value(key, v)?,
            "halve_lr" => self.halve_lr = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "n_train" => self.n_train = parse_value(key, v)?,
            "n_dev" => self.n_dev = parse_value(key, v)?,
            "n_test" => self.n_test = parse_value(key, v)?,
            "vocab_size" => self.vocab_size = parse_value(key, v)?,
            "kv_pairs" => self.kv_pairs = parse_value(key, v)?,
            "seq_len" => self.seq_len = parse_value(key, v)?,
            "entail_min_len" => self.entail_min_len = parse_value(key, v)?,
            "entail_max_len" => self.entail_max_len = parse_value(key, v)?,
            "train_path" => self.train_path = opt_path(v),
            "dev_path" => self.dev_path = opt_path(v),
            "test_path" => self.test_path = opt_path(v),
            "vocab_max" => self.vocab_max = parse_value(key, v)?,
            "checkpoint" => self.checkpoint = opt_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "heatmap_content" => self.heatmap_content = v.parse()?,
            "heatmap_samples" => self.heatmap_samples = parse_value(key, v)?,
            "collapse_interval" => self.collapse_interval = parse_value(key, v)?,
            "noise_dims" => self.noise_dims = parse_list(key, v)?,
            "noise_items" => self.noise_items = parse_list(key, v)?,
            "noise_redundancy" => self.noise_redundancy = parse_list(key, v)?,
            "noise_trials" => self.noise_trials = parse_value(key, v)?,
            other => return Err(Error::InvalidArgument(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. Blank
    /// lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&fs::read_to_string(path)?, path)?;
        Ok(cfg)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("task", self.task.to_string()),
            ("arch", self.arch.to_string()),
            ("hidden", self.hidden.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("redundancy", self.redundancy.to_string()),
            ("shared_params", self.shared_params.to_string()),
            ("shared_dual_key", self.shared_dual_key.to_string()),
            ("dropout", self.dropout.to_string()),
            ("embed_init", self.embed_init.to_string()),
            ("key_init_gain", self.key_init_gain.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("halve_lr", self.halve_lr.to_string()),
            ("seed", self.seed.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_dev", self.n_dev.to_string()),
            ("n_test", self.n_test.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("kv_pairs", self.kv_pairs.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("entail_min_len", self.entail_min_len.to_string()),
            ("entail_max_len", self.entail_max_len.to_string()),
            ("train_path", show_path(&self.train_path)),
            ("dev_path", show_path(&self.dev_path)),
            ("test_path", show_path(&self.test_path)),
            ("vocab_max", self.vocab_max.to_string()),
            ("checkpoint", show_path(&self.checkpoint)),
            ("out_dir", self.out_dir.display().to_string()),
            (
                "heatmap_content",
                match self.heatmap_content {
                    WrittenContent::Delta => "delta".into(),
                    WrittenContent::State => "state".into(),
                },
            ),
            ("heatmap_samples", self.heatmap_samples.to_string()),
            ("collapse_interval", self.collapse_interval.to_string()),
            ("noise_dims", join(&self.noise_dims)),
            ("noise_items", join(&self.noise_items)),
            ("noise_redundancy", join(&self.noise_redundancy)),
            ("noise_trials", self.noise_trials.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn train_config(&self, metrics_path: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            max_steps: self.max_steps,
            eval_interval: self.eval_interval,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            seed: self.seed,
            halve_lr: self.halve_lr,
            eval_batch_size: 200,
            metrics_path,
        }
    }
}

/// Train, dev and test splits with their vocabulary and label count.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub token_names: Vec<String>,
}

fn synthetic_names(vocab_size: usize, name: impl Fn(usize) -> String) -> Vec<String> {
    let mut names: Vec<String> = Vocab::RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    names.extend((names.len()..vocab_size).map(name));
    names
}

/// Split seeds are distinct streams derived from the experiment seed.
fn split_seed(seed: u64, split: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(split)
}

pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let s = |k| split_seed(cfg.seed, k);
    match cfg.task {
        Task::Kv => {
            let layout = KvLayout::new(cfg.vocab_size)?;
            let gen = |n, k| gen_kv_recall_task(n, cfg.kv_pairs, cfg.vocab_size, s(k));
            Ok(Datasets {
                train: gen(cfg.n_train, 1)?,
                dev: gen(cfg.n_dev, 2)?,
                test: gen(cfg.n_test, 3)?,
                vocab_size: cfg.vocab_size,
                n_classes: layout.n_values(),
                token_names: synthetic_names(cfg.vocab_size, |i| {
                    if i < layout.value_start {
                        format!("k{}", i - layout.key_start)
                    } else {
                        format!("v{}", i - layout.value_start)
                    }
                }),
            })
        }
        Task::Entail => {
            let grammar = EntailGrammar {
                min_len: cfg.entail_min_len,
                max_len: cfg.entail_max_len,
                ..EntailGrammar::default()
            };
            let gen = |n, k| gen_toy_entailment(n, s(k), &grammar);
            let vocab_size = grammar.vocab_size();
            Ok(Datasets {
                train: gen(cfg.n_train, 1)?,
                dev: gen(cfg.n_dev, 2)?,
                test: gen(cfg.n_test, 3)?,
                vocab_size,
                n_classes: 3,
                token_names: synthetic_names(vocab_size, |i| {
                    if i < grammar.attr_token(0) {
                        format!("agent{}", i - grammar.agent_token(0))
                    } else {
                        format!("attr{}", i - grammar.attr_token(0))
                    }
                }),
            })
        }
        Task::Copy => {
            let gen = |n, k| gen_copy_task(n, cfg.seq_len, cfg.vocab_size, s(k));
            Ok(Datasets {
                train: gen(cfg.n_train, 1)?,
                dev: gen(cfg.n_dev, 2)?,
                test: gen(cfg.n_test, 3)?,
                vocab_size: cfg.vocab_size,
                n_classes: cfg.vocab_size,
                token_names: synthetic_names(cfg.vocab_size, |i| format!("t{i}")),
            })
        }
        Task::Snli => {
            let need = |p: &Option<PathBuf>, what: &str| {
                p.clone().ok_or_else(|| {
                    Error::InvalidArgument(format!("task snli needs {what} in the config"))
                })
            };
            let train_path = need(&cfg.train_path, "train_path")?;
            let raw = read_jsonl(&train_path)?;
            let tokens: Vec<String> = raw
                .iter()
                .flat_map(|r| tokenize(&r.premise).into_iter().chain(tokenize(&r.hypothesis)))
                .collect();
            let vocab = build_vocab(tokens.iter().map(String::as_str), cfg.vocab_max)?;
            let (train, _) = load_jsonl(&train_path, &vocab)?;
            let (dev, _) = load_jsonl(&need(&cfg.dev_path, "dev_path")?, &vocab)?;
            let (test, _) = load_jsonl(&need(&cfg.test_path, "test_path")?, &vocab)?;
            Ok(Datasets {
                train,
                dev,
                test,
                vocab_size: vocab.len(),
                n_classes: 3,
                token_names: vocab.tokens().to_vec(),
            })
        }
    }
}

pub fn entail_config(cfg: &ExperimentConfig, data: &Datasets) -> EntailConfig {
    EntailConfig {
        arch: cfg.arch,
        vocab_size: data.vocab_size,
        embed_dim: cfg.embed_dim,
        hidden: cfg.hidden,
        redundancy: cfg.redundancy,
        n_classes: data.n_classes,
        mlp_hidden: cfg.hidden,
        dropout: cfg.dropout,
        shared_params: cfg.shared_params,
        shared_dual_key: cfg.shared_dual_key,
        embed_init: cfg.embed_init,
        key_init_gain: cfg.key_init_gain,
        seed: cfg.seed,
    }
}

pub fn autoencoder_config(cfg: &ExperimentConfig) -> AutoencoderConfig {
    AutoencoderConfig {
        vocab_size: cfg.vocab_size,
        embed_dim: cfg.embed_dim,
        hidden: cfg.hidden,
        redundancy: cfg.redundancy,
        shared_dual_key: cfg.shared_dual_key,
        dropout: cfg.dropout,
        embed_init: cfg.embed_init,
        key_init_gain: cfg.key_init_gain,
        seed: cfg.seed,
    }
}

/// Creates `<base>/<command>-<timestamp>`, adding a numeric suffix rather
/// than reusing a directory that already exists.
pub fn create_run_dir(base: &Path, command: Command) -> Result<PathBuf> {
    fs::create_dir_all(base)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let stem = format!("{}-{stamp}", command.name());
    for i in 0.. {
        let name = if i == 0 {
            stem.clone()
        } else {
            format!("{stem}-{i}")
        };
        let dir = base.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("unbounded suffix search")
}

/// Artifacts directory and headline numbers of a finished run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub values: BTreeMap<String, String>,
}

impl RunSummary {
    fn write(&self) -> Result<()> {
        let text: String = self
            .values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        fs::write(self.dir.join("summary.txt"), text)?;
        Ok(())
    }
}

/// Runs one subcommand and returns where its artifacts went.
pub fn run_experiment(command: Command, cfg: &ExperimentConfig) -> Result<RunSummary> {
    validate(command, cfg)?;
    let dir = create_run_dir(&cfg.out_dir, command)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let mut summary = RunSummary {
        dir,
        values: BTreeMap::new(),
    };
    summary.values.insert("command".into(), command.name().into());
    match command {
        Command::Train => run_train(cfg, &mut summary)?,
        Command::Eval => run_eval(cfg, &mut summary)?,
        Command::Heatmap => run_heatmap(cfg, &mut summary)?,
        Command::Autoencode => run_autoencode(cfg, &mut summary)?,
        Command::NoiseBench => run_noise_bench(cfg, &mut summary)?,
    }
    summary.write()?;
    Ok(summary)
}

fn validate(command: Command, cfg: &ExperimentConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
    if cfg.batch_size == 0 || cfg.eval_interval == 0 {
        return bad("batch_size and eval_interval must be >= 1");
    }
    if !(cfg.lr >= 0.0) || cfg.clip_norm < 0.0 {
        return bad("lr and clip_norm must be non-negative");
    }
    match command {
        Command::Eval | Command::Heatmap if cfg.checkpoint.is_none() => {
            bad("this subcommand needs checkpoint = <path>")
        }
        Command::Heatmap if cfg.arch != Arch::DualAmGru => {
            bad("heatmaps need the dual-am-gru architecture")
        }
        Command::Heatmap if cfg.task == Task::Copy => {
            bad("heatmaps for the copy task come from the autoencode subcommand")
        }
        Command::Autoencode if cfg.task != Task::Copy => bad("autoencode runs on task = copy"),
        _ => Ok(()),
    }
}

fn run_train(cfg: &ExperimentConfig, summary: &mut RunSummary) -> Result<()> {
    let data = build_datasets(cfg)?;
    let metrics = Some(summary.dir.join("metrics.csv"));
    let tc = cfg.train_config(metrics);
    let ckpt = summary.dir.join("model.ckpt");
    let (report_best, report_step, steps, test) = if cfg.task == Task::Copy {
        let mut model = AutoencoderModel::<f32>::new(autoencoder_config(cfg))?;
        let report = train_loop(&mut model, &data.train, &data.dev, &tc)?;
        save_checkpoint(model.params(), &ckpt)?;
        let test = evaluate(&model, &data.test, tc.eval_batch_size)?;
        (report.best_dev_accuracy, report.best_step, report.steps, test)
    } else {
        let mut model = EntailModel::<f32>::new(entail_config(cfg, &data))?;
        let report = train_loop(&mut model, &data.train, &data.dev, &tc)?;
        save_checkpoint(model.params(), &ckpt)?;
        let test = evaluate(&model, &data.test, tc.eval_batch_size)?;
        (report.best_dev_accuracy, report.best_step, report.steps, test)
    };
    let v = &mut summary.values;
    v.insert("steps".into(), steps.to_string());
    v.insert("best_dev_acc".into(), format!("{report_best:.6}"));
    v.insert("best_step".into(), report_step.to_string());
    v.insert("test_acc".into(), format!("{:.6}", test.accuracy));
    v.insert("test_loss".into(), format!("{:.6}", test.loss));
    Ok(())
}

fn run_eval(cfg: &ExperimentConfig, summary: &mut RunSummary) -> Result<()> {
    let data = build_datasets(cfg)?;
    let ckpt = cfg.checkpoint.as_deref().expect("validated");
    let test = if cfg.task == Task::Copy {
        let mut model = AutoencoderModel::<f32>::new(autoencoder_config(cfg))?;
        load_checkpoint(model.params_mut(), ckpt)?;
        evaluate(&model, &data.test, 200)?
    } else {
        let mut model = EntailModel::<f32>::new(entail_config(cfg, &data))?;
        load_checkpoint(model.params_mut(), ckpt)?;
        evaluate(&model, &data.test, 200)?
    };
    summary.values.insert("test_acc".into(), format!("{:.6}", test.accuracy));
    summary.values.insert("test_loss".into(), format!("{:.6}", test.loss));
    summary.values.insert("test_count".into(), test.count.to_string());
    Ok(())
}

fn names(data: &Datasets, ids: &[usize]) -> Vec<String> {
    ids.iter()
        .map(|&i| data.token_names.get(i).cloned().unwrap_or_else(|| i.to_string()))
        .collect()
}

fn run_heatmap(cfg: &ExperimentConfig, summary: &mut RunSummary) -> Result<()> {
    let data = build_datasets(cfg)?;
    let mut model = EntailModel::<f32>::new(entail_config(cfg, &data))?;
    load_checkpoint(model.params_mut(), cfg.checkpoint.as_deref().expect("validated"))?;
    let n = cfg.heatmap_samples.min(data.test.len());
    let mut index = String::from("example,file,rows,cols,last_row_argmax\n");
    for (i, ex) in data.test.iter().take(n).enumerate() {
        let mut tape = Tape::new();
        let p = model.params().bind_constants(&mut tape);
        let fwd = model.forward(&mut tape, &p, &[ex], None, true)?;
        let m = trace_heatmap(
            &tape,
            &fwd.premise_trace,
            &fwd.hypothesis_trace,
            0,
            cfg.heatmap_content,
        )?
        .with_labels(names(&data, &ex.hypothesis), names(&data, &ex.premise))?;
        let file = format!("heatmap_{i:04}.csv");
        emit_heatmap(&m, &summary.dir.join(&file))?;
        index.push_str(&format!(
            "{i},{file},{},{},{}\n",
            m.rows(),
            m.cols(),
            m.row_argmax(m.rows() - 1)
        ));
    }
    fs::write(summary.dir.join("heatmaps.csv"), index)?;
    summary.values.insert("heatmaps".into(), n.to_string());
    Ok(())
}

/// Mean key-collapse metric of the encoder over `probe`.
pub fn probe_collapse(model: &AutoencoderModel<f32>, probe: &[Example]) -> Result<f64> {
    let refs: Vec<&Example> = probe.iter().collect();
    let mut tape = Tape::new();
    let p = model.params().bind_constants(&mut tape);
    let fwd = model.forward(&mut tape, &p, &refs, None, true)?;
    let mut total = 0.0;
    for row in 0..refs.len() {
        total += encoder_key_collapse_metric(&key_vectors(&tape, &fwd.encoder_trace, row))?;
    }
    Ok(total / refs.len() as f64)
}

fn run_autoencode(cfg: &ExperimentConfig, summary: &mut RunSummary) -> Result<()> {
    if cfg.collapse_interval == 0 {
        return Err(Error::InvalidArgument("collapse_interval must be >= 1".into()));
    }
    let data = build_datasets(cfg)?;
    let mut model = AutoencoderModel::<f32>::new(autoencoder_config(cfg))?;
    let probe: Vec<Example> = data.dev.iter().take(20).cloned().collect();
    let tc = cfg.train_config(None);
    let mut adam = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = format!("{METRICS_HEADER},collapse\n");
    let mut window = Vec::new();
    let mut step = 0;
    let mut last_collapse = probe_collapse(&model, &probe)?;
    log.push_str(&format!("0,,,,{:.6e},{last_collapse:.6}\n", tc.adam.lr));
    'outer: loop {
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        for chunk in order.chunks(tc.batch_size) {
            if step >= tc.max_steps {
                break 'outer;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            window.push(train_step(
                &mut model,
                &mut adam,
                &tc.adam,
                &batch,
                tc.clip_norm,
                Some(&mut rng),
            )?);
            step += 1;
            if step % cfg.collapse_interval == 0 || step == tc.max_steps {
                let train_loss = window.iter().sum::<f64>() / window.len() as f64;
                window.clear();
                let dev = evaluate(&model, &probe, probe.len())?;
                last_collapse = probe_collapse(&model, &probe)?;
                log.push_str(&format!(
                    "{step},{train_loss:.6},{:.6},{:.6},{:.6e},{last_collapse:.6}\n",
                    dev.loss, dev.accuracy, tc.adam.lr
                ));
            }
        }
    }
    fs::write(summary.dir.join("metrics.csv"), log)?;
    save_checkpoint(model.params(), &summary.dir.join("model.ckpt"))?;

    let ex = &probe[0];
    let mut tape = Tape::new();
    let p = model.params().bind_constants(&mut tape);
    let fwd = model.forward(&mut tape, &p, &[ex], None, true)?;
    let mut target = vec!["<s>".to_string()];
    target.extend(names(&data, &ex.premise[..ex.premise.len() - 1]));
    let m = trace_heatmap(&tape, &fwd.encoder_trace, &fwd.decoder_trace, 0, cfg.heatmap_content)?
        .with_labels(target, names(&data, &ex.premise))?;
    emit_heatmap(&m, &summary.dir.join("heatmap.csv"))?;
    let test = evaluate(&model, &data.test, 200)?;
    let v = &mut summary.values;
    v.insert("steps".into(), step.to_string());
    v.insert("final_collapse".into(), format!("{last_collapse:.6}"));
    v.insert("test_token_acc".into(), format!("{:.6}", test.accuracy));
    Ok(())
}

fn run_noise_bench(cfg: &ExperimentConfig, summary: &mut RunSummary) -> Result<()> {
    let rows = noise_bench(
        &cfg.noise_dims,
        &cfg.noise_items,
        &cfg.noise_redundancy,
        cfg.noise_trials,
        cfg.seed,
    )?;
    write_noise_csv(&rows, &summary.dir.join("noise.csv"))?;
    summary.values.insert("rows".into(), rows.len().to_string());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("arch", "gru").unwrap();
        cfg.set("noise_items", "1, 3,9").unwrap();
        cfg.set("checkpoint", "a/b.ckpt").unwrap();
        let mut back = ExperimentConfig::default();
        back.apply_text(&cfg.to_text(), Path::new("cfg")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_errors_name_the_line() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg
            .apply_text("# comment\nhidden = 8\nbogus = 1\n", Path::new("x.cfg"))
            .unwrap_err();
        assert!(err.to_string().contains("x.cfg:3"), "{err}");
        assert!(cfg.apply_text("hidden 8", Path::new("x")).is_err());
        assert!(cfg.set("hidden", "eight").is_err());
    }

    #[test]
    fn run_dirs_are_never_reused() {
        let base = tempfile::tempdir().unwrap();
        let a = create_run_dir(base.path(), Command::Train).unwrap();
        let b = create_run_dir(base.path(), Command::Train).unwrap();
        assert_ne!(a, b);
        assert!(a.is_dir() && b.is_dir());
    }
}
