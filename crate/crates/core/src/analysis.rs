//! Post-hoc analysis: cosine heatmaps between written and retrieved content,
//! the retrieval-noise benchmark and the encoder key-collapse metric.

use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::am_rnn::StepTrace;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::hrr::{make_permutations, ComplexVec, Key, MemoryArray};
use crate::real::Real;

/// Cosine similarities: one row per hypothesis (decoder) step, one column
/// per premise (encoder) step.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl HeatmapMatrix {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r][c]
    }

    /// Column index of the largest value in row `r` (first on ties).
    pub fn row_argmax(&self, r: usize) -> usize {
        let row = &self.values[r];
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        best
    }

    pub fn with_labels(mut self, row_labels: Vec<String>, col_labels: Vec<String>) -> Result<Self> {
        if row_labels.len() != self.rows() || col_labels.len() != self.cols() {
            return Err(Error::ShapeMismatch {
                context: "HeatmapMatrix::with_labels",
                left: (self.rows(), self.cols()),
                right: (row_labels.len(), col_labels.len()),
            });
        }
        self.row_labels = row_labels;
        self.col_labels = col_labels;
        Ok(self)
    }
}

/// `a·b / (|a| |b|)`, defined as 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Entry `(t, t')` is `cos(retrieved[t], written[t'])`.
pub fn cosine_matrix(written: &[Vec<f64>], retrieved: &[Vec<f64>]) -> Result<HeatmapMatrix> {
    let dim = written
        .first()
        .or(retrieved.first())
        .map(Vec::len)
        .unwrap_or(0);
    for v in written.iter().chain(retrieved) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "cosine_matrix",
                expected: dim,
                found: v.len(),
            });
        }
    }
    let values = retrieved
        .iter()
        .map(|r| written.iter().map(|w| cosine(r, w)).collect())
        .collect();
    Ok(HeatmapMatrix {
        row_labels: (0..retrieved.len()).map(|i| i.to_string()).collect(),
        col_labels: (0..written.len()).map(|i| i.to_string()).collect(),
        values,
    })
}

/// What counts as the content written at a premise step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WrittenContent {
    /// `s_t - s_{t-1}`, the quantity added to memory.
    #[default]
    Delta,
    /// `s_t`
    State,
}

impl FromStr for WrittenContent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(Self::Delta),
            "state" => Ok(Self::State),
            other => Err(Error::InvalidArgument(format!(
                "unknown heatmap content {other:?} (expected delta or state)"
            ))),
        }
    }
}

fn row_of<T: Real>(tape: &Tape<T>, v: crate::autodiff::Var, row: usize) -> Vec<f64> {
    tape.value(v).row_slice(row).iter().map(|x| x.as_f64()).collect()
}

/// Per-step written content of batch row `row` from a source-side trace.
pub fn written_vectors<T: Real>(
    tape: &Tape<T>,
    trace: &[StepTrace],
    row: usize,
    content: WrittenContent,
) -> Vec<Vec<f64>> {
    trace
        .iter()
        .map(|s| match content {
            WrittenContent::Delta => row_of(tape, s.delta, row),
            WrittenContent::State => row_of(tape, s.state, row),
        })
        .collect()
}

/// Per-step `φ_t` of batch row `row` from a dual trace.
pub fn retrieved_vectors<T: Real>(
    tape: &Tape<T>,
    trace: &[StepTrace],
    row: usize,
) -> Result<Vec<Vec<f64>>> {
    trace
        .iter()
        .map(|s| {
            s.retrieved
                .map(|v| row_of(tape, v, row))
                .ok_or_else(|| Error::InvalidArgument("trace has no dual reads".into()))
        })
        .collect()
}

/// Per-step write keys `r_t` of batch row `row`.
pub fn key_vectors<T: Real>(tape: &Tape<T>, trace: &[StepTrace], row: usize) -> Vec<Vec<f64>> {
    trace.iter().map(|s| row_of(tape, s.key, row)).collect()
}

/// Heatmap of one batch row from a source trace and a dual target trace.
pub fn trace_heatmap<T: Real>(
    tape: &Tape<T>,
    source: &[StepTrace],
    target: &[StepTrace],
    row: usize,
    content: WrittenContent,
) -> Result<HeatmapMatrix> {
    let written = written_vectors(tape, source, row, content);
    let retrieved = retrieved_vectors(tape, target, row)?;
    cosine_matrix(&written, &retrieved)
}

/// Writes the matrix as CSV: a header of premise tokens after an empty
/// corner cell, then one line per hypothesis token with 6-decimal values.
pub fn emit_heatmap(matrix: &HeatmapMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec![String::new()];
    header.extend(matrix.col_labels.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (label, row) in matrix.row_labels.iter().zip(&matrix.values) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a heatmap written by [`emit_heatmap`].
pub fn parse_heatmap(path: &Path) -> Result<HeatmapMatrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?
        .map_err(csv_err)?;
    let col_labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut row_labels = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != col_labels.len() + 1 {
            return Err(parse_err(path, i + 2, "row length differs from header"));
        }
        row_labels.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|c| c.parse::<f64>().map_err(|e| parse_err(path, i + 2, &e.to_string())))
            .collect::<Result<Vec<f64>>>()?;
        values.push(row);
    }
    Ok(HeatmapMatrix {
        row_labels,
        col_labels,
        values,
    })
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

fn parse_err(path: &Path, line: usize, message: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

/// Mean pairwise cosine similarity among the write keys of one sequence.
pub fn encoder_key_collapse_metric(keys: &[Vec<f64>]) -> Result<f64> {
    if keys.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "key collapse needs at least 2 steps (got {})",
            keys.len()
        )));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            if keys[i].len() != keys[j].len() {
                return Err(Error::DimensionMismatch {
                    context: "encoder_key_collapse_metric",
                    expected: keys[i].len(),
                    found: keys[j].len(),
                });
            }
            total += cosine(&keys[i], &keys[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Retrieval statistics of one trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialStats {
    /// Mean L2 distance between each retrieved value and the one written.
    pub error: f64,
    /// Mean cosine similarity between retrieved and written values.
    pub cosine: f64,
}

fn trial_rng(dim: usize, items: usize, trial: usize, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((dim as u64) << 40) ^ ((items as u64) << 20) ^ trial as u64);
    rng
}

/// Writes `items` random unit-key / Gaussian-value pairs (value entries
/// with standard deviation `1/sqrt(2D)`) into a memory with `redundancy`
/// copies and retrieves each. Keys, values and permutations depend only on
/// `(dim, items, trial, seed)`, so trials are paired across redundancies.
pub fn noise_trial<T: Real>(
    dim: usize,
    items: usize,
    redundancy: usize,
    trial: usize,
    seed: u64,
) -> Result<TrialStats> {
    if dim == 0 || items == 0 || redundancy == 0 {
        return Err(Error::InvalidArgument(
            "noise trial needs positive dimension, item count and redundancy".into(),
        ));
    }
    let mut rng = trial_rng(dim, items, trial, seed);
    let std = 1.0 / ((2 * dim) as f64).sqrt();
    let pairs: Vec<(Key<T>, ComplexVec<T>)> = (0..items)
        .map(|_| {
            let k = Key::random_unit(dim, &mut rng);
            let v = ComplexVec::random_normal(dim, std, &mut rng);
            (k, v)
        })
        .collect();
    let perm_seed = rand::Rng::gen::<u64>(&mut rng);
    let perms = Arc::new(make_permutations(redundancy, dim, perm_seed)?);
    let mut mem = MemoryArray::zeros(perms);
    for (k, v) in &pairs {
        mem.write_in_place(k, v)?;
    }
    let (mut err, mut cos) = (0.0, 0.0);
    for (k, v) in &pairs {
        let got = mem.retrieve(k)?;
        err += got.sub(v)?.norm().as_f64();
        let a: Vec<f64> = got.as_slice().iter().map(|x| x.as_f64()).collect();
        let b: Vec<f64> = v.as_slice().iter().map(|x| x.as_f64()).collect();
        cos += cosine(&a, &b);
    }
    Ok(TrialStats {
        error: err / items as f64,
        cosine: cos / items as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseRow {
    pub dim: usize,
    pub items: usize,
    pub redundancy: usize,
    pub trials: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub mean_cosine: f64,
    pub std_cosine: f64,
}

pub const NOISE_HEADER: &str =
    "dim,items,redundancy,trials,mean_error,std_error,mean_cosine,std_cosine";

impl NoiseRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.9},{:.9},{:.9},{:.9}",
            self.dim,
            self.items,
            self.redundancy,
            self.trials,
            self.mean_error,
            self.std_error,
            self.mean_cosine,
            self.std_cosine
        )
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Retrieval error and cosine statistics over every `(D, N, N_c)` combination.
pub fn noise_bench(
    dims: &[usize],
    item_counts: &[usize],
    redundancy_levels: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<NoiseRow>> {
    if dims.is_empty() || item_counts.is_empty() || redundancy_levels.is_empty() || trials == 0 {
        return Err(Error::InvalidArgument(
            "noise bench needs non-empty parameter lists and trials >= 1".into(),
        ));
    }
    let mut rows = Vec::new();
    for &dim in dims {
        for &items in item_counts {
            for &redundancy in redundancy_levels {
                let stats = (0..trials)
                    .map(|t| noise_trial::<f64>(dim, items, redundancy, t, seed))
                    .collect::<Result<Vec<_>>>()?;
                let errs: Vec<f64> = stats.iter().map(|s| s.error).collect();
                let coss: Vec<f64> = stats.iter().map(|s| s.cosine).collect();
                let (mean_error, std_error) = mean_std(&errs);
                let (mean_cosine, std_cosine) = mean_std(&coss);
                rows.push(NoiseRow {
                    dim,
                    items,
                    redundancy,
                    trials,
                    mean_error,
                    std_error,
                    mean_cosine,
                    std_cosine,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_noise_csv(rows: &[NoiseRow], path: &Path) -> Result<()> {
    let mut out = String::from(NOISE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
