//! Associative-memory augmentation of a cell function.
//!
//! Each step computes a bounded key from `[x_t; h_{t-1}]`, reads the
//! previous state out of the redundant memory with it, applies the wrapped
//! cell, and writes the state *change* back under the same key:
//!
//! ```text
//! r_t          = bound(W_r [x_t; h_{t-1}])
//! s_{t-1}      = read(m_{t-1}, r_t)
//! (s_t, h_t)   = f([x_t; h_{t-1}], s_{t-1})
//! m_t          = m_{t-1} + write(r_t, s_t - s_{t-1})
//! ```
//!
//! The dual variant additionally reads `φ_t` from a second, read-only
//! memory `m^x` and feeds `[y_t; h_{t-1}; φ_t]` to the cell. A dual-shaped
//! network run without a source memory uses `φ_t = 0`.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::cells::{CellFunction, CellState};
use crate::error::{check_dim, Error, Result};
use crate::hrr::PermutationSet;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AmRnnConfig {
    /// `N`
    pub input_size: usize,
    /// `H`
    pub hidden_size: usize,
    /// Length of the memory-managed state `c_t`; twice the complex dimension.
    pub memory_size: usize,
    /// `N_c`
    pub redundancy: usize,
    /// Whether the cell also receives `φ_t` read from a source memory.
    pub dual: bool,
    /// Read the source memory with the write key (`r'_t = r_t`).
    pub shared_dual_key: bool,
}

impl AmRnnConfig {
    /// Input width the wrapped cell must accept.
    pub fn cell_input_size(&self) -> usize {
        self.input_size + self.hidden_size + if self.dual { self.memory_size } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.memory_size == 0 || self.memory_size % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "memory size must be even and positive (got {})",
                self.memory_size
            )));
        }
        if self.redundancy < 1 {
            return Err(Error::InvalidArgument("redundancy must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum KeySource<T> {
    Learned(ParamId),
    /// The same bounded key at every step; used to reduce an AM-RNN to a
    /// plain recurrence in tests.
    Fixed(Tensor<T>),
}

/// `W_r` (and optionally a separate `W_{r'}`) mapping `[x_t; h_{t-1}]` to a
/// raw key of the memory size.
#[derive(Clone, Debug)]
pub struct KeyProjection<T> {
    write: KeySource<T>,
    read: Option<KeySource<T>>,
    in_size: usize,
    mem_size: usize,
}

impl<T: Real> KeyProjection<T> {
    /// `separate_read_key` adds a distinct `W_{r'}` for dual reads. Weights
    /// are uniform in `±gain / sqrt(in_size)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_size: usize,
        mem_size: usize,
        separate_read_key: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let lim = gain / (in_size as f64).sqrt();
        let write = KeySource::Learned(store.add(
            format!("{name}.w_r"),
            Tensor::uniform(in_size, mem_size, lim, rng),
        ));
        let read = separate_read_key.then(|| {
            KeySource::Learned(store.add(
                format!("{name}.w_r_dual"),
                Tensor::uniform(in_size, mem_size, lim, rng),
            ))
        });
        Self {
            write,
            read,
            in_size,
            mem_size,
        }
    }

    /// Projection that ignores its input and always yields `bound(key)`.
    pub fn fixed(key: Vec<T>, in_size: usize) -> Self {
        let mem_size = key.len();
        Self {
            write: KeySource::Fixed(Tensor::row(key)),
            read: None,
            in_size,
            mem_size,
        }
    }

    pub fn mem_size(&self) -> usize {
        self.mem_size
    }

    pub fn write_param(&self) -> Option<ParamId> {
        match self.write {
            KeySource::Learned(id) => Some(id),
            KeySource::Fixed(_) => None,
        }
    }

    pub fn read_param(&self) -> Option<ParamId> {
        match &self.read {
            Some(KeySource::Learned(id)) => Some(*id),
            _ => None,
        }
    }

    fn project(
        &self,
        source: &KeySource<T>,
        tape: &mut Tape<T>,
        p: &ParamVars,
        x: Var,
        h_prev: Var,
    ) -> Result<Var> {
        let rows = tape.shape(x).0;
        check_dim(
            "key projection input",
            self.in_size,
            tape.shape(x).1 + tape.shape(h_prev).1,
        )?;
        let raw = match source {
            KeySource::Learned(w) => {
                let xh = tape.concat(&[x, h_prev])?;
                tape.matmul(xh, p[*w])?
            }
            KeySource::Fixed(key) => {
                let mut data = Vec::with_capacity(rows * key.len());
                for _ in 0..rows {
                    data.extend_from_slice(key.data());
                }
                tape.constant(Tensor::new(rows, key.len(), data)?)
            }
        };
        tape.bound(raw)
    }

    /// `bound(W_r [x_t; h_{t-1}])`.
    pub fn compute_key(&self, tape: &mut Tape<T>, p: &ParamVars, x: Var, h_prev: Var) -> Result<Var> {
        self.project(&self.write, tape, p, x, h_prev)
    }

    /// `bound(W_{r'} [y_t; h_{t-1}])`, or `None` when no separate read key exists.
    pub fn compute_read_key(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        x: Var,
        h_prev: Var,
    ) -> Result<Option<Var>> {
        match &self.read {
            Some(src) => self.project(src, tape, p, x, h_prev).map(Some),
            None => Ok(None),
        }
    }
}

/// Recurrent state of an AM-RNN: the memory array (one row per batch item,
/// copies back to back), the last output, and the cell remainder if any.
#[derive(Clone, Copy, Debug)]
pub struct AmState {
    pub memory: Var,
    pub h: Var,
    pub remainder: Option<Var>,
}

/// What one step read and wrote.
#[derive(Clone, Copy, Debug)]
pub struct StepTrace {
    /// Write key `r_t`.
    pub key: Var,
    /// `s_{t-1}` as read from memory.
    pub read_state: Var,
    /// `s_t`
    pub state: Var,
    /// `s_t - s_{t-1}`, the content added to memory.
    pub delta: Var,
    /// `r'_t`, dual steps only.
    pub read_key: Option<Var>,
    /// `φ_t`, dual steps only.
    pub retrieved: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub final_state: AmState,
    pub outputs: Vec<Var>,
    /// Empty unless recording was requested.
    pub trace: Vec<StepTrace>,
}

/// A cell wrapped with associative memory.
#[derive(Clone, Debug)]
pub struct AmRnn<T, C> {
    cell: C,
    proj: KeyProjection<T>,
    perms: Arc<PermutationSet>,
    config: AmRnnConfig,
}

impl<T: Real, C: CellFunction<T>> AmRnn<T, C> {
    pub fn new(
        cell: C,
        proj: KeyProjection<T>,
        perms: Arc<PermutationSet>,
        config: AmRnnConfig,
    ) -> Result<Self> {
        config.validate()?;
        check_dim("cell input", config.cell_input_size(), cell.input_size())?;
        check_dim("cell memory", config.memory_size, cell.memory_size())?;
        check_dim("cell output", config.hidden_size, cell.output_size())?;
        check_dim("key size", config.memory_size, proj.mem_size())?;
        check_dim("memory dimension", config.memory_size, 2 * perms.dim())?;
        check_dim("redundancy", config.redundancy, perms.count())?;
        if config.dual && !config.shared_dual_key && proj.read.is_none() {
            return Err(Error::InvalidArgument(
                "dual network without shared key needs a read projection".into(),
            ));
        }
        Ok(Self {
            cell,
            proj,
            perms,
            config,
        })
    }

    pub fn config(&self) -> &AmRnnConfig {
        &self.config
    }

    pub fn cell(&self) -> &C {
        &self.cell
    }

    pub fn projection(&self) -> &KeyProjection<T> {
        &self.proj
    }

    pub fn perms(&self) -> &Arc<PermutationSet> {
        &self.perms
    }

    /// Width of a flattened memory row: `N_c * memory_size`.
    pub fn memory_width(&self) -> usize {
        self.config.redundancy * self.config.memory_size
    }

    /// `m_0 = 0`, `h_0 = 0`, zero remainder.
    pub fn zero_state(&self, tape: &mut Tape<T>, batch: usize) -> AmState {
        let memory = tape.zeros(batch, self.memory_width());
        let h = tape.zeros(batch, self.config.hidden_size);
        let remainder = self
            .cell
            .has_remainder()
            .then(|| tape.zeros(batch, self.cell.state_size() - self.cell.memory_size()));
        AmState {
            memory,
            h,
            remainder,
        }
    }

    pub fn compute_key(&self, tape: &mut Tape<T>, p: &ParamVars, x: Var, h_prev: Var) -> Result<Var> {
        self.proj.compute_key(tape, p, x, h_prev)
    }

    fn step_inner(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        x: Var,
        state: &AmState,
        source: Option<Var>,
    ) -> Result<(AmState, StepTrace)> {
        let batch = tape.shape(x).0;
        check_dim("step input", self.config.input_size, tape.shape(x).1)?;
        check_dim("memory width", self.memory_width(), tape.shape(state.memory).1)?;
        check_dim("memory batch", batch, tape.shape(state.memory).0)?;

        let key = self.compute_key(tape, p, x, state.h)?;
        let read_state = tape.mem_read(state.memory, key, &self.perms)?;

        let (input, read_key, retrieved) = if self.config.dual {
            let (read_key, phi) = match source {
                Some(mx) => {
                    check_dim("source memory width", self.memory_width(), tape.shape(mx).1)?;
                    let rk = if self.config.shared_dual_key {
                        key
                    } else {
                        self.proj
                            .compute_read_key(tape, p, x, state.h)?
                            .expect("checked at construction")
                    };
                    (rk, tape.mem_read(mx, rk, &self.perms)?)
                }
                None => (key, tape.zeros(batch, self.config.memory_size)),
            };
            (
                tape.concat(&[x, state.h, phi])?,
                Some(read_key),
                Some(phi),
            )
        } else {
            if source.is_some() {
                return Err(Error::InvalidArgument(
                    "source memory given to a non-dual AM-RNN".into(),
                ));
            }
            (tape.concat(&[x, state.h])?, None, None)
        };

        let cell_state = CellState {
            memory: read_state,
            remainder: state.remainder,
        };
        let (next, h) = self.cell.step(tape, p, input, &cell_state)?;
        let delta = tape.sub(next.memory, read_state)?;
        let memory = tape.mem_write(state.memory, key, delta, &self.perms)?;
        Ok((
            AmState {
                memory,
                h,
                remainder: next.remainder,
            },
            StepTrace {
                key,
                read_state,
                state: next.memory,
                delta,
                read_key,
                retrieved,
            },
        ))
    }

    /// One AM-RNN step. On a dual-shaped network the cell sees `φ_t = 0`.
    pub fn am_step(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        x: Var,
        state: &AmState,
    ) -> Result<(AmState, StepTrace)> {
        self.step_inner(tape, p, x, state, None)
    }

    /// One Dual AM-RNN step reading `φ_t` from the source memory `m_x`,
    /// which is never written.
    pub fn dual_am_step(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        y: Var,
        state: &AmState,
        m_x: Var,
    ) -> Result<(AmState, StepTrace)> {
        if !self.config.dual {
            return Err(Error::InvalidArgument(
                "dual_am_step on a network built without dual input".into(),
            ));
        }
        self.step_inner(tape, p, y, state, Some(m_x))
    }

    fn run_inner(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        inputs: &[Var],
        init: AmState,
        lengths: Option<&[usize]>,
        record: bool,
        source: Option<Var>,
        context: &'static str,
    ) -> Result<RunOutput> {
        if inputs.is_empty() {
            return Err(Error::EmptySequence(context));
        }
        if let Some(lens) = lengths {
            check_dim(context, tape.shape(inputs[0]).0, lens.len())?;
            if lens.iter().any(|&l| l == 0) {
                return Err(Error::EmptySequence(context));
            }
        }
        let mut state = init;
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut trace = Vec::new();
        for (t, &x) in inputs.iter().enumerate() {
            let (next, step) = self.step_inner(tape, p, x, &state, source)?;
            state = match lengths {
                Some(lens) => {
                    let mask: Vec<bool> = lens.iter().map(|&l| t < l).collect();
                    let remainder = match (next.remainder, state.remainder) {
                        (Some(n), Some(o)) => Some(tape.mask_rows(n, o, &mask)?),
                        (n, _) => n,
                    };
                    AmState {
                        memory: tape.mask_rows(next.memory, state.memory, &mask)?,
                        h: tape.mask_rows(next.h, state.h, &mask)?,
                        remainder,
                    }
                }
                None => next,
            };
            outputs.push(state.h);
            if record {
                trace.push(step);
            }
        }
        Ok(RunOutput {
            final_state: state,
            outputs,
            trace,
        })
    }

    /// Folds [`am_step`](Self::am_step) over `inputs` (one `batch x N`
    /// tensor per time step). With `lengths`, rows stop updating after
    /// their own length, so the final state is each row's last real step.
    pub fn am_run(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        inputs: &[Var],
        init: AmState,
        lengths: Option<&[usize]>,
        record: bool,
    ) -> Result<RunOutput> {
        self.run_inner(tape, p, inputs, init, lengths, record, None, "am_run")
    }

    /// Folds [`dual_am_step`](Self::dual_am_step) over `inputs`.
    #[allow(clippy::too_many_arguments)]
    pub fn dual_am_run(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        inputs: &[Var],
        init: AmState,
        m_x: Var,
        lengths: Option<&[usize]>,
        record: bool,
    ) -> Result<RunOutput> {
        if !self.config.dual {
            return Err(Error::InvalidArgument(
                "dual_am_run on a network built without dual input".into(),
            ));
        }
        self.run_inner(tape, p, inputs, init, lengths, record, Some(m_x), "dual_am_run")
    }
}
