//! Recurrent cell functions `f(x_t, s_{t-1}) = (s_t, h_t)`.
//!
//! The state is split into a memory part `c_t`, which an AM-RNN keeps in
//! its associative memory, and an optional remainder `n_t` that is passed
//! along the recurrence directly. A GRU has no remainder; an LSTM carries
//! its hidden output there.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::error::{check_dim, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub memory: Var,
    pub remainder: Option<Var>,
}

pub trait CellFunction<T: Real> {
    /// `N`
    fn input_size(&self) -> usize;
    /// Length of the memory part `c_t`.
    fn memory_size(&self) -> usize;
    /// `M`: memory part plus remainder.
    fn state_size(&self) -> usize;
    /// `H`
    fn output_size(&self) -> usize;

    fn has_remainder(&self) -> bool {
        self.state_size() > self.memory_size()
    }

    fn step(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        input: Var,
        state: &CellState,
    ) -> Result<(CellState, Var)>;

    fn zero_state(&self, tape: &mut Tape<T>, batch: usize) -> CellState {
        let memory = tape.zeros(batch, self.memory_size());
        let remainder = self
            .has_remainder()
            .then(|| tape.zeros(batch, self.state_size() - self.memory_size()));
        CellState { memory, remainder }
    }
}

/// GRU with update gate `z`, reset gate `r` applied to the state before the
/// recurrent candidate projection:
///
/// ```text
/// z  = σ(x W_z + h U_z + b_z)
/// r  = σ(x W_r + h U_r + b_r)
/// c  = tanh(x W_c + (r ⊙ h) U_c + b_c)
/// h' = (1 - z) ⊙ h + z ⊙ c
/// ```
///
/// State and output are the same vector.
#[derive(Clone, Debug)]
pub struct GruCell {
    input: usize,
    hidden: usize,
    /// `[W_z W_r W_c]`, input x 3H
    w: ParamId,
    /// `[U_z U_r]`, H x 2H
    u_gates: ParamId,
    /// H x H
    u_cand: ParamId,
    /// 1 x 3H
    b: ParamId,
}

impl GruCell {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let lim = 1.0 / (hidden as f64).sqrt();
        Self {
            input,
            hidden,
            w: store.add(format!("{name}.w"), Tensor::uniform(input, 3 * hidden, lim, rng)),
            u_gates: store.add(
                format!("{name}.u_gates"),
                Tensor::uniform(hidden, 2 * hidden, lim, rng),
            ),
            u_cand: store.add(
                format!("{name}.u_cand"),
                Tensor::uniform(hidden, hidden, lim, rng),
            ),
            b: store.add(format!("{name}.b"), Tensor::uniform(1, 3 * hidden, lim, rng)),
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w, self.u_gates, self.u_cand, self.b]
    }
}

impl<T: Real> CellFunction<T> for GruCell {
    fn input_size(&self) -> usize {
        self.input
    }

    fn memory_size(&self) -> usize {
        self.hidden
    }

    fn state_size(&self) -> usize {
        self.hidden
    }

    fn output_size(&self) -> usize {
        self.hidden
    }

    fn step(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        input: Var,
        state: &CellState,
    ) -> Result<(CellState, Var)> {
        let h = self.hidden;
        check_dim("gru input", self.input, tape.shape(input).1)?;
        check_dim("gru state", h, tape.shape(state.memory).1)?;
        let prev = state.memory;

        let xw = tape.matmul(input, p[self.w])?;
        let xw = tape.add_bias(xw, p[self.b])?;
        let hu = tape.matmul(prev, p[self.u_gates])?;

        let xz = tape.slice(xw, 0, h)?;
        let hz = tape.slice(hu, 0, h)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);

        let xr = tape.slice(xw, h, h)?;
        let hr = tape.slice(hu, h, h)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);

        let rh = tape.mul(r, prev)?;
        let rc = tape.matmul(rh, p[self.u_cand])?;
        let xc = tape.slice(xw, 2 * h, h)?;
        let cand = tape.add(xc, rc)?;
        let cand = tape.tanh(cand);

        let step = tape.sub(cand, prev)?;
        let step = tape.mul(z, step)?;
        let next = tape.add(prev, step)?;
        Ok((
            CellState {
                memory: next,
                remainder: None,
            },
            next,
        ))
    }
}

/// LSTM with input, forget and output gates. The cell vector `c` is the
/// memory part of the state and the hidden output `h` is the remainder.
#[derive(Clone, Debug)]
pub struct LstmCell {
    input: usize,
    hidden: usize,
    /// `[W_i W_f W_o W_g]`, input x 4H
    w: ParamId,
    /// H x 4H
    u: ParamId,
    /// 1 x 4H, forget block initialised to 1
    b: ParamId,
}

impl LstmCell {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let lim = 1.0 / (2.0 * hidden as f64).sqrt();
        let mut b = Tensor::uniform(1, 4 * hidden, lim, rng);
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v = T::one();
        }
        Self {
            input,
            hidden,
            w: store.add(format!("{name}.w"), Tensor::uniform(input, 4 * hidden, lim, rng)),
            u: store.add(format!("{name}.u"), Tensor::uniform(hidden, 4 * hidden, lim, rng)),
            b: store.add(format!("{name}.b"), b),
        }
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.w, self.u, self.b]
    }
}

impl<T: Real> CellFunction<T> for LstmCell {
    fn input_size(&self) -> usize {
        self.input
    }

    fn memory_size(&self) -> usize {
        self.hidden
    }

    fn state_size(&self) -> usize {
        2 * self.hidden
    }

    fn output_size(&self) -> usize {
        self.hidden
    }

    fn step(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        input: Var,
        state: &CellState,
    ) -> Result<(CellState, Var)> {
        let h = self.hidden;
        check_dim("lstm input", self.input, tape.shape(input).1)?;
        check_dim("lstm cell", h, tape.shape(state.memory).1)?;
        let prev_h = match state.remainder {
            Some(v) => v,
            None => {
                let rows = tape.shape(input).0;
                tape.zeros(rows, h)
            }
        };
        check_dim("lstm hidden", h, tape.shape(prev_h).1)?;

        let xw = tape.matmul(input, p[self.w])?;
        let hu = tape.matmul(prev_h, p[self.u])?;
        let pre = tape.add(xw, hu)?;
        let pre = tape.add_bias(pre, p[self.b])?;

        let i = tape.slice(pre, 0, h)?;
        let i = tape.sigmoid(i);
        let f = tape.slice(pre, h, h)?;
        let f = tape.sigmoid(f);
        let o = tape.slice(pre, 2 * h, h)?;
        let o = tape.sigmoid(o);
        let g = tape.slice(pre, 3 * h, h)?;
        let g = tape.tanh(g);

        let keep = tape.mul(f, state.memory)?;
        let add = tape.mul(i, g)?;
        let c = tape.add(keep, add)?;
        let tc = tape.tanh(c);
        let out = tape.mul(o, tc)?;
        Ok((
            CellState {
                memory: c,
                remainder: Some(out),
            },
            out,
        ))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{gradient_check, DEFAULT_EPS};

    fn zero_params(store: &mut ParamStore<f64>) {
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn gru_zero_everything_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
        zero_params(&mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.zeros(1, 3);
        let s = CellFunction::<f64>::zero_state(&cell, &mut tape, 1);
        let (next, out) = cell.step(&mut tape, &p, x, &s).unwrap();
        assert_eq!(next.memory, out);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_zero_params_halves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
        zero_params(&mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::uniform(2, 3, 1.0, &mut rng));
        let h0 = Tensor::uniform(2, 4, 2.0, &mut rng);
        let h = tape.constant(h0.clone());
        let s = CellState {
            memory: h,
            remainder: None,
        };
        let (_, out) = cell.step(&mut tape, &p, x, &s).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(h0.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn gru_output_shape_and_size_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (n, hdim) in [(1, 1), (5, 8), (7, 3)] {
            let mut store = ParamStore::<f64>::new();
            let cell = GruCell::new(&mut store, "gru", n, hdim, &mut rng);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let x = tape.constant(Tensor::uniform(3, n, 1.0, &mut rng));
            let s = CellFunction::<f64>::zero_state(&cell, &mut tape, 3);
            let (_, out) = cell.step(&mut tape, &p, x, &s).unwrap();
            assert_eq!(tape.shape(out), (3, hdim));
            let bad = tape.zeros(3, n + 1);
            assert!(cell.step(&mut tape, &p, bad, &s).is_err());
        }
    }

    #[test]
    fn lstm_zero_everything_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng);
        zero_params(&mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.zeros(1, 3);
        let s = CellFunction::<f64>::zero_state(&cell, &mut tape, 1);
        let (next, out) = cell.step(&mut tape, &p, x, &s).unwrap();
        assert!(tape.value(next.memory).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_pure_carry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut store, "lstm", 2, 3, &mut rng);
        zero_params(&mut store);
        // saturate forget gate to 1 and input gate to 0 through the bias
        let b = store.get_mut(cell.params()[2]).data_mut();
        b[..3].iter_mut().for_each(|v| *v = -1e3);
        b[3..6].iter_mut().for_each(|v| *v = 1e3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::uniform(1, 2, 1.0, &mut rng));
        let c0 = Tensor::uniform(1, 3, 1.0, &mut rng);
        let c = tape.constant(c0.clone());
        let h = tape.constant(Tensor::uniform(1, 3, 1.0, &mut rng));
        let s = CellState {
            memory: c,
            remainder: Some(h),
        };
        let (next, _) = cell.step(&mut tape, &p, x, &s).unwrap();
        assert_eq!(tape.value(next.memory), &c0);
    }

    #[test]
    fn lstm_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng);
        let x = Tensor::uniform(2, 3, 1.0, &mut rng);
        let c = Tensor::uniform(2, 4, 1.0, &mut rng);
        let h = Tensor::uniform(2, 4, 1.0, &mut rng);
        let mut params = store.tensors().to_vec();
        params.extend([x, c, h]);
        let err = gradient_check(
            |tape, v| {
                let p = ParamVars::from_vars(v[..3].to_vec());
                let s = CellState {
                    memory: v[4],
                    remainder: Some(v[5]),
                };
                let (next, out) = cell.step(tape, &p, v[3], &s)?;
                let a = tape.sum(next.memory);
                let b = tape.mul(out, out)?;
                let b = tape.sum(b);
                tape.add(a, b)
            },
            &params,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-4, "lstm relative error {err}");
    }

    #[test]
    fn gru_is_pure_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "gru", 4, 6, &mut rng);
        let x0 = Tensor::uniform(3, 4, 3.0, &mut rng);
        let h0 = Tensor::uniform(3, 6, 3.0, &mut rng);
        let run = |x0: &Tensor<f64>, h0: &Tensor<f64>| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let x = tape.constant(x0.clone());
            let h = tape.constant(h0.clone());
            let s = CellState {
                memory: h,
                remainder: None,
            };
            let (_, out) = cell.step(&mut tape, &p, x, &s).unwrap();
            tape.value(out).clone()
        };
        let a = run(&x0, &h0);
        assert_eq!(a, run(&x0, &h0));
        let hmax = h0.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(a.data().iter().all(|v| v.abs() <= hmax + 1e-12));
    }
}
