//! Gradient checks and the degeneration run shared by the per-module tests
//! and the acceptance suite.
#![allow(dead_code)]

use std::sync::Arc;

use amrnn::am_rnn::{AmRnn, AmRnnConfig, KeyProjection};
use amrnn::autodiff::{gradient_check, ParamStore, ParamVars, Tape, Tensor, Var, DEFAULT_EPS};
use amrnn::cells::{CellFunction, CellState, GruCell, LstmCell};
use amrnn::hrr::make_permutations;
use amrnn::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named maximum relative errors from a series of gradient checks.
#[derive(Default)]
pub struct Checks {
    pub results: Vec<(String, f64)>,
}

impl Checks {
    pub fn run<F>(&mut self, name: &str, f: F, params: &[Tensor<f64>])
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let err = gradient_check(f, params, DEFAULT_EPS).unwrap_or(f64::INFINITY);
        self.results.push((name.to_string(), err));
    }

    pub fn worst(&self) -> (String, f64) {
        self.results
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |a, b| if b.1 > a.1 || b.1.is_nan() { b } else { a })
    }
}

pub fn rand_t(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(rows, cols, 1.0, &mut rng)
}

/// Values bounded away from zero, for kinked or singular functions.
pub fn away_from_zero(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// `sum(w ⊙ v)` with a fixed random `w`, so every output entry matters.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.shape(v);
    let w = tape.constant(rand_t(r, c, seed ^ 0xabcdef));
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

pub fn matmul_and_elementwise_arithmetic(c: &mut Checks) {
    c.run(
        "matmul",
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        },
        &[rand_t(3, 4, 1), rand_t(4, 5, 2)],
    );
    c.run(
        "add",
        |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 2)
        },
        &[rand_t(2, 3, 3), rand_t(2, 3, 4)],
    );
    c.run(
        "add_bias",
        |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            project(t, y, 3)
        },
        &[rand_t(4, 3, 5), rand_t(1, 3, 6)],
    );
    c.run(
        "sub",
        |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, 4)
        },
        &[rand_t(2, 3, 7), rand_t(2, 3, 8)],
    );
    c.run(
        "mul",
        |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 5)
        },
        &[rand_t(2, 3, 9), rand_t(2, 3, 10)],
    );
    c.run(
        "div",
        |t, v| {
            let y = t.div(v[0], v[1])?;
            project(t, y, 6)
        },
        &[rand_t(2, 3, 11), away_from_zero(2, 3, 12)],
    );
    c.run(
        "scale",
        |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y, 7)
        },
        &[rand_t(2, 3, 13)],
    );
}

pub fn structural_ops(c: &mut Checks) {
    c.run(
        "concat",
        |t, v| {
            let y = t.concat(&[v[0], v[1], v[0]])?;
            project(t, y, 8)
        },
        &[rand_t(2, 3, 14), rand_t(2, 2, 15)],
    );
    c.run(
        "slice",
        |t, v| {
            let y = t.slice(v[0], 1, 3)?;
            project(t, y, 9)
        },
        &[rand_t(2, 5, 16)],
    );
    c.run(
        "gather_rows",
        |t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2, 3])?;
            project(t, y, 10)
        },
        &[rand_t(5, 3, 17)],
    );
    c.run(
        "mask_rows",
        |t, v| {
            let y = t.mask_rows(v[0], v[1], &[true, false, true])?;
            project(t, y, 11)
        },
        &[rand_t(3, 2, 18), rand_t(3, 2, 19)],
    );
}

pub fn nonlinearities_and_reductions(c: &mut Checks) {
    c.run(
        "sigmoid",
        |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, 12)
        },
        &[rand_t(3, 3, 20)],
    );
    c.run(
        "tanh",
        |t, v| {
            let y = t.tanh(v[0]);
            project(t, y, 13)
        },
        &[rand_t(3, 3, 21)],
    );
    c.run(
        "relu",
        |t, v| {
            let y = t.relu(v[0]);
            project(t, y, 14)
        },
        &[away_from_zero(3, 3, 22)],
    );
    c.run(
        "abs",
        |t, v| {
            let y = t.abs(v[0]);
            project(t, y, 15)
        },
        &[away_from_zero(3, 3, 23)],
    );
    c.run(
        "sqrt",
        |t, v| {
            let y = t.sqrt(v[0]);
            project(t, y, 16)
        },
        &[away_from_zero(3, 3, 24).map(f64::abs)],
    );
    c.run(
        "max_scalar",
        |t, v| {
            let y = t.max_scalar(v[0], 0.1);
            project(t, y, 17)
        },
        &[away_from_zero(3, 3, 25)],
    );
    c.run(
        "sum",
        |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        },
        &[rand_t(2, 4, 26)],
    );
    c.run(
        "mean",
        |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        },
        &[rand_t(2, 4, 27)],
    );
    c.run(
        "softmax_cross_entropy",
        |t, v| t.softmax_cross_entropy(v[0], &[2, 0, 1]),
        &[rand_t(3, 4, 28).map(|x| 3.0 * x)],
    );
}

pub fn complex_and_memory_ops(c: &mut Checks) {
    let perms = Arc::new(make_permutations(3, 4, 7).unwrap());
    c.run(
        "cmul",
        |t, v| {
            let y = t.cmul(v[0], v[1])?;
            project(t, y, 18)
        },
        &[rand_t(2, 8, 29), rand_t(2, 8, 30)],
    );
    c.run(
        "conj",
        |t, v| {
            let y = t.conj(v[0])?;
            project(t, y, 19)
        },
        &[rand_t(2, 8, 31)],
    );
    // Moduli range over both sides of 1 so both branches of bound are hit.
    let mut key = rand_t(2, 8, 32).map(|x| 1.4 * x);
    key.data_mut()[0] = 0.9;
    key.data_mut()[4] = 0.9;
    c.run(
        "bound",
        |t, v| {
            let y = t.bound(v[0])?;
            project(t, y, 20)
        },
        &[key],
    );
    let p = perms.clone();
    c.run(
        "mem_read",
        move |t, v| {
            let y = t.mem_read(v[0], v[1], &p)?;
            project(t, y, 21)
        },
        &[rand_t(2, 24, 33), rand_t(2, 8, 34)],
    );
    let p = perms.clone();
    c.run(
        "mem_write",
        move |t, v| {
            let y = t.mem_write(v[0], v[1], v[2], &p)?;
            project(t, y, 22)
        },
        &[rand_t(2, 24, 35), rand_t(2, 8, 36), rand_t(2, 8, 37)],
    );
}

fn bind_store(store: &ParamStore<f64>, vars: &[Var]) -> ParamVars {
    ParamVars::from_vars(vars[..store.len()].to_vec())
}

pub fn gru_and_lstm_steps(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
    let mut params = store.tensors().to_vec();
    params.push(rand_t(2, 3, 41));
    params.push(rand_t(2, 4, 42));
    c.run(
        "gru step",
        |t, v| {
            let p = bind_store(&store, v);
            let n = store.len();
            let state = CellState {
                memory: v[n + 1],
                remainder: None,
            };
            let (_, h) = gru.step(t, &p, v[n], &state)?;
            project(t, h, 23)
        },
        &params,
    );

    let mut store = ParamStore::new();
    let lstm = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng);
    let mut params = store.tensors().to_vec();
    params.push(rand_t(2, 3, 43));
    params.push(rand_t(2, 4, 44));
    params.push(rand_t(2, 4, 45));
    c.run(
        "lstm step",
        |t, v| {
            let p = bind_store(&store, v);
            let n = store.len();
            let state = CellState {
                memory: v[n + 1],
                remainder: Some(v[n + 2]),
            };
            let (next, h) = lstm.step(t, &p, v[n], &state)?;
            let a = project(t, h, 24)?;
            let b = project(t, next.memory, 25)?;
            t.add(a, b)
        },
        &params,
    );
}

fn am_gru(dual: bool, shared_dual_key: bool, seed: u64) -> (ParamStore<f64>, AmRnn<f64, GruCell>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = AmRnnConfig {
        input_size: 3,
        hidden_size: 4,
        memory_size: 4,
        redundancy: 2,
        dual,
        shared_dual_key,
    };
    let cell = GruCell::new(&mut store, "cell", cfg.cell_input_size(), 4, &mut rng);
    let proj = KeyProjection::new(&mut store, "key", 7, 4, dual && !shared_dual_key, 1.0, &mut rng);
    let perms = Arc::new(make_permutations(2, 2, seed).unwrap());
    let net = AmRnn::new(cell, proj, perms, cfg).unwrap();
    // Larger key weights keep the bounded keys away from the modulus-1 kink
    // and make the memory path carry real signal.
    for (name, t) in store.names().to_vec().iter().zip(store.tensors_mut()) {
        if name.starts_with("key") {
            *t = t.map(|x| 3.0 * x);
        }
    }
    (store, net)
}

pub fn am_gru_step(c: &mut Checks) {
    let (store, net) = am_gru(false, true, 50);
    let mut params = store.tensors().to_vec();
    params.push(rand_t(2, 3, 51));
    params.push(rand_t(2, 8, 52));
    params.push(rand_t(2, 4, 53));
    c.run(
        "am-gru step",
        |t, v| {
            let p = bind_store(&store, v);
            let n = store.len();
            let mut state = net.zero_state(t, 2);
            state.memory = v[n + 1];
            state.h = v[n + 2];
            let (next, _) = net.am_step(t, &p, v[n], &state)?;
            let a = project(t, next.h, 26)?;
            let b = project(t, next.memory, 27)?;
            t.add(a, b)
        },
        &params,
    );
}

pub fn dual_unroll(c: &mut Checks, shared_dual_key: bool, seed: u64) {
    let (store, net) = am_gru(true, shared_dual_key, seed);
    let mut params = store.tensors().to_vec();
    for s in 0..3 {
        params.push(rand_t(2, 3, seed + 10 + s));
    }
    params.push(rand_t(2, 8, seed + 20));
    c.run(
        "dual am-gru unroll",
        |t, v| {
            let p = bind_store(&store, v);
            let n = store.len();
            let init = net.zero_state(t, 2);
            let out = net.dual_am_run(t, &p, &v[n..n + 3], init, v[n + 3], None, false)?;
            let a = project(t, out.final_state.h, 28)?;
            let b = project(t, out.final_state.memory, 29)?;
            let c = project(t, out.outputs[0], 30)?;
            let ab = t.add(a, b)?;
            t.add(ab, c)
        },
        &params,
    );
}

/// Every differentiable tape primitive.
pub fn all_primitives(c: &mut Checks) {
    matmul_and_elementwise_arithmetic(c);
    structural_ops(c);
    nonlinearities_and_reductions(c);
    complex_and_memory_ops(c);
}

/// Largest per-step output gap between an AM-GRU with one memory copy and a
/// constant unit key and the bare GRU it wraps, over `steps` steps.
pub fn degeneration_gap(steps: usize) -> f64 {
    let (n, h) = (3, 6);
    let cfg = AmRnnConfig {
        input_size: n,
        hidden_size: h,
        memory_size: h,
        redundancy: 1,
        dual: false,
        shared_dual_key: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::<f64>::new();
    let cell = GruCell::new(&mut store, "cell", n + h, h, &mut rng);
    let phases = [0.3, -1.2, 2.5];
    let mut key: Vec<f64> = phases.iter().map(|p: &f64| p.cos()).collect();
    key.extend(phases.iter().map(|p: &f64| p.sin()));
    let proj = KeyProjection::fixed(key, n + h);
    let perms = Arc::new(make_permutations(1, h / 2, 0).unwrap());
    let net = AmRnn::new(cell.clone(), proj, perms, cfg).unwrap();

    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xs: Vec<Var> = (0..steps)
        .map(|t| tape.constant(rand_t(2, n, 150 + t as u64)))
        .collect();
    let init = net.zero_state(&mut tape, 2);
    let am = net.am_run(&mut tape, &p, &xs, init, None, false).unwrap();

    let mut hprev = tape.zeros(2, h);
    let mut worst = 0.0f64;
    for (t, &x) in xs.iter().enumerate() {
        let input = tape.concat(&[x, hprev]).unwrap();
        let st = CellState {
            memory: hprev,
            remainder: None,
        };
        let (_, out) = cell.step(&mut tape, &p, input, &st).unwrap();
        let diff = tape
            .value(out)
            .data()
            .iter()
            .zip(tape.value(am.outputs[t]).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
        hprev = out;
    }
    worst
}
