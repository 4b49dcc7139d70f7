// SPDX-License-Identifier: Apache-2.0

//! Single-layer LSTM with a sigmoid readout, plus exact gradients of the
//! summed squared error by backpropagation through time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PredictorError;
use crate::exec;

/// Gate blocks in parameter-vector order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Forget = 0,
    Input = 1,
    Output = 2,
    /// Candidate cell input `k_t`.
    Candidate = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Forget, Gate::Input, Gate::Output, Gate::Candidate];
}

/// All weights of the model in one flat vector.
///
/// Layout, each matrix row-major: for each gate in [`Gate::ALL`] order
/// `W (H x m)`, `U (H x H)`, `b (H)`; then the readout `w_out (H)` and
/// `b_out (1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    hidden: usize,
    inputs: usize,
    values: Vec<f64>,
}

pub fn parameter_count(hidden: usize, inputs: usize) -> usize {
    4 * (hidden * inputs + hidden * hidden + hidden) + hidden + 1
}

impl LstmParams {
    pub fn zeros(hidden: usize, inputs: usize) -> Self {
        Self {
            hidden,
            inputs,
            values: vec![0.0; parameter_count(hidden, inputs)],
        }
    }

    /// Uniform initialization in [-0.08, 0.08] from a seeded generator.
    pub fn init(hidden: usize, inputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..parameter_count(hidden, inputs))
            .map(|_| rng.gen_range(-0.08..=0.08))
            .collect();
        Self {
            hidden,
            inputs,
            values,
        }
    }

    pub fn from_values(hidden: usize, inputs: usize, values: Vec<f64>) -> Result<Self, PredictorError> {
        if hidden == 0 || inputs == 0 || values.len() != parameter_count(hidden, inputs) {
            return Err(PredictorError::ShapeMismatch {
                expected: parameter_count(hidden, inputs),
                found: values.len(),
            });
        }
        Ok(Self {
            hidden,
            inputs,
            values,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn input_size(&self) -> usize {
        self.inputs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn gate_block(&self) -> usize {
        self.hidden * self.inputs + self.hidden * self.hidden + self.hidden
    }

    fn w_range(&self, g: Gate) -> std::ops::Range<usize> {
        let start = g as usize * self.gate_block();
        start..start + self.hidden * self.inputs
    }

    fn u_range(&self, g: Gate) -> std::ops::Range<usize> {
        let start = self.w_range(g).end;
        start..start + self.hidden * self.hidden
    }

    fn b_range(&self, g: Gate) -> std::ops::Range<usize> {
        let start = self.u_range(g).end;
        start..start + self.hidden
    }

    fn out_range(&self) -> std::ops::Range<usize> {
        let start = 4 * self.gate_block();
        start..start + self.hidden
    }

    pub fn w(&self, g: Gate) -> &[f64] {
        &self.values[self.w_range(g)]
    }

    pub fn u(&self, g: Gate) -> &[f64] {
        &self.values[self.u_range(g)]
    }

    pub fn b(&self, g: Gate) -> &[f64] {
        &self.values[self.b_range(g)]
    }

    pub fn w_mut(&mut self, g: Gate) -> &mut [f64] {
        let r = self.w_range(g);
        &mut self.values[r]
    }

    pub fn u_mut(&mut self, g: Gate) -> &mut [f64] {
        let r = self.u_range(g);
        &mut self.values[r]
    }

    pub fn b_mut(&mut self, g: Gate) -> &mut [f64] {
        let r = self.b_range(g);
        &mut self.values[r]
    }

    pub fn w_out(&self) -> &[f64] {
        &self.values[self.out_range()]
    }

    pub fn w_out_mut(&mut self) -> &mut [f64] {
        let r = self.out_range();
        &mut self.values[r]
    }

    pub fn b_out(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn set_b_out(&mut self, v: f64) {
        let last = self.values.len() - 1;
        self.values[last] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.hidden == other.hidden && self.inputs == other.inputs
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }
}

/// Recurrent state `(h_t, c_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `out[r] = bias[r] + sum_j w[r, j] * x[j] + sum_j u[r, j] * h[j]`
fn affine(w: &[f64], x: &[f64], u: &[f64], h: &[f64], bias: &[f64], out: &mut [f64]) {
    let m = x.len();
    let hn = h.len();
    for (r, o) in out.iter_mut().enumerate() {
        let wr = &w[r * m..(r + 1) * m];
        let ur = &u[r * hn..(r + 1) * hn];
        let mut acc = bias[r];
        for j in 0..m {
            acc += wr[j] * x[j];
        }
        for j in 0..hn {
            acc += ur[j] * h[j];
        }
        *o = acc;
    }
}

/// Activations of one time step, kept for the backward pass.
#[derive(Clone, Debug)]
struct StepCache {
    f: Vec<f64>,
    i: Vec<f64>,
    o: Vec<f64>,
    k: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
    y: f64,
}

fn cell(p: &LstmParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
    let n = p.hidden;
    let mut gates = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for g in Gate::ALL {
        affine(p.w(g), x, p.u(g), h_prev, p.b(g), &mut gates[g as usize]);
    }
    let [mut f, mut i, mut o, mut k] = gates;
    f.iter_mut().for_each(|v| *v = sigmoid(*v));
    i.iter_mut().for_each(|v| *v = sigmoid(*v));
    o.iter_mut().for_each(|v| *v = sigmoid(*v));
    k.iter_mut().for_each(|v| *v = v.tanh());
    let c: Vec<f64> = (0..n).map(|r| f[r] * c_prev[r] + i[r] * k[r]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..n).map(|r| o[r] * tanh_c[r]).collect();
    let z = p.b_out() + p.w_out().iter().zip(&h).map(|(w, h)| w * h).sum::<f64>();
    StepCache {
        f,
        i,
        o,
        k,
        c,
        tanh_c,
        h,
        y: sigmoid(z),
    }
}

fn check_input(p: &LstmParams, x: &[f64]) -> Result<(), PredictorError> {
    if x.len() != p.inputs {
        return Err(PredictorError::ShapeMismatch {
            expected: p.inputs,
            found: x.len(),
        });
    }
    Ok(())
}

/// One LSTM update: gates use the logistic sigmoid, the candidate `k_t` and
/// the output squashing use tanh.
pub fn lstm_step(p: &LstmParams, x: &[f64], prev: &LstmState) -> Result<LstmState, PredictorError> {
    check_input(p, x)?;
    if prev.h.len() != p.hidden || prev.c.len() != p.hidden {
        return Err(PredictorError::ShapeMismatch {
            expected: p.hidden,
            found: prev.h.len().max(prev.c.len()),
        });
    }
    let s = cell(p, x, &prev.h, &prev.c);
    Ok(LstmState { h: s.h, c: s.c })
}

fn run<X: AsRef<[f64]>>(p: &LstmParams, seq: &[X]) -> Result<Vec<StepCache>, PredictorError> {
    if seq.is_empty() {
        return Err(PredictorError::EmptySequence);
    }
    let mut state = LstmState::zeros(p.hidden);
    let mut caches = Vec::with_capacity(seq.len());
    for x in seq {
        let x = x.as_ref();
        check_input(p, x)?;
        let s = cell(p, x, &state.h, &state.c);
        state.h.clone_from(&s.h);
        state.c.clone_from(&s.c);
        caches.push(s);
    }
    Ok(caches)
}

/// Relapse probability after every step, starting from a zero state.
pub fn forward<X: AsRef<[f64]>>(p: &LstmParams, seq: &[X]) -> Result<Vec<f64>, PredictorError> {
    Ok(run(p, seq)?.into_iter().map(|s| s.y).collect())
}

/// Runs the sequence and returns the final state along with the outputs, so
/// a rollout can continue from it.
pub fn forward_with_state<X: AsRef<[f64]>>(
    p: &LstmParams,
    seq: &[X],
) -> Result<(Vec<f64>, LstmState), PredictorError> {
    let caches = run(p, seq)?;
    let last = caches.last().expect("non-empty");
    let state = LstmState {
        h: last.h.clone(),
        c: last.c.clone(),
    };
    Ok((caches.into_iter().map(|s| s.y).collect(), state))
}

/// Readout probability for a given hidden state.
pub fn readout(p: &LstmParams, h: &[f64]) -> f64 {
    sigmoid(p.b_out() + p.w_out().iter().zip(h).map(|(w, h)| w * h).sum::<f64>())
}

/// Inputs of one training sequence with the label for every step except the
/// last: `labels[t]` is the target for the output after step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl Sequence {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<f64>) -> Self {
        Self { inputs, labels }
    }

    fn check(&self) -> Result<(), PredictorError> {
        if self.inputs.is_empty() {
            return Err(PredictorError::EmptySequence);
        }
        if self.labels.len() + 1 != self.inputs.len() {
            return Err(PredictorError::AlignmentError {
                inputs: self.inputs.len(),
                labels: self.labels.len(),
            });
        }
        Ok(())
    }
}

fn sequence_sse(p: &LstmParams, seq: &Sequence) -> Result<f64, PredictorError> {
    seq.check()?;
    let y = forward(p, &seq.inputs)?;
    Ok(y.iter().zip(&seq.labels).map(|(y, t)| (y - t) * (y - t)).sum())
}

/// Sum of squared errors over every labeled step of every sequence.
pub fn loss(p: &LstmParams, batch: &[Sequence]) -> Result<f64, PredictorError> {
    let per_seq = exec::map(batch, |s| sequence_sse(p, s));
    let mut total = 0.0;
    for sse in per_seq {
        total += sse?;
    }
    Ok(total)
}

/// Root-mean-square error over all labeled steps; the reported metric.
pub fn rmse(p: &LstmParams, batch: &[Sequence]) -> Result<f64, PredictorError> {
    let n: usize = batch.iter().map(|s| s.labels.len()).sum();
    if n == 0 {
        return Ok(0.0);
    }
    Ok((loss(p, batch)? / n as f64).sqrt())
}

/// Exact gradient of the squared error of one sequence.
fn sequence_gradient(p: &LstmParams, seq: &Sequence) -> Result<(LstmParams, f64), PredictorError> {
    seq.check()?;
    let caches = run(p, &seq.inputs)?;
    let n = p.hidden;
    let m = p.inputs;
    let mut grad = LstmParams::zeros(n, m);
    let zeros = vec![0.0; n];

    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    let mut dz = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut sse = 0.0;

    for t in (0..caches.len()).rev() {
        let s = &caches[t];
        let (h_prev, c_prev) = if t == 0 {
            (&zeros, &zeros)
        } else {
            (&caches[t - 1].h, &caches[t - 1].c)
        };
        let x = &seq.inputs[t];

        let dy = match seq.labels.get(t) {
            Some(label) => {
                sse += (s.y - label) * (s.y - label);
                2.0 * (s.y - label)
            }
            None => 0.0,
        };
        let dlogit = dy * s.y * (1.0 - s.y);
        {
            let w_out = grad.w_out_mut();
            for r in 0..n {
                w_out[r] += dlogit * s.h[r];
            }
        }
        let b_out = grad.b_out();
        grad.set_b_out(b_out + dlogit);

        let w_out = p.w_out();
        for r in 0..n {
            let dh = dlogit * w_out[r] + dh_next[r];
            let d_o = dh * s.tanh_c[r];
            let dc = dh * s.o[r] * (1.0 - s.tanh_c[r] * s.tanh_c[r]) + dc_next[r];
            let d_f = dc * c_prev[r];
            let d_i = dc * s.k[r];
            let d_k = dc * s.i[r];
            dc_next[r] = dc * s.f[r];
            dz[Gate::Forget as usize][r] = d_f * s.f[r] * (1.0 - s.f[r]);
            dz[Gate::Input as usize][r] = d_i * s.i[r] * (1.0 - s.i[r]);
            dz[Gate::Output as usize][r] = d_o * s.o[r] * (1.0 - s.o[r]);
            dz[Gate::Candidate as usize][r] = d_k * (1.0 - s.k[r] * s.k[r]);
        }

        dh_next.iter_mut().for_each(|v| *v = 0.0);
        for g in Gate::ALL {
            let d = &dz[g as usize];
            {
                let gw = grad.w_mut(g);
                for r in 0..n {
                    for j in 0..m {
                        gw[r * m + j] += d[r] * x[j];
                    }
                }
            }
            {
                let gu = grad.u_mut(g);
                for r in 0..n {
                    for j in 0..n {
                        gu[r * n + j] += d[r] * h_prev[j];
                    }
                }
            }
            {
                let gb = grad.b_mut(g);
                for r in 0..n {
                    gb[r] += d[r];
                }
            }
            let u = p.u(g);
            for r in 0..n {
                for j in 0..n {
                    dh_next[j] += u[r * n + j] * d[r];
                }
            }
        }
    }
    Ok((grad, sse))
}

/// Gradient of [`loss`] with respect to every parameter, summed over the
/// batch. Per-sequence gradients are computed in parallel and added in batch
/// order, so the result does not depend on scheduling.
pub fn gradient(p: &LstmParams, batch: &[Sequence]) -> Result<LstmParams, PredictorError> {
    Ok(loss_and_gradient(p, batch)?.1)
}

pub fn loss_and_gradient(p: &LstmParams, batch: &[Sequence]) -> Result<(f64, LstmParams), PredictorError> {
    let parts = exec::map(batch, |s| sequence_gradient(p, s));
    sum_parts(p, parts)
}

pub(crate) fn loss_and_gradient_refs(
    p: &LstmParams,
    batch: &[&Sequence],
) -> Result<(f64, LstmParams), PredictorError> {
    let parts = exec::map(batch, |s| sequence_gradient(p, s));
    sum_parts(p, parts)
}

/// Same as [`loss_and_gradient`] but always on the calling thread.
pub fn loss_and_gradient_sequential(
    p: &LstmParams,
    batch: &[Sequence],
) -> Result<(f64, LstmParams), PredictorError> {
    let parts = exec::map_sequential(batch, |s| sequence_gradient(p, s));
    sum_parts(p, parts)
}

fn sum_parts(
    p: &LstmParams,
    parts: Vec<Result<(LstmParams, f64), PredictorError>>,
) -> Result<(f64, LstmParams), PredictorError> {
    let mut total = LstmParams::zeros(p.hidden, p.inputs);
    let mut sse = 0.0;
    for part in parts {
        let (g, l) = part?;
        total.add_scaled(&g, 1.0);
        sse += l;
    }
    Ok((sse, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_give_half_gates() {
        let p = LstmParams::zeros(3, 5);
        let s = lstm_step(&p, &[1.0, 2.0, 3.0, 4.0, 5.0], &LstmState::zeros(3)).unwrap();
        assert_eq!(s.c, vec![0.0; 3]);
        assert_eq!(s.h, vec![0.0; 3]);
        let caches = run(&p, &[vec![0.0; 5]]).unwrap();
        assert_eq!(caches[0].f, vec![0.5; 3]);
        assert_eq!(caches[0].i, vec![0.5; 3]);
        assert_eq!(caches[0].o, vec![0.5; 3]);
        assert_eq!(caches[0].k, vec![0.0; 3]);
    }

    #[test]
    fn zero_params_halve_the_cell() {
        let p = LstmParams::zeros(2, 5);
        let prev = LstmState {
            h: vec![0.0; 2],
            c: vec![0.8, -2.0],
        };
        let s = lstm_step(&p, &[0.0; 5], &prev).unwrap();
        assert_eq!(s.c, vec![0.4, -1.0]);
        assert_eq!(s.h, vec![0.5 * 0.4f64.tanh(), 0.5 * (-1.0f64).tanh()]);
    }

    #[test]
    fn scalar_cell_matches_hand_evaluation() {
        // H = 1, m = 1: gate order f, i, o, k with (W, U, b) each
        let vals = vec![
            0.3, -0.2, 0.1, // f
            0.5, 0.4, -0.3, // i
            -0.6, 0.2, 0.05, // o
            0.7, -0.1, 0.2, // k
            1.5, -0.4, // w_out, b_out
        ];
        let p = LstmParams::from_values(1, 1, vals).unwrap();
        let (x, h0, c0) = (0.9f64, 0.25f64, -0.7f64);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let f = sig(0.3 * x - 0.2 * h0 + 0.1);
        let i = sig(0.5 * x + 0.4 * h0 - 0.3);
        let o = sig(-0.6 * x + 0.2 * h0 + 0.05);
        let k = (0.7 * x - 0.1 * h0 + 0.2).tanh();
        let c = f * c0 + i * k;
        let h = o * c.tanh();
        let s = lstm_step(&p, &[x], &LstmState { h: vec![h0], c: vec![c0] }).unwrap();
        assert!((s.c[0] - c).abs() < 1e-12);
        assert!((s.h[0] - h).abs() < 1e-12);
        assert!((readout(&p, &s.h) - sig(1.5 * h - 0.4)).abs() < 1e-12);
    }

    #[test]
    fn saturated_gates_preserve_the_cell() {
        let mut p = LstmParams::init(4, 5, 3);
        p.b_mut(Gate::Forget).iter_mut().for_each(|b| *b = 40.0);
        p.b_mut(Gate::Input).iter_mut().for_each(|b| *b = -40.0);
        let prev = LstmState {
            h: vec![0.1, -0.2, 0.3, 0.0],
            c: vec![0.5, -1.5, 2.0, 0.25],
        };
        let s = lstm_step(&p, &[0.2, 0.0, 0.5, 0.3, 0.1], &prev).unwrap();
        for (a, b) in s.c.iter().zip(&prev.c) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_model_outputs_half() {
        let p = LstmParams::zeros(16, 5);
        let y = forward(&p, &vec![vec![0.3; 5]; 10]).unwrap();
        assert_eq!(y, vec![0.5; 10]);
        assert_eq!(forward(&p, &[vec![0.0; 5]]).unwrap().len(), 1);
        assert!(matches!(
            forward::<Vec<f64>>(&p, &[]),
            Err(PredictorError::EmptySequence)
        ));
        assert!(matches!(
            forward(&p, &[vec![0.0; 4]]),
            Err(PredictorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn loss_examples() {
        let p = LstmParams::zeros(2, 5);
        let one = Sequence::new(vec![vec![0.0; 5]; 2], vec![1.0]);
        assert_eq!(loss(&p, &[one.clone()]).unwrap(), 0.25);
        let perfect = Sequence::new(vec![vec![0.0; 5]; 3], vec![0.5, 0.5]);
        assert_eq!(loss(&p, &[perfect]).unwrap(), 0.0);
        let misaligned = Sequence::new(vec![vec![0.0; 5]; 3], vec![0.5]);
        assert!(matches!(
            loss(&p, &[misaligned]),
            Err(PredictorError::AlignmentError { .. })
        ));
    }

    #[test]
    fn zero_problem_has_zero_readout_gradient() {
        let p = LstmParams::zeros(3, 5);
        let seq = Sequence::new(vec![vec![0.0; 5]; 6], vec![0.0; 5]);
        let g = gradient(&p, &[seq]).unwrap();
        assert_eq!(g.w_out(), &[0.0; 3]);
    }
}
