//! Minimal dense networks with Adam, in f32.
//!
//! The models here are desk-scale scalar regressors (a conditional-mean
//! encoder and a noise-prediction net), so a hand-rolled MLP keeps training
//! fully deterministic and lets the sampler cache first-layer projections.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub w: Vec<f32>, // row-major [out][inp]
    pub b: Vec<f32>,
    pub inp: usize,
    pub out: usize,
}

impl Dense {
    fn new(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        // He-uniform init for relu nets.
        let limit = (6.0 / inp as f64).sqrt() as f32;
        let w = (0..inp * out).map(|_| rng.gen_range(-limit..limit)).collect();
        Self {
            w,
            b: vec![0.0; out],
            inp,
            out,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
            inp: self.inp,
            out: self.out,
        }
    }
}

/// Feed-forward net with relu between layers and a linear output layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims` = [input, hidden..., output].
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Dense::new(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    /// All-zero network with the given dims (tests, degenerate fixtures).
    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                w: vec![0.0; w[0] * w[1]],
                b: vec![0.0; w[1]],
                inp: w[0],
                out: w[1],
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inp
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out
    }

    /// Single-row forward pass; returns the scalar first output.
    pub fn forward_scalar(&self, x: &[f32]) -> f32 {
        let mut cur = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let last = li + 1 == self.layers.len();
            let mut next = vec![0.0f32; layer.out];
            for (o, n) in next.iter_mut().enumerate() {
                let row = &layer.w[o * layer.inp..(o + 1) * layer.inp];
                let mut acc = layer.b[o];
                for (wv, xv) in row.iter().zip(cur.iter()) {
                    acc += wv * xv;
                }
                *n = if last { acc } else { acc.max(0.0) };
            }
            cur = next;
        }
        cur[0]
    }

    /// Single-row forward pass carried out in f64 (weights are still f32).
    /// Analytic estimators use this to keep ratio statistics free of
    /// state-rounding noise; the batched sampler stays in f32.
    pub fn forward_scalar_f64(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let last = li + 1 == self.layers.len();
            let mut next = vec![0.0f64; layer.out];
            for (o, n) in next.iter_mut().enumerate() {
                let row = &layer.w[o * layer.inp..(o + 1) * layer.inp];
                let mut acc = f64::from(layer.b[o]);
                for (wv, xv) in row.iter().zip(cur.iter()) {
                    acc += f64::from(*wv) * xv;
                }
                *n = if last { acc } else { acc.max(0.0) };
            }
            cur = next;
        }
        cur[0]
    }

    /// Batched forward; fills `ws.acts[l]` (post-activation) for each layer.
    pub fn forward_batch(&self, input: &[f32], rows: usize, ws: &mut Workspace) {
        ws.ensure(self, rows);
        for (li, layer) in self.layers.iter().enumerate() {
            let last = li + 1 == self.layers.len();
            let (done, rest) = ws.acts.split_at_mut(li);
            let out = &mut rest[0];
            let src: &[f32] = if li == 0 { input } else { &done[li - 1] };
            for r in 0..rows {
                let x = &src[r * layer.inp..(r + 1) * layer.inp];
                let dst = &mut out[r * layer.out..(r + 1) * layer.out];
                for (o, d) in dst.iter_mut().enumerate() {
                    let wrow = &layer.w[o * layer.inp..(o + 1) * layer.inp];
                    let mut acc = layer.b[o];
                    for (wv, xv) in wrow.iter().zip(x.iter()) {
                        acc += wv * xv;
                    }
                    *d = if last { acc } else { acc.max(0.0) };
                }
            }
        }
    }

    /// Backprop for a batch. `dout` is dLoss/d(output activations) with the
    /// same layout as `ws.acts.last()`. Gradients are accumulated into
    /// `grads` (caller zeroes them).
    pub fn backward_batch(
        &self,
        input: &[f32],
        rows: usize,
        ws: &mut Workspace,
        dout: &[f32],
        grads: &mut Gradients,
    ) {
        let n_layers = self.layers.len();
        ws.delta.clear();
        ws.delta.extend_from_slice(dout);
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let src: &[f32] = if li == 0 { input } else { &ws.acts[li - 1] };
            let g = &mut grads.layers[li];
            // Accumulate weight/bias gradients.
            for r in 0..rows {
                let d = &ws.delta[r * layer.out..(r + 1) * layer.out];
                let x = &src[r * layer.inp..(r + 1) * layer.inp];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    g.b[o] += dv;
                    let wrow = &mut g.w[o * layer.inp..(o + 1) * layer.inp];
                    for (wv, xv) in wrow.iter_mut().zip(x.iter()) {
                        *wv += dv * xv;
                    }
                }
            }
            if li == 0 {
                break;
            }
            // Propagate delta to the previous layer (through its relu).
            ws.delta_prev.clear();
            ws.delta_prev.resize(rows * layer.inp, 0.0);
            for r in 0..rows {
                let d = &ws.delta[r * layer.out..(r + 1) * layer.out];
                let dp = &mut ws.delta_prev[r * layer.inp..(r + 1) * layer.inp];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let wrow = &layer.w[o * layer.inp..(o + 1) * layer.inp];
                    for (pv, wv) in dp.iter_mut().zip(wrow.iter()) {
                        *pv += dv * wv;
                    }
                }
                let act = &ws.acts[li - 1][r * layer.inp..(r + 1) * layer.inp];
                for (pv, av) in dp.iter_mut().zip(act.iter()) {
                    if *av <= 0.0 {
                        *pv = 0.0;
                    }
                }
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

/// Per-batch scratch buffers.
#[derive(Default)]
pub struct Workspace {
    acts: Vec<Vec<f32>>,
    delta: Vec<f32>,
    delta_prev: Vec<f32>,
}

impl Workspace {
    fn ensure(&mut self, mlp: &Mlp, rows: usize) {
        self.acts.resize(mlp.layers.len(), Vec::new());
        for (a, l) in self.acts.iter_mut().zip(mlp.layers.iter()) {
            a.clear();
            a.resize(rows * l.out, 0.0);
        }
    }

    pub fn output(&self) -> &[f32] {
        self.acts.last().unwrap()
    }
}

/// Gradient accumulator shaped like an [`Mlp`].
pub struct Gradients {
    layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Adam state over the flattened parameter vector.
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Adam {
    pub fn new(mlp: &Mlp, lr: f64) -> Self {
        let n = mlp.param_count();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: lr as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut idx = 0usize;
        for (layer, g) in mlp.layers.iter_mut().zip(grads.layers.iter()) {
            for (p, gv) in layer
                .w
                .iter_mut()
                .chain(layer.b.iter_mut())
                .zip(g.w.iter().chain(g.b.iter()))
            {
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                idx += 1;
            }
        }
    }
}

/// Mini-batch MSE regression with Adam; returns the per-epoch loss curve.
pub fn train_mse(
    mlp: &mut Mlp,
    xs: &[f32],
    ys: &[f32],
    epochs: usize,
    batch: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let dim = mlp.input_dim();
    let rows = ys.len();
    assert_eq!(xs.len(), rows * dim);
    let mut adam = Adam::new(mlp, lr);
    let mut grads = Gradients::zeros_like(mlp);
    let mut ws = Workspace::default();
    let mut order: Vec<usize> = (0..rows).collect();
    let mut bx = Vec::new();
    let mut by = Vec::new();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        shuffle(&mut order, rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(batch) {
            bx.clear();
            by.clear();
            for &r in chunk {
                bx.extend_from_slice(&xs[r * dim..(r + 1) * dim]);
                by.push(ys[r]);
            }
            let n = chunk.len();
            mlp.forward_batch(&bx, n, &mut ws);
            let mut dout = vec![0.0f32; n];
            let mut loss = 0.0f64;
            for (i, d) in dout.iter_mut().enumerate() {
                let err = ws.output()[i] - by[i];
                loss += f64::from(err) * f64::from(err);
                *d = 2.0 * err / n as f32;
            }
            epoch_loss += loss;
            grads.zero();
            mlp.backward_batch(&bx, n, &mut ws, &dout, &mut grads);
            adam.step(mlp, &grads);
        }
        let mean = epoch_loss / rows as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        curve.push(mean);
    }
    Ok(curve)
}

/// Fisher-Yates with the crate's seeded generator.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn fits_linear_function() {
        let mut rng = seed::rng(5);
        let rows = 512;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..rows {
            let x = -1.0 + 2.0 * i as f32 / rows as f32;
            xs.push(x);
            ys.push(3.0 * x - 0.5);
        }
        let mut mlp = Mlp::new(&[1, 16, 1], &mut rng);
        train_mse(&mut mlp, &xs, &ys, 400, 64, 1e-2, &mut rng).unwrap();
        let mut worst = 0.0f32;
        for i in 0..rows {
            let err = (mlp.forward_scalar(&[xs[i]]) - ys[i]).abs();
            worst = worst.max(err);
        }
        assert!(worst < 0.05, "worst abs error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seed::rng(9);
        let mlp0 = Mlp::new(&[3, 5, 4, 1], &mut rng);
        let xs: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin()).collect();
        let ys: Vec<f32> = vec![0.3, -0.2, 0.9, 0.1];
        let loss = |mlp: &Mlp| -> f64 {
            let mut ws = Workspace::default();
            let m = mlp.clone();
            m.forward_batch(&xs, 4, &mut ws);
            ws.output()
                .iter()
                .zip(ys.iter())
                .map(|(o, y)| (f64::from(*o) - f64::from(*y)).powi(2))
                .sum::<f64>()
                / 4.0
        };
        let mut ws = Workspace::default();
        let mut grads = Gradients::zeros_like(&mlp0);
        let m = mlp0.clone();
        m.forward_batch(&xs, 4, &mut ws);
        let dout: Vec<f32> = ws
            .output()
            .iter()
            .zip(ys.iter())
            .map(|(o, y)| 2.0 * (o - y) / 4.0)
            .collect();
        m.backward_batch(&xs, 4, &mut ws, &dout, &mut grads);

        let h = 1e-3f32;
        for li in 0..m.layers.len() {
            for wi in 0..m.layers[li].w.len() {
                let mut mp = m.clone();
                mp.layers[li].w[wi] += h;
                let mut mm = m.clone();
                mm.layers[li].w[wi] -= h;
                let fd = (loss(&mp) - loss(&mm)) / (2.0 * f64::from(h));
                let an = f64::from(grads.layers[li].w[wi]);
                assert!(
                    (fd - an).abs() <= 1e-3 * (1.0 + fd.abs()),
                    "layer {li} w[{wi}]: fd {fd} vs an {an}"
                );
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let build = || {
            let mut rng = seed::rng(77);
            let xs: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
            let ys: Vec<f32> = xs.iter().map(|x| x * x).collect();
            let mut mlp = Mlp::new(&[1, 8, 1], &mut rng);
            let curve = train_mse(&mut mlp, &xs, &ys, 20, 16, 1e-2, &mut rng).unwrap();
            (mlp, curve)
        };
        let (a, ca) = build();
        let (b, cb) = build();
        assert_eq!(ca, cb);
        for (la, lb) in a.layers.iter().zip(b.layers.iter()) {
            assert_eq!(la.w, lb.w);
            assert_eq!(la.b, lb.b);
        }
    }
}
