//! Conditional diffusion over scalar prediction errors.
//!
//! The model follows the conditional-regression construction: a pre-trained
//! encoder f_phi(c) estimates the conditional mean of the target, the forward
//! kernel drifts noisy states toward that mean, and a noise net epsilon_theta
//! is trained to recover the injected Gaussian noise. Reverse sampling runs in
//! the residual variable s - f_phi(c), which reduces the drifted forward
//! kernel exactly to a plain DDPM so the textbook reverse update applies
//! unchanged.
//!
//! Targets and contexts are standardized with training-set statistics that
//! are frozen into the model; all public sampling APIs speak raw units.

pub mod nn;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use nn::{Adam, Gradients, Mlp, Workspace};

/// Linear variance schedule with cumulative signal-retention products.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// alpha_bars[j] for j = 0..=T with alpha_bars[0] = 1.
    alpha_bars: Vec<f64>,
}

impl VarianceSchedule {
    pub fn linear(t_diff: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_diff == 0 {
            return Err(Error::InvalidSchedule("t_diff must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = (0..t_diff)
            .map(|i| {
                if t_diff == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_diff - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// beta_j, 1-indexed.
    pub fn beta(&self, j: usize) -> f64 {
        self.betas[j - 1]
    }

    pub fn alpha(&self, j: usize) -> f64 {
        self.alphas[j - 1]
    }

    /// Cumulative product alpha_bar_j, with alpha_bar_0 = 1.
    pub fn alpha_bar(&self, j: usize) -> f64 {
        self.alpha_bars[j]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

/// Build a linear schedule (the schedule constructor used everywhere).
pub fn make_schedule(t_diff: usize, beta_start: f64, beta_end: f64) -> Result<VarianceSchedule> {
    VarianceSchedule::linear(t_diff, beta_start, beta_end)
}

/// One forward-kernel draw: sqrt(ab_j) s0 + (1 - sqrt(ab_j)) f_phi +
/// sqrt(1 - ab_j) noise.
pub fn forward_sample(
    schedule: &VarianceSchedule,
    s0: f64,
    fphi: f64,
    j: usize,
    noise: f64,
) -> f64 {
    let ab = schedule.alpha_bar(j);
    let sab = ab.sqrt();
    sab * s0 + (1.0 - sab) * fphi + (1.0 - ab).sqrt() * noise
}

/// Conditioning variable: nuisance, time step, lookahead offset, agent index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    pub eta: f64,
    pub t: f64,
    pub h: f64,
    pub agent: f64,
}

impl ContextVector {
    pub fn new(eta: f64, t: usize, h: usize, agent: usize) -> Self {
        Self {
            eta,
            t: t as f64,
            h: h as f64,
            agent: agent as f64,
        }
    }

    fn raw(&self) -> [f64; 4] {
        [self.eta, self.t, self.h, self.agent]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextStats {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl ContextStats {
    fn fit(contexts: impl Iterator<Item = [f64; 4]> + Clone) -> Self {
        let mut mean = [0.0; 4];
        let mut n = 0usize;
        for c in contexts.clone() {
            for (m, v) in mean.iter_mut().zip(c.iter()) {
                *m += v;
            }
            n += 1;
        }
        for m in &mut mean {
            *m /= n.max(1) as f64;
        }
        let mut var = [0.0; 4];
        for c in contexts {
            for ((v, m), x) in var.iter_mut().zip(mean.iter()).zip(c.iter()) {
                *v += (x - m) * (x - m);
            }
        }
        let mut std = [0.0; 4];
        for (s, v) in std.iter_mut().zip(var.iter()) {
            *s = (v / n.max(1) as f64).sqrt().max(1e-9);
        }
        Self { mean, std }
    }

    fn apply(&self, c: &ContextVector) -> [f32; 4] {
        let raw = c.raw();
        let mut out = [0.0f32; 4];
        for i in 0..4 {
            out[i] = ((raw[i] - self.mean[i]) / self.std[i]) as f32;
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: f64,
    pub std: f64,
}

impl TargetStats {
    fn fit(ys: &[f64]) -> Self {
        let n = ys.len().max(1) as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt().max(1e-9),
        }
    }

    fn to_std(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    fn to_raw(&self, u: f64) -> f64 {
        u * self.std + self.mean
    }
}

/// Architecture and optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub t_diff: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub encoder_hidden: Vec<usize>,
    pub noise_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub batch: usize,
    pub encoder_epochs: usize,
    pub encoder_lr: f64,
    pub noise_epochs: usize,
    pub noise_lr: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_diff: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            encoder_hidden: vec![64, 64],
            noise_hidden: vec![128, 128],
            embed_dim: 16,
            batch: 256,
            encoder_epochs: 200,
            encoder_lr: 1e-3,
            noise_epochs: 120,
            noise_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub encoder_loss: Vec<f64>,
    pub noise_loss: Vec<f64>,
    /// Per-step noise MSE E(j) recorded over the final training epoch.
    pub noise_mse_per_step: Vec<f64>,
}

/// Pretrained conditional-mean encoder plus the standardization statistics
/// fitted on its training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainedEncoder {
    pub mlp: Mlp,
    pub ctx_stats: ContextStats,
    pub target_stats: TargetStats,
    pub loss_curve: Vec<f64>,
    pub final_mse: f64,
}

/// Train the conditional-mean encoder on (context, target) pairs.
pub fn pretrain_encoder(
    dataset: &[(ContextVector, f64)],
    hidden: &[usize],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<PretrainedEncoder> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty encoder dataset".into()));
    }
    let ctx_stats = ContextStats::fit(dataset.iter().map(|(c, _)| c.raw()));
    let ys_raw: Vec<f64> = dataset.iter().map(|(_, y)| *y).collect();
    let target_stats = TargetStats::fit(&ys_raw);

    let mut xs = Vec::with_capacity(dataset.len() * 4);
    let mut ys = Vec::with_capacity(dataset.len());
    for (c, y) in dataset {
        xs.extend_from_slice(&ctx_stats.apply(c));
        ys.push(target_stats.to_std(*y) as f32);
    }
    let mut dims = vec![4usize];
    dims.extend_from_slice(hidden);
    dims.push(1);
    let mut rng = seed::rng(seed::derive(seed, "encoder"));
    let mut mlp = Mlp::new(&dims, &mut rng);
    let loss_curve = nn::train_mse(&mut mlp, &xs, &ys, epochs, batch, lr, &mut rng)?;
    let final_mse = loss_curve.last().copied().unwrap_or(f64::NAN);
    Ok(PretrainedEncoder {
        mlp,
        ctx_stats,
        target_stats,
        loss_curve,
        final_mse,
    })
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// The trained conditional diffusion model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub format_version: u32,
    pub schedule: VarianceSchedule,
    pub encoder: Mlp,
    pub noise_net: Mlp,
    pub ctx_stats: ContextStats,
    pub target_stats: TargetStats,
    /// Std of the standardized residual s0_std - f_phi on the training set.
    pub residual_std: f64,
    pub embed_dim: usize,
    pub train_meta: TrainMeta,
}

impl DiffusionModel {
    /// Assemble a model from parts (fixtures, tests, degenerate nets).
    pub fn from_parts(
        schedule: VarianceSchedule,
        encoder: Mlp,
        noise_net: Mlp,
        ctx_stats: ContextStats,
        target_stats: TargetStats,
        embed_dim: usize,
    ) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            schedule,
            encoder,
            noise_net,
            ctx_stats,
            target_stats,
            residual_std: 1.0,
            embed_dim,
            train_meta: TrainMeta::default(),
        }
    }

    /// Initialize an untrained model around a pretrained encoder.
    pub fn init(enc: PretrainedEncoder, cfg: &DiffusionConfig, seed: u64) -> Result<Self> {
        let schedule = make_schedule(cfg.t_diff, cfg.beta_start, cfg.beta_end)?;
        let mut dims = vec![NOISE_INPUT_HEAD + cfg.embed_dim];
        dims.extend_from_slice(&cfg.noise_hidden);
        dims.push(1);
        let mut rng = seed::rng(seed::derive(seed, "noise-init"));
        let noise_net = Mlp::new(&dims, &mut rng);
        Ok(Self {
            format_version: MODEL_FORMAT_VERSION,
            schedule,
            encoder: enc.mlp,
            noise_net,
            ctx_stats: enc.ctx_stats,
            target_stats: enc.target_stats,
            residual_std: 1.0,
            embed_dim: cfg.embed_dim,
            train_meta: TrainMeta {
                seed,
                encoder_loss: enc.loss_curve,
                ..TrainMeta::default()
            },
        })
    }

    /// Convenience: pretrain the encoder and train the noise net.
    pub fn train(
        dataset: &[(ContextVector, f64)],
        cfg: &DiffusionConfig,
        seed: u64,
    ) -> Result<Self> {
        let enc = pretrain_encoder(
            dataset,
            &cfg.encoder_hidden,
            cfg.encoder_epochs,
            cfg.batch,
            cfg.encoder_lr,
            seed,
        )?;
        let mut model = Self::init(enc, cfg, seed)?;
        train_noise_net(
            &mut model,
            dataset,
            cfg.noise_epochs,
            cfg.batch,
            cfg.noise_lr,
            seed,
        )?;
        Ok(model)
    }

    pub fn t_diff(&self) -> usize {
        self.schedule.len()
    }

    /// Conditional mean in raw target units.
    pub fn conditional_mean(&self, c: &ContextVector) -> f64 {
        self.target_stats.to_raw(self.encode_std(c))
    }

    /// Encoder output f_phi(c) in standardized target units.
    pub fn encode_std(&self, c: &ContextVector) -> f64 {
        let x = self.ctx_stats.apply(c);
        f64::from(self.encoder.forward_scalar(&x))
    }

    /// Sinusoidal embedding of diffusion step j.
    pub fn embed_step(&self, j: usize) -> Vec<f32> {
        embed_step(j, self.embed_dim)
    }

    /// Noise-net evaluation at a standardized state. Runs in f64 so the
    /// analytic shift estimators see the net as an exact function of the
    /// state; the batched sampler keeps its own f32 path.
    pub fn predict_noise_std(&self, s_std: f64, j: usize, c: &ContextVector) -> f64 {
        let ctx = self.ctx_stats.apply(c);
        let fphi = self.encode_std(c);
        let emb = self.embed_step(j);
        let mut input = Vec::with_capacity(NOISE_INPUT_HEAD + self.embed_dim);
        input.push(s_std);
        input.push(fphi);
        input.extend(ctx.iter().map(|v| f64::from(*v)));
        input.extend(emb.iter().map(|v| f64::from(*v)));
        self.noise_net.forward_scalar_f64(&input)
    }

    /// Per-step noise MSE E(j) on a held-out set of (context, raw target)
    /// rows; one forward-kernel draw per (row, step).
    pub fn noise_mse_on(&self, rows: &[(ContextVector, f64)], seed: u64) -> Vec<f64> {
        let t_diff = self.t_diff();
        let mut out = vec![0.0f64; t_diff];
        for (ji, o) in out.iter_mut().enumerate() {
            let j = ji + 1;
            let mut rng = seed::rng(seed::derive_index(seed, j as u64));
            let mut acc = 0.0f64;
            for (c, y) in rows {
                let eps: f64 = rng.sample(StandardNormal);
                let u0 = self.target_stats.to_std(*y);
                let fphi = self.encode_std(c);
                let uj = forward_sample(&self.schedule, u0, fphi, j, eps);
                let pred = self.predict_noise_std(uj, j, c);
                acc += (pred - eps) * (pred - eps);
            }
            *o = acc / rows.len().max(1) as f64;
        }
        out
    }

    /// Draw n samples (raw units) at context c, stream-split per draw.
    pub fn sample(&self, c: &ContextVector, n: usize, seed: u64) -> Result<Vec<f64>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let grid = self.prepare_grid(std::slice::from_ref(c));
        let streams: Vec<u64> = (0..n).map(|i| seed::derive_index(seed, i as u64)).collect();
        grid.sample_rows(&streams)
    }

    /// Precompute per-cell and per-step projections for batched sampling
    /// over a fixed context grid.
    pub fn prepare_grid(&self, contexts: &[impl AsContext]) -> PreparedGrid<'_> {
        let l0 = &self.noise_net.layers[0];
        let n0 = l0.out;
        let cells: Vec<CellProj> = contexts
            .iter()
            .map(|cc| {
                let c = cc.context();
                let ctx = self.ctx_stats.apply(&c);
                let fphi = self.encode_std(&c) as f32;
                let mut proj = l0.b.clone();
                for (o, p) in proj.iter_mut().enumerate() {
                    let row = &l0.w[o * l0.inp..(o + 1) * l0.inp];
                    *p += row[1] * fphi;
                    for (d, x) in ctx.iter().enumerate() {
                        *p += row[2 + d] * x;
                    }
                }
                CellProj { fphi, proj }
            })
            .collect();

        let t_diff = self.t_diff();
        let steps: Vec<StepConsts> = (1..=t_diff)
            .map(|j| {
                let emb = self.embed_step(j);
                let mut proj = vec![0.0f32; n0];
                for (o, p) in proj.iter_mut().enumerate() {
                    let row = &l0.w[o * l0.inp..(o + 1) * l0.inp];
                    for (e, x) in emb.iter().enumerate() {
                        *p += row[NOISE_INPUT_HEAD + e] * x;
                    }
                }
                let ab = self.schedule.alpha_bar(j);
                StepConsts {
                    emb_proj: proj,
                    inv_sqrt_alpha: (1.0 / self.schedule.alpha(j).sqrt()) as f32,
                    eps_coef: (self.schedule.beta(j) / (1.0 - ab).sqrt()) as f32,
                    sqrt_beta: self.schedule.beta(j).sqrt() as f32,
                }
            })
            .collect();

        // Transposed copies of the remaining layers: column-major weights
        // turn each per-row GEMV into broadcast/FMA updates with no
        // horizontal reductions, which is what keeps the reverse chain fast.
        let tail: Vec<FastLayer> = self.noise_net.layers[1..]
            .iter()
            .map(|l| {
                let mut wt = vec![0.0f32; l.w.len()];
                for o in 0..l.out {
                    for k in 0..l.inp {
                        wt[k * l.out + o] = l.w[o * l.inp + k];
                    }
                }
                FastLayer {
                    wt,
                    b: l.b.clone(),
                    out: l.out,
                }
            })
            .collect();
        let w_state: Vec<f32> = (0..n0).map(|o| l0.w[o * l0.inp]).collect();

        // Monomorphized kernels exist for the production shape
        // (two equal-width hidden layers and a scalar head).
        let kernel = if tail.len() == 2
            && tail[0].out == n0
            && tail[1].out == 1
            && matches!(n0, 16 | 32 | 48 | 64 | 96 | 128)
        {
            KernelKind::TwoHidden(n0)
        } else {
            KernelKind::Generic
        };

        PreparedGrid {
            model: self,
            cells,
            steps,
            w_state,
            tail,
            n0,
            kernel,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let model: Self = serde_json::from_reader(file)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported model format version {}",
                model.format_version
            )));
        }
        Ok(model)
    }
}

/// Anything that can serve as a sampling context (used so grids can be
/// prepared from plain vectors or richer cell descriptors).
pub trait AsContext {
    fn context(&self) -> ContextVector;
}

impl AsContext for ContextVector {
    fn context(&self) -> ContextVector {
        *self
    }
}

/// Layout of the noise-net input: [s, f_phi, ctx(4), embedding...].
pub const NOISE_INPUT_HEAD: usize = 6;

pub fn embed_step(j: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(k as f64) * (10_000.0f64).ln() / half as f64).exp();
        let x = j as f64 * freq;
        out.push(x.sin() as f32);
        out.push(x.cos() as f32);
    }
    out.truncate(dim);
    while out.len() < dim {
        out.push(0.0);
    }
    out
}

/// Train the noise-prediction net; the encoder stays frozen. A zero-epoch
/// call leaves the model unchanged.
pub fn train_noise_net(
    model: &mut DiffusionModel,
    dataset: &[(ContextVector, f64)],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty noise-net dataset".into()));
    }
    let t_diff = model.t_diff();
    let in_dim = model.noise_net.input_dim();
    let embed_dim = model.embed_dim;

    // Frozen per-row quantities.
    let mut fphi = Vec::with_capacity(dataset.len());
    let mut ctxs = Vec::with_capacity(dataset.len());
    let mut u0s = Vec::with_capacity(dataset.len());
    for (c, y) in dataset {
        fphi.push(model.encode_std(c));
        ctxs.push(model.ctx_stats.apply(c));
        u0s.push(model.target_stats.to_std(*y));
    }
    let n = dataset.len();
    let mean_res = u0s
        .iter()
        .zip(fphi.iter())
        .map(|(u, f)| u - f)
        .sum::<f64>()
        / n as f64;
    let var_res = u0s
        .iter()
        .zip(fphi.iter())
        .map(|(u, f)| (u - f - mean_res) * (u - f - mean_res))
        .sum::<f64>()
        / n as f64;
    model.residual_std = var_res.sqrt().max(1e-9);

    if epochs == 0 {
        return Ok(());
    }

    let embeds: Vec<Vec<f32>> = (1..=t_diff).map(|j| model.embed_step(j)).collect();
    let mut rng = seed::rng(seed::derive(seed, "noise-train"));
    let mut adam = Adam::new(&model.noise_net, lr);
    let mut grads = Gradients::zeros_like(&model.noise_net);
    let mut ws = Workspace::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut bx: Vec<f32> = Vec::new();
    let mut eps_batch: Vec<f64> = Vec::new();
    let mut j_batch: Vec<usize> = Vec::new();
    let mut loss_curve = Vec::with_capacity(epochs);
    let mut step_sums = vec![0.0f64; t_diff];
    let mut step_counts = vec![0usize; t_diff];

    for epoch in 0..epochs {
        nn::shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0f64;
        let last_epoch = epoch + 1 == epochs;
        if last_epoch {
            step_sums.iter_mut().for_each(|v| *v = 0.0);
            step_counts.iter_mut().for_each(|v| *v = 0);
        }
        for chunk in order.chunks(batch) {
            bx.clear();
            eps_batch.clear();
            j_batch.clear();
            for &r in chunk {
                let j = rng.gen_range(1..=t_diff);
                let eps: f64 = rng.sample(StandardNormal);
                let uj = forward_sample(&model.schedule, u0s[r], fphi[r], j, eps);
                bx.push(uj as f32);
                bx.push(fphi[r] as f32);
                bx.extend_from_slice(&ctxs[r]);
                bx.extend_from_slice(&embeds[j - 1]);
                eps_batch.push(eps);
                j_batch.push(j);
            }
            debug_assert_eq!(bx.len(), chunk.len() * in_dim);
            debug_assert_eq!(in_dim, NOISE_INPUT_HEAD + embed_dim);
            let rows = chunk.len();
            model.noise_net.forward_batch(&bx, rows, &mut ws);
            let mut dout = vec![0.0f32; rows];
            for i in 0..rows {
                let err = f64::from(ws.output()[i]) - eps_batch[i];
                epoch_loss += err * err;
                dout[i] = (2.0 * err / rows as f64) as f32;
                if last_epoch {
                    step_sums[j_batch[i] - 1] += err * err;
                    step_counts[j_batch[i] - 1] += 1;
                }
            }
            grads.zero();
            model
                .noise_net
                .backward_batch(&bx, rows, &mut ws, &dout, &mut grads);
            adam.step(&mut model.noise_net, &grads);
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        loss_curve.push(mean);
    }

    model.train_meta.seed = seed;
    model.train_meta.noise_loss = loss_curve;
    model.train_meta.noise_mse_per_step = step_sums
        .iter()
        .zip(step_counts.iter())
        .map(|(s, c)| if *c > 0 { s / *c as f64 } else { f64::NAN })
        .collect();
    Ok(())
}

struct CellProj {
    fphi: f32,
    proj: Vec<f32>,
}

struct StepConsts {
    emb_proj: Vec<f32>,
    inv_sqrt_alpha: f32,
    eps_coef: f32,
    sqrt_beta: f32,
}

struct FastLayer {
    /// Column-major weights: wt[k * out + o].
    wt: Vec<f32>,
    b: Vec<f32>,
    out: usize,
}

enum KernelKind {
    /// Two hidden layers of the given width plus a scalar head.
    TwoHidden(usize),
    Generic,
}

/// Lane-split dot product; fixed-width accumulators let the reduction
/// vectorize under strict FP semantics.
#[inline]
fn lane_dot(w: &[f32], x: &[f32]) -> f32 {
    const L: usize = 16;
    let mut acc = [0.0f32; L];
    let chunks = w.len() / L;
    for i in 0..chunks {
        let wb = &w[i * L..i * L + L];
        let xb = &x[i * L..i * L + L];
        for l in 0..L {
            acc[l] = wb[l].mul_add(xb[l], acc[l]);
        }
    }
    let mut s = 0.0f32;
    for v in acc {
        s += v;
    }
    for i in chunks * L..w.len() {
        s = w[i].mul_add(x[i], s);
    }
    s
}

/// A context grid with cached first-layer projections, ready for batched
/// reverse-chain sampling.
pub struct PreparedGrid<'m> {
    model: &'m DiffusionModel,
    cells: Vec<CellProj>,
    steps: Vec<StepConsts>,
    w_state: Vec<f32>,
    tail: Vec<FastLayer>,
    n0: usize,
    kernel: KernelKind,
}

const SAMPLE_CHUNK: usize = 4096;

impl PreparedGrid<'_> {
    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// One draw per (stream, cell) pair, row-major by stream. The draw for
    /// (stream k, cell c) uses its own RNG stream derived from
    /// (streams[k], c), so results are independent of batching and
    /// scheduling.
    pub fn sample_rows(&self, streams: &[u64]) -> Result<Vec<f64>> {
        let cells = self.cells.len();
        let total = streams.len() * cells;
        let mut out = vec![0.0f64; total];
        let failure = std::sync::Mutex::new(None::<(usize, usize)>);
        out.par_chunks_mut(SAMPLE_CHUNK)
            .enumerate()
            .for_each(|(chunk_idx, chunk)| {
                let base = chunk_idx * SAMPLE_CHUNK;
                if let Err((draw, step)) = self.sample_chunk(streams, cells, base, chunk) {
                    let mut f = failure.lock().unwrap();
                    if f.map_or(true, |(d, _)| draw < d) {
                        *f = Some((draw, step));
                    }
                }
            });
        if let Some((draw, step)) = failure.into_inner().unwrap() {
            return Err(Error::NonFiniteSample { draw, step });
        }
        Ok(out)
    }

    /// Sequential variant for timing probes.
    pub fn sample_rows_seq(&self, streams: &[u64]) -> Result<Vec<f64>> {
        let cells = self.cells.len();
        let total = streams.len() * cells;
        let mut out = vec![0.0f64; total];
        for base in (0..total).step_by(SAMPLE_CHUNK) {
            let hi = (base + SAMPLE_CHUNK).min(total);
            let (draws, rest) = out.split_at_mut(base);
            let _ = draws;
            let chunk = &mut rest[..hi - base];
            self.sample_chunk(streams, cells, base, chunk)
                .map_err(|(draw, step)| Error::NonFiniteSample { draw, step })?;
        }
        Ok(out)
    }

    fn sample_chunk(
        &self,
        streams: &[u64],
        cells: usize,
        base: usize,
        chunk: &mut [f64],
    ) -> std::result::Result<(), (usize, usize)> {
        let t_diff = self.steps.len();
        let rows = chunk.len();

        // Per-row noise: index 0 seeds the chain, indices 1..t_diff drive
        // the reverse updates for j = t_diff .. 2.
        let mut noise = vec![0.0f32; rows * t_diff];
        let mut state = vec![0.0f32; rows];
        let mut cell_of = vec![0u32; rows];
        for r in 0..rows {
            let global = base + r;
            let k = global / cells;
            let cell = global % cells;
            cell_of[r] = cell as u32;
            let mut rng = seed::rng(seed::derive_index(streams[k], cell as u64));
            let buf = &mut noise[r * t_diff..(r + 1) * t_diff];
            for v in buf.iter_mut() {
                *v = rng.sample::<f32, _>(StandardNormal);
            }
            state[r] = buf[0];
        }

        match self.kernel {
            KernelKind::TwoHidden(16) => {
                self.run_two_hidden::<16>(&mut state, &cell_of, &noise, base)?
            }
            KernelKind::TwoHidden(32) => {
                self.run_two_hidden::<32>(&mut state, &cell_of, &noise, base)?
            }
            KernelKind::TwoHidden(48) => {
                self.run_two_hidden::<48>(&mut state, &cell_of, &noise, base)?
            }
            KernelKind::TwoHidden(64) => {
                self.run_two_hidden::<64>(&mut state, &cell_of, &noise, base)?
            }
            KernelKind::TwoHidden(96) => {
                self.run_two_hidden::<96>(&mut state, &cell_of, &noise, base)?
            }
            KernelKind::TwoHidden(128) => {
                self.run_two_hidden::<128>(&mut state, &cell_of, &noise, base)?
            }
            _ => self.run_generic(&mut state, &cell_of, &noise, base)?,
        }

        let ts = &self.model.target_stats;
        for r in 0..rows {
            let cell = &self.cells[cell_of[r] as usize];
            chunk[r] = ts.to_raw(f64::from(state[r] + cell.fphi));
        }
        Ok(())
    }

    /// Reverse chain specialized for two hidden layers of width W, processing
    /// row pairs so each weight column load feeds two FMA streams.
    fn run_two_hidden<const W: usize>(
        &self,
        state: &mut [f32],
        cell_of: &[u32],
        noise: &[f32],
        base: usize,
    ) -> std::result::Result<(), (usize, usize)> {
        let t_diff = self.steps.len();
        let rows = state.len();
        let w_state: &[f32] = &self.w_state;
        let wt1: &[f32] = &self.tail[0].wt;
        let b1: &[f32] = &self.tail[0].b;
        let w2: &[f32] = &self.tail[1].wt;
        let b2 = self.tail[1].b[0];

        #[inline(always)]
        fn layer0<const W: usize>(w_state: &[f32], cp: &[f32], emb: &[f32], x: f32) -> [f32; W] {
            let mut a = [0.0f32; W];
            for o in 0..W {
                a[o] = w_state[o].mul_add(x, cp[o] + emb[o]).max(0.0);
            }
            a
        }

        #[inline(always)]
        fn head<const W: usize>(w2: &[f32], h: &[f32; W], b2: f32) -> f32 {
            let mut acc = [0.0f32; 16];
            for i in 0..W / 16 {
                for l in 0..16 {
                    let idx = i * 16 + l;
                    acc[l] = w2[idx].mul_add(h[idx].max(0.0), acc[l]);
                }
            }
            let mut lane_sum = 0.0f32;
            for v in acc {
                lane_sum += v;
            }
            b2 + lane_sum
        }

        for j in (1..=t_diff).rev() {
            let sc = &self.steps[j - 1];
            let emb: &[f32] = &sc.emb_proj;
            let noise_idx = t_diff - j + 1;
            let mut bad = None;
            let update = |r: usize, eps_hat: f32, state: &mut [f32], bad: &mut Option<usize>| {
                let mut s = (state[r] - sc.eps_coef * eps_hat) * sc.inv_sqrt_alpha;
                if j > 1 {
                    s = sc.sqrt_beta.mul_add(noise[r * t_diff + noise_idx], s);
                }
                state[r] = s;
                if !s.is_finite() && bad.is_none() {
                    *bad = Some(r);
                }
            };
            let mut r = 0usize;
            while r + 1 < rows {
                let c0 = &self.cells[cell_of[r] as usize];
                let c1 = &self.cells[cell_of[r + 1] as usize];
                let a0 = layer0::<W>(w_state, &c0.proj, emb, state[r] + c0.fphi);
                let a1 = layer0::<W>(w_state, &c1.proj, emb, state[r + 1] + c1.fphi);
                let mut h0 = [0.0f32; W];
                let mut h1 = [0.0f32; W];
                h0.copy_from_slice(&b1[..W]);
                h1.copy_from_slice(&b1[..W]);
                for k in 0..W {
                    let a0k = a0[k];
                    let a1k = a1[k];
                    let col = &wt1[k * W..k * W + W];
                    for o in 0..W {
                        h0[o] = col[o].mul_add(a0k, h0[o]);
                        h1[o] = col[o].mul_add(a1k, h1[o]);
                    }
                }
                update(r, head::<W>(w2, &h0, b2), state, &mut bad);
                update(r + 1, head::<W>(w2, &h1, b2), state, &mut bad);
                r += 2;
            }
            if r < rows {
                let c0 = &self.cells[cell_of[r] as usize];
                let a0 = layer0::<W>(w_state, &c0.proj, emb, state[r] + c0.fphi);
                let mut h0 = [0.0f32; W];
                h0.copy_from_slice(&b1[..W]);
                for k in 0..W {
                    let a0k = a0[k];
                    let col = &wt1[k * W..k * W + W];
                    for o in 0..W {
                        h0[o] = col[o].mul_add(a0k, h0[o]);
                    }
                }
                update(r, head::<W>(w2, &h0, b2), state, &mut bad);
            }
            if let Some(r) = bad {
                return Err((base + r, j));
            }
        }
        Ok(())
    }

    /// Fallback reverse chain for arbitrary noise-net shapes.
    fn run_generic(
        &self,
        state: &mut [f32],
        cell_of: &[u32],
        noise: &[f32],
        base: usize,
    ) -> std::result::Result<(), (usize, usize)> {
        let t_diff = self.steps.len();
        let rows = state.len();
        let n0 = self.n0;
        let max_width = self
            .tail
            .iter()
            .map(|l| l.out)
            .chain(std::iter::once(n0))
            .max()
            .unwrap();
        let mut a = vec![0.0f32; max_width];
        let mut b = vec![0.0f32; max_width];
        for j in (1..=t_diff).rev() {
            let sc = &self.steps[j - 1];
            let noise_idx = t_diff - j + 1;
            let mut bad = None;
            for r in 0..rows {
                let cell = &self.cells[cell_of[r] as usize];
                let x = state[r] + cell.fphi;
                if self.tail.is_empty() {
                    for o in 0..n0 {
                        a[o] = self.w_state[o].mul_add(x, cell.proj[o] + sc.emb_proj[o]);
                    }
                } else {
                    for o in 0..n0 {
                        a[o] = self.w_state[o]
                            .mul_add(x, cell.proj[o] + sc.emb_proj[o])
                            .max(0.0);
                    }
                }
                let mut width = n0;
                for (li, layer) in self.tail.iter().enumerate() {
                    let last = li + 1 == self.tail.len();
                    if layer.out == 1 {
                        let acc = layer.b[0] + lane_dot(&layer.wt[..width], &a[..width]);
                        b[0] = if last { acc } else { acc.max(0.0) };
                    } else {
                        b[..layer.out].copy_from_slice(&layer.b);
                        for k in 0..width {
                            let ak = a[k];
                            let col = &layer.wt[k * layer.out..(k + 1) * layer.out];
                            for (bo, wv) in b[..layer.out].iter_mut().zip(col.iter()) {
                                *bo = wv.mul_add(ak, *bo);
                            }
                        }
                        if !last {
                            for v in b[..layer.out].iter_mut() {
                                *v = v.max(0.0);
                            }
                        }
                    }
                    std::mem::swap(&mut a, &mut b);
                    width = layer.out;
                }
                let eps_hat = a[0];
                let mut s = (state[r] - sc.eps_coef * eps_hat) * sc.inv_sqrt_alpha;
                if j > 1 {
                    s = sc.sqrt_beta.mul_add(noise[r * t_diff + noise_idx], s);
                }
                state[r] = s;
                if !s.is_finite() && bad.is_none() {
                    bad = Some(r);
                }
            }
            if let Some(r) = bad {
                return Err((base + r, j));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn schedule_single_step() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s.alpha_bar(1) - 0.5).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn schedule_no_noise_limit() {
        let s = make_schedule(20, 1e-12, 1e-12).unwrap();
        let v = forward_sample(&s, 1.75, -0.3, 20, 0.9);
        assert!((v - 1.75).abs() < 1e-5);
    }

    #[test]
    fn schedule_product_matches_recompute() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut prod = 1.0f64;
        for j in 1..=100 {
            prod *= 1.0 - s.beta(j);
        }
        assert!((s.alpha_bar(100) - prod).abs() < 1e-12);
        // Strictly decreasing alpha_bar.
        for j in 1..=100 {
            assert!(s.alpha_bar(j) < s.alpha_bar(j - 1));
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn forward_sample_cases() {
        // Anchoring: s0 == fphi and zero noise is a fixed point.
        let s = make_schedule(10, 1e-3, 0.1).unwrap();
        for j in [1usize, 5, 10] {
            let v = forward_sample(&s, 1.3, 1.3, j, 0.0);
            assert!((v - 1.3).abs() < 1e-12);
        }
        // Hand arithmetic at alpha_bar = 0.25.
        let s = VarianceSchedule::from_betas(vec![0.75]);
        let v = forward_sample(&s, 2.0, 0.0, 1, 1.0);
        assert!((v - (1.0 + 0.75f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn residual_identity() {
        // s_j - fphi == sqrt(ab) (s0 - fphi) + sqrt(1-ab) eps.
        let s = make_schedule(40, 1e-4, 0.05).unwrap();
        let mut rng = seed::rng(3);
        use rand::Rng;
        for _ in 0..200 {
            let s0: f64 = rng.gen_range(-3.0..3.0);
            let fphi: f64 = rng.gen_range(-3.0..3.0);
            let j = rng.gen_range(1..=40);
            let eps: f64 = rng.gen_range(-2.0..2.0);
            let lhs = forward_sample(&s, s0, fphi, j, eps) - fphi;
            let ab = s.alpha_bar(j);
            let rhs = ab.sqrt() * (s0 - fphi) + (1.0 - ab).sqrt() * eps;
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    fn constant_dataset(value: f64, n: usize) -> Vec<(ContextVector, f64)> {
        (0..n)
            .map(|i| {
                (
                    ContextVector::new(0.1 * (i % 10) as f64, i % 7 + 1, i % 5 + 1, i % 2 + 1),
                    value,
                )
            })
            .collect()
    }

    #[test]
    fn encoder_fits_constant_target() {
        let data = constant_dataset(3.0, 400);
        let enc = pretrain_encoder(&data, &[32], 120, 64, 1e-2, 1).unwrap();
        let model = DiffusionModel::from_parts(
            make_schedule(10, 1e-4, 0.02).unwrap(),
            enc.mlp.clone(),
            Mlp::zeros(&[NOISE_INPUT_HEAD + 16, 1]),
            enc.ctx_stats.clone(),
            enc.target_stats.clone(),
            16,
        );
        let mut mse = 0.0;
        for (c, y) in &data {
            let e = model.conditional_mean(c) - y;
            mse += e * e;
        }
        mse /= data.len() as f64;
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn encoder_fits_linear_target() {
        let mut data = Vec::new();
        for i in 0..2000 {
            let eta = i as f64 / 1999.0;
            data.push((ContextVector::new(eta, 1, 1, 1), 2.0 * eta));
        }
        let enc = pretrain_encoder(&data, &[64, 64], 300, 128, 2e-3, 7).unwrap();
        let model = DiffusionModel::from_parts(
            make_schedule(10, 1e-4, 0.02).unwrap(),
            enc.mlp.clone(),
            Mlp::zeros(&[NOISE_INPUT_HEAD + 16, 1]),
            enc.ctx_stats.clone(),
            enc.target_stats.clone(),
            16,
        );
        let mut worst = 0.0f64;
        for k in 0..101 {
            let eta = k as f64 / 100.0;
            let err = (model.conditional_mean(&ContextVector::new(eta, 1, 1, 1)) - 2.0 * eta).abs();
            worst = worst.max(err);
        }
        assert!(worst < 0.05, "worst |f_phi - 2 eta| = {worst}");
    }

    #[test]
    fn encoder_training_deterministic() {
        let data = constant_dataset(1.5, 200);
        let a = pretrain_encoder(&data, &[16], 40, 32, 1e-2, 9).unwrap();
        let b = pretrain_encoder(&data, &[16], 40, 32, 1e-2, 9).unwrap();
        for (la, lb) in a.mlp.layers.iter().zip(b.mlp.layers.iter()) {
            assert_eq!(la.w, lb.w);
        }
        assert_eq!(a.loss_curve, b.loss_curve);
    }

    #[test]
    fn noise_net_constant_targets_loss_bound() {
        let data = constant_dataset(2.0, 600);
        let cfg = DiffusionConfig {
            t_diff: 30,
            beta_start: 1e-3,
            beta_end: 0.08,
            encoder_hidden: vec![16],
            noise_hidden: vec![32, 32],
            encoder_epochs: 60,
            noise_epochs: 40,
            batch: 128,
            ..DiffusionConfig::default()
        };
        let model = DiffusionModel::train(&data, &cfg, 21).unwrap();
        let final_loss = *model.train_meta.noise_loss.last().unwrap();
        assert!(final_loss <= 1.05, "final loss {final_loss}");
        assert_eq!(model.train_meta.noise_mse_per_step.len(), 30);
    }

    #[test]
    fn zero_epoch_training_is_identity() {
        let data = constant_dataset(1.0, 100);
        let enc = pretrain_encoder(&data, &[8], 10, 32, 1e-2, 3).unwrap();
        let cfg = DiffusionConfig {
            noise_hidden: vec![16],
            t_diff: 10,
            ..DiffusionConfig::default()
        };
        let mut model = DiffusionModel::init(enc, &cfg, 3).unwrap();
        let before = model.noise_net.clone();
        train_noise_net(&mut model, &data, 0, 32, 1e-3, 3).unwrap();
        for (la, lb) in model.noise_net.layers.iter().zip(before.layers.iter()) {
            assert_eq!(la.w, lb.w);
            assert_eq!(la.b, lb.b);
        }
    }

    #[test]
    fn noise_training_deterministic_curve() {
        let data = constant_dataset(0.5, 300);
        let cfg = DiffusionConfig {
            t_diff: 12,
            encoder_hidden: vec![8],
            noise_hidden: vec![16],
            encoder_epochs: 15,
            noise_epochs: 8,
            batch: 64,
            ..DiffusionConfig::default()
        };
        let a = DiffusionModel::train(&data, &cfg, 5).unwrap();
        let b = DiffusionModel::train(&data, &cfg, 5).unwrap();
        assert_eq!(a.train_meta.noise_loss, b.train_meta.noise_loss);
    }

    /// Zero noise net + constant encoder: the reverse chain accumulates a
    /// known Gaussian around the encoder mean.
    #[test]
    fn zero_net_sampling_closed_form() {
        let t_diff = 25;
        let schedule = make_schedule(t_diff, 1e-3, 0.05).unwrap();
        let m = 1.7f64;
        let mut encoder = Mlp::zeros(&[4, 1]);
        encoder.layers[0].b[0] = m as f32;
        let noise_net = Mlp::zeros(&[NOISE_INPUT_HEAD + 16, 1]);
        let model = DiffusionModel::from_parts(
            schedule.clone(),
            encoder,
            noise_net,
            ContextStats {
                mean: [0.0; 4],
                std: [1.0; 4],
            },
            TargetStats {
                mean: 0.0,
                std: 1.0,
            },
            16,
        );
        let n = 4000;
        let samples = model
            .sample(&ContextVector::new(0.0, 1, 1, 1), n, 99)
            .unwrap();
        assert_eq!(samples.len(), n);
        // Variance recursion: V_{j-1} = V_j / alpha_j + beta_j, V_T = 1.
        let mut var = 1.0f64;
        for j in (2..=t_diff).rev() {
            var = var / schedule.alpha(j) + schedule.beta(j);
        }
        var /= schedule.alpha(1);
        let mean = samples.iter().sum::<f64>() / n as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - m).abs() < 3.5 * se,
            "mean {mean} vs {m} (se {se})"
        );
        let sample_var =
            samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
        assert!(
            (sample_var / var - 1.0).abs() < 0.15,
            "var {sample_var} vs {var}"
        );
    }

    #[test]
    fn sample_zero_draws_is_empty() {
        let model = DiffusionModel::from_parts(
            make_schedule(5, 1e-3, 0.05).unwrap(),
            Mlp::zeros(&[4, 1]),
            Mlp::zeros(&[NOISE_INPUT_HEAD + 16, 1]),
            ContextStats {
                mean: [0.0; 4],
                std: [1.0; 4],
            },
            TargetStats {
                mean: 0.0,
                std: 1.0,
            },
            16,
        );
        assert!(model
            .sample(&ContextVector::new(0.0, 1, 1, 1), 0, 1)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn sampling_deterministic_and_stream_split() {
        let data = constant_dataset(1.0, 200);
        let cfg = DiffusionConfig {
            t_diff: 10,
            encoder_hidden: vec![8],
            noise_hidden: vec![16],
            encoder_epochs: 10,
            noise_epochs: 5,
            batch: 64,
            ..DiffusionConfig::default()
        };
        let model = DiffusionModel::train(&data, &cfg, 13).unwrap();
        let c = ContextVector::new(0.3, 2, 1, 1);
        let a = model.sample(&c, 50, 42).unwrap();
        let b = model.sample(&c, 50, 42).unwrap();
        assert_eq!(a, b);
        let c2 = model.sample(&c, 50, 43).unwrap();
        assert_ne!(a, c2);
    }

    /// Distribution-learning smoke test on a known conditional family; the
    /// full-strength variant is an acceptance criterion.
    #[test]
    fn learns_known_gaussian_family() {
        let mut data = Vec::new();
        let mut rng = seed::rng(500);
        use rand::Rng;
        for _ in 0..4000 {
            let eta = rng.gen_range(0.1..0.9);
            let z: f64 = rng.sample(StandardNormal);
            data.push((ContextVector::new(eta, 1, 1, 1), 2.0 * eta + 0.1 * z));
        }
        let cfg = DiffusionConfig {
            t_diff: 50,
            beta_start: 2e-4,
            beta_end: 0.04,
            encoder_hidden: vec![32, 32],
            noise_hidden: vec![48, 48],
            encoder_epochs: 120,
            noise_epochs: 80,
            batch: 256,
            ..DiffusionConfig::default()
        };
        let model = DiffusionModel::train(&data, &cfg, 31).unwrap();
        let samples = model
            .sample(&ContextVector::new(0.5, 1, 1, 1), 5000, 7)
            .unwrap();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let std = (samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
            / samples.len() as f64)
            .sqrt();
        assert!(mean > 0.97 && mean < 1.03, "mean {mean}");
        assert!(std > 0.07 && std < 0.14, "std {std}");
    }
}
