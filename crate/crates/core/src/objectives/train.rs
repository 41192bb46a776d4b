//! Optimizer, learning-rate schedule and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{rdrop_pair_loss, single_pass_loss, LossReport};
use crate::configurable;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::models::{Checkpoint, Model};
use crate::nn::Dropout;
use crate::tensor::{quantize_scalar, with_precision, GradStore, Graph, ParamStore, Precision, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    /// Examples per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub accumulation: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub rdrop: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub precision: Precision,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

configurable!(TrainConfig {
    lr,
    warmup,
    label_smoothing,
    dropout,
    batch_size,
    accumulation,
    max_steps,
    seed,
    rdrop,
    clip_norm,
    precision,
    adam_beta1,
    adam_beta2,
    adam_eps,
});

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            warmup: 400,
            label_smoothing: 0.2,
            dropout: 0.1,
            batch_size: 32,
            accumulation: 1,
            max_steps: 3000,
            seed: 1,
            rdrop: false,
            clip_norm: 0.0,
            precision: Precision::F32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 1 || self.accumulation < 1 || self.batch_size < 1 {
            return Err(Error::invalid("warmup, accumulation and batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("label_smoothing and dropout must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::invalid("invalid Adam constants"));
        }
        Ok(())
    }
}

/// `peak · min(step / warmup, sqrt(warmup / step))` for steps counted from 1.
pub fn learning_rate(step: usize, peak: f64, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Adam with bias correction. Frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Adam { beta1, beta2, eps, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in params.get_mut(id).data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w = quantize_scalar(*w - update);
            }
        }
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    /// Mean over the examples of the step.
    pub report: LossReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Set when the hook ended training before `max_steps`.
    pub stopped_early: bool,
}

impl TrainLog {
    /// CSV with columns step, lr, total, then every loss component (empty
    /// when absent).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,total");
        for c in LossReport::COMPONENTS {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for r in &self.rows {
            write!(s, "{},{},{}", r.step, r.lr, r.report.total).unwrap();
            for c in r.report.components() {
                s.push(',');
                if let Some(v) = c {
                    write!(s, "{v}").unwrap();
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn last_total(&self) -> Option<f64> {
        self.rows.last().map(|r| r.report.total)
    }
}

/// Anything owning a parameter store the optimizer can update.
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for Model {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Seed of the `k`-th dropout stream of `example` at `step`.
pub(crate) fn mix_seed(seed: u64, step: usize, example: usize, k: u64) -> u64 {
    let mut z = seed
        ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (example as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ k.wrapping_mul(0x94d0_49bb_1331_11eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generic loop: each step draws `batch_size · accumulation` example indices
/// from a seeded per-epoch shuffle, sums their gradients in a fixed order,
/// averages, and applies Adam. `loss(model, graph, index, step)` builds the
/// loss of one example. `hook(step, model)` runs after every update and
/// returns `true` to stop.
pub(crate) fn fit<M, L, H>(model: &mut M, n_examples: usize, cfg: &TrainConfig, loss: L, mut hook: H) -> Result<TrainLog>
where
    M: HasParams,
    L: Fn(&M, &mut Graph, usize, usize) -> Result<(Var, LossReport)>,
    H: FnMut(usize, &M) -> Result<bool>,
{
    cfg.validate()?;
    if n_examples == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    with_precision(cfg.precision, || {
        let mut adam = Adam::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let mut grads = GradStore::zeros_like(model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let per_step = cfg.batch_size * cfg.accumulation;
        let mut log = TrainLog::default();

        for step in 1..=cfg.max_steps {
            grads.zero();
            let mut report = LossReport::default();
            for _ in 0..per_step {
                if cursor == order.len() {
                    order = (0..n_examples).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let idx = order[cursor];
                cursor += 1;
                let mut g = Graph::with_params(model.params());
                let (total, r) = loss(model, &mut g, idx, step)?;
                if !r.total.is_finite() {
                    return Err(Error::Diverged { step });
                }
                let gr = g.backward(total);
                g.accumulate_param_grads(&gr, &mut grads, 1.0 / per_step as f64);
                report.add_scaled(&r, 1.0 / per_step as f64);
            }
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(Error::Diverged { step });
            }
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            let lr = learning_rate(step, cfg.lr, cfg.warmup);
            adam.step(model.params_mut(), &grads, lr);
            log.rows.push(LogRow { step, lr, report });
            if hook(step, model)? {
                log.stopped_early = step < cfg.max_steps;
                break;
            }
        }
        Ok(log)
    })
}

/// Trains `model` on `data` with the objective of its architecture.
pub fn train(model: &mut Model, data: &[Example], cfg: &TrainConfig) -> Result<TrainLog> {
    train_with_hook(model, data, cfg, |_, _| Ok(false))
}

pub fn train_with_hook<H>(model: &mut Model, data: &[Example], cfg: &TrainConfig, hook: H) -> Result<TrainLog>
where
    H: FnMut(usize, &Model) -> Result<bool>,
{
    let eps = cfg.label_smoothing;
    fit(
        model,
        data.len(),
        cfg,
        |m, g, idx, step| {
            let ex = &data[idx];
            let t = ex.targets();
            if cfg.rdrop {
                let seeds = (mix_seed(cfg.seed, step, idx, 1), mix_seed(cfg.seed, step, idx, 2));
                rdrop_pair_loss(g, m, &ex.features, &t, eps, cfg.dropout, seeds)
            } else {
                let mut drop = Dropout::new(cfg.dropout, mix_seed(cfg.seed, step, idx, 1));
                single_pass_loss(g, m, &ex.features, &t, eps, &mut drop)
            }
        },
        hook,
    )
}

/// Elementwise mean of checkpoints with identical parameter sets.
pub fn average_checkpoints(items: &[Checkpoint]) -> Result<Checkpoint> {
    Checkpoint::average(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        assert_eq!(learning_rate(400, 1e-3, 400), 1e-3);
        assert!((learning_rate(100, 1e-3, 400) - 2.5e-4).abs() < 1e-18);
        assert!((learning_rate(1600, 1e-3, 400) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn seeds_differ_per_stream() {
        assert_ne!(mix_seed(1, 1, 0, 1), mix_seed(1, 1, 0, 2));
        assert_ne!(mix_seed(1, 1, 0, 1), mix_seed(1, 2, 0, 1));
        assert_eq!(mix_seed(3, 4, 5, 1), mix_seed(3, 4, 5, 1));
    }
}
