//! Finite-difference gradient suites over the primitive ops and over the
//! full objective of every architecture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{attach_spectrograms, gen_dataset, TaskSpec};
use crate::error::Result;
use crate::models::{Architecture, Model, ModelConfig};
use crate::nn::Dropout;
use crate::objectives::{rdrop_pair_loss, single_pass_loss};
use crate::tensor::{grad_check, grad_check_params, Graph, Tensor, Var};

/// Central-difference step used by both suites.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    /// Scalars probed.
    pub checked: usize,
}

/// Contracts a node to a scalar with fixed, distinct weights.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let (m, n) = g.shape(y);
    let w: Vec<f64> = (0..m * n).map(|i| ((i * 7919 % 101) as f64 / 50.0) - 1.0).collect();
    let w = g.constant_raw(m, n, w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpCase = (&'static str, usize, usize, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut t = |r: usize, c: usize| Tensor::randn(&[r, c], 1.0, rng);
    let (rhs, bias, gain, kern, k, v, other) = (t(4, 2), t(1, 4), t(1, 4), t(3, 4), t(5, 4), t(5, 4), t(3, 4));
    let q2 = t(3, 4);
    let q3 = q2.clone();
    let targets = [1usize, 0, 3];
    let reals: Vec<f64> = other.data().to_vec();
    let bits: Vec<f64> = (0..12).map(|i| f64::from(i % 3 == 0)).collect();
    let (k2, v2) = (k.clone(), v.clone());
    let o2 = other.clone();
    let r2 = reals.clone();
    vec![
        ("silu", 3, 4, Box::new(|g, x| project_of(g, |g| Ok(g.silu(x))))),
        ("sigmoid", 3, 4, Box::new(|g, x| project_of(g, |g| Ok(g.sigmoid(x))))),
        ("exp", 3, 4, Box::new(|g, x| project_of(g, |g| Ok(g.exp(x))))),
        ("scale", 3, 4, Box::new(|g, x| project_of(g, |g| Ok(g.scale(x, -1.7))))),
        ("glu", 3, 4, Box::new(|g, x| project_of(g, |g| g.glu(x)))),
        ("log_softmax", 3, 4, Box::new(|g, x| project_of(g, |g| Ok(g.log_softmax(x))))),
        ("mul", 3, 4, Box::new(|g, x| project_of(g, |g| g.mul(x, x)))),
        ("add_sub", 3, 4, Box::new(|g, x| project_of(g, |g| {
            let s = g.silu(x);
            let d = g.sub(x, s)?;
            g.add(d, s)
        }))),
        ("slice_concat", 3, 4, Box::new(|g, x| project_of(g, |g| {
            let a = g.slice_rows(x, 1, 2)?;
            g.concat_rows(&[a, x])
        }))),
        ("reshape", 3, 4, Box::new(|g, x| project_of(g, |g| {
            let r = g.reshape(x, 2, 6)?;
            Ok(g.silu(r))
        }))),
        ("im2col", 3, 4, Box::new(|g, x| project_of(g, |g| g.im2col(x, 3, 2, 1)))),
        ("mean", 3, 4, Box::new(|g, x| {
            let s = g.silu(x);
            Ok(g.mean(s))
        })),
        ("matmul", 3, 4, Box::new(move |g, x| project_of(g, |g| {
            let b = g.constant(&rhs);
            g.matmul(x, b)
        }))),
        ("add_bias", 3, 4, Box::new(move |g, x| project_of(g, |g| {
            let b = g.constant(&bias);
            let y = g.add_bias(x, b)?;
            Ok(g.silu(y))
        }))),
        ("layer_norm", 3, 4, Box::new(move |g, x| project_of(g, |g| {
            let a = g.constant(&gain);
            let b = g.constant(&Tensor::zeros(&[1, 4]));
            g.layer_norm(x, a, b)
        }))),
        ("depthwise_conv", 3, 4, Box::new(move |g, x| project_of(g, |g| {
            let w = g.constant(&kern);
            g.depthwise_conv(x, w)
        }))),
        ("embedding", 5, 3, Box::new(|g, x| project_of(g, |g| g.embedding(x, &[4, 0, 4, 2])))),
        ("attention", 3, 4, Box::new(move |g, x| project_of(g, |g| {
            let (kk, vv) = (g.constant(&k), g.constant(&v));
            g.attention(x, kk, vv, 2, false)
        }))),
        ("attention_keys", 5, 4, Box::new(move |g, x| project_of(g, |g| {
            let (q, vv) = (g.constant(&q2), g.constant(&v2));
            g.attention(q, x, vv, 2, true)
        }))),
        ("attention_values", 5, 4, Box::new(move |g, x| project_of(g, |g| {
            let (q, kk) = (g.constant(&q3), g.constant(&k2));
            g.attention(q, kk, x, 2, false)
        }))),
        ("self_attention", 3, 4, Box::new(|g, x| project_of(g, |g| g.attention(x, x, x, 2, true)))),
        ("xent_smoothed", 3, 4, Box::new(move |g, x| g.xent_smoothed(x, &targets, 0.2))),
        ("kl_categorical", 3, 4, Box::new(move |g, x| {
            let o = g.constant(&other);
            g.kl_categorical(x, o)
        })),
        ("kl_symmetric", 3, 4, Box::new(move |g, x| {
            let o = g.constant(&o2);
            g.kl_symmetric(o, x)
        })),
        ("l1", 3, 4, Box::new(move |g, x| g.l1_loss(x, &reals))),
        ("l2", 3, 4, Box::new(move |g, x| g.l2_loss(x, &r2))),
        ("bce_logits", 3, 4, Box::new(move |g, x| g.bce_logits(x, &bits, 2.0))),
        ("ctc", 6, 3, Box::new(|g, x| {
            let lp = g.log_softmax(x);
            g.ctc_loss(lp, &[0, 1, 1])
        })),
    ]
}

fn project_of(g: &mut Graph, f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<Var> {
    let y = f(g)?;
    project(g, y)
}

/// Every differentiable op, each at `seeds` random inputs; reports the worst
/// relative error per op.
pub fn op_suite(seeds: u64) -> Result<Vec<GradCheckEntry>> {
    let mut out: Vec<GradCheckEntry> = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, rows, cols, f) in op_cases(&mut rng) {
            let x = Tensor::randn(&[rows, cols], 1.0, &mut rng);
            let err = grad_check(&f, &x, STEP)?;
            match out.iter_mut().find(|e| e.name == name) {
                Some(e) => {
                    e.max_rel_error = e.max_rel_error.max(err);
                    e.checked += x.len();
                }
                None => out.push(GradCheckEntry { name: name.to_string(), max_rel_error: err, checked: x.len() }),
            }
        }
    }
    Ok(out)
}

/// Small task used by the architecture suite.
pub fn gradient_task() -> TaskSpec {
    TaskSpec {
        n_symbols: 4,
        text_vocab: 4,
        unit_vocab: 5,
        frames_per_symbol: 4,
        units_per_subword: 2,
        sigma: 0.05,
        min_len: 2,
        max_len: 3,
        d_feat: 4,
        d_spec: 3,
        seed: 7,
    }
}

/// Gradient check of the full training objective of every architecture at
/// width 8 with one-layer components. Two-pass models are checked with
/// parallel speech attention and auxiliary ASR too, and every model also
/// under the R-Drop pair objective (dropout disabled) where it is defined.
pub fn architecture_suite(max_entries: usize, seed: u64) -> Result<Vec<GradCheckEntry>> {
    let task = gradient_task();
    let mut data = gen_dataset(&task, 2)?;
    attach_spectrograms(&task, &mut data);
    let ex = &data[0];
    let t = ex.targets();
    let mut out = Vec::new();
    let mut variants: Vec<(String, ModelConfig)> =
        Architecture::ALL.iter().map(|&a| (a.to_string(), ModelConfig::tiny(a, &task))).collect();
    let mut par = ModelConfig::tiny(Architecture::UnitY, &task);
    par.speech_attention = crate::nn::CrossMode::Parallel;
    par.n_asr = 1;
    par.w_asr = 0.5;
    variants.push(("unity+parallel+asr".into(), par));
    let mut seq = ModelConfig::tiny(Architecture::UnitY, &task);
    seq.speech_attention = crate::nn::CrossMode::Sequential;
    seq.t2u_encoder = false;
    seq.n_t2u = 0;
    variants.push(("unity+sequential-t2u".into(), seq));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, cfg) in variants {
        let model = Model::new(cfg, rng.random())?;
        let r = grad_check_params(
            &model.params,
            |g| single_pass_loss(g, &model, &ex.features, &t, 0.1, &mut Dropout::disabled()).map(|(v, _)| v),
            STEP,
            max_entries,
            rng.random(),
        )?;
        out.push(GradCheckEntry { name: name.clone(), max_rel_error: r.max_rel_error, checked: r.checked });
        if model.arch() != Architecture::S2specT {
            let r = grad_check_params(
                &model.params,
                |g| rdrop_pair_loss(g, &model, &ex.features, &t, 0.1, 0.0, (1, 2)).map(|(v, _)| v),
                STEP,
                max_entries,
                rng.random(),
            )?;
            out.push(GradCheckEntry { name: format!("{name}/rdrop"), max_rel_error: r.max_rel_error, checked: r.checked });
        }
    }
    Ok(out)
}
