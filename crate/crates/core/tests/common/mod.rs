//! Oracles shared by several test targets.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unity_core::data::{BOS, EOS};
use unity_core::nn::{BlockConfig, CrossMode, Dropout, TokenDecoder};
use unity_core::tensor::{log_softmax, Graph, ParamStore, Tensor};

/// Brute-force CTC: sum over every (V+1)^T path collapsing to the target.
pub fn ctc_brute_force(lp: &[f64], frames: usize, classes: usize, target: &[usize]) -> f64 {
    let blank = classes - 1;
    let mut total = 0.0;
    let paths = classes.pow(frames as u32);
    for code in 0..paths {
        let mut c = code;
        let mut path = Vec::with_capacity(frames);
        for _ in 0..frames {
            path.push(c % classes);
            c /= classes;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != blank {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &s)| lp[t * classes + s]).sum::<f64>().exp();
        }
    }
    -total.ln()
}

pub struct Tiny {
    pub store: ParamStore,
    pub dec: TokenDecoder,
    pub ctx: Tensor,
}

/// Random one-layer decoder over BOS, EOS and `v` content tokens.
pub fn tiny(seed: u64, v: usize) -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = BlockConfig { d_model: 8, d_ff: 16, n_head: 2, conv_kernel: 3, dropout: 0.0 };
    let dec = TokenDecoder::new(&mut store, "dec", v + 2, 1, &cfg, CrossMode::Single, &mut rng);
    // Sharper distributions than the default init make ties implausible.
    let out = store.find("dec.out_proj.weight").unwrap();
    for x in store.get_mut(out).data_mut() {
        *x *= 4.0;
    }
    let ctx = Tensor::randn(&[3, 8], 1.0, &mut rng);
    Tiny { store, dec, ctx }
}

/// Log-probability of `y` followed by EOS, from one teacher-forced forward.
pub fn sequence_logp(t: &Tiny, y: &[usize]) -> f64 {
    let mut g = Graph::inference(&t.store);
    let c = g.constant(&t.ctx);
    let mut input = vec![BOS];
    input.extend_from_slice(y);
    let (_, logits) = t.dec.forward(&mut g, &input, &[c], &mut Dropout::disabled()).unwrap();
    let target: Vec<usize> = y.iter().copied().chain([EOS]).collect();
    target.iter().enumerate().map(|(i, &tok)| log_softmax(g.row(logits, i))[tok]).sum()
}

/// Every finished sequence of at most `max_len` tokens (EOS included).
pub fn exhaustive(t: &Tiny, v: usize, max_len: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for y in &frontier {
            let s = sequence_logp(t, y);
            let better = match &best {
                None => true,
                Some((_, b)) => s > *b,
            };
            if better {
                best = Some((y.clone(), s));
            }
            for tok in 2..2 + v {
                let mut z = y.clone();
                z.push(tok);
                next.push(z);
            }
        }
        frontier = next;
    }
    best.unwrap()
}
