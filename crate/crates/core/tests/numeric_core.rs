use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unity_core::tensor::flops::{self, flops_linear_expected};
use unity_core::tensor::{grad_check, Graph, Tensor, Var};
use unity_core::{Error, Result};

mod common;
use common::ctc_brute_force;

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, rng)
}

/// Contracts any node to a scalar with fixed pseudo-random weights so that
/// every output element contributes a distinct gradient.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let (m, n) = g.shape(y);
    let w: Vec<f64> = (0..m * n).map(|i| ((i * 7919 % 101) as f64 / 50.0) - 1.0).collect();
    let w = g.constant_raw(m, n, w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check_unary(name: &str, rows: usize, cols: usize, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, rows, cols);
        let err = grad_check(
            |g, x| {
                let y = f(g, x)?;
                project(g, y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < TOL, "{name} seed {seed}: {err}");
    }
}

#[test]
fn elementwise_and_shape_ops_pass_grad_check() {
    check_unary("silu", 3, 4, |g, x| Ok(g.silu(x)));
    check_unary("sigmoid", 3, 4, |g, x| Ok(g.sigmoid(x)));
    check_unary("glu", 3, 4, |g, x| g.glu(x));
    check_unary("scale", 3, 4, |g, x| Ok(g.scale(x, -1.7)));
    check_unary("log_softmax", 3, 5, |g, x| Ok(g.log_softmax(x)));
    check_unary("exp", 3, 4, |g, x| Ok(g.exp(x)));
    check_unary("mul_self", 2, 3, |g, x| g.mul(x, x));
    check_unary("sub", 2, 3, |g, x| {
        let y = g.silu(x);
        g.sub(x, y)
    });
    check_unary("slice", 5, 3, |g, x| g.slice_rows(x, 1, 3));
    check_unary("concat", 2, 3, |g, x| {
        let y = g.silu(x);
        g.concat_rows(&[x, y, x])
    });
    check_unary("reshape", 2, 6, |g, x| {
        let r = g.reshape(x, 4, 3)?;
        Ok(g.silu(r))
    });
    check_unary("im2col", 7, 3, |g, x| g.im2col(x, 3, 2, 1));
    check_unary("mean", 3, 3, |g, x| {
        let s = g.silu(x);
        Ok(g.mean(s))
    });
}

#[test]
fn binary_ops_pass_grad_check_in_each_argument() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let bias = rand_tensor(&mut rng, 1, 4);
        let gain = rand_tensor(&mut rng, 1, 4);
        let w = rand_tensor(&mut rng, 3, 4);

        let err = grad_check(|g, x| { let bb = g.constant(&b); let y = g.matmul(x, bb)?; project(g, y) }, &a, 1e-5).unwrap();
        assert!(err < TOL, "matmul lhs {seed}: {err}");
        let err = grad_check(|g, x| { let aa = g.constant(&a); let y = g.matmul(aa, x)?; project(g, y) }, &b, 1e-5).unwrap();
        assert!(err < TOL, "matmul rhs {seed}: {err}");
        let err = grad_check(|g, x| { let bb = g.constant(&bias); let y = g.add_bias(x, bb)?; project(g, y) }, &a, 1e-5).unwrap();
        assert!(err < TOL, "bias lhs {seed}: {err}");
        let err = grad_check(|g, x| { let aa = g.constant(&a); let y = g.add_bias(aa, x)?; let y = g.silu(y); project(g, y) }, &bias, 1e-5).unwrap();
        assert!(err < TOL, "bias rhs {seed}: {err}");

        // layer norm w.r.t. input, gain and bias
        let err = grad_check(|g, x| { let gg = g.constant(&gain); let bb = g.constant(&bias); let y = g.layer_norm(x, gg, bb)?; project(g, y) }, &a, 1e-5).unwrap();
        assert!(err < TOL, "layer_norm x {seed}: {err}");
        let err = grad_check(|g, x| { let aa = g.constant(&a); let bb = g.constant(&bias); let y = g.layer_norm(aa, x, bb)?; project(g, y) }, &gain, 1e-5).unwrap();
        assert!(err < TOL, "layer_norm gain {seed}: {err}");
        let err = grad_check(|g, x| { let aa = g.constant(&a); let gg = g.constant(&gain); let y = g.layer_norm(aa, gg, x)?; let y = g.silu(y); project(g, y) }, &bias, 1e-5).unwrap();
        assert!(err < TOL, "layer_norm bias {seed}: {err}");

        // depthwise convolution w.r.t. input and kernel
        let kern = rand_tensor(&mut rng, 3, 4);
        let err = grad_check(|g, x| { let k = g.constant(&kern); let y = g.depthwise_conv(x, k)?; project(g, y) }, &w, 1e-5).unwrap();
        assert!(err < TOL, "dwconv x {seed}: {err}");
        let err = grad_check(|g, x| { let ww = g.constant(&w); let y = g.depthwise_conv(ww, x)?; project(g, y) }, &kern, 1e-5).unwrap();
        assert!(err < TOL, "dwconv w {seed}: {err}");

        // embedding table
        let table = rand_tensor(&mut rng, 5, 3);
        let err = grad_check(|g, x| { let y = g.embedding(x, &[4, 0, 4, 2])?; project(g, y) }, &table, 1e-5).unwrap();
        assert!(err < TOL, "embedding {seed}: {err}");
    }
}

#[test]
fn attention_passes_grad_check() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let q = rand_tensor(&mut rng, 3, 4);
        let k = rand_tensor(&mut rng, 5, 4);
        let v = rand_tensor(&mut rng, 5, 4);
        for causal in [false, true] {
            let err = grad_check(|g, x| { let kk = g.constant(&k); let vv = g.constant(&v); let y = g.attention(x, kk, vv, 2, causal)?; project(g, y) }, &q, 1e-5).unwrap();
            assert!(err < TOL, "attn q {seed} {causal}: {err}");
            let err = grad_check(|g, x| { let qq = g.constant(&q); let vv = g.constant(&v); let y = g.attention(qq, x, vv, 2, causal)?; project(g, y) }, &k, 1e-5).unwrap();
            assert!(err < TOL, "attn k {seed} {causal}: {err}");
            let err = grad_check(|g, x| { let qq = g.constant(&q); let kk = g.constant(&k); let y = g.attention(qq, kk, x, 2, causal)?; project(g, y) }, &v, 1e-5).unwrap();
            assert!(err < TOL, "attn v {seed} {causal}: {err}");
        }
        // self-attention: the same node feeds q, k and v
        let x = rand_tensor(&mut rng, 4, 4);
        let err = grad_check(|g, x| { let y = g.attention(x, x, x, 2, true)?; project(g, y) }, &x, 1e-5).unwrap();
        assert!(err < TOL, "self attn {seed}: {err}");
    }
}

#[test]
fn losses_pass_grad_check() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let logits = rand_tensor(&mut rng, 4, 5);
        let other = rand_tensor(&mut rng, 4, 5);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let err = grad_check(|g, x| g.xent_smoothed(x, &targets, 0.2), &logits, 1e-5).unwrap();
        assert!(err < TOL, "xent {seed}: {err}");
        let err = grad_check(|g, x| { let o = g.constant(&other); g.kl_categorical(x, o) }, &logits, 1e-5).unwrap();
        assert!(err < TOL, "kl p {seed}: {err}");
        let err = grad_check(|g, x| { let o = g.constant(&other); g.kl_categorical(o, x) }, &logits, 1e-5).unwrap();
        assert!(err < TOL, "kl q {seed}: {err}");
        let err = grad_check(|g, x| { let o = g.constant(&other); g.kl_symmetric(x, o) }, &logits, 1e-5).unwrap();
        assert!(err < TOL, "kl sym {seed}: {err}");
        let tgt = other.data().to_vec();
        let err = grad_check(|g, x| g.l2_loss(x, &tgt), &logits, 1e-5).unwrap();
        assert!(err < TOL, "l2 {seed}: {err}");
        let err = grad_check(|g, x| g.l1_loss(x, &tgt), &logits, 1e-5).unwrap();
        assert!(err < TOL, "l1 {seed}: {err}");
        let ybin: Vec<f64> = (0..20).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let err = grad_check(|g, x| g.bce_logits(x, &ybin, 1.0), &logits, 1e-5).unwrap();
        assert!(err < TOL, "bce {seed}: {err}");
        // CTC on normalized log-probabilities: T=6, 2 labels + blank
        let frames = rand_tensor(&mut rng, 6, 3);
        let err = grad_check(|g, x| { let lp = g.log_softmax(x); g.ctc_loss(lp, &[0, 1, 1]) }, &frames, 1e-5).unwrap();
        assert!(err < TOL, "ctc {seed}: {err}");
    }
}

#[test]
fn grad_check_examples() {
    let x = Tensor::from_vec(vec![1.0, 2.0]);
    let e = grad_check(|g, x| { let y = g.scale(x, 3.0); Ok(g.sum(y)) }, &x, 1e-5).unwrap();
    assert!(e < 1e-8);
    let e = grad_check(|g, _| Ok(g.constant(&Tensor::scalar(2.5))), &x, 1e-5).unwrap();
    assert!(e < 1e-8);
    // softmax then sum of squares
    let x = Tensor::matrix(1, 3, vec![0.3, -1.1, 2.0]).unwrap();
    let e = grad_check(
        |g, x| {
            let lp = g.log_softmax(x);
            let p = g.exp(lp);
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-6, "{e}");
    // step must be positive
    assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.0).is_err());
}

#[test]
fn xent_examples() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap());
    // oracle: p0 = e²/(e²+1), NLL0 = −ln p0, NLL1 = −ln(1−p0)
    let p0 = 2f64.exp() / (2f64.exp() + 1.0);
    let (n0, n1) = (-p0.ln(), -(1.0 - p0).ln());
    let expected = 0.8 * n0 + 0.2 * (n0 + n1) / 2.0;
    let l = g.xent_smoothed(x, &[0], 0.2).unwrap();
    assert!((g.scalar(l) - expected).abs() < 1e-12);
    let l0 = g.xent_smoothed(x, &[0], 0.0).unwrap();
    assert!((g.scalar(l0) - n0).abs() < 1e-12);
    assert!(matches!(g.xent_smoothed(x, &[2], 0.1), Err(Error::ClassOutOfRange { .. })));
}

#[test]
fn kl_examples() {
    let mut g = Graph::new();
    let p = g.constant(&Tensor::matrix(1, 2, vec![0.9f64.ln(), 0.1f64.ln()]).unwrap());
    let q = g.constant(&Tensor::matrix(1, 2, vec![0.5f64.ln(), 0.5f64.ln()]).unwrap());
    let pq = g.kl_categorical(p, q).unwrap();
    let qp = g.kl_categorical(q, p).unwrap();
    let want_pq = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
    let want_qp = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
    assert!((g.scalar(pq) - want_pq).abs() < 1e-12);
    assert!((g.scalar(qp) - want_qp).abs() < 1e-12);
    assert!((g.scalar(pq) - g.scalar(qp)).abs() > 1e-3);
    let same = g.kl_categorical(p, p).unwrap();
    assert_eq!(g.scalar(same), 0.0);
    let r = g.constant(&Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
    assert!(matches!(g.kl_categorical(p, r), Err(Error::Shape(_))));
}

#[test]
fn kl_self_is_zero_for_random_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let t = Tensor::randn(&[3, 7], 3.0, &mut rng);
        let mut g = Graph::new();
        let a = g.constant(&t);
        let b = g.constant(&t);
        let kl = g.kl_categorical(a, b).unwrap();
        assert!(g.scalar(kl).abs() < 1e-12);
    }
}

#[test]
fn ctc_matches_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut cases = 0;
    for v in 1..=3usize {
        let classes = v + 1;
        for frames in 1..=6usize {
            for len in 0..=4usize {
                for _ in 0..3 {
                    let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..v)).collect();
                    let raw = Tensor::randn(&[frames, classes], 1.0, &mut rng);
                    let mut g = Graph::new();
                    let x = g.constant(&raw);
                    let lp = g.log_softmax(x);
                    let lpv = g.value(lp).to_vec();
                    match g.ctc_loss(lp, &target) {
                        Ok(l) => {
                            let want = ctc_brute_force(&lpv, frames, classes, &target);
                            assert!((g.scalar(l) - want).abs() < 1e-6, "T={frames} V={v} y={target:?}");
                            cases += 1;
                        }
                        Err(Error::TargetTooLong { .. }) => {
                            assert!(ctc_brute_force(&lpv, frames, classes, &target).is_infinite());
                        }
                        Err(e) => panic!("{e}"),
                    }
                }
            }
        }
    }
    assert!(cases > 100);
}

#[test]
fn op_counter_matches_matmul_arithmetic() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::zeros(&[2, 3]));
    let b = g.constant(&Tensor::zeros(&[3, 4]));
    let before = flops::snapshot();
    g.matmul(a, b).unwrap();
    let after = flops::snapshot();
    assert_eq!(after.since(&before).total(), flops_linear_expected(2, 3, 4));
    assert_eq!(after.since(&before).total(), 24);
    assert!(after.total() >= before.total());
}
