use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unity_core::nn::{BlockConfig, ConformerBlock, CrossMode, DecoderLayer, Dropout, TokenDecoder};
use unity_core::tensor::{grad_check_params, grad_check_with, Graph, ParamStore, Tensor};

fn cfg(d: usize) -> BlockConfig {
    BlockConfig { d_model: d, d_ff: 2 * d, n_head: 2, conv_kernel: 3, dropout: 0.0 }
}

struct Fixture {
    store: ParamStore,
    dec: TokenDecoder,
    contexts: Vec<Tensor>,
}

fn fixture(seed: u64, depth: usize, mode: CrossMode) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let dec = TokenDecoder::new(&mut store, "dec", 7, depth, &cfg(8), mode, &mut rng);
    let contexts = (0..mode.contexts()).map(|i| Tensor::randn(&[3 + i, 8], 1.0, &mut rng)).collect();
    Fixture { store, dec, contexts }
}

/// Max |step-by-step − full causal forward| over every position, for
/// pre-logit states and logits.
fn incremental_gap(fx: &Fixture, tokens: &[usize]) -> f64 {
    let full = {
        let mut g = Graph::inference(&fx.store);
        let ctx: Vec<_> = fx.contexts.iter().map(|c| g.constant(c)).collect();
        let (h, l) = fx.dec.forward(&mut g, tokens, &ctx, &mut Dropout::disabled()).unwrap();
        (g.tensor(h), g.tensor(l))
    };
    let refs: Vec<&Tensor> = fx.contexts.iter().collect();
    let cross = fx.dec.stack.precompute_cross(&fx.store, &refs).unwrap();
    let mut state = fx.dec.stack.new_state();
    let mut worst = 0.0f64;
    for (i, &tok) in tokens.iter().enumerate() {
        let mut g = Graph::inference(&fx.store);
        let (h, l) = fx.dec.step(&mut g, &mut state, &cross, tok).unwrap();
        for (a, b) in g.value(h).iter().zip(full.0.row(i)) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in g.value(l).iter().zip(full.1.row(i)) {
            worst = worst.max((a - b).abs());
        }
    }
    assert_eq!(state.len(), tokens.len());
    worst
}

#[test]
fn five_token_prefix_steps_match_full_forward() {
    for mode in [CrossMode::None, CrossMode::Single, CrossMode::Parallel, CrossMode::Sequential] {
        let fx = fixture(3, 2, mode);
        let gap = incremental_gap(&fx, &[0, 4, 2, 6, 1]);
        assert!(gap < 1e-6, "{mode:?}: {gap}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn incremental_decoding_is_consistent(
        seed in 0u64..1000,
        depth in 1usize..4,
        tokens in prop::collection::vec(0usize..7, 1..=16),
        mode_ix in 0usize..4,
    ) {
        let mode = [CrossMode::None, CrossMode::Single, CrossMode::Parallel, CrossMode::Sequential][mode_ix];
        let fx = fixture(seed, depth, mode);
        prop_assert!(incremental_gap(&fx, &tokens) < 1e-6);
    }

    #[test]
    fn decoder_is_causal(
        seed in 0u64..1000,
        tokens in prop::collection::vec(0usize..7, 2..=10),
        pos in 0usize..10,
        replacement in 0usize..7,
    ) {
        let j = pos % tokens.len();
        let fx = fixture(seed, 2, CrossMode::Single);
        let run = |toks: &[usize]| {
            let mut g = Graph::inference(&fx.store);
            let ctx = g.constant(&fx.contexts[0]);
            let (_, l) = fx.dec.forward(&mut g, toks, &[ctx], &mut Dropout::disabled()).unwrap();
            g.tensor(l)
        };
        let base = run(&tokens);
        let mut perturbed = tokens.clone();
        perturbed[j] = replacement;
        let other = run(&perturbed);
        for i in 0..j {
            prop_assert_eq!(base.row(i), other.row(i));
        }
    }
}

#[test]
fn parallel_and_sequential_cross_attention_differ() {
    let mut outputs = Vec::new();
    for mode in [CrossMode::Parallel, CrossMode::Sequential] {
        // identical seed: shared-name parameters start identical
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let layer = DecoderLayer::new(&mut store, "l", &cfg(8), mode, &mut rng);
        let mut data_rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[4, 8], 1.0, &mut data_rng);
        let c1 = Tensor::randn(&[3, 8], 1.0, &mut data_rng);
        let c2 = Tensor::randn(&[5, 8], 1.0, &mut data_rng);
        let mut g = Graph::inference(&store);
        let (x, c1, c2) = (g.constant(&x), g.constant(&c1), g.constant(&c2));
        let y = layer.forward(&mut g, x, &[c1, c2], &mut Dropout::disabled()).unwrap();
        outputs.push(g.tensor(y));
    }
    assert!(outputs[0].max_abs_diff(&outputs[1]) > 1e-3);
}

#[test]
fn two_layer_conformer_stack_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let blocks: Vec<_> = (0..2)
        .map(|i| ConformerBlock::new(&mut store, &format!("b{i}"), cfg(8), &mut rng).unwrap())
        .collect();
    let input = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let weights = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let report = grad_check_params(
        &store,
        |g| {
            let mut h = g.constant(&input);
            for b in &blocks {
                h = b.forward(g, h, &mut Dropout::disabled())?;
            }
            let w = g.constant(&weights);
            let p = g.mul(h, w)?;
            Ok(g.sum(p))
        },
        1e-5,
        usize::MAX,
        0,
    )
    .unwrap();
    assert!(report.max_abs_grad > 0.0);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn two_layer_conformer_stack_input_gradient() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let blocks: Vec<_> = (0..2)
            .map(|i| ConformerBlock::new(&mut store, &format!("b{i}"), cfg(8), &mut rng).unwrap())
            .collect();
        let input = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let weights = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let err = grad_check_with(
            &store,
            |g, x| {
                let mut h = x;
                for b in &blocks {
                    h = b.forward(g, h, &mut Dropout::disabled())?;
                }
                let w = g.constant(&weights);
                let p = g.mul(h, w)?;
                Ok(g.sum(p))
            },
            &input,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}
