use unity_core::data::{attach_spectrograms, gen_dataset, gen_text_corpus, Example, TaskSpec, MASK};
use unity_core::models::{decoder_target, Architecture, Model, ModelConfig, SpecOutputs};
use unity_core::nn::Dropout;
use unity_core::objectives::{
    denoise_pretrain_text_decoder, learning_rate, rdrop_pair_loss, s2spect_terms, single_pass_loss, span_mask, train,
    LossReport, TrainConfig, TEXT_DECODER_PREFIX,
};
use unity_core::tensor::{argmax, Graph, Tensor};

fn task() -> TaskSpec {
    TaskSpec::default()
}

fn data(n: usize) -> Vec<Example> {
    let mut d = gen_dataset(&task(), n).unwrap();
    attach_spectrograms(&task(), &mut d);
    d
}

fn small(arch: Architecture) -> ModelConfig {
    let mut c = ModelConfig::for_task(arch, &task());
    c.d_model = 16;
    c.d_ff = 24;
    c.n_head = 2;
    c
}

#[test]
fn zero_output_projections_give_log_vocab_loss() {
    let mut model = Model::new(small(Architecture::UnitY), 0).unwrap();
    for id in model.params.ids().collect::<Vec<_>>() {
        if model.params.name(id).contains(".out_proj.") {
            model.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let d = data(1);
    for eps in [0.0, 0.2] {
        let mut g = Graph::inference(&model.params);
        let (_, r) = single_pass_loss(&mut g, &model, &d[0].features, &d[0].targets(), eps, &mut Dropout::disabled())
            .unwrap();
        let c = &model.config;
        assert!((r.s2t.unwrap() - (c.text_vocab as f64).ln()).abs() < 1e-12);
        assert!((r.s2u.unwrap() - (c.unit_vocab as f64).ln()).abs() < 1e-12);
        assert!((r.total - r.weighted_total(c)).abs() < 1e-12);
    }
}

#[test]
fn rdrop_without_dropout_doubles_the_single_pass_loss() {
    let d = data(2);
    let mut configs = vec![
        small(Architecture::UnitY),
        small(Architecture::S2ut),
        small(Architecture::S2specT2),
        small(Architecture::S2tt),
        small(Architecture::Asr),
    ];
    let mut aux = small(Architecture::UnitY);
    aux.n_asr = 1;
    aux.w_asr = 0.3;
    configs.push(aux);
    for cfg in configs {
        let model = Model::new(cfg, 5).unwrap();
        for ex in &d {
            let t = ex.targets();
            let mut g = Graph::inference(&model.params);
            let (_, single) = single_pass_loss(&mut g, &model, &ex.features, &t, 0.1, &mut Dropout::disabled()).unwrap();
            let mut g = Graph::inference(&model.params);
            let (_, pair) = rdrop_pair_loss(&mut g, &model, &ex.features, &t, 0.1, 0.0, (1, 2)).unwrap();
            assert!((pair.total - 2.0 * single.total).abs() < 1e-6, "{}", model.arch());
            for kl in [pair.kl_s2u, pair.kl_s2t, pair.kl_asr].into_iter().flatten() {
                assert!(kl.abs() < 1e-6);
            }
            for (a, b) in pair.components().iter().zip(single.components()) {
                if let (Some(a), Some(b)) = (a, b) {
                    assert!((a - 2.0 * b).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn rdrop_with_dropout_has_positive_consistency_terms() {
    let d = data(1);
    let model = Model::new(small(Architecture::UnitY), 5).unwrap();
    let mut g = Graph::inference(&model.params);
    let (_, r) = rdrop_pair_loss(&mut g, &model, &d[0].features, &d[0].targets(), 0.1, 0.3, (1, 2)).unwrap();
    assert!(r.kl_s2u.unwrap() > 0.0);
    assert!(r.kl_s2t.unwrap() > 0.0);
    assert!(r.kl_asr.is_none());

    let spec = Model::new(small(Architecture::S2specT), 0).unwrap();
    let mut g = Graph::inference(&spec.params);
    assert!(rdrop_pair_loss(&mut g, &spec, &d[0].features, &d[0].targets(), 0.1, 0.3, (1, 2)).is_err());
}

#[test]
fn spectrogram_terms_hand_example() {
    let mut g = Graph::new();
    let frames = g.constant(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.5, -1.0]).unwrap());
    let eos_logits = g.constant(&Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap());
    let states = g.constant(&Tensor::zeros(&[2, 4]));
    let target = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.5, 1.0]).unwrap();
    let (l1, l2, eos) = s2spect_terms(&mut g, &SpecOutputs { states, frames, eos_logits }, &target).unwrap();
    assert!((g.scalar(l1) - 3.0 / 4.0).abs() < 1e-12);
    assert!((g.scalar(l2) - 5.0 / 4.0).abs() < 1e-12);
    // Stop targets (0, 1): ln 2 for the first step, ln(1 + e^-2) for the last.
    let want = 0.5 * (2f64.ln() + (1.0 + (-2f64).exp()).ln());
    assert!((g.scalar(eos) - want).abs() < 1e-12);
}

#[test]
fn warmup_then_inverse_square_root() {
    assert!((learning_rate(1, 1e-3, 4) - 0.25e-3).abs() < 1e-15);
    assert!((learning_rate(4, 1e-3, 4) - 1e-3).abs() < 1e-15);
    assert!((learning_rate(16, 1e-3, 4) - 0.5e-3).abs() < 1e-15);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let d = data(16);
    let tc = TrainConfig { max_steps: 30, batch_size: 4, warmup: 5, ..TrainConfig::default() };
    let run = || {
        let mut m = Model::new(small(Architecture::UnitY), 1).unwrap();
        let log = train(&mut m, &d, &tc).unwrap();
        (log, m.to_checkpoint())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(ca, cb);
    let first: f64 = a.rows[..5].iter().map(|r| r.report.total).sum();
    let last: f64 = a.rows[a.rows.len() - 5..].iter().map(|r| r.report.total).sum();
    assert!(last < first, "{first} -> {last}");
    let header = a.to_csv().lines().next().unwrap().to_string();
    assert!(header.starts_with("step,lr,total"));
    for c in LossReport::COMPONENTS {
        assert!(header.contains(c));
    }
}

#[test]
fn invalid_training_settings_are_rejected() {
    let d = data(2);
    let mut m = Model::new(small(Architecture::S2tt), 0).unwrap();
    for tc in [
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { label_smoothing: 1.0, ..TrainConfig::default() },
        TrainConfig { dropout: 1.0, ..TrainConfig::default() },
    ] {
        assert!(train(&mut m, &d, &tc).is_err());
    }
    assert!(train(&mut m, &[], &TrainConfig::default()).is_err());
}

#[test]
fn span_masks_only_replace_with_mask() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let s: Vec<usize> = (3..23).collect();
    for ratio in [0.0, 0.3, 0.6] {
        let m = span_mask(&s, ratio, &mut rng);
        assert_eq!(m.len(), s.len());
        let masked = m.iter().zip(&s).filter(|(a, b)| a != b).count();
        assert!(m.iter().zip(&s).all(|(a, b)| a == b || *a == MASK));
        assert_eq!(masked, (ratio * s.len() as f64).round() as usize);
    }
}

#[test]
fn pretrained_decoder_loads_into_unity() {
    let corpus = gen_text_corpus(&task(), 64).unwrap();
    let cfg = ModelConfig::for_task(Architecture::UnitY, &task());
    let tc = TrainConfig { max_steps: 600, batch_size: 8, warmup: 50, dropout: 0.0, ..TrainConfig::default() };
    let res = denoise_pretrain_text_decoder(&corpus, 0.3, &cfg, 2, &tc).unwrap();
    let first = res.log.rows[0].report.total;
    assert!(res.log.last_total().unwrap() < first);

    // Teacher-forced reconstruction of masked input.
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let (mut hit, mut total) = (0, 0);
    for sent in &corpus {
        let masked = span_mask(sent, 0.3, &mut rng);
        let mut g = Graph::inference(&res.denoiser.params);
        let logits = res.denoiser.forward(&mut g, &masked, sent, &mut Dropout::disabled()).unwrap();
        for (i, &want) in decoder_target(sent).iter().enumerate() {
            hit += usize::from(argmax(g.row(logits, i)) == want);
            total += 1;
        }
    }
    let acc = hit as f64 / total as f64;
    assert!(acc > 0.9, "token accuracy {acc}");

    let ckpt = res.denoiser.export_decoder();
    assert!(ckpt.params.iter().all(|(n, _)| n.starts_with(TEXT_DECODER_PREFIX)));
    let mut model = Model::new(cfg, 7).unwrap();
    let n = model.load_params(&ckpt, TEXT_DECODER_PREFIX).unwrap();
    assert_eq!(n, ckpt.params.len());
    for (name, t) in &ckpt.params {
        assert_eq!(model.params.get(model.params.find(name).unwrap()), t);
    }

    let mut shallow = ModelConfig::for_task(Architecture::UnitY, &task());
    shallow.n_1st -= 1;
    let mut other = Model::new(shallow, 0).unwrap();
    assert!(other.load_params(&ckpt, TEXT_DECODER_PREFIX).is_err());
}
