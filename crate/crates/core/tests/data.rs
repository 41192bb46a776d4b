use std::collections::HashSet;

use proptest::prelude::*;
use unity_core::data::{
    collapse_units, gen_dataset, gen_splits, gen_text_corpus, length_ratio_filter, read_dataset, read_dataset_from,
    write_dataset, write_dataset_to, Lexicon, TaskSpec, TEXT_SPECIALS, UNIT_SPECIALS,
};

#[test]
fn same_seed_same_dataset() {
    let spec = TaskSpec { sigma: 0.0, ..TaskSpec::default() };
    assert_eq!(gen_dataset(&spec, 50).unwrap(), gen_dataset(&spec, 50).unwrap());
    let noisy = TaskSpec::default();
    assert_eq!(gen_dataset(&noisy, 20).unwrap(), gen_dataset(&noisy, 20).unwrap());
    let other = TaskSpec { seed: 2, ..TaskSpec::default() };
    assert_ne!(gen_dataset(&noisy, 20).unwrap(), gen_dataset(&other, 20).unwrap());
}

#[test]
fn examples_are_well_formed() {
    let spec = TaskSpec::default();
    let lex = Lexicon::new(&spec);
    for e in gen_dataset(&spec, 200).unwrap() {
        assert!(e.units.windows(2).all(|w| w[0] != w[1]));
        assert_eq!(e.units, collapse_units(&e.units));
        assert_eq!(e.frames(), e.text.len() * spec.frames_per_symbol);
        assert_eq!(e.text.len(), e.source.len());
        assert!((spec.min_len..=spec.max_len).contains(&e.text.len()));
        assert!(e.text.iter().all(|&t| (TEXT_SPECIALS..spec.text_classes()).contains(&t)));
        assert!(e.units.iter().all(|&u| (UNIT_SPECIALS..spec.unit_classes()).contains(&u)));
        assert_eq!(e.units, lex.units_of(&e.text));
        // Roughly u units per subword after collapsing.
        assert!(e.units.len() <= spec.units_per_subword * e.text.len());
        assert!(e.units.len() >= e.text.len());
    }
}

#[test]
fn features_are_normalized_per_utterance() {
    for sigma in [0.0, 0.05, 0.5] {
        let spec = TaskSpec { sigma, ..TaskSpec::default() };
        for e in gen_dataset(&spec, 20).unwrap() {
            let (t, d) = (e.features.rows(), e.features.cols());
            for c in 0..d {
                let col: Vec<f64> = (0..t).map(|r| e.features.row(r)[c]).collect();
                let mean = col.iter().sum::<f64>() / t as f64;
                let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t as f64;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-10, "var {var}");
            }
        }
    }
}

#[test]
fn unigram_frequencies_match_the_task_distribution() {
    let spec = TaskSpec::default();
    let corpus = gen_text_corpus(&spec, 10_000).unwrap();
    let mut counts = vec![0usize; spec.text_classes()];
    let mut n = 0;
    for s in &corpus {
        for &t in s {
            assert!(t < spec.text_classes());
            counts[t] += 1;
            n += 1;
        }
    }
    let want = spec.unigram_distribution();
    assert!((want.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let tv: f64 = counts.iter().zip(&want).map(|(&c, &p)| (c as f64 / n as f64 - p).abs()).sum::<f64>() / 2.0;
    assert!(tv < 0.05, "total variation {tv}");
    assert_eq!(corpus, gen_text_corpus(&spec, 10_000).unwrap());
}

#[test]
fn splits_are_disjoint_by_sentence() {
    let spec = TaskSpec::default();
    let s = gen_splits(&spec, 500, 50, 100).unwrap();
    assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (500, 50, 100));
    let key = |e: &unity_core::data::Example| e.source.clone();
    let train: HashSet<_> = s.train.iter().map(key).collect();
    let dev: HashSet<_> = s.dev.iter().map(key).collect();
    let test: HashSet<_> = s.test.iter().map(key).collect();
    assert_eq!(train.len(), 500);
    assert!(train.is_disjoint(&dev) && train.is_disjoint(&test) && dev.is_disjoint(&test));
    let ids: HashSet<_> = s.train.iter().chain(&s.dev).chain(&s.test).map(|e| e.id.clone()).collect();
    assert_eq!(ids.len(), 650);

    let tiny = TaskSpec { n_symbols: 3, text_vocab: 3, min_len: 1, max_len: 1, ..TaskSpec::default() };
    assert!(gen_splits(&tiny, 10, 0, 0).is_err());
}

#[test]
fn length_ratio_filter_uses_units_over_frames() {
    let spec = TaskSpec::default();
    for e in gen_dataset(&spec, 30).unwrap() {
        let r = e.units.len() as f64 / e.frames() as f64;
        assert_eq!(length_ratio_filter(&e, 0.7).unwrap(), r <= 0.7);
        assert!(length_ratio_filter(&e, 1e300).unwrap());
    }
}

#[test]
fn dataset_files_round_trip_exactly() {
    let data = gen_dataset(&TaskSpec::default(), 25).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.tsv");
    write_dataset(&path, &data).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), data);

    let mut buf = Vec::new();
    write_dataset_to(&mut buf, &data[..2]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("#unity-dataset v1 d_feat=16\n"));
    let broken = text.replacen("\t", "\tx", 1);
    assert!(read_dataset_from(broken.as_bytes()).is_err());
    assert!(read_dataset_from("no header\n".as_bytes()).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    for spec in [
        TaskSpec { n_symbols: 2, ..TaskSpec::default() },
        TaskSpec { text_vocab: 10, ..TaskSpec::default() },
        TaskSpec { units_per_subword: 1, ..TaskSpec::default() },
        TaskSpec { min_len: 4, max_len: 3, ..TaskSpec::default() },
        TaskSpec { sigma: f64::NAN, ..TaskSpec::default() },
    ] {
        assert!(gen_dataset(&spec, 1).is_err());
    }
    assert!(gen_dataset(&TaskSpec::default(), 0).is_err());
}

proptest! {
    #[test]
    fn collapse_is_idempotent(xs in prop::collection::vec(0usize..4, 0..40)) {
        let once = collapse_units(&xs);
        prop_assert_eq!(collapse_units(&once), once.clone());
        prop_assert!(once.windows(2).all(|w| w[0] != w[1]));
        prop_assert_eq!(once.is_empty(), xs.is_empty());
    }
}
