use unity_core::bench::{bench_decode, decode_set, write_bench_csv, BenchModel, BENCH_HEADER};
use unity_core::data::{gen_dataset, TaskSpec};
use unity_core::models::{Architecture, Model, ModelConfig};
use unity_core::search::BeamConfig;

fn small(arch: Architecture) -> Model {
    let mut c = ModelConfig::for_task(arch, &TaskSpec::default());
    c.d_model = 16;
    c.d_ff = 24;
    c.n_head = 2;
    Model::new(c, 3).unwrap()
}

fn beams(b1: usize, b2: usize) -> BeamConfig {
    BeamConfig { b_1st: b1, b_2nd: b2, max_text_len: 8, max_unit_len: 12, ..BeamConfig::default() }
}

#[test]
fn flop_counts_repeat_exactly() {
    let data = gen_dataset(&TaskSpec::default(), 4).unwrap();
    for arch in [Architecture::UnitY, Architecture::S2ut] {
        let model = small(arch);
        let runs: Vec<_> = (0..3).map(|_| decode_set(&model, &data, &beams(1, 1))).collect();
        assert!(runs[0].flops > 0);
        assert!(runs.iter().all(|r| r.flops == runs[0].flops && r.records == runs[0].records));
    }
}

#[test]
fn wider_second_pass_costs_more() {
    let data = gen_dataset(&TaskSpec::default(), 4).unwrap();
    let model = small(Architecture::UnitY);
    let narrow = decode_set(&model, &data, &beams(2, 1));
    let wide = decode_set(&model, &data, &beams(2, 10));
    assert!(narrow.flops < wide.flops, "{} vs {}", narrow.flops, wide.flops);
    // The first pass is unaffected by the second beam.
    for (a, b) in narrow.records.iter().zip(&wide.records) {
        assert_eq!(a.text, b.text);
    }
}

#[test]
fn bench_rows_cover_the_sweep() {
    let data = gen_dataset(&TaskSpec::default(), 3).unwrap();
    let (u, s) = (small(Architecture::UnitY), small(Architecture::S2ut));
    let models = [BenchModel { label: "unity", model: &u }, BenchModel { label: "s2ut", model: &s }];
    let sweep = [(1, 1), (2, 2)];
    let rows = bench_decode(&models, &data, &sweep, 3, &beams(1, 1)).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!((rows[0].n1, rows[0].n2), (u.config.n_1st, u.config.n_2nd));
    assert_eq!((rows[2].n1, rows[2].n2), (0, s.config.n_2nd));
    assert!(rows.iter().all(|r| r.n_utts == 3 && r.wall_s > 0.0 && r.flops > 0));

    let mut buf = Vec::new();
    write_bench_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], BENCH_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == BENCH_HEADER.split(',').count()));

    assert!(bench_decode(&models, &data, &sweep, 2, &beams(1, 1)).is_err());
    assert!(bench_decode(&models, &[], &sweep, 3, &beams(1, 1)).is_err());
}
