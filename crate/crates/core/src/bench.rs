//! Decoding-efficiency harness: wall clock, multiply-adds and output quality.
//!
//! Everything runs on the calling thread. Multiply-adds count linear maps,
//! attention products and convolutions only (see [`crate::tensor::flops`]).

use std::io::Write;
use std::time::Instant;

use crate::data::{gen_splits, Example, Splits, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::models::{Architecture, Model, ModelConfig};
use crate::objectives::{train, TrainConfig};
use crate::search::{decode_any, BeamConfig, DecodeRecord};
use crate::tensor::flops;

/// A trained model under a display name.
#[derive(Clone, Copy, Debug)]
pub struct BenchModel<'a> {
    pub label: &'a str,
    pub model: &'a Model,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub model: String,
    /// First-pass depth (0 for single-pass models).
    pub n1: usize,
    /// Depth of the decoder producing the final output.
    pub n2: usize,
    pub b1: usize,
    pub b2: usize,
    pub n_utts: usize,
    /// Median over the timed repeats.
    pub wall_s: f64,
    pub mean_ms: f64,
    pub flops: u64,
    pub text_bleu: f64,
    pub unit_bleu: f64,
    /// Utterances that hit a length limit or failed to decode.
    pub truncated: usize,
}

pub const BENCH_HEADER: &str = "model,n1,n2,b1,b2,n_utts,wall_s,mean_ms,flops,text_bleu,unit_bleu,truncated";

pub fn write_bench_csv<W: Write>(mut w: W, rows: &[BenchRow]) -> Result<()> {
    writeln!(w, "{BENCH_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.6},{:.4},{},{:.4},{:.4},{}",
            r.model, r.n1, r.n2, r.b1, r.b2, r.n_utts, r.wall_s, r.mean_ms, r.flops, r.text_bleu, r.unit_bleu, r.truncated
        )?;
    }
    Ok(())
}

/// Decoder depths reported for a model: (first pass, final output).
pub fn depths(cfg: &ModelConfig) -> (usize, usize) {
    match cfg.arch {
        Architecture::UnitY | Architecture::S2specT2 => (cfg.n_1st, cfg.n_2nd),
        Architecture::S2ut | Architecture::S2specT => (0, cfg.n_2nd),
        Architecture::S2tt => (cfg.n_1st, 0),
        Architecture::Asr => (cfg.n_asr, 0),
    }
}

/// Outcome of decoding a whole set once.
#[derive(Clone, Debug)]
pub struct DecodeRun {
    pub records: Vec<DecodeRecord>,
    pub wall_s: f64,
    pub flops: u64,
    pub failed: usize,
}

/// Decodes every example once, timing the loop and counting multiply-adds.
/// A failed utterance yields an empty, truncated record.
pub fn decode_set(model: &Model, data: &[Example], cfg: &BeamConfig) -> DecodeRun {
    let mut failed = 0;
    let start = Instant::now();
    let (records, count) = flops::measure(|| {
        data.iter()
            .map(|e| {
                decode_any(model, &e.id, &e.features, cfg).unwrap_or_else(|_| {
                    failed += 1;
                    DecodeRecord { id: e.id.clone(), text_truncated: true, unit_truncated: true, ..Default::default() }
                })
            })
            .collect::<Vec<_>>()
    });
    DecodeRun { records, wall_s: start.elapsed().as_secs_f64(), flops: count.total(), failed }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times each model at each `(B_1st, B_2nd)` point. One warm-up pass is
/// discarded, then `repeats` timed passes give the median wall clock.
/// Single-pass models use `B_1st` as their only beam.
pub fn bench_decode(
    models: &[BenchModel],
    data: &[Example],
    sweep: &[(usize, usize)],
    repeats: usize,
    base: &BeamConfig,
) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(Error::invalid("bench needs at least 3 timed repeats"));
    }
    if data.is_empty() {
        return Err(Error::invalid("bench set is empty"));
    }
    let mut rows = Vec::new();
    for m in models {
        for &(b1, b2) in sweep {
            let cfg = BeamConfig { b_1st: b1, b_2nd: b2, ..base.clone() };
            cfg.validate()?;
            let warm = decode_set(m.model, data, &cfg);
            let mut walls = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let run = decode_set(m.model, data, &cfg);
                if run.flops != warm.flops || run.records != warm.records {
                    return Err(Error::invalid(format!("{}: decoding is not deterministic", m.label)));
                }
                walls.push(run.wall_s);
            }
            let wall_s = median(&mut walls);
            let quality = evaluate(&warm.records, data)?;
            let truncated = warm.records.iter().filter(|r| r.text_truncated || r.unit_truncated).count();
            let (n1, n2) = depths(&m.model.config);
            rows.push(BenchRow {
                model: m.label.to_string(),
                n1,
                n2,
                b1,
                b2,
                n_utts: data.len(),
                wall_s,
                mean_ms: 1000.0 * wall_s / data.len() as f64,
                flops: warm.flops,
                text_bleu: quality.text_bleu,
                unit_bleu: quality.unit_bleu,
                truncated,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapacityRow {
    pub n1: usize,
    pub n2: usize,
    pub params: usize,
    pub text_bleu: f64,
    pub unit_bleu: f64,
    pub text_exact: f64,
    pub unit_exact: f64,
    pub wall_s: f64,
    pub flops: u64,
    /// Baseline wall clock over this row's wall clock.
    pub speedup: f64,
    /// Training stopped on a non-finite loss; quality fields are zero.
    pub diverged: bool,
}

pub const CAPACITY_HEADER: &str = "n1,n2,params,text_bleu,unit_bleu,text_exact,unit_exact,wall_s,flops,speedup,diverged";

pub fn write_capacity_csv<W: Write>(mut w: W, rows: &[CapacityRow]) -> Result<()> {
    writeln!(w, "{CAPACITY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.6},{},{:.4},{}",
            r.n1,
            r.n2,
            r.params,
            r.text_bleu,
            r.unit_bleu,
            r.text_exact,
            r.unit_exact,
            r.wall_s,
            r.flops,
            r.speedup,
            r.diverged
        )?;
    }
    Ok(())
}

fn timed_decode(model: &Model, data: &[Example], cfg: &BeamConfig, repeats: usize) -> (DecodeRun, f64) {
    let warm = decode_set(model, data, cfg);
    let mut walls: Vec<f64> = (0..repeats.max(1)).map(|_| decode_set(model, data, cfg).wall_s).collect();
    let wall = median(&mut walls);
    (warm, wall)
}

/// Trains one UnitY model per `(N_1st, N_2nd)` with identical settings and
/// reports quality, size and decoding speed relative to `configs[baseline]`.
pub fn capacity_sweep(
    splits: &Splits,
    base: &ModelConfig,
    configs: &[(usize, usize)],
    baseline: usize,
    tc: &TrainConfig,
    bc: &BeamConfig,
) -> Result<Vec<CapacityRow>> {
    if baseline >= configs.len() {
        return Err(Error::invalid("baseline index out of range"));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for &(n1, n2) in configs {
        let cfg = ModelConfig { n_1st: n1, n_2nd: n2, ..base.clone() };
        let mut model = Model::new(cfg, tc.seed)?;
        let params = model.num_params();
        match train(&mut model, &splits.train, tc) {
            Err(Error::Diverged { .. }) => {
                rows.push(CapacityRow {
                    n1,
                    n2,
                    params,
                    text_bleu: 0.0,
                    unit_bleu: 0.0,
                    text_exact: 0.0,
                    unit_exact: 0.0,
                    wall_s: 0.0,
                    flops: 0,
                    speedup: 0.0,
                    diverged: true,
                });
                continue;
            }
            r => {
                r?;
            }
        }
        let (run, wall_s) = timed_decode(&model, &splits.test, bc, 3);
        let q = evaluate(&run.records, &splits.test)?;
        rows.push(CapacityRow {
            n1,
            n2,
            params,
            text_bleu: q.text_bleu,
            unit_bleu: q.unit_bleu,
            text_exact: q.text_exact,
            unit_exact: q.unit_exact,
            wall_s,
            flops: run.flops,
            speedup: 0.0,
            diverged: false,
        });
    }
    let base_wall = rows[baseline].wall_s;
    for r in &mut rows {
        if !r.diverged && r.wall_s > 0.0 {
            r.speedup = base_wall / r.wall_s;
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioRow {
    pub units_per_subword: usize,
    pub frames_per_symbol: usize,
    /// Mean |U| / |Y| of the test references.
    pub ratio: f64,
    pub unity_wall_s: f64,
    pub s2ut_wall_s: f64,
    pub unity_flops: u64,
    pub s2ut_flops: u64,
    pub unity_unit_bleu: f64,
    pub s2ut_unit_bleu: f64,
}

impl RatioRow {
    pub fn speedup(&self) -> f64 {
        self.s2ut_wall_s / self.unity_wall_s
    }

    pub fn flops_ratio(&self) -> f64 {
        self.s2ut_flops as f64 / self.unity_flops as f64
    }
}

pub const RATIO_HEADER: &str =
    "units_per_subword,frames_per_symbol,ratio,unity_wall_s,s2ut_wall_s,speedup,unity_flops,s2ut_flops,flops_ratio,unity_unit_bleu,s2ut_unit_bleu";

pub fn write_ratio_csv<W: Write>(mut w: W, rows: &[RatioRow]) -> Result<()> {
    writeln!(w, "{RATIO_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.4},{:.6},{:.6},{:.4},{},{},{:.4},{:.4},{:.4}",
            r.units_per_subword,
            r.frames_per_symbol,
            r.ratio,
            r.unity_wall_s,
            r.s2ut_wall_s,
            r.speedup(),
            r.unity_flops,
            r.s2ut_flops,
            r.flops_ratio(),
            r.unity_unit_bleu,
            r.s2ut_unit_bleu
        )?;
    }
    Ok(())
}

/// UnitY against S2UT on tasks whose unit strings are `u` units per
/// subword, for each `u` in `units_per_subword`. Frames per symbol grow
/// with `u` so every unit stays resolvable after subsampling.
#[allow(clippy::too_many_arguments)]
pub fn ratio_sweep(
    base: &TaskSpec,
    units_per_subword: &[usize],
    n_train: usize,
    n_test: usize,
    tc: &TrainConfig,
    bc: &BeamConfig,
) -> Result<Vec<RatioRow>> {
    let mut rows = Vec::new();
    for &u in units_per_subword {
        let spec = TaskSpec {
            units_per_subword: u,
            frames_per_symbol: base.frames_per_symbol.max(2 * u),
            unit_vocab: base.unit_vocab.max(u + 1),
            ..base.clone()
        };
        let splits = gen_splits(&spec, n_train, 0, n_test)?;
        let run = |arch: Architecture| -> Result<(DecodeRun, f64, f64)> {
            let mut model = Model::new(ModelConfig::for_task(arch, &spec), tc.seed)?;
            train(&mut model, &splits.train, tc)?;
            let (r, wall) = timed_decode(&model, &splits.test, bc, 3);
            let q = evaluate(&r.records, &splits.test)?;
            Ok((r, wall, q.unit_bleu))
        };
        let (ur, uw, ub) = run(Architecture::UnitY)?;
        let (sr, sw, sb) = run(Architecture::S2ut)?;
        let ratio = splits.test.iter().map(|e| e.units.len() as f64 / e.text.len() as f64).sum::<f64>()
            / splits.test.len() as f64;
        rows.push(RatioRow {
            units_per_subword: u,
            frames_per_symbol: spec.frames_per_symbol,
            ratio,
            unity_wall_s: uw,
            s2ut_wall_s: sw,
            unity_flops: ur.flops,
            s2ut_flops: sr.flops,
            unity_unit_bleu: ub,
            s2ut_unit_bleu: sb,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn csv_header_is_fixed() {
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), BENCH_HEADER);
    }
}
