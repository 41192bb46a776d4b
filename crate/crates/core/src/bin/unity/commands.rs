use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use unity_core::bench::{
    bench_decode, capacity_sweep, ratio_sweep, write_bench_csv, write_capacity_csv, write_ratio_csv, BenchModel,
};
use unity_core::data::{attach_spectrograms, gen_splits, gen_text_corpus, length_ratio_filter, read_dataset, write_dataset, Example};
use unity_core::eval::{evaluate, write_metrics};
use unity_core::models::{load_checkpoint, save_checkpoint, Model};
use unity_core::objectives::{denoise_pretrain_text_decoder, train, TrainConfig, TEXT_DECODER_PREFIX};
use unity_core::search::{decode_any, read_decodes, write_decodes};
use unity_core::verify::{architecture_suite, op_suite, GradCheckEntry};
use unity_core::Error;

use crate::experiment::{file_assignments, override_assignment, Assignment, Experiment};
use crate::Command;

/// Relative error bound of both gradient suites.
const GRAD_TOLERANCE: f64 = 1e-4;

pub struct Run {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub overrides: Vec<String>,
}

/// Files written by one command, for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
    }

    fn manifest(&self, cmd: &str) -> Result<()> {
        let mut s = String::new();
        for f in &self.files {
            let bytes = fs::read(self.dir.join(f))?;
            let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            s += &format!("{hex}  {}  {f}\n", bytes.len());
        }
        fs::write(self.dir.join(format!("{cmd}.manifest")), s)?;
        Ok(())
    }
}

fn resolve(run: &Run) -> Result<Experiment> {
    let mut assignments: Vec<Assignment> = Vec::new();
    if let Some(path) = &run.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        assignments.extend(file_assignments(&text, &path.display().to_string())?);
    }
    if let Some(seed) = run.seed {
        for key in ["task.seed", "train.seed"] {
            assignments.push(Assignment { location: "--seed".into(), key: key.into(), value: seed.to_string() });
        }
    }
    for (i, raw) in run.overrides.iter().enumerate() {
        assignments.push(override_assignment(raw, i)?);
    }
    Ok(Experiment::resolve(&assignments)?)
}

pub fn run(run: &Run) -> Result<()> {
    let exp = resolve(run)?;
    fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    let cmd = run.command.name();
    let mut out = Outputs { dir: run.out.clone(), files: Vec::new() };
    out.write(&format!("{cmd}.resolved.cfg"), exp.render().as_bytes())?;
    match run.command {
        Command::GenData => gen_data(&exp, &mut out)?,
        Command::PretrainText => pretrain_text(&exp, &mut out)?,
        Command::Train => train_model(&exp, &mut out)?,
        Command::Decode => decode(&exp, &mut out)?,
        Command::Eval => eval(&exp, &mut out)?,
        Command::Bench => bench(&exp, &mut out)?,
        Command::Sweep => sweep(&exp, &mut out)?,
        Command::GradCheck => grad_check(&exp, &mut out)?,
    }
    out.manifest(cmd)
}

fn data_dir(exp: &Experiment, out: &Outputs) -> PathBuf {
    if exp.io.data_dir.0.is_empty() {
        out.dir.clone()
    } else {
        PathBuf::from(&exp.io.data_dir.0)
    }
}

fn load_split(exp: &Experiment, out: &Outputs, split: &str) -> Result<Vec<Example>> {
    let path = data_dir(exp, out).join(format!("{split}.tsv"));
    let mut data = read_dataset(&path).with_context(|| format!("reading {}", path.display()))?;
    if exp.model.arch.predicts_spectrogram() {
        attach_spectrograms(&exp.task, &mut data);
    }
    Ok(data)
}

fn checkpoint_path(exp: &Experiment, out: &Outputs) -> PathBuf {
    if exp.io.checkpoint.0.is_empty() {
        out.dir.join("model.ckpt")
    } else {
        PathBuf::from(&exp.io.checkpoint.0)
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Model::from_checkpoint(&load_checkpoint(path)?)?)
}

fn gen_data(exp: &Experiment, out: &mut Outputs) -> Result<()> {
    let d = &exp.data;
    let mut splits = gen_splits(&exp.task, d.n_train, d.n_dev, d.n_test)?;
    let before = splits.train.len();
    if d.length_ratio > 0.0 {
        let mut kept = Vec::with_capacity(before);
        for e in splits.train {
            if length_ratio_filter(&e, d.length_ratio)? {
                kept.push(e);
            }
        }
        splits.train = kept;
    }
    for (name, set) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
        write_dataset(&out.path(&format!("{name}.tsv")), set)?;
    }
    let corpus = gen_text_corpus(&exp.task, exp.pretrain.corpus_size)?;
    let mut w = out.create("corpus.txt")?;
    for s in &corpus {
        let line: Vec<String> = s.iter().map(usize::to_string).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    println!(
        "train {} (filtered {}), dev {}, test {}, corpus {}",
        splits.train.len(),
        before - splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        corpus.len()
    );
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1))))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(anyhow::Error::from)
        })
        .collect()
}

fn pretrain_text(exp: &Experiment, out: &mut Outputs) -> Result<()> {
    let corpus = read_corpus(&data_dir(exp, out).join("corpus.txt"))?;
    if corpus.is_empty() {
        bail!(Error::Invalid("corpus.txt is empty".into()));
    }
    let tc = TrainConfig { max_steps: exp.pretrain.max_steps, ..exp.train.clone() };
    let res = denoise_pretrain_text_decoder(&corpus, exp.pretrain.mask_ratio, &exp.model, exp.pretrain.enc_layers, &tc)?;
    save_checkpoint(&out.path("pretrained_text.ckpt"), &res.denoiser.export_decoder())?;
    out.write("pretrain_log.csv", res.log.to_csv().as_bytes())?;
    if let Some(loss) = res.log.last_total() {
        println!("pretrained {} steps, final loss {loss:.4}", res.log.rows.len());
    }
    Ok(())
}

fn train_model(exp: &Experiment, out: &mut Outputs) -> Result<()> {
    let data = load_split(exp, out, "train")?;
    let mut model = Model::new(exp.model.clone(), exp.train.seed)?;
    if !exp.pretrain.init.0.is_empty() {
        let ckpt = load_checkpoint(Path::new(&exp.pretrain.init.0))?;
        let n = model.load_params(&ckpt, TEXT_DECODER_PREFIX)?;
        println!("initialized {n} text decoder tensors from {}", exp.pretrain.init);
        if exp.pretrain.freeze_ffn {
            model.set_text_ffn_frozen(true)?;
        }
    }
    let log = train(&mut model, &data, &exp.train)?;
    save_checkpoint(&out.path("model.ckpt"), &model.to_checkpoint())?;
    out.write("train_log.csv", log.to_csv().as_bytes())?;
    if let Some(loss) = log.last_total() {
        println!("trained {} steps, final loss {loss:.4}", log.rows.len());
    }
    Ok(())
}

fn decode(exp: &Experiment, out: &mut Outputs) -> Result<()> {
    let model = load_model(&checkpoint_path(exp, out))?;
    let data = load_split(exp, out, &exp.io.split.0)?;
    let records = data
        .iter()
        .map(|e| decode_any(&model, &e.id, &e.features, &exp.beam))
        .collect::<unity_core::Result<Vec<_>>>()?;
    let w = out.create("decode.tsv")?;
    write_decodes(w, &records)?;
    println!("decoded {} utterances", records.len());
    Ok(())
}

fn eval(exp: &Experiment, out: &mut Outputs) -> Result<()> {
    let path = out.dir.join("decode.tsv");
    let records = read_decodes(File::open(&path).with_context(|| format!("reading {}", path.display()))?)?;
    let refs = load_split(exp, out, &exp.io.split.0)?;
    let ev = evaluate(&records, &refs)?;
    let rows = ev.rows(&exp.io.split.0, exp.model.arch.name());
    write_metrics(out.create("metrics.csv")?, &rows)?;
    for r in &rows {
        println!("{} {} {}: {:.2}", r.pass, r.metric, r.dataset, r.value);
    }
    Ok(())
}

fn bench(exp: &Experiment, out: &mut Outputs) -> Result<()> {
    let mut specs: Vec<(String, PathBuf)> = Vec::new();
    if exp.bench.models.0.is_empty() {
        specs.push((exp.model.arch.name().to_string(), checkpoint_path(exp, out)));
    } else {
        for item in exp.bench.models.0.split(',') {
            let (label, path) = item.split_once('=').ok_or_else(|| Error::Config {
                location: "bench.models".into(),
                message: format!("expected label=path, got {item:?}"),
            })?;
            specs.push((label.trim().to_string(), PathBuf::from(path.trim())));
        }
    }
    let models = specs
        .iter()
        .map(|(l, p)| Ok((l.clone(), load_model(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let bench_models: Vec<BenchModel> = models.iter().map(|(label, model)| BenchModel { label, model }).collect();
    let mut data = load_split(exp, out, &exp.io.split.0)?;
    data.truncate(exp.bench.n_utts.max(1));
    let rows = bench_decode(&bench_models, &data, &exp.bench.sweep.0, exp.bench.repeats, &exp.beam)?;
    write_bench_csv(out.create("bench.csv")?, &rows)?;
    for r in &rows {
        println!(
            "{} b=({},{}) {:.2} ms/utt flops={} text_bleu={:.1} unit_bleu={:.1}",
            r.model, r.b1, r.b2, r.mean_ms, r.flops, r.text_bleu, r.unit_bleu
        );
    }
    Ok(())
}

fn sweep(exp: &Experiment, out: &mut Outputs) -> Result<()> {
    let d = &exp.data;
    if exp.sweep.kind.0 == "capacity" {
        let splits = gen_splits(&exp.task, d.n_train, 0, d.n_test)?;
        let rows = capacity_sweep(&splits, &exp.model, &exp.sweep.configs.0, exp.sweep.baseline, &exp.train, &exp.beam)?;
        write_capacity_csv(out.create("capacity.csv")?, &rows)?;
        for r in &rows {
            println!("({}, {}) unit_bleu={:.1} speedup={:.2}", r.n1, r.n2, r.unit_bleu, r.speedup);
        }
    } else {
        let rows = ratio_sweep(&exp.task, &exp.sweep.ratios.0, d.n_train, d.n_test, &exp.train, &exp.beam)?;
        write_ratio_csv(out.create("ratio.csv")?, &rows)?;
        for r in &rows {
            println!("u={} ratio={:.2} speedup={:.2}", r.units_per_subword, r.ratio, r.speedup());
        }
    }
    Ok(())
}

fn grad_check(exp: &Experiment, out: &mut Outputs) -> Result<()> {
    let mut entries: Vec<(&str, GradCheckEntry)> = op_suite(10)?.into_iter().map(|e| ("op", e)).collect();
    entries.extend(architecture_suite(64, exp.train.seed)?.into_iter().map(|e| ("model", e)));
    let mut w = out.create("grad_check.csv")?;
    writeln!(w, "suite,name,checked,max_rel_error,pass")?;
    let mut failed = Vec::new();
    for (suite, e) in &entries {
        let pass = e.max_rel_error < GRAD_TOLERANCE;
        writeln!(w, "{suite},{},{},{:e},{}", e.name, e.checked, e.max_rel_error, u8::from(pass))?;
        println!("{suite:5} {:28} {:.3e}{}", e.name, e.max_rel_error, if pass { "" } else { "  FAIL" });
        if !pass {
            failed.push(e.name.clone());
        }
    }
    w.flush()?;
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}
