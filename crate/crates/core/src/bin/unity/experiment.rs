//! Run configuration: every section of a config file, resolved in order
//! file < `--seed` < `--override`.

use std::fmt;
use std::str::FromStr;

use unity_core::config::{parse_lines, render, Configurable};
use unity_core::configurable;
use unity_core::data::TaskSpec;
use unity_core::models::{Architecture, ModelConfig};
use unity_core::objectives::TrainConfig;
use unity_core::search::BeamConfig;
use unity_core::{Error, Result};

/// Comma-separated `a:b` pairs, e.g. `10:1,10:5`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pairs(pub Vec<(usize, usize)>);

impl fmt::Display for Pairs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(a, b)| format!("{a}:{b}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Pairs {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| {
                let (a, b) = p.trim().split_once(':').ok_or_else(|| format!("expected a:b, got {p:?}"))?;
                let n = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
                Ok((n(a)?, n(b)?))
            })
            .collect::<std::result::Result<Vec<_>, String>>()
            .map(Pairs)
    }
}

/// Comma-separated integers.
#[derive(Clone, Debug, PartialEq)]
pub struct List(pub Vec<usize>);

impl fmt::Display for List {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for List {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"))).collect::<std::result::Result<_, _>>().map(List)
    }
}

/// A string value; empty means "derive from the output directory".
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Text(pub String);

impl fmt::Display for Text {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Text {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(Text(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Training examples with |U| / T above this are dropped; 0 disables.
    pub length_ratio: f64,
}

configurable!(DataSettings { n_train, n_dev, n_test, length_ratio });

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSettings {
    pub corpus_size: usize,
    pub mask_ratio: f64,
    pub enc_layers: usize,
    pub max_steps: usize,
    /// Checkpoint whose `text.*` parameters initialize `train`; empty for none.
    pub init: Text,
    pub freeze_ffn: bool,
}

configurable!(PretrainSettings { corpus_size, mask_ratio, enc_layers, max_steps, init, freeze_ffn });

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSettings {
    pub repeats: usize,
    pub sweep: Pairs,
    pub n_utts: usize,
    /// `label=path` pairs, comma-separated; empty benches `<out>/model.ckpt`.
    pub models: Text,
}

configurable!(BenchSettings { repeats, sweep, n_utts, models });

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSettings {
    /// `capacity` or `ratio`.
    pub kind: Text,
    /// (N_1st, N_2nd) per capacity configuration.
    pub configs: Pairs,
    pub baseline: usize,
    /// Units per subword for the ratio sweep.
    pub ratios: List,
}

configurable!(SweepSettings { kind, configs, baseline, ratios });

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IoSettings {
    /// Directory holding dataset files; empty means the output directory.
    pub data_dir: Text,
    pub checkpoint: Text,
    /// Dataset split decoded and evaluated.
    pub split: Text,
}

configurable!(IoSettings { data_dir, checkpoint, split });

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub data: DataSettings,
    pub pretrain: PretrainSettings,
    pub bench: BenchSettings,
    pub sweep: SweepSettings,
    pub io: IoSettings,
}

impl Default for Experiment {
    fn default() -> Self {
        let task = TaskSpec::default();
        Experiment {
            model: ModelConfig::for_task(Architecture::UnitY, &task),
            task,
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
            data: DataSettings { n_train: 2000, n_dev: 100, n_test: 200, length_ratio: 0.7 },
            pretrain: PretrainSettings {
                corpus_size: 5000,
                mask_ratio: 0.3,
                enc_layers: 2,
                max_steps: 2000,
                init: Text::default(),
                freeze_ffn: true,
            },
            bench: BenchSettings {
                repeats: 3,
                sweep: Pairs(vec![(1, 1), (5, 1), (10, 1), (10, 5), (10, 10)]),
                n_utts: 100,
                models: Text::default(),
            },
            sweep: SweepSettings {
                kind: Text("capacity".into()),
                configs: Pairs(vec![(2, 6), (4, 4), (6, 2)]),
                baseline: 0,
                ratios: List(vec![2, 4, 8]),
            },
            io: IoSettings { split: Text("test".into()), ..IoSettings::default() },
        }
    }
}

/// One `key = value` assignment and where it came from.
#[derive(Clone, Debug)]
pub struct Assignment {
    pub location: String,
    pub key: String,
    pub value: String,
}

impl Assignment {
    fn error(&self, message: impl Into<String>) -> Error {
        Error::Config { location: self.location.clone(), message: message.into() }
    }
}

pub fn file_assignments(text: &str, origin: &str) -> Result<Vec<Assignment>> {
    Ok(parse_lines(text, origin)?
        .into_iter()
        .map(|(line, key, value)| Assignment { location: format!("{origin}:{line}"), key, value })
        .collect())
}

/// Parses one `--override section.key=value`.
pub fn override_assignment(raw: &str, index: usize) -> Result<Assignment> {
    let location = format!("--override #{}", index + 1);
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config { location: location.clone(), message: format!("expected key=value, got {raw:?}") })?;
    Ok(Assignment { location, key: k.trim().to_string(), value: v.trim().to_string() })
}

impl Experiment {
    fn section(&mut self, name: &str) -> Option<&mut dyn Configurable> {
        Some(match name {
            "task" => &mut self.task,
            "model" => &mut self.model,
            "train" => &mut self.train,
            "beam" => &mut self.beam,
            "data" => &mut self.data,
            "pretrain" => &mut self.pretrain,
            "bench" => &mut self.bench,
            "sweep" => &mut self.sweep,
            "io" => &mut self.io,
            _ => return None,
        })
    }

    fn apply(&mut self, a: &Assignment) -> Result<()> {
        let (section, key) = a.key.split_once('.').ok_or_else(|| a.error(format!("key {:?} lacks a section", a.key)))?;
        let target = self.section(section).ok_or_else(|| a.error(format!("unknown section {section:?}")))?;
        target.set(key, &a.value).map_err(|m| a.error(m))
    }

    /// Task keys and the architecture go first: they decide the model
    /// defaults every other `model.*` key then adjusts.
    pub fn resolve(assignments: &[Assignment]) -> Result<Self> {
        let mut exp = Experiment::default();
        let mut arch = Architecture::UnitY;
        for a in assignments {
            if a.key.starts_with("task.") {
                exp.apply(a)?;
            } else if a.key == "model.arch" {
                arch = a.value.parse().map_err(|m: String| a.error(m))?;
            }
        }
        exp.model = ModelConfig::for_task(arch, &exp.task);
        for a in assignments {
            if !a.key.starts_with("task.") && a.key != "model.arch" {
                exp.apply(a)?;
            }
        }
        exp.validate()?;
        Ok(exp)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.beam.validate()?;
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::Invalid("data.n_train and data.n_test must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.pretrain.mask_ratio) {
            return Err(Error::Invalid("pretrain.mask_ratio must lie in [0, 1)".into()));
        }
        if self.bench.repeats < 3 {
            return Err(Error::Invalid("bench.repeats must be at least 3".into()));
        }
        if !matches!(self.sweep.kind.0.as_str(), "capacity" | "ratio") {
            return Err(Error::Invalid("sweep.kind must be capacity or ratio".into()));
        }
        if self.sweep.baseline >= self.sweep.configs.0.len() {
            return Err(Error::Invalid("sweep.baseline must index sweep.configs".into()));
        }
        Ok(())
    }

    /// Every setting as config lines; resolving them reproduces `self`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s += &render("task", &self.task);
        s += &render("model", &self.model);
        s += &render("train", &self.train);
        s += &render("beam", &self.beam);
        s += &render("data", &self.data);
        s += &render("pretrain", &self.pretrain);
        s += &render("bench", &self.bench);
        s += &render("sweep", &self.sweep);
        s += &render("io", &self.io);
        s
    }
}
