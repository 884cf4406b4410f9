//! Experiment configuration files.
//!
//! Plain UTF-8 `key = value` lines grouped under optional `[section]`
//! headers; `#` starts a comment. A key may appear at top level or in its
//! own section, never twice.
//!
//! ```text
//! [data]
//! dataset = two_moons
//! n_total = 1000
//! n_labeled = 6
//!
//! [schedule]
//! eta0 = 0.05
//! ell0 = 70
//! ell = 60
//! cycle_len = 10
//!
//! [averaging]
//! fast_swa = true
//! stride_epochs = 1
//!
//! [run]
//! epochs = 90
//! seed = 3
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::consistency::{
    AveragerSpec, ConsistencyConfig, Divergence, PerturbationSpec, Stride, TeacherMode, TrainConfig,
};
use crate::data::{DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::nets::{Activation, MlpSpec};
use crate::schedule::{RampSpec, ScheduleSpec};

/// Environment variable that replaces the directory relative output paths
/// are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "FASTSWA_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(DatasetSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        n_labeled: usize,
    },
}

/// Analyses written next to the metrics after training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Diversity,
    Gains,
    Rays,
    Trace,
}

impl std::str::FromStr for ReportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "diversity" => Ok(Self::Diversity),
            "gains" => Ok(Self::Gains),
            "rays" => Ok(Self::Rays),
            "trace" => Ok(Self::Trace),
            o => Err(format!("unknown report `{o}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub train: TrainConfig,
    /// Output directory as written in the file; see [`ExperimentConfig::output_dir`].
    pub output: PathBuf,
    pub reports: Vec<ReportKind>,
}

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "data",
        &[
            "dataset", "n_total", "n_labeled", "n_test", "data_noise", "blob_classes",
            "train_images", "train_labels", "test_images", "test_labels",
        ],
    ),
    ("model", &["widths", "hidden", "activation", "dropout"]),
    ("schedule", &["eta0", "ell0", "ell", "cycle_len"]),
    ("ramp", &["lambda_max", "ramp_epochs"]),
    (
        "optim",
        &["momentum", "weight_decay", "nesterov", "labeled_batch", "unlabeled_batch"],
    ),
    (
        "consistency",
        &[
            "teacher_mode", "divergence", "noise_sigma", "translate_px", "image_height",
            "image_width", "alpha", "teacher_dropout",
        ],
    ),
    ("averaging", &["swa", "fast_swa", "stride", "stride_epochs"]),
    ("run", &["epochs", "seed", "output", "reports", "snapshot_epochs"]),
];

fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS.iter().find(|(_, keys)| keys.contains(&key)).map(|(s, _)| *s)
}

/// Parsed `key → (line, value)` table.
struct Table {
    entries: BTreeMap<String, (usize, String)>,
}

impl Table {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                    line,
                    message: format!("malformed section header `{content}`"),
                })?;
                let name = name.trim();
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    return Err(Error::Config {
                        line,
                        message: format!("unknown section [{name}]"),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let home = section_of(k).ok_or_else(|| Error::Config {
                line,
                message: format!("unknown key `{k}`"),
            })?;
            if let Some(s) = &section {
                if s != home {
                    return Err(Error::Config {
                        line,
                        message: format!("key `{k}` belongs in [{home}], not [{s}]"),
                    });
                }
            }
            if let Some((prev, _)) = entries.get(k) {
                return Err(Error::Config {
                    line,
                    message: format!("key `{k}` already set on line {prev}"),
                });
            }
            entries.insert(k.to_string(), (line, v.to_string()));
        }
        Ok(Self { entries })
    }

    fn raw(&self, key: &str) -> Option<&(usize, String)> {
        self.entries.get(key)
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| Error::Config {
                line: *line,
                message: format!("bad value `{v}` for `{key}`: {e}"),
            }),
        }
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((line, v)) = self.raw(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|e: T::Err| Error::Config {
                    line: *line,
                    message: format!("bad list item `{s}` for `{key}`: {e}"),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some((line, v)) => match v.as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(Error::Config {
                    line: *line,
                    message: format!("`{key}` must be true or false, got `{v}`"),
                }),
            },
        }
    }

    /// Attaches the key's line to a validation error.
    fn at(&self, key: &str, e: Error) -> Error {
        match self.raw(key) {
            Some((line, _)) => Error::Config {
                line: *line,
                message: format!("`{key}`: {e}"),
            },
            None => e,
        }
    }
}

/// Parses configuration text. Relative data paths are resolved against
/// `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let t = Table::parse(text)?;

    let dataset: String = t.or("dataset", "two_moons".to_string())?;
    let n_labeled: usize = t.or("n_labeled", 6)?;
    let (data, input_dim, classes) = if dataset == "idx" {
        let path = |k: &str| -> Result<PathBuf> {
            let p: String = t.require(k)?;
            Ok(base_dir.join(p))
        };
        let src = DataSource::Idx {
            train_images: path("train_images")?,
            train_labels: path("train_labels")?,
            test_images: path("test_images")?,
            test_labels: path("test_labels")?,
            n_labeled,
        };
        // the model widths must be given explicitly for image data
        (src, None, None)
    } else {
        let kind: DatasetKind = dataset.parse().map_err(|e| t.at("dataset", e))?;
        let spec = DatasetSpec {
            kind,
            n_total: t.or("n_total", 1000)?,
            n_labeled,
            n_test: t.or("n_test", 1000)?,
            noise: t.or("data_noise", 0.1)?,
            blob_classes: t.or("blob_classes", 3)?,
        };
        let classes = spec.classes();
        (DataSource::Synthetic(spec), Some(2), Some(classes))
    };

    let dropout: f64 = t.or("dropout", 0.0)?;
    let widths = match t.list::<usize>("widths")? {
        Some(w) => w,
        None => {
            let (Some(d), Some(k)) = (input_dim, classes) else {
                return Err(Error::MissingKey("widths".into()));
            };
            let hidden = t.list::<usize>("hidden")?.unwrap_or_else(|| vec![32, 32]);
            std::iter::once(d).chain(hidden).chain(std::iter::once(k)).collect()
        }
    };
    let activation: Activation = t
        .or("activation", "relu".to_string())?
        .parse()
        .map_err(|e| t.at("activation", e))?;
    let model = MlpSpec::new(widths, dropout)
        .map_err(|e| t.at("widths", e))?
        .with_activation(activation);
    if let (Some(d), Some(k)) = (input_dim, classes) {
        if model.input_dim() != d || model.num_classes() != k {
            return Err(t.at(
                "widths",
                Error::InvalidArgument(format!("dataset needs input width {d} and {k} outputs")),
            ));
        }
    }

    let eta0: f64 = t.or("eta0", 0.05)?;
    let ell0: f64 = t.or("ell0", 70.0)?;
    let schedule = match (t.get::<f64>("ell")?, t.get::<f64>("cycle_len")?) {
        (Some(ell), Some(c)) => ScheduleSpec::cyclic(eta0, ell0, ell, c).map_err(|e| t.at("ell", e))?,
        (None, None) => ScheduleSpec::cosine(eta0, ell0).map_err(|e| t.at("eta0", e))?,
        (Some(_), None) => return Err(Error::MissingKey("cycle_len".into())),
        (None, Some(_)) => return Err(Error::MissingKey("ell".into())),
    };

    let ramp = RampSpec::new(t.or("lambda_max", 100.0)?, t.or("ramp_epochs", 5.0)?)
        .map_err(|e| t.at("lambda_max", e))?;
    let teacher_mode = match t.or("teacher_mode", "pi".to_string())?.as_str() {
        "pi" | "self" => TeacherMode::SelfEnsemble,
        "mean_teacher" | "ema" => TeacherMode::Ema,
        o => {
            return Err(t.at(
                "teacher_mode",
                Error::InvalidArgument(format!("unknown teacher mode `{o}`")),
            ))
        }
    };
    let divergence = match t.or("divergence", "mse".to_string())?.as_str() {
        "mse" => Divergence::Mse,
        "kl" => Divergence::Kl,
        o => return Err(t.at("divergence", Error::InvalidArgument(format!("unknown divergence `{o}`")))),
    };
    let consistency = ConsistencyConfig {
        divergence,
        teacher_mode,
        ramp,
        teacher_dropout: t.flag("teacher_dropout", true)?,
    };

    let mut perturb = PerturbationSpec::noise(t.or("noise_sigma", 0.0)?, dropout);
    let translate: usize = t.or("translate_px", 0)?;
    if translate > 0 {
        perturb = perturb.with_translation(translate, t.require("image_height")?, t.require("image_width")?);
    }
    perturb.validate(model.input_dim()).map_err(|e| t.at("noise_sigma", e))?;
    let perturbation = (perturb != PerturbationSpec::default()).then_some(perturb);

    let mut averagers = Vec::new();
    if t.flag("swa", false)? {
        averagers.push(AveragerSpec::swa());
    }
    if t.flag("fast_swa", false)? {
        let stride = match (t.get::<usize>("stride")?, t.get::<f64>("stride_epochs")?) {
            (Some(_), Some(_)) => {
                return Err(t.at(
                    "stride_epochs",
                    Error::InvalidArgument("set either stride or stride_epochs".into()),
                ))
            }
            (Some(s), None) => Stride::Steps(s),
            (None, Some(k)) => Stride::Epochs(k),
            (None, None) => Stride::Epochs(1.0),
        };
        averagers.push(AveragerSpec::fast_swa(stride));
    }
    if !averagers.is_empty() && schedule.cycle_len().is_none() {
        return Err(Error::MissingKey("cycle_len".into()));
    }

    let train = TrainConfig {
        model,
        schedule,
        momentum: t.or("momentum", 0.9)?,
        weight_decay: t.or("weight_decay", 1e-4)?,
        nesterov: t.flag("nesterov", true)?,
        consistency,
        perturbation,
        alpha: t.or("alpha", 0.97)?,
        averagers,
        epochs: t.require("epochs")?,
        seed: t.or("seed", 0)?,
        labeled_batch: t.or("labeled_batch", 6)?,
        unlabeled_batch: t.or("unlabeled_batch", 20)?,
        snapshot_epochs: t.list("snapshot_epochs")?.unwrap_or_default(),
    };
    if train.labeled_batch == 0 {
        return Err(t.at("labeled_batch", Error::InvalidArgument("must be positive".into())));
    }
    if !(0.0..=1.0).contains(&train.alpha) {
        return Err(t.at("alpha", Error::InvalidArgument("must lie in [0, 1]".into())));
    }

    let reports = match t.raw("reports") {
        None => Vec::new(),
        Some((line, v)) => v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|m| Error::Config { line: *line, message: m }))
            .collect::<Result<_>>()?,
    };

    Ok(ExperimentConfig {
        data,
        train,
        output: PathBuf::from(t.or("output", "run".to_string())?),
        reports,
    })
}

/// Reads and parses a configuration file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Root for relative output paths: the environment override if set,
/// otherwise the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

impl ExperimentConfig {
    /// Output directory, relative paths resolved against [`output_root`].
    pub fn output_dir(&self) -> PathBuf {
        self.resolve_output(&output_root())
    }

    pub fn resolve_output(&self, root: &Path) -> PathBuf {
        if self.output.is_absolute() {
            self.output.clone()
        } else {
            root.join(&self.output)
        }
    }

    /// Applies command-line overrides on top of the file.
    pub fn apply_overrides(
        &mut self,
        swa: bool,
        fast_swa: bool,
        stride: Option<Stride>,
        cycle_len: Option<f64>,
    ) -> Result<()> {
        use crate::averaging::AveragingKind;
        if let Some(c) = cycle_len {
            let s = &self.train.schedule;
            let ell = s.ell().ok_or_else(|| {
                Error::InvalidArgument("--cycle-len needs `ell` in the configuration".into())
            })?;
            self.train.schedule = ScheduleSpec::cyclic(s.eta0, s.ell0, ell, c)?;
        }
        let has_swa = self.train.averagers.iter().any(|a| a.kind == AveragingKind::Swa);
        let has_fast = self.train.averagers.iter().any(|a| a.kind == AveragingKind::FastSwa);
        if swa && !has_swa {
            self.train.averagers.push(AveragerSpec::swa());
        }
        if fast_swa && !has_fast {
            self.train.averagers.push(AveragerSpec::fast_swa(Stride::Epochs(1.0)));
        }
        if let Some(st) = stride {
            let mut found = false;
            for a in self.train.averagers.iter_mut().filter(|a| a.kind == AveragingKind::FastSwa) {
                a.stride = st;
                found = true;
            }
            if !found {
                self.train.averagers.push(AveragerSpec::fast_swa(st));
            }
        }
        if !self.train.averagers.is_empty() && self.train.schedule.cycle_len().is_none() {
            return Err(Error::InvalidArgument("averaging needs a cyclical schedule".into()));
        }
        Ok(())
    }
}
