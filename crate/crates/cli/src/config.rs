//! Line-oriented run configuration: `[section]` headers and `key = value`
//! pairs. Blank lines and lines starting with `#` are ignored; unknown
//! sections or keys are errors.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mtlseg_core::data::{AugmentPolicy, SceneConfig, SplitSpec, Subset};
use mtlseg_core::train::{Seeds, TrainConfig, Weighting};
use mtlseg_core::{ModelConfig, Sgd, TaskSet, TaskWeights};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`")]
    InvalidValue { line: usize, key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightingMode {
    Fixed,
    Uncertainty,
}

impl fmt::Display for WeightingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightingMode::Fixed => "fixed",
            WeightingMode::Uncertainty => "uncertainty",
        })
    }
}

impl FromStr for WeightingMode {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "fixed" => Ok(WeightingMode::Fixed),
            "uncertainty" => Ok(WeightingMode::Uncertainty),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    /// Dataset directory read by `train`, `eval`, `sweep` and `ablation`.
    pub dataset: Option<PathBuf>,
    pub count: usize,
    pub scene: SceneConfig,
    pub split: SplitSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub seg_skip: bool,
    pub bnd_skip: bool,
    pub rec_skip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub tasks: TaskSet,
    pub weighting: WeightingMode,
    pub weights: TaskWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub crop_size: Option<usize>,
    pub augment: bool,
    pub seeds: Seeds,
    pub threshold: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub subset: Subset,
    pub postprocess: bool,
    pub se_radius: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSection {
    pub w_bnd: Vec<f64>,
    pub w_rec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for Config {
    fn default() -> Self {
        let sgd = Sgd::default();
        Config {
            data: DataSection {
                dataset: None,
                count: 64,
                scene: SceneConfig::default(),
                split: SplitSpec {
                    seed: 7,
                    ..SplitSpec::default()
                },
            },
            model: ModelSection {
                widths: vec![32, 16, 8],
                seg_skip: true,
                bnd_skip: true,
                rec_skip: false,
            },
            train: TrainSection {
                tasks: TaskSet::S_B_R,
                weighting: WeightingMode::Uncertainty,
                weights: TaskWeights {
                    seg: 1.0,
                    bnd: 1.0,
                    rec: 1.0,
                },
                epochs: 300,
                batch_size: 4,
                lr: sgd.lr,
                momentum: sgd.momentum,
                weight_decay: sgd.weight_decay,
                crop_size: None,
                augment: false,
                seeds: Seeds::all(0),
                threshold: 0.5,
            },
            eval: EvalSection {
                subset: Subset::Test,
                postprocess: false,
                se_radius: 1,
            },
            sweep: SweepSection {
                w_bnd: vec![0.0, 0.5, 1.0],
                w_rec: vec![0.0, 0.5, 1.0],
            },
        }
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn parse_list<T: FromStr>(s: &str) -> Option<Vec<T>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|v| v.trim().parse().ok()).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parse config text; keys not mentioned keep their defaults.
    /// Parses and validates config text. `#` starts a comment at the start of
    /// a line or after whitespace.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: line_no,
                    msg: format!("unterminated section header `{line}`"),
                })?;
                let name = name.trim();
                if !["data", "model", "train", "eval", "sweep"].contains(&name) {
                    return Err(ConfigError::Syntax {
                        line: line_no,
                        msg: format!("unknown section [{name}]"),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section.as_deref().ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                msg: "key outside of any section".into(),
            })?;
            if !seen.insert((sec.to_string(), key.to_string())) {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    msg: format!("duplicate key `{key}` in [{sec}]"),
                });
            }
            cfg.set(sec, key, value, line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        let invalid = || ConfigError::InvalidValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
        };
        macro_rules! num {
            () => {
                value.parse().map_err(|_| invalid())?
            };
        }
        let flag = || parse_bool(value).ok_or_else(invalid);
        let d = &mut self.data;
        let m = &mut self.model;
        let t = &mut self.train;
        match (section, key) {
            ("data", "dataset") => d.dataset = Some(PathBuf::from(value)),
            ("data", "count") => d.count = num!(),
            ("data", "size") => d.scene.size = num!(),
            ("data", "channels") => d.scene.channels = num!(),
            ("data", "buildings_min") => d.scene.buildings.0 = num!(),
            ("data", "buildings_max") => d.scene.buildings.1 = num!(),
            ("data", "building_size_min") => d.scene.building_size.0 = num!(),
            ("data", "building_size_max") => d.scene.building_size.1 = num!(),
            ("data", "texture_amplitude") => d.scene.texture_amplitude = num!(),
            ("data", "boundary_radius") => d.scene.boundary_radius = num!(),
            ("data", "rotated_fraction") => d.scene.rotated_fraction = num!(),
            ("data", "seed") => d.scene.seed = num!(),
            ("data", "train_ratio") => d.split.ratios[0] = num!(),
            ("data", "val_ratio") => d.split.ratios[1] = num!(),
            ("data", "test_ratio") => d.split.ratios[2] = num!(),
            ("data", "split_seed") => d.split.seed = num!(),
            ("model", "widths") => m.widths = parse_list(value).ok_or_else(invalid)?,
            ("model", "seg_skip") => m.seg_skip = flag()?,
            ("model", "bnd_skip") => m.bnd_skip = flag()?,
            ("model", "rec_skip") => m.rec_skip = flag()?,
            ("train", "tasks") => t.tasks = TaskSet::parse(value).ok_or_else(invalid)?,
            ("train", "weighting") => t.weighting = value.parse().map_err(|_| invalid())?,
            ("train", "w_seg") => t.weights.seg = num!(),
            ("train", "w_bnd") => t.weights.bnd = num!(),
            ("train", "w_rec") => t.weights.rec = num!(),
            ("train", "epochs") => t.epochs = num!(),
            ("train", "batch_size") => t.batch_size = num!(),
            ("train", "lr") => t.lr = num!(),
            ("train", "momentum") => t.momentum = num!(),
            ("train", "weight_decay") => t.weight_decay = num!(),
            ("train", "crop_size") => {
                t.crop_size = if value == "full" { None } else { Some(num!()) };
            }
            ("train", "augment") => t.augment = flag()?,
            ("train", "model_seed") => t.seeds.model = num!(),
            ("train", "data_seed") => t.seeds.data = num!(),
            ("train", "shuffle_seed") => t.seeds.shuffle = num!(),
            ("train", "threshold") => t.threshold = num!(),
            ("eval", "subset") => self.eval.subset = value.parse().map_err(|_| invalid())?,
            ("eval", "postprocess") => self.eval.postprocess = flag()?,
            ("eval", "se_radius") => self.eval.se_radius = num!(),
            ("sweep", "w_bnd") => self.sweep.w_bnd = parse_list(value).ok_or_else(invalid)?,
            ("sweep", "w_rec") => self.sweep.w_rec = parse_list(value).ok_or_else(invalid)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    section: section.to_string(),
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: &dyn fmt::Display| ConfigError::Invalid(e.to_string());
        self.data.scene.validate().map_err(|e| invalid(&e))?;
        self.data.split.validate().map_err(|e| invalid(&e))?;
        self.model_config().validate().map_err(|e| invalid(&e))?;
        if self.train.weighting == WeightingMode::Fixed {
            self.train_config().validate().map_err(|e| invalid(&e))?;
        }
        Ok(())
    }

    /// Overrides the scene, split, model, data and shuffle seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.scene.seed = seed;
        self.data.split.seed = seed;
        self.train.seeds = Seeds::all(seed);
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seg_skip: self.model.seg_skip,
            bnd_skip: self.model.bnd_skip,
            rec_skip: self.model.rec_skip,
            ..ModelConfig::with_widths(self.data.scene.channels, self.model.widths.clone())
        }
    }

    /// Weighting for [`Self::train_config`]. Fixed weights of tasks outside
    /// the task set are zeroed.
    pub fn weighting(&self) -> Weighting {
        let t = &self.train;
        match t.weighting {
            WeightingMode::Fixed => Weighting::Fixed(TaskWeights {
                seg: t.weights.seg,
                bnd: if t.tasks.boundary { t.weights.bnd } else { 0.0 },
                rec: if t.tasks.reconstruction { t.weights.rec } else { 0.0 },
            }),
            WeightingMode::Uncertainty => Weighting::Uncertainty,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            tasks: t.tasks,
            weighting: self.weighting(),
            model: self.model_config(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: Sgd {
                lr: t.lr,
                momentum: t.momentum,
                weight_decay: t.weight_decay,
            },
            crop_size: t.crop_size,
            augment: t.augment.then(|| AugmentPolicy {
                boundary_radius: self.data.scene.boundary_radius,
                ..AugmentPolicy::default()
            }),
            seeds: t.seeds.clone(),
            threshold: t.threshold,
        }
    }

    /// Full config text; [`Config::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = |name: &str, pairs: Vec<(&str, String)>| {
            writeln!(out, "[{name}]").unwrap();
            for (k, v) in pairs {
                writeln!(out, "{k} = {v}").unwrap();
            }
            out.push('\n');
        };
        let d = &self.data;
        let mut data = Vec::new();
        if let Some(p) = &d.dataset {
            data.push(("dataset", p.display().to_string()));
        }
        data.extend([
            ("count", d.count.to_string()),
            ("size", d.scene.size.to_string()),
            ("channels", d.scene.channels.to_string()),
            ("buildings_min", d.scene.buildings.0.to_string()),
            ("buildings_max", d.scene.buildings.1.to_string()),
            ("building_size_min", d.scene.building_size.0.to_string()),
            ("building_size_max", d.scene.building_size.1.to_string()),
            ("texture_amplitude", d.scene.texture_amplitude.to_string()),
            ("boundary_radius", d.scene.boundary_radius.to_string()),
            ("rotated_fraction", d.scene.rotated_fraction.to_string()),
            ("seed", d.scene.seed.to_string()),
            ("train_ratio", d.split.ratios[0].to_string()),
            ("val_ratio", d.split.ratios[1].to_string()),
            ("test_ratio", d.split.ratios[2].to_string()),
            ("split_seed", d.split.seed.to_string()),
        ]);
        section("data", data);
        let m = &self.model;
        section(
            "model",
            vec![
                ("widths", join(&m.widths)),
                ("seg_skip", m.seg_skip.to_string()),
                ("bnd_skip", m.bnd_skip.to_string()),
                ("rec_skip", m.rec_skip.to_string()),
            ],
        );
        let t = &self.train;
        section(
            "train",
            vec![
                ("tasks", t.tasks.to_string()),
                ("weighting", t.weighting.to_string()),
                ("w_seg", t.weights.seg.to_string()),
                ("w_bnd", t.weights.bnd.to_string()),
                ("w_rec", t.weights.rec.to_string()),
                ("epochs", t.epochs.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("lr", t.lr.to_string()),
                ("momentum", t.momentum.to_string()),
                ("weight_decay", t.weight_decay.to_string()),
                ("crop_size", t.crop_size.map_or("full".into(), |c| c.to_string())),
                ("augment", t.augment.to_string()),
                ("model_seed", t.seeds.model.to_string()),
                ("data_seed", t.seeds.data.to_string()),
                ("shuffle_seed", t.seeds.shuffle.to_string()),
                ("threshold", t.threshold.to_string()),
            ],
        );
        section(
            "eval",
            vec![
                ("subset", self.eval.subset.to_string()),
                ("postprocess", self.eval.postprocess.to_string()),
                ("se_radius", self.eval.se_radius.to_string()),
            ],
        );
        section(
            "sweep",
            vec![("w_bnd", join(&self.sweep.w_bnd)), ("w_rec", join(&self.sweep.w_rec))],
        );
        out.pop();
        out
    }
}

fn strip_comment(line: &str) -> &str {
    if line.trim_start().starts_with('#') {
        return "";
    }
    match line.find(" #").or_else(|| line.find("\t#")) {
        Some(i) => &line[..i],
        None => line,
    }
}
