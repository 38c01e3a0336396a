//! `key = value` pipeline configuration.
//!
//! Every accepted key, its default and a one-line description live in
//! [`KEYS`]. Files may contain blank lines and `#` comments; unknown keys are
//! rejected. Command-line overrides are applied after the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use knet_core::data::GaussianSpec;
use knet_core::eval::BBox;
use knet_core::knet::{KTrainMode, KnetOptions};
use knet_core::knn::Metric;
use knet_core::nn::{Loss, TrainConfig};
use knet_core::prelim::PrelimSpec;
use knet_core::rng::derive_seed;

use crate::error::CliError;

/// `(key, default, description)` for every configuration key.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "seed",
        "0",
        "base seed; every stage derives its own stream from it",
    ),
    ("toy.n_per_class", "1000", "training samples per toy class"),
    (
        "toy.test_per_class",
        "1000",
        "clean test samples per toy class",
    ),
    (
        "toy.means",
        "0.1,0.1;0.8,0.1;0.5,0.5",
        "class means, `x,y` separated by `;`",
    ),
    (
        "toy.stds",
        "0.1,0.1;0.1,0.1;0.1,0.1",
        "per-axis standard deviations, same layout as toy.means",
    ),
    (
        "toy.part",
        "train",
        "which toy sample gen-toy writes: train or test",
    ),
    (
        "noise.kind",
        "cyclic",
        "none, uniform, random_asym, cyclic, semantic or file",
    ),
    ("noise.rate", "0.3", "noise rate r in [0, 1]"),
    ("noise.pairs", "", "semantic pairs `a:b`, comma separated"),
    (
        "noise.file",
        "",
        "transition matrix file for noise.kind = file",
    ),
    (
        "prelim.hidden",
        "16,8",
        "hidden layer widths of the preliminary network",
    ),
    ("prelim.lr", "0.1", "preliminary network learning rate"),
    ("prelim.epochs", "200", "preliminary network epochs"),
    ("prelim.batch_size", "32", "preliminary network batch size"),
    ("knet.mode", "random", "random (k drawn per batch) or fixed"),
    ("knet.k_min", "1", "smallest k drawn in random mode"),
    (
        "knet.k_max",
        "101",
        "largest k drawn in random mode; scales the k input",
    ),
    ("knet.k", "1", "k used in fixed mode"),
    ("knet.lr", "1.0", "kNet learning rate"),
    ("knet.epochs", "200", "kNet epochs"),
    ("knet.batch_size", "64", "kNet batch size"),
    ("knet.loss", "ce", "ce (cross-entropy) or kl"),
    (
        "knet.exclude_self",
        "false",
        "drop each training sample from its own neighbor list",
    ),
    (
        "train.bn_momentum",
        "0.9",
        "batch-norm running-average momentum",
    ),
    ("train.bn_epsilon", "1e-5", "batch-norm variance epsilon"),
    (
        "train.init_scale",
        "1.0",
        "weights start uniform in +-init_scale/sqrt(fan_in)",
    ),
    ("knn.metric", "l1", "l1 or l2"),
    (
        "eval.ks",
        "1,19,49",
        "k values for accuracy tables and rasters",
    ),
    (
        "eval.curve_ks",
        "1,11,21,31,41,51,61,71,81,91,101",
        "k values for the kNN-vs-kNet curves",
    ),
    (
        "raster.bbox",
        "-0.2,-0.2,1.2,1.2",
        "xmin,ymin,xmax,ymax of decision rasters",
    ),
    ("raster.width", "300", "raster width in cells"),
    ("raster.height", "300", "raster height in cells"),
    (
        "boundary.system",
        "knet",
        "prelim, knn or knet for the boundary subcommand",
    ),
    ("boundary.k", "19", "k for the boundary subcommand"),
    ("paths.input", "", "primary input file"),
    ("paths.output", "", "primary output file"),
    ("paths.test", "", "test set (dataset or embeddings)"),
    (
        "paths.model",
        "",
        "model file (kNet, or the preliminary net for extract-features)",
    ),
    ("paths.prelim", "", "preliminary network model file"),
    ("paths.out_dir", "", "output directory"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    None,
    Uniform,
    RandomAsym,
    Cyclic,
    Semantic(Vec<(usize, usize)>),
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    Prelim,
    Knn,
    Knet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyPart {
    Train,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub prelim: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub toy_n_per_class: usize,
    pub toy_test_per_class: usize,
    pub toy_classes: Vec<GaussianSpec>,
    pub toy_part: ToyPart,
    pub noise: NoiseSpec,
    pub noise_rate: f64,
    pub prelim_hidden: Vec<usize>,
    pub prelim_train: TrainConfig,
    pub knet_mode: KTrainMode,
    pub knet_train: TrainConfig,
    pub knet_options: KnetOptions,
    pub eval_ks: Vec<usize>,
    pub curve_ks: Vec<usize>,
    pub bbox: BBox,
    pub raster_width: usize,
    pub raster_height: usize,
    pub boundary_system: System,
    pub boundary_k: usize,
    pub paths: Paths,
}

/// Stream ids for [`PipelineConfig::stage_seed`].
pub mod stage {
    pub const TOY_TRAIN: u64 = 1;
    pub const TOY_TEST: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const PRELIM: u64 = 4;
    pub const KNET: u64 = 5;
    pub const NOISE_MATRIX: u64 = 6;
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::from_map(&BTreeMap::new()).expect("defaults are valid")
    }
}

impl PipelineConfig {
    pub fn stage_seed(&self, stage: u64) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn prelim_spec(&self, num_labels: usize) -> PrelimSpec {
        PrelimSpec {
            input_dim: 2,
            hidden: self.prelim_hidden.clone(),
            num_labels,
        }
    }

    /// Reads `path` (when given), applies `overrides` in order, validates.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut map = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config {
                    key: "--config".into(),
                    message: format!("cannot read {}: {e}", p.display()),
                })?;
                parse_lines(&text)?
            }
            None => BTreeMap::new(),
        };
        for (key, value) in overrides {
            check_key(key)?;
            map.insert(key.clone(), value.clone());
        }
        Self::from_map(&map)
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let r = Reader { map };
        let train_common = |prefix: &str, seed: u64| -> Result<TrainConfig, CliError> {
            let cfg = TrainConfig {
                learning_rate: r.positive_f64(&format!("{prefix}.lr"))?,
                batch_size: r.positive_usize(&format!("{prefix}.batch_size"))?,
                epochs: r.parse(&format!("{prefix}.epochs"))?,
                seed,
                loss: Loss::CrossEntropy,
                bn_momentum: r.parse("train.bn_momentum")?,
                bn_epsilon: r.positive_f64("train.bn_epsilon")?,
                weight_init_scale: r.positive_f64("train.init_scale")?,
            };
            if !(cfg.bn_momentum > 0.0 && cfg.bn_momentum < 1.0) {
                return Err(r.error("train.bn_momentum", "must lie in (0, 1)"));
            }
            Ok(cfg)
        };

        let seed: u64 = r.parse("seed")?;
        let means = r.pairs_of_f64("toy.means")?;
        let stds = r.pairs_of_f64("toy.stds")?;
        if means.len() != stds.len() {
            return Err(r.error("toy.stds", "needs one entry per class in toy.means"));
        }
        if means.is_empty() {
            return Err(r.error("toy.means", "needs at least one class"));
        }
        let toy_classes = means
            .iter()
            .zip(&stds)
            .map(|(m, s)| GaussianSpec::new(*m, *s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| r.error("toy.stds", &e.to_string()))?;
        let toy_part = match r.raw("toy.part") {
            "train" => ToyPart::Train,
            "test" => ToyPart::Test,
            other => {
                return Err(r.error(
                    "toy.part",
                    &format!("expected train or test, got `{other}`"),
                ))
            }
        };

        let noise_rate: f64 = r.parse("noise.rate")?;
        if !(0.0..=1.0).contains(&noise_rate) {
            return Err(r.error("noise.rate", &format!("{noise_rate} is outside [0, 1]")));
        }
        let noise = match r.raw("noise.kind") {
            "none" => NoiseSpec::None,
            "uniform" => NoiseSpec::Uniform,
            "random_asym" => NoiseSpec::RandomAsym,
            "cyclic" => NoiseSpec::Cyclic,
            "semantic" => NoiseSpec::Semantic(r.label_pairs("noise.pairs")?),
            "file" => match r.raw("noise.file") {
                "" => return Err(r.error("noise.file", "required when noise.kind = file")),
                p => NoiseSpec::File(PathBuf::from(p)),
            },
            other => return Err(r.error("noise.kind", &format!("unknown noise kind `{other}`"))),
        };

        let prelim_hidden = r.usize_list("prelim.hidden")?;
        if prelim_hidden.is_empty() || prelim_hidden.contains(&0) {
            return Err(r.error("prelim.hidden", "needs at least one positive width"));
        }
        let prelim_train = train_common("prelim", derive_seed(seed, stage::PRELIM))?;

        let knet_mode = match r.raw("knet.mode") {
            "random" => {
                let k_min = r.positive_usize("knet.k_min")?;
                let k_max = r.positive_usize("knet.k_max")?;
                if k_min > k_max {
                    return Err(r.error("knet.k_min", "must not exceed knet.k_max"));
                }
                KTrainMode::RandomK { k_min, k_max }
            }
            "fixed" => KTrainMode::FixedK(r.positive_usize("knet.k")?),
            other => {
                return Err(r.error(
                    "knet.mode",
                    &format!("expected random or fixed, got `{other}`"),
                ))
            }
        };
        let mut knet_train = train_common("knet", derive_seed(seed, stage::KNET))?;
        knet_train.loss =
            Loss::from_str(r.raw("knet.loss")).map_err(|e| r.error("knet.loss", &e.to_string()))?;
        let exclude_self: bool = r.parse("knet.exclude_self")?;
        let metric = Metric::from_str(r.raw("knn.metric"))
            .map_err(|e| r.error("knn.metric", &e.to_string()))?;

        let eval_ks = r.usize_list("eval.ks")?;
        let curve_ks = r.usize_list("eval.curve_ks")?;
        for (key, ks) in [("eval.ks", &eval_ks), ("eval.curve_ks", &curve_ks)] {
            if ks.is_empty() || ks.contains(&0) {
                return Err(r.error(key, "needs at least one k, all >= 1"));
            }
        }
        let b = r.f64_list("raster.bbox")?;
        let bbox = match b.as_slice() {
            [x0, y0, x1, y1] => {
                BBox::new(*x0, *y0, *x1, *y1).map_err(|e| r.error("raster.bbox", &e.to_string()))?
            }
            _ => return Err(r.error("raster.bbox", "expected xmin,ymin,xmax,ymax")),
        };
        let boundary_system = match r.raw("boundary.system") {
            "prelim" => System::Prelim,
            "knn" => System::Knn,
            "knet" => System::Knet,
            other => return Err(r.error("boundary.system", &format!("unknown system `{other}`"))),
        };
        let path = |key: &str| match r.raw(key) {
            "" => None,
            p => Some(PathBuf::from(p)),
        };

        Ok(Self {
            seed,
            toy_n_per_class: r.positive_usize("toy.n_per_class")?,
            toy_test_per_class: r.positive_usize("toy.test_per_class")?,
            toy_classes,
            toy_part,
            noise,
            noise_rate,
            prelim_hidden,
            prelim_train,
            knet_mode,
            knet_train,
            knet_options: KnetOptions {
                include_self: !exclude_self,
                metric,
            },
            eval_ks,
            curve_ks,
            bbox,
            raster_width: r.positive_usize("raster.width")?,
            raster_height: r.positive_usize("raster.height")?,
            boundary_system,
            boundary_k: r.positive_usize("boundary.k")?,
            paths: Paths {
                input: path("paths.input"),
                output: path("paths.output"),
                test: path("paths.test"),
                model: path("paths.model"),
                prelim: path("paths.prelim"),
                out_dir: path("paths.out_dir"),
            },
        })
    }
}

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

fn check_key(key: &str) -> Result<(), CliError> {
    if default_of(key).is_none() {
        return Err(CliError::Config {
            key: key.to_string(),
            message: "unknown key".into(),
        });
    }
    Ok(())
}

/// Parses `key = value` lines into a map; later duplicates win.
pub fn parse_lines(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config {
                key: format!("line {}", i + 1),
                message: format!("expected `key = value`, found `{line}`"),
            });
        };
        let key = key.trim();
        check_key(key)?;
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Splits a `key=value` command-line override.
pub fn parse_override(text: &str) -> Result<(String, String), CliError> {
    let (key, value) = text.split_once('=').ok_or_else(|| CliError::Config {
        key: text.to_string(),
        message: "override must look like key=value".into(),
    })?;
    Ok((key.trim().to_string(), value.trim().to_string()))
}

struct Reader<'a> {
    map: &'a BTreeMap<String, String>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.map
            .get(key)
            .map(String::as_str)
            .or_else(|| default_of(key))
            .unwrap_or_else(|| panic!("`{key}` is missing from KEYS"))
    }

    fn error(&self, key: &str, message: &str) -> CliError {
        CliError::Config {
            key: key.to_string(),
            message: message.to_string(),
        }
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| {
            self.error(
                key,
                &format!("cannot parse `{raw}` as {}", std::any::type_name::<T>()),
            )
        })
    }

    fn positive_usize(&self, key: &str) -> Result<usize, CliError> {
        let v: usize = self.parse(key)?;
        if v == 0 {
            return Err(self.error(key, "must be at least 1"));
        }
        Ok(v)
    }

    fn positive_f64(&self, key: &str) -> Result<f64, CliError> {
        let v: f64 = self.parse(key)?;
        if v.is_nan() || v <= 0.0 || v.is_infinite() {
            return Err(self.error(key, &format!("{v} must be positive")));
        }
        Ok(v)
    }

    fn list<T: FromStr>(&self, key: &str, sep: char) -> Result<Vec<T>, CliError> {
        let raw = self.raw(key);
        raw.split(sep)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| self.error(key, &format!("cannot parse `{s}` in `{raw}`")))
            })
            .collect()
    }

    fn usize_list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        self.list(key, ',')
    }

    fn f64_list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        self.list(key, ',')
    }

    fn pairs_of_f64(&self, key: &str) -> Result<Vec<[f64; 2]>, CliError> {
        self.raw(key)
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|pair| {
                let v: Vec<f64> = pair
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| self.error(key, &format!("cannot parse `{pair}`")))?;
                match v.as_slice() {
                    [a, b] => Ok([*a, *b]),
                    _ => Err(self.error(key, &format!("`{pair}` is not an x,y pair"))),
                }
            })
            .collect()
    }

    fn label_pairs(&self, key: &str) -> Result<Vec<(usize, usize)>, CliError> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|pair| {
                let (a, b) = pair
                    .split_once(':')
                    .ok_or_else(|| self.error(key, &format!("`{pair}` is not a:b")))?;
                let a = a
                    .trim()
                    .parse()
                    .map_err(|_| self.error(key, &format!("bad class in `{pair}`")))?;
                let b = b
                    .trim()
                    .parse()
                    .map_err(|_| self.error(key, &format!("bad class in `{pair}`")))?;
                Ok((a, b))
            })
            .collect()
    }
}

/// Markdown table of every key and its default.
pub fn defaults_table() -> String {
    let mut out = String::from("| key | default | meaning |\n|---|---|---|\n");
    for (k, d, desc) in KEYS {
        out.push_str(&format!("| `{k}` | `{d}` | {desc} |\n"));
    }
    out
}
