//! Argument parsing and subcommand dispatch.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use knet_core::data::{
    dataset_to_string, load_dataset, load_embeddings, save_embeddings, LabeledDataset, Provenance,
};
use knet_core::eval::{
    accuracy, accuracy_csv, boundary_raster, curve_csv, AccuracyRow, Classifier,
};
use knet_core::knet::{knet_to_string, load_knet};
use knet_core::knn::{EmbeddingSet, KnnIndex};
use knet_core::nn::{read_dense_net, write_dense_net, DenseNet};
use knet_core::noise::tm_to_string;
use knet_core::prelim::extract_penultimate;

use crate::config::{parse_override, PipelineConfig, System};
use crate::error::{CliError, StageExt};
use crate::pipeline::{self, write_file};

#[derive(Debug, Parser)]
#[command(
    name = "knet",
    version,
    about = "kNN over learned embeddings and its kNet approximation"
)]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override one configuration key; repeatable, applied last.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub test: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub prelim: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// prelim, knn or knet (boundary).
    #[arg(long, global = true)]
    pub system: Option<String>,
    /// k for the boundary subcommand.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sample the 2-D Gaussian toy dataset (toy.part selects train or test).
    GenToy,
    /// Corrupt labels of --input; writes --output plus .flips.csv and .tm files.
    InjectNoise,
    /// Train the preliminary network on --input; writes the model to --output.
    TrainPrelim,
    /// Penultimate embeddings of --input under --prelim, written to --output.
    ExtractFeatures,
    /// kNN accuracy over embeddings: --input (train) vs --test, for eval.ks.
    KnnEval,
    /// Train a kNet on the embeddings in --input; writes --output.
    TrainKnet,
    /// kNet (--model) accuracy on --test embeddings; adds kNN rows when --input is given.
    Eval,
    /// Decision raster of one system over the 2-D input plane.
    Boundary,
    /// kNN vs kNet pdf curves on --test queries, written under --out-dir.
    ComparePdf,
    /// The whole toy pipeline, every artifact under --out-dir.
    ReproduceToy,
    /// Print every configuration key with its default as a Markdown table.
    Defaults,
}

impl Cli {
    /// Flag overrides first, then `--set` entries.
    pub fn overrides(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut out = Vec::new();
        if let Some(seed) = self.seed {
            out.push(("seed".to_string(), seed.to_string()));
        }
        let paths = [
            ("paths.input", &self.input),
            ("paths.output", &self.output),
            ("paths.test", &self.test),
            ("paths.model", &self.model),
            ("paths.prelim", &self.prelim),
            ("paths.out_dir", &self.out_dir),
        ];
        for (key, value) in paths {
            if let Some(p) = value {
                out.push((key.to_string(), p.display().to_string()));
            }
        }
        if let Some(s) = &self.system {
            out.push(("boundary.system".to_string(), s.clone()));
        }
        if let Some(k) = self.k {
            out.push(("boundary.k".to_string(), k.to_string()));
        }
        for entry in &self.set {
            out.push(parse_override(entry)?);
        }
        Ok(out)
    }

    pub fn load_config(&self) -> Result<PipelineConfig, CliError> {
        PipelineConfig::load(self.config.as_deref(), &self.overrides()?)
    }
}

/// Runs one subcommand; returns the artifact paths it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    if cli.command == Command::Defaults {
        print!("{}", crate::config::defaults_table());
        return Ok(Vec::new());
    }
    let cfg = cli.load_config()?;
    execute(cli.command, &cfg)
}

fn need<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| CliError::missing_path(key))
}

fn read_net(path: &Path) -> Result<DenseNet, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| knet_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
        .stage("load")?;
    read_dense_net(&text, 0).stage("load")
}

fn embeddings_as_dataset(set: &EmbeddingSet, path: &Path) -> Result<LabeledDataset, CliError> {
    LabeledDataset::new(
        set.vectors().clone(),
        set.labels().to_vec(),
        set.num_labels(),
        Provenance::Loaded(path.to_path_buf()),
    )
    .stage("load")
}

pub fn execute(command: Command, cfg: &PipelineConfig) -> Result<Vec<PathBuf>, CliError> {
    let p = &cfg.paths;
    match command {
        Command::Defaults => Ok(Vec::new()),
        Command::GenToy => {
            let out = need(&p.output, "paths.output")?;
            let ds = pipeline::gen_toy_part(cfg, cfg.toy_part)?;
            Ok(vec![write_file(out, &dataset_to_string(&ds))?])
        }
        Command::InjectNoise => {
            let out = need(&p.output, "paths.output")?;
            let clean = load_dataset(need(&p.input, "paths.input")?).stage("inject-noise")?;
            let (noisy, flips, tm) = pipeline::inject(cfg, &clean)?;
            eprintln!(
                "inject-noise flipped {} of {} labels",
                flips.flip_count(),
                noisy.len()
            );
            Ok(vec![
                write_file(out, &dataset_to_string(&noisy))?,
                write_file(&out.with_extension("flips.csv"), &flips.to_csv())?,
                write_file(&out.with_extension("tm"), &tm_to_string(&tm))?,
            ])
        }
        Command::TrainPrelim => {
            let out = need(&p.output, "paths.output")?;
            let noisy = load_dataset(need(&p.input, "paths.input")?).stage("train-prelim")?;
            let net = pipeline::prelim(cfg, &noisy)?;
            Ok(vec![write_file(out, &write_dense_net(&net))?])
        }
        Command::ExtractFeatures => {
            let out = need(&p.output, "paths.output")?;
            let net = read_net(need(&p.prelim, "paths.prelim")?)?;
            let ds = load_dataset(need(&p.input, "paths.input")?).stage("extract-features")?;
            let emb = extract_penultimate(&net, &ds).stage("extract-features")?;
            if let Some(parent) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|source| CliError::Write {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            save_embeddings(&emb, out).stage("extract-features")?;
            Ok(vec![out.to_path_buf()])
        }
        Command::KnnEval => {
            let out = need(&p.output, "paths.output")?;
            let index = load_index(cfg, need(&p.input, "paths.input")?)?;
            let test_path = need(&p.test, "paths.test")?;
            let test =
                embeddings_as_dataset(&load_embeddings(test_path).stage("knn-eval")?, test_path)?;
            let rows = knn_rows(&index, &test, &cfg.eval_ks)?;
            Ok(vec![write_file(out, &accuracy_csv(&rows))?])
        }
        Command::TrainKnet => {
            let out = need(&p.output, "paths.output")?;
            let emb = load_embeddings(need(&p.input, "paths.input")?).stage("train-knet")?;
            let model = pipeline::knet(cfg, &emb)?;
            Ok(vec![write_file(out, &knet_to_string(&model))?])
        }
        Command::Eval => {
            let out = need(&p.output, "paths.output")?;
            let model = load_knet(need(&p.model, "paths.model")?).stage("eval")?;
            let test_path = need(&p.test, "paths.test")?;
            let test =
                embeddings_as_dataset(&load_embeddings(test_path).stage("eval")?, test_path)?;
            let mut rows = match &p.input {
                Some(train) => knn_rows(&load_index(cfg, train)?, &test, &cfg.eval_ks)?,
                None => Vec::new(),
            };
            for &k in &cfg.eval_ks {
                rows.push(AccuracyRow {
                    system: "knet".into(),
                    k: Some(k),
                    accuracy: accuracy(&Classifier::knet(&model, k), &test).stage("eval")?,
                    params: model.param_count(),
                });
            }
            Ok(vec![write_file(out, &accuracy_csv(&rows))?])
        }
        Command::Boundary => {
            let out = need(&p.output, "paths.output")?;
            let prelim = read_net(need(&p.prelim, "paths.prelim")?)?;
            let k = cfg.boundary_k;
            let index;
            let model;
            let clf = match cfg.boundary_system {
                System::Prelim => Classifier::net(&prelim),
                System::Knn => {
                    index = load_index(cfg, need(&p.input, "paths.input")?)?;
                    Classifier::knn(&index, k).with_features(&prelim)
                }
                System::Knet => {
                    model = load_knet(need(&p.model, "paths.model")?).stage("boundary")?;
                    Classifier::knet(&model, k).with_features(&prelim)
                }
            };
            let grid = boundary_raster(&clf, cfg.bbox, cfg.raster_width, cfg.raster_height)
                .stage("boundary")?;
            let pixmap = grid.to_pixmap(prelim.output_dim());
            Ok(vec![write_file(out, &pixmap.to_p3())?])
        }
        Command::ComparePdf => {
            let dir = need(&p.out_dir, "paths.out_dir")?;
            let index = load_index(cfg, need(&p.input, "paths.input")?)?;
            let model = load_knet(need(&p.model, "paths.model")?).stage("compare-pdf")?;
            let queries = load_embeddings(need(&p.test, "paths.test")?).stage("compare-pdf")?;
            let curves = pipeline::pdf_curves(&index, &model, &queries, &cfg.curve_ks)?;
            Ok(vec![
                write_file(&dir.join("mad.csv"), &curve_csv(&curves.mad))?,
                write_file(&dir.join("max_pdf_knn.csv"), &curve_csv(&curves.max_knn))?,
                write_file(&dir.join("max_pdf_knet.csv"), &curve_csv(&curves.max_knet))?,
            ])
        }
        Command::ReproduceToy => {
            let dir = need(&p.out_dir, "paths.out_dir")?;
            let run = pipeline::run_toy(cfg)?;
            let report = pipeline::evaluate_toy(cfg, &run)?;
            pipeline::write_toy(dir, &run, &report)
        }
    }
}

fn load_index(cfg: &PipelineConfig, path: &Path) -> Result<KnnIndex, CliError> {
    let emb = load_embeddings(path).stage("load")?;
    KnnIndex::new(emb, cfg.knet_options.metric).stage("load")
}

fn knn_rows(
    index: &KnnIndex,
    test: &LabeledDataset,
    ks: &[usize],
) -> Result<Vec<AccuracyRow>, CliError> {
    ks.iter()
        .map(|&k| {
            Ok(AccuracyRow {
                system: "knn".into(),
                k: Some(k),
                accuracy: accuracy(&Classifier::knn(index, k), test).stage("knn-eval")?,
                params: index.stored_values(),
            })
        })
        .collect()
}
