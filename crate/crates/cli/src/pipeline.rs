//! Pipeline stages shared by the subcommands, and the end-to-end toy run.

use std::fs;
use std::path::{Path, PathBuf};

use knet_core::data::{dataset_to_string, gen_toy, LabeledDataset};
use knet_core::eval::{
    accuracy, accuracy_csv, boundary_raster, curve_csv, max_pdf_curve, memory_report,
    pdf_mad_curve, scatter_pixmap, AccuracyRow, Classifier, CurvePoint, LabelGrid, MemoryReport,
    Pixmap,
};
use knet_core::knet::{knet_to_string, train_knet_with_history, KnetModel};
use knet_core::knn::{EmbeddingSet, KnnIndex};
use knet_core::nn::{write_dense_net, DenseNet};
use knet_core::noise::{
    apply_noise, load_tm, make_cyclic_asym, make_random_asym, make_semantic, make_uniform,
    tm_to_string, FlipRecord, TransitionMatrix,
};
use knet_core::prelim::{extract_penultimate, train_prelim_with_history, PrelimSpec};

use crate::config::{stage, NoiseSpec, PipelineConfig, ToyPart};
use crate::error::{CliError, StageExt};

pub fn gen_toy_part(cfg: &PipelineConfig, part: ToyPart) -> Result<LabeledDataset, CliError> {
    let (n, seed) = match part {
        ToyPart::Train => (cfg.toy_n_per_class, cfg.stage_seed(stage::TOY_TRAIN)),
        ToyPart::Test => (cfg.toy_test_per_class, cfg.stage_seed(stage::TOY_TEST)),
    };
    gen_toy(n, seed, &cfg.toy_classes).stage("gen-toy")
}

pub fn transition_matrix(
    cfg: &PipelineConfig,
    num_labels: usize,
) -> Result<TransitionMatrix, CliError> {
    let r = cfg.noise_rate;
    let tm = match &cfg.noise {
        NoiseSpec::None => Ok(TransitionMatrix::identity(num_labels)),
        NoiseSpec::Uniform => make_uniform(r, num_labels),
        NoiseSpec::RandomAsym => {
            make_random_asym(r, num_labels, cfg.stage_seed(stage::NOISE_MATRIX))
        }
        NoiseSpec::Cyclic => make_cyclic_asym(r, num_labels),
        NoiseSpec::Semantic(pairs) => make_semantic(pairs, r, num_labels),
        NoiseSpec::File(path) => load_tm(path),
    };
    tm.stage("inject-noise")
}

pub fn inject(
    cfg: &PipelineConfig,
    clean: &LabeledDataset,
) -> Result<(LabeledDataset, FlipRecord, TransitionMatrix), CliError> {
    let tm = transition_matrix(cfg, clean.num_labels())?;
    let (noisy, flips) =
        apply_noise(clean, &tm, cfg.stage_seed(stage::NOISE)).stage("inject-noise")?;
    Ok((noisy, flips, tm))
}

pub fn prelim(cfg: &PipelineConfig, noisy: &LabeledDataset) -> Result<DenseNet, CliError> {
    let spec = PrelimSpec {
        input_dim: noisy.dim(),
        ..cfg.prelim_spec(noisy.num_labels())
    };
    let (net, history) =
        train_prelim_with_history(noisy, &spec, &cfg.prelim_train).stage("train-prelim")?;
    log_history("train-prelim", &history);
    Ok(net)
}

pub fn knet(cfg: &PipelineConfig, embeddings: &EmbeddingSet) -> Result<KnetModel, CliError> {
    let (model, history) =
        train_knet_with_history(embeddings, cfg.knet_mode, &cfg.knet_train, cfg.knet_options)
            .stage("train-knet")?;
    log_history("train-knet", &history);
    Ok(model)
}

/// Epoch losses on stderr: every tenth epoch and the last one.
fn log_history(stage: &str, history: &[f64]) {
    for (i, loss) in history.iter().enumerate() {
        if i % 10 == 0 || i + 1 == history.len() {
            eprintln!("{stage} epoch {:>4} loss {loss:.6}", i + 1);
        }
    }
}

/// Everything the toy run trains.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub clean: LabeledDataset,
    pub noisy: LabeledDataset,
    pub flips: FlipRecord,
    pub tm: TransitionMatrix,
    pub test: LabeledDataset,
    pub prelim: DenseNet,
    pub train_emb: EmbeddingSet,
    pub test_emb: EmbeddingSet,
    pub index: KnnIndex,
    pub knet: KnetModel,
}

pub fn run_toy(cfg: &PipelineConfig) -> Result<ToyRun, CliError> {
    let clean = gen_toy_part(cfg, ToyPart::Train)?;
    let test = gen_toy_part(cfg, ToyPart::Test)?;
    let (noisy, flips, tm) = inject(cfg, &clean)?;
    let prelim = prelim(cfg, &noisy)?;
    let train_emb = extract_penultimate(&prelim, &noisy).stage("extract-features")?;
    let test_emb = extract_penultimate(&prelim, &test).stage("extract-features")?;
    let index = KnnIndex::new(train_emb.clone(), cfg.knet_options.metric).stage("knn-eval")?;
    let knet = knet(cfg, &train_emb)?;
    Ok(ToyRun {
        clean,
        noisy,
        flips,
        tm,
        test,
        prelim,
        train_emb,
        test_emb,
        index,
        knet,
    })
}

/// Accuracy rows for the preliminary net and for kNN / kNet at every `ks`.
pub fn accuracy_rows(
    prelim: &DenseNet,
    index: &KnnIndex,
    knet: Option<&KnetModel>,
    test: &LabeledDataset,
    ks: &[usize],
) -> Result<Vec<AccuracyRow>, CliError> {
    let mut rows = vec![AccuracyRow {
        system: "prelim".into(),
        k: None,
        accuracy: accuracy(&Classifier::net(prelim), test).stage("eval")?,
        params: prelim.param_count(),
    }];
    for &k in ks {
        rows.push(AccuracyRow {
            system: "knn".into(),
            k: Some(k),
            accuracy: accuracy(&Classifier::knn(index, k).with_features(prelim), test)
                .stage("eval")?,
            params: index.stored_values(),
        });
    }
    if let Some(model) = knet {
        for &k in ks {
            rows.push(AccuracyRow {
                system: "knet".into(),
                k: Some(k),
                accuracy: accuracy(&Classifier::knet(model, k).with_features(prelim), test)
                    .stage("eval")?,
                params: model.param_count(),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct PdfCurves {
    pub mad: Vec<CurvePoint>,
    pub max_knn: Vec<CurvePoint>,
    pub max_knet: Vec<CurvePoint>,
}

pub fn pdf_curves(
    index: &KnnIndex,
    knet: &KnetModel,
    queries: &EmbeddingSet,
    ks: &[usize],
) -> Result<PdfCurves, CliError> {
    let q = queries.vectors();
    Ok(PdfCurves {
        mad: pdf_mad_curve(index, knet, q, ks).stage("compare-pdf")?,
        max_knn: max_pdf_curve(index, q, ks).stage("compare-pdf")?,
        max_knet: max_pdf_curve(knet, q, ks).stage("compare-pdf")?,
    })
}

/// Named decision rasters; every grid is in input space.
#[derive(Debug, Clone)]
pub struct ToyReport {
    pub accuracy: Vec<AccuracyRow>,
    pub curves: PdfCurves,
    pub memory: MemoryReport,
    pub scatter: Pixmap,
    pub rasters: Vec<(String, LabelGrid)>,
}

pub fn evaluate_toy(cfg: &PipelineConfig, run: &ToyRun) -> Result<ToyReport, CliError> {
    let accuracy = accuracy_rows(
        &run.prelim,
        &run.index,
        Some(&run.knet),
        &run.test,
        &cfg.eval_ks,
    )?;
    let curves = pdf_curves(&run.index, &run.knet, &run.test_emb, &cfg.curve_ks)?;
    let (w, h, bbox) = (cfg.raster_width, cfg.raster_height, cfg.bbox);
    let scatter = scatter_pixmap(&run.noisy, bbox, w, h).stage("boundary")?;

    let mut letters = (b'b'..=b'z').map(char::from);
    let mut rasters = Vec::new();
    let mut push = |name: String, clf: Classifier<'_>| -> Result<(), CliError> {
        let letter = letters.next().unwrap_or('z');
        let grid = boundary_raster(&clf, bbox, w, h).stage("boundary")?;
        rasters.push((format!("{letter}_{name}"), grid));
        Ok(())
    };
    for &k in &cfg.eval_ks {
        push(
            format!("knn_k{k}"),
            Classifier::knn(&run.index, k).with_features(&run.prelim),
        )?;
    }
    push("prelim".into(), Classifier::net(&run.prelim))?;
    for &k in &cfg.eval_ks {
        push(
            format!("knet_k{k}"),
            Classifier::knet(&run.knet, k).with_features(&run.prelim),
        )?;
    }
    Ok(ToyReport {
        accuracy,
        curves,
        memory: memory_report(&run.index, &run.knet, &run.prelim),
        scatter,
        rasters,
    })
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<PathBuf, CliError> {
    let err = |source| CliError::Write {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(err)?;
    }
    fs::write(path, contents).map_err(err)?;
    Ok(path.to_path_buf())
}

/// Writes every toy artifact under `dir` and returns the paths in write order.
pub fn write_toy(dir: &Path, run: &ToyRun, report: &ToyReport) -> Result<Vec<PathBuf>, CliError> {
    let num_labels = run.noisy.num_labels();
    let mut files: Vec<(String, String)> = vec![
        ("train_clean.ds".into(), dataset_to_string(&run.clean)),
        ("train_noisy.ds".into(), dataset_to_string(&run.noisy)),
        ("test.ds".into(), dataset_to_string(&run.test)),
        ("noise.tm".into(), tm_to_string(&run.tm)),
        ("flips.csv".into(), run.flips.to_csv()),
        ("prelim.net".into(), write_dense_net(&run.prelim)),
        ("model.knet".into(), knet_to_string(&run.knet)),
        ("a_noisy.ppm".into(), report.scatter.to_p3()),
    ];
    for (name, grid) in &report.rasters {
        files.push((format!("{name}.ppm"), grid.to_pixmap(num_labels).to_p3()));
    }
    files.extend([
        ("accuracy.csv".into(), accuracy_csv(&report.accuracy)),
        ("mad.csv".into(), curve_csv(&report.curves.mad)),
        ("max_pdf_knn.csv".into(), curve_csv(&report.curves.max_knn)),
        (
            "max_pdf_knet.csv".into(),
            curve_csv(&report.curves.max_knet),
        ),
        ("memory.csv".into(), report.memory.to_csv()),
    ]);
    files
        .iter()
        .map(|(name, contents)| write_file(&dir.join(name), contents))
        .collect()
}
