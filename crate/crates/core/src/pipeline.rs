//! The batch commands: train, index, generate, evaluate.
//!
//! Checkpoints, the reference index and concept reference patches live
//! under the checkpoint directory and are shared by every run; each run
//! writes its results and reports under its own output directory.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::attribution::{export_references, relevance_maximization_many, PatchManifest};
use crate::checkpoint::{load_codec, load_denoiser, save_codec};
use crate::classifier::{train_classifier, ClassifierModel, ClassifierTrainReport};
use crate::config::{CodecKind, RunConfig};
use crate::data::{load_image_folder, synthetic_dataset, Dataset};
use crate::diffusion::{train_autoencoder, train_denoiser, LatentCodec, MlpDenoiser, NoiseSchedule, TrainReport};
use crate::error::{Error, Result};
use crate::guidance::{CounterfactualResult, Generator, ResultRecord, SampleMetrics, TargetSource, RECORD_FILE};
use crate::metrics::{comparison_table, evaluate_run, MetricReport};
use crate::target::{EncodingMode, IndexManifest, ReferenceIndex};

/// File locations derived from a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Layout {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            checkpoints: config.paths.checkpoints.clone(),
            output: config.paths.output.clone(),
        }
    }

    pub fn classifier(&self) -> PathBuf {
        self.checkpoints.join("classifier.ccft")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.checkpoints.join("denoiser.ccft")
    }

    pub fn codec(&self) -> PathBuf {
        self.checkpoints.join("codec.ccft")
    }

    pub fn train_log(&self) -> PathBuf {
        self.checkpoints.join("train_log.json")
    }

    pub fn index_dir(&self) -> PathBuf {
        self.checkpoints.join("index")
    }

    pub fn split_file(&self) -> PathBuf {
        self.index_dir().join("split.json")
    }

    pub fn patches_dir(&self) -> PathBuf {
        self.checkpoints.join("patches")
    }

    pub fn results_dir(&self) -> PathBuf {
        self.output.join("results")
    }

    pub fn metrics_file(&self) -> PathBuf {
        self.output.join("metrics.json")
    }

    pub fn comparison_file(&self) -> PathBuf {
        self.output.join("comparison.md")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output.join("report")
    }

    pub fn progress_log(&self) -> PathBuf {
        self.output.join("generate.log")
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPath(path.to_path_buf()))
    }
}

pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match &config.paths.dataset {
        Some(p) => load_image_folder(p),
        None => synthetic_dataset(&config.data.synthetic),
    }
}

/// Training data, reference set and evaluation samples.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub reference: Dataset,
    pub evaluation: Dataset,
}

pub fn splits(config: &RunConfig, data: &Dataset) -> Splits {
    let (validation, train) = data.split(config.data.validation_fraction, config.data.split_seed);
    let (reference, evaluation) = validation.split(config.index.ratio, config.data.split_seed.wrapping_add(1));
    Splits {
        train,
        reference,
        evaluation,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config_hash: String,
    pub classifier: ClassifierTrainReport,
    pub codec: Option<TrainReport>,
    pub denoiser: TrainReport,
    /// Denoiser step the run resumed from.
    pub resumed_from: Option<usize>,
}

/// Train the classifier, the codec (if any) and the denoiser. With `resume`,
/// an existing classifier and codec are reused and the denoiser continues
/// from its stored step.
pub fn cmd_train(config: &RunConfig, resume: bool) -> Result<TrainLog> {
    config.validate()?;
    let layout = Layout::new(config);
    let data = load_dataset(config)?;
    let train = splits(config, &data).train;
    std::fs::create_dir_all(&layout.checkpoints)?;
    let previous: Option<TrainLog> = if resume && layout.train_log().exists() {
        Some(serde_json::from_slice(&std::fs::read(layout.train_log())?)?)
    } else {
        None
    };

    let classifier = match &previous {
        Some(log) if layout.classifier().exists() => {
            log::info!("reusing classifier {}", layout.classifier().display());
            log.classifier.clone()
        }
        _ => {
            let mut cfg = config.classifier.clone();
            cfg.checkpoint = Some(layout.classifier());
            let (_, report) = train_classifier(&train, &cfg, None)?;
            log::info!("classifier held-out accuracy {:.4}", report.heldout_accuracy);
            if report.heldout_accuracy < 0.85 {
                log::warn!("classifier held-out accuracy {:.3} is below 0.85", report.heldout_accuracy);
            }
            report
        }
    };

    let shape = data.image_shape().ok_or(Error::EmptyDataset)?;
    let (codec, codec_report) = match config.diffusion.codec.kind {
        CodecKind::Identity => (LatentCodec::identity(shape), None),
        CodecKind::Autoencoder if resume && layout.codec().exists() => {
            (load_codec(&layout.codec())?, previous.as_ref().and_then(|l| l.codec.clone()))
        }
        CodecKind::Autoencoder => {
            let c = &config.diffusion.codec;
            let (codec, report) = train_autoencoder(&train.images, c.latent_dim, c.steps, c.batch, c.lr, c.seed)?;
            (codec, Some(report))
        }
    };
    save_codec(&layout.codec(), &codec)?;

    let schedule = config.diffusion.schedule.build()?;
    let mut latents = Array2::zeros((train.len(), codec.latent_dim()));
    for (mut row, x) in latents.rows_mut().into_iter().zip(&train.images) {
        row.assign(&codec.encode(x)?);
    }
    let init = if resume && layout.denoiser().exists() {
        let ck = load_denoiser(&layout.denoiser())?;
        if ck.schedule != config.diffusion.schedule {
            return Err(Error::Config("stored denoiser was trained with a different schedule".into()));
        }
        log::info!("resuming denoiser from step {}", ck.step);
        Some((ck.model, ck.step))
    } else {
        None
    };
    let resumed_from = init.as_ref().map(|i| i.1);
    let mut dcfg = config.diffusion.denoiser.clone();
    dcfg.checkpoint = Some(layout.denoiser());
    let (_, denoiser) = train_denoiser(&latents, &train.labels, data.num_classes(), &schedule, &dcfg, init)?;
    log::info!("denoiser loss {:.5} after {} steps", denoiser.final_loss, denoiser.steps);

    let log = TrainLog {
        config_hash: config.hash(),
        classifier,
        codec: codec_report,
        denoiser,
        resumed_from,
    };
    write_atomic(&layout.train_log(), &serde_json::to_vec_pretty(&log)?)?;
    write_atomic(&layout.checkpoints.join("config.toml"), config.to_toml().as_bytes())?;
    Ok(log)
}

/// Sample ids of the reference and evaluation splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub ratio: f64,
    pub reference: Vec<String>,
    pub evaluation: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexSummary {
    pub manifest: IndexManifest,
    pub split: SplitManifest,
    pub patches: PatchManifest,
}

fn concept_layer(model: &ClassifierModel, requested: Option<&String>) -> Result<String> {
    match requested {
        Some(l) => {
            model.concept_layer_index(l)?;
            Ok(l.clone())
        }
        None => model
            .default_concept_layer()
            .map(str::to_string)
            .ok_or_else(|| Error::InvalidArgument("model has no concept layers".into())),
    }
}

/// Build the reference index over the reference split and export concept
/// reference patches for every channel of the concept layer.
pub fn cmd_index(config: &RunConfig) -> Result<IndexSummary> {
    config.validate()?;
    let layout = Layout::new(config);
    require(&layout.classifier())?;
    let model = ClassifierModel::load(&layout.classifier())?;
    let data = load_dataset(config)?;
    let s = splits(config, &data);
    if s.evaluation.is_empty() {
        log::warn!("index ratio {} leaves no evaluation samples", config.index.ratio);
    }
    let layer = concept_layer(&model, config.index.layer.as_ref())?;
    let mode = EncodingMode {
        kind: config.index.encoding,
        layer,
        pooling: config.index.pooling,
    };
    let index = ReferenceIndex::build(&model, &s.reference, mode, config.index.distance)?;
    let manifest = index.save(&layout.index_dir())?;
    let split = SplitManifest {
        ratio: config.index.ratio,
        reference: s.reference.ids.clone(),
        evaluation: s.evaluation.ids.clone(),
    };
    write_atomic(&layout.split_file(), &serde_json::to_vec_pretty(&split)?)?;

    let concept = concept_layer(&model, config.counterfactual.layer.as_ref())?;
    let channels: Vec<usize> = (0..model.layer_shape(&concept)?[0]).collect();
    let refs = relevance_maximization_many(&model, &s.reference, &concept, &channels, config.index.references)?;
    if layout.patches_dir().exists() {
        std::fs::remove_dir_all(layout.patches_dir())?;
    }
    let patches = export_references(&refs, &s.reference, &layout.patches_dir())?;
    log::info!(
        "index: {} reference rows, {} evaluation samples, {} concept channels",
        manifest.rows,
        split.evaluation.len(),
        channels.len()
    );
    Ok(IndexSummary {
        manifest,
        split,
        patches,
    })
}

/// Directory name of evaluation sample `i`.
pub fn result_dir_name(i: usize, id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{i:05}_{clean}")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenerateSummary {
    pub total: usize,
    pub generated: usize,
    /// Completed earlier with the same config hash.
    pub skipped: usize,
    pub failed: Vec<(String, String)>,
}

/// Models needed for generation and evaluation.
pub struct Components {
    pub model: ClassifierModel,
    pub denoiser: MlpDenoiser,
    pub codec: LatentCodec,
    pub schedule: NoiseSchedule,
}

pub fn load_components(config: &RunConfig) -> Result<Components> {
    let layout = Layout::new(config);
    for p in [layout.classifier(), layout.denoiser(), layout.codec()] {
        require(&p)?;
    }
    let model = ClassifierModel::load(&layout.classifier())?;
    let ck = load_denoiser(&layout.denoiser())?;
    if ck.schedule != config.diffusion.schedule {
        return Err(Error::Config("stored denoiser was trained with a different schedule".into()));
    }
    let codec = load_codec(&layout.codec())?;
    if codec.image_shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: model.input_shape().to_vec(),
            got: codec.image_shape().to_vec(),
        });
    }
    if ck.model.config().dim != codec.latent_dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![codec.latent_dim()],
            got: vec![ck.model.config().dim],
        });
    }
    Ok(Components {
        model,
        denoiser: ck.model,
        codec,
        schedule: ck.schedule.build()?,
    })
}

fn completed_hash(dir: &Path) -> Option<String> {
    let bytes = std::fs::read(dir.join(RECORD_FILE)).ok()?;
    ResultRecord::from_json(&bytes).ok().map(|r| r.trace.config_hash)
}

/// Generate one counterfactual per evaluation sample. Samples whose result
/// directory already holds a record with the current config hash are skipped.
pub fn cmd_generate(config: &RunConfig) -> Result<GenerateSummary> {
    config.validate()?;
    let layout = Layout::new(config);
    let c = load_components(config)?;
    let index = ReferenceIndex::load(&layout.index_dir())?;
    let data = load_dataset(config)?;
    let s = splits(config, &data);
    if index.ids() != s.reference.ids.as_slice() {
        return Err(Error::Integrity(
            "reference index does not match the configured split; rebuild it with `index`".into(),
        ));
    }
    let hash = config.hash();
    let n = config.generate.limit.map_or(s.evaluation.len(), |l| l.min(s.evaluation.len()));
    std::fs::create_dir_all(layout.results_dir())?;
    write_atomic(&layout.output.join("config.toml"), config.to_toml().as_bytes())?;
    let progress = Mutex::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(layout.progress_log())?,
    );
    let gen = Generator {
        model: &c.model,
        denoiser: &c.denoiser,
        codec: &c.codec,
        schedule: &c.schedule,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.generate.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let outcomes: Vec<(String, std::result::Result<bool, String>)> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let id = &s.evaluation.ids[i];
                let dir = layout.results_dir().join(result_dir_name(i, id));
                let outcome = if completed_hash(&dir).as_deref() == Some(hash.as_str()) {
                    Ok(false)
                } else {
                    let seed = config.generate.seed.wrapping_add(i as u64);
                    gen.generate(id, &s.evaluation.images[i], TargetSource::NearMiss(&index), &config.counterfactual, seed, &hash)
                        .and_then(|r| {
                            if dir.exists() {
                                std::fs::remove_dir_all(&dir)?;
                            }
                            r.save(&dir)?;
                            Ok(r)
                        })
                        .map(|r| {
                            let _ = writeln!(
                                progress.lock().unwrap(),
                                "{id} target {} flipped {} l1 {:.3}",
                                r.target,
                                r.metrics.flipped,
                                r.metrics.l1
                            );
                            true
                        })
                        .map_err(|e| e.to_string())
                };
                if let Err(e) = &outcome {
                    log::warn!("sample {id}: {e}");
                    let _ = writeln!(progress.lock().unwrap(), "{id} failed: {e}");
                }
                (id.clone(), outcome)
            })
            .collect()
    });
    let mut summary = GenerateSummary {
        total: n,
        ..Default::default()
    };
    for (id, o) in outcomes {
        match o {
            Ok(true) => summary.generated += 1,
            Ok(false) => summary.skipped += 1,
            Err(e) => summary.failed.push((id, e)),
        }
    }
    log::info!(
        "generate: {} new, {} already complete, {} failed",
        summary.generated,
        summary.skipped,
        summary.failed.len()
    );
    Ok(summary)
}

/// Completed results of a run in directory order.
pub fn load_results(output: &Path) -> Result<Vec<CounterfactualResult>> {
    let dir = output.join("results");
    require(&dir)?;
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(RECORD_FILE).exists())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| CounterfactualResult::load(d)).collect()
}

/// Samples whose stored metrics disagree with metrics recomputed from the
/// stored images.
pub fn verify_results(model: &ClassifierModel, results: &[CounterfactualResult]) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for r in results {
        let m = SampleMetrics::compute(model, &r.original, &r.counterfactual, r.target)?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs());
        let same = m.flipped == r.metrics.flipped
            && m.counterfactual_class == r.metrics.counterfactual_class
            && close(m.target_confidence, r.metrics.target_confidence)
            && close(m.l1, r.metrics.l1)
            && close(m.l2, r.metrics.l2);
        if !same {
            bad.push(r.sample_id.clone());
        }
    }
    Ok(bad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateSummary {
    pub reports: Vec<MetricReport>,
    pub table: Option<String>,
    /// Samples whose stored metrics did not match the stored images.
    pub tampered: Vec<String>,
}

/// Evaluate the configured run and any `extra` run directories. Each run
/// gets a `metrics.json`; with more than one run a comparison table is
/// written next to the configured run's report.
///
/// Results with mixed config hashes, a hash differing from the current
/// configuration, or stored metrics that disagree with the stored images
/// are refused unless `force` is set.
pub fn cmd_evaluate(config: &RunConfig, extra: &[PathBuf], force: bool) -> Result<EvaluateSummary> {
    config.validate()?;
    let layout = Layout::new(config);
    require(&layout.classifier())?;
    let model = ClassifierModel::load(&layout.classifier())?;
    let mut runs = vec![layout.output.clone()];
    runs.extend(extra.iter().cloned());
    let mut reports = Vec::with_capacity(runs.len());
    let mut tampered = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let mut results = load_results(run)?;
        if results.is_empty() {
            return Err(Error::NoResults(run.join("results")));
        }
        let hash = results[0].trace.config_hash.clone();
        if results.iter().any(|r| r.trace.config_hash != hash) && !force {
            return Err(Error::Integrity(format!("results in {} carry different config hashes", run.display())));
        }
        if i == 0 && hash != config.hash() && !force {
            return Err(Error::Integrity(format!(
                "results in {} were generated with config {hash}, current config is {}",
                run.display(),
                config.hash()
            )));
        }
        let bad = verify_results(&model, &results)?;
        if !bad.is_empty() {
            if !force {
                return Err(Error::Integrity(format!(
                    "stored metrics do not match the stored images for: {}",
                    bad.join(", ")
                )));
            }
            log::warn!("recomputing metrics for {} modified samples", bad.len());
            for r in results.iter_mut().filter(|r| bad.contains(&r.sample_id)) {
                r.metrics = SampleMetrics::compute(&model, &r.original, &r.counterfactual, r.target)?;
            }
            tampered.extend(bad);
        }
        let report = evaluate_run(&results, &model, &config.metrics)?;
        report.save(&run.join("metrics.json"))?;
        reports.push(report);
    }
    let table = (reports.len() > 1).then(|| comparison_table(&reports));
    if let Some(t) = &table {
        write_atomic(&layout.comparison_file(), t.as_bytes())?;
    }
    Ok(EvaluateSummary {
        reports,
        table,
        tampered,
    })
}
