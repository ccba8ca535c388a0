//! The `train`, `infer`, `eval`, `synth` and `gradcheck` entry points, shared
//! by the command-line tool and the Python bindings.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{HatError, Result};
use crate::eval::{evaluate, Detection, GroundTruth, Metrics};
use crate::infer::{run_stream, write_attention, GateKind, InferenceOptions, InferenceResult};
use crate::losses::{append_focal_log, GradientRatioAccumulator};
use crate::model::HatModel;
use crate::numerics::{GradCheckReport, ParamStore};
use crate::postproc::{audit_online, read_proposals, write_proposals, AuditReport};
use crate::synthdata::{
    by_video, generate, read_annotations, read_features, write_annotations, write_features, Annotation,
    GenerationReport, ProceduralGrammar,
};
use crate::train::{osn_dataset, train_osn, write_epoch_log, EpochStats, MainTrainer, OsnStats, VideoData};

pub const CHECKPOINT_FILE: &str = "checkpoint.hatc";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const FOCAL_LOG_FILE: &str = "focal_log.csv";
pub const OSN_LOG_FILE: &str = "osn_log.csv";
pub const ANNOTATION_FILE: &str = "annotations.csv";
pub const FEATURE_EXT: &str = "hatf";

/// Every `*.hatf` file in `dir`, sorted by name.
pub fn feature_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| HatError::io(dir, e))? {
        let path = entry.map_err(|e| HatError::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == FEATURE_EXT) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// File stem up to the first dot: `v003.psi.csv` is video `v003`.
pub fn video_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

/// Loads every feature file under `dir` with its annotations. Videos absent
/// from the annotation file have no ground truth.
pub fn load_videos(dir: &Path, annotations: &Path) -> Result<Vec<VideoData>> {
    let gt = by_video(&read_annotations(annotations)?);
    let files = feature_files(dir)?;
    if files.is_empty() {
        return Err(HatError::Empty(format!("no .{FEATURE_EXT} files in {}", dir.display())));
    }
    files
        .iter()
        .map(|f| {
            let id = video_id(f);
            Ok(VideoData {
                gt: gt.get(&id).cloned().unwrap_or_default(),
                features: read_features(f)?,
                id,
            })
        })
        .collect()
}

fn check_feature_dim(config: &RunConfig, videos: &[VideoData]) -> Result<()> {
    for v in videos {
        if v.features.cols() != config.feature_dim {
            return Err(HatError::dim(
                "features",
                format!(
                    "video {} has {} feature channels, the model expects {}",
                    v.id,
                    v.features.cols(),
                    config.feature_dim
                ),
            ));
        }
    }
    Ok(())
}

pub struct Trained {
    pub model: HatModel,
    pub store: ParamStore<f32>,
    pub accumulator: GradientRatioAccumulator,
    pub epochs: Vec<EpochStats>,
    pub osn: OsnStats,
}

impl Trained {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.model.config, self.epochs.len() as u32, &self.accumulator, &self.store)
    }
}

/// Main network for `train.epochs` epochs, then the suppression network on
/// confidences recorded from the training videos. `focal_log` receives one
/// row per class and epoch.
pub fn train(config: &RunConfig, videos: &[VideoData], focal_log: Option<&Path>) -> Result<Trained> {
    let problems = config.violations();
    if !problems.is_empty() {
        return Err(HatError::ConfigViolations(
            problems.into_iter().map(|(k, m)| format!("{k}: {m}")).collect(),
        ));
    }
    check_feature_dim(config, videos)?;
    let (model, mut store) = HatModel::build::<f32>(config)?;
    let mut trainer = MainTrainer::new(&model);
    let mut epochs = Vec::with_capacity(config.train.epochs);
    for e in 0..config.train.epochs {
        let stats = trainer.epoch(&mut store, videos, e)?;
        log::info!("epoch {e}: loss {:.5} over {} windows", stats.loss, stats.windows);
        if let Some(path) = focal_log {
            append_focal_log(path, e, &trainer.accumulator, &trainer.factors())?;
        }
        epochs.push(stats);
    }
    let accumulator = trainer.accumulator.clone();
    let ds = osn_dataset(&model, &store, videos)?;
    let osn = train_osn(&model, &mut store, &ds, config)?;
    log::info!("suppression network: {} rows, {} positive", osn.rows, osn.positives);
    Ok(Trained {
        model,
        store,
        accumulator,
        epochs,
        osn,
    })
}

/// Trains on `data_dir` and writes the checkpoint and logs into `out_dir`.
pub fn cmd_train(config: &RunConfig, data_dir: &Path, annotations: &Path, out_dir: &Path) -> Result<Trained> {
    let videos = load_videos(data_dir, annotations)?;
    std::fs::create_dir_all(out_dir).map_err(|e| HatError::io(out_dir, e))?;
    let focal = out_dir.join(FOCAL_LOG_FILE);
    if focal.exists() {
        std::fs::remove_file(&focal).map_err(|e| HatError::io(&focal, e))?;
    }
    let trained = train(config, &videos, Some(&focal))?;
    trained.checkpoint().save(&out_dir.join(CHECKPOINT_FILE))?;
    write_epoch_log(&out_dir.join(TRAIN_LOG_FILE), &trained.epochs)?;
    let mut osn = String::from("epoch,loss\n");
    for (e, l) in trained.osn.epoch_loss.iter().enumerate() {
        osn.push_str(&format!("{e},{l}\n"));
    }
    let osn_path = out_dir.join(OSN_LOG_FILE);
    std::fs::write(&osn_path, osn).map_err(|e| HatError::io(&osn_path, e))?;
    Ok(trained)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct InferOptions {
    pub audit: bool,
    pub attention: bool,
    pub gate: GateKind,
}

pub struct InferSummary {
    pub video: String,
    pub result: InferenceResult,
    pub audit: Option<AuditReport>,
}

/// Streams one video and audits the trace when asked.
pub fn infer_video(
    model: &HatModel,
    store: &ParamStore<f32>,
    video: &str,
    features: &crate::numerics::Tensor<f32>,
    opts: InferOptions,
) -> Result<InferSummary> {
    if features.cols() != model.config.feature_dim {
        return Err(HatError::dim(
            "features",
            format!(
                "video {video} has {} feature channels, the checkpoint expects {}",
                features.cols(),
                model.config.feature_dim
            ),
        ));
    }
    let result = run_stream(
        model,
        store,
        features,
        InferenceOptions {
            audit: opts.audit,
            attention: opts.attention,
            gate: opts.gate,
        },
    )?;
    let audit = match &result.trace {
        Some(trace) => Some(audit_online(trace, model.config.anchor.max_size() as f64)?),
        None => None,
    };
    Ok(InferSummary {
        video: video.to_string(),
        result,
        audit,
    })
}

/// Writes `<video>.proposals.csv`, `<video>.psi.csv` and, with attention on,
/// `<video>.attention.csv` for every feature file.
pub fn cmd_infer(checkpoint: &Checkpoint, features: &[PathBuf], out_dir: &Path, opts: InferOptions) -> Result<Vec<InferSummary>> {
    let (model, store) = checkpoint.restore()?;
    std::fs::create_dir_all(out_dir).map_err(|e| HatError::io(out_dir, e))?;
    let mut out = Vec::with_capacity(features.len());
    for path in features {
        let id = video_id(path);
        let summary = infer_video(&model, &store, &id, &read_features(path)?, opts)?;
        write_proposals(&out_dir.join(format!("{id}.proposals.csv")), &summary.result.proposals)?;
        write_proposals(&out_dir.join(format!("{id}.psi.csv")), &summary.result.psi)?;
        if opts.attention {
            write_attention(&out_dir.join(format!("{id}.attention.csv")), &summary.result.attention)?;
        }
        out.push(summary);
    }
    Ok(out)
}

/// Scores Ψ files against an annotation file; each file's video is its name
/// up to the first dot.
pub fn cmd_eval(
    proposals: &[PathBuf],
    annotations: &Path,
    config: &crate::eval::EvalConfig,
    json_out: Option<&Path>,
    csv_out: Option<&Path>,
) -> Result<Metrics> {
    let problems = config.violations();
    if !problems.is_empty() {
        return Err(HatError::ConfigViolations(
            problems.into_iter().map(|(k, m)| format!("{k}: {m}")).collect(),
        ));
    }
    let mut dets: Vec<Detection> = Vec::new();
    for path in proposals {
        let id = video_id(path);
        dets.extend(read_proposals(path)?.iter().map(|r| r.detection(&id)));
    }
    let gt: Vec<GroundTruth> = read_annotations(annotations)?
        .iter()
        .map(|a| GroundTruth {
            video: a.video_id.clone(),
            class: a.class_id,
            start: a.start_step as f64,
            end: a.end_step as f64,
        })
        .collect();
    let metrics = evaluate(&dets, &gt, config);
    if let Some(p) = json_out {
        std::fs::write(p, metrics.to_json()?).map_err(|e| HatError::io(p, e))?;
    }
    if let Some(p) = csv_out {
        std::fs::write(p, metrics.to_csv()).map_err(|e| HatError::io(p, e))?;
    }
    Ok(metrics)
}

/// Per-video generation seeds drawn from one master seed.
pub fn video_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

/// Writes `synth_NNN.hatf` for `n` videos of `t_len` steps plus one annotation file.
pub fn cmd_synth(grammar: &ProceduralGrammar, n: usize, t_len: usize, seed: u64, out_dir: &Path) -> Result<GenerationReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| HatError::io(out_dir, e))?;
    let mut rows = Vec::new();
    let mut report = grammar.report();
    for (i, s) in video_seeds(seed, n).into_iter().enumerate() {
        let id = format!("synth_{i:03}");
        let (video, r) = generate(grammar, t_len, s)?;
        write_features(&out_dir.join(format!("{id}.{FEATURE_EXT}")), &video.features)?;
        rows.extend(video.annotations.iter().map(|g| Annotation::new(&id, g)));
        for w in r.warnings {
            if !report.warnings.contains(&w) {
                report.warnings.push(w);
            }
        }
    }
    write_annotations(&out_dir.join(ANNOTATION_FILE), &rows)?;
    Ok(report)
}

/// Finite-difference checks of every tape primitive, layer and loss, then of
/// the full training loss at `config`. At most `sample` coordinates per
/// tensor are perturbed in the full-model check.
pub fn cmd_gradcheck(config: &RunConfig, seed: u64, tolerance: f64, sample: Option<usize>) -> Result<Vec<(String, GradCheckReport)>> {
    let mut reports = crate::model::check_components(config, seed, tolerance)?;
    reports.push((
        "full model loss".to_string(),
        crate::model::check_full_model_sampled(config, seed, tolerance, sample)?,
    ));
    Ok(reports)
}
