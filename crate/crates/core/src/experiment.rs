//! End-to-end commands: data generation, pre-training, fine-tuning,
//! evaluation and the full protocol comparison.
//!
//! Everything lives under one output directory:
//!
//! ```text
//! data/{pretrain,target}/          dataset containers
//! pretrain/{liver,lesion}/         checkpoints, plus stats.json and *_log.csv
//! cells/<protocol>/fold<F>_seed<S>/ result.json, log.csv, optional checkpoint/
//! report.csv  report.txt  curves/<protocol>.svg
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{
    finetune_lesion_classifier, lesion_examples, run_cascade, split_validation, train_lesion_fcn, train_liver_fcn,
    Cascade, CropConfig, StageConfig,
};
use crate::checkpoint;
use crate::data::io::{read_json, write_array, write_json};
use crate::data::{
    liver_intensity_stats, make_folds, read_dataset, synth_generate, write_dataset, AugConfig, Dataset, DatasetKind,
    IntensityStats, LabelScheme, Sample, SynthSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{build_report, evaluate_image, CellResult, ImageEval, MetricsReport, Scores};
use crate::schedule::{EpochLog, FreezeStyle, PhaseBudget, Protocol, TrainOptions};
use crate::unet::{UNet, UNetConfig};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Fine-tuning settings shared by every protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub budget: PhaseBudget,
    pub batch_size: usize,
    /// One in `validation_folds` training subjects is held out for early stopping.
    pub validation_folds: usize,
    pub freeze_style: FreezeStyle,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            budget: PhaseBudget {
                lr0: 2e-3,
                max_epochs: 20,
                patience: 5,
            },
            batch_size: 1,
            validation_folds: 4,
            freeze_style: FreezeStyle::Cumulative,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Small multi-class corpus for fine-tuning and evaluation.
    pub target: SynthSpec,
    /// Large corpus for pre-training both cascade stages.
    pub pretrain: SynthSpec,
    pub protocols: Vec<Protocol>,
    pub seeds: Vec<u64>,
    pub folds: usize,
    /// Seed of the subject-to-fold assignment, shared by all cells.
    pub split_seed: u64,
    pub output_dir: PathBuf,
    pub augmentation: AugConfig,
    pub crop: CropConfig,
    pub liver: StageConfig,
    pub lesion: StageConfig,
    pub finetune: FinetuneConfig,
    /// Keep the fine-tuned weights of every experiment cell.
    pub save_cell_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let stage = |base_filters, lr0, max_epochs, seed| StageConfig {
            model: UNetConfig {
                base_filters,
                seed,
                ..UNetConfig::default()
            },
            budget: PhaseBudget {
                lr0,
                max_epochs,
                patience: 3,
            },
            train: TrainOptions {
                batch_size: 4,
                seed,
                ..TrainOptions::default()
            },
            validation_folds: 10,
        };
        Self {
            target: SynthSpec::default(),
            pretrain: SynthSpec {
                seed: 1001,
                ..SynthSpec::counts(110, 110, 110, 170)
            },
            protocols: Protocol::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            folds: 3,
            split_seed: 0,
            output_dir: PathBuf::from("runs/experiment"),
            augmentation: AugConfig::default(),
            crop: CropConfig::default(),
            liver: stage(4, 2e-3, 8, 11),
            lesion: stage(8, 1e-3, 8, 12),
            finetune: FinetuneConfig::default(),
            save_cell_checkpoints: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        self.pretrain.validate()?;
        self.augmentation.validate()?;
        self.liver.model.validate()?;
        self.lesion.model.validate()?;
        self.crop.validate(self.target.image_size)?;
        self.crop.validate(self.pretrain.image_size)?;
        if self.protocols.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("protocols and seeds must be non-empty".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.liver.model.input_size != self.pretrain.image_size {
            return Err(Error::Config("liver.model.input_size must equal pretrain.image_size".into()));
        }
        if self.crop.crop_size % self.lesion.model.spatial_multiple() != 0 {
            return Err(Error::Config("crop_size must be divisible by the lesion network's pooling factor".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn data_dir(&self, kind: DatasetKind) -> PathBuf {
        self.output_dir.join("data").join(match kind {
            DatasetKind::Pretrain => "pretrain",
            DatasetKind::Target => "target",
        })
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.output_dir.join("pretrain")
    }

    pub fn cell_dir(&self, protocol: Protocol, fold: usize, seed: u64) -> PathBuf {
        self.output_dir
            .join("cells")
            .join(protocol.name())
            .join(format!("fold{fold}_seed{seed}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub crate_version: String,
    pub checkpoint_version: u32,
    pub dataset_version: u16,
}

/// Writes `run_manifest.json` into `dir`.
pub fn write_run_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig, seeds: &[u64]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = RunManifest {
        command: command.to_string(),
        config_hash: cfg.hash(),
        seeds: seeds.to_vec(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoint_version: checkpoint::CHECKPOINT_VERSION,
        dataset_version: crate::data::io::FORMAT_VERSION,
    };
    write_json(&dir.join(RUN_MANIFEST), &m)
}

fn prepare_output(dir: &Path, marker: &Path, force: bool) -> Result<bool> {
    if marker.exists() {
        if !force {
            return Ok(false);
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(true)
}

/// Refuses to overwrite an existing dataset unless `force`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    cfg.validate()?;
    for kind in [DatasetKind::Pretrain, DatasetKind::Target] {
        let dir = cfg.data_dir(kind);
        let manifest = dir.join(crate::data::io::MANIFEST_FILE);
        if manifest.exists() && !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    generate_missing(cfg, true)?;
    write_run_manifest(&cfg.output_dir.join("data"), "gen-data", cfg, &[cfg.pretrain.seed, cfg.target.seed])
}

fn generate_missing(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    for (kind, spec) in [(DatasetKind::Pretrain, &cfg.pretrain), (DatasetKind::Target, &cfg.target)] {
        let dir = cfg.data_dir(kind);
        if !prepare_output(&dir, &dir.join(crate::data::io::MANIFEST_FILE), force)? {
            continue;
        }
        info!("generating {} slices into {}", spec.total(), dir.display());
        let ds = synth_generate(spec, kind)?;
        // only the pre-training corpus has a fixed training portion
        let stats = match kind {
            DatasetKind::Pretrain => Some(liver_intensity_stats(&ds.samples)?),
            DatasetKind::Target => None,
        };
        write_dataset(&ds, &dir, stats)?;
    }
    Ok(())
}

fn load_data(cfg: &ExperimentConfig, kind: DatasetKind) -> Result<Dataset> {
    Ok(read_dataset(&cfg.data_dir(kind))?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainStats {
    pub liver: IntensityStats,
    pub lesion: IntensityStats,
}

fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    fs::write(path, EpochLog::to_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Trains the liver and lesion networks on the pre-training corpus. An
/// interrupted run resumes from its last finished epoch.
pub fn cmd_pretrain(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    cfg.validate()?;
    let dir = cfg.pretrain_dir();
    let stats_file = dir.join("stats.json");
    if stats_file.exists() && !force {
        return Err(Error::Config(format!("{} already exists; pass --force to retrain", dir.display())));
    }
    if force && dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    ensure_pretrained(cfg)?;
    write_run_manifest(&dir, "pretrain", cfg, &[cfg.liver.train.seed, cfg.lesion.train.seed])
}

fn ensure_pretrained(cfg: &ExperimentConfig) -> Result<()> {
    let dir = cfg.pretrain_dir();
    if dir.join("stats.json").exists() {
        return Ok(());
    }
    generate_missing(cfg, false)?;
    let data = load_data(cfg, DatasetKind::Pretrain)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stage = |name: &str, stage: &StageConfig| StageConfig {
        train: TrainOptions {
            augmentation: Some(cfg.augmentation.clone()),
            state_dir: Some(dir.join(format!("{name}_state"))),
            ..stage.train.clone()
        },
        ..stage.clone()
    };
    let liver_ckpt = dir.join("liver");
    let liver_stats = if liver_ckpt.join("stats.json").exists() {
        read_json(&liver_ckpt.join("stats.json"))?
    } else {
        info!("training the liver network");
        let s = stage("liver", &cfg.liver);
        let t = train_liver_fcn(&data, &s)?;
        checkpoint::save(&liver_ckpt, &t.model, None)?;
        write_log(&dir.join("liver_log.csv"), &t.outcome.log)?;
        write_json(&liver_ckpt.join("stats.json"), &t.stats)?;
        remove_dir(s.train.state_dir.as_deref())?;
        t.stats
    };
    info!("training the lesion network");
    let s = stage("lesion", &cfg.lesion);
    let t = train_lesion_fcn(&data, &s, cfg.crop)?;
    checkpoint::save(&dir.join("lesion"), &t.model, None)?;
    write_log(&dir.join("lesion_log.csv"), &t.outcome.log)?;
    remove_dir(s.train.state_dir.as_deref())?;
    write_json(
        &dir.join("stats.json"),
        &PretrainStats {
            liver: liver_stats,
            lesion: t.stats,
        },
    )
}

fn remove_dir(dir: Option<&Path>) -> Result<()> {
    match dir {
        Some(d) if d.exists() => fs::remove_dir_all(d).map_err(|e| Error::io(d, e)),
        _ => Ok(()),
    }
}

/// Pre-trained networks and their statistics.
pub struct Pretrained {
    pub liver: UNet<f32>,
    pub lesion: UNet<f32>,
    pub stats: PretrainStats,
}

pub fn load_pretrained(cfg: &ExperimentConfig) -> Result<Pretrained> {
    let dir = cfg.pretrain_dir();
    Ok(Pretrained {
        liver: checkpoint::load(&dir.join("liver"))?.0,
        lesion: checkpoint::load(&dir.join("lesion"))?.0,
        stats: read_json(&dir.join("stats.json"))?,
    })
}

/// Fine-tuned classifier of one cell with its input statistics.
pub struct CellModel {
    pub model: UNet<f32>,
    pub stats: IntensityStats,
    pub log: Vec<EpochLog>,
}

fn check_fold(cfg: &ExperimentConfig, fold: usize) -> Result<()> {
    if fold >= cfg.folds {
        return Err(Error::Config(format!("fold {fold} out of range (folds = {})", cfg.folds)));
    }
    Ok(())
}

/// Fine-tunes the pre-trained lesion network on the training folds of `fold`.
pub fn finetune_cell(
    cfg: &ExperimentConfig,
    target: &Dataset,
    pretrained: &Pretrained,
    protocol: Protocol,
    fold: usize,
    seed: u64,
) -> Result<CellModel> {
    check_fold(cfg, fold)?;
    let split = make_folds(target, cfg.folds, cfg.split_seed)?;
    let train_idx = split.train_indices(target, fold)?;
    let (tr, va) = split_validation(target, &train_idx, cfg.finetune.validation_folds, seed)?;
    let tr: Vec<&Sample> = tr.iter().map(|&i| &target.samples[i]).collect();
    let va: Vec<&Sample> = va.iter().map(|&i| &target.samples[i]).collect();
    let stats = liver_intensity_stats(tr.iter().copied())?;
    let scheme = LabelScheme::Classification;
    let train = lesion_examples(&tr, stats, scheme, cfg.crop)?;
    let val = lesion_examples(&va, stats, scheme, cfg.crop)?;
    let opts = TrainOptions {
        batch_size: cfg.finetune.batch_size,
        augmentation: Some(cfg.augmentation.clone()),
        seed,
        ..TrainOptions::default()
    };
    let (model, outcome) = finetune_lesion_classifier(
        &pretrained.lesion,
        &train,
        &val,
        protocol,
        cfg.finetune.budget,
        cfg.finetune.freeze_style,
        &opts,
    )?;
    Ok(CellModel {
        model,
        stats,
        log: outcome.log,
    })
}

/// Cascade evaluation of `model` on the test subjects of `fold`.
pub fn evaluate_fold(
    cfg: &ExperimentConfig,
    target: &Dataset,
    pretrained: &Pretrained,
    model: &UNet<f32>,
    stats: IntensityStats,
    fold: usize,
) -> Result<(Vec<ImageEval>, Vec<crate::cascade::CascadeOutput>, Vec<u32>)> {
    check_fold(cfg, fold)?;
    let split = make_folds(target, cfg.folds, cfg.split_seed)?;
    let test: Vec<&Sample> = split.test_indices(target, fold)?.iter().map(|&i| &target.samples[i]).collect();
    let cascade = Cascade {
        liver: pretrained.liver.clone(),
        liver_stats: pretrained.stats.liver,
        lesion: model.clone(),
        lesion_stats: stats,
        crop: cfg.crop,
    };
    let outputs = run_cascade(&cascade, &test)?;
    let evals = outputs
        .iter()
        .zip(&test)
        .map(|(o, s)| evaluate_image(&o.label_map, &s.label_map, s.lesion_class))
        .collect::<Result<Vec<_>>>()?;
    Ok((evals, outputs, test.iter().map(|s| s.id).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CellRecord {
    result: CellResult,
    log: Vec<EpochLog>,
}

fn run_cell(
    cfg: &ExperimentConfig,
    target: &Dataset,
    pretrained: &Pretrained,
    protocol: Protocol,
    fold: usize,
    seed: u64,
    keep_checkpoint: bool,
) -> Result<CellRecord> {
    let dir = cfg.cell_dir(protocol, fold, seed);
    let result_file = dir.join("result.json");
    if result_file.exists() {
        return read_json(&result_file);
    }
    info!("cell {protocol} fold {fold} seed {seed}");
    let cell = finetune_cell(cfg, target, pretrained, protocol, fold, seed)?;
    let (evals, _, _) = evaluate_fold(cfg, target, pretrained, &cell.model, cell.stats, fold)?;
    let record = CellRecord {
        result: CellResult {
            protocol,
            fold,
            seed,
            scores: Scores::from_evals(&evals),
        },
        log: cell.log,
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if keep_checkpoint {
        checkpoint::save(&dir.join("checkpoint"), &cell.model, None)?;
        write_json(&dir.join("checkpoint").join("stats.json"), &cell.stats)?;
    }
    write_log(&dir.join("log.csv"), &record.log)?;
    write_json(&result_file, &record)?;
    Ok(record)
}

/// Fine-tunes one `(protocol, fold, seed)` cell, keeping its checkpoint.
pub fn cmd_finetune(cfg: &ExperimentConfig, protocol: Protocol, fold: usize, seed: u64, force: bool) -> Result<CellResult> {
    cfg.validate()?;
    check_fold(cfg, fold)?;
    let dir = cfg.cell_dir(protocol, fold, seed);
    if dir.join("result.json").exists() {
        if !force {
            return Err(Error::Config(format!("{} already exists; pass --force to rerun", dir.display())));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    ensure_pretrained(cfg)?;
    let target = load_data(cfg, DatasetKind::Target)?;
    let pretrained = load_pretrained(cfg)?;
    let record = run_cell(cfg, &target, &pretrained, protocol, fold, seed, true)?;
    write_run_manifest(&dir, "finetune", cfg, &[seed])?;
    Ok(record.result)
}

/// Evaluates a fine-tuned checkpoint on the test subjects of `fold`, writing
/// `metrics_fold<F>.csv`, predicted label maps and a JSON summary next to it.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint_dir: &Path, fold: usize) -> Result<Scores> {
    cfg.validate()?;
    check_fold(cfg, fold)?;
    let (model, _) = checkpoint::load::<f32>(checkpoint_dir)?;
    let stats: IntensityStats = read_json(&checkpoint_dir.join("stats.json"))?;
    let target = load_data(cfg, DatasetKind::Target)?;
    let pretrained = load_pretrained(cfg)?;
    let (evals, outputs, ids) = evaluate_fold(cfg, &target, &pretrained, &model, stats, fold)?;
    let scores = Scores::from_evals(&evals);
    let out = checkpoint_dir.parent().unwrap_or(checkpoint_dir).to_path_buf();
    let pred_dir = out.join(format!("predictions_fold{fold}"));
    fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
    #[derive(Serialize)]
    struct Entry<'a> {
        id: u32,
        eval: &'a ImageEval,
        output: &'a crate::cascade::CascadeOutput,
    }
    let mut entries = Vec::new();
    for ((o, e), id) in outputs.iter().zip(&evals).zip(&ids) {
        write_array(&pred_dir.join(format!("{id:05}_label.bin")), &o.label_map)?;
        write_array(&pred_dir.join(format!("{id:05}_liver.bin")), &o.liver_mask)?;
        entries.push(Entry { id: *id, eval: e, output: o });
    }
    write_json(&pred_dir.join("summary.json"), &entries)?;
    let csv = format!(
        "{}\n{},{fold},{},{},{},{}\n",
        MetricsReport::CSV_HEADER,
        checkpoint_dir.display(),
        scores.success,
        scores.dice1,
        scores.dice2,
        scores.accuracy
    );
    let path = out.join(format!("metrics_fold{fold}.csv"));
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    write_run_manifest(&pred_dir, "evaluate", cfg, &[])?;
    Ok(scores)
}

/// Runs every `(protocol, fold, seed)` cell, reusing finished cells, and
/// writes the comparison report. `threads > 1` runs cells concurrently; each
/// cell is single-threaded, so results do not depend on it.
pub fn cmd_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<MetricsReport> {
    cfg.validate()?;
    ensure_pretrained(cfg)?;
    let target = load_data(cfg, DatasetKind::Target)?;
    let pretrained = load_pretrained(cfg)?;
    let mut cells = Vec::new();
    for &protocol in &cfg.protocols {
        for fold in 0..cfg.folds {
            for &seed in &cfg.seeds {
                cells.push((protocol, fold, seed));
            }
        }
    }
    let run = |&(p, f, s): &(Protocol, usize, u64)| run_cell(cfg, &target, &pretrained, p, f, s, cfg.save_cell_checkpoints);
    let records: Vec<CellRecord> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        cells.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    let results: Vec<CellResult> = records.iter().map(|r| r.result).collect();
    let report = build_report(&results);
    let root = &cfg.output_dir;
    let write = |name: &str, text: String| {
        let p = root.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("report.csv", report.to_csv())?;
    write("report.txt", report.to_text())?;
    let curves = root.join("curves");
    fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
    for &protocol in &cfg.protocols {
        let logs: Vec<&[EpochLog]> = records
            .iter()
            .filter(|r| r.result.protocol == protocol)
            .map(|r| r.log.as_slice())
            .collect();
        let p = curves.join(format!("{}.svg", protocol.name()));
        fs::write(&p, loss_curve_svg(protocol.display_name(), &logs)).map_err(|e| Error::io(&p, e))?;
    }
    write_run_manifest(root, "experiment", cfg, &cfg.seeds)?;
    Ok(report)
}

/// Train (blue) and validation (orange) loss of every cell against the
/// cumulative epoch, with dashed lines at the phase starts of the first cell.
pub fn loss_curve_svg(title: &str, logs: &[&[EpochLog]]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let max_x = logs.iter().map(|l| l.len()).max().unwrap_or(1).max(2) as f64 - 1.0;
    let max_y = logs
        .iter()
        .flat_map(|l| l.iter().flat_map(|r| [r.train_loss, r.val_loss]))
        .filter(|v| v.is_finite())
        .fold(1e-9f64, f64::max);
    let px = |i: usize| pad + (w - 2.0 * pad) * i as f64 / max_x;
    let py = |v: f64| h - pad - (h - 2.0 * pad) * v / max_y;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{pad}" y="24" font-family="sans-serif" font-size="14">{title}: loss per epoch (max {max_y:.3})</text>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad
    );
    if let Some(first) = logs.first() {
        for (i, r) in first.iter().enumerate() {
            if i > 0 && r.phase != first[i - 1].phase {
                let x = px(i);
                let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{pad}" x2="{x:.1}" y2="{}" stroke="#999" stroke-dasharray="4 3"/>"##, h - pad);
            }
        }
    }
    for log in logs {
        for (colour, pick) in [("#1f77b4", 0), ("#ff7f0e", 1)] {
            let pts: Vec<String> = log
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let v = if pick == 0 { r.train_loss } else { r.val_loss };
                    format!("{:.1},{:.1}", px(i), py(v))
                })
                .collect();
            let _ = writeln!(s, r#"<polyline points="{}" stroke="{colour}" stroke-opacity="0.6" fill="none"/>"#, pts.join(" "));
        }
    }
    s.push_str("</svg>\n");
    s
}
