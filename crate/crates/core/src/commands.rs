//! The pipeline commands behind the CLI. Every output lands under the
//! configured workdir (or the given output directory):
//!
//! ```text
//! workdir/data/         manifest.json, pairs.bin or pairs/, config.json
//! workdir/checkpoints/  {pretrain,classifier,joint}.ckpt, model.json, config.json
//! workdir/logs/         {stage}.jsonl, {stage}.csv
//! workdir/eval/         metrics.json, config.json
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{RunConfig, ScorerConfig};
use crate::datasets::{
    extract_tiles, partition_classes, prepare_pairs, score_difficulty, synth_corpus, BicubicScorer, BranchScorer,
    Dataset, DifficultyScorer, Manifest, PairRecord, Population, Provenance, SampleRecord, SourceRecord,
};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::router::{class_map_overlay, flops_summary, super_resolve, CostTable, FlopsSummary, Routing};
use crate::tensor::Checkpoint;
use crate::training::{
    evaluate, pretrain_branches, train_router, warmup_reference, Evaluation, LogRecord, Stage, StageConfig,
    TrainState, ValImage, Validation,
};

pub fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.workdir.join("data")
}

pub fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.workdir.join("checkpoints")
}

pub fn checkpoint_path(cfg: &RunConfig, stage: Stage) -> PathBuf {
    checkpoint_dir(cfg).join(format!("{stage}.ckpt"))
}

pub fn log_path(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.paths.workdir.join("logs").join(format!("{stage}.jsonl"))
}

pub fn metrics_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.workdir.join("eval").join("metrics.json")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// PNG files of a directory in name order.
fn load_png_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let name = p.file_name().expect("a file").to_string_lossy().into_owned();
            Ok((name, Image::load_png(&p)?))
        })
        .collect()
}

struct Source {
    name: String,
    image: Image,
    population: Option<Population>,
}

fn training_sources(cfg: &RunConfig) -> Result<Vec<Source>> {
    if let Some(spec) = &cfg.data.synth {
        return Ok(synth_corpus(spec)?
            .into_iter()
            .enumerate()
            .map(|(i, s)| Source {
                name: format!("synth-{i:04}"),
                image: s.image,
                population: Some(s.population),
            })
            .collect());
    }
    let dir = cfg
        .paths
        .corpus
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no corpus directory and no synthetic spec".into()))?;
    Ok(load_png_dir(dir)?
        .into_iter()
        .map(|(name, image)| Source {
            name,
            image,
            population: None,
        })
        .collect())
}

fn validation_sources(cfg: &RunConfig) -> Result<Vec<Source>> {
    if let Some(spec) = &cfg.data.synth_validation {
        return Ok(synth_corpus(spec)?
            .into_iter()
            .enumerate()
            .map(|(i, s)| Source {
                name: format!("synth-val-{i:04}"),
                image: s.image,
                population: Some(s.population),
            })
            .collect());
    }
    match &cfg.paths.validation {
        Some(dir) => Ok(load_png_dir(dir)?
            .into_iter()
            .map(|(name, image)| Source {
                name,
                image,
                population: None,
            })
            .collect()),
        None => Ok(Vec::new()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub tiles: usize,
    pub class_counts: Vec<usize>,
    pub validation_images: usize,
    pub manifest: PathBuf,
}

/// Builds pairs and tiles, scores and partitions them, and writes the data
/// directory. Nothing is written if any step fails.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    cfg.validate()?;
    let train = training_sources(cfg)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("the training corpus is empty".into()));
    }
    let val = validation_sources(cfg)?;
    for s in train.iter().chain(&val) {
        if s.image.channels() != cfg.model.channels {
            return Err(Error::InvalidArgument(format!(
                "{} has {} channels, the model expects {}",
                s.name,
                s.image.channels(),
                cfg.model.channels
            )));
        }
    }
    let scale = cfg.model.scale;
    let quantize = |pairs: Vec<crate::datasets::Pair>| -> Vec<crate::datasets::Pair> {
        pairs
            .into_iter()
            .map(|mut p| {
                p.hr = p.hr.quantized();
                p.lr = p.lr.quantized();
                p
            })
            .collect()
    };
    let train_images: Vec<Image> = train.iter().map(|s| s.image.clone()).collect();
    let mut pairs = quantize(prepare_pairs(&train_images, &cfg.data.hr_scales, scale)?);
    let val_images: Vec<Image> = val.iter().map(|s| s.image.clone()).collect();
    let mut val_pairs = quantize(prepare_pairs(&val_images, &[1.0], scale)?);
    for p in &mut val_pairs {
        p.source += train.len();
    }

    let mut samples = extract_tiles(&pairs, cfg.data.tile, cfg.data.train_stride)?;
    let scorer: Box<dyn DifficultyScorer> = match cfg.data.scorer {
        ScorerConfig::Bicubic => Box::new(BicubicScorer { scale }),
        ScorerConfig::Warmup {
            iterations,
            batch_size,
        } => {
            let largest = *cfg.branch_configs()?.last().expect("at least two branches");
            let mut st = StageConfig::new(Stage::Pretrain, iterations, batch_size)?;
            st.augment = cfg.training.augment;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
            let branch = warmup_reference(largest, &samples, &st, &mut rng, cfg.training.seed)?;
            Box::new(BranchScorer {
                branch,
                label: format!("warmup-{iterations}"),
            })
        }
    };
    score_difficulty(&mut samples, scorer.as_ref(), cfg.eval.psnr)?;
    let class_counts = partition_classes(&mut samples, cfg.classes())?;

    pairs.extend(val_pairs);
    let sources = train
        .iter()
        .map(|s| (s, false))
        .chain(val.iter().map(|s| (s, true)))
        .map(|(s, validation)| SourceRecord {
            name: s.name.clone(),
            population: s.population,
            validation,
        })
        .collect();
    let manifest = Manifest {
        tile: cfg.data.tile,
        scale,
        channels: cfg.model.channels,
        classes: cfg.classes(),
        class_counts: class_counts.clone(),
        provenance: Provenance {
            sources,
            hr_scales: cfg.data.hr_scales.clone(),
            stride: cfg.data.train_stride,
            seed: cfg.data.synth.as_ref().map_or(cfg.training.seed, |s| s.seed),
            scorer: scorer.name(),
        },
        storage: cfg.data.storage,
        pairs: pairs
            .iter()
            .map(|p| PairRecord {
                source: p.source,
                hr_scale: p.hr_scale,
                hr_dims: p.hr.dims(),
                lr_dims: p.lr.dims(),
            })
            .collect(),
        samples: samples
            .iter()
            .map(|s| SampleRecord {
                pair: s.pair,
                origin: s.origin,
                difficulty_psnr: s.difficulty_psnr.expect("scored"),
                class_label: s.class_label.expect("partitioned"),
            })
            .collect(),
    };
    let dataset = Dataset {
        manifest,
        pairs,
        samples,
    };
    let dir = data_dir(cfg);
    dataset.save(&dir)?;
    cfg.echo_into(&dir)?;
    Ok(PrepareSummary {
        tiles: dataset.samples.len(),
        class_counts,
        validation_images: val.len(),
        manifest: dir.join("manifest.json"),
    })
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = data_dir(cfg);
    if !dir.join("manifest.json").exists() {
        return Err(Error::MissingPrerequisite {
            stage: "training".into(),
            path: dir.join("manifest.json"),
        });
    }
    let data = Dataset::load(&dir)?;
    let m = &data.manifest;
    if m.classes != cfg.classes() || m.scale != cfg.model.scale || m.channels != cfg.model.channels || m.tile != cfg.data.tile {
        return Err(Error::InvalidArgument(format!(
            "data was prepared for {} classes, scale {}, {} channels, tile {}; the config disagrees",
            m.classes, m.scale, m.channels, m.tile
        )));
    }
    Ok(data)
}

fn validation_images(data: &Dataset, limit: Option<usize>) -> Vec<ValImage> {
    data.validation_pairs()
        .into_iter()
        .take(limit.unwrap_or(usize::MAX))
        .map(|p| ValImage {
            lr: p.lr.clone(),
            hr: p.hr.clone(),
            population: data.population(p),
        })
        .collect()
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    TrainState::from_checkpoint(&Checkpoint::load(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub last: Option<LogRecord>,
}

/// Runs one training stage from the previous stage's checkpoint.
pub fn cmd_train(cfg: &RunConfig, stage: Stage) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut state = match stage.prerequisite() {
        None => TrainState::new(&cfg.branch_configs()?, cfg.class_config(), cfg.training.seed)?,
        Some(prev) => {
            let path = checkpoint_path(cfg, prev);
            if !path.exists() {
                return Err(Error::MissingPrerequisite {
                    stage: stage.name().into(),
                    path,
                });
            }
            load_state(&path)?
        }
    };
    if state.descriptor()?.branch_configs()? != cfg.branch_configs()? {
        return Err(Error::InvalidArgument("the checkpoint's model differs from the config".into()));
    }
    let data = load_dataset(cfg)?;
    let stage_cfg = cfg.stage_config(stage)?;
    let val = validation_images(&data, cfg.training.eval_images);
    let route = cfg.route_options(Routing::Argmax);

    let log_file = log_path(cfg, stage);
    create_dir(log_file.parent().expect("logs dir"))?;
    let mut jsonl = fs::File::create(&log_file).map_err(|e| Error::io(&log_file, e))?;
    let csv_file = log_file.with_extension("csv");
    let mut csv = fs::File::create(&csv_file).map_err(|e| Error::io(&csv_file, e))?;
    let header = json!({"header": {
        "stage": stage,
        "iterations": stage_cfg.iterations,
        "batch_size": stage_cfg.batch_size,
        "weights": stage_cfg.weights,
        "balance": stage_cfg.balance,
        "freeze_sr": stage_cfg.freeze_sr,
        "seed": cfg.training.seed,
        "widths": cfg.model.widths,
    }});
    writeln!(jsonl, "{header}").map_err(|e| Error::io(&log_file, e))?;
    let m = cfg.classes();
    let hist_cols: Vec<String> = (0..m).map(|k| format!("hist{k}")).collect();
    writeln!(csv, "iter,branch,l1,lc,la,loss,lr,psnr,flops,{}", hist_cols.join(",")).map_err(|e| Error::io(&csv_file, e))?;

    let mut last = None;
    let mut log = |r: &LogRecord| -> Result<()> {
        writeln!(jsonl, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&log_file, e))?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let hist = r.hist.clone().map_or(vec![String::new(); m], |h| h.iter().map(f64::to_string).collect());
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            r.iter,
            r.branch.map_or(String::new(), |b| b.to_string()),
            r.l1,
            r.lc,
            r.la,
            r.loss,
            r.lr,
            opt(r.psnr),
            opt(r.flops),
            hist.join(",")
        )
        .map_err(|e| Error::io(&csv_file, e))?;
        last = Some(r.clone());
        Ok(())
    };
    match stage {
        Stage::Pretrain => pretrain_branches(&mut state, &data.samples, &stage_cfg, &mut log)?,
        Stage::Classifier | Stage::Joint => {
            let validation = (!val.is_empty()).then_some(Validation {
                images: &val,
                route: &route,
                psnr: cfg.eval.psnr,
            });
            train_router(&mut state, &data.samples, &stage_cfg, validation, &mut log)?
        }
    }

    let dir = checkpoint_dir(cfg);
    create_dir(&dir)?;
    let path = checkpoint_path(cfg, stage);
    state.to_checkpoint()?.save(&path)?;
    write_json(&dir.join("model.json"), &state.descriptor()?)?;
    cfg.echo_into(&dir)?;
    Ok(TrainSummary {
        stage,
        checkpoint: path,
        last,
    })
}

/// The most advanced checkpoint present in the workdir.
pub fn latest_checkpoint(cfg: &RunConfig) -> Result<PathBuf> {
    Stage::ALL
        .iter()
        .rev()
        .map(|&s| checkpoint_path(cfg, s))
        .find(|p| p.exists())
        .ok_or_else(|| Error::MissingPrerequisite {
            stage: "inference".into(),
            path: checkpoint_path(cfg, Stage::Pretrain),
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub input: PathBuf,
    pub output_dims: (usize, usize),
    /// Class shares in percent, one decimal, summing to 100.0.
    pub percentages: Vec<f64>,
    pub flops: FlopsSummary,
    pub report: crate::router::RoutingReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOutputs {
    pub sr: PathBuf,
    pub overlay: PathBuf,
    pub report: PathBuf,
    pub summary: InferReport,
}

fn cost_table(cfg: &RunConfig, state: &TrainState) -> Result<CostTable> {
    match &cfg.eval.cost_table {
        Some(ct) => Ok(ct.clone()),
        None => CostTable::from_models(&state.class_module, &state.container, cfg.data.tile),
    }
}

/// Super-resolves one LR image and writes the SR PNG, the class overlay
/// and a JSON routing report into `out_dir`.
pub fn cmd_infer(
    cfg: &RunConfig,
    image: &Path,
    out_dir: &Path,
    routing: Routing,
    checkpoint: Option<&Path>,
) -> Result<InferOutputs> {
    cfg.validate()?;
    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(cfg)?,
    };
    let state = load_state(&ckpt)?;
    let img = Image::load_png(image)?;
    let (sr, report) = super_resolve(&img, &state.class_module, &state.container, &cfg.route_options(routing))?;
    let overlay = class_map_overlay(&report, &sr, state.container.scale())?;
    let costs = cost_table(cfg, &state)?;
    let mut costs_used = costs.clone();
    if report.class_module_flops == 0 {
        costs_used.class_module = 0.0;
    }
    let summary = InferReport {
        input: image.to_path_buf(),
        output_dims: sr.dims(),
        percentages: report.percentages(),
        flops: flops_summary(&report.histogram, &costs_used)?,
        report,
    };
    create_dir(out_dir)?;
    let stem = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let outputs = InferOutputs {
        sr: out_dir.join(format!("{stem}_sr.png")),
        overlay: out_dir.join(format!("{stem}_overlay.png")),
        report: out_dir.join(format!("{stem}_report.json")),
        summary,
    };
    sr.save_png(&outputs.sr)?;
    overlay.save_png(&outputs.overlay)?;
    write_json(&outputs.report, &outputs.summary)?;
    cfg.echo_into(out_dir)?;
    Ok(outputs)
}

/// Loads `dir/hr/*.png` and `dir/lr/*.png`, paired by file name.
pub fn load_test_set(dir: &Path) -> Result<Vec<ValImage>> {
    let hr = load_png_dir(&dir.join("hr"))?;
    let lr = load_png_dir(&dir.join("lr"))?;
    let hr_names: Vec<&String> = hr.iter().map(|(n, _)| n).collect();
    let lr_names: Vec<&String> = lr.iter().map(|(n, _)| n).collect();
    if hr_names != lr_names {
        return Err(Error::InvalidArgument(format!(
            "unpaired test data in {}: hr {:?} vs lr {:?}",
            dir.display(),
            hr_names,
            lr_names
        )));
    }
    if hr.is_empty() {
        return Err(Error::InvalidArgument(format!("no test images in {}", dir.display())));
    }
    Ok(hr
        .into_iter()
        .zip(lr)
        .map(|((_, hr), (_, lr))| ValImage {
            lr,
            hr,
            population: None,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub psnr: f64,
    pub avg_flops: f64,
    pub ratio_vs_base: f64,
    pub histogram: Vec<f64>,
    pub mean_max_prob: Option<f64>,
    pub tiles: usize,
    pub per_image: Vec<crate::training::ImageEval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub checkpoint: PathBuf,
    pub cost_table: CostTable,
    pub routed: MetricsRow,
    pub forced_base: MetricsRow,
    pub psnr_delta: f64,
    /// Routed shares of each population's tiles, when known.
    pub population_histograms: Vec<(Population, Vec<f64>)>,
}

fn metrics_row(e: Evaluation, costs: &CostTable) -> Result<MetricsRow> {
    let s = flops_summary(&e.histogram, costs)?;
    Ok(MetricsRow {
        psnr: e.psnr,
        avg_flops: s.avg_flops,
        ratio_vs_base: s.ratio_vs_base,
        histogram: e.histogram,
        mean_max_prob: e.mean_max_prob,
        tiles: e.tiles,
        per_image: e.per_image,
    })
}

/// Routed and forced-base evaluation of a checkpoint; writes
/// `workdir/eval/metrics.json`.
pub fn cmd_eval(cfg: &RunConfig, test_set: Option<&Path>, checkpoint: Option<&Path>) -> Result<Metrics> {
    cfg.validate()?;
    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(cfg)?,
    };
    let state = load_state(&ckpt)?;
    let images = match test_set {
        Some(dir) => load_test_set(dir)?,
        None => validation_images(&load_dataset(cfg)?, None),
    };
    let costs = cost_table(cfg, &state)?;
    let m = state.container.len();
    let routed = evaluate(
        &state.class_module,
        &state.container,
        &images,
        &cfg.route_options(Routing::Argmax),
        cfg.eval.psnr,
    )?;
    let forced = evaluate(
        &state.class_module,
        &state.container,
        &images,
        &cfg.route_options(Routing::Force(m - 1)),
        cfg.eval.psnr,
    )?;
    let population_histograms = [Population::Flat, Population::Edge, Population::Texture]
        .into_iter()
        .filter_map(|p| {
            let shares: Vec<f64> = (0..m).filter_map(|k| routed.population_share(p, k)).collect();
            (shares.len() == m).then_some((p, shares))
        })
        .collect();
    let base_costs = CostTable {
        class_module: 0.0,
        ..costs.clone()
    };
    let metrics = Metrics {
        checkpoint: ckpt,
        psnr_delta: routed.psnr - forced.psnr,
        routed: metrics_row(routed, &costs)?,
        forced_base: metrics_row(forced, &base_costs)?,
        cost_table: costs,
        population_histograms,
    };
    let path = metrics_path(cfg);
    create_dir(path.parent().expect("eval dir"))?;
    write_json(&path, &metrics)?;
    cfg.echo_into(path.parent().expect("eval dir"))?;
    Ok(metrics)
}
