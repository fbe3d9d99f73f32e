//! End-to-end runs: initialization, global optimization, evaluation and artifact output.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baseline::{grid_init, kmeans_init, s_smoe_init, BaselineParams};
use crate::error::{Error, Result};
use crate::export::{aggregate, ExportOptions, ExportStats};
use crate::image::GrayImage;
use crate::local::{run_all_blocks, worker_pool, LocalParams};
use crate::metrics::{quality, QualityScore};
use crate::model::{MixtureModel, Mode};
use crate::modelfile;
use crate::optimizer::{
    optimize, prune_negative, write_trace_csv, AdamConfig, LearningRates, OptimizeConfig,
    StopReason, TraceRow,
};
use crate::segment::{segment, SegmentParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitMethod {
    #[serde(rename = "grid")]
    Grid,
    #[serde(rename = "kmeans")]
    Kmeans,
    #[serde(rename = "s-smoe")]
    SSmoe,
    #[serde(rename = "as-smoe")]
    AsSmoe,
}

impl InitMethod {
    pub fn name(self) -> &'static str {
        match self {
            InitMethod::Grid => "grid",
            InitMethod::Kmeans => "kmeans",
            InitMethod::SSmoe => "s-smoe",
            InitMethod::AsSmoe => "as-smoe",
        }
    }
}

impl std::str::FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(InitMethod::Grid),
            "kmeans" => Ok(InitMethod::Kmeans),
            "s-smoe" => Ok(InitMethod::SSmoe),
            "as-smoe" => Ok(InitMethod::AsSmoe),
            other => Err(Error::invalid(format!("unknown init method {other:?}"))),
        }
    }
}

/// Everything a fit needs apart from the image itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub init: InitMethod,
    pub mode: Mode,
    pub segment: SegmentParams,
    pub local: LocalParams,
    pub export: ExportOptions,
    pub baseline: BaselineParams,
    pub global: OptimizeConfig,
    pub workers: usize,
    /// Master seed; overrides the seeds of every sub-configuration.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            init: InitMethod::AsSmoe,
            mode: Mode::SmoeGating,
            segment: SegmentParams::default(),
            local: LocalParams::default(),
            export: ExportOptions::default(),
            baseline: BaselineParams::default(),
            global: OptimizeConfig {
                max_epochs: 20_000,
                delta_window: 10,
                prune_inline: true,
                adam: AdamConfig {
                    lr: LearningRates {
                        mu: 1e-3,
                        b: 0.5,
                        pi: 1e-3,
                        m: 3e-3,
                    },
                    ..AdamConfig::default()
                },
                ..OptimizeConfig::default()
            },
            workers: 1,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Copy with the master seed pushed into the sub-configurations.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.local.adjust.seed = self.seed;
        c.baseline.seed = self.seed;
        c.global.seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.segment.validate()?;
        self.local.adjust.validate()?;
        if self.local.cbb_side < 2 {
            return Err(Error::invalid("cbb_side must be at least 2"));
        }
        self.baseline.validate()?;
        self.global.validate()?;
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        Ok(())
    }
}

/// Wall-clock seconds per stage. Stages that did not run stay at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub segmentation: f64,
    pub local_fit: f64,
    pub export: f64,
    pub baseline: f64,
    pub global: f64,
    pub evaluation: f64,
    pub total: f64,
}

impl StageTimes {
    pub fn init(&self) -> f64 {
        self.segmentation + self.local_fit + self.export + self.baseline
    }

    pub fn stage_sum(&self) -> f64 {
        self.init() + self.global + self.evaluation
    }
}

#[derive(Debug, Clone)]
pub struct InitResult {
    pub model: MixtureModel,
    pub export: Option<ExportStats>,
    pub segments: Option<usize>,
    /// Blocks whose local fit failed, with the error message.
    pub failed_blocks: Vec<(usize, String)>,
    pub times: StageTimes,
}

/// Builds the initial global model with the configured method.
pub fn initialize(image: &GrayImage, config: &RunConfig) -> Result<InitResult> {
    let config = config.seeded();
    config.validate()?;
    let mut times = StageTimes::default();
    let needs_map = matches!(config.init, InitMethod::SSmoe | InitMethod::AsSmoe);
    let map = if needs_map {
        let t = Instant::now();
        let map = segment(image, &config.segment)?;
        times.segmentation = t.elapsed().as_secs_f64();
        Some(map)
    } else {
        None
    };
    let pool = worker_pool(config.workers)?;
    let mut export = None;
    let mut failed_blocks = Vec::new();
    let mut model = match config.init {
        InitMethod::AsSmoe => {
            let map = map.as_ref().expect("segment map");
            let t = Instant::now();
            let run = run_all_blocks(image, map, &config.local, config.workers)?;
            times.local_fit = t.elapsed().as_secs_f64();
            failed_blocks = run.failures.iter().map(|(id, e)| (*id, e.to_string())).collect();
            let t = Instant::now();
            let (model, stats) =
                aggregate(&run.models, image.width(), image.height(), config.export)?;
            times.export = t.elapsed().as_secs_f64();
            export = Some(stats);
            model
        }
        method => {
            let t = Instant::now();
            let model = pool.install(|| match method {
                InitMethod::Grid => grid_init(image, &config.baseline),
                InitMethod::Kmeans => kmeans_init(image, &config.baseline),
                _ => s_smoe_init(image, map.as_ref().expect("segment map"), &config.baseline),
            })?;
            times.baseline = t.elapsed().as_secs_f64();
            model
        }
    };
    model.mode = config.mode;
    Ok(InitResult {
        model,
        export,
        segments: map.as_ref().map(|m| m.len()),
        failed_blocks,
        times,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitMetrics {
    pub method: InitMethod,
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(rename = "L_init")]
    pub l_init: usize,
    #[serde(rename = "L_opt")]
    pub l_opt: usize,
    pub segments: Option<usize>,
    pub failed_blocks: usize,
    pub epochs: usize,
    pub stop: StopReason,
    pub seconds: StageTimes,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub init: InitResult,
    pub model: MixtureModel,
    pub reconstruction: GrayImage,
    pub trace: Vec<TraceRow>,
    pub metrics: FitMetrics,
}

/// Initialization followed by global optimization over the whole image and a final prune.
pub fn fit(image: &GrayImage, config: &RunConfig) -> Result<FitResult> {
    let started = Instant::now();
    let init = initialize(image, config)?;
    let config = config.seeded();
    let pool = worker_pool(config.workers)?;
    let mut times = init.times;

    let t = Instant::now();
    let outcome = pool.install(|| optimize(&init.model, image, None, &config.global, &mut |_| {}))?;
    let (model, _) = prune_negative(&outcome.model)?;
    times.global = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (reconstruction, score) = pool.install(|| evaluate_model(&model, image))?;
    times.evaluation = t.elapsed().as_secs_f64();
    times.total = started.elapsed().as_secs_f64();

    let metrics = FitMetrics {
        method: config.init,
        psnr_db: score.psnr_db,
        ssim: score.ssim,
        l_init: init.model.len(),
        l_opt: model.len(),
        segments: init.segments,
        failed_blocks: init.failed_blocks.len(),
        epochs: outcome.trace.len(),
        stop: outcome.stop,
        seconds: times,
    };
    Ok(FitResult {
        init,
        model,
        reconstruction,
        trace: outcome.trace,
        metrics,
    })
}

fn evaluate_model(model: &MixtureModel, image: &GrayImage) -> Result<(GrayImage, QualityScore)> {
    let recon = model.render(image.width(), image.height())?;
    let score = quality(image, &recon)?;
    Ok((recon, score))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitReport {
    pub method: InitMethod,
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(rename = "L_init")]
    pub l_init: usize,
    pub segments: Option<usize>,
    pub failed_blocks: usize,
    pub seconds: StageTimes,
}

/// Initialization without global optimization, scored against the input.
pub fn init_only(image: &GrayImage, config: &RunConfig) -> Result<(InitResult, GrayImage, InitReport)> {
    let started = Instant::now();
    let mut init = initialize(image, config)?;
    let pool = worker_pool(config.workers)?;
    let t = Instant::now();
    let (recon, score) = pool.install(|| evaluate_model(&init.model, image))?;
    init.times.evaluation = t.elapsed().as_secs_f64();
    init.times.total = started.elapsed().as_secs_f64();
    let report = InitReport {
        method: config.init,
        psnr_db: score.psnr_db,
        ssim: score.ssim,
        l_init: init.model.len(),
        segments: init.segments,
        failed_blocks: init.failed_blocks.len(),
        seconds: init.times,
    };
    Ok((init, recon, report))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let f = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

/// Paths of the files written by [`write_fit`].
#[derive(Debug, Clone)]
pub struct FitArtifacts {
    pub model: PathBuf,
    pub reconstruction: PathBuf,
    pub trace: PathBuf,
    pub metrics: PathBuf,
    pub export_stats: Option<PathBuf>,
}

pub fn write_fit(result: &FitResult, dir: &Path) -> Result<FitArtifacts> {
    fs::create_dir_all(dir)?;
    let paths = FitArtifacts {
        model: dir.join("model.json"),
        reconstruction: dir.join("reconstruction.png"),
        trace: dir.join("trace.csv"),
        metrics: dir.join("metrics.json"),
        export_stats: result.init.export.as_ref().map(|_| dir.join("export_stats.json")),
    };
    modelfile::save(&result.model, &paths.model)?;
    result.reconstruction.save(&paths.reconstruction)?;
    write_trace_csv(&result.trace, BufWriter::new(fs::File::create(&paths.trace)?))?;
    write_json(&result.metrics, &paths.metrics)?;
    if let (Some(stats), Some(p)) = (&result.init.export, &paths.export_stats) {
        write_json(stats, p)?;
    }
    Ok(paths)
}

pub fn write_init(init: &InitResult, recon: &GrayImage, report: &InitReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    modelfile::save(&init.model, dir.join("init_model.json"))?;
    recon.save(dir.join("init_reconstruction.png"))?;
    write_json(report, &dir.join("init_report.json"))?;
    if let Some(stats) = &init.export {
        write_json(stats, &dir.join("export_stats.json"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub image: String,
    pub method: String,
    pub d_th: f64,
    #[serde(rename = "L_init")]
    pub l_init: Option<usize>,
    #[serde(rename = "L_opt")]
    pub l_opt: Option<usize>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub seconds_init: Option<f64>,
    pub seconds_global: Option<f64>,
    pub error: String,
}

impl CompareRow {
    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }
}

/// Runs [`fit`] for every `(image, method)` pair. Failures become rows with the error filled in.
pub fn compare(
    images: &[(String, GrayImage)],
    methods: &[InitMethod],
    base: &RunConfig,
) -> Result<Vec<CompareRow>> {
    if methods.len() < 2 {
        return Err(Error::invalid("compare needs at least two init methods"));
    }
    let mut rows = Vec::new();
    for (name, image) in images {
        for &method in methods {
            let config = RunConfig {
                init: method,
                ..base.clone()
            };
            let mut row = CompareRow {
                image: name.clone(),
                method: method.name().to_string(),
                d_th: config.segment.d_th,
                l_init: None,
                l_opt: None,
                psnr: None,
                ssim: None,
                seconds_init: None,
                seconds_global: None,
                error: String::new(),
            };
            match fit(image, &config) {
                Ok(r) => {
                    row.l_init = Some(r.metrics.l_init);
                    row.l_opt = Some(r.metrics.l_opt);
                    row.psnr = Some(r.metrics.psnr_db);
                    row.ssim = Some(r.metrics.ssim);
                    row.seconds_init = Some(r.metrics.seconds.init());
                    row.seconds_global = Some(r.metrics.seconds.global);
                }
                Err(e) => row.error = e.to_string(),
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_compare_csv<W: std::io::Write>(rows: &[CompareRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
