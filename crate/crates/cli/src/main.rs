//! `smoe`: fit, render and compare steered mixture-of-experts image models.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use smoe::modelfile;
use smoe::pipeline::{self, InitMethod, RunConfig};
use smoe::segment::{segment, segment_size_stats, SegmentParams};
use smoe::{GrayImage, Mode};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_PARTIAL: u8 = 4;
const EXIT_OUTPUT: u8 = 5;

#[derive(Parser)]
#[command(name = "smoe", version, about = "Steered mixture-of-experts image regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize, optimize globally and write model, reconstruction, trace and metrics.
    Fit {
        input: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Initialize only and report the quality of the initial model.
    InitOnly {
        input: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Render a model file at a new resolution.
    Render {
        model: PathBuf,
        /// Uniform scale factor relative to the model's native size.
        #[arg(long, conflicts_with = "size")]
        scale: Option<f64>,
        /// Output size as WIDTHxHEIGHT.
        #[arg(long)]
        size: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Fit every image with every method and write one CSV row per run.
    Compare {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        /// Comma-separated init methods.
        #[arg(long, value_delimiter = ',', default_value = "grid,kmeans,s-smoe,as-smoe")]
        methods: Vec<InitMethod>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Segment an image and write the label map.
    Segment {
        input: PathBuf,
        #[arg(long, default_value_t = 40.0)]
        dth: f64,
        #[arg(long, default_value_t = 16)]
        min_segment: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML or JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    init: Option<InitMethod>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Segmentation threshold on the 0-255 scale.
    #[arg(long)]
    dth: Option<f64>,
    #[arg(long)]
    margin: Option<usize>,
    #[arg(long)]
    cbb_side: Option<usize>,
    /// Local target PSNR (dB).
    #[arg(long)]
    target_psnr: Option<f64>,
    /// Local epoch budget per block.
    #[arg(long)]
    epochs: Option<usize>,
    /// Local doubling checkpoint interval.
    #[arg(long)]
    checkpoint: Option<usize>,
    /// Sparsity weight of the global stage.
    #[arg(long)]
    lambda: Option<f64>,
    /// Kernel budget for the grid, kmeans and s-smoe initializers.
    #[arg(long)]
    kernels: Option<usize>,
    /// Epoch cap of the global stage.
    #[arg(long)]
    global_epochs: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "smoe" => Ok(Mode::SmoeGating),
        "rbf" => Ok(Mode::RbfSum),
        other => Err(format!("unknown mode {other:?} (expected smoe or rbf)")),
    }
}

/// An error tagged with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn input(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_INPUT, error: error.into() }
    }

    fn output(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_OUTPUT, error: error.into() }
    }

    /// Numerical failures get their own code; everything else from the library is bad input.
    fn from_lib(error: smoe::Error) -> Self {
        let code = if error.is_numerical() { EXIT_NUMERICAL } else { EXIT_INPUT };
        Self { code, error: error.into() }
    }
}

type CmdResult = Result<u8, Failure>;

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    Ok(config)
}

impl RunArgs {
    fn to_config(&self) -> Result<RunConfig, Failure> {
        let mut c = match &self.config {
            Some(p) => load_config(p).map_err(Failure::input)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.init {
            c.init = v;
        }
        if let Some(v) = self.mode {
            c.mode = v;
        }
        if let Some(v) = self.dth {
            c.segment.d_th = v;
        }
        if let Some(v) = self.margin {
            c.local.margin_px = v;
        }
        if let Some(v) = self.cbb_side {
            c.local.cbb_side = v;
        }
        if let Some(v) = self.target_psnr {
            c.local.adjust.target_psnr = v;
        }
        if let Some(v) = self.epochs {
            c.local.adjust.max_epochs = v;
            c.local.adjust.checkpoint = c.local.adjust.checkpoint.min(v);
        }
        if let Some(v) = self.checkpoint {
            c.local.adjust.checkpoint = v;
        }
        if let Some(v) = self.lambda {
            c.global.lambda = v;
        }
        if let Some(v) = self.kernels {
            c.baseline.target_l = v;
        }
        if let Some(v) = self.global_epochs {
            c.global.max_epochs = v;
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.validate().map_err(Failure::from_lib)?;
        Ok(c)
    }
}

fn load_image(path: &Path) -> Result<GrayImage, Failure> {
    GrayImage::load(path)
        .with_context(|| format!("cannot read image {}", path.display()))
        .map_err(Failure::input)
}

fn write_err(e: smoe::Error) -> Failure {
    match e {
        smoe::Error::Io(_) | smoe::Error::Image(_) | smoe::Error::Json(_) => Failure::output(e),
        other => Failure::from_lib(other),
    }
}

fn fit(input: &Path, run: &RunArgs) -> CmdResult {
    let config = run.to_config()?;
    let image = load_image(input)?;
    let result = pipeline::fit(&image, &config).map_err(Failure::from_lib)?;
    let paths = pipeline::write_fit(&result, &run.out).map_err(write_err)?;
    let m = &result.metrics;
    println!(
        "{}: PSNR {:.2} dB, SSIM {:.4}, L_init {}, L_opt {} ({:.1} s) -> {}",
        input.display(),
        m.psnr_db,
        m.ssim,
        m.l_init,
        m.l_opt,
        m.seconds.total,
        paths.model.display()
    );
    for (id, err) in &result.init.failed_blocks {
        eprintln!("warning: block {id} failed: {err}");
    }
    Ok(if result.init.failed_blocks.is_empty() { 0 } else { EXIT_PARTIAL })
}

fn init_only(input: &Path, run: &RunArgs) -> CmdResult {
    let config = run.to_config()?;
    let image = load_image(input)?;
    let (init, recon, report) = pipeline::init_only(&image, &config).map_err(Failure::from_lib)?;
    pipeline::write_init(&init, &recon, &report, &run.out).map_err(write_err)?;
    println!(
        "{}: init PSNR {:.2} dB, SSIM {:.4}, L_init {}",
        input.display(),
        report.psnr_db,
        report.ssim,
        report.l_init
    );
    Ok(if init.failed_blocks.is_empty() { 0 } else { EXIT_PARTIAL })
}

fn parse_size(s: &str) -> anyhow::Result<(usize, usize)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("size must look like 640x480, got {s:?}"))?;
    Ok((w.trim().parse()?, h.trim().parse()?))
}

fn render(model: &Path, scale: Option<f64>, size: Option<&str>, out: &Path, workers: usize) -> CmdResult {
    let m = modelfile::load(model)
        .with_context(|| format!("cannot load model {}", model.display()))
        .map_err(Failure::input)?;
    let (w, h) = match (scale, size) {
        (_, Some(s)) => parse_size(s).map_err(Failure::input)?,
        (Some(a), None) if a > 0.0 => (
            ((m.domain.image_width as f64 * a).round() as usize).max(1),
            ((m.domain.image_height as f64 * a).round() as usize).max(1),
        ),
        (Some(a), None) => return Err(Failure::input(anyhow::anyhow!("scale must be positive, got {a}"))),
        (None, None) => (m.domain.image_width, m.domain.image_height),
    };
    let pool = smoe::local::worker_pool(workers).map_err(Failure::from_lib)?;
    let image = pool.install(|| m.render(w, h)).map_err(Failure::from_lib)?;
    image.save(out).map_err(write_err)?;
    println!("rendered {w}x{h} -> {}", out.display());
    Ok(0)
}

fn compare(images: &[PathBuf], methods: &[InitMethod], run: &RunArgs) -> CmdResult {
    let config = run.to_config()?;
    let loaded = images
        .iter()
        .map(|p| Ok((p.display().to_string(), load_image(p)?)))
        .collect::<Result<Vec<_>, Failure>>()?;
    let rows = pipeline::compare(&loaded, methods, &config).map_err(Failure::from_lib)?;
    fs::create_dir_all(&run.out).map_err(Failure::output)?;
    let path = run.out.join("compare.csv");
    let file = fs::File::create(&path).map_err(Failure::output)?;
    pipeline::write_compare_csv(&rows, file).map_err(write_err)?;
    let failed = rows.iter().filter(|r| r.failed()).count();
    println!("{} runs, {failed} failed -> {}", rows.len(), path.display());
    Ok(if failed == 0 { 0 } else { EXIT_PARTIAL })
}

fn segment_cmd(input: &Path, dth: f64, min_segment: usize, out: &Path) -> CmdResult {
    let image = load_image(input)?;
    let params = SegmentParams { d_th: dth, min_segment_px: min_segment };
    let map = segment(&image, &params).map_err(Failure::from_lib)?;
    map.save_label_map(out).map_err(write_err)?;
    let stats = segment_size_stats(&map);
    println!(
        "{} segments (sizes min {} median {} max {}) -> {}",
        map.len(),
        stats.min,
        stats.median,
        stats.max,
        out.display()
    );
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit { input, run } => fit(input, run),
        Command::InitOnly { input, run } => init_only(input, run),
        Command::Render { model, scale, size, out, workers } => {
            render(model, *scale, size.as_deref(), out, *workers)
        }
        Command::Compare { images, methods, run } => compare(images, methods, run),
        Command::Segment { input, dth, min_segment, out } => segment_cmd(input, *dth, *min_segment, out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
