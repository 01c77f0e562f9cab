//! Argument definitions and subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{ArgGroup, Args, Parser, Subcommand};
use layoutcrop::bench::{
    evaluate, heatmap_backdrop, image_backdrop, pseudo_provider, render_overlay, save_overlay, sweep, BenchError,
    DirectoryProvider, EvalReport, HeatmapProvider, MethodKind, MethodSpec, PseudoResolution, SweepParam,
    UniformProvider,
};
use layoutcrop::dataset::{build_benchmark, read_benchmark, write_benchmark, BenchmarkTuple, DatasetError};
use layoutcrop::heatmaps::{pseudo_heatmap, read_annotations, save_heatmap, AnnotationRecord, HeatmapError, PixelImage};
use layoutcrop::optimizer::{OptimizerConfig, OptimizerError, Strategy, DEFAULT_ITERATIONS, DEFAULT_STEP_GRANULARITY};
use layoutcrop::proposals::{ProposalError, DEFAULT_K_END, DEFAULT_K_START};
use layoutcrop::request::{
    resolve_heatmap, run_crop, saliency_for, CropMethodName, CropRequest, HeatmapSource, ImageSource, RunOptions,
    MAX_HEATMAP_SIDE,
};
use layoutcrop::scoring::{LayoutRegion, ScoreWeights, DEFAULT_ALPHA};
use layoutcrop::{AspectRatio, CropBox, Dims};

use crate::service::{self, AppConfig};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "layoutcrop", version, about = "Aspect-ratio and layout constrained image cropping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop one image.
    Crop(CropArgs),
    /// Build benchmark tuples from crop annotations.
    Dataset(DatasetArgs),
    /// Evaluate a method on a benchmark.
    Bench(BenchArgs),
    /// Evaluate a method once per value of one parameter.
    Sweep(SweepArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write a heatmap: saliency of an image, or the pseudo-heatmap of an annotation record.
    Heatmap(HeatmapArgs),
}

/// Parses `x,y,w,h` with an optional `:weight` suffix.
pub fn parse_layout(s: &str) -> Result<LayoutRegion, String> {
    let (coords, weight) = match s.split_once(':') {
        Some((c, w)) => (c, w.trim().parse::<f64>().map_err(|_| format!("bad weight in {s:?}"))?),
        None => (s, 1.0),
    };
    let v: Vec<u32> = coords
        .split(',')
        .map(|p| p.trim().parse::<u32>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("layout must be x,y,w,h[:weight], got {s:?}"))?;
    let [x, y, w, h] = v[..] else {
        return Err(format!("layout must be x,y,w,h[:weight], got {s:?}"));
    };
    let bx = CropBox::new(x, y, w, h).map_err(|e| e.to_string())?;
    if !weight.is_finite() || weight == 0.0 {
        return Err(format!("layout weight must be finite and non-zero, got {weight}"));
    }
    Ok(LayoutRegion { bx, weight })
}

/// Parses `native`, `native:MAX` or `WxH`.
pub fn parse_resolution(s: &str) -> Result<PseudoResolution, String> {
    if s == "native" {
        return Ok(PseudoResolution::Native { max_side: MAX_HEATMAP_SIDE });
    }
    if let Some(max) = s.strip_prefix("native:") {
        let max_side = max.parse().map_err(|_| format!("bad resolution {s:?}"))?;
        return Ok(PseudoResolution::Native { max_side });
    }
    let (w, h) = s.split_once('x').ok_or_else(|| format!("resolution must be native or WxH, got {s:?}"))?;
    let dims = Dims::new(
        w.parse().map_err(|_| format!("bad resolution {s:?}"))?,
        h.parse().map_err(|_| format!("bad resolution {s:?}"))?,
    )
    .map_err(|e| e.to_string())?;
    Ok(PseudoResolution::Fixed(dims))
}

/// Search settings shared by `crop`, `bench` and `sweep`.
#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iterations: u32,
    #[arg(long, default_value_t = Strategy::Anneal)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_K_START)]
    pub kstart: u32,
    #[arg(long, default_value_t = DEFAULT_K_END)]
    pub kend: u32,
    #[arg(long, default_value_t = DEFAULT_STEP_GRANULARITY)]
    pub step_granularity: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SearchArgs {
    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            iterations: self.iterations,
            strategy: self.strategy,
            step_granularity: self.step_granularity,
            seed: self.seed,
            ..OptimizerConfig::default()
        }
    }

    fn check(&self) -> Result<(), CliError> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(CliError::bad(format!("--alpha must be >= 0, got {}", self.alpha)));
        }
        self.optimizer().validate().map_err(|e| CliError::bad(e.to_string()))
    }
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["heatmap", "image"])))]
pub struct CropArgs {
    /// Heatmap file (png, pgm or csv).
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    /// Image scored through its saliency map.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Image width; defaults to the image or heatmap width.
    #[arg(long, requires = "height")]
    pub width: Option<u32>,
    #[arg(long, requires = "width")]
    pub height: Option<u32>,
    /// Target ratio as W:H or a decimal.
    #[arg(long)]
    pub aspect: AspectRatio,
    /// Layout region x,y,w,h with optional :weight; repeatable.
    #[arg(long, value_parser = parse_layout, allow_hyphen_values = true)]
    pub layout: Vec<LayoutRegion>,
    #[arg(long, default_value = "heatmap")]
    pub method: CropMethodName,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Write the response here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a PNG with the layout (red) and the crop (green).
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// Write every evaluated candidate as JSON lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Annotation JSON lines: image_id, width, height, gt_boxes.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where per-image heatmaps come from.
#[derive(Debug, Clone, Args)]
pub struct ProviderArgs {
    /// Directory of `<image_id>.{png,pgm,csv}` heatmaps.
    #[arg(long, conflicts_with = "annotations")]
    pub heatmaps: Option<PathBuf>,
    /// Build pseudo-heatmaps from these annotations.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Pseudo-heatmap grid: native, native:MAX or WxH.
    #[arg(long, default_value = "64x64", value_parser = parse_resolution)]
    pub pseudo_res: PseudoResolution,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub benchmark: PathBuf,
    /// oracle, full_frame, random_box, heatmap, proposal, baseline_short or baseline_long.
    #[arg(long)]
    pub method: MethodKind,
    #[command(flatten)]
    pub provider: ProviderArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Per-item CSV report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Directory for per-item overlay PNGs.
    #[arg(long)]
    pub overlays: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub benchmark: PathBuf,
    #[arg(long)]
    pub method: MethodKind,
    /// iterations, k_range, alpha or step_granularity.
    #[arg(long)]
    pub param: SweepParam,
    /// Comma-separated values; k ranges are written START-END.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[command(flatten)]
    pub provider: ProviderArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// CSV table; the text table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Static files served under `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Let requests name heatmap and image files on this machine.
    #[arg(long)]
    pub allow_paths: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["image", "annotations"])))]
pub struct HeatmapArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, requires = "id")]
    pub annotations: Option<PathBuf>,
    /// Record to use from --annotations.
    #[arg(long)]
    pub id: Option<String>,
    /// Largest side of the saliency grid.
    #[arg(long, default_value_t = MAX_HEATMAP_SIDE)]
    pub max_side: u32,
    #[arg(long, default_value = "64x64", value_parser = parse_resolution)]
    pub pseudo_res: PseudoResolution,
    /// Output file; the extension picks png, pgm or csv.
    #[arg(long)]
    pub out: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::io(e.to_string())
}

fn from_bench(e: BenchError) -> CliError {
    match e {
        BenchError::Optimizer(OptimizerError::InfeasibleSearchSpace { .. })
        | BenchError::Proposal(ProposalError::EmptyProposalSet { .. }) => CliError::infeasible(e.to_string()),
        BenchError::Io(_) | BenchError::Heatmap(HeatmapError::Io(_)) => CliError::io(e.to_string()),
        other => CliError::bad(other.to_string()),
    }
}

fn from_dataset(e: DatasetError) -> CliError {
    match e {
        DatasetError::Io(io) => io_err(io),
        other => CliError::bad(other.to_string()),
    }
}

fn from_heatmap(e: HeatmapError) -> CliError {
    match e {
        HeatmapError::Io(io) => io_err(io),
        other => CliError::bad(other.to_string()),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Crop(a) => cmd_crop(&a),
        Command::Dataset(a) => cmd_dataset(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Serve(a) => cmd_serve(&a),
        Command::Heatmap(a) => cmd_heatmap(&a),
    }
}

/// The request a `crop` invocation stands for.
pub fn crop_request(a: &CropArgs) -> CropRequest {
    let mut req = CropRequest::new(a.aspect);
    req.width = a.width;
    req.height = a.height;
    req.heatmap = a.heatmap.clone().map(HeatmapSource::Path);
    req.image = a.image.clone().map(ImageSource::Path);
    req.layout = a.layout.clone();
    req.method = a.method;
    req.optimizer = a.search.optimizer();
    req.alpha = Some(a.search.alpha);
    req.k_start = a.search.kstart;
    req.k_end = a.search.kend;
    req.trace = a.trace.is_some();
    req
}

pub fn cmd_crop(a: &CropArgs) -> Result<(), CliError> {
    a.search.check()?;
    let req = crop_request(a);
    let opts = RunOptions { allow_paths: true };
    let mut resp = run_crop(&req, opts)?;

    if let Some(path) = &a.trace {
        let mut w = create(path)?;
        for e in resp.trace.take().unwrap_or_default() {
            serde_json::to_writer(&mut w, &e).map_err(|e| CliError::io(e.to_string()))?;
            writeln!(w).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
    }
    if let Some(path) = &a.overlay {
        let backdrop = match (&a.image, &a.heatmap) {
            (Some(img), _) => image_backdrop(&PixelImage::open(img).map_err(from_heatmap)?),
            (None, Some(h)) => {
                let heat = resolve_heatmap(&HeatmapSource::Path(h.clone()), opts)?;
                let full = match (a.width, a.height) {
                    (Some(width), Some(height)) => Dims { width, height },
                    _ => heat.dims(),
                };
                heatmap_backdrop(&heat, full)
            }
            (None, None) => unreachable!("clap requires a source"),
        };
        let layout: Vec<CropBox> = a.layout.iter().map(|r| r.bx).collect();
        let canvas = render_overlay(backdrop, None, &layout, Some(&resp.bx));
        save_overlay(&canvas, path).map_err(from_bench)?;
    }

    let json = serde_json::to_string_pretty(&resp).expect("responses serialize");
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{json}").map_err(io_err)?;
            w.flush().map_err(io_err)
        }
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>, CliError> {
    let records = read_annotations(open(path)?).map_err(from_heatmap)?;
    for r in &records {
        r.validate().map_err(from_heatmap)?;
    }
    Ok(records)
}

pub fn cmd_dataset(a: &DatasetArgs) -> Result<(), CliError> {
    let records = read_records(&a.annotations)?;
    let tuples = build_benchmark(&records);
    for t in &tuples {
        t.validate().map_err(from_dataset)?;
    }
    let mut w = create(&a.out)?;
    write_benchmark(&tuples, &mut w).map_err(from_dataset)?;
    w.flush().map_err(io_err)?;
    drop(w);
    // read back through the validating reader
    let again = read_benchmark(open(&a.out)?).map_err(from_dataset)?;
    if again.len() != tuples.len() {
        return Err(CliError::io(format!("{} holds {} tuples, expected {}", a.out.display(), again.len(), tuples.len())));
    }
    eprintln!("{} records -> {} tuples", records.len(), tuples.len());
    Ok(())
}

fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkTuple>, CliError> {
    let tuples = read_benchmark(open(path)?).map_err(from_dataset)?;
    if tuples.is_empty() {
        return Err(CliError::bad(format!("{} holds no tuples", path.display())));
    }
    Ok(tuples)
}

fn provider(p: &ProviderArgs, kind: MethodKind) -> Result<Box<dyn HeatmapProvider>, CliError> {
    if let Some(dir) = &p.heatmaps {
        if !dir.is_dir() {
            return Err(CliError::io(format!("{} is not a directory", dir.display())));
        }
        return Ok(Box::new(DirectoryProvider { dir: dir.clone() }));
    }
    if let Some(path) = &p.annotations {
        let records = read_records(path)?;
        let map = pseudo_provider(&records, p.pseudo_res).map_err(from_bench)?;
        return Ok(Box::new(map));
    }
    if kind.needs_heatmap() {
        return Err(CliError::bad("this method needs --heatmaps or --annotations"));
    }
    Ok(Box::new(UniformProvider))
}

fn method_spec(kind: MethodKind, s: &SearchArgs) -> MethodSpec {
    MethodSpec {
        kind,
        optimizer: s.optimizer(),
        weights: ScoreWeights::with_alpha(s.alpha),
        k_start: s.kstart,
        k_end: s.kend,
    }
}

fn summary_table(r: &EvalReport) -> String {
    format!(
        "{:<24} {:>8} {:>8} {:>10} {:>6}\n{:<24} {:>8.4} {:>8.4} {:>10.5} {:>6}\n",
        "method", "IoU", "recall", "time[s]", "n", r.method_id, r.mean_iou, r.mean_recall, r.mean_elapsed,
        r.per_item.len()
    )
}

fn write_overlays(dir: &Path, tuples: &[BenchmarkTuple], report: &EvalReport, prov: &dyn HeatmapProvider) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err)?;
    for (t, item) in tuples.iter().zip(&report.per_item) {
        let heat: Arc<_> = prov.heatmap(&t.image_id).map_err(from_bench)?;
        let canvas = render_overlay(heatmap_backdrop(&heat, t.dims()), Some(&t.gt), &[t.layout], Some(&item.bx));
        let name: String = item.id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
        save_overlay(&canvas, &dir.join(format!("{name}.png"))).map_err(from_bench)?;
    }
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    a.search.check()?;
    let tuples = load_benchmark(&a.benchmark)?;
    let prov = provider(&a.provider, a.method)?;
    let spec = method_spec(a.method, &a.search);
    let report = evaluate(spec.build().as_ref(), &tuples, prov.as_ref()).map_err(from_bench)?;
    if let Some(path) = &a.out {
        let mut w = create(path)?;
        report.write_csv(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)?;
    }
    if let Some(path) = &a.json {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &report).map_err(|e| CliError::io(e.to_string()))?;
        w.flush().map_err(io_err)?;
    }
    if let Some(dir) = &a.overlays {
        write_overlays(dir, &tuples, &report, prov.as_ref())?;
    }
    print!("{}", summary_table(&report));
    println!("mean_iou={}", report.mean_iou);
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    a.search.check()?;
    let tuples = load_benchmark(&a.benchmark)?;
    let prov = provider(&a.provider, a.method)?;
    let base = method_spec(a.method, &a.search);
    let table = sweep(a.param, &a.values, &base, &tuples, prov.as_ref()).map_err(from_bench)?;
    if let Some(path) = &a.out {
        let mut w = create(path)?;
        table.write_csv(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)?;
    }
    print!("{}", table.to_text());
    Ok(())
}

pub fn cmd_serve(a: &ServeArgs) -> Result<(), CliError> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::bad(format!("bad address: {e}")))?;
    if let Some(dir) = &a.static_dir {
        if !dir.is_dir() {
            return Err(CliError::io(format!("{} is not a directory", dir.display())));
        }
    }
    let config = AppConfig { allow_paths: a.allow_paths, static_dir: a.static_dir.clone(), ..AppConfig::default() };
    let rt = tokio::runtime::Runtime::new().map_err(io_err)?;
    rt.block_on(service::serve(addr, config)).map_err(io_err)
}

pub fn cmd_heatmap(a: &HeatmapArgs) -> Result<(), CliError> {
    let heat = match (&a.image, &a.annotations) {
        (Some(img), _) => {
            if a.max_side == 0 {
                return Err(CliError::bad("--max-side must be >= 1"));
            }
            saliency_for(&PixelImage::open(img).map_err(from_heatmap)?, a.max_side)
        }
        (None, Some(path)) => {
            let id = a.id.as_deref().unwrap_or_default();
            let records = read_records(path)?;
            let rec = records
                .iter()
                .find(|r| r.image_id == id)
                .ok_or_else(|| CliError::bad(format!("no record {id:?} in {}", path.display())))?;
            pseudo_heatmap(rec, a.pseudo_res.grid_for(rec.dims())).map_err(from_heatmap)?
        }
        (None, None) => unreachable!("clap requires an input"),
    };
    save_heatmap(&heat, &a.out).map_err(from_heatmap)
}
