//! The `resclip` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use resclip_core::pipeline::{encode, final_attention, resclip_infer_encoded};
use resclip_core::{
    AggregationSpec, AggregationStrategy, BaseMode, BaseModeKind, ClassEmbeddings, Connectivity,
    GaussianSpec, Matrix, SfrSpec, SurgeryConfig, WeightsBundle,
};

use crate::container::{load_class_embeddings, load_weights};
use crate::error::{Error, Result};
use crate::eval::{compare_modes, module_grid, range_sweep, read_manifest, run_benchmark};
use crate::imageio::{read_image_tensor, write_color_png, write_heatmap, write_index_png};
use crate::runner::{build_pool, segment_image_parallel, thread_count};

#[derive(Debug, Parser)]
#[command(
    name = "resclip",
    version,
    about = "Training-free dense CLIP segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment one image; writes an index PNG and a colorized PNG.
    Segment(SegmentArgs),
    /// Evaluate mIoU over a manifest of image/label pairs.
    Eval(EvalArgs),
    /// Dump attention rows of one source patch as heatmaps.
    AttnDump(AttnDumpArgs),
    /// Compare RCS/SFR toggles or aggregation layer ranges over a manifest.
    CompareModes(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Vanilla,
    Sclip,
    Clearclip,
    Naclip,
}

impl From<ModeArg> for BaseModeKind {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Vanilla => BaseModeKind::Vanilla,
            ModeArg::Sclip => BaseModeKind::Sclip,
            ModeArg::Clearclip => BaseModeKind::ClearClip,
            ModeArg::Naclip => BaseModeKind::Naclip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggArg {
    Cla,
    Swa,
}

impl From<AggArg> for AggregationStrategy {
    fn from(a: AggArg) -> Self {
        match a {
            AggArg::Cla => AggregationStrategy::Cumulative,
            AggArg::Swa => AggregationStrategy::SlidingWindow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConnectivityArg {
    #[value(name = "4")]
    Four,
    #[value(name = "8")]
    Eight,
}

fn unit_interval(s: &str) -> std::result::Result<f32, String> {
    let v: f32 = s
        .trim()
        .parse()
        .map_err(|e| format!("{s:?} is not a number: {e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is out of range [0, 1]"))
    }
}

fn layer_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected s:e, got {s:?}"))?;
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad layer index {t:?}: {e}"))
    };
    Ok((parse(a)?, parse(b)?))
}

/// Comma-separated `s:e` list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRanges(pub Vec<(usize, usize)>);

fn layer_ranges(s: &str) -> std::result::Result<LayerRanges, String> {
    s.split(',')
        .map(layer_range)
        .collect::<std::result::Result<_, _>>()
        .map(LayerRanges)
}

fn grid_point(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(',')
        .ok_or_else(|| format!("expected r,c, got {s:?}"))?;
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad coordinate {t:?}: {e}"))
    };
    Ok((parse(r)?, parse(c)?))
}

/// Surgery and tiling flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct SurgeryArgs {
    /// Self-correlation base mode of the final block.
    #[arg(long, value_enum, default_value_t = ModeArg::Naclip)]
    pub mode: ModeArg,
    /// Weight of the cross-correlation average, in [0, 1].
    #[arg(long, value_parser = unit_interval, default_value_t = 0.5)]
    pub lambda_rcs: f32,
    /// Weight of the refinement scores, in [0, 1].
    #[arg(long, value_parser = unit_interval, default_value_t = 0.7)]
    pub lambda_sfr: f32,
    /// Intermediate-layer aggregation: cumulative or sliding window.
    #[arg(long, value_enum, default_value_t = AggArg::Swa)]
    pub agg: AggArg,
    /// Inclusive 1-based layer range s:e for the aggregation.
    #[arg(long, value_name = "S:E", value_parser = layer_range, default_value = "6:9")]
    pub layers: (usize, usize),
    /// Odd Gaussian kernel length for refinement smoothing.
    #[arg(long, value_name = "K", default_value_t = 5)]
    pub gauss_size: usize,
    #[arg(long, value_name = "F", default_value_t = 1.0)]
    pub gauss_sigma: f32,
    /// Smooth over the 2-D patch grid instead of the flattened row.
    #[arg(long)]
    pub gauss_2d: bool,
    /// Region connectivity for the refinement flood fill.
    #[arg(long, value_enum, default_value_t = ConnectivityArg::Eight)]
    pub connectivity: ConnectivityArg,
    /// Multiplier on the refinement scores before blending.
    #[arg(long, value_name = "F", default_value_t = 1.0)]
    pub gain: f32,
    /// Number of feedback refinement passes after the first pass.
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub passes: usize,
    #[arg(long, value_name = "N", default_value_t = 224)]
    pub window: usize,
    #[arg(long, value_name = "N", default_value_t = 112)]
    pub stride: usize,
    /// Shorter image side at working resolution.
    #[arg(long, value_name = "N", default_value_t = 336)]
    pub short_side: usize,
    /// Head-average the aggregated intermediate attention.
    #[arg(long)]
    pub head_avg: bool,
    /// Keep the final block's attention residual [default: true, false for clearclip].
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    pub keep_residual: Option<bool>,
    /// Keep the final block's FFN [default: true, false for clearclip].
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    pub keep_ffn: Option<bool>,
    /// Neighbourhood prior width for naclip mode.
    #[arg(long, value_name = "F", default_value_t = resclip_core::attention::DEFAULT_PRIOR_SIGMA)]
    pub prior_sigma: f32,
}

impl SurgeryArgs {
    pub fn to_config(&self) -> SurgeryConfig {
        let mut base_mode = BaseMode::new(self.mode.into());
        if let Some(r) = self.keep_residual {
            base_mode.keep_final_residual = r;
        }
        if let Some(f) = self.keep_ffn {
            base_mode.keep_final_ffn = f;
        }
        base_mode.prior_sigma = self.prior_sigma;
        SurgeryConfig {
            base_mode,
            lambda_rcs: self.lambda_rcs,
            lambda_sfr: self.lambda_sfr,
            agg: AggregationSpec {
                strategy: self.agg.into(),
                start: self.layers.0,
                end: self.layers.1,
            },
            sfr: SfrSpec {
                gaussian: GaussianSpec {
                    size: self.gauss_size,
                    sigma: self.gauss_sigma,
                    two_d: self.gauss_2d,
                },
                connectivity: match self.connectivity {
                    ConnectivityArg::Four => Connectivity::Four,
                    ConnectivityArg::Eight => Connectivity::Eight,
                },
            },
            gain: self.gain,
            feedback_passes: self.passes,
            head_avg: self.head_avg,
            window: self.window,
            stride: self.stride,
            short_side: self.short_side,
        }
    }
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long, value_name = "PATH")]
    pub weights: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub classes: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub surgery: SurgeryArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub weights: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub classes: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub surgery: SurgeryArgs,
}

#[derive(Debug, Args)]
pub struct AttnDumpArgs {
    #[arg(long, value_name = "PATH")]
    pub weights: PathBuf,
    /// Needed for the refined map, which depends on a first-pass segmentation.
    #[arg(long, value_name = "PATH")]
    pub classes: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// Source patch as row,column on the patch grid.
    #[arg(long, value_name = "R,C", value_parser = grid_point)]
    pub point: (usize, usize),
    /// Write one map per head instead of the head average.
    #[arg(long)]
    pub per_head: bool,
    /// Pixel size of one patch cell in the heatmaps.
    #[arg(long, value_name = "N", default_value_t = 16)]
    pub cell: usize,
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub surgery: SurgeryArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, value_name = "PATH")]
    pub weights: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub classes: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Sweep these layer ranges (e.g. 2:5,4:7,6:9,8:11) with --agg instead of
    /// the RCS/SFR module grid.
    #[arg(long, value_name = "S:E,..", value_parser = layer_ranges)]
    pub ranges: Option<LayerRanges>,
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub surgery: SurgeryArgs,
}

/// Exit status for a failed command: 2 for missing inputs and invalid
/// settings, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } if err.is_missing_file() => 2,
        Error::Core(
            resclip_core::Error::Validation(_) | resclip_core::Error::OutOfRange { .. },
        ) => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Segment(a) => cmd_segment(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::AttnDump(a) => cmd_attn_dump(&a),
        Command::CompareModes(a) => cmd_compare(&a),
    }
}

fn load_model(
    weights: &Path,
    classes: &Path,
    cfg: &SurgeryConfig,
) -> Result<(WeightsBundle, ClassEmbeddings)> {
    cfg.validate()?;
    let bundle = load_weights(weights)?;
    let classes = load_class_embeddings(classes)?;
    cfg.validate_for(&bundle)?;
    Ok((bundle, classes))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_segment(a: &SegmentArgs) -> Result<()> {
    let cfg = a.surgery.to_config();
    let (bundle, classes) = load_model(&a.weights, &a.classes, &cfg)?;
    let image = read_image_tensor(&a.image, &bundle.meta)?;
    let pool = build_pool(thread_count())?;
    let (_, seg) = segment_image_parallel(&pool, &image, &bundle, &classes, &cfg)?;

    create_dir(&a.out)?;
    let stem = a
        .image
        .file_stem()
        .map_or_else(|| "segment".into(), |s| s.to_string_lossy().into_owned());
    let index_path = a.out.join(format!("{stem}_index.png"));
    let color_path = a.out.join(format!("{stem}_color.png"));
    write_index_png(&index_path, &seg)?;
    write_color_png(&color_path, &seg)?;

    let mut counts = vec![0usize; classes.len()];
    for &l in &seg.labels {
        counts[l as usize] += 1;
    }
    let total = seg.labels.len().max(1) as f64;
    let width = classes.names().iter().map(|n| n.len()).max().unwrap_or(0);
    for (name, n) in classes.names().iter().zip(&counts) {
        println!("{name:<width$}  {:6.2}%", 100.0 * *n as f64 / total);
    }
    println!(
        "wrote {} and {}",
        index_path.display(),
        color_path.display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.surgery.to_config();
    let (bundle, classes) = load_model(&a.weights, &a.classes, &cfg)?;
    let entries = read_manifest(&a.manifest)?;
    let pool = build_pool(thread_count())?;
    let report = run_benchmark(&pool, &entries, &bundle, &classes, &cfg)?;
    create_dir(&a.out)?;
    let table = report.to_table();
    write_text(
        &a.out.join("report.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    write_text(&a.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let cfg = a.surgery.to_config();
    cfg.validate()?;
    let bundle = load_weights(&a.weights)?;
    let classes = load_class_embeddings(&a.classes)?;
    let variants = match &a.ranges {
        Some(ranges) => range_sweep(&cfg, a.surgery.agg.into(), &ranges.0),
        None => module_grid(&cfg),
    };
    let entries = read_manifest(&a.manifest)?;
    let pool = build_pool(thread_count())?;
    let report = compare_modes(&pool, &entries, &bundle, &classes, &variants)?;
    create_dir(&a.out)?;
    let table = report.to_table();
    write_text(
        &a.out.join("compare.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    write_text(&a.out.join("compare.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Patch columns of one attention row (the cls column is dropped).
fn patch_row(m: &Matrix, token: usize) -> Vec<f32> {
    m.row(token)[1..].to_vec()
}

fn mean_rows(heads: &[Matrix], token: usize) -> Vec<f32> {
    let n = heads[0].cols();
    let mut out = vec![0.0f32; n];
    for h in heads {
        for (o, v) in out.iter_mut().zip(h.row(token)) {
            *o += *v;
        }
    }
    let inv = heads.len() as f32;
    out.iter_mut().for_each(|o| *o /= inv);
    out
}

struct Dumper<'a> {
    out: &'a Path,
    grid: (usize, usize),
    token: usize,
    cell: usize,
    per_head: bool,
}

impl Dumper<'_> {
    /// Writes the chosen row of `heads` and reports its sum over all tokens.
    fn dump(&self, name: &str, heads: &[Matrix]) -> Result<()> {
        let (h, w) = self.grid;
        let full = mean_rows(heads, self.token);
        let sum: f32 = full.iter().sum();
        let min = full.iter().copied().fold(f32::INFINITY, f32::min);
        let row = &full[full.len() - h * w..];
        write_heatmap(self.out.join(format!("{name}.png")), row, h, w, self.cell)?;
        println!("{name}: row sum {sum:.6}, min {min:.6}");
        if self.per_head {
            for (i, m) in heads.iter().enumerate() {
                let row = patch_row(m, self.token);
                let row = &row[row.len() - h * w..];
                write_heatmap(
                    self.out.join(format!("{name}_head{i}.png")),
                    row,
                    h,
                    w,
                    self.cell,
                )?;
            }
        }
        Ok(())
    }
}

/// The image is resized to one `window × window` tile before the forward.
fn cmd_attn_dump(a: &AttnDumpArgs) -> Result<()> {
    let mut cfg = a.surgery.to_config();
    // Tiling flags do not apply to a single window.
    cfg.stride = cfg.stride.min(cfg.window).max(1);
    cfg.short_side = cfg.short_side.max(cfg.window);
    cfg.validate()?;
    let bundle = load_weights(&a.weights)?;
    cfg.validate_for(&bundle)?;
    let classes = a.classes.as_ref().map(load_class_embeddings).transpose()?;
    let image = read_image_tensor(&a.image, &bundle.meta)?;
    let p = bundle.meta.patch_size;
    let side = (cfg.window / p) * p;
    if side == 0 {
        return Err(resclip_core::Error::Validation(format!(
            "window {} is smaller than the patch size {p}",
            cfg.window
        ))
        .into());
    }
    let encoded = encode(&image.resize(side, side)?, &bundle)?;
    let (gh, gw) = encoded.grid();
    let (r, c) = a.point;
    if r >= gh || c >= gw {
        return Err(resclip_core::Error::Validation(format!(
            "point {r},{c} is outside the {gh}x{gw} patch grid"
        ))
        .into());
    }
    create_dir(&a.out)?;
    let dumper = Dumper {
        out: &a.out,
        grid: (gh, gw),
        token: 1 + r * gw + c,
        cell: a.cell,
        per_head: a.per_head,
    };
    for layer in 1..=encoded.trace.depth() {
        let heads = encoded.trace.layer(layer).expect("layer within depth");
        dumper.dump(&format!("layer_{layer:02}"), heads)?;
    }
    let mask = match &classes {
        Some(classes) => {
            let mut first = cfg.clone();
            first.feedback_passes = cfg.feedback_passes.saturating_sub(1);
            Some(resclip_infer_encoded(&encoded, &bundle, classes, &first)?.0)
        }
        None => {
            eprintln!("warning: no --classes given, skipping final_a_resclip");
            None
        }
    };
    let attn = final_attention(&encoded, &cfg, mask.as_ref())?;
    dumper.dump("final_a_s", &attn.base)?;
    dumper.dump("final_a_rcs", &attn.rcs)?;
    if let Some(refined) = &attn.refined {
        dumper.dump("final_a_resclip", refined)?;
    }
    Ok(())
}
