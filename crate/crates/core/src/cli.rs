//! Command-line interface: synthesize scenes, fit, evaluate, warp, score and
//! check gradients.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::active::{ranked, score_scene, UncertaintyScore};
use crate::dlvr::{render_point_grid, warp};
use crate::error::{Error, Result};
use crate::fidelity::{check_losses, FidelityOptions};
use crate::fit::{fit_pair, FitConfig, FitResult, HeightMode, Init};
use crate::geometry::ImageGrid;
use crate::io::{
    fit_log_jsonl, read_layout, read_manifest, read_scene, to_json_string, write_atomic, write_depth_png, write_json,
    write_layout, write_rgb_png, write_scene, Manifest, ManifestEntry, MANIFEST_JSON,
};
use crate::losses::LossSet;
use crate::metrics::{evaluate, summarize, MetricReport, MetricSummary};
use crate::synth::generate_scene;

pub const JOBS_ENV: &str = "LAYOUTLENS_JOBS";

#[derive(Debug, Parser)]
#[command(name = "layoutlens", version, about = "Room layout fitting from panorama pairs")]
pub struct Cli {
    /// Worker threads for batch work (defaults to all cores).
    #[arg(long, global = true, env = JOBS_ENV)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scene directories.
    Synth(SynthArgs),
    /// Fit the layouts of one scene.
    Fit(FitArgs),
    /// Compare predicted layouts with ground truth.
    Eval(EvalArgs),
    /// Warp one panorama of a scene into the other view.
    Warp(WarpArgs),
    /// Rank scenes by label-free uncertainty.
    Score(ScoreArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("`{s}` is not HxW"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    if h < 2 || w < 2 {
        return Err(format!("`{s}` is too small"));
    }
    Ok((h, w))
}

fn parse_corners(s: &str) -> std::result::Result<usize, String> {
    let n: usize = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(4..=12).contains(&n) || n % 2 == 1 {
        return Err(format!("{n} corners: Manhattan rooms need an even count in 4..=12"));
    }
    Ok(n)
}

fn parse_losses(s: &str) -> std::result::Result<LossSet, String> {
    let set = LossSet::parse(s).map_err(|e| e.to_string())?;
    if set.is_empty() {
        return Err("no losses given".into());
    }
    Ok(set)
}

/// Resolution stages given as `HxW,HxW,...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule(pub Vec<(usize, usize)>);

fn parse_schedule(s: &str) -> std::result::Result<Schedule, String> {
    s.split(',').map(parse_size).collect::<std::result::Result<_, _>>().map(Schedule)
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    pub rooms: usize,
    #[arg(long, default_value = "4", value_parser = parse_corners)]
    pub corners: usize,
    /// Seed of the first room; room `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "256x512", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long)]
    pub out: PathBuf,
    /// Also write 16-bit millimeter depth PNGs.
    #[arg(long)]
    pub depth_png: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Flat,
    /// Ground-truth boundaries from the scene.
    Gt,
    /// Ground truth plus Gaussian noise of `--sigma` radians.
    Perturbed,
    /// Layout files given by `--init-a` and `--init-b`.
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeightsArg {
    Annotated,
    Inferred,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Comma-separated loss names, or `all`.
    #[arg(long, default_value = "all", value_parser = parse_losses)]
    pub losses: LossSet,
    /// Iterations summed over all resolution stages.
    #[arg(long, default_value_t = 300)]
    pub iters: usize,
    /// Output directory for layout_a.json, layout_b.json and fit_log.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = InitArg::Flat)]
    pub init: InitArg,
    #[arg(long, default_value_t = 0.15)]
    pub sigma: f64,
    #[arg(long, required_if_eq("init", "user"))]
    pub init_a: Option<PathBuf>,
    #[arg(long, required_if_eq("init", "user"))]
    pub init_b: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = HeightsArg::Annotated)]
    pub heights: HeightsArg,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Resolution stages, e.g. `64x128,128x256,256x512`.
    #[arg(long, value_parser = parse_schedule)]
    pub schedule: Option<Schedule>,
    /// Weight of every auxiliary loss.
    #[arg(long)]
    pub aux_weight: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ViewArg {
    A,
    B,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "batch", conflicts_with = "batch")]
    pub pred: Option<PathBuf>,
    #[arg(long, required_unless_present = "batch", conflicts_with = "batch")]
    pub scene: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ViewArg::A)]
    pub view: ViewArg,
    /// Manifest whose entries carry predictions; prints aggregates per
    /// ground-truth corner count.
    #[arg(long)]
    pub batch: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    /// Panorama `a` seen from view `b`.
    A2b,
    B2a,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Layout of the target view.
    #[arg(long)]
    pub layout: PathBuf,
    #[arg(long, value_enum)]
    pub direction: DirectionArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Difference image path (defaults to `<out>_diff.png`).
    #[arg(long)]
    pub diff: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Manhattan median half-window (scaled from the width by default).
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "all", value_parser = parse_losses)]
    pub losses: LossSet,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive scene seeds to check.
    #[arg(long, default_value_t = 1)]
    pub scenes: u64,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut impl Write, stderr: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = write!(if e.use_stderr() { stderr as &mut dyn Write } else { stdout as &mut dyn Write }, "{}", e.render());
            return code;
        }
    };
    match run(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, out: &mut impl Write) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    let text = pool.install(|| match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Warp(a) => cmd_warp(a),
        Command::Score(a) => cmd_score(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    });
    // Partial output (e.g. the gradcheck table) is printed before the error.
    let (text, err) = match text {
        Ok(t) => (t, None),
        Err((t, e)) => (t, Some(e)),
    };
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
    err.map_or(Ok(()), Err)
}

type CmdResult = std::result::Result<String, (String, Error)>;

fn plain<T>(r: Result<T>) -> std::result::Result<T, (String, Error)> {
    r.map_err(|e| (String::new(), e))
}

fn scene_dir_name(i: usize) -> String {
    format!("scene_{i:04}")
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    if a.rooms == 0 {
        return Err((String::new(), Error::Config("--rooms must be positive".into())));
    }
    plain(std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e)))?;
    let (h, w) = a.size;
    plain(
        (0..a.rooms)
            .into_par_iter()
            .map(|i| -> Result<()> {
                let scene = generate_scene(a.seed + i as u64, a.corners, h, w)?;
                let dir = a.out.join(scene_dir_name(i));
                write_scene(&dir, &scene)?;
                if a.depth_png {
                    write_depth_png(&dir.join("depth_a.png"), &scene.depth_a)?;
                    write_depth_png(&dir.join("depth_b.png"), &scene.depth_b)?;
                }
                Ok(())
            })
            .collect::<Result<Vec<()>>>(),
    )?;
    let manifest = Manifest {
        scenes: (0..a.rooms).map(|i| ManifestEntry::scene_only(scene_dir_name(i))).collect(),
    };
    plain(write_json(&a.out.join(MANIFEST_JSON), &manifest))?;
    Ok(to_json_string(&manifest))
}

pub const LAYOUT_A: &str = "layout_a.json";
pub const LAYOUT_B: &str = "layout_b.json";
pub const FIT_LOG: &str = "fit_log.jsonl";

#[derive(Debug, Serialize)]
struct FitSummary {
    converged: bool,
    iterations: usize,
    best_total: f64,
    stretch: crate::layout::StretchParams,
    layout_a: PathBuf,
    layout_b: PathBuf,
    log: PathBuf,
}

/// Builds the fit configuration from the command-line flags.
pub fn fit_config(a: &FitArgs) -> Result<FitConfig> {
    let mut cfg = FitConfig {
        iterations: a.iters,
        schedule: a.schedule.clone().map(|s| s.0),
        seed: a.seed,
        heights: match a.heights {
            HeightsArg::Annotated => HeightMode::Annotated,
            HeightsArg::Inferred => HeightMode::Inferred,
        },
        ..FitConfig::default()
    };
    cfg.losses.enabled = a.losses;
    if let Some(w) = a.aux_weight {
        cfg.losses.aux_weight = w;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.learning_rate = lr;
    }
    if let Some(t) = a.tolerance {
        cfg.tolerance = t;
    }
    cfg.init = match a.init {
        InitArg::Flat => Init::Flat,
        InitArg::Gt => Init::PerturbedGt { sigma: 0.0 },
        InitArg::Perturbed => Init::PerturbedGt { sigma: a.sigma },
        InitArg::User => {
            let load = |p: &Option<PathBuf>| -> Result<_> {
                let p = p.as_ref().ok_or_else(|| Error::Config("--init user needs --init-a and --init-b".into()))?;
                Ok(read_layout(p)?.0)
            };
            Init::User {
                a: load(&a.init_a)?,
                b: load(&a.init_b)?,
            }
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_fit(a: &FitArgs) -> CmdResult {
    let cfg = plain(fit_config(a))?;
    let scene = plain(read_scene(&a.scene))?;
    plain(std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e)))?;
    let log = a.out.join(FIT_LOG);
    let result: FitResult = match fit_pair(&scene, &cfg) {
        Ok(r) => r,
        Err(Error::Divergence { iteration, trajectory }) => {
            let text = plain(fit_log_jsonl(&trajectory, None))?;
            plain(write_atomic(&log, text.as_bytes()))?;
            return Err((String::new(), Error::Divergence { iteration, trajectory }));
        }
        Err(e) => return Err((String::new(), e)),
    };
    let (pa, pb) = (a.out.join(LAYOUT_A), a.out.join(LAYOUT_B));
    plain(write_layout(&pa, &result.layout_a, &result.heights_a))?;
    plain(write_layout(&pb, &result.layout_b, &result.heights_b))?;
    let text = plain(fit_log_jsonl(&result.trajectory, Some(&result.stage_of)))?;
    plain(write_atomic(&log, text.as_bytes()))?;
    Ok(to_json_string(&FitSummary {
        converged: result.converged,
        iterations: result.iterations,
        best_total: result.best_total,
        stretch: result.stretch,
        layout_a: pa,
        layout_b: pb,
        log,
    }))
}

/// Metrics of the layout in `pred` against view `view` of the scene in
/// `scene_dir`.
pub fn eval_prediction(pred: &Path, scene_dir: &Path, view: ViewArg) -> Result<(MetricReport, usize)> {
    let scene = read_scene(scene_dir)?;
    let (b, h) = read_layout(pred)?;
    let (gt, mask) = match view {
        ViewArg::A => (&scene.gt_layout_a, &scene.pano_a.mask),
        ViewArg::B => (&scene.gt_layout_b, &scene.pano_b.mask),
    };
    if b.width() != gt.width() {
        return Err(Error::schema(pred, format!("width: {} but the scene is {} wide", b.width(), gt.width())));
    }
    let report = evaluate((&b, &h), (gt, &scene.heights), scene.camera_height, mask)?;
    Ok((report, scene.corners))
}

#[derive(Debug, Serialize)]
pub struct GroupSummary {
    pub corners: usize,
    #[serde(flatten)]
    pub summary: MetricSummary,
}

#[derive(Debug, Serialize)]
pub struct BatchSummary {
    pub groups: Vec<GroupSummary>,
    pub overall: MetricSummary,
}

/// Evaluates every prediction of a manifest, grouped by corner count.
pub fn eval_batch(manifest: &Path) -> Result<BatchSummary> {
    let m = read_manifest(manifest)?;
    let jobs: Vec<(PathBuf, PathBuf, ViewArg)> = m
        .scenes
        .iter()
        .flat_map(|e| {
            e.predictions().map(move |(v, p)| {
                let view = if v == 'a' { ViewArg::A } else { ViewArg::B };
                (p.clone(), e.scene.clone(), view)
            })
        })
        .collect();
    if jobs.is_empty() {
        return Err(Error::Config(format!("{}: no predictions to evaluate", manifest.display())));
    }
    let results = jobs
        .par_iter()
        .map(|(p, s, v)| eval_prediction(p, s, *v))
        .collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<usize, Vec<MetricReport>> = BTreeMap::new();
    for (r, c) in &results {
        groups.entry(*c).or_default().push(*r);
    }
    let all: Vec<MetricReport> = results.iter().map(|(r, _)| *r).collect();
    Ok(BatchSummary {
        groups: groups
            .into_iter()
            .map(|(corners, rs)| GroupSummary {
                corners,
                summary: summarize(&rs).expect("non-empty group"),
            })
            .collect(),
        overall: summarize(&all).expect("non-empty batch"),
    })
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    if let Some(m) = &a.batch {
        return Ok(to_json_string(&plain(eval_batch(m))?));
    }
    let (pred, scene) = match (&a.pred, &a.scene) {
        (Some(p), Some(s)) => (p, s),
        _ => return Err((String::new(), Error::Config("--pred and --scene are required".into()))),
    };
    Ok(to_json_string(&plain(eval_prediction(pred, scene, a.view))?.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WarpReport {
    /// Mean over valid pixels of the per-pixel squared color distance.
    pub mse: f64,
    /// The same restricted to wall pixels of the target layout.
    pub wall_mse: f64,
    pub valid_pixels: usize,
    pub wall_pixels: usize,
}

/// Heat color of an absolute difference in `[0, 1]`.
fn heat(d: f64) -> [f64; 3] {
    let t = (d * 4.0).clamp(0.0, 1.0) * 3.0;
    [t.min(1.0), (t - 1.0).clamp(0.0, 1.0), (t - 2.0).clamp(0.0, 1.0)]
}

fn default_diff_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_diff.png"))
}

fn cmd_warp(a: &WarpArgs) -> CmdResult {
    let scene = plain(read_scene(&a.scene))?;
    let (b, h) = plain(read_layout(&a.layout))?;
    let (src, tgt, pose_t_to_s) = match a.direction {
        DirectionArg::A2b => (&scene.pano_a, &scene.pano_b, scene.pose_b_to_a()),
        DirectionArg::B2a => (&scene.pano_b, &scene.pano_a, scene.pose_a_to_b()),
    };
    if b.width() != tgt.width() {
        return Err((
            String::new(),
            Error::schema(&a.layout, format!("width: {} but the scene is {} wide", b.width(), tgt.width())),
        ));
    }
    let warped = plain(warp(src, &b, &h, &pose_t_to_s))?;
    let grid = plain(render_point_grid(&b, &h, tgt.height(), tgt.width()))?;
    let (height, width) = (tgt.height(), tgt.width());
    let ch = tgt.image.channels();
    let mut diff = vec![0.0; height * width * 3];
    let mut report = WarpReport {
        mse: 0.0,
        wall_mse: 0.0,
        valid_pixels: 0,
        wall_pixels: 0,
    };
    for k in 0..height * width {
        if !(warped.mask.data()[k] && tgt.mask.data()[k]) {
            continue;
        }
        let t = &tgt.image.data()[k * ch..(k + 1) * ch];
        let w = &warped.image.data()[k * ch..(k + 1) * ch];
        let sq: f64 = t.iter().zip(w).map(|(x, y)| (x - y) * (x - y)).sum();
        let abs: f64 = t.iter().zip(w).map(|(x, y)| (x - y).abs()).sum::<f64>() / ch as f64;
        diff[k * 3..k * 3 + 3].copy_from_slice(&heat(abs));
        report.mse += sq;
        report.valid_pixels += 1;
        if grid.segment[k].is_wall() {
            report.wall_mse += sq;
            report.wall_pixels += 1;
        }
    }
    report.mse /= report.valid_pixels.max(1) as f64;
    report.wall_mse /= report.wall_pixels.max(1) as f64;
    plain(write_rgb_png(&a.out, &warped.image))?;
    let diff_img = plain(ImageGrid::from_data(height, width, 3, diff))?;
    let diff_path = a.diff.clone().unwrap_or_else(|| default_diff_path(&a.out));
    plain(write_rgb_png(&diff_path, &diff_img))?;
    Ok(to_json_string(&report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreTerms {
    pub manhattan: f64,
    pub ceil_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingEntry {
    pub scene: String,
    pub score: f64,
    pub terms: ScoreTerms,
}

/// Scores every scene of a manifest from its predictions (averaged over the
/// views that have one), highest score first.
pub fn score_manifest(manifest: &Path, window: Option<usize>) -> Result<Vec<RankingEntry>> {
    let m = read_manifest(manifest)?;
    if m.scenes.is_empty() {
        return Err(Error::Config(format!("{}: empty manifest", manifest.display())));
    }
    let scores = m
        .scenes
        .par_iter()
        .enumerate()
        .map(|(i, e)| -> Result<UncertaintyScore> {
            let id = e
                .scene
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| e.scene.display().to_string());
            let preds: Vec<_> = e.predictions().collect();
            if preds.is_empty() {
                return Err(Error::schema(manifest, format!("scenes[{i}]: no prediction to score")));
            }
            let mut sum = UncertaintyScore {
                scene: id,
                manhattan: 0.0,
                ceil_floor: 0.0,
                score: 0.0,
            };
            for (_, p) in &preds {
                let (b, h) = read_layout(p)?;
                let s = score_scene("", &b, Some(h), window)?;
                sum.manhattan += s.manhattan / preds.len() as f64;
                sum.ceil_floor += s.ceil_floor / preds.len() as f64;
            }
            sum.score = sum.manhattan + sum.ceil_floor;
            Ok(sum)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ranked(&scores)?
        .into_iter()
        .map(|s| RankingEntry {
            scene: s.scene,
            score: s.score,
            terms: ScoreTerms {
                manhattan: s.manhattan,
                ceil_floor: s.ceil_floor,
            },
        })
        .collect())
}

fn cmd_score(a: &ScoreArgs) -> CmdResult {
    let ranking = plain(score_manifest(&a.manifest, a.window))?;
    plain(write_json(&a.out, &ranking))?;
    Ok(to_json_string(&ranking))
}

#[derive(Debug, Serialize)]
struct GradcheckLine {
    loss: &'static str,
    worst_rel_err: f64,
    min_fraction_passing: f64,
    checked: usize,
    skipped: usize,
    pass: bool,
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    let opts = FidelityOptions::default();
    let seeds: Vec<u64> = (a.seed..a.seed + a.scenes.max(1)).collect();
    let all = plain(
        seeds
            .par_iter()
            .map(|&s| check_losses(a.losses, s, &opts))
            .collect::<Result<Vec<_>>>(),
    )?;
    let mut text = String::new();
    let mut failed = Vec::new();
    for kind in a.losses.kinds() {
        let rows: Vec<_> = all.iter().flatten().filter(|r| r.loss == kind).collect();
        let line = GradcheckLine {
            loss: kind.name(),
            worst_rel_err: rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
            min_fraction_passing: rows.iter().map(|r| r.fraction_passing).fold(1.0, f64::min),
            checked: rows.iter().map(|r| r.checked).sum(),
            skipped: rows.iter().map(|r| r.skipped).sum(),
            pass: rows.iter().all(|r| r.passes()),
        };
        if !line.pass {
            failed.push(kind.name());
        }
        text.push_str(&serde_json::to_string(&line).expect("serializable line"));
        text.push('\n');
    }
    if failed.is_empty() {
        Ok(text)
    } else {
        Err((text, Error::GradientCheck(failed.join(", "))))
    }
}
