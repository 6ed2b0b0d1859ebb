//! C ABI over `layoutlens`.
//!
//! Objects are opaque handles created by `ll_*_new`/`ll_*_read`-style
//! functions and released with the matching `ll_*_free`. Every fallible call
//! returns an [`LlStatus`]; the message of the last failure on the calling
//! thread is available from [`ll_last_error`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use layoutlens::active::score_scene;
use layoutlens::fit::{fit_pair, FitConfig, HeightMode, Init};
use layoutlens::io::{read_layout, read_scene, write_layout, write_scene};
use layoutlens::layout::{infer_ceiling_height, project_channel, LayoutBoundaries, LayoutHeights};
use layoutlens::losses::{LossKind, LossSet};
use layoutlens::metrics::{evaluate, iou_2d};
use layoutlens::synth::{generate_scene, ScenePair};
use layoutlens::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Schema = 3,
    Io = 4,
    Divergence = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

pub const LL_LOSS_PHOTO: u32 = 1 << 0;
pub const LL_LOSS_CYCLE: u32 = 1 << 1;
pub const LL_LOSS_SRC_TGT: u32 = 1 << 2;
pub const LL_LOSS_CEIL_FLOOR: u32 = 1 << 3;
pub const LL_LOSS_MANHATTAN: u32 = 1 << 4;
pub const LL_LOSS_STRETCH: u32 = 1 << 5;
pub const LL_LOSS_ALL: u32 = (1 << 6) - 1;

/// Initialization of a fit.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlInit {
    Flat = 0,
    GroundTruth = 1,
    /// Ground truth plus Gaussian noise of `sigma` radians.
    Perturbed = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LlFitOptions {
    /// Iterations summed over all resolution stages.
    pub iterations: usize,
    pub learning_rate: f64,
    /// Bitwise OR of `LL_LOSS_*`.
    pub losses: u32,
    pub init: LlInit,
    pub sigma: f64,
    /// Infer the ceiling height from the boundaries instead of using the
    /// annotation.
    pub inferred_heights: bool,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LlFitSummary {
    pub iterations: usize,
    pub best_total: f64,
    pub converged: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LlMetrics {
    pub iou2d: f64,
    pub iou3d: f64,
    pub rmse: f64,
    pub delta1: f64,
}

/// Layout boundaries of one view with their ceiling height.
pub struct LlLayout {
    boundaries: LayoutBoundaries,
    heights: LayoutHeights,
}

/// A synthetic or loaded panorama pair.
pub struct LlScene {
    scene: ScenePair,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("no interior nul"));
}

fn status_of(e: &Error) -> LlStatus {
    match e {
        Error::Schema { .. } => LlStatus::Schema,
        Error::Io { .. } | Error::Image { .. } => LlStatus::Io,
        Error::Divergence { .. } => LlStatus::Divergence,
        _ => LlStatus::InvalidArgument,
    }
}

enum Failure {
    Status(LlStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(LlStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LlStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            LlStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(LlStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread (empty if none). The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ll_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn ll_status_name(status: LlStatus) -> *const c_char {
    let s: &'static CStr = match status {
        LlStatus::Ok => c"ok",
        LlStatus::NullPointer => c"null pointer",
        LlStatus::InvalidArgument => c"invalid argument",
        LlStatus::Schema => c"schema error",
        LlStatus::Io => c"i/o error",
        LlStatus::Divergence => c"divergence",
        LlStatus::BufferTooSmall => c"buffer too small",
        LlStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

// ---------------------------------------------------------------------------
// Layouts

/// Creates a layout from `width` floor angles in (-pi/2, 0), `width` ceiling
/// angles in (0, pi/2) and the ceiling height in camera-height units.
#[no_mangle]
pub unsafe extern "C" fn ll_layout_new(
    floor: *const f64,
    ceil: *const f64,
    width: usize,
    z_ceil: f64,
    out: *mut *mut LlLayout,
) -> LlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let b = LayoutBoundaries::new(
            slice_arg(floor, width, "floor")?.to_vec(),
            slice_arg(ceil, width, "ceil")?.to_vec(),
        )?;
        if !(z_ceil > 0.0 && z_ceil.is_finite()) {
            return Err(Failure::Status(
                LlStatus::InvalidArgument,
                format!("ceiling height {z_ceil} must be positive"),
            ));
        }
        *out = boxed(LlLayout {
            boundaries: b,
            heights: LayoutHeights::with_ceiling(z_ceil),
        });
        Ok(())
    })
}

/// Reads a layout JSON file.
#[no_mangle]
pub unsafe extern "C" fn ll_layout_read(path: *const c_char, out: *mut *mut LlLayout) -> LlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (boundaries, heights) = read_layout(&path_arg(path, "path")?)?;
        *out = boxed(LlLayout { boundaries, heights });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_layout_write(layout: *const LlLayout, path: *const c_char) -> LlStatus {
    guard(|| {
        let l = ref_arg(layout, "layout")?;
        write_layout(&path_arg(path, "path")?, &l.boundaries, &l.heights)?;
        Ok(())
    })
}

/// Column count, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ll_layout_width(layout: *const LlLayout) -> usize {
    layout.as_ref().map_or(0, |l| l.boundaries.width())
}

#[no_mangle]
pub unsafe extern "C" fn ll_layout_ceiling_height(layout: *const LlLayout, out: *mut f64) -> LlStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(layout, "layout")?.heights.z_ceil;
        Ok(())
    })
}

/// Copies the floor (`which` = 0) or ceiling (`which` = 1) angles into
/// `buf`, which must hold at least `ll_layout_width` values.
#[no_mangle]
pub unsafe extern "C" fn ll_layout_angles(layout: *const LlLayout, which: u32, buf: *mut f64, len: usize) -> LlStatus {
    guard(|| {
        let l = ref_arg(layout, "layout")?;
        let src = match which {
            0 => l.boundaries.floor(),
            1 => l.boundaries.ceil(),
            _ => return Err(Failure::Status(LlStatus::InvalidArgument, format!("channel {which} is not 0 or 1"))),
        };
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < src.len() {
            return Err(Failure::Status(
                LlStatus::BufferTooSmall,
                format!("buffer holds {len} values, layout has {}", src.len()),
            ));
        }
        std::slice::from_raw_parts_mut(buf, src.len()).copy_from_slice(src);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_layout_free(layout: *mut LlLayout) {
    if !layout.is_null() {
        drop(Box::from_raw(layout));
    }
}

/// Closed-form ceiling height of boundary angles (camera-height units).
#[no_mangle]
pub unsafe extern "C" fn ll_infer_ceiling_height(
    floor: *const f64,
    ceil: *const f64,
    width: usize,
    out: *mut f64,
) -> LlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let b = LayoutBoundaries::new(
            slice_arg(floor, width, "floor")?.to_vec(),
            slice_arg(ceil, width, "ceil")?.to_vec(),
        )?;
        *out = infer_ceiling_height(&b);
        Ok(())
    })
}

/// Floor-plan IoU of two layouts.
#[no_mangle]
pub unsafe extern "C" fn ll_iou_2d(a: *const LlLayout, b: *const LlLayout, out: *mut f64) -> LlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (a, b) = (ref_arg(a, "a")?, ref_arg(b, "b")?);
        *out = iou_2d(
            &project_channel(a.boundaries.floor(), a.heights.z_floor),
            &project_channel(b.boundaries.floor(), b.heights.z_floor),
        )?;
        Ok(())
    })
}

/// Label-free uncertainty score (Manhattan plus ceiling-floor terms).
#[no_mangle]
pub unsafe extern "C" fn ll_uncertainty_score(layout: *const LlLayout, out: *mut f64) -> LlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let l = ref_arg(layout, "layout")?;
        *out = score_scene("", &l.boundaries, Some(l.heights), None)?.score;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Scenes

/// Renders a synthetic room with `corners` corners as a `height` x `width`
/// panorama pair.
#[no_mangle]
pub unsafe extern "C" fn ll_scene_generate(
    seed: u64,
    corners: usize,
    height: usize,
    width: usize,
    out: *mut *mut LlScene,
) -> LlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = boxed(LlScene {
            scene: generate_scene(seed, corners, height, width)?,
        });
        Ok(())
    })
}

/// Loads a scene directory.
#[no_mangle]
pub unsafe extern "C" fn ll_scene_read(dir: *const c_char, out: *mut *mut LlScene) -> LlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = boxed(LlScene {
            scene: read_scene(&path_arg(dir, "dir")?)?,
        });
        Ok(())
    })
}

/// Writes a scene directory (created if missing).
#[no_mangle]
pub unsafe extern "C" fn ll_scene_write(scene: *const LlScene, dir: *const c_char) -> LlStatus {
    guard(|| {
        let s = ref_arg(scene, "scene")?;
        write_scene(&path_arg(dir, "dir")?, &s.scene)?;
        Ok(())
    })
}

fn view_arg(view: u32) -> Result<bool, Failure> {
    match view {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Failure::Status(LlStatus::InvalidArgument, format!("view {view} is not 0 (a) or 1 (b)"))),
    }
}

/// Ground-truth layout of view `a` (0) or `b` (1).
#[no_mangle]
pub unsafe extern "C" fn ll_scene_gt_layout(scene: *const LlScene, view: u32, out: *mut *mut LlLayout) -> LlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let s = &ref_arg(scene, "scene")?.scene;
        let b = if view_arg(view)? { &s.gt_layout_b } else { &s.gt_layout_a };
        *out = boxed(LlLayout {
            boundaries: b.clone(),
            heights: s.heights,
        });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_scene_free(scene: *mut LlScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Library defaults for [`ll_fit`].
#[no_mangle]
pub unsafe extern "C" fn ll_fit_options_default(out: *mut LlFitOptions) -> LlStatus {
    guard(|| {
        let d = FitConfig::default();
        *out_arg(out, "out")? = LlFitOptions {
            iterations: d.iterations,
            learning_rate: d.optimizer.learning_rate,
            losses: LL_LOSS_ALL,
            init: LlInit::Flat,
            sigma: 0.15,
            inferred_heights: false,
            seed: d.seed,
        };
        Ok(())
    })
}

fn loss_set(mask: u32) -> Result<LossSet, Failure> {
    if mask == 0 || mask & !LL_LOSS_ALL != 0 {
        return Err(Failure::Status(LlStatus::InvalidArgument, format!("loss mask {mask:#x} is invalid")));
    }
    let kinds: Vec<LossKind> = LossKind::ALL
        .into_iter()
        .enumerate()
        .filter(|(k, _)| mask & (1 << k) != 0)
        .map(|(_, kind)| kind)
        .collect();
    Ok(LossSet::of(&kinds))
}

/// Fits both views of `scene`. On success `out_a` and `out_b` receive new
/// layouts owned by the caller; `summary` may be null.
#[no_mangle]
pub unsafe extern "C" fn ll_fit(
    scene: *const LlScene,
    options: *const LlFitOptions,
    out_a: *mut *mut LlLayout,
    out_b: *mut *mut LlLayout,
    summary: *mut LlFitSummary,
) -> LlStatus {
    guard(|| {
        let s = &ref_arg(scene, "scene")?.scene;
        let o = ref_arg(options, "options")?;
        let (out_a, out_b) = (out_arg(out_a, "out_a")?, out_arg(out_b, "out_b")?);
        let mut cfg = FitConfig {
            iterations: o.iterations,
            init: match o.init {
                LlInit::Flat => Init::Flat,
                LlInit::GroundTruth => Init::PerturbedGt { sigma: 0.0 },
                LlInit::Perturbed => Init::PerturbedGt { sigma: o.sigma },
            },
            heights: if o.inferred_heights {
                HeightMode::Inferred
            } else {
                HeightMode::Annotated
            },
            seed: o.seed,
            ..FitConfig::default()
        };
        cfg.optimizer.learning_rate = o.learning_rate;
        cfg.losses.enabled = loss_set(o.losses)?;
        let r = fit_pair(s, &cfg)?;
        if let Some(sum) = summary.as_mut() {
            *sum = LlFitSummary {
                iterations: r.iterations,
                best_total: r.best_total,
                converged: r.converged,
            };
        }
        *out_a = boxed(LlLayout {
            boundaries: r.layout_a,
            heights: r.heights_a,
        });
        *out_b = boxed(LlLayout {
            boundaries: r.layout_b,
            heights: r.heights_b,
        });
        Ok(())
    })
}

/// Metrics of `pred` against the ground truth of view `view` of `scene`.
#[no_mangle]
pub unsafe extern "C" fn ll_evaluate(
    pred: *const LlLayout,
    scene: *const LlScene,
    view: u32,
    out: *mut LlMetrics,
) -> LlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let p = ref_arg(pred, "pred")?;
        let s = &ref_arg(scene, "scene")?.scene;
        let (gt, mask) = if view_arg(view)? {
            (&s.gt_layout_b, &s.pano_b.mask)
        } else {
            (&s.gt_layout_a, &s.pano_a.mask)
        };
        let m = evaluate((&p.boundaries, &p.heights), (gt, &s.heights), s.camera_height, mask)?;
        *out = LlMetrics {
            iou2d: m.iou2d,
            iou3d: m.iou3d,
            rmse: m.rmse,
            delta1: m.delta1,
        };
        Ok(())
    })
}
