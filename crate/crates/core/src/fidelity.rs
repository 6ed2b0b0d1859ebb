//! Finite-difference check of every loss on seeded synthetic scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Affine2;
use crate::grad::{branch_change_predicate, fd_check, Coord, FdOptions, FdReport, Tape, Var};
use crate::layout::{constrain, infer_ceiling_height, LayoutBoundaries, LayoutHeights, RawBoundaries, StretchParams};
use crate::losses::{
    ceil_floor_var, cycle_var, default_window, manhattan_branches, manhattan_var, photometric_branches,
    photometric_var, source_target_branches, source_target_var, stretch_var, ChamferReduction, LossKind, LossSet,
    ViewVars,
};
use crate::synth::generate_scene;

/// Fraction of checked coordinates that must pass.
pub const PASS_FRACTION: f64 = 0.95;

#[derive(Debug, Clone)]
pub struct FidelityOptions {
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the noise added to the raw ground truth.
    pub raw_noise: f64,
    /// Photometric coordinates sampled per case (the others check every
    /// coordinate).
    pub photo_samples: usize,
    pub fd: FdOptions,
}

impl Default for FidelityOptions {
    fn default() -> Self {
        Self {
            height: 32,
            width: 64,
            raw_noise: 0.3,
            photo_samples: 64,
            fd: FdOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossFidelity {
    pub loss: LossKind,
    pub seed: u64,
    pub inferred_heights: bool,
    pub checked: usize,
    pub skipped: usize,
    pub fraction_passing: f64,
    pub max_rel_err: f64,
}

impl LossFidelity {
    fn new(loss: LossKind, seed: u64, inferred_heights: bool, r: FdReport) -> Self {
        Self {
            loss,
            seed,
            inferred_heights,
            checked: r.checked,
            skipped: r.skipped,
            fraction_passing: r.fraction_passing,
            max_rel_err: r.max_rel_err,
        }
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.fraction_passing >= PASS_FRACTION
    }
}

/// Runs the check for every loss in `losses` on the scene generated from
/// `seed`, with annotated and with inferred ceiling heights.
pub fn check_losses(losses: LossSet, seed: u64, opts: &FidelityOptions) -> Result<Vec<LossFidelity>> {
    if losses.is_empty() {
        return Err(Error::Config("no losses selected".into()));
    }
    let corners = 4 + 2 * (seed % 3) as usize;
    let scene = generate_scene(seed, corners, opts.height, opts.width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let noise = Normal::new(0.0, opts.raw_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut jitter = |b: &LayoutBoundaries| {
        let raw = b.to_raw();
        let mut f = |v: &[f64]| v.iter().map(|x| x + noise.sample(&mut rng)).collect::<Vec<_>>();
        RawBoundaries::new(f(&raw.floor), f(&raw.ceil))
    };
    let raw = jitter(&scene.gt_layout_a)?;
    let teacher = constrain(&jitter(&scene.gt_layout_a)?);
    let k = StretchParams::new(rng.random_range(0.8..1.25), rng.random_range(0.8..1.25))?;
    let source = &scene.gt_layout_b;
    let xf = Affine2::from(scene.pose_a_to_b());
    let s_to_t = scene.pose_b_to_a();
    let window = default_window(opts.width);

    let mut out = Vec::new();
    for annotated in [Some(scene.heights), None] {
        let hs = |b: &LayoutBoundaries| annotated.unwrap_or_else(|| LayoutHeights::with_ceiling(infer_ceiling_height(b)));
        let view = |t: &mut Tape, f: Var, c: Var| ViewVars::new(t, f, c, annotated);
        let no_skip = |_: Coord| false;
        for kind in losses.kinds() {
            let fd = &opts.fd;
            let report = match kind {
                LossKind::Photo => {
                    let loss = |t: &mut Tape, f: Var, c: Var| {
                        let v = view(t, f, c)?;
                        photometric_var(t, &scene.pano_a, &scene.pano_b, &xf, &v)
                    };
                    let skip = branch_change_predicate(&raw, fd.step, |p, c| {
                        let b = constrain(p);
                        photometric_branches(&scene.pano_a, &scene.pano_b, &xf, &b, &hs(&b), c.column).unwrap_or_default()
                    });
                    let sampled = FdOptions {
                        samples: Some(opts.photo_samples),
                        seed,
                        ..fd.clone()
                    };
                    fd_check(&loss, &raw, &sampled, skip)?
                }
                LossKind::Cycle => {
                    let loss = |t: &mut Tape, f: Var, c: Var| {
                        let v = view(t, f, c)?;
                        let teach = ViewVars::constant(t, &teacher, &scene.heights);
                        cycle_var(t, &v, &teach)
                    };
                    fd_check(&loss, &raw, fd, no_skip)?
                }
                LossKind::Stretch => {
                    let loss = |t: &mut Tape, f: Var, c: Var| {
                        let v = view(t, f, c)?;
                        let teach = ViewVars::constant(t, &teacher, &scene.heights);
                        stretch_var(t, &v, &teach, &k)
                    };
                    fd_check(&loss, &raw, fd, no_skip)?
                }
                LossKind::SrcTgt => {
                    let loss = |t: &mut Tape, f: Var, c: Var| {
                        let v = view(t, f, c)?;
                        let s = ViewVars::constant(t, source, &scene.heights);
                        source_target_var(t, &s, &v, &s_to_t, ChamferReduction::Mean)
                    };
                    let skip = branch_change_predicate(&raw, fd.step, |p, _| {
                        let b = constrain(p);
                        source_target_branches(source, &scene.heights, &b, &hs(&b), &s_to_t)
                    });
                    fd_check(&loss, &raw, fd, skip)?
                }
                LossKind::CeilFloor => {
                    let loss = |t: &mut Tape, f: Var, c: Var| {
                        let v = view(t, f, c)?;
                        ceil_floor_var(t, &v)
                    };
                    fd_check(&loss, &raw, fd, no_skip)?
                }
                LossKind::Manhattan => {
                    let loss = |t: &mut Tape, f: Var, c: Var| {
                        let v = view(t, f, c)?;
                        manhattan_var(t, &v, window)
                    };
                    let skip = branch_change_predicate(&raw, fd.step, |p, _| {
                        let b = constrain(p);
                        manhattan_branches(&b, &hs(&b), window)
                    });
                    fd_check(&loss, &raw, fd, skip)?
                }
            };
            out.push(LossFidelity::new(kind, seed, annotated.is_none(), report));
        }
    }
    Ok(out)
}
