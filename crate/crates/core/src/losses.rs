//! Self-supervision losses on layout boundaries and their weighted total.
//!
//! Each loss has a plain evaluator working on [`LayoutBoundaries`] and a tape
//! adapter (`*_var`) that records it as one node with exact local gradients.

use serde::{Deserialize, Serialize};

use crate::dlvr::{warp_affine, Panorama, Segment, ValidityMask};
use crate::error::{Error, Result};
use crate::geometry::{column_longitude, Affine2, ImageGrid, RigidPose2D};
use crate::grad::{GradientVector, Tape, Var};
use crate::layout::{
    project_point, project_point_derivatives, stretch_layout, Boundary, LayoutBoundaries,
    LayoutHeights, RawBoundaries, StretchParams, Z_FLOOR,
};

pub const AUX_WEIGHT: f64 = 0.1;

/// The six loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Photo,
    Cycle,
    SrcTgt,
    CeilFloor,
    Manhattan,
    Stretch,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Photo,
        LossKind::Cycle,
        LossKind::SrcTgt,
        LossKind::CeilFloor,
        LossKind::Manhattan,
        LossKind::Stretch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Photo => "photo",
            LossKind::Cycle => "cycle",
            LossKind::SrcTgt => "src_tgt",
            LossKind::CeilFloor => "ceil_floor",
            LossKind::Manhattan => "manhattan",
            LossKind::Stretch => "stretch",
        }
    }

    /// Photometric weight is 1; every auxiliary term uses `aux_weight`.
    pub fn weight(self, aux_weight: f64) -> f64 {
        if self == LossKind::Photo {
            1.0
        } else {
            aux_weight
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "photometric" && *k == LossKind::Photo))
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}`")))
    }
}

/// Set of enabled losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossSet(u8);

impl LossSet {
    pub fn all() -> Self {
        Self::of(&LossKind::ALL)
    }

    pub fn of(kinds: &[LossKind]) -> Self {
        Self(kinds.iter().fold(0, |acc, k| acc | (1 << *k as u8)))
    }

    /// Parses a comma-separated list; `all` enables everything.
    pub fn parse(list: &str) -> Result<Self> {
        if list.trim().eq_ignore_ascii_case("all") {
            return Ok(Self::all());
        }
        let kinds = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<LossKind>>>()?;
        Ok(Self::of(&kinds))
    }

    pub fn contains(self, k: LossKind) -> bool {
        self.0 & (1 << k as u8) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn kinds(self) -> Vec<LossKind> {
        LossKind::ALL.into_iter().filter(|k| self.contains(*k)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChamferReduction {
    Mean,
    Sum,
}

/// Where the Pano-Stretch factors come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StretchSource {
    Fixed(StretchParams),
    /// Log-uniform draw of each factor from `[min, max]`.
    LogUniform { min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub enabled: LossSet,
    /// Median window half-width in columns; scaled from the image width when
    /// `None`.
    pub manhattan_window: Option<usize>,
    pub stretch: StretchSource,
    pub chamfer: ChamferReduction,
    /// Weight of every auxiliary term relative to the photometric one.
    pub aux_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            enabled: LossSet::all(),
            manhattan_window: None,
            stretch: StretchSource::LogUniform { min: 0.5, max: 2.0 },
            chamfer: ChamferReduction::Mean,
            aux_weight: AUX_WEIGHT,
        }
    }
}

impl LossConfig {
    pub fn with_losses(enabled: LossSet) -> Self {
        Self {
            enabled,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled.is_empty() {
            return Err(Error::Config("at least one loss must be enabled".into()));
        }
        if let StretchSource::LogUniform { min, max } = self.stretch {
            if !(min > 0.0 && min <= 1.0 && max >= 1.0) {
                return Err(Error::Config(format!("stretch range [{min}, {max}] must bracket 1")));
            }
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::Config(format!("auxiliary weight {} must be finite and non-negative", self.aux_weight)));
        }
        Ok(())
    }

    pub fn window(&self, width: usize) -> usize {
        self.manhattan_window.unwrap_or_else(|| default_window(width))
    }
}

/// Half-width of 11 columns at 1024 columns, scaled linearly.
pub fn default_window(width: usize) -> usize {
    ((11.0 * width as f64 / 1024.0).round() as usize).max(1)
}

/// Values of the individual terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub photo: f64,
    pub cycle: f64,
    pub src_tgt: f64,
    pub ceil_floor: f64,
    pub manhattan: f64,
    pub stretch: f64,
}

impl LossTerms {
    pub fn get(&self, k: LossKind) -> f64 {
        match k {
            LossKind::Photo => self.photo,
            LossKind::Cycle => self.cycle,
            LossKind::SrcTgt => self.src_tgt,
            LossKind::CeilFloor => self.ceil_floor,
            LossKind::Manhattan => self.manhattan,
            LossKind::Stretch => self.stretch,
        }
    }

    pub fn set(&mut self, k: LossKind, value: f64) {
        *match k {
            LossKind::Photo => &mut self.photo,
            LossKind::Cycle => &mut self.cycle,
            LossKind::SrcTgt => &mut self.src_tgt,
            LossKind::CeilFloor => &mut self.ceil_floor,
            LossKind::Manhattan => &mut self.manhattan,
            LossKind::Stretch => &mut self.stretch,
        } = value;
    }

    /// Zeroes the disabled terms.
    pub fn masked(&self, enabled: LossSet) -> Self {
        let mut out = Self::default();
        for k in enabled.kinds() {
            out.set(k, self.get(k));
        }
        out
    }

    pub fn weighted_total(&self, enabled: LossSet, aux_weight: f64) -> f64 {
        let aux = [
            LossKind::Cycle,
            LossKind::SrcTgt,
            LossKind::CeilFloor,
            LossKind::Manhattan,
            LossKind::Stretch,
        ]
        .into_iter()
        .filter(|k| enabled.contains(*k))
        .map(|k| self.get(k))
        .sum::<f64>();
        let photo = if enabled.contains(LossKind::Photo) {
            self.photo
        } else {
            0.0
        };
        photo + aux_weight * aux
    }

    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        for k in LossKind::ALL {
            self.set(k, self.get(k) + s * other.get(k));
        }
    }
}

/// Named loss values, weighted total and the gradient of the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub photo: f64,
    pub cycle: f64,
    pub src_tgt: f64,
    pub ceil_floor: f64,
    pub manhattan: f64,
    pub stretch: f64,
    pub total: f64,
    #[serde(skip)]
    pub gradient: GradientVector,
}

impl LossReport {
    pub fn from_terms(terms: &LossTerms, enabled: LossSet, aux_weight: f64, gradient: GradientVector) -> Self {
        let t = terms.masked(enabled);
        Self {
            photo: t.photo,
            cycle: t.cycle,
            src_tgt: t.src_tgt,
            ceil_floor: t.ceil_floor,
            manhattan: t.manhattan,
            stretch: t.stretch,
            total: t.weighted_total(enabled, aux_weight),
            gradient,
        }
    }

    pub fn terms(&self) -> LossTerms {
        LossTerms {
            photo: self.photo,
            cycle: self.cycle,
            src_tgt: self.src_tgt,
            ceil_floor: self.ceil_floor,
            manhattan: self.manhattan,
            stretch: self.stretch,
        }
    }
}

// ---------------------------------------------------------------------------
// Plain evaluators

/// Masked mean of squared color differences, normalized by all pixels.
pub fn photometric(target: &Panorama, warped: &ImageGrid, mask: &ValidityMask) -> Result<f64> {
    let (h, w, c) = (target.height(), target.width(), target.image.channels());
    if (warped.height(), warped.width(), warped.channels()) != (h, w, c)
        || (mask.height(), mask.width()) != (h, w)
    {
        return Err(Error::DimensionMismatch(format!(
            "photometric inputs {h}x{w}x{c}, {}x{}x{}, mask {}x{}",
            warped.height(),
            warped.width(),
            warped.channels(),
            mask.height(),
            mask.width()
        )));
    }
    let mut sum = 0.0;
    for (k, m) in mask.data().iter().enumerate() {
        if !*m {
            continue;
        }
        let a = &target.image.data()[k * c..(k + 1) * c];
        let b = &warped.data()[k * c..(k + 1) * c];
        sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(sum / (h * w) as f64)
}

fn squared_difference(a: &[f64], b: &[f64]) -> Result<f64> {
    Error::check_len(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Mean over columns of the squared angle difference, summed over channels.
pub fn cycle_consistency(pred: &LayoutBoundaries, teacher: &LayoutBoundaries) -> Result<f64> {
    let w = pred.width() as f64;
    Ok((squared_difference(pred.floor(), teacher.floor())?
        + squared_difference(pred.ceil(), teacher.ceil())?)
        / w)
}

pub fn stretch_consistency(
    pred: &LayoutBoundaries,
    teacher: &LayoutBoundaries,
    h: &LayoutHeights,
    k: &StretchParams,
) -> Result<f64> {
    cycle_consistency(pred, &stretch_layout(teacher, h, k)?)
}

fn nearest(p: [f64; 2], set: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, q) in set.iter().enumerate() {
        let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Symmetric Chamfer distance on squared point distances.
pub fn chamfer(a: &[[f64; 2]], b: &[[f64; 2]], reduction: ChamferReduction) -> f64 {
    let directed = |x: &[[f64; 2]], y: &[[f64; 2]]| {
        let s: f64 = x.iter().map(|p| nearest(*p, y).1).sum();
        match reduction {
            ChamferReduction::Mean => s / x.len() as f64,
            ChamferReduction::Sum => s,
        }
    };
    directed(a, b) + directed(b, a)
}

fn channel_points(angles: &[f64], z: f64, pose: &RigidPose2D) -> Vec<[f64; 2]> {
    let w = angles.len();
    angles
        .iter()
        .enumerate()
        .map(|(i, &phi)| pose.transform_xy(project_point(phi, z, column_longitude(i, w))))
        .collect()
}

/// Chamfer distance between the source layout (moved into the target frame)
/// and the target layout, summed over floor and ceiling.
pub fn source_target(
    src_b: &LayoutBoundaries,
    src_h: &LayoutHeights,
    tgt_b: &LayoutBoundaries,
    tgt_h: &LayoutHeights,
    pose_s_to_t: &RigidPose2D,
    reduction: ChamferReduction,
) -> f64 {
    Boundary::BOTH
        .iter()
        .map(|&r| {
            let a = channel_points(src_b.channel(r), r.height(src_h), pose_s_to_t);
            let b = channel_points(tgt_b.channel(r), r.height(tgt_h), &RigidPose2D::IDENTITY);
            chamfer(&a, &b, reduction)
        })
        .sum()
}

/// Mean squared horizontal distance between each column's floor and ceiling
/// projections.
pub fn ceil_floor(b: &LayoutBoundaries, h: &LayoutHeights) -> f64 {
    ceil_floor_columns(b, h).iter().sum::<f64>() / b.width() as f64
}

pub fn ceil_floor_columns(b: &LayoutBoundaries, h: &LayoutHeights) -> Vec<f64> {
    let w = b.width();
    (0..w)
        .map(|i| {
            let u = column_longitude(i, w);
            let f = project_point(b.floor()[i], h.z_floor, u);
            let c = project_point(b.ceil()[i], h.z_ceil, u);
            (c[0] - f[0]).powi(2) + (c[1] - f[1]).powi(2)
        })
        .collect()
}

/// Index of the median of `values[idx]` over the circular window around `i`.
fn window_median(values: &[f64], i: usize, half: usize) -> usize {
    let w = values.len();
    let mut idx: Vec<usize> = (0..=2 * half).map(|k| (i + w + k - half) % w).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx[half]
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ManhattanTerm {
    value: f64,
    /// Column whose coordinate served as the median.
    median: usize,
    x_branch: bool,
    sign: f64,
    slope: f64,
}

fn manhattan_channel(points: &[[f64; 2]], half: usize) -> Vec<ManhattanTerm> {
    let w = points.len();
    let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
    (0..w)
        .map(|i| {
            let (su, cu) = column_longitude(i, w).sin_cos();
            let mx = window_median(&xs, i, half);
            let my = window_median(&ys, i, half);
            let ex = (xs[i] - xs[mx]) * su;
            let ey = (ys[i] - ys[my]) * cu;
            let sign = |e: f64| {
                if e > 0.0 {
                    1.0
                } else if e < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            };
            if ex.abs() <= ey.abs() {
                ManhattanTerm {
                    value: ex.abs(),
                    median: mx,
                    x_branch: true,
                    sign: sign(ex),
                    slope: su,
                }
            } else {
                ManhattanTerm {
                    value: ey.abs(),
                    median: my,
                    x_branch: false,
                    sign: sign(ey),
                    slope: cu,
                }
            }
        })
        .collect()
}

fn check_window(width: usize, half: usize) -> Result<()> {
    if half == 0 || 2 * half >= width {
        return Err(Error::Config(format!(
            "median half-width {half} must satisfy 1 <= w < {}/2",
            width
        )));
    }
    Ok(())
}

/// Per-column Manhattan terms summed over floor and ceiling.
pub fn manhattan_columns(b: &LayoutBoundaries, h: &LayoutHeights, half: usize) -> Result<Vec<f64>> {
    check_window(b.width(), half)?;
    let mut out = vec![0.0; b.width()];
    for r in Boundary::BOTH {
        let pts = channel_points(b.channel(r), r.height(h), &RigidPose2D::IDENTITY);
        for (o, t) in out.iter_mut().zip(manhattan_channel(&pts, half)) {
            *o += t.value;
        }
    }
    Ok(out)
}

/// Slope-compensated deviation from the local x- or y-median.
pub fn manhattan(b: &LayoutBoundaries, h: &LayoutHeights, half: usize) -> Result<f64> {
    Ok(manhattan_columns(b, h, half)?.iter().sum::<f64>() / b.width() as f64)
}

// ---------------------------------------------------------------------------
// Tape adapters

/// Constrained boundary angles and ceiling height of one view on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ViewVars {
    pub floor: Var,
    pub ceil: Var,
    pub z_ceil: Var,
}

impl ViewVars {
    /// Constrains the raw parameters; the ceiling height is the annotated
    /// one, or inferred from the boundaries when `heights` is `None`.
    pub fn new(tape: &mut Tape, raw_floor: Var, raw_ceil: Var, heights: Option<LayoutHeights>) -> Result<Self> {
        let (floor, ceil) = tape.constrain(raw_floor, raw_ceil);
        let z_ceil = match heights {
            Some(h) => tape.scalar_constant(h.z_ceil),
            None => tape.infer_ceiling_height(floor, ceil)?,
        };
        Ok(Self { floor, ceil, z_ceil })
    }

    /// Constant view from known boundaries.
    pub fn constant(tape: &mut Tape, b: &LayoutBoundaries, h: &LayoutHeights) -> Self {
        Self {
            floor: tape.constant(b.floor().to_vec()),
            ceil: tape.constant(b.ceil().to_vec()),
            z_ceil: tape.scalar_constant(h.z_ceil),
        }
    }

    pub fn detach(&self, tape: &mut Tape) -> Self {
        Self {
            floor: tape.detach(self.floor),
            ceil: tape.detach(self.ceil),
            z_ceil: tape.detach(self.z_ceil),
        }
    }

    pub fn boundaries(&self, tape: &Tape) -> Result<LayoutBoundaries> {
        LayoutBoundaries::new(tape.value(self.floor).to_vec(), tape.value(self.ceil).to_vec())
    }

    pub fn heights(&self, tape: &Tape) -> LayoutHeights {
        LayoutHeights::with_ceiling(tape.scalar(self.z_ceil))
    }
}

/// Accumulates local gradients of one scalar node.
struct Locals {
    floor: Vec<f64>,
    ceil: Vec<f64>,
    z_ceil: f64,
}

impl Locals {
    fn new(width: usize) -> Self {
        Self {
            floor: vec![0.0; width],
            ceil: vec![0.0; width],
            z_ceil: 0.0,
        }
    }

    fn channel_mut(&mut self, r: Boundary) -> &mut Vec<f64> {
        match r {
            Boundary::Floor => &mut self.floor,
            Boundary::Ceil => &mut self.ceil,
        }
    }

    fn into_pairs(self, view: &ViewVars) -> Vec<(Var, Vec<f64>)> {
        vec![
            (view.floor, self.floor),
            (view.ceil, self.ceil),
            (view.z_ceil, vec![self.z_ceil]),
        ]
    }
}

/// Photometric loss of the source panorama warped into the target view
/// through the target layout; `t_to_s` maps target XY to source XY.
pub fn photometric_var(
    tape: &mut Tape,
    target: &Panorama,
    source: &Panorama,
    t_to_s: &Affine2,
    view: &ViewVars,
) -> Result<Var> {
    let b = view.boundaries(tape)?;
    let h = view.heights(tape);
    let warped = warp_affine(source, &b, &h, t_to_s)?;
    let mask = target.mask.and(&warped.mask)?;
    let value = photometric(target, &warped.image, &mask)?;

    let (hh, w, c) = (target.height(), target.width(), target.image.channels());
    let norm = 2.0 / (hh * w) as f64;
    let mut loc = Locals::new(w);
    for (k, px) in warped.pixels.iter().enumerate() {
        if !mask.data()[k] {
            continue;
        }
        let x = &target.image.data()[k * c..(k + 1) * c];
        let y = &warped.image.data()[k * c..(k + 1) * c];
        let d_dist: f64 = (0..c).map(|ch| (y[ch] - x[ch]) * px.d_color[ch]).sum::<f64>() * norm;
        let col = k % w;
        match px.ray.segment {
            Segment::LowerWall => loc.floor[col] += d_dist * px.ray.d_phi,
            Segment::UpperWall => loc.ceil[col] += d_dist * px.ray.d_phi,
            _ => {}
        }
        loc.z_ceil += d_dist * px.ray.d_z_ceil;
    }
    Ok(tape.scalar_node(value, loc.into_pairs(view)))
}

/// Cycle term against a detached teacher.
pub fn cycle_var(tape: &mut Tape, pred: &ViewVars, teacher: &ViewVars) -> Result<Var> {
    let t = teacher.detach(tape);
    consistency_var(tape, pred, tape.value(t.floor).to_vec(), tape.value(t.ceil).to_vec())
}

fn consistency_var(tape: &mut Tape, pred: &ViewVars, floor: Vec<f64>, ceil: Vec<f64>) -> Result<Var> {
    let pf = tape.value(pred.floor).to_vec();
    let pc = tape.value(pred.ceil).to_vec();
    Error::check_len(floor.len(), pf.len())?;
    let w = pf.len() as f64;
    let mut value = 0.0;
    let mut gf = Vec::with_capacity(pf.len());
    let mut gc = Vec::with_capacity(pc.len());
    for i in 0..pf.len() {
        let (df, dc) = (pf[i] - floor[i], pc[i] - ceil[i]);
        value += df * df + dc * dc;
        gf.push(2.0 * df / w);
        gc.push(2.0 * dc / w);
    }
    Ok(tape.scalar_node(value / w, vec![(pred.floor, gf), (pred.ceil, gc)]))
}

/// Stretch of a layout recorded on the tape. The resampling step has no
/// derivative, so this may only be applied to detached inputs if the result
/// feeds a differentiated loss.
pub fn stretch_layout_var(tape: &mut Tape, view: &ViewVars, k: &StretchParams) -> Result<ViewVars> {
    let b = view.boundaries(tape)?;
    let h = view.heights(tape);
    let s = stretch_layout(&b, &h, k)?;
    let inputs = [view.floor, view.ceil, view.z_ceil];
    Ok(ViewVars {
        floor: tape.non_differentiable("stretch_layout", &inputs, s.floor().to_vec()),
        ceil: tape.non_differentiable("stretch_layout", &inputs, s.ceil().to_vec()),
        z_ceil: view.z_ceil,
    })
}

/// Stretch term: the prediction on the stretched panorama against the
/// stretched, detached teacher.
pub fn stretch_var(tape: &mut Tape, pred: &ViewVars, teacher: &ViewVars, k: &StretchParams) -> Result<Var> {
    let t = teacher.detach(tape);
    let target = stretch_layout_var(tape, &t, k)?;
    consistency_var(
        tape,
        pred,
        tape.value(target.floor).to_vec(),
        tape.value(target.ceil).to_vec(),
    )
}

/// Projected points of one channel, their derivatives with respect to the
/// column angle and to the plane height, after applying `pose`.
fn projected_with_derivatives(
    angles: &[f64],
    z: f64,
    pose: &RigidPose2D,
) -> (Vec<[f64; 2]>, Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let w = angles.len();
    let (s, c) = pose.yaw.sin_cos();
    let rot = |v: [f64; 2]| [c * v[0] - s * v[1], s * v[0] + c * v[1]];
    let mut pts = Vec::with_capacity(w);
    let mut d_phi = Vec::with_capacity(w);
    let mut d_z = Vec::with_capacity(w);
    for (i, &phi) in angles.iter().enumerate() {
        let u = column_longitude(i, w);
        pts.push(pose.transform_xy(project_point(phi, z, u)));
        let (dp, dz) = project_point_derivatives(phi, z, u);
        d_phi.push(rot(dp));
        d_z.push(rot(dz));
    }
    (pts, d_phi, d_z)
}

/// Gradient of the directed-plus-reverse Chamfer distance with respect to
/// every point of both sets.
fn chamfer_with_grad(
    a: &[[f64; 2]],
    b: &[[f64; 2]],
    reduction: ChamferReduction,
) -> (f64, Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let mut ga = vec![[0.0; 2]; a.len()];
    let mut gb = vec![[0.0; 2]; b.len()];
    let mut value = 0.0;
    let mut directed = |x: &[[f64; 2]], y: &[[f64; 2]], gx: &mut [[f64; 2]], gy: &mut [[f64; 2]]| {
        let scale = match reduction {
            ChamferReduction::Mean => 1.0 / x.len() as f64,
            ChamferReduction::Sum => 1.0,
        };
        for (i, p) in x.iter().enumerate() {
            let (k, d) = nearest(*p, y);
            value += d * scale;
            for t in 0..2 {
                let g = 2.0 * (p[t] - y[k][t]) * scale;
                gx[i][t] += g;
                gy[k][t] -= g;
            }
        }
    };
    directed(a, b, &mut ga, &mut gb);
    directed(b, a, &mut gb, &mut ga);
    (value, ga, gb)
}

/// Chamfer term between the source layout, moved by `pose_s_to_t`, and the
/// target layout.
pub fn source_target_var(
    tape: &mut Tape,
    src: &ViewVars,
    tgt: &ViewVars,
    pose_s_to_t: &RigidPose2D,
    reduction: ChamferReduction,
) -> Result<Var> {
    let sb = src.boundaries(tape)?;
    let tb = tgt.boundaries(tape)?;
    let (sh, th) = (src.heights(tape), tgt.heights(tape));
    let w_src = sb.width();
    let w_tgt = tb.width();
    let mut src_loc = Locals::new(w_src);
    let mut tgt_loc = Locals::new(w_tgt);
    let mut value = 0.0;
    for r in Boundary::BOTH {
        let (pa, da, za) = projected_with_derivatives(sb.channel(r), r.height(&sh), pose_s_to_t);
        let (pb, db, zb) = projected_with_derivatives(tb.channel(r), r.height(&th), &RigidPose2D::IDENTITY);
        let (v, ga, gb) = chamfer_with_grad(&pa, &pb, reduction);
        value += v;
        for i in 0..w_src {
            src_loc.channel_mut(r)[i] += ga[i][0] * da[i][0] + ga[i][1] * da[i][1];
            if r == Boundary::Ceil {
                src_loc.z_ceil += ga[i][0] * za[i][0] + ga[i][1] * za[i][1];
            }
        }
        for i in 0..w_tgt {
            tgt_loc.channel_mut(r)[i] += gb[i][0] * db[i][0] + gb[i][1] * db[i][1];
            if r == Boundary::Ceil {
                tgt_loc.z_ceil += gb[i][0] * zb[i][0] + gb[i][1] * zb[i][1];
            }
        }
    }
    let mut locals = src_loc.into_pairs(src);
    locals.extend(tgt_loc.into_pairs(tgt));
    Ok(tape.scalar_node(value, locals))
}

pub fn ceil_floor_var(tape: &mut Tape, view: &ViewVars) -> Result<Var> {
    let b = view.boundaries(tape)?;
    let h = view.heights(tape);
    let w = b.width();
    let mut loc = Locals::new(w);
    let mut value = 0.0;
    for i in 0..w {
        let u = column_longitude(i, w);
        let f = project_point(b.floor()[i], Z_FLOOR, u);
        let c = project_point(b.ceil()[i], h.z_ceil, u);
        let (df, _) = project_point_derivatives(b.floor()[i], Z_FLOOR, u);
        let (dc, dz) = project_point_derivatives(b.ceil()[i], h.z_ceil, u);
        let diff = [c[0] - f[0], c[1] - f[1]];
        value += diff[0] * diff[0] + diff[1] * diff[1];
        let g = [2.0 * diff[0] / w as f64, 2.0 * diff[1] / w as f64];
        loc.ceil[i] = g[0] * dc[0] + g[1] * dc[1];
        loc.floor[i] = -(g[0] * df[0] + g[1] * df[1]);
        loc.z_ceil += g[0] * dz[0] + g[1] * dz[1];
    }
    Ok(tape.scalar_node(value / w as f64, loc.into_pairs(view)))
}

pub fn manhattan_var(tape: &mut Tape, view: &ViewVars, half: usize) -> Result<Var> {
    let b = view.boundaries(tape)?;
    let h = view.heights(tape);
    let w = b.width();
    check_window(w, half)?;
    let mut loc = Locals::new(w);
    let mut value = 0.0;
    for r in Boundary::BOTH {
        let (pts, d_phi, d_z) = projected_with_derivatives(b.channel(r), r.height(&h), &RigidPose2D::IDENTITY);
        for (i, t) in manhattan_channel(&pts, half).into_iter().enumerate() {
            value += t.value;
            let axis = if t.x_branch { 0 } else { 1 };
            let g = t.sign * t.slope / w as f64;
            let m = t.median;
            loc.channel_mut(r)[i] += g * d_phi[i][axis];
            loc.channel_mut(r)[m] -= g * d_phi[m][axis];
            if r == Boundary::Ceil {
                loc.z_ceil += g * (d_z[i][axis] - d_z[m][axis]);
            }
        }
    }
    Ok(tape.scalar_node(value / w as f64, loc.into_pairs(view)))
}

/// Records `Σ weight_k · term_k` for the enabled terms present in `vars`.
pub fn weighted_total_var(tape: &mut Tape, vars: &[(LossKind, Var)], aux_weight: f64) -> Var {
    let terms: Vec<(Var, f64)> = vars.iter().map(|(k, v)| (*v, k.weight(aux_weight))).collect();
    if terms.is_empty() {
        return tape.scalar_constant(0.0);
    }
    tape.linear_combination(&terms)
}

// ---------------------------------------------------------------------------
// Branch keys for finite-difference checks

/// Piecewise-smooth branch keys of the photometric loss for the pixels of one
/// column (segment, bilinear cell, nearest mask pixel).
pub fn photometric_branches(
    target: &Panorama,
    source: &Panorama,
    t_to_s: &Affine2,
    b: &LayoutBoundaries,
    h: &LayoutHeights,
    column: usize,
) -> Result<Vec<u64>> {
    let warped = warp_affine(source, b, h, t_to_s)?;
    let w = target.width();
    Ok((0..target.height())
        .filter(|j| target.mask.get(*j, column))
        .map(|j| warped.pixels[j * w + column].branch)
        .collect())
}

/// Nearest-neighbor assignments of the Chamfer term.
pub fn source_target_branches(
    src_b: &LayoutBoundaries,
    src_h: &LayoutHeights,
    tgt_b: &LayoutBoundaries,
    tgt_h: &LayoutHeights,
    pose_s_to_t: &RigidPose2D,
) -> Vec<u64> {
    let mut out = Vec::new();
    for r in Boundary::BOTH {
        let a = channel_points(src_b.channel(r), r.height(src_h), pose_s_to_t);
        let b = channel_points(tgt_b.channel(r), r.height(tgt_h), &RigidPose2D::IDENTITY);
        out.extend(a.iter().map(|p| nearest(*p, &b).0 as u64));
        out.extend(b.iter().map(|p| nearest(*p, &a).0 as u64));
    }
    out
}

/// Median choices, branch choices and signs of the Manhattan term.
pub fn manhattan_branches(b: &LayoutBoundaries, h: &LayoutHeights, half: usize) -> Vec<u64> {
    let mut out = Vec::new();
    for r in Boundary::BOTH {
        let pts = channel_points(b.channel(r), r.height(h), &RigidPose2D::IDENTITY);
        let xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p[1]).collect();
        for (i, t) in manhattan_channel(&pts, half).into_iter().enumerate() {
            // Both medians matter: the unused branch decides the min.
            out.push(window_median(&xs, i, half) as u64);
            out.push(window_median(&ys, i, half) as u64);
            out.push(t.x_branch as u64 * 4 + (t.sign + 1.0) as u64);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Single-view total

/// Everything the losses of one target view may need. The target boundaries
/// are the differentiated parameters; all other layouts are constants.
#[derive(Debug, Clone)]
pub struct LossInputs<'a> {
    pub target: &'a Panorama,
    pub target_raw: &'a RawBoundaries,
    /// Annotated heights; inferred from the boundaries when `None`.
    pub heights: Option<LayoutHeights>,
    pub source: Option<&'a Panorama>,
    pub pose_t_to_s: Option<RigidPose2D>,
    pub source_layout: Option<(&'a LayoutBoundaries, LayoutHeights)>,
    /// Prediction on the rendered (warped) view.
    pub rendered_pred: Option<&'a LayoutBoundaries>,
    /// Prediction on the stretched view and the stretch factors used.
    pub stretched_pred: Option<(&'a LayoutBoundaries, StretchParams)>,
}

impl<'a> LossInputs<'a> {
    pub fn new(target: &'a Panorama, target_raw: &'a RawBoundaries) -> Self {
        Self {
            target,
            target_raw,
            heights: None,
            source: None,
            pose_t_to_s: None,
            source_layout: None,
            rendered_pred: None,
            stretched_pred: None,
        }
    }
}

fn missing(what: &str, k: LossKind) -> Error {
    Error::Config(format!("loss `{}` is enabled but {what} is missing", k.name()))
}

/// Records the enabled terms for one target view on `tape`.
pub fn record_terms(
    tape: &mut Tape,
    inputs: &LossInputs<'_>,
    view: &ViewVars,
    cfg: &LossConfig,
) -> Result<Vec<(LossKind, Var)>> {
    let mut out = Vec::new();
    for kind in cfg.enabled.kinds() {
        let var = match kind {
            LossKind::Photo => {
                let src = inputs.source.ok_or_else(|| missing("a source panorama", kind))?;
                let pose = inputs.pose_t_to_s.ok_or_else(|| missing("a relative pose", kind))?;
                photometric_var(tape, inputs.target, src, &Affine2::from(pose), view)?
            }
            LossKind::Cycle => {
                let pred = inputs.rendered_pred.ok_or_else(|| missing("a rendered-view prediction", kind))?;
                let h = view.heights(tape);
                let p = ViewVars::constant(tape, pred, &h);
                cycle_var(tape, &p, view)?
            }
            LossKind::SrcTgt => {
                let (sb, sh) = inputs.source_layout.ok_or_else(|| missing("a source layout", kind))?;
                let pose = inputs.pose_t_to_s.ok_or_else(|| missing("a relative pose", kind))?;
                let s = ViewVars::constant(tape, sb, &sh);
                source_target_var(tape, &s, view, &pose.inverse(), cfg.chamfer)?
            }
            LossKind::CeilFloor => ceil_floor_var(tape, view)?,
            LossKind::Manhattan => manhattan_var(tape, view, cfg.window(inputs.target.width()))?,
            LossKind::Stretch => {
                let (pred, k) = inputs
                    .stretched_pred
                    .ok_or_else(|| missing("a stretched-view prediction", kind))?;
                let h = view.heights(tape);
                let p = ViewVars::constant(tape, pred, &h);
                stretch_var(tape, &p, view, &k)?
            }
        };
        out.push((kind, var));
    }
    Ok(out)
}

/// Evaluates the enabled losses and the gradient of their weighted total with
/// respect to the target view's raw boundaries.
pub fn total(inputs: &LossInputs<'_>, cfg: &LossConfig) -> Result<LossReport> {
    cfg.validate()?;
    if inputs.target_raw.width() != inputs.target.width() {
        return Err(Error::DimensionMismatch(format!(
            "{} boundary columns for a {}-column panorama",
            inputs.target_raw.width(),
            inputs.target.width()
        )));
    }
    let mut tape = Tape::new();
    let rf = tape.param(inputs.target_raw.floor.clone());
    let rc = tape.param(inputs.target_raw.ceil.clone());
    let view = ViewVars::new(&mut tape, rf, rc, inputs.heights)?;
    let vars = record_terms(&mut tape, inputs, &view, cfg)?;
    let out = weighted_total_var(&mut tape, &vars, cfg.aux_weight);
    let grads = tape.gradients(out)?;
    let mut terms = LossTerms::default();
    for (k, v) in &vars {
        terms.set(*k, tape.scalar(*v));
    }
    let mut report = LossReport::from_terms(
        &terms,
        cfg.enabled,
        cfg.aux_weight,
        GradientVector {
            d_phi_raw_floor: grads.get(rf),
            d_phi_raw_ceil: grads.get(rc),
        },
    );
    report.total = tape.scalar(out);
    Ok(report)
}
