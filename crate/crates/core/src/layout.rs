//! Layout boundaries: range constraining, ceiling-height inference, XY-plane
//! projection and Pano-Stretch style augmentation.
//!
//! All distances are expressed in camera-height units: the floor plane sits at
//! `z = -1` and only the ceiling height varies between scenes.

use std::f64::consts::{FRAC_PI_2, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    bilinear_sample, column_longitude, equ_proj, nearest_pixel, uv_to_pixel, ImageGrid, UvCoord,
};

pub const Z_FLOOR: f64 = -1.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Unconstrained per-column parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBoundaries {
    pub floor: Vec<f64>,
    pub ceil: Vec<f64>,
}

impl RawBoundaries {
    pub fn new(floor: Vec<f64>, ceil: Vec<f64>) -> Result<Self> {
        Error::check_len(floor.len(), ceil.len())?;
        if floor.is_empty() {
            return Err(Error::Config("boundaries need at least one column".into()));
        }
        if floor.iter().chain(&ceil).any(|x| !x.is_finite()) {
            return Err(Error::Config("raw boundaries must be finite".into()));
        }
        Ok(Self { floor, ceil })
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            floor: vec![0.0; width],
            ceil: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.floor.len()
    }

    /// Flattened `[floor..., ceil...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.floor.iter().chain(&self.ceil).copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let w = flat.len() / 2;
        Self {
            floor: flat[..w].to_vec(),
            ceil: flat[w..].to_vec(),
        }
    }
}

/// Per-column boundary latitudes: floor in `(-π/2, 0)`, ceiling in `(0, π/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutBoundaries {
    floor: Vec<f64>,
    ceil: Vec<f64>,
}

impl LayoutBoundaries {
    pub fn new(floor: Vec<f64>, ceil: Vec<f64>) -> Result<Self> {
        Error::check_len(floor.len(), ceil.len())?;
        if floor.is_empty() {
            return Err(Error::Config("boundaries need at least one column".into()));
        }
        if let Some(bad) = floor.iter().find(|&&f| !(f > -FRAC_PI_2 && f < 0.0)) {
            return Err(Error::Config(format!("floor boundary {bad} outside (-pi/2, 0)")));
        }
        if let Some(bad) = ceil.iter().find(|&&c| !(c > 0.0 && c < FRAC_PI_2)) {
            return Err(Error::Config(format!("ceiling boundary {bad} outside (0, pi/2)")));
        }
        Ok(Self { floor, ceil })
    }

    /// Clamps arbitrary angles into the open ranges (1e-9 rad margin).
    pub fn clamped(floor: Vec<f64>, ceil: Vec<f64>) -> Result<Self> {
        let lo = 1e-9;
        let hi = FRAC_PI_2 - 1e-9;
        let floor = floor.into_iter().map(|f| f.clamp(-hi, -lo)).collect();
        let ceil = ceil.into_iter().map(|c| c.clamp(lo, hi)).collect();
        Self::new(floor, ceil)
    }

    pub fn floor(&self) -> &[f64] {
        &self.floor
    }

    pub fn ceil(&self) -> &[f64] {
        &self.ceil
    }

    pub fn width(&self) -> usize {
        self.floor.len()
    }

    pub fn channel(&self, which: Boundary) -> &[f64] {
        match which {
            Boundary::Floor => &self.floor,
            Boundary::Ceil => &self.ceil,
        }
    }

    /// Inverse of [`constrain`].
    pub fn to_raw(&self) -> RawBoundaries {
        RawBoundaries {
            floor: self.floor.iter().map(|f| logit(-f / FRAC_PI_2)).collect(),
            ceil: self.ceil.iter().map(|c| logit(c / FRAC_PI_2)).collect(),
        }
    }

    /// Resamples to another column count by periodic linear interpolation in
    /// longitude.
    pub fn resample(&self, width: usize) -> Result<Self> {
        let src_u: Vec<f64> = (0..self.width())
            .map(|i| column_longitude(i, self.width()))
            .collect();
        Self::clamped(
            resample_periodic(&src_u, &self.floor, width),
            resample_periodic(&src_u, &self.ceil, width),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Floor,
    Ceil,
}

impl Boundary {
    pub const BOTH: [Boundary; 2] = [Boundary::Floor, Boundary::Ceil];

    pub fn height(self, h: &LayoutHeights) -> f64 {
        match self {
            Boundary::Floor => h.z_floor,
            Boundary::Ceil => h.z_ceil,
        }
    }
}

/// Camera-relative floor and ceiling plane heights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutHeights {
    pub z_floor: f64,
    pub z_ceil: f64,
}

impl LayoutHeights {
    pub fn with_ceiling(z_ceil: f64) -> Self {
        Self {
            z_floor: Z_FLOOR,
            z_ceil,
        }
    }
}

pub fn heights_from_annotation(camera_height: f64, room_height: f64) -> Result<LayoutHeights> {
    if !(camera_height > 0.0 && camera_height < room_height) || !room_height.is_finite() {
        return Err(Error::InvalidAnnotation {
            camera: camera_height,
            room: room_height,
        });
    }
    Ok(LayoutHeights::with_ceiling(
        (room_height - camera_height) / camera_height,
    ))
}

/// Dense boundary points projected onto the XY plane, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct FloorPolyline {
    pub points: Vec<[f64; 2]>,
}

impl FloorPolyline {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StretchParams {
    pub kx: f64,
    pub ky: f64,
}

impl StretchParams {
    pub const IDENTITY: Self = Self { kx: 1.0, ky: 1.0 };

    pub fn new(kx: f64, ky: f64) -> Result<Self> {
        if !(kx > 0.0 && ky > 0.0 && kx.is_finite() && ky.is_finite()) {
            return Err(Error::Config(format!("stretch factors must be positive, got ({kx}, {ky})")));
        }
        Ok(Self { kx, ky })
    }

    pub fn inverse(&self) -> Self {
        Self {
            kx: 1.0 / self.kx,
            ky: 1.0 / self.ky,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.kx == 1.0 && self.ky == 1.0
    }
}

/// Maps raw parameters into the valid boundary ranges with scaled sigmoids.
pub fn constrain(raw: &RawBoundaries) -> LayoutBoundaries {
    let floor = raw.floor.iter().map(|&r| -FRAC_PI_2 * sigmoid(r)).collect();
    let ceil = raw.ceil.iter().map(|&r| FRAC_PI_2 * sigmoid(r)).collect();
    LayoutBoundaries::clamped(floor, ceil).expect("sigmoid output in range")
}

/// Elementwise derivative of [`constrain`] for each channel.
pub fn constrain_derivative(raw: &RawBoundaries) -> (Vec<f64>, Vec<f64>) {
    let d = |r: f64| {
        let s = sigmoid(r);
        FRAC_PI_2 * s * (1.0 - s)
    };
    (
        raw.floor.iter().map(|&r| -d(r)).collect(),
        raw.ceil.iter().map(|&r| d(r)).collect(),
    )
}

/// Least-squares ceiling height given the floor at `z = -1`: the mean of the
/// per-column estimates `-cot(φ_f) tan(φ_c)`.
pub fn infer_ceiling_height(b: &LayoutBoundaries) -> f64 {
    infer_ceiling_height_with_grad(b).0
}

/// Ceiling height with its gradient with respect to the floor and ceiling
/// angles.
pub fn infer_ceiling_height_with_grad(b: &LayoutBoundaries) -> (f64, Vec<f64>, Vec<f64>) {
    let w = b.width() as f64;
    let mut sum = 0.0;
    let mut d_floor = Vec::with_capacity(b.width());
    let mut d_ceil = Vec::with_capacity(b.width());
    for (&f, &c) in b.floor.iter().zip(&b.ceil) {
        let (tf, tc) = (f.tan(), c.tan());
        sum += -tc / tf;
        let csc2_f = 1.0 + 1.0 / (tf * tf);
        let sec2_c = 1.0 + tc * tc;
        d_floor.push(csc2_f * tc / w);
        d_ceil.push(-sec2_c / tf / w);
    }
    (sum / w, d_floor, d_ceil)
}

/// XY projection of a boundary point: `z · cot φ · (cos u, sin u)`.
pub fn project_point(phi: f64, z: f64, u: f64) -> [f64; 2] {
    let dist = z / phi.tan();
    let (su, cu) = u.sin_cos();
    [dist * cu, dist * su]
}

/// Projects one boundary channel onto the XY plane.
pub fn project_channel(angles: &[f64], z: f64) -> FloorPolyline {
    let w = angles.len();
    let points = angles
        .iter()
        .enumerate()
        .map(|(i, &phi)| project_point(phi, z, column_longitude(i, w)))
        .collect();
    FloorPolyline { points }
}

/// Projects both boundaries onto the XY plane, returning `(floor, ceiling)`.
pub fn project_xy(b: &LayoutBoundaries, h: &LayoutHeights) -> (FloorPolyline, FloorPolyline) {
    (
        project_channel(&b.floor, h.z_floor),
        project_channel(&b.ceil, h.z_ceil),
    )
}

/// Derivatives of a projected point with respect to its angle and its plane
/// height: `(∂b/∂φ, ∂b/∂z)`.
pub fn project_point_derivatives(phi: f64, z: f64, u: f64) -> ([f64; 2], [f64; 2]) {
    let (su, cu) = u.sin_cos();
    let t = phi.tan();
    let cot = 1.0 / t;
    let d_cot = -(1.0 + cot * cot);
    ([z * d_cot * cu, z * d_cot * su], [cot * cu, cot * su])
}

/// Periodic linear interpolation of samples taken at cyclically increasing
/// longitudes onto the uniform pixel-center grid of `width` columns.
pub fn resample_periodic(longitudes: &[f64], values: &[f64], width: usize) -> Vec<f64> {
    assert_eq!(longitudes.len(), values.len());
    assert!(!values.is_empty());
    let n = values.len();
    // Unwrap into a strictly increasing sequence starting at the smallest longitude.
    let start = (0..n)
        .min_by(|&a, &b| {
            longitudes[a]
                .rem_euclid(TAU)
                .total_cmp(&longitudes[b].rem_euclid(TAU))
        })
        .unwrap();
    let mut us = Vec::with_capacity(n + 2);
    let mut vs = Vec::with_capacity(n + 2);
    for k in 0..n {
        let idx = (start + k) % n;
        let mut u = longitudes[idx].rem_euclid(TAU);
        if let Some(&prev) = us.last() {
            while u < prev {
                u += TAU;
            }
        }
        us.push(u);
        vs.push(values[idx]);
    }
    // Wrap-around guards on both ends.
    let (first_u, first_v) = (us[0], vs[0]);
    let (last_u, last_v) = (us[n - 1], vs[n - 1]);
    us.insert(0, last_u - TAU);
    vs.insert(0, last_v);
    us.push(first_u + TAU);
    vs.push(first_v);

    (0..width)
        .map(|i| {
            let mut u = column_longitude(i, width);
            if u < us[0] {
                u += TAU;
            } else if u > us[us.len() - 1] {
                u -= TAU;
            }
            let k = us.partition_point(|&x| x <= u).clamp(1, us.len() - 1);
            let (u0, u1) = (us[k - 1], us[k]);
            let t = if u1 > u0 { (u - u0) / (u1 - u0) } else { 0.0 };
            vs[k - 1] + t * (vs[k] - vs[k - 1])
        })
        .collect()
}

/// Stretches the layout by `(kx, ky)` in the XY plane and resamples it back to
/// uniform columns.
pub fn stretch_layout(
    b: &LayoutBoundaries,
    h: &LayoutHeights,
    k: &StretchParams,
) -> Result<LayoutBoundaries> {
    if k.is_identity() {
        return Ok(b.clone());
    }
    let w = b.width();
    let stretch_channel = |angles: &[f64], z: f64| {
        let poly = project_channel(angles, z);
        let mut us = Vec::with_capacity(w);
        let mut phis = Vec::with_capacity(w);
        for p in &poly.points {
            let (x, y) = (k.kx * p[0], k.ky * p[1]);
            us.push(y.atan2(x).rem_euclid(TAU));
            phis.push((z / x.hypot(y)).atan());
        }
        resample_periodic(&us, &phis, w)
    };
    LayoutBoundaries::clamped(
        stretch_channel(&b.floor, h.z_floor),
        stretch_channel(&b.ceil, h.z_ceil),
    )
}

/// Source viewing direction that a stretched panorama shows at `uv`.
fn unstretched_direction(uv: UvCoord, k: &StretchParams) -> [f64; 3] {
    let d = uv.direction();
    [d[0] / k.kx, d[1] / k.ky, d[2]]
}

/// Warps a panorama as if the scene were scaled by `(kx, ky)` about the
/// camera. Backward mapping with bilinear sampling.
pub fn stretch_image(img: &ImageGrid, k: &StretchParams) -> ImageGrid {
    if k.is_identity() {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let mut out = ImageGrid::zeros(h, w, img.channels());
    for j in 0..h {
        for i in 0..w {
            let uv = UvCoord {
                u: column_longitude(i, w),
                v: crate::geometry::row_latitude(j, h),
            };
            let src = equ_proj(unstretched_direction(uv, k)).expect("non-polar pixel center");
            let (r, c) = uv_to_pixel(src, h, w);
            let s = bilinear_sample(img, r, c);
            out.pixel_mut(j, i).copy_from_slice(s.value());
        }
    }
    out
}

/// Nearest-neighbor variant of [`stretch_image`] for validity masks.
pub fn stretch_mask(mask: &[bool], height: usize, width: usize, k: &StretchParams) -> Vec<bool> {
    if k.is_identity() {
        return mask.to_vec();
    }
    let mut out = vec![false; height * width];
    for j in 0..height {
        for i in 0..width {
            let uv = UvCoord {
                u: column_longitude(i, width),
                v: crate::geometry::row_latitude(j, height),
            };
            let src = equ_proj(unstretched_direction(uv, k)).expect("non-polar pixel center");
            let (r, c) = uv_to_pixel(src, height, width);
            let (sj, si) = nearest_pixel(r, c, height, width);
            out[j * width + i] = mask[sj * width + si];
        }
    }
    out
}

/// Floor polygon of the layout. With `tol > 0` the dense polygon is simplified
/// (Douglas-Peucker, then clipped corners are restored by intersecting the
/// neighboring edges); with `tol == 0` all `W` vertices are returned.
pub fn boundaries_to_corner_polygon(
    b: &LayoutBoundaries,
    h: &LayoutHeights,
    tol: f64,
) -> Vec<[f64; 2]> {
    let dense = project_channel(&b.floor, h.z_floor).points;
    if tol <= 0.0 || dense.len() <= 3 {
        return dense;
    }
    let mut poly = simplify_closed(&dense, tol);
    restore_corners(&mut poly);
    poly
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

fn douglas_peucker(points: &[[f64; 2]], tol: f64, keep: &mut [bool]) {
    let n = points.len();
    if n < 3 {
        return;
    }
    let (a, b) = (points[0], points[n - 1]);
    let (idx, dist) = (1..n - 1)
        .map(|i| (i, point_segment_distance(points[i], a, b)))
        .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    if dist > tol {
        keep[idx] = true;
        douglas_peucker(&points[..=idx], tol, &mut keep[..=idx]);
        douglas_peucker(&points[idx..], tol, &mut keep[idx..]);
    }
}

fn simplify_closed(points: &[[f64; 2]], tol: f64) -> Vec<[f64; 2]> {
    let n = points.len();
    let far = (1..n)
        .max_by(|&a, &b| {
            let da = (points[a][0] - points[0][0]).hypot(points[a][1] - points[0][1]);
            let db = (points[b][0] - points[0][0]).hypot(points[b][1] - points[0][1]);
            da.total_cmp(&db)
        })
        .unwrap();
    let mut keep = vec![false; n + 1];
    keep[0] = true;
    keep[far] = true;
    keep[n] = true;
    let mut ring = points.to_vec();
    ring.push(points[0]);
    douglas_peucker(&ring[..=far], tol, &mut keep[..=far]);
    douglas_peucker(&ring[far..], tol, &mut keep[far..]);
    let mut out: Vec<[f64; 2]> = (0..n).filter(|&i| keep[i]).map(|i| points[i]).collect();
    if out.len() < 3 {
        return vec![points[0], points[n / 3], points[2 * n / 3]];
    }

    // The two anchors are arbitrary; drop them when they sit on a straight run.
    let mut i = 0;
    while out.len() > 3 && i < out.len() {
        let m = out.len();
        let (prev, next) = (out[(i + m - 1) % m], out[(i + 1) % m]);
        if point_segment_distance(out[i], prev, next) <= tol {
            out.remove(i);
        } else {
            i += 1;
        }
    }
    out
}

fn line_intersection(a0: [f64; 2], a1: [f64; 2], b0: [f64; 2], b1: [f64; 2]) -> Option<[f64; 2]> {
    let (dax, day) = (a1[0] - a0[0], a1[1] - a0[1]);
    let (dbx, dby) = (b1[0] - b0[0], b1[1] - b0[1]);
    let den = dax * dby - day * dbx;
    if den.abs() < 1e-15 * (dax.hypot(day) * dbx.hypot(dby)).max(1e-300) {
        return None;
    }
    let t = ((b0[0] - a0[0]) * dby - (b0[1] - a0[1]) * dbx) / den;
    Some([a0[0] + t * dax, a0[1] + t * day])
}

/// Replaces short edges that cut a sharp corner by the intersection of the
/// neighboring edges.
fn restore_corners(poly: &mut Vec<[f64; 2]>) {
    let mut i = 0;
    while poly.len() > 3 && i < poly.len() {
        let m = poly.len();
        let (p0, p1, p2, p3) = (
            poly[(i + m - 1) % m],
            poly[i],
            poly[(i + 1) % m],
            poly[(i + 2) % m],
        );
        let edge = (p2[0] - p1[0]).hypot(p2[1] - p1[1]);
        let (ax, ay) = (p1[0] - p0[0], p1[1] - p0[1]);
        let (bx, by) = (p3[0] - p2[0], p3[1] - p2[1]);
        let turn = (ax * by - ay * bx).atan2(ax * bx + ay * by).abs();
        let corner = (turn >= std::f64::consts::FRAC_PI_4)
            .then(|| line_intersection(p0, p1, p2, p3))
            .flatten()
            .filter(|x| {
                (x[0] - p1[0]).hypot(x[1] - p1[1]) <= edge && (x[0] - p2[0]).hypot(x[1] - p2[1]) <= edge
            });
        match corner {
            Some(x) => {
                poly[i] = x;
                poly.remove((i + 1) % m);
                if (i + 1) % m == 0 {
                    i = i.saturating_sub(1);
                }
            }
            None => i += 1,
        }
    }
}
