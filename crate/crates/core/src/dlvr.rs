//! Differentiable layout view rendering.
//!
//! Every pixel of the target panorama is intersected with the estimated
//! layout: the column's two boundary angles split it into ceiling, upper
//! wall, lower wall and floor segments. The resulting 3D points are moved
//! into the source camera and the source panorama is sampled there
//! (backward warping). Each warped pixel carries the derivative of its color
//! with respect to the pixel's planar distance, which the losses chain into
//! the boundary angles.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    bilinear_sample, column_longitude, equ_proj_jacobian, nearest_pixel, row_latitude,
    uv_to_pixel, Affine2, ImageGrid, RigidPose2D, MAX_CHANNELS,
};
use crate::layout::{LayoutBoundaries, LayoutHeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Ceiling,
    UpperWall,
    LowerWall,
    Floor,
}

impl Segment {
    pub fn is_wall(self) -> bool {
        matches!(self, Segment::UpperWall | Segment::LowerWall)
    }
}

/// Planar distance of a pixel ray to the layout and its partial derivatives.
///
/// `d_phi` is the derivative with respect to the boundary that bounds the
/// pixel's wall segment (floor boundary for the lower wall, ceiling boundary
/// for the upper wall) and is zero on floor and ceiling pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayDistance {
    pub distance: f64,
    pub segment: Segment,
    pub d_phi: f64,
    pub d_z_floor: f64,
    pub d_z_ceil: f64,
}

/// Distance along the horizontal plane from the camera to where the ray at
/// latitude `v` in column `col` meets the layout. Pixels exactly on a
/// boundary belong to the wall; the horizon row (`v == 0`) belongs to the
/// lower wall.
pub fn ray_distance(b: &LayoutBoundaries, h: &LayoutHeights, v: f64, col: usize) -> RayDistance {
    let phi_c = b.ceil()[col];
    let phi_f = b.floor()[col];
    let csc2 = |a: f64| {
        let s = a.sin();
        1.0 / (s * s)
    };
    if v > phi_c {
        let cot = 1.0 / v.tan();
        RayDistance {
            distance: h.z_ceil * cot,
            segment: Segment::Ceiling,
            d_phi: 0.0,
            d_z_floor: 0.0,
            d_z_ceil: cot,
        }
    } else if v > 0.0 {
        let cot = 1.0 / phi_c.tan();
        RayDistance {
            distance: h.z_ceil * cot,
            segment: Segment::UpperWall,
            d_phi: -h.z_ceil * csc2(phi_c),
            d_z_floor: 0.0,
            d_z_ceil: cot,
        }
    } else if v >= phi_f {
        let cot = 1.0 / phi_f.tan();
        RayDistance {
            distance: h.z_floor * cot,
            segment: Segment::LowerWall,
            d_phi: -h.z_floor * csc2(phi_f),
            d_z_floor: cot,
            d_z_ceil: 0.0,
        }
    } else {
        let cot = 1.0 / v.tan();
        RayDistance {
            distance: h.z_floor * cot,
            segment: Segment::Floor,
            d_phi: 0.0,
            d_z_floor: cot,
            d_z_ceil: 0.0,
        }
    }
}

/// Per-pixel flags; `true` marks pixels that take part in photometric
/// comparisons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn all_valid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        Error::check_len(height * width, data.len())?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Masks out everything below latitude `v_min` (camera tripod region).
    pub fn tripod(height: usize, width: usize, v_min: f64) -> Self {
        let data = (0..height)
            .flat_map(|j| {
                let ok = row_latitude(j, height) >= v_min;
                std::iter::repeat(ok).take(width)
            })
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::DimensionMismatch(format!(
                "masks {}x{} and {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|x| **x).count()
    }

    /// A coarse pixel stays valid only if every covered fine pixel is valid.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::DimensionMismatch(format!(
                "cannot downsample {}x{} by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let data = (0..h * w)
            .map(|k| {
                let (j, i) = (k / w, k % w);
                (0..factor).all(|dj| (0..factor).all(|di| self.get(j * factor + dj, i * factor + di)))
            })
            .collect();
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }
}

/// Equirectangular RGB image plus validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Panorama {
    pub image: ImageGrid,
    pub mask: ValidityMask,
}

impl Panorama {
    pub fn new(image: ImageGrid, mask: ValidityMask) -> Result<Self> {
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} vs mask {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self { image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn downsample(&self, factor: usize) -> Result<Self> {
        Self::new(self.image.downsample(factor)?, self.mask.downsample(factor)?)
    }
}

/// Per-pixel planar distances, 3D points and segment labels for a layout.
#[derive(Debug, Clone)]
pub struct PointCloudGrid {
    pub height: usize,
    pub width: usize,
    pub distance: Vec<f64>,
    pub points: Vec<[f64; 3]>,
    pub segment: Vec<Segment>,
}

fn check_width(b: &LayoutBoundaries, width: usize) -> Result<()> {
    if b.width() != width {
        return Err(Error::DimensionMismatch(format!(
            "layout has {} columns, image has {width}",
            b.width()
        )));
    }
    Ok(())
}

fn pixel_point(distance: f64, u: f64, v: f64) -> [f64; 3] {
    let (su, cu) = u.sin_cos();
    [distance * cu, distance * su, distance * v.tan()]
}

pub fn render_point_grid(
    b: &LayoutBoundaries,
    h: &LayoutHeights,
    height: usize,
    width: usize,
) -> Result<PointCloudGrid> {
    check_width(b, width)?;
    let rows: Vec<Vec<(f64, [f64; 3], Segment)>> = (0..height)
        .into_par_iter()
        .map(|j| {
            let v = row_latitude(j, height);
            (0..width)
                .map(|i| {
                    let rd = ray_distance(b, h, v, i);
                    let p = pixel_point(rd.distance, column_longitude(i, width), v);
                    (rd.distance, p, rd.segment)
                })
                .collect()
        })
        .collect();
    let mut grid = PointCloudGrid {
        height,
        width,
        distance: Vec::with_capacity(height * width),
        points: Vec::with_capacity(height * width),
        segment: Vec::with_capacity(height * width),
    };
    for (d, p, s) in rows.into_iter().flatten() {
        grid.distance.push(d);
        grid.points.push(p);
        grid.segment.push(s);
    }
    Ok(grid)
}

/// Row-major depth grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|d| d * factor).collect(),
        }
    }
}

/// Euclidean (radial) distance from the camera to the layout for every pixel.
pub fn render_layout_depth(
    b: &LayoutBoundaries,
    h: &LayoutHeights,
    height: usize,
    width: usize,
) -> Result<DepthMap> {
    check_width(b, width)?;
    let data = (0..height)
        .flat_map(|j| {
            let v = row_latitude(j, height);
            (0..width).map(move |i| ray_distance(b, h, v, i).distance / v.cos())
        })
        .collect();
    Ok(DepthMap {
        height,
        width,
        data,
    })
}

/// Per-pixel output of [`warp`].
#[derive(Debug, Clone, Copy)]
pub struct WarpedPixel {
    pub ray: RayDistance,
    /// Derivative of the sampled color with respect to the pixel's planar
    /// distance.
    pub d_color: [f64; MAX_CHANNELS],
    /// Identifies the piecewise-smooth branch the pixel was evaluated on
    /// (segment, bilinear cell, nearest mask pixel). Two evaluations with the
    /// same key lie on the same smooth piece.
    pub branch: u64,
}

#[derive(Debug, Clone)]
pub struct Warped {
    pub image: ImageGrid,
    pub mask: ValidityMask,
    pub pixels: Vec<WarpedPixel>,
}

fn segment_key(s: Segment) -> u64 {
    match s {
        Segment::Ceiling => 0,
        Segment::UpperWall => 1,
        Segment::LowerWall => 2,
        Segment::Floor => 3,
    }
}

fn branch_key(
    segment: Segment,
    row: f64,
    col: f64,
    nearest: usize,
    valid: bool,
    height: usize,
    width: usize,
) -> u64 {
    let row_cell = (row.floor().clamp(-1.0, height as f64) + 1.0) as u64;
    let col_cell = col.rem_euclid(width as f64).floor() as u64;
    let mut key = nearest as u64 * 2 + valid as u64;
    key = key * (width as u64 + 1) + col_cell;
    key = key * (height as u64 + 2) + row_cell;
    key * 4 + segment_key(segment) + 4
}

/// Backward-warps `src` into the target view described by the target layout
/// and the target-to-source pose.
pub fn warp(
    src: &Panorama,
    b: &LayoutBoundaries,
    h: &LayoutHeights,
    pose_t_to_s: &RigidPose2D,
) -> Result<Warped> {
    warp_affine(src, b, h, &Affine2::from(*pose_t_to_s))
}

/// [`warp`] with an arbitrary planar affine target-to-source map (used for
/// stretched views).
pub fn warp_affine(
    src: &Panorama,
    b: &LayoutBoundaries,
    h: &LayoutHeights,
    t_to_s: &Affine2,
) -> Result<Warped> {
    let (height, width, channels) = (src.height(), src.width(), src.image.channels());
    check_width(b, width)?;
    let rows: Vec<Vec<(WarpedPixel, [f64; MAX_CHANNELS], bool)>> = (0..height)
        .into_par_iter()
        .map(|j| {
            let v = row_latitude(j, height);
            let tan_v = v.tan();
            (0..width)
                .map(|i| {
                    let u = column_longitude(i, width);
                    let ray = ray_distance(b, h, v, i);
                    let (su, cu) = u.sin_cos();
                    let dir = [cu, su, tan_v];
                    let p = [ray.distance * cu, ray.distance * su, ray.distance * tan_v];
                    let q = t_to_s.apply(p);
                    let dq = t_to_s.apply_linear(dir);
                    let mut out = WarpedPixel {
                        ray,
                        d_color: [0.0; MAX_CHANNELS],
                        branch: segment_key(ray.segment),
                    };
                    let Ok((uv, jac)) = equ_proj_jacobian(q) else {
                        return (out, [0.0; MAX_CHANNELS], false);
                    };
                    let (row, col) = uv_to_pixel(uv, height, width);
                    let s = bilinear_sample(&src.image, row, col);
                    let (sj, si) = nearest_pixel(row, col, height, width);
                    let valid = src.mask.get(sj, si);
                    out.branch = branch_key(ray.segment, row, col, sj * width + si, valid, height, width);

                    let du = jac[0][0] * dq[0] + jac[0][1] * dq[1] + jac[0][2] * dq[2];
                    let dv = jac[1][0] * dq[0] + jac[1][1] * dq[1] + jac[1][2] * dq[2];
                    let dcol = du * width as f64 / std::f64::consts::TAU;
                    let drow = -dv * height as f64 / std::f64::consts::PI;
                    for k in 0..channels {
                        out.d_color[k] = s.d_row[k] * drow + s.d_col[k] * dcol;
                    }
                    (out, s.value, valid)
                })
                .collect()
        })
        .collect();

    let mut image = ImageGrid::zeros(height, width, channels);
    let mut mask = Vec::with_capacity(height * width);
    let mut pixels = Vec::with_capacity(height * width);
    for (k, (px, color, valid)) in rows.into_iter().flatten().enumerate() {
        image
            .pixel_mut(k / width, k % width)
            .copy_from_slice(&color[..channels]);
        mask.push(valid);
        pixels.push(px);
    }
    Ok(Warped {
        image,
        mask: ValidityMask::from_data(height, width, mask)?,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::equ_proj;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{FRAC_PI_3, FRAC_PI_4};

    fn random_layout(rng: &mut impl Rng, w: usize) -> (LayoutBoundaries, LayoutHeights) {
        let floor = (0..w).map(|_| -rng.random_range(0.3..1.2)).collect();
        let ceil = (0..w).map(|_| rng.random_range(0.3..1.2)).collect();
        (
            LayoutBoundaries::new(floor, ceil).unwrap(),
            LayoutHeights::with_ceiling(rng.random_range(0.5..2.0)),
        )
    }

    fn textured(h: usize, w: usize, seed: u64) -> Panorama {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        Panorama::new(
            ImageGrid::from_data(h, w, 3, data).unwrap(),
            ValidityMask::all_valid(h, w),
        )
        .unwrap()
    }

    #[test]
    fn ray_distance_cases() {
        let b = LayoutBoundaries::new(vec![-FRAC_PI_4], vec![0.6]).unwrap();
        let h = LayoutHeights::with_ceiling(1.0);
        let floor = ray_distance(&b, &h, -FRAC_PI_3, 0);
        assert_eq!(floor.segment, Segment::Floor);
        assert!((floor.distance - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        for v in [-0.7, -0.3, -0.01] {
            let rd = ray_distance(&b, &h, v, 0);
            assert_eq!(rd.segment, Segment::LowerWall);
            assert!((rd.distance - 1.0).abs() < 1e-12);
        }
        let at = ray_distance(&b, &h, 0.6, 0);
        assert_eq!(at.segment, Segment::UpperWall);
        let above = ray_distance(&b, &h, 0.6 + 1e-12, 0);
        assert_eq!(above.segment, Segment::Ceiling);
        assert!((at.distance - 1.0 / 0.6f64.tan()).abs() < 1e-12);
        assert!((at.distance - above.distance).abs() < 1e-9);
    }

    #[test]
    fn ray_distance_is_continuous_at_boundaries() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let (b, h) = random_layout(&mut rng, 1);
            for phi in [b.floor()[0], b.ceil()[0]] {
                let lo = ray_distance(&b, &h, phi - 1e-9, 0).distance;
                let hi = ray_distance(&b, &h, phi + 1e-9, 0).distance;
                assert!((lo - hi).abs() < 1e-6 * lo.abs().max(1.0));
            }
            // The horizon is continuous only for height-consistent columns.
            let consistent = LayoutBoundaries::new(
                b.floor().to_vec(),
                vec![(-h.z_ceil * b.floor()[0].tan()).atan()],
            )
            .unwrap();
            let lo = ray_distance(&consistent, &h, -1e-9, 0).distance;
            let hi = ray_distance(&consistent, &h, 1e-9, 0).distance;
            assert!((lo - hi).abs() < 1e-9 * lo.max(1.0));
        }
    }

    #[test]
    fn point_grid_is_consistent_with_projection() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let (b, h) = random_layout(&mut rng, 32);
        let grid = render_point_grid(&b, &h, 16, 32).unwrap();
        for j in 0..16 {
            for i in 0..32 {
                let k = j * 32 + i;
                let uv = equ_proj(grid.points[k]).unwrap();
                assert!(crate::geometry::wrap_angle(uv.u - column_longitude(i, 32)).abs() < 1e-9);
                assert!((uv.v - row_latitude(j, 16)).abs() < 1e-9);
                assert!(grid.distance[k] > 0.0);
                match grid.segment[k] {
                    Segment::Floor => assert!((grid.points[k][2] - h.z_floor).abs() < 1e-12),
                    Segment::Ceiling => assert!((grid.points[k][2] - h.z_ceil).abs() < 1e-12),
                    _ => {}
                }
            }
        }
        assert!(render_point_grid(&b, &h, 16, 31).is_err());
    }

    #[test]
    fn layout_depth_is_radial() {
        let b = LayoutBoundaries::new(vec![-0.5; 8], vec![0.5; 8]).unwrap();
        let h = LayoutHeights::with_ceiling(1.0);
        let depth = render_layout_depth(&b, &h, 6, 8).unwrap();
        let grid = render_point_grid(&b, &h, 6, 8).unwrap();
        for (d, p) in depth.data.iter().zip(&grid.points) {
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((d - norm).abs() < 1e-12);
        }
        // Ceiling pixel at v = π/3 with z_c = 1 sees depth 1 / sin(π/3).
        let rd = ray_distance(&b, &h, FRAC_PI_3, 0);
        assert!((rd.distance / FRAC_PI_3.cos() - 1.0 / FRAC_PI_3.sin()).abs() < 1e-12);
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let pano = textured(16, 32, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (b, h) = random_layout(&mut rng, 32);
        let out = warp(&pano, &b, &h, &RigidPose2D::IDENTITY).unwrap();
        assert!(out.mask.data().iter().all(|m| *m));
        for (a, c) in out.image.data().iter().zip(pano.image.data()) {
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn warp_is_scale_invariant() {
        let pano = textured(16, 32, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let (b, h) = random_layout(&mut rng, 32);
        let pose = RigidPose2D::new(0.3, -0.2, 0.4);
        let base = warp(&pano, &b, &h, &pose).unwrap();
        let s = 2.5;
        let hs = LayoutHeights {
            z_floor: h.z_floor * s,
            z_ceil: h.z_ceil * s,
        };
        let scaled = warp(&pano, &b, &hs, &pose.scaled(s)).unwrap();
        for (a, c) in base.image.data().iter().zip(scaled.image.data()) {
            assert!((a - c).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_color_derivative_matches_differences() {
        // Shift the distance through the floor height on lower-wall pixels.
        let pano = textured(16, 32, 6);
        let b = LayoutBoundaries::new(vec![-0.3; 32], vec![0.3; 32]).unwrap();
        let h = LayoutHeights::with_ceiling(1.0);
        let pose = RigidPose2D::new(0.4, 0.1, 0.2);
        let base = warp(&pano, &b, &h, &pose).unwrap();
        let eps = 1e-6;
        let bump = |dz: f64| {
            warp(
                &pano,
                &b,
                &LayoutHeights {
                    z_floor: h.z_floor + dz,
                    z_ceil: h.z_ceil,
                },
                &pose,
            )
            .unwrap()
        };
        let (hi, lo) = (bump(eps), bump(-eps));
        let mut checked = 0;
        for k in 0..16 * 32 {
            let px = base.pixels[k];
            if px.ray.segment != Segment::LowerWall {
                continue;
            }
            for c in 0..3 {
                let fd = (hi.image.data()[k * 3 + c] - lo.image.data()[k * 3 + c]) / (2.0 * eps);
                let analytic = px.d_color[c] * px.ray.d_z_floor;
                if (fd - analytic).abs() < 1e-5 * analytic.abs().max(1.0) {
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn tripod_mask_and_downsample() {
        let m = ValidityMask::tripod(8, 4, -1.0);
        assert!(m.get(0, 0) && !m.get(7, 3));
        let small = m.downsample(2).unwrap();
        assert_eq!(small.height(), 4);
        assert!(!small.get(3, 0));
    }
}
