//! Procedural rectilinear rooms, ray-traced to equirectangular panoramas with
//! exact layouts, depth maps and tripod masks.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dlvr::{DepthMap, Panorama, ValidityMask};
use crate::error::{Error, Result};
use crate::geometry::{column_longitude, row_latitude, ImageGrid, RigidPose2D};
use crate::layout::{heights_from_annotation, LayoutBoundaries, LayoutHeights};

/// Default tripod cut-off latitude (−75°).
pub const TRIPOD_LATITUDE: f64 = -75.0 * std::f64::consts::PI / 180.0;

/// Minimum distance between a camera and any wall.
pub const MIN_CLEARANCE: f64 = 0.2;

const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Counterclockwise, axis-aligned floor polygon in meters.
    pub polygon: Vec<[f64; 2]>,
    pub room_height: f64,
    pub camera_height: f64,
    /// Camera poses in world coordinates (meters).
    pub poses: Vec<RigidPose2D>,
    pub texture_seed: u64,
    /// Adds a view-dependent highlight to the floor.
    #[serde(default)]
    pub specular_floor: bool,
}

impl RoomSpec {
    pub fn heights(&self) -> Result<LayoutHeights> {
        heights_from_annotation(self.camera_height, self.room_height)
    }

    pub fn validate(&self) -> Result<()> {
        validate_polygon(&self.polygon)?;
        if !(self.camera_height > 0.0 && self.camera_height < self.room_height) {
            return Err(Error::InvalidAnnotation {
                camera: self.camera_height,
                room: self.room_height,
            });
        }
        for p in &self.poses {
            let c = [p.tx, p.ty];
            if !point_in_polygon(c, &self.polygon) || wall_clearance(c, &self.polygon) < MIN_CLEARANCE {
                return Err(Error::Geometry(format!("camera at ({:.3}, {:.3}) is not inside with clearance", p.tx, p.ty)));
            }
        }
        Ok(())
    }
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let orient = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
    let on = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
        r[0] >= p[0].min(q[0]) && r[0] <= p[0].max(q[0]) && r[1] >= p[1].min(q[1]) && r[1] <= p[1].max(q[1])
    };
    let (d1, d2, d3, d4) = (orient(c, d, a), orient(c, d, b), orient(a, b, c), orient(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on(c, d, a)) || (d2 == 0.0 && on(c, d, b)) || (d3 == 0.0 && on(a, b, c)) || (d4 == 0.0 && on(a, b, d))
}

/// Checks that `poly` is a simple, counterclockwise polygon whose edges
/// alternate between horizontal and vertical.
pub fn validate_polygon(poly: &[[f64; 2]]) -> Result<()> {
    let n = poly.len();
    if n < 4 || n % 2 != 0 {
        return Err(Error::DegeneratePolygon(format!("{n} corners")));
    }
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let horizontal = a[1] == b[1] && a[0] != b[0];
        let vertical = a[0] == b[0] && a[1] != b[1];
        if !(horizontal || vertical) {
            return Err(Error::DegeneratePolygon(format!("edge {i} is not axis-aligned")));
        }
        let c = poly[(i + 2) % n];
        let next_horizontal = b[1] == c[1];
        if horizontal == next_horizontal {
            return Err(Error::DegeneratePolygon(format!("edges {i} and {} are collinear", i + 1)));
        }
    }
    if signed_area(poly) <= 0.0 {
        return Err(Error::DegeneratePolygon("polygon is not counterclockwise".into()));
    }
    for i in 0..n {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return Err(Error::DegeneratePolygon(format!("edges {i} and {j} intersect")));
            }
        }
    }
    Ok(())
}

pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn wall_clearance(p: [f64; 2], poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Nearest wall hit of the horizontal ray from `origin` along `angle`:
/// `(distance, edge index, position along the edge)`.
pub fn cast_ray(origin: [f64; 2], angle: f64, poly: &[[f64; 2]]) -> Option<(f64, usize, f64)> {
    let (s, c) = angle.sin_cos();
    let n = poly.len();
    let mut best: Option<(f64, usize, f64)> = None;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
        let den = c * ey - s * ex;
        if den.abs() < 1e-15 {
            continue;
        }
        let (wx, wy) = (a[0] - origin[0], a[1] - origin[1]);
        let t = (wx * ey - wy * ex) / den;
        let along = (wx * s - wy * c) / den;
        if t > 0.0 && (0.0..=1.0).contains(&along) && best.map_or(true, |bb| t < bb.0) {
            best = Some((t, i, along * ex.hypot(ey)));
        }
    }
    best
}

/// Random rectilinear room with `corners` corners: a rectangle with
/// rectangular notches cut from some of its corners.
pub fn sample_room(seed: u64, corners: usize) -> Result<RoomSpec> {
    if !(4..=12).contains(&corners) || corners % 2 != 0 {
        return Err(Error::Config(format!("corner count must be one of 4, 6, 8, 10, 12 (got {corners})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let (sx, sy) = (rng.random_range(3.0..7.0), rng.random_range(3.0..7.0));
        let notches = (corners - 4) / 2;
        let mut which = [0usize, 1, 2, 3];
        for i in (1..4).rev() {
            which.swap(i, rng.random_range(0..=i));
        }
        let mut cut = [None; 4];
        for &k in &which[..notches] {
            cut[k] = Some((rng.random_range(0.2..0.42) * sx, rng.random_range(0.2..0.42) * sy));
        }
        // Rectangle corners counterclockwise from (0, 0); a notch replaces the
        // corner by three vertices.
        let rect = [[0.0, 0.0], [sx, 0.0], [sx, sy], [0.0, sy]];
        let mut polygon = Vec::with_capacity(corners);
        for (k, &p) in rect.iter().enumerate() {
            match cut[k] {
                None => polygon.push(p),
                Some((a, b)) => {
                    let dx = if p[0] == 0.0 { a } else { -a };
                    let dy = if p[1] == 0.0 { b } else { -b };
                    // Incoming edge is vertical for corners 0 and 2, horizontal otherwise.
                    let (first, last) = if k % 2 == 0 {
                        ([p[0], p[1] + dy], [p[0] + dx, p[1]])
                    } else {
                        ([p[0] + dx, p[1]], [p[0], p[1] + dy])
                    };
                    polygon.extend([first, [p[0] + dx, p[1] + dy], last]);
                }
            }
        }
        let room_height = rng.random_range(2.4..3.2);
        let camera_height = rng.random_range(1.4..1.7);
        let Some(poses) = sample_cameras(&mut rng, &polygon, 2) else {
            continue;
        };
        let room = RoomSpec {
            polygon,
            room_height,
            camera_height,
            poses,
            texture_seed: rng.random(),
            specular_floor: false,
        };
        if room.validate().is_ok() {
            return Ok(room);
        }
    }
    Err(Error::Generation(format!("no valid {corners}-corner room after {MAX_ATTEMPTS} attempts")))
}

fn sample_cameras(rng: &mut impl Rng, poly: &[[f64; 2]], count: usize) -> Option<Vec<RigidPose2D>> {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in poly {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let mut poses: Vec<RigidPose2D> = Vec::with_capacity(count);
    for _ in 0..MAX_ATTEMPTS {
        if poses.len() == count {
            break;
        }
        let c = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
        if !point_in_polygon(c, poly) || wall_clearance(c, poly) < 0.6 {
            continue;
        }
        if let Some(first) = poses.first() {
            let baseline = (c[0] - first.tx).hypot(c[1] - first.ty);
            if !(0.6..=1.8).contains(&baseline) {
                continue;
            }
        }
        let yaw = FRAC_PI_2 * rng.random_range(0..4) as f64;
        poses.push(RigidPose2D::new(c[0], c[1], yaw));
    }
    (poses.len() == count).then_some(poses)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(ix as u64 ^ splitmix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (tx, ty) = (x - fx, y - fy);
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (sx, sy) = (fade(tx), fade(ty));
    let (ix, iy) = (fx as i64, fy as i64);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + sx * (b - a);
    let bottom = c + sx * (d - c);
    top + sy * (bottom - top)
}

/// Smooth procedural surface texture: base color, a sinusoidal checker and
/// a few octaves of value noise.
#[derive(Debug, Clone)]
struct Texture {
    base: [f64; 3],
    checker_wavelength: f64,
    checker_amp: [f64; 3],
    noise_seed: u64,
    noise_scale: f64,
    noise_amp: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Surface {
    Wall,
    Floor,
    Ceiling,
}

impl Texture {
    /// Floors are darker and ceilings brighter than walls.
    fn new(seed: u64, surface: Surface) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut color = |lo: f64, hi: f64| [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)];
        let base = match surface {
            Surface::Wall => color(0.4, 0.7),
            Surface::Floor => color(0.15, 0.35),
            Surface::Ceiling => color(0.75, 0.9),
        };
        let checker_amp = color(0.05, 0.12);
        let noise_amp = color(0.15, 0.3);
        Self {
            base,
            checker_wavelength: rng.random_range(0.5..0.9),
            checker_amp,
            noise_seed: rng.random(),
            noise_scale: rng.random_range(1.2..2.0),
            noise_amp,
        }
    }

    fn color(&self, s: f64, t: f64) -> [f64; 3] {
        let k = TAU / self.checker_wavelength;
        let checker = (k * s).sin() * (k * t).sin();
        let mut noise = 0.0;
        let mut amp = 1.0;
        let mut freq = self.noise_scale;
        for octave in 0..3u64 {
            noise += amp * (value_noise(self.noise_seed.wrapping_add(octave), s * freq, t * freq) - 0.5);
            amp *= 0.5;
            freq *= 2.0;
        }
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = (self.base[c] + self.checker_amp[c] * checker + self.noise_amp[c] * noise).clamp(0.0, 1.0);
        }
        out
    }
}

/// Fixed light used by the specular floor.
const LIGHT: [f64; 3] = [0.7, 0.4, 0.5];

/// Ray-traced panorama and metric Euclidean depth from camera `pose_index`.
pub fn trace_panorama(room: &RoomSpec, pose_index: usize, height: usize, width: usize) -> Result<(Panorama, DepthMap)> {
    let pose = *room
        .poses
        .get(pose_index)
        .ok_or_else(|| Error::Config(format!("room has no pose {pose_index}")))?;
    if height < 2 || width < 2 {
        return Err(Error::DimensionMismatch(format!("panorama {height}x{width} is too small")));
    }
    let origin = [pose.tx, pose.ty];
    let n_walls = room.polygon.len();
    let textures: Vec<Texture> = (0..n_walls + 2)
        .map(|k| {
            let surface = match k.cmp(&n_walls) {
                std::cmp::Ordering::Less => Surface::Wall,
                std::cmp::Ordering::Equal => Surface::Floor,
                std::cmp::Ordering::Greater => Surface::Ceiling,
            };
            Texture::new(splitmix(room.texture_seed ^ (k as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D)), surface)
        })
        .collect();
    let hits: Vec<Option<(f64, usize, f64)>> = (0..width)
        .map(|i| cast_ray(origin, column_longitude(i, width) + pose.yaw, &room.polygon))
        .collect();
    if hits.iter().any(Option::is_none) {
        return Err(Error::Geometry("camera is outside the room".into()));
    }
    let cam_h = room.camera_height;
    let rows: Vec<Vec<([f64; 3], f64)>> = (0..height)
        .into_par_iter()
        .map(|j| {
            let v = row_latitude(j, height);
            let tan_v = v.tan();
            (0..width)
                .map(|i| {
                    let (t_wall, edge, along) = hits[i].expect("checked above");
                    let angle = column_longitude(i, width) + pose.yaw;
                    let (s, c) = angle.sin_cos();
                    let z_wall = cam_h + t_wall * tan_v;
                    let (t, color) = if (0.0..=room.room_height).contains(&z_wall) {
                        (t_wall, textures[edge].color(along, z_wall))
                    } else {
                        let (plane_z, tex) = if tan_v < 0.0 { (0.0, n_walls) } else { (room.room_height, n_walls + 1) };
                        let t = (plane_z - cam_h) / tan_v;
                        let (x, y) = (origin[0] + t * c, origin[1] + t * s);
                        let mut color = textures[tex].color(x, y);
                        if room.specular_floor && tex == n_walls {
                            let gloss = specular(origin, cam_h, [x, y], room.room_height);
                            for ch in &mut color {
                                *ch = (*ch + 0.5 * gloss).min(1.0);
                            }
                        }
                        (t, color)
                    };
                    (color, t / v.cos())
                })
                .collect()
        })
        .collect();
    let mut image = ImageGrid::zeros(height, width, 3);
    let mut depth = Vec::with_capacity(height * width);
    for (k, (color, d)) in rows.into_iter().flatten().enumerate() {
        image.pixel_mut(k / width, k % width).copy_from_slice(&color);
        depth.push(d);
    }
    let mask = ValidityMask::tripod(height, width, TRIPOD_LATITUDE);
    Ok((
        Panorama::new(image, mask)?,
        DepthMap {
            height,
            width,
            data: depth,
        },
    ))
}

/// Phong-like highlight of a ceiling light mirrored in the floor.
fn specular(origin: [f64; 2], cam_h: f64, hit: [f64; 2], room_height: f64) -> f64 {
    let light = [LIGHT[0] * origin[0] + 1.0, LIGHT[1] * origin[1] + 1.0, LIGHT[2] * room_height];
    let to_eye = [origin[0] - hit[0], origin[1] - hit[1], cam_h];
    let to_light = [light[0] - hit[0], light[1] - hit[1], light[2]];
    let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let (e, l) = (norm(to_eye), norm(to_light));
    let half = [
        to_eye[0] / e + to_light[0] / l,
        to_eye[1] / e + to_light[1] / l,
        to_eye[2] / e + to_light[2] / l,
    ];
    (half[2] / norm(half)).max(0.0).powi(200)
}

/// Exact boundary angles of the visible walls seen from `pose`, in units of
/// camera height, for `width` columns.
pub fn gt_boundaries(room: &RoomSpec, pose: &RigidPose2D, width: usize) -> Result<LayoutBoundaries> {
    let origin = [pose.tx, pose.ty];
    if !point_in_polygon(origin, &room.polygon) {
        return Err(Error::Geometry(format!("camera at ({:.3}, {:.3}) is outside the room", pose.tx, pose.ty)));
    }
    let h = room.heights()?;
    let mut floor = Vec::with_capacity(width);
    let mut ceil = Vec::with_capacity(width);
    for i in 0..width {
        let (t, _, _) = cast_ray(origin, column_longitude(i, width) + pose.yaw, &room.polygon)
            .ok_or_else(|| Error::Geometry("ray escapes the room".into()))?;
        let r = t / room.camera_height;
        floor.push((h.z_floor / r).atan());
        ceil.push((h.z_ceil / r).atan());
    }
    LayoutBoundaries::new(floor, ceil)
}

/// Two registered panoramas of one room with ground truth.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub pano_a: Panorama,
    pub pano_b: Panorama,
    /// World poses in meters.
    pub pose_a: RigidPose2D,
    pub pose_b: RigidPose2D,
    pub heights: LayoutHeights,
    pub camera_height: f64,
    pub room_height: f64,
    pub gt_layout_a: LayoutBoundaries,
    pub gt_layout_b: LayoutBoundaries,
    /// Metric Euclidean depth.
    pub depth_a: DepthMap,
    pub depth_b: DepthMap,
    /// Ground-truth corner count of the room.
    pub corners: usize,
    pub seed: u64,
}

impl ScenePair {
    /// Maps XY points of camera `a` into camera `b`, in camera-height units.
    pub fn pose_a_to_b(&self) -> RigidPose2D {
        relative_pose(&self.pose_a, &self.pose_b, self.camera_height)
    }

    pub fn pose_b_to_a(&self) -> RigidPose2D {
        relative_pose(&self.pose_b, &self.pose_a, self.camera_height)
    }

    pub fn height(&self) -> usize {
        self.pano_a.height()
    }

    pub fn width(&self) -> usize {
        self.pano_a.width()
    }
}

/// Transform taking camera-frame XY of `from` to camera-frame XY of `to`,
/// with translations divided by the camera height.
pub fn relative_pose(from: &RigidPose2D, to: &RigidPose2D, camera_height: f64) -> RigidPose2D {
    to.inverse().compose(from).scaled(1.0 / camera_height)
}

/// Renders the two poses `(a, b)` of `room`.
pub fn make_scene_pair(room: &RoomSpec, poses: (usize, usize), height: usize, width: usize, seed: u64) -> Result<ScenePair> {
    room.validate()?;
    let (pano_a, depth_a) = trace_panorama(room, poses.0, height, width)?;
    let (pano_b, depth_b) = trace_panorama(room, poses.1, height, width)?;
    let (pose_a, pose_b) = (room.poses[poses.0], room.poses[poses.1]);
    Ok(ScenePair {
        pano_a,
        pano_b,
        pose_a,
        pose_b,
        heights: room.heights()?,
        camera_height: room.camera_height,
        room_height: room.room_height,
        gt_layout_a: gt_boundaries(room, &pose_a, width)?,
        gt_layout_b: gt_boundaries(room, &pose_b, width)?,
        depth_a,
        depth_b,
        corners: room.polygon.len(),
        seed,
    })
}

/// Room from `seed` rendered as a pair.
pub fn generate_scene(seed: u64, corners: usize, height: usize, width: usize) -> Result<ScenePair> {
    make_scene_pair(&sample_room(seed, corners)?, (0, 1), height, width, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dlvr::{render_layout_depth, render_point_grid, warp, Segment};
    use crate::losses::{ceil_floor, manhattan_columns, source_target, ChamferReduction};

    fn square_room(side: f64, cam: [f64; 2], camera_height: f64, room_height: f64) -> RoomSpec {
        RoomSpec {
            polygon: vec![[0.0, 0.0], [side, 0.0], [side, side], [0.0, side]],
            room_height,
            camera_height,
            poses: vec![RigidPose2D::new(cam[0], cam[1], 0.0)],
            texture_seed: 3,
            specular_floor: false,
        }
    }

    #[test]
    fn four_corners_is_a_rectangle() {
        let room = sample_room(0, 4).unwrap();
        assert_eq!(room.polygon.len(), 4);
        validate_polygon(&room.polygon).unwrap();
        assert_eq!(sample_room(0, 4).unwrap(), room);
        assert!(sample_room(0, 5).is_err());
        assert!(sample_room(0, 14).is_err());
    }

    #[test]
    fn sampled_rooms_are_valid() {
        for seed in 0..1000 {
            let room = sample_room(seed, 8).unwrap();
            assert_eq!(room.polygon.len(), 8);
            room.validate().unwrap();
        }
        for corners in [6, 10, 12] {
            assert_eq!(sample_room(1, corners).unwrap().polygon.len(), corners);
        }
    }

    #[test]
    fn polygon_validation_rejects_bad_shapes() {
        let cw = vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]];
        assert!(validate_polygon(&cw).is_err());
        let slanted = vec![[0.0, 0.0], [1.0, 0.2], [1.0, 1.0], [0.0, 1.0]];
        assert!(validate_polygon(&slanted).is_err());
        let crossing = vec![
            [0.0, 0.0], [3.0, 0.0], [3.0, 2.0], [1.0, 2.0], [1.0, -1.0], [2.0, -1.0], [2.0, 3.0], [0.0, 3.0],
        ];
        assert!(validate_polygon(&crossing).is_err());
    }

    #[test]
    fn unit_room_boundaries() {
        let room = square_room(2.0, [1.0, 1.0], 1.0, 2.0);
        let w = 8;
        let b = gt_boundaries(&room, &room.poses[0], w).unwrap();
        // Column 0 faces u = π/8: distance 1/cos(π/8).
        let r = 1.0 / (std::f64::consts::PI / 8.0).cos();
        assert!((b.floor()[0] - (-1.0 / r).atan()).abs() < 1e-12);
        assert!((b.ceil()[0] + b.floor()[0]).abs() < 1e-12);
        let h = room.heights().unwrap();
        assert!(ceil_floor(&b, &h) < 1e-20);
        // Column 0 sits at u = π/4 for W = 4; rotate it onto the wall normal.
        let w = 4;
        let pose = RigidPose2D::new(1.0, 1.0, -TAU / 8.0);
        let b = gt_boundaries(&room, &pose, w).unwrap();
        assert!((b.floor()[0] + std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert!((b.ceil()[0] - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        let outside = RigidPose2D::new(5.0, 1.0, 0.0);
        assert!(matches!(gt_boundaries(&room, &outside, 8), Err(Error::Geometry(_))));
    }

    #[test]
    fn downward_rays_never_hit_ceiling_and_nadir_depth() {
        let room = square_room(4.0, [1.7, 2.2], 1.5, 2.8);
        let (h, w) = (64, 128);
        let (pano, depth) = trace_panorama(&room, 0, h, w).unwrap();
        let b = gt_boundaries(&room, &room.poses[0], w).unwrap();
        let grid = render_point_grid(&b, &room.heights().unwrap(), h, w).unwrap();
        for j in h / 2..h {
            for i in 0..w {
                assert_ne!(grid.segment[j * w + i], Segment::Ceiling);
            }
        }
        let v = row_latitude(h - 1, h);
        assert!((depth.get(h - 1, 0) - 1.5 / v.sin().abs()).abs() < 1e-12);
        assert!(!pano.mask.get(h - 1, 0) && pano.mask.get(h / 2, 0));
        let again = trace_panorama(&room, 0, h, w).unwrap();
        assert_eq!(again.0, pano);
        assert_eq!(again.1, depth);
    }

    #[test]
    fn layout_depth_matches_tracer_on_walls() {
        for (seed, corners) in [(1, 4), (2, 8), (3, 12)] {
            let room = sample_room(seed, corners).unwrap();
            let (h, w) = (64, 128);
            let (_, depth) = trace_panorama(&room, 0, h, w).unwrap();
            let hh = room.heights().unwrap();
            let b = gt_boundaries(&room, &room.poses[0], w).unwrap();
            let rendered = render_layout_depth(&b, &hh, h, w).unwrap().scaled(room.camera_height);
            let grid = render_point_grid(&b, &hh, h, w).unwrap();
            for k in 0..h * w {
                if grid.segment[k].is_wall() {
                    assert!((rendered.data[k] - depth.data[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gt_is_consistent_across_losses() {
        let scene = generate_scene(4, 4, 64, 128).unwrap();
        let h = scene.heights;
        for b in [&scene.gt_layout_a, &scene.gt_layout_b] {
            assert!(ceil_floor(b, &h) < 1e-9);
            let cols = manhattan_columns(b, &h, 2).unwrap();
            assert!(cols.iter().all(|c| *c < 1e-6));
        }
        let st = source_target(
            &scene.gt_layout_a,
            &h,
            &scene.gt_layout_b,
            &h,
            &scene.pose_a_to_b(),
            ChamferReduction::Mean,
        );
        assert!(st < 1e-2, "{st}");
    }

    #[test]
    fn identical_poses_give_identical_panoramas() {
        let mut room = sample_room(9, 6).unwrap();
        room.poses[1] = room.poses[0];
        let pair = make_scene_pair(&room, (0, 1), 32, 64, 9).unwrap();
        assert_eq!(pair.pano_a, pair.pano_b);
        let rel = pair.pose_a_to_b();
        assert!(rel.tx.abs() < 1e-12 && rel.ty.abs() < 1e-12 && rel.yaw.abs() < 1e-12);
    }

    #[test]
    fn gt_warp_reproduces_target_walls() {
        let scene = generate_scene(11, 4, 256, 512).unwrap();
        // Warp b into a with a's layout.
        let out = warp(&scene.pano_b, &scene.gt_layout_a, &scene.heights, &scene.pose_a_to_b()).unwrap();
        let grid = render_point_grid(&scene.gt_layout_a, &scene.heights, 256, 512).unwrap();
        let (mut sum, mut n) = (0.0, 0);
        for k in 0..256 * 512 {
            if grid.segment[k].is_wall() && out.mask.data()[k] && scene.pano_a.mask.data()[k] {
                let a = &scene.pano_a.image.data()[k * 3..k * 3 + 3];
                let b = &out.image.data()[k * 3..k * 3 + 3];
                sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                n += 1;
            }
        }
        assert!(sum / (n as f64) < 1e-3, "{}", sum / n as f64);
    }
}
