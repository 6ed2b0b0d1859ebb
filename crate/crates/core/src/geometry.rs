//! Equirectangular coordinates, bilinear sampling and planar rigid poses.
//!
//! Conventions: column `i` maps to longitude `u = (i + 0.5) / W * 2π` and
//! row `j` to latitude `v = (0.5 - (j + 0.5) / H) * π`, so row 0 looks up and
//! no pixel center sits on a pole. Camera frames are z-up.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{Error, Result};

/// Most channels an [`ImageGrid`] may carry.
pub const MAX_CHANNELS: usize = 4;

/// Horizontal radius below which a point is treated as lying on the camera's
/// vertical axis.
pub const DEGENERATE_RADIUS: f64 = 1e-12;

/// Distance (in pixels) below which continuous coordinates snap to a pixel
/// center.
pub const PIXEL_SNAP: f64 = 1e-9;

/// Row-major image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height >= 2 && width >= 2, "image must be at least 2x2");
        assert!((1..=MAX_CHANNELS).contains(&channels));
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::DimensionMismatch(format!(
                "image must be at least 2x2, got {height}x{width}"
            )));
        }
        if !(1..=MAX_CHANNELS).contains(&channels) {
            return Err(Error::DimensionMismatch(format!(
                "unsupported channel count {channels}"
            )));
        }
        Error::check_len(height * width * channels, data.len())?;
        if let Some(bad) = data.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::DimensionMismatch(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Rows as contiguous slices, for per-row parallel writers.
    pub fn rows_mut(&mut self) -> std::slice::ChunksMut<'_, f64> {
        let stride = self.width * self.channels;
        self.data.chunks_mut(stride)
    }

    /// Box-filter downsampling by an integer factor in both directions.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::DimensionMismatch(format!(
                "cannot downsample {}x{} by {factor}",
                self.height, self.width
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Self::zeros(h, w, self.channels);
        let norm = 1.0 / (factor * factor) as f64;
        for j in 0..h {
            for i in 0..w {
                let dst = out.pixel_mut(j, i);
                for dj in 0..factor {
                    for di in 0..factor {
                        let src = self.pixel(j * factor + dj, i * factor + di);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                dst.iter_mut().for_each(|d| *d *= norm);
            }
        }
        Ok(out)
    }
}

/// Spherical viewing direction: longitude `u` in `[0, 2π)`, latitude `v` in
/// `(-π/2, π/2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UvCoord {
    pub u: f64,
    pub v: f64,
}

impl UvCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self {
            u: u.rem_euclid(TAU),
            v,
        }
    }

    /// Unit direction vector in the camera frame.
    pub fn direction(&self) -> [f64; 3] {
        let (su, cu) = self.u.sin_cos();
        let (sv, cv) = self.v.sin_cos();
        [cv * cu, cv * su, sv]
    }
}

pub fn column_longitude(col: usize, width: usize) -> f64 {
    (col as f64 + 0.5) / width as f64 * TAU
}

pub fn row_latitude(row: usize, height: usize) -> f64 {
    (0.5 - (row as f64 + 0.5) / height as f64) * PI
}

pub fn pixel_to_uv(row: usize, col: usize, height: usize, width: usize) -> Result<UvCoord> {
    if row >= height || col >= width {
        return Err(Error::Index {
            row,
            col,
            height,
            width,
        });
    }
    Ok(UvCoord {
        u: column_longitude(col, width),
        v: row_latitude(row, height),
    })
}

/// Continuous pixel coordinates `(row, col)` of a direction. Columns wrap into
/// `[-0.5, W - 0.5)`; rows stay within `[-0.5, H - 0.5]`.
pub fn uv_to_pixel(uv: UvCoord, height: usize, width: usize) -> (f64, f64) {
    // Coordinates within rounding noise of a pixel center land on it exactly.
    let snap = |x: f64| {
        let r = x.round();
        if (x - r).abs() < PIXEL_SNAP {
            r
        } else {
            x
        }
    };
    let w = width as f64;
    let mut col = snap(uv.u.rem_euclid(TAU) / TAU * w - 0.5);
    if col >= w - 0.5 {
        col -= w;
    }
    let row = snap((0.5 - uv.v / PI) * height as f64 - 0.5).clamp(-0.5, height as f64 - 0.5);
    (row, col)
}

/// Equirectangular projection of a camera-frame point.
pub fn equ_proj(p: [f64; 3]) -> Result<UvCoord> {
    let rho = p[0].hypot(p[1]);
    if !(rho > DEGENERATE_RADIUS) || !p[2].is_finite() {
        return Err(Error::DegenerateDirection(p));
    }
    Ok(UvCoord {
        u: p[1].atan2(p[0]).rem_euclid(TAU),
        v: (p[2] / rho).atan(),
    })
}

/// [`equ_proj`] together with the Jacobian `∂(u, v)/∂p`.
pub fn equ_proj_jacobian(p: [f64; 3]) -> Result<(UvCoord, [[f64; 3]; 2])> {
    let uv = equ_proj(p)?;
    let [x, y, z] = p;
    let rho2 = x * x + y * y;
    let rho = rho2.sqrt();
    let r2 = rho2 + z * z;
    let du = [-y / rho2, x / rho2, 0.0];
    let dv = [-z * x / (rho * r2), -z * y / (rho * r2), rho / r2];
    Ok((uv, [du, dv]))
}

/// Bilinearly interpolated color plus its derivatives with respect to the
/// continuous row and column coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub channels: usize,
    pub value: [f64; MAX_CHANNELS],
    pub d_row: [f64; MAX_CHANNELS],
    pub d_col: [f64; MAX_CHANNELS],
}

impl Sample {
    pub fn value(&self) -> &[f64] {
        &self.value[..self.channels]
    }
}

/// Samples `img` at continuous `(row, col)`. Columns wrap across the longitude
/// seam; rows clamp to the first and last row (zero row derivative there).
pub fn bilinear_sample(img: &ImageGrid, row: f64, col: f64) -> Sample {
    let (h, w) = (img.height, img.width);
    let max_row = (h - 1) as f64;
    let (r, row_clamped) = if row <= 0.0 {
        (0.0, row < 0.0)
    } else if row >= max_row {
        (max_row, row > max_row)
    } else {
        (row, false)
    };
    let j0 = (r.floor() as usize).min(h - 2);
    let fr = r - j0 as f64;

    let c = col.rem_euclid(w as f64);
    let i0 = (c.floor() as usize).min(w - 1);
    let fc = c - i0 as f64;
    let i1 = if i0 + 1 == w { 0 } else { i0 + 1 };

    let p00 = img.pixel(j0, i0);
    let p01 = img.pixel(j0, i1);
    let p10 = img.pixel(j0 + 1, i0);
    let p11 = img.pixel(j0 + 1, i1);

    let mut s = Sample {
        channels: img.channels,
        value: [0.0; MAX_CHANNELS],
        d_row: [0.0; MAX_CHANNELS],
        d_col: [0.0; MAX_CHANNELS],
    };
    for k in 0..img.channels {
        let top = p00[k] + fc * (p01[k] - p00[k]);
        let bottom = p10[k] + fc * (p11[k] - p10[k]);
        s.value[k] = top + fr * (bottom - top);
        s.d_col[k] = (1.0 - fr) * (p01[k] - p00[k]) + fr * (p11[k] - p10[k]);
        if !row_clamped {
            s.d_row[k] = bottom - top;
        }
    }
    s
}

/// Nearest pixel to continuous coordinates, with the same wrap/clamp rules
/// as [`bilinear_sample`].
pub fn nearest_pixel(row: f64, col: f64, height: usize, width: usize) -> (usize, usize) {
    let j = row.round().clamp(0.0, (height - 1) as f64) as usize;
    let i = (col.round() as i64).rem_euclid(width as i64) as usize;
    (j, i)
}

/// Planar rigid transform: rotation by `yaw` about z followed by translation
/// `(tx, ty)`. Heights are untouched.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RigidPose2D {
    pub tx: f64,
    pub ty: f64,
    pub yaw: f64,
}

impl RigidPose2D {
    pub const IDENTITY: Self = Self {
        tx: 0.0,
        ty: 0.0,
        yaw: 0.0,
    };

    pub fn new(tx: f64, ty: f64, yaw: f64) -> Self {
        Self { tx, ty, yaw }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let [x, y] = self.transform_xy([other.tx, other.ty]);
        Self {
            tx: x,
            ty: y,
            yaw: wrap_angle(self.yaw + other.yaw),
        }
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.yaw.sin_cos();
        Self {
            tx: -(c * self.tx + s * self.ty),
            ty: -(-s * self.tx + c * self.ty),
            yaw: wrap_angle(-self.yaw),
        }
    }

    pub fn transform_xy(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1] + self.tx, s * p[0] + c * p[1] + self.ty]
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let [x, y] = self.transform_xy([p[0], p[1]]);
        [x, y, p[2]]
    }

    /// Uniformly rescales the translation, e.g. from meters to camera-height
    /// units.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            tx: self.tx * factor,
            ty: self.ty * factor,
            yaw: self.yaw,
        }
    }
}

/// General planar affine map acting on the XY components of 3D points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub linear: [[f64; 2]; 2],
    pub offset: [f64; 2],
}

impl Affine2 {
    pub fn scale(kx: f64, ky: f64) -> Self {
        Self {
            linear: [[kx, 0.0], [0.0, ky]],
            offset: [0.0, 0.0],
        }
    }

    /// `self ∘ other`.
    pub fn then_after(&self, other: &Self) -> Self {
        let a = &self.linear;
        let b = &other.linear;
        let linear = [
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ];
        Self {
            linear,
            offset: self.apply_xy(other.offset),
        }
    }

    pub fn apply_xy(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.linear;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + self.offset[0],
            m[1][0] * p[0] + m[1][1] * p[1] + self.offset[1],
        ]
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let [x, y] = self.apply_xy([p[0], p[1]]);
        [x, y, p[2]]
    }

    /// Linear part applied to a direction (no offset).
    pub fn apply_linear(&self, d: [f64; 3]) -> [f64; 3] {
        let m = &self.linear;
        [
            m[0][0] * d[0] + m[0][1] * d[1],
            m[1][0] * d[0] + m[1][1] * d[1],
            d[2],
        ]
    }
}

impl From<RigidPose2D> for Affine2 {
    fn from(p: RigidPose2D) -> Self {
        let (s, c) = p.yaw.sin_cos();
        Self {
            linear: [[c, -s], [s, c]],
            offset: [p.tx, p.ty],
        }
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Clamps a latitude strictly inside the open interval `(-π/2, π/2)`.
pub fn clamp_latitude(v: f64) -> f64 {
    let lim = FRAC_PI_2 - 1e-12;
    v.clamp(-lim, lim)
}
