//! On-disk formats: layout JSON, scene directories, depth grids, PNG images,
//! manifests and fit logs. Files are written atomically (temp file + rename).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dlvr::{DepthMap, Panorama, ValidityMask};
use crate::error::{Error, Result};
use crate::geometry::{ImageGrid, RigidPose2D};
use crate::layout::{boundaries_to_corner_polygon, heights_from_annotation, LayoutBoundaries, LayoutHeights, Z_FLOOR};
use crate::losses::LossReport;
use crate::synth::ScenePair;

pub const SCENE_JSON: &str = "scene.json";
pub const PANO_A: &str = "pano_a.png";
pub const PANO_B: &str = "pano_b.png";
pub const MASK_A: &str = "mask_a.png";
pub const MASK_B: &str = "mask_b.png";
pub const DEPTH_A: &str = "depth_a.bin";
pub const DEPTH_B: &str = "depth_b.bin";
pub const MANIFEST_JSON: &str = "manifest.json";

/// Simplification tolerance used to count corners of scenes whose
/// `scene.json` does not record them.
const CORNER_TOLERANCE: f64 = 0.02;

/// Writes `bytes` to a temporary file next to `path` and renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json_string(value).as_bytes())
}

// ---------------------------------------------------------------------------
// Layout JSON

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutFile {
    pub width: usize,
    pub phi_floor: Vec<f64>,
    pub phi_ceil: Vec<f64>,
    pub z_floor: f64,
    pub z_ceil: f64,
}

impl LayoutFile {
    pub fn new(b: &LayoutBoundaries, h: &LayoutHeights) -> Self {
        Self {
            width: b.width(),
            phi_floor: b.floor().to_vec(),
            phi_ceil: b.ceil().to_vec(),
            z_floor: h.z_floor,
            z_ceil: h.z_ceil,
        }
    }

    /// Checks the fields; the error message names the offending field.
    pub fn check(&self) -> std::result::Result<(LayoutBoundaries, LayoutHeights), String> {
        if self.width < 2 {
            return Err(format!("width: {} is below 2", self.width));
        }
        for (name, v) in [("phi_floor", &self.phi_floor), ("phi_ceil", &self.phi_ceil)] {
            if v.len() != self.width {
                return Err(format!("{name}: {} values for width {}", v.len(), self.width));
            }
        }
        let half_pi = std::f64::consts::FRAC_PI_2;
        if let Some(i) = self.phi_floor.iter().position(|f| !(*f > -half_pi && *f < 0.0)) {
            return Err(format!("phi_floor[{i}]: {} outside (-pi/2, 0)", self.phi_floor[i]));
        }
        if let Some(i) = self.phi_ceil.iter().position(|c| !(*c > 0.0 && *c < half_pi)) {
            return Err(format!("phi_ceil[{i}]: {} outside (0, pi/2)", self.phi_ceil[i]));
        }
        if self.z_floor != Z_FLOOR {
            return Err(format!("z_floor: {} (must be {Z_FLOOR})", self.z_floor));
        }
        if !(self.z_ceil > 0.0 && self.z_ceil.is_finite()) {
            return Err(format!("z_ceil: {} is not a positive number", self.z_ceil));
        }
        let b = LayoutBoundaries::new(self.phi_floor.clone(), self.phi_ceil.clone()).map_err(|e| e.to_string())?;
        Ok((b, LayoutHeights::with_ceiling(self.z_ceil)))
    }

    pub fn to_layout(&self, path: &Path) -> Result<(LayoutBoundaries, LayoutHeights)> {
        self.check().map_err(|m| Error::schema(path, m))
    }
}

pub fn read_layout(path: &Path) -> Result<(LayoutBoundaries, LayoutHeights)> {
    read_json::<LayoutFile>(path)?.to_layout(path)
}

pub fn write_layout(path: &Path, b: &LayoutBoundaries, h: &LayoutHeights) -> Result<()> {
    write_json(path, &LayoutFile::new(b, h))
}

// ---------------------------------------------------------------------------
// Scene directories

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl From<RigidPose2D> for PoseFile {
    fn from(p: RigidPose2D) -> Self {
        Self {
            x: p.tx,
            y: p.ty,
            yaw: p.yaw,
        }
    }
}

impl From<PoseFile> for RigidPose2D {
    fn from(p: PoseFile) -> Self {
        RigidPose2D::new(p.x, p.y, p.yaw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenePoses {
    pub a: PoseFile,
    pub b: PoseFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub poses: ScenePoses,
    pub camera_height: f64,
    pub room_height: f64,
    pub gt_layout_a: LayoutFile,
    pub gt_layout_b: LayoutFile,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corners: Option<usize>,
}

impl SceneFile {
    pub fn new(s: &ScenePair) -> Self {
        Self {
            poses: ScenePoses {
                a: s.pose_a.into(),
                b: s.pose_b.into(),
            },
            camera_height: s.camera_height,
            room_height: s.room_height,
            gt_layout_a: LayoutFile::new(&s.gt_layout_a, &s.heights),
            gt_layout_b: LayoutFile::new(&s.gt_layout_b, &s.heights),
            seed: s.seed,
            corners: Some(s.corners),
        }
    }
}

pub fn write_scene(dir: &Path, s: &ScenePair) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rgb_png(&dir.join(PANO_A), &s.pano_a.image)?;
    write_rgb_png(&dir.join(PANO_B), &s.pano_b.image)?;
    write_mask_png(&dir.join(MASK_A), &s.pano_a.mask)?;
    write_mask_png(&dir.join(MASK_B), &s.pano_b.mask)?;
    write_atomic(&dir.join(DEPTH_A), &encode_depth(&s.depth_a)?)?;
    write_atomic(&dir.join(DEPTH_B), &encode_depth(&s.depth_b)?)?;
    write_json(&dir.join(SCENE_JSON), &SceneFile::new(s))
}

/// Loads a scene directory. Images are read back at 8-bit precision and
/// depth at 32-bit precision.
pub fn read_scene(dir: &Path) -> Result<ScenePair> {
    let json = dir.join(SCENE_JSON);
    let file: SceneFile = read_json(&json)?;
    let heights = heights_from_annotation(file.camera_height, file.room_height)
        .map_err(|e| Error::schema(&json, format!("camera_height/room_height: {e}")))?;
    let (gt_a, ha) = file
        .gt_layout_a
        .check()
        .map_err(|m| Error::schema(&json, format!("gt_layout_a.{m}")))?;
    let (gt_b, _) = file
        .gt_layout_b
        .check()
        .map_err(|m| Error::schema(&json, format!("gt_layout_b.{m}")))?;
    if (ha.z_ceil - heights.z_ceil).abs() > 1e-9 * heights.z_ceil.max(1.0) {
        return Err(Error::schema(
            &json,
            format!("gt_layout_a.z_ceil: {} disagrees with the annotated heights ({})", ha.z_ceil, heights.z_ceil),
        ));
    }
    let pano = |img: &str, mask: &str| -> Result<Panorama> {
        let image = read_rgb_png(&dir.join(img))?;
        let mask_path = dir.join(mask);
        let m = read_mask_png(&mask_path)?;
        Panorama::new(image, m).map_err(|e| Error::schema(&mask_path, e.to_string()))
    };
    let (pano_a, pano_b) = (pano(PANO_A, MASK_A)?, pano(PANO_B, MASK_B)?);
    let (height, width) = (pano_a.height(), pano_a.width());
    if (pano_b.height(), pano_b.width()) != (height, width) {
        return Err(Error::schema(dir.join(PANO_B), format!("size differs from {PANO_A}")));
    }
    for (name, b) in [("gt_layout_a", &gt_a), ("gt_layout_b", &gt_b)] {
        if b.width() != width {
            return Err(Error::schema(&json, format!("{name}.width: {} but panoramas are {width} wide", b.width())));
        }
    }
    let depth = |name: &str| -> Result<DepthMap> {
        let path = dir.join(name);
        let d = read_depth(&path)?;
        if (d.height, d.width) != (height, width) {
            return Err(Error::schema(&path, format!("grid is {}x{}, panoramas are {height}x{width}", d.height, d.width)));
        }
        Ok(d)
    };
    let corners = file
        .corners
        .unwrap_or_else(|| boundaries_to_corner_polygon(&gt_a, &heights, CORNER_TOLERANCE).len());
    Ok(ScenePair {
        pano_a,
        pano_b,
        pose_a: file.poses.a.into(),
        pose_b: file.poses.b.into(),
        heights,
        camera_height: file.camera_height,
        room_height: file.room_height,
        gt_layout_a: gt_a,
        gt_layout_b: gt_b,
        depth_a: depth(DEPTH_A)?,
        depth_b: depth(DEPTH_B)?,
        corners,
        seed: file.seed,
    })
}

// ---------------------------------------------------------------------------
// Depth grids

/// `u32` height and width (little endian) followed by row-major `f32`s.
pub fn encode_depth(d: &DepthMap) -> Result<Vec<u8>> {
    Error::check_len(d.height * d.width, d.data.len())?;
    let dims = |n: usize| u32::try_from(n).map_err(|_| Error::DimensionMismatch(format!("{n} does not fit in u32")));
    let mut out = Vec::with_capacity(8 + 4 * d.data.len());
    out.extend_from_slice(&dims(d.height)?.to_le_bytes());
    out.extend_from_slice(&dims(d.width)?.to_le_bytes());
    for v in &d.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    if bytes.len() < 8 {
        return Err(Error::schema(path, "missing 8-byte header"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as usize;
    let (height, width) = (word(0), word(4));
    let expected = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(8))
        .ok_or_else(|| Error::schema(path, format!("header {height}x{width} is too large")))?;
    if bytes.len() != expected {
        return Err(Error::schema(
            path,
            format!("{} bytes, header {height}x{width} needs {expected}", bytes.len()),
        ));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(DepthMap { height, width, data })
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_depth(&bytes, path)
}

/// 16-bit grayscale PNG in millimeters, saturating at 65.535 m.
pub fn write_depth_png(path: &Path, d: &DepthMap) -> Result<()> {
    let mm: Vec<u8> = d
        .data
        .iter()
        .flat_map(|m| ((m * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16).to_be_bytes())
        .collect();
    let bytes = encode_png(&mm, d.width, d.height, ExtendedColorType::L16, path)?;
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------------------
// PNG images

fn encode_png(data: &[u8], width: usize, height: usize, color: ExtendedColorType, path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    // Encoder settings are pinned so equal images give equal bytes.
    PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::Adaptive)
        .write_image(data, width as u32, height as u32, color)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(out)
}

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_rgb_png(img: &ImageGrid, path: &Path) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = match img.channels() {
        3 => img.data().iter().map(|x| quantize(*x)).collect(),
        1 => img.data().iter().flat_map(|x| [quantize(*x); 3]).collect(),
        c => return Err(Error::DimensionMismatch(format!("cannot write a {c}-channel image as RGB"))),
    };
    encode_png(&bytes, img.width(), img.height(), ExtendedColorType::Rgb8, path)
}

/// 8-bit RGB PNG; single-channel images are written as gray RGB.
pub fn write_rgb_png(path: &Path, img: &ImageGrid) -> Result<()> {
    write_atomic(path, &encode_rgb_png(img, path)?)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rgb_png(path: &Path) -> Result<ImageGrid> {
    let img = open_image(path)?;
    if img.color() != image::ColorType::Rgb8 {
        return Err(Error::schema(path, format!("expected 8-bit RGB, found {:?}", img.color())));
    }
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    ImageGrid::from_data(h, w, 3, data).map_err(|e| Error::schema(path, e.to_string()))
}

/// 8-bit gray, 255 = valid and 0 = invalid.
pub fn write_mask_png(path: &Path, mask: &ValidityMask) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect();
    let png = encode_png(&bytes, mask.width(), mask.height(), ExtendedColorType::L8, path)?;
    write_atomic(path, &png)
}

pub fn read_mask_png(path: &Path) -> Result<ValidityMask> {
    let img = open_image(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::schema(path, format!("expected 8-bit gray, found {:?}", img.color())));
    }
    let gray = img.into_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for (k, v) in gray.into_raw().into_iter().enumerate() {
        match v {
            255 => data.push(true),
            0 => data.push(false),
            other => {
                return Err(Error::schema(path, format!("pixel {k} has value {other}; masks hold 0 or 255")));
            }
        }
    }
    ValidityMask::from_data(h, w, data).map_err(|e| Error::schema(path, e.to_string()))
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Scene directory.
    pub scene: PathBuf,
    /// Predicted layout JSON of view `a`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_a: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_b: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn scene_only(scene: impl Into<PathBuf>) -> Self {
        Self {
            scene: scene.into(),
            pred_a: None,
            pred_b: None,
        }
    }

    pub fn predictions(&self) -> impl Iterator<Item = (char, &PathBuf)> {
        [('a', &self.pred_a), ('b', &self.pred_b)]
            .into_iter()
            .filter_map(|(v, p)| p.as_ref().map(|p| (v, p)))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub scenes: Vec<ManifestEntry>,
}

/// Reads a manifest, resolving relative paths against its directory and
/// checking that every referenced path exists.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mut m: Manifest = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &mut PathBuf, field: String| -> Result<()> {
        if p.is_relative() {
            *p = base.join(&*p);
        }
        if !p.exists() {
            return Err(Error::schema(path, format!("{field}: {} does not exist", p.display())));
        }
        Ok(())
    };
    for (i, e) in m.scenes.iter_mut().enumerate() {
        resolve(&mut e.scene, format!("scenes[{i}].scene"))?;
        if !e.scene.join(SCENE_JSON).is_file() {
            return Err(Error::schema(
                path,
                format!("scenes[{i}].scene: {} has no {SCENE_JSON}", e.scene.display()),
            ));
        }
        if let Some(p) = e.pred_a.as_mut() {
            resolve(p, format!("scenes[{i}].pred_a"))?;
        }
        if let Some(p) = e.pred_b.as_mut() {
            resolve(p, format!("scenes[{i}].pred_b"))?;
        }
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Fit logs

/// One line of `fit_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitLogLine {
    pub iteration: usize,
    /// `[H, W]` of the resolution stage; absent for diverged runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<(usize, usize)>,
    #[serde(flatten)]
    pub report: LossReport,
}

pub fn fit_log_jsonl(trajectory: &[LossReport], stage_of: Option<&[(usize, usize)]>) -> Result<String> {
    if let Some(s) = stage_of {
        Error::check_len(trajectory.len(), s.len())?;
    }
    let mut out = String::new();
    for (k, report) in trajectory.iter().enumerate() {
        let line = FitLogLine {
            iteration: k,
            stage: stage_of.map(|s| s[k]),
            report: report.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable report"));
        out.push('\n');
    }
    Ok(out)
}

pub fn read_fit_log(path: &Path) -> Result<Vec<FitLogLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| serde_json::from_str(l).map_err(|e| Error::schema(path, format!("line {}: {e}", k + 1))))
        .collect()
}
