//! Direct self-supervised fitting: boundary angles of both views of a scene
//! pair are free parameters, optimized with Adam on the total loss.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dlvr::Panorama;
use crate::error::{Error, Result};
use crate::geometry::RigidPose2D;
use crate::grad::{GradientVector, Tape};
use crate::layout::{
    constrain, infer_ceiling_height, stretch_layout, LayoutBoundaries, LayoutHeights, RawBoundaries, StretchParams,
};
use crate::losses::{cycle_var, stretch_var, total, LossConfig, LossInputs, LossKind, LossReport, LossSet, LossTerms, StretchSource, ViewVars};
use crate::synth::ScenePair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("step size {} must be positive", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} = {b} must lie in (0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        Error::check_len(self.m.len(), params.len())?;
        Error::check_len(self.m.len(), grad.len())?;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        self.t += 1;
        let (c1, c2) = (1.0 - beta1.powi(self.t), 1.0 - beta2.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            params[i] -= learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + epsilon);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// All raw parameters zero: floor at −π/4, ceiling at π/4.
    Flat,
    /// Ground truth plus independent Gaussian noise of `sigma` radians on
    /// every boundary angle.
    PerturbedGt { sigma: f64 },
    User {
        a: LayoutBoundaries,
        b: LayoutBoundaries,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeightMode {
    /// Ceiling height from the capture metadata.
    Annotated,
    /// Ceiling height inferred from each view's current boundaries.
    Inferred,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Total over all stages.
    pub iterations: usize,
    pub optimizer: AdamConfig,
    pub losses: LossConfig,
    pub init: Init,
    pub heights: HeightMode,
    /// `(H, W)` stages, coarse to fine. `None` fits at a quarter, half and
    /// full resolution.
    pub schedule: Option<Vec<(usize, usize)>>,
    /// Number of leading stages fitted with the photometric term alone.
    pub photo_only_stages: usize,
    /// Relative best-loss improvement over the last tenth of the final stage
    /// below which the fit counts as converged.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            optimizer: AdamConfig::default(),
            losses: LossConfig::default(),
            init: Init::Flat,
            heights: HeightMode::Annotated,
            schedule: None,
            photo_only_stages: 0,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        self.optimizer.validate()?;
        self.losses.validate()?;
        if let Init::PerturbedGt { sigma } = self.init {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!("perturbation sigma {sigma} must be non-negative")));
            }
        }
        if let Some(s) = &self.schedule {
            if s.is_empty() {
                return Err(Error::Config("empty resolution schedule".into()));
            }
        }
        Ok(())
    }

    /// Stages for a scene of `height × width`.
    pub fn stages(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        let stages = match &self.schedule {
            Some(s) => s.clone(),
            None => default_schedule(height, width),
        };
        for &(h, w) in &stages {
            if h == 0 || w == 0 || height % h != 0 || width % w != 0 || height / h != width / w {
                return Err(Error::Config(format!(
                    "stage {h}x{w} is not an integer downsampling of {height}x{width}"
                )));
            }
        }
        if stages.len() > self.iterations {
            return Err(Error::Config(format!(
                "{} iterations cannot cover {} stages",
                self.iterations,
                stages.len()
            )));
        }
        Ok(stages)
    }
}

/// Quarter, half and full resolution, skipping stages narrower than 32
/// columns.
pub fn default_schedule(height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = [4, 2]
        .into_iter()
        .filter(|f| height % f == 0 && width % f == 0 && width / f >= 32)
        .map(|f| (height / f, width / f))
        .collect();
    out.push((height, width));
    out
}

/// The two panoramas and the relative pose a fit needs.
#[derive(Debug, Clone)]
pub struct FitScene {
    pub panoramas: [Panorama; 2],
    /// Maps camera-frame XY of view `a` into view `b`, camera-height units.
    pub pose_a_to_b: RigidPose2D,
    pub heights: LayoutHeights,
}

impl FitScene {
    pub fn from_pair(scene: &ScenePair) -> Self {
        Self {
            panoramas: [scene.pano_a.clone(), scene.pano_b.clone()],
            pose_a_to_b: scene.pose_a_to_b(),
            heights: scene.heights,
        }
    }

    pub fn height(&self) -> usize {
        self.panoramas[0].height()
    }

    pub fn width(&self) -> usize {
        self.panoramas[0].width()
    }

    pub fn downsample(&self, factor: usize) -> Result<Self> {
        Ok(Self {
            panoramas: [self.panoramas[0].downsample(factor)?, self.panoramas[1].downsample(factor)?],
            pose_a_to_b: self.pose_a_to_b,
            heights: self.heights,
        })
    }

    fn pose_t_to_s(&self, target: usize) -> RigidPose2D {
        if target == 0 {
            self.pose_a_to_b
        } else {
            self.pose_a_to_b.inverse()
        }
    }
}

/// Parameter table with its optimizer.
#[derive(Debug, Clone, PartialEq)]
struct Table {
    raw: RawBoundaries,
    opt: Adam,
}

impl Table {
    fn new(b: &LayoutBoundaries, cfg: AdamConfig) -> Self {
        Self {
            raw: b.to_raw(),
            opt: Adam::new(2 * b.width(), cfg),
        }
    }

    fn update(&mut self, g: &GradientVector) -> Result<()> {
        let mut flat = self.raw.to_flat();
        self.opt.step(&mut flat, &g.to_flat())?;
        self.raw = RawBoundaries::from_flat(&flat);
        Ok(())
    }
}

/// Mutable state of a fit at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    views: [Table; 2],
    /// Predictions on the rendered views (cycle consistency).
    rendered: Option<[Table; 2]>,
    /// Predictions on the stretched views (stretch consistency).
    stretched: Option<[Table; 2]>,
    pub stretch: StretchParams,
    pub iteration: usize,
}

impl FitState {
    pub fn new(init: [&LayoutBoundaries; 2], cfg: &FitConfig, stretch: StretchParams) -> Result<Self> {
        Error::check_len(init[0].width(), init[1].width())?;
        let opt = cfg.optimizer;
        let enabled = cfg.losses.enabled;
        let heights = |b: &LayoutBoundaries| LayoutHeights::with_ceiling(infer_ceiling_height(b));
        let stretched = if enabled.contains(LossKind::Stretch) {
            let mut t = Vec::with_capacity(2);
            for b in init {
                t.push(Table::new(&stretch_layout(b, &heights(b), &stretch)?, opt));
            }
            Some([t[0].clone(), t[1].clone()])
        } else {
            None
        };
        Ok(Self {
            views: [Table::new(init[0], opt), Table::new(init[1], opt)],
            rendered: enabled
                .contains(LossKind::Cycle)
                .then(|| [Table::new(init[0], opt), Table::new(init[1], opt)]),
            stretched,
            stretch,
            iteration: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.views[0].raw.width()
    }

    pub fn raw(&self, view: usize) -> &RawBoundaries {
        &self.views[view].raw
    }

    pub fn boundaries(&self, view: usize) -> LayoutBoundaries {
        constrain(&self.views[view].raw)
    }

    /// Boundaries of the auxiliary tables, `(rendered, stretched)`.
    pub fn auxiliary(&self, view: usize) -> (Option<LayoutBoundaries>, Option<LayoutBoundaries>) {
        (
            self.rendered.as_ref().map(|t| constrain(&t[view].raw)),
            self.stretched.as_ref().map(|t| constrain(&t[view].raw)),
        )
    }

    fn heights(&self, view: usize, scene: &FitScene, mode: HeightMode) -> LayoutHeights {
        match mode {
            HeightMode::Annotated => scene.heights,
            HeightMode::Inferred => LayoutHeights::with_ceiling(infer_ceiling_height(&self.boundaries(view))),
        }
    }

    /// Same state at another column count, optimizer moments reset.
    fn resampled(&self, width: usize, cfg: &FitConfig) -> Result<Self> {
        let re = |t: &Table| -> Result<Table> { Ok(Table::new(&constrain(&t.raw).resample(width)?, cfg.optimizer)) };
        let pair = |t: &[Table; 2]| -> Result<[Table; 2]> { Ok([re(&t[0])?, re(&t[1])?]) };
        Ok(Self {
            views: pair(&self.views)?,
            rendered: self.rendered.as_ref().map(pair).transpose()?,
            stretched: self.stretched.as_ref().map(pair).transpose()?,
            stretch: self.stretch,
            iteration: self.iteration,
        })
    }
}

/// Gradient of an auxiliary consistency term with respect to its own table,
/// the view's prediction acting as a fixed teacher.
fn auxiliary_gradient(
    table: &RawBoundaries,
    teacher: &LayoutBoundaries,
    h: &LayoutHeights,
    stretch: Option<&StretchParams>,
    weight: f64,
) -> Result<GradientVector> {
    let mut tape = Tape::new();
    let rf = tape.param(table.floor.clone());
    let rc = tape.param(table.ceil.clone());
    let pred = ViewVars::new(&mut tape, rf, rc, Some(*h))?;
    let t = ViewVars::constant(&mut tape, teacher, h);
    let loss = match stretch {
        Some(k) => stretch_var(&mut tape, &pred, &t, k)?,
        None => cycle_var(&mut tape, &pred, &t)?,
    };
    let out = tape.scale(loss, weight);
    let g = tape.gradients(out)?;
    Ok(GradientVector {
        d_phi_raw_floor: g.get(rf),
        d_phi_raw_ceil: g.get(rc),
    })
}

/// One forward/backward pass over both role assignments followed by one
/// update of every table. Returns the mean of the two directions' reports;
/// its gradient holds view `a`'s columns followed by view `b`'s.
pub fn fit_step(state: &mut FitState, scene: &FitScene, cfg: &FitConfig) -> Result<LossReport> {
    if state.width() != scene.width() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} columns, scene {}",
            state.width(),
            scene.width()
        )));
    }
    let layouts = [state.boundaries(0), state.boundaries(1)];
    let heights = [state.heights(0, scene, cfg.heights), state.heights(1, scene, cfg.heights)];
    let rendered: Option<[LayoutBoundaries; 2]> =
        state.rendered.as_ref().map(|t| [constrain(&t[0].raw), constrain(&t[1].raw)]);
    let stretched: Option<[LayoutBoundaries; 2]> =
        state.stretched.as_ref().map(|t| [constrain(&t[0].raw), constrain(&t[1].raw)]);

    let mut reports = Vec::with_capacity(2);
    for t in 0..2 {
        let s = 1 - t;
        let mut inputs = LossInputs::new(&scene.panoramas[t], &state.views[t].raw);
        inputs.heights = (cfg.heights == HeightMode::Annotated).then_some(scene.heights);
        inputs.source = Some(&scene.panoramas[s]);
        inputs.pose_t_to_s = Some(scene.pose_t_to_s(t));
        inputs.source_layout = Some((&layouts[s], heights[s]));
        inputs.rendered_pred = rendered.as_ref().map(|r| &r[t]);
        inputs.stretched_pred = stretched.as_ref().map(|r| (&r[t], state.stretch));
        reports.push(total(&inputs, &cfg.losses)?);
    }

    let mut aux = Vec::new();
    let w = cfg.losses.aux_weight;
    for t in 0..2 {
        if let Some(r) = &state.rendered {
            aux.push((0, t, auxiliary_gradient(&r[t].raw, &layouts[t], &heights[t], None, w)?));
        }
        if let Some(r) = &state.stretched {
            aux.push((1, t, auxiliary_gradient(&r[t].raw, &layouts[t], &heights[t], Some(&state.stretch), w)?));
        }
    }

    let mut mean = LossTerms::default();
    mean.add_scaled(&reports[0].terms(), 0.5);
    mean.add_scaled(&reports[1].terms(), 0.5);
    let gradient = GradientVector {
        d_phi_raw_floor: [reports[0].gradient.d_phi_raw_floor.clone(), reports[1].gradient.d_phi_raw_floor.clone()]
            .concat(),
        d_phi_raw_ceil: [reports[0].gradient.d_phi_raw_ceil.clone(), reports[1].gradient.d_phi_raw_ceil.clone()].concat(),
    };
    let mut report = LossReport::from_terms(&mean, cfg.losses.enabled, cfg.losses.aux_weight, gradient);
    report.total = (reports[0].total + reports[1].total) / 2.0;

    let finite = report.total.is_finite()
        && report.gradient.is_finite()
        && aux.iter().all(|(_, _, g)| g.is_finite());
    if !finite {
        return Err(Error::Divergence {
            iteration: state.iteration,
            trajectory: vec![report],
        });
    }

    for (t, r) in reports.iter().enumerate() {
        state.views[t].update(&r.gradient)?;
    }
    for (kind, t, g) in &aux {
        let tables = if *kind == 0 { state.rendered.as_mut() } else { state.stretched.as_mut() };
        tables.expect("table present")[*t].update(g)?;
    }
    state.iteration += 1;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub layout_a: LayoutBoundaries,
    pub layout_b: LayoutBoundaries,
    /// Ceiling heights the final layouts were evaluated with.
    pub heights_a: LayoutHeights,
    pub heights_b: LayoutHeights,
    /// `(rendered, stretched)` auxiliary predictions per view, when enabled.
    pub auxiliary_a: (Option<LayoutBoundaries>, Option<LayoutBoundaries>),
    pub auxiliary_b: (Option<LayoutBoundaries>, Option<LayoutBoundaries>),
    /// Report of every iteration, evaluated before its update.
    pub trajectory: Vec<LossReport>,
    /// `(H, W)` of the stage each trajectory entry belongs to.
    pub stage_of: Vec<(usize, usize)>,
    pub iterations: usize,
    pub converged: bool,
    /// Total loss of the returned iterate at the final resolution.
    pub best_total: f64,
    pub stretch: StretchParams,
}

/// Perturbed angles stay this far inside the open boundary ranges.
pub const PERTURB_MARGIN: f64 = 0.05;

fn perturbed(b: &LayoutBoundaries, sigma: f64, rng: &mut ChaCha8Rng) -> Result<LayoutBoundaries> {
    if sigma == 0.0 {
        return Ok(b.clone());
    }
    let n = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (lo, hi) = (PERTURB_MARGIN, FRAC_PI_2 - PERTURB_MARGIN);
    let floor = b.floor().iter().map(|f| (f + n.sample(rng)).clamp(-hi, -lo)).collect();
    let ceil = b.ceil().iter().map(|c| (c + n.sample(rng)).clamp(lo, hi)).collect();
    LayoutBoundaries::new(floor, ceil)
}

/// Ground-truth layouts perturbed as [`Init::PerturbedGt`] does.
pub fn perturbed_gt(scene: &ScenePair, sigma: f64, seed: u64) -> Result<[LayoutBoundaries; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok([
        perturbed(&scene.gt_layout_a, sigma, &mut rng)?,
        perturbed(&scene.gt_layout_b, sigma, &mut rng)?,
    ])
}

fn draw_stretch(src: &StretchSource, rng: &mut ChaCha8Rng) -> Result<StretchParams> {
    match *src {
        StretchSource::Fixed(k) => Ok(k),
        StretchSource::LogUniform { min, max } => {
            let (lo, hi) = (min.ln(), max.ln());
            let mut draw = || if hi > lo { rng.random_range(lo..hi).exp() } else { min };
            let kx = draw();
            let ky = draw();
            StretchParams::new(kx, ky)
        }
    }
}

/// Fits both views of `scene`, coarse to fine, returning the best iterate
/// of the final stage.
pub fn fit_pair(scene: &ScenePair, cfg: &FitConfig) -> Result<FitResult> {
    fit_pair_observed(scene, cfg, |_, _| {})
}

/// [`fit_pair`] calling `observe(iteration, report)` after every step.
pub fn fit_pair_observed(
    scene: &ScenePair,
    cfg: &FitConfig,
    mut observe: impl FnMut(usize, &LossReport),
) -> Result<FitResult> {
    cfg.validate()?;
    let full = FitScene::from_pair(scene);
    let (height, width) = (full.height(), full.width());
    let stages = cfg.stages(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = match &cfg.init {
        Init::Flat => {
            let flat = constrain(&RawBoundaries::zeros(width));
            [flat.clone(), flat]
        }
        Init::PerturbedGt { sigma } => [
            perturbed(&scene.gt_layout_a, *sigma, &mut rng)?,
            perturbed(&scene.gt_layout_b, *sigma, &mut rng)?,
        ],
        Init::User { a, b } => [a.clone(), b.clone()],
    };
    let stretch = draw_stretch(&cfg.losses.stretch, &mut rng)?;
    let first = stages[0].1;
    let init = [init[0].resample(first)?, init[1].resample(first)?];
    let mut state = FitState::new([&init[0], &init[1]], cfg, stretch)?;

    let mut trajectory = Vec::with_capacity(cfg.iterations);
    let mut stage_of = Vec::with_capacity(cfg.iterations);
    let per_stage = cfg.iterations / stages.len();
    let mut best: Option<(f64, FitState)> = None;
    let mut best_curve = Vec::new();
    for (k, &(h, w)) in stages.iter().enumerate() {
        let stage_scene = full.downsample(height / h)?;
        if k > 0 {
            let (_, prev) = best.take().expect("previous stage ran");
            state = prev.resampled(w, cfg)?;
        }
        let iters = if k + 1 == stages.len() {
            cfg.iterations - per_stage * (stages.len() - 1)
        } else {
            per_stage
        };
        best = None;
        best_curve.clear();
        let mut stage_cfg = cfg.clone();
        if k < cfg.photo_only_stages && cfg.losses.enabled.contains(LossKind::Photo) {
            stage_cfg.losses.enabled = LossSet::of(&[LossKind::Photo]);
        }
        for _ in 0..iters {
            let before = state.clone();
            let report = match fit_step(&mut state, &stage_scene, &stage_cfg) {
                Ok(r) => r,
                Err(Error::Divergence { iteration, trajectory: last }) => {
                    trajectory.extend(last);
                    return Err(Error::Divergence { iteration, trajectory });
                }
                Err(e) => return Err(e),
            };
            observe(trajectory.len(), &report);
            if best.as_ref().map_or(true, |(t, _)| report.total < *t) {
                best = Some((report.total, before));
            }
            best_curve.push(best.as_ref().map(|b| b.0).unwrap_or(f64::INFINITY));
            trajectory.push(report);
            stage_of.push((h, w));
        }
    }
    let (best_total, final_state) = best.expect("at least one iteration");
    let n = best_curve.len();
    let lookback = best_curve[n.saturating_sub((n / 10).max(1) + 1)];
    let converged = (lookback - best_total) <= cfg.tolerance * best_total.abs().max(1e-12);
    let final_scene = full.downsample(1)?;
    Ok(FitResult {
        layout_a: final_state.boundaries(0),
        layout_b: final_state.boundaries(1),
        heights_a: final_state.heights(0, &final_scene, cfg.heights),
        heights_b: final_state.heights(1, &final_scene, cfg.heights),
        auxiliary_a: final_state.auxiliary(0),
        auxiliary_b: final_state.auxiliary(1),
        iterations: trajectory.len(),
        trajectory,
        stage_of,
        converged,
        best_total,
        stretch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::project_channel;
    use crate::metrics::iou_2d;
    use crate::synth::generate_scene;

    fn iou(a: &LayoutBoundaries, b: &LayoutBoundaries) -> f64 {
        iou_2d(&project_channel(a.floor(), -1.0), &project_channel(b.floor(), -1.0)).unwrap()
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let target = [1.5, -2.0, 0.25];
        let mut x = vec![0.0; 3];
        let mut opt = Adam::new(3, AdamConfig::default());
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            opt.step(&mut x, &g).unwrap();
        }
        for (a, b) in x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut x = vec![0.3, -0.7];
        let mut opt = Adam::new(2, AdamConfig::default());
        opt.step(&mut x, &[0.0, 0.0]).unwrap();
        assert_eq!(x, vec![0.3, -0.7]);
        assert!(opt.step(&mut x, &[0.0]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = FitConfig::default();
        cfg.validate().unwrap();
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
        let cfg = FitConfig {
            optimizer: AdamConfig {
                beta1: 1.0,
                ..AdamConfig::default()
            },
            ..FitConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = FitConfig {
            schedule: Some(vec![(48, 96)]),
            ..FitConfig::default()
        };
        assert!(cfg.stages(128, 256).is_err());
        assert_eq!(default_schedule(256, 512), vec![(64, 128), (128, 256), (256, 512)]);
        assert_eq!(default_schedule(32, 64), vec![(16, 32), (32, 64)]);
    }

    fn small_cfg(init: Init, iterations: usize) -> FitConfig {
        FitConfig {
            iterations,
            init,
            schedule: Some(vec![(32, 64)]),
            ..FitConfig::default()
        }
    }

    #[test]
    fn photo_only_equals_zero_auxiliary_weight() {
        let scene = generate_scene(3, 4, 32, 64).unwrap();
        let fs = FitScene::from_pair(&scene);
        let init = perturbed_gt(&scene, 0.1, 1).unwrap();
        let k = StretchParams::new(1.2, 0.9).unwrap();
        let mut photo = small_cfg(Init::Flat, 1);
        photo.losses.enabled = LossSet::of(&[LossKind::Photo]);
        let mut zero = small_cfg(Init::Flat, 1);
        zero.losses.aux_weight = 0.0;
        let mut s1 = FitState::new([&init[0], &init[1]], &photo, k).unwrap();
        let mut s2 = FitState::new([&init[0], &init[1]], &zero, k).unwrap();
        let r1 = fit_step(&mut s1, &fs, &photo).unwrap();
        let r2 = fit_step(&mut s2, &fs, &zero).unwrap();
        assert_eq!(r1.total, r2.total);
        assert_eq!(r1.gradient, r2.gradient);
        assert_eq!(s1.raw(0), s2.raw(0));
        assert_eq!(s1.raw(1), s2.raw(1));
    }

    #[test]
    fn gt_init_stays_at_optimum() {
        // Sampling bias moves the discrete optimum slightly off GT.
        let scene = generate_scene(5, 4, 128, 256).unwrap();
        let cfg = FitConfig {
            iterations: 20,
            init: Init::PerturbedGt { sigma: 0.0 },
            schedule: Some(vec![(128, 256)]),
            ..FitConfig::default()
        };
        let res = fit_pair(&scene, &cfg).unwrap();
        assert!(res.trajectory.len() <= cfg.iterations);
        let (ia, ib) = (iou(&res.layout_a, &scene.gt_layout_a), iou(&res.layout_b, &scene.gt_layout_b));
        assert!(ia >= 0.97 && ib >= 0.97, "{ia} {ib}");
        assert!(res.best_total <= res.trajectory[0].total);
    }

    #[test]
    fn fit_is_deterministic_and_tracks_best() {
        let scene = generate_scene(6, 4, 32, 64).unwrap();
        let cfg = small_cfg(Init::PerturbedGt { sigma: 0.1 }, 12);
        let a = fit_pair(&scene, &cfg).unwrap();
        let b = fit_pair(&scene, &cfg).unwrap();
        assert_eq!(a.layout_a, b.layout_a);
        assert_eq!(a.layout_b, b.layout_b);
        assert_eq!(a.trajectory, b.trajectory);
        let min = a.trajectory.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_total, min);
        assert!(a.auxiliary_a.0.is_some() && a.auxiliary_a.1.is_some());
    }

    #[test]
    fn multi_resolution_runs_every_stage() {
        let scene = generate_scene(7, 4, 64, 128).unwrap();
        let cfg = FitConfig {
            iterations: 9,
            schedule: Some(vec![(16, 32), (32, 64), (64, 128)]),
            ..FitConfig::default()
        };
        let res = fit_pair(&scene, &cfg).unwrap();
        assert_eq!(res.iterations, 9);
        assert_eq!(res.stage_of[0], (16, 32));
        assert_eq!(res.stage_of[8], (64, 128));
        assert_eq!(res.layout_a.width(), 128);
    }

    #[test]
    fn inferred_heights_mode_runs() {
        let scene = generate_scene(8, 4, 32, 64).unwrap();
        let mut cfg = small_cfg(Init::PerturbedGt { sigma: 0.05 }, 5);
        cfg.heights = HeightMode::Inferred;
        let res = fit_pair(&scene, &cfg).unwrap();
        assert!((res.heights_a.z_ceil - infer_ceiling_height(&res.layout_a)).abs() < 1e-12);
    }
}
