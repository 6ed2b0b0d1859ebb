//! Reverse-mode differentiation over vector-valued nodes, and a central
//! finite-difference checker.
//!
//! Nodes are coarse: a whole loss term or an elementwise map is a single
//! node that knows its own vector-Jacobian product. A scalar loss over the
//! `2W` raw boundary parameters therefore records a handful of nodes per
//! view, and replaying them is cheap and deterministic.

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::layout::{self, Boundary, RawBoundaries};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward = Box<dyn Fn(&[f64], &mut Adjoints)>;

struct Node {
    value: Vec<f64>,
    requires_grad: bool,
    blocked_by: Option<&'static str>,
    backward: Option<Backward>,
}

/// Adjoint accumulator handed to backward closures.
pub struct Adjoints {
    slots: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Adjoints {
    fn slot(&mut self, v: Var) -> &mut Vec<f64> {
        let len = self.lens[v.0];
        self.slots[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn add(&mut self, v: Var, grad: &[f64]) {
        let slot = self.slot(v);
        debug_assert_eq!(slot.len(), grad.len());
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += g;
        }
    }

    pub fn add_scaled(&mut self, v: Var, scale: f64, grad: &[f64]) {
        let slot = self.slot(v);
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += scale * g;
        }
    }

    pub fn add_at(&mut self, v: Var, index: usize, grad: f64) {
        self.slot(v)[index] += grad;
    }
}

/// Records one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, requires_grad: bool, backward: Option<Backward>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            blocked_by: None,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_requires_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, values: Vec<f64>) -> Var {
        self.push(values, true, None)
    }

    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        self.push(values, false, None)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(vec![value])
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// General node: `backward` receives the output adjoint and must
    /// accumulate into the inputs it read.
    pub fn custom(
        &mut self,
        value: Vec<f64>,
        inputs: &[Var],
        backward: impl Fn(&[f64], &mut Adjoints) + 'static,
    ) -> Var {
        let rg = self.any_requires_grad(inputs);
        self.push(value, rg, rg.then(|| Box::new(backward) as Backward))
    }

    /// Scalar node with precomputed local gradients for each input.
    pub fn scalar_node(&mut self, value: f64, locals: Vec<(Var, Vec<f64>)>) -> Var {
        let inputs: Vec<Var> = locals.iter().map(|(v, _)| *v).collect();
        self.custom(vec![value], &inputs, move |out, adj| {
            for (v, g) in &locals {
                adj.add_scaled(*v, out[0], g);
            }
        })
    }

    /// Elementwise map with known per-element derivative.
    pub fn elementwise(&mut self, input: Var, value: Vec<f64>, derivative: Vec<f64>) -> Var {
        debug_assert_eq!(value.len(), derivative.len());
        self.custom(value, &[input], move |out, adj| {
            let g: Vec<f64> = out.iter().zip(&derivative).map(|(o, d)| o * d).collect();
            adj.add(input, &g);
        })
    }

    /// `Σ c_k · v_k` over scalar (or equal-length) nodes.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Var {
        let len = self.nodes[terms[0].0 .0].value.len();
        let mut value = vec![0.0; len];
        for (v, c) in terms {
            for (o, x) in value.iter_mut().zip(&self.nodes[v.0].value) {
                *o += c * x;
            }
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let terms = terms.to_vec();
        self.custom(value, &inputs, move |out, adj| {
            for (v, c) in &terms {
                adj.add_scaled(*v, *c, out);
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.linear_combination(&[(a, 1.0), (b, 1.0)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.linear_combination(&[(a, c)])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.iter().sum();
        let len = self.nodes[a.0].value.len();
        self.custom(vec![total], &[a], move |out, adj| {
            adj.add(a, &vec![out[0]; len]);
        })
    }

    /// Records an operation that has no derivative. Reaching it during
    /// [`Tape::gradients`] from a parameter is an error naming `name`.
    pub fn non_differentiable(&mut self, name: &'static str, inputs: &[Var], value: Vec<f64>) -> Var {
        let rg = self.any_requires_grad(inputs);
        let v = self.push(value, rg, None);
        if rg {
            self.nodes[v.0].blocked_by = Some(name);
        }
        v
    }

    /// `φ = ∓π/2 · σ(raw)` for both channels.
    pub fn constrain(&mut self, raw_floor: Var, raw_ceil: Var) -> (Var, Var) {
        let raw = RawBoundaries {
            floor: self.value(raw_floor).to_vec(),
            ceil: self.value(raw_ceil).to_vec(),
        };
        let b = layout::constrain(&raw);
        let (df, dc) = layout::constrain_derivative(&raw);
        let f = self.elementwise(raw_floor, b.floor().to_vec(), df);
        let c = self.elementwise(raw_ceil, b.ceil().to_vec(), dc);
        (f, c)
    }

    /// Least-squares ceiling height from the current boundaries.
    pub fn infer_ceiling_height(&mut self, floor: Var, ceil: Var) -> Result<Var> {
        let b = layout::LayoutBoundaries::new(self.value(floor).to_vec(), self.value(ceil).to_vec())?;
        let (z, gf, gc) = layout::infer_ceiling_height_with_grad(&b);
        Ok(self.scalar_node(z, vec![(floor, gf), (ceil, gc)]))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn gradients(&self, output: Var) -> Result<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::Config("gradients need a scalar output".into()));
        }
        let mut adj = Adjoints {
            slots: (0..self.nodes.len()).map(|_| None).collect(),
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        };
        adj.slots[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(out) = adj.slots[idx].take() else {
                continue;
            };
            if let Some(name) = node.blocked_by {
                return Err(Error::UnsupportedOp(name));
            }
            if let Some(bw) = &node.backward {
                bw(&out, &mut adj);
            }
            adj.slots[idx] = Some(out);
        }
        Ok(Gradients {
            slots: adj.slots,
            lens: adj.lens,
        })
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of the output with respect to `v` (zeros if unreachable).
    pub fn get(&self, v: Var) -> Vec<f64> {
        self.slots[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

/// Gradient with respect to [`RawBoundaries`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientVector {
    pub d_phi_raw_floor: Vec<f64>,
    pub d_phi_raw_ceil: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(width: usize) -> Self {
        Self {
            d_phi_raw_floor: vec![0.0; width],
            d_phi_raw_ceil: vec![0.0; width],
        }
    }

    pub fn get(&self, c: Coord) -> f64 {
        match c.channel {
            Boundary::Floor => self.d_phi_raw_floor[c.column],
            Boundary::Ceil => self.d_phi_raw_ceil[c.column],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.d_phi_raw_floor
            .iter()
            .chain(&self.d_phi_raw_ceil)
            .copied()
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.d_phi_raw_floor
            .iter()
            .chain(&self.d_phi_raw_ceil)
            .all(|g| g.is_finite())
    }
}

/// Builds a scalar loss on a fresh tape from the raw floor and ceiling
/// parameter nodes.
pub trait LossFn: Fn(&mut Tape, Var, Var) -> Result<Var> {}
impl<F: Fn(&mut Tape, Var, Var) -> Result<Var>> LossFn for F {}

/// Loss value and exact gradient with respect to `params`.
pub fn grad_of(
    params: &RawBoundaries,
    loss: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<(f64, GradientVector)> {
    let mut tape = Tape::new();
    let f = tape.param(params.floor.clone());
    let c = tape.param(params.ceil.clone());
    let out = loss(&mut tape, f, c)?;
    let value = tape.scalar(out);
    let grads = tape.gradients(out)?;
    Ok((
        value,
        GradientVector {
            d_phi_raw_floor: grads.get(f),
            d_phi_raw_ceil: grads.get(c),
        },
    ))
}

/// Forward-only evaluation of a loss.
pub fn value_of(params: &RawBoundaries, loss: &impl LossFn) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(params.floor.clone());
    let c = tape.constant(params.ceil.clone());
    let out = loss(&mut tape, f, c)?;
    Ok(tape.scalar(out))
}

/// One raw parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coord {
    pub channel: Boundary,
    pub column: usize,
}

impl Coord {
    pub fn all(width: usize) -> Vec<Coord> {
        Boundary::BOTH
            .iter()
            .flat_map(|&channel| (0..width).map(move |column| Coord { channel, column }))
            .collect()
    }

    pub fn perturbed(&self, params: &RawBoundaries, delta: f64) -> RawBoundaries {
        let mut p = params.clone();
        match self.channel {
            Boundary::Floor => p.floor[self.column] += delta,
            Boundary::Ceil => p.ceil[self.column] += delta,
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub step: f64,
    /// Relative error a coordinate must stay under to count as passing.
    pub tolerance: f64,
    /// Coordinates to sample (all when `None`).
    pub samples: Option<usize>,
    pub seed: u64,
    /// Gradient magnitudes below this are compared absolutely.
    pub abs_floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            samples: None,
            seed: 0,
            abs_floor: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub fraction_passing: f64,
    pub checked: usize,
    pub skipped: usize,
    pub worst: Option<Coord>,
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < abs_floor {
        diff / abs_floor
    } else {
        diff / scale
    }
}

/// Compares the exact gradient of `loss` with central differences on a
/// (seeded) random subset of coordinates, skipping those for which
/// `skip(coord)` is true.
pub fn fd_check(
    loss: &impl LossFn,
    params: &RawBoundaries,
    opts: &FdOptions,
    skip: impl Fn(Coord) -> bool,
) -> Result<FdReport> {
    if !(opts.step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let (_, grad) = grad_of(params, loss)?;
    let mut coords = Coord::all(params.width());
    if let Some(n) = opts.samples {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
        coords.shuffle(&mut rng);
        coords.truncate(n);
    }
    let mut report = FdReport {
        max_rel_err: 0.0,
        fraction_passing: 1.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let mut passing = 0;
    for c in coords {
        if skip(c) {
            report.skipped += 1;
            continue;
        }
        let hi = value_of(&c.perturbed(params, opts.step), loss)?;
        let lo = value_of(&c.perturbed(params, -opts.step), loss)?;
        let numeric = (hi - lo) / (2.0 * opts.step);
        let err = relative_error(grad.get(c), numeric, opts.abs_floor);
        report.checked += 1;
        if err < opts.tolerance {
            passing += 1;
        }
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(c);
        }
    }
    if report.checked > 0 {
        report.fraction_passing = passing as f64 / report.checked as f64;
    }
    Ok(report)
}

/// Skip predicate for piecewise-smooth losses: a coordinate is skipped when
/// the discrete branch decisions reported by `decisions` for it differ
/// between `x - step`, `x` and `x + step`.
pub fn branch_change_predicate<'a>(
    params: &'a RawBoundaries,
    step: f64,
    decisions: impl Fn(&RawBoundaries, Coord) -> Vec<u64> + 'a,
) -> impl Fn(Coord) -> bool + 'a {
    move |c: Coord| {
        let base = decisions(params, c);
        decisions(&c.perturbed(params, step), c) != base
            || decisions(&c.perturbed(params, -step), c) != base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn chain_rule_through_constrain() {
        let params = RawBoundaries::zeros(5);
        let (value, g) = grad_of(&params, |t, f, c| {
            let (pf, _) = t.constrain(f, c);
            Ok(t.sum(pf))
        })
        .unwrap();
        assert!((value + 5.0 * PI / 4.0).abs() < 1e-12);
        for d in &g.d_phi_raw_floor {
            assert!((d + 0.5 * PI * 0.25).abs() < 1e-15);
        }
        assert!(g.d_phi_raw_ceil.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn ceiling_height_gradient_is_symmetric() {
        let params = RawBoundaries::new(vec![-0.4; 6], vec![0.3; 6]).unwrap();
        let (_, g) = grad_of(&params, |t, f, c| {
            let (pf, pc) = t.constrain(f, c);
            t.infer_ceiling_height(pf, pc)
        })
        .unwrap();
        for w in g.d_phi_raw_floor.windows(2).chain(g.d_phi_raw_ceil.windows(2)) {
            assert_eq!(w[0], w[1]);
        }
    }

    fn quadratic(t: &mut Tape, f: Var, c: Var) -> Result<Var> {
        let fv = t.value(f).to_vec();
        let cv = t.value(c).to_vec();
        let value = fv.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x * x).sum::<f64>()
            + cv.iter().skip(1).map(|x| 0.5 * x * x).sum::<f64>();
        let gf = fv.iter().enumerate().map(|(i, x)| 2.0 * (i as f64 + 1.0) * x).collect();
        // Column 0 of the ceiling does not enter the loss.
        let gc = cv.iter().enumerate().map(|(i, x)| if i == 0 { 0.0 } else { *x }).collect();
        Ok(t.scalar_node(value, vec![(f, gf), (c, gc)]))
    }

    #[test]
    fn fd_check_on_quadratic() {
        let params = RawBoundaries::new(vec![0.3, -1.2, 2.0], vec![0.7, -0.1, 1.1]).unwrap();
        let report = fd_check(&quadratic, &params, &FdOptions::default(), |_| false).unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        assert_eq!(report.checked, 6);
        let (_, g) = grad_of(&params, quadratic).unwrap();
        assert_eq!(g.d_phi_raw_ceil[0], 0.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let params = RawBoundaries::new(vec![0.2, 0.4], vec![0.1, -0.3]).unwrap();
        let (_, g) = grad_of(&params, |t, f, c| {
            let d = t.detach(f);
            let a = t.sum(d);
            let b = t.sum(c);
            Ok(t.add(a, b))
        })
        .unwrap();
        assert_eq!(g.d_phi_raw_floor, vec![0.0, 0.0]);
        assert_eq!(g.d_phi_raw_ceil, vec![1.0, 1.0]);
    }

    #[test]
    fn non_differentiable_op_is_reported() {
        let params = RawBoundaries::zeros(3);
        let err = grad_of(&params, |t, f, _| {
            let v = t.value(f).iter().map(|x| x.round()).collect();
            let r = t.non_differentiable("round", &[f], v);
            Ok(t.sum(r))
        })
        .unwrap_err();
        assert!(matches!(err, Error::UnsupportedOp("round")));
        // Fine once detached.
        let ok = grad_of(&params, |t, f, _| {
            let d = t.detach(f);
            let v = t.value(d).iter().map(|x| x.round()).collect();
            let r = t.non_differentiable("round", &[d], v);
            Ok(t.sum(r))
        });
        assert!(ok.is_ok());
    }

    #[test]
    fn gradients_are_linear_and_deterministic() {
        let params = RawBoundaries::new(vec![0.3, -0.9, 1.4], vec![-0.2, 0.5, 0.8]).unwrap();
        let l1 = |t: &mut Tape, f: Var, c: Var| {
            let (pf, pc) = t.constrain(f, c);
            t.infer_ceiling_height(pf, pc)
        };
        let l2 = |t: &mut Tape, f: Var, c: Var| {
            let (pf, _) = t.constrain(f, c);
            Ok(t.sum(pf))
        };
        let (_, g1) = grad_of(&params, l1).unwrap();
        let (_, g2) = grad_of(&params, l2).unwrap();
        let (_, g12) = grad_of(&params, |t, f, c| {
            let a = l1(t, f, c)?;
            let b = l2(t, f, c)?;
            Ok(t.linear_combination(&[(a, 2.0), (b, -0.5)]))
        })
        .unwrap();
        for ((a, b), c) in g1.to_flat().iter().zip(g2.to_flat()).zip(g12.to_flat()) {
            assert!((2.0 * a - 0.5 * b - c).abs() < 1e-12);
        }
        let (_, again) = grad_of(&params, l1).unwrap();
        assert_eq!(
            again.to_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            g1.to_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
