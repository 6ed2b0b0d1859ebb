//! Layout evaluation: 2D and 3D IoU of floor footprints, depth RMSE and δ₁.

use serde::{Deserialize, Serialize};

use crate::dlvr::{render_layout_depth, DepthMap, ValidityMask};
use crate::error::{Error, Result};
use crate::layout::{project_channel, FloorPolyline, LayoutBoundaries, LayoutHeights};

/// Polygons with smaller area (in squared layout units) are degenerate.
pub const AREA_EPSILON: f64 = 1e-12;

/// δ₁ ratio threshold.
pub const DELTA1_THRESHOLD: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou2d: f64,
    pub iou3d: f64,
    /// Meters.
    pub rmse: f64,
    pub delta1: f64,
}

type Pt = [f64; 2];

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn lerp(a: Pt, b: Pt, t: f64) -> Pt {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

fn signed_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| shoelace(poly[i], poly[(i + 1) % n])).sum()
}

fn shoelace(a: Pt, b: Pt) -> f64 {
    (a[0] * b[1] - b[0] * a[1]) / 2.0
}

fn scale_of(poly: &[Pt]) -> f64 {
    poly.iter().fold(0.0f64, |m, p| m.max(p[0].abs()).max(p[1].abs())).max(1.0)
}

/// Proper crossing or touching of two closed segments. `tol` is a relative
/// distance tolerance.
fn segments_cross(a: Pt, b: Pt, c: Pt, d: Pt, tol: f64) -> bool {
    let (lab, lcd) = ((b[0] - a[0]).hypot(b[1] - a[1]), (d[0] - c[0]).hypot(d[1] - c[1]));
    let eps = tol * lab.max(lcd);
    // Signed distances to the other segment's supporting line.
    let (d1, d2) = (cross(c, d, a) / lcd, cross(c, d, b) / lcd);
    let (d3, d4) = (cross(a, b, c) / lab, cross(a, b, d) / lab);
    if ((d1 > eps && d2 < -eps) || (d1 < -eps && d2 > eps)) && ((d3 > eps && d4 < -eps) || (d3 < -eps && d4 > eps)) {
        return true;
    }
    let on = |p: Pt, q: Pt, r: Pt, o: f64| {
        o.abs() <= eps
            && r[0] >= p[0].min(q[0]) - eps
            && r[0] <= p[0].max(q[0]) + eps
            && r[1] >= p[1].min(q[1]) - eps
            && r[1] <= p[1].max(q[1]) + eps
    };
    on(c, d, a, d1) || on(c, d, b, d2) || on(a, b, c, d3) || on(a, b, d, d4)
}

/// Checks simplicity and returns the polygon in counterclockwise order.
pub fn normalize_polygon(poly: &[Pt]) -> Result<Vec<Pt>> {
    let n = poly.len();
    if n < 3 {
        return Err(Error::DegeneratePolygon(format!("{n} vertices")));
    }
    if poly.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::DegeneratePolygon("non-finite vertex".into()));
    }
    let area = signed_area(poly);
    if area.abs() < AREA_EPSILON {
        return Err(Error::DegeneratePolygon(format!("area {area:e}")));
    }
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if a == b {
            return Err(Error::DegeneratePolygon(format!("repeated vertex {i}")));
        }
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_cross(a, b, poly[j], poly[(j + 1) % n], 1e-12) {
                return Err(Error::DegeneratePolygon(format!("edges {i} and {j} intersect")));
            }
        }
    }
    let mut out = poly.to_vec();
    if area < 0.0 {
        out.reverse();
    }
    Ok(out)
}

fn inside(p: Pt, poly: &[Pt]) -> bool {
    let n = poly.len();
    let mut c = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                c = !c;
            }
        }
    }
    c
}

/// Edge of `other` that `m` lies on, if any.
fn on_boundary(m: Pt, other: &[Pt], eps: f64) -> Option<usize> {
    let n = other.len();
    (0..n).find(|&k| {
        let (c, d) = (other[k], other[(k + 1) % n]);
        let len = (d[0] - c[0]).hypot(d[1] - c[1]);
        (cross(c, d, m) / len).abs() <= eps
            && m[0] >= c[0].min(d[0]) - eps
            && m[0] <= c[0].max(d[0]) + eps
            && m[1] >= c[1].min(d[1]) - eps
            && m[1] <= c[1].max(d[1]) + eps
    })
}

/// Parameters along `a→b` where the other polygon's boundary crosses or
/// touches it.
fn split_params(a: Pt, b: Pt, other: &[Pt], eps: f64) -> Vec<f64> {
    let n = other.len();
    let r = [b[0] - a[0], b[1] - a[1]];
    let rr = r[0] * r[0] + r[1] * r[1];
    let mut ts = vec![0.0, 1.0];
    for k in 0..n {
        let (c, d) = (other[k], other[(k + 1) % n]);
        let s = [d[0] - c[0], d[1] - c[1]];
        let den = r[0] * s[1] - r[1] * s[0];
        let w = [c[0] - a[0], c[1] - a[1]];
        if den.abs() > eps * rr.sqrt() * s[0].hypot(s[1]) {
            let t = (w[0] * s[1] - w[1] * s[0]) / den;
            let u = (w[0] * r[1] - w[1] * r[0]) / den;
            if t > 0.0 && t < 1.0 && (-1e-12..=1.0 + 1e-12).contains(&u) {
                ts.push(t);
            }
        } else if (cross(a, b, c) / rr.sqrt()).abs() <= eps {
            // Collinear: the other edge's endpoints split this one.
            for p in [c, d] {
                let t = ((p[0] - a[0]) * r[0] + (p[1] - a[1]) * r[1]) / rr;
                if t > 0.0 && t < 1.0 {
                    ts.push(t);
                }
            }
        }
    }
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|x, y| (*x - *y).abs() < 1e-14);
    ts
}

/// Contribution of the boundary of `own` that lies inside `other` to the
/// area of the intersection. Shared boundary pieces are counted by the first
/// polygon only, and only when both run in the same direction.
fn clipped_boundary_integral(own: &[Pt], other: &[Pt], first: bool, eps: f64) -> f64 {
    let n = own.len();
    let mut sum = 0.0;
    for i in 0..n {
        let (a, b) = (own[i], own[(i + 1) % n]);
        let ts = split_params(a, b, other, eps);
        for w in ts.windows(2) {
            let (p, q) = (lerp(a, b, w[0]), lerp(a, b, w[1]));
            let (p, q) = if w[0] == 0.0 && w[1] == 1.0 { (a, b) } else { (p, q) };
            let m = lerp(a, b, (w[0] + w[1]) / 2.0);
            let keep = match on_boundary(m, other, eps) {
                Some(k) => {
                    let (c, d) = (other[k], other[(k + 1) % other.len()]);
                    first && (b[0] - a[0]) * (d[0] - c[0]) + (b[1] - a[1]) * (d[1] - c[1]) > 0.0
                }
                None => inside(m, other),
            };
            if keep {
                sum += shoelace(p, q);
            }
        }
    }
    sum
}

/// Intersection area of two simple polygons (any orientation).
pub fn intersection_area(a: &[Pt], b: &[Pt]) -> Result<f64> {
    let a = normalize_polygon(a)?;
    let b = normalize_polygon(b)?;
    Ok(intersection_area_ccw(&a, &b))
}

fn intersection_area_ccw(a: &[Pt], b: &[Pt]) -> f64 {
    let eps = 1e-12 * scale_of(a).max(scale_of(b));
    let area = clipped_boundary_integral(a, b, true, eps) + clipped_boundary_integral(b, a, false, eps);
    area.max(0.0)
}

/// Intersection and union areas.
fn overlap(a: &[Pt], b: &[Pt]) -> Result<(f64, f64, f64, f64)> {
    let a = normalize_polygon(a)?;
    let b = normalize_polygon(b)?;
    let (area_a, area_b) = (signed_area(&a), signed_area(&b));
    let inter = intersection_area_ccw(&a, &b).min(area_a).min(area_b);
    Ok((inter, area_a + area_b - inter, area_a, area_b))
}

/// Intersection over union of two floor footprints.
pub fn iou_2d(pred: &FloorPolyline, gt: &FloorPolyline) -> Result<f64> {
    let (inter, union, _, _) = overlap(&pred.points, &gt.points)?;
    Ok(if inter == union { 1.0 } else { inter / union })
}

/// IoU of the vertically extruded footprints between their floor and ceiling
/// planes.
pub fn iou_3d(pred: (&FloorPolyline, &LayoutHeights), gt: (&FloorPolyline, &LayoutHeights)) -> Result<f64> {
    let (inter, union, area_p, area_g) = overlap(&pred.0.points, &gt.0.points)?;
    let (hp, hg) = (pred.1, gt.1);
    if hp == hg {
        return Ok(if inter == union { 1.0 } else { inter / union });
    }
    let (tall_p, tall_g) = (hp.z_ceil - hp.z_floor, hg.z_ceil - hg.z_floor);
    if !(tall_p > 0.0 && tall_g > 0.0) {
        return Err(Error::Config("ceiling must lie above the floor".into()));
    }
    let common = (hp.z_ceil.min(hg.z_ceil) - hp.z_floor.max(hg.z_floor)).max(0.0);
    let v_inter = inter * common;
    let v_union = area_p * tall_p + area_g * tall_g - v_inter;
    Ok(if v_inter == v_union { 1.0 } else { v_inter / v_union })
}

/// `(rmse, δ₁)` over the masked pixels.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: &ValidityMask) -> Result<(f64, f64)> {
    if (pred.height, pred.width) != (gt.height, gt.width) || (mask.height(), mask.width()) != (gt.height, gt.width) {
        return Err(Error::DimensionMismatch(format!(
            "depth maps {}x{} and {}x{}, mask {}x{}",
            pred.height,
            pred.width,
            gt.height,
            gt.width,
            mask.height(),
            mask.width()
        )));
    }
    let mut n = 0usize;
    let (mut sq, mut good) = (0.0, 0usize);
    for ((p, g), m) in pred.data.iter().zip(&gt.data).zip(mask.data()) {
        if !m {
            continue;
        }
        n += 1;
        sq += (p - g) * (p - g);
        if (p / g).max(g / p) < DELTA1_THRESHOLD {
            good += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(((sq / n as f64).sqrt(), good as f64 / n as f64))
}

/// All four metrics of a predicted layout. Depths are radial, rendered from
/// both layouts at the mask resolution and scaled to meters.
pub fn evaluate(
    pred: (&LayoutBoundaries, &LayoutHeights),
    gt: (&LayoutBoundaries, &LayoutHeights),
    camera_height: f64,
    mask: &ValidityMask,
) -> Result<MetricReport> {
    Error::check_len(gt.0.width(), pred.0.width())?;
    let pf = project_channel(pred.0.floor(), pred.1.z_floor);
    let gf = project_channel(gt.0.floor(), gt.1.z_floor);
    let iou2d = iou_2d(&pf, &gf)?;
    let iou3d = iou_3d((&pf, pred.1), (&gf, gt.1))?;
    let (h, w) = (mask.height(), mask.width());
    let pd = render_layout_depth(&pred.0.resample(w)?, pred.1, h, w)?.scaled(camera_height);
    let gd = render_layout_depth(&gt.0.resample(w)?, gt.1, h, w)?.scaled(camera_height);
    let (rmse, delta1) = depth_metrics(&pd, &gd, mask)?;
    Ok(MetricReport {
        iou2d,
        iou3d,
        rmse,
        delta1,
    })
}

/// Mean and median of each metric over a group of reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean: MetricReport,
    pub median: MetricReport,
}

pub fn summarize(reports: &[MetricReport]) -> Option<MetricSummary> {
    if reports.is_empty() {
        return None;
    }
    let pick = |f: fn(&MetricReport) -> f64| {
        let mut v: Vec<f64> = reports.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        (mean, median)
    };
    let (a, b, c, d) = (pick(|r| r.iou2d), pick(|r| r.iou3d), pick(|r| r.rmse), pick(|r| r.delta1));
    Some(MetricSummary {
        count: reports.len(),
        mean: MetricReport {
            iou2d: a.0,
            iou3d: b.0,
            rmse: c.0,
            delta1: d.0,
        },
        median: MetricReport {
            iou2d: a.1,
            iou3d: b.1,
            rmse: c.1,
            delta1: d.1,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn poly(points: &[Pt]) -> FloorPolyline {
        FloorPolyline {
            points: points.to_vec(),
        }
    }

    fn square(x: f64, y: f64, s: f64) -> Vec<Pt> {
        vec![[x, y], [x + s, y], [x + s, y + s], [x, y + s]]
    }

    /// Grid-sampled areas: an independent estimate of intersection and union.
    fn raster_iou(a: &[Pt], b: &[Pt], n: usize) -> f64 {
        let all: Vec<Pt> = a.iter().chain(b).copied().collect();
        let (x0, x1) = all.iter().fold((f64::MAX, f64::MIN), |m, p| (m.0.min(p[0]), m.1.max(p[0])));
        let (y0, y1) = all.iter().fold((f64::MAX, f64::MIN), |m, p| (m.0.min(p[1]), m.1.max(p[1])));
        let (mut inter, mut union) = (0usize, 0usize);
        for j in 0..n {
            for i in 0..n {
                let p = [
                    x0 + (i as f64 + 0.5) / n as f64 * (x1 - x0),
                    y0 + (j as f64 + 0.5) / n as f64 * (y1 - y0),
                ];
                let (ia, ib) = (inside(p, a), inside(p, b));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn unit_square_cases() {
        let a = poly(&square(0.0, 0.0, 1.0));
        assert_eq!(iou_2d(&a, &a).unwrap(), 1.0);
        assert_eq!(iou_2d(&a, &poly(&square(3.0, 0.0, 1.0))).unwrap(), 0.0);
        let shifted = poly(&square(0.5, 0.0, 1.0));
        assert!((iou_2d(&a, &shifted).unwrap() - 1.0 / 3.0).abs() < 1e-9);
        // Touching squares share only an edge.
        assert_eq!(iou_2d(&a, &poly(&square(1.0, 0.0, 1.0))).unwrap(), 0.0);
        // Containment.
        let big = poly(&square(-1.0, -1.0, 3.0));
        assert!((iou_2d(&a, &big).unwrap() - 1.0 / 9.0).abs() < 1e-12);
        // Clockwise input is accepted.
        let mut cw = square(0.5, 0.0, 1.0);
        cw.reverse();
        assert!((iou_2d(&a, &poly(&cw)).unwrap() - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn self_intersecting_polygon_is_rejected() {
        let bow = poly(&[[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        let a = poly(&square(0.0, 0.0, 1.0));
        assert!(matches!(iou_2d(&bow, &a), Err(Error::DegeneratePolygon(_))));
        let flat = poly(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        assert!(matches!(iou_2d(&a, &flat), Err(Error::DegeneratePolygon(_))));
    }

    #[test]
    fn non_convex_matches_raster() {
        let l_shape = vec![[0.0, 0.0], [3.0, 0.0], [3.0, 1.0], [1.0, 1.0], [1.0, 3.0], [0.0, 3.0]];
        let rect = square(0.5, 0.5, 2.0);
        // Exact: L area 5, square area 4, intersection 0.5·2 + 0.5·1.5... by hand:
        // square [0.5,2.5]² ∩ L = [0.5,2.5]×[0.5,1] ∪ [0.5,1]×[1,2.5] = 1 + 0.75.
        let iou = iou_2d(&poly(&l_shape), &poly(&rect)).unwrap();
        assert!((iou - 1.75 / (5.0 + 4.0 - 1.75)).abs() < 1e-12);
        assert!((iou - raster_iou(&l_shape, &rect, 600)).abs() < 5e-3);
    }

    #[test]
    fn dense_star_polygons_match_raster() {
        let star = |w: usize, r: &dyn Fn(f64) -> f64, c: Pt| -> Vec<Pt> {
            (0..w)
                .map(|i| {
                    let u = (i as f64 + 0.5) / w as f64 * std::f64::consts::TAU;
                    [c[0] + r(u) * u.cos(), c[1] + r(u) * u.sin()]
                })
                .collect()
        };
        let a = star(256, &|u| 2.0 + 0.5 * (3.0 * u).sin(), [0.0, 0.0]);
        let b = star(200, &|u| 1.8 + 0.4 * (5.0 * u).cos(), [0.4, -0.2]);
        let iou = iou_2d(&poly(&a), &poly(&b)).unwrap();
        assert!((iou - raster_iou(&a, &b, 800)).abs() < 5e-3, "{iou}");
    }

    #[test]
    fn iou_3d_cases() {
        let a = poly(&square(0.0, 0.0, 1.0));
        let h1 = LayoutHeights::with_ceiling(1.0);
        let h2 = LayoutHeights::with_ceiling(2.0);
        assert_eq!(iou_3d((&a, &h1), (&a, &h1)).unwrap(), 1.0);
        assert!((iou_3d((&a, &h1), (&a, &h2)).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let b = poly(&square(0.5, 0.0, 1.0));
        assert_eq!(iou_3d((&a, &h1), (&b, &h1)).unwrap(), iou_2d(&a, &b).unwrap());
    }

    #[test]
    fn depth_metric_cases() {
        let gt = DepthMap {
            height: 2,
            width: 3,
            data: vec![1.0; 6],
        };
        let mask = ValidityMask::all_valid(2, 3);
        assert_eq!(depth_metrics(&gt, &gt, &mask).unwrap(), (0.0, 1.0));
        let far = gt.scaled(1.25001);
        assert_eq!(depth_metrics(&far, &gt, &mask).unwrap().1, 0.0);
        let plus = DepthMap {
            data: vec![1.1; 6],
            ..gt.clone()
        };
        assert!((depth_metrics(&plus, &gt, &mask).unwrap().0 - 0.1).abs() < 1e-12);
        let none = ValidityMask::from_data(2, 3, vec![false; 6]).unwrap();
        assert!(matches!(depth_metrics(&gt, &gt, &none), Err(Error::EmptyMask)));
        let small = DepthMap {
            height: 1,
            width: 3,
            data: vec![1.0; 3],
        };
        assert!(depth_metrics(&small, &gt, &mask).is_err());
    }

    #[test]
    fn evaluate_identical_layouts() {
        let w = 64;
        let b = LayoutBoundaries::new(vec![-0.6; w], vec![0.5; w]).unwrap();
        let h = LayoutHeights::with_ceiling(0.5f64.tan() / 0.6f64.tan());
        let r = evaluate((&b, &h), (&b, &h), 1.6, &ValidityMask::all_valid(32, 64)).unwrap();
        assert_eq!(
            r,
            MetricReport {
                iou2d: 1.0,
                iou3d: 1.0,
                rmse: 0.0,
                delta1: 1.0
            }
        );
        let half = LayoutHeights::with_ceiling(h.z_ceil / 2.0);
        let r = evaluate((&b, &half), (&b, &h), 1.6, &ValidityMask::all_valid(32, 64)).unwrap();
        assert!(r.iou3d < r.iou2d);
    }

    #[test]
    fn summary_mean_lies_within_range() {
        let reps: Vec<MetricReport> = (0..5)
            .map(|i| MetricReport {
                iou2d: 0.5 + i as f64 * 0.1,
                iou3d: 0.4,
                rmse: i as f64,
                delta1: 1.0,
            })
            .collect();
        let s = summarize(&reps).unwrap();
        assert_eq!(s.count, 5);
        assert!((s.mean.iou2d - 0.7).abs() < 1e-12);
        assert_eq!(s.median.rmse, 2.0);
        assert!(summarize(&[]).is_none());
    }

    fn arb_star() -> impl Strategy<Value = Vec<Pt>> {
        (3usize..40, prop::collection::vec(0.5f64..3.0, 40), -1.0f64..1.0, -1.0f64..1.0).prop_map(
            |(n, radii, cx, cy)| {
                (0..n)
                    .map(|i| {
                        let u = i as f64 / n as f64 * std::f64::consts::TAU;
                        [cx + radii[i] * u.cos(), cy + radii[i] * u.sin()]
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn iou_symmetric_and_rigid_invariant(a in arb_star(), b in arb_star(), yaw in 0.0f64..6.3, tx in -5.0f64..5.0) {
            let ab = iou_2d(&poly(&a), &poly(&b)).unwrap();
            let ba = iou_2d(&poly(&b), &poly(&a)).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab));
            let (s, c) = yaw.sin_cos();
            let move_all = |p: &Vec<Pt>| p.iter().map(|q| [c * q[0] - s * q[1] + tx, s * q[0] + c * q[1] - tx]).collect::<Vec<_>>();
            let moved = iou_2d(&poly(&move_all(&a)), &poly(&move_all(&b))).unwrap();
            prop_assert!((moved - ab).abs() < 1e-9);
        }

        #[test]
        fn iou_3d_with_equal_heights_is_iou_2d(a in arb_star(), b in arb_star(), zc in 0.2f64..3.0) {
            let h = LayoutHeights::with_ceiling(zc);
            let i2 = iou_2d(&poly(&a), &poly(&b)).unwrap();
            let i3 = iou_3d((&poly(&a), &h), (&poly(&b), &h)).unwrap();
            prop_assert_eq!(i2, i3);
        }

        #[test]
        fn delta1_scale_invariant(vals in prop::collection::vec((0.5f64..5.0, 0.5f64..5.0), 12), s in 0.1f64..10.0) {
            let pred = DepthMap { height: 3, width: 4, data: vals.iter().map(|v| v.0).collect() };
            let gt = DepthMap { height: 3, width: 4, data: vals.iter().map(|v| v.1).collect() };
            let mask = ValidityMask::all_valid(3, 4);
            let d = depth_metrics(&pred, &gt, &mask).unwrap().1;
            let ds = depth_metrics(&pred.scaled(s), &gt.scaled(s), &mask).unwrap().1;
            // Ratios at exactly 1.25 may flip by one ulp under scaling.
            prop_assert!((d - ds).abs() <= 1.0 / 12.0 + 1e-12);
        }
    }
}
