//! Label-free uncertainty scores for choosing which scenes to annotate next.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{infer_ceiling_height, LayoutBoundaries, LayoutHeights};
use crate::losses::{ceil_floor, default_window, manhattan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub scene: String,
    pub manhattan: f64,
    pub ceil_floor: f64,
    /// `manhattan + ceil_floor`, both unweighted.
    pub score: f64,
}

/// Scores one prediction. Without `heights` the ceiling height is inferred
/// from the boundaries themselves. `window` defaults to the width-scaled
/// Manhattan half-window.
pub fn score_scene(
    scene: impl Into<String>,
    b: &LayoutBoundaries,
    heights: Option<LayoutHeights>,
    window: Option<usize>,
) -> Result<UncertaintyScore> {
    let h = heights.unwrap_or_else(|| LayoutHeights::with_ceiling(infer_ceiling_height(b)));
    let m = manhattan(b, &h, window.unwrap_or_else(|| default_window(b.width())))?;
    let c = ceil_floor(b, &h);
    Ok(UncertaintyScore {
        scene: scene.into(),
        manhattan: m,
        ceil_floor: c,
        score: m + c,
    })
}

/// Scores many predictions in parallel, keeping the input order.
pub fn score_all(
    items: &[(String, LayoutBoundaries, Option<LayoutHeights>)],
    window: Option<usize>,
) -> Result<Vec<UncertaintyScore>> {
    items
        .par_iter()
        .map(|(id, b, h)| score_scene(id.clone(), b, *h, window))
        .collect()
}

/// Scene ids by descending score; equal scores are ordered by id.
pub fn rank(scores: &[UncertaintyScore]) -> Result<Vec<String>> {
    Ok(ranked(scores)?.into_iter().map(|s| s.scene).collect())
}

/// [`rank`] keeping the full records.
pub fn ranked(scores: &[UncertaintyScore]) -> Result<Vec<UncertaintyScore>> {
    if scores.is_empty() {
        return Err(Error::Config("nothing to rank".into()));
    }
    if let Some(bad) = scores.iter().find(|s| s.score.is_nan()) {
        return Err(Error::Config(format!("score of `{}` is NaN", bad.scene)));
    }
    let mut out = scores.to_vec();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.scene.cmp(&b.scene)));
    Ok(out)
}

/// Ranks starting at 1, with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    Error::check_len(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::Config("correlation needs at least two samples".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Config("correlation of a constant sequence".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gt_boundaries, sample_room};

    fn fake(scene: &str, score: f64) -> UncertaintyScore {
        UncertaintyScore {
            scene: scene.into(),
            manhattan: score,
            ceil_floor: 0.0,
            score,
        }
    }

    #[test]
    fn rank_orders_descending() {
        let s = [fake("a", 3.0), fake("b", 1.0), fake("c", 2.0)];
        assert_eq!(rank(&s).unwrap(), ["a", "c", "b"]);
        let same = [fake("s0", 1.0), fake("s1", 1.0), fake("s2", 1.0)];
        assert_eq!(rank(&same).unwrap(), ["s0", "s1", "s2"]);
        let swapped = [fake("s1", 1.0), fake("s0", 1.0)];
        assert_eq!(rank(&swapped).unwrap(), ["s0", "s1"]);
        assert!(rank(&[]).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        // Rank differences 0, 1, 1, 1, 1: ρ = 1 − 6·4/(5·24).
        let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 3.0, 2.0, 5.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gt_scores_near_zero_and_perturbations_raise_it() {
        let room = sample_room(2, 4).unwrap();
        let b = gt_boundaries(&room, &room.poses[0], 256).unwrap();
        let h = room.heights().unwrap();
        let gt = score_scene("gt", &b, Some(h), None).unwrap();
        assert!(gt.score < 1e-5, "{gt:?}");
        assert_eq!(gt.score, gt.manhattan + gt.ceil_floor);
        let inferred = score_scene("gt", &b, None, None).unwrap();
        assert!((inferred.score - gt.score).abs() < 1e-9);

        let lifted = LayoutBoundaries::clamped(b.floor().to_vec(), b.ceil().iter().map(|c| c + 0.1).collect()).unwrap();
        let s = score_scene("up", &lifted, Some(h), None).unwrap();
        assert!(s.ceil_floor > 0.0 && s.score > gt.score);
    }
}
