//! Sample grids for pointwise checks and the parallel margin engine.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::CriteriaError;
use crate::calculus::CalculusError;

/// Where an inequality is sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    /// `inner < ‖x‖ ≤ outer`; with `inner = 0` the origin is included as well.
    Annulus {
        inner: f64,
        outer: f64,
        /// Radial × angular counts; dimension defaults when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        counts: Option<Vec<usize>>,
    },
    /// Tensor grid on `[lo, hi]` including both ends.
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        counts: Option<Vec<usize>>,
    },
    /// An explicit point list.
    Points { points: Vec<Vec<f64>> },
}

/// Default annulus sampling: `d=1` 5000 radii on both sides, `d=2` 200×256,
/// `d=3` 100×64×64.
pub fn default_annulus_counts(dim: usize) -> Vec<usize> {
    match dim {
        1 => vec![5000],
        2 => vec![200, 256],
        _ => vec![100, 64, 64],
    }
}

/// Default box sampling: `10⁴` points in `d=1`, `201²` in `d=2`, `65³` in `d=3`.
pub fn default_box_counts(dim: usize) -> Vec<usize> {
    match dim {
        1 => vec![10_000],
        2 => vec![201, 201],
        _ => vec![65, 65, 65],
    }
}

impl Region {
    pub fn annulus(inner: f64, outer: f64) -> Self {
        Region::Annulus {
            inner,
            outer,
            counts: None,
        }
    }

    pub fn cube(dim: usize, half_width: f64) -> Self {
        Region::Box {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
            counts: None,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Region::Annulus { inner, outer, .. } if *inner == 0.0 => format!("‖x‖ ≤ {outer}"),
            Region::Annulus { inner, outer, .. } => format!("{inner} < ‖x‖ ≤ {outer}"),
            Region::Box { lo, hi, .. } => {
                let sides: Vec<String> =
                    lo.iter().zip(hi).map(|(l, h)| format!("[{l}, {h}]")).collect();
                sides.join(" × ")
            }
            Region::Points { points } => format!("{} explicit points", points.len()),
        }
    }

    /// Largest norm reached by the region, used for sphere sampling.
    pub fn outer_radius(&self) -> f64 {
        match self {
            Region::Annulus { outer, .. } => *outer,
            Region::Box { lo, hi, .. } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| l.abs().max(h.abs()).powi(2))
                .sum::<f64>()
                .sqrt(),
            Region::Points { points } => points
                .iter()
                .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(0.0, f64::max),
        }
    }

    /// Sample points in lexicographic index order.
    pub fn points(&self, dim: usize) -> Result<Vec<Vec<f64>>, CriteriaError> {
        match self {
            Region::Annulus {
                inner,
                outer,
                counts,
            } => {
                if !(*inner >= 0.0 && outer > inner) {
                    return Err(CriteriaError::Region(format!(
                        "annulus needs 0 ≤ inner < outer, got {inner}, {outer}"
                    )));
                }
                let counts = counts.clone().unwrap_or_else(|| default_annulus_counts(dim));
                let expected = if dim == 1 { 1 } else { dim };
                if counts.len() != expected || counts.contains(&0) {
                    return Err(CriteriaError::Region(format!(
                        "annulus in dimension {dim} needs {expected} positive counts"
                    )));
                }
                let radii: Vec<f64> = (0..counts[0])
                    .map(|i| inner + (outer - inner) * (i + 1) as f64 / counts[0] as f64)
                    .collect();
                let dirs = directions(dim, &counts[1..]);
                let mut pts = Vec::with_capacity(radii.len() * dirs.len() + 1);
                if *inner == 0.0 {
                    pts.push(vec![0.0; dim]);
                }
                for r in &radii {
                    for d in &dirs {
                        pts.push(d.iter().map(|c| r * c).collect());
                    }
                }
                Ok(pts)
            }
            Region::Box { lo, hi, counts } => {
                if lo.len() != dim || hi.len() != dim {
                    return Err(CriteriaError::Region(format!("box corners need {dim} coordinates")));
                }
                let counts = counts.clone().unwrap_or_else(|| default_box_counts(dim));
                if counts.len() != dim || counts.iter().any(|&c| c < 2) {
                    return Err(CriteriaError::Region(format!(
                        "box in dimension {dim} needs {dim} counts of at least 2"
                    )));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                    return Err(CriteriaError::Region("box needs lo < hi on every axis".into()));
                }
                let axes: Vec<Vec<f64>> = (0..dim)
                    .map(|k| {
                        let n = counts[k] - 1;
                        (0..=n)
                            .map(|i| {
                                if i == n {
                                    hi[k]
                                } else {
                                    lo[k] + (hi[k] - lo[k]) * i as f64 / n as f64
                                }
                            })
                            .collect()
                    })
                    .collect();
                let total: usize = counts.iter().product();
                Ok((0..total)
                    .map(|lin| {
                        // first axis varies slowest
                        let mut rem = lin;
                        let mut p = vec![0.0; dim];
                        for k in (0..dim).rev() {
                            p[k] = axes[k][rem % counts[k]];
                            rem /= counts[k];
                        }
                        p
                    })
                    .collect())
            }
            Region::Points { points } => {
                if points.iter().any(|p| p.len() != dim) {
                    return Err(CriteriaError::Region(format!("points must have {dim} coordinates")));
                }
                Ok(points.clone())
            }
        }
    }
}

/// Unit directions: `±1` in `d=1`, equally spaced angles in `d=2`, a
/// cell-centred polar × azimuth product in `d=3`.
pub fn directions(dim: usize, counts: &[usize]) -> Vec<Vec<f64>> {
    match dim {
        1 => vec![vec![-1.0], vec![1.0]],
        2 => (0..counts[0])
            .map(|j| {
                let t = 2.0 * PI * j as f64 / counts[0] as f64;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        _ => {
            let mut out = Vec::with_capacity(counts[0] * counts[1]);
            for k in 0..counts[0] {
                let theta = PI * (k as f64 + 0.5) / counts[0] as f64;
                for j in 0..counts[1] {
                    let phi = 2.0 * PI * j as f64 / counts[1] as f64;
                    out.push(vec![theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]);
                }
            }
            out
        }
    }
}

/// One template evaluated at one point: the inequality is `lhs ≤ rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointMargin {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`.
    pub margin: f64,
    /// Sum of the magnitudes of the terms that make up both sides.
    pub scale: f64,
}

impl PointMargin {
    pub fn new(lhs: f64, rhs: f64, scale: f64) -> Self {
        PointMargin {
            lhs,
            rhs,
            margin: rhs - lhs,
            scale,
        }
    }

    /// The inequality is violated beyond rounding.
    pub fn violated(&self, rounding: f64) -> bool {
        self.margin < -rounding * self.scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedPoint {
    pub point: Vec<f64>,
    pub reason: String,
}

/// Margins over a sample grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginField {
    #[serde(skip)]
    pub points: Vec<Vec<f64>>,
    /// `None` where the template could not be evaluated.
    #[serde(skip)]
    pub margins: Vec<Option<PointMargin>>,
    pub evaluated: usize,
    pub min_margin: Option<f64>,
    pub argmin: Option<Vec<f64>>,
    pub argmin_index: Option<usize>,
    /// Number of points violating the inequality beyond rounding.
    pub violations: usize,
    pub skipped: usize,
    /// The first few skipped points with their reasons.
    pub skipped_examples: Vec<SkippedPoint>,
}

const SKIP_EXAMPLES: usize = 8;

impl MarginField {
    /// Evaluate `f` at every point in parallel. The minimum is taken in index
    /// order, so ties go to the smallest index.
    pub fn evaluate<F>(points: Vec<Vec<f64>>, rounding: f64, f: F) -> Self
    where
        F: Fn(&[f64]) -> Result<PointMargin, CalculusError> + Sync,
    {
        let results: Vec<Result<PointMargin, CalculusError>> =
            points.par_iter().map(|p| f(p)).collect();
        let mut margins = Vec::with_capacity(points.len());
        let mut best: Option<(usize, f64)> = None;
        let mut violations = 0;
        let mut skipped = 0;
        let mut skipped_examples = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(m) if m.margin.is_finite() => {
                    if m.violated(rounding) {
                        violations += 1;
                    }
                    if best.is_none_or(|(_, b)| m.margin < b) {
                        best = Some((i, m.margin));
                    }
                    margins.push(Some(m));
                }
                other => {
                    skipped += 1;
                    if skipped_examples.len() < SKIP_EXAMPLES {
                        let reason = match other {
                            Ok(m) => format!("non-finite margin {}", m.margin),
                            Err(e) => e.to_string(),
                        };
                        skipped_examples.push(SkippedPoint {
                            point: points[i].clone(),
                            reason,
                        });
                    }
                    margins.push(None);
                }
            }
        }
        MarginField {
            evaluated: points.len() - skipped,
            min_margin: best.map(|(_, m)| m),
            argmin: best.map(|(i, _)| points[i].clone()),
            argmin_index: best.map(|(i, _)| i),
            violations,
            skipped,
            skipped_examples,
            points,
            margins,
        }
    }

    /// The first violating point in index order, if any.
    pub fn first_violation(&self, rounding: f64) -> Option<(usize, PointMargin)> {
        self.margins
            .iter()
            .enumerate()
            .find_map(|(i, m)| m.filter(|m| m.violated(rounding)).map(|m| (i, m)))
    }

    /// The evaluated margin with the smallest value.
    pub fn min_point(&self) -> Option<PointMargin> {
        self.argmin_index.and_then(|i| self.margins[i])
    }
}
