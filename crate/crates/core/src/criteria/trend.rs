//! Limit-type conditions judged from trends over radius ladders.

use serde::Serialize;

use super::{CriteriaError, CriterionId, CriterionVerdict, Verdict};
use crate::calculus::{decompose_drift, CoefficientSet, DensityField};
use crate::density::volume::{ball_integrals, check_radii};
use crate::density::{recurrence_sequence, VolumeOptions};

/// Verdict id of the volume-growth recurrence test.
pub const VOLUME_RECURRENCE: &str = "VOLUME_RECURRENCE";

/// Fits with `R²` below this are treated as unstable.
pub const MIN_R2: f64 = 0.99;

/// Least-squares line `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares fit; a constant `y` counts as a perfect fit.
pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy <= 1e-30 * (1.0 + my * my) {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).min(1.0)
    };
    Some(LineFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

/// Columns plus rows, ready for CSV or JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fits: Vec<NamedFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedFit {
    pub name: String,
    pub fit: LineFit,
}

/// Geometric ladder `start·ratio^k` up to and including `end`.
pub fn geometric_ladder(start: f64, end: f64, ratio: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut r = start;
    while r < end * (1.0 - 1e-12) {
        out.push(r);
        r *= ratio;
    }
    out.push(end);
    out
}

/// Whether the increments of a cumulative integral indicate convergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TailTrend {
    Negligible,
    Decaying,
    Growing,
    Unstable,
}

/// Classify the tail of a cumulative integral `I(r_k)` on a geometric ladder.
fn tail_trend(radii: &[f64], totals: &[f64]) -> (TailTrend, Option<LineFit>) {
    let last = *totals.last().unwrap_or(&0.0);
    let inc: Vec<f64> = totals.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(&tail) = inc.last() {
        if tail.abs() <= 1e-6 * last.abs() {
            return (TailTrend::Negligible, None);
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = inc
        .iter()
        .zip(&radii[1..])
        .filter(|(d, _)| **d > 0.0)
        .map(|(d, r)| (r.ln(), d.ln()))
        .unzip();
    match fit_line(&xs, &ys) {
        Some(fit) if fit.r2 >= MIN_R2 && fit.slope < -0.5 => (TailTrend::Decaying, Some(fit)),
        Some(fit) if fit.r2 >= MIN_R2 && fit.slope >= 0.0 => (TailTrend::Growing, Some(fit)),
        other => (TailTrend::Unstable, other),
    }
}

/// `∫_{B_r} Σ|a_ij| dμ` and `∫_{B_r} Σ|g_i − β_i| dμ` on a doubling ladder
/// of radii; both must settle for the integrability condition to hold.
pub fn integrability_trend(
    cs: &CoefficientSet,
    rho: &DensityField,
    max_radius: f64,
    opts: &VolumeOptions,
) -> Result<CriterionVerdict, CriteriaError> {
    let d = cs.dim();
    let radii = geometric_ladder(1.0, max_radius.max(2.0), 2.0);
    check_radii(rho, &radii, opts)?;
    let b = decompose_drift(cs, rho);
    let totals = ball_integrals(d, &radii, 2, opts, |x, out| {
        let r = rho.weight(x)?;
        if r == 0.0 {
            // underflowed weight: the integrand vanishes and β is undefined
            out.fill(0.0);
            return Ok(());
        }
        let mut a = vec![0.0; d * d];
        cs.eval_a(x, &mut a)?;
        let mut bx = vec![0.0; d];
        b.eval(x, &mut bx)?;
        out[0] = a.iter().map(|v| v.abs()).sum::<f64>() * r;
        out[1] = bx.iter().map(|v| v.abs()).sum::<f64>() * r;
        Ok(())
    })?;
    let a_tot: Vec<f64> = totals.iter().map(|t| t[0]).collect();
    let b_tot: Vec<f64> = totals.iter().map(|t| t[1]).collect();
    let (ta, fa) = tail_trend(&radii, &a_tot);
    let (tb, fb) = tail_trend(&radii, &b_tot);
    let mut notes = Vec::new();
    let mut fits = Vec::new();
    for (name, trend, fit) in [("a_ij", ta, fa), ("g_i - beta_i", tb, fb)] {
        if let Some(fit) = fit {
            fits.push(NamedFit {
                name: format!("ln increment of {name} vs ln r"),
                fit,
            });
        }
        notes.push(match trend {
            TailTrend::Negligible => format!("{name}: last increment below 1e-6 of the total"),
            TailTrend::Decaying => format!(
                "{name}: increments decay like r^{:.2}",
                fit.map_or(f64::NAN, |f| f.slope)
            ),
            TailTrend::Growing => format!(
                "{name}: increments grow like r^{:.2}; integral appears to diverge",
                fit.map_or(f64::NAN, |f| f.slope)
            ),
            TailTrend::Unstable => format!("{name}: increment trend unstable (R² < {MIN_R2})"),
        });
    }
    let settled = |t| matches!(t, TailTrend::Negligible | TailTrend::Decaying);
    let verdict = if settled(ta) && settled(tb) {
        Verdict::HoldsOnGrid
    } else {
        Verdict::Inconclusive
    };
    let rows = radii
        .iter()
        .zip(&totals)
        .map(|(r, t)| vec![*r, t[0], t[1]])
        .collect();
    let mut v = CriterionVerdict::new(
        CriterionId::IntegrableCoeffs.name(),
        format!("balls of radius 1..{}", radii.last().unwrap()),
    );
    v.verdict = verdict;
    v.trend_table = Some(TrendTable {
        columns: vec!["radius".into(), "int_abs_a".into(), "int_abs_g_minus_beta".into()],
        rows,
        fits,
    });
    v.notes = notes;
    Ok(v)
}

/// Ladder `10^{k/2}` up to `n_max` (inclusive).
pub fn recurrence_levels(n_max: f64) -> Vec<f64> {
    geometric_ladder(10f64.sqrt(), n_max, 10f64.sqrt())
}

/// Volume-growth recurrence test: `a_n = ∫₁ⁿ r/v(r) dr` must trend to infinity
/// and `ln(v₂(n) ∨ 1)/a_n` to zero.
pub fn recurrence_volume_test(
    cs: &CoefficientSet,
    rho: &DensityField,
    n_max: f64,
    opts: &VolumeOptions,
) -> Result<CriterionVerdict, CriteriaError> {
    if !(n_max >= 10.0) {
        return Err(CriteriaError::Region(format!(
            "volume recurrence test needs n_max ≥ 10, got {n_max}"
        )));
    }
    let levels = recurrence_levels(n_max);
    let rows = recurrence_sequence(cs, rho, &levels, opts)?;
    let mut v = CriterionVerdict::new(VOLUME_RECURRENCE, format!("balls of radius 1..{n_max}"));
    let table_rows: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| vec![r.n, r.a_n, r.v1, r.v2, r.log_ratio])
        .collect();
    let mut table = TrendTable {
        columns: ["n", "a_n", "v1", "v2", "log_ratio"].map(String::from).to_vec(),
        rows: table_rows,
        fits: Vec::new(),
    };
    if rows.iter().any(|r| !r.a_n.is_finite()) || rows.iter().any(|r| !(r.v1 + r.v2 > 0.0)) {
        v.verdict = Verdict::Inconclusive;
        v.notes.push("v(r) vanishes on part of the ladder; r/v(r) is not integrable there".into());
        v.trend_table = Some(table);
        return Ok(v);
    }
    let ln_n: Vec<f64> = rows.iter().map(|r| r.n.ln()).collect();
    let a: Vec<f64> = rows.iter().map(|r| r.a_n).collect();
    let half = rows.len() / 2;
    let log_fit = fit_line(&ln_n, &a);
    let lower = fit_line(&ln_n[..=half], &a[..=half]);
    let upper = fit_line(&ln_n[half..], &a[half..]);
    let (px, py): (Vec<f64>, Vec<f64>) = ln_n
        .iter()
        .zip(&a)
        .filter(|(_, a)| **a > 0.0)
        .map(|(x, a)| (*x, a.ln()))
        .unzip();
    let power_fit = fit_line(&px, &py);
    for (name, fit) in [
        ("a_n vs ln n", log_fit),
        ("a_n vs ln n (lower half)", lower),
        ("a_n vs ln n (upper half)", upper),
        ("ln a_n vs ln n", power_fit),
    ] {
        if let Some(fit) = fit {
            table.fits.push(NamedFit {
                name: name.into(),
                fit,
            });
        }
    }
    let (q1, q2) = (lower.map_or(0.0, |f| f.slope), upper.map_or(0.0, |f| f.slope));
    let good_fit = log_fit.is_some_and(|f| f.r2 >= MIN_R2) || power_fit.is_some_and(|f| f.r2 >= MIN_R2);
    let unbounded = q2 > 0.0 && q2 >= 0.9 * q1 && good_fit;
    let ratios: Vec<f64> = rows.iter().map(|r| r.log_ratio).collect();
    let ratio_to_zero = ratios.iter().all(|&r| r == 0.0)
        || (ratios[half..].windows(2).all(|w| w[1] <= w[0])
            && *ratios.last().unwrap() <= 0.5 * ratios[half]);
    if unbounded {
        v.notes.push(format!(
            "a_n keeps growing: slope in ln n {q1:.4} on the lower half, {q2:.4} on the upper half"
        ));
    } else if q2 < 0.5 * q1 {
        v.notes.push(format!(
            "a_n appears to converge: slope in ln n drops from {q1:.4} to {q2:.4}; consistent with \
             transience but not a proof of it"
        ));
    } else {
        v.notes.push(format!("a_n trend unstable (slopes {q1:.4}, {q2:.4})"));
    }
    if !ratio_to_zero {
        v.notes.push("ln(v2 ∨ 1)/a_n does not trend to zero on the ladder".into());
    }
    v.verdict = if unbounded && ratio_to_zero {
        Verdict::HoldsOnGrid
    } else {
        Verdict::Inconclusive
    };
    if v.verdict == Verdict::HoldsOnGrid {
        v.conclusion = Some("recurrent".into());
    }
    v.trend_table = Some(table);
    Ok(v)
}
