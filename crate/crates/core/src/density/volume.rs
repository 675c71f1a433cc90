//! Ball and annulus measures `μ(B_r) = ∫_{B_r} ρ dx` and the volume integrals
//! `v₁(r) = ∫_{B_r} ⟨A x, x⟩/‖x‖² dμ`, `v₂(r) = ∫_{B_r} |⟨B x, x⟩| dμ` with
//! `B = G − β` the divergence-free part of the drift.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use super::DensityError;
use crate::calculus::{decompose_drift, CalculusError, CoefficientSet, DensityField, KahanSum};

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeOptions {
    /// Gauss–Legendre nodes per radial panel.
    pub radial_nodes: usize,
    /// Target radial panel width.
    pub panel_width: f64,
    /// Cap on radial panels per annulus.
    pub max_panels: usize,
    /// Trapezoid nodes in the angle (d = 2) or azimuth (d = 3).
    pub angular_nodes: usize,
    /// Gauss–Legendre nodes in the polar cosine (d = 3).
    pub polar_nodes: usize,
    /// Largest admissible radius; grid densities default to the mesh half-width.
    pub domain: Option<f64>,
    /// Radii per decade when integrating `r / v(r)`.
    pub points_per_decade: usize,
}

impl Default for VolumeOptions {
    fn default() -> Self {
        VolumeOptions {
            radial_nodes: 8,
            panel_width: 0.25,
            max_panels: 8,
            angular_nodes: 256,
            polar_nodes: 64,
            domain: None,
            points_per_decade: 64,
        }
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration on `P_n`.
pub(crate) fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            let pm1 = if n <= 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * p - pm1) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Unit directions with surface weights.
fn sphere_rule(dim: usize, opts: &VolumeOptions) -> Vec<(Vec<f64>, f64)> {
    match dim {
        1 => vec![(vec![-1.0], 1.0), (vec![1.0], 1.0)],
        2 => {
            let n = opts.angular_nodes;
            (0..n)
                .map(|j| {
                    let t = 2.0 * PI * j as f64 / n as f64;
                    (vec![t.cos(), t.sin()], 2.0 * PI / n as f64)
                })
                .collect()
        }
        _ => {
            let (ct, wt) = gauss_legendre(opts.polar_nodes);
            let n = opts.angular_nodes;
            let mut out = Vec::with_capacity(ct.len() * n);
            for (c, w) in ct.iter().zip(&wt) {
                let s = (1.0 - c * c).sqrt();
                for j in 0..n {
                    let p = 2.0 * PI * j as f64 / n as f64;
                    out.push((vec![s * p.cos(), s * p.sin(), *c], w * 2.0 * PI / n as f64));
                }
            }
            out
        }
    }
}

/// Cumulative integrals of `k` integrands over the balls `B_r` for increasing
/// `radii`. Each annulus is split into Gauss–Legendre panels; radial nodes are
/// summed in parallel and combined in order.
pub(crate) fn ball_integrals<F>(
    dim: usize,
    radii: &[f64],
    k: usize,
    opts: &VolumeOptions,
    f: F,
) -> Result<Vec<Vec<f64>>, DensityError>
where
    F: Fn(&[f64], &mut [f64]) -> Result<(), CalculusError> + Sync,
{
    let sphere = sphere_rule(dim, opts);
    let (gx, gw) = gauss_legendre(opts.radial_nodes);
    let mut totals = vec![KahanSum::new(); k];
    let mut out = Vec::with_capacity(radii.len());
    let mut inner = 0.0;
    for &outer in radii {
        let width = outer - inner;
        if width > 0.0 {
            let panels = ((width / opts.panel_width).ceil() as usize).clamp(1, opts.max_panels);
            let step = width / panels as f64;
            let nodes: Vec<(f64, f64)> = (0..panels)
                .flat_map(|p| {
                    let a = inner + p as f64 * step;
                    gx.iter()
                        .zip(&gw)
                        .map(move |(x, w)| (a + 0.5 * step * (x + 1.0), 0.5 * step * w))
                })
                .collect();
            let shells: Vec<Vec<f64>> = nodes
                .par_iter()
                .map(|&(s, w)| {
                    let mut acc = vec![KahanSum::new(); k];
                    let mut x = vec![0.0; dim];
                    let mut vals = vec![0.0; k];
                    let jac = w * s.powi(dim as i32 - 1);
                    for (dir, sw) in &sphere {
                        for (xi, di) in x.iter_mut().zip(dir) {
                            *xi = s * di;
                        }
                        f(&x, &mut vals)?;
                        for (a, v) in acc.iter_mut().zip(&vals) {
                            a.add(jac * sw * v);
                        }
                    }
                    Ok(acc.iter().map(KahanSum::total).collect())
                })
                .collect::<Result<_, CalculusError>>()?;
            for shell in shells {
                for (t, v) in totals.iter_mut().zip(shell) {
                    t.add(v);
                }
            }
        }
        out.push(totals.iter().map(KahanSum::total).collect());
        inner = outer;
    }
    Ok(out)
}

pub(crate) fn check_radii(rho: &DensityField, radii: &[f64], opts: &VolumeOptions) -> Result<(), DensityError> {
    let limit = opts.domain.or(match rho {
        DensityField::Grid(g) => Some(g.mesh().half_width),
        DensityField::Analytic { .. } => None,
    });
    for &r in radii {
        if !(r >= 0.0) {
            return Err(DensityError::Dimension(format!("radius {r} must be nonnegative")));
        }
        if let Some(limit) = limit {
            if r > limit {
                return Err(DensityError::RadiusOutsideDomain { radius: r, limit });
            }
        }
    }
    Ok(())
}

pub(crate) fn sorted(radii: &[f64]) -> Vec<f64> {
    let mut r = radii.to_vec();
    r.sort_by(f64::total_cmp);
    r.dedup();
    r
}

fn lookup(sorted: &[f64], values: &[Vec<f64>], r: f64) -> Vec<f64> {
    let i = sorted.binary_search_by(|p| p.total_cmp(&r)).expect("radius was added");
    values[i].clone()
}

/// `μ(B_r)` for each radius.
pub fn ball_measures(
    rho: &DensityField,
    radii: &[f64],
    opts: &VolumeOptions,
) -> Result<Vec<f64>, DensityError> {
    check_radii(rho, radii, opts)?;
    let s = sorted(radii);
    let v = ball_integrals(rho.dim(), &s, 1, opts, |x, out| {
        out[0] = rho.weight(x)?;
        Ok(())
    })?;
    Ok(radii.iter().map(|&r| lookup(&s, &v, r)[0]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeRow {
    pub radius: f64,
    pub mu_ball: f64,
    pub v1: Option<f64>,
    pub v2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnulusRow {
    pub level: f64,
    pub inner: f64,
    pub outer: f64,
    pub mu_annulus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeProfile {
    pub balls: Vec<VolumeRow>,
    /// `μ(B_{4n} ∖ B_{2n})` for each requested level `n`.
    pub annuli: Vec<AnnulusRow>,
}

/// Integrands `ρ`, `⟨Ax,x⟩/‖x‖² ρ`, `|⟨Bx,x⟩| ρ` at `x`.
fn volume_integrands<'a>(
    cs: Option<&'a CoefficientSet>,
    rho: &'a DensityField,
) -> impl Fn(&[f64], &mut [f64]) -> Result<(), CalculusError> + Sync + 'a {
    let b = cs.map(|cs| decompose_drift(cs, rho));
    let d = rho.dim();
    move |x, out| {
        let r = rho.weight(x)?;
        out.fill(0.0);
        out[0] = r;
        if r == 0.0 {
            // underflowed weight: the integrand vanishes and β is undefined
            return Ok(());
        }
        if let (Some(cs), Some(b)) = (cs, &b) {
            let mut a = vec![0.0; d * d];
            cs.eval_a(x, &mut a)?;
            let n2: f64 = x.iter().map(|v| v * v).sum();
            let axx: f64 = (0..d)
                .map(|i| (0..d).map(|j| a[i * d + j] * x[i] * x[j]).sum::<f64>())
                .sum();
            let mut bx = vec![0.0; d];
            b.eval(x, &mut bx)?;
            let bxx: f64 = bx.iter().zip(x).map(|(p, q)| p * q).sum();
            out[1] = axx / n2 * r;
            out[2] = bxx.abs() * r;
        }
        Ok(())
    }
}

/// Ball measures (and `v₁`, `v₂` when coefficients are given) at `radii`, and
/// annulus measures `μ(B_{4n} ∖ B_{2n})` at the given levels.
pub fn volume_profile(
    cs: Option<&CoefficientSet>,
    rho: &DensityField,
    radii: &[f64],
    annulus_levels: &[f64],
    opts: &VolumeOptions,
) -> Result<VolumeProfile, DensityError> {
    let mut all: Vec<f64> = radii.to_vec();
    for &n in annulus_levels {
        all.push(2.0 * n);
        all.push(4.0 * n);
    }
    check_radii(rho, &all, opts)?;
    let s = sorted(&all);
    let k = if cs.is_some() { 3 } else { 1 };
    let v = ball_integrals(rho.dim(), &s, k, opts, volume_integrands(cs, rho))?;
    let balls = radii
        .iter()
        .map(|&r| {
            let row = lookup(&s, &v, r);
            VolumeRow {
                radius: r,
                mu_ball: row[0],
                v1: cs.map(|_| row[1]),
                v2: cs.map(|_| row[2]),
            }
        })
        .collect();
    let annuli = annulus_levels
        .iter()
        .map(|&n| AnnulusRow {
            level: n,
            inner: 2.0 * n,
            outer: 4.0 * n,
            mu_annulus: lookup(&s, &v, 4.0 * n)[0] - lookup(&s, &v, 2.0 * n)[0],
        })
        .collect();
    Ok(VolumeProfile { balls, annuli })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecurrenceRow {
    pub n: f64,
    /// `a_n = ∫₁ⁿ r / v(r) dr`.
    pub a_n: f64,
    pub v1: f64,
    pub v2: f64,
    /// `ln(v₂(n) ∨ 1) / a_n`.
    pub log_ratio: f64,
}

/// `a_n` and `ln(v₂(n) ∨ 1)/a_n` at increasing levels `n ≥ 1`. The integral is
/// taken in `t = ln r` by composite Simpson with about `points_per_decade`
/// radii per decade; each level is a grid radius.
pub fn recurrence_sequence(
    cs: &CoefficientSet,
    rho: &DensityField,
    levels: &[f64],
    opts: &VolumeOptions,
) -> Result<Vec<RecurrenceRow>, DensityError> {
    let levels = sorted(levels);
    if levels.first().is_some_and(|&n| n < 1.0) {
        return Err(DensityError::Dimension("recurrence levels must be at least 1".into()));
    }
    check_radii(rho, &levels, opts)?;
    // Segment boundaries in t = ln r, each split into an even number of
    // steps so Simpson pairs never straddle two segments.
    let mut ts = vec![0.0];
    let mut radii = vec![1.0];
    let mut level_index = Vec::with_capacity(levels.len());
    let mut prev = 0.0;
    for &n in &levels {
        let t = n.ln();
        if t > prev {
            let decades = (t - prev) / std::f64::consts::LN_10;
            let steps = ((opts.points_per_decade as f64 * decades).ceil() as usize).max(2);
            let steps = steps + steps % 2;
            for i in 1..steps {
                let ti = prev + (t - prev) * i as f64 / steps as f64;
                ts.push(ti);
                radii.push(ti.exp());
            }
            ts.push(t);
            radii.push(n);
            prev = t;
        }
        level_index.push(ts.len() - 1);
    }
    let v = ball_integrals(rho.dim(), &radii, 3, opts, volume_integrands(Some(cs), rho))?;
    let integrand: Vec<f64> = radii
        .iter()
        .zip(&v)
        .map(|(r, row)| r * r / (row[1] + row[2]))
        .collect();
    let mut a = vec![0.0; ts.len()];
    for i in (0..ts.len().saturating_sub(2)).step_by(2) {
        let h = 0.5 * (ts[i + 2] - ts[i]);
        let (f0, f1, f2) = (integrand[i], integrand[i + 1], integrand[i + 2]);
        a[i + 1] = a[i] + 0.5 * (ts[i + 1] - ts[i]) * (f0 + f1);
        a[i + 2] = a[i] + h / 3.0 * (f0 + 4.0 * f1 + f2);
    }
    Ok(levels
        .iter()
        .zip(&level_index)
        .map(|(&n, &idx)| {
            let row = &v[idx];
            let a_n = a[idx];
            RecurrenceRow {
                n,
                a_n,
                v1: row[1],
                v2: row[2],
                log_ratio: if a_n > 0.0 { row[2].max(1.0).ln() / a_n } else { f64::INFINITY },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((s - 2.0 / 15.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn unit_ball_volumes() {
        let opts = VolumeOptions {
            angular_nodes: 64,
            polar_nodes: 16,
            ..Default::default()
        };
        for (d, exact) in [(1, 2.0), (2, PI), (3, 4.0 * PI / 3.0)] {
            let rho = DensityField::analytic(crate::expr::Expr::one(), d).unwrap();
            let v = ball_measures(&rho, &[1.0, 2.0], &opts).unwrap();
            assert!((v[0] - exact).abs() < 1e-12, "d={d}: {}", v[0]);
            assert!((v[1] - exact * 2f64.powi(d as i32)).abs() < 1e-11);
        }
    }
}
