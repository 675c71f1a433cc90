use serde::Serialize;

use super::fields::{log_derivative_beta, DensityField};
use super::generator::{Generator, GeneratorMode, SmoothFunction, TwiceDifferentiable};
use super::quadrature::{integrate_many, QuadratureRule};
use super::{CalculusError, CoefficientSet};
use crate::expr::{DiffMode, Expr, Node};

/// Residuals below `RESIDUAL_TOLERANCE · scale` count as zero.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

/// `max(1 - ((x - c)/w)^2, 0)^3`, the C² bump on `[c - w, c + w]`.
fn bump_factor(axis: usize, center: f64, half_width: f64) -> Expr {
    let t = Expr::div(
        Expr::sub(Expr::coord(axis), Expr::constant(center)),
        Expr::constant(half_width),
    );
    let inner = Expr::sub(Expr::one(), Expr::powi(t, 2));
    Expr::powi(Expr::new(Node::Max(inner, Expr::zero())), 3)
}

/// Product of one-dimensional `(1 - t²)³` bumps on a sub-box.
#[derive(Debug, Clone)]
pub struct Bump {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
    function: SmoothFunction,
}

impl Bump {
    pub fn new(center: Vec<f64>, half_width: Vec<f64>) -> Result<Self, CalculusError> {
        let dim = center.len();
        let expr = center
            .iter()
            .zip(&half_width)
            .enumerate()
            .map(|(k, (&c, &w))| bump_factor(k, c, w))
            .reduce(Expr::mul)
            .ok_or(CalculusError::Dimension { dim, min: 1 })?;
        Ok(Bump {
            function: SmoothFunction::new(&expr, dim, DiffMode::Piecewise)?,
            center,
            half_width,
        })
    }

    pub fn expr(&self) -> &Expr {
        self.function.expr()
    }

    pub fn function(&self) -> &SmoothFunction {
        &self.function
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.center)
            .zip(&self.half_width)
            .all(|((x, c), w)| (x - c).abs() < *w)
    }
}

/// Eight bump placements (fewer in one dimension) inside the quadrature box:
/// the center, the axis points at a quarter of the width from the center, and
/// diagonal points. Centers sit on quadrature nodes with an even index and
/// half-widths span an even number of node spacings, so every Simpson panel
/// sees a single polynomial piece.
pub fn bump_library(rule: &QuadratureRule) -> Result<Vec<Bump>, CalculusError> {
    let d = rule.dim();
    let mut mid = Vec::with_capacity(d);
    let mut offset = Vec::with_capacity(d);
    let mut width = Vec::with_capacity(d);
    for k in 0..d {
        let last = rule.nodes(k) - 1;
        let m = (last / 2) & !1;
        let a = (((last as f64) / 8.0).round() as usize * 2).max(2);
        let w = if a > 2 { a - 2 } else { 2 };
        if m < a + w || m + a + w > last {
            return Err(CalculusError::Shape(
                "quadrature box too coarse for the bump library".into(),
            ));
        }
        mid.push(m);
        offset.push(a);
        width.push(w as f64 * rule.spacing(k));
    }
    let mut patterns: Vec<Vec<i32>> = vec![vec![0; d]];
    for k in 0..d {
        for s in [1, -1] {
            let mut p = vec![0; d];
            p[k] = s;
            patterns.push(p);
        }
    }
    if d >= 2 {
        for bits in 0..(1u32 << d) {
            if patterns.len() >= 8 {
                break;
            }
            patterns.push((0..d).map(|k| if bits >> k & 1 == 1 { -1 } else { 1 }).collect());
        }
    }
    patterns.truncate(8);
    patterns
        .into_iter()
        .map(|p| {
            let center = (0..d)
                .map(|k| {
                    let idx = mid[k] as i64 + p[k] as i64 * offset[k] as i64;
                    rule.node(k, idx as usize)
                })
                .collect();
            Bump::new(center, width.clone())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualForm {
    /// `∫ ⟨G − β, ∇f⟩ ρ dx`, the integrated-by-parts form.
    Weak,
    /// `∫ (L f) ρ dx` with second derivatives of `f`.
    Strong,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub test_function: String,
    pub form: ResidualForm,
    pub value: f64,
    /// Integral of the absolute values of the individual terms.
    pub scale: f64,
    pub tolerance: f64,
    pub passes: bool,
    /// Set when the test function did not vanish on the box boundary and was
    /// multiplied by a cutoff bump.
    pub cutoff_applied: bool,
}

fn report(name: String, form: ResidualForm, value: f64, scale: f64, cutoff: bool) -> ResidualReport {
    let tolerance = RESIDUAL_TOLERANCE * scale;
    ResidualReport {
        test_function: name,
        form,
        value,
        scale,
        tolerance,
        passes: value.abs() <= tolerance,
        cutoff_applied: cutoff,
    }
}

fn weak_residual(
    cs: &CoefficientSet,
    rho: &DensityField,
    f: &SmoothFunction,
    rule: &QuadratureRule,
    support: Option<&Bump>,
) -> Result<(f64, f64), CalculusError> {
    let d = cs.dim();
    let beta = log_derivative_beta(cs, rho);
    let sums = integrate_many(rule, 2, |x, out| -> Result<(), CalculusError> {
        if support.is_some_and(|b| !b.contains(x)) {
            out[0] = 0.0;
            out[1] = 0.0;
            return Ok(());
        }
        let mut grad = vec![0.0; d];
        f.gradient(x, &mut grad)?;
        if grad.iter().all(|g| *g == 0.0) {
            out[0] = 0.0;
            out[1] = 0.0;
            return Ok(());
        }
        let r = rho.value(x)?;
        let mut g = vec![0.0; d];
        let mut b = vec![0.0; d];
        cs.eval_g(x, &mut g)?;
        beta.eval(x, &mut b)?;
        let gg: f64 = g.iter().zip(&grad).map(|(u, v)| u * v).sum();
        let bb: f64 = b.iter().zip(&grad).map(|(u, v)| u * v).sum();
        out[0] = (gg - bb) * r;
        out[1] = (gg.abs() + bb.abs()) * r;
        Ok(())
    })?;
    Ok((sums[0], sums[1]))
}

fn strong_residual(
    cs: &CoefficientSet,
    rho: &DensityField,
    f: &SmoothFunction,
    rule: &QuadratureRule,
) -> Result<(f64, f64), CalculusError> {
    let d = cs.dim();
    let gen = Generator::new(cs, Some(rho), GeneratorMode::L)?;
    let sums = integrate_many(rule, 2, |x, out| -> Result<(), CalculusError> {
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        let mut a = vec![0.0; d * d];
        let mut g = vec![0.0; d];
        f.jet(x, &mut grad, &mut hess)?;
        cs.eval_a(x, &mut a)?;
        cs.eval_g(x, &mut g)?;
        let r = rho.value(x)?;
        let second: f64 = 0.5 * a.iter().zip(&hess).map(|(u, v)| u * v).sum::<f64>();
        let first: f64 = g.iter().zip(&grad).map(|(u, v)| u * v).sum();
        out[0] = gen.apply(f, x)? * r;
        out[1] = (second.abs() + first.abs()) * r;
        Ok(())
    })?;
    Ok((sums[0], sums[1]))
}

/// Whether `f` vanishes on the boundary of the quadrature box relative to its
/// largest sampled magnitude.
fn leaks(f: &Expr, rule: &QuadratureRule) -> bool {
    let d = rule.dim();
    let total: usize = rule.point_count();
    let mut interior_max = 0.0f64;
    let mut boundary_max = 0.0f64;
    let mut x = vec![0.0; d];
    for lin in 0..total {
        let mut rem = lin;
        let mut on_boundary = false;
        for (k, xk) in x.iter_mut().enumerate() {
            let i = rem % rule.nodes(k);
            rem /= rule.nodes(k);
            on_boundary |= i == 0 || i + 1 == rule.nodes(k);
            *xk = rule.node(k, i);
        }
        let v = f.eval(&x).map(f64::abs).unwrap_or(0.0);
        interior_max = interior_max.max(v);
        if on_boundary {
            boundary_max = boundary_max.max(v);
        }
    }
    boundary_max > 1e-14 * interior_max
}

/// `∫ L f ρ dx` over the quadrature box.
///
/// The weak form integrates the second-order part by parts, which is exact for
/// test functions vanishing with their gradient on the box boundary and avoids
/// quadrature of second derivatives. Test functions that do not vanish on the
/// boundary are multiplied by a cutoff bump covering the box.
pub fn invariance_residual(
    cs: &CoefficientSet,
    rho: &DensityField,
    f: &Expr,
    rule: &QuadratureRule,
    form: ResidualForm,
) -> Result<ResidualReport, CalculusError> {
    if rule.dim() != cs.dim() {
        return Err(CalculusError::Shape("quadrature dimension differs from coefficients".into()));
    }
    let cutoff = leaks(f, rule);
    let test = if cutoff {
        let center: Vec<f64> = (0..rule.dim())
            .map(|k| 0.5 * (rule.lo()[k] + rule.hi()[k]))
            .collect();
        let half: Vec<f64> = (0..rule.dim())
            .map(|k| 0.5 * (rule.hi()[k] - rule.lo()[k]))
            .collect();
        Expr::mul(f.clone(), Bump::new(center, half)?.expr().clone())
    } else {
        f.clone()
    };
    let smooth = SmoothFunction::new(&test, cs.dim(), DiffMode::Piecewise)?;
    let (value, scale) = match form {
        ResidualForm::Weak => weak_residual(cs, rho, &smooth, rule, None)?,
        ResidualForm::Strong => strong_residual(cs, rho, &smooth, rule)?,
    };
    Ok(report(test.to_string(), form, value, scale, cutoff))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    /// Largest `|∫ ⟨B, ∇f⟩ ρ dx|` over the bump library.
    pub max_abs: f64,
    pub all_pass: bool,
    pub bumps: Vec<ResidualReport>,
}

/// `∫ ⟨B, ∇f⟩ ρ dx` for every bump of the library; zero up to quadrature error
/// exactly when `ρ dx` is infinitesimally invariant.
pub fn divergence_report(
    cs: &CoefficientSet,
    rho: &DensityField,
    rule: &QuadratureRule,
) -> Result<DivergenceReport, CalculusError> {
    let bumps = bump_library(rule)?
        .iter()
        .map(|b| {
            let (value, scale) = weak_residual(cs, rho, b.function(), rule, Some(b))?;
            Ok(report(b.expr().to_string(), ResidualForm::Weak, value, scale, false))
        })
        .collect::<Result<Vec<_>, CalculusError>>()?;
    Ok(DivergenceReport {
        max_abs: bumps.iter().map(|r| r.value.abs()).fold(0.0, f64::max),
        all_pass: bumps.iter().all(|r| r.passes),
        bumps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{Drift, Scheme};
    use crate::expr::parse_expr;

    #[test]
    fn library_is_aligned_and_inside_the_box() {
        let rule = QuadratureRule::centered(2, 3.0, 241, Scheme::Simpson).unwrap();
        let lib = bump_library(&rule).unwrap();
        assert_eq!(lib.len(), 8);
        let h = rule.spacing(0);
        for b in &lib {
            for k in 0..2 {
                let steps = b.half_width[k] / h;
                assert!((steps - steps.round()).abs() < 1e-9 && steps.round() as usize % 2 == 0);
                assert!(b.center[k].abs() + b.half_width[k] <= 3.0);
            }
        }
        let one_d = QuadratureRule::centered(1, 3.0, 241, Scheme::Simpson).unwrap();
        assert_eq!(bump_library(&one_d).unwrap().len(), 3);
    }

    #[test]
    fn uniform_measure_of_constant_drift_is_invariant() {
        let e = |s: &str| parse_expr(s, 2).unwrap();
        let cs = CoefficientSet::build(
            2,
            &[vec![e("1"), e("0")], vec![e("1")]],
            &[],
            Drift::Direct(vec![e("1"), e("0")]),
            &[],
        )
        .unwrap();
        let rho = DensityField::analytic(e("1"), 2).unwrap();
        let rule = QuadratureRule::centered(2, 3.0, 241, Scheme::Simpson).unwrap();
        let rep = divergence_report(&cs, &rho, &rule).unwrap();
        assert!(rep.all_pass, "{rep:?}");
    }

    #[test]
    fn non_vanishing_test_function_gets_cutoff() {
        let e = |s: &str| parse_expr(s, 2).unwrap();
        let cs = CoefficientSet::build(
            2,
            &[vec![e("1"), e("0")], vec![e("1")]],
            &[],
            Drift::Direct(vec![e("0"), e("0")]),
            &[],
        )
        .unwrap();
        let rho = DensityField::analytic(e("1"), 2).unwrap();
        let rule = QuadratureRule::centered(2, 2.0, 81, Scheme::Simpson).unwrap();
        let rep = invariance_residual(&cs, &rho, &e("exp(-norm2(x))"), &rule, ResidualForm::Weak)
            .unwrap();
        assert!(rep.cutoff_applied);
        assert!(rep.passes);
    }
}
