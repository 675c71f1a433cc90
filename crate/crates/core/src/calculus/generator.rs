use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use super::fields::{log_derivative_beta, DensityField, VectorField};
use super::{CalculusError, CoefficientSet};
use crate::expr::{Derivatives, DiffMode, Expr};

/// A scalar function with value, gradient and Hessian available pointwise.
pub trait TwiceDifferentiable: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64, CalculusError>;

    /// Value at `x`; writes the gradient and the row-major Hessian.
    fn jet(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> Result<f64, CalculusError>;

    /// Like [`TwiceDifferentiable::jet`], also writing magnitudes that bound
    /// the rounding in each derivative (see [`Expr::eval_with_magnitude`]).
    fn jet_with_magnitude(
        &self,
        x: &[f64],
        grad: &mut [f64],
        hess: &mut [f64],
        grad_mag: &mut [f64],
        hess_mag: &mut [f64],
    ) -> Result<f64, CalculusError> {
        let u = self.jet(x, grad, hess)?;
        for (m, g) in grad_mag.iter_mut().zip(grad.iter()) {
            *m = g.abs();
        }
        for (m, h) in hess_mag.iter_mut().zip(hess.iter()) {
            *m = h.abs();
        }
        Ok(u)
    }

    fn describe(&self) -> String;
}

/// An expression together with its symbolic gradient and Hessian.
#[derive(Debug, Clone)]
pub struct SmoothFunction {
    derivs: Derivatives,
}

impl SmoothFunction {
    pub fn new(expr: &Expr, dim: usize, mode: DiffMode) -> Result<Self, CalculusError> {
        Ok(SmoothFunction {
            derivs: Derivatives::new(expr, dim, mode)?,
        })
    }

    pub fn expr(&self) -> &Expr {
        &self.derivs.value
    }

    pub fn gradient_exprs(&self) -> &[Expr] {
        &self.derivs.gradient
    }

    /// Gradient only, skipping the Hessian.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) -> Result<(), CalculusError> {
        for (o, e) in out.iter_mut().zip(&self.derivs.gradient) {
            *o = e.eval(x)?;
        }
        Ok(())
    }
}

impl TwiceDifferentiable for SmoothFunction {
    fn dim(&self) -> usize {
        self.derivs.gradient.len()
    }

    fn value(&self, x: &[f64]) -> Result<f64, CalculusError> {
        Ok(self.derivs.value.eval(x)?)
    }

    fn jet(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> Result<f64, CalculusError> {
        let d = self.dim();
        self.gradient(x, grad)?;
        for i in 0..d {
            for j in i..d {
                let v = self.derivs.hessian[i][j].eval(x)?;
                hess[i * d + j] = v;
                hess[j * d + i] = v;
            }
        }
        self.value(x)
    }

    fn jet_with_magnitude(
        &self,
        x: &[f64],
        grad: &mut [f64],
        hess: &mut [f64],
        grad_mag: &mut [f64],
        hess_mag: &mut [f64],
    ) -> Result<f64, CalculusError> {
        let d = self.dim();
        for i in 0..d {
            (grad[i], grad_mag[i]) = self.derivs.gradient[i].eval_with_magnitude(x)?;
            for j in i..d {
                let (v, m) = self.derivs.hessian[i][j].eval_with_magnitude(x)?;
                (hess[i * d + j], hess[j * d + i]) = (v, v);
                (hess_mag[i * d + j], hess_mag[j * d + i]) = (m, m);
            }
        }
        self.value(x)
    }

    fn describe(&self) -> String {
        self.derivs.value.to_string()
    }
}

/// `h(x) = ∫_{-∞}^{x} e^{-t²} dt = (√π/2)(1 + erf x)` in one dimension.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianPrimitive;

impl TwiceDifferentiable for GaussianPrimitive {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, x: &[f64]) -> Result<f64, CalculusError> {
        Ok(0.5 * std::f64::consts::PI.sqrt() * (1.0 + erf(x[0])))
    }

    fn jet(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> Result<f64, CalculusError> {
        let g = (-x[0] * x[0]).exp();
        grad[0] = g;
        hess[0] = -2.0 * x[0] * g;
        self.value(x)
    }

    fn describe(&self) -> String {
        "gaussian_primitive(x1)".into()
    }
}

/// Which first-order part accompanies `½ Σ a_ij ∂_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorMode {
    /// Drift `G`.
    #[serde(rename = "L")]
    L,
    /// Drift `2β − G`, the formal adjoint with respect to `ρ dx`.
    #[serde(rename = "L_adjoint")]
    Adjoint,
    /// Drift `β`, the symmetric part.
    #[serde(rename = "L_zero")]
    Symmetric,
}

impl fmt::Display for GeneratorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorMode::L => "L",
            GeneratorMode::Adjoint => "L_adjoint",
            GeneratorMode::Symmetric => "L_zero",
        })
    }
}

/// Second-order operator `½ Σ a_ij ∂_ij f + ⟨drift, ∇f⟩` prepared for pointwise use.
#[derive(Debug, Clone)]
pub struct Generator {
    cs: CoefficientSet,
    drift: VectorField,
    mode: GeneratorMode,
}

impl Generator {
    pub fn new(
        cs: &CoefficientSet,
        rho: Option<&DensityField>,
        mode: GeneratorMode,
    ) -> Result<Self, CalculusError> {
        let g = VectorField::Symbolic(cs.g().to_vec());
        let drift = match mode {
            GeneratorMode::L => g,
            GeneratorMode::Symmetric | GeneratorMode::Adjoint => {
                let rho = rho.ok_or(CalculusError::MissingDensity(match mode {
                    GeneratorMode::Adjoint => "L_adjoint",
                    _ => "L_zero",
                }))?;
                let beta = log_derivative_beta(cs, rho);
                if mode == GeneratorMode::Symmetric {
                    beta
                } else {
                    beta.combine(2.0, &g, -1.0)
                }
            }
        };
        Ok(Generator {
            cs: cs.clone(),
            drift,
            mode,
        })
    }

    pub fn mode(&self) -> GeneratorMode {
        self.mode
    }

    pub fn drift(&self) -> &VectorField {
        &self.drift
    }

    pub fn coefficients(&self) -> &CoefficientSet {
        &self.cs
    }

    pub fn apply(&self, f: &dyn TwiceDifferentiable, x: &[f64]) -> Result<f64, CalculusError> {
        Ok(self.apply_with_value(f, x)?.1)
    }

    /// Returns `(f(x), (Op f)(x))`.
    pub fn apply_with_value(
        &self,
        f: &dyn TwiceDifferentiable,
        x: &[f64],
    ) -> Result<(f64, f64), CalculusError> {
        let d = self.cs.dim();
        let mut grad = [0.0; 4];
        let mut hess = [0.0; 16];
        let mut a = [0.0; 16];
        let mut drift = [0.0; 4];
        let (grad, hess, a, drift) = if d <= 4 {
            (&mut grad[..d], &mut hess[..d * d], &mut a[..d * d], &mut drift[..d])
        } else {
            return self.apply_heap(f, x);
        };
        let value = f.jet(x, grad, hess)?;
        self.cs.eval_a(x, a)?;
        self.drift.eval(x, drift)?;
        Ok((value, combine(d, a, hess, drift, grad)))
    }

    fn apply_heap(
        &self,
        f: &dyn TwiceDifferentiable,
        x: &[f64],
    ) -> Result<(f64, f64), CalculusError> {
        let d = self.cs.dim();
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        let mut a = vec![0.0; d * d];
        let mut drift = vec![0.0; d];
        let value = f.jet(x, &mut grad, &mut hess)?;
        self.cs.eval_a(x, &mut a)?;
        self.drift.eval(x, &mut drift)?;
        Ok((value, combine(d, &a, &hess, &drift, &grad)))
    }
}

fn combine(d: usize, a: &[f64], hess: &[f64], drift: &[f64], grad: &[f64]) -> f64 {
    let mut second = 0.0;
    for i in 0..d {
        for j in 0..d {
            second += a[i * d + j] * hess[i * d + j];
        }
    }
    let first: f64 = drift.iter().zip(grad).map(|(b, g)| b * g).sum();
    0.5 * second + first
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{seeded_probes, Drift};
    use crate::expr::parse_expr;

    fn cs(dim: usize, a: &[&[&str]], g: &[&str]) -> CoefficientSet {
        let e = |s: &str| parse_expr(s, dim).unwrap();
        CoefficientSet::build(
            dim,
            &a.iter().map(|r| r.iter().map(|s| e(s)).collect()).collect::<Vec<_>>(),
            &[],
            Drift::Direct(g.iter().map(|s| e(s)).collect()),
            &[],
        )
        .unwrap()
    }

    fn smooth(s: &str, dim: usize) -> SmoothFunction {
        SmoothFunction::new(&parse_expr(s, dim).unwrap(), dim, DiffMode::Smooth).unwrap()
    }

    #[test]
    fn laplacian_of_square_norm() {
        let bm = cs(2, &[&["1", "0"], &["1"]], &["0", "0"]);
        let gen = Generator::new(&bm, None, GeneratorMode::L).unwrap();
        let f = smooth("norm2(x)", 2);
        for p in seeded_probes(2, 4.0, 50, 3) {
            assert_eq!(gen.apply(&f, &p).unwrap(), 2.0);
        }
    }

    #[test]
    fn ou_lyapunov_function() {
        let ou = cs(2, &[&["1", "0"], &["1"]], &["-x1", "-x2"]);
        let gen = Generator::new(&ou, None, GeneratorMode::L).unwrap();
        let f = smooth("norm2(x) + 1", 2);
        for p in seeded_probes(2, 4.0, 50, 4) {
            let r2 = p[0] * p[0] + p[1] * p[1];
            assert!((gen.apply(&f, &p).unwrap() - (2.0 - 2.0 * r2)).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_needs_density() {
        let bm = cs(2, &[&["1", "0"], &["1"]], &["0", "0"]);
        assert!(matches!(
            Generator::new(&bm, None, GeneratorMode::Adjoint),
            Err(CalculusError::MissingDensity(_))
        ));
    }

    #[test]
    fn adjoint_on_one_dimensional_gaussian_primitive() {
        // A = 1, ρ = exp(-x²), G = -x - 2exp(x²): L'h = -2x exp(-x²) + 2.
        let data = cs(1, &[&["1"]], &["-x1 - 2*exp(x1^2)"]);
        let rho = DensityField::analytic(parse_expr("exp(-x1^2)", 1).unwrap(), 1).unwrap();
        let gen = Generator::new(&data, Some(&rho), GeneratorMode::Adjoint).unwrap();
        for x in [-3.0, -1.0, -0.2, 0.0, 0.5, 1.7, 3.0] {
            let expected = -2.0 * x * (-x * x as f64).exp() + 2.0;
            let got = gen.apply(&GaussianPrimitive, &[x]).unwrap();
            assert!((got - expected).abs() < 1e-12 * (1.0 + (x * x).exp()), "x = {x}");
        }
    }

    #[test]
    fn gaussian_primitive_derivative_matches_integrand() {
        let f = GaussianPrimitive;
        let (mut g, mut h) = ([0.0], [0.0]);
        let v = f.jet(&[0.0], &mut g, &mut h).unwrap();
        assert!((v - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(g[0], 1.0);
        let step = 1e-5;
        let fd = (f.value(&[0.3 + step]).unwrap() - f.value(&[0.3 - step]).unwrap()) / (2.0 * step);
        assert!((fd - (-0.09f64).exp()).abs() < 1e-9);
    }
}
