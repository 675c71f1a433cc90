use nalgebra::{DMatrix, SymmetricEigen};

use super::{CalculusError, CoefficientSet};

/// Symmetric square root of a row-major SPD matrix via its eigendecomposition.
///
/// Eigenpairs are ordered by descending eigenvalue and each eigenvector's first
/// nonzero component is made positive, so the factorization is reproducible.
/// Eigenvalues at or below `1e-12 · trace` are reported as degenerate.
pub fn sqrt_spd(dim: usize, a: &[f64], out: &mut [f64]) -> Result<(), (f64, f64)> {
    let trace: f64 = (0..dim).map(|i| a[i * dim + i]).sum();
    let threshold = 1e-12 * trace.abs();
    if dim == 1 {
        if !(a[0] > threshold) {
            return Err((a[0], threshold));
        }
        out[0] = a[0].sqrt();
        return Ok(());
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, a));
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let smallest = eig.eigenvalues[order[dim - 1]];
    if !(smallest > threshold) {
        return Err((smallest, threshold));
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    for &k in &order {
        let lambda = eig.eigenvalues[k].sqrt();
        let mut v: Vec<f64> = (0..dim).map(|i| eig.eigenvectors[(i, k)]).collect();
        if let Some(first) = v.iter().find(|c| **c != 0.0) {
            if *first < 0.0 {
                v.iter_mut().for_each(|c| *c = -*c);
            }
        }
        for i in 0..dim {
            for j in i..dim {
                out[i * dim + j] += lambda * v[i] * v[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            out[i * dim + j] = out[j * dim + i];
        }
    }
    Ok(())
}

/// `σ(x)` with `σσ = A(x)`, row-major.
pub fn diffusion_root(cs: &CoefficientSet, x: &[f64]) -> Result<Vec<f64>, CalculusError> {
    let d = cs.dim();
    let mut a = vec![0.0; d * d];
    let mut out = vec![0.0; d * d];
    DiffusionRoot::new(cs)?.eval(cs, x, &mut a, &mut out)?;
    Ok(out)
}

/// Evaluator for `σ(x)` that skips the eigendecomposition when `A` is constant
/// (factor cached) or diagonal (entrywise square roots).
#[derive(Debug, Clone)]
pub struct DiffusionRoot {
    constant: Option<Vec<f64>>,
}

impl DiffusionRoot {
    pub fn new(cs: &CoefficientSet) -> Result<Self, CalculusError> {
        let d = cs.dim();
        let constant = match cs.constant_a() {
            Some(a) => {
                let mut out = vec![0.0; d * d];
                sqrt_spd(d, a, &mut out).map_err(|(eigenvalue, threshold)| {
                    CalculusError::DegenerateDiffusion {
                        point: vec![0.0; d],
                        eigenvalue,
                        threshold,
                    }
                })?;
                Some(out)
            }
            None => None,
        };
        Ok(DiffusionRoot { constant })
    }

    pub fn is_constant(&self) -> bool {
        self.constant.is_some()
    }

    /// Writes `σ(x)` into `out`; `a` is scratch space of length `d²`.
    pub fn eval(
        &self,
        cs: &CoefficientSet,
        x: &[f64],
        a: &mut [f64],
        out: &mut [f64],
    ) -> Result<(), CalculusError> {
        if let Some(c) = &self.constant {
            out.copy_from_slice(c);
            return Ok(());
        }
        let d = cs.dim();
        cs.eval_a(x, a)?;
        let degenerate = |(eigenvalue, threshold)| CalculusError::DegenerateDiffusion {
            point: x.to_vec(),
            eigenvalue,
            threshold,
        };
        if cs.a_is_diagonal() {
            let trace: f64 = (0..d).map(|i| a[i * d + i]).sum();
            let threshold = 1e-12 * trace.abs();
            out.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..d {
                let v = a[i * d + i];
                if !(v > threshold) {
                    return Err(degenerate((v, threshold)));
                }
                out[i * d + i] = v.sqrt();
            }
            return Ok(());
        }
        sqrt_spd(d, a, out).map_err(degenerate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn multiply(d: usize, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..d).map(|k| s[i * d + k] * s[k * d + j]).sum();
            }
        }
        out
    }

    fn random_spd(rng: &mut ChaCha8Rng) -> Vec<f64> {
        let m: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                a[i * 3 + j] = (0..3).map(|k| m[i * 3 + k] * m[j * 3 + k]).sum::<f64>()
                    + if i == j { 0.1 } else { 0.0 };
            }
        }
        a
    }

    #[test]
    fn diagonal_roots() {
        let mut out = vec![0.0; 4];
        sqrt_spd(2, &[4.0, 0.0, 0.0, 9.0], &mut out).unwrap();
        assert_eq!(out, vec![2.0, 0.0, 0.0, 3.0]);
        sqrt_spd(2, &[1.0, 0.0, 0.0, 1.0], &mut out).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn random_spd_roots_multiply_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a = random_spd(&mut rng);
            let mut s = vec![0.0; 9];
            sqrt_spd(3, &a, &mut s).unwrap();
            let back = multiply(3, &s);
            let norm = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = a.iter().zip(&back).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
            assert!(err <= 1e-12 * norm, "error {err} vs norm {norm}");
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(s[i * 3 + j], s[j * 3 + i]);
                }
            }
        }
    }

    #[test]
    fn root_is_locally_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let a = random_spd(&mut rng);
            let mut b = a.clone();
            let delta = 1e-6;
            b[1] += delta;
            b[3] += delta;
            let (mut sa, mut sb) = (vec![0.0; 9], vec![0.0; 9]);
            sqrt_spd(3, &a, &mut sa).unwrap();
            sqrt_spd(3, &b, &mut sb).unwrap();
            let change = sa.iter().zip(&sb).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
            // The root's derivative is bounded by 1/(2 sqrt(λ_min)) with λ_min ≥ 0.1,
            // and the perturbation has Frobenius norm sqrt(2)·δ.
            assert!(change <= 2.5 * delta, "change {change}");
        }
    }

    #[test]
    fn degenerate_matrix_rejected() {
        let mut out = vec![0.0; 4];
        assert!(sqrt_spd(2, &[1.0, 1.0, 1.0, 1.0], &mut out).is_err());
    }
}
