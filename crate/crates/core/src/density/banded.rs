//! Banded LU factorization with partial pivoting.

use super::sparse::CsrMatrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("banded factorization found a zero pivot in column {column}")]
pub struct SingularBand {
    pub column: usize,
}

/// Row-wise band storage: row `i` holds columns `i - kl ..= i + kl + ku`, the
/// extra `kl` upper diagonals receiving fill from row interchanges.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
    multipliers: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandedLu {
    /// Number of stored entries for a matrix of order `n` with bandwidths `(kl, ku)`.
    pub fn storage(n: usize, kl: usize, ku: usize) -> usize {
        n * (3 * kl + ku + 1)
    }

    pub fn factor(a: &CsrMatrix) -> Result<Self, SingularBand> {
        let n = a.n;
        let (kl, ku) = a.bandwidths();
        let width = 2 * kl + ku + 1;
        let mut data = vec![0.0; n * width];
        for i in 0..n {
            let (c, v) = a.row(i);
            for (&j, &x) in c.iter().zip(v) {
                data[i * width + j + kl - i] += x;
            }
        }
        let mut lu = BandedLu {
            n,
            kl,
            ku,
            width,
            data,
            multipliers: vec![0.0; n * kl],
            pivots: vec![0; n],
        };
        lu.eliminate()?;
        Ok(lu)
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        i * self.width + j + self.kl - i
    }

    fn eliminate(&mut self) -> Result<(), SingularBand> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let right = (k + kl + ku).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.at(k, k)].abs();
            for i in k + 1..=last {
                let v = self.data[self.at(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(SingularBand { column: k });
            }
            self.pivots[k] = p;
            if p != k {
                for j in k..=right {
                    let (s, t) = (self.at(k, j), self.at(p, j));
                    self.data.swap(s, t);
                }
            }
            let pivot = self.data[self.at(k, k)];
            let row_k = self.at(k, k + 1);
            let len = right - k;
            for i in k + 1..=last {
                let m = self.data[self.at(i, k)] / pivot;
                self.multipliers[k * kl + (i - k - 1)] = m;
                if m == 0.0 {
                    continue;
                }
                let row_i = self.at(i, k + 1);
                // Rows i > k are stored after row k, so split to borrow both.
                let (head, tail) = self.data.split_at_mut(row_i);
                let src = &head[row_k..row_k + len];
                for (dst, s) in tail[..len].iter_mut().zip(src) {
                    *dst -= m * s;
                }
            }
        }
        Ok(())
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut x = b.to_vec();
        for k in 0..n {
            x.swap(k, self.pivots[k]);
            let last = (k + kl).min(n - 1);
            let xk = x[k];
            for i in k + 1..=last {
                x[i] -= self.multipliers[k * kl + (i - k - 1)] * xk;
            }
        }
        for i in (0..n).rev() {
            let right = (i + kl + ku).min(n - 1);
            let mut s = x[i];
            for j in i + 1..=right {
                s -= self.data[self.at(i, j)] * x[j];
            }
            x[i] = s / self.data[self.at(i, i)];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_known_solution_with_pivoting() {
        // Zero leading diagonal entry forces an interchange.
        let a = CsrMatrix::from_rows(vec![
            vec![(0, 0.0), (1, 2.0)],
            vec![(0, 1.0), (1, 1.0), (2, 3.0)],
            vec![(1, 4.0), (2, 1.0)],
        ]);
        let lu = BandedLu::factor(&a).unwrap();
        let x = lu.solve(&[2.0, 5.0, 5.0]);
        for (p, q) in x.iter().zip([1.0, 1.0, 1.0]) {
            assert!((p - q).abs() < 1e-14, "{x:?}");
        }
    }

    #[test]
    fn random_banded_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, kl, ku) = (60, 4, 7);
        let rows: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|i: usize| {
                (i.saturating_sub(kl)..=(i + ku).min(n - 1))
                    .map(|j| (j, rng.random_range(-1.0..1.0)))
                    .collect()
            })
            .collect();
        let a = CsrMatrix::from_rows(rows);
        assert_eq!(a.bandwidths(), (kl, ku));
        let exact: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut b = vec![0.0; n];
        a.mul_vec(&exact, &mut b);
        let x = BandedLu::factor(&a).unwrap().solve(&b);
        for (p, q) in x.iter().zip(&exact) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = CsrMatrix::from_rows(vec![vec![(0, 1.0), (1, 1.0)], vec![(0, 1.0), (1, 1.0)]]);
        assert_eq!(BandedLu::factor(&a).unwrap_err(), SingularBand { column: 1 });
    }
}
