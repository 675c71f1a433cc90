//! Uniform tensor meshes on centered boxes `[-R, R]^d`.

use serde::Serialize;

/// Vertex-centered mesh with `cells` cells per axis. Node coordinates are
/// computed as `R * (2i - n) / n`, which is exactly symmetric about the origin
/// and puts a node exactly at 0 whenever `n` is even.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxMesh {
    pub dim: usize,
    pub half_width: f64,
    pub cells: usize,
}

impl BoxMesh {
    pub fn new(dim: usize, half_width: f64, cells: usize) -> Self {
        assert!(dim >= 1 && half_width > 0.0 && cells >= 2);
        BoxMesh {
            dim,
            half_width,
            cells,
        }
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.cells as f64
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.cells + 1
    }

    pub fn node_count(&self) -> usize {
        self.nodes_per_axis().pow(self.dim as u32)
    }

    /// Coordinate of node `i` along any axis.
    pub fn coordinate(&self, i: usize) -> f64 {
        let n = self.cells as f64;
        self.half_width * ((2.0 * i as f64 - n) / n)
    }

    /// Coordinate of the face midway between nodes `i` and `i + 1`.
    pub fn face_coordinate(&self, i: usize) -> f64 {
        let n = self.cells as f64;
        self.half_width * ((2.0 * i as f64 + 1.0 - n) / n)
    }

    /// Linear index with axis 0 varying fastest.
    pub fn linear(&self, multi: &[usize]) -> usize {
        let m = self.nodes_per_axis();
        multi.iter().rev().fold(0, |acc, &i| acc * m + i)
    }

    pub fn multi(&self, mut linear: usize, out: &mut [usize]) {
        let m = self.nodes_per_axis();
        for slot in out.iter_mut() {
            *slot = linear % m;
            linear /= m;
        }
    }

    pub fn point(&self, multi: &[usize], out: &mut [f64]) {
        for (o, &i) in out.iter_mut().zip(multi) {
            *o = self.coordinate(i);
        }
    }

    pub fn is_boundary(&self, multi: &[usize]) -> bool {
        multi.iter().any(|&i| i == 0 || i == self.cells)
    }

    /// Stride of axis `k` in the linear numbering.
    pub fn stride(&self, axis: usize) -> usize {
        self.nodes_per_axis().pow(axis as u32)
    }

    /// Node index of the origin, if the mesh has a node there.
    pub fn origin(&self) -> Option<usize> {
        (self.cells % 2 == 0).then(|| self.linear(&vec![self.cells / 2; self.dim]))
    }

    /// Locate `x` within the mesh: per axis the lower node index and the
    /// fractional offset in `[0, 1]`. Returns `None` outside the closed box.
    pub fn locate(&self, x: &[f64], cell: &mut [usize], frac: &mut [f64]) -> bool {
        let h = self.spacing();
        for k in 0..self.dim {
            let t = (x[k] + self.half_width) / h;
            if !(t >= -1e-9 && t <= self.cells as f64 + 1e-9) {
                return false;
            }
            let t = t.clamp(0.0, self.cells as f64);
            let mut i = (t.floor() as usize).min(self.cells - 1);
            let mut f = t - i as f64;
            // Snap to nodes so sampling at a node returns the nodal value.
            if f < 1e-9 {
                f = 0.0;
            } else if f > 1.0 - 1e-9 {
                if i + 1 < self.cells {
                    i += 1;
                    f = 0.0;
                } else {
                    f = 1.0;
                }
            }
            cell[k] = i;
            frac[k] = f;
        }
        true
    }

    /// Multilinear interpolation of nodal `values` at `x`.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> Option<f64> {
        let d = self.dim;
        let mut cell = vec![0; d];
        let mut frac = vec![0.0; d];
        if !self.locate(x, &mut cell, &mut frac) {
            return None;
        }
        let base = self.linear(&cell);
        let mut total = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = base;
            for k in 0..d {
                if corner >> k & 1 == 1 {
                    w *= frac[k];
                    idx += self.stride(k);
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            if w != 0.0 {
                total += w * values[idx];
            }
        }
        Some(total)
    }

    /// Finite-difference gradient of nodal values: fourth-order central
    /// differences in the interior, second order next to and on the boundary.
    pub fn gradient(&self, values: &[f64]) -> Vec<Vec<f64>> {
        let n = self.cells;
        let h = self.spacing();
        let mut multi = vec![0; self.dim];
        (0..self.dim)
            .map(|axis| {
                let s = self.stride(axis);
                (0..values.len())
                    .map(|idx| {
                        self.multi(idx, &mut multi);
                        let i = multi[axis];
                        let u = |off: isize| values[(idx as isize + off * s as isize) as usize];
                        if i >= 2 && i + 2 <= n {
                            (-u(2) + 8.0 * u(1) - 8.0 * u(-1) + u(-2)) / (12.0 * h)
                        } else if i >= 1 && i < n {
                            (u(1) - u(-1)) / (2.0 * h)
                        } else if i == 0 {
                            (-3.0 * u(0) + 4.0 * u(1) - u(2)) / (2.0 * h)
                        } else {
                            (3.0 * u(0) - 4.0 * u(-1) + u(-2)) / (2.0 * h)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}
