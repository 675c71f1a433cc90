//! Vertex-centered finite-volume discretization of
//! `∫ ⟨½(A + C^T)∇u − uH, ∇f⟩ dx = 0` on a box with Dirichlet data.

use rayon::prelude::*;

use super::sparse::CsrMatrix;
use super::{Boundary, DensityError};
use crate::calculus::{eigen_range, CoefficientSet};
use crate::expr::Expr;
use crate::mesh::BoxMesh;

/// Linear system over the interior nodes of a mesh. Boundary values enter the
/// right-hand side.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    pub mesh: BoxMesh,
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    /// Node index of each unknown.
    pub unknowns: Vec<usize>,
    /// Dirichlet values on boundary nodes, zero on interior nodes.
    pub boundary_values: Vec<f64>,
    /// Largest cell Péclet number `|h_k| h / λ_min(A)` over the faces.
    pub peclet_max: f64,
}

impl DiscreteSystem {
    /// Interior part of a full nodal vector.
    pub fn restrict(&self, nodal: &[f64]) -> Vec<f64> {
        self.unknowns.iter().map(|&i| nodal[i]).collect()
    }

    /// Full nodal vector from interior values and the boundary data.
    pub fn extend(&self, interior: &[f64]) -> Vec<f64> {
        let mut full = self.boundary_values.clone();
        for (&node, &v) in self.unknowns.iter().zip(interior) {
            full[node] = v;
        }
        full
    }

    /// `A u − b` for interior values `u`.
    pub fn residual(&self, interior: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; interior.len()];
        self.matrix.mul_vec(interior, &mut r);
        for (ri, bi) in r.iter_mut().zip(&self.rhs) {
            *ri -= bi;
        }
        r
    }
}

struct FaceCoefficients {
    /// `½(a_kj + c_jk)` for each normal axis `k`.
    flux: Vec<Vec<Expr>>,
}

/// Nodal entries of the flux through the face between `lo` and `lo + e_k`,
/// together with the cell Péclet number at the face center.
fn face_flux(
    cs: &CoefficientSet,
    coeffs: &FaceCoefficients,
    mesh: &BoxMesh,
    lo: &[usize],
    k: usize,
    entries: &mut Vec<(usize, f64)>,
    sign: f64,
) -> Result<f64, DensityError> {
    let d = mesh.dim;
    let h = mesh.spacing();
    let mut x = vec![0.0; d];
    mesh.point(lo, &mut x);
    x[k] = mesh.face_coordinate(lo[k]);
    let eval = |e: &Expr| {
        e.eval(&x).map_err(|source| DensityError::FaceEvaluation {
            point: x.clone(),
            source,
        })
    };
    let lo_lin = mesh.linear(lo);
    let hi_lin = lo_lin + mesh.stride(k);
    let hk = eval(&cs.h()[k])?;
    for j in 0..d {
        let m = eval(&coeffs.flux[k][j])?;
        if m == 0.0 {
            continue;
        }
        if j == k {
            entries.push((hi_lin, sign * m / h));
            entries.push((lo_lin, -sign * m / h));
        } else {
            let s = mesh.stride(j);
            let c = sign * m / (4.0 * h);
            entries.push((lo_lin + s, c));
            entries.push((lo_lin - s, -c));
            entries.push((hi_lin + s, c));
            entries.push((hi_lin - s, -c));
        }
    }
    if hk != 0.0 {
        entries.push((lo_lin, -sign * 0.5 * hk));
        entries.push((hi_lin, -sign * 0.5 * hk));
    }
    let mut a = vec![0.0; d * d];
    cs.eval_a(&x, &mut a).map_err(|source| DensityError::FaceEvaluation {
        point: x.clone(),
        source,
    })?;
    let (lambda, _) = eigen_range(d, &a);
    Ok(hk.abs() * h / lambda)
}

/// Assemble the finite-volume system. Each interior node `p` gets the row
/// `(F⁻ − F⁺) / h` summed over axes, where `F∓` are the normal fluxes
/// `Σ_j m_kj ∂_j u − h_k u` through the faces at `p ∓ h/2 e_k`, with `m` and
/// `H` evaluated at face centers, normal derivatives as one-sided differences,
/// tangential derivatives averaged over both adjacent nodes and `u` averaged
/// across the face.
pub fn assemble_system(
    cs: &CoefficientSet,
    mesh: &BoxMesh,
    boundary: &Boundary,
) -> Result<DiscreteSystem, DensityError> {
    let d = mesh.dim;
    if d != cs.dim() {
        return Err(DensityError::Dimension(format!(
            "mesh dimension {d} differs from coefficient dimension {}",
            cs.dim()
        )));
    }
    let total = mesh.node_count();
    let mut node_to_unknown = vec![usize::MAX; total];
    let mut unknowns = Vec::new();
    let mut boundary_values = vec![0.0; total];
    let mut multi = vec![0; d];
    let mut x = vec![0.0; d];
    for node in 0..total {
        mesh.multi(node, &mut multi);
        if mesh.is_boundary(&multi) {
            mesh.point(&multi, &mut x);
            boundary_values[node] = match boundary {
                Boundary::Ones => 1.0,
                Boundary::Expression(e) => {
                    e.eval(&x).map_err(|source| DensityError::BoundaryEvaluation {
                        point: x.clone(),
                        source,
                    })?
                }
            };
        } else {
            node_to_unknown[node] = unknowns.len();
            unknowns.push(node);
        }
    }
    let coeffs = FaceCoefficients {
        flux: (0..d)
            .map(|k| (0..d).map(|j| cs.flux_matrix(k, j)).collect())
            .collect(),
    };
    let h = mesh.spacing();
    let rows: Vec<(Vec<(usize, f64)>, f64, f64)> = unknowns
        .par_iter()
        .map(|&node| {
            let mut p = vec![0; d];
            mesh.multi(node, &mut p);
            let mut entries = Vec::with_capacity(8 * d * d);
            let mut peclet = 0.0f64;
            let mut lo = p.clone();
            for k in 0..d {
                lo[k] = p[k] - 1;
                peclet = peclet.max(face_flux(cs, &coeffs, mesh, &lo, k, &mut entries, 1.0 / h)?);
                lo[k] = p[k];
                peclet = peclet.max(face_flux(cs, &coeffs, mesh, &lo, k, &mut entries, -1.0 / h)?);
            }
            let mut row = Vec::with_capacity(entries.len());
            let mut rhs = 0.0;
            for (n, v) in entries {
                match node_to_unknown[n] {
                    usize::MAX => rhs -= v * boundary_values[n],
                    col => row.push((col, v)),
                }
            }
            Ok((row, rhs, peclet))
        })
        .collect::<Result<_, DensityError>>()?;
    let mut peclet_max = 0.0f64;
    let mut rhs = Vec::with_capacity(rows.len());
    let mut matrix_rows = Vec::with_capacity(rows.len());
    for (row, b, pe) in rows {
        peclet_max = peclet_max.max(pe);
        rhs.push(b);
        matrix_rows.push(row);
    }
    Ok(DiscreteSystem {
        mesh: mesh.clone(),
        matrix: CsrMatrix::from_rows(matrix_rows),
        rhs,
        unknowns,
        boundary_values,
        peclet_max,
    })
}
