use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::CalculusError;

/// Compensated (Neumaier) summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.compensation += (self.sum - t) + v;
        } else {
            self.compensation += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Midpoint,
    Simpson,
}

/// Tensor-product rule on an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureRule {
    lo: Vec<f64>,
    hi: Vec<f64>,
    nodes: Vec<usize>,
    scheme: Scheme,
}

impl QuadratureRule {
    pub fn new(
        lo: Vec<f64>,
        hi: Vec<f64>,
        nodes: Vec<usize>,
        scheme: Scheme,
    ) -> Result<Self, CalculusError> {
        if lo.len() != hi.len() || lo.len() != nodes.len() || lo.is_empty() {
            return Err(CalculusError::Shape("quadrature box and node counts disagree".into()));
        }
        for ((l, h), &n) in lo.iter().zip(&hi).zip(&nodes) {
            if !(l < h) {
                return Err(CalculusError::Shape(format!("empty quadrature interval [{l}, {h}]")));
            }
            match scheme {
                Scheme::Simpson if n < 3 || n % 2 == 0 => {
                    return Err(CalculusError::EvenSimpsonNodes(n))
                }
                Scheme::Midpoint if n == 0 => {
                    return Err(CalculusError::Shape("midpoint rule needs nodes".into()))
                }
                _ => {}
            }
        }
        Ok(QuadratureRule {
            lo,
            hi,
            nodes,
            scheme,
        })
    }

    /// Rule on `[-half_width, half_width]^dim` with `nodes` nodes per axis.
    pub fn centered(
        dim: usize,
        half_width: f64,
        nodes: usize,
        scheme: Scheme,
    ) -> Result<Self, CalculusError> {
        Self::new(vec![-half_width; dim], vec![half_width; dim], vec![nodes; dim], scheme)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn nodes(&self, axis: usize) -> usize {
        self.nodes[axis]
    }

    /// Distance between neighbouring nodes along `axis`.
    pub fn spacing(&self, axis: usize) -> f64 {
        let width = self.hi[axis] - self.lo[axis];
        match self.scheme {
            Scheme::Simpson => width / (self.nodes[axis] - 1) as f64,
            Scheme::Midpoint => width / self.nodes[axis] as f64,
        }
    }

    /// Node coordinate, symmetric about the box center to the last bit.
    pub fn node(&self, axis: usize, i: usize) -> f64 {
        let mid = 0.5 * (self.lo[axis] + self.hi[axis]);
        let half = 0.5 * (self.hi[axis] - self.lo[axis]);
        let n = self.nodes[axis] as f64;
        let q = match self.scheme {
            Scheme::Simpson => (2.0 * i as f64 - (n - 1.0)) / (n - 1.0),
            Scheme::Midpoint => (2.0 * i as f64 + 1.0 - n) / n,
        };
        mid + half * q
    }

    pub fn weight(&self, axis: usize, i: usize) -> f64 {
        let h = self.spacing(axis);
        match self.scheme {
            Scheme::Midpoint => h,
            Scheme::Simpson => {
                let last = self.nodes[axis] - 1;
                let w = if i == 0 || i == last {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                w * h / 3.0
            }
        }
    }

    pub fn point_count(&self) -> usize {
        self.nodes.iter().product()
    }
}

/// Integrate `f` with the tensor rule. Slices along the last axis are summed
/// in parallel with compensated summation and then combined in index order,
/// so the result does not depend on the thread count.
pub fn integrate<F, E>(rule: &QuadratureRule, f: F) -> Result<f64, E>
where
    F: Fn(&[f64]) -> Result<f64, E> + Sync,
    E: Send,
{
    let v = integrate_many(rule, 1, |x, out| {
        out[0] = f(x)?;
        Ok(())
    })?;
    Ok(v[0])
}

/// Integrate `k` integrands at once; `f` writes the integrand values into its
/// output slice.
pub fn integrate_many<F, E>(rule: &QuadratureRule, k: usize, f: F) -> Result<Vec<f64>, E>
where
    F: Fn(&[f64], &mut [f64]) -> Result<(), E> + Sync,
    E: Send,
{
    let d = rule.dim();
    let outer = rule.nodes[d - 1];
    let inner: usize = rule.nodes[..d - 1].iter().product();
    let slices: Vec<Result<Vec<f64>, E>> = (0..outer)
        .into_par_iter()
        .map(|io| {
            let mut x = vec![0.0; d];
            let mut values = vec![0.0; k];
            x[d - 1] = rule.node(d - 1, io);
            let w_outer = rule.weight(d - 1, io);
            let mut acc = vec![KahanSum::new(); k];
            for lin in 0..inner {
                let mut rem = lin;
                let mut w = w_outer;
                for axis in 0..d - 1 {
                    let i = rem % rule.nodes[axis];
                    rem /= rule.nodes[axis];
                    x[axis] = rule.node(axis, i);
                    w *= rule.weight(axis, i);
                }
                f(&x, &mut values)?;
                for (a, v) in acc.iter_mut().zip(&values) {
                    a.add(w * v);
                }
            }
            Ok(acc.iter().map(KahanSum::total).collect())
        })
        .collect();
    let mut total = vec![KahanSum::new(); k];
    for s in slices {
        for (t, v) in total.iter_mut().zip(s?) {
            t.add(v);
        }
    }
    Ok(total.iter().map(KahanSum::total).collect())
}
