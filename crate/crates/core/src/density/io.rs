//! CSV grid files: a `R,n,d` header record, then one
//! `index,x1,..,xd,value` record per node.

use std::io::{Read, Write};

use super::DensityApproximation;
use crate::mesh::BoxMesh;

#[derive(Debug, thiserror::Error)]
pub enum GridFileError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed density grid: {0}")]
    Format(String),
}

/// Shortest round-trip decimal, switching to exponent form outside `[1e-4, 1e15)`.
pub fn csv_number(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

pub fn write_density_csv<W: Write>(rho: &DensityApproximation, w: W) -> Result<(), GridFileError> {
    let mesh = &rho.mesh;
    let mut out = csv::WriterBuilder::new().flexible(true).from_writer(w);
    out.write_record(["R", "n", "d"])?;
    out.write_record([
        csv_number(mesh.half_width),
        mesh.cells.to_string(),
        mesh.dim.to_string(),
    ])?;
    let mut header = vec!["index".to_string()];
    header.extend((1..=mesh.dim).map(|k| format!("x{k}")));
    header.push("value".into());
    out.write_record(&header)?;
    let mut multi = vec![0; mesh.dim];
    let mut x = vec![0.0; mesh.dim];
    let mut record = Vec::with_capacity(mesh.dim + 2);
    for (i, v) in rho.values.iter().enumerate() {
        mesh.multi(i, &mut multi);
        mesh.point(&multi, &mut x);
        record.clear();
        record.push(i.to_string());
        record.extend(x.iter().copied().map(csv_number));
        record.push(csv_number(*v));
        out.write_record(&record)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Read a grid file back into its mesh and nodal values.
pub fn read_density_csv<R: Read>(r: R) -> Result<(BoxMesh, Vec<f64>), GridFileError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(false)
        .from_reader(r);
    let mut records = reader.records();
    let mut next = || -> Result<csv::StringRecord, GridFileError> {
        records
            .next()
            .ok_or_else(|| GridFileError::Format("file ends early".into()))?
            .map_err(GridFileError::from)
    };
    let bad = |what: &str| GridFileError::Format(what.to_string());
    next()?;
    let meta = next()?;
    let half_width: f64 = meta.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("R"))?;
    let cells: usize = meta.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("n"))?;
    let dim: usize = meta.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("d"))?;
    if !(half_width > 0.0) || cells < 2 || !(1..=3).contains(&dim) {
        return Err(bad("header values out of range"));
    }
    let mesh = BoxMesh::new(dim, half_width, cells);
    next()?;
    let mut values = vec![f64::NAN; mesh.node_count()];
    for rec in reader.records() {
        let rec = rec?;
        let idx: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("index"))?;
        let v: f64 = rec.get(dim + 1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("value"))?;
        *values.get_mut(idx).ok_or_else(|| bad("index out of range"))? = v;
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(bad("missing nodes"));
    }
    Ok((mesh, values))
}
