//! Metric tables and image dumps.
//!
//! Tables are comma-separated text with a one-line schema header. Heatmaps
//! and spectrograms are written twice: as a raw float grid (one
//! comma-separated row per grid row, full precision) and as a normalized
//! 8-bit grayscale binary PGM for direct viewing.

use cavmae_core::tensor::Tensor;

use crate::error::{CliError, Result};

/// Renders a table: one schema line, then one comma-joined line per row.
/// Every row must have exactly as many fields as the schema.
pub fn csv_text(schema: &str, rows: &[Vec<String>]) -> Result<String> {
    let width = schema.split(',').count();
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(schema);
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(CliError::runtime(format!(
                "table row {i} has {} fields, schema '{schema}' has {width}",
                row.len()
            )));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Full-precision float grid, one text row per tensor row.
pub fn float_grid_text(grid: &Tensor) -> Result<String> {
    let (rows, cols) = grid.dims2().map_err(|e| CliError::runtime(e.to_string()))?;
    let mut out = String::new();
    for r in 0..rows {
        let row = &grid.data()[r * cols..(r + 1) * cols];
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Binary PGM (P5, maxval 255) of a rank-2 grid, min–max normalized; a
/// constant grid renders as all zeros.
pub fn pgm_bytes(grid: &Tensor) -> Result<Vec<u8>> {
    let (rows, cols) = grid.dims2().map_err(|e| CliError::runtime(e.to_string()))?;
    let data = grid.data();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in data {
        if !v.is_finite() {
            return Err(CliError::runtime("cannot render non-finite grid values"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.reserve(rows * cols);
    for &v in data {
        let byte = if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        };
        out.push(byte);
    }
    Ok(out)
}
