//! Attention introspection: the query row of the box token in the final
//! vision layer, head-averaged and restricted to patch keys, exported as a
//! CSV grid or a PGM heatmap.

use crate::encoder::TokenRole;
use crate::model::Forward;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("grid size {grid} does not match {patches} patch tokens")]
    GridMismatch { grid: usize, patches: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Head-averaged attention weights from the box token to every patch token in
/// the final vision layer, as a (grid x grid) tensor in raster order.
pub fn reg_attention_map(fwd: &Forward, grid: usize) -> Result<Tensor, AttentionError> {
    let patch_cols: Vec<usize> = fwd
        .vision_roles
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == TokenRole::Patch)
        .map(|(i, _)| i)
        .collect();
    if patch_cols.len() != grid * grid {
        return Err(AttentionError::GridMismatch { grid, patches: patch_cols.len() });
    }
    let heads = fwd.vision_attn_last.len();
    let mut map = Tensor::zeros(grid, grid);
    for &head in &fwd.vision_attn_last {
        let probs = fwd.tape.value(head);
        for (k, &col) in patch_cols.iter().enumerate() {
            map.data[k] += probs.at(0, col) / heads as f64;
        }
    }
    Ok(map)
}

/// Plain comma-separated values, one grid row per line, no header.
pub fn write_csv(path: &Path, map: &Tensor) -> Result<(), AttentionError> {
    let mut f = std::fs::File::create(path)?;
    for r in 0..map.rows {
        let line: Vec<String> = map.row(r).iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

/// Binary PGM (P5), min-max normalized to the full 8-bit range. A flat map
/// renders as mid-gray.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<(), AttentionError> {
    let lo = map.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut buf = format!("P5\n{} {}\n255\n", map.cols, map.rows).into_bytes();
    for &v in &map.data {
        let byte = if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            128
        };
        buf.push(byte);
    }
    std::fs::write(path, buf)?;
    Ok(())
}
