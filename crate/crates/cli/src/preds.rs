//! Label-map files for `eval-seg --pred-dir` and `--export-preds`: one DST1
//! file holding every map of a dataset and the size of the label space.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use densesiam::dst1::{Container, Entry, Payload};

pub const PRED_FILE: &str = "predictions.dst1";
const LABELS: &str = "labels";
const NUM_LABELS: &str = "num_labels";

/// Writes `[N,H,W]` label maps to `dir/predictions.dst1`.
pub fn save(dir: &Path, maps: &[Vec<usize>], num_labels: usize, (h, w): (usize, usize)) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let flat: Vec<i64> = maps.iter().flatten().map(|&l| l as i64).collect();
    let mut c = Container::new();
    c.push(Entry::new(LABELS, &[maps.len(), h, w], Payload::I64(flat))?);
    c.push(Entry::new(NUM_LABELS, &[1], Payload::I64(vec![num_labels as i64]))?);
    c.save(dir.join(PRED_FILE))?;
    Ok(())
}

/// Reads maps written by [`save`]; every label must lie in `0..num_labels`.
pub fn load(dir: &Path) -> Result<(Vec<Vec<usize>>, usize)> {
    let c = Container::load(dir.join(PRED_FILE))?;
    let n = match c.i64(NUM_LABELS)?.1 {
        [n] if *n > 0 => *n as usize,
        other => bail!("{NUM_LABELS}: expected one positive count, got {other:?}"),
    };
    let (dims, flat) = c.i64(LABELS)?;
    if dims.len() != 3 {
        bail!("{LABELS}: expected [N,H,W], got {dims:?}");
    }
    if let Some(bad) = flat.iter().find(|&&l| l < 0 || l as usize >= n) {
        bail!("{LABELS}: label {bad} outside [0,{n})");
    }
    let per = dims[1] * dims[2];
    let maps = flat.chunks(per.max(1)).map(|m| m.iter().map(|&l| l as usize).collect()).collect();
    Ok((maps, n))
}
