//! Occlusion sensitivity maps: systematically occlude sub-volumes, measure
//! the score change, and emit an importance volume plus rendered slices.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OsmConfig {
    /// Cubic occluder edge length in voxels.
    pub patch: usize,
    /// Step between occluder placements; `stride <= patch` keeps coverage
    /// complete.
    pub stride: usize,
    /// Intensity written into the occluded region (0 = post-window
    /// background).
    pub fill_value: f32,
}

impl Default for OsmConfig {
    fn default() -> Self {
        OsmConfig {
            patch: 8,
            stride: 4,
            fill_value: 0.0,
        }
    }
}

/// Placement starts per axis: every multiple of `stride` that fits, plus
/// the final flush-against-the-border start so coverage is total.
fn axis_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=extent - patch).step_by(stride).collect();
    let last = extent - patch;
    if *starts.last().expect("at least one placement") != last {
        starts.push(last);
    }
    starts
}

/// Baseline score minus occluded score, averaged per voxel over every
/// occluder placement covering it. Positive importance marks regions whose
/// occlusion lowers the predicted score.
pub fn occlusion_map(
    score: &(dyn Fn(&Volume) -> Result<f64> + Sync),
    v: &Volume,
    cfg: &OsmConfig,
) -> Result<Volume> {
    let (dx, dy, dz) = v.dims;
    let min_extent = dx.min(dy).min(dz);
    if cfg.patch == 0 || cfg.patch > min_extent {
        return Err(Error::config(format!(
            "occluder patch {} must lie in [1, {min_extent}]",
            cfg.patch
        )));
    }
    if cfg.stride == 0 || cfg.stride > cfg.patch {
        return Err(Error::config(format!(
            "occluder stride {} must lie in [1, patch = {}]",
            cfg.stride, cfg.patch
        )));
    }

    let baseline = score(v)?;
    if !baseline.is_finite() {
        return Err(Error::numeric("non-finite baseline score"));
    }

    let mut placements = Vec::new();
    for z0 in axis_starts(dz, cfg.patch, cfg.stride) {
        for y0 in axis_starts(dy, cfg.patch, cfg.stride) {
            for x0 in axis_starts(dx, cfg.patch, cfg.stride) {
                placements.push((x0, y0, z0));
            }
        }
    }

    // placements evaluate in parallel; the merge below walks them in
    // placement order so the map is independent of scheduling
    let contributions: Result<Vec<f64>> = placements
        .par_iter()
        .map(|&(x0, y0, z0)| {
            let mut occluded = v.clone();
            for z in z0..z0 + cfg.patch {
                for y in y0..y0 + cfg.patch {
                    let row = occluded.index(x0, y, z);
                    occluded.voxels[row..row + cfg.patch].fill(cfg.fill_value);
                }
            }
            let s = score(&occluded)?;
            if !s.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite score for occluder at ({x0}, {y0}, {z0})"
                )));
            }
            Ok(baseline - s)
        })
        .collect();
    let contributions = contributions?;

    let mut sum = vec![0.0f64; v.len()];
    let mut count = vec![0u32; v.len()];
    for (&(x0, y0, z0), c) in placements.iter().zip(&contributions) {
        for z in z0..z0 + cfg.patch {
            for y in y0..y0 + cfg.patch {
                let row = (z * dy + y) * dx + x0;
                for i in row..row + cfg.patch {
                    sum[i] += c;
                    count[i] += 1;
                }
            }
        }
    }
    let voxels = sum
        .iter()
        .zip(&count)
        .map(|(s, c)| (s / f64::from(*c)) as f32)
        .collect();
    Ok(Volume {
        dims: v.dims,
        spacing_mm: v.spacing_mm,
        voxels,
    })
}

/// Mean importance inside and outside an inclusive-exclusive voxel box
/// `[x0, y0, z0, x1, y1, z1)`.
pub fn box_importance(map: &Volume, bbox: [usize; 6]) -> (f64, f64) {
    let (dx, dy, dz) = map.dims;
    let mut inside = (0.0f64, 0usize);
    let mut outside = (0.0f64, 0usize);
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let v = f64::from(map.at(x, y, z));
                let is_in = x >= bbox[0]
                    && x < bbox[3]
                    && y >= bbox[1]
                    && y < bbox[4]
                    && z >= bbox[2]
                    && z < bbox[5];
                if is_in {
                    inside.0 += v;
                    inside.1 += 1;
                } else {
                    outside.0 += v;
                    outside.1 += 1;
                }
            }
        }
    }
    (
        inside.0 / inside.1.max(1) as f64,
        outside.0 / outside.1.max(1) as f64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::config(format!("unknown axis {other}"))),
        }
    }
}

/// Writes a binary portable pixmap (P6): the underlay slice in grayscale
/// with a signed-importance overlay, blue where occlusion lowers the score
/// and red where it raises it, linearly scaled by max |importance|.
pub fn render_slice(
    importance: &Volume,
    underlay: &Volume,
    axis: Axis,
    index: usize,
    path: &Path,
) -> Result<()> {
    if importance.dims != underlay.dims {
        return Err(Error::shape(format!(
            "importance dims {:?} vs underlay {:?}",
            importance.dims, underlay.dims
        )));
    }
    let (dx, dy, dz) = importance.dims;
    let (w, h, extent) = match axis {
        Axis::X => (dy, dz, dx),
        Axis::Y => (dx, dz, dy),
        Axis::Z => (dx, dy, dz),
    };
    if index >= extent {
        return Err(Error::config(format!(
            "slice index {index} out of range for axis extent {extent}"
        )));
    }
    let sample = |vol: &Volume, u: usize, q: usize| -> f32 {
        match axis {
            Axis::X => vol.at(index, u, q),
            Axis::Y => vol.at(u, index, q),
            Axis::Z => vol.at(u, q, index),
        }
    };

    let max_abs = importance
        .voxels
        .iter()
        .fold(0.0f32, |m, v| m.max(v.abs()));

    let mut pixels = Vec::with_capacity(w * h * 3);
    for q in 0..h {
        for u in 0..w {
            let gray = (sample(underlay, u, q).clamp(0.0, 1.0) * 255.0) as u8;
            if max_abs == 0.0 {
                pixels.extend([gray, gray, gray]);
                continue;
            }
            let imp = sample(importance, u, q) / max_abs;
            let alpha = imp.abs().clamp(0.0, 1.0) * 0.7;
            let tint: [f32; 3] = if imp >= 0.0 {
                [40.0, 80.0, 255.0]
            } else {
                [255.0, 60.0, 40.0]
            };
            for c in 0..3 {
                let blended = (1.0 - alpha) * f32::from(gray) + alpha * tint[c];
                pixels.push(blended.round().clamp(0.0, 255.0) as u8);
            }
        }
    }

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P6\n{w} {h}\n255\n")?;
    file.write_all(&pixels)?;
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
