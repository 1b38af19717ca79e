//! Volume storage, CT-style preprocessing, dataset manifests, and the
//! synthetic lesion-volume generator.

mod manifest;
mod synthetic;
mod vvol;

pub use manifest::{DatasetManifest, ManifestEntry};
pub use synthetic::{generate_synthetic, SynthConfig};
pub use vvol::{read_vvol, write_vvol};

use crate::error::{Error, Result};

/// Single-channel 3D scalar field with voxel spacing. Voxels are stored
/// x fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub spacing_mm: (f32, f32, f32),
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), spacing_mm: (f32, f32, f32), voxels: Vec<f32>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if voxels.len() != n {
            return Err(Error::shape(format!(
                "volume dims {dims:?} imply {n} voxels, got {}",
                voxels.len()
            )));
        }
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::shape("volume dims must be positive"));
        }
        if spacing_mm.0 <= 0.0 || spacing_mm.1 <= 0.0 || spacing_mm.2 <= 0.0 {
            return Err(Error::shape("voxel spacing must be positive"));
        }
        Ok(Volume {
            dims,
            spacing_mm,
            voxels,
        })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Volume {
            dims,
            spacing_mm: (1.0, 1.0, 1.0),
            voxels: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.0 + x
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.voxels.iter().all(|v| v.is_finite())
    }
}

/// Intensity window: a linear remap of `[level - width/2, level + width/2]`
/// onto `[0, 1]` with clamping.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub width_hu: f32,
    pub level_hu: f32,
}

impl Default for WindowSpec {
    fn default() -> Self {
        // brain window
        WindowSpec {
            width_hu: 80.0,
            level_hu: 40.0,
        }
    }
}

/// Applies the intensity window: `clamp((v - (WL - WW/2)) / WW, 0, 1)`.
pub fn window_hu(v: &Volume, w: &WindowSpec) -> Result<Volume> {
    if w.width_hu <= 0.0 {
        return Err(Error::config(format!(
            "window width must be positive, got {}",
            w.width_hu
        )));
    }
    let lo = w.level_hu - w.width_hu / 2.0;
    let voxels = v
        .voxels
        .iter()
        .map(|hu| ((hu - lo) / w.width_hu).clamp(0.0, 1.0))
        .collect();
    Ok(Volume {
        dims: v.dims,
        spacing_mm: v.spacing_mm,
        voxels,
    })
}

/// Separable cubic (Catmull-Rom) spline resampling to `target_dims`, with
/// endpoint-aligned coordinates so a unit zoom reproduces the input exactly.
/// Border neighbors are linearly extrapolated, which keeps constants and
/// linear ramps exact; data with sharp edges can overshoot slightly (that is
/// inherent to interpolating cubics).
pub fn siz_resample(v: &Volume, target_dims: (usize, usize, usize)) -> Result<Volume> {
    let (tx, ty, tz) = target_dims;
    if tx < 2 || ty < 2 || tz < 2 {
        return Err(Error::config(format!(
            "resample target dims must be >= 2 per axis, got {target_dims:?}"
        )));
    }
    let (dx, dy, dz) = v.dims;
    for (name, side, target) in [("x", dx, tx), ("y", dy, ty), ("z", dz, tz)] {
        if side < 2 && target != side {
            return Err(Error::numeric(format!(
                "resample: input extent {side} along {name} is degenerate"
            )));
        }
    }

    // x, then y, then z
    let pass_x = resample_axis(&v.voxels, (dx, dy, dz), 0, tx);
    let pass_y = resample_axis(&pass_x, (tx, dy, dz), 1, ty);
    let pass_z = resample_axis(&pass_y, (tx, ty, dz), 2, tz);

    let spacing = (
        v.spacing_mm.0 * dx as f32 / tx as f32,
        v.spacing_mm.1 * dy as f32 / ty as f32,
        v.spacing_mm.2 * dz as f32 / tz as f32,
    );
    Volume::new((tx, ty, tz), spacing, pass_z)
}

/// Catmull-Rom kernel weights for fractional offset `t` in [0, 1).
fn catmull_rom(t: f32) -> [f32; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t + t2 - 0.5 * t3,
        1.0 - 2.5 * t2 + 1.5 * t3,
        0.5 * t + 2.0 * t2 - 1.5 * t3,
        -0.5 * t2 + 0.5 * t3,
    ]
}

/// Sample with linear extrapolation outside [0, n-1].
fn tap(line: &[f32], i: isize) -> f32 {
    let n = line.len() as isize;
    if i < 0 {
        2.0 * line[0] - line[(-i).min(n - 1) as usize]
    } else if i >= n {
        let over = i - (n - 1);
        2.0 * line[(n - 1) as usize] - line[(n - 1 - over.min(n - 1)) as usize]
    } else {
        line[i as usize]
    }
}

fn resample_axis(
    data: &[f32],
    (dx, dy, dz): (usize, usize, usize),
    axis: usize,
    target: usize,
) -> Vec<f32> {
    let (old, out_dims) = match axis {
        0 => (dx, (target, dy, dz)),
        1 => (dy, (dx, target, dz)),
        _ => (dz, (dx, dy, target)),
    };
    if old == target {
        return data.to_vec();
    }
    // endpoint-aligned source coordinate per output index
    let scale = (old - 1) as f64 / (target - 1) as f64;
    let coords: Vec<(isize, [f32; 4])> = (0..target)
        .map(|i| {
            let src = i as f64 * scale;
            let base = src.floor();
            let t = (src - base) as f32;
            (base as isize, catmull_rom(t))
        })
        .collect();

    let (ox, oy, oz) = out_dims;
    let mut out = vec![0.0f32; ox * oy * oz];
    let mut line = vec![0.0f32; old];

    match axis {
        0 => {
            for z in 0..dz {
                for y in 0..dy {
                    let row = &data[(z * dy + y) * dx..(z * dy + y) * dx + dx];
                    line.copy_from_slice(row);
                    let orow = &mut out[(z * oy + y) * ox..(z * oy + y) * ox + ox];
                    for (o, (base, w)) in orow.iter_mut().zip(&coords) {
                        *o = w[0] * tap(&line, base - 1)
                            + w[1] * tap(&line, *base)
                            + w[2] * tap(&line, base + 1)
                            + w[3] * tap(&line, base + 2);
                    }
                }
            }
        }
        1 => {
            for z in 0..dz {
                for x in 0..dx {
                    for (i, l) in line.iter_mut().enumerate() {
                        *l = data[(z * dy + i) * dx + x];
                    }
                    for (i, (base, w)) in coords.iter().enumerate() {
                        out[(z * oy + i) * ox + x] = w[0] * tap(&line, base - 1)
                            + w[1] * tap(&line, *base)
                            + w[2] * tap(&line, base + 1)
                            + w[3] * tap(&line, base + 2);
                    }
                }
            }
        }
        _ => {
            for y in 0..dy {
                for x in 0..dx {
                    for (i, l) in line.iter_mut().enumerate() {
                        *l = data[(i * dy + y) * dx + x];
                    }
                    for (i, (base, w)) in coords.iter().enumerate() {
                        out[(i * oy + y) * ox + x] = w[0] * tap(&line, base - 1)
                            + w[1] * tap(&line, *base)
                            + w[2] * tap(&line, base + 1)
                            + w[3] * tap(&line, base + 2);
                    }
                }
            }
        }
    }
    out
}

/// Binarizes at `threshold`, labels 6-connected components, keeps the
/// largest one (original intensities), zeroes everything else. An empty
/// foreground yields an all-zero volume and a warning.
pub fn strip_background(v: &Volume, threshold: f32) -> Result<Volume> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::config(format!(
            "strip threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let (dx, dy, dz) = v.dims;
    let n = v.len();
    let mask: Vec<bool> = v.voxels.iter().map(|&x| x > threshold).collect();
    let mut labels = vec![0u32; n]; // 0 = background
    let mut sizes: Vec<usize> = vec![0]; // sizes[label]
    let mut queue = Vec::new();

    for start in 0..n {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32;
        sizes.push(0);
        labels[start] = label;
        queue.push(start);
        while let Some(idx) = queue.pop() {
            sizes[label as usize] += 1;
            let x = idx % dx;
            let y = (idx / dx) % dy;
            let z = idx / (dx * dy);
            let mut visit = |nx: usize, ny: usize, nz: usize| {
                let ni = (nz * dy + ny) * dx + nx;
                if mask[ni] && labels[ni] == 0 {
                    labels[ni] = label;
                    queue.push(ni);
                }
            };
            if x > 0 {
                visit(x - 1, y, z);
            }
            if x + 1 < dx {
                visit(x + 1, y, z);
            }
            if y > 0 {
                visit(x, y - 1, z);
            }
            if y + 1 < dy {
                visit(x, y + 1, z);
            }
            if z > 0 {
                visit(x, y, z - 1);
            }
            if z + 1 < dz {
                visit(x, y, z + 1);
            }
        }
    }

    if sizes.len() == 1 {
        log::warn!("strip_background: no foreground above threshold {threshold}");
        return Ok(Volume {
            dims: v.dims,
            spacing_mm: v.spacing_mm,
            voxels: vec![0.0; n],
        });
    }

    let keep = (1..sizes.len()).max_by_key(|&l| (sizes[l], usize::MAX - l)).unwrap() as u32;
    let voxels = v
        .voxels
        .iter()
        .zip(&labels)
        .map(|(&val, &l)| if l == keep { val } else { 0.0 })
        .collect();
    Ok(Volume {
        dims: v.dims,
        spacing_mm: v.spacing_mm,
        voxels,
    })
}

#[cfg(test)]
mod tests;
