//! Synthetic two-class benchmark volumes: smooth ellipsoidal "brain"
//! phantoms, with a small hyper-intense ellipsoidal lesion added for the
//! positive class. Each positive volume shares its phantom with a paired
//! negative volume, so the lesion is the only class signal.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{write_vvol, DatasetManifest, ManifestEntry, Volume};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub dims: (usize, usize, usize),
    pub seed: u64,
    pub k_folds: usize,
}

impl SynthConfig {
    pub fn new(n_per_class: usize, dims: (usize, usize, usize), seed: u64) -> Self {
        SynthConfig {
            n_per_class,
            dims,
            seed,
            k_folds: 5,
        }
    }
}

use crate::seed_mix;

struct Phantom {
    center: [f64; 3],
    semi_axes: [f64; 3],
    base: f64,
    modes: Vec<([f64; 3], f64, f64)>, // (frequency, phase, amplitude)
}

impl Phantom {
    fn radius2(&self, p: [f64; 3]) -> f64 {
        let mut r2 = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.semi_axes[a];
            r2 += d * d;
        }
        r2
    }

    fn field(&self, p: [f64; 3], extent: [f64; 3]) -> f64 {
        let mut g = 0.0;
        for (freq, phase, amp) in &self.modes {
            let arg: f64 = (0..3).map(|a| freq[a] * p[a] / extent[a]).sum();
            g += amp * (arg + phase).cos();
        }
        g
    }
}

const EDGE_TAPER_START: f64 = 0.92;

fn edge_envelope(r: f64) -> f64 {
    ((1.0 - r) / (1.0 - EDGE_TAPER_START)).clamp(0.0, 1.0)
}

/// Writes `2 * n_per_class` VVOL volumes plus `manifest.json` into
/// `out_dir`; fully deterministic under `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let (dx, dy, dz) = cfg.dims;
    if dx < 16 || dy < 16 || dz < 16 {
        return Err(Error::config(format!(
            "synthetic dims must be >= 16 per axis, got {:?}",
            cfg.dims
        )));
    }
    if cfg.n_per_class < 1 {
        return Err(Error::config("n_per_class must be >= 1"));
    }
    if cfg.k_folds < 1 {
        return Err(Error::config("k_folds must be >= 1"));
    }
    std::fs::create_dir_all(out_dir)?;

    let extent = [dx as f64, dy as f64, dz as f64];
    let mut entries = Vec::with_capacity(2 * cfg.n_per_class);

    for i in 0..cfg.n_per_class {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(cfg.seed, i as u64));

        let phantom = Phantom {
            center: [
                extent[0] * rng.gen_range(0.48..0.52),
                extent[1] * rng.gen_range(0.48..0.52),
                extent[2] * rng.gen_range(0.48..0.52),
            ],
            semi_axes: [
                extent[0] * rng.gen_range(0.34..0.42),
                extent[1] * rng.gen_range(0.34..0.42),
                extent[2] * rng.gen_range(0.34..0.42),
            ],
            base: rng.gen_range(0.45..0.58),
            modes: (0..3)
                .map(|_| {
                    let freq = [
                        rng.gen_range(1.5..4.5) * PI,
                        rng.gen_range(1.5..4.5) * PI,
                        rng.gen_range(1.5..4.5) * PI,
                    ];
                    (freq, rng.gen_range(0.0..2.0 * PI), rng.gen_range(-0.02..0.02))
                })
                .collect(),
        };

        let mut normal = Volume::zeros(cfg.dims);
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                    let r2 = phantom.radius2(p);
                    if r2 >= 1.0 {
                        continue;
                    }
                    let noise = rng.gen_range(-0.03..0.03);
                    let v = (phantom.base + phantom.field(p, extent) + noise)
                        * edge_envelope(r2.sqrt());
                    let idx = normal.index(x, y, z);
                    normal.voxels[idx] = v as f32;
                }
            }
        }

        let (lesion_center, lesion_radii) = place_lesion(&mut rng, &phantom, extent, i)?;
        let mut lesioned = normal.clone();
        let x_range = axis_box(lesion_center[0], lesion_radii[0], dx);
        let y_range = axis_box(lesion_center[1], lesion_radii[1], dy);
        let z_range = axis_box(lesion_center[2], lesion_radii[2], dz);
        for z in z_range.0..z_range.1 {
            for y in y_range.0..y_range.1 {
                for x in x_range.0..x_range.1 {
                    let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                    let mut rl2 = 0.0;
                    for a in 0..3 {
                        let d = (p[a] - lesion_center[a]) / lesion_radii[a];
                        rl2 += d * d;
                    }
                    if rl2 < 1.0 {
                        let idx = lesioned.index(x, y, z);
                        lesioned.voxels[idx] += (0.3 * (1.0 - rl2)) as f32;
                    }
                }
            }
        }
        let lesion_box = [
            x_range.0, y_range.0, z_range.0, x_range.1, y_range.1, z_range.1,
        ];

        let normal_name = format!("vol_{i:04}_c0.vvol");
        let lesion_name = format!("vol_{i:04}_c1.vvol");
        write_vvol(&normal, &out_dir.join(&normal_name))?;
        write_vvol(&lesioned, &out_dir.join(&lesion_name))?;

        let subject = format!("pair-{i:04}");
        entries.push(ManifestEntry {
            path: normal_name,
            label: 0,
            subject: subject.clone(),
            fold: 0,
            lesion_box: None,
        });
        entries.push(ManifestEntry {
            path: lesion_name,
            label: 1,
            subject,
            fold: 0,
            lesion_box: Some(lesion_box),
        });
    }

    // each pair is one subject with one volume per class, so dealing
    // shuffled pairs round-robin balances every fold by class
    let mut order: Vec<usize> = (0..cfg.n_per_class).collect();
    let mut fold_rng = ChaCha8Rng::seed_from_u64(seed_mix(cfg.seed, 0xF01D));
    for i in (1..order.len()).rev() {
        let j = fold_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    for (pos, pair) in order.iter().enumerate() {
        let fold = pos % cfg.k_folds;
        entries[2 * pair].fold = fold;
        entries[2 * pair + 1].fold = fold;
    }

    let manifest = DatasetManifest {
        k_folds: cfg.k_folds,
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Voxel range `[lo, hi)` covering `center +- radius`, clamped to the axis.
fn axis_box(center: f64, radius: f64, extent: usize) -> (usize, usize) {
    let lo = (center - radius).floor().max(0.0) as usize;
    let hi = ((center + radius).ceil() as usize + 1).min(extent);
    (lo, hi)
}

fn place_lesion(
    rng: &mut ChaCha8Rng,
    phantom: &Phantom,
    extent: [f64; 3],
    pair: usize,
) -> Result<([f64; 3], [f64; 3])> {
    let radii = [
        extent[0] * rng.gen_range(0.08..0.15),
        extent[1] * rng.gen_range(0.08..0.15),
        extent[2] * rng.gen_range(0.08..0.15),
    ];
    for _ in 0..1000 {
        let center = [
            phantom.center[0] + phantom.semi_axes[0] * rng.gen_range(-0.6..0.6),
            phantom.center[1] + phantom.semi_axes[1] * rng.gen_range(-0.6..0.6),
            phantom.center[2] + phantom.semi_axes[2] * rng.gen_range(-0.6..0.6),
        ];
        // the whole lesion box must sit inside the untapered brain interior
        let mut fits = true;
        'corners: for cx in [-1.0, 1.0] {
            for cy in [-1.0, 1.0] {
                for cz in [-1.0, 1.0] {
                    let corner = [
                        center[0] + cx * radii[0],
                        center[1] + cy * radii[1],
                        center[2] + cz * radii[2],
                    ];
                    if phantom.radius2(corner).sqrt() > 0.85 {
                        fits = false;
                        break 'corners;
                    }
                }
            }
        }
        if fits {
            return Ok((center, radii));
        }
    }
    Err(Error::config(format!(
        "synthetic volume {pair}: lesion of radii {radii:?} cannot fit inside the phantom"
    )))
}
