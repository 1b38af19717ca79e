use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn assert_close(a: f32, b: f32, tol: f32) {
    assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
}

// -- windowing ---------------------------------------------------------------

#[test]
fn window_maps_midpoint_and_clamps() {
    let v = Volume::new((2, 2, 1), (1.0, 1.0, 1.0), vec![40.0, -100.0, 200.0, 20.0]).unwrap();
    let w = WindowSpec::default(); // WW 80, WL 40 -> pass band [0, 80]
    let out = window_hu(&v, &w).unwrap();
    assert_close(out.voxels[0], 0.5, 1e-7);
    assert_close(out.voxels[1], 0.0, 0.0);
    assert_close(out.voxels[2], 1.0, 0.0);
    assert_close(out.voxels[3], 0.25, 1e-7);
}

#[test]
fn window_is_monotone_and_idempotent_after_rescale() {
    let w = WindowSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut hus: Vec<f32> = (0..64).map(|_| rng.gen_range(-500.0..500.0)).collect();
    hus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let v = Volume::new((4, 4, 4), (1.0, 1.0, 1.0), hus).unwrap();
    let out = window_hu(&v, &w).unwrap();
    for pair in out.voxels.windows(2) {
        assert!(pair[0] <= pair[1], "windowing must be monotone");
    }
    // rescale [0,1] back to the HU pass band and window again
    let lo = w.level_hu - w.width_hu / 2.0;
    let rescaled = Volume::new(
        v.dims,
        v.spacing_mm,
        out.voxels.iter().map(|y| lo + y * w.width_hu).collect(),
    )
    .unwrap();
    let again = window_hu(&rescaled, &w).unwrap();
    for (a, b) in again.voxels.iter().zip(&out.voxels) {
        assert_close(*a, *b, 1e-6);
    }
}

// -- resampling --------------------------------------------------------------

#[test]
fn unit_zoom_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let voxels: Vec<f32> = (0..4 * 4 * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
    let v = Volume::new((4, 4, 4), (1.0, 1.0, 1.0), voxels.clone()).unwrap();
    let out = siz_resample(&v, (4, 4, 4)).unwrap();
    for (a, b) in out.voxels.iter().zip(&voxels) {
        assert_close(*a, *b, 1e-6);
    }
}

#[test]
fn constants_resample_to_the_same_constant() {
    let v = Volume::new((5, 6, 7), (1.0, 1.0, 1.0), vec![0.7; 5 * 6 * 7]).unwrap();
    let out = siz_resample(&v, (9, 3, 12)).unwrap();
    assert_eq!(out.dims, (9, 3, 12));
    for val in &out.voxels {
        assert_close(*val, 0.7, 1e-6);
    }
}

#[test]
fn linear_ramp_is_preserved_at_sampled_positions() {
    // value = z index, dz 8 -> 4; sampled source coords are i * 7/3
    let (dx, dy, dz) = (4, 4, 8);
    let mut voxels = vec![0.0f32; dx * dy * dz];
    for z in 0..dz {
        for i in 0..dx * dy {
            voxels[z * dx * dy + i] = z as f32;
        }
    }
    let v = Volume::new((dx, dy, dz), (1.0, 1.0, 1.0), voxels).unwrap();
    let out = siz_resample(&v, (dx, dy, 4)).unwrap();
    for (zi, expect) in [0.0f32, 7.0 / 3.0, 14.0 / 3.0, 7.0].iter().enumerate() {
        for i in 0..dx * dy {
            assert_close(out.voxels[zi * dx * dy + i], *expect, 1e-3);
        }
    }
    // spacing rescaled by inverse zoom
    assert_close(out.spacing_mm.2, 2.0, 1e-6);
}

#[test]
fn smooth_volumes_keep_their_range_within_five_percent() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let dims = (8usize, 7usize, 6usize);
        let freq: Vec<f64> = (0..9).map(|_| rng.gen_range(0.3..1.2)).collect();
        let mut voxels = Vec::with_capacity(dims.0 * dims.1 * dims.2);
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    let mut acc = 0.0f64;
                    for m in 0..3 {
                        acc += ((x as f64) * freq[3 * m]
                            + (y as f64) * freq[3 * m + 1]
                            + (z as f64) * freq[3 * m + 2])
                            .sin();
                    }
                    voxels.push((0.5 + acc / 6.0) as f32);
                }
            }
        }
        let v = Volume::new(dims, (1.0, 1.0, 1.0), voxels).unwrap();
        let (lo, hi) = min_max(&v.voxels);
        let tol = 0.05 * (hi - lo);
        let out = siz_resample(&v, (13, 11, 9)).unwrap();
        let (olo, ohi) = min_max(&out.voxels);
        assert!(olo >= lo - tol, "seed {seed}: min {olo} below {lo} - {tol}");
        assert!(ohi <= hi + tol, "seed {seed}: max {ohi} above {hi} + {tol}");
    }
}

fn min_max(vals: &[f32]) -> (f32, f32) {
    vals.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        })
}

#[test]
fn resample_rejects_degenerate_axes() {
    let v = Volume::new((1, 4, 4), (1.0, 1.0, 1.0), vec![0.0; 16]).unwrap();
    assert!(siz_resample(&v, (4, 4, 4)).is_err());
    let ok = Volume::new((4, 4, 4), (1.0, 1.0, 1.0), vec![0.0; 64]).unwrap();
    assert!(siz_resample(&ok, (4, 4, 1)).is_err());
}

// -- background stripping ----------------------------------------------------

#[test]
fn single_component_is_unchanged() {
    let mut v = Volume::zeros((8, 8, 8));
    for z in 2..6 {
        for y in 2..6 {
            for x in 2..6 {
                let idx = v.index(x, y, z);
                v.voxels[idx] = 0.5 + (x as f32) * 0.01;
            }
        }
    }
    let original = v.clone();
    let out = strip_background(&v, 0.05).unwrap();
    assert_eq!(out.voxels, original.voxels);
}

#[test]
fn smaller_corner_blob_is_zeroed() {
    // build a 10x10x10 blob (1000 voxels) and a separate corner blob with
    // fewer voxels, then verify against the constructive expectation
    let mut v = Volume::zeros((16, 16, 16));
    let mut in_large = vec![false; v.len()];
    for z in 3..13 {
        for y in 3..13 {
            for x in 3..13 {
                let idx = v.index(x, y, z);
                v.voxels[idx] = 0.6;
                in_large[idx] = true;
            }
        }
    }
    for z in 0..2 {
        for y in 0..2 {
            for x in 0..2 {
                let idx = v.index(x, y, z);
                v.voxels[idx] = 0.9;
            }
        }
    }
    let out = strip_background(&v, 0.05).unwrap();
    for idx in 0..v.len() {
        if in_large[idx] {
            assert_eq!(out.voxels[idx], 0.6, "large blob voxel {idx} kept");
        } else {
            assert_eq!(out.voxels[idx], 0.0, "voxel {idx} zeroed");
        }
        assert!(out.voxels[idx] <= v.voxels[idx], "never increases");
    }
}

#[test]
fn empty_foreground_returns_zero_volume() {
    let v = Volume::new((4, 4, 4), (1.0, 1.0, 1.0), vec![0.01; 64]).unwrap();
    let out = strip_background(&v, 0.05).unwrap();
    assert!(out.voxels.iter().all(|x| *x == 0.0));
}

#[test]
fn diagonal_touch_is_not_connected() {
    // 6-connectivity: voxels sharing only an edge/corner are separate
    let mut v = Volume::zeros((4, 4, 4));
    let a = v.index(0, 0, 0);
    let b = v.index(1, 1, 0);
    let c = v.index(1, 0, 1);
    v.voxels[a] = 0.9;
    v.voxels[b] = 0.5;
    v.voxels[c] = 0.5;
    let out = strip_background(&v, 0.1).unwrap();
    // three singleton components; the first in scan order wins ties
    assert_eq!(out.voxels.iter().filter(|x| **x > 0.0).count(), 1);
    assert_eq!(out.voxels[a], 0.9);
}

// -- VVOL format -------------------------------------------------------------

#[test]
fn vvol_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let voxels: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v = Volume::new((4, 4, 4), (0.5, 1.0, 2.0), voxels).unwrap();

    let p1 = dir.path().join("a.vvol");
    let p2 = dir.path().join("b.vvol");
    write_vvol(&v, &p1).unwrap();
    let loaded = read_vvol(&p1).unwrap();
    write_vvol(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(loaded, v);
}

#[test]
fn vvol_rejects_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.vvol");
    let mut bytes = b"XXXX".to_vec();
    bytes.extend(1u32.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    match read_vvol(&path) {
        Err(Error::Format { field, message }) => {
            assert_eq!(field, "magic");
            assert!(message.contains("bad magic"), "{message}");
        }
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn vvol_rejects_truncated_payload() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.vvol");
    let v = Volume::new((2, 2, 2), (1.0, 1.0, 1.0), vec![0.0; 8]).unwrap();
    write_vvol(&v, &path).unwrap();
    let full = std::fs::read(&path).unwrap();
    // header dims say 2x2x2 (8 floats) but only 7 remain
    std::fs::write(&path, &full[..full.len() - 4]).unwrap();
    match read_vvol(&path) {
        Err(Error::Format { field, message }) => {
            assert_eq!(field, "payload");
            assert!(message.contains("truncated"), "{message}");
        }
        other => panic!("expected truncation error, got {other:?}"),
    }
}

#[test]
fn vvol_rejects_bad_version_and_dtype() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.vvol");
    let v = Volume::new((2, 2, 2), (1.0, 1.0, 1.0), vec![0.0; 8]).unwrap();
    write_vvol(&v, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 9; // version
    std::fs::write(&path, &bytes).unwrap();
    match read_vvol(&path) {
        Err(Error::Format { field, .. }) => assert_eq!(field, "version"),
        other => panic!("expected version error, got {other:?}"),
    }

    write_vvol(&v, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[32] = 7; // dtype code
    std::fs::write(&path, &bytes).unwrap();
    match read_vvol(&path) {
        Err(Error::Format { field, .. }) => assert_eq!(field, "dtype"),
        other => panic!("expected dtype error, got {other:?}"),
    }
}

// -- synthetic generator -----------------------------------------------------

#[test]
fn synthetic_generation_is_deterministic() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::new(3, (16, 16, 16), 7);
    generate_synthetic(&cfg, d1.path()).unwrap();
    generate_synthetic(&cfg, d2.path()).unwrap();
    for i in 0..3 {
        for c in 0..2 {
            let name = format!("vol_{i:04}_c{c}.vvol");
            let a = std::fs::read(d1.path().join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }
}

#[test]
fn lesion_difference_is_confined_to_the_recorded_box() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::new(4, (20, 18, 16), 13);
    let manifest = generate_synthetic(&cfg, dir.path()).unwrap();
    for pair in 0..4 {
        let normal = read_vvol(&manifest.resolve(&manifest.entries[2 * pair])).unwrap();
        let lesioned = read_vvol(&manifest.resolve(&manifest.entries[2 * pair + 1])).unwrap();
        let bbox = manifest.entries[2 * pair + 1].lesion_box.unwrap();
        let mut nonzero_inside = 0;
        for z in 0..16 {
            for y in 0..18 {
                for x in 0..20 {
                    let idx = normal.index(x, y, z);
                    let diff = lesioned.voxels[idx] - normal.voxels[idx];
                    let inside = x >= bbox[0]
                        && x < bbox[3]
                        && y >= bbox[1]
                        && y < bbox[4]
                        && z >= bbox[2]
                        && z < bbox[5];
                    if diff != 0.0 {
                        assert!(inside, "difference at ({x},{y},{z}) outside {bbox:?}");
                        assert!(diff > 0.0, "lesion must be hyper-intense");
                        nonzero_inside += 1;
                    }
                }
            }
        }
        assert!(nonzero_inside > 0, "pair {pair} has an empty lesion");
    }
}

#[test]
fn synthetic_manifest_counts_and_balance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::new(100, (16, 16, 16), 7);
    let manifest = generate_synthetic(&cfg, dir.path()).unwrap();
    assert_eq!(manifest.entries.len(), 200);
    let ones = manifest.entries.iter().filter(|e| e.label == 1).count();
    assert_eq!(ones, 100);
    // round-robin fold deal balances classes per fold
    for fold in 0..manifest.k_folds {
        let zeros = manifest
            .entries
            .iter()
            .filter(|e| e.fold == fold && e.label == 0)
            .count();
        let ones = manifest
            .entries
            .iter()
            .filter(|e| e.fold == fold && e.label == 1)
            .count();
        assert_eq!(zeros, 20);
        assert_eq!(ones, 20);
    }
    // manifest reload roundtrip
    let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.entries.len(), 200);
    assert_eq!(loaded.k_folds, 5);
}

#[test]
fn synthetic_rejects_small_dims() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::new(1, (8, 16, 16), 7);
    assert!(generate_synthetic(&cfg, dir.path()).is_err());
}
