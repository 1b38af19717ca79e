use super::*;

fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
}

/// Minimal P6 reader for render checks.
fn read_p6(path: &std::path::Path) -> (usize, usize, Vec<u8>) {
    let bytes = std::fs::read(path).unwrap();
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .unwrap();
    let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
    let mut lines = header.lines();
    assert_eq!(lines.next().unwrap(), "P6");
    let mut dims = lines.next().unwrap().split_whitespace();
    let w: usize = dims.next().unwrap().parse().unwrap();
    let h: usize = dims.next().unwrap().parse().unwrap();
    assert_eq!(lines.next().unwrap(), "255");
    (w, h, bytes[header_end + 1..].to_vec())
}

#[test]
fn constant_model_yields_an_all_zero_map() {
    let v = Volume::new((8, 8, 8), (1.0, 1.0, 1.0), vec![0.5; 512]).unwrap();
    let constant = |_: &Volume| Ok(0.7);
    let map = occlusion_map(&constant, &v, &OsmConfig {
        patch: 4,
        stride: 2,
        fill_value: 0.0,
    })
    .unwrap();
    assert!(map.voxels.iter().all(|x| *x == 0.0));
    assert_eq!(map.voxels.iter().map(|x| x.abs()).sum::<f32>(), 0.0);
}

#[test]
fn octant_mean_model_localizes_importance_exactly() {
    // volume 16^3 with value 0.8 inside the octant [0, 8)^3; the model
    // reports the mean intensity over that octant, so each occlusion's
    // effect has a closed form
    let mut v = Volume::zeros((16, 16, 16));
    for z in 0..8 {
        for y in 0..8 {
            for x in 0..8 {
                let idx = v.index(x, y, z);
                v.voxels[idx] = 0.8;
            }
        }
    }
    let octant_mean = |vol: &Volume| {
        let mut acc = 0.0f64;
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    acc += f64::from(vol.at(x, y, z));
                }
            }
        }
        Ok(acc / 512.0)
    };
    // patch 8 / stride 8: each placement is either the whole octant or
    // disjoint from it
    let map = occlusion_map(&octant_mean, &v, &OsmConfig {
        patch: 8,
        stride: 8,
        fill_value: 0.0,
    })
    .unwrap();
    for z in 0..16 {
        for y in 0..16 {
            for x in 0..16 {
                let val = f64::from(map.at(x, y, z));
                if x < 8 && y < 8 && z < 8 {
                    assert_close(val, 0.8, 1e-6);
                } else {
                    assert_eq!(val, 0.0, "voxel ({x},{y},{z})");
                }
            }
        }
    }
    let (inside, outside) = box_importance(&map, [0, 0, 0, 8, 8, 8]);
    assert_close(inside, 0.8, 1e-6);
    assert_eq!(outside, 0.0);
}

#[test]
fn full_volume_patch_gives_a_uniform_map() {
    let v = Volume::new((6, 6, 6), (1.0, 1.0, 1.0), vec![0.4; 216]).unwrap();
    let mean_all = |vol: &Volume| {
        Ok(vol.voxels.iter().map(|x| f64::from(*x)).sum::<f64>() / vol.len() as f64)
    };
    let map = occlusion_map(&mean_all, &v, &OsmConfig {
        patch: 6,
        stride: 3,
        fill_value: 0.1,
    })
    .unwrap();
    // single placement: importance = s0 - score(filled volume) = 0.4 - 0.1
    for val in &map.voxels {
        assert_close(f64::from(*val), 0.3, 1e-6);
    }
}

#[test]
fn occlusion_map_is_deterministic_and_covers_awkward_strides() {
    // extent 10, patch 4, stride 3: starts 0, 3, 6 (last is flush)
    assert_eq!(axis_starts(10, 4, 3), vec![0, 3, 6]);
    let v = Volume::new(
        (10, 10, 10),
        (1.0, 1.0, 1.0),
        (0..1000).map(|i| (i % 13) as f32 / 13.0).collect(),
    )
    .unwrap();
    let mean_all = |vol: &Volume| {
        Ok(vol.voxels.iter().map(|x| f64::from(*x)).sum::<f64>() / vol.len() as f64)
    };
    let cfg = OsmConfig {
        patch: 4,
        stride: 3,
        fill_value: 0.0,
    };
    let a = occlusion_map(&mean_all, &v, &cfg).unwrap();
    let b = occlusion_map(&mean_all, &v, &cfg).unwrap();
    assert_eq!(a.voxels, b.voxels);
    assert!(a.voxels.iter().map(|x| x.abs()).sum::<f32>() > 0.0);
}

#[test]
fn invalid_osm_configs_are_rejected() {
    let v = Volume::zeros((8, 8, 8));
    let f = |_: &Volume| Ok(0.5);
    let bad_patch = OsmConfig {
        patch: 9,
        stride: 1,
        fill_value: 0.0,
    };
    assert!(occlusion_map(&f, &v, &bad_patch).is_err());
    let bad_stride = OsmConfig {
        patch: 4,
        stride: 5,
        fill_value: 0.0,
    };
    assert!(occlusion_map(&f, &v, &bad_stride).is_err());
}

#[test]
fn zero_importance_renders_the_underlay_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut underlay = Volume::zeros((6, 5, 4));
    for (i, v) in underlay.voxels.iter_mut().enumerate() {
        *v = (i % 7) as f32 / 7.0;
    }
    let importance = Volume::zeros((6, 5, 4));
    let path = dir.path().join("slice.ppm");
    render_slice(&importance, &underlay, Axis::Z, 2, &path).unwrap();
    let (w, h, pixels) = read_p6(&path);
    assert_eq!((w, h), (6, 5));
    for (i, px) in pixels.chunks(3).enumerate() {
        let (u, q) = (i % 6, i / 6);
        let gray = (underlay.at(u, q, 2).clamp(0.0, 1.0) * 255.0) as u8;
        assert_eq!(px, [gray, gray, gray], "pixel ({u},{q})");
    }
}

#[test]
fn importance_spike_tints_exactly_one_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let underlay = Volume::new((8, 8, 8), (1.0, 1.0, 1.0), vec![0.5; 512]).unwrap();
    let mut importance = Volume::zeros((8, 8, 8));
    let idx = importance.index(3, 5, 2);
    importance.voxels[idx] = 1.0;
    let path = dir.path().join("spike.ppm");
    render_slice(&importance, &underlay, Axis::Z, 2, &path).unwrap();
    let (w, _, pixels) = read_p6(&path);
    let gray = (0.5f32 * 255.0) as u8;
    let mut tinted = Vec::new();
    for (i, px) in pixels.chunks(3).enumerate() {
        if px != [gray, gray, gray] {
            tinted.push((i % w, i / w, [px[0], px[1], px[2]]));
        }
    }
    assert_eq!(tinted.len(), 1);
    assert_eq!((tinted[0].0, tinted[0].1), (3, 5));
    // positive importance tints toward blue
    let [r, _, b] = tinted[0].2;
    assert!(b > r);
}

#[test]
fn slice_index_is_bounds_checked() {
    let v = Volume::zeros((4, 4, 4));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("oob.ppm");
    assert!(render_slice(&v, &v, Axis::X, 4, &path).is_err());
}
