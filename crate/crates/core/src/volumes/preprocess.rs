use super::{grid_iter, LabelMap, Shape3, Volume};
use crate::error::{Error, Result};

/// Min-max rescale to `[0, 1]`. A constant volume maps to all zeros.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    v.check_finite()?;
    let (lo, hi) = v
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if hi <= lo {
        return Ok(Volume::zeros(v.shape()));
    }
    let range = hi - lo;
    let data = v.data().iter().map(|&x| ((x - lo) / range).clamp(0.0, 1.0)).collect();
    Volume::new(v.shape(), data)
}

fn center_of_mass(v: &Volume, name: &'static str) -> Result<[f64; 3]> {
    let mut total = 0.0f64;
    let mut acc = [0.0f64; 3];
    for (i, p) in grid_iter(v.shape()) {
        let m = v.data()[i] as f64;
        total += m;
        for a in 0..3 {
            acc[a] += m * p[a] as f64;
        }
    }
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::ZeroMass(name));
    }
    Ok(acc.map(|s| s / total))
}

/// Integer shift that moves the intensity centroid of `moving` onto that of
/// `fixed`, rounded to the nearest voxel.
pub fn com_shift(fixed: &Volume, moving: &Volume) -> Result<[i64; 3]> {
    let cf = center_of_mass(fixed, "fixed")?;
    let cm = center_of_mass(moving, "moving")?;
    Ok([0, 1, 2].map(|a| (cf[a] - cm[a]).round() as i64))
}

/// Source voxel of `p` when reading at `p + offset`, if inside `shape`.
fn source(p: [usize; 3], offset: [i64; 3], shape: Shape3) -> Option<[usize; 3]> {
    let mut src = [0usize; 3];
    for a in 0..3 {
        let s = p[a] as i64 + offset[a];
        if s < 0 || s >= shape[a] as i64 {
            return None;
        }
        src[a] = s as usize;
    }
    Some(src)
}

/// `out(p) = v(p - shift)`, zero outside the source grid.
pub fn shift_volume(v: &Volume, shift: [i64; 3]) -> Volume {
    let offset = shift.map(|s| -s);
    Volume::from_fn(v.shape(), |p| source(p, offset, v.shape()).map_or(0.0, |[x, y, z]| v.get(x, y, z)))
}

/// Label counterpart of [`shift_volume`]; background fills the border.
pub fn shift_labels(l: &LabelMap, shift: [i64; 3]) -> LabelMap {
    let offset = shift.map(|s| -s);
    LabelMap::from_fn(l.shape(), |p| source(p, offset, l.shape()).map_or(0, |[x, y, z]| l.get(x, y, z)))
}

/// Translate `moving` by whole voxels so its center of mass lands on the
/// center of mass of `fixed`.
pub fn com_initialize(fixed: &Volume, moving: &Volume) -> Result<Volume> {
    let shift = com_shift(fixed, moving)?;
    Ok(shift_volume(moving, shift))
}

// source index = target index + offset (offset < 0 means padding)
fn crop_offset(shape: Shape3, target: Shape3) -> [i64; 3] {
    assert!(target.iter().all(|&n| n > 0), "empty target shape {target:?}");
    [0, 1, 2].map(|a| {
        let (n, t) = (shape[a] as i64, target[a] as i64);
        if t <= n {
            (n - t) / 2
        } else {
            -((t - n) / 2)
        }
    })
}

/// Center-aligned crop and/or symmetric zero padding to `target`.
pub fn crop_or_pad(v: &Volume, target: Shape3) -> Volume {
    let offset = crop_offset(v.shape(), target);
    Volume::from_fn(target, |p| source(p, offset, v.shape()).map_or(0.0, |[x, y, z]| v.get(x, y, z)))
}

/// Label counterpart of [`crop_or_pad`].
pub fn crop_or_pad_labels(l: &LabelMap, target: Shape3) -> LabelMap {
    let offset = crop_offset(l.shape(), target);
    LabelMap::from_fn(target, |p| source(p, offset, l.shape()).map_or(0, |[x, y, z]| l.get(x, y, z)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blob(shape: Shape3, center: [f64; 3]) -> Volume {
        Volume::from_fn(shape, |p| {
            let r2: f64 = (0..3).map(|a| (p[a] as f64 - center[a]).powi(2)).sum();
            (-r2 / 8.0).exp() as f32
        })
    }

    #[test]
    fn normalize_known_values() {
        let v = Volume::new([3, 1, 1], vec![0.0, 5.0, 10.0]).unwrap();
        assert_eq!(normalize_intensity(&v).unwrap().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_constant_is_zero() {
        let v = Volume::filled([2, 3, 4], 7.5);
        assert!(normalize_intensity(&v).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_unit_range_is_identity() {
        let v = Volume::new([4, 1, 1], vec![0.0, 0.25, 0.7, 1.0]).unwrap();
        assert_eq!(normalize_intensity(&v).unwrap(), v);
    }

    #[test]
    fn normalize_rejects_nan() {
        let v = Volume::new([2, 1, 1], vec![0.0, f32::NAN]).unwrap();
        assert!(matches!(normalize_intensity(&v), Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn com_identical_is_noop() {
        let f = blob([12, 12, 12], [5.0, 6.0, 7.0]);
        assert_eq!(com_shift(&f, &f).unwrap(), [0, 0, 0]);
        assert_eq!(com_initialize(&f, &f).unwrap(), f);
    }

    #[test]
    fn com_recovers_integer_shift() {
        let f = blob([24, 12, 12], [9.0, 6.0, 5.5]);
        let m = shift_volume(&f, [3, 0, 0]);
        // brute-force centroids of both arrays
        let centroid = |v: &Volume| {
            let mut acc = [0.0f64; 4];
            for (i, p) in grid_iter(v.shape()) {
                let w = v.data()[i] as f64;
                acc[0] += w * p[0] as f64;
                acc[1] += w * p[1] as f64;
                acc[2] += w * p[2] as f64;
                acc[3] += w;
            }
            [acc[0] / acc[3], acc[1] / acc[3], acc[2] / acc[3]]
        };
        let (cf, cm) = (centroid(&f), centroid(&m));
        assert!((cm[0] - cf[0] - 3.0).abs() < 1e-3);
        assert_eq!(com_shift(&f, &m).unwrap(), [-3, 0, 0]);
        let aligned = com_initialize(&f, &m).unwrap();
        assert_eq!(com_shift(&f, &aligned).unwrap(), [0, 0, 0]);
    }

    #[test]
    fn com_rejects_empty_moving() {
        let f = blob([8, 8, 8], [4.0, 4.0, 4.0]);
        let m = Volume::zeros([8, 8, 8]);
        assert!(matches!(com_initialize(&f, &m), Err(Error::ZeroMass("moving"))));
    }

    #[test]
    fn crop_keeps_central_block() {
        let v = Volume::from_fn([10, 10, 10], |p| (p[0] * 100 + p[1] * 10 + p[2]) as f32);
        let c = crop_or_pad(&v, [8, 8, 8]);
        assert_eq!(c.shape(), [8, 8, 8]);
        for (i, p) in grid_iter([8, 8, 8]) {
            assert_eq!(c.data()[i], v.get(p[0] + 1, p[1] + 1, p[2] + 1));
        }
    }

    #[test]
    fn crop_to_same_shape_is_identity() {
        let v = blob([5, 6, 7], [2.0, 3.0, 3.0]);
        assert_eq!(crop_or_pad(&v, v.shape()), v);
    }

    proptest! {
        #[test]
        fn pad_then_crop_restores(d in 1usize..7, h in 1usize..7, w in 1usize..7,
                                  pd in 0usize..4, ph in 0usize..4, pw in 0usize..4,
                                  seed in 0u32..1000) {
            let v = Volume::from_fn([d, h, w], |p| ((p[0] * 31 + p[1] * 7 + p[2]) as u32 ^ seed) as f32);
            let big = crop_or_pad(&v, [d + pd, h + ph, w + pw]);
            prop_assert_eq!(crop_or_pad(&big, [d, h, w]), v);
        }

        #[test]
        fn normalize_is_idempotent(vals in proptest::collection::vec(-50.0f32..50.0, 8)) {
            let v = Volume::new([2, 2, 2], vals).unwrap();
            let once = normalize_intensity(&v).unwrap();
            let twice = normalize_intensity(&once).unwrap();
            let max = once.data().iter().cloned().fold(0.0f32, f32::max);
            prop_assert!(once.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            if max > 0.0 {
                prop_assert_eq!(once, twice);
            }
        }
    }

    #[test]
    fn labels_follow_volume_geometry() {
        let v = Volume::from_fn([5, 6, 7], |p| (p[0] * 100 + p[1] * 10 + p[2] + 1) as f32);
        let l = LabelMap::from_fn([5, 6, 7], |p| (p[0] * 100 + p[1] * 10 + p[2] + 1) as u32);
        let as_labels = |v: &Volume| v.data().iter().map(|&x| x as u32).collect::<Vec<_>>();
        assert_eq!(as_labels(&shift_volume(&v, [1, -2, 0])), shift_labels(&l, [1, -2, 0]).data());
        assert_eq!(as_labels(&crop_or_pad(&v, [3, 8, 7])), crop_or_pad_labels(&l, [3, 8, 7]).data());
    }
}
