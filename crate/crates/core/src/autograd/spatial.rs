//! Resolution changes and field operations on channels-last grids.

use super::{BackwardFn, Graph, Tensor, Var};
use crate::field_algebra::{
    affine_residual_backward, affine_residual_field, upsample_channels, upsample_channels_adjoint,
    warp_channels, warp_channels_backward,
};
use crate::volumes::Shape3;

fn sub_index(dx: usize, dy: usize, dz: usize) -> usize {
    (dx * 2 + dy) * 2 + dz
}

/// Rearrange `[D, H, W, 8c]` into `[2D, 2H, 2W, c]` and crop to `target`.
/// Channel block `((dx·2 + dy)·2 + dz)` feeds sub-voxel `(dx, dy, dz)`.
pub fn pixel_shuffle(g: &Graph, x: &Var, target: Shape3) -> Var {
    let [d, h, w] = x.value().spatial();
    let c8 = x.value().channels();
    assert_eq!(c8 % 8, 0, "pixel_shuffle needs a multiple of 8 channels, got {c8}");
    let c = c8 / 8;
    for (t, n) in target.iter().zip([d, h, w]) {
        assert!(*t <= 2 * n, "pixel_shuffle target {target:?} exceeds ×2 of {:?}", [d, h, w]);
    }
    let [t0, t1, t2] = target;
    // out flat offset -> source flat offset, row by row
    let src_of = move |o: [usize; 3]| {
        let s = ((o[0] / 2 * h + o[1] / 2) * w + o[2] / 2) * c8;
        s + sub_index(o[0] % 2, o[1] % 2, o[2] % 2) * c
    };
    let src = x.value().data();
    let mut out = Vec::with_capacity(t0 * t1 * t2 * c);
    for a in 0..t0 {
        for b in 0..t1 {
            for e in 0..t2 {
                let s = src_of([a, b, e]);
                out.extend_from_slice(&src[s..s + c]);
            }
        }
    }
    let in_shape = x.shape().to_vec();
    g.record(Tensor::new(vec![t0, t1, t2, c], out), &[x], move || {
        Box::new(move |grad: &Tensor, _: &[bool]| {
            let mut dx = vec![0f32; in_shape.iter().product()];
            let gd = grad.data();
            let mut k = 0;
            for a in 0..t0 {
                for b in 0..t1 {
                    for e in 0..t2 {
                        let s = src_of([a, b, e]);
                        dx[s..s + c].copy_from_slice(&gd[k..k + c]);
                        k += c;
                    }
                }
            }
            vec![Some(Tensor::new(in_shape, dx))]
        }) as BackwardFn
    })
}

/// Mean over all spatial positions: `[D, H, W, C]` to `[C]`.
pub fn global_avg_pool(g: &Graph, x: &Var) -> Var {
    let c = x.value().channels();
    let n = x.value().len() / c;
    let mut acc = vec![0f64; c];
    for row in x.value().data().chunks_exact(c) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v as f64;
        }
    }
    let out = acc.iter().map(|s| (s / n as f64) as f32).collect();
    let in_shape = x.shape().to_vec();
    g.record(Tensor::new(vec![c], out), &[x], move || {
        Box::new(move |grad: &Tensor, _: &[bool]| {
            let scaled: Vec<f32> = grad.data().iter().map(|v| v / n as f32).collect();
            let mut dx = Vec::with_capacity(n * c);
            for _ in 0..n {
                dx.extend_from_slice(&scaled);
            }
            vec![Some(Tensor::new(in_shape, dx))]
        }) as BackwardFn
    })
}

/// Dense displacement `[D, H, W, 3]` of a 12-value affine residual.
pub fn affine_field(g: &Graph, residual: &Var, shape: Shape3) -> Var {
    assert_eq!(residual.value().len(), 12, "affine residual must have 12 values");
    let out = affine_residual_field(residual.value().data(), shape);
    let rshape = residual.shape().to_vec();
    g.record(Tensor::new(vec![shape[0], shape[1], shape[2], 3], out), &[residual], move || {
        Box::new(move |grad: &Tensor, _: &[bool]| {
            vec![Some(Tensor::new(rshape, affine_residual_backward(grad.data(), shape)))]
        }) as BackwardFn
    })
}

/// ×2 trilinear upsampling of a channels-last grid, cropped to `target`,
/// with values multiplied by `scale` (2 for displacement fields).
pub fn upsample(g: &Graph, x: &Var, target: Shape3, scale: f32) -> Var {
    let shape = x.value().spatial();
    let c = x.value().channels();
    let out = upsample_channels(x.value().data(), shape, c, target, scale);
    g.record(Tensor::new(vec![target[0], target[1], target[2], c], out), &[x], move || {
        Box::new(move |grad: &Tensor, _: &[bool]| {
            let d = upsample_channels_adjoint(grad.data(), shape, c, target, scale);
            vec![Some(Tensor::new(vec![shape[0], shape[1], shape[2], c], d))]
        }) as BackwardFn
    })
}

/// Trilinear warp `out(p) = src(p + u(p))` of a channels-last grid.
pub fn warp(g: &Graph, src: &Var, field: &Var) -> Var {
    let shape = src.value().spatial();
    let c = src.value().channels();
    assert_eq!(field.shape(), &[shape[0], shape[1], shape[2], 3], "warp: field shape");
    let out = warp_channels(src.value().data(), shape, c, field.value().data());
    let (s, f) = (src.shared(), field.shared());
    g.record(Tensor::new(src.shape().to_vec(), out), &[src, field], move || {
        Box::new(move |grad: &Tensor, needs: &[bool]| {
            let (ds, df) = warp_channels_backward(s.data(), shape, c, f.data(), grad.data(), needs[0], needs[1]);
            vec![
                ds.map(|v| Tensor::new(s.shape().to_vec(), v)),
                df.map(|v| Tensor::new(f.shape().to_vec(), v)),
            ]
        }) as BackwardFn
    })
}
