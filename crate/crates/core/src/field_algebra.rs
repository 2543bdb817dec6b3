//! Displacement fields, affine transforms and the deterministic math on
//! them: sampling an affine as a dense field, warping, ×2 upsampling,
//! additive composition and Jacobian determinants.
//!
//! Fields are stored in voxel units of their own grid, interleaved per voxel
//! as `(u0, u1, u2)` where component `a` displaces along array axis `a`.
//! A field maps voxel `p` to `p + u(p)`.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{grid_iter, voxel_count, LabelMap, Shape3, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    shape: Shape3,
    data: Vec<f32>,
}

impl DisplacementField {
    pub fn new(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if data.len() != voxel_count(shape) * 3 {
            return Err(Error::shape(&[voxel_count(shape) * 3], &[data.len()]));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![0.0; voxel_count(shape) * 3],
        }
    }

    pub fn constant(shape: Shape3, u: [f32; 3]) -> Self {
        Self::from_fn(shape, |_| u)
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut([usize; 3]) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(voxel_count(shape) * 3);
        for (_, p) in grid_iter(shape) {
            data.extend_from_slice(&f(p));
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        let i = crate::volumes::flat_index(self.shape, x, y, z) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn max_norm(&self) -> f32 {
        self.data
            .chunks_exact(3)
            .map(|u| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt())
            .fold(0.0, f32::max)
    }

    pub(crate) fn from_raw(shape: Shape3, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), voxel_count(shape) * 3);
        Self { shape, data }
    }
}

/// A 3×4 matrix `[A | b]` acting on voxel coordinates measured from the
/// grid center `((D-1)/2, (H-1)/2, (W-1)/2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: [[f64; 4]; 3],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self::from_parts([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3])
    }

    pub fn from_parts(linear: [[f64; 3]; 3], translation: [f64; 3]) -> Self {
        let mut matrix = [[0.0; 4]; 3];
        for i in 0..3 {
            matrix[i][..3].copy_from_slice(&linear[i]);
            matrix[i][3] = translation[i];
        }
        Self { matrix }
    }

    pub fn translation(b: [f64; 3]) -> Self {
        let mut t = Self::identity();
        for i in 0..3 {
            t.matrix[i][3] = b[i];
        }
        t
    }

    pub fn scaling(s: f64) -> Self {
        Self::from_parts([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]], [0.0; 3])
    }

    /// Build `[I + delta_linear | b]` from 12 row-major residual values.
    pub fn from_residual(values: &[f32]) -> Self {
        assert_eq!(values.len(), 12, "affine residual needs 12 values");
        let mut t = Self::identity();
        for i in 0..3 {
            for j in 0..4 {
                t.matrix[i][j] += values[i * 4 + j] as f64;
            }
        }
        t
    }

    pub fn linear(&self) -> [[f64; 3]; 3] {
        [0, 1, 2].map(|i| [self.matrix[i][0], self.matrix[i][1], self.matrix[i][2]])
    }

    pub fn offset(&self) -> [f64; 3] {
        [self.matrix[0][3], self.matrix[1][3], self.matrix[2][3]]
    }

    pub fn determinant(&self) -> f64 {
        det3(self.linear())
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let (a, b) = (self.linear(), other.linear());
        let mut linear = [[0.0; 3]; 3];
        let mut offset = self.offset();
        for i in 0..3 {
            for j in 0..3 {
                linear[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
                offset[i] += a[i][j] * other.matrix[j][3];
            }
        }
        Self::from_parts(linear, offset)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| (0..3).map(|j| self.matrix[i][j] * p[j]).sum::<f64>() + self.matrix[i][3])
    }
}

pub(crate) fn det3<T: Float>(m: [[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub(crate) fn grid_center(shape: Shape3) -> [f64; 3] {
    shape.map(|n| (n as f64 - 1.0) / 2.0)
}

/// `u(p) = A·p_c + b − p_c` with `p_c` the centered voxel coordinate.
pub fn affine_to_field(t: &AffineTransform, shape: Shape3) -> DisplacementField {
    let mut residual = [0f32; 12];
    for i in 0..3 {
        for j in 0..4 {
            let identity = if i == j { 1.0 } else { 0.0 };
            residual[i * 4 + j] = (t.matrix[i][j] - identity) as f32;
        }
    }
    DisplacementField::from_raw(shape, affine_residual_field(&residual, shape))
}

/// Dense field of a row-major `[ΔA | b]` residual.
pub(crate) fn affine_residual_field(residual: &[f32], shape: Shape3) -> Vec<f32> {
    let c = grid_center(shape);
    let mut out = Vec::with_capacity(voxel_count(shape) * 3);
    for (_, p) in grid_iter(shape) {
        let pc = [0, 1, 2].map(|a| (p[a] as f64 - c[a]) as f32);
        for i in 0..3 {
            let r = &residual[i * 4..i * 4 + 4];
            out.push(r[0] * pc[0] + r[1] * pc[1] + r[2] * pc[2] + r[3]);
        }
    }
    out
}

/// Gradient of [`affine_residual_field`] with respect to its 12 inputs.
pub(crate) fn affine_residual_backward(grad_field: &[f32], shape: Shape3) -> Vec<f32> {
    let c = grid_center(shape);
    let mut acc = [0f64; 12];
    for (i, p) in grid_iter(shape) {
        let pc = [0, 1, 2].map(|a| p[a] as f64 - c[a]);
        for row in 0..3 {
            let g = grad_field[i * 3 + row] as f64;
            acc[row * 4] += g * pc[0];
            acc[row * 4 + 1] += g * pc[1];
            acc[row * 4 + 2] += g * pc[2];
            acc[row * 4 + 3] += g;
        }
    }
    acc.iter().map(|&v| v as f32).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Per-axis linear interpolation stencil for a coordinate clamped to
/// `[0, n-1]`: `(i0, i1, t, inside)`; `inside` is false when clamping
/// changed the coordinate, which zeroes its derivative.
#[inline]
fn stencil(c: f32, n: usize) -> (usize, usize, f32, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let hi = (n - 1) as f32;
    let inside = (0.0..=hi).contains(&c);
    let c = c.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f32, inside)
}

fn check_field_shape(source: Shape3, field: &DisplacementField) -> Result<()> {
    if source != field.shape() {
        return Err(Error::shape(&source, &field.shape()));
    }
    Ok(())
}

/// Trilinear warp of a channels-last grid: `out(p) = src(p + u(p))`.
pub(crate) fn warp_channels(src: &[f32], shape: Shape3, channels: usize, field: &[f32]) -> Vec<f32> {
    let [_, h, w] = shape;
    let mut out = vec![0f32; src.len()];
    for (i, p) in grid_iter(shape) {
        let u = &field[i * 3..i * 3 + 3];
        let (x0, x1, tx, _) = stencil(p[0] as f32 + u[0], shape[0]);
        let (y0, y1, ty, _) = stencil(p[1] as f32 + u[1], shape[1]);
        let (z0, z1, tz, _) = stencil(p[2] as f32 + u[2], shape[2]);
        let corners = [
            ((x0 * h + y0) * w + z0, (1.0 - tx) * (1.0 - ty) * (1.0 - tz)),
            ((x0 * h + y0) * w + z1, (1.0 - tx) * (1.0 - ty) * tz),
            ((x0 * h + y1) * w + z0, (1.0 - tx) * ty * (1.0 - tz)),
            ((x0 * h + y1) * w + z1, (1.0 - tx) * ty * tz),
            ((x1 * h + y0) * w + z0, tx * (1.0 - ty) * (1.0 - tz)),
            ((x1 * h + y0) * w + z1, tx * (1.0 - ty) * tz),
            ((x1 * h + y1) * w + z0, tx * ty * (1.0 - tz)),
            ((x1 * h + y1) * w + z1, tx * ty * tz),
        ];
        let dst = &mut out[i * channels..(i + 1) * channels];
        for (j, wt) in corners {
            if wt == 0.0 {
                continue;
            }
            let s = &src[j * channels..(j + 1) * channels];
            for (o, v) in dst.iter_mut().zip(s) {
                *o += wt * v;
            }
        }
    }
    out
}

/// Adjoint of [`warp_channels`] with respect to the source and the field.
pub(crate) fn warp_channels_backward(
    src: &[f32],
    shape: Shape3,
    channels: usize,
    field: &[f32],
    grad_out: &[f32],
    need_src: bool,
    need_field: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let [_, h, w] = shape;
    let mut grad_src = need_src.then(|| vec![0f32; src.len()]);
    let mut grad_field = need_field.then(|| vec![0f32; field.len()]);
    for (i, p) in grid_iter(shape) {
        let u = &field[i * 3..i * 3 + 3];
        let (x0, x1, tx, ix) = stencil(p[0] as f32 + u[0], shape[0]);
        let (y0, y1, ty, iy) = stencil(p[1] as f32 + u[1], shape[1]);
        let (z0, z1, tz, iz) = stencil(p[2] as f32 + u[2], shape[2]);
        let g = &grad_out[i * channels..(i + 1) * channels];
        // (flat index, weight, d weight/dx, d weight/dy, d weight/dz)
        let corners = [
            ((x0 * h + y0) * w + z0, [1.0 - tx, 1.0 - ty, 1.0 - tz], [-1.0, -1.0, -1.0]),
            ((x0 * h + y0) * w + z1, [1.0 - tx, 1.0 - ty, tz], [-1.0, -1.0, 1.0]),
            ((x0 * h + y1) * w + z0, [1.0 - tx, ty, 1.0 - tz], [-1.0, 1.0, -1.0]),
            ((x0 * h + y1) * w + z1, [1.0 - tx, ty, tz], [-1.0, 1.0, 1.0]),
            ((x1 * h + y0) * w + z0, [tx, 1.0 - ty, 1.0 - tz], [1.0, -1.0, -1.0]),
            ((x1 * h + y0) * w + z1, [tx, 1.0 - ty, tz], [1.0, -1.0, 1.0]),
            ((x1 * h + y1) * w + z0, [tx, ty, 1.0 - tz], [1.0, 1.0, -1.0]),
            ((x1 * h + y1) * w + z1, [tx, ty, tz], [1.0, 1.0, 1.0]),
        ];
        let mut dcoord = [0f32; 3];
        for (j, f, s) in corners {
            let wt = f[0] * f[1] * f[2];
            let sv = &src[j * channels..(j + 1) * channels];
            if let Some(gs) = grad_src.as_mut() {
                if wt != 0.0 {
                    for (d, gv) in gs[j * channels..(j + 1) * channels].iter_mut().zip(g) {
                        *d += wt * gv;
                    }
                }
            }
            if grad_field.is_some() {
                let dot: f32 = sv.iter().zip(g).map(|(a, b)| a * b).sum();
                dcoord[0] += s[0] * f[1] * f[2] * dot;
                dcoord[1] += f[0] * s[1] * f[2] * dot;
                dcoord[2] += f[0] * f[1] * s[2] * dot;
            }
        }
        if let Some(gf) = grad_field.as_mut() {
            let inside = [ix, iy, iz];
            for a in 0..3 {
                if inside[a] {
                    gf[i * 3 + a] = dcoord[a];
                }
            }
        }
    }
    (grad_src, grad_field)
}

/// Warp an intensity volume by `field`.
pub fn warp(source: &Volume, field: &DisplacementField, mode: Interpolation) -> Result<Volume> {
    check_field_shape(source.shape(), field)?;
    let data = match mode {
        Interpolation::Linear => warp_channels(source.data(), source.shape(), 1, field.data()),
        Interpolation::Nearest => {
            let idx = nearest_indices(source.shape(), field);
            idx.iter().map(|&j| source.data()[j]).collect()
        }
    };
    Volume::new(source.shape(), data)
}

/// Nearest-neighbour warp of a label map; only source labels can appear.
pub fn warp_labels(labels: &LabelMap, field: &DisplacementField) -> Result<LabelMap> {
    check_field_shape(labels.shape(), field)?;
    let idx = nearest_indices(labels.shape(), field);
    LabelMap::new(labels.shape(), idx.iter().map(|&j| labels.data()[j]).collect())
}

fn nearest_indices(shape: Shape3, field: &DisplacementField) -> Vec<usize> {
    grid_iter(shape)
        .map(|(i, p)| {
            let u = &field.data()[i * 3..i * 3 + 3];
            let q = [0, 1, 2].map(|a| {
                let c = (p[a] as f32 + u[a]).round();
                c.clamp(0.0, (shape[a] - 1) as f32) as usize
            });
            crate::volumes::flat_index(shape, q[0], q[1], q[2])
        })
        .collect()
}

/// Per-axis source stencil for ×2 upsampling with half-voxel alignment:
/// fine index `i` sits at coarse coordinate `(i + 0.5) / 2 − 0.5`. The two
/// nearest coarse samples are blended linearly, extrapolating at the
/// borders so linear fields stay exactly linear.
fn upsample_axis(n_coarse: usize, n_fine: usize) -> Vec<(usize, usize, f32)> {
    (0..n_fine)
        .map(|i| {
            if n_coarse == 1 {
                return (0, 0, 0.0);
            }
            let c = (i as f32 + 0.5) / 2.0 - 0.5;
            let i0 = (c.floor().max(0.0) as usize).min(n_coarse - 2);
            (i0, i0 + 1, c - i0 as f32)
        })
        .collect()
}

/// ×2 trilinear resampling of a channels-last grid onto `target` (which
/// must not exceed twice the source shape), multiplying values by `scale`.
pub(crate) fn upsample_channels(
    src: &[f32],
    shape: Shape3,
    channels: usize,
    target: Shape3,
    scale: f32,
) -> Vec<f32> {
    let axes: Vec<_> = (0..3).map(|a| upsample_axis(shape[a], target[a])).collect();
    let [_, h, w] = shape;
    let mut out = vec![0f32; voxel_count(target) * channels];
    for (i, p) in grid_iter(target) {
        let (x0, x1, tx) = axes[0][p[0]];
        let (y0, y1, ty) = axes[1][p[1]];
        let (z0, z1, tz) = axes[2][p[2]];
        let dst = &mut out[i * channels..(i + 1) * channels];
        for (xi, wx) in [(x0, 1.0 - tx), (x1, tx)] {
            for (yi, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                for (zi, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                    let wt = wx * wy * wz * scale;
                    if wt == 0.0 {
                        continue;
                    }
                    let j = (xi * h + yi) * w + zi;
                    for (o, v) in dst.iter_mut().zip(&src[j * channels..(j + 1) * channels]) {
                        *o += wt * v;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_channels`].
pub(crate) fn upsample_channels_adjoint(
    grad: &[f32],
    shape: Shape3,
    channels: usize,
    target: Shape3,
    scale: f32,
) -> Vec<f32> {
    let axes: Vec<_> = (0..3).map(|a| upsample_axis(shape[a], target[a])).collect();
    let [_, h, w] = shape;
    let mut out = vec![0f32; voxel_count(shape) * channels];
    for (i, p) in grid_iter(target) {
        let (x0, x1, tx) = axes[0][p[0]];
        let (y0, y1, ty) = axes[1][p[1]];
        let (z0, z1, tz) = axes[2][p[2]];
        let g = &grad[i * channels..(i + 1) * channels];
        for (xi, wx) in [(x0, 1.0 - tx), (x1, tx)] {
            for (yi, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                for (zi, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                    let wt = wx * wy * wz * scale;
                    if wt == 0.0 {
                        continue;
                    }
                    let j = (xi * h + yi) * w + zi;
                    for (o, v) in out[j * channels..(j + 1) * channels].iter_mut().zip(g) {
                        *o += wt * v;
                    }
                }
            }
        }
    }
    out
}

/// Double the grid per axis; vectors are scaled by 2 into fine-grid voxels.
pub fn upsample_field(field: &DisplacementField) -> DisplacementField {
    upsample_field_to(field, field.shape().map(|n| 2 * n))
}

/// ×2 upsampling cropped to `target`, for pyramids with odd level sizes.
pub fn upsample_field_to(field: &DisplacementField, target: Shape3) -> DisplacementField {
    assert!(
        (0..3).all(|a| target[a] <= 2 * field.shape()[a] && target[a] >= 1),
        "target {target:?} is not within ×2 of {:?}",
        field.shape()
    );
    DisplacementField::from_raw(
        target,
        upsample_channels(field.data(), field.shape(), 3, target, 2.0),
    )
}

/// Voxel-wise vector sum.
pub fn compose_add(coarse: &DisplacementField, fine: &DisplacementField) -> Result<DisplacementField> {
    if coarse.shape() != fine.shape() {
        return Err(Error::shape(&coarse.shape(), &fine.shape()));
    }
    let data = coarse.data().iter().zip(fine.data()).map(|(a, b)| a + b).collect();
    Ok(DisplacementField::from_raw(coarse.shape(), data))
}

/// Finite-difference stencil along one axis: forward difference except on
/// the last slice, which uses the backward difference. Returns the
/// `(plus, minus)` neighbour positions.
#[inline]
fn diff_pair(p: usize, n: usize) -> Option<(usize, usize)> {
    if n < 2 {
        None
    } else if p + 1 < n {
        Some((p + 1, p))
    } else {
        Some((p, p - 1))
    }
}

fn jacobian_at<T: Float>(field: &[T], shape: Shape3, p: [usize; 3]) -> ([[T; 3]; 3], [Option<(usize, usize)>; 3]) {
    let mut jac = [[T::zero(); 3]; 3];
    let mut pairs = [None; 3];
    for j in 0..3 {
        pairs[j] = diff_pair(p[j], shape[j]).map(|(plus, minus)| {
            let mut qp = p;
            let mut qm = p;
            qp[j] = plus;
            qm[j] = minus;
            let ip = crate::volumes::flat_index(shape, qp[0], qp[1], qp[2]);
            let im = crate::volumes::flat_index(shape, qm[0], qm[1], qm[2]);
            for i in 0..3 {
                jac[i][j] = field[ip * 3 + i] - field[im * 3 + i];
            }
            (ip, im)
        });
    }
    for (i, row) in jac.iter_mut().enumerate() {
        row[i] = row[i] + T::one();
    }
    (jac, pairs)
}

/// `det(I + ∇u)` per voxel for an interleaved field.
pub(crate) fn jacobian_dets<T: Float>(field: &[T], shape: Shape3) -> Vec<T> {
    grid_iter(shape)
        .map(|(_, p)| det3(jacobian_at(field, shape, p).0))
        .collect()
}

/// Adjoint of [`jacobian_dets`]: maps per-voxel determinant gradients to
/// field gradients through the cofactor matrix.
pub(crate) fn jacobian_dets_backward<T: Float>(field: &[T], shape: Shape3, grad_det: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); field.len()];
    for (v, p) in grid_iter(shape) {
        let g = grad_det[v];
        if g == T::zero() {
            continue;
        }
        let (m, pairs) = jacobian_at(field, shape, p);
        let cof = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
            ],
            [
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
            ],
            [
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        for j in 0..3 {
            if let Some((ip, im)) = pairs[j] {
                for i in 0..3 {
                    let d = g * cof[i][j];
                    out[ip * 3 + i] = out[ip * 3 + i] + d;
                    out[im * 3 + i] = out[im * 3 + i] - d;
                }
            }
        }
    }
    out
}

/// Per-voxel Jacobian determinant of `p ↦ p + u(p)`.
pub fn jacobian_det(field: &DisplacementField) -> Volume {
    let data: Vec<f64> = field.data().iter().map(|&v| v as f64).collect();
    let dets = jacobian_dets(&data, field.shape());
    Volume::new(field.shape(), dets.iter().map(|&d| d as f32).collect())
        .expect("determinant grid matches field grid")
}

/// Percentage of voxels whose Jacobian determinant is `≤ 0`.
pub fn njd_percent(field: &DisplacementField) -> f64 {
    let data: Vec<f64> = field.data().iter().map(|&v| v as f64).collect();
    let dets = jacobian_dets(&data, field.shape());
    let folded = dets.iter().filter(|&&d| d <= 0.0).count();
    100.0 * folded as f64 / dets.len() as f64
}
