//! Training objective: local squared NCC, diffusion smoothness and a
//! negative-Jacobian penalty, `L = ncc + σ·(diffusion + λ·jd)`.
//!
//! The kernels work in `f64` on flat arrays and come with analytic
//! gradients; the autograd ops wrap them for `f32` tensors.

use serde::{Deserialize, Serialize};

use crate::autograd::{BackwardFn, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::field_algebra::{jacobian_dets, jacobian_dets_backward, DisplacementField};
use crate::volumes::{voxel_count, Shape3, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub sigma: f64,
    pub lambda: f64,
    pub ncc_window: usize,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { sigma: 1.0, lambda: 1e-4, ncc_window: 9, epsilon: 1e-5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ncc_window == 0 || self.ncc_window % 2 == 0 {
            return Err(Error::Config(format!("ncc_window must be odd, got {}", self.ncc_window)));
        }
        for (name, v) in [("sigma", self.sigma), ("lambda", self.lambda), ("epsilon", self.epsilon)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    fn check_window(&self, shape: Shape3) -> Result<()> {
        self.validate()?;
        if shape.iter().any(|&n| n < self.ncc_window) {
            return Err(Error::Config(format!(
                "NCC window {} exceeds volume shape {shape:?}",
                self.ncc_window
            )));
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ncc: f64,
    pub diffusion: f64,
    pub jd: f64,
}

impl LossBreakdown {
    pub fn new(ncc: f64, diffusion: f64, jd: f64, cfg: &LossConfig) -> Self {
        let total = ncc + cfg.sigma * (diffusion + cfg.lambda * jd);
        Self { total, ncc, diffusion, jd }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.ncc, self.diffusion, self.jd].iter().all(|v| v.is_finite())
    }
}

pub mod kernels {
    //! `f64` loss kernels and their analytic gradients.

    use super::*;

    /// Sum over the voxel-centred `(2r+1)³` box, clipped to the grid.
    pub fn box_sum(data: &[f64], shape: Shape3, r: usize) -> Vec<f64> {
        let mut cur = data.to_vec();
        let mut line = Vec::new();
        let mut prefix = Vec::new();
        for axis in 0..3 {
            let n = shape[axis];
            let stride: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..axis].iter().product();
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * n * stride + s;
                    line.clear();
                    line.extend((0..n).map(|i| cur[base + i * stride]));
                    prefix.clear();
                    prefix.push(0.0);
                    for v in &line {
                        prefix.push(prefix.last().unwrap() + v);
                    }
                    for i in 0..n {
                        let lo = i.saturating_sub(r);
                        let hi = (i + r + 1).min(n);
                        cur[base + i * stride] = prefix[hi] - prefix[lo];
                    }
                }
            }
        }
        cur
    }

    struct NccStats {
        cc: Vec<f64>,
        /// `2·cross / (A·B)`
        alpha: Vec<f64>,
        /// `2·cross² / (A·B²)`, derivative through the warped variance
        beta: Vec<f64>,
        /// `2·cross² / (A²·B)`, derivative through the fixed variance
        gamma: Vec<f64>,
        mean_w: Vec<f64>,
        mean_f: Vec<f64>,
    }

    fn ncc_stats(warped: &[f64], fixed: &[f64], shape: Shape3, window: usize, eps: f64) -> NccStats {
        let r = window / 2;
        let count = box_sum(&vec![1.0; warped.len()], shape, r);
        let sw = box_sum(warped, shape, r);
        let sf = box_sum(fixed, shape, r);
        let sww = box_sum(&warped.iter().map(|v| v * v).collect::<Vec<_>>(), shape, r);
        let sff = box_sum(&fixed.iter().map(|v| v * v).collect::<Vec<_>>(), shape, r);
        let swf = box_sum(&warped.iter().zip(fixed).map(|(a, b)| a * b).collect::<Vec<_>>(), shape, r);
        let n = warped.len();
        let mut s = NccStats {
            cc: Vec::with_capacity(n),
            alpha: Vec::with_capacity(n),
            beta: Vec::with_capacity(n),
            gamma: Vec::with_capacity(n),
            mean_w: Vec::with_capacity(n),
            mean_f: Vec::with_capacity(n),
        };
        for i in 0..n {
            let k = count[i];
            let (mw, mf) = (sw[i] / k, sf[i] / k);
            let cross = swf[i] - sw[i] * mf;
            let b = (sww[i] - sw[i] * mw).max(0.0) + eps;
            let a = (sff[i] - sf[i] * mf).max(0.0) + eps;
            s.cc.push(cross * cross / (a * b));
            s.alpha.push(2.0 * cross / (a * b));
            s.beta.push(2.0 * cross * cross / (a * b * b));
            s.gamma.push(2.0 * cross * cross / (a * a * b));
            s.mean_w.push(mw);
            s.mean_f.push(mf);
        }
        s
    }

    /// `−mean` of the local squared NCC.
    pub fn ncc(warped: &[f64], fixed: &[f64], shape: Shape3, window: usize, eps: f64) -> f64 {
        let s = ncc_stats(warped, fixed, shape, window, eps);
        -s.cc.iter().sum::<f64>() / s.cc.len() as f64
    }

    /// Gradients of [`ncc`] with respect to `warped` and `fixed`.
    pub fn ncc_grad(warped: &[f64], fixed: &[f64], shape: Shape3, window: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
        let r = window / 2;
        let s = ncc_stats(warped, fixed, shape, window, eps);
        let n = warped.len() as f64;
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
        let sum_alpha = box_sum(&s.alpha, shape, r);
        let sum_alpha_mf = box_sum(&prod(&s.alpha, &s.mean_f), shape, r);
        let sum_alpha_mw = box_sum(&prod(&s.alpha, &s.mean_w), shape, r);
        let sum_beta = box_sum(&s.beta, shape, r);
        let sum_beta_mw = box_sum(&prod(&s.beta, &s.mean_w), shape, r);
        let sum_gamma = box_sum(&s.gamma, shape, r);
        let sum_gamma_mf = box_sum(&prod(&s.gamma, &s.mean_f), shape, r);
        let mut gw = Vec::with_capacity(warped.len());
        let mut gf = Vec::with_capacity(warped.len());
        for q in 0..warped.len() {
            let dw = fixed[q] * sum_alpha[q] - sum_alpha_mf[q] - warped[q] * sum_beta[q] + sum_beta_mw[q];
            let df = warped[q] * sum_alpha[q] - sum_alpha_mw[q] - fixed[q] * sum_gamma[q] + sum_gamma_mf[q];
            gw.push(-dw / n);
            gf.push(-df / n);
        }
        (gw, gf)
    }

    /// Sum over axes of the mean squared forward difference of the
    /// interleaved field along that axis. Axes of length 1 contribute 0.
    pub fn diffusion(field: &[f64], shape: Shape3) -> f64 {
        let mut total = 0.0;
        for axis in 0..3 {
            let n = shape[axis];
            if n < 2 {
                continue;
            }
            let stride: usize = shape[axis + 1..].iter().product();
            let mut acc = 0.0;
            let mut pairs = 0usize;
            for v in 0..voxel_count(shape) {
                if (v / stride) % n == n - 1 {
                    continue;
                }
                let w = v + stride;
                for c in 0..3 {
                    let d = field[w * 3 + c] - field[v * 3 + c];
                    acc += d * d;
                }
                pairs += 1;
            }
            total += acc / pairs as f64;
        }
        total
    }

    pub fn diffusion_grad(field: &[f64], shape: Shape3) -> Vec<f64> {
        let mut grad = vec![0.0; field.len()];
        for axis in 0..3 {
            let n = shape[axis];
            if n < 2 {
                continue;
            }
            let stride: usize = shape[axis + 1..].iter().product();
            let pairs = voxel_count(shape) / n * (n - 1);
            let k = 2.0 / pairs as f64;
            for v in 0..voxel_count(shape) {
                if (v / stride) % n == n - 1 {
                    continue;
                }
                let w = v + stride;
                for c in 0..3 {
                    let d = k * (field[w * 3 + c] - field[v * 3 + c]);
                    grad[w * 3 + c] += d;
                    grad[v * 3 + c] -= d;
                }
            }
        }
        grad
    }

    /// Mean over voxels of `max(0, −det(I + ∇u))`.
    pub fn jd(field: &[f64], shape: Shape3) -> f64 {
        let dets = jacobian_dets(field, shape);
        dets.iter().map(|d| (-d).max(0.0)).sum::<f64>() / dets.len() as f64
    }

    pub fn jd_grad(field: &[f64], shape: Shape3) -> Vec<f64> {
        let dets = jacobian_dets(field, shape);
        let n = dets.len() as f64;
        let g: Vec<f64> = dets.iter().map(|&d| if d < 0.0 { -1.0 / n } else { 0.0 }).collect();
        jacobian_dets_backward(field, shape, &g)
    }
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn narrow(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

pub fn ncc_loss(warped: &Volume, fixed: &Volume, cfg: &LossConfig) -> Result<f64> {
    if warped.shape() != fixed.shape() {
        return Err(Error::shape(&fixed.shape(), &warped.shape()));
    }
    cfg.check_window(fixed.shape())?;
    Ok(kernels::ncc(&widen(warped.data()), &widen(fixed.data()), fixed.shape(), cfg.ncc_window, cfg.epsilon))
}

pub fn diffusion_loss(field: &DisplacementField) -> f64 {
    kernels::diffusion(&widen(field.data()), field.shape())
}

pub fn jd_loss(field: &DisplacementField) -> f64 {
    kernels::jd(&widen(field.data()), field.shape())
}

pub fn total_loss(
    warped: &Volume,
    fixed: &Volume,
    field: &DisplacementField,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if field.shape() != fixed.shape() {
        return Err(Error::shape(&fixed.shape(), &field.shape()));
    }
    let ncc = ncc_loss(warped, fixed, cfg)?;
    Ok(LossBreakdown::new(ncc, diffusion_loss(field), jd_loss(field), cfg))
}

/// NCC between a tracked `[D, H, W, 1]` warped image and a fixed image.
pub fn ncc_op(g: &Graph, warped: &Var, fixed: &Volume, cfg: &LossConfig) -> Result<Var> {
    let shape = fixed.shape();
    if warped.shape() != [shape[0], shape[1], shape[2], 1] {
        return Err(Error::shape(&[shape[0], shape[1], shape[2], 1], warped.shape()));
    }
    cfg.check_window(shape)?;
    let w = widen(warped.value().data());
    let f = widen(fixed.data());
    let (window, eps) = (cfg.ncc_window, cfg.epsilon);
    let value = kernels::ncc(&w, &f, shape, window, eps);
    Ok(g.record(Tensor::scalar(value as f32), &[warped], move || {
        Box::new(move |grad: &Tensor, _: &[bool]| {
            let (gw, _) = kernels::ncc_grad(&w, &f, shape, window, eps);
            let s = grad.item() as f64;
            let d = narrow(gw.into_iter().map(|v| v * s).collect());
            vec![Some(Tensor::new(vec![shape[0], shape[1], shape[2], 1], d))]
        }) as BackwardFn
    }))
}

fn field_scalar_op(
    g: &Graph,
    field: &Var,
    value: fn(&[f64], Shape3) -> f64,
    gradient: fn(&[f64], Shape3) -> Vec<f64>,
) -> Var {
    let shape = field.value().spatial();
    assert_eq!(field.value().channels(), 3, "displacement field needs 3 channels");
    let u = widen(field.value().data());
    let v = value(&u, shape);
    g.record(Tensor::scalar(v as f32), &[field], move || {
        Box::new(move |grad: &Tensor, _: &[bool]| {
            let s = grad.item() as f64;
            let d = narrow(gradient(&u, shape).into_iter().map(|x| x * s).collect());
            vec![Some(Tensor::new(vec![shape[0], shape[1], shape[2], 3], d))]
        }) as BackwardFn
    })
}

pub fn diffusion_op(g: &Graph, field: &Var) -> Var {
    field_scalar_op(g, field, kernels::diffusion, kernels::diffusion_grad)
}

pub fn jd_op(g: &Graph, field: &Var) -> Var {
    field_scalar_op(g, field, kernels::jd, kernels::jd_grad)
}

/// Tracked total loss plus its breakdown.
pub fn total_loss_op(
    g: &Graph,
    warped: &Var,
    fixed: &Volume,
    field: &Var,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let ncc = ncc_op(g, warped, fixed, cfg)?;
    let diffusion = diffusion_op(g, field);
    let jd = jd_op(g, field);
    let breakdown = LossBreakdown::new(
        ncc.value().item() as f64,
        diffusion.value().item() as f64,
        jd.value().item() as f64,
        cfg,
    );
    let total = crate::autograd::weighted_sum(
        g,
        &[
            (&ncc, 1.0),
            (&diffusion, cfg.sigma as f32),
            (&jd, (cfg.sigma * cfg.lambda) as f32),
        ],
    );
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::kernels::*;
    use super::*;
    use crate::field_algebra::{affine_to_field, AffineTransform};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(shape: Shape3, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..voxel_count(shape)).map(|_| r.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn box_sum_matches_brute_force() {
        let shape = [4, 5, 3];
        let d = noise(shape, 1);
        let fast = box_sum(&d, shape, 1);
        for (i, p) in crate::volumes::grid_iter(shape) {
            let mut s = 0.0;
            for (j, q) in crate::volumes::grid_iter(shape) {
                if (0..3).all(|a| (p[a] as i64 - q[a] as i64).abs() <= 1) {
                    s += d[j];
                }
            }
            assert!((fast[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn ncc_of_identical_volumes_is_minus_one() {
        let v = Volume::new([9, 9, 9], narrow(noise([9, 9, 9], 2))).unwrap();
        let l = ncc_loss(&v, &v, &LossConfig::default()).unwrap();
        assert!((l + 1.0).abs() < 1e-3, "{l}");
    }

    #[test]
    fn ncc_against_constant_is_zero() {
        let v = Volume::new([9, 9, 9], narrow(noise([9, 9, 9], 3))).unwrap();
        let c = Volume::filled([9, 9, 9], 0.4);
        assert!(ncc_loss(&v, &c, &LossConfig::default()).unwrap().abs() < 1e-3);
    }

    #[test]
    fn ncc_rejects_even_window_and_shape_mismatch() {
        let v = Volume::zeros([9, 9, 9]);
        let cfg = LossConfig { ncc_window: 4, ..Default::default() };
        assert!(matches!(ncc_loss(&v, &v, &cfg), Err(Error::Config(_))));
        let w = Volume::zeros([9, 9, 10]);
        assert!(matches!(ncc_loss(&v, &w, &LossConfig::default()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn diffusion_known_values() {
        let shape = [4, 4, 4];
        assert_eq!(diffusion_loss(&DisplacementField::zeros(shape)), 0.0);
        assert_eq!(diffusion_loss(&DisplacementField::constant(shape, [1.0, -2.0, 0.5])), 0.0);
        let ramp = DisplacementField::from_fn(shape, |p| [p[0] as f32, 0.0, 0.0]);
        assert!((diffusion_loss(&ramp) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jd_known_values() {
        let shape = [5, 5, 5];
        assert_eq!(jd_loss(&DisplacementField::zeros(shape)), 0.0);
        let flip = affine_to_field(&AffineTransform::from_parts([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]], [0.0; 3]), shape);
        assert!((jd_loss(&flip) - 1.0).abs() < 1e-6);
        let half = affine_to_field(&AffineTransform::scaling(0.5), shape);
        assert_eq!(jd_loss(&half), 0.0);
    }

    #[test]
    fn total_combines_terms() {
        let v = Volume::new([9, 9, 9], narrow(noise([9, 9, 9], 4))).unwrap();
        let zero = DisplacementField::zeros([9, 9, 9]);
        let b = total_loss(&v, &v, &zero, &LossConfig::default()).unwrap();
        assert!((b.total + 1.0).abs() < 1e-3);
        let field = DisplacementField::from_fn([9, 9, 9], |p| [((p[0] * 7 + p[1]) % 5) as f32 - 2.0, 0.0, 0.0]);
        let no_reg = LossConfig { sigma: 0.0, ..Default::default() };
        let b = total_loss(&v, &v, &field, &no_reg).unwrap();
        assert_eq!(b.total, b.ncc);
        let cfg = LossConfig::default();
        let b = total_loss(&v, &v, &field, &cfg).unwrap();
        assert_eq!(b.total, b.ncc + cfg.sigma * (b.diffusion + cfg.lambda * b.jd));
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], skip: impl Fn(usize) -> bool) {
        let h = 1e-6;
        for i in 0..x.len() {
            if skip(i) {
                continue;
            }
            let mut p = x.to_vec();
            p[i] += h;
            let mut m = x.to_vec();
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(err < 1e-3 || (fd - analytic[i]).abs() < 1e-9, "element {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn ncc_gradient_matches_finite_differences() {
        let shape = [5, 4, 6];
        let w = noise(shape, 5);
        let f = noise(shape, 6);
        let (gw, gf) = ncc_grad(&w, &f, shape, 3, 1e-5);
        fd_check(|x| ncc(x, &f, shape, 3, 1e-5), &w, &gw, |_| false);
        fd_check(|x| ncc(&w, x, shape, 3, 1e-5), &f, &gf, |_| false);
    }

    #[test]
    fn diffusion_and_jd_gradients_match_finite_differences() {
        let shape = [4, 5, 4];
        let u: Vec<f64> = noise([4, 5, 12], 7).iter().map(|v| 1.5 * (v - 0.5)).collect();
        fd_check(|x| diffusion(x, shape), &u, &diffusion_grad(&u, shape), |_| false);
        assert!(jd(&u, shape) > 0.0, "test field should fold somewhere");
        fd_check(|x| jd(x, shape), &u, &jd_grad(&u, shape), |_| false);
    }

    proptest! {
        #[test]
        fn ncc_invariant_to_intensity_rescaling(seed in 0u64..500, a in 0.2f64..5.0, b in -3.0f64..3.0) {
            let shape = [6, 6, 6];
            let w = noise(shape, seed);
            let f = noise(shape, seed + 1000);
            let scaled: Vec<f64> = w.iter().map(|v| a * v + b).collect();
            let base = ncc(&w, &f, shape, 5, 1e-5);
            prop_assert!((ncc(&scaled, &f, shape, 5, 1e-5) - base).abs() < 1e-3);
        }

        #[test]
        fn regularizers_ignore_constant_offsets(seed in 0u64..500, t in proptest::array::uniform3(-4.0f64..4.0)) {
            let shape = [4, 4, 4];
            let u: Vec<f64> = noise([4, 4, 12], seed).iter().map(|v| 2.0 * (v - 0.5)).collect();
            let shifted: Vec<f64> = u.iter().enumerate().map(|(i, v)| v + t[i % 3]).collect();
            prop_assert!((diffusion(&u, shape) - diffusion(&shifted, shape)).abs() < 1e-9);
            prop_assert!((jd(&u, shape) - jd(&shifted, shape)).abs() < 1e-9);
            prop_assert!(jd(&u, shape) >= 0.0);
        }
    }
}
