//! Synthetic registration pairs with known ground truth.
//!
//! A phantom of soft-edged ellipsoids is defined in continuous space. The
//! moving image samples it on the voxel grid; the fixed image samples it at
//! `T(p) = p + u(p)`, where `T` is a centered affine applied after a smooth
//! random deformation. The exact registration answer is therefore `u`
//! itself: warping the moving image by `u` reproduces the fixed image up to
//! interpolation, with no field inversion involved.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{grid_iter, voxel_count, LabelMap, Shape3, Volume};
use crate::error::{Error, Result};
use crate::field_algebra::{grid_center, njd_percent, AffineTransform, DisplacementField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPairSpec {
    pub seed: u64,
    pub shape: Shape3,
    /// Rotation angles in radians about axes 0, 1, 2 (applied in that order).
    pub rotation: [f64; 3],
    /// Translation in voxels.
    pub translation: [f64; 3],
    /// Per-axis scale factors; 1 is identity.
    pub scale: [f64; 3],
    /// Peak magnitude of the smooth deformation, in voxels.
    pub deform_amplitude: f64,
    /// Gaussian smoothing scale of the deformation, in voxels.
    pub deform_smoothness: f64,
    /// Number of labelled structures inside the head region.
    pub structures: usize,
}

impl SyntheticPairSpec {
    /// A pair related by the identity transform.
    pub fn identity(seed: u64, shape: Shape3) -> Self {
        Self {
            seed,
            shape,
            rotation: [0.0; 3],
            translation: [0.0; 3],
            scale: [1.0; 3],
            deform_amplitude: 0.0,
            deform_smoothness: 4.0,
            structures: 4,
        }
    }

    /// Draw the affine parameters from `seed`: each rotation angle uniform in
    /// `±max_rotation`, a translation of length `max_translation` in a random
    /// direction, and scale factors uniform in `1 ± max_scale`.
    pub fn randomized(
        seed: u64,
        shape: Shape3,
        max_rotation: f64,
        max_translation: f64,
        max_scale: f64,
        deform_amplitude: f64,
        deform_smoothness: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a551);
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let rotation = [sym(max_rotation), sym(max_rotation), sym(max_rotation)];
        let scale = [1.0 + sym(max_scale), 1.0 + sym(max_scale), 1.0 + sym(max_scale)];
        let dir = [sym(1.0), sym(1.0), sym(1.0)];
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let translation = dir.map(|v| v / norm * max_translation);
        Self {
            seed,
            shape,
            rotation,
            translation,
            scale,
            deform_amplitude,
            deform_smoothness,
            structures: 4,
        }
    }

    pub fn affine(&self) -> AffineTransform {
        let rot = |axis: usize, angle: f64| {
            let (s, c) = angle.sin_cos();
            let (i, j) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            m[i][i] = c;
            m[i][j] = -s;
            m[j][i] = s;
            m[j][j] = c;
            AffineTransform::from_parts(m, [0.0; 3])
        };
        let [sx, sy, sz] = self.scale;
        let scale = AffineTransform::from_parts([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, sz]], [0.0; 3]);
        let linear = rot(2, self.rotation[2])
            .compose(&rot(1, self.rotation[1]))
            .compose(&rot(0, self.rotation[0]))
            .compose(&scale);
        AffineTransform::from_parts(linear.linear(), self.translation)
    }

    fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n < 4) {
            return Err(Error::Config(format!("synthetic shape {:?} must be at least 4 per axis", self.shape)));
        }
        if self.scale.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config("scale factors must be positive".into()));
        }
        if self.deform_amplitude < 0.0 || self.deform_smoothness <= 0.0 {
            return Err(Error::Config("deformation amplitude must be ≥ 0 and smoothness > 0".into()));
        }
        if self.structures == 0 {
            return Err(Error::Config("at least one structure is required".into()));
        }
        Ok(())
    }
}

/// Registration answer for a synthetic pair: warping the moving image by
/// `field` aligns it with the fixed image.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub affine: AffineTransform,
    pub field: DisplacementField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub fixed: Volume,
    pub moving: Volume,
    pub labels_fixed: LabelMap,
    pub labels_moving: LabelMap,
    pub truth: GroundTruth,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    intensity: f64,
    label: u32,
}

impl Ellipsoid {
    /// Approximate signed distance, negative inside.
    fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let r2: f64 = (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum();
        let rmin = self.radii.iter().cloned().fold(f64::INFINITY, f64::min);
        (r2.sqrt() - 1.0) * rmin
    }
}

struct Phantom {
    head: Ellipsoid,
    structures: Vec<Ellipsoid>,
    /// Low-frequency texture inside the head: (amplitude, wave vector, phase).
    waves: Vec<(f64, [f64; 3], f64)>,
}

const EDGE: f64 = 0.6;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Phantom {
    fn generate(shape: Shape3, count: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = grid_center(shape);
        let head_radii = shape.map(|n| 0.4 * n as f64);
        let head = Ellipsoid {
            center: c,
            radii: head_radii,
            intensity: 0.3,
            label: 1,
        };
        let min_dim = shape.iter().cloned().min().unwrap() as f64;
        let structures = (0..count)
            .map(|k| {
                let center = [0, 1, 2].map(|a| c[a] + rng.random_range(-0.45..0.45) * head_radii[a]);
                let radii = [0, 1, 2].map(|_| min_dim * rng.random_range(0.1..0.17));
                Ellipsoid {
                    center,
                    radii,
                    intensity: 0.55 + 0.45 * (k as f64 + rng.random_range(0.0..1.0)) / count as f64,
                    label: k as u32 + 2,
                }
            })
            .collect();
        let waves = (0..3)
            .map(|_| {
                let k = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0) * std::f64::consts::TAU / min_dim * 2.0);
                (0.06, k, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { head, structures, waves }
    }

    fn intensity(&self, p: [f64; 3]) -> f64 {
        let inside_head = sigmoid(-self.head.signed_distance(p) / EDGE);
        let texture: f64 = self
            .waves
            .iter()
            .map(|(amp, k, phase)| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin())
            .sum();
        let mut value = inside_head * (self.head.intensity + texture);
        for s in &self.structures {
            let w = sigmoid(-s.signed_distance(p) / EDGE);
            value = value * (1.0 - w) + w * s.intensity;
        }
        value
    }

    fn label(&self, p: [f64; 3]) -> u32 {
        self.structures
            .iter()
            .rev()
            .find(|s| s.signed_distance(p) < 0.0)
            .map(|s| s.label)
            .unwrap_or(if self.head.signed_distance(p) < 0.0 { self.head.label } else { 0 })
    }
}

/// Separable Gaussian blur of a scalar grid with replicated borders.
fn gaussian_blur(data: &mut [f64], shape: Shape3, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = shape[axis];
        let stride = strides[axis];
        for (start, p) in grid_iter(shape) {
            if p[axis] != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|i| data[start + i * stride]));
            for i in 0..n {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let j = (i as i64 + k as i64 - radius).clamp(0, n as i64 - 1) as usize;
                    acc += w * line[j];
                }
                data[start + i * stride] = acc / norm;
            }
        }
    }
}

/// Smooth random displacement with peak magnitude `amplitude`.
fn smooth_field(shape: Shape3, amplitude: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = voxel_count(shape);
    let mut comps: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for c in &mut comps {
        gaussian_blur(c, shape, sigma);
    }
    let peak = (0..n)
        .map(|i| (comps[0][i].powi(2) + comps[1][i].powi(2) + comps[2][i].powi(2)).sqrt())
        .fold(0.0, f64::max);
    let gain = if peak > 0.0 { amplitude / peak } else { 0.0 };
    (0..n).map(|i| [comps[0][i] * gain, comps[1][i] * gain, comps[2][i] * gain]).collect()
}

/// Generate a fixed/moving pair, both label maps, and the ground truth.
pub fn synth_pair(spec: &SyntheticPairSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let shape = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phantom = Phantom::generate(shape, spec.structures, &mut rng);
    let deformation = if spec.deform_amplitude > 0.0 {
        smooth_field(shape, spec.deform_amplitude, spec.deform_smoothness, &mut rng)
    } else {
        vec![[0.0; 3]; voxel_count(shape)]
    };

    let affine = spec.affine();
    let c = grid_center(shape);
    let mut truth = Vec::with_capacity(voxel_count(shape) * 3);
    let mut fixed = Vec::with_capacity(voxel_count(shape));
    let mut labels_fixed = Vec::with_capacity(voxel_count(shape));
    let mut moving = Vec::with_capacity(voxel_count(shape));
    let mut labels_moving = Vec::with_capacity(voxel_count(shape));
    for (i, p) in grid_iter(shape) {
        let pf = p.map(|v| v as f64);
        let d = deformation[i];
        let pc = [0, 1, 2].map(|a| pf[a] - c[a] + d[a]);
        let mapped = affine.apply(pc);
        let target = [0, 1, 2].map(|a| mapped[a] + c[a]);
        for a in 0..3 {
            truth.push((target[a] - pf[a]) as f32);
        }
        fixed.push(phantom.intensity(target) as f32);
        labels_fixed.push(phantom.label(target));
        moving.push(phantom.intensity(pf) as f32);
        labels_moving.push(phantom.label(pf));
    }
    let field = DisplacementField::new(shape, truth)?;
    let njd = njd_percent(&field);
    if njd > 0.0 {
        return Err(Error::Folding { njd_percent: njd });
    }
    Ok(SyntheticPair {
        fixed: Volume::new(shape, fixed)?,
        moving: Volume::new(shape, moving)?,
        labels_fixed: LabelMap::new(shape, labels_fixed)?,
        labels_moving: LabelMap::new(shape, labels_moving)?,
        truth: GroundTruth { affine, field },
    })
}
