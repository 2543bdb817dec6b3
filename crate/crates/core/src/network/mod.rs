//! The registration network: a weight-shared dual-path encoder, a
//! coarse-to-fine decoder with affine and deformable heads, and the
//! single-pass driver that accumulates the displacement field.

mod checkpoint;
mod config;
pub mod modules;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState};
pub use config::{Block, ModelConfig, Variant};
pub use params::{count_params, NetworkParams, ParamCount, ParamEntry, ParamVars, MLP_RATIO, SWIN_DEPTH};

use crate::autograd::{add, concat_channels, max_pool2, upsample, warp, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::field_algebra::{AffineTransform, DisplacementField};
use crate::volumes::{Shape3, Volume};
use modules::{affine_head_field, deform_head, level_module, patch_expand};

fn volume_var(g: &Graph, v: &Volume) -> Var {
    let [d, h, w] = v.shape();
    g.constant(Tensor::new(vec![d, h, w, 1], v.data().to_vec()))
}

/// Encoder pyramid of one image, finest level first.
pub fn encode(g: &Graph, p: &ParamVars, config: &ModelConfig, v: &Volume) -> Result<Vec<Var>> {
    config.level_shapes(v.shape())?;
    let mut x = volume_var(g, v);
    let mut levels = Vec::with_capacity(config.levels());
    for i in 0..config.levels() {
        if i > 0 {
            x = max_pool2(g, &x);
        }
        x = level_module(
            g,
            p,
            &format!("enc.{i}"),
            config.encoder_block(i),
            &x,
            config.window_size,
            config.shift(),
        )?;
        levels.push(x.clone());
    }
    Ok(levels)
}

/// Tracked outputs of one forward pass.
pub struct ForwardTrace {
    /// `φ_1 … φ_k` on their stage grids, coarse to fine.
    pub fields: Vec<Var>,
    /// Affine residuals of the affine stages.
    pub affine_residuals: Vec<Var>,
    /// The field used for warping, at full resolution.
    pub final_field: Var,
    /// Moving image warped by `final_field`, `[D, H, W, 1]`.
    pub warped: Var,
    /// Encoder output shapes per level (fixed path).
    pub encoder_shapes: Vec<Vec<usize>>,
    /// Decoder module output shapes per stage.
    pub decoder_shapes: Vec<Vec<usize>>,
}

/// Run decoder stages `1..=stages` (all of them for a full pass). When
/// stopping early, the last field is upsampled level by level to the
/// input grid.
pub fn forward_graph(
    g: &Graph,
    p: &ParamVars,
    config: &ModelConfig,
    fixed: &Volume,
    moving: &Volume,
    stages: usize,
) -> Result<ForwardTrace> {
    if fixed.shape() != moving.shape() {
        return Err(Error::shape(&fixed.shape(), &moving.shape()));
    }
    let l = config.levels();
    if stages == 0 || stages > l {
        return Err(Error::Config(format!("cannot run {stages} of {l} decoder stages")));
    }
    let shapes = config.level_shapes(fixed.shape())?;
    let ff = encode(g, p, config, fixed)?;
    let fm = encode(g, p, config, moving)?;
    let encoder_shapes = ff.iter().map(|v| v.shape().to_vec()).collect();

    let mut fields: Vec<Var> = Vec::with_capacity(stages);
    let mut affine_residuals = Vec::new();
    let mut decoder_shapes = Vec::with_capacity(stages);
    let mut prev: Option<Var> = None;
    for k in 1..=stages {
        let level = config.stage_level(k);
        let shape = shapes[level];
        let (input, upsampled) = match (&prev, fields.last()) {
            (Some(prev), Some(phi)) => {
                let expanded = patch_expand(g, p, &format!("dec.{k}.expand"), prev, shape)?;
                let up = upsample(g, phi, shape, 2.0);
                let warped_fm = warp(g, &fm[level], &up);
                (concat_channels(g, &[&expanded, &ff[level], &warped_fm]), Some(up))
            }
            _ => (concat_channels(g, &[&ff[level], &fm[level]]), None),
        };
        let y = level_module(
            g,
            p,
            &format!("dec.{k}"),
            config.decoder_block(k),
            &input,
            config.window_size,
            config.shift(),
        )?;
        drop(input);
        decoder_shapes.push(y.shape().to_vec());
        let head = if config.is_affine_stage(k) {
            let (residual, field) = affine_head_field(g, p, &format!("head.{k}"), &y)?;
            affine_residuals.push(residual);
            field
        } else {
            deform_head(g, p, &format!("head.{k}"), &y)?
        };
        fields.push(match upsampled {
            Some(up) => add(g, &up, &head),
            None => head,
        });
        prev = Some(y);
    }
    drop((ff, fm, prev));

    let mut final_field = fields.last().unwrap().clone();
    for level in (0..config.stage_level(stages)).rev() {
        final_field = upsample(g, &final_field, shapes[level], 2.0);
    }
    let warped = warp(g, &volume_var(g, moving), &final_field);
    Ok(ForwardTrace { fields, affine_residuals, final_field, warped, encoder_shapes, decoder_shapes })
}

/// Untracked registration outputs.
#[derive(Clone, Debug)]
pub struct RegistrationResult {
    /// `φ_1 … φ_L`, each on its stage grid.
    pub fields: Vec<DisplacementField>,
    /// `φ_L` on the input grid.
    pub final_field: DisplacementField,
    /// Moving image warped by `final_field`.
    pub warped: Volume,
    /// Sum of the affine stages expressed on the input grid; identity when
    /// the model has no affine stages.
    pub affine: AffineTransform,
    /// `φ_{L_a}` upsampled to the input grid, if there are affine stages.
    pub affine_field: Option<DisplacementField>,
    pub encoder_shapes: Vec<Vec<usize>>,
    pub decoder_shapes: Vec<Vec<usize>>,
}

fn to_field(v: &Var) -> DisplacementField {
    DisplacementField::from_raw(v.value().spatial(), v.value().data().to_vec())
}

/// Express a level-grid affine residual as a transform on the input grid.
/// The ×2 upsampling maps fine index `x` to coarse `(x − (2^l − 1)/2)/2^l`
/// and scales vectors by `2^l`.
fn residual_to_input_grid(residual: &[f32], level: usize, level_shape: Shape3, input: Shape3) -> [f64; 12] {
    let s = (1u64 << level) as f64;
    let mut out = [0f64; 12];
    for i in 0..3 {
        let mut offset = s * residual[i * 4 + 3] as f64;
        for j in 0..3 {
            let a = residual[i * 4 + j] as f64;
            out[i * 4 + j] = a;
            offset += a * (input[j] as f64 - s * level_shape[j] as f64) / 2.0;
        }
        out[i * 4 + 3] = offset;
    }
    out
}

/// Inference-only forward pass.
pub fn register(params: &NetworkParams, fixed: &Volume, moving: &Volume) -> Result<RegistrationResult> {
    let config = params.config();
    let g = Graph::inference();
    let p = params.leaves(&g);
    let trace = forward_graph(&g, &p, config, fixed, moving, config.levels())?;
    let shapes = config.level_shapes(fixed.shape())?;
    let mut total = [0f64; 12];
    for (k, r) in trace.affine_residuals.iter().enumerate() {
        let level = config.stage_level(k + 1);
        let r = residual_to_input_grid(r.value().data(), level, shapes[level], fixed.shape());
        for (t, v) in total.iter_mut().zip(r) {
            *t += v;
        }
    }
    let mut affine = AffineTransform::identity();
    for i in 0..3 {
        for j in 0..4 {
            affine.matrix[i][j] += total[i * 4 + j];
        }
    }
    let affine_field = (config.affine_steps > 0).then(|| {
        let mut f = trace.fields[config.affine_steps - 1].clone();
        for level in (0..config.stage_level(config.affine_steps)).rev() {
            f = upsample(&g, &f, shapes[level], 2.0);
        }
        to_field(&f)
    });
    Ok(RegistrationResult {
        fields: trace.fields.iter().map(to_field).collect(),
        final_field: to_field(&trace.final_field),
        warped: Volume::new(fixed.shape(), trace.warped.value().data().to_vec())?,
        affine,
        affine_field,
        encoder_shapes: trace.encoder_shapes,
        decoder_shapes: trace.decoder_shapes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_algebra::{affine_to_field, jacobian_det};

    fn small_config() -> ModelConfig {
        ModelConfig {
            affine_steps: 1,
            deform_steps: 2,
            encoder_dims: vec![4, 8, 8],
            decoder_dims: vec![16, 8, 4],
            attn_heads: vec![2, 2, 0],
            window_size: [3, 3, 3],
            variant: Variant::TransDecoder,
        }
    }

    fn blob(shape: Shape3, c: [f32; 3]) -> Volume {
        Volume::from_fn(shape, |p| {
            let r2: f32 = (0..3).map(|a| (p[a] as f32 - c[a]).powi(2)).sum();
            (-r2 / 6.0).exp()
        })
    }

    fn perturb(params: &mut NetworkParams, seed: u32) {
        for i in 0..params.entries().len() {
            for (j, v) in params.tensor_mut(i).data_mut().iter_mut().enumerate() {
                let h = ((j as u32).wrapping_mul(2_654_435_761) ^ seed.wrapping_mul(40503)) % 1000;
                *v += (h as f32 / 1000.0 - 0.5) * 0.02;
            }
        }
    }

    #[test]
    fn zero_heads_give_identity() {
        let c = small_config();
        let params = NetworkParams::init(&c, 1).unwrap();
        let f = blob([12, 10, 9], [5.0, 4.0, 4.0]);
        let m = blob([12, 10, 9], [6.0, 5.0, 4.0]);
        let r = register(&params, &f, &m).unwrap();
        assert!(r.final_field.data().iter().all(|&v| v == 0.0));
        assert_eq!(r.warped, m);
        assert_eq!(r.affine, AffineTransform::identity());
        assert_eq!(r.fields.len(), 3);
        assert_eq!(r.fields[0].shape(), [3, 3, 3]);
        assert_eq!(r.fields[1].shape(), [6, 5, 5]);
        assert_eq!(r.final_field.shape(), [12, 10, 9]);
    }

    #[test]
    fn encoder_is_shared() {
        let c = small_config();
        let mut params = NetworkParams::init(&c, 2).unwrap();
        perturb(&mut params, 9);
        let v = blob([8, 8, 8], [3.0, 4.0, 4.0]);
        let g = Graph::inference();
        let p = params.leaves(&g);
        let a = encode(&g, &p, &c, &v).unwrap();
        let b = encode(&g, &p, &c, &v).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.value(), y.value());
        }
        assert_eq!(a[2].shape(), &[2, 2, 2, 8]);
    }

    #[test]
    fn forward_is_deterministic() {
        let c = small_config();
        let mut params = NetworkParams::init(&c, 4).unwrap();
        perturb(&mut params, 3);
        let f = blob([8, 8, 8], [3.0, 4.0, 4.0]);
        let m = blob([8, 8, 8], [4.0, 4.0, 3.0]);
        let a = register(&params, &f, &m).unwrap();
        let b = register(&params, &f, &m).unwrap();
        let bits = |d: &[f32]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.final_field.data()), bits(b.final_field.data()));
        assert_eq!(bits(a.warped.data()), bits(b.warped.data()));
        assert!(a.final_field.max_norm() > 0.0);
    }

    #[test]
    fn affine_stage_fields_are_affine() {
        let c = ModelConfig { affine_steps: 2, deform_steps: 1, ..small_config() };
        let mut params = NetworkParams::init(&c, 5).unwrap();
        perturb(&mut params, 1);
        let f = blob([8, 12, 8], [3.0, 5.0, 4.0]);
        let m = blob([8, 12, 8], [4.0, 6.0, 3.0]);
        let r = register(&params, &f, &m).unwrap();
        let af = r.affine_field.as_ref().unwrap();
        let expected = affine_to_field(&r.affine, [8, 12, 8]);
        for (a, b) in af.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        for phi in &r.fields[..2] {
            let det = jacobian_det(phi);
            let s = phi.shape();
            let d0 = det.get(1, 1, 1);
            for x in 1..s[0] - 1 {
                for y in 1..s[1] - 1 {
                    for z in 1..s[2] - 1 {
                        assert!((det.get(x, y, z) - d0).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = small_config();
        let params = NetworkParams::init(&c, 1).unwrap();
        let a = Volume::zeros([8, 8, 8]);
        let b = Volume::zeros([8, 8, 9]);
        assert!(matches!(register(&params, &a, &b), Err(Error::ShapeMismatch { .. })));
        let tiny = Volume::zeros([3, 8, 8]);
        assert!(matches!(register(&params, &tiny, &tiny), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let c = small_config();
        let params = NetworkParams::init(&c, 1).unwrap();
        let g = Graph::inference();
        let p = params.leaves(&g);
        let x = g.constant(Tensor::zeros(vec![4, 4, 4, 3]));
        assert!(matches!(
            modules::conv_module(&g, &p, "enc.1", &x),
            Err(Error::Channels { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn module_examples() {
        let c = ModelConfig::default();
        let params = NetworkParams::init(&c, 0).unwrap();
        let g = Graph::inference();
        let p = params.leaves(&g);
        let x = g.constant(Tensor::new(vec![4, 4, 4, 8], (0..512).map(|i| (i % 7) as f32 * 0.1).collect()));
        assert_eq!(modules::conv_module(&g, &p, "enc.1", &x).unwrap().shape(), &[4, 4, 4, 16]);
        let odd = g.constant(Tensor::zeros(vec![9, 12, 10, 1]));
        assert_eq!(modules::conv_module(&g, &p, "enc.0", &odd).unwrap().shape(), &[9, 12, 10, 8]);
        let coarse = g.constant(Tensor::zeros(vec![3, 4, 5, 256]));
        let e = patch_expand(&g, &p, "dec.2.expand", &coarse, [6, 8, 10]).unwrap();
        assert_eq!(e.shape(), &[6, 8, 10, 128]);
        // zero-initialised heads
        let feat = g.constant(Tensor::new(vec![3, 3, 3, 64], vec![0.3; 27 * 64]));
        let d = deform_head(&g, &p, "head.3", &feat).unwrap();
        assert_eq!(d.shape(), &[3, 3, 3, 3]);
        assert!(d.value().data().iter().all(|&v| v == 0.0));
        let feat = g.constant(Tensor::new(vec![2, 3, 2, 256], vec![0.3; 12 * 256]));
        let r = modules::affine_head(&g, &p, "head.1", &feat).unwrap();
        assert_eq!(r.shape(), &[12]);
        assert!(r.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_head_pools_globally() {
        let c = ModelConfig::default();
        let mut params = NetworkParams::init(&c, 0).unwrap();
        perturb(&mut params, 5);
        let g = Graph::inference();
        let p = params.leaves(&g);
        let vals: Vec<f32> = (0..256).map(|i| (i as f32 * 0.37).sin()).collect();
        let one = g.constant(Tensor::new(vec![1, 1, 1, 256], vals.clone()));
        let many = g.constant(Tensor::new(vec![2, 3, 2, 256], vals.repeat(12)));
        let a = modules::affine_head(&g, &p, "head.1", &one).unwrap();
        let b = modules::affine_head(&g, &p, "head.1", &many).unwrap();
        for (x, y) in a.value().data().iter().zip(b.value().data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn patch_expand_with_identity_weights_replicates() {
        let g = Graph::inference();
        // C = 2 → 8 expanded channels; sub-voxel s takes channel s / 4
        let cin = 2;
        let mut w = vec![0f32; cin * 4 * cin];
        for s in 0..8 {
            w[(s / 4) * 8 + s] = 1.0;
        }
        let w = g.constant(Tensor::new(vec![cin, 4 * cin], w));
        let b = g.constant(Tensor::zeros(vec![4 * cin]));
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let e = crate::autograd::linear(&g, &x, &w, &b);
        let out = crate::autograd::pixel_shuffle(&g, &e, [2, 2, 4]);
        assert_eq!(out.shape(), &[2, 2, 4, 1]);
        // each output voxel comes from source voxel z / 2; with one output
        // channel per sub-voxel the value is that voxel's feature s / 4
        for (i, v) in out.value().data().iter().enumerate() {
            let (dx, rest) = (i / 8, i % 8);
            let (dy, z) = (rest / 4, rest % 4);
            let src = z / 2;
            let sub = (dx * 2 + dy) * 2 + z % 2;
            assert_eq!(*v, x.value().data()[src * 2 + sub / 4]);
        }
    }

    #[test]
    fn gradients_reach_every_group_after_one_step() {
        use crate::losses::{total_loss_op, LossConfig};
        let c = small_config();
        let mut params = NetworkParams::init(&c, 8).unwrap();
        let f = blob([12, 12, 12], [5.0, 6.0, 6.0]);
        let m = blob([12, 12, 12], [6.0, 6.0, 5.0]);
        let cfg = LossConfig { ncc_window: 3, ..Default::default() };
        let step = |params: &NetworkParams| {
            let g = Graph::new();
            let p = params.leaves(&g);
            let t = forward_graph(&g, &p, &c, &f, &m, c.levels()).unwrap();
            let (loss, _) = total_loss_op(&g, &t.warped, &f, &t.final_field, &cfg).unwrap();
            let grads = g.backward(&loss);
            p.vars().iter().map(|v| grads.get(v).cloned()).collect::<Vec<_>>()
        };
        let first = step(&params);
        for (i, gr) in first.iter().enumerate() {
            if let Some(gr) = gr {
                let t = params.tensor_mut(i);
                for (v, d) in t.data_mut().iter_mut().zip(gr.data()) {
                    *v -= 0.01 * d.signum();
                }
            }
        }
        let second = step(&params);
        let mut by_group = std::collections::BTreeMap::<String, bool>::new();
        for (e, gr) in params.entries().iter().zip(&second) {
            let nonzero = gr.as_ref().is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
            *by_group.entry(e.group.clone()).or_default() |= nonzero;
        }
        for (group, ok) in by_group {
            assert!(ok, "no gradient reaches {group}");
        }
    }
}
