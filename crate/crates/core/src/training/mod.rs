//! Unsupervised training loop, dataset sampling and hyper-parameter sweeps.

mod data;
mod optim;
mod sweep;

pub use data::{sample_pair, Dataset, Draw};
pub use optim::{clip_grad_norm, Adam, BETA1, BETA2, EPSILON};
pub use sweep::{parse_sweep_values, sweep, SweepAxis, SweepReport, SweepRow, SweepValue};

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::evaluation::{score_field, FieldChoice, LabeledPair};
use crate::losses::{total_loss_op, LossBreakdown, LossConfig};
use crate::network::{forward_graph, register, save_checkpoint, Checkpoint, ModelConfig, NetworkParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation and checkpoint period; 0 disables both.
    pub checkpoint_interval: usize,
    /// Upper bound on the held-out pairs scored at each validation.
    pub validation_pairs: usize,
    /// Train only the affine stages and use `φ_{L_a}` for the loss.
    pub affine_only: bool,
    /// Joint gradient L2 norm limit; off by default.
    pub grad_clip: Option<f64>,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: optimizer settings from the published protocol,
    /// far fewer iterations.
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: 1e-4,
            batch_size: 1,
            seed: 0,
            checkpoint_interval: 100,
            validation_pairs: 4,
            affine_only: false,
            grad_clip: None,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The full-scale protocol: 100,000 iterations.
    pub fn full_scale() -> Self {
        Self { iterations: 100_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.affine_only && self.model.affine_steps == 0 {
            return Err(Error::Config("affine_only needs at least one affine step".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Decoder stages run during training.
    pub fn stages(&self) -> usize {
        if self.affine_only {
            self.model.affine_steps
        } else {
            self.model.levels()
        }
    }

    pub fn field_choice(&self) -> FieldChoice {
        if self.affine_only {
            FieldChoice::Affine
        } else {
            FieldChoice::Final
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogEntry {
    Step {
        iteration: usize,
        fixed: usize,
        moving: usize,
        loss: LossBreakdown,
    },
    Validation {
        iteration: usize,
        pairs: usize,
        dsc: f64,
        njd_percent: f64,
    },
}

impl fmt::Display for LogEntry {
    /// One `key=value` line; floats print in shortest round-trip form.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogEntry::Step { iteration, fixed, moving, loss } => write!(
                f,
                "step iter={iteration} fixed={fixed} moving={moving} total={} ncc={} diffusion={} jd={}",
                loss.total, loss.ncc, loss.diffusion, loss.jd
            ),
            LogEntry::Validation { iteration, pairs, dsc, njd_percent } => {
                write!(f, "validation iter={iteration} pairs={pairs} dsc={dsc} njd_percent={njd_percent}")
            }
        }
    }
}

/// Total loss per logged step, in order.
pub fn loss_curve(log: &[LogEntry]) -> Vec<f64> {
    log.iter()
        .filter_map(|e| match e {
            LogEntry::Step { loss, .. } => Some(loss.total),
            _ => None,
        })
        .collect()
}

/// Trailing moving average; the first values average over what exists.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Held-out pairs for periodic DSC/NJD monitoring.
    pub validation: &'a [LabeledPair],
    /// Continue from this checkpoint instead of initialising.
    pub resume: Option<Checkpoint>,
    /// Periodic checkpoints are written here as `checkpoint_<iter>.ckpt`.
    pub checkpoint_dir: Option<&'a Path>,
    /// Log lines are appended here as they are produced.
    pub log: Option<&'a mut dyn Write>,
}

pub struct TrainResult {
    pub checkpoint: Checkpoint,
    /// Entries produced by this call only.
    pub log: Vec<LogEntry>,
}

fn validate_model(params: &NetworkParams, pairs: &[LabeledPair], choice: FieldChoice) -> Result<(f64, f64)> {
    let mut dsc = 0.0;
    let mut njd = 0.0;
    for pair in pairs {
        let r = register(params, &pair.fixed, &pair.moving)?;
        let (_, after, n) = score_field(pair, r.field(choice)?)?;
        dsc += after;
        njd += n;
    }
    let n = pairs.len() as f64;
    Ok((dsc / n, njd / n))
}

/// Run `config.iterations` total iterations (counting those already in a
/// resumed checkpoint). Each iteration samples `batch_size` pairs, runs the
/// forward pass, and applies one Adam step on the mean loss.
pub fn train(config: &TrainConfig, dataset: &Dataset, mut opts: TrainOptions) -> Result<TrainResult> {
    config.validate()?;
    dataset.validate()?;
    let (mut params, start, mut adam, mut rng) = match opts.resume.take() {
        Some(ck) => {
            if ck.params.config() != &config.model {
                return Err(Error::Config("resume checkpoint was trained with a different model config".into()));
            }
            if ck.seed != config.seed {
                return Err(Error::Config(format!("resume checkpoint seed {} differs from {}", ck.seed, config.seed)));
            }
            let adam = match ck.optimizer {
                Some(state) => Adam::from_state(config.learning_rate, &ck.params, state)?,
                None => Adam::new(config.learning_rate, &ck.params),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_word_pos(ck.rng_word_pos);
            (ck.params, ck.iteration, adam, rng)
        }
        None => {
            let params = NetworkParams::init(&config.model, config.seed)?;
            let adam = Adam::new(config.learning_rate, &params);
            (params, 0, adam, ChaCha8Rng::seed_from_u64(config.seed))
        }
    };
    if start > config.iterations {
        return Err(Error::Config(format!(
            "checkpoint is at iteration {start}, past the requested {}",
            config.iterations
        )));
    }
    let validation = &opts.validation[..opts.validation.len().min(config.validation_pairs)];
    let stages = config.stages();
    let mut log = Vec::new();
    let mut emit = |entry: LogEntry, sink: &mut Option<&mut dyn Write>| -> Result<()> {
        if let Some(w) = sink.as_mut() {
            writeln!(w, "{entry}").map_err(|e| Error::io("<training log>", e))?;
        }
        log.push(entry);
        Ok(())
    };

    let snapshot = |params: &NetworkParams, adam: &Adam, rng: &ChaCha8Rng, iteration: usize| Checkpoint {
        params: params.clone(),
        seed: config.seed,
        iteration,
        rng_word_pos: rng.get_word_pos(),
        optimizer: Some(adam.state().clone()),
        metadata: serde_json::Value::Null,
    };

    for iteration in start + 1..=config.iterations {
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; params.entries().len()];
        let mut sums = [0f64; 3];
        let mut draws = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let draw = sample_pair(dataset, &mut rng)?;
            let g = Graph::new();
            let vars = params.leaves(&g);
            let trace = forward_graph(&g, &vars, &config.model, draw.fixed, draw.moving, stages)?;
            let (loss, parts) = total_loss_op(&g, &trace.warped, draw.fixed, &trace.final_field, &config.loss)?;
            if !parts.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    fixed: draw.fixed_index,
                    moving: draw.moving_index,
                    ncc: parts.ncc,
                    diffusion: parts.diffusion,
                    jd: parts.jd,
                });
            }
            drop(trace);
            let mut gradients = g.backward(&loss);
            let scale = 1.0 / config.batch_size as f32;
            for (acc, var) in grads.iter_mut().zip(vars.vars()) {
                if let Some(t) = gradients.take(var) {
                    let acc = acc.get_or_insert_with(|| vec![0.0; t.len()]);
                    acc.iter_mut().zip(t.data()).for_each(|(a, &x)| *a += scale * x);
                }
            }
            sums[0] += parts.ncc;
            sums[1] += parts.diffusion;
            sums[2] += parts.jd;
            draws.push((draw.fixed_index, draw.moving_index));
        }
        if let Some(c) = config.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        adam.step(&mut params, &grads);

        let b = config.batch_size as f64;
        let loss = LossBreakdown::new(sums[0] / b, sums[1] / b, sums[2] / b, &config.loss);
        let (fixed, moving) = draws[0];
        emit(LogEntry::Step { iteration, fixed, moving, loss }, &mut opts.log)?;

        if config.checkpoint_interval > 0 && iteration % config.checkpoint_interval == 0 {
            if !validation.is_empty() {
                let (dsc, njd_percent) = validate_model(&params, validation, config.field_choice())?;
                emit(LogEntry::Validation { iteration, pairs: validation.len(), dsc, njd_percent }, &mut opts.log)?;
            }
            if let Some(dir) = opts.checkpoint_dir {
                let ck = snapshot(&params, &adam, &rng, iteration);
                save_checkpoint(dir.join(format!("checkpoint_{iteration:06}.ckpt")), &ck)?;
            }
        }
    }
    let checkpoint = snapshot(&params, &adam, &rng, config.iterations);
    Ok(TrainResult { checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Variant;
    use crate::volumes::{synth_pair, SyntheticPairSpec};

    fn tiny_config(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            learning_rate: 1e-3,
            seed: 3,
            checkpoint_interval: 0,
            loss: LossConfig { ncc_window: 5, ..LossConfig::default() },
            model: ModelConfig {
                affine_steps: 1,
                deform_steps: 1,
                encoder_dims: vec![4, 8],
                decoder_dims: vec![8, 4],
                attn_heads: vec![2, 0],
                window_size: [3, 3, 3],
                variant: Variant::TransDecoder,
            },
            ..TrainConfig::default()
        }
    }

    fn pair_dataset(seed: u64) -> (Dataset, LabeledPair) {
        let s = SyntheticPairSpec::randomized(seed, [12, 12, 12], 0.07, 1.0, 0.03, 1.0, 2.0);
        let p = synth_pair(&s).unwrap();
        let lp = LabeledPair {
            id: "p".into(),
            fixed: p.fixed.clone(),
            moving: p.moving.clone(),
            labels_fixed: p.labels_fixed,
            labels_moving: p.labels_moving,
        };
        (Dataset::Pairs(vec![(p.fixed, p.moving)]), lp)
    }

    #[test]
    fn zero_iterations_returns_initialisation() {
        let cfg = tiny_config(0);
        let (data, _) = pair_dataset(1);
        let r = train(&cfg, &data, TrainOptions::default()).unwrap();
        assert!(r.log.is_empty());
        assert_eq!(r.checkpoint.iteration, 0);
        assert!(r.checkpoint.params.same_values(&NetworkParams::init(&cfg.model, cfg.seed).unwrap()));
    }

    #[test]
    fn resume_matches_continuous_run() {
        let (data, _) = pair_dataset(2);
        let full = train(&tiny_config(6), &data, TrainOptions::default()).unwrap();
        let first = train(&tiny_config(4), &data, TrainOptions::default()).unwrap();
        let rest = train(
            &tiny_config(6),
            &data,
            TrainOptions { resume: Some(first.checkpoint), ..TrainOptions::default() },
        )
        .unwrap();
        assert!(rest.checkpoint.same_as(&full.checkpoint));
        let joined: Vec<LogEntry> = first.log.into_iter().chain(rest.log).collect();
        assert_eq!(joined, full.log);
    }

    #[test]
    fn resume_rejects_other_model() {
        let (data, _) = pair_dataset(2);
        let first = train(&tiny_config(1), &data, TrainOptions::default()).unwrap();
        let mut cfg = tiny_config(2);
        cfg.model.variant = Variant::Baseline;
        let r = train(&cfg, &data, TrainOptions { resume: Some(first.checkpoint), ..TrainOptions::default() });
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn log_lines_and_validation() {
        let (data, pair) = pair_dataset(4);
        let mut cfg = tiny_config(4);
        cfg.checkpoint_interval = 2;
        let dir = tempfile::tempdir().unwrap();
        let mut buf: Vec<u8> = Vec::new();
        let validation = [pair];
        let r = train(
            &cfg,
            &data,
            TrainOptions {
                validation: &validation,
                checkpoint_dir: Some(dir.path()),
                log: Some(&mut buf),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().next().unwrap().starts_with("step iter=1 fixed=0 moving=0 total="));
        assert_eq!(text.lines().filter(|l| l.starts_with("validation iter=")).count(), 2);
        assert_eq!(loss_curve(&r.log).len(), 4);
        assert!(dir.path().join("checkpoint_000002.ckpt").exists());
        assert!(dir.path().join("checkpoint_000004.ckpt").exists());
    }

    #[test]
    fn affine_only_leaves_deformable_stages_untouched() {
        let (data, _) = pair_dataset(5);
        let mut cfg = tiny_config(3);
        cfg.affine_only = true;
        let init = NetworkParams::init(&cfg.model, cfg.seed).unwrap();
        let r = train(&cfg, &data, TrainOptions::default()).unwrap();
        for (a, b) in init.entries().iter().zip(r.checkpoint.params.entries()) {
            let changed = a.tensor.data() != b.tensor.data();
            let deformable = a.group.ends_with(".2");
            assert!(!(deformable && changed), "{} changed", a.name);
        }
        assert!(r.checkpoint.params.get("head.1.fc2.w").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn config_errors() {
        let mut c = tiny_config(1);
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config(1);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config(1);
        c.model.affine_steps = 0;
        c.model.deform_steps = 2;
        c.model.attn_heads = vec![2, 0];
        c.affine_only = true;
        assert!(c.validate().is_err());
        let data = Dataset::Images(vec![]);
        assert!(matches!(train(&tiny_config(1), &data, TrainOptions::default()), Err(Error::DatasetTooSmall { .. })));
    }

    #[test]
    fn batch_averages_losses() {
        let (data, _) = pair_dataset(6);
        let mut cfg = tiny_config(1);
        let single = train(&cfg, &data, TrainOptions::default()).unwrap();
        cfg.batch_size = 2;
        let double = train(&cfg, &data, TrainOptions::default()).unwrap();
        // the same pair twice: identical mean loss and gradient
        assert_eq!(loss_curve(&single.log), loss_curve(&double.log));
        assert!(single.checkpoint.params.same_values(&double.checkpoint.params));
    }

    #[test]
    fn smoothing() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(smoothed(&[], 50), Vec::<f64>::new());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = TrainConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        assert_eq!(TrainConfig::full_scale().iterations, 100_000);
        assert!(serde_json::from_str::<TrainConfig>("{\"bogus\": 1}").is_err());
    }
}
