use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use super::{loss_curve, train, Dataset, TrainConfig, TrainOptions};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_pair_timed, render_table, LabeledPair};
use crate::losses::LossConfig;
use crate::network::{count_params, ModelConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// `(L_a, L_d)` pairs.
    Steps,
    /// Jacobian penalty weight.
    Lambda,
    /// Which modules use attention.
    Variant,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" => Ok(Self::Steps),
            "lambda" => Ok(Self::Lambda),
            "variant" => Ok(Self::Variant),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?} (steps, lambda or variant)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SweepValue {
    Steps { affine: usize, deform: usize },
    Lambda(f64),
    Variant(Variant),
}

impl SweepValue {
    pub fn label(&self) -> String {
        match self {
            SweepValue::Steps { affine, deform } => format!("L_a={affine} L_d={deform}"),
            SweepValue::Lambda(l) => format!("lambda={l}"),
            SweepValue::Variant(v) => v.name().to_string(),
        }
    }

    /// `base` with this value substituted. A steps value rebuilds the
    /// channel layout for the new depth and keeps the variant.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match *self {
            SweepValue::Steps { affine, deform } => {
                c.model = ModelConfig::with_steps(affine, deform).with_variant(base.model.variant);
                c.model.window_size = base.model.window_size;
            }
            SweepValue::Lambda(l) => c.loss.lambda = l,
            SweepValue::Variant(v) => c.model.variant = v,
        }
        c
    }

    /// Whether this is the published default setting for its axis.
    pub fn is_default(&self) -> bool {
        let model = ModelConfig::default();
        match *self {
            SweepValue::Steps { affine, deform } => (affine, deform) == (model.affine_steps, model.deform_steps),
            SweepValue::Lambda(l) => l == LossConfig::default().lambda,
            SweepValue::Variant(v) => v == model.variant,
        }
    }
}

/// Parse comma-separated values: `1:4` for steps, numbers for lambda and
/// variant names for variant.
pub fn parse_sweep_values(axis: SweepAxis, text: &str) -> Result<Vec<SweepValue>> {
    let bad = |v: &str| Error::Config(format!("bad {axis:?} sweep value {v:?}"));
    let values = text
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| match axis {
            SweepAxis::Steps => {
                let (a, d) = v.split_once(':').ok_or_else(|| bad(v))?;
                Ok(SweepValue::Steps {
                    affine: a.trim().parse().map_err(|_| bad(v))?,
                    deform: d.trim().parse().map_err(|_| bad(v))?,
                })
            }
            SweepAxis::Lambda => {
                let l: f64 = v.parse().map_err(|_| bad(v))?;
                if !(l.is_finite() && l >= 0.0) {
                    return Err(bad(v));
                }
                Ok(SweepValue::Lambda(l))
            }
            SweepAxis::Variant => v.parse().map(SweepValue::Variant).map_err(|_| bad(v)),
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::Config("no sweep values given".into()));
    }
    Ok(values)
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: SweepValue,
    pub config: TrainConfig,
    pub is_default: bool,
    pub params: usize,
    pub dsc_before: f64,
    pub dsc_after: f64,
    pub njd_percent: f64,
    /// Median forward-pass seconds per registration.
    pub runtime_seconds: f64,
    pub train_seconds: f64,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Aligned table; `*` marks the default setting.
    pub fn to_text(&self) -> String {
        let header = ["config", "params", "DSC", "NJD (%)", "runtime (s)", "train (s)"].map(String::from);
        let rows: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                let mut label = r.value.label();
                if r.is_default {
                    label.push_str(" *");
                }
                [
                    label,
                    r.params.to_string(),
                    format!("{:.4}", r.dsc_after),
                    format!("{:.4}", r.njd_percent),
                    format!("{:.3}", r.runtime_seconds),
                    format!("{:.1}", r.train_seconds),
                ]
            })
            .collect();
        render_table(&header, &rows)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "config,is_default,params,dsc_before,dsc_after,njd_percent,runtime_s,train_s,final_loss\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3},{}",
                r.value.label(),
                r.is_default,
                r.params,
                r.dsc_before,
                r.dsc_after,
                r.njd_percent,
                r.runtime_seconds,
                r.train_seconds,
                r.final_loss.map(|l| l.to_string()).unwrap_or_default()
            );
        }
        out
    }
}

/// One training run per value on the same data and seed, each scored on
/// `eval` (mean over pairs).
pub fn sweep(base: &TrainConfig, values: &[SweepValue], dataset: &Dataset, eval: &[LabeledPair]) -> Result<SweepReport> {
    if eval.is_empty() {
        return Err(Error::NoPairs);
    }
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let config = value.apply(base);
        config.validate()?;
        let t = Instant::now();
        let run = train(&config, dataset, TrainOptions::default())?;
        let train_seconds = t.elapsed().as_secs_f64();
        let params = &run.checkpoint.params;
        let mut sums = [0f64; 4];
        for pair in eval {
            let (rec, _) = evaluate_pair_timed(params, pair, config.field_choice(), 3)?;
            sums[0] += rec.dsc_before;
            sums[1] += rec.dsc_after;
            sums[2] += rec.njd_percent;
            sums[3] += rec.runtime_seconds;
        }
        let n = eval.len() as f64;
        rows.push(SweepRow {
            value: *value,
            is_default: value.is_default(),
            params: count_params(params).total,
            dsc_before: sums[0] / n,
            dsc_after: sums[1] / n,
            njd_percent: sums[2] / n,
            runtime_seconds: sums[3] / n,
            train_seconds,
            final_loss: loss_curve(&run.log).last().copied(),
            config,
        });
    }
    Ok(SweepReport { rows })
}
