//! Browser demo: generate a synthetic pair, warp the moving image by a
//! fraction of the known alignment field, and inspect the Jacobian map and
//! loss terms.

use nicetrans::evaluation::{difference_map, dsc};
use nicetrans::field_algebra::{jacobian_det, njd_percent, warp, warp_labels, DisplacementField, Interpolation};
use nicetrans::losses::{total_loss, LossBreakdown, LossConfig};
use nicetrans::volumes::{synth_pair, SyntheticPair, SyntheticPairSpec, Volume};
use nicetrans::Result;
use wasm_bindgen::prelude::*;

/// Which image a slice is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Fixed,
    Moving,
    Warped,
    Difference,
    Jacobian,
}

impl Layer {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "fixed" => Self::Fixed,
            "moving" => Self::Moving,
            "warped" => Self::Warped,
            "difference" => Self::Difference,
            "jacobian" => Self::Jacobian,
            _ => return None,
        })
    }
}

/// Plain state behind the exported wrapper.
pub struct DemoState {
    pair: SyntheticPair,
    field: DisplacementField,
    warped: Volume,
    jacobian: Volume,
    loss: LossBreakdown,
    dsc: f64,
}

fn ncc_config(size: usize) -> LossConfig {
    // the window has to fit inside small demo volumes
    let w = if size >= 9 { 9 } else { (size - 1) | 1 };
    LossConfig { ncc_window: w, ..LossConfig::default() }
}

impl DemoState {
    pub fn new(seed: u64, size: usize, rotation_deg: f64, translation: f64, deform_amp: f64) -> Result<Self> {
        let spec = SyntheticPairSpec::randomized(
            seed,
            [size; 3],
            rotation_deg.to_radians(),
            translation,
            0.0,
            deform_amp,
            size as f64 / 8.0,
        );
        let pair = synth_pair(&spec)?;
        let mut s = Self {
            field: DisplacementField::zeros(pair.fixed.shape()),
            warped: pair.moving.clone(),
            jacobian: Volume::filled(pair.fixed.shape(), 1.0),
            loss: LossBreakdown::new(0.0, 0.0, 0.0, &LossConfig::default()),
            dsc: 0.0,
            pair,
        };
        s.set_fraction(0.0)?;
        Ok(s)
    }

    /// Warp the moving image by `fraction` times the true alignment field.
    pub fn set_fraction(&mut self, fraction: f64) -> Result<()> {
        let t = &self.pair.truth.field;
        let data = t.data().iter().map(|&v| v * fraction as f32).collect();
        self.field = DisplacementField::new(t.shape(), data)?;
        self.warped = warp(&self.pair.moving, &self.field, Interpolation::Linear)?;
        self.jacobian = jacobian_det(&self.field);
        let [n, _, _] = t.shape();
        self.loss = total_loss(&self.warped, &self.pair.fixed, &self.field, &ncc_config(n))?;
        self.dsc = dsc(&self.pair.labels_fixed, &warp_labels(&self.pair.labels_moving, &self.field)?)?;
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.pair.fixed.shape()[0]
    }

    /// Row-major `H × W` slice at `index` along axis 0.
    pub fn slice(&self, layer: Layer, index: usize) -> Result<Vec<f32>> {
        let owned;
        let v = match layer {
            Layer::Fixed => &self.pair.fixed,
            Layer::Moving => &self.pair.moving,
            Layer::Warped => &self.warped,
            Layer::Difference => {
                owned = difference_map(&self.warped, &self.pair.fixed)?;
                &owned
            }
            Layer::Jacobian => &self.jacobian,
        };
        let [d, h, w] = v.shape();
        let x = index.min(d - 1);
        Ok(v.data()[x * h * w..(x + 1) * h * w].to_vec())
    }

    pub fn loss(&self) -> LossBreakdown {
        self.loss
    }

    pub fn dsc(&self) -> f64 {
        self.dsc
    }

    pub fn njd_percent(&self) -> f64 {
        njd_percent(&self.field)
    }
}

/// Loss terms and overlap for the current warp.
#[wasm_bindgen]
#[derive(Clone, Copy, Debug)]
pub struct Metrics {
    pub total: f64,
    pub ncc: f64,
    pub diffusion: f64,
    pub jd: f64,
    pub dsc: f64,
    pub njd_percent: f64,
}

#[wasm_bindgen]
pub struct Demo {
    state: DemoState,
}

fn js(e: nicetrans::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    /// Generate a new synthetic pair of `size³` voxels.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize, rotation_deg: f64, translation: f64, deform_amp: f64) -> Result<Demo, JsError> {
        if size < 12 {
            return Err(JsError::new("size must be at least 12"));
        }
        let state = DemoState::new(seed as u64, size, rotation_deg, translation, deform_amp).map_err(js)?;
        Ok(Demo { state })
    }

    pub fn size(&self) -> usize {
        self.state.size()
    }

    /// Warp by a fraction (0 = none, 1 = full) of the true alignment field.
    pub fn set_fraction(&mut self, fraction: f64) -> Result<(), JsError> {
        self.state.set_fraction(fraction).map_err(js)
    }

    /// `fixed`, `moving`, `warped`, `difference` or `jacobian`.
    pub fn slice(&self, layer: &str, index: usize) -> Result<Vec<f32>, JsError> {
        let layer = Layer::parse(layer).ok_or_else(|| JsError::new(&format!("unknown layer {layer:?}")))?;
        self.state.slice(layer, index).map_err(js)
    }

    pub fn metrics(&self) -> Metrics {
        let l = self.state.loss();
        Metrics {
            total: l.total,
            ncc: l.ncc,
            diffusion: l.diffusion,
            jd: l.jd,
            dsc: self.state.dsc(),
            njd_percent: self.state.njd_percent(),
        }
    }
}
