use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nicetrans::evaluation::LabeledPair;
use nicetrans::volumes::{
    com_shift, crop_or_pad, crop_or_pad_labels, load_labels, load_volume, normalize_intensity, shift_labels,
    shift_volume, LabelMap, Shape3, SyntheticPairSpec, Volume,
};
use nicetrans::Error;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths are relative to the manifest directory.
    pub fixed: PathBuf,
    pub moving: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_fixed: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_moving: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_field: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_affine: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SyntheticPairSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub pairs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn volume(dir: &Path, p: &Path) -> Result<Volume> {
    load_volume(dir.join(p)).with_context(|| format!("loading {}", p.display()))
}

fn labels(dir: &Path, p: &Path) -> Result<LabelMap> {
    load_labels(dir.join(p)).with_context(|| format!("loading {}", p.display()))
}

/// Image pairs of a manifest, without labels.
pub fn load_pairs(dir: &Path) -> Result<Vec<(String, Volume, Volume)>> {
    let m = Manifest::load(dir)?;
    m.pairs.iter().map(|e| Ok((e.id.clone(), volume(dir, &e.fixed)?, volume(dir, &e.moving)?))).collect()
}

/// Labelled pairs of a manifest; every entry must carry both label maps.
pub fn load_labeled(dir: &Path) -> Result<Vec<LabeledPair>> {
    let m = Manifest::load(dir)?;
    if m.pairs.is_empty() {
        return Err(Error::NoPairs.into());
    }
    m.pairs
        .iter()
        .map(|e| {
            let (Some(lf), Some(lm)) = (&e.labels_fixed, &e.labels_moving) else {
                bail!("pair {} is missing labels", e.id);
            };
            Ok(LabeledPair {
                id: e.id.clone(),
                fixed: volume(dir, &e.fixed)?,
                moving: volume(dir, &e.moving)?,
                labels_fixed: labels(dir, lf)?,
                labels_moving: labels(dir, lm)?,
            })
        })
        .collect()
}

/// Intensity normalisation, crop/pad to `target` (the fixed shape by
/// default) and integer center-of-mass alignment of the moving image.
/// Moving labels follow the moving image.
pub struct Prepared {
    pub fixed: Volume,
    pub moving: Volume,
    pub shift: [i64; 3],
    pub target: Shape3,
}

pub fn preprocess(fixed: &Volume, moving: &Volume, target: Option<Shape3>) -> Result<Prepared> {
    let target = target.unwrap_or(fixed.shape());
    let f = crop_or_pad(&normalize_intensity(fixed)?, target);
    let m = crop_or_pad(&normalize_intensity(moving)?, target);
    let shift = com_shift(&f, &m)?;
    Ok(Prepared { moving: shift_volume(&m, shift), fixed: f, shift, target })
}

pub fn preprocess_labeled(pair: &LabeledPair, target: Option<Shape3>) -> Result<LabeledPair> {
    let p = preprocess(&pair.fixed, &pair.moving, target)?;
    Ok(LabeledPair {
        id: pair.id.clone(),
        labels_fixed: crop_or_pad_labels(&pair.labels_fixed, p.target),
        labels_moving: shift_labels(&crop_or_pad_labels(&pair.labels_moving, p.target), p.shift),
        fixed: p.fixed,
        moving: p.moving,
    })
}

pub fn parse_shape(s: &str) -> Result<Shape3> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad shape {s:?}"))?;
    match parts[..] {
        [d, h, w] if d > 0 && h > 0 && w > 0 => Ok([d, h, w]),
        _ => bail!("shape must be three positive integers like 48,48,48, got {s:?}"),
    }
}
