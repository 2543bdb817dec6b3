use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Block, ModelConfig};
use crate::autograd::{bias_table_len, Graph, Tensor, Var};
use crate::error::Result;

/// Number of blocks in each attention module.
pub const SWIN_DEPTH: usize = 4;
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    /// `encoder`, `decoder.<k>` or `head.<k>`.
    pub group: String,
    pub tensor: Arc<Tensor>,
}

/// All learnable tensors of one model, in a fixed declaration order.
#[derive(Clone, Debug)]
pub struct NetworkParams {
    config: ModelConfig,
    entries: Vec<ParamEntry>,
    index: Arc<HashMap<String, usize>>,
}

enum Init {
    Zeros,
    Ones,
    /// Normal with std `gain / sqrt(fan_in)`.
    Kaiming { fan_in: usize },
    /// Normal with the given std, truncated at two standard deviations.
    Trunc(f32),
}

/// LeakyReLU(0.2) gain.
const KAIMING_GAIN: f32 = 1.386_750_5; // sqrt(2 / (1 + 0.2²))

struct Builder {
    rng: ChaCha8Rng,
    entries: Vec<ParamEntry>,
    group: String,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Kaiming { fan_in } => {
                let d = Normal::new(0.0, KAIMING_GAIN / (fan_in as f32).sqrt()).unwrap();
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
            Init::Trunc(std) => {
                let d = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| d.sample(&mut self.rng).clamp(-2.0 * std, 2.0 * std)).collect()
            }
        };
        self.entries.push(ParamEntry {
            name,
            group: self.group.clone(),
            tensor: Arc::new(Tensor::new(shape, data)),
        });
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, kernel: usize) {
        let fan_in = kernel.pow(3) * cin;
        self.push(format!("{prefix}.w"), vec![fan_in, cout], Init::Kaiming { fan_in });
        self.push(format!("{prefix}.b"), vec![cout], Init::Zeros);
    }

    fn zero_conv(&mut self, prefix: &str, cin: usize, cout: usize, kernel: usize) {
        self.push(format!("{prefix}.w"), vec![kernel.pow(3) * cin, cout], Init::Zeros);
        self.push(format!("{prefix}.b"), vec![cout], Init::Zeros);
    }

    fn dense(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.push(format!("{prefix}.w"), vec![cin, cout], Init::Trunc(0.02));
        self.push(format!("{prefix}.b"), vec![cout], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.g"), vec![c], Init::Ones);
        self.push(format!("{prefix}.b"), vec![c], Init::Zeros);
    }

    fn block(&mut self, prefix: &str, block: Block, cin: usize, cout: usize, window: [usize; 3]) {
        match block {
            Block::Conv => {
                self.conv(&format!("{prefix}.conv1"), cin, cout, 3);
                self.conv(&format!("{prefix}.conv2"), cout, cout, 3);
            }
            Block::Swin { heads } => {
                self.conv(&format!("{prefix}.reduce"), cin, cout, 1);
                for j in 0..SWIN_DEPTH {
                    let p = format!("{prefix}.block{j}");
                    self.norm(&format!("{p}.ln1"), cout);
                    self.dense(&format!("{p}.qkv"), cout, 3 * cout);
                    self.push(format!("{p}.rel_bias"), vec![bias_table_len(window), heads], Init::Trunc(0.02));
                    self.dense(&format!("{p}.proj"), cout, cout);
                    self.norm(&format!("{p}.ln2"), cout);
                    self.dense(&format!("{p}.fc1"), cout, MLP_RATIO * cout);
                    self.dense(&format!("{p}.fc2"), MLP_RATIO * cout, cout);
                }
            }
        }
    }
}

impl NetworkParams {
    /// Deterministic initialisation. Head output layers start at zero so
    /// the untrained network predicts the identity transform.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            entries: Vec::new(),
            group: "encoder".into(),
        };
        let w = config.window_size;
        for i in 0..config.levels() {
            b.block(&format!("enc.{i}"), config.encoder_block(i), config.encoder_in(i), config.encoder_dims[i], w);
        }
        for k in 1..=config.levels() {
            b.group = format!("decoder.{k}");
            let dim = config.decoder_dims[k - 1];
            if k > 1 {
                let prev = config.decoder_dims[k - 2];
                b.dense(&format!("dec.{k}.expand"), prev, 4 * prev);
            }
            b.block(&format!("dec.{k}"), config.decoder_block(k), config.decoder_in(k), dim, w);
            b.group = format!("head.{k}");
            if config.is_affine_stage(k) {
                b.conv(&format!("head.{k}.fc1"), dim, dim, 1);
                b.zero_conv(&format!("head.{k}.fc2"), dim, 12, 1);
            } else {
                b.zero_conv(&format!("head.{k}.conv"), dim, 3, 3);
            }
        }
        Ok(Self::from_entries(config.clone(), b.entries))
    }

    pub(crate) fn from_entries(config: ModelConfig, entries: Vec<ParamEntry>) -> Self {
        let index = entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        Self { config, entries, index: Arc::new(index) }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &*self.entries[i].tensor)
    }

    /// Mutable access for optimizers; clones a tensor that is still shared
    /// with a live graph.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[i].tensor)
    }

    /// Register every tensor as a trainable leaf of `g`.
    pub fn leaves(&self, g: &Graph) -> ParamVars {
        ParamVars {
            vars: self.entries.iter().map(|e| g.leaf(e.tensor.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Bitwise equality of all tensors and the config.
    pub fn same_values(&self, other: &NetworkParams) -> bool {
        self.config == other.config
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Parameters bound to one graph.
pub struct ParamVars {
    vars: Vec<Var>,
    index: Arc<HashMap<String, usize>>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> &Var {
        let i = self.index.get(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.vars[*i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Learnable scalar counts, in declaration order of the groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub groups: Vec<(String, usize)>,
}

pub fn count_params(params: &NetworkParams) -> ParamCount {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for e in params.entries() {
        let n = e.tensor.len();
        match groups.last_mut() {
            Some((g, c)) if *g == e.group => *c += n,
            _ => groups.push((e.group.clone(), n)),
        }
    }
    ParamCount { total: groups.iter().map(|(_, c)| c).sum(), groups }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Variant;

    #[test]
    fn heads_start_at_zero() {
        let p = NetworkParams::init(&ModelConfig::default(), 3).unwrap();
        assert!(p.get("head.1.fc2.w").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("head.1.fc1.w").unwrap().data().iter().any(|&v| v != 0.0));
        for k in 2..=5 {
            assert!(p.get(&format!("head.{k}.conv.w")).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::default();
        let a = NetworkParams::init(&c, 11).unwrap();
        assert!(a.same_values(&NetworkParams::init(&c, 11).unwrap()));
        assert!(!a.same_values(&NetworkParams::init(&c, 12).unwrap()));
        assert_eq!(count_params(&a), count_params(&NetworkParams::init(&c, 12).unwrap()));
    }

    #[test]
    fn empty_store_counts_zero() {
        let p = NetworkParams::from_entries(ModelConfig::default(), Vec::new());
        assert_eq!(count_params(&p), ParamCount { total: 0, groups: vec![] });
    }

    #[test]
    fn groups_cover_every_module() {
        let p = NetworkParams::init(&ModelConfig::default(), 0).unwrap();
        let names: Vec<String> = count_params(&p).groups.into_iter().map(|(g, _)| g).collect();
        let mut expected = vec!["encoder".to_string()];
        for k in 1..=5 {
            expected.push(format!("decoder.{k}"));
            expected.push(format!("head.{k}"));
        }
        assert_eq!(names, expected);
    }

    #[test]
    fn conv_module_count_matches_formula() {
        // encoder: two 3³ convs per level with bias
        let c = ModelConfig::default().with_variant(Variant::Baseline);
        let p = NetworkParams::init(&c, 0).unwrap();
        let enc = count_params(&p).groups[0].1;
        let dims = [1, 8, 16, 32, 64, 128];
        let expected: usize = (0..5)
            .map(|i| 27 * dims[i] * dims[i + 1] + dims[i + 1] + 27 * dims[i + 1] * dims[i + 1] + dims[i + 1])
            .sum();
        assert_eq!(enc, expected);
    }
}
