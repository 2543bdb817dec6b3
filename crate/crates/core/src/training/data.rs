use rand::Rng;

use crate::error::{Error, Result};
use crate::volumes::Volume;

/// Training images.
#[derive(Clone, Debug)]
pub enum Dataset {
    /// Any two distinct images form a pair, in either order.
    Images(Vec<Volume>),
    /// Only the listed (fixed, moving) pairs are used.
    Pairs(Vec<(Volume, Volume)>),
}

/// One sampled training pair. For `Dataset::Pairs` both indices name the
/// chosen pair.
#[derive(Clone, Copy, Debug)]
pub struct Draw<'a> {
    pub fixed: &'a Volume,
    pub moving: &'a Volume,
    pub fixed_index: usize,
    pub moving_index: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Images(v) => v.len(),
            Dataset::Pairs(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let (needed, found) = match self {
            Dataset::Images(v) => (2, v.len()),
            Dataset::Pairs(p) => (1, p.len()),
        };
        if found < needed {
            return Err(Error::DatasetTooSmall { needed, found });
        }
        let mut shapes = match self {
            Dataset::Images(v) => v.iter().map(Volume::shape).collect::<Vec<_>>(),
            Dataset::Pairs(p) => p.iter().flat_map(|(f, m)| [f.shape(), m.shape()]).collect(),
        };
        let first = shapes[0];
        shapes.retain(|s| *s != first);
        match shapes.first() {
            Some(s) => Err(Error::shape(&first, s)),
            None => Ok(()),
        }
    }
}

/// Draw two distinct images uniformly; which one is fixed is part of the
/// draw.
pub fn sample_pair<'a>(dataset: &'a Dataset, rng: &mut impl Rng) -> Result<Draw<'a>> {
    match dataset {
        Dataset::Images(images) => {
            let n = images.len();
            if n < 2 {
                return Err(Error::DatasetTooSmall { needed: 2, found: n });
            }
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            Ok(Draw { fixed: &images[i], moving: &images[j], fixed_index: i, moving_index: j })
        }
        Dataset::Pairs(pairs) => {
            if pairs.is_empty() {
                return Err(Error::DatasetTooSmall { needed: 1, found: 0 });
            }
            let i = rng.random_range(0..pairs.len());
            Ok(Draw { fixed: &pairs[i].0, moving: &pairs[i].1, fixed_index: i, moving_index: i })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize) -> Dataset {
        Dataset::Images((0..n).map(|i| Volume::filled([2, 2, 2], i as f32)).collect())
    }

    #[test]
    fn two_images_give_both_orders() {
        let d = images(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [false; 2];
        for _ in 0..50 {
            let draw = sample_pair(&d, &mut rng).unwrap();
            assert_ne!(draw.fixed_index, draw.moving_index);
            seen[draw.fixed_index] = true;
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn same_seed_same_sequence() {
        let d = images(6);
        let seq = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| {
                let x = sample_pair(&d, &mut rng).unwrap();
                (x.fixed_index, x.moving_index)
            }).collect::<Vec<_>>()
        };
        assert_eq!(seq(4), seq(4));
        assert_ne!(seq(4), seq(5));
    }

    #[test]
    fn too_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_pair(&images(1), &mut rng), Err(Error::DatasetTooSmall { needed: 2, found: 1 })));
        assert!(images(1).validate().is_err());
        assert!(Dataset::Pairs(vec![]).validate().is_err());
    }

    #[test]
    fn mixed_shapes_rejected() {
        let d = Dataset::Images(vec![Volume::zeros([2, 2, 2]), Volume::zeros([2, 2, 3])]);
        assert!(matches!(d.validate(), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn unordered_pairs_are_uniform() {
        let n = 10;
        let draws = 10_000;
        let d = images(n);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = vec![vec![0usize; n]; n];
        for _ in 0..draws {
            let x = sample_pair(&d, &mut rng).unwrap();
            let (a, b) = (x.fixed_index.min(x.moving_index), x.fixed_index.max(x.moving_index));
            counts[a][b] += 1;
        }
        let pairs = n * (n - 1) / 2;
        let p = 1.0 / pairs as f64;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for a in 0..n {
            for b in a + 1..n {
                let c = counts[a][b] as f64;
                assert!((c - expected).abs() < 3.0 * sigma, "pair ({a},{b}) drawn {c} times");
                chi2 += (c - expected).powi(2) / expected;
            }
        }
        // 99.9% quantile of chi-square with 44 degrees of freedom
        assert!(chi2 < 78.75, "chi2 = {chi2}");
    }
}
