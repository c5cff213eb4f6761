use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subset {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            other => Err(DataError::Malformed(format!("unknown subset `{other}`"))),
        }
    }
}

/// Train/validation/test proportions and the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: [0.7, 0.2, 0.1],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.ratios.iter().all(|r| r.is_finite() && *r >= 0.0)
            && (self.ratios.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(DataError::InvalidRatios(self.ratios))
        }
    }

    /// Subset sizes for `n` items: floor of each share, then leftover items
    /// go one at a time to train, val, test (skipping zero-ratio subsets).
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let nonzero: Vec<usize> = (0..3).filter(|&i| self.ratios[i] > 0.0).collect();
        if n < nonzero.len() {
            return Err(DataError::TooFewItems {
                n,
                required: nonzero.len(),
            });
        }
        // the epsilon keeps products such as 0.29·100 from flooring to 28
        let mut sizes = self.ratios.map(|r| (r * n as f64 + 1e-9).floor() as usize);
        let mut leftover = n - sizes.iter().sum::<usize>();
        for &i in nonzero.iter().cycle() {
            if leftover == 0 {
                break;
            }
            sizes[i] += 1;
            leftover -= 1;
        }
        Ok(sizes)
    }
}

/// Disjoint index sets covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, subset: Subset) -> &[usize] {
        match subset {
            Subset::Train => &self.train,
            Subset::Val => &self.val,
            Subset::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, subset: Subset) -> &mut Vec<usize> {
        match subset {
            Subset::Train => &mut self.train,
            Subset::Val => &mut self.val,
            Subset::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Subset of each id in `0..len()`.
    pub fn assignments(&self) -> Vec<(usize, Subset)> {
        let mut out: Vec<(usize, Subset)> = Subset::ALL
            .iter()
            .flat_map(|&s| self.get(s).iter().map(move |&i| (i, s)))
            .collect();
        out.sort_unstable_by_key(|&(i, _)| i);
        out
    }
}

/// Seeded shuffle of `0..n` cut into train/val/test.
pub fn split_dataset(n: usize, spec: &SplitSpec) -> Result<Split> {
    let sizes = spec.sizes(n)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut rest = idx.as_slice();
    let mut take = |k: usize| {
        let (head, tail) = rest.split_at(k);
        rest = tail;
        let mut v = head.to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: take(sizes[0]),
        val: take(sizes[1]),
        test: take(sizes[2]),
    })
}
