//! Seeded Monte-Carlo estimates.
//!
//! Trials are cut into fixed-size chunks. Chunk `i` gets its own stream
//! seeded from `(seed, i)`, chunks run on the rayon pool, and partial results
//! are merged in chunk order. The result is therefore a function of the seed
//! and trial count alone, whatever the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{block_efficiency, spec_decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::{sample_block, NextToken, Token};
use crate::scalar::Scalar;
use crate::verify::{verify, DraftBlock, Verifier};

pub const CHUNK_TRIALS: u64 = 1024;

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McStat {
    pub mean: f64,
    pub se: f64,
    pub n: u64,
}

impl McStat {
    /// `|mean - target| <= k * se`, with a floor for zero-variance samples.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se + 1e-12
    }
}

/// Running sums for a mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            n: self.n + other.n,
            sum: self.sum + other.sum,
            sum_sq: self.sum_sq + other.sum_sq,
        }
    }

    pub fn stat(&self) -> McStat {
        let n = self.n.max(1) as f64;
        let mean = self.sum / n;
        let var = if self.n > 1 {
            ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        McStat {
            mean,
            se: (var / n).sqrt(),
            n: self.n,
        }
    }
}

/// Stream seed for chunk `index` (a splitmix64 step over both inputs).
pub fn chunk_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `trials` independent trials and folds them into one accumulator.
///
/// `trial` updates a chunk-local accumulator; `merge` combines chunk results
/// left to right.
pub fn run_trials<A, F, G>(trials: u64, seed: u64, trial: F, merge: G) -> A
where
    A: Default + Send,
    F: Fn(&mut ChaCha8Rng, &mut A) + Sync,
    G: Fn(A, A) -> A,
{
    let chunks = trials.div_ceil(CHUNK_TRIALS);
    let parts: Vec<A> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(seed, c));
            let mut acc = A::default();
            let n = CHUNK_TRIALS.min(trials - c * CHUNK_TRIALS);
            for _ in 0..n {
                trial(&mut rng, &mut acc);
            }
            acc
        })
        .collect();
    parts.into_iter().fold(A::default(), merge)
}

fn check_trials(trials: u64) -> Result<()> {
    if trials == 0 {
        Err(Error::InvalidArgument("trials must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Accepted length of one verification after `prefix`, averaged over
/// drafts from the small model.
pub fn mc_tau<S, A, B>(
    small: &A,
    big: &B,
    block_len: usize,
    prefix: &[Token],
    verifier: Verifier,
    trials: u64,
    seed: u64,
) -> Result<McStat>
where
    S: Scalar,
    A: NextToken<S> + Sync + ?Sized,
    B: NextToken<S> + Sync + ?Sized,
{
    check_trials(trials)?;
    if block_len == 0 {
        return Err(Error::InvalidArgument("block length must be positive".into()));
    }
    let m = run_trials(
        trials,
        seed,
        |rng, acc: &mut Moments| {
            let draft = sample_block(small, prefix, block_len, rng);
            let block = DraftBlock::score(small, big, prefix, draft).expect("draft from the same vocab");
            acc.push(verify(verifier, &block, rng).tau as f64);
        },
        Moments::merge,
    );
    Ok(m.stat())
}

/// Per-decode block efficiency over full decodes of up to `horizon` tokens.
#[allow(clippy::too_many_arguments)]
pub fn mc_block_efficiency<S, A, B>(
    small: &A,
    big: &B,
    prompt: &[Token],
    block_len: usize,
    verifier: Verifier,
    horizon: usize,
    exclude_partial: bool,
    trials: u64,
    seed: u64,
) -> Result<McStat>
where
    S: Scalar,
    A: NextToken<S> + Sync + ?Sized,
    B: NextToken<S> + Sync + ?Sized,
{
    check_trials(trials)?;
    let config = DecodeConfig {
        block_len,
        verifier,
        max_tokens: horizon,
    };
    // surface configuration errors once instead of per trial
    spec_decode(big, small, prompt, config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let m = run_trials(
        trials,
        seed,
        |rng, acc: &mut Moments| {
            let trace = spec_decode(big, small, prompt, config, rng).expect("validated config");
            // a lone partial iteration still has a well-defined ratio
            let eff = block_efficiency(&trace, exclude_partial)
                .or_else(|| block_efficiency(&trace, false))
                .expect("at least one iteration");
            acc.push(eff);
        },
        Moments::merge,
    );
    Ok(m.stat())
}
