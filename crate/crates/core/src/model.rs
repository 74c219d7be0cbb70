//! Finite-vocabulary autoregressive models.
//!
//! A model is anything that can produce the next-token distribution for an
//! arbitrary prefix ([`NextToken`]). [`ArModel`] covers the explicit toy
//! families (memoryless, Markov, context tables); the decoding loop adds a
//! residual wrapper on top of the same trait.
//!
//! Every model honours end-of-sequence absorption: once the prefix contains
//! the eos token, the next token is eos with probability one.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{ordered_sum, Scalar};

pub type Token = u32;
pub type TokenSeq = Vec<Token>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    eos: Option<Token>,
}

impl Vocab {
    pub fn new(size: usize, eos: Option<Token>) -> Result<Self> {
        if size < 2 {
            return Err(Error::VocabTooSmall(size));
        }
        if let Some(e) = eos {
            if e as usize >= size {
                return Err(Error::EosOutOfRange { eos: e, size });
            }
        }
        Ok(Self { size, eos })
    }

    /// Vocabulary without an end-of-sequence token (pure memoryless sources).
    pub fn open(size: usize) -> Result<Self> {
        Self::new(size, None)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> Option<Token> {
        self.eos
    }

    pub fn is_eos(&self, t: Token) -> bool {
        self.eos == Some(t)
    }

    pub fn check_token(&self, t: Token) -> Result<()> {
        if (t as usize) < self.size {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                token: t,
                size: self.size,
            })
        }
    }

    pub fn check_seq(&self, seq: &[Token]) -> Result<()> {
        seq.iter().try_for_each(|&t| self.check_token(t))
    }

    pub fn absorbed(&self, prefix: &[Token]) -> bool {
        self.eos.is_some_and(|e| prefix.contains(&e))
    }

    /// All sequences of exactly `len` tokens, in lexicographic order.
    pub fn sequences(&self, len: usize) -> impl Iterator<Item = TokenSeq> + '_ {
        let total = (self.size as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
        (0..total).map(move |mut code| {
            let mut seq = vec![0; len];
            for slot in seq.iter_mut().rev() {
                *slot = (code % self.size as u128) as Token;
                code /= self.size as u128;
            }
            seq
        })
    }
}

/// A distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector<S> {
    probs: Vec<S>,
}

impl<S: Scalar> ProbVector<S> {
    /// Validates non-negativity and normalization at the scalar's tolerance.
    pub fn new(probs: Vec<S>) -> Result<Self> {
        Self::with_tolerance(probs, S::norm_tolerance())
    }

    pub fn with_tolerance(probs: Vec<S>, tolerance: S) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::VocabTooSmall(probs.len()));
        }
        for (index, p) in probs.iter().enumerate() {
            let v = p.to_f64_lossy();
            if *p < S::zero() || !v.is_finite() {
                return Err(Error::BadEntry { index, value: v });
            }
        }
        let sum = ordered_sum(&probs);
        if (sum.clone() - S::one()).abs() > tolerance {
            return Err(Error::Unnormalized {
                sum: sum.to_f64_lossy(),
                tolerance: tolerance.to_f64_lossy(),
            });
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: Vec<S>) -> Result<Self> {
        for (index, w) in weights.iter().enumerate() {
            if *w < S::zero() {
                return Err(Error::BadEntry {
                    index,
                    value: w.to_f64_lossy(),
                });
            }
        }
        let total = ordered_sum(&weights);
        if total <= S::zero() {
            return Err(Error::ZeroMass);
        }
        let probs = weights.into_iter().map(|w| w / total.clone()).collect();
        Self::new(probs)
    }

    pub fn point_mass(size: usize, token: Token) -> Self {
        let mut probs = vec![S::zero(); size];
        probs[token as usize] = S::one();
        Self { probs }
    }

    pub fn uniform(size: usize) -> Self {
        let p = S::one() / S::from_usize_lossy(size);
        Self {
            probs: vec![p; size],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: Token) -> &S {
        &self.probs[token as usize]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<S> {
        self.probs
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.probs.iter().map(Scalar::to_f64_lossy).collect()
    }

    /// Re-expresses the row in another scalar type, renormalizing there.
    pub fn cast<T: Scalar>(&self) -> ProbVector<T> {
        let w = self
            .probs
            .iter()
            .map(|p| T::from_f64_lossy(p.to_f64_lossy()))
            .collect();
        ProbVector::from_weights(w).expect("cast of a valid row stays valid")
    }

    /// Inverse-CDF draw for a uniform variate `u` in `[0, 1)`.
    ///
    /// Never returns a zero-probability token, even when rounding leaves the
    /// cumulative sum short of `u`.
    pub fn sample_with(&self, u: f64) -> Token {
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (i, p) in self.probs.iter().enumerate() {
            let p = p.to_f64_lossy();
            if p <= 0.0 {
                continue;
            }
            last_positive = i;
            cum += p;
            if u < cum {
                return i as Token;
            }
        }
        last_positive as Token
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Token {
        self.sample_with(rng.random::<f64>())
    }
}

/// Natural-log joint probability; `-inf` encodes probability zero.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LogJointProb(f64);

impl LogJointProb {
    pub const CERTAIN: Self = Self(0.0);
    pub const IMPOSSIBLE: Self = Self(f64::NEG_INFINITY);

    pub fn from_prob(p: f64) -> Self {
        if p <= 0.0 {
            Self::IMPOSSIBLE
        } else {
            Self(p.ln().min(0.0))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn prob(self) -> f64 {
        self.0.exp()
    }

    pub fn is_impossible(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }

    /// Multiplies in one conditional factor.
    pub fn extend(self, p: f64) -> Self {
        if self.is_impossible() || p <= 0.0 {
            Self::IMPOSSIBLE
        } else {
            Self((self.0 + p.ln()).min(0.0))
        }
    }
}

/// Next-token distribution for any prefix.
pub trait NextToken<S: Scalar> {
    fn vocab(&self) -> Vocab;

    /// Must be total and deterministic in `prefix`.
    fn conditional(&self, prefix: &[Token]) -> ProbVector<S>;
}

impl<S: Scalar, M: NextToken<S> + ?Sized> NextToken<S> for &M {
    fn vocab(&self) -> Vocab {
        (**self).vocab()
    }

    fn conditional(&self, prefix: &[Token]) -> ProbVector<S> {
        (**self).conditional(prefix)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind<S> {
    Memoryless(ProbVector<S>),
    Markov {
        initial: ProbVector<S>,
        transitions: Vec<ProbVector<S>>,
    },
    /// Rows keyed by the last `context_len` tokens (fewer at the start).
    Table {
        context_len: usize,
        rows: BTreeMap<TokenSeq, ProbVector<S>>,
        default: ProbVector<S>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArModel<S> {
    vocab: Vocab,
    kind: ModelKind<S>,
}

impl<S: Scalar> ArModel<S> {
    pub fn memoryless(vocab: Vocab, row: ProbVector<S>) -> Result<Self> {
        check_row(&vocab, &row)?;
        Ok(Self {
            vocab,
            kind: ModelKind::Memoryless(row),
        })
    }

    /// Bernoulli source over `{0, 1}` emitting 1 with probability `q`.
    pub fn bernoulli(q: S) -> Result<Self> {
        let row = ProbVector::new(vec![S::one() - q.clone(), q])?;
        Self::memoryless(Vocab::open(2)?, row)
    }

    pub fn markov(
        vocab: Vocab,
        initial: ProbVector<S>,
        transitions: Vec<ProbVector<S>>,
    ) -> Result<Self> {
        check_row(&vocab, &initial)?;
        if transitions.len() != vocab.size() {
            return Err(Error::RowLength {
                expected: vocab.size(),
                got: transitions.len(),
            });
        }
        for row in &transitions {
            check_row(&vocab, row)?;
        }
        Ok(Self {
            vocab,
            kind: ModelKind::Markov {
                initial,
                transitions,
            },
        })
    }

    pub fn table(
        vocab: Vocab,
        context_len: usize,
        rows: BTreeMap<TokenSeq, ProbVector<S>>,
        default: ProbVector<S>,
    ) -> Result<Self> {
        check_row(&vocab, &default)?;
        for (key, row) in &rows {
            vocab.check_seq(key)?;
            if key.len() > context_len {
                return Err(Error::InvalidArgument(format!(
                    "table key {key:?} longer than context length {context_len}"
                )));
            }
            check_row(&vocab, row)?;
        }
        Ok(Self {
            vocab,
            kind: ModelKind::Table {
                context_len,
                rows,
                default,
            },
        })
    }

    pub fn kind(&self) -> &ModelKind<S> {
        &self.kind
    }

    fn raw_row(&self, prefix: &[Token]) -> &ProbVector<S> {
        match &self.kind {
            ModelKind::Memoryless(row) => row,
            ModelKind::Markov {
                initial,
                transitions,
            } => match prefix.last() {
                None => initial,
                Some(&t) => &transitions[t as usize],
            },
            ModelKind::Table {
                context_len,
                rows,
                default,
            } => {
                let start = prefix.len().saturating_sub(*context_len);
                rows.get(&prefix[start..]).unwrap_or(default)
            }
        }
    }

    /// Converts every row into another scalar type.
    pub fn cast<T: Scalar>(&self) -> ArModel<T> {
        let kind = match &self.kind {
            ModelKind::Memoryless(row) => ModelKind::Memoryless(row.cast()),
            ModelKind::Markov {
                initial,
                transitions,
            } => ModelKind::Markov {
                initial: initial.cast(),
                transitions: transitions.iter().map(ProbVector::cast).collect(),
            },
            ModelKind::Table {
                context_len,
                rows,
                default,
            } => ModelKind::Table {
                context_len: *context_len,
                rows: rows.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
                default: default.cast(),
            },
        };
        ArModel {
            vocab: self.vocab,
            kind,
        }
    }
}

impl<S: Scalar> NextToken<S> for ArModel<S> {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn conditional(&self, prefix: &[Token]) -> ProbVector<S> {
        if let Some(eos) = self.vocab.eos() {
            if prefix.contains(&eos) {
                return ProbVector::point_mass(self.vocab.size(), eos);
            }
        }
        self.raw_row(prefix).clone()
    }
}

fn check_row<S: Scalar>(vocab: &Vocab, row: &ProbVector<S>) -> Result<()> {
    if row.len() != vocab.size() {
        return Err(Error::RowLength {
            expected: vocab.size(),
            got: row.len(),
        });
    }
    Ok(())
}

/// Table model with Gamma-normalized (Dirichlet) rows for every context of
/// length `0..=context_len`. Deterministic in `seed`.
pub fn make_random_model<S: Scalar>(
    vocab: Vocab,
    context_len: usize,
    seed: u64,
    concentration: f64,
) -> Result<ArModel<S>> {
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    let contexts: u128 = (0..=context_len as u32)
        .map(|k| (vocab.size() as u128).saturating_pow(k))
        .sum();
    if contexts > 1 << 20 {
        return Err(Error::BudgetExceeded {
            needed: contexts,
            limit: 1 << 20,
        });
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("gamma({concentration}): {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_row = |rng: &mut ChaCha8Rng| -> ProbVector<S> {
        let weights: Vec<f64> = (0..vocab.size()).map(|_| gamma.sample(rng)).collect();
        let weights: Vec<S> = weights.into_iter().map(S::from_f64_lossy).collect();
        ProbVector::from_weights(weights).unwrap_or_else(|_| ProbVector::uniform(vocab.size()))
    };
    let mut rows = BTreeMap::new();
    for len in 0..=context_len {
        for key in vocab.sequences(len) {
            let row = draw_row(&mut rng);
            rows.insert(key, row);
        }
    }
    ArModel::table(vocab, context_len, rows, ProbVector::uniform(vocab.size()))
}

/// `prod_i M(seq_i | seq^{i-1})` in the model's own scalar type.
pub fn joint_prob<S: Scalar, M: NextToken<S> + ?Sized>(model: &M, seq: &[Token]) -> S {
    let mut acc = S::one();
    for i in 0..seq.len() {
        if acc.is_zero() {
            break;
        }
        acc = acc * model.conditional(&seq[..i]).prob(seq[i]).clone();
    }
    acc
}

pub fn joint_log_prob<S: Scalar, M: NextToken<S> + ?Sized>(
    model: &M,
    seq: &[Token],
) -> LogJointProb {
    let mut acc = LogJointProb::CERTAIN;
    for i in 0..seq.len() {
        if acc.is_impossible() {
            break;
        }
        acc = acc.extend(model.conditional(&seq[..i]).prob(seq[i]).to_f64_lossy());
    }
    acc
}

/// Draws `len` tokens autoregressively after `prefix`.
pub fn sample_block<S, M, R>(model: &M, prefix: &[Token], len: usize, rng: &mut R) -> TokenSeq
where
    S: Scalar,
    M: NextToken<S> + ?Sized,
    R: Rng + ?Sized,
{
    let mut ctx = prefix.to_vec();
    for _ in 0..len {
        let t = model.conditional(&ctx).sample(rng);
        ctx.push(t);
    }
    ctx.split_off(prefix.len())
}
