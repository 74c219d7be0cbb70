//! Speculative decoding loop and the autoregressive baseline.
//!
//! The loop is iterative: after every verification the effective target
//! model becomes a [`CorrectionModel`] that layers residual rows over the
//! previous effective model. Residual rows are computed on demand from rows
//! already scored in earlier passes, so drawing the free token never needs a
//! fresh target scoring pass.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_block, LogJointProb, NextToken, ProbVector, Token, TokenSeq, Vocab};
use crate::scalar::Scalar;
use crate::verify::{
    first_correction_row, token_residual_row, verify, Correction, Diagnostics, DraftBlock,
    PrefixScores, Verifier,
};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Joints {
    big: LogJointProb,
    small: LogJointProb,
}

#[derive(Debug, Clone, PartialEq)]
enum LayerMode {
    Token,
    Block {
        depth_limit: usize,
        /// Joints of both models at the anchor.
        base: Joints,
        /// Joints at the end of `Layer::path`.
        rolled: Joints,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    id: u64,
    anchor_len: usize,
    /// The anchor followed by every token realized since, up to `end`.
    path: TokenSeq,
    mode: LayerMode,
}

impl Layer {
    /// Prefix lengths this layer rewrites: `[anchor_len, end)`.
    fn end(&self) -> usize {
        match self.mode {
            LayerMode::Token => self.anchor_len + 1,
            LayerMode::Block { depth_limit, .. } => self.anchor_len + depth_limit,
        }
    }

    fn covers(&self, prefix: &[Token]) -> bool {
        prefix.len() < self.end() && prefix.starts_with(&self.path[..self.anchor_len])
    }
}

/// The target distribution after one or more verifications.
///
/// Layer `k` rewrites rows of the model formed by layers `0..k` over the base
/// target model. Rows are memoized per layer stack, so re-querying a prefix
/// that was scored before costs no base-model evaluation.
///
/// Each block layer carries both joints along the realized path. Once
/// [`advance`](Self::advance) has moved past a layer's window the layer is
/// dropped, so the stack stays shallow however long the decode runs. Rows are
/// exact for prefixes at least as long as the last advanced context.
#[derive(Debug)]
pub struct CorrectionModel<'m, S, A: ?Sized, B: ?Sized> {
    big: &'m B,
    small: &'m A,
    layers: Vec<Layer>,
    next_id: u64,
    cache: RefCell<HashMap<(u64, TokenSeq), ProbVector<S>>>,
    big_evals: Cell<usize>,
    fallbacks: Cell<usize>,
}

impl<S: Clone, A: ?Sized, B: ?Sized> Clone for CorrectionModel<'_, S, A, B> {
    fn clone(&self) -> Self {
        Self {
            big: self.big,
            small: self.small,
            layers: self.layers.clone(),
            next_id: self.next_id,
            cache: self.cache.clone(),
            big_evals: self.big_evals.clone(),
            fallbacks: self.fallbacks.clone(),
        }
    }
}

impl<'m, S, A, B> CorrectionModel<'m, S, A, B>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
{
    pub fn new(big: &'m B, small: &'m A) -> Self {
        Self {
            big,
            small,
            layers: Vec::new(),
            next_id: 1,
            cache: RefCell::new(HashMap::new()),
            big_evals: Cell::new(0),
            fallbacks: Cell::new(0),
        }
    }

    /// Number of base target-model row evaluations so far.
    pub fn big_evals(&self) -> usize {
        self.big_evals.get()
    }

    /// Rows served unmodified because the residual at a zero-probability
    /// prefix was empty.
    pub fn residual_fallbacks(&self) -> usize {
        self.fallbacks.get()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Installs the correction returned by a verifier, anchored at the full
    /// accepted prefix.
    pub fn push(&mut self, anchor: TokenSeq, correction: Correction) {
        let mode = match correction {
            Correction::Plain => return,
            Correction::TokenResidual => LayerMode::Token,
            Correction::BlockResidual {
                depth_limit,
                big_log_joint,
                small_log_joint,
            } => {
                let base = Joints {
                    big: big_log_joint,
                    small: small_log_joint,
                };
                LayerMode::Block {
                    depth_limit,
                    base,
                    rolled: base,
                }
            }
        };
        let id = self.next_id;
        self.next_id += 1;
        self.layers.push(Layer {
            id,
            anchor_len: anchor.len(),
            path: anchor,
            mode,
        });
    }

    /// Moves every layer's path state forward along the realized context,
    /// then drops layers whose window lies entirely inside it.
    pub fn advance(&mut self, ctx: &[Token]) {
        for k in 0..self.layers.len() {
            let layer = &self.layers[k];
            let target = ctx.len().min(layer.end());
            if layer.path.len() >= target || !ctx.starts_with(&layer.path) {
                continue;
            }
            let from = layer.path.len();
            let mut mode = layer.mode.clone();
            if let LayerMode::Block { rolled, .. } = &mut mode {
                for t in from..target {
                    let x = ctx[t];
                    rolled.big = rolled.big.extend(self.row(k, &ctx[..t]).prob(x).to_f64_lossy());
                    rolled.small = rolled
                        .small
                        .extend(self.small.conditional(&ctx[..t]).prob(x).to_f64_lossy());
                }
            }
            let layer = &mut self.layers[k];
            layer.path.extend_from_slice(&ctx[from..target]);
            layer.mode = mode;
        }
        self.layers.retain(|l| l.end() > ctx.len());
        self.cache.borrow_mut().retain(|(_, p), _| p.len() >= ctx.len());
    }

    fn stack_id(&self, k: usize) -> u64 {
        if k == 0 {
            0
        } else {
            self.layers[k - 1].id
        }
    }

    fn row(&self, k: usize, prefix: &[Token]) -> ProbVector<S> {
        let key = (self.stack_id(k), prefix.to_vec());
        if let Some(r) = self.cache.borrow().get(&key) {
            return r.clone();
        }
        let r = if k == 0 {
            self.big_evals.set(self.big_evals.get() + 1);
            self.big.conditional(prefix)
        } else {
            let layer = &self.layers[k - 1];
            if layer.covers(prefix) {
                self.residual(k, layer, prefix)
            } else {
                self.row(k - 1, prefix)
            }
        };
        self.cache.borrow_mut().insert(key, r.clone());
        r
    }

    fn residual(&self, k: usize, layer: &Layer, prefix: &[Token]) -> ProbVector<S> {
        let below = self.row(k - 1, prefix);
        let small = self.small.conditional(prefix);
        let r = match layer.mode {
            LayerMode::Token => token_residual_row(&below, &small),
            LayerMode::Block { base, rolled, .. } => {
                let (start, joints) = if prefix.starts_with(&layer.path) {
                    (layer.path.len(), rolled)
                } else {
                    (layer.anchor_len, base)
                };
                let (mut lb, mut ls) = (joints.big, joints.small);
                for t in start..prefix.len() {
                    let x = prefix[t];
                    lb = lb.extend(self.row(k - 1, &prefix[..t]).prob(x).to_f64_lossy());
                    ls = ls.extend(self.small.conditional(&prefix[..t]).prob(x).to_f64_lossy());
                }
                PrefixScores {
                    big_log_joint: lb,
                    small_log_joint: ls,
                    big_row: &below,
                    small_row: &small,
                }
                .residual_row()
            }
        };
        r.unwrap_or_else(|_| {
            // only reachable at prefixes the correction gives probability zero
            self.fallbacks.set(self.fallbacks.get() + 1);
            below
        })
    }
}

impl<S, A, B> NextToken<S> for CorrectionModel<'_, S, A, B>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
{
    fn vocab(&self) -> Vocab {
        self.big.vocab()
    }

    fn conditional(&self, prefix: &[Token]) -> ProbVector<S> {
        self.row(self.layers.len(), prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Eos,
    LengthLimited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub draft: TokenSeq,
    pub tau: usize,
    /// Accepted draft tokens before any eos or length trimming.
    pub accepted: TokenSeq,
    pub free_token: Option<Token>,
    pub emitted: usize,
    pub serial_calls: usize,
    /// Cut short by the token limit.
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub iterations: Vec<Iteration>,
    pub output: TokenSeq,
    pub serial_calls: usize,
    pub stop: StopReason,
    pub clamped_ratios: u32,
    pub residual_fallbacks: usize,
}

impl DecodeTrace {
    pub fn tokens_emitted(&self) -> usize {
        self.output.len()
    }

    pub fn accepted_lengths(&self) -> Vec<usize> {
        self.iterations.iter().map(|it| it.tau).collect()
    }

    pub fn length_limited(&self) -> bool {
        self.stop == StopReason::LengthLimited
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub block_len: usize,
    pub verifier: Verifier,
    pub max_tokens: usize,
}

/// Speculative decoding with a draft model `small` and target model `big`.
pub fn spec_decode<S, A, B, R>(
    big: &B,
    small: &A,
    prompt: &[Token],
    config: DecodeConfig,
    rng: &mut R,
) -> Result<DecodeTrace>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
    R: Rng + ?Sized,
{
    let DecodeConfig {
        block_len,
        verifier,
        max_tokens,
    } = config;
    if block_len == 0 || max_tokens == 0 {
        return Err(Error::InvalidArgument(
            "block length and token limit must be positive".into(),
        ));
    }
    let vocab = big.vocab();
    if vocab.size() != small.vocab().size() {
        return Err(Error::VocabMismatch(small.vocab().size(), vocab.size()));
    }
    vocab.check_seq(prompt)?;

    let mut eff = CorrectionModel::new(big, small);
    let mut ctx = prompt.to_vec();
    let mut output = TokenSeq::new();
    let mut iterations = Vec::new();
    let mut diag = Diagnostics::default();
    let stop = loop {
        eff.advance(&ctx);
        let draft = sample_block(small, &ctx, block_len, rng);
        let block = DraftBlock::score(small, &eff, &ctx, draft)?;
        let out = verify(verifier, &block, rng);
        diag.clamped_ratios += out.diagnostics.clamped_ratios;

        let mut record = Iteration {
            draft: block.draft().to_vec(),
            tau: out.tau,
            accepted: out.accepted.clone(),
            free_token: None,
            emitted: 0,
            serial_calls: 1,
            partial: false,
        };
        let mut stop = None;
        for &t in &out.accepted {
            if output.len() == max_tokens {
                record.partial = true;
                stop = Some(StopReason::LengthLimited);
                break;
            }
            output.push(t);
            record.emitted += 1;
            if vocab.is_eos(t) {
                stop = Some(StopReason::Eos);
                break;
            }
        }
        ctx.extend_from_slice(&out.accepted);
        if stop.is_none() {
            if output.len() == max_tokens {
                record.partial = true;
                stop = Some(StopReason::LengthLimited);
            } else {
                eff.push(ctx.clone(), out.correction);
                let before = eff.big_evals();
                let row = eff.conditional(&ctx);
                assert_eq!(
                    before,
                    eff.big_evals(),
                    "free token must not trigger a target scoring call"
                );
                debug_assert_eq!(Ok(&row), first_correction_row(&block, &out).as_ref());
                let z = row.sample(rng);
                record.free_token = Some(z);
                output.push(z);
                ctx.push(z);
                record.emitted += 1;
                if vocab.is_eos(z) {
                    stop = Some(StopReason::Eos);
                } else if output.len() == max_tokens {
                    stop = Some(StopReason::LengthLimited);
                }
            }
        }
        iterations.push(record);
        if let Some(s) = stop {
            break s;
        }
    };
    Ok(DecodeTrace {
        serial_calls: iterations.len(),
        iterations,
        output,
        stop,
        clamped_ratios: diag.clamped_ratios,
        residual_fallbacks: eff.residual_fallbacks(),
    })
}

/// Plain autoregressive sampling: one target call per token.
pub fn baseline_decode<S, B, R>(
    big: &B,
    prompt: &[Token],
    max_tokens: usize,
    rng: &mut R,
) -> Result<DecodeTrace>
where
    S: Scalar,
    B: NextToken<S> + ?Sized,
    R: Rng + ?Sized,
{
    if max_tokens == 0 {
        return Err(Error::InvalidArgument("token limit must be positive".into()));
    }
    let vocab = big.vocab();
    vocab.check_seq(prompt)?;
    let mut ctx = prompt.to_vec();
    let mut output = TokenSeq::new();
    let mut iterations = Vec::new();
    let stop = loop {
        let t = big.conditional(&ctx).sample(rng);
        ctx.push(t);
        output.push(t);
        iterations.push(Iteration {
            draft: Vec::new(),
            tau: 0,
            accepted: Vec::new(),
            free_token: Some(t),
            emitted: 1,
            serial_calls: 1,
            partial: false,
        });
        if vocab.is_eos(t) {
            break StopReason::Eos;
        }
        if output.len() == max_tokens {
            break StopReason::LengthLimited;
        }
    };
    Ok(DecodeTrace {
        serial_calls: iterations.len(),
        iterations,
        output,
        stop,
        clamped_ratios: 0,
        residual_fallbacks: 0,
    })
}

/// Decoded tokens per serial target call. With `exclude_partial`, an
/// iteration cut short by the token limit is left out of both counts.
/// `None` when nothing is left to count.
pub fn block_efficiency(trace: &DecodeTrace, exclude_partial: bool) -> Option<f64> {
    let (tokens, calls) = trace
        .iterations
        .iter()
        .filter(|it| !(exclude_partial && it.partial))
        .fold((0usize, 0usize), |(t, c), it| (t + it.emitted, c + it.serial_calls));
    (calls > 0).then(|| tokens as f64 / calls as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_random_model, ArModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain() -> ArModel<f64> {
        // 0 -> 1 -> 2 -> 0 ... deterministic
        let v = Vocab::open(3).unwrap();
        let pm = |t| ProbVector::point_mass(3, t);
        ArModel::markov(v, pm(0), vec![pm(1), pm(2), pm(0)]).unwrap()
    }

    #[test]
    fn identical_models_emit_full_blocks() {
        let v = Vocab::open(3).unwrap();
        let m: ArModel<f64> = make_random_model(v, 2, 4, 0.7).unwrap();
        for verifier in Verifier::ALL {
            let cfg = DecodeConfig {
                block_len: 4,
                verifier,
                max_tokens: 20,
            };
            let tr = spec_decode(&m, &m, &[], cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(tr.serial_calls, 4);
            assert_eq!(tr.tokens_emitted(), 20);
            assert!(tr.iterations.iter().all(|it| it.tau == 4 && it.emitted == 5));
            assert_eq!(block_efficiency(&tr, false), Some(5.0));
            assert!(tr.length_limited());
        }
    }

    #[test]
    fn point_mass_target_is_reproduced() {
        let big = chain();
        let v = Vocab::open(3).unwrap();
        let small: ArModel<f64> = make_random_model(v, 1, 8, 1.0).unwrap();
        for verifier in Verifier::ALL {
            for seed in 0..20 {
                let cfg = DecodeConfig {
                    block_len: 3,
                    verifier,
                    max_tokens: 12,
                };
                let tr =
                    spec_decode(&big, &small, &[], cfg, &mut ChaCha8Rng::seed_from_u64(seed))
                        .unwrap();
                assert_eq!(tr.output, vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2]);
            }
        }
    }

    #[test]
    fn trace_accounting() {
        let v = Vocab::new(4, Some(3)).unwrap();
        let big: ArModel<f64> = make_random_model(v, 2, 1, 1.0).unwrap();
        let small: ArModel<f64> = make_random_model(v, 2, 2, 1.0).unwrap();
        for verifier in Verifier::ALL {
            for seed in 0..50 {
                let cfg = DecodeConfig {
                    block_len: 3,
                    verifier,
                    max_tokens: 25,
                };
                let tr =
                    spec_decode(&big, &small, &[1], cfg, &mut ChaCha8Rng::seed_from_u64(seed))
                        .unwrap();
                assert_eq!(tr.serial_calls, tr.iterations.len());
                let n = tr.iterations.len();
                for it in &tr.iterations[..n - 1] {
                    assert_eq!(it.emitted, it.tau + 1);
                }
                let total: usize = tr.iterations.iter().map(|it| it.emitted).sum();
                assert_eq!(total, tr.tokens_emitted());
                assert!(tr.tokens_emitted() <= 25);
                match tr.stop {
                    StopReason::Eos => {
                        assert_eq!(tr.output.last(), Some(&3));
                        assert_eq!(tr.output.iter().filter(|&&t| t == 3).count(), 1);
                    }
                    StopReason::LengthLimited => assert_eq!(tr.tokens_emitted(), 25),
                }
            }
        }
    }

    #[test]
    fn correction_rows_are_valid_and_revert_after_window() {
        let v = Vocab::open(3).unwrap();
        let big: ArModel<f64> = make_random_model(v, 2, 21, 0.6).unwrap();
        let small: ArModel<f64> = make_random_model(v, 2, 22, 0.6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen_block = 0;
        for _ in 0..300 {
            let draft = sample_block(&small, &[], 3, &mut rng);
            let block = DraftBlock::score(&small, &big, &[], draft).unwrap();
            let out = verify(Verifier::Block, &block, &mut rng);
            if out.tau == 3 {
                continue;
            }
            seen_block += 1;
            let mut eff = CorrectionModel::new(&big, &small);
            eff.push(out.accepted.clone(), out.correction);
            for tail_len in 0..=4 {
                for tail in v.sequences(tail_len) {
                    let mut p = out.accepted.clone();
                    p.extend(&tail);
                    let r = eff.conditional(&p);
                    let s: f64 = r.as_slice().iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                    if tail_len >= 3 - out.tau {
                        assert_eq!(r, big.conditional(&p));
                    }
                }
            }
        }
        assert!(seen_block > 10);
    }

    #[test]
    fn layers_are_pruned() {
        let v = Vocab::open(2).unwrap();
        let big: ArModel<f64> = ArModel::bernoulli(0.75).unwrap();
        let small: ArModel<f64> = ArModel::bernoulli(0.5).unwrap();
        let mut eff = CorrectionModel::new(&big, &small);
        eff.push(vec![0], Correction::TokenResidual);
        assert_eq!(eff.depth(), 1);
        eff.advance(&[0]);
        assert_eq!(eff.depth(), 1);
        eff.advance(&[0, 1]);
        assert_eq!(eff.depth(), 0);
        assert_eq!(eff.vocab(), v);
    }

    #[test]
    fn baseline_counts_calls() {
        let v = Vocab::open(3).unwrap();
        let m: ArModel<f64> = make_random_model(v, 1, 3, 1.0).unwrap();
        let tr = baseline_decode(&m, &[], 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.serial_calls, 5);
        assert_eq!(tr.tokens_emitted(), 5);
        assert_eq!(block_efficiency(&tr, false), Some(1.0));
        let tr = baseline_decode(&chain(), &[], 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.output, vec![0, 1, 2, 0, 1]);
    }

    #[test]
    fn baseline_frequencies_match_rows() {
        let m = ArModel::bernoulli(0.75).unwrap();
        let tr = baseline_decode(&m, &[], 100_000, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let ones = tr.output.iter().filter(|&&t| t == 1).count() as f64 / 1e5;
        assert!((ones - 0.75).abs() < 3.0 * (0.75f64 * 0.25 / 1e5).sqrt());
    }

    #[test]
    fn efficiency_excludes_partial_blocks() {
        let m = ArModel::bernoulli(0.3).unwrap();
        let cfg = DecodeConfig {
            block_len: 8,
            verifier: Verifier::Block,
            max_tokens: 20,
        };
        let tr = spec_decode(&m, &m, &[], cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.iterations.len(), 3);
        assert!(tr.iterations[2].partial);
        assert_eq!(block_efficiency(&tr, true), Some(9.0));
        assert!((block_efficiency(&tr, false).unwrap() - 20.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_config() {
        let m = ArModel::bernoulli(0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DecodeConfig {
            block_len: 0,
            verifier: Verifier::Token,
            max_tokens: 4,
        };
        assert!(spec_decode(&m, &m, &[], cfg, &mut rng).is_err());
        let cfg = DecodeConfig {
            block_len: 2,
            verifier: Verifier::Token,
            max_tokens: 4,
        };
        assert!(matches!(
            spec_decode(&m, &m, &[5], cfg, &mut rng),
            Err(Error::TokenOutOfRange { .. })
        ));
    }
}
