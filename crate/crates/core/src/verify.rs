//! Draft verification.
//!
//! Both verifiers are pure functions of a scored [`DraftBlock`] and a slice of
//! uniform variates. They return the accepted length `tau` and a description
//! of the distribution the remaining `L - tau` positions must be drawn from.
//!
//! * [`token_verify`] accepts draft tokens left to right, each with
//!   probability `min{1, M_b(x|prefix) / M_s(x|prefix)}`, and corrects the
//!   first rejected position with the positive part of `M_b - M_s`.
//! * [`block_verify`] first tries to accept the whole block with probability
//!   `min{1, M_b(X^L) / M_s(X^L)}`. On failure it walks back through shorter
//!   prefixes, accepting `X^m` with probability `min{1, p_remain / p_rej}`,
//!   and corrects every later position with the block residual rows.
//!
//! Variate contract: each call consumes exactly `L + 1` variates in
//! `(0, 1]`. Index 0 is the whole-block test (unused by the token verifier)
//! and index `i` is the `i`-th test after it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LogJointProb, NextToken, ProbVector, Token, TokenSeq};
use crate::scalar::{ordered_sum, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verifier {
    Token,
    Block,
}

impl Verifier {
    pub const ALL: [Verifier; 2] = [Verifier::Token, Verifier::Block];

    pub fn name(self) -> &'static str {
        match self {
            Verifier::Token => "token",
            Verifier::Block => "block",
        }
    }
}

impl std::str::FromStr for Verifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Verifier::Token),
            "block" => Ok(Verifier::Block),
            other => Err(Error::InvalidArgument(format!(
                "unknown verifier {other:?} (expected token or block)"
            ))),
        }
    }
}

/// A drafted block with both models' scores at positions `0..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftBlock<S> {
    draft: TokenSeq,
    small_rows: Vec<ProbVector<S>>,
    big_rows: Vec<ProbVector<S>>,
    small_log_joints: Vec<LogJointProb>,
    big_log_joints: Vec<LogJointProb>,
}

impl<S: Scalar> DraftBlock<S> {
    /// Builds a block from cached rows, deriving the joints incrementally.
    pub fn from_rows(
        draft: TokenSeq,
        small_rows: Vec<ProbVector<S>>,
        big_rows: Vec<ProbVector<S>>,
    ) -> Result<Self> {
        let l = draft.len();
        if l == 0 {
            return Err(Error::InvalidArgument("draft block must be non-empty".into()));
        }
        if small_rows.len() != l + 1 || big_rows.len() != l + 1 {
            return Err(Error::InvalidArgument(format!(
                "need {} rows per model, got {} and {}",
                l + 1,
                small_rows.len(),
                big_rows.len()
            )));
        }
        let size = small_rows[0].len();
        for r in small_rows.iter().chain(&big_rows) {
            if r.len() != size {
                return Err(Error::RowLength {
                    expected: size,
                    got: r.len(),
                });
            }
        }
        for &t in &draft {
            if t as usize >= size {
                return Err(Error::TokenOutOfRange { token: t, size });
            }
        }
        let joints = |rows: &[ProbVector<S>]| {
            let mut out = Vec::with_capacity(l + 1);
            let mut acc = LogJointProb::CERTAIN;
            out.push(acc);
            for (row, &t) in rows.iter().zip(&draft) {
                acc = acc.extend(row.prob(t).to_f64_lossy());
                out.push(acc);
            }
            out
        };
        let small_log_joints = joints(&small_rows);
        let big_log_joints = joints(&big_rows);
        Ok(Self {
            draft,
            small_rows,
            big_rows,
            small_log_joints,
            big_log_joints,
        })
    }

    /// One parallel scoring pass of both models over `prefix ++ draft`.
    pub fn score<A, B>(small: &A, big: &B, prefix: &[Token], draft: TokenSeq) -> Result<Self>
    where
        A: NextToken<S> + ?Sized,
        B: NextToken<S> + ?Sized,
    {
        let (vs, vb) = (small.vocab(), big.vocab());
        if vs.size() != vb.size() {
            return Err(Error::VocabMismatch(vs.size(), vb.size()));
        }
        vs.check_seq(prefix)?;
        vs.check_seq(&draft)?;
        let mut ctx = prefix.to_vec();
        let mut small_rows = Vec::with_capacity(draft.len() + 1);
        let mut big_rows = Vec::with_capacity(draft.len() + 1);
        for i in 0..=draft.len() {
            small_rows.push(small.conditional(&ctx));
            big_rows.push(big.conditional(&ctx));
            if i < draft.len() {
                ctx.push(draft[i]);
            }
        }
        Self::from_rows(draft, small_rows, big_rows)
    }

    pub fn len(&self) -> usize {
        self.draft.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draft.is_empty()
    }

    pub fn draft(&self) -> &[Token] {
        &self.draft
    }

    pub fn small_row(&self, pos: usize) -> &ProbVector<S> {
        &self.small_rows[pos]
    }

    pub fn big_row(&self, pos: usize) -> &ProbVector<S> {
        &self.big_rows[pos]
    }

    pub fn small_log_joint(&self, pos: usize) -> LogJointProb {
        self.small_log_joints[pos]
    }

    pub fn big_log_joint(&self, pos: usize) -> LogJointProb {
        self.big_log_joints[pos]
    }

    /// Scores at the draft prefix of length `pos`.
    pub fn prefix_scores(&self, pos: usize) -> PrefixScores<'_, S> {
        PrefixScores {
            big_log_joint: self.big_log_joints[pos],
            small_log_joint: self.small_log_joints[pos],
            big_row: &self.big_rows[pos],
            small_row: &self.small_rows[pos],
        }
    }
}

/// Joint probabilities of a prefix under both models plus both next-token rows.
#[derive(Debug, Clone, Copy)]
pub struct PrefixScores<'a, S> {
    pub big_log_joint: LogJointProb,
    pub small_log_joint: LogJointProb,
    pub big_row: &'a ProbVector<S>,
    pub small_row: &'a ProbVector<S>,
}

impl<S: Scalar> PrefixScores<'_, S> {
    /// Both joints divided by the larger of the two, so the larger is 1.
    fn rescaled_joints(&self) -> (f64, f64) {
        let (b, s) = (self.big_log_joint.value(), self.small_log_joint.value());
        let m = b.max(s);
        if m == f64::NEG_INFINITY {
            return (0.0, 0.0);
        }
        ((b - m).exp(), (s - m).exp())
    }

    fn scale(&self) -> f64 {
        self.big_log_joint
            .value()
            .max(self.small_log_joint.value())
            .exp()
    }

    /// `(p_remain, p_rej)` after the common rescaling; only their ratio is
    /// meaningful.
    pub fn rescaled_masses(&self) -> (f64, f64) {
        let (wb, ws) = self.rescaled_joints();
        let mut remain = 0.0;
        let mut rej = 0.0;
        for (b, s) in self.big_row.as_slice().iter().zip(self.small_row.as_slice()) {
            let d = wb * b.to_f64_lossy() - ws * s.to_f64_lossy();
            if d > 0.0 {
                remain += d;
            } else {
                rej -= d;
            }
        }
        (remain, rej)
    }

    /// `sum_x (M_b(x^i, x) - M_s(x^i, x))_+`
    pub fn p_remain(&self) -> f64 {
        self.rescaled_masses().0 * self.scale()
    }

    /// `sum_x (M_s(x^i, x) - M_b(x^i, x))_+`
    pub fn p_rej(&self) -> f64 {
        self.rescaled_masses().1 * self.scale()
    }

    /// Normalized `(M_b(x^i, x) - M_s(x^i, x))_+`.
    pub fn residual_row(&self) -> Result<ProbVector<S>> {
        let (wb, ws) = self.rescaled_joints();
        let (wb, ws) = (S::from_f64_lossy(wb), S::from_f64_lossy(ws));
        let weights: Vec<S> = self
            .big_row
            .as_slice()
            .iter()
            .zip(self.small_row.as_slice())
            .map(|(b, s)| (wb.clone() * b.clone() - ws.clone() * s.clone()).pos_part())
            .collect();
        if ordered_sum(&weights) <= S::zero() {
            return Err(Error::EmptyResidual);
        }
        ProbVector::from_weights(weights)
    }
}

/// Normalized `(M_b(x|prefix) - M_s(x|prefix))_+` for a single position.
pub fn token_residual_row<S: Scalar>(
    big_row: &ProbVector<S>,
    small_row: &ProbVector<S>,
) -> Result<ProbVector<S>> {
    let weights: Vec<S> = big_row
        .as_slice()
        .iter()
        .zip(small_row.as_slice())
        .map(|(b, s)| (b.clone() - s.clone()).pos_part())
        .collect();
    if ordered_sum(&weights) <= S::zero() {
        return Err(Error::EmptyResidual);
    }
    ProbVector::from_weights(weights)
}

/// How the positions after the accepted prefix must be drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Correction {
    /// Continue with the target model unchanged.
    Plain,
    /// First position from the token residual, then the target model.
    TokenResidual,
    /// Block residual rows for the next `depth_limit` positions, anchored at
    /// the accepted prefix whose joints (from the block start) are given.
    BlockResidual {
        depth_limit: usize,
        big_log_joint: LogJointProb,
        small_log_joint: LogJointProb,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Acceptance ratios with a zero denominator, read as 1.
    pub clamped_ratios: u32,
    /// Largest relative gap seen in the `p_remain(empty) = p_rej(empty)` identity.
    pub termination_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub tau: usize,
    pub accepted: TokenSeq,
    pub correction: Correction,
    pub diagnostics: Diagnostics,
}

/// `L + 1` iid uniforms in `(0, 1]`.
pub fn draw_variates<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..=len).map(|_| 1.0 - rng.random::<f64>()).collect()
}

/// `min{1, exp(num - den)}` with `-inf - -inf` read as acceptance.
fn log_ratio_accept(num: LogJointProb, den: LogJointProb, diag: &mut Diagnostics) -> f64 {
    if den.is_impossible() {
        diag.clamped_ratios += 1;
        return 1.0;
    }
    (num.value() - den.value()).min(0.0).exp()
}

pub fn token_verify<S: Scalar, R: Rng + ?Sized>(block: &DraftBlock<S>, rng: &mut R) -> VerifyOutcome {
    let etas = draw_variates(rng, block.len());
    token_verify_with(block, &etas)
}

pub fn token_verify_with<S: Scalar>(block: &DraftBlock<S>, etas: &[f64]) -> VerifyOutcome {
    assert_eq!(etas.len(), block.len() + 1, "token verifier takes L + 1 variates");
    let mut diag = Diagnostics::default();
    let mut tau = 0;
    for i in 1..=block.len() {
        let x = block.draft[i - 1];
        let b = LogJointProb::from_prob(block.big_rows[i - 1].prob(x).to_f64_lossy());
        let s = LogJointProb::from_prob(block.small_rows[i - 1].prob(x).to_f64_lossy());
        if etas[i] <= log_ratio_accept(b, s, &mut diag) {
            tau += 1;
        } else {
            break;
        }
    }
    let correction = if tau == block.len() {
        Correction::Plain
    } else {
        Correction::TokenResidual
    };
    VerifyOutcome {
        tau,
        accepted: block.draft[..tau].to_vec(),
        correction,
        diagnostics: diag,
    }
}

pub fn block_verify<S: Scalar, R: Rng + ?Sized>(block: &DraftBlock<S>, rng: &mut R) -> VerifyOutcome {
    let etas = draw_variates(rng, block.len());
    block_verify_with(block, &etas)
}

pub fn block_verify_with<S: Scalar>(block: &DraftBlock<S>, etas: &[f64]) -> VerifyOutcome {
    let l = block.len();
    assert_eq!(etas.len(), l + 1, "block verifier takes L + 1 variates");
    let mut diag = Diagnostics::default();
    let whole = log_ratio_accept(block.big_log_joints[l], block.small_log_joints[l], &mut diag);
    if etas[0] <= whole {
        return VerifyOutcome {
            tau: l,
            accepted: block.draft.clone(),
            correction: Correction::Plain,
            diagnostics: diag,
        };
    }
    for i in 1..=l {
        let m = l - i;
        let scores = block.prefix_scores(m);
        let (remain, rej) = scores.rescaled_masses();
        let accept = if m == 0 {
            let gap = (remain - rej).abs() / remain.max(rej).max(f64::MIN_POSITIVE);
            diag.termination_gap = diag.termination_gap.max(gap);
            // p_remain(empty) = p_rej(empty), so the walk always stops here
            true
        } else if rej <= 0.0 {
            diag.clamped_ratios += 1;
            etas[i] <= 1.0
        } else {
            etas[i] <= (remain / rej).min(1.0)
        };
        if accept {
            assert!(
                remain > 0.0,
                "block verifier accepted prefix of length {m} with no remaining target mass"
            );
            return VerifyOutcome {
                tau: m,
                accepted: block.draft[..m].to_vec(),
                correction: Correction::BlockResidual {
                    depth_limit: l - m,
                    big_log_joint: scores.big_log_joint,
                    small_log_joint: scores.small_log_joint,
                },
                diagnostics: diag,
            };
        }
    }
    unreachable!("backward walk ends at the empty prefix")
}

pub fn verify<S: Scalar, R: Rng + ?Sized>(
    verifier: Verifier,
    block: &DraftBlock<S>,
    rng: &mut R,
) -> VerifyOutcome {
    match verifier {
        Verifier::Token => token_verify(block, rng),
        Verifier::Block => block_verify(block, rng),
    }
}

/// Distribution of the free token at position `tau + 1`, computed from the
/// block's cached rows alone.
pub fn first_correction_row<S: Scalar>(
    block: &DraftBlock<S>,
    outcome: &VerifyOutcome,
) -> Result<ProbVector<S>> {
    let t = outcome.tau;
    match outcome.correction {
        Correction::Plain => Ok(block.big_rows[t].clone()),
        Correction::TokenResidual => token_residual_row(&block.big_rows[t], &block.small_rows[t]),
        Correction::BlockResidual { .. } => block.prefix_scores(t).residual_row(),
    }
}
