//! Speculative decoding over explicit finite autoregressive models.
//!
//! A cheap draft model proposes a block of tokens and a target model checks
//! it in one pass. Two verifiers are provided: a per-token rule and a
//! block-level rule that looks at whole-prefix joints. Both reproduce the
//! target distribution exactly. Alongside them live exact enumeration
//! oracles, closed forms for memoryless two-token models and a seeded
//! Monte-Carlo harness.

pub mod decode;
pub mod error;
pub mod model;
pub mod modelspec;
pub mod montecarlo;
pub mod oracle;
pub mod scalar;
pub mod verify;

pub use decode::{
    baseline_decode, block_efficiency, spec_decode, CorrectionModel, DecodeConfig, DecodeTrace,
    Iteration, StopReason,
};
pub use error::{Error, Result};
pub use model::{
    joint_log_prob, joint_prob, make_random_model, sample_block, ArModel, LogJointProb, ModelKind,
    NextToken, ProbVector, Token, TokenSeq, Vocab,
};
pub use modelspec::{KindSpec, ModelSpec};
pub use montecarlo::{mc_block_efficiency, mc_tau, run_trials, McStat, Moments};
pub use oracle::{
    bernoulli_curves, binomial_pmf, enumerate_block_accept_joint, enumerate_coupling,
    enumerate_decode_distribution, enumerate_output_distribution, exact_token_tau_distribution,
    expected_beta, expected_beta_by_tails, expected_tau_block, expected_tau_token, joint_table,
    max_deviation, mean_of, tau_distribution, tv_distance, upper_bound, AcceptanceReport,
    BernoulliCurves, CouplingAtom, CouplingCost,
};
pub use scalar::{BigRational, Scalar};
pub use verify::{
    block_verify, block_verify_with, draw_variates, first_correction_row, token_verify,
    token_verify_with, verify, Correction, Diagnostics, DraftBlock, PrefixScores, Verifier,
    VerifyOutcome,
};

pub type ProbVector64 = ProbVector<f64>;
pub type ArModel64 = ArModel<f64>;
pub type DraftBlock64 = DraftBlock<f64>;
pub type ExactProbVector = ProbVector<BigRational>;
pub type ExactArModel = ArModel<BigRational>;
