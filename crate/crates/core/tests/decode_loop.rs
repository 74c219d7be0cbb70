mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use common::random_pair;
use specdec_core::{
    block_efficiency, joint_table, mc_block_efficiency, mc_tau, run_trials, spec_decode, ArModel,
    DecodeConfig, NextToken, ProbVector, StopReason, Verifier, Vocab,
};

fn ber(q: f64) -> ArModel<f64> {
    ArModel::bernoulli(q).unwrap()
}

#[derive(Default)]
struct Counts(Vec<u64>);

fn index(seq: &[u32], vocab: usize) -> usize {
    seq.iter().fold(0, |acc, &t| acc * vocab + t as usize)
}

/// Pearson p-value of the first `horizon` decoded tokens against the target
/// joint law.
fn horizon_p_value(small: &ArModel<f64>, big: &ArModel<f64>, l: usize, verifier: Verifier, horizon: usize, runs: u64, seed: u64) -> f64 {
    let vocab = big.vocab().size();
    let cells = vocab.pow(horizon as u32);
    let counts = run_trials(
        runs,
        seed,
        |rng, acc: &mut Counts| {
            if acc.0.is_empty() {
                acc.0 = vec![0; cells];
            }
            let cfg = DecodeConfig {
                block_len: l,
                verifier,
                max_tokens: horizon,
            };
            let mut out = spec_decode(big, small, &[], cfg, rng).unwrap().output;
            let eos = big.vocab().eos();
            while out.len() < horizon {
                out.push(eos.expect("stopped early only at eos"));
            }
            acc.0[index(&out, vocab)] += 1;
        },
        |mut a, b| {
            if a.0.is_empty() {
                return b;
            }
            for (x, y) in a.0.iter_mut().zip(b.0) {
                *x += y;
            }
            a
        },
    );
    let target = joint_table(big, &[], horizon).unwrap();
    let mut stat = 0.0;
    let mut dof = 0;
    for (seq, p) in &target {
        if *p == 0.0 {
            assert_eq!(counts.0[index(seq, vocab)], 0, "zero-probability output {seq:?} observed");
            continue;
        }
        let expected = p * runs as f64;
        let diff = counts.0[index(seq, vocab)] as f64 - expected;
        stat += diff * diff / expected;
        dof += 1;
    }
    ChiSquared::new((dof - 1) as f64).unwrap().sf(stat)
}

#[test]
fn bernoulli_horizon_four_matches_target_law() {
    for verifier in Verifier::ALL {
        let p = horizon_p_value(&ber(0.5), &ber(0.75), 2, verifier, 4, 100_000, 11);
        assert!(p > 0.01, "{verifier:?}: p = {p}");
    }
}

#[test]
fn eos_models_match_target_law() {
    let (small, big) = random_pair(31, 3, true, 2, 0.7);
    for verifier in Verifier::ALL {
        let p = horizon_p_value(&small, &big, 3, verifier, 4, 100_000, 12);
        assert!(p > 0.01, "{verifier:?}: p = {p}");
    }
}

#[test]
fn identical_models_twenty_tokens_take_four_calls() {
    let (m, _) = random_pair(5, 4, false, 2, 1.0);
    let cfg = DecodeConfig {
        block_len: 4,
        verifier: Verifier::Block,
        max_tokens: 20,
    };
    let tr = spec_decode(&m, &m, &[0, 1], cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(tr.serial_calls, 4);
    assert_eq!(tr.tokens_emitted(), 20);
    assert_eq!(tr.stop, StopReason::LengthLimited);
}

#[test]
fn identical_models_long_horizon_efficiency_is_l_plus_one() {
    let m = ber(0.3);
    let cfg = DecodeConfig {
        block_len: 8,
        verifier: Verifier::Token,
        max_tokens: 128,
    };
    let tr = spec_decode(&m, &m, &[], cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(block_efficiency(&tr, true), Some(9.0));
}

#[test]
fn point_mass_chain_is_deterministic_for_both_verifiers() {
    let v = Vocab::new(4, Some(3)).unwrap();
    let pm = |t| ProbVector::point_mass(4, t);
    let big = ArModel::markov(v, pm(0), vec![pm(1), pm(2), pm(3), pm(3)]).unwrap();
    let (small, _) = random_pair(8, 4, true, 1, 1.0);
    for verifier in Verifier::ALL {
        for seed in 0..30 {
            let cfg = DecodeConfig {
                block_len: 3,
                verifier,
                max_tokens: 50,
            };
            let tr = spec_decode(&big, &small, &[], cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(tr.output, vec![0, 1, 2, 3]);
            assert_eq!(tr.stop, StopReason::Eos);
        }
    }
}

#[test]
fn first_iteration_dominance_at_block_length_two() {
    let (s, b) = (ber(0.5), ber(0.75));
    let t = mc_tau(&s, &b, 2, &[], Verifier::Token, 100_000, 1).unwrap();
    let k = mc_tau(&s, &b, 2, &[], Verifier::Block, 100_000, 1).unwrap();
    assert!(t.within(1.3125, 3.0) && k.within(1.4375, 3.0), "{t:?} {k:?}");
    assert!(k.mean - t.mean > 3.0 * (k.se.powi(2) + t.se.powi(2)).sqrt());
}

// After a rejection the block verifier's residual rows stay in force for
// the next iteration's target, which for this pair are point masses. Over a
// whole decode at L = 2 that costs more than the first-iteration gain.
#[test]
fn bernoulli_full_decode_efficiency_by_block_length() {
    let (s, b) = (ber(0.5), ber(0.75));
    let eff = |l, v| mc_block_efficiency(&s, &b, &[], l, v, 64, true, 100_000, 2).unwrap();
    let sigma = |x: specdec_core::McStat, y: specdec_core::McStat| (x.mean - y.mean) / (x.se.powi(2) + y.se.powi(2)).sqrt();
    let (t2, b2) = (eff(2, Verifier::Token), eff(2, Verifier::Block));
    assert!(t2.within(2.3125, 3.0), "{t2:?}");
    assert!(sigma(t2, b2) > 3.0, "token {t2:?} block {b2:?}");
    let (t4, b4) = (eff(4, Verifier::Token), eff(4, Verifier::Block));
    assert!(sigma(b4, t4) > 3.0, "token {t4:?} block {b4:?}");
}

#[test]
fn baseline_is_one_token_per_call() {
    let (m, _) = random_pair(2, 3, true, 2, 1.0);
    let tr = specdec_core::baseline_decode(&m, &[], 40, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(tr.serial_calls, tr.tokens_emitted());
    assert_eq!(block_efficiency(&tr, false), Some(1.0));
}
