#![allow(dead_code)]

use specdec_core::{make_random_model, ArModel, ProbVector, Vocab};

/// A seeded pair of random table models.
pub fn random_pair(seed: u64, vocab: usize, eos: bool, context_len: usize, concentration: f64) -> (ArModel<f64>, ArModel<f64>) {
    let eos = eos.then_some(vocab as u32 - 1);
    let v = Vocab::new(vocab, eos).unwrap();
    let small = make_random_model(v, context_len, 2 * seed, concentration).unwrap();
    let big = make_random_model(v, context_len, 2 * seed + 1, concentration).unwrap();
    (small, big)
}

/// Pair `i` of the seeded correctness family: vocab 2 or 3, eos on every
/// third pair, concentration cycling through sharp and flat rows.
pub fn family_pair(i: u64) -> (ArModel<f64>, ArModel<f64>) {
    let vocab = 2 + (i % 2) as usize;
    let conc = [0.3, 0.7, 1.0, 2.5][(i % 4) as usize];
    random_pair(1000 + i, vocab, i.is_multiple_of(3), 2, conc)
}

/// Rows carrying 1e-12 of mass in places.
pub fn adversarial_pairs() -> Vec<(ArModel<f64>, ArModel<f64>)> {
    let eps = 1e-12;
    let row = |p: Vec<f64>| ProbVector::new(p).unwrap();
    let v2 = Vocab::open(2).unwrap();
    let v3 = Vocab::new(3, Some(2)).unwrap();
    vec![
        (
            ArModel::memoryless(v2, row(vec![1.0 - eps, eps])).unwrap(),
            ArModel::memoryless(v2, row(vec![eps, 1.0 - eps])).unwrap(),
        ),
        (
            ArModel::markov(
                v3,
                row(vec![0.5 - eps, 0.5, eps]),
                vec![row(vec![eps, 1.0 - 2.0 * eps, eps]), row(vec![0.3, 0.7 - eps, eps]), row(vec![0.0, 0.0, 1.0])],
            )
            .unwrap(),
            ArModel::markov(
                v3,
                row(vec![eps, 1.0 - 2.0 * eps, eps]),
                vec![row(vec![0.6, 0.4 - eps, eps]), row(vec![1.0 - 2.0 * eps, eps, eps]), row(vec![0.0, 0.0, 1.0])],
            )
            .unwrap(),
        ),
    ]
}

/// `sum_{x^l} min(M_s(x^l), M_b(x^l))` for each `l = 1..=len`, by brute force.
pub fn min_joint_mass_by_len(small: &ArModel<f64>, big: &ArModel<f64>, len: usize) -> Vec<f64> {
    use specdec_core::{joint_prob, NextToken};
    let v = big.vocab();
    (1..=len)
        .map(|l| {
            v.sequences(l)
                .map(|s| joint_prob::<f64, _>(small, &s).min(joint_prob(big, &s)))
                .sum()
        })
        .collect()
}
