//! Exact analysis by enumeration and closed form.
//!
//! Everything here works in linear space over the model's scalar type and
//! recomputes joints, acceptance probabilities and residual rows on its own.
//! Nothing is shared with the sampling verifiers beyond [`NextToken`], so the
//! two can be checked against each other.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decode::CorrectionModel;
use crate::error::{Error, Result};
use crate::model::{NextToken, ProbVector, Token, TokenSeq, Vocab};
use crate::scalar::{clamped_ratio, ordered_sum, Scalar};
use crate::verify::{Correction, DraftBlock, Verifier};

/// Hard cap on the number of atoms any enumeration may touch.
pub const DEFAULT_BUDGET: u128 = 1_000_000;

fn check_budget(vocab: usize, exponent: usize, limit: u128) -> Result<()> {
    let mut needed: u128 = 1;
    for _ in 0..exponent {
        needed = needed.saturating_mul(vocab as u128);
    }
    if needed > limit {
        Err(Error::BudgetExceeded { needed, limit })
    } else {
        Ok(())
    }
}

fn shared_vocab<S, A, B>(small: &A, big: &B) -> Result<Vocab>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
{
    let (vs, vb) = (small.vocab(), big.vocab());
    if vs.size() != vb.size() {
        return Err(Error::VocabMismatch(vs.size(), vb.size()));
    }
    Ok(vb)
}

/// Half the L1 distance.
pub fn tv_distance<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch(a.len(), b.len()));
    }
    let l1 = a
        .iter()
        .zip(b)
        .fold(S::zero(), |acc, (x, y)| acc + (x.clone() - y.clone()).abs());
    Ok(l1 / S::from_usize_lossy(2))
}

/// `max{b : x[..b] == y[..b]}`
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CouplingCost {
    pub beta: usize,
}

impl CouplingCost {
    pub fn between(x: &[Token], y: &[Token]) -> Self {
        let beta = x.iter().zip(y).take_while(|(a, b)| a == b).count();
        Self { beta }
    }
}

/// Expected accepted length of the per-token verifier: sum over prefixes of
/// the product of per-step `min` of the two conditionals.
pub fn expected_tau_token<S, A, B>(small: &A, big: &B, block_len: usize, prefix: &[Token]) -> Result<S>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
{
    let v = shared_vocab(small, big)?;
    check_budget(v.size(), block_len, DEFAULT_BUDGET)?;
    fn walk<S: Scalar, A: NextToken<S> + ?Sized, B: NextToken<S> + ?Sized>(
        small: &A,
        big: &B,
        ctx: &mut TokenSeq,
        weight: S,
        left: usize,
        total: &mut S,
    ) {
        let (rs, rb) = (small.conditional(ctx), big.conditional(ctx));
        for x in 0..rs.len() {
            let w = weight.clone() * S::min_of(rs.as_slice()[x].clone(), rb.as_slice()[x].clone());
            if w <= S::zero() {
                continue;
            }
            *total = total.clone() + w.clone();
            if left > 1 {
                ctx.push(x as Token);
                walk(small, big, ctx, w, left - 1, total);
                ctx.pop();
            }
        }
    }
    let mut total = S::zero();
    if block_len > 0 {
        walk(small, big, &mut prefix.to_vec(), S::one(), block_len, &mut total);
    }
    Ok(total)
}

/// Expected accepted length of the block verifier: sum over prefixes of the
/// `min` of the two joints.
pub fn expected_tau_block<S, A, B>(small: &A, big: &B, block_len: usize, prefix: &[Token]) -> Result<S>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
{
    let v = shared_vocab(small, big)?;
    check_budget(v.size(), block_len, DEFAULT_BUDGET)?;
    fn walk<S: Scalar, A: NextToken<S> + ?Sized, B: NextToken<S> + ?Sized>(
        small: &A,
        big: &B,
        ctx: &mut TokenSeq,
        joints: (S, S),
        left: usize,
        total: &mut S,
    ) {
        let (rs, rb) = (small.conditional(ctx), big.conditional(ctx));
        for x in 0..rs.len() {
            let js = joints.0.clone() * rs.as_slice()[x].clone();
            let jb = joints.1.clone() * rb.as_slice()[x].clone();
            let m = S::min_of(js.clone(), jb.clone());
            if m <= S::zero() {
                continue;
            }
            *total = total.clone() + m;
            if left > 1 {
                ctx.push(x as Token);
                walk(small, big, ctx, (js, jb), left - 1, total);
                ctx.pop();
            }
        }
    }
    let mut total = S::zero();
    if block_len > 0 {
        let mut ctx = prefix.to_vec();
        walk(small, big, &mut ctx, (S::one(), S::one()), block_len, &mut total);
    }
    Ok(total)
}

/// Full joint table of `len` tokens after `prefix`, in lexicographic order.
pub fn joint_table<S, M>(model: &M, prefix: &[Token], len: usize) -> Result<BTreeMap<TokenSeq, S>>
where
    S: Scalar,
    M: NextToken<S> + ?Sized,
{
    let v = model.vocab();
    check_budget(v.size(), len, DEFAULT_BUDGET)?;
    let mut out = BTreeMap::new();
    for seq in v.sequences(len) {
        let p = joint_after(model, prefix, &seq);
        out.insert(seq, p);
    }
    Ok(out)
}

fn joint_after<S: Scalar, M: NextToken<S> + ?Sized>(model: &M, prefix: &[Token], seq: &[Token]) -> S {
    let mut ctx = prefix.to_vec();
    let mut p = S::one();
    for &x in seq {
        p = p * model.conditional(&ctx).prob(x).clone();
        ctx.push(x);
    }
    p
}

fn marginal<S: Scalar>(table: &BTreeMap<TokenSeq, S>, len: usize) -> BTreeMap<TokenSeq, S> {
    let mut out: BTreeMap<TokenSeq, S> = BTreeMap::new();
    for (seq, p) in table {
        let e = out.entry(seq[..len].to_vec()).or_insert_with(S::zero);
        *e = e.clone() + p.clone();
    }
    out
}

/// The upper bound on any valid coupling's expected common prefix:
/// `sum_l (1 - TV(M_s^l, M_b^l))`, computed from marginals of the full
/// length-`block_len` joint tables.
pub fn upper_bound<S, A, B>(small: &A, big: &B, block_len: usize, prefix: &[Token]) -> Result<S>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
{
    shared_vocab(small, big)?;
    let ts = joint_table(small, prefix, block_len)?;
    let tb = joint_table(big, prefix, block_len)?;
    let mut total = S::zero();
    for l in 1..=block_len {
        let ms: Vec<S> = marginal(&ts, l).into_values().collect();
        let mb: Vec<S> = marginal(&tb, l).into_values().collect();
        total = total + S::one() - tv_distance(&ms, &mb)?;
    }
    Ok(total)
}

/// Rows and joints of both models along one draft, in linear space.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScores<S> {
    pub draft: TokenSeq,
    pub small_rows: Vec<ProbVector<S>>,
    pub big_rows: Vec<ProbVector<S>>,
    /// `joint[i]` is the probability of `draft[..i]`.
    pub small_joints: Vec<S>,
    pub big_joints: Vec<S>,
}

impl<S: Scalar> LinearScores<S> {
    pub fn new<A, B>(small: &A, big: &B, prefix: &[Token], draft: &[Token]) -> Self
    where
        A: NextToken<S> + ?Sized,
        B: NextToken<S> + ?Sized,
    {
        let mut ctx = prefix.to_vec();
        let (mut small_rows, mut big_rows) = (Vec::new(), Vec::new());
        let (mut js, mut jb) = (vec![S::one()], vec![S::one()]);
        for i in 0..=draft.len() {
            let rs = small.conditional(&ctx);
            let rb = big.conditional(&ctx);
            if let Some(&x) = draft.get(i) {
                js.push(js[i].clone() * rs.prob(x).clone());
                jb.push(jb[i].clone() * rb.prob(x).clone());
                ctx.push(x);
            }
            small_rows.push(rs);
            big_rows.push(rb);
        }
        Self {
            draft: draft.to_vec(),
            small_rows,
            big_rows,
            small_joints: js,
            big_joints: jb,
        }
    }

    fn block_len(&self) -> usize {
        self.draft.len()
    }

    /// One-step leftover target mass and rejected draft mass past `draft[..m]`.
    pub fn remain_rej(&self, m: usize) -> (S, S) {
        let (jb, js) = (&self.big_joints[m], &self.small_joints[m]);
        let mut remain = S::zero();
        let mut rej = S::zero();
        for (b, s) in self.big_rows[m].as_slice().iter().zip(self.small_rows[m].as_slice()) {
            let d = jb.clone() * b.clone() - js.clone() * s.clone();
            if d > S::zero() {
                remain = remain + d;
            } else {
                rej = rej - d;
            }
        }
        (remain, rej)
    }
}

/// `P(tau = l | draft)` for `l = 0..=L` under the per-token verifier.
pub fn token_tau_given_draft<S: Scalar>(scores: &LinearScores<S>) -> Vec<S> {
    let n = scores.block_len();
    let mut out = Vec::with_capacity(n + 1);
    let mut survive = S::one();
    for i in 0..n {
        let x = scores.draft[i];
        let a = clamped_ratio(scores.big_rows[i].prob(x), scores.small_rows[i].prob(x));
        out.push(survive.clone() * (S::one() - a.clone()));
        survive = survive * a;
    }
    out.push(survive);
    out
}

/// `P(tau = l | draft)` for `l = 0..=L` under the block verifier, by the
/// backward acceptance walk.
pub fn block_tau_given_draft<S: Scalar>(scores: &LinearScores<S>) -> Vec<S> {
    let n = scores.block_len();
    let mut out = vec![S::zero(); n + 1];
    let whole = clamped_ratio(&scores.big_joints[n], &scores.small_joints[n]);
    out[n] = whole.clone();
    let mut carry = S::one() - whole;
    for m in (0..n).rev() {
        let a = if m == 0 {
            S::one()
        } else {
            let (remain, rej) = scores.remain_rej(m);
            clamped_ratio(&remain, &rej)
        };
        out[m] = carry.clone() * a.clone();
        carry = carry * (S::one() - a);
    }
    out
}

pub fn tau_given_draft<S: Scalar>(verifier: Verifier, scores: &LinearScores<S>) -> Vec<S> {
    match verifier {
        Verifier::Token => token_tau_given_draft(scores),
        Verifier::Block => block_tau_given_draft(scores),
    }
}

/// Exact distribution of the accepted length with drafts from the small model.
pub fn tau_distribution<S, A, B>(
    small: &A,
    big: &B,
    block_len: usize,
    prefix: &[Token],
    verifier: Verifier,
) -> Result<Vec<S>>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
{
    let v = shared_vocab(small, big)?;
    check_budget(v.size(), block_len, DEFAULT_BUDGET)?;
    let mut dist = vec![S::zero(); block_len + 1];
    for draft in v.sequences(block_len) {
        let scores = LinearScores::new(small, big, prefix, &draft);
        let w = scores.small_joints[block_len].clone();
        if w <= S::zero() {
            continue;
        }
        for (d, p) in dist.iter_mut().zip(tau_given_draft(verifier, &scores)) {
            *d = d.clone() + w.clone() * p;
        }
    }
    Ok(dist)
}

/// The per-token verifier's accepted-length law, from the closed form
/// `P(tau >= l) = sum_{x^l} prod_i min(M_s, M_b)`.
pub fn exact_token_tau_distribution<S, A, B>(
    small: &A,
    big: &B,
    block_len: usize,
    prefix: &[Token],
) -> Result<Vec<S>>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
{
    let v = shared_vocab(small, big)?;
    check_budget(v.size(), block_len, DEFAULT_BUDGET)?;
    let mut at_least = vec![S::zero(); block_len + 2];
    at_least[0] = S::one();
    for l in 1..=block_len {
        for seq in v.sequences(l) {
            let mut ctx = prefix.to_vec();
            let mut w = S::one();
            for &x in &seq {
                let m = S::min_of(small.conditional(&ctx).prob(x).clone(), big.conditional(&ctx).prob(x).clone());
                w = w * m;
                ctx.push(x);
            }
            at_least[l] = at_least[l].clone() + w;
        }
    }
    Ok((0..=block_len)
        .map(|l| at_least[l].clone() - at_least[l + 1].clone())
        .collect())
}

pub fn mean_of<S: Scalar>(dist: &[S]) -> S {
    dist.iter()
        .enumerate()
        .fold(S::zero(), |acc, (l, p)| acc + S::from_usize_lossy(l) * p.clone())
}

/// One cell of the joint law of (draft, verified output).
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingAtom<S> {
    pub draft: TokenSeq,
    pub output: TokenSeq,
    pub tau: usize,
    pub prob: S,
}

fn residual_weights<S: Scalar>(big_joint: &S, small_joint: &S, big_row: &[S], small_row: &[S]) -> Option<Vec<S>> {
    let w: Vec<S> = big_row
        .iter()
        .zip(small_row)
        .map(|(b, s)| (big_joint.clone() * b.clone() - small_joint.clone() * s.clone()).pos_part())
        .collect();
    let total = ordered_sum(&w);
    (total > S::zero()).then(|| w.into_iter().map(|x| x / total.clone()).collect())
}

// Branch masses below this are float noise on paths the exact law gives zero.
const FLOAT_DUST: f64 = 1e-12;

fn empty_residual_ok<S: Scalar>(prob: &S) -> bool {
    !S::is_exact() && prob.to_f64_lossy() < FLOAT_DUST
}

/// Exact joint law of draft, accepted length and completed output block.
pub fn enumerate_coupling<S, A, B>(
    small: &A,
    big: &B,
    block_len: usize,
    prefix: &[Token],
    verifier: Verifier,
) -> Result<Vec<CouplingAtom<S>>>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
{
    let v = shared_vocab(small, big)?;
    check_budget(v.size(), 2 * block_len, DEFAULT_BUDGET)?;
    let mut atoms = Vec::new();
    for draft in v.sequences(block_len) {
        let scores = LinearScores::new(small, big, prefix, &draft);
        let w = scores.small_joints[block_len].clone();
        if w <= S::zero() {
            continue;
        }
        for (tau, p) in tau_given_draft(verifier, &scores).into_iter().enumerate() {
            let prob = w.clone() * p;
            if prob <= S::zero() {
                continue;
            }
            let mut out = prefix.to_vec();
            out.extend(&draft[..tau]);
            let start = Continuation {
                ctx: out,
                big_joint: scores.big_joints[tau].clone(),
                small_joint: scores.small_joints[tau].clone(),
                depth: 0,
                prob,
            };
            let mut leaves = Vec::new();
            continue_block(small, big, verifier, block_len - tau, start, &mut leaves)?;
            for (ctx, prob) in leaves {
                atoms.push(CouplingAtom {
                    draft: draft.clone(),
                    output: ctx[prefix.len()..].to_vec(),
                    tau,
                    prob,
                });
            }
        }
    }
    Ok(atoms)
}

struct Continuation<S> {
    ctx: TokenSeq,
    big_joint: S,
    small_joint: S,
    depth: usize,
    prob: S,
}

fn continue_block<S, A, B>(
    small: &A,
    big: &B,
    verifier: Verifier,
    left: usize,
    c: Continuation<S>,
    leaves: &mut Vec<(TokenSeq, S)>,
) -> Result<()>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
{
    if c.depth == left {
        leaves.push((c.ctx, c.prob));
        return Ok(());
    }
    let rb = big.conditional(&c.ctx);
    let rs = small.conditional(&c.ctx);
    let residual = match verifier {
        Verifier::Token if c.depth == 0 => Some(residual_weights(&S::one(), &S::one(), rb.as_slice(), rs.as_slice())),
        Verifier::Block => Some(residual_weights(&c.big_joint, &c.small_joint, rb.as_slice(), rs.as_slice())),
        Verifier::Token => None,
    };
    let row = match residual {
        None => rb.as_slice().to_vec(),
        Some(Some(r)) => r,
        Some(None) if empty_residual_ok(&c.prob) => return Ok(()),
        Some(None) => return Err(Error::EmptyResidual),
    };
    for (x, p) in row.iter().enumerate() {
        if *p <= S::zero() {
            continue;
        }
        let mut ctx = c.ctx.clone();
        ctx.push(x as Token);
        let next = Continuation {
            ctx,
            big_joint: c.big_joint.clone() * rb.as_slice()[x].clone(),
            small_joint: c.small_joint.clone() * rs.as_slice()[x].clone(),
            depth: c.depth + 1,
            prob: c.prob.clone() * p.clone(),
        };
        continue_block(small, big, verifier, left, next, leaves)?;
    }
    Ok(())
}

/// Exact law of the verified output block.
pub fn enumerate_output_distribution<S, A, B>(
    small: &A,
    big: &B,
    block_len: usize,
    prefix: &[Token],
    verifier: Verifier,
) -> Result<BTreeMap<TokenSeq, S>>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
{
    let mut out: BTreeMap<TokenSeq, S> = BTreeMap::new();
    for atom in enumerate_coupling(small, big, block_len, prefix, verifier)? {
        let e = out.entry(atom.output).or_insert_with(S::zero);
        *e = e.clone() + atom.prob;
    }
    Ok(out)
}

/// `P(X^l = x^l, tau >= l)` under the block verifier, keyed by `(l, x^l)`
/// for `l = 1..=L`.
pub fn enumerate_block_accept_joint<S, A, B>(
    small: &A,
    big: &B,
    block_len: usize,
    prefix: &[Token],
) -> Result<BTreeMap<(usize, TokenSeq), S>>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
{
    let v = shared_vocab(small, big)?;
    check_budget(v.size(), block_len, DEFAULT_BUDGET)?;
    let mut out: BTreeMap<(usize, TokenSeq), S> = BTreeMap::new();
    for l in 1..=block_len {
        for seq in v.sequences(l) {
            out.insert((l, seq), S::zero());
        }
    }
    for draft in v.sequences(block_len) {
        let scores = LinearScores::new(small, big, prefix, &draft);
        let w = scores.small_joints[block_len].clone();
        if w <= S::zero() {
            continue;
        }
        let dist = block_tau_given_draft(&scores);
        let mut at_least = S::zero();
        for l in (1..=block_len).rev() {
            at_least = at_least + dist[l].clone();
            let e = out.get_mut(&(l, draft[..l].to_vec())).expect("cell exists");
            *e = e.clone() + w.clone() * at_least.clone();
        }
    }
    Ok(out)
}

/// `E[beta]` over a coupling, directly.
pub fn expected_beta<S: Scalar>(atoms: &[CouplingAtom<S>]) -> S {
    atoms.iter().fold(S::zero(), |acc, a| {
        acc + S::from_usize_lossy(CouplingCost::between(&a.draft, &a.output).beta) * a.prob.clone()
    })
}

/// `E[beta]` over a coupling as `sum_l P(beta >= l)`.
pub fn expected_beta_by_tails<S: Scalar>(atoms: &[CouplingAtom<S>], block_len: usize) -> S {
    (1..=block_len).fold(S::zero(), |acc, l| {
        let tail = atoms
            .iter()
            .filter(|a| CouplingCost::between(&a.draft, &a.output).beta >= l)
            .fold(S::zero(), |t, a| t + a.prob.clone());
        acc + tail
    })
}

/// `n choose k` probabilities of a binomial, in order `k = 0..=n`.
pub fn binomial_pmf<S: Scalar>(n: usize, p: &S) -> Vec<S> {
    let q = S::one() - p.clone();
    let pow = |base: &S, e: usize| (0..e).fold(S::one(), |acc, _| acc * base.clone());
    let mut choose: u64 = 1;
    (0..=n)
        .map(|k| {
            let c = S::from_u64(choose).expect("binomial coefficient fits");
            if k < n {
                // exact: C(n, k+1) = C(n, k) (n-k) / (k+1)
                choose = (choose as u128 * (n - k) as u128 / (k + 1) as u128) as u64;
            }
            c * pow(p, k) * pow(&q, n - k)
        })
        .collect()
}

/// Closed-form expected accepted lengths for memoryless two-token models.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliCurves<S> {
    /// `token[l - 1]` is the per-token verifier's value at block length `l`.
    pub token: Vec<S>,
    pub block: Vec<S>,
}

pub const BERNOULLI_MAX_LEN: usize = 64;

/// Both curves for block lengths `1..=max_len`, summing `i = 1..=L`.
pub fn bernoulli_curves<S: Scalar>(p: &S, q: &S, max_len: usize) -> Result<BernoulliCurves<S>> {
    let unit = |x: &S| *x >= S::zero() && *x <= S::one();
    if !unit(p) || !unit(q) {
        return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
    }
    if max_len > BERNOULLI_MAX_LEN {
        return Err(Error::InvalidArgument(format!(
            "block length {max_len} exceeds {BERNOULLI_MAX_LEN}"
        )));
    }
    let agree = S::one() - (p.clone() - q.clone()).abs();
    let (mut token, mut block) = (Vec::new(), Vec::new());
    let (mut tsum, mut bsum, mut power) = (S::zero(), S::zero(), S::one());
    for i in 1..=max_len {
        power = power * agree.clone();
        tsum = tsum + power.clone();
        bsum = bsum + S::one() - tv_distance(&binomial_pmf(i, p), &binomial_pmf(i, q))?;
        token.push(tsum.clone());
        block.push(bsum.clone());
    }
    Ok(BernoulliCurves { token, block })
}

/// Exact law of the first `horizon` output tokens of the full decoding loop,
/// with finished outputs padded by eos. Branches over drafts, accepted
/// lengths and free tokens across iterations, using the same correction
/// models as the sampler.
pub fn enumerate_decode_distribution<S, A, B>(
    big: &B,
    small: &A,
    prompt: &[Token],
    block_len: usize,
    verifier: Verifier,
    horizon: usize,
) -> Result<BTreeMap<TokenSeq, S>>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
{
    let v = shared_vocab(small, big)?;
    if block_len == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("block length and horizon must be positive".into()));
    }
    let eos = v.eos();
    check_budget(v.size(), 2 * block_len + horizon, DEFAULT_BUDGET * 100)?;
    let mut out = BTreeMap::new();
    let state = DecodeState {
        eff: CorrectionModel::new(big, small),
        ctx: prompt.to_vec(),
        emitted: 0,
        prob: S::one(),
    };
    decode_branch(small, v, block_len, verifier, horizon, prompt.len(), eos, state, &mut out)?;
    Ok(out)
}

struct DecodeState<'m, S, A: ?Sized, B: ?Sized> {
    eff: CorrectionModel<'m, S, A, B>,
    ctx: TokenSeq,
    emitted: usize,
    prob: S,
}

fn record<S: Scalar>(
    out: &mut BTreeMap<TokenSeq, S>,
    ctx: &[Token],
    start: usize,
    horizon: usize,
    pad: Option<Token>,
    prob: S,
) {
    let mut seq = ctx[start..].to_vec();
    seq.truncate(horizon);
    while seq.len() < horizon {
        seq.push(pad.expect("early stop implies eos"));
    }
    let e = out.entry(seq).or_insert_with(S::zero);
    *e = e.clone() + prob;
}

#[allow(clippy::too_many_arguments)]
fn decode_branch<S, A, B>(
    small: &A,
    v: Vocab,
    block_len: usize,
    verifier: Verifier,
    horizon: usize,
    start: usize,
    eos: Option<Token>,
    mut state: DecodeState<'_, S, A, B>,
    out: &mut BTreeMap<TokenSeq, S>,
) -> Result<()>
where
    S: Scalar,
    A: NextToken<S> + ?Sized,
    B: NextToken<S> + ?Sized,
{
    state.eff.advance(&state.ctx);
    for draft in v.sequences(block_len) {
        let scores = LinearScores::new(small, &state.eff, &state.ctx, &draft);
        let w = scores.small_joints[block_len].clone();
        if w <= S::zero() {
            continue;
        }
        let block = DraftBlock::score(small, &state.eff, &state.ctx, draft.clone())?;
        for (tau, p) in tau_given_draft(verifier, &scores).into_iter().enumerate() {
            let prob = state.prob.clone() * w.clone() * p;
            if prob <= S::zero() {
                continue;
            }
            let mut ctx = state.ctx.clone();
            let mut emitted = state.emitted;
            let mut done = false;
            for &t in &draft[..tau] {
                ctx.push(t);
                emitted += 1;
                if emitted == horizon || v.is_eos(t) {
                    done = true;
                    break;
                }
            }
            if done {
                record(out, &ctx, start, horizon, eos, prob);
                continue;
            }
            let correction = match verifier {
                _ if tau == block_len => Correction::Plain,
                Verifier::Token => Correction::TokenResidual,
                Verifier::Block => Correction::BlockResidual {
                    depth_limit: block_len - tau,
                    big_log_joint: block.big_log_joint(tau),
                    small_log_joint: block.small_log_joint(tau),
                },
            };
            let mut eff = state.eff.clone();
            eff.push(ctx.clone(), correction);
            let row = eff.conditional(&ctx);
            for (z, pz) in row.as_slice().iter().enumerate() {
                let prob = prob.clone() * pz.clone();
                if prob <= S::zero() {
                    continue;
                }
                let mut ctx = ctx.clone();
                ctx.push(z as Token);
                if emitted + 1 == horizon || v.is_eos(z as Token) {
                    record(out, &ctx, start, horizon, eos, prob);
                    continue;
                }
                let next = DecodeState {
                    eff: eff.clone(),
                    ctx,
                    emitted: emitted + 1,
                    prob,
                };
                decode_branch(small, v, block_len, verifier, horizon, start, eos, next, out)?;
            }
        }
    }
    Ok(())
}

/// Largest absolute difference between two distributions over the same keys,
/// treating a missing key as probability zero.
pub fn max_deviation<K: Ord + Clone, S: Scalar>(a: &BTreeMap<K, S>, b: &BTreeMap<K, S>) -> S {
    let mut worst = S::zero();
    for k in a.keys().chain(b.keys()) {
        let x = a.get(k).cloned().unwrap_or_else(S::zero);
        let y = b.get(k).cloned().unwrap_or_else(S::zero);
        worst = S::max_of(worst, (x - y).abs());
    }
    worst
}

/// Summary of one `(M_s, M_b, L)` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub block_len: usize,
    pub exact_token: f64,
    pub exact_block: f64,
    pub upper_bound: f64,
    pub mc_token: Option<crate::montecarlo::McStat>,
    pub mc_block: Option<crate::montecarlo::McStat>,
    pub n_trials: u64,
}

impl AcceptanceReport {
    pub fn exact<S, A, B>(small: &A, big: &B, block_len: usize, prefix: &[Token]) -> Result<Self>
    where
        S: Scalar,
        A: NextToken<S> + ?Sized,
        B: NextToken<S> + ?Sized,
    {
        Ok(Self {
            block_len,
            exact_token: expected_tau_token(small, big, block_len, prefix)?.to_f64_lossy(),
            exact_block: expected_tau_block(small, big, block_len, prefix)?.to_f64_lossy(),
            upper_bound: upper_bound(small, big, block_len, prefix)?.to_f64_lossy(),
            mc_token: None,
            mc_block: None,
            n_trials: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{joint_prob, make_random_model, ArModel};
    use crate::scalar::BigRational;
    use num_bigint::BigInt;
    use proptest::prelude::*;

    fn ber(q: f64) -> ArModel<f64> {
        ArModel::bernoulli(q).unwrap()
    }

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.25, 0.75]).unwrap(), 0.25);
        assert_eq!(tv_distance(&[0.5], &[0.25, 0.75]), Err(Error::SizeMismatch(1, 2)));
    }

    #[test]
    fn coupling_cost() {
        assert_eq!(CouplingCost::between(&[0, 1, 2], &[0, 1, 0]).beta, 2);
        assert_eq!(CouplingCost::between(&[1, 1], &[0, 1]).beta, 0);
        assert_eq!(CouplingCost::between(&[1, 1], &[1, 1]).beta, 2);
    }

    #[test]
    fn bernoulli_expectations() {
        let (s, b) = (ber(0.5), ber(0.75));
        let t = expected_tau_token(&s, &b, 2, &[]).unwrap();
        let k = expected_tau_block(&s, &b, 2, &[]).unwrap();
        assert!((t - 1.3125).abs() < 1e-12);
        assert!((k - 1.4375).abs() < 1e-12);
        assert!((upper_bound(&s, &b, 2, &[]).unwrap() - 1.4375).abs() < 1e-12);
    }

    #[test]
    fn exact_rational_bernoulli() {
        let s = ArModel::bernoulli(0.5).unwrap().cast::<BigRational>();
        let b = ArModel::bernoulli(0.75).unwrap().cast::<BigRational>();
        assert_eq!(expected_tau_token(&s, &b, 2, &[]).unwrap(), rat(21, 16));
        assert_eq!(expected_tau_block(&s, &b, 2, &[]).unwrap(), rat(23, 16));
        assert_eq!(upper_bound(&s, &b, 2, &[]).unwrap(), rat(23, 16));
        let c = bernoulli_curves(&rat(1, 2), &rat(3, 4), 2).unwrap();
        assert_eq!(c.token, vec![rat(3, 4), rat(21, 16)]);
        assert_eq!(c.block, vec![rat(3, 4), rat(23, 16)]);
    }

    #[test]
    fn identical_and_disjoint() {
        let v = Vocab::open(3).unwrap();
        let m: ArModel<f64> = make_random_model(v, 2, 3, 1.0).unwrap();
        assert!((expected_tau_token(&m, &m, 4, &[]).unwrap() - 4.0).abs() < 1e-12);
        assert!((expected_tau_block(&m, &m, 4, &[]).unwrap() - 4.0).abs() < 1e-12);
        let a = ArModel::memoryless(v, ProbVector::point_mass(3, 0)).unwrap();
        let b = ArModel::memoryless(v, ProbVector::point_mass(3, 1)).unwrap();
        assert_eq!(expected_tau_token::<f64, _, _>(&a, &b, 3, &[]).unwrap(), 0.0);
        assert_eq!(expected_tau_block::<f64, _, _>(&a, &b, 3, &[]).unwrap(), 0.0);
    }

    #[test]
    fn budget_is_enforced() {
        let v = Vocab::open(10).unwrap();
        let m: ArModel<f64> = make_random_model(v, 0, 1, 1.0).unwrap();
        assert!(matches!(
            expected_tau_block(&m, &m, 7, &[]),
            Err(Error::BudgetExceeded { needed: 10_000_000, .. })
        ));
        assert!(expected_tau_block(&m, &m, 6, &[]).is_ok());
        assert!(matches!(
            enumerate_coupling(&m, &m, 4, &[], Verifier::Block),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn accepted_length_laws_agree() {
        let v = Vocab::new(3, Some(2)).unwrap();
        let s: ArModel<f64> = make_random_model(v, 2, 11, 0.8).unwrap();
        let b: ArModel<f64> = make_random_model(v, 2, 12, 0.8).unwrap();
        for l in 1..=4 {
            let by_draft = tau_distribution(&s, &b, l, &[], Verifier::Token).unwrap();
            let closed = exact_token_tau_distribution(&s, &b, l, &[]).unwrap();
            for (x, y) in by_draft.iter().zip(&closed) {
                assert!((x - y).abs() < 1e-12);
            }
            let et = expected_tau_token(&s, &b, l, &[]).unwrap();
            assert!((mean_of(&closed) - et).abs() < 1e-12);
            let blk = tau_distribution(&s, &b, l, &[], Verifier::Block).unwrap();
            assert!((blk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((mean_of(&blk) - expected_tau_block(&s, &b, l, &[]).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn output_law_is_target_law_exactly() {
        let v = Vocab::new(3, Some(0)).unwrap();
        let s = make_random_model::<f64>(v, 1, 5, 0.5).unwrap().cast::<BigRational>();
        let b = make_random_model::<f64>(v, 1, 6, 0.5).unwrap().cast::<BigRational>();
        let target = joint_table(&b, &[1], 2).unwrap();
        for verifier in Verifier::ALL {
            let got = enumerate_output_distribution(&s, &b, 2, &[1], verifier).unwrap();
            assert_eq!(max_deviation(&got, &target), BigRational::from_integer(0.into()));
        }
    }

    #[test]
    fn identical_models_keep_draft() {
        let v = Vocab::open(2).unwrap();
        let m: ArModel<f64> = make_random_model(v, 1, 9, 1.0).unwrap();
        let atoms = enumerate_coupling(&m, &m, 3, &[], Verifier::Block).unwrap();
        assert!(atoms.iter().all(|a| a.tau == 3 && a.output == a.draft));
        assert!((expected_beta(&atoms) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn accept_joint_cells() {
        let s = ber(0.5);
        let b = ber(0.75);
        let j = enumerate_block_accept_joint(&s, &b, 2, &[]).unwrap();
        let expect = [
            ((1, vec![0]), 0.25),
            ((1, vec![1]), 0.5),
            ((2, vec![0, 0]), 0.0625),
            ((2, vec![0, 1]), 0.1875),
            ((2, vec![1, 0]), 0.1875),
            ((2, vec![1, 1]), 0.25),
        ];
        for (k, want) in expect {
            assert!((j[&k] - want).abs() < 1e-12, "{k:?}: {} vs {want}", j[&k]);
        }
    }

    #[test]
    fn binomial_rows() {
        let pmf = binomial_pmf(3, &rat(1, 2));
        assert_eq!(pmf, vec![rat(1, 8), rat(3, 8), rat(3, 8), rat(1, 8)]);
        let big = binomial_pmf(64, &0.5f64);
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_curve_edges() {
        let c = bernoulli_curves(&0.75f64, &0.75, 5).unwrap();
        for (l, (t, b)) in c.token.iter().zip(&c.block).enumerate() {
            assert!((t - (l + 1) as f64).abs() < 1e-12);
            assert!((b - (l + 1) as f64).abs() < 1e-12);
        }
        assert!(bernoulli_curves(&1.5f64, &0.5, 3).is_err());
        assert!(bernoulli_curves(&0.5f64, &0.5, 65).is_err());
    }

    #[test]
    fn decode_law_bernoulli() {
        let (s, b) = (ber(0.5), ber(0.75));
        let target = joint_table(&b, &[], 4).unwrap();
        for verifier in Verifier::ALL {
            let got = enumerate_decode_distribution(&b, &s, &[], 2, verifier, 4).unwrap();
            assert!(max_deviation(&got, &target) < 1e-12, "{verifier:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn block_dominates_token_per_sequence(seed in 0u64..10_000, vocab in 2usize..4, l in 1usize..4) {
            let v = Vocab::open(vocab).unwrap();
            let s: ArModel<f64> = make_random_model(v, 2, seed, 0.7).unwrap();
            let b: ArModel<f64> = make_random_model(v, 2, seed + 77_777, 0.7).unwrap();
            for len in 1..=l {
                for seq in v.sequences(len) {
                    let js = joint_prob(&s, &seq);
                    let jb = joint_prob(&b, &seq);
                    let mut ctx = Vec::new();
                    let mut prod = 1.0;
                    for &x in &seq {
                        prod *= s.conditional(&ctx).prob(x).min(*b.conditional(&ctx).prob(x));
                        ctx.push(x);
                    }
                    prop_assert!(js.min(jb) >= prod - 1e-15);
                }
            }
            let et = expected_tau_token(&s, &b, l, &[]).unwrap();
            let eb = expected_tau_block(&s, &b, l, &[]).unwrap();
            prop_assert!(eb >= et - 1e-12);
            prop_assert!(eb <= l as f64 + 1e-12);
        }

        #[test]
        fn beta_by_tails_matches_direct(seed in 0u64..10_000) {
            let v = Vocab::open(2).unwrap();
            let s: ArModel<f64> = make_random_model(v, 1, seed, 1.0).unwrap();
            let b: ArModel<f64> = make_random_model(v, 1, seed + 1, 1.0).unwrap();
            for verifier in Verifier::ALL {
                let atoms = enumerate_coupling(&s, &b, 3, &[], verifier).unwrap();
                let d = expected_beta(&atoms);
                let t = expected_beta_by_tails(&atoms, 3);
                prop_assert!((d - t).abs() < 1e-12);
                prop_assert!(d >= mean_of(&tau_distribution(&s, &b, 3, &[], verifier).unwrap()) - 1e-12);
            }
        }

        #[test]
        fn tv_is_symmetric_and_bounded(a in prop::collection::vec(0.0f64..1.0, 4), b in prop::collection::vec(0.0f64..1.0, 4)) {
            let na: f64 = a.iter().sum::<f64>() + 1e-3;
            let nb: f64 = b.iter().sum::<f64>() + 1e-3;
            let a: Vec<f64> = a.iter().map(|x| (x + 2.5e-4) / na).collect();
            let b: Vec<f64> = b.iter().map(|x| (x + 2.5e-4) / nb).collect();
            let d = tv_distance(&a, &b).unwrap();
            prop_assert_eq!(d, tv_distance(&b, &a).unwrap());
            prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        }

        #[test]
        fn first_step_acceptance_is_one_minus_tv(seed in 0u64..10_000) {
            let v = Vocab::open(3).unwrap();
            let s: ArModel<f64> = make_random_model(v, 0, seed, 0.5).unwrap();
            let b: ArModel<f64> = make_random_model(v, 0, seed + 3, 0.5).unwrap();
            let tv = tv_distance(s.conditional(&[]).as_slice(), b.conditional(&[]).as_slice()).unwrap();
            let dist = tau_distribution(&s, &b, 1, &[], Verifier::Token).unwrap();
            prop_assert!((dist[1] - (1.0 - tv)).abs() < 1e-12);
        }
    }
}
