use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use specdec_core::{
    baseline_decode, bernoulli_curves, block_efficiency, enumerate_block_accept_joint,
    enumerate_output_distribution, expected_tau_block, expected_tau_token, joint_prob, joint_table,
    make_random_model, mc_block_efficiency, mc_tau, spec_decode, upper_bound, AcceptanceReport,
    ArModel, BigRational, DecodeConfig, McStat, ModelKind, ModelSpec, NextToken, ProbVector,
    Scalar, Token, Verifier, Vocab,
};

use crate::config::{build, config_hash, load_spec, parse_prompt};
use crate::table::{num, opt_num, Table};
use crate::{CliError, CompareArgs, DecodeArgs, ExactArgs, ModelArgs, OracleArgs, OutputArgs, SweepArgs};

/// Slack for comparing exact values computed along different routes.
const EXACT_TOL: f64 = 1e-10;
/// Slack for the block-versus-token ordering.
const ORDER_TOL: f64 = 1e-12;

fn emit(output: &OutputArgs, bytes: &[u8], stdout: &mut dyn Write) -> Result<(), CliError> {
    match &output.out {
        Some(path) => fs::write(path, bytes)
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display()))),
        None => Ok(stdout.write_all(bytes)?),
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

struct Models {
    ms: ModelSpec,
    mb: ModelSpec,
    small: ArModel<f64>,
    big: ArModel<f64>,
    prompt: Vec<Token>,
}

fn load_models(args: &ModelArgs) -> Result<Models, CliError> {
    let ms = load_spec(&args.ms)?;
    let mb = load_spec(&args.mb)?;
    let (small, big) = (build(&ms), build(&mb));
    if small.vocab().size() != big.vocab().size() {
        return Err(CliError::Config(format!(
            "--ms has {} tokens, --mb has {}",
            small.vocab().size(),
            big.vocab().size()
        )));
    }
    let prompt = parse_prompt(&args.prompt).map_err(|e| CliError::Config(format!("--prompt: {e}")))?;
    big.vocab()
        .check_seq(&prompt)
        .map_err(|e| CliError::Config(format!("--prompt: {e}")))?;
    Ok(Models {
        ms,
        mb,
        small,
        big,
        prompt,
    })
}

fn check_order(rows: &[AcceptanceReport]) -> Result<(), CliError> {
    for r in rows {
        if r.exact_block < r.exact_token - ORDER_TOL {
            return Err(CliError::Violation(format!(
                "L={}: block {} below token {}",
                r.block_len, r.exact_block, r.exact_token
            )));
        }
        if (r.exact_block - r.upper_bound).abs() > EXACT_TOL {
            return Err(CliError::Violation(format!(
                "L={}: block {} differs from the upper bound {}",
                r.block_len, r.exact_block, r.upper_bound
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareConfig<'a> {
    command: &'static str,
    ms: &'a ModelSpec,
    mb: &'a ModelSpec,
    prompt: &'a [Token],
    block_lens: &'a [usize],
    verifier: Option<&'static str>,
    trials: u64,
    seed: u64,
    horizon: usize,
    include_partial: bool,
}

#[derive(Serialize)]
struct CompareRow {
    #[serde(flatten)]
    report: AcceptanceReport,
    efficiency_token: Option<McStat>,
    efficiency_block: Option<McStat>,
}

pub fn compare(args: CompareArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let m = load_models(&args.models)?;
    if args.trials == 0 {
        return Err(CliError::Config("--trials must be at least 1".into()));
    }
    if args.horizon == 0 {
        return Err(CliError::Config("--horizon must be at least 1".into()));
    }
    let selected = args.verifier.map(Verifier::from);
    let config = CompareConfig {
        command: "compare",
        ms: &m.ms,
        mb: &m.mb,
        prompt: &m.prompt,
        block_lens: &args.block_lens.0,
        verifier: selected.map(Verifier::name),
        trials: args.trials,
        seed: args.seed,
        horizon: args.horizon,
        include_partial: args.include_partial,
    };
    let hash = config_hash(&config);
    let mut rows = Vec::new();
    for &l in &args.block_lens.0 {
        let start = Instant::now();
        let mut report = AcceptanceReport::exact(&m.small, &m.big, l, &m.prompt)?;
        report.n_trials = args.trials;
        let mut eff = [None, None];
        for (i, v) in Verifier::ALL.into_iter().enumerate() {
            if selected.is_some_and(|s| s != v) {
                continue;
            }
            let tau = mc_tau(&m.small, &m.big, l, &m.prompt, v, args.trials, args.seed)?;
            match v {
                Verifier::Token => report.mc_token = Some(tau),
                Verifier::Block => report.mc_block = Some(tau),
            }
            eff[i] = Some(mc_block_efficiency(
                &m.small,
                &m.big,
                &m.prompt,
                l,
                v,
                args.horizon,
                !args.include_partial,
                args.trials,
                args.seed,
            )?);
        }
        writeln!(err, "informational: L={l} wall clock {:.3}s", start.elapsed().as_secs_f64())?;
        rows.push(CompareRow {
            report,
            efficiency_token: eff[0],
            efficiency_block: eff[1],
        });
    }

    let bytes = if args.output.json {
        json_bytes(&serde_json::json!({ "config_hash": hash, "seed": args.seed, "rows": rows }))
    } else {
        let mut t = Table::new(vec![
            "L",
            "exact_token",
            "exact_block",
            "upper_bound",
            "mc_token_mean",
            "mc_token_se",
            "mc_block_mean",
            "mc_block_se",
            "efficiency_token_mean",
            "efficiency_token_se",
            "efficiency_block_mean",
            "efficiency_block_se",
            "n_trials",
        ]);
        for r in &rows {
            let p = &r.report;
            let mean = |s: Option<McStat>| opt_num(s.map(|s| s.mean));
            let se = |s: Option<McStat>| opt_num(s.map(|s| s.se));
            t.push(vec![
                p.block_len.to_string(),
                num(p.exact_token),
                num(p.exact_block),
                num(p.upper_bound),
                mean(p.mc_token),
                se(p.mc_token),
                mean(p.mc_block),
                se(p.mc_block),
                mean(r.efficiency_token),
                se(r.efficiency_token),
                mean(r.efficiency_block),
                se(r.efficiency_block),
                p.n_trials.to_string(),
            ]);
        }
        let mut buf = Vec::new();
        t.write(&mut buf, &hash, Some(args.seed))?;
        buf
    };
    emit(&args.output, &bytes, out)?;
    let reports: Vec<AcceptanceReport> = rows.into_iter().map(|r| r.report).collect();
    check_order(&reports)
}

#[derive(Serialize)]
struct SweepRow {
    p: f64,
    q: f64,
    block_len: usize,
    token_curve: f64,
    block_curve: f64,
    gap: f64,
}

pub fn bernoulli_sweep(args: SweepArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let offset = if args.include_free_token { 1.0 } else { 0.0 };
    let mut rows = Vec::new();
    let mut violation = None;
    for &p in &args.p {
        let c = bernoulli_curves(&p, &args.q, args.max_len)?;
        let mut prev_gap = f64::NEG_INFINITY;
        for (i, (t, b)) in c.token.iter().zip(&c.block).enumerate() {
            let gap = b - t;
            if gap < -ORDER_TOL || gap < prev_gap - ORDER_TOL {
                violation.get_or_insert(format!("p={p}, L={}: gap {gap} after {prev_gap}", i + 1));
            }
            prev_gap = gap;
            rows.push(SweepRow {
                p,
                q: args.q,
                block_len: i + 1,
                token_curve: t + offset,
                block_curve: b + offset,
                gap,
            });
        }
    }
    let hash = config_hash(&(
        "bernoulli-sweep",
        &args.p,
        args.q,
        args.max_len,
        args.include_free_token,
    ));
    let bytes = if args.output.json {
        json_bytes(&serde_json::json!({ "config_hash": hash, "rows": rows }))
    } else {
        let mut t = Table::new(vec!["p", "q", "L", "token_curve", "block_curve", "gap"]);
        for r in &rows {
            t.push(vec![
                num(r.p),
                num(r.q),
                r.block_len.to_string(),
                num(r.token_curve),
                num(r.block_curve),
                num(r.gap),
            ]);
        }
        let mut buf = Vec::new();
        t.write(&mut buf, &hash, None)?;
        buf
    };
    emit(&args.output, &bytes, out)?;
    match violation {
        Some(v) => Err(CliError::Violation(v)),
        None => Ok(()),
    }
}

/// Worst deviation seen by each oracle check.
#[derive(Debug, Clone, Default, Serialize)]
pub struct OracleSummary {
    pub pairs_checked: u64,
    pub pairs_skipped: u64,
    pub distribution_token: f64,
    pub distribution_block: f64,
    pub accept_joint: f64,
    pub optimality: f64,
    /// Largest `token - block`; positive means dominance failed.
    pub dominance: f64,
    pub tolerance: f64,
}

impl OracleSummary {
    fn failures(&self) -> Vec<&'static str> {
        let mut f = Vec::new();
        let tol = self.tolerance;
        for (name, v) in [
            ("distribution (token)", self.distribution_token),
            ("distribution (block)", self.distribution_block),
            ("accept joint", self.accept_joint),
            ("optimality", self.optimality),
        ] {
            if v > tol {
                f.push(name);
            }
        }
        if self.dominance > if tol == 0.0 { 0.0 } else { ORDER_TOL } {
            f.push("dominance");
        }
        f
    }
}

fn deviations<S: Scalar>(small: &ArModel<S>, big: &ArModel<S>, l: usize, summary: &mut OracleSummary) -> specdec_core::Result<()> {
    let worst = |a: f64, b: S| a.max(b.abs().to_f64_lossy());
    let target = joint_table(big, &[], l)?;
    let mut dev = [S::zero(), S::zero()];
    for (i, v) in Verifier::ALL.into_iter().enumerate() {
        dev[i] = specdec_core::max_deviation(&enumerate_output_distribution(small, big, l, &[], v)?, &target);
    }
    let joint = enumerate_block_accept_joint(small, big, l, &[])?;
    let mut accept = S::zero();
    for ((_, seq), p) in &joint {
        let m = S::min_of(joint_prob(small, seq), joint_prob(big, seq));
        accept = S::max_of(accept, (p.clone() - m).abs());
    }
    let token: S = expected_tau_token(small, big, l, &[])?;
    let block: S = expected_tau_block(small, big, l, &[])?;
    let bound: S = upper_bound(small, big, l, &[])?;
    let [dt, db] = dev;
    summary.distribution_token = worst(summary.distribution_token, dt);
    summary.distribution_block = worst(summary.distribution_block, db);
    summary.accept_joint = worst(summary.accept_joint, accept);
    summary.optimality = worst(summary.optimality, block.clone() - bound);
    summary.dominance = summary.dominance.max((token - block).to_f64_lossy());
    summary.pairs_checked += 1;
    Ok(())
}

/// Pushes every row to its argmax with `1e-12` left on each other token.
fn sharpen(model: &ArModel<f64>) -> ArModel<f64> {
    const DUST: f64 = 1e-12;
    let sharp = |row: &ProbVector<f64>| {
        let n = row.len();
        let top = (0..n)
            .max_by(|&a, &b| row.as_slice()[a].total_cmp(&row.as_slice()[b]))
            .unwrap_or(0);
        let probs = (0..n)
            .map(|i| if i == top { 1.0 - (n - 1) as f64 * DUST } else { DUST })
            .collect();
        ProbVector::new(probs).expect("sharpened row is normalized")
    };
    match model.kind() {
        ModelKind::Table {
            context_len,
            rows,
            default,
        } => {
            let rows: BTreeMap<_, _> = rows.iter().map(|(k, r)| (k.clone(), sharp(r))).collect();
            ArModel::table(model.vocab(), *context_len, rows, sharp(default)).expect("same shape")
        }
        _ => unreachable!("random models are tables"),
    }
}

type Pair = (ArModel<f64>, ArModel<f64>);

fn oracle_pairs(args: &OracleArgs) -> Result<Vec<Pair>, CliError> {
    let mut pairs = Vec::new();
    for i in 0..args.pairs {
        let eos = (i % 2 == 1).then(|| args.vocab as Token - 1);
        let vocab = Vocab::new(args.vocab, eos).map_err(|e| CliError::Config(format!("--vocab: {e}")))?;
        let conc = [0.3, 1.0, 3.0][(i % 3) as usize];
        let seed = args.seed.wrapping_add(2 * i);
        let small: ArModel<f64> = make_random_model(vocab, 2, seed, conc)?;
        let big: ArModel<f64> = make_random_model(vocab, 2, seed + 1, conc)?;
        if args.adversarial {
            pairs.push((sharpen(&small), sharpen(&big)));
        }
        pairs.push((small, big));
    }
    Ok(pairs)
}

pub fn oracle_check(args: OracleArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    if args.block_len == 0 {
        return Err(CliError::Config("--L must be positive".into()));
    }
    let pairs = oracle_pairs(&args)?;
    let mut summary = OracleSummary {
        tolerance: if args.exact { 0.0 } else { EXACT_TOL },
        ..Default::default()
    };
    let mut budget_note = None;
    for (small, big) in &pairs {
        let result = if args.exact {
            deviations::<BigRational>(&small.cast(), &big.cast(), args.block_len, &mut summary)
        } else {
            deviations(small, big, args.block_len, &mut summary)
        };
        match result {
            Ok(()) => {}
            Err(e @ specdec_core::Error::BudgetExceeded { .. }) => {
                writeln!(err, "warning: skipping pair: {e}")?;
                summary.pairs_skipped += 1;
                budget_note = Some(e.to_string());
            }
            Err(e) => return Err(CliError::Violation(format!("oracle error: {e}"))),
        }
    }
    let failures = summary.failures();
    let bytes = if args.output.json {
        json_bytes(&serde_json::json!({ "summary": summary, "failures": failures }))
    } else {
        let mut s = format!(
            "oracle-check: {} pairs checked, {} skipped, vocab {}, L {}, {}\n",
            summary.pairs_checked,
            summary.pairs_skipped,
            args.vocab,
            args.block_len,
            if args.exact { "exact rationals" } else { "f64" }
        );
        for (name, v) in [
            ("distribution (token)", summary.distribution_token),
            ("distribution (block)", summary.distribution_block),
            ("accept joint", summary.accept_joint),
            ("optimality", summary.optimality),
            ("dominance", summary.dominance),
        ] {
            let status = if failures.contains(&name) { "FAIL" } else { "ok" };
            s.push_str(&format!("{name:<22} worst {v:e} {status}\n"));
        }
        s.into_bytes()
    };
    emit(&args.output, &bytes, out)?;
    if summary.pairs_checked == 0 {
        return Err(match budget_note {
            Some(note) => CliError::Budget(format!("no checks executed: {note}")),
            None => CliError::Violation("no checks executed".into()),
        });
    }
    if !failures.is_empty() {
        return Err(CliError::Violation(format!("failed: {}", failures.join(", "))));
    }
    Ok(())
}

#[derive(Serialize)]
struct DecodeReport {
    config_hash: String,
    seed: u64,
    block_efficiency: Option<f64>,
    trace: specdec_core::DecodeTrace,
}

pub fn decode(args: DecodeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let m = load_models(&args.models)?;
    let verifier = Verifier::from(args.verifier);
    let hash = config_hash(&(
        "decode",
        &m.ms,
        &m.mb,
        &m.prompt,
        args.block_len,
        verifier.name(),
        args.seed,
        args.horizon,
        args.baseline,
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let trace = if args.baseline {
        baseline_decode(&m.big, &m.prompt, args.horizon, &mut rng)?
    } else {
        let cfg = DecodeConfig {
            block_len: args.block_len,
            verifier,
            max_tokens: args.horizon,
        };
        spec_decode(&m.big, &m.small, &m.prompt, cfg, &mut rng)?
    };
    let eff = block_efficiency(&trace, false);
    let bytes = if args.output.json {
        json_bytes(&DecodeReport {
            config_hash: hash,
            seed: args.seed,
            block_efficiency: eff,
            trace,
        })
    } else {
        let tokens: Vec<String> = trace.output.iter().map(|t| t.to_string()).collect();
        let mut s = format!("# config_hash={hash} seed={}\n", args.seed);
        s.push_str(&format!("output: {}\n", tokens.join(" ")));
        for (i, it) in trace.iterations.iter().enumerate() {
            let free = it.free_token.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "iteration {}: tau={} emitted={} free={free}{}\n",
                i + 1,
                it.tau,
                it.emitted,
                if it.partial { " (partial)" } else { "" }
            ));
        }
        s.push_str(&format!(
            "tokens: {}, serial calls: {}, block efficiency: {}, stop: {}\n",
            trace.tokens_emitted(),
            trace.serial_calls,
            opt_num(eff),
            match trace.stop {
                specdec_core::StopReason::Eos => "eos",
                specdec_core::StopReason::LengthLimited => "length-limited",
            }
        ));
        s.into_bytes()
    };
    emit(&args.output, &bytes, out)
}

pub fn exact(args: ExactArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let m = load_models(&args.models)?;
    let hash = config_hash(&("exact", &m.ms, &m.mb, &m.prompt, &args.block_lens.0));
    let mut rows = Vec::new();
    for &l in &args.block_lens.0 {
        rows.push(AcceptanceReport::exact(&m.small, &m.big, l, &m.prompt)?);
    }
    let bytes = if args.output.json {
        json_bytes(&serde_json::json!({ "config_hash": hash, "rows": rows }))
    } else {
        let mut t = Table::new(vec!["L", "exact_token", "exact_block", "upper_bound", "gap"]);
        for r in &rows {
            t.push(vec![
                r.block_len.to_string(),
                num(r.exact_token),
                num(r.exact_block),
                num(r.upper_bound),
                num(r.exact_block - r.exact_token),
            ]);
        }
        let mut buf = Vec::new();
        t.write(&mut buf, &hash, None)?;
        buf
    };
    emit(&args.output, &bytes, out)?;
    check_order(&rows)
}
