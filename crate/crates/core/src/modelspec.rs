//! JSON model descriptions.
//!
//! ```json
//! { "vocab_size": 3, "eos": 2, "kind": "memoryless", "probs": [0.5, 0.3, 0.2] }
//! { "kind": "bernoulli", "q": 0.75 }
//! { "vocab_size": 2, "kind": "markov", "initial": [0.5, 0.5],
//!   "matrix": [[0.9, 0.1], [0.2, 0.8]] }
//! { "vocab_size": 2, "kind": "table", "context_len": 2,
//!   "rows": [{ "prefix": [0, 1], "probs": [0.3, 0.7] }], "default": [0.5, 0.5] }
//! { "vocab_size": 4, "eos": 3, "kind": "random", "context_len": 2,
//!   "seed": 7, "concentration": 1.0 }
//! ```
//!
//! `eos` may be omitted or `null`. Table rows not listed fall back to
//! `default`, which itself defaults to uniform. Rows must sum to one within
//! [`ROW_TOLERANCE`] and are renormalized after the check.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{make_random_model, ArModel, ProbVector, Token, TokenSeq, Vocab};
use crate::scalar::Scalar;

pub const ROW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default)]
    pub eos: Option<Token>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub kind: KindSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KindSpec {
    Memoryless {
        probs: Vec<f64>,
    },
    Bernoulli {
        q: f64,
    },
    Markov {
        initial: Vec<f64>,
        matrix: Vec<Vec<f64>>,
    },
    Table {
        context_len: usize,
        #[serde(default)]
        rows: Vec<TableRow>,
        #[serde(default)]
        default: Option<Vec<f64>>,
    },
    Random {
        context_len: usize,
        #[serde(default = "unit_concentration")]
        concentration: f64,
    },
}

fn unit_concentration() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub prefix: TokenSeq,
    pub probs: Vec<f64>,
}

fn spec_err(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Spec {
        field: field.into(),
        message: message.into(),
    }
}

fn checked_row<S: Scalar>(field: &str, probs: &[f64], size: usize) -> Result<ProbVector<S>> {
    if probs.len() != size {
        return Err(spec_err(
            field,
            format!("has {} entries, vocabulary has {size}", probs.len()),
        ));
    }
    if let Some((i, x)) = probs.iter().enumerate().find(|(_, x)| !(x.is_finite() && **x >= 0.0)) {
        return Err(spec_err(format!("{field}[{i}]"), format!("{x} is not a probability")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(spec_err(
            field,
            format!("sums to {sum}, off from 1 by more than {ROW_TOLERANCE}"),
        ));
    }
    ProbVector::from_weights(probs.iter().map(|&x| S::from_f64_lossy(x)).collect())
        .map_err(|e| spec_err(field, e.to_string()))
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| spec_err("json", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let size = match (&self.kind, self.vocab_size) {
            (KindSpec::Bernoulli { .. }, None | Some(2)) => 2,
            (KindSpec::Bernoulli { .. }, Some(n)) => {
                return Err(spec_err("vocab_size", format!("bernoulli needs 2, got {n}")))
            }
            (_, Some(n)) => n,
            (_, None) => return Err(spec_err("vocab_size", "missing")),
        };
        Vocab::new(size, self.eos).map_err(|e| {
            let field = if matches!(e, Error::EosOutOfRange { .. }) { "eos" } else { "vocab_size" };
            spec_err(field, e.to_string())
        })
    }

    pub fn build<S: Scalar>(&self) -> Result<ArModel<S>> {
        let vocab = self.vocab()?;
        let n = vocab.size();
        match &self.kind {
            KindSpec::Memoryless { probs } => ArModel::memoryless(vocab, checked_row("probs", probs, n)?),
            KindSpec::Bernoulli { q } => {
                if !(0.0..=1.0).contains(q) {
                    return Err(spec_err("q", format!("{q} is not a probability")));
                }
                ArModel::memoryless(vocab, checked_row("q", &[1.0 - q, *q], 2)?)
            }
            KindSpec::Markov { initial, matrix } => {
                if matrix.len() != n {
                    return Err(spec_err(
                        "matrix",
                        format!("has {} rows, vocabulary has {n}", matrix.len()),
                    ));
                }
                let rows = matrix
                    .iter()
                    .enumerate()
                    .map(|(i, r)| checked_row(&format!("matrix[{i}]"), r, n))
                    .collect::<Result<Vec<_>>>()?;
                ArModel::markov(vocab, checked_row("initial", initial, n)?, rows)
            }
            KindSpec::Table {
                context_len,
                rows,
                default,
            } => {
                let default = match default {
                    Some(d) => checked_row("default", d, n)?,
                    None => ProbVector::uniform(n),
                };
                let mut table = BTreeMap::new();
                for (i, row) in rows.iter().enumerate() {
                    let field = format!("rows[{i}]");
                    if row.prefix.len() > *context_len {
                        return Err(spec_err(
                            format!("{field}.prefix"),
                            format!("longer than context_len {context_len}"),
                        ));
                    }
                    vocab
                        .check_seq(&row.prefix)
                        .map_err(|e| spec_err(format!("{field}.prefix"), e.to_string()))?;
                    let probs = checked_row(&format!("{field}.probs"), &row.probs, n)?;
                    if table.insert(row.prefix.clone(), probs).is_some() {
                        return Err(spec_err(format!("{field}.prefix"), "duplicate prefix"));
                    }
                }
                ArModel::table(vocab, *context_len, table, default)
            }
            KindSpec::Random {
                context_len,
                concentration,
            } => {
                let seed = self.seed.ok_or_else(|| spec_err("seed", "required for random models"))?;
                make_random_model(vocab, *context_len, seed, *concentration)
                    .map_err(|e| spec_err("random", e.to_string()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NextToken;
    use crate::scalar::BigRational;

    fn load(text: &str) -> Result<ArModel<f64>> {
        ModelSpec::from_json(text)?.build()
    }

    #[test]
    fn every_kind_loads() {
        let m = load(r#"{"vocab_size":3,"eos":2,"kind":"memoryless","probs":[0.5,0.3,0.2]}"#).unwrap();
        assert_eq!(m.conditional(&[0]).as_slice(), &[0.5, 0.3, 0.2]);
        assert_eq!(m.conditional(&[2]).as_slice(), &[0.0, 0.0, 1.0]);
        let m = load(r#"{"kind":"bernoulli","q":0.75}"#).unwrap();
        assert_eq!(m.conditional(&[]).as_slice(), &[0.25, 0.75]);
        let m = load(
            r#"{"vocab_size":2,"kind":"markov","initial":[0.5,0.5],"matrix":[[0.9,0.1],[0.2,0.8]]}"#,
        )
        .unwrap();
        assert_eq!(m.conditional(&[0, 1]).as_slice(), &[0.2, 0.8]);
        let m = load(
            r#"{"vocab_size":2,"kind":"table","context_len":2,
                "rows":[{"prefix":[0,1],"probs":[0.3,0.7]}],"default":[0.5,0.5]}"#,
        )
        .unwrap();
        assert_eq!(m.conditional(&[0, 1]).as_slice(), &[0.3, 0.7]);
        assert_eq!(m.conditional(&[1, 1]).as_slice(), &[0.5, 0.5]);
        let spec = r#"{"vocab_size":4,"eos":3,"kind":"random","context_len":2,"seed":7}"#;
        assert_eq!(load(spec).unwrap(), load(spec).unwrap());
    }

    #[test]
    fn rows_are_renormalized_within_tolerance() {
        let m = load(r#"{"vocab_size":2,"kind":"memoryless","probs":[0.5,0.5000005]}"#).unwrap();
        let s: f64 = m.conditional(&[]).as_slice().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        let exact: ArModel<BigRational> = ModelSpec::from_json(
            r#"{"vocab_size":2,"kind":"memoryless","probs":[0.25,0.75]}"#,
        )
        .unwrap()
        .build()
        .unwrap();
        assert_eq!(exact.conditional(&[]).to_f64(), vec![0.25, 0.75]);
    }

    #[test]
    fn diagnostics_name_the_field() {
        let field = |text: &str| match load(text) {
            Err(Error::Spec { field, .. }) => field,
            other => panic!("expected spec error, got {other:?}"),
        };
        assert_eq!(
            field(r#"{"vocab_size":2,"kind":"memoryless","probs":[0.5,0.6]}"#),
            "probs"
        );
        assert_eq!(
            field(r#"{"vocab_size":2,"kind":"markov","initial":[0.5,0.5],"matrix":[[1,0],[0.2,0.7]]}"#),
            "matrix[1]"
        );
        assert_eq!(
            field(r#"{"vocab_size":2,"kind":"table","context_len":1,"rows":[{"prefix":[0,1],"probs":[1,0]}]}"#),
            "rows[0].prefix"
        );
        assert_eq!(field(r#"{"vocab_size":2,"eos":5,"kind":"memoryless","probs":[1,0]}"#), "eos");
        assert_eq!(field(r#"{"kind":"memoryless","probs":[1,0]}"#), "vocab_size");
        assert_eq!(field(r#"{"vocab_size":2,"kind":"random","context_len":1}"#), "seed");
        assert_eq!(field(r#"{"vocab_size":2,"kind":"memoryless","probs":[-0.5,1.5]}"#), "probs[0]");
        let msg = load("{\n  \"vocab_size\": 2,\n  \"kind\": \"memoryless\",\n  \"probs\": [0.5, 0.5,]\n}")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn round_trips() {
        let spec = ModelSpec::from_json(r#"{"vocab_size":2,"kind":"markov","initial":[0.5,0.5],"matrix":[[0.9,0.1],[0.2,0.8]]}"#).unwrap();
        assert_eq!(ModelSpec::from_json(&spec.to_json()).unwrap(), spec);
    }
}
