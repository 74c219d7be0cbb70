use std::fmt;
use std::fs;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};
use specdec_core::{ArModel, ModelSpec, Token};

use crate::CliError;

/// Resolves a model argument: `ber:<q>` for a Bernoulli source, text that
/// starts with `{` as inline JSON, anything else as a file path.
pub fn load_spec(arg: &str) -> Result<ModelSpec, CliError> {
    let text = if let Some(q) = arg.strip_prefix("ber:") {
        let q: f64 = q
            .parse()
            .map_err(|_| CliError::Config(format!("model {arg}: `{q}` is not a number")))?;
        format!(r#"{{"kind":"bernoulli","q":{q}}}"#)
    } else if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).map_err(|e| CliError::Config(format!("model file {arg}: {e}")))?
    };
    let spec = ModelSpec::from_json(&text).map_err(|e| CliError::Config(format!("model {arg}: {e}")))?;
    spec.build::<f64>()
        .map_err(|e| CliError::Config(format!("model {arg}: {e}")))?;
    Ok(spec)
}

pub fn build(spec: &ModelSpec) -> ArModel<f64> {
    spec.build().expect("validated in load_spec")
}

/// Block lengths: `8`, `1..10` (inclusive) or `2,4,8`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockLens(pub Vec<usize>);

impl FromStr for BlockLens {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let num = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("`{t}` is not a block length"))
        };
        let lens = if let Some((a, b)) = s.split_once("..") {
            let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
            if a > b {
                return Err(format!("empty range {s}"));
            }
            (a..=b).collect()
        } else {
            s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
        };
        if lens.contains(&0) {
            return Err("block lengths must be positive".into());
        }
        Ok(Self(lens))
    }
}

impl fmt::Display for BlockLens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|l| l.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Comma or space separated token ids.
pub fn parse_prompt(s: &str) -> Result<Vec<Token>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<Token>().map_err(|_| format!("`{t}` is not a token id")))
        .collect()
}

/// First 16 hex digits of the SHA-256 of the config's JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
