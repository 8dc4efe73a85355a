//! Versioned text checkpoints. Every float is written with 17 significant
//! digits, so load followed by save reproduces the file byte for byte. A
//! SHA-256 of the payload guards against truncation and edits.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataio::Scaler;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::pipeline::{Fitted, PipelineRegistry};

pub const CHECKPOINT_MAGIC: &str = "esn-dagmm checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Pipeline name, e.g. `esn_dagmm` or `pca_gmm`.
    pub model: String,
    pub train_seed: u64,
    pub config: RunConfig,
    pub feature_names: Vec<String>,
    pub scaler: Scaler,
    pub tensors: Vec<(String, Matrix)>,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_row(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ")
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_row(line: &str, expect: usize, what: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = if line.is_empty() {
        Vec::new()
    } else {
        line.split(' ')
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("{what}: bad number {t:?}"))))
            .collect::<Result<_>>()?
    };
    if vals.len() != expect {
        return Err(bad(format!("{what}: expected {expect} values, found {}", vals.len())));
    }
    Ok(vals)
}

fn digest(payload: &str) -> String {
    hex::encode(Sha256::digest(payload.as_bytes()))
}

impl Checkpoint {
    pub fn new(model: &str, config: &RunConfig, feature_names: Vec<String>, scaler: Scaler, fitted: &Fitted) -> Self {
        Self {
            model: model.to_string(),
            train_seed: config.seeds.train,
            config: config.clone(),
            feature_names,
            scaler,
            tensors: fitted.tensors(),
        }
    }

    pub fn to_text(&self) -> Result<String> {
        let mut p = String::new();
        p.push_str(&format!("model: {}\n", self.model));
        p.push_str(&format!("train_seed: {}\n", self.train_seed));
        let cfg = serde_json::to_string(&self.config).map_err(|e| bad(e.to_string()))?;
        p.push_str(&format!("config: {cfg}\n"));
        let names = serde_json::to_string(&self.feature_names).map_err(|e| bad(e.to_string()))?;
        p.push_str(&format!("features: {names}\n"));
        p.push_str(&format!("scaler.mean: {}\n", fmt_row(&self.scaler.mean)));
        p.push_str(&format!("scaler.std: {}\n", fmt_row(&self.scaler.std)));
        p.push_str(&format!("scaler.fitted_on: {}\n", self.scaler.fitted_on));
        p.push_str(&format!("tensors: {}\n", self.tensors.len()));
        for (name, m) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(bad(format!("tensor name {name:?} contains whitespace")));
            }
            p.push_str(&format!("tensor {name} {} {}\n", m.rows(), m.cols()));
            for i in 0..m.rows() {
                p.push_str(&fmt_row(m.row(i)));
                p.push('\n');
            }
        }
        Ok(format!(
            "{CHECKPOINT_MAGIC}\nversion: {CHECKPOINT_VERSION}\nsha256: {}\n---\n{p}",
            digest(&p)
        ))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut header = text.splitn(5, '\n');
        if header.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("not a checkpoint file"));
        }
        let version = header
            .next()
            .and_then(|l| l.strip_prefix("version: "))
            .ok_or_else(|| bad("missing version line"))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let sum = header
            .next()
            .and_then(|l| l.strip_prefix("sha256: "))
            .ok_or_else(|| bad("missing checksum line"))?;
        if header.next() != Some("---") {
            return Err(bad("missing payload separator"));
        }
        let payload = header.next().unwrap_or("");
        if digest(payload) != sum {
            return Err(bad("checksum mismatch: file is corrupted or was edited"));
        }

        let mut lines = payload.lines();
        let mut field = |key: &str| -> Result<&str> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix(": ").or_else(|| (l == ":").then_some("")))
                .ok_or_else(|| bad(format!("expected field {key}")))
        };
        let model = field("model")?.to_string();
        let train_seed = field("train_seed")?
            .parse()
            .map_err(|_| bad("train_seed is not an integer"))?;
        let config: RunConfig = serde_json::from_str(field("config")?).map_err(|e| bad(format!("config: {e}")))?;
        let feature_names: Vec<String> =
            serde_json::from_str(field("features")?).map_err(|e| bad(format!("features: {e}")))?;
        let d = feature_names.len();
        let mean = parse_row(field("scaler.mean")?, d, "scaler.mean")?;
        let std = parse_row(field("scaler.std")?, d, "scaler.std")?;
        let fitted_on = field("scaler.fitted_on")?
            .parse()
            .map_err(|_| bad("scaler.fitted_on is not an integer"))?;
        let count: usize = field("tensors")?
            .parse()
            .map_err(|_| bad("tensor count is not an integer"))?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let head = lines.next().ok_or_else(|| bad("truncated tensor list"))?;
            let parts: Vec<&str> = head.split(' ').collect();
            let [tag, name, rows, cols] = parts.as_slice() else {
                return Err(bad(format!("bad tensor header {head:?}")));
            };
            if *tag != "tensor" {
                return Err(bad(format!("bad tensor header {head:?}")));
            }
            let rows: usize = rows.parse().map_err(|_| bad(format!("bad row count in {head:?}")))?;
            let cols: usize = cols.parse().map_err(|_| bad(format!("bad column count in {head:?}")))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = lines.next().ok_or_else(|| bad(format!("tensor {name} is truncated")))?;
                data.extend(parse_row(line, cols, name)?);
            }
            tensors.push((name.to_string(), Matrix::new(rows, cols, data)?));
        }
        if lines.next().is_some() {
            return Err(bad("trailing content after the last tensor"));
        }
        Ok(Self {
            model,
            train_seed,
            config,
            feature_names,
            scaler: Scaler { mean, std, fitted_on },
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Rebuilds the fitted system recorded in this checkpoint.
    pub fn restore(&self) -> Result<Fitted> {
        let map: BTreeMap<String, Matrix> = self.tensors.iter().cloned().collect();
        PipelineRegistry::default()
            .get(&self.model)?
            .restore(&self.config, self.feature_names.len(), &map)
    }
}
