//! Run configuration: one TOML file with a section per concern, every field
//! defaulted except the data source, plus dotted-path overrides from the
//! command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{RegimeSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::reservoir::ReservoirConfig;

/// Environment variable that replaces `output.dir`.
pub const OUTPUT_DIR_ENV: &str = "ESN_DAGMM_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: Option<DataSource>,
    pub csv_path: Option<PathBuf>,
    pub feature_columns: Vec<String>,
    pub timestamp_column: String,
    pub delimiter: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: None,
            csv_path: None,
            feature_columns: Vec::new(),
            timestamp_column: "timestamp_ms".into(),
            delimiter: ",".into(),
        }
    }
}

/// Flat description of the two-regime generator. Regime 0 sits at zero mean;
/// regime 1 shifts the first `shifted_features` features by `mean_shift` and
/// uses its own AR coefficient and noise scale on every feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_features: usize,
    pub total_steps: usize,
    pub shifted_features: usize,
    pub mean_shift: f64,
    pub ar: [f64; 2],
    pub noise: [f64; 2],
    pub switch_prob: [f64; 2],
    pub start_regime: usize,
    pub step_ms: i64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_features: 13,
            total_steps: 6000,
            shifted_features: 6,
            mean_shift: 1.5,
            ar: [0.3, 0.95],
            noise: [1.0, 0.35],
            switch_prob: [0.004, 0.004],
            start_regime: 0,
            step_ms: 20,
        }
    }
}

impl SynthSpec {
    pub fn to_config(&self) -> SynthConfig {
        let d = self.n_features;
        let regime = |r: usize| RegimeSpec {
            ar: vec![self.ar[r]; d],
            mean_offset: (0..d)
                .map(|j| if r == 1 && j < self.shifted_features { self.mean_shift } else { 0.0 })
                .collect(),
            noise: vec![self.noise[r]; d],
        };
        SynthConfig {
            n_features: d,
            total_steps: self.total_steps,
            regimes: [regime(0), regime(1)],
            switch_prob: self.switch_prob,
            start_regime: self.start_regime,
            step_ms: self.step_ms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shifted_features > self.n_features {
            return Err(Error::Config(format!(
                "synth.shifted_features ({}) exceeds synth.n_features ({})",
                self.shifted_features, self.n_features
            )));
        }
        self.to_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub length: usize,
    pub stride: usize,
}

impl Default for WindowSection {
    fn default() -> Self {
        Self { length: 28, stride: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { train_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Pipeline name, see [`crate::pipeline::PipelineRegistry`].
    pub kind: String,
    pub latent_dim: usize,
    pub n_components: usize,
    pub decoder_hidden: Vec<usize>,
    pub estimation_hidden: Vec<usize>,
    pub dropout: f64,
    pub mlp_hidden: Vec<usize>,
    pub rnn_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: "esn_dagmm".into(),
            latent_dim: 10,
            n_components: 2,
            decoder_hidden: vec![32, 64, 128],
            estimation_hidden: vec![16, 8],
            dropout: 0.5,
            mlp_hidden: vec![128, 32],
            rnn_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambda_energy: f64,
    pub lambda_cov: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lambda_energy: 0.1,
            lambda_cov: 0.005,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSection {
    pub max_iters: usize,
    pub tol: f64,
    /// Independent initializations; the best final likelihood wins.
    pub restarts: usize,
}

impl Default for EmSection {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            restarts: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixtureSource {
    /// Parameters frozen from the final training pass.
    Frozen,
    /// Parameters re-estimated from the evaluation data's own memberships.
    Refit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mixture: MixtureSource,
    pub write_energies: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mixture: MixtureSource::Frozen,
            write_energies: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    pub data: u64,
    pub model: u64,
    pub train: u64,
    pub em: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self {
            data: 7,
            model: 42,
            train: 1234,
            em: 99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub models: Vec<String>,
    pub latent_dims: Vec<usize>,
    pub components: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            models: ["esn_dagmm", "mlp_dagmm", "rnn_dagmm", "pca_gmm", "esn_ae_gmm"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            latent_dims: vec![2, 4, 6, 8, 10, 12],
            components: (2..=10).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub synth: SynthSpec,
    pub window: WindowSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub reservoir: ReservoirConfig,
    pub train: TrainSection,
    pub em: EmSection,
    pub eval: EvalSection,
    pub seeds: SeedSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl RunConfig {
    /// Parses TOML text, applies `section.key = value` overrides in order and
    /// checks the result.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        for (path, raw) in overrides {
            apply_override(&mut value, path, raw)?;
        }
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate_structure()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn delimiter_byte(&self) -> Result<u8> {
        match self.data.delimiter.as_bytes() {
            [b] => Ok(*b),
            _ => Err(Error::Config(format!(
                "data.delimiter must be one ASCII character, got {:?}",
                self.data.delimiter
            ))),
        }
    }

    /// Every check that does not depend on the data source being set.
    pub fn validate_structure(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.delimiter_byte()?;
        self.synth.validate()?;
        self.reservoir
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.window.length == 0 || self.window.stride == 0 {
            return bad("window.length and window.stride must be ≥ 1".into());
        }
        let f = self.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return bad(format!("split.train_fraction = {f} must lie in (0, 1)"));
        }
        let m = &self.model;
        if m.latent_dim == 0 {
            return bad("model.latent_dim must be ≥ 1".into());
        }
        if m.n_components == 0 {
            return bad("model.n_components must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("model.dropout = {} must lie in [0, 1)", m.dropout));
        }
        if m.decoder_hidden.contains(&0) || m.estimation_hidden.contains(&0) || m.mlp_hidden.contains(&0) {
            return bad("model hidden widths must be ≥ 1".into());
        }
        if m.rnn_hidden == 0 {
            return bad("model.rnn_hidden must be ≥ 1".into());
        }
        let names = crate::pipeline::PipelineRegistry::default().names();
        if !names.contains(&m.kind.as_str()) {
            return bad(format!("model.kind {:?} unknown; available: {}", m.kind, names.join(", ")));
        }
        for s in &self.sweep.models {
            if !names.contains(&s.as_str()) {
                return bad(format!("sweep.models entry {s:?} unknown; available: {}", names.join(", ")));
            }
        }
        let t = &self.train;
        if !(t.lambda_energy >= 0.0 && t.lambda_cov >= 0.0) {
            return bad("train.lambda_energy and train.lambda_cov must be ≥ 0".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad("train.learning_rate must be > 0".into());
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.adam_eps > 0.0) {
            return bad("train.beta1/beta2 must lie in [0, 1) and train.adam_eps must be > 0".into());
        }
        if self.em.max_iters == 0 || self.em.restarts == 0 || !(self.em.tol >= 0.0) {
            return bad("em.max_iters and em.restarts must be ≥ 1, em.tol ≥ 0".into());
        }
        Ok(())
    }

    /// Full validation, including the data source that has no default.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        match self.data.source {
            None => Err(Error::Config(
                "data.source must be set to \"synth\" or \"csv\"".into(),
            )),
            Some(DataSource::Csv) => {
                if self.data.csv_path.is_none() {
                    return Err(Error::Config("data.csv_path is required for csv input".into()));
                }
                if self.data.feature_columns.is_empty() {
                    return Err(Error::Config(
                        "data.feature_columns is required for csv input".into(),
                    ));
                }
                Ok(())
            }
            Some(DataSource::Synth) => Ok(()),
        }
    }

    /// Applies the output-directory environment override, if set.
    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                self.output.dir = PathBuf::from(dir);
            }
        }
    }
}

/// Sets `path` (dotted, e.g. `train.epochs`) to `raw`. The raw text is read
/// as a TOML value when it parses as one, otherwise as a bare string.
pub fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override path {path:?}")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = parts.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Splits `--section.key value` / `--section.key=value` pairs out of an
/// argument list; everything else is returned untouched.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Config(format!("override --{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_has_defaults_but_no_source() {
        let cfg = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.window.length, 28);
        assert_eq!(cfg.split.train_fraction, 0.1);
        assert_eq!(cfg.train.lambda_energy, 0.1);
        assert_eq!(cfg.train.lambda_cov, 0.005);
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("data.source"), "{msg}");
    }

    #[test]
    fn overrides_apply_with_types() {
        let cfg = RunConfig::from_toml_str(
            "[data]\nsource = \"synth\"\n",
            &[
                ("train.epochs".into(), "3".into()),
                ("model.kind".into(), "pca_gmm".into()),
                ("synth.switch_prob".into(), "[0.1, 0.2]".into()),
                ("reservoir.leak".into(), "0.5".into()),
            ],
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.kind, "pca_gmm");
        assert_eq!(cfg.synth.switch_prob, [0.1, 0.2]);
        assert_eq!(cfg.reservoir.leak, 0.5);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = RunConfig::from_toml_str("", &[("synth.switch_prob".into(), "[0.1, 1.5]".into())])
            .unwrap_err()
            .to_string();
        assert!(err.contains("synth.switch_prob[1]"), "{err}");
        let err = RunConfig::from_toml_str("[train]\nepoch = 3\n", &[]).unwrap_err().to_string();
        assert!(err.contains("epoch"), "{err}");
        let err = RunConfig::from_toml_str("", &[("model.kind".into(), "lstm_dagmm".into())])
            .unwrap_err()
            .to_string();
        assert!(err.contains("esn_dagmm"), "{err}");
    }

    #[test]
    fn csv_source_requires_path_and_columns() {
        let cfg = RunConfig::from_toml_str("[data]\nsource = \"csv\"\n", &[]).unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("csv_path"));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dotted_flags_are_extracted() {
        let args = ["train", "--config", "a.toml", "--train.epochs", "4", "--model.kind=mlp_dagmm", "-v"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (rest, ov) = extract_overrides(args).unwrap();
        assert_eq!(rest, vec!["train", "--config", "a.toml", "-v"]);
        assert_eq!(
            ov,
            vec![
                ("train.epochs".to_string(), "4".to_string()),
                ("model.kind".to_string(), "mlp_dagmm".to_string())
            ]
        );
        assert!(extract_overrides(vec!["--train.epochs".into()]).is_err());
    }

    #[test]
    fn synth_spec_shapes_regimes() {
        let spec = SynthSpec::default();
        let c = spec.to_config();
        assert_eq!(c.regimes[0].mean_offset, vec![0.0; 13]);
        assert_eq!(c.regimes[1].mean_offset.iter().filter(|m| **m != 0.0).count(), 6);
        let mut s = spec;
        s.shifted_features = 14;
        assert!(s.validate().is_err());
    }
}
