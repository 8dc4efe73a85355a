//! Named end-to-end pipelines behind one trait: data preparation, fitting,
//! evaluation and tensor export for checkpoints.

use std::collections::BTreeMap;

use crate::baselines::{
    dagmm_variant, two_stage_pipeline, EmGmm, EmSettings, PcaModel, Reducer, TwoStageKind, TwoStageModel,
};
use crate::config::{DataSource, MixtureSource, RunConfig};
use crate::dataio::{
    apply_scaler, chronological_split, fit_scaler, load_kpi_csv, make_windows, synth_regime_series, KpiTrace,
    Scaler, SplitSpec, WindowedDataset,
};
use crate::encoder::{EncoderGeometry, EncoderRegistry, EncoderSettings};
use crate::error::{Error, Result};
use crate::evaluation::{
    assign_clusters, cluster_sizes, energy_score_samples, reconstruction_mse_metric, silhouette_score, ConfigEcho,
    MetricsReport,
};
use crate::mixture::{fit_mixture_params, Memberships};
use crate::model::{mixture_from_tensors, mixture_to_tensors, DagmmModel, ModelSpec};
use crate::numerics::Matrix;
use crate::trainer::{Hyperparams, TrainReport};

/// Standardized, windowed and split data.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub trace: KpiTrace,
    pub scaler: Scaler,
    pub dataset: WindowedDataset,
    pub split: SplitSpec,
    /// Per-step regime labels of synthetic traces (evaluation only).
    pub labels: Option<Vec<usize>>,
}

impl PreparedData {
    pub fn n_features(&self) -> usize {
        self.trace.n_features()
    }

    pub fn train_windows(&self) -> Matrix {
        self.dataset.subset(self.split.train()).windows
    }

    pub fn test_windows(&self) -> Matrix {
        self.dataset.subset(self.split.test()).windows
    }

    pub fn windows_for(&self, split: &str) -> Result<Matrix> {
        match split {
            "train" => Ok(self.train_windows()),
            "test" => Ok(self.test_windows()),
            "all" => Ok(self.dataset.windows.clone()),
            other => Err(Error::Config(format!("split must be train, test or all, got {other:?}"))),
        }
    }

    /// Regime of the last step of each window in `range`, when labels exist.
    pub fn window_labels(&self, range: std::ops::Range<usize>) -> Option<Vec<usize>> {
        let labels = self.labels.as_ref()?;
        let t = self.dataset.window_len;
        Some(self.dataset.origins[range].iter().map(|o| labels[o + t - 1]).collect())
    }
}

/// Raw trace from the configured source.
pub fn load_raw(cfg: &RunConfig) -> Result<(KpiTrace, Option<Vec<usize>>)> {
    match cfg.data.source {
        Some(DataSource::Synth) => {
            let (t, l) = synth_regime_series(&cfg.synth.to_config(), cfg.seeds.data)?;
            Ok((t, Some(l)))
        }
        Some(DataSource::Csv) => {
            let path = cfg
                .data
                .csv_path
                .as_ref()
                .ok_or_else(|| Error::Config("data.csv_path is required for csv input".into()))?;
            let t = load_kpi_csv(
                path,
                &cfg.data.feature_columns,
                &cfg.data.timestamp_column,
                cfg.delimiter_byte()?,
            )?;
            if t.dropped_rows > 0 {
                log::warn!("dropped {} rows with non-numeric cells", t.dropped_rows);
            }
            Ok((t, None))
        }
        None => Err(Error::Config("data.source must be set".into())),
    }
}

/// Window → split → fit the scaler on rows covered by training windows →
/// standardize → window again.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (raw, labels) = load_raw(cfg).map_err(|e| e.in_stage("ingest"))?;
    let probe = make_windows(&raw, cfg.window.length, cfg.window.stride).map_err(|e| e.in_stage("window"))?;
    let split = chronological_split(&probe, cfg.split.train_fraction).map_err(|e| e.in_stage("split"))?;
    let rows = split.fit_rows(cfg.window.length, cfg.window.stride);
    let scaler = fit_scaler(&raw, rows).map_err(|e| e.in_stage("scale"))?;
    finish(cfg, raw, labels, scaler, split)
}

/// Like [`prepare_data`] but standardizes with a stored scaler.
pub fn prepare_with_scaler(cfg: &RunConfig, scaler: Scaler) -> Result<PreparedData> {
    let (raw, labels) = load_raw(cfg).map_err(|e| e.in_stage("ingest"))?;
    let probe = make_windows(&raw, cfg.window.length, cfg.window.stride).map_err(|e| e.in_stage("window"))?;
    let split = chronological_split(&probe, cfg.split.train_fraction).map_err(|e| e.in_stage("split"))?;
    finish(cfg, raw, labels, scaler, split)
}

fn finish(
    cfg: &RunConfig,
    raw: KpiTrace,
    labels: Option<Vec<usize>>,
    scaler: Scaler,
    split: SplitSpec,
) -> Result<PreparedData> {
    let trace = apply_scaler(&scaler, &raw).map_err(|e| e.in_stage("scale"))?;
    let dataset = make_windows(&trace, cfg.window.length, cfg.window.stride).map_err(|e| e.in_stage("window"))?;
    Ok(PreparedData {
        trace,
        scaler,
        dataset,
        split,
        labels,
    })
}

pub fn model_spec(cfg: &RunConfig, encoder_kind: &str, n_features: usize) -> ModelSpec {
    ModelSpec {
        encoder_kind: encoder_kind.to_string(),
        geometry: EncoderGeometry {
            window_len: cfg.window.length,
            n_features,
            latent_dim: cfg.model.latent_dim,
        },
        encoder: EncoderSettings {
            reservoir: cfg.reservoir.clone(),
            mlp_hidden: cfg.model.mlp_hidden.clone(),
            rnn_hidden: cfg.model.rnn_hidden,
            seed: cfg.seeds.model,
        },
        decoder_hidden: cfg.model.decoder_hidden.clone(),
        estimation_hidden: cfg.model.estimation_hidden.clone(),
        n_components: cfg.model.n_components,
        dropout: cfg.model.dropout,
        seed: cfg.seeds.model,
    }
}

fn em_settings(cfg: &RunConfig) -> EmSettings {
    EmSettings {
        seed: cfg.seeds.em,
        max_iters: cfg.em.max_iters,
        tol: cfg.em.tol,
        restarts: cfg.em.restarts,
    }
}

/// A trained system of any kind.
#[derive(Clone, Debug)]
pub enum Fitted {
    Dagmm(DagmmModel),
    TwoStage(TwoStageModel),
}

impl Fitted {
    /// Every tensor needed to restore the fitted system, in a stable order.
    pub fn tensors(&self) -> Vec<(String, Matrix)> {
        match self {
            Fitted::Dagmm(m) => m.tensors(),
            Fitted::TwoStage(t) => {
                let mut out = match &t.reducer {
                    Reducer::Pca(p) => vec![
                        ("pca.components".to_string(), p.components.clone()),
                        ("pca.mean".to_string(), Matrix::row_vector(p.mean.clone())),
                        (
                            "pca.explained".to_string(),
                            Matrix::row_vector(p.explained_variance_ratio.clone()),
                        ),
                    ],
                    Reducer::Autoencoder(m) => m.tensors(),
                };
                out.extend(mixture_to_tensors("em", &t.gmm.params));
                out
            }
        }
    }

    /// Evaluation-mode metrics on `windows`.
    pub fn evaluate(&self, name: &str, windows: &Matrix, split: &str, cfg: &RunConfig) -> Result<MetricsReport> {
        let k = cfg.model.n_components;
        let (x_hat, space, labels, energies, source, silhouette_input) = match self {
            Fitted::Dagmm(m) => {
                let inf = m.infer(windows)?;
                let gamma = Memberships { gamma: inf.gamma };
                let (params, source) = match cfg.eval.mixture {
                    MixtureSource::Frozen => (
                        m.frozen
                            .clone()
                            .ok_or_else(|| Error::Numerical("model has no frozen mixture".into()))?,
                        "frozen",
                    ),
                    MixtureSource::Refit => (fit_mixture_params(&gamma, &inf.latent)?, "refit"),
                };
                let energies = energy_score_samples(&params, &inf.latent)?;
                let labels = assign_clusters(&gamma);
                (inf.reconstruction, "z", labels, energies, source, inf.latent)
            }
            Fitted::TwoStage(t) => {
                let (codes, recon) = t.reducer.encode_decode(windows)?;
                let resp = t.gmm.responsibilities(&codes)?;
                let labels = assign_clusters(&Memberships { gamma: resp });
                let energies = energy_score_samples(&t.gmm.params, &codes)?;
                (recon, "z_c", labels, energies, "em", codes)
            }
        };
        let n = windows.rows();
        let mse = reconstruction_mse_metric(windows, &x_hat)?;
        let t = cfg.window.length as f64;
        let loss = mse * windows.cols() as f64 / t;
        let sizes = cluster_sizes(&labels, k);
        let populated = sizes.iter().filter(|&&s| s > 0).count();
        let silhouette = if populated >= 2 {
            Some(silhouette_score(&silhouette_input, &labels)?)
        } else {
            None
        };
        let mean_energy = energies.iter().sum::<f64>() / n as f64;
        Ok(MetricsReport {
            model: name.to_string(),
            split: split.to_string(),
            n_windows: n,
            reconstruction_mse: mse,
            reconstruction_loss: loss,
            silhouette,
            silhouette_space: space.to_string(),
            collapsed: silhouette.is_none(),
            cluster_sizes: sizes,
            mixture_source: source.to_string(),
            mean_energy,
            energies: cfg.eval.write_energies.then_some(energies),
            config: ConfigEcho::from_config(cfg),
        })
    }
}

pub trait Pipeline: Send + Sync {
    fn name(&self) -> &'static str;

    fn fit(&self, cfg: &RunConfig, data: &PreparedData) -> Result<(Fitted, Option<TrainReport>)>;

    fn restore(&self, cfg: &RunConfig, n_features: usize, tensors: &BTreeMap<String, Matrix>) -> Result<Fitted>;
}

struct DagmmPipeline {
    name: &'static str,
    encoder: &'static str,
}

impl Pipeline for DagmmPipeline {
    fn name(&self) -> &'static str {
        self.name
    }

    fn fit(&self, cfg: &RunConfig, data: &PreparedData) -> Result<(Fitted, Option<TrainReport>)> {
        let spec = model_spec(cfg, self.encoder, data.n_features());
        let (model, report) = dagmm_variant(self.encoder, &spec, &data.train_windows(), &Hyperparams::from_config(cfg))?;
        Ok((Fitted::Dagmm(model), Some(report)))
    }

    fn restore(&self, cfg: &RunConfig, n_features: usize, tensors: &BTreeMap<String, Matrix>) -> Result<Fitted> {
        let spec = model_spec(cfg, self.encoder, n_features);
        Ok(Fitted::Dagmm(DagmmModel::restore(&spec, &EncoderRegistry::default(), tensors)?))
    }
}

struct TwoStagePipeline {
    name: &'static str,
    kind: TwoStageKind,
}

fn restore_em(tensors: &BTreeMap<String, Matrix>) -> Result<EmGmm> {
    let params = mixture_from_tensors("em", tensors)?
        .ok_or_else(|| Error::Checkpoint("missing tensor em.weights".into()))?;
    Ok(EmGmm {
        params,
        log_likelihood: Vec::new(),
        converged: true,
        reseeded: Vec::new(),
    })
}

impl Pipeline for TwoStagePipeline {
    fn name(&self) -> &'static str {
        self.name
    }

    fn fit(&self, cfg: &RunConfig, data: &PreparedData) -> Result<(Fitted, Option<TrainReport>)> {
        let spec = model_spec(cfg, "esn", data.n_features());
        let model = two_stage_pipeline(
            self.kind,
            &data.train_windows(),
            &spec,
            &Hyperparams::from_config(cfg),
            &em_settings(cfg),
        )?;
        let report = model.report.clone();
        Ok((Fitted::TwoStage(model), report))
    }

    fn restore(&self, cfg: &RunConfig, n_features: usize, tensors: &BTreeMap<String, Matrix>) -> Result<Fitted> {
        let get = |n: &str| {
            tensors
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {n}")))
        };
        let reducer = match self.kind {
            TwoStageKind::Pca => {
                let components = get("pca.components")?;
                let mean = get("pca.mean")?.into_data();
                let explained = get("pca.explained")?.into_data();
                if components.cols() != mean.len() || components.rows() != explained.len() {
                    return Err(Error::Checkpoint("pca tensors have inconsistent shapes".into()));
                }
                Reducer::Pca(PcaModel {
                    components,
                    mean,
                    explained_variance_ratio: explained,
                })
            }
            TwoStageKind::EsnAe => {
                let spec = model_spec(cfg, "esn", n_features);
                Reducer::Autoencoder(DagmmModel::restore(&spec, &EncoderRegistry::default(), tensors)?)
            }
        };
        Ok(Fitted::TwoStage(TwoStageModel {
            reducer,
            gmm: restore_em(tensors)?,
            report: None,
        }))
    }
}

/// Name → pipeline map. The default registry holds the three single-stage
/// variants and the two two-stage baselines.
pub struct PipelineRegistry {
    pipelines: BTreeMap<&'static str, Box<dyn Pipeline>>,
}

impl PipelineRegistry {
    pub fn empty() -> Self {
        Self {
            pipelines: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, p: Box<dyn Pipeline>) {
        self.pipelines.insert(p.name(), p);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.pipelines.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn Pipeline> {
        self.pipelines.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            Error::Config(format!(
                "unknown model {name:?}; available: {}",
                self.names().join(", ")
            ))
        })
    }
}

impl Default for PipelineRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        for (name, encoder) in [("esn_dagmm", "esn"), ("mlp_dagmm", "mlp"), ("rnn_dagmm", "rnn")] {
            r.register(Box::new(DagmmPipeline { name, encoder }));
        }
        r.register(Box::new(TwoStagePipeline {
            name: "pca_gmm",
            kind: TwoStageKind::Pca,
        }));
        r.register(Box::new(TwoStagePipeline {
            name: "esn_ae_gmm",
            kind: TwoStageKind::EsnAe,
        }));
        r
    }
}

/// Outcome of fitting `cfg.model.kind` and scoring it on the test split.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub fitted: Fitted,
    pub report: Option<TrainReport>,
    pub test_metrics: MetricsReport,
}

pub fn run_pipeline(cfg: &RunConfig, data: &PreparedData) -> Result<PipelineRun> {
    let registry = PipelineRegistry::default();
    let pipeline = registry.get(&cfg.model.kind)?;
    let (fitted, report) = pipeline.fit(cfg, data).map_err(|e| e.in_stage("fit"))?;
    let test_metrics = fitted
        .evaluate(pipeline.name(), &data.test_windows(), "test", cfg)
        .map_err(|e| e.in_stage("evaluate"))?;
    Ok(PipelineRun {
        fitted,
        report,
        test_metrics,
    })
}
