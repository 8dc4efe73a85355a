//! The single-stage model: encoder, decoder, estimation network and the
//! mixture parameters frozen after training.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{build_decoder, features_unchecked, Dropout, Mlp, N_RECON_FEATURES};
use crate::encoder::{Encoder, EncoderGeometry, EncoderRegistry, EncoderSettings};
use crate::error::{dim_err, Error, Result};
use crate::mixture::{EstimationNet, MixtureParams};
use crate::numerics::Matrix;

/// Everything needed to rebuild a model's architecture and initial weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub encoder_kind: String,
    pub geometry: EncoderGeometry,
    pub encoder: EncoderSettings,
    pub decoder_hidden: Vec<usize>,
    pub estimation_hidden: Vec<usize>,
    pub n_components: usize,
    pub dropout: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct DagmmModel {
    pub encoder: Box<dyn Encoder>,
    pub decoder: Mlp,
    pub estimation: EstimationNet,
    pub window_len: usize,
    pub n_features: usize,
    /// Mixture parameters from the final evaluation-mode training pass.
    pub frozen: Option<MixtureParams>,
}

/// Evaluation-mode outputs for a batch of windows.
#[derive(Clone, Debug)]
pub struct Inference {
    pub codes: Matrix,
    pub reconstruction: Matrix,
    /// `[z_c; mse; relative_euclidean; cosine]` per row.
    pub latent: Matrix,
    pub gamma: Matrix,
}

impl DagmmModel {
    pub fn build(spec: &ModelSpec, registry: &EncoderRegistry) -> Result<Self> {
        let mut enc_settings = spec.encoder.clone();
        enc_settings.seed = spec.seed;
        let encoder = registry.build(&spec.encoder_kind, &spec.geometry, &enc_settings)?;
        let d = spec.geometry.latent_dim;
        let decoder = build_decoder(
            d,
            &spec.decoder_hidden,
            spec.geometry.input_width(),
            spec.seed.wrapping_add(1),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(2));
        let estimation = EstimationNet::new(
            d + N_RECON_FEATURES,
            &spec.estimation_hidden,
            spec.n_components,
            spec.dropout,
            &mut rng,
        )?;
        Ok(Self {
            encoder,
            decoder,
            estimation,
            window_len: spec.geometry.window_len,
            n_features: spec.geometry.n_features,
            frozen: None,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim()
    }

    pub fn n_components(&self) -> usize {
        self.estimation.n_components()
    }

    pub fn input_width(&self) -> usize {
        self.window_len * self.n_features
    }

    /// Trainable blocks: encoder, then decoder, then estimation network.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.estimation.net.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.extend(self.estimation.net.params_mut());
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.encoder.param_names();
        n.extend(self.decoder.param_names("decoder"));
        n.extend(self.estimation.net.param_names("estimation"));
        n
    }

    /// Every tensor, trainable or fixed, plus the frozen mixture when present.
    /// Names are unique; order is stable.
    pub fn tensors(&self) -> Vec<(String, Matrix)> {
        let mut out: Vec<(String, Matrix)> = self
            .encoder
            .fixed_tensors()
            .into_iter()
            .map(|(n, m)| (n, m.clone()))
            .collect();
        out.extend(
            self.param_names()
                .into_iter()
                .zip(self.params().into_iter().cloned()),
        );
        if let Some(f) = &self.frozen {
            out.extend(mixture_to_tensors("mixture", f));
        }
        out
    }

    /// Rebuilds from `spec` and overwrites every tensor from the map.
    pub fn restore(
        spec: &ModelSpec,
        registry: &EncoderRegistry,
        tensors: &BTreeMap<String, Matrix>,
    ) -> Result<Self> {
        let mut model = Self::build(spec, registry)?;
        let mut enc_settings = spec.encoder.clone();
        enc_settings.seed = spec.seed;
        model.encoder = registry.restore(&spec.encoder_kind, &spec.geometry, &enc_settings, tensors)?;
        let names: Vec<String> = model
            .decoder
            .param_names("decoder")
            .into_iter()
            .chain(model.estimation.net.param_names("estimation"))
            .collect();
        let slots = model
            .decoder
            .params_mut()
            .into_iter()
            .chain(model.estimation.net.params_mut());
        for (name, slot) in names.into_iter().zip(slots) {
            let stored = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if stored.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored.clone();
        }
        model.frozen = mixture_from_tensors("mixture", tensors)?;
        Ok(model)
    }

    /// Parameter-independent preprocessing (see [`Encoder::prepare`]).
    pub fn prepare(&self, windows: &Matrix) -> Result<Matrix> {
        if windows.cols() != self.input_width() {
            return Err(dim_err(format!(
                "model expects windows of width {}, got {}",
                self.input_width(),
                windows.cols()
            )));
        }
        self.encoder.prepare(windows)
    }

    /// Evaluation-mode forward pass: dropout off.
    pub fn infer(&self, windows: &Matrix) -> Result<Inference> {
        let prepared = self.prepare(windows)?;
        let codes = self.encoder.encode(&prepared)?;
        let reconstruction = self.decoder.forward(&codes, &mut Dropout::Off)?.output;
        let latent = assemble_latent_rows(&codes, windows, &reconstruction);
        let gamma = self.estimation.forward(&latent, &mut Dropout::Off)?.output;
        Ok(Inference {
            codes,
            reconstruction,
            latent,
            gamma,
        })
    }
}

/// Rows `[code_i; features(x_i, x̂_i)]`.
pub(crate) fn assemble_latent_rows(codes: &Matrix, x: &Matrix, x_hat: &Matrix) -> Matrix {
    let d = codes.cols();
    let width = d + N_RECON_FEATURES;
    let mut data = Vec::with_capacity(codes.rows() * width);
    for i in 0..codes.rows() {
        data.extend_from_slice(codes.row(i));
        data.extend_from_slice(&features_unchecked(x.row(i), x_hat.row(i)).as_array());
    }
    Matrix::from_raw(codes.rows(), width, data)
}

pub(crate) fn mixture_to_tensors(prefix: &str, p: &MixtureParams) -> Vec<(String, Matrix)> {
    let k = p.n_components();
    let mut out = vec![
        (format!("{prefix}.weights"), Matrix::row_vector(p.weights.clone())),
        (
            format!("{prefix}.degenerate"),
            Matrix::row_vector(p.degenerate.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect()),
        ),
    ];
    for c in 0..k {
        out.push((format!("{prefix}.mean.{c}"), Matrix::row_vector(p.means[c].clone())));
        out.push((format!("{prefix}.cov.{c}"), p.covariances[c].clone()));
    }
    out
}

pub(crate) fn mixture_from_tensors(
    prefix: &str,
    tensors: &BTreeMap<String, Matrix>,
) -> Result<Option<MixtureParams>> {
    let Some(weights) = tensors.get(&format!("{prefix}.weights")) else {
        return Ok(None);
    };
    let missing = |n: &str| Error::Checkpoint(format!("missing tensor {n}"));
    let k = weights.cols();
    let deg_name = format!("{prefix}.degenerate");
    let degenerate = tensors.get(&deg_name).ok_or_else(|| missing(&deg_name))?;
    if degenerate.cols() != k {
        return Err(Error::Checkpoint(format!("{deg_name} has {} entries, expected {k}", degenerate.cols())));
    }
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    for c in 0..k {
        let mn = format!("{prefix}.mean.{c}");
        let cn = format!("{prefix}.cov.{c}");
        let mean = tensors.get(&mn).ok_or_else(|| missing(&mn))?;
        let cov = tensors.get(&cn).ok_or_else(|| missing(&cn))?;
        if cov.shape() != (mean.cols(), mean.cols()) {
            return Err(Error::Checkpoint(format!("{cn} does not match {mn}")));
        }
        means.push(mean.data().to_vec());
        covariances.push(cov.clone());
    }
    Ok(Some(MixtureParams {
        weights: weights.data().to_vec(),
        means,
        covariances,
        degenerate: degenerate.data().iter().map(|&v| v != 0.0).collect(),
    }))
}
