//! Feed-forward networks, the window decoder, reconstruction-quality features
//! and the per-window reconstruction loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{dot, matmul, matmul_nt, matmul_tn, softmax_into, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    Tanh,
    /// Row-wise softmax; only valid on the output layer.
    Softmax,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Softmax => "softmax",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "relu" => Activation::Relu,
            "identity" => Activation::Identity,
            "tanh" => Activation::Tanh,
            "softmax" => Activation::Softmax,
            other => return Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        })
    }
}

/// Fully connected layer; `weight` is `out × in`, `bias` is `1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
    pub activation: Activation,
    /// Dropout probability applied to this layer's output in training mode.
    pub dropout: f64,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// How dropout behaves during a forward pass.
pub enum Dropout<'a> {
    /// Evaluation mode: no masks, no rescaling.
    Off,
    /// Draw fresh inverted-scaling masks.
    Sample(&'a mut ChaCha8Rng),
    /// Reuse masks recorded by an earlier pass (one slot per layer).
    Frozen(&'a [Option<Matrix>]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    pub inputs: Vec<Matrix>,
    /// Post-activation values before any dropout mask.
    pub activated: Vec<Matrix>,
    pub masks: Vec<Option<Matrix>>,
    pub output: Matrix,
}

/// Gradients for each layer's weight and bias, plus the input gradient.
pub struct MlpGrads {
    pub params: Vec<Matrix>,
    pub input: Matrix,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `widths` lists every layer width
    /// including input and output; `activations` has one entry per layer.
    pub fn new(
        widths: &[usize],
        activations: &[Activation],
        dropout: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 || dropout.len() != activations.len() {
            return Err(Error::InvalidArgument(
                "mlp needs ≥2 widths and one activation/dropout per layer".into(),
            ));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidArgument("mlp widths must be ≥ 1".into()));
        }
        if let Some(pos) = activations.iter().position(|a| *a == Activation::Softmax) {
            if pos != activations.len() - 1 {
                return Err(Error::InvalidArgument("softmax allowed only at the output".into()));
            }
        }
        if dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::InvalidArgument("dropout must lie in [0, 1)".into()));
        }
        let layers = widths
            .windows(2)
            .zip(activations)
            .zip(dropout)
            .map(|((w, &activation), &p)| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    weight: Matrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..=bound)),
                    bias: Matrix::zeros(1, w[1]),
                    activation,
                    dropout: p,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("mlp without layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.output_dim()) {
                return Err(dim_err(format!("layer {i}: bias shape {:?}", l.bias.shape())));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(dim_err(format!(
                    "layer {i} expects {} inputs, previous layer emits {}",
                    l.input_dim(),
                    layers[i - 1].output_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Layer::output_dim));
        w
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
            .collect()
    }

    pub fn forward(&self, x: &Matrix, dropout: &mut Dropout<'_>) -> Result<MlpTrace> {
        if x.cols() != self.input_dim() {
            return Err(dim_err(format!(
                "mlp expects {} inputs, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let n = x.rows();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut activated = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut a = matmul_nt(&h, &layer.weight)?;
            for i in 0..n {
                for (v, b) in a.row_mut(i).iter_mut().zip(layer.bias.data()) {
                    *v += b;
                }
            }
            apply_activation(layer.activation, &mut a);
            let mask = match dropout {
                Dropout::Off => None,
                Dropout::Sample(rng) if layer.dropout > 0.0 => {
                    let keep = 1.0 - layer.dropout;
                    Some(Matrix::from_fn(a.rows(), a.cols(), |_, _| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    }))
                }
                Dropout::Sample(_) => None,
                Dropout::Frozen(m) => m.get(li).cloned().flatten(),
            };
            let mut out = a.clone();
            if let Some(m) = &mask {
                if m.shape() != a.shape() {
                    return Err(dim_err("frozen dropout mask shape"));
                }
                for (v, k) in out.data_mut().iter_mut().zip(m.data()) {
                    *v *= k;
                }
            }
            inputs.push(std::mem::replace(&mut h, out));
            activated.push(a);
            masks.push(mask);
        }
        Ok(MlpTrace {
            inputs,
            activated,
            masks,
            output: h,
        })
    }

    pub fn backward(&self, trace: &MlpTrace, grad_out: &Matrix) -> Result<MlpGrads> {
        if grad_out.shape() != trace.output.shape() {
            return Err(dim_err("mlp output gradient shape"));
        }
        let mut g = grad_out.clone();
        let mut params = vec![Matrix::zeros(0, 0); 2 * self.layers.len()];
        for (li, layer) in self.layers.iter().enumerate().rev() {
            if let Some(m) = &trace.masks[li] {
                for (v, k) in g.data_mut().iter_mut().zip(m.data()) {
                    *v *= k;
                }
            }
            let act = &trace.activated[li];
            match layer.activation {
                Activation::Identity => {}
                Activation::Relu => {
                    for (v, a) in g.data_mut().iter_mut().zip(act.data()) {
                        if *a <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                Activation::Tanh => {
                    for (v, y) in g.data_mut().iter_mut().zip(act.data()) {
                        *v *= 1.0 - y * y;
                    }
                }
                Activation::Softmax => {
                    for i in 0..g.rows() {
                        let y = act.row(i);
                        let s = dot(g.row(i), y);
                        for (v, yi) in g.row_mut(i).iter_mut().zip(y) {
                            *v = yi * (*v - s);
                        }
                    }
                }
            }
            let gw = matmul_tn(&g, &trace.inputs[li])?;
            let mut gb = vec![0.0; layer.output_dim()];
            for i in 0..g.rows() {
                for (b, v) in gb.iter_mut().zip(g.row(i)) {
                    *b += v;
                }
            }
            params[2 * li] = gw;
            params[2 * li + 1] = Matrix::row_vector(gb);
            g = matmul(&g, &layer.weight)?;
        }
        Ok(MlpGrads { params, input: g })
    }
}

fn apply_activation(act: Activation, a: &mut Matrix) {
    match act {
        Activation::Identity => {}
        Activation::Relu => a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Tanh => a.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Softmax => {
            let mut buf = vec![0.0; a.cols()];
            for i in 0..a.rows() {
                softmax_into(a.row(i), &mut buf);
                a.row_mut(i).copy_from_slice(&buf);
            }
        }
    }
}

/// Decoder `[d → h₁ → … → T·D]` with rectifier hidden layers and identity output.
pub fn build_decoder(latent_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Result<Mlp> {
    let mut widths = vec![latent_dim];
    widths.extend_from_slice(hidden);
    widths.push(output_dim);
    let n_layers = widths.len() - 1;
    let mut acts = vec![Activation::Relu; n_layers];
    acts[n_layers - 1] = Activation::Identity;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mlp::new(&widths, &acts, &vec![0.0; n_layers], &mut rng)
}

/// Reconstructs flattened windows (`N × T·D`, time-major) from codes `N × d`.
pub fn decode(dec: &Mlp, codes: &Matrix) -> Result<Matrix> {
    Ok(dec.forward(codes, &mut Dropout::Off)?.output)
}

/// Reshapes a single decoded row into a `T × D` window.
pub fn decode_window(dec: &Mlp, code: &[f64], window_len: usize) -> Result<Matrix> {
    let out = decode(dec, &Matrix::new(1, code.len(), code.to_vec())?)?;
    let width = out.cols();
    if width % window_len != 0 {
        return Err(dim_err(format!("decoder width {width} not divisible by T={window_len}")));
    }
    Ok(Matrix::from_raw(window_len, width / window_len, out.into_data()))
}

pub const NORM_EPS: f64 = 1e-12;
/// Number of reconstruction-quality features appended to each code.
pub const N_RECON_FEATURES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconFeatures {
    pub mse: f64,
    pub relative_euclidean: f64,
    pub cosine: f64,
}

impl ReconFeatures {
    pub fn as_array(&self) -> [f64; 3] {
        [self.mse, self.relative_euclidean, self.cosine]
    }
}

/// MSE, relative Euclidean distance (normalized by ‖x‖) and cosine similarity
/// of a flattened window and its reconstruction.
pub fn reconstruction_features(x: &[f64], x_hat: &[f64]) -> Result<ReconFeatures> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(dim_err(format!(
            "reconstruction of length {} for input of length {}",
            x_hat.len(),
            x.len()
        )));
    }
    Ok(features_unchecked(x, x_hat))
}

pub(crate) fn features_unchecked(x: &[f64], x_hat: &[f64]) -> ReconFeatures {
    let mut diff2 = 0.0;
    let mut nx2 = 0.0;
    let mut nh2 = 0.0;
    let mut inner = 0.0;
    for (u, v) in x.iter().zip(x_hat) {
        diff2 += (u - v) * (u - v);
        nx2 += u * u;
        nh2 += v * v;
        inner += u * v;
    }
    let nx = nx2.sqrt();
    let nh = nh2.sqrt();
    let cosine = if nx == 0.0 || nh == 0.0 {
        0.0
    } else {
        inner / (nx * nh).max(NORM_EPS)
    };
    ReconFeatures {
        mse: diff2 / x.len() as f64,
        relative_euclidean: diff2.sqrt() / nx.max(NORM_EPS),
        cosine,
    }
}

/// Gradient of `g · features(x, x̂)` with respect to `x̂`, accumulated into `out`.
pub(crate) fn features_backward(x: &[f64], x_hat: &[f64], g: [f64; 3], out: &mut [f64]) {
    let n = x.len() as f64;
    let mut diff2 = 0.0;
    let mut nx2 = 0.0;
    let mut nh2 = 0.0;
    let mut inner = 0.0;
    for (u, v) in x.iter().zip(x_hat) {
        diff2 += (u - v) * (u - v);
        nx2 += u * u;
        nh2 += v * v;
        inner += u * v;
    }
    let dist = diff2.sqrt();
    let nx = nx2.sqrt();
    let nh = nh2.sqrt();
    let c_mse = g[0] * 2.0 / n;
    let c_rel = if dist > 0.0 {
        g[1] / (dist * nx.max(NORM_EPS))
    } else {
        0.0
    };
    let cos_active = nx > 0.0 && nh > 0.0 && nx * nh > NORM_EPS;
    let (c_u, c_v) = if cos_active {
        let denom = nx * nh;
        (g[2] / denom, -g[2] * inner / (denom * nh2))
    } else if nx > 0.0 && nh > 0.0 {
        (g[2] / NORM_EPS, 0.0)
    } else {
        (0.0, 0.0)
    };
    for ((o, u), v) in out.iter_mut().zip(x).zip(x_hat) {
        let e = v - u;
        *o += c_mse * e + c_rel * e + c_u * u + c_v * v;
    }
}

/// Latent vector `[z_c; mse; relative_euclidean; cosine]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub z: Vec<f64>,
}

pub fn assemble_latent(code: &[f64], features: &ReconFeatures) -> LatentVector {
    let mut z = Vec::with_capacity(code.len() + N_RECON_FEATURES);
    z.extend_from_slice(code);
    z.extend_from_slice(&features.as_array());
    LatentVector { z }
}

/// Sum over features of squared error per step, averaged over the `T` steps.
pub fn reconstruction_loss(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(dim_err(format!(
            "reconstruction shape {:?} vs input {:?}",
            x_hat.shape(),
            x.shape()
        )));
    }
    Ok(window_loss(x.data(), x_hat.data(), x.rows()))
}

pub(crate) fn window_loss(x: &[f64], x_hat: &[f64], window_len: usize) -> f64 {
    x.iter().zip(x_hat).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / window_len as f64
}
