//! Window encoders behind a common trait, selected by name from a registry.
//!
//! Every encoder maps flattened windows (`N × T·D`, time-major) to codes
//! `N × d`. Parameter-independent work (the reservoir run for the echo-state
//! encoder) happens once in [`Encoder::prepare`]; [`Encoder::encode`] and
//! [`Encoder::backward`] operate on the prepared rows.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Activation, Dropout, Mlp};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::reservoir::{init_reservoir, EsnEncoder, ReservoirConfig};

pub trait Encoder: Send + Sync + fmt::Debug {
    /// Registry name of this encoder family.
    fn kind(&self) -> &'static str;

    fn latent_dim(&self) -> usize;

    /// Flattened window width `T·D`.
    fn input_width(&self) -> usize;

    /// Parameter-independent preprocessing of a batch of flattened windows.
    fn prepare(&self, windows: &Matrix) -> Result<Matrix>;

    /// Codes for prepared rows.
    fn encode(&self, prepared: &Matrix) -> Result<Matrix>;

    /// Gradients of the trainable parameters (in [`Encoder::params`] order)
    /// given the gradient with respect to the codes.
    fn backward(&self, prepared: &Matrix, grad_codes: &Matrix) -> Result<Vec<Matrix>>;

    fn params(&self) -> Vec<&Matrix>;

    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    fn param_names(&self) -> Vec<String>;

    /// Weights that never change after construction.
    fn fixed_tensors(&self) -> Vec<(String, &Matrix)>;

    /// Every tensor (trainable and fixed) by name, for checkpoint restore.
    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    fn clone_box(&self) -> Box<dyn Encoder>;
}

impl Clone for Box<dyn Encoder> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderGeometry {
    pub window_len: usize,
    pub n_features: usize,
    pub latent_dim: usize,
}

impl EncoderGeometry {
    pub fn input_width(&self) -> usize {
        self.window_len * self.n_features
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSettings {
    pub reservoir: ReservoirConfig,
    /// Hidden widths of the feed-forward encoder.
    pub mlp_hidden: Vec<usize>,
    /// Hidden state size of the vanilla recurrent encoder.
    pub rnn_hidden: usize,
    /// Initialization seed of the trainable encoders; the reservoir carries its own.
    pub seed: u64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            reservoir: ReservoirConfig::default(),
            mlp_hidden: vec![128, 32],
            rnn_hidden: 64,
            seed: 42,
        }
    }
}

pub trait EncoderFactory: Send + Sync {
    fn name(&self) -> &'static str;

    fn build(&self, geom: &EncoderGeometry, settings: &EncoderSettings) -> Result<Box<dyn Encoder>>;
}

/// Name → factory map. [`EncoderRegistry::default`] registers `esn`, `mlp`, `rnn`.
pub struct EncoderRegistry {
    factories: BTreeMap<&'static str, Box<dyn EncoderFactory>>,
}

impl EncoderRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, factory: Box<dyn EncoderFactory>) {
        self.factories.insert(factory.name(), factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn build(
        &self,
        name: &str,
        geom: &EncoderGeometry,
        settings: &EncoderSettings,
    ) -> Result<Box<dyn Encoder>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown encoder {name:?}; available: {}",
                self.names().join(", ")
            ))
        })?;
        factory.build(geom, settings)
    }

    /// Rebuilds an encoder and overwrites every tensor from `tensors`.
    pub fn restore(
        &self,
        name: &str,
        geom: &EncoderGeometry,
        settings: &EncoderSettings,
        tensors: &BTreeMap<String, Matrix>,
    ) -> Result<Box<dyn Encoder>> {
        let mut enc = self.build(name, geom, settings)?;
        for (tname, slot) in enc.tensors_mut() {
            let stored = tensors
                .get(&tname)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {tname}")))?;
            if stored.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {tname} has shape {:?}, expected {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored.clone();
        }
        Ok(enc)
    }
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(EsnFactory));
        r.register(Box::new(MlpEncoderFactory));
        r.register(Box::new(RnnFactory));
        r
    }
}

struct EsnFactory;

impl EncoderFactory for EsnFactory {
    fn name(&self) -> &'static str {
        "esn"
    }

    fn build(&self, geom: &EncoderGeometry, settings: &EncoderSettings) -> Result<Box<dyn Encoder>> {
        Ok(Box::new(init_reservoir(
            &settings.reservoir,
            geom.n_features,
            geom.window_len,
            geom.latent_dim,
        )?))
    }
}

fn check_width(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(dim_err(format!("encoder expects width {want}, got {got}")));
    }
    Ok(())
}

impl Encoder for EsnEncoder {
    fn kind(&self) -> &'static str {
        "esn"
    }

    fn latent_dim(&self) -> usize {
        self.w_out.rows()
    }

    fn input_width(&self) -> usize {
        self.window_len * self.n_features
    }

    fn prepare(&self, windows: &Matrix) -> Result<Matrix> {
        check_width(windows.cols(), self.input_width())?;
        let width = self.readout_width();
        let rows: Vec<Vec<f64>> = (0..windows.rows())
            .into_par_iter()
            .map(|i| self.readout_features(windows.row(i)))
            .collect();
        Ok(Matrix::from_raw(windows.rows(), width, rows.concat()))
    }

    fn encode(&self, prepared: &Matrix) -> Result<Matrix> {
        check_width(prepared.cols(), self.readout_width())?;
        self.readout(prepared)
    }

    fn backward(&self, prepared: &Matrix, grad_codes: &Matrix) -> Result<Vec<Matrix>> {
        Ok(vec![matmul_tn(grad_codes, prepared)?])
    }

    fn params(&self) -> Vec<&Matrix> {
        vec![&self.w_out]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_out]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["encoder.w_out".into()]
    }

    fn fixed_tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("encoder.w_in".into(), &self.w_in),
            ("encoder.w_res".into(), &self.w_res),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("encoder.w_in".into(), &mut self.w_in),
            ("encoder.w_res".into(), &mut self.w_res),
            ("encoder.w_out".into(), &mut self.w_out),
        ]
    }

    fn clone_box(&self) -> Box<dyn Encoder> {
        Box::new(self.clone())
    }
}

/// Feed-forward encoder on `flatten(X)`: `[T·D → hidden… → d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder {
    pub net: Mlp,
}

struct MlpEncoderFactory;

impl EncoderFactory for MlpEncoderFactory {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn build(&self, geom: &EncoderGeometry, settings: &EncoderSettings) -> Result<Box<dyn Encoder>> {
        let mut widths = vec![geom.input_width()];
        widths.extend_from_slice(&settings.mlp_hidden);
        widths.push(geom.latent_dim);
        let n = widths.len() - 1;
        let mut acts = vec![Activation::Relu; n];
        acts[n - 1] = Activation::Identity;
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        Ok(Box::new(MlpEncoder {
            net: Mlp::new(&widths, &acts, &vec![0.0; n], &mut rng)?,
        }))
    }
}

impl Encoder for MlpEncoder {
    fn kind(&self) -> &'static str {
        "mlp"
    }

    fn latent_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn input_width(&self) -> usize {
        self.net.input_dim()
    }

    fn prepare(&self, windows: &Matrix) -> Result<Matrix> {
        check_width(windows.cols(), self.input_width())?;
        Ok(windows.clone())
    }

    fn encode(&self, prepared: &Matrix) -> Result<Matrix> {
        Ok(self.net.forward(prepared, &mut Dropout::Off)?.output)
    }

    fn backward(&self, prepared: &Matrix, grad_codes: &Matrix) -> Result<Vec<Matrix>> {
        let trace = self.net.forward(prepared, &mut Dropout::Off)?;
        Ok(self.net.backward(&trace, grad_codes)?.params)
    }

    fn params(&self) -> Vec<&Matrix> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.net.params_mut()
    }

    fn param_names(&self) -> Vec<String> {
        self.net.param_names("encoder")
    }

    fn fixed_tensors(&self) -> Vec<(String, &Matrix)> {
        Vec::new()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let names = self.param_names();
        names.into_iter().zip(self.net.params_mut()).collect()
    }

    fn clone_box(&self) -> Box<dyn Encoder> {
        Box::new(self.clone())
    }
}

/// Vanilla tanh recurrent encoder with every weight trainable:
/// `h_t = tanh(W_x x_t + W_h h_{t-1} + b)`, `z = W_o h_T + b_o`, `h_0 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnEncoder {
    pub w_x: Matrix,
    pub w_h: Matrix,
    pub b: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
    pub window_len: usize,
}

struct RnnFactory;

impl EncoderFactory for RnnFactory {
    fn name(&self) -> &'static str {
        "rnn"
    }

    fn build(&self, geom: &EncoderGeometry, settings: &EncoderSettings) -> Result<Box<dyn Encoder>> {
        let h = settings.rnn_hidden;
        if h == 0 {
            return Err(Error::InvalidArgument("rnn_hidden must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let s = 1.0 / (h as f64).sqrt();
        let mut uni = |r: usize, c: usize, b: f64| Matrix::from_fn(r, c, |_, _| rng.random_range(-b..=b));
        let w_x = uni(h, geom.n_features, s);
        let w_h = uni(h, h, s);
        let w_o = uni(geom.latent_dim, h, (6.0 / (h + geom.latent_dim) as f64).sqrt());
        Ok(Box::new(RnnEncoder {
            w_x,
            w_h,
            b: Matrix::zeros(1, h),
            w_o,
            b_o: Matrix::zeros(1, geom.latent_dim),
            window_len: geom.window_len,
        }))
    }
}

impl RnnEncoder {
    fn hidden(&self) -> usize {
        self.w_h.rows()
    }

    fn n_features(&self) -> usize {
        self.w_x.cols()
    }

    /// Hidden states `h_0 … h_T`, each `N × H`.
    fn states(&self, windows: &Matrix) -> Result<Vec<Matrix>> {
        check_width(windows.cols(), self.input_width())?;
        let n = windows.rows();
        let d = self.n_features();
        let mut hs = vec![Matrix::zeros(n, self.hidden())];
        for t in 0..self.window_len {
            let x_t = windows.columns(t * d, (t + 1) * d);
            let mut a = matmul_nt(&x_t, &self.w_x)?;
            a.axpy(1.0, &matmul_nt(hs.last().unwrap(), &self.w_h)?);
            for i in 0..n {
                for (v, b) in a.row_mut(i).iter_mut().zip(self.b.data()) {
                    *v = (*v + b).tanh();
                }
            }
            hs.push(a);
        }
        Ok(hs)
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut s = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (a, v) in s.iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
    Matrix::row_vector(s)
}

impl Encoder for RnnEncoder {
    fn kind(&self) -> &'static str {
        "rnn"
    }

    fn latent_dim(&self) -> usize {
        self.w_o.rows()
    }

    fn input_width(&self) -> usize {
        self.window_len * self.n_features()
    }

    fn prepare(&self, windows: &Matrix) -> Result<Matrix> {
        check_width(windows.cols(), self.input_width())?;
        Ok(windows.clone())
    }

    fn encode(&self, prepared: &Matrix) -> Result<Matrix> {
        let hs = self.states(prepared)?;
        let mut z = matmul_nt(hs.last().unwrap(), &self.w_o)?;
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(self.b_o.data()) {
                *v += b;
            }
        }
        Ok(z)
    }

    fn backward(&self, prepared: &Matrix, grad_codes: &Matrix) -> Result<Vec<Matrix>> {
        let hs = self.states(prepared)?;
        let d = self.n_features();
        let h_t = hs.last().unwrap();
        let g_wo = matmul_tn(grad_codes, h_t)?;
        let g_bo = column_sums(grad_codes);
        let mut dh = matmul(grad_codes, &self.w_o)?;
        let mut g_wx = Matrix::zeros(self.w_x.rows(), self.w_x.cols());
        let mut g_wh = Matrix::zeros(self.w_h.rows(), self.w_h.cols());
        let mut g_b = Matrix::zeros(1, self.hidden());
        for t in (1..=self.window_len).rev() {
            let h = &hs[t];
            for (g, y) in dh.data_mut().iter_mut().zip(h.data()) {
                *g *= 1.0 - y * y;
            }
            let x_t = prepared.columns((t - 1) * d, t * d);
            g_wx.axpy(1.0, &matmul_tn(&dh, &x_t)?);
            g_wh.axpy(1.0, &matmul_tn(&dh, &hs[t - 1])?);
            g_b.axpy(1.0, &column_sums(&dh));
            dh = matmul(&dh, &self.w_h)?;
        }
        Ok(vec![g_wx, g_wh, g_b, g_wo, g_bo])
    }

    fn params(&self) -> Vec<&Matrix> {
        vec![&self.w_x, &self.w_h, &self.b, &self.w_o, &self.b_o]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_x, &mut self.w_h, &mut self.b, &mut self.w_o, &mut self.b_o]
    }

    fn param_names(&self) -> Vec<String> {
        ["w_x", "w_h", "b", "w_o", "b_o"]
            .iter()
            .map(|n| format!("encoder.{n}"))
            .collect()
    }

    fn fixed_tensors(&self) -> Vec<(String, &Matrix)> {
        Vec::new()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let names = self.param_names();
        names.into_iter().zip(self.params_mut()).collect()
    }

    fn clone_box(&self) -> Box<dyn Encoder> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reservoir::encode_sequence;

    fn geom() -> EncoderGeometry {
        EncoderGeometry {
            window_len: 5,
            n_features: 3,
            latent_dim: 4,
        }
    }

    fn settings() -> EncoderSettings {
        let mut s = EncoderSettings::default();
        s.reservoir.size = 12;
        s.mlp_hidden = vec![9, 6];
        s.rnn_hidden = 7;
        s
    }

    fn windows(seed: u64, n: usize) -> Matrix {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, 15, |_, _| r.random_range(-1.5..1.5))
    }

    #[test]
    fn registry_lists_and_rejects() {
        let reg = EncoderRegistry::default();
        assert_eq!(reg.names(), vec!["esn", "mlp", "rnn"]);
        let err = reg.build("lstm", &geom(), &settings()).unwrap_err();
        assert!(err.to_string().contains("esn, mlp, rnn"));
    }

    #[test]
    fn esn_encode_matches_sequence_encoding() {
        let reg = EncoderRegistry::default();
        let enc = reg.build("esn", &geom(), &settings()).unwrap();
        let x = windows(1, 3);
        let z = enc.encode(&enc.prepare(&x).unwrap()).unwrap();
        let esn = init_reservoir(
            &ReservoirConfig { size: 12, seed: 42, ..ReservoirConfig::default() },
            3,
            5,
            4,
        )
        .unwrap();
        for i in 0..3 {
            let w = Matrix::new(5, 3, x.row(i).to_vec()).unwrap();
            let (zi, _) = encode_sequence(&esn, &w).unwrap();
            for (a, b) in z.row(i).iter().zip(&zi) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn mlp_encoder_matches_straight_line() {
        let enc = EncoderRegistry::default().build("mlp", &geom(), &settings()).unwrap();
        let x = windows(2, 2);
        let z = enc.encode(&enc.prepare(&x).unwrap()).unwrap();
        let p = enc.params();
        for i in 0..2 {
            let mut h = x.row(i).to_vec();
            for l in 0..3 {
                let (w, b) = (p[2 * l], p[2 * l + 1]);
                h = (0..w.rows())
                    .map(|o| {
                        let s = b.data()[o] + w.row(o).iter().zip(&h).map(|(a, c)| a * c).sum::<f64>();
                        if l < 2 { s.max(0.0) } else { s }
                    })
                    .collect();
            }
            for (a, b) in z.row(i).iter().zip(&h) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    fn check_encoder_grads(kind: &str) {
        let mut enc = EncoderRegistry::default().build(kind, &geom(), &settings()).unwrap();
        let x = windows(3, 4);
        let prepared = enc.prepare(&x).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let probe = Matrix::from_fn(4, 4, |_, _| r.random_range(-1.0..1.0));
        let f = |e: &dyn Encoder| {
            let z = e.encode(&prepared).unwrap();
            z.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
                + 0.25 * z.data().iter().map(|a| a.powi(4)).sum::<f64>()
        };
        let z = enc.encode(&prepared).unwrap();
        let g = Matrix::from_fn(4, 4, |i, j| probe.get(i, j) + z.get(i, j).powi(3));
        let grads = enc.backward(&prepared, &g).unwrap();
        let h = 1e-5;
        for p in 0..grads.len() {
            let len = grads[p].data().len();
            for idx in (0..len).step_by(1 + len / 40) {
                let orig = enc.params()[p].data()[idx];
                enc.params_mut()[p].data_mut()[idx] = orig + h;
                let up = f(enc.as_ref());
                enc.params_mut()[p].data_mut()[idx] = orig - h;
                let dn = f(enc.as_ref());
                enc.params_mut()[p].data_mut()[idx] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grads[p].data()[idx];
                assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-5, "{kind} p{p}[{idx}] {fd} {an}");
            }
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for kind in ["esn", "mlp", "rnn"] {
            check_encoder_grads(kind);
        }
    }

    #[test]
    fn restore_overwrites_tensors() {
        let reg = EncoderRegistry::default();
        let mut a = reg.build("rnn", &geom(), &settings()).unwrap();
        a.params_mut()[0].data_mut()[0] = 123.0;
        let mut map = BTreeMap::new();
        for (n, t) in a.tensors_mut() {
            map.insert(n, t.clone());
        }
        let b = reg.restore("rnn", &geom(), &settings(), &map).unwrap();
        assert_eq!(b.params()[0].data()[0], 123.0);
        map.remove("encoder.w_h");
        assert!(reg.restore("rnn", &geom(), &settings(), &map).is_err());
    }

    #[test]
    fn wrong_width_rejected() {
        for kind in ["esn", "mlp", "rnn"] {
            let enc = EncoderRegistry::default().build(kind, &geom(), &settings()).unwrap();
            assert!(enc.prepare(&Matrix::zeros(2, 14)).is_err());
        }
    }
}
