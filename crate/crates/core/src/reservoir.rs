//! Echo-state-network encoder: a fixed random sparse reservoir driven by the
//! window, followed by a trainable linear readout over `[s_T; flatten(X)]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{dot, matmul_nt, spectral_radius, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReservoirConfig {
    pub size: usize,
    pub spectral_radius: f64,
    /// Fraction of nonzero recurrent entries.
    pub sparsity: f64,
    pub input_scale: f64,
    /// Leaky rate α.
    pub leak: f64,
    pub seed: u64,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        Self {
            size: 64,
            spectral_radius: 0.9,
            sparsity: 0.1,
            input_scale: 0.5,
            leak: 0.3,
            seed: 42,
        }
    }
}

impl ReservoirConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("reservoir.{m}")));
        if self.size == 0 {
            return bad("size must be ≥ 1");
        }
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            return bad("leak must lie in (0, 1]");
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return bad("sparsity must lie in (0, 1]");
        }
        if !(self.spectral_radius > 0.0 && self.spectral_radius.is_finite()) {
            return bad("spectral_radius must be > 0");
        }
        if !(self.input_scale >= 0.0 && self.input_scale.is_finite()) {
            return bad("input_scale must be ≥ 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReservoirState {
    pub s: Vec<f64>,
}

impl ReservoirState {
    pub fn zeros(n: usize) -> Self {
        Self { s: vec![0.0; n] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EsnEncoder {
    pub(crate) w_in: Matrix,
    pub(crate) w_res: Matrix,
    pub(crate) w_out: Matrix,
    pub(crate) config: ReservoirConfig,
    pub(crate) window_len: usize,
    pub(crate) n_features: usize,
}

/// Samples the fixed input/recurrent weights and a small random readout.
pub fn init_reservoir(
    cfg: &ReservoirConfig,
    n_features: usize,
    window_len: usize,
    latent_dim: usize,
) -> Result<EsnEncoder> {
    cfg.validate()?;
    if n_features == 0 || window_len == 0 || latent_dim == 0 {
        return Err(Error::InvalidArgument(
            "reservoir input dim, window length and latent dim must be ≥ 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.size;
    let a = cfg.input_scale;
    let w_in = Matrix::from_fn(n, n_features, |_, _| {
        if a == 0.0 {
            0.0
        } else {
            rng.random_range(-a..=a)
        }
    });
    let mut w_res = Matrix::from_fn(n, n, |_, _| {
        if rng.random::<f64>() < cfg.sparsity {
            rng.random_range(-1.0..=1.0)
        } else {
            0.0
        }
    });
    let radius = spectral_radius(&w_res)?;
    if !(radius > 1e-12) {
        return Err(Error::Numerical(
            "reservoir matrix has zero spectral radius; cannot rescale".into(),
        ));
    }
    w_res = w_res.scale(cfg.spectral_radius / radius);

    let width = n + window_len * n_features;
    let bound = 1.0 / (width as f64).sqrt();
    let w_out = Matrix::from_fn(latent_dim, width, |_, _| rng.random_range(-bound..=bound));
    Ok(EsnEncoder {
        w_in,
        w_res,
        w_out,
        config: cfg.clone(),
        window_len,
        n_features,
    })
}

impl EsnEncoder {
    /// Assembles an encoder from explicit weights (used by checkpoint restore
    /// and by tests that need hand-set reservoirs).
    pub fn from_parts(
        w_in: Matrix,
        w_res: Matrix,
        w_out: Matrix,
        config: ReservoirConfig,
        window_len: usize,
    ) -> Result<Self> {
        let n = w_res.rows();
        if w_res.cols() != n || w_in.rows() != n {
            return Err(dim_err("reservoir weight shapes disagree"));
        }
        let n_features = w_in.cols();
        if w_out.cols() != n + window_len * n_features {
            return Err(dim_err(format!(
                "readout has {} columns, expected {}",
                w_out.cols(),
                n + window_len * n_features
            )));
        }
        Ok(Self {
            w_in,
            w_res,
            w_out,
            config,
            window_len,
            n_features,
        })
    }

    pub fn w_in(&self) -> &Matrix {
        &self.w_in
    }

    pub fn w_res(&self) -> &Matrix {
        &self.w_res
    }

    pub fn w_out(&self) -> &Matrix {
        &self.w_out
    }

    pub fn w_out_mut(&mut self) -> &mut Matrix {
        &mut self.w_out
    }

    pub fn config(&self) -> &ReservoirConfig {
        &self.config
    }

    pub fn reservoir_size(&self) -> usize {
        self.w_res.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w_out.rows()
    }

    pub fn readout_width(&self) -> usize {
        self.w_out.cols()
    }

    pub(crate) fn step(&self, s_prev: &[f64], x: &[f64], out: &mut [f64]) {
        let alpha = self.config.leak;
        for i in 0..s_prev.len() {
            let pre = dot(self.w_in.row(i), x) + dot(self.w_res.row(i), s_prev);
            out[i] = (1.0 - alpha) * s_prev[i] + alpha * pre.tanh();
        }
    }

    /// Final reservoir state after driving the zero state with a flattened window.
    pub(crate) fn final_state(&self, flat_window: &[f64]) -> Vec<f64> {
        let n = self.reservoir_size();
        let mut s = vec![0.0; n];
        let mut next = vec![0.0; n];
        for x in flat_window.chunks_exact(self.n_features) {
            self.step(&s, x, &mut next);
            std::mem::swap(&mut s, &mut next);
        }
        s
    }

    /// Readout input `[s_T; flatten(X)]` for a flattened window.
    pub(crate) fn readout_features(&self, flat_window: &[f64]) -> Vec<f64> {
        let mut f = self.final_state(flat_window);
        f.extend_from_slice(flat_window);
        f
    }

    /// Readout over a batch of precomputed feature rows.
    pub(crate) fn readout(&self, features: &Matrix) -> Result<Matrix> {
        matmul_nt(features, &self.w_out)
    }
}

/// One leaky-integrator reservoir step:
/// `s_t = (1-α)·s_{t-1} + α·tanh(W_in x_t + W_res s_{t-1})`.
pub fn update_state(enc: &EsnEncoder, s_prev: &ReservoirState, x: &[f64]) -> Result<ReservoirState> {
    if s_prev.s.len() != enc.reservoir_size() || x.len() != enc.n_features {
        return Err(dim_err(format!(
            "state {} / input {} vs reservoir {} / features {}",
            s_prev.s.len(),
            x.len(),
            enc.reservoir_size(),
            enc.n_features
        )));
    }
    if x.iter().chain(&s_prev.s).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reservoir input".into()));
    }
    let mut out = vec![0.0; s_prev.s.len()];
    enc.step(&s_prev.s, x, &mut out);
    Ok(ReservoirState { s: out })
}

/// Runs a `T×D` window from the zero state and applies the readout.
pub fn encode_sequence(enc: &EsnEncoder, window: &Matrix) -> Result<(Vec<f64>, ReservoirState)> {
    if window.shape() != (enc.window_len, enc.n_features) {
        return Err(dim_err(format!(
            "window shape {:?}, encoder expects ({}, {})",
            window.shape(),
            enc.window_len,
            enc.n_features
        )));
    }
    let state = enc.final_state(window.data());
    let mut feats = state.clone();
    feats.extend_from_slice(window.data());
    let z = enc.w_out.mul_vec(&feats)?;
    Ok((z, ReservoirState { s: state }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn cfg() -> ReservoirConfig {
        ReservoirConfig::default()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_reservoir(&cfg(), 13, 28, 10).unwrap();
        let b = init_reservoir(&cfg(), 13, 28, 10).unwrap();
        assert_eq!(a, b);
        let mut other = cfg();
        other.seed += 1;
        assert_ne!(a.w_res, init_reservoir(&other, 13, 28, 10).unwrap().w_res);
    }

    #[test]
    fn rescaled_to_requested_radius() {
        let enc = init_reservoir(&cfg(), 13, 28, 10).unwrap();
        let r = spectral_radius(enc.w_res()).unwrap();
        assert!((r - 0.9).abs() < 1e-6, "radius {r}");
    }

    #[test]
    fn sparsity_matches_binomial() {
        let mut c = cfg();
        c.size = 100;
        let enc = init_reservoir(&c, 3, 4, 2).unwrap();
        let nnz = enc.w_res().data().iter().filter(|v| **v != 0.0).count() as f64;
        // Binomial(10_000, 0.1): mean 1000, sd 30
        assert!((nnz - 1000.0).abs() <= 4.0 * 30.0, "nnz {nnz}");
    }

    #[test]
    fn weight_ranges() {
        let enc = init_reservoir(&cfg(), 13, 28, 10).unwrap();
        assert!(enc.w_in().data().iter().all(|v| v.abs() <= 0.5));
        let bound = 1.0 / ((64 + 28 * 13) as f64).sqrt();
        assert!(enc.w_out().data().iter().all(|v| v.abs() <= bound));
        assert_eq!(enc.w_out().shape(), (10, 428));
    }

    #[test]
    fn invalid_configs_rejected() {
        for f in [
            |c: &mut ReservoirConfig| c.leak = 0.0,
            |c: &mut ReservoirConfig| c.leak = 1.5,
            |c: &mut ReservoirConfig| c.sparsity = 0.0,
            |c: &mut ReservoirConfig| c.spectral_radius = -1.0,
        ] {
            let mut c = cfg();
            f(&mut c);
            assert!(init_reservoir(&c, 2, 2, 2).is_err());
        }
    }

    fn one_dim(leak: f64, w_in: f64, w_res: f64) -> EsnEncoder {
        let mut c = cfg();
        c.size = 1;
        c.leak = leak;
        EsnEncoder::from_parts(
            Matrix::new(1, 1, vec![w_in]).unwrap(),
            Matrix::new(1, 1, vec![w_res]).unwrap(),
            Matrix::zeros(1, 2),
            c,
            1,
        )
        .unwrap()
    }

    #[test]
    fn update_hand_cases() {
        let enc = one_dim(1.0, 1.0, 0.5);
        let s = update_state(&enc, &ReservoirState::zeros(1), &[1.0]).unwrap();
        // tanh(1) = 0.76159415595576488812
        assert!((s.s[0] - 0.761_594_155_955_764_9).abs() < 1e-15);

        let enc = one_dim(1.0, 0.0, 0.0);
        let s = update_state(&enc, &ReservoirState::zeros(1), &[3.0]).unwrap();
        assert_eq!(s.s, vec![0.0]);
    }

    #[test]
    fn zero_leak_keeps_state() {
        // validate() forbids α = 0 for configs; the update itself degenerates cleanly.
        let mut enc = one_dim(1.0, 0.7, 0.2);
        enc.config.leak = 0.0;
        let prev = ReservoirState { s: vec![0.3] };
        assert_eq!(update_state(&enc, &prev, &[2.0]).unwrap(), prev);
    }

    #[test]
    fn update_rejects_bad_input() {
        let enc = one_dim(0.5, 1.0, 0.5);
        assert!(update_state(&enc, &ReservoirState::zeros(1), &[f64::NAN]).is_err());
        assert!(update_state(&enc, &ReservoirState::zeros(2), &[1.0]).is_err());
    }

    #[test]
    fn zero_readout_gives_zero_code() {
        let mut enc = init_reservoir(&cfg(), 3, 5, 4).unwrap();
        *enc.w_out_mut() = Matrix::zeros(4, enc.readout_width());
        let x = Matrix::from_fn(5, 3, |i, j| (i as f64) - (j as f64));
        let (z, _) = encode_sequence(&enc, &x).unwrap();
        assert_eq!(z, vec![0.0; 4]);
    }

    #[test]
    fn single_step_composition() {
        let mut c = cfg();
        c.size = 3;
        c.leak = 1.0;
        let w_in = Matrix::from_rows(&[vec![0.1, -0.2], vec![0.3, 0.4], vec![-0.5, 0.6]]).unwrap();
        let w_out = Matrix::from_fn(2, 5, |i, j| 0.1 * (i as f64 + 1.0) - 0.05 * j as f64);
        let enc = EsnEncoder::from_parts(w_in.clone(), Matrix::zeros(3, 3), w_out.clone(), c, 1).unwrap();
        let x = [0.7, -1.3];
        let (z, s) = encode_sequence(&enc, &Matrix::new(1, 2, x.to_vec()).unwrap()).unwrap();
        let mut feats: Vec<f64> = (0..3).map(|i| dot(w_in.row(i), &x).tanh()).collect();
        assert_eq!(s.s, feats);
        feats.extend_from_slice(&x);
        let expect: Vec<f64> = (0..2).map(|i| dot(w_out.row(i), &feats)).collect();
        assert_eq!(z, expect);
    }

    #[test]
    fn encode_shape_mismatch() {
        let enc = init_reservoir(&cfg(), 3, 5, 4).unwrap();
        assert!(encode_sequence(&enc, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn echo_state_property() {
        let enc = init_reservoir(&cfg(), 13, 28, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..13).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut a = ReservoirState {
            s: (0..64).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let mut b = ReservoirState {
            s: (0..64).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let dist = |a: &ReservoirState, b: &ReservoirState| {
            a.s.iter().zip(&b.s).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let mut checkpoints = vec![dist(&a, &b)];
        for (t, x) in inputs.iter().enumerate() {
            a = update_state(&enc, &a, x).unwrap();
            b = update_state(&enc, &b, x).unwrap();
            if (t + 1) % 50 == 0 {
                checkpoints.push(dist(&a, &b));
            }
        }
        assert!(checkpoints.windows(2).all(|w| w[1] <= w[0]), "{checkpoints:?}");
        assert!(*checkpoints.last().unwrap() <= 1e-6, "{checkpoints:?}");
    }
}
