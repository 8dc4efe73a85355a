//! Comparison systems: PCA and a two-stage autoencoder, each followed by an
//! EM-fitted Gaussian mixture, and the single-stage model with a swapped
//! encoder.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderRegistry;
use crate::error::{dim_err, Error, Result};
use crate::mixture::{fit_mixture_params, Memberships, MixtureParams};
use crate::model::{DagmmModel, ModelSpec};
use crate::numerics::{lse_unchecked, matmul, matmul_nt, Matrix};
use crate::trainer::{fit, Hyperparams, TrainReport};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    /// `d × F`, orthonormal rows, leading direction first.
    pub components: Matrix,
    pub mean: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.components.cols()
    }
}

/// Top-`d` eigenvectors of the sample covariance of `x` (`N × F`). Each
/// component's sign is fixed so its largest-magnitude entry is positive.
pub fn pca_fit(x: &Matrix, d: usize) -> Result<PcaModel> {
    let (n, f) = x.shape();
    if n < 2 {
        return Err(Error::InvalidArgument("PCA needs at least 2 samples".into()));
    }
    if d == 0 || d > n.min(f) {
        return Err(Error::InvalidArgument(format!(
            "PCA dimension {d} must lie in 1..={}",
            n.min(f)
        )));
    }
    let mut mean = vec![0.0; f];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = Matrix::from_fn(n, f, |i, j| x.get(i, j) - mean[j]);
    let cov = crate::numerics::matmul_tn(&centered, &centered)?.scale(1.0 / (n - 1) as f64);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(f, f, cov.data()));
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut comp = Vec::with_capacity(d * f);
    let mut ratios = Vec::with_capacity(d);
    for &c in order.iter().take(d) {
        let col = eig.eigenvectors.column(c);
        let pivot = col.iter().copied().fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        comp.extend(col.iter().map(|v| sign * v));
        ratios.push(if total > 0.0 { eig.eigenvalues[c].max(0.0) / total } else { 0.0 });
    }
    Ok(PcaModel {
        components: Matrix::new(d, f, comp)?,
        mean,
        explained_variance_ratio: ratios,
    })
}

/// Centered projection onto the components: `N × d`.
pub fn pca_transform(model: &PcaModel, x: &Matrix) -> Result<Matrix> {
    if x.cols() != model.input_dim() {
        return Err(dim_err(format!(
            "PCA expects width {}, got {}",
            model.input_dim(),
            x.cols()
        )));
    }
    let centered = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - model.mean[j]);
    matmul_nt(&centered, &model.components)
}

/// Maps codes back to the input space.
pub fn pca_inverse(model: &PcaModel, codes: &Matrix) -> Result<Matrix> {
    let mut out = matmul(codes, &model.components)?;
    for i in 0..out.rows() {
        for (v, m) in out.row_mut(i).iter_mut().zip(&model.mean) {
            *v += m;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmGmm {
    pub params: MixtureParams,
    /// Mean per-sample log-likelihood before each M-step, then at the final parameters.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    /// Components reseeded after collapsing, in the order it happened.
    pub reseeded: Vec<usize>,
}

impl EmGmm {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood.last().expect("EM records at least one likelihood")
    }

    /// Posterior component probabilities for each row of `codes`.
    pub fn responsibilities(&self, codes: &Matrix) -> Result<Matrix> {
        Ok(e_step(&self.params, codes)?.0)
    }
}

fn e_step(params: &MixtureParams, z: &Matrix) -> Result<(Matrix, f64)> {
    let fm = params.factorize()?;
    let k = params.n_components();
    let mut resp = Matrix::zeros(z.rows(), k);
    let mut ll = 0.0;
    for i in 0..z.rows() {
        let terms = fm.component_log_terms(z.row(i));
        let finite: Vec<f64> = terms.iter().copied().filter(|t| t.is_finite()).collect();
        let lse = lse_unchecked(&finite);
        ll += lse;
        for (r, t) in resp.row_mut(i).iter_mut().zip(&terms) {
            *r = (t - lse).exp();
        }
    }
    Ok((resp, ll / z.rows() as f64))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn population_covariance(z: &Matrix) -> Matrix {
    let uniform = Matrix::from_fn(z.rows(), 1, |_, _| 1.0);
    fit_mixture_params(&Memberships { gamma: uniform }, z)
        .expect("uniform memberships of non-empty data")
        .covariances
        .remove(0)
}

/// k-means++ seeding: first mean uniform at random, each next one drawn with
/// probability proportional to the squared distance to the nearest chosen mean.
fn kmeans_pp(z: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = z.rows();
    let mut means = vec![z.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), &means[0])).collect();
    while means.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        means.push(z.row(pick).to_vec());
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(z.row(i), &means[means.len() - 1]));
        }
    }
    means
}

/// Lloyd iterations refining the k-means++ seeds into k-means centers.
fn lloyd(z: &Matrix, mut means: Vec<Vec<f64>>, iters: usize) -> Vec<Vec<f64>> {
    let (n, dim) = (z.rows(), z.cols());
    let mut assign = vec![usize::MAX; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = (0..means.len())
                .map(|j| (j, sq_dist(z.row(i), &means[j])))
                .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
                .0;
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; means.len()];
        let mut counts = vec![0usize; means.len()];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
        for ((m, s), c) in means.iter_mut().zip(sums).zip(counts) {
            // An emptied center keeps its previous position.
            if c > 0 {
                *m = s.into_iter().map(|v| v / c as f64).collect();
            }
        }
    }
    means
}

const LLOYD_ITERS: usize = 25;

/// Upper bound on collapse repairs before EM gives up.
const MAX_RESEEDS: usize = 10;

/// Runs [`em_gmm_fit`] from `restarts` seeds (`seed`, `seed + 1`, ...) and
/// keeps the fit with the highest final log-likelihood; ties go to the
/// earlier seed. Fails only when every restart fails.
pub fn em_gmm_fit_best(
    codes: &Matrix,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
    restarts: usize,
) -> Result<EmGmm> {
    let mut best: Option<EmGmm> = None;
    let mut last_err = None;
    for r in 0..restarts.max(1) as u64 {
        match em_gmm_fit(codes, k, seed.wrapping_add(r), max_iters, tol) {
            Ok(g) => {
                let better = best
                    .as_ref()
                    .is_none_or(|b| g.final_log_likelihood() > b.final_log_likelihood());
                if better {
                    best = Some(g);
                }
            }
            Err(e) => {
                log::warn!("EM restart {r} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    best.ok_or_else(|| last_err.expect("at least one restart ran"))
}

/// Expectation-maximization for a full-covariance mixture on `codes`,
/// initialized from k-means (k-means++ seeds refined by Lloyd iterations).
pub fn em_gmm_fit(codes: &Matrix, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<EmGmm> {
    let n = codes.rows();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "EM needs 1 ≤ K ≤ N (K = {k}, N = {n})"
        )));
    }
    if !codes.is_finite() {
        return Err(Error::NonFinite("EM input codes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let global_cov = population_covariance(codes);
    let mut params = MixtureParams {
        weights: vec![1.0 / k as f64; k],
        means: lloyd(codes, kmeans_pp(codes, k, &mut rng), LLOYD_ITERS),
        covariances: vec![global_cov.clone(); k],
        degenerate: vec![false; k],
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut reseeded = Vec::new();
    for _ in 0..max_iters {
        let (resp, ll) = e_step(&params, codes)?;
        if let Some(prev) = trace.last() {
            if ll - prev < tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        let mut next = fit_mixture_params(&Memberships { gamma: resp }, codes)?;
        let collapsed: Vec<usize> = next.degenerate_components();
        for c in collapsed {
            reseeded.push(c);
            if reseeded.len() > MAX_RESEEDS {
                return Err(Error::Numerical(format!(
                    "EM components collapsed {} times; giving up",
                    reseeded.len()
                )));
            }
            let live: Vec<usize> = (0..k).filter(|&j| !next.degenerate[j]).collect();
            let far = (0..n)
                .map(|i| {
                    let d = live
                        .iter()
                        .map(|&j| sq_dist(codes.row(i), &next.means[j]))
                        .fold(f64::INFINITY, f64::min);
                    (i, d)
                })
                .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
                .0;
            log::warn!("EM component {c} collapsed; reseeding at sample {far}");
            next.means[c] = codes.row(far).to_vec();
            next.covariances[c] = global_cov.clone();
            next.weights[c] = 1.0 / n as f64;
            next.degenerate[c] = false;
        }
        let s: f64 = next.weights.iter().sum();
        for w in &mut next.weights {
            *w /= s;
        }
        params = next;
    }
    if !converged {
        let (_, ll) = e_step(&params, codes)?;
        trace.push(ll);
    }
    Ok(EmGmm {
        params,
        log_likelihood: trace,
        converged,
        reseeded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoStageKind {
    Pca,
    EsnAe,
}

#[derive(Clone, Debug)]
pub enum Reducer {
    Pca(PcaModel),
    /// Echo-state autoencoder trained on reconstruction alone.
    Autoencoder(DagmmModel),
}

impl Reducer {
    /// Codes and reconstructions for flattened windows.
    pub fn encode_decode(&self, windows: &Matrix) -> Result<(Matrix, Matrix)> {
        match self {
            Reducer::Pca(p) => {
                let codes = pca_transform(p, windows)?;
                let recon = pca_inverse(p, &codes)?;
                Ok((codes, recon))
            }
            Reducer::Autoencoder(m) => {
                let inf = m.infer(windows)?;
                Ok((inf.codes, inf.reconstruction))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwoStageModel {
    pub reducer: Reducer,
    pub gmm: EmGmm,
    pub report: Option<TrainReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmSettings {
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
}

/// Reduction trained alone, then EM on the `d`-dimensional codes (no
/// reconstruction features). The autoencoder variant uses the single-stage
/// encoder and decoder with both mixture weights set to zero.
pub fn two_stage_pipeline(
    kind: TwoStageKind,
    train: &Matrix,
    spec: &ModelSpec,
    hp: &Hyperparams,
    em: &EmSettings,
) -> Result<TwoStageModel> {
    let (reducer, report) = match kind {
        TwoStageKind::Pca => (Reducer::Pca(pca_fit(train, hp.latent_dim)?), None),
        TwoStageKind::EsnAe => {
            let mut spec = spec.clone();
            spec.encoder_kind = "esn".into();
            let model = DagmmModel::build(&spec, &EncoderRegistry::default())?;
            let recon_only = Hyperparams {
                lambda_energy: 0.0,
                lambda_cov: 0.0,
                ..hp.clone()
            };
            let (model, report) = fit(model, train, &recon_only)?;
            (Reducer::Autoencoder(model), Some(report))
        }
    };
    let (codes, _) = reducer.encode_decode(train)?;
    let gmm = em_gmm_fit_best(&codes, hp.n_components, em.seed, em.max_iters, em.tol, em.restarts)?;
    Ok(TwoStageModel { reducer, gmm, report })
}

/// The single-stage model with the encoder chosen by name.
pub fn dagmm_variant(
    encoder_kind: &str,
    spec: &ModelSpec,
    train: &Matrix,
    hp: &Hyperparams,
) -> Result<(DagmmModel, TrainReport)> {
    let mut spec = spec.clone();
    spec.encoder_kind = encoder_kind.to_string();
    let model = DagmmModel::build(&spec, &EncoderRegistry::default())?;
    Ok(fit(model, train, hp)?)
}
