//! Estimation network, soft-membership mixture moments, sample energy and the
//! covariance penalty, with the reverse-mode pieces the trainer needs.

use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{Activation, Dropout, Mlp, MlpTrace};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{cholesky, dot, lse_unchecked, CholeskyFactor, Matrix};

/// Column sums below this mark a component as collapsed.
pub const DEGENERATE_MASS: f64 = 1e-8;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// MLP mapping latent vectors to soft memberships via a softmax output.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimationNet {
    pub net: Mlp,
    pub dropout_rate: f64,
}

impl EstimationNet {
    /// `[input → hidden… → K]`, rectifier hidden layers with dropout, softmax output.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        n_components: usize,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_components == 0 {
            return Err(Error::InvalidArgument("component count must be ≥ 1".into()));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(n_components);
        let n_layers = widths.len() - 1;
        let mut acts = vec![Activation::Relu; n_layers];
        acts[n_layers - 1] = Activation::Softmax;
        let mut drops = vec![dropout_rate; n_layers];
        drops[n_layers - 1] = 0.0;
        Ok(Self {
            net: Mlp::new(&widths, &acts, &drops, rng)?,
            dropout_rate,
        })
    }

    pub fn n_components(&self) -> usize {
        self.net.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub(crate) fn forward(&self, z: &Matrix, dropout: &mut Dropout<'_>) -> Result<MlpTrace> {
        self.net.forward(z, dropout)
    }
}

/// Row-stochastic `N × K` membership matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Memberships {
    pub gamma: Matrix,
}

impl Memberships {
    pub fn new(gamma: Matrix) -> Result<Self> {
        for i in 0..gamma.rows() {
            let row = gamma.row(i);
            if row.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
                return Err(Error::InvalidArgument(format!("membership row {i} has entries outside [0,1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("membership row {i} sums to {s}")));
            }
        }
        Ok(Self { gamma })
    }

    pub fn n_components(&self) -> usize {
        self.gamma.cols()
    }
}

/// Memberships from the estimation network. Training mode draws dropout masks
/// from `rng`; evaluation mode (`rng = None`) is deterministic.
pub fn estimate_memberships(
    net: &EstimationNet,
    z: &Matrix,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Memberships> {
    if z.cols() != net.input_dim() {
        return Err(dim_err(format!(
            "estimation net expects {} latent dims, got {}",
            net.input_dim(),
            z.cols()
        )));
    }
    let mut mode = match rng {
        Some(r) => Dropout::Sample(r),
        None => Dropout::Off,
    };
    Ok(Memberships {
        gamma: net.forward(z, &mut mode)?.output,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Matrix>,
    /// Components whose membership mass fell below [`DEGENERATE_MASS`].
    pub degenerate: Vec<bool>,
}

impl MixtureParams {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn degenerate_components(&self) -> Vec<usize> {
        self.degenerate
            .iter()
            .enumerate()
            .filter(|(_, d)| **d)
            .map(|(k, _)| k)
            .collect()
    }

    /// Cholesky-factors every covariance. Jitter is added only when a plain
    /// factorization fails (ladder from 1e-6 up to 1e-2).
    pub fn factorize(&self) -> Result<FactorizedMixture> {
        let p = self.dim();
        let mut log_norm = Vec::with_capacity(self.n_components());
        let mut factors = Vec::with_capacity(self.n_components());
        for k in 0..self.n_components() {
            let f = cholesky(&self.covariances[k], 0.0)?;
            if f.failed_attempts() > 0 {
                log::debug!("component {k}: covariance needed jitter {:e}", f.jitter());
            }
            let lw = if self.weights[k] > 0.0 {
                self.weights[k].ln()
            } else {
                f64::NEG_INFINITY
            };
            log_norm.push(lw - 0.5 * f.log_det() - 0.5 * p as f64 * LN_2PI);
            factors.push(f);
        }
        if log_norm.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::Numerical("every mixture component has zero weight".into()));
        }
        Ok(FactorizedMixture {
            means: self.means.clone(),
            factors,
            log_norm,
        })
    }
}

/// Mixture with factored covariances, ready for repeated energy evaluation.
#[derive(Clone, Debug)]
pub struct FactorizedMixture {
    means: Vec<Vec<f64>>,
    factors: Vec<CholeskyFactor>,
    /// `log φ_k − ½ log|Σ_k| − (p/2) log 2π`.
    log_norm: Vec<f64>,
}

impl FactorizedMixture {
    pub fn factors(&self) -> &[CholeskyFactor] {
        &self.factors
    }

    /// Per-component log terms `log φ_k + log N(z; μ_k, Σ_k)`.
    pub fn component_log_terms(&self, z: &[f64]) -> Vec<f64> {
        let mut diff = vec![0.0; z.len()];
        self.means
            .iter()
            .zip(&self.factors)
            .zip(&self.log_norm)
            .map(|((mu, f), ln)| {
                if *ln == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                for ((d, a), b) in diff.iter_mut().zip(z).zip(mu) {
                    *d = a - b;
                }
                ln - 0.5 * f.quad_form(&diff)
            })
            .collect()
    }

    pub fn energy(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.means[0].len() {
            return Err(dim_err(format!(
                "latent of length {} for mixture of dim {}",
                z.len(),
                self.means[0].len()
            )));
        }
        let terms: Vec<f64> = self
            .component_log_terms(z)
            .into_iter()
            .filter(|t| *t > f64::NEG_INFINITY)
            .collect();
        Ok(-lse_unchecked(&terms))
    }
}

/// Soft-membership moments: weights, means and population covariances.
pub fn fit_mixture_params(gamma: &Memberships, z: &Matrix) -> Result<MixtureParams> {
    let g = &gamma.gamma;
    let n = z.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot fit mixture to zero samples".into()));
    }
    if g.rows() != n {
        return Err(dim_err(format!("{} membership rows for {n} samples", g.rows())));
    }
    let k_count = g.cols();
    let p = z.cols();
    let mut weights = Vec::with_capacity(k_count);
    let mut means = Vec::with_capacity(k_count);
    let mut covariances = Vec::with_capacity(k_count);
    let mut degenerate = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mass: f64 = (0..n).map(|i| g.get(i, k)).sum();
        weights.push(mass / n as f64);
        if mass < DEGENERATE_MASS {
            means.push(vec![0.0; p]);
            covariances.push(Matrix::identity(p));
            degenerate.push(true);
            continue;
        }
        let mut mu = vec![0.0; p];
        for i in 0..n {
            let w = g.get(i, k);
            for (m, v) in mu.iter_mut().zip(z.row(i)) {
                *m += w * v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= mass);
        let mut cov = Matrix::zeros(p, p);
        let mut d = vec![0.0; p];
        for i in 0..n {
            let w = g.get(i, k);
            for ((di, v), m) in d.iter_mut().zip(z.row(i)).zip(&mu) {
                *di = v - m;
            }
            for a in 0..p {
                let wa = w * d[a];
                let row = cov.row_mut(a);
                for b in a..p {
                    row[b] += wa * d[b];
                }
            }
        }
        for a in 0..p {
            for b in a..p {
                let v = cov.get(a, b) / mass;
                cov.set(a, b, v);
                cov.set(b, a, v);
            }
        }
        means.push(mu);
        covariances.push(cov);
        degenerate.push(false);
    }
    Ok(MixtureParams {
        weights,
        means,
        covariances,
        degenerate,
    })
}

/// `E(z) = −log Σ_k φ_k N(z; μ_k, Σ_k)`.
pub fn sample_energy(params: &MixtureParams, z: &[f64]) -> Result<f64> {
    params.factorize()?.energy(z)
}

/// `Σ_k Σ_j 1 / Σ_k[j, j]`.
pub fn covariance_penalty(params: &MixtureParams) -> Result<f64> {
    let mut total = 0.0;
    for (k, cov) in params.covariances.iter().enumerate() {
        for j in 0..cov.rows() {
            let v = cov.get(j, j);
            if !(v > 0.0) {
                return Err(Error::Numerical(format!(
                    "component {k} has covariance diagonal {v} at dim {j}"
                )));
            }
            total += 1.0 / v;
        }
    }
    Ok(total)
}

/// Gradients of `energy_coef · Σ_i E(z_i) + penalty_coef · P(Σ)` with respect to
/// the latent matrix and the membership matrix, where the mixture parameters
/// are themselves the batch moments of `(gamma, z)`.
pub(crate) struct MixtureGrads {
    pub z: Matrix,
    pub gamma: Matrix,
}

pub(crate) fn mixture_objective_backward(
    gamma: &Matrix,
    z: &Matrix,
    params: &MixtureParams,
    mixture: &FactorizedMixture,
    energy_coef: f64,
    penalty_coef: f64,
) -> Result<MixtureGrads> {
    let n = z.rows();
    let p = z.cols();
    let k_count = params.n_components();

    let mut grad_phi = vec![0.0; k_count];
    let mut grad_mu = vec![vec![0.0; p]; k_count];
    let mut grad_sigma: Vec<Matrix> = (0..k_count).map(|_| Matrix::zeros(p, p)).collect();
    let mut grad_z = Matrix::zeros(n, p);
    let inverses: Vec<Matrix> = mixture.factors.iter().map(CholeskyFactor::inverse).collect();

    if energy_coef != 0.0 {
        let mut diff = vec![0.0; p];
        let mut sum_c = vec![0.0; k_count];
        for i in 0..n {
            let zi = z.row(i);
            let terms = mixture.component_log_terms(zi);
            let lse = lse_unchecked(&terms.iter().copied().filter(|t| t.is_finite()).collect::<Vec<_>>());
            for k in 0..k_count {
                if terms[k] == f64::NEG_INFINITY {
                    continue;
                }
                // dJ/da_ik = -coef * posterior_ik
                let c = -energy_coef * (terms[k] - lse).exp();
                for ((d, a), b) in diff.iter_mut().zip(zi).zip(&params.means[k]) {
                    *d = a - b;
                }
                let v = mixture.factors[k].solve(&diff);
                sum_c[k] += c;
                for (g, vj) in grad_z.row_mut(i).iter_mut().zip(&v) {
                    *g -= c * vj;
                }
                if !params.degenerate[k] {
                    for (g, vj) in grad_mu[k].iter_mut().zip(&v) {
                        *g += c * vj;
                    }
                    let gs = &mut grad_sigma[k];
                    for a in 0..p {
                        let cva = 0.5 * c * v[a];
                        for (gab, vb) in gs.row_mut(a).iter_mut().zip(&v) {
                            *gab += cva * vb;
                        }
                    }
                }
            }
        }
        for k in 0..k_count {
            if params.weights[k] > 0.0 {
                grad_phi[k] = sum_c[k] / params.weights[k];
            }
            if !params.degenerate[k] {
                grad_sigma[k].axpy(-0.5 * sum_c[k], &inverses[k]);
            }
        }
    }
    if penalty_coef != 0.0 {
        for k in 0..k_count {
            if params.degenerate[k] {
                continue;
            }
            for j in 0..p {
                let s = params.covariances[k].get(j, j);
                let g = grad_sigma[k].get(j, j) - penalty_coef / (s * s);
                grad_sigma[k].set(j, j, g);
            }
        }
    }

    // Back through the batch moments. The covariance has zero derivative with
    // respect to the mean at the weighted mean, so only explicit terms remain.
    let mut grad_gamma = Matrix::zeros(n, k_count);
    let mut d = vec![0.0; p];
    for k in 0..k_count {
        let mass: f64 = (0..n).map(|i| gamma.get(i, k)).sum();
        let phi_term = grad_phi[k] / n as f64;
        if params.degenerate[k] {
            for i in 0..n {
                grad_gamma.set(i, k, phi_term);
            }
            continue;
        }
        let gs = &grad_sigma[k];
        let gs_sym = Matrix::from_fn(p, p, |a, b| gs.get(a, b) + gs.get(b, a));
        let inner_gs_sigma = dot(gs.data(), params.covariances[k].data());
        for i in 0..n {
            for ((di, a), b) in d.iter_mut().zip(z.row(i)).zip(&params.means[k]) {
                *di = a - b;
            }
            let gd = gs_sym.mul_vec(&d)?;
            let quad = 0.5 * dot(&d, &gd);
            let gg = phi_term + (dot(&grad_mu[k], &d) + quad - inner_gs_sigma) / mass;
            grad_gamma.set(i, k, gg);
            let w = gamma.get(i, k) / mass;
            for ((gz, gm), gdv) in grad_z.row_mut(i).iter_mut().zip(&grad_mu[k]).zip(&gd) {
                *gz += w * (gm + gdv);
            }
        }
    }
    Ok(MixtureGrads {
        z: grad_z,
        gamma: grad_gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul_nt;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_gamma(r: &mut ChaCha8Rng, n: usize, k: usize) -> Matrix {
        let mut g = Matrix::from_fn(n, k, |_, _| r.random_range(0.01..1.0));
        for i in 0..n {
            let s: f64 = g.row(i).iter().sum();
            g.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        g
    }

    /// Straight loops over the weighted-moment definitions.
    fn moment_oracle(g: &Matrix, z: &Matrix) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
        let (n, k, p) = (z.rows(), g.cols(), z.cols());
        let mut phi = vec![0.0; k];
        let mut mu = vec![vec![0.0; p]; k];
        let mut sigma = vec![vec![vec![0.0; p]; p]; k];
        for c in 0..k {
            let mut s = 0.0;
            for i in 0..n {
                s += g.get(i, c);
            }
            phi[c] = s / n as f64;
            for j in 0..p {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += g.get(i, c) * z.get(i, j);
                }
                mu[c][j] = acc / s;
            }
            for a in 0..p {
                for b in 0..p {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += g.get(i, c) * (z.get(i, a) - mu[c][a]) * (z.get(i, b) - mu[c][b]);
                    }
                    sigma[c][a][b] = acc / s;
                }
            }
        }
        (phi, mu, sigma)
    }

    #[test]
    fn zero_weight_net_gives_uniform_memberships() {
        let mut net = EstimationNet::new(5, &[16, 8], 2, 0.5, &mut rng(1)).unwrap();
        for p in net.net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let z = Matrix::from_fn(4, 5, |i, j| (i * j) as f64);
        let m = estimate_memberships(&net, &z, None).unwrap();
        assert!(m.gamma.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn dropout_zero_means_train_equals_eval() {
        let net = EstimationNet::new(5, &[16, 8], 3, 0.0, &mut rng(2)).unwrap();
        let mut r = rng(3);
        let z = Matrix::from_fn(6, 5, |_, _| r.random_range(-1.0..1.0));
        let eval = estimate_memberships(&net, &z, None).unwrap();
        let train = estimate_memberships(&net, &z, Some(&mut rng(4))).unwrap();
        assert_eq!(eval, train);
    }

    #[test]
    fn memberships_are_row_stochastic_and_deterministic() {
        let net = EstimationNet::new(5, &[16, 8], 4, 0.5, &mut rng(5)).unwrap();
        let mut r = rng(6);
        let z = Matrix::from_fn(20, 5, |_, _| r.random_range(-3.0..3.0));
        let a = estimate_memberships(&net, &z, None).unwrap();
        let b = estimate_memberships(&net, &z, None).unwrap();
        assert_eq!(a, b);
        for i in 0..20 {
            let s: f64 = a.gamma.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(a.gamma.row(i).iter().all(|v| *v >= 0.0));
        }
        assert!(estimate_memberships(&net, &Matrix::zeros(2, 4), None).is_err());
    }

    #[test]
    fn memberships_match_straight_line_oracle() {
        let net = EstimationNet::new(4, &[16, 8], 3, 0.5, &mut rng(7)).unwrap();
        let mut r = rng(8);
        let z = Matrix::from_fn(3, 4, |_, _| r.random_range(-1.0..1.0));
        let m = estimate_memberships(&net, &z, None).unwrap();
        for i in 0..3 {
            let mut h = z.row(i).to_vec();
            for (li, l) in net.net.layers.iter().enumerate() {
                let mut next: Vec<f64> = (0..l.output_dim())
                    .map(|o| l.bias.data()[o] + dot(l.weight.row(o), &h))
                    .collect();
                if li + 1 < net.net.layers.len() {
                    next.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                h = next;
            }
            let mx = h.iter().cloned().fold(f64::MIN, f64::max);
            let t: f64 = h.iter().map(|v| (v - mx).exp()).sum();
            for (k, v) in h.iter().enumerate() {
                assert!(((v - mx).exp() / t - m.gamma.get(i, k)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_component_gives_sample_moments() {
        let mut r = rng(9);
        let z = Matrix::from_fn(10, 3, |_, _| r.random_range(-2.0..2.0));
        let g = Memberships::new(Matrix::from_fn(10, 1, |_, _| 1.0)).unwrap();
        let p = fit_mixture_params(&g, &z).unwrap();
        assert_eq!(p.weights, vec![1.0]);
        for j in 0..3 {
            let mean = z.column(j).iter().sum::<f64>() / 10.0;
            assert!((p.means[0][j] - mean).abs() < 1e-14);
        }
        let (_, _, sigma) = moment_oracle(&g.gamma, &z);
        for a in 0..3 {
            for b in 0..3 {
                assert!((p.covariances[0].get(a, b) - sigma[0][a][b]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn symmetric_memberships_symmetric_moments() {
        let z = Matrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let g = Memberships::new(Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap()).unwrap();
        let p = fit_mixture_params(&g, &z).unwrap();
        assert_eq!(p.weights, vec![0.5, 0.5]);
        for k in 0..2 {
            assert_eq!(p.means[k], vec![1.0]);
            assert_eq!(p.covariances[k].data(), &[1.0]);
        }
    }

    #[test]
    fn one_hot_memberships_give_cluster_means() {
        let z = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![10.0, 0.0], vec![-2.0, 5.0]]).unwrap();
        let g = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let p = fit_mixture_params(&Memberships::new(g).unwrap(), &z).unwrap();
        assert_eq!(p.means[0], vec![2.0, 3.0]);
        assert_eq!(p.means[1], vec![4.0, 2.5]);
    }

    #[test]
    fn collapsed_component_falls_back() {
        let z = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let g = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let p = fit_mixture_params(&Memberships::new(g).unwrap(), &z).unwrap();
        assert_eq!(p.degenerate, vec![false, true]);
        assert_eq!(p.means[1], vec![0.0]);
        assert_eq!(p.covariances[1], Matrix::identity(1));
        assert_eq!(p.degenerate_components(), vec![1]);
    }

    #[test]
    fn fit_rejects_empty() {
        let g = Memberships { gamma: Matrix::zeros(0, 2) };
        assert!(fit_mixture_params(&g, &Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn moments_match_loop_oracle() {
        let mut r = rng(10);
        let g = random_gamma(&mut r, 64, 3);
        let z = Matrix::from_fn(64, 5, |_, _| r.random_range(-3.0..3.0));
        let p = fit_mixture_params(&Memberships::new(g.clone()).unwrap(), &z).unwrap();
        let (phi, mu, sigma) = moment_oracle(&g, &z);
        for k in 0..3 {
            assert!((p.weights[k] - phi[k]).abs() < 1e-10);
            for a in 0..5 {
                assert!((p.means[k][a] - mu[k][a]).abs() < 1e-10);
                for b in 0..5 {
                    assert!((p.covariances[k].get(a, b) - sigma[k][a][b]).abs() < 1e-10);
                }
            }
        }
        let s: f64 = p.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-10);
    }

    fn single(mean: Vec<f64>, cov: Matrix) -> MixtureParams {
        MixtureParams {
            weights: vec![1.0],
            means: vec![mean],
            covariances: vec![cov],
            degenerate: vec![false],
        }
    }

    #[test]
    fn standard_normal_energy_at_mode() {
        let e = sample_energy(&single(vec![0.0], Matrix::identity(1)), &[0.0]).unwrap();
        assert!((e - 0.918_938_533_204_672_7).abs() < 1e-12);
        let p = 5;
        let e = sample_energy(&single(vec![1.0; p], Matrix::identity(p)), &[1.0; 5]).unwrap();
        assert!((e - 0.5 * p as f64 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_components_excluded() {
        let mut params = single(vec![0.0], Matrix::identity(1));
        params.weights = vec![1.0, 0.0];
        params.means.push(vec![5.0]);
        params.covariances.push(Matrix::identity(1));
        params.degenerate.push(false);
        let e2 = sample_energy(&params, &[0.3]).unwrap();
        let e1 = sample_energy(&single(vec![0.0], Matrix::identity(1)), &[0.3]).unwrap();
        assert_eq!(e1, e2);
        params.weights = vec![0.0, 0.0];
        assert!(sample_energy(&params, &[0.3]).is_err());
    }

    #[test]
    fn penalty_cases() {
        let p = MixtureParams {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.0; 3]; 2],
            covariances: vec![Matrix::identity(3); 2],
            degenerate: vec![false; 2],
        };
        assert_eq!(covariance_penalty(&p).unwrap(), 6.0);
        assert_eq!(covariance_penalty(&single(vec![0.0; 2], Matrix::diag(&[2.0, 4.0]))).unwrap(), 0.75);
        let smaller = covariance_penalty(&single(vec![0.0; 2], Matrix::diag(&[1.5, 4.0]))).unwrap();
        assert!(smaller > 0.75);
        assert!(covariance_penalty(&single(vec![0.0; 2], Matrix::diag(&[0.0, 4.0]))).is_err());
    }

    fn random_spd(r: &mut ChaCha8Rng, n: usize) -> Matrix {
        let a = Matrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        let mut m = matmul_nt(&a, &a).unwrap();
        for i in 0..n {
            m.set(i, i, m.get(i, i) + 0.5);
        }
        m
    }

    #[test]
    fn energy_permutation_invariant() {
        let mut r = rng(11);
        let params = MixtureParams {
            weights: vec![0.2, 0.5, 0.3],
            means: (0..3).map(|_| (0..4).map(|_| r.random_range(-2.0..2.0)).collect()).collect(),
            covariances: (0..3).map(|_| random_spd(&mut r, 4)).collect(),
            degenerate: vec![false; 3],
        };
        let mut perm = params.clone();
        let order = [2, 0, 1];
        perm.weights = order.iter().map(|&k| params.weights[k]).collect();
        perm.means = order.iter().map(|&k| params.means[k].clone()).collect();
        perm.covariances = order.iter().map(|&k| params.covariances[k].clone()).collect();
        for _ in 0..10 {
            let z: Vec<f64> = (0..4).map(|_| r.random_range(-3.0..3.0)).collect();
            let a = sample_energy(&params, &z).unwrap();
            let b = sample_energy(&perm, &z).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_decreases_toward_mean() {
        let mut r = rng(12);
        let cov = random_spd(&mut r, 3);
        let mu = vec![0.5, -1.0, 2.0];
        let params = single(mu.clone(), cov);
        let start = [4.0, 3.0, -2.0];
        let mut last = f64::INFINITY;
        for step in 0..=20 {
            let t = step as f64 / 20.0;
            let z: Vec<f64> = start.iter().zip(&mu).map(|(s, m)| s + t * (m - s)).collect();
            let e = sample_energy(&params, &z).unwrap();
            assert!(e < last);
            last = e;
        }
    }

    #[test]
    fn energy_matches_dense_oracle() {
        let mut r = rng(13);
        let params = MixtureParams {
            weights: vec![0.3, 0.3, 0.4],
            means: (0..3).map(|_| (0..5).map(|_| r.random_range(-1.0..1.0)).collect()).collect(),
            covariances: (0..3).map(|_| random_spd(&mut r, 5)).collect(),
            degenerate: vec![false; 3],
        };
        let z: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut density = 0.0;
        for k in 0..3 {
            let c = &params.covariances[k];
            let na = nalgebra::DMatrix::from_row_slice(5, 5, c.data());
            let inv = na.clone().try_inverse().unwrap();
            let det = na.determinant();
            let d = nalgebra::DVector::from_iterator(5, z.iter().zip(&params.means[k]).map(|(a, b)| a - b));
            let q = (d.transpose() * inv * &d)[(0, 0)];
            density += params.weights[k] * (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(5) * det).sqrt();
        }
        let e = sample_energy(&params, &z).unwrap();
        assert!((e + density.ln()).abs() / e.abs() < 1e-8);
    }

    /// Finite-difference check of the mixture backward on a composite objective.
    #[test]
    fn mixture_backward_matches_finite_differences() {
        let mut r = rng(14);
        let (n, k, p) = (7, 3, 4);
        let gamma = random_gamma(&mut r, n, k);
        let z = Matrix::from_fn(n, p, |_, _| r.random_range(-2.0..2.0));
        let (ce, cp) = (0.37, 0.011);
        let objective = |g: &Matrix, z: &Matrix| {
            let params = fit_mixture_params(&Memberships { gamma: g.clone() }, z).unwrap();
            let mix = params.factorize().unwrap();
            let e: f64 = (0..z.rows()).map(|i| mix.energy(z.row(i)).unwrap()).sum();
            ce * e + cp * covariance_penalty(&params).unwrap()
        };
        let params = fit_mixture_params(&Memberships { gamma: gamma.clone() }, &z).unwrap();
        let mix = params.factorize().unwrap();
        let grads = mixture_objective_backward(&gamma, &z, &params, &mix, ce, cp).unwrap();
        let h = 1e-6;
        for i in 0..n {
            for j in 0..p {
                let mut up = z.clone();
                up.set(i, j, z.get(i, j) + h);
                let mut dn = z.clone();
                dn.set(i, j, z.get(i, j) - h);
                let fd = (objective(&gamma, &up) - objective(&gamma, &dn)) / (2.0 * h);
                let an = grads.z.get(i, j);
                assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-5, "z[{i},{j}] {fd} {an}");
            }
            for c in 0..k {
                let mut up = gamma.clone();
                up.set(i, c, gamma.get(i, c) + h);
                let mut dn = gamma.clone();
                dn.set(i, c, gamma.get(i, c) - h);
                let fd = (objective(&up, &z) - objective(&dn, &z)) / (2.0 * h);
                let an = grads.gamma.get(i, c);
                assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-5, "g[{i},{c}] {fd} {an}");
            }
        }
    }
}
