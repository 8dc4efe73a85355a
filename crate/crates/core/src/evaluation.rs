//! Reconstruction and clustering metrics, energy scoring and the sweep drivers.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SeedSection};
use crate::error::{dim_err, Error, Result};
use crate::mixture::{Memberships, MixtureParams};
use crate::numerics::Matrix;
use crate::pipeline::{run_pipeline, PreparedData};

/// Evaluation summary written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub split: String,
    pub n_windows: usize,
    /// Mean squared error over every entry of every window.
    pub reconstruction_mse: f64,
    /// Mean over windows of the per-step summed squared error.
    pub reconstruction_loss: f64,
    /// `None` when fewer than two clusters are populated.
    pub silhouette: Option<f64>,
    /// `"z"` (code plus reconstruction features) or `"z_c"` (code only).
    pub silhouette_space: String,
    pub collapsed: bool,
    pub cluster_sizes: Vec<usize>,
    /// Where the scoring mixture came from: `frozen`, `refit` or `em`.
    pub mixture_source: String,
    pub mean_energy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub energies: Option<Vec<f64>>,
    pub config: ConfigEcho,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub latent_dim: usize,
    pub n_components: usize,
    pub lambda_energy: f64,
    pub lambda_cov: f64,
    pub seeds: SeedSection,
}

impl ConfigEcho {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            latent_dim: cfg.model.latent_dim,
            n_components: cfg.model.n_components,
            lambda_energy: cfg.train.lambda_energy,
            lambda_cov: cfg.train.lambda_cov,
            seeds: cfg.seeds.clone(),
        }
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Mean of squared differences over all `N·T·D` entries.
pub fn reconstruction_mse_metric(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(dim_err(format!(
            "reconstruction shape {:?} vs data {:?}",
            x_hat.shape(),
            x.shape()
        )));
    }
    if x.data().is_empty() {
        return Err(Error::InvalidArgument("empty reconstruction".into()));
    }
    let sse: f64 = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / x.data().len() as f64)
}

/// Row-wise argmax; ties go to the lowest component index.
pub fn assign_clusters(gamma: &Memberships) -> Vec<usize> {
    let g = &gamma.gamma;
    (0..g.rows())
        .map(|i| {
            let row = g.row(i);
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn cluster_sizes(labels: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &l in labels {
        if l >= sizes.len() {
            sizes.resize(l + 1, 0);
        }
        sizes[l] += 1;
    }
    sizes
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette with Euclidean distance. Samples in singleton clusters
/// score 0, as do samples with `a = b = 0`. Per-sample sums run in index
/// order, so the result does not depend on thread scheduling.
pub fn silhouette_score(z: &Matrix, labels: &[usize]) -> Result<f64> {
    let n = z.rows();
    if labels.len() != n {
        return Err(dim_err(format!("{} labels for {n} samples", labels.len())));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let sizes = cluster_sizes(labels, k);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::InvalidArgument("no clustering to evaluate: fewer than 2 non-empty clusters".into()));
    }
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            let zi = z.row(i);
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += distance(zi, z.row(j));
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// Per-sample energy under fixed mixture parameters.
pub fn energy_score_samples(params: &MixtureParams, z: &Matrix) -> Result<Vec<f64>> {
    if z.cols() != params.dim() {
        return Err(dim_err(format!(
            "mixture has dimension {}, samples have {}",
            params.dim(),
            z.cols()
        )));
    }
    let fm = params.factorize()?;
    (0..z.rows()).into_par_iter().map(|i| fm.energy(z.row(i))).collect()
}

/// One cell of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub axis: String,
    pub axis_value: usize,
    pub metric: String,
    pub value: Option<f64>,
    /// `ok`, `collapsed`, or `error: …`.
    pub status: String,
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "axis", "axis_value", "metric", "value", "status"])?;
    for r in rows {
        let value = r.value.map(|v| format!("{v:e}")).unwrap_or_default();
        w.write_record([
            r.model.as_str(),
            r.axis.as_str(),
            &r.axis_value.to_string(),
            r.metric.as_str(),
            &value,
            r.status.as_str(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(sweep_to_csv(rows)?.as_bytes())?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
enum Axis {
    LatentDim,
    Components,
}

fn run_sweep(cfg: &RunConfig, data: &PreparedData, models: &[String], values: &[usize], axis: Axis) -> Result<Vec<SweepRow>> {
    if models.is_empty() {
        return Err(Error::Config("sweep needs at least one model".into()));
    }
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one axis value".into()));
    }
    let cells: Vec<(String, usize)> = models
        .iter()
        .flat_map(|m| values.iter().map(move |v| (m.clone(), *v)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|(model, v)| {
            let mut c = cfg.clone();
            c.model.kind = model.clone();
            let (axis_name, metric) = match axis {
                Axis::LatentDim => {
                    c.model.latent_dim = *v;
                    ("latent_dim", "reconstruction_mse")
                }
                Axis::Components => {
                    c.model.n_components = *v;
                    ("n_components", "silhouette")
                }
            };
            let outcome = run_pipeline(&c, data).map(|run| run.test_metrics);
            let (value, status) = match (axis, outcome) {
                (Axis::LatentDim, Ok(m)) => (Some(m.reconstruction_mse), "ok".to_string()),
                (Axis::Components, Ok(m)) => match m.silhouette {
                    Some(s) => (Some(s), "ok".to_string()),
                    None => (None, "collapsed".to_string()),
                },
                (_, Err(e)) => {
                    log::warn!("sweep cell {model} {axis_name}={v} failed: {e}");
                    (None, format!("error: {e}"))
                }
            };
            SweepRow {
                model: model.clone(),
                axis: axis_name.to_string(),
                axis_value: *v,
                metric: metric.to_string(),
                value,
                status,
            }
        })
        .collect();
    Ok(rows)
}

/// Test-split reconstruction MSE for every (model, latent dim) cell.
pub fn sweep_latent_dims(cfg: &RunConfig, data: &PreparedData, models: &[String], dims: &[usize]) -> Result<Vec<SweepRow>> {
    if dims.contains(&0) {
        return Err(Error::Config("latent dims must be ≥ 1".into()));
    }
    run_sweep(cfg, data, models, dims, Axis::LatentDim)
}

/// Test-split silhouette for every (model, component count) cell; cells with
/// fewer than two populated clusters are marked `collapsed`.
pub fn sweep_components(cfg: &RunConfig, data: &PreparedData, models: &[String], ks: &[usize]) -> Result<Vec<SweepRow>> {
    if ks.iter().any(|&k| k < 2) {
        return Err(Error::Config("component counts must be ≥ 2".into()));
    }
    run_sweep(cfg, data, models, ks, Axis::Components)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn brute_silhouette(z: &Matrix, labels: &[usize]) -> f64 {
        let n = z.rows();
        let k = labels.iter().max().unwrap() + 1;
        let mut total = 0.0;
        for i in 0..n {
            let own: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if own.is_empty() {
                continue;
            }
            let a = own.iter().map(|&j| distance(z.row(i), z.row(j))).sum::<f64>() / own.len() as f64;
            let mut b = f64::INFINITY;
            for c in 0..k {
                if c == labels[i] {
                    continue;
                }
                let other: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
                if other.is_empty() {
                    continue;
                }
                let m = other.iter().map(|&j| distance(z.row(i), z.row(j))).sum::<f64>() / other.len() as f64;
                b = b.min(m);
            }
            if a.max(b) > 0.0 {
                total += (b - a) / a.max(b);
            }
        }
        total / n as f64
    }

    #[test]
    fn mse_examples() {
        let x = Matrix::from_fn(4, 25, |i, j| (i + j) as f64);
        assert_eq!(reconstruction_mse_metric(&x, &x).unwrap(), 0.0);
        let mut y = x.clone();
        y.data_mut()[17] += 2.0;
        assert!((reconstruction_mse_metric(&x, &y).unwrap() - 0.04).abs() < 1e-15);
        assert!(reconstruction_mse_metric(&x, &Matrix::zeros(4, 24)).is_err());
    }

    #[test]
    fn zero_prediction_mse_is_unit_on_standardized_data() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::from_fn(10_000, 13, |_, _| r.sample(StandardNormal));
        let m = reconstruction_mse_metric(&x, &Matrix::zeros(10_000, 13)).unwrap();
        assert!((m - 1.0).abs() < 0.02, "{m}");
    }

    #[test]
    fn argmax_with_tie_rule() {
        let g = Memberships {
            gamma: Matrix::from_rows(&[vec![0.9, 0.1], vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap(),
        };
        assert_eq!(assign_clusters(&g), vec![0, 0, 1]);
    }

    #[test]
    fn silhouette_hand_example() {
        let z = Matrix::new(4, 1, vec![0.0, 0.1, 10.0, 10.1]).unwrap();
        let s = silhouette_score(&z, &[0, 0, 1, 1]).unwrap();
        assert!((s - 0.99).abs() < 1e-4, "{s}");
    }

    #[test]
    fn silhouette_degenerate_cases() {
        let z = Matrix::zeros(4, 2);
        assert_eq!(silhouette_score(&z, &[0, 0, 1, 1]).unwrap(), 0.0);
        let err = silhouette_score(&z, &[1, 1, 1, 1]).unwrap_err().to_string();
        assert!(err.contains("no clustering to evaluate"));
        let z = Matrix::new(3, 1, vec![0.0, 1.0, 5.0]).unwrap();
        assert_eq!(
            silhouette_score(&z, &[0, 0, 1]).unwrap(),
            brute_silhouette(&z, &[0, 0, 1])
        );
    }

    #[test]
    fn silhouette_of_random_labels_is_near_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let z = Matrix::from_fn(500, 3, |_, _| r.sample(StandardNormal));
        let labels: Vec<usize> = (0..500).map(|_| r.random_range(0..2)).collect();
        assert!(silhouette_score(&z, &labels).unwrap().abs() < 0.05);
    }

    #[test]
    fn energy_scores_match_single_calls_and_rank_outliers() {
        let p = MixtureParams {
            weights: vec![1.0],
            means: vec![vec![0.0, 0.0]],
            covariances: vec![Matrix::identity(2)],
            degenerate: vec![false],
        };
        let z = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0, 0.0]]).unwrap();
        let e = energy_score_samples(&p, &z).unwrap();
        assert_eq!(e[0], e[1]);
        assert!(e[2] > e[0]);
        for i in 0..3 {
            assert_eq!(e[i], crate::mixture::sample_energy(&p, z.row(i)).unwrap());
        }
    }

    #[test]
    fn sweep_csv_has_header_and_markers() {
        let rows = vec![
            SweepRow {
                model: "pca_gmm".into(),
                axis: "n_components".into(),
                axis_value: 3,
                metric: "silhouette".into(),
                value: None,
                status: "collapsed".into(),
            },
            SweepRow {
                model: "pca_gmm".into(),
                axis: "n_components".into(),
                axis_value: 2,
                metric: "silhouette".into(),
                value: Some(0.25),
                status: "ok".into(),
            },
        ];
        let s = sweep_to_csv(&rows).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "model,axis,axis_value,metric,value,status");
        assert_eq!(lines[1], "pca_gmm,n_components,3,silhouette,,collapsed");
        assert_eq!(lines[2], "pca_gmm,n_components,2,silhouette,2.5e-1,ok");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn silhouette_equals_brute_force(seed in 0u64..10_000, n in 3usize..60, k in 2usize..5) {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let z = Matrix::from_fn(n, 3, |_, _| r.random_range(-2.0..2.0));
                let mut labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
                labels[0] = 0;
                labels[1] = 1;
                prop_assert_eq!(silhouette_score(&z, &labels).unwrap(), brute_silhouette(&z, &labels));
            }

            #[test]
            fn mse_is_permutation_invariant(seed in 0u64..10_000) {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let x = Matrix::from_fn(6, 4, |_, _| r.random_range(-1.0..1.0));
                let y = Matrix::from_fn(6, 4, |_, _| r.random_range(-1.0..1.0));
                let perm = [3, 1, 5, 0, 2, 4];
                let a = reconstruction_mse_metric(&x, &y).unwrap();
                let b = reconstruction_mse_metric(&x.select_rows(&perm), &y.select_rows(&perm)).unwrap();
                prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            }

            #[test]
            fn labels_follow_column_permutation(seed in 0u64..10_000) {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let raw = Matrix::from_fn(8, 3, |_, _| r.random_range(0.0..1.0));
                let g = Matrix::from_fn(8, 3, |i, j| raw.get(i, j) / raw.row(i).iter().sum::<f64>());
                let perm = [2, 0, 1];
                let gp = Matrix::from_fn(8, 3, |i, j| g.get(i, perm[j]));
                let a = assign_clusters(&Memberships { gamma: g });
                let b = assign_clusters(&Memberships { gamma: gp });
                for (la, lb) in a.iter().zip(&b) {
                    prop_assert_eq!(perm[*lb], *la);
                }
            }

            #[test]
            fn energy_order_ignores_component_order(seed in 0u64..10_000) {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let p = MixtureParams {
                    weights: vec![0.3, 0.7],
                    means: vec![vec![r.random_range(-2.0..2.0), 0.0], vec![1.0, r.random_range(-2.0..2.0)]],
                    covariances: vec![Matrix::identity(2), Matrix::identity(2).scale(2.0)],
                    degenerate: vec![false, false],
                };
                let q = MixtureParams {
                    weights: vec![0.7, 0.3],
                    means: vec![p.means[1].clone(), p.means[0].clone()],
                    covariances: vec![p.covariances[1].clone(), p.covariances[0].clone()],
                    degenerate: vec![false, false],
                };
                let z = Matrix::from_fn(10, 2, |_, _| r.random_range(-4.0..4.0));
                let a = energy_score_samples(&p, &z).unwrap();
                let b = energy_score_samples(&q, &z).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }
        }
    }
}
