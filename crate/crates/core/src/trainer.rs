//! Joint objective, its reverse-mode gradient, the minibatch optimizer and a
//! finite-difference gradient checker.
//!
//! The objective for a batch of `N` windows is
//! `J = mean_i L(X_i, X̂_i) + λ₁ · mean_i E(z_i) + λ₂ · P(Σ̂)`, where the mixture
//! parameters are the membership-weighted moments of the same batch.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{features_backward, window_loss, Activation, Dropout, MlpTrace, N_RECON_FEATURES};
use crate::config::RunConfig;
use crate::error::{dim_err, Error, Result};
use crate::mixture::{
    covariance_penalty, fit_mixture_params, mixture_objective_backward, FactorizedMixture, Memberships,
    MixtureParams,
};
use crate::model::{assemble_latent_rows, DagmmModel};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// λ₁, weight of the mean sample energy.
    pub lambda_energy: f64,
    /// λ₂, weight of the covariance penalty.
    pub lambda_cov: f64,
    pub n_components: usize,
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_energy: 0.1,
            lambda_cov: 0.005,
            n_components: 2,
            latent_dim: 10,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 200,
            seed: 1234,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl Hyperparams {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let t = &cfg.train;
        Self {
            lambda_energy: t.lambda_energy,
            lambda_cov: t.lambda_cov,
            n_components: cfg.model.n_components,
            latent_dim: cfg.model.latent_dim,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: cfg.seeds.train,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_energy >= 0.0 && self.lambda_cov >= 0.0) {
            return Err(Error::InvalidArgument("λ₁ and λ₂ must be ≥ 0".into()));
        }
        if self.n_components == 0 || self.latent_dim == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "component count, latent dim and batch size must be ≥ 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        Ok(())
    }

    fn uses_mixture(&self) -> bool {
        self.lambda_energy != 0.0 || self.lambda_cov != 0.0
    }
}

/// Flattened windows plus their encoder preprocessing.
#[derive(Clone, Debug)]
pub struct Batch {
    pub windows: Matrix,
    pub prepared: Matrix,
}

impl Batch {
    pub fn new(model: &DagmmModel, windows: Matrix) -> Result<Self> {
        let prepared = model.prepare(&windows)?;
        Ok(Self { windows, prepared })
    }

    pub fn len(&self) -> usize {
        self.windows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.rows() == 0
    }

    fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            windows: self.windows.select_rows(idx),
            prepared: self.prepared.select_rows(idx),
        }
    }
}

/// Weighted terms of the objective; `total = reconstruction + energy + penalty`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub reconstruction: f64,
    /// `λ₁ · mean E`.
    pub energy: f64,
    /// `λ₂ · P`.
    pub penalty: f64,
    /// Unweighted mean energy; 0 when the mixture is not evaluated (λ₁ = λ₂ = 0).
    pub raw_energy: f64,
    /// Unweighted penalty; 0 when the mixture is not evaluated.
    pub raw_penalty: f64,
    pub degenerate: Vec<usize>,
}

struct ForwardCache {
    dec_trace: MlpTrace,
    latent: Matrix,
    est_trace: MlpTrace,
    mixture: Option<(MixtureParams, FactorizedMixture)>,
    terms: LossTerms,
}

fn forward(model: &DagmmModel, batch: &Batch, hp: &Hyperparams, dropout: &mut Dropout<'_>) -> Result<ForwardCache> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len();
    let codes = model.encoder.encode(&batch.prepared)?;
    let dec_trace = model.decoder.forward(&codes, &mut Dropout::Off)?;
    let x_hat = &dec_trace.output;
    let latent = assemble_latent_rows(&codes, &batch.windows, x_hat);
    let est_trace = model.estimation.forward(&latent, dropout)?;

    let reconstruction = (0..n)
        .map(|i| window_loss(batch.windows.row(i), x_hat.row(i), model.window_len))
        .sum::<f64>()
        / n as f64;

    let mut terms = LossTerms {
        total: reconstruction,
        reconstruction,
        energy: 0.0,
        penalty: 0.0,
        raw_energy: 0.0,
        raw_penalty: 0.0,
        degenerate: Vec::new(),
    };
    let mut mixture = None;
    if hp.uses_mixture() {
        let gamma = Memberships {
            gamma: est_trace.output.clone(),
        };
        let params = fit_mixture_params(&gamma, &latent)?;
        let factored = params.factorize()?;
        let mut energy_sum = 0.0;
        for i in 0..n {
            energy_sum += factored.energy(latent.row(i))?;
        }
        terms.raw_energy = energy_sum / n as f64;
        terms.raw_penalty = covariance_penalty(&params)?;
        terms.energy = hp.lambda_energy * terms.raw_energy;
        terms.penalty = hp.lambda_cov * terms.raw_penalty;
        terms.total = reconstruction + terms.energy + terms.penalty;
        terms.degenerate = params.degenerate_components();
        mixture = Some((params, factored));
    }
    if !terms.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "objective (reconstruction {}, energy {}, penalty {})",
            terms.reconstruction, terms.raw_energy, terms.raw_penalty
        )));
    }
    Ok(ForwardCache {
        dec_trace,
        latent,
        est_trace,
        mixture,
        terms,
    })
}

/// Value of the joint objective on one batch.
pub fn joint_loss(model: &DagmmModel, batch: &Batch, hp: &Hyperparams, dropout: &mut Dropout<'_>) -> Result<LossTerms> {
    Ok(forward(model, batch, hp, dropout)?.terms)
}

/// Gradients aligned with [`DagmmModel::params`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub names: Vec<String>,
    pub blocks: Vec<Matrix>,
}

/// Objective value and its exact gradient with respect to every trainable
/// block. Fixed reservoir weights are not trainable and get no entry.
pub fn backward(
    model: &DagmmModel,
    batch: &Batch,
    hp: &Hyperparams,
    dropout: &mut Dropout<'_>,
) -> Result<(LossTerms, Gradients)> {
    let cache = forward(model, batch, hp, dropout)?;
    let n = batch.len();
    let d = model.latent_dim();
    let k = model.n_components();

    let (mut grad_latent, grad_gamma) = match &cache.mixture {
        Some((params, factored)) => {
            let g = mixture_objective_backward(
                &cache.est_trace.output,
                &cache.latent,
                params,
                factored,
                hp.lambda_energy / n as f64,
                hp.lambda_cov,
            )?;
            (g.z, g.gamma)
        }
        None => (Matrix::zeros(n, d + N_RECON_FEATURES), Matrix::zeros(n, k)),
    };
    let est_grads = model.estimation.net.backward(&cache.est_trace, &grad_gamma)?;
    grad_latent.axpy(1.0, &est_grads.input);

    let x_hat = &cache.dec_trace.output;
    let scale = 2.0 / (n * model.window_len) as f64;
    let mut grad_xhat = Matrix::zeros(n, model.input_width());
    for i in 0..n {
        let x = batch.windows.row(i);
        let xh = x_hat.row(i);
        let gl = grad_latent.row(i);
        let g_feat = [gl[d], gl[d + 1], gl[d + 2]];
        let out = grad_xhat.row_mut(i);
        for ((o, u), v) in out.iter_mut().zip(x).zip(xh) {
            *o = scale * (v - u);
        }
        features_backward(x, xh, g_feat, out);
    }
    let dec_grads = model.decoder.backward(&cache.dec_trace, &grad_xhat)?;
    let mut grad_codes = dec_grads.input;
    for i in 0..n {
        for (g, l) in grad_codes.row_mut(i).iter_mut().zip(&grad_latent.row(i)[..d]) {
            *g += l;
        }
    }
    let mut blocks = model.encoder.backward(&batch.prepared, &grad_codes)?;
    blocks.extend(dec_grads.params);
    blocks.extend(est_grads.params);
    let names = model.param_names();
    for (name, g) in names.iter().zip(&blocks) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok((cache.terms, Gradients { names, blocks }))
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    fn new(model: &DagmmModel) -> Self {
        let zeros: Vec<Matrix> = model.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut DagmmModel, grads: &[Matrix], hp: &Hyperparams) {
        self.t += 1;
        let c1 = 1.0 - hp.beta1.powi(self.t);
        let c2 = 1.0 - hp.beta2.powi(self.t);
        for (((p, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
                *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
                *w -= hp.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + hp.adam_eps);
            }
        }
    }
}

/// Per-epoch averages of the batch terms, weighted by batch size.
/// Equality ignores `seconds`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub energy: f64,
    pub penalty: f64,
    pub raw_energy: f64,
    pub raw_penalty: f64,
    /// Components flagged degenerate in any batch of the epoch.
    pub degenerate: Vec<usize>,
    /// Wall-clock seconds; logged, never written to report files.
    #[serde(skip)]
    pub seconds: f64,
}

impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        self.epoch == o.epoch
            && self.total == o.total
            && self.reconstruction == o.reconstruction
            && self.energy == o.energy
            && self.penalty == o.penalty
            && self.raw_energy == o.raw_energy
            && self.raw_penalty == o.raw_penalty
            && self.degenerate == o.degenerate
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Degenerate components of the frozen mixture.
    pub frozen_degenerate: Vec<usize>,
}

impl TrainReport {
    /// One CSV record per epoch. Timing is left out so identical runs give
    /// identical files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,total,reconstruction,energy,penalty,raw_energy,raw_penalty,degenerate\n");
        for r in &self.epochs {
            let deg: Vec<String> = r.degenerate.iter().map(|k| k.to_string()).collect();
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{}\n",
                r.epoch,
                r.total,
                r.reconstruction,
                r.energy,
                r.penalty,
                r.raw_energy,
                r.raw_penalty,
                deg.join(";")
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Training aborted; carries the model as of the last finite step.
#[derive(Debug)]
pub struct FitError {
    pub error: Error,
    pub last_good: DagmmModel,
    pub report: TrainReport,
    pub epoch: usize,
}

impl fmt::Display for FitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training diverged in epoch {}: {}", self.epoch, self.error)
    }
}

impl std::error::Error for FitError {}

impl From<Box<FitError>> for Error {
    fn from(e: Box<FitError>) -> Error {
        e.error
    }
}

/// Batches of shuffled indices; a trailing batch of one sample is merged into
/// its predecessor because single-sample moments are degenerate.
fn batch_indices(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("checked");
        batches.last_mut().expect("checked").extend(last);
    }
    batches
}

/// Minibatch Adam on the joint objective, then freezes the mixture from an
/// evaluation-mode pass over all training windows.
pub fn fit(
    model: DagmmModel,
    windows: &Matrix,
    hp: &Hyperparams,
) -> std::result::Result<(DagmmModel, TrainReport), Box<FitError>> {
    let mut model = model;
    let mut report = TrainReport::default();
    let fail = |error: Error, model: DagmmModel, report: TrainReport, epoch: usize| {
        Box::new(FitError {
            error,
            last_good: model,
            report,
            epoch,
        })
    };
    if let Err(e) = hp.validate() {
        return Err(fail(e, model, report, 0));
    }
    if windows.rows() < 2 {
        return Err(fail(
            Error::InvalidArgument("training needs at least 2 windows".into()),
            model,
            report,
            0,
        ));
    }
    let all = match Batch::new(&model, windows.clone()) {
        Ok(b) => b,
        Err(e) => return Err(fail(e, model, report, 0)),
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hp.seed);
    dropout_rng.set_stream(1);
    let mut adam = Adam::new(&model);
    let mut order: Vec<usize> = (0..all.len()).collect();
    let n_total = all.len() as f64;

    for epoch in 1..=hp.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut rec = EpochRecord {
            epoch,
            total: 0.0,
            reconstruction: 0.0,
            energy: 0.0,
            penalty: 0.0,
            raw_energy: 0.0,
            raw_penalty: 0.0,
            degenerate: Vec::new(),
            seconds: 0.0,
        };
        for idx in batch_indices(&order, hp.batch_size) {
            let batch = all.select(&idx);
            let step = backward(&model, &batch, hp, &mut Dropout::Sample(&mut dropout_rng));
            let (terms, grads) = match step {
                Ok(v) => v,
                Err(e) => return Err(fail(e, model, report, epoch)),
            };
            let w = batch.len() as f64 / n_total;
            rec.total += w * terms.total;
            rec.reconstruction += w * terms.reconstruction;
            rec.energy += w * terms.energy;
            rec.penalty += w * terms.penalty;
            rec.raw_energy += w * terms.raw_energy;
            rec.raw_penalty += w * terms.raw_penalty;
            for k in terms.degenerate {
                if !rec.degenerate.contains(&k) {
                    rec.degenerate.push(k);
                }
            }
            adam.step(&mut model, &grads.blocks, hp);
        }
        rec.degenerate.sort_unstable();
        rec.seconds = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}/{}: total {:.6} (recon {:.6}, energy {:.6}, penalty {:.6}) in {:.2}s",
            hp.epochs,
            rec.total,
            rec.reconstruction,
            rec.energy,
            rec.penalty,
            rec.seconds
        );
        report.epochs.push(rec);
    }
    match freeze_mixture(&model, windows) {
        Ok(p) => {
            report.frozen_degenerate = p.degenerate_components();
            model.frozen = Some(p);
            Ok((model, report))
        }
        Err(e) => {
            let epoch = hp.epochs;
            Err(fail(e.in_stage("freeze mixture"), model, report, epoch))
        }
    }
}

/// Mixture moments from an evaluation-mode pass (dropout off) over `windows`.
pub fn freeze_mixture(model: &DagmmModel, windows: &Matrix) -> Result<MixtureParams> {
    let inf = model.infer(windows)?;
    fit_mixture_params(&Memberships { gamma: inf.gamma }, &inf.latent)
}

/// Replaces rectifier hidden layers of the decoder and estimation network by
/// the identity, leaving a model whose reconstruction path is linear in every
/// single trainable weight.
pub fn linearized(model: &DagmmModel) -> DagmmModel {
    let mut m = model.clone();
    for layer in m.decoder.layers.iter_mut().chain(m.estimation.net.layers.iter_mut()) {
        if layer.activation == Activation::Relu {
            layer.activation = Activation::Identity;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub samples_per_block: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Draw one set of dropout masks and reuse it for every evaluation;
    /// otherwise dropout is off.
    pub frozen_dropout: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples_per_block: 20,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            frozen_dropout: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Human-readable descriptions of entries over tolerance or evaluations that failed.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients against central differences on sampled
/// entries of every trainable block.
pub fn gradient_check(
    model: &DagmmModel,
    windows: &Matrix,
    hp: &Hyperparams,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if windows.rows() == 0 {
        return Err(dim_err("gradient check needs at least one window"));
    }
    let batch = Batch::new(model, windows.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let masks: Vec<Option<Matrix>> = if opts.frozen_dropout {
        forward(model, &batch, hp, &mut Dropout::Sample(&mut rng))?.est_trace.masks
    } else {
        vec![None; model.estimation.net.layers.len()]
    };
    let (_, grads) = backward(model, &batch, hp, &mut Dropout::Frozen(&masks))?;

    let mut probe = model.clone();
    let mut blocks = Vec::new();
    let mut failures = Vec::new();
    let mut overall: f64 = 0.0;
    for (b, (name, g)) in grads.names.iter().zip(&grads.blocks).enumerate() {
        let len = g.data().len();
        let mut picks: Vec<usize> = if len <= opts.samples_per_block {
            (0..len).collect()
        } else {
            index::sample(&mut rng, len, opts.samples_per_block).into_vec()
        };
        picks.sort_unstable();
        let mut worst: f64 = 0.0;
        for &idx in &picks {
            let orig = probe.params()[b].data()[idx];
            let eval = |v: f64, probe: &mut DagmmModel| {
                probe.params_mut()[b].data_mut()[idx] = v;
                joint_loss(probe, &Batch::new(probe, windows.clone())?, hp, &mut Dropout::Frozen(&masks))
                    .map(|t| t.total)
            };
            let up = eval(orig + opts.step, &mut probe);
            let down = eval(orig - opts.step, &mut probe);
            probe.params_mut()[b].data_mut()[idx] = orig;
            match (up, down) {
                (Ok(u), Ok(dn)) => {
                    let fd = (u - dn) / (2.0 * opts.step);
                    let an = g.data()[idx];
                    let err = relative_error(an, fd, opts.floor);
                    worst = worst.max(err);
                    if !(err <= opts.tolerance) {
                        failures.push(format!("{name}[{idx}]: analytic {an:e}, numeric {fd:e}, rel error {err:e}"));
                    }
                }
                (Err(e), _) | (_, Err(e)) => failures.push(format!("{name}[{idx}]: evaluation failed: {e}")),
            }
        }
        overall = overall.max(worst);
        blocks.push(BlockCheck {
            name: name.clone(),
            checked: picks.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport {
        blocks,
        max_rel_error: overall,
        tolerance: opts.tolerance,
        failures,
    })
}

/// Replaces every bias row with small uniform values. Zero biases put ReLU
/// units exactly on their kink whenever an input row is zero (a dead layer or
/// a fully dropped row), where finite differences are meaningless.
pub fn randomize_biases(model: &mut DagmmModel, seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(200));
    for p in model.params_mut() {
        if p.rows() == 1 {
            for v in p.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
}

/// A seeded gradient-check problem: 8 reservoir units (or 8 hidden units for
/// the trainable encoders), `T = 6`, `D = 3`, `d = 3`, `K = 2`, randomized
/// biases and four standard-normal windows.
pub fn tiny_problem(encoder_kind: &str, seed: u64) -> Result<(DagmmModel, Matrix, Hyperparams)> {
    use crate::encoder::{EncoderGeometry, EncoderRegistry, EncoderSettings};
    use crate::model::ModelSpec;
    use rand::Rng;
    use rand_distr::StandardNormal;

    let mut encoder = EncoderSettings::default();
    encoder.reservoir.size = 8;
    encoder.reservoir.seed = seed;
    encoder.mlp_hidden = vec![8, 8];
    encoder.rnn_hidden = 8;
    let spec = ModelSpec {
        encoder_kind: encoder_kind.to_string(),
        geometry: EncoderGeometry {
            window_len: 6,
            n_features: 3,
            latent_dim: 3,
        },
        encoder,
        decoder_hidden: vec![8, 8],
        estimation_hidden: vec![6, 4],
        n_components: 2,
        dropout: 0.5,
        seed,
    };
    let mut model = DagmmModel::build(&spec, &EncoderRegistry::default())?;
    randomize_biases(&mut model, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
    let windows = Matrix::from_fn(4, 18, |_, _| rng.sample(StandardNormal));
    let hp = Hyperparams {
        latent_dim: 3,
        n_components: 2,
        batch_size: 4,
        seed,
        ..Hyperparams::default()
    };
    Ok((model, windows, hp))
}
