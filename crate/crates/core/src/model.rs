//! Two-view encoder/decoder network and its training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, ParamId, Tape, Var};
use crate::covparam::{
    materialize_c, materialize_on_tape, validate_sigma_c, CrossCovKind, CrossCovParam, SigmaValidity,
    DEFAULT_ALPHA, DEFAULT_SIGN_PARAM,
};
use crate::data::{ViewPairDataset, HALF};
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{Activation, Mlp, ParamStore};
use crate::optim::{adam_step, AdamState};
use crate::prior::{beta_at, joint_kl_rows, BetaSchedule, GaussianPosterior};
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 20;
pub const HIDDEN_WIDTH: usize = 512;

/// Rows per forward pass when running a model over a whole split.
const EVAL_CHUNK: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    One,
    Two,
}

impl View {
    pub fn index(self) -> usize {
        match self {
            View::One => 0,
            View::Two => 1,
        }
    }

    pub fn other(self) -> View {
        match self {
            View::One => View::Two,
            View::Two => View::One,
        }
    }

    pub fn number(self) -> usize {
        self.index() + 1
    }
}

/// Layer widths. The default is two hidden layers of 512 and a 20-dimensional
/// latent space per view over two 392-pixel half images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub view_widths: [usize; 2],
    pub hidden: Vec<usize>,
    pub latent: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            view_widths: [HALF, HALF],
            hidden: vec![HIDDEN_WIDTH, HIDDEN_WIDTH],
            latent: LATENT_DIM,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.view_widths.contains(&0) || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub trunk: Mlp,
    pub mean: Mlp,
    pub log_var: Mlp,
}

#[derive(Clone, Debug)]
pub struct JpvaeModel {
    pub arch: Architecture,
    pub store: ParamStore,
    pub encoders: [Encoder; 2],
    pub decoders: [Mlp; 2],
    pub cross_cov: CrossCovParam<ParamId>,
}

/// Graph handles produced by [`elbo_loss`]. Row terms are `B x 1`.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub loss: Var,
    pub recon1: Var,
    pub recon2: Var,
    pub kl: Var,
}

impl JpvaeModel {
    pub fn new(arch: Architecture, cross_cov: &CrossCovParam<Tensor>, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        cross_cov.validate(arch.latent)?;
        let mut store = ParamStore::new();
        let widths = |c: usize| {
            let mut w = vec![c];
            w.extend(&arch.hidden);
            w
        };
        let last_hidden = *arch.hidden.last().unwrap_or(&0);
        let encoder = |store: &mut ParamStore, v: usize, rng: &mut _| {
            let trunk_w = widths(arch.view_widths[v]);
            let (trunk, head_in) = if arch.hidden.is_empty() {
                (Mlp { layers: vec![], activations: vec![] }, arch.view_widths[v])
            } else {
                (Mlp::new(store, &format!("encoder{}.trunk", v + 1), &trunk_w, Activation::Relu, rng), last_hidden)
            };
            Encoder {
                trunk,
                mean: Mlp::new(store, &format!("encoder{}.mean", v + 1), &[head_in, arch.latent], Activation::Identity, rng),
                log_var: Mlp::new(store, &format!("encoder{}.log_var", v + 1), &[head_in, arch.latent], Activation::Identity, rng),
            }
        };
        let e1 = encoder(&mut store, 0, rng);
        let e2 = encoder(&mut store, 1, rng);
        let decoder = |store: &mut ParamStore, v: usize, rng: &mut _| {
            let mut w = vec![arch.latent];
            w.extend(&arch.hidden);
            w.push(arch.view_widths[v]);
            Mlp::new(store, &format!("decoder{}", v + 1), &w, Activation::Identity, rng)
        };
        let d1 = decoder(&mut store, 0, rng);
        let d2 = decoder(&mut store, 1, rng);
        let cross_cov = cross_cov.register(&mut store);
        Ok(JpvaeModel {
            arch,
            store,
            encoders: [e1, e2],
            decoders: [d1, d2],
            cross_cov,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent
    }

    pub fn variant(&self) -> CrossCovKind {
        self.cross_cov.kind()
    }

    /// Parameter ids belonging to one view's encoder and decoder.
    pub fn view_param_ids(&self, view: View) -> Vec<ParamId> {
        let e = &self.encoders[view.index()];
        let mut ids = e.trunk.param_ids();
        ids.extend(e.mean.param_ids());
        ids.extend(e.log_var.param_ids());
        ids.extend(self.decoders[view.index()].param_ids());
        ids
    }

    /// Posterior mean and log-variance for a `B x c_i` batch.
    pub fn encode_vars(&self, tape: &mut Tape, bound: &[Var], x: Var, view: View) -> Result<(Var, Var)> {
        let width = self.arch.view_widths[view.index()];
        if tape.value(x).cols() != width {
            return Err(Error::dim(format!(
                "view {} input has width {}, expected {width}",
                view.number(),
                tape.value(x).cols()
            )));
        }
        let e = &self.encoders[view.index()];
        let h = if e.trunk.layers.is_empty() { x } else { e.trunk.forward(tape, bound, x)? };
        Ok((e.mean.forward(tape, bound, h)?, e.log_var.forward(tape, bound, h)?))
    }

    /// Per-pixel Bernoulli logits for a `B x n` batch of latents.
    pub fn decode_vars(&self, tape: &mut Tape, bound: &[Var], z: Var, view: View) -> Result<Var> {
        if tape.value(z).cols() != self.arch.latent {
            return Err(Error::dim(format!(
                "latent batch has width {}, expected {}",
                tape.value(z).cols(),
                self.arch.latent
            )));
        }
        self.decoders[view.index()].forward(tape, bound, z)
    }

    /// Posterior parameters for a single example.
    pub fn encode(&self, x: &[f64], view: View) -> Result<GaussianPosterior> {
        let (m, lv) = self.encode_batch(&Tensor::row(x), view)?;
        GaussianPosterior::new(m.into_data(), lv.into_data())
    }

    /// `(means, log_vars)` for every row of `x`, evaluated in chunks.
    pub fn encode_batch(&self, x: &Tensor, view: View) -> Result<(Tensor, Tensor)> {
        let mut means = Vec::new();
        let mut log_vars = Vec::new();
        for start in (0..x.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(x.rows());
            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape);
            let xv = tape.constant(x.slice_rows(start, end));
            let (m, lv) = self.encode_vars(&mut tape, &bound, xv, view)?;
            means.push(tape.value(m).clone());
            log_vars.push(tape.value(lv).clone());
        }
        if means.is_empty() {
            let n = self.arch.latent;
            return Ok((Tensor::zeros(0, n), Tensor::zeros(0, n)));
        }
        Ok((Tensor::vstack(&means)?, Tensor::vstack(&log_vars)?))
    }

    /// Posterior means of both views over a dataset, as `(N x n, N x n)`.
    pub fn posterior_means(&self, data: &ViewPairDataset) -> Result<(Tensor, Tensor)> {
        let mut z1 = Vec::new();
        let mut z2 = Vec::new();
        for start in (0..data.len()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(data.len());
            z1.push(self.encode_batch(&data.view1.range_tensor(start, end), View::One)?.0);
            z2.push(self.encode_batch(&data.view2.range_tensor(start, end), View::Two)?.0);
        }
        if z1.is_empty() {
            let n = self.arch.latent;
            return Ok((Tensor::zeros(0, n), Tensor::zeros(0, n)));
        }
        Ok((Tensor::vstack(&z1)?, Tensor::vstack(&z2)?))
    }

    pub fn decode_logits(&self, z: &Tensor, view: View) -> Result<Tensor> {
        let mut out = Vec::new();
        for start in (0..z.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(z.rows());
            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape);
            let zv = tape.constant(z.slice_rows(start, end));
            let l = self.decode_vars(&mut tape, &bound, zv, view)?;
            out.push(tape.value(l).clone());
        }
        if out.is_empty() {
            return Ok(Tensor::zeros(0, self.arch.view_widths[view.index()]));
        }
        Tensor::vstack(&out)
    }

    /// Per-pixel Bernoulli probabilities.
    pub fn decode_probs(&self, z: &Tensor, view: View) -> Result<Tensor> {
        Ok(self.decode_logits(z, view)?.map(sigmoid))
    }

    /// Reconstruction `x̃ᵢ`: decode the posterior mean of the same view.
    pub fn reconstruct(&self, x: &Tensor, view: View) -> Result<Tensor> {
        let (m, _) = self.encode_batch(x, view)?;
        self.decode_probs(&m, view)
    }

    /// The current `n₂ x n₁` cross-covariance block.
    pub fn cross_cov_matrix(&self) -> Result<Tensor> {
        let n = self.arch.latent;
        materialize_c(&self.cross_cov.values(&self.store), n, n)
    }

    pub fn largest_singular_value(&self) -> Result<f64> {
        Ok(linalg::singular_values(&self.cross_cov_matrix()?)?
            .first()
            .copied()
            .unwrap_or(0.0))
    }

    /// Errors unless `Σ_C` is positive definite.
    pub fn check_prior(&self) -> Result<()> {
        match validate_sigma_c(&self.cross_cov_matrix()?)? {
            SigmaValidity::PositiveDefinite => Ok(()),
            other => Err(Error::numeric(format!("joint prior is no longer valid: {other:?}"))),
        }
    }
}

/// `z = μ + exp(½ log σ²) ⊙ ε`; `eps` is a constant so no gradient reaches it.
pub fn reparameterize_vars(tape: &mut Tape, mean: Var, log_var: Var, eps: Tensor) -> Result<Var> {
    if eps.shape() != tape.value(mean).shape() {
        return Err(Error::dim("noise shape differs from the posterior mean"));
    }
    let half = tape.scale(log_var, 0.5)?;
    let std = tape.exp(half)?;
    let e = tape.constant(eps);
    let noise = tape.mul(std, e)?;
    tape.add(mean, noise)
}

pub fn reparameterize(post: &GaussianPosterior, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != post.dim() {
        return Err(Error::dim(format!("noise has length {}, posterior {}", eps.len(), post.dim())));
    }
    Ok(post
        .mean
        .iter()
        .zip(&post.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Negated objective averaged over the batch:
/// `mean_b [BCE(x₁, x̂₁) + BCE(x₂, x̂₂) + β KL(q₁ q₂ || N(0, Σ_C))]`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss(
    tape: &mut Tape,
    model: &JpvaeModel,
    bound: &[Var],
    x1: &Tensor,
    x2: &Tensor,
    eps1: Tensor,
    eps2: Tensor,
    beta: f64,
) -> Result<ElboTerms> {
    if x1.rows() != x2.rows() {
        return Err(Error::dim("view batches have different row counts"));
    }
    let x1v = tape.constant(x1.clone());
    let x2v = tape.constant(x2.clone());
    let (m1, lv1) = model.encode_vars(tape, bound, x1v, View::One)?;
    let (m2, lv2) = model.encode_vars(tape, bound, x2v, View::Two)?;
    let z1 = reparameterize_vars(tape, m1, lv1, eps1)?;
    let z2 = reparameterize_vars(tape, m2, lv2, eps2)?;
    let l1 = model.decode_vars(tape, bound, z1, View::One)?;
    let l2 = model.decode_vars(tape, bound, z2, View::Two)?;
    let recon1 = tape.bce_with_logits(l1, x1v)?;
    let recon2 = tape.bce_with_logits(l2, x2v)?;
    let coupling = materialize_on_tape(tape, &model.cross_cov.bind(bound), model.arch.latent)?;
    let kl = joint_kl_rows(tape, m1, lv1, m2, lv2, &coupling)?;
    let recon = tape.add(recon1, recon2)?;
    let weighted = tape.scale(kl, beta)?;
    let total = tape.add(recon, weighted)?;
    let loss = tape.mean(total)?;
    Ok(ElboTerms {
        loss,
        recon1,
        recon2,
        kl,
    })
}

fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Number of annealing cycles over the whole run.
    pub cycles: usize,
    pub ramp_fraction: f64,
    pub seed: u64,
    pub variant: CrossCovKind,
    pub alpha: f64,
    pub sign_param: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.001,
            cycles: 30,
            ramp_fraction: 0.5,
            seed: 0,
            variant: CrossCovKind::ScaledOrthogonal,
            alpha: DEFAULT_ALPHA,
            sign_param: DEFAULT_SIGN_PARAM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.cycles == 0 {
            return Err(Error::Config("epochs, batch size and cycles must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return Err(Error::Config(format!("ramp fraction {} outside (0, 1]", self.ramp_fraction)));
        }
        if !self.sign_param.is_finite() {
            return Err(Error::Config("sign parameter must be finite".into()));
        }
        if self.variant == CrossCovKind::ScaledOrthogonal {
            crate::covparam::check_alpha(self.alpha)?;
        }
        Ok(())
    }

    pub fn initial_cross_cov(&self, n: usize) -> Result<CrossCovParam<Tensor>> {
        CrossCovParam::new(self.variant, n, self.alpha, self.sign_param)
    }
}

/// Per-example averages over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon1: f64,
    pub recon2: f64,
    pub kl: f64,
    /// Mean β over the epoch's steps.
    pub beta: f64,
    pub loss: f64,
    pub max_singular_value: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: JpvaeModel,
    pub log: Vec<EpochMetrics>,
}

/// Mean loss terms of `model` over `data` with one fixed noise draw per example.
pub fn evaluate_elbo(model: &JpvaeModel, data: &ViewPairDataset, beta: f64, seed: u64) -> Result<EpochMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.arch.latent;
    let (mut r1, mut r2, mut kl) = (0.0, 0.0, 0.0);
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let b = end - start;
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let terms = elbo_loss(
            &mut tape,
            model,
            &bound,
            &data.view1.range_tensor(start, end),
            &data.view2.range_tensor(start, end),
            normal_tensor(&mut rng, b, n),
            normal_tensor(&mut rng, b, n),
            beta,
        )?;
        r1 += tape.value(terms.recon1).sum();
        r2 += tape.value(terms.recon2).sum();
        kl += tape.value(terms.kl).sum();
    }
    let count = data.len().max(1) as f64;
    let (r1, r2, kl) = (r1 / count, r2 / count, kl / count);
    Ok(EpochMetrics {
        epoch: 0,
        recon1: r1,
        recon2: r2,
        kl,
        beta,
        loss: r1 + r2 + beta * kl,
        max_singular_value: model.largest_singular_value()?,
    })
}

pub fn train(data: &ViewPairDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, cfg, Architecture::default(), |_, _| Ok(()))
}

/// Trains a fresh model. `on_epoch` runs after every epoch with the updated
/// model, so a caller persisting it always holds the last good state when a
/// later step diverges.
pub fn train_with(
    data: &ViewPairDataset,
    cfg: &TrainConfig,
    arch: Architecture,
    mut on_epoch: impl FnMut(&JpvaeModel, &EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if [data.view1.cols(), data.view2.cols()] != arch.view_widths {
        return Err(Error::dim(format!(
            "dataset widths {}/{} do not match the architecture {:?}",
            data.view1.cols(),
            data.view2.cols(),
            arch.view_widths
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = arch.latent;
    let mut model = JpvaeModel::new(arch, &cfg.initial_cross_cov(n)?, &mut rng)?;
    let mut adam = AdamState::new(&model.store, cfg.learning_rate);

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let schedule = BetaSchedule::new(total, cfg.cycles, cfg.ramp_fraction)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut r1, mut r2, mut kl, mut loss, mut beta_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let beta = beta_at(&schedule, step)?;
            let x1 = data.view1.rows_tensor(batch);
            let x2 = data.view2.rows_tensor(batch);
            let eps1 = normal_tensor(&mut rng, batch.len(), n);
            let eps2 = normal_tensor(&mut rng, batch.len(), n);
            let grads = {
                let mut tape = Tape::new();
                let bound = model.store.bind(&mut tape);
                let terms = elbo_loss(&mut tape, &model, &bound, &x1, &x2, eps1, eps2, beta)
                    .map_err(|e| diverged(epoch, step, e))?;
                r1 += tape.value(terms.recon1).sum();
                r2 += tape.value(terms.recon2).sum();
                kl += tape.value(terms.kl).sum();
                loss += tape.value(terms.loss).item() * batch.len() as f64;
                tape.backward(terms.loss).map_err(|e| diverged(epoch, step, e))?
            };
            adam_step(&mut model.store, &grads, &mut adam).map_err(|e| diverged(epoch, step, e))?;
            beta_sum += beta;
            step += 1;
        }
        model.check_prior()?;
        let count = data.len() as f64;
        let metrics = EpochMetrics {
            epoch,
            recon1: r1 / count,
            recon2: r2 / count,
            kl: kl / count,
            beta: beta_sum / steps_per_epoch as f64,
            loss: loss / count,
            max_singular_value: model.largest_singular_value()?,
        };
        if !(metrics.max_singular_value < 1.0) {
            return Err(Error::numeric(format!(
                "largest singular value of C reached {} in epoch {epoch}",
                metrics.max_singular_value
            )));
        }
        on_epoch(&model, &metrics)?;
        log.push(metrics);
    }
    Ok(TrainOutcome { model, log })
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!(
            "training diverged in epoch {epoch} at step {step}: {m}; the last good state is the end of epoch {}",
            epoch - 1
        )),
        other => other,
    }
}
