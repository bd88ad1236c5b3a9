//! Cross-view imputation through the empirical joint distribution of the
//! two latent spaces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ViewPairDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{JpvaeModel, View};
use crate::tensor::Tensor;

/// Added to the diagonal of `Σ̂ⱼⱼ` before it is inverted.
pub const RIDGE: f64 = 1e-6;

/// Which latent value stands in for an encoded example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LatentSource {
    #[default]
    PosteriorMean,
    /// One reparameterized draw per example from a seeded generator.
    Sampled { seed: u64 },
}

/// Mean and covariance of the stacked latents `(z₁; z₂)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub n1: usize,
    pub n2: usize,
    pub mean: Vec<f64>,
    pub cov: Tensor,
}

impl LatentStats {
    pub fn new(n1: usize, n2: usize, mean: Vec<f64>, cov: Tensor) -> Result<Self> {
        let s = LatentStats { n1, n2, mean, cov };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n1 + self.n2;
        if self.mean.len() != k || self.cov.shape() != [k, k] {
            return Err(Error::dim(format!("latent statistics must be {k}-dimensional")));
        }
        if !self.cov.is_finite() || self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite latent statistics"));
        }
        if !linalg::is_symmetric(&self.cov, 1e-12 * self.cov.frobenius_norm().max(1.0)) {
            return Err(Error::Precondition("latent covariance is not symmetric".into()));
        }
        Ok(())
    }

    fn range(&self, v: View) -> (usize, usize) {
        match v {
            View::One => (0, self.n1),
            View::Two => (self.n1, self.n1 + self.n2),
        }
    }

    pub fn view_mean(&self, v: View) -> Vec<f64> {
        let (a, b) = self.range(v);
        self.mean[a..b].to_vec()
    }

    /// Block `Σ̂ᵢⱼ`.
    pub fn block(&self, i: View, j: View) -> Tensor {
        let (r0, r1) = self.range(i);
        let (c0, c1) = self.range(j);
        self.cov.slice_rows(r0, r1).slice_cols(c0, c1)
    }

    /// Sample mean and maximum-likelihood covariance (normalizer `N`) of the
    /// rows of `[z₁ z₂]`.
    pub fn fit(z1: &Tensor, z2: &Tensor) -> Result<Self> {
        if z1.rows() != z2.rows() {
            return Err(Error::dim("latent batches have different row counts"));
        }
        if z1.rows() == 0 {
            return Err(Error::Precondition("cannot fit statistics to zero samples".into()));
        }
        let z = z1.hconcat(z2)?;
        let n = z.rows() as f64;
        let mean: Vec<f64> = z.col_sums().data().iter().map(|s| s / n).collect();
        let centred = Tensor::from_fn(z.rows(), z.cols(), |r, c| z.get(r, c) - mean[c]);
        let cov = crate::tensor::gemm(&centred, true, &centred, false)?.scale(1.0 / n);
        let cov = cov.add(&cov.transpose())?.scale(0.5);
        LatentStats::new(z1.cols(), z2.cols(), mean, cov)
    }
}

fn latents(model: &JpvaeModel, data: &ViewPairDataset, source: LatentSource) -> Result<(Tensor, Tensor)> {
    match source {
        LatentSource::PosteriorMean => model.posterior_means(data),
        LatentSource::Sampled { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m1, l1) = model.encode_batch(&data.view1.to_tensor(), View::One)?;
            let (m2, l2) = model.encode_batch(&data.view2.to_tensor(), View::Two)?;
            Ok((sample(&m1, &l1, &mut rng), sample(&m2, &l2, &mut rng)))
        }
    }
}

fn sample(mean: &Tensor, log_var: &Tensor, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(mean.rows(), mean.cols(), |r, c| {
        mean.get(r, c) + (0.5 * log_var.get(r, c)).exp() * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Fits [`LatentStats`] on posterior means of every training pair.
pub fn fit_latent_mle(model: &JpvaeModel, data: &ViewPairDataset) -> Result<LatentStats> {
    fit_latent_stats(model, data, LatentSource::PosteriorMean)
}

pub fn fit_latent_stats(model: &JpvaeModel, data: &ViewPairDataset, source: LatentSource) -> Result<LatentStats> {
    let need = 2 * model.latent_dim() + 1;
    if data.len() < need {
        return Err(Error::Precondition(format!(
            "{} samples cannot give a full-rank estimate; need at least {need}",
            data.len()
        )));
    }
    let (z1, z2) = latents(model, data, source)?;
    LatentStats::fit(&z1, &z2)
}

/// Conditional mean `μ̂ᵢ + Σ̂ᵢⱼ(Σ̂ⱼⱼ + εI)⁻¹(a − μ̂ⱼ)` and covariance
/// `Σ̂ᵢᵢ − Σ̂ᵢⱼ(Σ̂ⱼⱼ + εI)⁻¹Σ̂ⱼᵢ` of `zᵢ` given `zⱼ = a`.
pub fn conditional_latent(a: &[f64], stats: &LatentStats, i: View, j: View) -> Result<(Vec<f64>, Tensor)> {
    let (means, cov) = conditional_latent_batch(&Tensor::row(a), stats, i, j)?;
    Ok((means.into_data(), cov))
}

/// Row-wise conditional means for a `B x nⱼ` batch, plus the shared
/// conditional covariance.
pub fn conditional_latent_batch(a: &Tensor, stats: &LatentStats, i: View, j: View) -> Result<(Tensor, Tensor)> {
    if i == j {
        return Err(Error::Precondition("conditioning a view on itself".into()));
    }
    let nj = stats.range(j).1 - stats.range(j).0;
    if a.cols() != nj {
        return Err(Error::dim(format!("observed latent has width {}, expected {nj}", a.cols())));
    }
    let mut sjj = stats.block(j, j);
    for k in 0..nj {
        sjj.set(k, k, sjj.get(k, k) + RIDGE);
    }
    let lu = linalg::Lu::factor(&sjj)?;
    let sij = stats.block(i, j);
    // gain = Σ̂ᵢⱼ(Σ̂ⱼⱼ + εI)⁻¹, via the transpose of a solve against Σ̂ⱼᵢ
    let gain = lu.solve(&sij.transpose())?.transpose();
    let mu_i = stats.view_mean(i);
    let mu_j = stats.view_mean(j);
    let centred = Tensor::from_fn(a.rows(), nj, |r, c| a.get(r, c) - mu_j[c]);
    let shift = crate::tensor::gemm(&centred, false, &gain, true)?;
    let means = Tensor::from_fn(a.rows(), mu_i.len(), |r, c| mu_i[c] + shift.get(r, c));
    let reduction = gain.matmul(&sij.transpose())?;
    let cov = stats.block(i, i).sub(&reduction)?;
    let cov = cov.add(&cov.transpose())?.scale(0.5);
    means.ensure_finite("conditional mean")?;
    Ok((means, cov))
}

/// Imputes view `target` from the observed other view `x_j` (`B x c_j`).
/// Returns per-pixel probabilities.
pub fn impute(x_j: &Tensor, model: &JpvaeModel, stats: &LatentStats, target: View) -> Result<Tensor> {
    impute_with(x_j, model, stats, target, LatentSource::PosteriorMean)
}

pub fn impute_with(
    x_j: &Tensor,
    model: &JpvaeModel,
    stats: &LatentStats,
    target: View,
    source: LatentSource,
) -> Result<Tensor> {
    let observed = target.other();
    let (m, lv) = model.encode_batch(x_j, observed)?;
    let a = match source {
        LatentSource::PosteriorMean => m,
        LatentSource::Sampled { seed } => sample(&m, &lv, &mut ChaCha8Rng::seed_from_u64(seed)),
    };
    let (z, _) = conditional_latent_batch(&a, stats, target, observed)?;
    model.decode_probs(&z, target)
}
