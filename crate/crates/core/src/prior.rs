//! KL divergences against the joint prior `N(0, Σ_C)` and the cyclical
//! β schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::covparam::{validate_sigma_c, Coupling, SigmaValidity};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Diagonal Gaussian emitted by one encoder for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        let q = GaussianPosterior { mean, log_var };
        q.validate()?;
        Ok(q)
    }

    pub fn standard(n: usize) -> Self {
        GaussianPosterior {
            mean: vec![0.0; n],
            log_var: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.log_var.len() {
            return Err(Error::dim("posterior mean and log-variance lengths differ"));
        }
        if !self.mean.iter().chain(&self.log_var).all(|v| v.is_finite()) {
            return Err(Error::numeric("non-finite posterior parameters"));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Tensor {
        Tensor::diag(&self.log_var.iter().map(|v| v.exp()).collect::<Vec<_>>())
    }

    /// `KL(q || N(0, I))`.
    pub fn kl_to_standard(&self) -> f64 {
        0.5 * self
            .mean
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>()
    }
}

fn require_pd(s: &Tensor, what: &str) -> Result<()> {
    if !linalg::is_symmetric(s, 1e-12 * s.frobenius_norm().max(1.0)) {
        return Err(Error::Precondition(format!("{what} is not symmetric")));
    }
    let min = linalg::symmetric_eigenvalues(s)?
        .last()
        .copied()
        .unwrap_or(1.0);
    if min <= 0.0 {
        return Err(Error::Precondition(format!(
            "{what} is not positive definite (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}

/// `KL(s || r)` between two dense `k`-dimensional Gaussians.
pub fn gaussian_kl(mu_s: &[f64], sigma_s: &Tensor, mu_r: &[f64], sigma_r: &Tensor) -> Result<f64> {
    let k = mu_s.len();
    if mu_r.len() != k || sigma_s.shape() != [k, k] || sigma_r.shape() != [k, k] {
        return Err(Error::dim(format!("gaussian_kl needs matching {k}-dimensional inputs")));
    }
    require_pd(sigma_s, "Σ_s")?;
    require_pd(sigma_r, "Σ_r")?;
    let lu_r = linalg::Lu::factor(sigma_r)?;
    let (_, ld_r) = lu_r.log_det();
    let (_, ld_s) = linalg::Lu::factor(sigma_s)?.log_det();
    let diff: Vec<f64> = mu_s.iter().zip(mu_r).map(|(a, b)| a - b).collect();
    let diff_col = Tensor::new(k, 1, diff.clone())?;
    let sol = lu_r.solve(&diff_col)?;
    let quad: f64 = diff.iter().zip(sol.data()).map(|(a, b)| a * b).sum();
    let trace = lu_r.solve(sigma_s)?.trace();
    Ok(0.5 * (ld_r - ld_s - k as f64 + quad + trace))
}

/// Per-example `KL(q₁ q₂ || N(0, Σ_C))` as a `B x 1` column.
///
/// `mean_i`, `log_var_i` are `B x n_i` batches of posterior parameters.
pub fn joint_kl_rows(
    tape: &mut Tape,
    mean1: Var,
    log_var1: Var,
    mean2: Var,
    log_var2: Var,
    coupling: &Coupling<Var>,
) -> Result<Var> {
    let n1 = tape.value(mean1).cols() as f64;
    let n2 = tape.value(mean2).cols() as f64;
    if tape.value(log_var1).shape() != tape.value(mean1).shape()
        || tape.value(log_var2).shape() != tape.value(mean2).shape()
        || tape.value(mean1).rows() != tape.value(mean2).rows()
    {
        return Err(Error::dim("posterior batches have inconsistent shapes"));
    }

    // ½[γ μᵀμ - ln|Σ| - n + γ tr Σ] for a diagonal posterior; γ = 1 is the
    // ordinary per-view VAE term.
    let isotropic_term = |tape: &mut Tape, mean: Var, log_var: Var, n: f64, gamma: f64| -> Result<Var> {
        let sq = tape.mul(mean, mean)?;
        let quad = tape.row_sum(sq)?;
        let var = tape.exp(log_var)?;
        let tr = tape.row_sum(var)?;
        let quad_plus_tr = tape.add(quad, tr)?;
        let scaled = tape.scale(quad_plus_tr, gamma)?;
        let ld = tape.row_sum(log_var)?;
        let t = tape.sub(scaled, ld)?;
        let t = tape.add_scalar(t, -n)?;
        tape.scale(t, 0.5)
    };

    match *coupling {
        Coupling::Independent => {
            let a = isotropic_term(tape, mean1, log_var1, n1, 1.0)?;
            let b = isotropic_term(tape, mean2, log_var2, n2, 1.0)?;
            tape.add(a, b)
        }
        Coupling::ScaledOrthogonal { c, alpha } => {
            if n1 != n2 {
                return Err(Error::dim("scaled-orthogonal coupling needs n1 = n2"));
            }
            let gamma = 1.0 / (1.0 - alpha * alpha);
            let a = isotropic_term(tape, mean1, log_var1, n1, gamma)?;
            let b = isotropic_term(tape, mean2, log_var2, n2, gamma)?;
            // μ₁ᵀD₁Cᵀμ₂ + μ₂ᵀD₂Cμ₁ = 2γ μ₂ᵀCμ₁
            let ct = tape.transpose(c)?;
            let m1ct = tape.matmul(mean1, ct)?;
            let prod = tape.mul(m1ct, mean2)?;
            let cross = tape.row_sum(prod)?;
            let cross = tape.scale(cross, 2.0 * gamma)?;
            let cross = tape.add_scalar(cross, n1 * gamma.ln())?;
            let third = tape.scale(cross, -0.5)?;
            let ab = tape.add(a, b)?;
            tape.add(ab, third)
        }
        Coupling::General(c) => {
            let [r, k] = tape.value(c).shape();
            if r as f64 != n2 || k as f64 != n1 {
                return Err(Error::dim("C must be n2 x n1"));
            }
            let ct = tape.transpose(c)?;
            let ctc = tape.matmul(ct, c)?;
            let cct = tape.matmul(c, ct)?;
            let eye1 = tape.constant(Tensor::eye(n1 as usize));
            let eye2 = tape.constant(Tensor::eye(n2 as usize));
            let a1 = tape.sub(eye1, ctc)?;
            let a2 = tape.sub(eye2, cct)?;
            let d1 = tape.inverse(a1)?;
            let d2 = tape.inverse(a2)?;
            let log_det_sigma = tape.log_det(a1)?;

            let general_term = |tape: &mut Tape, mean: Var, log_var: Var, d: Var, n: f64| -> Result<Var> {
                let md = tape.matmul(mean, d)?;
                let prod = tape.mul(md, mean)?;
                let quad = tape.row_sum(prod)?;
                let var = tape.exp(log_var)?;
                let dd = tape.diag(d)?;
                let ddt = tape.transpose(dd)?;
                let tr = tape.matmul(var, ddt)?;
                let ld = tape.row_sum(log_var)?;
                let t = tape.add(quad, tr)?;
                let t = tape.sub(t, ld)?;
                let t = tape.add_scalar(t, -n)?;
                tape.scale(t, 0.5)
            };
            let a = general_term(tape, mean1, log_var1, d1, n1)?;
            let b = general_term(tape, mean2, log_var2, d2, n2)?;

            let m1d1 = tape.matmul(mean1, d1)?;
            let m1d1ct = tape.matmul(m1d1, ct)?;
            let p1 = tape.mul(m1d1ct, mean2)?;
            let cross1 = tape.row_sum(p1)?;
            let m2d2 = tape.matmul(mean2, d2)?;
            let m2d2c = tape.matmul(m2d2, c)?;
            let p2 = tape.mul(m2d2c, mean1)?;
            let cross2 = tape.row_sum(p2)?;
            let cross = tape.add(cross1, cross2)?;
            // ln|D₁| = -ln|I - CᵀC|
            let ln_d1 = tape.scale(log_det_sigma, -1.0)?;
            let third = tape.add_bias(cross, ln_d1)?;
            let third = tape.scale(third, -0.5)?;
            let ab = tape.add(a, b)?;
            tape.add(ab, third)
        }
    }
}

fn posterior_rows(q: &GaussianPosterior) -> (Tensor, Tensor) {
    (Tensor::row(&q.mean), Tensor::row(&q.log_var))
}

/// `KL(q₁ q₂ || N(0, Σ_C))` for a single pair of posteriors.
pub fn joint_kl(q1: &GaussianPosterior, q2: &GaussianPosterior, coupling: &Coupling<Tensor>) -> Result<f64> {
    q1.validate()?;
    q2.validate()?;
    if let Some(c) = coupling.matrix() {
        if c.shape() != [q2.dim(), q1.dim()] {
            return Err(Error::dim(format!(
                "C is {:?}, posteriors have dims {} and {}",
                c.shape(),
                q1.dim(),
                q2.dim()
            )));
        }
        match validate_sigma_c(c)? {
            SigmaValidity::PositiveDefinite => {}
            other => {
                return Err(Error::Precondition(format!(
                    "joint KL undefined: Σ_C classified as {other:?}"
                )))
            }
        }
    }
    let mut tape = Tape::new();
    let (m1, l1) = posterior_rows(q1);
    let (m2, l2) = posterior_rows(q2);
    let (m1, l1, m2, l2) = (
        tape.constant(m1),
        tape.constant(l1),
        tape.constant(m2),
        tape.constant(l2),
    );
    let cv = match coupling {
        Coupling::Independent => Coupling::Independent,
        Coupling::General(c) => Coupling::General(tape.constant(c.clone())),
        Coupling::ScaledOrthogonal { c, alpha } => Coupling::ScaledOrthogonal {
            c: tape.constant(c.clone()),
            alpha: *alpha,
        },
    };
    let kl = joint_kl_rows(&mut tape, m1, l1, m2, l2, &cv)?;
    Ok(tape.value(kl).item())
}

/// Cyclical KL annealing: `cycles` equal cycles over `total_steps`, each
/// ramping β linearly from 0 to 1 over the first `ramp_fraction` and then
/// holding at 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub total_steps: usize,
    pub cycles: usize,
    pub ramp_fraction: f64,
}

impl BetaSchedule {
    pub fn new(total_steps: usize, cycles: usize, ramp_fraction: f64) -> Result<Self> {
        if total_steps == 0 || cycles == 0 || cycles > total_steps {
            return Err(Error::Config(format!(
                "schedule needs 1 <= cycles ({cycles}) <= total steps ({total_steps})"
            )));
        }
        if !(ramp_fraction > 0.0 && ramp_fraction <= 1.0) {
            return Err(Error::Config(format!("ramp fraction {ramp_fraction} outside (0, 1]")));
        }
        Ok(BetaSchedule {
            total_steps,
            cycles,
            ramp_fraction,
        })
    }
}

pub fn beta_at(schedule: &BetaSchedule, step: usize) -> Result<f64> {
    if step >= schedule.total_steps {
        return Err(Error::Usage(format!(
            "step {step} outside schedule of {} steps",
            schedule.total_steps
        )));
    }
    let period = schedule.total_steps as f64 / schedule.cycles as f64;
    let tau = (step as f64 % period) / period;
    Ok((tau / schedule.ramp_fraction).min(1.0))
}
