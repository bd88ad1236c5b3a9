//! Acceptance suite. Every criterion prints exactly one PASS/FAIL/SKIP line;
//! the process exits non-zero if any criterion fails.
//!
//! The desk-scale reproduction needs MNIST IDX files in `<workspace>/data/mnist`
//! or `$JPVAE_DATA_DIR`. The optional full-scale reproduction runs only when
//! `JPVAE_FULL_SCALE=1`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use jpvae::autodiff::{grad_check, Tape, Var};
use jpvae::covparam::{
    assemble_sigma_c, block_inverse_terms, cayley_on_tape, cayley_orthogonal, materialize_c, materialize_on_tape,
    skew_len, CrossCovKind, CrossCovParam, OrthoParam,
};
use jpvae::data::{load_hvd_mnist, HvdMnist};
use jpvae::evaluation::{run_experiment_suite, ClassifierCell, EvalConfig, MetricsReport, SuiteConfig};
use jpvae::imputation::{conditional_latent, LatentStats, RIDGE};
use jpvae::linalg;
use jpvae::model::{elbo_loss, Architecture, JpvaeModel, TrainConfig, View};
use jpvae::prior::{joint_kl, joint_kl_rows, GaussianPosterior};
use jpvae::covparam::Coupling;
use jpvae::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Random `n x n` matrix rescaled so its largest singular value is `target`.
fn random_c(r: &mut ChaCha8Rng, n: usize, target: f64) -> Tensor {
    let m = DMatrix::from_fn(n, n, |_, _| normal(r));
    let s = m.clone().svd(false, false).singular_values.max();
    let data: Vec<f64> = m.transpose().iter().map(|v| v * target / s).collect();
    Tensor::new(n, n, data).unwrap()
}

fn random_posterior(r: &mut ChaCha8Rng, n: usize) -> GaussianPosterior {
    GaussianPosterior::new(
        (0..n).map(|_| 1.5 * normal(r)).collect(),
        (0..n).map(|_| 0.8 * normal(r)).collect(),
    )
    .unwrap()
}

/// Dense Gaussian KL from nalgebra Cholesky factors.
fn dense_kl(mu_s: &DVector<f64>, sigma_s: &DMatrix<f64>, sigma_r: &DMatrix<f64>) -> f64 {
    let k = mu_s.len() as f64;
    let chol_r = sigma_r.clone().cholesky().expect("reference covariance is PD");
    let chol_s = sigma_s.clone().cholesky().expect("posterior covariance is PD");
    let ld = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = chol_r.solve(sigma_s).trace();
    let quad = mu_s.dot(&chol_r.solve(mu_s));
    0.5 * (trace + quad - k + ld(&chol_r) - ld(&chol_s))
}

fn joint_dense(q1: &GaussianPosterior, q2: &GaussianPosterior) -> (DVector<f64>, DMatrix<f64>) {
    let mu: Vec<f64> = q1.mean.iter().chain(&q2.mean).copied().collect();
    let var: Vec<f64> = q1.log_var.iter().chain(&q2.log_var).map(|v| v.exp()).collect();
    (DVector::from_vec(mu), DMatrix::from_diagonal(&DVector::from_vec(var)))
}

fn criterion_1() -> Outcome {
    let mut r = rng(101);
    let n = 5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let target = r.random_range(0.05..0.97);
        let c = random_c(&mut r, n, target);
        let (q1, q2) = (random_posterior(&mut r, n), random_posterior(&mut r, n));
        let kl = joint_kl(&q1, &q2, &Coupling::General(c.clone())).map_err(|e| e.to_string())?;
        let (mu, sigma) = joint_dense(&q1, &q2);
        let oracle = dense_kl(&mu, &sigma, &to_na(&assemble_sigma_c(&c)));
        worst = worst.max((kl - oracle).abs() / oracle.abs());
    }
    check(worst < 1e-9, format!("max relative error {worst:.3e} (< 1e-9)"))
}

fn criterion_2() -> Outcome {
    let mut r = rng(202);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n = [2, 5, 20][i % 3];
        let alpha = r.random_range(-0.98..0.98);
        let skew: Vec<f64> = (0..skew_len(n)).map(|_| normal(&mut r)).collect();
        let s = r.random_range(-4.0..4.0);
        let c = cayley_orthogonal(&skew, s, n).unwrap().scale(alpha);
        let (q1, q2) = (random_posterior(&mut r, n), random_posterior(&mut r, n));
        let general = joint_kl(&q1, &q2, &Coupling::General(c.clone())).map_err(|e| e.to_string())?;
        let special = joint_kl(&q1, &q2, &Coupling::ScaledOrthogonal { c, alpha }).map_err(|e| e.to_string())?;
        worst = worst.max((general - special).abs() / general.abs());
    }
    check(worst < 1e-9, format!("max relative error {worst:.3e} (< 1e-9)"))
}

fn criterion_3() -> Outcome {
    let mut r = rng(303);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let n = [2, 5, 20][i % 3];
        let scale = [0.1, 1.0, 5.0][(i / 3) % 3];
        let skew: Vec<f64> = (0..skew_len(n)).map(|_| scale * normal(&mut r)).collect();
        let s = r.random_range(-6.0..6.0);
        let o = to_na(&cayley_orthogonal(&skew, s, n).map_err(|e| e.to_string())?);
        let err = (o.transpose() * &o - DMatrix::identity(n, n)).norm();
        worst = worst.max(err);
    }
    check(worst < 1e-10, format!("max ||O^T O - I||_F {worst:.3e} over 1000 draws (< 1e-10)"))
}

fn criterion_4() -> Outcome {
    let mut r = rng(404);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let n = [2, 5, 20][i % 3];
        let c = if i % 2 == 0 {
            let target = r.random_range(0.1..1.5);
            random_c(&mut r, n, target)
        } else {
            let u = Tensor::from_fn(1, skew_len(n), |_, _| normal(&mut r));
            let v = Tensor::from_fn(1, skew_len(n), |_, _| normal(&mut r));
            let singular = Tensor::from_fn(1, n, |_, _| 2.0 * normal(&mut r));
            let p = CrossCovParam::BoundedSvd {
                u: OrthoParam { skew: u, s: -20.0 },
                v: OrthoParam { skew: v, s: 2.0 },
                singular,
            };
            materialize_c(&p, n, n).unwrap()
        };
        let ctc = c.transpose().matmul(&c).unwrap();
        let m = Tensor::eye(n).sub(&ctc).unwrap();
        let lambda = linalg::symmetric_eigenvalues(&m).map_err(|e| e.to_string())?;
        let sigma = to_na(&c).svd(false, false).singular_values;
        let mut sigma: Vec<f64> = sigma.iter().copied().collect();
        sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for k in 0..n {
            let want = 1.0 - sigma[n - 1 - k].powi(2);
            worst = worst.max((lambda[k] - want).abs());
        }
    }
    check(worst < 1e-9, format!("max |lambda_k(I - C^T C) - (1 - sigma_(n+1-k)^2)| {worst:.3e} (< 1e-9)"))
}

fn criterion_5() -> Outcome {
    let mut r = rng(505);
    let mut min_eig = f64::INFINITY;
    let mut count = 0;
    for i in 0..300 {
        let n = [2, 5, 20][i % 3];
        let ortho = |r: &mut ChaCha8Rng| OrthoParam {
            skew: Tensor::from_fn(1, skew_len(n), |_, _| 2.0 * normal(r)),
            s: r.random_range(-6.0..6.0),
        };
        let p = if i % 2 == 0 {
            CrossCovParam::BoundedSvd {
                u: ortho(&mut r),
                v: ortho(&mut r),
                singular: Tensor::from_fn(1, n, |_, _| 3.0 * normal(&mut r)),
            }
        } else {
            CrossCovParam::ScaledOrthogonal {
                basis: ortho(&mut r),
                alpha: r.random_range(-0.999..0.999),
            }
        };
        let c = materialize_c(&p, n, n).map_err(|e| e.to_string())?;
        let eig = to_na(&assemble_sigma_c(&c)).symmetric_eigen().eigenvalues.min();
        min_eig = min_eig.min(eig);
        if eig <= 0.0 {
            return Err(format!("{:?} gave min eigenvalue {eig:e}", p.kind()));
        }
        count += 1;
    }
    check(min_eig > 0.0, format!("{count} materialized C, smallest eigenvalue of Sigma_C {min_eig:.3e} (> 0)"))
}

fn criterion_6() -> Outcome {
    let mut r = rng(606);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let tol = 1e-4;
    let eps = 1e-6;
    let n = 4;
    let b = 3;
    let batch = |r: &mut ChaCha8Rng, scale: f64| Tensor::from_fn(b, n, |_, _| scale * normal(r));
    let (m1, l1, m2, l2) = (batch(&mut r, 1.0), batch(&mut r, 0.5), batch(&mut r, 1.0), batch(&mut r, 0.5));

    // joint KL through each parameterization, differentiating means,
    // log-variances and the raw C parameters together
    let svd_params = vec![
        m1.clone(),
        l1.clone(),
        m2.clone(),
        l2.clone(),
        Tensor::from_fn(1, skew_len(n), |_, _| 0.5 * normal(&mut r)),
        Tensor::from_fn(1, skew_len(n), |_, _| 0.5 * normal(&mut r)),
        Tensor::from_fn(1, n, |_, _| normal(&mut r)),
    ];
    let e = grad_check(
        |t: &mut Tape, v: &[Var]| {
            let p = CrossCovParam::BoundedSvd {
                u: OrthoParam { skew: v[4], s: -20.0 },
                v: OrthoParam { skew: v[5], s: 1.5 },
                singular: v[6],
            };
            let c = materialize_on_tape(t, &p, n)?;
            let kl = joint_kl_rows(t, v[0], v[1], v[2], v[3], &c)?;
            t.sum(kl)
        },
        &svd_params,
        eps,
    )
    .map_err(|e| e.to_string())?;
    worst.push(("joint KL, bounded SVD".into(), e));

    let orth_params = vec![m1.clone(), l1.clone(), m2.clone(), l2.clone(), svd_params[4].clone()];
    for (label, general) in [("joint KL, scaled orthogonal", false), ("joint KL, orthogonal via general form", true)] {
        let e = grad_check(
            |t: &mut Tape, v: &[Var]| {
                let p = CrossCovParam::ScaledOrthogonal {
                    basis: OrthoParam { skew: v[4], s: -20.0 },
                    alpha: 0.9,
                };
                let mut c = materialize_on_tape(t, &p, n)?;
                if general {
                    c = Coupling::General(*c.matrix().unwrap());
                }
                let kl = joint_kl_rows(t, v[0], v[1], v[2], v[3], &c)?;
                t.sum(kl)
            },
            &orth_params,
            eps,
        )
        .map_err(|e| e.to_string())?;
        worst.push((label.into(), e));
    }

    let e = grad_check(
        |t: &mut Tape, v: &[Var]| {
            let o = cayley_on_tape(t, v[0], 3.0, n)?;
            let w = t.constant(Tensor::from_fn(n, n, |i, j| (i * n + j) as f64 * 0.1 - 0.7));
            let p = t.mul(o, w)?;
            t.sum(p)
        },
        &[svd_params[4].clone()],
        eps,
    )
    .map_err(|e| e.to_string())?;
    worst.push(("Cayley transform".into(), e));

    // full negated ELBO over every network and C parameter
    let arch = Architecture {
        view_widths: [5, 4],
        hidden: vec![6],
        latent: 3,
    };
    let x1 = Tensor::from_fn(b, 5, |i, j| ((i + 2 * j) % 2) as f64);
    let x2 = Tensor::from_fn(b, 4, |i, j| ((i * j + 1) % 2) as f64);
    let eps1 = Tensor::from_fn(b, 3, |_, _| normal(&mut r));
    let eps2 = Tensor::from_fn(b, 3, |_, _| normal(&mut r));
    for kind in [CrossCovKind::Zero, CrossCovKind::BoundedSvd, CrossCovKind::ScaledOrthogonal] {
        let mut cc = CrossCovParam::new(kind, 3, 0.9, -20.0).unwrap();
        cc = cc.map(|t| Tensor::from_fn(t.rows(), t.cols(), |_, _| 0.3 * normal(&mut r)));
        let model = JpvaeModel::new(arch.clone(), &cc, &mut rng(7)).unwrap();
        // zero-initialized biases put an all-zero input row exactly on the
        // ReLU kink, where central differences are meaningless
        let params: Vec<Tensor> = model
            .store
            .iter()
            .map(|(_, _, t)| Tensor::from_fn(t.rows(), t.cols(), |i, j| t.get(i, j) + 0.1 * normal(&mut r)))
            .collect();
        let e = grad_check(
            |t: &mut Tape, v: &[Var]| {
                let terms = elbo_loss(t, &model, v, &x1, &x2, eps1.clone(), eps2.clone(), 0.7)?;
                Ok(terms.loss)
            },
            &params,
            eps,
        )
        .map_err(|e| e.to_string())?;
        worst.push((format!("full ELBO, {}", kind.label()), e));
    }

    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail = worst.iter().map(|(l, e)| format!("{l} {e:.1e}")).collect::<Vec<_>>().join("; ");
    check(max < tol, format!("max relative error {max:.3e} (< 1e-4): {detail}"))
}

fn criterion_7() -> Outcome {
    let mut r = rng(707);
    // closed form, 1 + 1 dimensions
    let mut worst_closed = 0.0f64;
    for _ in 0..100 {
        let (mi, mj) = (normal(&mut r), normal(&mut r));
        let (si, sj) = (r.random_range(0.2..3.0), r.random_range(0.2..3.0));
        let rho: f64 = r.random_range(-0.95..0.95);
        let c = rho * si * sj;
        let stats = LatentStats::new(1, 1, vec![mi, mj], Tensor::from_rows(&[vec![si * si, c], vec![c, sj * sj]]).unwrap())
            .unwrap();
        let a = normal(&mut r) * 2.0;
        let (m, v) = conditional_latent(&[a], &stats, View::One, View::Two).map_err(|e| e.to_string())?;
        // the same closed form with the ridge folded into σⱼ²
        let sj2 = sj * sj + RIDGE;
        let want_m = mi + c / sj2 * (a - mj);
        let want_v = si * si - c * c / sj2;
        worst_closed = worst_closed.max((m[0] - want_m).abs().max((v.item() - want_v).abs()));
        // and the unregularized textbook form, within the ridge's influence
        let raw_m = mi + rho * (si / sj) * (a - mj);
        let raw_v = si * si * (1.0 - rho * rho);
        if (m[0] - raw_m).abs() > 1e-4 * (1.0 + raw_m.abs()) || (v.item() - raw_v).abs() > 1e-4 * si * si {
            return Err(format!("ridge moved the bivariate answer too far: {} vs {raw_m}", m[0]));
        }
    }

    // Monte-Carlo: sample a 3 + 2 dimensional joint Gaussian and compare
    // conditional means built from the generating parameters with empirical
    // averages of z_i over samples whose z_j falls in a small box. The
    // residual z_i - E[z_i | z_j] is independent of z_j, so the box average
    // has standard error sqrt(Var(z_i | z_j) / m) exactly.
    let (n1, n2) = (3, 2);
    let k = n1 + n2;
    let l = DMatrix::from_fn(k, k, |i, j| if j <= i { 0.6 * normal(&mut r) + if i == j { 1.0 } else { 0.0 } } else { 0.0 });
    let mu = DVector::from_fn(k, |_, _| normal(&mut r));
    let sigma = &l * l.transpose();
    let n = 100_000;
    let mut samples = Vec::with_capacity(n * k);
    for _ in 0..n {
        let e = DVector::from_fn(k, |_, _| normal(&mut r));
        samples.extend((&mu + &l * e).iter());
    }
    let z = Tensor::new(n, k, samples).unwrap();
    let truth = LatentStats::new(n1, n2, mu.iter().copied().collect(), Tensor::from_fn(k, k, |i, j| sigma[(i, j)]))
        .map_err(|e| e.to_string())?;
    let sd_j: Vec<f64> = (0..n2).map(|c| sigma[(n1 + c, n1 + c)].sqrt()).collect();
    // residuals pooled per coordinate over five boxes along the z_j diagonal
    let mut resid = vec![0.0; n1];
    let mut cond_var = vec![0.0; n1];
    let mut m = 0usize;
    for probe in 0..5 {
        let a: Vec<f64> = (0..n2).map(|c| mu[n1 + c] + (probe as f64 - 2.0) * 0.5 * sd_j[c]).collect();
        for row in (0..n).filter(|&row| (0..n2).all(|c| (z.get(row, n1 + c) - a[c]).abs() < 0.15 * sd_j[c])) {
            let zj: Vec<f64> = (0..n2).map(|c| z.get(row, n1 + c)).collect();
            let (pred, cov) = conditional_latent(&zj, &truth, View::One, View::Two).map_err(|e| e.to_string())?;
            for u in 0..n1 {
                resid[u] += z.get(row, u) - pred[u];
                cond_var[u] = cov.get(u, u);
            }
            m += 1;
        }
    }
    let worst_z = (0..n1)
        .map(|u| (resid[u] / m as f64).abs() / (cond_var[u] / m as f64).sqrt())
        .fold(0.0, f64::max);

    // the fitted statistics recover the generating mean within 3 sigma / sqrt(N)
    let fitted = LatentStats::fit(&z.slice_cols(0, n1), &z.slice_cols(n1, k)).map_err(|e| e.to_string())?;
    let worst_mean = (0..k)
        .map(|c| (fitted.mean[c] - mu[c]).abs() / (sigma[(c, c)] / n as f64).sqrt())
        .fold(0.0, f64::max);
    check(
        worst_closed < 1e-12 && worst_z < 3.0 && worst_mean < 3.0,
        format!(
            "closed form max error {worst_closed:.1e}; conditional means max |error|/se {worst_z:.2} over {m} conditioned samples (< 3); \
             fitted mean max |error|/se {worst_mean:.2} (< 3)"
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut r = rng(808);
    let (mut worst_inv, mut worst_ld) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let n = [2, 5, 20][i % 3];
        let target = r.random_range(0.0..0.95);
        let c = random_c(&mut r, n, target);
        let terms = block_inverse_terms(&c).map_err(|e| e.to_string())?;
        let sigma = to_na(&assemble_sigma_c(&c));
        let prod = to_na(&terms.assembled_inverse()) * &sigma;
        worst_inv = worst_inv.max((prod - DMatrix::identity(2 * n, 2 * n)).abs().max());
        let ld = sigma.determinant().ln();
        worst_ld = worst_ld.max((terms.log_det_sigma - ld).abs());
    }
    check(
        worst_inv < 1e-8 && worst_ld < 1e-9,
        format!("max |Sigma^-1 Sigma - I| {worst_inv:.2e} (< 1e-8); max log-det error {worst_ld:.2e} (< 1e-9)"),
    )
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os("JPVAE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn load(train_limit: usize) -> Result<HvdMnist, String> {
    let dir = data_dir();
    load_hvd_mnist(&dir, 128, Some(train_limit), None)
        .map_err(|e| format!("MNIST unavailable in {}: {e}", dir.display()))
}

fn desk_scale() -> Result<MetricsReport, String> {
    let data = load(10_000)?;
    let cfg = SuiteConfig {
        variants: vec![CrossCovKind::Zero, CrossCovKind::ScaledOrthogonal],
        seeds: vec![1, 2],
        train: TrainConfig {
            epochs: 10,
            cycles: 10,
            ..TrainConfig::default()
        },
        arch: Architecture::default(),
        eval: EvalConfig {
            cells: vec![ClassifierCell::table()[0]],
            ..EvalConfig::default()
        },
        baselines: false,
    };
    let start = Instant::now();
    let report = run_experiment_suite(&data.train, &data.test, &cfg, |msg| eprintln!("    [{:>6.0}s] {msg}", start.elapsed().as_secs_f64()))
        .map_err(|e| e.to_string())?;
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("desk_scale_report.json");
    if let Ok(json) = report.to_json() {
        let _ = std::fs::write(&out, json);
        eprintln!("    desk-scale report written to {}", out.display());
    }
    Ok(report)
}

fn by_seed(report: &MetricsReport, kind: CrossCovKind) -> BTreeMap<u64, &jpvae::evaluation::RunMetrics> {
    report.runs.iter().filter(|r| r.variant == kind).map(|r| (r.seed, r)).collect()
}

fn criterion_9(report: &Result<MetricsReport, String>) -> Outcome {
    let report = report.as_ref().map_err(Clone::clone)?;
    let zero = by_seed(report, CrossCovKind::Zero);
    let orth = by_seed(report, CrossCovKind::ScaledOrthogonal);
    let mut lines = Vec::new();
    let mut ok = true;
    for (seed, z) in &zero {
        let o = orth.get(seed).ok_or("missing orthogonal run")?;
        let claims = [
            ("X~1|2", o.imputation[0] < z.imputation[0], o.imputation[0], z.imputation[0]),
            ("X~2|1", o.imputation[1] < z.imputation[1], o.imputation[1], z.imputation[1]),
            ("AU%", o.active_units > z.active_units, o.active_units, z.active_units),
            ("corr-norm", o.cross_corr_norm > z.cross_corr_norm, o.cross_corr_norm, z.cross_corr_norm),
        ];
        for (name, holds, ov, zv) in claims {
            ok &= holds;
            lines.push(format!("seed {seed} {name} orth {ov:.3} vs zero {zv:.3} {}", if holds { "ok" } else { "WRONG" }));
        }
    }
    check(ok && zero.len() == 2, lines.join("; "))
}

fn criterion_11(report: &Result<MetricsReport, String>) -> Outcome {
    let report = report.as_ref().map_err(Clone::clone)?;
    let cell = ClassifierCell::table()[0].label();
    let mean = |k| {
        report
            .variant(k)
            .and_then(|s| s.metrics.get(&format!("accuracy.{cell}")))
            .map(|s| s.mean)
            .ok_or(format!("no {cell} accuracy for {k:?}"))
    };
    let (o, z) = (mean(CrossCovKind::ScaledOrthogonal)?, mean(CrossCovKind::Zero)?);
    check(o - z >= 0.5, format!("{cell} accuracy orth {o:.2}% vs zero {z:.2}%, margin {:.2} (>= 0.5)", o - z))
}

fn criterion_10() -> Option<Outcome> {
    if std::env::var("JPVAE_FULL_SCALE").as_deref() != Ok("1") {
        return None;
    }
    Some((|| {
        let data = load(50_000)?;
        let cfg = SuiteConfig {
            variants: vec![CrossCovKind::Zero, CrossCovKind::BoundedSvd, CrossCovKind::ScaledOrthogonal],
            seeds: vec![1, 2, 3, 4, 5],
            train: TrainConfig::default(),
            arch: Architecture::default(),
            eval: EvalConfig {
                cells: ClassifierCell::table(),
                ..EvalConfig::default()
            },
            baselines: false,
        };
        let report = run_experiment_suite(&data.train, &data.test, &cfg, |m| eprintln!("    {m}")).map_err(|e| e.to_string())?;
        let published: [(CrossCovKind, [f64; 4], f64); 3] = [
            (CrossCovKind::Zero, [24.64, 25.56, 114.1, 127.5], 61.0),
            (CrossCovKind::BoundedSvd, [24.08, 25.02, 106.6, 117.4], 66.0),
            (CrossCovKind::ScaledOrthogonal, [23.41, 23.98, 97.25, 106.6], 98.5),
        ];
        let keys = ["recon.X~1", "recon.X~2", "impute.X~1|2", "impute.X~2|1"];
        let mut ok = true;
        let mut notes = Vec::new();
        for (kind, losses, au) in published {
            let s = report.variant(kind).ok_or("missing variant")?;
            for (k, want) in keys.iter().zip(losses) {
                let got = s.metrics[*k].mean;
                let within = (got - want).abs() <= 0.15 * want;
                ok &= within;
                notes.push(format!("{} {k} {got:.2} vs {want}", kind.label()));
            }
            let got = s.metrics["active_units"].mean;
            ok &= (got - au).abs() <= 10.0;
            notes.push(format!("{} AU {got:.1} vs {au}", kind.label()));
        }
        for cell in ClassifierCell::table() {
            let key = format!("accuracy.{}", cell.label());
            let acc = |k| report.variant(k).map(|s| s.metrics[&key].mean).unwrap_or(f64::NAN);
            let o = acc(CrossCovKind::ScaledOrthogonal);
            let best = o > acc(CrossCovKind::Zero) && o > acc(CrossCovKind::BoundedSvd);
            ok &= best;
            notes.push(format!("{} orth best: {best}", cell.label()));
        }
        check(ok, notes.join("; "))
    })())
}

fn run(id: &str, name: &str, f: impl FnOnce() -> Option<Outcome>) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Some(Err(format!("panicked: {msg}")))
    });
    let t = start.elapsed().as_secs_f64();
    match result {
        None => {
            println!("criterion {id:>2} SKIP  {name} (optional; set JPVAE_FULL_SCALE=1 to run)");
            true
        }
        Some(Ok(d)) => {
            println!("criterion {id:>2} PASS  {name} [{t:.1}s] {d}");
            true
        }
        Some(Err(d)) => {
            println!("criterion {id:>2} FAIL  {name} [{t:.1}s] {d}");
            false
        }
    }
}

fn main() {
    // `cargo test -- --list` and similar harness probes
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    ok &= run("1", "KL oracle equivalence", || Some(criterion_1()));
    ok &= run("2", "orthogonal simplification", || Some(criterion_2()));
    ok &= run("3", "Cayley orthogonality", || Some(criterion_3()));
    ok &= run("4", "eigenvalue identity", || Some(criterion_4()));
    ok &= run("5", "Sigma_C validity", || Some(criterion_5()));
    ok &= run("6", "gradient checks", || Some(criterion_6()));
    ok &= run("7", "conditional Gaussian", || Some(criterion_7()));
    ok &= run("8", "block inverse", || Some(criterion_8()));
    let desk = desk_scale();
    ok &= run("9", "desk-scale orderings", || Some(criterion_9(&desk)));
    ok &= run("10", "full-scale reproduction", criterion_10);
    ok &= run("11", "desk-scale classifier margin", || Some(criterion_11(&desk)));
    if !ok {
        std::process::exit(1);
    }
}
