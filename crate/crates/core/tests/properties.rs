use jpvae::covparam::{
    assemble_sigma_c, block_inverse_terms, cayley_orthogonal, materialize_c, skew_len, Coupling, CrossCovParam,
    OrthoParam,
};
use jpvae::evaluation::{active_units_from_means, cross_correlation_from, reconstruction_loss};
use jpvae::imputation::{conditional_latent, LatentStats};
use jpvae::model::View;
use jpvae::prior::{beta_at, gaussian_kl, joint_kl, BetaSchedule, GaussianPosterior};
use jpvae::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn sigma_max(t: &Tensor) -> f64 {
    to_na(t).svd(false, false).singular_values.max()
}

fn vec_in(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

/// Dimension plus skew parameters for that dimension.
fn skew_params(max_n: usize, scale: f64) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1..=max_n).prop_flat_map(move |n| (Just(n), vec_in(skew_len(n), -scale, scale)))
}

fn posterior(n: usize) -> impl Strategy<Value = GaussianPosterior> {
    (vec_in(n, -3.0, 3.0), vec_in(n, -2.0, 2.0)).prop_map(|(m, lv)| GaussianPosterior::new(m, lv).unwrap())
}

/// A scaled-orthogonal or bounded-SVD parameter set for dimension `n`.
fn cross_cov(n: usize) -> impl Strategy<Value = CrossCovParam> {
    let ortho = move || {
        (vec_in(skew_len(n), -3.0, 3.0), -8.0..8.0f64).prop_map(move |(skew, s)| OrthoParam {
            skew: Tensor::new(1, skew_len(n), skew).unwrap(),
            s,
        })
    };
    prop_oneof![
        (ortho(), -0.999..0.999f64).prop_map(|(basis, alpha)| CrossCovParam::ScaledOrthogonal { basis, alpha }),
        (ortho(), ortho(), vec_in(n, -8.0, 8.0)).prop_map(move |(u, v, sv)| CrossCovParam::BoundedSvd {
            u,
            v,
            singular: Tensor::new(1, n, sv).unwrap(),
        }),
    ]
}

fn dim_and_cross_cov(max_n: usize) -> impl Strategy<Value = (usize, CrossCovParam)> {
    (1..=max_n).prop_flat_map(|n| (Just(n), cross_cov(n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cayley_output_is_orthogonal((n, skew) in skew_params(10, 4.0), s in -10.0..10.0f64) {
        let o = to_na(&cayley_orthogonal(&skew, s, n).unwrap());
        prop_assert!((o.transpose() * &o - DMatrix::identity(n, n)).norm() < 1e-10);
    }

    #[test]
    fn materialized_c_is_a_strict_contraction((n, p) in dim_and_cross_cov(8)) {
        let c = materialize_c(&p, n, n).unwrap();
        prop_assert!(sigma_max(&c) < 1.0);
    }

    #[test]
    fn eigenvalues_of_i_minus_ctc_follow_singular_values((n, p) in dim_and_cross_cov(8)) {
        let c = to_na(&materialize_c(&p, n, n).unwrap());
        let mut lambda: Vec<f64> = (DMatrix::identity(n, n) - c.transpose() * &c).symmetric_eigen().eigenvalues.iter().copied().collect();
        let mut sigma: Vec<f64> = c.svd(false, false).singular_values.iter().copied().collect();
        lambda.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for k in 0..n {
            prop_assert!((lambda[k] - (1.0 - sigma[k] * sigma[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn block_inverse_inverts_sigma_c((n, p) in dim_and_cross_cov(6)) {
        let c = materialize_c(&p, n, n).unwrap();
        // near-unit singular values make the blocks arbitrarily ill-conditioned
        prop_assume!(sigma_max(&c) < 0.999);
        let terms = block_inverse_terms(&c).unwrap();
        let sigma = to_na(&assemble_sigma_c(&c));
        let prod = to_na(&terms.assembled_inverse()) * &sigma;
        prop_assert!((prod - DMatrix::identity(2 * n, 2 * n)).abs().max() < 1e-8);
        prop_assert!((terms.log_det_sigma - sigma.determinant().ln()).abs() < 1e-9);
    }

    #[test]
    fn joint_kl_is_nonnegative_and_matches_the_dense_form(
        (n, p, q1, q2) in (1..=6usize).prop_flat_map(|n| (Just(n), cross_cov(n), posterior(n), posterior(n)))
    ) {
        let c = materialize_c(&p, n, n).unwrap();
        prop_assume!(sigma_max(&c) < 0.999);
        let kl = joint_kl(&q1, &q2, &Coupling::General(c.clone())).unwrap();
        prop_assert!(kl >= -1e-9);
        let mu: Vec<f64> = q1.mean.iter().chain(&q2.mean).copied().collect();
        let var: Vec<f64> = q1.log_var.iter().chain(&q2.log_var).map(|v| v.exp()).collect();
        let dense = gaussian_kl(&mu, &Tensor::diag(&var), &vec![0.0; 2 * n], &assemble_sigma_c(&c)).unwrap();
        prop_assert!((kl - dense).abs() <= 1e-9 * dense.abs().max(1.0));
    }

    #[test]
    fn independent_prior_kl_splits_by_view(
        (q1, q2) in (1..=8usize).prop_flat_map(|n| (posterior(n), posterior(n)))
    ) {
        let kl = joint_kl(&q1, &q2, &Coupling::Independent).unwrap();
        prop_assert!((kl - q1.kl_to_standard() - q2.kl_to_standard()).abs() < 1e-12 * kl.max(1.0));
    }

    #[test]
    fn beta_stays_in_unit_interval(total in 20..500usize, cycles in 1..20usize, r in 0.05..1.0f64, frac in 0.0..1.0f64) {
        let step = (frac * total as f64) as usize;
        let b = beta_at(&BetaSchedule::new(total, cycles, r).unwrap(), step).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn conditioning_contracts_uncertainty(
        (n1, n2, entries, mean) in (1..=4usize, 1..=4usize).prop_flat_map(|(a, b)| {
            let k = a + b;
            (Just(a), Just(b), vec_in(k * k, -1.0, 1.0), vec_in(k, -2.0, 2.0))
        }),
        obs in vec_in(4, -3.0, 3.0),
    ) {
        let k = n1 + n2;
        let l = Tensor::new(k, k, entries).unwrap();
        let cov = l.matmul(&l.transpose()).unwrap().add(&Tensor::eye(k).scale(0.1)).unwrap();
        let stats = LatentStats::new(n1, n2, mean, cov.clone()).unwrap();
        for (i, j, nj) in [(View::One, View::Two, n2), (View::Two, View::One, n1)] {
            let (_, c) = conditional_latent(&obs[..nj], &stats, i, j).unwrap();
            let marginal = stats.block(i, i);
            let min_eig = to_na(&c).symmetric_eigen().eigenvalues.min();
            prop_assert!(min_eig >= -1e-8);
            prop_assert!(c.trace() <= marginal.trace() + 1e-8);
        }
    }

    #[test]
    fn half_probabilities_cost_ln2_per_pixel(bits in prop::collection::vec(0..2u8, 3 * 17)) {
        let x = Tensor::new(3, 17, bits.iter().map(|&b| b as f64).collect()).unwrap();
        let l = reconstruction_loss(&x, &Tensor::filled(3, 17, 0.5)).unwrap();
        prop_assert!((l - 17.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn correlations_are_bounded(z in vec_in(30 * 6, -5.0, 5.0)) {
        let z = Tensor::new(30, 6, z).unwrap();
        let (corr, norm) = cross_correlation_from(&z.slice_cols(0, 3), &z.slice_cols(3, 6)).unwrap();
        prop_assert!(corr.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert!((norm - corr.frobenius_norm()).abs() < 1e-12);
    }

    #[test]
    fn active_units_ignore_row_order(z in vec_in(20 * 5, -1.0, 1.0), shift in 1..20usize) {
        let z = Tensor::new(20, 5, z).unwrap();
        let rotated: Vec<usize> = (0..20).map(|r| (r + shift) % 20).collect();
        prop_assert_eq!(active_units_from_means(&z), active_units_from_means(&z.select_rows(&rotated)));
    }
}

#[test]
fn conditional_means_average_to_the_marginal_mean() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let (n1, n2, n) = (2, 3, 4000);
    let mix = Tensor::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
    let z = Tensor::from_fn(n, 5, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .matmul(&mix)
        .unwrap();
    let stats = LatentStats::fit(&z.slice_cols(0, n1), &z.slice_cols(n1, n1 + n2)).unwrap();
    let mut avg = vec![0.0; n1];
    for r in 0..n {
        let (m, _) = conditional_latent(&z.row_slice(r)[n1..], &stats, View::One, View::Two).unwrap();
        for u in 0..n1 {
            avg[u] += m[u] / n as f64;
        }
    }
    // the conditional mean is affine in the observation, so averaging over
    // the fitting sample returns the fitted mean up to the ridge
    for u in 0..n1 {
        assert!((avg[u] - stats.mean[u]).abs() < 1e-5, "{} vs {}", avg[u], stats.mean[u]);
    }
}
