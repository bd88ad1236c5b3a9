//! Parameterizations of the cross-covariance block `C` that keep the joint
//! prior covariance
//!
//! ```text
//! Σ_C = [ I   Cᵀ ]
//!       [ C   I  ]
//! ```
//!
//! positive definite, and the block-inverse quantities the KL term needs.
//!
//! Orthogonal factors use the extended Cayley transform
//! `O = J (I + A)(I - A)⁻¹` with `A` skew-symmetric and `J` a ±1 diagonal.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::ParamStore;
use crate::tensor::{gemm, Tensor};

/// Margin on `σ₁(C) < 1`.
pub const STRICT_MARGIN: f64 = 1e-12;

/// Default sign parameter: `r = 0`, so `J = I`.
pub const DEFAULT_SIGN_PARAM: f64 = -20.0;

pub const DEFAULT_ALPHA: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrossCovKind {
    #[serde(rename = "zero")]
    Zero,
    #[serde(rename = "svd", alias = "bounded_svd")]
    BoundedSvd,
    #[serde(rename = "orthogonal", alias = "scaled_orthogonal")]
    ScaledOrthogonal,
}

impl CrossCovKind {
    pub fn label(self) -> &'static str {
        match self {
            CrossCovKind::Zero => "zero",
            CrossCovKind::BoundedSvd => "svd",
            CrossCovKind::ScaledOrthogonal => "orthogonal",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(CrossCovKind::Zero),
            "svd" => Ok(CrossCovKind::BoundedSvd),
            "orthogonal" => Ok(CrossCovKind::ScaledOrthogonal),
            other => Err(Error::Config(format!(
                "unknown cross-covariance variant '{other}' (expected zero, svd or orthogonal)"
            ))),
        }
    }
}

/// Cayley parameters of one orthogonal factor. `s` selects how many trailing
/// diagonal entries of `J` are `-1`; it is held fixed (no gradient).
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoParam<T> {
    pub skew: T,
    pub s: f64,
}

/// Parameterization of `C`, generic over where the raw parameters live:
/// [`Tensor`] for plain values, [`ParamId`] inside a model, [`Var`] on a tape.
#[derive(Clone, Debug, PartialEq)]
pub enum CrossCovParam<T = Tensor> {
    Zero,
    BoundedSvd {
        u: OrthoParam<T>,
        v: OrthoParam<T>,
        /// `1 x n` pre-activations; singular values are `tanh(σ/2)`.
        singular: T,
    },
    ScaledOrthogonal {
        basis: OrthoParam<T>,
        alpha: f64,
    },
}

impl<T> CrossCovParam<T> {
    pub fn kind(&self) -> CrossCovKind {
        match self {
            CrossCovParam::Zero => CrossCovKind::Zero,
            CrossCovParam::BoundedSvd { .. } => CrossCovKind::BoundedSvd,
            CrossCovParam::ScaledOrthogonal { .. } => CrossCovKind::ScaledOrthogonal,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> CrossCovParam<U> {
        let mut ortho = |o: &OrthoParam<T>| OrthoParam {
            skew: f(&o.skew),
            s: o.s,
        };
        match self {
            CrossCovParam::Zero => CrossCovParam::Zero,
            CrossCovParam::BoundedSvd { u, v, singular } => {
                let u = ortho(u);
                let v = ortho(v);
                CrossCovParam::BoundedSvd {
                    u,
                    v,
                    singular: f(singular),
                }
            }
            CrossCovParam::ScaledOrthogonal { basis, alpha } => CrossCovParam::ScaledOrthogonal {
                basis: ortho(basis),
                alpha: *alpha,
            },
        }
    }

    /// Named raw parameter slots, in a fixed order.
    pub fn slots(&self) -> Vec<(&'static str, &T)> {
        match self {
            CrossCovParam::Zero => vec![],
            CrossCovParam::BoundedSvd { u, v, singular } => vec![
                ("cross_cov.u.skew", &u.skew),
                ("cross_cov.v.skew", &v.skew),
                ("cross_cov.singular", singular),
            ],
            CrossCovParam::ScaledOrthogonal { basis, .. } => vec![("cross_cov.basis.skew", &basis.skew)],
        }
    }

    /// Fixed sign parameters keyed like [`slots`](Self::slots).
    pub fn sign_params(&self) -> Vec<(&'static str, f64)> {
        match self {
            CrossCovParam::Zero => vec![],
            CrossCovParam::BoundedSvd { u, v, .. } => vec![("cross_cov.u.s", u.s), ("cross_cov.v.s", v.s)],
            CrossCovParam::ScaledOrthogonal { basis, .. } => vec![("cross_cov.basis.s", basis.s)],
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            CrossCovParam::ScaledOrthogonal { alpha, .. } => Some(*alpha),
            _ => None,
        }
    }
}

pub fn skew_len(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha.abs() < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (-1,1), got {alpha}")))
    }
}

impl CrossCovParam<Tensor> {
    /// Parameters for an `n x n` block. Skew entries start at zero, so the
    /// orthogonal factors start at the identity.
    pub fn new(kind: CrossCovKind, n: usize, alpha: f64, s: f64) -> Result<Self> {
        let ortho = || OrthoParam {
            skew: Tensor::zeros(1, skew_len(n)),
            s,
        };
        Ok(match kind {
            CrossCovKind::Zero => CrossCovParam::Zero,
            CrossCovKind::BoundedSvd => CrossCovParam::BoundedSvd {
                u: ortho(),
                v: ortho(),
                singular: Tensor::zeros(1, n),
            },
            CrossCovKind::ScaledOrthogonal => {
                check_alpha(alpha)?;
                CrossCovParam::ScaledOrthogonal { basis: ortho(), alpha }
            }
        })
    }

    /// Moves the raw tensors into a parameter store.
    pub fn register(&self, store: &mut ParamStore) -> CrossCovParam<ParamId> {
        let slots: Vec<(&str, Tensor)> = self.slots().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let mut ids = slots.into_iter().map(|(name, t)| store.add(name, t));
        self.map(|_| ids.next().expect("slot count"))
    }

    /// Records the raw tensors as tape leaves.
    pub fn to_tape(&self, tape: &mut Tape) -> CrossCovParam<Var> {
        self.map(|t| tape.constant(t.clone()))
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let need = |t: &Tensor, cols: usize, what: &str| t.expect_shape([1, cols], what);
        match self {
            CrossCovParam::Zero => Ok(()),
            CrossCovParam::BoundedSvd { u, v, singular } => {
                need(&u.skew, skew_len(n), "U skew parameters")?;
                need(&v.skew, skew_len(n), "V skew parameters")?;
                need(singular, n, "singular-value pre-activations")
            }
            CrossCovParam::ScaledOrthogonal { basis, alpha } => {
                check_alpha(*alpha)?;
                need(&basis.skew, skew_len(n), "orthogonal skew parameters")
            }
        }
    }
}

impl CrossCovParam<ParamId> {
    pub fn bind(&self, bound: &[Var]) -> CrossCovParam<Var> {
        self.map(|id| bound[id.0])
    }

    pub fn values(&self, store: &ParamStore) -> CrossCovParam<Tensor> {
        self.map(|id| store.get(*id).clone())
    }
}

/// Number of `-1` entries in `J`: `floor(n / (1 + e^{-s}))` clamped to `[0, n]`.
pub fn reflection_count(n: usize, s: f64) -> usize {
    let r = (n as f64 / (1.0 + (-s).exp())).floor();
    if r.is_nan() {
        0
    } else {
        (r.max(0.0) as usize).min(n)
    }
}

pub fn reflection_matrix(n: usize, s: f64) -> Tensor {
    let r = reflection_count(n, s);
    Tensor::from_fn(n, n, |i, j| {
        if i != j {
            0.0
        } else if i >= n - r {
            -1.0
        } else {
            1.0
        }
    })
}

/// Records `J (I + A)(I - A)⁻¹` on the tape.
pub fn cayley_on_tape(tape: &mut Tape, skew: Var, s: f64, n: usize) -> Result<Var> {
    if n == 0 {
        return Err(Error::dim("orthogonal factor of order 0"));
    }
    let a = tape.skew(skew, n)?;
    let eye = tape.constant(Tensor::eye(n));
    let plus = tape.add(eye, a)?;
    let minus = tape.sub(eye, a)?;
    let inv = tape.inverse(minus).map_err(|e| match e {
        Error::Numeric(m) => Error::numeric(format!("Cayley transform: I - A is singular ({m})")),
        other => other,
    })?;
    let cay = tape.matmul(plus, inv)?;
    if reflection_count(n, s) == 0 {
        Ok(cay)
    } else {
        let j = tape.constant(reflection_matrix(n, s));
        tape.matmul(j, cay)
    }
}

pub fn cayley_orthogonal(skew_params: &[f64], s: f64, n: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::row(skew_params));
    let o = cayley_on_tape(&mut tape, p, s, n)?;
    Ok(tape.value(o).clone())
}

/// `C` as recorded on a tape, tagged with the structure the KL term can exploit.
#[derive(Clone, Copy, Debug)]
pub enum Coupling<T> {
    Independent,
    General(T),
    ScaledOrthogonal { c: T, alpha: f64 },
}

impl<T> Coupling<T> {
    pub fn matrix(&self) -> Option<&T> {
        match self {
            Coupling::Independent => None,
            Coupling::General(c) => Some(c),
            Coupling::ScaledOrthogonal { c, .. } => Some(c),
        }
    }
}

pub fn materialize_on_tape(tape: &mut Tape, p: &CrossCovParam<Var>, n: usize) -> Result<Coupling<Var>> {
    match p {
        CrossCovParam::Zero => Ok(Coupling::Independent),
        CrossCovParam::BoundedSvd { u, v, singular } => {
            let uo = cayley_on_tape(tape, u.skew, u.s, n)?;
            let vo = cayley_on_tape(tape, v.skew, v.s, n)?;
            let half = tape.scale(*singular, 0.5)?;
            // (1 - e^{-x}) / (1 + e^{-x}) = tanh(x / 2)
            let sv = tape.tanh(half)?;
            let us = tape.mul_row(uo, sv)?;
            let vt = tape.transpose(vo)?;
            Ok(Coupling::General(tape.matmul(us, vt)?))
        }
        CrossCovParam::ScaledOrthogonal { basis, alpha } => {
            check_alpha(*alpha)?;
            let o = cayley_on_tape(tape, basis.skew, basis.s, n)?;
            Ok(Coupling::ScaledOrthogonal {
                c: tape.scale(o, *alpha)?,
                alpha: *alpha,
            })
        }
    }
}

/// Materializes `C` (`n₂ x n₁`). Only square blocks are supported.
pub fn materialize_c(p: &CrossCovParam<Tensor>, n1: usize, n2: usize) -> Result<Tensor> {
    if n1 != n2 {
        return Err(Error::dim(format!(
            "cross-covariance parameterizations need n1 = n2, got {n1} and {n2}"
        )));
    }
    p.validate(n1)?;
    let mut tape = Tape::new();
    let vars = p.to_tape(&mut tape);
    Ok(match materialize_on_tape(&mut tape, &vars, n1)? {
        Coupling::Independent => Tensor::zeros(n2, n1),
        Coupling::General(c) | Coupling::ScaledOrthogonal { c, .. } => tape.value(c).clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaValidity {
    PositiveDefinite,
    SemidefiniteOnly,
    Invalid,
}

/// Classifies `Σ_C` by the largest singular value of `C`.
pub fn validate_sigma_c(c: &Tensor) -> Result<SigmaValidity> {
    c.ensure_finite("cross-covariance")?;
    if c.is_empty() {
        return Ok(SigmaValidity::PositiveDefinite);
    }
    let s1 = linalg::singular_values(c)?[0];
    Ok(if s1 < 1.0 - STRICT_MARGIN {
        SigmaValidity::PositiveDefinite
    } else if s1 <= 1.0 + STRICT_MARGIN {
        SigmaValidity::SemidefiniteOnly
    } else {
        SigmaValidity::Invalid
    })
}

/// The full `(n₁+n₂) x (n₁+n₂)` prior covariance.
pub fn assemble_sigma_c(c: &Tensor) -> Tensor {
    let (n2, n1) = (c.rows(), c.cols());
    let n = n1 + n2;
    Tensor::from_fn(n, n, |i, j| match (i < n1, j < n1) {
        (true, true) | (false, false) => f64::from(i == j),
        (true, false) => c.get(j - n1, i),
        (false, true) => c.get(i - n1, j),
    })
}

#[derive(Clone, Debug)]
pub struct BlockInverseTerms {
    /// `(I - CᵀC)⁻¹`
    pub d1: Tensor,
    /// `(I - CCᵀ)⁻¹`
    pub d2: Tensor,
    /// `ln|Σ_C| = ln|I - CᵀC|`
    pub log_det_sigma: f64,
    c: Tensor,
}

impl BlockInverseTerms {
    /// `Σ_C⁻¹ = [[D₁, -D₁Cᵀ], [-D₂C, D₂]]`.
    pub fn assembled_inverse(&self) -> Tensor {
        let (n2, n1) = (self.c.rows(), self.c.cols());
        let upper = gemm(&self.d1, false, &self.c, true).expect("shapes").scale(-1.0);
        let lower = self.d2.matmul(&self.c).expect("shapes").scale(-1.0);
        let n = n1 + n2;
        Tensor::from_fn(n, n, |i, j| match (i < n1, j < n1) {
            (true, true) => self.d1.get(i, j),
            (true, false) => upper.get(i, j - n1),
            (false, true) => lower.get(i - n1, j),
            (false, false) => self.d2.get(i - n1, j - n1),
        })
    }
}

pub fn block_inverse_terms(c: &Tensor) -> Result<BlockInverseTerms> {
    match validate_sigma_c(c)? {
        SigmaValidity::PositiveDefinite => {}
        other => {
            return Err(Error::Precondition(format!(
                "Σ_C must be positive definite, C classified as {other:?}"
            )))
        }
    }
    let (n2, n1) = (c.rows(), c.cols());
    let ctc = gemm(c, true, c, false)?;
    let cct = gemm(c, false, c, true)?;
    let a1 = Tensor::eye(n1).sub(&ctc)?;
    let a2 = Tensor::eye(n2).sub(&cct)?;
    let lu1 = linalg::Lu::factor(&a1)?;
    let (_, log_det_sigma) = lu1.log_det();
    Ok(BlockInverseTerms {
        d1: symmetrize(lu1.inverse()?),
        d2: symmetrize(linalg::inverse(&a2)?),
        log_det_sigma,
        c: c.clone(),
    })
}

fn symmetrize(a: Tensor) -> Tensor {
    let t = a.transpose();
    a.add(&t).expect("square").scale(0.5)
}
