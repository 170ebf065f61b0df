//! Regression losses over the 4 motion dimensions.
//!
//! With `z = (u_hat - u_bar) / sigma` the residual likelihood loss is
//!
//! ```text
//! L = sum_d -log Q(z_d)  -  log G(z | flow)  +  sum_d log sigma_d
//! ```
//!
//! where `Q` is a fixed unit-scale prior and `G` the flow density. The fixed
//! prior baselines drop the flow term; with `sigma == 1` they reduce to
//! `0.5 |u_hat - u_bar|^2 + 4 * 0.5 ln(2 pi)` (Gaussian) and
//! `|u_hat - u_bar|_1 + 4 ln 2` (Laplacian).

use std::f64::consts::{LN_2, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Flow, DIMS};
use crate::tensor::{ParamSet, Real, Tape, Tensor, Var};

/// `0.5 ln(2 pi)`, the per-dimension Gaussian normalizer.
pub const GAUSSIAN_LOG_NORM: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    #[default]
    Gaussian,
    Laplacian,
}

impl Prior {
    /// `-log Q(z)` for a single dimension.
    pub fn nll(self, z: f64) -> f64 {
        match self {
            Prior::Gaussian => 0.5 * z * z + GAUSSIAN_LOG_NORM,
            Prior::Laplacian => z.abs() + LN_2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub prior: Prior,
    /// Adds the flow residual term.
    pub rle: bool,
    /// Only used when `rle` is off: learn sigma (heteroscedastic NLL) or pin it to 1.
    pub learn_sigma: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            prior: Prior::Gaussian,
            rle: true,
            learn_sigma: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTarget {
    pub u_hat: [f64; DIMS],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionDistribution {
    pub u_bar: [f64; DIMS],
    pub sigma: [f64; DIMS],
}

impl PredictionDistribution {
    pub fn new(u_bar: [f64; DIMS], sigma: [f64; DIMS]) -> Result<Self> {
        if sigma.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::param("sigma", format!("must be positive, got {sigma:?}")));
        }
        Ok(Self { u_bar, sigma })
    }
}

/// Loss and its parts, all scalar tape variables.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub prior_nll: Var,
    pub flow_nll: Option<Var>,
    pub log_sigma: Option<Var>,
}

/// Plain-valued copy of [`LossTerms`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub prior_nll: f64,
    pub flow_nll: f64,
    pub log_sigma: f64,
}

impl LossTerms {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0].as_f64());
        LossBreakdown {
            total: get(Some(self.total)),
            prior_nll: get(Some(self.prior_nll)),
            flow_nll: get(self.flow_nll),
            log_sigma: get(self.log_sigma),
        }
    }

    fn check<T: Real>(&self, tape: &Tape<T>) -> Result<()> {
        let named = [
            ("prior term", Some(self.prior_nll)),
            ("flow term", self.flow_nll),
            ("log-sigma term", self.log_sigma),
            ("total loss", Some(self.total)),
        ];
        for (name, v) in named {
            if let Some(v) = v {
                if !tape.value(v).is_finite() {
                    return Err(Error::NonFinite(name.into()));
                }
            }
        }
        Ok(())
    }
}

fn prior_nll_on_tape<T: Real>(tape: &mut Tape<T>, z: Var, prior: Prior) -> Var {
    let n = tape.value(z).len() as f64;
    let (per_dim, norm) = match prior {
        Prior::Gaussian => {
            let sq = tape.square(z);
            (tape.scale(sq, T::from_f64(0.5)), GAUSSIAN_LOG_NORM)
        }
        Prior::Laplacian => (tape.abs(z), LN_2),
    };
    let s = tape.sum(per_dim);
    tape.add_scalar(s, T::from_f64(n * norm))
}

/// Residual log-likelihood loss for one sample. `mean`, `sigma` and `target`
/// are `[4]` variables; `sigma` must be positive.
#[allow(clippy::too_many_arguments)]
pub fn rle_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    vars: &[Var],
    flow: &Flow,
    mean: Var,
    sigma: Var,
    target: Var,
    prior: Prior,
) -> Result<LossTerms> {
    let diff = tape.sub(target, mean)?;
    let z = tape.div(diff, sigma)?;
    let prior_nll = prior_nll_on_tape(tape, z, prior);
    let log_g = flow.log_prob_on_tape(tape, vars, z)?;
    let flow_nll = tape.scale(log_g, -T::one());
    let ls = tape.log(sigma);
    let log_sigma = tape.sum(ls);
    let partial = tape.add(prior_nll, flow_nll)?;
    let total = tape.add(partial, log_sigma)?;
    let terms = LossTerms {
        total,
        prior_nll,
        flow_nll: Some(flow_nll),
        log_sigma: Some(log_sigma),
    };
    terms.check(tape)?;
    Ok(terms)
}

/// Fixed-prior negative log-likelihood. With `sigma == None` the scale is
/// pinned to 1.
pub fn fixed_prior_nll_on_tape<T: Real>(
    tape: &mut Tape<T>,
    mean: Var,
    sigma: Option<Var>,
    target: Var,
    prior: Prior,
) -> Result<LossTerms> {
    let diff = tape.sub(target, mean)?;
    let (z, log_sigma) = match sigma {
        Some(s) => {
            let z = tape.div(diff, s)?;
            let ls = tape.log(s);
            (z, Some(tape.sum(ls)))
        }
        None => (diff, None),
    };
    let prior_nll = prior_nll_on_tape(tape, z, prior);
    let total = match log_sigma {
        Some(ls) => tape.add(prior_nll, ls)?,
        None => prior_nll,
    };
    let terms = LossTerms {
        total,
        prior_nll,
        flow_nll: None,
        log_sigma,
    };
    terms.check(tape)?;
    Ok(terms)
}

/// Dispatches on `cfg`: flow loss, learned-sigma NLL or unit-sigma NLL.
#[allow(clippy::too_many_arguments)]
pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    vars: &[Var],
    flow: &Flow,
    mean: Var,
    sigma: Var,
    target: Var,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    if cfg.rle {
        rle_loss_on_tape(tape, vars, flow, mean, sigma, target, cfg.prior)
    } else if cfg.learn_sigma {
        fixed_prior_nll_on_tape(tape, mean, Some(sigma), target, cfg.prior)
    } else {
        fixed_prior_nll_on_tape(tape, mean, None, target, cfg.prior)
    }
}

fn vec_var<T: Real>(tape: &mut Tape<T>, v: &[f64; DIMS]) -> Var {
    tape.constant(Tensor::from_vec(v.iter().map(|&x| T::from_f64(x)).collect()))
}

pub fn rle_loss<T: Real>(
    pred: &PredictionDistribution,
    target: &RegressionTarget,
    flow: &Flow,
    params: &ParamSet<T>,
    prior: Prior,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let mean = vec_var(&mut tape, &pred.u_bar);
    let sigma = vec_var(&mut tape, &pred.sigma);
    let tgt = vec_var(&mut tape, &target.u_hat);
    let terms = rle_loss_on_tape(&mut tape, &vars, flow, mean, sigma, tgt, prior)?;
    Ok(terms.values(&tape))
}

pub fn fixed_prior_nll(
    pred: &PredictionDistribution,
    target: &RegressionTarget,
    prior: Prior,
    learn_sigma: bool,
) -> Result<LossBreakdown> {
    let mut tape = Tape::<f64>::new();
    let mean = vec_var(&mut tape, &pred.u_bar);
    let tgt = vec_var(&mut tape, &target.u_hat);
    let sigma = learn_sigma.then(|| vec_var(&mut tape, &pred.sigma));
    let terms = fixed_prior_nll_on_tape(&mut tape, mean, sigma, tgt, prior)?;
    Ok(terms.values(&tape))
}

/// `-log N(0; 0, I_4) = 2 ln(2 pi)`.
pub fn standard_normal_nll_at_origin() -> f64 {
    (DIMS as f64) / 2.0 * TAU.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_flow() -> (Flow, ParamSet<f64>) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flow = Flow::new(&mut params, "flow", &FlowConfig::default(), &mut rng).unwrap();
        (flow, params.cast())
    }

    fn unit(u: [f64; 4]) -> PredictionDistribution {
        PredictionDistribution::new(u, [1.0; 4]).unwrap()
    }

    #[test]
    fn rle_closed_forms_at_zero_residual() {
        let (flow, params) = identity_flow();
        let u = [0.3, -0.2, 0.1, 0.05];
        let tgt = RegressionTarget { u_hat: u };
        let g = rle_loss(&unit(u), &tgt, &flow, &params, Prior::Gaussian).unwrap();
        assert!((g.total - 4.0 * TAU.ln()).abs() < 1e-12);
        assert!((g.total - 7.35151).abs() < 1e-5);
        let l = rle_loss(&unit(u), &tgt, &flow, &params, Prior::Laplacian).unwrap();
        assert!((l.total - (4.0 * LN_2 + 2.0 * TAU.ln())).abs() < 1e-12);
    }

    #[test]
    fn fixed_prior_closed_forms() {
        let tgt = RegressionTarget { u_hat: [1.0, 0.0, 0.0, 0.0] };
        let g = fixed_prior_nll(&unit([0.0; 4]), &tgt, Prior::Gaussian, false).unwrap();
        assert!((g.total - (0.5 + 4.0 * GAUSSIAN_LOG_NORM)).abs() < 1e-12);
        let tgt = RegressionTarget { u_hat: [1.0, -1.0, 0.0, 0.0] };
        let l = fixed_prior_nll(&unit([0.0; 4]), &tgt, Prior::Laplacian, false).unwrap();
        assert!((l.total - (2.0 + 4.0 * LN_2)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_gradient_is_residual() {
        let mut tape = Tape::<f64>::new();
        let mean = tape.param(Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.0]));
        let tgt = tape.constant(Tensor::from_vec(vec![1.0, 1.0, -1.0, 0.25]));
        let terms = fixed_prior_nll_on_tape(&mut tape, mean, None, tgt, Prior::Gaussian).unwrap();
        let g = tape.backward(terms.total).unwrap();
        assert_eq!(g.get(mean).unwrap(), &[-0.5, -2.0, 3.0, -0.25]);
    }

    #[test]
    fn sigma_must_be_positive() {
        assert!(PredictionDistribution::new([0.0; 4], [1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn non_finite_term_is_named() {
        let mut tape = Tape::<f64>::new();
        let mean = tape.constant(Tensor::from_vec(vec![0.0; 4]));
        let sigma = tape.constant(Tensor::from_vec(vec![1.0; 4]));
        let tgt = tape.constant(Tensor::from_vec(vec![f64::INFINITY, 0.0, 0.0, 0.0]));
        let err = fixed_prior_nll_on_tape(&mut tape, mean, Some(sigma), tgt, Prior::Laplacian).unwrap_err();
        assert!(err.to_string().contains("prior term"), "{err}");
    }
}
