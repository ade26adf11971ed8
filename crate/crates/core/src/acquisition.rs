//! Expected improvement, the population/user weight schedule and candidate
//! selection over a fixed grid.

use num_rational::Ratio;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::bnn::PopulationModel;
use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::rng::StreamRng;
use crate::{DesignPoint, Prediction};

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionParams {
    /// Iterations under full population-model control.
    pub alpha1: usize,
    /// Per-iteration decay of the population weight after `alpha1`.
    pub alpha2: f64,
    pub n_candidates: usize,
    /// Random explorations for the first user.
    pub r0: usize,
    /// Reduction of random explorations per subsequent user.
    pub d_r: usize,
}

impl Default for AcquisitionParams {
    fn default() -> Self {
        Self {
            alpha1: 5,
            alpha2: 0.2,
            n_candidates: 1600,
            r0: 6,
            d_r: 2,
        }
    }
}

impl AcquisitionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha2 > 0.0 && self.alpha2.is_finite()) {
            return Err(Error::InvalidParameter("alpha2 must be positive and finite".into()));
        }
        if self.n_candidates == 0 {
            return Err(Error::InvalidParameter("n_candidates must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / SQRT_2PI
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Closed-form expected improvement over `incumbent` for maximization.
pub fn expected_improvement(pred: Prediction, incumbent: f64) -> f64 {
    let gap = pred.mean - incumbent;
    let sigma = pred.variance.max(0.0).sqrt();
    if sigma < 1e-12 {
        return gap.max(0.0);
    }
    let z = gap / sigma;
    (gap * std_normal_cdf(z) + sigma * std_normal_pdf(z)).max(0.0)
}

pub fn expected_improvements(preds: &[Prediction], incumbent: f64) -> Vec<f64> {
    preds.iter().map(|p| expected_improvement(*p, incumbent)).collect()
}

/// `x` as the decimal fraction its shortest representation spells out.
fn decimal_ratio(x: f64) -> Option<Ratio<i128>> {
    let text = format!("{x}");
    let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
    if frac.len() > 30 {
        return None;
    }
    let numer: i128 = format!("{int}{frac}").parse().ok()?;
    Some(Ratio::new(numer, 10i128.checked_pow(frac.len() as u32)?))
}

/// Weight of the population model at iteration `t` (1-based).
///
/// `alpha2` is read as the decimal it prints as and the schedule is evaluated
/// in exact rational arithmetic, so `0.1` decays in exact tenths.
pub fn population_weight(t: usize, alpha1: usize, alpha2: f64) -> f64 {
    if t <= alpha1 {
        return 1.0;
    }
    let steps = t - alpha1;
    let exact = decimal_ratio(alpha2).and_then(|a| {
        let decay = Ratio::new(a.numer().checked_mul(steps as i128)?, *a.denom());
        Some(Ratio::from_integer(1) - decay)
    });
    let w = match exact {
        Some(w) => w.to_f64().expect("bounded rational"),
        None => 1.0 - steps as f64 * alpha2,
    };
    w.max(0.0)
}

/// Random explorations for the `u`-th user (1-based).
pub fn random_exploration_count(u: usize, r0: usize, d_r: usize) -> usize {
    r0.saturating_sub(u.saturating_sub(1).saturating_mul(d_r))
}

/// Evenly spaced grid with `k = ⌊N^(1/d)⌋` points per axis at `i / (k − 1)`.
pub fn candidate_grid(n_candidates: usize, dim: usize) -> Vec<DesignPoint> {
    assert!(dim >= 1, "grid dimension must be positive");
    let mut k = 1usize;
    while (k + 1).checked_pow(dim as u32).is_some_and(|p| p <= n_candidates) {
        k += 1;
    }
    let axis: Vec<f64> = if k == 1 {
        vec![0.5]
    } else {
        (0..k).map(|i| i as f64 / (k - 1) as f64).collect()
    };
    let total = k.pow(dim as u32);
    (0..total)
        .map(|mut idx| {
            let mut p = vec![0.0; dim];
            for slot in p.iter_mut().rev() {
                *slot = axis[idx % k];
                idx /= k;
            }
            p
        })
        .collect()
}

/// Index of the maximum, earliest index on ties. NaN never wins.
pub fn argmax_lowest(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| *v > b) {
            best = Some((i, *v));
        }
    }
    best.map(|(i, _)| i)
}

/// Argmax of `w·pop + (1 − w)·user`; a term whose weight is zero is skipped
/// and need not be supplied.
pub fn mixed_argmax(w: f64, pop_ei: Option<&[f64]>, user_ei: Option<&[f64]>) -> Result<usize> {
    let values: Vec<f64> = if w >= 1.0 {
        pop_ei.ok_or(Error::MissingPopulationModel(w))?.to_vec()
    } else if w <= 0.0 {
        user_ei.ok_or(Error::Empty("user acquisition values"))?.to_vec()
    } else {
        let p = pop_ei.ok_or(Error::MissingPopulationModel(w))?;
        let u = user_ei.ok_or(Error::Empty("user acquisition values"))?;
        if p.len() != u.len() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                found: u.len(),
            });
        }
        p.iter().zip(u).map(|(a, b)| w * a + (1.0 - w) * b).collect()
    };
    argmax_lowest(&values).ok_or(Error::Empty("candidate set"))
}

/// A population model queried with `n_mc` dropout passes.
#[derive(Clone, Copy, Debug)]
pub struct McDropout<'a> {
    pub model: &'a PopulationModel,
    pub n_mc: usize,
}

/// Picks the candidate maximizing the weighted blend of population and user
/// expected improvement at iteration `t`.
pub fn select_candidate(
    candidates: &[DesignPoint],
    population: Option<McDropout<'_>>,
    user: &GpModel,
    t: usize,
    params: &AcquisitionParams,
    incumbent: f64,
    rng: &mut StreamRng,
) -> Result<DesignPoint> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    let w = population_weight(t, params.alpha1, params.alpha2);
    let pop_ei = if w > 0.0 {
        let pop = population.ok_or(Error::MissingPopulationModel(w))?;
        Some(expected_improvements(&pop.model.predict_many(candidates, pop.n_mc, rng)?, incumbent))
    } else {
        None
    };
    let user_ei = if w < 1.0 {
        Some(expected_improvements(&user.predict_many(candidates)?, incumbent))
    } else {
        None
    };
    let i = mixed_argmax(w, pop_ei.as_deref(), user_ei.as_deref())?;
    Ok(candidates[i].clone())
}
