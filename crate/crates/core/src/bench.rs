//! Synthetic users built from flipped Branin and McCormick functions.
//!
//! Both functions are evaluated on the unit square through an affine map onto
//! their usual domains and negated, so every user is maximized. A user shifts
//! the input by `δ` (in unit coordinates) and scales the output by `S`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng;
use crate::DesignPoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseFunction {
    Branin,
    Mccormick,
}

impl BaseFunction {
    pub const DIM: usize = 2;

    /// Native `(low, high)` bounds per input.
    pub fn bounds(self) -> [(f64, f64); 2] {
        match self {
            BaseFunction::Branin => [(-5.0, 10.0), (0.0, 15.0)],
            BaseFunction::Mccormick => [(-1.5, 4.0), (-3.0, 4.0)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BaseFunction::Branin => "branin",
            BaseFunction::Mccormick => "mccormick",
        }
    }

    /// Unit-square coordinates to native coordinates; linear beyond `[0, 1]`.
    pub fn to_native(self, x: &[f64]) -> [f64; 2] {
        let b = self.bounds();
        [b[0].0 + x[0] * (b[0].1 - b[0].0), b[1].0 + x[1] * (b[1].1 - b[1].0)]
    }

    pub fn to_unit(self, z: &[f64]) -> [f64; 2] {
        let b = self.bounds();
        [(z[0] - b[0].0) / (b[0].1 - b[0].0), (z[1] - b[1].0) / (b[1].1 - b[1].0)]
    }

    /// The textbook function at a native point (minimization form).
    pub fn native_value(self, z: [f64; 2]) -> f64 {
        let [x1, x2] = z;
        match self {
            BaseFunction::Branin => {
                let b = 5.1 / (4.0 * PI * PI);
                let c = 5.0 / PI;
                let t = 1.0 / (8.0 * PI);
                let q = x2 - b * x1 * x1 + c * x1 - 6.0;
                q * q + 10.0 * (1.0 - t) * x1.cos() + 10.0
            }
            BaseFunction::Mccormick => (x1 + x2).sin() + (x1 - x2) * (x1 - x2) - 1.5 * x1 + 2.5 * x2 + 1.0,
        }
    }

    /// Flipped value at a unit-square point.
    pub fn eval(self, x: &[f64]) -> f64 {
        -self.native_value(self.to_native(x))
    }
}

impl std::str::FromStr for BaseFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branin" => Ok(BaseFunction::Branin),
            "mccormick" => Ok(BaseFunction::Mccormick),
            other => Err(Error::Config(format!("unknown base function `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUser {
    pub base: BaseFunction,
    pub delta: Vec<f64>,
    pub scale: f64,
    pub seed: u64,
}

impl SyntheticUser {
    /// The unshifted, unscaled base function.
    pub fn identity(base: BaseFunction) -> Self {
        Self {
            base,
            delta: vec![0.0; BaseFunction::DIM],
            scale: 1.0,
            seed: 0,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let shifted = [x[0] + self.delta[0], x[1] + self.delta[1]];
        self.scale * self.base.eval(&shifted)
    }
}

/// Draws `δ_n ~ U(−shift/2, shift/2)` and `S ~ U(1 − scale/2, 1 + scale/2)`.
pub fn make_user(base: BaseFunction, seed: u64, shift_range: f64, scale_range: f64) -> Result<SyntheticUser> {
    if !(shift_range >= 0.0 && scale_range >= 0.0) {
        return Err(Error::InvalidParameter("shift and scale ranges must be non-negative".into()));
    }
    let mut r = rng::stream(seed);
    let delta = (0..BaseFunction::DIM)
        .map(|_| (r.gen::<f64>() - 0.5) * shift_range)
        .collect();
    let scale = 1.0 + (r.gen::<f64>() - 0.5) * scale_range;
    Ok(SyntheticUser {
        base,
        delta,
        scale,
        seed,
    })
}

/// Grid search over `{i / res}²`, `i = 0..=res`. Ties keep the first point in
/// row-major order.
pub fn oracle_optimum(user: &SyntheticUser, resolution: usize) -> (DesignPoint, f64) {
    let res = resolution.max(1);
    let mut best = (vec![0.0, 0.0], f64::NEG_INFINITY);
    for i in 0..=res {
        for j in 0..=res {
            let x = [i as f64 / res as f64, j as f64 / res as f64];
            let v = user.eval(&x);
            if v > best.1 {
                best = (x.to_vec(), v);
            }
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretCurve {
    pub per_iteration: Vec<f64>,
    pub best_so_far: Vec<f64>,
    pub cumulative: f64,
}

pub fn regret_curve(optimum: f64, ys: &[f64]) -> RegretCurve {
    let per_iteration: Vec<f64> = ys.iter().map(|y| optimum - y).collect();
    let mut best = f64::NEG_INFINITY;
    let best_so_far = ys
        .iter()
        .map(|y| {
            best = best.max(*y);
            optimum - best
        })
        .collect();
    RegretCurve {
        cumulative: per_iteration.iter().sum(),
        per_iteration,
        best_so_far,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn branin_optimum() {
        let x = BaseFunction::Branin.to_unit(&[PI, 2.275]);
        assert!((x[0] - 0.542_772).abs() < 1e-6 && (x[1] - 0.151_667).abs() < 1e-6);
        assert!((BaseFunction::Branin.eval(&x) + 0.397_887_357_729_738).abs() < 1e-12);
        for z in [[-PI, 12.275], [9.424_78, 2.475]] {
            let v = BaseFunction::Branin.eval(&BaseFunction::Branin.to_unit(&z));
            assert!((v + 0.397_887).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn mccormick_optimum() {
        let x = BaseFunction::Mccormick.to_unit(&[-0.54719, -1.54719]);
        assert!((x[0] - 0.173_238).abs() < 1e-6 && (x[1] - 0.207_544).abs() < 1e-6);
        assert!((BaseFunction::Mccormick.eval(&x) - 1.913_222_954_882_274).abs() < 1e-9);
    }

    #[test]
    fn zero_ranges_give_the_base_function() {
        let u = make_user(BaseFunction::Branin, 4, 0.0, 0.0).unwrap();
        assert_eq!(u.delta, vec![0.0, 0.0]);
        assert_eq!(u.scale, 1.0);
        assert_eq!(u.eval(&[0.3, 0.8]), BaseFunction::Branin.eval(&[0.3, 0.8]));
    }

    #[test]
    fn user_draws_respect_ranges_and_seed() {
        for seed in 0..200 {
            let u = make_user(BaseFunction::Branin, seed, 0.3, 0.2).unwrap();
            assert!(u.delta.iter().all(|d| d.abs() <= 0.15));
            assert!((0.9..=1.1).contains(&u.scale));
            assert_eq!(u, make_user(BaseFunction::Branin, seed, 0.3, 0.2).unwrap());
        }
        assert!(make_user(BaseFunction::Branin, 0, -1.0, 0.0).is_err());
    }

    #[test]
    fn scale_multiplies_output() {
        let u = SyntheticUser {
            scale: 2.0,
            ..SyntheticUser::identity(BaseFunction::Mccormick)
        };
        assert_eq!(u.eval(&[0.1, 0.9]), 2.0 * BaseFunction::Mccormick.eval(&[0.1, 0.9]));
    }

    #[test]
    fn shift_moves_the_optimum_the_other_way() {
        let base = SyntheticUser::identity(BaseFunction::Mccormick);
        let shifted = SyntheticUser {
            delta: vec![0.1, -0.05],
            ..base.clone()
        };
        let (a, _) = oracle_optimum(&base, 200);
        let (b, _) = oracle_optimum(&shifted, 200);
        assert!((b[0] - (a[0] - 0.1)).abs() <= 0.01);
        assert!((b[1] - (a[1] + 0.05)).abs() <= 0.01);
    }

    #[test]
    fn oracle_reaches_the_analytic_optimum() {
        let (_, v) = oracle_optimum(&SyntheticUser::identity(BaseFunction::Branin), 500);
        assert!((v + 0.397_887).abs() < 1e-3);
        let (_, v) = oracle_optimum(&SyntheticUser::identity(BaseFunction::Mccormick), 500);
        assert!((v - 1.913_223).abs() < 1e-3);
    }

    #[test]
    fn finer_oracle_grid_never_loses() {
        for seed in 0..5 {
            let u = make_user(BaseFunction::Branin, seed, 0.4, 0.4).unwrap();
            assert!(oracle_optimum(&u, 200).1 >= oracle_optimum(&u, 100).1);
        }
    }

    #[test]
    fn regret_curve_examples() {
        let c = regret_curve(5.0, &[1.0, 5.0, 3.0]);
        assert_eq!(c.per_iteration, vec![4.0, 0.0, 2.0]);
        assert_eq!(c.best_so_far, vec![4.0, 0.0, 0.0]);
        assert_eq!(c.cumulative, 6.0);
    }

    proptest! {
        #[test]
        fn affine_map_round_trips(x in -1.0f64..2.0, y in -1.0f64..2.0) {
            for f in [BaseFunction::Branin, BaseFunction::Mccormick] {
                let back = f.to_unit(&f.to_native(&[x, y]));
                prop_assert!((back[0] - x).abs() < 1e-12 && (back[1] - y).abs() < 1e-12);
            }
        }

        #[test]
        fn eval_is_the_flipped_native_value(x in 0.0f64..1.0, y in 0.0f64..1.0) {
            for f in [BaseFunction::Branin, BaseFunction::Mccormick] {
                prop_assert_eq!(f.eval(&[x, y]), -f.native_value(f.to_native(&[x, y])));
            }
        }

        #[test]
        fn best_so_far_is_non_increasing(ys in proptest::collection::vec(-100.0f64..0.0, 1..50)) {
            let c = regret_curve(0.0, &ys);
            prop_assert!(c.best_so_far.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(c.per_iteration.iter().all(|r| *r >= 0.0));
        }
    }
}
