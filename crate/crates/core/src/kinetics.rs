//! Specific growth-rate laws μ(s) for the biomass.
//!
//! Every shipped law is bounded, continuous and Lipschitz, vanishes at
//! `s = 0` and is strictly positive for `s > 0`. All laws are extended by
//! zero on `s < 0`, which keeps those properties on the whole real line
//! (Monod and Haldane would otherwise be singular at `s = -K_S`).
//!
//! | kind            | formula for `s >= 0`                 | `sup μ`          | Lipschitz        |
//! |-----------------|--------------------------------------|------------------|------------------|
//! | `Monod`         | `mu_max s / (K_S + s)`               | `mu_max`         | `mu_max / K_S`   |
//! | `Haldane`       | `mu_max s / (K_S + s + s^2 / K_I)`   | golden section   | scanned `|μ'|`   |
//! | `CappedLinear`  | `min(slope s, cap)`                  | `cap`            | `slope`          |
//! | `Zero`          | `0`                                  | `0`              | `0`              |
//!
//! A plain linear law `α s` is deliberately absent: it is unbounded.

use serde::{Deserialize, Serialize};

/// Errors raised by growth-rate evaluation or validation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KineticsError {
    #[error("growth rate evaluated at non-finite concentration {0}")]
    NonFiniteInput(f64),
    #[error("kinetics parameter `{name}` must be positive and finite, got {value}")]
    InvalidParameter { name: &'static str, value: f64 },
}

/// A growth-rate law. Immutable once built; evaluation is pure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GrowthRateModel {
    /// `mu_max [1/s]`, `k_s [mol/m³]`.
    Monod { mu_max: f64, k_s: f64 },
    /// Substrate-inhibited Monod, `k_i [mol/m³]` is the inhibition constant.
    Haldane { mu_max: f64, k_s: f64, k_i: f64 },
    /// `slope [m³/(mol·s)]`, `cap [1/s]`.
    CappedLinear { slope: f64, cap: f64 },
    Zero,
}

const GOLDEN_REL_TOL: f64 = 1e-10;
const HALDANE_SCAN_POINTS: usize = 4000;

impl GrowthRateModel {
    pub fn monod(mu_max: f64, k_s: f64) -> Self {
        Self::Monod { mu_max, k_s }
    }

    pub fn haldane(mu_max: f64, k_s: f64, k_i: f64) -> Self {
        Self::Haldane { mu_max, k_s, k_i }
    }

    pub fn capped_linear(slope: f64, cap: f64) -> Self {
        Self::CappedLinear { slope, cap }
    }

    /// Checks that every parameter is positive and finite.
    pub fn validate(&self) -> Result<(), KineticsError> {
        let check = |name: &'static str, value: f64| {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(KineticsError::InvalidParameter { name, value })
            }
        };
        match *self {
            Self::Monod { mu_max, k_s } => {
                check("mu_max", mu_max)?;
                check("k_s", k_s)
            }
            Self::Haldane { mu_max, k_s, k_i } => {
                check("mu_max", mu_max)?;
                check("k_s", k_s)?;
                check("k_i", k_i)
            }
            Self::CappedLinear { slope, cap } => {
                check("slope", slope)?;
                check("cap", cap)
            }
            Self::Zero => Ok(()),
        }
    }

    /// Evaluates μ(s). Non-finite input is rejected.
    pub fn eval(&self, s: f64) -> Result<f64, KineticsError> {
        if !s.is_finite() {
            return Err(KineticsError::NonFiniteInput(s));
        }
        Ok(self.eval_finite(s))
    }

    /// Evaluation without the finiteness check; `s` must be finite.
    pub(crate) fn eval_finite(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        match *self {
            Self::Monod { mu_max, k_s } => mu_max * s / (k_s + s),
            Self::Haldane { mu_max, k_s, k_i } => mu_max * s / (k_s + s + s * s / k_i),
            Self::CappedLinear { slope, cap } => (slope * s).min(cap),
            Self::Zero => 0.0,
        }
    }

    /// Specific rate `μ(s) / s` for `s > 0`, extended by its limit `μ'(0+)`
    /// at `s <= 0`. Finite for every model.
    pub fn specific_rate(&self, s: f64) -> f64 {
        let s = s.max(0.0);
        match *self {
            Self::Monod { mu_max, k_s } => mu_max / (k_s + s),
            Self::Haldane { mu_max, k_s, k_i } => mu_max / (k_s + s + s * s / k_i),
            Self::CappedLinear { slope, cap } => if s > 0.0 { slope.min(cap / s) } else { slope },
            Self::Zero => 0.0,
        }
    }

    /// `sup_s μ(s)` over the real line.
    pub fn sup(&self) -> f64 {
        match *self {
            Self::Monod { mu_max, .. } => mu_max,
            Self::CappedLinear { cap, .. } => cap,
            Self::Zero => 0.0,
            Self::Haldane { k_s, k_i, .. } => {
                let upper = 1e3 * k_s.max(k_i);
                let s_star = golden_section_max(|s| self.eval_finite(s), 0.0, upper);
                self.eval_finite(s_star)
            }
        }
    }

    /// A valid Lipschitz constant of μ on the real line (not necessarily tight).
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Self::Monod { mu_max, k_s } => mu_max / k_s,
            Self::CappedLinear { slope, .. } => slope,
            Self::Zero => 0.0,
            Self::Haldane { mu_max, k_s, k_i } => {
                let derivative = |s: f64| {
                    let den = k_s + s + s * s / k_i;
                    mu_max * (k_s - s * s / k_i) / (den * den)
                };
                let upper = 1e3 * k_s.max(k_i);
                // Scan on a grid that is geometric near the origin, then polish
                // the extreme slopes of both signs.
                let grid: Vec<f64> = (0..=HALDANE_SCAN_POINTS)
                    .map(|i| {
                        let x = i as f64 / HALDANE_SCAN_POINTS as f64;
                        upper * x * x * x
                    })
                    .collect();
                let mut best = derivative(0.0).abs();
                for w in 1..grid.len() - 1 {
                    let (a, b, c) = (grid[w - 1], grid[w], grid[w + 1]);
                    let db = derivative(b);
                    if db >= derivative(a) && db >= derivative(c) {
                        let s = golden_section_max(derivative, a, c);
                        best = best.max(derivative(s).abs());
                    }
                    if db <= derivative(a) && db <= derivative(c) {
                        let s = golden_section_max(|x| -derivative(x), a, c);
                        best = best.max(derivative(s).abs());
                    }
                }
                best * (1.0 + 1e-9)
            }
        }
    }

    /// Whether μ is nondecreasing on `[0, ∞)`.
    pub fn is_monotone(&self) -> bool {
        !matches!(self, Self::Haldane { .. })
    }
}

/// Maximiser of a unimodal function on `[lo, hi]` by golden-section search.
pub(crate) fn golden_section_max<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..500 {
        if (hi - lo).abs() <= GOLDEN_REL_TOL * (lo.abs() + hi.abs()).max(f64::MIN_POSITIVE) {
            break;
        }
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shipped() -> Vec<GrowthRateModel> {
        vec![
            GrowthRateModel::monod(1.0, 1.0),
            GrowthRateModel::monod(0.7, 2.0),
            GrowthRateModel::haldane(1.0, 1.0, 4.0),
            GrowthRateModel::haldane(2.0, 0.1, 30.0),
            GrowthRateModel::capped_linear(3.0, 1.0),
            GrowthRateModel::Zero,
        ]
    }

    #[test]
    fn monod_values() {
        let m = GrowthRateModel::monod(1.0, 1.0);
        assert_eq!(m.eval(0.0).unwrap(), 0.0);
        assert_eq!(m.eval(1.0).unwrap(), 0.5);
        assert_eq!(m.eval(-3.0).unwrap(), 0.0);
    }

    #[test]
    fn specific_rate_times_s_is_mu() {
        for m in shipped() {
            for s in [1e-9, 0.01, 0.3, 1.0, 7.5, 100.0] {
                let (lhs, rhs) = (m.specific_rate(s) * s, m.eval(s).unwrap());
                assert!((lhs - rhs).abs() <= 1e-15 * rhs.max(1.0), "{m:?} at {s}");
            }
            let h = 1e-9;
            assert!((m.specific_rate(0.0) - m.eval(h).unwrap() / h).abs() <= 1e-6 * m.specific_rate(0.0).max(1.0));
            assert_eq!(m.specific_rate(-1.0), m.specific_rate(0.0));
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let m = GrowthRateModel::monod(1.0, 1.0);
        assert!(matches!(m.eval(f64::NAN), Err(KineticsError::NonFiniteInput(_))));
        assert!(m.eval(f64::INFINITY).is_err());
    }

    #[test]
    fn haldane_argmax_by_grid_scan() {
        let m = GrowthRateModel::haldane(1.0, 1.0, 4.0);
        // dense scan on [0, 100]
        let n = 1_000_000;
        let (mut best_s, mut best_v) = (0.0, f64::MIN);
        for i in 0..=n {
            let s = 100.0 * i as f64 / n as f64;
            let v = m.eval(s).unwrap();
            if v > best_v {
                best_v = v;
                best_s = s;
            }
        }
        assert!((best_s - 2.0).abs() < 1e-3, "argmax {best_s}");
        assert!((best_v - 0.5).abs() < 1e-9);
        assert!((m.sup() - 0.5).abs() < 1e-12, "sup {}", m.sup());
    }

    #[test]
    fn sup_values() {
        assert_eq!(GrowthRateModel::monod(0.7, 2.0).sup(), 0.7);
        assert_eq!(GrowthRateModel::Zero.sup(), 0.0);
        assert_eq!(GrowthRateModel::capped_linear(3.0, 1.0).sup(), 1.0);
    }

    #[test]
    fn monod_lipschitz_matches_scanned_derivative() {
        let m = GrowthRateModel::monod(1.0, 2.0);
        let h = 1e-6;
        let scanned = (0..20_000)
            .map(|i| {
                let s = i as f64 * 1e-3;
                ((m.eval(s + h).unwrap() - m.eval(s).unwrap()) / h).abs()
            })
            .fold(0.0, f64::max);
        assert!((scanned - 0.5).abs() < 1e-5, "scanned {scanned}");
        assert_eq!(m.lipschitz(), 0.5);
    }

    #[test]
    fn trivial_lipschitz_constants() {
        assert_eq!(GrowthRateModel::capped_linear(3.0, 1.0).lipschitz(), 3.0);
        assert_eq!(GrowthRateModel::Zero.lipschitz(), 0.0);
    }

    #[test]
    fn haldane_lipschitz_dominates_scan() {
        let m = GrowthRateModel::haldane(2.0, 0.1, 30.0);
        let h = 1e-7;
        let scanned = (0..200_000)
            .map(|i| {
                let s = i as f64 * 1e-4;
                ((m.eval(s + h).unwrap() - m.eval(s).unwrap()) / h).abs()
            })
            .fold(0.0, f64::max);
        assert!(m.lipschitz() >= scanned * (1.0 - 1e-5));
        assert!(m.lipschitz() <= scanned * 1.01);
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(GrowthRateModel::monod(0.0, 1.0).validate().is_err());
        assert!(GrowthRateModel::haldane(1.0, 1.0, f64::NAN).validate().is_err());
        assert!(GrowthRateModel::capped_linear(-1.0, 1.0).validate().is_err());
        assert!(GrowthRateModel::Zero.validate().is_ok());
    }

    #[test]
    fn random_pairs_respect_lipschitz_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in shipped() {
            let lip = m.lipschitz();
            let sup = m.sup();
            for _ in 0..100_000 {
                let a: f64 = rng.random_range(-5.0..50.0);
                let b: f64 = rng.random_range(-5.0..50.0);
                let (fa, fb) = (m.eval(a).unwrap(), m.eval(b).unwrap());
                assert!((fa - fb).abs() <= lip * (a - b).abs() + 1e-12, "{m:?} at {a},{b}");
                assert!(fa >= 0.0 && fa <= sup + 1e-12, "{m:?} at {a}");
            }
        }
    }

    #[test]
    fn monotone_laws_are_nondecreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in shipped().into_iter().filter(|m| m.is_monotone()) {
            for _ in 0..20_000 {
                let a: f64 = rng.random_range(0.0..40.0);
                let b = a + rng.random_range(0.0..5.0);
                assert!(m.eval(b).unwrap() >= m.eval(a).unwrap());
            }
        }
    }
}
