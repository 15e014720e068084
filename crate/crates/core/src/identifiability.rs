//! Sufficient conditions for exact recovery of the relative trust.
//!
//! With `beta = n_s / n` and `beta' = beta - d / n`, recovery is guaranteed
//! asymptotically when every normal agent has exactly `d` stubborn
//! neighbours, rows of `D^r` have at most `alpha * n / 2` nonzeros, and
//!
//! ```text
//! d > max{4, 1 + (H(alpha) + beta' H(alpha / beta')) / (alpha ln(beta' / alpha))}
//! b_min (2d - 3) - 1 - 2 b_max > 0
//! ```
//!
//! where `H` is the binary entropy and `b_min`, `b_max` are the extreme
//! nonzero entries of `B^r`. The ratio is invariant to the log base, so
//! natural logs are used throughout.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentifiabilityParams {
    pub n: usize,
    pub n_stub: usize,
    pub d: usize,
    pub alpha: f64,
    pub b_min: f64,
    pub b_max: f64,
}

impl IdentifiabilityParams {
    pub fn new(n: usize, n_stub: usize, d: usize, alpha: f64, b_min: f64, b_max: f64) -> Result<Self> {
        if n_stub == 0 || n_stub >= n {
            return Err(Error::InvalidParameter(format!(
                "need 0 < n_s < n, got n_s = {n_stub}, n = {n}"
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidParameter(format!("alpha = {alpha} must be positive")));
        }
        if !(b_min <= b_max) {
            return Err(Error::InvalidParameter(format!("b_min = {b_min} exceeds b_max = {b_max}")));
        }
        Ok(Self {
            n,
            n_stub,
            d,
            alpha,
            b_min,
            b_max,
        })
    }

    pub fn beta(&self) -> f64 {
        self.n_stub as f64 / self.n as f64
    }

    pub fn beta_prime(&self) -> f64 {
        self.beta() - self.d as f64 / self.n as f64
    }

    /// `1 - 1/(d-1)`; carried for reports only, no condition uses it.
    pub fn delta(&self) -> Option<f64> {
        (self.d >= 2).then(|| 1.0 - 1.0 / (self.d as f64 - 1.0))
    }
}

/// Smallest and largest nonzero entries of a relative-trust stubborn block.
pub fn b_range(b_r: &DMatrix<f64>) -> Option<(f64, f64)> {
    b_r.iter()
        .copied()
        .filter(|&v| v != 0.0)
        .fold(None, |acc, v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
}

/// Natural-log binary entropy with `0 ln 0 = 0`.
pub fn binary_entropy(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidParameter(format!("entropy argument {x} outside [0, 1]")));
    }
    let term = |p: f64| if p == 0.0 { 0.0 } else { -p * p.ln() };
    Ok(term(x) + term(1.0 - x))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionCheck {
    pub satisfied: bool,
    /// Distance to the boundary; positive iff satisfied.
    pub margin: f64,
    /// Right-hand side (degree) or left-hand side (magnitude).
    pub value: f64,
}

/// Right-hand side of the degree condition at `beta'`.
fn degree_threshold(alpha: f64, beta_prime: f64) -> Result<f64> {
    if !(beta_prime > alpha) {
        return Err(Error::UndefinedCondition(format!(
            "alpha = {alpha} must be below beta' = {beta_prime}"
        )));
    }
    let ratio = (binary_entropy(alpha.min(1.0))? + beta_prime * binary_entropy(alpha / beta_prime)?)
        / (alpha * (beta_prime / alpha).ln());
    Ok(f64::max(4.0, 1.0 + ratio))
}

pub fn check_degree_condition(p: &IdentifiabilityParams) -> Result<ConditionCheck> {
    let rhs = degree_threshold(p.alpha, p.beta_prime())?;
    let margin = p.d as f64 - rhs;
    Ok(ConditionCheck {
        satisfied: margin > 0.0,
        margin,
        value: rhs,
    })
}

pub fn check_magnitude_condition(p: &IdentifiabilityParams) -> ConditionCheck {
    let lhs = p.b_min * (2.0 * p.d as f64 - 3.0) - 1.0 - 2.0 * p.b_max;
    ConditionCheck {
        satisfied: lhs > 0.0,
        margin: lhs,
        value: lhs,
    }
}

/// Smallest `beta` in `(alpha, 1)` meeting the degree condition at total
/// size `n`, by bisection to `1e-7`.
pub fn min_stubborn_fraction(d: usize, alpha: f64, n: usize) -> Result<f64> {
    if d < 5 {
        return Err(Error::InvalidParameter(format!("need d >= 5, got d = {d}")));
    }
    if !(alpha > 0.0) || n == 0 {
        return Err(Error::InvalidParameter(format!("alpha = {alpha}, n = {n}")));
    }
    let shift = d as f64 / n as f64;
    let holds = |beta: f64| {
        degree_threshold(alpha, beta - shift)
            .map(|rhs| (d as f64) > rhs)
            .unwrap_or(false)
    };
    let mut lo = alpha + shift;
    let mut hi = 1.0 - f64::EPSILON;
    if lo >= hi || !holds(hi) {
        return Err(Error::NoFeasibleFraction { d, lower: lo.min(1.0) });
    }
    while hi - lo > 1e-7 {
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Smallest stubborn count meeting the degree condition with `n_normal`
/// normal agents.
pub fn min_stubborn_count(n_normal: usize, d: usize, alpha: f64) -> Result<usize> {
    let limit = 1000 * (n_normal + d).max(1);
    (d.max(1)..=limit)
        .find(|&ns| {
            IdentifiabilityParams::new(n_normal + ns, ns, d, alpha, 0.0, 0.0)
                .and_then(|p| check_degree_condition(&p))
                .map(|c| c.satisfied)
                .unwrap_or(false)
        })
        .ok_or(Error::NoFeasibleFraction {
            d,
            lower: alpha,
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiabilityReport {
    pub params: IdentifiabilityParams,
    pub degree: Option<ConditionCheck>,
    pub magnitude: ConditionCheck,
    pub beta_bound: Option<f64>,
    /// `b_min`/`b_max` came from an estimate rather than ground truth.
    pub empirical: bool,
}

impl IdentifiabilityReport {
    pub fn evaluate(params: IdentifiabilityParams, empirical: bool) -> Self {
        Self {
            degree: check_degree_condition(&params).ok(),
            magnitude: check_magnitude_condition(&params),
            beta_bound: min_stubborn_fraction(params.d, params.alpha, params.n).ok(),
            params,
            empirical,
        }
    }

    pub fn satisfied(&self) -> bool {
        self.degree.is_some_and(|c| c.satisfied) && self.magnitude.satisfied
    }

    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        let _ = writeln!(out, "n = {}", p.n);
        let _ = writeln!(out, "n_s = {}", p.n_stub);
        let _ = writeln!(out, "d = {}", p.d);
        let _ = writeln!(out, "alpha = {}", p.alpha);
        let _ = writeln!(out, "beta = {}", p.beta());
        let _ = writeln!(out, "beta_prime = {}", p.beta_prime());
        let _ = writeln!(out, "delta = {}", opt(p.delta()));
        let _ = writeln!(out, "b_min = {}", p.b_min);
        let _ = writeln!(out, "b_max = {}", p.b_max);
        let _ = writeln!(out, "b_source = {}", if self.empirical { "empirical" } else { "given" });
        match &self.degree {
            Some(c) => {
                let _ = writeln!(out, "degree_condition = {}", c.satisfied);
                let _ = writeln!(out, "degree_threshold = {}", c.value);
                let _ = writeln!(out, "degree_margin = {}", c.margin);
            }
            None => {
                let _ = writeln!(out, "degree_condition = undefined");
            }
        }
        let _ = writeln!(out, "magnitude_condition = {}", self.magnitude.satisfied);
        let _ = writeln!(out, "magnitude_margin = {}", self.magnitude.margin);
        let _ = writeln!(out, "beta_bound = {}", opt(self.beta_bound));
        let _ = writeln!(out, "satisfied = {}", self.satisfied());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(n: usize, ns: usize, d: usize, alpha: f64) -> IdentifiabilityParams {
        IdentifiabilityParams::new(n, ns, d, alpha, 0.1, 0.2).unwrap()
    }

    #[test]
    fn entropy_values() {
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert!((binary_entropy(0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // 50-digit decimal evaluation
        assert!((binary_entropy(0.11).unwrap() - 0.346_515_336_918_666_15).abs() < 1e-12);
        assert!(binary_entropy(1.5).is_err());
        assert!(binary_entropy(-0.1).is_err());
    }

    #[test]
    fn entropy_concave_symmetric() {
        let grid: Vec<f64> = (0..=200).map(|k| k as f64 / 200.0).collect();
        for &x in &grid {
            let h = binary_entropy(x).unwrap();
            assert!((h - binary_entropy(1.0 - x).unwrap()).abs() < 1e-14);
        }
        for w in grid.windows(3) {
            let [a, b, c] = [w[0], w[1], w[2]].map(|x| binary_entropy(x).unwrap());
            assert!(b >= 0.5 * (a + c) - 1e-15);
        }
    }

    #[test]
    fn base_invariance() {
        for &(alpha, bp) in &[(0.2, 0.35), (0.05, 0.6), (0.3, 0.31), (0.01, 0.02)] {
            let h2 = |x: f64| binary_entropy(x).unwrap() / std::f64::consts::LN_2;
            let r2 = (h2(alpha) + bp * h2(alpha / bp)) / (alpha * (bp / alpha).log2());
            let rn = degree_threshold(alpha, bp).unwrap();
            assert!((f64::max(4.0, 1.0 + r2) - rn).abs() < 1e-12);
        }
    }

    #[test]
    fn degree_condition_cases() {
        let c = check_degree_condition(&params(1000, 900, 4, 0.01)).unwrap();
        assert!(!c.satisfied);
        assert_eq!(c.value, 4.0);
        assert!(matches!(
            check_degree_condition(&params(100, 20, 8, 0.2)),
            Err(Error::UndefinedCondition(_))
        ));
        assert_eq!(min_stubborn_count(50, 8, 0.2).unwrap(), 38);
        assert!(!check_degree_condition(&params(87, 37, 8, 0.2)).unwrap().satisfied);
        assert!(check_degree_condition(&params(88, 38, 8, 0.2)).unwrap().satisfied);
    }

    #[test]
    fn degree_margin_grows_with_d() {
        // fixed beta' (n large enough that d/n is negligible is not needed:
        // hold beta' fixed exactly by moving n_s with d)
        let n = 10_000;
        let mut prev = f64::NEG_INFINITY;
        for d in 5..40 {
            let ns = 4000 + d;
            let c = check_degree_condition(&params(n, ns, d, 0.2)).unwrap();
            assert!(c.margin > prev);
            prev = c.margin;
        }
    }

    #[test]
    fn magnitude_condition_cases() {
        for d in 2..20 {
            let b = 1.0 / d as f64;
            let p = IdentifiabilityParams::new(100, 50, d, 0.1, b, b).unwrap();
            let c = check_magnitude_condition(&p);
            assert!((c.value - (1.0 - 5.0 / d as f64)).abs() < 1e-12);
            if d != 5 {
                // d = 5 is the exact boundary, decided by rounding
                assert_eq!(c.satisfied, d > 5);
            }
        }
        let p = IdentifiabilityParams::new(100, 50, 8, 0.1, 0.0, 0.4).unwrap();
        assert!(!check_magnitude_condition(&p).satisfied);
        let p = IdentifiabilityParams::new(100, 50, 4, 0.1, 1.0, 1.0).unwrap();
        let c = check_magnitude_condition(&p);
        assert!(c.satisfied && c.value == 2.0);
    }

    #[test]
    fn min_fraction_brackets_boundary() {
        for &(d, alpha, n) in &[(8, 0.2, 88), (6, 0.1, 500), (12, 0.05, 1000), (5, 0.3, 2000)] {
            let b = min_stubborn_fraction(d, alpha, n).unwrap();
            let at = |beta: f64| {
                degree_threshold(alpha, beta - d as f64 / n as f64)
                    .map(|r| d as f64 > r)
                    .unwrap_or(false)
            };
            assert!(at(b + 1e-4), "d={d}");
            assert!(!at(b - 1e-4), "d={d}");
        }
        assert!(min_stubborn_fraction(4, 0.2, 100).is_err());
        assert!(matches!(
            min_stubborn_fraction(5, 0.9, 100),
            Err(Error::NoFeasibleFraction { .. })
        ));
    }

    #[test]
    fn min_fraction_decreasing_in_d() {
        let n = 1000;
        let betas: Vec<f64> = (5..=15).map(|d| min_stubborn_fraction(d, 0.2, n).unwrap()).collect();
        for w in betas.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(betas[1] >= betas[7]);
        assert!((betas[0] - 0.6087).abs() < 1e-3);
    }

    #[test]
    fn small_alpha_limit() {
        let (d, n) = (8, 1000);
        let mut prev = f64::INFINITY;
        for alpha in [0.1, 0.03, 0.01, 0.003, 0.001, 1e-4] {
            let b = min_stubborn_fraction(d, alpha, n).unwrap();
            assert!(b > d as f64 / n as f64 + alpha);
            assert!(b <= prev);
            prev = b;
        }
        assert!(prev - (d as f64 / n as f64) < 5e-3);
    }

    #[test]
    fn report_text() {
        let p = IdentifiabilityParams::new(88, 38, 8, 0.2, 0.2, 0.3).unwrap();
        let r = IdentifiabilityReport::evaluate(p, false);
        let t = r.to_text();
        assert!(t.contains("degree_condition = true"));
        assert!(t.contains("delta = "));
        assert!(t.contains("b_source = given"));
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.25, 0.5, 0.0]);
        assert_eq!(b_range(&b), Some((0.25, 0.5)));
    }

    proptest! {
        #[test]
        fn entropy_bounded(x in 0.0f64..=1.0) {
            let h = binary_entropy(x).unwrap();
            prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-15).contains(&h));
        }
    }
}
