//! Independent verification of the gated-mixture accuracy lower bound:
//! the closed-form bound, the exact expectation by binomial enumeration,
//! and a Monte Carlo simulation of the assignment process.
//!
//! Model: M experts each correct independently with probability p; a gate
//! routes a sample to a correct expert with relative weight (1 + alpha)
//! against weight 1 for an incorrect one. With s correct experts the mixture
//! answers correctly with probability (1+alpha)s / (M + alpha*s); the bound
//! (1+alpha)p / (1 + alpha(p + (1-p)/M)) follows from convexity of that
//! expression in s.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Maximum expert count for exact enumeration; binomial coefficients stay
/// exactly representable in f64 far beyond this, the cap just keeps the
/// enumeration obviously auditable.
pub const MAX_EXACT_EXPERTS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoremParams {
    /// Number of experts M, >= 2.
    pub experts: usize,
    /// Per-expert accuracy p in (0, 1].
    pub accuracy: f64,
    /// Gate advantage alpha >= 0 (0 is the degenerate uninformed gate).
    pub advantage: f64,
}

impl TheoremParams {
    pub fn new(experts: usize, accuracy: f64, advantage: f64) -> Result<Self> {
        let p = TheoremParams {
            experts,
            accuracy,
            advantage,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts < 2 {
            return Err(Error::InvalidParameter {
                name: "experts",
                message: format!("must be >= 2, got {}", self.experts),
            });
        }
        if !(self.accuracy > 0.0 && self.accuracy <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "accuracy",
                message: format!("must be in (0, 1], got {}", self.accuracy),
            });
        }
        if !(self.advantage >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "advantage",
                message: format!("must be >= 0, got {}", self.advantage),
            });
        }
        Ok(())
    }
}

/// Closed-form lower bound (1+a)p / (1 + a(p + (1-p)/M)).
pub fn bound(params: &TheoremParams) -> Result<f64> {
    params.validate()?;
    let m = params.experts as f64;
    let p = params.accuracy;
    let a = params.advantage;
    Ok((1.0 + a) * p / (1.0 + a * (p + (1.0 - p) / m)))
}

/// Exact mixture accuracy: sum over s of C(M,s) p^s (1-p)^(M-s)
/// * (1+a)s / (M + a*s).
pub fn exact_pmpe(params: &TheoremParams) -> Result<f64> {
    params.validate()?;
    if params.experts > MAX_EXACT_EXPERTS {
        return Err(Error::InvalidParameter {
            name: "experts",
            message: format!(
                "exact enumeration capped at {MAX_EXACT_EXPERTS}; use Monte Carlo for M = {}",
                params.experts
            ),
        });
    }
    let m = params.experts;
    let p = params.accuracy;
    let a = params.advantage;
    let binom = pascal_row(m);
    let mut total = 0.0;
    for s in 0..=m {
        let sf = s as f64;
        let weight = binom[s] * p.powi(s as i32) * (1.0 - p).powi((m - s) as i32);
        let correct = (1.0 + a) * sf / (m as f64 + a * sf);
        total += weight * correct;
    }
    Ok(total)
}

/// Row M of Pascal's triangle in f64; exact for M <= MAX_EXACT_EXPERTS.
fn pascal_row(m: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for _ in 0..m {
        let mut next = vec![1.0; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    row
}

/// Monte Carlo estimate of the mixture accuracy with its binomial standard
/// error. Per trial: draw s as M Bernoulli(p) successes, then succeed with
/// probability (1+a)s / (M + a*s). Deterministic given the seed.
pub fn monte_carlo_pmpe(params: &TheoremParams, trials: usize, seed: u64) -> Result<(f64, f64)> {
    params.validate()?;
    if trials == 0 {
        return Err(Error::InvalidParameter {
            name: "trials",
            message: "must be >= 1".into(),
        });
    }
    let mut r = rng::stream(seed, &[tag::THEOREM, params.experts as u64]);
    let m = params.experts;
    let p = params.accuracy;
    let a = params.advantage;
    let mut hits = 0usize;
    for _ in 0..trials {
        let mut s = 0usize;
        for _ in 0..m {
            if r.gen::<f64>() < p {
                s += 1;
            }
        }
        let prob = (1.0 + a) * s as f64 / (m as f64 + a * s as f64);
        if r.gen::<f64>() < prob {
            hits += 1;
        }
    }
    let est = hits as f64 / trials as f64;
    let se = (est * (1.0 - est) / trials as f64).sqrt();
    Ok((est, se))
}

/// One verified grid point.
#[derive(Clone, Debug)]
pub struct BoundCheck {
    pub params: TheoremParams,
    pub bound: f64,
    pub exact: f64,
    pub mc_estimate: f64,
    pub mc_se: f64,
    pub pass: bool,
}

/// Check `exact >= bound` (strict when p < 1 and alpha > 0) and
/// `mc >= bound - 3*se` at every grid point.
pub fn verify_bound(
    grid: &[TheoremParams],
    trials: usize,
    seed: u64,
) -> Result<Vec<BoundCheck>> {
    if grid.is_empty() {
        return Err(Error::EmptyInput {
            context: "verify_bound",
        });
    }
    let mut out = Vec::with_capacity(grid.len());
    for (i, params) in grid.iter().enumerate() {
        let b = bound(params)?;
        let exact = exact_pmpe(params)?;
        let (mc, se) = monte_carlo_pmpe(params, trials, seed.wrapping_add(i as u64))?;
        let strict_expected = params.accuracy < 1.0 && params.advantage > 0.0;
        let exact_ok = if strict_expected { exact > b } else { exact >= b - 1e-12 };
        let mc_ok = mc >= b - 3.0 * se;
        out.push(BoundCheck {
            params: *params,
            bound: b,
            exact,
            mc_estimate: mc,
            mc_se: se,
            pass: exact_ok && mc_ok,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(m: usize, p: f64, a: f64) -> TheoremParams {
        TheoremParams::new(m, p, a).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn bound_degenerate_gate_equals_accuracy() {
        for (m, p) in [(2usize, 0.5), (7, 0.9), (20, 0.1)] {
            assert!(close(bound(&params(m, p, 0.0)).unwrap(), p, 1e-15));
        }
    }

    #[test]
    fn bound_reference_point() {
        // M=2, p=0.5, alpha=1 -> 1/1.75
        assert!(close(
            bound(&params(2, 0.5, 1.0)).unwrap(),
            1.0 / 1.75,
            1e-12
        ));
    }

    #[test]
    fn bound_perfect_experts() {
        for a in [0.5, 1.0, 10.0] {
            for m in [2usize, 5, 100] {
                assert!(close(bound(&params(m, 1.0, a)).unwrap(), 1.0, 1e-15));
            }
        }
    }

    #[test]
    fn bound_exceeds_accuracy_when_gate_helps() {
        for (m, p, a) in [(2usize, 0.5, 1.0), (5, 0.6, 1.0), (10, 0.6, 2.0), (20, 0.8, 5.0)] {
            assert!(bound(&params(m, p, a)).unwrap() > p);
        }
    }

    #[test]
    fn bound_monotone_in_alpha_and_experts() {
        let mut prev = 0.0;
        for a in [0.5, 1.0, 2.0, 4.0] {
            let b = bound(&params(10, 0.6, a)).unwrap();
            assert!(b > prev);
            prev = b;
        }
        let mut prev = 0.0;
        for m in [2usize, 4, 8, 16] {
            let b = bound(&params(m, 0.6, 1.0)).unwrap();
            assert!(b > prev);
            prev = b;
        }
    }

    #[test]
    fn exact_three_term_enumeration_by_hand() {
        // M=2, p=0.5, alpha=1: 0.25*0 + 0.5*(2/3) + 0.25*1 = 7/12
        assert!(close(
            exact_pmpe(&params(2, 0.5, 1.0)).unwrap(),
            7.0 / 12.0,
            1e-12
        ));
    }

    #[test]
    fn exact_boundary_cases() {
        assert!(close(exact_pmpe(&params(5, 1.0, 2.0)).unwrap(), 1.0, 1e-12));
        assert!(exact_pmpe(&params(5, 1e-12, 2.0)).unwrap() < 1e-9);
    }

    #[test]
    fn exact_uninformed_gate_recovers_accuracy() {
        // alpha = 0 makes the mixture's correctness probability s/M, whose
        // expectation is p, for every M.
        for m in [2usize, 3, 10, 30] {
            for p in [0.1, 0.5, 0.93] {
                assert!(close(exact_pmpe(&params(m, p, 0.0)).unwrap(), p, 1e-12));
            }
        }
    }

    #[test]
    fn exact_caps_expert_count() {
        let err = exact_pmpe(&params(31, 0.5, 1.0)).unwrap_err();
        assert!(err.to_string().contains("Monte Carlo"), "{err}");
    }

    #[test]
    fn exact_dominates_bound_across_grid() {
        for m in [2usize, 3, 5, 10, 20, 30] {
            for p in [0.05, 0.3, 0.5, 0.8, 0.99] {
                for a in [0.1, 0.5, 1.0, 3.0, 10.0] {
                    let tp = params(m, p, a);
                    let e = exact_pmpe(&tp).unwrap();
                    let b = bound(&tp).unwrap();
                    assert!(e > b, "Jensen gap violated at M={m} p={p} a={a}: {e} vs {b}");
                }
            }
        }
    }

    #[test]
    fn pascal_row_known_values() {
        assert_eq!(pascal_row(4), vec![1.0, 4.0, 6.0, 4.0, 1.0]);
        assert_eq!(pascal_row(30)[15], 155_117_520.0);
    }

    #[test]
    fn monte_carlo_degenerate() {
        let (est, se) = monte_carlo_pmpe(&params(4, 1.0, 1.0), 1000, 5).unwrap();
        assert_eq!(est, 1.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn monte_carlo_close_to_exact() {
        let tp = params(2, 0.5, 1.0);
        let exact = exact_pmpe(&tp).unwrap();
        let (est, se) = monte_carlo_pmpe(&tp, 1_000_000, 11).unwrap();
        assert!(
            (est - exact).abs() <= 3.0 * se,
            "estimate {est} not within 3 SE ({se}) of {exact}"
        );
    }

    #[test]
    fn monte_carlo_deterministic() {
        let tp = params(6, 0.7, 2.0);
        let a = monte_carlo_pmpe(&tp, 10_000, 3).unwrap();
        let b = monte_carlo_pmpe(&tp, 10_000, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn verify_bound_reference_grid() {
        let grid = [params(2, 0.5, 1.0), params(5, 0.6, 0.0)];
        let checks = verify_bound(&grid, 100_000, 9).unwrap();
        assert!(checks.iter().all(|c| c.pass), "{checks:?}");
        assert!(close(checks[0].exact, 7.0 / 12.0, 1e-12));
        assert!(close(checks[0].bound, 1.0 / 1.75, 1e-12));
        // alpha = 0: bound collapses to p and the inequality is equality.
        assert!(close(checks[1].bound, 0.6, 1e-15));
        assert!(close(checks[1].exact, 0.6, 1e-12));
    }

    #[test]
    fn verify_bound_rejects_empty_grid() {
        assert!(verify_bound(&[], 100, 0).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(TheoremParams::new(1, 0.5, 1.0).is_err());
        assert!(TheoremParams::new(2, 0.0, 1.0).is_err());
        assert!(TheoremParams::new(2, 1.1, 1.0).is_err());
        assert!(TheoremParams::new(2, 0.5, -0.5).is_err());
        assert!(TheoremParams::new(2, 0.5, 0.0).is_ok());
    }
}
