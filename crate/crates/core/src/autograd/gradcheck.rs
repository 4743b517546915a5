//! Central finite-difference verification of analytic gradients.

use std::collections::HashSet;

use crate::error::{contract, Error, Result};
use crate::numerics::RngState;

use super::{Grads, ParamStore};

/// Loss value plus a fingerprint of every piecewise-linear branch taken
/// while computing it. A changed fingerprint between the two sides of a
/// difference means the step crossed a kink.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub pattern: u64,
    /// Smallest `|pre-activation|` over every kink; infinite if there are none.
    pub margin: f64,
}

/// Entries whose perturbed evaluations come this close to a kink are resampled.
pub const KINK_MARGIN: f64 = 1e-6;

pub trait Objective {
    fn evaluate(&self, params: &ParamStore) -> Result<Evaluation>;
    fn gradient(&self, params: &ParamStore) -> Result<Grads>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Relative step; entry `θ` is perturbed by `h · max(1, |θ|)`.
    pub h: f64,
    /// Entries to check. Stores with fewer entries are checked exhaustively.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            samples: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_a − g_fd| / max(1e-8, |g_a| + |g_fd|)` over checked entries.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Entries replaced because their difference straddled a kink.
    pub resampled: usize,
}

/// Compares `objective.gradient` against central differences.
pub fn grad_check(
    objective: &impl Objective,
    params: &ParamStore,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    if cfg.h.is_nan() || cfg.h <= 0.0 {
        return contract("finite-difference step must be positive");
    }
    let base = objective.evaluate(params)?;
    if !base.loss.is_finite() {
        return Err(Error::NonFinite(
            "loss at the unperturbed parameters".into(),
        ));
    }
    let analytic = objective.gradient(params)?;

    let index: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, m)| (0..m.len()).map(move |i| (name.to_string(), i)))
        .collect();
    let exhaustive = index.len() <= cfg.samples;
    let mut order: Vec<usize> = if exhaustive {
        (0..index.len()).collect()
    } else {
        RngState::new(cfg.seed).permutation(index.len())
    };
    order.reverse();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        resampled: 0,
    };
    let mut seen = HashSet::new();
    let mut work = params.clone();
    while report.checked < cfg.samples.min(index.len()) {
        let Some(k) = order.pop() else { break };
        if !seen.insert(k) {
            continue;
        }
        let (name, i) = &index[k];
        let theta = params.get(name)?.as_slice()[*i];
        let step = cfg.h * theta.abs().max(1.0);
        let mut eval_at = |x: f64| -> Result<Evaluation> {
            work.get_mut(name).expect("cloned store").as_mut_slice()[*i] = x;
            let e = objective.evaluate(&work)?;
            if !e.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss after perturbing {name}[{i}]"
                )));
            }
            Ok(e)
        };
        let plus = eval_at(theta + step)?;
        let minus = eval_at(theta - step)?;
        eval_at(theta)?;
        if plus.pattern != base.pattern
            || minus.pattern != base.pattern
            || plus.margin.min(minus.margin) < KINK_MARGIN
        {
            report.resampled += 1;
            if exhaustive {
                report.checked += 1;
            }
            continue;
        }
        let fd = (plus.loss - minus.loss) / (2.0 * step);
        let ga = analytic
            .get(name.as_str())
            .map_or(0.0, |g| g.as_slice()[*i]);
        let err = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
        if err > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = err;
            report.worst_param = name.clone();
            report.worst_index = *i;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    struct Quadratic;

    impl Objective for Quadratic {
        fn evaluate(&self, p: &ParamStore) -> Result<Evaluation> {
            let loss = p
                .iter()
                .flat_map(|(_, m)| m.as_slice().iter())
                .map(|v| 0.5 * v * v)
                .sum();
            Ok(Evaluation {
                loss,
                pattern: 0,
                margin: f64::INFINITY,
            })
        }
        fn gradient(&self, p: &ParamStore) -> Result<Grads> {
            Ok(p.iter().map(|(k, m)| (k.to_string(), m.clone())).collect())
        }
    }

    struct Linear;

    impl Objective for Linear {
        fn evaluate(&self, p: &ParamStore) -> Result<Evaluation> {
            Ok(Evaluation {
                loss: p.iter().flat_map(|(_, m)| m.as_slice().iter()).sum(),
                pattern: 0,
                margin: f64::INFINITY,
            })
        }
        fn gradient(&self, p: &ParamStore) -> Result<Grads> {
            Ok(p.iter()
                .map(|(k, m)| (k.to_string(), Matrix::filled(m.rows(), m.cols(), 1.0)))
                .collect())
        }
    }

    fn store() -> ParamStore {
        let mut rng = RngState::new(3);
        let mut p = ParamStore::new();
        p.insert("a", Matrix::from_fn(4, 5, |_, _| rng.uniform(-2.0, 2.0)))
            .unwrap();
        p.insert("b", Matrix::from_fn(1, 7, |_, _| rng.uniform(-2.0, 2.0)))
            .unwrap();
        p
    }

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(
            &Quadratic,
            &store(),
            GradCheckConfig {
                h: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.checked, 27);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn linear_is_exact() {
        let r = grad_check(&Linear, &store(), GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught_and_named() {
        struct Wrong;
        impl Objective for Wrong {
            fn evaluate(&self, p: &ParamStore) -> Result<Evaluation> {
                Quadratic.evaluate(p)
            }
            fn gradient(&self, p: &ParamStore) -> Result<Grads> {
                let mut g = Quadratic.gradient(p)?;
                g.get_mut("b").unwrap().as_mut_slice()[3] += 1.0;
                Ok(g)
            }
        }
        let r = grad_check(&Wrong, &store(), GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error > 0.1);
        assert_eq!((r.worst_param.as_str(), r.worst_index), ("b", 3));
    }

    #[test]
    fn subsamples_large_stores() {
        let mut p = ParamStore::new();
        p.insert("big", Matrix::filled(30, 30, 0.5)).unwrap();
        let r = grad_check(
            &Quadratic,
            &p,
            GradCheckConfig {
                samples: 200,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.checked, 200);
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        struct Blowup;
        impl Objective for Blowup {
            fn evaluate(&self, p: &ParamStore) -> Result<Evaluation> {
                let v = p.get("a")?.as_slice()[0];
                Ok(Evaluation {
                    loss: if v > 0.25 { f64::NAN } else { v },
                    pattern: 0,
                    margin: f64::INFINITY,
                })
            }
            fn gradient(&self, p: &ParamStore) -> Result<Grads> {
                Ok(p.zeros_like())
            }
        }
        let mut p = ParamStore::new();
        p.insert("a", Matrix::filled(1, 1, 0.25)).unwrap();
        let err = grad_check(
            &Blowup,
            &p,
            GradCheckConfig {
                h: 1e-3,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("a[0]"), "{err}");
    }

    #[test]
    fn near_kink_entries_are_resampled() {
        struct Hinge;
        impl Objective for Hinge {
            fn evaluate(&self, p: &ParamStore) -> Result<Evaluation> {
                let v = p.get("a")?.as_slice()[0];
                Ok(Evaluation {
                    loss: v.max(0.0),
                    pattern: 0,
                    margin: v.abs(),
                })
            }
            fn gradient(&self, p: &ParamStore) -> Result<Grads> {
                Ok(p.zeros_like())
            }
        }
        let mut p = ParamStore::new();
        p.insert("a", Matrix::filled(1, 1, 1e-7)).unwrap();
        let r = grad_check(
            &Hinge,
            &p,
            GradCheckConfig {
                h: 1e-9,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.resampled, 1);
        assert_eq!(r.max_rel_error, 0.0);
    }
}
