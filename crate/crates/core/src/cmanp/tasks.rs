//! Synthetic 1-D sinusoid regression tasks.

use std::f64::consts::PI;

use crate::numerics::{gaussian_nll, Matrix, RngState};

use super::model::STD_FLOOR;

/// Inputs are drawn from `[−X_RANGE, X_RANGE]`.
pub const X_RANGE: f64 = 2.0;
/// Upper bound on context plus target points per task.
pub const MAX_POINTS: usize = 50;
const MIN_CONTEXT: usize = 3;
const MAX_CONTEXT: usize = 47;
const MIN_TARGETS: usize = 3;
const NOISE_STD: f64 = 0.05;

/// One regression task: context pairs and labelled targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    /// `N × 2` rows of `(x, y)`.
    pub context: Matrix,
    /// `M × 1`.
    pub target_x: Matrix,
    /// `M × 1`.
    pub target_y: Matrix,
}

impl TaskBatch {
    pub fn context_len(&self) -> usize {
        self.context.rows()
    }

    pub fn target_len(&self) -> usize {
        self.target_x.rows()
    }
}

/// `y = a·sin(x + p) + ε` with `n` context and `m` target points.
pub fn sine_task(
    rng: &mut RngState,
    n: usize,
    m: usize,
    amplitude: f64,
    phase: f64,
    noise_std: f64,
) -> TaskBatch {
    let sample = |rng: &mut RngState| {
        let x = rng.uniform(-X_RANGE, X_RANGE);
        let eps = if noise_std > 0.0 {
            rng.normal(0.0, noise_std)
        } else {
            0.0
        };
        (x, amplitude * (x + phase).sin() + eps)
    };
    let mut context = Matrix::zeros(n, 2);
    for r in 0..n {
        let (x, y) = sample(rng);
        context.set(r, 0, x);
        context.set(r, 1, y);
    }
    let mut target_x = Matrix::zeros(m, 1);
    let mut target_y = Matrix::zeros(m, 1);
    for r in 0..m {
        let (x, y) = sample(rng);
        target_x.set(r, 0, x);
        target_y.set(r, 0, y);
    }
    TaskBatch {
        context,
        target_x,
        target_y,
    }
}

/// `count` random tasks: `a ~ U[0.5, 1.5]`, `p ~ U[0, π]`, `ε ~ N(0, 0.05²)`,
/// `N ~ U{3..47}`, `M ~ U{3..50−N}`.
pub fn gen_sine_tasks(rng: &mut RngState, count: usize) -> Vec<TaskBatch> {
    (0..count)
        .map(|_| {
            let amplitude = rng.uniform(0.5, 1.5);
            let phase = rng.uniform(0.0, PI);
            let n = rng.int_inclusive(MIN_CONTEXT, MAX_CONTEXT);
            let m = rng.int_inclusive(MIN_TARGETS, MAX_POINTS - n);
            sine_task(rng, n, m, amplitude, phase, NOISE_STD)
        })
        .collect()
}

/// NLL of the targets under one Gaussian fitted to the context labels by
/// maximum likelihood, with the model's standard-deviation floor.
pub fn context_marginal_nll(task: &TaskBatch) -> f64 {
    let ys: Vec<f64> = (0..task.context_len())
        .map(|r| task.context.get(r, 1))
        .collect();
    let n = ys.len() as f64;
    let mu = ys.iter().sum::<f64>() / n;
    let sigma = (ys.iter().map(|y| (y - mu).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(STD_FLOOR);
    let m = task.target_len();
    gaussian_nll(
        &Matrix::filled(m, 1, mu),
        &Matrix::filled(m, 1, sigma),
        &task.target_y,
    )
    .expect("task shapes are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = gen_sine_tasks(&mut RngState::new(5), 20);
        let b = gen_sine_tasks(&mut RngState::new(5), 20);
        assert_eq!(a, b);
        assert_ne!(a, gen_sine_tasks(&mut RngState::new(6), 20));
    }

    #[test]
    fn noiseless_unit_task_is_sine() {
        let t = sine_task(&mut RngState::new(1), 10, 5, 1.0, 0.0, 0.0);
        for r in 0..10 {
            assert_eq!(t.context.get(r, 1), t.context.get(r, 0).sin());
        }
        for r in 0..5 {
            assert_eq!(t.target_y.get(r, 0), t.target_x.get(r, 0).sin());
        }
    }

    #[test]
    fn sizes_and_domain() {
        for t in gen_sine_tasks(&mut RngState::new(2), 500) {
            let (n, m) = (t.context_len(), t.target_len());
            assert!((3..=47).contains(&n));
            assert!(m >= 3 && n + m <= 50);
            assert!(t.context.as_slice().chunks(2).all(|p| p[0].abs() <= 2.0));
            assert!(t.target_x.as_slice().iter().all(|x| x.abs() <= 2.0));
        }
    }

    #[test]
    fn context_count_is_uniform() {
        // Pearson chi-square over the 45 values of N; 1% critical value at 44 dof.
        const CRITICAL_44_DOF_1PCT: f64 = 68.71;
        let tasks = gen_sine_tasks(&mut RngState::new(3), 10_000);
        let mut counts = [0usize; 45];
        for t in &tasks {
            counts[t.context_len() - 3] += 1;
        }
        let expected = 10_000.0 / 45.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < CRITICAL_44_DOF_1PCT, "chi2 = {chi2}");
    }

    #[test]
    fn baseline_matches_closed_form() {
        let t = TaskBatch {
            context: Matrix::from_rows(&[[0.0, 1.0], [0.5, 3.0]]).unwrap(),
            target_x: Matrix::filled(1, 1, 0.0),
            target_y: Matrix::filled(1, 1, 2.0),
        };
        // mu = 2, sigma = 1, target at the mean.
        let want = 0.5 * (2.0 * PI).ln();
        assert!((context_marginal_nll(&t) - want).abs() < 1e-15);
    }
}
