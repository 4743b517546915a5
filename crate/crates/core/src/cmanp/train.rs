//! Meta-training on sampled sinusoid tasks.

use crate::autograd::{adam_step, AdamConfig, AdamState, ParamStore};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::RngState;

use super::model::{nll, CmanpModel};
use super::taped::taped_loss;
use super::tasks::{context_marginal_nll, gen_sine_tasks, TaskBatch};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Tasks per optimiser step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Loss trace granularity, in steps.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            adam: AdamConfig::default(),
            log_every: 50,
            seed: 0,
        }
    }
}

/// Mean training loss over the `log_every` steps ending at `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub nll: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CmanpModel,
    pub trace: Vec<LossRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub tasks: usize,
    pub model_nll: f64,
    pub baseline_nll: f64,
}

impl EvalReport {
    /// Nats by which the model beats the context-marginal baseline.
    pub fn margin(&self) -> f64 {
        self.baseline_nll - self.model_nll
    }
}

fn batch_step(
    params: &ParamStore,
    cfg: ModelConfig,
    tasks: &[TaskBatch],
) -> Result<(f64, crate::autograd::Grads)> {
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let scale = 1.0 / tasks.len() as f64;
    for task in tasks {
        let (tape, root) = taped_loss(params, cfg, task)?;
        loss += tape.value(root).get(0, 0) * scale;
        for (name, g) in tape.backward(root)?.params() {
            let acc = grads
                .get_mut(&name)
                .expect("tape params come from the store");
            for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += scale * b;
            }
        }
    }
    Ok((loss, grads))
}

fn diagnose(params: &ParamStore) -> String {
    params
        .iter()
        .map(|(name, m)| format!("{name}: max|θ|={:.3e}", m.max_abs()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains a freshly initialised model. Every random draw derives from `train.seed`.
pub fn train(model_cfg: ModelConfig, train: TrainConfig) -> Result<TrainOutcome> {
    if train.batch_size == 0 || train.log_every == 0 {
        return Err(Error::Contract(
            "batch_size and log_every must be positive".into(),
        ));
    }
    let root = RngState::new(train.seed);
    let mut init_rng = root.split(0);
    let mut task_rng = root.split(1);
    let model = CmanpModel::init(&mut init_rng, model_cfg)?;
    let mut params = model.to_params();
    let mut adam = AdamState::new(train.adam, &params);
    let mut trace = Vec::new();
    let mut window = 0.0;
    for step in 1..=train.steps {
        let tasks = gen_sine_tasks(&mut task_rng, train.batch_size);
        let (loss, grads) = batch_step(&params, model_cfg, &tasks)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {step}; {}",
                diagnose(&params)
            )));
        }
        adam_step(&mut params, &grads, &mut adam)?;
        window += loss;
        if step % train.log_every == 0 {
            trace.push(LossRecord {
                step,
                nll: window / train.log_every as f64,
            });
            window = 0.0;
        }
    }
    let model = CmanpModel::from_params(model_cfg, &params)?;
    Ok(TrainOutcome { model, trace })
}

/// Per-point NLL of the model and of the context-marginal Gaussian, pooled
/// over every target of every task.
pub fn evaluate(model: &CmanpModel, tasks: &[TaskBatch]) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::Contract("evaluation needs at least one task".into()));
    }
    let (mut model_nll, mut baseline_nll, mut points) = (0.0, 0.0, 0usize);
    for task in tasks {
        let state = model.condition(&task.context)?;
        let pred = model.query(&state, &task.target_x)?;
        let m = task.target_len();
        model_nll += nll(&pred, &task.target_y)? * m as f64;
        baseline_nll += context_marginal_nll(task) * m as f64;
        points += m;
    }
    let n = points as f64;
    Ok(EvalReport {
        tasks: tasks.len(),
        model_nll: model_nll / n,
        baseline_nll: baseline_nll / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            adam: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            log_every: 1,
            seed: 9,
        }
    }

    #[test]
    fn one_step_moves_parameters() {
        let cfg = ModelConfig::tiny();
        let init = CmanpModel::init(&mut RngState::new(9).split(0), cfg)
            .unwrap()
            .to_params();
        let out = train(cfg, quick(1, 5e-4)).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert!(out.trace[0].nll.is_finite());
        let after = out.model.to_params();
        assert!(init.iter().zip(after.iter()).any(|((_, a), (_, b))| a != b));
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let cfg = ModelConfig::tiny();
        let init = CmanpModel::init(&mut RngState::new(9).split(0), cfg)
            .unwrap()
            .to_params();
        let out = train(cfg, quick(3, 0.0)).unwrap();
        for ((_, a), (_, b)) in init.iter().zip(out.model.to_params().iter()) {
            assert!(a
                .as_slice()
                .iter()
                .zip(b.as_slice())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let a = train(cfg, quick(2, 1e-3)).unwrap();
        let b = train(cfg, quick(2, 1e-3)).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn evaluate_rejects_empty() {
        let model = CmanpModel::init(&mut RngState::new(1), ModelConfig::tiny()).unwrap();
        assert!(evaluate(&model, &[]).is_err());
    }
}
