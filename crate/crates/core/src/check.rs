//! Randomised equivalence properties shared by the CLI and the test suites.

use std::fmt;

use crate::cmab::CmabParams;
use crate::cmanp::{gen_sine_tasks, CmanpModel, Predictions};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::numerics::{init_matrix, InitScheme, Matrix, RngState};

/// `max|a − b| / max|b|`, with an exact zero when both are zero.
pub fn rel_error(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_error shapes");
    let diff = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    if diff == 0.0 {
        return 0.0;
    }
    diff / b.max_abs().max(f64::MIN_POSITIVE)
}

fn bits_equal(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape()
        && a.as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Dimensions drawn from `L_B, L_I ∈ {2,4,8}`, `d ∈ {8,16,32}`, `H ∈ {1,2,4}`.
pub fn random_dims(rng: &mut RngState) -> ModelConfig {
    let pick = |rng: &mut RngState, xs: [usize; 3]| xs[rng.int_inclusive(0, 2)];
    let l_b = pick(rng, [2, 4, 8]);
    let l_i = pick(rng, [2, 4, 8]);
    let d = pick(rng, [8, 16, 32]);
    let heads = pick(rng, [1, 2, 4]);
    ModelConfig::new(d, heads, 2, l_i, l_b)
}

/// Splits `0..n` into consecutive pieces of at most `chunk_size` rows,
/// occasionally empty. Returns `(chunk_size, sizes)`.
pub fn random_partition(rng: &mut RngState, n: usize) -> (usize, Vec<usize>) {
    let chunk_size = rng.int_inclusive(1, n.max(1));
    let mut sizes = Vec::new();
    let mut left = n;
    while left > 0 {
        let take = if rng.int_inclusive(0, 9) == 0 {
            0
        } else {
            rng.int_inclusive(1, chunk_size.min(left))
        };
        sizes.push(take);
        left -= take;
    }
    (chunk_size, sizes)
}

pub fn split_rows(m: &Matrix, sizes: &[usize]) -> Vec<Matrix> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&s| {
            let part = m
                .slice_rows(start, start + s)
                .expect("sizes sum to the row count");
            start += s;
            part
        })
        .collect()
}

fn normal(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    init_matrix(rng, rows, cols, InitScheme::Normal { std: 1.0 })
}

fn block_and_latents(rng: &mut RngState, cfg: &ModelConfig) -> Result<(CmabParams, Matrix)> {
    let block = CmabParams::init(rng, cfg)?;
    let iemb = normal(rng, cfg.l_i, cfg.d);
    Ok((block, iemb))
}

/// Update after `N ∈ 1..=64` inputs with `u ∈ 0..=16` more, against a full
/// recomputation over the union.
pub fn cmab_update_instance(rng: &mut RngState, cfg: &ModelConfig) -> Result<f64> {
    let (block, iemb) = block_and_latents(rng, cfg)?;
    let n = rng.int_inclusive(1, 64);
    let u = rng.int_inclusive(0, 16);
    let input = normal(rng, n, cfg.d);
    let batch = normal(rng, u, cfg.d);
    let (want, _) = block.forward_full(&iemb, &Matrix::concat_rows(&[&input, &batch])?)?;
    let (_, mut state) = block.forward_full(&iemb, &input)?;
    let got = block.update(&mut state, &iemb, &batch)?;
    Ok(rel_error(&got, &want))
}

/// Worst error of `partitions` random chunkings against a single pass.
pub fn cmab_chunked_instance(
    rng: &mut RngState,
    cfg: &ModelConfig,
    partitions: usize,
) -> Result<f64> {
    let (block, iemb) = block_and_latents(rng, cfg)?;
    let n = rng.int_inclusive(1, 64);
    let input = normal(rng, n, cfg.d);
    let (want, _) = block.forward_full(&iemb, &input)?;
    let mut worst: f64 = 0.0;
    for _ in 0..partitions {
        let (chunk_size, sizes) = random_partition(rng, n);
        let (got, _) = block.forward_chunked(&iemb, split_rows(&input, &sizes), chunk_size)?;
        worst = worst.max(rel_error(&got, &want));
    }
    Ok(worst)
}

fn prediction_error(a: &Predictions, b: &Predictions) -> f64 {
    rel_error(&a.mean, &b.mean).max(rel_error(&a.std, &b.std))
}

fn sine_setup(rng: &mut RngState, cfg: ModelConfig) -> Result<(CmanpModel, Matrix, Matrix)> {
    let model = CmanpModel::init(rng, cfg)?;
    let task = gen_sine_tasks(rng, 1).pop().expect("one task");
    Ok((model, task.context, task.target_x))
}

/// `update_context` against conditioning on the union of old and new pairs.
pub fn cmanp_update_instance(rng: &mut RngState, cfg: ModelConfig) -> Result<f64> {
    let (model, context, xs) = sine_setup(rng, cfg)?;
    let split = rng.int_inclusive(1, context.rows());
    let (old, new) = (
        context.slice_rows(0, split)?,
        context.slice_rows(split, context.rows())?,
    );
    let want = model.query(&model.condition(&context)?, &xs)?;
    let mut state = model.condition(&old)?;
    model.update_context(&mut state, &new)?;
    Ok(prediction_error(&model.query(&state, &xs)?, &want))
}

/// Chunked conditioning against the single pass.
pub fn cmanp_chunked_instance(rng: &mut RngState, cfg: ModelConfig) -> Result<f64> {
    let (model, context, xs) = sine_setup(rng, cfg)?;
    let want = model.query(&model.condition(&context)?, &xs)?;
    let (chunk_size, sizes) = random_partition(rng, context.rows());
    let state = model.condition_chunked(split_rows(&context, &sizes), chunk_size)?;
    Ok(prediction_error(&model.query(&state, &xs)?, &want))
}

/// Predictions under a shuffled context.
pub fn context_permutation_instance(rng: &mut RngState, cfg: ModelConfig) -> Result<f64> {
    let (model, context, xs) = sine_setup(rng, cfg)?;
    let want = model.query(&model.condition(&context)?, &xs)?;
    let perm = rng.permutation(context.rows());
    let got = model.query(&model.condition(&context.select_rows(&perm))?, &xs)?;
    Ok(prediction_error(&got, &want))
}

/// Whether shuffled targets give exactly the shuffled predictions, and each
/// target queried alone gives exactly its row of the batch.
pub fn target_equivariance_instance(rng: &mut RngState, cfg: ModelConfig) -> Result<bool> {
    let (model, context, xs) = sine_setup(rng, cfg)?;
    let state = model.condition(&context)?;
    let base = model.query(&state, &xs)?;
    let perm = rng.permutation(xs.rows());
    let shuffled = model.query(&state, &xs.select_rows(&perm))?;
    let mut ok = bits_equal(&shuffled.mean, &base.mean.select_rows(&perm))
        && bits_equal(&shuffled.std, &base.std.select_rows(&perm));
    for r in 0..xs.rows() {
        let alone = model.query(&state, &xs.slice_rows(r, r + 1)?)?;
        ok &= bits_equal(&alone.mean, &base.mean.slice_rows(r, r + 1)?)
            && bits_equal(&alone.std, &base.std.slice_rows(r, r + 1)?);
    }
    Ok(ok)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub trials: usize,
    /// Worst relative error; `0` or `1` for bitwise properties.
    pub worst: f64,
    pub tol: f64,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        if self.tol == 0.0 {
            self.worst == 0.0
        } else {
            self.worst < self.tol
        }
    }
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict} {:<22} trials={:<4} worst={:.3e} tol={:.0e}",
            self.name, self.trials, self.worst, self.tol
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub properties: Vec<PropertyResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(PropertyResult::passed)
    }

    pub fn worst(&self) -> f64 {
        self.properties.iter().map(|p| p.worst).fold(0.0, f64::max)
    }
}

/// Runs every property `trials` times. With `config` absent each trial draws
/// its own dimensions via [`random_dims`].
pub fn run_equivalence(
    seed: u64,
    trials: usize,
    config: Option<ModelConfig>,
    tol: f64,
) -> Result<CheckReport> {
    let root = RngState::new(seed);
    let dims = |rng: &mut RngState| config.unwrap_or_else(|| random_dims(rng));
    let property = |name: &'static str,
                    stream: u64,
                    tol: f64,
                    f: &dyn Fn(&mut RngState, ModelConfig) -> Result<f64>| {
        let mut rng = root.split(stream);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let cfg = dims(&mut rng);
            let e = f(&mut rng, cfg)?;
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
        Ok::<_, crate::Error>(PropertyResult {
            name,
            trials,
            worst,
            tol,
        })
    };
    let properties = vec![
        property("cmab_update", 0, tol, &|r, c| cmab_update_instance(r, &c))?,
        property("cmab_chunked", 1, tol, &|r, c| {
            cmab_chunked_instance(r, &c, 4)
        })?,
        property("cmanp_update_context", 2, tol, &cmanp_update_instance)?,
        property("cmanp_chunked", 3, tol, &cmanp_chunked_instance)?,
        property("context_invariance", 4, tol, &context_permutation_instance)?,
        property("target_equivariance", 5, 0.0, &|r, c| {
            target_equivariance_instance(r, c).map(|ok| if ok { 0.0 } else { 1.0 })
        })?,
    ];
    Ok(CheckReport { properties })
}
