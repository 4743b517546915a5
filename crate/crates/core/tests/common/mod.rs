#![allow(dead_code)]

use astro_float::{BigFloat, Consts, RoundingMode};

use cmab_core::attention::{project_kv, query_heads};
use cmab_core::cmab::CmabParams;
use cmab_core::config::ModelConfig;
use cmab_core::numerics::{init_matrix, matmul_nt, InitScheme, Matrix, RngState};

const PREC: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

fn big(v: f64) -> BigFloat {
    BigFloat::from_f64(v, PREC)
}

fn to_f64(b: &BigFloat) -> f64 {
    b.to_string().parse().expect("decimal rendering parses")
}

/// Softmax attention of one query row computed directly at 256 bits:
/// `C = Σ e^{s_i}`, `emb = Σ e^{s_i} v_i / C`. Returns `(emb, ln C)`.
pub fn oracle_row(scores: &[f64], values: &Matrix) -> (Vec<f64>, f64) {
    let mut cc = Consts::new().expect("constants cache");
    let weights: Vec<BigFloat> = scores
        .iter()
        .map(|&s| big(s).exp(PREC, RM, &mut cc))
        .collect();
    let mut c = big(0.0);
    for w in &weights {
        c = c.add(w, PREC, RM);
    }
    let emb = (0..values.cols())
        .map(|k| {
            let mut acc = big(0.0);
            for (i, w) in weights.iter().enumerate() {
                acc = acc.add(&w.mul(&big(values.get(i, k)), PREC, RM), PREC, RM);
            }
            to_f64(&acc.div(&c, PREC, RM))
        })
        .collect();
    (emb, to_f64(&c.ln(PREC, RM, &mut cc)))
}

/// Scaled scores and values of every stream input, per CA1 head.
pub fn ca1_scores(block: &CmabParams, input: &Matrix) -> Vec<(Matrix, Matrix)> {
    let queries = query_heads(&block.ca1, &block.bemb).unwrap();
    let kv = project_kv(&block.ca1, input).unwrap();
    let scale = block.ca1.score_scale();
    queries
        .iter()
        .enumerate()
        .map(|(h, q)| {
            (
                matmul_nt(q, &kv.keys[h]).unwrap().scale(scale),
                kv.values[h].clone(),
            )
        })
        .collect()
}

/// Oracle stream state per head: `(emb L_B × d_h, log_c per row)`.
pub fn oracle_stream(block: &CmabParams, input: &Matrix) -> Vec<(Matrix, Vec<f64>)> {
    ca1_scores(block, input)
        .into_iter()
        .map(|(scores, values)| {
            let mut emb = Matrix::zeros(scores.rows(), values.cols());
            let mut log_c = Vec::new();
            for j in 0..scores.rows() {
                let (row, lc) = oracle_row(scores.row(j), &values);
                emb.row_mut(j).copy_from_slice(&row);
                log_c.push(lc);
            }
            (emb, log_c)
        })
        .collect()
}

/// The rolling average kept in linear space, `C' = C + Σ e^{s_i}`,
/// `emb' = (C/C')·emb + Σ e^{s_i}/C' · v_i`, fed `chunk` inputs at a time.
/// Returns per head `(emb, C)` in precision `F`.
pub fn direct_c_stream<F: num_traits::Float>(
    scores: &Matrix,
    values: &Matrix,
    chunk: usize,
) -> (Vec<Vec<F>>, Vec<F>) {
    let f = |v: f64| F::from(v).unwrap();
    let (l_b, d_h) = (scores.rows(), values.cols());
    let mut emb = vec![vec![F::zero(); d_h]; l_b];
    let mut c = vec![F::zero(); l_b];
    let n = scores.cols();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        for j in 0..l_b {
            let added = (start..end).fold(F::zero(), |acc, i| acc + f(scores.get(j, i)).exp());
            let c_new = c[j] + added;
            let keep = c[j] / c_new;
            for (k, e) in emb[j].iter_mut().enumerate() {
                let mut v = keep * *e;
                for i in start..end {
                    v = v + f(scores.get(j, i)).exp() / c_new * f(values.get(i, k));
                }
                *e = v;
            }
            c[j] = c_new;
        }
        start = end;
    }
    (emb, c)
}

/// A CA1 block whose query and key weights are rescaled so the largest
/// score magnitude over `input` is exactly `target`.
pub fn forced_scores_block(
    rng: &mut RngState,
    cfg: &ModelConfig,
    input: &Matrix,
    target: f64,
) -> CmabParams {
    let mut block = CmabParams::init(rng, cfg).unwrap();
    let peak = ca1_scores(&block, input)
        .iter()
        .map(|(s, _)| s.max_abs())
        .fold(0.0, f64::max);
    let alpha = (target / peak).sqrt();
    block.ca1.w_q = block.ca1.w_q.scale(alpha);
    block.ca1.w_k = block.ca1.w_k.scale(alpha);
    block
}

pub fn normal(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    init_matrix(rng, rows, cols, InitScheme::Normal { std: 1.0 })
}

/// `max|a − b| / max|b|`.
pub fn normwise_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    diff / b
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE)
}
