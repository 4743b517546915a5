//! Multi-head pre-norm attention blocks.
//!
//! A block maps queries `x` and a key/value source `s` to
//! `h = x + W_O·[attend_h(LN_q(x)·W_Q, LN_kv(s)·W_K, LN_kv(s)·W_V)]_h` followed by
//! `h + FFN(LN_ff(h))`. The per-head kernel [`attend`] keeps the log
//! normaliser of every query row so that streaming state and one-shot
//! evaluation share the same arithmetic.

use crate::error::{contract, Error, Result};
use crate::instrument::flops;
use crate::numerics::{
    init_matrix, layer_norm, logsumexp, matmul, matmul_nt, relu, InitScheme, Matrix, Real,
    RngState, LAYER_NORM_EPS,
};

/// Parameters of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<T = f64> {
    pub heads: usize,
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    pub ln_q_gain: Matrix<T>,
    pub ln_q_bias: Matrix<T>,
    pub ln_kv_gain: Matrix<T>,
    pub ln_kv_bias: Matrix<T>,
    pub ff_w1: Matrix<T>,
    pub ff_b1: Matrix<T>,
    pub ff_w2: Matrix<T>,
    pub ff_b2: Matrix<T>,
    pub ln_ff_gain: Matrix<T>,
    pub ln_ff_bias: Matrix<T>,
}

/// Names of the tensors of an [`AttnParams`], in serialisation order.
pub const ATTN_TENSORS: [&str; 14] = [
    "w_q",
    "w_k",
    "w_v",
    "w_o",
    "ln_q.gain",
    "ln_q.bias",
    "ln_kv.gain",
    "ln_kv.bias",
    "ff.w1",
    "ff.b1",
    "ff.w2",
    "ff.b2",
    "ln_ff.gain",
    "ln_ff.bias",
];

impl<T: Real> AttnParams<T> {
    pub fn init(rng: &mut RngState, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return contract(format!("heads ({heads}) must divide d ({d})"));
        }
        let w = |rng: &mut RngState, r, c| init_matrix(rng, r, c, InitScheme::UniformFanIn);
        Ok(Self {
            heads,
            w_q: w(rng, d, d),
            w_k: w(rng, d, d),
            w_v: w(rng, d, d),
            w_o: w(rng, d, d),
            ln_q_gain: Matrix::filled(1, d, T::one()),
            ln_q_bias: Matrix::zeros(1, d),
            ln_kv_gain: Matrix::filled(1, d, T::one()),
            ln_kv_bias: Matrix::zeros(1, d),
            ff_w1: w(rng, d, d_ff),
            ff_b1: Matrix::zeros(1, d_ff),
            ff_w2: w(rng, d_ff, d),
            ff_b2: Matrix::zeros(1, d),
            ln_ff_gain: Matrix::filled(1, d, T::one()),
            ln_ff_bias: Matrix::zeros(1, d),
        })
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.ff_w1.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.d() / self.heads
    }

    /// Score scaling `1/√d_h`.
    pub fn score_scale(&self) -> T {
        T::one() / T::of(self.head_dim() as f64).sqrt()
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix<T>); 14] {
        [
            (ATTN_TENSORS[0], &self.w_q),
            (ATTN_TENSORS[1], &self.w_k),
            (ATTN_TENSORS[2], &self.w_v),
            (ATTN_TENSORS[3], &self.w_o),
            (ATTN_TENSORS[4], &self.ln_q_gain),
            (ATTN_TENSORS[5], &self.ln_q_bias),
            (ATTN_TENSORS[6], &self.ln_kv_gain),
            (ATTN_TENSORS[7], &self.ln_kv_bias),
            (ATTN_TENSORS[8], &self.ff_w1),
            (ATTN_TENSORS[9], &self.ff_b1),
            (ATTN_TENSORS[10], &self.ff_w2),
            (ATTN_TENSORS[11], &self.ff_b2),
            (ATTN_TENSORS[12], &self.ln_ff_gain),
            (ATTN_TENSORS[13], &self.ln_ff_bias),
        ]
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_tensors(
        heads: usize,
        d: usize,
        d_ff: usize,
        mut get: impl FnMut(&str) -> Result<Matrix<T>>,
    ) -> Result<Self> {
        let mut take = |name: &str, r: usize, c: usize| -> Result<Matrix<T>> {
            let m = get(name)?;
            if m.shape() != (r, c) {
                return contract(format!(
                    "tensor {name} has shape {:?}, expected ({r}, {c})",
                    m.shape()
                ));
            }
            Ok(m)
        };
        let params = Self {
            heads,
            w_q: take("w_q", d, d)?,
            w_k: take("w_k", d, d)?,
            w_v: take("w_v", d, d)?,
            w_o: take("w_o", d, d)?,
            ln_q_gain: take("ln_q.gain", 1, d)?,
            ln_q_bias: take("ln_q.bias", 1, d)?,
            ln_kv_gain: take("ln_kv.gain", 1, d)?,
            ln_kv_bias: take("ln_kv.bias", 1, d)?,
            ff_w1: take("ff.w1", d, d_ff)?,
            ff_b1: take("ff.b1", 1, d_ff)?,
            ff_w2: take("ff.w2", d_ff, d)?,
            ff_b2: take("ff.b2", 1, d)?,
            ln_ff_gain: take("ln_ff.gain", 1, d)?,
            ln_ff_bias: take("ln_ff.bias", 1, d)?,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return contract(format!("heads ({}) must divide d ({d})", self.heads));
        }
        for (name, m) in self.tensors() {
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("attention tensor {name}")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> AttnParams<U> {
        AttnParams {
            heads: self.heads,
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_o: self.w_o.cast(),
            ln_q_gain: self.ln_q_gain.cast(),
            ln_q_bias: self.ln_q_bias.cast(),
            ln_kv_gain: self.ln_kv_gain.cast(),
            ln_kv_bias: self.ln_kv_bias.cast(),
            ff_w1: self.ff_w1.cast(),
            ff_b1: self.ff_b1.cast(),
            ff_w2: self.ff_w2.cast(),
            ff_b2: self.ff_b2.cast(),
            ln_ff_gain: self.ln_ff_gain.cast(),
            ln_ff_bias: self.ln_ff_bias.cast(),
        }
    }

    pub fn heap_bytes(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.heap_bytes()).sum()
    }

    fn check_width(&self, m: &Matrix<T>, what: &str) -> Result<()> {
        if m.cols() != self.d() {
            return contract(format!(
                "{what} has {} columns, block width is {}",
                m.cols(),
                self.d()
            ));
        }
        Ok(())
    }
}

/// Per-head keys and values of a set of datapoints. Row `i` of every
/// matrix belongs to datapoint `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredKV<T = f64> {
    pub keys: Vec<Matrix<T>>,
    pub values: Vec<Matrix<T>>,
}

impl<T: Real> ScoredKV<T> {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn split_heads<T: Real>(m: &Matrix<T>, heads: usize) -> Result<Vec<Matrix<T>>> {
    let dh = m.cols() / heads;
    (0..heads)
        .map(|h| m.slice_cols(h * dh, (h + 1) * dh))
        .collect()
}

fn norm<T: Real>(m: &Matrix<T>, gain: &Matrix<T>, bias: &Matrix<T>) -> Result<Matrix<T>> {
    layer_norm(m, gain.as_slice(), bias.as_slice(), T::of(LAYER_NORM_EPS))
}

/// Key/value side: `LN_kv(inputs)` projected by `W_K` and `W_V`, split per head.
pub fn project_kv<T: Real>(params: &AttnParams<T>, inputs: &Matrix<T>) -> Result<ScoredKV<T>> {
    params.check_width(inputs, "key/value input")?;
    let normed = norm(inputs, &params.ln_kv_gain, &params.ln_kv_bias)?;
    let k = matmul(&normed, &params.w_k)?;
    let v = matmul(&normed, &params.w_v)?;
    Ok(ScoredKV {
        keys: split_heads(&k, params.heads)?,
        values: split_heads(&v, params.heads)?,
    })
}

/// Query side: `LN_q(queries)·W_Q`, split per head.
pub fn query_heads<T: Real>(params: &AttnParams<T>, queries: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
    params.check_width(queries, "queries")?;
    let normed = norm(queries, &params.ln_q_gain, &params.ln_q_bias)?;
    split_heads(&matmul(&normed, &params.w_q)?, params.heads)
}

/// Single-head attention of `q` (m×d_h) over `k`, `v` (n×d_h).
///
/// Returns the attention output and, per query row, the log normaliser
/// `ln Σ_i exp(s_i)` of the scaled scores `s = scale · q kᵀ`.
pub fn attend<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    scale: T,
) -> Result<(Matrix<T>, Vec<T>)> {
    if k.rows() == 0 {
        return contract("attention over an empty key set");
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape {
            op: "attend",
            lhs: k.shape(),
            rhs: v.shape(),
        });
    }
    let scores = matmul_nt(q, k)?.scale(scale);
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut log_norm = Vec::with_capacity(q.rows());
    for r in 0..q.rows() {
        let s = scores.row(r);
        let lc = logsumexp(s)?;
        let orow = out.row_mut(r);
        for (i, &si) in s.iter().enumerate() {
            let w = (si - lc).exp();
            for (o, &vi) in orow.iter_mut().zip(v.row(i)) {
                *o = *o + w * vi;
            }
        }
        log_norm.push(lc);
    }
    flops::add((q.rows() * k.rows() * v.cols()) as u64);
    Ok((out, log_norm))
}

/// `x + FFN(LN_ff(x))` with a relu hidden layer.
pub fn feed_forward<T: Real>(params: &AttnParams<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let normed = norm(x, &params.ln_ff_gain, &params.ln_ff_bias)?;
    let hidden = relu(&matmul(&normed, &params.ff_w1)?.add_row(&params.ff_b1)?);
    let out = matmul(&hidden, &params.ff_w2)?.add_row(&params.ff_b2)?;
    x.add(&out)
}

/// Output projection, residual and feed-forward applied to per-head
/// attention outputs for the query rows `residual`.
pub fn finish<T: Real>(
    params: &AttnParams<T>,
    residual: &Matrix<T>,
    heads: &[Matrix<T>],
) -> Result<Matrix<T>> {
    let refs: Vec<&Matrix<T>> = heads.iter().collect();
    let merged = Matrix::concat_cols(&refs)?;
    let attended = residual.add(&matmul(&merged, &params.w_o)?)?;
    feed_forward(params, &attended)
}

/// Multi-head cross-attention of `queries` over a projected key/value set.
pub fn cross_attention<T: Real>(
    params: &AttnParams<T>,
    queries: &Matrix<T>,
    kv: &ScoredKV<T>,
) -> Result<Matrix<T>> {
    if kv.is_empty() {
        return contract("cross-attention over an empty key/value set");
    }
    if kv.keys.len() != params.heads {
        return contract(format!(
            "key/value set has {} heads, block has {}",
            kv.keys.len(),
            params.heads
        ));
    }
    let q = query_heads(params, queries)?;
    let scale = params.score_scale();
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        heads.push(attend(&q[h], &kv.keys[h], &kv.values[h], scale)?.0);
    }
    finish(params, queries, &heads)
}

/// Self-attention: `cross_attention(x, project_kv(x))`.
pub fn self_attention<T: Real>(params: &AttnParams<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    if x.rows() == 0 {
        return contract("self-attention over zero rows");
    }
    let kv = project_kv(params, x)?;
    cross_attention(params, x, &kv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64, d: usize, heads: usize) -> (RngState, AttnParams) {
        let mut rng = RngState::new(seed);
        let mut p = AttnParams::init(&mut rng, d, heads, 2 * d).unwrap();
        // Non-trivial norms so the tests see every parameter.
        for m in [&mut p.ln_q_gain, &mut p.ln_kv_gain, &mut p.ln_ff_gain] {
            *m = init_matrix(&mut rng, 1, d, InitScheme::Normal { std: 0.3 }).map(|v| 1.0 + v);
        }
        for m in [&mut p.ln_q_bias, &mut p.ln_kv_bias, &mut p.ln_ff_bias] {
            *m = init_matrix(&mut rng, 1, d, InitScheme::Normal { std: 0.1 });
        }
        (rng, p)
    }

    fn rand(rng: &mut RngState, r: usize, c: usize) -> Matrix {
        init_matrix(rng, r, c, InitScheme::Normal { std: 1.0 })
    }

    fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn project_kv_empty_and_row_local() {
        let (mut rng, p) = setup(1, 8, 2);
        let empty = project_kv(&p, &Matrix::zeros(0, 8)).unwrap();
        assert!(empty.is_empty());

        let x = rand(&mut rng, 4, 8);
        let dup = x.select_rows(&[0, 1, 2, 3, 2]);
        let a = project_kv(&p, &x).unwrap();
        let b = project_kv(&p, &dup).unwrap();
        for h in 0..2 {
            assert_eq!(b.keys[h].row(4), a.keys[h].row(2));
            assert_eq!(b.values[h].row(4), a.values[h].row(2));
        }
    }

    #[test]
    fn project_kv_matches_unfused_oracle() {
        let (mut rng, p) = setup(2, 8, 2);
        let x = rand(&mut rng, 5, 8);
        let kv = project_kv(&p, &x).unwrap();
        for i in 0..5 {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            let normed: Vec<f64> = (0..8)
                .map(|c| {
                    p.ln_kv_gain.get(0, c) * (row[c] - mean) / (var + 1e-5).sqrt()
                        + p.ln_kv_bias.get(0, c)
                })
                .collect();
            for h in 0..2 {
                for j in 0..4 {
                    let col = h * 4 + j;
                    let k: f64 = (0..8).map(|c| normed[c] * p.w_k.get(c, col)).sum();
                    let v: f64 = (0..8).map(|c| normed[c] * p.w_v.get(c, col)).sum();
                    assert!((kv.keys[h].get(i, j) - k).abs() < 1e-12);
                    assert!((kv.values[h].get(i, j) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_key_gives_its_value() {
        let (mut rng, _) = setup(3, 4, 1);
        let q = rand(&mut rng, 3, 4);
        let k = rand(&mut rng, 1, 4);
        let v = rand(&mut rng, 1, 4);
        let (out, lc) = attend(&q, &k, &v, 0.5).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), v.row(0));
            let s: f64 = q
                .row(r)
                .iter()
                .zip(k.row(0))
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * 0.5;
            assert!((lc[r] - s).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicated_kv_rows_change_nothing() {
        let (mut rng, p) = setup(4, 8, 2);
        let q = rand(&mut rng, 3, 8);
        let x = rand(&mut rng, 5, 8);
        let doubled = Matrix::concat_rows(&[&x, &x]).unwrap();
        let a = cross_attention(&p, &q, &project_kv(&p, &x).unwrap()).unwrap();
        let b = cross_attention(&p, &q, &project_kv(&p, &doubled).unwrap()).unwrap();
        assert!(max_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn cross_attention_matches_dense_oracle() {
        let (mut rng, p) = setup(5, 8, 2);
        let q = rand(&mut rng, 3, 8).scale(3.0);
        let x = rand(&mut rng, 5, 8).scale(3.0);
        let got = cross_attention(&p, &q, &project_kv(&p, &x).unwrap()).unwrap();

        // softmax(QKᵀ/√d_h)V per head with naive exp/sum, then W_O, residual, FFN.
        let lnq = layer_norm(&q, p.ln_q_gain.as_slice(), p.ln_q_bias.as_slice(), 1e-5).unwrap();
        let lnx = layer_norm(&x, p.ln_kv_gain.as_slice(), p.ln_kv_bias.as_slice(), 1e-5).unwrap();
        let (qq, kk, vv) = (
            matmul(&lnq, &p.w_q).unwrap(),
            matmul(&lnx, &p.w_k).unwrap(),
            matmul(&lnx, &p.w_v).unwrap(),
        );
        let mut merged = Matrix::zeros(3, 8);
        for h in 0..2 {
            for i in 0..3 {
                let scores: Vec<f64> = (0..5)
                    .map(|j| {
                        (0..4)
                            .map(|c| qq.get(i, h * 4 + c) * kk.get(j, h * 4 + c))
                            .sum::<f64>()
                            / 2.0
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for c in 0..4 {
                    let v: f64 = (0..5)
                        .map(|j| scores[j].exp() / z * vv.get(j, h * 4 + c))
                        .sum();
                    merged.set(i, h * 4 + c, v);
                }
            }
        }
        let attended = q.add(&matmul(&merged, &p.w_o).unwrap()).unwrap();
        let want = feed_forward(&p, &attended).unwrap();
        assert!(max_diff(&got, &want) < 1e-10 * want.max_abs().max(1.0));
    }

    #[test]
    fn empty_kv_is_rejected() {
        let (mut rng, p) = setup(6, 8, 2);
        let q = rand(&mut rng, 2, 8);
        let kv = project_kv(&p, &Matrix::zeros(0, 8)).unwrap();
        assert!(matches!(
            cross_attention(&p, &q, &kv),
            Err(Error::Contract(_))
        ));
        assert!(self_attention(&p, &Matrix::zeros(0, 8)).is_err());
    }

    #[test]
    fn self_attention_single_row_is_value_path() {
        let (mut rng, p) = setup(7, 8, 2);
        let x = rand(&mut rng, 1, 8);
        let kv = project_kv(&p, &x).unwrap();
        let merged = Matrix::concat_cols(&[&kv.values[0], &kv.values[1]]).unwrap();
        let attended = x.add(&matmul(&merged, &p.w_o).unwrap()).unwrap();
        let want = feed_forward(&p, &attended).unwrap();
        assert_eq!(self_attention(&p, &x).unwrap(), want);
    }

    #[test]
    fn self_attention_is_definitional_and_equivariant() {
        let (mut rng, p) = setup(8, 8, 2);
        let x = rand(&mut rng, 6, 8);
        let sa = self_attention(&p, &x).unwrap();
        assert_eq!(
            sa,
            cross_attention(&p, &x, &project_kv(&p, &x).unwrap()).unwrap()
        );

        let perm = rng.permutation(6);
        let permuted = self_attention(&p, &x.select_rows(&perm)).unwrap();
        assert!(max_diff(&permuted, &sa.select_rows(&perm)) < 1e-10);
    }

    #[test]
    fn rows_are_independent() {
        let (mut rng, p) = setup(9, 8, 4);
        let q = rand(&mut rng, 4, 8);
        let kv = project_kv(&p, &rand(&mut rng, 7, 8)).unwrap();
        let joint = cross_attention(&p, &q, &kv).unwrap();
        for r in 0..4 {
            let one = cross_attention(&p, &q.slice_rows(r, r + 1).unwrap(), &kv).unwrap();
            assert_eq!(one.row(0), joint.row(r));
        }
    }
}
