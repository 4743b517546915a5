//! The constant-memory attention block.
//!
//! `CMAB(IEMB, INPUT) = SA2(CA2(IEMB, SA1(CA1(BEMB, INPUT))))`. Only the
//! first cross-attention reads the input, and its queries come from the
//! learned latents `BEMB`, so its per-head output is a softmax-weighted
//! average with a fixed query. [`StreamState`] stores that average together
//! with its log normaliser, which is all that is needed to fold in more
//! datapoints without revisiting old ones.

use crate::attention::{self, AttnParams};
use crate::config::ModelConfig;
use crate::error::{contract, Result};
use crate::instrument::flops::{self, in_stage, Stage};
use crate::numerics::{
    init_matrix, logsumexp, matmul_nt, softplus, InitScheme, Matrix, Real, RngState,
};

/// Parameters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct CmabParams<T = f64> {
    /// Learned bottleneck latents, `L_B × d`.
    pub bemb: Matrix<T>,
    /// `BEMB ← INPUT`.
    pub ca1: AttnParams<T>,
    /// Over the `L_B` bottleneck rows.
    pub sa1: AttnParams<T>,
    /// `IEMB ← DEMB`.
    pub ca2: AttnParams<T>,
    /// Over the `L_I` output rows.
    pub sa2: AttnParams<T>,
    pub l_i: usize,
}

/// Names of the attention sub-blocks, in serialisation order.
pub const CMAB_STAGES: [&str; 4] = ["ca1", "sa1", "ca2", "sa2"];

impl<T: Real> CmabParams<T> {
    pub fn init(rng: &mut RngState, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let bemb = init_matrix(rng, cfg.l_b, cfg.d, InitScheme::LATENT);
        let mut attn = || AttnParams::init(rng, cfg.d, cfg.heads, cfg.d_ff);
        Ok(Self {
            bemb,
            ca1: attn()?,
            sa1: attn()?,
            ca2: attn()?,
            sa2: attn()?,
            l_i: cfg.l_i,
        })
    }

    pub fn d(&self) -> usize {
        self.bemb.cols()
    }

    pub fn l_b(&self) -> usize {
        self.bemb.rows()
    }

    pub fn stages(&self) -> [(&'static str, &AttnParams<T>); 4] {
        [
            (CMAB_STAGES[0], &self.ca1),
            (CMAB_STAGES[1], &self.sa1),
            (CMAB_STAGES[2], &self.ca2),
            (CMAB_STAGES[3], &self.sa2),
        ]
    }

    pub fn cast<U: Real>(&self) -> CmabParams<U> {
        CmabParams {
            bemb: self.bemb.cast(),
            ca1: self.ca1.cast(),
            sa1: self.sa1.cast(),
            ca2: self.ca2.cast(),
            sa2: self.sa2.cast(),
            l_i: self.l_i,
        }
    }

    pub fn heap_bytes(&self) -> usize {
        self.bemb.heap_bytes()
            + self
                .stages()
                .iter()
                .map(|(_, a)| a.heap_bytes())
                .sum::<usize>()
    }

    fn check_iemb(&self, iemb: &Matrix<T>) -> Result<()> {
        if iemb.shape() != (self.l_i, self.d()) {
            return contract(format!(
                "IEMB has shape {:?}, expected ({}, {})",
                iemb.shape(),
                self.l_i,
                self.d()
            ));
        }
        Ok(())
    }

    /// Single-pass forward over all of `input`.
    pub fn forward_full(
        &self,
        iemb: &Matrix<T>,
        input: &Matrix<T>,
    ) -> Result<(Matrix<T>, CmabState<T>)> {
        self.check_iemb(iemb)?;
        let stream = stream_init(self, input)?;
        let oemb = self.downstream(iemb, &stream)?;
        Ok((oemb, CmabState { stream }))
    }

    /// Forward over `chunks` in bounded memory: the first nonempty chunk
    /// initialises the stream and every later one is absorbed as an update.
    pub fn forward_chunked<I>(
        &self,
        iemb: &Matrix<T>,
        chunks: I,
        chunk_size: usize,
    ) -> Result<(Matrix<T>, CmabState<T>)>
    where
        I: IntoIterator<Item = Matrix<T>>,
    {
        self.check_iemb(iemb)?;
        let stream = stream_chunks(self, chunks, chunk_size)?;
        let oemb = self.downstream(iemb, &stream)?;
        Ok((oemb, CmabState { stream }))
    }

    /// Absorbs `batch` into `state` and recomputes the output for `iemb`.
    /// Cost is independent of how many datapoints `state` already holds.
    pub fn update(
        &self,
        state: &mut CmabState<T>,
        iemb: &Matrix<T>,
        batch: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        self.check_iemb(iemb)?;
        stream_update(self, &mut state.stream, batch)?;
        self.downstream(iemb, &state.stream)
    }

    /// Every stage after the streamed aggregation: CA1's output projection and
    /// feed-forward, SA1, CA2 and SA2. Constant cost in the input count.
    pub fn downstream(&self, iemb: &Matrix<T>, stream: &StreamState<T>) -> Result<Matrix<T>> {
        self.check_iemb(iemb)?;
        let ca1 = in_stage(Stage::Ca1Out, || {
            attention::finish(&self.ca1, &self.bemb, &stream.emb)
        })?;
        let demb = in_stage(Stage::Sa1, || attention::self_attention(&self.sa1, &ca1))?;
        let ca2 = in_stage(Stage::Ca2, || {
            let kv = attention::project_kv(&self.ca2, &demb)?;
            attention::cross_attention(&self.ca2, iemb, &kv)
        })?;
        in_stage(Stage::Sa2, || attention::self_attention(&self.sa2, &ca2))
    }
}

/// Running first-cross-attention output over every datapoint absorbed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState<T = f64> {
    /// Per head, `LN_q(BEMB)·W_Q` restricted to that head: `L_B × d_h`.
    queries: Vec<Matrix<T>>,
    /// Per head, softmax-weighted value average per latent row: `L_B × d_h`.
    emb: Vec<Matrix<T>>,
    /// Per head and latent row, `ln Σ_i exp(s_i)`.
    log_c: Vec<Vec<T>>,
    count: usize,
    scale: T,
}

impl<T: Real> StreamState<T> {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn heads(&self) -> usize {
        self.emb.len()
    }

    pub fn emb(&self) -> &[Matrix<T>] {
        &self.emb
    }

    pub fn log_c(&self) -> &[Vec<T>] {
        &self.log_c
    }

    pub fn queries(&self) -> &[Matrix<T>] {
        &self.queries
    }

    pub fn heap_bytes(&self) -> usize {
        let mats: usize = self
            .queries
            .iter()
            .chain(&self.emb)
            .map(Matrix::heap_bytes)
            .sum();
        let logs: usize = self
            .log_c
            .iter()
            .map(|v| v.capacity() * std::mem::size_of::<T>())
            .sum();
        mats + logs
    }

    pub fn is_finite(&self) -> bool {
        self.emb.iter().all(Matrix::is_finite) && self.log_c.iter().flatten().all(|v| v.is_finite())
    }
}

/// Initial stream over a nonempty batch.
pub fn stream_init<T: Real>(params: &CmabParams<T>, batch: &Matrix<T>) -> Result<StreamState<T>> {
    if batch.rows() == 0 {
        return contract("stream state needs at least one datapoint");
    }
    let queries = in_stage(Stage::Ca1Query, || {
        attention::query_heads(&params.ca1, &params.bemb)
    })?;
    let scale = params.ca1.score_scale();
    in_stage(Stage::Ca1Stream, || {
        let kv = attention::project_kv(&params.ca1, batch)?;
        let mut emb = Vec::with_capacity(queries.len());
        let mut log_c = Vec::with_capacity(queries.len());
        for (h, q) in queries.iter().enumerate() {
            let (e, lc) = attention::attend(q, &kv.keys[h], &kv.values[h], scale)?;
            emb.push(e);
            log_c.push(lc);
        }
        Ok(StreamState {
            queries,
            emb,
            log_c,
            count: batch.rows(),
            scale,
        })
    })
}

/// Folds `batch` into `state`:
/// `T = lse_i(s_i − log C)`, `log C' = log C + softplus(T)`,
/// `emb' = e^{log C − log C'}·emb + Σ_i e^{s_i − log C'}·v_i`.
pub fn stream_update<T: Real>(
    params: &CmabParams<T>,
    state: &mut StreamState<T>,
    batch: &Matrix<T>,
) -> Result<()> {
    if batch.rows() == 0 {
        return Ok(());
    }
    in_stage(Stage::Ca1Stream, || {
        let kv = attention::project_kv(&params.ca1, batch)?;
        let mut shifted = vec![T::zero(); batch.rows()];
        for h in 0..state.queries.len() {
            let scores = matmul_nt(&state.queries[h], &kv.keys[h])?.scale(state.scale);
            let values = &kv.values[h];
            let emb = &mut state.emb[h];
            for (j, lc) in state.log_c[h].iter_mut().enumerate() {
                let s = scores.row(j);
                for (t, &si) in shifted.iter_mut().zip(s) {
                    *t = si - *lc;
                }
                let new_lc = *lc + softplus(logsumexp(&shifted)?);
                let keep = (*lc - new_lc).exp();
                let row = emb.row_mut(j);
                for e in row.iter_mut() {
                    *e = keep * *e;
                }
                for (i, &si) in s.iter().enumerate() {
                    let w = (si - new_lc).exp();
                    for (e, &vi) in row.iter_mut().zip(values.row(i)) {
                        *e = *e + w * vi;
                    }
                }
                *lc = new_lc;
            }
            let (l_b, d_h) = emb.shape();
            flops::add((l_b * d_h * (1 + batch.rows())) as u64);
        }
        state.count += batch.rows();
        Ok(())
    })
}

/// Streams a sequence of chunks of at most `chunk_size` rows.
pub fn stream_chunks<T: Real, I>(
    params: &CmabParams<T>,
    chunks: I,
    chunk_size: usize,
) -> Result<StreamState<T>>
where
    I: IntoIterator<Item = Matrix<T>>,
{
    if chunk_size == 0 {
        return contract("chunk size must be positive");
    }
    let mut state: Option<StreamState<T>> = None;
    for (i, chunk) in chunks.into_iter().enumerate() {
        if chunk.rows() > chunk_size {
            return contract(format!(
                "chunk {i} has {} rows, chunk size is {chunk_size}",
                chunk.rows()
            ));
        }
        if chunk.rows() == 0 {
            continue;
        }
        match state.as_mut() {
            None => state = Some(stream_init(params, &chunk)?),
            Some(s) => stream_update(params, s, &chunk)?,
        }
    }
    match state {
        Some(s) => Ok(s),
        None => contract("every input chunk is empty"),
    }
}

/// Cached state of a block over the data it has absorbed. Only the first
/// cross-attention needs caching; it does not depend on `IEMB`.
#[derive(Debug, Clone, PartialEq)]
pub struct CmabState<T = f64> {
    pub stream: StreamState<T>,
}

/// Splits `m` into consecutive row chunks of at most `chunk_size` rows.
pub fn row_chunks<T: Real>(
    m: &Matrix<T>,
    chunk_size: usize,
) -> impl Iterator<Item = Matrix<T>> + '_ {
    let n = m.rows();
    let step = chunk_size.max(1);
    (0..n.div_ceil(step)).map(move |c| {
        m.slice_rows(c * step, ((c + 1) * step).min(n))
            .expect("in bounds")
    })
}
