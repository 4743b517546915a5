use crate::attention::{self, AttnParams};
use crate::autograd::ParamStore;
use crate::cmab::{stream_init, stream_update, CmabParams, CmabState};
use crate::config::ModelConfig;
use crate::error::{contract, Error, Result};
use crate::instrument::flops::{in_stage, Stage};
use crate::numerics::{
    gaussian_nll, init_matrix, matmul, relu, softplus, InitScheme, Matrix, Real, RngState,
};

/// Lower bound of the predicted standard deviation.
pub const STD_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct CmanpModel<T = f64> {
    pub config: ModelConfig,
    /// Learned initial latents, `L_I × d`.
    pub lemb0: Matrix<T>,
    pub blocks: Vec<CmabParams<T>>,
    /// One cross-attention per block on the target path.
    pub query_blocks: Vec<AttnParams<T>>,
    /// `(x, y) → d`.
    pub context_w: Matrix<T>,
    pub context_b: Matrix<T>,
    /// `x → d`.
    pub target_w: Matrix<T>,
    pub target_b: Matrix<T>,
    pub pred_w1: Matrix<T>,
    pub pred_b1: Matrix<T>,
    pub pred_w2: Matrix<T>,
    pub pred_b2: Matrix<T>,
}

/// Per-target predictive Gaussians, each `M × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions<T = f64> {
    pub mean: Matrix<T>,
    pub std: Matrix<T>,
}

impl<T: Real> Predictions<T> {
    pub fn len(&self) -> usize {
        self.mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Output of the conditioning phase.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedState<T = f64> {
    pub blocks: Vec<CmabState<T>>,
    /// `LEMB_1..LEMB_K`.
    pub lembs: Vec<Matrix<T>>,
    count: usize,
}

impl<T: Real> ConditionedState<T> {
    /// Context pairs absorbed so far.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn heap_bytes(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.stream.heap_bytes())
            .sum::<usize>()
            + self.lembs.iter().map(Matrix::heap_bytes).sum::<usize>()
    }
}

fn check_cols<T: Real>(m: &Matrix<T>, cols: usize, what: &str) -> Result<()> {
    if m.cols() != cols {
        return contract(format!("{what} must have {cols} columns, got {}", m.cols()));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

impl<T: Real> CmanpModel<T> {
    pub fn init(rng: &mut RngState, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let lemb0 = init_matrix(rng, config.l_i, d, InitScheme::LATENT);
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut query_blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            blocks.push(CmabParams::init(rng, &config)?);
            query_blocks.push(AttnParams::init(rng, d, config.heads, config.d_ff)?);
        }
        let w = |rng: &mut RngState, r, c| init_matrix(rng, r, c, InitScheme::UniformFanIn);
        Ok(Self {
            config,
            lemb0,
            blocks,
            query_blocks,
            context_w: w(rng, 2, d),
            context_b: Matrix::zeros(1, d),
            target_w: w(rng, 1, d),
            target_b: Matrix::zeros(1, d),
            pred_w1: w(rng, d, d),
            pred_b1: Matrix::zeros(1, d),
            pred_w2: w(rng, d, 2),
            pred_b2: Matrix::zeros(1, 2),
        })
    }

    /// Every tensor with its stable name, in serialisation order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out: Vec<(String, &Matrix<T>)> = vec![("lemb0".into(), &self.lemb0)];
        for (i, block) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.bemb"), &block.bemb));
            for (stage, attn) in block.stages() {
                for (name, m) in attn.tensors() {
                    out.push((format!("block{i}.{stage}.{name}"), m));
                }
            }
        }
        for (i, q) in self.query_blocks.iter().enumerate() {
            for (name, m) in q.tensors() {
                out.push((format!("query{i}.{name}"), m));
            }
        }
        out.extend([
            ("embed.context.w".into(), &self.context_w),
            ("embed.context.b".into(), &self.context_b),
            ("embed.target.w".into(), &self.target_w),
            ("embed.target.b".into(), &self.target_b),
            ("predictor.w1".into(), &self.pred_w1),
            ("predictor.b1".into(), &self.pred_b1),
            ("predictor.w2".into(), &self.pred_w2),
            ("predictor.b2".into(), &self.pred_b2),
        ]);
        out
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_named(
        config: ModelConfig,
        mut get: impl FnMut(&str) -> Result<Matrix<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let (d, h, d_ff) = (config.d, config.heads, config.d_ff);
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
        let lemb0 = take("lemb0", config.l_i, d)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let bemb = take(&format!("block{i}.bemb"), config.l_b, d)?;
            let mut stage = |s: &str| {
                AttnParams::from_tensors(h, d, d_ff, |n| {
                    let name = format!("block{i}.{s}.{n}");
                    let (r, c) = expected_attn_shape(n, d, d_ff);
                    take(&name, r, c)
                })
            };
            let (ca1, sa1, ca2, sa2) = (stage("ca1")?, stage("sa1")?, stage("ca2")?, stage("sa2")?);
            blocks.push(CmabParams {
                bemb,
                ca1,
                sa1,
                ca2,
                sa2,
                l_i: config.l_i,
            });
        }
        let mut query_blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            query_blocks.push(AttnParams::from_tensors(h, d, d_ff, |n| {
                let (r, c) = expected_attn_shape(n, d, d_ff);
                take(&format!("query{i}.{n}"), r, c)
            })?);
        }
        Ok(Self {
            config,
            lemb0,
            blocks,
            query_blocks,
            context_w: take("embed.context.w", 2, d)?,
            context_b: take("embed.context.b", 1, d)?,
            target_w: take("embed.target.w", 1, d)?,
            target_b: take("embed.target.b", 1, d)?,
            pred_w1: take("predictor.w1", d, d)?,
            pred_b1: take("predictor.b1", 1, d)?,
            pred_w2: take("predictor.w2", d, 2)?,
            pred_b2: take("predictor.b2", 1, 2)?,
        })
    }

    pub fn cast<U: Real>(&self) -> CmanpModel<U> {
        CmanpModel {
            config: self.config,
            lemb0: self.lemb0.cast(),
            blocks: self.blocks.iter().map(CmabParams::cast).collect(),
            query_blocks: self.query_blocks.iter().map(AttnParams::cast).collect(),
            context_w: self.context_w.cast(),
            context_b: self.context_b.cast(),
            target_w: self.target_w.cast(),
            target_b: self.target_b.cast(),
            pred_w1: self.pred_w1.cast(),
            pred_b1: self.pred_b1.cast(),
            pred_w2: self.pred_w2.cast(),
            pred_b2: self.pred_b2.cast(),
        }
    }

    pub fn heap_bytes(&self) -> usize {
        self.named_tensors()
            .iter()
            .map(|(_, m)| m.heap_bytes())
            .sum()
    }

    /// Embeds `N × 2` context pairs.
    pub fn embed_context(&self, pairs: &Matrix<T>) -> Result<Matrix<T>> {
        check_cols(pairs, 2, "context pairs")?;
        in_stage(Stage::Embed, || {
            matmul(pairs, &self.context_w)?.add_row(&self.context_b)
        })
    }

    /// Embeds `M × 1` target inputs.
    pub fn embed_targets(&self, xs: &Matrix<T>) -> Result<Matrix<T>> {
        check_cols(xs, 1, "target inputs")?;
        in_stage(Stage::Embed, || {
            matmul(xs, &self.target_w)?.add_row(&self.target_b)
        })
    }

    fn block_iemb<'a>(&'a self, lembs: &'a [Matrix<T>], i: usize) -> &'a Matrix<T> {
        if i == 0 {
            &self.lemb0
        } else {
            &lembs[i - 1]
        }
    }

    /// Conditioning in a single pass over all context pairs.
    pub fn condition(&self, pairs: &Matrix<T>) -> Result<ConditionedState<T>> {
        if pairs.rows() == 0 {
            return contract("context must be nonempty");
        }
        let emb = self.embed_context(pairs)?;
        let mut states = Vec::with_capacity(self.blocks.len());
        let mut lembs: Vec<Matrix<T>> = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (oemb, state) = block.forward_full(self.block_iemb(&lembs, i), &emb)?;
            states.push(state);
            lembs.push(oemb);
        }
        Ok(ConditionedState {
            blocks: states,
            lembs,
            count: pairs.rows(),
        })
    }

    /// Conditioning over chunks of at most `chunk_size` pairs in memory
    /// bounded independently of the total context size.
    pub fn condition_chunked<I>(&self, chunks: I, chunk_size: usize) -> Result<ConditionedState<T>>
    where
        I: IntoIterator<Item = Matrix<T>>,
    {
        if chunk_size == 0 {
            return contract("chunk size must be positive");
        }
        let mut streams: Option<Vec<_>> = None;
        let mut count = 0;
        for (c, chunk) in chunks.into_iter().enumerate() {
            if chunk.rows() > chunk_size {
                return contract(format!(
                    "chunk {c} has {} rows, chunk size is {chunk_size}",
                    chunk.rows()
                ));
            }
            if chunk.rows() == 0 {
                continue;
            }
            let emb = self.embed_context(&chunk)?;
            match streams.as_mut() {
                None => {
                    let s: Result<Vec<_>> =
                        self.blocks.iter().map(|b| stream_init(b, &emb)).collect();
                    streams = Some(s?);
                }
                Some(ss) => {
                    for (b, s) in self.blocks.iter().zip(ss.iter_mut()) {
                        stream_update(b, s, &emb)?;
                    }
                }
            }
            count += chunk.rows();
        }
        let Some(streams) = streams else {
            return contract("context must be nonempty");
        };
        let mut lembs: Vec<Matrix<T>> = Vec::with_capacity(self.blocks.len());
        for (i, (block, stream)) in self.blocks.iter().zip(&streams).enumerate() {
            let oemb = block.downstream(self.block_iemb(&lembs, i), stream)?;
            lembs.push(oemb);
        }
        let blocks = streams
            .into_iter()
            .map(|stream| CmabState { stream })
            .collect();
        Ok(ConditionedState {
            blocks,
            lembs,
            count,
        })
    }

    /// Predictive Gaussians for `M × 1` target inputs. Each row depends only
    /// on its own target and the state.
    pub fn query(&self, state: &ConditionedState<T>, xs: &Matrix<T>) -> Result<Predictions<T>> {
        if xs.rows() == 0 {
            return contract("targets must be nonempty");
        }
        if state.lembs.len() != self.query_blocks.len() {
            return contract("conditioned state does not belong to this model");
        }
        let mut q = self.embed_targets(xs)?;
        in_stage(Stage::QueryPath, || -> Result<()> {
            for (block, lemb) in self.query_blocks.iter().zip(&state.lembs) {
                let kv = attention::project_kv(block, lemb)?;
                q = attention::cross_attention(block, &q, &kv)?;
            }
            Ok(())
        })?;
        in_stage(Stage::Predictor, || {
            let hidden = relu(&matmul(&q, &self.pred_w1)?.add_row(&self.pred_b1)?);
            let raw = matmul(&hidden, &self.pred_w2)?.add_row(&self.pred_b2)?;
            let mean = raw.slice_cols(0, 1)?;
            let std = raw
                .slice_cols(1, 2)?
                .map(|r| softplus(r) * T::of(1.0 - STD_FLOOR) + T::of(STD_FLOOR));
            Ok(Predictions { mean, std })
        })
    }

    /// Absorbs new context pairs. Cost depends on `new_pairs` and the model
    /// size only, never on how much context was absorbed before.
    pub fn update_context(
        &self,
        state: &mut ConditionedState<T>,
        new_pairs: &Matrix<T>,
    ) -> Result<()> {
        if new_pairs.rows() == 0 {
            return Ok(());
        }
        if state.blocks.len() != self.blocks.len() {
            return contract("conditioned state does not belong to this model");
        }
        let emb = self.embed_context(new_pairs)?;
        for i in 0..self.blocks.len() {
            let (done, rest) = state.lembs.split_at_mut(i);
            let iemb = if i == 0 { &self.lemb0 } else { &done[i - 1] };
            rest[0] = self.blocks[i].update(&mut state.blocks[i], iemb, &emb)?;
        }
        state.count += new_pairs.rows();
        Ok(())
    }
}

impl CmanpModel<f64> {
    pub fn to_params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, m) in self.named_tensors() {
            store
                .insert(name, m.clone())
                .expect("tensor names are unique");
        }
        store
    }

    pub fn from_params(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        Self::from_named(config, |name| store.get(name).cloned())
    }
}

fn expected_attn_shape(name: &str, d: usize, d_ff: usize) -> (usize, usize) {
    match name {
        "w_q" | "w_k" | "w_v" | "w_o" => (d, d),
        "ff.w1" => (d, d_ff),
        "ff.b1" => (1, d_ff),
        "ff.w2" => (d_ff, d),
        _ => (1, d),
    }
}

/// Mean per-target negative Gaussian log-likelihood.
pub fn nll(predictions: &Predictions<f64>, labels: &Matrix<f64>) -> Result<f64> {
    if !predictions.mean.is_finite() || !predictions.std.is_finite() || !labels.is_finite() {
        return Err(Error::NonFinite("nll inputs".into()));
    }
    if predictions.std.as_slice().iter().any(|&s| s <= 0.0) {
        return contract("predicted standard deviations must be positive");
    }
    gaussian_nll(&predictions.mean, &predictions.std, labels)
}
