//! The training forward pass, recorded on a [`Tape`].
//!
//! Mirrors the single-pass inference path block for block, with attention
//! written as `softmax(QKᵀ/√d_h)V` so every step has a simple adjoint.

use crate::autograd::{Evaluation, Grads, NodeId, Objective, ParamStore, Tape};
use crate::config::ModelConfig;
use crate::error::Result;

use super::model::STD_FLOOR;
use super::tasks::TaskBatch;

struct Graph<'a> {
    tape: Tape,
    params: &'a ParamStore,
    cfg: ModelConfig,
}

impl Graph<'_> {
    fn p(&mut self, name: &str) -> Result<NodeId> {
        let m = self.params.get(name)?;
        Ok(self.tape.param(name, m))
    }

    fn norm(&mut self, x: NodeId, prefix: &str, which: &str) -> Result<NodeId> {
        let g = self.p(&format!("{prefix}.{which}.gain"))?;
        let b = self.p(&format!("{prefix}.{which}.bias"))?;
        self.tape.layer_norm(x, g, b)
    }

    fn attention(&mut self, prefix: &str, queries: NodeId, source: NodeId) -> Result<NodeId> {
        let (heads, dh) = (self.cfg.heads, self.cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let lnq = self.norm(queries, prefix, "ln_q")?;
        let lnkv = self.norm(source, prefix, "ln_kv")?;
        let wq = self.p(&format!("{prefix}.w_q"))?;
        let wk = self.p(&format!("{prefix}.w_k"))?;
        let wv = self.p(&format!("{prefix}.w_v"))?;
        let wo = self.p(&format!("{prefix}.w_o"))?;
        let q = self.tape.matmul(lnq, wq)?;
        let k = self.tape.matmul(lnkv, wk)?;
        let v = self.tape.matmul(lnkv, wv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = self.tape.slice_cols(q, a, b)?;
            let kh = self.tape.slice_cols(k, a, b)?;
            let vh = self.tape.slice_cols(v, a, b)?;
            let s = self.tape.matmul_nt(qh, kh)?;
            let s = self.tape.scale(s, scale)?;
            let w = self.tape.softmax_rows(s)?;
            outs.push(self.tape.matmul(w, vh)?);
        }
        let merged = self.tape.concat_cols(&outs)?;
        let projected = self.tape.matmul(merged, wo)?;
        let attended = self.tape.add(queries, projected)?;

        let ln = self.norm(attended, prefix, "ln_ff")?;
        let w1 = self.p(&format!("{prefix}.ff.w1"))?;
        let b1 = self.p(&format!("{prefix}.ff.b1"))?;
        let w2 = self.p(&format!("{prefix}.ff.w2"))?;
        let b2 = self.p(&format!("{prefix}.ff.b2"))?;
        let hidden = self.tape.matmul(ln, w1)?;
        let hidden = self.tape.add_row(hidden, b1)?;
        let hidden = self.tape.relu(hidden)?;
        let out = self.tape.matmul(hidden, w2)?;
        let out = self.tape.add_row(out, b2)?;
        self.tape.add(attended, out)
    }

    fn cmab(&mut self, i: usize, iemb: NodeId, input: NodeId) -> Result<NodeId> {
        let bemb = self.p(&format!("block{i}.bemb"))?;
        let ca1 = self.attention(&format!("block{i}.ca1"), bemb, input)?;
        let demb = self.attention(&format!("block{i}.sa1"), ca1, ca1)?;
        let ca2 = self.attention(&format!("block{i}.ca2"), iemb, demb)?;
        self.attention(&format!("block{i}.sa2"), ca2, ca2)
    }

    fn affine(&mut self, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let w = self.p(w)?;
        let b = self.p(b)?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    fn loss(&mut self, task: &TaskBatch) -> Result<NodeId> {
        let ctx = self.tape.constant(task.context.clone());
        let ctx = self.affine(ctx, "embed.context.w", "embed.context.b")?;
        let mut lemb = self.p("lemb0")?;
        let mut lembs = Vec::with_capacity(self.cfg.blocks);
        for i in 0..self.cfg.blocks {
            lemb = self.cmab(i, lemb, ctx)?;
            lembs.push(lemb);
        }
        let tx = self.tape.constant(task.target_x.clone());
        let mut q = self.affine(tx, "embed.target.w", "embed.target.b")?;
        for (i, &l) in lembs.iter().enumerate() {
            q = self.attention(&format!("query{i}"), q, l)?;
        }
        let hidden = self.affine(q, "predictor.w1", "predictor.b1")?;
        let hidden = self.tape.relu(hidden)?;
        let raw = self.affine(hidden, "predictor.w2", "predictor.b2")?;
        let mean = self.tape.slice_cols(raw, 0, 1)?;
        let std = self.tape.slice_cols(raw, 1, 2)?;
        let std = self.tape.softplus(std)?;
        let std = self.tape.scale(std, 1.0 - STD_FLOOR)?;
        let std = self.tape.add_scalar(std, STD_FLOOR)?;
        self.tape.gaussian_nll(mean, std, task.target_y.clone())
    }
}

/// Records the mean target NLL of `task` and returns the tape and its root.
pub fn taped_loss(
    params: &ParamStore,
    cfg: ModelConfig,
    task: &TaskBatch,
) -> Result<(Tape, NodeId)> {
    let mut g = Graph {
        tape: Tape::new(),
        params,
        cfg,
    };
    let root = g.loss(task)?;
    Ok((g.tape, root))
}

/// Mean NLL over a fixed set of tasks, as a differentiable objective.
pub struct CmanpObjective<'a> {
    pub config: ModelConfig,
    pub tasks: &'a [TaskBatch],
}

impl Objective for CmanpObjective<'_> {
    fn evaluate(&self, params: &ParamStore) -> Result<Evaluation> {
        let mut loss = 0.0;
        let mut pattern = 0u64;
        let mut margin = f64::INFINITY;
        for task in self.tasks {
            let (tape, root) = taped_loss(params, self.config, task)?;
            loss += tape.value(root).get(0, 0);
            pattern = pattern.rotate_left(7) ^ tape.relu_pattern();
            margin = margin.min(tape.relu_margin());
        }
        Ok(Evaluation {
            loss: loss / self.tasks.len() as f64,
            pattern,
            margin,
        })
    }

    fn gradient(&self, params: &ParamStore) -> Result<Grads> {
        let mut total = params.zeros_like();
        let scale = 1.0 / self.tasks.len() as f64;
        for task in self.tasks {
            let (tape, root) = taped_loss(params, self.config, task)?;
            for (name, g) in tape.backward(root)?.params() {
                let acc = total
                    .get_mut(&name)
                    .expect("tape params come from the store");
                for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += scale * b;
                }
            }
        }
        Ok(total)
    }
}
