use std::collections::HashMap;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{contract, Error, Result};
use crate::numerics::{
    gaussian_nll, layer_norm, matmul, matmul_nt, relu, softmax_rows, softplus, Matrix,
};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Operation kinds a tape can record, with their non-node arguments.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    MatMul,
    /// `a · bᵀ`.
    MatMulNT,
    Add,
    /// Adds a `1 × cols` row to every row.
    AddRow,
    Scale(f64),
    AddScalar(f64),
    ConcatRows,
    ConcatCols,
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    SoftmaxRows,
    /// Inputs: `x`, `gain`, `bias`.
    LayerNorm(f64),
    Softplus,
    Relu,
    Mean,
    /// Inputs: `mean`, `std`; the targets are fixed.
    GaussianNll(Matrix),
}

impl FromStr for OpKind {
    type Err = Error;

    /// Parses argument-free kinds by name.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "matmul_nt" => OpKind::MatMulNT,
            "add" => OpKind::Add,
            "add_row" => OpKind::AddRow,
            "concat_rows" => OpKind::ConcatRows,
            "concat_cols" => OpKind::ConcatCols,
            "softmax_rows" => OpKind::SoftmaxRows,
            "layer_norm" => OpKind::LayerNorm(crate::numerics::LAYER_NORM_EPS),
            "softplus" => OpKind::Softplus,
            "relu" => OpKind::Relu,
            "mean" => OpKind::Mean,
            other => return contract(format!("unsupported op-kind {other:?}")),
        })
    }
}

#[derive(Debug, Clone)]
struct Node {
    kind: Option<OpKind>,
    inputs: Vec<NodeId>,
    value: Matrix,
}

/// Recorded computation over `f64` matrices. Nodes are appended in
/// evaluation order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, NodeId>,
    relu_pattern: u64,
    relu_margin: f64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            relu_pattern: FNV_OFFSET,
            relu_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Hash of the sign pattern of every relu input recorded so far.
    pub fn relu_pattern(&self) -> u64 {
        self.relu_pattern
    }

    /// Smallest `|x|` over every relu input recorded so far.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    fn push(&mut self, kind: Option<OpKind>, inputs: Vec<NodeId>, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient report.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(None, vec![], value)
    }

    /// Named parameter leaf. Recording the same name twice returns the first node.
    pub fn param(&mut self, name: &str, value: &Matrix) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(None, vec![], value.clone());
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    fn check(&self, ids: &[NodeId]) -> Result<()> {
        for id in ids {
            if id.0 >= self.nodes.len() {
                return contract(format!("node {} is not on this tape", id.0));
            }
        }
        Ok(())
    }

    /// Records `kind` applied to `inputs`; the forward value is computed by
    /// the same `numerics` routine an untaped caller would use.
    pub fn record(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        self.check(inputs)?;
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return contract(format!("{kind:?} takes {n} inputs, got {}", inputs.len()));
            }
            Ok(())
        };
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let value = match &kind {
            OpKind::MatMul => {
                arity(2)?;
                matmul(v(0), v(1))?
            }
            OpKind::MatMulNT => {
                arity(2)?;
                matmul_nt(v(0), v(1))?
            }
            OpKind::Add => {
                arity(2)?;
                v(0).add(v(1))?
            }
            OpKind::AddRow => {
                arity(2)?;
                v(0).add_row(v(1))?
            }
            OpKind::Scale(s) => {
                arity(1)?;
                v(0).scale(*s)
            }
            OpKind::AddScalar(s) => {
                arity(1)?;
                v(0).map(|x| x + s)
            }
            OpKind::ConcatRows => {
                let parts: Vec<&Matrix> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                Matrix::concat_rows(&parts)?
            }
            OpKind::ConcatCols => {
                let parts: Vec<&Matrix> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                Matrix::concat_cols(&parts)?
            }
            OpKind::SliceRows(a, b) => {
                arity(1)?;
                v(0).slice_rows(*a, *b)?
            }
            OpKind::SliceCols(a, b) => {
                arity(1)?;
                v(0).slice_cols(*a, *b)?
            }
            OpKind::SoftmaxRows => {
                arity(1)?;
                softmax_rows(v(0))
            }
            OpKind::LayerNorm(eps) => {
                arity(3)?;
                let (g, b) = (v(1), v(2));
                if g.rows() != 1 || b.rows() != 1 {
                    return contract("layer_norm gain and bias must be single rows");
                }
                layer_norm(v(0), g.as_slice(), b.as_slice(), *eps)?
            }
            OpKind::Softplus => {
                arity(1)?;
                v(0).map(softplus)
            }
            OpKind::Relu => {
                arity(1)?;
                let x = v(0);
                let mut pattern = self.relu_pattern;
                let mut margin = self.relu_margin;
                for &e in x.as_slice() {
                    pattern = (pattern ^ u64::from(e > 0.0)).wrapping_mul(FNV_PRIME);
                    margin = margin.min(e.abs());
                }
                let out = relu(x);
                self.relu_pattern = pattern;
                self.relu_margin = margin;
                out
            }
            OpKind::Mean => {
                arity(1)?;
                let x = v(0);
                if x.is_empty() {
                    return contract("mean of an empty matrix");
                }
                let total = x.as_slice().iter().fold(0.0, |a, &b| a + b);
                Matrix::filled(1, 1, total / x.len() as f64)
            }
            OpKind::GaussianNll(y) => {
                arity(2)?;
                Matrix::filled(1, 1, gaussian_nll(v(0), v(1), y)?)
            }
        };
        Ok(self.push(Some(kind), inputs.to_vec(), value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::MatMul, &[a, b])
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::MatMulNT, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.record(OpKind::AddRow, &[a, row])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.record(OpKind::Scale(s), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.record(OpKind::AddScalar(s), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.record(OpKind::ConcatRows, parts)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.record(OpKind::ConcatCols, parts)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.record(OpKind::SliceRows(start, end), &[a])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.record(OpKind::SliceCols(start, end), &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::SoftmaxRows, &[a])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(
            OpKind::LayerNorm(crate::numerics::LAYER_NORM_EPS),
            &[x, gain, bias],
        )
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Softplus, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Relu, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Mean, &[a])
    }

    pub fn gaussian_nll(&mut self, mean: NodeId, std: NodeId, targets: Matrix) -> Result<NodeId> {
        self.record(OpKind::GaussianNll(targets), &[mean, std])
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.check(&[root])?;
        if self.value(root).shape() != (1, 1) {
            return contract(format!(
                "backward root must be 1x1, got {:?}",
                self.value(root).shape()
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(kind) = &node.kind {
                for (input, contrib) in self.local_grads(kind, node, &g)? {
                    accumulate(&mut grads[input.0], contrib)?;
                }
            }
            grads[idx] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|(name, &id)| (name.clone(), id))
            .collect();
        Ok(Gradients {
            grads,
            params,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn local_grads(&self, kind: &OpKind, node: &Node, g: &Matrix) -> Result<Vec<(NodeId, Matrix)>> {
        let ins = &node.inputs;
        let val = |i: usize| &self.nodes[ins[i].0].value;
        Ok(match kind {
            OpKind::MatMul => vec![
                (ins[0], matmul_nt(g, val(1))?),
                (ins[1], matmul(&val(0).transpose(), g)?),
            ],
            OpKind::MatMulNT => vec![
                (ins[0], matmul(g, val(1))?),
                (ins[1], matmul(&g.transpose(), val(0))?),
            ],
            OpKind::Add => vec![(ins[0], g.clone()), (ins[1], g.clone())],
            OpKind::AddRow => {
                let mut row = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &x) in row.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                vec![(ins[0], g.clone()), (ins[1], row)]
            }
            OpKind::Scale(s) => vec![(ins[0], g.map(|x| x * s))],
            OpKind::AddScalar(_) => vec![(ins[0], g.clone())],
            OpKind::ConcatRows => {
                let mut start = 0;
                let mut out = Vec::with_capacity(ins.len());
                for &id in ins {
                    let rows = self.nodes[id.0].value.rows();
                    out.push((id, g.slice_rows(start, start + rows)?));
                    start += rows;
                }
                out
            }
            OpKind::ConcatCols => {
                let mut start = 0;
                let mut out = Vec::with_capacity(ins.len());
                for &id in ins {
                    let cols = self.nodes[id.0].value.cols();
                    out.push((id, g.slice_cols(start, start + cols)?));
                    start += cols;
                }
                out
            }
            OpKind::SliceRows(a, _) => {
                let x = val(0);
                let mut full = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    full.row_mut(a + r).copy_from_slice(g.row(r));
                }
                vec![(ins[0], full)]
            }
            OpKind::SliceCols(a, b) => {
                let x = val(0);
                let mut full = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    full.row_mut(r)[*a..*b].copy_from_slice(g.row(r));
                }
                vec![(ins[0], full)]
            }
            OpKind::SoftmaxRows => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = y.get(r, c) * (g.get(r, c) - dot);
                    }
                }
                vec![(ins[0], dx)]
            }
            OpKind::LayerNorm(eps) => {
                let (x, gain) = (val(0), val(1));
                let d = x.cols();
                let n = d as f64;
                let mut dx = Matrix::zeros(x.rows(), d);
                let mut dgain = Matrix::zeros(1, d);
                let mut dbias = Matrix::zeros(1, d);
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let mean = row.iter().fold(0.0, |a, &b| a + b) / n;
                    let var = row.iter().fold(0.0, |a, &b| a + (b - mean) * (b - mean)) / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = (0..d).map(|c| g.get(r, c) * gain.get(0, c)).collect();
                    let m1 = dxhat.iter().sum::<f64>() / n;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..d {
                        dx.set(r, c, inv * (dxhat[c] - m1 - xhat[c] * m2));
                        dgain.as_mut_slice()[c] += g.get(r, c) * xhat[c];
                        dbias.as_mut_slice()[c] += g.get(r, c);
                    }
                }
                vec![(ins[0], dx), (ins[1], dgain), (ins[2], dbias)]
            }
            OpKind::Softplus => {
                let x = val(0);
                let mut dx = g.clone();
                for (o, &xi) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    *o *= sigmoid(xi);
                }
                vec![(ins[0], dx)]
            }
            OpKind::Relu => {
                let x = val(0);
                let mut dx = g.clone();
                for (o, &xi) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    if xi <= 0.0 {
                        *o = 0.0;
                    }
                }
                vec![(ins[0], dx)]
            }
            OpKind::Mean => {
                let x = val(0);
                vec![(
                    ins[0],
                    Matrix::filled(x.rows(), x.cols(), g.get(0, 0) / x.len() as f64),
                )]
            }
            OpKind::GaussianNll(y) => {
                let (mean, std) = (val(0), val(1));
                let m = mean.rows() as f64;
                let scale = g.get(0, 0) / m;
                let mut dmean = Matrix::zeros(mean.rows(), 1);
                let mut dstd = Matrix::zeros(mean.rows(), 1);
                for j in 0..mean.rows() {
                    let sigma = std.get(j, 0);
                    let z = (y.get(j, 0) - mean.get(j, 0)) / sigma;
                    dmean.set(j, 0, -z / sigma * scale);
                    dstd.set(j, 0, (1.0 - z * z) / sigma * scale);
                }
                vec![(ins[0], dmean), (ins[1], dstd)]
            }
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Matrix>, contrib: Matrix) -> Result<()> {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            if acc.shape() != contrib.shape() {
                return Err(Error::Shape {
                    op: "backward",
                    lhs: acc.shape(),
                    rhs: contrib.shape(),
                });
            }
            for (a, b) in acc.as_mut_slice().iter_mut().zip(contrib.as_slice()) {
                *a += b;
            }
        }
    }
    Ok(())
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: IndexMap<String, NodeId>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient at `id`; zeros when the root does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Matrix {
        match self.grads.get(id.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Gradient of every named parameter on the tape.
    pub fn params(&self) -> IndexMap<String, Matrix> {
        self.params
            .iter()
            .map(|(name, &id)| (name.clone(), self.wrt(id)))
            .collect()
    }

    pub fn by_name(&self) -> HashMap<&str, NodeId> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check, Evaluation, GradCheckConfig, Grads, Objective, ParamStore};
    use crate::numerics::{init_matrix, InitScheme, RngState};

    fn rand(seed: u64, r: usize, c: usize) -> Matrix {
        init_matrix(
            &mut RngState::new(seed),
            r,
            c,
            InitScheme::Normal { std: 1.0 },
        )
    }

    #[test]
    fn identity_and_zero_recordings() {
        let m = rand(1, 3, 4);
        let mut t = Tape::new();
        let i = t.constant(Matrix::identity(3));
        let x = t.constant(m.clone());
        let z = t.constant(Matrix::zeros(3, 4));
        let p = t.matmul(i, x).unwrap();
        assert_eq!(t.value(p), &m);
        let s = t.add(x, z).unwrap();
        assert_eq!(t.value(s), &m);
    }

    #[test]
    fn taped_forward_equals_untaped_bitwise() {
        let a = rand(2, 3, 4);
        let b = rand(3, 4, 5);
        let g = rand(4, 1, 4);
        let bias = rand(5, 1, 4);
        let mut t = Tape::new();
        let (na, nb, ng, nbias) = (
            t.constant(a.clone()),
            t.constant(b.clone()),
            t.constant(g.clone()),
            t.constant(bias.clone()),
        );
        let mm = t.matmul(na, nb).unwrap();
        assert_eq!(t.value(mm), &matmul(&a, &b).unwrap());
        let sm = t.softmax_rows(mm).unwrap();
        assert_eq!(t.value(sm), &softmax_rows(&matmul(&a, &b).unwrap()));
        let ln = t.layer_norm(na, ng, nbias).unwrap();
        assert_eq!(
            t.value(ln),
            &layer_norm(&a, g.as_slice(), bias.as_slice(), 1e-5).unwrap()
        );
        let sp = t.softplus(na).unwrap();
        assert_eq!(t.value(sp), &a.map(softplus));
        let r = t.relu(na).unwrap();
        assert_eq!(t.value(r), &relu(&a));
        let nt = t.matmul_nt(na, na).unwrap();
        assert_eq!(t.value(nt), &matmul_nt(&a, &a).unwrap());
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut t = Tape::new();
        let x = t.param("x", &rand(6, 3, 5));
        let m = t.mean(x).unwrap();
        let g = t.backward(m).unwrap();
        assert!(g.wrt(x).as_slice().iter().all(|&v| v == 1.0 / 15.0));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param("x", &rand(7, 2, 2));
        let y = t.param("y", &rand(8, 2, 3));
        let m = t.mean(x).unwrap();
        let g = t.backward(m).unwrap().params();
        assert_eq!(g["y"], Matrix::zeros(2, 3));
        let _ = y;
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.param("x", &rand(9, 2, 2));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unsupported_op_name() {
        assert!("conv2d".parse::<OpKind>().is_err());
        assert_eq!("relu".parse::<OpKind>().unwrap(), OpKind::Relu);
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(1, 1));
        assert!(t.record(OpKind::MatMul, &[x]).is_err());
    }

    #[test]
    fn sum_of_independent_subgraphs_is_linear() {
        let (a, b) = (rand(10, 3, 3), rand(11, 3, 3));
        let build = |t: &mut Tape, use_a: bool, use_b: bool| -> NodeId {
            let na = t.param("a", &a);
            let nb = t.param("b", &b);
            let fa = {
                let s = t.softmax_rows(na).unwrap();
                let m = t.matmul(s, na).unwrap();
                t.mean(m).unwrap()
            };
            let fb = {
                let s = t.softplus(nb).unwrap();
                let m = t.matmul_nt(s, nb).unwrap();
                t.mean(m).unwrap()
            };
            match (use_a, use_b) {
                (true, true) => t.add(fa, fb).unwrap(),
                (true, false) => fa,
                _ => fb,
            }
        };
        let mut t = Tape::new();
        let root = build(&mut t, true, true);
        let both = t.backward(root).unwrap().params();
        let mut ta = Tape::new();
        let ra = build(&mut ta, true, false);
        let only_a = ta.backward(ra).unwrap().params();
        let mut tb = Tape::new();
        let rb = build(&mut tb, false, true);
        let only_b = tb.backward(rb).unwrap().params();
        for (x, y) in both["a"].as_slice().iter().zip(only_a["a"].as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in both["b"].as_slice().iter().zip(only_b["b"].as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    struct OpObjective<F>(F);

    impl<F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>> OpObjective<F> {
        fn run(&self, p: &ParamStore) -> Result<(Tape, NodeId)> {
            let mut t = Tape::new();
            let leaves: Vec<NodeId> = p.iter().map(|(name, m)| t.param(name, m)).collect();
            let out = (self.0)(&mut t, &leaves)?;
            let sp = t.softplus(out)?;
            let root = t.mean(sp)?;
            Ok((t, root))
        }
    }

    impl<F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>> Objective for OpObjective<F> {
        fn evaluate(&self, p: &ParamStore) -> Result<Evaluation> {
            let (t, root) = self.run(p)?;
            Ok(Evaluation {
                loss: t.value(root).get(0, 0),
                pattern: t.relu_pattern(),
                margin: t.relu_margin(),
            })
        }

        fn gradient(&self, p: &ParamStore) -> Result<Grads> {
            let (t, root) = self.run(p)?;
            let mut g = p.zeros_like();
            for (name, m) in t.backward(root)?.params() {
                g.insert(name, m);
            }
            Ok(g)
        }
    }

    fn check_op(
        name: &str,
        shapes: &[(usize, usize)],
        f: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    ) {
        let mut p = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            p.insert(format!("p{i}"), rand(40 + i as u64, r, c))
                .unwrap();
        }
        let report = grad_check(
            &OpObjective(f),
            &p,
            GradCheckConfig {
                h: 1e-5,
                samples: 1000,
                seed: 1,
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{name}: {report:?}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        check_op("matmul", &[(3, 4), (4, 2)], |t, p| t.matmul(p[0], p[1]));
        check_op("matmul_nt", &[(3, 4), (2, 4)], |t, p| {
            t.matmul_nt(p[0], p[1])
        });
        check_op("add", &[(3, 4), (3, 4)], |t, p| t.add(p[0], p[1]));
        check_op("add_row", &[(3, 4), (1, 4)], |t, p| t.add_row(p[0], p[1]));
        check_op("scale", &[(3, 4)], |t, p| t.scale(p[0], -1.7));
        check_op("add_scalar", &[(3, 4)], |t, p| t.add_scalar(p[0], 0.3));
        check_op("concat_rows", &[(2, 3), (1, 3)], |t, p| {
            t.concat_rows(&[p[0], p[1]])
        });
        check_op("concat_cols", &[(3, 2), (3, 1)], |t, p| {
            t.concat_cols(&[p[0], p[1]])
        });
        check_op("slice_rows", &[(4, 3)], |t, p| t.slice_rows(p[0], 1, 3));
        check_op("slice_cols", &[(3, 4)], |t, p| t.slice_cols(p[0], 1, 3));
        check_op("softmax_rows", &[(3, 4)], |t, p| t.softmax_rows(p[0]));
        check_op("layer_norm", &[(3, 4), (1, 4), (1, 4)], |t, p| {
            t.layer_norm(p[0], p[1], p[2])
        });
        check_op("softplus", &[(3, 4)], |t, p| t.softplus(p[0]));
        check_op("relu", &[(3, 4)], |t, p| t.relu(p[0]));
        check_op("mean", &[(3, 4)], |t, p| t.mean(p[0]));
        check_op("gaussian_nll", &[(3, 1), (3, 1)], |t, p| {
            let sp = t.softplus(p[1])?;
            let std = t.add_scalar(sp, 0.1)?;
            t.gaussian_nll(p[0], std, rand(9, 3, 1))
        });
    }
}
