//! Wengert-tape reverse-mode engine.
//!
//! Every operation appends a node and evaluates it eagerly. Backward passes
//! build adjoints *as new graph nodes*, so a gradient is itself a recorded
//! computation and can be differentiated again. That is the whole second-order
//! story: hvp and mixed vector products are a backward pass over a tape that
//! already contains a first backward pass.
//!
//! Closure property: every VJP below is expressed in ops that themselves have
//! VJPs, so any order of differentiation stays on the tape.

use std::sync::Arc;

use super::tensor::{matmul, Tensor};

/// Handle to a node on one graph. Only valid for the graph that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { label: Option<Arc<str>> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    SumAll(Var),
    /// Broadcast a scalar to an arbitrary shape.
    Fill { src: Var },
    /// [m, n] -> [m, 1]
    RowSum(Var),
    /// [m, n] -> [1, n]
    ColSum(Var),
    /// [m, 1] -> [m, n]
    BroadcastCols { src: Var },
    /// [1, n] -> [m, n]
    BroadcastRows { src: Var },
    /// [v, d], ids[m] -> [m, d]
    GatherRows { table: Var, ids: Arc<[u32]> },
    /// [m, d] -> [v, d], adding rows at `ids`
    ScatterRows { src: Var, ids: Arc<[u32]> },
    /// [m, n], cols[m] -> [m, 1]
    SelectCols { src: Var, cols: Arc<[u32]> },
    /// [m, 1] -> [m, n], value at (i, cols[i])
    ScatterCols { src: Var, cols: Arc<[u32]> },
    /// [m, n] -> [m, len], columns start..start+len
    SliceCols { src: Var, start: usize, len: usize },
    /// [m, len] -> [m, width], zero outside start..start+len
    PadCols { src: Var, start: usize },
    /// k scalars -> [k]
    Stack(Arc<[Var]>),
    /// [k] -> scalar at position `at`
    Index { src: Var, at: usize },
    /// scalar -> [k], zero except position `at`
    PadAt { src: Var, at: usize },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// One recorded computation. Not shared across threads; parameter values are
/// copied in as leaves, so graphs never alias caller state.
pub struct Graph {
    nodes: Vec<Node>,
    /// First non-finite op observed, if any. Checked by the scalar-function
    /// entry points; never silently propagated into results.
    fault: Option<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node at index >= `mark`. Used to reuse a recorded forward
    /// (and first backward) across repeated backward passes.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn fault(&self) -> Option<&str> {
        self.fault.as_deref()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.idx()].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        if self.fault.is_none() && !value.all_finite() {
            let detail = match &op {
                Op::Leaf { label: Some(l) } => format!("non-finite value in leaf '{l}'"),
                other => format!("non-finite value in {}", op_name(other)),
            };
            self.fault = Some(detail);
        }
        let id = self.nodes.len();
        assert!(id <= u32::MAX as usize, "graph too large");
        self.nodes.push(Node { op, value });
        Var(id as u32)
    }

    // ---- leaves -----------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { label: None }, value)
    }

    pub fn labeled_leaf(&mut self, value: Tensor, label: &str) -> Var {
        self.push(Op::Leaf { label: Some(label.into()) }, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Tensor::scalar(x))
    }

    // ---- elementwise ------------------------------------------------------

    fn binary_map(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (&self.nodes[a.idx()].value, &self.nodes[b.idx()].value);
        assert_eq!(ta.shape(), tb.shape(), "elementwise {} shape mismatch", op_name(&op));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        self.push(op, Tensor::new(shape, data))
    }

    fn unary_map(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let ta = &self.nodes[a.idx()].value;
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let shape = ta.shape().to_vec();
        self.push(op, Tensor::new(shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_map(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_map(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_map(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_map(Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary_map(Op::Neg(a), a, |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary_map(Op::Scale(a, c), a, |x| c * x)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary_map(Op::AddConst(a), a, |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary_map(Op::Exp(a), a, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary_map(Op::Ln(a), a, f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary_map(Op::Sqrt(a), a, f64::sqrt)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary_map(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary_map(Op::Sigmoid(a), a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    // ---- linear algebra and reductions -------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = matmul(&self.nodes[a.idx()].value, ta, &self.nodes[b.idx()].value, tb);
        self.push(Op::MatMul { a, ta, b, tb }, value)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.idx()].value.data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn fill(&mut self, src: Var, shape: Vec<usize>) -> Var {
        let v = self.nodes[src.idx()].value.item();
        let value = Tensor::filled(shape.clone(), v);
        self.push(Op::Fill { src }, value)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.idx()].value;
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = t.data()[i * n..(i + 1) * n].iter().sum();
        }
        self.push(Op::RowSum(a), Tensor::new(vec![m, 1], out))
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.idx()].value;
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += t.data()[i * n + j];
            }
        }
        self.push(Op::ColSum(a), Tensor::new(vec![1, n], out))
    }

    pub fn broadcast_cols(&mut self, src: Var, n: usize) -> Var {
        let t = &self.nodes[src.idx()].value;
        assert_eq!(t.cols(), 1, "broadcast_cols wants [m, 1]");
        let m = t.rows();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            out[i * n..(i + 1) * n].fill(t.data()[i]);
        }
        self.push(Op::BroadcastCols { src }, Tensor::new(vec![m, n], out))
    }

    pub fn broadcast_rows(&mut self, src: Var, m: usize) -> Var {
        let t = &self.nodes[src.idx()].value;
        assert_eq!(t.rows(), 1, "broadcast_rows wants [1, n]");
        let n = t.cols();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            out[i * n..(i + 1) * n].copy_from_slice(t.data());
        }
        self.push(Op::BroadcastRows { src }, Tensor::new(vec![m, n], out))
    }

    pub fn gather_rows(&mut self, table: Var, ids: Arc<[u32]>) -> Var {
        let t = &self.nodes[table.idx()].value;
        let (v, d) = (t.rows(), t.cols());
        let m = ids.len();
        let mut out = vec![0.0; m * d];
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            assert!(id < v, "gather_rows id {} out of {}", id, v);
            out[i * d..(i + 1) * d].copy_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        self.push(Op::GatherRows { table, ids }, Tensor::new(vec![m, d], out))
    }

    pub fn scatter_rows(&mut self, src: Var, ids: Arc<[u32]>, table_rows: usize) -> Var {
        let t = &self.nodes[src.idx()].value;
        let (m, d) = (t.rows(), t.cols());
        assert_eq!(m, ids.len());
        let mut out = vec![0.0; table_rows * d];
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            for j in 0..d {
                out[id * d + j] += t.data()[i * d + j];
            }
        }
        self.push(Op::ScatterRows { src, ids }, Tensor::new(vec![table_rows, d], out))
    }

    pub fn select_cols(&mut self, src: Var, cols: Arc<[u32]>) -> Var {
        let t = &self.nodes[src.idx()].value;
        let (m, n) = (t.rows(), t.cols());
        assert_eq!(m, cols.len());
        let mut out = vec![0.0; m];
        for i in 0..m {
            let c = cols[i] as usize;
            assert!(c < n, "select_cols col {} out of {}", c, n);
            out[i] = t.data()[i * n + c];
        }
        self.push(Op::SelectCols { src, cols }, Tensor::new(vec![m, 1], out))
    }

    pub fn scatter_cols(&mut self, src: Var, cols: Arc<[u32]>, width: usize) -> Var {
        let t = &self.nodes[src.idx()].value;
        let m = t.rows();
        assert_eq!(t.cols(), 1);
        assert_eq!(m, cols.len());
        let mut out = vec![0.0; m * width];
        for i in 0..m {
            out[i * width + cols[i] as usize] = t.data()[i];
        }
        self.push(Op::ScatterCols { src, cols }, Tensor::new(vec![m, width], out))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[src.idx()].value;
        let (m, n) = (t.rows(), t.cols());
        assert!(start + len <= n);
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        self.push(Op::SliceCols { src, start, len }, Tensor::new(vec![m, len], out))
    }

    pub fn pad_cols(&mut self, src: Var, start: usize, width: usize) -> Var {
        let t = &self.nodes[src.idx()].value;
        let (m, len) = (t.rows(), t.cols());
        assert!(start + len <= width);
        let mut out = vec![0.0; m * width];
        for i in 0..m {
            out[i * width + start..i * width + start + len]
                .copy_from_slice(&t.data()[i * len..(i + 1) * len]);
        }
        self.push(Op::PadCols { src, start }, Tensor::new(vec![m, width], out))
    }

    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let data: Vec<f64> = parts.iter().map(|v| self.nodes[v.idx()].value.item()).collect();
        let k = data.len();
        self.push(Op::Stack(parts.into()), Tensor::new(vec![k], data))
    }

    pub fn index(&mut self, src: Var, at: usize) -> Var {
        let t = &self.nodes[src.idx()].value;
        assert_eq!(t.shape().len(), 1);
        let x = t.data()[at];
        self.push(Op::Index { src, at }, Tensor::scalar(x))
    }

    pub fn pad_at(&mut self, src: Var, at: usize, len: usize) -> Var {
        let x = self.nodes[src.idx()].value.item();
        let mut out = vec![0.0; len];
        out[at] = x;
        self.push(Op::PadAt { src, at }, Tensor::new(vec![len], out))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from scalar `out`. Adjoints are recorded as new nodes, so
    /// the returned gradients are differentiable. Leaves without a path to
    /// `out` get zero gradients.
    pub fn backward(&mut self, out: Var, wrt: &[Var]) -> Vec<Var> {
        assert!(self.value(out).is_scalar(), "backward from non-scalar output");
        let horizon = out.idx() + 1;

        let mut needed = vec![false; horizon];
        needed[out.idx()] = true;
        for id in (0..horizon).rev() {
            if needed[id] {
                for inp in op_inputs(&self.nodes[id].op) {
                    if inp.idx() < horizon {
                        needed[inp.idx()] = true;
                    }
                }
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; horizon];
        adjoint[out.idx()] = Some(self.scalar(1.0));

        for id in (0..horizon).rev() {
            if !needed[id] {
                continue;
            }
            let Some(up) = adjoint[id] else { continue };
            let op = self.nodes[id].op.clone();
            let this = Var(id as u32);
            for (input, contrib) in self.vjp(&op, this, up) {
                let slot = &mut adjoint[input.idx()];
                *slot = Some(match *slot {
                    Some(prev) => self.add(prev, contrib),
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|w| adjoint[w.idx()].unwrap_or_else(|| {
                let shape = self.shape(*w).to_vec();
                self.leaf(Tensor::zeros(shape))
            }))
            .collect()
    }

    /// Adjoint contributions of one node: pairs of (input, d out / d input
    /// contribution), built from differentiable ops only.
    fn vjp(&mut self, op: &Op, this: Var, up: Var) -> Vec<(Var, Var)> {
        match op {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) => vec![(*a, up), (*b, up)],
            Op::Sub(a, b) => {
                let nb = self.neg(up);
                vec![(*a, up), (*b, nb)]
            }
            Op::Mul(a, b) => {
                let ga = self.mul(up, *b);
                let gb = self.mul(up, *a);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Div(a, b) => {
                // d/da = up / b ; d/db = -up * a / b^2
                let ga = self.div(up, *b);
                let ua = self.mul(up, *a);
                let bb = self.mul(*b, *b);
                let gb0 = self.div(ua, bb);
                let gb = self.neg(gb0);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Neg(a) => {
                let g = self.neg(up);
                vec![(*a, g)]
            }
            Op::Scale(a, c) => {
                let g = self.scale(up, *c);
                vec![(*a, g)]
            }
            Op::AddConst(a) => vec![(*a, up)],
            Op::Exp(a) => {
                let g = self.mul(up, this);
                vec![(*a, g)]
            }
            Op::Ln(a) => {
                let g = self.div(up, *a);
                vec![(*a, g)]
            }
            Op::Sqrt(a) => {
                let two = self.scale(this, 2.0);
                let g = self.div(up, two);
                vec![(*a, g)]
            }
            Op::Tanh(a) => {
                // 1 - tanh^2
                let sq = self.mul(this, this);
                let neg = self.neg(sq);
                let one_minus = self.add_const(neg, 1.0);
                let g = self.mul(up, one_minus);
                vec![(*a, g)]
            }
            Op::Sigmoid(a) => {
                // s * (1 - s)
                let neg = self.neg(this);
                let one_minus = self.add_const(neg, 1.0);
                let ds = self.mul(this, one_minus);
                let g = self.mul(up, ds);
                vec![(*a, g)]
            }
            Op::MatMul { a, ta, b, tb } => {
                // C = op(A) op(B); dA and dB follow from the four layouts.
                let (a, ta, b, tb) = (*a, *ta, *b, *tb);
                let ga = match (ta, tb) {
                    (false, false) => self.matmul_t(up, false, b, true),
                    (false, true) => self.matmul_t(up, false, b, false),
                    (true, false) => self.matmul_t(b, false, up, true),
                    (true, true) => self.matmul_t(b, true, up, true),
                };
                let gb = match (ta, tb) {
                    (false, false) => self.matmul_t(a, true, up, false),
                    (false, true) => self.matmul_t(up, true, a, false),
                    (true, false) => self.matmul_t(a, false, up, false),
                    (true, true) => self.matmul_t(up, true, a, true),
                };
                vec![(a, ga), (b, gb)]
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a).to_vec();
                let g = self.fill(up, shape);
                vec![(*a, g)]
            }
            Op::Fill { src } => {
                let g = self.sum_all(up);
                vec![(*src, g)]
            }
            Op::RowSum(a) => {
                let n = self.shape(*a)[1];
                let g = self.broadcast_cols(up, n);
                vec![(*a, g)]
            }
            Op::ColSum(a) => {
                let m = self.shape(*a)[0];
                let g = self.broadcast_rows(up, m);
                vec![(*a, g)]
            }
            Op::BroadcastCols { src } => {
                let g = self.row_sum(up);
                vec![(*src, g)]
            }
            Op::BroadcastRows { src } => {
                let g = self.col_sum(up);
                vec![(*src, g)]
            }
            Op::GatherRows { table, ids } => {
                let rows = self.shape(*table)[0];
                let g = self.scatter_rows(up, ids.clone(), rows);
                vec![(*table, g)]
            }
            Op::ScatterRows { src, ids } => {
                let g = self.gather_rows(up, ids.clone());
                vec![(*src, g)]
            }
            Op::SelectCols { src, cols } => {
                let width = self.shape(*src)[1];
                let g = self.scatter_cols(up, cols.clone(), width);
                vec![(*src, g)]
            }
            Op::ScatterCols { src, cols } => {
                let g = self.select_cols(up, cols.clone());
                vec![(*src, g)]
            }
            Op::SliceCols { src, start, len } => {
                let width = self.shape(*src)[1];
                let _ = len;
                let g = self.pad_cols(up, *start, width);
                vec![(*src, g)]
            }
            Op::PadCols { src, start } => {
                let len = self.shape(*src)[1];
                let g = self.slice_cols(up, *start, len);
                vec![(*src, g)]
            }
            Op::Stack(parts) => {
                let parts = parts.clone();
                parts
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let g = self.index(up, i);
                        (*p, g)
                    })
                    .collect()
            }
            Op::Index { src, at } => {
                let len = self.shape(*src)[0];
                let g = self.pad_at(up, *at, len);
                vec![(*src, g)]
            }
            Op::PadAt { src, at } => {
                let g = self.index(up, *at);
                vec![(*src, g)]
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddConst(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sqrt(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::SumAll(a)
        | Op::RowSum(a)
        | Op::ColSum(a) => vec![*a],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Fill { src, .. }
        | Op::BroadcastCols { src, .. }
        | Op::BroadcastRows { src, .. }
        | Op::ScatterRows { src, .. }
        | Op::SelectCols { src, .. }
        | Op::ScatterCols { src, .. }
        | Op::SliceCols { src, .. }
        | Op::PadCols { src, .. }
        | Op::Index { src, .. }
        | Op::PadAt { src, .. } => vec![*src],
        Op::GatherRows { table, .. } => vec![*table],
        Op::Stack(parts) => parts.to_vec(),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(..) => "neg",
        Op::Scale(..) => "scale",
        Op::AddConst(..) => "add_const",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Sqrt(..) => "sqrt",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::MatMul { .. } => "matmul",
        Op::SumAll(..) => "sum_all",
        Op::Fill { .. } => "fill",
        Op::RowSum(..) => "row_sum",
        Op::ColSum(..) => "col_sum",
        Op::BroadcastCols { .. } => "broadcast_cols",
        Op::BroadcastRows { .. } => "broadcast_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::ScatterRows { .. } => "scatter_rows",
        Op::SelectCols { .. } => "select_cols",
        Op::ScatterCols { .. } => "scatter_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::PadCols { .. } => "pad_cols",
        Op::Stack(..) => "stack",
        Op::Index { .. } => "index",
        Op::PadAt { .. } => "pad_at",
    }
}
