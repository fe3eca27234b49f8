use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which parameters a subgraph's gradient may reach.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    FeatureExtractor,
    StopGradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    FeatureExtractor,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// An operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one optional gradient per input, given the upstream gradient
    /// with respect to `output`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

/// Geometry of a stride-1, zero-padded ("same") square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

/// Geometry of a 2x2, stride-2 average pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl PoolGeom {
    pub fn out_height(&self) -> usize {
        self.height / 2
    }
    pub fn out_width(&self) -> usize {
        self.width / 2
    }
}

enum Op<T: Scalar> {
    Constant,
    Param { id: ParamId, group: ParamGroup },
    MatMul,
    Add,
    AddRow,
    Sub,
    Mul,
    Scale(T),
    Relu,
    SoftmaxRows,
    LogSoftmaxRows,
    Log,
    Exp,
    Sum,
    Mean,
    SumRows,
    SqDistRows,
    Pick(Vec<usize>),
    Conv2d(ConvGeom),
    AvgPool2(PoolGeom),
    Scoped(Scope),
    Custom(Box<dyn CustomOp<T>>),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param { .. } => "param",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::AddRow => "add_row",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::SoftmaxRows => "softmax_rows",
            Op::LogSoftmaxRows => "log_softmax_rows",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumRows => "sum_rows",
            Op::SqDistRows => "sq_dist_rows",
            Op::Pick(_) => "pick",
            Op::Conv2d(_) => "conv2d",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Scoped(_) => "scoped",
            Op::Custom(c) => c.name(),
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    parents: Vec<usize>,
    value: Tensor<T>,
}

/// Gradients keyed by parameter, one entry per parameter registered on the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap<T> {
    grads: BTreeMap<ParamId, (ParamGroup, Tensor<T>)>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id).map(|(_, g)| g)
    }

    pub fn group(&self, id: ParamId) -> Option<ParamGroup> {
        self.grads.get(&id).map(|(g, _)| *g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, ParamGroup, &Tensor<T>)> {
        self.grads.iter().map(|(id, (grp, g))| (*id, *grp, g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// L2 norm over all gradients of one parameter group.
    pub fn group_norm(&self, group: ParamGroup) -> T {
        self.grads
            .values()
            .filter(|(g, _)| *g == group)
            .flat_map(|(_, t)| t.data().iter())
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }
}

/// Reverse-mode tape, rebuilt for every batch.
#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

fn shapes<T: Scalar>(ts: &[&Tensor<T>]) -> String {
    ts.iter()
        .map(|t| format!("{:?}", t.shape()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<T>, parents: Vec<usize>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, parents, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Constant, vec![], value)
    }

    pub fn param(&mut self, id: ParamId, group: ParamGroup, value: Tensor<T>) -> Var {
        self.push(Op::Param { id, group }, vec![], value)
    }

    /// Records a node whose forward value was computed externally.
    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var], value: Tensor<T>) -> Var {
        let parents = inputs.iter().map(|v| v.0).collect();
        self.push(Op::Custom(op), parents, value)
    }

    /// Identity in the forward pass; restricts which parameters the
    /// gradient flowing through this node may reach.
    pub fn scoped(&mut self, x: Var, scope: Scope) -> Var {
        let value = self.value(x).clone();
        self.push(Op::Scoped(scope), vec![x.0], value)
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        self.scoped(x, Scope::StopGradient)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul, vec![a.0, b.0], value))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, shapes(&[ta, tb])));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add, vec![a.0, b.0], value))
    }

    /// Adds a `1 × m` row to every row of an `n × m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(Error::shape("add_row", shapes(&[ta, tr])));
        }
        let mut value = ta.clone();
        let r = tr.data().to_vec();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *x = *x + b;
            }
        }
        Ok(self.push(Op::AddRow, vec![a.0, row.0], value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub, vec![a.0, b.0], value))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul, vec![a.0, b.0], value))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).scale(k);
        self.push(Op::Scale(k), vec![a.0], value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(Op::Relu, vec![a.0], value)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows, vec![a.0], value)
    }

    /// Row-wise `x − logsumexp(x)`; finite wherever the input is.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(Op::LogSoftmaxRows, vec![a.0], value)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if let Some(bad) = ta.data().iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::domain("log", format!("non-positive input {bad:e}")));
        }
        let value = ta.map(|x| x.ln());
        Ok(self.push(Op::Log, vec![a.0], value))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        self.push(Op::Exp, vec![a.0], value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum, vec![a.0], value)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let value = Tensor::scalar(ta.sum() / T::from_usize_lossy(ta.len()));
        Ok(self.push(Op::Mean, vec![a.0], value))
    }

    /// Sums each row of an `n × m` matrix into an `n × 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = (0..ta.rows()).map(|i| ta.row(i).iter().copied().sum()).collect();
        let value = Tensor::new(vec![ta.rows(), 1], data).expect("column shape");
        self.push(Op::SumRows, vec![a.0], value)
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (`n × d`)
    /// and `b` (`m × d`), giving `n × m`.
    pub fn sq_dist_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape("sq_dist_rows", shapes(&[ta, tb])));
        }
        let (n, m) = (ta.rows(), tb.rows());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(
                    ta.row(i)
                        .iter()
                        .zip(tb.row(j))
                        .map(|(&x, &y)| (x - y) * (x - y))
                        .sum(),
                );
            }
        }
        let value = Tensor::matrix(n, m, data)?;
        Ok(self.push(Op::SqDistRows, vec![a.0, b.0], value))
    }

    /// Selects entry `index[i]` from row `i`, giving an `n × 1` column.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if index.len() != ta.rows() || index.iter().any(|&j| j >= ta.cols()) {
            return Err(Error::shape(
                "pick",
                format!("{:?} with {} indices", ta.shape(), index.len()),
            ));
        }
        let data = index.iter().enumerate().map(|(i, &j)| ta.get(i, j)).collect();
        let value = Tensor::new(vec![index.len(), 1], data)?;
        Ok(self.push(Op::Pick(index.to_vec()), vec![a.0], value))
    }

    /// Same-padded stride-1 convolution. `x` is `B × (Cin·H·W)`, `kernel` is
    /// `Cout × (Cin·k·k)`, `bias` is `1 × Cout`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, geom: ConvGeom) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        let ConvGeom {
            in_channels: ci,
            out_channels: co,
            height: h,
            width: w,
            kernel: k,
        } = geom;
        if tx.cols() != ci * h * w
            || tk.rows() != co
            || tk.cols() != ci * k * k
            || tb.len() != co
            || k % 2 == 0
        {
            return Err(Error::shape("conv2d", shapes(&[tx, tk, tb])));
        }
        let value = conv2d_forward(tx, tk, tb, geom);
        Ok(self.push(Op::Conv2d(geom), vec![x.0, kernel.0, bias.0], value))
    }

    pub fn avg_pool2(&mut self, x: Var, geom: PoolGeom) -> Result<Var> {
        let tx = self.value(x);
        if tx.cols() != geom.channels * geom.height * geom.width || geom.height < 2 || geom.width < 2
        {
            return Err(Error::shape("avg_pool2", shapes(&[tx])));
        }
        let value = pool_forward(tx, geom);
        Ok(self.push(Op::AvgPool2(geom), vec![x.0], value))
    }

    /// Gradients of the scalar `root` with respect to every parameter on the tape.
    pub fn backward(&self, root: Var) -> Result<GradientMap<T>> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        const ALL: usize = 0;
        const FEATURE: usize = 1;

        let mut adj: Vec<[Option<Tensor<T>>; 2]> =
            (0..=root.0).map(|_| [None, None]).collect();
        adj[root.0][ALL] = Some(Tensor::full(root_value.shape().to_vec(), T::one()));
        let mut grads: BTreeMap<ParamId, (ParamGroup, Option<Tensor<T>>)> = BTreeMap::new();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if let Op::Param { id, group } = node.op {
                let entry = grads.entry(id).or_insert((group, None));
                if let Some(g) = adj[i][ALL].take() {
                    accumulate(&mut entry.1, g);
                }
                if let Some(g) = adj[i][FEATURE].take() {
                    if group == ParamGroup::FeatureExtractor {
                        accumulate(&mut entry.1, g);
                    }
                }
                continue;
            }
            for ch in [ALL, FEATURE] {
                let Some(g) = adj[i][ch].take() else {
                    continue;
                };
                match &node.op {
                    Op::Constant | Op::Scoped(Scope::StopGradient) => {}
                    Op::Scoped(Scope::FeatureExtractor) => {
                        accumulate(&mut adj[node.parents[0]][FEATURE], g);
                    }
                    Op::Scoped(Scope::All) => {
                        accumulate(&mut adj[node.parents[0]][ch], g);
                    }
                    _ => {
                        let pgrads = self.vjp(node, &g)?;
                        for (&p, pg) in node.parents.iter().zip(pgrads) {
                            if let Some(pg) = pg {
                                accumulate(&mut adj[p][ch], pg);
                            }
                        }
                    }
                }
            }
        }
        // Parameters recorded but never reached by the root.
        for node in &self.nodes {
            if let Op::Param { id, group } = node.op {
                grads.entry(id).or_insert((group, None));
            }
        }
        let grads = grads
            .into_iter()
            .map(|(id, (group, g))| {
                let shape = self
                    .nodes
                    .iter()
                    .find_map(|n| match n.op {
                        Op::Param { id: pid, .. } if pid == id => Some(n.value.shape().to_vec()),
                        _ => None,
                    })
                    .expect("param node present");
                (id, (group, g.unwrap_or_else(|| Tensor::zeros(shape))))
            })
            .collect();
        Ok(GradientMap { grads })
    }

    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let parent = |k: usize| &self.nodes[node.parents[k]].value;
        let out = &node.value;
        let grads = match &node.op {
            Op::MatMul => {
                let (a, b) = (parent(0), parent(1));
                vec![
                    Some(g.matmul(&b.transpose())?),
                    Some(a.transpose().matmul(g)?),
                ]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::AddRow => {
                let mut col = vec![T::zero(); g.cols()];
                for i in 0..g.rows() {
                    for (c, &x) in col.iter_mut().zip(g.row(i)) {
                        *c = *c + x;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::row_vector(col))]
            }
            Op::Sub => vec![Some(g.clone()), Some(g.map(|x| -x))],
            Op::Mul => {
                let (a, b) = (parent(0), parent(1));
                vec![
                    Some(g.zip_map(b, |x, y| x * y)),
                    Some(g.zip_map(a, |x, y| x * y)),
                ]
            }
            Op::Scale(k) => vec![Some(g.scale(*k))],
            Op::Relu => vec![Some(g.zip_map(parent(0), |gx, x| {
                if x > T::zero() {
                    gx
                } else {
                    T::zero()
                }
            }))],
            Op::SoftmaxRows => {
                let mut dx = g.clone();
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let dot: T = g.row(i).iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for ((d, &gy), &yy) in dx.row_mut(i).iter_mut().zip(g.row(i)).zip(y) {
                        *d = yy * (gy - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::LogSoftmaxRows => {
                let mut dx = g.clone();
                for i in 0..out.rows() {
                    let total: T = g.row(i).iter().copied().sum();
                    for (d, &ly) in dx.row_mut(i).iter_mut().zip(out.row(i)) {
                        *d = *d - ly.exp() * total;
                    }
                }
                vec![Some(dx)]
            }
            Op::Log => vec![Some(g.zip_map(parent(0), |gx, x| gx / x))],
            Op::Exp => vec![Some(g.zip_map(out, |gx, y| gx * y))],
            Op::Sum => {
                let a = parent(0);
                vec![Some(Tensor::full(a.shape().to_vec(), g.item()))]
            }
            Op::Mean => {
                let a = parent(0);
                let k = g.item() / T::from_usize_lossy(a.len());
                vec![Some(Tensor::full(a.shape().to_vec(), k))]
            }
            Op::SumRows => {
                let a = parent(0);
                let mut dx = Tensor::zeros(a.shape().to_vec());
                for i in 0..a.rows() {
                    let gi = g.data()[i];
                    dx.row_mut(i).iter_mut().for_each(|d| *d = gi);
                }
                vec![Some(dx)]
            }
            Op::SqDistRows => {
                let (a, b) = (parent(0), parent(1));
                let two = T::lit(2.0);
                let mut da = Tensor::zeros(a.shape().to_vec());
                let mut db = Tensor::zeros(b.shape().to_vec());
                for i in 0..a.rows() {
                    for j in 0..b.rows() {
                        let gij = g.get(i, j) * two;
                        for c in 0..a.cols() {
                            let diff = a.get(i, c) - b.get(j, c);
                            da.row_mut(i)[c] = da.row(i)[c] + gij * diff;
                            db.row_mut(j)[c] = db.row(j)[c] - gij * diff;
                        }
                    }
                }
                vec![Some(da), Some(db)]
            }
            Op::Pick(index) => {
                let a = parent(0);
                let mut dx = Tensor::zeros(a.shape().to_vec());
                for (i, &j) in index.iter().enumerate() {
                    dx.set(i, j, g.data()[i]);
                }
                vec![Some(dx)]
            }
            Op::Conv2d(geom) => {
                let (dx, dk, db) = conv2d_backward(parent(0), parent(1), g, *geom);
                vec![Some(dx), Some(dk), Some(db)]
            }
            Op::AvgPool2(geom) => vec![Some(pool_backward(parent(0), g, *geom))],
            Op::Custom(op) => {
                let inputs: Vec<&Tensor<T>> = (0..node.parents.len()).map(parent).collect();
                let grads = op.backward(&inputs, out, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (gi, x) in grads.iter().zip(&inputs) {
                    if let Some(gi) = gi {
                        if gi.shape() != x.shape() {
                            return Err(Error::shape(op.name(), shapes(&[gi, *x])));
                        }
                    }
                }
                grads
            }
            Op::Constant | Op::Param { .. } | Op::Scoped(_) => {
                unreachable!("{} handled by backward", node.op.name())
            }
        };
        Ok(grads)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let total = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
        let shift = max + total.ln();
        row.iter_mut().for_each(|v| *v = *v - shift);
    }
    out
}

fn conv2d_forward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, bias: &Tensor<T>, geom: ConvGeom) -> Tensor<T> {
    let ConvGeom {
        in_channels: ci,
        out_channels: co,
        height: h,
        width: w,
        kernel: ks,
    } = geom;
    let pad = (ks / 2) as isize;
    let batch = x.rows();
    let mut out = Tensor::zeros(vec![batch, co * h * w]);
    for b in 0..batch {
        let xin = x.row(b);
        let o = out.row_mut(b);
        for oc in 0..co {
            let kern = k.row(oc);
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias.data()[oc];
                    for ic in 0..ci {
                        for ky in 0..ks {
                            let iy = y as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..ks {
                                let ix = xx as isize + kx as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc = acc
                                    + kern[(ic * ks + ky) * ks + kx]
                                        * xin[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    o[(oc * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &Tensor<T>,
    geom: ConvGeom,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let ConvGeom {
        in_channels: ci,
        out_channels: co,
        height: h,
        width: w,
        kernel: ks,
    } = geom;
    let pad = (ks / 2) as isize;
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dk = Tensor::zeros(k.shape().to_vec());
    let mut db = vec![T::zero(); co];
    for b in 0..x.rows() {
        for oc in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let go = g.row(b)[(oc * h + y) * w + xx];
                    db[oc] = db[oc] + go;
                    for ic in 0..ci {
                        for ky in 0..ks {
                            let iy = y as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..ks {
                                let ix = xx as isize + kx as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = (ic * h + iy as usize) * w + ix as usize;
                                let ki = (ic * ks + ky) * ks + kx;
                                let kv = k.row(oc)[ki];
                                let xv = x.row(b)[xi];
                                dx.row_mut(b)[xi] = dx.row(b)[xi] + kv * go;
                                dk.row_mut(oc)[ki] = dk.row(oc)[ki] + xv * go;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk, Tensor::row_vector(db))
}

fn pool_forward<T: Scalar>(x: &Tensor<T>, geom: PoolGeom) -> Tensor<T> {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let quarter = T::lit(0.25);
    let mut out = Tensor::zeros(vec![x.rows(), geom.channels * oh * ow]);
    for b in 0..x.rows() {
        for c in 0..geom.channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let at = |dy: usize, dx: usize| {
                        x.row(b)[(c * geom.height + 2 * y + dy) * geom.width + 2 * xx + dx]
                    };
                    out.row_mut(b)[(c * oh + y) * ow + xx] =
                        (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter;
                }
            }
        }
    }
    out
}

fn pool_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, geom: PoolGeom) -> Tensor<T> {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let quarter = T::lit(0.25);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    for b in 0..x.rows() {
        for c in 0..geom.channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let go = g.row(b)[(c * oh + y) * ow + xx] * quarter;
                    for dy in 0..2 {
                        for dxx in 0..2 {
                            dx.row_mut(b)
                                [(c * geom.height + 2 * y + dy) * geom.width + 2 * xx + dxx] = go;
                        }
                    }
                }
            }
        }
    }
    dx
}
