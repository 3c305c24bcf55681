use std::collections::BTreeMap;

use super::ops::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv3d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Silu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, f64),
    MeanSquare(Var),
    Sum(Var),
    Transpose(Var),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    DiagMean(Var),
    PickMean(Var, Vec<usize>),
    NormalizeRows(Var),
    MulExp(Var, Var),
    StackRows(Vec<Var>),
    Reshape(Var),
    MeanCols(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | AddChannel(a, b) | MulExp(a, b) => vec![*a, *b],
            Conv3d { x, w, b, .. } => vec![*x, *w, *b],
            Silu(a) | Scale(a, _) | MeanSquare(a) | Sum(a) | Transpose(a) | LogSoftmaxRows(a)
            | SoftmaxRows(a) | DiagMean(a) | PickMean(a, _) | NormalizeRows(a) | Reshape(a)
            | MeanCols(a) => vec![*a],
            StackRows(vs) => vs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
    /// Bound parameters the loss does not depend on; their gradient is zero.
    pub unreached: Vec<String>,
}

impl Gradients {
    /// Gradient of a bound parameter. Unreached parameters yield `None`.
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|v| self.grads[v.0].as_deref())
    }

    /// Gradient with respect to any node; zeros when unreached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Sums another set of parameter gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, v) in &other.params {
            let Some(g) = other.grads[v.0].as_deref() else { continue };
            match self.params.get(name) {
                Some(mine) => match &mut self.grads[mine.0] {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g.to_vec()),
                },
                None => {
                    self.params.insert(name.clone(), Var(self.grads.len()));
                    self.grads.push(Some(g.to_vec()));
                }
            }
        }
        self.unreached.retain(|n| other.get(n).is_none());
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.params.values() {
            if let Some(g) = &mut self.grads[v.0] {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }

    /// Parameter gradients only, by name.
    pub fn into_named(self) -> BTreeMap<String, Vec<f64>> {
        let mut grads = self.grads;
        self.params
            .into_iter()
            .filter_map(|(n, v)| grads[v.0].take().map(|g| (n, g)))
            .collect()
    }

    pub fn from_named(named: BTreeMap<String, Vec<f64>>) -> Self {
        let mut params = BTreeMap::new();
        let mut grads = Vec::new();
        for (n, g) in named {
            params.insert(n, Var(grads.len()));
            grads.push(Some(g));
        }
        Gradients { grads, params, unreached: Vec::new() }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a named parameter; binding the same name twice returns the
    /// same node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Unnamed leaf (inputs, targets, constants).
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(shape, data, Op::Leaf)
    }

    pub fn finite_or(&self, v: Var, layer: &str) -> Result<Var> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err(Error::NonFiniteActivation { layer: layer.to_string() })
        }
    }

    /// `[m, k] · [k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul {sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        ops::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// Stride-1 same-padded convolution. `x: [cin, d, h, w]`,
    /// `w: [cout, cin, kd, kh, kw]` with odd kernel extents, `b: [cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 5 || sw[1] != sx[0] || sb != [sw[0]] {
            return Err(Error::ShapeMismatch(format!("conv3d x{sx:?} w{sw:?} b{sb:?}")));
        }
        if sw[2..].iter().any(|k| k % 2 == 0) {
            return Err(Error::ShapeMismatch(format!("conv3d kernel {:?} must be odd", &sw[2..])));
        }
        let geom = ConvGeom {
            cin: sx[0],
            cout: sw[0],
            space: [sx[1], sx[2], sx[3]],
            kernel: [sw[2], sw[3], sw[4]],
        };
        let out = ops::conv3d_forward(&geom, self.value(x), self.value(w), self.value(b));
        let shape = vec![geom.cout, sx[1], sx[2], sx[3]];
        Ok(self.push(shape, out, Op::Conv3d { x, w, b, geom }))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x * ops::sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Silu(a))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.try_add(a, b).expect("add: shapes must match")
    }

    pub fn try_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    /// `x[c, ...] + v[c]`, broadcasting `v` over the trailing axes.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.value(v).len() != c {
            return Err(Error::ShapeMismatch(format!(
                "add_channel: {c} channels vs vector of {}",
                self.value(v).len()
            )));
        }
        let per = self.value(x).len() / c;
        let vals = self.value(v).to_vec();
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, xv)| xv + vals[i / per])
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddChannel(x, v)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s))
    }

    /// `mean(x²)` as a scalar.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![out], Op::MeanSquare(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().sum();
        self.push(vec![1], vec![out], Op::Sum(a))
    }

    fn matrix_dims(&self, a: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(a) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::ShapeMismatch(format!("{what} needs a matrix, got {s:?}"))),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "log_softmax_rows")?;
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for row in v.chunks(c) {
            let lse = ops::log_sum_exp(row);
            out.extend(row.iter().map(|x| x - lse));
        }
        Ok(self.push(vec![r, c], out, Op::LogSoftmaxRows(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "softmax_rows")?;
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for row in v.chunks(c) {
            let lse = ops::log_sum_exp(row);
            out.extend(row.iter().map(|x| (x - lse).exp()));
        }
        Ok(self.push(vec![r, c], out, Op::SoftmaxRows(a)))
    }

    /// Mean of the diagonal of a square matrix.
    pub fn diag_mean(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "diag_mean")?;
        if r != c {
            return Err(Error::ShapeMismatch(format!("diag_mean on {r}×{c}")));
        }
        let v = self.value(a);
        let out = (0..r).map(|i| v[i * c + i]).sum::<f64>() / r as f64;
        Ok(self.push(vec![1], vec![out], Op::DiagMean(a)))
    }

    /// `mean_r x[r, targets[r]]`
    pub fn pick_mean(&mut self, a: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "pick_mean")?;
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(Error::ShapeMismatch("pick_mean targets out of range".into()));
        }
        let v = self.value(a);
        let out = targets.iter().enumerate().map(|(i, &t)| v[i * c + t]).sum::<f64>() / r as f64;
        Ok(self.push(vec![1], vec![out], Op::PickMean(a, targets.to_vec())))
    }

    /// Each row divided by its L2 norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "normalize_rows")?;
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for (i, row) in v.chunks(c).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0) {
                return Err(Error::DegenerateEmbedding(i));
            }
            out.extend(row.iter().map(|x| x / n));
        }
        Ok(self.push(vec![r, c], out, Op::NormalizeRows(a)))
    }

    /// `x · exp(s)` for a scalar `s`.
    pub fn mul_exp(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch("mul_exp scale must be scalar".into()));
        }
        let e = self.value(s)[0].exp();
        let out = self.value(x).iter().map(|v| v * e).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulExp(x, s)))
    }

    /// Stacks equally sized nodes (flattened) as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(first) = rows.first() else {
            return Err(Error::ShapeMismatch("stack_rows of nothing".into()));
        };
        let f = self.value(*first).len();
        let mut out = Vec::with_capacity(rows.len() * f);
        for r in rows {
            if self.value(*r).len() != f {
                return Err(Error::ShapeMismatch("stack_rows: ragged rows".into()));
            }
            out.extend_from_slice(self.value(*r));
        }
        Ok(self.push(vec![rows.len(), f], out, Op::StackRows(rows.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::ShapeMismatch(format!("reshape {:?} → {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape, out, Op::Reshape(a)))
    }

    /// `x[c, ...] → [c]`, averaging the trailing axes.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let c = self.shape(a)[0];
        let per = self.value(a).len() / c;
        let out = self.value(a).chunks(per).map(|ch| ch.iter().sum::<f64>() / per as f64).collect();
        self.push(vec![c], out, Op::MeanCols(a))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "loss must be scalar, got {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for p in node.op.parents() {
                if p.0 >= i {
                    return Err(Error::Config(format!("graph cycle: node {i} reads node {}", p.0)));
                }
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let unreached = self
            .params
            .iter()
            .filter(|(_, v)| grads[v.0].is_none())
            .map(|(n, _)| n.clone())
            .collect();
        Ok(Gradients { grads, params: self.params.clone(), unreached })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.as_slice();
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
            ($v:expr, |$d:ident| $body:expr) => {{
                let $d = slot(grads, nodes, $v);
                $body;
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc!(*a, |d| ops::matmul_bt_acc(g, val(*b), d, m, n, k));
                acc!(*b, |d| ops::matmul_at_acc(val(*a), g, d, m, k, n));
            }
            Op::Conv3d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                acc!(*w, |d| ops::conv3d_backward(geom, xv, wv, g, None, Some(&mut d[..]), None));
                acc!(*b, |d| ops::conv3d_backward(geom, xv, wv, g, None, None, Some(&mut d[..])));
                acc!(*x, |d| ops::conv3d_backward(geom, xv, wv, g, Some(&mut d[..]), None, None));
            }
            Op::Silu(a) => {
                let d = acc!(*a);
                for ((dx, &x), gy) in d.iter_mut().zip(val(*a)).zip(g) {
                    let s = ops::sigmoid(x);
                    *dx += gy * s * (1.0 + x * (1.0 - s));
                }
            }
            Op::Add(a, b) => {
                acc!(*a, |d| d.iter_mut().zip(g).for_each(|(d, gy)| *d += gy));
                acc!(*b, |d| d.iter_mut().zip(g).for_each(|(d, gy)| *d += gy));
            }
            Op::Sub(a, b) => {
                acc!(*a, |d| d.iter_mut().zip(g).for_each(|(d, gy)| *d += gy));
                acc!(*b, |d| d.iter_mut().zip(g).for_each(|(d, gy)| *d -= gy));
            }
            Op::AddChannel(x, v) => {
                acc!(*x, |d| d.iter_mut().zip(g).for_each(|(d, gy)| *d += gy));
                let dv = acc!(*v);
                let per = g.len() / dv.len();
                for (c, chunk) in g.chunks(per).enumerate() {
                    dv[c] += chunk.iter().sum::<f64>();
                }
            }
            Op::Scale(a, s) => {
                acc!(*a, |d| d.iter_mut().zip(g).for_each(|(d, gy)| *d += gy * s));
            }
            Op::MeanSquare(a) => {
                let x = val(*a);
                let c = 2.0 * g[0] / x.len() as f64;
                acc!(*a, |d| d.iter_mut().zip(x).for_each(|(d, xv)| *d += c * xv));
            }
            Op::Sum(a) => {
                acc!(*a, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let d = acc!(*a);
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let c = nodes[a.0].shape[1];
                let d = acc!(*a);
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(node.value.chunks(c)).zip(g.chunks(c)) {
                    let gs: f64 = grow.iter().sum();
                    for j in 0..c {
                        drow[j] += grow[j] - yrow[j].exp() * gs;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = nodes[a.0].shape[1];
                let d = acc!(*a);
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(node.value.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gy)| y * gy).sum();
                    for j in 0..c {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::DiagMean(a) => {
                let n = nodes[a.0].shape[0];
                let d = acc!(*a);
                for i in 0..n {
                    d[i * n + i] += g[0] / n as f64;
                }
            }
            Op::PickMean(a, targets) => {
                let c = nodes[a.0].shape[1];
                let d = acc!(*a);
                let w = g[0] / targets.len() as f64;
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] += w;
                }
            }
            Op::NormalizeRows(a) => {
                let c = nodes[a.0].shape[1];
                let x = val(*a);
                let d = acc!(*a);
                for (r, ((drow, yrow), grow)) in
                    d.chunks_mut(c).zip(node.value.chunks(c)).zip(g.chunks(c)).enumerate()
                {
                    let norm = x[r * c..(r + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gy)| y * gy).sum();
                    for j in 0..c {
                        drow[j] += (grow[j] - yrow[j] * dot) / norm;
                    }
                }
            }
            Op::MulExp(x, s) => {
                let e = val(*s)[0].exp();
                acc!(*x, |d| d.iter_mut().zip(g).for_each(|(d, gy)| *d += gy * e));
                let ds: f64 = node.value.iter().zip(g).map(|(y, gy)| y * gy).sum();
                acc!(*s)[0] += ds;
            }
            Op::StackRows(rows) => {
                let f = g.len() / rows.len();
                for (i, r) in rows.iter().enumerate() {
                    acc!(*r, |d| d.iter_mut().zip(&g[i * f..(i + 1) * f]).for_each(|(d, gy)| *d += gy));
                }
            }
            Op::Reshape(a) => {
                acc!(*a, |d| d.iter_mut().zip(g).for_each(|(d, gy)| *d += gy));
            }
            Op::MeanCols(a) => {
                let c = nodes[a.0].shape[0];
                let d = acc!(*a);
                let per = d.len() / c;
                for (ch, dchunk) in d.chunks_mut(per).enumerate() {
                    dchunk.iter_mut().for_each(|v| *v += g[ch] / per as f64);
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}
