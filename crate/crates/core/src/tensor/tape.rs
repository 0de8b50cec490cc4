use super::{Gradients, GroupSet, ParamGroup, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanLast(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Gather(Var, Vec<usize>),
    Softmax(Var, usize),
    StopGradient,
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    op: Op,
    param: Option<(ParamId, ParamGroup)>,
}

/// Parameter handles produced by [`Tape::bind`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

/// Ordered record of a forward computation.
///
/// Broadcasting rules, by primitive:
/// - `matmul`: `[n, k] x [k, m] -> [n, m]`.
/// - `add`: equal shapes; a rank-1 right operand whose length equals the
///   left operand's trailing dimension (bias broadcast over all leading
///   dimensions); or a `[1]` right operand (scalar broadcast).
/// - `mul`: equal shapes, or a `[1]` right operand.
/// - `sub`: equal shapes only.
/// - every other primitive is elementwise or has an explicit axis argument.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.values.clone()).expect("tape nodes hold valid tensors")
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), false, Op::Leaf)
    }

    /// Records every parameter of `store` as a leaf tagged with its group.
    pub fn bind(&mut self, store: &ParamStore) -> Binding {
        let vars = store
            .iter()
            .map(|(id, p)| {
                let v = self.leaf(&p.tensor);
                self.nodes[v.0].param = Some((id, p.group));
                v
            })
            .collect();
        Binding { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (n, k, m) = match (sa, sb) {
            ([n, k], [k2, m]) if k == k2 => (*n, *k, *m),
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                row.iter_mut().zip(brow).for_each(|(o, b)| *o += x * b);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![n, m], out, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rg = self.rg(&[a, b]);
        if sa == sb {
            let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
            return Ok(self.push(sa, out, rg, Op::Add(a, b)));
        }
        if sb.len() == 1 && sb[0] == *sa.last().unwrap() {
            let bv = self.value(b);
            let m = bv.len();
            let out = self
                .value(a)
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv[i % m])
                .collect();
            return Ok(self.push(sa, out, rg, Op::AddRow(a, b)));
        }
        if sb == [1] {
            let s = self.value(b)[0];
            let out = self.value(a).iter().map(|x| x + s).collect();
            return Ok(self.push(sa, out, rg, Op::AddScalar(a, b)));
        }
        Err(Error::Shape {
            op: "add",
            lhs: sa,
            rhs: sb,
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Shape {
                op: "sub",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(sa, out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rg = self.rg(&[a, b]);
        if sa == sb {
            let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
            return Ok(self.push(sa, out, rg, Op::Mul(a, b)));
        }
        if sb == [1] {
            let s = self.value(b)[0];
            let out = self.value(a).iter().map(|x| x * s).collect();
            return Ok(self.push(sa, out, rg, Op::MulScalar(a, b)));
        }
        Err(Error::Shape {
            op: "mul",
            lhs: sa,
            rhs: sb,
        })
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(shape, out, rg, op)
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input lies inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![m], rg, Op::Mean(a))
    }

    fn reduce_last(&mut self, a: Var, mean: bool) -> Var {
        let shape = self.shape(a).to_vec();
        let m = *shape.last().unwrap();
        let denom = if mean { m as f64 } else { 1.0 };
        let out: Vec<f64> = self
            .value(a)
            .chunks(m)
            .map(|c| c.iter().sum::<f64>() / denom)
            .collect();
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let rg = self.rg(&[a]);
        let op = if mean { Op::MeanLast(a) } else { Op::SumLast(a) };
        self.push(out_shape, out, rg, op)
    }

    /// Sums over the trailing axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        self.reduce_last(a, false)
    }

    /// Averages over the trailing axis.
    pub fn mean_last(&mut self, a: Var) -> Var {
        self.reduce_last(a, true)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let sa = self.shape(a);
        if shape.is_empty()
            || shape.contains(&0)
            || shape.iter().product::<usize>() != sa.iter().product::<usize>()
        {
            return Err(Error::Shape {
                op: "reshape",
                lhs: sa.to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, rg, Op::Reshape(a)))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = lanes(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p)[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(shape, out, rg, Op::Concat(parts.to_vec(), axis)))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: sa,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, n, inner) = lanes(&sa, axis);
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&v[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, rg, Op::Slice { input: a, axis, start }))
    }

    /// Selects entries along axis 0; indices may repeat.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if indices.is_empty() || indices.iter().any(|&i| i >= sa[0]) {
            return Err(Error::Shape {
                op: "gather",
                lhs: sa,
                rhs: indices.to_vec(),
            });
        }
        let inner: usize = sa[1..].iter().product();
        let v = self.value(a);
        let out = indices
            .iter()
            .flat_map(|&i| v[i * inner..(i + 1) * inner].iter().copied())
            .collect();
        let mut shape = sa;
        shape[0] = indices.len();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, rg, Op::Gather(a, indices.to_vec())))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {sa:?}"
            )));
        }
        let (outer, n, inner) = lanes(&sa, axis);
        let v = self.value(a);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| v[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (v[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[idx(k)] /= z;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(sa, out, rg, Op::Softmax(a, axis)))
    }

    /// Same values forward, zero gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).to_vec();
        self.push(shape, out, false, Op::StopGradient)
    }

    /// Gradients of the scalar `loss` for every parameter in `groups`.
    ///
    /// Parameters outside `groups` are never visited. Parameters inside
    /// `groups` that the loss does not depend on get a zero gradient.
    pub fn backward(&self, loss: Var, groups: GroupSet) -> Result<Gradients> {
        let targets: Vec<bool> = self
            .nodes
            .iter()
            .map(|n| n.param.is_some_and(|(_, g)| groups.contains(g)) && n.requires_grad)
            .collect();
        let adjoints = self.adjoints(loss, &targets)?;
        let mut grads = Gradients::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some((id, g)) = node.param {
                if groups.contains(g) {
                    if !node.requires_grad {
                        return Err(Error::invalid(format!(
                            "parameter {} in group {g} does not require grad",
                            id.index()
                        )));
                    }
                    let grad = adjoints[i]
                        .clone()
                        .unwrap_or_else(|| vec![0.0; node.values.len()]);
                    grads.insert(id, grad);
                }
            }
        }
        Ok(grads)
    }

    /// Gradients of the scalar `loss` with respect to arbitrary recorded values.
    pub fn grad_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Vec<f64>>> {
        let mut targets = vec![false; self.nodes.len()];
        for v in wrt {
            if !self.node(*v).requires_grad {
                return Err(Error::invalid("gradient requested for a value without requires_grad"));
            }
            targets[v.0] = true;
        }
        let adjoints = self.adjoints(loss, &targets)?;
        Ok(wrt
            .iter()
            .map(|v| {
                adjoints[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; self.node(*v).values.len()])
            })
            .collect())
    }

    fn adjoints(&self, loss: Var, targets: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
        let loss_node = self.node(loss);
        if loss_node.values.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: loss_node.shape.clone(),
                rhs: vec![1],
            });
        }
        // A node is worth visiting only if a target lies upstream of it.
        let mut needed = vec![false; loss.0 + 1];
        for i in 0..=loss.0 {
            let node = &self.nodes[i];
            needed[i] = targets[i]
                || (node.requires_grad && self.inputs(&node.op).iter().any(|v| needed[v.0]));
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = adj[i].take() else {
                continue;
            };
            self.propagate(i, &g, &needed, &mut adj);
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::StopGradient => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::AddScalar(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::MeanLast(a)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::Softmax(a, _) => vec![*a],
            Op::Slice { input, .. } => vec![*input],
            Op::Concat(parts, _) => parts.clone(),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], needed: &[bool], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.values;
        let mut send = |v: Var, delta: Vec<f64>| {
            if needed[v.0] {
                accumulate(&mut adj[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if needed[a.0] {
                    let mut ga = vec![0.0; n * k];
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            ga[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, ga);
                }
                if needed[b.0] {
                    let mut gb = vec![0.0; k * m];
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            gb[p * m..(p + 1) * m]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, gv)| *o += x * gv);
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddRow(a, b) => {
                send(*a, g.to_vec());
                let m = self.shape(*b)[0];
                let mut gb = vec![0.0; m];
                for (j, gv) in g.iter().enumerate() {
                    gb[j % m] += gv;
                }
                send(*b, gb);
            }
            Op::AddScalar(a, b) => {
                send(*a, g.to_vec());
                send(*b, vec![g.iter().sum()]);
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needed[a.0] {
                    send(*a, zip_map(g, bv, |x, y| x * y));
                }
                if needed[b.0] {
                    send(*b, zip_map(g, av, |x, y| x * y));
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s)[0];
                if needed[a.0] {
                    send(*a, g.iter().map(|x| x * sv).collect());
                }
                if needed[s.0] {
                    let av = self.value(*a);
                    send(*s, vec![g.iter().zip(av).map(|(x, y)| x * y).sum()]);
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| c * x).collect()),
            Op::Shift(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Relu(a) => {
                let x = self.value(*a);
                send(*a, zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid(a) => send(*a, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Exp(a) => send(*a, zip_map(g, y, |gv, yv| gv * yv)),
            Op::Log(a) => {
                let x = self.value(*a);
                send(*a, zip_map(g, x, |gv, xv| gv / xv));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                send(*a, zip_map(g, x, |gv, xv| 2.0 * xv * gv));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                send(
                    *a,
                    zip_map(g, x, |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 }),
                );
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumLast(a) | Op::MeanLast(a) => {
                let m = *self.shape(*a).last().unwrap();
                let denom = if matches!(node.op, Op::MeanLast(_)) { m as f64 } else { 1.0 };
                let ga = g.iter().flat_map(|gv| std::iter::repeat_n(gv / denom, m)).collect();
                send(*a, ga);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = lanes(&node.shape, *axis);
                let mut offset = 0;
                let row = node.shape[*axis] * inner;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    if needed[p.0] {
                        let mut gp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * row + offset;
                            gp.extend_from_slice(&g[base..base + len]);
                        }
                        send(*p, gp);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let sa = self.shape(*input);
                let (outer, n, inner) = lanes(sa, *axis);
                let len = node.shape[*axis];
                let mut ga = vec![0.0; sa.iter().product()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                send(*input, ga);
            }
            Op::Gather(a, indices) => {
                let sa = self.shape(*a);
                let inner: usize = sa[1..].iter().product();
                let mut ga = vec![0.0; sa.iter().product()];
                for (r, &src) in indices.iter().enumerate() {
                    ga[src * inner..(src + 1) * inner]
                        .iter_mut()
                        .zip(&g[r * inner..(r + 1) * inner])
                        .for_each(|(o, gv)| *o += gv);
                }
                send(*a, ga);
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = lanes(&node.shape, *axis);
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            ga[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                send(*a, ga);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
