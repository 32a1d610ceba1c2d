use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gemm::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean attention mask; `true` marks an allowed entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, allowed: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != allowed.len() {
            return Err(Error::shape("mask", &shape, &[allowed.len()]));
        }
        Ok(Self { shape, allowed })
    }

    pub fn from_fn(shape: Vec<usize>, f: impl Fn(&[usize]) -> bool) -> Self {
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut allowed = Vec::with_capacity(n);
        for _ in 0..n {
            allowed.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self { shape, allowed }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }
}

/// Per-call statistics of [`Tape::cross_entropy`]: unsmoothed NLL and
/// number of non-pad targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeStats {
    pub nll_sum: f64,
    pub tokens: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Relu { a: Var },
    Softmax { a: Var },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { a: Var, keep: Vec<f64> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Sum { a: Var },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        smoothing: f64,
        probs: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass. Tapes are single-use and never shared.
pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape in evaluation mode (dropout disabled).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            dropout_rng: None,
        }
    }

    /// A tape that keeps no backward information; for inference.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
            dropout_rng: None,
        }
    }

    /// A recording tape in training mode; dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), Arc::clone(&n.value))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.push_unchecked(shape, Arc::new(value), op, needs_grad)
    }

    fn push_unchecked(&mut self, shape: Vec<usize>, value: Arc<Vec<f64>>, op: Op, needs_grad: bool) -> Result<Var> {
        let needs_grad = needs_grad && self.record;
        let op = if needs_grad || matches!(op, Op::Param(_)) { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant or free leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let ng = t.requires_grad();
        self.push_unchecked(t.shape().to_vec(), t.shared_values(), Op::Leaf, ng)
            .expect("leaf")
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    /// Records a parameter leaf; its gradient flows back into `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = &store.get(id).tensor;
        self.push_unchecked(t.shape().to_vec(), t.shared_values(), Op::Param(id), true)
            .expect("param")
    }

    /// Batched matrix product `[..., m, k] × [..., k, n]` with numpy-style
    /// broadcasting over leading axes. With `trans_b` the right operand is
    /// stored as `[..., n, k]`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let plan = MatmulPlan::new(&sa, &sb, trans_b)?;
        let mut out = vec![0.0; plan.out_len()];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for (oi, ai, bi) in plan.batches() {
                let (m, k, n) = (plan.m, plan.k, plan.n);
                gemm(
                    m,
                    k,
                    n,
                    &av[ai * m * k..(ai + 1) * m * k],
                    false,
                    &bv[bi * k * n..(bi + 1) * k * n],
                    trans_b,
                    0.0,
                    &mut out[oi * m * n..(oi + 1) * m * n],
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(plan.out_shape.clone(), out, Op::MatMul { a, b, trans_b }, ng, "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// `a + b` where `b` equals `a`'s shape or a trailing suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let shape = sa.to_vec();
        let bv = self.value(b);
        let bn = bv.len();
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % bn])
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(shape, out, Op::Add { a, b }, ng, "add")
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, ng, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, c }, ng, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu { a }, ng, "relu")
    }

    /// Softmax over the last axis. Masked entries come out as exactly zero;
    /// a row with no allowed entry is an error.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if let Some(m) = mask {
            if m.shape() != shape.as_slice() {
                return Err(Error::shape("softmax mask", m.shape(), &shape));
            }
        }
        let d = *shape.last().unwrap_or(&1);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for (r, (xr, yr)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let allowed = mask.map(|m| &m.allowed()[r * d..(r + 1) * d]);
            let ok = |j: usize| allowed.is_none_or(|al| al[j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in xr.iter().enumerate() {
                if ok(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::FullyMasked("softmax"));
            }
            let mut z = 0.0;
            for (j, (&v, y)) in xr.iter().zip(yr.iter_mut()).enumerate() {
                if ok(j) {
                    *y = (v - mx).exp();
                    z += *y;
                }
            }
            yr.iter_mut().for_each(|y| *y /= z);
        }
        let ng = self.ng(a);
        self.push(shape, out, Op::Softmax { a }, ng, "softmax")
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm affine", self.shape(gain), &[d]));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let xr = &xv[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: if ng { xhat } else { Vec::new() },
            rstd: if ng { rstd } else { Vec::new() },
        };
        self.push(shape, out, op, ng, "layer_norm")
    }

    /// Gathers rows of a `[V, d]` table; output shape is `id_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(Error::shape("embedding table", ts, &[0, 0]));
        }
        let (v, d) = (ts[0], ts[1]);
        if id_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding ids", id_shape, &[ids.len()]));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding id",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        let ng = self.ng(table);
        let op = Op::Embedding {
            table,
            ids: if ng { ids.to_vec() } else { Vec::new() },
        };
        self.push(shape, out, op, ng, "embedding")
    }

    /// Inverted dropout; identity unless the tape is in training mode.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(a);
        };
        if p == 0.0 {
            return Ok(a);
        }
        let n = self.nodes[a.0].value.len();
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self.value(a).iter().zip(&keep).map(|(x, k)| x * k).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Dropout { a, keep }, ng, "dropout")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[a.0].value.len() {
            return Err(Error::shape("reshape", self.shape(a), &shape));
        }
        let value = Arc::clone(&self.nodes[a.0].value);
        let ng = self.ng(a);
        self.push_unchecked(shape, value, Op::Reshape { a }, ng)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &sa, perm));
        }
        let out = permute_values(self.value(a), &sa, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let ng = self.ng(a);
        self.push_unchecked(
            shape,
            Arc::new(out),
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![], vec![s], Op::Sum { a }, ng, "sum")
    }

    /// Summed token cross entropy over non-pad positions of `logits [N, V]`,
    /// optionally label-smoothed. Returns the (smoothed) loss node plus the
    /// unsmoothed NLL and token count.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize, smoothing: f64) -> Result<(Var, CeStats)> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().unwrap_or(&1);
        let rows = self.nodes[logits.0].value.len() / v;
        if rows != targets.len() {
            return Err(Error::shape("cross_entropy targets", &shape, &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        let mut nll_sum = 0.0;
        let mut tokens = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: v,
                });
            }
            if t == pad {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            let nll = lse - row[t];
            let mean_nll = lse - row.iter().sum::<f64>() / v as f64;
            loss += (1.0 - smoothing) * nll + smoothing * mean_nll;
            nll_sum += nll;
            tokens += 1;
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        if tokens == 0 {
            return Err(Error::Invalid("cross_entropy: every target position is padding".into()));
        }
        let ng = self.ng(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            pad,
            smoothing,
            probs,
        };
        let var = self.push(vec![], vec![loss], op, ng, "cross_entropy")?;
        Ok((var, CeStats { nll_sum, tokens }))
    }

    /// Reverse pass from a scalar node. Parameter gradients are accumulated
    /// into `store`; all node gradients are returned for inspection.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Grads> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
            if let Op::Param(id) = node.op {
                store.get_mut(id).tensor.accumulate_grad(&g);
            }
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let plan = MatmulPlan::new(&nodes[a.0].shape, &nodes[b.0].shape, *trans_b)?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if nodes[a.0].needs_grad {
                    let ga = slot(grads, *a, av.len());
                    for (oi, ai, bi) in plan.batches() {
                        let gc = &g[oi * m * n..(oi + 1) * m * n];
                        let bs = &bv[bi * k * n..(bi + 1) * k * n];
                        let gas = &mut ga[ai * m * k..(ai + 1) * m * k];
                        // dA = dC · op(B)^T
                        gemm(m, n, k, gc, false, bs, !*trans_b, 1.0, gas);
                    }
                }
                if nodes[b.0].needs_grad {
                    let gb = slot(grads, *b, bv.len());
                    for (oi, ai, bi) in plan.batches() {
                        let gc = &g[oi * m * n..(oi + 1) * m * n];
                        let as_ = &av[ai * m * k..(ai + 1) * m * k];
                        let gbs = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // B stored [n,k]: dB = dC^T · A
                            gemm(n, m, k, gc, true, as_, false, 1.0, gbs);
                        } else {
                            gemm(k, m, n, as_, true, gc, false, 1.0, gbs);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if nodes[a.0].needs_grad {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if nodes[b.0].needs_grad {
                    let bn = nodes[b.0].value.len();
                    let gb = slot(grads, *b, bn);
                    for (i, x) in g.iter().enumerate() {
                        gb[i % bn] += x;
                    }
                }
            }
            Op::Mul { a, b } => {
                if nodes[a.0].needs_grad {
                    let bv = &nodes[b.0].value;
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if nodes[b.0].needs_grad {
                    let av = &nodes[a.0].value;
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                let ga = slot(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += c * y;
                }
            }
            Op::Relu { a } => {
                let av = &nodes[a.0].value;
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Softmax { a } => {
                let y = &node.value;
                let d = *node.shape.last().unwrap_or(&1);
                let ga = slot(grads, *a, g.len());
                for ((yr, gr), gar) in y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        gar[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap_or(&1);
                let gv = &nodes[gain.0].value;
                if nodes[gain.0].needs_grad {
                    let gg = slot(grads, *gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if nodes[bias.0].needs_grad {
                    let gb = slot(grads, *bias, d);
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if nodes[x.0].needs_grad {
                    let gx = slot(grads, *x, g.len());
                    let mut dh = vec![0.0; d];
                    for (r, ((gr, hr), gxr)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            gxr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].shape[1];
                let n = nodes[table.0].value.len();
                let gt = slot(grads, *table, n);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::Dropout { a, keep } => {
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * keep[i];
                }
            }
            Op::Reshape { a } => add_into(slot(grads, *a, g.len()), g),
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_values(g, &node.shape, &inv);
                add_into(slot(grads, *a, g.len()), &back);
            }
            Op::Sum { a } => {
                let n = nodes[a.0].value.len();
                slot(grads, *a, n).iter_mut().for_each(|x| *x += g[0]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                smoothing,
                probs,
            } => {
                let v = *nodes[logits.0].shape.last().unwrap_or(&1);
                let gl = slot(grads, *logits, probs.len());
                let uni = smoothing / v as f64;
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    let row = &mut gl[r * v..(r + 1) * v];
                    for j in 0..v {
                        let q = if j == t { 1.0 - smoothing + uni } else { uni };
                        row[j] += g[0] * (probs[r * v + j] - q);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradients of every node from one [`Tape::backward`] call.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn permute_values(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..x.len() {
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (out batch, lhs batch, rhs batch) triples.
    triples: Vec<(usize, usize, usize)>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut bo = Vec::with_capacity(rank);
        for i in 0..rank {
            let (x, y) = (pa[i], pb[i]);
            if x != y && x != 1 && y != 1 {
                return Err(Error::shape("matmul batch", sa, sb));
            }
            bo.push(x.max(y));
        }
        let total: usize = bo.iter().product();
        let strides = |p: &[usize]| -> Vec<usize> {
            let mut s = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                s[i] = if p[i] == 1 { 0 } else { acc };
                acc *= p[i];
            }
            s
        };
        let (sta, stb) = (strides(&pa), strides(&pb));
        let mut triples = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for o in 0..total {
            let ai: usize = idx.iter().zip(&sta).map(|(i, s)| i * s).sum();
            let bi: usize = idx.iter().zip(&stb).map(|(i, s)| i * s).sum();
            triples.push((o, ai, bi));
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < bo[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let mut out_shape = bo;
        out_shape.push(m);
        out_shape.push(n);
        // Fold a broadcast 2-D rhs into a single tall product.
        let (m, triples) = if bb.is_empty() && !ba.is_empty() {
            (m * total, vec![(0, 0, 0)])
        } else {
            (m, triples)
        };
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            triples,
        })
    }

    fn out_len(&self) -> usize {
        self.triples.len() * self.m * self.n
    }

    fn batches(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.triples.iter().copied()
    }
}
