//! A small reverse-mode automatic differentiation tape over 2-D `f64` matrices.
//!
//! Every forward computation (one dialogue turn) builds its own [`Graph`].
//! Parameters are borrowed from a [`ParamStore`] rather than copied, so many
//! graphs can be built concurrently against the same read-only parameters.
//! Calling [`Graph::backward`] walks the tape in reverse and returns
//! [`Gradients`] for every node that depends on a parameter or a tracked input.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Backbone weights (the "pretrained" part, even when randomly initialized).
    Pretrained,
    /// Freshly added weights: the fusion scorer and new special-token embeddings.
    Raw,
}

/// Identifier of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors with their optimizer metadata.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    groups: Vec<ParamGroup>,
    decay: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names, which is a programming error.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Array2<f64>,
        group: ParamGroup,
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.groups.push(group);
        self.decay.push(decay);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Per-parameter gradient buffers, aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Array2<f64>>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Accumulates `scale * grad` into the buffer for `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: &Array2<f64>, scale: f64) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.scaled_add(scale, grad),
            slot @ None => *slot = Some(grad * scale),
        }
    }

    /// Adds every gradient of `other` scaled by `scale`.
    pub fn merge(&mut self, other: &ParamGrads, scale: f64) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g, scale);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Key mask and causality shared by all heads of one attention call.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub heads: usize,
    /// Number of independent sequences packed along the row axis.
    pub groups: usize,
    pub query_len: usize,
    pub key_len: usize,
    /// `groups * key_len` flags, `true` where a key may be attended to.
    pub key_mask: Vec<bool>,
    pub causal: bool,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Lincomb(Vec<(Var, f64)>),
    Gelu(Var),
    Dropout(Var, Array2<f64>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    RowMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<Array2<f64>>,
    },
    Softmax {
        x: Var,
        temperature: f64,
    },
    WeightedGroupSum {
        h: Var,
        w: Var,
        group_len: usize,
    },
    GroupMean {
        h: Var,
        group_len: usize,
    },
    SelectGroup {
        h: Var,
        index: usize,
        group_len: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Array2<f64>,
        count: usize,
    },
    Bce {
        p: Var,
        gold: usize,
        eps: f64,
    },
    CategoricalCe {
        p: Var,
        gold: usize,
        eps: f64,
    },
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
    tracked: bool,
}

/// A single forward computation recorded for reverse-mode differentiation.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'p> Graph<'p> {
    /// A graph whose parameter leaves read from `params`.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    /// A graph without parameters (inputs and constants only).
    pub fn detached() -> Graph<'static> {
        Graph {
            params: None,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Array2<f64> {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(x), _) => x,
            (None, Op::Param(id)) => self
                .params
                .expect("parameter node without a store")
                .get(*id),
            _ => unreachable!("node without value"),
        }
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    /// A differentiable input (gradients are reported for it).
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "graph has no parameter store");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMulT(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), t)
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.nrows(), 1, "bias must be a single row");
        let out = self.value(a) + &bias.row(0);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::AddRow(a, b), t)
    }

    /// `Σ cᵢ xᵢ` over same-shaped nodes.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut out = Array2::zeros(self.value(terms[0].0).raw_dim());
        for &(v, c) in terms {
            out.scaled_add(c, self.value(v));
        }
        let t = terms.iter().any(|(v, _)| self.tracked(*v));
        self.push(out, Op::Lincomb(terms.to_vec()), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.lincomb(&[(a, c)])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let t = self.tracked(a);
        self.push(out, Op::Gelu(a), t)
    }

    /// Multiplies by a pre-scaled keep mask (entries `0` or `1/(1-p)`).
    pub fn dropout(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let out = self.value(a) * &mask;
        let t = self.tracked(a);
        self.push(out, Op::Dropout(a, mask), t)
    }

    /// Row-wise layer normalization with affine `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        let t = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            t,
        )
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Array2::zeros((ids.len(), tv.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&tv.row(id));
        }
        let t = self.tracked(table);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            t,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column count mismatch");
        let t = parts.iter().any(|p| self.tracked(*p));
        self.push(out, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row count mismatch");
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::ConcatCols(a, b), t)
    }

    /// Output row `k` is the mean of the rows of `x` listed in `groups[k]`.
    pub fn row_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((groups.len(), xv.ncols()));
        for (k, rows) in groups.iter().enumerate() {
            assert!(!rows.is_empty(), "empty row group");
            let mut acc = out.row_mut(k);
            for &r in rows {
                acc += &xv.row(r);
            }
            acc.mapv_inplace(|v| v / rows.len() as f64);
        }
        let t = self.tracked(x);
        self.push(out, Op::RowMean { x, groups }, t)
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q` has `groups * query_len` rows, `k` and `v` have `groups * key_len`
    /// rows; all three have `d` columns split evenly across heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(d % layout.heads, 0);
        assert_eq!(qv.nrows(), layout.groups * layout.query_len);
        assert_eq!(kv.nrows(), layout.groups * layout.key_len);
        assert_eq!(layout.key_mask.len(), kv.nrows());
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), vv.ncols()));
        let mut probs = Vec::with_capacity(layout.groups * layout.heads);
        for g in 0..layout.groups {
            let qr = g * layout.query_len..(g + 1) * layout.query_len;
            let kr = g * layout.key_len..(g + 1) * layout.key_len;
            let mask = &layout.key_mask[kr.clone()];
            for h in 0..layout.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![qr.clone(), cols.clone()]);
                let kh = kv.slice(s![kr.clone(), cols.clone()]);
                let vh = vv.slice(s![kr.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let mut max = f64::NEG_INFINITY;
                    for (j, x) in row.iter().enumerate() {
                        let allowed = mask[j] && (!layout.causal || j <= i);
                        if allowed && *x > max {
                            max = *x;
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        row.fill(0.0);
                        continue;
                    }
                    let mut z = 0.0;
                    for (j, x) in row.iter_mut().enumerate() {
                        let allowed = mask[j] && (!layout.causal || j <= i);
                        *x = if allowed { (*x - max).exp() } else { 0.0 };
                        z += *x;
                    }
                    row.mapv_inplace(|x| x / z);
                }
                out.slice_mut(s![qr.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let t = self.tracked(q) || self.tracked(k) || self.tracked(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            t,
        )
    }

    /// Softmax over every entry of `x` (used on `m x 1` score columns).
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Var {
        assert!(temperature > 0.0);
        let xv = self.value(x);
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out = xv.mapv(|v| ((v - max) / temperature).exp());
        let z = out.sum();
        out.mapv_inplace(|v| v / z);
        let t = self.tracked(x);
        self.push(out, Op::Softmax { x, temperature }, t)
    }

    /// `Σᵢ wᵢ Hᵢ` where `Hᵢ` is the i-th block of `group_len` rows and `w` is `m x 1`.
    pub fn weighted_group_sum(&mut self, h: Var, w: Var, group_len: usize) -> Var {
        let (hv, wv) = (self.value(h), self.value(w));
        let m = wv.len();
        assert_eq!(hv.nrows(), m * group_len);
        let mut out = Array2::zeros((group_len, hv.ncols()));
        for (i, &wi) in wv.iter().enumerate() {
            out.scaled_add(wi, &hv.slice(s![i * group_len..(i + 1) * group_len, ..]));
        }
        let t = self.tracked(h) || self.tracked(w);
        self.push(out, Op::WeightedGroupSum { h, w, group_len }, t)
    }

    pub fn group_mean(&mut self, h: Var, group_len: usize) -> Var {
        let hv = self.value(h);
        let m = hv.nrows() / group_len;
        assert_eq!(hv.nrows(), m * group_len);
        let mut out = Array2::zeros((group_len, hv.ncols()));
        for i in 0..m {
            out += &hv.slice(s![i * group_len..(i + 1) * group_len, ..]);
        }
        out.mapv_inplace(|v| v / m as f64);
        let t = self.tracked(h);
        self.push(out, Op::GroupMean { h, group_len }, t)
    }

    pub fn select_group(&mut self, h: Var, index: usize, group_len: usize) -> Var {
        let out = self
            .value(h)
            .slice(s![index * group_len..(index + 1) * group_len, ..])
            .to_owned();
        let t = self.tracked(h);
        self.push(
            out,
            Op::SelectGroup {
                h,
                index,
                group_len,
            },
            t,
        )
    }

    /// Mean token-level negative log-likelihood; `None` targets are ignored.
    /// Returns the `1 x 1` loss node and the number of counted tokens.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> (Var, usize) {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let mut probs = lv.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (mut row, target) in probs.rows_mut().into_iter().zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if let Some(t) = *target {
                total += lse - row[t];
                count += 1;
            }
            row.mapv_inplace(|x| (x - lse).exp());
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let t = self.tracked(logits);
        let var = self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            t,
        );
        (var, count)
    }

    /// Mean per-option binary cross-entropy of a distribution against a one-hot gold.
    pub fn bce_onehot(&mut self, p: Var, gold: usize, eps: f64) -> Var {
        let pv = self.value(p);
        let m = pv.len() as f64;
        let loss = pv
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let x = x.clamp(eps, 1.0 - eps);
                if i == gold {
                    -x.ln()
                } else {
                    -(1.0 - x).ln()
                }
            })
            .sum::<f64>()
            / m;
        let t = self.tracked(p);
        self.push(Array2::from_elem((1, 1), loss), Op::Bce { p, gold, eps }, t)
    }

    /// `-ln p[gold]` with the same clamp.
    pub fn categorical_ce(&mut self, p: Var, gold: usize, eps: f64) -> Var {
        let x = self.value(p).iter().nth(gold).copied().expect("gold out of range");
        let loss = -x.clamp(eps, 1.0 - eps).ln();
        let t = self.tracked(p);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CategoricalCe { p, gold, eps },
            t,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Array2::ones(self.value(root).raw_dim()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let send = |v: Var, g: Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.tracked(*a) {
                        send(*a, gout.dot(&bv.t()), &mut grads);
                    }
                    if self.tracked(*b) {
                        send(*b, av.t().dot(&gout), &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.tracked(*a) {
                        send(*a, gout.dot(bv), &mut grads);
                    }
                    if self.tracked(*b) {
                        send(*b, gout.t().dot(av), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*b, gout.clone(), &mut grads);
                    send(*a, gout, &mut grads);
                }
                Op::AddRow(a, b) => {
                    send(*b, gout.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    send(*a, gout, &mut grads);
                }
                Op::Lincomb(terms) => {
                    for &(v, c) in terms {
                        send(v, &gout * c, &mut grads);
                    }
                }
                Op::Gelu(a) => {
                    let mut g = gout;
                    Zip::from(&mut g)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g *= gelu_grad(x));
                    send(*a, g, &mut grads);
                }
                Op::Dropout(a, mask) => send(*a, gout * mask, &mut grads),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.tracked(*beta) {
                        send(*beta, gout.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    if self.tracked(*gamma) {
                        let gg = (&gout * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        send(*gamma, gg, &mut grads);
                    }
                    if self.tracked(*x) {
                        let gamma_row = self.value(*gamma).row(0).to_owned();
                        let n = xhat.ncols() as f64;
                        let mut dx = &gout * &gamma_row;
                        for ((mut row, xh), &is) in
                            dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                        {
                            let sum_d = row.sum();
                            let sum_dx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                            Zip::from(&mut row).and(&xh).for_each(|d, &h| {
                                *d = is * (*d - sum_d / n - h * sum_dx / n);
                            });
                        }
                        send(*x, dx, &mut grads);
                    }
                }
                Op::Embedding { table, ids } => {
                    let mut g = Array2::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = g.row_mut(id);
                        dst += &gout.row(r);
                    }
                    send(*table, g, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        if self.tracked(p) {
                            send(p, gout.slice(s![start..start + n, ..]).to_owned(), &mut grads);
                        }
                        start += n;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let na = self.value(*a).ncols();
                    send(*a, gout.slice(s![.., ..na]).to_owned(), &mut grads);
                    send(*b, gout.slice(s![.., na..]).to_owned(), &mut grads);
                }
                Op::RowMean { x, groups } => {
                    let mut g = Array2::zeros(self.value(*x).raw_dim());
                    for (k, rows) in groups.iter().enumerate() {
                        let share = &gout.row(k) / rows.len() as f64;
                        for &r in rows {
                            let mut dst = g.row_mut(r);
                            dst += &share;
                        }
                    }
                    send(*x, g, &mut grads);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / layout.heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.raw_dim());
                    let mut dk = Array2::zeros(kv.raw_dim());
                    let mut dv = Array2::zeros(vv.raw_dim());
                    for g in 0..layout.groups {
                        let qr = g * layout.query_len..(g + 1) * layout.query_len;
                        let kr = g * layout.key_len..(g + 1) * layout.key_len;
                        for h in 0..layout.heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[g * layout.heads + h];
                            let go = gout.slice(s![qr.clone(), cols.clone()]);
                            let qh = qv.slice(s![qr.clone(), cols.clone()]);
                            let kh = kv.slice(s![kr.clone(), cols.clone()]);
                            let vh = vv.slice(s![kr.clone(), cols.clone()]);
                            dv.slice_mut(s![kr.clone(), cols.clone()])
                                .assign(&p.t().dot(&go));
                            let dp = go.dot(&vh.t());
                            let mut ds = &dp * p;
                            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let dot = row.sum();
                                Zip::from(&mut row).and(&prow).for_each(|x, &pp| {
                                    *x -= pp * dot;
                                });
                            }
                            dq.slice_mut(s![qr.clone(), cols.clone()])
                                .assign(&(ds.dot(&kh) * scale));
                            dk.slice_mut(s![kr.clone(), cols])
                                .assign(&(ds.t().dot(&qh) * scale));
                        }
                    }
                    send(*q, dq, &mut grads);
                    send(*k, dk, &mut grads);
                    send(*v, dv, &mut grads);
                }
                Op::Softmax { x, temperature } => {
                    let p = node.value.as_ref().expect("softmax value");
                    let dot = (&gout * p).sum();
                    let g = p * &(gout.mapv(|x| x - dot)) / *temperature;
                    send(*x, g, &mut grads);
                }
                Op::WeightedGroupSum { h, w, group_len } => {
                    let (hv, wv) = (self.value(*h), self.value(*w));
                    if self.tracked(*w) {
                        let mut gw = Array2::zeros(wv.raw_dim());
                        for (i, gwi) in gw.iter_mut().enumerate() {
                            let block = hv.slice(s![i * group_len..(i + 1) * group_len, ..]);
                            *gwi = (&block * &gout).sum();
                        }
                        send(*w, gw, &mut grads);
                    }
                    if self.tracked(*h) {
                        let mut gh = Array2::zeros(hv.raw_dim());
                        for (i, &wi) in wv.iter().enumerate() {
                            gh.slice_mut(s![i * group_len..(i + 1) * group_len, ..])
                                .assign(&(&gout * wi));
                        }
                        send(*h, gh, &mut grads);
                    }
                }
                Op::GroupMean { h, group_len } => {
                    let hv = self.value(*h);
                    let m = hv.nrows() / group_len;
                    let share = &gout / m as f64;
                    let mut gh = Array2::zeros(hv.raw_dim());
                    for i in 0..m {
                        gh.slice_mut(s![i * group_len..(i + 1) * group_len, ..])
                            .assign(&share);
                    }
                    send(*h, gh, &mut grads);
                }
                Op::SelectGroup {
                    h,
                    index,
                    group_len,
                } => {
                    let mut gh = Array2::zeros(self.value(*h).raw_dim());
                    gh.slice_mut(s![index * group_len..(index + 1) * group_len, ..])
                        .assign(&gout);
                    send(*h, gh, &mut grads);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let upstream = gout[[0, 0]];
                    let mut g = probs.clone();
                    for (mut row, target) in g.rows_mut().into_iter().zip(targets) {
                        match target {
                            Some(t) => row[*t] -= 1.0,
                            None => row.fill(0.0),
                        }
                    }
                    let c = if *count > 0 { upstream / *count as f64 } else { 0.0 };
                    g.mapv_inplace(|x| x * c);
                    send(*logits, g, &mut grads);
                }
                Op::Bce { p, gold, eps } => {
                    let pv = self.value(*p);
                    let m = pv.len() as f64;
                    let upstream = gout[[0, 0]];
                    let mut g = Array2::zeros(pv.raw_dim());
                    for (i, (gi, &x)) in g.iter_mut().zip(pv.iter()).enumerate() {
                        // the clamp is flat outside [eps, 1-eps]
                        if x <= *eps || x >= 1.0 - *eps {
                            continue;
                        }
                        let d = if i == *gold { -1.0 / x } else { 1.0 / (1.0 - x) };
                        *gi = d * upstream / m;
                    }
                    send(*p, g, &mut grads);
                }
                Op::CategoricalCe { p, gold, eps } => {
                    let pv = self.value(*p);
                    let mut g = Array2::zeros(pv.raw_dim());
                    let x = pv.iter().nth(*gold).copied().unwrap_or(0.0);
                    if x > *eps && x < 1.0 - *eps {
                        if let Some(gi) = g.iter_mut().nth(*gold) {
                            *gi = -gout[[0, 0]] / x;
                        }
                    }
                    send(*p, g, &mut grads);
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to a tracked leaf. `None` when no path exists.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Collects parameter gradients of `graph` into store-aligned buffers.
    pub fn param_grads(&self, graph: &Graph<'_>, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                out.accumulate(*id, g, 1.0);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(root)/d(input) for a graph builder.
    fn check<F>(inputs: Vec<Array2<f64>>, build: F)
    where
        F: Fn(&mut Graph<'static>, &[Var]) -> Var,
    {
        let mut g = Graph::detached();
        let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);
        let h = 1e-6;
        for (which, x) in inputs.iter().enumerate() {
            let analytic = grads
                .wrt(vars[which])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(x.raw_dim()));
            for idx in 0..x.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::detached();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, y)| {
                            let mut y = y.clone();
                            if j == which {
                                *y.iter_mut().nth(idx).unwrap() += delta;
                            }
                            g.input(y)
                        })
                        .collect();
                    let r = build(&mut g, &vars);
                    g.scalar(r)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = *analytic.iter().nth(idx).unwrap();
                let err = (a - numeric).abs() / (1e-8 + a.abs().max(numeric.abs()));
                assert!(
                    err < 1e-5 || (a - numeric).abs() < 1e-9,
                    "input {which} entry {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn sum_weighted(g: &mut Graph<'static>, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = g.value(x).dim();
        let w = g.constant(random(&mut rng, c, 1));
        let y = g.matmul(x, w);
        let ones = g.constant(Array2::ones((1, r)));
        g.matmul(ones, y)
    }

    #[test]
    fn matmul_and_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![random(&mut rng, 3, 4), random(&mut rng, 4, 5), random(&mut rng, 1, 5), random(&mut rng, 1, 5)],
            |g, v| {
                let y = g.matmul(v[0], v[1]);
                let z = g.layer_norm(y, v[2], v[3]);
                let z = g.gelu(z);
                sum_weighted(g, z, 9)
            },
        );
    }

    #[test]
    fn attention_gradients_with_mask_and_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for causal in [false, true] {
            let layout = AttentionLayout {
                heads: 2,
                groups: 2,
                query_len: 3,
                key_len: 3,
                key_mask: vec![true, true, false, true, false, true],
                causal,
            };
            check(
                vec![random(&mut rng, 6, 4), random(&mut rng, 6, 4), random(&mut rng, 6, 4)],
                move |g, v| {
                    let o = g.attention(v[0], v[1], v[2], layout.clone());
                    sum_weighted(g, o, 3)
                },
            );
        }
    }

    #[test]
    fn cross_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layout = AttentionLayout {
            heads: 2,
            groups: 1,
            query_len: 2,
            key_len: 5,
            key_mask: vec![true, false, true, true, true],
            causal: false,
        };
        check(
            vec![random(&mut rng, 2, 4), random(&mut rng, 5, 4), random(&mut rng, 5, 4)],
            move |g, v| {
                let o = g.attention(v[0], v[1], v[2], layout.clone());
                sum_weighted(g, o, 3)
            },
        );
    }

    #[test]
    fn fusion_primitives_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            vec![random(&mut rng, 6, 3), random(&mut rng, 3, 1)],
            |g, v| {
                let p = g.softmax(v[1], 0.7);
                let a = g.weighted_group_sum(v[0], p, 2);
                let b = g.group_mean(v[0], 2);
                let c = g.select_group(v[0], 1, 2);
                let f = g.row_mean(v[0], vec![vec![0], vec![1, 3, 5]]);
                let s1 = sum_weighted(g, a, 4);
                let s2 = sum_weighted(g, b, 5);
                let s3 = sum_weighted(g, c, 6);
                let s4 = sum_weighted(g, f, 7);
                let bce = g.bce_onehot(p, 2, 1e-7);
                let ce = g.categorical_ce(p, 0, 1e-7);
                g.lincomb(&[(s1, 1.0), (s2, 0.5), (s3, -0.3), (s4, 0.2), (bce, 1.3), (ce, 0.4)])
            },
        );
    }

    #[test]
    fn cross_entropy_and_embedding_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(
            vec![random(&mut rng, 5, 3), random(&mut rng, 1, 3)],
            |g, v| {
                let e = g.embedding(v[0], &[4, 0, 4, 2]);
                let e = g.add_row(e, v[1]);
                let both = g.concat_rows(&[e, v[0]]);
                let cat = g.concat_cols(both, both);
                let logits = g.matmul_t(e, v[0]);
                let (ce, n) = g.cross_entropy(logits, &[Some(1), None, Some(3), Some(0)]);
                assert_eq!(n, 3);
                let s = sum_weighted(g, cat, 8);
                g.lincomb(&[(ce, 1.0), (s, 0.1)])
            },
        );
    }

    #[test]
    fn untracked_constants_get_no_gradient() {
        let mut g = Graph::detached();
        let a = g.constant(Array2::ones((2, 2)));
        let b = g.input(Array2::ones((2, 1)));
        let c = g.matmul(a, b);
        let ones = g.constant(Array2::ones((1, 2)));
        let r = g.matmul(ones, c);
        let grads = g.backward(r);
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b).unwrap(), &Array2::from_elem((2, 1), 2.0));
    }
}
