//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients. Rows are the unit
//! of independence: apart from the explicitly mixing operations
//! (segment mean, attention), row `i` of an output only reads row `i` of its
//! inputs.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::geometry::bernstein;

pub type Var = usize;

const GELU_C: f64 = 0.797_884_560_802_865_4;
const LN_EPS: f64 = 1e-5;
/// Sigmoid inputs are clamped to this magnitude so probabilities stay inside (0, 1).
pub const SIGMOID_CLAMP: f64 = 30.0;

/// Which keys each query row may attend to.
#[derive(Debug, Clone)]
pub enum KeyPattern {
    Dense,
    /// Explicit visible key indices per query row, ascending.
    Sparse(Vec<Vec<usize>>),
}

impl KeyPattern {
    /// Query rows attend within consecutive blocks of `block` rows.
    pub fn blocks(rows: usize, block: usize) -> Self {
        KeyPattern::Sparse(
            (0..rows)
                .map(|i| {
                    let start = i / block * block;
                    (start..start + block).collect()
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub heads: usize,
    pub pattern: KeyPattern,
    /// Optional additive score bias, `queries x (heads * keys)` with the
    /// heads side by side.
    pub bias: Option<Var>,
    pub prior: Option<SpatialPrior>,
}

/// Gaussian log-prior on query-to-key distance: head `h` adds
/// `coefs[h] * |refs_i - sites_j|^2` to the score of query `i` for key `j`.
#[derive(Debug, Clone)]
pub struct SpatialPrior {
    /// `queries x 2`.
    pub refs: Var,
    /// `keys x 2`, fixed.
    pub sites: Array2<f64>,
    pub coefs: Vec<f64>,
}

fn sq_dist(r: &ArrayView2<f64>, i: usize, sites: &Array2<f64>, j: usize) -> f64 {
    let (dx, dy) = (r[[i, 0]] - sites[[j, 0]], r[[i, 1]] - sites[[j, 1]]);
    dx * dx + dy * dy
}

#[derive(Debug)]
enum Probs {
    Dense(Vec<Array2<f64>>),
    /// `[head][row][visible index]`.
    Sparse(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug)]
struct AttnSaved {
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    prior: Option<SpatialPrior>,
    heads: usize,
    pattern: KeyPattern,
    probs: Probs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    /// Saved inverse standard deviation per row.
    LayerNorm(Var, Vec<f64>),
    SegmentMean(Var, usize),
    Repeat(Var, usize),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sinusoid(Var, Vec<f64>),
    Bezier(Var, usize),
    Attention(Box<AttnSaved>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.0[v].take()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP)).exp())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v].value
    }

    fn val(&self, v: Var) -> ArrayView2<'_, f64> {
        self.nodes[v].value.view()
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.val(a).dot(&self.val(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.val(a) + &self.val(b);
        self.push(out, Op::Add(a, b))
    }

    /// Broadcasts the `1 x d` row `r` over every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let out = &self.val(a) + &self.val(r);
        self.push(out, Op::AddRow(a, r))
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let out = &self.val(a) * &self.val(r);
        self.push(out, Op::MulRow(a, r))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.val(a) * &self.val(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.val(a).mapv(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.val(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.val(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise normalization to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let d = x.ncols() as f64;
        let mut out = x.to_owned();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv.push(is);
        }
        self.push(out, Op::LayerNorm(a, inv))
    }

    /// Mean over consecutive groups of `seg` rows.
    pub fn segment_mean(&mut self, a: Var, seg: usize) -> Var {
        let x = self.val(a);
        let n = x.nrows() / seg;
        let mut out = Array2::zeros((n, x.ncols()));
        for i in 0..n {
            let block = x.slice(s![i * seg..(i + 1) * seg, ..]);
            out.row_mut(i).assign(&block.mean_axis(Axis(0)).expect("non-empty segment"));
        }
        self.push(out, Op::SegmentMean(a, seg))
    }

    /// Repeats each row `seg` times consecutively.
    pub fn repeat(&mut self, a: Var, seg: usize) -> Var {
        let x = self.val(a);
        let mut out = Array2::zeros((x.nrows() * seg, x.ncols()));
        for (i, row) in x.rows().into_iter().enumerate() {
            for k in 0..seg {
                out.row_mut(i * seg + k).assign(&row);
            }
        }
        self.push(out, Op::Repeat(a, seg))
    }

    /// Row lookup into `table`.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.val(table);
        let mut out = Array2::zeros((idx.len(), t.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&t.row(i));
        }
        self.push(out, Op::Gather(table, idx))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.val(p)).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        self.push(out, Op::ConcatRows(parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.val(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.val(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    /// `n x 2` coordinates to `n x 4F`: the x block `[sin w0 x, cos w0 x, ...]`
    /// followed by the matching y block.
    pub fn sinusoid(&mut self, a: Var, freqs: Vec<f64>) -> Var {
        let x = self.val(a);
        let f = freqs.len();
        let mut out = Array2::zeros((x.nrows(), 4 * f));
        for (i, row) in x.rows().into_iter().enumerate() {
            for axis in 0..2 {
                for (k, w) in freqs.iter().enumerate() {
                    let (sn, cs) = (w * row[axis]).sin_cos();
                    out[[i, axis * 2 * f + 2 * k]] = sn;
                    out[[i, axis * 2 * f + 2 * k + 1]] = cs;
                }
            }
        }
        self.push(out, Op::Sinusoid(a, freqs))
    }

    /// `k x 8` control points `[x0, y0, .., x3, y3]` to `k*T x 2` points sampled
    /// uniformly in the curve parameter.
    pub fn bezier(&mut self, a: Var, t: usize) -> Var {
        let x = self.val(a);
        let mut out = Array2::zeros((x.nrows() * t, 2));
        for (i, row) in x.rows().into_iter().enumerate() {
            for k in 0..t {
                let b = bernstein(k as f64 / (t - 1) as f64);
                for (c, bc) in b.iter().enumerate() {
                    out[[i * t + k, 0]] += bc * row[2 * c];
                    out[[i * t + k, 1]] += bc * row[2 * c + 1];
                }
            }
        }
        self.push(out, Op::Bezier(a, t))
    }

    /// Multi-head scaled dot-product attention on already projected inputs.
    /// Values may be narrower or wider than queries; each head reads its own
    /// `v.ncols() / heads` value columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let bias = spec.bias.map(|b| self.val(b));
        let refs = spec.prior.as_ref().map(|p| self.val(p.refs));
        let lk = kv.nrows();
        let (lq, d) = qv.dim();
        let dh = d / spec.heads;
        let dv = vv.ncols() / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((lq, vv.ncols()));
        let probs = match &spec.pattern {
            KeyPattern::Dense => {
                let d2 = match (&spec.prior, &refs) {
                    (Some(p), Some(r)) => Some(Array2::from_shape_fn((lq, lk), |(i, j)| sq_dist(r, i, &p.sites, j))),
                    _ => None,
                };
                let mut all = Vec::with_capacity(spec.heads);
                for h in 0..spec.heads {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let mut p = qv.slice(cols).dot(&kv.slice(cols).t());
                    p *= scale;
                    if let Some(bias) = &bias {
                        p += &bias.slice(s![.., h * lk..(h + 1) * lk]);
                    }
                    if let (Some(d2), Some(prior)) = (&d2, &spec.prior) {
                        p.scaled_add(prior.coefs[h], d2);
                    }
                    for mut row in p.rows_mut() {
                        softmax_in_place(row.as_slice_mut().expect("standard layout"));
                    }
                    let vcols = s![.., h * dv..(h + 1) * dv];
                    out.slice_mut(vcols).assign(&p.dot(&vv.slice(vcols)));
                    all.push(p);
                }
                Probs::Dense(all)
            }
            KeyPattern::Sparse(vis) => {
                let mut all = vec![Vec::with_capacity(lq); spec.heads];
                for (i, keys) in vis.iter().enumerate() {
                    let qrow = qv.row(i);
                    let qrow = qrow.as_slice().expect("standard layout");
                    for (h, head_probs) in all.iter_mut().enumerate() {
                        let r = h * dh..(h + 1) * dh;
                        let mut p: Vec<f64> = keys
                            .iter()
                            .map(|&j| {
                                let kr = kv.row(j);
                                let mut sc = dot(&qrow[r.clone()], &kr.as_slice().expect("standard layout")[r.clone()]) * scale;
                                if let Some(bias) = &bias {
                                    sc += bias[[i, h * lk + j]];
                                }
                                if let (Some(prior), Some(r)) = (&spec.prior, &refs) {
                                    sc += prior.coefs[h] * sq_dist(r, i, &prior.sites, j);
                                }
                                sc
                            })
                            .collect();
                        softmax_in_place(&mut p);
                        for c in h * dv..(h + 1) * dv {
                            let mut acc = 0.0;
                            for (pj, &j) in p.iter().zip(keys) {
                                acc += pj * vv[[j, c]];
                            }
                            out[[i, c]] = acc;
                        }
                        head_probs.push(p);
                    }
                }
                Probs::Sparse(all)
            }
        };
        let saved = AttnSaved {
            q,
            k,
            v,
            bias: spec.bias,
            prior: spec.prior,
            heads: spec.heads,
            pattern: spec.pattern,
            probs,
        };
        self.push(out, Op::Attention(Box::new(saved)))
    }

    /// Propagates `seeds` (output gradients) back through the tape.
    pub fn backward(&self, seeds: Vec<(Var, Array2<f64>)>) -> Gradients {
        let mut g: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, grad) in seeds {
            acc(&mut g, v, grad);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = g[idx].take() else { continue };
            self.backward_node(idx, &dy, &mut g);
            g[idx] = Some(dy);
        }
        Gradients(g)
    }

    fn backward_node(&self, idx: usize, dy: &Array2<f64>, g: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(g, *a, dy.dot(&self.val(*b).t()));
                acc(g, *b, self.val(*a).t().dot(dy));
            }
            Op::Add(a, b) => {
                acc(g, *a, dy.clone());
                acc(g, *b, dy.clone());
            }
            Op::AddRow(a, r) => {
                acc(g, *a, dy.clone());
                acc(g, *r, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, r) => {
                acc(g, *a, dy * &self.val(*r));
                acc(g, *r, (dy * &self.val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                acc(g, *a, dy * &self.val(*b));
                acc(g, *b, dy * &self.val(*a));
            }
            Op::Scale(a, k) => acc(g, *a, dy * *k),
            Op::Gelu(a) => {
                let mut d = self.val(*a).mapv(gelu_grad);
                d *= dy;
                acc(g, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = self.val(*a).to_owned();
                ndarray::Zip::from(&mut d).and(&node.value).for_each(|x, &y| {
                    *x = if x.abs() < SIGMOID_CLAMP { y * (1.0 - y) } else { 0.0 };
                });
                d *= dy;
                acc(g, *a, d);
            }
            Op::LayerNorm(a, inv) => {
                let y = &node.value;
                let d = y.ncols() as f64;
                let mut dx = Array2::zeros(y.dim());
                for i in 0..y.nrows() {
                    let (yr, dr) = (y.row(i), dy.row(i));
                    let mean_d = dr.sum() / d;
                    let mean_dy = dr.dot(&yr) / d;
                    for c in 0..y.ncols() {
                        dx[[i, c]] = inv[i] * (dr[c] - mean_d - yr[c] * mean_dy);
                    }
                }
                acc(g, *a, dx);
            }
            Op::SegmentMean(a, seg) => {
                let mut dx = Array2::zeros((dy.nrows() * seg, dy.ncols()));
                let k = 1.0 / *seg as f64;
                for (i, row) in dy.rows().into_iter().enumerate() {
                    for s in 0..*seg {
                        dx.row_mut(i * seg + s).scaled_add(k, &row);
                    }
                }
                acc(g, *a, dx);
            }
            Op::Repeat(a, seg) => {
                let n = dy.nrows() / seg;
                let mut dx = Array2::zeros((n, dy.ncols()));
                for i in 0..n {
                    dx.row_mut(i).assign(&dy.slice(s![i * seg..(i + 1) * seg, ..]).sum_axis(Axis(0)));
                }
                acc(g, *a, dx);
            }
            Op::Gather(table, idx) => {
                let mut dx = Array2::zeros(self.val(*table).dim());
                for (r, &i) in idx.iter().enumerate() {
                    dx.row_mut(i).scaled_add(1.0, &dy.row(r));
                }
                acc(g, *table, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.val(p).nrows();
                    acc(g, p, dy.slice(s![start..start + rows, ..]).to_owned());
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let mut dx = Array2::zeros(self.val(*a).dim());
                dx.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(dy);
                acc(g, *a, dx);
            }
            Op::SliceCols(a, start) => {
                let mut dx = Array2::zeros(self.val(*a).dim());
                dx.slice_mut(s![.., *start..*start + dy.ncols()]).assign(dy);
                acc(g, *a, dx);
            }
            Op::Sinusoid(a, freqs) => {
                let x = self.val(*a);
                let f = freqs.len();
                let mut dx = Array2::zeros(x.dim());
                for i in 0..x.nrows() {
                    for axis in 0..2 {
                        let mut total = 0.0;
                        for (k, w) in freqs.iter().enumerate() {
                            let (sn, cs) = (w * x[[i, axis]]).sin_cos();
                            total += dy[[i, axis * 2 * f + 2 * k]] * w * cs;
                            total -= dy[[i, axis * 2 * f + 2 * k + 1]] * w * sn;
                        }
                        dx[[i, axis]] = total;
                    }
                }
                acc(g, *a, dx);
            }
            Op::Bezier(a, t) => {
                let x = self.val(*a);
                let mut dx = Array2::zeros(x.dim());
                for i in 0..x.nrows() {
                    for k in 0..*t {
                        let b = bernstein(k as f64 / (t - 1) as f64);
                        for (c, bc) in b.iter().enumerate() {
                            dx[[i, 2 * c]] += bc * dy[[i * t + k, 0]];
                            dx[[i, 2 * c + 1]] += bc * dy[[i * t + k, 1]];
                        }
                    }
                }
                acc(g, *a, dx);
            }
            Op::Attention(saved) => self.attention_backward(saved, dy, g),
        }
    }

    fn attention_backward(&self, a: &AttnSaved, dy: &Array2<f64>, g: &mut [Option<Array2<f64>>]) {
        let (qv, kv, vv) = (self.val(a.q), self.val(a.k), self.val(a.v));
        let d = qv.ncols();
        let dh = d / a.heads;
        let dvh = vv.ncols() / a.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(qv.dim());
        let mut dk = Array2::zeros(kv.dim());
        let mut dv = Array2::zeros(vv.dim());
        let lk = kv.nrows();
        let mut db = a.bias.map(|_| Array2::zeros((qv.nrows(), a.heads * lk)));
        let refs = a.prior.as_ref().map(|p| self.val(p.refs));
        let mut dr = refs.as_ref().map(|r| Array2::<f64>::zeros(r.dim()));
        match (&a.probs, &a.pattern) {
            (Probs::Dense(all), _) => {
                for (h, p) in all.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let vcols = s![.., h * dvh..(h + 1) * dvh];
                    let dyh = dy.slice(vcols);
                    dv.slice_mut(vcols).assign(&p.t().dot(&dyh));
                    let dp = dyh.dot(&vv.slice(vcols).t());
                    let mut ds = p * &dp;
                    let rs = ds.sum_axis(Axis(1));
                    for (mut row, (prow, r)) in ds.rows_mut().into_iter().zip(p.rows().into_iter().zip(rs.iter())) {
                        row.scaled_add(-r, &prow);
                    }
                    if let Some(db) = &mut db {
                        db.slice_mut(s![.., h * lk..(h + 1) * lk]).assign(&ds);
                    }
                    if let (Some(prior), Some(r), Some(dr)) = (&a.prior, &refs, &mut dr) {
                        // d|r - c|^2 / dr = 2 (r - c), summed over keys.
                        let pulled = ds.dot(&prior.sites);
                        let rs = ds.sum_axis(Axis(1));
                        for i in 0..r.nrows() {
                            for c in 0..2 {
                                dr[[i, c]] += 2.0 * prior.coefs[h] * (r[[i, c]] * rs[i] - pulled[[i, c]]);
                            }
                        }
                    }
                    ds *= scale;
                    dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                    dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                }
            }
            (Probs::Sparse(all), KeyPattern::Sparse(vis)) => {
                for (h, rows) in all.iter().enumerate() {
                    let r = h * dh..(h + 1) * dh;
                    let rv = h * dvh..(h + 1) * dvh;
                    for (i, (p, keys)) in rows.iter().zip(vis).enumerate() {
                        let dp: Vec<f64> = keys
                            .iter()
                            .map(|&j| rv.clone().map(|c| dy[[i, c]] * vv[[j, c]]).sum())
                            .collect();
                        let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for ((&j, &pj), &dpj) in keys.iter().zip(p).zip(&dp) {
                            let ds = pj * (dpj - inner);
                            if let Some(db) = &mut db {
                                db[[i, h * lk + j]] = ds;
                            }
                            if let (Some(prior), Some(r), Some(dr)) = (&a.prior, &refs, &mut dr) {
                                for c in 0..2 {
                                    dr[[i, c]] += 2.0 * prior.coefs[h] * ds * (r[[i, c]] - prior.sites[[j, c]]);
                                }
                            }
                            let ds = ds * scale;
                            for c in rv.clone() {
                                dv[[j, c]] += pj * dy[[i, c]];
                            }
                            for c in r.clone() {
                                dq[[i, c]] += ds * kv[[j, c]];
                                dk[[j, c]] += ds * qv[[i, c]];
                            }
                        }
                    }
                }
            }
            _ => unreachable!("probabilities are saved in the layout of the pattern"),
        }
        acc(g, a.q, dq);
        acc(g, a.k, dk);
        acc(g, a.v, dv);
        if let (Some(b), Some(db)) = (a.bias, db) {
            acc(g, b, db);
        }
        if let (Some(p), Some(dr)) = (&a.prior, dr) {
            acc(g, p.refs, dr);
        }
    }
}

fn acc(g: &mut [Option<Array2<f64>>], v: Var, grad: Array2<f64>) {
    match &mut g[v] {
        Some(existing) => *existing += &grad,
        slot => *slot = Some(grad),
    }
}
