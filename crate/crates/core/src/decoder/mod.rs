//! A small factorized transformer decoder with trainable parameters.
//!
//! Queries are laid out as `instances x T` rows: the denoising groups first,
//! then the matching queries. Each layer runs intra-instance self-attention
//! over the `T` positions, inter-instance self-attention over mean-pooled
//! instance states (under the group-isolating mask), cross-attention to the
//! feature map and a feed-forward block. Every layer but the last nudges the
//! reference points, and the coordinate heads refine the final ones
//! residually.

pub mod checkpoint;
pub mod optim;
pub mod tape;
pub mod train;

use std::collections::HashMap;
use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn_mask::{build_mask, AttentionMask};
use crate::dn_queries::DnQueryBatch;
use crate::error::{invalid, shape, Error, Result};
use crate::geometry::Point2;
use crate::losses::{PredictionGrads, PredictionSet};
use crate::synth::{feature_channels, FeatureMap};
use tape::{AttentionSpec, KeyPattern, SpatialPrior, Tape, Var};

/// Prior probability a fresh query is foreground.
const SCORE_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Sampled points per curve (`T`).
    pub points_per_curve: usize,
    /// Foreground classes; the background class is `alphabet_size`.
    pub alphabet_size: usize,
    pub matching_queries: usize,
    pub feature_channels: usize,
    /// Width of the narrowest head's spatial prior in cross-attention; each
    /// further head doubles it.
    pub spatial_sigma: f64,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            points_per_curve: 25,
            alphabet_size: 37,
            matching_queries: 20,
            feature_channels: feature_channels(37),
            spatial_sigma: 0.05,
            dropout: 0.0,
            init_seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(invalid("layers", "need at least one layer"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(invalid("dim", format!("{} is not divisible by {} heads", self.dim, self.heads)));
        }
        if !self.dim.is_multiple_of(4) || self.dim == 0 {
            return Err(invalid("dim", "positional encoding needs a positive multiple of 4"));
        }
        if self.ffn_dim == 0 {
            return Err(invalid("ffn_dim", "must be positive"));
        }
        if self.points_per_curve < 2 {
            return Err(invalid("points_per_curve", "need at least 2"));
        }
        if self.alphabet_size == 0 {
            return Err(invalid("alphabet_size", "must be positive"));
        }
        if self.matching_queries == 0 {
            return Err(invalid("matching_queries", "must be positive"));
        }
        if self.feature_channels == 0 {
            return Err(invalid("feature_channels", "must be positive"));
        }
        if !(self.spatial_sigma > 0.0 && self.spatial_sigma.is_finite()) {
            return Err(invalid("spatial_sigma", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn background(&self) -> usize {
        self.alphabet_size
    }

    pub fn num_classes(&self) -> usize {
        self.alphabet_size + 1
    }
}

/// Frequencies of the sinusoidal point encoding: `dim / 4` per axis,
/// geometric between 2*pi and 2*pi*16.
pub fn pe_frequencies(dim: usize) -> Vec<f64> {
    let f = dim / 4;
    (0..f).map(|k| 2.0 * PI * 16f64.powf(k as f64 / f as f64)).collect()
}

/// Named parameter matrices in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.id(name).map(|i| &mut self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

/// Horizontal anchor curves on a regular grid over the image.
fn initial_anchors(k: usize) -> Array2<f64> {
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let width = 0.6 / cols as f64;
    Array2::from_shape_fn((k, 8), |(q, c)| {
        let (r, col) = (q / cols, q % cols);
        let cx = (col as f64 + 0.5) / cols as f64;
        let cy = (r as f64 + 0.5) / rows as f64;
        let i = c / 2;
        if c % 2 == 0 {
            cx - width / 2.0 + width * i as f64 / 3.0
        } else {
            cy
        }
    })
}

const ATTN: [&str; 3] = ["intra", "inter", "cross"];

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub params: ParamStore,
}

/// Queries entering the decoder, in the mask's row order.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryLayout {
    /// Denoising groups.
    pub g: usize,
    /// Instances per denoising group half.
    pub n: usize,
    /// Matching queries.
    pub k: usize,
}

impl QueryLayout {
    pub fn dn_rows(&self) -> usize {
        self.g * 2 * self.n
    }

    pub fn instances(&self) -> usize {
        self.dn_rows() + self.k
    }
}

#[derive(Debug, Clone, Copy)]
struct HeadVars {
    score: Var,
    chars: Var,
    center: Var,
    top: Var,
    bot: Var,
}

/// A finished forward pass, kept for backpropagation.
#[derive(Debug)]
pub struct ForwardPass {
    tape: Tape,
    param_vars: Vec<Var>,
    heads: HeadVars,
    pub layout: QueryLayout,
    pub predictions: PredictionSet,
}

impl ForwardPass {
    pub fn dn_predictions(&self) -> PredictionSet {
        self.predictions.rows(0..self.layout.dn_rows())
    }

    pub fn matching_predictions(&self) -> PredictionSet {
        self.predictions.rows(self.layout.dn_rows()..self.layout.instances())
    }

    /// Parameter gradients, in [`ParamStore`] order, given gradients of a
    /// scalar loss with respect to every prediction.
    pub fn backward(&self, grads: &PredictionGrads) -> Result<Vec<Array2<f64>>> {
        let q = self.layout.instances();
        if grads.instance_scores.len() != q {
            return Err(shape("prediction gradients", q, grads.instance_scores.len()));
        }
        let flat = |a: &Array3<f64>| {
            let (r, t, c) = a.dim();
            a.to_shape((r * t, c)).expect("contiguous").to_owned()
        };
        let seeds = vec![
            (
                self.heads.score,
                Array2::from_shape_vec((q, 1), grads.instance_scores.clone()).expect("one score per query"),
            ),
            (self.heads.chars, flat(&grads.char_logits)),
            (self.heads.center, flat(&grads.center_points)),
            (self.heads.top, flat(&grads.boundary_top)),
            (self.heads.bot, flat(&grads.boundary_bot)),
        ];
        let mut g = self.tape.backward(seeds);
        Ok(self
            .param_vars
            .iter()
            .map(|&v| {
                let shape = self.tape.value(v).dim();
                g.take(v).unwrap_or_else(|| Array2::zeros(shape))
            })
            .collect())
    }
}

/// Denoising input rows: positional points and character content per query.
#[derive(Debug, Clone, PartialEq)]
pub struct DnInput {
    pub g: usize,
    pub n: usize,
    pub points: Vec<Vec<Point2>>,
    pub chars: Vec<Vec<usize>>,
}

impl From<&DnQueryBatch> for DnInput {
    fn from(b: &DnQueryBatch) -> Self {
        Self {
            g: b.g(),
            n: b.n,
            points: b.row_points().cloned().collect(),
            chars: b.row_chars().cloned().collect(),
        }
    }
}

fn finite_or(tape: &Tape, v: Var, what: impl FnOnce() -> String) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let (d, t, k, c) = (cfg.dim, cfg.points_per_curve, cfg.matching_queries, cfg.num_classes());
        let mut p = ParamStore::new();
        p.insert("anchors", initial_anchors(k))?;
        p.insert("match_content", uniform(&mut rng, k * t, d, 0.5))?;
        p.insert("char_embed", uniform(&mut rng, c, d, 0.5))?;
        p.insert("pos.w1", xavier(&mut rng, d, d))?;
        p.insert("pos.b1", Array2::zeros((1, d)))?;
        p.insert("pos.w2", xavier(&mut rng, d, d))?;
        p.insert("pos.b2", Array2::zeros((1, d)))?;
        p.insert("feat.w", xavier(&mut rng, cfg.feature_channels, d))?;
        p.insert("feat.b", Array2::zeros((1, d)))?;
        for l in 0..cfg.layers {
            for a in ATTN {
                for w in ["wq", "wk", "wv"] {
                    p.insert(format!("l{l}.{a}.{w}"), xavier(&mut rng, d, d))?;
                }
                // Cross-attention heads each emit two extra geometry columns.
                let out_rows = if a == "cross" { d + 2 * cfg.heads } else { d };
                p.insert(format!("l{l}.{a}.wo"), xavier(&mut rng, out_rows, d))?;
                p.insert(format!("l{l}.{a}.bo"), Array2::zeros((1, d)))?;
            }
            p.insert(format!("l{l}.ffn.w1"), xavier(&mut rng, d, cfg.ffn_dim))?;
            p.insert(format!("l{l}.ffn.b1"), Array2::zeros((1, cfg.ffn_dim)))?;
            p.insert(format!("l{l}.ffn.w2"), xavier(&mut rng, cfg.ffn_dim, d))?;
            p.insert(format!("l{l}.ffn.b2"), Array2::zeros((1, d)))?;
            for n in 0..4 {
                p.insert(format!("l{l}.ln{n}.g"), Array2::ones((1, d)))?;
                p.insert(format!("l{l}.ln{n}.b"), Array2::zeros((1, d)))?;
            }
            if l + 1 < cfg.layers {
                p.insert(format!("l{l}.ref.w"), Array2::zeros((d, 2)))?;
                p.insert(format!("l{l}.ref.b"), Array2::zeros((1, 2)))?;
            }
        }
        p.insert("head.char.w", xavier(&mut rng, d, c))?;
        p.insert("head.char.b", Array2::zeros((1, c)))?;
        for h in ["center", "top", "bot"] {
            p.insert(format!("head.{h}.w"), Array2::zeros((d, 2)))?;
            p.insert(format!("head.{h}.b"), Array2::zeros((1, 2)))?;
        }
        p.insert("head.score.w", xavier(&mut rng, d, 1))?;
        p.insert("head.score.b", Array2::from_elem((1, 1), (SCORE_PRIOR / (1.0 - SCORE_PRIOR)).ln()))?;
        Ok(Self { cfg, params: p })
    }

    /// Rebuilds a decoder from a configuration and previously trained parameters.
    pub fn from_parts(cfg: DecoderConfig, params: ParamStore) -> Result<Self> {
        let fresh = Decoder::new(cfg.clone())?;
        if fresh.params.names() != params.names() {
            return Err(Error::Format("parameter names do not match the configuration".into()));
        }
        for ((name, a), b) in fresh.params.iter().zip(params.values()) {
            if a.dim() != b.dim() {
                return Err(Error::Format(format!("parameter {name} has shape {:?}, expected {:?}", b.dim(), a.dim())));
            }
        }
        Ok(Self { cfg, params })
    }

    /// Two-layer perceptron over the sinusoidal encoding of `n x 2` points.
    pub fn embed_positional(&self, tape: &mut Tape, pv: &[Var], points: Var) -> Var {
        let pe = tape.sinusoid(points, pe_frequencies(self.cfg.dim));
        let h = self.linear(tape, pv, pe, "pos.w1", "pos.b1");
        let h = tape.gelu(h);
        self.linear(tape, pv, h, "pos.w2", "pos.b2")
    }

    fn p(&self, pv: &[Var], name: &str) -> Var {
        pv[self.params.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    fn linear(&self, tape: &mut Tape, pv: &[Var], x: Var, w: &str, b: &str) -> Var {
        let y = tape.matmul(x, self.p(pv, w));
        tape.add_row(y, self.p(pv, b))
    }

    fn layer_norm(&self, tape: &mut Tape, pv: &[Var], x: Var, name: &str) -> Var {
        let y = tape.layer_norm(x);
        let y = tape.mul_row(y, self.p(pv, &format!("{name}.g")));
        tape.add_row(y, self.p(pv, &format!("{name}.b")))
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        let Some(rng) = rng.as_deref_mut() else { return x };
        let p = self.cfg.dropout;
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let (r, c) = tape.value(x).dim();
        let mask = Array2::from_shape_fn((r, c), |_| if rng.random_bool(p) { 0.0 } else { keep });
        let m = tape.leaf(mask);
        tape.mul(x, m)
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        prefix: &str,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        pattern: KeyPattern,
        bias: Option<Var>,
    ) -> Var {
        let q = tape.matmul(q_in, self.p(pv, &format!("{prefix}.wq")));
        let k = tape.matmul(k_in, self.p(pv, &format!("{prefix}.wk")));
        let v = tape.matmul(v_in, self.p(pv, &format!("{prefix}.wv")));
        let o = tape.attention(
            q,
            k,
            v,
            AttentionSpec {
                heads: self.cfg.heads,
                pattern,
                bias,
                prior: None,
            },
        );
        self.linear(tape, pv, o, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    /// Gaussian log-prior coefficients, one width per head.
    fn spatial_coefs(&self) -> Vec<f64> {
        (0..self.cfg.heads)
            .map(|h| {
                let sigma = self.cfg.spatial_sigma * 2f64.powi(h as i32);
                -0.5 / (sigma * sigma)
            })
            .collect()
    }

    /// Decodes content queries (`instances*T x dim`) against the feature map.
    /// `refs` holds the reference point of every row; layers before the last
    /// move it residually and later layers re-embed it.
    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        content: Var,
        mut refs: Var,
        features: &FeatureMap,
        mask: &AttentionMask,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<HeadVars> {
        let cfg = &self.cfg;
        let (t, heads) = (cfg.points_per_curve, cfg.heads);
        let rows = tape.value(content).nrows();
        let instances = rows / t;
        if mask.size() != instances {
            return Err(shape("attention mask", instances, mask.size()));
        }
        if features.channels != cfg.feature_channels {
            return Err(shape("feature channels", cfg.feature_channels, features.channels));
        }

        let fmap = tape.leaf(
            Array2::from_shape_vec((features.cells(), features.channels), features.data.clone())
                .map_err(|e| Error::Format(e.to_string()))?,
        );
        let feat = self.linear(tape, pv, fmap, "feat.w", "feat.b");
        let cell_pts = Array2::from_shape_fn((features.cells(), 2), |(i, a)| {
            let c = features.cell_center(i);
            if a == 0 {
                c.x
            } else {
                c.y
            }
        });
        // Each cross-attention head reads its value columns followed by the
        // cell center, so it also reports where its attention sits; the
        // reference point is subtracted from that centroid before the output
        // projection.
        let (dh, wide) = (cfg.dim / heads, cfg.dim / heads + 2);
        let expand = tape.leaf(Array2::from_shape_fn((cfg.dim, heads * wide), |(r, c)| {
            if c % wide < dh && c / wide * dh + c % wide == r {
                1.0
            } else {
                0.0
            }
        }));
        let geo_cols = tape.leaf(Array2::from_shape_fn((features.cells(), heads * wide), |(j, c)| {
            let a = c % wide;
            if a >= dh {
                cell_pts[[j, a - dh]]
            } else {
                0.0
            }
        }));
        let place = tape.leaf(Array2::from_shape_fn((2, heads * wide), |(a, c)| if c % wide == dh + a { 1.0 } else { 0.0 }));
        let cell_leaf = tape.leaf(cell_pts.clone());
        let cell_pos = self.embed_positional(tape, pv, cell_leaf);
        let keys = tape.add(feat, cell_pos);

        let intra = KeyPattern::blocks(rows, t);
        let inter = KeyPattern::Sparse((0..instances).map(|i| mask.visible(i).collect()).collect());

        let mut x = content;
        for l in 0..cfg.layers {
            let pos = self.embed_positional(tape, pv, refs);
            let qk = tape.add(x, pos);
            let a = self.attend(tape, pv, &format!("l{l}.intra"), qk, qk, x, intra.clone(), None);
            let a = self.dropout(tape, a, &mut rng);
            let r = tape.add(x, a);
            x = self.layer_norm(tape, pv, r, &format!("l{l}.ln0"));

            let pooled = tape.segment_mean(x, t);
            let pooled_pos = tape.segment_mean(pos, t);
            let qk = tape.add(pooled, pooled_pos);
            let a = self.attend(tape, pv, &format!("l{l}.inter"), qk, qk, pooled, inter.clone(), None);
            let a = self.dropout(tape, a, &mut rng);
            let a = tape.repeat(a, t);
            let r = tape.add(x, a);
            x = self.layer_norm(tape, pv, r, &format!("l{l}.ln1"));

            let prefix = format!("l{l}.cross");
            let q_in = tape.add(x, pos);
            let q = tape.matmul(q_in, self.p(pv, &format!("{prefix}.wq")));
            let k = tape.matmul(keys, self.p(pv, &format!("{prefix}.wk")));
            let v = tape.matmul(feat, self.p(pv, &format!("{prefix}.wv")));
            let v = tape.matmul(v, expand);
            let v = tape.add(v, geo_cols);
            let prior = SpatialPrior {
                refs,
                sites: cell_pts.clone(),
                coefs: self.spatial_coefs(),
            };
            let o = tape.attention(
                q,
                k,
                v,
                AttentionSpec {
                    heads,
                    pattern: KeyPattern::Dense,
                    bias: None,
                    prior: Some(prior),
                },
            );
            let here = tape.matmul(refs, place);
            let here = tape.scale(here, -1.0);
            let o = tape.add(o, here);
            let a = self.linear(tape, pv, o, &format!("{prefix}.wo"), &format!("{prefix}.bo"));
            let a = self.dropout(tape, a, &mut rng);
            let r = tape.add(x, a);
            x = self.layer_norm(tape, pv, r, &format!("l{l}.ln2"));

            let h = self.linear(tape, pv, x, &format!("l{l}.ffn.w1"), &format!("l{l}.ffn.b1"));
            let h = tape.gelu(h);
            let h = self.linear(tape, pv, h, &format!("l{l}.ffn.w2"), &format!("l{l}.ffn.b2"));
            let h = self.dropout(tape, h, &mut rng);
            let r = tape.add(x, h);
            x = self.layer_norm(tape, pv, r, &format!("l{l}.ln3"));
            finite_or(tape, x, || format!("decoder layer {l}"))?;
            if l + 1 < cfg.layers {
                let step = self.linear(tape, pv, x, &format!("l{l}.ref.w"), &format!("l{l}.ref.b"));
                refs = tape.add(refs, step);
            }
        }

        let chars = self.linear(tape, pv, x, "head.char.w", "head.char.b");
        let off = self.linear(tape, pv, x, "head.center.w", "head.center.b");
        let center = tape.add(refs, off);
        let off = self.linear(tape, pv, x, "head.top.w", "head.top.b");
        let top = tape.add(center, off);
        let off = self.linear(tape, pv, x, "head.bot.w", "head.bot.b");
        let bot = tape.add(center, off);
        let pooled = tape.segment_mean(x, t);
        let logit = self.linear(tape, pv, pooled, "head.score.w", "head.score.b");
        let score = tape.sigmoid(logit);
        for (name, v) in [("chars", chars), ("center", center), ("top", top), ("bottom", bot), ("score", score)] {
            finite_or(tape, v, || format!("{name} head"))?;
        }
        Ok(HeadVars {
            score,
            chars,
            center,
            top,
            bot,
        })
    }

    /// Runs the decoder over optional denoising queries followed by the
    /// matching queries. `rng` enables dropout.
    pub fn forward(&self, dn: Option<&DnInput>, features: &FeatureMap, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        let t = cfg.points_per_curve;
        let k = cfg.matching_queries;
        let mut tape = Tape::new();
        let pv: Vec<Var> = self.params.values().iter().map(|v| tape.leaf(v.clone())).collect();

        let layout = match dn {
            Some(d) => QueryLayout { g: d.g, n: d.n, k },
            None => QueryLayout { g: 0, n: 0, k },
        };
        let anchor_pts = tape.bezier(self.p(&pv, "anchors"), t);
        let match_content = self.p(&pv, "match_content");
        let (points, content) = match dn {
            Some(d) if layout.dn_rows() > 0 => {
                if d.points.len() != layout.dn_rows() || d.chars.len() != layout.dn_rows() {
                    return Err(shape("denoising rows", layout.dn_rows(), d.points.len().min(d.chars.len())));
                }
                let mut flat_pts = Vec::with_capacity(layout.dn_rows() * t * 2);
                for row in &d.points {
                    if row.len() != t {
                        return Err(shape("denoising points per query", t, row.len()));
                    }
                    flat_pts.extend(row.iter().flat_map(|p| [p.x, p.y]));
                }
                if flat_pts.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("denoising positional points".into()));
                }
                let mut flat_chars = Vec::with_capacity(layout.dn_rows() * t);
                for row in &d.chars {
                    if row.len() != t {
                        return Err(shape("denoising characters per query", t, row.len()));
                    }
                    if let Some(&c) = row.iter().find(|&&c| c > cfg.background()) {
                        return Err(invalid("chars", format!("class {c} is out of range")));
                    }
                    flat_chars.extend_from_slice(row);
                }
                let dn_pts = tape.leaf(Array2::from_shape_vec((layout.dn_rows() * t, 2), flat_pts).expect("sized above"));
                let dn_content = tape.gather(self.p(&pv, "char_embed"), flat_chars);
                (
                    tape.concat_rows(vec![dn_pts, anchor_pts]),
                    tape.concat_rows(vec![dn_content, match_content]),
                )
            }
            _ => (anchor_pts, match_content),
        };
        let mask = build_mask(layout.g, layout.n, k);
        let heads = self.decode(&mut tape, &pv, content, points, features, &mask, rng)?;
        let predictions = self.collect(&tape, heads, layout.instances());
        Ok(ForwardPass {
            tape,
            param_vars: pv,
            heads,
            layout,
            predictions,
        })
    }

    fn collect(&self, tape: &Tape, h: HeadVars, q: usize) -> PredictionSet {
        let t = self.cfg.points_per_curve;
        let cube = |v: Var| {
            let a = tape.value(v);
            let c = a.ncols();
            a.to_shape((q, t, c)).expect("rows are instances x T").to_owned()
        };
        PredictionSet {
            instance_scores: tape.value(h.score).column(0).to_vec(),
            char_logits: cube(h.chars),
            center_points: cube(h.center),
            boundary_top: cube(h.top),
            boundary_bot: cube(h.bot),
        }
    }

    /// Matching-query predictions only, as used at inference time.
    pub fn predict(&self, features: &FeatureMap) -> Result<PredictionSet> {
        Ok(self.forward(None, features, None)?.predictions)
    }
}
