//! Training losses for the matching and denoising parts.
//!
//! Every term comes with an analytic gradient with respect to the
//! predictions so a training loop can seed backpropagation directly.
//! The background class `C` (last logit column) doubles as the CTC blank.

use std::ops::Range;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::assignment::{build_cost_matrix, hungarian_match, MatchAssignment, MatchCost};
use crate::dn_queries::DnQueryBatch;
use crate::error::{invalid, shape, Error, Result};
use crate::geometry::{sample_uniform, Point2, TextInstance};

/// Floor applied to per-step log-probabilities inside CTC.
const LOG_FLOOR: f64 = -69.077_552_789_821_37; // ln(1e-30)

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub coord: f64,
    pub bd: f64,
    pub text_pos: f64,
    pub text_neg: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            coord: 1.0,
            bd: 0.5,
            text_pos: 0.5,
            text_neg: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.cls,
            self.coord,
            self.bd,
            self.text_pos,
            self.text_neg,
            self.focal_alpha,
            self.focal_gamma,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("loss_weights", "weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Decoder outputs for a block of queries.
///
/// `char_logits` is `(queries, T, C + 1)`; point tensors are `(queries, T, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub instance_scores: Vec<f64>,
    pub char_logits: Array3<f64>,
    pub center_points: Array3<f64>,
    pub boundary_top: Array3<f64>,
    pub boundary_bot: Array3<f64>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.instance_scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_scores.is_empty()
    }

    pub fn points_per_query(&self) -> usize {
        self.center_points.dim().1
    }

    pub fn num_classes(&self) -> usize {
        self.char_logits.dim().2
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.len();
        let t = self.points_per_query();
        let (lq, lt, _) = self.char_logits.dim();
        if (lq, lt) != (q, t) {
            return Err(shape("char_logits", format!("({q}, {t}, _)"), format!("({lq}, {lt}, _)")));
        }
        for (name, a) in [
            ("center_points", &self.center_points),
            ("boundary_top", &self.boundary_top),
            ("boundary_bot", &self.boundary_bot),
        ] {
            if a.dim() != (q, t, 2) {
                return Err(shape(name, format!("({q}, {t}, 2)"), format!("{:?}", a.dim())));
            }
        }
        Ok(())
    }

    /// Copy of the queries in `rows`.
    pub fn rows(&self, rows: Range<usize>) -> PredictionSet {
        let r = s![rows.clone(), .., ..];
        PredictionSet {
            instance_scores: self.instance_scores[rows.clone()].to_vec(),
            char_logits: self.char_logits.slice(r).to_owned(),
            center_points: self.center_points.slice(r).to_owned(),
            boundary_top: self.boundary_top.slice(r).to_owned(),
            boundary_bot: self.boundary_bot.slice(r).to_owned(),
        }
    }

    pub fn points(&self, which: &Array3<f64>, q: usize) -> Vec<Point2> {
        which
            .index_axis(Axis(0), q)
            .outer_iter()
            .map(|p| Point2::new(p[0], p[1]))
            .collect()
    }

    pub fn center_of(&self, q: usize) -> Vec<Point2> {
        self.points(&self.center_points, q)
    }

    pub fn top_of(&self, q: usize) -> Vec<Point2> {
        self.points(&self.boundary_top, q)
    }

    pub fn bot_of(&self, q: usize) -> Vec<Point2> {
        self.points(&self.boundary_bot, q)
    }
}

/// Gradients with the same layout as [`PredictionSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrads {
    pub instance_scores: Vec<f64>,
    pub char_logits: Array3<f64>,
    pub center_points: Array3<f64>,
    pub boundary_top: Array3<f64>,
    pub boundary_bot: Array3<f64>,
}

impl PredictionGrads {
    pub fn zeros(queries: usize, points: usize, classes: usize) -> Self {
        Self {
            instance_scores: vec![0.0; queries],
            char_logits: Array3::zeros((queries, points, classes)),
            center_points: Array3::zeros((queries, points, 2)),
            boundary_top: Array3::zeros((queries, points, 2)),
            boundary_bot: Array3::zeros((queries, points, 2)),
        }
    }

    pub fn like(p: &PredictionSet) -> Self {
        Self::zeros(p.len(), p.points_per_query(), p.num_classes())
    }

    /// Adds `part` into the query rows starting at `offset`.
    pub fn add_rows(&mut self, offset: usize, part: &PredictionGrads) {
        let q = part.instance_scores.len();
        for (d, s) in self.instance_scores[offset..offset + q].iter_mut().zip(&part.instance_scores) {
            *d += s;
        }
        let r = s![offset..offset + q, .., ..];
        self.char_logits.slice_mut(r).zip_mut_with(&part.char_logits, |d, s| *d += s);
        self.center_points.slice_mut(r).zip_mut_with(&part.center_points, |d, s| *d += s);
        self.boundary_top.slice_mut(r).zip_mut_with(&part.boundary_top, |d, s| *d += s);
        self.boundary_bot.slice_mut(r).zip_mut_with(&part.boundary_bot, |d, s| *d += s);
    }

    fn scale(&mut self, k: f64) {
        self.instance_scores.iter_mut().for_each(|g| *g *= k);
        self.char_logits.mapv_inplace(|g| g * k);
        self.center_points.mapv_inplace(|g| g * k);
        self.boundary_top.mapv_inplace(|g| g * k);
        self.boundary_bot.mapv_inplace(|g| g * k);
    }
}

/// Weighted, normalized loss terms of one query part.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    pub text_pos: f64,
    pub text_neg: f64,
    pub coord: f64,
    pub bd: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.cls + self.text_pos + self.text_neg + self.coord + self.bd
    }
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: f64,
    pub terms: LossTerms,
    /// Per-query sums are divided by this (number of positive queries, at least 1).
    pub normalizer: f64,
    pub grads: PredictionGrads,
}

/// Focal loss of a single score and its derivative with respect to the score.
pub fn focal_term(score: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    if positive {
        let q = 1.0 - score;
        let loss = -alpha * q.powf(gamma) * score.ln();
        let grad = alpha * (gamma * q.powf(gamma - 1.0) * score.ln() - q.powf(gamma) / score);
        (loss, grad)
    } else {
        let q = 1.0 - score;
        let loss = -(1.0 - alpha) * score.powf(gamma) * q.ln();
        let grad = -(1.0 - alpha) * (gamma * score.powf(gamma - 1.0) * q.ln() - score.powf(gamma) / q);
        (loss, grad)
    }
}

fn check_score(s: f64) -> Result<()> {
    if s > 0.0 && s < 1.0 {
        Ok(())
    } else {
        Err(invalid("score", format!("{s} is outside (0, 1)")))
    }
}

/// Sum of focal instance-classification losses.
pub fn focal_cls_loss(scores: &[f64], is_positive: &[bool], alpha: f64, gamma: f64) -> Result<f64> {
    if scores.len() != is_positive.len() {
        return Err(shape("focal inputs", scores.len(), is_positive.len()));
    }
    let mut total = 0.0;
    for (&s, &p) in scores.iter().zip(is_positive) {
        check_score(s)?;
        total += focal_term(s, p, alpha, gamma).0;
    }
    Ok(total)
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum number of steps needed to emit `target` (repeats need a blank between).
pub fn ctc_min_steps(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood of `target` under `(T, C + 1)` logits.
pub fn ctc_text_loss(logits: ArrayView2<f64>, target: &[usize]) -> Result<f64> {
    ctc_loss_and_grad(logits, target).map(|(l, _)| l)
}

/// CTC loss and its gradient with respect to the logits.
pub fn ctc_loss_and_grad(logits: ArrayView2<f64>, target: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (steps, classes) = logits.dim();
    if classes < 2 {
        return Err(invalid("logits", "need at least one character class and the blank"));
    }
    let blank = classes - 1;
    if let Some(&c) = target.iter().find(|&&c| c >= blank) {
        return Err(invalid("target", format!("class {c} is blank or out of range")));
    }
    let needed = ctc_min_steps(target);
    if needed > steps {
        return Err(Error::InfeasibleAlignment {
            target_len: target.len(),
            repeats: needed - target.len(),
            steps,
        });
    }

    let logp = log_softmax(logits).mapv(|v| v.max(LOG_FLOOR));
    // Extended label sequence: blank, l1, blank, l2, ..., blank.
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&c| [c, blank]))
        .collect();
    let len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = Array2::from_elem((steps, len), ninf);
    let mut beta = Array2::from_elem((steps, len), ninf);

    alpha[[0, 0]] = logp[[0, ext[0]]];
    if len > 1 {
        alpha[[0, 1]] = logp[[0, ext[1]]];
    }
    for t in 1..steps {
        for s in 0..len {
            let mut a = alpha[[t - 1, s]];
            if s >= 1 {
                a = log_add(a, alpha[[t - 1, s - 1]]);
            }
            if skip_ok(s) {
                a = log_add(a, alpha[[t - 1, s - 2]]);
            }
            if a != ninf {
                alpha[[t, s]] = a + logp[[t, ext[s]]];
            }
        }
    }

    let last = steps - 1;
    beta[[last, len - 1]] = logp[[last, ext[len - 1]]];
    if len > 1 {
        beta[[last, len - 2]] = logp[[last, ext[len - 2]]];
    }
    for t in (0..last).rev() {
        for s in 0..len {
            let mut b = beta[[t + 1, s]];
            if s + 1 < len {
                b = log_add(b, beta[[t + 1, s + 1]]);
            }
            if s + 2 < len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                b = log_add(b, beta[[t + 1, s + 2]]);
            }
            if b != ninf {
                beta[[t, s]] = b + logp[[t, ext[s]]];
            }
        }
    }

    let mut log_like = alpha[[last, len - 1]];
    if len > 1 {
        log_like = log_add(log_like, alpha[[last, len - 2]]);
    }
    let loss = -log_like;

    // d loss / d logit[t, k] = softmax[t, k] - sum_{s: ext[s] = k} exp(alpha + beta - logp - log_like)
    let mut grad = logp.mapv(f64::exp);
    for t in 0..steps {
        let mut occupancy = vec![ninf; classes];
        for s in 0..len {
            let ab = alpha[[t, s]] + beta[[t, s]];
            if ab != ninf {
                let k = ext[s];
                occupancy[k] = log_add(occupancy[k], ab - logp[[t, k]]);
            }
        }
        for (k, occ) in occupancy.into_iter().enumerate() {
            if occ != ninf {
                grad[[t, k]] -= (occ - log_like).exp();
            }
        }
    }
    Ok((loss, grad))
}

/// Best-path decoding: per-step argmax, repeats collapsed, blanks (the
/// last class) dropped.
pub fn ctc_greedy_decode(logits: ArrayView2<f64>) -> Vec<usize> {
    let blank = logits.ncols() - 1;
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.rows() {
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0;
        if best != blank && prev != Some(best) {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Mean over steps of cross-entropy against the background class.
pub fn ce_background_loss(logits: ArrayView2<f64>) -> f64 {
    ce_background_loss_and_grad(logits).0
}

pub fn ce_background_loss_and_grad(logits: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let (steps, classes) = logits.dim();
    let bg = classes - 1;
    let logp = log_softmax(logits);
    let loss = -logp.column(bg).sum() / steps as f64;
    let mut grad = logp.mapv(f64::exp);
    grad.column_mut(bg).mapv_inplace(|p| p - 1.0);
    grad.mapv_inplace(|g| g / steps as f64);
    (loss, grad)
}

/// Sum over points of `|dx| + |dy|`. `pred` is `(T, 2)`.
pub fn coord_l1_loss(pred: ArrayView2<f64>, gt: &[Point2]) -> Result<f64> {
    l1_and_grad(pred, gt, None)
}

/// Sum of the top and bottom L1 terms.
pub fn boundary_l1_loss(
    pred_top: ArrayView2<f64>,
    pred_bot: ArrayView2<f64>,
    gt_top: &[Point2],
    gt_bot: &[Point2],
) -> Result<f64> {
    Ok(coord_l1_loss(pred_top, gt_top)? + coord_l1_loss(pred_bot, gt_bot)?)
}

/// L1 between `pred` and `gt`; when `grad` is given, `scale * sign(diff)` is added into it.
fn l1_and_grad(pred: ArrayView2<f64>, gt: &[Point2], grad: Option<(ArrayViewMut2<f64>, f64)>) -> Result<f64> {
    if pred.dim() != (gt.len(), 2) {
        return Err(shape("point sequences", format!("({}, 2)", gt.len()), format!("{:?}", pred.dim())));
    }
    let mut total = 0.0;
    let mut grad = grad;
    for (k, g) in gt.iter().enumerate() {
        let dx = pred[[k, 0]] - g.x;
        let dy = pred[[k, 1]] - g.y;
        total += dx.abs() + dy.abs();
        if let Some((ref mut out, scale)) = grad {
            out[[k, 0]] += scale * sign(dx);
            out[[k, 1]] += scale * sign(dy);
        }
    }
    Ok(total)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sampled ground-truth geometry at `T` points.
struct GtSamples {
    center: Vec<Point2>,
    top: Vec<Point2>,
    bot: Vec<Point2>,
}

fn gt_samples(inst: &TextInstance, t: usize) -> Result<GtSamples> {
    Ok(GtSamples {
        center: sample_uniform(&inst.center(), t)?,
        top: sample_uniform(&inst.top, t)?,
        bot: sample_uniform(&inst.bottom, t)?,
    })
}

/// Accumulates all positive-query terms for query `q` against `target`.
fn positive_query_terms(
    pred: &PredictionSet,
    q: usize,
    target: &TextInstance,
    samples: &GtSamples,
    w: &LossWeights,
    terms: &mut LossTerms,
    grads: &mut PredictionGrads,
) -> Result<()> {
    let (lc, gc) = focal_term(pred.instance_scores[q], true, w.focal_alpha, w.focal_gamma);
    terms.cls += w.cls * lc;
    grads.instance_scores[q] += w.cls * gc;

    let t = pred.points_per_query();
    let text = &target.transcript[..target.transcript.len().min(t)];
    let (lt, gt) = ctc_loss_and_grad(pred.char_logits.index_axis(Axis(0), q), text)?;
    terms.text_pos += w.text_pos * lt;
    grads
        .char_logits
        .index_axis_mut(Axis(0), q)
        .scaled_add(w.text_pos, &gt);

    let center = pred.center_points.index_axis(Axis(0), q);
    terms.coord += w.coord
        * l1_and_grad(center, &samples.center, Some((grads.center_points.index_axis_mut(Axis(0), q), w.coord)))?;
    let top = pred.boundary_top.index_axis(Axis(0), q);
    terms.bd += w.bd * l1_and_grad(top, &samples.top, Some((grads.boundary_top.index_axis_mut(Axis(0), q), w.bd)))?;
    let bot = pred.boundary_bot.index_axis(Axis(0), q);
    terms.bd += w.bd * l1_and_grad(bot, &samples.bot, Some((grads.boundary_bot.index_axis_mut(Axis(0), q), w.bd)))?;
    Ok(())
}

fn negative_cls_term(pred: &PredictionSet, q: usize, w: &LossWeights, terms: &mut LossTerms, grads: &mut PredictionGrads) {
    let (l, g) = focal_term(pred.instance_scores[q], false, w.focal_alpha, w.focal_gamma);
    terms.cls += w.cls * l;
    grads.instance_scores[q] += w.cls * g;
}

fn finish(mut terms: LossTerms, mut grads: PredictionGrads, normalizer: f64) -> LossReport {
    let k = 1.0 / normalizer;
    terms.cls *= k;
    terms.text_pos *= k;
    terms.text_neg *= k;
    terms.coord *= k;
    terms.bd *= k;
    grads.scale(k);
    LossReport {
        total: terms.total(),
        terms,
        normalizer,
        grads,
    }
}

/// Loss of the denoising part. Rows of `pred` follow the batch layout:
/// group-major, `n` positive rows then `n` negative rows per group.
pub fn dn_loss(pred: &PredictionSet, batch: &DnQueryBatch, gt: &[TextInstance], w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    pred.validate()?;
    if pred.len() != batch.len() {
        return Err(shape("denoising predictions", batch.len(), pred.len()));
    }
    if gt.len() < batch.n {
        return Err(shape("denoising ground truth", batch.n, gt.len()));
    }
    if pred.num_classes() != batch.background + 1 {
        return Err(shape("class count", batch.background + 1, pred.num_classes()));
    }
    for &s in &pred.instance_scores {
        check_score(s)?;
    }
    let t = pred.points_per_query();
    let samples = gt[..batch.n]
        .iter()
        .map(|g| gt_samples(g, t))
        .collect::<Result<Vec<_>>>()?;

    let mut terms = LossTerms::default();
    let mut grads = PredictionGrads::like(pred);
    for q in 0..pred.len() {
        let (positive, idx) = batch.row_role(q);
        if positive {
            positive_query_terms(pred, q, &gt[idx], &samples[idx], w, &mut terms, &mut grads)?;
        } else {
            negative_cls_term(pred, q, w, &mut terms, &mut grads);
            let (l, g) = ce_background_loss_and_grad(pred.char_logits.index_axis(Axis(0), q));
            terms.text_neg += w.text_neg * l;
            grads
                .char_logits
                .index_axis_mut(Axis(0), q)
                .scaled_add(w.text_neg, &g);
        }
    }
    let positives = (batch.g() * batch.n).max(1) as f64;
    Ok(finish(terms, grads, positives))
}

/// Loss of the matching part: Hungarian routing, then positive terms for
/// matched queries and the negative focal branch for the rest.
pub fn matching_loss(
    pred: &PredictionSet,
    gt: &[TextInstance],
    w: &LossWeights,
    cost: &MatchCost,
) -> Result<(LossReport, MatchAssignment)> {
    w.validate()?;
    pred.validate()?;
    for &s in &pred.instance_scores {
        check_score(s)?;
    }
    let assignment = match_predictions(pred, gt, cost)?;
    let t = pred.points_per_query();
    let mut terms = LossTerms::default();
    let mut grads = PredictionGrads::like(pred);
    for q in 0..pred.len() {
        match assignment.get(q) {
            Some(m) => {
                let samples = gt_samples(&gt[m], t)?;
                positive_query_terms(pred, q, &gt[m], &samples, w, &mut terms, &mut grads)?;
            }
            None => negative_cls_term(pred, q, w, &mut terms, &mut grads),
        }
    }
    let positives = assignment.pairs().count().max(1) as f64;
    Ok((finish(terms, grads, positives), assignment))
}

/// Hungarian assignment of predictions to ground truth using the composite cost.
pub fn match_predictions(pred: &PredictionSet, gt: &[TextInstance], cost: &MatchCost) -> Result<MatchAssignment> {
    let centers: Vec<Vec<Point2>> = (0..pred.len()).map(|q| pred.center_of(q)).collect();
    let matrix = build_cost_matrix(&pred.instance_scores, &centers, gt, cost)?;
    if gt.is_empty() {
        return Ok(MatchAssignment(vec![None; pred.len()]));
    }
    hungarian_match(&matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dn_queries::{build_dn_batch, NoiseConfig};
    use crate::geometry::BezierCurve;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sum of path probabilities over every length-T label path that
    /// collapses to `target`.
    fn ctc_enumerate(logits: ArrayView2<f64>, target: &[usize]) -> f64 {
        let (steps, classes) = logits.dim();
        let blank = classes - 1;
        let probs = log_softmax(logits).mapv(f64::exp);
        let mut total = 0.0;
        let mut path = vec![0usize; steps];
        loop {
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &c in &path {
                if Some(c) != prev && c != blank {
                    collapsed.push(c);
                }
                prev = Some(c);
            }
            if collapsed == target {
                total += path.iter().enumerate().map(|(t, &c)| probs[[t, c]]).product::<f64>();
            }
            // Odometer increment.
            let mut i = 0;
            loop {
                if i == steps {
                    return -total.ln();
                }
                path[i] += 1;
                if path[i] < classes {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    fn random_logits(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, c), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn focal_examples() {
        let pos = focal_cls_loss(&[0.5], &[true], 0.25, 2.0).unwrap();
        let expected_pos = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((pos - expected_pos).abs() < 1e-15);
        assert!((pos - 0.04332).abs() < 1e-5);
        let neg = focal_cls_loss(&[0.5], &[false], 0.25, 2.0).unwrap();
        assert!((neg - 0.75 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((neg - 0.12996).abs() < 1e-5);
        assert!(focal_cls_loss(&[1.0 - 1e-12], &[true], 0.25, 2.0).unwrap() < 1e-20);
        assert!(focal_cls_loss(&[1.0], &[true], 0.25, 2.0).is_err());
        assert!(focal_cls_loss(&[0.0], &[false], 0.25, 2.0).is_err());
    }

    #[test]
    fn ctc_examples() {
        let uniform = Array2::<f64>::zeros((1, 3));
        let l = ctc_text_loss(uniform.view(), &[0]).unwrap();
        assert!((l - 3.0f64.ln()).abs() < 1e-12);
        assert!((l - ctc_enumerate(uniform.view(), &[0])).abs() < 1e-12);

        // Paths 00, 0-, -0 out of 9 equally likely ones.
        let uniform = Array2::<f64>::zeros((2, 3));
        let l = ctc_text_loss(uniform.view(), &[0]).unwrap();
        let oracle = ctc_enumerate(uniform.view(), &[0]);
        assert!((oracle - 3.0f64.ln()).abs() < 1e-12);
        assert!((l - oracle).abs() < 1e-12);

        let mut sharp = Array2::<f64>::zeros((3, 4));
        for (t, c) in [0usize, 3, 1].into_iter().enumerate() {
            sharp[[t, c]] = 40.0;
        }
        assert!(ctc_text_loss(sharp.view(), &[0, 1]).unwrap() < 1e-15);
    }

    #[test]
    fn ctc_rejects_infeasible() {
        let l = Array2::<f64>::zeros((2, 3));
        assert!(matches!(ctc_text_loss(l.view(), &[0, 0]), Err(Error::InfeasibleAlignment { .. })));
        assert!(ctc_text_loss(l.view(), &[0, 1, 0]).is_err());
        assert!(ctc_text_loss(l.view(), &[2]).is_err());
        assert!(ctc_text_loss(l.view(), &[1, 0]).is_ok());
    }

    #[test]
    fn ctc_matches_enumeration_on_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let t = rng.random_range(1..=4);
            let c = rng.random_range(1..=3);
            let logits = random_logits(&mut rng, t, c + 1);
            let len = rng.random_range(0..=t);
            let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..c)).collect();
            match ctc_text_loss(logits.view(), &target) {
                Ok(l) => assert!((l - ctc_enumerate(logits.view(), &target)).abs() < 1e-8),
                Err(_) => assert!(ctc_min_steps(&target) > t),
            }
        }
    }

    #[test]
    fn ctc_extra_blank_steps_do_not_hurt() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = random_logits(&mut rng, 3, 4);
        let base = ctc_text_loss(logits.view(), &[1, 2]).unwrap();
        let mut longer = Array2::<f64>::zeros((4, 4));
        longer.slice_mut(s![..3, ..]).assign(&logits);
        longer[[3, 3]] = 60.0;
        let extended = ctc_text_loss(longer.view(), &[1, 2]).unwrap();
        assert!(extended <= base + 1e-12);
        assert!((extended - ctc_enumerate(longer.view(), &[1, 2])).abs() < 1e-8);
    }

    #[test]
    fn background_ce_examples() {
        let zeros = Array2::<f64>::zeros((25, 38));
        assert!((ce_background_loss(zeros.view()) - 38f64.ln()).abs() < 1e-12);
        let mut sure = Array2::<f64>::zeros((4, 5));
        sure.column_mut(4).fill(60.0);
        assert!(ce_background_loss(sure.view()) < 1e-20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random_logits(&mut rng, 5, 6);
        let shifted = &l + 3.5;
        assert!((ce_background_loss(l.view()) - ce_background_loss(shifted.view())).abs() < 1e-12);
    }

    #[test]
    fn l1_examples() {
        let gt: Vec<Point2> = (0..25).map(|k| Point2::new(k as f64 * 0.01, 0.3)).collect();
        let same = Array2::from_shape_fn((25, 2), |(k, a)| if a == 0 { gt[k].x } else { gt[k].y });
        assert_eq!(coord_l1_loss(same.view(), &gt).unwrap(), 0.0);
        let shifted = Array2::from_shape_fn((25, 2), |(k, a)| if a == 0 { gt[k].x + 0.1 } else { gt[k].y + 0.2 });
        assert!((coord_l1_loss(shifted.view(), &gt).unwrap() - 7.5).abs() < 1e-12);
        assert!(coord_l1_loss(shifted.view(), &gt[..3]).is_err());

        let b = boundary_l1_loss(shifted.view(), same.view(), &gt, &gt).unwrap();
        assert!((b - coord_l1_loss(shifted.view(), &gt).unwrap()).abs() < 1e-15);
        assert_eq!(boundary_l1_loss(same.view(), same.view(), &gt, &gt).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = random_logits(&mut rng, 6, 2);
        let pts: Vec<Point2> = (0..6).map(|_| Point2::new(rng.random(), rng.random())).collect();
        let mut acc = 0.0;
        for k in 0..6 {
            acc += (pred[[k, 0]] - pts[k].x).abs();
            acc += (pred[[k, 1]] - pts[k].y).abs();
        }
        assert!((coord_l1_loss(pred.view(), &pts).unwrap() - acc).abs() < 1e-12);
    }

    #[test]
    fn greedy_decoding() {
        let one_hot = |seq: &[usize]| Array2::from_shape_fn((seq.len(), 4), |(t, c)| if seq[t] == c { 1.0 } else { 0.0 });
        assert_eq!(ctc_greedy_decode(one_hot(&[0, 0, 3, 0, 1, 1, 3]).view()), vec![0, 0, 1]);
        assert_eq!(ctc_greedy_decode(one_hot(&[3, 3, 3]).view()), Vec::<usize>::new());
        assert_eq!(ctc_greedy_decode(one_hot(&[2, 1, 2]).view()), vec![2, 1, 2]);
    }

    fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn focal_gradient() {
        for &s in &[0.03, 0.2, 0.5, 0.77, 0.96] {
            for pos in [true, false] {
                let (_, g) = focal_term(s, pos, 0.25, 2.0);
                let fd = central_diff(|x| focal_term(x, pos, 0.25, 2.0).0, s);
                assert!(rel_err(g, fd) < 1e-4, "s={s} pos={pos} {g} vs {fd}");
            }
        }
    }

    #[test]
    fn ctc_and_ce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let t = rng.random_range(2..=5);
            let c = rng.random_range(2..=5);
            let logits = random_logits(&mut rng, t, c + 1);
            let len = rng.random_range(1..=t.div_ceil(2));
            let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..c)).collect();
            let (_, g) = ctc_loss_and_grad(logits.view(), &target).unwrap();
            let (_, gce) = ce_background_loss_and_grad(logits.view());
            for i in 0..t {
                for k in 0..=c {
                    let probe = |x: f64, f: &dyn Fn(ArrayView2<f64>) -> f64| {
                        let mut l = logits.clone();
                        l[[i, k]] = x;
                        f(l.view())
                    };
                    let ctc = |v: ArrayView2<f64>| ctc_text_loss(v, &target).unwrap();
                    let fd = central_diff(|x| probe(x, &ctc), logits[[i, k]]);
                    assert!(rel_err(g[[i, k]], fd) < 1e-4, "ctc {} vs {}", g[[i, k]], fd);
                    let fd = central_diff(|x| probe(x, &|v| ce_background_loss(v)), logits[[i, k]]);
                    assert!(rel_err(gce[[i, k]], fd) < 1e-4);
                }
            }
        }
    }

    fn curve(x: f64, y: f64, dy: f64) -> BezierCurve {
        BezierCurve::new([0, 1, 2, 3].map(|i| Point2::new(x + 0.06 * i as f64, y + dy)))
    }

    fn instance(id: u64, x: f64, y: f64, text: Vec<usize>) -> TextInstance {
        TextInstance {
            id,
            top: curve(x, y, 0.0),
            bottom: curve(x, y, 0.05),
            transcript: text,
        }
    }

    fn random_predictions(rng: &mut ChaCha8Rng, q: usize, t: usize, classes: usize) -> PredictionSet {
        PredictionSet {
            instance_scores: (0..q).map(|_| rng.random_range(0.05..0.95)).collect(),
            char_logits: Array3::from_shape_fn((q, t, classes), |_| rng.random_range(-2.0..2.0)),
            center_points: Array3::from_shape_fn((q, t, 2), |_| rng.random()),
            boundary_top: Array3::from_shape_fn((q, t, 2), |_| rng.random()),
            boundary_bot: Array3::from_shape_fn((q, t, 2), |_| rng.random()),
        }
    }

    #[test]
    fn dn_loss_single_group_by_hand() {
        let gt = vec![instance(0, 0.2, 0.3, vec![1, 2])];
        let cfg = NoiseConfig {
            points_per_curve: 4,
            ..NoiseConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut batch = build_dn_batch(&gt, &cfg, 3, &mut rng).unwrap();
        batch.groups.truncate(1);
        let pred = random_predictions(&mut rng, 2, 4, 4);
        let w = LossWeights::default();
        let report = dn_loss(&pred, &batch, &gt, &w).unwrap();

        let c = sample_uniform(&gt[0].center(), 4).unwrap();
        let top = sample_uniform(&gt[0].top, 4).unwrap();
        let bot = sample_uniform(&gt[0].bottom, 4).unwrap();
        let l1 = |q: usize, a: &Array3<f64>, g: &[Point2]| -> f64 {
            (0..4).map(|k| (a[[q, k, 0]] - g[k].x).abs() + (a[[q, k, 1]] - g[k].y).abs()).sum()
        };
        let cls = focal_term(pred.instance_scores[0], true, 0.25, 2.0).0
            + focal_term(pred.instance_scores[1], false, 0.25, 2.0).0;
        let text_pos = ctc_enumerate(pred.char_logits.index_axis(Axis(0), 0), &[1, 2]);
        let lp = log_softmax(pred.char_logits.index_axis(Axis(0), 1));
        let text_neg = -(0..4).map(|k| lp[[k, 3]]).sum::<f64>() / 4.0;
        let coord = l1(0, &pred.center_points, &c);
        let bd = l1(0, &pred.boundary_top, &top) + l1(0, &pred.boundary_bot, &bot);
        let manual = 1.0 * cls + 0.5 * text_pos + 0.5 * text_neg + 1.0 * coord + 0.5 * bd;
        assert_eq!(report.normalizer, 1.0);
        assert!((report.total - manual).abs() < 1e-10, "{} vs {manual}", report.total);
        assert!((report.terms.total() - report.total).abs() < 1e-12);
    }

    #[test]
    fn dn_loss_ignores_negative_geometry_and_bct_identity() {
        let gt = vec![instance(0, 0.2, 0.3, vec![1, 2]), instance(1, 0.5, 0.6, vec![0])];
        let cfg = NoiseConfig {
            points_per_curve: 5,
            ..NoiseConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = build_dn_batch(&gt, &cfg, 3, &mut rng).unwrap();
        let pred = random_predictions(&mut rng, batch.len(), 5, 4);
        let w = LossWeights::default();
        let base = dn_loss(&pred, &batch, &gt, &w).unwrap();

        let mut moved = pred.clone();
        for q in 0..batch.len() {
            if !batch.row_role(q).0 {
                moved.center_points.index_axis_mut(Axis(0), q).mapv_inplace(|v| v + 0.3);
                moved.boundary_top.index_axis_mut(Axis(0), q).mapv_inplace(|v| v - 0.2);
            }
        }
        assert_eq!(dn_loss(&moved, &batch, &gt, &w).unwrap().total, base.total);

        let no_bct = dn_loss(&pred, &batch, &gt, &LossWeights { text_neg: 0.0, ..w }).unwrap();
        let ce_sum: f64 = (0..batch.len())
            .filter(|&q| !batch.row_role(q).0)
            .map(|q| ce_background_loss(pred.char_logits.index_axis(Axis(0), q)))
            .sum();
        let diff = base.total - no_bct.total;
        assert!((diff - w.text_neg * ce_sum / base.normalizer).abs() < 1e-12);
    }

    #[test]
    fn dn_loss_gradient_matches_finite_differences() {
        let gt = vec![instance(0, 0.2, 0.3, vec![1, 2]), instance(1, 0.5, 0.6, vec![0])];
        let cfg = NoiseConfig {
            points_per_curve: 4,
            ..NoiseConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = build_dn_batch(&gt, &cfg, 3, &mut rng).unwrap();
        let pred = random_predictions(&mut rng, batch.len(), 4, 4);
        let w = LossWeights::default();
        let g = dn_loss(&pred, &batch, &gt, &w).unwrap().grads;
        let f = |p: &PredictionSet| dn_loss(p, &batch, &gt, &w).unwrap().total;
        let probe = |set: &dyn Fn(&mut PredictionSet, f64), x0: f64| {
            central_diff(
                |x| {
                    let mut a = pred.clone();
                    set(&mut a, x);
                    f(&a)
                },
                x0,
            )
        };
        for q in [0usize, 2, 3] {
            let fd = probe(&|a, x| a.instance_scores[q] = x, pred.instance_scores[q]);
            assert!(rel_err(g.instance_scores[q], fd) < 1e-4);
            for k in 0..4 {
                let fd = probe(&|a, x| a.char_logits[[q, k, 1]] = x, pred.char_logits[[q, k, 1]]);
                assert!(rel_err(g.char_logits[[q, k, 1]], fd) < 1e-4);
                let fd = probe(&|a, x| a.center_points[[q, k, 0]] = x, pred.center_points[[q, k, 0]]);
                assert!(rel_err(g.center_points[[q, k, 0]], fd) < 1e-4);
                let fd = probe(&|a, x| a.boundary_bot[[q, k, 1]] = x, pred.boundary_bot[[q, k, 1]]);
                assert!(rel_err(g.boundary_bot[[q, k, 1]], fd) < 1e-4);
            }
        }
    }

    #[test]
    fn dn_loss_layout_errors() {
        let gt = vec![instance(0, 0.2, 0.3, vec![1])];
        let cfg = NoiseConfig {
            points_per_curve: 4,
            ..NoiseConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = build_dn_batch(&gt, &cfg, 3, &mut rng).unwrap();
        let pred = random_predictions(&mut rng, batch.len() - 1, 4, 4);
        assert!(dn_loss(&pred, &batch, &gt, &LossWeights::default()).is_err());
    }

    #[test]
    fn matching_loss_cases() {
        let w = LossWeights::default();
        let cost = MatchCost::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = random_predictions(&mut rng, 4, 5, 4);
        let (report, assignment) = matching_loss(&pred, &[], &w, &cost).unwrap();
        assert!(assignment.pairs().next().is_none());
        let neg = focal_cls_loss(&pred.instance_scores, &[false; 4], 0.25, 2.0).unwrap();
        assert!((report.total - neg).abs() < 1e-12);

        // Single prediction sitting exactly on the single ground truth.
        let gt = vec![instance(0, 0.3, 0.4, vec![2])];
        let c = sample_uniform(&gt[0].center(), 5).unwrap();
        let top = sample_uniform(&gt[0].top, 5).unwrap();
        let bot = sample_uniform(&gt[0].bottom, 5).unwrap();
        let to3 = |p: &[Point2]| Array3::from_shape_fn((1, 5, 2), |(_, k, a)| if a == 0 { p[k].x } else { p[k].y });
        let exact = PredictionSet {
            instance_scores: vec![0.9],
            char_logits: Array3::zeros((1, 5, 4)),
            center_points: to3(&c),
            boundary_top: to3(&top),
            boundary_bot: to3(&bot),
        };
        let (report, _) = matching_loss(&exact, &gt, &w, &cost).unwrap();
        assert_eq!(report.terms.coord, 0.0);
        assert_eq!(report.terms.bd, 0.0);
    }

    #[test]
    fn matching_routes_like_brute_force() {
        let w = LossWeights::default();
        let cost = MatchCost::default();
        let gt = vec![instance(0, 0.1, 0.2, vec![1]), instance(1, 0.6, 0.7, vec![0, 2])];
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = random_predictions(&mut rng, 3, 4, 4);
            let (_, w_match) = matching_loss(&pred, &gt, &w, &cost).unwrap();
            let centers: Vec<Vec<Point2>> = (0..3).map(|q| pred.center_of(q)).collect();
            let m = build_cost_matrix(&pred.instance_scores, &centers, &gt, &cost).unwrap();
            let mut best = (f64::INFINITY, (0, 0));
            for a in 0..3 {
                for b in 0..3 {
                    if a != b && m[a][0] + m[b][1] < best.0 {
                        best = (m[a][0] + m[b][1], (a, b));
                    }
                }
            }
            assert_eq!(w_match.get(best.1 .0), Some(0));
            assert_eq!(w_match.get(best.1 .1), Some(1));
        }
    }

    #[test]
    fn losses_are_finite_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let gt = vec![instance(0, 0.1, 0.2, vec![1, 1]), instance(1, 0.6, 0.7, vec![0, 2, 1])];
        for _ in 0..20 {
            let pred = random_predictions(&mut rng, 5, 6, 4);
            let (r, _) = matching_loss(&pred, &gt, &LossWeights::default(), &MatchCost::default()).unwrap();
            assert!(r.total.is_finite() && r.total >= 0.0);
            for v in [r.terms.cls, r.terms.text_pos, r.terms.coord, r.terms.bd] {
                assert!(v >= 0.0);
            }
        }
    }
}
