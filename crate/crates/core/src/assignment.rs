//! Bipartite matching between predictions and ground truth, and the
//! matching-instability count between two training snapshots.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::geometry::{sample_uniform, Point2, TextInstance};

/// Weights of the composite matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchCost {
    pub weight_cls: f64,
    pub weight_coord: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for MatchCost {
    fn default() -> Self {
        Self {
            weight_cls: 1.0,
            weight_coord: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl MatchCost {
    pub fn validate(&self) -> Result<()> {
        if self.weight_cls < 0.0 || self.weight_coord < 0.0 {
            return Err(invalid("match_cost", "weights must be non-negative"));
        }
        if self.weight_cls == 0.0 && self.weight_coord == 0.0 {
            return Err(invalid("match_cost", "weights must not both be zero"));
        }
        Ok(())
    }
}

/// `W[n] = Some(m)` when prediction `n` is matched to ground truth `m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchAssignment(pub Vec<Option<usize>>);

impl MatchAssignment {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, pred: usize) -> Option<usize> {
        self.0[pred]
    }

    /// Index vector with `-1` for unmatched predictions.
    pub fn to_indices(&self) -> Vec<i64> {
        self.0.iter().map(|m| m.map_or(-1, |m| m as i64)).collect()
    }

    pub fn from_indices(w: &[i64]) -> Self {
        Self(w.iter().map(|&m| usize::try_from(m).ok()).collect())
    }

    /// `(prediction, ground truth)` pairs ordered by prediction.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().enumerate().filter_map(|(n, m)| m.map(|m| (n, m)))
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs().map(|(n, m)| cost[n][m]).sum()
    }
}

/// Minimum-cost one-to-one assignment for an `N_pred x M_gt` cost matrix.
///
/// Every ground truth is matched when `N_pred >= M_gt`; otherwise every
/// prediction is. Ties resolve towards lower prediction indices.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchAssignment> {
    let n_pred = cost.len();
    let m_gt = cost.first().map_or(0, Vec::len);
    if let Some(row) = cost.iter().find(|r| r.len() != m_gt) {
        return Err(shape("cost matrix", format!("{m_gt} columns"), format!("{} columns", row.len())));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    let mut w = vec![None; n_pred];
    if n_pred == 0 || m_gt == 0 {
        return Ok(MatchAssignment(w));
    }
    if m_gt <= n_pred {
        // Rows are ground truths, columns predictions.
        let cols = solve_rows_le_cols(m_gt, n_pred, |gt, pred| cost[pred][gt]);
        for (gt, pred) in cols.into_iter().enumerate() {
            w[pred] = Some(gt);
        }
    } else {
        let cols = solve_rows_le_cols(n_pred, m_gt, |pred, gt| cost[pred][gt]);
        for (pred, gt) in cols.into_iter().enumerate() {
            w[pred] = Some(gt);
        }
    }
    Ok(MatchAssignment(w))
}

/// Shortest augmenting path Hungarian method for `rows <= cols`.
/// Returns the column assigned to each row.
fn solve_rows_le_cols(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    debug_assert!(rows <= cols);
    let inf = f64::INFINITY;
    // 1-based potentials; index 0 is the virtual source column.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];

    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut out = vec![0usize; rows];
    for j in 1..=cols {
        if owner[j] > 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Classification part of the matching cost: focal positive cost minus
/// focal negative cost.
pub fn focal_match_cost(score: f64, alpha: f64, gamma: f64) -> f64 {
    let p = score.clamp(1e-8, 1.0 - 1e-8);
    let pos = alpha * (1.0 - p).powf(gamma) * -p.ln();
    let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p).ln();
    pos - neg
}

/// Mean over points of `|dx| + |dy|`.
pub fn mean_l1(a: &[Point2], b: &[Point2]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape("point sequences", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Empty("point sequence"));
    }
    Ok(a.iter().zip(b).map(|(p, q)| p.l1(*q)).sum::<f64>() / a.len() as f64)
}

/// Cost of assigning prediction `n` (row) to ground truth `m` (column).
pub fn build_cost_matrix(
    pred_scores: &[f64],
    pred_points: &[Vec<Point2>],
    gt: &[TextInstance],
    cfg: &MatchCost,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if pred_scores.len() != pred_points.len() {
        return Err(shape("predictions", pred_scores.len(), pred_points.len()));
    }
    let Some(t) = pred_points.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    if let Some(p) = pred_points.iter().find(|p| p.len() != t) {
        return Err(shape("prediction points", t, p.len()));
    }
    let gt_points = gt
        .iter()
        .map(|g| sample_uniform(&g.center(), t))
        .collect::<Result<Vec<_>>>()?;

    pred_scores
        .iter()
        .zip(pred_points)
        .map(|(&s, pts)| {
            let cls = cfg.weight_cls * focal_match_cost(s, cfg.focal_alpha, cfg.focal_gamma);
            gt_points
                .iter()
                .map(|g| Ok(cls + cfg.weight_coord * mean_l1(pts, g)?))
                .collect()
        })
        .collect()
}

/// Number of predictions whose matched ground truth changed.
pub fn instability(prev: &MatchAssignment, next: &MatchAssignment) -> Result<usize> {
    if prev.len() != next.len() {
        return Err(shape("assignments", prev.len(), next.len()));
    }
    Ok(prev.0.iter().zip(&next.0).filter(|(a, b)| a != b).count())
}
