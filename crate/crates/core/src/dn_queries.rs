//! Construction of the denoising part of the decoder queries.
//!
//! Positional queries come from ground-truth center curves whose control
//! points are jittered by a fraction of the instance half-height (positive
//! regime) or pushed beyond it (negative regime). Content queries come from
//! mask character sliding: each transcript character is cloned into a
//! contiguous run so the `T` query slots are covered, then some clones are
//! turned into background and some characters are flipped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{control_point_distances, sample_uniform, BezierCurve, Point2, TextInstance};

/// Cap on denoising groups per image.
pub const MAX_GROUPS: usize = 5;
/// Instance budget that the group count is derived from.
pub const GROUP_BUDGET: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Probability that a foreground character is flipped to another one.
    pub lambda_flip: f64,
    /// Probability that a surplus clone inside a run becomes background.
    pub mask_prob: f64,
    pub max_instances: usize,
    /// Points per curve, which is also the maximum transcript length.
    pub points_per_curve: usize,
    pub rng_seed: u64,
    /// Jitter the Bezier control points (true) or the sampled points (false).
    pub control_point_noise: bool,
    /// Use character sliding (true) or left-aligned, background-padded text.
    pub char_sliding: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            lambda_flip: 0.4,
            mask_prob: 0.5,
            max_instances: 100,
            points_per_curve: 25,
            rng_seed: 0,
            control_point_noise: true,
            char_sliding: true,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("lambda_flip", self.lambda_flip), ("mask_prob", self.mask_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(name, format!("{p} is not a probability")));
            }
        }
        if self.points_per_curve < 2 {
            return Err(invalid("points_per_curve", "must be at least 2"));
        }
        if self.max_instances == 0 {
            return Err(invalid("max_instances", "must be at least 1"));
        }
        Ok(())
    }
}

/// One denoising group: `n` positive rows followed by `n` negative rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DnGroup {
    pub positive_points: Vec<Vec<Point2>>,
    pub negative_points: Vec<Vec<Point2>>,
    pub positive_chars: Vec<Vec<usize>>,
    /// Always all background.
    pub negative_chars: Vec<Vec<usize>>,
    pub source_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnQueryBatch {
    pub groups: Vec<DnGroup>,
    /// Instances used per group, after capping.
    pub n: usize,
    pub points_per_curve: usize,
    pub background: usize,
}

impl DnQueryBatch {
    pub fn g(&self) -> usize {
        self.groups.len()
    }

    /// Total denoising rows, `g * 2n`.
    pub fn len(&self) -> usize {
        self.groups.len() * 2 * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reference points of every row in layout order (group-major,
    /// positive rows then negative rows).
    pub fn row_points(&self) -> impl Iterator<Item = &Vec<Point2>> {
        self.groups
            .iter()
            .flat_map(|g| g.positive_points.iter().chain(&g.negative_points))
    }

    /// Character indices of every row in layout order.
    pub fn row_chars(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.groups
            .iter()
            .flat_map(|g| g.positive_chars.iter().chain(&g.negative_chars))
    }

    /// For row `r` in layout order: `(is_positive, instance index)`.
    pub fn row_role(&self, r: usize) -> (bool, usize) {
        let within = r % (2 * self.n);
        (within < self.n, within % self.n)
    }
}

/// Number of denoising groups for an image with `n` instances:
/// `max(1, min(5, floor(100 / n)))`.
pub fn dynamic_groups(n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::Empty("instances"));
    }
    Ok((GROUP_BUDGET / n).clamp(1, MAX_GROUPS))
}

fn signed<R: Rng + ?Sized>(rng: &mut R, magnitude: f64) -> f64 {
    if rng.random_bool(0.5) {
        -magnitude
    } else {
        magnitude
    }
}

/// Draws one offset given per-axis scales `(dx, dy)`.
fn regime_offset<R: Rng + ?Sized>(rng: &mut R, (dx, dy): (f64, f64), positive: bool) -> Point2 {
    let base = if positive { 0.0 } else { 1.0 };
    let alpha: f64 = rng.random();
    let beta: f64 = rng.random();
    let ox = signed(rng, (alpha + base) * dx);
    let oy = signed(rng, (beta + base) * dy);
    Point2::new(ox, oy)
}

/// Control-point offsets for one instance.
///
/// Positive regime: `|offset| <= D` per axis. Negative regime:
/// `D <= |offset| <= 2D`. `D` is the per-axis distance between the center
/// and top control points.
pub fn noise_offsets<R: Rng + ?Sized>(
    center: &BezierCurve,
    top: &BezierCurve,
    positive: bool,
    rng: &mut R,
) -> [Point2; 4] {
    let dist = control_point_distances(center, top);
    dist.map(|d| regime_offset(rng, d, positive))
}

/// Noised reference points for one instance.
///
/// With `control_point_noise` the center curve's control points are
/// perturbed and the perturbed curve is sampled; otherwise the clean curve is
/// sampled and each sample is perturbed using the distance between the
/// center and top curves at the same parameter.
pub fn noised_positional_points<R: Rng + ?Sized>(
    instance: &TextInstance,
    positive: bool,
    points_per_curve: usize,
    control_point_noise: bool,
    rng: &mut R,
) -> Result<Vec<Point2>> {
    let center = instance.center();
    if control_point_noise {
        let offsets = noise_offsets(&center, &instance.top, positive, rng);
        sample_uniform(&center.offset(&offsets), points_per_curve)
    } else {
        let centers = sample_uniform(&center, points_per_curve)?;
        let tops = sample_uniform(&instance.top, points_per_curve)?;
        Ok(centers
            .into_iter()
            .zip(tops)
            .map(|(c, t)| {
                let d = ((t.x - c.x).abs(), (t.y - c.y).abs());
                c + regime_offset(rng, d, positive)
            })
            .collect())
    }
}

/// Run lengths of character sliding: `T / t` clones each, with the first
/// `T mod t` characters receiving one extra.
pub fn sliding_run_lengths(t: usize, slots: usize) -> Vec<usize> {
    let base = slots / t;
    let extra = slots % t;
    (0..t).map(|i| base + usize::from(i < extra)).collect()
}

/// Mask character sliding.
///
/// `background` is the background class index, equal to the alphabet size.
/// Transcripts longer than `slots` are truncated. With `sliding == false`
/// the transcript is written left-aligned and padded with background.
pub fn mask_character_sliding<R: Rng + ?Sized>(
    transcript: &[usize],
    slots: usize,
    mask_prob: f64,
    lambda_flip: f64,
    background: usize,
    sliding: bool,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if transcript.is_empty() {
        return Err(Error::Empty("transcript"));
    }
    if let Some(&c) = transcript.iter().find(|&&c| c >= background) {
        return Err(invalid("transcript", format!("class {c} is not a foreground character")));
    }
    let text = &transcript[..transcript.len().min(slots)];

    let mut out = Vec::with_capacity(slots);
    if sliding {
        for (&ch, run) in text.iter().zip(sliding_run_lengths(text.len(), slots)) {
            let keeper = rng.random_range(0..run);
            for k in 0..run {
                let masked = k != keeper && rng.random_bool(mask_prob);
                out.push(if masked { background } else { ch });
            }
        }
    } else {
        out.extend_from_slice(text);
        out.resize(slots, background);
    }

    if lambda_flip > 0.0 && background > 1 {
        for c in out.iter_mut().filter(|c| **c != background) {
            if rng.random_bool(lambda_flip) {
                // Uniform over the other `background - 1` characters.
                let pick = rng.random_range(0..background - 1);
                *c = if pick >= *c { pick + 1 } else { pick };
            }
        }
    }
    Ok(out)
}

/// Builds all denoising groups for one image.
///
/// `background` is the alphabet size `C`.
pub fn build_dn_batch<R: Rng + ?Sized>(
    instances: &[TextInstance],
    cfg: &NoiseConfig,
    background: usize,
    rng: &mut R,
) -> Result<DnQueryBatch> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::Empty("instances"));
    }
    let used = &instances[..instances.len().min(cfg.max_instances)];
    let n = used.len();
    let g = dynamic_groups(n)?;
    let t = cfg.points_per_curve;

    let mut groups = Vec::with_capacity(g);
    for _ in 0..g {
        let mut group = DnGroup {
            positive_points: Vec::with_capacity(n),
            negative_points: Vec::with_capacity(n),
            positive_chars: Vec::with_capacity(n),
            negative_chars: vec![vec![background; t]; n],
            source_ids: used.iter().map(|i| i.id).collect(),
        };
        for inst in used {
            group.positive_points.push(noised_positional_points(
                inst,
                true,
                t,
                cfg.control_point_noise,
                rng,
            )?);
            group.negative_points.push(noised_positional_points(
                inst,
                false,
                t,
                cfg.control_point_noise,
                rng,
            )?);
            group.positive_chars.push(mask_character_sliding(
                &inst.transcript,
                t,
                cfg.mask_prob,
                cfg.lambda_flip,
                background,
                cfg.char_sliding,
                rng,
            )?);
        }
        groups.push(group);
    }
    Ok(DnQueryBatch {
        groups,
        n,
        points_per_curve: t,
        background,
    })
}
