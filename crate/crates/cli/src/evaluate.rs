//! Detection and end-to-end scoring.
//!
//! A prediction detects a ground-truth instance when the mean L1 distance
//! between their sampled top and bottom boundaries is below a threshold,
//! with predictions and instances paired one-to-one by the Hungarian method.
//! An end-to-end hit additionally requires the greedy CTC transcript to equal
//! the ground truth exactly.

use anyhow::Result;
use curvedn_core::assignment::{hungarian_match, mean_l1};
use curvedn_core::decoder::Decoder;
use curvedn_core::geometry::{sample_uniform, TextInstance};
use curvedn_core::losses::{ctc_greedy_decode, PredictionSet};
use curvedn_core::synth::Scene;
use ndarray::Axis;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub predictions: usize,
    pub ground_truth: usize,
    pub detected: usize,
    pub recognized: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.predictions += o.predictions;
        self.ground_truth += o.ground_truth;
        self.detected += o.detected;
        self.recognized += o.recognized;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(hits: usize, predictions: usize, ground_truth: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(hits, predictions);
        let recall = ratio(hits, ground_truth);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub counts: Counts,
    pub detection: Prf,
    pub end_to_end: Prf,
}

impl EvalReport {
    pub fn from_counts(images: usize, counts: Counts) -> Self {
        Self {
            images,
            counts,
            detection: Prf::from_counts(counts.detected, counts.predictions, counts.ground_truth),
            end_to_end: Prf::from_counts(counts.recognized, counts.predictions, counts.ground_truth),
        }
    }
}

/// Mean of the top and bottom boundary L1 distances.
fn boundary_distance(pred: &PredictionSet, q: usize, gt: &TextInstance, t: usize) -> Result<f64> {
    let top = sample_uniform(&gt.top, t)?;
    let bot = sample_uniform(&gt.bottom, t)?;
    Ok(0.5 * (mean_l1(&pred.top_of(q), &top)? + mean_l1(&pred.bot_of(q), &bot)?))
}

/// Scores the predictions of one image.
pub fn score_image(pred: &PredictionSet, gt: &[TextInstance], score_threshold: f64, match_threshold: f64) -> Result<Counts> {
    let kept: Vec<usize> = (0..pred.len()).filter(|&q| pred.instance_scores[q] > score_threshold).collect();
    let mut counts = Counts {
        predictions: kept.len(),
        ground_truth: gt.len(),
        ..Counts::default()
    };
    if kept.is_empty() || gt.is_empty() {
        return Ok(counts);
    }
    let t = pred.points_per_query();
    let cost = kept
        .iter()
        .map(|&q| gt.iter().map(|g| boundary_distance(pred, q, g, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let assignment = hungarian_match(&cost)?;
    for (row, m) in assignment.pairs() {
        if cost[row][m] < match_threshold {
            counts.detected += 1;
            let text = ctc_greedy_decode(pred.char_logits.index_axis(Axis(0), kept[row]));
            let limit = gt[m].transcript.len().min(t);
            if text == gt[m].transcript[..limit] {
                counts.recognized += 1;
            }
        }
    }
    Ok(counts)
}

pub fn evaluate(model: &Decoder, scenes: &[Scene], score_threshold: f64, match_threshold: f64) -> Result<EvalReport> {
    let mut counts = Counts::default();
    for scene in scenes {
        let pred = model.predict(&scene.features)?;
        counts += score_image(&pred, &scene.instances, score_threshold, match_threshold)?;
    }
    Ok(EvalReport::from_counts(scenes.len(), counts))
}

/// Predictions that reproduce `gt` exactly: confident scores, sampled
/// boundaries and one-hot logits spelling each transcript with blanks between
/// characters.
pub fn predictions_from_ground_truth(gt: &[TextInstance], t: usize, classes: usize) -> Result<PredictionSet> {
    let q = gt.len();
    let blank = classes - 1;
    let mut logits = ndarray::Array3::zeros((q, t, classes));
    let mut center = ndarray::Array3::zeros((q, t, 2));
    let mut top = ndarray::Array3::zeros((q, t, 2));
    let mut bot = ndarray::Array3::zeros((q, t, 2));
    for (i, g) in gt.iter().enumerate() {
        let mut slots = vec![blank; t];
        for (k, &c) in g.transcript.iter().enumerate() {
            if 2 * k < t {
                slots[2 * k] = c;
            }
        }
        for (k, &c) in slots.iter().enumerate() {
            logits[[i, k, c]] = 10.0;
        }
        for (arr, curve) in [(&mut center, g.center()), (&mut top, g.top), (&mut bot, g.bottom)] {
            for (k, p) in sample_uniform(&curve, t)?.iter().enumerate() {
                arr[[i, k, 0]] = p.x;
                arr[[i, k, 1]] = p.y;
            }
        }
    }
    Ok(PredictionSet {
        instance_scores: vec![0.99; q],
        char_logits: logits,
        center_points: center,
        boundary_top: top,
        boundary_bot: bot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use curvedn_core::decoder::DecoderConfig;
    use curvedn_core::synth::{generate_scene, SceneSpec};

    fn spec() -> SceneSpec {
        SceneSpec {
            alphabet_size: 6,
            transcript_len: [1, 4],
            ..SceneSpec::default()
        }
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let scene = generate_scene(&spec(), 2).unwrap();
        let pred = predictions_from_ground_truth(&scene.instances, 8, 7).unwrap();
        let c = score_image(&pred, &scene.instances, 0.5, 0.05).unwrap();
        let r = EvalReport::from_counts(1, c);
        assert_eq!(r.detection, Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
        assert_eq!(r.end_to_end.f1, 1.0);
    }

    #[test]
    fn empty_predictions_have_zero_recall() {
        let scene = generate_scene(&spec(), 2).unwrap();
        let mut pred = predictions_from_ground_truth(&scene.instances, 8, 7).unwrap();
        pred.instance_scores.iter_mut().for_each(|s| *s = 0.1);
        let r = EvalReport::from_counts(1, score_image(&pred, &scene.instances, 0.5, 0.05).unwrap());
        assert_eq!(r.counts.predictions, 0);
        assert_eq!(r.detection.recall, 0.0);
        assert_eq!(r.end_to_end.recall, 0.0);
    }

    #[test]
    fn wrong_transcript_is_detected_but_not_recognized() {
        let scene = generate_scene(&spec(), 3).unwrap();
        let mut pred = predictions_from_ground_truth(&scene.instances, 8, 7).unwrap();
        pred.char_logits.index_axis_mut(Axis(0), 0).fill(0.0);
        pred.char_logits[[0, 0, 6]] = 1.0;
        let c = score_image(&pred, &scene.instances, 0.5, 0.05).unwrap();
        assert_eq!(c.detected, scene.instances.len());
        assert_eq!(c.recognized, scene.instances.len() - 1);
    }

    #[test]
    fn reversed_boundaries_do_not_match() {
        let scene = generate_scene(&spec(), 4).unwrap();
        let flipped: Vec<TextInstance> = scene
            .instances
            .iter()
            .map(|i| TextInstance {
                top: i.bottom.reversed(),
                bottom: i.top.reversed(),
                ..i.clone()
            })
            .collect();
        let pred = predictions_from_ground_truth(&flipped, 8, 7).unwrap();
        let c = score_image(&pred, &scene.instances, 0.5, 0.05).unwrap();
        assert_eq!(c.detected, 0);
    }

    #[test]
    fn random_model_report_is_consistent() {
        let sp = spec();
        let scenes: Vec<Scene> = (0..10).map(|i| generate_scene(&sp, i).unwrap()).collect();
        let model = Decoder::new(DecoderConfig {
            dim: 16,
            heads: 2,
            ffn_dim: 16,
            points_per_curve: 6,
            alphabet_size: 6,
            matching_queries: 10,
            feature_channels: sp.channels(),
            ..DecoderConfig::default()
        })
        .unwrap();
        // A low threshold keeps the untrained queries in play.
        let r = evaluate(&model, &scenes, 0.001, 0.05).unwrap();
        for p in [r.detection, r.end_to_end] {
            for v in [p.precision, p.recall, p.f1] {
                assert!((0.0..=1.0).contains(&v));
            }
            let hm = if p.precision + p.recall > 0.0 {
                2.0 * p.precision * p.recall / (p.precision + p.recall)
            } else {
                0.0
            };
            assert!((p.f1 - hm).abs() < 1e-12);
        }
        assert_eq!(r.counts.predictions, 100);
        assert_eq!(r.counts.ground_truth, 70);
    }
}
