//! One optimization step over a mini-batch of scenes.

use ndarray::Array2;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, OptimConfig};
use super::{Decoder, DnInput};
use crate::assignment::{MatchAssignment, MatchCost};
use crate::dn_queries::{build_dn_batch, NoiseConfig};
use crate::error::{invalid, shape, Result};
use crate::losses::{dn_loss, matching_loss, LossTerms, LossWeights, PredictionGrads};
use crate::synth::Scene;

/// Which parts of denoising training are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Denoising queries at all.
    pub dn: bool,
    /// Noise on control points rather than on sampled points.
    pub bcp: bool,
    /// Masked character sliding for denoising content.
    pub mcs: bool,
    /// Background cross-entropy on negative queries.
    pub bct: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            dn: true,
            bcp: true,
            mcs: true,
            bct: true,
        }
    }
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        dn: false,
        bcp: false,
        mcs: false,
        bct: false,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.dn && (self.bcp || self.mcs || self.bct) {
            return Err(invalid("ablation", "bcp, mcs and bct require dn"));
        }
        Ok(())
    }

    pub fn noise(&self, base: &NoiseConfig) -> NoiseConfig {
        NoiseConfig {
            control_point_noise: self.bcp,
            char_sliding: self.mcs,
            ..base.clone()
        }
    }

    pub fn weights(&self, base: &LossWeights) -> LossWeights {
        LossWeights {
            text_neg: if self.bct { base.text_neg } else { 0.0 },
            ..*base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub noise: NoiseConfig,
    pub weights: LossWeights,
    pub cost: MatchCost,
    pub optim: OptimConfig,
    pub ablation: Ablation,
    pub batch_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            noise: NoiseConfig::default(),
            weights: LossWeights::default(),
            cost: MatchCost::default(),
            optim: OptimConfig::default(),
            ablation: Ablation::default(),
            batch_size: 1,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.weights.validate()?;
        self.cost.validate()?;
        self.optim.validate()?;
        self.ablation.validate()?;
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Loss terms of one step, averaged over the scenes of the batch.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub dn: Option<LossTerms>,
    pub matching: LossTerms,
    pub grad_norm: f64,
    pub lr: f64,
}

fn add_terms(acc: &mut LossTerms, t: &LossTerms, k: f64) {
    acc.cls += k * t.cls;
    acc.text_pos += k * t.text_pos;
    acc.text_neg += k * t.text_neg;
    acc.coord += k * t.coord;
    acc.bd += k * t.bd;
}

/// Model, optimizer and the random streams that drive training.
pub struct Trainer {
    pub model: Decoder,
    pub opt: AdamW,
    pub settings: TrainSettings,
    noise_rng: ChaCha8Rng,
    order_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(model: Decoder, settings: TrainSettings, seed: u64) -> Result<Self> {
        settings.validate()?;
        if settings.noise.points_per_curve != model.cfg.points_per_curve {
            return Err(shape(
                "points per curve",
                model.cfg.points_per_curve,
                settings.noise.points_per_curve,
            ));
        }
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let opt = AdamW::new(settings.optim.clone(), &model.params)?;
        Ok(Self {
            model,
            opt,
            settings,
            noise_rng: stream(0),
            order_rng: stream(1),
            dropout_rng: stream(2),
            order: Vec::new(),
            cursor: 0,
        })
    }

    /// Next `batch_size` scene indices from a reshuffled pass over `count` scenes.
    pub fn next_batch(&mut self, count: usize) -> Vec<usize> {
        (0..self.settings.batch_size)
            .map(|_| {
                if self.cursor >= self.order.len() {
                    self.order = (0..count).collect();
                    self.order.shuffle(&mut self.order_rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// Forward, loss and backward for one scene; gradients are added into `acc`.
    fn scene_grads(&mut self, scene: &Scene, acc: &mut [Array2<f64>], k: f64) -> Result<(Option<LossTerms>, LossTerms)> {
        let s = &self.settings;
        let weights = s.ablation.weights(&s.weights);
        let batch = if s.ablation.dn && !scene.instances.is_empty() {
            let noise = s.ablation.noise(&s.noise);
            Some(build_dn_batch(&scene.instances, &noise, self.model.cfg.background(), &mut self.noise_rng)?)
        } else {
            None
        };
        let input = batch.as_ref().map(DnInput::from);
        let dropout = (self.model.cfg.dropout > 0.0).then_some(&mut self.dropout_rng);
        let pass = self.model.forward(input.as_ref(), &scene.features, dropout)?;

        let mut grads = PredictionGrads::like(&pass.predictions);
        let dn_terms = match &batch {
            Some(b) => {
                let report = dn_loss(&pass.dn_predictions(), b, &scene.instances, &weights)?;
                grads.add_rows(0, &report.grads);
                Some(report.terms)
            }
            None => None,
        };
        let (report, _) = matching_loss(&pass.matching_predictions(), &scene.instances, &weights, &s.cost)?;
        grads.add_rows(pass.layout.dn_rows(), &report.grads);
        for (a, g) in acc.iter_mut().zip(pass.backward(&grads)?) {
            a.scaled_add(k, &g);
        }
        Ok((dn_terms, report.terms))
    }

    /// Trains on `scenes` (one mini-batch) at learning rate `lr`.
    pub fn step(&mut self, scenes: &[&Scene], lr: f64) -> Result<StepOutcome> {
        if scenes.is_empty() {
            return Err(invalid("scenes", "empty batch"));
        }
        let k = 1.0 / scenes.len() as f64;
        let mut acc: Vec<Array2<f64>> = self.model.params.values().iter().map(|p| Array2::zeros(p.dim())).collect();
        let mut dn_total: Option<LossTerms> = None;
        let mut match_total = LossTerms::default();
        for scene in scenes {
            let (dn, m) = self.scene_grads(scene, &mut acc, k)?;
            if let Some(dn) = dn {
                add_terms(dn_total.get_or_insert_with(LossTerms::default), &dn, k);
            }
            add_terms(&mut match_total, &m, k);
        }
        let grad_norm = self.opt.step(&mut self.model.params, &acc, lr)?;
        Ok(StepOutcome {
            dn: dn_total,
            matching: match_total,
            grad_norm,
            lr,
        })
    }

    /// Matching-part assignment of every scene under the current parameters.
    pub fn assignments(&self, scenes: &[Scene]) -> Result<Vec<MatchAssignment>> {
        scenes
            .iter()
            .map(|s| {
                let pred = self.model.predict(&s.features)?;
                crate::losses::match_predictions(&pred, &s.instances, &self.settings.cost)
            })
            .collect()
    }
}
