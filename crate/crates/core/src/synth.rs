//! Deterministic synthetic curved-text scenes.
//!
//! Each image holds a handful of non-overlapping cubic-Bezier text
//! instances with random transcripts. Some instances are "inverse": their
//! reading direction runs right to left and upside down. A coarse
//! rasterization of the instances stands in for backbone features.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{BezierCurve, Point2, TextInstance};

pub const DATASET_FORMAT: &str = "curvedn-dataset";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Minimum distance between the top and bottom boundaries.
pub const MIN_HEIGHT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Inclusive `[min, max]`.
    pub instances_per_image: [usize; 2],
    pub alphabet_size: usize,
    /// Inclusive `[min, max]` transcript length.
    pub transcript_len: [usize; 2],
    /// Fraction of instances generated with reversed reading direction.
    pub inverse_fraction: f64,
    /// Perpendicular bend of the inner control points, relative to length.
    pub curvature: [f64; 2],
    pub text_length: [f64; 2],
    pub text_height: [f64; 2],
    /// Feature map resolution (cells per side).
    pub grid: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            instances_per_image: [7, 7],
            alphabet_size: 37,
            transcript_len: [3, 8],
            inverse_fraction: 0.4,
            curvature: [0.0, 0.25],
            text_length: [0.22, 0.4],
            text_height: [0.05, 0.09],
            grid: 16,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.instances_per_image;
        if lo > hi || hi == 0 {
            return Err(invalid("instances_per_image", format!("empty range [{lo}, {hi}]")));
        }
        let [lo, hi] = self.transcript_len;
        if lo == 0 || lo > hi {
            return Err(invalid("transcript_len", format!("empty range [{lo}, {hi}]")));
        }
        if self.alphabet_size < 2 {
            return Err(invalid("alphabet_size", "need at least two characters"));
        }
        if !(0.0..=1.0).contains(&self.inverse_fraction) {
            return Err(invalid("inverse_fraction", "must be a probability"));
        }
        for (name, [lo, hi]) in [
            ("curvature", self.curvature),
            ("text_length", self.text_length),
            ("text_height", self.text_height),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(invalid(name, format!("empty range [{lo}, {hi}]")));
            }
        }
        if self.text_height[0] < MIN_HEIGHT {
            return Err(invalid("text_height", format!("minimum height is {MIN_HEIGHT}")));
        }
        if self.text_length[1] > 0.9 || self.text_length[0] <= 0.0 {
            return Err(invalid("text_length", "lengths must lie in (0, 0.9]"));
        }
        if self.grid < 2 {
            return Err(invalid("grid", "need at least 2 cells per side"));
        }
        Ok(())
    }

    /// Number of feature channels produced by [`FeatureMap::rasterize`].
    pub fn channels(&self) -> usize {
        feature_channels(self.alphabet_size)
    }
}

/// Channel layout: inside flag, one-hot character, offset to the nearest
/// center-line point (2), curve parameter, half height, reading direction (2).
pub fn feature_channels(alphabet_size: usize) -> usize {
    alphabet_size + 7
}

/// Row-major `grid x grid` cells, each with `channels` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn cell_center(&self, idx: usize) -> Point2 {
        cell_center(self.grid, idx)
    }

    /// Paints every instance into a fresh map; the nearest instance wins a cell.
    pub fn rasterize(instances: &[TextInstance], grid: usize, alphabet_size: usize) -> FeatureMap {
        let channels = feature_channels(alphabet_size);
        let mut data = vec![0.0; grid * grid * channels];
        let samples: Vec<Vec<CurveSample>> = instances.iter().map(|i| dense_samples(i, 64)).collect();
        let reach = 0.5 / grid as f64;

        for idx in 0..grid * grid {
            let c = cell_center(grid, idx);
            let mut best: Option<(f64, usize, &CurveSample)> = None;
            for (k, s) in samples.iter().enumerate() {
                for p in s {
                    let d = ((p.pos.x - c.x).powi(2) + (p.pos.y - c.y).powi(2)).sqrt();
                    if d <= p.half_height + reach && best.is_none_or(|b| d < b.0) {
                        best = Some((d, k, p));
                    }
                }
            }
            let Some((_, k, p)) = best else { continue };
            let text = &instances[k].transcript;
            let ch = ((p.t * text.len() as f64) as usize).min(text.len() - 1);
            let cell = &mut data[idx * channels..(idx + 1) * channels];
            cell[0] = 1.0;
            cell[1 + text[ch]] = 1.0;
            let base = 1 + alphabet_size;
            cell[base] = (p.pos.x - c.x) * 10.0;
            cell[base + 1] = (p.pos.y - c.y) * 10.0;
            cell[base + 2] = p.t;
            cell[base + 3] = p.half_height * 10.0;
            cell[base + 4] = p.dir.x;
            cell[base + 5] = p.dir.y;
        }
        FeatureMap { grid, channels, data }
    }
}

pub fn cell_center(grid: usize, idx: usize) -> Point2 {
    let (row, col) = (idx / grid, idx % grid);
    Point2::new((col as f64 + 0.5) / grid as f64, (row as f64 + 0.5) / grid as f64)
}

struct CurveSample {
    t: f64,
    pos: Point2,
    half_height: f64,
    dir: Point2,
}

fn dense_samples(inst: &TextInstance, count: usize) -> Vec<CurveSample> {
    let center = inst.center();
    (0..count)
        .map(|k| {
            let t = k as f64 / (count - 1) as f64;
            let top = inst.top.point_at(t);
            let bot = inst.bottom.point_at(t);
            let pos = center.point_at(t);
            let (a, b) = (center.point_at((t - 0.01).max(0.0)), center.point_at((t + 0.01).min(1.0)));
            let d = b - a;
            let norm = (d.x * d.x + d.y * d.y).sqrt().max(1e-12);
            CurveSample {
                t,
                pos,
                half_height: 0.5 * ((top.x - bot.x).powi(2) + (top.y - bot.y).powi(2)).sqrt(),
                dir: d * (1.0 / norm),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub index: u64,
    pub instances: Vec<TextInstance>,
    pub features: FeatureMap,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn bbox(curves: &[&BezierCurve]) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in curves.iter().flat_map(|c| c.control) {
        b[0] = b[0].min(p.x);
        b[1] = b[1].min(p.y);
        b[2] = b[2].max(p.x);
        b[3] = b[3].max(p.y);
    }
    b
}

fn overlaps(a: &[f64; 4], b: &[f64; 4], margin: f64) -> bool {
    a[0] - margin < b[2] && b[0] - margin < a[2] && a[1] - margin < b[3] && b[1] - margin < a[3]
}

/// One candidate instance in left-to-right reading order, or `None` when it
/// does not fit inside the image.
fn propose(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<(BezierCurve, BezierCurve)> {
    let length = uniform(rng, spec.text_length);
    let height = uniform(rng, spec.text_height);
    let angle = rng.random_range(-0.45..0.45f64);
    let bend = uniform(rng, spec.curvature) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let bend2 = bend * rng.random_range(0.6..1.0);
    let dir = Point2::new(angle.cos(), angle.sin());
    // Image y grows downwards, so "up" is the negative normal.
    let normal = Point2::new(-dir.y, dir.x);
    let start = Point2::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let center = BezierCurve::new([
        start,
        start + dir * (length / 3.0) + normal * (bend * length),
        start + dir * (2.0 * length / 3.0) + normal * (bend2 * length),
        start + dir * length,
    ]);
    let half = normal * (height / 2.0);
    let top = BezierCurve::new(center.control.map(|p| p - half));
    let bottom = BezierCurve::new(center.control.map(|p| p + half));
    let b = bbox(&[&top, &bottom]);
    let inside = b[0] >= 0.02 && b[1] >= 0.02 && b[2] <= 0.98 && b[3] <= 0.98;
    inside.then_some((top, bottom))
}

/// Generates image `index` of the dataset described by `spec`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);

    let [lo, hi] = spec.instances_per_image;
    let wanted = rng.random_range(lo..=hi);
    let mut instances: Vec<TextInstance> = Vec::with_capacity(wanted);
    let mut boxes: Vec<[f64; 4]> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while instances.len() < wanted {
        attempts += 1;
        if attempts > 20_000 {
            return Err(invalid(
                "instances_per_image",
                format!("could not place {wanted} non-overlapping instances"),
            ));
        }
        let Some((mut top, mut bottom)) = propose(spec, &mut rng) else {
            continue;
        };
        let b = bbox(&[&top, &bottom]);
        if boxes.iter().any(|o| overlaps(o, &b, 0.02)) {
            continue;
        }
        if rng.random_bool(spec.inverse_fraction) {
            // Rotate by 180 degrees about the text: reading order and
            // up/down both flip.
            (top, bottom) = (bottom.reversed(), top.reversed());
        }
        let [tl, th] = spec.transcript_len;
        let len = rng.random_range(tl..=th);
        let transcript = (0..len).map(|_| rng.random_range(0..spec.alphabet_size)).collect();
        boxes.push(b);
        instances.push(TextInstance {
            id: index * 1000 + instances.len() as u64,
            top,
            bottom,
            transcript,
        });
    }
    let features = FeatureMap::rasterize(&instances, spec.grid, spec.alphabet_size);
    Ok(Scene {
        index,
        instances,
        features,
    })
}

/// Serialized instance: control points flattened as `[x0, y0, ..., x3, y3]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: u64,
    pub top: [f64; 8],
    pub bottom: [f64; 8],
    pub transcript: Vec<usize>,
}

fn flatten(c: &BezierCurve) -> [f64; 8] {
    let mut out = [0.0; 8];
    for (i, p) in c.control.iter().enumerate() {
        out[2 * i] = p.x;
        out[2 * i + 1] = p.y;
    }
    out
}

fn unflatten(v: &[f64; 8]) -> BezierCurve {
    BezierCurve::new([0, 1, 2, 3].map(|i| Point2::new(v[2 * i], v[2 * i + 1])))
}

impl From<&TextInstance> for InstanceRecord {
    fn from(i: &TextInstance) -> Self {
        Self {
            id: i.id,
            top: flatten(&i.top),
            bottom: flatten(&i.bottom),
            transcript: i.transcript.clone(),
        }
    }
}

impl From<&InstanceRecord> for TextInstance {
    fn from(r: &InstanceRecord) -> Self {
        Self {
            id: r.id,
            top: unflatten(&r.top),
            bottom: unflatten(&r.bottom),
            transcript: r.transcript.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub format_version: u32,
    pub images: usize,
    pub spec: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: u64,
    pub instances: Vec<InstanceRecord>,
    /// `[grid, grid, channels]`.
    pub feature_dims: [usize; 3],
}

/// A loaded dataset; features are rebuilt from the instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn generate(spec: &SceneSpec, images: usize) -> Result<Dataset> {
        Self::generate_range(spec, 0, images, 1)
    }

    /// Images `start..start + count`, split over `jobs` threads. Each image
    /// has its own random stream, so the result does not depend on `jobs`.
    pub fn generate_range(spec: &SceneSpec, start: u64, count: usize, jobs: usize) -> Result<Dataset> {
        spec.validate()?;
        let indices: Vec<u64> = (start..start + count as u64).collect();
        let chunk = count.div_ceil(jobs.max(1)).max(1);
        let scenes = std::thread::scope(|s| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|&i| generate_scene(spec, i)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(count);
            for h in handles {
                all.extend(h.join().expect("generator thread panicked")?);
            }
            Ok::<_, Error>(all)
        })?;
        Ok(Dataset {
            spec: spec.clone(),
            scenes,
        })
    }

    pub fn instance_count(&self) -> usize {
        self.scenes.iter().map(|s| s.instances.len()).sum()
    }

    /// JSON Lines: a header line, then one line per image.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            format_version: DATASET_FORMAT_VERSION,
            images: self.scenes.len(),
            spec: self.spec.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for scene in &self.scenes {
            let rec = ImageRecord {
                index: scene.index,
                instances: scene.instances.iter().map(InstanceRecord::from).collect(),
                feature_dims: [scene.features.grid, scene.features.grid, scene.features.channels],
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Dataset> {
        let mut lines = input.lines();
        let header: DatasetHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Format("empty dataset file".into())),
        };
        if header.format != DATASET_FORMAT || header.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format {} v{}",
                header.format, header.format_version
            )));
        }
        header.spec.validate()?;
        let mut scenes = Vec::with_capacity(header.images);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ImageRecord = serde_json::from_str(&line)?;
            let instances: Vec<TextInstance> = rec.instances.iter().map(TextInstance::from).collect();
            for i in &instances {
                i.validate(header.spec.alphabet_size)?;
            }
            let features = FeatureMap::rasterize(&instances, header.spec.grid, header.spec.alphabet_size);
            if rec.feature_dims != [features.grid, features.grid, features.channels] {
                return Err(Error::Format(format!("image {}: feature dims {:?} disagree with spec", rec.index, rec.feature_dims)));
            }
            scenes.push(Scene {
                index: rec.index,
                instances,
                features,
            });
        }
        if scenes.len() != header.images {
            return Err(Error::Format(format!(
                "header announces {} images, found {}",
                header.images,
                scenes.len()
            )));
        }
        Ok(Dataset {
            spec: header.spec,
            scenes,
        })
    }
}
