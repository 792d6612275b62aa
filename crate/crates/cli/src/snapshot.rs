//! Prediction snapshots and the instability trace computed from them.
//!
//! A snapshot is one JSON document holding, per image, the matching-query
//! scores and center points plus the ground truth, which is everything the
//! Hungarian routing needs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use curvedn_core::assignment::{build_cost_matrix, hungarian_match, instability, MatchAssignment, MatchCost};
use curvedn_core::decoder::Decoder;
use curvedn_core::geometry::{Point2, TextInstance};
use curvedn_core::synth::{InstanceRecord, Scene};
use serde::{Deserialize, Serialize};

pub const SNAPSHOT_FORMAT: &str = "curvedn-snapshot";
pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotImage {
    pub index: u64,
    pub scores: Vec<f64>,
    /// Center points per query, `[x, y]` pairs.
    pub points: Vec<Vec<[f64; 2]>>,
    pub gt: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub format: String,
    pub format_version: u32,
    pub step: usize,
    pub cost: MatchCost,
    pub images: Vec<SnapshotImage>,
}

impl Snapshot {
    pub fn capture(model: &Decoder, scenes: &[Scene], step: usize, cost: &MatchCost) -> Result<Self> {
        let images = scenes
            .iter()
            .map(|s| {
                let pred = model.predict(&s.features)?;
                Ok(SnapshotImage {
                    index: s.index,
                    scores: pred.instance_scores.clone(),
                    points: (0..pred.len())
                        .map(|q| pred.center_of(q).iter().map(|p| [p.x, p.y]).collect())
                        .collect(),
                    gt: s.instances.iter().map(InstanceRecord::from).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            format: SNAPSHOT_FORMAT.into(),
            format_version: SNAPSHOT_FORMAT_VERSION,
            step,
            cost: *cost,
            images,
        })
    }

    pub fn file_name(step: usize) -> String {
        format!("snapshot-{step:08}.json")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(Self::file_name(self.step));
        std::fs::write(&path, serde_json::to_vec(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let snap: Snapshot = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        if snap.format != SNAPSHOT_FORMAT || snap.format_version != SNAPSHOT_FORMAT_VERSION {
            bail!("{}: unsupported snapshot format {} v{}", path.display(), snap.format, snap.format_version);
        }
        Ok(snap)
    }

    /// Hungarian routing of every image's queries to its ground truth.
    pub fn assignments(&self) -> Result<Vec<MatchAssignment>> {
        self.images
            .iter()
            .map(|img| {
                let gt: Vec<TextInstance> = img.gt.iter().map(TextInstance::from).collect();
                if gt.is_empty() {
                    return Ok(MatchAssignment(vec![None; img.scores.len()]));
                }
                let pts: Vec<Vec<Point2>> = img
                    .points
                    .iter()
                    .map(|q| q.iter().map(|p| Point2::new(p[0], p[1])).collect())
                    .collect();
                let cost = build_cost_matrix(&img.scores, &pts, &gt, &self.cost)?;
                Ok(hungarian_match(&cost)?)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsRow {
    /// Step of the later snapshot of the pair.
    pub step: usize,
    /// Mean over images of the number of queries whose matched instance changed.
    pub is: f64,
}

/// Snapshot files in `dir`, ordered by step.
pub fn list_snapshots(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading snapshot directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("snapshot-") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Instability between consecutive snapshots.
pub fn is_trace(snapshots: &[Snapshot]) -> Result<Vec<IsRow>> {
    if snapshots.len() < 2 {
        bail!("need at least 2 snapshots to measure instability, found {}", snapshots.len());
    }
    let mut prev = snapshots[0].assignments()?;
    let mut rows = Vec::with_capacity(snapshots.len() - 1);
    for pair in snapshots.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let ids = |s: &Snapshot| s.images.iter().map(|i| i.index).collect::<Vec<_>>();
        if ids(a) != ids(b) {
            bail!("snapshots at steps {} and {} cover different images", a.step, b.step);
        }
        let next = b.assignments()?;
        let mut total = 0usize;
        for (p, n) in prev.iter().zip(&next) {
            total += instability(p, n)?;
        }
        rows.push(IsRow {
            step: b.step,
            is: if next.is_empty() { 0.0 } else { total as f64 / next.len() as f64 },
        });
        prev = next;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use curvedn_core::geometry::BezierCurve;

    fn line(y: f64) -> InstanceRecord {
        let top = BezierCurve::new([0.1, 0.3, 0.5, 0.7].map(|x| Point2::new(x, y - 0.02)));
        let bottom = BezierCurve::new([0.1, 0.3, 0.5, 0.7].map(|x| Point2::new(x, y + 0.02)));
        InstanceRecord::from(&TextInstance {
            id: 0,
            top,
            bottom,
            transcript: vec![1],
        })
    }

    fn query(y: f64) -> Vec<[f64; 2]> {
        (0..4).map(|k| [0.1 + 0.2 * k as f64, y]).collect()
    }

    fn snap(step: usize, ys: &[f64]) -> Snapshot {
        Snapshot {
            format: SNAPSHOT_FORMAT.into(),
            format_version: SNAPSHOT_FORMAT_VERSION,
            step,
            cost: MatchCost::default(),
            images: vec![SnapshotImage {
                index: 0,
                scores: vec![0.5; ys.len()],
                points: ys.iter().map(|&y| query(y)).collect(),
                gt: vec![line(0.2), line(0.8)],
            }],
        }
    }

    #[test]
    fn identical_snapshots_are_stable() {
        let rows = is_trace(&[snap(0, &[0.2, 0.8, 0.5]), snap(10, &[0.2, 0.8, 0.5])]).unwrap();
        assert_eq!(rows, vec![IsRow { step: 10, is: 0.0 }]);
    }

    #[test]
    fn swapped_matches_count_twice() {
        // Queries 0 and 1 trade instances between the snapshots.
        let rows = is_trace(&[snap(0, &[0.2, 0.8, 0.5]), snap(10, &[0.8, 0.2, 0.5])]).unwrap();
        assert_eq!(rows[0].is, 2.0);
    }

    #[test]
    fn needs_two_snapshots() {
        assert!(is_trace(&[snap(0, &[0.2])]).is_err());
        assert!(is_trace(&[]).is_err());
    }

    #[test]
    fn bounded_by_twice_the_instances() {
        let rows = is_trace(&[snap(0, &[0.2, 0.8, 0.5, 0.1]), snap(5, &[0.5, 0.1, 0.2, 0.8]), snap(9, &[0.8, 0.5, 0.1, 0.2])]).unwrap();
        assert!(rows.iter().all(|r| r.is <= 4.0));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = snap(42, &[0.2, 0.8]);
        let path = s.write(dir.path()).unwrap();
        assert_eq!(Snapshot::read(&path).unwrap(), s);
        assert_eq!(list_snapshots(dir.path()).unwrap(), vec![path]);
    }
}
