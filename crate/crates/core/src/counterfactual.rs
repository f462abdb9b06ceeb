//! Counterfactual clips: a fraction of frames get their hand evidence
//! replaced by that of a frame with a different pose or label.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::jsonl;
use crate::props::{BoxDetection, FrameImage, VideoDetections};
use crate::select::removal_count;

pub const DEFAULT_ALPHA: f64 = 0.25;
/// Poses whose cosine similarity falls below this count as dissimilar.
pub const DEFAULT_POSE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfConfig {
    /// Fraction of frames to modify.
    pub alpha: f64,
    /// Margin of the counterfactual loss.
    pub gamma: f64,
    pub pose_dissimilarity_threshold: f64,
    pub seed: u64,
}

impl CfConfig {
    pub fn new(seed: u64) -> Self {
        CfConfig {
            alpha: DEFAULT_ALPHA,
            gamma: crate::losses::DEFAULT_GAMMA,
            pose_dissimilarity_threshold: DEFAULT_POSE_THRESHOLD,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::argument(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.gamma > -1.0 && self.gamma < 1.0) {
            return Err(Error::argument(format!(
                "gamma must lie in (-1, 1), got {}",
                self.gamma
            )));
        }
        if !self.pose_dissimilarity_threshold.is_finite() {
            return Err(Error::argument(
                "pose dissimilarity threshold must be finite",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// The donor's hand region was resized into the target's hand region.
    Patch,
    /// The whole donor frame replaced the target.
    WholeFrame,
    /// No eligible donor; the frame is unchanged.
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modification {
    pub index: usize,
    pub strategy: Strategy,
    pub donor: Option<usize>,
}

/// Per-frame hand box and pose evidence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameEvidence {
    pub hand_boxes: Vec<Option<BoxDetection>>,
    pub poses: Vec<Option<Vec<f64>>>,
    pub labels: Option<Vec<u32>>,
}

impl FrameEvidence {
    /// The most confident valid hand box and most confident pose of each of
    /// the first `frames` sampled frames.
    pub fn from_detections(dets: &VideoDetections, frames: usize) -> FrameEvidence {
        let mut hand_boxes = vec![None; frames];
        let mut poses = vec![None; frames];
        for (&i, f) in dets.frames.range(..frames as u32) {
            let i = i as usize;
            hand_boxes[i] = f.hands.iter().filter(|b| b.is_valid()).fold(
                None,
                |best: Option<BoxDetection>, b| match best {
                    Some(a) if a.confidence >= b.confidence => Some(a),
                    _ => Some(*b),
                },
            );
            poses[i] = f
                .poses
                .iter()
                .fold(
                    None,
                    |best: Option<&crate::props::PoseDetection>, p| match best {
                        Some(a) if a.confidence >= p.confidence => Some(a),
                        _ => Some(p),
                    },
                )
                .map(|p| p.keypoints.clone());
        }
        FrameEvidence {
            hand_boxes,
            poses,
            labels: None,
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0 && a.len() == b.len()).then(|| dot / (na * nb))
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` covered by a normalized box.
fn pixel_rect(b: &BoxDetection, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let span = |lo: f64, hi: f64, n: usize| {
        let a = ((lo * n as f64).floor() as usize).min(n - 1);
        let z = ((hi * n as f64).ceil() as usize).clamp(a + 1, n);
        (a, z)
    };
    let (x0, x1) = span(b.x1, b.x2, width);
    let (y0, y1) = span(b.y1, b.y2, height);
    (x0, x1, y0, y1)
}

fn crop(frame: &FrameImage, (x0, x1, y0, y1): (usize, usize, usize, usize)) -> FrameImage {
    let c = frame.channels();
    let mut data = Vec::with_capacity((x1 - x0) * (y1 - y0) * c);
    for y in y0..y1 {
        for x in x0..x1 {
            for ch in 0..c {
                data.push(frame.at(x, y, ch));
            }
        }
    }
    FrameImage::new(x1 - x0, y1 - y0, c, data).expect("crop is in bounds")
}

fn paste(target: &mut FrameImage, patch: &FrameImage, x0: usize, y0: usize) {
    for y in 0..patch.height() {
        for x in 0..patch.width() {
            for c in 0..patch.channels() {
                target.set(x0 + x, y0 + y, c, patch.at(x, y, c));
            }
        }
    }
}

/// Replaces the hand evidence of `⌈alpha · L⌉` seeded frames.
///
/// A donor is eligible when its pose is dissimilar to the target's or its
/// label differs. Donors whose hand box and the target's are both valid are
/// preferred and patched in; otherwise a whole eligible donor frame is copied.
/// Donors always come from the unmodified input. Frames not in the returned
/// log are bit-identical to the input.
pub fn build_counterfactual(
    frames: &[FrameImage],
    evidence: &FrameEvidence,
    cfg: &CfConfig,
) -> Result<(Vec<FrameImage>, Vec<Modification>)> {
    cfg.validate()?;
    let n = frames.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "counterfactual needs at least 2 frames, got {n}"
        )));
    }
    ensure_dim(n, evidence.hand_boxes.len())?;
    ensure_dim(n, evidence.poses.len())?;
    if let Some(l) = &evidence.labels {
        ensure_dim(n, l.len())?;
    }
    let valid_box = |i: usize| evidence.hand_boxes[i].filter(BoxDetection::is_valid);
    let dissimilar = |a: usize, b: usize| {
        let label = evidence.labels.as_ref().is_some_and(|l| l[a] != l[b]);
        let pose = match (&evidence.poses[a], &evidence.poses[b]) {
            (Some(p), Some(q)) => {
                cosine(p, q).is_some_and(|c| c < cfg.pose_dissimilarity_threshold)
            }
            _ => false,
        };
        label || pose
    };

    let count = removal_count(cfg.alpha, n).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chosen = rand::seq::index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();

    let mut out = frames.to_vec();
    let mut log = Vec::with_capacity(count);
    for t in chosen {
        let eligible: Vec<usize> = (0..n).filter(|&j| j != t && dissimilar(j, t)).collect();
        let patchable: Vec<usize> = match valid_box(t) {
            Some(_) => eligible
                .iter()
                .copied()
                .filter(|&j| valid_box(j).is_some())
                .collect(),
            None => Vec::new(),
        };
        let entry = if !patchable.is_empty() {
            let d = patchable[rng.random_range(0..patchable.len())];
            let (donor, target) = (&frames[d], &frames[t]);
            ensure_dim(target.channels(), donor.channels())?;
            let from = pixel_rect(&valid_box(d).unwrap(), donor.width(), donor.height());
            let to = pixel_rect(&valid_box(t).unwrap(), target.width(), target.height());
            let patch = crop(donor, from).resize(to.1 - to.0, to.3 - to.2);
            paste(&mut out[t], &patch, to.0, to.2);
            Modification {
                index: t,
                strategy: Strategy::Patch,
                donor: Some(d),
            }
        } else if !eligible.is_empty() {
            let d = eligible[rng.random_range(0..eligible.len())];
            ensure_dim(frames[t].channels(), frames[d].channels())?;
            out[t] = frames[d].resize(frames[t].width(), frames[t].height());
            Modification {
                index: t,
                strategy: Strategy::WholeFrame,
                donor: Some(d),
            }
        } else {
            Modification {
                index: t,
                strategy: Strategy::Skipped,
                donor: None,
            }
        };
        log.push(entry);
    }
    Ok((out, log))
}

pub fn write_log(path: &Path, log: &[Modification]) -> Result<()> {
    jsonl::write(path, log)
}

pub fn read_log(path: &Path) -> Result<Vec<Modification>> {
    Ok(jsonl::read(path)?.into_iter().map(|(_, m)| m).collect())
}
