//! Precomputed hand, object and pose detections, and their per-video summaries.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::manifest::Manifest;

pub const HEATMAP_SIZE: usize = 16;
pub const POSE_DIM: usize = 42;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDetection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub confidence: f64,
}

impl BoxDetection {
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn size(&self) -> (f64, f64) {
        (self.x2 - self.x1, self.y2 - self.y1)
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.x1)
            && in_unit(self.y1)
            && in_unit(self.x2)
            && in_unit(self.y2)
            && self.x2 > self.x1
            && self.y2 > self.y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectDetection {
    pub bbox: BoxDetection,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseDetection {
    pub keypoints: Vec<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameDetections {
    pub hands: Vec<BoxDetection>,
    pub objects: Vec<ObjectDetection>,
    pub poses: Vec<PoseDetection>,
}

/// Detections of one video keyed by sampled frame index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VideoDetections {
    pub frames: BTreeMap<u32, FrameDetections>,
}

impl VideoDetections {
    pub fn hand_boxes(&self) -> Vec<BoxDetection> {
        self.frames
            .values()
            .flat_map(|f| f.hands.iter().copied())
            .collect()
    }

    pub fn object_boxes(&self) -> Vec<BoxDetection> {
        self.frames
            .values()
            .flat_map(|f| f.objects.iter().map(|o| o.bbox))
            .collect()
    }

    pub fn poses_per_frame(&self) -> Vec<Vec<PoseDetection>> {
        self.frames.values().map(|f| f.poses.clone()).collect()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionLine {
    id: String,
    frame_index: u32,
    #[serde(default)]
    hands: Vec<Vec<f64>>,
    #[serde(default)]
    objects: Vec<Vec<serde_json::Value>>,
    #[serde(default)]
    poses: Vec<Vec<f64>>,
}

fn parse_box(v: &[f64], what: &str) -> std::result::Result<BoxDetection, String> {
    if v.len() < 5 {
        return Err(format!(
            "{what} needs [x1,y1,x2,y2,confidence], got {} values",
            v.len()
        ));
    }
    let b = BoxDetection {
        x1: v[0],
        y1: v[1],
        x2: v[2],
        y2: v[3],
        confidence: v[4],
    };
    if b.x2 < b.x1 || b.y2 < b.y1 {
        return Err(format!(
            "malformed {what} ({}, {}, {}, {}): second corner precedes first",
            b.x1, b.y1, b.x2, b.y2
        ));
    }
    let coords_ok = [b.x1, b.y1, b.x2, b.y2]
        .iter()
        .all(|c| c.is_finite() && (0.0..=1.0).contains(c));
    if !coords_ok {
        return Err(format!("{what} coordinates must be normalized to [0, 1]"));
    }
    if !(0.0..=1.0).contains(&b.confidence) {
        return Err(format!("{what} confidence must be in [0, 1]"));
    }
    Ok(b)
}

fn parse_object(v: &[serde_json::Value]) -> std::result::Result<ObjectDetection, String> {
    if v.len() != 6 {
        return Err(format!(
            "object needs [x1,y1,x2,y2,confidence,category], got {} values",
            v.len()
        ));
    }
    let nums: Option<Vec<f64>> = v[..5].iter().map(|x| x.as_f64()).collect();
    let nums = nums.ok_or_else(|| "object box values must be numbers".to_string())?;
    let category = match &v[5] {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Number(n) => n.to_string(),
        other => {
            return Err(format!(
                "object category must be a string or number, got {other}"
            ))
        }
    };
    Ok(ObjectDetection {
        bbox: parse_box(&nums, "object box")?,
        category,
    })
}

fn parse_pose(v: &[f64]) -> std::result::Result<PoseDetection, String> {
    if v.len() != POSE_DIM + 1 {
        return Err(format!(
            "pose needs {} keypoint values plus confidence, got {} values",
            POSE_DIM,
            v.len()
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err("pose values must be finite".into());
    }
    Ok(PoseDetection {
        keypoints: v[..POSE_DIM].to_vec(),
        confidence: v[POSE_DIM],
    })
}

/// Reads a detection file, rejecting ids the manifest does not know and malformed boxes.
pub fn ingest_detections(
    path: &Path,
    manifest: &Manifest,
) -> Result<BTreeMap<String, VideoDetections>> {
    let known: HashSet<&str> = manifest.records.iter().map(|r| r.id.as_str()).collect();
    read_with(path, Some(&known))
}

/// Reads a detection file without checking ids against a manifest.
pub fn read_detections(path: &Path) -> Result<BTreeMap<String, VideoDetections>> {
    read_with(path, None)
}

fn read_with(
    path: &Path,
    known: Option<&HashSet<&str>>,
) -> Result<BTreeMap<String, VideoDetections>> {
    let mut out: BTreeMap<String, VideoDetections> = BTreeMap::new();
    for (line, d) in jsonl::read::<DetectionLine>(path)? {
        if known.is_some_and(|k| !k.contains(d.id.as_str())) {
            return Err(Error::UnknownId(d.id));
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("record {:?} frame {}: {message}", d.id, d.frame_index),
        };
        let hands = d
            .hands
            .iter()
            .map(|h| parse_box(h, "hand box"))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(bad)?;
        let objects = d
            .objects
            .iter()
            .map(|o| parse_object(o))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(bad)?;
        let poses = d
            .poses
            .iter()
            .map(|p| parse_pose(p))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(bad)?;
        let frame = out
            .entry(d.id.clone())
            .or_default()
            .frames
            .entry(d.frame_index)
            .or_default();
        frame.hands.extend(hands);
        frame.objects.extend(objects);
        frame.poses.extend(poses);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationSummary {
    /// Visit counts indexed `[row][column]`, row 0 at the top of the frame.
    pub heatmap: [[u32; HEATMAP_SIZE]; HEATMAP_SIZE],
    /// Mean center x, center y, width and height.
    pub kde_vector: [f64; 4],
    pub detection_count: usize,
}

impl LocationSummary {
    pub fn heatmap_total(&self) -> u64 {
        self.heatmap.iter().flatten().map(|&c| c as u64).sum()
    }
}

fn cell(v: f64) -> usize {
    ((v * HEATMAP_SIZE as f64).floor().max(0.0) as usize).min(HEATMAP_SIZE - 1)
}

/// Heatmap of box centers and mean center/size; `None` when there are no boxes.
pub fn summarize_locations(boxes: &[BoxDetection]) -> Option<LocationSummary> {
    if boxes.is_empty() {
        return None;
    }
    let mut heatmap = [[0u32; HEATMAP_SIZE]; HEATMAP_SIZE];
    let mut acc = [0.0f64; 4];
    for b in boxes {
        let (cx, cy) = b.center();
        let (w, h) = b.size();
        heatmap[cell(cy)][cell(cx)] += 1;
        acc[0] += cx;
        acc[1] += cy;
        acc[2] += w;
        acc[3] += h;
    }
    let n = boxes.len() as f64;
    Some(LocationSummary {
        heatmap,
        kde_vector: acc.map(|v| (v / n).clamp(0.0, 1.0)),
        detection_count: boxes.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandPoseVector {
    pub keypoints: Vec<f64>,
    pub confidence: f64,
}

/// Confidence-weighted mean of each frame's most confident pose.
///
/// Falls back to the unweighted mean when every confidence is zero; `None`
/// when no frame has a pose.
pub fn summarize_pose(frames: &[Vec<PoseDetection>]) -> Option<HandPoseVector> {
    let best: Vec<&PoseDetection> = frames
        .iter()
        .filter_map(|poses| {
            poses
                .iter()
                .fold(None, |acc: Option<&PoseDetection>, p| match acc {
                    Some(a) if a.confidence >= p.confidence => Some(a),
                    _ => Some(p),
                })
        })
        .collect();
    if best.is_empty() {
        return None;
    }
    let total: f64 = best.iter().map(|p| p.confidence).sum();
    let mut keypoints = vec![0.0; POSE_DIM];
    for p in &best {
        let w = if total > 0.0 {
            p.confidence / total
        } else {
            1.0 / best.len() as f64
        };
        for (k, v) in keypoints.iter_mut().zip(&p.keypoints) {
            *k += w * v;
        }
    }
    Some(HandPoseVector {
        keypoints,
        confidence: total / best.len() as f64,
    })
}
