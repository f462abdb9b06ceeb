//! Per-video ego-properties: semantics, camera motion, blurriness, hand and
//! object location, and hand pose.

pub mod blur;
pub mod detections;
pub mod flow;
pub mod frame;
pub mod motion;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use blur::{blurriness, laplacian_variance, summarize_blurriness, BlurrinessSummary};
pub use detections::{
    ingest_detections, read_detections, summarize_locations, summarize_pose, BoxDetection,
    FrameDetections, HandPoseVector, LocationSummary, ObjectDetection, PoseDetection,
    VideoDetections,
};
pub use flow::FarnebackParams;
pub use frame::FrameImage;
pub use motion::{frame_camera_motion, video_motion_summary, CameraMotionSummary, MotionVector};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::manifest::{LabelVector, Manifest, VideoRecord};

pub const SEMANTIC_DIM: usize = 768;

/// Frame rate camera motion is measured at.
pub const MOTION_FPS: f64 = 8.0;

/// The six properties, in the order used by weight vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Semantic,
    HandLoc,
    Pose,
    ObjLoc,
    Motion,
    Blur,
}

impl Property {
    pub const ALL: [Property; 6] = [
        Property::Semantic,
        Property::HandLoc,
        Property::Pose,
        Property::ObjLoc,
        Property::Motion,
        Property::Blur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::Semantic => "semantic",
            Property::HandLoc => "hand_loc",
            Property::Pose => "pose",
            Property::ObjLoc => "obj_loc",
            Property::Motion => "motion",
            Property::Blur => "blur",
        }
    }

    pub fn index(self) -> usize {
        Property::ALL.iter().position(|&p| p == self).unwrap()
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Property {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Property::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::argument(format!("unknown property {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertySet {
    pub id: String,
    #[serde(default)]
    pub semantic: Option<Vec<f64>>,
    #[serde(default)]
    pub motion: Option<CameraMotionSummary>,
    #[serde(default)]
    pub blur: Option<BlurrinessSummary>,
    #[serde(default)]
    pub hand_loc: Option<LocationSummary>,
    #[serde(default)]
    pub obj_loc: Option<LocationSummary>,
    #[serde(default)]
    pub pose: Option<HandPoseVector>,
}

impl PropertySet {
    pub fn empty(id: impl Into<String>) -> Self {
        PropertySet {
            id: id.into(),
            semantic: None,
            motion: None,
            blur: None,
            hand_loc: None,
            obj_loc: None,
            pose: None,
        }
    }

    /// The vector a property contributes to density estimation.
    ///
    /// Blurriness yields `[mean, std]`; the std is used as that point's bandwidth.
    pub fn representation(&self, property: Property) -> Option<Vec<f64>> {
        match property {
            Property::Semantic => self.semantic.clone(),
            Property::HandLoc => self.hand_loc.as_ref().map(|l| l.kde_vector.to_vec()),
            Property::Pose => self.pose.as_ref().map(|p| p.keypoints.clone()),
            Property::ObjLoc => self.obj_loc.as_ref().map(|l| l.kde_vector.to_vec()),
            Property::Motion => self.motion.as_ref().map(|m| m.resultant.to_vec()),
            Property::Blur => self.blur.as_ref().map(|b| vec![b.mean, b.std]),
        }
    }

    pub fn has(&self, property: Property) -> bool {
        match property {
            Property::Semantic => self.semantic.is_some(),
            Property::HandLoc => self.hand_loc.is_some(),
            Property::Pose => self.pose.is_some(),
            Property::ObjLoc => self.obj_loc.is_some(),
            Property::Motion => self.motion.is_some(),
            Property::Blur => self.blur.is_some(),
        }
    }
}

/// Property sets of many videos, in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PropertyTable {
    pub rows: Vec<PropertySet>,
}

impl PropertyTable {
    pub fn new(rows: Vec<PropertySet>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate property row for id {:?}",
                    r.id
                )));
            }
        }
        Ok(PropertyTable { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&PropertySet> {
        self.rows.iter().find(|r| r.id == id)
    }

    /// Rows whose id is in `ids`, in the order of `ids`.
    pub fn select(&self, ids: &[String]) -> Result<PropertyTable> {
        let index: HashMap<&str, usize> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        let rows = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| self.rows[i].clone())
                    .ok_or_else(|| Error::UnknownId(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        PropertyTable::new(rows)
    }

    /// Rows whose id is not in `ids`, in table order.
    pub fn without(&self, ids: &[String]) -> PropertyTable {
        let drop: HashSet<&str> = ids.iter().map(String::as_str).collect();
        PropertyTable {
            rows: self
                .rows
                .iter()
                .filter(|r| !drop.contains(r.id.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn check_ids_against(&self, manifest: &Manifest) -> Result<()> {
        let known: HashSet<&str> = manifest.records.iter().map(|r| r.id.as_str()).collect();
        match self.rows.iter().find(|r| !known.contains(r.id.as_str())) {
            Some(r) => Err(Error::UnknownId(r.id.clone())),
            None => Ok(()),
        }
    }
}

pub fn load_property_table(path: &Path) -> Result<PropertyTable> {
    let rows = jsonl::read::<PropertySet>(path)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    PropertyTable::new(rows)
}

pub fn write_property_table(table: &PropertyTable, path: &Path) -> Result<()> {
    jsonl::write(path, &table.rows)
}

/// Reads `{label_text, embedding}` lines, requiring 768-dim finite embeddings.
pub fn load_semantic_vectors(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (line, lv) in jsonl::read::<LabelVector>(path)? {
        if lv.embedding.len() != SEMANTIC_DIM || lv.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!(
                    "embedding for {:?} must be {SEMANTIC_DIM} finite values, got {}",
                    lv.label_text,
                    lv.embedding.len()
                ),
            });
        }
        out.insert(lv.label_text, lv.embedding);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub motion_fps: f64,
    pub flow: FarnebackParams,
    pub working_pixels: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            motion_fps: MOTION_FPS,
            flow: FarnebackParams::default(),
            working_pixels: frame::WORKING_PIXELS,
        }
    }
}

/// Indices of frames kept when resampling `count` frames from `native_fps` to `target_fps`.
pub fn resample_indices(count: usize, native_fps: f64, target_fps: f64) -> Vec<usize> {
    if !(native_fps > target_fps) || !(target_fps > 0.0) {
        return (0..count).collect();
    }
    let step = native_fps / target_fps;
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let i = (k as f64 * step).round() as usize;
        if i >= count {
            break;
        }
        if out.last() != Some(&i) {
            out.push(i);
        }
        k += 1;
    }
    out
}

/// Camera motion and blurriness of one video from its extracted frames.
pub fn extract_frame_properties(
    frames: &[FrameImage],
    opts: &ExtractOptions,
) -> Result<(CameraMotionSummary, BlurrinessSummary)> {
    if frames.len() < 2 {
        return Err(Error::invalid(format!(
            "camera motion needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let gray: Vec<FrameImage> = frames.iter().map(FrameImage::to_gray).collect();
    let mut vectors = Vec::with_capacity(gray.len() - 1);
    for pair in gray.windows(2) {
        vectors.push(motion::frame_camera_motion_with(
            &pair[0],
            &pair[1],
            &opts.flow,
            Some(opts.working_pixels),
        )?);
    }
    let scores = gray
        .iter()
        .map(|f| blur::laplacian_variance(&f.resize_to_pixels(opts.working_pixels)))
        .collect::<Result<Vec<_>>>()?;
    let blur = summarize_blurriness(&scores).expect("at least two frames");
    Ok((video_motion_summary(&vectors), blur))
}

fn frames_dir(record: &VideoRecord, base: &Path) -> Result<PathBuf> {
    let rel = record
        .frames_path
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("record {:?} has no frames_path", record.id)))?;
    Ok(base.join(rel))
}

/// Computes motion and blurriness for every record, in manifest order.
///
/// Videos are processed in parallel on the current rayon pool; the output
/// order and values do not depend on the number of workers.
pub fn extract_table(
    manifest: &Manifest,
    base: &Path,
    opts: &ExtractOptions,
) -> Result<PropertyTable> {
    let rows = manifest
        .records
        .par_iter()
        .map(|record| {
            let dir = frames_dir(record, base)?;
            let paths = frame::list_frames(&dir)?;
            let keep = resample_indices(paths.len(), record.fps_native, opts.motion_fps);
            let frames = keep
                .iter()
                .map(|&i| FrameImage::open(&paths[i]))
                .collect::<Result<Vec<_>>>()?;
            let (motion, blur) = extract_frame_properties(&frames, opts)
                .map_err(|e| Error::invalid(format!("record {:?}: {e}", record.id)))?;
            let mut row = PropertySet::empty(record.id.clone());
            row.motion = Some(motion);
            row.blur = Some(blur);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    PropertyTable::new(rows)
}

/// Fills semantic vectors and detection summaries into an existing table,
/// adding rows for manifest records the table lacks.
pub fn ingest_into(
    table: &mut PropertyTable,
    manifest: &Manifest,
    detections: Option<&BTreeMap<String, VideoDetections>>,
    semantics: Option<&BTreeMap<String, Vec<f64>>>,
) -> Result<()> {
    table.check_ids_against(manifest)?;
    let mut index: HashMap<String, usize> = table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.clone(), i))
        .collect();
    for record in &manifest.records {
        if !index.contains_key(&record.id) {
            index.insert(record.id.clone(), table.rows.len());
            table.rows.push(PropertySet::empty(record.id.clone()));
        }
        let row = &mut table.rows[index[&record.id]];
        if let Some(sem) = semantics {
            let class = manifest.classes.get(record.label_id);
            let vector = sem.get(&record.label_text).or_else(|| {
                class.and_then(|c| {
                    std::iter::once(&c.canonical_text)
                        .chain(&c.member_texts)
                        .find_map(|t| sem.get(t))
                })
            });
            match vector {
                Some(v) => row.semantic = Some(v.clone()),
                None => {
                    return Err(Error::invalid(format!(
                        "no semantic vector for label {:?} of record {:?}",
                        record.label_text, record.id
                    )))
                }
            }
        }
        if let Some(dets) = detections {
            let video = dets.get(&record.id);
            row.hand_loc = video.and_then(|v| summarize_locations(&v.hand_boxes()));
            row.obj_loc = video.and_then(|v| summarize_locations(&v.object_boxes()));
            row.pose = video.and_then(|v| summarize_pose(&v.poses_per_frame()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn property_order_matches_weights() {
        let names: Vec<&str> = Property::ALL.iter().map(|p| p.name()).collect();
        assert_eq!(
            names,
            ["semantic", "hand_loc", "pose", "obj_loc", "motion", "blur"]
        );
        assert_eq!("pose".parse::<Property>().unwrap(), Property::Pose);
        assert!("hands".parse::<Property>().is_err());
    }

    #[test]
    fn resampling_to_eight_fps() {
        assert_eq!(resample_indices(10, 32.0, 8.0), vec![0, 4, 8]);
        assert_eq!(resample_indices(4, 8.0, 8.0), vec![0, 1, 2, 3]);
        assert_eq!(resample_indices(3, 0.0, 8.0), vec![0, 1, 2]);
    }

    #[test]
    fn one_frame_is_not_enough() {
        let f = FrameImage::from_fn(8, 8, |_, _| 0.0);
        assert!(extract_frame_properties(&[f], &ExtractOptions::default()).is_err());
    }

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut row = PropertySet::empty("a");
        row.blur = Some(BlurrinessSummary {
            mean: 3.5,
            std: 0.25,
        });
        row.motion = Some(video_motion_summary(&[MotionVector {
            angle: 1.0,
            magnitude: 2.0,
        }]));
        row.hand_loc = summarize_locations(&[BoxDetection {
            x1: 0.1,
            y1: 0.2,
            x2: 0.3,
            y2: 0.4,
            confidence: 0.5,
        }]);
        let table = PropertyTable::new(vec![row, PropertySet::empty("b")]).unwrap();
        let p = dir.path().join("props.jsonl");
        write_property_table(&table, &p).unwrap();
        let back = load_property_table(&p).unwrap();
        assert_eq!(back, table);
        let bytes = std::fs::read(&p).unwrap();
        write_property_table(&back, &p).unwrap();
        assert_eq!(bytes, std::fs::read(&p).unwrap());
    }

    #[test]
    fn duplicate_rows_rejected() {
        assert!(
            PropertyTable::new(vec![PropertySet::empty("a"), PropertySet::empty("a")]).is_err()
        );
    }
}
