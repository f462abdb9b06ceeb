//! Camera motion from dense flow: per-frame dominant vector and per-video polar histogram.
//!
//! Angles use the y-up convention (0 = rightward, π/2 = upward in the image)
//! and lie in `[0, 2π)`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::flow::{dense_flow, FarnebackParams};
use super::frame::{FrameImage, WORKING_PIXELS};
use crate::error::Result;

pub const ANGLE_BINS: usize = 90;

/// Flow vectors shorter than this many pixels count as no motion.
pub const MIN_FLOW_MAGNITUDE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionVector {
    pub angle: f64,
    pub magnitude: f64,
}

impl MotionVector {
    pub const ZERO: MotionVector = MotionVector {
        angle: 0.0,
        magnitude: 0.0,
    };

    pub fn from_xy(x: f64, y: f64) -> MotionVector {
        let magnitude = x.hypot(y);
        if magnitude == 0.0 {
            return MotionVector::ZERO;
        }
        MotionVector {
            angle: wrap_angle(y.atan2(x)),
            magnitude,
        }
    }

    pub fn xy(&self) -> (f64, f64) {
        (
            self.magnitude * self.angle.cos(),
            self.magnitude * self.angle.sin(),
        )
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if w >= TAU {
        0.0
    } else {
        w
    }
}

pub fn angle_bin(angle: f64) -> usize {
    ((wrap_angle(angle) / (TAU / ANGLE_BINS as f64)) as usize).min(ANGLE_BINS - 1)
}

/// Smallest absolute difference between two angles.
pub fn angular_distance(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b);
    d.min(TAU - d)
}

/// Dominant motion between two frames: the magnitude-weighted mean vector of
/// the heaviest angle bin. Frames are analysed at the working resolution.
pub fn frame_camera_motion(prev: &FrameImage, next: &FrameImage) -> Result<MotionVector> {
    frame_camera_motion_with(
        prev,
        next,
        &FarnebackParams::default(),
        Some(WORKING_PIXELS),
    )
}

pub fn frame_camera_motion_with(
    prev: &FrameImage,
    next: &FrameImage,
    params: &FarnebackParams,
    working_pixels: Option<usize>,
) -> Result<MotionVector> {
    // Only large frames are downscaled; magnitudes are in working-resolution pixels.
    let (a, b) = match working_pixels {
        Some(px)
            if prev.width() == next.width()
                && prev.height() == next.height()
                && prev.width() * prev.height() > px =>
        {
            (
                prev.to_gray().resize_to_pixels(px),
                next.to_gray().resize_to_pixels(px),
            )
        }
        _ => (prev.to_gray(), next.to_gray()),
    };
    let flow = dense_flow(&a, &b, params)?;
    Ok(dominant_vector(
        flow.dx.iter().zip(&flow.dy).map(|(&dx, &dy)| (dx, -dy)),
    ))
}

/// Bins `(x, y)` vectors by angle, weighting by length, and returns the
/// weighted mean of the heaviest bin (lowest index on ties).
pub fn dominant_vector(vectors: impl Iterator<Item = (f64, f64)>) -> MotionVector {
    let mut weight = [0.0f64; ANGLE_BINS];
    let mut sum_x = [0.0f64; ANGLE_BINS];
    let mut sum_y = [0.0f64; ANGLE_BINS];
    for (x, y) in vectors {
        let m = x.hypot(y);
        if !(m >= MIN_FLOW_MAGNITUDE) {
            continue;
        }
        let bin = angle_bin(y.atan2(x));
        weight[bin] += m;
        sum_x[bin] += m * x;
        sum_y[bin] += m * y;
    }
    let mut best = 0;
    for b in 1..ANGLE_BINS {
        if weight[b] > weight[best] {
            best = b;
        }
    }
    if weight[best] == 0.0 {
        return MotionVector::ZERO;
    }
    MotionVector::from_xy(sum_x[best] / weight[best], sum_y[best] / weight[best])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraMotionSummary {
    pub frame_vectors: Vec<MotionVector>,
    pub histogram: Vec<f64>,
    pub resultant: [f64; 2],
    pub frame_pair_count: usize,
}

impl CameraMotionSummary {
    pub fn empty() -> Self {
        video_motion_summary(&[])
    }
}

/// Magnitude-weighted 90-bin polar histogram and Cartesian mean of per-frame vectors.
pub fn video_motion_summary(frame_vectors: &[MotionVector]) -> CameraMotionSummary {
    let mut histogram = vec![0.0; ANGLE_BINS];
    let (mut sx, mut sy) = (0.0, 0.0);
    for v in frame_vectors {
        histogram[angle_bin(v.angle)] += v.magnitude;
        let (x, y) = v.xy();
        sx += x;
        sy += y;
    }
    let n = frame_vectors.len();
    let resultant = if n == 0 {
        [0.0, 0.0]
    } else {
        [sx / n as f64, sy / n as f64]
    };
    CameraMotionSummary {
        frame_vectors: frame_vectors.to_vec(),
        histogram,
        resultant,
        frame_pair_count: n,
    }
}
