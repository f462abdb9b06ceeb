//! Sharpness as the variance of the Laplacian response.

use super::frame::{FrameImage, WORKING_PIXELS};
use crate::error::{Error, Result};

/// Population variance of the 4-neighbour Laplacian over interior pixels.
/// Colour frames are converted to luma first.
pub fn laplacian_variance(frame: &FrameImage) -> Result<f64> {
    let gray = frame.to_gray();
    let (w, h) = (gray.width(), gray.height());
    if w < 3 || h < 3 {
        return Err(Error::argument(format!(
            "laplacian needs at least a 3x3 frame, got {w}x{h}"
        )));
    }
    let px = gray.data();
    let mut response = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            response.push(4.0 * px[i] - px[i - 1] - px[i + 1] - px[i - w] - px[i + w]);
        }
    }
    let n = response.len() as f64;
    let mean = response.iter().sum::<f64>() / n;
    Ok(response
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n)
}

/// Blurriness score of one frame: gray, resize to the working resolution, Laplacian variance.
pub fn blurriness(frame: &FrameImage) -> Result<f64> {
    laplacian_variance(&frame.to_gray().resize_to_pixels(WORKING_PIXELS))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlurrinessSummary {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation of per-frame scores.
pub fn summarize_blurriness(scores: &[f64]) -> Option<BlurrinessSummary> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let all_equal = scores.iter().all(|&s| s == scores[0]);
    let std = if all_equal {
        0.0
    } else {
        (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n).sqrt()
    };
    Some(BlurrinessSummary { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Full 2-D correlation with an explicit 3x3 kernel, valid region only.
    fn convolve_valid(frame: &FrameImage, kernel: [[f64; 3]; 3]) -> Vec<f64> {
        let (w, h) = (frame.width(), frame.height());
        let mut out = Vec::new();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = 0.0;
                for (ky, row) in kernel.iter().enumerate() {
                    for (kx, k) in row.iter().enumerate() {
                        acc += k * frame.at(x + kx - 1, y + ky - 1, 0);
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    fn variance_oracle(values: &[f64]) -> f64 {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sq = values.iter().map(|v| v * v).sum::<f64>() / n;
        sq - mean * mean
    }

    fn box_blur(f: &FrameImage) -> FrameImage {
        let (w, h) = (f.width(), f.height());
        FrameImage::from_fn(w, h, |x, y| {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    acc += f.at(xx, yy, 0);
                }
            }
            acc / 9.0
        })
    }

    #[test]
    fn constant_frame_is_zero() {
        let f = FrameImage::from_fn(40, 30, |_, _| 0.6);
        assert_eq!(laplacian_variance(&f).unwrap(), 0.0);
    }

    #[test]
    fn checkerboard_matches_reference_convolution() {
        let f = FrameImage::from_fn(256, 256, |x, y| ((x / 8 + y / 8) % 2) as f64);
        let kernel = [[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]];
        let expected = variance_oracle(&convolve_valid(&f, kernel));
        let got = laplacian_variance(&f).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!(got > 0.0);
    }

    #[test]
    fn blurring_lowers_the_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FrameImage::from_fn(64, 48, |_, _| rng.random::<f64>());
        let sharp = laplacian_variance(&f).unwrap();
        let soft = laplacian_variance(&box_blur(&f)).unwrap();
        assert!(sharp > soft);
    }

    #[test]
    fn dc_offset_does_not_change_score() {
        let f = FrameImage::from_fn(32, 32, |x, y| ((x * 7 + y * 13) % 11) as f64 / 20.0);
        let g = FrameImage::from_fn(32, 32, |x, y| f.at(x, y, 0) + 0.3);
        let (a, b) = (
            laplacian_variance(&f).unwrap(),
            laplacian_variance(&g).unwrap(),
        );
        assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn tiny_frame_is_an_error() {
        let f = FrameImage::from_fn(2, 5, |_, _| 0.0);
        assert!(laplacian_variance(&f).is_err());
    }

    #[test]
    fn summary_std_zero_iff_equal() {
        assert_eq!(summarize_blurriness(&[2.0, 2.0, 2.0]).unwrap().std, 0.0);
        let s = summarize_blurriness(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert!(summarize_blurriness(&[]).is_none());
    }
}
