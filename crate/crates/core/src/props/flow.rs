//! Dense optical flow by polynomial expansion (Farneback two-frame method).
//!
//! Each frame is locally approximated by a quadratic `x'Ax + b'x + c` fitted
//! with Gaussian-weighted least squares. A translation `d` between two frames
//! shows up as `b2 = b1 - 2 A d`, so the displacement is solved from the
//! averaged `A` and the difference of the linear terms, aggregated over a box
//! window and refined coarse-to-fine over an image pyramid.

use nalgebra::{Matrix6, Vector6};

use super::frame::FrameImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FarnebackParams {
    pub pyr_scale: f64,
    pub levels: usize,
    pub winsize: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        FarnebackParams {
            pyr_scale: 0.5,
            levels: 3,
            winsize: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.2,
        }
    }
}

/// Single-channel f64 plane.
#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn new(w: usize, h: usize) -> Self {
        Plane {
            w,
            h,
            v: vec![0.0; w * h],
        }
    }

    #[inline]
    fn clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.v[y * self.w + x]
    }

    fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let (tx, ty) = (x - x0 as f64, y - y0 as f64);
        let at = |xx: usize, yy: usize| self.v[yy * self.w + xx];
        (at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx) * (1.0 - ty)
            + (at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx) * ty
    }

    fn resize(&self, w: usize, h: usize) -> Plane {
        let sx = self.w as f64 / w as f64;
        let sy = self.h as f64 / h as f64;
        let mut out = Plane::new(w, h);
        for y in 0..h {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..w {
                let fx = (x as f64 + 0.5) * sx - 0.5;
                out.v[y * w + x] = self.bilinear(fx, fy);
            }
        }
        out
    }

    /// Separable correlation with a symmetric 1-D kernel, clamped borders.
    fn separable(&self, kernel: &[f64]) -> Plane {
        let r = (kernel.len() / 2) as isize;
        let mut tmp = Plane::new(self.w, self.h);
        for y in 0..self.h {
            for x in 0..self.w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * self.clamped(x as isize + k as isize - r, y as isize);
                }
                tmp.v[y * self.w + x] = acc;
            }
        }
        let mut out = Plane::new(self.w, self.h);
        for y in 0..self.h {
            for x in 0..self.w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * tmp.clamped(x as isize, y as isize + k as isize - r);
                }
                out.v[y * self.w + x] = acc;
            }
        }
        out
    }
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Per-pixel quadratic coefficients `[r1, rx, ry, rxx, ryy, rxy]`.
struct PolyExpansion {
    w: usize,
    h: usize,
    coeffs: Vec<[f64; 6]>,
}

impl PolyExpansion {
    fn compute(img: &Plane, n: usize, sigma: f64) -> PolyExpansion {
        let radius = n as isize;
        let g: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let xs: Vec<f64> = (-radius..=radius).map(|i| i as f64).collect();

        // Normal matrix of the weighted least-squares fit over the window.
        let mut gram = Matrix6::<f64>::zeros();
        for (iy, &y) in xs.iter().enumerate() {
            for (ix, &x) in xs.iter().enumerate() {
                let wgt = g[ix] * g[iy];
                let basis = Vector6::new(1.0, x, y, x * x, y * y, x * y);
                gram += wgt * basis * basis.transpose();
            }
        }
        let inv = gram
            .try_inverse()
            .expect("polynomial expansion normal matrix is positive definite");

        let (w, h) = (img.w, img.h);
        // Row pass: moments 0, 1, 2 along x.
        let mut row = vec![[0.0f64; 3]; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut m = [0.0; 3];
                for (k, (&gk, &xk)) in g.iter().zip(&xs).enumerate() {
                    let v = img.clamped(x as isize + k as isize - radius, y as isize) * gk;
                    m[0] += v;
                    m[1] += v * xk;
                    m[2] += v * xk * xk;
                }
                row[y * w + x] = m;
            }
        }
        let mut coeffs = vec![[0.0f64; 6]; w * h];
        for y in 0..h {
            for x in 0..w {
                // b'Wf in basis order [1, x, y, xx, yy, xy].
                let mut c = [0.0f64; 6];
                for (k, (&gk, &yk)) in g.iter().zip(&xs).enumerate() {
                    let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    let m = row[yy * w + x];
                    c[0] += gk * m[0];
                    c[1] += gk * m[1];
                    c[2] += gk * yk * m[0];
                    c[3] += gk * m[2];
                    c[4] += gk * yk * yk * m[0];
                    c[5] += gk * yk * m[1];
                }
                let r = inv * Vector6::from_column_slice(&c);
                coeffs[y * w + x] = [r[0], r[1], r[2], r[3], r[4], r[5]];
            }
        }
        PolyExpansion { w, h, coeffs }
    }

    fn sample(&self, x: f64, y: f64) -> [f64; 6] {
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let (tx, ty) = (x - x0 as f64, y - y0 as f64);
        let c00 = &self.coeffs[y0 * self.w + x0];
        let c10 = &self.coeffs[y0 * self.w + x1];
        let c01 = &self.coeffs[y1 * self.w + x0];
        let c11 = &self.coeffs[y1 * self.w + x1];
        let mut out = [0.0; 6];
        for k in 0..6 {
            out[k] = (c00[k] * (1.0 - tx) + c10[k] * tx) * (1.0 - ty)
                + (c01[k] * (1.0 - tx) + c11[k] * tx) * ty;
        }
        out
    }
}

/// Dense flow field in image coordinates (x right, y down), pixels per frame.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

/// Box-filter sums over a `(2r+1)^2` window with clamped borders, normalized to a mean.
fn box_mean(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let plane = Plane {
        w,
        h,
        v: src.to_vec(),
    };
    let kernel = vec![1.0 / (2 * r + 1) as f64; 2 * r + 1];
    plane.separable(&kernel).v
}

fn refine(p1: &PolyExpansion, p2: &PolyExpansion, dx: &mut [f64], dy: &mut [f64], winsize: usize) {
    let (w, h) = (p1.w, p1.h);
    let n = w * h;
    // Normal-equation terms G = A'A and v = A'Δb, aggregated over the window.
    let mut g11 = vec![0.0; n];
    let mut g12 = vec![0.0; n];
    let mut g22 = vec![0.0; n];
    let mut h1 = vec![0.0; n];
    let mut h2 = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let a = &p1.coeffs[i];
            let b = p2.sample(x as f64 + dx[i], y as f64 + dy[i]);
            let a11 = 0.5 * (a[3] + b[3]);
            let a22 = 0.5 * (a[4] + b[4]);
            let a12 = 0.25 * (a[5] + b[5]);
            let db1 = -0.5 * (b[1] - a[1]) + a11 * dx[i] + a12 * dy[i];
            let db2 = -0.5 * (b[2] - a[2]) + a12 * dx[i] + a22 * dy[i];
            g11[i] = a11 * a11 + a12 * a12;
            g12[i] = a12 * (a11 + a22);
            g22[i] = a12 * a12 + a22 * a22;
            h1[i] = a11 * db1 + a12 * db2;
            h2[i] = a12 * db1 + a22 * db2;
        }
    }
    let r = winsize / 2;
    let g11 = box_mean(&g11, w, h, r);
    let g12 = box_mean(&g12, w, h, r);
    let g22 = box_mean(&g22, w, h, r);
    let h1 = box_mean(&h1, w, h, r);
    let h2 = box_mean(&h2, w, h, r);
    for i in 0..n {
        let det = g11[i] * g22[i] - g12[i] * g12[i] + 1e-3;
        dx[i] = (g22[i] * h1[i] - g12[i] * h2[i]) / det;
        dy[i] = (g11[i] * h2[i] - g12[i] * h1[i]) / det;
    }
}

fn to_plane(frame: &FrameImage) -> Plane {
    let g = frame.to_gray();
    Plane {
        w: g.width(),
        h: g.height(),
        // Intensities on the 0..255 scale keep the determinant regularizer meaningful.
        v: g.data().iter().map(|v| v * 255.0).collect(),
    }
}

fn pyramid(base: Plane, params: &FarnebackParams) -> Vec<Plane> {
    let smooth = gaussian_kernel(1.0, 3);
    let mut levels = vec![base];
    for _ in 1..params.levels.max(1) {
        let prev = levels.last().unwrap();
        let w = ((prev.w as f64 * params.pyr_scale).round() as usize).max(1);
        let h = ((prev.h as f64 * params.pyr_scale).round() as usize).max(1);
        if w < 2 * params.poly_n + 1 || h < 2 * params.poly_n + 1 {
            break;
        }
        let next = prev.separable(&smooth).resize(w, h);
        levels.push(next);
    }
    levels
}

/// Dense displacement from `prev` to `next`: content at `p` in `prev` is found
/// at `p + (dx, dy)` in `next`.
pub fn dense_flow(
    prev: &FrameImage,
    next: &FrameImage,
    params: &FarnebackParams,
) -> Result<FlowField> {
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(Error::argument(format!(
            "frame size mismatch: {}x{} vs {}x{}",
            prev.width(),
            prev.height(),
            next.width(),
            next.height()
        )));
    }
    let pyr1 = pyramid(to_plane(prev), params);
    let pyr2 = pyramid(to_plane(next), params);

    let mut dx: Vec<f64> = Vec::new();
    let mut dy: Vec<f64> = Vec::new();
    let mut cur_w = 0usize;
    let mut cur_h = 0usize;
    for level in (0..pyr1.len()).rev() {
        let (l1, l2) = (&pyr1[level], &pyr2[level]);
        if dx.is_empty() {
            dx = vec![0.0; l1.w * l1.h];
            dy = vec![0.0; l1.w * l1.h];
        } else {
            let sx = l1.w as f64 / cur_w as f64;
            let sy = l1.h as f64 / cur_h as f64;
            let fx = Plane {
                w: cur_w,
                h: cur_h,
                v: dx,
            }
            .resize(l1.w, l1.h);
            let fy = Plane {
                w: cur_w,
                h: cur_h,
                v: dy,
            }
            .resize(l1.w, l1.h);
            dx = fx.v.into_iter().map(|v| v * sx).collect();
            dy = fy.v.into_iter().map(|v| v * sy).collect();
        }
        cur_w = l1.w;
        cur_h = l1.h;
        let e1 = PolyExpansion::compute(l1, params.poly_n, params.poly_sigma);
        let e2 = PolyExpansion::compute(l2, params.poly_n, params.poly_sigma);
        for _ in 0..params.iterations {
            refine(&e1, &e2, &mut dx, &mut dy, params.winsize);
        }
    }
    Ok(FlowField {
        width: cur_w,
        height: cur_h,
        dx,
        dy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(x: f64, y: f64) -> f64 {
        let waves = [
            (0.21, 0.05, 0.3, 0.2),
            (-0.07, 0.19, 1.1, 0.2),
            (0.13, -0.15, 2.0, 0.15),
            (0.05, 0.09, 0.7, 0.15),
        ];
        0.5 + waves
            .iter()
            .map(|(u, v, p, a)| a * (u * x + v * y + p).sin())
            .sum::<f64>()
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.total_cmp(b));
        v[v.len() / 2]
    }

    #[test]
    fn polynomial_expansion_recovers_quadratic() {
        let f =
            |x: f64, y: f64| 0.5 + 0.3 * x - 0.2 * y + 0.01 * x * x + 0.02 * y * y - 0.03 * x * y;
        let img = Plane {
            w: 31,
            h: 31,
            v: (0..31 * 31)
                .map(|i| f((i % 31) as f64, (i / 31) as f64))
                .collect(),
        };
        let e = PolyExpansion::compute(&img, 5, 1.2);
        let (x, y) = (15.0, 15.0);
        let c = e.coeffs[15 * 31 + 15];
        assert!((c[0] - f(x, y)).abs() < 1e-9);
        assert!((c[1] - (0.3 + 0.02 * x - 0.03 * y)).abs() < 1e-9);
        assert!((c[2] - (-0.2 + 0.04 * y - 0.03 * x)).abs() < 1e-9);
        assert!((c[3] - 0.01).abs() < 1e-9);
        assert!((c[4] - 0.02).abs() < 1e-9);
        assert!((c[5] + 0.03).abs() < 1e-9);
    }

    #[test]
    fn recovers_translation() {
        let (w, h) = (96, 96);
        let (tx, ty) = (3.0, -2.0);
        let a = FrameImage::from_fn(w, h, |x, y| texture(x as f64, y as f64));
        let b = FrameImage::from_fn(w, h, |x, y| texture(x as f64 - tx, y as f64 - ty));
        let flow = dense_flow(&a, &b, &FarnebackParams::default()).unwrap();
        let mx = median(flow.dx.clone());
        let my = median(flow.dy.clone());
        assert!((mx - tx).abs() < 0.2, "dx {mx}");
        assert!((my - ty).abs() < 0.2, "dy {my}");
    }

    #[test]
    fn identical_frames_have_no_flow() {
        let a = FrameImage::from_fn(48, 40, |x, y| texture(x as f64, y as f64));
        let flow = dense_flow(&a, &a, &FarnebackParams::default()).unwrap();
        assert!(flow.dx.iter().chain(&flow.dy).all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let a = FrameImage::from_fn(20, 20, |_, _| 0.0);
        let b = FrameImage::from_fn(21, 20, |_, _| 0.0);
        assert!(dense_flow(&a, &b, &FarnebackParams::default()).is_err());
    }
}
