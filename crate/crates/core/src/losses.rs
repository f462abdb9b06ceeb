//! Reference contrastive, direction and counterfactual losses over plain
//! feature matrices, with analytic gradients.
//!
//! Rows of every feature matrix are individual samples. Losses that compare
//! two matrices work on their cosine-similarity matrix, so all of them are
//! invariant to positive rescaling of any row.

use rayon::prelude::*;

use crate::error::{ensure_dim, Error, Result};
use crate::matrix::Matrix;

/// Smoothing added to the target distribution inside KL logarithms.
pub const KL_EPSILON: f64 = 1e-8;

/// Temperature used when none is given (CLIP's published value).
pub const DEFAULT_TAU: f64 = 0.07;

pub const DEFAULT_LAMBDA1: f64 = 0.2;
pub const DEFAULT_LAMBDA2: f64 = 0.1;

pub const DEFAULT_GAMMA: f64 = 0.5;

/// A loss value with its gradient with respect to both input matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradient {
    pub value: f64,
    pub d_first: Matrix,
    pub d_second: Matrix,
}

/// Same-class indicator for a batch, normalized along rows and along columns.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub raw: Matrix,
    pub row_normalized: Matrix,
    pub col_normalized: Matrix,
}

impl GroundTruth {
    pub fn from_labels(labels: &[u32]) -> GroundTruth {
        let b = labels.len();
        let mut raw = Matrix::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                if labels[i] == labels[j] {
                    raw.set(i, j, 1.0);
                }
            }
        }
        let mut row_normalized = raw.clone();
        for i in 0..b {
            let s: f64 = raw.row(i).iter().sum();
            row_normalized.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        let mut col_normalized = raw.clone();
        for j in 0..b {
            let s: f64 = (0..b).map(|i| raw.get(i, j)).sum();
            for i in 0..b {
                col_normalized.set(i, j, raw.get(i, j) / s);
            }
        }
        GroundTruth {
            raw,
            row_normalized,
            col_normalized,
        }
    }
}

fn norms(m: &Matrix, what: &str) -> Result<Vec<f64>> {
    m.check_finite()?;
    m.iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                Ok(n)
            } else {
                Err(Error::invalid(format!("{what} row {i} has zero norm")))
            }
        })
        .collect()
}

fn check_pair(a: &Matrix, b: &Matrix) -> Result<()> {
    ensure_dim(a.cols(), b.cols())?;
    ensure_dim(a.rows(), b.rows())?;
    if a.rows() == 0 {
        return Err(Error::argument("empty batch"));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::argument(format!("tau must be positive, got {tau}")))
    }
}

/// Cosine similarities of every row of `f` with every row of `t`.
pub fn cosine_matrix(f: &Matrix, t: &Matrix) -> Result<Matrix> {
    ensure_dim(f.cols(), t.cols())?;
    let (nf, nt) = (norms(f, "first matrix")?, norms(t, "second matrix")?);
    let mut s = Matrix::zeros(f.rows(), t.rows());
    s.as_mut_slice()
        .par_chunks_mut(t.rows().max(1))
        .enumerate()
        .for_each(|(i, out)| {
            let fi = f.row(i);
            for (j, o) in out.iter_mut().enumerate() {
                let dot: f64 = fi.iter().zip(t.row(j)).map(|(a, b)| a * b).sum();
                *o = (dot / (nf[i] * nt[j])).clamp(-1.0, 1.0);
            }
        });
    Ok(s)
}

/// Pulls a gradient with respect to the cosine matrix back to both inputs.
fn cosine_backward(f: &Matrix, t: &Matrix, s: &Matrix, g: &Matrix) -> (Matrix, Matrix) {
    let nf = norms(f, "").expect("checked by caller");
    let nt = norms(t, "").expect("checked by caller");
    let (b, c, d) = (f.rows(), t.rows(), f.cols());
    let mut df = Matrix::zeros(b, d);
    for i in 0..b {
        let out = df.row_mut(i);
        let mut self_coef = 0.0;
        for j in 0..c {
            let w = g.get(i, j) / (nf[i] * nt[j]);
            for (o, v) in out.iter_mut().zip(t.row(j)) {
                *o += w * v;
            }
            self_coef += g.get(i, j) * s.get(i, j);
        }
        let k = self_coef / (nf[i] * nf[i]);
        for (o, v) in out.iter_mut().zip(f.row(i)) {
            *o -= k * v;
        }
    }
    let mut dt = Matrix::zeros(c, d);
    for j in 0..c {
        let out = dt.row_mut(j);
        let mut self_coef = 0.0;
        for i in 0..b {
            let w = g.get(i, j) / (nf[i] * nt[j]);
            for (o, v) in out.iter_mut().zip(f.row(i)) {
                *o += w * v;
            }
            self_coef += g.get(i, j) * s.get(i, j);
        }
        let k = self_coef / (nt[j] * nt[j]);
        for (o, v) in out.iter_mut().zip(t.row(j)) {
            *o -= k * v;
        }
    }
    (df, dt)
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// KL(softmax(z) || q) and its gradient with respect to `z`.
fn kl_softmax(z: &[f64], q: &[f64]) -> (f64, Vec<f64>) {
    let lp = log_softmax(z);
    let a: Vec<f64> = lp
        .iter()
        .zip(q)
        .map(|(l, qj)| l - (qj + KL_EPSILON).ln())
        .collect();
    let kl: f64 = lp.iter().zip(&a).map(|(l, aj)| l.exp() * aj).sum();
    let grad = lp
        .iter()
        .zip(&a)
        .map(|(l, aj)| l.exp() * (aj - kl))
        .collect();
    (kl, grad)
}

/// -log softmax(z)[target] and its gradient with respect to `z`.
fn cross_entropy(z: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lp = log_softmax(z);
    let mut grad: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    grad[target] -= 1.0;
    (-lp[target], grad)
}

fn column(m: &Matrix, j: usize) -> Vec<f64> {
    (0..m.rows()).map(|i| m.get(i, j)).collect()
}

/// Applies a per-row and a per-column loss to `s / tau`.
///
/// Returns the weighted sum of both means and the gradient with respect to `s`.
/// Rows and columns are evaluated in parallel and summed in index order.
fn row_column_loss(
    s: &Matrix,
    tau: f64,
    row_weight: f64,
    col_weight: f64,
    row_loss: impl Fn(usize, &[f64]) -> (f64, Vec<f64>) + Sync,
    col_loss: impl Fn(usize, &[f64]) -> (f64, Vec<f64>) + Sync,
) -> (f64, Matrix) {
    let b = s.rows();
    let scaled = s.map(|v| v / tau);
    let rows: Vec<(f64, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|i| row_loss(i, scaled.row(i)))
        .collect();
    let cols: Vec<(f64, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|j| col_loss(j, &column(&scaled, j)))
        .collect();
    let (rw, cw) = (row_weight / b as f64, col_weight / b as f64);
    let mut value = 0.0;
    let mut g = Matrix::zeros(b, b);
    for (i, (v, gr)) in rows.iter().enumerate() {
        value += rw * v;
        for (j, x) in gr.iter().enumerate() {
            g.set(i, j, rw * x / tau);
        }
    }
    for (j, (v, gc)) in cols.iter().enumerate() {
        value += cw * v;
        for (i, x) in gc.iter().enumerate() {
            g.set(i, j, g.get(i, j) + cw * x / tau);
        }
    }
    (value, g)
}

/// Row and column KL between the softmaxed similarity and the normalized
/// same-class matrix, each averaged over the batch.
pub fn kl_contrastive(f: &Matrix, t: &Matrix, labels: &[u32], tau: f64) -> Result<f64> {
    kl_contrastive_grad(f, t, labels, tau).map(|g| g.value)
}

pub fn kl_contrastive_grad(
    f: &Matrix,
    t: &Matrix,
    labels: &[u32],
    tau: f64,
) -> Result<PairGradient> {
    check_pair(f, t)?;
    check_tau(tau)?;
    ensure_dim(f.rows(), labels.len())?;
    let s = cosine_matrix(f, t)?;
    let q = GroundTruth::from_labels(labels);
    let (value, g) = row_column_loss(
        &s,
        tau,
        1.0,
        1.0,
        |i, z| kl_softmax(z, q.row_normalized.row(i)),
        |j, z| kl_softmax(z, &column(&q.col_normalized, j)),
    );
    let (d_first, d_second) = cosine_backward(f, t, &s, &g);
    Ok(PairGradient {
        value,
        d_first,
        d_second,
    })
}

/// Symmetric InfoNCE between two views of the same instances: matching rows
/// are positives, everything else in the batch is a negative.
pub fn ce_contrastive(lite: &Matrix, heavy: &Matrix, tau: f64) -> Result<f64> {
    ce_contrastive_grad(lite, heavy, tau).map(|g| g.value)
}

pub fn ce_contrastive_grad(lite: &Matrix, heavy: &Matrix, tau: f64) -> Result<PairGradient> {
    check_pair(lite, heavy)?;
    check_tau(tau)?;
    let s = cosine_matrix(lite, heavy)?;
    let (value, g) = row_column_loss(
        &s,
        tau,
        0.5,
        0.5,
        |i, z| cross_entropy(z, i),
        |j, z| cross_entropy(z, j),
    );
    let (d_first, d_second) = cosine_backward(lite, heavy, &s, &g);
    Ok(PairGradient {
        value,
        d_first,
        d_second,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentGradient {
    pub value: f64,
    pub d_lite: Matrix,
    pub d_heavy: Matrix,
    pub d_text: Matrix,
}

/// KL alignment of both visual views with the text plus lite/heavy InfoNCE.
pub fn combined_alignment(
    lite: &Matrix,
    heavy: &Matrix,
    text: &Matrix,
    labels: &[u32],
    tau: f64,
) -> Result<f64> {
    combined_alignment_grad(lite, heavy, text, labels, tau).map(|g| g.value)
}

pub fn combined_alignment_grad(
    lite: &Matrix,
    heavy: &Matrix,
    text: &Matrix,
    labels: &[u32],
    tau: f64,
) -> Result<AlignmentGradient> {
    let kl_l = kl_contrastive_grad(lite, text, labels, tau)?;
    let kl_h = kl_contrastive_grad(heavy, text, labels, tau)?;
    let ce = ce_contrastive_grad(lite, heavy, tau)?;
    let add = |a: &Matrix, b: &Matrix| {
        Matrix::from_vec(
            a.rows(),
            a.cols(),
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(x, y)| x + y)
                .collect(),
        )
        .expect("same shape")
    };
    Ok(AlignmentGradient {
        value: kl_l.value + kl_h.value + ce.value,
        d_lite: add(&kl_l.d_first, &ce.d_first),
        d_heavy: add(&kl_h.d_first, &ce.d_second),
        d_text: add(&kl_l.d_second, &kl_h.d_second),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine of two vectors and its gradient with respect to each.
fn cosine_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    let c = dot(a, b) / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - c * x / (na * na))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / (na * nb) - c * y / (nb * nb))
        .collect();
    (c, da, db)
}

fn nonzero(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{what} has non-finite entries")));
    }
    if norm(v) == 0.0 {
        return Err(Error::invalid(format!("{what} has zero norm")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvsaTerm {
    pub loss: f64,
    /// Set when the target motion is zero; the sample is left out of averages.
    pub skipped: bool,
}

/// `1 - cos(pred, motion)` for a predicted and a measured 2-D camera motion.
pub fn svsa_loss(pred: [f64; 2], motion: [f64; 2]) -> Result<SvsaTerm> {
    nonzero(&pred, "predicted direction")?;
    if motion.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("camera motion has non-finite entries"));
    }
    if motion == [0.0, 0.0] {
        return Ok(SvsaTerm {
            loss: 0.0,
            skipped: true,
        });
    }
    let c = dot(&pred, &motion) / (norm(&pred) * norm(&motion));
    Ok(SvsaTerm {
        loss: 1.0 - c.clamp(-1.0, 1.0),
        skipped: false,
    })
}

/// Gradient of [`svsa_loss`] with respect to the prediction (zero when skipped).
pub fn svsa_loss_grad(pred: [f64; 2], motion: [f64; 2]) -> Result<(SvsaTerm, [f64; 2])> {
    let term = svsa_loss(pred, motion)?;
    if term.skipped {
        return Ok((term, [0.0; 2]));
    }
    let (_, dp, _) = cosine_grad(&pred, &motion);
    Ok((term, [-dp[0], -dp[1]]))
}

/// Mean SVSA loss over the samples that are not skipped; 0 when all are.
pub fn svsa_mean(preds: &Matrix, motions: &Matrix) -> Result<(f64, usize)> {
    ensure_dim(2, preds.cols())?;
    ensure_dim(2, motions.cols())?;
    ensure_dim(preds.rows(), motions.rows())?;
    let mut sum = 0.0;
    let mut used = 0;
    for (p, m) in preds.iter_rows().zip(motions.iter_rows()) {
        let term = svsa_loss([p[0], p[1]], [m[0], m[1]])?;
        if !term.skipped {
            sum += term.loss;
            used += 1;
        }
    }
    Ok((if used == 0 { 0.0 } else { sum / used as f64 }, used))
}

/// Which side of the margin the counterfactual hinge penalizes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Hinge {
    /// `max(0, gamma - cos)^2`: penalizes similarity below the margin.
    #[default]
    Below,
    /// `max(0, cos - gamma)^2`: penalizes similarity above the margin.
    Above,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > -1.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::argument(format!(
            "gamma must be in (-1, 1), got {gamma}"
        )))
    }
}

/// Squared hinge on the cosine between a label's text feature and the
/// visual feature of its counterfactual clip.
pub fn counterfactual_loss(text: &[f64], visual: &[f64], gamma: f64, hinge: Hinge) -> Result<f64> {
    counterfactual_loss_grad(text, visual, gamma, hinge).map(|g| g.0)
}

/// Loss with gradients with respect to `text` and `visual`.
pub fn counterfactual_loss_grad(
    text: &[f64],
    visual: &[f64],
    gamma: f64,
    hinge: Hinge,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    ensure_dim(text.len(), visual.len())?;
    nonzero(text, "text feature")?;
    nonzero(visual, "counterfactual feature")?;
    check_gamma(gamma)?;
    let (c, dt, dv) = cosine_grad(text, visual);
    let (gap, sign) = match hinge {
        Hinge::Below => (gamma - c, -1.0),
        Hinge::Above => (c - gamma, 1.0),
    };
    if gap <= 0.0 {
        return Ok((0.0, vec![0.0; text.len()], vec![0.0; visual.len()]));
    }
    let k = 2.0 * gap * sign;
    Ok((
        gap * gap,
        dt.iter().map(|x| k * x).collect(),
        dv.iter().map(|x| k * x).collect(),
    ))
}

/// Mean counterfactual loss over paired rows.
pub fn counterfactual_mean(
    text: &Matrix,
    visual: &Matrix,
    gamma: f64,
    hinge: Hinge,
) -> Result<f64> {
    check_pair(text, visual)?;
    let terms = text
        .iter_rows()
        .zip(visual.iter_rows())
        .map(|(t, v)| counterfactual_loss(t, v, gamma, hinge))
        .collect::<Result<Vec<_>>>()?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub contrastive: f64,
    pub svsa: f64,
    pub counterfactual: f64,
}

pub fn total_loss(parts: LossParts, lambda1: f64, lambda2: f64) -> f64 {
    parts.contrastive + lambda1 * parts.svsa + lambda2 * parts.counterfactual
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    #[test]
    fn cosine_of_orthonormal_rows_is_identity() {
        assert_eq!(
            cosine_matrix(&identity(3), &identity(3)).unwrap(),
            identity(3)
        );
    }

    #[test]
    fn cosine_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (f, t) = (random(&mut rng, 4, 8), random(&mut rng, 4, 8));
        let s = cosine_matrix(&f, &t).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let (a, b) = (f.row(i), t.row(j));
                let mut ab = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                for k in 0..8 {
                    ab += a[k] * b[k];
                    aa += a[k] * a[k];
                    bb += b[k] * b[k];
                }
                assert!((s.get(i, j) - ab / (aa.sqrt() * bb.sqrt())).abs() < 1e-12);
            }
        }
        let scaled =
            Matrix::from_vec(4, 8, f.as_slice().iter().map(|v| 3.0 * v).collect()).unwrap();
        let s3 = cosine_matrix(&scaled, &t).unwrap();
        for (a, b) in s.as_slice().iter().zip(s3.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_row_is_an_error() {
        let f = Matrix::from_rows(&[vec![0.0, 0.0]], 2).unwrap();
        let t = Matrix::from_rows(&[vec![1.0, 0.0]], 2).unwrap();
        assert!(cosine_matrix(&f, &t).is_err());
        assert!(kl_contrastive(&f, &t, &[0], 1.0).is_err());
    }

    #[test]
    fn ground_truth_normalizations_sum_to_one() {
        let q = GroundTruth::from_labels(&[0, 1, 0, 2, 1, 0]);
        for i in 0..6 {
            assert!((q.row_normalized.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!((column(&q.col_normalized, i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert_eq!(q.raw.get(0, 2), 1.0);
        assert_eq!(q.raw.get(0, 1), 0.0);
    }

    #[test]
    fn kl_single_sample_is_zero() {
        let f = Matrix::from_rows(&[vec![1.0, 2.0]], 2).unwrap();
        let v = kl_contrastive(&f, &f, &[4], 0.07).unwrap();
        assert!(v.abs() < 1e-7, "{v}");
    }

    #[test]
    fn kl_vanishes_at_low_temperature() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 2).unwrap();
        let s = cosine_matrix(&f, &f).unwrap();
        assert_eq!(s.as_slice(), &[1.0, -1.0, -1.0, 1.0]);
        let v = kl_contrastive(&f, &f, &[0, 1], 0.01).unwrap();
        assert!(v.abs() < 1e-3, "{v}");
    }

    /// Direct double-loop evaluation written independently of the module.
    fn kl_oracle(f: &Matrix, t: &Matrix, y: &[u32], tau: f64) -> f64 {
        let b = f.rows();
        let cos = |a: &[f64], c: &[f64]| {
            let d: f64 = a.iter().zip(c).map(|(x, z)| x * z).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt()
                * c.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let same = |i: usize, j: usize| if y[i] == y[j] { 1.0 } else { 0.0 };
        let mut total = 0.0;
        for i in 0..b {
            let z: Vec<f64> = (0..b)
                .map(|j| (cos(f.row(i), t.row(j)) / tau).exp())
                .collect();
            let zs: f64 = z.iter().sum();
            let qs: f64 = (0..b).map(|j| same(i, j)).sum();
            for j in 0..b {
                let p = z[j] / zs;
                total += p * (p / (same(i, j) / qs + 1e-8)).ln() / b as f64;
            }
        }
        for j in 0..b {
            let z: Vec<f64> = (0..b)
                .map(|i| (cos(f.row(i), t.row(j)) / tau).exp())
                .collect();
            let zs: f64 = z.iter().sum();
            let qs: f64 = (0..b).map(|i| same(i, j)).sum();
            for i in 0..b {
                let p = z[i] / zs;
                total += p * (p / (same(i, j) / qs + 1e-8)).ln() / b as f64;
            }
        }
        total
    }

    #[test]
    fn kl_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let (f, t) = (random(&mut rng, 4, 6), random(&mut rng, 4, 6));
            let y = [0, 1, 0, 2];
            let a = kl_contrastive(&f, &t, &y, 0.5).unwrap();
            assert!((a - kl_oracle(&f, &t, &y, 0.5)).abs() < 1e-9);
        }
    }

    #[test]
    fn ce_closed_form_for_orthonormal_rows() {
        let tau = 0.07;
        let v = ce_contrastive(&identity(4), &identity(4), tau).unwrap();
        let e = (1.0f64 / tau).exp();
        let expected = -(e / (e + 3.0)).ln();
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn ce_single_sample_is_zero() {
        let f = Matrix::from_rows(&[vec![0.3, -2.0]], 2).unwrap();
        let g = Matrix::from_rows(&[vec![1.0, 1.0]], 2).unwrap();
        assert_eq!(ce_contrastive(&f, &g, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn ce_is_invariant_to_joint_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random(&mut rng, 5, 4), random(&mut rng, 5, 4));
        let perm = [3, 0, 4, 1, 2];
        let v = ce_contrastive(&a, &b, 0.2).unwrap();
        let w = ce_contrastive(&a.select_rows(&perm), &b.select_rows(&perm), 0.2).unwrap();
        assert!((v - w).abs() < 1e-12);
    }

    #[test]
    fn combined_is_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, h, t) = (
            random(&mut rng, 4, 5),
            random(&mut rng, 4, 5),
            random(&mut rng, 4, 5),
        );
        let y = [1, 1, 0, 2];
        let sum = kl_contrastive(&l, &t, &y, 0.3).unwrap()
            + kl_contrastive(&h, &t, &y, 0.3).unwrap()
            + ce_contrastive(&l, &h, 0.3).unwrap();
        assert!((combined_alignment(&l, &h, &t, &y, 0.3).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn svsa_fixtures() {
        assert_eq!(svsa_loss([3.0, 4.0], [3.0, 4.0]).unwrap().loss, 0.0);
        assert_eq!(svsa_loss([1.0, 0.0], [0.0, 1.0]).unwrap().loss, 1.0);
        assert_eq!(svsa_loss([1.0, 0.0], [-2.0, 0.0]).unwrap().loss, 2.0);
        let still = svsa_loss([1.0, 0.0], [0.0, 0.0]).unwrap();
        assert!(still.skipped && still.loss == 0.0);
        assert!(svsa_loss([0.0, 0.0], [1.0, 0.0]).is_err());
    }

    #[test]
    fn svsa_mean_skips_static_clips() {
        let p = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]], 2).unwrap();
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]], 2).unwrap();
        assert_eq!(svsa_mean(&p, &m).unwrap(), (1.0, 1));
    }

    #[test]
    fn counterfactual_hinge_values() {
        let gamma = 0.5;
        let t = [1.0, 0.0];
        let at = |c: f64| [c, (1.0 - c * c).sqrt()];
        assert_eq!(
            counterfactual_loss(&t, &at(gamma), gamma, Hinge::Below).unwrap(),
            0.0
        );
        let v = counterfactual_loss(&t, &at(gamma - 0.2), gamma, Hinge::Below).unwrap();
        assert!((v - 0.04).abs() < 1e-12);
        assert_eq!(
            counterfactual_loss(&t, &at(0.9), gamma, Hinge::Below).unwrap(),
            0.0
        );
        let above = counterfactual_loss(&t, &at(0.9), gamma, Hinge::Above).unwrap();
        assert!((above - 0.16).abs() < 1e-12);
        assert!(counterfactual_loss(&t, &at(0.1), gamma, Hinge::Above).unwrap() == 0.0);
        assert!(counterfactual_loss(&t, &t, 1.0, Hinge::Below).is_err());
    }

    #[test]
    fn total_defaults() {
        let p = LossParts {
            contrastive: 1.0,
            svsa: 1.0,
            counterfactual: 1.0,
        };
        assert!((total_loss(p, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2) - 1.3).abs() < 1e-15);
        assert_eq!(total_loss(p, 0.0, 0.0), 1.0);
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-5;
        for k in 0..x.len() {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[k] += h;
            down[k] -= h;
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            let scale = fd.abs().max(grad[k].abs()).max(1e-6);
            assert!(
                (fd - grad[k]).abs() / scale < 1e-4,
                "component {k}: fd {fd}, analytic {}",
                grad[k]
            );
        }
    }

    #[test]
    fn kl_and_ce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = [0, 1, 0];
        for _ in 0..3 {
            let (f, t) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4));
            let g = kl_contrastive_grad(&f, &t, &y, 0.5).unwrap();
            let with_f = |x: &[f64]| {
                kl_contrastive(&Matrix::from_vec(3, 4, x.to_vec()).unwrap(), &t, &y, 0.5).unwrap()
            };
            fd_check(with_f, f.as_slice(), g.d_first.as_slice());
            let c = ce_contrastive_grad(&f, &t, 0.5).unwrap();
            let with_t = |x: &[f64]| {
                ce_contrastive(&f, &Matrix::from_vec(3, 4, x.to_vec()).unwrap(), 0.5).unwrap()
            };
            fd_check(with_t, t.as_slice(), c.d_second.as_slice());
        }
    }

    #[test]
    fn svsa_and_counterfactual_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let m = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let (_, g) = svsa_loss_grad(p, m).unwrap();
            fd_check(|x| svsa_loss([x[0], x[1]], m).unwrap().loss, &p, &g);
            let t: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, dt, dv) = counterfactual_loss_grad(&t, &v, 0.9, Hinge::Below).unwrap();
            fd_check(
                |x| counterfactual_loss(x, &v, 0.9, Hinge::Below).unwrap(),
                &t,
                &dt,
            );
            fd_check(
                |x| counterfactual_loss(&t, x, 0.9, Hinge::Below).unwrap(),
                &v,
                &dv,
            );
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn losses_ignore_row_scale(seed in any::<u64>(), scale in 0.01f64..100.0, row in 0usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (f, t) = (random(&mut rng, 4, 3), random(&mut rng, 4, 3));
                let mut g = f.clone();
                g.row_mut(row).iter_mut().for_each(|v| *v *= scale);
                let y = [0, 1, 1, 0];
                let a = kl_contrastive(&f, &t, &y, 0.3).unwrap();
                let b = kl_contrastive(&g, &t, &y, 0.3).unwrap();
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
                let a = ce_contrastive(&f, &t, 0.3).unwrap();
                let b = ce_contrastive(&g, &t, 0.3).unwrap();
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }

            #[test]
            fn kl_is_nonnegative(seed in any::<u64>(), tau in 0.05f64..5.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (f, t) = (random(&mut rng, 5, 3), random(&mut rng, 5, 3));
                let y: Vec<u32> = (0..5).map(|_| rng.random_range(0..3)).collect();
                prop_assert!(kl_contrastive(&f, &t, &y, tau).unwrap() > -1e-6);
            }

            #[test]
            fn counterfactual_hinge_is_monotone(gamma in -0.9f64..0.9, a in -1.0f64..1.0, b in -1.0f64..1.0) {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                let at = |c: f64| [c, (1.0 - c * c).max(0.0).sqrt()];
                let t = [1.0, 0.0];
                let l_lo = counterfactual_loss(&t, &at(lo), gamma, Hinge::Below).unwrap();
                let l_hi = counterfactual_loss(&t, &at(hi), gamma, Hinge::Below).unwrap();
                prop_assert!(l_hi <= l_lo + 1e-12);
                if lo >= gamma + 1e-9 {
                    prop_assert_eq!(l_lo, 0.0);
                }
            }
        }
    }
}
