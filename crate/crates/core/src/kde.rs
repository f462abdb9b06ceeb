//! Diagonal-Gaussian kernel density estimation.
//!
//! A model is a uniform mixture of axis-aligned Gaussians centred at the
//! fitted points. Bandwidths are either shared per dimension (Silverman's
//! rule) or given per point (blurriness, where each video's frame-level
//! standard deviation is its own kernel width).

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{ensure_dim, Error, Result};
use crate::matrix::Matrix;
use crate::pca::Pca;
use crate::props::{Property, PropertyTable};

/// Smallest bandwidth used for a dimension (or point) without spread.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

/// Dimension semantic vectors are reduced to before density estimation.
pub const SEMANTIC_COMPONENTS: usize = 32;

const MAGIC: &[u8; 4] = b"EGKD";
const VERSION: u32 = 1;

/// Queries evaluated together; also the unit of parallel work.
const BLOCK: usize = 64;

/// From this dimension on, squared distances come from one matrix product per block.
const GEMM_MIN_DIM: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Shared,
    PerPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Bandwidths {
    /// One width per dimension.
    Shared(Vec<f64>),
    /// One width per point, applied to every dimension.
    PerPoint(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct DensityModel {
    points: Matrix,
    bandwidths: Bandwidths,
    projection: Option<Pca>,
    warnings: Vec<String>,
    kernel: Kernel,
}

impl PartialEq for DensityModel {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points
            && self.bandwidths == other.bandwidths
            && self.projection == other.projection
    }
}

impl DensityModel {
    /// Shared-bandwidth model with Silverman's multivariate rule
    /// `h_i = σ_i (4 / ((d + 2) n))^(1 / (d + 4))`, σ the population std.
    pub fn fit(points: &Matrix) -> Result<DensityModel> {
        Ok(DensityModel::fit_ordered(points)?.0)
    }

    /// Projects `points` onto at most `components` principal axes fitted on
    /// them, then fits a shared-bandwidth model. The basis is kept for queries.
    pub fn fit_projected(points: &Matrix, components: usize) -> Result<DensityModel> {
        let (unique, counts, _) = dedup_rows(points);
        let pca = Pca::fit_weighted(&unique, &counts, components)?;
        DensityModel::fit_in_basis(points, pca)
    }

    /// Like [`fit_projected`](Self::fit_projected) with a basis fitted elsewhere.
    pub fn fit_in_basis(points: &Matrix, pca: Pca) -> Result<DensityModel> {
        Ok(DensityModel::fit_in_basis_ordered(points, pca)?.0)
    }

    /// One-dimensional model with a kernel of width `stds[i]` at `means[i]`.
    pub fn fit_blurriness(means: &[f64], stds: &[f64]) -> Result<DensityModel> {
        Ok(DensityModel::fit_blurriness_ordered(means, stds)?.0)
    }

    pub fn mode(&self) -> Mode {
        match self.bandwidths {
            Bandwidths::Shared(_) => Mode::Shared,
            Bandwidths::PerPoint(_) => Mode::PerPoint,
        }
    }

    /// Dimension of query vectors (before any projection).
    pub fn dim(&self) -> usize {
        match &self.projection {
            Some(p) => p.input_dim(),
            None => self.points.cols(),
        }
    }

    /// Number of fitted points.
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Fitted points in canonical (lexicographic) order, after projection.
    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn bandwidths(&self) -> &Bandwidths {
        &self.bandwidths
    }

    pub fn projection(&self) -> Option<&Pca> {
        self.projection.as_ref()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let q = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.log_density_batch(&q)?[0])
    }

    /// Log density of every row of `xs`.
    pub fn log_density_batch(&self, xs: &Matrix) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        ensure_dim(self.dim(), xs.cols())?;
        xs.check_finite()?;
        let q = self.to_kernel_space(xs)?;
        Ok(self.kernel.eval_many(&q, None))
    }

    /// Bytes of the versioned model blob, optionally tagged with the property it models.
    pub fn encode(&self, property: Option<Property>) -> Vec<u8> {
        let (n, d) = (self.points.rows(), self.points.cols());
        let mut out = Vec::with_capacity(40 + 8 * (n * d + n + d));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.mode() {
            Mode::Shared => 0,
            Mode::PerPoint => 1,
        });
        out.push(property.map_or(u8::MAX, |p| p.index() as u8));
        out.push(u8::from(self.projection.is_some()));
        out.push(0);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        let put = |out: &mut Vec<u8>, v: &[f64]| {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(&mut out, self.points.as_slice());
        match &self.bandwidths {
            Bandwidths::Shared(h) | Bandwidths::PerPoint(h) => put(&mut out, h),
        }
        if let Some(p) = &self.projection {
            out.extend_from_slice(&(p.input_dim() as u64).to_le_bytes());
            put(&mut out, &p.mean);
            put(&mut out, p.components.as_slice());
            put(&mut out, &p.explained_variance);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<(Option<Property>, DensityModel)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::invalid("not a density model file"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::invalid(format!(
                "unsupported model version {version}"
            )));
        }
        let head = r.take(4)?;
        let (mode, tag, flags) = (head[0], head[1], head[2]);
        let property = match tag {
            u8::MAX => None,
            t => Some(
                *Property::ALL
                    .get(t as usize)
                    .ok_or_else(|| Error::invalid(format!("bad property tag {t}")))?,
            ),
        };
        let n = r.u64()? as usize;
        let d = r.u64()? as usize;
        let points = Matrix::from_vec(n, d, r.reals(n * d)?)?;
        let bandwidths = match mode {
            0 => Bandwidths::Shared(r.reals(d)?),
            1 => Bandwidths::PerPoint(r.reals(n)?),
            m => return Err(Error::invalid(format!("bad model mode {m}"))),
        };
        let projection = if flags & 1 == 1 {
            let input = r.u64()? as usize;
            let mean = r.reals(input)?;
            let components = Matrix::from_vec(d, input, r.reals(d * input)?)?;
            let explained_variance = r.reals(d)?;
            Some(Pca {
                mean,
                components,
                explained_variance,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::invalid("trailing bytes after density model"));
        }
        points.check_finite()?;
        let h = match &bandwidths {
            Bandwidths::Shared(h) | Bandwidths::PerPoint(h) => h,
        };
        if h.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("model bandwidths must be positive"));
        }
        let min = if mode == 0 { 2 } else { 1 };
        if n < min {
            return Err(Error::invalid(format!("model has {n} points")));
        }
        let order = canonical_order(&points, per_point(&bandwidths));
        let points = points.select_rows(&order);
        let bandwidths = match bandwidths {
            Bandwidths::PerPoint(h) => Bandwidths::PerPoint(order.iter().map(|&i| h[i]).collect()),
            shared => shared,
        };
        Ok((
            property,
            DensityModel::assemble(points, bandwidths, projection, Vec::new()),
        ))
    }

    pub fn save(&self, path: &Path, property: Option<Property>) -> Result<()> {
        std::fs::write(path, self.encode(property)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Option<Property>, DensityModel)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        DensityModel::decode(&bytes)
    }

    /// The model plus, for each canonical row, the input row it came from.
    fn fit_ordered(points: &Matrix) -> Result<(DensityModel, Vec<usize>)> {
        if points.rows() < 2 {
            return Err(Error::argument(format!(
                "density fit needs at least 2 points, got {}",
                points.rows()
            )));
        }
        if points.cols() == 0 {
            return Err(Error::argument("density fit needs at least one dimension"));
        }
        points.check_finite()?;
        let order = canonical_order(points, None);
        let sorted = points.select_rows(&order);
        let (h, warnings) = silverman(&sorted);
        Ok((
            DensityModel::assemble(sorted, Bandwidths::Shared(h), None, warnings),
            order,
        ))
    }

    fn fit_in_basis_ordered(points: &Matrix, pca: Pca) -> Result<(DensityModel, Vec<usize>)> {
        ensure_dim(pca.input_dim(), points.cols())?;
        points.check_finite()?;
        let projected = project_dedup(&pca, points)?;
        let (mut model, order) = DensityModel::fit_ordered(&projected)?;
        model.projection = Some(pca);
        Ok((model, order))
    }

    fn fit_blurriness_ordered(means: &[f64], stds: &[f64]) -> Result<(DensityModel, Vec<usize>)> {
        ensure_dim(means.len(), stds.len())?;
        if means.is_empty() {
            return Err(Error::argument("blurriness fit needs at least 1 point"));
        }
        if means.iter().any(|m| !m.is_finite())
            || stds.iter().any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return Err(Error::argument(
                "blurriness means must be finite and stds finite and >= 0",
            ));
        }
        let mut floored = 0;
        let h: Vec<f64> = stds
            .iter()
            .map(|&s| {
                if s < BANDWIDTH_FLOOR {
                    floored += 1;
                    BANDWIDTH_FLOOR
                } else {
                    s
                }
            })
            .collect();
        let mut warnings = Vec::new();
        if floored > 0 {
            warnings.push(format!(
                "{floored} point(s) without spread; bandwidth floored to {BANDWIDTH_FLOOR:e}"
            ));
        }
        let points = Matrix::column(means);
        let order = canonical_order(&points, Some(&h));
        let sorted = points.select_rows(&order);
        let h = order.iter().map(|&i| h[i]).collect();
        Ok((
            DensityModel::assemble(sorted, Bandwidths::PerPoint(h), None, warnings),
            order,
        ))
    }

    fn assemble(
        points: Matrix,
        bandwidths: Bandwidths,
        projection: Option<Pca>,
        warnings: Vec<String>,
    ) -> DensityModel {
        let kernel = Kernel::new(&points, &bandwidths);
        DensityModel {
            points,
            bandwidths,
            projection,
            warnings,
            kernel,
        }
    }

    fn to_kernel_space(&self, xs: &Matrix) -> Result<Matrix> {
        let xs = match &self.projection {
            Some(p) => project_dedup(p, xs)?,
            None => xs.clone(),
        };
        Ok(self.kernel.transform(xs))
    }

    /// Leave-one-out log density of each canonical point.
    fn leave_one_out_canonical(&self) -> Result<Vec<f64>> {
        if self.len() < 2 {
            return Err(Error::argument("leave-one-out needs at least 2 points"));
        }
        let k = &self.kernel;
        let centres = Matrix::from_vec(k.counts.len(), k.dim, k.rows.clone())?;
        let exclude: Vec<usize> = (0..k.counts.len()).collect();
        let per_unique = k.eval_many(&centres, Some(&exclude));
        Ok(k.group.iter().map(|&g| per_unique[g]).collect())
    }
}

/// Log-likelihood of every row of `set_b` under `model_a`, summed: the log
/// of the product of densities.
pub fn ego_similarity(model_a: &DensityModel, set_b: &Matrix) -> Result<f64> {
    Ok(model_a
        .log_density_batch(set_b)?
        .iter()
        .fold(0.0, |acc, v| acc + v))
}

/// Representations of the rows of `table` that have `property`, one per row.
///
/// Blurriness rows are `[mean, std]`.
pub fn property_matrix(table: &PropertyTable, property: Property) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = table
        .rows
        .iter()
        .filter_map(|r| r.representation(property))
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid(format!("no rows with property {property}")));
    }
    let d = rows[0].len();
    Matrix::from_rows(&rows, d)
}

/// Fits the model a property uses: semantic vectors are projected first and
/// blurriness gets per-point bandwidths.
pub fn fit_property(table: &PropertyTable, property: Property) -> Result<DensityModel> {
    let m = property_matrix(table, property)?;
    match property {
        Property::Semantic => DensityModel::fit_projected(&m, SEMANTIC_COMPONENTS),
        Property::Blur => {
            let t = m.transpose();
            DensityModel::fit_blurriness(t.row(0), t.row(1))
        }
        _ => DensityModel::fit(&m),
    }
}

/// Query points of a table for a model of `property` (blurriness queries are the means).
pub fn property_queries(table: &PropertyTable, property: Property) -> Result<Matrix> {
    let m = property_matrix(table, property)?;
    Ok(match property {
        Property::Blur => Matrix::column(m.transpose().row(0)),
        _ => m,
    })
}

/// Leave-one-out log density of each row under a shared-bandwidth model
/// fitted to all rows, in input order.
pub fn leave_one_out(points: &Matrix) -> Result<Vec<f64>> {
    let (model, order) = DensityModel::fit_ordered(points)?;
    Ok(scatter(&model.leave_one_out_canonical()?, &order))
}

/// [`leave_one_out`] after projecting onto a fixed basis.
pub fn leave_one_out_in_basis(points: &Matrix, pca: Pca) -> Result<Vec<f64>> {
    let (model, order) = DensityModel::fit_in_basis_ordered(points, pca)?;
    Ok(scatter(&model.leave_one_out_canonical()?, &order))
}

/// [`leave_one_out`] for the per-point blurriness model.
pub fn leave_one_out_blurriness(means: &[f64], stds: &[f64]) -> Result<Vec<f64>> {
    let (model, order) = DensityModel::fit_blurriness_ordered(means, stds)?;
    Ok(scatter(&model.leave_one_out_canonical()?, &order))
}

fn scatter(canonical: &[f64], order: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; canonical.len()];
    for (pos, &row) in order.iter().enumerate() {
        out[row] = canonical[pos];
    }
    out
}

fn per_point(b: &Bandwidths) -> Option<&[f64]> {
    match b {
        Bandwidths::PerPoint(h) => Some(h),
        Bandwidths::Shared(_) => None,
    }
}

/// Row indices sorted lexicographically by value, then by per-point bandwidth.
fn canonical_order(points: &Matrix, bandwidths: Option<&[f64]>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.rows()).collect();
    order.sort_by(|&a, &b| {
        let rows = points
            .row(a)
            .iter()
            .zip(points.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal);
        rows.then_with(|| match bandwidths {
            Some(h) => h[a].total_cmp(&h[b]),
            None => std::cmp::Ordering::Equal,
        })
    });
    order
}

fn silverman(points: &Matrix) -> (Vec<f64>, Vec<String>) {
    let (n, d) = (points.rows(), points.cols());
    let factor = (4.0 / ((d as f64 + 2.0) * n as f64)).powf(1.0 / (d as f64 + 4.0));
    let mut warnings = Vec::new();
    let h = (0..d)
        .map(|i| {
            let mean = points.iter_rows().map(|r| r[i]).sum::<f64>() / n as f64;
            let var = points
                .iter_rows()
                .map(|r| (r[i] - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let sigma = var.sqrt();
            if sigma < BANDWIDTH_FLOOR {
                warnings.push(format!(
                    "dimension {i} has no spread; bandwidth floored to {BANDWIDTH_FLOOR:e}"
                ));
                BANDWIDTH_FLOOR
            } else {
                sigma * factor
            }
        })
        .collect();
    (h, warnings)
}

fn row_key(row: &[f64]) -> Vec<u64> {
    // Adding 0.0 maps -0.0 to +0.0 so both land in the same bucket.
    row.iter().map(|&v| (v + 0.0).to_bits()).collect()
}

/// Distinct rows in first-seen order, their multiplicities, and each input row's distinct index.
fn dedup_rows(m: &Matrix) -> (Matrix, Vec<f64>, Vec<usize>) {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut first = Vec::new();
    let mut counts = Vec::new();
    let index = m
        .iter_rows()
        .enumerate()
        .map(|(i, r)| {
            *seen.entry(row_key(r)).or_insert_with(|| {
                first.push(i);
                counts.push(0.0);
                first.len() - 1
            })
        })
        .collect::<Vec<_>>();
    for &g in &index {
        counts[g] += 1.0;
    }
    (m.select_rows(&first), counts, index)
}

fn project_dedup(pca: &Pca, xs: &Matrix) -> Result<Matrix> {
    let (unique, _, index) = dedup_rows(xs);
    let projected = pca.project_rows(&unique)?;
    Ok(projected.select_rows(&index))
}

/// Evaluation-ready form of a model: distinct centres with multiplicities,
/// translated (and for shared bandwidths, scaled to unit width).
#[derive(Debug, Clone)]
struct Kernel {
    dim: usize,
    n: usize,
    /// Distinct centres, row-major.
    rows: Vec<f64>,
    /// The same centres, dimension-major.
    cols: Vec<f64>,
    sqnorm: Vec<f64>,
    counts: Vec<f64>,
    /// ln(count), minus d·ln(h) for per-point widths.
    log_weight: Vec<f64>,
    /// 1/h² per centre for per-point widths.
    precision: Option<Vec<f64>>,
    shift: Vec<f64>,
    scale: Vec<f64>,
    log_norm: f64,
    /// Canonical point index to distinct centre.
    group: Vec<usize>,
}

impl Kernel {
    fn new(points: &Matrix, bandwidths: &Bandwidths) -> Kernel {
        let (n, d) = (points.rows(), points.cols());
        let shift: Vec<f64> = (0..d)
            .map(|i| points.iter_rows().map(|r| r[i]).sum::<f64>() / n as f64)
            .collect();
        let (scale, log_norm) = match bandwidths {
            Bandwidths::Shared(h) => (
                h.iter().map(|v| 1.0 / v).collect(),
                -h.iter().map(|v| v.ln()).sum::<f64>() - 0.5 * d as f64 * TAU.ln(),
            ),
            Bandwidths::PerPoint(_) => (vec![1.0; d], -0.5 * d as f64 * TAU.ln()),
        };
        let h_pp = per_point(bandwidths);

        let mut group = Vec::with_capacity(n);
        let mut rows = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut widths = Vec::new();
        for i in 0..n {
            let same = i > 0
                && points.row(i) == points.row(i - 1)
                && h_pp.is_none_or(|h| h[i] == h[i - 1]);
            if same {
                *counts.last_mut().unwrap() += 1.0;
            } else {
                rows.extend(
                    points
                        .row(i)
                        .iter()
                        .zip(shift.iter().zip(&scale))
                        .map(|(v, (s, c))| (v - s) * c),
                );
                counts.push(1.0);
                if let Some(h) = h_pp {
                    widths.push(h[i]);
                }
            }
            group.push(counts.len() - 1);
        }
        let u = counts.len();
        let mut cols = vec![0.0; u * d];
        for j in 0..u {
            for i in 0..d {
                cols[i * u + j] = rows[j * d + i];
            }
        }
        let sqnorm = rows
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        let (log_weight, precision) = match h_pp {
            Some(_) => (
                counts
                    .iter()
                    .zip(&widths)
                    .map(|(c, h)| c.ln() - d as f64 * h.ln())
                    .collect(),
                Some(widths.iter().map(|h| 1.0 / (h * h)).collect()),
            ),
            None => (counts.iter().map(|c| c.ln()).collect(), None),
        };
        Kernel {
            dim: d,
            n,
            rows,
            cols,
            sqnorm,
            counts,
            log_weight,
            precision,
            shift,
            scale,
            log_norm,
            group,
        }
    }

    fn transform(&self, mut xs: Matrix) -> Matrix {
        for i in 0..xs.rows() {
            for ((v, s), c) in xs.row_mut(i).iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - s) * c;
            }
        }
        xs
    }

    /// Log density of each row of `q` (already in kernel space). With
    /// `exclude`, query `i` drops one copy of centre `exclude[i]`.
    fn eval_many(&self, q: &Matrix, exclude: Option<&[usize]>) -> Vec<f64> {
        if exclude.is_some() {
            return self.eval_unique(q, exclude);
        }
        let (unique, _, index) = dedup_rows(q);
        let vals = self.eval_unique(&unique, None);
        index.iter().map(|&g| vals[g]).collect()
    }

    fn eval_unique(&self, q: &Matrix, exclude: Option<&[usize]>) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; q.rows()];
        out.par_chunks_mut(BLOCK)
            .enumerate()
            .for_each(|(b, chunk)| {
                let start = b * BLOCK;
                let block = &q.as_slice()[start * d..(start + chunk.len()) * d];
                let ex = exclude.map(|e| &e[start..start + chunk.len()]);
                self.eval_block(block, ex, chunk);
            });
        out
    }

    fn eval_block(&self, queries: &[f64], exclude: Option<&[usize]>, out: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: the feature was checked just above.
                return unsafe { self.eval_block_avx512(queries, exclude, out) };
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was checked just above.
                return unsafe { self.eval_block_avx2(queries, exclude, out) };
            }
        }
        self.eval_block_generic(queries, exclude, out)
    }

    // Wider-vector builds of the same code. No fused multiply-add is enabled,
    // so every path produces bit-identical results.

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn eval_block_avx512(
        &self,
        queries: &[f64],
        exclude: Option<&[usize]>,
        out: &mut [f64],
    ) {
        self.eval_block_generic(queries, exclude, out)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn eval_block_avx2(&self, queries: &[f64], exclude: Option<&[usize]>, out: &mut [f64]) {
        self.eval_block_generic(queries, exclude, out)
    }

    #[inline(always)]
    fn eval_block_generic(&self, queries: &[f64], exclude: Option<&[usize]>, out: &mut [f64]) {
        let (d, u, b) = (self.dim, self.counts.len(), out.len());
        let gemm = self.precision.is_none() && d >= GEMM_MIN_DIM;
        let mut buf = vec![0.0; if gemm { b * TILE } else { TILE }];
        let qn: Vec<f64> = if gemm {
            queries
                .chunks(d)
                .map(|q| q.iter().map(|v| v * v).sum())
                .collect()
        } else {
            Vec::new()
        };
        let mut acc = vec![LogSum::EMPTY; b];
        for start in (0..u).step_by(TILE) {
            let end = (start + TILE).min(u);
            let w = end - start;
            if gemm {
                // |q - p|² = |q|² + |p|² - 2 q·p, with all q·p of the tile from one product.
                // SAFETY: pointers and strides describe `queries` (b×d), centres
                // `start..end` (read as d×w) and `buf` (b×w), all in bounds.
                unsafe {
                    matrixmultiply::dgemm(
                        b,
                        d,
                        w,
                        -2.0,
                        queries.as_ptr(),
                        d as isize,
                        1,
                        self.rows[start * d..].as_ptr(),
                        1,
                        d as isize,
                        0.0,
                        buf.as_mut_ptr(),
                        w as isize,
                        1,
                    );
                }
                for r in 0..b {
                    let row = &mut buf[r * w..(r + 1) * w];
                    for (s, pn) in row.iter_mut().zip(&self.sqnorm[start..end]) {
                        *s = (*s + qn[r] + pn).max(0.0);
                    }
                    self.accumulate(row, start, exclude.map(|e| e[r]), &mut acc[r]);
                }
            } else {
                for r in 0..b {
                    let row = &mut buf[..w];
                    row.fill(0.0);
                    for i in 0..d {
                        let qi = queries[r * d + i];
                        for (s, p) in row.iter_mut().zip(&self.cols[i * u + start..i * u + end]) {
                            let t = qi - p;
                            *s += t * t;
                        }
                    }
                    self.accumulate(row, start, exclude.map(|e| e[r]), &mut acc[r]);
                }
            }
        }
        let total = self.n as f64 - if exclude.is_some() { 1.0 } else { 0.0 };
        for (o, a) in out.iter_mut().zip(&acc) {
            *o = a.value() + self.log_norm - total.ln();
        }
    }

    /// Folds the kernels `start..start + row.len()` into `acc`, given squared
    /// (scaled) distances in `row`. Overwrites `row`.
    #[inline(always)]
    fn accumulate(&self, row: &mut [f64], start: usize, excluded: Option<usize>, acc: &mut LogSum) {
        let lw = &self.log_weight[start..start + row.len()];
        match &self.precision {
            Some(w) => {
                for ((s, lw), w) in row.iter_mut().zip(lw).zip(&w[start..]) {
                    *s = lw - 0.5 * w * *s;
                }
            }
            None => {
                for (s, lw) in row.iter_mut().zip(lw) {
                    *s = lw - 0.5 * *s;
                }
            }
        }
        if let Some(j) = excluded {
            if (start..start + row.len()).contains(&j) {
                let c = self.counts[j];
                row[j - start] += ((c - 1.0) / c).ln();
            }
        }
        acc.add(row);
    }
}

/// Centres per tile; one tile of distances stays in L1.
const TILE: usize = 1024;

const LANES: usize = 8;

/// Running `ln Σ exp(x)` as a shift `max` and a scaled sum.
#[derive(Clone, Copy)]
struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    const EMPTY: LogSum = LogSum {
        max: f64::NEG_INFINITY,
        sum: 0.0,
    };

    /// Adds `exp(v_j)` for every `j`, in a fixed lane order so the loops vectorize.
    #[inline(always)]
    fn add(&mut self, v: &[f64]) {
        let mut lanes = [f64::NEG_INFINITY; LANES];
        let chunks = v.chunks_exact(LANES);
        let tail = chunks.remainder();
        for c in chunks {
            for k in 0..LANES {
                lanes[k] = lanes[k].max(c[k]);
            }
        }
        let tile_max = tail
            .iter()
            .chain(&lanes)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if tile_max == f64::NEG_INFINITY {
            return;
        }
        if tile_max > self.max {
            if self.sum > 0.0 {
                self.sum *= (self.max - tile_max).exp();
            }
            self.max = tile_max;
        }
        let m = self.max;
        let term = |x: f64| {
            let y = x - m;
            let e = exp_nonpositive(y.max(EXP_FLOOR));
            if y < EXP_FLOOR {
                0.0
            } else {
                e
            }
        };
        let mut acc = [0.0; LANES];
        for c in v.chunks_exact(LANES) {
            for k in 0..LANES {
                acc[k] += term(c[k]);
            }
        }
        let mut s =
            ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
        for &x in tail {
            s += term(x);
        }
        self.sum += s;
    }

    fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// Terms below this relative to the largest are treated as zero.
const EXP_FLOOR: f64 = -700.0;

/// `exp(x)` for `x` in `[EXP_FLOOR, 0]`, branch-free so it vectorizes.
///
/// Cody-Waite reduction `x = n ln2 + r`, `|r| <= ln2 / 2`, then the degree-11
/// Taylor polynomial (truncation below 1e-14 relative) in Estrin form, scaled by `2^n`.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding 1.5·2^52 rounds to an integer held in the low mantissa bits.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    const C: [f64; 12] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5_040.0,
        1.0 / 40_320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
    ];
    let t = x * LOG2E + SHIFTER;
    let n = t - SHIFTER;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let q0 = (C[0] + C[1] * r) + (C[2] + C[3] * r) * r2;
    let q1 = (C[4] + C[5] * r) + (C[6] + C[7] * r) * r2;
    let q2 = (C[8] + C[9] * r) + (C[10] + C[11] * r) * r2;
    let p = (q0 + q1 * r4) + q2 * r8;
    let k = t.to_bits().wrapping_sub(SHIFTER.to_bits()) as i64;
    p * f64::from_bits((k.wrapping_add(1023) as u64) << 52)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::invalid("truncated binary file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::invalid("size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Plain mixture evaluation, no centring, dedup or skipping.
    fn mixture(points: &[Vec<f64>], h: &[f64], x: &[f64]) -> f64 {
        let n = points.len() as f64;
        let dens: f64 = points
            .iter()
            .map(|p| {
                p.iter()
                    .zip(x)
                    .zip(h)
                    .map(|((pi, xi), hi)| {
                        (-0.5 * ((xi - pi) / hi).powi(2)).exp() / (hi * TAU.sqrt())
                    })
                    .product::<f64>()
            })
            .sum();
        (dens / n).ln()
    }

    fn rand_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
            .collect()
    }

    #[test]
    fn two_point_bandwidth() {
        let m = DensityModel::fit(&Matrix::column(&[0.0, 2.0])).unwrap();
        let Bandwidths::Shared(h) = m.bandwidths() else {
            panic!()
        };
        assert!((h[0] - (4.0f64 / 6.0).powf(0.2)).abs() < 1e-12);
        // Value computed independently in double precision.
        assert!((h[0] - 0.922_107_911_481_727_8).abs() < 1e-12);
        // By symmetry the midpoint density equals one kernel's value there.
        let expected = -0.5 * (1.0 / h[0]).powi(2) - h[0].ln() - 0.5 * TAU.ln();
        assert!((m.log_density(&[1.0]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn one_point_is_an_error() {
        assert!(DensityModel::fit(&Matrix::column(&[1.0])).is_err());
    }

    #[test]
    fn degenerate_dimension_is_floored_with_warning() {
        let m =
            DensityModel::fit(&Matrix::from_rows(&[[5.0, 5.0], [5.0, 5.0]], 2).unwrap()).unwrap();
        assert_eq!(
            m.bandwidths(),
            &Bandwidths::Shared(vec![BANDWIDTH_FLOOR; 2])
        );
        assert_eq!(m.warnings().len(), 2);
        assert!(m.log_density(&[5.0, 5.0]).unwrap().is_finite());
    }

    #[test]
    fn blurriness_peaks() {
        let m = DensityModel::fit_blurriness(&[100.0], &[10.0]).unwrap();
        let expected = (1.0 / (10.0 * TAU.sqrt())).ln();
        assert!((m.log_density(&[100.0]).unwrap() - expected).abs() < 1e-12);

        let unit = DensityModel::fit_blurriness(&[0.0], &[1.0]).unwrap();
        assert!((unit.log_density(&[0.0]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);

        let z = DensityModel::fit_blurriness(&[3.0], &[0.0]).unwrap();
        assert_eq!(z.bandwidths(), &Bandwidths::PerPoint(vec![BANDWIDTH_FLOOR]));
        assert_eq!(z.warnings().len(), 1);
    }

    #[test]
    fn blurriness_mixture_lower_bound() {
        let m = DensityModel::fit_blurriness(&[10.0, 30.0], &[2.0, 5.0]).unwrap();
        for (mu, s) in [(10.0, 2.0), (30.0, 5.0)] {
            let peak = 1.0 / (s * TAU.sqrt());
            assert!(m.log_density(&[mu]).unwrap() >= (0.5 * peak).ln());
        }
    }

    #[test]
    fn blurriness_length_mismatch() {
        assert!(DensityModel::fit_blurriness(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn matches_mixture_oracle_across_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [1, 3, 8, 12, 20, 42] {
            let pts = rand_points(&mut rng, 150, d);
            let m = DensityModel::fit(&Matrix::from_rows(&pts, d).unwrap()).unwrap();
            let Bandwidths::Shared(h) = m.bandwidths().clone() else {
                panic!()
            };
            for _ in 0..20 {
                let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 3.0 - 1.5).collect();
                let got = m.log_density(&x).unwrap();
                let want = mixture(&pts, &h, &x);
                assert!((got - want).abs() < 1e-9, "d={d}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn duplicate_points_weigh_as_copies() {
        let pts = [vec![0.0], vec![0.0], vec![0.0], vec![1.0], vec![4.0]];
        let m = DensityModel::fit(&Matrix::from_rows(&pts, 1).unwrap()).unwrap();
        let Bandwidths::Shared(h) = m.bandwidths().clone() else {
            panic!()
        };
        for x in [-1.0, 0.0, 0.5, 3.0] {
            assert!((m.log_density(&[x]).unwrap() - mixture(&pts, &h, &[x])).abs() < 1e-12);
        }
    }

    #[test]
    fn far_query_is_finite() {
        let m = DensityModel::fit(&Matrix::column(&[0.0, 1.0, 2.0])).unwrap();
        let Bandwidths::Shared(h) = m.bandwidths().clone() else {
            panic!()
        };
        let far = m.log_density(&[2.0 + 50.0 * h[0]]).unwrap();
        assert!(far.is_finite());
        assert!(far <= m.log_density(&[2.0]).unwrap());
    }

    #[test]
    fn dimension_mismatch() {
        let m = DensityModel::fit(&Matrix::column(&[0.0, 1.0])).unwrap();
        assert!(matches!(
            m.log_density(&[0.0, 1.0]),
            Err(Error::DimensionMismatch {
                expected: 1,
                got: 2
            })
        ));
    }

    #[test]
    fn similarity_of_empty_and_single_sets() {
        let m = DensityModel::fit(&Matrix::column(&[0.0, 1.0])).unwrap();
        assert_eq!(ego_similarity(&m, &Matrix::zeros(0, 1)).unwrap(), 0.0);
        let one = ego_similarity(&m, &Matrix::column(&[0.3])).unwrap();
        assert_eq!(one, m.log_density(&[0.3]).unwrap());
    }

    #[test]
    fn leave_one_out_matches_refits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = rand_points(&mut rng, 30, 3);
        pts.push(pts[4].clone());
        let all = Matrix::from_rows(&pts, 3).unwrap();
        let Bandwidths::Shared(h) = DensityModel::fit(&all).unwrap().bandwidths().clone() else {
            panic!()
        };
        let loo = leave_one_out(&all).unwrap();
        for i in 0..pts.len() {
            let rest: Vec<Vec<f64>> = pts
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, p)| p.clone())
                .collect();
            assert!((loo[i] - mixture(&rest, &h, &pts[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn blurriness_leave_one_out() {
        let means = [1.0, 2.0, 2.0, 8.0];
        let stds = [0.5, 1.0, 1.0, 2.0];
        let loo = leave_one_out_blurriness(&means, &stds).unwrap();
        for i in 0..4 {
            let dens: f64 = (0..4)
                .filter(|&j| j != i)
                .map(|j| {
                    (-0.5 * ((means[i] - means[j]) / stds[j]).powi(2)).exp()
                        / (stds[j] * TAU.sqrt())
                })
                .sum();
            assert!((loo[i] - (dens / 3.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn blob_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = rand_points(&mut rng, 40, 20);
        let m = DensityModel::fit_projected(&Matrix::from_rows(&pts, 20).unwrap(), 5).unwrap();
        let bytes = m.encode(Some(Property::Semantic));
        let (tag, back) = DensityModel::decode(&bytes).unwrap();
        assert_eq!(tag, Some(Property::Semantic));
        assert_eq!(back, m);
        assert_eq!(back.encode(Some(Property::Semantic)), bytes);
        assert!(DensityModel::decode(&bytes[..bytes.len() - 1]).is_err());

        let b = DensityModel::fit_blurriness(&[1.0, 5.0], &[0.5, 0.0]).unwrap();
        let (tag, back) = DensityModel::decode(&b.encode(None)).unwrap();
        assert_eq!(tag, None);
        assert_eq!(back, b);
    }

    #[test]
    fn projected_model_queries_in_input_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = rand_points(&mut rng, 60, 16);
        let m = DensityModel::fit_projected(&Matrix::from_rows(&pts, 16).unwrap(), 4).unwrap();
        assert_eq!(m.dim(), 16);
        assert_eq!(m.points().cols(), 4);
        let p = m.projection().unwrap();
        let Bandwidths::Shared(h) = m.bandwidths().clone() else {
            panic!()
        };
        let projected: Vec<Vec<f64>> = pts.iter().map(|r| p.project(r).unwrap()).collect();
        let x = &pts[7];
        let want = mixture(&projected, &h, &p.project(x).unwrap());
        assert!((m.log_density(x).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn fast_exp_matches_std() {
        let mut x = EXP_FLOOR;
        while x <= 0.0 {
            let (a, b) = (exp_nonpositive(x), x.exp());
            assert!((a - b).abs() <= 1e-14 * b, "{x}: {a} vs {b}");
            x += 0.0137;
        }
        assert_eq!(exp_nonpositive(0.0), 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn fixture() -> impl Strategy<Value = (usize, Vec<f64>)> {
            (1usize..5).prop_flat_map(|d| {
                (
                    Just(d),
                    prop::collection::vec(-50.0f64..50.0, 2 * d..40 * d),
                )
            })
        }

        proptest! {
            #[test]
            fn fit_is_permutation_invariant((d, flat) in fixture(), seed in any::<u64>()) {
                let n = flat.len() / d;
                let m = Matrix::from_vec(n, d, flat[..n * d].to_vec()).unwrap();
                let mut order: Vec<usize> = (0..n).collect();
                use rand::seq::SliceRandom;
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let a = DensityModel::fit(&m).unwrap();
                let b = DensityModel::fit(&m.select_rows(&order)).unwrap();
                prop_assert_eq!(a.encode(None), b.encode(None));
            }

            #[test]
            fn translation_equivariant((d, flat) in fixture(), shift in -100.0f64..100.0) {
                let n = flat.len() / d;
                let m = Matrix::from_vec(n, d, flat[..n * d].to_vec()).unwrap();
                let x: Vec<f64> = m.row(0).iter().map(|v| v + 0.3).collect();
                let a = DensityModel::fit(&m).unwrap().log_density(&x).unwrap();
                let moved = DensityModel::fit(&m.map(|v| v + shift)).unwrap();
                let xs: Vec<f64> = x.iter().map(|v| v + shift).collect();
                let b = moved.log_density(&xs).unwrap();
                prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
            }

            #[test]
            fn far_points_stay_finite((d, flat) in fixture(), k in 1.0f64..50.0) {
                let n = flat.len() / d;
                let m = Matrix::from_vec(n, d, flat[..n * d].to_vec()).unwrap();
                let model = DensityModel::fit(&m).unwrap();
                let Bandwidths::Shared(h) = model.bandwidths().clone() else { panic!() };
                let top = (0..n).max_by(|&a, &b| m.get(a, 0).total_cmp(&m.get(b, 0))).unwrap();
                let mut x = m.row(top).to_vec();
                x[0] += k * h[0];
                let far = model.log_density(&x).unwrap();
                prop_assert!(far.is_finite());
                prop_assert!(far <= model.log_density(m.row(top)).unwrap() + 1e-12);
            }
        }
    }
}
