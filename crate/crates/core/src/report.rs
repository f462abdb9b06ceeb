//! Analysis artifacts: polar motion histograms, location heatmaps, blurriness
//! distributions, pose summaries, the cross-dataset similarity matrix and PCA
//! scatters.
//!
//! Every figure is an SVG with a CSV twin holding the numbers it was drawn
//! from. Output depends only on the inputs, never on the worker count.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{ensure_dim, Error, Result};
use crate::kde::{ego_similarity, fit_property, property_queries};
use crate::matrix::Matrix;
use crate::pca::Pca;
use crate::props::detections::{HEATMAP_SIZE, POSE_DIM};
use crate::props::motion::ANGLE_BINS;
use crate::props::{LocationSummary, Property, PropertyTable};

const BLUR_BINS: usize = 20;
const POSE_GRID: usize = 16;
const STD_FLOOR: f64 = 1e-6;

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(
        &std::fs::read(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn with_ext(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

/// Gray level for `v` on a scale where `max` is black and 0 is white.
fn shade(v: f64, max: f64) -> u8 {
    if max > 0.0 {
        (255.0 - 255.0 * (v / max).clamp(0.0, 1.0)).round() as u8
    } else {
        255
    }
}

/// 90 radial bars scaled to the largest bin, plus `(bin_start_angle, weight)` rows.
///
/// Angles are radians, counter-clockwise from +x with y pointing up.
pub fn emit_polar_histogram(histogram: &[f64], stem: &Path) -> Result<Vec<PathBuf>> {
    ensure_dim(ANGLE_BINS, histogram.len())?;
    let width = TAU / ANGLE_BINS as f64;
    let mut csv = String::from("bin_start_angle,weight\n");
    for (i, w) in histogram.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", i as f64 * width, w);
    }
    let max = histogram.iter().copied().fold(0.0, f64::max);
    let (c, radius) = (210.0, 200.0);
    let mut svg = svg_open(420.0, 420.0);
    let _ = writeln!(
        svg,
        "<circle cx=\"{c}\" cy=\"{c}\" r=\"{radius}\" fill=\"none\" stroke=\"#bbb\"/>"
    );
    for (i, w) in histogram.iter().enumerate() {
        let r = if max > 0.0 { radius * w / max } else { 0.0 };
        let (a0, a1) = (i as f64 * width, (i + 1) as f64 * width);
        let _ = writeln!(
            svg,
            "<path d=\"M {c:.3} {c:.3} L {:.3} {:.3} A {r:.3} {r:.3} 0 0 0 {:.3} {:.3} Z\" fill=\"steelblue\"/>",
            c + r * a0.cos(),
            c - r * a0.sin(),
            c + r * a1.cos(),
            c - r * a1.sin(),
        );
    }
    svg.push_str("</svg>\n");
    Ok(vec![
        write(&with_ext(stem, ".csv"), &csv)?,
        write(&with_ext(stem, ".svg"), &svg)?,
    ])
}

/// 16x16 grid shaded by count, plus the raw counts row by row (row 0 at the top).
pub fn emit_heatmap(summary: &LocationSummary, stem: &Path) -> Result<Vec<PathBuf>> {
    let mut csv = String::from("row");
    for c in 0..HEATMAP_SIZE {
        let _ = write!(csv, ",c{c}");
    }
    csv.push('\n');
    for (r, row) in summary.heatmap.iter().enumerate() {
        let _ = write!(csv, "{r}");
        for v in row {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let max = summary.heatmap.iter().flatten().copied().max().unwrap_or(0) as f64;
    let cell = 20.0;
    let side = cell * HEATMAP_SIZE as f64;
    let mut svg = svg_open(side, side);
    for (r, row) in summary.heatmap.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let g = shade(v as f64, max);
            let _ = writeln!(
                svg,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({g},{g},{g})\"/>",
                c as f64 * cell,
                r as f64 * cell
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(vec![
        write(&with_ext(stem, ".csv"), &csv)?,
        write(&with_ext(stem, ".svg"), &svg)?,
    ])
}

/// Sum of several location summaries: heatmaps and detection counts add,
/// the KDE vector is the detection-weighted mean.
pub fn merge_locations<'a>(
    items: impl IntoIterator<Item = &'a LocationSummary>,
) -> LocationSummary {
    let mut out = LocationSummary {
        heatmap: [[0; HEATMAP_SIZE]; HEATMAP_SIZE],
        kde_vector: [0.0; 4],
        detection_count: 0,
    };
    for s in items {
        for (o, v) in out
            .heatmap
            .iter_mut()
            .flatten()
            .zip(s.heatmap.iter().flatten())
        {
            *o += v;
        }
        for (o, v) in out.kde_vector.iter_mut().zip(s.kde_vector) {
            *o += v * s.detection_count as f64;
        }
        out.detection_count += s.detection_count;
    }
    if out.detection_count > 0 {
        let n = out.detection_count as f64;
        out.kde_vector.iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn bar_chart(counts: &[usize]) -> String {
    let (w, h) = (400.0, 200.0);
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    let bw = w / counts.len().max(1) as f64;
    let mut svg = svg_open(w, h);
    for (i, &c) in counts.iter().enumerate() {
        let bh = if max > 0.0 { h * c as f64 / max } else { 0.0 };
        let _ = writeln!(
            svg,
            "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{bw:.3}\" height=\"{bh:.3}\" fill=\"steelblue\"/>",
            i as f64 * bw,
            h - bh
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Histogram of per-video mean blurriness over 20 equal bins spanning the data.
pub fn emit_blur_distribution(means: &[f64], stem: &Path) -> Result<Vec<PathBuf>> {
    let mut csv = String::from("bin_start,bin_end,count\n");
    let mut counts = Vec::new();
    if !means.is_empty() {
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("blurriness means must be finite"));
        }
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo {
            (hi - lo) / BLUR_BINS as f64
        } else {
            1.0
        };
        counts = vec![0usize; BLUR_BINS];
        for v in means {
            counts[(((v - lo) / width) as usize).min(BLUR_BINS - 1)] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{},{},{c}",
                lo + i as f64 * width,
                lo + (i + 1) as f64 * width
            );
        }
    }
    Ok(vec![
        write(&with_ext(stem, ".csv"), &csv)?,
        write(&with_ext(stem, ".svg"), &bar_chart(&counts))?,
    ])
}

/// Per-keypoint mean and spread of hand-pose vectors, and a 16x16 density
/// grid of all keypoints (coordinates clamped to the unit square).
pub fn emit_pose_summary(poses: &[Vec<f64>], stem: &Path) -> Result<Vec<PathBuf>> {
    for p in poses {
        ensure_dim(POSE_DIM, p.len())?;
    }
    let keypoints = POSE_DIM / 2;
    let n = poses.len() as f64;
    let mut csv = String::from("keypoint,mean_x,mean_y,std_x,std_y\n");
    let mut means = Vec::with_capacity(keypoints);
    if !poses.is_empty() {
        for k in 0..keypoints {
            let stats = |c: usize| {
                let m = poses.iter().map(|p| p[2 * k + c]).sum::<f64>() / n;
                let v = poses
                    .iter()
                    .map(|p| (p[2 * k + c] - m).powi(2))
                    .sum::<f64>()
                    / n;
                (m, v.sqrt())
            };
            let ((mx, sx), (my, sy)) = (stats(0), stats(1));
            let _ = writeln!(csv, "{k},{mx},{my},{sx},{sy}");
            means.push((mx, my));
        }
    }
    let mut grid = [[0usize; POSE_GRID]; POSE_GRID];
    let cell = |v: f64| ((v.clamp(0.0, 1.0) * POSE_GRID as f64) as usize).min(POSE_GRID - 1);
    for p in poses {
        for k in 0..keypoints {
            grid[cell(p[2 * k + 1])][cell(p[2 * k])] += 1;
        }
    }
    let mut density = String::from("row");
    for c in 0..POSE_GRID {
        let _ = write!(density, ",c{c}");
    }
    density.push('\n');
    for (r, row) in grid.iter().enumerate() {
        let _ = write!(density, "{r}");
        for v in row {
            let _ = write!(density, ",{v}");
        }
        density.push('\n');
    }
    let side = 320.0;
    let px = side / POSE_GRID as f64;
    let max = grid.iter().flatten().copied().max().unwrap_or(0) as f64;
    let mut svg = svg_open(side, side);
    for (r, row) in grid.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let g = shade(v as f64, max);
            let _ = writeln!(
                svg,
                "<rect x=\"{}\" y=\"{}\" width=\"{px}\" height=\"{px}\" fill=\"rgb({g},{g},{g})\"/>",
                c as f64 * px,
                r as f64 * px
            );
        }
    }
    for (mx, my) in &means {
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"3\" fill=\"crimson\"/>",
            mx.clamp(0.0, 1.0) * side,
            my.clamp(0.0, 1.0) * side
        );
    }
    svg.push_str("</svg>\n");
    Ok(vec![
        write(&with_ext(stem, ".csv"), &csv)?,
        write(&with_ext(stem, "_density.csv"), &density)?,
        write(&with_ext(stem, ".svg"), &svg)?,
    ])
}

/// Pairwise ego-property similarity between datasets.
///
/// Entry `[a][b]` is the log-likelihood of dataset `b` under the model fitted
/// to dataset `a`, so the matrices are not symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub names: Vec<String>,
    /// Properties with positive weight, in canonical order.
    pub properties: Vec<Property>,
    pub weights: Vec<f64>,
    /// Raw log-similarity per property.
    pub raw: Vec<Matrix>,
    /// Raw values standardized with the mean and spread of the off-diagonal entries.
    pub zscored: Vec<Matrix>,
    /// Weighted sum of the standardized matrices.
    pub unified: Matrix,
    /// For each row, the other dataset with the highest unified similarity.
    pub most_similar: Vec<usize>,
}

pub fn similarity_matrix(
    datasets: &[(String, PropertyTable)],
    weights: &[f64; 6],
) -> Result<SimilarityMatrix> {
    let n = datasets.len();
    if n < 2 {
        return Err(Error::argument(
            "the similarity matrix needs at least 2 datasets",
        ));
    }
    let properties: Vec<Property> = Property::ALL
        .into_iter()
        .filter(|p| weights[p.index()] > 0.0)
        .collect();
    if properties.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::argument(
            "weights must be non-negative and not all zero",
        ));
    }
    let tagged = |name: &str, p: Property, e: Error| {
        if e.is_io() {
            e
        } else {
            Error::invalid(format!("dataset {name:?}, property {p}: {e}"))
        }
    };
    let mut raw = Vec::with_capacity(properties.len());
    for &p in &properties {
        let models = datasets
            .par_iter()
            .map(|(name, t)| fit_property(t, p).map_err(|e| tagged(name, p, e)))
            .collect::<Result<Vec<_>>>()?;
        let queries = datasets
            .iter()
            .map(|(name, t)| property_queries(t, p).map_err(|e| tagged(name, p, e)))
            .collect::<Result<Vec<_>>>()?;
        let cells = (0..n * n)
            .into_par_iter()
            .map(|k| ego_similarity(&models[k / n], &queries[k % n]))
            .collect::<Result<Vec<_>>>()?;
        raw.push(Matrix::from_vec(n, n, cells)?);
    }
    let zscored: Vec<Matrix> = raw.iter().map(standardize_off_diagonal).collect();
    let mut unified = Matrix::zeros(n, n);
    let w: Vec<f64> = properties.iter().map(|p| weights[p.index()]).collect();
    for (z, wp) in zscored.iter().zip(&w) {
        for (u, v) in unified.as_mut_slice().iter_mut().zip(z.as_slice()) {
            *u += wp * v;
        }
    }
    let most_similar = (0..n)
        .map(|a| {
            (0..n)
                .filter(|&b| b != a)
                .fold(None, |best: Option<usize>, b| match best {
                    Some(x) if unified.get(a, x) >= unified.get(a, b) => Some(x),
                    _ => Some(b),
                })
                .expect("at least two datasets")
        })
        .collect();
    Ok(SimilarityMatrix {
        names: datasets.iter().map(|(n, _)| n.clone()).collect(),
        properties,
        weights: w,
        raw,
        zscored,
        unified,
        most_similar,
    })
}

fn standardize_off_diagonal(m: &Matrix) -> Matrix {
    let n = m.rows();
    let off: Vec<f64> = (0..n * n)
        .filter(|k| k / n != k % n)
        .map(|k| m.as_slice()[k])
        .collect();
    let mean = off.iter().sum::<f64>() / off.len() as f64;
    let std = (off.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / off.len() as f64).sqrt();
    let scale = if std < STD_FLOOR { 1.0 } else { std };
    m.map(|v| (v - mean) / scale)
}

fn square_csv(names: &[String], m: &Matrix) -> String {
    let mut csv = String::from("dataset");
    for n in names {
        let _ = write!(csv, ",{n}");
    }
    csv.push('\n');
    for (i, n) in names.iter().enumerate() {
        csv.push_str(n);
        for v in m.row(i) {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    csv
}

/// Writes `unified.csv` (with the most-similar column), `unified.svg`, and
/// raw and standardized grids per property into `dir`.
pub fn emit_similarity_matrix(sim: &SimilarityMatrix, dir: &Path) -> Result<Vec<PathBuf>> {
    let n = sim.names.len();
    let mut unified = String::from("dataset");
    for name in &sim.names {
        let _ = write!(unified, ",{name}");
    }
    unified.push_str(",most_similar\n");
    for i in 0..n {
        unified.push_str(&sim.names[i]);
        for v in sim.unified.row(i) {
            let _ = write!(unified, ",{v}");
        }
        let _ = writeln!(unified, ",{}", sim.names[sim.most_similar[i]]);
    }
    let mut files = vec![write(&dir.join("unified.csv"), &unified)?];
    for ((p, r), z) in sim.properties.iter().zip(&sim.raw).zip(&sim.zscored) {
        files.push(write(
            &dir.join(format!("raw_{p}.csv")),
            &square_csv(&sim.names, r),
        )?);
        files.push(write(
            &dir.join(format!("z_{p}.csv")),
            &square_csv(&sim.names, z),
        )?);
    }

    let cell = 40.0;
    let side = cell * n as f64;
    let off: Vec<f64> = (0..n * n)
        .filter(|k| k / n != k % n)
        .map(|k| sim.unified.as_slice()[k])
        .collect();
    let lo = off.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = off.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut svg = svg_open(side, side);
    for a in 0..n {
        for b in 0..n {
            let g = if a == b {
                128
            } else {
                shade(sim.unified.get(a, b) - lo, hi - lo)
            };
            let stroke = if sim.most_similar[a] == b {
                " stroke=\"crimson\" stroke-width=\"3\""
            } else {
                ""
            };
            let _ = writeln!(
                svg,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({g},{g},{g})\"{stroke}/>",
                b as f64 * cell,
                a as f64 * cell
            );
        }
    }
    svg.push_str("</svg>\n");
    files.push(write(&dir.join("unified.svg"), &svg)?);
    Ok(files)
}

/// Two-component PCA projection of one property over a table.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaScatter {
    pub ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    pub highlighted: Vec<bool>,
    /// Variance along each axis; the second is 0 for rank-1 data.
    pub explained_variance: [f64; 2],
    pub hull_area: f64,
    pub highlighted_hull_area: f64,
}

/// Projects the rows having `property` onto their first two principal components.
pub fn pca_scatter(
    table: &PropertyTable,
    property: Property,
    highlight: &[String],
) -> Result<PcaScatter> {
    for id in highlight {
        if table.get(id).is_none() {
            return Err(Error::UnknownId(id.clone()));
        }
    }
    let rows: Vec<(&str, Vec<f64>)> = table
        .rows
        .iter()
        .filter_map(|r| r.representation(property).map(|v| (r.id.as_str(), v)))
        .collect();
    if rows.len() < 3 {
        return Err(Error::invalid(format!(
            "PCA scatter of {property} needs at least 3 points, got {}",
            rows.len()
        )));
    }
    let d = rows[0].1.len();
    let data = Matrix::from_rows(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>(), d)?;
    let pca = Pca::fit(&data, 2)?;
    let projected = pca.project_rows(&data)?;
    let coords: Vec<[f64; 2]> = projected
        .iter_rows()
        .map(|p| [p[0], p.get(1).copied().unwrap_or(0.0)])
        .collect();
    let marked: std::collections::HashSet<&str> = highlight.iter().map(String::as_str).collect();
    let highlighted: Vec<bool> = rows.iter().map(|r| marked.contains(r.0)).collect();
    let chosen: Vec<[f64; 2]> = coords
        .iter()
        .zip(&highlighted)
        .filter(|(_, &h)| h)
        .map(|(c, _)| *c)
        .collect();
    let ev = &pca.explained_variance;
    Ok(PcaScatter {
        ids: rows.iter().map(|r| r.0.to_string()).collect(),
        hull_area: hull_area(&coords),
        highlighted_hull_area: hull_area(&chosen),
        coords,
        highlighted,
        explained_variance: [ev[0], ev.get(1).copied().unwrap_or(0.0)],
    })
}

/// Area of the convex hull of a point set (0 for fewer than 3 points).
pub fn hull_area(points: &[[f64; 2]]) -> f64 {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return 0.0;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(p.iter())
        } else {
            Box::new(p.iter().rev())
        };
        for &q in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0
            {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    let area: f64 = (0..hull.len())
        .map(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    0.5 * area.abs()
}

/// Writes the projected coordinates, a summary with hull areas and explained
/// variance, and a scatter with highlighted points in a second layer.
pub fn emit_pca_scatter(scatter: &PcaScatter, stem: &Path) -> Result<Vec<PathBuf>> {
    let mut csv = String::from("id,pc1,pc2,highlighted\n");
    for ((id, c), h) in scatter
        .ids
        .iter()
        .zip(&scatter.coords)
        .zip(&scatter.highlighted)
    {
        let _ = writeln!(csv, "{id},{},{},{}", c[0], c[1], u8::from(*h));
    }
    let count = scatter.highlighted.iter().filter(|&&h| h).count();
    let mut summary = String::from("key,value\n");
    let _ = writeln!(summary, "points,{}", scatter.ids.len());
    let _ = writeln!(summary, "highlighted_points,{count}");
    let _ = writeln!(summary, "hull_area,{}", scatter.hull_area);
    let _ = writeln!(
        summary,
        "highlighted_hull_area,{}",
        scatter.highlighted_hull_area
    );
    let _ = writeln!(
        summary,
        "explained_variance_1,{}",
        scatter.explained_variance[0]
    );
    let _ = writeln!(
        summary,
        "explained_variance_2,{}",
        scatter.explained_variance[1]
    );

    let side = 400.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &scatter.coords {
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let at = |c: &[f64; 2], k: usize| {
        let span = hi[k] - lo[k];
        let t = if span > 0.0 {
            (c[k] - lo[k]) / span
        } else {
            0.5
        };
        if k == 0 {
            10.0 + t * (side - 20.0)
        } else {
            side - 10.0 - t * (side - 20.0)
        }
    };
    let mut svg = svg_open(side, side);
    let layers: &[(&str, bool, &str)] = if count > 0 {
        &[("all", false, "#999"), ("highlighted", true, "crimson")]
    } else {
        &[("all", false, "#999")]
    };
    for &(name, only_marked, color) in layers {
        let _ = writeln!(svg, "<g id=\"{name}\" fill=\"{color}\">");
        for (c, &h) in scatter.coords.iter().zip(&scatter.highlighted) {
            if only_marked && !h {
                continue;
            }
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"2.5\"/>",
                at(c, 0),
                at(c, 1)
            );
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    Ok(vec![
        write(&with_ext(stem, ".csv"), &csv)?,
        write(&with_ext(stem, "_summary.csv"), &summary)?,
        write(&with_ext(stem, ".svg"), &svg)?,
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub weights: [f64; 6],
    /// Ids drawn in the highlighted PCA layer; ids absent from a dataset are ignored for it.
    pub highlight: Vec<String>,
    pub pca_properties: Vec<Property>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            weights: crate::select::DEFAULT_WEIGHTS,
            highlight: Vec::new(),
            pca_properties: Property::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub name: String,
    pub videos: usize,
    pub motion_histogram: Vec<f64>,
    pub hand_detections: usize,
    pub object_detections: usize,
    pub blur_videos: usize,
    pub pose_videos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub datasets: Vec<DatasetSummary>,
    pub similarity: Option<SimilarityMatrix>,
    /// Files relative to the output directory, sorted by path.
    pub files: Vec<OutputFile>,
    pub notes: Vec<String>,
}

#[derive(Serialize)]
struct DirectoryManifest<'a> {
    tool_version: &'a str,
    datasets: Vec<&'a str>,
    files: &'a [OutputFile],
    notes: &'a [String],
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::argument(format!(
            "dataset name {name:?} must be non-empty ASCII letters, digits, '-', '_' or '.'"
        )))
    }
}

fn emit_dataset(
    name: &str,
    table: &PropertyTable,
    opts: &ReportOptions,
    out: &Path,
) -> Result<(DatasetSummary, Vec<PathBuf>, Vec<String>)> {
    let mut files = Vec::new();
    let mut notes = Vec::new();
    let mut histogram = vec![0.0; ANGLE_BINS];
    for m in table.rows.iter().filter_map(|r| r.motion.as_ref()) {
        ensure_dim(ANGLE_BINS, m.histogram.len())?;
        for (h, v) in histogram.iter_mut().zip(&m.histogram) {
            *h += v;
        }
    }
    files.extend(emit_polar_histogram(
        &histogram,
        &out.join("polar").join(name),
    )?);
    let hands = merge_locations(table.rows.iter().filter_map(|r| r.hand_loc.as_ref()));
    let objects = merge_locations(table.rows.iter().filter_map(|r| r.obj_loc.as_ref()));
    files.extend(emit_heatmap(
        &hands,
        &out.join("heatmap").join(format!("{name}_hand")),
    )?);
    files.extend(emit_heatmap(
        &objects,
        &out.join("heatmap").join(format!("{name}_object")),
    )?);
    let blur: Vec<f64> = table
        .rows
        .iter()
        .filter_map(|r| r.blur.as_ref().map(|b| b.mean))
        .collect();
    files.extend(emit_blur_distribution(&blur, &out.join("blur").join(name))?);
    let poses: Vec<Vec<f64>> = table
        .rows
        .iter()
        .filter_map(|r| r.pose.as_ref().map(|p| p.keypoints.clone()))
        .collect();
    files.extend(emit_pose_summary(&poses, &out.join("pose").join(name))?);
    let highlight: Vec<String> = opts
        .highlight
        .iter()
        .filter(|id| table.get(id).is_some())
        .cloned()
        .collect();
    for &p in &opts.pca_properties {
        match pca_scatter(table, p, &highlight) {
            Ok(s) => files.extend(emit_pca_scatter(
                &s,
                &out.join("pca").join(format!("{name}_{p}")),
            )?),
            Err(e) if !e.is_io() => notes.push(format!("pca {name}/{p} skipped: {e}")),
            Err(e) => return Err(e),
        }
    }
    let summary = DatasetSummary {
        name: name.to_string(),
        videos: table.len(),
        motion_histogram: histogram,
        hand_detections: hands.detection_count,
        object_detections: objects.detection_count,
        blur_videos: blur.len(),
        pose_videos: poses.len(),
    };
    Ok((summary, files, notes))
}

/// Writes the full report tree under `out` and, last, `manifest.json`
/// listing every file with its size and digest.
///
/// Layout: `polar/<name>`, `heatmap/<name>_{hand,object}`, `blur/<name>`,
/// `pose/<name>`, `pca/<name>_<property>` and, for two or more datasets,
/// `similarity/`.
pub fn emit_report(
    datasets: &[(String, PropertyTable)],
    opts: &ReportOptions,
    out: &Path,
) -> Result<ReportBundle> {
    if datasets.is_empty() {
        return Err(Error::argument("report needs at least one dataset"));
    }
    let mut seen = std::collections::HashSet::new();
    for (name, _) in datasets {
        check_name(name)?;
        if !seen.insert(name.as_str()) {
            return Err(Error::argument(format!("duplicate dataset name {name:?}")));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let per_dataset = datasets
        .par_iter()
        .map(|(name, table)| emit_dataset(name, table, opts, out))
        .collect::<Result<Vec<_>>>()?;
    let mut summaries = Vec::new();
    let mut paths = Vec::new();
    let mut notes = Vec::new();
    for (s, f, n) in per_dataset {
        summaries.push(s);
        paths.extend(f);
        notes.extend(n);
    }
    let similarity = if datasets.len() >= 2 {
        let sim = similarity_matrix(datasets, &opts.weights)?;
        paths.extend(emit_similarity_matrix(&sim, &out.join("similarity"))?);
        Some(sim)
    } else {
        notes.push("similarity skipped: needs at least 2 datasets".into());
        None
    };
    let mut files = paths
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let rel = p.strip_prefix(out).unwrap_or(p);
            Ok(OutputFile {
                path: rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/"),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = DirectoryManifest {
        tool_version: crate::manifest::TOOL_VERSION,
        datasets: datasets.iter().map(|(n, _)| n.as_str()).collect(),
        files: &files,
        notes: &notes,
    };
    crate::jsonl::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(ReportBundle {
        datasets: summaries,
        similarity,
        files,
        notes,
    })
}
