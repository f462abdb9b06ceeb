//! Likelihood-guided video selection, pruning and replacement.
//!
//! Each round fits one density model per weighted property on the current
//! source set, turns the pool's log-likelihoods into sampling probabilities
//! with a tempered softmax, mixes those by the property weights and draws a
//! batch of videos without replacement. Performance mode favours videos that
//! look like the source set; balancedness mode favours the ones that do not.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::jsonl;
use crate::kde::{self, DensityModel, BANDWIDTH_FLOOR, SEMANTIC_COMPONENTS};
use crate::manifest::{sample_class_balanced, ClassShortfall, Manifest, Provenance};
use crate::matrix::Matrix;
use crate::pca::Pca;
use crate::props::{Property, PropertyTable};

/// Property weights in [`Property::ALL`] order.
pub const DEFAULT_WEIGHTS: [f64; 6] = [5.0, 10.0, 8.0, 8.0, 10.0, 5.0];

pub const DEFAULT_TAU: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Prefer videos with high likelihood under the source set.
    Performance,
    /// Prefer videos with low likelihood under the source set.
    Balancedness,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Performance => "performance",
            Mode::Balancedness => "balancedness",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "performance" => Ok(Mode::Performance),
            "balancedness" => Ok(Mode::Balancedness),
            _ => Err(Error::argument(format!("unknown selection mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub mode: Mode,
    pub tau: f64,
    /// Videos drawn between model refits.
    pub k: usize,
    /// Size the source set grows to.
    pub target: usize,
    pub weights: [f64; 6],
    pub seed: u64,
}

impl SelectionConfig {
    pub fn new(mode: Mode, k: usize, target: usize, seed: u64) -> Self {
        SelectionConfig {
            mode,
            tau: DEFAULT_TAU,
            k,
            target,
            weights: DEFAULT_WEIGHTS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        check_weights(&self.weights)?;
        if self.k == 0 || self.target == 0 {
            return Err(Error::argument("k and target must be positive"));
        }
        if self.k > self.target {
            return Err(Error::argument(format!(
                "k ({}) must not exceed target ({})",
                self.k, self.target
            )));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::argument(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

fn check_weights(weights: &[f64; 6]) -> Result<()> {
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::argument("weights must be finite and non-negative"));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::argument("at least one weight must be positive"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pick {
    pub id: String,
    /// Unified probability of the video at the start of its round.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAudit {
    pub round: usize,
    /// False for the first round, which uses the initial fit.
    pub refit: bool,
    pub source_size: usize,
    pub pool_size: usize,
    pub picks: Vec<Pick>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: Vec<String>,
    pub rounds: Vec<RoundAudit>,
    pub final_source_size: usize,
}

#[derive(Serialize, Deserialize)]
struct Summary {
    chosen: Vec<String>,
    final_source_size: usize,
}

/// One line per round, then a line with the chosen ids.
pub fn write_selection(path: &Path, result: &SelectionResult) -> Result<()> {
    let mut lines: Vec<serde_json::Value> = result
        .rounds
        .iter()
        .map(|r| serde_json::to_value(r).expect("audit rows serialize"))
        .collect();
    lines.push(
        serde_json::to_value(Summary {
            chosen: result.chosen.clone(),
            final_source_size: result.final_source_size,
        })
        .expect("summary serializes"),
    );
    jsonl::write(path, &lines)
}

pub fn read_selection(path: &Path) -> Result<SelectionResult> {
    let mut lines = jsonl::read::<serde_json::Value>(path)?;
    let (line, last) = lines
        .pop()
        .ok_or_else(|| Error::invalid(format!("{}: empty selection file", path.display())))?;
    let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    };
    let summary: Summary = serde_json::from_value(last).map_err(|e| parse_err(line, e))?;
    let rounds = lines
        .into_iter()
        .map(|(line, v)| serde_json::from_value(v).map_err(|e| parse_err(line, e)))
        .collect::<Result<Vec<RoundAudit>>>()?;
    Ok(SelectionResult {
        chosen: summary.chosen,
        rounds,
        final_source_size: summary.final_source_size,
    })
}

/// Tempered softmax of log-likelihoods: `softmax(l / τ)` in performance
/// mode and `softmax(-l / τ)` in balancedness mode.
pub fn sampling_probabilities(log_liks: &[f64], mode: Mode, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if log_liks.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("log-likelihoods must be finite"));
    }
    let sign = match mode {
        Mode::Performance => 1.0,
        Mode::Balancedness => -1.0,
    };
    let z: Vec<f64> = log_liks.iter().map(|l| sign * l / tau).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Per-property density inputs for a list of videos. Semantic vectors are
/// already projected onto the selection basis.
struct Features {
    values: Vec<Vec<Option<Vec<f64>>>>,
}

impl Features {
    fn new(tables: &[&PropertyTable], basis: Option<&Pca>) -> Result<Features> {
        let mut values = vec![Vec::new(); Property::ALL.len()];
        let mut cache: HashMap<Vec<u64>, Vec<f64>> = HashMap::new();
        for table in tables {
            for row in &table.rows {
                for p in Property::ALL {
                    let mut v = row.representation(p);
                    if let (Property::Semantic, Some(b), Some(raw)) = (p, basis, v.as_ref()) {
                        // Many videos share a class vector; project each distinct one once.
                        let key: Vec<u64> = raw.iter().map(|x| x.to_bits()).collect();
                        let projected = match cache.get(&key) {
                            Some(x) => x.clone(),
                            None => {
                                let x = b.project(raw)?;
                                cache.insert(key, x.clone());
                                x
                            }
                        };
                        v = Some(projected);
                    }
                    if let Some(x) = &v {
                        if x.iter().any(|f| !f.is_finite()) {
                            return Err(Error::invalid(format!(
                                "{}: non-finite {p} representation",
                                row.id
                            )));
                        }
                    }
                    values[p.index()].push(v);
                }
            }
        }
        Ok(Features { values })
    }

    fn get(&self, p: Property, i: usize) -> Option<&[f64]> {
        self.values[p.index()][i].as_deref()
    }

    /// Rows of `idx` that have `p`, as (position in `idx`, vector).
    fn present<'a>(
        &'a self,
        p: Property,
        idx: &'a [usize],
    ) -> impl Iterator<Item = (usize, &'a [f64])> + 'a {
        idx.iter()
            .enumerate()
            .filter_map(move |(k, &i)| self.get(p, i).map(|v| (k, v)))
    }
}

/// Per-dimension affine map to zero mean and unit spread on the source rows.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[&[f64]]) -> Standardizer {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < BANDWIDTH_FLOOR {
                    1.0
                } else {
                    1.0 / sd
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    fn apply(&self, rows: &[&[f64]]) -> Result<Matrix> {
        let d = self.mean.len();
        let mut out = Matrix::zeros(rows.len(), d);
        for (i, r) in rows.iter().enumerate() {
            crate::error::ensure_dim(d, r.len())?;
            for (j, v) in r.iter().enumerate() {
                out.set(i, j, (v - self.mean[j]) * self.scale[j]);
            }
        }
        Ok(out)
    }
}

/// Log-likelihood of each query row under a model of the source rows, `None`
/// where the query lacks the property.
fn log_likelihoods(
    f: &Features,
    p: Property,
    source: &[usize],
    queries: &[usize],
) -> Result<Vec<Option<f64>>> {
    let src: Vec<&[f64]> = f.present(p, source).map(|x| x.1).collect();
    if src.is_empty() {
        return Err(Error::invalid(format!(
            "property {p} is weighted but missing from the source set"
        )));
    }
    let (pos, qs): (Vec<usize>, Vec<&[f64]>) = f.present(p, queries).unzip();
    let mut out = vec![None; queries.len()];
    if qs.is_empty() {
        return Ok(out);
    }
    let values = if p == Property::Blur {
        // [mean, std]: standardize the mean and scale the std to match.
        let means: Vec<&[f64]> = src.iter().map(|r| &r[..1]).collect();
        let z = Standardizer::fit(&means);
        let s = z.scale[0];
        let model = DensityModel::fit_blurriness(
            &src.iter()
                .map(|r| (r[0] - z.mean[0]) * s)
                .collect::<Vec<_>>(),
            &src.iter().map(|r| r[1] * s).collect::<Vec<_>>(),
        )?;
        let q: Vec<f64> = qs.iter().map(|r| (r[0] - z.mean[0]) * s).collect();
        model.log_density_batch(&Matrix::column(&q))?
    } else {
        let z = Standardizer::fit(&src);
        let model = DensityModel::fit(&z.apply(&src)?)
            .map_err(|e| Error::invalid(format!("property {p}: {e}")))?;
        model.log_density_batch(&z.apply(&qs)?)?
    };
    for (k, v) in pos.into_iter().zip(values) {
        out[k] = Some(v);
    }
    Ok(out)
}

/// Weighted mix of per-property probability vectors. Rows lacking a
/// property get no mass from it; properties no row has drop out of the mix.
fn unify(
    components: &[(f64, Vec<Option<f64>>)],
    n: usize,
    mode: Mode,
    tau: f64,
) -> Result<Vec<f64>> {
    let mut unified = vec![0.0; n];
    let mut weight = 0.0;
    for (w, ll) in components {
        let (pos, vals): (Vec<usize>, Vec<f64>) = ll
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .unzip();
        if vals.is_empty() {
            continue;
        }
        let probs = sampling_probabilities(&vals, mode, tau)?;
        for (i, p) in pos.into_iter().zip(probs) {
            unified[i] += w * p;
        }
        weight += w;
    }
    if weight == 0.0 {
        return Ok(vec![1.0 / n as f64; n]);
    }
    unified.iter_mut().for_each(|u| *u /= weight);
    Ok(unified)
}

/// Sequential draws without replacement, renormalizing after each pick.
/// Falls back to uniform over the rest once no positive mass remains.
fn draw(probs: &[f64], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p = probs.to_vec();
    let mut taken = vec![false; p.len()];
    let mut picks = Vec::with_capacity(count);
    for _ in 0..count.min(p.len()) {
        let total: f64 = p.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut last = None;
            let mut found = None;
            for (i, &v) in p.iter().enumerate() {
                if v > 0.0 {
                    acc += v;
                    last = Some(i);
                    if acc > target {
                        found = Some(i);
                        break;
                    }
                }
            }
            found.or(last).expect("positive total has a positive entry")
        } else {
            let remaining = taken.iter().filter(|t| !**t).count();
            let nth = rng.random_range(0..remaining);
            (0..p.len()).filter(|&i| !taken[i]).nth(nth).unwrap()
        };
        taken[pick] = true;
        p[pick] = 0.0;
        picks.push(pick);
    }
    picks
}

fn weighted_properties(weights: &[f64; 6]) -> Vec<(Property, f64)> {
    Property::ALL
        .into_iter()
        .map(|p| (p, weights[p.index()]))
        .filter(|&(_, w)| w > 0.0)
        .collect()
}

/// Principal basis of the semantic vectors, fitted on distinct vectors weighted by multiplicity.
fn semantic_basis(table: &PropertyTable) -> Result<Pca> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for v in table.rows.iter().filter_map(|r| r.semantic.as_deref()) {
        let key: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
        match index.get(&key) {
            Some(&i) => counts[i] += 1.0,
            None => {
                index.insert(key, rows.len());
                rows.push(v);
                counts.push(1.0);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid(
            "property semantic is weighted but missing from the source set",
        ));
    }
    let dim = rows[0].len();
    Pca::fit_weighted(
        &Matrix::from_rows(&rows, dim)?,
        &counts,
        SEMANTIC_COMPONENTS,
    )
}

fn check_disjoint(source: &PropertyTable, extra: &PropertyTable) -> Result<()> {
    let ids: HashSet<&str> = source.rows.iter().map(|r| r.id.as_str()).collect();
    match extra.rows.iter().find(|r| ids.contains(r.id.as_str())) {
        Some(r) => Err(Error::argument(format!(
            "id {:?} is in both the source set and the pool",
            r.id
        ))),
        None => Ok(()),
    }
}

fn check_present(table: &PropertyTable, weights: &[f64; 6]) -> Result<()> {
    for (p, _) in weighted_properties(weights) {
        if !table.rows.iter().any(|r| r.has(p)) {
            return Err(Error::invalid(format!(
                "property {p} is weighted but missing from the source set"
            )));
        }
    }
    Ok(())
}

struct Engine {
    features: Features,
    ids: Vec<String>,
    weights: Vec<(Property, f64)>,
}

impl Engine {
    fn new(source: &PropertyTable, extra: &PropertyTable, weights: &[f64; 6]) -> Result<Engine> {
        check_present(source, weights)?;
        let basis = if weights[Property::Semantic.index()] > 0.0 {
            Some(semantic_basis(source)?)
        } else {
            None
        };
        Ok(Engine {
            features: Features::new(&[source, extra], basis.as_ref())?,
            ids: source
                .rows
                .iter()
                .chain(&extra.rows)
                .map(|r| r.id.clone())
                .collect(),
            weights: weighted_properties(weights),
        })
    }

    fn probabilities(
        &self,
        source: &[usize],
        pool: &[usize],
        mode: Mode,
        tau: f64,
    ) -> Result<Vec<f64>> {
        let components = self
            .weights
            .iter()
            .map(|&(p, w)| Ok((w, log_likelihoods(&self.features, p, source, pool)?)))
            .collect::<Result<Vec<_>>>()?;
        unify(&components, pool.len(), mode, tau)
    }
}

/// Unified first-round probabilities over `extra`, in table order.
pub fn round_probabilities(
    source: &PropertyTable,
    extra: &PropertyTable,
    config: &SelectionConfig,
) -> Result<Vec<f64>> {
    check_tau(config.tau)?;
    check_weights(&config.weights)?;
    check_disjoint(source, extra)?;
    if extra.is_empty() {
        return Ok(Vec::new());
    }
    let engine = Engine::new(source, extra, &config.weights)?;
    let s: Vec<usize> = (0..source.len()).collect();
    let e: Vec<usize> = (source.len()..source.len() + extra.len()).collect();
    engine.probabilities(&s, &e, config.mode, config.tau)
}

/// Grows `source` towards `config.target` with videos from `extra`, refitting
/// the property models after every `config.k` draws.
pub fn select(
    source: &PropertyTable,
    extra: &PropertyTable,
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    config.validate()?;
    check_disjoint(source, extra)?;
    if config.target < source.len() {
        return Err(Error::argument(format!(
            "target {} is smaller than the source set ({})",
            config.target,
            source.len()
        )));
    }
    let mut result = SelectionResult {
        final_source_size: source.len(),
        ..Default::default()
    };
    if extra.is_empty() || config.target == source.len() {
        return Ok(result);
    }
    let engine = Engine::new(source, extra, &config.weights)?;
    let mut s: Vec<usize> = (0..source.len()).collect();
    let mut e: Vec<usize> = (source.len()..source.len() + extra.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut round = 0;
    while s.len() < config.target && !e.is_empty() {
        let want = config.k.min(config.target - s.len()).min(e.len());
        let probs = engine.probabilities(&s, &e, config.mode, config.tau)?;
        let picks = draw(&probs, want, &mut rng);
        result.rounds.push(RoundAudit {
            round,
            refit: round > 0,
            source_size: s.len(),
            pool_size: e.len(),
            picks: picks
                .iter()
                .map(|&k| Pick {
                    id: engine.ids[e[k]].clone(),
                    probability: probs[k],
                })
                .collect(),
        });
        let picked: HashSet<usize> = picks.iter().copied().collect();
        for &k in &picks {
            s.push(e[k]);
            result.chosen.push(engine.ids[e[k]].clone());
        }
        e = e
            .iter()
            .enumerate()
            .filter(|(k, _)| !picked.contains(k))
            .map(|(_, &i)| i)
            .collect();
        round += 1;
    }
    result.final_source_size = s.len();
    Ok(result)
}

/// `⌈fraction · n⌉`, ignoring floating-point noise just above an integer.
pub fn removal_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(Error::argument(format!(
            "fraction must lie in (0, 1), got {fraction}"
        )))
    }
}

/// Removes the `⌈fraction · n⌉` videos with the highest unified
/// leave-one-out likelihood score, ties broken by ascending id. Returns the
/// removed ids, highest score first.
pub fn prune(
    table: &PropertyTable,
    fraction: f64,
    weights: &[f64; 6],
    tau: f64,
) -> Result<Vec<String>> {
    check_fraction(fraction)?;
    check_tau(tau)?;
    check_weights(weights)?;
    let n = table.len();
    if n < 2 {
        return Err(Error::argument("pruning needs at least 2 videos"));
    }
    check_present(table, weights)?;
    let basis = if weights[Property::Semantic.index()] > 0.0 {
        Some(semantic_basis(table)?)
    } else {
        None
    };
    let f = Features::new(&[table], basis.as_ref())?;
    let all: Vec<usize> = (0..n).collect();
    let mut components = Vec::new();
    for (p, w) in weighted_properties(weights) {
        let (pos, rows): (Vec<usize>, Vec<&[f64]>) = f.present(p, &all).unzip();
        if rows.len() < 2 {
            return Err(Error::invalid(format!(
                "property {p}: leave-one-out needs at least 2 videos"
            )));
        }
        let ll = if p == Property::Blur {
            let z = Standardizer::fit(&rows.iter().map(|r| &r[..1]).collect::<Vec<_>>());
            let s = z.scale[0];
            kde::leave_one_out_blurriness(
                &rows
                    .iter()
                    .map(|r| (r[0] - z.mean[0]) * s)
                    .collect::<Vec<_>>(),
                &rows.iter().map(|r| r[1] * s).collect::<Vec<_>>(),
            )?
        } else {
            let z = Standardizer::fit(&rows);
            kde::leave_one_out(&z.apply(&rows)?)?
        };
        let mut full = vec![None; n];
        for (i, v) in pos.into_iter().zip(ll) {
            full[i] = Some(v);
        }
        components.push((w, full));
    }
    let score = unify(&components, n, Mode::Performance, tau)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        score[b]
            .total_cmp(&score[a])
            .then_with(|| table.rows[a].id.cmp(&table.rows[b].id))
    });
    Ok(order
        .into_iter()
        .take(removal_count(fraction, n))
        .map(|i| table.rows[i].id.clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replacement {
    pub removed: Vec<String>,
    pub added: Vec<String>,
    pub selection: SelectionResult,
}

/// Prunes `fraction` of `table`, then selects as many videos from `pool`.
/// `config.target` is ignored; `config.k` is capped at the removal count.
pub fn replace(
    table: &PropertyTable,
    pool: &PropertyTable,
    fraction: f64,
    config: &SelectionConfig,
) -> Result<Replacement> {
    check_fraction(fraction)?;
    if pool.is_empty() {
        return Err(Error::argument("replacement pool is empty"));
    }
    let count = removal_count(fraction, table.len());
    if pool.len() < count {
        return Err(Error::argument(format!(
            "replacement pool has {} videos but {count} are removed",
            pool.len()
        )));
    }
    let removed = prune(table, fraction, &config.weights, config.tau)?;
    let kept = table.without(&removed);
    let cfg = SelectionConfig {
        k: config.k.min(count),
        target: kept.len() + count,
        ..config.clone()
    };
    let selection = select(&kept, pool, &cfg)?;
    Ok(Replacement {
        removed,
        added: selection.chosen.clone(),
        selection,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Pretrain,
    Test,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Pretrain => "pretrain",
            Role::Test => "test",
        }
    }

    /// Base videos per class when none is given.
    pub fn default_per_class(self) -> usize {
        match self {
            Role::Pretrain => 20,
            Role::Test => 5,
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Role::Pretrain),
            "test" => Ok(Role::Test),
            _ => Err(Error::argument(format!("unknown role {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOptions {
    pub role: Role,
    pub per_class: usize,
    /// Selection settings; the mode is always balancedness.
    pub config: SelectionConfig,
    /// Ids of a smaller dataset to extend instead of drawing a balanced base.
    pub base: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutcome {
    pub manifest: Manifest,
    pub base: Vec<String>,
    pub shortfalls: Vec<ClassShortfall>,
    pub selection: SelectionResult,
}

/// Class-balanced base of `per_class` videos per class (or an existing
/// dataset), completed to `config.target` videos by balancedness selection
/// from the rest of the corpus.
pub fn build_dataset(
    corpus: &Manifest,
    props: &PropertyTable,
    opts: &BuildOptions,
) -> Result<BuildOutcome> {
    let config = SelectionConfig {
        mode: Mode::Balancedness,
        ..opts.config.clone()
    };
    config.validate()?;
    let have: HashSet<&str> = props.rows.iter().map(|r| r.id.as_str()).collect();
    if let Some(r) = corpus
        .records
        .iter()
        .find(|r| !have.contains(r.id.as_str()))
    {
        return Err(Error::invalid(format!(
            "no property row for record {:?}",
            r.id
        )));
    }
    let (base, shortfalls) = match &opts.base {
        Some(ids) => {
            let known: HashSet<&str> = corpus.records.iter().map(|r| r.id.as_str()).collect();
            if let Some(id) = ids.iter().find(|id| !known.contains(id.as_str())) {
                return Err(Error::UnknownId(id.clone()));
            }
            (ids.clone(), Vec::new())
        }
        None => {
            let s = sample_class_balanced(corpus, opts.per_class, config.seed)?;
            (s.ids, s.shortfalls)
        }
    };
    if config.target < base.len() {
        return Err(Error::argument(format!(
            "target {} is smaller than the base ({} videos)",
            config.target,
            base.len()
        )));
    }
    let in_base: HashSet<&str> = base.iter().map(String::as_str).collect();
    let pool_ids: Vec<String> = corpus
        .records
        .iter()
        .filter(|r| !in_base.contains(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    let source = props.select(&base)?;
    let pool = props.select(&pool_ids)?;
    let selection = select(&source, &pool, &config)?;

    let mut ids = base.clone();
    ids.extend(selection.chosen.iter().cloned());
    let mut manifest = corpus.subset(&ids);
    let mut prov = Provenance::new();
    prov.seed = Some(config.seed);
    prov.source_manifests = corpus.provenance.source_manifests.clone();
    let p = &mut prov.parameters;
    p.insert("role".into(), json!(opts.role.name()));
    p.insert("target".into(), json!(config.target));
    p.insert("per_class".into(), json!(opts.per_class));
    p.insert("nested".into(), json!(opts.base.is_some()));
    p.insert("base_size".into(), json!(base.len()));
    p.insert("mode".into(), json!(config.mode.name()));
    p.insert("tau".into(), json!(config.tau));
    p.insert("k".into(), json!(config.k));
    p.insert("weights".into(), json!(config.weights));
    p.insert("semantic_components".into(), json!(SEMANTIC_COMPONENTS));
    p.insert(
        "standardization".into(),
        json!("per-dimension z-score on the current source set"),
    );
    p.insert("rounds".into(), json!(selection.rounds.len()));
    for s in &shortfalls {
        prov.notes.push(format!(
            "class {} has {} records, fewer than the {} requested",
            s.label_id, s.population, s.requested
        ));
    }
    manifest.provenance = prov;
    Ok(BuildOutcome {
        manifest,
        base,
        shortfalls,
        selection,
    })
}
