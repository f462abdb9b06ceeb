//! `egocurate` command-line entry point.

mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use egocurate::bundle::FeatureBundle;
use egocurate::counterfactual::{self, CfConfig, FrameEvidence, Strategy};
use egocurate::kde::{self, DensityModel};
use egocurate::losses::{self, Hinge, LossParts};
use egocurate::manifest::{self, LabelVector};
use egocurate::props::{self, frame::list_frames, ExtractOptions, FrameImage, Property};
use egocurate::report::{self, ReportOptions};
use egocurate::select::{self, BuildOptions, Mode, Role, SelectionConfig};
use egocurate::{jsonl, Error};

const WORKERS_ENV: &str = "EGOCURATE_WORKERS";

/// Argument ids whose values name input files or directories.
const INPUT_IDS: &[&str] = &[
    "in",
    "manifest",
    "props",
    "source",
    "pool",
    "model",
    "features",
    "labels",
    "detections",
    "semantics",
    "base",
    "highlight",
    "frames",
];

/// Arguments that never influence results and stay out of provenance.
const UNRECORDED_IDS: &[&str] = &["config", "workers", "log_level"];

#[derive(Parser)]
#[command(
    name = "egocurate",
    version,
    about = "Egocentric video property analysis and likelihood-guided dataset curation"
)]
struct Cli {
    /// Flat `key = value` file supplying defaults for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores). Only wall time depends on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    log_level: LogLevel,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
enum LogLevel {
    Error,
    Warn,
    Info,
}

#[derive(Subcommand)]
enum Command {
    /// Class merging and balanced base sampling.
    #[command(subcommand)]
    Manifest(ManifestCmd),
    /// Property extraction from frames and ingestion of detections and semantics.
    #[command(subcommand)]
    Props(PropsCmd),
    /// Density models and ego-property similarity.
    #[command(subcommand)]
    Kde(KdeCmd),
    /// Likelihood-guided selection from a pool.
    Select(SelectArgs),
    /// Remove the most redundant videos of a set.
    Prune(PruneArgs),
    /// Prune, then select as many replacements from a pool.
    Replace(ReplaceArgs),
    /// Build a class-balanced dataset of a target size.
    Build(BuildArgs),
    /// Evaluate reference losses on stored features.
    #[command(subcommand)]
    Loss(LossCmd),
    /// Counterfactual clip construction.
    #[command(subcommand)]
    Cf(CfCmd),
    /// Emit figures and their CSV data for one or more datasets.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum ManifestCmd {
    MergeClasses {
        #[arg(long, default_value_t = manifest::DEFAULT_MERGE_THRESHOLD)]
        threshold: f64,
        /// Label phrases with embeddings, one `{label_text, embedding}` per line.
        #[arg(long = "in")]
        r#in: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    BaseSample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Chosen ids, one per line.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PropsCmd {
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory `frames_path` is relative to (default: the manifest's directory).
        #[arg(long)]
        frames_root: Option<PathBuf>,
        #[arg(long, default_value_t = props::MOTION_FPS)]
        frames_fps_motion: f64,
        #[arg(long)]
        out: PathBuf,
    },
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        /// Existing property table to extend.
        #[arg(long)]
        props: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        semantics: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum KdeCmd {
    Fit {
        #[arg(long)]
        property: Property,
        #[arg(long = "in")]
        r#in: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the log-likelihood of a property table under a model.
    Sim {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        r#in: PathBuf,
        /// Also write the result as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SelectionFlags {
    #[arg(long, default_value_t = select::DEFAULT_TAU)]
    tau: f64,
    #[arg(long, value_parser = parse_weights, default_value = "5,10,8,8,10,5")]
    weights: [f64; 6],
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long, default_value = "balancedness")]
    mode: Mode,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    target: usize,
    #[command(flatten)]
    flags: SelectionFlags,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = select::DEFAULT_TAU)]
    tau: f64,
    #[arg(long, value_parser = parse_weights, default_value = "5,10,8,8,10,5")]
    weights: [f64; 6],
    #[arg(long)]
    props: PathBuf,
    /// Removed ids, highest score first.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplaceArgs {
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value = "balancedness")]
    mode: Mode,
    /// Videos drawn between refits (capped at the number removed).
    #[arg(long, default_value_t = usize::MAX)]
    k: usize,
    #[command(flatten)]
    flags: SelectionFlags,
    #[arg(long)]
    props: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-round selection audit.
    #[arg(long)]
    audit: Option<PathBuf>,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long, default_value = "pretrain")]
    role: Role,
    /// Base videos per class (default: 20 for pretrain, 5 for test).
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    target: usize,
    #[arg(long)]
    k: usize,
    #[command(flatten)]
    flags: SelectionFlags,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    props: PathBuf,
    /// Manifest of an existing dataset to extend instead of sampling a base.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Kl,
    Ce,
    Combined,
    Svsa,
    Cf,
    Total,
}

#[derive(Clone, Copy, ValueEnum)]
enum HingeArg {
    Below,
    Above,
}

#[derive(Subcommand)]
enum LossCmd {
    /// Print a loss computed from a feature bundle.
    ///
    /// Matrices used: kl `visual`, `text`; ce `lite`, `heavy`; combined `lite`,
    /// `heavy`, `text`; svsa `svsa_pred`, `svsa_motion`; cf `cf_text`,
    /// `cf_visual`; total all of combined, svsa and cf.
    Eval {
        #[arg(long, value_enum)]
        which: Which,
        #[arg(long)]
        features: PathBuf,
        /// Whitespace-separated class ids, one per batch row.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = losses::DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = losses::DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long, value_enum, default_value_t = HingeArg::Below)]
        hinge: HingeArg,
        #[arg(long, default_value_t = losses::DEFAULT_LAMBDA1)]
        lambda1: f64,
        #[arg(long, default_value_t = losses::DEFAULT_LAMBDA2)]
        lambda2: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CfCmd {
    Build {
        #[arg(long, default_value_t = counterfactual::DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = losses::DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long, default_value_t = counterfactual::DEFAULT_POSE_THRESHOLD)]
        pose_threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Video id in the detection file (default: its only video).
        #[arg(long)]
        id: Option<String>,
        /// Per-frame class ids.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// Property tables, one per dataset; each is named after its file stem.
    #[arg(long, num_args = 1.., required = true)]
    props: Vec<PathBuf>,
    #[arg(long, value_parser = parse_weights, default_value = "5,10,8,8,10,5")]
    weights: [f64; 6],
    /// Ids to highlight in PCA scatters, one per line.
    #[arg(long)]
    highlight: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_weights(s: &str) -> Result<[f64; 6], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|v: Vec<f64>| format!("expected 6 comma-separated weights, got {}", v.len()))
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

struct Ctx {
    level: LogLevel,
    record: Value,
}

impl Ctx {
    fn log(&self, level: LogLevel, msg: &str) {
        if level <= self.level {
            let tag = match level {
                LogLevel::Error => "error",
                LogLevel::Warn => "warn",
                LogLevel::Info => "info",
            };
            eprintln!("{}", json!({ "level": tag, "message": msg }));
        }
    }

    /// Writes the run record beside a file output (`<stem>.run.json`).
    fn beside(&self, out: &Path) -> CliResult {
        let stem = out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.write_record(&out.with_file_name(format!("{stem}.run.json")))
    }

    /// Writes the run record inside a directory output.
    fn inside(&self, dir: &Path) -> CliResult {
        self.write_record(&dir.join("run.json"))
    }

    fn write_record(&self, path: &Path) -> CliResult {
        Ok(jsonl::write_json(path, &self.record)?)
    }
}

fn digest_path(path: &Path) -> CliResult<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| io_err(path, err)))
            .collect::<CliResult<_>>()?;
        entries.sort();
        let mut listing = String::new();
        for p in entries.iter().filter(|p| p.is_file()) {
            let name = p.file_name().unwrap().to_string_lossy();
            listing.push_str(&format!("{name}\t{}\n", report::sha256_file(p)?));
        }
        Ok(report::sha256_hex(listing.as_bytes()))
    } else {
        Ok(report::sha256_file(path)?)
    }
}

/// Tool version, subcommand, every effective parameter with where it came
/// from, and digests of the config file and all inputs.
fn run_record(
    matches: &clap::ArgMatches,
    from_config: &[String],
    cfg: &config::ConfigFile,
) -> CliResult<Value> {
    let mut leaf = matches;
    let mut names = Vec::new();
    while let Some((name, sub)) = leaf.subcommand() {
        names.push(name.to_string());
        leaf = sub;
    }
    let mut parameters = BTreeMap::new();
    let mut sources = BTreeMap::new();
    let mut inputs = Vec::new();
    for id in leaf.ids() {
        let id = id.as_str();
        if UNRECORDED_IDS.contains(&id) {
            continue;
        }
        let Ok(Some(raw)) = leaf.try_get_raw(id) else {
            continue;
        };
        let values: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
        let source = if from_config.iter().any(|k| k == id) {
            "config_file"
        } else {
            match leaf.value_source(id) {
                Some(ValueSource::CommandLine) => "command_line",
                Some(ValueSource::EnvVariable) => "environment",
                _ => "default",
            }
        };
        if INPUT_IDS.contains(&id) {
            for v in &values {
                let p = Path::new(v);
                inputs.push(json!({ "flag": id, "path": v, "sha256": digest_path(p)? }));
            }
        }
        let value = if values.len() == 1 {
            Value::String(values[0].clone())
        } else {
            Value::from(values)
        };
        parameters.insert(id.to_string(), value);
        sources.insert(id.to_string(), source);
    }
    let config_file = match &cfg.path {
        Some(p) => json!({ "path": p.to_string_lossy(), "sha256": report::sha256_file(p)? }),
        None => Value::Null,
    };
    Ok(json!({
        "tool_version": manifest::TOOL_VERSION,
        "command": names.join(" "),
        "parameters": parameters,
        "sources": sources,
        "config_file": config_file,
        "inputs": inputs,
    }))
}

fn read_ids(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn write_lines(path: &Path, lines: &[String]) -> CliResult {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_labels(path: &Path) -> CliResult<Vec<u32>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<u32>().map_err(|_| {
                Failure::Core(Error::Invalid(format!(
                    "{}: bad class id {t:?}",
                    path.display()
                )))
            })
        })
        .collect()
}

fn print_value(v: f64) -> CliResult {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{v}").map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn selection_config(mode: Mode, k: usize, target: usize, f: &SelectionFlags) -> SelectionConfig {
    SelectionConfig {
        tau: f.tau,
        weights: f.weights,
        ..SelectionConfig::new(mode, k, target, f.seed)
    }
}

fn run_manifest(cmd: ManifestCmd, ctx: &Ctx) -> CliResult {
    match cmd {
        ManifestCmd::MergeClasses {
            threshold,
            r#in,
            out,
        } => {
            let labels: Vec<LabelVector> =
                jsonl::read(&r#in)?.into_iter().map(|(_, l)| l).collect();
            let table = manifest::merge_classes(&labels, threshold)?;
            ctx.log(
                LogLevel::Info,
                &format!(
                    "{} labels merged into {} classes",
                    labels.len(),
                    table.len()
                ),
            );
            manifest::write_class_table(&table, &out)?;
            ctx.beside(&out)
        }
        ManifestCmd::BaseSample {
            manifest: m,
            per_class,
            seed,
            out,
        } => {
            let corpus = manifest::load_manifest(&m)?;
            let sample = manifest::sample_class_balanced(&corpus, per_class, seed)?;
            for s in &sample.shortfalls {
                ctx.log(
                    LogLevel::Warn,
                    &format!(
                        "class {} has {} of {} requested videos",
                        s.label_id, s.population, s.requested
                    ),
                );
            }
            write_lines(&out, &sample.ids)?;
            ctx.beside(&out)
        }
    }
}

fn run_props(cmd: PropsCmd, ctx: &Ctx) -> CliResult {
    match cmd {
        PropsCmd::Extract {
            manifest: m,
            frames_root,
            frames_fps_motion,
            out,
        } => {
            let corpus = manifest::load_manifest(&m)?;
            let base = frames_root
                .unwrap_or_else(|| m.parent().map(Path::to_path_buf).unwrap_or_default());
            let opts = ExtractOptions {
                motion_fps: frames_fps_motion,
                ..ExtractOptions::default()
            };
            let table = props::extract_table(&corpus, &base, &opts)?;
            props::write_property_table(&table, &out)?;
            ctx.beside(&out)
        }
        PropsCmd::Ingest {
            manifest: m,
            props: existing,
            detections,
            semantics,
            out,
        } => {
            let corpus = manifest::load_manifest(&m)?;
            let mut table = match existing {
                Some(p) => props::load_property_table(&p)?,
                None => props::PropertyTable::default(),
            };
            let dets = detections
                .map(|d| props::ingest_detections(&d, &corpus))
                .transpose()?;
            let sems = semantics
                .map(|s| props::load_semantic_vectors(&s))
                .transpose()?;
            props::ingest_into(&mut table, &corpus, dets.as_ref(), sems.as_ref())?;
            props::write_property_table(&table, &out)?;
            ctx.beside(&out)
        }
    }
}

fn run_kde(cmd: KdeCmd, ctx: &Ctx) -> CliResult {
    match cmd {
        KdeCmd::Fit {
            property,
            r#in,
            out,
        } => {
            let table = props::load_property_table(&r#in)?;
            let model = kde::fit_property(&table, property)?;
            for w in model.warnings() {
                ctx.log(LogLevel::Warn, w);
            }
            model.save(&out, Some(property))?;
            ctx.beside(&out)
        }
        KdeCmd::Sim { model, r#in, out } => {
            let (property, m) = DensityModel::load(&model)?;
            let property = property.ok_or_else(|| {
                Failure::Core(Error::Invalid(format!(
                    "{}: model does not record its property",
                    model.display()
                )))
            })?;
            let table = props::load_property_table(&r#in)?;
            let queries = kde::property_queries(&table, property)?;
            let sim = kde::ego_similarity(&m, &queries)?;
            print_value(sim)?;
            if let Some(out) = out {
                jsonl::write_json(
                    &out,
                    &json!({ "property": property.name(), "points": queries.rows(), "log_similarity": sim }),
                )?;
                ctx.beside(&out)?;
            }
            Ok(())
        }
    }
}

fn run_loss(cmd: LossCmd, ctx: &Ctx) -> CliResult {
    let LossCmd::Eval {
        which,
        features,
        labels,
        tau,
        gamma,
        hinge,
        lambda1,
        lambda2,
        out,
    } = cmd;
    let bundle = FeatureBundle::load(&features)?;
    let hinge = match hinge {
        HingeArg::Below => Hinge::Below,
        HingeArg::Above => Hinge::Above,
    };
    let labels = || -> CliResult<Vec<u32>> {
        match &labels {
            Some(p) => read_labels(p),
            None => Err(Failure::Usage("--labels is required for this loss".into())),
        }
    };
    let combined = || -> CliResult<f64> {
        let y = labels()?;
        Ok(losses::combined_alignment(
            bundle.get("lite")?,
            bundle.get("heavy")?,
            bundle.get("text")?,
            &y,
            tau,
        )?)
    };
    let svsa = || -> CliResult<f64> {
        Ok(losses::svsa_mean(bundle.get("svsa_pred")?, bundle.get("svsa_motion")?)?.0)
    };
    let cf = || -> CliResult<f64> {
        Ok(losses::counterfactual_mean(
            bundle.get("cf_text")?,
            bundle.get("cf_visual")?,
            gamma,
            hinge,
        )?)
    };
    let value = match which {
        Which::Kl => {
            losses::kl_contrastive(bundle.get("visual")?, bundle.get("text")?, &labels()?, tau)?
        }
        Which::Ce => losses::ce_contrastive(bundle.get("lite")?, bundle.get("heavy")?, tau)?,
        Which::Combined => combined()?,
        Which::Svsa => svsa()?,
        Which::Cf => cf()?,
        Which::Total => losses::total_loss(
            LossParts {
                contrastive: combined()?,
                svsa: svsa()?,
                counterfactual: cf()?,
            },
            lambda1,
            lambda2,
        ),
    };
    print_value(value)?;
    if let Some(out) = out {
        let name = Which::to_possible_value(&which)
            .map(|v| v.get_name().to_string())
            .unwrap_or_default();
        jsonl::write_json(&out, &json!({ "which": name, "value": value }))?;
        ctx.beside(&out)?;
    }
    Ok(())
}

fn run_cf(cmd: CfCmd, ctx: &Ctx) -> CliResult {
    let CfCmd::Build {
        alpha,
        gamma,
        pose_threshold,
        seed,
        frames,
        detections,
        id,
        labels,
        out,
    } = cmd;
    let paths = list_frames(&frames)?;
    let images = paths
        .iter()
        .map(|p| FrameImage::open(p))
        .collect::<Result<Vec<_>, _>>()?;
    let dets = props::read_detections(&detections)?;
    let id = match id {
        Some(id) => id,
        None if dets.len() == 1 => dets.keys().next().unwrap().clone(),
        None => {
            return Err(Failure::Usage(format!(
                "{} holds {} videos; pass --id",
                detections.display(),
                dets.len()
            )))
        }
    };
    let video = dets
        .get(&id)
        .ok_or_else(|| Failure::Core(Error::UnknownId(id.clone())))?;
    let mut evidence = FrameEvidence::from_detections(video, images.len());
    if let Some(l) = labels {
        evidence.labels = Some(read_labels(&l)?);
    }
    let cfg = CfConfig {
        alpha,
        gamma,
        pose_dissimilarity_threshold: pose_threshold,
        seed,
    };
    let (result, log) = counterfactual::build_counterfactual(&images, &evidence, &cfg)?;
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let modified: Vec<usize> = log
        .iter()
        .filter(|m| m.strategy != Strategy::Skipped)
        .map(|m| m.index)
        .collect();
    for (i, p) in paths.iter().enumerate() {
        let dest = out.join(p.file_name().unwrap());
        if modified.contains(&i) {
            result[i].save(&dest)?;
        } else {
            std::fs::copy(p, &dest).map_err(|e| io_err(&dest, e))?;
        }
    }
    let skipped = log.len() - modified.len();
    if skipped > 0 {
        ctx.log(
            LogLevel::Warn,
            &format!("{skipped} chosen frames had no eligible donor"),
        );
    }
    counterfactual::write_log(&out.join("modifications.jsonl"), &log)?;
    ctx.inside(&out)
}

fn run(cli: Cli, ctx: &Ctx) -> CliResult {
    match cli.command {
        Command::Manifest(cmd) => run_manifest(cmd, ctx),
        Command::Props(cmd) => run_props(cmd, ctx),
        Command::Kde(cmd) => run_kde(cmd, ctx),
        Command::Select(a) => {
            let source = props::load_property_table(&a.source)?;
            let pool = props::load_property_table(&a.pool)?;
            let cfg = selection_config(a.mode, a.k, a.target, &a.flags);
            let result = select::select(&source, &pool, &cfg)?;
            select::write_selection(&a.out, &result)?;
            ctx.beside(&a.out)
        }
        Command::Prune(a) => {
            let table = props::load_property_table(&a.props)?;
            let removed = select::prune(&table, a.fraction, &a.weights, a.tau)?;
            write_lines(&a.out, &removed)?;
            ctx.beside(&a.out)
        }
        Command::Replace(a) => {
            let table = props::load_property_table(&a.props)?;
            let pool = props::load_property_table(&a.pool)?;
            let cfg = selection_config(a.mode, a.k, a.k, &a.flags);
            let r = select::replace(&table, &pool, a.fraction, &cfg)?;
            jsonl::write_json(&a.out, &json!({ "removed": r.removed, "added": r.added }))?;
            if let Some(audit) = &a.audit {
                select::write_selection(audit, &r.selection)?;
            }
            ctx.beside(&a.out)
        }
        Command::Build(a) => {
            let corpus = manifest::load_manifest(&a.manifest)?;
            let table = props::load_property_table(&a.props)?;
            let base = match &a.base {
                Some(p) => Some(
                    manifest::load_manifest(p)?
                        .records
                        .into_iter()
                        .map(|r| r.id)
                        .collect(),
                ),
                None => None,
            };
            let opts = BuildOptions {
                role: a.role,
                per_class: a.per_class.unwrap_or(a.role.default_per_class()),
                config: selection_config(Mode::Balancedness, a.k, a.target, &a.flags),
                base,
            };
            let outcome = select::build_dataset(&corpus, &table, &opts)?;
            for s in &outcome.shortfalls {
                ctx.log(
                    LogLevel::Warn,
                    &format!(
                        "class {} has {} of {} requested videos",
                        s.label_id, s.population, s.requested
                    ),
                );
            }
            manifest::write_manifest(&outcome.manifest, &a.out)?;
            let stem = a
                .out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            select::write_selection(
                &a.out.with_file_name(format!("{stem}.selection.jsonl")),
                &outcome.selection,
            )?;
            ctx.beside(&a.out)
        }
        Command::Loss(cmd) => run_loss(cmd, ctx),
        Command::Cf(cmd) => run_cf(cmd, ctx),
        Command::Report(a) => {
            let datasets = a
                .props
                .iter()
                .map(|p| {
                    let name = p
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    Ok((name, props::load_property_table(p)?))
                })
                .collect::<CliResult<Vec<_>>>()?;
            let opts = ReportOptions {
                weights: a.weights,
                highlight: a
                    .highlight
                    .as_deref()
                    .map(read_ids)
                    .transpose()?
                    .unwrap_or_default(),
                ..ReportOptions::default()
            };
            let bundle = report::emit_report(&datasets, &opts, &a.out)?;
            for n in &bundle.notes {
                ctx.log(LogLevel::Info, n);
            }
            ctx.inside(&a.out)
        }
    }
}

fn worker_count(flag: Option<usize>, cfg: &config::ConfigFile) -> CliResult<Option<usize>> {
    let parse = |what: &str, v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("{what} must be a positive integer, got {v:?}")))
    };
    if let Some(n) = flag {
        return if n > 0 {
            Ok(Some(n))
        } else {
            Err(Failure::Usage("--workers must be positive".into()))
        };
    }
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        return parse(WORKERS_ENV, &v).map(Some);
    }
    cfg.workers()
        .map(|v| parse("config key workers", v))
        .transpose()
}

/// Long flags of the subcommand named in `args`, globals included, so one
/// config file can serve several subcommands.
fn accepted_flags(args: &[OsString]) -> Vec<String> {
    let mut cmd = Cli::command();
    cmd.build();
    let mut leaf = &cmd;
    for a in args.iter().skip(1) {
        let s = a.to_string_lossy();
        if s.starts_with('-') {
            continue;
        }
        if let Some(sub) = leaf.find_subcommand(s.as_ref()) {
            leaf = sub;
        }
    }
    leaf.get_arguments()
        .filter_map(|a| a.get_long())
        .map(String::from)
        .collect()
}

fn fail(f: Failure) -> ExitCode {
    let (code, line) = match f {
        Failure::Usage(msg) => (2, json!({ "error": "usage", "message": msg })),
        Failure::Core(e) => {
            let code = match &e {
                Error::Io { .. } => 4,
                Error::InvalidArgument(_) => 2,
                _ => 3,
            };
            let mut v = json!({ "error": e.kind(), "message": e.to_string() });
            if let Error::Io { path, .. } | Error::Parse { path, .. } = &e {
                v["path"] = Value::String(path.to_string_lossy().into_owned());
            }
            (code, v)
        }
    };
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let args: Vec<OsString> = std::env::args_os().collect();
    let cfg = match config::load(&args) {
        Ok(c) => c,
        Err(config::ConfigError::Io(path, e)) => return fail(io_err(&path, e)),
        Err(config::ConfigError::Syntax(path, line, msg)) => {
            return fail(Failure::Core(Error::Parse {
                path,
                line,
                message: msg,
            }))
        }
    };
    let accepted = accepted_flags(&args);
    let (merged, from_config) = cfg.merge(&args, |k| accepted.iter().any(|a| a == k));
    let matches = match Cli::command().try_get_matches_from(merged) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let workers = match worker_count(cli.workers, &cfg) {
        Ok(w) => w,
        Err(f) => return fail(f),
    };
    if let Some(n) = workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            return fail(Failure::Usage(format!("cannot start {n} workers: {e}")));
        }
    }
    let record = match run_record(&matches, &from_config, &cfg) {
        Ok(r) => r,
        Err(f) => return fail(f),
    };
    let ctx = Ctx {
        level: cli.log_level,
        record,
    };
    match run(cli, &ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}
