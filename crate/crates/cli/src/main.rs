//! `snip`: batch front end for the scale-normalized pyramid toolkit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use snip_core::anchors::{dataset_match_stats, AnchorConfig};
use snip_core::chips::{sample_dataset_chips, ChipSummary};
use snip_core::config::RunConfig;
use snip_core::dataset::{
    load_dataset, load_results, results_to_json, scale_stats, Dataset, ScaleSource,
};
use snip_core::eval::{evaluate_detections, evaluate_proposals, percent, REPORT_COLUMNS};
use snip_core::filter::{filter_detections, Stage};
use snip_core::fusion::{fuse_images, Detection};
use snip_core::pyramid::build_plan;
use snip_core::sim::{
    population_from_dataset, simulate, synthesize_population, Protocol, QualityModel, SimReport,
};
use snip_core::{BBox, ImageSize, PyramidPlan, ResolutionSpec};

#[derive(Parser, Debug)]
#[command(
    name = "snip",
    version,
    about = "Scale-normalized image pyramid toolkit"
)]
struct Cli {
    /// JSON config file; missing sections use the built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Write output here instead of stdout
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for randomized commands
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[arg(long, global = true, value_enum)]
    format: Option<Format>,

    /// Log every validity verdict
    #[arg(long, global = true)]
    debug: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Rcn,
    Rpn,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SourceArg {
    AnnotationArea,
    BoxArea,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Relative-scale statistics of a COCO annotation file
    Stats {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_enum)]
        source: Option<SourceArg>,
    },
    /// Pyramid plans for every image, or for one --width/--height
    Plan {
        #[arg(long, required_unless_present = "width")]
        annotations: Option<PathBuf>,
        #[arg(long, requires = "height")]
        width: Option<u32>,
        #[arg(long, requires = "width")]
        height: Option<u32>,
        /// Resolution as SHORTERxMAX, repeatable
        #[arg(long = "spec")]
        specs: Vec<ResolutionSpec>,
    },
    /// Anchor coverage of ground truths at one resolution
    Anchors {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        spec: Option<ResolutionSpec>,
        /// Use the seven-scale anchor set
        #[arg(long)]
        improved: bool,
    },
    /// Greedy training-chip cover per image
    Chips {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        spec: Option<ResolutionSpec>,
        /// Cover every object, not only small ones
        #[arg(long)]
        all_objects: bool,
    },
    /// Validity verdicts per ground truth and level, or filter detections
    Filter {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_enum, default_value = "rcn")]
        stage: StageArg,
        /// COCO results (original frame) to filter at --spec
        #[arg(long, requires = "spec")]
        detections: Option<PathBuf>,
        #[arg(long)]
        spec: Option<ResolutionSpec>,
    },
    /// Merge per-level detections into one result set
    Fuse {
        #[arg(long)]
        annotations: PathBuf,
        /// One COCO results file per pyramid level, in config order, each in
        /// its level's scaled frame
        #[arg(long, num_args = 1.., required = true)]
        detections: Vec<PathBuf>,
    },
    /// COCO detection AP, or proposal recall with --proposals
    Eval {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        proposals: bool,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Compare training protocols on the synthetic detector
    Simulate {
        /// Build the population from annotations instead of synthesizing it
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// JSON list of protocols
        #[arg(long)]
        protocols: Option<PathBuf>,
        /// Quality preset: cnn-b, cnn-s or cnn-b-ft
        #[arg(long)]
        quality: Option<String>,
        /// Independent seeded runs, summarized
        #[arg(long, default_value_t = 1)]
        runs: u64,
    },
    /// Print the effective configuration
    Config,
}

impl Command {
    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = Vec::new();
        match self {
            Command::Stats { annotations, .. }
            | Command::Anchors { annotations, .. }
            | Command::Chips { annotations, .. } => v.push(annotations),
            Command::Plan { annotations, .. } | Command::Simulate { annotations, .. } => {
                v.extend(annotations.as_deref())
            }
            Command::Filter {
                annotations,
                detections,
                ..
            } => {
                v.push(annotations);
                v.extend(detections.as_deref());
            }
            Command::Fuse {
                annotations,
                detections,
            } => {
                v.push(annotations);
                v.extend(detections.iter().map(PathBuf::as_path));
            }
            Command::Eval {
                annotations,
                detections,
                ..
            } => {
                v.push(annotations);
                v.push(detections);
            }
            Command::Config => {}
        }
        if let Command::Simulate {
            protocols: Some(p), ..
        } = self
        {
            v.push(p);
        }
        v
    }

    fn default_format(&self) -> Format {
        match self {
            Command::Eval { .. } | Command::Simulate { .. } => Format::Table,
            _ => Format::Json,
        }
    }
}

/// Exit status for a failed run: 2 for bad input data, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<snip_core::Error>() {
        Some(e) if e.is_data_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.debug { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("snip: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        set_jobs(jobs)?;
    }
    if let Some(out) = &cli.out {
        for input in cli.command.inputs() {
            if same_file(out, input) {
                bail!("--out {} would overwrite an input file", out.display());
            }
        }
    }
    let format = cli.format.unwrap_or_else(|| cli.command.default_format());
    let text = match &cli.command {
        Command::Stats {
            annotations,
            source,
        } => cmd_stats(&cfg, annotations, *source, format)?,
        Command::Plan {
            annotations,
            width,
            height,
            specs,
        } => {
            let specs = if specs.is_empty() {
                cfg.pyramid.specs.clone()
            } else {
                specs.clone()
            };
            cmd_plan(annotations.as_deref(), width.zip(*height), &specs, format)?
        }
        Command::Anchors {
            annotations,
            spec,
            improved,
        } => cmd_anchors(&cfg, annotations, *spec, *improved, format)?,
        Command::Chips {
            annotations,
            spec,
            all_objects,
        } => cmd_chips(&cfg, cli.seed, annotations, *spec, *all_objects, format)?,
        Command::Filter {
            annotations,
            stage,
            detections,
            spec,
        } => {
            let stage = match stage {
                StageArg::Rcn => Stage::Rcn,
                StageArg::Rpn => Stage::Rpn,
            };
            cmd_filter(
                &cfg,
                annotations,
                stage,
                detections.as_deref().zip(*spec),
                format,
            )?
        }
        Command::Fuse {
            annotations,
            detections,
        } => cmd_fuse(&cfg, annotations, detections, format)?,
        Command::Eval {
            annotations,
            detections,
            proposals,
            budget,
        } => cmd_eval(&cfg, annotations, detections, *proposals, *budget, format)?,
        Command::Simulate {
            annotations,
            protocols,
            quality,
            runs,
        } => cmd_simulate(
            &cfg,
            cli.seed.unwrap_or(0),
            annotations.as_deref(),
            protocols.as_deref(),
            quality.as_deref(),
            *runs,
            format,
        )?,
        Command::Config => cfg.to_json_pretty() + "\n",
    };
    match &cli.out {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn set_jobs(jobs: usize) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()?;
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn set_jobs(jobs: usize) -> anyhow::Result<()> {
    if jobs > 1 {
        log::warn!("built without the parallel feature; --jobs {jobs} runs sequentially");
    }
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn to_json(v: &impl serde::Serialize) -> String {
    serde_json::to_string(v).expect("output serializes") + "\n"
}

fn json_lines(values: impl IntoIterator<Item = Value>) -> String {
    values.into_iter().map(|v| v.to_string() + "\n").collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

fn cmd_stats(
    cfg: &RunConfig,
    annotations: &Path,
    source: Option<SourceArg>,
    format: Format,
) -> anyhow::Result<String> {
    let ds = load_dataset(annotations)?;
    for v in ds.soft_violations() {
        log::warn!("{v}");
    }
    let source = match source {
        Some(SourceArg::AnnotationArea) => ScaleSource::AnnotationArea,
        Some(SourceArg::BoxArea) => ScaleSource::BoxArea,
        None => cfg.stats.scale_source,
    };
    let stats = scale_stats(&ds, source)?;
    Ok(match format {
        Format::Json => to_json(&stats),
        Format::Csv => format!(
            "metric,value\ncount,{}\nmedian,{}\np10,{}\np90,{}\nviolations,{}\n",
            stats.count,
            stats.median,
            stats.p10,
            stats.p90,
            stats.violations.len()
        ),
        Format::Table => format!(
            "instances   {}\nmedian      {:.4}\np10         {:.4}\np90         {:.4}\nviolations  {}\n",
            stats.count,
            stats.median,
            stats.p10,
            stats.p90,
            stats.violations.len()
        ),
    })
}

fn plan_rows(image_id: Option<u64>, plan: &PyramidPlan, format: Format, out: &mut String) {
    for l in &plan.levels {
        let id = image_id.map_or_else(String::new, |i| i.to_string());
        match format {
            Format::Csv => {
                let _ = writeln!(
                    out,
                    "{id},{},{},{},{},{}",
                    l.spec.shorter, l.spec.max_side, l.factor, l.scaled_width, l.scaled_height
                );
            }
            _ => {
                let _ = writeln!(
                    out,
                    "{id:>10}  {:>10}  {:>10.6}  {}x{}",
                    l.spec.to_string(),
                    l.factor,
                    l.scaled_width,
                    l.scaled_height
                );
            }
        }
    }
}

fn cmd_plan(
    annotations: Option<&Path>,
    single: Option<(u32, u32)>,
    specs: &[ResolutionSpec],
    format: Format,
) -> anyhow::Result<String> {
    let mut plans: Vec<(Option<u64>, PyramidPlan)> = Vec::new();
    if let Some((w, h)) = single {
        plans.push((None, build_plan(ImageSize::new(w, h)?, specs)?));
    } else if let Some(path) = annotations {
        let ds = load_dataset(path)?;
        for (img, _) in ds.grouped() {
            plans.push((Some(img.id), build_plan(img.size(), specs)?));
        }
    }
    Ok(match format {
        Format::Json if single.is_some() => to_json(&plans[0].1),
        Format::Json => json_lines(plans.iter().map(|(id, p)| {
            let mut v = serde_json::to_value(p).expect("plan serializes");
            v["image_id"] = json!(id);
            v
        })),
        Format::Csv | Format::Table => {
            let mut out = if format == Format::Csv {
                "image_id,shorter,max_side,factor,scaled_width,scaled_height\n".to_string()
            } else {
                format!(
                    "{:>10}  {:>10}  {:>10}  scaled\n",
                    "image", "spec", "factor"
                )
            };
            for (id, p) in &plans {
                plan_rows(*id, p, format, &mut out);
            }
            out
        }
    })
}

fn cmd_anchors(
    cfg: &RunConfig,
    annotations: &Path,
    spec: Option<ResolutionSpec>,
    improved: bool,
    format: Format,
) -> anyhow::Result<String> {
    let ds = load_dataset(annotations)?;
    let spec = spec.unwrap_or(cfg.anchors.spec);
    let anchors = if improved {
        AnchorConfig::improved()
    } else {
        cfg.anchors.anchors.clone()
    };
    anchors.validate()?;
    let report = dataset_match_stats(&ds, spec, &anchors, &cfg.anchors.thresholds);
    Ok(match format {
        Format::Json => {
            let mut v = report.to_json();
            v["spec"] = json!(spec.to_string());
            v["anchors_per_cell"] = json!(anchors.anchors_per_cell());
            v["stride"] = json!(anchors.stride);
            v.to_string() + "\n"
        }
        Format::Csv => {
            let mut out = "threshold,fraction\n".to_string();
            for (t, f) in report.thresholds.iter().zip(report.fractions()) {
                let _ = writeln!(
                    out,
                    "{t},{}",
                    f.map_or_else(|| "n/a".into(), |f| f.to_string())
                );
            }
            out
        }
        Format::Table => {
            let mut out = format!(
                "spec {spec}, {} anchors per cell, {} ground truths\n",
                anchors.anchors_per_cell(),
                report.total_gt
            );
            for (t, f) in report.thresholds.iter().zip(report.fractions()) {
                let _ = writeln!(out, "max IoU >= {t:<5} {}", opt(f));
            }
            out
        }
    })
}

fn chip_json(b: &BBox) -> Value {
    json!({"x": b.x, "y": b.y, "w": b.w, "h": b.h})
}

fn cmd_chips(
    cfg: &RunConfig,
    seed: Option<u64>,
    annotations: &Path,
    spec: Option<ResolutionSpec>,
    all_objects: bool,
    format: Format,
) -> anyhow::Result<String> {
    let ds = load_dataset(annotations)?;
    let mut chip_cfg = cfg.chips.chips.clone();
    if let Some(seed) = seed {
        chip_cfg.rng_seed = seed;
    }
    if all_objects {
        chip_cfg.cover_side_max = None;
        chip_cfg.original_side_max = None;
    }
    let spec = spec.unwrap_or(cfg.chips.spec);
    let images = sample_dataset_chips(&ds, spec, &chip_cfg)?;
    let summary = ChipSummary::from_images(&images);
    Ok(match format {
        Format::Json => {
            let lines = images.iter().map(|i| {
                json!({
                    "image_id": i.image_id,
                    "chips": i.set.chips.iter().map(chip_json).collect::<Vec<_>>(),
                    "covered": i.set.covered,
                    "excluded": i.set.excluded,
                    "efficiency": i.efficiency,
                })
            });
            json_lines(lines.chain([json!({ "summary": summary })]))
        }
        Format::Csv => {
            let mut out = "image_id,targets,chips,efficiency\n".to_string();
            for i in &images {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    i.image_id,
                    i.targets,
                    i.set.chips.len(),
                    i.efficiency
                );
            }
            out
        }
        Format::Table => {
            let mut out = format!(
                "{:>10} {:>8} {:>6} {:>11}\n",
                "image", "targets", "chips", "efficiency"
            );
            for i in &images {
                let _ = writeln!(
                    out,
                    "{:>10} {:>8} {:>6} {:>11.4}",
                    i.image_id,
                    i.targets,
                    i.set.chips.len(),
                    i.efficiency
                );
            }
            let _ = writeln!(
                out,
                "{} chips over {} images with targets; mean {} per such image",
                summary.chips,
                summary.images_with_targets,
                opt(summary.mean_chips_per_image)
            );
            out
        }
    })
}

fn detections_text(dets: &[Detection], format: Format) -> String {
    match format {
        Format::Json => results_to_json(dets) + "\n",
        Format::Csv | Format::Table => {
            let mut out = "image_id,category_id,x,y,w,h,score\n".to_string();
            for d in dets {
                let b = d.bbox;
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    d.image_id, d.category_id, b.x, b.y, b.w, b.h, d.score
                );
            }
            out
        }
    }
}

fn cmd_filter(
    cfg: &RunConfig,
    annotations: &Path,
    stage: Stage,
    detections: Option<(&Path, ResolutionSpec)>,
    format: Format,
) -> anyhow::Result<String> {
    let ds = load_dataset(annotations)?;
    if let Some((path, spec)) = detections {
        let dets = load_results(path)?;
        ds.check_results(&dets)?;
        if log::log_enabled!(log::Level::Debug) {
            for (i, d) in dets.iter().enumerate() {
                log::debug!(
                    "{}",
                    serde_json::to_string(&cfg.snip.verdict(
                        Stage::Rcn,
                        spec,
                        i as u64,
                        &d.bbox
                    )?)?
                );
            }
        }
        return Ok(detections_text(
            &filter_detections(&dets, spec, &cfg.snip)?,
            format,
        ));
    }
    let mut verdicts = Vec::new();
    for (_, anns) in ds.grouped() {
        for a in anns.into_iter().filter(|a| !a.iscrowd) {
            for &spec in cfg.snip.ranges(stage).keys() {
                let v = cfg.snip.verdict(stage, spec, a.id, &a.bbox)?;
                log::debug!("{}", serde_json::to_string(&v)?);
                verdicts.push(v);
            }
        }
    }
    Ok(match format {
        Format::Json => json_lines(
            verdicts
                .iter()
                .map(|v| serde_json::to_value(v).expect("verdict serializes")),
        ),
        Format::Csv | Format::Table => {
            let mut out = "id,level,side,valid,reason\n".to_string();
            for v in &verdicts {
                let reason = serde_json::to_value(v.reason).expect("reason serializes");
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    v.id,
                    v.level,
                    v.side,
                    v.valid,
                    reason.as_str().unwrap_or_default()
                );
            }
            out
        }
    })
}

fn cmd_fuse(
    cfg: &RunConfig,
    annotations: &Path,
    files: &[PathBuf],
    format: Format,
) -> anyhow::Result<String> {
    let specs = &cfg.pyramid.specs;
    if files.len() != specs.len() {
        bail!(
            "got {} detection files but the pyramid has {} levels ({})",
            files.len(),
            specs.len(),
            specs
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    let ds: Dataset = load_dataset(annotations)?;
    let mut per_level: BTreeMap<ResolutionSpec, Vec<Detection>> = BTreeMap::new();
    for (&spec, path) in specs.iter().zip(files) {
        let dets = load_results(path)?;
        ds.check_results(&dets)?;
        per_level.entry(spec).or_default().extend(dets);
    }
    let mut plans = BTreeMap::new();
    for img in &ds.images {
        plans.insert(img.id, build_plan(img.size(), specs)?);
    }
    if log::log_enabled!(log::Level::Debug) {
        for (&spec, dets) in &per_level {
            for (i, d) in dets.iter().enumerate() {
                if let Some(level) = plans.get(&d.image_id).and_then(|p| p.level(spec)) {
                    let v = cfg.snip.verdict(
                        Stage::Rcn,
                        spec,
                        i as u64,
                        &level.to_original(&d.bbox),
                    )?;
                    log::debug!("{}", serde_json::to_string(&v)?);
                }
            }
        }
    }
    let fused = fuse_images(&per_level, &plans, &cfg.snip, &cfg.soft_nms)?;
    Ok(detections_text(&fused, format))
}

fn cmd_eval(
    cfg: &RunConfig,
    annotations: &Path,
    detections: &Path,
    proposals: bool,
    budget: Option<usize>,
    format: Format,
) -> anyhow::Result<String> {
    let ds = load_dataset(annotations)?;
    let dets = load_results(detections)?;
    if proposals {
        let report = evaluate_proposals(
            &ds,
            &dets,
            budget.unwrap_or(cfg.eval.proposal_budget),
            &cfg.eval.bins,
        )?;
        let blob = to_json(&report);
        return Ok(match format {
            Format::Json => blob,
            Format::Csv => {
                let mut header = vec!["AR".to_string(), "AR50".into(), "AR75".into()];
                header.extend(report.bins.iter().map(|b| format!("R50_{b}")));
                let mut values = vec![report.ar, report.ar50, report.ar75];
                values.extend(report.recall_at_50.iter().copied());
                format!(
                    "{}\n{}\n",
                    header.join(","),
                    values
                        .into_iter()
                        .map(percent)
                        .collect::<Vec<_>>()
                        .join(",")
                )
            }
            Format::Table => {
                let mut head = format!("{:>6} {:>6} {:>6}", "AR", "AR50", "AR75");
                let mut row = format!(
                    "{:>6} {:>6} {:>6}",
                    percent(report.ar),
                    percent(report.ar50),
                    percent(report.ar75)
                );
                for (b, v) in report.bins.iter().zip(&report.recall_at_50) {
                    let _ = write!(head, " {b:>7}");
                    let _ = write!(row, " {:>7}", percent(*v));
                }
                format!("{head}\n{row}\n{blob}")
            }
        });
    }
    let report = evaluate_detections(&ds, &dets, &cfg.eval.bins)?;
    let blob = to_json(&report);
    let cells: Vec<String> = report.values().into_iter().map(percent).collect();
    Ok(match format {
        Format::Json => blob,
        Format::Csv => format!("{}\n{}\n", REPORT_COLUMNS.join(","), cells.join(",")),
        Format::Table => {
            let head: Vec<String> = REPORT_COLUMNS.iter().map(|c| format!("{c:>6}")).collect();
            let row: Vec<String> = cells.iter().map(|c| format!("{c:>6}")).collect();
            format!("{}\n{}\n{blob}", head.join(" "), row.join(" "))
        }
    })
}

fn cmd_simulate(
    cfg: &RunConfig,
    seed: u64,
    annotations: Option<&Path>,
    protocols: Option<&Path>,
    quality: Option<&str>,
    runs: u64,
    format: Format,
) -> anyhow::Result<String> {
    if runs == 0 {
        bail!("--runs must be at least 1");
    }
    let qm = match quality {
        Some(name) => QualityModel::preset(name)?,
        None => cfg.sim.quality,
    };
    let protocols: Vec<Protocol> = match protocols {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| snip_core::Error::Config(format!("{}: {e}", path.display())))?
        }
        None => cfg.protocols()?,
    };
    let dataset_pop = annotations
        .map(load_dataset)
        .transpose()?
        .map(|ds| population_from_dataset(&ds));
    let mut reports: Vec<SimReport> = Vec::new();
    for run in 0..runs {
        let pop = match &dataset_pop {
            Some(p) => p.clone(),
            None => synthesize_population(&cfg.sim.population, seed.wrapping_add(run))?,
        };
        reports.push(simulate(
            &pop,
            &protocols,
            &qm,
            &cfg.sim.competence,
            &cfg.pyramid.specs,
        )?);
    }
    if runs == 1 {
        let report = &reports[0];
        return Ok(match format {
            Format::Json => to_json(report),
            Format::Table => report.to_string(),
            Format::Csv => {
                let mut out = "protocol,small,medium,large,coverage\n".to_string();
                for p in &report.protocols {
                    let b: Vec<String> = p
                        .buckets
                        .iter()
                        .map(|v| v.map_or_else(|| "n/a".into(), |v| v.to_string()))
                        .collect();
                    let _ = writeln!(out, "{},{},{}", p.name, b.join(","), p.coverage);
                }
                out
            }
        });
    }
    let names: Vec<String> = protocols.iter().map(|p| p.name.clone()).collect();
    let mut highest: BTreeMap<&str, u64> = names.iter().map(|n| (n.as_str(), 0)).collect();
    let mut lowest = highest.clone();
    let mut means: Vec<f64> = vec![0.0; names.len()];
    for r in &reports {
        let scores: Vec<f64> = r
            .protocols
            .iter()
            .map(|p| p.score.unwrap_or(f64::NAN))
            .collect();
        for (m, s) in means.iter_mut().zip(&scores) {
            *m += s / runs as f64;
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        // strict extremes only
        if scores.iter().filter(|&&s| s == max).count() == 1 {
            let i = scores.iter().position(|&s| s == max).expect("max present");
            *highest.get_mut(names[i].as_str()).expect("known name") += 1;
        }
        if scores.iter().filter(|&&s| s == min).count() == 1 {
            let i = scores.iter().position(|&s| s == min).expect("min present");
            *lowest.get_mut(names[i].as_str()).expect("known name") += 1;
        }
    }
    let mean_map: BTreeMap<&str, f64> = names
        .iter()
        .map(String::as_str)
        .zip(means.iter().copied())
        .collect();
    Ok(match format {
        Format::Json => to_json(
            &json!({"runs": runs, "mean_small": mean_map, "strictly_highest": highest, "strictly_lowest": lowest}),
        ),
        Format::Csv => {
            let mut out = "protocol,mean_small,strictly_highest,strictly_lowest\n".to_string();
            for (i, n) in names.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{n},{},{},{}",
                    means[i],
                    highest[n.as_str()],
                    lowest[n.as_str()]
                );
            }
            out
        }
        Format::Table => {
            let mut out = format!(
                "{runs} runs from seed {seed}\n{:<12}{:>10}{:>10}{:>10}\n",
                "protocol", "small", "highest", "lowest"
            );
            for (i, n) in names.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{n:<12}{:>10.1}{:>10}{:>10}",
                    means[i] * 100.0,
                    highest[n.as_str()],
                    lowest[n.as_str()]
                );
            }
            out
        }
    })
}
