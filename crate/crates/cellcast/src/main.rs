//! cellcast command line: synth | ingest | cluster | train | evaluate |
//! report. Stages communicate only through files in the work directory;
//! data goes to files, logs go to stderr as key=value lines.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use cellcast::cluster::{
    cluster_cells, read_assignment_csv, write_assignment_csv, write_matrix_csv, ClusterOptions,
};
use cellcast::config::{read_kv_file, write_kv_file, RunConfig};
use cellcast::error::{Error, Result};
use cellcast::eval::{
    evaluate, export_grid_heatmap, export_traces, read_summary_csv, write_cells_csv,
    write_summary_csv, write_trace_csv, EvalReport,
};
use cellcast::ingest::{
    generate_synthetic, ingest_dir, read_series_auto, select_central_cells, write_labels_csv,
    write_series_bin, write_series_csv, ActivitySelector, Regime, SyntheticSpec, GRID_SIDE,
};
use cellcast::model::{ModelGraph, ModelSpec, Variant};
use cellcast::profile::{peak_histogram, write_group_profiles_csv, write_peak_histograms_csv};
use cellcast::trainer::{dataset_splits, run_experiment, write_train_log, NormStats, TRAIN_DAYS};

#[derive(Parser)]
#[command(
    name = "cellcast",
    about = "Peak-hour clustering and TCN-LSTM forecasting for cellular grid traffic",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic hourly traffic.
    Synth {
        /// Number of cells (ids 1..=N).
        #[arg(long)]
        cells: u32,
        /// Colon-separated regime peak hours, e.g. 15:21.
        #[arg(long)]
        regimes: String,
        #[arg(long)]
        days: u32,
        #[arg(long)]
        seed: u64,
        /// Series output path (.bin for the binary cache, else CSV).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Regime labels output path (default: labels.csv next to --out).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 50.0)]
        base: f64,
        #[arg(long, default_value_t = 100.0)]
        amplitude: f64,
        /// Log-normal noise parameter on the daily bump.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Aggregate raw tab-separated activity files into hourly series.
    Ingest {
        /// Directory of .txt / .tsv input files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "internet")]
        selector: String,
        /// First local calendar day, YYYY-MM-DD.
        #[arg(long)]
        start: String,
        #[arg(long)]
        days: u32,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Local-time offset applied to record timestamps, in hours.
        #[arg(long, default_value_t = 1)]
        tz_offset_hours: i64,
        /// Keep only the centered NxN block of the grid (0 keeps all).
        #[arg(long, default_value_t = 0)]
        central: u32,
    },
    /// Group cells by peak hour and merge groups into K clusters.
    Cluster {
        #[arg(long)]
        series: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training window in days used for peaks and profiles.
        #[arg(long, default_value_t = TRAIN_DAYS as u32)]
        days: u32,
        /// Correlate 24-hour folded profiles instead of the full window.
        #[arg(long)]
        fold_daily: bool,
    },
    /// Train one model per cluster (or one global model).
    Train {
        #[arg(long)]
        series: PathBuf,
        /// Assignment CSV from `cluster`, or "none" for a global model.
        #[arg(long)]
        assignment: String,
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run configuration file (key = value with sections).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the model and trainer seeds from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Maximum concurrent cluster trainings.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Evaluate trained models over the last 10 days.
    Evaluate {
        /// Directory of .weights/.meta files written by `train`.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        assignment: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate existing outputs into the comparison table and exports.
    Report {
        /// Work directory holding series.* and eval/ outputs.
        #[arg(long)]
        work: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(
                buf,
                "level={} msg=\"{}\"",
                record.level().to_string().to_lowercase(),
                record.args()
            )
        })
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!(
            "error: category={} message={:?}",
            e.category(),
            e.to_string()
        );
        std::process::exit(e.exit_code());
    }
}

fn workdir_default(sub: &str, file: Option<&str>) -> Result<PathBuf> {
    let base = std::env::var_os("CELLCAST_WORKDIR").ok_or_else(|| {
        Error::Usage(format!(
            "{sub}: no output path given and CELLCAST_WORKDIR is not set"
        ))
    })?;
    let mut path = PathBuf::from(base);
    if let Some(file) = file {
        path.push(file);
    }
    Ok(path)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            cells,
            regimes,
            days,
            seed,
            out,
            labels,
            base,
            amplitude,
            noise,
        } => {
            let out = match out {
                Some(p) => p,
                None => workdir_default("synth", Some("series.csv"))?,
            };
            let peaks: Vec<u8> = regimes
                .split(':')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        Error::Usage(format!("malformed regime peak hour {s:?} in --regimes"))
                    })
                })
                .collect::<Result<_>>()?;
            if peaks.is_empty() {
                return Err(Error::Usage(
                    "--regimes needs at least one peak hour".into(),
                ));
            }
            let fraction = 1.0 / peaks.len() as f64;
            let spec = SyntheticSpec {
                n_cells: cells,
                regimes: peaks
                    .iter()
                    .map(|p| Regime {
                        peak_hour: *p,
                        base_level: base,
                        amplitude,
                        noise_sigma: noise,
                        cell_fraction: fraction,
                    })
                    .collect(),
                n_days: days,
                seed,
            };
            let (series, labels_map) = generate_synthetic(&spec)?;
            ensure_parent(&out)?;
            write_series(&out, &series)?;
            let labels_path = match labels {
                Some(p) => p,
                None => out
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join("labels.csv"),
            };
            write_labels_csv(&labels_path, &labels_map)?;
            log::info!(
                "synth cells={cells} days={days} seed={seed} out={} labels={}",
                out.display(),
                labels_path.display()
            );
            Ok(())
        }

        Command::Ingest {
            input,
            selector,
            start,
            days,
            out,
            tz_offset_hours,
            central,
        } => {
            let out = match out {
                Some(p) => p,
                None => workdir_default("ingest", Some("series.csv"))?,
            };
            let selector: ActivitySelector = selector.parse()?;
            let date = chrono::NaiveDate::parse_from_str(&start, "%Y-%m-%d")
                .map_err(|_| Error::Usage(format!("--start {start:?} is not YYYY-MM-DD")))?;
            let epoch = chrono::NaiveDate::from_ymd_opt(1970, 1, 1).unwrap();
            let start_hour = date.signed_duration_since(epoch).num_days() * 24;
            let span = start_hour..start_hour + days as i64 * 24;
            let mut agg = ingest_dir(&input, selector, span, tz_offset_hours)?;
            if central > 0 {
                let keep = select_central_cells(GRID_SIDE, central)?;
                agg.cells.retain(|cell, _| keep.contains(cell));
            }
            if agg.cells.is_empty() {
                return Err(Error::Data("ingest produced no cells".into()));
            }
            ensure_parent(&out)?;
            write_series(&out, &agg.cells)?;
            log::info!(
                "ingest cells={} skipped_out_of_span={} out={}",
                agg.cells.len(),
                agg.skipped_out_of_span,
                out.display()
            );
            Ok(())
        }

        Command::Cluster {
            series,
            k,
            out,
            days,
            fold_daily,
        } => {
            let out = match out {
                Some(p) => p,
                None => workdir_default("cluster", Some("cluster"))?,
            };
            let cells = read_series_auto(&series)?;
            let window_hours = days as i64 * 24;
            let train: BTreeMap<u32, _> = cells
                .iter()
                .map(|(id, s)| {
                    s.slice(s.start_hour..s.start_hour + window_hours)
                        .map(|sliced| (*id, sliced))
                })
                .collect::<Result<_>>()?;
            let output = cluster_cells(&train, ClusterOptions { k, fold_daily })?;

            std::fs::create_dir_all(&out).map_err(Error::io(&out))?;
            write_matrix_csv(&out.join("matrix.csv"), &output.matrix)?;
            write_group_profiles_csv(&out.join("groups.csv"), &output.groups)?;
            let histograms: Vec<_> = train
                .values()
                .map(|s| peak_histogram(s, days))
                .collect::<Result<_>>()?;
            write_peak_histograms_csv(&out.join("histograms.csv"), &histograms)?;
            write_assignment_csv(
                &out.join("assignment.csv"),
                &output.groups,
                &output.assignment,
            )?;
            let degenerate = output
                .assignment
                .degenerate_groups
                .iter()
                .map(|g| g.to_string())
                .collect::<Vec<_>>()
                .join(",");
            write_kv_file(
                &out.join("cluster_meta.txt"),
                &[
                    ("k".into(), k.to_string()),
                    ("fold_daily".into(), fold_daily.to_string()),
                    ("quality".into(), output.assignment.quality.to_string()),
                    ("groups".into(), output.groups.len().to_string()),
                    ("degenerate_groups".into(), degenerate),
                ],
            )?;
            log::info!(
                "cluster groups={} k={k} quality={} out={}",
                output.groups.len(),
                output.assignment.quality,
                out.display()
            );
            Ok(())
        }

        Command::Train {
            series,
            assignment,
            variant,
            out,
            config,
            seed,
            jobs,
        } => {
            let variant: Variant = variant.parse()?;
            let cells = read_series_auto(&series)?;
            let assignment_map = load_assignment(&assignment)?;
            let mut run_config = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            if let Some(seed) = seed {
                run_config.train.seed = seed;
                run_config.model.seed = seed;
            }
            if let Some(jobs) = jobs {
                run_config.jobs = jobs;
            }
            for line in run_config.log_lines() {
                log::info!("config {line}");
            }
            let label = variant_label(variant, assignment_map.is_some());
            let out = match out {
                Some(p) => p,
                None => workdir_default("train", Some(&format!("models/{label}")))?,
            };

            let experiment = run_config.experiment(variant);
            let results = run_experiment(
                &cells,
                assignment_map.as_ref().map(|(m, _)| m),
                &experiment,
            )?;
            std::fs::create_dir_all(&out).map_err(Error::io(&out))?;
            for (model_id, trained) in &results {
                let weights = out.join(format!("{model_id}.weights"));
                trained.graph.save_weights(&weights)?;
                let mut meta = trained.graph.spec.to_kv();
                meta.push(("label".into(), label.clone()));
                meta.push(("model_id".into(), model_id.clone()));
                meta.push(("scope".into(), trained.norm.scope.clone()));
                meta.push(("norm_mean".into(), trained.norm.mean.to_string()));
                meta.push(("norm_std".into(), trained.norm.std.to_string()));
                write_kv_file(&out.join(format!("{model_id}.meta")), &meta)?;
                write_train_log(&out.join(format!("{model_id}.log")), &trained.run)?;
                log::info!(
                    "trained model={model_id} epochs={} best_epoch={} best_val_mape={:.4}",
                    trained.run.epochs_run(),
                    trained.run.best_epoch,
                    trained.run.best_val_mape
                );
            }
            log::info!(
                "train label={label} models={} out={}",
                results.len(),
                out.display()
            );
            Ok(())
        }

        Command::Evaluate {
            models,
            series,
            assignment,
            out,
        } => {
            let out = match out {
                Some(p) => p,
                None => workdir_default("evaluate", Some("eval"))?,
            };
            let cells = read_series_auto(&series)?;
            let splits = dataset_splits(&cells)?;
            let (label, mut graphs) = load_models(&models)?;
            let assignment_map = load_assignment(&assignment)?;

            let route: BTreeMap<u32, String> = match &assignment_map {
                Some((map, _)) => cells
                    .keys()
                    .map(|cell| {
                        map.get(cell)
                            .map(|cluster| (*cell, format!("cluster{cluster}")))
                            .ok_or_else(|| {
                                Error::Data(format!("cell {cell} missing from the assignment"))
                            })
                    })
                    .collect::<Result<_>>()?,
                None => cells
                    .keys()
                    .map(|cell| (*cell, "all".to_string()))
                    .collect(),
            };
            let report = evaluate(&mut graphs, &route, &cells, splits.eval, &label)?;

            std::fs::create_dir_all(&out).map_err(Error::io(&out))?;
            write_summary_csv(&out.join(format!("summary_{label}.csv")), &report)?;
            write_cells_csv(&out.join(format!("cells_{label}.csv")), &report)?;
            write_trace_csv(&out.join(format!("traces_{label}.csv")), &report)?;
            log::info!(
                "evaluate label={label} mape_percent={:.4} mae={:.4} n={} out={}",
                report.mape_percent,
                report.mae,
                report.n,
                out.display()
            );
            Ok(())
        }

        Command::Report { work } => {
            let work = match work {
                Some(p) => p,
                None => workdir_default("report", None)?,
            };
            report(&work)
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
        }
    }
    Ok(())
}

fn write_series(
    path: &Path,
    cells: &BTreeMap<u32, cellcast::ingest::HourlyCellSeries>,
) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) == Some("bin") {
        write_series_bin(path, cells)
    } else {
        write_series_csv(path, cells)
    }
}

type AssignmentMap = (BTreeMap<u32, usize>, usize);

fn load_assignment(arg: &str) -> Result<Option<AssignmentMap>> {
    if arg == "none" {
        return Ok(None);
    }
    Ok(Some(read_assignment_csv(Path::new(arg))?))
}

fn variant_label(variant: Variant, clustered: bool) -> String {
    if clustered {
        format!("{variant}-c")
    } else {
        variant.to_string()
    }
}

type LoadedModels = BTreeMap<String, (ModelGraph, NormStats)>;

/// Loads every model in a train output directory, keyed by model id.
fn load_models(dir: &Path) -> Result<(String, LoadedModels)> {
    let mut metas: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("meta"))
        .collect();
    metas.sort();
    if metas.is_empty() {
        return Err(Error::Data(format!(
            "missing inputs: no .meta model files under {}",
            dir.display()
        )));
    }
    let mut label: Option<String> = None;
    let mut models = BTreeMap::new();
    for meta_path in metas {
        let kv = read_kv_file(&meta_path)?;
        let get = |key: &str| -> Result<&String> {
            kv.get(key)
                .ok_or_else(|| Error::Data(format!("{}: missing key {key}", meta_path.display())))
        };
        let spec = ModelSpec::from_kv(&kv)?;
        let model_id = get("model_id")?.clone();
        let this_label = get("label")?.clone();
        match &label {
            None => label = Some(this_label),
            Some(existing) if *existing != this_label => {
                return Err(Error::Data(format!(
                    "{}: mixed labels {existing} and {this_label} in one model directory",
                    dir.display()
                )))
            }
            _ => {}
        }
        let norm = NormStats {
            scope: get("scope")?.clone(),
            mean: get("norm_mean")?
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad norm_mean", meta_path.display())))?,
            std: get("norm_std")?
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad norm_std", meta_path.display())))?,
        };
        let mut graph = spec.build()?;
        graph.load_weights(&meta_path.with_extension("weights"))?;
        models.insert(model_id, (graph, norm));
    }
    Ok((label.expect("at least one meta"), models))
}

/// Merges per-variant evaluation outputs into comparison.csv, traces.csv
/// and heatmap.csv without recomputation.
fn report(work: &Path) -> Result<()> {
    let eval_dir = work.join("eval");
    let mut summaries: Vec<PathBuf> = match std::fs::read_dir(&eval_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("summary_") && n.ends_with(".csv"))
                    .unwrap_or(false)
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    summaries.sort();
    if summaries.is_empty() {
        return Err(Error::Data(format!(
            "missing inputs: no evaluation summaries under {}",
            eval_dir.display()
        )));
    }

    let comparison = work.join("comparison.csv");
    let mut rows = Vec::new();
    for path in &summaries {
        rows.extend(read_summary_csv(path)?);
    }
    rows.sort();
    let mut text = String::from("variant,mape_percent,mape_fraction,mae,n,skipped\n");
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(&comparison, text).map_err(Error::io(&comparison))?;

    // Merge traces over variants, joined on (cell, hour).
    let mut trace_reports = Vec::new();
    for path in &summaries {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let label = name
            .trim_start_matches("summary_")
            .trim_end_matches(".csv")
            .to_string();
        let trace_path = eval_dir.join(format!("traces_{label}.csv"));
        if trace_path.exists() {
            trace_reports.push(read_trace_report(&trace_path, &label)?);
        }
    }
    if !trace_reports.is_empty() {
        let refs: Vec<&EvalReport> = trace_reports.iter().collect();
        export_traces(&work.join("traces.csv"), &refs)?;
    }

    // Heatmap from the ingested series, when present.
    for candidate in ["series.bin", "series.csv"] {
        let series_path = work.join(candidate);
        if series_path.exists() {
            let cells = read_series_auto(&series_path)?;
            export_grid_heatmap(&work.join("heatmap.csv"), &cells)?;
            break;
        }
    }
    log::info!("report comparison={}", comparison.display());
    Ok(())
}

/// Rebuilds a minimal EvalReport (traces only) from a traces CSV.
fn read_trace_report(path: &Path, label: &str) -> Result<EvalReport> {
    use cellcast::eval::{CellEval, TracePoint};
    use std::io::BufRead;

    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    let reader = std::io::BufReader::new(file);
    let mut cells: BTreeMap<u32, CellEval> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if idx == 0 {
            if line.trim() != "cell_id,hour,actual,predicted" {
                return Err(Error::Data(format!(
                    "{}: unexpected header {line:?}",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Parse {
                line: idx + 1,
                msg: "expected cell_id,hour,actual,predicted".into(),
            });
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("malformed number {s:?}"),
            })
        };
        let cell_id: u32 = parts[0].parse().map_err(|_| Error::Parse {
            line: idx + 1,
            msg: format!("malformed cell id {:?}", parts[0]),
        })?;
        let hour: i64 = parts[1].parse().map_err(|_| Error::Parse {
            line: idx + 1,
            msg: format!("malformed hour {:?}", parts[1]),
        })?;
        let point = TracePoint {
            hour,
            actual: parse_f(parts[2])?,
            predicted: parse_f(parts[3])?,
        };
        cells
            .entry(cell_id)
            .or_insert_with(|| CellEval {
                cell_id,
                trace: Vec::new(),
                mape_percent: None,
                mae: 0.0,
                skipped_zero_targets: 0,
            })
            .trace
            .push(point);
    }
    Ok(EvalReport {
        variant: label.to_string(),
        n: 0,
        mape_percent: 0.0,
        mape_fraction: 0.0,
        mae: 0.0,
        skipped_zero_targets: 0,
        cells,
    })
}
