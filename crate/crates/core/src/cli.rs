//! Command-line front end: `run`, `ablate`, `sweep-memory`, `sweep-expansion`
//! and `report`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{ExpansionVariant, RunConfig, SelectorKind, SimilarityKind};
use crate::error::{Error, Result};
use crate::metrics::{self, published, SessionReport, TableRow};
use crate::plot;
use crate::sessions::{self, Experiment};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Input(_) | Error::Config(_) => EXIT_USAGE,
        Error::Data(_) | Error::Format { .. } | Error::Io { .. } => EXIT_DATA,
        Error::Training(_) | Error::State(_) | Error::Internal(_) => EXIT_TRAINING,
    }
}

#[derive(Debug, Parser)]
#[command(name = "essential", version, about = "Class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Config file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory (default `runs/<dataset>-<hash>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment.
    Run(RunArgs),
    /// Run a grid over selector, similarity and/or expansion_variant.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        axes: Vec<String>,
    },
    /// Run once per memory size.
    SweepMemory {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        sizes: Vec<i64>,
    },
    /// Run once per expansion variant (all by default).
    SweepExpansion {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Summarise finished runs, or print the published reference tables.
    Report {
        /// Run or grid directory.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Print published reference tables with recomputed deltas.
        #[arg(long)]
        published: bool,
    },
}

/// Completion state of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SessionStatus {
    Pending,
    Done { accuracy: f64 },
    Failed { message: String },
}

/// Bookkeeping written to `manifest.json` before training starts and
/// rewritten after every session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config: String,
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub sessions: Vec<SessionStatus>,
}

/// SHA-256 hex digest of the canonical config text.
pub fn config_hash(config: &RunConfig) -> String {
    Sha256::digest(config.to_text().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl ExperimentManifest {
    pub fn new(config: &RunConfig, run_dir: &Path) -> Self {
        Self {
            config: config.to_text(),
            config_hash: config_hash(config),
            run_dir: run_dir.to_path_buf(),
            sessions: vec![SessionStatus::Pending; config.schedule.num_sessions],
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("manifest.json")
    }

    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        let path = Self::path(&self.run_dir);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::internal(format!("manifest serialisation failed: {e}")))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn complete(&self) -> bool {
        self.sessions
            .iter()
            .all(|s| matches!(s, SessionStatus::Done { .. }))
    }
}

/// Parses `args` (program name first) and runs the command, writing tables to `out`.
pub fn execute<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    execute(std::env::args_os(), &mut lock)
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Run(args) => cmd_run(&args, out),
        Command::Ablate { run, axes } => cmd_ablate(&run, &axes, out),
        Command::SweepMemory { run, sizes } => cmd_sweep_memory(&run, &sizes, out),
        Command::SweepExpansion { run, variants } => cmd_sweep_expansion(&run, &variants, out),
        Command::Report { run, published } => cmd_report(run.as_deref(), published, out),
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    if !args.config.is_file() {
        return Err(Error::input(format!(
            "config file {} does not exist",
            args.config.display()
        )));
    }
    RunConfig::load(&args.config, &args.set)
}

fn default_dir(config: &RunConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-{}", config.dataset, &config_hash(config)[..12]))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs one configured experiment under `dir`, keeping the manifest current.
/// Returns the reports, or the error after marking the manifest.
pub fn run_in_dir(config: RunConfig, dir: &Path) -> Result<Vec<SessionReport>> {
    let mut manifest = ExperimentManifest::new(&config, dir);
    manifest.write()?;
    let result = Experiment::new(config).and_then(|exp| {
        sessions::run_prepared(&exp, Some(dir), |r| {
            manifest.sessions[r.session] = SessionStatus::Done {
                accuracy: r.accuracy(),
            };
            if let Err(e) = manifest.write() {
                log::warn!("manifest update failed: {e}");
            }
        })
    });
    if let Err(e) = &result {
        if let Some(slot) = manifest
            .sessions
            .iter_mut()
            .find(|s| matches!(s, SessionStatus::Pending))
        {
            *slot = SessionStatus::Failed {
                message: e.to_string(),
            };
        }
        manifest.write()?;
    }
    result
}

fn run_figures(dir: &Path, label: &str, reports: &[SessionReport]) -> Result<()> {
    let Some(last) = reports.last() else {
        return Ok(());
    };
    let row = TableRow {
        label: label.to_string(),
        accuracies: last.accuracies.clone(),
    };
    plot::accuracy_per_session(&dir.join("accuracy.svg"), &[row])?;
    let u: Vec<Vec<f64>> = reports.iter().map(|r| r.uncertainty_per_epoch.clone()).collect();
    plot::uncertainty_per_epoch(&dir.join("uncertainty.svg"), &u)?;
    plot::confusion_heatmap(
        &dir.join("confusion_final.svg"),
        &format!("Confusion after session {}", last.session),
        &last.confusion,
    )?;
    let bias: Vec<plot::Series> = reports
        .iter()
        .filter(|r| !r.misclassified_as_base.is_empty())
        .map(|r| plot::Series::indexed(format!("session {}", r.session), &r.misclassified_as_base, 1.0))
        .collect();
    plot::bias_per_epoch(&dir.join("bias.svg"), &bias)
}

fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<i32> {
    let config = load_config(args)?;
    let dir = args.out.clone().unwrap_or_else(|| default_dir(&config));
    let label = config.selector.to_string();
    let reports = run_in_dir(config, &dir)?;
    run_figures(&dir, &label, &reports)?;
    let summary = fs::read_to_string(dir.join("summary.txt")).map_err(|e| Error::io(&dir, e))?;
    emit(out, &summary)?;
    emit(out, &format!("run directory: {}\n", dir.display()))?;
    Ok(EXIT_OK)
}

/// One grid cell: its label and the overrides that define it.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub overrides: Vec<String>,
}

/// Values of one ablation axis.
pub fn axis_values(axis: &str) -> Result<(&'static str, Vec<String>)> {
    match axis.trim() {
        "selector" => Ok(("selector", SelectorKind::ALL.iter().map(|v| v.to_string()).collect())),
        "similarity" => Ok(("similarity", SimilarityKind::ALL.iter().map(|v| v.to_string()).collect())),
        "expansion_variant" | "expansion" => Ok((
            "expansion_variant",
            ExpansionVariant::ALL.iter().map(|v| v.to_string()).collect(),
        )),
        other => Err(Error::input(format!(
            "unknown ablation axis `{other}` (expected selector, similarity, expansion_variant)"
        ))),
    }
}

/// Cartesian product of the axes' values.
pub fn grid(axes: &[String]) -> Result<Vec<Cell>> {
    let mut seen = BTreeSet::new();
    let mut cells = vec![Cell {
        label: String::new(),
        overrides: Vec::new(),
    }];
    for axis in axes {
        let (key, values) = axis_values(axis)?;
        if !seen.insert(key) {
            return Err(Error::input(format!("axis `{key}` given twice")));
        }
        cells = cells
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| Cell {
                    label: if c.label.is_empty() {
                        v.clone()
                    } else {
                        format!("{}+{v}", c.label)
                    },
                    overrides: c.overrides.iter().cloned().chain([format!("{key}={v}")]).collect(),
                })
            })
            .collect();
    }
    Ok(cells)
}

fn cell_matches(config: &RunConfig, cell: &Cell) -> bool {
    cell.overrides.iter().all(|o| match o.split_once('=') {
        Some(("selector", v)) => config.selector.to_string() == v,
        Some(("similarity", v)) => config.similarity.to_string() == v,
        Some(("expansion_variant", v)) => config.expansion_variant.to_string() == v,
        Some(("schedule.memory_size", v)) => config.schedule.memory_size.to_string() == v,
        _ => false,
    })
}

/// Runs every cell under `root/<label>`; failed cells keep their manifest and
/// are reported, the rest still run. Returns rows of finished cells and the
/// first failure's exit code.
fn run_grid(
    args: &RunArgs,
    base: &RunConfig,
    cells: &[Cell],
    root: &Path,
    out: &mut dyn Write,
) -> Result<(Vec<TableRow>, usize, i32)> {
    let mut rows = Vec::new();
    let mut code = EXIT_OK;
    let mut reference = 0;
    for cell in cells {
        let mut overrides = args.set.clone();
        overrides.extend(cell.overrides.iter().cloned());
        let config = RunConfig::load(&args.config, &overrides)?;
        let dir = root.join(cell.label.replace('/', "_"));
        emit(out, &format!("== {} ==\n", cell.label))?;
        match run_in_dir(config, &dir) {
            Ok(reports) => {
                if cell_matches(base, cell) {
                    reference = rows.len();
                }
                rows.push(TableRow {
                    label: cell.label.clone(),
                    accuracies: reports.last().map(|r| r.accuracies.clone()).unwrap_or_default(),
                });
            }
            Err(e) => {
                eprintln!("error: cell {}: {e}", cell.label);
                if code == EXIT_OK {
                    code = exit_code(&e);
                }
            }
        }
    }
    Ok((rows, reference, code))
}

fn finish_table(root: &Path, name: &str, rows: &[TableRow], reference: usize, out: &mut dyn Write) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let (human, tsv) = metrics::render_table(rows, reference)?;
    write_file(&root.join(format!("{name}.txt")), &human)?;
    write_file(&root.join(format!("{name}.tsv")), &tsv)?;
    plot::accuracy_per_session(&root.join(format!("{name}.svg")), rows)?;
    emit(out, &human)
}

fn cmd_ablate(args: &RunArgs, axes: &[String], out: &mut dyn Write) -> Result<i32> {
    let base = load_config(args)?;
    let cells = grid(axes)?;
    let root = args
        .out
        .clone()
        .unwrap_or_else(|| default_dir(&base).with_extension("ablate"));
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let (rows, reference, code) = run_grid(args, &base, &cells, &root, out)?;
    finish_table(&root, "ablation", &rows, reference, out)?;
    Ok(code)
}

/// Positive sizes, sorted and deduplicated.
pub fn memory_sizes(sizes: &[i64]) -> Result<Vec<usize>> {
    if sizes.is_empty() {
        return Err(Error::input("at least one memory size is required"));
    }
    if let Some(s) = sizes.iter().find(|&&s| s <= 0) {
        return Err(Error::input(format!("memory size must be positive, got {s}")));
    }
    let set: BTreeSet<usize> = sizes.iter().map(|&s| s as usize).collect();
    Ok(set.into_iter().collect())
}

fn cmd_sweep_memory(args: &RunArgs, sizes: &[i64], out: &mut dyn Write) -> Result<i32> {
    let sizes = memory_sizes(sizes)?;
    let base = load_config(args)?;
    let cells: Vec<Cell> = sizes
        .iter()
        .map(|m| Cell {
            label: format!("m{m}"),
            overrides: vec![format!("schedule.memory_size={m}")],
        })
        .collect();
    let root = args
        .out
        .clone()
        .unwrap_or_else(|| default_dir(&base).with_extension("memory"));
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let (rows, _, code) = run_grid(args, &base, &cells, &root, out)?;
    let mut tsv = String::from("memory_size\tfinal\taverage\n");
    let mut human = format!("{:>11} {:>8} {:>8}\n", "memory_size", "final", "average");
    let mut points = Vec::new();
    for row in &rows {
        let m: usize = row.label[1..].parse().map_err(|_| Error::internal("bad sweep label"))?;
        let last = *row.accuracies.last().unwrap_or(&f64::NAN);
        let avg = metrics::mean(&row.accuracies);
        tsv.push_str(&format!("{m}\t{last:.4}\t{avg:.4}\n"));
        human.push_str(&format!("{m:>11} {last:>8.2} {avg:>8.2}\n"));
        points.push((m, last, avg));
    }
    write_file(&root.join("memory_sweep.tsv"), &tsv)?;
    write_file(&root.join("memory_sweep.txt"), &human)?;
    if !points.is_empty() {
        plot::memory_sweep(&root.join("memory_sweep.svg"), &points)?;
    }
    emit(out, &human)?;
    Ok(code)
}

fn cmd_sweep_expansion(args: &RunArgs, variants: &[String], out: &mut dyn Write) -> Result<i32> {
    let base = load_config(args)?;
    let chosen: Vec<ExpansionVariant> = if variants.is_empty() {
        ExpansionVariant::ALL.to_vec()
    } else {
        variants
            .iter()
            .map(|v| v.parse::<ExpansionVariant>().map_err(|e| Error::input(e.to_string())))
            .collect::<Result<_>>()?
    };
    let usable: Vec<ExpansionVariant> = chosen
        .into_iter()
        .filter(|v| {
            let ok = crate::expansion::TransformationBank::new(*v)
                .check_channels(base.schedule.channels)
                .is_ok();
            if !ok {
                eprintln!("skipping {v}: needs colour images");
            }
            ok
        })
        .collect();
    let cells: Vec<Cell> = usable
        .iter()
        .map(|v| Cell {
            label: v.to_string(),
            overrides: vec![format!("expansion_variant={v}")],
        })
        .collect();
    let root = args
        .out
        .clone()
        .unwrap_or_else(|| default_dir(&base).with_extension("expansion"));
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let (rows, reference, code) = run_grid(args, &base, &cells, &root, out)?;
    finish_table(&root, "expansion_sweep", &rows, reference, out)?;
    Ok(code)
}

/// Reports of a run directory, in session order.
pub fn load_reports(dir: &Path) -> Result<Vec<SessionReport>> {
    let mut reports = Vec::new();
    for t in 0.. {
        let path = dir.join(format!("session_{t}")).join("report.json");
        if !path.exists() {
            break;
        }
        reports.push(sessions::read_report(&path)?);
    }
    if reports.is_empty() {
        return Err(Error::data(format!("no session reports under {}", dir.display())));
    }
    Ok(reports)
}

fn published_tables() -> Result<String> {
    let mut text = String::from("Imbalanced BloodMNIST (published; deltas recomputed)\n");
    let ours = published::SOTA_BLOOD_IMBALANCED
        .iter()
        .find(|r| r.2.is_none())
        .map(|r| r.1)
        .ok_or_else(|| Error::internal("missing reference row"))?;
    for (name, acc, printed) in published::SOTA_BLOOD_IMBALANCED {
        let (df, da) = metrics::deltas_reported(&ours, acc)?;
        let accs: Vec<String> = acc.iter().map(|a| format!("{a:6.2}")).collect();
        match printed {
            Some((pf, pa)) => text.push_str(&format!(
                "{name:<12} {}  d_final {df:7.2} (printed {pf:7.2})  d_avg {da:7.2} (printed {pa:7.2})\n",
                accs.join(" ")
            )),
            None => text.push_str(&format!(
                "{name:<12} {}  average {:.2}\n",
                accs.join(" "),
                metrics::mean(acc)
            )),
        }
    }
    text.push_str("\nLong-tailed BloodMNIST ablation (published)\n");
    let rows: Vec<TableRow> = published::ABLATION_BLOOD_LONG_TAILED
        .iter()
        .map(|(l, a, _)| TableRow {
            label: l.to_string(),
            accuracies: a.to_vec(),
        })
        .collect();
    text.push_str(&metrics::render_table(&rows, 0)?.0);
    Ok(text)
}

fn cmd_report(run: Option<&Path>, show_published: bool, out: &mut dyn Write) -> Result<i32> {
    if run.is_none() && !show_published {
        return Err(Error::input("report needs --run DIR and/or --published"));
    }
    if show_published {
        emit(out, &published_tables()?)?;
    }
    let Some(dir) = run else {
        return Ok(EXIT_OK);
    };
    if dir.join("manifest.json").exists() {
        let manifest = ExperimentManifest::read(dir)?;
        let reports = load_reports(dir)?;
        let label = manifest
            .config
            .lines()
            .find_map(|l| l.strip_prefix("selector = "))
            .unwrap_or("run")
            .to_string();
        run_figures(dir, &label, &reports)?;
        let row = TableRow {
            label,
            accuracies: reports.last().map(|r| r.accuracies.clone()).unwrap_or_default(),
        };
        let (human, tsv) = metrics::render_table(&[row], 0)?;
        write_file(&dir.join("summary.txt"), &human)?;
        write_file(&dir.join("summary.tsv"), &tsv)?;
        emit(out, &human)?;
        if !manifest.complete() {
            emit(out, "run is incomplete\n")?;
        }
        return Ok(EXIT_OK);
    }
    // a grid: one row per complete child run
    let mut children: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").exists())
        .collect();
    children.sort();
    let mut rows = Vec::new();
    for child in &children {
        if !ExperimentManifest::read(child)?.complete() {
            continue;
        }
        let reports = load_reports(child)?;
        rows.push(TableRow {
            label: child.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            accuracies: reports.last().map(|r| r.accuracies.clone()).unwrap_or_default(),
        });
    }
    if rows.is_empty() {
        return Err(Error::data(format!("no complete runs under {}", dir.display())));
    }
    finish_table(dir, "report", &rows, 0, out)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        assert_eq!(grid(&["selector".into()]).unwrap().len(), 5);
        assert_eq!(grid(&["similarity".into()]).unwrap().len(), 4);
        let g = grid(&["selector".into(), "similarity".into()]).unwrap();
        assert_eq!(g.len(), 20);
        assert_eq!(g[1].overrides, vec!["selector=uta", "similarity=dot"]);
        assert!(grid(&["lr".into()]).is_err());
        assert!(grid(&["selector".into(), "selector".into()]).is_err());
    }

    #[test]
    fn memory_size_parsing() {
        assert_eq!(memory_sizes(&[90, 30, 60, 30]).unwrap(), vec![30, 60, 90]);
        assert!(memory_sizes(&[30, 0]).is_err());
        assert!(memory_sizes(&[-5]).is_err());
        assert!(memory_sizes(&[]).is_err());
    }

    #[test]
    fn hash_tracks_config() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.seed = 1;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Data("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Training("x".into())), EXIT_TRAINING);
    }

    #[test]
    fn published_report_recomputes_deltas() {
        let text = published_tables().unwrap();
        assert!(text.contains("d_final  -37.67 (printed  -37.67)"));
        assert!(text.contains("ESSENTIAL"));
    }
}
