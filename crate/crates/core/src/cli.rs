//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure, 3 strict-mode
//! non-convergence (or a diverged neural solve), 4 I/O failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::config::{load_config, validate_controllability, Backend, FsmConfig, PinnConfig, ScenarioConfig, ValueSolverConfig};
use crate::diagnostics::{
    error_norms, extract_slice, read_field_dump, sha256_hex, write_field_dump, write_run_meta, write_slice_csv,
    write_slice_image, FieldDump, IoError, MetricsRow, MetricsWriter, PhaseDurationsMeta, RunLayout, RunMeta,
    RUN_META_SCHEMA_VERSION,
};
use crate::grid::GridGeometry;
use crate::picard::{run_picard, IterationReport, PicardState, Scenario};
use crate::pinn::PinnError;
use crate::value::SolveStatus;

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  1  usage error
  2  configuration or validation failure
  3  non-convergence with --strict, or a diverged neural solve
  4  I/O failure";

#[derive(Debug, Parser)]
#[command(name = "mfg3d", version, about = "Steady 3D drone-traffic fields under wind and congestion", after_help = EXIT_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a configuration and check the controllability margin.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the coupled solver and write a run directory.
    Run(RunArgs),
    /// Compare one field between two runs on the free cells of the first.
    Compare {
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
        #[arg(long, value_enum)]
        field: CompareField,
    },
    /// Export a 2D slice of a dumped field.
    Slice {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        field: SliceField,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        index: usize,
        /// `last` or an outer-iteration number.
        #[arg(long, default_value = "last")]
        iter: String,
        #[arg(long, value_enum, default_value = "ppm")]
        format: SliceFormat,
        /// Output file; defaults to a name under `<run>/slices/`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured value solver; the other backend runs with its defaults.
    #[arg(long, value_enum)]
    pub backend: Option<Backend>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dump fields every K outer iterations (default: first and last only).
    #[arg(long, value_name = "K")]
    pub dump_every: Option<usize>,
    /// Exit with code 3 if any solver fails to converge.
    #[arg(long)]
    pub strict: bool,
    /// Write 0 for wall_time_s so metrics.csv is byte-reproducible.
    #[arg(long)]
    pub reproducible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompareField {
    Phi,
    Rho,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SliceField {
    Phi,
    Rho,
    U,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SliceFormat {
    Ppm,
    Csv,
}

impl CompareField {
    fn name(self) -> &'static str {
        match self {
            CompareField::Phi => "phi",
            CompareField::Rho => "rho",
        }
    }
}

impl SliceField {
    fn name(self) -> &'static str {
        match self {
            SliceField::Phi => "phi",
            SliceField::Rho => "rho",
            SliceField::U => "u",
        }
    }
}

impl Axis {
    fn index(self) -> usize {
        self as usize
    }

    fn name(self) -> &'static str {
        ["x", "y", "z"][self.index()]
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    NotConverged(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    dispatch_to(argv, &mut stdout.lock())
}

/// [`dispatch`] with command output sent to `out`.
pub fn dispatch_to<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(out, "{}", e.render());
                    return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { 0 };
                }
                _ => 1,
            };
            eprint!("{}", e.render());
            return code;
        }
    };
    match execute(&cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command, out: &mut dyn Write) -> Result<i32, CliError> {
    match cmd {
        Command::Validate { config } => validate_cmd(config, out),
        Command::Run(args) => {
            let summary = run_cmd(args)?;
            writeln!(out, "{}", summary.describe()).map_err(|e| IoError::io(Path::new("<stdout>"), e))?;
            Ok(summary.exit_code(args.strict))
        }
        Command::Compare { run_a, run_b, field } => compare_cmd(run_a, run_b, *field, out),
        Command::Slice { run, field, axis, index, iter, format, output } => {
            let path = slice_cmd(run, *field, *axis, *index, iter, *format, output.as_deref())?;
            writeln!(out, "{}", path.display()).map_err(|e| IoError::io(Path::new("<stdout>"), e))?;
            Ok(0)
        }
    }
}

fn read_text(path: &Path) -> Result<(Vec<u8>, String), CliError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::Validation(format!("{}: not UTF-8 text", path.display())))?;
    Ok((bytes, text))
}

fn load(path: &Path) -> Result<(Vec<u8>, ScenarioConfig), CliError> {
    let (bytes, text) = read_text(path)?;
    let cfg = load_config(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok((bytes, cfg))
}

fn validate_cmd(config: &Path, out: &mut dyn Write) -> Result<i32, CliError> {
    let (_, cfg) = load(config)?;
    let report = validate_controllability(&cfg);
    let io = |e| CliError::Io(IoError::io(Path::new("<stdout>"), e));
    writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("report serializes")).map_err(io)?;
    Scenario::<f64>::from_config(&cfg).map_err(|e| CliError::Validation(e.to_string()))?;
    if report.pass {
        writeln!(out, "ok: controllability margin {}", report.margin).map_err(io)?;
        Ok(0)
    } else {
        Err(CliError::Validation(format!(
            "controllability violated: v_max(rho_max) = {} does not exceed max wind {} + eps_c {} (margin {}) at cell {:?}",
            report.min_v_max, report.max_wind_speed, cfg.eps_c, report.margin, report.worst_cell
        )))
    }
}

/// Applies `--backend` and `--seed` overrides.
pub fn apply_overrides(cfg: &mut ScenarioConfig, backend: Option<Backend>, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    match (backend, &cfg.value_solver) {
        (Some(Backend::Fsm), ValueSolverConfig::Pinn(_)) => cfg.value_solver = ValueSolverConfig::Fsm(FsmConfig::default()),
        (Some(Backend::Pinn), ValueSolverConfig::Fsm(_)) => cfg.value_solver = ValueSolverConfig::Pinn(PinnConfig::default()),
        _ => {}
    }
}

/// What a finished `run` produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out: PathBuf,
    pub outer_iters: usize,
    pub status: SolveStatus,
    pub any_not_converged: bool,
    pub failure: Option<String>,
}

impl RunSummary {
    fn exit_status(&self) -> &'static str {
        match (&self.failure, self.status) {
            (Some(_), _) => "failed",
            (None, SolveStatus::Converged) if !self.any_not_converged => "converged",
            (None, SolveStatus::Converged) => "converged_with_inner_warnings",
            (None, SolveStatus::NotConverged) => "max_outer_reached",
        }
    }

    fn describe(&self) -> String {
        format!("{}: {} after {} outer iterations", self.out.display(), self.exit_status(), self.outer_iters)
    }

    pub fn exit_code(&self, strict: bool) -> i32 {
        if self.failure.is_some() || (strict && self.any_not_converged) {
            3
        } else {
            0
        }
    }
}

fn utc_now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn dump_state(layout: &RunLayout, st: &PicardState<f64>) -> Result<(), IoError> {
    write_field_dump(&st.phi, &layout.field("phi", st.outer_iter))?;
    write_field_dump(&st.rho, &layout.field("rho", st.outer_iter))?;
    write_field_dump(&st.u, &layout.field("u", st.outer_iter))
}

#[derive(Debug, Error)]
enum RunFailure {
    #[error(transparent)]
    Pinn(#[from] PinnError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Full coupled run writing every artifact under `args.out`.
pub fn run_cmd(args: &RunArgs) -> Result<RunSummary, CliError> {
    let started_utc = utc_now();
    let clock = Instant::now();
    let (bytes, mut cfg) = load(&args.config)?;
    apply_overrides(&mut cfg, args.backend, args.seed);
    cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    let report = validate_controllability(&cfg);
    if !report.pass {
        return Err(CliError::Validation(format!("controllability violated (margin {})", report.margin)));
    }
    if args.dump_every == Some(0) {
        return Err(CliError::Usage("--dump-every must be at least 1".into()));
    }
    let scenario = Scenario::<f64>::from_config(&cfg).map_err(|e| CliError::Validation(e.to_string()))?;

    let layout = RunLayout::new(&args.out);
    let mut io_s = 0.0;
    let t_io = Instant::now();
    for dir in [layout.root.clone(), layout.fields_dir(), layout.slices_dir()] {
        fs::create_dir_all(&dir).map_err(|e| IoError::io(&dir, e))?;
    }
    let ext = args.config.extension().and_then(|e| e.to_str()).unwrap_or("yaml");
    let snapshot = layout.config_snapshot(ext);
    fs::write(&snapshot, &bytes).map_err(|e| IoError::io(&snapshot, e))?;
    let mut metrics = MetricsWriter::create(&layout.metrics())?;
    io_s += t_io.elapsed().as_secs_f64();

    let mut value_s = 0.0;
    let mut transport_s = 0.0;
    let mut last_dumped = 0;
    let mut last_state: Option<PicardState<f64>> = None;
    let result = run_picard::<f64, RunFailure>(&scenario, |rep: &IterationReport<f64>, st| {
        value_s += rep.timing.value_s;
        transport_s += rep.timing.transport_s;
        let t = Instant::now();
        let wall = if args.reproducible { 0.0 } else { clock.elapsed().as_secs_f64() };
        metrics.append(&MetricsRow::from_report(rep, wall))?;
        let due = match args.dump_every {
            Some(k) => st.outer_iter % k == 0 || st.outer_iter == 1,
            None => st.outer_iter == 1,
        };
        if due {
            dump_state(&layout, st)?;
            last_dumped = st.outer_iter;
        }
        last_state = Some(st.clone());
        io_s += t.elapsed().as_secs_f64();
        Ok(())
    });

    let t = Instant::now();
    let summary = match result {
        Ok(outcome) => {
            let st = &outcome.state;
            if last_dumped != st.outer_iter {
                dump_state(&layout, st)?;
            }
            write_default_slices(&layout, st)?;
            RunSummary {
                out: layout.root.clone(),
                outer_iters: st.outer_iter,
                status: outcome.status,
                any_not_converged: outcome.any_not_converged(),
                failure: None,
            }
        }
        Err(RunFailure::Io(e)) => return Err(e.into()),
        Err(RunFailure::Pinn(e)) => RunSummary {
            out: layout.root.clone(),
            outer_iters: last_state.as_ref().map(|s| s.outer_iter).unwrap_or(0),
            status: SolveStatus::NotConverged,
            any_not_converged: true,
            failure: Some(e.to_string()),
        },
    };
    io_s += t.elapsed().as_secs_f64();

    let meta = RunMeta {
        schema_version: RUN_META_SCHEMA_VERSION,
        config_sha256: sha256_hex(&bytes),
        seed: cfg.seed,
        backend: cfg.value_solver.backend().as_str().to_string(),
        grid_shape: cfg.grid.shape,
        started_utc,
        finished_utc: utc_now(),
        phase_durations_s: PhaseDurationsMeta { value: value_s, transport: transport_s, io: io_s },
        outer_iters: summary.outer_iters,
        exit_status: summary.exit_status().to_string(),
    };
    write_run_meta(&layout.run_meta(), &meta)?;
    if let Some(f) = &summary.failure {
        return Err(CliError::NotConverged(format!("run failed: {f}")));
    }
    Ok(summary)
}

/// Mid-height z slices of the final value and density fields.
fn write_default_slices(layout: &RunLayout, st: &PicardState<f64>) -> Result<(), IoError> {
    let k = st.phi.shape[2] / 2;
    for (name, field) in [("phi", &st.phi), ("rho", &st.rho)] {
        let slice = extract_slice(field.shape, field.kind, &field.values, 2, k).expect("mid index in range");
        write_slice_image(&slice, &layout.slices_dir().join(format!("{name}_{:04}_z{k}.ppm", st.outer_iter)))?;
    }
    Ok(())
}

fn resolve_iter(layout: &RunLayout, field: &str, iter: &str) -> Result<usize, CliError> {
    let available = layout.dumped_iterations(field)?;
    if iter == "last" {
        return available.last().copied().ok_or_else(|| CliError::Validation(format!("no {field} dumps in {}", layout.root.display())));
    }
    let k: usize = iter.parse().map_err(|_| CliError::Usage(format!("--iter must be `last` or a number, got `{iter}`")))?;
    if available.contains(&k) {
        Ok(k)
    } else {
        Err(CliError::Validation(format!("no {field} dump for iteration {k}; available: {available:?}")))
    }
}

fn load_dump(layout: &RunLayout, field: &str, iter: &str) -> Result<(usize, FieldDump), CliError> {
    let k = resolve_iter(layout, field, iter)?;
    Ok((k, read_field_dump(&layout.field(field, k))?))
}

fn compare_cmd(run_a: &Path, run_b: &Path, field: CompareField, out: &mut dyn Write) -> Result<i32, CliError> {
    let (la, lb) = (RunLayout::new(run_a), RunLayout::new(run_b));
    let (_, a) = load_dump(&la, field.name(), "last")?;
    let (_, b) = load_dump(&lb, field.name(), "last")?;
    if a.shape != b.shape || a.kind != b.kind {
        return Err(CliError::Validation(format!("field shapes differ: {:?} vs {:?}", a.shape, b.shape)));
    }
    let snapshot = la.find_config_snapshot()?;
    let (_, text) = read_text(&snapshot)?;
    let cfg = crate::config::parse_config(&text).map_err(|e| CliError::Validation(format!("{}: {e}", snapshot.display())))?;
    let geom = GridGeometry::<f64>::from_config(&cfg).map_err(|e| CliError::Validation(e.to_string()))?;
    if geom.shape != a.shape {
        return Err(CliError::Validation("config snapshot does not match the dumped grid".into()));
    }
    let report = error_norms(&b.values, &a.values, &geom.free_mask()).map_err(|e| CliError::Validation(e.to_string()))?;
    writeln!(out, "{}", serde_json::to_string(&report).expect("report serializes")).map_err(|e| IoError::io(Path::new("<stdout>"), e))?;
    Ok(0)
}

fn slice_cmd(
    run: &Path,
    field: SliceField,
    axis: Axis,
    index: usize,
    iter: &str,
    format: SliceFormat,
    output: Option<&Path>,
) -> Result<PathBuf, CliError> {
    let layout = RunLayout::new(run);
    let (k, dump) = load_dump(&layout, field.name(), iter)?;
    let slice = extract_slice(dump.shape, dump.kind, &dump.values, axis.index(), index).ok_or_else(|| {
        CliError::Usage(format!("--index {index} out of range for axis {} of extent {}", axis.name(), dump.shape[axis.index()]))
    })?;
    let ext = match format {
        SliceFormat::Ppm => "ppm",
        SliceFormat::Csv => "csv",
    };
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = layout.slices_dir();
            fs::create_dir_all(&dir).map_err(|e| IoError::io(&dir, e))?;
            dir.join(format!("{}_{k:04}_{}{index}.{ext}", field.name(), axis.name()))
        }
    };
    match format {
        SliceFormat::Ppm => write_slice_image(&slice, &path)?,
        SliceFormat::Csv => write_slice_csv(&slice, &path)?,
    }
    Ok(path)
}

/// Sizes the global worker pool from `MFG_THREADS` (default 1).
pub fn configure_threads() {
    let n = std::env::var("MFG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0).unwrap_or(1);
    // a pool that already exists keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}
