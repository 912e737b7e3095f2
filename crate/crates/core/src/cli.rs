//! Command-line front end.
//!
//! Every run writes into `<out>/<command>-<hash>/`, where the hash covers the
//! resolved configuration (spectrum values included, output location and
//! thread count excluded). Directories are never modified once written: a
//! repeated run recomputes its artifacts and compares them byte for byte
//! with what is already on disk.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjacency::{
    basin_crosscheck, build_graph, verify_adjacency_capped, AdjacencyReport, BasinReport,
    TraceConfig,
};
use crate::critical::enumerate_catalog;
use crate::empath::{
    compare, infinite_horizon_energy, predicted_transitions, scalar_emp, ComparisonReport, EdgeEmp,
    EmpConfig, PredictedTransitions,
};
use crate::error::IsoflowError;
use crate::flow::{integrate, FlowConfig, TerminalLabel};
use crate::manifold::{random_state, StateFile, SymState};
use crate::perm::Permutation;
use crate::spectra::{
    check_strongly_disjoint, enumerate_partitions, Spectrum, SpectrumFile, DEFAULT_CAP,
};
use crate::stochastic::{
    chi_square_chart, default_state_radius, estimate_markov, random_starts, simulate_paths,
    stationary_check, theta_chart, ChiSquareReport, MarkovEstimate, PathRecord, SdeConfig,
    SelfConsistency,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_MISMATCH: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Overrides the enumeration cap when `--cap` is not given.
pub const CAP_ENV: &str = "ISOFLOW_CAP_N";

#[derive(Debug, Parser)]
#[command(
    name = "isoflow",
    version,
    about = "Isospectral double-bracket flows and their noisy dynamics"
)]
struct Cli {
    /// Worker threads for ensemble work (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check strong disjointness; prints a witness pair when it fails.
    SpectrumCheck(SpectrumArg),
    /// Enumerate and classify every critical manifold.
    Catalog(CatalogArgs),
    /// Integrate the deterministic flow from a random or given start.
    Flow(FlowArgs),
    /// Build the adjacency graph; optionally verify it by tracing saddles.
    Adjacency(AdjacencyArgs),
    /// Simulate the noisy flow and record the chain of visited states.
    Sde(SdeArgs),
    /// Estimate the empirical chain and rank it against control weights.
    Markov(MarkovArgs),
    /// Solve the minimum-energy control problem for every edge.
    Emp(EmpArgs),
    /// Summarize and check the run directories under `--out`.
    Report(ReportArgs),
}

#[derive(Debug, Args, Clone)]
struct SpectrumArg {
    /// JSON file of the form {"values": [...]}.
    #[arg(long, required_unless_present = "values", conflicts_with = "values")]
    spectrum: Option<PathBuf>,
    /// Inline eigenvalues, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    values: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct CatalogArgs {
    #[command(flatten)]
    spectrum: SpectrumArg,
    #[arg(long)]
    cap: Option<usize>,
}

#[derive(Debug, Args)]
struct FlowArgs {
    #[command(flatten)]
    spectrum: SpectrumArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Step size (default scales with the spread of the spectrum).
    #[arg(long)]
    h: Option<f64>,
    /// Time horizon (default scales with the smallest gap).
    #[arg(long = "T")]
    horizon: Option<f64>,
    /// Keep every k-th step in the trajectory CSV.
    #[arg(long, default_value_t = 10)]
    stride: usize,
    /// Start from this state file instead of a random state.
    #[arg(long)]
    start: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AdjacencyArgs {
    #[command(flatten)]
    spectrum: SpectrumArg,
    /// Trace every co-index-1 saddle and check its endpoints.
    #[arg(long)]
    verify: bool,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long)]
    cap: Option<usize>,
    /// Random samples for the basin-boundary cross-check (0 skips it).
    #[arg(long, default_value_t = 0)]
    basin_samples: usize,
    #[arg(long, default_value_t = 200)]
    basin_segments: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Clone)]
struct EnsembleArgs {
    #[command(flatten)]
    spectrum: SpectrumArg,
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    h: f64,
    #[arg(long = "T")]
    horizon: f64,
    #[arg(long, default_value_t = 100)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Visit radius around each diagonal state (default 0.2 × separation).
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    burn_in: f64,
}

#[derive(Debug, Args)]
struct SdeArgs {
    #[command(flatten)]
    ensemble: EnsembleArgs,
    /// Keep Ψ every k steps after burn-in for the stationarity report.
    #[arg(long, default_value_t = 100)]
    stride: usize,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Debug, Args)]
struct MarkovArgs {
    #[command(flatten)]
    ensemble: EnsembleArgs,
    /// Horizon of the control problems behind the predicted weights.
    #[arg(long, default_value_t = 20.0)]
    emp_horizon: f64,
    #[arg(long, default_value_t = 400)]
    intervals: usize,
}

#[derive(Debug, Args)]
struct EmpArgs {
    #[command(flatten)]
    spectrum: SpectrumArg,
    #[arg(long)]
    eps: f64,
    #[arg(long = "T")]
    horizon: f64,
    #[arg(long, default_value_t = 400)]
    intervals: usize,
    /// Also write the optimal θ(t) and control per gap.
    #[arg(long)]
    trajectory: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Print the summary as JSON.
    #[arg(long)]
    json: bool,
}

/// The hashed description of a run: everything that determines its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: String,
    pub spectrum: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub params: serde_json::Value,
}

impl ExperimentConfig {
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Stamp embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub version: String,
    pub config_hash: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub config: ExperimentConfig,
    pub spectrum_source: Option<String>,
    pub created_unix: u64,
    pub artifacts: Vec<String>,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    manifest: &'a Stamp,
    #[serde(flatten)]
    body: &'a T,
}

enum Failure {
    Invalid(String),
    Mismatch(String),
}

impl From<IsoflowError> for Failure {
    fn from(e: IsoflowError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

type Outcome = std::result::Result<i32, Failure>;

/// Formats a float with 17 significant digits.
pub fn f17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let outcome = match cli.threads {
        Some(0) => Err(Failure::Invalid("--threads must be at least 1".into())),
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Failure::Invalid(e.to_string())),
        },
        None => dispatch(&cli),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            EXIT_INVALID
        }
        Err(Failure::Mismatch(msg)) => {
            eprintln!("mismatch: {msg}");
            EXIT_MISMATCH
        }
    }
}

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::SpectrumCheck(a) => spectrum_check(&cli.out, a),
        Command::Catalog(a) => catalog(&cli.out, a),
        Command::Flow(a) => flow(&cli.out, a),
        Command::Adjacency(a) => adjacency(&cli.out, a),
        Command::Sde(a) => sde(&cli.out, a),
        Command::Markov(a) => markov(&cli.out, a),
        Command::Emp(a) => emp(&cli.out, a),
        Command::Report(a) => report(&cli.out, a),
    }
}

fn load_spectrum(arg: &SpectrumArg) -> std::result::Result<(Spectrum, Option<String>), Failure> {
    if let Some(values) = &arg.values {
        return Ok((Spectrum::new(values.clone())?, None));
    }
    let path = arg.spectrum.as_ref().expect("clap requires one source");
    let text = fs::read_to_string(path).map_err(|e| {
        Failure::Invalid(format!("cannot read spectrum file {}: {e}", path.display()))
    })?;
    let file: SpectrumFile = serde_json::from_str(&text).map_err(|e| {
        Failure::Invalid(format!("malformed spectrum file {}: {e}", path.display()))
    })?;
    Ok((
        Spectrum::new(file.values)?,
        Some(path.display().to_string()),
    ))
}

fn resolve_cap(flag: Option<usize>) -> std::result::Result<usize, Failure> {
    if let Some(cap) = flag {
        return Ok(cap);
    }
    match std::env::var(CAP_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| {
            Failure::Invalid(format!(
                "{CAP_ENV} must be a non-negative integer, got {v:?}"
            ))
        }),
        Err(_) => Ok(DEFAULT_CAP),
    }
}

/// Artifacts of one run, assembled in memory before anything touches disk.
struct Run {
    config: ExperimentConfig,
    stamp: Stamp,
    source: Option<String>,
    files: Vec<(String, Vec<u8>)>,
}

impl Run {
    fn new(
        command: &str,
        spectrum: Option<&Spectrum>,
        seed: Option<u64>,
        params: serde_json::Value,
    ) -> Self {
        let config = ExperimentConfig {
            command: command.to_string(),
            spectrum: spectrum.map(|s| s.values().to_vec()),
            seed,
            params,
        };
        let stamp = Stamp {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            seed,
        };
        Self {
            config,
            stamp,
            source: None,
            files: Vec::new(),
        }
    }

    fn json<T: Serialize>(&mut self, name: &str, body: &T) -> std::result::Result<(), Failure> {
        let env = Envelope {
            manifest: &self.stamp,
            body,
        };
        let mut bytes = serde_json::to_vec_pretty(&env).map_err(IsoflowError::from)?;
        bytes.push(b'\n');
        self.files.push((name.to_string(), bytes));
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &str, rows: String) {
        let mut text = format!(
            "# isoflow {} config {} seed {}\n{header}\n",
            self.stamp.version,
            self.stamp.config_hash,
            self.stamp
                .seed
                .map_or("none".to_string(), |s| s.to_string())
        );
        text.push_str(&rows);
        self.files.push((name.to_string(), text.into_bytes()));
    }

    fn text(&mut self, name: &str, body: String) {
        self.files.push((name.to_string(), body.into_bytes()));
    }

    fn dir_name(&self) -> String {
        format!("{}-{}", self.config.command, &self.stamp.config_hash[..16])
    }

    /// Writes a fresh run directory, or checks an existing one.
    fn commit(self, root: &Path) -> std::result::Result<PathBuf, Failure> {
        let dir = root.join(self.dir_name());
        if dir.exists() {
            let mut differing = Vec::new();
            for (name, bytes) in &self.files {
                match fs::read(dir.join(name)) {
                    Ok(existing) if existing == *bytes => {}
                    _ => differing.push(name.clone()),
                }
            }
            if !differing.is_empty() {
                return Err(Failure::Mismatch(format!(
                    "{} already holds different results for this configuration: {}",
                    dir.display(),
                    differing.join(", ")
                )));
            }
            println!("reproduced {}", dir.display());
            return Ok(dir);
        }
        fs::create_dir_all(root).map_err(IsoflowError::from)?;
        let staging = root.join(format!(".{}.{}", self.dir_name(), std::process::id()));
        fs::create_dir_all(&staging).map_err(IsoflowError::from)?;
        for (name, bytes) in &self.files {
            fs::write(staging.join(name), bytes).map_err(IsoflowError::from)?;
        }
        let manifest = Manifest {
            version: self.stamp.version.clone(),
            command: self.config.command.clone(),
            config_hash: self.stamp.config_hash.clone(),
            seed: self.stamp.seed,
            config: self.config.clone(),
            spectrum_source: self.source.clone(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            artifacts: self.files.iter().map(|(n, _)| n.clone()).collect(),
        };
        let bytes = serde_json::to_vec_pretty(&manifest).map_err(IsoflowError::from)?;
        fs::write(staging.join("manifest.json"), bytes).map_err(IsoflowError::from)?;
        if let Err(e) = fs::rename(&staging, &dir) {
            let _ = fs::remove_dir_all(&staging);
            if dir.exists() {
                // Another process finished the same configuration first.
                return Ok(dir);
            }
            return Err(IsoflowError::from(e).into());
        }
        println!("wrote {}", dir.display());
        Ok(dir)
    }
}

#[derive(Serialize)]
struct CheckOut {
    values: Vec<f64>,
    strongly_disjoint: bool,
    witness: Option<Witness>,
}

#[derive(Serialize)]
struct Witness {
    left: Vec<usize>,
    right: Vec<usize>,
    left_values: Vec<f64>,
    right_values: Vec<f64>,
    mean: f64,
}

fn spectrum_check(out: &Path, a: &SpectrumArg) -> Outcome {
    let (spectrum, source) = load_spectrum(a)?;
    let check = check_strongly_disjoint(&spectrum);
    let v = spectrum.values();
    let witness = check.witness.map(|(left, right)| {
        let pick = |idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let (lv, rv) = (pick(&left), pick(&right));
        let mean = lv.iter().sum::<f64>() / lv.len() as f64;
        Witness {
            left,
            right,
            left_values: lv,
            right_values: rv,
            mean,
        }
    });
    match &witness {
        None => println!("strongly disjoint: {v:?}"),
        Some(w) => println!(
            "not strongly disjoint: {:?} and {:?} both have mean {}",
            w.left_values, w.right_values, w.mean
        ),
    }
    let mut run = Run::new(
        "spectrum-check",
        Some(&spectrum),
        None,
        serde_json::json!({}),
    );
    run.source = source;
    run.json(
        "check.json",
        &CheckOut {
            values: v.to_vec(),
            strongly_disjoint: check.strongly_disjoint,
            witness,
        },
    )?;
    run.commit(out)?;
    Ok(if check.strongly_disjoint {
        EXIT_OK
    } else {
        EXIT_INVALID
    })
}

#[derive(Serialize)]
struct CatalogEntry {
    partition: Vec<Vec<usize>>,
    block_means: Vec<f64>,
    placement: Vec<usize>,
    slots: Vec<Vec<usize>>,
    canonical: bool,
    stable: bool,
    dim: usize,
    index: usize,
    coindex: usize,
    representative: Vec<Vec<f64>>,
    l_eigenvalues: Vec<f64>,
}

#[derive(Serialize)]
struct CatalogOut {
    n: usize,
    partitions: Vec<Vec<Vec<usize>>>,
    manifolds: Vec<CatalogEntry>,
}

fn catalog(out: &Path, a: &CatalogArgs) -> Outcome {
    let (spectrum, source) = load_spectrum(&a.spectrum)?;
    let spectrum = spectrum.certify()?;
    let cap = resolve_cap(a.cap)?;
    let partitions = enumerate_partitions(&spectrum, cap)?;
    let manifolds = enumerate_catalog(&spectrum, cap)?;
    let entries: Vec<CatalogEntry> = manifolds
        .into_iter()
        .map(|m| CatalogEntry {
            stable: m.is_stable(),
            partition: m.partition.blocks.clone(),
            block_means: m.partition.block_means.clone(),
            placement: m.placement,
            slots: m.slots,
            canonical: m.canonical,
            dim: m.dim,
            index: m.index,
            coindex: m.coindex,
            representative: StateFile::from(&m.representative).matrix,
            l_eigenvalues: m.l_eigenvalues,
        })
        .collect();
    println!(
        "{} critical manifolds over {} partitions",
        entries.len(),
        partitions.len()
    );
    let mut run = Run::new(
        "catalog",
        Some(&spectrum),
        None,
        serde_json::json!({ "cap": cap }),
    );
    run.source = source;
    run.json(
        "catalog.json",
        &CatalogOut {
            n: spectrum.n(),
            partitions: partitions.into_iter().map(|p| p.blocks).collect(),
            manifolds: entries,
        },
    )?;
    run.commit(out)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct TerminalOut {
    label: TerminalLabel,
    converged: bool,
    steps: usize,
    final_time: f64,
    final_gradient_norm: f64,
    final_step_size: f64,
    potential: f64,
    diagonal: Vec<f64>,
    state: StateFile,
}

fn flow(out: &Path, a: &FlowArgs) -> Outcome {
    let (spectrum, source) = load_spectrum(&a.spectrum)?;
    let start = match &a.start {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Failure::Invalid(format!("cannot read start state {}: {e}", path.display()))
            })?;
            let state: SymState = serde_json::from_str(&text).map_err(|e| {
                Failure::Invalid(format!("invalid start state {}: {e}", path.display()))
            })?;
            if state.spectrum().values() != spectrum.values() {
                return Err(Failure::Invalid(
                    "start state has a different spectrum".into(),
                ));
            }
            state
        }
        None => random_state(&spectrum, a.seed),
    };
    let base = FlowConfig::for_spectrum(&spectrum);
    let cfg = FlowConfig {
        step_size: a.h.unwrap_or(base.step_size),
        max_time: a.horizon.unwrap_or(base.max_time),
        record_stride: a.stride,
        ..base
    };
    cfg.validate()?;
    let record = integrate(&start, &cfg)?;
    let mut rows = String::new();
    for ((t, psi), mass) in record
        .times
        .iter()
        .zip(&record.potential_values)
        .zip(&record.off_diagonal_mass)
    {
        let _ = writeln!(rows, "{},{},{}", f17(*t), f17(*psi), f17(*mass));
    }
    println!("terminal: {}", describe(&record.terminal_label));
    let seed = a.start.is_none().then_some(a.seed);
    let start_file = a.start.as_ref().map(|_| StateFile::from(&start));
    let mut run = Run::new(
        "flow",
        Some(&spectrum),
        seed,
        serde_json::json!({ "flow": cfg, "start": start_file }),
    );
    run.source = source;
    run.csv("trajectory.csv", "t,psi,off_diagonal_mass", rows);
    let terminal = &record.terminal_state;
    run.json(
        "terminal.json",
        &TerminalOut {
            converged: record.converged(),
            label: record.terminal_label.clone(),
            steps: record.steps,
            final_time: record.times.last().copied().unwrap_or(0.0),
            final_gradient_norm: record.final_gradient_norm,
            final_step_size: record.final_step_size,
            potential: terminal.potential(),
            diagonal: terminal.project_diagonal().iter().copied().collect(),
            state: StateFile::from(terminal),
        },
    )?;
    run.commit(out)?;
    Ok(EXIT_OK)
}

fn describe(label: &TerminalLabel) -> String {
    match label {
        TerminalLabel::Stable { permutation } => format!("stable {permutation}"),
        TerminalLabel::NonStableCritical { partition, .. } => format!("critical set {partition:?}"),
        TerminalLabel::DidNotConverge => "did not converge".into(),
    }
}

#[derive(Serialize)]
struct EdgeOut {
    from: Permutation,
    to: Permutation,
    rank: usize,
    slots: (usize, usize),
    barrier: f64,
}

#[derive(Serialize)]
struct AdjacencyOut {
    n: usize,
    nodes: Vec<Permutation>,
    edges: Vec<EdgeOut>,
    verification: Option<AdjacencyReport>,
    basin: Option<BasinReport>,
}

fn adjacency(out: &Path, a: &AdjacencyArgs) -> Outcome {
    let (spectrum, source) = load_spectrum(&a.spectrum)?;
    let cap = resolve_cap(a.cap)?;
    let graph = build_graph(&spectrum, cap)?;
    let trace = TraceConfig {
        delta: a.delta,
        ..TraceConfig::for_spectrum(&graph.spectrum)
    };
    trace.validate()?;
    let verification = if a.verify {
        Some(verify_adjacency_capped(&graph.spectrum, &trace, cap)?)
    } else {
        None
    };
    let basin = if a.basin_samples > 0 {
        Some(basin_crosscheck(
            &graph.spectrum,
            a.basin_samples,
            a.basin_segments,
            a.seed,
            trace.flow.max_time,
        )?)
    } else {
        None
    };
    let confirmed = verification
        .as_ref()
        .is_none_or(AdjacencyReport::all_confirmed);
    if let Some(r) = &verification {
        println!(
            "confirmed {}/{} edges, {} mismatches",
            r.confirmed,
            r.edges,
            r.mismatches.len()
        );
    } else {
        println!("{} nodes, {} edges", graph.nodes.len(), graph.edges.len());
    }
    if let Some(b) = &basin {
        println!(
            "basin crossings: {} of {} on edges, explained fraction {}",
            b.edge_crossings(),
            b.crossings.len(),
            b.explained_fraction()
        );
    }
    let seed = (a.basin_samples > 0).then_some(a.seed);
    let mut run = Run::new(
        "adjacency",
        Some(&graph.spectrum),
        seed,
        serde_json::json!({
            "cap": cap,
            "verify": a.verify,
            "trace": trace,
            "basin_samples": a.basin_samples,
            "basin_segments": a.basin_segments,
        }),
    );
    run.source = source;
    run.text("graph.dot", graph.to_dot());
    run.json(
        "adjacency.json",
        &AdjacencyOut {
            n: graph.n(),
            nodes: graph.nodes.clone(),
            edges: graph
                .edges
                .iter()
                .map(|e| EdgeOut {
                    from: e.from.clone(),
                    to: e.to.clone(),
                    rank: e.rank,
                    slots: e.slots,
                    barrier: e.barrier,
                })
                .collect(),
            verification,
            basin,
        },
    )?;
    run.commit(out)?;
    if confirmed {
        Ok(EXIT_OK)
    } else {
        Err(Failure::Mismatch(
            "unstable-manifold tracing disagrees with the adjacency graph".into(),
        ))
    }
}

impl EnsembleArgs {
    fn config(
        &self,
        spectrum: &Spectrum,
        stride: usize,
    ) -> std::result::Result<SdeConfig, Failure> {
        if self.paths == 0 {
            return Err(Failure::Invalid("--paths must be at least 1".into()));
        }
        let cfg = SdeConfig {
            state_radius: self
                .radius
                .unwrap_or_else(|| default_state_radius(spectrum)),
            burn_in: self.burn_in,
            sample_stride: stride,
            ..SdeConfig::new(spectrum, self.eps, self.h, self.horizon, self.seed)
        };
        cfg.validate(spectrum)?;
        Ok(cfg)
    }

    fn simulate(
        &self,
        spectrum: &Spectrum,
        cfg: &SdeConfig,
    ) -> std::result::Result<Vec<PathRecord>, Failure> {
        let starts = random_starts(spectrum, self.paths, self.seed);
        Ok(simulate_paths(&starts, cfg)?)
    }
}

#[derive(Serialize)]
struct MarkovOut {
    estimate: Option<MarkovEstimate>,
    transition_matrix: Option<Vec<Vec<f64>>>,
    exit_rates: Option<Vec<f64>>,
    note: Option<String>,
}

#[derive(Serialize)]
struct StationarityOut {
    psi_samples: usize,
    self_consistency: Option<SelfConsistency>,
    self_consistency_note: Option<String>,
    chart: Option<ChiSquareReport>,
    chart_note: Option<String>,
}

fn sde(out: &Path, a: &SdeArgs) -> Outcome {
    let e = &a.ensemble;
    let (spectrum, source) = load_spectrum(&e.spectrum)?;
    let cfg = e.config(&spectrum, a.stride)?;
    let paths = e.simulate(&spectrum, &cfg)?;

    let mut rows = String::new();
    for p in &paths {
        for t in &p.transitions {
            let _ = writeln!(
                rows,
                "{},{},{},{},{}",
                p.path_index,
                t.step,
                t.from,
                t.to,
                f17(t.sojourn)
            );
        }
    }
    let markov = match estimate_markov(&paths) {
        Ok(m) => MarkovOut {
            transition_matrix: Some(m.transition_matrix()),
            exit_rates: Some(m.exit_rates()),
            estimate: Some(m),
            note: None,
        },
        Err(err) => MarkovOut {
            estimate: None,
            transition_matrix: None,
            exit_rates: None,
            note: Some(err.to_string()),
        },
    };
    if let Some(m) = &markov.estimate {
        println!(
            "{} transitions, {:.4} between adjacent states",
            m.transitions, m.adjacency_dominance
        );
    } else {
        println!("no transitions recorded");
    }

    let half = paths.len() / 2;
    let collect = |ps: &[PathRecord]| {
        ps.iter()
            .flat_map(|p| p.psi_samples.iter().copied())
            .collect::<Vec<_>>()
    };
    let (psi_a, psi_b) = (collect(&paths[..half]), collect(&paths[half..]));
    let (self_consistency, self_consistency_note) =
        match stationary_check(&psi_a, &psi_b, a.bins, 5) {
            Ok(r) => (Some(r), None),
            Err(err) => (None, Some(err.to_string())),
        };
    let (chart, chart_note) = if spectrum.n() == 2 {
        let thetas: std::result::Result<Vec<f64>, IsoflowError> = paths
            .iter()
            .map(|p| theta_chart(&p.terminal_state))
            .collect();
        match thetas.and_then(|t| chi_square_chart(&t, &spectrum, cfg.epsilon, a.bins)) {
            Ok(r) => (Some(r), None),
            Err(err) => (None, Some(err.to_string())),
        }
    } else {
        (None, None)
    };

    let mut run = Run::new(
        "sde",
        Some(&spectrum),
        Some(e.seed),
        serde_json::json!({ "sde": cfg, "paths": e.paths, "bins": a.bins }),
    );
    run.source = source;
    run.csv("chains.csv", "path,step,from,to,sojourn", rows);
    run.json("markov.json", &markov)?;
    run.json(
        "stationarity.json",
        &StationarityOut {
            psi_samples: psi_a.len() + psi_b.len(),
            self_consistency,
            self_consistency_note,
            chart,
            chart_note,
        },
    )?;
    run.commit(out)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct MarkovCompareOut {
    empirical: MarkovEstimate,
    predicted: PredictedTransitions,
    comparison: ComparisonReport,
}

fn markov(out: &Path, a: &MarkovArgs) -> Outcome {
    let e = &a.ensemble;
    let (spectrum, source) = load_spectrum(&e.spectrum)?;
    let cfg = e.config(&spectrum, 0)?;
    let emp_cfg = EmpConfig {
        intervals: a.intervals,
        ..EmpConfig::default()
    };
    let paths = e.simulate(&spectrum, &cfg)?;
    let empirical = estimate_markov(&paths)?;
    let predicted = predicted_transitions(&spectrum, e.eps, a.emp_horizon, &emp_cfg)?;
    let comparison = compare(&predicted, &empirical)?;
    match comparison.aggregate_tau {
        Some(t) => println!(
            "{} transitions, mean Kendall tau {t:.4}",
            empirical.transitions
        ),
        None => println!(
            "{} transitions, no state with a ranking to compare",
            empirical.transitions
        ),
    }
    let mut run = Run::new(
        "markov",
        Some(&spectrum),
        Some(e.seed),
        serde_json::json!({ "sde": cfg, "paths": e.paths, "emp_horizon": a.emp_horizon, "emp": emp_cfg }),
    );
    run.source = source;
    run.json(
        "markov.json",
        &MarkovCompareOut {
            empirical,
            predicted,
            comparison,
        },
    )?;
    run.commit(out)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct GapOut {
    rank: usize,
    gap: f64,
    energy: f64,
    infinite_horizon_energy: f64,
    terminal_error: f64,
    iterations: usize,
}

#[derive(Serialize)]
struct EmpOut {
    epsilon: f64,
    horizon: f64,
    gaps: Vec<GapOut>,
    edges: Vec<EdgeEmp>,
    states: Vec<Permutation>,
    matrix: Vec<Vec<f64>>,
}

fn emp(out: &Path, a: &EmpArgs) -> Outcome {
    let (spectrum, source) = load_spectrum(&a.spectrum)?;
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(Failure::Invalid(format!(
            "--eps must be positive, got {}",
            a.eps
        )));
    }
    let cfg = EmpConfig {
        intervals: a.intervals,
        ..EmpConfig::default()
    };
    let predicted = predicted_transitions(&spectrum, a.eps, a.horizon, &cfg)?;
    let mut gaps = Vec::new();
    let mut rows = String::new();
    for (rank, w) in spectrum.values().windows(2).enumerate() {
        let gap = w[1] - w[0];
        let sol = scalar_emp(gap, a.eps, a.horizon, &cfg)?;
        if a.trajectory {
            for (k, (t, th)) in sol.times.iter().zip(&sol.theta).enumerate() {
                let u = sol.control.get(k).map_or(String::new(), |&u| f17(u));
                let _ = writeln!(rows, "{rank},{},{},{u}", f17(*t), f17(*th));
            }
        }
        gaps.push(GapOut {
            rank,
            gap,
            energy: sol.energy,
            infinite_horizon_energy: infinite_horizon_energy(gap, a.eps),
            terminal_error: sol.terminal_error,
            iterations: sol.iterations,
        });
    }
    for g in &gaps {
        println!("gap {} ({}): energy {:.6}", g.rank, g.gap, g.energy);
    }
    let mut run = Run::new(
        "emp",
        Some(&spectrum),
        None,
        serde_json::json!({ "epsilon": a.eps, "horizon": a.horizon, "emp": cfg, "trajectory": a.trajectory }),
    );
    run.source = source;
    run.json(
        "emp.json",
        &EmpOut {
            epsilon: a.eps,
            horizon: a.horizon,
            gaps,
            edges: predicted.edges,
            states: predicted.states,
            matrix: predicted.matrix,
        },
    )?;
    if a.trajectory {
        run.csv("trajectory.csv", "rank,t,theta,control", rows);
    }
    run.commit(out)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct RunSummary {
    dir: String,
    command: String,
    config_hash: String,
    seed: Option<u64>,
    created_unix: u64,
    artifacts: Vec<String>,
    problems: Vec<String>,
}

/// Checks that the directory name, the manifest's config and every
/// artifact's stamp agree.
fn audit(dir: &Path, manifest: &Manifest) -> Vec<String> {
    let mut problems = Vec::new();
    if manifest.config.hash() != manifest.config_hash {
        problems.push("config does not hash to the recorded value".into());
    }
    let expected_name = format!(
        "{}-{}",
        manifest.command,
        manifest.config_hash.get(..16).unwrap_or("")
    );
    if dir.file_name().and_then(|n| n.to_str()) != Some(expected_name.as_str()) {
        problems.push(format!("directory name differs from {expected_name}"));
    }
    for name in &manifest.artifacts {
        let Ok(text) = fs::read_to_string(dir.join(name)) else {
            problems.push(format!("{name} is missing"));
            continue;
        };
        let ok = if name.ends_with(".json") {
            serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| {
                    v.get("manifest")
                        .and_then(|m| m.get("config_hash"))
                        .cloned()
                })
                .is_some_and(|h| h == serde_json::Value::String(manifest.config_hash.clone()))
        } else if name.ends_with(".csv") {
            text.lines()
                .next()
                .is_some_and(|l| l.split_whitespace().nth(4) == Some(manifest.config_hash.as_str()))
        } else {
            true
        };
        if !ok {
            problems.push(format!("{name} carries a different config hash"));
        }
    }
    problems
}

fn report(out: &Path, a: &ReportArgs) -> Outcome {
    let entries = match fs::read_dir(out) {
        Ok(e) => e,
        Err(e) => {
            return Err(Failure::Invalid(format!(
                "cannot read {}: {e}",
                out.display()
            )))
        }
    };
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && !p
                    .file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with('.'))
        })
        .collect();
    dirs.sort();
    let mut summaries = Vec::new();
    for dir in dirs {
        let text = match fs::read_to_string(dir.join("manifest.json")) {
            Ok(t) => t,
            Err(_) => continue,
        };
        let name = dir.display().to_string();
        let summary = match serde_json::from_str::<Manifest>(&text) {
            Ok(m) => RunSummary {
                problems: audit(&dir, &m),
                dir: name,
                command: m.command,
                config_hash: m.config_hash,
                seed: m.seed,
                created_unix: m.created_unix,
                artifacts: m.artifacts,
            },
            Err(e) => RunSummary {
                dir: name,
                command: String::new(),
                config_hash: String::new(),
                seed: None,
                created_unix: 0,
                artifacts: Vec::new(),
                problems: vec![format!("unreadable manifest: {e}")],
            },
        };
        summaries.push(summary);
    }
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&summaries).map_err(IsoflowError::from)?
        );
    } else {
        for s in &summaries {
            let status = if s.problems.is_empty() { "ok" } else { "BAD" };
            let seed = s.seed.map_or("-".to_string(), |v| v.to_string());
            println!("{status:4} {:<15} seed {seed:<6} {}", s.command, s.dir);
            for p in &s.problems {
                println!("     {p}");
            }
        }
        println!("{} runs", summaries.len());
    }
    let bad = summaries.iter().filter(|s| !s.problems.is_empty()).count();
    if bad > 0 {
        return Err(Failure::Mismatch(format!(
            "{bad} run directories failed the audit"
        )));
    }
    Ok(EXIT_OK)
}
