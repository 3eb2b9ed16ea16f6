use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use convdk_core::report::plan_network;
use convdk_core::verify::{run_verify, Fault, VerifyScope};
use convdk_core::workload::{BUILTIN_NAMES, DEFAULT_RESOLUTION};
use convdk_core::{
    builtin, check_conditions, full_schedule, load_network, run_network, ComparisonTable, DataflowId, EnergyModel,
    Error, ErrorClass, KernelGeometry, MacroConfig, NetworkSpec,
};
use serde::de::DeserializeOwned;

/// Prints to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

const EXIT_VALIDATION: u8 = 3;
const EXIT_CAPACITY: u8 = 4;
const EXIT_VERIFY: u8 = 5;

#[derive(Parser)]
#[command(name = "convdk", version, about = "Duplicated-kernel depthwise convolution on a CIM macro")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the shift schedule for one kernel geometry.
    Schedule {
        /// Kernel width.
        #[arg(long = "kw")]
        kernel_w: u64,
        /// Stride.
        #[arg(long = "s")]
        stride: u64,
        /// Number of kernel duplicates.
        #[arg(long = "n", default_value_t = 1)]
        blocks: u64,
    },
    /// Simulate one network under one dataflow.
    Run {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long, default_value = "ws-convdk")]
        dataflow: DataflowId,
        /// Also write the mapping plan of every layer.
        #[arg(long)]
        emit_plan: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run all four dataflows and write the normalized comparison table.
    Compare {
        /// Builtin models to compare (default: all).
        #[arg(long = "model", num_args = 1.., conflicts_with = "layers")]
        models: Vec<String>,
        /// Layer files to compare.
        #[arg(long, num_args = 1..)]
        layers: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        resolution: u64,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the partition and oracle self-checks.
    Verify {
        /// Largest odd kernel size in the partition grid, as `kmax=N`.
        #[arg(long, value_parser = parse_grid)]
        grid: Option<u64>,
        /// Corrupt the schedule to prove the checks fail.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
        /// Random layers in the oracle sweep.
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct WorkloadArgs {
    /// Builtin model name.
    #[arg(long, required_unless_present = "layers", conflicts_with = "layers")]
    model: Option<String>,
    /// JSON layer file.
    #[arg(long)]
    layers: Option<PathBuf>,
    /// Input resolution for builtin models.
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    resolution: u64,
}

#[derive(Args)]
struct CommonArgs {
    /// Output directory.
    #[arg(short, long, default_value = ".")]
    output: PathBuf,
    /// JSON macro configuration overrides.
    #[arg(long = "macro")]
    macro_file: Option<PathBuf>,
    /// JSON energy constant overrides.
    #[arg(long)]
    energy: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FaultArg {
    M1,
}

fn parse_grid(s: &str) -> Result<u64, String> {
    let v = s.strip_prefix("kmax=").unwrap_or(s);
    let k: u64 = v.parse().map_err(|_| format!("expected kmax=N, got {s:?}"))?;
    if k < 3 {
        return Err("kmax must be at least 3".into());
    }
    Ok(k)
}

enum Failure {
    Error(Error),
    Verify,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::Output(format!("{}: {e}", path.display())))
}

fn load_config(common: &CommonArgs) -> Result<(MacroConfig, EnergyModel), Error> {
    let macro_cfg: MacroConfig = match &common.macro_file {
        Some(p) => read_json(p)?,
        None => MacroConfig::default(),
    };
    macro_cfg.validate()?;
    let energy: EnergyModel = match &common.energy {
        Some(p) => read_json(p)?,
        None => EnergyModel::default(),
    };
    energy.validate()?;
    Ok((macro_cfg, energy))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::from(e).context(path.display().to_string()))
}

fn cmd_schedule(k: u64, s: u64, blocks: u64) -> Result<(), Failure> {
    let geometry = KernelGeometry::new(k, s).map_err(Error::from)?;
    let report = check_conditions(geometry).map_err(Error::from)?;
    say!("{report}");
    let sched = full_schedule(geometry, blocks).map_err(Error::from)?;
    say!(
        "N={} outputs={} inputs={} shift cycles={}",
        blocks,
        sched.output_len(),
        sched.input_len(),
        sched.params.l
    );
    say!("{:>4} {:>6} {:>6}", "a", "n", "m");
    for st in &sched.steps {
        say!("{:>4} {:>6} {:>6}", st.a, st.n, st.m);
    }
    Ok(())
}

fn load_workload(model: Option<&str>, layers: Option<&Path>, resolution: u64) -> Result<NetworkSpec, Error> {
    match (model, layers) {
        (Some(m), _) => Ok(builtin(m, resolution)?),
        (None, Some(p)) => load_network(p).map_err(Error::from),
        (None, None) => Err(Error::Output("one of --model or --layers is required".into())),
    }
}

fn cmd_run(workload: &WorkloadArgs, dataflow: DataflowId, emit_plan: bool, common: &CommonArgs) -> Result<(), Failure> {
    let (macro_cfg, energy) = load_config(common)?;
    let net = load_workload(workload.model.as_deref(), workload.layers.as_deref(), workload.resolution)?;
    let report = run_network(&net, dataflow, &macro_cfg, &energy)?;
    fs::create_dir_all(&common.output).map_err(Error::from)?;
    let stem = format!("{}_{}", net.name, dataflow);
    let json = common.output.join(format!("{stem}.json"));
    let csv = common.output.join(format!("{stem}.csv"));
    write_file(&json, &report.to_json())?;
    write_file(&csv, &report.to_csv()?)?;
    if emit_plan {
        let plans = plan_network(&net, dataflow, &macro_cfg)?;
        let text = serde_json::to_string_pretty(&plans).map_err(|e| Error::Output(e.to_string()))? + "\n";
        write_file(&common.output.join(format!("{stem}_plan.json")), &text)?;
    }
    let a = &report.aggregate;
    say!(
        "{} {}: {} layers, utilization {:.2}%, buffer {} bits, DRAM {} bits, {:.3} uJ, {} cycles",
        net.name,
        dataflow,
        report.layers.len(),
        a.utilization * 100.0,
        a.traffic.buffer_bits(),
        a.traffic.dram_bits(),
        a.energy.total_pj * 1e-6,
        a.latency.total_cycles
    );
    say!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn cmd_compare(models: &[String], layers: &[PathBuf], resolution: u64, common: &CommonArgs) -> Result<(), Failure> {
    let (macro_cfg, energy) = load_config(common)?;
    let nets: Vec<NetworkSpec> = if !layers.is_empty() {
        layers.iter().map(|p| load_network(p).map_err(Error::from)).collect::<Result<_, _>>()?
    } else if models.is_empty() {
        BUILTIN_NAMES.iter().map(|m| builtin(m, resolution)).collect::<Result<_, _>>().map_err(Error::from)?
    } else {
        models.iter().map(|m| builtin(m, resolution)).collect::<Result<_, _>>().map_err(Error::from)?
    };
    let table = ComparisonTable::build(&nets, &macro_cfg, &energy)?;
    fs::create_dir_all(&common.output).map_err(Error::from)?;
    write_file(&common.output.join("compare.json"), &table.to_json())?;
    write_file(&common.output.join("compare.csv"), &table.to_csv()?)?;
    say!("{:<20} {:<12} {:>8} {:>8} {:>8} {:>8} {:>8}", "model", "dataflow", "util%", "dram", "buffer", "energy", "latency");
    for r in &table.rows {
        say!(
            "{:<20} {:<12} {:>8.2} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            r.model,
            r.dataflow.as_str(),
            r.utilization * 100.0,
            r.dram_norm,
            r.buffer_norm,
            r.energy_norm,
            r.latency_norm
        );
    }
    Ok(())
}

fn cmd_verify(grid: Option<u64>, fault: Option<FaultArg>, instances: Option<usize>, seed: Option<u64>) -> Result<(), Failure> {
    let mut scope = VerifyScope::default();
    if let Some(k) = grid {
        scope.kmax = k;
    }
    if let Some(n) = instances {
        scope.oracle_instances = n;
    }
    if let Some(s) = seed {
        scope.seed = s;
    }
    scope.fault = fault.map(|FaultArg::M1| Fault::M1);
    let summary = run_verify(&scope);
    for c in &summary.checks {
        say!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if summary.passed() {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Schedule { kernel_w, stride, blocks } => cmd_schedule(*kernel_w, *stride, *blocks),
        Command::Run {
            workload,
            dataflow,
            emit_plan,
            common,
        } => cmd_run(workload, *dataflow, *emit_plan, common),
        Command::Compare {
            models,
            layers,
            resolution,
            common,
        } => cmd_compare(models, layers, *resolution, common),
        Command::Verify {
            grid,
            inject_fault,
            instances,
            seed,
        } => cmd_verify(*grid, *inject_fault, *instances, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => {
            eprintln!("verification failed");
            ExitCode::from(EXIT_VERIFY)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Capacity => EXIT_CAPACITY,
                ErrorClass::Validation => EXIT_VALIDATION,
            })
        }
    }
}
