use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedls::privacy::{Subsampling, DEFAULT_LAMBDA_GRID};
use fedls_cli::accountant::{self, Answer, DeltaArgs, MechanismArgs};
use fedls_cli::attack::{cmd_attack, AttackArgs};
use fedls_cli::config::Overrides;
use fedls_cli::error::{CliError, EXIT_INFEASIBLE, EXIT_USAGE};
use fedls_cli::experiment::cmd_run;
use fedls_cli::spectrum::cmd_spectrum;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "fedls", version, about = "Private federated learning with Laplacian smoothing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Privacy accounting queries.
    Accountant {
        #[command(subcommand)]
        query: Query,
    },
    /// Run an experiment config and write its artifacts.
    Run(RunArgs),
    /// Membership-inference attack against a saved model.
    Attack(AttackCli),
    /// Frequency profile of a saved vector.
    Spectrum {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mech {
    Uniform,
    Poisson,
}

impl From<Mech> for Subsampling {
    fn from(m: Mech) -> Self {
        match m {
            Mech::Uniform => Subsampling::Uniform,
            Mech::Poisson => Subsampling::Poisson,
        }
    }
}

#[derive(Args)]
struct DeltaFlags {
    #[arg(long)]
    delta: Option<f64>,
    /// Sets `δ = n^{−exp}`; needs --n.
    #[arg(long)]
    delta_exp: Option<f64>,
    /// Number of clients; alone it gives the default `δ = n^{−1.1}`.
    #[arg(long)]
    n: Option<usize>,
}

impl DeltaFlags {
    fn args(&self) -> DeltaArgs {
        DeltaArgs {
            delta: self.delta,
            delta_exp: self.delta_exp,
            n: self.n,
        }
    }
}

#[derive(Args)]
struct MechFlags {
    #[arg(long, value_enum, default_value = "uniform")]
    mech: Mech,
    #[arg(long)]
    tau: f64,
    #[arg(long)]
    rounds: u64,
    #[arg(long)]
    clip: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA_GRID)]
    grid: usize,
}

impl MechFlags {
    fn args(&self) -> MechanismArgs {
        MechanismArgs {
            mech: self.mech.into(),
            tau: self.tau,
            rounds: self.rounds,
            clip: self.clip,
            grid: self.grid,
        }
    }
}

#[derive(Subcommand)]
enum Query {
    /// Noise needed for a target (ε, δ).
    Calibrate {
        #[arg(long)]
        eps: f64,
        #[command(flatten)]
        mech: MechFlags,
        #[command(flatten)]
        delta: DeltaFlags,
    },
    /// Smallest ε certified by a noise level.
    Budget {
        #[arg(long)]
        nu: f64,
        #[command(flatten)]
        mech: MechFlags,
        #[command(flatten)]
        delta: DeltaFlags,
    },
    /// Largest round count at a noise multiplier (uniform subsampling).
    MaxRounds {
        #[arg(long)]
        nu1: f64,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[command(flatten)]
        delta: DeltaFlags,
    },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    repeat: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, conflicts_with_all = ["nu", "z"])]
    eps: Option<f64>,
    #[arg(long, conflicts_with = "z")]
    nu: Option<f64>,
    #[arg(long)]
    z: Option<f64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AttackCli {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    repeat: usize,
    /// File of member row indices.
    #[arg(long, requires = "non_members")]
    members: Option<PathBuf>,
    /// File of non-member row indices.
    #[arg(long, requires = "members")]
    non_members: Option<PathBuf>,
    /// Swap the roles of members and non-members.
    #[arg(long)]
    flip: bool,
    /// Write the ROC curve as `fpr,tpr` CSV.
    #[arg(long)]
    roc: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

fn print(v: &Value) {
    // a closed pipe (e.g. `| head`) is not an error worth panicking over
    let _ = writeln!(io::stdout(), "{}", serde_json::to_string_pretty(v).expect("JSON value"));
}

fn answer(a: Answer) -> Result<ExitCode, CliError> {
    print(&a.record);
    Ok(if a.feasible {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_INFEASIBLE as u8)
    })
}

fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Accountant { query } => match query {
            Query::Calibrate { eps, mech, delta } => answer(accountant::calibrate(&mech.args(), eps, &delta.args())?),
            Query::Budget { nu, mech, delta } => answer(accountant::budget(&mech.args(), nu, &delta.args())?),
            Query::MaxRounds {
                nu1,
                tau,
                eps,
                lambda,
                delta,
            } => answer(accountant::rounds(nu1, tau, eps, &delta.args(), lambda)?),
        },
        Command::Run(a) => {
            let overrides = Overrides {
                out: a.out,
                repeat: a.repeat,
                seed: a.seed,
                threads: a.threads,
                rounds: a.rounds,
                sigma: a.sigma,
                epsilon: a.eps,
                nu: a.nu,
                z: a.z,
                data_dir: a.data_dir,
            };
            let outcome = cmd_run(&a.config, &overrides)?;
            print(&json!({
                "out": outcome.config.output.dir,
                "summary": outcome.summary(),
            }));
            Ok(ExitCode::SUCCESS)
        }
        Command::Attack(a) => {
            let (report, _) = cmd_attack(&AttackArgs {
                config: a.config,
                model: a.model,
                repeat: a.repeat,
                members: a.members,
                non_members: a.non_members,
                flip: a.flip,
                roc: a.roc,
                data_dir: a.data_dir,
            })?;
            print(&serde_json::to_value(report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Spectrum { input, out } => {
            let (_, record) = cmd_spectrum(&input, out.as_deref())?;
            print(&record);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            if let CliError::Infeasible(record) = &e {
                print(record);
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
