use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neural_sde::checks::oracle_battery;
use neural_sde::experiment::{read_dataset, run_fit, run_generate, run_sweep, ExperimentConfig};
use neural_sde::{Activation, BetaSharing, GradientEngine, SeedPolicy};

#[derive(Parser)]
#[command(name = "nsde", version, about = "Variational inference for neural SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic dataset and its ground truth.
    Generate(ConfigArgs),
    /// Fit (A, beta) by gradient descent on the free energy.
    Fit {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset CSV; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Mesh-size and sample-size sweeps.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the closed-form oracle checks.
    OracleCheck,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    mesh_n: Option<usize>,
    /// Comma-separated step counts, e.g. 4,8,16,32,64.
    #[arg(long, value_delimiter = ',')]
    mesh_sweep: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    sample_sweep: Option<Vec<usize>>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    n_iters: Option<usize>,
    #[arg(long)]
    n_mc_paths: Option<usize>,
    /// pathwise or euler_backprop
    #[arg(long)]
    engine: Option<GradientEngine>,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_mc: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    data_mesh_n: Option<usize>,
    /// Force the ground-truth A to zero.
    #[arg(long)]
    zero_a: bool,
    /// shared or per_observation
    #[arg(long)]
    beta_sharing: Option<BetaSharing>,
    /// fixed or fresh
    #[arg(long)]
    seed_policy: Option<SeedPolicy>,
    #[arg(long)]
    n_eval_samples: Option<usize>,
    #[arg(long)]
    n_eval_paths: Option<usize>,
    #[arg(long)]
    record_wall_time: bool,
}

impl ConfigArgs {
    fn resolve(self) -> neural_sde::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            d => c.d,
            n_samples => c.n_samples,
            mesh_n => c.mesh_n,
            mesh_sweep => c.mesh_sweep,
            sample_sweep => c.sample_sweep,
            activation => c.activation,
            step_size => c.step_size,
            n_iters => c.n_iters,
            n_mc_paths => c.n_mc_paths,
            engine => c.engine,
            seed_data => c.seeds.data,
            seed_init => c.seeds.init,
            seed_mc => c.seeds.mc,
            output_dir => c.output_dir,
            beta_sharing => c.beta_sharing,
            seed_policy => c.seed_policy,
            n_eval_samples => c.n_eval_samples,
            n_eval_paths => c.n_eval_paths,
        );
        if let Some(n) = self.data_mesh_n {
            c.data_mesh_n = Some(n);
        }
        c.zero_a |= self.zero_a;
        c.record_wall_time |= self.record_wall_time;
        c.validate()?;
        Ok(c)
    }
}

fn load_or_generate(
    config: &ExperimentConfig,
    data: Option<PathBuf>,
) -> neural_sde::Result<Vec<Vec<f64>>> {
    match data {
        Some(path) => read_dataset(BufReader::new(File::open(path)?)),
        None => Ok(run_generate(config)?.1),
    }
}

fn run(cli: Cli) -> neural_sde::Result<bool> {
    match cli.command {
        Command::Generate(args) => {
            let config = args.resolve()?;
            let (_, data) = run_generate(&config)?;
            println!(
                "wrote {} observations to {}",
                data.len(),
                config.output_dir.join("dataset.csv").display()
            );
        }
        Command::Fit { config, data } => {
            let config = config.resolve()?;
            let data = load_or_generate(&config, data)?;
            let out = run_fit(&config, &data)?;
            let first = &out.fit.history[0];
            let last = out.final_record();
            println!("free energy: iter 0 {}  iter {} {}", first.total, last.iter, last.total);
            if let Some(e) = out.eval {
                println!("held-out free energy: {} (nll std err {})", e.total, e.nll_std_err);
            }
        }
        Command::Sweep { config, data } => {
            let config = config.resolve()?;
            let data = load_or_generate(&config, data)?;
            let result = run_sweep(&config, &data)?;
            for p in &result.points {
                if let Ok(o) = &p.outcome {
                    let eval = o.eval.map_or(String::from("-"), |e| e.total.to_string());
                    println!(
                        "{:<12} {:>6}  final {}  held-out {}",
                        p.var.name(),
                        p.value,
                        o.final_record().total,
                        eval
                    );
                }
            }
        }
        Command::OracleCheck => {
            let results = oracle_battery();
            for r in &results {
                println!("{r}");
            }
            let passed = results.iter().filter(|r| r.passed).count();
            println!("{passed}/{} checks passed", results.len());
            return Ok(passed == results.len());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
