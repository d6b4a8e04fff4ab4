//! `ctnet` command-line entry point.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails or training
//! diverges, 2 for usage or configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctnet::block::{build_preset, Branches, FactorizationRule, Middle, Preset};
use ctnet::config::{load_config, parse_config};
use ctnet::cost::{count_cost, Convention};
use ctnet::net::NetSpec;
use ctnet::report::Report;
use ctnet::rf::{default_probe_input, probe_rf};
use ctnet::synthetic::Task;
use ctnet::tables::{run_table, TABLE_IDS};
use ctnet::train::{toy_spec, train_toy, TrainConfig};
use ctnet::verify::{run_suite, Suite};
use ctnet::Error;

#[derive(Parser)]
#[command(name = "ctnet", version, about = "Channel-tensorized video networks: cost analysis, checks, probes and toy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Network config file (`[net]` / `[block]` sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random draw of the command.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write the report (JSON, or CSV for train-toy) to this path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the report as JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Count MACs and parameters of a network, or reproduce a cost table.
    Analyze {
        #[command(flatten)]
        shared: Shared,
        /// Input frames; defaults to the config's value.
        #[arg(long)]
        frames: Option<usize>,
        /// Input resolution; defaults to the config's value.
        #[arg(long)]
        res: Option<usize>,
        /// List every layer with its MACs and parameter count.
        #[arg(long)]
        params: bool,
        /// Report 2 FLOPs per multiply-accumulate instead of 1.
        #[arg(long)]
        true_flops: bool,
        /// Run a preset sweep and compare with reference values: 3a, 3b, 3d, 3e, 3f, 3g, params or all.
        #[arg(long)]
        table: Option<String>,
    },
    /// Run a verification suite: equivalence, gradients, degenerate, interaction.
    Verify {
        suite: String,
        #[command(flatten)]
        shared: Shared,
        /// Randomized cases for the equivalence and gradients suites.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Print passing cases too.
        #[arg(long, short)]
        verbose: bool,
    },
    /// Measure the receptive field of a module by backpropagation.
    ProbeRf {
        #[command(flatten)]
        shared: Shared,
        /// Number of channel sub-dimensions (ignored with --config).
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Kernel per sub-op: `3` for 1x3x3|3x1x1, or a branch spec such as `1x3x3>3x1x1` or `3x3x3`.
        #[arg(long, default_value = "3")]
        kernel: String,
        /// Channels of the probed module.
        #[arg(long, default_value_t = 64)]
        channels: usize,
        /// Probe input `t,h,w`; defaults to the predicted extent plus a margin.
        #[arg(long)]
        input: Option<String>,
        /// Fail unless the measured extents equal `t,h,w`.
        #[arg(long)]
        expect: Option<String>,
    },
    /// Train the toy network on a synthetic task and write per-epoch metrics.
    TrainToy {
        #[command(flatten)]
        shared: Shared,
        /// direction4 or appearance-vs-motion.
        #[arg(long, default_value = "direction4")]
        task: String,
        /// Block preset: ctnet, tsn, csn, r21d, c3d (ignored with --config).
        #[arg(long, default_value = "ctnet")]
        preset: String,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 512)]
        train_size: usize,
        #[arg(long, default_value_t = 256)]
        val_size: usize,
    },
}

enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } => Self::Check(e.to_string()),
            other => Self::Usage(other.to_string()),
        }
    }
}

type Outcome = Result<bool, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze {
            shared,
            frames,
            res,
            params,
            true_flops,
            table,
        } => analyze(&shared, frames, res, params, true_flops, table.as_deref()),
        Command::Verify {
            suite,
            shared,
            trials,
            verbose,
        } => verify(&shared, &suite, trials, verbose),
        Command::ProbeRf {
            shared,
            k,
            kernel,
            channels,
            input,
            expect,
        } => probe(&shared, k, &kernel, channels, input.as_deref(), expect.as_deref()),
        Command::TrainToy {
            shared,
            task,
            preset,
            epochs,
            lr,
            warmup,
            batch,
            train_size,
            val_size,
        } => {
            let cfg = TrainConfig {
                epochs,
                base_lr: lr,
                warmup_epochs: warmup,
                batch_size: batch,
                seed: shared.seed,
                train_size,
                val_size,
                ..TrainConfig::default()
            };
            train(&shared, &task, &preset, &cfg)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn net_spec(shared: &Shared) -> Result<NetSpec, Failure> {
    Ok(match &shared.config {
        Some(p) => load_config(p)?,
        None => parse_config("")?,
    })
}

fn emit(shared: &Shared, report: &Report, text: &str) -> Result<(), Failure> {
    if let Some(p) = &shared.out {
        write(p, &report.to_json())?;
    }
    if shared.json {
        println!("{}", report.to_json());
    } else {
        print!("{text}");
    }
    Ok(())
}

fn write(path: &Path, s: &str) -> Result<(), Failure> {
    std::fs::write(path, s).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn analyze(shared: &Shared, frames: Option<usize>, res: Option<usize>, params: bool, true_flops: bool, table: Option<&str>) -> Outcome {
    if let Some(id) = table {
        let ids: Vec<&str> = if id == "all" { TABLE_IDS.to_vec() } else { vec![id] };
        let results = ids.iter().map(|i| run_table(i)).collect::<ctnet::Result<Vec<_>>>()?;
        let text: String = results.iter().map(|r| r.render()).collect::<Vec<_>>().join("\n");
        let pass = results.iter().all(|r| r.pass());
        emit(shared, &Report::Tables(results), &text)?;
        return Ok(pass);
    }
    let spec = net_spec(shared)?;
    let convention = if true_flops { Convention::TrueFlops } else { Convention::MacsAsGflops };
    let report = count_cost(&spec, frames.unwrap_or(spec.frames), res.unwrap_or(spec.resolution))?.with_convention(convention);
    let text = report.render_table(params);
    emit(shared, &Report::Cost(report), &text)?;
    Ok(true)
}

fn verify(shared: &Shared, suite: &str, trials: usize, verbose: bool) -> Outcome {
    let suite: Suite = suite.parse()?;
    let report = run_suite(suite, shared.seed, trials)?;
    let pass = report.pass();
    let text = report.render(verbose);
    emit(shared, &Report::Verify(report), &text)?;
    Ok(pass)
}

fn triple(s: &str) -> Result<[usize; 3], Failure> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("expected t,h,w, got `{s}`")))?;
    v.try_into().map_err(|_| Failure::Usage(format!("expected three values, got `{s}`")))
}

fn probe(shared: &Shared, k: usize, kernel: &str, channels: usize, input: Option<&str>, expect: Option<&str>) -> Outcome {
    let block = match &shared.config {
        Some(p) => load_config(p)?.block,
        None => {
            let branches: Branches = match kernel.trim().parse::<usize>() {
                Ok(n) => format!("1x{n}x{n}|{n}x1x1").parse()?,
                Err(_) => kernel.parse()?,
            };
            let rule = if k <= 2 { FactorizationRule::RoundedMiddle } else { FactorizationRule::Balanced };
            build_preset(Preset::Ctnet)
                .with_k(k)
                .with_factorization(rule)
                .with_kernels(vec![branches; k])
        }
    };
    let module = match block.resolve(channels)? {
        Middle::Ct(m) => m,
        Middle::Conv2d => return Err(Failure::Usage(format!("preset {} has no 3-D module to probe", block.preset))),
    };
    let input = match input {
        Some(s) => triple(s)?,
        None => default_probe_input(&module),
    };
    let report = probe_rf(&module, input)?;
    let pass = match expect {
        Some(e) => report.extents == triple(e)?,
        None => true,
    };
    let mut text = report.render();
    if let Some(e) = expect {
        text += &format!("expected {e}: {}\n", if pass { "pass" } else { "FAIL" });
    }
    emit(shared, &Report::Rf(report), &text)?;
    Ok(pass)
}

fn train(shared: &Shared, task: &str, preset: &str, cfg: &TrainConfig) -> Outcome {
    let task: Task = task.parse()?;
    let spec = match &shared.config {
        Some(p) => load_config(p)?,
        None => toy_spec(task, preset.parse()?),
    };
    if spec.classes != task.classes() {
        return Err(Failure::Usage(format!("{task} has {} classes, network has {}", task.classes(), spec.classes)));
    }
    let report = train_toy::<f32>(task, &spec, cfg)?;
    if let Some(p) = &shared.out {
        report.write_csv(p)?;
    }
    if shared.json {
        println!("{}", Report::Train(report.clone()).to_json());
    } else {
        for r in &report.rows {
            println!(
                "epoch {:>3}  lr {:.5}  train loss {:.4}  train acc {:.3}  val acc {:.3}",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.val_acc
            );
        }
        println!("final val accuracy {:.4}", report.final_val_acc());
    }
    Ok(true)
}
