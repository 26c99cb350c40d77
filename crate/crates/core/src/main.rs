use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use flowvip::cli::{self, RunConfig, EXIT_VERIFY_FAILED};
use flowvip::verify::SuiteOptions;
use flowvip::Error;

/// Flow-guided video inpainting at desk scale.
///
/// Configuration is resolved from the preset, then the `--config` file,
/// then `--set` pairs and the dedicated flags below. `--out` names the main
/// output of the command: the dataset directory for `gen`, the checkpoint
/// for `train`, the report file for `eval` and the frame directory for
/// `infer`.
#[derive(Parser, Debug)]
#[command(name = "flowvip", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// paper | desk
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    disable_propagation: bool,
    #[arg(long, global = true)]
    disable_flow_loss: bool,
    #[arg(long, global = true)]
    freeze_flow: bool,
    #[arg(long, global = true)]
    disable_dcn: bool,
    /// focal | local | global
    #[arg(long, global = true)]
    attention: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Render a synthetic dataset.
    Gen,
    /// Train and write checkpoints plus a loss log.
    Train,
    /// Score a checkpoint on the held-out dataset.
    Eval,
    /// Inpaint the held-out dataset and write frames.
    Infer,
    /// Run the property suite.
    Verify {
        /// Corrupt the deformable convolution backward; the suite must fail.
        #[arg(long)]
        inject_dcn_fault: bool,
        /// Skip the whole-generator gradient check.
        #[arg(long)]
        quick: bool,
    },
    /// Print the resolved configuration.
    Config,
}

fn overrides(args: &Args) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut push = |k: &str, v: String| out.push((k.to_string(), v));
    if let Some(p) = &args.preset {
        push("preset", p.clone());
    }
    if let Some(s) = args.seed {
        push("seed", s.to_string());
    }
    for (flag, key) in [
        (args.disable_propagation, "disable_propagation"),
        (args.disable_flow_loss, "disable_flow_loss"),
        (args.freeze_flow, "freeze_flow"),
        (args.disable_dcn, "disable_dcn"),
    ] {
        if flag {
            push(key, "true".into());
        }
    }
    if let Some(a) = &args.attention {
        push("attention", a.clone());
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        push(k.trim(), v.trim().to_string());
    }
    if let Some(o) = &args.out {
        let key = match args.command {
            Command::Gen => "data_dir",
            Command::Train => "checkpoint",
            Command::Eval => "report",
            Command::Infer => "infer_dir",
            Command::Verify { .. } | Command::Config => return Ok(out),
        };
        out.push((key.to_string(), o.display().to_string()));
    }
    Ok(out)
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("FLOWVIP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Error::Config(format!("FLOWVIP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn execute(args: &Args) -> Result<i32, Error> {
    configure_threads()?;
    let over = overrides(args)?;
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path, &over)?,
        None => RunConfig::resolve(None, &over)?,
    };
    match args.command {
        Command::Config => print!("{}", cfg.echo()),
        Command::Gen => {
            let dirs = cli::cmd_gen(&cfg)?;
            println!("wrote {} scenes to {}", dirs.len(), cfg.data_dir.display());
        }
        Command::Train => {
            let t = cli::cmd_train(&cfg)?;
            println!("trained to iteration {}; checkpoint {}", t.iteration, cfg.checkpoint.display());
        }
        Command::Eval => {
            let outcome = cli::cmd_eval(&cfg)?;
            print!("{}", outcome.text);
        }
        Command::Infer => {
            let dirs = cli::cmd_infer(&cfg)?;
            println!("wrote {} videos to {}", dirs.len(), cfg.infer_dir.display());
        }
        Command::Verify { inject_dcn_fault, quick } => {
            let start = Instant::now();
            let options = SuiteOptions {
                inject_dcn_fault,
                skip_generator_gradcheck: quick,
            };
            let results = cli::cmd_verify(&cfg, &options);
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!(
                "{} properties, {} failed, {:.1} s",
                results.len(),
                failed,
                start.elapsed().as_secs_f64()
            );
            if failed > 0 {
                return Ok(EXIT_VERIFY_FAILED);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
