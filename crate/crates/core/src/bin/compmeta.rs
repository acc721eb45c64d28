use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use compmeta::cli::{
    cmd_ablate, cmd_build_db, cmd_evaluate, cmd_gen_world, cmd_meta_train, cmd_train_retriever, Context,
};
use compmeta::experiment::ExperimentConfig;
use compmeta::Result;

#[derive(Parser)]
#[command(name = "compmeta", version, about = "Retrieval-enhanced meta-learning for grounded compositional concepts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory; defaults to `eval.out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run with this single seed instead of the configured list.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and split a synthetic world.
    GenWorld(Common),
    /// Train the retrieval encoder (also the scratch baseline).
    TrainRetriever(Common),
    /// Build the concept database from the encoder.
    BuildDb(Common),
    /// Meta-train with the configured retrieval mode.
    MetaTrain(Common),
    /// Evaluate the meta-trained checkpoint.
    Evaluate(Common),
    /// Run the five-method comparison end to end.
    Ablate(Common),
}

fn run(cli: Cli) -> Result<()> {
    let (Command::GenWorld(c)
    | Command::TrainRetriever(c)
    | Command::BuildDb(c)
    | Command::MetaTrain(c)
    | Command::Evaluate(c)
    | Command::Ablate(c)) = &cli.command;
    if c.threads > 0 {
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(c.threads).build_global();
    }
    let config = ExperimentConfig::load(&c.config)?;
    let ctx = Context::new(config, c.out.clone(), c.seed_override)?;
    match &cli.command {
        Command::GenWorld(_) => {
            let data = cmd_gen_world(&ctx)?;
            println!(
                "wrote {} instances ({} novel pairs) to {}",
                data.splits.len(),
                data.splits.novel_pairs.len(),
                ctx.out.display()
            );
        }
        Command::TrainRetriever(_) => {
            cmd_train_retriever(&ctx)?;
            println!("wrote {}", ctx.path(compmeta::cli::ENCODER).display());
        }
        Command::BuildDb(_) => {
            cmd_build_db(&ctx)?;
            println!("wrote {}", ctx.path(compmeta::cli::DB).display());
        }
        Command::MetaTrain(_) => {
            cmd_meta_train(&ctx)?;
            println!("wrote {}", ctx.path(compmeta::cli::MODEL).display());
        }
        Command::Evaluate(_) => {
            let r = cmd_evaluate(&ctx)?;
            println!(
                "seen pair {:.4} attr {:.4} obj {:.4} | novel pair {:.4} attr {:.4} obj {:.4}",
                r.seen.pair(),
                r.seen.attr(),
                r.seen.obj(),
                r.novel.pair(),
                r.novel.attr(),
                r.novel.obj()
            );
        }
        Command::Ablate(_) => {
            let out = cmd_ablate(&ctx)?;
            print!("{}", out.table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
