mod cli;
mod commands;

use std::io::Write;
use std::process::ExitCode;

use clap::{CommandFactory, Parser};
use cli::{Cli, Command};
use commands::EvalArgs;

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("LACLIP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| anyhow::anyhow!("LACLIP_THREADS must be a non-negative integer, got {raw:?}"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// Usage line of the subcommand named on the command line, or of the binary.
fn synopsis() -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let sub = std::env::args().nth(1);
    match sub.as_deref().and_then(|name| cmd.find_subcommand_mut(name)) {
        Some(sub) => sub.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn run(cli: Cli) -> anyhow::Result<String> {
    match cli.command {
        Command::Validate { manifest, lenient } => commands::validate(&manifest, lenient),
        Command::Split { manifest, seed, out } => commands::split(&manifest, seed, &out),
        Command::Train(args) => commands::train(&args),
        Command::Retrieve {
            direction,
            scoring,
            k,
            stores,
            query_id,
        } => commands::retrieve(direction, &scoring, k, &stores, &query_id),
        Command::Eval {
            stores,
            gold,
            scoring,
            report,
            pool_by_category,
            manifest,
            model,
        } => commands::evaluate(EvalArgs {
            stores: &stores,
            gold: &gold,
            scoring: &scoring,
            report: report.as_deref(),
            pool_manifest: manifest.as_deref().filter(|_| pool_by_category),
            model: model.as_deref(),
        }),
        Command::InspectWeights { images, image_id, alpha } => commands::inspect_weights(&images, &image_id, alpha),
        Command::MrCheck { fixtures } => commands::mr_check(&fixtures),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if !e.render().to_string().contains("Usage:") {
                eprintln!("\n{}", synopsis());
            }
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(out.as_bytes()).and_then(|_| stdout.flush()).is_err() {
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
