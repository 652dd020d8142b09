mod args;
mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};
use cyclecap::config::Config;
use cyclecap::{Category, Error, Result};
use log::warn;

use args::{Cli, Command};
use manifest::RunManifest;

fn exit_code(cat: Category) -> u8 {
    match cat {
        Category::Config => 3,
        Category::Data => 4,
        Category::Numeric => 5,
        Category::Io => 6,
    }
}

fn resolve(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cli.common.apply(&mut cfg);
    cli.command.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cmd: Command, cfg: Config, out: PathBuf) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let outcome = commands::run(&cmd, &cfg, &out)?;
    RunManifest::new(cmd, cfg, &out, &outcome.inputs)?.write(&out)?;
    Ok(())
}

fn main_inner(cli: Cli) -> Result<()> {
    if let Command::Rerun(r) = &cli.command {
        let m = RunManifest::load(&r.manifest)?;
        for path in m.changed_inputs()? {
            warn!("input changed since the recorded run: {path}");
        }
        let out = cli.common.out_dir.clone().unwrap_or(m.out_dir);
        return execute(m.command, m.config, out);
    }
    let cfg = resolve(&cli)?;
    let out = cli
        .common
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(cli.command.name()));
    execute(cli.command, cfg, out)
}

/// Usage errors print the flags of the subcommand that was being parsed.
fn usage_error(e: clap::Error) -> ExitCode {
    let _ = e.print();
    if matches!(e.kind(), ErrorKind::UnknownArgument | ErrorKind::InvalidSubcommand) {
        let mut cmd = Cli::command();
        let sub = std::env::args()
            .skip(1)
            .find(|a| cmd.get_subcommands().any(|s| s.get_name() == a));
        let help = match sub.and_then(|s| cmd.find_subcommand_mut(&s).map(|c| c.render_help())) {
            Some(h) => h,
            None => cmd.render_help(),
        };
        eprintln!("\n{help}");
    }
    ExitCode::from(2)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => return usage_error(e),
    };
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {e}", e.category());
            ExitCode::from(exit_code(e.category()))
        }
    }
}
