//! `mvcnn` command-line driver.
//!
//! Exit codes: 0 success, 1 invalid configuration, 2 runtime or numeric
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command as ClapCommand};

use config::{flag_name, Command, RawConfig, RunConfig, BOOL_KEYS, KEYS};

fn about(cmd: Command) -> &'static str {
    match cmd {
        Command::Stats => "Print embedding coverage of a dataset vocabulary",
        Command::MutualLearn => "Complete embedding versions by mutual learning",
        Command::Pretrain => "Pretrain a network on an unlabeled corpus",
        Command::Train => "Train a classifier and write the best checkpoint",
        Command::Eval => "Print the accuracy of a checkpoint on a dataset",
        Command::Gradcheck => "Check analytic gradients against finite differences",
    }
}

fn cli() -> ClapCommand {
    let mut app = ClapCommand::new("mvcnn")
        .about("Multichannel variable-size CNN for sentence classification")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .global(true)
                .help("key=value config file; flags override it"),
        );
    for (key, default, help) in KEYS {
        let shown = if default.is_empty() { "unset" } else { default };
        let mut arg = Arg::new(*key)
            .long(flag_name(key))
            .global(true)
            .help(format!("{help} [default: {shown}]"));
        if BOOL_KEYS.contains(key) {
            arg = arg
                .value_name("BOOL")
                .num_args(0..=1)
                .default_missing_value("true");
        } else {
            arg = arg.value_name("VALUE").action(ArgAction::Set);
        }
        app = app.arg(arg);
    }
    for cmd in Command::ALL {
        app = app.subcommand(ClapCommand::new(cmd.name()).about(about(cmd)));
    }
    app
}

fn merged_config(matches: &ArgMatches) -> Result<RawConfig, Vec<String>> {
    let mut raw = RawConfig::defaults();
    let mut problems = Vec::new();
    if let Some(path) = matches.get_one::<String>("config") {
        raw.apply_file(&PathBuf::from(path), &mut problems);
    }
    for (key, _, _) in KEYS {
        if let Some(v) = matches.get_one::<String>(key) {
            raw.set(key, v);
        }
    }
    if problems.is_empty() {
        Ok(raw)
    } else {
        Err(problems)
    }
}

fn report_problems(problems: &[String]) -> ExitCode {
    eprintln!("error: invalid configuration ({} problems)", problems.len());
    for p in problems {
        eprintln!("  - {p}");
    }
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cmd = Command::ALL
        .into_iter()
        .find(|c| c.name() == name)
        .expect("known subcommand");

    let raw = match merged_config(sub) {
        Ok(raw) => raw,
        Err(p) => return report_problems(&p),
    };
    eprint!("{}", raw.echo());
    let (cfg, mut problems) = RunConfig::from_raw(&raw);
    problems.extend(cfg.problems(cmd));
    if !problems.is_empty() {
        return report_problems(&problems);
    }

    let result = match cmd {
        Command::Stats => commands::stats(&cfg),
        Command::MutualLearn => commands::mutual_learn(&cfg),
        Command::Pretrain => commands::pretrain(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg).and_then(|worst| {
            if worst < commands::GRADCHECK_TOLERANCE {
                Ok(())
            } else {
                anyhow::bail!(
                    "max relative error {worst:.3e} exceeds {:e}",
                    commands::GRADCHECK_TOLERANCE
                )
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
