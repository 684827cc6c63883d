//! `ulma`: preprocessing, vocabulary, masked-LM tuning, augmentation,
//! fine-tuning and k-fold evaluation from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use commands::{Failure, COMMANDS};

fn key_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(clap::value_parser!(PathBuf))
        .help("JSON run config; --KEY flags override it")];
    for (key, default) in config::default_keys() {
        args.push(
            Arg::new(key.clone())
                .long(key)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help(format!("default: {default}")),
        );
    }
    for (alias, key) in config::ALIASES {
        args.push(
            Arg::new(alias)
                .long(alias)
                .value_name("PATH")
                .conflicts_with(key)
                .help(format!("same as --{key}")),
        );
    }
    args
}

fn cli() -> Command {
    let mut cmd = Command::new("ulma")
        .about("Adapt a small transformer encoder to text classification")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(config::keys_help());
    for (name, about) in COMMANDS {
        cmd = cmd.subcommand(Command::new(name).about(about).args(key_args()));
    }
    cmd
}

/// `--key value` pairs in command-line order, aliases resolved.
fn overrides(matches: &ArgMatches) -> Vec<(String, String)> {
    let mut found = Vec::new();
    let ids: Vec<String> = matches.ids().map(|id| id.as_str().to_string()).collect();
    for id in ids {
        if id == "config" {
            continue;
        }
        let Some(key) = config::resolve_key(&id) else { continue };
        if let (Some(value), Some(index)) = (matches.get_one::<String>(&id), matches.index_of(&id)) {
            found.push((index, key, value.clone()));
        }
    }
    found.sort();
    found.into_iter().map(|(_, k, v)| (k, v)).collect()
}

fn run() -> Result<(), Failure> {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return if code == 0 { Ok(()) } else { Err(Failure { code, message: String::new() }) };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cfg = config::load(sub.get_one::<PathBuf>("config").map(PathBuf::as_path), &overrides(sub)).map_err(Failure::usage)?;
    let problems = cfg.problems(commands::needs(name));
    if !problems.is_empty() {
        return Err(Failure::usage(format!("invalid configuration:\n  {}", problems.join("\n  "))));
    }
    commands::run(name, &cfg)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_valid() {
        cli().debug_assert();
    }

    #[test]
    fn overrides_keep_order_and_aliases() {
        let m = cli()
            .try_get_matches_from(["ulma", "train", "--epochs", "3", "--input", "a.tsv", "--train.head_lr", "0.1"])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        assert_eq!(
            overrides(sub),
            vec![
                ("epochs".to_string(), "3".to_string()),
                ("paths.corpus".to_string(), "a.tsv".to_string()),
                ("train.head_lr".to_string(), "0.1".to_string()),
            ]
        );
    }

    #[test]
    fn alias_and_key_conflict() {
        assert!(cli()
            .try_get_matches_from(["ulma", "train", "--input", "a", "--paths.corpus", "b"])
            .is_err());
    }
}
