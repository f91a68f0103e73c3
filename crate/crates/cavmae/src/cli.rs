//! Command-line front end: one subcommand per workflow, each exposing
//! `--config <PATH>`, `--runs-root <DIR>` and a `--key <VALUE>` flag for every
//! configuration key the workflow understands. Flag values override the config
//! file, which overrides built-in defaults; the `CAVMAE_SEED` environment
//! variable sits between the file and the flags and affects only `seed`.

use std::env;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};

use crate::config::{keys_for, parse_config_text, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::workflows;

/// Subcommand names with their one-line descriptions, in `--help` order.
const COMMANDS: &[(&str, &str)] = &[
    (
        "gen-data",
        "generate a synthetic paired audio-visual corpus (.cavd)",
    ),
    ("pretrain", "train a model variant on paired data (.cavc)"),
    (
        "finetune",
        "train a classifier head end to end from a checkpoint",
    ),
    (
        "probe",
        "train a linear classifier on frozen checkpoint features",
    ),
    (
        "retrieve",
        "cross-modal retrieval recall in both directions",
    ),
    (
        "reconstruct",
        "reconstruct masked audio; dump originals, masks, predictions",
    ),
    (
        "localize",
        "audio-to-image patch similarity heatmaps and hit rate",
    ),
    (
        "sweep",
        "masked-reconstruction error across strategies and ratios",
    ),
    (
        "shuffle-exp",
        "compare paired training against shuffled pairings",
    ),
    (
        "gradcheck",
        "finite-difference check of the training objective",
    ),
];

/// Builds the full clap command tree.
pub fn build_command() -> Command {
    let mut root = Command::new("cavmae")
        .about("contrastive audio-visual masked autoencoder workbench")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .disable_version_flag(true);
    for &(name, about) in COMMANDS {
        let mut sub = Command::new(name)
            .about(about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("PATH")
                    .help("key=value config file, applied over built-in defaults"),
            )
            .arg(
                Arg::new("runs-root")
                    .long("runs-root")
                    .value_name("DIR")
                    .default_value("runs")
                    .help("directory that receives run outputs"),
            );
        for ks in keys_for(name).expect("every listed command has a key set") {
            sub = sub.arg(
                Arg::new(ks.key)
                    .long(ks.key)
                    .value_name("VALUE")
                    .help(format!("{} [default: {}]", ks.help, ks.default)),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

/// Resolves the configuration for a parsed invocation and runs the workflow.
/// Returns the summary lines the workflow wants printed.
pub fn dispatch(matches: &ArgMatches) -> Result<Vec<String>> {
    let (name, sub) = matches
        .subcommand()
        .expect("clap enforces subcommand_required");
    let file_pairs = match sub.get_one::<String>("config") {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::usage(format!("cannot read config file '{path}': {e}"))
            })?;
            parse_config_text(&text)?
        }
        None => Vec::new(),
    };
    let env_seed = env::var("CAVMAE_SEED").ok();
    let mut overrides = Vec::new();
    for ks in keys_for(name).expect("subcommand came from the registry") {
        if let Some(value) = sub.get_one::<String>(ks.key) {
            overrides.push((ks.key.to_string(), value.clone()));
        }
    }
    let cfg = ExperimentConfig::resolve(name, &file_pairs, env_seed.as_deref(), &overrides)?;
    let runs_root = PathBuf::from(
        sub.get_one::<String>("runs-root")
            .expect("runs-root has a default"),
    );
    workflows::execute(cfg, &runs_root)
}

/// Parses `argv` and runs the requested workflow. Intended for tests; the
/// binary's entry point is [`main_entry`].
pub fn try_run<I, T>(argv: I) -> Result<Vec<String>>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = build_command()
        .try_get_matches_from(argv)
        .map_err(|e| CliError::usage(e.to_string()))?;
    dispatch(&matches)
}

/// Process entry point: parse `std::env::args`, run, print summary lines to
/// stdout, map failures to exit codes (1 runtime, 2 usage).
pub fn main_entry() -> ExitCode {
    let matches = match build_command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            // clap uses exit code 0 for --help/--version and 2 otherwise,
            // which matches the usage-error convention here.
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code.clamp(0, 2) as u8);
        }
    };
    match dispatch(&matches) {
        Ok(lines) => {
            // Write without panicking if the consumer closed the pipe early.
            let mut out = io::stdout();
            for line in lines {
                if writeln!(out, "{line}").is_err() {
                    break;
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn command_tree_is_well_formed() {
        build_command().debug_assert();
    }

    #[test]
    fn every_registered_command_has_flags_for_all_keys() {
        for &(name, _) in COMMANDS {
            let cmd = build_command();
            let sub = cmd
                .get_subcommands()
                .find(|s| s.get_name() == name)
                .expect("subcommand registered");
            for ks in keys_for(name).unwrap() {
                assert!(
                    sub.get_arguments().any(|a| a.get_id() == ks.key),
                    "{name} lacks --{}",
                    ks.key
                );
            }
        }
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let err = try_run(["cavmae", "gen-data", "--no-such-key", "1"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_config_file_is_a_usage_error() {
        let err = try_run(["cavmae", "gen-data", "--config", "/nonexistent/x.cfg"])
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn flag_overrides_file_value() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("gen.cfg");
        fs::write(&cfg_path, "n_classes=2\nsamples_per_class=3\nseed=7\n").unwrap();
        let runs = dir.path().join("runs");
        let lines = try_run([
            "cavmae",
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--runs-root",
            runs.to_str().unwrap(),
            "--samples_per_class",
            "2",
            "--target_frames",
            "64",
            "--n_mels",
            "24",
            "--image_size",
            "16",
            "--channels",
            "1",
            "--n_frames",
            "2",
        ])
        .unwrap();
        let run_dir = lines
            .iter()
            .find_map(|l| l.strip_prefix("run_dir "))
            .expect("run_dir line present");
        let echoed = fs::read_to_string(PathBuf::from(run_dir).join("config.txt")).unwrap();
        assert!(echoed.contains("samples_per_class=2\n"), "{echoed}");
        assert!(echoed.contains("n_classes=2\n"), "{echoed}");
        assert!(echoed.contains("seed=7\n"), "{echoed}");
        assert!(run_dir.ends_with("-s7"), "{run_dir}");
    }
}
