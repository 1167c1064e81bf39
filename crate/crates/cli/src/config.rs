//! Flat `key = value` configuration files.
//!
//! Keys are long flag names of the chosen subcommand (`batch-size` or
//! `batch_size`); `#` starts a comment. Values are spliced into the argument
//! list before parsing, after any flag given explicitly, so explicit flags
//! win and the file gets the same validation as the command line.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::CommandFactory;

use crate::args::Cli;
use crate::exit::UsageError;

/// Parses `text` into ordered `(key, value)` pairs with normalised keys.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, UsageError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected key = value", n + 1)))?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            return Err(UsageError(format!("config line {}: empty key", n + 1)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

fn subcommand_name(args: &[OsString]) -> Option<String> {
    let cmd = Cli::command();
    args.iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .find(|a| cmd.find_subcommand(a).is_some())
}

fn has_flag(args: &[OsString], key: &str) -> bool {
    let long = format!("--{key}");
    let prefix = format!("{long}=");
    args.iter().any(|a| {
        let s = a.to_string_lossy();
        s == long || s.starts_with(&prefix)
    })
}

/// Returns `args` extended with every config-file entry not already given
/// as a flag. Without `--config` the arguments are returned unchanged.
pub fn merge_config_file(args: Vec<OsString>) -> Result<Vec<OsString>, UsageError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(Path::new(&path))
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", Path::new(&path).display())))?;
    let entries = parse_config(&text)?;
    let Some(sub) = subcommand_name(&args) else {
        return Ok(args);
    };
    let root = Cli::command();
    let cmd = root.find_subcommand(&sub).expect("name came from the command");
    let mut extra = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            return Err(UsageError("config files cannot include other config files".into()));
        }
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| UsageError(format!("config key '{key}' is not a flag of '{sub}'")))?;
        if has_flag(&args, &key) {
            continue;
        }
        if arg.get_action().takes_values() {
            extra.push(OsString::from(format!("--{key}")));
            extra.push(OsString::from(value));
        } else {
            match value.as_str() {
                "true" => extra.push(OsString::from(format!("--{key}"))),
                "false" => {}
                other => return Err(UsageError(format!("config key '{key}' takes true or false, got '{other}'"))),
            }
        }
    }
    let mut merged = args;
    merged.extend(extra);
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_comments_and_normalises_keys() {
        let got = parse_config("# header\nbatch_size = 4 # inline\n\n--lr=0.01\n").unwrap();
        assert_eq!(got, vec![("batch-size".into(), "4".into()), ("lr".into(), "0.01".into())]);
        assert!(parse_config("steps 3").is_err());
    }

    #[test]
    fn flags_win_over_file_entries() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "steps = 7\nlr = 0.5\nrandom_tail = true\n").unwrap();
        let args = os(&["v2m", "train", "--config", cfg.to_str().unwrap(), "--steps", "3"]);
        let merged = merge_config_file(args).unwrap_err();
        assert!(merged.0.contains("random-tail"));

        fs::write(&cfg, "steps = 7\nlr = 0.5\n").unwrap();
        let args = os(&["v2m", "train", "--config", cfg.to_str().unwrap(), "--steps=3"]);
        let merged = merge_config_file(args).unwrap();
        let tail: Vec<_> = merged[5..].iter().map(|s| s.to_string_lossy().into_owned()).collect();
        assert_eq!(tail, vec!["--lr", "0.5"]);
    }

    #[test]
    fn boolean_flags_take_true_or_false() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("data.cfg");
        fs::write(&cfg, "random-tail = true\nn = 12\n").unwrap();
        let merged = merge_config_file(os(&["v2m", "make-data", "--config", cfg.to_str().unwrap()])).unwrap();
        assert!(merged.contains(&OsString::from("--random-tail")));
        fs::write(&cfg, "random-tail = maybe\n").unwrap();
        assert!(merge_config_file(os(&["v2m", "make-data", "--config", cfg.to_str().unwrap()])).is_err());
    }
}
