//! Plain `key=value` run configuration. Keys are long flag names of the
//! chosen subcommand; flags given on the command line win.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, Command};

use crate::CliError;

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected key=value, found `{line}`", n + 1)));
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", n + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key `{key}`", n + 1)));
        }
    }
    Ok(out)
}

/// Extra command-line tokens supplying the file's values for every flag of
/// `sub` that was not given on the command line. Unknown keys are rejected.
pub fn file_arguments(
    root: &Command,
    sub_name: &str,
    sub_matches: &ArgMatches,
    values: &BTreeMap<String, String>,
    path: &Path,
) -> Result<Vec<OsString>, CliError> {
    let sub = root
        .find_subcommand(sub_name)
        .ok_or_else(|| CliError::Usage(format!("unknown subcommand {sub_name}")))?;
    let mut extra = Vec::new();
    for (key, value) in values {
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()) && a.get_id() != "config" && a.get_id() != "help" && a.get_id() != "version")
            .ok_or_else(|| CliError::Usage(format!("{}: unknown key `{key}` for `{sub_name}`", path.display())))?;
        if sub_matches.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        if arg.get_action().takes_values() {
            extra.push(OsString::from(format!("--{key}")));
            extra.push(OsString::from(value));
        } else {
            match value.as_str() {
                "true" => extra.push(OsString::from(format!("--{key}"))),
                "false" => {}
                other => {
                    return Err(CliError::Usage(format!("{}: `{key}` takes true or false, found `{other}`", path.display())))
                }
            }
        }
    }
    Ok(extra)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_underscores() {
        let m = parse_config("# run\n\nbatch_size = 32\nlr=0.001\n").unwrap();
        assert_eq!(m.get("batch-size").map(String::as_str), Some("32"));
        assert_eq!(m.get("lr").map(String::as_str), Some("0.001"));
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn malformed_lines_are_usage_errors() {
        assert!(matches!(parse_config("lr 0.1"), Err(CliError::Usage(_))));
        assert!(matches!(parse_config("=3"), Err(CliError::Usage(_))));
        assert!(matches!(parse_config("lr=1\nlr=2"), Err(CliError::Usage(_))));
    }
}
