//! `key=value` config files layered under command-line flags.
//!
//! Config entries are turned into `--key value` arguments placed before the
//! user's own subcommand arguments; with `args_override_self` the later
//! (command-line) occurrence wins.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Command};

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key=value, got {raw:?}", i + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in config {}", path.display()))
}

/// Arguments for the entries of `cfg` that name flags of `sub`.
pub fn config_args(sub: &Command, cfg: &BTreeMap<String, String>) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (key, value) in cfg {
        let Some(arg) = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
        else {
            bail!("config key {key:?} is not a flag of `{}`", sub.get_name());
        };
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" | "1" | "yes" => out.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                _ => bail!("config key {key:?}: expected a boolean, got {value:?}"),
            },
            ArgAction::Append => {
                for v in value.split(',').map(str::trim).filter(|v| !v.is_empty()) {
                    out.push(format!("--{key}"));
                    out.push(v.to_string());
                }
            }
            _ => {
                out.push(format!("--{key}"));
                out.push(value.clone());
            }
        }
    }
    Ok(out)
}

/// Splices `extra` into `argv` right after the subcommand token.
pub fn splice_after_subcommand(
    argv: &[String],
    sub: &str,
    value_flags: &[&str],
    extra: Vec<String>,
) -> Vec<String> {
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        if value_flags.contains(&a.as_str()) {
            i += 2;
            continue;
        }
        if a == sub {
            let mut out = argv[..=i].to_vec();
            out.extend(extra);
            out.extend_from_slice(&argv[i + 1..]);
            return out;
        }
        i += 1;
    }
    argv.to_vec()
}
