//! Flat `key = value` configuration files.
//!
//! Keys are long flag names without the leading dashes. Entries are spliced
//! into the argument list directly after the subcommand, so any flag given on
//! the command line overrides them.

use std::path::Path;

use anyhow::{Context, Result};

use crate::UsageError;

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected key = value", lineno + 1)))?;
        let key = key.trim();
        if key.is_empty() || key.starts_with('-') || key == "config" {
            return Err(UsageError(format!("config line {}: invalid key {key:?}", lineno + 1)).into());
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn to_flags(entries: &[(String, String)]) -> Vec<String> {
    let mut out = Vec::new();
    for (key, value) in entries {
        match value.as_str() {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            _ => {
                out.push(format!("--{key}"));
                out.push(value.clone());
            }
        }
    }
    out
}

fn config_path(args: &[String]) -> Option<(usize, usize, String)> {
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            return args.get(i + 1).map(|p| (i, 2, p.clone()));
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some((i, 1, p.to_string()));
        }
    }
    None
}

/// Removes `--config PATH` from `args` and splices the file's entries in
/// after the subcommand.
pub fn expand(mut args: Vec<String>, subcommands: &[&str]) -> Result<Vec<String>> {
    let Some((at, width, path)) = config_path(&args) else {
        return Ok(args);
    };
    args.drain(at..at + width);
    let text = std::fs::read_to_string(Path::new(&path)).with_context(|| format!("reading config file {path}"))?;
    let flags = to_flags(&parse(&text)?);
    let sub = args
        .iter()
        .position(|a| subcommands.contains(&a.as_str()))
        .ok_or_else(|| UsageError("--config needs a subcommand".into()))?;
    args.splice(sub + 1..sub + 1, flags);
    Ok(args)
}
