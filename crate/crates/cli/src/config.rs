//! Flat `key = value` config files. Keys are flag names without the leading
//! dashes; the file's entries are spliced in front of the command-line flags
//! so that explicit flags win.

use std::fs;
use std::path::Path;

pub const SUBCOMMANDS: [&str; 5] = ["synth", "train", "eval", "rtsim", "interpret"];

#[derive(Debug)]
pub struct ConfigError(pub String);

/// Parses a config file into `--key=value` arguments. Boolean keys take
/// `true`/`false`; `false` drops the flag.
pub fn parse_config(text: &str) -> Result<Vec<String>, ConfigError> {
    let mut args = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError(format!("line {}: expected key = value", lineno + 1)));
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        if key.is_empty() {
            return Err(ConfigError(format!("line {}: empty key", lineno + 1)));
        }
        match value {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            _ => args.push(format!("--{key}={value}")),
        }
    }
    Ok(args)
}

/// Finds `--config PATH` (or `--config=PATH`) anywhere in `argv`, removes it,
/// and inserts the file's flags directly after the subcommand name.
pub fn expand_config(argv: Vec<String>) -> Result<Vec<String>, ConfigError> {
    let mut out = Vec::with_capacity(argv.len());
    let mut path = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().ok_or_else(|| ConfigError("--config needs a path".into()))?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            out.push(a);
        }
    }
    let Some(path) = path else {
        return Ok(out);
    };
    let text = read_config(Path::new(&path))?;
    let extra = parse_config(&text)?;
    let at = out
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.as_str()))
        .map(|i| i + 1)
        .unwrap_or(out.len());
    out.splice(at..at, extra);
    Ok(out)
}

fn read_config(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))
}
