//! `--config` files: `key = value` lines whose keys are long flag names.
//!
//! The file's entries are spliced in right after the subcommand, before the
//! flags given on the command line, so later (command-line) flags win.
//! Unknown keys therefore surface as ordinary usage errors.

use std::ffi::OsString;
use std::path::Path;

/// Parses a config file into flag tokens.
pub fn parse_config(text: &str, file: &Path) -> Result<Vec<OsString>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("{}:{}: expected key=value", file.display(), i + 1));
        };
        let key = key.trim().trim_start_matches("--");
        let value = value.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(format!("{}:{}: bad key '{key}'", file.display(), i + 1));
        }
        if key == "config" {
            return Err(format!("{}:{}: config files cannot include other config files", file.display(), i + 1));
        }
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                out.push(format!("--{key}").into());
                out.extend(value.split_whitespace().map(OsString::from));
            }
        }
    }
    Ok(out)
}

/// Value of `--config` in raw arguments, if any.
fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

/// Splices config-file flags after the subcommand name.
pub fn expand_args(args: Vec<OsString>, subcommands: &[&str]) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let extra = parse_config(&text, path)?;
    let Some(pos) = args.iter().position(|a| subcommands.iter().any(|s| a == s)) else {
        return Ok(args);
    };
    let mut out = args[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}
