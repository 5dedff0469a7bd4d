//! Config files: a JSON object whose keys are flag names (`lambda1`,
//! `train-n` or `train_n`). Values may be strings, numbers, booleans or
//! arrays (joined with commas). Booleans switch a flag on or off. Keys the
//! command line already sets are ignored, so the command line wins.

use std::collections::HashSet;

/// Returns `argv` with the config file's flags inserted after the subcommand.
pub fn expand(argv: &[String]) -> Result<Vec<String>, String> {
    let Some(path) = config_path(argv)? else {
        return Ok(argv.to_vec());
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| format!("config {path}: {e}"))?;
    let obj = value.as_object().ok_or_else(|| format!("config {path} must be a JSON object"))?;

    let given: HashSet<String> = argv
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let mut injected = Vec::new();
    for (key, v) in obj {
        let flag = key.replace('_', "-");
        if flag == "config" || given.contains(&flag) {
            continue;
        }
        match v {
            serde_json::Value::Bool(true) => injected.push(format!("--{flag}")),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::Array(items) => {
                let parts: Vec<String> = items.iter().map(scalar).collect::<Result<_, _>>()?;
                injected.push(format!("--{flag}={}", parts.join(",")));
            }
            other => injected.push(format!("--{flag}={}", scalar(other)?)),
        }
    }
    let pos = subcommand_position(argv).unwrap_or(argv.len());
    let mut out = argv[..pos.min(argv.len())].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos.min(argv.len())..]);
    Ok(out)
}

fn scalar(v: &serde_json::Value) -> Result<String, String> {
    match v {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        serde_json::Value::Bool(b) => Ok(b.to_string()),
        other => Err(format!("config value {other} is not a scalar")),
    }
}

fn config_path(argv: &[String]) -> Result<Option<String>, String> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned().map(Some).ok_or_else(|| "--config needs a path".to_string());
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Ok(Some(p.to_string()));
        }
    }
    Ok(None)
}

/// Index just past the subcommand name.
fn subcommand_position(argv: &[String]) -> Option<usize> {
    argv.iter().skip(1).position(|a| !a.starts_with('-')).map(|i| i + 2)
}
