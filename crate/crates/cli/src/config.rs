//! Config files are TOML. Top-level keys are global flags; a table named
//! after the subcommand holds that subcommand's flags. Every key is the long
//! flag name, and config values win over the command line.

use std::path::Path;

use toml::{Table, Value};

/// Extra arguments to append after the user's, so that they take precedence.
pub fn config_args(path: &Path, subcommand: &str) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let table: Table = text.parse().map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (key, value) in &table {
        match value {
            Value::Table(section) => {
                if key == subcommand {
                    push_section(section, &mut out)?;
                }
            }
            other => push_flag(key, other, &mut out)?,
        }
    }
    Ok(out)
}

fn push_section(section: &Table, out: &mut Vec<String>) -> Result<(), String> {
    for (key, value) in section {
        push_flag(key, value, out)?;
    }
    Ok(())
}

fn push_flag(key: &str, value: &Value, out: &mut Vec<String>) -> Result<(), String> {
    if key == "config" {
        return Err("a config file cannot name another config file".into());
    }
    let rendered = render(key, value)?;
    out.push(format!("--{key}={rendered}"));
    Ok(())
}

fn render(key: &str, value: &Value) -> Result<String, String> {
    Ok(match value {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Boolean(b) => b.to_string(),
        Value::Array(items) => items
            .iter()
            .map(|v| match v {
                Value::Array(_) | Value::Table(_) => Err(format!("key {key}: nested values are not supported")),
                other => render(key, other),
            })
            .collect::<Result<Vec<_>, _>>()?
            .join(","),
        Value::Datetime(_) | Value::Table(_) => return Err(format!("key {key}: unsupported value type")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn section_and_globals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "threads = 2\n[learn]\ntaus = [0.1, 0.2]\nrefit = true\n[test-edge]\nalpha = 0.1\n",
        )
        .unwrap();
        let mut args = config_args(&path, "learn").unwrap();
        args.sort();
        assert_eq!(args, vec!["--refit=true", "--taus=0.1,0.2", "--threads=2"]);
        let mut args = config_args(&path, "test-edge").unwrap();
        args.sort();
        assert_eq!(args, vec!["--alpha=0.1", "--threads=2"]);
    }

    #[test]
    fn rejects_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[learn]\ntaus = [[1]]\n").unwrap();
        assert!(config_args(&path, "learn").is_err());
        std::fs::write(&path, "config = \"x\"\n").unwrap();
        assert!(config_args(&path, "learn").is_err());
        std::fs::write(&path, "not toml").unwrap();
        assert!(config_args(&path, "learn").is_err());
    }
}
