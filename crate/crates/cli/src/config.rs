//! Training configuration assembled from an optional TOML file plus
//! `--key=value` overrides.

use std::path::Path;

use outlierseg_core::{Error, Result, TrainConfig};
use toml::{Table, Value};

/// Keys of `TrainConfig` that have no value by default and are therefore
/// absent from the serialized defaults.
const OPTIONAL_KEYS: [&str; 4] = ["sampling_start_epoch", "train_data", "val_data", "out_dir"];

fn known_keys() -> Vec<String> {
    let defaults: Table = toml::from_str(&TrainConfig::default().to_toml_string()).expect("defaults round-trip");
    defaults
        .keys()
        .cloned()
        .chain(OPTIONAL_KEYS.iter().map(|k| k.to_string()))
        .collect()
}

fn check_key(key: &str, known: &[String], origin: &str) -> Result<()> {
    if known.iter().any(|k| k == key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown configuration key `{key}` in {origin}")))
    }
}

/// Interprets an override value as a TOML literal (number, bool, string,
/// array); anything that does not parse is taken as a bare string.
pub fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Splits `--key=value` into `(key, value)`, normalizing dashes in the key.
pub fn split_override(arg: &str) -> Result<(String, Value)> {
    let body = arg
        .strip_prefix("--")
        .ok_or_else(|| Error::Config(format!("expected --key=value, got `{arg}`")))?;
    let (key, raw) = body
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected --key=value, got `{arg}`")))?;
    Ok((key.replace('-', "_"), parse_value(raw)))
}

pub fn load(file: Option<&Path>, overrides: &[String], seed: u64) -> Result<TrainConfig> {
    let known = known_keys();
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let t: Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for key in t.keys() {
                check_key(key, &known, &path.display().to_string())?;
            }
            t
        }
        None => Table::new(),
    };
    for arg in overrides {
        let (key, value) = split_override(arg)?;
        check_key(&key, &known, "command-line overrides")?;
        table.insert(key, value);
    }
    table.insert("seed".into(), Value::Integer(seed as i64));
    let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_typed() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("0.5"), Value::Float(0.5));
        assert_eq!(parse_value("true"), Value::Boolean(true));
        assert_eq!(parse_value("norm"), Value::String("norm".into()));
        assert_eq!(parse_value("data/train"), Value::String("data/train".into()));
    }

    #[test]
    fn overrides_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "epochs = 10\nbatch_size = 4\n").unwrap();
        let cfg = load(
            Some(&path),
            &["--batch-size=2".into(), "--strategy=pareto".into()],
            5,
        )
        .unwrap();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.seed), (10, 2, 5));
        assert_eq!(cfg.loss.strategy.to_string(), "pareto");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(load(None, &["--epoch=3".into()], 0), Err(Error::Config(_))));
        assert!(matches!(load(None, &["epochs=3".into()], 0), Err(Error::Config(_))));
        assert!(matches!(load(None, &["--epochs=zero".into()], 0), Err(Error::Config(_))));
    }

    #[test]
    fn optional_keys_accepted() {
        let cfg = load(None, &["--out-dir=runs/a".into(), "--sampling_start_epoch=3".into()], 0).unwrap();
        assert_eq!(cfg.sampling_start(), 3);
        assert_eq!(cfg.out_dir.unwrap(), Path::new("runs/a"));
    }
}
