//! Line-based `key = value` run configuration with `[section]` headers
//! and `#` comments. Every default from the model and trainer modules can
//! be overridden here; the effective values are echoed into the run log.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{
    MultiTcnLstmConfig, DEFAULT_BASELINE_LSTM_HIDDEN, DEFAULT_MLP_WIDTHS,
};
use crate::trainer::{ExperimentConfig, TrainConfig};

/// Declarative pipeline configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: MultiTcnLstmConfig,
    pub baseline_lstm_hidden: usize,
    pub mlp_widths: Vec<usize>,
    pub train: TrainConfig,
    pub k: usize,
    pub fold_daily: bool,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: MultiTcnLstmConfig::default(),
            baseline_lstm_hidden: DEFAULT_BASELINE_LSTM_HIDDEN,
            mlp_widths: DEFAULT_MLP_WIDTHS.to_vec(),
            train: TrainConfig::default(),
            k: 2,
            fold_daily: false,
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        config.apply_file(path)?;
        Ok(config)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let file = File::open(path).map_err(Error::io(path))?;
        let reader = BufReader::new(file);
        let mut section = String::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(Error::io(path))?;
            let line_no = idx + 1;
            let text = line.split('#').next().unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            if let Some(name) = text.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::Usage(format!(
                    "{}:{line_no}: malformed section header {text:?}",
                    path.display()
                )))?;
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = text.split_once('=') else {
                return Err(Error::Usage(format!(
                    "{}:{line_no}: expected key = value, got {text:?}",
                    path.display()
                )));
            };
            self.apply(&section, key.trim(), value.trim())
                .map_err(|e| Error::Usage(format!("{}:{line_no}: {e}", path.display())))?;
        }
        self.model.validate()?;
        Ok(())
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Usage(format!("{v:?} is not an integer")))
        };
        let parse_u64 = |v: &str| -> Result<u64> {
            v.parse()
                .map_err(|_| Error::Usage(format!("{v:?} is not an integer")))
        };
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Usage(format!("{v:?} is not a number")))
        };
        let parse_list = |v: &str| -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|s| parse_usize(s.trim()))
                .collect()
        };
        let parse_bool = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(Error::Usage(format!("{other:?} is not a boolean"))),
            }
        };
        match (section, key) {
            ("model", "channels") => self.model.channels = parse_list(value)?,
            ("model", "kernel") => self.model.kernel = parse_usize(value)?,
            ("model", "dilations") => self.model.dilations = parse_list(value)?,
            ("model", "lstm_hidden") => self.model.lstm_hidden = parse_list(value)?,
            ("model", "window") => self.model.window = parse_usize(value)?,
            ("model", "horizon") => self.model.horizon = parse_usize(value)?,
            ("model", "seed") => self.model.seed = parse_u64(value)?,
            ("model", "baseline_lstm_hidden") => {
                self.baseline_lstm_hidden = parse_usize(value)?
            }
            ("model", "mlp_widths") => self.mlp_widths = parse_list(value)?,
            ("trainer", "epochs") => self.train.epochs = parse_usize(value)?,
            ("trainer", "batch_size") => self.train.batch_size = parse_usize(value)?,
            ("trainer", "lr") => self.train.lr = parse_f64(value)?,
            ("trainer", "patience") => self.train.patience = parse_usize(value)?,
            ("trainer", "seed") => self.train.seed = parse_u64(value)?,
            ("run", "k") => self.k = parse_usize(value)?,
            ("run", "fold_daily") => self.fold_daily = parse_bool(value)?,
            ("run", "jobs") => self.jobs = parse_usize(value)?,
            _ => {
                return Err(Error::Usage(format!(
                    "unknown configuration key [{section}] {key}"
                )))
            }
        }
        Ok(())
    }

    /// Effective configuration as `section.key=value` pairs, for logging.
    pub fn log_lines(&self) -> Vec<String> {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        vec![
            format!("model.channels={}", join(&self.model.channels)),
            format!("model.kernel={}", self.model.kernel),
            format!("model.dilations={}", join(&self.model.dilations)),
            format!("model.lstm_hidden={}", join(&self.model.lstm_hidden)),
            format!("model.window={}", self.model.window),
            format!("model.horizon={}", self.model.horizon),
            format!("model.seed={}", self.model.seed),
            format!("model.baseline_lstm_hidden={}", self.baseline_lstm_hidden),
            format!("model.mlp_widths={}", join(&self.mlp_widths)),
            format!("trainer.epochs={}", self.train.epochs),
            format!("trainer.batch_size={}", self.train.batch_size),
            format!("trainer.lr={}", self.train.lr),
            format!("trainer.patience={}", self.train.patience),
            format!("trainer.seed={}", self.train.seed),
            format!("run.k={}", self.k),
            format!("run.fold_daily={}", self.fold_daily),
            format!("run.jobs={}", self.jobs),
        ]
    }

    pub fn experiment(&self, variant: crate::model::Variant) -> ExperimentConfig {
        ExperimentConfig {
            variant,
            model: self.model.clone(),
            baseline_lstm_hidden: self.baseline_lstm_hidden,
            mlp_widths: self.mlp_widths.clone(),
            train: self.train.clone(),
            jobs: self.jobs,
        }
    }
}

/// Flat `key = value` file (no sections); used for model meta files.
pub fn write_kv_file(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for (key, value) in pairs {
        writeln!(w, "{key} = {value}").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let reader = BufReader::new(file);
    let mut out = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        let text = line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let Some((key, value)) = text.split_once('=') else {
            return Err(Error::Data(format!(
                "{}:{}: expected key = value",
                path.display(),
                idx + 1
            )));
        };
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# comment\n[model]\nchannels = 4,8\ndilations = 1,2\nlstm_hidden = 4,8\n\
             window = 24\n[trainer]\nepochs = 5\nlr = 0.01\n[run]\nk = 3\nfold_daily = yes\n",
        )
        .unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.model.channels, vec![4, 8]);
        assert_eq!(config.train.epochs, 5);
        assert_eq!(config.train.lr, 0.01);
        assert_eq!(config.k, 3);
        assert!(config.fold_daily);
        // Untouched keys keep their defaults.
        assert_eq!(config.train.batch_size, 64);
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "[model]\nwat = 1\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert_eq!(err.category(), "usage");
    }

    #[test]
    fn invalid_model_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "[model]\nchannels = 4\n").unwrap();
        // dilations/lstm_hidden still have 3 entries.
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn kv_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.txt");
        let pairs = vec![
            ("variant".to_string(), "lstm".to_string()),
            ("norm_mean".to_string(), "123.456789".to_string()),
        ];
        write_kv_file(&path, &pairs).unwrap();
        let map = read_kv_file(&path).unwrap();
        assert_eq!(map["variant"], "lstm");
        assert_eq!(map["norm_mean"], "123.456789");
    }
}
