//! Flat `key = value` configuration files for `train`.

use std::path::Path;

use cellqa::evaluation::ModelShape;
use cellqa::training::TrainConfig;

/// Model shape and training settings after applying a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelShape,
    pub train: TrainConfig,
}

/// Errors name the file and line.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("{path}:{line}: unknown key `{key}`")]
    UnknownKey { path: String, line: usize, key: String },
    #[error("{path}:{line}: bad value `{value}` for `{key}`")]
    BadValue {
        path: String,
        line: usize,
        key: String,
        value: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config = RunConfig::default();
        config.apply_str(&text, &path.display().to_string())?;
        Ok(config)
    }

    /// Applies every assignment in `text`. Blank lines and `#` comments are
    /// ignored.
    pub fn apply_str(&mut self, text: &str, source: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    path: source.to_string(),
                    line: i + 1,
                });
            };
            self.set(key.trim(), value.trim()).map_err(|unknown| {
                let (key, value) = (key.trim().to_string(), value.trim().to_string());
                if unknown {
                    ConfigError::UnknownKey {
                        path: source.to_string(),
                        line: i + 1,
                        key,
                    }
                } else {
                    ConfigError::BadValue {
                        path: source.to_string(),
                        line: i + 1,
                        key,
                        value,
                    }
                }
            })?;
        }
        Ok(())
    }

    /// `Err(true)` for an unknown key, `Err(false)` for an unparsable value.
    fn set(&mut self, key: &str, value: &str) -> Result<(), bool> {
        fn parse<T: std::str::FromStr>(v: &str) -> Result<T, bool> {
            v.parse().map_err(|_| false)
        }
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "learning_rate" => t.learning_rate = parse(value)?,
            "batch_size" => t.batch_size = parse(value)?,
            "epochs" => t.epochs = parse(value)?,
            "seed" => t.seed = parse(value)?,
            "freeze_first_k" => t.freeze_first_k = parse(value)?,
            "adam_beta1" => t.adam_beta1 = parse(value)?,
            "adam_beta2" => t.adam_beta2 = parse(value)?,
            "adam_eps" => t.adam_eps = parse(value)?,
            "use_position_embeddings" => t.use_position_embeddings = parse(value)?,
            "use_segment_embeddings" => t.use_segment_embeddings = parse(value)?,
            "max_len" => t.max_len = parse(value)?,
            "d_model" => m.d_model = parse(value)?,
            "n_layers" => m.n_layers = parse(value)?,
            "n_heads" => m.n_heads = parse(value)?,
            "d_ff" => m.d_ff = parse(value)?,
            _ => return Err(true),
        }
        Ok(())
    }
}
