//! `key = value` configuration files and flag overrides.

use std::path::Path;
use std::str::FromStr;

use sac_core::encoder::EncoderKind;
use sac_core::head::AttentionMode;
use sac_core::trainer::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: `{key}` expects {expected}, got `{value}`")]
    TypeError {
        key: String,
        value: String,
        expected: &'static str,
        line: usize,
    },
    #[error("line {line}: `{key}` is set twice")]
    Duplicate { key: String, line: usize },
}

pub fn parse_attention(s: &str) -> Result<AttentionMode, String> {
    match s {
        "learned" => Ok(AttentionMode::Learned),
        "uniform" => Ok(AttentionMode::Uniform),
        other => Err(format!(
            "unknown attention mode {other:?} (expected learned or uniform)"
        )),
    }
}

/// Optional settings layered over [`TrainConfig::default`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub h: Option<usize>,
    pub top_c: Option<usize>,
    pub v_buckets: Option<usize>,
    pub t_max: Option<usize>,
    pub k_max: Option<usize>,
    pub f: Option<usize>,
    pub encoder: Option<EncoderKind>,
    pub attention: Option<AttentionMode>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub init_scale: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub use_description: Option<bool>,
}

macro_rules! layer {
    ($base:ident, $top:ident, $($field:ident),*) => {
        Overrides { $($field: $top.$field.or($base.$field)),* }
    };
}

impl Overrides {
    /// Values from `top` win over `self`.
    pub fn then(self, top: Overrides) -> Overrides {
        let base = self;
        layer!(
            base,
            top,
            h,
            top_c,
            v_buckets,
            t_max,
            k_max,
            f,
            encoder,
            attention,
            lr,
            beta1,
            beta2,
            epsilon,
            init_scale,
            batch_size,
            max_epochs,
            patience,
            seed,
            use_description
        )
    }

    pub fn apply(&self, config: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            h => config.h,
            top_c => config.top_c,
            v_buckets => config.v_buckets,
            t_max => config.t_max,
            k_max => config.k_max,
            f => config.f,
            encoder => config.encoder,
            attention => config.attention,
            lr => config.adam.lr,
            beta1 => config.adam.beta1,
            beta2 => config.adam.beta2,
            epsilon => config.adam.epsilon,
            init_scale => config.init_scale,
            batch_size => config.batch_size,
            max_epochs => config.max_epochs,
            patience => config.patience,
            seed => config.seed,
            use_description => config.use_description,
        );
    }

    pub fn resolve(&self) -> TrainConfig {
        let mut config = TrainConfig::default();
        self.apply(&mut config);
        config
    }
}

fn typed<T: FromStr>(
    key: &str,
    value: &str,
    line: usize,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::TypeError {
        key: key.to_string(),
        value: value.to_string(),
        expected,
        line,
    })
}

pub fn parse_config(text: &str) -> Result<Overrides, ConfigError> {
    let mut out = Overrides::default();
    let mut seen = std::collections::BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or(ConfigError::Syntax { line })?;
        let key = key.trim();
        let value = value.trim().trim_matches('"');
        if key.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        macro_rules! put {
            ($field:ident, $expected:literal) => {
                out.$field = Some(typed(key, value, line, $expected)?)
            };
        }
        match key {
            "h" => put!(h, "a positive integer"),
            "top_c" => put!(top_c, "a positive integer"),
            "v_buckets" => put!(v_buckets, "a positive integer"),
            "t_max" => put!(t_max, "a positive integer"),
            "k_max" => put!(k_max, "a positive integer"),
            "f" => put!(f, "a positive integer"),
            "batch_size" => put!(batch_size, "a positive integer"),
            "max_epochs" => put!(max_epochs, "a positive integer"),
            "patience" => put!(patience, "a positive integer"),
            "seed" => put!(seed, "an unsigned integer"),
            "lr" => put!(lr, "a number"),
            "beta1" => put!(beta1, "a number"),
            "beta2" => put!(beta2, "a number"),
            "epsilon" => put!(epsilon, "a number"),
            "init_scale" => put!(init_scale, "a number"),
            "use_description" => put!(use_description, "true or false"),
            "encoder" => put!(encoder, "mean-pool or mini-transformer"),
            "attention" => {
                out.attention =
                    Some(parse_attention(value).map_err(|_| ConfigError::TypeError {
                        key: key.to_string(),
                        value: value.to_string(),
                        expected: "learned or uniform",
                        line,
                    })?)
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line,
                })
            }
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Duplicate {
                key: key.to_string(),
                line,
            });
        }
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<Overrides, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_and_comments() {
        let o = parse_config("# comment\nh = 64\n\nencoder = mini-transformer # inline\nlr=0.01\nuse_description = true\n").unwrap();
        assert_eq!(o.h, Some(64));
        assert_eq!(o.encoder, Some(EncoderKind::MiniTransformer));
        assert_eq!(o.lr, Some(0.01));
        assert_eq!(o.use_description, Some(true));
        let config = o.resolve();
        assert_eq!(config.h, 64);
        assert_eq!(config.adam.lr, 0.01);
        assert_eq!(config.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn type_errors_carry_the_line() {
        match parse_config("seed = 1\nh = abc\n") {
            Err(ConfigError::TypeError { key, line, .. }) => {
                assert_eq!((key.as_str(), line), ("h", 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_config("attention = sideways"),
            Err(ConfigError::TypeError { line: 1, .. })
        ));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(matches!(
            parse_config("h = 4\nwidth = 3"),
            Err(ConfigError::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(
            parse_config("just words"),
            Err(ConfigError::Syntax { line: 1 })
        ));
        assert!(matches!(
            parse_config("h = 4\nh = 5"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn flags_override_file() {
        let file = parse_config("h = 16\nseed = 3").unwrap();
        let flags = Overrides {
            seed: Some(9),
            ..Overrides::default()
        };
        let merged = file.then(flags);
        assert_eq!((merged.h, merged.seed), (Some(16), Some(9)));
    }
}
