//! Run settings: defaults, `key = value` config files and flag overrides.
//!
//! Keys are unique across sections, so a flag `--n-s` always means the key
//! `n_s` no matter which section it lives in. Dashes and underscores are
//! interchangeable in keys.

use std::collections::BTreeMap;
use std::str::FromStr;

use spice_core::self_train::SelfTrainConfig;
use spice_core::semi::SemiTrainConfig;
use spice_core::{StrategySpec, SynthSpec, TransformConfig};

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

trait Value: Sized {
    fn parse_value(raw: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(raw: &str) -> Result<Self, String> {
                raw.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(u64, usize, f64, String);

impl<T: Value> Value for Option<T> {
    fn parse_value(raw: &str) -> Result<Self, String> {
        if raw.is_empty() || raw == "auto" {
            Ok(None)
        } else {
            T::parse_value(raw).map(Some)
        }
    }

    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "auto".into(), Value::render)
    }
}

fn parse_spec(raw: &str) -> Result<StrategySpec, ConfigError> {
    StrategySpec::from_str(raw).map_err(|e| ConfigError(e.to_string()))
}

macro_rules! settings {
    ($( $section:literal { $( $(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr ),* $(,)? } )*) => {
        /// Every tunable of a run, grouped into config-file sections.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Settings {
            pub seed: u64,
            $($( $(#[doc = $doc])* pub $key: $ty, )*)*
        }

        impl Default for Settings {
            fn default() -> Self {
                Self { seed: 0, $($( $key: $default, )*)* }
            }
        }

        impl Settings {
            /// `(section, key)` for every key, in file order.
            pub const KEYS: &'static [(&'static str, &'static str)] =
                &[("", "seed"), $($( ($section, stringify!($key)), )*)*];

            pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
                let key = key.replace('-', "_");
                let bad = |e: String| ConfigError(format!("bad value `{raw}` for `{key}`: {e}"));
                match key.as_str() {
                    "seed" => self.seed = Value::parse_value(raw).map_err(bad)?,
                    $($( stringify!($key) => self.$key = Value::parse_value(raw).map_err(bad)?, )*)*
                    _ => return Err(ConfigError(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    "seed" => Some(self.seed.render()),
                    $($( stringify!($key) => Some(self.$key.render()), )*)*
                    _ => None,
                }
            }
        }
    };
}

settings! {
    "" {
        /// Output directory for artifacts and reports.
        out: String = "spice-out".into(),
    }
    "data" {
        /// Embedding file; synthetic data is generated when unset.
        data: Option<String> = None,
        k: usize = 10,
        d: usize = 64,
        n_per_cluster: usize = 500,
        separation: f64 = 6.0,
        sigma: f64 = 1.0,
    }
    "self" {
        heads: usize = 10,
        epochs: usize = 50,
        r: f64 = 0.5,
        m: Option<usize> = None,
        m1: usize = 1000,
        m2: usize = 128,
        n: Option<usize> = None,
        loss: String = "ds-ce".into(),
        assignment: String = "overlap".into(),
        entropy_weight: f64 = 0.0,
        optimizer: String = "adam:0.001".into(),
        weak_noise: f64 = 0.0,
        strong_noise: f64 = 0.1,
        dropout: f64 = 0.1,
    }
    "select" {
        n_s: usize = 100,
        tau_c: f64 = 0.95,
    }
    "semi" {
        semi_epochs: usize = 30,
        batch: usize = 64,
        mu: usize = 7,
        tau: f64 = 0.95,
        hidden: usize = 512,
        semi_optimizer: String = "adam:0.001".into(),
        semi_weak_noise: f64 = 0.02,
        semi_strong_noise: f64 = 0.1,
        semi_dropout: f64 = 0.1,
    }
}

impl Settings {
    /// Applies a config file on top of the current values.
    pub fn merge_file_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| ConfigError(format!("config line {}: {msg}", no + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !Self::KEYS.iter().any(|(s, _)| *s == section) {
                    return Err(at(format!("unknown section [{section}]")));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim().replace('-', "_");
            match Self::KEYS.iter().find(|(_, k)| *k == key) {
                Some((home, _)) if !section.is_empty() && *home != section => {
                    return Err(at(format!("key `{key}` belongs in [{home}], not [{section}]")))
                }
                None => return Err(at(format!("unknown key `{key}`"))),
                _ => {}
            }
            self.set(&key, value.trim().trim_matches('"')).map_err(|e| at(e.0))?;
        }
        Ok(())
    }

    /// Renders a config file that reproduces these settings.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for &(section, key) in Self::KEYS {
            if section != current {
                out.push_str(&format!("\n[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {}\n", self.get(key).unwrap()));
        }
        out.trim_start().to_string()
    }

    /// Section → key → rendered value, for report echoes.
    pub fn echo(&self) -> BTreeMap<String, BTreeMap<String, String>> {
        let mut map: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for &(section, key) in Self::KEYS {
            let section = if section.is_empty() { "run" } else { section };
            map.entry(section.into())
                .or_default()
                .insert(key.into(), self.get(key).unwrap());
        }
        map
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            k: self.k,
            d: self.d,
            n_per_cluster: self.n_per_cluster,
            center_separation: self.separation,
            within_sigma: self.sigma,
        }
    }

    pub fn self_config(&self) -> Result<SelfTrainConfig, ConfigError> {
        Ok(SelfTrainConfig {
            large_batch: self.m,
            infer_chunk: self.m1,
            train_batch: self.m2,
            epochs: self.epochs,
            num_heads: self.heads,
            loss: parse_spec(&self.loss)?,
            entropy_weight: self.entropy_weight,
            confident_ratio: self.r,
            assignment: parse_spec(&self.assignment)?,
            n_per_cluster: self.n,
            transform: TransformConfig {
                weak_noise_sigma: self.weak_noise,
                strong_noise_sigma: self.strong_noise,
                strong_dropout_rate: self.dropout,
                scale: None,
            },
            optimizer: parse_spec(&self.optimizer)?,
            seed: self.seed,
            ..SelfTrainConfig::new(self.k)
        })
    }

    pub fn semi_config(&self) -> Result<SemiTrainConfig, ConfigError> {
        let cfg = SemiTrainConfig {
            batch: self.batch,
            mu: self.mu,
            tau: self.tau,
            epochs: self.semi_epochs,
            hidden: self.hidden,
            transform: TransformConfig {
                weak_noise_sigma: self.semi_weak_noise,
                strong_noise_sigma: self.semi_strong_noise,
                strong_dropout_rate: self.semi_dropout,
                scale: None,
            },
            optimizer: parse_spec(&self.semi_optimizer)?,
            seed: self.seed,
            ..SemiTrainConfig::new(self.k)
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate_select(&self) -> Result<(), ConfigError> {
        if self.n_s == 0 {
            return Err(ConfigError("n_s must be >= 1".into()));
        }
        if !(self.tau_c > 0.0 && self.tau_c <= 1.0) {
            return Err(ConfigError(format!("tau_c must lie in (0, 1], got {}", self.tau_c)));
        }
        Ok(())
    }
}

/// Reads an optional config file, then applies `(key, value)` overrides.
pub fn resolve<'a>(
    config_text: Option<&str>,
    overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<Settings, ConfigError> {
    let mut settings = Settings::default();
    if let Some(text) = config_text {
        settings.merge_file_text(text)?;
    }
    for (key, value) in overrides {
        settings.set(key, value)?;
    }
    Ok(settings)
}
