//! Flat `key = value` configuration with command-line overrides.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::mapping::{ObfuscationConfig, Strategy};
use crate::proxy::Role;

pub const DEFAULT_BASE_CONNECTIONS: usize = 8;

pub const KEYS: [&str; 12] = [
    "role",
    "listen",
    "peer",
    "service",
    "strategy",
    "alpha",
    "beta",
    "shuffle_threshold",
    "m_min",
    "remap_interval_ms",
    "base_connections",
    "trace_output",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("config key `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: &str, message: impl Into<String>) -> Self {
        ConfigError {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub role: Option<Role>,
    pub listen: Option<SocketAddr>,
    pub peer: Option<SocketAddr>,
    pub service: Option<SocketAddr>,
    /// `false` runs the plain 1:1 relay used as the comparison baseline.
    pub obfuscate: bool,
    pub obfuscation: ObfuscationConfig,
    pub base_connections: usize,
    pub trace_output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            role: None,
            listen: None,
            peer: None,
            service: None,
            obfuscate: true,
            obfuscation: ObfuscationConfig::default(),
            base_connections: DEFAULT_BASE_CONNECTIONS,
            trace_output: None,
        }
    }
}

impl RunConfig {
    pub fn strategy(&self) -> Strategy {
        if self.obfuscate {
            Strategy::Obfuscate(self.obfuscation.clone())
        } else {
            Strategy::Direct
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| ConfigError::new(key, format!("invalid value {value:?}: {e}")))
        }
        match key {
            "role" => {
                self.role = Some(match value {
                    "ingress" => Role::Ingress,
                    "egress" => Role::Egress,
                    _ => {
                        return Err(ConfigError::new(
                            key,
                            format!("expected ingress or egress, got {value:?}"),
                        ))
                    }
                })
            }
            "listen" => self.listen = Some(parse(key, value)?),
            "peer" => self.peer = Some(parse(key, value)?),
            "service" => self.service = Some(parse(key, value)?),
            "strategy" => {
                self.obfuscate = match value {
                    "obfuscate" => true,
                    "direct" => false,
                    _ => {
                        return Err(ConfigError::new(
                            key,
                            format!("expected obfuscate or direct, got {value:?}"),
                        ))
                    }
                }
            }
            "alpha" => self.obfuscation.alpha = parse(key, value)?,
            "beta" => self.obfuscation.beta = parse(key, value)?,
            "shuffle_threshold" => self.obfuscation.shuffle_threshold = parse(key, value)?,
            "m_min" => self.obfuscation.m_min = parse(key, value)?,
            "remap_interval_ms" => {
                self.obfuscation.remap_interval = Duration::from_millis(parse(key, value)?)
            }
            "base_connections" => self.base_connections = parse(key, value)?,
            "trace_output" => self.trace_output = Some(PathBuf::from(value)),
            _ => return Err(ConfigError::new(key, "unknown key")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        use crate::mapping::ConfigError as C;
        self.obfuscation.validate().map_err(|err| {
            let key = match err {
                C::Alpha(_) => "alpha",
                C::Beta(_) => "beta",
                C::ShuffleThreshold => "shuffle_threshold",
                C::MMin => "m_min",
                C::RemapInterval => "remap_interval_ms",
            };
            ConfigError::new(key, err.to_string())
        })?;
        if self.obfuscate && self.base_connections < self.obfuscation.m_min {
            return Err(ConfigError::new(
                "base_connections",
                format!(
                    "must be at least m_min ({}), got {}",
                    self.obfuscation.m_min, self.base_connections
                ),
            ));
        }
        Ok(())
    }

    /// Checks the addresses the given role needs.
    pub fn require_addresses(&self) -> Result<(Role, SocketAddr, SocketAddr), ConfigError> {
        let role = self
            .role
            .ok_or_else(|| ConfigError::new("role", "required"))?;
        let listen = self
            .listen
            .ok_or_else(|| ConfigError::new("listen", "required"))?;
        let target = match role {
            Role::Ingress => self
                .peer
                .ok_or_else(|| ConfigError::new("peer", "required for ingress"))?,
            Role::Egress => self
                .service
                .ok_or_else(|| ConfigError::new("service", "required for egress"))?,
        };
        Ok((role, listen, target))
    }
}

/// Parses a config file's text. Blank lines and `#` comments are skipped.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::new(
                line,
                format!("line {}: expected key = value", n + 1),
            ));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Builds a config from file text (if any) and flag overrides; overrides
/// win.
pub fn parse_config(
    file: Option<&str>,
    overrides: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let mut config = RunConfig::default();
    let from_file = match file {
        Some(text) => parse_file(text)?,
        None => Vec::new(),
    };
    for (key, value) in from_file.iter().chain(overrides) {
        config.set(key, value)?;
    }
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn empty_input_gives_defaults() {
        let c = parse_config(None, &[]).unwrap();
        assert_eq!(c.obfuscation.alpha, 0.1);
        assert_eq!(c.obfuscation.beta, 2.0);
        assert_eq!(c.obfuscation.shuffle_threshold, 4);
        assert_eq!(c.obfuscation.m_min, 3);
        assert_eq!(c.base_connections, DEFAULT_BASE_CONNECTIONS);
        assert!(c.obfuscate);
        assert_eq!(parse_config(Some("\n# nothing\n"), &[]).unwrap(), c);
    }

    #[test]
    fn rejects_alpha_out_of_range() {
        let err = parse_config(Some("alpha = 1.5"), &[]).unwrap_err();
        assert_eq!(err.key, "alpha");
    }

    #[test]
    fn flag_overrides_file() {
        let c = parse_config(Some("alpha = 0.2\nm_min = 2"), &kv(&[("alpha", "0.3")])).unwrap();
        assert_eq!(c.obfuscation.alpha, 0.3);
        assert_eq!(c.obfuscation.m_min, 2);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert_eq!(
            parse_config(Some("colour = blue"), &[]).unwrap_err().key,
            "colour"
        );
        assert_eq!(
            parse_config(Some("m_min = many"), &[]).unwrap_err().key,
            "m_min"
        );
        assert_eq!(
            parse_config(Some("listen = nowhere"), &[]).unwrap_err().key,
            "listen"
        );
        assert_eq!(
            parse_config(Some("role = middle"), &[]).unwrap_err().key,
            "role"
        );
        assert!(parse_config(Some("just words"), &[]).is_err());
        let err = parse_config(Some("base_connections = 2"), &[]).unwrap_err();
        assert_eq!(err.key, "base_connections");
    }

    #[test]
    fn full_file() {
        let text = "role = ingress\nlisten = 127.0.0.1:1080\npeer = 10.0.0.2:9000\n\
                    strategy = direct\nremap_interval_ms = 250\ntrace_output = /tmp/t.csv\n";
        let c = parse_config(Some(text), &[]).unwrap();
        assert_eq!(c.role, Some(Role::Ingress));
        assert!(!c.obfuscate);
        assert!(matches!(c.strategy(), Strategy::Direct));
        assert_eq!(c.obfuscation.remap_interval, Duration::from_millis(250));
        let (role, listen, peer) = c.require_addresses().unwrap();
        assert_eq!(role, Role::Ingress);
        assert_eq!(listen.port(), 1080);
        assert_eq!(peer.port(), 9000);
        let egress = parse_config(Some("role = egress\nlisten = 127.0.0.1:1"), &[]).unwrap();
        assert_eq!(egress.require_addresses().unwrap_err().key, "service");
    }
}
