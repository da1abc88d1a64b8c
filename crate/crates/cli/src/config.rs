//! Optional TOML configuration merged under command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

/// Keys accepted in the configuration file. Every key mirrors a shared flag.
#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub flows: Option<u64>,
    pub batch: Option<usize>,
    pub sample_interval: Option<u32>,
    /// Comma-separated list, e.g. `"fifo:100,fq-codel"`.
    pub qdisc: Option<String>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("bad config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_kebab_keys() {
        let c =
            FileConfig::parse("seed = 7\nalpha = 0.5\nsample-interval = 4\nqdisc = \"fifo:100,fq-codel\"\n").unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.alpha, Some(0.5));
        assert_eq!(c.sample_interval, Some(4));
        assert_eq!(c.qdisc.as_deref(), Some("fifo:100,fq-codel"));
        assert_eq!(c.flows, None);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(FileConfig::parse("sed = 1\n").is_err());
    }
}
