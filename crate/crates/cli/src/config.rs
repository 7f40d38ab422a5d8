use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;
use trajgen_core::metrics::ContrastiveConfig;
use trajgen_core::model::{ModelConfig, Sampler, Schedule};
use trajgen_core::preprocess::{CleaningConfig, KalmanConfig};
use trajgen_core::synth::SynthConfig;
use trajgen_core::tagging::TagThresholds;

/// Everything a config file can set. Missing tables fall back to defaults;
/// command-line flags override both.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthConfig,
    pub cleaning: CleaningConfig,
    pub kalman: KalmanConfig,
    pub tagging: TagThresholds,
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub generate: GenerateConfig,
    pub contrastive: ContrastiveConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub sampler: String,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { sampler: "nucleus:0.9".into(), temperature: 1.0, seed: 0 }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Config = toml::from_str(&text).with_context(|| format!("config {}", path.display()))?;
        cfg.synth.validate().context("config [synth]")?;
        cfg.cleaning.validate().context("config [cleaning]")?;
        cfg.kalman.validate().context("config [kalman]")?;
        cfg.tagging.validate().context("config [tagging]")?;
        cfg.model.validate().context("config [model]")?;
        cfg.schedule.validate().context("config [schedule]")?;
        parse_sampler(&cfg.generate.sampler).context("config [generate].sampler")?;
        Ok(cfg)
    }
}

/// `greedy`, `top-k:K` or `nucleus:P`.
pub fn parse_sampler(s: &str) -> Result<Sampler> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    let sampler = match kind {
        "greedy" if arg.is_empty() => Sampler::Greedy,
        "top-k" => Sampler::TopK(arg.parse().with_context(|| format!("bad k in sampler {s:?}"))?),
        "nucleus" => Sampler::Nucleus(arg.parse().with_context(|| format!("bad p in sampler {s:?}"))?),
        _ => anyhow::bail!("unknown sampler {s:?}; expected greedy, top-k:K or nucleus:P"),
    };
    Ok(sampler)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samplers_parse() {
        assert_eq!(parse_sampler("greedy").unwrap(), Sampler::Greedy);
        assert_eq!(parse_sampler("top-k:5").unwrap(), Sampler::TopK(5));
        assert_eq!(parse_sampler("nucleus:0.9").unwrap(), Sampler::Nucleus(0.9));
        assert!(parse_sampler("beam:4").is_err());
        assert!(parse_sampler("top-k:x").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: Config = toml::from_str("[schedule]\nepochs = 7\n[model]\nlayers = 2\n").unwrap();
        assert_eq!(cfg.schedule.epochs, 7);
        assert_eq!(cfg.schedule.lr, Schedule::default().lr);
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.model.latent_dim, ModelConfig::default().latent_dim);
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let err = toml::from_str::<Config>("[schedule]\nepochz = 7\n").unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
        let err = toml::from_str::<Config>("[modle]\n").unwrap_err().to_string();
        assert!(err.contains("modle"), "{err}");
    }
}
