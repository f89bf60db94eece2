//! Line-oriented `key=value` run configuration.
//!
//! `#` starts a comment, blank lines are ignored, and every key not present
//! keeps its default. Unknown keys and unparsable values are rejected with
//! the offending line number.

use std::path::Path;
use std::str::FromStr;

use crate::decoder::{DecoderConfig, LayerOrder};
use crate::error::{Error, Result};
use crate::harness::dataset::DatasetSpec;
use crate::interaction::IntegrationConfig;
use crate::losses::{ImageLossKind, LossConfig};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "CQL_SEED";

/// Which of the three method components are active.
///
/// `image_branch` adds the queries, decoder and image-level loss as an
/// auxiliary task; `adaptive_weights` classifies instances by cosine
/// similarity to the refined queries instead of a static head;
/// `integration` modulates instance scores with image probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct Components {
    pub image_branch: bool,
    pub adaptive_weights: bool,
    pub integration: bool,
}

impl Components {
    pub const ALL: Self = Self {
        image_branch: true,
        adaptive_weights: true,
        integration: true,
    };

    /// Cumulative variants `a` (baseline) through `d` (all components).
    pub fn variant(letter: char) -> Option<Self> {
        let n = match letter {
            'a' => 0,
            'b' => 1,
            'c' => 2,
            'd' => 3,
            _ => return None,
        };
        Some(Self {
            image_branch: n >= 1,
            adaptive_weights: n >= 2,
            integration: n >= 3,
        })
    }

    pub fn uses_decoder(&self) -> bool {
        self.image_branch || self.adaptive_weights
    }

    pub fn validate(&self) -> Result<()> {
        if self.integration && !(self.image_branch && self.adaptive_weights) {
            return Err(Error::InvalidConfig(
                "score integration requires components.c1 and components.c2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 500,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scenes: usize,
    pub test_scenes: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    pub noise_std: f64,
    pub token_noise_std: f64,
    pub context_mix: f64,
    pub density: Vec<f64>,
    pub extra_label_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            test_scenes: 100,
            instances_min: 1,
            instances_max: 8,
            noise_std: 0.3,
            token_noise_std: 0.1,
            context_mix: 0.5,
            density: vec![0.4, 0.2, 0.12, 0.1, 0.08, 0.05, 0.05],
            extra_label_prob: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub k: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub integration: IntegrationConfig,
    pub components: Components,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            k: 8,
            d: 16,
            h: 4,
            w: 4,
            decoder: DecoderConfig {
                ffn_hidden: 32,
                ..DecoderConfig::default()
            },
            loss: LossConfig::default(),
            integration: IntegrationConfig::default(),
            components: Components::ALL,
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            out_dir: "out".into(),
        };
        cfg.resolve();
        cfg
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| Error::TypeError {
        line,
        key: key.to_string(),
        msg: e.to_string(),
    })
}

fn parse_bool(line: usize, key: &str, raw: &str) -> Result<bool> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::TypeError {
            line,
            key: key.to_string(),
            msg: format!("expected a boolean, got `{raw}`"),
        }),
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses configuration text; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.integration.kappa = IntegrationConfig::default().kappa;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Malformed {
                line,
                text: raw.to_string(),
            })?;
            cfg.set(line, key.trim(), value.trim())?;
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.display().to_string()),
            _ => Error::Io(e.to_string()),
        })?;
        Self::parse(&text)
    }

    /// Applies `CQL_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}=`{raw}` is not an integer")))?;
        }
        Ok(())
    }

    /// Clamps derived values; hard integration never keeps more than K categories.
    fn resolve(&mut self) {
        self.integration.kappa = self.integration.effective_kappa(self.k);
    }

    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(line, key, v)?,
            "k" => self.k = parse_value(line, key, v)?,
            "d" => self.d = parse_value(line, key, v)?,
            "h" => self.h = parse_value(line, key, v)?,
            "w" => self.w = parse_value(line, key, v)?,
            "decoder.depth" => self.decoder.depth = parse_value(line, key, v)?,
            "decoder.order" => {
                self.decoder.order = v.parse::<LayerOrder>().map_err(|e| Error::TypeError {
                    line,
                    key: key.into(),
                    msg: e.to_string(),
                })?
            }
            "decoder.heads" => self.decoder.heads = parse_value(line, key, v)?,
            "decoder.ffn_hidden" => self.decoder.ffn_hidden = parse_value(line, key, v)?,
            "decoder.positional" => self.decoder.positional = parse_bool(line, key, v)?,
            "loss.kind" => {
                self.loss.kind = v.parse::<ImageLossKind>().map_err(|e| Error::TypeError {
                    line,
                    key: key.into(),
                    msg: e.to_string(),
                })?
            }
            "loss.gamma_pos" => self.loss.gamma_pos = parse_value(line, key, v)?,
            "loss.gamma_neg" => self.loss.gamma_neg = parse_value(line, key, v)?,
            "loss.margin" => self.loss.margin = parse_value(line, key, v)?,
            "loss.lambda" | "lambda" => self.loss.lambda = parse_value(line, key, v)?,
            "loss.focal_gamma" => self.loss.focal_gamma = parse_value(line, key, v)?,
            "loss.instance_gamma" => self.loss.instance_gamma = parse_value(line, key, v)?,
            "integration.kappa" => self.integration.kappa = parse_value(line, key, v)?,
            "integration.tau_init" => self.integration.tau_init = parse_value(line, key, v)?,
            "integration.hard" => self.integration.use_hard = parse_bool(line, key, v)?,
            "integration.soft" => self.integration.use_soft = parse_bool(line, key, v)?,
            "components.c1" => self.components.image_branch = parse_bool(line, key, v)?,
            "components.c2" => self.components.adaptive_weights = parse_bool(line, key, v)?,
            "components.c3" => self.components.integration = parse_bool(line, key, v)?,
            "components.variant" => {
                let letter = v.chars().next().filter(|_| v.len() == 1);
                self.components = letter.and_then(Components::variant).ok_or_else(|| Error::TypeError {
                    line,
                    key: key.into(),
                    msg: format!("expected one of a, b, c, d; got `{v}`"),
                })?
            }
            "optim.lr" => self.optim.lr = parse_value(line, key, v)?,
            "optim.steps" => self.optim.steps = parse_value(line, key, v)?,
            "optim.beta1" => self.optim.beta1 = parse_value(line, key, v)?,
            "optim.beta2" => self.optim.beta2 = parse_value(line, key, v)?,
            "optim.eps" => self.optim.eps = parse_value(line, key, v)?,
            "data.scenes" => self.data.scenes = parse_value(line, key, v)?,
            "data.test_scenes" => self.data.test_scenes = parse_value(line, key, v)?,
            "data.instances_min" => self.data.instances_min = parse_value(line, key, v)?,
            "data.instances_max" => self.data.instances_max = parse_value(line, key, v)?,
            "data.noise_std" => self.data.noise_std = parse_value(line, key, v)?,
            "data.token_noise_std" => self.data.token_noise_std = parse_value(line, key, v)?,
            "data.context_mix" => self.data.context_mix = parse_value(line, key, v)?,
            "data.density" => {
                self.data.density = v
                    .split(',')
                    .map(|x| parse_value::<f64>(line, key, x.trim()))
                    .collect::<Result<_>>()?
            }
            "data.extra_label_prob" => self.data.extra_label_prob = parse_value(line, key, v)?,
            "paths.out_dir" => self.out_dir = v.to_string(),
            _ => {
                return Err(Error::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidConfig("k, d, h and w must all be >= 1".into()));
        }
        self.decoder.validate(self.d)?;
        self.loss.validate()?;
        self.integration.validate()?;
        self.components.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::InvalidConfig("optimizer hyperparameters out of range".into()));
        }
        self.dataset_spec().validate()
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            k: self.k,
            d: self.d,
            h: self.h,
            w: self.w,
            scenes: self.data.scenes,
            instances_min: self.data.instances_min,
            instances_max: self.data.instances_max,
            noise_std: self.data.noise_std,
            token_noise_std: self.data.token_noise_std,
            context_mix: self.data.context_mix,
            density: self.data.density.clone(),
            extra_label_prob: self.data.extra_label_prob,
            prototypes: None,
        }
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("k", self.k.to_string()),
            ("d", self.d.to_string()),
            ("h", self.h.to_string()),
            ("w", self.w.to_string()),
            ("decoder.depth", self.decoder.depth.to_string()),
            ("decoder.order", self.decoder.order.to_string()),
            ("decoder.heads", self.decoder.heads.to_string()),
            ("decoder.ffn_hidden", self.decoder.ffn_hidden.to_string()),
            ("decoder.positional", self.decoder.positional.to_string()),
            ("loss.kind", self.loss.kind.to_string()),
            ("loss.gamma_pos", self.loss.gamma_pos.to_string()),
            ("loss.gamma_neg", self.loss.gamma_neg.to_string()),
            ("loss.margin", self.loss.margin.to_string()),
            ("loss.lambda", self.loss.lambda.to_string()),
            ("loss.focal_gamma", self.loss.focal_gamma.to_string()),
            ("loss.instance_gamma", self.loss.instance_gamma.to_string()),
            ("integration.kappa", self.integration.kappa.to_string()),
            ("integration.tau_init", self.integration.tau_init.to_string()),
            ("integration.hard", self.integration.use_hard.to_string()),
            ("integration.soft", self.integration.use_soft.to_string()),
            ("components.c1", self.components.image_branch.to_string()),
            ("components.c2", self.components.adaptive_weights.to_string()),
            ("components.c3", self.components.integration.to_string()),
            ("optim.lr", self.optim.lr.to_string()),
            ("optim.steps", self.optim.steps.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("data.scenes", self.data.scenes.to_string()),
            ("data.test_scenes", self.data.test_scenes.to_string()),
            ("data.instances_min", self.data.instances_min.to_string()),
            ("data.instances_max", self.data.instances_max.to_string()),
            ("data.noise_std", self.data.noise_std.to_string()),
            ("data.token_noise_std", self.data.token_noise_std.to_string()),
            ("data.context_mix", self.data.context_mix.to_string()),
            ("data.density", join(&self.data.density)),
            ("data.extra_label_prob", self.data.extra_label_prob.to_string()),
            ("paths.out_dir", self.out_dir.clone()),
        ]
    }

    /// Serializes to the text format accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map = self
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
            .collect();
        serde_json::Value::Object(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.decoder.depth, 2);
        assert_eq!(cfg.decoder.order.to_string(), "C,S,F");
        assert_eq!(cfg.loss.lambda, 1.0);
        assert_eq!(cfg.loss.gamma_pos, 0.0);
        assert_eq!(cfg.loss.gamma_neg, 4.0);
        assert_eq!(cfg.loss.margin, 0.05);
        assert_eq!(cfg.integration.kappa, 70usize.min(cfg.k));
        assert_eq!(cfg.components, Components::ALL);
    }

    #[test]
    fn kappa_resolves_against_k() {
        let cfg = RunConfig::parse("k=117\n").unwrap();
        assert_eq!(cfg.integration.kappa, 70);
        let cfg = RunConfig::parse("k=117\nintegration.kappa=200\n").unwrap();
        assert_eq!(cfg.integration.kappa, 117);
        let cfg = RunConfig::parse("k=29\n").unwrap();
        assert_eq!(cfg.integration.kappa, 29);
    }

    #[test]
    fn lambda_and_comments() {
        let cfg = RunConfig::parse("# comment\nlambda=1.5  # trailing\n\nloss.kind = focal\n").unwrap();
        assert_eq!(cfg.loss.lambda, 1.5);
        assert_eq!(cfg.loss.kind, ImageLossKind::Focal);
    }

    #[test]
    fn errors_name_the_line() {
        match RunConfig::parse("seed=1\ndecoder.order=X\n") {
            Err(Error::TypeError { line, key, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(key, "decoder.order");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            RunConfig::parse("bogus=1"),
            Err(Error::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("\nseed=abc"),
            Err(Error::TypeError { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse("seed"),
            Err(Error::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::from_file("/nonexistent/cql.cfg"),
            Err(Error::FileNotFound(_))
        ));
    }

    #[test]
    fn variants_are_cumulative() {
        let cfg = RunConfig::parse("components.variant=b").unwrap();
        assert!(cfg.components.image_branch && !cfg.components.adaptive_weights);
        assert!(RunConfig::parse("components.c2=false").is_err());
        assert!(RunConfig::parse("components.variant=e").is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(
            seed in any::<u64>(),
            lambda in 0.0f64..4.0,
            lr in 1e-5f64..1e-1,
            depth in 0usize..4,
            order in prop::sample::select(vec!["C,S,F", "S,C,F", "C,F", "F"]),
        ) {
            let mut cfg = RunConfig::default();
            cfg.seed = seed;
            cfg.loss.lambda = lambda;
            cfg.optim.lr = lr;
            cfg.decoder.depth = depth;
            cfg.decoder.order = order.parse().unwrap();
            let back = RunConfig::parse(&cfg.to_text()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
