use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::SyntheticScene;
use crate::cli::config::RunConfig;
use crate::decoder::{image_classify, AttentionMaps, CategoryQueryBank, Decoder};
use crate::error::{Error, Result};
use crate::interaction::{
    combined_integration, cosine_scores, expand_selected, gather_columns, hard_integration, soft_integration,
    static_scores, ScoreBundle,
};
use crate::losses::{image_loss, instance_base_loss, total_loss};
use crate::numcore::{ParamId, ParamStore, Tape, Tensor, Var};

/// Lower bound kept on every learnable temperature.
pub const TAU_MIN: f64 = 0.05;

const INIT_SALT: u64 = 0x51ed_270b_a1c0_ffee;
const HEAD_INIT_STD: f64 = 0.02;

/// Probabilities fed to the losses are squashed into `[PROB_EPS, 1 - PROB_EPS]`
/// so a saturated sigmoid never reaches the log's boundary.
pub const PROB_EPS: f64 = 1e-7;

fn squash(p: Var<'_>) -> Result<Var<'_>> {
    p.scale(1.0 - 2.0 * PROB_EPS)?.add_scalar(PROB_EPS)
}

/// Parameters of one model variant plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct CqlModel {
    pub config: RunConfig,
    pub store: ParamStore,
    queries: Option<ParamId>,
    decoder: Option<Decoder>,
    image_head: Option<(ParamId, ParamId)>,
    static_head: Option<(ParamId, ParamId)>,
    tau: Option<ParamId>,
}

pub struct SceneForward<'t> {
    pub image_probs: Option<Var<'t>>,
    /// Instance scores before integration, `N × K`.
    pub raw_scores: Var<'t>,
    /// Scores that feed the instance loss: `N × K`, or `N × κ` after hard integration.
    pub scores: Var<'t>,
    pub selected: Option<Vec<usize>>,
    pub maps: Option<AttentionMaps>,
}

pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub base: Var<'t>,
    pub image: Option<Var<'t>>,
}

impl CqlModel {
    /// Registers and initializes the parameters the configured components need.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ INIT_SALT);
        let mut store = ParamStore::new();
        let (k, d) = (config.k, config.d);
        let comps = config.components;

        let (queries, decoder) = if comps.uses_decoder() {
            let bank = CategoryQueryBank::random(k, d, &mut rng)?;
            let q = store.add("queries", bank.queries().clone())?;
            let dec = Decoder::register(&mut store, "decoder", &config.decoder, d, &mut rng)?;
            // Residual branches start closed, so refined queries begin equal to
            // the learned queries and image context is blended in by training.
            dec.zero_output_projections(&mut store)?;
            (Some(q), Some(dec))
        } else {
            (None, None)
        };
        let image_head = if comps.image_branch {
            let w = store.add("image_head.weight", Tensor::random_normal(vec![k, d], HEAD_INIT_STD, &mut rng))?;
            let b = store.add("image_head.bias", Tensor::zeros(vec![k]))?;
            Some((w, b))
        } else {
            None
        };
        let static_head = if comps.adaptive_weights {
            None
        } else {
            let w = store.add("static_head.weight", Tensor::random_normal(vec![k, d], HEAD_INIT_STD, &mut rng))?;
            let b = store.add("static_head.bias", Tensor::zeros(vec![k]))?;
            Some((w, b))
        };
        let tau = if comps.integration && config.integration.use_hard {
            let kappa = config.integration.effective_kappa(k);
            Some(store.add("integration.tau", Tensor::full(vec![kappa], config.integration.tau_init))?)
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            queries,
            decoder,
            image_head,
            static_head,
            tau,
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn forward<'t>(&self, tape: &'t Tape, scene: &SyntheticScene) -> Result<SceneForward<'t>> {
        if scene.instances.is_empty() {
            return Err(Error::Domain("scene has no instances".into()));
        }
        let p = |id| tape.param(&self.store, id);
        let features = tape.constant(scene.features());

        let mut refined = None;
        let mut maps = None;
        if let (Some(q), Some(dec)) = (self.queries, &self.decoder) {
            let (r, m) = dec.forward(tape, &self.store, p(q), &scene.grid)?;
            refined = Some(r);
            maps = Some(m);
        }
        let image_probs = match (self.image_head, refined) {
            (Some((w, b)), Some(r)) => Some(squash(image_classify(r, p(w), p(b))?)?),
            _ => None,
        };

        let raw_scores = match (self.static_head, refined) {
            (Some((w, b)), _) => squash(static_scores(p(w), p(b), features)?)?,
            (None, Some(r)) => cosine_scores(r, features)?,
            (None, None) => unreachable!("adaptive weights always build the decoder"),
        };

        let integ = &self.config.integration;
        let mut scores = raw_scores;
        let mut selected = None;
        if self.config.components.integration {
            let probs = image_probs.ok_or_else(|| Error::InvalidConfig("integration needs image probabilities".into()))?;
            let r = refined.expect("integration implies adaptive weights");
            if let Some(tau) = self.tau {
                let kappa = integ.effective_kappa(self.k());
                let (hard, sel) = hard_integration(features, r, &probs.value(), p(tau), kappa)?;
                scores = if integ.use_soft {
                    combined_integration(hard, &sel, probs)?
                } else {
                    hard
                };
                selected = Some(sel);
            } else if integ.use_soft {
                scores = soft_integration(raw_scores, probs)?;
            }
        }
        Ok(SceneForward {
            image_probs,
            raw_scores,
            scores,
            selected,
            maps,
        })
    }

    pub fn loss<'t>(&self, fwd: &SceneForward<'t>, scene: &SyntheticScene) -> Result<LossParts<'t>> {
        let labels = match &fwd.selected {
            Some(sel) => gather_columns(&scene.labels(), sel)?,
            None => scene.labels(),
        };
        let base = instance_base_loss(fwd.scores, &labels, self.config.loss.instance_gamma)?;
        match fwd.image_probs {
            Some(probs) if self.config.components.image_branch => {
                let img = image_loss(probs, &scene.image_labels, &self.config.loss)?;
                Ok(LossParts {
                    total: total_loss(base, img, self.config.loss.lambda)?,
                    base,
                    image: Some(img),
                })
            }
            _ => Ok(LossParts {
                total: base,
                base,
                image: None,
            }),
        }
    }

    /// Image and instance scores with dropped categories expanded to 0.
    pub fn score(&self, scene: &SyntheticScene) -> Result<ScoreBundle> {
        let tape = Tape::new();
        let fwd = self.forward(&tape, scene)?;
        let scores = fwd.scores.value();
        let integrated = match &fwd.selected {
            Some(sel) => expand_selected(&scores, sel, self.k())?,
            None => (*scores).clone(),
        };
        Ok(ScoreBundle {
            image_probs: fwd.image_probs.map(|p| (*p.value()).clone()),
            instance_scores: (*fwd.raw_scores.value()).clone(),
            integrated,
            selected: fwd.selected,
        })
    }

    pub fn attention_maps(&self, scene: &SyntheticScene) -> Result<Option<AttentionMaps>> {
        let tape = Tape::new();
        Ok(self.forward(&tape, scene)?.maps)
    }

    pub fn decoder(&self) -> Option<&Decoder> {
        self.decoder.as_ref()
    }

    pub fn tau(&self) -> Option<ParamId> {
        self.tau
    }

    /// Keeps temperatures away from zero after an optimizer update.
    pub fn clamp_temperatures(&mut self) {
        if let Some(id) = self.tau {
            for t in self.store.value_mut(id).data_mut() {
                *t = t.max(TAU_MIN);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::Components;
    use crate::harness::dataset::generate_dataset;

    fn cfg(variant: char) -> RunConfig {
        let mut c = RunConfig::default();
        c.k = 4;
        c.d = 8;
        c.h = 2;
        c.w = 2;
        c.decoder.heads = 2;
        c.decoder.ffn_hidden = 8;
        c.integration.kappa = 3;
        c.data.scenes = 3;
        c.components = Components::variant(variant).unwrap();
        c
    }

    #[test]
    fn variants_register_expected_parameters() {
        let names = |v| {
            CqlModel::new(cfg(v))
                .unwrap()
                .store
                .iter()
                .map(|p| p.name.clone())
                .collect::<Vec<_>>()
        };
        let a = names('a');
        assert_eq!(a, ["static_head.weight", "static_head.bias"]);
        let b = names('b');
        assert!(b.contains(&"queries".to_string()) && b.contains(&"static_head.weight".to_string()));
        let c = names('c');
        assert!(!c.iter().any(|n| n.starts_with("static_head")));
        let d = names('d');
        assert_eq!(d.last().unwrap(), "integration.tau");
    }

    #[test]
    fn forward_shapes_and_loss() {
        let c = cfg('d');
        let data = generate_dataset(&c.dataset_spec(), 1).unwrap();
        let model = CqlModel::new(c).unwrap();
        let scene = &data[0];
        let n = scene.instances.len();
        let tape = Tape::new();
        let fwd = model.forward(&tape, scene).unwrap();
        assert_eq!(fwd.scores.shape(), vec![n, 3]);
        assert_eq!(fwd.raw_scores.shape(), vec![n, 4]);
        let parts = model.loss(&fwd, scene).unwrap();
        assert!(parts.total.value().item() > 0.0);
        assert!(parts.image.is_some());

        let bundle = model.score(scene).unwrap();
        let sel = bundle.selected.clone().unwrap();
        let dropped = (0..4).find(|c| !sel.contains(c)).unwrap();
        for i in 0..n {
            assert_eq!(bundle.integrated.at(i, dropped), 0.0);
        }
    }

    #[test]
    fn baseline_has_no_image_loss() {
        let c = cfg('a');
        let data = generate_dataset(&c.dataset_spec(), 1).unwrap();
        let model = CqlModel::new(c).unwrap();
        let tape = Tape::new();
        let fwd = model.forward(&tape, &data[0]).unwrap();
        let parts = model.loss(&fwd, &data[0]).unwrap();
        assert!(parts.image.is_none());
        assert_eq!(parts.total.value().item(), parts.base.value().item());
    }
}
