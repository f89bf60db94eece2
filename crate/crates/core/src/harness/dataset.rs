//! Seeded synthetic scenes with planted image-level context.
//!
//! Each category has a unit-norm prototype. An instance feature is the mean
//! of its labelled prototypes plus Gaussian noise. The image tokens receive
//! every instance's clean evidence at a random cell, a pooled copy of all
//! evidence mixed into every cell, and their own noise, so the image carries
//! more category information than any single instance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};

use crate::decoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::interaction::{BBox, InstanceRecord};
use crate::numcore::Tensor;

/// Side length of the square canvas boxes are drawn on.
pub const CANVAS: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub k: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub scenes: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    pub noise_std: f64,
    pub token_noise_std: f64,
    pub context_mix: f64,
    /// Relative weights of per-category instance counts `1..=density.len()`.
    pub density: Vec<f64>,
    pub extra_label_prob: f64,
    /// `K × D` prototypes; drawn from the seed when absent.
    pub prototypes: Option<Tensor>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.k == 0 || self.d == 0 || self.h == 0 || self.w == 0 || self.scenes == 0 {
            return bad("k, d, h, w and scenes must be >= 1");
        }
        if self.instances_min == 0 || self.instances_min > self.instances_max {
            return bad("need 1 <= instances_min <= instances_max");
        }
        if !(self.noise_std >= 0.0) || !(self.token_noise_std >= 0.0) || !(self.context_mix >= 0.0) {
            return bad("noise and context scales must be >= 0");
        }
        if self.density.is_empty() || self.density.iter().any(|&w| !(w >= 0.0)) || self.density.iter().sum::<f64>() <= 0.0 {
            return bad("density needs non-negative weights with a positive sum");
        }
        if !(0.0..=1.0).contains(&self.extra_label_prob) {
            return bad("extra_label_prob must be in [0, 1]");
        }
        if let Some(p) = &self.prototypes {
            if p.shape() != [self.k, self.d] {
                return bad("prototypes must be K x D");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub grid: FeatureGrid,
    pub instances: Vec<InstanceRecord>,
    pub image_labels: Tensor,
}

impl SyntheticScene {
    /// Stacked instance features, `N × D`.
    pub fn features(&self) -> Tensor {
        let d = self.instances[0].feature.numel();
        let data = self.instances.iter().flat_map(|i| i.feature.data().iter().copied()).collect();
        Tensor::new(vec![self.instances.len(), d], data).expect("instance features are finite")
    }

    /// Stacked instance labels, `N × K`.
    pub fn labels(&self) -> Tensor {
        let k = self.image_labels.numel();
        let data = self.instances.iter().flat_map(|i| i.labels.data().iter().copied()).collect();
        Tensor::new(vec![self.instances.len(), k], data).expect("labels are finite")
    }

    /// Number of instances carrying category `k`.
    pub fn count(&self, k: usize) -> usize {
        self.instances.iter().filter(|i| i.labels.data()[k] == 1.0).count()
    }
}

/// Random unit-norm prototypes, one row per category.
pub fn category_prototypes(k: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut t = Tensor::random_normal(vec![k, d], 1.0, &mut rng);
    for r in 0..k {
        let row = &mut t.data_mut()[r * d..(r + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let (w, h) = (rng.gen_range(5.0..30.0), rng.gen_range(5.0..30.0));
    let x1 = rng.gen_range(0.0..CANVAS - w);
    let y1 = rng.gen_range(0.0..CANVAS - h);
    BBox([x1, y1, x1 + w, y1 + h])
}

pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Vec<SyntheticScene>> {
    spec.validate()?;
    let (k, d) = (spec.k, spec.d);
    let protos = spec.prototypes.clone().unwrap_or_else(|| category_prototypes(k, d, seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts_dist = WeightedIndex::new(&spec.density).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let feat_noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let tok_noise = Normal::new(0.0, spec.token_noise_std).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let cells = spec.h * spec.w;

    let mut scenes = Vec::with_capacity(spec.scenes);
    for _ in 0..spec.scenes {
        let total = rng.gen_range(spec.instances_min..=spec.instances_max);
        let mut counts = vec![0usize; k];
        let mut assigned = 0;
        while assigned < total {
            let inactive: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
            let (c, n) = match inactive.choose(&mut rng) {
                Some(&c) => (c, counts_dist.sample(&mut rng) + 1),
                None => (rng.gen_range(0..k), 1),
            };
            let n = n.min(total - assigned);
            counts[c] += n;
            assigned += n;
        }
        let active: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();

        let mut label_sets = Vec::with_capacity(total);
        for &c in &active {
            for _ in 0..counts[c] {
                let mut set = vec![c];
                if active.len() > 1 && rng.gen_bool(spec.extra_label_prob) {
                    let others: Vec<usize> = active.iter().copied().filter(|&o| o != c).collect();
                    set.push(*others.choose(&mut rng).expect("at least one other category"));
                }
                label_sets.push(set);
            }
        }
        label_sets.shuffle(&mut rng);

        let mut tokens = vec![0.0; cells * d];
        let mut pooled = vec![0.0; d];
        let mut instances = Vec::with_capacity(total);
        for set in &label_sets {
            let mut signal = vec![0.0; d];
            for &c in set {
                for (s, p) in signal.iter_mut().zip(protos.row(c)) {
                    *s += p;
                }
            }
            signal.iter_mut().for_each(|s| *s /= set.len() as f64);
            let feature: Vec<f64> = signal
                .iter()
                .map(|&s| if spec.noise_std > 0.0 { s + feat_noise.sample(&mut rng) } else { s })
                .collect();
            let cell = rng.gen_range(0..cells);
            for j in 0..d {
                tokens[cell * d + j] += signal[j];
                pooled[j] += signal[j] / total as f64;
            }
            let mut labels = vec![0.0; k];
            set.iter().for_each(|&c| labels[c] = 1.0);
            instances.push(InstanceRecord {
                feature: Tensor::vector(feature)?,
                human_box: random_box(&mut rng),
                object_box: random_box(&mut rng),
                labels: Tensor::vector(labels)?,
                confidence: rng.gen_range(0.5..1.0),
            });
        }
        for cell in 0..cells {
            for j in 0..d {
                let noise = if spec.token_noise_std > 0.0 { tok_noise.sample(&mut rng) } else { 0.0 };
                tokens[cell * d + j] += spec.context_mix * pooled[j] + noise;
            }
        }
        let mut image_labels = vec![0.0; k];
        active.iter().for_each(|&c| image_labels[c] = 1.0);
        scenes.push(SyntheticScene {
            grid: FeatureGrid::new(Tensor::new(vec![cells, d], tokens)?, spec.h, spec.w)?,
            instances,
            image_labels: Tensor::vector(image_labels)?,
        });
    }
    Ok(scenes)
}
