//! Synthetic re-identification data.
//!
//! Each identity is a procedural pedestrian (head, torso and legs regions
//! with identity-specific colors, textures and proportions). Every image of
//! an identity re-renders it under seeded nuisance: translation, brightness,
//! pixel noise, random occluders and a per-camera tint. Training and test
//! identities are disjoint.

mod augment;
mod io;
mod render;
mod sampler;

pub use augment::{augment, hflip, shift_crop, AugmentOps, CROP_PAD};
pub use io::{read_dataset, write_dataset, Manifest, ManifestSample, DATASET_SCHEMA_VERSION};
pub use render::Appearance;
pub use sampler::{PkBatchSpec, PkSampler};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Nuisance {
    /// Maximum translation in pixels along each axis.
    pub shift_px: usize,
    /// Brightness is scaled by a factor drawn from `1 ± brightness_jitter`.
    pub brightness_jitter: f64,
    pub noise_sigma: f64,
    pub occlusion_prob: f64,
}

impl Default for Nuisance {
    fn default() -> Self {
        Self {
            shift_px: 3,
            brightness_jitter: 0.2,
            noise_sigma: 0.05,
            occlusion_prob: 0.3,
        }
    }
}

impl Nuisance {
    pub fn none() -> Self {
        Self {
            shift_px: 0,
            brightness_jitter: 0.0,
            noise_sigma: 0.0,
            occlusion_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_train_ids: usize,
    pub n_test_ids: usize,
    /// Images per training identity.
    pub images_per_id: usize,
    /// Images per test identity, split into queries and gallery.
    pub test_images_per_id: usize,
    /// (height, width)
    pub image_hw: (usize, usize),
    pub nuisance: Nuisance,
    /// Test images per identity that become queries; the rest go to the gallery.
    pub queries_per_id: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_train_ids: 32,
            n_test_ids: 16,
            images_per_id: 16,
            test_images_per_id: 8,
            image_hw: (64, 32),
            nuisance: Nuisance::default(),
            queries_per_id: 4,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train_ids < 2 || self.n_test_ids < 1 {
            return Err(Error::InvalidSpec("need at least 2 train and 1 test identities".into()));
        }
        if self.images_per_id < 2 || self.test_images_per_id < 2 {
            return Err(Error::InvalidSpec("every identity needs at least 2 images".into()));
        }
        if self.queries_per_id == 0 || self.queries_per_id >= self.test_images_per_id {
            return Err(Error::InvalidSpec(format!(
                "queries_per_id must be in 1..{}, got {}",
                self.test_images_per_id, self.queries_per_id
            )));
        }
        let (h, w) = self.image_hw;
        if h < 16 || w < 8 {
            return Err(Error::InvalidSpec(format!("image size {h}x{w} is too small")));
        }
        let n = &self.nuisance;
        if !(0.0..=1.0).contains(&n.occlusion_prob) || n.noise_sigma < 0.0 || !(0.0..1.0).contains(&n.brightness_jitter) {
            return Err(Error::InvalidSpec("nuisance parameters out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// 3×H×W, values in [0, 1].
    pub image: Tensor,
    /// Global identity id; training identities are `0..n_train_ids`, so for
    /// them the identity doubles as the class label.
    pub identity: usize,
    pub camera: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub samples: Vec<Sample>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn n_train_ids(&self) -> usize {
        self.train_ids.len()
    }

    /// Stacks the images of `indices` into an N×3×H×W batch.
    pub fn images(&self, indices: &[usize]) -> Tensor {
        let imgs: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        Tensor::stack(&imgs).expect("dataset images share one shape")
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.train_ids.iter().any(|id| self.test_ids.contains(id)) {
            return Err(Error::InvalidInput("train and test identities overlap".into()));
        }
        for s in &self.samples {
            let ok = match s.split {
                Split::Train => self.train_ids.contains(&s.identity),
                Split::Query | Split::Gallery => self.test_ids.contains(&s.identity),
            };
            if !ok {
                return Err(Error::InvalidInput(format!(
                    "identity {} is not in the identity set of split {:?}",
                    s.identity, s.split
                )));
            }
        }
        Ok(())
    }

    /// Reassigns the labels of `fraction` of the training samples to a
    /// different, uniformly drawn training identity. Returns the indices of
    /// the corrupted samples.
    pub fn corrupt_train_labels(&mut self, fraction: f64, seed_value: u64) -> Vec<usize> {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut train = self.indices(Split::Train);
        let n = (fraction * train.len() as f64).round() as usize;
        if n == 0 {
            return Vec::new();
        }
        let mut rng = seed::rng(seed::derive(seed_value, "label-noise"));
        train.shuffle(&mut rng);
        let mut picked: Vec<usize> = train[..n].to_vec();
        picked.sort_unstable();
        let n_ids = self.train_ids.len();
        for &i in &picked {
            let old = self.samples[i].identity;
            let old_pos = self.train_ids.iter().position(|&t| t == old).expect("train sample has a train identity");
            let mut pos = rng.gen_range(0..n_ids - 1);
            if pos >= old_pos {
                pos += 1;
            }
            self.samples[i].identity = self.train_ids[pos];
        }
        picked
    }
}

/// Renders the whole dataset. A pure function of `spec` (including its seed).
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let n_ids = spec.n_train_ids + spec.n_test_ids;
    let train_ids: Vec<usize> = (0..spec.n_train_ids).collect();
    let test_ids: Vec<usize> = (spec.n_train_ids..n_ids).collect();
    let mut samples = Vec::new();
    for id in 0..n_ids {
        let look = Appearance::sample(&mut seed::rng(seed::derive_indexed(spec.seed, "identity", id as u64)));
        let is_test = id >= spec.n_train_ids;
        let count = if is_test { spec.test_images_per_id } else { spec.images_per_id };
        let id_seed = seed::derive_indexed(spec.seed, "images-of", id as u64);
        for j in 0..count {
            let camera = (j % 2) as u8;
            let image_seed = seed::derive_indexed(id_seed, "image", j as u64);
            let image = render::render(&look, camera, spec.image_hw, &spec.nuisance, image_seed);
            let split = match (is_test, j < spec.queries_per_id) {
                (false, _) => Split::Train,
                (true, true) => Split::Query,
                (true, false) => Split::Gallery,
            };
            samples.push(Sample {
                image,
                identity: id,
                camera,
                split,
            });
        }
    }
    let ds = Dataset {
        spec: spec.clone(),
        samples,
        train_ids,
        test_ids,
    };
    ds.check_invariants()?;
    Ok(ds)
}
