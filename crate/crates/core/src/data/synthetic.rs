//! Planted low-rank rating data with content features derived from the
//! planted latents, so tests know exactly how much signal each modality holds.

use serde::{Deserialize, Serialize};

use super::{FeatureSet, FeatureStore, InteractionSet, Modality, RATING_MAX, RATING_MIN};
use crate::error::{Error, Result};
use crate::numerics::{dot, gaussian_init, DenseMatrix, DenseVector, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub density: f64,
    pub noise_sigma: f64,
    /// Width of the item text vectors and of the user profile vectors.
    pub text_dim: usize,
    pub image_dim: usize,
    /// Mix between the latent-derived signal (1.0) and pure noise (0.0).
    pub content_signal: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_users: 500,
            n_items: 300,
            latent_dim: 8,
            density: 0.02,
            noise_sigma: 0.1,
            text_dim: 32,
            image_dim: 4,
            content_signal: 0.9,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("synthetic spec: {msg}")));
        for (name, v) in [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("latent_dim", self.latent_dim),
            ("text_dim", self.text_dim),
            ("image_dim", self.image_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return bad(format!("density must lie in (0, 1], got {}", self.density));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.content_signal) {
            return bad(format!("content_signal must lie in [0, 1], got {}", self.content_signal));
        }
        if self.density * ((self.n_users * self.n_items) as f64) < 1.0 {
            return bad("density * n_users * n_items must be at least 1".into());
        }
        Ok(())
    }
}

/// The generating parameters. Row `i` of `user_latents` belongs to user id
/// `u{i}`, row `j` of `item_latents` to item id `m{j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub user_latents: DenseMatrix,
    pub item_latents: DenseMatrix,
    pub text_map: DenseMatrix,
    pub image_map: DenseMatrix,
    pub profile_map: DenseMatrix,
}

impl PlantedTruth {
    /// Noise-free, clipped rating for a (user row, item row) pair.
    pub fn rating(&self, user: usize, item: usize) -> f64 {
        (3.0 + dot(self.user_latents.row(user), self.item_latents.row(item))).clamp(RATING_MIN, RATING_MAX)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub interactions: InteractionSet,
    pub features: FeatureSet,
    pub truth: PlantedTruth,
}

pub fn user_id(i: usize) -> String {
    format!("u{i}")
}

pub fn item_id(j: usize) -> String {
    format!("m{j}")
}

// `signal * (map * latent) + (1 - signal) * noise`, rounded to f32 precision
// so the binary and text encodings of the store are identical.
fn content_vector(map: &DenseMatrix, latent: &[f64], signal: f64, rng: &mut RngState) -> DenseVector {
    DenseVector::new(
        (0..map.rows())
            .map(|r| {
                let v = signal * dot(map.row(r), latent) + (1.0 - signal) * rng.gaussian(0.0, 1.0);
                v as f32 as f64
            })
            .collect(),
    )
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let root = RngState::new(spec.seed);
    let latent_std = 1.0 / (spec.latent_dim as f64).sqrt();
    let user_latents = gaussian_init(spec.n_users, spec.latent_dim, latent_std, &mut root.fork(0));
    let item_latents = gaussian_init(spec.n_items, spec.latent_dim, latent_std, &mut root.fork(1));
    let text_map = gaussian_init(spec.text_dim, spec.latent_dim, 1.0, &mut root.fork(2));
    let image_map = gaussian_init(spec.image_dim, spec.latent_dim, 1.0, &mut root.fork(3));
    let profile_map = gaussian_init(spec.text_dim, spec.latent_dim, 1.0, &mut root.fork(4));

    let mut observe = root.fork(5);
    let mut interactions = InteractionSet::new();
    for u in 0..spec.n_users {
        for i in 0..spec.n_items {
            if observe.unit() >= spec.density {
                continue;
            }
            let noise = observe.gaussian(0.0, spec.noise_sigma);
            let raw = 3.0 + dot(user_latents.row(u), item_latents.row(i)) + noise;
            interactions.push(&user_id(u), &item_id(i), raw.clamp(RATING_MIN, RATING_MAX), None, 0)?;
        }
    }
    if interactions.is_empty() {
        return Err(Error::EmptyData("synthetic spec produced no observed interactions".into()));
    }

    let mut text = FeatureStore::new(Modality::ItemText, spec.text_dim)?;
    let mut image = FeatureStore::new(Modality::ItemImage, spec.image_dim)?;
    let mut profile = FeatureStore::new(Modality::UserProfile, spec.text_dim)?;
    let (mut text_rng, mut image_rng, mut profile_rng) = (root.fork(6), root.fork(7), root.fork(8));
    for i in 0..spec.n_items {
        let v = item_latents.row(i);
        text.insert(&item_id(i), content_vector(&text_map, v, spec.content_signal, &mut text_rng))?;
        image.insert(&item_id(i), content_vector(&image_map, v, spec.content_signal, &mut image_rng))?;
    }
    for u in 0..spec.n_users {
        let v = user_latents.row(u);
        profile.insert(&user_id(u), content_vector(&profile_map, v, spec.content_signal, &mut profile_rng))?;
    }

    Ok(SyntheticData {
        interactions,
        features: FeatureSet {
            user_profile: Some(profile),
            item_text: Some(text),
            item_image: Some(image),
        },
        truth: PlantedTruth {
            user_latents,
            item_latents,
            text_map,
            image_map,
            profile_map,
        },
    })
}
