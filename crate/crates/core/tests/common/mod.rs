#![allow(dead_code)]

use std::collections::BTreeSet;

use bonmf::data::{FeatureSet, FeatureStore, IdIndex, Modality};
use bonmf::model::{BonmfModel, FeatureInputs, ModalityMask, ModelConfig};
use bonmf::numerics::{DenseVector, RngState};

pub const TINY_USERS: usize = 3;
pub const TINY_ITEMS: usize = 4;

/// A tiny model with every parameter redrawn from N(0, 0.5) (so biases are
/// nonzero and ReLU kinks are unlikely), random features for every entity,
/// and a few training triples.
pub struct Tiny {
    pub model: BonmfModel,
    pub features: FeatureSet,
    pub examples: Vec<(usize, usize, f64)>,
}

pub fn tiny(mask: ModalityMask, seed: u64) -> Tiny {
    let mut rng = RngState::new(seed);
    let config = ModelConfig {
        id_embedding_dim: 2,
        hidden_dims: vec![4, 3],
        user_text_dim: 3,
        item_text_dim: 2,
        item_image_dim: 3,
        modality_mask: mask,
        ..ModelConfig::default()
    };
    let users = IdIndex::from_ids((0..TINY_USERS).map(|i| format!("u{i}"))).unwrap();
    let items = IdIndex::from_ids((0..TINY_ITEMS).map(|i| format!("i{i}"))).unwrap();
    let mut model = BonmfModel::new(config.clone(), users.clone(), items.clone(), seed).unwrap();
    let n = model.params_flat().len();
    let params: Vec<f64> = (0..n).map(|_| rng.gaussian(0.0, 0.5)).collect();
    model.set_params_flat(&params).unwrap();

    let mut features = FeatureSet::default();
    for modality in Modality::ALL {
        let vocab = if modality.keyed_by_user() { &users } else { &items };
        let dim = config.modality_dim(modality);
        let mut store = FeatureStore::new(modality, dim).unwrap();
        for id in vocab.ids() {
            store
                .insert(id, DenseVector::new((0..dim).map(|_| rng.gaussian(0.0, 1.0)).collect()))
                .unwrap();
        }
        features.set(store);
    }
    let examples = (0..5)
        .map(|_| (rng.below(TINY_USERS), rng.below(TINY_ITEMS), rng.uniform(1.0, 5.0)))
        .collect();
    Tiny {
        model,
        features,
        examples,
    }
}

/// Like [`tiny`], but skips seeds where some hidden pre-activation lies
/// within `1e-3` of the ReLU kink, where central differences straddle the
/// non-differentiable point.
pub fn tiny_smooth(mask: ModalityMask, seed: u64) -> Tiny {
    (0..)
        .map(|attempt| tiny(mask, seed.wrapping_mul(1000).wrapping_add(attempt)))
        .find(|t| t.min_abs_preactivation() > 1e-3)
        .unwrap()
}

impl Tiny {
    pub fn min_abs_preactivation(&self) -> f64 {
        let hidden = self.model.layers().len() - 1;
        self.examples
            .iter()
            .flat_map(|&(u, i, _)| {
                let (_, cache) = self.model.forward_example(Some(u), Some(i), &self.inputs(u, i)).unwrap();
                cache.pre_activations[..hidden]
                    .iter()
                    .flat_map(|z| z.as_slice().to_vec())
                    .collect::<Vec<_>>()
            })
            .map(f64::abs)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn inputs(&self, user: usize, item: usize) -> FeatureInputs<'_> {
        FeatureInputs::lookup(
            &self.features,
            self.model.users().id(user),
            self.model.items().id(item),
        )
    }

    /// Mean squared error of the raw (unclipped) predictions.
    pub fn loss(&self, model: &BonmfModel) -> f64 {
        self.examples
            .iter()
            .map(|&(u, i, r)| {
                let (p, _) = model.forward_example(Some(u), Some(i), &self.inputs(u, i)).unwrap();
                (p - r).powi(2)
            })
            .sum::<f64>()
            / self.examples.len() as f64
    }

    /// Analytic gradient of [`loss`](Self::loss), flattened.
    pub fn analytic_gradient(&self) -> Vec<f64> {
        let mut grads = bonmf::model::GradientSet::zeros_like(&self.model);
        for &(u, i, r) in &self.examples {
            let (p, cache) = self.model.forward_example(Some(u), Some(i), &self.inputs(u, i)).unwrap();
            let (_, dl) = bonmf::model::mse_loss(p, r);
            self.model.backward_accumulate(&cache, dl, &mut grads).unwrap();
        }
        grads.scale(1.0 / self.examples.len() as f64);
        grads.to_flat(&self.model)
    }
}

/// Precision@K by explicit set intersection.
pub fn oracle_precision(ranking: &[usize], relevant: &BTreeSet<usize>, k: usize) -> f64 {
    let top: BTreeSet<usize> = ranking.iter().take(k).copied().collect();
    top.intersection(relevant).count() as f64 / k as f64
}

/// NDCG@K with the ideal list built by sorting gains descending.
pub fn oracle_ndcg(ranking: &[usize], relevant: &BTreeSet<usize>, k: usize) -> f64 {
    let gains: Vec<f64> = ranking
        .iter()
        .map(|i| if relevant.contains(i) { 1.0 } else { 0.0 })
        .collect();
    let dcg = |g: &[f64]| -> f64 {
        g.iter()
            .take(k)
            .enumerate()
            .map(|(idx, gain)| gain / ((idx + 2) as f64).ln() * std::f64::consts::LN_2)
            .sum()
    };
    let mut ideal: Vec<f64> = vec![1.0; relevant.len()];
    ideal.extend(std::iter::repeat_n(0.0, ranking.len().saturating_sub(relevant.len())));
    ideal.sort_by(|a, b| b.total_cmp(a));
    dcg(&gains) / dcg(&ideal)
}

/// Full ordering of candidates by (score desc, index asc), via a comparison
/// sort independent of the library's ranking code.
pub fn oracle_order(scores: &[(usize, f64)]) -> Vec<usize> {
    let mut v = scores.to_vec();
    for a in 0..v.len() {
        for b in a + 1..v.len() {
            let better = v[b].1 > v[a].1 || (v[b].1 == v[a].1 && v[b].0 < v[a].0);
            if better {
                v.swap(a, b);
            }
        }
    }
    v.into_iter().map(|(i, _)| i).collect()
}
