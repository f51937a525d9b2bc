//! The fused-feature neural matrix factorization predictor.
//!
//! Input to the MLP is the concatenation, in this fixed order, of every
//! enabled block:
//!
//! ```text
//! [user_profile | item_text | item_image | user ID embedding | item ID embedding]
//! ```
//!
//! Hidden layers are affine + ReLU, the output layer is affine with a single
//! unit. Feature vectors are frozen inputs; only the ID tables and the MLP
//! are trainable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSet, IdIndex, Modality, RATING_MAX, RATING_MIN};
use crate::error::{Error, Result};
use crate::numerics::{
    affine_backward_accumulate, affine_forward, gaussian_init, relu, relu_backward, xavier_init,
    DenseMatrix, DenseVector, RngState,
};

pub const EMBEDDING_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityMask {
    pub use_item_text: bool,
    pub use_item_image: bool,
    pub use_user_profile: bool,
    pub use_id_embeddings: bool,
}

impl ModalityMask {
    pub const ALL: ModalityMask = ModalityMask {
        use_item_text: true,
        use_item_image: true,
        use_user_profile: true,
        use_id_embeddings: true,
    };

    pub fn uses(&self, modality: Modality) -> bool {
        match modality {
            Modality::ItemText => self.use_item_text,
            Modality::ItemImage => self.use_item_image,
            Modality::UserProfile => self.use_user_profile,
        }
    }

    pub fn any(&self) -> bool {
        self.use_item_text || self.use_item_image || self.use_user_profile || self.use_id_embeddings
    }

    /// All 15 non-empty masks.
    pub fn all_non_empty() -> Vec<ModalityMask> {
        (1u8..16)
            .map(|bits| ModalityMask {
                use_user_profile: bits & 1 != 0,
                use_item_text: bits & 2 != 0,
                use_item_image: bits & 4 != 0,
                use_id_embeddings: bits & 8 != 0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub id_embedding_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub user_text_dim: usize,
    pub item_text_dim: usize,
    pub item_image_dim: usize,
    pub modality_mask: ModalityMask,
    pub rating_min: f64,
    pub rating_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            id_embedding_dim: 50,
            hidden_dims: vec![128, 64],
            user_text_dim: 769,
            item_text_dim: 769,
            item_image_dim: 768,
            modality_mask: ModalityMask::ALL,
            rating_min: RATING_MIN,
            rating_max: RATING_MAX,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return bad("hidden_dims must be non-empty with every width >= 1");
        }
        let m = &self.modality_mask;
        if !m.any() {
            return bad("at least one modality must be enabled");
        }
        if (m.use_id_embeddings && self.id_embedding_dim == 0)
            || (m.use_user_profile && self.user_text_dim == 0)
            || (m.use_item_text && self.item_text_dim == 0)
            || (m.use_item_image && self.item_image_dim == 0)
        {
            return bad("enabled blocks need a width of at least 1");
        }
        if !(self.rating_min < self.rating_max) {
            return bad("rating_min must be below rating_max");
        }
        Ok(())
    }

    pub fn modality_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::UserProfile => self.user_text_dim,
            Modality::ItemText => self.item_text_dim,
            Modality::ItemImage => self.item_image_dim,
        }
    }

    fn id_width(&self) -> usize {
        if self.modality_mask.use_id_embeddings {
            self.id_embedding_dim
        } else {
            0
        }
    }

    /// Same architecture with one block switched off.
    pub fn without(&self, modality: Modality) -> ModelConfig {
        let mut out = self.clone();
        match modality {
            Modality::ItemText => out.modality_mask.use_item_text = false,
            Modality::ItemImage => out.modality_mask.use_item_image = false,
            Modality::UserProfile => out.modality_mask.use_user_profile = false,
        }
        out
    }
}

/// Width of the concatenated MLP input.
pub fn fusion_width(config: &ModelConfig) -> usize {
    Modality::ALL
        .iter()
        .filter(|&&m| config.modality_mask.uses(m))
        .map(|&m| config.modality_dim(m))
        .sum::<usize>()
        + 2 * config.id_width()
}

/// The ID-only baseline: every content block disabled.
pub fn nmd_config(id_embedding_dim: usize, hidden_dims: Vec<usize>) -> ModelConfig {
    ModelConfig {
        id_embedding_dim,
        hidden_dims,
        modality_mask: ModalityMask {
            use_item_text: false,
            use_item_image: false,
            use_user_profile: false,
            use_id_embeddings: true,
        },
        ..ModelConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub bias: DenseVector,
}

/// Borrowed content vectors for one (user, item) pair.
#[derive(Debug, Clone, Copy, Default)]
pub struct FeatureInputs<'a> {
    pub user_profile: Option<&'a DenseVector>,
    pub item_text: Option<&'a DenseVector>,
    pub item_image: Option<&'a DenseVector>,
}

impl<'a> FeatureInputs<'a> {
    fn get(&self, modality: Modality) -> Option<&'a DenseVector> {
        match modality {
            Modality::UserProfile => self.user_profile,
            Modality::ItemText => self.item_text,
            Modality::ItemImage => self.item_image,
        }
    }

    pub fn lookup(features: &'a FeatureSet, user_id: &str, item_id: &str) -> Self {
        FeatureInputs {
            user_profile: features.vector(Modality::UserProfile, user_id),
            item_text: features.vector(Modality::ItemText, item_id),
            item_image: features.vector(Modality::ItemImage, item_id),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    pub user: Option<usize>,
    pub item: Option<usize>,
    /// `layer_inputs[0]` is the fused vector.
    pub layer_inputs: Vec<DenseVector>,
    pub pre_activations: Vec<DenseVector>,
}

/// Gradients of one or more examples. Only touched embedding rows are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Layer>,
    pub user_rows: BTreeMap<usize, Vec<f64>>,
    pub item_rows: BTreeMap<usize, Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(model: &BonmfModel) -> Self {
        GradientSet {
            layers: model
                .layers
                .iter()
                .map(|l| Layer {
                    weights: DenseMatrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: DenseVector::zeros(l.bias.len()),
                })
                .collect(),
            user_rows: BTreeMap::new(),
            item_rows: BTreeMap::new(),
        }
    }

    /// `self += other`, in a fixed order.
    pub fn add(&mut self, other: &GradientSet) {
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            crate::numerics::axpy(1.0, theirs.weights.as_slice(), mine.weights.as_mut_slice());
            crate::numerics::axpy(1.0, theirs.bias.as_slice(), mine.bias.as_mut_slice());
        }
        for (mine, theirs) in [
            (&mut self.user_rows, &other.user_rows),
            (&mut self.item_rows, &other.item_rows),
        ] {
            for (&row, g) in theirs {
                let entry = mine.entry(row).or_insert_with(|| vec![0.0; g.len()]);
                crate::numerics::axpy(1.0, g, entry);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.as_mut_slice().iter_mut().for_each(|g| *g *= factor);
            l.bias.as_mut_slice().iter_mut().for_each(|g| *g *= factor);
        }
        for rows in [&mut self.user_rows, &mut self.item_rows] {
            for g in rows.values_mut() {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BonmfModel {
    config: ModelConfig,
    users: IdIndex,
    items: IdIndex,
    pub(crate) user_table: DenseMatrix,
    pub(crate) item_table: DenseMatrix,
    pub(crate) layers: Vec<Layer>,
    version: u64,
}

impl PartialEq for BonmfModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.users == other.users
            && self.items == other.items
            && self.user_table == other.user_table
            && self.item_table == other.item_table
            && self.layers == other.layers
    }
}

impl BonmfModel {
    /// Xavier-uniform weights, zero biases, N(0, 0.01) embedding tables.
    pub fn new(config: ModelConfig, users: IdIndex, items: IdIndex, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngState::new(seed);
        let id_dim = config.id_width();
        let user_table = gaussian_init(users.len(), id_dim, EMBEDDING_INIT_STD, &mut root.fork(0));
        let item_table = gaussian_init(items.len(), id_dim, EMBEDDING_INIT_STD, &mut root.fork(1));
        let mut widths = vec![fusion_width(&config)];
        widths.extend(&config.hidden_dims);
        widths.push(1);
        let mut layer_rng = root.fork(2);
        let layers = widths
            .windows(2)
            .map(|w| {
                Ok(Layer {
                    weights: xavier_init(w[1], w[0], &mut layer_rng)?,
                    bias: DenseVector::zeros(w[1]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BonmfModel {
            config,
            users,
            items,
            user_table,
            item_table,
            layers,
            version: 0,
        })
    }

    /// Assembles a model from explicit parameters (checkpoint loading, tests).
    pub fn from_parts(
        config: ModelConfig,
        users: IdIndex,
        items: IdIndex,
        user_table: DenseMatrix,
        item_table: DenseMatrix,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        config.validate()?;
        let id_dim = config.id_width();
        if user_table.rows() != users.len() || user_table.cols() != id_dim {
            return Err(Error::dim("user table rows", users.len(), user_table.rows()));
        }
        if item_table.rows() != items.len() || item_table.cols() != id_dim {
            return Err(Error::dim("item table rows", items.len(), item_table.rows()));
        }
        let mut width = fusion_width(&config);
        let mut expected_hidden = config.hidden_dims.iter().copied().chain([1]);
        if layers.len() != config.hidden_dims.len() + 1 {
            return Err(Error::dim("layer count", config.hidden_dims.len() + 1, layers.len()));
        }
        for (i, l) in layers.iter().enumerate() {
            let out = expected_hidden.next().unwrap();
            if l.weights.cols() != width {
                return Err(Error::dim(format!("layer {i} input width"), width, l.weights.cols()));
            }
            if l.weights.rows() != out || l.bias.len() != out {
                return Err(Error::dim(format!("layer {i} output width"), out, l.weights.rows()));
            }
            width = out;
        }
        Ok(BonmfModel {
            config,
            users,
            items,
            user_table,
            item_table,
            layers,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn users(&self) -> &IdIndex {
        &self.users
    }

    pub fn items(&self) -> &IdIndex {
        &self.items
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn user_table(&self) -> &DenseMatrix {
        &self.user_table
    }

    pub fn item_table(&self) -> &DenseMatrix {
        &self.item_table
    }

    /// Bumped on every parameter mutation; outstanding caches become stale.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn touch(&mut self) {
        self.version += 1;
    }

    pub(crate) fn set_output_bias(&mut self, value: f64) {
        self.layers.last_mut().expect("at least one layer").bias.as_mut_slice()[0] = value;
        self.touch();
    }

    /// Zeroes the embedding rows of the listed users/items. Entities with no
    /// training interactions keep zero rows, so predicting for them relies
    /// on content features alone.
    pub(crate) fn zero_rows(&mut self, users: &[usize], items: &[usize]) {
        for &u in users {
            self.user_table.row_mut(u).fill(0.0);
        }
        for &i in items {
            self.item_table.row_mut(i).fill(0.0);
        }
        self.touch();
    }

    fn entity_name(&self, modality: Modality, user: Option<usize>, item: Option<usize>) -> String {
        let (index, vocab) = if modality.keyed_by_user() {
            (user, &self.users)
        } else {
            (item, &self.items)
        };
        index.map_or_else(|| "<unseen>".to_owned(), |i| vocab.id(i).to_owned())
    }

    /// Concatenates the enabled blocks. `None` indices stand for entities
    /// the model has never seen and contribute a zero embedding row.
    pub fn fuse(&self, user: Option<usize>, item: Option<usize>, inputs: &FeatureInputs) -> Result<DenseVector> {
        let mut fused = Vec::with_capacity(fusion_width(&self.config));
        for modality in Modality::ALL {
            if !self.config.modality_mask.uses(modality) {
                continue;
            }
            let v = inputs.get(modality).ok_or_else(|| Error::MissingFeature {
                modality,
                entities: vec![self.entity_name(modality, user, item)],
                total: 1,
            })?;
            let dim = self.config.modality_dim(modality);
            if v.len() != dim {
                return Err(Error::dim(format!("{modality} feature vector"), dim, v.len()));
            }
            fused.extend_from_slice(v.as_slice());
        }
        if self.config.modality_mask.use_id_embeddings {
            let d = self.config.id_embedding_dim;
            for (index, table) in [(user, &self.user_table), (item, &self.item_table)] {
                match index {
                    Some(i) if i < table.rows() => fused.extend_from_slice(table.row(i)),
                    Some(i) => return Err(Error::dim("embedding row index", table.rows(), i)),
                    None => fused.extend(std::iter::repeat_n(0.0, d)),
                }
            }
        }
        Ok(DenseVector::new(fused))
    }

    /// Raw (unclipped) prediction.
    pub fn forward(&self, fused: &DenseVector) -> Result<(f64, ForwardCache)> {
        let width = fusion_width(&self.config);
        if fused.len() != width {
            return Err(Error::dim("fused input", width, fused.len()));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut x = fused.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine_forward(&x, &layer.weights, &layer.bias)?;
            layer_inputs.push(x);
            x = if i + 1 < self.layers.len() { relu(&z) } else { z.clone() };
            pre_activations.push(z);
        }
        Ok((
            x[0],
            ForwardCache {
                version: self.version,
                user: None,
                item: None,
                layer_inputs,
                pre_activations,
            },
        ))
    }

    /// `fuse` followed by `forward`, recording the indices so `backward`
    /// can route gradients into the embedding tables.
    pub fn forward_example(
        &self,
        user: Option<usize>,
        item: Option<usize>,
        inputs: &FeatureInputs,
    ) -> Result<(f64, ForwardCache)> {
        let fused = self.fuse(user, item, inputs)?;
        let (pred, mut cache) = self.forward(&fused)?;
        cache.user = user;
        cache.item = item;
        Ok((pred, cache))
    }

    pub fn backward(&self, cache: &ForwardCache, dloss_dpred: f64) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros_like(self);
        self.backward_accumulate(cache, dloss_dpred, &mut grads)?;
        Ok(grads)
    }

    /// Adds this example's gradients into `grads`.
    pub fn backward_accumulate(&self, cache: &ForwardCache, dloss_dpred: f64, grads: &mut GradientSet) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cache: cache.version,
                model: self.version,
            });
        }
        let mut upstream = DenseVector::new(vec![dloss_dpred]);
        for l in (0..self.layers.len()).rev() {
            let g = &mut grads.layers[l];
            let grad_input = affine_backward_accumulate(
                &upstream,
                &cache.layer_inputs[l],
                &self.layers[l].weights,
                &mut g.weights,
                &mut g.bias,
            )?;
            upstream = if l > 0 {
                relu_backward(&grad_input, &cache.pre_activations[l - 1])?
            } else {
                grad_input
            };
        }

        // upstream now holds d loss / d fused; the ID block sits at the end
        if self.config.modality_mask.use_id_embeddings {
            let d = self.config.id_embedding_dim;
            let offset = upstream.len() - 2 * d;
            let g = upstream.as_slice();
            for (index, rows, block) in [
                (cache.user, &mut grads.user_rows, &g[offset..offset + d]),
                (cache.item, &mut grads.item_rows, &g[offset + d..]),
            ] {
                if let Some(i) = index {
                    let row = rows.entry(i).or_insert_with(|| vec![0.0; d]);
                    crate::numerics::axpy(1.0, block, row);
                }
            }
        }
        Ok(())
    }

    pub fn predict_clipped(&self, user: Option<usize>, item: Option<usize>, inputs: &FeatureInputs) -> Result<f64> {
        let (raw, _) = self.forward_example(user, item, inputs)?;
        Ok(raw.clamp(self.config.rating_min, self.config.rating_max))
    }

    /// All trainable parameters, flattened in a fixed order: user table,
    /// item table, then each layer's weights and bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.user_table.as_slice());
        out.extend_from_slice(self.item_table.as_slice());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        let total = self.params_flat().len();
        if values.len() != total {
            return Err(Error::dim("flat parameter vector", total, values.len()));
        }
        let mut rest = values;
        for slot in self.param_slices_mut() {
            let (head, tail) = rest.split_at(slot.len());
            slot.copy_from_slice(head);
            rest = tail;
        }
        self.touch();
        Ok(())
    }

    /// Mutable views in the same order as [`params_flat`](Self::params_flat).
    pub(crate) fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.user_table.as_mut_slice(), self.item_table.as_mut_slice()];
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.user_table.is_finite()
            && self.item_table.is_finite()
            && self.layers.iter().all(|l| l.weights.is_finite() && l.bias.is_finite())
    }
}

impl GradientSet {
    /// Dense gradient in [`BonmfModel::params_flat`] order.
    pub fn to_flat(&self, model: &BonmfModel) -> Vec<f64> {
        let d = model.user_table.cols();
        let mut users = vec![0.0; model.user_table.as_slice().len()];
        for (&r, g) in &self.user_rows {
            users[r * d..(r + 1) * d].copy_from_slice(g);
        }
        let mut items = vec![0.0; model.item_table.as_slice().len()];
        for (&r, g) in &self.item_rows {
            items[r * d..(r + 1) * d].copy_from_slice(g);
        }
        let mut out = users;
        out.extend(items);
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }
}

/// Squared error for one example and its derivative in the prediction.
pub fn mse_loss(prediction: f64, target: f64) -> (f64, f64) {
    let diff = prediction - target;
    (diff * diff, 2.0 * diff)
}

/// Anything that can score a (user id, item id) pair, clipped to the rating range.
pub trait Predictor: Sync {
    fn predict_ids(&self, user_id: &str, item_id: &str, features: &FeatureSet) -> Result<f64>;
}

impl Predictor for BonmfModel {
    fn predict_ids(&self, user_id: &str, item_id: &str, features: &FeatureSet) -> Result<f64> {
        let inputs = FeatureInputs::lookup(features, user_id, item_id);
        for modality in Modality::ALL {
            if self.config.modality_mask.uses(modality) && inputs.get(modality).is_none() {
                let entity = if modality.keyed_by_user() { user_id } else { item_id };
                return Err(Error::MissingFeature {
                    modality,
                    entities: vec![entity.to_owned()],
                    total: 1,
                });
            }
        }
        self.predict_clipped(self.users.get(user_id), self.items.get(item_id), &inputs)
    }
}
