//! Mini-batch Adam training for [`BonmfModel`] and the k-fold driver.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{kfold, FeatureSet, InteractionSet, Modality, SplitPlan};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, EvalOptions};
use crate::model::{mse_loss, BonmfModel, FeatureInputs, GradientSet};
use crate::numerics::DenseVector;

/// Examples per gradient partial sum. Batches are reduced chunk by chunk in
/// a fixed order, so serial and parallel runs produce identical bits.
const REDUCTION_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// L2 penalty on embedding rows touched by a batch.
    pub l2_embedding: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Compute per-example gradients on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 256,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            l2_embedding: 0.0,
            seed: 42,
            shuffle: true,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.adam_epsilon > 0.0) || !(self.l2_embedding >= 0.0) {
            return bad("learning_rate and adam_epsilon must be > 0, l2_embedding >= 0".into());
        }
        Ok(())
    }
}

/// First and second moments for every parameter array, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    t: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            moments: shapes.iter().map(|&n| (vec![0.0; n], vec![0.0; n])).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over every parameter array.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if params.len() != state.moments.len() || grads.len() != params.len() {
        return Err(Error::dim("adam parameter arrays", state.moments.len(), params.len()));
    }
    for (i, ((p, g), (m, _))) in params.iter().zip(grads).zip(&state.moments).enumerate() {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::dim(format!("adam array {i}"), m.len(), g.len()));
        }
    }
    state.t += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let correction1 = 1.0 - b1.powi(state.t as i32);
    let correction2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut state.moments) {
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / correction1;
            let v_hat = v[j] / correction2;
            p[j] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

/// Training examples in model index space with their feature vectors
/// resolved up front, so a missing feature is reported before training.
#[derive(Debug, Clone)]
pub struct TrainingData<'a> {
    examples: Vec<Example>,
    user_profile: Vec<Option<&'a DenseVector>>,
    item_text: Vec<Option<&'a DenseVector>>,
    item_image: Vec<Option<&'a DenseVector>>,
}

impl<'a> TrainingData<'a> {
    pub fn new(model: &BonmfModel, data: &InteractionSet, records: &[usize], features: &'a FeatureSet) -> Result<Self> {
        let config = model.config();
        for modality in Modality::ALL {
            if !config.modality_mask.uses(modality) {
                continue;
            }
            match features.store(modality) {
                Some(store) if store.dim() != config.modality_dim(modality) => {
                    return Err(Error::dim(
                        format!("{modality} feature store vs model config"),
                        config.modality_dim(modality),
                        store.dim(),
                    ))
                }
                _ => {}
            }
        }

        let mut examples = Vec::with_capacity(records.len());
        for &r in records {
            let rec = &data.records()[r];
            let user = model.users().get(&rec.user_id);
            let item = model.items().get(&rec.item_id);
            let (Some(user), Some(item)) = (user, item) else {
                return Err(Error::InvalidArgument(format!(
                    "training record ({}, {}) is outside the model vocabulary",
                    rec.user_id, rec.item_id
                )));
            };
            examples.push(Example {
                user,
                item,
                rating: rec.rating,
            });
        }

        let resolve = |modality: Modality| -> Vec<Option<&'a DenseVector>> {
            let vocab = if modality.keyed_by_user() { model.users() } else { model.items() };
            if !config.modality_mask.uses(modality) {
                return vec![None; vocab.len()];
            }
            vocab.ids().iter().map(|id| features.vector(modality, id)).collect()
        };
        let out = TrainingData {
            user_profile: resolve(Modality::UserProfile),
            item_text: resolve(Modality::ItemText),
            item_image: resolve(Modality::ItemImage),
            examples,
        };

        for modality in Modality::ALL {
            if !config.modality_mask.uses(modality) {
                continue;
            }
            let table = out.table(modality);
            let mut missing: Vec<usize> = out
                .examples
                .iter()
                .map(|e| if modality.keyed_by_user() { e.user } else { e.item })
                .filter(|&i| table[i].is_none())
                .collect();
            missing.sort_unstable();
            missing.dedup();
            if !missing.is_empty() {
                let vocab = if modality.keyed_by_user() { model.users() } else { model.items() };
                return Err(Error::MissingFeature {
                    modality,
                    entities: missing.iter().take(10).map(|&i| vocab.id(i).to_owned()).collect(),
                    total: missing.len(),
                });
            }
        }
        Ok(out)
    }

    fn table(&self, modality: Modality) -> &[Option<&'a DenseVector>] {
        match modality {
            Modality::UserProfile => &self.user_profile,
            Modality::ItemText => &self.item_text,
            Modality::ItemImage => &self.item_image,
        }
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn inputs(&self, e: &Example) -> FeatureInputs<'a> {
        FeatureInputs {
            user_profile: self.user_profile[e.user],
            item_text: self.item_text[e.item],
            item_image: self.item_image[e.item],
        }
    }

    /// Mean squared error of clipped predictions.
    pub fn mse(&self, model: &BonmfModel) -> Result<f64> {
        if self.examples.is_empty() {
            return Err(Error::EmptyData("no examples to score".into()));
        }
        let mut sum = 0.0;
        for e in &self.examples {
            let p = model.predict_clipped(Some(e.user), Some(e.item), &self.inputs(e))?;
            sum += (p - e.rating).powi(2);
        }
        Ok(sum / self.examples.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub wall_secs: f64,
    pub holdout_mse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    /// Flat `key=value` lines, the same container as an evaluation report.
    pub fn to_kv(&self) -> String {
        let mut out = format!("epochs={}\n", self.epochs.len());
        for e in &self.epochs {
            out.push_str(&format!("epoch.{}.train_loss={}\n", e.epoch, e.train_loss));
            out.push_str(&format!("epoch.{}.wall_secs={}\n", e.epoch, e.wall_secs));
            if let Some(h) = e.holdout_mse {
                out.push_str(&format!("epoch.{}.holdout_mse={h}\n", e.epoch));
            }
        }
        out
    }
}

fn chunk_gradients(model: &BonmfModel, data: &TrainingData, chunk: &[usize]) -> Result<(GradientSet, f64)> {
    let mut grads = GradientSet::zeros_like(model);
    let mut loss = 0.0;
    for &idx in chunk {
        let e = &data.examples[idx];
        let (pred, cache) = model.forward_example(Some(e.user), Some(e.item), &data.inputs(e))?;
        let (l, dl) = mse_loss(pred, e.rating);
        loss += l;
        model.backward_accumulate(&cache, dl, &mut grads)?;
    }
    Ok((grads, loss))
}

fn batch_gradients(model: &BonmfModel, data: &TrainingData, batch: &[usize], parallel: bool) -> Result<(GradientSet, f64)> {
    let partials: Vec<Result<(GradientSet, f64)>> = if parallel {
        batch
            .par_chunks(REDUCTION_CHUNK)
            .map(|c| chunk_gradients(model, data, c))
            .collect()
    } else {
        batch
            .chunks(REDUCTION_CHUNK)
            .map(|c| chunk_gradients(model, data, c))
            .collect()
    };
    let mut total = GradientSet::zeros_like(model);
    let mut loss = 0.0;
    for p in partials {
        let (g, l) = p?;
        total.add(&g);
        loss += l;
    }
    Ok((total, loss))
}

/// Trains `model` in place.
///
/// Before the first epoch the output bias is set to the mean training rating
/// and the embedding rows of entities absent from `train` are zeroed; those
/// rows receive no gradient, so they stay zero.
pub fn fit(
    model: &mut BonmfModel,
    train: &TrainingData,
    config: &TrainConfig,
    holdout: Option<&TrainingData>,
) -> Result<TrainHistory> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyData("no training examples".into()));
    }

    let n = train.len();
    let mean = train.examples.iter().map(|e| e.rating).sum::<f64>() / n as f64;
    let mut seen_users = vec![false; model.users().len()];
    let mut seen_items = vec![false; model.items().len()];
    for e in &train.examples {
        seen_users[e.user] = true;
        seen_items[e.item] = true;
    }
    let unseen = |seen: &[bool]| seen.iter().enumerate().filter(|(_, &s)| !s).map(|(i, _)| i).collect::<Vec<_>>();
    model.zero_rows(&unseen(&seen_users), &unseen(&seen_items));
    model.set_output_bias(mean);

    let shapes: Vec<usize> = model.param_slices_mut().iter().map(|s| s.len()).collect();
    let mut adam = AdamState::new(&shapes);
    let id_dim = model.user_table().cols();
    let mut user_grad = vec![0.0; model.user_table().as_slice().len()];
    let mut item_grad = vec![0.0; model.item_table().as_slice().len()];

    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = crate::numerics::RngState::new(config.seed);
    let mut history = TrainHistory::default();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        if config.shuffle {
            shuffle_rng.shuffle(&mut order);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (mut grads, loss) = batch_gradients(model, train, batch, config.parallel)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite training loss in epoch {epoch}; try a smaller learning rate"
                )));
            }
            epoch_loss += loss;
            grads.scale(1.0 / batch.len() as f64);

            for (rows, table, dense) in [
                (&grads.user_rows, model.user_table(), &mut user_grad),
                (&grads.item_rows, model.item_table(), &mut item_grad),
            ] {
                for (&r, g) in rows {
                    let slot = &mut dense[r * id_dim..(r + 1) * id_dim];
                    slot.copy_from_slice(g);
                    if config.l2_embedding > 0.0 {
                        crate::numerics::axpy(2.0 * config.l2_embedding, table.row(r), slot);
                    }
                }
            }

            let mut grad_slices: Vec<&[f64]> = vec![&user_grad, &item_grad];
            for l in &grads.layers {
                grad_slices.push(l.weights.as_slice());
                grad_slices.push(l.bias.as_slice());
            }
            adam_step(&mut model.param_slices_mut(), &grad_slices, &mut adam, config)?;
            model.touch();

            for (rows, dense) in [(&grads.user_rows, &mut user_grad), (&grads.item_rows, &mut item_grad)] {
                for &r in rows.keys() {
                    dense[r * id_dim..(r + 1) * id_dim].fill(0.0);
                }
            }
        }
        if !model.is_finite() {
            return Err(Error::Divergence(format!("parameters became non-finite in epoch {epoch}")));
        }
        let holdout_mse = holdout.map(|h| h.mse(model)).transpose()?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / n as f64,
            wall_secs: started.elapsed().as_secs_f64(),
            holdout_mse,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub folds: Vec<EvalReport>,
    pub mean: EvalReport,
}

/// Runs `train_and_evaluate` on every fold of a seeded k-fold partition.
pub fn cross_validate<F>(data: &InteractionSet, k: usize, seed: u64, train_and_evaluate: F) -> Result<CrossValidation>
where
    F: Fn(&SplitPlan) -> Result<EvalReport>,
{
    if k < 2 {
        return Err(Error::InvalidArgument(format!("cross-validation needs k >= 2, got {k}")));
    }
    let plans = kfold(data, k, seed)?;
    let folds = plans
        .iter()
        .enumerate()
        .map(|(index, plan)| {
            train_and_evaluate(plan).map_err(|e| Error::Fold {
                index,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = EvalReport::mean(&folds)?;
    Ok(CrossValidation { folds, mean })
}

/// Convenience: builds, trains and evaluates a model on one split.
pub fn train_on_split(
    mut model: BonmfModel,
    data: &InteractionSet,
    plan: &SplitPlan,
    features: &FeatureSet,
    config: &TrainConfig,
    eval: &EvalOptions,
) -> Result<(BonmfModel, TrainHistory, EvalReport)> {
    let train = TrainingData::new(&model, data, &plan.train, features)?;
    let history = fit(&mut model, &train, config, None)?;
    let report = crate::eval::evaluate(&model, data, plan, features, eval)?;
    Ok((model, history, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let g = vec![0.0, 0.0];
        let mut state = AdamState::new(&[2]);
        adam_step(&mut [&mut p], &[&g], &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_adam_step_closed_form() {
        let mut p = vec![0.5];
        let mut state = AdamState::new(&[1]);
        let config = TrainConfig::default();
        adam_step(&mut [&mut p], &[&[1.0]], &mut state, &config).unwrap();
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![0.0; 3];
        let mut state = AdamState::new(&[2]);
        assert!(adam_step(&mut [&mut p], &[&[0.0; 3]], &mut state, &TrainConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { adam_beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
