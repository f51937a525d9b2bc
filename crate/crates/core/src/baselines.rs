//! Biased matrix factorization ("SVD" in recommender parlance) trained by
//! per-record SGD. Ignores all content features.

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSet, IdIndex, InteractionSet, RATING_MAX, RATING_MIN};
use crate::error::{Error, Result};
use crate::numerics::{dot, gaussian_init, DenseMatrix, DenseVector, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvdConfig {
    pub rank: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    /// Std of the Gaussian factor initialization.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for SvdConfig {
    fn default() -> Self {
        SvdConfig {
            rank: 50,
            epochs: 20,
            learning_rate: 0.005,
            regularization: 0.02,
            init_std: 0.1,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdModel {
    pub users: IdIndex,
    pub items: IdIndex,
    pub global_mean: f64,
    pub user_bias: DenseVector,
    pub item_bias: DenseVector,
    pub user_factors: DenseMatrix,
    pub item_factors: DenseMatrix,
}

impl SvdModel {
    pub fn rank(&self) -> usize {
        self.user_factors.cols()
    }

    /// Raw score. Unknown (`None`) entities drop their bias and factor terms.
    pub fn predict(&self, user: Option<usize>, item: Option<usize>) -> f64 {
        let mut r = self.global_mean;
        if let Some(u) = user {
            r += self.user_bias[u];
        }
        if let Some(i) = item {
            r += self.item_bias[i];
        }
        if let (Some(u), Some(i)) = (user, item) {
            r += dot(self.user_factors.row(u), self.item_factors.row(i));
        }
        r
    }

    pub fn predict_clipped(&self, user: Option<usize>, item: Option<usize>) -> f64 {
        self.predict(user, item).clamp(RATING_MIN, RATING_MAX)
    }
}

impl crate::model::Predictor for SvdModel {
    fn predict_ids(&self, user_id: &str, item_id: &str, _features: &FeatureSet) -> Result<f64> {
        Ok(self.predict_clipped(self.users.get(user_id), self.items.get(item_id)))
    }
}

/// Mean squared training error after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdHistory {
    pub epoch_train_mse: Vec<f64>,
}

pub fn svd_train(data: &InteractionSet, train: &[usize], config: &SvdConfig) -> Result<SvdModel> {
    svd_train_with_history(data, train, config).map(|(m, _)| m)
}

pub fn svd_train_with_history(
    data: &InteractionSet,
    train: &[usize],
    config: &SvdConfig,
) -> Result<(SvdModel, SvdHistory)> {
    if config.epochs == 0 {
        return Err(Error::InvalidArgument("svd epochs must be at least 1".into()));
    }
    if !(config.learning_rate > 0.0) || !(config.regularization >= 0.0) {
        return Err(Error::InvalidArgument(
            "svd needs learning_rate > 0 and regularization >= 0".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::EmptyData("no training records".into()));
    }
    let records = data.records();
    let global_mean = train.iter().map(|&r| records[r].rating).sum::<f64>() / train.len() as f64;
    let (n_users, n_items) = (data.users().len(), data.items().len());
    let root = RngState::new(config.seed);
    let mut model = SvdModel {
        users: data.users().clone(),
        items: data.items().clone(),
        global_mean,
        user_bias: DenseVector::zeros(n_users),
        item_bias: DenseVector::zeros(n_items),
        user_factors: gaussian_init(n_users, config.rank, config.init_std, &mut root.fork(0)),
        item_factors: gaussian_init(n_items, config.rank, config.init_std, &mut root.fork(1)),
    };

    let (lr, reg) = (config.learning_rate, config.regularization);
    let mut order = train.to_vec();
    let mut shuffle_rng = root.fork(2);
    let mut history = SvdHistory {
        epoch_train_mse: Vec::with_capacity(config.epochs),
    };
    let mut p_old = vec![0.0; config.rank];
    for epoch in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        for &r in &order {
            let rec = &records[r];
            let (u, i) = (rec.user, rec.item);
            let err = rec.rating - model.predict(Some(u), Some(i));
            let bu = &mut model.user_bias.as_mut_slice()[u];
            *bu += lr * (err - reg * *bu);
            let bi = &mut model.item_bias.as_mut_slice()[i];
            *bi += lr * (err - reg * *bi);
            p_old.copy_from_slice(model.user_factors.row(u));
            let q = model.item_factors.row(i).to_vec();
            for (p, qk) in model.user_factors.row_mut(u).iter_mut().zip(&q) {
                *p += lr * (err * qk - reg * *p);
            }
            for (qk, p) in model.item_factors.row_mut(i).iter_mut().zip(&p_old) {
                *qk += lr * (err * p - reg * *qk);
            }
        }
        let mse = train
            .iter()
            .map(|&r| (records[r].rating - model.predict(Some(records[r].user), Some(records[r].item))).powi(2))
            .sum::<f64>()
            / train.len() as f64;
        if !mse.is_finite() {
            return Err(Error::Divergence(format!(
                "svd training loss became non-finite in epoch {}; try a smaller learning rate",
                epoch + 1
            )));
        }
        history.epoch_train_mse.push(mse);
    }

    // entities without training data fall back to the bias/mean terms
    let mut seen_users = vec![false; n_users];
    let mut seen_items = vec![false; n_items];
    for &r in train {
        seen_users[records[r].user] = true;
        seen_items[records[r].item] = true;
    }
    for u in (0..n_users).filter(|&u| !seen_users[u]) {
        model.user_bias.as_mut_slice()[u] = 0.0;
        model.user_factors.row_mut(u).fill(0.0);
    }
    for i in (0..n_items).filter(|&i| !seen_items[i]) {
        model.item_bias.as_mut_slice()[i] = 0.0;
        model.item_factors.row_mut(i).fill(0.0);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_with(rank: usize) -> SvdModel {
        SvdModel {
            users: IdIndex::from_ids(["a".to_string(), "b".to_string()]).unwrap(),
            items: IdIndex::from_ids(["x".to_string(), "y".to_string()]).unwrap(),
            global_mean: 3.5,
            user_bias: DenseVector::zeros(2),
            item_bias: DenseVector::zeros(2),
            user_factors: DenseMatrix::zeros(2, rank),
            item_factors: DenseMatrix::zeros(2, rank),
        }
    }

    #[test]
    fn zero_model_predicts_mean() {
        assert_eq!(model_with(3).predict(Some(0), Some(1)), 3.5);
    }

    #[test]
    fn rank_one_hand_value() {
        let mut m = model_with(1);
        m.user_bias = DenseVector::new(vec![0.25, -0.5]);
        m.item_bias = DenseVector::new(vec![0.1, 0.2]);
        m.user_factors = DenseMatrix::from_vec(2, 1, vec![2.0, 1.0]).unwrap();
        m.item_factors = DenseMatrix::from_vec(2, 1, vec![0.5, -1.0]).unwrap();
        // 3.5 + 0.25 + 0.2 + 2 * -1
        assert!((m.predict(Some(0), Some(1)) - 1.95).abs() < 1e-12);
        // unknown item: mean + user bias
        assert_eq!(m.predict(Some(0), None), 3.75);
        assert_eq!(m.predict(None, None), 3.5);
    }

    #[test]
    fn training_is_deterministic_and_validates() {
        let mut data = InteractionSet::new();
        for (u, i, r) in [("a", "x", 4.0), ("a", "y", 2.0), ("b", "x", 5.0), ("b", "y", 3.0)] {
            data.push(u, i, r, None, 0).unwrap();
        }
        let config = SvdConfig {
            rank: 2,
            epochs: 5,
            ..SvdConfig::default()
        };
        let train = [0, 1, 2, 3];
        assert_eq!(svd_train(&data, &train, &config).unwrap(), svd_train(&data, &train, &config).unwrap());
        assert!(svd_train(&data, &train, &SvdConfig { epochs: 0, ..config.clone() }).is_err());
        assert!(svd_train(&data, &[], &config).is_err());
        let blowup = SvdConfig {
            learning_rate: 1e6,
            ..config
        };
        assert!(matches!(svd_train(&data, &train, &blowup), Err(Error::Divergence(_))));
    }
}
