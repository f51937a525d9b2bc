//! Config-driven comparison runs: every requested model row is trained on the
//! same split and evaluated on the same test records.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{svd_train, SvdConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{
    cold_item_split, generate_synthetic, kfold, parse_feature_file, parse_ratings, random_split, FeatureSet,
    InteractionSet, Modality, RatingsFormat, SplitPlan, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_records, format_text_table, CandidatePool, EvalOptions, EvalReport};
use crate::model::{nmd_config, BonmfModel, ModalityMask, ModelConfig};
use crate::train::{fit, TrainConfig, TrainingData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RowKind {
    BoNMF,
    NMD,
    SVD,
    #[serde(rename = "BoNMF_no_image")]
    BoNMFNoImage,
    #[serde(rename = "BoNMF_no_text")]
    BoNMFNoText,
    #[serde(rename = "BoNMF_no_structured")]
    BoNMFNoStructured,
}

impl RowKind {
    /// Canonical table order.
    pub const ALL: [RowKind; 6] = [
        RowKind::BoNMF,
        RowKind::NMD,
        RowKind::SVD,
        RowKind::BoNMFNoImage,
        RowKind::BoNMFNoText,
        RowKind::BoNMFNoStructured,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RowKind::BoNMF => "BoNMF",
            RowKind::NMD => "NMD",
            RowKind::SVD => "SVD",
            RowKind::BoNMFNoImage => "BoNMF_no_image",
            RowKind::BoNMFNoText => "BoNMF_no_text",
            RowKind::BoNMFNoStructured => "BoNMF_no_structured",
        }
    }

    /// Model configuration for the neural rows; `None` for SVD.
    pub fn model_config(self, base: &ModelConfig) -> Option<ModelConfig> {
        let full = ModelConfig {
            modality_mask: ModalityMask::ALL,
            ..base.clone()
        };
        Some(match self {
            RowKind::BoNMF => full,
            RowKind::NMD => ModelConfig {
                rating_min: base.rating_min,
                rating_max: base.rating_max,
                ..nmd_config(base.id_embedding_dim, base.hidden_dims.clone())
            },
            RowKind::SVD => return None,
            RowKind::BoNMFNoImage => full.without(Modality::ItemImage),
            RowKind::BoNMFNoText => full.without(Modality::ItemText),
            RowKind::BoNMFNoStructured => full.without(Modality::UserProfile),
        })
    }
}

impl fmt::Display for RowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RowKind::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model row {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub ratings: PathBuf,
    /// `csv` or `movielens_dat`; inferred from the extension when absent.
    #[serde(default)]
    pub format: Option<String>,
    #[serde(default)]
    pub user_profile: Option<PathBuf>,
    #[serde(default)]
    pub item_text: Option<PathBuf>,
    #[serde(default)]
    pub item_image: Option<PathBuf>,
}

impl DataPaths {
    pub fn feature_path(&self, modality: Modality) -> Option<&Path> {
        match modality {
            Modality::UserProfile => self.user_profile.as_deref(),
            Modality::ItemText => self.item_text.as_deref(),
            Modality::ItemImage => self.item_image.as_deref(),
        }
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            Some(&mut self.ratings),
            self.user_profile.as_mut(),
            self.item_text.as_mut(),
            self.item_image.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

pub fn load_ratings(path: &Path, format: Option<&str>) -> Result<InteractionSet> {
    let format = match format {
        Some(f) => f.parse()?,
        None => RatingsFormat::from_path(path),
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(BufReader::new(file), format)
}

pub fn load_features(paths: &DataPaths) -> Result<FeatureSet> {
    let mut set = FeatureSet::default();
    for modality in Modality::ALL {
        if let Some(path) = paths.feature_path(modality) {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            set.set(parse_feature_file(BufReader::new(file), modality)?);
        }
    }
    Ok(set)
}

pub fn load_dataset(paths: &DataPaths) -> Result<(InteractionSet, FeatureSet)> {
    Ok((load_ratings(&paths.ratings, paths.format.as_deref())?, load_features(paths)?))
}

fn default_train_fraction() -> f64 {
    0.7
}

fn default_cold_fraction() -> f64 {
    0.1
}

fn default_folds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitConfig {
    Random {
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
    ColdItem {
        #[serde(default = "default_cold_fraction")]
        cold_fraction: f64,
    },
    Kfold {
        #[serde(default = "default_folds")]
        folds: usize,
    },
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig::Random {
            train_fraction: default_train_fraction(),
        }
    }
}

/// Shared MLP shape; per-row modality masks and the content widths (taken
/// from the loaded feature files) are filled in by the runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub id_embedding_dim: usize,
    pub hidden_dims: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        let d = ModelConfig::default();
        Architecture {
            id_embedding_dim: d.id_embedding_dim,
            hidden_dims: d.hidden_dims,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub k: usize,
    pub relevance_threshold: f64,
    pub candidates: String,
    pub rows: Vec<RowKind>,
    /// Also report each model on the cold-item subset (needs a cold_item split).
    pub cold_start: bool,
    /// Output directory for the tables.
    pub output: Option<PathBuf>,
    pub data: Option<DataPaths>,
    pub synthetic: Option<SyntheticSpec>,
    pub split: SplitConfig,
    pub model: Architecture,
    pub train: TrainConfig,
    pub svd: SvdConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            k: crate::eval::DEFAULT_K,
            relevance_threshold: crate::eval::DEFAULT_RELEVANCE_THRESHOLD,
            candidates: CandidatePool::TestItems.to_string(),
            rows: RowKind::ALL.to_vec(),
            cold_start: false,
            output: None,
            data: None,
            synthetic: None,
            split: SplitConfig::default(),
            model: Architecture::default(),
            train: TrainConfig::default(),
            svd: SvdConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; syntax and schema errors carry a 1-based line number.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Config {
                line,
                message: e.message().trim().to_owned(),
            }
        })
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = config.data.as_mut() {
            d.resolve(base);
        }
        if let Some(out) = config.output.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(config)
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        Ok(EvalOptions {
            k: self.k,
            relevance_threshold: self.relevance_threshold,
            candidates: self.candidates.parse()?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.rows.is_empty() {
            return bad("at least one model row must be selected".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(crate::data::RATING_MIN..=crate::data::RATING_MAX).contains(&self.relevance_threshold) {
            return bad(format!("relevance_threshold {} is outside the rating range", self.relevance_threshold));
        }
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => return bad("give either [data] or [synthetic], not both".into()),
            (None, None) => return bad("one of [data] or [synthetic] is required".into()),
            (_, Some(spec)) => spec.validate()?,
            _ => {}
        }
        if self.cold_start && !matches!(self.split, SplitConfig::ColdItem { .. }) {
            return bad("cold_start needs split kind cold_item".into());
        }
        self.eval_options()?;
        self.train.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    pub fn get(&self, model: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.model == model).map(|r| &r.report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Machine,
}

pub fn serialize_table(table: &ComparisonTable, format: TableFormat) -> Result<Vec<u8>> {
    if table.rows.is_empty() {
        return Err(Error::Report("cannot serialize an empty table".into()));
    }
    match format {
        TableFormat::Text => Ok(format_text_table(table.rows.iter().map(|r| (r.model.as_str(), &r.report))).into_bytes()),
        TableFormat::Machine => {
            let mut out = serde_json::to_vec_pretty(table).map_err(|e| Error::Report(e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
    }
}

pub fn parse_machine_table(bytes: &[u8]) -> Result<ComparisonTable> {
    serde_json::from_slice(bytes).map_err(|e| Error::Report(format!("machine table: {e}")))
}

/// Loaded data plus the model shape derived from it.
pub struct Workspace {
    pub data: InteractionSet,
    pub features: FeatureSet,
    pub base_model: ModelConfig,
}

impl Workspace {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let (data, features) = match (&config.data, &config.synthetic) {
            (Some(paths), _) => load_dataset(paths)?,
            (None, Some(spec)) => {
                let s = generate_synthetic(spec)?;
                (s.interactions, s.features)
            }
            (None, None) => return Err(Error::InvalidArgument("no data source configured".into())),
        };
        let mut base_model = ModelConfig {
            id_embedding_dim: config.model.id_embedding_dim,
            hidden_dims: config.model.hidden_dims.clone(),
            ..ModelConfig::default()
        };
        for modality in Modality::ALL {
            if let Some(store) = features.store(modality) {
                match modality {
                    Modality::UserProfile => base_model.user_text_dim = store.dim(),
                    Modality::ItemText => base_model.item_text_dim = store.dim(),
                    Modality::ItemImage => base_model.item_image_dim = store.dim(),
                }
            }
        }
        Ok(Workspace {
            data,
            features,
            base_model,
        })
    }
}

/// Trains one row's model on `train`.
pub fn train_row(
    kind: RowKind,
    ws: &Workspace,
    train: &[usize],
    config: &ExperimentConfig,
) -> Result<Checkpoint> {
    match kind.model_config(&ws.base_model) {
        None => Ok(Checkpoint::Svd(svd_train(&ws.data, train, &config.svd)?)),
        Some(model_config) => {
            let mut model = BonmfModel::new(
                model_config,
                ws.data.users().clone(),
                ws.data.items().clone(),
                config.seed,
            )?;
            let examples = TrainingData::new(&model, &ws.data, train, &ws.features)?;
            fit(&mut model, &examples, &config.train, None)?;
            Ok(Checkpoint::Bonmf(model))
        }
    }
}

pub fn build_splits(config: &ExperimentConfig, data: &InteractionSet) -> Result<Vec<SplitPlan>> {
    match config.split {
        SplitConfig::Random { train_fraction } => Ok(vec![random_split(data, train_fraction, config.seed)?]),
        SplitConfig::ColdItem { cold_fraction } => Ok(vec![cold_item_split(data, cold_fraction, config.seed)?]),
        SplitConfig::Kfold { folds } => kfold(data, folds, config.seed),
    }
}

fn ordered_rows(config: &ExperimentConfig) -> Vec<RowKind> {
    let mut rows = config.rows.clone();
    rows.sort();
    rows.dedup();
    rows
}

fn row_error(kind: RowKind, e: Error) -> Error {
    Error::Row {
        name: kind.name().to_owned(),
        source: Box::new(e),
    }
}

/// Runs every requested row on one shared split (or, for k-fold, on every
/// fold, reporting the fold mean). Rows train in parallel; a failing row
/// aborts the whole run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ComparisonTable> {
    config.validate()?;
    let ws = Workspace::load(config)?;
    run_experiment_on(config, &ws)
}

pub fn run_experiment_on(config: &ExperimentConfig, ws: &Workspace) -> Result<ComparisonTable> {
    let options = config.eval_options()?;
    let plans = build_splits(config, &ws.data)?;
    let rows = ordered_rows(config)
        .into_par_iter()
        .map(|kind| {
            let reports = plans
                .iter()
                .enumerate()
                .map(|(index, plan)| {
                    let model = train_row(kind, ws, &plan.train, config)?;
                    evaluate_plan(&model, ws, plan, &plan.test, &options).map_err(|e| match plans.len() {
                        1 => e,
                        _ => Error::Fold {
                            index,
                            source: Box::new(e),
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| row_error(kind, e))?;
            Ok(TableRow {
                model: kind.name().to_owned(),
                report: if reports.len() == 1 {
                    reports.into_iter().next().unwrap()
                } else {
                    EvalReport::mean(&reports)?
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonTable { rows })
}

fn evaluate_plan(
    model: &Checkpoint,
    ws: &Workspace,
    plan: &SplitPlan,
    test: &[usize],
    options: &EvalOptions,
) -> Result<EvalReport> {
    evaluate_records(model, &ws.data, test, &plan.train, &plan.fingerprint(), &ws.features, options)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColdStartTables {
    pub overall: ComparisonTable,
    pub cold_only: ComparisonTable,
}

/// Like [`run_experiment`] on a cold-item split, additionally evaluating
/// every model on just the interactions that reference cold items.
pub fn run_cold_start(config: &ExperimentConfig) -> Result<ColdStartTables> {
    config.validate()?;
    let ws = Workspace::load(config)?;
    run_cold_start_on(config, &ws)
}

pub fn run_cold_start_on(config: &ExperimentConfig, ws: &Workspace) -> Result<ColdStartTables> {
    if !matches!(config.split, SplitConfig::ColdItem { .. }) {
        return Err(Error::InvalidArgument("cold-start evaluation needs a cold_item split".into()));
    }
    let options = config.eval_options()?;
    let plan = build_splits(config, &ws.data)?.remove(0);
    let cold = plan.cold_test_records(&ws.data);
    if cold.is_empty() {
        return Err(Error::EmptyData("the split has no interactions on cold items".into()));
    }
    let pairs = ordered_rows(config)
        .into_par_iter()
        .map(|kind| {
            let model = train_row(kind, ws, &plan.train, config).map_err(|e| row_error(kind, e))?;
            let overall = evaluate_plan(&model, ws, &plan, &plan.test, &options).map_err(|e| row_error(kind, e))?;
            let cold_only = evaluate_plan(&model, ws, &plan, &cold, &options).map_err(|e| row_error(kind, e))?;
            let name = kind.name().to_owned();
            Ok((
                TableRow {
                    model: name.clone(),
                    report: overall,
                },
                TableRow {
                    model: name,
                    report: cold_only,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (overall, cold_only) = pairs.into_iter().unzip();
    Ok(ColdStartTables {
        overall: ComparisonTable { rows: overall },
        cold_only: ComparisonTable { rows: cold_only },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_names_round_trip() {
        for r in RowKind::ALL {
            assert_eq!(r.name().parse::<RowKind>().unwrap(), r);
        }
        assert!("BoNMF-no-Text".parse::<RowKind>().is_err());
    }

    #[test]
    fn ablation_rows_clear_exactly_one_flag() {
        let base = ModelConfig::default();
        let full = RowKind::BoNMF.model_config(&base).unwrap().modality_mask;
        assert_eq!(full, ModalityMask::ALL);
        let no_text = RowKind::BoNMFNoText.model_config(&base).unwrap().modality_mask;
        assert!(!no_text.use_item_text && no_text.use_item_image && no_text.use_user_profile);
        let nmd = RowKind::NMD.model_config(&base).unwrap().modality_mask;
        assert!(nmd.use_id_embeddings && !nmd.use_item_text && !nmd.use_item_image && !nmd.use_user_profile);
        assert!(RowKind::SVD.model_config(&base).is_none());
    }

    #[test]
    fn config_parsing_and_errors() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 3\nrows = [\"NMD\", \"BoNMF\"]\n[synthetic]\nn_users = 10\n[split]\nkind = \"cold_item\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.split, SplitConfig::ColdItem { cold_fraction: 0.1 });
        assert_eq!(ordered_rows(&cfg), vec![RowKind::BoNMF, RowKind::NMD]);
        assert_eq!(cfg.synthetic.as_ref().unwrap().n_items, 300);

        match ExperimentConfig::from_toml("seed = 1\n\nk = = 2\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::from_toml("seed = 1\nbogus = true\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::default().validate().is_err());
    }

    #[test]
    fn empty_table_not_serialized() {
        assert!(serialize_table(&ComparisonTable { rows: vec![] }, TableFormat::Text).is_err());
    }
}
