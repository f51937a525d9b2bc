//! `bonmf <synth|train|evaluate|ablate>`.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data/format error,
//! 3 numeric failure. Diagnostics go to stderr, summaries to stdout. Every
//! output file is written to a temporary sibling and renamed into place.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::data::{
    generate_synthetic, item_id, user_id, write_ratings, FeatureEncoding, InteractionSet, Modality, RatingsFormat,
    SplitPlan, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_records, format_text_table, CandidatePool, EvalOptions};
use crate::experiment::{
    build_splits, load_dataset, run_cold_start_on, run_experiment_on, serialize_table, DataPaths, ExperimentConfig,
    RowKind, SplitConfig, TableFormat, Workspace,
};
use crate::model::Predictor;
use crate::train::TrainConfig;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "bonmf", version, about = "Multimodal neural matrix factorization recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted synthetic dataset (ratings, three feature files, truth).
    Synth(SynthArgs),
    /// Train one model on the training side of a split and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test side of a split.
    Evaluate(EvaluateArgs),
    /// Run the comparison table (and optional cold-start study) from a config file.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 300)]
    items: usize,
    /// Planted latent dimension.
    #[arg(long, default_value_t = 8)]
    latent: usize,
    /// Probability that a (user, item) pair is observed.
    #[arg(long, default_value_t = 0.02)]
    density: f64,
    /// Std of the Gaussian rating noise.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Width of the item text and user profile vectors.
    #[arg(long, default_value_t = 32)]
    text_dim: usize,
    #[arg(long, default_value_t = 4)]
    image_dim: usize,
    /// Signal share of the content vectors, in [0, 1].
    #[arg(long, default_value_t = 0.9)]
    content_signal: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Feature file encoding: tsv or bin.
    #[arg(long, default_value = "tsv")]
    feature_format: FeatureEncoding,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Ratings file (.csv with header, or MovieLens .dat).
    #[arg(long)]
    ratings: Option<PathBuf>,
    /// Ratings format override: csv or movielens_dat.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    user_profile: Option<PathBuf>,
    #[arg(long)]
    item_text: Option<PathBuf>,
    #[arg(long)]
    item_image: Option<PathBuf>,
}

impl DataArgs {
    fn merge(&self, base: Option<DataPaths>) -> Result<DataPaths> {
        let mut paths = match (base, &self.ratings) {
            (_, Some(r)) => DataPaths {
                ratings: r.clone(),
                format: None,
                user_profile: None,
                item_text: None,
                item_image: None,
            },
            (Some(b), None) => b,
            (None, None) => return Err(Error::InvalidArgument("--ratings is required".into())),
        };
        if self.format.is_some() {
            paths.format = self.format.clone();
        }
        for (flag, slot) in [
            (&self.user_profile, &mut paths.user_profile),
            (&self.item_text, &mut paths.item_text),
            (&self.item_image, &mut paths.item_image),
        ] {
            if flag.is_some() {
                *slot = flag.clone();
            }
        }
        Ok(paths)
    }
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// random, cold_item, or all (train on everything; train only).
    #[arg(long, default_value = "random")]
    split: String,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    cold_fraction: f64,
    /// Seed for the split, model initialization and shuffling.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

impl SplitArgs {
    fn plan(&self, data: &InteractionSet, allow_all: bool) -> Result<Option<SplitPlan>> {
        let split = match self.split.as_str() {
            "all" if allow_all => return Ok(None),
            "random" => SplitConfig::Random {
                train_fraction: self.train_fraction,
            },
            "cold_item" => SplitConfig::ColdItem {
                cold_fraction: self.cold_fraction,
            },
            other => return Err(Error::InvalidArgument(format!("unsupported --split {other:?}"))),
        };
        let config = ExperimentConfig {
            seed: self.seed,
            split,
            ..ExperimentConfig::default()
        };
        Ok(Some(build_splits(&config, data)?.remove(0)))
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Experiment config supplying [data], [model], [train] and [svd]; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// bonmf, nmd, svd, bonmf_no_image, bonmf_no_text or bonmf_no_structured.
    #[arg(long, default_value = "bonmf")]
    model: String,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    l2_embedding: Option<f64>,
    #[arg(long)]
    id_dim: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Compute gradients on all cores (results stay bit-identical).
    #[arg(long)]
    parallel: bool,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training history path (default: checkpoint path + ".history").
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Only score interactions on cold items (needs --split cold_item).
    #[arg(long)]
    cold_only: bool,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    k: usize,
    /// Test ratings at or above this count as relevant.
    #[arg(long, default_value_t = 4.0)]
    threshold: f64,
    /// test_items or full_catalog.
    #[arg(long, default_value = "test_items")]
    candidates: CandidatePool,
    /// Report path prefix; writes <prefix>.kv and <prefix>.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = positive)]
    k: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma separated subset of the model rows.
    #[arg(long, value_delimiter = ',')]
    rows: Option<Vec<String>>,
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_users: a.users,
        n_items: a.items,
        latent_dim: a.latent,
        density: a.density,
        noise_sigma: a.noise,
        text_dim: a.text_dim,
        image_dim: a.image_dim,
        content_signal: a.content_signal,
        seed: a.seed,
    };
    let data = generate_synthetic(&spec)?;
    let ext = match a.feature_format {
        FeatureEncoding::Text => "tsv",
        FeatureEncoding::Binary => "bin",
    };

    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut ratings = Vec::new();
    write_ratings(&data.interactions, RatingsFormat::Csv, &mut ratings).map_err(|e| Error::io("ratings.csv", e))?;
    files.push(("ratings.csv".into(), ratings));
    for modality in Modality::ALL {
        let store = data.features.store(modality).expect("synthetic data has every modality");
        let mut buf = Vec::new();
        store.write(a.feature_format, &mut buf)?;
        files.push((format!("{modality}.{ext}"), buf));
    }
    let truth = serde_json::json!({
        "spec": spec,
        "user_ids": (0..spec.n_users).map(user_id).collect::<Vec<_>>(),
        "item_ids": (0..spec.n_items).map(item_id).collect::<Vec<_>>(),
        "truth": data.truth,
    });
    let mut truth = serde_json::to_vec_pretty(&truth).map_err(|e| Error::Report(e.to_string()))?;
    truth.push(b'\n');
    files.push(("planted_truth.json".into(), truth));

    create_dir(&a.out)?;
    for (name, bytes) in &files {
        write_atomic(&a.out.join(name), bytes)?;
    }
    println!(
        "wrote {} files to {} ({} users, {} items, {} ratings)",
        files.len(),
        a.out.display(),
        data.interactions.users().len(),
        data.interactions.items().len(),
        data.interactions.len()
    );
    Ok(())
}

fn parse_model_kind(s: &str) -> Result<RowKind> {
    RowKind::ALL
        .into_iter()
        .find(|r| r.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| Error::InvalidArgument(format!("unknown --model {s:?}")))
}

fn train(a: TrainArgs) -> Result<()> {
    let kind = parse_model_kind(&a.model)?;
    let mut config = match &a.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    let paths = a.data.merge(config.data.take())?;
    config.seed = a.split.seed;
    config.train = TrainConfig {
        epochs: a.epochs.unwrap_or(config.train.epochs),
        batch_size: a.batch_size.unwrap_or(config.train.batch_size),
        learning_rate: a.learning_rate.unwrap_or(config.train.learning_rate),
        l2_embedding: a.l2_embedding.unwrap_or(config.train.l2_embedding),
        parallel: a.parallel || config.train.parallel,
        seed: a.split.seed,
        ..config.train
    };
    config.svd.seed = a.split.seed;
    if let Some(d) = a.id_dim {
        config.model.id_embedding_dim = d;
    }
    if let Some(h) = a.hidden.clone() {
        config.model.hidden_dims = h;
    }
    config.train.validate()?;
    config.data = Some(paths);
    let ws = Workspace::load(&config)?;
    let plan = a.split.plan(&ws.data, true)?;
    let train_idx: Vec<usize> = match &plan {
        Some(p) => p.train.clone(),
        None => (0..ws.data.len()).collect(),
    };

    let (checkpoint, history) = match kind.model_config(&ws.base_model) {
        None => {
            let (m, h) = crate::baselines::svd_train_with_history(&ws.data, &train_idx, &config.svd)?;
            let mut kv = format!("epochs={}\n", h.epoch_train_mse.len());
            for (i, mse) in h.epoch_train_mse.iter().enumerate() {
                kv.push_str(&format!("epoch.{}.train_loss={mse}\n", i + 1));
            }
            (Checkpoint::Svd(m), kv)
        }
        Some(mc) => {
            let mut model =
                crate::model::BonmfModel::new(mc, ws.data.users().clone(), ws.data.items().clone(), config.seed)?;
            let examples = crate::train::TrainingData::new(&model, &ws.data, &train_idx, &ws.features)?;
            let h = crate::train::fit(&mut model, &examples, &config.train, None)?;
            (Checkpoint::Bonmf(model), h.to_kv())
        }
    };

    let mut bytes = Vec::new();
    checkpoint.save(&mut bytes)?;
    write_atomic(&a.out, &bytes)?;
    let history_path = a.history.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".history");
        PathBuf::from(p)
    });
    write_atomic(&history_path, history.as_bytes())?;
    let final_loss = history
        .lines()
        .rfind(|l| l.contains(".train_loss="))
        .and_then(|l| l.split('=').nth(1))
        .unwrap_or("n/a");
    println!(
        "trained {} on {} records; final train loss {final_loss}; checkpoint {}",
        kind,
        train_idx.len(),
        a.out.display()
    );
    Ok(())
}

fn check_feature_dims(checkpoint: &Checkpoint, features: &crate::data::FeatureSet) -> Result<()> {
    if let Checkpoint::Bonmf(m) = checkpoint {
        let config = m.config();
        for modality in Modality::ALL {
            if !config.modality_mask.uses(modality) {
                continue;
            }
            if let Some(store) = features.store(modality) {
                if store.dim() != config.modality_dim(modality) {
                    return Err(Error::Dimension {
                        context: format!("{modality} width (checkpoint vs feature file)"),
                        expected: config.modality_dim(modality),
                        actual: store.dim(),
                    });
                }
            }
        }
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let options = EvalOptions {
        k: a.k,
        relevance_threshold: a.threshold,
        candidates: a.candidates,
    };
    let bytes = std::fs::read(&a.checkpoint).map_err(|e| Error::io(&a.checkpoint, e))?;
    let checkpoint = Checkpoint::load(&bytes[..])?;
    let paths = a.data.merge(None)?;
    let (data, features) = load_dataset(&paths)?;
    check_feature_dims(&checkpoint, &features)?;
    let plan = a.split.plan(&data, false)?.expect("evaluation always splits");
    let test = if a.cold_only {
        if plan.cold_items.is_empty() {
            return Err(Error::InvalidArgument("--cold-only needs --split cold_item".into()));
        }
        plan.cold_test_records(&data)
    } else {
        plan.test.clone()
    };
    let predictor: &dyn Predictor = &checkpoint;
    let report = evaluate_records(predictor, &data, &test, &plan.train, &plan.fingerprint(), &features, &options)?;

    let table = format_text_table([(checkpoint.kind(), &report)]);
    let with_ext = |ext: &str| {
        let mut p = a.out.clone().into_os_string();
        p.push(ext);
        PathBuf::from(p)
    };
    write_atomic(&with_ext(".kv"), report.to_kv().as_bytes())?;
    write_atomic(&with_ext(".txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut config = ExperimentConfig::from_path(&a.config)?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(k) = a.k {
        config.k = k;
    }
    if let Some(t) = a.threshold {
        config.relevance_threshold = t;
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(rows) = &a.rows {
        config.rows = rows.iter().map(|r| parse_model_kind(r)).collect::<Result<_>>()?;
    }
    if a.out.is_some() {
        config.output = a.out.clone();
    }
    let out = config
        .output
        .clone()
        .ok_or_else(|| Error::InvalidArgument("no output directory: pass --out or set `output`".into()))?;
    config.validate()?;
    let ws = Workspace::load(&config)?;

    let mut files = Vec::new();
    let overall = if config.cold_start {
        let tables = run_cold_start_on(&config, &ws)?;
        files.push(("cold_only.txt", serialize_table(&tables.cold_only, TableFormat::Text)?));
        files.push(("cold_only.json", serialize_table(&tables.cold_only, TableFormat::Machine)?));
        tables.overall
    } else {
        run_experiment_on(&config, &ws)?
    };
    let text = serialize_table(&overall, TableFormat::Text)?;
    files.insert(0, ("table.json", serialize_table(&overall, TableFormat::Machine)?));
    files.insert(0, ("table.txt", text.clone()));

    create_dir(&out)?;
    for (name, bytes) in &files {
        write_atomic(&out.join(name), bytes)?;
    }
    std::io::stdout().write_all(&text).map_err(|e| Error::io("<stdout>", e))?;
    if config.cold_start {
        println!("\ncold items only:");
        std::io::stdout()
            .write_all(&files[2].1)
            .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}
