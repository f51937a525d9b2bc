//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the report reads in
//! order and each criterion is timed on its own.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use bonmf::baselines::{svd_train, SvdConfig};
use bonmf::checkpoint::Checkpoint;
use bonmf::data::{
    cold_item_split, parse_feature_file, parse_ratings, random_split, write_ratings, FeatureEncoding,
    InteractionSet, Modality, RatingsFormat, SyntheticSpec,
};
use bonmf::eval::{ndcg_at_k, precision_at_k, rank_items, EvalReport, RelevanceJudgments};
use bonmf::experiment::{
    parse_machine_table, run_cold_start_on, run_experiment_on, serialize_table, train_row, ExperimentConfig,
    RowKind, SplitConfig, TableFormat, Workspace,
};
use bonmf::model::{ModalityMask, Predictor};
use bonmf::numerics::{finite_difference_gradient, max_relative_error, DenseVector, RngState};
use common::{oracle_ndcg, oracle_order, oracle_precision, tiny_smooth};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn manifest_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

fn bonmf_cli<I, S>(args: I) -> (i32, String)
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = Command::new(env!("CARGO_BIN_EXE_bonmf")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn synthetic_config(seed: u64, density: f64, rows: &[RowKind]) -> ExperimentConfig {
    ExperimentConfig {
        synthetic: Some(SyntheticSpec {
            density,
            content_signal: 0.9,
            noise_sigma: 0.1,
            seed,
            ..SyntheticSpec::default()
        }),
        rows: rows.to_vec(),
        ..ExperimentConfig::default()
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = RngState::new(1);
    let (mut instances, mut worst) = (0, 0.0f64);
    while instances < 1000 {
        let k = 1 + rng.below(6);
        let n_users = 1 + rng.below(4);
        let mut ranked = Vec::new();
        let mut orders = Vec::new();
        let mut relevant = BTreeMap::new();
        for u in 0..n_users {
            let n = 1 + rng.below(12);
            let scores: Vec<(usize, f64)> = (0..n).map(|i| (i, (rng.below(5) as f64) / 2.0)).collect();
            ranked.push(rank_items(u, &scores, k));
            orders.push(oracle_order(&scores));
            relevant.insert(u, (0..n).filter(|_| rng.unit() < 0.35).collect::<BTreeSet<usize>>());
        }
        let scored: Vec<usize> = (0..n_users).filter(|u| !relevant[u].is_empty()).collect();
        if scored.is_empty() {
            continue;
        }
        for (list, order) in ranked.iter().zip(&orders) {
            let got: Vec<usize> = list.items.iter().map(|x| x.0).collect();
            if got != order[..order.len().min(k)] {
                return Err(format!("instance {instances}: ranking {got:?} vs oracle {order:?}"));
            }
        }
        let judged = RelevanceJudgments {
            threshold: 4.0,
            relevant: relevant.clone(),
        };
        let p = precision_at_k(&ranked, &judged, k).map_err(e2s)?.value;
        let n = ndcg_at_k(&ranked, &judged, k).map_err(e2s)?.value;
        let mean = |f: &dyn Fn(usize) -> f64| scored.iter().map(|&u| f(u)).sum::<f64>() / scored.len() as f64;
        let want_p = mean(&|u| oracle_precision(&orders[u], &relevant[&u], k));
        let want_n = mean(&|u| oracle_ndcg(&orders[u], &relevant[&u], k));
        worst = worst.max((p - want_p).abs()).max((n - want_n).abs());
        instances += 1;
    }
    check(worst <= 1e-12, format!("{instances} instances, max |diff| {worst:.1e}"))
}

fn gradient_check() -> Outcome {
    let masks = ModalityMask::all_non_empty();
    let (mut models, mut worst) = (0, 0.0f64);
    for (m, mask) in masks.iter().enumerate() {
        for rep in 0..2 {
            let t = tiny_smooth(*mask, 7000 + 10 * m as u64 + rep);
            let analytic = t.analytic_gradient();
            let mut probe = t.model.clone();
            let numeric = finite_difference_gradient(
                |p| {
                    probe.set_params_flat(p.as_slice()).unwrap();
                    t.loss(&probe)
                },
                &DenseVector::new(t.model.params_flat()),
                1e-5,
            )
            .map_err(e2s)?;
            worst = worst.max(max_relative_error(&analytic, numeric.as_slice()));
            models += 1;
        }
    }
    check(
        worst < 1e-4 && models >= 20,
        format!("{models} models over {} masks, max relative error {worst:.2e}", masks.len()),
    )
}

fn planted_convergence() -> Outcome {
    let mut config = synthetic_config(7, 0.1, &[RowKind::BoNMF]);
    config.synthetic.as_mut().unwrap().latent_dim = 8;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(e2s)?;
    let table = pool.install(|| {
        let ws = Workspace::load(&config)?;
        run_experiment_on(&config, &ws)
    });
    let mse = table.map_err(e2s)?.get("BoNMF").unwrap().mse;
    check(mse <= 0.06, format!("test MSE {mse:.4} (bound 0.06), 10 epochs, 1 thread"))
}

fn synthetic_ordering() -> Outcome {
    let rows = [RowKind::BoNMF, RowKind::NMD, RowKind::BoNMFNoText];
    let mut by_row: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for seed in [7, 8, 9] {
        let config = synthetic_config(seed, 0.02, &rows);
        let ws = Workspace::load(&config).map_err(e2s)?;
        let table = run_experiment_on(&config, &ws).map_err(e2s)?;
        for row in &table.rows {
            by_row.entry(row.model.clone()).or_default().push(row.report.mse);
        }
    }
    let (b, n, t) = (
        median(by_row["BoNMF"].clone()),
        median(by_row["NMD"].clone()),
        median(by_row["BoNMF_no_text"].clone()),
    );
    let margin = (n - b) / n;
    check(
        margin >= 0.05 && b < t,
        format!("median MSE BoNMF {b:.4}, NMD {n:.4} (margin {:.1}%), BoNMF_no_text {t:.4}", 100.0 * margin),
    )
}

fn cold_start() -> Outcome {
    let rows = [RowKind::BoNMF, RowKind::NMD, RowKind::SVD];
    let (mut bonmf, mut nmd) = (Vec::new(), Vec::new());
    let mut invariance_checks = 0;
    for seed in [7, 8, 9] {
        let mut config = synthetic_config(seed, 0.02, &rows);
        config.split = SplitConfig::ColdItem { cold_fraction: 0.1 };
        config.cold_start = true;
        let ws = Workspace::load(&config).map_err(e2s)?;
        let tables = run_cold_start_on(&config, &ws).map_err(e2s)?;
        bonmf.push(tables.cold_only.get("BoNMF").unwrap().mse);
        nmd.push(tables.cold_only.get("NMD").unwrap().mse);

        let plan = cold_item_split(&ws.data, 0.1, config.seed).map_err(e2s)?;
        let svd = train_row(RowKind::SVD, &ws, &plan.train, &config).map_err(e2s)?;
        let users: BTreeSet<&str> = plan
            .cold_test_records(&ws.data)
            .iter()
            .map(|&i| ws.data.records()[i].user_id.as_str())
            .collect();
        for user in users {
            let preds = plan
                .cold_items
                .iter()
                .map(|item| svd.predict_ids(user, item, &ws.features).map(f64::to_bits))
                .collect::<bonmf::Result<BTreeSet<u64>>>()
                .map_err(e2s)?;
            if preds.len() != 1 {
                return Err(format!("seed {seed}: SVD cold predictions vary across items for {user}"));
            }
            invariance_checks += 1;
        }
    }
    let (b, n) = (median(bonmf), median(nmd));
    let margin = (n - b) / n;
    check(
        margin >= 0.20,
        format!(
            "median cold-only MSE BoNMF {b:.4}, NMD {n:.4} (margin {:.1}%); SVD item-invariant for {invariance_checks} users",
            100.0 * margin
        ),
    )
}

/// Dense `3 + u·v` with rank-2 factors small enough that no entry leaves
/// the rating range, so the matrix is exactly rank 2 plus an offset.
fn rank2_matrix(n: usize, seed: u64) -> InteractionSet {
    let mut rng = RngState::new(seed);
    loop {
        let mut draw = || [rng.gaussian(0.0, 0.5), rng.gaussian(0.0, 0.5)];
        let u: Vec<[f64; 2]> = (0..n).map(|_| draw()).collect();
        let v: Vec<[f64; 2]> = (0..n).map(|_| draw()).collect();
        let cells: Vec<(usize, usize, f64)> = (0..n)
            .flat_map(|a| (0..n).map(move |b| (a, b)))
            .map(|(a, b)| (a, b, 3.0 + u[a][0] * v[b][0] + u[a][1] * v[b][1]))
            .collect();
        if cells.iter().all(|c| (1.0..=5.0).contains(&c.2)) {
            let mut set = InteractionSet::new();
            for (a, b, r) in cells {
                set.push(&format!("u{a}"), &format!("i{b}"), r, None, 0).unwrap();
            }
            return set;
        }
    }
}

fn svd_sanity() -> Outcome {
    let config = SvdConfig {
        rank: 2,
        epochs: 50,
        learning_rate: 0.05,
        regularization: 0.0,
        ..SvdConfig::default()
    };
    let mut rmses = Vec::new();
    for seed in [1, 2, 3] {
        let data = rank2_matrix(50, seed);
        let plan = random_split(&data, 0.7, 42).map_err(e2s)?;
        let model = svd_train(&data, &plan.train, &config).map_err(e2s)?;
        let r = data.records();
        let mse = plan
            .test
            .iter()
            .map(|&i| (model.predict(Some(r[i].user), Some(r[i].item)) - r[i].rating).powi(2))
            .sum::<f64>()
            / plan.test.len() as f64;
        rmses.push(mse.sqrt());
    }
    let worst = rmses.iter().copied().fold(0.0, f64::max);
    check(
        worst < 0.05,
        format!("test RMSE {:?} on three 50x50 instances", rmses.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>()),
    )
}

fn determinism() -> Outcome {
    let config = manifest_dir().join("../../configs/reference_synthetic.toml");
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let mut tables = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let (code, stderr) = bonmf_cli([
            "ablate".as_ref(),
            "--config".as_ref(),
            config.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ]);
        if code != 0 {
            return Err(format!("ablate exited {code}: {stderr}"));
        }
        tables.push(std::fs::read(out.join("table.json")).map_err(e2s)?);
    }
    check(
        tables[0] == tables[1],
        format!("two reference runs, table.json {} bytes each, identical", tables[0].len()),
    )
}

fn round_trips() -> Outcome {
    let fixture = manifest_dir().join("tests/fixtures/movielens_small");
    let mut checked = Vec::new();

    let dat = std::fs::read(fixture.join("ratings.dat")).map_err(e2s)?;
    let ratings = parse_ratings(&dat[..], RatingsFormat::MovielensDat).map_err(e2s)?;
    for format in [RatingsFormat::MovielensDat, RatingsFormat::Csv] {
        let mut buf = Vec::new();
        write_ratings(&ratings, format, &mut buf).map_err(e2s)?;
        let back = parse_ratings(&buf[..], format).map_err(e2s)?;
        if back.records() != ratings.records() {
            return Err(format!("ratings {format:?} round-trip changed records"));
        }
    }
    checked.push("ratings csv+dat");

    let mut features = bonmf::data::FeatureSet::default();
    for (modality, file) in [
        (Modality::UserProfile, "user_profile.tsv"),
        (Modality::ItemText, "item_text.tsv"),
        (Modality::ItemImage, "item_image.bin"),
    ] {
        let bytes = std::fs::read(fixture.join(file)).map_err(e2s)?;
        let store = parse_feature_file(&bytes[..], modality).map_err(e2s)?;
        for encoding in [FeatureEncoding::Text, FeatureEncoding::Binary] {
            let mut buf = Vec::new();
            store.write(encoding, &mut buf).map_err(e2s)?;
            if parse_feature_file(&buf[..], modality).map_err(e2s)? != store {
                return Err(format!("{modality} {encoding:?} round-trip changed the store"));
            }
        }
        features.set(store);
    }
    checked.push("features text+binary");

    let mut config = ExperimentConfig::from_path(&fixture.join("experiment.toml")).map_err(e2s)?;
    config.train.epochs = 1;
    let ws = Workspace::load(&config).map_err(e2s)?;
    let plan = random_split(&ws.data, 0.7, 1).map_err(e2s)?;
    for kind in [RowKind::BoNMF, RowKind::SVD] {
        let model = train_row(kind, &ws, &plan.train, &config).map_err(e2s)?;
        let mut first = Vec::new();
        model.save(&mut first).map_err(e2s)?;
        let loaded = Checkpoint::load(&first[..]).map_err(e2s)?;
        let mut second = Vec::new();
        loaded.save(&mut second).map_err(e2s)?;
        let r = &ws.data.records()[plan.test[0]];
        let same = first == second
            && model.predict_ids(&r.user_id, &r.item_id, &features).map_err(e2s)?.to_bits()
                == loaded.predict_ids(&r.user_id, &r.item_id, &features).map_err(e2s)?.to_bits();
        if !same {
            return Err(format!("{} checkpoint round-trip differs", model.kind()));
        }
    }
    checked.push("checkpoints bonmf+svd");

    let table = run_experiment_on(
        &ExperimentConfig {
            rows: vec![RowKind::SVD, RowKind::NMD],
            ..config.clone()
        },
        &ws,
    )
    .map_err(e2s)?;
    for row in &table.rows {
        if EvalReport::from_kv(&row.report.to_kv()).map_err(e2s)? != row.report {
            return Err(format!("{} report kv round-trip differs", row.model));
        }
    }
    let machine = serialize_table(&table, TableFormat::Machine).map_err(e2s)?;
    if parse_machine_table(&machine).map_err(e2s)? != table {
        return Err("machine table round-trip differs".into());
    }
    checked.push("reports kv+machine table");

    let corpus = manifest_dir().join("tests/fixtures/malformed");
    let manifest = std::fs::read_to_string(corpus.join("MANIFEST.tsv")).map_err(e2s)?;
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let out = tmp.path().join("out");
    let good = |f: &str| fixture.join(f).into_os_string();
    let mut bad_files = 0;
    for line in manifest.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split('\t').collect();
        let (file, expected): (PathBuf, i32) = (corpus.join(f[0]), f[2].parse().map_err(e2s)?);
        let args: Vec<std::ffi::OsString> = match f[1] {
            "ratings" => vec!["train".into(), "--model".into(), "svd".into(), "--ratings".into(), file.into()],
            "features" => vec![
                "train".into(),
                "--ratings".into(),
                good("ratings.dat"),
                "--user-profile".into(),
                good("user_profile.tsv"),
                "--item-image".into(),
                good("item_image.bin"),
                "--item-text".into(),
                file.into(),
            ],
            "checkpoint" => vec![
                "evaluate".into(),
                "--checkpoint".into(),
                file.into(),
                "--ratings".into(),
                good("ratings.dat"),
            ],
            "config" => vec!["ablate".into(), "--config".into(), file.into()],
            "report" => {
                let text = std::fs::read_to_string(&file).map_err(e2s)?;
                let code = EvalReport::from_kv(&text).map_or_else(|e| e.exit_code(), |_| 0);
                if code != expected {
                    return Err(format!("{}: exit {code}, documented {expected}", f[0]));
                }
                bad_files += 1;
                continue;
            }
            other => return Err(format!("unknown corpus kind {other}")),
        };
        let (code, stderr) = bonmf_cli(args.into_iter().chain(["--out".into(), out.clone().into_os_string()]));
        if code != expected || stderr.contains("panicked") {
            return Err(format!("{}: exit {code}, documented {expected}: {stderr}", f[0]));
        }
        bad_files += 1;
    }
    check(
        bad_files >= 15,
        format!("{}; {bad_files} malformed files gave documented codes", checked.join(", ")),
    )
}

fn real_data_path() -> Outcome {
    let (config, source) = match std::env::var_os("BONMF_REAL_DATA_CONFIG") {
        Some(path) => (PathBuf::from(path), "user-supplied data"),
        None => (
            manifest_dir().join("tests/fixtures/movielens_small/experiment.toml"),
            "bundled MovieLens-format fixture (set BONMF_REAL_DATA_CONFIG for real data)",
        ),
    };
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let out = tmp.path().join("out");
    let (code, stderr) = bonmf_cli([
        "ablate".as_ref(),
        "--config".as_ref(),
        config.as_os_str(),
        "--out".as_ref(),
        out.as_os_str(),
    ]);
    if code != 0 {
        return Err(format!("ablate exited {code}: {stderr}"));
    }
    let text = std::fs::read_to_string(out.join("table.txt")).map_err(e2s)?;
    let header = text.lines().next().unwrap_or_default();
    let cells: Vec<&str> = header.split('|').map(str::trim).collect();
    let joined = cells.join(" | ");
    check(
        joined == "Model | MSE | Precision@K | NDCG",
        format!("{source}: header {joined:?}, {} rows", text.lines().count() - 1),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("metric oracle equivalence", Duration::from_secs(10), metric_oracle),
        ("gradient correctness", Duration::from_secs(30), gradient_check),
        ("planted-model convergence", Duration::from_secs(120), planted_convergence),
        ("synthetic multimodal ordering", Duration::from_secs(300), synthetic_ordering),
        ("cold-start advantage", Duration::from_secs(300), cold_start),
        ("SVD baseline sanity", Duration::from_secs(30), svd_sanity),
        ("determinism", Duration::MAX, determinism),
        ("format round-trips", Duration::MAX, round_trips),
        ("real-data path", Duration::MAX, real_data_path),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let (status, detail) = match outcome {
            Ok(d) if elapsed <= *budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the {}s budget", budget.as_secs())),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("criterion {} ({name}): {status} - {detail} [{:.1}s]", i + 1, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
