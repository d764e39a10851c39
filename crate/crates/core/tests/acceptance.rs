//! End-to-end acceptance checks on the synthetic benchmark.
//!
//! Runs with the default training configuration (up to 4000 epochs per
//! seed) and prints one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tower::ServiceExt;

use cvs::data::{gen_synthetic, Recipe, SyntheticSpec};
use cvs::model::{CvsModel, ModelDims};
use cvs::nn::Mode;
use cvs::oracle::{agreement, exhaustive_search, OracleConfig};
use cvs::selector::{run_selection, Selection, SelectionRequest, TrajectoryExport};
use cvs::service::{router, AppState, ServiceOptions};
use cvs::trainer::{check_convergence, TrainConfig};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const N_SAMPLES: usize = 2000;
const MASK_SUM_TOL: f64 = 1e-9;
const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const CONVERGENCE_WINDOW: usize = 400;
const CONVERGENCE_TOL: f64 = 1e-3;
const CONVERGENCE_LIMIT: usize = 4000;
const ORACLE_EPOCHS: usize = 50;
const ORACLE_VARIABLES: usize = 11;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn set(xs: &[String]) -> BTreeSet<String> {
    xs.iter().cloned().collect()
}

fn relevant() -> BTreeSet<String> {
    set(&names(&["v2", "v3", "v4", "v5", "v6"]))
}

fn run(ds: &cvs::data::Dataset, condition: &[&str], seed: u64) -> Selection {
    let req = SelectionRequest {
        condition: names(condition),
        k: 5,
        config: TrainConfig::with_seed(seed),
    };
    let start = Instant::now();
    let sel = run_selection(ds, &req).expect("selection runs");
    eprintln!(
        "  condition {:?} seed {seed}: {} epochs in {:.0}s, top-5 {:?}",
        condition,
        sel.record.epochs_run,
        start.elapsed().as_secs_f64(),
        sel.report.top_k
    );
    sel
}

fn eq7(seed: u64) -> cvs::data::Dataset {
    Recipe::Eq7.generate(SyntheticSpec::with_seed(seed)).unwrap()
}

fn score(sel: &Selection, name: &str) -> f64 {
    let i = sel.report.candidates.iter().position(|c| c == name).unwrap();
    sel.report.scores[i]
}

/// Position of `name` when candidates are sorted by descending score.
fn position(sel: &Selection, name: &str) -> usize {
    let s = score(sel, name);
    sel.report.scores.iter().filter(|&&x| x > s).count()
}

fn fmt_scores(sel: &Selection, vars: &[&str]) -> String {
    vars.iter()
        .map(|v| format!("{v}={:.4}", score(sel, v)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Every recorded mask plus the extracted scores, checked against 1.
fn worst_mask_sum(sel: &Selection) -> f64 {
    let sums = sel
        .record
        .trajectory
        .iter()
        .map(|p| p.mask.iter().sum::<f64>())
        .chain(std::iter::once(sel.report.scores.iter().sum::<f64>()));
    sums.map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
}

fn initial_is_uniform(sel: &Selection) -> bool {
    let first = &sel.record.trajectory[0];
    let uniform = 1.0 / first.mask.len() as f64;
    first.epoch == 0 && first.mask.iter().all(|&m| m == uniform)
}

fn experiment_one(runs: &[Selection]) -> Outcome {
    let mut hits = 0;
    let mut separated = true;
    let mut lines = Vec::new();
    for sel in runs {
        let ok = set(&sel.report.top_k) == relevant();
        let min_rel = relevant().iter().map(|v| score(sel, v)).fold(f64::INFINITY, f64::min);
        let max_irr = (7..=15).map(|i| score(sel, &format!("v{i}"))).fold(0.0, f64::max);
        if ok {
            hits += 1;
            separated &= min_rel > max_irr;
        }
        lines.push(format!("seed {} {} gap {:.4}", sel.report.seed, if ok { "hit" } else { "miss" }, min_rel - max_irr));
    }
    Outcome {
        name: "experiment I: top-5 = {v2..v6} given {v1}",
        passed: hits >= 4 && separated,
        detail: format!("{hits}/5 hits, separated in passing runs: {separated} ({})", lines.join(", ")),
    }
}

fn experiment_one_secondary(runs: &[Selection]) -> Outcome {
    let mut hits = 0;
    let mut lines = Vec::new();
    for sel in runs {
        let p = |v| position(sel, v);
        let above = [p("v3"), p("v4")].iter().all(|&a| a < p("v5") && a < p("v6"));
        let v1_last = ["v3", "v4", "v5", "v6"].iter().all(|v| p("v1") > p(v));
        if above && v1_last {
            hits += 1;
        }
        lines.push(format!("seed {} [{}]", sel.report.seed, fmt_scores(sel, &["v1", "v3", "v4", "v5", "v6"])));
    }
    Outcome {
        name: "experiment I: v3,v4 above v5,v6 and v1 last given {v2}",
        passed: hits >= 3,
        detail: format!("{hits}/5 ({})", lines.join(", ")),
    }
}

fn experiment_two(runs: &[Selection]) -> Outcome {
    let hits = runs.iter().filter(|sel| sel.report.ranking[0] == "v4").count();
    let firsts: Vec<&str> = runs.iter().map(|s| s.report.ranking[0].as_str()).collect();
    Outcome {
        name: "experiment II: v4 ranked first given {v2,v3}",
        passed: hits >= 4,
        detail: format!("{hits}/5, rank-1 per seed {firsts:?}"),
    }
}

fn experiment_three(runs: &[Selection]) -> Outcome {
    let mut hits = 0;
    let mut lines = Vec::new();
    for sel in runs {
        let threshold = 1.0 / sel.report.candidates.len() as f64 / 10.0;
        let v1 = score(sel, "v1");
        let ok = set(&sel.report.top_k) == relevant() && v1 < threshold;
        if ok {
            hits += 1;
        }
        lines.push(format!(
            "seed {} v1={v1:.4} threshold {threshold:.4} top-5 ok {}",
            sel.report.seed,
            set(&sel.report.top_k) == relevant()
        ));
    }
    Outcome {
        name: "experiment III: v1 suppressed given {v7 = v1^2}",
        passed: hits >= 4,
        detail: format!("{hits}/5 ({})", lines.join(", ")),
    }
}

fn duplicate(runs: &[Selection]) -> Outcome {
    let mut hits = 0;
    let mut lines = Vec::new();
    for sel in runs {
        let threshold = 1.0 / sel.report.candidates.len() as f64 / 10.0;
        let (a, b) = (score(sel, "v8"), score(sel, "v8r"));
        if a.min(b) < threshold {
            hits += 1;
        }
        lines.push(format!("seed {} v8={a:.4} v8r={b:.4}", sel.report.seed));
    }
    Outcome {
        name: "duplicate: lower of {v8, v8r} below uniform/10",
        passed: hits >= 3,
        detail: format!("{hits}/5 ({})", lines.join(", ")),
    }
}

/// Central differences over every parameter, independent of the library's
/// own checker.
fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut dims = ModelDims::new(2, vec![0..1, 1..3, 3..4]);
    dims.task_hidden = [5, 3];
    let mut model = CvsModel::init(dims, 4).unwrap();
    let mut params = model.flat_params();
    for p in params.iter_mut() {
        *p = rng.random_range(-0.8..0.8);
    }
    model.set_flat_params(&params).unwrap();
    let batch = |rng: &mut ChaCha8Rng, r, c| Array2::from_shape_simple_fn((r, c), || rng.random_range(0.0..1.0));
    let xp = batch(&mut rng, 6, 2);
    let xc = batch(&mut rng, 6, 4);
    let y = batch(&mut rng, 6, 1);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
    let (_, grads) = model
        .loss_and_grads(xp.view(), xc.view(), y.view(), Mode::Eval, &mut eval_rng)
        .unwrap();
    let analytic = grads.flatten();
    let mut probe = model.clone();
    let mut loss_at = |p: &[f64]| {
        probe.set_flat_params(p).unwrap();
        let pred = probe.predict(xp.view(), xc.view()).unwrap();
        (&pred - &y).mapv(|d| d * d).mean().unwrap()
    };
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += GRAD_STEP;
        let up = loss_at(&p);
        p[i] -= 2.0 * GRAD_STEP;
        let down = loss_at(&p);
        let numeric = (up - down) / (2.0 * GRAD_STEP);
        let rel = (numeric - analytic[i]).abs() / (numeric.abs() + analytic[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Outcome {
        name: "gradients match central differences",
        passed: worst < GRAD_TOL,
        detail: format!("{} parameters, max relative error {worst:.2e}", params.len()),
    }
}

fn oracle_agreement() -> Outcome {
    let spec = SyntheticSpec {
        n_variables: ORACLE_VARIABLES,
        ..SyntheticSpec::with_seed(1)
    };
    let ds = gen_synthetic(&spec).unwrap();
    let cvs_run = run(&ds, &["v1"], 1);
    let cfg = OracleConfig {
        epochs: ORACLE_EPOCHS,
        ..OracleConfig::default()
    };
    let start = Instant::now();
    let table = exhaustive_search(&ds, &names(&["v1"]), 5, &cfg).unwrap();
    eprintln!("  exhaustive search: {} subsets in {:.0}s", table.results.len(), start.elapsed().as_secs_f64());
    let best = table.best().map(|b| b.subset.clone()).unwrap_or_default();
    let matched = set(&best) == set(&cvs_run.report.top_k);
    let score = agreement(&cvs_run.report, &table, 5).unwrap();
    Outcome {
        name: "oracle: exhaustive best subset equals CVS top-5",
        passed: table.results.len() == 252 && matched && score == 1.0,
        detail: format!(
            "{} rows, oracle best {best:?}, CVS top-5 {:?}, agreement {score}",
            table.results.len(),
            cvs_run.report.top_k
        ),
    }
}

fn digest(sel: &Selection) -> String {
    let report = sel.report.to_json().unwrap();
    let traj = TrajectoryExport::new(&sel.report, &sel.record, true).to_json().unwrap();
    hex::encode(Sha256::digest(format!("{report}\n{traj}").as_bytes()))
}

fn determinism(first: &Selection) -> Outcome {
    let again = run(&eq7(first.report.seed), &["v1"], first.report.seed);
    let (a, b) = (digest(first), digest(&again));
    Outcome {
        name: "determinism: repeated run hashes identically",
        passed: a == b,
        detail: format!("{} vs {}", &a[..16], &b[..16]),
    }
}

fn convergence(sel: &Selection) -> Outcome {
    let at = check_convergence(&sel.record.trajectory, CONVERGENCE_WINDOW, CONVERGENCE_TOL);
    Outcome {
        name: "convergence within 4000 epochs",
        passed: matches!(at, Some(e) if e <= CONVERGENCE_LIMIT),
        detail: format!("converged at {at:?} over {} epochs", sel.record.epochs_run),
    }
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

/// Masks seen through the service: live progress, trajectory and report.
fn service_mask_sums() -> f64 {
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async {
        let state = AppState::new(ServiceOptions { workers: 1, data_dir: None }).unwrap();
        let app = router(Arc::clone(&state));
        let (status, ds) = call(&app, "POST", "/datasets", Some(json!({"recipe": "eq7", "n": 400, "seed": 9}))).await;
        assert_eq!(status, StatusCode::CREATED);
        let job = json!({"dataset_id": ds["id"], "condition": ["v1"], "config": {"max_epochs": 300, "seed": 9}});
        let (status, job) = call(&app, "POST", "/jobs", Some(job)).await;
        assert_eq!(status, StatusCode::ACCEPTED);
        let id = job["id"].as_str().unwrap().to_string();
        let sum = |v: &Value| v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum::<f64>();
        let mut worst: f64 = 0.0;
        let start = Instant::now();
        loop {
            let (_, view) = call(&app, "GET", &format!("/jobs/{id}"), None).await;
            if let Some(mask) = view["progress"]["mask"].as_array() {
                if !mask.is_empty() {
                    worst = worst.max((sum(&view["progress"]["mask"]) - 1.0).abs());
                }
            }
            if view["state"] == "done" {
                break;
            }
            assert!(view["state"] != "failed", "{view}");
            assert!(start.elapsed() < Duration::from_secs(600));
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        let (_, traj) = call(&app, "GET", &format!("/jobs/{id}/trajectory"), None).await;
        for m in traj["masks"].as_array().unwrap() {
            worst = worst.max((sum(m) - 1.0).abs());
        }
        let (_, report) = call(&app, "GET", &format!("/jobs/{id}/report"), None).await;
        worst.max((sum(&report["scores"]) - 1.0).abs())
    })
}

fn main() {
    let t0 = Instant::now();
    let mut outcomes = vec![gradient_check()];

    eprintln!("experiment I, condition {{v1}}");
    let exp1: Vec<Selection> = SEEDS.iter().map(|&s| run(&eq7(s), &["v1"], s)).collect();
    eprintln!("experiment I, condition {{v2}}");
    let exp1b: Vec<Selection> = SEEDS.iter().map(|&s| run(&eq7(s), &["v2"], s)).collect();
    eprintln!("experiment II");
    let exp2: Vec<Selection> = SEEDS.iter().map(|&s| run(&eq7(s), &["v2", "v3"], s)).collect();
    eprintln!("experiment III");
    let exp3: Vec<Selection> = SEEDS
        .iter()
        .map(|&s| run(&Recipe::Eq7Redundant.generate(SyntheticSpec::with_seed(s)).unwrap(), &["v7"], s))
        .collect();
    eprintln!("duplicate");
    let dup: Vec<Selection> = SEEDS
        .iter()
        .map(|&s| run(&Recipe::Eq7Duplicate.generate(SyntheticSpec::with_seed(s)).unwrap(), &["v1"], s))
        .collect();
    assert!(exp1.iter().all(|s| s.report.candidates.len() == 14 && s.record.trajectory.len() > 1));
    assert_eq!(eq7(1).len(), N_SAMPLES);

    outcomes.push(experiment_one(&exp1));
    outcomes.push(experiment_one_secondary(&exp1b));
    outcomes.push(experiment_two(&exp2));
    outcomes.push(experiment_three(&exp3));
    outcomes.push(duplicate(&dup));

    let all: Vec<&Selection> = [&exp1, &exp1b, &exp2, &exp3, &dup].into_iter().flatten().collect();
    let uniform = all.iter().filter(|s| initial_is_uniform(s)).count();
    outcomes.push(Outcome {
        name: "initial mask is exactly uniform",
        passed: uniform == all.len(),
        detail: format!("{uniform}/{} runs", all.len()),
    });

    eprintln!("service run");
    let local = all.iter().map(|s| worst_mask_sum(s)).fold(0.0, f64::max);
    let served = service_mask_sums();
    let masks: usize = all.iter().map(|s| s.record.trajectory.len()).sum();
    outcomes.push(Outcome {
        name: "every mask sums to one",
        passed: local < MASK_SUM_TOL && served < MASK_SUM_TOL,
        detail: format!("{masks} recorded masks, worst |sum-1| {local:.1e}, via service {served:.1e}"),
    });

    eprintln!("oracle");
    outcomes.push(oracle_agreement());
    eprintln!("determinism");
    outcomes.push(determinism(&exp1[0]));
    outcomes.push(convergence(&exp1[0]));

    println!();
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!(
        "\n{} passed, {failed} failed in {:.0}s",
        outcomes.len() - failed,
        t0.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
