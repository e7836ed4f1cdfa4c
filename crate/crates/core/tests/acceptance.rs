//! Acceptance suite: one PASS/FAIL/SKIP line per criterion, nonzero exit on any FAIL.
//!
//! Criterion 11 needs the CTU-13 CSVs; point `SOUL_CTU13_DIR` at their directory.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::Rng;
use soul::data::{cir, SyntheticSpec};
use soul::eval::{aut, format_pct, pr_auc, savings_pct};
use soul::experiment::{run, run_seed, DatasetSource, RunConfig};
use soul::gpm::{extract_basis, project_gradients, GpmMemory};
use soul::linalg::{cosine_distance, svd, Matrix};
use soul::nn::{Gradients, LossWeights, MlpModel, Mode, ModelSpec, TrainBatch};
use soul::owl::{budget, cir_caps, LabelSource};
use soul::rng_from_seed;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn random_matrix(rng: &mut soul::SoulRng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn c1_aut() -> Outcome {
    let a = aut(&[0.985, 0.506]).unwrap();
    let b = aut(&[1.0, 0.0, 1.0]).unwrap();
    verdict(
        (a - 0.7455).abs() <= 1e-12 && (b - 0.5).abs() <= 1e-12,
        format!("aut(0.985,0.506)={a}, aut(1,0,1)={b}"),
    )
}

fn c2_cir() -> Outcome {
    let t1 = cir(5197, 229_737);
    let t2 = cir(5674, 270_453);
    let mean = (t1 + t2) / 2.0;
    verdict(
        (t1 - 0.0226215).abs() <= 1e-7
            && (t2 - 0.02097961).abs() <= 1e-7
            && (mean - 0.021800555).abs() <= 1e-7,
        format!("cir1={t1:.9}, cir2={t2:.9}, mean={mean:.9}"),
    )
}

fn c3_budget() -> Outcome {
    let (n, r, pi) = (354_613usize, 0.2, 0.021800555);
    let (cap_a, cap_b) = cir_caps(pi, r, n);
    let target_a = budget(r * pi * n as f64, 0.0);
    let target_b = budget(r * (1.0 - pi) * n as f64, 0.0);
    let near = |x: usize, want: usize| x.abs_diff(want) <= 1;
    verdict(
        near(target_a, 1545) && near(target_b, 69377) && near(cap_a, 1545) && near(cap_b, 69377),
        format!("targets {target_a}/{target_b}, caps {cap_a}/{cap_b} (want 1545/69377 ±1)"),
    )
}

fn c4_savings() -> Outcome {
    let s = format_pct(savings_pct(62906, 72101));
    verdict(s == "46.5", format!("savings = {s}%"))
}

const FD_STEP: f64 = 1e-5;

fn c5_gradients() -> Outcome {
    let (mut ok, mut total) = (0usize, 0usize);
    let models = 24;
    for seed in 0..models {
        let mut rng = rng_from_seed(5000 + seed);
        let input_dim = rng.random_range(2..5);
        let hidden: Vec<usize> = (0..rng.random_range(1..3))
            .map(|_| rng.random_range(2..6))
            .collect();
        let spec = ModelSpec {
            input_dim,
            hidden,
            batchnorm: seed % 3 != 0,
            dropout: 0.0,
        };
        let mut model = MlpModel::new(&spec, &mut rng).unwrap();
        // Zero biases put all-zero ReLU rows exactly on the kink, where finite
        // differences and the subgradient disagree; move off it.
        for layer in &mut model.layers {
            for b in &mut layer.bias {
                *b = rng.random_range(-0.2..0.2);
            }
            if let Some(bn) = &mut layer.batchnorm {
                for j in 0..bn.gamma.len() {
                    bn.gamma[j] = rng.random_range(0.5..1.5);
                    bn.beta[j] = rng.random_range(-0.3..0.3);
                    bn.running_mean[j] = rng.random_range(-0.2..0.2);
                    bn.running_var[j] = rng.random_range(0.5..2.0);
                }
            }
        }
        let teacher = MlpModel::new(&spec, &mut rng).unwrap();
        let n = rng.random_range(2..=8);
        let inputs = random_matrix(&mut rng, n, input_dim);
        let batch = TrainBatch {
            inputs,
            targets: (0..n).map(|_| rng.random_range(0..2u8)).collect(),
            unlabeled_start: rng.random_range(0..n),
        };
        let mode = if seed % 2 == 0 {
            Mode::Eval
        } else {
            Mode::Train { dropout_seed: None }
        };
        let loss = |m: &MlpModel| {
            m.loss_and_gradients(Some(&teacher), &batch, LossWeights::default(), mode)
                .unwrap()
                .loss
                .total()
        };
        let analytic = model
            .loss_and_gradients(Some(&teacher), &batch, LossWeights::default(), mode)
            .unwrap()
            .gradients
            .flatten();
        let base = model.flat_params();
        let mut probe = model.clone();
        for (i, a) in analytic.iter().enumerate() {
            let mut p = base.clone();
            p[i] += FD_STEP;
            probe.set_flat_params(&p).unwrap();
            let lp = loss(&probe);
            p[i] -= 2.0 * FD_STEP;
            probe.set_flat_params(&p).unwrap();
            let lm = loss(&probe);
            let num = (lp - lm) / (2.0 * FD_STEP);
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            ok += (rel <= 1e-4) as usize;
            total += 1;
        }
    }
    let frac = ok as f64 / total as f64;
    verdict(
        frac >= 0.99,
        format!("{models} models, {ok}/{total} params within 1e-4"),
    )
}

fn c6_svd_gpm() -> Outcome {
    let mut rng = rng_from_seed(6000);
    let mut worst_recon: f64 = 0.0;
    let mut q_mismatch = 0;
    for case in 0..100 {
        let rows = rng.random_range(2..30);
        let cols = rng.random_range(1..30);
        let m = random_matrix(&mut rng, rows, cols);
        let s = svd(&m).unwrap();
        let rel = s.reconstruct().sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
        worst_recon = worst_recon.max(rel);

        let delta = [0.5, 0.9, 0.97, 0.99][case % 4];
        let q = extract_basis(&m, delta).unwrap().cols();
        // Brute force: smallest q whose top-q left vectors capture delta of the energy.
        let total = m.frobenius_norm().powi(2);
        let brute = (0..=s.singular_values.len())
            .find(|&k| {
                if k == 0 {
                    return total * delta <= 0.0;
                }
                let cols: Vec<Vec<f64>> = (0..k).map(|j| s.left_vectors.column(j)).collect();
                let uk = Matrix::from_columns(&cols).unwrap();
                uk.matmul_tn(&m).unwrap().frobenius_norm().powi(2) >= delta * total
            })
            .unwrap();
        q_mismatch += (q != brute) as usize;
    }

    let mut worst_proj: f64 = 0.0;
    let mut worst_orth: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = rng_from_seed(6100 + seed);
        let spec = ModelSpec {
            input_dim: 6,
            hidden: vec![8, 5],
            batchnorm: true,
            dropout: 0.0,
        };
        let model = MlpModel::new(&spec, &mut rng).unwrap();
        let mut mem = GpmMemory::new(&model, 0.97, 64).unwrap();
        for _ in 0..2 {
            let ex = random_matrix(&mut rng, 40, 6);
            mem.update(&model, &ex).unwrap();
        }
        worst_orth = worst_orth.max(mem.orthonormality_error());
        let mut g = Gradients::zeros_like(&model);
        for lg in &mut g.layers {
            let (r, c) = lg.weights.shape();
            lg.weights = random_matrix(&mut rng, r, c);
        }
        let once = project_gradients(&g, &mem).unwrap();
        let twice = project_gradients(&once, &mem).unwrap();
        for ((a, b), basis) in once.layers.iter().zip(&twice.layers).zip(&mem.bases) {
            worst_proj = worst_proj.max(a.weights.max_abs_diff(&b.weights).unwrap());
            if basis.cols() > 0 {
                worst_proj = worst_proj.max(a.weights.matmul(basis).unwrap().max_abs());
            }
        }
    }
    verdict(
        worst_recon <= 1e-6 && q_mismatch == 0 && worst_proj <= 1e-6 && worst_orth <= 1e-6,
        format!(
            "recon {worst_recon:.1e}, q mismatches {q_mismatch}/100, projection {worst_proj:.1e}, orthonormality {worst_orth:.1e}"
        ),
    )
}

/// Average precision by sweeping every cut of the (score desc, index asc) order,
/// recounting the prefix each time.
fn ap_oracle(scores: &[f64], labels: &[u8], positive: u8) -> f64 {
    let n = scores.len();
    let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let pos = labels.iter().filter(|&&l| l == positive).count();
    let mut sum = 0.0;
    for i in (0..n).filter(|&i| labels[i] == positive) {
        let rank = 1 + (0..n).filter(|&j| ahead(i, j)).count();
        let tp = 1
            + (0..n)
                .filter(|&j| ahead(i, j) && labels[j] == positive)
                .count();
        sum += tp as f64 / rank as f64;
    }
    sum / pos as f64
}

fn c7_pr_auc() -> Outcome {
    let mut rng = rng_from_seed(7000);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(2..=50);
        let coarse = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = rng.random();
                if coarse {
                    (s * 5.0).round() / 5.0
                } else {
                    s
                }
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if pos == 0 || pos == n {
            continue;
        }
        for class in [0u8, 1] {
            let got = pr_auc(&scores, &labels, class).unwrap();
            worst = worst.max((got - ap_oracle(&scores, &labels, class)).abs());
        }
        done += 1;
    }
    verdict(
        worst <= 1e-9,
        format!("1000 instances, max |diff| = {worst:.1e}"),
    )
}

fn forgetting_config(seed: u64, use_gpm: bool) -> RunConfig {
    let mut cfg = RunConfig::preset("synthetic-small").unwrap();
    cfg.dataset = DatasetSource::Synthetic(SyntheticSpec {
        tasks: 2,
        samples_per_task: 2000,
        dims: 2,
        cir_per_task: vec![0.3],
        drift_angle_deg: 90.0,
        base_angle_deg: 0.0,
        seed: 100 + seed,
        ..SyntheticSpec::default()
    });
    cfg.seen_count = 2;
    cfg.train.use_memory = false;
    cfg.train.use_gpm = use_gpm;
    cfg.train.weight_decay = 0.05;
    cfg.train.learning_rate = 0.05;
    cfg
}

fn task_pr_auc(cfg: &RunConfig, seed: u64) -> (f64, f64) {
    let table = cfg.dataset.load().unwrap();
    let stream = cfg.build_stream(&table, seed).unwrap();
    let run = run_seed(cfg, &stream, seed, &cfg.config_hash().unwrap()).unwrap();
    let t = &run.report.tasks;
    (t[0].pr_auc_attack.unwrap(), t[1].pr_auc_attack.unwrap())
}

fn c8_forgetting() -> Outcome {
    let seeds = 0..5u64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mut gpm1, mut gpm2, mut plain1, mut plain2) = (vec![], vec![], vec![], vec![]);
    for seed in seeds {
        let (a, b) = task_pr_auc(&forgetting_config(seed, true), seed);
        gpm1.push(a);
        gpm2.push(b);
        let (a, b) = task_pr_auc(&forgetting_config(seed, false), seed);
        plain1.push(a);
        plain2.push(b);
    }
    let gap = mean(&gpm1) - mean(&plain1);
    verdict(
        gap >= 0.10,
        format!(
            "task-1 attack PR-AUC: GPM {:.3} vs plain {:.3} (gap {gap:+.3}); task 2: GPM {:.3}, plain {:.3}",
            mean(&gpm1),
            mean(&plain1),
            mean(&gpm2),
            mean(&plain2)
        ),
    )
}

fn owl_config(novel: bool) -> RunConfig {
    let mut cfg = RunConfig::preset("synthetic-small").unwrap();
    if let DatasetSource::Synthetic(spec) = &mut cfg.dataset {
        spec.drift_angle_deg = 0.0;
        if novel {
            spec.novel_tasks = vec![3];
        }
    }
    cfg
}

fn c9_open_world() -> Outcome {
    let cfg = owl_config(false);
    let table = cfg.dataset.load().unwrap();
    let hash = cfg.config_hash().unwrap();
    let (mut correct, mut model_total, mut analyst_total) = (0usize, 0usize, 0usize);
    for &seed in &cfg.seeds {
        let stream = cfg.build_stream(&table, seed).unwrap();
        let run = run_seed(&cfg, &stream, seed, &hash).unwrap();
        for out in &run.labeling {
            let truth = &stream.tasks[out.task_id - 1].unlabeled.labels;
            correct += out
                .model_labeled
                .iter()
                .filter(|e| truth[e.index] == e.label)
                .count();
            model_total += out.model_labeled.len();
            analyst_total += out.analyst_labeled.len();
        }
    }
    let precision = correct as f64 / model_total.max(1) as f64;
    let savings = savings_pct(model_total, analyst_total);

    // Novelty: task 3's attacks move to a region no seen-task row is near.
    let cfg = owl_config(true);
    let table = cfg.dataset.load().unwrap();
    let hash = cfg.config_hash().unwrap();
    let c_d = cfg.owl.c_d;
    let (mut displaced, mut leaked, mut to_analyst, mut min_dist) =
        (0usize, 0usize, 0usize, f64::INFINITY);
    for &seed in &cfg.seeds {
        let stream = cfg.build_stream(&table, seed).unwrap();
        let run = run_seed(&cfg, &stream, seed, &hash).unwrap();
        let pool = &stream.tasks[2].unlabeled;
        let attacks: Vec<usize> = (0..pool.len()).filter(|&i| pool.labels[i] == 1).collect();
        for t in stream.seen() {
            for set in [&t.labeled, &t.unlabeled] {
                for r in 0..set.len() {
                    for &i in &attacks {
                        let d = cosine_distance(set.features.row(r), pool.features.row(i)).unwrap();
                        min_dist = min_dist.min(d);
                    }
                }
            }
        }
        let out = run.labeling.iter().find(|o| o.task_id == 3).unwrap();
        displaced += attacks.len();
        leaked += out
            .model_labeled
            .iter()
            .filter(|e| e.source == LabelSource::Model && pool.labels[e.index] == 1)
            .count();
        to_analyst += out
            .analyst_labeled
            .iter()
            .filter(|e| pool.labels[e.index] == 1)
            .count();
    }
    verdict(
        precision >= 0.95 && savings >= 30.0 && min_dist > c_d && leaked == 0 && to_analyst > 0,
        format!(
            "model-label precision {:.3} ({model_total} labels), savings {}%; novelty: {displaced} displaced attacks (min distance {min_dist:.3} > c_d {c_d}), {leaked} model-labeled, {to_analyst} analyst-labeled",
            precision,
            format_pct(savings)
        ),
    )
}

fn c10_determinism() -> Outcome {
    let mut cfg = RunConfig::preset("synthetic-small").unwrap();
    cfg.seeds = vec![0, 1];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outs: Vec<_> = dirs
        .iter()
        .map(|d| run(&cfg, Some(d.path())).unwrap())
        .collect();
    let same_reports = outs[0].reports() == outs[1].reports();
    let mut same_bytes = true;
    for entry in std::fs::read_dir(dirs[0].path()).unwrap() {
        let seed_dir = entry.unwrap().path();
        let report = seed_dir.join("report.json");
        if report.exists() {
            let other = dirs[1]
                .path()
                .join(seed_dir.file_name().unwrap())
                .join("report.json");
            same_bytes &= std::fs::read(&report).unwrap() == std::fs::read(&other).unwrap();
        }
    }
    verdict(
        same_reports && same_bytes && outs[0].reports().len() == 2,
        format!("two runs x 2 seeds: reports equal {same_reports}, report.json bytes equal {same_bytes}"),
    )
}

fn c11_ctu13() -> Outcome {
    let Some(dir) = std::env::var_os("SOUL_CTU13_DIR") else {
        return Outcome::Skip("set SOUL_CTU13_DIR to the CTU-13 CSV directory to run".into());
    };
    let mut files: Vec<PathBuf> = match std::fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
            .collect(),
        Err(e) => return Outcome::Fail(format!("{}: {e}", PathBuf::from(&dir).display())),
    };
    files.sort();
    let mut cfg = RunConfig::preset("ctu13").unwrap();
    cfg.seeds = vec![0];
    if let DatasetSource::Csv {
        files: f, max_rows, ..
    } = &mut cfg.dataset
    {
        *f = files;
        *max_rows = Some(200_000);
    }
    match run(&cfg, None) {
        Ok(out) => match out.reports().first().and_then(|r| r.aut_overall.benign) {
            Some(b) => verdict(b >= 0.95, format!("overall AUT(B) = {b:.4}")),
            None => Outcome::Fail("no overall AUT(B) in the report".into()),
        },
        Err(e) => Outcome::Fail(format!("run failed: {e}")),
    }
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("AUT arithmetic", Duration::from_secs(1), c1_aut),
        ("CIR fixtures", Duration::from_secs(1), c2_cir),
        ("label-budget fixture", Duration::from_secs(1), c3_budget),
        ("savings arithmetic", Duration::from_secs(1), c4_savings),
        (
            "gradient correctness",
            Duration::from_secs(30),
            c5_gradients,
        ),
        ("SVD/GPM suite", Duration::from_secs(60), c6_svd_gpm),
        ("PR-AUC oracle", Duration::from_secs(30), c7_pr_auc),
        (
            "forgetting direction",
            Duration::from_secs(300),
            c8_forgetting,
        ),
        (
            "open-world labeling",
            Duration::from_secs(300),
            c9_open_world,
        ),
        (
            "end-to-end determinism",
            Duration::from_secs(300),
            c10_determinism,
        ),
        ("CTU-13 heavy run", Duration::from_secs(1800), c11_ctu13),
    ];
    let only: Option<usize> = std::env::var("SOUL_ACCEPTANCE_ONLY")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let timing = format!("{:.2}s, limit {}s", took.as_secs_f64(), limit.as_secs());
        let line = match outcome {
            Outcome::Pass(d) if took <= *limit => {
                format!("[PASS] criterion {n}: {name}: {d} ({timing})")
            }
            Outcome::Pass(d) => {
                failed += 1;
                format!("[FAIL] criterion {n}: {name}: {d} (over time: {timing})")
            }
            Outcome::Fail(d) => {
                failed += 1;
                format!("[FAIL] criterion {n}: {name}: {d} ({timing})")
            }
            Outcome::Skip(d) => format!("[SKIP] criterion {n}: {name}: {d}"),
        };
        println!("{line}");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
