//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero if any criterion fails. Extra command-line
//! arguments filter criteria by substring.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use eds_core::cluster::{kmeans_best_of, ClusterModel, KMeansParams};
use eds_core::corpus::Corpus;
use eds_core::embed::{Embedding, EmbeddingSet};
use eds_core::manifest::ScenarioAxis;
use eds_core::pipeline::{compare_samplers, median, Experiment, ExperimentConfig, BENCHMARK_LADDER};
use eds_core::raster::Mask;
use eds_core::sampler::{eds_sample, eds_sample_budget, SamplePool, SamplerKind};
use eds_core::segmodel::{confusion, iou_report, loss_and_gradient, PixelFeatures, SegModel, FEATURE_DIM};
use eds_core::synth::{generate, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

const SEEDS: u64 = 20;

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { name: "kl_trend", limit: Some(Duration::from_secs(120)), run: kl_trend },
        Criterion { name: "supervised_trend", limit: Some(Duration::from_secs(600)), run: supervised_trend },
        Criterion { name: "self_training_trend", limit: Some(Duration::from_secs(1200)), run: self_training_trend },
        Criterion { name: "kmeans_exhaustive_oracle", limit: None, run: kmeans_oracle },
        Criterion { name: "gradient_check", limit: None, run: gradient_check },
        Criterion { name: "metric_oracle", limit: None, run: metric_oracle },
        Criterion { name: "cli_determinism", limit: None, run: cli_determinism },
        Criterion { name: "eds_budget_fuzz", limit: None, run: eds_budget_fuzz },
    ];
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let mut outcome = (c.run)();
        let elapsed = start.elapsed();
        if let (Ok(detail), Some(limit)) = (&outcome, c.limit) {
            if elapsed >= limit {
                outcome = Err(format!("{detail}; exceeded the {}s budget", limit.as_secs()));
            }
        }
        match outcome {
            Ok(detail) => println!("PASS {} ({:.1}s): {detail}", c.name, elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} ({:.1}s): {detail}", c.name, elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn benchmark_corpus() -> Result<Corpus, String> {
    Corpus::from_generated(generate(&SynthSpec::benchmark(7)).map_err(err)?).map_err(err)
}

fn kl_trend() -> Outcome {
    let spec = SynthSpec::imbalanced(1000, 7);
    let corpus = Corpus::from_generated(generate(&spec).map_err(err)?).map_err(err)?;
    let cfg = ExperimentConfig {
        k: 50,
        n: 10,
        pool: SamplePool::All,
        ..ExperimentConfig::benchmark()
    };
    let cmp = compare_samplers(&cfg, &corpus, SEEDS as usize, false).map_err(err)?;
    if cmp.subset_size != 500 {
        return Err(format!("subset size {} instead of 500", cmp.subset_size));
    }
    let axis = ScenarioAxis::Weather;
    let wins = cmp.trials.iter().filter(|t| t.kl(SamplerKind::Eds, axis) < t.kl(SamplerKind::Random, axis)).count();
    let needed = (0.95 * cmp.trials.len() as f64).ceil() as usize;
    let eds: Vec<f64> = cmp.trials.iter().map(|t| t.kl(SamplerKind::Eds, axis)).collect();
    let random: Vec<f64> = cmp.trials.iter().map(|t| t.kl(SamplerKind::Random, axis)).collect();
    let detail = format!(
        "EDS KL below random in {wins}/{} trials; median KL eds {:.4} random {:.4}",
        cmp.trials.len(),
        median(&eds),
        median(&random)
    );
    if wins >= needed { Ok(detail) } else { Err(detail) }
}

fn supervised_trend() -> Outcome {
    let corpus = benchmark_corpus()?;
    let cfg = ExperimentConfig::benchmark();
    let cmp = compare_samplers(&cfg, &corpus, SEEDS as usize, true).map_err(err)?;
    let (eds, random) = cmp.median_miou.ok_or("no teacher mIoU recorded")?;
    let detail = format!("median teacher mIoU eds {eds:.4} random {random:.4} over {SEEDS} seeds");
    if eds >= random + 0.01 { Ok(detail) } else { Err(detail) }
}

fn self_training_trend() -> Outcome {
    let corpus = benchmark_corpus()?;
    let mut medians = Vec::new();
    for sampler in [SamplerKind::Eds, SamplerKind::Random] {
        let exp = Experiment::new(ExperimentConfig::benchmark().with_sampler(sampler), &corpus).map_err(err)?;
        let mut teacher = Vec::new();
        let mut students = vec![Vec::new(); BENCHMARK_LADDER.len()];
        for seed in 0..SEEDS {
            let reports = exp.run_self_training_ladder(seed, &BENCHMARK_LADDER).map_err(err)?;
            if reports[0].labeled_count != 300 {
                return Err(format!("{} real labels instead of 300", reports[0].labeled_count));
            }
            teacher.push(reports[0].teacher_miou);
            for (rung, r) in reports.iter().enumerate() {
                students[rung].push(r.student_miou.ok_or("missing student mIoU")?);
            }
        }
        let students: Vec<f64> = students.iter().map(|s| median(s)).collect();
        medians.push((median(&teacher), students));
    }
    let (eds_teacher, eds_students) = &medians[0];
    let (random_teacher, random_students) = &medians[1];
    let mut problems = Vec::new();
    let full = *eds_students.last().unwrap();
    if full < *eds_teacher {
        problems.push(format!("student {full:.4} < teacher {eds_teacher:.4}"));
    }
    for (i, budget) in BENCHMARK_LADDER.iter().enumerate() {
        if eds_students[i] < random_students[i] {
            problems.push(format!("rung {budget}: eds {:.4} < random {:.4}", eds_students[i], random_students[i]));
        }
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    let detail = format!(
        "eds teacher {eds_teacher:.4} students [{}]; random teacher {random_teacher:.4} students [{}]",
        fmt(eds_students),
        fmt(random_students)
    );
    if problems.is_empty() { Ok(detail) } else { Err(format!("{}; {detail}", problems.join(", "))) }
}

fn exhaustive_inertia(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    // point 0 always sits in group 0, so each partition is visited once
    for bits in 1u32..(1 << (n - 1)) {
        let groups = [0usize, 1].map(|g| {
            (0..n).filter(|&i| (i > 0 && (bits >> (i - 1)) & 1 == 1) as usize == g).collect::<Vec<_>>()
        });
        let mut total = 0.0;
        for g in &groups {
            let d = points[0].len();
            let mean: Vec<f64> = (0..d).map(|j| g.iter().map(|&i| points[i][j]).sum::<f64>() / g.len() as f64).collect();
            total += g.iter().map(|&i| (0..d).map(|j| (points[i][j] - mean[j]).powi(2)).sum::<f64>()).sum::<f64>();
        }
        best = best.min(total);
    }
    best
}

fn kmeans_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for instance in 0..100 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=2);
        let entries: Vec<Embedding> = (0..n)
            .map(|i| Embedding {
                id: format!("p{i}"),
                values: (0..d).map(|_| rng.random_range(-10.0f32..10.0)).collect(),
            })
            .collect();
        let points: Vec<Vec<f64>> = entries.iter().map(|e| e.values.iter().map(|&v| v as f64).collect()).collect();
        let set = EmbeddingSet::new(d, entries).map_err(err)?;
        let params = KMeansParams { max_iter: 1000, tol: 0.0, ..KMeansParams::new(2, instance) };
        let model = kmeans_best_of(&set, params, 10).map_err(err)?;
        let optimum = exhaustive_inertia(&points);
        let gap = (model.inertia() - optimum).abs();
        worst = worst.max(gap);
        if gap > 1e-9 {
            return Err(format!("instance {instance} (n={n}, d={d}): inertia {} vs optimum {optimum}", model.inertia()));
        }
    }
    Ok(format!("100 instances match the exhaustive optimum, worst gap {worst:.2e}"))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for instance in 0..100 {
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let classes = rng.random_range(2..=5);
        let x = PixelFeatures::new(h, w, FEATURE_DIM, (0..h * w * FEATURE_DIM).map(|_| rng.random_range(0.0f32..1.0)).collect())
            .map_err(err)?;
        let mask = Mask::new(h, w, (0..h * w).map(|_| rng.random_range(0..classes) as u8).collect()).map_err(err)?;
        let weights: Vec<f64> = (0..classes * (FEATURE_DIM + 1)).map(|_| rng.random_range(-2.0..2.0)).collect();
        let loss_at = |wts: Vec<f64>| -> Result<f64, String> {
            let m = SegModel::from_weights(classes, FEATURE_DIM, wts).map_err(err)?;
            Ok(loss_and_gradient(&m, &[(&x, &mask)]).map_err(err)?.0)
        };
        let model = SegModel::from_weights(classes, FEATURE_DIM, weights.clone()).map_err(err)?;
        let (_, grad) = loss_and_gradient(&model, &[(&x, &mask)]).map_err(err)?;
        let step = 1e-5;
        for i in 0..weights.len() {
            let mut plus = weights.clone();
            plus[i] += step;
            let mut minus = weights.clone();
            minus[i] -= step;
            let fd = (loss_at(plus)? - loss_at(minus)?) / (2.0 * step);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-7);
            worst = worst.max(rel);
        }
        if worst > 1e-4 {
            return Err(format!("instance {instance}: relative error {worst:.3e}"));
        }
    }
    Ok(format!("max relative error {worst:.3e} over 100 instances"))
}

fn brute_force_iou(pred: &Mask, gt: &Mask, classes: usize) -> (Vec<Option<f64>>, f64) {
    let per_class: Vec<Option<f64>> = (0..classes as u8)
        .map(|c| {
            let p: std::collections::BTreeSet<usize> = (0..pred.len()).filter(|&i| pred.classes()[i] == c).collect();
            let g: std::collections::BTreeSet<usize> = (0..gt.len()).filter(|&i| gt.classes()[i] == c).collect();
            let union = p.union(&g).count();
            (union > 0).then(|| p.intersection(&g).count() as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    (per_class, miou)
}

fn metric_oracle() -> Outcome {
    let gt = Mask::new(2, 2, vec![0, 0, 1, 1]).map_err(err)?;
    let pred = Mask::new(2, 2, vec![0, 1, 1, 1]).map_err(err)?;
    let hand = iou_report(&confusion(&pred, &gt, 2).map_err(err)?);
    if (hand.miou - 0.58333).abs() > 1e-5 || (hand.miou - 7.0 / 12.0).abs() > 1e-9 {
        return Err(format!("hand example mIoU {}", hand.miou));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for pair in 0..1000 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let classes = rng.random_range(1..=4);
        let mut draw = || Mask::new(h, w, (0..h * w).map(|_| rng.random_range(0..classes) as u8).collect());
        let (pred, gt) = (draw().map_err(err)?, draw().map_err(err)?);
        let report = iou_report(&confusion(&pred, &gt, classes).map_err(err)?);
        let (per_class, miou) = brute_force_iou(&pred, &gt, classes);
        if report.per_class != per_class || report.miou != miou {
            return Err(format!("pair {pair}: {:?} vs brute force {per_class:?}", report.per_class));
        }
    }
    Ok(format!("hand example mIoU {:.5}; 1000 random pairs match exactly", hand.miou))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap().flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let key = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(key, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = dir.path();
    let steps: &[(&str, &[&str])] = &[
        ("synth", &["synth", "--out", "corpus", "--size", "240", "--val-fraction", "0.05", "--test-fraction", "0.1", "--seed", "3"]),
        ("embed", &["embed", "--manifest", "corpus/manifest.jsonl", "--out", "emb.edse", "--pool", "labeled", "--grid", "4"]),
        ("cluster", &["cluster", "--embeddings", "emb.edse", "--out", "clusters.edsc", "--k", "8", "--seed", "2"]),
        ("sample eds", &["sample", "--manifest", "corpus/manifest.jsonl", "--clusters", "clusters.edsc", "--n", "3", "--out", "eds.jsonl", "--seed", "4"]),
        ("sample random", &["sample", "--manifest", "corpus/manifest.jsonl", "--method", "random", "--budget", "24", "--out", "random.jsonl", "--seed", "4"]),
        ("diagnose", &["diagnose", "--manifest", "corpus/manifest.jsonl", "--subset", "eds.jsonl", "--out", "diag.json"]),
        ("train-teacher", &["train-teacher", "--manifest", "corpus/manifest.jsonl", "--subset", "eds.jsonl", "--out", "teacher.edsm", "--epochs", "3", "--lr", "0.5", "--log", "teacher.csv", "--seed", "1"]),
        ("pseudo-label", &["pseudo-label", "--manifest", "corpus/manifest.jsonl", "--model", "teacher.edsm", "--out-dir", "pseudo"]),
        ("train-student", &["train-student", "--manifest", "corpus/manifest.jsonl", "--pseudo", "pseudo/pseudo.jsonl", "--out", "student.edsm", "--epochs", "2", "--lr", "0.5", "--seed", "1"]),
        ("evaluate", &["evaluate", "--manifest", "corpus/manifest.jsonl", "--model", "student.edsm", "--out", "eval.json", "--csv", "eval.csv"]),
        ("experiment", &["experiment", "--manifest", "corpus/manifest.jsonl", "--out", "exp", "--mode", "self-training", "--k", "8", "--n", "3", "--pseudo-k", "8", "--pseudo-budget", "0,16", "--epochs", "2", "--lr", "0.5", "--grid", "4", "--trials", "2", "--plot"]),
        ("experiment compare", &["experiment", "--manifest", "corpus/manifest.jsonl", "--out", "cmp", "--mode", "compare", "--k", "8", "--n", "3", "--trials", "3", "--plot"]),
    ];
    for (name, args) in steps {
        let run = || -> Result<BTreeMap<String, Vec<u8>>, String> {
            let o = Command::new(env!("CARGO_BIN_EXE_eds"))
                .args(*args)
                .current_dir(d)
                .env_remove("EDS_SEED")
                .output()
                .map_err(err)?;
            if !o.status.success() {
                return Err(format!("{name} failed: {}", String::from_utf8_lossy(&o.stderr).trim()));
            }
            Ok(snapshot(d))
        };
        let first = run()?;
        let second = run()?;
        if first != second {
            let changed: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
            return Err(format!("{name}: rerun changed {changed:?}"));
        }
    }
    Ok(format!("{} subcommand invocations reproduce byte-identical files", steps.len()))
}

fn eds_budget_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..1000 {
        let k = rng.random_range(1..=12);
        let sizes: Vec<usize> = (0..k)
            .map(|_| if rng.random_bool(0.2) { 0 } else { rng.random_range(1..=30) })
            .collect();
        let mut assignments = BTreeMap::new();
        for (c, &s) in sizes.iter().enumerate() {
            for j in 0..s {
                assignments.insert(format!("c{c}-{j}"), c);
            }
        }
        let pool = assignments.len();
        let model = ClusterModel::from_parts(vec![vec![0.0]; k], assignments, 0.0).map_err(err)?;
        let n = rng.random_range(1..=40);
        let seed = rng.random();
        let subset = eds_sample(&model, n, seed).map_err(err)?;
        let expected = (n * k).min(pool);
        let distinct: std::collections::BTreeSet<&String> = subset.ids.iter().collect();
        if subset.len() != expected || distinct.len() != expected {
            return Err(format!("case {case}: sizes {sizes:?}, n={n}: {} ids, expected {expected}", subset.len()));
        }
        let budget = rng.random_range(0..=pool + 20);
        let by_budget = eds_sample_budget(&model, budget, seed).map_err(err)?;
        if by_budget.len() != budget.min(pool) {
            return Err(format!("case {case}: budget {budget} gave {} ids", by_budget.len()));
        }
    }
    Ok("1000 randomized cluster layouts give min(n*k, pool) distinct ids".into())
}
