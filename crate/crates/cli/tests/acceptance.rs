//! Acceptance run: one PASS/FAIL line per criterion, each timed against its
//! budget. Exits nonzero when any criterion fails.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use openworld::decoop::{otsu_threshold, partition_classes, OTSU_TIE_TOLERANCE};
use openworld::metrics::{auroc, roc_points};
use openworld::model::{
    loss_and_gradient, BatchItem, EncoderShape, FrozenEncoder, ItemRole, LossSpec, PromptVector, Temperature,
};
use openworld::numeric::softmax;
use openworld::pipeline::{run_seed, Method, SeedRun};
use openworld_cli::{cmd_run, cmd_sweep_gamma, cmd_theorem, CliError, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

/// Number, name, time budget and check of one criterion.
type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn default_config(out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig { output_dir: out.to_path_buf(), ..ExperimentConfig::default() }
}

// ---------------------------------------------------------------- 1

fn chain_rule() -> Outcome {
    let cfg = ExperimentConfig::default();
    let mut run = SeedRun::new(&cfg.pipeline, 1).map_err(|e| e.to_string())?;
    let dept = run.dept().map_err(|e| e.to_string())?;
    let space = dept.class_space().clone();
    let zs = dept.zero_shot();
    let temp = zs.temperature();
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for (z, example) in run.test_z.iter().zip(&run.dataset.test).take(1000) {
        let y = example.label;
        let base = space.is_base(y);
        let cell = if base { space.base() } else { space.new_classes() };
        let full = zs.predict(space.all(), z).map_err(|e| e.to_string())?;
        let h_zs = -full.prob_of(y).ln();
        let h_ood = -full.mass_of(cell).ln();
        let h_cls_zs = -zs.predict(cell, z).map_err(|e| e.to_string())?.prob_of(y).ln();
        let conditional = if base {
            -dept.tuned_weights().classify(cell, temp, z).map_err(|e| e.to_string())?.prob_of(y).ln()
        } else {
            h_cls_zs
        };
        let h_dept = -dept.soft_distribution(z).map_err(|e| e.to_string())?.prob_of(y).ln();
        worst = worst.max((h_zs - h_cls_zs - h_ood).abs()).max((h_dept - conditional - h_ood).abs());
        n += 1;
    }
    Ok((n == 1000 && worst <= 1e-12, format!("{n} examples, max deviation {worst:.2e}")))
}

// ---------------------------------------------------------------- 2

fn theorem_bounds() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let reports = match cmd_theorem(&default_config(dir.path())) {
        Ok(r) => r,
        Err(CliError::InvalidTheorem(m)) => return Ok((false, m)),
        Err(e) => return Err(e.to_string()),
    };
    let strict = reports.iter().filter(|r| r.lhs_dept < r.lhs_zs).count();
    let all_hold = reports.iter().all(|r| r.valid && r.bound_zs_holds && r.bound_dept_holds);
    Ok((
        all_hold && strict >= 4,
        format!("bounds hold on {}/5 seeds, decomposed CE below zero-shot CE on {strict}/5", reports.len()),
    ))
}

// ---------------------------------------------------------------- 3

struct GradCase {
    enc: FrozenEncoder,
    prompt: PromptVector,
    support: Vec<usize>,
    temp: Temperature,
    zs: Vec<DVector<f64>>,
    labels: Vec<usize>,
    refs: Vec<Vec<f64>>,
}

impl GradCase {
    fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = EncoderShape {
            token_dim: rng.random_range(3..8),
            embed_dim: rng.random_range(2..6),
            feature_dim: rng.random_range(2..6),
            num_classes: rng.random_range(3..7),
        };
        let enc = FrozenEncoder::random(shape, seed).unwrap();
        let prompt = PromptVector::gaussian(rng.random_range(1..5), shape.token_dim, 0.5, seed + 1).unwrap();
        let support: Vec<usize> = (0..shape.num_classes).collect();
        let temp = Temperature::new(rng.random_range(0.1..1.0)).unwrap();
        let n = 2 * rng.random_range(1..4);
        let zs = (0..n)
            .map(|_| {
                let f: Vec<f64> = (0..shape.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                enc.image_embedding(&f).unwrap()
            })
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..shape.num_classes)).collect();
        let refs = (0..n)
            .map(|_| {
                let logits: Vec<f64> = support.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
                softmax(&logits).unwrap()
            })
            .collect();
        Self { enc, prompt, support, temp, zs, labels, refs }
    }

    fn batch(&self, spec: LossSpec) -> Vec<BatchItem<'_>> {
        (0..self.zs.len())
            .map(|i| {
                let role = match spec {
                    LossSpec::EntropyMargin { .. } if i % 2 == 1 => ItemRole::SimulatedNew,
                    LossSpec::CrossEntropyKl if i % 2 == 1 => ItemRole::Reference(&self.refs[i]),
                    _ => ItemRole::Labelled,
                };
                BatchItem { z: &self.zs[i], label: self.labels[i], role }
            })
            .collect()
    }

    fn loss(&self, tokens: DMatrix<f64>, spec: LossSpec) -> f64 {
        let p = PromptVector::new(tokens).unwrap();
        loss_and_gradient(&self.enc, &p, &self.support, self.temp, &self.batch(spec), spec).unwrap().0
    }

    /// Hinge argument of the margin loss, from two plain entropy evaluations.
    fn hinge_argument(&self, gamma: f64) -> f64 {
        let items = self.batch(LossSpec::EntropyMargin { gamma });
        let mean_entropy = |new: bool| {
            let part: Vec<BatchItem<'_>> =
                items.iter().copied().filter(|b| matches!(b.role, ItemRole::SimulatedNew) == new).collect();
            loss_and_gradient(&self.enc, &self.prompt, &self.support, self.temp, &part, LossSpec::Entropy).unwrap().0
        };
        gamma + mean_entropy(false) - mean_entropy(true)
    }
}

fn gradient_check() -> Outcome {
    const STEP: f64 = 1e-5;
    let specs = [
        LossSpec::CrossEntropy,
        LossSpec::Entropy,
        LossSpec::EntropyMargin { gamma: 0.4 },
        LossSpec::CrossEntropyKl,
    ];
    let mut summary = Vec::new();
    let mut ok = true;
    for spec in specs {
        let (mut cases, mut worst, mut seed) = (0, 0.0f64, 0u64);
        while cases < 20 && seed < 200 {
            let case = GradCase::random(seed);
            seed += 1;
            if let LossSpec::EntropyMargin { gamma } = spec {
                // skip draws sitting on the hinge kink
                if case.hinge_argument(gamma).abs() < 1e-3 {
                    continue;
                }
            }
            let (_, analytic) =
                loss_and_gradient(&case.enc, &case.prompt, &case.support, case.temp, &case.batch(spec), spec).unwrap();
            let base = case.prompt.tokens().clone();
            let numeric = DMatrix::from_fn(base.nrows(), base.ncols(), |r, c| {
                let (mut up, mut down) = (base.clone(), base.clone());
                up[(r, c)] += STEP;
                down[(r, c)] -= STEP;
                (case.loss(up, spec) - case.loss(down, spec)) / (2.0 * STEP)
            });
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                let scale = a.abs().max(n.abs());
                if scale > 0.0 {
                    worst = worst.max((a - n).abs() / scale);
                }
            }
            cases += 1;
        }
        ok &= cases >= 20 && worst < 1e-5;
        let name = match spec {
            LossSpec::CrossEntropy => "ce",
            LossSpec::Entropy => "entropy",
            LossSpec::EntropyMargin { .. } => "margin",
            LossSpec::CrossEntropyKl => "ce+kl",
        };
        summary.push(format!("{name} {cases} cases max rel {worst:.1e}"));
    }
    Ok((ok, summary.join(", ")))
}

// ---------------------------------------------------------------- 4

fn otsu_exhaustive(scores: &[f64]) -> Option<f64> {
    let mut distinct = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let n = scores.len() as f64;
    let cuts: Vec<(f64, f64)> = distinct
        .windows(2)
        .map(|w| {
            let t = (w[0] + w[1]) / 2.0;
            let low: Vec<f64> = scores.iter().copied().filter(|&s| s < t).collect();
            let high: Vec<f64> = scores.iter().copied().filter(|&s| s > t).collect();
            let mu = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (w0, w1) = (low.len() as f64 / n, high.len() as f64 / n);
            (t, w0 * w1 * (mu(&low) - mu(&high)).powi(2))
        })
        .collect();
    let best = cuts.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    cuts.iter().find(|c| c.1 >= best - OTSU_TIE_TOLERANCE * best.abs()).map(|c| c.0)
}

fn otsu_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut agree = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let coarse = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| if coarse { f64::from(rng.random_range(0..6)) / 5.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        let same = match (otsu_threshold(&scores), otsu_exhaustive(&scores)) {
            (Ok(a), Some(b)) => a == b,
            (Err(_), None) => true,
            _ => false,
        };
        agree += usize::from(same);
    }
    // equal-variance cuts on mirrored samples: the smaller cut wins
    let tie_ok = otsu_threshold(&[0.0, 0.0, 1.0, 2.0, 2.0]) == Ok(0.5);
    Ok((agree == 100 && tie_ok, format!("{agree}/100 multisets agree, tie-break {}", if tie_ok { "ok" } else { "wrong" })))
}

// ---------------------------------------------------------------- 5

fn auroc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let n = rng.random_range(1..50);
        let coarse = rng.random_bool(0.5);
        (0..n).map(|_| if coarse { f64::from(rng.random_range(-3..4)) } else { rng.random_range(-1.0..1.0) }).collect()
    };
    let (mut exact, mut worst_area) = (0, 0.0f64);
    for _ in 0..100 {
        let base = draw(&mut rng);
        let new = draw(&mut rng);
        let (mut greater, mut ties) = (0u64, 0u64);
        for &b in &base {
            for &n in &new {
                greater += u64::from(b > n);
                ties += u64::from(b == n);
            }
        }
        let pairs = (base.len() * new.len()) as u64;
        let brute = (2 * greater + ties) as f64 / (2 * pairs) as f64;
        let a = auroc(&base, &new).map_err(|e| e.to_string())?;
        exact += usize::from(a == brute);
        worst_area = worst_area.max((roc_points(&base, &new).map_err(|e| e.to_string())?.area() - a).abs());
    }
    Ok((exact == 100 && worst_area <= 1e-12, format!("{exact}/100 exact, max area gap {worst_area:.1e}")))
}

// ---------------------------------------------------------------- 6

fn partition_coverage() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut good = 0;
    for trial in 0..50u64 {
        let n = rng.random_range(2..60);
        let k = rng.random_range(2..=n.min(12));
        let base: Vec<usize> = (0..n).map(|c| 2 * c + 1).collect();
        let parts = partition_classes(&base, k, trial).map_err(|e| e.to_string())?;
        let mut union: Vec<usize> = parts.iter().flat_map(|p| p.sim_new.iter().copied()).collect();
        let total = union.len();
        union.sort_unstable();
        union.dedup();
        let sizes: Vec<usize> = parts.iter().map(|p| p.sim_new.len()).collect();
        let balanced = sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1;
        if parts.len() == k && union == base && total == n && balanced {
            good += 1;
        }
    }
    Ok((good == 50, format!("{good}/50 partitions cover, disjoint and balanced")))
}

// ---------------------------------------------------------------- 7

fn tuning_phenomenon() -> Outcome {
    let cfg = ExperimentConfig::default();
    let mut hits = 0;
    let mut detail = Vec::new();
    for &seed in &cfg.seeds {
        let out = run_seed(&cfg.pipeline, seed, &[Method::Zs, Method::Coop]).map_err(|e| e.to_string())?;
        let zs = &out.result(Method::Zs).unwrap().report;
        let coop = &out.result(Method::Coop).unwrap().report;
        let base_up = coop.acc_base > zs.acc_base;
        let new_down = coop.acc_new < zs.acc_new;
        let auroc_down = coop.auroc < zs.auroc;
        hits += usize::from(base_up && new_down && auroc_down);
        let flag = |b: bool| if b { '+' } else { '-' };
        detail.push(format!("s{seed}:{}{}{}", flag(base_up), flag(new_down), flag(auroc_down)));
    }
    Ok((hits >= 4, format!("{hits}/5 seeds [base up, new down, auroc down] {}", detail.join(" "))))
}

// ---------------------------------------------------------------- 8

fn method_ordering() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = cmd_run(&default_config(dir.path())).map_err(|e| e.to_string())?;
    let mean = |m: Method, metric: &str| manifest.summary_of(m, metric).map(|r| r.mean).unwrap_or(f64::NAN);
    let acc = |m: Method| mean(m, "acc_overall");
    let (zs, coop, dept, decoop) = (acc(Method::Zs), acc(Method::Coop), acc(Method::Dept), acc(Method::Decoop));
    let (auc_zs, auc_decoop) = (mean(Method::Zs, "auroc"), mean(Method::Decoop, "auroc"));
    let ok = decoop >= dept && dept >= zs.max(coop) && auc_decoop > auc_zs;
    Ok((
        ok,
        format!(
            "acc decoop {decoop:.4} dept {dept:.4} coop {coop:.4} zs {zs:.4}; auroc decoop {auc_decoop:.4} zs {auc_zs:.4}"
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let ma = cmd_run(&default_config(a.path())).map_err(|e| e.to_string())?;
    let mb = cmd_run(&default_config(b.path())).map_err(|e| e.to_string())?;
    let read = |p: &std::path::Path| fs::read(p).map_err(|e| e.to_string());
    let mut files = vec![(ma.eval_csv.clone(), mb.eval_csv.clone())];
    files.extend(ma.artifacts.iter().zip(&mb.artifacts).map(|(x, y)| (x.path.clone(), y.path.clone())));
    let mut identical = 0;
    for (x, y) in &files {
        identical += usize::from(read(x)? == read(y)?);
    }
    Ok((identical == files.len(), format!("{identical}/{} files byte-identical", files.len())))
}

// ---------------------------------------------------------------- 10

fn gamma_robustness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = default_config(dir.path());
    let gammas = [0.1, 0.2, 0.4, 0.8];
    let rows = cmd_sweep_gamma(&cfg, &gammas).map_err(|e| e.to_string())?;
    let means: Vec<f64> = gammas
        .iter()
        .map(|&g| {
            let accs: Vec<f64> = rows.iter().filter(|r| r.0 == g).map(|r| r.2.acc_overall).collect();
            accs.iter().sum::<f64>() / accs.len() as f64
        })
        .collect();
    let spread = means.iter().copied().fold(f64::NEG_INFINITY, f64::max) - means.iter().copied().fold(f64::INFINITY, f64::min);
    let shown: Vec<String> = gammas.iter().zip(&means).map(|(g, m)| format!("{g}:{m:.4}")).collect();
    Ok((spread < 0.05, format!("spread {:.2} points ({})", 100.0 * spread, shown.join(" "))))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "chain-rule identities", Duration::from_secs(5), chain_rule),
        (2, "cross-entropy bounds", Duration::from_secs(120), theorem_bounds),
        (3, "gradient check", Duration::from_secs(30), gradient_check),
        (4, "otsu oracle", Duration::from_secs(5), otsu_oracle),
        (5, "auroc oracle", Duration::from_secs(10), auroc_oracle),
        (6, "partition coverage", Duration::from_secs(1), partition_coverage),
        (7, "tuning trade-off", Duration::from_secs(300), tuning_phenomenon),
        (8, "method ordering", Duration::from_secs(600), method_ordering),
        (9, "determinism", Duration::from_secs(600), determinism),
        (10, "margin robustness", Duration::from_secs(1200), gamma_robustness),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let in_time = elapsed < limit;
        let (pass, detail) = match outcome {
            Ok((ok, detail)) => (ok && in_time, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "[{}] criterion {id:>2} {name}: {detail} ({:.2} s, limit {} s{})",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
