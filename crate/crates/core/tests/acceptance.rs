//! One PASS/FAIL line per acceptance criterion. Criteria listed in
//! `KNOWN_FAILURES` are reported but do not fail the target; any other
//! failure does.

#[path = "common/oracle.rs"]
mod oracle;

use std::time::{Duration, Instant};

use avvp_core::autodiff::Tensor;
use avvp_core::dgm::{compute_mu, compute_omega, element_variance, noise_sample, ImbalanceMode};
use avvp_core::experiment::{
    ablate, gradcheck_suite, to_json, train, AblationCell, AblationGrid, AblationOutcome, CellResult, GradcheckOptions,
    Preset, RunConfig,
};
use avvp_core::metrics::{event_f1, extract_events, segment_f1, Modality, SnippetLabels};
use avvp_core::model::{Model, ModelConfig, PipelineMode, VideoBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Criteria that do not hold for this build; see the README.
const KNOWN_FAILURES: &[u32] = &[2, 7];

struct Line {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> (bool, String) {
    let start = Instant::now();
    let (ok, detail) = f();
    let took = start.elapsed();
    match limit {
        Some(l) if took > l => (false, format!("{detail}; took {took:.1?} > {l:?}")),
        _ => (ok, format!("{detail}; {took:.1?}")),
    }
}

fn gradient_correctness() -> (bool, String) {
    let results = gradcheck_suite(&GradcheckOptions::default()).expect("gradcheck suite");
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    let worst = results
        .iter()
        .filter(|r| r.tolerance == 1e-3)
        .map(|r| r.error)
        .fold(0.0, f64::max);
    let identity = results
        .iter()
        .find(|r| r.tolerance == 1e-10)
        .map_or(f64::NAN, |r| r.error);
    (
        failed.is_empty() && identity < 1e-10,
        format!(
            "{} checks, failed {failed:?}, worst relative error {worst:.2e}, logit identity {identity:.1e}",
            results.len()
        ),
    )
}

fn modulation_algebra() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let modes = [ImbalanceMode::Score, ImbalanceMode::Discrepancy, ImbalanceMode::Fusion];
    let mut violations = Vec::new();
    for i in 0..10_000 {
        let n = rng.random_range(1..6);
        let c = rng.random_range(1..6);
        let scores = |rng: &mut ChaCha8Rng| {
            let d = (0..n * c).map(|_| rng.random_range(1e-4..1.0)).collect();
            Tensor::new(vec![n, c], d).unwrap()
        };
        let (s_a, s_v) = (scores(&mut rng), scores(&mut rng));
        let mut y: Vec<f64> = (0..n * c).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
        for k in 0..n {
            y[k * c + rng.random_range(0..c)] = 1.0;
        }
        let y = Tensor::new(vec![n, c], y).unwrap();
        let mode = modes[i % 3];
        let gamma = rng.random_range(0.01..1.0);
        let r = compute_omega(&s_a, &s_v, &y, mode).unwrap().with_mu(gamma);
        let swapped = compute_omega(&s_v, &s_a, &y, mode).unwrap();
        let w = r.omega_v_minus_a;
        let mut check = |ok: bool, what: &str| {
            if !ok && violations.len() < 5 {
                violations.push(format!("{what} at draw {i}"));
            }
        };
        check((w * r.omega_a_minus_v - 1.0).abs() < 1e-9, "reciprocity");
        check((w * swapped.omega_v_minus_a - 1.0).abs() < 1e-9, "swap reciprocity");
        check(r.mu_a.min(r.mu_v) >= 1.0 || r.mu_a.max(r.mu_v) == 1.0, "exclusivity");
        check(r.mu_a > 0.0 && r.mu_a <= 1.0 && r.mu_v > 0.0 && r.mu_v <= 1.0, "range");
        let damped = |(a, v): (f64, f64)| a.min(v);
        if w != 1.0 {
            let far = if w > 1.0 { w * 1.5 } else { w / 1.5 };
            check(
                damped(compute_mu(far, gamma)) <= damped((r.mu_a, r.mu_v)),
                "monotone in omega",
            );
            check(
                damped(compute_mu(w, gamma * 1.5)) <= damped((r.mu_a, r.mu_v)),
                "monotone in gamma",
            );
            let d = w.max(1.0 / w);
            let here = damped(compute_mu(d, gamma));
            check(
                damped(compute_mu(d + 1.0, gamma)) < here || here < 1e-12,
                "strict decrease",
            );
        }
    }
    let (_, mu_v) = compute_mu(2.0, 0.1);
    let literal = (mu_v - 0.802724).abs() <= 1e-6;
    let oracle = (mu_v - (1.0 - 0.2f64.tanh())).abs() < 1e-15;
    (
        violations.is_empty() && literal,
        format!(
            "10000 draws, violations {violations:?}; mu(2, 0.1) = {mu_v:.7} matches 1-tanh(0.2) {oracle}, \
             literal 0.802724 +/- 1e-6 {}",
            if literal { "holds" } else { "does not hold" }
        ),
    )
}

fn sha(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn degenerate_equivalence() -> (bool, String) {
    let mut details = Vec::new();
    let mut ok = true;
    let base = RunConfig {
        epochs: 5,
        ..RunConfig::default()
    };
    let data = base.load_dataset().unwrap();
    for mode in [PipelineMode::Traditional, PipelineMode::Msdu] {
        let mut plain = base.clone();
        plain.model.mode = mode;
        plain.optimizer.dgm = None;
        let mut forced = plain.clone();
        forced.optimizer.dgm = Some(ImbalanceMode::Fusion);
        forced.optimizer.force_omega = Some(1.0);
        forced.optimizer.noise = false;
        let a = train(&plain, &data, None).unwrap();
        let b = train(&forced, &data, None).unwrap();
        let (ha, hb) = (sha(&a.report.losses_csv()), sha(&b.report.losses_csv()));
        ok &= ha == hb && b.report.omega_evaluations > 0;
        details.push(format!("{mode:?} {}..{}", &ha[..12], &hb[..12]));
    }
    (ok, details.join(", "))
}

fn noise_statistics() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut ok = true;
    let mut details = Vec::new();
    for (mu, var) in [(0.8, 1.0), (0.35, 0.04), (0.5, 0.0)] {
        let s = noise_sample(&[100_000], mu, var, &mut rng);
        let got = element_variance(&s);
        let expect = (mu * mu + 1.0) * var;
        let pass = if var == 0.0 {
            s.data().iter().all(|&x| x == 0.0)
        } else {
            (got / expect - 1.0).abs() <= 0.03
        };
        ok &= pass;
        details.push(format!("mu {mu} var {var}: {got:.5} vs {expect:.5}"));
    }
    (ok, details.join(", "))
}

fn msdu_purity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = |rng: &mut ChaCha8Rng, shape: Vec<usize>| {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    };
    let (mut pure, mut sensitive) = (0, 0);
    for draw in 0..100u64 {
        let cfg = ModelConfig {
            audio_dim: 5,
            visual_dim: 4,
            hidden_dim: 6,
            num_classes: 3,
            mode: PipelineMode::Msdu,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, draw).unwrap();
        let (n, t) = (2, 4);
        let labels = Tensor::new(vec![n, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let batch = VideoBatch::new(
            normal(&mut rng, vec![n, t, 5]),
            normal(&mut rng, vec![n, t, 4]),
            labels,
            None,
        )
        .unwrap();
        let mut other_v = batch.clone();
        other_v.visual = normal(&mut rng, vec![n, t, 4]);
        let mut other_a = batch.clone();
        other_a.audio = normal(&mut rng, vec![n, t, 5]);
        let (c0, cv, ca) = (
            model.infer(&batch).unwrap(),
            model.infer(&other_v).unwrap(),
            model.infer(&other_a).unwrap(),
        );
        let (m0, mv, ma) = (c0.msdu.unwrap(), cv.msdu.unwrap(), ca.msdu.unwrap());
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&m0.p_a) == bits(&mv.p_a)
            && bits(&m0.a_a) == bits(&mv.a_a)
            && bits(&m0.p_v) == bits(&ma.p_v)
            && bits(&m0.a_v) == bits(&ma.a_v)
        {
            pure += 1;
        }
        let moved = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-9);
        if moved(&c0.fused.p_a, &cv.fused.p_a) && moved(&c0.fused.p_v, &ca.fused.p_v) {
            sensitive += 1;
        }
    }
    (
        pure == 100 && sensitive >= 99,
        format!("separated heads unchanged in {pure}/100, fused heads sensitive in {sensitive}/100"),
    )
}

fn metrics_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=3);
        let t = rng.random_range(1..=5);
        let c = rng.random_range(1..=3);
        let density = rng.random_range(0.1..0.9);
        let mut grid = || -> oracle::Grid {
            (0..n)
                .map(|_| {
                    (0..t)
                        .map(|_| (0..c).map(|_| rng.random_bool(density)).collect())
                        .collect()
                })
                .collect()
        };
        let (p, g) = (grid(), grid());
        let labels = |g: &oracle::Grid| SnippetLabels::from_fn(n, t, c, |a, b, k| g[a][b][k]);
        let (tp, fp, fn_) = oracle::cell_counts(&p, &g);
        if segment_f1(&labels(&p), &labels(&g)).unwrap() != oracle::f1(tp, fp, fn_) {
            mismatches += 1;
        }
        for v in 0..n {
            let flat = |g: &oracle::Grid| g[v].iter().flatten().copied().collect::<Vec<bool>>();
            let pe = extract_events(&flat(&p), t, c, Modality::A);
            let ge = extract_events(&flat(&g), t, c, Modality::A);
            let spans: Vec<oracle::Span> = pe
                .iter()
                .map(|e| oracle::Span {
                    class: e.class,
                    cells: (e.start..=e.end).collect(),
                })
                .collect();
            let (ps, gs) = (oracle::spans(&p[v], c), oracle::spans(&g[v], c));
            let (tp, fp, fn_) = oracle::event_counts(&ps, &gs, 0.5);
            if spans != ps || event_f1(&pe, &ge, 0.5).unwrap() != oracle::f1(tp, fp, fn_) {
                mismatches += 1;
            }
        }
    }
    (mismatches == 0, format!("200 instances, {mismatches} mismatches"))
}

fn mean(xs: &[&CellResult], f: impl Fn(&CellResult) -> f64) -> f64 {
    xs.iter().map(|r| f(r)).sum::<f64>() / xs.len() as f64
}

/// Pipeline cells plus the full gamma sweep, sharing the baseline and the
/// gamma = 0.1 cell.
fn desk_ablation() -> (AblationOutcome, Duration) {
    let base = RunConfig::default();
    let mut grid = AblationGrid::preset(Preset::Pipeline, base.clone());
    let sweep = AblationGrid::preset(Preset::Gamma, base.clone());
    let shared_gamma = base.optimizer.gamma;
    grid.cells.extend(
        sweep
            .cells
            .into_iter()
            .filter(|c| c.dgm.is_some() && (c.gamma - shared_gamma).abs() > 1e-12),
    );
    grid.seeds = vec![0, 1, 2];
    grid.workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let data = base.load_dataset().unwrap();
    let start = Instant::now();
    let outcome = ablate(&grid, &data).unwrap();
    (outcome, start.elapsed())
}

fn phenomenon(outcome: &AblationOutcome, took: Duration) -> (bool, String) {
    let cells = outcome.by_cell();
    let get = |name: &str| {
        cells
            .iter()
            .find(|(c, _)| c.name == name)
            .map(|(_, r)| r.clone())
            .unwrap()
    };
    let (base, dgm, full) = (get("baseline"), get("dgm"), get("dgm+msdu"));
    let gap = |r: &[&CellResult]| mean(r, |x| x.loss_gap);
    let weak = |r: &[&CellResult]| mean(r, |x| x.test.segment_v);
    let ratio_full = gap(&base) / gap(&full);
    let ratio_trad = gap(&base) / gap(&dgm);
    let (wb, wd, wf) = (weak(&base), weak(&dgm), weak(&full));
    let a = ratio_full >= 2.0;
    let b = wb < wd && wd < wf;
    (
        a && b && took < Duration::from_secs(900),
        format!(
            "(a) gap ratio baseline/+DGM+MSDU {ratio_full:.2} [{}], baseline/+DGM {ratio_trad:.2}; \
             (b) visual segment F {wb:.4} < {wd:.4} < {wf:.4} [{}]; grid {took:.0?}",
            if a { "ok" } else { "below 2" },
            if b { "ok" } else { "order broken" }
        ),
    )
}

fn gamma_sweep(outcome: &AblationOutcome) -> (bool, String) {
    let cells = outcome.by_cell();
    let base = cells.iter().find(|(c, _)| c.name == "baseline").unwrap();
    let floor = mean(&base.1, |r| r.test.segment_type);
    let mut below = Vec::new();
    let mut scores = Vec::new();
    let mut sweep: Vec<&(&AblationCell, Vec<&CellResult>)> =
        cells.iter().filter(|(c, _)| c.mode == PipelineMode::Msdu).collect();
    sweep.sort_by(|a, b| a.0.gamma.total_cmp(&b.0.gamma));
    for (cell, rows) in sweep.iter().map(|x| (x.0, &x.1)) {
        let m = mean(rows, |r| r.test.segment_type);
        scores.push(format!("{}:{m:.3}", cell.gamma));
        if m < floor {
            below.push(cell.gamma);
        }
    }
    (
        below.is_empty() && sweep.len() == 9,
        format!(
            "baseline Type@AV {floor:.3}; gamma cells {}; below baseline {below:?}",
            scores.join(" ")
        ),
    )
}

fn determinism() -> (bool, String) {
    let cfg = RunConfig {
        epochs: 3,
        ..RunConfig::default()
    };
    let data = cfg.load_dataset().unwrap();
    let runs: Vec<_> = (0..2).map(|_| train(&cfg, &data, None).unwrap()).collect();
    let digest = |o: &avvp_core::experiment::TrainOutcome| {
        sha(&format!(
            "{}{}{}{:?}",
            to_json(&o.report),
            o.report.losses_csv(),
            o.imbalance_csv,
            o.checkpoint().to_bytes()
        ))
    };
    let (a, b) = (digest(&runs[0]), digest(&runs[1]));
    (
        a == b,
        format!("report, curves and checkpoint digests {}..{}", &a[..12], &b[..12]),
    )
}

fn main() {
    let mut lines = Vec::new();
    let mut push = |id, name, (passed, detail): (bool, String)| {
        let line = Line {
            id,
            name,
            passed,
            detail,
        };
        println!(
            "[{}] {}. {}: {}",
            if line.passed { "PASS" } else { "FAIL" },
            line.id,
            line.name,
            line.detail
        );
        lines.push(line);
    };
    push(
        1,
        "gradient correctness",
        timed(Some(Duration::from_secs(60)), gradient_correctness),
    );
    push(
        2,
        "modulation algebra",
        timed(Some(Duration::from_secs(10)), modulation_algebra),
    );
    push(3, "degenerate equivalence", timed(None, degenerate_equivalence));
    push(4, "noise statistics", timed(None, noise_statistics));
    push(5, "separated-head purity", timed(None, msdu_purity));
    push(6, "metrics oracle", timed(None, metrics_oracle));
    let (outcome, took) = desk_ablation();
    if outcome.failures() > 0 {
        println!("{} ablation runs failed", outcome.failures());
        std::process::exit(1);
    }
    push(7, "imbalance phenomenon", phenomenon(&outcome, took));
    push(8, "gamma sweep", gamma_sweep(&outcome));
    push(9, "determinism", timed(None, determinism));

    let unexpected: Vec<u32> = lines
        .iter()
        .filter(|l| !l.passed && !KNOWN_FAILURES.contains(&l.id))
        .map(|l| l.id)
        .collect();
    let recovered: Vec<u32> = lines
        .iter()
        .filter(|l| l.passed && KNOWN_FAILURES.contains(&l.id))
        .map(|l| l.id)
        .collect();
    let passed = lines.iter().filter(|l| l.passed).count();
    println!(
        "{passed}/{} criteria pass; known failures {KNOWN_FAILURES:?}",
        lines.len()
    );
    if !recovered.is_empty() {
        println!("known failures now passing: {recovered:?}");
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
