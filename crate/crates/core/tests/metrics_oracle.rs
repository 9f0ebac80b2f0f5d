#[path = "common/oracle.rs"]
mod oracle;

use avvp_core::metrics::{
    event_counts_all, event_f1, extract_events, full_report, segment_counts, segment_f1, EvalConfig, Modality,
    SnippetLabels,
};
use oracle::Grid;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(rng: &mut ChaCha8Rng, n: usize, t: usize, c: usize, density: f64) -> Grid {
    (0..n)
        .map(|_| {
            (0..t)
                .map(|_| (0..c).map(|_| rng.random_bool(density)).collect())
                .collect()
        })
        .collect()
}

fn labels(g: &Grid) -> SnippetLabels {
    let (n, t, c) = (g.len(), g[0].len(), g[0][0].len());
    SnippetLabels::from_fn(n, t, c, |a, b, k| g[a][b][k])
}

#[test]
fn matches_oracle_on_random_tiny_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let miou = 0.5;
    for case in 0..200 {
        let n = rng.random_range(1..=3);
        let t = rng.random_range(1..=5);
        let c = rng.random_range(1..=3);
        let density = rng.random_range(0.1..0.9);
        let (pa, pv, ta, tv) = (
            random_grid(&mut rng, n, t, c, density),
            random_grid(&mut rng, n, t, c, density),
            random_grid(&mut rng, n, t, c, density),
            random_grid(&mut rng, n, t, c, density),
        );

        let (tp, fp, fn_) = oracle::cell_counts(&pa, &ta);
        let got = segment_counts(&labels(&pa), &labels(&ta)).unwrap();
        assert_eq!((got.tp, got.fp, got.fn_), (tp, fp, fn_), "case {case}");
        assert_eq!(segment_f1(&labels(&pa), &labels(&ta)).unwrap(), oracle::f1(tp, fp, fn_));

        for v in 0..n {
            let flat: Vec<bool> = pa[v].iter().flatten().copied().collect();
            let events = extract_events(&flat, t, c, Modality::A);
            let spans: Vec<oracle::Span> = events
                .iter()
                .map(|e| oracle::Span {
                    class: e.class,
                    cells: (e.start..=e.end).collect(),
                })
                .collect();
            assert_eq!(spans, oracle::spans(&pa[v], c), "case {case} video {v}");

            let truth_flat: Vec<bool> = ta[v].iter().flatten().copied().collect();
            let truth_events = extract_events(&truth_flat, t, c, Modality::A);
            let (tp, fp, fn_) = oracle::event_counts(&oracle::spans(&pa[v], c), &oracle::spans(&ta[v], c), miou);
            assert_eq!(
                event_f1(&events, &truth_events, miou).unwrap(),
                oracle::f1(tp, fp, fn_),
                "case {case}"
            );
        }

        let per_video = event_counts_all(&labels(&pa), &labels(&ta), Modality::A, miou).unwrap();
        let sum = per_video
            .iter()
            .fold((0, 0, 0), |s, k| (s.0 + k.tp, s.1 + k.fp, s.2 + k.fn_));
        assert_eq!(sum, oracle::event_totals(&pa, &ta, c, miou));

        let report = full_report(
            &labels(&pa),
            &labels(&pv),
            &labels(&ta),
            &labels(&tv),
            &EvalConfig::default(),
        )
        .unwrap();
        let expect = oracle::report(&pa, &pv, &ta, &tv, c, miou);
        for (k, (a, b)) in report.values().iter().zip(expect).enumerate() {
            assert!((a - b).abs() < 1e-12, "case {case} field {k}: {a} vs {b}");
        }
    }
}

#[test]
fn three_video_toy_case() {
    let row = |s: &str| s.chars().map(|ch| ch == '1').collect::<Vec<bool>>();
    let video = |rows: &[&str]| rows.iter().map(|r| row(r)).collect::<Vec<_>>();
    let ta = vec![
        video(&["10", "10", "00", "01"]),
        video(&["00", "00", "00", "00"]),
        video(&["11", "11", "01", "00"]),
    ];
    let tv = vec![
        video(&["10", "00", "00", "01"]),
        video(&["01", "01", "00", "00"]),
        video(&["01", "01", "01", "01"]),
    ];
    let pa = vec![
        video(&["10", "10", "10", "00"]),
        video(&["00", "01", "00", "00"]),
        video(&["11", "01", "01", "00"]),
    ];
    let pv = vec![
        video(&["10", "00", "00", "01"]),
        video(&["01", "00", "00", "00"]),
        video(&["00", "01", "01", "01"]),
    ];
    let report = full_report(
        &labels(&pa),
        &labels(&pv),
        &labels(&ta),
        &labels(&tv),
        &EvalConfig::default(),
    )
    .unwrap();
    let expect = oracle::report(&pa, &pv, &ta, &tv, 2, 0.5);
    assert_eq!(report.values(), expect);
}

fn grid_strategy() -> impl Strategy<Value = (Grid, Grid)> {
    (1usize..4, 1usize..7, 1usize..4).prop_flat_map(|(n, t, c)| {
        let g = proptest::collection::vec(
            proptest::collection::vec(proptest::collection::vec(any::<bool>(), c), t),
            n,
        );
        (g.clone(), g)
    })
}

proptest! {
    #[test]
    fn permuting_videos_leaves_scores_unchanged((p, t) in grid_strategy(), rot in 0usize..3) {
        let n = p.len();
        let k = rot % n;
        let mut p2 = p.clone();
        let mut t2 = t.clone();
        p2.rotate_left(k);
        t2.rotate_left(k);
        let cfg = EvalConfig::default();
        let a = full_report(&labels(&p), &labels(&p), &labels(&t), &labels(&t), &cfg).unwrap();
        let b = full_report(&labels(&p2), &labels(&p2), &labels(&t2), &labels(&t2), &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn perfect_segments_give_perfect_events((_, t) in grid_strategy()) {
        let r = full_report(&labels(&t), &labels(&t), &labels(&t), &labels(&t), &EvalConfig::default()).unwrap();
        prop_assert!(r.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn painting_events_reproduces_timeline((p, _) in grid_strategy()) {
        let (t, c) = (p[0].len(), p[0][0].len());
        for video in &p {
            let flat: Vec<bool> = video.iter().flatten().copied().collect();
            let mut painted = vec![false; t * c];
            for e in extract_events(&flat, t, c, Modality::V) {
                for s in e.start..=e.end {
                    painted[s * c + e.class] = true;
                }
            }
            prop_assert_eq!(painted, flat);
        }
    }

    #[test]
    fn type_is_mean_of_three((p, t) in grid_strategy()) {
        let r = full_report(&labels(&p), &labels(&t), &labels(&t), &labels(&p), &EvalConfig::default()).unwrap();
        prop_assert!((r.segment_type - (r.segment_a + r.segment_v + r.segment_av) / 3.0).abs() < 1e-9);
        prop_assert!((r.event_type - (r.event_a + r.event_v + r.event_av) / 3.0).abs() < 1e-9);
    }
}
