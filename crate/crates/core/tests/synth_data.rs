use avvp_core::synth::{self, DataError, SynthConfig, FEATURES_FILE, LABELS_FILE, MANIFEST_FILE};
use std::fs;

fn small() -> SynthConfig {
    SynthConfig {
        videos: 20,
        snippets: 8,
        classes: 5,
        audio_dim: 6,
        visual_dim: 4,
        dominance: 0.4,
        noise_scale: 0.5,
        event_density: 2.0,
        seed: 3,
    }
}

#[test]
fn save_load_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth::generate(&small()).unwrap();
    synth::save(&data, dir.path()).unwrap();
    let back = synth::load(dir.path()).unwrap();
    assert_eq!(back, data);
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.videos[7].visual), bits(&data.videos[7].visual));
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth::save(&synth::generate(&small()).unwrap(), a.path()).unwrap();
    synth::save(&synth::generate(&small()).unwrap(), b.path()).unwrap();
    for f in [MANIFEST_FILE, FEATURES_FILE, LABELS_FILE] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn truncated_payload_is_a_parse_error_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    synth::save(&synth::generate(&small()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join(FEATURES_FILE);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    match synth::load(dir.path()) {
        Err(DataError::Parse { offset, .. }) => assert_eq!(offset, bytes.len() - 5),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_labels_report_byte_offset() {
    let dir = tempfile::tempdir().unwrap();
    synth::save(&synth::generate(&small()).unwrap(), dir.path()).unwrap();
    fs::write(dir.path().join(LABELS_FILE), b"{\"video_labels\": [[1, 0,]]}").unwrap();
    match synth::load(dir.path()) {
        Err(DataError::Parse { file, offset, .. }) => {
            assert_eq!(file, LABELS_FILE);
            assert!(offset > 0 && offset < 27, "{offset}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn manifest_shape_mismatch_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    synth::save(&synth::generate(&small()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("\"audio_dim\": 6", "\"audio_dim\": 7");
    fs::write(&path, text).unwrap();
    assert!(matches!(synth::load(dir.path()), Err(DataError::Validation(_))));
}

#[test]
fn audiovisual_truth_is_and_of_modalities() {
    let data = synth::generate(&small()).unwrap();
    let mut seen = [false; 3];
    for v in &data.videos {
        let av = v.audiovisual_truth();
        for ((&both, &a), &vis) in av.iter().zip(&v.audio_truth).zip(&v.visual_truth) {
            assert_eq!(both, a && vis);
            seen[0] |= a && !vis;
            seen[1] |= vis && !a;
            seen[2] |= both;
        }
    }
    assert_eq!(seen, [true; 3], "all three event types occur");
}

/// Per-class logistic regression on snippet features, trained by batch
/// gradient descent; returns held-out binary accuracy over snippet-class
/// cells.
fn probe_accuracy(train: &[(Vec<f32>, Vec<bool>)], test: &[(Vec<f32>, Vec<bool>)], dim: usize, classes: usize) -> f64 {
    let mut w = vec![vec![0.0f64; dim + 1]; classes];
    for _ in 0..200 {
        for (c, wc) in w.iter_mut().enumerate() {
            let mut g = vec![0.0; dim + 1];
            for (x, y) in train {
                let z: f64 = wc[dim] + x.iter().zip(wc.iter()).map(|(&a, b)| a as f64 * b).sum::<f64>();
                let r = 1.0 / (1.0 + (-z).exp()) - if y[c] { 1.0 } else { 0.0 };
                for k in 0..dim {
                    g[k] += r * x[k] as f64;
                }
                g[dim] += r;
            }
            for k in 0..=dim {
                wc[k] -= 0.5 * g[k] / train.len() as f64;
            }
        }
    }
    let mut correct = 0;
    for (x, y) in test {
        for c in 0..classes {
            let z: f64 = w[c][dim] + x.iter().zip(&w[c]).map(|(&a, b)| a as f64 * b).sum::<f64>();
            correct += usize::from((z >= 0.0) == y[c]);
        }
    }
    correct as f64 / (test.len() * classes) as f64
}

fn snippets(data: &synth::Dataset, audio: bool) -> Vec<(Vec<f32>, Vec<bool>)> {
    let cfg = &data.config;
    let (dim, c) = (if audio { cfg.audio_dim } else { cfg.visual_dim }, cfg.classes);
    let mut out = Vec::new();
    for v in &data.videos {
        let (feat, truth) = if audio {
            (&v.audio, &v.audio_truth)
        } else {
            (&v.visual, &v.visual_truth)
        };
        for t in 0..cfg.snippets {
            out.push((
                feat[t * dim..(t + 1) * dim].to_vec(),
                truth[t * c..(t + 1) * c].to_vec(),
            ));
        }
    }
    out
}

#[test]
fn linear_probe_prefers_audio_when_dominance_exceeds_threshold() {
    for dominance in [0.3, 0.6] {
        let cfg = SynthConfig {
            videos: 240,
            snippets: 8,
            classes: 5,
            audio_dim: 12,
            visual_dim: 12,
            dominance,
            noise_scale: 0.8,
            event_density: 2.0,
            seed: 17,
        };
        let data = synth::generate(&cfg).unwrap();
        let acc = |audio| {
            let all = snippets(&data, audio);
            let (train, test) = all.split_at(all.len() * 3 / 4);
            probe_accuracy(train, test, 12, 5)
        };
        let (a, v) = (acc(true), acc(false));
        assert!(a > v, "dominance {dominance}: audio {a} visual {v}");
    }
}
