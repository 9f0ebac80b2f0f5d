use avvp_demo::{compare_value, mu_curve_value, preview_value};

#[test]
fn mu_curve_damps_one_side_at_a_time() {
    let v = mu_curve_value(0.3, 10.0, 21).unwrap();
    let get = |k: &str| {
        v[k].as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect::<Vec<_>>()
    };
    let (omega, mu_a, mu_v) = (get("omega"), get("mu_a"), get("mu_v"));
    assert_eq!(omega.len(), 21);
    assert!((omega[10] - 1.0).abs() < 1e-12);
    for i in 0..21 {
        assert!(mu_a[i] == 1.0 || mu_v[i] == 1.0);
    }
    assert!(mu_v.windows(2).all(|w| w[1] <= w[0]));
    assert!(mu_curve_value(0.3, 0.5, 21).is_err());
}

#[test]
fn preview_grids_have_snippet_by_class_shape() {
    let v = preview_value(0.6, 1).unwrap();
    let cells = v["snippets"].as_u64().unwrap() * v["classes"].as_u64().unwrap();
    for k in ["audio_truth", "visual_truth", "audio_response", "visual_response"] {
        assert_eq!(v[k].as_array().unwrap().len() as u64, cells, "{k}");
    }
    assert!(preview_value(1.5, 1).is_err());
}

#[test]
fn comparison_reports_both_runs() {
    let v = compare_value(0.6, 2, 0.1, 0).unwrap();
    let runs = v["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    for r in runs {
        assert_eq!(r["loss_a"].as_array().unwrap().len(), 2);
        assert!(r["final_loss_gap"].as_f64().unwrap().is_finite());
    }
    assert!(runs[0]["mu_v"][0].is_null());
    assert!(runs[1]["mu_v"][0].is_f64());
}
