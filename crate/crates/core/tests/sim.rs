use ptrack::sim::*;

fn ground_truth(spec: &ScenarioSpec) -> GroundTruth {
    GroundTruth {
        frames: EpisodeStream::new(spec.clone()).unwrap().map(|(_, g)| g).collect(),
    }
}

#[test]
fn long_term_occlusion_frequency_matches_rate() {
    let spec = preset("long_term").unwrap().with_len(10_000).with_seed(11);
    let gt = ground_truth(&spec);
    let per_100 = gt.occlusion_onsets() as f64 / 100.0;
    let rel = (per_100 - spec.occlusion_rate).abs() / spec.occlusion_rate;
    assert!(rel <= 0.2, "measured {per_100} onsets per 100 frames");
}

#[test]
fn short_term_is_far_less_occluded() {
    let short = ground_truth(&preset("short_term").unwrap().with_len(10_000).with_seed(3));
    let long = ground_truth(&preset("long_term").unwrap().with_len(10_000).with_seed(3));
    let (s, l) = (short.occluded_fraction(), long.occluded_fraction());
    assert!(l > 0.0 && s * 5.0 <= l, "short {s}, long {l}");
    assert!(short.frames.iter().all(|f| !f.cut_here));
    assert!(long.frames.iter().any(|f| f.cut_here));
}

#[test]
fn motion_and_cut_displacements() {
    let spec = preset("long_term").unwrap().with_len(3000).with_seed(5);
    let gt = ground_truth(&spec);
    let (h, w) = (spec.height() as f64, spec.width() as f64);
    let diag = (h * h + w * w).sqrt();
    for pair in gt.frames.windows(2) {
        let (a, b) = (pair[0].bbox.unwrap().center_f64(), pair[1].bbox.unwrap().center_f64());
        let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        if pair[1].cut_here {
            assert!(d >= diag / 4.0, "cut moved only {d}");
        } else if !pair[0].occluded && !pair[1].occluded {
            // per axis bound, so the Euclidean step may reach sqrt(2) times it
            let bound = 3.0 * spec.motion_step_sigma + 1.0;
            assert!((a.0 - b.0).abs() <= bound && (a.1 - b.1).abs() <= bound, "step {d}");
        }
    }
}

#[test]
fn streaming_and_batch_generation_agree() {
    let spec = preset("short_term").unwrap().with_len(40).with_seed(8);
    let ep = generate_episode(&spec).unwrap();
    let streamed: Vec<_> = EpisodeStream::new(spec).unwrap().collect();
    assert_eq!(ep.frames.len(), streamed.len());
    for ((f, g), (sf, sg)) in ep.frames.iter().zip(&ep.ground_truth.frames).zip(&streamed) {
        assert_eq!(f, sf);
        assert_eq!(g, sg);
    }
}

#[test]
fn ground_truth_json_layout() {
    let spec = preset("long_term").unwrap().with_len(300).with_seed(1);
    let gt = ground_truth(&spec);
    let v: serde_json::Value = serde_json::to_value(&gt).unwrap();
    let f0 = &v["frames"][0];
    assert_eq!(f0["i"], 0);
    assert_eq!(f0["box"].as_array().unwrap().len(), 4);
    assert!(f0["occluded"].is_boolean() && f0["cut"].is_boolean());
    // externally recorded files may omit optional fields and boxes
    let ext: GroundTruth =
        serde_json::from_str(r#"{"frames":[{"i":0,"box":[1,2,3,3],"occluded":false,"cut":false},{"i":1,"box":null,"occluded":true,"cut":false}]}"#)
            .unwrap();
    assert_eq!(ext.frames[1].visible_box(), None);
}

#[test]
fn unknown_preset_is_rejected() {
    assert!(matches!(preset("x"), Err(SimError::UnknownPreset(_))));
}
