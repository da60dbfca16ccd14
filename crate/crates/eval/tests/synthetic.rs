use mttrack_core::Error;
use mttrack_eval::sequence::load_sequence;
use mttrack_eval::synthetic::{
    generate_synthetic, sequence_digest, write_suite, BlurEvent, Occlusion, SuiteSpec, SyntheticScene, SyntheticSpec,
};
use mttrack_core::RngSeed;
use proptest::prelude::*;

fn moving_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        name: "m".into(),
        frames: 30,
        target_size: [21.5, 17.25],
        waypoints: vec![[40.0, 50.0], [120.0, 90.0], [70.0, 130.0]],
        jitter: 1.0,
        scale_rate: 0.01,
        camera_speed: [0.7, -0.4],
        distractors: 2,
        appearance_drift: 0.5,
        seed: RngSeed(seed),
        ..SyntheticSpec::default()
    }
}

/// Coverage-weighted centroid of the visible target mass.
fn centroid(visible: &[f64], width: usize) -> (f64, f64, f64) {
    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, &c) in visible.iter().enumerate() {
        m += c;
        sx += c * ((i % width) as f64 + 0.5);
        sy += c * ((i / width) as f64 + 0.5);
    }
    (m, sx / m, sy / m)
}

#[test]
fn visible_mass_is_centered_on_ground_truth() {
    let scene = SyntheticScene::new(&moving_spec(4)).unwrap();
    for t in 0..30 {
        let f = scene.render(t).unwrap();
        let gt = scene.ground_truth()[t];
        let (mass, cx, cy) = centroid(&f.visible, 160);
        assert!((mass - gt.w * gt.h).abs() < 1e-6, "frame {t}: mass {mass}");
        assert!((cx - gt.cx).abs() <= 0.5 && (cy - gt.cy).abs() <= 0.5, "frame {t}");
    }
}

#[test]
fn full_occlusion_hides_target() {
    let spec = SyntheticSpec {
        occlusions: vec![Occlusion { start: 5, duration: 4, coverage: 1.0 }],
        ..moving_spec(2)
    };
    let scene = SyntheticScene::new(&spec).unwrap();
    for t in 0..30 {
        let mass: f64 = scene.render(t).unwrap().visible.iter().sum();
        if (5..9).contains(&t) {
            assert_eq!(mass, 0.0, "frame {t}");
        } else {
            assert!(mass > 0.0, "frame {t}");
        }
    }
}

#[test]
fn partial_occlusion_hides_at_least_its_fraction() {
    let spec = SyntheticSpec {
        occlusions: vec![Occlusion { start: 0, duration: 30, coverage: 0.5 }],
        ..moving_spec(3)
    };
    let scene = SyntheticScene::new(&spec).unwrap();
    for t in [0, 10, 29] {
        let gt = scene.ground_truth()[t];
        let mass: f64 = scene.render(t).unwrap().visible.iter().sum();
        assert!(mass <= 0.5 * gt.w * gt.h + 1e-9 && mass > 0.0);
    }
}

#[test]
fn zero_motion_gives_constant_ground_truth() {
    let spec = SyntheticSpec { frames: 12, ..SyntheticSpec::default() };
    let seq = generate_synthetic(&spec).unwrap();
    assert!(seq.gt.iter().all(|b| *b == seq.gt[0]));
    // static camera and scene: every frame is identical
    let first = seq.frames[0].load().unwrap();
    assert!(seq.frames.iter().all(|f| *f.load().unwrap() == *first));
}

#[test]
fn blur_changes_only_event_frames() {
    let base = SyntheticSpec { frames: 6, ..SyntheticSpec::default() };
    let blurred = SyntheticSpec {
        blur: vec![BlurEvent { start: 2, duration: 2, sigma: 1.5 }],
        ..base.clone()
    };
    let (a, b) = (generate_synthetic(&base).unwrap(), generate_synthetic(&blurred).unwrap());
    for t in 0..6 {
        let same = *a.frames[t].load().unwrap() == *b.frames[t].load().unwrap();
        assert_eq!(same, !(2..4).contains(&t), "frame {t}");
    }
}

#[test]
fn oversized_target_is_rejected() {
    let spec = SyntheticSpec { target_size: [20.0, 161.0], ..SyntheticSpec::default() };
    assert!(matches!(generate_synthetic(&spec), Err(Error::Input(_))));
}

#[test]
fn suite_on_disk_matches_manifest() {
    let suite = SuiteSpec {
        sequences: 3,
        frames: 8,
        occlusions: vec![Occlusion { start: 3, duration: 2, coverage: 1.0 }],
        seed: RngSeed(11),
        ..SuiteSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_suite(&suite, dir.path()).unwrap();
    assert_eq!(manifest.sequences.len(), 3);
    for e in &manifest.sequences {
        assert!(e.occlusions.contains(&Occlusion { start: 3, duration: 2, coverage: 1.0 }));
        let seq = load_sequence(&dir.path().join(&e.name)).unwrap();
        assert_eq!(seq.len(), 8);
        assert_eq!(sequence_digest(&seq).unwrap(), e.sha256);
    }
    let again = tempfile::tempdir().unwrap();
    assert_eq!(write_suite(&suite, again.path()).unwrap(), manifest);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ground_truth_stays_inside_frame(seed in 0u64..1_000_000, frames in 2usize..60) {
        let suite = SuiteSpec { sequences: 2, frames, seed: RngSeed(seed), ..SuiteSpec::default() };
        for spec in suite.expand().unwrap() {
            let scene = SyntheticScene::new(&spec).unwrap();
            for b in scene.ground_truth() {
                prop_assert!(b.x0() >= -1e-9 && b.y0() >= -1e-9);
                prop_assert!(b.x1() <= 160.0 + 1e-9 && b.y1() <= 160.0 + 1e-9);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic(seed in 0u64..1_000_000) {
        let spec = SyntheticSpec { frames: 3, ..moving_spec(seed) };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        prop_assert_eq!(sequence_digest(&a).unwrap(), sequence_digest(&b).unwrap());
    }
}
