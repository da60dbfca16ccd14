mod common;

use std::sync::Arc;

use mttrack_core::image::{crop_patch, Image};
use mttrack_core::tracker::{
    toy_train, Ablation, Network, TrackerConfig, Tracker, TrainConfig, TrainSequence,
};
use mttrack_core::{BBox, Graph, RngSeed};

/// Gray noise background with a bright checkered square centred at
/// `(cx, cy)`.
fn frame(cx: f64, cy: f64, size: f64) -> Image {
    let (w, h) = (160usize, 160usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let noise = ((x * 31 + y * 17) % 23) as u8;
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = (fx - cx).abs() < size / 2.0 && (fy - cy).abs() < size / 2.0;
            let px = if inside {
                let check = ((fx - cx + size).floor() as i64 / 4 + (fy - cy + size).floor() as i64 / 4) % 2;
                if check == 0 { [230, 60, 40] } else { [250, 220, 90] }
            } else {
                [90 + noise, 100 + noise, 110 + noise]
            };
            data.extend_from_slice(&px);
        }
    }
    Image::new(w, h, data).unwrap()
}

fn moving_frames(n: usize) -> (Vec<Image>, Vec<BBox>) {
    (0..n)
        .map(|i| {
            let (cx, cy) = (60.0 + 1.5 * i as f64, 70.0 + 0.5 * i as f64);
            (frame(cx, cy, 24.0), BBox::new(cx, cy, 24.0, 24.0).unwrap())
        })
        .unzip()
}

fn network() -> Arc<Network> {
    Arc::new(Network::new(&TrackerConfig::toy()).unwrap())
}

#[test]
fn initial_history_is_encoded_frame0_correlation() {
    let net = network();
    let tracker = Tracker::new(Arc::clone(&net), Ablation::Full);
    let (frames, boxes) = moving_frames(1);
    let state = tracker.init(&frames[0], boxes[0]).unwrap();

    let cfg = net.cfg();
    let (model, store) = (&net.model, &net.store);
    let mut g = Graph::new();
    let t = crop_patch(&frames[0], &boxes[0], 1.0, cfg.template_size).unwrap();
    let s = crop_patch(&frames[0], &boxes[0], cfg.search_factor(), cfg.search_size).unwrap();
    let (tv, sv) = (g.constant(t.pixels), g.constant(s.pixels));
    let t0 = model.extract(&mut g, store, tv).unwrap();
    let f0 = model.extract(&mut g, store, sv).unwrap();
    let map = g.depthwise_correlate(t0, f0).unwrap();
    let side = cfg.map_size();
    let tokens = g.reshape(map, &[side * side, cfg.channels]).unwrap();
    let enc = model.transformer.encode(&mut g, store, tokens).unwrap();
    assert!(state.hist_map.m_hist.tokens.bit_eq(g.value(enc)));
    assert_eq!(state.hist_map.m_hist.spatial, (side, side));
    assert!(state.mem.t0().bit_eq(g.value(t0)));
}

#[test]
fn unreachable_threshold_freezes_memory() {
    let tracker = Tracker::new(network(), Ablation::Full).with_tau(1e9);
    let (frames, boxes) = moving_frames(8);
    let mut state = tracker.init(&frames[0], boxes[0]).unwrap();
    let mem0 = state.mem.clone();
    for f in &frames[1..] {
        let step = tracker.track(&mut state, f).unwrap();
        assert!(!step.accepted);
    }
    assert_eq!(state.mem, mem0);
    assert_eq!(state.frame_index, 7);
}

#[test]
fn tracking_is_deterministic_with_constant_state_size() {
    let net = network();
    let (frames, boxes) = moving_frames(20);
    let run = || {
        let tracker = Tracker::new(Arc::clone(&net), Ablation::Full).with_tau(-1e9);
        let mut state = tracker.init(&frames[0], boxes[0]).unwrap();
        let size = state.to_bytes().len();
        let mut out = Vec::new();
        for f in &frames[1..] {
            let step = tracker.track(&mut state, f).unwrap();
            assert!(step.accepted);
            assert_eq!(state.to_bytes().len(), size);
            out.push(step);
        }
        (out, state.to_bytes())
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn temporal_fusion_with_zero_beta_matches_baseline() {
    let net = network();
    let (frames, boxes) = moving_frames(10);
    let track = |ablation: Ablation| {
        let tracker = Tracker::new(Arc::clone(&net), ablation).with_tau(-1e9);
        let mut state = tracker.init(&frames[0], boxes[0]).unwrap();
        frames[1..]
            .iter()
            .map(|f| {
                let s = tracker.track(&mut state, f).unwrap();
                (s.bbox, s.score)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(track(Ablation::Temcor), track(Ablation::Baseline));
}

#[test]
fn baseline_ignores_memory_and_transformer_parameters() {
    let mut net = Network::new(&TrackerConfig::toy()).unwrap();
    let (frames, boxes) = moving_frames(6);
    let run = |net: &Network| {
        let tracker = Tracker::new(Arc::new(net.clone()), Ablation::Baseline);
        let mut state = tracker.init(&frames[0], boxes[0]).unwrap();
        frames[1..].iter().map(|f| tracker.track(&mut state, f).unwrap().bbox).collect::<Vec<_>>()
    };
    let before = run(&net);
    let ids: Vec<_> = net
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("temporal.") || p.name.starts_with("transformer."))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        net.store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 5.0);
    }
    assert_eq!(run(&net), before);
}

#[test]
fn training_on_one_sequence_lowers_the_loss() {
    let mut net = Network::new(&TrackerConfig::toy()).unwrap();
    let (frames, boxes) = moving_frames(12);
    let data = vec![TrainSequence { frames, boxes }];
    let tc = TrainConfig {
        epochs: 6,
        batch_size: 4,
        samples_per_epoch: 16,
        shift_jitter: 0.0,
        scale_jitter: 0.0,
        ablation: Ablation::Baseline,
        seed: RngSeed(3),
        ..TrainConfig::default()
    };
    let report = toy_train(&mut net, &data, &tc).unwrap();
    assert_eq!(report.epoch_losses.len(), 6);
    assert!(report.step_losses.iter().all(|l| l.is_finite()));
    let (first, last) = (report.epoch_losses[0], *report.epoch_losses.last().unwrap());
    assert!(last < 0.8 * first, "epoch losses {:?}", report.epoch_losses);
}

#[test]
fn training_is_reproducible() {
    let (frames, boxes) = moving_frames(6);
    let data = vec![TrainSequence { frames, boxes }];
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 2,
        samples_per_epoch: 4,
        ablation: Ablation::Full,
        seed: RngSeed(11),
        ..TrainConfig::default()
    };
    let train = || {
        let mut net = Network::new(&TrackerConfig::toy()).unwrap();
        let r = toy_train(&mut net, &data, &tc).unwrap();
        (r, mttrack_core::tracker::checkpoint_bytes(&net).unwrap())
    };
    let (a, ca) = train();
    let (b, cb) = train();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn tracker_rejects_invalid_boxes() {
    let tracker = Tracker::new(network(), Ablation::Full);
    let f = frame(80.0, 80.0, 24.0);
    assert!(tracker.init(&f, BBox { cx: 80.0, cy: 80.0, w: 0.0, h: 10.0 }).is_err());
    assert!(tracker.init(&f, BBox { cx: 80.0, cy: 80.0, w: f64::NAN, h: 10.0 }).is_err());
}

#[test]
fn full_pipeline_is_finite_on_random_input() {
    use rand::Rng;
    let mut rng = RngSeed(21).rng();
    let mut noise = || {
        let data = (0..200 * 150 * 3).map(|_| rng.gen::<u8>()).collect();
        Image::new(200, 150, data).unwrap()
    };
    let tracker = Tracker::new(network(), Ablation::Full);
    let mut state = tracker.init(&noise(), BBox::new(100.0, 75.0, 30.0, 20.0).unwrap()).unwrap();
    for _ in 0..4 {
        let step = tracker.track(&mut state, &noise()).unwrap();
        let b = step.bbox;
        assert!([b.cx, b.cy, b.w, b.h, step.score].iter().all(|v| v.is_finite()), "{step:?}");
        assert!(b.w > 0.0 && b.h > 0.0);
    }
}

#[test]
fn single_sample_overfits_within_200_steps() {
    let f = frame(80.0, 80.0, 24.0);
    let b = BBox::new(80.0, 80.0, 24.0, 24.0).unwrap();
    let data = vec![TrainSequence { frames: vec![f.clone(), f], boxes: vec![b, b] }];
    let tc = TrainConfig {
        epochs: 10,
        batch_size: 1,
        samples_per_epoch: 20,
        shift_jitter: 0.0,
        scale_jitter: 0.0,
        ablation: Ablation::Full,
        seed: RngSeed(1),
        ..TrainConfig::default()
    };
    let mut net = Network::new(&TrackerConfig::toy()).unwrap();
    let report = toy_train(&mut net, &data, &tc).unwrap();
    assert_eq!(report.step_losses.len(), 200);
    let last = *report.epoch_losses.last().unwrap();
    assert!(last < 0.05, "epoch losses {:?}", report.epoch_losses);
}
