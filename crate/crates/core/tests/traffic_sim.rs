use maneuver_core::geometry::{birdseye_project, CameraModel, GeometryError, ImagePoint};
use maneuver_core::scene_graph::{Behavior, NodeType, NUM_CLASSES};
use maneuver_core::traffic_sim::*;
use proptest::prelude::*;

fn quiet() -> WorldConfig {
    WorldConfig { noise_sigma: 0.0, ..WorldConfig::default() }
}

fn only(class: Behavior) -> [f64; NUM_CLASSES] {
    let mut mix = [0.0; NUM_CLASSES];
    mix[class.index()] = 1.0;
    mix
}

#[test]
fn scenario_is_deterministic() {
    let cfg = WorldConfig::default();
    let a = generate_scenario(&[1.0 / 6.0; 6], &cfg, 42).unwrap();
    let b = generate_scenario(&[1.0 / 6.0; 6], &cfg, 42).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = generate_scenario(&[1.0 / 6.0; 6], &cfg, 43).unwrap();
    assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
}

#[test]
fn all_parked_mix_is_static() {
    let cfg = WorldConfig { background_vehicles: [0, 0], ..quiet() };
    for seed in 0..20 {
        let sc = generate_scenario(&only(Behavior::Parked), &cfg, seed).unwrap();
        for v in &sc.vehicles {
            assert_eq!(v.behavior, Behavior::Parked);
            let track = v.trajectory(&cfg);
            assert!(track.iter().all(|p| p == &track[0]), "vehicle {} moved", v.id);
        }
    }
}

#[test]
fn overtake_has_order_flip_between_moving_vehicles() {
    let cfg = quiet();
    for seed in 0..30 {
        let sc = generate_scenario_for(Behavior::Overtaking, &cfg, seed).unwrap();
        let (lead, passed) = sc.overtake.expect("overtake pair recorded");
        let track = |id: u32| sc.vehicles.iter().find(|v| v.id == id).unwrap().trajectory(&cfg);
        let (a, b) = (track(lead), track(passed));
        let gap: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p[1] - q[1]).collect();
        let flip = gap.windows(2).any(|w| w[0] < 0.0 && w[1] > 0.0);
        assert!(flip, "seed {seed}: no pass in {gap:?}");
        for t in 0..a.len() - 1 {
            let va = (a[t + 1][1] - a[t][1]) / cfg.frame_dt;
            let vb = (b[t + 1][1] - b[t][1]) / cfg.frame_dt;
            assert!(va > MOVING_SPEED && vb > MOVING_SPEED);
        }
    }
}

#[test]
fn parked_vehicle_recedes_at_ego_speed() {
    let cfg = WorldConfig { background_vehicles: [0, 0], ..quiet() };
    let sc = generate_scenario_for(Behavior::Parked, &cfg, 5).unwrap();
    let seq = simulate(&sc).unwrap();
    let v = (sc.ego[1].y - sc.ego[0].y) / cfg.frame_dt;
    assert!(v >= cfg.ego_speed[0] && v <= cfg.ego_speed[1]);
    let row = seq.node_ids().iter().position(|&id| id == sc.vehicles[0].id).unwrap();
    let p = seq.positions();
    for t in 1..seq.t() {
        let step = p[t - 1][row][1] - p[t][row][1];
        assert!((step - v * cfg.frame_dt).abs() < 1e-9, "frame {t}: {step}");
        assert!((p[t][row][0] - p[0][row][0]).abs() < 1e-12);
    }
}

#[test]
fn stationary_ego_sees_world_frame() {
    let cfg = WorldConfig { ego_speed: [0.0, 0.0], ..quiet() };
    let sc = generate_scenario(&[1.0 / 6.0; 6], &cfg, 9).unwrap();
    let seq = simulate(&sc).unwrap();
    let (x0, y0) = (sc.ego[0].x, sc.ego[0].y);
    for (cam, world) in seq.positions().iter().zip(transpose(&sc.world_positions())) {
        for (c, w) in cam.iter().zip(&world) {
            assert!((c[0] - (w[0] - x0)).abs() < 1e-12 && (c[1] - (w[1] - y0)).abs() < 1e-12);
        }
    }
}

fn transpose(tracks: &[Vec<[f64; 2]>]) -> Vec<Vec<[f64; 2]>> {
    (0..tracks[0].len()).map(|t| tracks.iter().map(|tr| tr[t]).collect()).collect()
}

#[test]
fn generated_sequences_pass_validation() {
    let cfg = WorldConfig::default();
    for seed in 0..60 {
        let sc = generate_scenario(&[1.0 / 6.0; 6], &cfg, seed).unwrap();
        validate_labels(&sc).unwrap();
        assert!(!sc.vehicles.is_empty());
        assert!(sc.landmarks.len() >= 2);
        let seq = simulate(&sc).unwrap();
        assert_eq!(seq.t(), cfg.frames);
        assert_eq!(seq.vehicle_count(), sc.vehicles.len());
        for (id, b) in seq.labels() {
            let v = sc.vehicles.iter().find(|v| v.id == *id).unwrap();
            assert_eq!(v.behavior, *b);
        }
        for g in seq.frames() {
            assert_eq!(g.node_types().iter().filter(|t| **t == NodeType::Landmark).count(), sc.landmarks.len());
        }
    }
}

#[test]
fn validator_rejects_broken_labels() {
    let cfg = quiet();
    let mut sc = generate_scenario_for(Behavior::Parked, &cfg, 3).unwrap();
    sc.vehicles[0].behavior = Behavior::MovingAway;
    assert!(matches!(validate_labels(&sc), Err(SimError::Label { .. })));

    let mut sc = generate_scenario_for(Behavior::LaneChangeLeftToRight, &cfg, 3).unwrap();
    sc.vehicles[0].behavior = Behavior::LaneChangeRightToLeft;
    assert!(matches!(validate_labels(&sc), Err(SimError::Label { .. })));
}

#[test]
fn image_view_round_trips_through_birdseye() {
    let cfg = quiet();
    for seed in 0..10 {
        let sc = generate_scenario(&[1.0 / 6.0; 6], &cfg, seed).unwrap();
        let seq = simulate(&sc).unwrap();
        let view = image_space_view(&sc).unwrap();
        assert_eq!(view.node_ids, seq.node_ids());
        let mut checked = 0;
        for (frame, positions) in view.frames.iter().zip(seq.positions()) {
            for (img, p) in frame.iter().zip(positions) {
                let Some(img) = img else {
                    assert!(p[1] < MIN_IMAGE_DEPTH);
                    continue;
                };
                let bev = birdseye_project(img, &view.camera).unwrap();
                assert!((bev.lateral() - p[0]).abs() < 1e-6 && (bev.forward() - p[1]).abs() < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }
}

#[test]
fn horizon_pixel_is_degenerate() {
    let cam = WorldConfig::default().camera.model().unwrap();
    let horizon = ImagePoint::new(100.0, WorldConfig::default().camera.cy).unwrap();
    assert!(matches!(birdseye_project(&horizon, &cam), Err(GeometryError::HorizonDegenerate(_))));
}

#[test]
fn principal_point_column_maps_to_straight_ahead() {
    let c = WorldConfig::default().camera;
    let cam: CameraModel = c.model().unwrap();
    // A pixel f·h/d rows below the principal point sees the ground d metres ahead.
    let d = 20.0;
    let img = ImagePoint::new(c.cx, c.cy + c.focal * c.height / d).unwrap();
    let bev = birdseye_project(&img, &cam).unwrap();
    assert!(bev.lateral().abs() < 1e-9);
    assert!((bev.forward() - d).abs() < 1e-9);
}

#[test]
fn default_dataset_split_and_repeatability() {
    let cfg = WorldConfig::default();
    let mix = [1.0 / 6.0; 6];
    let a = generate_dataset(600, &mix, &cfg, 0).unwrap();
    let s = &a.manifest.split;
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (480, 60, 60));
    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..600).collect::<Vec<_>>());
    for b in Behavior::ALL {
        assert_eq!(a.manifest.primary_classes.iter().filter(|&&c| c == b).count(), 100);
        assert_eq!(a.manifest.class_counts[b.abbrev()], 100);
    }

    let dir = tempdir("dataset");
    let (d1, d2) = (dir.join("one"), dir.join("two"));
    write_dataset(&a, &d1).unwrap();
    write_dataset(&generate_dataset(600, &mix, &cfg, 0).unwrap(), &d2).unwrap();
    for f in [SEQUENCES_FILE, MANIFEST_FILE] {
        assert_eq!(std::fs::read(d1.join(f)).unwrap(), std::fs::read(d2.join(f)).unwrap());
    }
    let back = load_dataset(&d1).unwrap();
    assert_eq!(back.manifest, a.manifest);
    assert_eq!(back.sequences.len(), 600);
    assert_eq!(back.sequences[17], a.sequences[17]);
    std::fs::remove_dir_all(&dir).unwrap();
}

fn tempdir(tag: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("maneuver-sim-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

#[test]
fn uneven_mix_is_stratified_by_largest_remainder() {
    let mix = [0.25, 0.25, 0.2, 0.1, 0.1, 0.1];
    assert_eq!(stratified_counts(600, &mix), [150, 150, 120, 60, 60, 60]);
    let c = stratified_counts(7, &[1.0 / 6.0; 6]);
    assert_eq!(c.iter().sum::<usize>(), 7);
    assert_eq!(c, [2, 1, 1, 1, 1, 1]);
    let ds = generate_dataset(40, &mix, &quiet(), 1).unwrap();
    let counts = stratified_counts(40, &mix);
    for b in Behavior::ALL {
        let n = ds.manifest.primary_classes.iter().filter(|&&c| c == b).count();
        assert_eq!(n, counts[b.index()]);
    }
}

#[test]
fn config_errors() {
    let cfg = WorldConfig { lane_count: 1, ..WorldConfig::default() };
    assert!(matches!(generate_scenario_for(Behavior::LaneChangeLeftToRight, &cfg, 0), Err(SimError::Config(_))));
    assert!(matches!(generate_scenario(&[0.5; 6], &WorldConfig::default(), 0), Err(SimError::Config(_))));
    let cfg = WorldConfig { frame_dt: 0.0, ..WorldConfig::default() };
    assert!(cfg.validate().is_err());
    let json = r#"{"lane_count": 3, "bogus": 1}"#;
    assert!(serde_json::from_str::<WorldConfig>(json).is_err());
}

#[test]
fn presets_parse_and_differ() {
    for p in Preset::ALL {
        assert_eq!(p.letter().to_string().parse::<Preset>().unwrap(), p);
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        p.config().validate().unwrap();
    }
    assert_ne!(Preset::ApolloLike.config().hash(), Preset::KittiLike.config().hash());
    assert!("D".parse::<Preset>().is_err());
}

#[test]
fn world_config_json_round_trip() {
    let cfg = Preset::IndianLike.config();
    let text = serde_json::to_string(&cfg).unwrap();
    assert!(text.contains("\"T\":10"));
    let back: WorldConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let partial: WorldConfig = serde_json::from_str(r#"{"lane_count": 4}"#).unwrap();
    assert_eq!(partial.lane_count, 4);
    assert_eq!(partial.frames, WorldConfig::default().frames);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn positions_move_by_speed_times_dt(seed in any::<u64>()) {
        let cfg = WorldConfig::default();
        let sc = generate_scenario(&[1.0 / 6.0; 6], &cfg, seed).unwrap();
        let seq = simulate(&sc).unwrap();
        let p = seq.positions();
        let bound = 8.0 * cfg.noise_sigma;
        for (k, v) in sc.vehicles.iter().enumerate() {
            for t in 1..seq.t() {
                let ego_step = sc.ego[t].y - sc.ego[t - 1].y;
                let expected = v.speed[t - 1] * cfg.frame_dt - ego_step;
                let observed = p[t][k][1] - p[t - 1][k][1];
                prop_assert!((observed - expected).abs() < bound, "vehicle {} frame {}: {} vs {}", v.id, t, observed, expected);
            }
        }
    }

    #[test]
    fn every_class_generates_sound_labels(seed in any::<u64>(), class in 0usize..NUM_CLASSES) {
        let b = Behavior::from_index(class).unwrap();
        for p in Preset::ALL {
            let sc = generate_scenario_for(b, &p.config(), seed).unwrap();
            prop_assert_eq!(sc.vehicles[0].behavior, b);
            prop_assert!(validate_labels(&sc).is_ok());
        }
    }
}
