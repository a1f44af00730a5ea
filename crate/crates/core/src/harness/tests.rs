use super::*;
use crate::bev::GridConfig;
use crate::geometry::{pose_inverse, relative_pose, transform_points};
use crate::pipeline::{BoxParams, Detection};

fn static_scene(seed: u64) -> SceneConfig {
    SceneConfig {
        num_static_landmarks: 3,
        num_movers: 0,
        mover_speed_range: [0.5, 1.0],
        ego_speed: 1.2,
        ego_yaw_rate: 0.05,
        frame_dt: 0.25,
        num_frames: 4,
        lidar_points_per_object: 12,
        noise_sigma: 0.0,
        seed,
    }
}

fn small_grid() -> GridConfig {
    GridConfig::new(-9.6, 9.6, -9.6, 9.6, -2.0, 2.0, 0.6, 4).unwrap()
}

#[test]
fn same_seed_is_bit_identical() {
    let cfg = SceneConfig::default();
    let grid = small_grid();
    let a = generate_sequence(&cfg, &grid).unwrap();
    let b = generate_sequence(&cfg, &grid).unwrap();
    assert_eq!(a.len(), b.len());
    for (fa, fb) in a.iter().zip(&b) {
        assert_eq!(fa.cloud, fb.cloud);
        assert_eq!(fa.semantic, fb.semantic);
        assert_eq!(fa.ego, fb.ego);
        assert_eq!(fa.gt, fb.gt);
    }
    let mut other = cfg.clone();
    other.seed ^= 1;
    let c = generate_sequence(&other, &grid).unwrap();
    assert_ne!(a[0].cloud, c[0].cloud);
}

#[test]
fn noiseless_static_points_align_exactly() {
    let cfg = static_scene(3);
    let grid = small_grid();
    let frames = generate_sequence(&cfg, &grid).unwrap();
    let (hist, cur) = (&frames[0], &frames[3]);
    let rel = relative_pose(&hist.ego, &cur.ego);
    let aligned = transform_points(&rel, &hist.cloud);
    // every aligned point must coincide with its own world position as the
    // current frame observes it
    for (p_hist, p_aligned) in hist.cloud.points.iter().zip(&aligned.points) {
        let world = hist.ego.apply(p_hist);
        let want = pose_inverse(&cur.ego).apply(&world);
        assert!((p_aligned - want).norm() < 1e-9);
    }
}

#[test]
fn movers_advance_linearly_in_world() {
    let mut cfg = SceneConfig {
        num_static_landmarks: 0,
        num_movers: 1,
        mover_speed_range: [2.0, 2.0],
        frame_dt: 0.5,
        num_frames: 3,
        noise_sigma: 0.0,
        ..SceneConfig::default()
    };
    cfg.ego_speed = 0.0;
    cfg.ego_yaw_rate = 0.0;
    let grid = GridConfig::new(-19.2, 19.2, -19.2, 19.2, -2.0, 2.0, 0.6, 4).unwrap();
    let frames = generate_sequence(&cfg, &grid).unwrap();
    let centers: Vec<[f64; 2]> = frames
        .iter()
        .map(|f| {
            assert_eq!(f.gt.len(), 1);
            let world = f.ego.apply(&nalgebra::Vector3::new(
                f.gt[0].box_params.x,
                f.gt[0].box_params.y,
                0.0,
            ));
            [world.x, world.y]
        })
        .collect();
    for w in centers.windows(2) {
        let step = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        assert!((step - 1.0).abs() < 1e-9, "per-frame displacement {step}");
    }
    let speed = (frames[0].gt[0].vel[0].powi(2) + frames[0].gt[0].vel[1].powi(2)).sqrt();
    assert!((speed - 2.0).abs() < 1e-12);
}

#[test]
fn ego_paths_follow_the_turn_rate() {
    let mut cfg = SceneConfig::default();
    cfg.ego_yaw_rate = 0.0;
    cfg.ego_speed = 4.0;
    cfg.frame_dt = 0.5;
    let p = ego_pose_at(&cfg, 3);
    assert!((p.translation().x - 6.0).abs() < 1e-12);
    assert_eq!(p.translation().y, 0.0);

    cfg.ego_yaw_rate = 0.4;
    let radius = cfg.ego_speed / cfg.ego_yaw_rate;
    for frame in 0..5 {
        let p = ego_pose_at(&cfg, frame);
        // constant-turn-rate motion stays on a circle around (0, radius)
        let d = (p.translation().x.powi(2) + (p.translation().y - radius).powi(2)).sqrt();
        assert!((d - radius).abs() < 1e-9);
        assert!((p.yaw() - cfg.ego_yaw_rate * frame as f64 * cfg.frame_dt).abs() < 1e-9);
    }
}

#[test]
fn semantic_raster_marks_box_interiors() {
    let grid = small_grid();
    let gt = vec![crate::pipeline::GtObject {
        class_id: CLASS_MOVER,
        box_params: BoxParams {
            x: 0.3,
            y: -0.3,
            w: 2.4,
            l: 3.0,
            yaw: 0.4,
        },
        vel: [1.0, 0.0],
    }];
    let fm = render_semantic_bev(&gt, &grid, 0);
    assert_eq!(fm.channels(), NUM_CLASSES);
    // the landmark channel stays empty, the mover channel has mass
    let landmark_sum: f64 = fm.channel(CLASS_LANDMARK).iter().sum();
    let mover_sum: f64 = fm.channel(CLASS_MOVER).iter().sum();
    assert_eq!(landmark_sum, 0.0);
    assert!(mover_sum > 0.0);
    assert!(fm.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    // the center cell is fully interior, so the blur keeps it at 1
    let [c, r] = grid.world_to_grid([0.3, -0.3]);
    assert_eq!(fm.get(CLASS_MOVER, r.round() as usize, c.round() as usize), 1.0);
}

#[test]
fn gt_derived_detections_score_perfectly() {
    let cfg = SceneConfig::default();
    let grid = small_grid();
    let frames = generate_sequence(&cfg, &grid).unwrap();
    let dets: Vec<Vec<Detection>> = frames
        .iter()
        .map(|f| {
            f.gt.iter()
                .map(|g| Detection {
                    class_id: g.class_id,
                    class_scores: vec![0.5, 0.5],
                    box_params: g.box_params,
                    confidence: 1.0,
                })
                .collect()
        })
        .collect();
    let gts: Vec<Vec<_>> = frames.iter().map(|f| f.gt.clone()).collect();
    let m = evaluate(&dets, &gts, 0.6);
    assert_eq!(m.center_mae, 0.0);
    assert_eq!(m.hit_rate, 1.0);
    assert_eq!(m.toy_ap, 1.0);
}

#[test]
fn scene_dir_roundtrip() {
    let cfg = SceneConfig::default();
    let grid = small_grid();
    let frames = generate_sequence(&cfg, &grid).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_scene_dir(dir.path(), &cfg, &grid, &frames).unwrap();

    for name in ["scene.json", "poses.json", "gt.jsonl", "points_000.bin", "points_000.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    assert!(dir.path().join("semantic_000.bevf").exists());

    let (cfg2, grid2, frames2) = read_scene_dir(dir.path()).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(grid2, grid);
    assert_eq!(frames2.len(), frames.len());
    for (a, b) in frames.iter().zip(&frames2) {
        assert_eq!(a.ego, b.ego);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.cloud.len(), b.cloud.len());
        // points survive at f32 precision
        for (pa, pb) in a.cloud.points.iter().zip(&b.cloud.points) {
            for i in 0..3 {
                assert_eq!(pa[i] as f32, pb[i] as f32);
                assert_eq!(pb[i], (pa[i] as f32) as f64);
            }
        }
        assert_eq!(a.cloud.intensities, b.cloud.intensities);
        for (x, y) in a.semantic.data().iter().zip(b.semantic.data()) {
            assert_eq!(*x as f32, *y as f32);
        }
    }

    // writing the reloaded sequence reproduces identical files
    let dir2 = tempfile::tempdir().unwrap();
    write_scene_dir(dir2.path(), &cfg2, &grid2, &frames2).unwrap();
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(dir.path().join(&name)).unwrap();
        let b = std::fs::read(dir2.path().join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs");
    }
}

#[test]
fn align_bench_prefers_alignment_on_static_scenes() {
    let mut scene = static_scene(11);
    scene.ego_speed = 1.4; // 0.35 m/frame: sub-cell at 0.6 m cells
    scene.lidar_points_per_object = 150;
    scene.num_static_landmarks = 6;
    scene.noise_sigma = 0.02;
    let rows = align_bench(&scene, &[0.6], &[11]).unwrap();
    assert_eq!(rows.len(), 4);
    let get = |path: &str, mode: &str| {
        rows.iter()
            .find(|r| r.path == path && r.mode == mode)
            .unwrap()
            .residual
    };
    assert!(get("points", "aligned") < get("points", "none"));
    assert!(get("features", "aligned") < get("features", "none"));
}
