use nalgebra::Vector3;

use super::*;
use crate::geometry::VoxelGridSpec;

pub(crate) const LONG_TAIL: [f64; 8] = [0.55, 0.20, 0.10, 0.06, 0.04, 0.03, 0.015, 0.005];

fn fine_grid() -> VoxelGridSpec {
    VoxelGridSpec::new([64, 64, 16], 0.5, [-16.0, -16.0, -4.0]).unwrap()
}

fn spec(seed: u64, n_objects: usize) -> SceneSpec {
    SceneSpec {
        seed,
        n_objects,
        class_frequencies: LONG_TAIL.to_vec(),
        sequence_length: 2,
        rig: default_rig((32, 24)).unwrap(),
        grid: fine_grid(),
        lidar_rays: 16 * 120,
        sweeps_per_frame: 3,
    }
}

/// True if the voxel holding `p`, or one of its 26 neighbours, is occupied.
fn occupied_within_one(gt: &OccupancyGrid, p: &Vector3<f64>) -> bool {
    let g = gt.grid;
    let c = g.continuous_index(p).map(|v| (v + 0.5).floor() as i64);
    for dh in -1..=1 {
        for dw in -1..=1 {
            for dz in -1..=1 {
                let q = [c[0] + dh, c[1] + dw, c[2] + dz];
                if q.iter().zip(&g.dims).all(|(&v, &d)| v >= 0 && v < d as i64) && gt.get(q.map(|v| v as usize)) != EMPTY {
                    return true;
                }
            }
        }
    }
    false
}

#[test]
fn generation_is_deterministic() {
    let a = generate_sequence(&spec(7, 10)).unwrap();
    let b = generate_sequence(&spec(7, 10)).unwrap();
    assert_eq!(a, b);
    let c = generate_sequence(&spec(8, 10)).unwrap();
    assert_ne!(a[0].gt, c[0].gt);
}

#[test]
fn no_objects_gives_ground_only() {
    let s = generate_sequence(&spec(3, 0)).unwrap();
    for f in &s {
        assert!(f.gt.labels.iter().all(|&l| l == EMPTY || l == GROUND));
        assert!(f.gt.labels.contains(&GROUND));
    }
}

#[test]
fn voxel_histogram_is_long_tailed_in_prior_order() {
    let mut total = [0usize; NUM_CLASSES];
    for seed in 0..50 {
        let mut sp = spec(seed, 24);
        sp.sequence_length = 1;
        sp.lidar_rays = 0;
        sp.rig = crate::geometry::ring_rig(1, 90.0, (4, 3), 0.2).unwrap();
        let s = generate_sequence(&sp).unwrap();
        for (t, c) in total.iter_mut().zip(s[0].gt.histogram()) {
            *t += c;
        }
    }
    let sem = &total[1..];
    for w in sem.windows(2) {
        assert!(w[0] > w[1], "histogram {total:?} is not strictly decreasing");
    }
}

#[test]
fn lidar_edge_cases() {
    let mut rng = derive_rng(0, 9, 0, 0);
    let pose = EgoPose::identity(0);
    assert!(sample_lidar(&Scene::default(), &pose, 100, 0.0, &mut rng).is_empty());
    let scene = Scene { primitives: vec![ground()] };
    assert!(sample_lidar(&scene, &pose, 0, 0.0, &mut rng).is_empty());
}

#[test]
fn lidar_hits_wall_at_analytic_distance() {
    let wall = Primitive { category: 2, shape: Shape::Box { center: [10.5, 0.0, 0.0], half: [0.5, 50.0, 50.0], yaw: 0.0 } };
    let scene = Scene { primitives: vec![wall] };
    let mut rng = derive_rng(1, 9, 0, 0);
    let pts = sample_lidar(&scene, &EgoPose::identity(0), 16 * 64, 0.0, &mut rng);
    // The first 16 rays point along azimuth 0 (+x), one per ring.
    let along_x: Vec<_> = pts.iter().filter(|p| p.y.abs() < 1e-9).collect();
    assert_eq!(along_x.len(), LIDAR_RINGS);
    for p in along_x {
        let el = p.z.atan2(p.x);
        // Range noise moves the point along the ray, so x moves by noise·cos(el).
        assert!((p.x - 10.0).abs() < 3.0 * LIDAR_RANGE_SIGMA * el.cos() + 1e-12, "{p:?}");
    }
}

#[test]
fn lidar_points_land_in_occupied_voxels() {
    for seed in [1, 2] {
        let s = generate_sequence(&spec(seed, 16)).unwrap();
        for f in &s {
            assert!(!f.points.is_empty());
            let inside: Vec<_> = f
                .points
                .iter()
                .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64))
                .filter(|p| f.gt.grid.locate(p).is_some())
                .collect();
            assert!(inside.len() > 100);
            for p in inside {
                assert!(occupied_within_one(&f.gt, &p), "point {p:?} in empty region");
            }
        }
    }
}

#[test]
fn past_sweeps_agree_with_current_ground_truth() {
    let sp = spec(5, 16);
    let scene = build_scene(&sp).unwrap();
    let seq = generate_sequence(&sp).unwrap();
    let (prev, cur) = (&seq[0].pose, &seq[1].pose);
    let mut rng = derive_rng(0, 77, 0, 0);
    let rel = prev.relative_to(cur);
    let mut checked = 0;
    for p in sample_lidar(&scene, prev, 16 * 120, 0.0, &mut rng) {
        let q = rel.transform_point(&p.into()).coords;
        if seq[1].gt.grid.locate(&q).is_some() {
            assert!(occupied_within_one(&seq[1].gt, &q));
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn empty_scene_renders_background() {
    let rig = default_rig((16, 12)).unwrap();
    let mut rng = derive_rng(0, 3, 0, 0);
    let imgs = render_views(&Scene::default(), &rig, &EgoPose::identity(0), &mut rng);
    assert_eq!(imgs.len(), 4);
    for im in &imgs {
        for ch in 0..3 {
            let mean: f64 = im.data.iter().skip(ch).step_by(3).map(|&v| v as f64).sum::<f64>() / (16.0 * 12.0);
            assert!((mean - SKY_COLOR[ch] as f64).abs() < 0.03);
        }
        assert!(render_ids(&Scene::default(), &rig[0], &EgoPose::identity(0)).iter().all(Option::is_none));
    }
}

#[test]
fn box_filling_view_dominates_colors() {
    let rig = default_rig((32, 24)).unwrap();
    let b = Primitive { category: 5, shape: Shape::Box { center: [3.0, 0.0, 0.0], half: [0.5, 20.0, 20.0], yaw: 0.0 } };
    let scene = Scene { primitives: vec![b] };
    let mut rng = derive_rng(0, 3, 0, 0);
    let imgs = render_views(&scene, &rig, &EgoPose::identity(0), &mut rng);
    let target = CATEGORY_COLORS[5];
    let near = imgs[0]
        .data
        .chunks_exact(3)
        .filter(|px| px.iter().zip(&target).all(|(a, b)| (a - b).abs() < 0.25))
        .count();
    assert_eq!(near, 32 * 24);
    let mut rng2 = derive_rng(0, 3, 0, 0);
    assert_eq!(imgs, render_views(&scene, &rig, &EgoPose::identity(0), &mut rng2));
}

#[test]
fn occluded_primitive_contributes_no_pixels() {
    let rig = default_rig((48, 36)).unwrap();
    let front = Primitive { category: 2, shape: Shape::Box { center: [5.0, 0.0, 0.0], half: [0.5, 3.0, 3.0], yaw: 0.0 } };
    let behind = Primitive { category: 4, shape: Shape::Sphere { center: [9.0, 0.0, 0.0], radius: 1.0 } };
    let scene = Scene { primitives: vec![front, behind] };
    let ids = render_ids(&scene, &rig[0], &EgoPose::identity(0));
    assert!(ids.contains(&Some(0)));
    assert!(!ids.contains(&Some(1)));
    // Without the occluder the sphere is visible.
    let alone = Scene { primitives: vec![scene.primitives[1].clone()] };
    assert!(render_ids(&alone, &rig[0], &EgoPose::identity(0)).contains(&Some(0)));
}

#[test]
fn spec_validation_and_placement_failure() {
    let mut s = spec(0, 4);
    s.class_frequencies[0] += 0.1;
    assert!(s.validate().is_err());
    let mut s = spec(0, 4);
    s.sequence_length = 0;
    assert!(s.validate().is_err());
    let s = spec(0, 5000);
    assert!(matches!(build_scene(&s), Err(Error::Placement(_))));
}

#[test]
fn downsample_takes_majority_non_empty_child() {
    let g = VoxelGridSpec::new([2, 2, 2], 1.0, [0.0; 3]).unwrap();
    let mut labels = vec![0u8; 8];
    labels[0] = 3;
    labels[1] = 5;
    labels[2] = 5;
    let c = OccupancyGrid::new(g, labels).unwrap().downsample(2).unwrap();
    assert_eq!(c.labels, vec![5]);
    let c = OccupancyGrid::new(g, vec![0, 0, 0, 0, 0, 0, 0, 7]).unwrap().downsample(2).unwrap();
    assert_eq!(c.labels, vec![7]);
    let c = OccupancyGrid::new(g, vec![0, 0, 2, 2, 4, 4, 0, 0]).unwrap().downsample(2).unwrap();
    assert_eq!(c.labels, vec![2]);
    assert!(OccupancyGrid::new(g, vec![9; 8]).is_err());
}

#[test]
fn sequence_round_trips_through_disk() {
    let sp = spec(11, 6);
    let seq = generate_sequence(&sp).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), &sp, &seq).unwrap();
    let (sp2, seq2) = read_sequence(dir.path()).unwrap();
    assert_eq!(sp, sp2);
    assert_eq!(seq, seq2);
    let idx = DatasetIndex::new(vec![SequenceEntry { name: "seq_0000".into(), split: Split::Train, seed: 11 }]);
    write_dataset(dir.path(), &idx).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), idx);
}
