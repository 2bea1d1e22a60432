use super::*;
use crate::geometry::{polar_to_cartesian, relative, warp_pose, CartesianScan, GridResolution, PolarScan, Pose, Scan, SearchRegion};
use crate::matching::Matcher;
use ndarray::Array2;

fn sensor() -> SensorConfig {
    SensorConfig::default()
}

fn region() -> SearchRegion<f64> {
    SearchRegion::symmetric(3.0, 1.5, 0.1)
}

fn sharp() -> SensorConfig {
    SensorConfig {
        range_spread: 0.0,
        ..SensorConfig::default()
    }
}

fn one_point(x: f64, y: f64) -> WorldModel {
    let mut w = WorldModel::empty([-100.0, 100.0, -100.0, 100.0], 1);
    w.points.push(PointReflector {
        position: [x, y],
        reflectivity: 0.8,
    });
    w
}

#[test]
fn empty_world_renders_zero() {
    let w = WorldModel::empty([-10.0, 10.0, -10.0, 10.0], 3);
    let s = render_scan(&w, &Pose::identity(), &sensor(), &NoiseConfig::none(), 0.0).unwrap();
    assert!(s.power().iter().all(|v| *v == 0.0));
}

#[test]
fn point_reflector_lands_at_analytic_cell() {
    let s = render_scan(&one_point(10.0, 0.0), &Pose::identity(), &sharp(), &NoiseConfig::none(), 0.0).unwrap();
    let nz: Vec<(usize, usize)> = s.power().indexed_iter().filter(|(_, v)| **v > 0.0).map(|(i, _)| i).collect();
    // Range 10 m sits midway between the centres of bins 39 and 40.
    assert_eq!(nz, vec![(0, 39), (0, 40)]);
    assert!((s.power()[[0, 39]] - 0.32).abs() < 1e-12);
    assert!((s.power()[[0, 40]] - 0.32).abs() < 1e-12);

    // Sensor rotated a quarter turn, reflector straight ahead of it at 6 m.
    let s = render_scan(
        &one_point(0.0, 6.0),
        &Pose::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
        &sharp(),
        &NoiseConfig::none(),
        0.0,
    )
    .unwrap();
    let rows: Vec<usize> = s.power().indexed_iter().filter(|(_, v)| **v > 0.0).map(|((i, _), _)| i).collect();
    assert!(rows.iter().all(|&i| i == 0) && !rows.is_empty());

    // With a range profile the peak stays on the analytic bins.
    let s = render_scan(&one_point(10.0, 0.0), &Pose::identity(), &sensor(), &NoiseConfig::none(), 0.0).unwrap();
    let row = s.power().row(0).to_vec();
    assert!(s.power().rows().into_iter().skip(1).all(|r| r.iter().all(|v| *v == 0.0)));
    assert_eq!(row[39], row[40]);
    assert!(row.iter().all(|v| *v <= row[39]));
    assert!(row[..30].iter().chain(&row[50..]).all(|v| *v == 0.0));

    // Bearing 45 degrees: azimuth 16 of 128.
    let s = render_scan(&one_point(5.0, 5.0), &Pose::identity(), &sharp(), &NoiseConfig::none(), 0.0).unwrap();
    let rows: Vec<usize> = s.power().indexed_iter().filter(|(_, v)| **v > 0.0).map(|((i, _), _)| i).collect();
    assert!(rows.iter().all(|&i| i == 16) && !rows.is_empty());
}

#[test]
fn segments_occlude_what_lies_behind() {
    let mut w = one_point(10.0, 0.0);
    w.segments.push(Segment {
        a: [5.0, -1.0],
        b: [5.0, 1.0],
        reflectivity: 0.5,
    });
    let s = render_scan(&w, &Pose::identity(), &sensor(), &NoiseConfig::none(), 0.0).unwrap();
    assert!(s.power().row(0).iter().skip(25).all(|v| *v == 0.0));
    assert!(s.power()[[0, 19]] > 0.0);
}

#[test]
fn sensor_outside_world_is_rejected() {
    let w = WorldModel::empty([-1.0, 1.0, -1.0, 1.0], 0);
    assert!(render_scan(&w, &Pose::new(5.0, 0.0, 0.0), &sensor(), &NoiseConfig::none(), 0.0).is_err());
}

#[test]
fn rendering_is_deterministic_per_seed_and_time() {
    let w = street_world(&StreetConfig::default(), 5).unwrap();
    let p = Pose::new(30.0, 0.0, 0.0);
    let n = NoiseConfig::default();
    let a = render_scan(&w, &p, &sensor(), &n, 1.5).unwrap();
    let b = render_scan(&w, &p, &sensor(), &n, 1.5).unwrap();
    assert_eq!(a, b);
    let c = render_scan(&w, &p, &sensor(), &n, 1.75).unwrap();
    assert_ne!(a, c);
    assert!(a.power().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn ghost_streaks_are_independent_across_frames() {
    let w = WorldModel::empty([-10.0, 10.0, -10.0, 10.0], 9);
    let noise = NoiseConfig {
        ghost_probability: 0.2,
        ..NoiseConfig::none()
    };
    let frames: Vec<Vec<f64>> = (0..100)
        .map(|k| {
            render_scan_detailed(&w, &Pose::identity(), &sensor(), &noise, k as f64 * 0.25)
                .unwrap()
                .ghosts
                .iter()
                .map(|g| f64::from(u8::from(*g)))
                .collect()
        })
        .collect();
    let (a, b): (Vec<f64>, Vec<f64>) = frames
        .windows(2)
        .flat_map(|w| w[0].iter().copied().zip(w[1].iter().copied()).collect::<Vec<_>>())
        .unzip();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&a), mean(&b));
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    let corr = cov / (va * vb).sqrt();
    assert!(corr.abs() < 0.05, "{corr}");
    assert!((ma - 0.2).abs() < 0.03);
}

fn cart(s: &PolarScan<f64>) -> CartesianScan<f64> {
    polar_to_cartesian(s, 64, 64, 0.5).unwrap()
}

/// Mean absolute difference over cells where both images carry power.
fn mutual_error(a: &Array2<f64>, b: &Array2<f64>, keep: impl Fn((usize, usize)) -> bool) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (idx, (x, y)) in a.indexed_iter().zip(b.iter()).map(|((i, x), y)| (i, (x, y))) {
        if *x > 0.0 && *y > 0.0 && keep(idx) {
            total += (x - y).abs();
            n += 1;
        }
    }
    total / n.max(1) as f64
}

#[test]
fn static_scene_is_consistent_under_ego_motion() {
    let w = street_world(&StreetConfig::default(), 2).unwrap().without_dynamic();
    let p1 = Pose::new(40.0, 0.0, 0.0);
    let p2 = compose_step(&p1, &Pose::new(1.0, 0.0, 0.03));
    let s1 = cart(&render_scan(&w, &p1, &sensor(), &NoiseConfig::none(), 0.0).unwrap());
    let s2 = cart(&render_scan(&w, &p2, &sensor(), &NoiseConfig::none(), 0.0).unwrap());
    let warped = warp_pose(&s2, &relative(&p1, &p2));
    let err = mutual_error(warped.power(), s1.power(), |_| true);
    assert!(err < 0.05, "{err}");
}

fn compose_step(a: &Pose<f64>, b: &Pose<f64>) -> Pose<f64> {
    crate::geometry::compose(a, b)
}

#[test]
fn moving_objects_break_consistency_where_they_are() {
    let w = street_world(&StreetConfig::default(), 2).unwrap();
    let p1 = Pose::new(40.0, 0.0, 0.0);
    let p2 = Pose::new(42.0, 0.0, 0.0);
    let d1 = render_scan_detailed(&w, &p1, &sensor(), &NoiseConfig::none(), 0.0).unwrap();
    let d2 = render_scan_detailed(&w, &p2, &sensor(), &NoiseConfig::none(), 0.25).unwrap();
    assert!(d1.distractor_fraction() >= 0.2, "{}", d1.distractor_fraction());
    let c1 = cart(&d1.scan);
    let c2 = cart(&d2.scan);
    let dynamic_mask = cart(&d1.scan.with_power(d1.source.mapv(|s| f64::from(u8::from(s == HitSource::Dynamic)))).unwrap());
    let warped = warp_pose(&c2, &relative(&p1, &p2));
    let on_dynamic = mutual_error(warped.power(), c1.power(), |i| dynamic_mask.power()[i] > 0.5);
    let elsewhere = mutual_error(warped.power(), c1.power(), |i| dynamic_mask.power()[i] == 0.0);
    assert!(on_dynamic > 2.0 * elsewhere, "{on_dynamic} vs {elsewhere}");
}

#[test]
fn stationary_and_constant_velocity_sequences() {
    let w = street_world(&StreetConfig::default(), 1).unwrap();
    let still = TrajectorySpec {
        frames: 5,
        speed: 0.0,
        speed_jitter: 0.0,
        yaw_std: 0.0,
        ..TrajectorySpec::default()
    };
    let seq = generate_sequence(&w, &still, &region(), &sensor(), &NoiseConfig::none()).unwrap();
    assert!(seq.relative_poses().iter().all(|p| *p == Pose::identity()));
    let cruise = TrajectorySpec {
        speed: 6.0,
        ..still
    };
    let seq = generate_sequence(&w, &cruise, &region(), &sensor(), &NoiseConfig::none()).unwrap();
    for p in seq.relative_poses() {
        assert!(p.residual(&Pose::new(1.5, 0.0, 0.0)).iter().all(|r| r.abs() < 1e-12));
    }
    assert_eq!(seq.samples().len(), 4);
    assert_eq!(seq.ground_truth().len(), 4);
}

#[test]
fn relative_poses_stay_inside_region() {
    let w = street_world(&StreetConfig::default(), 1).unwrap();
    let spec = TrajectorySpec {
        frames: 80,
        yaw_std: 0.2,
        ..TrajectorySpec::default()
    };
    let seq = generate_sequence(&w, &spec, &region(), &sensor(), &NoiseConfig::default()).unwrap();
    assert!(seq.relative_poses().iter().all(|p| region().contains(p)));
    let too_fast = TrajectorySpec { speed: 40.0, ..spec };
    assert!(ego_poses(&too_fast, &region()).is_err());
}

#[test]
fn noise_free_pairs_match_within_quantisation() {
    let w = street_world(&StreetConfig::default(), 4).unwrap().without_dynamic();
    let spec = TrajectorySpec {
        frames: 6,
        ..TrajectorySpec::default()
    };
    let seq = generate_sequence(&w, &spec, &region(), &sensor(), &NoiseConfig::none()).unwrap();
    let grid = crate::geometry::make_pose_grid(region(), GridResolution::new(0.5, 0.5, 0.025)).unwrap();
    let m = Matcher::new(grid, crate::DESK_BETA)
        .unwrap()
        .with_cartesian(crate::geometry::CartesianSpec::new(64, 64, 0.5))
        .unwrap();
    for s in seq.samples() {
        let e = m.match_scans(&s.z1, &s.z2, None).unwrap();
        let r = e.mean.residual(&s.pose_gt);
        assert!(r[0].abs() < 0.5 && r[1].abs() < 0.5 && r[2].abs() < 0.05, "{:?} vs {:?}", e.mean, s.pose_gt);
    }
}

fn flat(v: f64) -> CartesianScan<f64> {
    CartesianScan::new(Array2::from_elem((4, 4), v), 1.0).unwrap()
}

#[test]
fn static_label_vote_is_strict() {
    let ten: Vec<_> = (0..10).map(|_| flat(0.5)).collect();
    assert!(generate_static_labels(&ten, 0.1, 9).unwrap().iter().all(|v| *v == 1.0));
    let mut nine: Vec<_> = (0..9).map(|_| flat(0.5)).collect();
    nine.push(flat(0.0));
    assert!(generate_static_labels(&nine, 0.1, 9).unwrap().iter().all(|v| *v == 0.0));
    let zeros: Vec<_> = (0..12).map(|_| flat(0.0)).collect();
    assert!(generate_static_labels(&zeros, 0.1, 9).unwrap().iter().all(|v| *v == 0.0));
    assert!(generate_static_labels(&ten[..5], 0.1, 9).is_err());
    assert!(generate_static_labels(&ten, 1.5, 9).is_err());
}

#[test]
fn sequence_labels_keep_walls_and_drop_vehicles() {
    let w = street_world(&StreetConfig::default(), 6).unwrap();
    let spec = TrajectorySpec {
        frames: 30,
        ..TrajectorySpec::default()
    };
    let seq = generate_sequence(&w, &spec, &region(), &sensor(), &NoiseConfig::none()).unwrap();
    let details: Vec<_> = seq
        .poses
        .iter()
        .zip(&seq.times)
        .map(|(p, t)| render_scan_detailed(&w, p, &sensor(), &NoiseConfig::none(), *t).unwrap())
        .collect();
    let carts: Vec<_> = seq.scans.iter().map(cart).collect();
    let labels = sequence_static_labels(&carts, &seq.poses, &LabelConfig::default()).unwrap();
    let t = 15;
    let d = &details[t];
    let dyn_cart = cart(&d.scan.with_power(d.source.mapv(|s| f64::from(u8::from(s == HitSource::Dynamic)))).unwrap());
    let static_cart = cart(&d.scan.with_power(d.source.mapv(|s| f64::from(u8::from(s == HitSource::Static)))).unwrap());
    let frac = |m: &CartesianScan<f64>| {
        let sel: Vec<f64> = labels[t].iter().zip(m.power()).filter(|(_, w)| **w > 0.5).map(|(l, _)| *l).collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    };
    let (on_dyn, on_static) = (frac(&dyn_cart), frac(&static_cart));
    assert!(on_static > 0.2 && on_dyn < 0.05, "static {on_static} dynamic {on_dyn}");
}

#[test]
fn scan_files_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    let w = street_world(&StreetConfig::default(), 1).unwrap();
    let polar = render_scan(&w, &Pose::new(30.0, 0.0, 0.1), &sensor(), &NoiseConfig::default(), 0.0).unwrap();
    let polar32: Scan<f32> = Scan::Polar(polar.cast());
    let p = dir.path().join("a.rscn");
    write_scan_file(&p, &polar32).unwrap();
    assert_eq!(read_scan_file::<f32>(&p).unwrap(), polar32);
    let c: Scan<f32> = Scan::Cartesian(cart(&polar).cast());
    let q = dir.path().join("b.rscn");
    write_scan_file(&q, &c).unwrap();
    assert_eq!(read_scan_file::<f32>(&q).unwrap(), c);

    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_scan_file::<f32>(&p), Err(crate::Error::CorruptFile { .. })));
    let mut v2 = bytes.clone();
    v2[4] = 2;
    std::fs::write(&p, &v2).unwrap();
    assert!(matches!(read_scan_file::<f32>(&p), Err(crate::Error::VersionMismatch { .. })));
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest {
        format_version: Manifest::VERSION,
        seed: 3,
        sensor: sensor(),
        noise: NoiseConfig::default(),
        cartesian: crate::geometry::CartesianSpec::new(64, 64, 0.5),
        episodes: vec![EpisodeEntry {
            id: 0,
            world_seed: 11,
            frames: vec![FrameEntry {
                t: 0.0,
                pose: Pose::new(1.0, 2.0, 0.1),
                scan: "scans/e000_f0000.rscn".into(),
                label: None,
                distractor_fraction: 0.3,
            }],
        }],
    };
    let p = dir.path().join("manifest.json");
    write_manifest(&p, &m).unwrap();
    assert_eq!(read_manifest(&p).unwrap(), m);
    assert_eq!(m.frame_count(), 1);
}
