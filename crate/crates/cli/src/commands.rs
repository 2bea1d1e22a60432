use std::path::{Path, PathBuf};
use std::time::Instant;

use maskscan::evaluation::{
    kitti_errors, read_trajectory_csv, sweep_resolution, write_report_json, write_sweep_csv,
    write_trajectory_csv, BenchmarkConfig, SweepConfig, Trajectory, TrajectoryEntry,
};
use maskscan::geometry::{polar_to_cartesian, CartesianScan, Pose, Scan};
use maskscan::masknet::{load_weights_expecting, save_weights, InputFrame, MaskNet};
use maskscan::matching::Matcher;
use maskscan::simworld::{
    generate_sequence, sequence_static_labels, street_world, write_manifest, write_scan_file, EpisodeEntry,
    FrameEntry, Manifest,
};
use maskscan::training::{train, train_mask_supervised, write_history_csv};
use maskscan::uncertainty::{calibrate_beta, coverage_report, log_beta_grid, write_calibration_csv, write_calibration_summary, CalibrationEntry};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{substream_seed, RunConfig, Stream};
use crate::dataset::Dataset;
use crate::error::{CliError, CliResult};
use crate::output::{atomic_dir, atomic_file};

fn dataset_path(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.paths
        .dataset
        .as_deref()
        .ok_or_else(|| CliError::field("paths.dataset", "is required (or pass --dataset)"))
}

fn matcher(cfg: &RunConfig, ds: &Dataset) -> CliResult<Matcher<f32>> {
    Ok(Matcher::new(cfg.matching.grid()?, cfg.matching.beta as f32)?.with_cartesian(ds.cartesian())?)
}

/// The network named by `paths.weights`, or none when raw scans were requested.
fn load_net(cfg: &RunConfig, no_weights: bool) -> CliResult<Option<MaskNet<f32>>> {
    match (&cfg.paths.weights, no_weights) {
        (Some(_), true) => Err(CliError::Config("--no-weights conflicts with a weights path".into())),
        (None, false) => Err(CliError::field("paths.weights", "is required (or pass --no-weights)")),
        (None, true) => Ok(None),
        (Some(p), false) => Ok(Some(load_weights_expecting::<f32>(p, &cfg.net)?)),
    }
}

fn frame_of(net: Option<&MaskNet<f32>>) -> InputFrame {
    net.map_or(InputFrame::Cartesian, |n| n.config().input_frame)
}

pub fn simulate(cfg: &RunConfig, out: &Path, overwrite: bool) -> CliResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, Stream::Simulate));
    let cart = cfg.matching.cartesian;
    let mut episodes = Vec::new();
    let mut frames = 0;
    let mut distractor_sum = 0.0;
    let mut with_distractors = 0;
    atomic_dir(out, overwrite, |dir| {
        let io = |p: &Path, e: std::io::Error| CliError::Data(format!("{}: {e}", p.display()));
        std::fs::create_dir(dir.join("scans")).map_err(|e| io(dir, e))?;
        if cfg.simulate.labels {
            std::fs::create_dir(dir.join("labels")).map_err(|e| io(dir, e))?;
        }
        for id in 0..cfg.simulate.episodes {
            let world_seed = rng.next_u64();
            let traj_seed = rng.next_u64();
            let mut world = street_world(&cfg.street, world_seed)?;
            if !cfg.simulate.dynamic {
                world = world.without_dynamic();
            }
            let spec = cfg.trajectory.spec(traj_seed);
            let seq = generate_sequence(&world, &spec, &cfg.matching.region, &cfg.sensor, &cfg.noise)?;
            let labels = if cfg.simulate.labels {
                let carts = seq
                    .scans
                    .iter()
                    .map(|s| polar_to_cartesian(s, cart.width, cart.height, cart.meters_per_pixel))
                    .collect::<maskscan::Result<Vec<_>>>()?;
                let l = sequence_static_labels(&carts, &seq.poses, &cfg.labels)?;
                Some(carts.into_iter().zip(l).collect::<Vec<_>>())
            } else {
                None
            };
            let mut entries = Vec::with_capacity(seq.len());
            for f in 0..seq.len() {
                let scan = format!("scans/e{id:03}_f{f:04}.rscn");
                write_scan_file(dir.join(&scan), &Scan::Polar(seq.scans[f].cast::<f32>()))?;
                let label = match &labels {
                    Some(l) => {
                        let (c, mask) = &l[f];
                        let name = format!("labels/e{id:03}_f{f:04}.rscn");
                        let img = CartesianScan::with_center(mask.mapv(|v| v as f32), c.meters_per_pixel() as f32, {
                            let (x, y) = c.center();
                            (x as f32, y as f32)
                        })?;
                        write_scan_file(dir.join(&name), &Scan::Cartesian(img))?;
                        Some(name)
                    }
                    None => None,
                };
                let df = seq.distractor_fractions[f];
                distractor_sum += df;
                if df > 0.0 {
                    with_distractors += 1;
                }
                entries.push(FrameEntry {
                    t: seq.times[f],
                    pose: seq.poses[f],
                    scan,
                    label,
                    distractor_fraction: df,
                });
            }
            frames += entries.len();
            episodes.push(EpisodeEntry {
                id,
                world_seed,
                frames: entries,
            });
        }
        let manifest = Manifest {
            format_version: Manifest::VERSION,
            seed: cfg.seed,
            sensor: cfg.sensor,
            noise: cfg.noise,
            cartesian: cart,
            episodes: std::mem::take(&mut episodes),
        };
        write_manifest(dir.join("manifest.json"), &manifest)?;
        Ok(())
    })?;
    println!("episodes: {}", cfg.simulate.episodes);
    println!("frames: {frames}");
    println!("frames with distractors: {with_distractors}");
    println!("mean distractor fraction: {:.4}", distractor_sum / frames.max(1) as f64);
    Ok(())
}

pub struct TrainArgs<'a> {
    pub out: &'a Path,
    pub history: Option<PathBuf>,
    pub mask_supervised: bool,
}

pub fn train_cmd(cfg: &RunConfig, args: TrainArgs) -> CliResult<()> {
    let ds = Dataset::open(dataset_path(cfg)?)?;
    let tc = cfg.train_config();
    let net = match &cfg.paths.init_weights {
        Some(p) => load_weights_expecting::<f32>(p, &cfg.net)?,
        None => MaskNet::<f32>::new(cfg.net, tc.seed)?,
    };
    let outcome = if args.mask_supervised {
        if cfg.net.input_frame == InputFrame::Polar {
            return Err(CliError::field(
                "net.input_frame",
                "must be cartesian for mask supervision (labels are Cartesian)",
            ));
        }
        let samples = ds.mask_samples(&cfg.net)?;
        train_mask_supervised(net, &samples, &tc)?
    } else {
        let samples = ds.samples(cfg.net.input_frame)?;
        train(net, &samples, &matcher(cfg, &ds)?, &tc)?
    };
    let history = args
        .history
        .unwrap_or_else(|| args.out.with_extension("history.csv"));
    atomic_file(args.out, |tmp| Ok(save_weights(&outcome.net, tmp)?))?;
    atomic_file(&history, |tmp| Ok(write_history_csv(tmp, &outcome.history)?))?;
    println!(
        "mode: {}",
        if args.mask_supervised { "mask-supervised" } else { "pose-supervised" }
    );
    println!("steps: {}", outcome.steps_run);
    println!("best step: {}", outcome.best_step);
    if let (Some(a), Some(b)) = (outcome.initial_val_loss, outcome.best_val_loss) {
        println!("validation loss: {a:.6} -> {b:.6}");
    }
    println!("stopped early: {}", outcome.stopped_early);
    Ok(())
}

pub fn odometry(cfg: &RunConfig, no_weights: bool, episode: usize, out: &Path) -> CliResult<()> {
    let ds = Dataset::open(dataset_path(cfg)?)?;
    let net = load_net(cfg, no_weights)?;
    let m = matcher(cfg, &ds)?;
    let ep = ds.episode(episode)?;
    let samples = ds.episode_samples(ep, frame_of(net.as_ref()))?;
    let start = Instant::now();
    let mut entries = Vec::with_capacity(samples.len());
    for (s, f) in samples.iter().zip(&ep.frames[1..]) {
        let e = m.match_scans(&s.z1, &s.z2, net.as_ref())?;
        entries.push(TrajectoryEntry {
            t: f.t,
            rel: e.mean.cast::<f64>(),
            covariance: Some(e.covariance.map(|r| r.map(f64::from))),
        });
    }
    log::info!(
        "{} matches in {:.3} s",
        entries.len(),
        start.elapsed().as_secs_f64()
    );
    let traj = Trajectory::new(Pose::identity(), entries)?;
    atomic_file(out, |tmp| Ok(write_trajectory_csv(tmp, &traj)?))?;
    println!("frames: {}", traj.len());
    println!("path length: {:.3} m", traj.path_length());
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, estimate: &Path, gt: Option<&Path>, episode: usize, out: &Path) -> CliResult<()> {
    let est = read_trajectory_csv(estimate)?;
    let gt = match gt {
        Some(p) => read_trajectory_csv(p)?,
        None => {
            let ds = Dataset::open(dataset_path(cfg).map_err(|_| {
                CliError::Config("evaluate needs --gt or a dataset".into())
            })?)?;
            ds.ground_truth(ds.episode(episode)?)?
        }
    };
    let k = cfg.evaluation.kitti(gt.path_length());
    let report = kitti_errors(&est, &gt, &k)?;
    atomic_file(out, |tmp| Ok(write_report_json(tmp, &report)?))?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
    println!("segments: {}", report.segments);
    println!("translational error (%): {}", show(report.translational_mean));
    println!("rotational error (deg/m): {}", show(report.rotational_mean));
    Ok(())
}

pub fn calibrate(cfg: &RunConfig, no_weights: bool, out_csv: &Path, out_json: &Path) -> CliResult<()> {
    let ds = Dataset::open(dataset_path(cfg)?)?;
    let net = load_net(cfg, no_weights)?;
    let m = matcher(cfg, &ds)?;
    let samples = ds.samples(frame_of(net.as_ref()))?;
    let beta0 = cfg.matching.beta as f32;
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        let trace = m.forward(&s.z1, &s.z2, net.as_ref())?;
        entries.push(CalibrationEntry::new(trace.volume, s.pose_gt, beta0)?);
    }
    let c = &cfg.calibration;
    let grid = log_beta_grid(c.beta_min, c.beta_max, c.beta_count)?;
    let result = calibrate_beta(&entries, &grid)?;
    atomic_file(out_csv, |tmp| Ok(write_calibration_csv(tmp, &result)?))?;
    atomic_file(out_json, |tmp| Ok(write_calibration_summary(tmp, &result)?))?;
    let estimates: Vec<_> = entries.iter().map(|e| e.estimate_at(result.beta_star as f32)).collect();
    let errors: Vec<[f32; 3]> = estimates
        .iter()
        .zip(&samples)
        .map(|(e, s)| e.mean.residual(&s.pose_gt))
        .collect();
    let cov = coverage_report(&errors, &estimates, c.confidence)?;
    println!("samples: {}", result.n_samples);
    println!("beta*: {:.6}", result.beta_star);
    println!("mean mahalanobis: {:.6}", result.mean_mahalanobis);
    println!(
        "coverage at {:.2}: x {:.4} y {:.4} theta {:.4}",
        c.confidence, cov.per_component[0], cov.per_component[1], cov.per_component[2]
    );
    Ok(())
}

pub fn sweep(cfg: &RunConfig, no_timing: bool, out: &Path) -> CliResult<()> {
    let ds = Dataset::open(dataset_path(cfg)?)?;
    let mut pairs = ds.sweep_pairs()?;
    let s = &cfg.sweep;
    if s.max_pairs > 0 && pairs.len() > s.max_pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, Stream::Eval));
        let mut keep = rand::seq::index::sample(&mut rng, pairs.len(), s.max_pairs).into_vec();
        keep.sort_unstable();
        pairs = keep.into_iter().map(|i| pairs[i].clone()).collect();
    }
    let sc = SweepConfig {
        region: cfg.matching.region,
        delta_theta: cfg.matching.resolution.delta_theta,
        beta: cfg.matching.beta,
        benchmark: (!no_timing).then_some(BenchmarkConfig {
            repetitions: s.repetitions,
            warmup: s.warmup,
            threads: 1,
        }),
    };
    let rows = sweep_resolution(&pairs, &s.resolutions, &sc, None)?;
    atomic_file(out, |tmp| Ok(write_sweep_csv(tmp, &rows)?))?;
    for r in &rows {
        println!(
            "delta {:.3} m: translation {:.4} m, rotation {:.5} rad",
            r.delta, r.translation_error, r.rotation_error
        );
    }
    Ok(())
}
