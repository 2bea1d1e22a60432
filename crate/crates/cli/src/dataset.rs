use std::path::{Path, PathBuf};

use maskscan::evaluation::{SweepPair, Trajectory, TrajectoryEntry};
use maskscan::geometry::{relative, CartesianSpec, PolarToCartesian, Scan};
use maskscan::masknet::{InputFrame, InputMode, MaskNetConfig};
use maskscan::simworld::{read_manifest, read_scan_file, EpisodeEntry, Manifest};
use maskscan::training::{MaskSample, TrainingSample};
use rayon::prelude::*;

use crate::error::{CliError, CliResult};

/// A directory written by `simulate`.
pub struct Dataset {
    root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> CliResult<Self> {
        let manifest = read_manifest(root.join("manifest.json"))?;
        if manifest.episodes.iter().all(|e| e.frames.len() < 2) {
            return Err(CliError::Data(format!("{} holds no consecutive frame pairs", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn episode(&self, index: usize) -> CliResult<&EpisodeEntry> {
        self.manifest.episodes.get(index).ok_or_else(|| {
            CliError::Data(format!(
                "episode {index} requested but the dataset has {}",
                self.manifest.episodes.len()
            ))
        })
    }

    pub fn cartesian(&self) -> CartesianSpec<f32> {
        let c = &self.manifest.cartesian;
        CartesianSpec::new(c.width, c.height, c.meters_per_pixel as f32)
    }

    fn read(&self, rel: &str) -> CliResult<Scan<f32>> {
        Ok(read_scan_file::<f32>(self.root.join(rel))?)
    }

    /// Scans of one episode, converted to Cartesian unless `frame` is polar.
    pub fn scans(&self, episode: &EpisodeEntry, frame: InputFrame) -> CliResult<Vec<Scan<f32>>> {
        let spec = self.cartesian();
        episode
            .frames
            .par_iter()
            .map(|f| {
                let s = self.read(&f.scan)?;
                Ok(match (s, frame) {
                    (Scan::Polar(p), InputFrame::Cartesian) => {
                        Scan::Cartesian(PolarToCartesian::for_scan(&p, spec)?.apply(&p)?)
                    }
                    (s, _) => s,
                })
            })
            .collect()
    }

    /// `(Z_t, Z_{t-1})` pairs of one episode with their ground-truth relative pose.
    pub fn episode_samples(&self, episode: &EpisodeEntry, frame: InputFrame) -> CliResult<Vec<TrainingSample<f32>>> {
        let scans = self.scans(episode, frame)?;
        Ok(episode
            .frames
            .windows(2)
            .zip(scans.windows(2))
            .map(|(f, s)| TrainingSample {
                z1: s[1].clone(),
                z2: s[0].clone(),
                pose_gt: relative(&f[0].pose, &f[1].pose).cast(),
            })
            .collect())
    }

    pub fn samples(&self, frame: InputFrame) -> CliResult<Vec<TrainingSample<f32>>> {
        let mut out = Vec::new();
        for e in &self.manifest.episodes {
            out.extend(self.episode_samples(e, frame)?);
        }
        Ok(out)
    }

    pub fn sweep_pairs(&self) -> CliResult<Vec<SweepPair<f32>>> {
        Ok(self
            .samples(InputFrame::Cartesian)?
            .into_iter()
            .map(|s| SweepPair {
                a: s.z1,
                b: s.z2,
                pose_gt: s.pose_gt,
            })
            .collect())
    }

    /// Scans paired with their proxy labels, shaped for `net`.
    pub fn mask_samples(&self, net: &MaskNetConfig) -> CliResult<Vec<MaskSample<f32>>> {
        let mut out = Vec::new();
        for e in &self.manifest.episodes {
            let scans = self.scans(e, InputFrame::Cartesian)?;
            let labels = e
                .frames
                .iter()
                .map(|f| {
                    let name = f.label.as_ref().ok_or_else(|| {
                        CliError::Data("dataset has no labels; simulate with labels enabled".into())
                    })?;
                    Ok(self.read(name)?.power().clone())
                })
                .collect::<CliResult<Vec<_>>>()?;
            let cart = |s: &Scan<f32>| match s {
                Scan::Cartesian(c) => c.clone(),
                Scan::Polar(_) => unreachable!("converted above"),
            };
            match net.input_mode {
                InputMode::Single => out.extend(scans.iter().zip(&labels).map(|(s, l)| MaskSample {
                    inputs: vec![cart(s)],
                    labels: vec![l.clone()],
                })),
                InputMode::Dual => out.extend((1..scans.len()).map(|i| MaskSample {
                    inputs: vec![cart(&scans[i]), cart(&scans[i - 1])],
                    labels: vec![labels[i].clone(), labels[i - 1].clone()],
                })),
            }
        }
        Ok(out)
    }

    pub fn ground_truth(&self, episode: &EpisodeEntry) -> CliResult<Trajectory<f64>> {
        let entries = episode
            .frames
            .windows(2)
            .map(|f| TrajectoryEntry {
                t: f[1].t,
                rel: relative(&f[0].pose, &f[1].pose),
                covariance: None,
            })
            .collect();
        Ok(Trajectory::new(episode.frames[0].pose, entries)?)
    }
}
