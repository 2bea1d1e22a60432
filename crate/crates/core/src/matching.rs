//! End-to-end masked matching: masks, polar conversion, correlation, soft-argmax.

use std::sync::{Arc, Mutex};

use ndarray::Array2;

use crate::correlation::{CorrelationPlan, CorrelationVolume};
use crate::error::{Error, Result};
use crate::estimate::{estimate_covariance, soft_argmax, soft_argmax_backward, PoseEstimate, SoftmaxWeights};
use crate::geometry::{CartesianScan, CartesianSpec, PolarScan, PolarToCartesian, PoseGrid, Scan};
use crate::masknet::{Conv2d, InputFrame, InputMode, MaskNet, Tape};
use crate::scalar::Real;

/// Default softmax temperature.
pub const DEFAULT_BETA: f64 = 1.0;

type PlanKey = ((usize, usize), u64, u64, u64);
type PolarKey = ((usize, usize), u64, u64);

/// Reusable matcher for a fixed pose grid; caches correlation plans and
/// polar-to-Cartesian maps by scan geometry.
#[derive(Debug)]
pub struct Matcher<T: Real> {
    grid: Arc<PoseGrid<T>>,
    beta: T,
    cartesian: Option<CartesianSpec<T>>,
    plans: Mutex<Vec<(PlanKey, Arc<CorrelationPlan<T>>)>>,
    polar_maps: Mutex<Vec<(PolarKey, Arc<PolarToCartesian<T>>)>>,
}

/// Scan in the frame the network sees, plus what is needed to reach Cartesian.
#[derive(Debug, Clone)]
struct Prepared<T> {
    z: Array2<T>,
    to_cartesian: Option<Arc<PolarToCartesian<T>>>,
    mpp: T,
    center: (T, T),
}

#[derive(Debug)]
enum MaskRecord<T> {
    Raw,
    Single { tapes: [Tape<T>; 2], masks: [Array2<T>; 2] },
    Dual { tape: Tape<T>, masks: [Array2<T>; 2] },
}

/// Everything a forward match recorded for a later backward pass.
#[derive(Debug)]
pub struct MatchTrace<T: Real> {
    pub estimate: PoseEstimate<T>,
    pub volume: CorrelationVolume<T>,
    pub weights: SoftmaxWeights<T>,
    /// Masked scans in the Cartesian frame used for correlation.
    pub masked: [Array2<T>; 2],
    prepared: [Prepared<T>; 2],
    record: MaskRecord<T>,
    plan: Arc<CorrelationPlan<T>>,
}

impl<T: Real> MatchTrace<T> {
    /// Masks in the network's frame, if a network was used.
    pub fn masks(&self) -> Option<&[Array2<T>; 2]> {
        match &self.record {
            MaskRecord::Raw => None,
            MaskRecord::Single { masks, .. } | MaskRecord::Dual { masks, .. } => Some(masks),
        }
    }
}

/// Gradients from a backward pass through [`Matcher::backward`].
#[derive(Debug, Clone)]
pub struct MatchGrads<T> {
    /// `dL/dS` for both masked Cartesian scans.
    pub masked: [Array2<T>; 2],
    /// Parameter gradients, summed over every network application.
    pub net: Option<Vec<Conv2d<T>>>,
}

fn bits<T: Real>(v: T) -> u64 {
    v.f64().to_bits()
}

impl<T: Real> Matcher<T> {
    pub fn new(grid: PoseGrid<T>, beta: T) -> Result<Self> {
        Self::from_arc(Arc::new(grid), beta)
    }

    pub fn from_arc(grid: Arc<PoseGrid<T>>, beta: T) -> Result<Self> {
        if !(beta.is_finite() && beta > T::zero()) {
            return Err(Error::config("beta", "must be positive"));
        }
        Ok(Self {
            grid,
            beta,
            cartesian: None,
            plans: Mutex::new(Vec::new()),
            polar_maps: Mutex::new(Vec::new()),
        })
    }

    /// Target raster for polar inputs.
    pub fn with_cartesian(mut self, spec: CartesianSpec<T>) -> Result<Self> {
        spec.validate()?;
        self.cartesian = Some(spec);
        Ok(self)
    }

    pub fn grid(&self) -> &Arc<PoseGrid<T>> {
        &self.grid
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn set_beta(&mut self, beta: T) -> Result<()> {
        if !(beta.is_finite() && beta > T::zero()) {
            return Err(Error::config("beta", "must be positive"));
        }
        self.beta = beta;
        Ok(())
    }

    pub fn cartesian_spec(&self) -> Option<&CartesianSpec<T>> {
        self.cartesian.as_ref()
    }

    /// Plan for the given Cartesian geometry, built on first use.
    pub fn plan(&self, dim: (usize, usize), mpp: T, center: (T, T)) -> Result<Arc<CorrelationPlan<T>>> {
        let key = (dim, bits(mpp), bits(center.0), bits(center.1));
        let mut plans = self.plans.lock().expect("plan cache poisoned");
        if let Some((_, p)) = plans.iter().find(|(k, _)| *k == key) {
            return Ok(p.clone());
        }
        let plan = Arc::new(CorrelationPlan::new(self.grid.clone(), dim, mpp, center)?);
        plans.push((key, plan.clone()));
        Ok(plan)
    }

    fn polar_map(&self, scan: &PolarScan<T>) -> Result<Arc<PolarToCartesian<T>>> {
        let spec = self.cartesian.ok_or_else(|| {
            Error::config("cartesian", "polar scans need a Cartesian raster (width, height, meters per pixel)")
        })?;
        let key = (
            scan.power().dim(),
            bits(scan.range_resolution()),
            bits(scan.azimuth_0_direction()),
        );
        let mut maps = self.polar_maps.lock().expect("polar cache poisoned");
        if let Some((_, m)) = maps.iter().find(|(k, _)| *k == key) {
            return Ok(m.clone());
        }
        let map = Arc::new(PolarToCartesian::for_scan(scan, spec)?);
        maps.push((key, map.clone()));
        Ok(map)
    }

    /// Cartesian version of any scan (converting polar input with this matcher's raster).
    pub fn to_cartesian(&self, scan: &Scan<T>) -> Result<CartesianScan<T>> {
        match scan {
            Scan::Cartesian(c) => Ok(c.clone()),
            Scan::Polar(p) => self.polar_map(p)?.apply(p),
        }
    }

    fn prepare(&self, scan: &Scan<T>, frame: InputFrame) -> Result<Prepared<T>> {
        match (scan, frame) {
            (Scan::Cartesian(c), InputFrame::Cartesian) => Ok(Prepared {
                z: c.power().clone(),
                to_cartesian: None,
                mpp: c.meters_per_pixel(),
                center: c.center(),
            }),
            (Scan::Polar(p), InputFrame::Cartesian) => {
                let c = self.polar_map(p)?.apply(p)?;
                Ok(Prepared {
                    z: c.into_power(),
                    to_cartesian: None,
                    mpp: self.cartesian.expect("checked by polar_map").meters_per_pixel,
                    center: crate::geometry::image_center(self.cartesian.map(|s| (s.width, s.height)).unwrap()),
                })
            }
            (Scan::Polar(p), InputFrame::Polar) => {
                let map = self.polar_map(p)?;
                let spec = *map.spec();
                Ok(Prepared {
                    z: p.power().clone(),
                    to_cartesian: Some(map),
                    mpp: spec.meters_per_pixel,
                    center: crate::geometry::image_center((spec.width, spec.height)),
                })
            }
            (Scan::Cartesian(_), InputFrame::Polar) => Err(Error::Shape(
                "a polar-frame network needs polar scans".into(),
            )),
        }
    }

    /// Estimate the pose `p` with `s2 = warp_pose(s1, p)`.
    pub fn match_scans(
        &self,
        s1: &Scan<T>,
        s2: &Scan<T>,
        net: Option<&MaskNet<T>>,
    ) -> Result<PoseEstimate<T>> {
        Ok(self.run(s1, s2, net, false)?.estimate)
    }

    /// Forward match that keeps every intermediate needed by [`Matcher::backward`].
    pub fn forward(&self, s1: &Scan<T>, s2: &Scan<T>, net: Option<&MaskNet<T>>) -> Result<MatchTrace<T>> {
        self.run(s1, s2, net, true)
    }

    fn run(&self, s1: &Scan<T>, s2: &Scan<T>, net: Option<&MaskNet<T>>, record: bool) -> Result<MatchTrace<T>> {
        let frame = net.map_or(InputFrame::Cartesian, |n| n.config().input_frame);
        let prepared = [self.prepare(s1, frame)?, self.prepare(s2, frame)?];
        let record_masks = match net {
            None => MaskRecord::Raw,
            Some(net) => match net.config().input_mode {
                InputMode::Single => {
                    let mut tapes = [Tape::new(), Tape::new()];
                    let mut masks = Vec::with_capacity(2);
                    for (p, tape) in prepared.iter().zip(tapes.iter_mut()) {
                        let m = net.forward(&[&p.z], record.then_some(tape))?;
                        masks.push(m.into_iter().next().expect("single mask"));
                    }
                    let [a, b]: [Array2<T>; 2] = masks.try_into().expect("two masks");
                    MaskRecord::Single { tapes, masks: [a, b] }
                }
                InputMode::Dual => {
                    if prepared[0].z.dim() != prepared[1].z.dim() {
                        return Err(Error::Shape("dual-input scans must share a shape".into()));
                    }
                    let mut tape = Tape::new();
                    let m = net.forward(&[&prepared[0].z, &prepared[1].z], record.then_some(&mut tape))?;
                    let [a, b]: [Array2<T>; 2] = m
                        .try_into()
                        .map_err(|_| Error::Shape("dual network must produce two masks".into()))?;
                    MaskRecord::Dual { tape, masks: [a, b] }
                }
            },
        };
        let masked_frame: [Array2<T>; 2] = match &record_masks {
            MaskRecord::Raw => [prepared[0].z.clone(), prepared[1].z.clone()],
            MaskRecord::Single { masks, .. } | MaskRecord::Dual { masks, .. } => {
                [&masks[0] * &prepared[0].z, &masks[1] * &prepared[1].z]
            }
        };
        let [m1, m2] = masked_frame;
        let masked = [
            cartesian_of(&prepared[0], m1),
            cartesian_of(&prepared[1], m2),
        ];
        let (a, b) = (&prepared[0], &prepared[1]);
        if masked[0].dim() != masked[1].dim() || bits(a.mpp) != bits(b.mpp) || a.center != b.center {
            return Err(Error::Shape(format!(
                "scans differ in geometry: {:?} at {} m/px vs {:?} at {} m/px",
                masked[0].dim(),
                a.mpp,
                masked[1].dim(),
                b.mpp
            )));
        }
        let plan = self.plan(masked[0].dim(), a.mpp, a.center)?;
        let volume = CorrelationVolume::new(plan.correlate(&masked[0], &masked[1])?, self.grid.clone())?;
        let (mean, weights) = soft_argmax(&self.grid, &volume, self.beta)?;
        let cov = estimate_covariance(&self.grid, &weights, &mean);
        let estimate = PoseEstimate {
            mean,
            covariance: cov.matrix,
            beta_used: self.beta,
            covariance_clamp: cov.clamp,
        };
        Ok(MatchTrace {
            estimate,
            volume,
            weights,
            masked,
            prepared,
            record: record_masks,
            plan,
        })
    }

    /// Back-propagate `dL/dmean` to the masked scans and, if present, the network parameters.
    pub fn backward(&self, trace: MatchTrace<T>, net: Option<&MaskNet<T>>, grad_pose: [T; 3]) -> Result<MatchGrads<T>> {
        let MatchTrace {
            estimate,
            weights,
            masked,
            prepared,
            record,
            plan,
            ..
        } = trace;
        let dc = soft_argmax_backward(&self.grid, &weights, &estimate.mean, self.beta, grad_pose);
        let (g1, g2) = plan.backward(&masked[0], &masked[1], &dc)?;
        let to_frame = |p: &Prepared<T>, g: &Array2<T>| match &p.to_cartesian {
            Some(map) => map.backward(g),
            None => g.clone(),
        };
        let gs = [to_frame(&prepared[0], &g1), to_frame(&prepared[1], &g2)];
        let net_grads = match record {
            MaskRecord::Raw => None,
            MaskRecord::Single { tapes, .. } => {
                let net = net.ok_or_else(|| Error::Tape("trace was recorded with a network".into()))?;
                let [t1, t2] = tapes;
                let mut acc = net.backward(t1, &[&gs[0] * &prepared[0].z])?.layers;
                let other = net.backward(t2, &[&gs[1] * &prepared[1].z])?.layers;
                for (a, b) in acc.iter_mut().zip(other) {
                    a.weight += &b.weight;
                    a.bias += &b.bias;
                }
                Some(acc)
            }
            MaskRecord::Dual { tape, .. } => {
                let net = net.ok_or_else(|| Error::Tape("trace was recorded with a network".into()))?;
                let grads = net.backward(tape, &[&gs[0] * &prepared[0].z, &gs[1] * &prepared[1].z])?;
                Some(grads.layers)
            }
        };
        Ok(MatchGrads {
            masked: [g1, g2],
            net: net_grads,
        })
    }

    /// Raw correlation volume of two (already masked) Cartesian scans.
    pub fn correlate(&self, s1: &CartesianScan<T>, s2: &CartesianScan<T>) -> Result<CorrelationVolume<T>> {
        if s1.dim() != s2.dim() || s1.meters_per_pixel() != s2.meters_per_pixel() {
            return Err(Error::Shape("scans differ in geometry".into()));
        }
        let plan = self.plan(s1.dim(), s1.meters_per_pixel(), s1.center())?;
        CorrelationVolume::new(plan.correlate(s1.power(), s2.power())?, self.grid.clone())
    }
}

fn cartesian_of<T: Real>(p: &Prepared<T>, masked: Array2<T>) -> Array2<T> {
    match &p.to_cartesian {
        Some(map) => map.apply_array(&masked),
        None => masked,
    }
}

/// One-shot match of two Cartesian scans (`beta` defaults to 1 when `None`).
pub fn match_scans<T: Real>(
    s1: &CartesianScan<T>,
    s2: &CartesianScan<T>,
    net: Option<&MaskNet<T>>,
    grid: &PoseGrid<T>,
    beta: Option<T>,
) -> Result<PoseEstimate<T>> {
    let matcher = Matcher::new(grid.clone(), beta.unwrap_or(T::of(DEFAULT_BETA)))?;
    matcher.match_scans(&Scan::Cartesian(s1.clone()), &Scan::Cartesian(s2.clone()), net)
}
