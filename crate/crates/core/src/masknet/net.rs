use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Conv2d, NodeId, Tape, TapeGrads};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// One scan in, one mask out.
    Single,
    /// Both scans stacked as channels, two masks out.
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFrame {
    Cartesian,
    /// Mask the raw sweep, then convert the masked sweep to Cartesian.
    Polar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskNetConfig {
    /// Number of 2x2 max-pool levels.
    pub depth: usize,
    /// Channels at full resolution; doubled at every level.
    pub base_channels: usize,
    pub input_mode: InputMode,
    pub input_frame: InputFrame,
    pub kernel_size: usize,
}

impl Default for MaskNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MaskNetConfig {
    /// Small network suited to 64x64 scans on a CPU.
    pub fn desk() -> Self {
        Self {
            depth: 2,
            base_channels: 4,
            input_mode: InputMode::Single,
            input_frame: InputFrame::Cartesian,
            kernel_size: 3,
        }
    }

    /// Five pooling levels, 8 channels at the input growing to 256 at the bottleneck.
    pub fn full_scale() -> Self {
        Self {
            depth: 5,
            base_channels: 8,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("net.depth", "must be at least 1"));
        }
        if self.base_channels < 1 {
            return Err(Error::config("net.base_channels", "must be at least 1"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("net.kernel_size", "must be odd"));
        }
        Ok(())
    }

    pub fn io_channels(&self) -> usize {
        match self.input_mode {
            InputMode::Single => 1,
            InputMode::Dual => 2,
        }
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `(name, in, out, kernel)` for every conv layer in execution order.
    pub(crate) fn layer_specs(&self) -> Vec<(String, usize, usize, usize)> {
        let k = self.kernel_size;
        let mut specs = Vec::new();
        let mut prev = self.io_channels();
        for level in 0..=self.depth {
            let c = self.channels(level);
            specs.push((format!("enc{level}.conv0"), prev, c, k));
            specs.push((format!("enc{level}.conv1"), c, c, k));
            prev = c;
        }
        for level in (0..self.depth).rev() {
            let c = self.channels(level);
            specs.push((format!("dec{level}.conv0"), c + self.channels(level + 1), c, k));
            specs.push((format!("dec{level}.conv1"), c, c, k));
        }
        specs.push(("head".to_string(), self.channels(0), self.io_channels(), 1));
        specs
    }
}

/// U-Net style masking network.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskNet<T> {
    config: MaskNetConfig,
    layers: Vec<Conv2d<T>>,
}

/// Parameter gradients (one per conv layer) plus gradients for each input scan.
#[derive(Debug, Clone)]
pub struct MaskNetGrads<T> {
    pub layers: Vec<Conv2d<T>>,
    pub inputs: Vec<Array2<T>>,
}

impl<T: Real> MaskNet<T> {
    /// Fan-in scaled uniform initialisation. The output layer starts near zero
    /// so the initial mask is close to 0.5 everywhere.
    pub fn new(config: MaskNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = config.layer_specs();
        let last = specs.len() - 1;
        let layers = specs
            .iter()
            .enumerate()
            .map(|(n, (_, c_in, c_out, k))| {
                let fan_in = (c_in * k * k) as f64;
                let mut bound = (6.0 / fan_in).sqrt();
                if n == last {
                    bound *= 0.01;
                }
                let mut l = Conv2d::zeros(*c_in, *c_out, *k);
                l.weight.mapv_inplace(|_| T::of(rng.random_range(-bound..bound)));
                l
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn from_layers(config: MaskNetConfig, layers: Vec<Conv2d<T>>) -> Result<Self> {
        config.validate()?;
        let specs = config.layer_specs();
        if specs.len() != layers.len() {
            return Err(Error::Shape(format!(
                "config needs {} layers, got {}",
                specs.len(),
                layers.len()
            )));
        }
        for ((name, c_in, c_out, k), l) in specs.iter().zip(&layers) {
            if l.weight.dim() != (*c_out, *c_in, *k, *k) || l.bias.len() != *c_out {
                return Err(Error::Shape(format!("layer {name} has shape {:?}", l.weight.dim())));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MaskNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Conv2d<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Conv2d<T>] {
        &mut self.layers
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.config.layer_specs().into_iter().map(|s| s.0).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Zeroes the output layer, making every mask exactly 0.5.
    pub fn zero_output_layer(&mut self) {
        let head = self.layers.last_mut().expect("head layer");
        head.weight.fill(T::zero());
        head.bias.fill(T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn max_abs_parameter(&self) -> T {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(T::zero(), |a, b| a.max(b.abs()))
    }

    pub fn cast<U: Real>(&self) -> MaskNet<U> {
        MaskNet {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| Conv2d {
                    weight: l.weight.mapv(|v| U::of(v.f64())),
                    bias: l.bias.mapv(|v| U::of(v.f64())),
                })
                .collect(),
        }
    }

    fn check_inputs(&self, inputs: &[&Array2<T>]) -> Result<(usize, usize)> {
        let want = self.config.io_channels();
        if inputs.len() != want {
            return Err(Error::Shape(format!(
                "{:?} mode takes {want} input(s), got {}",
                self.config.input_mode,
                inputs.len()
            )));
        }
        let dim = inputs[0].dim();
        if inputs.iter().any(|x| x.dim() != dim) {
            return Err(Error::Shape("dual inputs differ in shape".into()));
        }
        let m = 1 << self.config.depth;
        if dim.0 % m != 0 || dim.1 % m != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} not divisible by 2^depth = {m}",
                dim.0, dim.1
            )));
        }
        Ok(dim)
    }

    /// Masks in (0, 1), one per input scan. With a tape, every intermediate is recorded.
    pub fn forward(&self, inputs: &[&Array2<T>], tape: Option<&mut Tape<T>>) -> Result<Vec<Array2<T>>> {
        let (w, h) = self.check_inputs(inputs)?;
        let mut local = Tape::new();
        let tape = match tape {
            Some(t) => {
                if !t.is_empty() {
                    return Err(Error::Tape("forward needs a fresh tape".into()));
                }
                t
            }
            None => &mut local,
        };
        let mut x = Array3::zeros((inputs.len(), w, h));
        for (c, img) in inputs.iter().enumerate() {
            x.index_axis_mut(Axis(0), c).assign(*img);
        }
        let input = tape.input(x);
        let out = self.record(tape, input);
        let y = tape.value(out);
        Ok((0..y.dim().0).map(|c| y.index_axis(Axis(0), c).to_owned()).collect())
    }

    fn record(&self, tape: &mut Tape<T>, input: NodeId) -> NodeId {
        let layers = &self.layers;
        let mut next = 0;
        let mut conv_relu = |tape: &mut Tape<T>, x: NodeId| {
            let c = tape.conv(layers, next, x);
            next += 1;
            tape.relu(c)
        };
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = input;
        for level in 0..=self.config.depth {
            x = conv_relu(tape, x);
            x = conv_relu(tape, x);
            if level < self.config.depth {
                skips.push(x);
                x = tape.max_pool(x);
            }
        }
        for skip in skips.into_iter().rev() {
            let up = tape.upsample(x);
            x = tape.concat(skip, up);
            x = conv_relu(tape, x);
            x = conv_relu(tape, x);
        }
        let head = tape.conv(layers, layers.len() - 1, x);
        tape.sigmoid(head)
    }

    /// Reverse pass over a tape produced by [`MaskNet::forward`], given `dL/dmask` per mask.
    pub fn backward(&self, tape: Tape<T>, grad_masks: &[Array2<T>]) -> Result<MaskNetGrads<T>> {
        if tape.is_empty() {
            let TapeGrads { layers, .. } = tape.backward(&self.layers, Vec::new())?;
            return Ok(MaskNetGrads {
                layers,
                inputs: Vec::new(),
            });
        }
        let out = tape.len() - 1;
        let (c, w, h) = tape.value(out).dim();
        if grad_masks.len() != c || grad_masks.iter().any(|g| g.dim() != (w, h)) {
            return Err(Error::Tape(format!(
                "expected {c} mask gradient(s) of {w}x{h}, got {}",
                grad_masks.len()
            )));
        }
        let mut seed = Array3::zeros((c, w, h));
        for (ch, g) in grad_masks.iter().enumerate() {
            seed.index_axis_mut(Axis(0), ch).assign(g);
        }
        let grads = tape.backward(&self.layers, vec![(out, seed)])?;
        let input = grads.inputs.into_iter().next().unwrap_or_else(|| Array3::zeros((c, w, h)));
        Ok(MaskNetGrads {
            layers: grads.layers,
            inputs: (0..input.dim().0).map(|ch| input.index_axis(Axis(0), ch).to_owned()).collect(),
        })
    }
}

/// Hadamard product `S = M ⊙ Z`.
pub fn apply_mask<T: Real>(mask: &Array2<T>, scan: &Array2<T>) -> Result<Array2<T>> {
    if mask.dim() != scan.dim() {
        return Err(Error::Shape(format!(
            "mask {:?} does not match scan {:?}",
            mask.dim(),
            scan.dim()
        )));
    }
    Ok(mask * scan)
}

/// Returns `(dL/dmask, dL/dscan)` for the masked product.
pub fn apply_mask_backward<T: Real>(
    mask: &Array2<T>,
    scan: &Array2<T>,
    grad: &Array2<T>,
) -> (Array2<T>, Array2<T>) {
    (grad * scan, grad * mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(w: usize, h: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((w, h), |_| rng.random::<f64>())
    }

    #[test]
    fn full_scale_channel_schedule() {
        let specs = MaskNetConfig::full_scale().layer_specs();
        let bottleneck = specs.iter().find(|s| s.0 == "enc5.conv1").unwrap();
        assert_eq!((bottleneck.1, bottleneck.2), (256, 256));
        assert_eq!(specs[0].1, 1);
        assert_eq!(specs[0].2, 8);
        let dec4 = specs.iter().find(|s| s.0 == "dec4.conv0").unwrap();
        assert_eq!((dec4.1, dec4.2), (128 + 256, 128));
        assert_eq!(specs.last().unwrap().2, 1);
    }

    #[test]
    fn zero_head_gives_half_mask() {
        let mut net = MaskNet::<f64>::new(MaskNetConfig::desk(), 3).unwrap();
        net.zero_output_layer();
        let m = net.forward(&[&random(16, 16, 1)], None).unwrap();
        assert!(m[0].iter().all(|v| *v == 0.5));
    }

    #[test]
    fn masks_strictly_inside_unit_interval() {
        let mut net = MaskNet::<f64>::new(MaskNetConfig::desk(), 4).unwrap();
        for v in net.layers_mut().last_mut().unwrap().weight.iter_mut() {
            *v *= 300.0;
        }
        let m = net.forward(&[&random(16, 16, 2)], None).unwrap();
        assert!(m[0].iter().any(|v| (v - 0.5).abs() > 0.1));
        assert!(m[0].iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = MaskNet::<f32>::new(MaskNetConfig::desk(), 5).unwrap();
        let z = random(16, 16, 3).mapv(|v| v as f32);
        let a = net.forward(&[&z], None).unwrap();
        let b = MaskNet::<f32>::new(MaskNetConfig::desk(), 5).unwrap().forward(&[&z], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_input_rejected() {
        let net = MaskNet::<f64>::new(MaskNetConfig::desk(), 1).unwrap();
        assert!(matches!(net.forward(&[&random(10, 16, 1)], None), Err(Error::Shape(_))));
    }

    #[test]
    fn dual_mode_needs_two_inputs() {
        let cfg = MaskNetConfig {
            input_mode: InputMode::Dual,
            ..MaskNetConfig::desk()
        };
        let net = MaskNet::<f64>::new(cfg, 1).unwrap();
        assert!(net.forward(&[&random(8, 8, 1)], None).is_err());
        assert_eq!(net.forward(&[&random(8, 8, 1), &random(8, 8, 2)], None).unwrap().len(), 2);
    }

    #[test]
    fn dual_mode_symmetric_weights_give_equal_masks() {
        let cfg = MaskNetConfig {
            input_mode: InputMode::Dual,
            ..MaskNetConfig::desk()
        };
        let mut net = MaskNet::<f64>::new(cfg, 9).unwrap();
        let first = &mut net.layers_mut()[0];
        let w0 = first.weight.index_axis(Axis(1), 0).to_owned();
        first.weight.index_axis_mut(Axis(1), 1).assign(&w0);
        let head = net.layers_mut().last_mut().unwrap();
        let h0 = head.weight.index_axis(Axis(0), 0).to_owned();
        head.weight.index_axis_mut(Axis(0), 1).assign(&h0);
        head.bias[1] = head.bias[0];
        let z = random(16, 16, 4);
        let m = net.forward(&[&z, &z], None).unwrap();
        assert_eq!(m[0], m[1]);
    }

    #[test]
    fn zero_mask_gradient_gives_zero_parameter_gradient() {
        let net = MaskNet::<f64>::new(MaskNetConfig::desk(), 6).unwrap();
        let mut tape = Tape::new();
        net.forward(&[&random(8, 8, 5)], Some(&mut tape)).unwrap();
        let g = net.backward(tape, &[Array2::zeros((8, 8))]).unwrap();
        assert!(g
            .layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| *v == 0.0)));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = MaskNetConfig {
            depth: 2,
            base_channels: 4,
            ..MaskNetConfig::desk()
        };
        let mut net = MaskNet::<f64>::new(cfg, 7).unwrap();
        // Give the head real weight so gradients reach the encoder.
        for v in net.layers_mut().last_mut().unwrap().weight.iter_mut() {
            *v *= 100.0;
        }
        let z = random(16, 16, 6);
        let weights = random(16, 16, 7) - 0.5;
        let loss = |n: &MaskNet<f64>| (&n.forward(&[&z], None).unwrap()[0] * &weights).sum();
        let mut tape = Tape::new();
        net.forward(&[&z], Some(&mut tape)).unwrap();
        let grads = net.backward(tape, &[weights.clone()]).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 25 {
            let li = rng.random_range(0..net.layers().len());
            let n_w = net.layers()[li].weight.len();
            let n = n_w + net.layers()[li].bias.len();
            let pi = rng.random_range(0..n);
            let bump = |net: &MaskNet<f64>, d: f64| {
                let mut m = net.clone();
                let l = &mut m.layers_mut()[li];
                if pi < n_w {
                    let idx = l.weight.indexed_iter().nth(pi).unwrap().0;
                    l.weight[idx] += d;
                } else {
                    l.bias[pi - n_w] += d;
                }
                m
            };
            let fd = (loss(&bump(&net, h)) - loss(&bump(&net, -h))) / (2.0 * h);
            let an = if pi < n_w {
                *grads.layers[li].weight.iter().nth(pi).unwrap()
            } else {
                grads.layers[li].bias[pi - n_w]
            };
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            assert!(rel < 1e-4, "layer {li} param {pi}: fd {fd} vs {an}");
            checked += 1;
        }
    }

    #[test]
    fn mask_product_and_its_gradients() {
        let z = random(4, 4, 9);
        assert_eq!(apply_mask(&Array2::ones((4, 4)), &z).unwrap(), z);
        assert!(apply_mask(&Array2::zeros((4, 4)), &z).unwrap().iter().all(|v| *v == 0.0));
        assert!(apply_mask(&Array2::zeros((3, 4)), &z).is_err());

        let m = random(4, 4, 10);
        let g = random(4, 4, 11);
        let (gm, gz) = apply_mask_backward(&m, &z, &g);
        let h = 1e-6;
        let loss = |m: &Array2<f64>, z: &Array2<f64>| (&apply_mask(m, z).unwrap() * &g).sum();
        for idx in [(0, 0), (2, 3), (3, 1)] {
            let mut mp = m.clone();
            mp[idx] += h;
            let mut mm = m.clone();
            mm[idx] -= h;
            assert!(((loss(&mp, &z) - loss(&mm, &z)) / (2.0 * h) - gm[idx]).abs() < 1e-8);
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            assert!(((loss(&m, &zp) - loss(&m, &zm)) / (2.0 * h) - gz[idx]).abs() < 1e-8);
        }
    }
}
