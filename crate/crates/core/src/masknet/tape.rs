//! Reverse-mode differentiation tape for the small set of layers the mask
//! network needs. Values are `(channels, width, height)` tensors.

use ndarray::{s, Array1, Array3, Array4, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::LinearWarp;
use crate::scalar::Real;

/// Same-padded 2-D convolution with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `(out_channels, in_channels, k, k)`
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            weight: Array4::zeros((out_channels, in_channels, kernel, kernel)),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn forward(&self, x: &Array3<T>) -> Array3<T> {
        let (c_in, w, h) = x.dim();
        assert_eq!(c_in, self.in_channels(), "conv input channels");
        let k = self.kernel();
        let pad = (k / 2) as isize;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let weight = self.weight.as_standard_layout();
        let ws = weight.as_slice().expect("standard layout");
        let plane = w * h;
        let planes: Vec<Vec<T>> = (0..self.out_channels())
            .into_par_iter()
            .map(|o| {
                let mut out = vec![self.bias[o]; plane];
                for i in 0..c_in {
                    let src = &xs[i * plane..(i + 1) * plane];
                    for du in 0..k {
                        for dv in 0..k {
                            let wt = ws[((o * c_in + i) * k + du) * k + dv];
                            if wt == T::zero() {
                                continue;
                            }
                            let (su, sv) = (du as isize - pad, dv as isize - pad);
                            let (v0, v1) = span(h, sv);
                            for u in span_iter(w, su) {
                                let ui = (u as isize + su) as usize;
                                let dst = &mut out[u * h + v0..u * h + v1];
                                let row = &src[ui * h + (v0 as isize + sv) as usize
                                    ..ui * h + (v1 as isize + sv) as usize];
                                for (d, r) in dst.iter_mut().zip(row) {
                                    *d += wt * *r;
                                }
                            }
                        }
                    }
                }
                out
            })
            .collect();
        Array3::from_shape_vec((self.out_channels(), w, h), planes.concat()).expect("conv output")
    }

    /// Returns `(dL/dx, dL/dweight, dL/dbias)`.
    pub fn backward(&self, x: &Array3<T>, grad: &Array3<T>) -> (Array3<T>, Array4<T>, Array1<T>) {
        let (c_in, w, h) = x.dim();
        let c_out = self.out_channels();
        let k = self.kernel();
        let pad = (k / 2) as isize;
        let plane = w * h;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let grad = grad.as_standard_layout();
        let gs = grad.as_slice().expect("standard layout");
        let weight = self.weight.as_standard_layout();
        let ws = weight.as_slice().expect("standard layout");

        let grad_in: Vec<Vec<T>> = (0..c_in)
            .into_par_iter()
            .map(|i| {
                let mut acc = vec![T::zero(); plane];
                for o in 0..c_out {
                    let g = &gs[o * plane..(o + 1) * plane];
                    for du in 0..k {
                        for dv in 0..k {
                            let wt = ws[((o * c_in + i) * k + du) * k + dv];
                            if wt == T::zero() {
                                continue;
                            }
                            let (su, sv) = (du as isize - pad, dv as isize - pad);
                            let (v0, v1) = span(h, sv);
                            for u in span_iter(w, su) {
                                let ui = (u as isize + su) as usize;
                                let dst = &mut acc[ui * h + (v0 as isize + sv) as usize
                                    ..ui * h + (v1 as isize + sv) as usize];
                                for (d, gv) in dst.iter_mut().zip(&g[u * h + v0..u * h + v1]) {
                                    *d += wt * *gv;
                                }
                            }
                        }
                    }
                }
                acc
            })
            .collect();

        let grad_w: Vec<Vec<T>> = (0..c_out)
            .into_par_iter()
            .map(|o| {
                let g = &gs[o * plane..(o + 1) * plane];
                let mut kern = vec![T::zero(); c_in * k * k];
                for i in 0..c_in {
                    let src = &xs[i * plane..(i + 1) * plane];
                    for du in 0..k {
                        for dv in 0..k {
                            let (su, sv) = (du as isize - pad, dv as isize - pad);
                            let (v0, v1) = span(h, sv);
                            let mut acc = T::zero();
                            for u in span_iter(w, su) {
                                let ui = (u as isize + su) as usize;
                                let row = &src[ui * h + (v0 as isize + sv) as usize
                                    ..ui * h + (v1 as isize + sv) as usize];
                                for (gv, r) in g[u * h + v0..u * h + v1].iter().zip(row) {
                                    acc += *gv * *r;
                                }
                            }
                            kern[(i * k + du) * k + dv] = acc;
                        }
                    }
                }
                kern
            })
            .collect();

        let grad_b = Array1::from_iter((0..c_out).map(|o| gs[o * plane..(o + 1) * plane].iter().copied().sum()));
        (
            Array3::from_shape_vec((c_in, w, h), grad_in.concat()).expect("grad input"),
            Array4::from_shape_vec((c_out, c_in, k, k), grad_w.concat()).expect("grad weight"),
            grad_b,
        )
    }
}

/// Output range `[lo, hi)` whose shifted read `index + shift` stays inside `0..n`.
#[inline]
fn span(n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}

#[inline]
fn span_iter(n: usize, shift: isize) -> std::ops::Range<usize> {
    let (a, b) = span(n, shift);
    a..b
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv { input: NodeId, layer: usize },
    Relu { input: NodeId },
    MaxPool { input: NodeId, argmax: Vec<u32> },
    Upsample { input: NodeId },
    Concat { first: NodeId, second: NodeId },
    Sigmoid { input: NodeId },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Array3<T>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct TapeGrads<T> {
    /// Per conv layer, in layer order.
    pub layers: Vec<Conv2d<T>>,
    /// Per input node, in recording order.
    pub inputs: Vec<Array3<T>>,
}

/// Records forward values and the operations that produced them.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array3<T> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Array3<T>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, x: Array3<T>) -> NodeId {
        self.push(x, Op::Input)
    }

    pub fn conv(&mut self, layers: &[Conv2d<T>], layer: usize, input: NodeId) -> NodeId {
        let y = layers[layer].forward(self.value(input));
        self.push(y, Op::Conv { input, layer })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let y = self.value(input).mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu { input })
    }

    /// 2x2 max pool, stride 2. Ties go to the first element in row-major window order.
    pub fn max_pool(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let (c, w, h) = x.dim();
        let (pw, ph) = (w / 2, h / 2);
        let mut out = Array3::zeros((c, pw, ph));
        let mut argmax = Vec::with_capacity(c * pw * ph);
        for ch in 0..c {
            for u in 0..pw {
                for v in 0..ph {
                    let mut best = (2 * u, 2 * v);
                    for cand in [(2 * u, 2 * v + 1), (2 * u + 1, 2 * v), (2 * u + 1, 2 * v + 1)] {
                        if x[[ch, cand.0, cand.1]] > x[[ch, best.0, best.1]] {
                            best = cand;
                        }
                    }
                    out[[ch, u, v]] = x[[ch, best.0, best.1]];
                    argmax.push((best.0 * h + best.1) as u32);
                }
            }
        }
        self.push(out, Op::MaxPool { input, argmax })
    }

    /// Bilinear x2 upsampling (half-pixel aligned, edge clamped).
    pub fn upsample(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let (c, w, h) = x.dim();
        let warp = LinearWarp::<T>::resize((w, h), (2 * w, 2 * h));
        let mut out = Array3::zeros((c, 2 * w, 2 * h));
        for ch in 0..c {
            out.index_axis_mut(Axis(0), ch)
                .assign(&warp.apply(&x.index_axis(Axis(0), ch).to_owned()));
        }
        self.push(out, Op::Upsample { input })
    }

    pub fn concat(&mut self, first: NodeId, second: NodeId) -> NodeId {
        let y = ndarray::concatenate(Axis(0), &[self.value(first).view(), self.value(second).view()])
            .expect("concat spatial dims agree");
        self.push(y, Op::Concat { first, second })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let y = self.value(input).mapv(|v| T::one() / (T::one() + (-v).exp()));
        self.push(y, Op::Sigmoid { input })
    }

    /// Consumes the tape and back-propagates `seeds` (node, dL/dnode).
    ///
    /// An empty tape yields zero layer gradients and no input gradients.
    pub fn backward(self, layers: &[Conv2d<T>], seeds: Vec<(NodeId, Array3<T>)>) -> Result<TapeGrads<T>> {
        let mut layer_grads: Vec<Conv2d<T>> = layers
            .iter()
            .map(|l| Conv2d::zeros(l.in_channels(), l.out_channels(), l.kernel()))
            .collect();
        let mut grads: Vec<Option<Array3<T>>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            let node = self
                .nodes
                .get(id)
                .ok_or_else(|| Error::Tape(format!("seed node {id} not on tape of {}", self.nodes.len())))?;
            if node.value.dim() != g.dim() {
                return Err(Error::Tape(format!(
                    "seed gradient {:?} does not match node value {:?}",
                    g.dim(),
                    node.value.dim()
                )));
            }
            accumulate(&mut grads[id], g);
        }

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {
                    grads[id] = Some(g);
                }
                Op::Conv { input, layer } => {
                    let l = layers
                        .get(*layer)
                        .ok_or_else(|| Error::Tape(format!("conv layer {layer} missing")))?;
                    let (gx, gw, gb) = l.backward(&self.nodes[*input].value, &g);
                    layer_grads[*layer].weight += &gw;
                    layer_grads[*layer].bias += &gb;
                    accumulate(&mut grads[*input], gx);
                }
                Op::Relu { input } => {
                    let mut gx = g;
                    gx.zip_mut_with(&node.value, |a, y| {
                        if *y <= T::zero() {
                            *a = T::zero();
                        }
                    });
                    accumulate(&mut grads[*input], gx);
                }
                Op::MaxPool { input, argmax } => {
                    let (c, w, h) = self.nodes[*input].value.dim();
                    let (_, pw, ph) = g.dim();
                    let mut gx = Array3::zeros((c, w, h));
                    let mut t = 0;
                    for ch in 0..c {
                        for u in 0..pw {
                            for v in 0..ph {
                                let flat = argmax[t] as usize;
                                gx[[ch, flat / h, flat % h]] += g[[ch, u, v]];
                                t += 1;
                            }
                        }
                    }
                    accumulate(&mut grads[*input], gx);
                }
                Op::Upsample { input } => {
                    let (c, w, h) = self.nodes[*input].value.dim();
                    let warp = LinearWarp::<T>::resize((w, h), (2 * w, 2 * h));
                    let mut gx = Array3::zeros((c, w, h));
                    for ch in 0..c {
                        gx.index_axis_mut(Axis(0), ch)
                            .assign(&warp.apply_transpose(&g.index_axis(Axis(0), ch).to_owned()));
                    }
                    accumulate(&mut grads[*input], gx);
                }
                Op::Concat { first, second } => {
                    let c1 = self.nodes[*first].value.dim().0;
                    accumulate(&mut grads[*first], g.slice(s![..c1, .., ..]).to_owned());
                    accumulate(&mut grads[*second], g.slice(s![c1.., .., ..]).to_owned());
                }
                Op::Sigmoid { input } => {
                    let mut gx = g;
                    gx.zip_mut_with(&node.value, |a, y| *a *= *y * (T::one() - *y));
                    accumulate(&mut grads[*input], gx);
                }
            }
        }

        let inputs = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input))
            .map(|(id, n)| grads[id].take().unwrap_or_else(|| Array3::zeros(n.value.dim())))
            .collect();
        Ok(TapeGrads {
            layers: layer_grads,
            inputs,
        })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Array3<T>>, g: Array3<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand3(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn naive_conv(l: &Conv2d<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (ci, w, h) = x.dim();
        let k = l.kernel() as i64;
        let p = k / 2;
        Array3::from_shape_fn((l.out_channels(), w, h), |(o, u, v)| {
            let mut acc = l.bias[o];
            for i in 0..ci {
                for du in 0..k {
                    for dv in 0..k {
                        let (a, b) = (u as i64 + du - p, v as i64 + dv - p);
                        if a >= 0 && b >= 0 && (a as usize) < w && (b as usize) < h {
                            acc += l.weight[[o, i, du as usize, dv as usize]] * x[[i, a as usize, b as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3, 5] {
            let l = Conv2d {
                weight: Array4::from_shape_fn((3, 2, k, k), |_| rng.random::<f64>() - 0.5),
                bias: Array1::from_shape_fn(3, |_| rng.random::<f64>()),
            };
            let x = rand3((2, 7, 6), &mut rng);
            let err = (&l.forward(&x) - &naive_conv(&l, &x)).mapv(f64::abs).sum();
            assert!(err < 1e-12, "k={k} err {err}");
        }
    }

    #[test]
    fn one_by_one_conv_sigmoid_closed_form() {
        let l = Conv2d {
            weight: Array4::from_elem((1, 1, 1, 1), 0.7),
            bias: Array1::from_elem(1, -0.2),
        };
        let layers = vec![l];
        let x = Array3::from_shape_vec((1, 2, 2), vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let i = tape.input(x.clone());
        let c = tape.conv(&layers, 0, i);
        let out = tape.sigmoid(c);
        let seed = Array3::from_elem((1, 2, 2), 1.0);
        let grads = tape.backward(&layers, vec![(out, seed)]).unwrap();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let (mut gw, mut gb) = (0.0, 0.0);
        for xv in x.iter() {
            let s = sig(0.7 * xv - 0.2);
            gw += s * (1.0 - s) * xv;
            gb += s * (1.0 - s);
        }
        assert!((grads.layers[0].weight[[0, 0, 0, 0]] - gw).abs() < 1e-10);
        assert!((grads.layers[0].bias[0] - gb).abs() < 1e-10);
        for (g, xv) in grads.inputs[0].iter().zip(x.iter()) {
            let s = sig(0.7 * xv - 0.2);
            assert!((g - s * (1.0 - s) * 0.7).abs() < 1e-10);
        }
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let mut tape = Tape::<f64>::new();
        let i = tape.input(Array3::from_elem((1, 2, 2), 0.5));
        let p = tape.max_pool(i);
        let g = tape.backward(&[], vec![(p, Array3::from_elem((1, 1, 1), 1.0))]).unwrap();
        assert_eq!(g.inputs[0].iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let i = tape.input(Array3::from_shape_vec((1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(i);
        let g = tape.backward(&[], vec![(r, Array3::from_elem((1, 1, 3), 1.0))]).unwrap();
        assert_eq!(g.inputs[0].iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_tape_gives_zero_gradients() {
        let layers = vec![Conv2d::<f64>::zeros(1, 2, 3)];
        let g = Tape::new().backward(&layers, vec![]).unwrap();
        assert!(g.layers[0].weight.iter().all(|v| *v == 0.0));
        assert!(g.inputs.is_empty());
    }

    #[test]
    fn mismatched_seed_rejected() {
        let mut tape = Tape::<f64>::new();
        let i = tape.input(Array3::zeros((1, 2, 2)));
        assert!(tape.backward(&[], vec![(i, Array3::zeros((1, 3, 3)))]).is_err());
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand3((2, 8, 8), &mut rng);
        let layers = vec![
            Conv2d {
                weight: Array4::from_shape_fn((3, 2, 3, 3), |_| rng.random::<f64>() - 0.5),
                bias: Array1::from_shape_fn(3, |_| rng.random::<f64>() * 0.1),
            },
            Conv2d {
                weight: Array4::from_shape_fn((1, 6, 3, 3), |_| rng.random::<f64>() - 0.5),
                bias: Array1::zeros(1),
            },
        ];
        let weights = rand3((1, 8, 8), &mut rng);
        let run = |x: &Array3<f64>| {
            let mut t = Tape::new();
            let i = t.input(x.clone());
            let c = t.conv(&layers, 0, i);
            let r = t.relu(c);
            let p = t.max_pool(r);
            let u = t.upsample(p);
            let cat = t.concat(r, u);
            let c2 = t.conv(&layers, 1, cat);
            let out = t.sigmoid(c2);
            let loss = (t.value(out) * &weights).sum();
            (loss, t, out)
        };
        let (_, tape, out) = run(&x);
        let g = tape.backward(&layers, vec![(out, weights.clone())]).unwrap();
        let h = 1e-6;
        for _ in 0..20 {
            let idx = (rng.random_range(0..2), rng.random_range(0..8), rng.random_range(0..8));
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (run(&xp).0 - run(&xm).0) / (2.0 * h);
            let an = g.inputs[0][idx];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6), "{idx:?}: {fd} vs {an}");
        }
    }
}
