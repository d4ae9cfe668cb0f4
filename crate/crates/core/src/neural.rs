//! Fully-connected tanh networks with reverse-mode parameter gradients and
//! forward-mode spatial derivatives, plus a second-order jet scalar for
//! differentiating closed-form functions.
//!
//! Flat parameter order: layer by layer; within a layer the weight matrix
//! `W_k` (`n_k × n_{k-1}`) row-major, then the bias `b_k`.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{Array1, Array2, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const CHECKPOINT_HEADER: &str = "feinn-mlp 1";

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid architecture {0:?}: need at least two layers, 2 inputs and 1 output")]
    Architecture(Vec<usize>),
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("cotangent has length {got}, expected {expected}")]
    CotangentLength { expected: usize, got: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Multilayer perceptron `ℝ² → ℝ` with tanh after every affine map but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Value, spatial gradient and Laplacian of the network at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialDerivs {
    pub value: f64,
    pub grad: (f64, f64),
    pub lap: f64,
}

/// Activations saved by a forward pass for a later reverse sweep.
pub struct ForwardCache {
    /// `acts[0]` is the input batch, `acts[L]` the output column.
    acts: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> Vec<f64> {
        self.acts.last().expect("nonempty").column(0).to_vec()
    }

    pub fn batch_len(&self) -> usize {
        self.acts[0].nrows()
    }

    /// Outputs of the last hidden layer, one row per point.
    pub fn last_hidden(&self) -> &Array2<f64> {
        &self.acts[self.acts.len() - 2]
    }
}

fn validate(arch: &[usize]) -> Result<(), NeuralError> {
    if arch.len() < 2 || arch[0] != 2 || *arch.last().unwrap() != 1 || arch.contains(&0) {
        return Err(NeuralError::Architecture(arch.to_vec()));
    }
    Ok(())
}

fn points_matrix(points: &[(f64, f64)]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 2), |(i, j)| if j == 0 { points[i].0 } else { points[i].1 })
}

fn affine(h: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut z = h.dot(&w.t());
    z += b;
    z
}

impl Mlp {
    /// Glorot-uniform weights, zero biases, deterministic in `seed`.
    pub fn new(arch: &[usize], seed: u64) -> Result<Self, NeuralError> {
        validate(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for k in 1..arch.len() {
            let (fan_in, fan_out) = (arch[k - 1], arch[k]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a);
            weights.push(Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(&mut rng)));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Mlp { arch: arch.to_vec(), weights, biases })
    }

    /// Network with the given flat parameters.
    pub fn from_params(arch: &[usize], theta: &[f64]) -> Result<Self, NeuralError> {
        validate(arch)?;
        let mut net = Mlp {
            arch: arch.to_vec(),
            weights: (1..arch.len()).map(|k| Array2::zeros((arch[k], arch[k - 1]))).collect(),
            biases: (1..arch.len()).map(|k| Array1::zeros(arch[k])).collect(),
        };
        net.set_params(theta)?;
        Ok(net)
    }

    pub fn arch(&self) -> &[usize] {
        &self.arch
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.arch.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offset of the last layer's parameters in the flat vector.
    pub fn last_layer_offset(&self) -> usize {
        self.num_params() - (self.arch[self.arch.len() - 2] + 1)
    }

    pub fn weight(&self, layer: usize) -> &Array2<f64> {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Array1<f64> {
        &self.biases[layer]
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<(), NeuralError> {
        if theta.len() != self.num_params() {
            return Err(NeuralError::ParamLength { expected: self.num_params(), got: theta.len() });
        }
        let mut pos = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = theta[pos];
                pos += 1;
            }
            for v in b.iter_mut() {
                *v = theta[pos];
                pos += 1;
            }
        }
        Ok(())
    }

    pub fn with_params(&self, theta: &[f64]) -> Result<Self, NeuralError> {
        let mut n = self.clone();
        n.set_params(theta)?;
        Ok(n)
    }

    pub fn forward_cached(&self, points: &[(f64, f64)]) -> ForwardCache {
        let mut acts = vec![points_matrix(points)];
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = affine(acts.last().unwrap(), w, b);
            if k < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        ForwardCache { acts }
    }

    pub fn forward(&self, points: &[(f64, f64)]) -> Vec<f64> {
        self.forward_cached(points).output()
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.forward(&[(x, y)])[0]
    }

    /// `Σ_i g_i ∇_θ N(x_i)` from a saved forward pass.
    pub fn backward(&self, cache: &ForwardCache, cotangent: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let n = cache.batch_len();
        if cotangent.len() != n {
            return Err(NeuralError::CotangentLength { expected: n, got: cotangent.len() });
        }
        let layers = self.weights.len();
        let mut grads_w: Vec<Array2<f64>> = Vec::with_capacity(layers);
        let mut grads_b: Vec<Array1<f64>> = Vec::with_capacity(layers);
        let mut delta = Array2::from_shape_vec((n, 1), cotangent.to_vec()).expect("shape");
        for k in (0..layers).rev() {
            let input = &cache.acts[k];
            grads_w.push(delta.t().dot(input));
            grads_b.push(delta.sum_axis(Axis(0)));
            if k > 0 {
                let mut back = delta.dot(&self.weights[k]);
                Zip::from(&mut back).and(input).for_each(|d, &a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        grads_w.reverse();
        grads_b.reverse();
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in grads_w.iter().zip(&grads_b) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        Ok(out)
    }

    pub fn vjp(&self, points: &[(f64, f64)], cotangent: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let cache = self.forward_cached(points);
        self.backward(&cache, cotangent)
    }

    /// Outputs of the last hidden layer (the last-layer basis functions).
    pub fn hidden_features(&self, points: &[(f64, f64)]) -> Array2<f64> {
        self.forward_cached(points).last_hidden().clone()
    }

    /// Value, gradient and Laplacian by second-order forward propagation.
    pub fn spatial_derivs(&self, points: &[(f64, f64)]) -> Vec<SpatialDerivs> {
        let n = points.len();
        let mut v = points_matrix(points);
        let mut gx = Array2::from_shape_fn((n, 2), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let mut gy = Array2::from_shape_fn((n, 2), |(_, j)| if j == 1 { 1.0 } else { 0.0 });
        let mut lap = Array2::<f64>::zeros((n, 2));
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = affine(&v, w, b);
            let mut zx = gx.dot(&w.t());
            let mut zy = gy.dot(&w.t());
            let mut zl = lap.dot(&w.t());
            if k < last {
                z.mapv_inplace(f64::tanh);
                Zip::from(&z).and(&mut zx).and(&mut zy).and(&mut zl).for_each(|&a, dx, dy, l| {
                    let d1 = 1.0 - a * a;
                    let d2 = -2.0 * a * d1;
                    *l = d1 * *l + d2 * (*dx * *dx + *dy * *dy);
                    *dx *= d1;
                    *dy *= d1;
                });
            }
            v = z;
            gx = zx;
            gy = zy;
            lap = zl;
        }
        (0..n).map(|i| SpatialDerivs { value: v[[i, 0]], grad: (gx[[i, 0]], gy[[i, 0]]), lap: lap[[i, 0]] }).collect()
    }

    /// Text checkpoint: header, architecture line, one parameter per line
    /// in shortest round-trip decimal form.
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), NeuralError> {
        writeln!(w, "{CHECKPOINT_HEADER}")?;
        let arch: Vec<String> = self.arch.iter().map(|n| n.to_string()).collect();
        writeln!(w, "arch {}", arch.join(" "))?;
        writeln!(w, "params {}", self.num_params())?;
        for p in self.params() {
            writeln!(w, "{p:?}")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self, NeuralError> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String, NeuralError> {
            lines.next().transpose()?.ok_or_else(|| NeuralError::Checkpoint(format!("missing {what}")))
        };
        let header = next("header")?;
        if header.trim() != CHECKPOINT_HEADER {
            return Err(NeuralError::Checkpoint(format!("unsupported header {header:?}")));
        }
        let arch_line = next("architecture")?;
        let arch = arch_line
            .strip_prefix("arch ")
            .ok_or_else(|| NeuralError::Checkpoint("expected `arch`".into()))?
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|e| NeuralError::Checkpoint(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let count_line = next("parameter count")?;
        let count: usize = count_line
            .strip_prefix("params ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| NeuralError::Checkpoint("expected `params N`".into()))?;
        let theta = (0..count)
            .map(|_| next("parameter")?.trim().parse::<f64>().map_err(|e| NeuralError::Checkpoint(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Mlp::from_params(&arch, &theta)
    }
}

/// Scalar carrying value, gradient in `(x, y)` and Laplacian; closed under
/// arithmetic and the elementary functions below.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet2 {
    pub v: f64,
    pub g: [f64; 2],
    pub lap: f64,
}

impl Jet2 {
    pub fn constant(v: f64) -> Self {
        Jet2 { v, g: [0.0; 2], lap: 0.0 }
    }

    pub fn x(v: f64) -> Self {
        Jet2 { v, g: [1.0, 0.0], lap: 0.0 }
    }

    pub fn y(v: f64) -> Self {
        Jet2 { v, g: [0.0, 1.0], lap: 0.0 }
    }

    /// Applies `φ` given `φ(v)`, `φ'(v)`, `φ''(v)`.
    fn chain(self, f0: f64, f1: f64, f2: f64) -> Self {
        let gg = self.g[0] * self.g[0] + self.g[1] * self.g[1];
        Jet2 { v: f0, g: [f1 * self.g[0], f1 * self.g[1]], lap: f1 * self.lap + f2 * gg }
    }

    pub fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }

    pub fn atan(self) -> Self {
        let d = 1.0 / (1.0 + self.v * self.v);
        self.chain(self.v.atan(), d, -2.0 * self.v * d * d)
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    pub fn tanh(self) -> Self {
        let t = self.v.tanh();
        let d = 1.0 - t * t;
        self.chain(t, d, -2.0 * t * d)
    }

    pub fn powi(self, n: i32) -> Self {
        match n {
            0 => Jet2::constant(1.0),
            1 => self,
            _ => {
                let nf = n as f64;
                self.chain(self.v.powi(n), nf * self.v.powi(n - 1), nf * (nf - 1.0) * self.v.powi(n - 2))
            }
        }
    }

    pub fn powf(self, p: f64) -> Self {
        self.chain(self.v.powf(p), p * self.v.powf(p - 1.0), p * (p - 1.0) * self.v.powf(p - 2.0))
    }
}

impl fmt::Display for Jet2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [∇ {}, {}; Δ {}]", self.v, self.g[0], self.g[1], self.lap)
    }
}

impl Add for Jet2 {
    type Output = Jet2;
    fn add(self, o: Jet2) -> Jet2 {
        Jet2 { v: self.v + o.v, g: [self.g[0] + o.g[0], self.g[1] + o.g[1]], lap: self.lap + o.lap }
    }
}

impl Sub for Jet2 {
    type Output = Jet2;
    fn sub(self, o: Jet2) -> Jet2 {
        self + (-o)
    }
}

impl Neg for Jet2 {
    type Output = Jet2;
    fn neg(self) -> Jet2 {
        Jet2 { v: -self.v, g: [-self.g[0], -self.g[1]], lap: -self.lap }
    }
}

impl Mul for Jet2 {
    type Output = Jet2;
    fn mul(self, o: Jet2) -> Jet2 {
        let cross = self.g[0] * o.g[0] + self.g[1] * o.g[1];
        Jet2 {
            v: self.v * o.v,
            g: [self.v * o.g[0] + o.v * self.g[0], self.v * o.g[1] + o.v * self.g[1]],
            lap: self.v * o.lap + o.v * self.lap + 2.0 * cross,
        }
    }
}

impl Div for Jet2 {
    type Output = Jet2;
    fn div(self, o: Jet2) -> Jet2 {
        let inv = 1.0 / o.v;
        self * o.chain(inv, -inv * inv, 2.0 * inv * inv * inv)
    }
}

impl Add<f64> for Jet2 {
    type Output = Jet2;
    fn add(self, c: f64) -> Jet2 {
        Jet2 { v: self.v + c, ..self }
    }
}

impl Sub<f64> for Jet2 {
    type Output = Jet2;
    fn sub(self, c: f64) -> Jet2 {
        Jet2 { v: self.v - c, ..self }
    }
}

impl Mul<f64> for Jet2 {
    type Output = Jet2;
    fn mul(self, c: f64) -> Jet2 {
        Jet2 { v: self.v * c, g: [self.g[0] * c, self.g[1] * c], lap: self.lap * c }
    }
}

impl Mul<Jet2> for f64 {
    type Output = Jet2;
    fn mul(self, j: Jet2) -> Jet2 {
        j * self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ARCH: [usize; 6] = [2, 50, 50, 50, 50, 1];

    fn small() -> Mlp {
        let mut net = Mlp::new(&[2, 7, 5, 1], 3).unwrap();
        let theta: Vec<f64> = net.params().iter().enumerate().map(|(i, p)| p + 0.1 * (i as f64 * 0.7).sin()).collect();
        net.set_params(&theta).unwrap();
        net
    }

    /// Scalar forward pass written without matrices.
    fn naive_forward(net: &Mlp, x: f64, y: f64) -> f64 {
        let mut h = vec![x, y];
        for k in 0..net.num_layers() {
            let w = net.weight(k);
            let b = net.bias(k);
            let mut z: Vec<f64> = (0..w.nrows()).map(|i| b[i] + (0..w.ncols()).map(|j| w[[i, j]] * h[j]).sum::<f64>()).collect();
            if k + 1 < net.num_layers() {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = z;
        }
        h[0]
    }

    #[test]
    fn parameter_count_and_init() {
        let a = Mlp::new(&ARCH, 7).unwrap();
        assert_eq!(a.num_params(), 2 * 50 + 50 + 3 * (50 * 50 + 50) + 50 + 1);
        assert_eq!(a.num_params(), 7851);
        assert_eq!(a.params(), Mlp::new(&ARCH, 7).unwrap().params());
        assert_ne!(a.params(), Mlp::new(&ARCH, 8).unwrap().params());
        let bound = (6.0f64 / 100.0).sqrt();
        assert!(a.weight(1).iter().all(|w| w.abs() <= bound));
        assert!(a.bias(2).iter().all(|&b| b == 0.0));
        assert!(Mlp::new(&[3, 5, 1], 0).is_err());
        assert!(Mlp::new(&[2, 5, 2], 0).is_err());
        assert!(Mlp::new(&[2], 0).is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let net = small();
        let theta = net.params();
        let again = Mlp::from_params(net.arch(), &theta).unwrap();
        assert_eq!(again, net);
        assert!(net.with_params(&theta[1..]).is_err());
        assert_eq!(net.last_layer_offset(), net.num_params() - 6);
    }

    #[test]
    fn forward_special_cases() {
        let zero = Mlp::from_params(&[2, 4, 1], &[0.0; 17]).unwrap();
        assert!(zero.forward(&[(0.3, -0.2), (5.0, 1.0)]).iter().all(|&v| v == 0.0));
        // hidden neuron W=(1,0), b=0; output weight 1, bias 0
        let one = Mlp::from_params(&[2, 1, 1], &[1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        for x in [-2.0, -0.3, 0.0, 0.7] {
            assert_eq!(one.eval(x, 9.0), f64::tanh(x));
        }
    }

    #[test]
    fn batch_matches_loop() {
        let net = Mlp::new(&ARCH, 1).unwrap();
        let pts: Vec<(f64, f64)> = (0..40).map(|i| ((i as f64 * 0.31).sin(), (i as f64 * 0.17).cos())).collect();
        let batch = net.forward(&pts);
        for (p, v) in pts.iter().zip(&batch) {
            assert!((v - naive_forward(&net, p.0, p.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let net = small();
        let pts = [(0.3, -0.4), (0.9, 0.1), (-0.5, 0.6)];
        let cot = [0.7, -1.3, 0.4];
        let g = net.vjp(&pts, &cot).unwrap();
        let theta = net.params();
        let loss = |t: &[f64]| -> f64 {
            let n = net.with_params(t).unwrap();
            n.forward(&pts).iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-5;
        for i in 0..theta.len() {
            let mut p = theta.clone();
            p[i] += eps;
            let mut m = theta.clone();
            m[i] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1e-3) + 1e-10, "{i}: {fd} vs {}", g[i]);
        }
        // directional derivative
        let d: Vec<f64> = (0..theta.len()).map(|i| ((i * 13 % 7) as f64 - 3.0) / 3.0).collect();
        let tp: Vec<f64> = theta.iter().zip(&d).map(|(t, d)| t + eps * d).collect();
        let tm: Vec<f64> = theta.iter().zip(&d).map(|(t, d)| t - eps * d).collect();
        let fd = (loss(&tp) - loss(&tm)) / (2.0 * eps);
        let an: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() <= 1e-6 * an.abs());
    }

    #[test]
    fn vjp_is_linear_in_cotangent() {
        let net = Mlp::new(&ARCH, 2).unwrap();
        let pts = [(0.1, 0.2), (0.3, 0.9), (0.5, 0.5)];
        let g1 = net.vjp(&pts, &[1.0, 0.0, 2.0]).unwrap();
        let g2 = net.vjp(&pts, &[-0.5, 3.0, 1.0]).unwrap();
        let g12 = net.vjp(&pts, &[0.5, 3.0, 3.0]).unwrap();
        for i in 0..g1.len() {
            assert!((g1[i] + g2[i] - g12[i]).abs() < 1e-12);
        }
        assert!(net.vjp(&pts, &[0.0; 3]).unwrap().iter().all(|&v| v == 0.0));
        assert!(net.vjp(&pts, &[0.0; 2]).is_err());
    }

    #[test]
    fn single_neuron_laplacian() {
        let (w1, w2, b) = (0.8, -1.3, 0.2);
        let net = Mlp::from_params(&[2, 1, 1], &[w1, w2, b, 1.0, 0.0]).unwrap();
        for &(x, y) in &[(0.1, 0.2), (-0.7, 0.4)] {
            let d = net.spatial_derivs(&[(x, y)])[0];
            let s: f64 = w1 * x + w2 * y + b;
            let t = s.tanh();
            let expect = (w1 * w1 + w2 * w2) * (-2.0 * t * (1.0 - t * t));
            assert!((d.lap - expect).abs() < 1e-15);
            assert!((d.grad.0 - w1 * (1.0 - t * t)).abs() < 1e-15);
        }
        let zero = Mlp::from_params(&[2, 3, 1], &[0.0; 13]).unwrap();
        let d = zero.spatial_derivs(&[(0.3, 0.3)])[0];
        assert_eq!((d.value, d.grad, d.lap), (0.0, (0.0, 0.0), 0.0));
    }

    #[test]
    fn spatial_derivs_match_finite_differences() {
        let net = Mlp::new(&ARCH, 4).unwrap();
        let pts = [(0.2, 0.7), (0.55, 0.13), (0.9, 0.4)];
        let d = net.spatial_derivs(&pts);
        let vals = net.forward(&pts);
        let h = 1e-4;
        for (i, &(x, y)) in pts.iter().enumerate() {
            assert_eq!(d[i].value.to_bits(), vals[i].to_bits());
            let f = |x, y| naive_forward(&net, x, y);
            let lap = (f(x + h, y) + f(x - h, y) + f(x, y + h) + f(x, y - h) - 4.0 * f(x, y)) / (h * h);
            assert!((lap - d[i].lap).abs() <= 1e-5 * d[i].lap.abs().max(1e-2), "{lap} vs {}", d[i].lap);
            let gx = (f(x + 1e-6, y) - f(x - 1e-6, y)) / 2e-6;
            assert!((gx - d[i].grad.0).abs() < 1e-8);
        }
    }

    #[test]
    fn bounded_parameters_stay_finite() {
        let net = Mlp::new(&ARCH, 5).unwrap();
        let theta: Vec<f64> = net.params().iter().enumerate().map(|(i, _)| if i % 2 == 0 { 100.0 } else { -100.0 }).collect();
        let big = net.with_params(&theta).unwrap();
        let pts: Vec<(f64, f64)> = (0..25).map(|i| ((i % 5) as f64 / 4.0, (i / 5) as f64 / 4.0)).collect();
        assert!(big.forward(&pts).iter().all(|v| v.is_finite()));
        assert!(big.spatial_derivs(&pts).iter().all(|d| d.value.is_finite() && d.lap.is_finite()));
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let net = Mlp::new(&ARCH, 11).unwrap();
        let mut buf = Vec::new();
        net.save(&mut buf).unwrap();
        assert!(buf.starts_with(b"feinn-mlp 1\narch 2 50 50 50 50 1\n"));
        let back = Mlp::load(&buf[..]).unwrap();
        let pts = [(0.1, 0.9), (0.33, 0.66)];
        let (a, b) = (net.forward(&pts), back.forward(&pts));
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(Mlp::load(&b"feinn-mlp 9\n"[..]).is_err());
        assert!(Mlp::load(&b"feinn-mlp 1\narch 2 1\nparams 3\n0.0\n"[..]).is_err());
    }

    #[test]
    fn jet_rules_match_finite_differences() {
        let f = |x: Jet2, y: Jet2| ((x * x + y * 3.0).sqrt().atan() * (x - y).sin() / (y.exp() + 1.0)).powi(3) + (x * y).tanh() + x.powf(1.5);
        let (x0, y0) = (0.6, 0.35);
        let j = f(Jet2::x(x0), Jet2::y(y0));
        let s = |x: f64, y: f64| f(Jet2::constant(x), Jet2::constant(y)).v;
        let h = 1e-4;
        let lap = (s(x0 + h, y0) + s(x0 - h, y0) + s(x0, y0 + h) + s(x0, y0 - h) - 4.0 * s(x0, y0)) / (h * h);
        assert!((lap - j.lap).abs() < 1e-6 * j.lap.abs().max(1.0));
        let gy = (s(x0, y0 + 1e-6) - s(x0, y0 - 1e-6)) / 2e-6;
        assert!((gy - j.g[1]).abs() < 1e-8);
        assert_eq!(j.v, s(x0, y0));
    }
}
