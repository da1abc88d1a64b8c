//! Fully connected network with leaky-ReLU hidden layers and a linear scalar
//! output, trained by plain full-batch gradient descent.
//!
//! Weights of a layer are stored row-major as `inputs x outputs`, so the
//! forward pass is a sequence of `out += x[i] * row_i` updates.
//!
//! # Weight file
//!
//! ```text
//! b"LFQW1"
//! u32 LE   layer count L
//! L x (u32 LE rows, u32 LE cols)
//! L x (rows*cols f64 LE weights, cols f64 LE biases)
//! ```
//!
//! A `<file>.meta.toml` sidecar records how the weights were produced.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FEATURE_VERSION, NUM_FEATURES};

pub const LFQ_ARCH: [usize; 5] = [NUM_FEATURES, 256, 256, 256, 1];
pub const LEAKY_SLOPE: f64 = 0.01;
pub const LEARNING_RATE: f64 = 0.01;

const MAGIC: &[u8; 5] = b"LFQW1";

#[inline]
fn leaky(z: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

#[inline]
fn leaky_grad(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    Mae,
    Mse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// `out = bias + x * W`.
    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.outputs..(i + 1) * self.outputs];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }
}

/// One gradient-descent update on a batch.
#[derive(Debug, Clone)]
pub struct TrainStep {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub loss: Loss,
    pub learning_rate: f64,
}

impl TrainStep {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>, loss: Loss) -> Self {
        TrainStep {
            inputs,
            targets,
            loss,
            learning_rate: LEARNING_RATE,
        }
    }
}

/// Gradient of the mean batch loss, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialisation of weights and biases.
    pub fn new(sizes: &[usize], seed: u64) -> Self {
        assert!(sizes.len() >= 2, "need at least an input and an output size");
        let mut rng = Pcg64::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut layer = Layer::zeros(w[0], w[1]);
                for p in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                    *p = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Mlp {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    /// The 60-256-256-256-1 controller network.
    pub fn lfq(seed: u64) -> Self {
        Self::new(&LFQ_ARCH, seed)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].inputs];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        debug_assert_eq!(x.len(), self.layers[0].inputs);
        let mut cur = x.to_vec();
        let mut next = Vec::with_capacity(256);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if l < last {
                next.iter_mut().for_each(|z| *z = leaky(*z));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        let y = cur[0];
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite { what: "output" })
        }
    }

    /// Mean batch loss without touching the parameters.
    pub fn loss(&self, inputs: &[Vec<f64>], targets: &[f64], loss: Loss) -> Result<f64> {
        let mut total = 0.0;
        for (x, &y) in inputs.iter().zip(targets) {
            let e = self.forward(x)? - y;
            total += match loss {
                Loss::Mae => e.abs(),
                Loss::Mse => e * e,
            };
        }
        Ok(total / inputs.len() as f64)
    }

    /// Mean loss and its gradient with respect to every parameter.
    pub fn gradient(&self, step: &TrainStep) -> Result<(f64, Gradients)> {
        let n = step.inputs.len();
        if n == 0 || n != step.targets.len() {
            return Err(Error::InvalidConfig(format!(
                "batch has {} inputs and {} targets",
                n,
                step.targets.len()
            )));
        }
        if step.targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { what: "target" });
        }
        let mut grads = Gradients {
            layers: self.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect(),
        };
        let last = self.layers.len() - 1;
        // Pre-activations and activations per layer, reused across samples.
        let mut pre: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.outputs]).collect();
        let mut act: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.outputs]).collect();
        let mut delta = Vec::new();
        let mut delta_prev = Vec::new();
        let mut total = 0.0;

        for (x, &target) in step.inputs.iter().zip(&step.targets) {
            for l in 0..self.layers.len() {
                let input: &[f64] = if l == 0 { x } else { &act[l - 1] };
                let mut z = std::mem::take(&mut pre[l]);
                self.layers[l].affine(input, &mut z);
                let a = &mut act[l];
                a.clear();
                if l < last {
                    a.extend(z.iter().map(|&v| leaky(v)));
                } else {
                    a.extend_from_slice(&z);
                }
                pre[l] = z;
            }
            let err = act[last][0] - target;
            let d_out = match step.loss {
                Loss::Mae => {
                    total += err.abs();
                    if err > 0.0 {
                        1.0
                    } else if err < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                Loss::Mse => {
                    total += err * err;
                    2.0 * err
                }
            } / n as f64;

            delta.clear();
            delta.push(d_out);
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let g = &mut grads.layers[l];
                let input: &[f64] = if l == 0 { x } else { &act[l - 1] };
                for (gb, d) in g.bias.iter_mut().zip(&delta) {
                    *gb += d;
                }
                for (i, &a) in input.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let row = &mut g.weights[i * layer.outputs..(i + 1) * layer.outputs];
                    for (gw, d) in row.iter_mut().zip(&delta) {
                        *gw += a * d;
                    }
                }
                if l > 0 {
                    delta_prev.clear();
                    for (row, &z) in layer.weights.chunks_exact(layer.outputs).zip(&pre[l - 1]) {
                        let s: f64 = row.iter().zip(&delta).map(|(w, d)| w * d).sum();
                        delta_prev.push(s * leaky_grad(z));
                    }
                    std::mem::swap(&mut delta, &mut delta_prev);
                }
            }
        }

        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss" });
        }
        if grads.layers.iter().any(|l| l.params().any(|p| !p.is_finite())) {
            return Err(Error::NonFinite { what: "gradient" });
        }
        Ok((loss, grads))
    }

    pub fn apply(&mut self, grads: &Gradients, learning_rate: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, d) in layer.weights.iter_mut().zip(&g.weights) {
                *p -= learning_rate * d;
            }
            for (p, d) in layer.bias.iter_mut().zip(&g.bias) {
                *p -= learning_rate * d;
            }
        }
    }

    /// One gradient-descent step; returns the loss before the update. On a
    /// non-finite loss or gradient the parameters are left untouched.
    pub fn backward_and_step(&mut self, step: &TrainStep) -> Result<f64> {
        let (loss, grads) = self.gradient(step)?;
        self.apply(&grads, step.learning_rate);
        if self.layers.iter().any(|l| l.params().any(|p| !p.is_finite())) {
            return Err(Error::NonFinite { what: "parameter" });
        }
        Ok(loss)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.num_params() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            buf.extend_from_slice(&(l.inputs as u32).to_le_bytes());
            buf.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        }
        for l in &self.layers {
            for p in l.params() {
                buf.extend_from_slice(&p.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("bad magic, not an LFQW1 weight file".into()));
        }
        let count = r.u32()? as usize;
        if count == 0 || count > 64 {
            return Err(Error::Format(format!("implausible layer count {count}")));
        }
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            dims.push((r.u32()? as usize, r.u32()? as usize));
        }
        for (l, w) in dims.windows(2).enumerate() {
            if w[0].1 != w[1].0 {
                return Err(Error::Dimension {
                    layer: l + 1,
                    expected: format!("{} inputs", w[0].1),
                    found: format!("{} inputs", w[1].0),
                });
            }
        }
        let mut layers = Vec::with_capacity(count);
        for &(inputs, outputs) in &dims {
            let mut layer = Layer::zeros(inputs, outputs);
            for p in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *p = r.f64()?;
            }
            layers.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last layer",
                bytes.len() - r.pos
            )));
        }
        Ok(Mlp { layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingWeights(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks the layer sizes against `sizes`.
    pub fn load_expecting(path: impl AsRef<Path>, sizes: &[usize]) -> Result<Self> {
        let net = Self::load(path)?;
        net.check_sizes(sizes)?;
        Ok(net)
    }

    pub fn check_sizes(&self, sizes: &[usize]) -> Result<()> {
        let expected: Vec<(usize, usize)> = sizes.windows(2).map(|w| (w[0], w[1])).collect();
        let found: Vec<(usize, usize)> = self.layers.iter().map(|l| (l.inputs, l.outputs)).collect();
        for (l, (e, f)) in expected.iter().zip(&found).enumerate() {
            if e != f {
                return Err(Error::Dimension {
                    layer: l,
                    expected: format!("{}x{}", e.0, e.1),
                    found: format!("{}x{}", f.0, f.1),
                });
            }
        }
        if expected.len() != found.len() {
            return Err(Error::Dimension {
                layer: expected.len().min(found.len()),
                expected: format!("{} layers", expected.len()),
                found: format!("{} layers", found.len()),
            });
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated file: needed {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Sidecar describing a weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub role: String,
    pub mode: String,
    pub seed: u64,
    pub alpha: f64,
    pub flows: u64,
    pub feature_version: u32,
    pub sizes: Vec<usize>,
}

impl WeightsMeta {
    pub fn new(role: &str, mode: &str, seed: u64, alpha: f64, flows: u64, sizes: Vec<usize>) -> Self {
        WeightsMeta {
            role: role.into(),
            mode: mode.into(),
            seed,
            alpha,
            flows,
            feature_version: FEATURE_VERSION,
            sizes,
        }
    }

    pub fn sidecar_path(weights: &Path) -> PathBuf {
        let mut name = weights.as_os_str().to_owned();
        name.push(".meta.toml");
        PathBuf::from(name)
    }

    pub fn write_for(&self, weights: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Metadata(e.to_string()))?;
        fs::write(Self::sidecar_path(weights), text)?;
        Ok(())
    }

    pub fn read_for(weights: &Path) -> Result<Self> {
        let text = fs::read_to_string(Self::sidecar_path(weights))?;
        toml::from_str(&text).map_err(|e| Error::Metadata(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = Pcg64::seed_from_u64(seed);
        let inputs = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let targets = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        (inputs, targets)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&LFQ_ARCH);
        assert_eq!(net.forward(&[3.5; 60]).unwrap(), 0.0);
    }

    #[test]
    fn leaky_slope() {
        assert_eq!(leaky(-1.0), -0.01);
        assert_eq!(leaky(2.0), 2.0);
        // A 1-1-1 network exposes the hidden activation directly.
        let mut net = Mlp::zeros(&[1, 1, 1]);
        net.layers_mut()[0].weights[0] = 1.0;
        net.layers_mut()[1].weights[0] = 1.0;
        assert_eq!(net.forward(&[-1.0]).unwrap(), -0.01);
    }

    #[test]
    fn fresh_network_is_near_zero() {
        let net = Mlp::lfq(1);
        let (inputs, _) = batch(50, 60, 2);
        for x in &inputs {
            assert!(net.forward(x).unwrap().abs() < 1.0);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(Mlp::lfq(9), Mlp::lfq(9));
        assert_ne!(Mlp::lfq(9), Mlp::lfq(10));
    }

    #[test]
    fn mse_at_target_leaves_parameters_unchanged() {
        let mut net = Mlp::new(&[4, 8, 1], 3);
        let x = vec![0.5, -1.0, 2.0, 0.1];
        let y = net.forward(&x).unwrap();
        let before = net.clone();
        let loss = net
            .backward_and_step(&TrainStep::new(vec![x], vec![y], Loss::Mse))
            .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn mae_converges_on_single_pair() {
        let mut net = Mlp::lfq(5);
        let mut rng = Pcg64::seed_from_u64(6);
        let x: Vec<f64> = (0..60).map(|_| rng.random_range(-0.5..0.5)).collect();
        let step = TrainStep::new(vec![x], vec![5.0], Loss::Mae);
        let mut prev = f64::INFINITY;
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = net.backward_and_step(&step).unwrap();
            assert!(last <= prev + 1e-9, "loss rose from {prev} to {last}");
            prev = last;
            if last < 0.1 {
                break;
            }
        }
        assert!(last < 0.1, "final error {last}");
    }

    #[test]
    fn non_finite_target_is_rejected_without_update() {
        let mut net = Mlp::new(&[2, 3, 1], 0);
        let before = net.clone();
        let step = TrainStep::new(vec![vec![1.0, 1.0]], vec![f64::NAN], Loss::Mse);
        assert!(net.backward_and_step(&step).is_err());
        assert_eq!(net, before);
    }

    #[test]
    fn exploding_gradient_aborts_step() {
        let mut net = Mlp::new(&[2, 3, 1], 0);
        let before = net.clone();
        let step = TrainStep::new(vec![vec![1e300, 1e300]], vec![0.0], Loss::Mse);
        assert!(matches!(net.backward_and_step(&step), Err(Error::NonFinite { .. })));
        assert_eq!(net, before);
    }

    #[test]
    fn bytes_round_trip_bit_exact() {
        let net = Mlp::lfq(11);
        let back = Mlp::from_bytes(&net.to_bytes()).unwrap();
        let (inputs, _) = batch(100, 60, 12);
        for x in &inputs {
            assert_eq!(net.forward(x).unwrap().to_bits(), back.forward(x).unwrap().to_bits());
        }
    }

    #[test]
    fn header_layout() {
        let bytes = Mlp::new(&[3, 2, 1], 0).to_bytes();
        assert_eq!(&bytes[..5], b"LFQW1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 5 + 4 + 16 + 8 * (3 * 2 + 2 + 2 + 1));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = Mlp::new(&[3, 2, 1], 0).to_bytes();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(Mlp::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Mlp::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_architecture_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        Mlp::new(&[60, 256, 128, 256, 1], 0).save(&path).unwrap();
        let err = Mlp::load_expecting(&path, &LFQ_ARCH).unwrap_err();
        match err {
            Error::Dimension { layer, .. } => assert_eq!(layer, 1),
            other => panic!("unexpected {other}"),
        }
        assert!(err_string(&path).contains("layer 1"));
    }

    fn err_string(path: &Path) -> String {
        Mlp::load_expecting(path, &LFQ_ARCH).unwrap_err().to_string()
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            Mlp::load("/nonexistent/weights.bin"),
            Err(Error::MissingWeights(_))
        ));
    }

    #[test]
    fn metadata_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("actor.bin");
        let meta = WeightsMeta::new("actor", "offline", 7, 0.01, 2000, LFQ_ARCH.to_vec());
        meta.write_for(&path).unwrap();
        assert!(dir.path().join("actor.bin.meta.toml").exists());
        assert_eq!(WeightsMeta::read_for(&path).unwrap(), meta);
    }
}
