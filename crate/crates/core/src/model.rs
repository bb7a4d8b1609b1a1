//! The embedding network and its checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic        4 bytes "SRCK"
//! version      u32
//! profile      u32     0 = paper, 1 = desk
//! layer_count  u32
//! per layer    kind u32, five u32 hyperparameters, weight len u64, bias len u64
//! weights      f32 values, layer by layer, weight then bias
//! config_hash  u64
//! iteration    u64
//! velocity     u64 count, then that many f32 values (empty without momentum)
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Cache, LayerSpec, ParamGrads, Params, Real, Tensor};

/// Subtracted from [0, 1] pixel values before the first layer.
pub const INPUT_MEAN: f64 = 0.5;
/// Std of the zero-mean gaussian used for the paper profile's weights.
pub const INIT_STD: f64 = 0.01;

/// Weight initialisation; biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean gaussian with a fixed std.
    Gaussian(f64),
    /// Zero-mean gaussian with std `sqrt(2 / fan_in)` per layer, so that
    /// activations keep their scale through ReLU layers.
    FanIn,
}

impl Init {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::Gaussian(std) => std,
            Init::FanIn => (2.0 / fan_in as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    #[default]
    Desk,
}

impl Profile {
    pub fn id(self) -> u32 {
        match self {
            Profile::Paper => 0,
            Profile::Desk => 1,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(Profile::Paper),
            1 => Some(Profile::Desk),
            _ => None,
        }
    }

    pub fn input_shape(self) -> [usize; 3] {
        match self {
            Profile::Paper => [3, 227, 227],
            Profile::Desk => [3, 64, 64],
        }
    }

    /// AlexNet-style convolutions plus FC 4096 and FC 1024 for `Paper`; a
    /// three-convolution net ending in FC 128 and FC 32 for `Desk`.
    pub fn layers(self) -> Vec<LayerSpec> {
        use LayerSpec::*;
        let conv = |in_channels, out_channels, kernel, stride, padding| Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        };
        match self {
            Profile::Paper => vec![
                conv(3, 96, 11, 4, 0),
                Relu,
                MaxPool { size: 3, stride: 2 },
                conv(96, 256, 5, 1, 2),
                Relu,
                MaxPool { size: 3, stride: 2 },
                conv(256, 384, 3, 1, 1),
                Relu,
                conv(384, 384, 3, 1, 1),
                Relu,
                conv(384, 256, 3, 1, 1),
                Relu,
                MaxPool { size: 3, stride: 2 },
                Fc { inputs: 256 * 6 * 6, units: 4096 },
                Relu,
                Fc { inputs: 4096, units: 1024 },
            ],
            Profile::Desk => vec![
                conv(3, 16, 5, 2, 0),
                Relu,
                MaxPool { size: 2, stride: 2 },
                conv(16, 32, 3, 1, 0),
                Relu,
                MaxPool { size: 2, stride: 2 },
                conv(32, 32, 3, 1, 0),
                Relu,
                Fc { inputs: 32 * 4 * 4, units: 128 },
                Relu,
                Fc { inputs: 128, units: 32 },
            ],
        }
    }

    /// Shape after every layer, starting from the input.
    pub fn shapes(self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape().to_vec()];
        for layer in self.layers() {
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// The paper profile keeps the small fixed-std gaussian. The desk net
    /// scales by fan-in: under std 0.01 its embeddings start near 1e-5 and
    /// the first update hands them to the last bias.
    pub fn init(self) -> Init {
        match self {
            Profile::Paper => Init::Gaussian(INIT_STD),
            Profile::Desk => Init::FanIn,
        }
    }

    pub fn embedding_len(self) -> usize {
        match self.layers().last() {
            Some(LayerSpec::Fc { units, .. }) => *units,
            _ => unreachable!("profiles end in a fully connected layer"),
        }
    }
}

/// Where features are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    /// Output of the last max-pool layer, flattened.
    Pool,
    /// Output of the final fully connected layer (the embedding).
    Fc,
}

impl std::str::FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pool" | "last-pool" => Ok(Tap::Pool),
            "fc" | "final-fc" => Ok(Tap::Fc),
            other => Err(Error::UnknownTap(other.to_string())),
        }
    }
}

/// Gradient of a scalar objective with respect to every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGrads>>,
}

impl Gradients {
    pub fn zeros_like<T: Real>(net: &Network<T>) -> Self {
        Gradients {
            layers: net
                .params
                .iter()
                .map(|p| p.as_ref().map(ParamGrads::zeros_like))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.add_assign(b);
            }
        }
    }

    /// All gradient values, layer by layer, weight then bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| g.weight.iter().chain(&g.bias).copied())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Forward state of one input, retained for backpropagation.
pub struct Trace {
    caches: Vec<Cache>,
}

impl Trace {
    /// True when both passes took the same branch at every ReLU and max-pool,
    /// so the network is a single smooth function between the two inputs.
    pub fn same_branches(&self, other: &Trace) -> bool {
        self.caches.len() == other.caches.len()
            && self.caches.iter().zip(&other.caches).all(|pair| match pair {
                (Cache::Relu { mask: a }, Cache::Relu { mask: b }) => a == b,
                (Cache::Pool { argmax: a, .. }, Cache::Pool { argmax: b, .. }) => a == b,
                _ => true,
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    pub profile: Profile,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Option<Params<T>>>,
}

impl<T: Real> Network<T> {
    /// Random network with the profile's initialisation.
    pub fn new(profile: Profile, seed: u64) -> Self {
        Self::with_init(profile, seed, profile.init())
    }

    pub fn with_init(profile: Profile, seed: u64, init: Init) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = profile.layers();
        let params = layers
            .iter()
            .map(|spec| {
                Params::zeros(spec).map(|mut p: Params<T>| {
                    let fan_in = p.weight.shape()[1..].iter().product();
                    let normal = Normal::new(0.0, init.std(fan_in)).expect("valid std");
                    for w in p.weight.data_mut() {
                        *w = T::from_f64(normal.sample(&mut rng));
                    }
                    p
                })
            })
            .collect();
        Network {
            profile,
            layers,
            params,
        }
    }

    pub fn zeros(profile: Profile) -> Self {
        let layers = profile.layers();
        let params = layers.iter().map(Params::zeros).collect();
        Network {
            profile,
            layers,
            params,
        }
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            profile: self.profile,
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| p.as_ref().map(Params::cast)).collect(),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.profile.input_shape()
    }

    pub fn embedding_len(&self) -> usize {
        self.profile.embedding_len()
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    /// Squared L2 norm of the weight tensors (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| p.weight.data())
            .map(|w| {
                let w = w.to_f64();
                w * w
            })
            .sum()
    }

    fn centred(&self, crop: &Tensor<T>) -> Result<Tensor<T>> {
        if crop.shape() != self.input_shape() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {:?}, got {:?}",
                self.input_shape(),
                crop.shape()
            )));
        }
        let mut x = crop.clone();
        for v in x.data_mut() {
            *v = T::from_f64(v.to_f64() - INPUT_MEAN);
        }
        Ok(x)
    }

    /// Final-layer activation for one crop (`[3, S, S]`, values in [0, 1]).
    pub fn embed(&self, crop: &Tensor<T>) -> Result<Vec<f64>> {
        self.features(crop, Tap::Fc)
    }

    pub fn features(&self, crop: &Tensor<T>, tap: Tap) -> Result<Vec<f64>> {
        let stop = match tap {
            Tap::Fc => self.layers.len(),
            Tap::Pool => {
                self.layers
                    .iter()
                    .rposition(|l| matches!(l, LayerSpec::MaxPool { .. }))
                    .ok_or_else(|| Error::UnknownTap("pool (network has no pooling layer)".into()))?
                    + 1
            }
        };
        let mut x = self.centred(crop)?;
        for (spec, params) in self.layers[..stop].iter().zip(&self.params) {
            x = tensor::forward(spec, params.as_ref(), &x)?.0;
        }
        Ok(x.to_f64_vec())
    }

    /// Embedding plus the caches needed by [`Network::backward`].
    pub fn forward_trace(&self, crop: &Tensor<T>) -> Result<(Vec<f64>, Trace)> {
        let mut x = self.centred(crop)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for (spec, params) in self.layers.iter().zip(&self.params) {
            let (y, cache) = tensor::forward(spec, params.as_ref(), &x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x.to_f64_vec(), Trace { caches }))
    }

    /// Parameter gradients given the gradient of the objective with respect
    /// to the embedding.
    pub fn backward(&self, trace: &Trace, grad_embedding: &[f64]) -> Result<Gradients> {
        let mut grad = Tensor::from_vec(vec![grad_embedding.len()], grad_embedding.to_vec())?;
        let mut layers = vec![None; self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let (gi, gp) = tensor::layers_backward_with(
                &self.layers[i],
                self.params[i].as_ref(),
                &trace.caches[i],
                &grad,
                i > 0,
            )?;
            layers[i] = gp;
            if let Some(gi) = gi {
                grad = gi;
            }
        }
        Ok(Gradients { layers })
    }

    /// All parameter values, layer by layer, weight then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()).map(|v| v.to_f64()))
            .collect()
    }

    /// Mutable access to parameter `index` in [`Network::flat_params`] order.
    pub fn param_mut(&mut self, mut index: usize) -> Option<&mut T> {
        for p in self.params.iter_mut().flatten() {
            let wl = p.weight.len();
            if index < wl {
                return Some(&mut p.weight.data_mut()[index]);
            }
            index -= wl;
            let bl = p.bias.len();
            if index < bl {
                return Some(&mut p.bias.data_mut()[index]);
            }
            index -= bl;
        }
        None
    }

    /// `(start, len, is_weight)` ranges of each parameter tensor in flat order.
    pub fn param_ranges(&self) -> Vec<(usize, usize, bool)> {
        let mut out = Vec::new();
        let mut start = 0;
        for p in self.params.iter().flatten() {
            out.push((start, p.weight.len(), true));
            start += p.weight.len();
            out.push((start, p.bias.len(), false));
            start += p.bias.len();
        }
        out
    }

    /// Weight tensor of the first convolution, `[O, C, k, k]`.
    pub fn first_conv(&self) -> Option<&Tensor<T>> {
        self.layers
            .iter()
            .zip(&self.params)
            .find(|(l, _)| matches!(l, LayerSpec::Conv { .. }))
            .and_then(|(_, p)| p.as_ref().map(|p| &p.weight))
    }
}

/// A network snapshot with the training position it was taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub config_hash: u64,
    pub iteration: u64,
    /// Momentum buffer in flat parameter order; empty when momentum is off.
    pub velocity: Vec<f32>,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn layer_code(spec: &LayerSpec) -> (u32, [u32; 5]) {
    match *spec {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => (
            0,
            [in_channels, out_channels, kernel, stride, padding].map(|v| v as u32),
        ),
        LayerSpec::MaxPool { size, stride } => (1, [size as u32, stride as u32, 0, 0, 0]),
        LayerSpec::Relu => (2, [0; 5]),
        LayerSpec::Fc { inputs, units } => (3, [inputs as u32, units as u32, 0, 0, 0]),
    }
}

fn layer_from_code(kind: u32, h: [u32; 5]) -> Option<LayerSpec> {
    let h = h.map(|v| v as usize);
    Some(match kind {
        0 => LayerSpec::Conv {
            in_channels: h[0],
            out_channels: h[1],
            kernel: h[2],
            stride: h[3],
            padding: h[4],
        },
        1 => LayerSpec::MaxPool { size: h[0], stride: h[1] },
        2 => LayerSpec::Relu,
        3 => LayerSpec::Fc { inputs: h[0], units: h[1] },
        _ => return None,
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.network;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&net.profile.id().to_le_bytes());
        out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
        for (spec, params) in net.layers.iter().zip(&net.params) {
            let (kind, hyper) = layer_code(spec);
            out.extend_from_slice(&kind.to_le_bytes());
            for h in hyper {
                out.extend_from_slice(&h.to_le_bytes());
            }
            let (wl, bl) = params
                .as_ref()
                .map_or((0, 0), |p| (p.weight.len() as u64, p.bias.len() as u64));
            out.extend_from_slice(&wl.to_le_bytes());
            out.extend_from_slice(&bl.to_le_bytes());
        }
        for p in net.params.iter().flatten() {
            for v in p.weight.data().iter().chain(p.bias.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.velocity.len() as u64).to_le_bytes());
        for v in &self.velocity {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        let mut cur = Reader { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != CHECKPOINT_MAGIC {
            return Err(bad("missing SRCK magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let profile = cur
            .u32()
            .and_then(Profile::from_id)
            .ok_or_else(|| bad("unknown profile id"))?;
        let count = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut layers = Vec::with_capacity(count);
        let mut lens = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = cur.u32().ok_or_else(|| bad("truncated layer table"))?;
            let mut hyper = [0u32; 5];
            for h in &mut hyper {
                *h = cur.u32().ok_or_else(|| bad("truncated layer table"))?;
            }
            let spec = layer_from_code(kind, hyper).ok_or_else(|| bad("unknown layer kind"))?;
            let wl = cur.u64().ok_or_else(|| bad("truncated layer table"))? as usize;
            let bl = cur.u64().ok_or_else(|| bad("truncated layer table"))? as usize;
            layers.push(spec);
            lens.push((wl, bl));
        }
        if layers != profile.layers() {
            return Err(bad("layer table does not match the recorded profile"));
        }
        let mut params = Vec::with_capacity(count);
        for (spec, (wl, bl)) in layers.iter().zip(lens) {
            match Params::<f32>::zeros(spec) {
                Some(mut p) => {
                    if p.weight.len() != wl || p.bias.len() != bl {
                        return Err(bad("parameter lengths do not match layer shapes"));
                    }
                    for v in p.weight.data_mut().iter_mut().chain(p.bias.data_mut()) {
                        *v = cur.f32().ok_or_else(|| bad("truncated weights"))?;
                    }
                    params.push(Some(p));
                }
                None => {
                    if wl != 0 || bl != 0 {
                        return Err(bad("parameters recorded for a parameter-free layer"));
                    }
                    params.push(None);
                }
            }
        }
        let config_hash = cur.u64().ok_or_else(|| bad("truncated trailer"))?;
        let iteration = cur.u64().ok_or_else(|| bad("truncated trailer"))?;
        let vlen = cur.u64().ok_or_else(|| bad("truncated trailer"))? as usize;
        let velocity = (0..vlen)
            .map(|_| cur.f32().ok_or_else(|| bad("truncated velocity")))
            .collect::<Result<Vec<_>>>()?;
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            network: Network {
                profile,
                layers,
                params,
            },
            config_hash,
            iteration,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename, so an interrupted run never leaves a torn file.
        let tmp = path.with_extension("srck.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }
}
