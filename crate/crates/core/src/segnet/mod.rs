//! Tiny U-Net segmentation network, momentum SGD with step decay, and the
//! EMA teacher update.

mod checkpoint;
mod optim;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointDtype, CHECKPOINT_VERSION};
pub use optim::{ema_update, lr_at, sgd_step, EmaConfig, OptimConfig};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Eager, Graph, Tape, Tensor, Var};

/// Network hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Number of resolution levels; `depth - 1` downsamplings.
    pub depth: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 3,
            base_width: 8,
            depth: 3,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.base_width < 1 || self.in_channels < 1 || self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "net config needs depth >= 1, base_width >= 1, in_channels >= 1, num_classes >= 2; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// `(name, shape)` of every parameter in construction order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        for level in 0..self.depth {
            let cin = if level == 0 {
                self.in_channels
            } else {
                self.width(level - 1)
            };
            conv(format!("enc{level}.conv1"), cin, self.width(level), 3);
            conv(format!("enc{level}.conv2"), self.width(level), self.width(level), 3);
        }
        for level in (0..self.depth - 1).rev() {
            let cin = self.width(level + 1) + self.width(level);
            conv(format!("dec{level}.conv1"), cin, self.width(level), 3);
        }
        conv("head".into(), self.width(0), self.num_classes, 1);
        out
    }
}

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    /// All-zero parameters with the shapes of `cfg`.
    pub fn zeros(cfg: &NetConfig) -> Self {
        Self {
            tensors: cfg
                .param_shapes()
                .into_iter()
                .map(|(n, s)| (n, Tensor::zeros(&s)))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Checks that both sets hold the same names with the same shapes.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ParamMismatch(format!(
                "{} vs {} tensors",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::ParamMismatch(format!(
                    "`{na}` {:?} vs `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Largest absolute difference over all values (`‖a − b‖∞`).
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_compatible(other)?;
        Ok(self
            .tensors
            .values()
            .zip(other.tensors.values())
            .map(|(a, b)| a.max_abs_diff(b).expect("compatible"))
            .fold(T::zero(), T::max))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Record every tensor as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), true)))
            .collect()
    }

    /// Collect the gradients of bound leaves after `backward`.
    pub fn grads_from(&self, tape: &Tape<T>, vars: &BTreeMap<String, Var>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = vars
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            let g = tape
                .grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.clone(), g);
        }
        Ok(Self { tensors: out })
    }
}

/// Kaiming-style uniform init: kernels in `±sqrt(6 / fan_in)`, biases zero.
pub fn init_params<T: Scalar>(cfg: &NetConfig) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in cfg.param_shapes() {
        let t = if shape.len() == 4 {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = (6.0 / fan_in).sqrt();
            Tensor::from_fn(&shape, |_| T::of(rng.gen_range(-bound..bound)))
        } else {
            Tensor::zeros(&shape)
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams { tensors })
}

fn param<'a, N>(nodes: &'a BTreeMap<String, N>, name: &str) -> Result<&'a N> {
    nodes
        .get(name)
        .ok_or_else(|| Error::ParamMismatch(format!("missing parameter `{name}`")))
}

fn conv_block<T: Scalar, G: Graph<T>>(
    g: &mut G,
    nodes: &BTreeMap<String, G::Node>,
    name: &str,
    x: &G::Node,
    relu: bool,
) -> Result<G::Node> {
    let k = param(nodes, &format!("{name}.weight"))?;
    let b = param(nodes, &format!("{name}.bias"))?;
    let pad = g.value(k).shape()[2] / 2;
    let y = g.conv2d(x, k, b, 1, pad)?;
    Ok(if relu { g.relu(&y) } else { y })
}

/// U-Net forward on any [`Graph`] backend; returns logits `[B,K,H,W]`.
pub fn forward_on<T: Scalar, G: Graph<T>>(
    g: &mut G,
    cfg: &NetConfig,
    nodes: &BTreeMap<String, G::Node>,
    x: &G::Node,
) -> Result<G::Node> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(Error::InvalidShape {
            op: "segnet.forward",
            detail: format!(
                "expected [B,{},H,W] input, got {shape:?}",
                cfg.in_channels
            ),
        });
    }
    let div = cfg.spatial_divisor();
    if shape[2] % div != 0 || shape[3] % div != 0 {
        return Err(Error::InvalidShape {
            op: "segnet.forward",
            detail: format!(
                "spatial extents {}x{} must be divisible by {div}",
                shape[2], shape[3]
            ),
        });
    }

    let mut skips = Vec::with_capacity(cfg.depth);
    let mut h = x.clone();
    for level in 0..cfg.depth {
        if level > 0 {
            h = g.maxpool2(&h)?;
        }
        h = conv_block(g, nodes, &format!("enc{level}.conv1"), &h, true)?;
        h = conv_block(g, nodes, &format!("enc{level}.conv2"), &h, true)?;
        skips.push(h.clone());
    }
    for level in (0..cfg.depth - 1).rev() {
        let up = g.upsample2x(&h)?;
        let cat = g.channel_concat(&up, &skips[level])?;
        h = conv_block(g, nodes, &format!("dec{level}.conv1"), &cat, true)?;
    }
    conv_block(g, nodes, "head", &h, false)
}

/// Eager forward pass returning logits.
pub fn forward<T: Scalar>(cfg: &NetConfig, params: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Eager;
    forward_on(&mut g, cfg, &params.tensors, x)
}

/// Eager forward pass followed by channel softmax.
pub fn predict_probs<T: Scalar>(
    cfg: &NetConfig,
    params: &ModelParams<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    crate::tensor::ops::softmax_channels(&forward(cfg, params, x)?)
}
