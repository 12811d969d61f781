//! The growable conv backbone: `[conv -> (group norm) -> relu -> maxpool2]*`
//! followed by a per-task linear head on the flattened features.
//!
//! Every conv layer runs with a kernel mask `K[o,i]` on its filters and a
//! channel mask `c[o]` on its bias (and on its normalized output), so a
//! channel with `c[o] = 0` emits exact zeros.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::growth::{ConvLayerState, KernelOwnership, LayerSpec, SlotState, TaskId};
use crate::mask::{apply_mask, apply_mask_backward, BinaryMask, Binding, Granularity};
use crate::rng::SeededRng;
use crate::tensor::{
    conv2d, conv2d_backward, group_norm, group_norm_backward, linear, linear_backward, maxpool2d,
    maxpool2d_backward, relu, relu_backward, GroupNormCache, Pooled, Tensor,
};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCfg {
    pub seed_width: usize,
    pub capacity: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_kernel() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_layers")]
    pub layers: Vec<LayerCfg>,
    /// Groups for per-task group normalization after every conv; 0 disables it.
    #[serde(default)]
    pub norm_groups: usize,
}

fn default_in_channels() -> usize {
    1
}
fn default_image_size() -> usize {
    16
}
fn default_layers() -> Vec<LayerCfg> {
    vec![
        LayerCfg {
            seed_width: 2,
            capacity: 8,
            kernel: 3,
        },
        LayerCfg {
            seed_width: 4,
            capacity: 16,
            kernel: 3,
        },
    ]
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            in_channels: default_in_channels(),
            image_size: default_image_size(),
            layers: default_layers(),
            norm_groups: 0,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return bad("arch.in_channels must be >= 1".into());
        }
        if self.layers.is_empty() {
            return bad("arch.layers must contain at least one layer".into());
        }
        let mut size = self.image_size;
        for (i, l) in self.layers.iter().enumerate() {
            if l.capacity == 0 {
                return bad(format!("arch.layers[{i}].capacity must be >= 1"));
            }
            if l.seed_width > l.capacity {
                return bad(format!(
                    "arch.layers[{i}].seed_width {} exceeds capacity {}",
                    l.seed_width, l.capacity
                ));
            }
            if l.kernel == 0 || l.kernel % 2 == 0 {
                return bad(format!(
                    "arch.layers[{i}].kernel must be odd, got {}",
                    l.kernel
                ));
            }
            if self.norm_groups > 0 && l.capacity % self.norm_groups != 0 {
                return bad(format!(
                    "arch.norm_groups {} does not divide layer {i} capacity {}",
                    self.norm_groups, l.capacity
                ));
            }
            size /= 2;
            if size == 0 {
                return bad(format!(
                    "arch.image_size {} too small for {} layers",
                    self.image_size,
                    self.layers.len()
                ));
            }
        }
        Ok(())
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut cin = self.in_channels;
        self.layers
            .iter()
            .map(|l| {
                let s = LayerSpec {
                    in_channels: cin,
                    capacity: l.capacity,
                    kernel: l.kernel,
                    seed_width: l.seed_width,
                };
                cin = l.capacity;
                s
            })
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        let side = self.image_size >> self.layers.len();
        self.layers.last().map_or(0, |l| l.capacity) * side * side
    }
}

/// Shared conv weights plus slot/kernel ownership for every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneState {
    pub arch: ArchSpec,
    pub layers: Vec<ConvLayerState>,
}

impl BackboneState {
    pub fn empty(arch: &ArchSpec) -> Self {
        Self {
            arch: arch.clone(),
            layers: arch
                .layer_specs()
                .into_iter()
                .enumerate()
                .map(|(i, s)| ConvLayerState::empty(i, s))
                .collect(),
        }
    }

    /// Seed network: the first `seed_width` slots of every layer grown.
    pub fn seed(arch: &ArchSpec, rng: &mut SeededRng) -> Result<Self> {
        let mut b = Self::empty(arch);
        for layer in &mut b.layers {
            for o in 0..layer.spec.seed_width {
                layer.grow_slot(o, rng)?;
            }
        }
        Ok(b)
    }

    /// Every slot grown (scratch baseline).
    pub fn full(arch: &ArchSpec, rng: &mut SeededRng) -> Result<Self> {
        let mut b = Self::empty(arch);
        for layer in &mut b.layers {
            for o in 0..layer.spec.capacity {
                layer.grow_slot(o, rng)?;
            }
        }
        Ok(b)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Which input channels of layer `l` carry signal: image channels for the
    /// first layer, active slots of the previous layer otherwise.
    pub fn input_active(&self, l: usize) -> Vec<bool> {
        if l == 0 {
            vec![true; self.layers[0].spec.in_channels]
        } else {
            self.layers[l - 1]
                .slots
                .iter()
                .map(|s| s.state.is_active())
                .collect()
        }
    }

    /// Hash of the weights that tasks in `owners` depend on: biases of slots
    /// FIXED by them and USED kernels they own (with the owner tag). Kernels
    /// still RELEASED are not covered since a later task may retrain them.
    pub fn immutable_digest(&self, owners: &[TaskId]) -> [u8; 32] {
        let mut h = Sha256::new();
        for layer in &self.layers {
            let kk = layer.spec.kernel * layer.spec.kernel;
            for s in &layer.slots {
                let SlotState::Fixed(t) = s.state else {
                    continue;
                };
                if owners.contains(&t) {
                    h.update([0u8]);
                    h.update((layer.index as u64).to_le_bytes());
                    h.update((s.index as u64).to_le_bytes());
                    h.update(layer.bias.data()[s.index].to_le_bytes());
                }
                let f = layer.filter(s.index);
                for i in 0..layer.spec.in_channels {
                    if let KernelOwnership::Used(owner) = layer.kernel(s.index, i) {
                        if owners.contains(&owner) {
                            h.update([1u8]);
                            h.update((layer.index as u64).to_le_bytes());
                            h.update((s.index as u64).to_le_bytes());
                            h.update((i as u64).to_le_bytes());
                            h.update(owner.to_le_bytes());
                            for v in &f[i * kk..(i + 1) * kk] {
                                h.update(v.to_le_bytes());
                            }
                        }
                    }
                }
            }
        }
        h.finalize().into()
    }
}

pub fn kernel_binding(spec: &LayerSpec, layer: usize) -> Binding {
    Binding {
        layer,
        out_channels: spec.capacity,
        in_channels: spec.in_channels,
    }
}

/// The binary masks one forward pass runs with, for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMasks {
    pub kernel: BinaryMask,
    pub channel: BinaryMask,
}

impl LayerMasks {
    pub fn ones(spec: &LayerSpec, layer: usize) -> Self {
        let b = kernel_binding(spec, layer);
        Self {
            kernel: BinaryMask::filled(Granularity::Kernel, b, true),
            channel: BinaryMask::filled(Granularity::Channel, b, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn init(classes: usize, dim: usize, rng: &mut SeededRng) -> Self {
        let bound = (6.0 / dim as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[classes, dim], |_| rng.uniform_range(-bound, bound)),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Per-task group-norm affine parameters, one pair per conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<Tensor>,
    pub beta: Vec<Tensor>,
}

impl NormParams {
    pub fn init(specs: &[LayerSpec]) -> Self {
        Self {
            gamma: specs.iter().map(|s| Tensor::ones(&[s.capacity])).collect(),
            beta: specs.iter().map(|s| Tensor::zeros(&[s.capacity])).collect(),
        }
    }
}

/// Task-private parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskParams {
    pub head: Head,
    pub norm: Option<NormParams>,
}

impl TaskParams {
    pub fn init(arch: &ArchSpec, classes: usize, rng: &mut SeededRng) -> Self {
        Self {
            head: Head::init(classes, arch.feature_dim(), rng),
            norm: (arch.norm_groups > 0).then(|| NormParams::init(&arch.layer_specs())),
        }
    }
}

struct LayerCache {
    input: Tensor,
    weff: Tensor,
    norm: Option<(Tensor, GroupNormCache)>,
    pre_relu: Tensor,
    pooled: Pooled,
    relu_shape: Vec<usize>,
}

pub struct ForwardCache {
    layers: Vec<LayerCache>,
    /// Flattened input of the head.
    pub features: Tensor,
    pub logits: Tensor,
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    /// dL/dW, already multiplied by the kernel mask.
    pub weight: Tensor,
    /// dL/db, already multiplied by the channel mask.
    pub bias: Tensor,
    /// dL/dK, one value per `(out, in)` kernel.
    pub kernel_mask: Tensor,
    /// dL/dc, one value per output channel.
    pub channel_mask: Tensor,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Grads {
    pub layers: Vec<LayerGrads>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

fn check_masks(b: &BackboneState, masks: &[LayerMasks]) -> Result<()> {
    if masks.len() != b.layers.len() {
        return Err(Error::shape("forward", b.layers.len(), masks.len()));
    }
    Ok(())
}

fn pad_of(spec: &LayerSpec) -> usize {
    spec.kernel / 2
}

pub fn forward(
    b: &BackboneState,
    masks: &[LayerMasks],
    task: &TaskParams,
    x: &Tensor,
) -> Result<ForwardCache> {
    check_masks(b, masks)?;
    let groups = b.arch.norm_groups;
    let mut caches = Vec::with_capacity(b.layers.len());
    let mut cur = x.clone();
    for (l, layer) in b.layers.iter().enumerate() {
        let m = &masks[l];
        let weff = apply_mask(&layer.weight, &m.kernel)?;
        let c = m.channel.bits().data();
        let beff = Tensor::new(
            &[layer.spec.capacity],
            layer
                .bias
                .data()
                .iter()
                .zip(c)
                .map(|(b, c)| b * c)
                .collect(),
        )?;
        let z = conv2d(&cur, &weff, &beff, 1, pad_of(&layer.spec))?;
        let (pre, norm) = match &task.norm {
            Some(np) if groups > 0 => {
                let (y, cache) = group_norm(&z, &np.gamma[l], &np.beta[l], groups, NORM_EPS)?;
                let hw = y.shape()[2] * y.shape()[3];
                let cap = layer.spec.capacity;
                let data = y
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * c[(i / hw) % cap])
                    .collect();
                let pre = Tensor::new(y.shape(), data)?;
                (pre, Some((y, cache)))
            }
            _ => (z, None),
        };
        let r = relu(&pre);
        let pooled = maxpool2d(&r, 2, 2)?;
        let next = pooled.output.clone();
        caches.push(LayerCache {
            input: cur,
            weff,
            norm,
            pre_relu: pre,
            relu_shape: r.shape().to_vec(),
            pooled,
        });
        cur = next;
    }
    let n = cur.shape()[0];
    let d = cur.len() / n;
    let features = cur.reshape(&[n, d])?;
    let logits = linear(&features, &task.head.weight, &task.head.bias)?;
    Ok(ForwardCache {
        layers: caches,
        features,
        logits,
    })
}

pub fn backward(
    b: &BackboneState,
    masks: &[LayerMasks],
    task: &TaskParams,
    cache: &ForwardCache,
    grad_logits: &Tensor,
) -> Result<Grads> {
    check_masks(b, masks)?;
    let lg = linear_backward(&cache.features, &task.head.weight, grad_logits)?;
    let mut g = lg.input;
    let mut out: Vec<Option<LayerGrads>> = vec![None; b.layers.len()];
    for l in (0..b.layers.len()).rev() {
        let layer = &b.layers[l];
        let lc = &cache.layers[l];
        let m = &masks[l];
        let c = m.channel.bits().data();
        let cap = layer.spec.capacity;
        let g_pool =
            std::mem::replace(&mut g, Tensor::scalar(0.0)).reshape(lc.pooled.output.shape())?;
        let g_r = maxpool2d_backward(&lc.pooled, &lc.relu_shape, &g_pool)?;
        let g_pre = relu_backward(&lc.pre_relu, &g_r)?;
        let mut dc = vec![0.0; cap];
        let (g_z, dgamma, dbeta) = match (&lc.norm, &task.norm) {
            (Some((y, ncache)), Some(np)) => {
                let hw = y.shape()[2] * y.shape()[3];
                let mut g_y = g_pre.data().to_vec();
                for (i, gv) in g_y.iter_mut().enumerate() {
                    let ch = (i / hw) % cap;
                    dc[ch] += *gv * y.data()[i];
                    *gv *= c[ch];
                }
                let g_y = Tensor::new(y.shape(), g_y)?;
                let ng = group_norm_backward(ncache, &np.gamma[l], &g_y)?;
                (ng.input, Some(ng.gamma), Some(ng.beta))
            }
            _ => (g_pre, None, None),
        };
        let cg = conv2d_backward(&lc.input, &lc.weff, &g_z, 1, pad_of(&layer.spec), l > 0)?;
        let (gw, gk) = apply_mask_backward(&layer.weight, &m.kernel, &cg.filters)?;
        let gb: Vec<f64> = cg.bias.data().iter().zip(c).map(|(g, c)| g * c).collect();
        for o in 0..cap {
            dc[o] += cg.bias.data()[o] * layer.bias.data()[o];
        }
        out[l] = Some(LayerGrads {
            weight: gw,
            bias: Tensor::new(&[cap], gb)?,
            kernel_mask: gk,
            channel_mask: Tensor::new(&[cap], dc)?,
            gamma: dgamma,
            beta: dbeta,
        });
        if let Some(gi) = cg.input {
            g = gi;
        }
    }
    Ok(Grads {
        layers: out
            .into_iter()
            .map(|x| x.expect("every layer visited"))
            .collect(),
        head_weight: lg.weight,
        head_bias: lg.bias,
    })
}

pub fn predict(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// SHA-256 over the little-endian bytes of a logits tensor.
pub fn fingerprint(logits: &Tensor) -> [u8; 32] {
    Sha256::digest(logits.to_le_bytes()).into()
}
