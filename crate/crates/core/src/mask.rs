//! Binary masks over convolution weights: the channel-wise grown mask, the
//! kernel-wise attentive and selective masks, their real-valued logits, the
//! Gumbel-Sigmoid relaxation and straight-through binarization, and the L0
//! growth penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    /// One value per output channel, broadcast over `(Cin, k, k)`.
    Channel,
    /// One value per `(out, in)` kernel, broadcast over `(k, k)`.
    Kernel,
}

impl Granularity {
    pub fn tag(self) -> u8 {
        match self {
            Granularity::Channel => 0,
            Granularity::Kernel => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Granularity::Channel),
            1 => Some(Granularity::Kernel),
            _ => None,
        }
    }
}

/// Which conv layer a mask belongs to and the weight axes it covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub layer: usize,
    pub out_channels: usize,
    pub in_channels: usize,
}

impl Binding {
    pub fn mask_shape(&self, g: Granularity) -> Vec<usize> {
        match g {
            Granularity::Channel => vec![self.out_channels],
            Granularity::Kernel => vec![self.out_channels, self.in_channels],
        }
    }
}

/// Real-valued mask logits.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskParam {
    pub logits: Tensor,
    pub granularity: Granularity,
    pub binding: Binding,
}

impl MaskParam {
    pub fn new(granularity: Granularity, binding: Binding, init: f64) -> Self {
        Self {
            logits: Tensor::full(&binding.mask_shape(granularity), init),
            granularity,
            binding,
        }
    }

    pub fn from_logits(granularity: Granularity, binding: Binding, logits: Tensor) -> Result<Self> {
        if logits.shape() != binding.mask_shape(granularity).as_slice() {
            return Err(Error::shape(
                "mask_param",
                format!("{:?}", binding.mask_shape(granularity)),
                format!("{:?}", logits.shape()),
            ));
        }
        Ok(Self {
            logits,
            granularity,
            binding,
        })
    }

    /// Draw Gumbel noise, relax, and binarize. The sample remembers its noise
    /// so the surrogate gradient can be evaluated at the current logits.
    pub fn sample(
        &self,
        rng: &mut SeededRng,
        temperature: f64,
        threshold: f64,
    ) -> Result<MaskSample> {
        let n = self.logits.len();
        let g0 = gumbel_noise(rng, &[n]);
        let g1 = gumbel_noise(rng, &[n]);
        let mut p = Vec::with_capacity(n);
        for i in 0..n {
            p.push(gumbel_sigmoid(
                self.logits.data()[i],
                g0.data()[i],
                g1.data()[i],
                temperature,
            )?);
        }
        let p = Tensor::new(self.logits.shape(), p)?;
        let bits = binarize_ste(&p, threshold)?;
        Ok(MaskSample {
            bits: BinaryMask::new(bits, self.granularity, self.binding)?,
            g0: g0.into_data(),
            g1: g1.into_data(),
            temperature,
        })
    }

    /// Deterministic bits used once a task is frozen: `1` iff `sigmoid(logit) >= 0.5`.
    pub fn freeze(&self) -> BinaryMask {
        let bits = self.logits.map(|m| if m >= 0.0 { 1.0 } else { 0.0 });
        BinaryMask {
            bits,
            granularity: self.granularity,
            binding: self.binding,
        }
    }
}

/// One stochastic draw of a mask.
#[derive(Clone, Debug)]
pub struct MaskSample {
    pub bits: BinaryMask,
    g0: Vec<f64>,
    g1: Vec<f64>,
    temperature: f64,
}

impl MaskSample {
    /// Straight-through: the gradient reaching the bits is passed unchanged to
    /// the relaxed sample `p`, then through `dp/dlogit`.
    pub fn logit_grad(&self, param: &MaskParam, bits_grad: &[f64]) -> Tensor {
        let upstream = binarize_ste_backward(bits_grad);
        let data = param
            .logits
            .data()
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                upstream[i] * gumbel_sigmoid_grad(m, self.g0[i], self.g1[i], self.temperature)
            })
            .collect();
        Tensor::new(param.logits.shape(), data).expect("same shape as logits")
    }
}

/// A mask whose every element is exactly `0.0` or `1.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    bits: Tensor,
    pub granularity: Granularity,
    pub binding: Binding,
}

impl BinaryMask {
    pub fn new(bits: Tensor, granularity: Granularity, binding: Binding) -> Result<Self> {
        if bits.shape() != binding.mask_shape(granularity).as_slice() {
            return Err(Error::shape(
                "binary_mask",
                format!("{:?}", binding.mask_shape(granularity)),
                format!("{:?}", bits.shape()),
            ));
        }
        if let Some(v) = bits.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(
                "binary_mask",
                format!("non-binary value {v}"),
            ));
        }
        Ok(Self {
            bits,
            granularity,
            binding,
        })
    }

    pub fn filled(granularity: Granularity, binding: Binding, value: bool) -> Self {
        Self {
            bits: Tensor::full(
                &binding.mask_shape(granularity),
                if value { 1.0 } else { 0.0 },
            ),
            granularity,
            binding,
        }
    }

    pub fn bits(&self) -> &Tensor {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits.data()[i] == 1.0
    }

    pub fn set(&mut self, i: usize, on: bool) {
        self.bits.data_mut()[i] = if on { 1.0 } else { 0.0 };
    }

    pub fn count_ones(&self) -> usize {
        self.bits.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Standard Gumbel noise `-ln(-ln u)`, `u ~ U(0, 1)` exclusive of endpoints.
pub fn gumbel_noise(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| gumbel_from_uniform(rng.uniform_open()))
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// `ln(sigmoid(m))`, stable for large `|m|`.
fn log_sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        -(-m).exp().ln_1p()
    } else {
        m - m.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-class Gumbel-softmax with class-0 probability `sigmoid(m_r)`:
///
/// `p = exp((ln s + g0)/T) / (exp((ln s + g0)/T) + exp(g1/T))`, `s = sigmoid(m_r)`.
///
/// Evaluated by dividing through by the larger exponent, which is the same as
/// a sigmoid of the exponent difference.
pub fn gumbel_sigmoid(m_r: f64, g0: f64, g1: f64, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(
            "gumbel_sigmoid",
            format!("temperature must be > 0, got {temperature}"),
        ));
    }
    let a = (log_sigmoid(m_r) + g0) / temperature;
    let b = g1 / temperature;
    let p = if a >= b {
        1.0 / (1.0 + (b - a).exp())
    } else {
        let e = (a - b).exp();
        e / (1.0 + e)
    };
    Ok(p)
}

/// `dp/dm_r` for [`gumbel_sigmoid`]: `p (1 - p) (1 - sigmoid(m_r)) / T`.
pub fn gumbel_sigmoid_grad(m_r: f64, g0: f64, g1: f64, temperature: f64) -> f64 {
    let a = (log_sigmoid(m_r) + g0 - g1) / temperature;
    let p = sigmoid(a);
    p * (1.0 - p) * (1.0 - sigmoid(m_r)) / temperature
}

/// Probability that the binarized relaxed sample is 1: `s / (1 + s)`.
pub fn keep_probability(m_r: f64) -> f64 {
    let s = sigmoid(m_r);
    s / (1.0 + s)
}

/// Hard threshold, ties (`p == threshold`) round up to 1.
pub fn binarize_ste(p: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(
            "binarize_ste",
            format!("threshold must be in (0, 1), got {threshold}"),
        ));
    }
    Ok(p.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

/// Straight-through estimator: identity on the backward pass.
pub fn binarize_ste_backward(upstream: &[f64]) -> Vec<f64> {
    upstream.to_vec()
}

fn check_binding(
    op: &'static str,
    weights: &Tensor,
    mask: &BinaryMask,
) -> Result<(usize, usize, usize)> {
    let s = weights.shape();
    if s.len() != 4 || s[0] != mask.binding.out_channels || s[1] != mask.binding.in_channels {
        return Err(Error::shape(
            op,
            format!(
                "weights [{}, {}, k, k] for mask bound to layer {}",
                mask.binding.out_channels, mask.binding.in_channels, mask.binding.layer
            ),
            format!("{s:?}"),
        ));
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

/// Index of the mask element covering flat weight index `idx`.
fn mask_index(g: Granularity, idx: usize, cin: usize, kk: usize) -> usize {
    match g {
        Granularity::Channel => idx / (cin * kk),
        Granularity::Kernel => idx / kk,
    }
}

/// `weights ⊙ mask` with the mask broadcast according to its granularity.
pub fn apply_mask(weights: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    let (_, cin, kk) = check_binding("apply_mask", weights, mask)?;
    let m = mask.bits.data();
    let data = weights
        .data()
        .iter()
        .enumerate()
        .map(|(i, &w)| w * m[mask_index(mask.granularity, i, cin, kk)])
        .collect();
    Tensor::new(weights.shape(), data)
}

/// Gradients of `apply_mask` with respect to the weights and to the (binary)
/// mask values. The mask gradient is what the straight-through estimator
/// forwards to the logits.
pub fn apply_mask_backward(
    weights: &Tensor,
    mask: &BinaryMask,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (_, cin, kk) = check_binding("apply_mask_backward", weights, mask)?;
    if grad_out.shape() != weights.shape() {
        return Err(Error::shape(
            "apply_mask_backward",
            format!("{:?}", weights.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let m = mask.bits.data();
    let mut gw = vec![0.0; weights.len()];
    let mut gm = vec![0.0; mask.len()];
    for (i, (&w, &g)) in weights.data().iter().zip(grad_out.data()).enumerate() {
        let mi = mask_index(mask.granularity, i, cin, kk);
        gw[i] = g * m[mi];
        gm[mi] += g * w;
    }
    Ok((
        Tensor::new(weights.shape(), gw)?,
        Tensor::new(mask.bits.shape(), gm)?,
    ))
}

/// `lambda * ||bits||_0` and a relaxed gradient `lambda * sigmoid'(logit)`
/// for every logit, so growth logits feel shrinking pressure whether or not
/// their bit is currently on.
pub fn l0_penalty(mask: &BinaryMask, logits: &MaskParam, lambda: f64) -> Result<(f64, Tensor)> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(
            "l0_penalty",
            format!("lambda must be >= 0, got {lambda}"),
        ));
    }
    if logits.logits.shape() != mask.bits.shape() {
        return Err(Error::shape(
            "l0_penalty",
            format!("{:?}", mask.bits.shape()),
            format!("{:?}", logits.logits.shape()),
        ));
    }
    let value = lambda * mask.count_ones() as f64;
    let grad = logits.logits.map(|m| {
        let s = sigmoid(m);
        lambda * s * (1.0 - s)
    });
    Ok((value, grad))
}
