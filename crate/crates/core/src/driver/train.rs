//! One training phase over one task: optional per-epoch growth queries, per
//! step mask sampling with straight-through logit updates, a freeze of all
//! masks, then fine-tuning under the frozen masks.

use crate::config::RunConfig;
use crate::data::TaskData;
use crate::error::Result;
use crate::growth::{
    active_params, enforce_growth_cap, full_params, query_and_transition, KernelOwnership,
    SlotAction, SlotState, TaskId,
};
use crate::mask::{l0_penalty, BinaryMask, Granularity, MaskParam, MaskSample, DEFAULT_THRESHOLD};
use crate::model::{
    backward, forward, kernel_binding, predict, BackboneState, LayerMasks, TaskParams,
};
use crate::rng::SeededRng;
use crate::tensor::{cross_entropy, sgd_step, sgd_step_masked, Sgd, Tensor};

use super::{evaluate_masks, CurveRow};

/// Which mechanisms a phase runs with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseFlags {
    /// Grown-mask queries on non-FIXED slots once per epoch.
    pub grow: bool,
    /// Kernel-wise attentive mask on current growth.
    pub attentive: bool,
    /// Kernel-wise selective mask on USED kernels of FIXED slots.
    pub selective: bool,
    /// RELEASED kernels with a live input are trained and later claimed.
    pub retrain: bool,
    /// USED kernels of FIXED slots take part in the forward pass.
    pub reuse_fixed: bool,
}

/// Mask logits of the task being trained.
#[derive(Clone, Debug)]
pub struct TaskWork {
    pub task: TaskId,
    pub params: TaskParams,
    pub grown: Option<Vec<MaskParam>>,
    pub attentive: Option<Vec<MaskParam>>,
    pub selective: Option<Vec<MaskParam>>,
}

impl TaskWork {
    pub fn new(task: TaskId, params: TaskParams) -> Self {
        Self {
            task,
            params,
            grown: None,
            attentive: None,
            selective: None,
        }
    }

    fn frozen(set: &Option<Vec<MaskParam>>) -> Option<Vec<BinaryMask>> {
        set.as_ref().map(|v| v.iter().map(|m| m.freeze()).collect())
    }

    pub fn frozen_attentive(&self) -> Option<Vec<BinaryMask>> {
        Self::frozen(&self.attentive)
    }

    pub fn frozen_selective(&self) -> Option<Vec<BinaryMask>> {
        Self::frozen(&self.selective)
    }
}

pub fn kernel_params(b: &BackboneState, init: f64) -> Vec<MaskParam> {
    b.layers
        .iter()
        .map(|l| MaskParam::new(Granularity::Kernel, kernel_binding(&l.spec, l.index), init))
        .collect()
}

pub fn channel_params(b: &BackboneState, init: f64) -> Vec<MaskParam> {
    b.layers
        .iter()
        .map(|l| MaskParam::new(Granularity::Channel, kernel_binding(&l.spec, l.index), init))
        .collect()
}

/// Forward masks implied by the slot/kernel states and the given attentive
/// and selective bits (`None` = all ones).
pub fn build_masks(
    b: &BackboneState,
    f: &PhaseFlags,
    attentive: Option<&[BinaryMask]>,
    selective: Option<&[BinaryMask]>,
) -> Vec<LayerMasks> {
    b.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let ia = b.input_active(l);
            let cin = layer.spec.in_channels;
            let mut m = LayerMasks::ones(&layer.spec, l);
            for o in 0..layer.spec.capacity {
                let st = layer.slots[o].state;
                m.channel.set(o, st.is_active());
                for i in 0..cin {
                    let k = o * cin + i;
                    let on = ia[i]
                        && match st {
                            SlotState::Fixed(_) => match layer.kernel(o, i) {
                                KernelOwnership::Used(_) => {
                                    f.reuse_fixed && selective.is_none_or(|s| s[l].get(k))
                                }
                                KernelOwnership::Released => f.retrain,
                                KernelOwnership::Unassigned => false,
                            },
                            SlotState::GrownTraining => attentive.is_none_or(|a| a[l].get(k)),
                            _ => false,
                        };
                    m.kernel.set(k, on);
                }
            }
            m
        })
        .collect()
}

/// Which conv weights and biases the current task may change.
fn trainable(b: &BackboneState, f: &PhaseFlags) -> Vec<(Vec<bool>, Vec<bool>)> {
    b.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let ia = b.input_active(l);
            let cin = layer.spec.in_channels;
            let kk = layer.spec.kernel * layer.spec.kernel;
            let mut w = vec![false; layer.weight.len()];
            let mut bias = vec![false; layer.spec.capacity];
            for o in 0..layer.spec.capacity {
                let st = layer.slots[o].state;
                bias[o] = st == SlotState::GrownTraining;
                for i in 0..cin {
                    let on = ia[i]
                        && match st {
                            SlotState::GrownTraining => true,
                            SlotState::Fixed(_) => {
                                f.retrain && layer.kernel(o, i) == KernelOwnership::Released
                            }
                            _ => false,
                        };
                    if on {
                        let s = (o * cin + i) * kk;
                        w[s..s + kk].iter_mut().for_each(|x| *x = true);
                    }
                }
            }
            (w, bias)
        })
        .collect()
}

/// Per-layer update masks for (grown, attentive, selective) logits.
fn logit_targets(b: &BackboneState) -> Vec<(Vec<bool>, Vec<bool>, Vec<bool>)> {
    b.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let ia = b.input_active(l);
            let cin = layer.spec.in_channels;
            let cap = layer.spec.capacity;
            let mut g = vec![false; cap];
            let mut a = vec![false; cap * cin];
            let mut s = vec![false; cap * cin];
            for o in 0..cap {
                let st = layer.slots[o].state;
                g[o] = !st.is_fixed();
                for i in 0..cin {
                    let k = o * cin + i;
                    a[k] = st == SlotState::GrownTraining && ia[i];
                    s[k] = st.is_fixed()
                        && ia[i]
                        && matches!(layer.kernel(o, i), KernelOwnership::Used(_));
                }
            }
            (g, a, s)
        })
        .collect()
}

struct Velocity {
    weight: Vec<Tensor>,
    bias: Vec<Tensor>,
    head_w: Tensor,
    head_b: Tensor,
    gamma: Vec<Tensor>,
    beta: Vec<Tensor>,
    grown: Vec<Tensor>,
    attentive: Vec<Tensor>,
    selective: Vec<Tensor>,
}

fn zeros_like(v: &[Tensor]) -> Vec<Tensor> {
    v.iter().map(|t| Tensor::zeros(t.shape())).collect()
}

fn zeros_like_params(v: &Option<Vec<MaskParam>>) -> Vec<Tensor> {
    v.as_ref()
        .map(|v| v.iter().map(|m| Tensor::zeros(m.logits.shape())).collect())
        .unwrap_or_default()
}

impl Velocity {
    fn new(b: &BackboneState, w: &TaskWork) -> Self {
        let weights: Vec<Tensor> = b.layers.iter().map(|l| l.weight.clone()).collect();
        let biases: Vec<Tensor> = b.layers.iter().map(|l| l.bias.clone()).collect();
        let (gamma, beta) = match &w.params.norm {
            Some(n) => (zeros_like(&n.gamma), zeros_like(&n.beta)),
            None => (Vec::new(), Vec::new()),
        };
        Self {
            weight: zeros_like(&weights),
            bias: zeros_like(&biases),
            head_w: Tensor::zeros(w.params.head.weight.shape()),
            head_b: Tensor::zeros(w.params.head.bias.shape()),
            gamma,
            beta,
            grown: zeros_like_params(&w.grown),
            attentive: zeros_like_params(&w.attentive),
            selective: zeros_like_params(&w.selective),
        }
    }
}

/// Random streams a phase draws from.
pub struct PhaseRngs {
    pub init: SeededRng,
    pub gumbel: SeededRng,
    pub growth: SeededRng,
    pub shuffle: SeededRng,
}

pub struct PhaseOutcome {
    pub val_acc: f64,
    pub steps: u64,
    pub actions: Vec<SlotAction>,
}

fn sample_all(set: &[MaskParam], rng: &mut SeededRng, t: f64) -> Result<Vec<MaskSample>> {
    set.iter()
        .map(|m| m.sample(rng, t, DEFAULT_THRESHOLD))
        .collect()
}

/// Apply one grown-mask query: bits from `bits` for every non-FIXED slot.
fn grow_query(
    b: &mut BackboneState,
    bits: &[BinaryMask],
    grown: &[MaskParam],
    cap: f64,
    rng: &mut SeededRng,
) -> Result<Vec<SlotAction>> {
    let mut actions = Vec::new();
    for (l, layer) in b.layers.iter_mut().enumerate() {
        let q: Vec<Option<bool>> = layer
            .slots
            .iter()
            .map(|s| (!s.state.is_fixed()).then(|| bits[l].get(s.index)))
            .collect();
        actions.extend(query_and_transition(layer, &q, rng)?);
    }
    actions.extend(enforce_growth_cap(&mut b.layers, grown, cap)?);
    Ok(actions)
}

pub fn growth_ratio_now(b: &BackboneState) -> f64 {
    active_params(&b.layers) as f64 / full_params(&b.specs()) as f64
}

/// Train `work` on `data` with `flags`: `cfg.epochs.mask` epochs of mask
/// learning, a freeze, then `cfg.epochs.finetune` epochs under frozen masks.
#[allow(clippy::too_many_arguments)]
pub fn run_phase(
    cfg: &RunConfig,
    b: &mut BackboneState,
    work: &mut TaskWork,
    flags: PhaseFlags,
    data: &TaskData,
    rngs: &mut PhaseRngs,
    phase: &str,
    curves: &mut Vec<CurveRow>,
) -> Result<PhaseOutcome> {
    let sgd = Sgd::new(cfg.lr, cfg.momentum)?;
    let mask_sgd = Sgd::new(cfg.mask_lr, cfg.momentum)?;
    let n_grown_logits: usize = b.layers.iter().map(|l| l.spec.capacity).sum();
    let lambda_eff = cfg.lambda / n_grown_logits as f64;
    let mut vel = Velocity::new(b, work);
    let mut steps = 0u64;
    let mut actions = Vec::new();
    let mask_epochs = cfg.epochs.mask;
    let total = cfg.epochs.total();
    let n = data.train.len();
    let mut frozen = mask_epochs == 0;
    let mut frozen_a = work.frozen_attentive();
    let mut frozen_s = work.frozen_selective();
    if frozen && flags.grow {
        freeze_growth(cfg, b, work, &mut rngs.init, &mut actions)?;
    }

    for epoch in 0..total {
        if !frozen && epoch == mask_epochs {
            if flags.grow {
                freeze_growth(cfg, b, work, &mut rngs.init, &mut actions)?;
            }
            frozen_a = work.frozen_attentive();
            frozen_s = work.frozen_selective();
            frozen = true;
        }
        let temperature = cfg
            .temperature
            .at(epoch.min(mask_epochs.saturating_sub(1)), mask_epochs);
        let grown_sample = match (&work.grown, flags.grow && !frozen) {
            (Some(g), true) => {
                let s = sample_all(g, &mut rngs.growth, temperature)?;
                let bits: Vec<BinaryMask> = s.iter().map(|x| x.bits.clone()).collect();
                actions.extend(grow_query(b, &bits, g, cfg.growth_cap, &mut rngs.init)?);
                Some(s)
            }
            _ => None,
        };
        let upd = trainable(b, &flags);
        let targets = logit_targets(b);
        let mut order: Vec<usize> = (0..n).collect();
        rngs.shuffle.shuffle(&mut order);
        // attentive and selective bits are drawn once per epoch, like the
        // grown-mask query
        let a_sample = match (&work.attentive, flags.attentive && !frozen) {
            (Some(a), true) => Some(sample_all(a, &mut rngs.gumbel, temperature)?),
            _ => None,
        };
        let s_sample = match (&work.selective, flags.selective && !frozen) {
            (Some(s), true) => Some(sample_all(s, &mut rngs.gumbel, temperature)?),
            _ => None,
        };
        let a_bits: Option<Vec<BinaryMask>> = match &a_sample {
            Some(s) => Some(s.iter().map(|x| x.bits.clone()).collect()),
            None if flags.attentive => frozen_a.clone(),
            None => None,
        };
        let s_bits: Option<Vec<BinaryMask>> = match &s_sample {
            Some(s) => Some(s.iter().map(|x| x.bits.clone()).collect()),
            None if flags.selective => frozen_s.clone(),
            None => None,
        };
        let masks = build_masks(b, &flags, a_bits.as_deref(), s_bits.as_deref());
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = data.train.batch(idx)?;
            let cache = forward(b, &masks, &work.params, &x)?;
            let (loss, gl) = cross_entropy(&cache.logits, &y)?;
            let grads = backward(b, &masks, &work.params, &cache, &gl)?;
            loss_sum += loss * y.len() as f64;
            correct += predict(&cache.logits)
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();

            // logits first: they read the weights the forward pass used
            if !frozen {
                for (l, layer) in b.layers.iter().enumerate() {
                    let ia = b.input_active(l);
                    let cin = layer.spec.in_channels;
                    let cap = layer.spec.capacity;
                    let gk = grads.layers[l].kernel_mask.data();
                    let gc = grads.layers[l].channel_mask.data();
                    let (tg, ta, ts) = &targets[l];
                    if let (Some(sample), Some(gp)) = (&s_sample, work.selective.as_mut()) {
                        let up: Vec<f64> = (0..cap * cin)
                            .map(|k| if ia[k % cin] { gk[k] } else { 0.0 })
                            .collect();
                        let g = sample[l].logit_grad(&gp[l], &up);
                        sgd_step_masked(
                            &mut gp[l].logits,
                            &g,
                            &mut vel.selective[l],
                            mask_sgd,
                            Some(ts),
                        )?;
                    }
                    if let (Some(sample), Some(ap)) = (&a_sample, work.attentive.as_mut()) {
                        let up: Vec<f64> = (0..cap * cin)
                            .map(|k| {
                                let on = layer.slots[k / cin].state == SlotState::GrownTraining;
                                if on && ia[k % cin] {
                                    gk[k]
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let g = sample[l].logit_grad(&ap[l], &up);
                        sgd_step_masked(
                            &mut ap[l].logits,
                            &g,
                            &mut vel.attentive[l],
                            mask_sgd,
                            Some(ta),
                        )?;
                    }
                    if let (Some(sample), Some(gp)) = (&grown_sample, work.grown.as_mut()) {
                        let up: Vec<f64> = (0..cap)
                            .map(|o| {
                                let mut s = gc[o];
                                for i in 0..cin {
                                    let a = a_bits.as_ref().is_none_or(|a| a[l].get(o * cin + i));
                                    if a && ia[i] {
                                        s += gk[o * cin + i];
                                    }
                                }
                                s
                            })
                            .collect();
                        let mut g = sample[l].logit_grad(&gp[l], &up);
                        let (_, l0) = l0_penalty(&sample[l].bits, &gp[l], lambda_eff)?;
                        for (x, y) in g.data_mut().iter_mut().zip(l0.data()) {
                            *x += y;
                        }
                        sgd_step_masked(
                            &mut gp[l].logits,
                            &g,
                            &mut vel.grown[l],
                            mask_sgd,
                            Some(tg),
                        )?;
                    }
                }
            }
            for (l, layer) in b.layers.iter_mut().enumerate() {
                let (uw, ub) = &upd[l];
                sgd_step_masked(
                    &mut layer.weight,
                    &grads.layers[l].weight,
                    &mut vel.weight[l],
                    sgd,
                    Some(uw),
                )?;
                sgd_step_masked(
                    &mut layer.bias,
                    &grads.layers[l].bias,
                    &mut vel.bias[l],
                    sgd,
                    Some(ub),
                )?;
            }
            sgd_step(
                &mut work.params.head.weight,
                &grads.head_weight,
                &mut vel.head_w,
                sgd,
            )?;
            sgd_step(
                &mut work.params.head.bias,
                &grads.head_bias,
                &mut vel.head_b,
                sgd,
            )?;
            if let Some(np) = work.params.norm.as_mut() {
                for l in 0..np.gamma.len() {
                    if let (Some(gg), Some(gb)) = (&grads.layers[l].gamma, &grads.layers[l].beta) {
                        sgd_step(&mut np.gamma[l], gg, &mut vel.gamma[l], sgd)?;
                        sgd_step(&mut np.beta[l], gb, &mut vel.beta[l], sgd)?;
                    }
                }
            }
            steps += 1;
        }
        let fa = if flags.attentive {
            work.frozen_attentive()
        } else {
            None
        };
        let fs = if flags.selective {
            work.frozen_selective()
        } else {
            None
        };
        let eval_masks = build_masks(b, &flags, fa.as_deref(), fs.as_deref());
        let val_acc = evaluate_masks(b, &eval_masks, &work.params, &data.val)?;
        curves.push(CurveRow {
            task: work.task,
            phase: phase.to_string(),
            epoch,
            loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_acc,
            growth_ratio: growth_ratio_now(b),
            temperature: if epoch < mask_epochs {
                temperature
            } else {
                0.0
            },
        });
    }
    let fa = if flags.attentive {
        work.frozen_attentive()
    } else {
        None
    };
    let fs = if flags.selective {
        work.frozen_selective()
    } else {
        None
    };
    let masks = build_masks(b, &flags, fa.as_deref(), fs.as_deref());
    let val_acc = evaluate_masks(b, &masks, &work.params, &data.val)?;
    Ok(PhaseOutcome {
        val_acc,
        steps,
        actions,
    })
}

/// Deterministic growth decision: keep a non-FIXED slot iff its logit is
/// non-negative, then re-apply the cap.
fn freeze_growth(
    cfg: &RunConfig,
    b: &mut BackboneState,
    work: &TaskWork,
    rng: &mut SeededRng,
    actions: &mut Vec<SlotAction>,
) -> Result<()> {
    if let Some(g) = &work.grown {
        let bits: Vec<BinaryMask> = g.iter().map(|m| m.freeze()).collect();
        actions.extend(grow_query(b, &bits, g, cfg.growth_cap, rng)?);
    }
    Ok(())
}
