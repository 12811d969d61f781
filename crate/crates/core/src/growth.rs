//! Channel-slot bookkeeping for learnable growth.
//!
//! Every conv layer has a fixed number of output-channel slots (its full
//! capacity). A slot moves through
//!
//! ```text
//! UNGROWN --1--> GROWN_TRAINING --0--> DETACHED --1--> GROWN_TRAINING
//!                      |                   |
//!                  finalize            finalize
//!                      v                   v
//!                 FIXED(task)            PRUNED
//! ```
//!
//! Bits are only ever supplied for non-FIXED slots. Inside a FIXED slot each
//! `(out, in)` kernel is either USED by a task (immutable from then on) or
//! RELEASED (free for a later task to retrain and claim).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Granularity, MaskParam};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub type TaskId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotState {
    Ungrown,
    GrownTraining,
    Detached,
    Pruned,
    Fixed(TaskId),
}

impl SlotState {
    pub fn has_weights(self) -> bool {
        matches!(
            self,
            SlotState::GrownTraining | SlotState::Detached | SlotState::Fixed(_)
        )
    }

    /// Contributes to the forward pass and to the active parameter count.
    pub fn is_active(self) -> bool {
        matches!(self, SlotState::GrownTraining | SlotState::Fixed(_))
    }

    pub fn is_fixed(self) -> bool {
        matches!(self, SlotState::Fixed(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSlot {
    pub layer: usize,
    pub index: usize,
    pub state: SlotState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelOwnership {
    /// Slot is not FIXED yet.
    Unassigned,
    Used(TaskId),
    Released,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub capacity: usize,
    pub kernel: usize,
    pub seed_width: usize,
}

impl LayerSpec {
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Parameters owned by one output-channel slot (filter plus bias).
    pub fn slot_params(&self) -> u64 {
        (self.fan_in() + 1) as u64
    }

    pub fn full_params(&self) -> u64 {
        self.capacity as u64 * self.slot_params()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerState {
    pub index: usize,
    pub spec: LayerSpec,
    /// `[capacity, in_channels, k, k]`; rows of UNGROWN/PRUNED slots are zero.
    pub weight: Tensor,
    pub bias: Tensor,
    pub slots: Vec<ChannelSlot>,
    /// Row-major `[capacity, in_channels]`.
    pub kernels: Vec<KernelOwnership>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotAction {
    Grew { layer: usize, slot: usize },
    Detached { layer: usize, slot: usize },
    Regrew { layer: usize, slot: usize },
}

impl ConvLayerState {
    /// All slots UNGROWN, weights zero.
    pub fn empty(index: usize, spec: LayerSpec) -> Self {
        let k = spec.kernel;
        Self {
            index,
            spec,
            weight: Tensor::zeros(&[spec.capacity, spec.in_channels, k, k]),
            bias: Tensor::zeros(&[spec.capacity]),
            slots: (0..spec.capacity)
                .map(|i| ChannelSlot {
                    layer: index,
                    index: i,
                    state: SlotState::Ungrown,
                })
                .collect(),
            kernels: vec![KernelOwnership::Unassigned; spec.capacity * spec.in_channels],
        }
    }

    pub fn kernel(&self, out: usize, inp: usize) -> KernelOwnership {
        self.kernels[out * self.spec.in_channels + inp]
    }

    pub fn filter_len(&self) -> usize {
        self.spec.fan_in()
    }

    pub fn filter(&self, slot: usize) -> &[f64] {
        let n = self.filter_len();
        &self.weight.data()[slot * n..(slot + 1) * n]
    }

    fn set_filter(&mut self, slot: usize, values: &[f64]) {
        let n = self.filter_len();
        self.weight.data_mut()[slot * n..(slot + 1) * n].copy_from_slice(values);
    }

    pub fn active_channels(&self) -> usize {
        self.slots.iter().filter(|s| s.state.is_active()).count()
    }

    pub fn active_params(&self) -> u64 {
        self.active_channels() as u64 * self.spec.slot_params()
    }

    pub fn fixed_params(&self) -> u64 {
        self.slots.iter().filter(|s| s.state.is_fixed()).count() as u64 * self.spec.slot_params()
    }

    /// Grow `slot` in place with a fresh filter (used for the seed network).
    pub fn grow_slot(&mut self, slot: usize, rng: &mut SeededRng) -> Result<()> {
        if self.slots[slot].state != SlotState::Ungrown {
            return Err(Error::Contract {
                op: "grow_slot",
                msg: format!(
                    "slot {slot} of layer {} is {:?}",
                    self.index, self.slots[slot].state
                ),
            });
        }
        let f = grow_filter(self, rng)?;
        self.set_filter(slot, f.data());
        self.bias.data_mut()[slot] = 0.0;
        self.slots[slot].state = SlotState::GrownTraining;
        Ok(())
    }

    /// Reclaim capacity pruned by earlier tasks: PRUNED slots become UNGROWN.
    pub fn begin_task(&mut self) {
        for s in &mut self.slots {
            if s.state == SlotState::Pruned {
                s.state = SlotState::Ungrown;
            }
        }
    }
}

/// Fresh filter `[Cin, k, k]`, uniform in `±sqrt(6 / fan_in)`.
pub fn grow_filter(layer: &ConvLayerState, rng: &mut SeededRng) -> Result<Tensor> {
    if !layer.slots.iter().any(|s| s.state == SlotState::Ungrown) {
        return Err(Error::CapacityExhausted {
            layer: layer.index,
            capacity: layer.spec.capacity,
        });
    }
    let bound = init_bound(&layer.spec);
    let k = layer.spec.kernel;
    Ok(Tensor::from_fn(&[layer.spec.in_channels, k, k], |_| {
        rng.uniform_range(-bound, bound)
    }))
}

pub fn init_bound(spec: &LayerSpec) -> f64 {
    (6.0 / spec.fan_in() as f64).sqrt()
}

/// Apply one round of grown-mask bits to a layer's slots.
///
/// `bits[o]` must be `Some` for every non-FIXED slot and `None` for every
/// FIXED slot. The layer is left untouched if the bits violate that.
pub fn query_and_transition(
    layer: &mut ConvLayerState,
    bits: &[Option<bool>],
    rng: &mut SeededRng,
) -> Result<Vec<SlotAction>> {
    if bits.len() != layer.slots.len() {
        return Err(Error::shape(
            "query_and_transition",
            layer.slots.len(),
            bits.len(),
        ));
    }
    for (slot, bit) in layer.slots.iter().zip(bits) {
        match (slot.state, bit) {
            (SlotState::Fixed(t), Some(_)) => {
                return Err(Error::Contract {
                    op: "query_and_transition",
                    msg: format!(
                        "bit supplied for slot {} of layer {} which is FIXED({t})",
                        slot.index, layer.index
                    ),
                })
            }
            (s, None) if !s.is_fixed() => {
                return Err(Error::Contract {
                    op: "query_and_transition",
                    msg: format!(
                        "no bit for slot {} of layer {} ({s:?})",
                        slot.index, layer.index
                    ),
                })
            }
            _ => {}
        }
    }
    let mut actions = Vec::new();
    for o in 0..layer.slots.len() {
        let Some(bit) = bits[o] else { continue };
        let l = layer.index;
        match (layer.slots[o].state, bit) {
            (SlotState::Ungrown, true) => {
                let f = grow_filter(layer, rng)?;
                layer.set_filter(o, f.data());
                layer.bias.data_mut()[o] = 0.0;
                layer.slots[o].state = SlotState::GrownTraining;
                actions.push(SlotAction::Grew { layer: l, slot: o });
            }
            (SlotState::GrownTraining, false) => {
                layer.slots[o].state = SlotState::Detached;
                actions.push(SlotAction::Detached { layer: l, slot: o });
            }
            (SlotState::Detached, true) => {
                layer.slots[o].state = SlotState::GrownTraining;
                actions.push(SlotAction::Regrew { layer: l, slot: o });
            }
            _ => {}
        }
    }
    Ok(actions)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FinalizeSummary {
    pub fixed: usize,
    pub pruned: usize,
    pub used_kernels: usize,
    pub released_kernels: usize,
}

/// End-of-task transition: DETACHED slots are pruned (weights discarded),
/// GROWN_TRAINING slots become FIXED(task) and their kernels are split into
/// USED(task) / RELEASED by `attentive` (kernel granularity, bound to this
/// layer). Bits of slots that are not GROWN_TRAINING are ignored.
pub fn finalize_task(
    layer: &mut ConvLayerState,
    attentive: &BinaryMask,
    task: TaskId,
) -> Result<FinalizeSummary> {
    let cin = layer.spec.in_channels;
    if attentive.granularity != Granularity::Kernel
        || attentive.binding.out_channels != layer.spec.capacity
        || attentive.binding.in_channels != cin
    {
        return Err(Error::shape(
            "finalize_task",
            format!("kernel mask [{}, {cin}]", layer.spec.capacity),
            format!("{:?} {:?}", attentive.granularity, attentive.binding),
        ));
    }
    let mut summary = FinalizeSummary::default();
    for o in 0..layer.slots.len() {
        match layer.slots[o].state {
            SlotState::Detached => {
                layer.slots[o].state = SlotState::Pruned;
                let zeros = vec![0.0; layer.filter_len()];
                layer.set_filter(o, &zeros);
                layer.bias.data_mut()[o] = 0.0;
                summary.pruned += 1;
            }
            SlotState::GrownTraining => {
                layer.slots[o].state = SlotState::Fixed(task);
                summary.fixed += 1;
                for i in 0..cin {
                    let tag = if attentive.get(o * cin + i) {
                        summary.used_kernels += 1;
                        KernelOwnership::Used(task)
                    } else {
                        summary.released_kernels += 1;
                        KernelOwnership::Released
                    };
                    layer.kernels[o * cin + i] = tag;
                }
            }
            _ => {}
        }
    }
    Ok(summary)
}

/// Mark RELEASED kernels selected by `claim` as USED(task). Claiming anything
/// that is not RELEASED is a contract violation.
pub fn claim_released(layer: &mut ConvLayerState, claim: &[bool], task: TaskId) -> Result<usize> {
    if claim.len() != layer.kernels.len() {
        return Err(Error::shape(
            "claim_released",
            layer.kernels.len(),
            claim.len(),
        ));
    }
    let mut n = 0;
    for (k, &c) in layer.kernels.iter_mut().zip(claim) {
        if !c {
            continue;
        }
        if *k != KernelOwnership::Released {
            return Err(Error::Contract {
                op: "claim_released",
                msg: format!("kernel is {k:?}, not RELEASED"),
            });
        }
        *k = KernelOwnership::Used(task);
        n += 1;
    }
    Ok(n)
}

pub fn active_params(layers: &[ConvLayerState]) -> u64 {
    layers.iter().map(|l| l.active_params()).sum()
}

pub fn full_params(specs: &[LayerSpec]) -> u64 {
    specs.iter().map(|s| s.full_params()).sum()
}

fn within_cap(active: u64, full: u64, cap: f64) -> bool {
    active as f64 <= cap * full as f64
}

/// Detach GROWN_TRAINING slots, lowest grown-mask logit first (ties by layer
/// then slot index), until the active ratio is within `cap`. FIXED slots are
/// never touched. `grown_logits[l]` are the channel logits of layer `l`.
pub fn enforce_growth_cap(
    layers: &mut [ConvLayerState],
    grown_logits: &[MaskParam],
    cap: f64,
) -> Result<Vec<SlotAction>> {
    if !(cap > 0.0 && cap <= 1.0) {
        return Err(Error::invalid(
            "enforce_growth_cap",
            format!("cap must be in (0, 1], got {cap}"),
        ));
    }
    if grown_logits.len() != layers.len() {
        return Err(Error::shape(
            "enforce_growth_cap",
            layers.len(),
            grown_logits.len(),
        ));
    }
    let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
    let full = full_params(&specs);
    let mut active = active_params(layers);
    if within_cap(active, full, cap) {
        return Ok(Vec::new());
    }
    let fixed: u64 = layers.iter().map(|l| l.fixed_params()).sum();
    if !within_cap(fixed, full, cap) {
        return Err(Error::CapUnattainable {
            cap,
            fixed_ratio: fixed as f64 / full as f64,
        });
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        for s in &layer.slots {
            if s.state == SlotState::GrownTraining {
                candidates.push((grown_logits[l].logits.data()[s.index], l, s.index));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut actions = Vec::new();
    for (_, l, o) in candidates {
        if within_cap(active, full, cap) {
            break;
        }
        layers[l].slots[o].state = SlotState::Detached;
        active -= layers[l].spec.slot_params();
        actions.push(SlotAction::Detached { layer: l, slot: o });
    }
    Ok(actions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub task_id: TaskId,
    pub active_channels: Vec<usize>,
    pub layer_active_params: Vec<u64>,
    pub layer_full_params: Vec<u64>,
    pub active_params: u64,
    pub full_params: u64,
    pub growth_ratio: f64,
    /// Logical clock (optimizer steps taken so far in the run), so ledgers stay
    /// byte-reproducible.
    pub timestamp: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrowthLedger {
    pub cap: f64,
    pub rows: Vec<LedgerRow>,
}

impl GrowthLedger {
    pub fn new(cap: f64) -> Self {
        Self {
            cap,
            rows: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Record the state after `task` finalized. Rejects a shrinking or
    /// over-cap model.
    pub fn record(
        &mut self,
        task: TaskId,
        layers: &[ConvLayerState],
        timestamp: u64,
    ) -> Result<&LedgerRow> {
        let layer_active: Vec<u64> = layers.iter().map(|l| l.active_params()).collect();
        let layer_full: Vec<u64> = layers.iter().map(|l| l.spec.full_params()).collect();
        let active: u64 = layer_active.iter().sum();
        let full: u64 = layer_full.iter().sum();
        let row = LedgerRow {
            task_id: task,
            active_channels: layers.iter().map(|l| l.active_channels()).collect(),
            layer_active_params: layer_active,
            layer_full_params: layer_full,
            active_params: active,
            full_params: full,
            growth_ratio: active as f64 / full as f64,
            timestamp,
        };
        if let Some(prev) = self.rows.last() {
            if row.active_params < prev.active_params {
                return Err(Error::Invariant(format!(
                    "active parameters shrank from {} to {} at task {task}",
                    prev.active_params, row.active_params
                )));
            }
        }
        if !within_cap(active, full, self.cap) {
            return Err(Error::Invariant(format!(
                "growth ratio {:.6} exceeds cap {} at task {task}",
                row.growth_ratio, self.cap
            )));
        }
        self.rows.push(row);
        Ok(self.rows.last().expect("just pushed"))
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.growth_ratio).collect()
    }

    /// CSV with columns `task_id,layer,active_channels,active_params,growth_ratio`;
    /// one row per layer (ratio relative to that layer's capacity) plus a
    /// `total` row per task.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,layer,active_channels,active_params,growth_ratio\n");
        for r in &self.rows {
            for l in 0..r.active_channels.len() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.task_id,
                    l,
                    r.active_channels[l],
                    r.layer_active_params[l],
                    r.layer_active_params[l] as f64 / r.layer_full_params[l] as f64
                ));
            }
            out.push_str(&format!(
                "{},total,{},{},{}\n",
                r.task_id,
                r.active_channels.iter().sum::<usize>(),
                r.active_params,
                r.growth_ratio
            ));
        }
        out
    }
}

/// Active parameters over full-backbone parameters after the latest task.
pub fn growth_ratio(ledger: &GrowthLedger, backbone: &[LayerSpec]) -> Result<f64> {
    let last = ledger
        .rows
        .last()
        .ok_or_else(|| Error::invalid("growth_ratio", "ledger is empty"))?;
    Ok(last.active_params as f64 / full_params(backbone) as f64)
}

/// `0.3x`, `1.5x`, `2x`: two decimals with trailing zeros trimmed.
pub fn format_ratio(r: f64) -> String {
    let s = format!("{r:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{s}x")
}
