//! The growth method over a task sequence: sparse growth on the first task,
//! then pick-and-reuse and, when it misses the target, one expansion phase.

use crate::data::{TaskData, TaskSequence};
use crate::error::{Error, Result};
use crate::growth::{
    claim_released, finalize_task, GrowthLedger, KernelOwnership, SlotState, TaskId,
};
use crate::model::{forward, predict, BackboneState, LayerMasks, TaskParams};
use crate::snapshot::{FrozenMask, TaskSnapshot};
use crate::tensor::{cross_entropy, linear, linear_backward, sgd_step, Sgd, Tensor};

use super::train::{channel_params, kernel_params};
use super::{
    baseline::scratch_task, build_masks, check_boundary, evaluate, mean, probe_fingerprint,
    run_phase, Ctx, GateRecord, Mode, PhaseFlags, PhaseOutcome, RunOutcome, RunReport, TaskWork,
};

/// Test hooks for the pick-and-reuse phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PickOptions {
    /// Run without a selective mask, every USED kernel kept.
    pub force_selective_ones: bool,
}

fn init_params(ctx: &Ctx, task: TaskId, classes: usize) -> TaskParams {
    let mut rng = ctx.stream("init", &format!("task{task}/params"));
    TaskParams::init(&ctx.cfg.arch, classes, &mut rng)
}

fn has_fixed(b: &BackboneState) -> bool {
    b.layers
        .iter()
        .any(|l| l.slots.iter().any(|s| s.state.is_fixed()))
}

fn task1_flags(ctx: &Ctx) -> PhaseFlags {
    PhaseFlags {
        grow: true,
        attentive: ctx.cfg.ablation.attentive,
        selective: false,
        retrain: false,
        reuse_fixed: true,
    }
}

/// First task: grow from the seed network with grown and attentive masks
/// plus the L0 penalty, then finalize every surviving slot as FIXED.
pub fn train_task1(ctx: &mut Ctx, b: &mut BackboneState, data: &TaskData) -> Result<TaskSnapshot> {
    if has_fixed(b) {
        return Err(Error::Contract {
            op: "train_task1",
            msg: "backbone already holds finished tasks".into(),
        });
    }
    let cfg = ctx.cfg;
    let t = data.id;
    let mut work = TaskWork::new(t, init_params(ctx, t, data.classes()));
    let mut grown = channel_params(b, cfg.mask_init.grown);
    for (l, layer) in b.layers.iter().enumerate() {
        for s in &layer.slots {
            if s.state == SlotState::GrownTraining {
                grown[l].logits.data_mut()[s.index] = cfg.mask_init.seed;
            }
        }
    }
    work.grown = Some(grown);
    if cfg.ablation.attentive {
        work.attentive = Some(kernel_params(b, cfg.mask_init.attentive));
    }
    let flags = task1_flags(ctx);
    let mut rngs = ctx.phase_rngs(t, "grow");
    let out = run_phase(
        cfg,
        b,
        &mut work,
        flags,
        data,
        &mut rngs,
        "grow",
        &mut ctx.curves,
    )?;
    ctx.clock += out.steps;
    finalize_work(ctx, b, &work, &flags, data)
}

pub(crate) fn pick_flags(ctx: &Ctx, opts: PickOptions) -> PhaseFlags {
    PhaseFlags {
        grow: false,
        attentive: false,
        selective: ctx.cfg.ablation.selective && !opts.force_selective_ones,
        retrain: ctx.cfg.ablation.retrain,
        reuse_fixed: true,
    }
}

/// Learn a selective mask over the frozen weights and retrain released
/// kernels, with a fresh head. Returns the working state and the phase
/// result (validation accuracy under the frozen masks).
pub fn pick_and_reuse(
    ctx: &mut Ctx,
    b: &mut BackboneState,
    data: &TaskData,
    opts: PickOptions,
) -> Result<(TaskWork, PhaseOutcome)> {
    if !has_fixed(b) {
        return Err(Error::Contract {
            op: "pick_and_reuse",
            msg: "no finished task to reuse".into(),
        });
    }
    let cfg = ctx.cfg;
    let t = data.id;
    let flags = pick_flags(ctx, opts);
    let mut work = TaskWork::new(t, init_params(ctx, t, data.classes()));
    if flags.selective {
        work.selective = Some(kernel_params(b, cfg.mask_init.selective));
    }
    let mut rngs = ctx.phase_rngs(t, "pick");
    let out = run_phase(
        cfg,
        b,
        &mut work,
        flags,
        data,
        &mut rngs,
        "pick",
        &mut ctx.curves,
    )?;
    ctx.clock += out.steps;
    Ok((work, out))
}

pub(crate) fn expand_flags(ctx: &Ctx, work: &TaskWork) -> PhaseFlags {
    PhaseFlags {
        grow: true,
        attentive: ctx.cfg.ablation.attentive,
        selective: work.selective.is_some(),
        retrain: ctx.cfg.ablation.retrain,
        reuse_fixed: true,
    }
}

/// Continue from pick-and-reuse with new growth under grown and attentive
/// masks, keeping the selective mask and released-kernel training.
pub fn expand_task(
    ctx: &mut Ctx,
    b: &mut BackboneState,
    work: &mut TaskWork,
    data: &TaskData,
) -> Result<PhaseOutcome> {
    let cfg = ctx.cfg;
    work.grown = Some(channel_params(b, cfg.mask_init.grown));
    if cfg.ablation.attentive {
        work.attentive = Some(kernel_params(b, cfg.mask_init.attentive));
    }
    let flags = expand_flags(ctx, work);
    let mut rngs = ctx.phase_rngs(data.id, "expand");
    let out = run_phase(
        cfg,
        b,
        work,
        flags,
        data,
        &mut rngs,
        "expand",
        &mut ctx.curves,
    )?;
    ctx.clock += out.steps;
    Ok(out)
}

fn frozen_set(set: &Option<Vec<crate::mask::MaskParam>>) -> Option<Vec<FrozenMask>> {
    set.as_ref().map(|v| {
        v.iter()
            .map(|m| FrozenMask {
                param: m.clone(),
                bits: m.freeze(),
            })
            .collect()
    })
}

/// Close a task: resolve its inference masks, claim the released kernels it
/// trained, move slots to FIXED/PRUNED, and take the snapshot.
pub(crate) fn finalize_work(
    ctx: &Ctx,
    b: &mut BackboneState,
    work: &TaskWork,
    flags: &PhaseFlags,
    data: &TaskData,
) -> Result<TaskSnapshot> {
    let t = work.task;
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
    let masks: Vec<LayerMasks> = build_masks(b, flags, fa.as_deref(), fs.as_deref());
    for (l, layer) in b.layers.iter_mut().enumerate() {
        let cin = layer.spec.in_channels;
        let claim: Vec<bool> = (0..layer.kernels.len())
            .map(|k| {
                layer.slots[k / cin].state.is_fixed()
                    && layer.kernels[k] == KernelOwnership::Released
                    && masks[l].kernel.get(k)
            })
            .collect();
        claim_released(layer, &claim, t)?;
        finalize_task(layer, &masks[l].kernel, t)?;
    }
    let n_probe = ctx.cfg.probe_size.min(data.val.len());
    let rows: Vec<usize> = (0..n_probe).collect();
    let probe = data.val.images.select_rows(&rows)?;
    let mut snap = TaskSnapshot {
        task_id: t,
        kernel_masks: masks.iter().map(|m| m.kernel.clone()).collect(),
        channel_masks: masks.iter().map(|m| m.channel.clone()).collect(),
        selective: frozen_set(&work.selective),
        attentive: frozen_set(&work.attentive),
        grown: frozen_set(&work.grown),
        params: work.params.clone(),
        probe,
        fingerprint: [0; 32],
    };
    snap.fingerprint = probe_fingerprint(b, &snap)?;
    Ok(snap)
}

/// Oracle for pick-and-reuse without selective mask and without released
/// kernels: a linear head trained on the frozen features of the USED
/// kernels, with the same initialization, batches and epochs.
pub fn transfer_accuracy(ctx: &Ctx, b: &BackboneState, data: &TaskData) -> Result<f64> {
    if ctx.cfg.arch.norm_groups > 0 {
        return Err(Error::invalid(
            "transfer_accuracy",
            "needs a backbone without normalization",
        ));
    }
    let t = data.id;
    let mut params = init_params(ctx, t, data.classes());
    let masks: Vec<LayerMasks> = b
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let mut m = LayerMasks::ones(&layer.spec, l);
            let cin = layer.spec.in_channels;
            for o in 0..layer.spec.capacity {
                let fixed = layer.slots[o].state.is_fixed();
                m.channel.set(o, fixed);
                for i in 0..cin {
                    let used = matches!(layer.kernel(o, i), KernelOwnership::Used(_));
                    m.kernel.set(o * cin + i, fixed && used);
                }
            }
            m
        })
        .collect();
    let feats = |x: &Tensor| -> Result<Tensor> { Ok(forward(b, &masks, &params, x)?.features) };
    let train_f = feats(&data.train.images)?;
    let val_f = feats(&data.val.images)?;
    let sgd = Sgd::new(ctx.cfg.lr, ctx.cfg.momentum)?;
    let mut vw = Tensor::zeros(params.head.weight.shape());
    let mut vb = Tensor::zeros(params.head.bias.shape());
    let mut shuffle = ctx.phase_rngs(t, "pick").shuffle;
    let n = data.train.len();
    for _ in 0..ctx.cfg.epochs.total() {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle.shuffle(&mut order);
        for idx in order.chunks(ctx.cfg.batch_size) {
            let x = train_f.select_rows(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let logits = linear(&x, &params.head.weight, &params.head.bias)?;
            let (_, gl) = cross_entropy(&logits, &y)?;
            let g = linear_backward(&x, &params.head.weight, &gl)?;
            sgd_step(&mut params.head.weight, &g.weight, &mut vw, sgd)?;
            sgd_step(&mut params.head.bias, &g.bias, &mut vb, sgd)?;
        }
    }
    let logits = linear(&val_f, &params.head.weight, &params.head.bias)?;
    let correct = predict(&logits)
        .iter()
        .zip(&data.val.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / data.val.len() as f64)
}

pub(crate) fn finish_report(
    ctx: &Ctx,
    mode: Mode,
    seq: &TaskSequence,
    b: &BackboneState,
    snapshots: &[TaskSnapshot],
    ratios: Vec<f64>,
    size: Vec<String>,
) -> Result<RunReport> {
    let mut acc = Vec::with_capacity(seq.len());
    let mut val = Vec::with_capacity(seq.len());
    for task in &seq.tasks {
        acc.push(evaluate(task.id, b, snapshots, &task.test).map_err(|e| e.in_task(task.id))?);
        val.push(evaluate(task.id, b, snapshots, &task.val).map_err(|e| e.in_task(task.id))?);
    }
    Ok(RunReport {
        mode,
        seed: ctx.cfg.seed,
        config_digest: ctx.cfg.digest(),
        tasks: seq.tasks.iter().map(|t| t.id).collect(),
        average: mean(&acc),
        accuracy: acc,
        val_accuracy: val,
        growth_ratio: ratios,
        size,
    })
}

/// Full method over `seq`; the forgetting check runs at every task boundary
/// and any failure aborts the run.
pub fn run_grown(cfg: &crate::config::RunConfig, seq: &TaskSequence) -> Result<RunOutcome> {
    let mut ctx = Ctx::new(cfg);
    let mut b = BackboneState::seed(&cfg.arch, &mut ctx.stream("init", "seed"))?;
    let mut ledger = GrowthLedger::new(cfg.growth_cap);
    let mut snapshots = Vec::new();
    let mut gates = Vec::new();
    let mut forgetting = Vec::new();
    let mut done: Vec<TaskId> = Vec::new();
    for (k, task) in seq.tasks.iter().enumerate() {
        let t = task.id;
        let step =
            |ctx: &mut Ctx, b: &mut BackboneState| -> Result<(TaskSnapshot, Option<GateRecord>)> {
                let before = b.immutable_digest(&done);
                for layer in &mut b.layers {
                    layer.begin_task();
                }
                let res = if k == 0 {
                    (train_task1(ctx, b, task)?, None)
                } else {
                    let scratch = scratch_task(ctx.cfg, task)?;
                    let target = (scratch.val_acc - ctx.cfg.target_slack).max(0.0);
                    let (mut work, pick) = pick_and_reuse(ctx, b, task, PickOptions::default())?;
                    let expanded = pick.val_acc < target;
                    let (flags, final_acc) = if expanded {
                        let out = expand_task(ctx, b, &mut work, task)?;
                        (expand_flags(ctx, &work), out.val_acc)
                    } else {
                        (pick_flags(ctx, PickOptions::default()), pick.val_acc)
                    };
                    let snap = finalize_work(ctx, b, &work, &flags, task)?;
                    let gate = GateRecord {
                        task: t,
                        scratch_val_acc: scratch.val_acc,
                        target,
                        pick_val_acc: pick.val_acc,
                        expanded,
                        final_val_acc: final_acc,
                    };
                    (snap, Some(gate))
                };
                if b.immutable_digest(&done) != before {
                    return Err(Error::Invariant(format!(
                        "weights of finished tasks changed while training task {t}"
                    )));
                }
                Ok(res)
            };
        let (snap, gate) = step(&mut ctx, &mut b).map_err(|e| e.in_task(t))?;
        gates.extend(gate);
        ledger
            .record(t, &b.layers, ctx.clock)
            .map_err(|e| e.in_task(t))?;
        snapshots.push(snap);
        done.push(t);
        check_boundary(t, &snapshots, &b, &mut forgetting)?;
    }
    let ratios = ledger.ratios();
    let size = ratios
        .iter()
        .map(|&r| crate::growth::format_ratio(r))
        .collect();
    let report = finish_report(&ctx, Mode::Grown, seq, &b, &snapshots, ratios, size)?;
    Ok(RunOutcome {
        report,
        backbones: vec![b],
        snapshots,
        ledger,
        curves: ctx.curves,
        gates,
        forgetting,
    })
}
