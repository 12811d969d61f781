//! Baselines: an independent full-capacity model per task, and growth
//! without attentive/selective masks or released-kernel retraining.

use crate::config::RunConfig;
use crate::data::{TaskData, TaskSequence};
use crate::error::{Error, Result};
use crate::growth::{format_ratio, GrowthLedger, SlotState, TaskId};
use crate::model::{BackboneState, TaskParams};

use super::grown::{finalize_work, finish_report};
use super::train::channel_params;
use super::{
    check_boundary, evaluate, mean, run_phase, Ctx, Mode, PhaseFlags, RunOutcome, RunReport,
    TaskWork,
};
use crate::snapshot::TaskSnapshot;

const SCRATCH_FLAGS: PhaseFlags = PhaseFlags {
    grow: false,
    attentive: false,
    selective: false,
    retrain: false,
    reuse_fixed: false,
};

pub struct ScratchResult {
    pub val_acc: f64,
    pub backbone: BackboneState,
    pub snapshot: TaskSnapshot,
    pub curves: Vec<super::CurveRow>,
    pub steps: u64,
}

/// Train a full-capacity model on one task. Random streams are keyed by the
/// task id only, so the result does not depend on the other tasks.
pub fn scratch_task(cfg: &RunConfig, data: &TaskData) -> Result<ScratchResult> {
    let mut ctx = Ctx::new(cfg);
    ctx.root = ctx.root.substream("scratch");
    let t = data.id;
    let mut init = ctx.stream("init", &format!("task{t}"));
    let mut b = BackboneState::full(&cfg.arch, &mut init)?;
    let params = TaskParams::init(&cfg.arch, data.classes(), &mut init);
    let mut work = TaskWork::new(t, params);
    let mut rngs = ctx.phase_rngs(t, "scratch");
    let out = run_phase(
        cfg,
        &mut b,
        &mut work,
        SCRATCH_FLAGS,
        data,
        &mut rngs,
        "scratch",
        &mut ctx.curves,
    )?;
    ctx.clock += out.steps;
    let snapshot = finalize_work(&ctx, &mut b, &work, &SCRATCH_FLAGS, data)?;
    Ok(ScratchResult {
        val_acc: out.val_acc,
        backbone: b,
        snapshot,
        curves: ctx.curves,
        steps: ctx.clock,
    })
}

pub fn baseline_scratch(cfg: &RunConfig, seq: &TaskSequence) -> Result<RunOutcome> {
    let mut backbones = Vec::with_capacity(seq.len());
    let mut snapshots = Vec::with_capacity(seq.len());
    let mut curves = Vec::new();
    let mut acc = Vec::with_capacity(seq.len());
    let mut val = Vec::with_capacity(seq.len());
    for task in &seq.tasks {
        let r = scratch_task(cfg, task).map_err(|e| e.in_task(task.id))?;
        let one = std::slice::from_ref(&r.snapshot);
        acc.push(evaluate(task.id, &r.backbone, one, &task.test)?);
        val.push(evaluate(task.id, &r.backbone, one, &task.val)?);
        curves.extend(r.curves);
        backbones.push(r.backbone);
        snapshots.push(r.snapshot);
    }
    let k = seq.len();
    let report = RunReport {
        mode: Mode::Scratch,
        seed: cfg.seed,
        config_digest: cfg.digest(),
        tasks: seq.tasks.iter().map(|t| t.id).collect(),
        average: mean(&acc),
        accuracy: acc,
        val_accuracy: val,
        growth_ratio: (1..=k).map(|i| i as f64).collect(),
        size: (1..=k).map(|i| format_ratio(i as f64)).collect(),
    };
    Ok(RunOutcome {
        report,
        backbones,
        snapshots,
        ledger: GrowthLedger::new(1.0),
        curves,
        gates: Vec::new(),
        forgetting: Vec::new(),
    })
}

const GROW_ONLY_FLAGS: PhaseFlags = PhaseFlags {
    grow: true,
    attentive: false,
    selective: false,
    retrain: false,
    reuse_fixed: true,
};

/// Every task grows new channels on top of the frozen backbone; old USED
/// kernels are reused as they are.
pub fn baseline_grow_only(cfg: &RunConfig, seq: &TaskSequence) -> Result<RunOutcome> {
    let mut ctx = Ctx::new(cfg);
    let mut b = BackboneState::seed(&cfg.arch, &mut ctx.stream("init", "seed"))?;
    let mut ledger = GrowthLedger::new(cfg.growth_cap);
    let mut snapshots = Vec::new();
    let mut forgetting = Vec::new();
    let mut done: Vec<TaskId> = Vec::new();
    for task in &seq.tasks {
        let t = task.id;
        let step = |ctx: &mut Ctx, b: &mut BackboneState| -> Result<TaskSnapshot> {
            let before = b.immutable_digest(&done);
            for layer in &mut b.layers {
                layer.begin_task();
            }
            let mut init = ctx.stream("init", &format!("task{t}/params"));
            let mut work = TaskWork::new(t, TaskParams::init(&cfg.arch, task.classes(), &mut init));
            let mut grown = channel_params(b, cfg.mask_init.grown);
            for (l, layer) in b.layers.iter().enumerate() {
                for s in &layer.slots {
                    if s.state == SlotState::GrownTraining {
                        grown[l].logits.data_mut()[s.index] = cfg.mask_init.seed;
                    }
                }
            }
            work.grown = Some(grown);
            let mut rngs = ctx.phase_rngs(t, "grow");
            let out = run_phase(
                cfg,
                b,
                &mut work,
                GROW_ONLY_FLAGS,
                task,
                &mut rngs,
                "grow",
                &mut ctx.curves,
            )?;
            ctx.clock += out.steps;
            let snap = finalize_work(ctx, b, &work, &GROW_ONLY_FLAGS, task)?;
            if b.immutable_digest(&done) != before {
                return Err(Error::Invariant(format!(
                    "weights of finished tasks changed while training task {t}"
                )));
            }
            Ok(snap)
        };
        let snap = step(&mut ctx, &mut b).map_err(|e| e.in_task(t))?;
        ledger
            .record(t, &b.layers, ctx.clock)
            .map_err(|e| e.in_task(t))?;
        snapshots.push(snap);
        done.push(t);
        check_boundary(t, &snapshots, &b, &mut forgetting)?;
    }
    let ratios = ledger.ratios();
    let size = ratios.iter().map(|&r| format_ratio(r)).collect();
    let report = finish_report(&ctx, Mode::GrowOnly, seq, &b, &snapshots, ratios, size)?;
    Ok(RunOutcome {
        report,
        backbones: vec![b],
        snapshots,
        ledger,
        curves: ctx.curves,
        gates: Vec::new(),
        forgetting,
    })
}
