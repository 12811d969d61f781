//! Continual-learning driver: the growth method over a task sequence, the
//! scratch and grow-only baselines, evaluation and the forgetting check.

mod baseline;
mod grown;
mod train;

pub use baseline::{baseline_grow_only, baseline_scratch, scratch_task, ScratchResult};
pub use grown::{
    expand_task, pick_and_reuse, run_grown, train_task1, transfer_accuracy, PickOptions,
};
pub use train::{build_masks, run_phase, PhaseFlags, PhaseOutcome, PhaseRngs, TaskWork};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, TaskSequence};
use crate::error::{Error, Result};
use crate::growth::{GrowthLedger, TaskId};
use crate::model::{fingerprint, forward, predict, BackboneState, LayerMasks, TaskParams};
use crate::par;
use crate::rng::SeededRng;
use crate::snapshot::TaskSnapshot;

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Mode {
    Grown,
    Scratch,
    GrowOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Grown => "grown",
            Mode::Scratch => "scratch",
            Mode::GrowOnly => "grow_only",
        }
    }
}

/// One row of the per-epoch training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub task: TaskId,
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub growth_ratio: f64,
    /// 0 once the masks are frozen.
    pub temperature: f64,
}

/// Outcome of the target-accuracy gate for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub task: TaskId,
    pub scratch_val_acc: f64,
    pub target: f64,
    pub pick_val_acc: f64,
    pub expanded: bool,
    pub final_val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRecord {
    /// The task that had just finished when the check ran.
    pub boundary: TaskId,
    pub task: TaskId,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub config_digest: String,
    pub tasks: Vec<TaskId>,
    /// Test accuracy per task, evaluated after the last task.
    pub accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub growth_ratio: Vec<f64>,
    pub size: Vec<String>,
    pub average: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    /// One shared backbone, or one per task for the scratch baseline.
    pub backbones: Vec<BackboneState>,
    pub snapshots: Vec<TaskSnapshot>,
    pub ledger: GrowthLedger,
    pub curves: Vec<CurveRow>,
    pub gates: Vec<GateRecord>,
    pub forgetting: Vec<ForgettingRecord>,
}

/// Shared run state: the root random stream, a logical clock (optimizer
/// steps) and the collected curves.
pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub root: SeededRng,
    pub clock: u64,
    pub curves: Vec<CurveRow>,
}

impl<'a> Ctx<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        Self {
            cfg,
            root: SeededRng::new(cfg.seed),
            clock: 0,
            curves: Vec::new(),
        }
    }

    pub fn stream(&self, kind: &str, name: &str) -> SeededRng {
        self.root.substream(kind).substream(name)
    }

    pub fn phase_rngs(&self, task: TaskId, phase: &str) -> PhaseRngs {
        let key = format!("task{task}/{phase}");
        PhaseRngs {
            init: self.stream("init", &key),
            gumbel: self.stream("gumbel", &key),
            growth: self.stream("growth", &key),
            shuffle: self.stream("data", &format!("shuffle/{key}")),
        }
    }
}

/// Accuracy of `params` under `masks` on `data`; no sampling involved.
pub fn evaluate_masks(
    b: &BackboneState,
    masks: &[LayerMasks],
    params: &TaskParams,
    data: &Dataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let n = data.len();
    let mut correct = 0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk)?;
        let c = forward(b, masks, params, &x)?;
        correct += predict(&c.logits)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(correct as f64 / n as f64)
}

/// Accuracy of a finished task, using only its snapshot and the backbone.
pub fn evaluate(
    task: TaskId,
    b: &BackboneState,
    snapshots: &[TaskSnapshot],
    data: &Dataset,
) -> Result<f64> {
    let s = snapshots
        .iter()
        .find(|s| s.task_id == task)
        .ok_or(Error::MissingSnapshot(task))?;
    evaluate_masks(b, &s.masks(), &s.params, data)
}

pub fn probe_fingerprint(b: &BackboneState, s: &TaskSnapshot) -> Result<[u8; 32]> {
    let c = forward(b, &s.masks(), &s.params, &s.probe)?;
    Ok(fingerprint(&c.logits))
}

/// Recompute every snapshot's probe logits and compare them bitwise with the
/// stored fingerprint.
pub fn forgetting_check(snapshots: &[TaskSnapshot], b: &BackboneState) -> Vec<(TaskId, bool)> {
    par::map_range(snapshots.len(), |i| {
        let s = &snapshots[i];
        let ok = probe_fingerprint(b, s).is_ok_and(|f| f == s.fingerprint);
        (s.task_id, ok)
    })
}

pub(crate) fn check_boundary(
    boundary: TaskId,
    snapshots: &[TaskSnapshot],
    b: &BackboneState,
    log: &mut Vec<ForgettingRecord>,
) -> Result<()> {
    let res = forgetting_check(snapshots, b);
    for &(task, pass) in &res {
        log.push(ForgettingRecord {
            boundary,
            task,
            pass,
        });
    }
    if let Some((t, _)) = res.iter().find(|(_, p)| !p) {
        return Err(Error::Invariant(format!(
            "forgetting check failed for task {t} after task {boundary}"
        )));
    }
    Ok(())
}

pub fn run_mode(cfg: &RunConfig, seq: &TaskSequence, mode: Mode) -> Result<RunOutcome> {
    if seq.is_empty() {
        return Err(Error::Data("task sequence is empty".into()));
    }
    match mode {
        Mode::Grown => run_grown(cfg, seq),
        Mode::Scratch => baseline_scratch(cfg, seq),
        Mode::GrowOnly => baseline_grow_only(cfg, seq),
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_match_serde() {
        for m in [Mode::Grown, Mode::Scratch, Mode::GrowOnly] {
            let s = serde_json::to_string(&m).unwrap();
            assert_eq!(s, format!("\"{}\"", m.name()));
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let cfg = RunConfig::default();
        let seq = TaskSequence { tasks: vec![] };
        for m in [Mode::Grown, Mode::Scratch, Mode::GrowOnly] {
            assert!(matches!(run_mode(&cfg, &seq, m), Err(Error::Data(_))));
        }
    }

    #[test]
    fn phase_streams_are_keyed_by_task_and_phase() {
        let cfg = RunConfig::default();
        let ctx = Ctx::new(&cfg);
        let mut a = ctx.phase_rngs(2, "pick");
        let mut b = ctx.phase_rngs(2, "pick");
        let mut c = ctx.phase_rngs(3, "pick");
        let mut d = ctx.phase_rngs(2, "expand");
        let x = a.gumbel.next_u64();
        assert_eq!(x, b.gumbel.next_u64());
        assert_ne!(x, c.gumbel.next_u64());
        assert_ne!(x, d.gumbel.next_u64());
        assert_ne!(a.shuffle.next_u64(), a.init.next_u64());
    }

    #[test]
    fn mean_of_nothing_is_zero() {
        assert_eq!(mean(&[]), 0.0);
        assert_eq!(mean(&[0.25, 0.75]), 0.5);
    }
}
