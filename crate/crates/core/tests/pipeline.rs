mod common;

use std::path::Path;

use common::{tiny, tiny_with};
use growcl::data::{write_idx, Dataset, TaskSequence};
use growcl::driver::{
    evaluate, evaluate_masks, forgetting_check, pick_and_reuse, run_mode, scratch_task,
    train_task1, transfer_accuracy, Ctx, Mode, PickOptions,
};
use growcl::growth::{KernelOwnership, SlotState};
use growcl::model::{BackboneState, LayerMasks, TaskParams};
use growcl::rng::SeededRng;
use growcl::runner::{load_tasks, write_run};
use growcl::snapshot::{backbone_from_bytes, TaskSnapshot};
use growcl::tensor::Tensor;
use growcl::Error;
use serde_json::json;

fn fixed_slots(b: &BackboneState, task: u32) -> usize {
    b.layers
        .iter()
        .flat_map(|l| &l.slots)
        .filter(|s| s.state == SlotState::Fixed(task))
        .count()
}

#[test]
fn grown_run_passes_every_boundary_check() {
    let cfg = tiny(3);
    let seq = load_tasks(&cfg).unwrap();
    let o = run_mode(&cfg, &seq, Mode::Grown).unwrap();
    assert_eq!(o.forgetting.len(), 1 + 2 + 3);
    assert!(o.forgetting.iter().all(|f| f.pass));
    assert_eq!(o.report.accuracy.len(), 3);
    assert_eq!(o.report.growth_ratio.len(), 3);
    assert!(o.report.growth_ratio.windows(2).all(|w| w[0] <= w[1]));
    assert!(o.report.growth_ratio.iter().all(|&r| r <= cfg.growth_cap));
    let mean = o.report.accuracy.iter().sum::<f64>() / 3.0;
    assert!((o.report.average - mean).abs() < 1e-12);
}

#[test]
fn planted_fault_is_flagged_for_the_owner() {
    let cfg = tiny(0);
    let seq = load_tasks(&cfg).unwrap();
    let o = run_mode(&cfg, &seq, Mode::Grown).unwrap();
    let mut b = o.backbones[0].clone();
    let owners: Vec<u32> = o.snapshots.iter().map(|s| s.task_id).collect();
    let digest = b.immutable_digest(&owners);
    // first layer-0 USED kernel: it sees raw pixels, so the probe logits move
    let layer = &b.layers[0];
    let kk = layer.spec.kernel * layer.spec.kernel;
    let (k, owner) = layer
        .kernels
        .iter()
        .enumerate()
        .find_map(|(k, own)| match own {
            KernelOwnership::Used(t) => Some((k, *t)),
            _ => None,
        })
        .expect("a used kernel");
    b.layers[0].weight.data_mut()[k * kk + kk / 2] += 1e-9;
    assert_ne!(b.immutable_digest(&owners), digest);
    let res = forgetting_check(&o.snapshots, &b);
    assert!(
        res.iter().any(|&(t, ok)| t == owner && !ok),
        "owner {owner} not flagged: {res:?}"
    );
}

#[test]
fn reloaded_snapshots_reproduce_accuracy() {
    let cfg = tiny(1);
    let seq = load_tasks(&cfg).unwrap();
    let o = run_mode(&cfg, &seq, Mode::Grown).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = write_run(tmp.path(), &cfg, Mode::Grown, &o).unwrap();
    drop(o);

    let path = dir.join("backbone.bin");
    let b = backbone_from_bytes(&std::fs::read(&path).unwrap(), &path).unwrap();
    let snaps: Vec<TaskSnapshot> = (1..=3)
        .map(|t| {
            let p = dir.join(format!("snapshots/task_{t:02}.snap"));
            TaskSnapshot::from_bytes(&std::fs::read(&p).unwrap(), &p).unwrap()
        })
        .collect();
    assert!(forgetting_check(&snaps, &b).iter().all(|(_, ok)| *ok));
    let manifest = growcl::runner::read_manifest(&dir).unwrap();
    for (task, want) in seq.tasks.iter().zip(&manifest.report.accuracy) {
        let got = evaluate(task.id, &b, &snaps, &task.test).unwrap();
        assert_eq!(got.to_bits(), want.to_bits(), "task {}", task.id);
    }
}

#[test]
fn forced_pick_equals_frozen_feature_transfer() {
    // no attentive mask and a fully grown first layer: every kernel of a
    // fixed slot reads an active input, so none is released
    let cfg = tiny_with(
        2,
        json!({"ablation": {"attentive": false, "selective": true, "retrain": true},
               "arch": {"image_size": 8, "layers": [
                   {"seed_width": 3, "capacity": 3}, {"seed_width": 2, "capacity": 6}]}}),
    );
    let seq = load_tasks(&cfg).unwrap();
    let mut ctx = Ctx::new(&cfg);
    let mut b = BackboneState::seed(&cfg.arch, &mut ctx.stream("init", "seed")).unwrap();
    train_task1(&mut ctx, &mut b, &seq.tasks[0]).unwrap();
    assert!(b
        .layers
        .iter()
        .all(|l| !l.kernels.contains(&KernelOwnership::Released)));
    for layer in &mut b.layers {
        layer.begin_task();
    }
    let oracle = transfer_accuracy(&ctx, &b, &seq.tasks[1]).unwrap();
    let opts = PickOptions {
        force_selective_ones: true,
    };
    let (_, out) = pick_and_reuse(&mut ctx, &mut b, &seq.tasks[1], opts).unwrap();
    assert_eq!(out.val_acc, oracle);
}

#[test]
fn skipped_expansion_adds_nothing() {
    for seed in 0..3 {
        let cfg = tiny(seed);
        let seq = load_tasks(&cfg).unwrap();
        let o = run_mode(&cfg, &seq, Mode::Grown).unwrap();
        let b = &o.backbones[0];
        let ratios = &o.report.growth_ratio;
        for g in &o.gates {
            assert_eq!(g.expanded, g.pick_val_acc < g.target);
            if !g.expanded {
                assert_eq!(fixed_slots(b, g.task), 0);
                let k = g.task as usize - 1;
                assert_eq!(ratios[k], ratios[k - 1]);
            }
        }
    }
}

#[test]
fn growth_happens_with_open_grown_logits() {
    let cfg = tiny_with(0, json!({"mask_init": {"grown": 3.0}, "lambda": 0.0}));
    let seq = load_tasks(&cfg).unwrap();
    let o = run_mode(&cfg, &seq, Mode::Grown).unwrap();
    let seeds: usize = cfg.arch.layers.iter().map(|l| l.seed_width).sum();
    assert!(fixed_slots(&o.backbones[0], 1) > seeds);
    assert!(o.report.growth_ratio.iter().all(|&r| r <= cfg.growth_cap));
    assert!(o.forgetting.iter().all(|f| f.pass));
}

#[test]
fn scratch_sizes_and_independence() {
    let cfg = tiny(4);
    let seq = load_tasks(&cfg).unwrap();
    let o = run_mode(&cfg, &seq, Mode::Scratch).unwrap();
    assert_eq!(o.report.size, ["1x", "2x", "3x"]);
    assert!(o.ledger.is_empty());

    let reversed = TaskSequence {
        tasks: seq.tasks.iter().rev().cloned().collect(),
    };
    let r = run_mode(&cfg, &reversed, Mode::Scratch).unwrap();
    let mut acc = r.report.accuracy.clone();
    acc.reverse();
    assert_eq!(acc, o.report.accuracy);

    for (task, want) in seq.tasks.iter().zip(&o.report.accuracy) {
        let single = scratch_task(&cfg, task).unwrap();
        let got = evaluate(task.id, &single.backbone, &[single.snapshot], &task.test).unwrap();
        assert_eq!(got, *want);
    }
}

#[test]
fn grow_only_has_no_selective_mask_and_keeps_old_tasks() {
    let cfg = tiny(5);
    let seq = load_tasks(&cfg).unwrap();
    let o = run_mode(&cfg, &seq, Mode::GrowOnly).unwrap();
    assert!(o.snapshots.iter().all(|s| s.selective.is_none()));
    assert!(o.forgetting.iter().all(|f| f.pass));
    assert!(forgetting_check(&o.snapshots, &o.backbones[0])
        .iter()
        .all(|(_, ok)| *ok));
}

#[test]
fn random_model_is_at_chance() {
    let cfg = tiny_with(
        0,
        json!({"data": {"synthetic": {"n_tasks": 1, "classes_per_task": 4, "samples_per_class": 60, "image_size": 8}}}),
    );
    let seq = load_tasks(&cfg).unwrap();
    let data = &seq.tasks[0].train;
    let k = 4;
    let models = 40;
    let mut total = 0.0;
    for i in 0..models {
        let mut rng = SeededRng::new(i).substream("random-model");
        let b = BackboneState::full(&cfg.arch, &mut rng).unwrap();
        let params = TaskParams::init(&cfg.arch, k, &mut rng);
        let masks: Vec<LayerMasks> = b
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| LayerMasks::ones(&layer.spec, l))
            .collect();
        total += evaluate_masks(&b, &masks, &params, data).unwrap();
    }
    let mean = total / models as f64;
    assert!(
        (mean - 1.0 / k as f64).abs() <= 0.05,
        "mean accuracy {mean}"
    );
}

#[test]
fn evaluation_contracts() {
    let cfg = tiny(6);
    let seq = load_tasks(&cfg).unwrap();
    let o = run_mode(&cfg, &seq, Mode::Grown).unwrap();
    let b = &o.backbones[0];
    let test = &seq.tasks[0].test;
    let a = evaluate(1, b, &o.snapshots, test).unwrap();
    assert_eq!(a, evaluate(1, b, &o.snapshots, test).unwrap());
    assert!(matches!(
        evaluate(9, b, &o.snapshots, test),
        Err(Error::MissingSnapshot(9))
    ));
    // an empty dataset cannot be built, so evaluation never divides by zero
    assert!(matches!(test.subset(&[]), Err(Error::Data(_))));
}

#[test]
fn separable_two_class_task_is_learned() {
    for seed in 0..5 {
        let cfg = tiny_with(
            seed,
            json!({"data": {"synthetic": {"n_tasks": 1, "classes_per_task": 2, "samples_per_class": 60, "image_size": 8, "difficulty": 0.2}},
                   "epochs": {"mask": 4, "finetune": 8}}),
        );
        let seq = load_tasks(&cfg).unwrap();
        let o = run_mode(&cfg, &seq, Mode::Grown).unwrap();
        assert!(
            o.report.accuracy[0] >= 0.95,
            "seed {seed}: {:?}",
            o.report.accuracy
        );
        assert!(o.snapshots[0].task_id == 1);
        assert!(o.backbones[0]
            .layers
            .iter()
            .flat_map(|l| &l.slots)
            .all(|s| matches!(
                s.state,
                SlotState::Fixed(1) | SlotState::Pruned | SlotState::Ungrown
            )));
    }
}

fn same_tree(a: &Path, b: &Path) {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let mut other: Vec<_> = std::fs::read_dir(b)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    other.sort();
    assert_eq!(names, other);
    for n in names {
        let (x, y) = (a.join(&n), b.join(&n));
        if x.is_dir() {
            same_tree(&x, &y);
        } else {
            assert_eq!(
                std::fs::read(&x).unwrap(),
                std::fs::read(&y).unwrap(),
                "{x:?}"
            );
        }
    }
}

#[test]
fn identical_runs_write_identical_directories() {
    let tmp = tempfile::tempdir().unwrap();
    for mode in [Mode::Grown, Mode::Scratch, Mode::GrowOnly] {
        let cfg = tiny(7);
        let run = |root: &Path| {
            let seq = load_tasks(&cfg).unwrap();
            let o = run_mode(&cfg, &seq, mode).unwrap();
            write_run(root, &cfg, mode, &o).unwrap()
        };
        let a = run(&tmp.path().join("a"));
        let b = run(&tmp.path().join("b"));
        same_tree(&a, &b);
    }
    let other = tiny(8);
    let seq = load_tasks(&other).unwrap();
    let o = run_mode(&other, &seq, Mode::Grown).unwrap();
    let c = write_run(&tmp.path().join("c"), &other, Mode::Grown, &o).unwrap();
    let a = tmp.path().join("a").join(c.file_name().unwrap());
    assert!(!a.exists(), "seed is part of the run directory name");
}

#[test]
fn idx_source_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = SeededRng::new(11);
    let classes = 4;
    let per = 30;
    let n = classes * per;
    let images = Tensor::from_fn(&[n, 1, 8, 8], |_| (rng.uniform() * 255.0).round() / 255.0);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let data = Dataset::new(images, labels, classes).unwrap();
    let (ip, lp, gp) = (
        tmp.path().join("img.idx"),
        tmp.path().join("lbl.idx"),
        tmp.path().join("groups.txt"),
    );
    write_idx(&data, &ip, &lp).unwrap();
    std::fs::write(&gp, "0 1\n2 3\n").unwrap();
    let cfg = tiny_with(
        0,
        json!({"data": {"idx": {"images": ip, "labels": lp, "groups": gp}}}),
    );
    let seq = load_tasks(&cfg).unwrap();
    assert_eq!(seq.len(), 2);
    assert_eq!(seq.tasks[1].source_classes, [2, 3]);
    let o = run_mode(&cfg, &seq, Mode::Grown).unwrap();
    assert!(o.forgetting.iter().all(|f| f.pass));
}

#[test]
fn sequential_and_parallel_runs_agree() {
    let cfg = tiny(9);
    let seq = load_tasks(&cfg).unwrap();
    growcl::par::set_parallel(false);
    let a = run_mode(&cfg, &seq, Mode::Grown).unwrap();
    growcl::par::set_parallel(true);
    let b = run_mode(&cfg, &seq, Mode::Grown).unwrap();
    assert_eq!(
        growcl::runner::run_artifacts(&a),
        growcl::runner::run_artifacts(&b)
    );
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = growcl::config::parse_config(&dir.join("default.json")).unwrap();
    assert_eq!(default, growcl::config::RunConfig::default());
    growcl::config::parse_config(&dir.join("quick.json")).unwrap();
}
