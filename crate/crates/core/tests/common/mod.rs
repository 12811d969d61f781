#![allow(dead_code)]

use growcl::config::{parse_config_str, RunConfig};

/// Small enough for a full grown run in a second or two.
pub const TINY: &str = r#"{
    "arch": {
        "image_size": 8,
        "layers": [
            {"seed_width": 2, "capacity": 4},
            {"seed_width": 2, "capacity": 6}
        ]
    },
    "data": {"synthetic": {"n_tasks": 3, "classes_per_task": 2, "samples_per_class": 24, "image_size": 8}},
    "epochs": {"mask": 2, "finetune": 2},
    "probe_size": 16
}"#;

pub fn tiny(seed: u64) -> RunConfig {
    let mut cfg = parse_config_str(TINY).expect("tiny config parses");
    cfg.seed = seed;
    cfg
}

/// Same as [`tiny`] with `patch` merged into the top-level object.
pub fn tiny_with(seed: u64, patch: serde_json::Value) -> RunConfig {
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    for (k, x) in patch.as_object().expect("patch is an object") {
        v[k] = x.clone();
    }
    let mut cfg = parse_config_str(&v.to_string()).expect("patched config parses");
    cfg.seed = seed;
    cfg
}
