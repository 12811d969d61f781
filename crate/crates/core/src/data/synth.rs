//! Synthetic split tasks: each class is an oriented stripe pattern or a blob
//! pattern, and samples are shifted, contrast-scaled, noisy copies of it.

use serde::{Deserialize, Serialize};

use super::{split_sizes, Dataset, TaskData, TaskSequence};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    #[serde(default = "d_tasks")]
    pub n_tasks: usize,
    #[serde(default = "d_classes")]
    pub classes_per_task: usize,
    #[serde(default = "d_samples")]
    pub samples_per_class: usize,
    #[serde(default = "d_size")]
    pub image_size: usize,
    /// In (0, 1]: scales pixel noise, shift range and contrast jitter.
    #[serde(default = "d_difficulty")]
    pub difficulty: f64,
}

fn d_tasks() -> usize {
    5
}
fn d_classes() -> usize {
    4
}
fn d_samples() -> usize {
    100
}
fn d_size() -> usize {
    16
}
fn d_difficulty() -> f64 {
    1.0
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_tasks: d_tasks(),
            classes_per_task: d_classes(),
            samples_per_class: d_samples(),
            image_size: d_size(),
            difficulty: d_difficulty(),
        }
    }
}

const NOISE: f64 = 0.45;
const MAX_SHIFT: f64 = 2.0;
const CONTRAST_JITTER: f64 = 0.4;

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(m));
        if self.n_tasks == 0 {
            return bad("n_tasks must be >= 1".into());
        }
        if self.classes_per_task < 2 {
            return bad(format!(
                "classes_per_task must be >= 2, got {}",
                self.classes_per_task
            ));
        }
        if self.samples_per_class < 10 {
            return bad(format!(
                "samples_per_class must be >= 10 so every split is non-empty, got {}",
                self.samples_per_class
            ));
        }
        if self.image_size < 4 {
            return bad(format!("image_size must be >= 4, got {}", self.image_size));
        }
        if !(self.difficulty > 0.0 && self.difficulty <= 1.0) {
            return bad(format!(
                "difficulty must be in (0, 1], got {}",
                self.difficulty
            ));
        }
        Ok(())
    }
}

enum Proto {
    Stripe {
        angle: f64,
        cycles: f64,
        phase: f64,
    },
    Blob {
        centers: Vec<(f64, f64)>,
        sigma: f64,
    },
}

impl Proto {
    fn value(&self, x: f64, y: f64, size: f64) -> f64 {
        match self {
            Proto::Stripe {
                angle,
                cycles,
                phase,
            } => {
                let u = x * angle.cos() + y * angle.sin();
                0.5 + 0.5 * (2.0 * std::f64::consts::PI * cycles * u / size + phase).sin()
            }
            Proto::Blob { centers, sigma } => centers
                .iter()
                .map(|(cx, cy)| {
                    (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
                })
                .fold(0.0, f64::max),
        }
    }
}

fn prototypes(k: usize, size: f64, rng: &mut SeededRng) -> Vec<Proto> {
    // Stripes spread their orientations over a half turn so no two classes
    // of a task share a direction; blobs get independent random centres.
    let flip = rng.below(2);
    let n_stripes = (0..k)
        .filter(|j| (j + flip).is_multiple_of(2))
        .count()
        .max(1);
    let mut s = 0;
    (0..k)
        .map(|j| {
            if (j + flip).is_multiple_of(2) {
                let angle = std::f64::consts::PI * (s as f64 + rng.uniform_range(0.0, 0.5))
                    / n_stripes as f64;
                s += 1;
                Proto::Stripe {
                    angle,
                    cycles: rng.uniform_range(1.5, 3.5),
                    phase: rng.uniform_range(0.0, 2.0 * std::f64::consts::PI),
                }
            } else {
                let n = 1 + rng.below(2);
                Proto::Blob {
                    centers: (0..n)
                        .map(|_| {
                            (
                                rng.uniform_range(0.2, 0.8) * size,
                                rng.uniform_range(0.2, 0.8) * size,
                            )
                        })
                        .collect(),
                    sigma: rng.uniform_range(0.1, 0.2) * size,
                }
            }
        })
        .collect()
}

fn render(p: &Proto, size: usize, d: f64, rng: &mut SeededRng, out: &mut Vec<f64>) {
    let max_shift = (MAX_SHIFT * d).round() as i64;
    let span = (2 * max_shift + 1) as usize;
    let dx = rng.below(span) as i64 - max_shift;
    let dy = rng.below(span) as i64 - max_shift;
    let contrast = 1.0 - CONTRAST_JITTER * d * rng.uniform();
    let sz = size as f64;
    for y in 0..size {
        for x in 0..size {
            let v = p.value((x as i64 - dx) as f64, (y as i64 - dy) as f64, sz);
            let v = contrast * v + NOISE * d * rng.normal();
            out.push(v.clamp(0.0, 1.0));
        }
    }
}

/// Generate `n_tasks` disjoint tasks; every class gets exactly
/// `samples_per_class` samples split 80/10/10.
pub fn synth_tasks(rng: &mut SeededRng, p: &SynthParams) -> Result<TaskSequence> {
    p.validate()?;
    let (ntr, nv, nte) = split_sizes(p.samples_per_class);
    let k = p.classes_per_task;
    let size = p.image_size;
    let mut tasks = Vec::with_capacity(p.n_tasks);
    for t in 0..p.n_tasks {
        let mut trng = rng.substream(&format!("synth/task{}", t + 1));
        let protos = prototypes(k, size as f64, &mut trng);
        let mut splits: [(Vec<f64>, Vec<usize>); 3] = Default::default();
        // round-robin over classes so every split interleaves labels
        for i in 0..p.samples_per_class {
            let part = if i < ntr {
                0
            } else if i < ntr + nv {
                1
            } else {
                2
            };
            for (c, proto) in protos.iter().enumerate() {
                render(proto, size, p.difficulty, &mut trng, &mut splits[part].0);
                splits[part].1.push(c);
            }
        }
        let make = |(px, ys): (Vec<f64>, Vec<usize>)| -> Result<Dataset> {
            let n = ys.len();
            Dataset::new(Tensor::new(&[n, 1, size, size], px)?, ys, k)
        };
        let [tr, va, te] = splits;
        debug_assert_eq!(te.1.len(), nte * k);
        tasks.push(TaskData {
            id: t as u32 + 1,
            source_classes: (t * k..(t + 1) * k).collect(),
            train: make(tr)?,
            val: make(va)?,
            test: make(te)?,
        });
    }
    Ok(TaskSequence { tasks })
}
