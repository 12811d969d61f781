//! Exhaustive check, on tiny 1x1-kernel layers, that letting the attentive
//! mask vary never yields a higher minimum loss than pinning it to all ones.
//!
//! A configuration is `(w, g, a)`: weights from a finite grid, one grown bit
//! per output channel, one attentive bit per kernel. The effective weight is
//! `w[o,i] * g[o] * a[o,i]`; the loss is the mean cross-entropy of the
//! layer's outputs (softmax for two outputs, logistic for one) plus
//! `lambda * sum(g)`. Both minima come out of one pass over the free space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::SeededRng;

pub const DEFAULT_BUDGET: u128 = 10_000_000;
/// Random instances use a grid without zero: with zero on the grid a
/// zeroed kernel is reachable through the weights alone and the two minima
/// always coincide.
pub const SWEEP_GRID: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];
/// Minimum share of sweep instances with a strictly lower free minimum.
pub const MIN_STRICT_FRACTION: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroInstance {
    pub out_channels: usize,
    pub in_channels: usize,
    pub grid: Vec<f64>,
    /// Row-major `[n, in_channels]`.
    pub xs: Vec<f64>,
    pub ys: Vec<usize>,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Config {
    /// Grid index per weight, row-major `[out, in]`.
    pub w: Vec<usize>,
    pub g: Vec<bool>,
    pub a: Vec<bool>,
}

impl MicroInstance {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("micro_instance", m));
        if !(1..=2).contains(&self.out_channels) || !(1..=2).contains(&self.in_channels) {
            return bad(format!(
                "layer {}x{} outside 1..=2",
                self.out_channels, self.in_channels
            ));
        }
        if self.grid.is_empty() {
            return bad("empty weight grid".into());
        }
        if self.ys.is_empty() || self.ys.len() > 8 {
            return bad(format!("{} points, need 1..=8", self.ys.len()));
        }
        if self.xs.len() != self.ys.len() * self.in_channels {
            return bad("xs length does not match points x in_channels".into());
        }
        if let Some(y) = self.ys.iter().find(|&&y| y > 1) {
            return bad(format!("label {y} outside {{0, 1}}"));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} < 0", self.lambda));
        }
        Ok(())
    }

    fn kernels(&self) -> usize {
        self.out_channels * self.in_channels
    }

    /// Size of the free space `(w, g, a)`.
    pub fn space(&self) -> u128 {
        let k = self.kernels() as u32;
        (self.grid.len() as u128).pow(k) * 2u128.pow(self.out_channels as u32) * 2u128.pow(k)
    }

    /// Decode a mixed-radix index: weights (most significant, first kernel
    /// first), then grown bits, then attentive bits. Index order is the
    /// lexicographic order of `(w, g, a)`.
    pub fn decode(&self, mut idx: u128) -> Config {
        let k = self.kernels();
        let mut a = vec![false; k];
        for j in (0..k).rev() {
            a[j] = idx % 2 == 1;
            idx /= 2;
        }
        let mut g = vec![false; self.out_channels];
        for j in (0..self.out_channels).rev() {
            g[j] = idx % 2 == 1;
            idx /= 2;
        }
        let base = self.grid.len() as u128;
        let mut w = vec![0; k];
        for j in (0..k).rev() {
            w[j] = (idx % base) as usize;
            idx /= base;
        }
        Config { w, g, a }
    }

    pub fn loss(&self, c: &Config) -> f64 {
        let (co, ci) = (self.out_channels, self.in_channels);
        let n = self.ys.len();
        let mut total = 0.0;
        for p in 0..n {
            let x = &self.xs[p * ci..(p + 1) * ci];
            let mut z = [0.0; 2];
            for o in 0..co {
                for i in 0..ci {
                    let k = o * ci + i;
                    if c.g[o] && c.a[k] {
                        z[o] += self.grid[c.w[k]] * x[i];
                    }
                }
            }
            let y = self.ys[p];
            total += if co == 2 {
                let m = z[0].max(z[1]);
                let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
                lse - z[y]
            } else {
                // -log sigmoid(z) for y = 1, -log sigmoid(-z) for y = 0
                let s = if y == 1 { z[0] } else { -z[0] };
                softplus(-s)
            };
        }
        total / n as f64 + self.lambda * c.g.iter().filter(|&&b| b).count() as f64
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinResult {
    pub loss: f64,
    pub index: u128,
    pub config: Config,
}

#[derive(Clone, Copy)]
struct Best {
    loss: f64,
    index: u128,
}

impl Best {
    const NONE: Best = Best {
        loss: f64::INFINITY,
        index: u128::MAX,
    };

    fn offer(&mut self, loss: f64, index: u128) {
        if loss < self.loss || (loss == self.loss && index < self.index) {
            *self = Best { loss, index };
        }
    }
}

/// Test hook: evaluate the free branch with the attentive mask pinned to
/// all ones (which makes the two minima coincide).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Fault {
    pub pin_attentive: bool,
}

/// One pass over the free space returning `(free minimum, constrained
/// minimum)`; ties go to the lowest configuration index.
pub fn enumerate_both(
    inst: &MicroInstance,
    budget: u128,
    fault: Fault,
) -> Result<(MinResult, MinResult)> {
    inst.validate()?;
    let total = inst.space();
    if total > budget {
        return Err(Error::BudgetExceeded {
            configs: total,
            budget,
        });
    }
    let chunks = 64u128.min(total) as usize;
    let per = total.div_ceil(chunks as u128);
    let parts = par::map_range(chunks, |c| {
        let (mut free, mut cons) = (Best::NONE, Best::NONE);
        let lo = c as u128 * per;
        let hi = (lo + per).min(total);
        for idx in lo..hi {
            let mut cfg = inst.decode(idx);
            let all_on = cfg.a.iter().all(|&b| b);
            if fault.pin_attentive {
                cfg.a.iter_mut().for_each(|b| *b = true);
            }
            let l = inst.loss(&cfg);
            free.offer(l, idx);
            if all_on {
                cons.offer(l, idx);
            }
        }
        (free, cons)
    });
    let (mut free, mut cons) = (Best::NONE, Best::NONE);
    for (f, c) in parts {
        free.offer(f.loss, f.index);
        cons.offer(c.loss, c.index);
    }
    let mk = |b: Best| MinResult {
        loss: b.loss,
        index: b.index,
        config: inst.decode(b.index),
    };
    Ok((mk(free), mk(cons)))
}

/// Minimum over the free space (`attentive_free`) or over the subspace with
/// the attentive mask fixed to ones.
pub fn enumerate_min_loss(inst: &MicroInstance, attentive_free: bool) -> Result<MinResult> {
    let (f, c) = enumerate_both(inst, DEFAULT_BUDGET, Fault::default())?;
    Ok(if attentive_free { f } else { c })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub min_free: f64,
    pub min_constrained: f64,
    pub pass: bool,
    pub strict: bool,
    /// The reported argmins re-evaluate to the reported minima.
    pub argmin_consistent: bool,
}

pub fn verify_prop1_with(inst: &MicroInstance, budget: u128, fault: Fault) -> Result<Verdict> {
    let (f, c) = enumerate_both(inst, budget, fault)?;
    let mut fc = f.config.clone();
    if fault.pin_attentive {
        fc.a.iter_mut().for_each(|b| *b = true);
    }
    Ok(Verdict {
        min_free: f.loss,
        min_constrained: c.loss,
        pass: f.loss <= c.loss,
        strict: f.loss < c.loss,
        argmin_consistent: inst.loss(&fc) == f.loss && inst.loss(&c.config) == c.loss,
    })
}

pub fn verify_prop1(inst: &MicroInstance) -> Result<Verdict> {
    verify_prop1_with(inst, DEFAULT_BUDGET, Fault::default())
}

/// Seeded random instance over [`SWEEP_GRID`]. Labels come from a random
/// linear teacher which, for two inputs, ignores one of them two times in
/// three; one label in ten is flipped.
pub fn random_instance(rng: &mut SeededRng) -> MicroInstance {
    let out_channels = 1 + rng.below(2);
    let in_channels = if rng.below(4) == 0 { 1 } else { 2 };
    let n = 5 + rng.below(4);
    let xs: Vec<f64> = (0..n * in_channels)
        .map(|_| (rng.below(9) as f64 - 4.0) / 4.0)
        .collect();
    let mut teacher: Vec<f64> = (0..in_channels)
        .map(|_| rng.uniform_range(-1.0, 1.0))
        .collect();
    if in_channels == 2 && rng.below(3) != 0 {
        teacher[rng.below(2)] = 0.0;
    }
    let ys = (0..n)
        .map(|p| {
            let z: f64 = (0..in_channels)
                .map(|i| teacher[i] * xs[p * in_channels + i])
                .sum();
            let y = usize::from(z > 0.0);
            if rng.below(10) == 0 {
                1 - y
            } else {
                y
            }
        })
        .collect();
    let lambda = [0.0, 0.01, 0.1][rng.below(3)];
    MicroInstance {
        out_channels,
        in_channels,
        grid: SWEEP_GRID.to_vec(),
        xs,
        ys,
        lambda,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub instance: usize,
    pub min_free: f64,
    pub min_constrained: f64,
    pub pass: bool,
    pub strict: bool,
    /// Set when the instance could not be enumerated (budget).
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub failures: usize,
    pub strict: usize,
    /// Too few strict inequalities: the free branch is probably not free.
    pub suspicious_equality: bool,
}

impl SweepReport {
    pub fn ok(&self) -> bool {
        self.failures == 0 && !self.suspicious_equality
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("instance_id,min_free,min_constrained,pass\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.instance, r.min_free, r.min_constrained, r.pass
            ));
        }
        s
    }
}

pub fn sweep(instances: usize, seed: u64, budget: u128, fault: Fault) -> Result<SweepReport> {
    if instances == 0 {
        return Err(Error::invalid("sweep", "need at least one instance"));
    }
    let root = SeededRng::new(seed).substream("prop1");
    let mut rows = Vec::with_capacity(instances);
    for id in 0..instances {
        let inst = random_instance(&mut root.substream(&format!("instance{id}")));
        rows.push(match verify_prop1_with(&inst, budget, fault) {
            Ok(v) => SweepRow {
                instance: id,
                min_free: v.min_free,
                min_constrained: v.min_constrained,
                pass: v.pass && v.argmin_consistent,
                strict: v.strict,
                error: None,
            },
            Err(e @ Error::BudgetExceeded { .. }) => SweepRow {
                instance: id,
                min_free: f64::NAN,
                min_constrained: f64::NAN,
                pass: false,
                strict: false,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        });
    }
    let failures = rows.iter().filter(|r| !r.pass).count();
    let strict = rows.iter().filter(|r| r.strict).count();
    Ok(SweepReport {
        suspicious_equality: (strict as f64) < MIN_STRICT_FRACTION * instances as f64,
        rows,
        failures,
        strict,
    })
}

/// Two inputs, one output; the label depends on the first input only, so
/// the best fit switches the second kernel off.
pub fn kernel_zeroing_instance() -> MicroInstance {
    MicroInstance {
        out_channels: 1,
        in_channels: 2,
        grid: SWEEP_GRID.to_vec(),
        xs: vec![1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0],
        ys: vec![1, 0, 1, 0],
        lambda: 0.0,
    }
}
