//! Per-task snapshots and the binary codecs for snapshots and the shared
//! backbone. All numbers are little-endian; every tensor carries its shape.

use std::path::Path;

use crate::error::{Error, Result};
use crate::growth::{ConvLayerState, KernelOwnership, LayerSpec, SlotState, TaskId};
use crate::mask::{BinaryMask, Binding, Granularity, MaskParam};
use crate::model::{ArchSpec, BackboneState, Head, LayerCfg, LayerMasks, NormParams, TaskParams};
use crate::tensor::Tensor;

const SNAP_MAGIC: &[u8; 8] = b"GRWSNAP1";
const BONE_MAGIC: &[u8; 8] = b"GRWBONE1";

/// Learned logits of a mask together with the bits frozen from them.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenMask {
    pub param: MaskParam,
    pub bits: BinaryMask,
}

/// Everything needed to re-run one finished task's inference on the shared
/// backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSnapshot {
    pub task_id: TaskId,
    /// Resolved per-layer kernel masks used at inference.
    pub kernel_masks: Vec<BinaryMask>,
    /// Per-layer channel masks used at inference.
    pub channel_masks: Vec<BinaryMask>,
    pub selective: Option<Vec<FrozenMask>>,
    pub attentive: Option<Vec<FrozenMask>>,
    pub grown: Option<Vec<FrozenMask>>,
    pub params: TaskParams,
    pub probe: Tensor,
    pub fingerprint: [u8; 32],
}

impl TaskSnapshot {
    pub fn masks(&self) -> Vec<LayerMasks> {
        self.kernel_masks
            .iter()
            .zip(&self.channel_masks)
            .map(|(k, c)| LayerMasks {
                kernel: k.clone(),
                channel: c.clone(),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(SNAP_MAGIC);
        w.u32(self.task_id);
        w.u32(self.kernel_masks.len() as u32);
        for (k, c) in self.kernel_masks.iter().zip(&self.channel_masks) {
            w.binary_mask(k);
            w.binary_mask(c);
        }
        for set in [&self.selective, &self.attentive, &self.grown] {
            match set {
                None => w.u8(0),
                Some(v) => {
                    w.u8(1);
                    w.u32(v.len() as u32);
                    for f in v {
                        w.mask_param(&f.param);
                        w.binary_mask(&f.bits);
                    }
                }
            }
        }
        w.tensor(&self.params.head.weight);
        w.tensor(&self.params.head.bias);
        match &self.params.norm {
            None => w.u8(0),
            Some(n) => {
                w.u8(1);
                w.u32(n.gamma.len() as u32);
                for (g, b) in n.gamma.iter().zip(&n.beta) {
                    w.tensor(g);
                    w.tensor(b);
                }
            }
        }
        w.tensor(&self.probe);
        w.bytes(&self.fingerprint);
        w.0
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(SNAP_MAGIC)?;
        let task_id = r.u32()?;
        let n = r.u32()? as usize;
        let mut kernel_masks = Vec::with_capacity(n);
        let mut channel_masks = Vec::with_capacity(n);
        for _ in 0..n {
            kernel_masks.push(r.binary_mask()?);
            channel_masks.push(r.binary_mask()?);
        }
        let mut sets = Vec::new();
        for _ in 0..3 {
            sets.push(match r.u8()? {
                0 => None,
                1 => {
                    let m = r.u32()? as usize;
                    let mut v = Vec::with_capacity(m);
                    for _ in 0..m {
                        let param = r.mask_param()?;
                        let bits = r.binary_mask()?;
                        v.push(FrozenMask { param, bits });
                    }
                    Some(v)
                }
                t => return Err(r.err(format!("bad option flag {t}"))),
            });
        }
        let grown = sets.pop().flatten();
        let attentive = sets.pop().flatten();
        let selective = sets.pop().flatten();
        let head = Head {
            weight: r.tensor()?,
            bias: r.tensor()?,
        };
        let norm = match r.u8()? {
            0 => None,
            1 => {
                let m = r.u32()? as usize;
                let mut gamma = Vec::with_capacity(m);
                let mut beta = Vec::with_capacity(m);
                for _ in 0..m {
                    gamma.push(r.tensor()?);
                    beta.push(r.tensor()?);
                }
                Some(NormParams { gamma, beta })
            }
            t => return Err(r.err(format!("bad option flag {t}"))),
        };
        let probe = r.tensor()?;
        let mut fingerprint = [0u8; 32];
        fingerprint.copy_from_slice(r.take(32)?);
        r.finish()?;
        Ok(Self {
            task_id,
            kernel_masks,
            channel_masks,
            selective,
            attentive,
            grown,
            params: TaskParams { head, norm },
            probe,
            fingerprint,
        })
    }
}

fn slot_tag(s: SlotState) -> (u8, u32) {
    match s {
        SlotState::Ungrown => (0, 0),
        SlotState::GrownTraining => (1, 0),
        SlotState::Detached => (2, 0),
        SlotState::Pruned => (3, 0),
        SlotState::Fixed(t) => (4, t),
    }
}

fn kernel_tag(k: KernelOwnership) -> (u8, u32) {
    match k {
        KernelOwnership::Unassigned => (0, 0),
        KernelOwnership::Used(t) => (1, t),
        KernelOwnership::Released => (2, 0),
    }
}

pub fn backbone_to_bytes(b: &BackboneState) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(BONE_MAGIC);
    w.u32(b.arch.in_channels as u32);
    w.u32(b.arch.image_size as u32);
    w.u32(b.arch.norm_groups as u32);
    w.u32(b.layers.len() as u32);
    for (cfg, l) in b.arch.layers.iter().zip(&b.layers) {
        w.u32(cfg.seed_width as u32);
        w.u32(cfg.capacity as u32);
        w.u32(cfg.kernel as u32);
        w.tensor(&l.weight);
        w.tensor(&l.bias);
        for s in &l.slots {
            let (t, id) = slot_tag(s.state);
            w.u8(t);
            w.u32(id);
        }
        for k in &l.kernels {
            let (t, id) = kernel_tag(*k);
            w.u8(t);
            w.u32(id);
        }
    }
    w.0
}

pub fn backbone_from_bytes(bytes: &[u8], path: &Path) -> Result<BackboneState> {
    let mut r = Reader::new(bytes, path);
    r.magic(BONE_MAGIC)?;
    let in_channels = r.u32()? as usize;
    let image_size = r.u32()? as usize;
    let norm_groups = r.u32()? as usize;
    let n = r.u32()? as usize;
    let mut cin = in_channels;
    let mut cfgs = Vec::with_capacity(n);
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let cfg = LayerCfg {
            seed_width: r.u32()? as usize,
            capacity: r.u32()? as usize,
            kernel: r.u32()? as usize,
        };
        let spec = LayerSpec {
            in_channels: cin,
            capacity: cfg.capacity,
            kernel: cfg.kernel,
            seed_width: cfg.seed_width,
        };
        let mut l = ConvLayerState::empty(i, spec);
        let weight = r.tensor()?;
        let bias = r.tensor()?;
        if weight.shape() != l.weight.shape() || bias.shape() != l.bias.shape() {
            return Err(r.err(format!(
                "layer {i} weight shape {:?} does not match its spec",
                weight.shape()
            )));
        }
        l.weight = weight;
        l.bias = bias;
        for slot in l.slots.iter_mut() {
            let (t, id) = (r.u8()?, r.u32()?);
            slot.state = match t {
                0 => SlotState::Ungrown,
                1 => SlotState::GrownTraining,
                2 => SlotState::Detached,
                3 => SlotState::Pruned,
                4 => SlotState::Fixed(id),
                _ => return Err(r.err(format!("bad slot tag {t}"))),
            };
        }
        for k in l.kernels.iter_mut() {
            let (t, id) = (r.u8()?, r.u32()?);
            *k = match t {
                0 => KernelOwnership::Unassigned,
                1 => KernelOwnership::Used(id),
                2 => KernelOwnership::Released,
                _ => return Err(r.err(format!("bad kernel tag {t}"))),
            };
        }
        cin = cfg.capacity;
        cfgs.push(cfg);
        layers.push(l);
    }
    r.finish()?;
    let arch = ArchSpec {
        in_channels,
        image_size,
        layers: cfgs,
        norm_groups,
    };
    arch.validate().map_err(|e| r.err(e.to_string()))?;
    Ok(BackboneState { arch, layers })
}

/// Write `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".into(),
    });
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.bytes(&(d as u64).to_le_bytes());
        }
        self.bytes(&t.to_le_bytes());
    }
    fn binding(&mut self, g: Granularity, b: &Binding) {
        self.u8(g.tag());
        self.u32(b.layer as u32);
        self.u32(b.out_channels as u32);
        self.u32(b.in_channels as u32);
    }
    fn binary_mask(&mut self, m: &BinaryMask) {
        self.binding(m.granularity, &m.binding);
        self.tensor(m.bits());
    }
    fn mask_param(&mut self, m: &MaskParam) {
        self.binding(m.granularity, &m.binding);
        self.tensor(&m.logits);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("at byte {}: {}", self.pos, msg.into()),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated, wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8; 8]) -> Result<()> {
        if self.take(8)? != m {
            return Err(self.err("bad magic"));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(self.err(format!("bad tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.err("tensor size overflow"))?;
        if n.checked_mul(8)
            .is_none_or(|b| b > self.bytes.len() - self.pos)
        {
            return Err(self.err("truncated tensor payload"));
        }
        let data = self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(&shape, data).map_err(|e| self.err(e.to_string()))
    }

    fn binding(&mut self) -> Result<(Granularity, Binding)> {
        let tag = self.u8()?;
        let g = Granularity::from_tag(tag)
            .ok_or_else(|| self.err(format!("bad granularity tag {tag}")))?;
        let b = Binding {
            layer: self.u32()? as usize,
            out_channels: self.u32()? as usize,
            in_channels: self.u32()? as usize,
        };
        Ok((g, b))
    }

    fn binary_mask(&mut self) -> Result<BinaryMask> {
        let (g, b) = self.binding()?;
        let t = self.tensor()?;
        BinaryMask::new(t, g, b).map_err(|e| self.err(e.to_string()))
    }

    fn mask_param(&mut self) -> Result<MaskParam> {
        let (g, b) = self.binding()?;
        let t = self.tensor()?;
        MaskParam::from_logits(g, b, t).map_err(|e| self.err(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}
