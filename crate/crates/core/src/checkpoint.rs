//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic     8 bytes  "SPDNCKPT"
//! version   u32      = 1
//! dtype     u8       0 = float32, 1 = float64 (payload width 4 or 8)
//! sections  u32      count, then per section:
//!   tag     4 bytes  ASCII
//!   length  u64      payload bytes
//!   payload
//! ```
//!
//! Sections (unknown tags are skipped on read):
//!
//! * `CONF` model config as UTF-8 JSON.
//! * `PARM` `u32` count, then tensor records: `u32` name length, name,
//!   `u32` rank, `u64` extents, raw values.
//! * `OPTM` `u64` step, `f64` β₁ β₂ ε λ, `u32` count, then per entry: `u32`
//!   name length, name, `u64` length, first moments, second moments.
//! * `MASK` `u32` plan-JSON length, plan JSON, `u64` sparsifiable total,
//!   `u64` all-parameter total, `u32` count, then per mask: `u32` name
//!   length, name, `u32` rank, `u64` extents, bitset of `ceil(N/8)` bytes,
//!   least significant bit first, 1 = active.
//! * `STEP` `u64` optimizer updates applied.
//! * `RNGS` 32-byte seed, `u64` stream, `u128` word position.
//! * `TRCE` `u32` label length, label, `u64` count, `f64` losses.
//! * `DATA` `u64` sequence length, `u64` sequence count, `u32` tokens,
//!   `u64` first-document index per sequence.
//! * `PRMT` one tensor record named `prompt` (soft-prompt embeddings).

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::data::PackedDataset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::sparsity::{Mask, MaskSet, SparsityPlan};
use crate::tensor::{DType, Real, Tensor};
use crate::training::{AdamW, AdamWConfig, LossTrace, Moments, TrainState};

pub const MAGIC: &[u8; 8] = b"SPDNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub params: ParamStore<T>,
    pub optimizer: Option<AdamW<T>>,
    pub masks: Option<MaskSet>,
    pub step: u64,
    pub rng: Option<ChaCha8Rng>,
    pub trace: Option<LossTrace>,
    pub dataset: Option<PackedDataset>,
    pub prompt: Option<Tensor<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_params(params: ParamStore<T>) -> Self {
        Checkpoint {
            params,
            optimizer: None,
            masks: None,
            step: 0,
            rng: None,
            trace: None,
            dataset: None,
            prompt: None,
        }
    }

    pub fn from_state(state: &TrainState<T>) -> Self {
        Checkpoint {
            params: state.params.clone(),
            optimizer: Some(state.optimizer.clone()),
            masks: state.masks.clone(),
            step: state.step,
            rng: Some(state.rng.clone()),
            trace: Some(state.trace.clone()),
            dataset: None,
            prompt: None,
        }
    }

    /// Restores a training state; fails if optimizer or RNG state is absent.
    pub fn into_state(self) -> Result<TrainState<T>> {
        let (Some(optimizer), Some(rng)) = (self.optimizer, self.rng) else {
            return Err(Error::contract(
                "checkpoint lacks optimizer or RNG state and cannot resume training",
            ));
        };
        Ok(TrainState {
            params: self.params,
            masks: self.masks,
            optimizer,
            step: self.step,
            rng,
            trace: self.trace.unwrap_or_default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();
        sections.push((*b"CONF", serde_json::to_vec(self.params.config())?));

        let mut p = Vec::new();
        put_u32(&mut p, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_tensor(&mut p, name, t);
        }
        sections.push((*b"PARM", p));

        if let Some(opt) = &self.optimizer {
            let mut o = Vec::new();
            put_u64(&mut o, opt.step_count());
            let c = opt.config;
            for x in [c.beta1, c.beta2, c.eps, c.weight_decay] {
                o.extend_from_slice(&x.to_le_bytes());
            }
            put_u32(&mut o, opt.moments().len() as u32);
            for (name, mo) in opt.moments() {
                put_str(&mut o, name);
                put_u64(&mut o, mo.m.len() as u64);
                mo.m.iter().chain(&mo.v).for_each(|x| x.write_le(&mut o));
            }
            sections.push((*b"OPTM", o));
        }

        if let Some(masks) = &self.masks {
            let mut m = Vec::new();
            let plan = serde_json::to_vec(masks.plan())?;
            put_u32(&mut m, plan.len() as u32);
            m.extend_from_slice(&plan);
            put_u64(&mut m, masks.sparsifiable_total());
            put_u64(&mut m, masks.all_total());
            put_u32(&mut m, masks.len() as u32);
            for (name, mask) in masks.iter() {
                put_str(&mut m, name);
                put_shape(&mut m, mask.shape());
                let mut bits = vec![0u8; mask.len().div_ceil(8)];
                for (i, &a) in mask.active().iter().enumerate() {
                    if a {
                        bits[i / 8] |= 1 << (i % 8);
                    }
                }
                m.extend_from_slice(&bits);
            }
            sections.push((*b"MASK", m));
        }

        let mut s = Vec::new();
        put_u64(&mut s, self.step);
        sections.push((*b"STEP", s));

        if let Some(rng) = &self.rng {
            let mut r = Vec::new();
            r.extend_from_slice(&rng.get_seed());
            put_u64(&mut r, rng.get_stream());
            r.extend_from_slice(&rng.get_word_pos().to_le_bytes());
            sections.push((*b"RNGS", r));
        }

        if let Some(trace) = &self.trace {
            let mut t = Vec::new();
            put_str(&mut t, &trace.label);
            put_u64(&mut t, trace.len() as u64);
            trace.losses().iter().for_each(|x| t.extend_from_slice(&x.to_le_bytes()));
            sections.push((*b"TRCE", t));
        }

        if let Some(data) = &self.dataset {
            let mut d = Vec::new();
            put_u64(&mut d, data.msl() as u64);
            put_u64(&mut d, data.len() as u64);
            data.tokens().iter().for_each(|&x| put_u32(&mut d, x));
            data.first_doc().iter().for_each(|&x| put_u64(&mut d, x as u64));
            sections.push((*b"DATA", d));
        }

        if let Some(prompt) = &self.prompt {
            let mut pr = Vec::new();
            put_tensor(&mut pr, "prompt", prompt);
            sections.push((*b"PRMT", pr));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.push(T::DTYPE.tag());
        put_u32(&mut out, sections.len() as u32);
        for (tag, payload) in sections {
            out.extend_from_slice(&tag);
            put_u64(&mut out, payload.len() as u64);
            out.extend_from_slice(&payload);
        }
        Ok(out)
    }

    /// Parses a checkpoint; stored values are converted to `T` if the dtype differs.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint (magic mismatch)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| bad("unknown dtype tag"))?;
        let n_sections = r.u32()?;

        let mut config: Option<ModelConfig> = None;
        let mut tensors: Option<BTreeMap<String, Tensor<T>>> = None;
        let mut ck = Checkpoint {
            params: ParamStore::zeros(&ModelConfig::new(1, 1, 1, 1, 1))?,
            optimizer: None,
            masks: None,
            step: 0,
            rng: None,
            trace: None,
            dataset: None,
            prompt: None,
        };
        for _ in 0..n_sections {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.u64()? as usize;
            let mut s = Reader::new(r.take(len)?);
            match &tag {
                b"CONF" => config = Some(serde_json::from_slice(s.rest())?),
                b"PARM" => {
                    let n = s.u32()?;
                    let mut map = BTreeMap::new();
                    for _ in 0..n {
                        let (name, t) = s.tensor(dtype)?;
                        map.insert(name, t);
                    }
                    tensors = Some(map);
                }
                b"OPTM" => {
                    let step = s.u64()?;
                    let c = AdamWConfig {
                        beta1: s.f64()?,
                        beta2: s.f64()?,
                        eps: s.f64()?,
                        weight_decay: s.f64()?,
                    };
                    let n = s.u32()?;
                    let mut moments = BTreeMap::new();
                    for _ in 0..n {
                        let name = s.string()?;
                        let len = s.u64()? as usize;
                        let m = s.values(dtype, len)?;
                        let v = s.values(dtype, len)?;
                        moments.insert(name, Moments { m, v });
                    }
                    ck.optimizer = Some(AdamW::from_parts(c, step, moments));
                }
                b"MASK" => {
                    let plan_len = s.u32()? as usize;
                    let plan: SparsityPlan = serde_json::from_slice(s.take(plan_len)?)?;
                    let sparsifiable_total = s.u64()?;
                    let all_total = s.u64()?;
                    let n = s.u32()?;
                    let mut masks = BTreeMap::new();
                    for _ in 0..n {
                        let name = s.string()?;
                        let shape = s.shape()?;
                        let count: usize = shape.iter().product();
                        let bits = s.take(count.div_ceil(8))?;
                        let active = (0..count).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
                        masks.insert(name, Mask::new(shape, active)?);
                    }
                    ck.masks = Some(MaskSet::from_parts(masks, plan, sparsifiable_total, all_total)?);
                }
                b"STEP" => ck.step = s.u64()?,
                b"RNGS" => {
                    let seed: [u8; 32] = s.take(32)?.try_into().unwrap();
                    let stream = s.u64()?;
                    let pos = u128::from_le_bytes(s.take(16)?.try_into().unwrap());
                    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
                    rng.set_stream(stream);
                    rng.set_word_pos(pos);
                    ck.rng = Some(rng);
                }
                b"TRCE" => {
                    let label = s.string()?;
                    let n = s.u64()? as usize;
                    let losses = (0..n).map(|_| s.f64()).collect::<Result<Vec<_>>>()?;
                    ck.trace = Some(LossTrace::from_losses(label, losses));
                }
                b"DATA" => {
                    let msl = s.u64()? as usize;
                    let n = s.u64()? as usize;
                    let tokens = (0..n * msl).map(|_| s.u32()).collect::<Result<Vec<_>>>()?;
                    let first = (0..n).map(|_| s.u64().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
                    ck.dataset = Some(PackedDataset::from_parts(msl, tokens, first)?);
                }
                b"PRMT" => ck.prompt = Some(s.tensor(dtype)?.1),
                _ => {}
            }
        }
        let config = config.ok_or_else(|| bad("missing CONF section"))?;
        let tensors = tensors.ok_or_else(|| bad("missing PARM section"))?;
        ck.params = ParamStore::from_tensors(config, tensors)?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_shape(out: &mut Vec<u8>, shape: &[usize]) {
    put_u32(out, shape.len() as u32);
    shape.iter().for_each(|&d| put_u64(out, d as u64));
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_str(out, name);
    put_shape(out, t.shape());
    t.data().iter().for_each(|x| x.write_le(out));
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("name is not UTF-8"))
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 16 {
            return Err(bad(format!("implausible rank {rank}")));
        }
        (0..rank).map(|_| self.u64().map(|d| d as usize)).collect()
    }

    fn values<T: Real>(&mut self, dtype: DType, n: usize) -> Result<Vec<T>> {
        let w = dtype.size();
        let raw = self.take(n.checked_mul(w).ok_or_else(|| bad("length overflow"))?)?;
        Ok(raw
            .chunks_exact(w)
            .map(|c| match dtype {
                DType::Float32 => T::of(f32::read_le(c) as f64),
                DType::Float64 => T::of(f64::read_le(c)),
            })
            .collect())
    }

    fn tensor<T: Real>(&mut self, dtype: DType) -> Result<(String, Tensor<T>)> {
        let name = self.string()?;
        let shape = self.shape()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("extent overflow"))?;
        let data = self.values(dtype, n)?;
        Ok((name, Tensor::new(shape, data)?))
    }
}
