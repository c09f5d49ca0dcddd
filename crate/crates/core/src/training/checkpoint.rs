//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//! `"LFCK"`, `u32` version, `u64` header length, UTF-8 header, `u32` tensor
//! count, then per tensor `u32` name length, name, `u32` rank, `u64` dims,
//! `f32` values. The header holds `[model]`, `[train]`, `[state]` and
//! `[history]` sections of `key = value` lines. Tensors are model
//! parameters by name followed by `adam/m/<name>` and `adam/v/<name>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Adam, LossRecord, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{LfDiffConfig, LfDiffModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Everything stored in a checkpoint, before it is turned back into a model.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub model: LfDiffConfig,
    pub train: TrainConfig,
    pub state_text: String,
    pub history: Vec<LossRecord>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn sections(header: &str) -> Result<BTreeMap<String, String>> {
    let mut out: BTreeMap<String, String> = BTreeMap::new();
    let mut current: Option<String> = None;
    for line in header.lines() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = Some(name.to_string());
            out.entry(name.to_string()).or_default();
        } else if let Some(name) = &current {
            let s = out.get_mut(name).expect("section exists");
            s.push_str(line);
            s.push('\n');
        } else if !t.is_empty() {
            return Err(ck("header text before the first section"));
        }
    }
    Ok(out)
}

fn state_text(state: &TrainState) -> String {
    let seed: String = state
        .rng
        .get_seed()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    format!(
        "epoch = {}\nglobal_step = {}\nrng_seed = {seed}\nrng_stream = {}\nrng_word_pos = {}\nadam_step = {}\n",
        state.epoch,
        state.global_step,
        state.rng.get_stream(),
        state.rng.get_word_pos(),
        state.adam.step,
    )
}

fn history_text(history: &[LossRecord]) -> String {
    let mut s = String::new();
    for (i, r) in history.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i} = {},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.step, r.epoch, r.l_pixel, r.l_percep, r.l_eps, r.l_prior, r.l_total, r.lr
        );
    }
    s
}

fn parse_history(text: &str) -> Result<Vec<LossRecord>> {
    crate::kv::pairs(text)?
        .into_iter()
        .map(|(_, v)| LossRecord::parse_csv(&v).ok_or_else(|| ck(format!("bad history row '{v}'"))))
        .collect()
}

fn write_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn write_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a checkpoint to bytes.
pub fn encode(model: &LfDiffModel, train: &TrainConfig, state: &TrainState) -> Result<Vec<u8>> {
    let header = format!(
        "[model]\n{}[train]\n{}[state]\n{}[history]\n{}",
        model.config().to_text(),
        train.to_text(),
        state_text(state),
        history_text(&state.history)
    );
    let mut tensors: Vec<(String, Tensor)> = model
        .store()
        .vars()
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().clone()))
        .collect();
    for (prefix, map) in [("adam/m/", &state.adam.m), ("adam/v/", &state.adam.v)] {
        tensors.extend(map.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    write_u32(&mut out, CHECKPOINT_VERSION);
    write_u64(&mut out, header.len() as u64);
    out.extend_from_slice(header.as_bytes());
    write_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        write_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        write_u32(&mut out, t.rank() as u32);
        for &d in t.dims() {
            write_u64(&mut out, d as u64);
        }
        for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ck("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| ck("length overflow"))
    }
}

/// Parses checkpoint bytes without building a model.
pub fn decode(bytes: &[u8]) -> Result<CheckpointData> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ck("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ck(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = r.len()?;
    let header = std::str::from_utf8(r.take(hlen)?).map_err(|_| ck("header is not UTF-8"))?;
    let sec = sections(header)?;
    let get = |name: &str| {
        sec.get(name)
            .cloned()
            .ok_or_else(|| ck(format!("missing [{name}] section")))
    };
    let wrap = |e: Error| ck(format!("invalid header: {e}"));
    let model = LfDiffConfig::from_text(&get("model")?).map_err(wrap)?;
    let mut train = TrainConfig::default();
    for (k, v) in crate::kv::pairs(&get("train")?).map_err(wrap)? {
        train.set(&k, &v).map_err(wrap)?;
    }
    train.model = model.clone();
    let history = parse_history(&get("history")?)?;
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| ck("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| ck("tensor too large"))?)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(data, dims, &Device::Cpu)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(ck(format!("duplicate tensor '{name}'")));
        }
    }
    if r.pos != bytes.len() {
        return Err(ck("trailing bytes after tensors"));
    }
    Ok(CheckpointData {
        model,
        train,
        state_text: get("state")?,
        history,
        tensors,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointData> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ck(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &LfDiffModel,
    train: &TrainConfig,
    state: &TrainState,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model, train, state)?;
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&bytes))
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| Error::io(path, e))
}

impl CheckpointData {
    /// Copies every parameter whose name starts with one of `prefixes` into
    /// `model`. All of the model's parameters under those prefixes must be
    /// present with matching shapes.
    pub fn load_params(&self, model: &LfDiffModel, prefixes: &[&str]) -> Result<usize> {
        let mut loaded = 0;
        for name in model.store().names() {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| ck(format!("missing tensor '{name}'")))?;
            model.store().assign(&name, t)?;
            loaded += 1;
        }
        Ok(loaded)
    }

    /// A model with exactly the stored parameters.
    pub fn build_model(&self, dtype: DType) -> Result<LfDiffModel> {
        let model = LfDiffModel::new(self.model.clone(), dtype, 0)?;
        let names = model.store().names();
        self.load_params(&model, &[""])?;
        let extra = self
            .tensors
            .keys()
            .find(|k| !k.starts_with("adam/") && !names.contains(k));
        if let Some(k) = extra {
            return Err(ck(format!(
                "unexpected tensor '{k}' for this configuration"
            )));
        }
        Ok(model)
    }

    /// Reconstructs the training state (optimizer moments, RNG, counters).
    pub fn train_state(&self, dtype: DType) -> Result<TrainState> {
        let kv: BTreeMap<String, String> =
            crate::kv::pairs(&self.state_text)?.into_iter().collect();
        let get = |k: &str| kv.get(k).ok_or_else(|| ck(format!("state lacks '{k}'")));
        let num = |k: &str| -> Result<u128> {
            get(k)?
                .parse()
                .map_err(|_| ck(format!("bad state value for '{k}'")))
        };
        let hex = get("rng_seed")?;
        if hex.len() != 64 {
            return Err(ck("bad rng_seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| ck("bad rng_seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(num("rng_stream")? as u64);
        rng.set_word_pos(num("rng_word_pos")?);
        let mut adam = Adam {
            step: num("adam_step")? as u64,
            ..Adam::default()
        };
        for (name, t) in &self.tensors {
            if let Some(n) = name.strip_prefix("adam/m/") {
                adam.m.insert(n.to_string(), t.to_dtype(dtype)?);
            } else if let Some(n) = name.strip_prefix("adam/v/") {
                adam.v.insert(n.to_string(), t.to_dtype(dtype)?);
            }
        }
        Ok(TrainState {
            epoch: num("epoch")? as usize,
            global_step: num("global_step")? as u64,
            rng,
            adam,
            history: self.history.clone(),
        })
    }
}

/// Loads a model for inference.
pub fn load_model(path: impl AsRef<Path>) -> Result<LfDiffModel> {
    read_checkpoint(path)?.build_model(DType::F32)
}
