use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::denoiser::{Denoiser, NetConfig};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{AdamState, ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BPCK";
pub const CHECKPOINT_VERSION: u8 = 1;

const GROUPS: [&str; 4] = ["param", "ema", "adam.m", "adam.v"];

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    net: NetConfig,
    train: TrainConfig,
    step: u64,
    adam_step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Layout: magic, version byte, u32 LE length of a JSON header (configs and
/// counters), the header, u32 LE record count, then per tensor: u32 name
/// length, name bytes, dtype tag byte, u32 rank, u32 dims, raw LE data.
pub fn save_checkpoint<T: Scalar, W: Write>(state: &TrainState<T>, mut out: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    let header = serde_json::to_vec(&Header {
        net: *state.net.config(),
        train: state.config,
        step: state.step,
        adam_step: state.adam.step,
    })?;
    put_u32(&mut buf, header.len())?;
    buf.extend_from_slice(&header);
    let names = state.net.params().names();
    let groups: [&[Tensor<T>]; 4] = [
        state.net.params().tensors(),
        state.ema.tensors(),
        &state.adam.m,
        &state.adam.v,
    ];
    put_u32(&mut buf, names.len() * groups.len())?;
    for (group, tensors) in GROUPS.iter().zip(groups) {
        for (name, t) in names.iter().zip(tensors) {
            let full = format!("{group}/{name}");
            put_u32(&mut buf, full.len())?;
            buf.extend_from_slice(full.as_bytes());
            buf.push(T::DTYPE.tag());
            put_u32(&mut buf, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut buf, d)?;
            }
            for &x in t.data() {
                x.write_le(&mut buf);
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

fn read_tensor<T: Scalar>(c: &mut Cursor) -> Result<(String, Tensor<T>)> {
    let n = c.u32()?;
    let name = String::from_utf8(c.take(n)?.to_vec())
        .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let tag = c.take(1)?[0];
    let dtype = DType::from_tag(tag)
        .ok_or_else(|| Error::Format(format!("{name}: unknown dtype tag {tag}")))?;
    let rank = c.u32()?;
    let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let numel = numel.ok_or_else(|| Error::Format(format!("{name}: shape {shape:?} overflows")))?;
    let width = dtype.size_of();
    let raw = c.take(
        numel
            .checked_mul(width)
            .ok_or_else(|| Error::Format("tensor too large".into()))?,
    )?;
    let data = raw
        .chunks_exact(width)
        .map(|b| match dtype {
            DType::F32 => T::lit(f64::from(f32::read_le(b))),
            DType::F64 => T::lit(f64::read_le(b)),
        })
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

/// Reads a checkpoint written by [`save_checkpoint`], converting precision
/// when the stored dtype differs from `T`.
pub fn load_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<TrainState<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = c.u32()?;
    let header: Header = serde_json::from_slice(c.take(len)?)?;
    let count = c.u32()?;
    let mut groups: [ParamSet<T>; 4] = Default::default();
    for _ in 0..count {
        let (full, t) = read_tensor::<T>(&mut c)?;
        let (group, name) = full
            .split_once('/')
            .ok_or_else(|| Error::Format(format!("tensor name {full} has no group")))?;
        let gi = GROUPS
            .iter()
            .position(|g| *g == group)
            .ok_or_else(|| Error::Format(format!("unknown tensor group {group}")))?;
        groups[gi].add(name, t);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    let [params, ema, m, v] = groups;
    for (g, set) in GROUPS.iter().skip(1).zip([&ema, &m, &v]) {
        if set.names() != params.names() {
            return Err(Error::Format(format!(
                "tensor group {g} does not mirror the parameters"
            )));
        }
    }
    let net = Denoiser::from_params(header.net, params)?;
    let adam = AdamState {
        config: header.train.adam,
        m: m.tensors().to_vec(),
        v: v.tensors().to_vec(),
        step: header.adam_step,
    };
    Ok(TrainState {
        config: header.train,
        net,
        ema,
        adam,
        step: header.step,
    })
}
