//! Binary tensor records shared by client updates and checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   [u8; 4]
//! version u32
//! header  (format specific)
//! count   u32
//! count × { group u8 | name_len u32 | name utf-8 | rows u64 | cols u64 | rows·cols × f64 }
//! ```

use crate::error::{Error, Result};
use crate::model::{MetaParams, ParamGroup};

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub group: ParamGroup,
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl TensorRecord {
    /// Every tensor of `theta` whose group passes `keep`, in flattening order.
    pub fn collect(theta: &MetaParams, keep: impl Fn(ParamGroup) -> bool) -> Vec<TensorRecord> {
        theta
            .tensors()
            .into_iter()
            .filter(|t| keep(t.group))
            .map(|t| TensorRecord {
                group: t.group,
                name: t.name,
                shape: t.shape,
                values: t.values.to_vec(),
            })
            .collect()
    }
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Lora => 0,
        ParamGroup::Gate => 1,
        ParamGroup::Beta => 2,
    }
}

fn group_from(code: u8) -> Option<ParamGroup> {
    match code {
        0 => Some(ParamGroup::Lora),
        1 => Some(ParamGroup::Gate),
        2 => Some(ParamGroup::Beta),
        _ => None,
    }
}

pub(crate) fn write_records(out: &mut Vec<u8>, records: &[TensorRecord]) {
    out.extend((records.len() as u32).to_le_bytes());
    for r in records {
        out.push(group_code(r.group));
        out.extend((r.name.len() as u32).to_le_bytes());
        out.extend(r.name.as_bytes());
        out.extend((r.shape[0] as u64).to_le_bytes());
        out.extend((r.shape[1] as u64).to_le_bytes());
        for v in &r.values {
            out.extend(v.to_le_bytes());
        }
    }
}

/// Cursor over an encoded buffer.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            message: format!("{} at byte {}", message.into(), self.pos),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(self.err("bad magic"));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    pub(crate) fn records(&mut self) -> Result<Vec<TensorRecord>> {
        let n = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..n {
            let code = self.take(1)?[0];
            let group = group_from(code).ok_or_else(|| self.err(format!("unknown group {code}")))?;
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| self.err("name is not utf-8"))?
                .to_string();
            let rows = self.u64()? as usize;
            let cols = self.u64()? as usize;
            let count = rows
                .checked_mul(cols)
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
                .ok_or_else(|| self.err(format!("tensor {name} of shape {rows}x{cols} overruns buffer")))?;
            let values = self
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push(TensorRecord {
                group,
                name,
                shape: [rows, cols],
                values,
            });
        }
        Ok(out)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }
}

/// Copies `records` into the matching tensors of `base`. Every record must
/// name an existing tensor of the same shape.
pub fn apply_records(base: &MetaParams, records: &[TensorRecord]) -> Result<MetaParams> {
    let layout: Vec<(ParamGroup, String, [usize; 2])> =
        base.tensors().into_iter().map(|t| (t.group, t.name, t.shape)).collect();
    let mut slots: Vec<Option<&TensorRecord>> = vec![None; layout.len()];
    for r in records {
        let i = layout
            .iter()
            .position(|(_, name, _)| *name == r.name)
            .ok_or_else(|| Error::contract(format!("unknown tensor {}", r.name)))?;
        let (group, _, shape) = &layout[i];
        if *group != r.group || *shape != r.shape || r.values.len() != shape[0] * shape[1] {
            return Err(Error::Shape {
                op: "apply_records",
                left: format!("{} {}x{}", r.name, shape[0], shape[1]),
                right: format!("{}x{} ({} values)", r.shape[0], r.shape[1], r.values.len()),
            });
        }
        if slots[i].replace(r).is_some() {
            return Err(Error::contract(format!("tensor {} appears twice", r.name)));
        }
    }
    let mut out = base.clone();
    let mut i = 0;
    out.for_each_mut(|_, v| {
        if let Some(r) = slots[i] {
            v.copy_from_slice(&r.values);
        }
        i += 1;
    });
    Ok(out)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FNLC";

/// Full `θ` at a round boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: usize,
    pub theta: MetaParams,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((self.round as u64).to_le_bytes());
        write_records(&mut out, &TensorRecord::collect(&self.theta, |_| true));
        out
    }

    /// `layout` supplies tensor shapes; every one of its tensors must be present.
    pub fn decode(buf: &[u8], layout: &MetaParams) -> Result<Self> {
        let mut r = Reader::new(buf, "checkpoint");
        r.header(CHECKPOINT_MAGIC)?;
        let round = r.u64()? as usize;
        let records = r.records()?;
        r.finish()?;
        let expected = layout.tensors().len();
        if records.len() != expected {
            return Err(Error::Format {
                what: "checkpoint",
                message: format!("{} tensors, expected {expected}", records.len()),
            });
        }
        Ok(Self {
            round,
            theta: apply_records(layout, &records)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::Rng;

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let cfg = ModelConfig::toy(40);
        let theta = MetaParams::init(&cfg, &mut Rng::new(3)).unwrap();
        let ck = Checkpoint { round: 4, theta };
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes, &ck.theta.zeros_like()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);

        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1], &ck.theta).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra, &ck.theta).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad, &ck.theta).is_err());
    }
}
