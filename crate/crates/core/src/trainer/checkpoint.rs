//! Binary checkpoints.
//!
//! Layout (all integers little-endian): `b"MCVA"`, `u32` version, `u32` entry
//! count; per entry `u16` name length, UTF-8 name, `u8` rank, `u32` dims, `f32`
//! payload; then a `u32`-length-prefixed UTF-8 config echo.
//!
//! Besides model parameters a checkpoint may hold `optim.m.<name>` /
//! `optim.v.<name>` AdamW moments and a scalar `meta.step`. Together with the
//! seed in the config echo, `meta.step` is the full RNG state: every step draws
//! from a stream derived from `(seed, step)`.

use std::fs;
use std::path::Path;

use crate::autodiff::{AdamW, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MCVA";
pub const VERSION: u32 = 1;
pub const STEP_ENTRY: &str = "meta.step";
const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub entries: Vec<(String, Tensor)>,
    pub config_echo: String,
}

impl Checkpoint {
    /// Parameters (and optionally optimizer moments) of `store` at `step`.
    pub fn capture(store: &ParamStore<f32>, optimizer: Option<&AdamW<f32>>, step: u64, config_echo: String) -> Self {
        let mut entries: Vec<(String, Tensor)> = store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        if let Some(opt) = optimizer {
            for id in store.ids() {
                if let Some((m, v)) = opt.moments(id) {
                    let shape = store.get(id).shape();
                    let name = store.name(id);
                    entries.push((format!("{MOMENT_M}{name}"), Tensor::new(shape, m.to_vec()).expect("moment shape")));
                    entries.push((format!("{MOMENT_V}{name}"), Tensor::new(shape, v.to_vec()).expect("moment shape")));
                }
            }
        }
        entries.push((STEP_ENTRY.to_string(), Tensor::new(&[1], vec![step as f32]).expect("scalar")));
        Checkpoint {
            version: VERSION,
            entries,
            config_echo,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn step(&self) -> u64 {
        self.get(STEP_ENTRY).map_or(0, |t| t.data()[0] as u64)
    }

    /// Copies every parameter of `store` accepted by `include` from this
    /// checkpoint. A missing entry is a format error, a differing shape a shape
    /// error.
    pub fn load_into(&self, store: &mut ParamStore<f32>, include: impl Fn(&str) -> bool) -> Result<usize> {
        let mut loaded = 0;
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if !include(&name) {
                continue;
            }
            let value = self
                .get(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {name}")))?;
            if value.shape() != store.get(id).shape() {
                return Err(Error::shape(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, value.clone())?;
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Restores AdamW moments saved by [`Checkpoint::capture`].
    pub fn load_optimizer(&self, store: &ParamStore<f32>, optimizer: &mut AdamW<f32>) -> Result<()> {
        for id in store.ids() {
            let name = store.name(id);
            if let (Some(m), Some(v)) = (self.get(&format!("{MOMENT_M}{name}")), self.get(&format!("{MOMENT_V}{name}"))) {
                if m.shape() != store.get(id).shape() || v.shape() != store.get(id).shape() {
                    return Err(Error::shape(format!("optimizer moments of {name} do not match the parameter")));
                }
                optimizer.set_moments(id, m.to_vec(), v.to_vec());
            }
        }
        optimizer.set_step_count(self.step());
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(|_| Error::shape("too many entries"))?.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::shape(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::shape(format!("rank of {name} exceeds 255")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::shape(format!("extent of {name} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let echo = u32::try_from(self.config_echo.len()).map_err(|_| Error::shape("config echo too long"))?;
        out.extend_from_slice(&echo.to_le_bytes());
        out.extend_from_slice(self.config_echo.as_bytes());
        Ok(out)
    }

    /// Parses bytes; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(r.error("bad magic (not an MCVA checkpoint)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(&format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error("entry name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.error(&format!("entry {name} is too large")))?;
            let payload = r.take(n.checked_mul(4).ok_or_else(|| r.error("entry too large"))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        let echo_len = r.u32()? as usize;
        let config_echo = std::str::from_utf8(r.take(echo_len)?)
            .map_err(|_| r.error("config echo is not UTF-8"))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(r.error(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            version,
            entries,
            config_echo,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn error(&self, msg: &str) -> Error {
        Error::format(self.origin, format!("{msg} (at byte {})", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error("truncated"));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single() -> Checkpoint {
        Checkpoint {
            version: VERSION,
            entries: vec![("w".into(), Tensor::new(&[1], vec![1.0]).unwrap())],
            config_echo: String::new(),
        }
    }

    #[test]
    fn single_entry_byte_layout() {
        let bytes = single().to_bytes().unwrap();
        let expected: Vec<u8> = [
            &b"MCVA"[..],
            &[1, 0, 0, 0],      // version
            &[1, 0, 0, 0],      // entry count
            &[1, 0],            // name length
            b"w",               // name
            &[1],               // rank
            &[1, 0, 0, 0],      // dims[0]
            &[0, 0, 0x80, 0x3f], // 1.0f32
            &[0, 0, 0, 0],      // empty config echo
        ]
        .concat();
        assert_eq!(bytes, expected);
        assert_eq!(Checkpoint::from_bytes(&bytes, "x").unwrap(), single());
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Tensor::new(&[2, 3], vec![0.1, -2.0, 3.5, f32::MIN_POSITIVE, 1e30, -0.0]).unwrap());
        store.add("b", Tensor::scalar(7.0));
        let ck = Checkpoint::capture(&store, None, 42, "phase = pretrain\n".into());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, "x").unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.step(), 42);
        let mut fresh = ParamStore::<f32>::new();
        fresh.add("a.weight", Tensor::zeros(&[2, 3]));
        fresh.add("b", Tensor::zeros(&[1]));
        assert_eq!(back.load_into(&mut fresh, |_| true).unwrap(), 2);
        assert_eq!(fresh.checksum(""), store.checksum(""));
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = single().to_bytes().unwrap();
        for cut in [0, 3, 10, bytes.len() - 5, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut], "x"), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, "x"), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad, "x"), Err(Error::Format { .. })));
    }

    #[test]
    fn shape_mismatch_on_load() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[2]));
        assert!(matches!(single().load_into(&mut store, |_| true), Err(Error::Shape(_))));
    }
}
