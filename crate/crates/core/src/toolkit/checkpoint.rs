//! The `FTCK` container: an ordered list of named tensor sections.
//!
//! Layout, little-endian: magic `FTCK`, u8 version, u32 section count, then
//! per section a u16 name length, the UTF-8 name, a u64 payload length and
//! the section's `FTNS` bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

use super::tensor_file::{self, StoredTensor};

pub const MAGIC: &[u8; 4] = b"FTCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    sections: Vec<(String, StoredTensor)>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: impl Into<StoredTensor>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::contract("section name too long"));
        }
        if self.sections.iter().any(|(n, _)| *n == name) {
            return Err(Error::contract(format!("duplicate section {name}")));
        }
        self.sections.push((name, tensor.into()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&StoredTensor> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::contract(format!("missing section {name}")))
    }

    pub fn float(&self, name: &str) -> Result<Tensor> {
        self.get(name)?.clone().into_float()
    }

    pub fn ints(&self, name: &str) -> Result<&[i32]> {
        self.get(name)?.as_ints()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, t) in &self.sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let payload = tensor_file::encode(t)?;
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, reason: String| Error::Format { offset, reason };
        let take = |at: usize, n: usize| -> Result<&[u8]> {
            bytes
                .get(at..at.saturating_add(n))
                .ok_or_else(|| err(at, format!("truncated: need {n} bytes")))
        };
        if take(0, 4)? != MAGIC {
            return Err(err(0, "bad magic, expected FTCK".into()));
        }
        let version = take(4, 1)?[0];
        if version != VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(5, 4)?.try_into().unwrap());
        let mut at = 9;
        let mut out = Container::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(at, 2)?.try_into().unwrap()) as usize;
            at += 2;
            let name = std::str::from_utf8(take(at, name_len)?)
                .map_err(|_| err(at, "section name is not UTF-8".into()))?
                .to_string();
            at += name_len;
            let len = u64::from_le_bytes(take(at, 8)?.try_into().unwrap()) as usize;
            at += 8;
            let payload = take(at, len)?;
            let tensor = tensor_file::decode_exact(payload).map_err(|e| match e {
                Error::Format { offset, reason } => err(at + offset, format!("section {name}: {reason}")),
                other => other,
            })?;
            out.insert(name, tensor).map_err(|e| err(at, e.to_string()))?;
            at += len;
        }
        if at != bytes.len() {
            return Err(err(at, format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::decode(&bytes).map_err(|e| match e {
            Error::Format { offset, reason } => Error::Format {
                offset,
                reason: format!("{}: {reason}", path.display()),
            },
            other => other,
        })
    }
}
