//! `PAAC` checkpoint container.
//!
//! Layout: magic `PAAC`, u32 version, u32 entry count, then per entry a u16
//! name length, the UTF-8 name, and an embedded `.ten` tensor. Entries are
//! written in sorted name order so identical state produces identical bytes.
//!
//! Naming: encoder parameters use the `stage{i}.block{j}.{param}` convention
//! (plus `stem.*` / `head.*`); running statistics are `{bn key}.running_mean`
//! and `{bn key}.running_var`; prototypes `proto.{m}`; bank entries
//! `bank.{m}.{slot}.z` with `bank.{m}.{slot}.tag` carrying the batch of
//! origin; `meta.*` entries hold scalar configuration.

use super::net::{Encoder, EncoderConfig, EncoderVariant, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::tape::BnStats;
use crate::tensor::{ten_io, Tensor};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PAAC";
pub const VERSION: u32 = 1;

/// A named-tensor container in the `PAAC` layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub entries: BTreeMap<String, Tensor<f32>>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&ten_io::encode(tensor));
        }
        out
    }

    pub fn decode(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut w = [0u8; 4];
        r.read_exact(&mut w).map_err(trunc)?;
        let version = u32::from_le_bytes(w);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut w).map_err(trunc)?;
        let count = u32::from_le_bytes(w);
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let mut nl = [0u8; 2];
            r.read_exact(&mut nl).map_err(trunc)?;
            let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
            r.read_exact(&mut name).map_err(trunc)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("checkpoint entry name is not UTF-8".into()))?;
            let tensor = ten_io::decode(r)?;
            entries.insert(name, tensor);
        }
        Ok(Container { entries })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut f =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::decode(&mut f)
    }

    pub fn insert_scalar(&mut self, name: &str, value: f32) {
        self.entries.insert(name.to_string(), Tensor::scalar(value));
    }

    pub fn scalar(&self, name: &str) -> Result<f32> {
        self.entries
            .get(name)
            .map(|t| t.item())
            .ok_or_else(|| Error::Format(format!("checkpoint missing entry {name}")))
    }
}

fn trunc(e: std::io::Error) -> Error {
    Error::Format(format!("truncated checkpoint: {e}"))
}

/// Pack an encoder (parameters, running stats, plan metadata) into a
/// container, merging any extra entries (prototypes, bank, counters).
pub fn pack_encoder(enc: &Encoder<f32>, extra: &BTreeMap<String, Tensor<f32>>) -> Container {
    let mut c = Container::default();
    for (name, t) in &enc.store.tensors {
        c.entries.insert(name.clone(), t.clone());
    }
    for (key, stats) in &enc.store.bn {
        c.entries.insert(
            format!("{key}.running_mean"),
            Tensor::from_vec(vec![stats.mean.len()], stats.mean.clone()).unwrap(),
        );
        c.entries.insert(
            format!("{key}.running_var"),
            Tensor::from_vec(vec![stats.var.len()], stats.var.clone()).unwrap(),
        );
    }
    c.insert_scalar("meta.variant", enc.cfg.variant.code() as f32);
    c.insert_scalar("meta.input_size", enc.cfg.input_size as f32);
    c.insert_scalar("meta.paa_blocks", enc.cfg.paa_blocks as f32);
    for (name, t) in extra {
        c.entries.insert(name.clone(), t.clone());
    }
    c
}

/// Rebuild an encoder from a container. Returns the encoder and the entries
/// that were not consumed by it (prototypes, bank, meta counters).
pub fn unpack_encoder(c: &Container) -> Result<(Encoder<f32>, BTreeMap<String, Tensor<f32>>)> {
    let variant = EncoderVariant::from_code(c.scalar("meta.variant")? as u32)?;
    let input_size = c.scalar("meta.input_size")? as usize;
    let paa_blocks = c.scalar("meta.paa_blocks")? as usize;
    let cfg = EncoderConfig::new(variant, input_size, Some(paa_blocks))?;

    let mut tensors = BTreeMap::new();
    let mut missing = Vec::new();
    cfg.for_each_param(&mut |name, shape| {
        match c.entries.get(name) {
            Some(t) if t.shape() == shape => {
                tensors.insert(name.to_string(), t.clone());
            }
            Some(t) => missing.push(format!("{name} (shape {:?}, expected {shape:?})", t.shape())),
            None => missing.push(name.to_string()),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint incompatible with its layer plan: {}",
            missing.join(", ")
        )));
    }
    let mut bn = BTreeMap::new();
    let mut bn_err = None;
    cfg.for_each_bn(&mut |key, channels| {
        let mean = c.entries.get(&format!("{key}.running_mean"));
        let var = c.entries.get(&format!("{key}.running_var"));
        match (mean, var) {
            (Some(m), Some(v)) if m.numel() == channels && v.numel() == channels => {
                bn.insert(
                    key.to_string(),
                    BnStats {
                        mean: m.data().to_vec(),
                        var: v.data().to_vec(),
                    },
                );
            }
            _ => bn_err = Some(key.to_string()),
        }
    });
    if let Some(key) = bn_err {
        return Err(Error::Format(format!("checkpoint missing running stats for {key}")));
    }

    let consumed: std::collections::BTreeSet<String> = tensors
        .keys()
        .cloned()
        .chain(bn.keys().flat_map(|k| {
            [format!("{k}.running_mean"), format!("{k}.running_var")]
        }))
        .chain(
            ["meta.variant", "meta.input_size", "meta.paa_blocks"]
                .iter()
                .map(|s| s.to_string()),
        )
        .collect();
    let extra: BTreeMap<String, Tensor<f32>> = c
        .entries
        .iter()
        .filter(|(k, _)| !consumed.contains(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();

    Ok((
        Encoder {
            cfg,
            store: ParamStore { tensors, bn },
        },
        extra,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let enc: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 11).unwrap();
        let mut extra = BTreeMap::new();
        extra.insert("meta.epoch".to_string(), Tensor::scalar(3.0f32));
        let c1 = pack_encoder(&enc, &extra);
        let bytes1 = c1.encode();
        let c2 = Container::decode(&mut &bytes1[..]).unwrap();
        let (enc2, extra2) = unpack_encoder(&c2).unwrap();
        assert_eq!(extra2.get("meta.epoch").unwrap().item(), 3.0);
        let bytes2 = pack_encoder(&enc2, &extra2).encode();
        assert_eq!(bytes1, bytes2);
        assert_eq!(enc.store.tensors, enc2.store.tensors);
    }

    #[test]
    fn header_layout() {
        let c = Container::default();
        let bytes = c.encode();
        assert_eq!(&bytes[..4], b"PAAC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 0);
    }
}
