//! Checkpoint files.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "EMUP" | version u16
//! config block: u32 byte length, UTF-8 key=value text
//! manifest: u32 count, then per parameter
//!     name (u16 length + UTF-8) | dtype u8 | rank u8 | dims u32 * rank
//! payloads in manifest order
//! ```
//!
//! dtype 0 is float32 and dtype 1 is float64. Writers emit float64 so that
//! a loaded model computes exactly what the saved one did.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::backbone::{param_manifest, Backbone, Provenance};
use super::config::BackboneConfig;
use crate::autodiff::{ParamSet, Tensor};
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::kv::{join, KvMap};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMUP";
pub const CHECKPOINT_VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

fn config_block(model: &Backbone) -> KvMap {
    let mut kv = KvMap::new();
    model.config.write_kv(&mut kv);
    kv.set("norm.mean", join(&model.norm.mean));
    kv.set("norm.std", join(&model.norm.std));
    let p = &model.provenance;
    kv.set("provenance.stage", &p.stage);
    kv.set("provenance.epoch", p.epoch);
    kv.set("provenance.seed", p.seed);
    kv.set("provenance.role", &p.role);
    kv.set("provenance.fingerprint", &p.fingerprint);
    kv
}

pub fn encode_checkpoint(model: &Backbone) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u16::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    let text = config_block(model).to_text();
    out.write_u32::<LittleEndian>(text.len() as u32).unwrap();
    out.extend_from_slice(text.as_bytes());
    out.write_u32::<LittleEndian>(model.params.len() as u32).unwrap();
    for (name, t) in &model.params {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name `{name}` too long")))?;
        out.write_u16::<LittleEndian>(len).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.write_u32::<LittleEndian>(d as u32).unwrap();
        }
    }
    for t in model.params.values() {
        for &v in t.values() {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    Ok(out)
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn short(&self, what: &str) -> Error {
        Error::Truncation {
            offset: self.cur.position(),
            detail: format!("checkpoint ends inside {what}"),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        self.cur.read_u8().map_err(|_| self.short(what))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        self.cur.read_u16::<LittleEndian>().map_err(|_| self.short(what))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.cur.read_u32::<LittleEndian>().map_err(|_| self.short(what))
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.cur.read_exact(&mut buf).map_err(|_| self.short(what))?;
        Ok(buf)
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.bytes(n, what)?)
            .map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

fn parse_floats(kv: &KvMap, key: &str, n: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = kv
        .get_list(key)?
        .ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
    if v.len() != n {
        return Err(Error::Config(format!("`{key}` has {} entries, expected {n}", v.len())));
    }
    Ok(v)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Backbone> {
    let mut r = Reader {
        cur: Cursor::new(bytes),
    };
    let magic = r.bytes(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format_version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let text_len = r.u32("config length")? as usize;
    let text = r.string(text_len, "config block")?;
    let kv = KvMap::parse(&text)?;
    let config = BackboneConfig::read_kv(&kv)?;
    config.validate()?;
    let norm = ChannelStats {
        mean: parse_floats(&kv, "norm.mean", config.channels)?,
        std: parse_floats(&kv, "norm.std", config.channels)?,
    };
    let provenance = Provenance {
        stage: kv.require_str("provenance.stage")?.to_string(),
        epoch: kv.require("provenance.epoch")?,
        seed: kv.require("provenance.seed")?,
        role: kv.require_str("provenance.role")?.to_string(),
        fingerprint: kv.get_str("provenance.fingerprint").unwrap_or("").to_string(),
    };

    let expected = param_manifest(&config);
    let count = r.u32("manifest count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u16("parameter name length")? as usize;
        let name = r.string(n, "parameter name")?;
        let dtype = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("shape")? as usize);
        }
        entries.push((name, dtype, shape));
    }
    for (name, _, _) in &entries {
        if entries.iter().filter(|e| &e.0 == name).count() > 1 {
            return Err(Error::Load {
                param: name.clone(),
                detail: "listed more than once".into(),
            });
        }
        if !expected.iter().any(|e| &e.0 == name) {
            return Err(Error::Load {
                param: name.clone(),
                detail: "not part of this architecture".into(),
            });
        }
    }
    for (name, shape, _) in &expected {
        match entries.iter().find(|e| &e.0 == name) {
            None => {
                return Err(Error::Load {
                    param: name.clone(),
                    detail: "missing from manifest".into(),
                })
            }
            Some((_, _, got)) if got != shape => {
                return Err(Error::Load {
                    param: name.clone(),
                    detail: format!("shape {got:?}, config implies {shape:?}"),
                })
            }
            _ => {}
        }
    }

    let mut params = ParamSet::new();
    for (name, dtype, shape) in entries {
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let v = match dtype {
                DTYPE_F32 => r.cur.read_f32::<LittleEndian>().map(f64::from),
                DTYPE_F64 => r.cur.read_f64::<LittleEndian>(),
                other => {
                    return Err(Error::Load {
                        param: name,
                        detail: format!("unknown dtype {other}"),
                    })
                }
            }
            .map_err(|_| r.short(&format!("payload of `{name}`")))?;
            values.push(v);
        }
        params.insert(name, Tensor::new(shape, values)?);
    }
    if (r.cur.position() as usize) != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payloads",
            bytes.len() - r.cur.position() as usize
        )));
    }
    Ok(Backbone {
        config,
        norm,
        params,
        provenance,
    })
}

pub fn save_checkpoint(model: &Backbone, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Backbone> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| e.context(format!("loading {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Backbone {
        let mut c = BackboneConfig::standard(3, 32, 8, 4);
        c.context_window = 4;
        c.horizons = 2;
        Backbone::init(c, 11).unwrap()
    }

    #[test]
    fn encode_decode_encode_is_identical() {
        let m = tiny();
        let a = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint(&a).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back).unwrap(), a);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = encode_checkpoint(&tiny()).unwrap();
        bytes[4] = 9;
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("format_version"), "{err}");
    }

    #[test]
    fn tampered_shape_names_parameter() {
        let m = tiny();
        let mut bytes = encode_checkpoint(&m).unwrap();
        let name = b"classifier.bias";
        let at = bytes.windows(name.len()).position(|w| w == name).unwrap();
        // dtype, rank, then the first dim
        let dim = at + name.len() + 2;
        bytes[dim] += 1;
        match decode_checkpoint(&bytes) {
            Err(Error::Load { param, .. }) => assert_eq!(param, "classifier.bias"),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = encode_checkpoint(&tiny()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_checkpoint(cut), Err(Error::Truncation { .. })));
    }

    #[test]
    fn reads_f32_payloads() {
        let m = tiny();
        let mut bytes = encode_checkpoint(&m).unwrap();
        // rewrite as float32: flip dtype tags and shrink payloads
        let header_end = bytes.len() - m.num_parameters() * 8;
        let mut pos = 6;
        let text_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4 + text_len + 4;
        while pos < header_end {
            let n = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
            pos += 2 + n;
            bytes[pos] = DTYPE_F32;
            let rank = bytes[pos + 1] as usize;
            pos += 2 + 4 * rank;
        }
        let mut out = bytes[..header_end].to_vec();
        for chunk in bytes[header_end..].chunks(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap()) as f32;
            out.extend_from_slice(&v.to_le_bytes());
        }
        let back = decode_checkpoint(&out).unwrap();
        let w = &back.params["classifier.weight"];
        let orig = &m.params["classifier.weight"];
        for (a, b) in w.values().iter().zip(orig.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
