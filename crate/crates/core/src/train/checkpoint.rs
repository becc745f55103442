//! Single-file binary checkpoint.
//!
//! Layout: `"TCNN"`, u32 version, u32 config-blob length, the blob
//! (`key=value` lines sorted by key), u32 tensor count, then per tensor a
//! u16 name length, the name, u64 rows, u64 cols and row-major f64 values.
//! Integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::matcher::Matcher;
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Mat;
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 4] = b"TCNN";
pub const FORMAT_VERSION: u32 = 1;

/// Training provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub best_valid_f1: f64,
    /// Validation-selected decision threshold.
    pub threshold: f64,
    /// Term fingerprint of the knowledge base the model was trained against.
    pub kb_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub matcher: Matcher,
    pub meta: TrainingMeta,
}

fn config_blob(ckpt: &Checkpoint) -> String {
    let mut kv = ckpt.matcher.config.to_kv();
    kv.insert("vocab_size".into(), ckpt.matcher.vocab.len().to_string());
    kv.insert("vocab".into(), ckpt.matcher.vocab.tokens().join("\t"));
    kv.insert("meta.epoch".into(), ckpt.meta.epoch.to_string());
    kv.insert("meta.best_valid_f1".into(), ckpt.meta.best_valid_f1.to_string());
    kv.insert("meta.threshold".into(), ckpt.meta.threshold.to_string());
    kv.insert("meta.kb_fingerprint".into(), ckpt.meta.kb_fingerprint.clone());
    let mut out = String::new();
    for (k, v) in kv {
        out.push_str(&k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.str32(&config_blob(ckpt));
    let tensors = ckpt.matcher.params.tensors();
    w.u32(tensors.len() as u32);
    for (name, m) in tensors {
        w.u16(name.len() as u16);
        w.bytes(name.as_bytes());
        w.u64(m.rows() as u64);
        w.u64(m.cols() as u64);
        for &v in m.as_slice() {
            w.f64(v);
        }
    }
    w.buf
}

fn parse_blob(blob: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for line in blob.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Corrupt(format!("config line without '=': {line:?}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    Ok(kv)
}

fn corrupt(e: Error) -> Error {
    match e {
        Error::Data(m) | Error::Parse { message: m, .. } => Error::Corrupt(m),
        other => other,
    }
}

/// Parses checkpoint bytes; `origin` names the source in "not a checkpoint" errors.
pub fn checkpoint_from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotACheckpoint {
            path: origin.to_path_buf(),
        });
    }
    let mut r = Reader::new(&bytes[4..]);
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let kv = parse_blob(&r.str32()?)?;
    let config = ModelConfig::from_kv(&kv).map_err(corrupt)?;
    let get = |k: &str| -> Result<&str> {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Corrupt(format!("config blob is missing '{k}'")))
    };
    let bad = |k: &str| Error::Corrupt(format!("config value '{k}' is malformed"));
    let tokens: Vec<&str> = get("vocab")?.split('\t').collect();
    let tsv: String = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{t}\t{i}\n"))
        .collect();
    let vocab = Vocabulary::from_tsv(&tsv).map_err(corrupt)?;
    let vocab_size: usize = get("vocab_size")?.parse().map_err(|_| bad("vocab_size"))?;
    if vocab_size != vocab.len() {
        return Err(Error::Corrupt(format!(
            "vocab_size {vocab_size} disagrees with {} stored tokens",
            vocab.len()
        )));
    }
    let meta = TrainingMeta {
        epoch: get("meta.epoch")?.parse().map_err(|_| bad("meta.epoch"))?,
        best_valid_f1: get("meta.best_valid_f1")?
            .parse()
            .map_err(|_| bad("meta.best_valid_f1"))?,
        threshold: get("meta.threshold")?
            .parse()
            .map_err(|_| bad("meta.threshold"))?,
        kb_fingerprint: get("meta.kb_fingerprint")?.to_string(),
    };

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.utf8(name_len)?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| {
                Error::Corrupt(format!("tensor '{name}' {rows}x{cols} exceeds the file size"))
            })?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        tensors.push((name, Mat::from_vec(rows, cols, data)?));
    }
    r.finish()?;
    let params = ModelParams::from_tensors(&config, vocab.len(), tensors)?;
    Ok(Checkpoint {
        matcher: Matcher {
            config,
            vocab,
            params,
        },
        meta,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, path)
}
