//! Binary checkpoint: `WQACKPT1`, u32 format version, u64 payload length,
//! sha256 of the payload, payload. The payload is a length-prefixed JSON
//! header followed by every tensor as a u64 count and little-endian f64s.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::optim::OptState;
use crate::reader::ReaderParams;
use crate::trainer::{EmConfig, EmState, IterationStats};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"WQACKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub vocab: Vocabulary,
    pub encoder: EncoderParams,
    pub reader: ReaderParams,
    pub encoder_opt: OptState,
    pub reader_opt: OptState,
    pub config: EmConfig,
    pub iteration: usize,
    pub stats: Vec<IterationStats>,
    pub index_params_version: u64,
}

impl Checkpoint {
    pub fn from_state(
        vocab: &Vocabulary,
        config: &EmConfig,
        state: &EmState,
        iteration: usize,
        stats: &[IterationStats],
    ) -> Self {
        Self {
            vocab: vocab.clone(),
            encoder: state.encoder.clone(),
            reader: state.reader.clone(),
            encoder_opt: state.encoder_opt.clone(),
            reader_opt: state.reader_opt.clone(),
            config: config.clone(),
            iteration,
            stats: stats.to_vec(),
            index_params_version: state.index.params_version,
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![
            &mut self.encoder.embeddings.data,
            &mut self.encoder.w_query.data,
            &mut self.encoder.w_passage.data,
            &mut self.reader.embeddings.data,
            &mut self.reader.w_int.data,
            &mut self.reader.w_rank,
            &mut self.reader.w_start,
            &mut self.reader.w_end,
        ];
        for opt in [&mut self.encoder_opt, &mut self.reader_opt] {
            out.extend(opt.first_moment.iter_mut());
            out.extend(opt.second_moment.iter_mut());
        }
        out
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Checkpoint(m.into()));
        if self.encoder.vocab_size() != self.vocab.size() || self.reader.embeddings.rows != self.vocab.size() {
            return bad("parameter tables do not match the vocabulary");
        }
        let enc_ok = self.encoder.embeddings.data.len() == self.encoder.embeddings.rows * self.encoder.embeddings.cols
            && self.encoder.w_query.data.len() == self.encoder.dim * self.encoder.dim
            && self.encoder.w_passage.data.len() == self.encoder.dim * self.encoder.dim;
        let rd = self.reader.dim;
        let rd_ok = self.reader.embeddings.data.len() == self.reader.embeddings.rows * rd
            && self.reader.w_int.data.len() == rd * 3 * rd
            && [&self.reader.w_rank, &self.reader.w_start, &self.reader.w_end]
                .iter()
                .all(|v| v.len() == rd);
        if !enc_ok || !rd_ok {
            return bad("tensor shapes are inconsistent");
        }
        if !self.encoder_opt.matches(&self.encoder.block_sizes()) || !self.reader_opt.matches(&self.reader.block_sizes()) {
            return bad("optimizer state does not match the parameters");
        }
        Ok(())
    }
}

fn encode(cp: &Checkpoint) -> Result<Vec<u8>> {
    let mut header = cp.clone();
    let tensors: Vec<Vec<f64>> = header.tensors_mut().into_iter().map(std::mem::take).collect();
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    let floats: usize = tensors.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * (floats + tensors.len()));
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated payload".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("length field exceeds payload".into()))
    }
}

fn decode(payload: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes: payload };
    let json_len = cur.len()?;
    let mut cp: Checkpoint =
        serde_json::from_slice(cur.take(json_len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let count = cur.len()?;
    let mut slots = cp.tensors_mut();
    if slots.len() != count {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", slots.len())));
    }
    for slot in slots.iter_mut() {
        let n = cur.len()?;
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        **slot = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
    }
    drop(slots);
    if !cur.bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    cp.vocab.rebuild_index();
    cp.check()?;
    Ok(cp)
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let payload = encode(cp)?;
    let mut out = Vec::with_capacity(52 + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    write_atomic(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes };
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if cur.take(8).map_err(|_| bad("too short"))? != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(cur.take(4).map_err(|_| bad("too short"))?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let len = cur.u64().map_err(|_| bad("too short"))?;
    let digest = cur.take(32).map_err(|_| bad("too short"))?;
    if cur.bytes.len() as u64 != len {
        return Err(bad("payload length mismatch"));
    }
    if Sha256::digest(cur.bytes).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    decode(cur.bytes)
}
