//! Corpus archive.
//!
//! Layout (little-endian): magic `PALCORP1`, `u32` version, `u32` vocab,
//! `u32` feature dim, then one record per utterance until end of file: `u32`
//! label count, `u16` labels, `u32` frame count, `u32` dim, `f32` frames.

use std::io::{Read, Write};
use std::path::Path;

use super::{FeatureSequence, LabelSequence, Utterance};
use crate::error::{PalError, Result};

pub const CORPUS_MAGIC: &[u8; 8] = b"PALCORP1";
pub const CORPUS_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| PalError::Input("corpus archive truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_corpus(w: &mut impl Write, vocab: usize, dim: usize, utts: &[Utterance]) -> Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    for v in [CORPUS_VERSION, vocab as u32, dim as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for u in utts {
        if u.labels.vocab != vocab || u.features.dim != dim {
            return Err(PalError::Input("utterance does not match corpus vocab/dim".into()));
        }
        let mut buf = Vec::with_capacity(16 + 2 * u.labels.len() + 4 * u.features.frames.len());
        buf.extend_from_slice(&(u.labels.len() as u32).to_le_bytes());
        for &l in &u.labels.tokens {
            buf.extend_from_slice(&(l as u16).to_le_bytes());
        }
        buf.extend_from_slice(&(u.features.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
        for v in &u.features.frames {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Returns `(vocab, dim, utterances)`.
pub fn read_corpus(r: &mut impl Read) -> Result<(usize, usize, Vec<Utterance>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| PalError::Input("corpus archive truncated".into()))?;
    if &magic != CORPUS_MAGIC {
        return Err(PalError::Input("not a corpus archive".into()));
    }
    let version = read_u32(r)?;
    if version != CORPUS_VERSION {
        return Err(PalError::Input(format!("unsupported corpus version {version}")));
    }
    let vocab = read_u32(r)? as usize;
    let dim = read_u32(r)? as usize;
    let mut utts = Vec::new();
    loop {
        let mut head = [0u8; 4];
        match r.read(&mut head[..1])? {
            0 => break,
            _ => r.read_exact(&mut head[1..]).map_err(|_| PalError::Input("corpus archive truncated".into()))?,
        }
        let len = u32::from_le_bytes(head) as usize;
        let mut lb = vec![0u8; 2 * len];
        r.read_exact(&mut lb).map_err(|_| PalError::Input("corpus archive truncated".into()))?;
        let tokens = lb.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as usize).collect();
        let t = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        if d != dim {
            return Err(PalError::Input(format!("utterance dim {d} in a dim-{dim} corpus")));
        }
        let mut fb = vec![0u8; 4 * t * d];
        r.read_exact(&mut fb).map_err(|_| PalError::Input("corpus archive truncated".into()))?;
        let frames = fb.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        utts.push(Utterance {
            features: FeatureSequence::new(frames, t, d)?,
            labels: LabelSequence::new(tokens, vocab)?,
        });
    }
    Ok((vocab, dim, utts))
}

pub fn save_corpus(path: impl AsRef<Path>, vocab: usize, dim: usize, utts: &[Utterance]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_corpus(&mut w, vocab, dim, utts)?;
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<Utterance>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_corpus(&mut r)
}
