//! Binary checkpoints: a little-endian `u32` header followed by every
//! parameter block as row-major `f32`.
//!
//! Header: magic `LMBD`, version, n_entities, n_relations, d, depth,
//! n_proxy, classifier hidden width, classifier feature code.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{EncoderParams, N_PARAM_BLOCKS};
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::ipule::{ClassifierHead, HeadFeatures};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LMBD";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_WORDS: usize = 8;

fn shapes(
    n: usize,
    r: usize,
    d: usize,
    depth: usize,
    p: usize,
    hid: usize,
    features: HeadFeatures,
) -> [(usize, usize); N_PARAM_BLOCKS] {
    let w = (depth + 1) * d;
    [
        (n, d),
        (r, d),
        (n, 1),
        (d, d),
        (d, 1),
        (p, w),
        (w, w),
        (1, w),
        (features.width(depth + 1, d), hid),
        (1, hid),
        (hid, 2),
        (1, 2),
    ]
}

pub fn write_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    let header = [
        CHECKPOINT_VERSION,
        params.n_entities() as u32,
        params.n_relations() as u32,
        params.dim() as u32,
        params.depth as u32,
        params.n_proxy() as u32,
        params.clf_hidden() as u32,
        params.clf_head.features.code(),
    ];
    let total: usize = params.blocks().iter().map(|b| b.len()).sum();
    let mut buf = Vec::with_capacity(4 + 4 * header.len() + 4 * total);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for h in header {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    for block in params.blocks() {
        for &x in block.iter() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<EncoderParams> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<EncoderParams> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let head_len = 4 + 4 * HEADER_WORDS;
    if bytes.len() < head_len || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let version = word(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let (n, r, d, depth, p, hid) = (word(1), word(2), word(3), word(4), word(5), word(6));
    let features = HeadFeatures::from_code(word(7) as u32).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let shapes = shapes(n, r, d, depth, p, hid, features);
    let total: usize = shapes.iter().map(|(a, b)| a * b).sum();
    let body = &bytes[head_len..];
    if body.len() != 4 * total {
        return Err(Error::Checkpoint(format!(
            "expected {} payload bytes, found {}",
            4 * total,
            body.len()
        )));
    }
    let mut floats = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut blocks: Vec<Mat> = shapes
        .iter()
        .map(|&(a, b)| Mat::from_shape_fn((a, b), |_| floats.next().expect("length checked")))
        .collect();
    if blocks.iter().any(|b| b.iter().any(|x| !x.is_finite())) {
        return Err(bad("non-finite parameter"));
    }
    let mut take = || blocks.remove(0);
    Ok(EncoderParams {
        ent_emb: take(),
        rel_emb: take(),
        indicator: take(),
        rel_proj: take(),
        attn_vec: take(),
        proxies: take(),
        gate_weight: take(),
        gate_bias: take(),
        clf_head: ClassifierHead {
            features,
            n_blocks: depth + 1,
            w1: take(),
            b1: take(),
            w2: take(),
            b2: take(),
        },
        depth,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_cfg;
    use super::super::{encode, EncoderParams};
    use super::*;
    use crate::kgdata::{gen_synthetic_pair, SynthConfig};

    fn f32_params(n: usize, r: usize) -> EncoderParams {
        let mut p = EncoderParams::init(n, r, &small_cfg(), 3).unwrap();
        for b in p.blocks_mut() {
            b.mapv_inplace(|x| x as f32 as f64);
        }
        p
    }

    #[test]
    fn round_trip_reproduces_embeddings() {
        let pair = gen_synthetic_pair(&SynthConfig {
            n_match: 20,
            n_dang_src: 3,
            n_dang_tgt: 4,
            community_count: 4,
            ..Default::default()
        })
        .unwrap();
        let p = f32_params(pair.n_total_entities(), pair.n_total_relations());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&p, &path).unwrap();
        let q = read_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(encode(&pair, &p, 2).unwrap().hf, encode(&pair, &q, 2).unwrap().hf);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let p = f32_params(4, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        write_checkpoint(&p, &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bytes = good.clone();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));

        let mut bytes = good.clone();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));

        assert!(matches!(decode(&good[..good.len() - 4]), Err(Error::Checkpoint(_))));
        assert!(read_checkpoint(&dir.path().join("missing")).is_err());
    }
}
