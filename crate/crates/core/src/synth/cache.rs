//! On-disk dataset cache.
//!
//! Binary split file, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "DIVDRSYN"
//! version u32      (1)
//! count   u32
//! height  u32
//! width   u32
//! count records, each:
//!   len        u32  byte length of the rest of the record
//!   sample_id  u64
//!   subset     u8   0 = S, 1 = L
//!   image      height*width f64
//!   mask       height*width u8
//! ```
//!
//! A JSON manifest next to it echoes the generating spec and holds the
//! SHA-256 of the binary file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetSpec, SplitKind, Subset, SubsetKind, SynthSample, IMAGE_SIZE};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"DIVDRSYN";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub version: u32,
    pub spec: DatasetSpec,
    pub subset: SubsetKind,
    pub split: SplitKind,
    pub count: usize,
    pub sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(samples: &[SynthSample]) -> Vec<u8> {
    let pixels = IMAGE_SIZE * IMAGE_SIZE;
    let mut out = Vec::with_capacity(24 + samples.len() * (13 + 9 * pixels));
    out.extend_from_slice(CACHE_MAGIC);
    for v in [CACHE_VERSION, samples.len() as u32, IMAGE_SIZE as u32, IMAGE_SIZE as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in samples {
        let len = (8 + 1 + 8 * pixels + pixels) as u32;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&s.sample_id.to_le_bytes());
        out.push(s.true_subset as u8);
        for v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.mask);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<SynthSample>> {
    let bad = |r: &str| Error::format(path, r.to_string());
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8) != Some(CACHE_MAGIC.as_slice()) {
        return Err(bad("missing DIVDRSYN magic"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != CACHE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let (count, h, w) = match (r.u32(), r.u32(), r.u32()) {
        (Some(c), Some(h), Some(w)) => (c as usize, h as usize, w as usize),
        _ => return Err(bad("truncated header")),
    };
    if h != IMAGE_SIZE || w != IMAGE_SIZE {
        return Err(bad(&format!("unsupported image size {h}x{w}")));
    }
    let pixels = h * w;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32().ok_or_else(|| bad("truncated record"))? as usize;
        if len != 9 + 9 * pixels {
            return Err(bad("record length does not match image size"));
        }
        let sample_id = r.u64().ok_or_else(|| bad("truncated record"))?;
        let true_subset = match r.take(1).ok_or_else(|| bad("truncated record"))?[0] {
            0 => Subset::S,
            1 => Subset::L,
            t => return Err(bad(&format!("unknown subset tag {t}"))),
        };
        let raw = r.take(8 * pixels).ok_or_else(|| bad("truncated image"))?;
        let image: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mask = r.take(pixels).ok_or_else(|| bad("truncated mask"))?.to_vec();
        samples.push(SynthSample {
            sample_id,
            image: Tensor::new(vec![1, h, w], image)?,
            mask,
            true_subset,
        });
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after last record"));
    }
    Ok(samples)
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`.
pub fn write_cache(
    dir: &Path,
    stem: &str,
    spec: &DatasetSpec,
    subset: SubsetKind,
    split: SplitKind,
    samples: &[SynthSample],
) -> Result<CacheManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let bytes = encode(samples);
    let manifest = CacheManifest {
        version: CACHE_VERSION,
        spec: spec.clone(),
        subset,
        split,
        count: samples.len(),
        sha256: sha256_hex(&bytes),
    };
    let bin = dir.join(format!("{stem}.bin"));
    fs::write(&bin, &bytes).map_err(|e| Error::io(format!("writing {}", bin.display()), e))?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(format!("writing {}", json.display()), e))?;
    Ok(manifest)
}

/// Reads a split written by [`write_cache`], verifying the content hash.
pub fn read_cache(dir: &Path, stem: &str) -> Result<(CacheManifest, Vec<SynthSample>)> {
    let json = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json).map_err(|e| Error::io(format!("reading {}", json.display()), e))?;
    let manifest: CacheManifest = serde_json::from_str(&text)?;
    let bin = dir.join(format!("{stem}.bin"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(format!("reading {}", bin.display()), e))?;
    if sha256_hex(&bytes) != manifest.sha256 {
        return Err(Error::format(&bin, "content hash does not match manifest"));
    }
    let samples = decode(&bytes, &bin)?;
    if samples.len() != manifest.count {
        return Err(Error::format(&bin, "record count does not match manifest"));
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate;

    #[test]
    fn cache_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_train: 8,
            n_val: 4,
            ..DatasetSpec::default()
        };
        let samples = generate(&spec, SubsetKind::X, SplitKind::Val);
        write_cache(dir.path(), "val_x", &spec, SubsetKind::X, SplitKind::Val, &samples).unwrap();
        let (m, back) = read_cache(dir.path(), "val_x").unwrap();
        assert_eq!(m.count, 4);
        assert_eq!(back, samples);

        let bin = dir.path().join("val_x.bin");
        let mut bytes = fs::read(&bin).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(read_cache(dir.path(), "val_x").is_err());
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(decode(b"NOTMAGIC", Path::new("x")).is_err());
        let mut ok = encode(&[]);
        ok.push(0);
        assert!(decode(&ok, Path::new("x")).is_err());
    }
}
