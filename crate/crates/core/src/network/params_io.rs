//! Versioned binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "NFPARAMS"
//! version      u32       1
//! fingerprint  32 bytes  SHA-256 of the architecture descriptor
//! n_seeds      u32       scene seeds the parameters were trained on
//! seeds        n_seeds x u64
//! n_layers     u32
//! per layer:
//!   name_len   u8, name (ASCII)
//!   kh kw cin cout stride   5 x u32
//!   weights    kh*kw*cin*cout x f64, HWIO row-major
//!   bias       cout x f64
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{architecture_fingerprint, NetworkParams, ARCHITECTURE};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 8] = b"NFPARAMS";
pub const PARAMS_VERSION: u32 = 1;

/// Parameters plus the scene seeds of the data they were trained on, used
/// to enforce train/test seed disjointness.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamsFile {
    pub params: NetworkParams,
    pub train_seeds: Vec<u64>,
}

impl ParamsFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.params, &self.train_seeds, &architecture_fingerprint())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        decode(bytes, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode(&bytes, path)
    }
}

pub fn save_params(path: &Path, params: &NetworkParams) -> Result<()> {
    ParamsFile {
        params: params.clone(),
        train_seeds: Vec::new(),
    }
    .save(path)
}

pub fn load_params(path: &Path) -> Result<NetworkParams> {
    ParamsFile::load(path).map(|f| f.params)
}

pub(crate) fn encode(params: &NetworkParams, seeds: &[u64], fingerprint: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.parameter_count() * 8);
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(fingerprint);
    out.extend_from_slice(&(seeds.len() as u32).to_le_bytes());
    for s in seeds {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        let s = &l.spec;
        out.push(s.name.len() as u8);
        out.extend_from_slice(s.name.as_bytes());
        for d in [s.kernel, s.kernel, s.cin, s.cout, s.stride] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = Sha256::digest(&out);
    out.extend_from_slice(&checksum);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "parameter file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format(self.path, "size overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn decode(bytes: &[u8], path: &Path) -> Result<ParamsFile> {
    if bytes.len() < PARAMS_MAGIC.len() + 4 + 32 + 32 {
        return Err(Error::format(path, "parameter file truncated"));
    }
    if &bytes[..8] != PARAMS_MAGIC {
        return Err(Error::format(path, "not a parameter file (bad magic)"));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader {
        bytes: body,
        pos: 8,
        path,
    };
    let version = r.u32()?;
    if version != PARAMS_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let expected = architecture_fingerprint();
    if fingerprint != expected {
        return Err(Error::Fingerprint {
            path: path.to_path_buf(),
            expected: hex::encode(&expected[..8]),
            found: hex::encode(&fingerprint[..8]),
        });
    }
    if Sha256::digest(body).as_slice() != checksum {
        return Err(Error::format(path, "checksum mismatch (corrupt or truncated file)"));
    }
    let n_seeds = r.u32()? as usize;
    let mut train_seeds = Vec::with_capacity(n_seeds.min(1024));
    for _ in 0..n_seeds {
        train_seeds.push(r.u64()?);
    }
    let n_layers = r.u32()? as usize;
    if n_layers != ARCHITECTURE.len() {
        return Err(Error::format(
            path,
            format!("expected {} layers, found {n_layers}", ARCHITECTURE.len()),
        ));
    }
    let mut params = NetworkParams::zeros();
    for (layer, spec) in params.layers.iter_mut().zip(ARCHITECTURE.iter()) {
        let name_len = r.take(1)?[0] as usize;
        let name = r.take(name_len)?;
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        if name != spec.name.as_bytes() || dims != [spec.kernel, spec.kernel, spec.cin, spec.cout, spec.stride] {
            return Err(Error::format(
                path,
                format!("layer {} does not match the architecture", spec.name),
            ));
        }
        layer.weights = r.f64s(spec.weight_len())?;
        layer.bias = r.f64s(spec.cout)?;
    }
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after last layer"));
    }
    Ok(ParamsFile { params, train_seeds })
}
