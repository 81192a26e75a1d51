//! Binary model container: a typed table of named f64 tensors plus string metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "BLINDSEP"
//! version    u32      1
//! kind       u32 length + UTF-8 bytes
//! metadata   u32 count, then per entry: u32 key length, key, u32 value length, value
//!            (entries sorted by key)
//! tensors    u32 count, then per tensor: u32 name length, name, u32 rank,
//!            rank x u64 dims, product(dims) x f64
//! checksum   32 bytes, SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::dsp::NormalizationStats;
use crate::error::{Error, Result};
use crate::net::{CellKind, NetworkParameters, NetworkShape};
use crate::speaker::{GmmUbm, LdaProjection, TotalVariabilityModel};

pub const MAGIC: &[u8; 8] = b"BLINDSEP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn vector(name: &str, v: &Array1<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn matrix(name: &str, m: &Array2<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().cloned().collect(),
        }
    }

    pub fn to_vector(&self) -> Result<Array1<f64>> {
        if self.shape.len() != 1 {
            return Err(Error::Container(format!(
                "tensor {} is not a vector",
                self.name
            )));
        }
        Ok(Array1::from(self.data.clone()))
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        match self.shape[..] {
            [r, c] => Array2::from_shape_vec((r, c), self.data.clone())
                .map_err(|e| Error::Container(format!("tensor {}: {e}", self.name))),
            _ => Err(Error::Container(format!(
                "tensor {} is not a matrix",
                self.name
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub kind: String,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Container("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Container("invalid UTF-8 string".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl ModelContainer {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.into(),
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Container(format!("missing tensor {name}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Container(format!("missing metadata key {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Container(format!("metadata {key} has an invalid value")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Container(format!(
                "expected a {kind} container, found {}",
                self.kind
            )))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Container("not a model container".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Container("checksum mismatch".into()));
        }
        let mut r = Reader {
            bytes: body,
            pos: 8,
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Container(format!(
                "unsupported container version {version}"
            )));
        }
        let kind = r.string()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            metadata.insert(k, r.string()?);
        }
        let mut tensors = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| Ok(r.u64()? as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Container("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Container("trailing bytes".into()));
        }
        Ok(Self {
            kind,
            metadata,
            tensors,
        })
    }

    /// Hex SHA-256 of the serialized container.
    pub fn sha256_hex(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingDependency(format!(
                "model file {}",
                path.display()
            )));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Hex SHA-256 of a file on disk.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

pub fn network_container(
    params: &NetworkParameters,
    stats: Option<&NormalizationStats>,
    seed: u64,
) -> ModelContainer {
    let s = params.shape;
    let mut c = ModelContainer::new("network")
        .with_meta("cell", s.cell.name())
        .with_meta("freq_bins", s.freq_bins)
        .with_meta("ivector_width", s.ivector_width)
        .with_meta("hidden", s.hidden)
        .with_meta("layers", s.layers)
        .with_meta("embedding_dim", s.embedding_dim)
        .with_meta("seed", seed);
    for (name, shape, data) in params.tensors() {
        c.push(Tensor {
            name,
            shape,
            data: data.to_vec(),
        });
    }
    if let Some(st) = stats {
        c.push(Tensor::vector("norm.mean", &st.mean));
        c.push(Tensor::vector("norm.std", &st.std));
    }
    c
}

pub fn network_from_container(
    c: &ModelContainer,
) -> Result<(NetworkParameters, Option<NormalizationStats>)> {
    c.expect_kind("network")?;
    let cell = match c.meta("cell")? {
        "gru" => CellKind::Gru,
        "lstm" => CellKind::Lstm,
        other => return Err(Error::Container(format!("unknown cell {other}"))),
    };
    let shape = NetworkShape {
        cell,
        freq_bins: c.meta_parse("freq_bins")?,
        ivector_width: c.meta_parse("ivector_width")?,
        hidden: c.meta_parse("hidden")?,
        layers: c.meta_parse("layers")?,
        embedding_dim: c.meta_parse("embedding_dim")?,
    };
    let tensors: Vec<(String, Vec<usize>, Vec<f64>)> = c
        .tensors
        .iter()
        .filter(|t| !t.name.starts_with("norm."))
        .map(|t| (t.name.clone(), t.shape.clone(), t.data.clone()))
        .collect();
    let params = NetworkParameters::from_tensors(shape, &tensors)?;
    let stats = match (c.tensor("norm.mean"), c.tensor("norm.std")) {
        (Ok(m), Ok(s)) => Some(NormalizationStats {
            mean: m.to_vector()?,
            std: s.to_vector()?,
        }),
        _ => None,
    };
    Ok((params, stats))
}

pub fn ubm_container(ubm: &GmmUbm, seed: u64) -> ModelContainer {
    let mut c = ModelContainer::new("ubm")
        .with_meta("components", ubm.n_components())
        .with_meta("feat_dim", ubm.feat_dim())
        .with_meta("seed", seed);
    c.push(Tensor::vector("weights", &ubm.weights));
    c.push(Tensor::matrix("means", &ubm.means));
    c.push(Tensor::matrix("variances", &ubm.variances));
    c.push(Tensor::vector("variance_floor", &ubm.variance_floor));
    c
}

pub fn ubm_from_container(c: &ModelContainer) -> Result<GmmUbm> {
    c.expect_kind("ubm")?;
    Ok(GmmUbm {
        weights: c.tensor("weights")?.to_vector()?,
        means: c.tensor("means")?.to_matrix()?,
        variances: c.tensor("variances")?.to_matrix()?,
        variance_floor: c.tensor("variance_floor")?.to_vector()?,
    })
}

/// `ubm_sha256` ties the model to the UBM container it was trained on.
pub fn tv_container(tv: &TotalVariabilityModel, ubm_sha256: &str, seed: u64) -> ModelContainer {
    let mut c = ModelContainer::new("tv")
        .with_meta("components", tv.n_components)
        .with_meta("feat_dim", tv.feat_dim)
        .with_meta("rank", tv.rank())
        .with_meta("ubm_sha256", ubm_sha256)
        .with_meta("seed", seed);
    c.push(Tensor::vector("m", &tv.m));
    c.push(Tensor::matrix("t", &tv.t));
    c.push(Tensor::vector("sigma", &tv.sigma));
    c
}

pub fn tv_from_container(c: &ModelContainer) -> Result<TotalVariabilityModel> {
    c.expect_kind("tv")?;
    Ok(TotalVariabilityModel {
        m: c.tensor("m")?.to_vector()?,
        t: c.tensor("t")?.to_matrix()?,
        sigma: c.tensor("sigma")?.to_vector()?,
        n_components: c.meta_parse("components")?,
        feat_dim: c.meta_parse("feat_dim")?,
    })
}

pub fn lda_container(lda: &LdaProjection, tv_sha256: &str) -> ModelContainer {
    let mut c = ModelContainer::new("lda")
        .with_meta("input_dim", lda.input_dim())
        .with_meta("output_dim", lda.output_dim())
        .with_meta("tv_sha256", tv_sha256);
    c.push(Tensor::matrix("a", &lda.a));
    c.push(Tensor::vector("eigenvalues", &lda.eigenvalues));
    c.push(Tensor::matrix("s_b", &lda.s_b));
    c.push(Tensor::matrix("s_w", &lda.s_w));
    c
}

pub fn lda_from_container(c: &ModelContainer) -> Result<LdaProjection> {
    c.expect_kind("lda")?;
    Ok(LdaProjection {
        a: c.tensor("a")?.to_matrix()?,
        eigenvalues: c.tensor("eigenvalues")?.to_vector()?,
        s_b: c.tensor("s_b")?.to_matrix()?,
        s_w: c.tensor("s_w")?.to_matrix()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_network() -> NetworkParameters {
        let shape = NetworkShape {
            cell: CellKind::Lstm,
            freq_bins: 6,
            ivector_width: 4,
            hidden: 3,
            layers: 2,
            embedding_dim: 2,
        };
        NetworkParameters::random(shape, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let stats = NormalizationStats {
            mean: Array1::from(vec![0.5, -1.0, 2.0, 0.0, 1e-300, f64::MIN_POSITIVE]),
            std: Array1::from(vec![1.0; 6]),
        };
        let c = network_container(&sample_network(), Some(&stats), 9);
        let bytes = c.to_bytes();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bsm");
        c.save(&path).unwrap();
        let back = ModelContainer::load(&path).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let (params, st) = network_from_container(&back).unwrap();
        assert_eq!(params, sample_network());
        assert_eq!(st.unwrap(), stats);
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = ModelContainer::new("x")
            .with_meta("b", 2)
            .with_meta("a", 1)
            .to_bytes();
        assert_eq!(&bytes[..8], b"BLINDSEP");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        // kind, then metadata sorted by key
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], b'x');
        assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &1u32.to_le_bytes());
        assert_eq!(bytes[25], b'a');
    }

    #[test]
    fn corrupt_or_foreign_bytes_rejected() {
        let mut bytes = network_container(&sample_network(), None, 0).to_bytes();
        assert!(ModelContainer::from_bytes(&bytes[..20]).is_err());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(ModelContainer::from_bytes(&bytes).is_err());
        let mut v2 = ModelContainer::new("x").to_bytes();
        v2[8] = 2;
        let n = v2.len() - 32;
        let digest = Sha256::digest(&v2[..n]);
        v2[n..].copy_from_slice(&digest);
        assert!(
            matches!(ModelContainer::from_bytes(&v2), Err(Error::Container(m)) if m.contains("version"))
        );
    }

    #[test]
    fn speaker_models_round_trip() {
        let ubm = GmmUbm {
            weights: Array1::from(vec![0.25, 0.75]),
            means: Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64),
            variances: Array2::from_elem((2, 3), 0.5),
            variance_floor: Array1::from(vec![1e-4; 3]),
        };
        let uc = ubm_container(&ubm, 3);
        assert_eq!(
            ubm_from_container(&ModelContainer::from_bytes(&uc.to_bytes()).unwrap()).unwrap(),
            ubm
        );
        let tv = TotalVariabilityModel::initial(&ubm, 2, 5).unwrap();
        let tc = tv_container(&tv, &uc.sha256_hex(), 5);
        let back = ModelContainer::from_bytes(&tc.to_bytes()).unwrap();
        assert_eq!(back.meta("ubm_sha256").unwrap(), uc.sha256_hex());
        assert_eq!(tv_from_container(&back).unwrap(), tv);
        assert!(ubm_from_container(&back).is_err());
    }
}
