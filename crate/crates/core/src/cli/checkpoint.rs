//! Binary tensor container used for model checkpoints, latents and internal meshes.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"TRGNCKPT"
//! u32    format version
//! u64    metadata length, then that many bytes of JSON
//! 32     SHA-256 of the metadata bytes
//! u32    tensor count, then per tensor a record:
//!        u32 name length, name bytes (UTF-8)
//!        u8  dtype tag (1 = f64, 2 = u32)
//!        u8  frozen flag
//!        u32 rank, then rank × u64 dims
//!        u64 payload length, payload bytes
//!      followed by 32 bytes of SHA-256 over the whole record
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::tetmesh::TriMesh;

pub const MAGIC: &[u8; 8] = b"TRGNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Tensor),
    U32 { shape: Vec<usize>, data: Vec<u32> },
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F64(_) => 1,
            TensorData::U32 { .. } => 2,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F64(t) => t.shape(),
            TensorData::U32 { shape, .. } => shape,
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            TensorData::F64(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            TensorData::U32 { data, .. } => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub frozen: bool,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<NamedTensor>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn push_f64(&mut self, name: impl Into<String>, t: Tensor, frozen: bool) {
        self.tensors.push(NamedTensor { name: name.into(), frozen, data: TensorData::F64(t) });
    }

    pub fn push_u32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<u32>) {
        self.tensors.push(NamedTensor { name: name.into(), frozen: false, data: TensorData::U32 { shape, data } });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn f64(&self, name: &str) -> Result<&Tensor> {
        match self.get(name).map(|t| &t.data) {
            Some(TensorData::F64(t)) => Ok(t),
            Some(_) => Err(corrupt(format!("tensor {name:?} is not f64"))),
            None => Err(corrupt(format!("missing tensor {name:?}"))),
        }
    }

    pub fn u32(&self, name: &str) -> Result<(&[usize], &[u32])> {
        match self.get(name).map(|t| &t.data) {
            Some(TensorData::U32 { shape, data }) => Ok((shape, data)),
            Some(_) => Err(corrupt(format!("tensor {name:?} is not u32"))),
            None => Err(corrupt(format!("missing tensor {name:?}"))),
        }
    }

    /// Every parameter of `store` in registration order, with its frozen flag.
    pub fn from_store(meta: Value, store: &ParamStore) -> Self {
        let mut c = Self::new(meta);
        for (_, p) in store.iter() {
            c.push_f64(p.name.clone(), p.value.clone(), p.frozen);
        }
        c
    }

    /// Overwrite every parameter of `store` from same-named tensors; all must be present.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self.f64(&name)?;
            store
                .set_value(id, t.clone())
                .map_err(|e| corrupt(format!("parameter {name}: {e}")))?;
            let frozen = self.get(&name).is_some_and(|t| t.frozen);
            store.iter_mut().find(|p| p.name == name).expect("listed above").frozen = frozen;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("JSON values serialize");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&Sha256::digest(&meta));
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let start = out.len();
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.tag());
            out.push(t.frozen as u8);
            let shape = t.data.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let payload = t.data.payload();
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
            let digest = Sha256::digest(&out[start..]);
            out.extend_from_slice(&digest);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let magic: [u8; 8] = take(&mut r)?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "checkpoint format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let meta_len = u64::from_le_bytes(take(&mut r)?) as usize;
        let meta_bytes = take_slice(&mut r, meta_len)?;
        let digest: [u8; 32] = take(&mut r)?;
        if Sha256::digest(meta_bytes).as_slice() != digest {
            return Err(corrupt("checksum mismatch in metadata"));
        }
        let meta: Value = serde_json::from_slice(meta_bytes)
            .map_err(|e| corrupt(format!("metadata is not valid JSON: {e}")))?;
        let count = u32::from_le_bytes(take(&mut r)?);
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let record = r;
            let name_len = u32::from_le_bytes(take(&mut r)?) as usize;
            let name = String::from_utf8(take_slice(&mut r, name_len)?.to_vec())
                .map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let [tag, frozen]: [u8; 2] = take(&mut r)?;
            let rank = u32::from_le_bytes(take(&mut r)?) as usize;
            if rank > 16 {
                return Err(corrupt(format!("tensor {name}: implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut r)?) as usize);
            }
            let len = u64::from_le_bytes(take(&mut r)?) as usize;
            let payload = take_slice(&mut r, len)?;
            let body = &record[..record.len() - r.len()];
            let digest: [u8; 32] = take(&mut r)?;
            if Sha256::digest(body).as_slice() != digest {
                return Err(corrupt(format!("checksum mismatch in tensor {name:?}")));
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let fits = |w: usize| numel.and_then(|n| n.checked_mul(w)) == Some(len);
            let data = match tag {
                1 if fits(8) => TensorData::F64(
                    Tensor::new(
                        &shape,
                        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                    )
                    .map_err(|e| corrupt(format!("tensor {name}: {e}")))?,
                ),
                2 if fits(4) => TensorData::U32 {
                    shape,
                    data: payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
                },
                1 | 2 => return Err(corrupt(format!("tensor {name}: payload size does not match shape"))),
                t => return Err(corrupt(format!("tensor {name}: unknown dtype tag {t}"))),
            };
            tensors.push(NamedTensor { name, frozen: frozen != 0, data });
        }
        if !r.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| corrupt(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    Ok(take_slice(r, N)?.try_into().expect("length checked"))
}

fn take_slice<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(corrupt("file truncated"));
    }
    let (a, b) = r.split_at(n);
    *r = b;
    Ok(a)
}

/// Internal mesh file: `vertices` `[M, 3]` f64, `faces` `[F, 3]` u32, optional `colors`.
pub fn mesh_to_checkpoint(mesh: &TriMesh, meta: Value) -> Checkpoint {
    let mut c = Checkpoint::new(meta);
    c.push_f64(
        "vertices",
        Tensor::new(&[mesh.vertices.len(), 3], mesh.vertices.iter().flatten().copied().collect())
            .expect("shape matches"),
        false,
    );
    c.push_u32("faces", vec![mesh.faces.len(), 3], mesh.faces.iter().flatten().copied().collect());
    if let Some(cols) = &mesh.colors {
        c.push_f64(
            "colors",
            Tensor::new(&[cols.len(), 3], cols.iter().flatten().copied().collect()).expect("shape matches"),
            false,
        );
    }
    c
}

pub fn mesh_from_checkpoint(c: &Checkpoint) -> Result<TriMesh> {
    let v = c.f64("vertices")?;
    let (fshape, f) = c.u32("faces")?;
    if v.rank() != 2 || v.shape()[1] != 3 || fshape.len() != 2 || fshape[1] != 3 {
        return Err(corrupt("mesh tensors must be [M, 3] and [F, 3]"));
    }
    let vertices = v.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let faces = f.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let mut mesh = TriMesh::new(vertices, faces)?;
    if c.get("colors").is_some() {
        let cols = c.f64("colors")?;
        if cols.shape() != [mesh.vertices.len(), 3] {
            return Err(corrupt("colors must be [M, 3]"));
        }
        mesh.colors = Some(cols.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
    }
    Ok(mesh)
}
