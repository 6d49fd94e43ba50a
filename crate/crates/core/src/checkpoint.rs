//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "OPAC" | u8 version | u8 dim | u32 k_p | u32 k_r | u32 hidden | u32 hidden_layers
//! | [32] config hash
//! | 4 x mlp (position f1, position f2, orientation f1, orientation f2)
//! | u32 n + n x (u32 type index | k_p f64 | k_r f64 | offset f64s)
//! | [32] sha256 of everything before it
//! mlp: u32 layers + layers x (u32 rows | u32 cols | rows*cols f64 | rows f64)
//! ```

use crate::grad::Parameter;
use crate::policy::{Architecture, Dense, Mlp, PreferenceFeature, PreferenceTable, RelationNet, RelationNetParams, RotOffset};
use crate::rotmath::Dim;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};
use std::io::{Cursor, Read};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"OPAC";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version or architecture mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Trained networks, anchor table and the hash of the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: RelationNetParams,
    pub table: PreferenceTable,
    pub config_hash: [u8; 32],
}

fn corrupt(m: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptFile(m.into())
}

fn put_mlp(b: &mut Vec<u8>, m: &Mlp) {
    b.write_u32::<LittleEndian>(m.layers.len() as u32).unwrap();
    for l in &m.layers {
        b.write_u32::<LittleEndian>(l.w.rows as u32).unwrap();
        b.write_u32::<LittleEndian>(l.w.cols as u32).unwrap();
        for x in l.w.value.iter().chain(&l.b.value) {
            b.write_f64::<LittleEndian>(*x).unwrap();
        }
    }
}

fn get_u32(c: &mut Cursor<&[u8]>) -> Result<u32, CheckpointError> {
    c.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated"))
}

fn get_f64s(c: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f64>, CheckpointError> {
    (0..n).map(|_| c.read_f64::<LittleEndian>().map_err(|_| corrupt("truncated"))).collect()
}

fn get_mlp(c: &mut Cursor<&[u8]>, name: &str, sizes: &[usize]) -> Result<Mlp, CheckpointError> {
    let n = get_u32(c)? as usize;
    if n + 1 != sizes.len() {
        return Err(corrupt(format!("{name}: expected {} layers, found {n}", sizes.len() - 1)));
    }
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let rows = get_u32(c)? as usize;
        let cols = get_u32(c)? as usize;
        if rows != sizes[i + 1] || cols != sizes[i] {
            return Err(corrupt(format!("{name}: layer {i} has shape {rows}x{cols}")));
        }
        let w = get_f64s(c, rows * cols)?;
        let b = get_f64s(c, rows)?;
        layers.push(Dense {
            w: Parameter::new(format!("{name}.{i}.w"), w, rows, cols),
            b: Parameter::vector(format!("{name}.{i}.b"), b),
        });
    }
    Ok(Mlp { layers })
}

fn sizes(arch: &Architecture, input: usize, output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend(std::iter::repeat_n(arch.hidden, arch.hidden_layers));
    s.push(output);
    s
}

impl Checkpoint {
    pub fn arch(&self) -> Architecture {
        self.params.arch
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let a = self.params.arch;
        let mut b = MAGIC.to_vec();
        b.push(CHECKPOINT_VERSION);
        b.push(a.dim.n() as u8);
        for x in [a.k_p, a.k_r, a.hidden, a.hidden_layers] {
            b.write_u32::<LittleEndian>(x as u32).unwrap();
        }
        b.extend_from_slice(&self.config_hash);
        for net in [&self.params.position, &self.params.orientation] {
            put_mlp(&mut b, &net.feature);
            put_mlp(&mut b, &net.gate);
        }
        b.write_u32::<LittleEndian>(self.table.entries.len() as u32).unwrap();
        for (idx, f) in &self.table.entries {
            b.write_u32::<LittleEndian>(*idx).unwrap();
            for x in f.c_p.iter().chain(&f.c_r_latent).chain(&f.c_r_delta.as_vec()) {
                b.write_f64::<LittleEndian>(*x).unwrap();
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 4 + 2 + 16 + 32 + 32 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch(format!("file version {}, expected {CHECKPOINT_VERSION}", bytes[4])));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut c = Cursor::new(body);
        c.set_position(5);
        let dim = Dim::from_usize(c.read_u8().map_err(|_| corrupt("truncated"))? as usize).ok_or_else(|| corrupt("bad dimension"))?;
        let k_p = get_u32(&mut c)? as usize;
        let k_r = get_u32(&mut c)? as usize;
        let hidden = get_u32(&mut c)? as usize;
        let hidden_layers = get_u32(&mut c)? as usize;
        if k_p == 0 || k_r == 0 || hidden == 0 || hidden_layers == 0 {
            return Err(corrupt("zero-sized architecture"));
        }
        let arch = Architecture {
            dim,
            k_p,
            k_r,
            hidden,
            hidden_layers,
        };
        let mut config_hash = [0u8; 32];
        c.read_exact(&mut config_hash).map_err(|_| corrupt("truncated"))?;
        let pos_in = arch.position_input();
        let rot_in = arch.orientation_input();
        let position = RelationNet {
            feature: get_mlp(&mut c, "pos.f1", &sizes(&arch, pos_in, dim.n()))?,
            gate: get_mlp(&mut c, "pos.f2", &sizes(&arch, pos_in, 1))?,
        };
        let orientation = RelationNet {
            feature: get_mlp(&mut c, "rot.f1", &sizes(&arch, rot_in, dim.w_len()))?,
            gate: get_mlp(&mut c, "rot.f2", &sizes(&arch, rot_in, 1))?,
        };
        let n = get_u32(&mut c)? as usize;
        let mut table = PreferenceTable::default();
        for _ in 0..n {
            let idx = get_u32(&mut c)?;
            let c_p = get_f64s(&mut c, k_p)?;
            let c_r = get_f64s(&mut c, k_r)?;
            let off = get_f64s(&mut c, dim.offset_len())?;
            table.insert(idx, PreferenceFeature::new(c_p, c_r, RotOffset::from_slice(dim, &off)));
        }
        if c.position() as usize != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint {
            params: RelationNetParams {
                arch,
                position,
                orientation,
            },
            table,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and rejects a checkpoint built for another dimension.
    pub fn load_expecting(path: &Path, dim: Dim) -> Result<Checkpoint, CheckpointError> {
        let ck = Checkpoint::load(path)?;
        if ck.params.arch.dim != dim {
            return Err(CheckpointError::VersionMismatch(format!(
                "checkpoint is {}D, expected {}D",
                ck.params.arch.dim.n(),
                dim.n()
            )));
        }
        Ok(ck)
    }
}
