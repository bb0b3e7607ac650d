//! Versioned binary checkpoints: architecture echo, named parameter
//! tensors, optimizer state and the iteration counter in one file, with an
//! integrity digest. Round-trips are bit-exact.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic    7 bytes  "DCANET1"
//! dtype    u8       1 = f32, 2 = f64
//! config   u32 length + UTF-8 JSON (network architecture echo)
//! iter     u64
//! params   u32 count, then per parameter:
//!            u16 name length + name bytes
//!            u8 rank + u32 dims
//!            raw element data
//! adam     u8 flag; if 1: u64 step count, 4 x f64 hyperparameters,
//!            then first-/second-moment data per parameter (same order)
//! digest   32 bytes SHA-256 of everything above
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{build_dca_unet, DcaUnet, NetworkConfig};
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::tensor::{Elem, ParamStore};

pub const MAGIC: &[u8; 7] = b"DCANET1";

/// Hard caps so corrupt or hostile files fail fast instead of allocating.
const MAX_CONFIG_BYTES: u32 = 1 << 24;
const MAX_PARAMS: u32 = 1 << 16;
const MAX_NAME_BYTES: u16 = 4096;
const MAX_RANK: u8 = 8;
const MAX_DIM: u32 = 1 << 24;
const MAX_ELEMS: u64 = 1 << 28;

/// A writer that hashes everything passing through it.
struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

struct HashingReader<R: Read> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> Read for HashingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
}

/// Save weights (and optionally optimizer state) for `store`.
pub fn save<T: Elem>(
    path: &Path,
    config: &NetworkConfig,
    store: &ParamStore<T>,
    adam: Option<&Adam<T>>,
    iteration: u64,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = HashingWriter { inner: BufWriter::new(file), hasher: Sha256::new() };
    let io = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_u8(T::DTYPE).map_err(io)?;
    let config_json = serde_json::to_string(config)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
    w.write_u32::<LittleEndian>(config_json.len() as u32).map_err(io)?;
    w.write_all(config_json.as_bytes()).map_err(io)?;
    w.write_u64::<LittleEndian>(iteration).map_err(io)?;

    w.write_u32::<LittleEndian>(store.len() as u32).map_err(io)?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        w.write_u16::<LittleEndian>(name.len() as u16).map_err(io)?;
        w.write_all(name).map_err(io)?;
        let value = store.value(id);
        w.write_u8(value.ndim() as u8).map_err(io)?;
        for &d in value.shape() {
            w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
        }
        write_elems(&mut w, value).map_err(io)?;
    }

    match adam {
        None => w.write_u8(0).map_err(io)?,
        Some(a) => {
            w.write_u8(1).map_err(io)?;
            w.write_u64::<LittleEndian>(a.t).map_err(io)?;
            for h in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                w.write_f64::<LittleEndian>(h).map_err(io)?;
            }
            if a.m.len() != store.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer tracks {} tensors but the store has {}",
                    a.m.len(),
                    store.len()
                )));
            }
            for (m, v) in a.m.iter().zip(&a.v) {
                write_elems(&mut w, m).map_err(io)?;
                write_elems(&mut w, v).map_err(io)?;
            }
        }
    }

    let digest = w.hasher.clone().finalize();
    w.inner.write_all(&digest).map_err(io)?;
    w.inner.flush().map_err(io)?;
    Ok(())
}

fn write_elems<T: Elem, W: Write>(w: &mut W, a: &ArrayD<T>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(a.len() * T::BYTES);
    for &x in a.iter() {
        x.write_le(&mut buf);
    }
    w.write_all(&buf)
}

/// Everything stored in a checkpoint file.
#[derive(Debug)]
pub struct Checkpoint<T: Elem> {
    pub config: NetworkConfig,
    pub iteration: u64,
    pub params: Vec<(String, ArrayD<T>)>,
    pub adam: Option<AdamSnapshot<T>>,
}

#[derive(Debug)]
pub struct AdamSnapshot<T: Elem> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

/// Parse a checkpoint file. Fails on wrong magic/version, mismatched
/// element type, truncation, out-of-bounds sizes or digest mismatch.
pub fn load<T: Elem>(path: &Path) -> Result<Checkpoint<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = HashingReader { inner: BufReader::new(file), hasher: Sha256::new() };
    let ck = parse(&mut r)?;
    let computed = r.hasher.clone().finalize();
    let mut stored = [0u8; 32];
    r.inner
        .read_exact(&mut stored)
        .map_err(|_| Error::Checkpoint("truncated file: integrity digest missing".into()))?;
    if stored != computed[..] {
        return Err(Error::Checkpoint("integrity digest mismatch (corrupt file)".into()));
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after digest".into()));
    }
    Ok(ck)
}

/// Parse the body (everything before the digest) from any byte source.
/// Exposed so robustness tests and fuzzing can drive the parser directly.
pub fn parse<T: Elem, R: Read>(r: &mut R) -> Result<Checkpoint<T>> {
    let bad = |what: &str| Error::Checkpoint(format!("truncated file: {what}"));

    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|_| bad("header"))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "not a checkpoint or unsupported version (magic {:?}, expected {:?})",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC),
        )));
    }
    let dtype = r.read_u8().map_err(|_| bad("dtype"))?;
    if dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "stored element type tag {dtype} does not match requested {} ({})",
            T::DTYPE,
            T::DTYPE_NAME
        )));
    }

    let config_len = r.read_u32::<LittleEndian>().map_err(|_| bad("config length"))?;
    if config_len > MAX_CONFIG_BYTES {
        return Err(Error::Checkpoint(format!("config block of {config_len} bytes exceeds cap")));
    }
    let mut config_bytes = vec![0u8; config_len as usize];
    r.read_exact(&mut config_bytes).map_err(|_| bad("config"))?;
    let config: NetworkConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| Error::Checkpoint(format!("embedded config invalid: {e}")))?;

    let iteration = r.read_u64::<LittleEndian>().map_err(|_| bad("iteration"))?;
    let n_params = r.read_u32::<LittleEndian>().map_err(|_| bad("parameter count"))?;
    if n_params > MAX_PARAMS {
        return Err(Error::Checkpoint(format!("{n_params} parameters exceeds cap")));
    }

    let mut params = Vec::with_capacity(n_params as usize);
    for _ in 0..n_params {
        let name_len = r.read_u16::<LittleEndian>().map_err(|_| bad("name length"))?;
        if name_len > MAX_NAME_BYTES {
            return Err(Error::Checkpoint(format!("name of {name_len} bytes exceeds cap")));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name).map_err(|_| bad("name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let shape = read_shape(r)?;
        let value = read_elems::<T, R>(r, &shape)?;
        params.push((name, value));
    }

    let adam = match r.read_u8().map_err(|_| bad("optimizer flag"))? {
        0 => None,
        1 => {
            let t = r.read_u64::<LittleEndian>().map_err(|_| bad("optimizer step"))?;
            let mut h = [0f64; 4];
            for x in &mut h {
                *x = r.read_f64::<LittleEndian>().map_err(|_| bad("optimizer settings"))?;
            }
            let config = AdamConfig { lr: h[0], beta1: h[1], beta2: h[2], eps: h[3] };
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for (_, p) in &params {
                let shape: Vec<usize> = p.shape().to_vec();
                m.push(read_elems::<T, R>(r, &shape)?);
                v.push(read_elems::<T, R>(r, &shape)?);
            }
            Some(AdamSnapshot { config, t, m, v })
        }
        other => {
            return Err(Error::Checkpoint(format!("unknown optimizer flag {other}")));
        }
    };

    Ok(Checkpoint { config, iteration, params, adam })
}

fn read_shape<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let bad = |what: &str| Error::Checkpoint(format!("truncated file: {what}"));
    let rank = r.read_u8().map_err(|_| bad("rank"))?;
    if rank > MAX_RANK {
        return Err(Error::Checkpoint(format!("tensor rank {rank} exceeds cap")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut total: u64 = 1;
    for _ in 0..rank {
        let d = r.read_u32::<LittleEndian>().map_err(|_| bad("dimension"))?;
        if d > MAX_DIM {
            return Err(Error::Checkpoint(format!("dimension {d} exceeds cap")));
        }
        total = total.saturating_mul(d as u64);
        shape.push(d as usize);
    }
    if total > MAX_ELEMS {
        return Err(Error::Checkpoint(format!("tensor of {total} elements exceeds cap")));
    }
    Ok(shape)
}

fn read_elems<T: Elem, R: Read>(r: &mut R, shape: &[usize]) -> Result<ArrayD<T>> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * T::BYTES];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated file: tensor data".into()))?;
    let data: Vec<T> = buf.chunks_exact(T::BYTES).map(T::read_le).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data)
        .map_err(|e| Error::Checkpoint(format!("inconsistent tensor shape: {e}")))
}

/// A checkpoint restored into a usable model + store (+ optimizer).
pub struct LoadedModel<T: Elem> {
    pub config: NetworkConfig,
    pub model: DcaUnet,
    pub store: ParamStore<T>,
    pub adam: Option<Adam<T>>,
    pub iteration: u64,
}

/// Rebuild the network described by the checkpoint and install its weights.
/// Every stored tensor must match the rebuilt architecture name-for-name
/// and shape-for-shape.
pub fn load_model<T: Elem>(path: &Path) -> Result<LoadedModel<T>> {
    let ck = load::<T>(path)?;
    let mut store = ParamStore::new();
    // Weights are overwritten below; the init draw is discarded.
    let mut rng = seed::rng(0, "checkpoint-rebuild");
    let model = build_dca_unet(&mut store, &ck.config, &mut rng)?;
    if store.len() != ck.params.len() {
        return Err(Error::Checkpoint(format!(
            "architecture expects {} tensors, file stores {}",
            store.len(),
            ck.params.len()
        )));
    }
    for (id, (name, value)) in store.ids().zip(&ck.params).collect::<Vec<_>>() {
        if store.name(id) != name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: expected {}, file has {name}",
                store.name(id)
            )));
        }
        if store.value(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected shape {:?}, file has {:?}",
                store.value(id).shape(),
                value.shape()
            )));
        }
        store.value_mut(id).assign(value);
    }
    let adam = ck.adam.map(|snap| Adam { config: snap.config, t: snap.t, m: snap.m, v: snap.v });
    Ok(LoadedModel { config: ck.config, model, store, adam, iteration: ck.iteration })
}
