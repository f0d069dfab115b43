//! Single-file binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//! magic `RCODCKPT`, format version `u32`, config TOML (`u64` length + UTF-8),
//! 32-byte config fingerprint, epoch and step (`u64`), shuffle RNG state
//! (32-byte seed, `u64` stream, `u128` word position), Adam step and
//! hyperparameters, then per parameter its name, shape, values and both Adam
//! moments.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refcod_tensor::nn::ParamStore;
use refcod_tensor::optim::Adam;
use refcod_tensor::Tensor;

use super::HarnessError;
use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"RCODCKPT";
pub const VERSION: u32 = 1;

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub fingerprint: [u8; 32],
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimiser steps.
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub adam_step: u64,
    pub adam_hyper: [f64; 3],
    pub params: Vec<ParamRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub value: Tensor,
    pub first: Tensor,
    pub second: Tensor,
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        epoch: u64,
        step: u64,
        rng: &ChaCha8Rng,
        store: &ParamStore,
        adam: &Adam,
    ) -> Self {
        let params = store
            .iter()
            .map(|(id, entry)| ParamRecord {
                name: entry.name.clone(),
                value: entry.value.clone(),
                first: adam.first[id.index()].clone(),
                second: adam.second[id.index()].clone(),
            })
            .collect();
        Self {
            config: config.clone(),
            fingerprint: config.fingerprint(),
            epoch,
            step,
            rng_seed: rng.get_seed(),
            rng_stream: rng.get_stream(),
            rng_word_pos: rng.get_word_pos(),
            adam_step: adam.step,
            adam_hyper: [adam.beta1, adam.beta2, adam.eps],
            params,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    /// Copies parameter values and optimiser moments into a store built from the same config.
    pub fn restore(&self, store: &mut ParamStore, adam: &mut Adam) -> Result<(), HarnessError> {
        if store.len() != self.params.len() {
            return Err(HarnessError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for rec in &self.params {
            let id = store.id_of(&rec.name).ok_or_else(|| {
                HarnessError::Checkpoint(format!("unknown parameter `{}`", rec.name))
            })?;
            store
                .assign(&rec.name, rec.value.clone())
                .map_err(|e| HarnessError::Checkpoint(format!("{}: {e}", rec.name)))?;
            adam.first[id.index()] = rec.first.clone();
            adam.second[id.index()] = rec.second.clone();
        }
        adam.step = self.adam_step;
        [adam.beta1, adam.beta2, adam.eps] = self.adam_hyper;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(w, self.config.canonical().as_bytes())?;
        w.write_all(&self.fingerprint)?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.rng_seed)?;
        w.write_all(&self.rng_stream.to_le_bytes())?;
        w.write_all(&self.rng_word_pos.to_le_bytes())?;
        w.write_all(&self.adam_step.to_le_bytes())?;
        for h in self.adam_hyper {
            w.write_all(&h.to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            write_bytes(w, p.name.as_bytes())?;
            write_tensor(w, &p.value)?;
            write_tensor(w, &p.first)?;
            write_tensor(w, &p.second)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, HarnessError> {
        let bad = |msg: &str| HarnessError::Checkpoint(msg.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(HarnessError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let text =
            String::from_utf8(read_bytes(r)?).map_err(|_| bad("config text is not UTF-8"))?;
        let config = RunConfig::from_toml(&text)?;
        let fingerprint: [u8; 32] = read_array(r)?;
        if fingerprint != config.fingerprint() {
            return Err(bad("stored fingerprint does not match the stored config"));
        }
        let epoch = read_u64(r)?;
        let step = read_u64(r)?;
        let rng_seed = read_array(r)?;
        let rng_stream = read_u64(r)?;
        let rng_word_pos = u128::from_le_bytes(read_array(r)?);
        let adam_step = read_u64(r)?;
        let adam_hyper = [read_f64(r)?, read_f64(r)?, read_f64(r)?];
        let count = read_u64(r)?;
        let mut params = Vec::new();
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(r)?)
                .map_err(|_| bad("parameter name is not UTF-8"))?;
            params.push(ParamRecord {
                name,
                value: read_tensor(r)?,
                first: read_tensor(r)?,
                second: read_tensor(r)?,
            });
        }
        Ok(Self {
            config,
            fingerprint,
            epoch,
            step,
            rng_seed,
            rng_stream,
            rng_word_pos,
            adam_step,
            adam_hyper,
            params,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to memory cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
        let mut w = io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
        Self::read_from(&mut io::BufReader::new(file))
    }
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> io::Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> io::Result<()> {
    w.write_all(&(t.ndim() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    read_array(r).map(u64::from_le_bytes)
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    read_array(r).map(f64::from_le_bytes)
}

/// Lengths are capped so a corrupt header cannot request an absurd allocation.
const MAX_LEN: u64 = 1 << 34;

fn read_len(r: &mut impl Read) -> Result<usize, HarnessError> {
    let n = read_u64(r)?;
    if n > MAX_LEN {
        return Err(HarnessError::Checkpoint(format!("implausible length {n}")));
    }
    Ok(n as usize)
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>, HarnessError> {
    let n = read_len(r)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor, HarnessError> {
    let ndim = read_len(r)?;
    let shape = (0..ndim)
        .map(|_| read_len(r))
        .collect::<Result<Vec<_>, _>>()?;
    let numel: usize = shape.iter().product();
    if numel as u64 > MAX_LEN {
        return Err(HarnessError::Checkpoint(format!(
            "implausible tensor shape {shape:?}"
        )));
    }
    let data = (0..numel)
        .map(|_| read_f64(r))
        .collect::<io::Result<Vec<_>>>()?;
    Ok(Tensor::from_vec(&shape, data))
}
