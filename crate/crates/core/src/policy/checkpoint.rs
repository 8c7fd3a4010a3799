//! Checkpoint container.
//!
//! ```text
//! "RLXP" | version u32 | iteration u64 | points_per_element u32 | n_layers u32
//! n_layers x (in_channels u32 | out_channels u32 | kernel u32 | padding u32 | relu u32)
//! tensors: theta, value_params, adam theta m, v, adam value m, v (F64, 1-D)
//! adam theta t u64 | adam value t u64 | value_scale f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AdamState, Architecture, ConvLayer, PolicyError, PolicyParams};
use crate::wire::{self, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RLXP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub params: PolicyParams,
    pub adam_policy: AdamState,
    pub adam_value: AdamState,
}

fn err(e: impl std::fmt::Display) -> PolicyError {
    PolicyError::Checkpoint(e.to_string())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, PolicyError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(err)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, PolicyError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(err)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn new(params: PolicyParams) -> Self {
        let adam_policy = AdamState::new(params.theta.len());
        let adam_value = AdamState::new(params.value_params.len());
        Self { iteration: 0, params, adam_policy, adam_value }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), PolicyError> {
        let arch = &self.params.arch;
        let mut header = Vec::new();
        header.extend_from_slice(&CHECKPOINT_MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&self.iteration.to_le_bytes());
        header.extend_from_slice(&(arch.points_per_element as u32).to_le_bytes());
        header.extend_from_slice(&(arch.layers.len() as u32).to_le_bytes());
        for l in &arch.layers {
            for v in [l.in_channels, l.out_channels, l.kernel, l.padding, l.relu as usize] {
                header.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        w.write_all(&header).map_err(err)?;
        for v in [
            &self.params.theta,
            &self.params.value_params,
            &self.adam_policy.m,
            &self.adam_policy.v,
            &self.adam_value.m,
            &self.adam_value.v,
        ] {
            wire::write_tensor(w, &Tensor::vector_f64(v)).map_err(err)?;
        }
        w.write_all(&self.adam_policy.t.to_le_bytes()).map_err(err)?;
        w.write_all(&self.adam_value.t.to_le_bytes()).map_err(err)?;
        w.write_all(&self.params.value_scale.to_le_bytes()).map_err(err)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, PolicyError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(err)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let iteration = read_u64(r)?;
        let points_per_element = read_u32(r)? as usize;
        let n_layers = read_u32(r)? as usize;
        if n_layers > 64 {
            return Err(err("implausible layer count"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let mut f = [0usize; 5];
            for v in &mut f {
                *v = read_u32(r)? as usize;
            }
            layers.push(ConvLayer {
                in_channels: f[0],
                out_channels: f[1],
                kernel: f[2],
                padding: f[3],
                relu: f[4] != 0,
            });
        }
        let arch = Architecture { points_per_element, layers };
        let mut vecs = Vec::with_capacity(6);
        for _ in 0..6 {
            vecs.push(wire::read_tensor_from(r).map_err(err)?.to_f64().map_err(err)?);
        }
        let t_policy = read_u64(r)?;
        let t_value = read_u64(r)?;
        let value_scale = f64::from_bits(read_u64(r)?);
        let mut it = vecs.into_iter();
        let mut next = || it.next().expect("six tensors read");
        let params = PolicyParams { arch, theta: next(), value_params: next(), value_scale };
        params.validate()?;
        let adam_policy = AdamState { m: next(), v: next(), t: t_policy };
        let adam_value = AdamState { m: next(), v: next(), t: t_value };
        if adam_policy.m.len() != params.theta.len()
            || adam_policy.v.len() != params.theta.len()
            || adam_value.m.len() != params.value_params.len()
            || adam_value.v.len() != params.value_params.len()
        {
            return Err(err("optimizer state does not match the parameters"));
        }
        Ok(Self { iteration, params, adam_policy, adam_value })
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let mut w = BufWriter::new(File::create(path).map_err(err)?);
        self.write_to(&mut w)?;
        w.flush().map_err(err)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::read_from(&mut BufReader::new(File::open(path).map_err(err)?))
    }
}
