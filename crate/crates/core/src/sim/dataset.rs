//! Binary container for the LES initial states and the reference spectrum.
//!
//! Layout (little-endian):
//!
//! ```text
//! "RLXD" | version u32 | les_points u32 | n_elements u32 | dns_points u32
//!        | domain_length f64 | viscosity f64 | forcing f64 | seed u64
//!        | n_snapshots u32 | hold_out u32
//! n_snapshots x tensor (F64, shape [les_points])
//! tensor (F64, shape [dns_points / 2 + 1])   mean reference spectrum
//! ```
//!
//! Tensors use the broker wire layout: dtype u8 | ndim u8 | dims u64 | data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::dns::DnsOutput;
use super::{spectral_filter, FlowField, Grid, SimError};
use crate::spectra::EnergySpectrum;
use crate::wire::{self, Tensor, WireError};

pub const DATASET_MAGIC: [u8; 4] = *b"RLXD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("state {index} is the hold-out state and may only be used for evaluation")]
    HoldOutViolation { index: usize },
    #[error("state index {index} out of range ({count} states)")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: Grid,
    pub dns_points: usize,
    pub viscosity: f64,
    pub forcing: f64,
    pub seed: u64,
    /// LES-resolution initial states, all at `time = 0`.
    pub snapshots: Vec<FlowField>,
    pub hold_out: usize,
    pub mean_spectrum: EnergySpectrum,
}

impl Dataset {
    /// Filters every DNS realization to `les_grid`. The last snapshot is the
    /// hold-out state.
    pub fn from_dns(dns: &DnsOutput, les_grid: Grid, seed: u64) -> Result<Self, DatasetError> {
        let mut snapshots = Vec::with_capacity(dns.snapshots.len());
        for snap in &dns.snapshots {
            let mut f = spectral_filter(snap, les_grid)?;
            f.time = 0.0;
            snapshots.push(f);
        }
        Ok(Self {
            grid: les_grid,
            dns_points: dns.grid.n_points,
            viscosity: dns.viscosity,
            forcing: dns.forcing,
            seed,
            hold_out: snapshots.len() - 1,
            snapshots,
            mean_spectrum: dns.mean_spectrum.clone(),
        })
    }

    /// Indices usable for training.
    pub fn training_indices(&self) -> Vec<usize> {
        (0..self.snapshots.len()).filter(|&i| i != self.hold_out).collect()
    }

    pub fn initial_state(&self, index: usize, test_mode: bool) -> Result<FlowField, DatasetError> {
        if index >= self.snapshots.len() {
            return Err(DatasetError::IndexOutOfRange { index, count: self.snapshots.len() });
        }
        if index == self.hold_out && !test_mode {
            return Err(DatasetError::HoldOutViolation { index });
        }
        Ok(self.snapshots[index].clone())
    }

    pub fn hold_out_state(&self) -> FlowField {
        self.snapshots[self.hold_out].clone()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), DatasetError> {
        let as_u32 = |v: usize| {
            u32::try_from(v).map_err(|_| DatasetError::Malformed(format!("{v} does not fit in u32")))
        };
        w.write_all(&DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&as_u32(self.grid.n_points)?.to_le_bytes())?;
        w.write_all(&as_u32(self.grid.n_elements)?.to_le_bytes())?;
        w.write_all(&as_u32(self.dns_points)?.to_le_bytes())?;
        w.write_all(&self.grid.domain_length.to_le_bytes())?;
        w.write_all(&self.viscosity.to_le_bytes())?;
        w.write_all(&self.forcing.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&as_u32(self.snapshots.len())?.to_le_bytes())?;
        w.write_all(&as_u32(self.hold_out)?.to_le_bytes())?;
        for s in &self.snapshots {
            wire::write_tensor(w, &Tensor::vector_f64(&s.u))?;
        }
        wire::write_tensor(w, &Tensor::vector_f64(&self.mean_spectrum.e_k))?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, DatasetError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != DATASET_MAGIC {
            return Err(DatasetError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(DatasetError::UnsupportedVersion(version));
        }
        let les_points = read_u32(r)? as usize;
        let n_elements = read_u32(r)? as usize;
        let dns_points = read_u32(r)? as usize;
        let domain_length = read_f64(r)?;
        let viscosity = read_f64(r)?;
        let forcing = read_f64(r)?;
        let seed = read_u64(r)?;
        let count = read_u32(r)? as usize;
        let hold_out = read_u32(r)? as usize;
        let grid = Grid::with_length(les_points, n_elements, domain_length)?;
        if count == 0 || hold_out >= count {
            return Err(DatasetError::Malformed(format!("hold-out {hold_out} of {count} snapshots")));
        }
        let mut snapshots = Vec::with_capacity(count);
        for _ in 0..count {
            let u = wire::read_tensor_from(r)?.to_f64()?;
            let field = FlowField::new(grid, u, 0.0)?;
            if !field.is_finite() {
                return Err(DatasetError::Malformed("non-finite snapshot".into()));
            }
            snapshots.push(field);
        }
        let e_k = wire::read_tensor_from(r)?.to_f64()?;
        if e_k.len() != dns_points / 2 + 1 {
            return Err(DatasetError::Malformed(format!(
                "spectrum has {} entries, expected {}",
                e_k.len(),
                dns_points / 2 + 1
            )));
        }
        Ok(Self {
            grid,
            dns_points,
            viscosity,
            forcing,
            seed,
            snapshots,
            hold_out,
            mean_spectrum: EnergySpectrum { e_k },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Reads one initial state from a dataset file, refusing the hold-out state
/// unless `test_mode` is set.
pub fn load_initial_state(path: &Path, index: usize, test_mode: bool) -> Result<FlowField, DatasetError> {
    Dataset::load(path)?.initial_state(index, test_mode)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}
