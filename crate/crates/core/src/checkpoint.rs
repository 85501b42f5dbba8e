//! Little-endian tensor container shared by network checkpoints ("BMA1"),
//! variational posteriors ("VIP1") and MCMC sample sets ("MCS1").
//!
//! Layout: 4-byte magic, `u32` tensor count, then for each tensor its rank
//! (`u32`) and dims (`u32` each), then every tensor's `f32` values in
//! row-major order, and finally the last-layer span as two `u64` offsets
//! into the concatenated values.

use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{BmaError, Result};
use crate::nn::{Architecture, Network, Scalar};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BMA1";
pub const POSTERIOR_MAGIC: [u8; 4] = *b"VIP1";
pub const SAMPLES_MAGIC: [u8; 4] = *b"MCS1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(BmaError::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub tensors: Vec<Tensor>,
    pub span: Range<u64>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| BmaError::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| BmaError::Format(format!("truncated span: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

impl Container {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.magic)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                let d = u32::try_from(d)
                    .map_err(|_| BmaError::Format(format!("dimension {d} exceeds u32")))?;
                w.write_all(&d.to_le_bytes())?;
            }
        }
        let mut buf = Vec::with_capacity(4 * self.tensors.iter().map(|t| t.data.len()).sum::<usize>());
        for t in &self.tensors {
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        w.write_all(&self.span.start.to_le_bytes())?;
        w.write_all(&self.span.end.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, magic: [u8; 4]) -> Result<Self> {
        let mut found = [0u8; 4];
        r.read_exact(&mut found)
            .map_err(|e| BmaError::Format(format!("missing magic: {e}")))?;
        if found != magic {
            return Err(BmaError::Format(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&found)
            )));
        }
        let count = read_u32(r)? as usize;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            shapes.push(shape);
        }
        let mut tensors = Vec::with_capacity(count);
        for shape in shapes {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; 4 * n];
            r.read_exact(&mut bytes)
                .map_err(|e| BmaError::Format(format!("truncated tensor data: {e}")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor { shape, data });
        }
        let start = read_u64(r)?;
        let end = read_u64(r)?;
        let total: usize = tensors.iter().map(|t| t.data.len()).sum();
        if start > end || end > total as u64 {
            return Err(BmaError::Format(format!(
                "span {start}..{end} outside {total} stored values"
            )));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(BmaError::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            magic,
            tensors,
            span: start..end,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    /// Writes through a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice(), magic)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// A full parameter snapshot of a network, stored in 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightCheckpoint {
    pub shapes: Vec<Vec<usize>>,
    pub weights: Vec<f32>,
    pub last_layer_span: Range<usize>,
}

impl WeightCheckpoint {
    pub fn from_network<T: Scalar>(net: &Network<T>) -> Self {
        Self {
            shapes: net.param_shapes(),
            weights: net.weights().iter().map(|w| w.as_f64() as f32).collect(),
            last_layer_span: net.last_layer_span(),
        }
    }

    /// Rebuilds a network, checking every tensor shape against `arch`.
    pub fn into_network(self, arch: Architecture) -> Result<Network<f32>> {
        let net = Network::<f32>::zeros(arch)?;
        if net.param_shapes() != self.shapes {
            return Err(BmaError::Dimension(format!(
                "checkpoint tensors {:?} do not match architecture {:?}",
                self.shapes,
                net.param_shapes()
            )));
        }
        if net.last_layer_span() != self.last_layer_span {
            return Err(BmaError::Format(format!(
                "checkpoint last-layer span {:?} disagrees with architecture {:?}",
                self.last_layer_span,
                net.last_layer_span()
            )));
        }
        let mut net = net;
        net.set_weights(self.weights)?;
        Ok(net)
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = Vec::with_capacity(self.shapes.len());
        let mut offset = 0;
        for shape in &self.shapes {
            let n: usize = shape.iter().product();
            tensors.push(Tensor {
                shape: shape.clone(),
                data: self.weights[offset..offset + n].to_vec(),
            });
            offset += n;
        }
        Container {
            magic: CHECKPOINT_MAGIC,
            tensors,
            span: self.last_layer_span.start as u64..self.last_layer_span.end as u64,
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.magic != CHECKPOINT_MAGIC {
            return Err(BmaError::Format("not a network checkpoint".into()));
        }
        let shapes = c.tensors.iter().map(|t| t.shape.clone()).collect();
        let weights = c.tensors.into_iter().flat_map(|t| t.data).collect();
        Ok(Self {
            shapes,
            weights,
            last_layer_span: c.span.start as usize..c.span.end as usize,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path, CHECKPOINT_MAGIC)?)
    }
}
