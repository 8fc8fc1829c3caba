use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::graph::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Option<Tensor>,
    frozen: bool,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// Owns every trainable tensor of a model. Networks refer to entries by
/// [`ParamId`], which lets several networks share parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

const STREAM_MAGIC: &[u8; 4] = b"LMVP";
const STREAM_VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// Overwrites a value; refuses frozen parameters.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Err(Error::contract(format!("parameter {} is frozen", p.name)));
        }
        if p.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {}: shape {:?} cannot take {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: ParamId) -> Option<Tensor> {
        self.params[id.0].grad.take()
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn zero_grad(&mut self, id: ParamId) {
        if let Some(g) = &mut self.params[id.0].grad {
            g.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Adds the leaf gradients a graph computed for bound parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for &(id, var) in graph.bindings() {
            let Some(g) = graph.grad(var) else { continue };
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                slot => *slot = Some(g.clone()),
            }
        }
    }

    /// SHA-256 over the names, shapes and little-endian values of `ids`.
    pub fn digest(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for &id in ids {
            let p = &self.params[id.0];
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes the versioned parameter stream: a manifest of names, frozen
    /// flags and shapes followed by every value as a little-endian `f64`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(STREAM_MAGIC)?;
        w.write_all(&STREAM_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[p.frozen as u8])?;
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for p in &self.params {
            for &v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut reader = CountingReader {
            inner: r,
            offset: 0,
        };
        let magic: [u8; 4] = reader.array()?;
        if &magic != STREAM_MAGIC {
            return Err(Error::format(0, "bad parameter stream magic"));
        }
        let version = u32::from_le_bytes(reader.array()?);
        if version != STREAM_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported parameter stream version {version}"),
            ));
        }
        let count = u32::from_le_bytes(reader.array()?) as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(reader.array()?) as usize;
            let name = String::from_utf8(reader.bytes(len)?)
                .map_err(|_| Error::format(reader.offset, "parameter name is not UTF-8"))?;
            let [frozen] = reader.array()?;
            let ndim = u32::from_le_bytes(reader.array()?) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(reader.array()?) as usize);
            }
            manifest.push((name, frozen != 0, shape));
        }
        let mut params = Vec::with_capacity(count);
        for (name, frozen, shape) in manifest {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(reader.array()?));
            }
            params.push(Parameter {
                name,
                value: Tensor::new(shape, data)?,
                grad: None,
                frozen,
            });
        }
        Ok(Self { params })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }
}

pub(crate) struct CountingReader<'a, R> {
    pub inner: &'a mut R,
    pub offset: u64,
}

impl<R: Read> CountingReader<'_, R> {
    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| {
            Error::format(self.offset, format!("truncated: expected {N} more bytes"))
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| {
            Error::format(self.offset, format!("truncated: expected {n} more bytes"))
        })?;
        self.offset += n as u64;
        Ok(buf)
    }
}
