//! Named parameter collections, Adam, and checkpoint files.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const CKPT_MAGIC: &[u8; 8] = b"WSEDCKPT";
const CKPT_VERSION: u32 = 1;

/// One named tensor. Names are stable identifiers used by checkpoints.
#[derive(Clone, Debug)]
pub struct Parameter<F: Scalar> {
    pub name: String,
    pub tensor: Tensor<F>,
}

/// Ordered collection of uniquely named parameters. Iteration order is
/// insertion order, which fixes the gradient and optimizer state layout.
#[derive(Clone, Debug, Default)]
pub struct Parameters<F: Scalar> {
    items: Vec<Parameter<F>>,
}

impl<F: Scalar> Parameters<F> {
    pub fn new() -> Self {
        Parameters { items: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.items.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        self.items.push(Parameter { name, tensor });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.items.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.items
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.items.iter().position(|p| p.name == name)
    }

    pub fn at(&self, index: usize) -> &Parameter<F> {
        &self.items[index]
    }

    pub fn at_mut(&mut self, index: usize) -> &mut Parameter<F> {
        &mut self.items[index]
    }

    pub fn total_elements(&self) -> usize {
        self.items.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter on `tape` as a differentiable input,
    /// returning handles in collection order.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.items
            .iter()
            .map(|p| tape.input(p.tensor.clone()))
            .collect()
    }

    /// Records every parameter as a constant (inference, no gradients).
    pub fn bind_const(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.items
            .iter()
            .map(|p| tape.constant(p.tensor.clone()))
            .collect()
    }

    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        Parameters {
            items: self
                .items
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }
}

/// Glorot-uniform sample: limit sqrt(6 / (fan_in + fan_out)).
pub fn glorot<F: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product agree")
}

/// Adam accumulators; one slot per parameter in collection order.
pub struct AdamState<F: Scalar> {
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &Parameters<F>) -> Self {
        let zeros: Vec<Tensor<F>> = params
            .iter()
            .map(|p| Tensor::zeros(p.tensor.shape()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. beta1 = 0.9, beta2 = 0.999, eps = 1e-8 added outside
/// the square root, with bias correction. `grads` must align with the
/// parameter collection; a non-finite gradient aborts the step.
pub fn adam_step<F: Scalar>(
    params: &mut Parameters<F>,
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    lr: F,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Config(format!(
            "adam_step: {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.items.iter().zip(grads) {
        if p.tensor.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.tensor.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_all_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient for {}", p.name),
            });
        }
    }
    state.step += 1;
    let b1 = F::from_f64(0.9);
    let b2 = F::from_f64(0.999);
    let eps = F::from_f64(1e-8);
    let t = state.step as i32;
    let c1 = F::ONE - b1.powi(t);
    let c2 = F::ONE - b2.powi(t);
    for i in 0..params.items.len() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = params.items[i].tensor.data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (F::ONE - b1) * g[j];
            v[j] = b2 * v[j] + (F::ONE - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            w[j] = w[j] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Writes parameters as little-endian f32, preceded by a small header
/// (magic, version, parameter count, then name/rank/extents per tensor).
pub fn write_checkpoint<F: Scalar>(path: &Path, params: &Parameters<F>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Config(format!("parameter name too long: {}", p.name)));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        let shape = p.tensor.shape();
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in p.tensor.data() {
            buf.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    file.write_all(&buf).map_err(|e| Error::file(path, e))?;
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`], casting the stored
/// f32 values into `F`.
pub fn read_checkpoint<F: Scalar>(path: &Path) -> Result<Parameters<F>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    let mut cur = Cursor::new(path, &bytes);
    let magic = cur.take(8)?;
    if magic != CKPT_MAGIC {
        return Err(cur.bad("not a checkpoint file (bad magic)"));
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(cur.bad(&format!("unsupported checkpoint version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut params = Parameters::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| cur.bad("parameter name is not UTF-8"))?;
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(F::from_f64(f32::from_le_bytes(
                cur.take(4)?.try_into().expect("len checked"),
            ) as f64));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| cur.bad(&e.to_string()))?;
        params.push(name, tensor)?;
    }
    if !cur.done() {
        return Err(cur.bad("trailing bytes after last parameter"));
    }
    Ok(params)
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Cursor {
            path,
            bytes,
            pos: 0,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.bad("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("len checked"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("len checked"),
        ))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn bad(&self, msg: &str) -> Error {
        Error::Data(format!("{}: {msg}", self.path.display()))
    }
}
