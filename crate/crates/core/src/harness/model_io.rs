//! Binary model files.
//!
//! Layout (little-endian): magic `CSGD`, version `u16`, layer count `u32`;
//! per layer: op kind `u8`, kernel dims `4 x u32`, stride `u32`, padding `u32`,
//! then kernel, mu, sigma, gamma, beta as `f32`; edge count `u32` and per edge
//! producer `u32`, consumer `u32`, kind `u8`; finally a CRC-32 of every
//! preceding byte. Parameters are always stored as `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Combine, Edge, Layer, Network, OpKind};
use crate::ops::LayerParams;
use crate::tensor::{Scalar, Tensor4};

const MAGIC: &[u8; 4] = b"CSGD";
const VERSION: u16 = 1;

pub fn encode_model<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    let put_f32 = |out: &mut Vec<u8>, v: &[T]| {
        for &x in v {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    };
    for layer in net.layers() {
        let p = &layer.params;
        out.push(layer.kind as u8);
        for d in p.kernel.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(p.stride as u32).to_le_bytes());
        out.extend_from_slice(&(p.padding as u32).to_le_bytes());
        put_f32(&mut out, p.kernel.data());
        put_f32(&mut out, &p.mu);
        put_f32(&mut out, &p.sigma);
        put_f32(&mut out, &p.gamma);
        put_f32(&mut out, &p.beta);
    }
    out.extend_from_slice(&(net.edges().len() as u32).to_le_bytes());
    for e in net.edges() {
        out.extend_from_slice(&(e.producer as u32).to_le_bytes());
        out.extend_from_slice(&(e.consumer as u32).to_le_bytes());
        out.push(e.kind as u8);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptFile(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn floats<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::CorruptFile("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect())
    }
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
        return Err(Error::CorruptFile(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CorruptFile("bad magic".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(Error::CorruptFile("checksum mismatch".into()));
    }
    let mut r = Reader { buf: payload, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::CorruptFile(format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let mut layers = Vec::with_capacity(n.min(1 << 16));
    for l in 0..n {
        let kind = r.u8()?;
        let kind = OpKind::from_u8(kind)
            .ok_or_else(|| Error::CorruptFile(format!("layer {l}: unknown op kind {kind}")))?;
        let shape = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let (stride, padding) = (r.u32()?, r.u32()?);
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::CorruptFile(format!("layer {l}: kernel size overflow")))?;
        let kernel = Tensor4::from_vec(shape, r.floats(len)?)?;
        let c = shape[3];
        let params = LayerParams {
            kernel,
            mu: r.floats(c)?,
            sigma: r.floats(c)?,
            gamma: r.floats(c)?,
            beta: r.floats(c)?,
            stride,
            padding,
        };
        layers.push(Layer { kind, params });
    }
    let m = r.u32()?;
    let mut edges = Vec::with_capacity(m.min(1 << 16));
    for _ in 0..m {
        let (p, c) = (r.u32()?, r.u32()?);
        let kind = r.u8()?;
        let kind = Combine::from_u8(kind)
            .ok_or_else(|| Error::CorruptFile(format!("edge {p}->{c}: unknown kind {kind}")))?;
        edges.push(Edge::new(p, c, kind));
    }
    if r.pos != payload.len() {
        return Err(Error::CorruptFile(format!(
            "{} trailing bytes",
            payload.len() - r.pos
        )));
    }
    Network::new(layers, edges)
}

pub fn save_model<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_model(net))?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Network<T>> {
    decode_model(&fs::read(path)?)
}
