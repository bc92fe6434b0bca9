//! SSG1 binary model format.
//!
//! Layout: magic `"SSG1"`, little-endian `u32` header length, header
//! (version, creation seed, input shape, layer specs with frozen flags),
//! little-endian `f64` parameter blocks in layer order, and a trailing
//! CRC-32 over everything between the magic and the checksum. Round-trips
//! are bit-exact.

use super::{LayerKind, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SSG1";
const VERSION: u32 = 1;

const KIND_DENSE: u8 = 0;
const KIND_RELU: u8 = 1;
const KIND_CONV: u8 = 2;
const KIND_FLATTEN: u8 = 3;
const KIND_SOFTMAX: u8 = 4;

/// Serializes a network to the SSG1 byte layout.
pub fn save_model(net: &Network<f64>) -> Vec<u8> {
    let mut header = Vec::new();
    push_u32(&mut header, VERSION);
    header.extend_from_slice(&net.rng_seed().to_le_bytes());
    push_u32(&mut header, net.input_shape().len() as u32);
    for &d in net.input_shape() {
        push_u32(&mut header, d as u32);
    }
    push_u32(&mut header, net.n_layers() as u32);
    for layer in net.layers() {
        let spec = &layer.spec;
        match spec.kind {
            LayerKind::Dense { input, output } => {
                header.push(KIND_DENSE);
                header.push(spec.frozen as u8);
                push_u32(&mut header, input as u32);
                push_u32(&mut header, output as u32);
            }
            LayerKind::Relu => {
                header.push(KIND_RELU);
                header.push(spec.frozen as u8);
            }
            LayerKind::ConvLite {
                filters,
                kernel,
                stride,
            } => {
                header.push(KIND_CONV);
                header.push(spec.frozen as u8);
                push_u32(&mut header, filters as u32);
                push_u32(&mut header, kernel as u32);
                push_u32(&mut header, stride as u32);
            }
            LayerKind::Flatten => {
                header.push(KIND_FLATTEN);
                header.push(spec.frozen as u8);
            }
            LayerKind::SoftmaxHead { classes } => {
                header.push(KIND_SOFTMAX);
                header.push(spec.frozen as u8);
                push_u32(&mut header, classes as u32);
            }
        }
    }

    let mut payload = Vec::new();
    push_u32(&mut payload, header.len() as u32);
    payload.extend_from_slice(&header);
    for layer in net.layers() {
        if let Some((w, b)) = &layer.params {
            for &v in w.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            for &v in b.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    let mut out = Vec::with_capacity(4 + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    let crc = crc32(&payload);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses SSG1 bytes back into a network.
pub fn load_model(bytes: &[u8]) -> Result<Network<f64>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("model magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: u32::from_be_bytes(*MAGIC),
            got: u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
        });
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated("model checksum".into()));
    }
    let payload = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader::new(payload);
    let header_len = r.u32("header length")? as usize;
    let header_end = r.pos + header_len;
    if header_end > payload.len() {
        return Err(Error::Truncated("model header".into()));
    }

    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            got: version,
        });
    }
    let rng_seed = r.u64("creation seed")?;
    let n_dims = r.u32("input rank")? as usize;
    let mut input_shape = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        input_shape.push(r.u32("input extent")? as usize);
    }
    let n_layers = r.u32("layer count")? as usize;
    let mut specs = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let kind = r.u8(&format!("layer {i} kind"))?;
        let frozen = r.u8(&format!("layer {i} frozen flag"))? != 0;
        let kind = match kind {
            KIND_DENSE => LayerKind::Dense {
                input: r.u32("dense input width")? as usize,
                output: r.u32("dense output width")? as usize,
            },
            KIND_RELU => LayerKind::Relu,
            KIND_CONV => LayerKind::ConvLite {
                filters: r.u32("conv filters")? as usize,
                kernel: r.u32("conv kernel")? as usize,
                stride: r.u32("conv stride")? as usize,
            },
            KIND_FLATTEN => LayerKind::Flatten,
            KIND_SOFTMAX => LayerKind::SoftmaxHead {
                classes: r.u32("softmax classes")? as usize,
            },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown layer kind tag {other} in model header"
                )))
            }
        };
        specs.push(LayerSpec { kind, frozen });
    }
    if r.pos != header_end {
        return Err(Error::InvalidArgument(
            "model header length does not match its contents".into(),
        ));
    }

    // Rebuild the stack to learn parameter shapes, then overwrite with the
    // stored values so the round-trip is bit-exact.
    let template = Network::<f64>::new(input_shape.clone(), specs.clone(), rng_seed)?;
    let mut params = Vec::with_capacity(n_layers);
    for layer in template.layers() {
        match &layer.params {
            Some((w, b)) => {
                let wt = r.f64_block(w.shape().to_vec(), "weight block")?;
                let bt = r.f64_block(b.shape().to_vec(), "bias block")?;
                params.push(Some((wt, bt)));
            }
            None => params.push(None),
        }
    }
    if r.pos != payload.len() {
        return Err(Error::InvalidArgument(format!(
            "{} trailing bytes after model parameters",
            payload.len() - r.pos
        )));
    }
    Network::from_parts(input_shape, specs, rng_seed, params)
}

pub fn save_model_file(net: &Network<f64>, path: &Path) -> Result<()> {
    std::fs::write(path, save_model(net))?;
    Ok(())
}

pub fn load_model_file(path: &Path) -> Result<Network<f64>> {
    load_model(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(what.into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64_block(&mut self, shape: Vec<usize>, what: &str) -> Result<Tensor<f64>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Bitwise CRC-32 (IEEE 802.3 polynomial, reflected).
pub(crate) fn crc32(bytes: &[u8]) -> u32 {
    let mut c = 0xffff_ffffu32;
    for &b in bytes {
        c ^= u32::from(b);
        for _ in 0..8 {
            let mask = (c & 1).wrapping_neg();
            c = (c >> 1) ^ (0xedb8_8320 & mask);
        }
    }
    !c
}
