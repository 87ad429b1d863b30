//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GCWT" | version u32 | form u8 | variant u8 | num_classes u32 | base_c u32 | count u32
//! count × ( name_len u16 | name | rank u8 | dims u32 × rank | f32 × prod(dims) )
//! ```
//!
//! Tensor names are the dotted parameter paths of the network followed by
//! `.weight`/`.bias` for convolutions and `.gamma`/`.beta`/`.mean`/`.var`
//! for batch norms. The pyramid-pooling kind and the presence of the
//! auxiliary head are recovered from the names.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use gcnet_core::blocks::{ParamMut, ParamRef, PpmKind};
use gcnet_core::network::{Form, Network, NetworkConfig, Variant};
use gcnet_core::Real;

pub const MAGIC: &[u8; 4] = b"GCWT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}, expected {VERSION}")]
    Version(u32),
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Core(#[from] gcnet_core::Error),
}

pub type Result<T> = std::result::Result<T, FileError>;

/// One stored tensor, already narrowed to f32.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

fn narrow<T: Real>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.as_f64() as f32).collect()
}

/// Every tensor of `net` in parameter order.
pub fn tensors<T: Real>(net: &Network<T>) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (name, p) in net.params() {
        match p {
            ParamRef::Conv(k) => {
                let d = k.weight.dims();
                out.push(NamedTensor { name: format!("{name}.weight"), dims: vec![d.n, d.c, d.h, d.w], data: narrow(k.weight.data()) });
                out.push(NamedTensor { name: format!("{name}.bias"), dims: vec![k.bias.len()], data: narrow(&k.bias) });
            }
            ParamRef::Bn(bn) => {
                for (field, v) in [("gamma", &bn.gamma), ("beta", &bn.beta), ("mean", &bn.mean), ("var", &bn.var)] {
                    out.push(NamedTensor { name: format!("{name}.{field}"), dims: vec![v.len()], data: narrow(v) });
                }
            }
        }
    }
    out
}

pub fn encode<T: Real>(net: &Network<T>) -> Result<Vec<u8>> {
    let ts = tensors(net);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(match net.form {
        Form::Training => 0,
        Form::Inference => 1,
    });
    buf.push(net.cfg.variant.code());
    buf.extend_from_slice(&u32_of(net.cfg.num_classes)?.to_le_bytes());
    buf.extend_from_slice(&u32_of(net.cfg.base_channels)?.to_le_bytes());
    buf.extend_from_slice(&u32_of(ts.len())?.to_le_bytes());
    for t in &ts {
        let name_len = u16::try_from(t.name.len()).map_err(|_| FileError::Malformed(format!("name too long: {}", t.name)))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.dims.len() as u8);
        for &d in &t.dims {
            buf.extend_from_slice(&u32_of(d)?.to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| FileError::Malformed(format!("{v} does not fit in 32 bits")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(FileError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Header fields of a model file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub form: Form,
    pub variant: Variant,
    pub num_classes: usize,
    pub base_channels: usize,
}

/// Parses the header and every tensor without building a network.
pub fn parse(bytes: &[u8]) -> Result<(Header, Vec<NamedTensor>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(FileError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FileError::Version(version));
    }
    let form = match r.u8()? {
        0 => Form::Training,
        1 => Form::Inference,
        b => return Err(FileError::Malformed(format!("unknown form byte {b}"))),
    };
    let code = r.u8()?;
    let variant = Variant::from_code(code).ok_or_else(|| FileError::Malformed(format!("unknown variant byte {code}")))?;
    let num_classes = r.u32()? as usize;
    let base_channels = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut ts = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| FileError::Malformed("tensor name is not UTF-8".into()))?.to_owned();
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| FileError::Malformed(format!("{name}: dims overflow")))?;
        let raw = r.take(n.checked_mul(4).ok_or(FileError::Truncated(bytes.len()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        ts.push(NamedTensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(FileError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((Header { form, variant, num_classes, base_channels }, ts))
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Network<T>> {
    let (h, ts) = parse(bytes)?;
    let mut by_name: HashMap<&str, &NamedTensor> = HashMap::with_capacity(ts.len());
    for t in &ts {
        if by_name.insert(&t.name, t).is_some() {
            return Err(FileError::Malformed(format!("duplicate tensor {}", t.name)));
        }
    }
    let ppm = if by_name.contains_key("ppm.global.conv.weight") { PpmKind::Global } else { PpmKind::Dappm };
    let cfg = NetworkConfig::new(h.variant, h.num_classes).with_base_channels(h.base_channels).with_ppm(ppm);
    let mut net = Network::<T>::skeleton(cfg, h.form)?;
    if !by_name.keys().any(|n| n.starts_with("aux_head.")) {
        net.aux_head = None;
    }
    let mut used = 0;
    {
        let mut fill = |name: String, expect: &[usize], dst: &mut [T]| -> Result<()> {
            let t = by_name.get(name.as_str()).ok_or_else(|| FileError::Malformed(format!("missing tensor {name}")))?;
            if t.dims != expect {
                return Err(FileError::Malformed(format!("{name}: dims {:?}, expected {expect:?}", t.dims)));
            }
            for (d, &s) in dst.iter_mut().zip(&t.data) {
                *d = T::of(s as f64);
            }
            used += 1;
            Ok(())
        };
        for (name, p) in net.params_mut() {
            match p {
                ParamMut::Conv(k) => {
                    let d = k.weight.dims();
                    fill(format!("{name}.weight"), &[d.n, d.c, d.h, d.w], k.weight.data_mut())?;
                    let n = k.bias.len();
                    fill(format!("{name}.bias"), &[n], &mut k.bias)?;
                }
                ParamMut::Bn(bn) => {
                    let c = bn.channels();
                    fill(format!("{name}.gamma"), &[c], &mut bn.gamma)?;
                    fill(format!("{name}.beta"), &[c], &mut bn.beta)?;
                    fill(format!("{name}.mean"), &[c], &mut bn.mean)?;
                    fill(format!("{name}.var"), &[c], &mut bn.var)?;
                }
            }
        }
    }
    if used != ts.len() {
        return Err(FileError::Malformed(format!("{} tensors do not belong to this network", ts.len() - used)));
    }
    Ok(net)
}

pub fn save_model<T: Real>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(net)?)?;
    Ok(())
}

pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<Network<T>> {
    decode(&fs::read(path)?)
}
