//! Binary container for named parameter arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "UDPCKPT\0"
//! version  u32
//! meta     u32 length + UTF-8 JSON (configuration and vocabularies)
//! count    u32
//! count x { name: u32 length + UTF-8, rank: u32, dims: rank x u64,
//!           values: prod(dims) x f64 }
//! ```

use std::io::{self, Read, Write};

use super::{ParamStore, Parameter, Tensor};

const MAGIC: &[u8; 8] = b"UDPCKPT\0";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: String,
    pub params: ParamStore,
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_string<R: Read>(r: &mut R) -> io::Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_container<W: Write>(mut w: W, meta: &str, params: &ParamStore) -> io::Result<()> {
    w.write_all(MAGIC)?;
    write_u32(&mut w, CONTAINER_VERSION)?;
    write_u32(&mut w, meta.len() as u32)?;
    w.write_all(meta.as_bytes())?;
    write_u32(&mut w, params.len() as u32)?;
    for p in params.iter() {
        write_u32(&mut w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        write_u32(&mut w, p.value.rank() as u32)?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_container<R: Read>(mut r: R) -> io::Result<Container> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != CONTAINER_VERSION {
        return Err(invalid(format!("unsupported checkpoint version {}", version)));
    }
    let meta = read_string(&mut r)?;
    let count = read_u32(&mut r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let size: usize = shape.iter().product();
        let mut data = Vec::with_capacity(size);
        let mut buf = [0u8; 8];
        for _ in 0..size {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        if params.id(&name).is_some() {
            return Err(invalid(format!("duplicate parameter {}", name)));
        }
        params.add(Parameter::new(name, Tensor::new(shape, data)));
    }
    Ok(Container { meta, params })
}
