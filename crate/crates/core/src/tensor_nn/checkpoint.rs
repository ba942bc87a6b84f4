//! Binary network checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size      field
//! 0       8         magic  b"SRLDNET\0"
//! 8       4         u32    format version (= 1)
//! 12      4         u32    L, number of layer sizes
//! 16      4·L       u32    layer sizes, input first
//! 16+4L   8         u64    P, parameter count (= Σ (fan_in + 1)·fan_out)
//! 24+4L   8·P       f64    parameters in layer order; per layer the
//!                          row-major [fan_out][fan_in] weights, then biases
//! ```

use std::io::{Read, Write};

use super::net::{param_count, DenseNet};
use crate::error::{Error, Result};

pub const NET_MAGIC: &[u8; 8] = b"SRLDNET\0";
pub const NET_VERSION: u32 = 1;

pub fn write_net<W: Write>(net: &DenseNet, mut w: W) -> Result<()> {
    w.write_all(NET_MAGIC)?;
    w.write_all(&NET_VERSION.to_le_bytes())?;
    w.write_all(&(net.sizes().len() as u32).to_le_bytes())?;
    for &s in net.sizes() {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    w.write_all(&(net.num_params() as u64).to_le_bytes())?;
    for p in net.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn net_to_bytes(net: &DenseNet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + 4 * net.sizes().len() + 8 * net.num_params());
    write_net(net, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_net<R: Read>(mut r: R) -> Result<DenseNet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != NET_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a network checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != NET_VERSION {
        return Err(Error::Checkpoint(format!("unsupported network checkpoint version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    if !(2..=64).contains(&n) {
        return Err(Error::Checkpoint(format!("implausible layer count {n}")));
    }
    let sizes = (0..n).map(|_| read_u32(&mut r).map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
    let count = read_u64(&mut r)? as usize;
    if count != param_count(&sizes) {
        return Err(Error::Checkpoint(format!("parameter count {count} does not match layer sizes {sizes:?}")));
    }
    let mut params = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut b).map_err(truncated)?;
        params.push(f64::from_le_bytes(b));
    }
    DenseNet::from_params(&sizes, params)
}
