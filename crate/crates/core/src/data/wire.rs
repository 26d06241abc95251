//! Little-endian binary primitives shared by the on-disk formats.
//!
//! Truncated input surfaces as a `Format` error (not `Io`), so a corrupt
//! file is distinguishable from a failing disk.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Upper bound on any length prefix we will honor; counts beyond this are
/// treated as corruption rather than allocation requests.
pub const MAX_LEN: u64 = 1 << 32;

pub fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    w.write_all(&[v]).map_err(|e| Error::io("writing byte", e))
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| Error::io("writing u32", e))
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| Error::io("writing u64", e))
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| Error::io("writing f64", e))
}

pub fn write_f64_slice<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
        .map_err(|e| Error::io("writing f64 block", e))
}

/// Length-prefixed UTF-8.
pub fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
        .map_err(|e| Error::io("writing string", e))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated input while reading {what}"))
        } else {
            Error::io("reading bytes", e)
        }
    })
}

pub fn read_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, what)?;
    Ok(b[0])
}

pub fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// A u64 length prefix, bounds-checked against [`MAX_LEN`].
pub fn read_len<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let n = read_u64(r, what)?;
    if n > MAX_LEN {
        return Err(Error::Format(format!(
            "implausible {what} length {n}; input is corrupt"
        )));
    }
    Ok(n as usize)
}

pub fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_f64_vec<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    read_exact(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let n = read_len(r, what)?;
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
}

/// Checks a fixed magic tag at the current position.
pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    if &b != magic {
        return Err(Error::Format(format!(
            "{what} has wrong magic bytes {:02x?}, expected {:02x?}",
            b, magic
        )));
    }
    Ok(())
}
