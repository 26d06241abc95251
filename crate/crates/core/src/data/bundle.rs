//! On-disk format for one sample's precomputed feature bundle.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FDB1"  magic
//! u32     format version (1)
//! string  sample id
//! u64 x7  global_rows, local_slots, text_slots, d_global, d_local, d_text, classes
//! u8 x local_slots   object-slot validity (0/1)
//! u8 x text_slots    text-slot validity (0/1)
//! f64     global data, row-major
//! f64     local data, row-major
//! f64     text data, row-major
//! f64     label entries
//! ```
//!
//! Readers are strict: bad magic, truncation, stray mask bytes, and
//! non-finite floats are all `Format` errors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::wire;
use crate::error::{Error, Result};
use crate::fusion::{DatasetDims, FeatureBundle};
use crate::tensor::Tensor;

pub const BUNDLE_MAGIC: &[u8; 4] = b"FDB1";
pub const BUNDLE_VERSION: u32 = 1;

/// Dimensions and identity of a stored bundle, readable without loading
/// the feature payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BundleHeader {
    pub sample_id: String,
    pub dims: DatasetDims,
    pub classes: usize,
}

pub fn write_bundle(path: &Path, bundle: &FeatureBundle) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::io(format!("creating bundle {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    write_bundle_to(&mut w, bundle)?;
    w.flush().map_err(|e| Error::io("flushing bundle", e))
}

pub fn write_bundle_to<W: Write>(w: &mut W, b: &FeatureBundle) -> Result<()> {
    w.write_all(BUNDLE_MAGIC)
        .map_err(|e| Error::io("writing bundle magic", e))?;
    wire::write_u32(w, BUNDLE_VERSION)?;
    wire::write_string(w, &b.sample_id)?;
    for dim in [
        b.global.rows(),
        b.local.rows(),
        b.text.rows(),
        b.global.cols(),
        b.local.cols(),
        b.text.cols(),
        b.label.len(),
    ] {
        wire::write_u64(w, dim as u64)?;
    }
    for mask in [&b.local_valid, &b.text_valid] {
        for &v in mask.iter() {
            wire::write_u8(w, u8::from(v))?;
        }
    }
    wire::write_f64_slice(w, b.global.data())?;
    wire::write_f64_slice(w, b.local.data())?;
    wire::write_f64_slice(w, b.text.data())?;
    wire::write_f64_slice(w, &b.label)?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<FeatureBundle> {
    let file =
        File::open(path).map_err(|e| Error::io(format!("opening bundle {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let bundle = read_bundle_from(&mut r)?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => Ok(bundle),
        Ok(_) => Err(Error::Format(format!(
            "bundle {} has trailing bytes",
            path.display()
        ))),
        Err(e) => Err(Error::io("checking bundle end", e)),
    }
}

fn read_mask<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(n);
    for i in 0..n {
        match wire::read_u8(r, what)? {
            0 => mask.push(false),
            1 => mask.push(true),
            other => {
                return Err(Error::Format(format!(
                    "{what} entry {i} must be 0 or 1, got {other}"
                )))
            }
        }
    }
    Ok(mask)
}

fn read_header_inner<R: Read>(r: &mut R) -> Result<(BundleHeader, Vec<bool>, Vec<bool>)> {
    wire::expect_magic(r, BUNDLE_MAGIC, "bundle")?;
    let version = wire::read_u32(r, "bundle version")?;
    if version != BUNDLE_VERSION {
        return Err(Error::Format(format!(
            "unsupported bundle version {version} (this build reads {BUNDLE_VERSION})"
        )));
    }
    let sample_id = wire::read_string(r, "sample id")?;
    let mut dims = [0usize; 7];
    for (i, what) in [
        "global rows",
        "local slots",
        "text slots",
        "global width",
        "local width",
        "text width",
        "class count",
    ]
    .iter()
    .enumerate()
    {
        dims[i] = wire::read_len(r, what)?;
        if dims[i] == 0 {
            return Err(Error::Format(format!("bundle {what} must be positive")));
        }
    }
    let header = BundleHeader {
        sample_id,
        dims: DatasetDims {
            global_rows: dims[0],
            local_slots: dims[1],
            text_slots: dims[2],
            d_global: dims[3],
            d_local: dims[4],
            d_text: dims[5],
        },
        classes: dims[6],
    };
    let local_valid = read_mask(r, header.dims.local_slots, "object mask")?;
    let text_valid = read_mask(r, header.dims.text_slots, "text mask")?;
    Ok((header, local_valid, text_valid))
}

/// Reads identity and shape information only.
pub fn read_header(path: &Path) -> Result<BundleHeader> {
    let file =
        File::open(path).map_err(|e| Error::io(format!("opening bundle {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    Ok(read_header_inner(&mut r)?.0)
}

pub fn read_bundle_from<R: Read>(r: &mut R) -> Result<FeatureBundle> {
    let (header, local_valid, text_valid) = read_header_inner(r)?;
    let d = header.dims;
    let tensor_of = |shape: &[usize], data: Vec<f64>, what: &str| -> Result<Tensor> {
        Tensor::new(shape, data)
            .map_err(|e| Error::Format(format!("bundle {what} block is invalid: {e}")))
    };
    let global = wire::read_f64_vec(r, d.global_rows * d.d_global, "global features")?;
    let local = wire::read_f64_vec(r, d.local_slots * d.d_local, "local features")?;
    let text = wire::read_f64_vec(r, d.text_slots * d.d_text, "text features")?;
    let label = wire::read_f64_vec(r, header.classes, "label")?;
    if label.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(
            "bundle label contains non-finite values".into(),
        ));
    }
    Ok(FeatureBundle {
        sample_id: header.sample_id,
        global: tensor_of(&[d.global_rows, d.d_global], global, "global")?,
        local: tensor_of(&[d.local_slots, d.d_local], local, "local")?,
        local_valid,
        text: tensor_of(&[d.text_slots, d.d_text], text, "text")?,
        text_valid,
        label,
    })
}
