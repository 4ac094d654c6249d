//! Raw float block container.
//!
//! Layout: magic bytes `CKDB`, then three little-endian `u32` values
//! (width, height, channels), then `width*height*channels` little-endian
//! IEEE-754 `f32` values, row-major with channels innermost. Descriptor
//! blocks and heatmaps share this container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CKDB";

#[derive(Debug, Error)]
pub enum BlockIoError {
    #[error("i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, expected CKDB")]
    BadMagic,
    #[error("value count {got} does not match header {width}x{height}x{channels}")]
    BadLength {
        width: usize,
        height: usize,
        channels: usize,
        got: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Block {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

/// Writes a block; values are narrowed to `f32` on disk.
pub fn write_block(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    values: &[f64],
) -> Result<(), BlockIoError> {
    if values.len() != width * height * channels {
        return Err(BlockIoError::BadLength {
            width,
            height,
            channels,
            got: values.len(),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for dim in [width, height, channels] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_block(path: &Path) -> Result<Block, BlockIoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(BlockIoError::BadMagic);
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [width, height, channels] = dims;
    let count = width * height * channels;
    let mut values = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        values.push(f64::from(f32::from_le_bytes(buf)));
    }
    Ok(Block {
        width,
        height,
        channels,
        values,
    })
}
