//! Model checkpoint file format (`LQMP`).
//!
//! Little-endian layout: magic "LQMP", version u32, architecture id u32
//! (1 = convnet, 2 = linfilter), block count u32, then per block a u64
//! value count followed by the f64 values in declared block order.
//! Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::denoiser::model::{Architecture, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LQMP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn arch_id(arch: Architecture) -> u32 {
    match arch {
        Architecture::ConvNet => 1,
        Architecture::LinFilter => 2,
    }
}

fn arch_from_id(id: u32) -> Result<Architecture> {
    match id {
        1 => Ok(Architecture::ConvNet),
        2 => Ok(Architecture::LinFilter),
        other => Err(Error::Format { offset: 8, message: format!("unknown architecture id {other}") }),
    }
}

pub fn write_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    params.validate()?;
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(&CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&arch_id(params.arch).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(params.blocks.len() as u32).to_le_bytes()).map_err(io_err)?;
    for block in &params.blocks {
        w.write_all(&(block.values.len() as u64).to_le_bytes()).map_err(io_err)?;
        for &v in &block.values {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;
    let mut read = |buf: &mut [u8]| -> Result<()> {
        let start = offset;
        r.read_exact(buf).map_err(|_| Error::Format {
            offset: start,
            message: format!("truncated checkpoint: expected {} more bytes", buf.len()),
        })?;
        offset += buf.len() as u64;
        Ok(())
    };
    let mut magic = [0u8; 4];
    read(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}") });
    }
    let mut u32buf = [0u8; 4];
    read(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    read(&mut u32buf)?;
    let arch = arch_from_id(u32::from_le_bytes(u32buf))?;
    read(&mut u32buf)?;
    let n_blocks = u32::from_le_bytes(u32buf) as usize;
    let shapes = arch.block_shapes();
    if n_blocks != shapes.len() {
        return Err(Error::Format {
            offset: 12,
            message: format!("{} blocks on disk, {} expected for {}", n_blocks, shapes.len(), arch.tag()),
        });
    }
    let mut params = ModelParams::zeros(arch);
    for (block, &(name, len)) in params.blocks.iter_mut().zip(shapes) {
        let mut u64buf = [0u8; 8];
        read(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        if count != len {
            return Err(Error::Format {
                offset: offset - 8,
                message: format!("block {name} has {count} values on disk, expected {len}"),
            });
        }
        for v in block.values.iter_mut() {
            let mut f64buf = [0u8; 8];
            read(&mut f64buf)?;
            *v = f64::from_le_bytes(f64buf);
        }
    }
    Ok(params)
}
