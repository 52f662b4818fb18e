//! Dense 3D scalar volumes, patch grids, and overlap-averaged reassembly.
//!
//! Volumes store SUV values in x-fastest order (`idx = x + nx*(y + ny*z)`)
//! as `f64`; the on-disk format (`LQMV`) stores single precision. Patch
//! grids tile a volume with cubic windows at a fixed stride, appending a
//! boundary-flush window on each axis whenever the stride does not divide
//! the remaining extent, so every voxel is covered.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::smooth;

/// Magic bytes of the volume file format.
pub const VOLUME_MAGIC: [u8; 4] = *b"LQMV";
/// Current volume file format version.
pub const VOLUME_VERSION: u32 = 1;

/// A dense 3D scalar field in SUV units with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    /// Builds a volume after validating the type invariants: positive
    /// dimensions and spacings, matching data length, finite values.
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if voxel_size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!("voxel size must be positive, got {voxel_size:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value {} at linear index {i}", data[i])));
        }
        Ok(Self { dims, voxel_size, data })
    }

    /// A volume filled with a constant value.
    pub fn filled(dims: [usize; 3], voxel_size: [f64; 3], value: f64) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, voxel_size, vec![value; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Linear index of voxel (x, y, z); x varies fastest.
    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.idx(x, y, z)]
    }

    /// Physical volume of one voxel in mm^3.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.voxel_size[0] * self.voxel_size[1] * self.voxel_size[2]
    }

    /// Gaussian-smoothed copy (separable kernel, `fwhm_mm` in millimetres,
    /// truncated at 3 sigma, renormalized at the boundary). `fwhm_mm <= 0`
    /// returns the volume unchanged.
    pub fn smoothed(&self, fwhm_mm: f64) -> Volume {
        let data = smooth::gaussian_blur(&self.data, self.dims, self.voxel_size, fwhm_mm);
        Volume { dims: self.dims, voxel_size: self.voxel_size, data }
    }
}

/// A cubic sub-array of a parent volume, tagged with its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub size: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// The set of patch origins tiling a volume at a fixed stride.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: [usize; 3],
    pub origins: Vec<[usize; 3]>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Window origins along one axis: 0, t, 2t, ... plus the flush position
/// `extent - size` when the stride does not land on it exactly.
pub fn axis_origins(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    debug_assert!(size <= extent && stride >= 1);
    let last = extent - size;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if last % stride != 0 {
        origins.push(last);
    }
    origins
}

/// Builds the patch grid covering `dims` with cubic patches of edge
/// `patch_size` and per-axis `stride`. Origins are unique and sorted
/// lexicographically by (x, y, z).
pub fn build_patch_grid(dims: [usize; 3], patch_size: usize, stride: [usize; 3]) -> Result<PatchGrid> {
    if patch_size == 0 {
        return Err(Error::Dimension("patch size must be >= 1".into()));
    }
    if let Some(axis) = (0..3).find(|&a| patch_size > dims[a]) {
        return Err(Error::Dimension(format!(
            "patch size {patch_size} exceeds volume extent {} on axis {axis}",
            dims[axis]
        )));
    }
    if stride.iter().any(|&t| t == 0) {
        return Err(Error::Dimension("stride must be >= 1 on every axis".into()));
    }
    // a stride beyond the patch edge would leave gaps between windows
    if let Some(axis) = (0..3).find(|&a| stride[a] > patch_size) {
        return Err(Error::Dimension(format!(
            "stride {} exceeds patch size {patch_size} on axis {axis}",
            stride[axis]
        )));
    }
    let xs = axis_origins(dims[0], patch_size, stride[0]);
    let ys = axis_origins(dims[1], patch_size, stride[1]);
    let zs = axis_origins(dims[2], patch_size, stride[2]);
    let mut origins = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(PatchGrid { patch_size, stride, origins })
}

/// Copies a cubic box out of a raw x-fastest array. Shared by volume and
/// probability-map patch extraction.
pub fn extract_box(data: &[f64], dims: [usize; 3], origin: [usize; 3], size: usize) -> Result<Vec<f64>> {
    for axis in 0..3 {
        if origin[axis] + size > dims[axis] {
            return Err(Error::Dimension(format!(
                "box origin {origin:?} size {size} out of bounds for dims {dims:?} on axis {axis}"
            )));
        }
    }
    let mut out = Vec::with_capacity(size * size * size);
    for dz in 0..size {
        for dy in 0..size {
            let row = origin[0] + dims[0] * ((origin[1] + dy) + dims[1] * (origin[2] + dz));
            out.extend_from_slice(&data[row..row + size]);
        }
    }
    Ok(out)
}

/// Extracts the cubic patch with the given origin and edge length.
pub fn extract_patch(volume: &Volume, origin: [usize; 3], size: usize) -> Result<Patch> {
    let data = extract_box(&volume.data, volume.dims, origin, size)?;
    Ok(Patch { origin, size, data })
}

/// Fuses patches back into a volume. Overlapping voxels take the arithmetic
/// mean of all covering patch values; accumulation runs in f64. Every voxel
/// must be covered by at least one patch.
pub fn reassemble(patches: &[Patch], dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Volume> {
    let n = dims[0] * dims[1] * dims[2];
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    for patch in patches {
        let s = patch.size;
        if patch.data.len() != s * s * s {
            return Err(Error::Dimension(format!(
                "patch at {:?} has {} values, expected {}",
                patch.origin,
                patch.data.len(),
                s * s * s
            )));
        }
        for axis in 0..3 {
            if patch.origin[axis] + s > dims[axis] {
                return Err(Error::Dimension(format!(
                    "patch at {:?} size {s} out of bounds for dims {dims:?}",
                    patch.origin
                )));
            }
        }
        let mut src = 0;
        for dz in 0..s {
            for dy in 0..s {
                let row =
                    patch.origin[0] + dims[0] * ((patch.origin[1] + dy) + dims[1] * (patch.origin[2] + dz));
                for dx in 0..s {
                    sum[row + dx] += patch.data[src];
                    count[row + dx] += 1;
                    src += 1;
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        let x = i % dims[0];
        let y = (i / dims[0]) % dims[1];
        let z = i / (dims[0] * dims[1]);
        return Err(Error::Coverage(x, y, z));
    }
    let data: Vec<f64> = sum.iter().zip(&count).map(|(&s, &c)| s / c as f64).collect();
    Volume::new(dims, voxel_size, data)
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

/// Reads a volume from the binary `LQMV` format (little-endian):
/// magic, version u32, dims 3x u32, voxel size 3x f32 (mm), payload f32.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = BufReader::new(file);
    let mut offset = 0u64;

    let mut magic = [0u8; 4];
    read_exact_at(&mut reader, &mut magic, &mut offset)?;
    if magic != VOLUME_MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}, expected {VOLUME_MAGIC:?}")));
    }
    let version = read_u32(&mut reader, &mut offset)?;
    if version != VOLUME_VERSION {
        return Err(format_err(4, format!("unsupported version {version}, expected {VOLUME_VERSION}")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = read_u32(&mut reader, &mut offset)? as usize;
    }
    let mut voxel_size = [0.0f64; 3];
    for v in voxel_size.iter_mut() {
        *v = read_f32(&mut reader, &mut offset)? as f64;
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|p| p.checked_mul(dims[2]))
        .ok_or_else(|| format_err(8, format!("dims {dims:?} overflow")))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let value_offset = offset;
        let v = read_f32(&mut reader, &mut offset)? as f64;
        if !v.is_finite() {
            return Err(format_err(value_offset, format!("non-finite payload value {v}")));
        }
        data.push(v);
    }
    let mut trailing = [0u8; 1];
    match reader.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(format_err(offset, "trailing bytes after payload")),
        Err(e) => return Err(Error::io(path.display().to_string(), e)),
    }
    Volume::new(dims, voxel_size, data)
}

/// Writes a volume in the `LQMV` format. Values are stored as f32;
/// `write_volume` followed by `read_volume` and another write reproduces
/// the file byte for byte.
pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(&VOLUME_MAGIC).map_err(io_err)?;
    w.write_all(&VOLUME_VERSION.to_le_bytes()).map_err(io_err)?;
    for &d in &volume.dims {
        w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
    }
    for &v in &volume.voxel_size {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }
    for &v in &volume.data {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_exact_at<R: Read>(reader: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    let start = *offset;
    reader
        .read_exact(buf)
        .map_err(|_| format_err(start, format!("truncated: expected {} more bytes", buf.len())))?;
    *offset += buf.len() as u64;
    Ok(())
}

fn read_u32<R: Read>(reader: &mut R, offset: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_at(reader, &mut buf, offset)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32<R: Read>(reader: &mut R, offset: &mut u64) -> Result<f32> {
    let mut buf = [0u8; 4];
    read_exact_at(reader, &mut buf, offset)?;
    Ok(f32::from_le_bytes(buf))
}
