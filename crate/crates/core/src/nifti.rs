//! NIfTI-1 single-file reader and writer (`.nii` and `.nii.gz`).
//!
//! Supported datatypes are u8 (2), i16 (4), i32 (8) and f32 (16). Files may be
//! 3D, or 4D with a singleton fourth dimension. Big-endian files are detected
//! from `dim[0]` and byte-swapped on read; files are always written
//! little-endian with `vox_offset = 352`.
//!
//! Only the voxel spacing is taken from the header geometry. The qform and
//! sform fields are parsed into [`NiftiHeader`] but volumes stay in native
//! index space.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{LabelData, VoxelData, VoxelGrid, VoxelKind};

pub const HEADER_SIZE: usize = 348;
pub const WRITE_VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const REGULAR: usize = 38;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            8 => Ok(Datatype::I32),
            16 => Ok(Datatype::F32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
        }
    }

    pub fn byte_size(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
        }
    }
}

/// The subset of NIfTI-1 header fields this crate reads.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub endian: Endian,
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub pixdim: [f32; 8],
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    /// quatern_b, quatern_c, quatern_d, qoffset_x, qoffset_y, qoffset_z
    pub quatern: [f32; 6],
    /// srow_x, srow_y, srow_z
    pub srow: [[f32; 4]; 3],
}

impl NiftiHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Header(format!(
                "file holds {} bytes, a NIfTI-1 header needs {HEADER_SIZE}",
                bytes.len()
            )));
        }
        let dim0_le = LittleEndian::read_i16(&bytes[offsets::DIM..]);
        let dim0_be = BigEndian::read_i16(&bytes[offsets::DIM..]);
        let endian = if (1..=7).contains(&dim0_le) {
            Endian::Little
        } else if (1..=7).contains(&dim0_be) {
            Endian::Big
        } else {
            return Err(Error::Header(format!("dim[0] = {dim0_le} is not in 1..=7 in either byte order")));
        };
        match endian {
            Endian::Little => Self::parse_with::<LittleEndian>(bytes, endian),
            Endian::Big => Self::parse_with::<BigEndian>(bytes, endian),
        }
    }

    fn parse_with<B: ByteOrder>(bytes: &[u8], endian: Endian) -> Result<Self> {
        let sizeof_hdr = B::read_i32(&bytes[offsets::SIZEOF_HDR..]);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(Error::Header(format!("sizeof_hdr = {sizeof_hdr}, expected 348")));
        }
        if &bytes[offsets::MAGIC..offsets::MAGIC + 4] != MAGIC_SINGLE {
            return Err(Error::Header(format!(
                "magic {:?} is not the single-file NIfTI-1 magic \"n+1\"",
                String::from_utf8_lossy(&bytes[offsets::MAGIC..offsets::MAGIC + 4])
            )));
        }
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = B::read_i16(&bytes[offsets::DIM + 2 * i..]);
        }
        let datatype = Datatype::from_code(B::read_i16(&bytes[offsets::DATATYPE..]))?;
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = B::read_f32(&bytes[offsets::PIXDIM + 4 * i..]);
        }
        let vox_offset_raw = B::read_f32(&bytes[offsets::VOX_OFFSET..]);
        if !vox_offset_raw.is_finite()
            || vox_offset_raw < HEADER_SIZE as f32
            || vox_offset_raw.fract() != 0.0
        {
            return Err(Error::Header(format!("invalid vox_offset {vox_offset_raw}")));
        }
        let mut quatern = [0f32; 6];
        for (i, q) in quatern.iter_mut().enumerate() {
            *q = B::read_f32(&bytes[offsets::QUATERN_B + 4 * i..]);
        }
        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = B::read_f32(&bytes[offsets::SROW_X + 16 * r + 4 * c..]);
            }
        }
        Ok(NiftiHeader {
            endian,
            dim,
            datatype,
            pixdim,
            vox_offset: vox_offset_raw as usize,
            scl_slope: B::read_f32(&bytes[offsets::SCL_SLOPE..]),
            scl_inter: B::read_f32(&bytes[offsets::SCL_INTER..]),
            qform_code: B::read_i16(&bytes[offsets::QFORM_CODE..]),
            sform_code: B::read_i16(&bytes[offsets::SFORM_CODE..]),
            quatern,
            srow,
        })
    }

    /// Spatial dimensions, validated against the 3D / singleton-4D rule.
    pub fn dims(&self) -> Result<[usize; 3]> {
        let ndim = self.dim[0];
        match ndim {
            3 => {}
            4 if self.dim[4] == 1 => {}
            4 => {
                return Err(Error::Header(format!(
                    "4D volume with {} frames; only a singleton 4th dimension is accepted",
                    self.dim[4]
                )))
            }
            other => return Err(Error::Header(format!("dim[0] = {other}, expected 3 or 4"))),
        }
        let mut dims = [0usize; 3];
        for (i, out) in dims.iter_mut().enumerate() {
            let d = self.dim[i + 1];
            if d < 1 {
                return Err(Error::Header(format!("dim[{}] = {d} must be positive", i + 1)));
            }
            *out = d as usize;
        }
        Ok(dims)
    }

    pub fn spacing(&self) -> Result<[f64; 3]> {
        let s = [self.pixdim[1] as f64, self.pixdim[2] as f64, self.pixdim[3] as f64];
        if s.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Header(format!("pixdim[1..=3] = {s:?} must be finite and positive")));
        }
        Ok(s)
    }

    /// Effective (slope, intercept). A zero or non-finite slope means "unscaled".
    pub fn rescale(&self) -> (f64, f64) {
        let slope = if self.scl_slope == 0.0 || !self.scl_slope.is_finite() {
            1.0
        } else {
            self.scl_slope as f64
        };
        let inter = if self.scl_inter.is_finite() {
            self.scl_inter as f64
        } else {
            0.0
        };
        (slope, inter)
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn is_gz_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

/// Load a volume from a `.nii` or `.nii.gz` file.
///
/// With `expected_kind = None` the kind is inferred: f32 data, rescaled data
/// or integer data with negative values load as intensity, anything else as
/// label.
pub fn load_volume(path: impl AsRef<Path>, expected_kind: Option<VoxelKind>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if is_gzip(&raw) {
        let mut out = Vec::with_capacity(raw.len().saturating_mul(4));
        MultiGzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Gzip(format!("{}: {e}", path.display())))?;
        out
    } else if is_gz_path(path) {
        return Err(Error::Gzip(format!("{}: missing gzip magic", path.display())));
    } else {
        raw
    };
    decode_volume(bytes, expected_kind)
}

/// Read only the header of a `.nii` or `.nii.gz` file.
pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeader> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut magic = [0u8; 2];
    let n = reader.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let chained = (&magic[..n]).chain(reader);
    let mut head = Vec::with_capacity(HEADER_SIZE);
    if is_gzip(&magic[..n]) {
        MultiGzDecoder::new(chained)
            .take(HEADER_SIZE as u64)
            .read_to_end(&mut head)
            .map_err(|e| Error::Gzip(format!("{}: {e}", path.display())))?;
    } else if is_gz_path(path) {
        return Err(Error::Gzip(format!("{}: missing gzip magic", path.display())));
    } else {
        chained
            .take(HEADER_SIZE as u64)
            .read_to_end(&mut head)
            .map_err(|e| Error::io(path, e))?;
    }
    NiftiHeader::parse(&head)
}

/// Decode an uncompressed NIfTI-1 byte stream.
pub fn decode_volume(mut bytes: Vec<u8>, expected_kind: Option<VoxelKind>) -> Result<VoxelGrid> {
    let header = NiftiHeader::parse(&bytes)?;
    let dims = header.dims()?;
    let spacing = header.spacing()?;
    let nvox: usize = dims.iter().product();
    let payload = nvox * header.datatype.byte_size();
    let actual = bytes.len().saturating_sub(header.vox_offset);
    if bytes.len() < header.vox_offset || actual != payload {
        return Err(Error::PayloadSize {
            expected: payload,
            actual,
        });
    }
    let (slope, inter) = header.rescale();
    let rescaled = slope != 1.0 || inter != 0.0;

    let kind = match expected_kind {
        Some(k) => k,
        None => {
            if header.datatype == Datatype::F32
                || rescaled
                || has_negative(&bytes[header.vox_offset..], header.datatype, header.endian)
            {
                VoxelKind::Intensity
            } else {
                VoxelKind::Label
            }
        }
    };

    let data = match kind {
        VoxelKind::Label => {
            if header.datatype == Datatype::U8 {
                bytes.drain(..header.vox_offset);
                VoxelData::Label(LabelData::U8(bytes))
            } else {
                VoxelData::Label(decode_labels(&bytes[header.vox_offset..], &header)?)
            }
        }
        VoxelKind::Intensity => {
            let raw = &bytes[header.vox_offset..];
            let values = decode_as_f64(raw, header.datatype, header.endian)
                .map(|v| (v * slope + inter) as f32)
                .collect();
            VoxelData::Intensity(values)
        }
    };
    VoxelGrid::new(dims, spacing, data)
}

fn decode_as_f64(raw: &[u8], dt: Datatype, endian: Endian) -> Box<dyn Iterator<Item = f64> + '_> {
    let size = dt.byte_size();
    let chunks = raw.chunks_exact(size);
    match (dt, endian) {
        (Datatype::U8, _) => Box::new(raw.iter().map(|&b| b as f64)),
        (Datatype::I16, Endian::Little) => Box::new(chunks.map(|c| LittleEndian::read_i16(c) as f64)),
        (Datatype::I16, Endian::Big) => Box::new(chunks.map(|c| BigEndian::read_i16(c) as f64)),
        (Datatype::I32, Endian::Little) => Box::new(chunks.map(|c| LittleEndian::read_i32(c) as f64)),
        (Datatype::I32, Endian::Big) => Box::new(chunks.map(|c| BigEndian::read_i32(c) as f64)),
        (Datatype::F32, Endian::Little) => Box::new(chunks.map(|c| LittleEndian::read_f32(c) as f64)),
        (Datatype::F32, Endian::Big) => Box::new(chunks.map(|c| BigEndian::read_f32(c) as f64)),
    }
}

fn has_negative(raw: &[u8], dt: Datatype, endian: Endian) -> bool {
    dt != Datatype::U8 && decode_as_f64(raw, dt, endian).any(|v| v < 0.0)
}

fn decode_labels(raw: &[u8], header: &NiftiHeader) -> Result<LabelData> {
    let mut values = Vec::with_capacity(raw.len() / header.datatype.byte_size());
    for (index, v) in decode_as_f64(raw, header.datatype, header.endian).enumerate() {
        if v.is_nan() || v.fract() != 0.0 {
            return Err(Error::InvalidLabel {
                index,
                value: v,
                reason: "not an integer",
            });
        }
        if v < 0.0 {
            return Err(Error::InvalidLabel {
                index,
                value: v,
                reason: "negative",
            });
        }
        if v > u32::MAX as f64 {
            return Err(Error::InvalidLabel {
                index,
                value: v,
                reason: "exceeds u32",
            });
        }
        values.push(v as u32);
    }
    Ok(LabelData::from_values(values))
}

/// On-disk datatype chosen for a grid: the narrowest of u8, i16 and i32
/// that holds every label, or f32 for intensities.
pub fn storage_datatype(grid: &VoxelGrid) -> Result<Datatype> {
    match grid.data() {
        VoxelData::Intensity(_) => Ok(Datatype::F32),
        VoxelData::Label(labels) => {
            let max = labels.max();
            if max <= u8::MAX as u32 {
                Ok(Datatype::U8)
            } else if max <= i16::MAX as u32 {
                Ok(Datatype::I16)
            } else if max <= i32::MAX as u32 {
                Ok(Datatype::I32)
            } else {
                Err(Error::LabelOutOfRange(max))
            }
        }
    }
}

fn integer_range(dt: Datatype) -> (f64, f64) {
    match dt {
        Datatype::U8 => (0.0, u8::MAX as f64),
        Datatype::I16 => (i16::MIN as f64, i16::MAX as f64),
        Datatype::I32 => (i32::MIN as f64, i32::MAX as f64),
        Datatype::F32 => (f64::NEG_INFINITY, f64::INFINITY),
    }
}

/// Check that every voxel is exactly representable in `dt`.
fn check_representable(grid: &VoxelGrid, dt: Datatype) -> Result<()> {
    let (lo, hi) = integer_range(dt);
    match grid.data() {
        VoxelData::Label(labels) => {
            if dt == Datatype::F32 {
                return Err(Error::KindMismatch {
                    expected: VoxelKind::Intensity.name(),
                    actual: VoxelKind::Label.name(),
                });
            }
            let max = labels.max();
            if max as f64 > hi {
                return Err(Error::LabelOutOfRange(max));
            }
        }
        VoxelData::Intensity(values) => {
            if dt != Datatype::F32 {
                if let Some((i, v)) = values
                    .iter()
                    .enumerate()
                    .find(|(_, v)| v.fract() != 0.0 || (**v as f64) < lo || (**v as f64) > hi)
                {
                    return Err(Error::InvalidGrid(format!(
                        "intensity {v} at voxel {i} is not representable as datatype {}",
                        dt.code()
                    )));
                }
            }
        }
    }
    Ok(())
}

fn header_bytes<B: ByteOrder>(grid: &VoxelGrid, dt: Datatype) -> Vec<u8> {
    let mut h = vec![0u8; WRITE_VOX_OFFSET];
    let dims = grid.dims();
    let spacing = grid.spacing();
    B::write_i32(&mut h[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
    h[offsets::REGULAR] = b'r';
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        B::write_i16(&mut h[offsets::DIM + 2 * i..], *d);
    }
    B::write_i16(&mut h[offsets::DATATYPE..], dt.code());
    B::write_i16(&mut h[offsets::BITPIX..], (dt.byte_size() * 8) as i16);
    let pixdim: [f32; 8] = [
        1.0,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        B::write_f32(&mut h[offsets::PIXDIM + 4 * i..], *p);
    }
    B::write_f32(&mut h[offsets::VOX_OFFSET..], WRITE_VOX_OFFSET as f32);
    B::write_f32(&mut h[offsets::SCL_SLOPE..], 1.0);
    B::write_f32(&mut h[offsets::SCL_INTER..], 0.0);
    // NIFTI_UNITS_MM
    h[offsets::XYZT_UNITS] = 2;
    let descrip = b"ppgl";
    h[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip);
    B::write_i16(&mut h[offsets::QFORM_CODE..], 0);
    B::write_i16(&mut h[offsets::SFORM_CODE..], 1);
    for r in 0..3 {
        B::write_f32(&mut h[offsets::SROW_X + 16 * r + 4 * r..], spacing[r] as f32);
    }
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC_SINGLE);
    h
}

fn put<B: ByteOrder>(buf: &mut [u8], dt: Datatype, v: f64) {
    match dt {
        Datatype::U8 => buf[0] = v as u8,
        Datatype::I16 => B::write_i16(buf, v as i16),
        Datatype::I32 => B::write_i32(buf, v as i32),
        Datatype::F32 => B::write_f32(buf, v as f32),
    }
}

fn write_payload<B: ByteOrder, W: Write>(grid: &VoxelGrid, dt: Datatype, out: &mut W) -> std::io::Result<()> {
    const CHUNK: usize = 1 << 16;
    let size = dt.byte_size();
    let mut buf = vec![0u8; CHUNK * size];
    match grid.data() {
        VoxelData::Label(LabelData::U8(v)) if dt == Datatype::U8 => out.write_all(v),
        VoxelData::Label(labels) => {
            let n = labels.len();
            let mut start = 0;
            while start < n {
                let end = (start + CHUNK).min(n);
                for (slot, i) in (start..end).enumerate() {
                    put::<B>(&mut buf[size * slot..], dt, labels.get(i) as f64);
                }
                out.write_all(&buf[..(end - start) * size])?;
                start = end;
            }
            Ok(())
        }
        VoxelData::Intensity(values) => {
            for chunk in values.chunks(CHUNK) {
                for (slot, v) in chunk.iter().enumerate() {
                    put::<B>(&mut buf[size * slot..], dt, *v as f64);
                }
                out.write_all(&buf[..chunk.len() * size])?;
            }
            Ok(())
        }
    }
}

/// Serialize a grid to an uncompressed NIfTI-1 byte stream in the given byte order.
pub fn encode_volume_with(grid: &VoxelGrid, endian: Endian) -> Result<Vec<u8>> {
    encode_volume_as(grid, storage_datatype(grid)?, endian)
}

/// Serialize with an explicit datatype. Intensities may be stored as
/// integers when every value is integral and in range.
pub fn encode_volume_as(grid: &VoxelGrid, dt: Datatype, endian: Endian) -> Result<Vec<u8>> {
    check_representable(grid, dt)?;
    check_dims_fit(grid)?;
    let mut out = Vec::with_capacity(WRITE_VOX_OFFSET + grid.len() * dt.byte_size());
    let io = |e| Error::io("<memory>", e);
    match endian {
        Endian::Little => {
            out.extend_from_slice(&header_bytes::<LittleEndian>(grid, dt));
            write_payload::<LittleEndian, _>(grid, dt, &mut out).map_err(io)?;
        }
        Endian::Big => {
            out.extend_from_slice(&header_bytes::<BigEndian>(grid, dt));
            write_payload::<BigEndian, _>(grid, dt, &mut out).map_err(io)?;
        }
    }
    Ok(out)
}

pub fn encode_volume(grid: &VoxelGrid) -> Result<Vec<u8>> {
    encode_volume_with(grid, Endian::Little)
}

fn check_dims_fit(grid: &VoxelGrid) -> Result<()> {
    if grid.dims().iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::InvalidGrid(format!(
            "dimensions {:?} exceed the NIfTI-1 limit of 32767",
            grid.dims()
        )));
    }
    Ok(())
}

/// Write a grid as NIfTI-1; a `.gz` suffix selects gzip compression.
pub fn save_volume(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    save_volume_as(grid, path, storage_datatype(grid)?)
}

/// [`save_volume`] with an explicit on-disk datatype.
pub fn save_volume_as(grid: &VoxelGrid, path: impl AsRef<Path>, dt: Datatype) -> Result<()> {
    let path = path.as_ref();
    check_representable(grid, dt)?;
    check_dims_fit(grid)?;
    let io = |e| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let header = header_bytes::<LittleEndian>(grid, dt);
    if is_gz_path(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(&header).map_err(io)?;
        write_payload::<LittleEndian, _>(grid, dt, &mut enc).map_err(io)?;
        enc.finish().map_err(io)?.flush().map_err(io)?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&header).map_err(io)?;
        write_payload::<LittleEndian, _>(grid, dt, &mut w).map_err(io)?;
        w.flush().map_err(io)?;
    }
    Ok(())
}
