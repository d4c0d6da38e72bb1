//! Single-file NIfTI-1 (`n+1\0`) reader and writer.

use super::{VolumeError, VoxelVolume};
use byteorder::{BigEndian, ByteOrder, LittleEndian};
use std::path::Path;
use thiserror::Error;

pub const NIFTI1_HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
const DEFAULT_VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NiftiError {
    #[error("bad magic {0:?}: only single-file NIfTI-1 (n+1) is supported")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated input: expected at least {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("decoded voxel {0} is not finite")]
    NonFinite(usize),
    #[error("sizeof_hdr is {0} in both byte orders, expected 348")]
    BadHeaderSize(i32),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("voxel {index} value {value} is not representable as {datatype:?}")]
    NotRepresentable {
        index: usize,
        value: f64,
        datatype: NiftiDatatype,
    },
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

/// Supported on-disk voxel types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    UInt8,
    Int16,
    Float32,
}

impl NiftiDatatype {
    pub const ALL: [NiftiDatatype; 3] = [Self::UInt8, Self::Int16, Self::Float32];

    pub fn code(self) -> i16 {
        match self {
            Self::UInt8 => 2,
            Self::Int16 => 4,
            Self::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self, NiftiError> {
        match code {
            2 => Ok(Self::UInt8),
            4 => Ok(Self::Int16),
            16 => Ok(Self::Float32),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Self::UInt8 => 1,
            Self::Int16 => 2,
            Self::Float32 => 4,
        }
    }

    fn bitpix(self) -> i16 {
        self.bytes_per_voxel() as i16 * 8
    }
}

struct Header {
    dims: [usize; 3],
    datatype: NiftiDatatype,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
}

fn read_header<B: ByteOrder>(bytes: &[u8]) -> Result<Header, NiftiError> {
    let magic: [u8; 4] = bytes[offsets::MAGIC..offsets::MAGIC + 4]
        .try_into()
        .unwrap();
    if &magic != MAGIC_SINGLE {
        return Err(NiftiError::BadMagic(magic));
    }

    let mut dim = [0i16; 8];
    B::read_i16_into(&bytes[offsets::DIM..offsets::DIM + 16], &mut dim);
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::InvalidHeader(format!("dim[0] = {ndim}")));
    }
    let ndim = ndim as usize;
    let mut dims = [1usize; 3];
    for (axis, d) in dims.iter_mut().enumerate().take(ndim.min(3)) {
        let n = dim[axis + 1];
        if n < 1 {
            return Err(NiftiError::InvalidHeader(format!(
                "dim[{}] = {n}",
                axis + 1
            )));
        }
        *d = n as usize;
    }
    // Multi-frame volumes are not supported.
    if let Some(extra) = dim[4..=ndim.max(3)].iter().find(|&&n| n != 1) {
        return Err(NiftiError::InvalidHeader(format!(
            "non-spatial dimension of size {extra}"
        )));
    }

    let datatype = NiftiDatatype::from_code(B::read_i16(&bytes[offsets::DATATYPE..]))?;
    let bitpix = B::read_i16(&bytes[offsets::BITPIX..]);
    if bitpix != datatype.bitpix() {
        return Err(NiftiError::InvalidHeader(format!(
            "bitpix {bitpix} does not match datatype {}",
            datatype.code()
        )));
    }

    let vox_offset = B::read_f32(&bytes[offsets::VOX_OFFSET..]);
    if !vox_offset.is_finite() || (vox_offset as usize) < NIFTI1_HEADER_SIZE {
        return Err(NiftiError::InvalidHeader(format!(
            "vox_offset = {vox_offset}"
        )));
    }

    Ok(Header {
        dims,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: B::read_f32(&bytes[offsets::SCL_SLOPE..]),
        scl_inter: B::read_f32(&bytes[offsets::SCL_INTER..]),
    })
}

fn decode<B: ByteOrder>(hdr: &Header, payload: &[u8], count: usize) -> Vec<f64> {
    match hdr.datatype {
        NiftiDatatype::UInt8 => payload[..count].iter().map(|&b| f64::from(b)).collect(),
        NiftiDatatype::Int16 => payload
            .chunks_exact(2)
            .take(count)
            .map(|c| f64::from(B::read_i16(c)))
            .collect(),
        NiftiDatatype::Float32 => payload
            .chunks_exact(4)
            .take(count)
            .map(|c| f64::from(B::read_f32(c)))
            .collect(),
    }
}

fn parse_with<B: ByteOrder>(bytes: &[u8]) -> Result<VoxelVolume, NiftiError> {
    let hdr = read_header::<B>(bytes)?;
    let count = hdr.dims.iter().product::<usize>();
    let needed = hdr.vox_offset + count * hdr.datatype.bytes_per_voxel();
    if bytes.len() < needed {
        return Err(NiftiError::Truncated {
            expected: needed,
            actual: bytes.len(),
        });
    }
    let mut voxels = decode::<B>(&hdr, &bytes[hdr.vox_offset..], count);

    if hdr.scl_slope != 0.0 && hdr.scl_slope.is_finite() {
        let slope = f64::from(hdr.scl_slope);
        let inter = if hdr.scl_inter.is_finite() {
            f64::from(hdr.scl_inter)
        } else {
            0.0
        };
        for v in &mut voxels {
            *v = *v * slope + inter;
        }
    }

    VoxelVolume::new(hdr.dims, voxels).map_err(|e| match e {
        VolumeError::NonFinite(i) => NiftiError::NonFinite(i),
        other => NiftiError::InvalidHeader(other.to_string()),
    })
}

/// Decodes a complete single-file NIfTI-1 image. Byte order is inferred from
/// `sizeof_hdr`; voxels are scaled by `scl_slope`/`scl_inter` when the slope
/// is nonzero.
pub fn parse_nifti(bytes: &[u8]) -> Result<VoxelVolume, NiftiError> {
    if bytes.len() < NIFTI1_HEADER_SIZE {
        return Err(NiftiError::Truncated {
            expected: NIFTI1_HEADER_SIZE,
            actual: bytes.len(),
        });
    }
    let size_le = LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]);
    if size_le == NIFTI1_HEADER_SIZE as i32 {
        return parse_with::<LittleEndian>(bytes);
    }
    if BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == NIFTI1_HEADER_SIZE as i32 {
        return parse_with::<BigEndian>(bytes);
    }
    Err(NiftiError::BadHeaderSize(size_le))
}

/// Reads a `.nii` file; the patient id is the file name without extension.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<VoxelVolume, NiftiError> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|e| NiftiError::Io(format!("{}: {e}", path.display())))?;
    let id = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.trim_end_matches(".nii"))
        .unwrap_or_default()
        .to_string();
    Ok(parse_nifti(&bytes)?.with_patient_id(id))
}

fn write_with<B: ByteOrder>(
    vol: &VoxelVolume,
    datatype: NiftiDatatype,
) -> Result<Vec<u8>, NiftiError> {
    let count = vol.voxels().len();
    let mut out = vec![0u8; DEFAULT_VOX_OFFSET + count * datatype.bytes_per_voxel()];

    B::write_i32(&mut out[offsets::SIZEOF_HDR..], NIFTI1_HEADER_SIZE as i32);
    let [nx, ny, nz] = vol.dims();
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for (slot, n) in dim[1..4].iter_mut().zip([nx, ny, nz]) {
        *slot = i16::try_from(n)
            .map_err(|_| NiftiError::InvalidHeader(format!("dimension {n} exceeds i16")))?;
    }
    B::write_i16_into(&dim, &mut out[offsets::DIM..offsets::DIM + 16]);
    B::write_i16(&mut out[offsets::DATATYPE..], datatype.code());
    B::write_i16(&mut out[offsets::BITPIX..], datatype.bitpix());
    // qfac followed by unit voxel spacing.
    for i in 0..4 {
        B::write_f32(&mut out[offsets::PIXDIM + 4 * i..], 1.0);
    }
    B::write_f32(&mut out[offsets::VOX_OFFSET..], DEFAULT_VOX_OFFSET as f32);
    B::write_f32(&mut out[offsets::SCL_SLOPE..], 1.0);
    B::write_f32(&mut out[offsets::SCL_INTER..], 0.0);
    out[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC_SINGLE);

    let payload = &mut out[DEFAULT_VOX_OFFSET..];
    let unrepresentable = |index: usize, value: f64| NiftiError::NotRepresentable {
        index,
        value,
        datatype,
    };
    for (i, &v) in vol.voxels().iter().enumerate() {
        match datatype {
            NiftiDatatype::UInt8 => {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(unrepresentable(i, v));
                }
                payload[i] = v as u8;
            }
            NiftiDatatype::Int16 => {
                if v.fract() != 0.0 || !(f64::from(i16::MIN)..=f64::from(i16::MAX)).contains(&v) {
                    return Err(unrepresentable(i, v));
                }
                B::write_i16(&mut payload[2 * i..], v as i16);
            }
            NiftiDatatype::Float32 => {
                let f = v as f32;
                if f64::from(f) != v {
                    return Err(unrepresentable(i, v));
                }
                B::write_f32(&mut payload[4 * i..], f);
            }
        }
    }
    Ok(out)
}

/// Encodes a volume as single-file NIfTI-1 with identity scaling. Fails if a
/// voxel cannot be stored exactly in `datatype`.
pub fn serialize_nifti(
    vol: &VoxelVolume,
    datatype: NiftiDatatype,
    endianness: Endianness,
) -> Result<Vec<u8>, NiftiError> {
    match endianness {
        Endianness::Little => write_with::<LittleEndian>(vol, datatype),
        Endianness::Big => write_with::<BigEndian>(vol, datatype),
    }
}
