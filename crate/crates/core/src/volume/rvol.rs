use std::path::Path;

use super::{voxel_count, DisplacementField, Dims, Dtype, Volume, VoxelData};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;

pub const RVOL_MAGIC: [u8; 6] = *b"RVOL1\0";
pub const RVOL_HEADER_LEN: usize = 21;

/// One RVOL file: a grid of `channels`-vectors of a single scalar type.
///
/// Volumes use one channel, displacement fields three, and stored training
/// samples one channel per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct RvolRecord {
    pub dims: Dims,
    pub channels: u8,
    pub data: VoxelData,
}

impl RvolRecord {
    fn check(&self) -> Result<()> {
        if self.dims.contains(&0) || self.channels == 0 {
            return Err(Error::InvalidVolume(format!(
                "dims {:?} with {} channels",
                self.dims, self.channels
            )));
        }
        let expected = voxel_count(self.dims) * self.channels as usize;
        if self.data.len() != expected {
            return Err(Error::InvalidVolume(format!(
                "{} scalars for {} expected",
                self.data.len(),
                expected
            )));
        }
        Ok(())
    }
}

impl From<&Volume> for RvolRecord {
    fn from(v: &Volume) -> Self {
        RvolRecord {
            dims: v.dims(),
            channels: 1,
            data: v.data().clone(),
        }
    }
}

pub fn encode_rvol(record: &RvolRecord) -> Result<Vec<u8>> {
    record.check()?;
    let dtype = record.data.dtype();
    let mut out = Vec::with_capacity(RVOL_HEADER_LEN + record.data.len() * dtype.scalar_bytes());
    out.extend_from_slice(&RVOL_MAGIC);
    for d in record.dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidVolume(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(dtype.code());
    out.push(record.channels);
    out.push(0);
    match &record.data {
        VoxelData::Float32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        VoxelData::Label16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_rvol(bytes: &[u8]) -> Result<RvolRecord> {
    if bytes.len() < RVOL_MAGIC.len() {
        return Err(Error::Truncated {
            expected: RVOL_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 6] = bytes[..6].try_into().expect("six bytes");
    if magic != RVOL_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < RVOL_HEADER_LEN {
        return Err(Error::Truncated {
            expected: RVOL_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let mut dims = [0usize; 3];
    for (axis, d) in dims.iter_mut().enumerate() {
        let off = 6 + 4 * axis;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("four bytes")) as usize;
    }
    let dtype = Dtype::from_code(bytes[18])
        .ok_or_else(|| Error::InvalidHeader(format!("unknown dtype code {}", bytes[18])))?;
    let channels = bytes[19];
    if channels == 0 {
        return Err(Error::InvalidHeader("channel count 0".into()));
    }
    if bytes[20] != 0 {
        return Err(Error::InvalidHeader(format!(
            "reserved byte is {}, expected 0",
            bytes[20]
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidHeader(format!("zero-voxel dims {dims:?}")));
    }
    let payload = &bytes[RVOL_HEADER_LEN..];
    let scalars = dims
        .iter()
        .try_fold(channels as usize, |acc, &d| acc.checked_mul(d));
    let expected = scalars.and_then(|s| s.checked_mul(dtype.scalar_bytes()));
    let (scalars, expected) = match (scalars, expected) {
        (Some(s), Some(e)) => (s, e),
        _ => {
            return Err(Error::SizeMismatch {
                expected: usize::MAX,
                found: payload.len(),
            })
        }
    };
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected: RVOL_HEADER_LEN + expected,
            found: bytes.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let data = match dtype {
        Dtype::Float32 => VoxelData::Float32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect(),
        ),
        Dtype::Label16 => VoxelData::Label16(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().expect("two bytes")))
                .collect(),
        ),
    };
    debug_assert_eq!(data.len(), scalars);
    Ok(RvolRecord {
        dims,
        channels,
        data,
    })
}

pub fn load_rvol(path: impl AsRef<Path>) -> Result<RvolRecord> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rvol(&bytes)
}

pub fn save_rvol(record: &RvolRecord, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_rvol(record)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let record = load_rvol(path)?;
    if record.channels != 1 {
        return Err(Error::InvalidHeader(format!(
            "volume must have 1 channel, found {}",
            record.channels
        )));
    }
    Volume::new(record.dims, record.data)
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    save_rvol(&RvolRecord::from(volume), path)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let record = load_rvol(path)?;
    match (record.channels, record.data) {
        (3, VoxelData::Float32(v)) => DisplacementField::new(record.dims, v),
        (c, d) => Err(Error::InvalidHeader(format!(
            "displacement field must be 3-channel float32, found {c} channels of {:?}",
            d.dtype()
        ))),
    }
}

pub fn save_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let record = RvolRecord {
        dims: field.dims(),
        channels: 3,
        data: VoxelData::Float32(field.vectors().to_vec()),
    };
    save_rvol(&record, path)
}
