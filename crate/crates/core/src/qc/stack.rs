//! Fixed-count stack of normalized slices and its binary file format.
//!
//! Layout (little-endian): `u32` patient-id length, id bytes (UTF-8), `u32`
//! slice count, `u32` side, `u8` label code (0–3, 255 for unlabelled), then
//! `count · side²` `f32` pixels, slice by slice, rows top to bottom.

use crate::image::Image;
use crate::volume_io::Severity;
use byteorder::{ByteOrder, LittleEndian};
use thiserror::Error;

const NO_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StackFormatError {
    #[error("stack file truncated: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("patient id is not valid UTF-8")]
    BadPatientId,
    #[error("invalid label code {0}")]
    BadLabel(u8),
    #[error("{0} trailing bytes after stack payload")]
    TrailingBytes(usize),
    #[error("invalid stack shape: {0}")]
    BadShape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub patient_id: String,
    pub label: Option<Severity>,
    side: usize,
    slices: Vec<Image>,
}

impl SliceStack {
    pub fn new(
        patient_id: impl Into<String>,
        label: Option<Severity>,
        side: usize,
        slices: Vec<Image>,
    ) -> Result<Self, StackFormatError> {
        if side == 0 {
            return Err(StackFormatError::BadShape("side must be positive".into()));
        }
        if let Some((i, s)) = slices
            .iter()
            .enumerate()
            .find(|(_, s)| s.width() != side || s.height() != side)
        {
            return Err(StackFormatError::BadShape(format!(
                "slice {i} is {}x{}, expected {side}x{side}",
                s.width(),
                s.height()
            )));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            label,
            side,
            slices,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slices(&self) -> &[Image] {
        &self.slices
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id = self.patient_id.as_bytes();
        let pixels = self.slices.len() * self.side * self.side;
        let mut out = Vec::with_capacity(13 + id.len() + 4 * pixels);
        let mut word = [0u8; 4];
        LittleEndian::write_u32(&mut word, id.len() as u32);
        out.extend_from_slice(&word);
        out.extend_from_slice(id);
        LittleEndian::write_u32(&mut word, self.slices.len() as u32);
        out.extend_from_slice(&word);
        LittleEndian::write_u32(&mut word, self.side as u32);
        out.extend_from_slice(&word);
        out.push(self.label.map_or(NO_LABEL, |l| l.index() as u8));
        for s in &self.slices {
            for &v in s.as_slice() {
                LittleEndian::write_f32(&mut word, v as f32);
                out.extend_from_slice(&word);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StackFormatError> {
        let need = |expected: usize| {
            if bytes.len() < expected {
                Err(StackFormatError::Truncated {
                    expected,
                    actual: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let id_len = LittleEndian::read_u32(bytes) as usize;
        let mut at = 4 + id_len;
        need(at + 9)?;
        let patient_id = std::str::from_utf8(&bytes[4..at])
            .map_err(|_| StackFormatError::BadPatientId)?
            .to_string();
        let count = LittleEndian::read_u32(&bytes[at..]) as usize;
        let side = LittleEndian::read_u32(&bytes[at + 4..]) as usize;
        let label = match bytes[at + 8] {
            NO_LABEL => None,
            code => {
                Some(Severity::from_index(code as usize).ok_or(StackFormatError::BadLabel(code))?)
            }
        };
        at += 9;
        if side == 0 {
            return Err(StackFormatError::BadShape("side must be positive".into()));
        }
        let plane = side
            .checked_mul(side)
            .ok_or_else(|| StackFormatError::BadShape("side overflows".into()))?;
        let payload = count
            .checked_mul(plane)
            .and_then(|p| p.checked_mul(4))
            .ok_or_else(|| StackFormatError::BadShape("payload overflows".into()))?;
        need(at + payload)?;
        if bytes.len() > at + payload {
            return Err(StackFormatError::TrailingBytes(bytes.len() - at - payload));
        }
        let slices = bytes[at..at + payload]
            .chunks_exact(4 * plane)
            .map(|chunk| {
                let data = chunk
                    .chunks_exact(4)
                    .map(|c| f64::from(LittleEndian::read_f32(c)))
                    .collect();
                Image::new(side, side, data).expect("plane sized chunk")
            })
            .collect();
        Self::new(patient_id, label, side, slices)
    }
}
