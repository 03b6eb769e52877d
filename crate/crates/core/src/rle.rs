//! Canonical per-slice run-length encoding of binary masks.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::volume::{Extents, Mask};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RleError {
    #[error("expected {expected} slices, got {got}")]
    SliceCount { expected: usize, got: usize },
    #[error("slice {slice}: run ({start}, {len}) is empty, unsorted, touching or out of bounds")]
    BadRun { slice: usize, start: u32, len: u32 },
    #[error("slice {slice}: payload is not valid base64 run pairs")]
    Payload { slice: usize },
}

/// Maximal foreground runs `(start, length)` per slice in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    pub extents: Extents,
    pub slices: Vec<Vec<(u32, u32)>>,
}

impl RleMask {
    pub fn encode(mask: &Mask) -> Self {
        let e = mask.extents;
        let slices = (0..e.d)
            .map(|z| {
                let mut runs = Vec::new();
                let mut start = None;
                for (i, &v) in mask.slice(z).iter().enumerate() {
                    match (v != 0, start) {
                        (true, None) => start = Some(i),
                        (false, Some(s)) => {
                            runs.push((s as u32, (i - s) as u32));
                            start = None;
                        }
                        _ => {}
                    }
                }
                if let Some(s) = start {
                    runs.push((s as u32, (e.slice_len() - s) as u32));
                }
                runs
            })
            .collect();
        Self { extents: e, slices }
    }

    /// Checks that runs are non-empty, sorted, maximal and in bounds.
    pub fn validate(&self) -> Result<(), RleError> {
        let e = self.extents;
        if self.slices.len() != e.d {
            return Err(RleError::SliceCount {
                expected: e.d,
                got: self.slices.len(),
            });
        }
        let n = e.slice_len() as u64;
        for (z, runs) in self.slices.iter().enumerate() {
            let mut end: Option<u64> = None;
            for &(start, len) in runs {
                let s = start as u64;
                let bad = len == 0 || s + len as u64 > n || end.is_some_and(|p| s <= p);
                if bad {
                    return Err(RleError::BadRun { slice: z, start, len });
                }
                end = Some(s + len as u64);
            }
        }
        Ok(())
    }

    pub fn decode(&self) -> Result<Mask, RleError> {
        self.validate()?;
        let mut m = Mask::empty(self.extents);
        for (z, runs) in self.slices.iter().enumerate() {
            let plane = m.slice_mut(z);
            for &(s, l) in runs {
                plane[s as usize..(s + l) as usize].fill(1);
            }
        }
        Ok(m)
    }

    pub fn to_wire(&self, revision: u64) -> RleWire {
        let slices = self
            .slices
            .iter()
            .map(|runs| {
                let mut bytes = Vec::with_capacity(runs.len() * 8);
                for &(s, l) in runs {
                    bytes.extend_from_slice(&s.to_le_bytes());
                    bytes.extend_from_slice(&l.to_le_bytes());
                }
                STANDARD.encode(bytes)
            })
            .collect();
        RleWire {
            extents: self.extents,
            revision,
            slices,
        }
    }
}

/// JSON envelope: each slice is base64 of little-endian `u32` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleWire {
    pub extents: Extents,
    pub revision: u64,
    pub slices: Vec<String>,
}

impl RleWire {
    pub fn from_mask(mask: &Mask, revision: u64) -> Self {
        RleMask::encode(mask).to_wire(revision)
    }

    pub fn to_rle(&self) -> Result<RleMask, RleError> {
        let slices = self
            .slices
            .iter()
            .enumerate()
            .map(|(z, s)| {
                let bytes = STANDARD.decode(s).map_err(|_| RleError::Payload { slice: z })?;
                if bytes.len() % 8 != 0 {
                    return Err(RleError::Payload { slice: z });
                }
                Ok(bytes
                    .chunks_exact(8)
                    .map(|c| {
                        (
                            u32::from_le_bytes(c[..4].try_into().unwrap()),
                            u32::from_le_bytes(c[4..].try_into().unwrap()),
                        )
                    })
                    .collect())
            })
            .collect::<Result<_, _>>()?;
        let r = RleMask {
            extents: self.extents,
            slices,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn to_mask(&self) -> Result<Mask, RleError> {
        self.to_rle()?.decode()
    }
}
