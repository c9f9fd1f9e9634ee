//! Numeric field transport: row-major little-endian `f32`, base64 encoded.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use seqmap_core::model::Frame;

pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub data: String,
}

impl FramePayload {
    pub fn encode(frame: &Frame) -> Self {
        let mut bytes = Vec::with_capacity(frame.values().len() * 4);
        for &v in frame.values() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Self {
            rows: frame.rows(),
            cols: frame.cols(),
            dtype: DTYPE.to_string(),
            data: STANDARD.encode(bytes),
        }
    }

    /// Values widened back to `f64`; `None` if the payload is malformed.
    pub fn decode(&self) -> Option<Vec<f64>> {
        if self.dtype != DTYPE {
            return None;
        }
        let bytes = STANDARD.decode(&self.data).ok()?;
        if bytes.len() != self.rows * self.cols * 4 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let f = Frame::from_rows(&[[1.5, -2.25, 0.0], [1e-3, 7.0, 3.0]]).unwrap();
        let p = FramePayload::encode(&f);
        assert_eq!((p.rows, p.cols), (2, 3));
        let back = p.decode().unwrap();
        for (a, b) in back.iter().zip(f.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn layout_is_row_major_little_endian() {
        let f = Frame::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let bytes = STANDARD.decode(FramePayload::encode(&f).data).unwrap();
        assert_eq!(&bytes[4..8], &2.0f32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3.0f32.to_le_bytes());
    }

    #[test]
    fn malformed_payloads_are_rejected() {
        let mut p = FramePayload::encode(&Frame::zeros(2, 2));
        p.rows = 3;
        assert!(p.decode().is_none());
        p.rows = 2;
        p.dtype = "f64le".into();
        assert!(p.decode().is_none());
    }
}
