//! Headerless `cf32` sample files: interleaved little-endian IEEE-754
//! single-precision I and Q, 8 bytes per complex sample. The sample rate is
//! not stored and must be supplied by the caller.

use std::fs;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::signal::IqBuffer;

pub const BYTES_PER_SAMPLE: usize = 8;

/// Decodes `cf32` bytes. Rejects lengths that are not a multiple of 8,
/// empty input and non-finite samples.
pub fn decode_cf32(bytes: &[u8]) -> Result<Vec<Complex64>> {
    if !bytes.len().is_multiple_of(BYTES_PER_SAMPLE) {
        return Err(Error::TruncatedIq { len: bytes.len() });
    }
    if bytes.is_empty() {
        return Err(Error::Format("IQ data is empty".into()));
    }
    bytes
        .chunks_exact(BYTES_PER_SAMPLE)
        .enumerate()
        .map(|(i, c)| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            if re.is_finite() && im.is_finite() {
                Ok(Complex64::new(re as f64, im as f64))
            } else {
                Err(Error::Format(format!("non-finite IQ sample at index {i}")))
            }
        })
        .collect()
}

/// Encodes samples as `cf32`, rounding each component to f32.
pub fn encode_cf32(samples: &[Complex64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * BYTES_PER_SAMPLE);
    for s in samples {
        out.extend_from_slice(&(s.re as f32).to_le_bytes());
        out.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    out
}

pub fn read_cf32(path: &Path, sample_rate: f64) -> Result<IqBuffer> {
    let bytes = fs::read(path)?;
    IqBuffer::new(decode_cf32(&bytes)?, sample_rate)
}

pub fn write_cf32(path: &Path, buffer: &IqBuffer) -> Result<()> {
    fs::write(path, encode_cf32(buffer.samples()))?;
    Ok(())
}
