use super::Matrix;
use crate::{Error, Result};

/// Emulates symmetric per-row absmax quantization to `bits` bits.
///
/// Each row is mapped onto the integer levels `-L..=L` with
/// `L = 2^(bits-1) - 1` and step `absmax / L`, then dequantized. The
/// outermost levels dequantize to exactly `±absmax`, which makes the
/// operation idempotent. All-zero rows pass through unchanged.
pub fn quantize_emulate(m: &Matrix, bits: u32) -> Result<Matrix> {
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "quantization bits must be in 2..=8, got {bits}"
        )));
    }
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    let mut out = m.clone();
    let cols = m.cols();
    for row in out.as_mut_slice().chunks_mut(cols.max(1)) {
        let absmax = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if absmax == 0.0 {
            continue;
        }
        let step = absmax / levels;
        for v in row.iter_mut() {
            let level = (*v / step).round().clamp(-levels, levels);
            *v = if level.abs() == levels {
                level.signum() * absmax
            } else {
                level * step
            };
        }
    }
    Ok(out)
}
