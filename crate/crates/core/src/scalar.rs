//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! model code runs in `f32` for training throughput and in `f64` for
//! finite-difference gradient checking. Concrete aliases live at the crate
//! root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, NumAssignOps};

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar:
    Float + NumAssignOps + ScalarOperand + Sum + Send + Sync + Debug + Display + 'static
{
    /// Tag stored in checkpoint archives to identify the element type.
    const DTYPE_TAG: u8;

    fn from_f64(v: f64) -> Self;

    fn to_f64s(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }

    /// Little-endian byte encoding used by the checkpoint format.
    fn write_le(self, out: &mut Vec<u8>);

    /// Inverse of [`Scalar::write_le`]; `bytes` holds exactly one element.
    fn read_le(bytes: &[u8]) -> Self;

    fn byte_width() -> usize;
}

impl Scalar for f32 {
    const DTYPE_TAG: u8 = 0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    fn byte_width() -> usize {
        4
    }
}

impl Scalar for f64 {
    const DTYPE_TAG: u8 = 1;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    fn byte_width() -> usize {
        8
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        (-2.25f64).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[..4]), 1.5);
        assert_eq!(f64::read_le(&buf[4..]), -2.25);
    }
}
