//! Symmetric per-channel quantization to int8 and packed int4.
//!
//! Scales are `max(absmax, 1e-5) / qmax` with `qmax` = 127 or 7; integers are
//! `round_half_even(v / scale)` clamped to `[-qmax, qmax]`, so the most
//! negative two's-complement code is never produced.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{absmax_per_channel, ChannelAxis, Matrix};

/// Lower clamp applied to a channel's absmax before deriving its scale.
pub const SCALE_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BitWidth {
    #[serde(rename = "8")]
    W8,
    #[serde(rename = "4")]
    W4,
}

impl BitWidth {
    pub fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            8 => Some(BitWidth::W8),
            4 => Some(BitWidth::W4),
            _ => None,
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            BitWidth::W8 => 8,
            BitWidth::W4 => 4,
        }
    }

    pub fn qmax(self) -> i8 {
        match self {
            BitWidth::W8 => 127,
            BitWidth::W4 => 7,
        }
    }

    /// Storage bytes for `elements` integers at this width.
    pub fn payload_bytes(self, elements: usize) -> usize {
        match self {
            BitWidth::W8 => elements,
            BitWidth::W4 => elements.div_ceil(2),
        }
    }
}

/// Scale for a channel whose largest magnitude is `absmax`.
pub fn symmetric_scale(absmax: f32, bits: BitWidth) -> f32 {
    absmax.max(SCALE_EPS) / bits.qmax() as f32
}

#[inline]
pub fn quantize_value(v: f32, scale: f32, bits: BitWidth) -> i8 {
    let q = bits.qmax() as f32;
    (v / scale).round_ties_even().clamp(-q, q) as i8
}

/// Integer payload plus one positive scale per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    bits: BitWidth,
    axis: ChannelAxis,
    /// One byte per value for W8; two nibbles per byte for W4.
    payload: Vec<u8>,
    scales: Vec<f32>,
}

impl QuantizedTensor {
    /// Validates payload length, integer range and scales.
    pub fn from_raw(
        rows: usize,
        cols: usize,
        bits: BitWidth,
        axis: ChannelAxis,
        payload: Vec<u8>,
        scales: Vec<f32>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyShape { rows, cols });
        }
        let elements = rows * cols;
        let expected = bits.payload_bytes(elements);
        if payload.len() != expected {
            return Err(Error::PayloadLength {
                expected: expected as u64,
                actual: payload.len() as u64,
            });
        }
        let channels = match axis {
            ChannelAxis::InputChannel => rows,
            ChannelAxis::OutputChannel => cols,
        };
        if scales.len() != channels {
            return Err(Error::ShapeMismatch(format!(
                "{} scales for {channels} channels",
                scales.len()
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Format(format!("invalid scale {s}")));
        }
        let out = Self {
            rows,
            cols,
            bits,
            axis,
            payload,
            scales,
        };
        match bits {
            BitWidth::W8 => {
                if let Some(&b) = out.payload.iter().find(|&&b| b as i8 == i8::MIN) {
                    return Err(Error::Format(format!("int8 code {} out of range", b as i8)));
                }
            }
            BitWidth::W4 => {
                let values = unpack_int4(&out.payload, elements)?;
                if let Some(&v) = values.iter().find(|&&v| v == -8) {
                    return Err(Error::Int4Range(v));
                }
                if elements % 2 == 1 && out.payload[elements / 2] >> 4 != 0 {
                    return Err(Error::Format("nonzero int4 padding nibble".into()));
                }
            }
        }
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn axis(&self) -> ChannelAxis {
        self.axis
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Unpacked integer values in row-major order.
    pub fn values(&self) -> Vec<i8> {
        match self.bits {
            BitWidth::W8 => self.payload.iter().map(|&b| b as i8).collect(),
            BitWidth::W4 => unpack_int4(&self.payload, self.rows * self.cols)
                .expect("payload length checked at construction"),
        }
    }

    pub fn scale_at(&self, i: usize, j: usize) -> f32 {
        match self.axis {
            ChannelAxis::InputChannel => self.scales[i],
            ChannelAxis::OutputChannel => self.scales[j],
        }
    }
}

pub fn quantize(m: &Matrix, bits: BitWidth, axis: ChannelAxis) -> QuantizedTensor {
    let scales: Vec<f32> = absmax_per_channel(m, axis)
        .into_iter()
        .map(|a| symmetric_scale(a, bits))
        .collect();
    quantize_with_scales(m, bits, axis, &scales).expect("scales derived from the matrix itself")
}

/// Quantizes against externally fixed scales; values beyond the range clamp.
pub fn quantize_with_scales(
    m: &Matrix,
    bits: BitWidth,
    axis: ChannelAxis,
    scales: &[f32],
) -> Result<QuantizedTensor> {
    let (rows, cols) = m.shape();
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for (j, &v) in m.row(i).iter().enumerate() {
            let s = match axis {
                ChannelAxis::InputChannel => scales.get(i),
                ChannelAxis::OutputChannel => scales.get(j),
            };
            let s = *s.ok_or_else(|| {
                Error::ShapeMismatch(format!("{} scales for {:?} of {rows}x{cols}", scales.len(), axis))
            })?;
            values.push(quantize_value(v, s, bits));
        }
    }
    let payload = match bits {
        BitWidth::W8 => values.iter().map(|&v| v as u8).collect(),
        BitWidth::W4 => pack_int4(&values)?,
    };
    QuantizedTensor::from_raw(rows, cols, bits, axis, payload, scales.to_vec())
}

pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let values = q.values();
    let mut data = Vec::with_capacity(values.len());
    for i in 0..q.rows {
        for j in 0..q.cols {
            data.push(values[i * q.cols + j] as f32 * q.scale_at(i, j));
        }
    }
    Matrix::from_parts(q.rows, q.cols, data)
}

/// `dequantize(quantize(m))` without materializing the payload.
pub fn fake_quant(m: &Matrix, bits: BitWidth, axis: ChannelAxis) -> Matrix {
    let scales: Vec<f32> = absmax_per_channel(m, axis)
        .into_iter()
        .map(|a| symmetric_scale(a, bits))
        .collect();
    fake_quant_with_scales(m, bits, axis, &scales).expect("scales derived from the matrix itself")
}

pub fn fake_quant_with_scales(
    m: &Matrix,
    bits: BitWidth,
    axis: ChannelAxis,
    scales: &[f32],
) -> Result<Matrix> {
    let (rows, cols) = m.shape();
    if scales.len() != m.channel_count(axis) {
        return Err(Error::ShapeMismatch(format!(
            "{} scales for {:?} of {rows}x{cols}",
            scales.len(),
            axis
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for (j, &v) in m.row(i).iter().enumerate() {
            let s = match axis {
                ChannelAxis::InputChannel => scales[i],
                ChannelAxis::OutputChannel => scales[j],
            };
            data.push(quantize_value(v, s, bits) as f32 * s);
        }
    }
    Ok(Matrix::from_parts(rows, cols, data))
}

/// Two's-complement nibbles, element `2i` in the low nibble of byte `i`.
pub fn pack_int4(values: &[i8]) -> Result<Vec<u8>> {
    if let Some(&v) = values.iter().find(|v| !(-7..=7).contains(*v)) {
        return Err(Error::Int4Range(v));
    }
    Ok(values
        .chunks(2)
        .map(|pair| {
            let lo = pair[0] as u8 & 0x0F;
            let hi = pair.get(1).map_or(0, |&v| v as u8 & 0x0F);
            lo | (hi << 4)
        })
        .collect())
}

pub fn unpack_int4(bytes: &[u8], count: usize) -> Result<Vec<i8>> {
    if count.div_ceil(2) != bytes.len() {
        return Err(Error::PayloadLength {
            expected: count.div_ceil(2) as u64,
            actual: bytes.len() as u64,
        });
    }
    let nibble = |n: u8| ((n << 4) as i8) >> 4;
    let mut out = Vec::with_capacity(count);
    for &b in bytes {
        out.push(nibble(b & 0x0F));
        out.push(nibble(b >> 4));
    }
    out.truncate(count);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_examples() {
        let m = Matrix::from_rows(&[&[1.0, -2.0, 0.5]]).unwrap();
        let q = quantize(&m, BitWidth::W8, ChannelAxis::InputChannel);
        assert_eq!(q.scales(), &[2.0f32 / 127.0]);
        assert_eq!(q.values(), vec![64, -127, 32]);

        let zero = quantize(&Matrix::zeros(1, 3), BitWidth::W8, ChannelAxis::InputChannel);
        assert_eq!(zero.scales(), &[1e-5f32 / 127.0]);
        assert_eq!(zero.values(), vec![0, 0, 0]);

        let seven = quantize(&Matrix::from_rows(&[&[7.0]]).unwrap(), BitWidth::W4, ChannelAxis::InputChannel);
        assert_eq!(seven.scales(), &[1.0]);
        assert_eq!(seven.values(), vec![7]);
        assert_eq!(dequantize(&seven).data(), &[7.0]);
    }

    #[test]
    fn dequantize_examples() {
        let m = Matrix::from_rows(&[&[1.0, -2.0, 0.5]]).unwrap();
        let back = dequantize(&quantize(&m, BitWidth::W8, ChannelAxis::InputChannel));
        for (a, b) in back.data().iter().zip(m.data()) {
            assert!((a - b).abs() <= 2.0 / 254.0);
        }
        let zero = quantize(&Matrix::zeros(2, 2), BitWidth::W4, ChannelAxis::OutputChannel);
        assert_eq!(dequantize(&zero), Matrix::zeros(2, 2));
    }

    #[test]
    fn per_output_channel_uses_columns() {
        let m = Matrix::from_rows(&[&[1.0, 10.0], &[-2.0, 5.0]]).unwrap();
        let q = quantize(&m, BitWidth::W8, ChannelAxis::OutputChannel);
        assert_eq!(q.scales(), &[2.0 / 127.0, 10.0 / 127.0]);
        assert_eq!(q.values(), vec![64, 127, -127, 64]);
    }

    #[test]
    fn static_scales_clamp_out_of_range_values() {
        let m = Matrix::from_rows(&[&[3.0, -30.0]]).unwrap();
        let q = quantize_with_scales(&m, BitWidth::W4, ChannelAxis::InputChannel, &[1.0]).unwrap();
        assert_eq!(q.values(), vec![3, -7]);
        assert!(quantize_with_scales(&m, BitWidth::W4, ChannelAxis::InputChannel, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn fake_quant_on_exact_grid_is_unchanged() {
        // multiples of 2^-3 with absmax 127/8 -> scale exactly 1/8
        let m = Matrix::from_fn(4, 8, |i, j| ((i * 8 + j) as f32 * 4.0 - 63.0) / 8.0);
        let m = Matrix::from_fn(4, 8, |i, j| if j == 0 { 127.0 / 8.0 } else { m.get(i, j) });
        assert_eq!(fake_quant(&m, BitWidth::W8, ChannelAxis::InputChannel), m);
    }

    #[test]
    fn fake_quant_is_idempotent() {
        let mut state = 12345u64;
        let m = Matrix::from_fn(8, 8, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 40) as f32 / (1u64 << 24) as f32 - 0.5) * 20.0
        });
        for bits in [BitWidth::W8, BitWidth::W4] {
            for axis in [ChannelAxis::InputChannel, ChannelAxis::OutputChannel] {
                let once = fake_quant(&m, bits, axis);
                let twice = fake_quant(&once, bits, axis);
                assert_eq!(once.data(), twice.data());
            }
        }
    }

    #[test]
    fn pack_examples() {
        assert_eq!(pack_int4(&[3, -1]).unwrap(), vec![0xF3]);
        assert_eq!(pack_int4(&[-7]).unwrap(), vec![0x09]);
        assert_eq!(pack_int4(&[]).unwrap(), Vec::<u8>::new());
        assert!(matches!(pack_int4(&[8]), Err(Error::Int4Range(8))));
        assert!(matches!(pack_int4(&[-8]), Err(Error::Int4Range(-8))));
        assert_eq!(unpack_int4(&[0xF3], 2).unwrap(), vec![3, -1]);
        assert_eq!(unpack_int4(&[0x09], 1).unwrap(), vec![-7]);
        assert!(unpack_int4(&[0x09], 3).is_err());
    }

    #[test]
    fn pack_unpack_exhaustive_short_vectors() {
        fn rec(prefix: &mut Vec<i8>, depth: usize) {
            let packed = pack_int4(prefix).unwrap();
            assert_eq!(unpack_int4(&packed, prefix.len()).unwrap(), *prefix);
            if depth == 4 {
                return;
            }
            for v in -7..=7 {
                prefix.push(v);
                rec(prefix, depth + 1);
                prefix.pop();
            }
        }
        rec(&mut Vec::new(), 0);
    }

    #[test]
    fn raw_construction_rejects_forbidden_codes() {
        let err = QuantizedTensor::from_raw(1, 1, BitWidth::W8, ChannelAxis::InputChannel, vec![0x80], vec![1.0]);
        assert!(err.is_err());
        let err = QuantizedTensor::from_raw(1, 2, BitWidth::W4, ChannelAxis::InputChannel, vec![0x08], vec![1.0]);
        assert!(err.is_err());
        let err = QuantizedTensor::from_raw(1, 1, BitWidth::W4, ChannelAxis::InputChannel, vec![0x11], vec![1.0]);
        assert!(err.is_err());
        let err = QuantizedTensor::from_raw(1, 1, BitWidth::W8, ChannelAxis::InputChannel, vec![1], vec![0.0]);
        assert!(err.is_err());
    }

    fn row_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..6, 1usize..24).prop_flat_map(|(r, c)| {
            prop::collection::vec(-100f32..100.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_off_is_within_half_step(m in row_strategy(), w4 in any::<bool>(), out in any::<bool>()) {
            let bits = if w4 { BitWidth::W4 } else { BitWidth::W8 };
            let axis = if out { ChannelAxis::OutputChannel } else { ChannelAxis::InputChannel };
            let q = quantize(&m, bits, axis);
            let fq = fake_quant(&m, bits, axis);
            prop_assert_eq!(&dequantize(&q), &fq);
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    let err = (fq.get(i, j) as f64 - m.get(i, j) as f64).abs();
                    let bound = q.scale_at(i, j) as f64 / 2.0 + f32::EPSILON as f64 * m.get(i, j).abs() as f64;
                    prop_assert!(err <= bound, "err {} bound {}", err, bound);
                }
            }
            let qmax = bits.qmax();
            prop_assert!(q.values().iter().all(|v| (-qmax..=qmax).contains(v)));
        }

        #[test]
        fn negation_is_symmetric(m in row_strategy(), w4 in any::<bool>()) {
            let bits = if w4 { BitWidth::W4 } else { BitWidth::W8 };
            let neg = m.map(|v| -v).unwrap();
            let a = quantize(&m, bits, ChannelAxis::InputChannel);
            let b = quantize(&neg, bits, ChannelAxis::InputChannel);
            prop_assert_eq!(a.scales(), b.scales());
            let ties = m.data().iter().enumerate().any(|(idx, v)| {
                let s = a.scales()[idx / m.cols()];
                let r = (v / s).abs();
                (r - r.floor() - 0.5).abs() < 1e-6
            });
            if !ties {
                let negated: Vec<i8> = a.values().iter().map(|v| -v).collect();
                prop_assert_eq!(b.values(), negated);
            }
        }
    }
}
