//! Block floating point (BFP) storage and arithmetic.
//!
//! A group holds `group_size` values that share one biased exponent. Each lane
//! keeps a sign bit and an unsigned mantissa with an explicit leading bit, so the
//! value of lane `i` is
//!
//! ```text
//! (-1)^sign_i * mantissa_i * 2^(shared_exp - bias - (man_bits - 1))
//! ```
//!
//! The shared exponent is the largest binary exponent in the group. Every other
//! lane is aligned to it and truncated toward zero, which means small lanes can
//! lose all their bits. At the default 4/5/9 configuration a group occupies
//! `4 + 9 * (5 + 1) = 58` bits.
//!
//! Packed layout (most significant bit first): the shared exponent in the top
//! `exp_bits`, followed by one `(sign, mantissa)` lane per element, lane 0 first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BfpConfig {
    pub exp_bits: u32,
    /// Magnitude bits per lane, excluding the sign.
    pub man_bits: u32,
    pub group_size: usize,
    pub exp_bias: i32,
}

impl Default for BfpConfig {
    fn default() -> Self {
        Self {
            exp_bits: 4,
            man_bits: 5,
            group_size: 9,
            exp_bias: 9,
        }
    }
}

impl BfpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exp_bits < 1 || self.exp_bits > 16 {
            return Err(Error::Config(format!(
                "exp_bits must be in 1..=16, got {}",
                self.exp_bits
            )));
        }
        if self.man_bits < 1 || self.man_bits > 30 {
            return Err(Error::Config(format!(
                "man_bits must be in 1..=30, got {}",
                self.man_bits
            )));
        }
        if self.group_size < 1 {
            return Err(Error::Config("group_size must be at least 1".into()));
        }
        if self.encoded_size_bits() > 128 {
            return Err(Error::Config(format!(
                "encoded group of {} bits does not fit the 128-bit packing",
                self.encoded_size_bits()
            )));
        }
        Ok(())
    }

    pub fn encoded_size_bits(&self) -> usize {
        self.exp_bits as usize + self.group_size * (self.man_bits as usize + 1)
    }

    pub fn effective_bits_per_value(&self) -> f64 {
        self.encoded_size_bits() as f64 / self.group_size as f64
    }

    pub fn max_exp_code(&self) -> u32 {
        (1u32 << self.exp_bits) - 1
    }

    /// Smallest unbiased shared exponent.
    pub fn min_exponent(&self) -> i32 {
        -self.exp_bias
    }

    /// Largest unbiased shared exponent.
    pub fn max_exponent(&self) -> i32 {
        self.max_exp_code() as i32 - self.exp_bias
    }

    pub fn max_mantissa(&self) -> u32 {
        (1u32 << self.man_bits) - 1
    }

    /// Largest representable magnitude.
    pub fn max_magnitude(&self) -> f64 {
        self.max_mantissa() as f64 * pow2(self.max_exponent() - (self.man_bits as i32 - 1))
    }

    fn lane_scale_exp(&self, unbiased: i32) -> i32 {
        unbiased - (self.man_bits as i32 - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BfpGroup {
    /// Biased shared exponent code.
    pub shared_exp: u32,
    pub signs: Vec<bool>,
    pub mantissas: Vec<u32>,
}

impl BfpGroup {
    pub fn zero(cfg: &BfpConfig) -> Self {
        Self {
            shared_exp: 0,
            signs: vec![false; cfg.group_size],
            mantissas: vec![0; cfg.group_size],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.mantissas.iter().all(|&m| m == 0)
    }

    pub fn unbiased_exp(&self, cfg: &BfpConfig) -> i32 {
        self.shared_exp as i32 - cfg.exp_bias
    }

    /// Pack into the documented bit layout; the low `encoded_size_bits` bits are used.
    pub fn to_bits(&self, cfg: &BfpConfig) -> u128 {
        let mut word = self.shared_exp as u128;
        for (&s, &m) in self.signs.iter().zip(&self.mantissas) {
            word = (word << 1) | s as u128;
            word = (word << cfg.man_bits) | m as u128;
        }
        word
    }

    pub fn from_bits(word: u128, cfg: &BfpConfig) -> Result<Self> {
        cfg.validate()?;
        let total = cfg.encoded_size_bits();
        if total < 128 && word >> total != 0 {
            return Err(Error::Encoding(format!(
                "word has bits set above bit {total}"
            )));
        }
        let lane_bits = cfg.man_bits + 1;
        let man_mask = (1u128 << cfg.man_bits) - 1;
        let mut signs = vec![false; cfg.group_size];
        let mut mantissas = vec![0u32; cfg.group_size];
        for lane in 0..cfg.group_size {
            let shift = (cfg.group_size - 1 - lane) as u32 * lane_bits;
            let bits = word >> shift;
            mantissas[lane] = (bits & man_mask) as u32;
            signs[lane] = (bits >> cfg.man_bits) & 1 == 1;
        }
        let shared_exp = (word >> (cfg.group_size as u32 * lane_bits)) as u32;
        Ok(Self {
            shared_exp,
            signs,
            mantissas,
        })
    }
}

/// Exact `2^k` for the normal f64 exponent range.
pub(crate) fn pow2(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// `floor(log2(|v|))` for a nonzero finite value, exact.
fn binary_exponent(v: f64) -> i32 {
    let bits = v.abs().to_bits();
    let field = (bits >> 52) as i32;
    if field == 0 {
        let mant = bits & ((1u64 << 52) - 1);
        -1074 + (63 - mant.leading_zeros() as i32)
    } else {
        field - 1023
    }
}

pub fn encode_group(values: &[f64], cfg: &BfpConfig) -> Result<BfpGroup> {
    if values.len() != cfg.group_size {
        return Err(Error::Encoding(format!(
            "expected {} values, got {}",
            cfg.group_size,
            values.len()
        )));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Encoding(format!("non-finite input {bad}")));
    }
    Ok(encode_unchecked(values, cfg))
}

fn encode_unchecked(values: &[f64], cfg: &BfpConfig) -> BfpGroup {
    let max_exp = values
        .iter()
        .filter(|v| **v != 0.0)
        .map(|v| binary_exponent(*v))
        .max();
    let Some(max_exp) = max_exp else {
        return BfpGroup::zero(cfg);
    };
    let shared = max_exp.clamp(cfg.min_exponent(), cfg.max_exponent());
    let inv_scale = pow2(-cfg.lane_scale_exp(shared));
    let cap = cfg.max_mantissa() as f64;
    let mut signs = Vec::with_capacity(values.len());
    let mut mantissas = Vec::with_capacity(values.len());
    for &v in values {
        let m = (v.abs() * inv_scale).floor().min(cap);
        signs.push(v.is_sign_negative() && m > 0.0);
        mantissas.push(m as u32);
    }
    let all_zero = mantissas.iter().all(|&m| m == 0);
    BfpGroup {
        shared_exp: if all_zero {
            0
        } else {
            (shared + cfg.exp_bias) as u32
        },
        signs,
        mantissas,
    }
}

pub fn decode_group(g: &BfpGroup, cfg: &BfpConfig) -> Vec<f64> {
    let scale = pow2(cfg.lane_scale_exp(g.unbiased_exp(cfg)));
    g.signs
        .iter()
        .zip(&g.mantissas)
        .map(|(&s, &m)| {
            let v = m as f64 * scale;
            if s {
                -v
            } else {
                v
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupDot {
    pub value: f64,
    /// One operand is an all-zero group, so the PE can skip the MAC.
    pub zero_operand: bool,
}

/// Dot product of two groups with integer mantissa arithmetic and a single
/// exponent addition.
pub fn dot_groups(a: &BfpGroup, b: &BfpGroup, cfg: &BfpConfig) -> GroupDot {
    if a.is_zero() || b.is_zero() {
        return GroupDot {
            value: 0.0,
            zero_operand: true,
        };
    }
    let acc: i64 = a
        .signs
        .iter()
        .zip(&a.mantissas)
        .zip(b.signs.iter().zip(&b.mantissas))
        .map(|((&sa, &ma), (&sb, &mb))| {
            let p = ma as i64 * mb as i64;
            if sa != sb {
                -p
            } else {
                p
            }
        })
        .sum();
    let exp = cfg.lane_scale_exp(a.unbiased_exp(cfg)) + cfg.lane_scale_exp(b.unbiased_exp(cfg));
    GroupDot {
        value: acc as f64 * pow2(exp),
        zero_operand: false,
    }
}

/// A real tensor stored as BFP groups tiled along one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfpTensor {
    pub shape: Vec<usize>,
    pub grouping_axis: usize,
    pub config: BfpConfig,
    pub groups: Vec<BfpGroup>,
    /// Padded lanes in the final group of every row.
    pub pad_count: usize,
}

struct Tiling {
    outer: usize,
    len: usize,
    inner: usize,
    groups_per_row: usize,
}

fn tiling(shape: &[usize], axis: usize, group: usize) -> Result<Tiling> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!("empty tensor shape {shape:?}")));
    }
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "axis {axis} out of range for {shape:?}"
        )));
    }
    let len = shape[axis];
    Ok(Tiling {
        outer: shape[..axis].iter().product(),
        len,
        inner: shape[axis + 1..].iter().product(),
        groups_per_row: len.div_ceil(group),
    })
}

fn for_each_row(t: &Tiling, mut f: impl FnMut(&mut dyn Iterator<Item = usize>)) {
    for o in 0..t.outer {
        for i in 0..t.inner {
            let base = o * t.len * t.inner + i;
            let mut idx = (0..t.len).map(move |k| base + k * t.inner);
            f(&mut idx);
        }
    }
}

pub fn quantize_tensor(
    values: &[f64],
    shape: &[usize],
    axis: usize,
    cfg: &BfpConfig,
) -> Result<BfpTensor> {
    cfg.validate()?;
    let t = tiling(shape, axis, cfg.group_size)?;
    if values.len() != t.outer * t.len * t.inner {
        return Err(Error::Shape(format!(
            "{} values do not match shape {shape:?}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Encoding("non-finite tensor element".into()));
    }
    let mut groups = Vec::with_capacity(t.outer * t.inner * t.groups_per_row);
    let mut lanes = vec![0.0; t.groups_per_row * cfg.group_size];
    for_each_row(&t, |idx| {
        lanes.iter_mut().for_each(|l| *l = 0.0);
        for (lane, i) in lanes.iter_mut().zip(idx) {
            *lane = values[i];
        }
        for chunk in lanes.chunks(cfg.group_size) {
            groups.push(encode_unchecked(chunk, cfg));
        }
    });
    Ok(BfpTensor {
        shape: shape.to_vec(),
        grouping_axis: axis,
        config: *cfg,
        groups,
        pad_count: t.groups_per_row * cfg.group_size - t.len,
    })
}

pub fn dequantize_tensor(bt: &BfpTensor) -> Result<Vec<f64>> {
    let cfg = &bt.config;
    let t = tiling(&bt.shape, bt.grouping_axis, cfg.group_size)?;
    if bt.groups.len() != t.outer * t.inner * t.groups_per_row {
        return Err(Error::Shape("group count does not match shape".into()));
    }
    let mut out = vec![0.0; t.outer * t.len * t.inner];
    let mut groups = bt.groups.chunks(t.groups_per_row);
    for_each_row(&t, |idx| {
        let row = groups.next().expect("group count checked above");
        let lanes: Vec<f64> = row.iter().flat_map(|g| decode_group(g, cfg)).collect();
        for (i, v) in idx.zip(lanes) {
            out[i] = v;
        }
    });
    Ok(out)
}

/// Round-trip `values` through BFP in place (quantize then dequantize).
/// Produces exactly `dequantize_tensor(quantize_tensor(..))` without building groups.
pub fn fake_quantize(
    values: &mut [f64],
    shape: &[usize],
    axis: usize,
    cfg: &BfpConfig,
) -> Result<()> {
    let t = tiling(shape, axis, cfg.group_size)?;
    if values.len() != t.outer * t.len * t.inner {
        return Err(Error::Shape(format!(
            "{} values do not match shape {shape:?}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Encoding("non-finite tensor element".into()));
    }
    let cap = cfg.max_mantissa() as f64;
    for o in 0..t.outer {
        for i in 0..t.inner {
            let base = o * t.len * t.inner + i;
            for g in 0..t.groups_per_row {
                let lanes = (g * cfg.group_size)..((g + 1) * cfg.group_size).min(t.len);
                let at = |k: usize| base + k * t.inner;
                let max_exp = lanes
                    .clone()
                    .map(|k| values[at(k)])
                    .filter(|v| *v != 0.0)
                    .map(binary_exponent)
                    .max();
                let Some(max_exp) = max_exp else { continue };
                let shared = max_exp.clamp(cfg.min_exponent(), cfg.max_exponent());
                let e = cfg.lane_scale_exp(shared);
                let (inv, scale) = (pow2(-e), pow2(e));
                for k in lanes {
                    let v = &mut values[at(k)];
                    let m = (v.abs() * inv).floor().min(cap) * scale;
                    *v = if *v < 0.0 && m > 0.0 { -m } else { m };
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Reference encoder working on the raw IEEE-754 significand with integer
    /// shifts only. Independent of the float-scaling path in `encode_group`.
    fn reference_encode(values: &[f64], cfg: &BfpConfig) -> (u32, Vec<bool>, Vec<u32>) {
        let parts: Vec<Option<(bool, i32, u64)>> = values
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    return None;
                }
                let bits = v.to_bits();
                let field = ((bits >> 52) & 0x7ff) as i32;
                let frac = bits & ((1u64 << 52) - 1);
                assert!(field != 0, "oracle handles normal numbers only");
                // |v| = sig * 2^(field - 1075), sig has 53 bits with bit 52 set.
                Some((v < 0.0, field - 1023, frac | (1u64 << 52)))
            })
            .collect();
        let max_e = parts.iter().flatten().map(|p| p.1).max();
        let Some(max_e) = max_e else {
            return (0, vec![false; values.len()], vec![0; values.len()]);
        };
        let shared = max_e.clamp(-cfg.exp_bias, cfg.max_exp_code() as i32 - cfg.exp_bias);
        let mut signs = vec![];
        let mut mans = vec![];
        for p in &parts {
            match p {
                None => {
                    signs.push(false);
                    mans.push(0);
                }
                Some((neg, e, sig)) => {
                    // mantissa = floor(sig * 2^(e - 52) / 2^(shared - (man_bits - 1)))
                    let shift = 52 - (e - shared + cfg.man_bits as i32 - 1);
                    let m: u128 = if shift >= 128 {
                        0
                    } else if shift >= 0 {
                        (*sig as u128) >> shift
                    } else {
                        (*sig as u128) << (-shift).min(100)
                    };
                    let m = m.min(cfg.max_mantissa() as u128) as u32;
                    signs.push(*neg && m > 0);
                    mans.push(m);
                }
            }
        }
        let code = if mans.iter().all(|&m| m == 0) {
            0
        } else {
            (shared + cfg.exp_bias) as u32
        };
        (code, signs, mans)
    }

    fn random_group(rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
        (0..9)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect()
    }

    #[test]
    fn default_group_is_58_bits() {
        let cfg = BfpConfig::default();
        assert_eq!(cfg.encoded_size_bits(), 58);
        assert!((cfg.effective_bits_per_value() - 58.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_group() {
        let cfg = BfpConfig::default();
        let g = encode_group(&[0.0; 9], &cfg).unwrap();
        assert_eq!(g.shared_exp, 0);
        assert!(g.mantissas.iter().all(|&m| m == 0));
        assert_eq!(decode_group(&g, &cfg), vec![0.0; 9]);
    }

    #[test]
    fn golden_powers_of_two() {
        let cfg = BfpConfig::default();
        let v = [1.0, 0.5, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let (code, signs, mans) = reference_encode(&v, &cfg);
        // Frozen from the reference encoder.
        assert_eq!(code, 9);
        assert_eq!(mans, vec![16, 8, 4, 0, 0, 0, 0, 0, 0]);
        assert!(signs.iter().all(|s| !s));
        let g = encode_group(&v, &cfg).unwrap();
        assert_eq!(
            (g.shared_exp, &g.signs, &g.mantissas),
            (code, &signs, &mans)
        );
        assert_eq!(decode_group(&g, &cfg), v.to_vec());
    }

    #[test]
    fn ones_survive_exactly() {
        let cfg = BfpConfig::default();
        let g = encode_group(&[1.0; 9], &cfg).unwrap();
        assert_eq!(decode_group(&g, &cfg), vec![1.0; 9]);
    }

    #[test]
    fn rejects_non_finite_and_wrong_length() {
        let cfg = BfpConfig::default();
        let mut v = [0.5; 9];
        v[3] = f64::NAN;
        assert!(matches!(encode_group(&v, &cfg), Err(Error::Encoding(_))));
        v[3] = f64::INFINITY;
        assert!(encode_group(&v, &cfg).is_err());
        assert!(encode_group(&[1.0; 8], &cfg).is_err());
    }

    #[test]
    fn matches_reference_encoder_on_random_groups() {
        let cfg = BfpConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..1000 {
            let scale = [1e-4, 0.01, 1.0, 3.0, 100.0][i % 5];
            let v = random_group(&mut rng, scale);
            let (code, signs, mans) = reference_encode(&v, &cfg);
            let g = encode_group(&v, &cfg).unwrap();
            assert_eq!(g.shared_exp, code, "{v:?}");
            assert_eq!(g.signs, signs);
            assert_eq!(g.mantissas, mans);
        }
    }

    #[test]
    fn truncation_error_bounds() {
        let cfg = BfpConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let v = random_group(&mut rng, 1.0);
            let g = encode_group(&v, &cfg).unwrap();
            let d = decode_group(&g, &cfg);
            let shared = g.unbiased_exp(&cfg);
            for (x, y) in v.iter().zip(&d) {
                assert!(y.abs() <= x.abs(), "truncation must not grow magnitude");
                assert!(x.signum() == y.signum() || *y == 0.0);
                if *x != 0.0 && binary_exponent(*x) == shared {
                    let rel = (x - y).abs() / x.abs();
                    assert!(rel <= pow2(1 - cfg.man_bits as i32), "rel {rel}");
                } else {
                    assert!((x - y).abs() <= x.abs());
                }
            }
        }
    }

    #[test]
    fn dot_with_zero_group_flags_skip() {
        let cfg = BfpConfig::default();
        let a = encode_group(&[0.3; 9], &cfg).unwrap();
        let z = BfpGroup::zero(&cfg);
        let d = dot_groups(&a, &z, &cfg);
        assert_eq!(d.value, 0.0);
        assert!(d.zero_operand);
    }

    #[test]
    fn dot_of_ones_is_nine() {
        let cfg = BfpConfig::default();
        let a = encode_group(&[1.0; 9], &cfg).unwrap();
        let d = dot_groups(&a, &a, &cfg);
        assert_eq!(d.value, 9.0);
        assert!(!d.zero_operand);
    }

    #[test]
    fn dot_equals_decoded_real_dot() {
        let cfg = BfpConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = encode_group(&random_group(&mut rng, 2.0), &cfg).unwrap();
            let b = encode_group(&random_group(&mut rng, 0.05), &cfg).unwrap();
            let da = decode_group(&a, &cfg);
            let db = decode_group(&b, &cfg);
            let oracle: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
            assert_eq!(dot_groups(&a, &b, &cfg).value, oracle);
        }
    }

    #[test]
    fn overflow_saturates_and_underflow_flushes() {
        let cfg = BfpConfig::default();
        let big = encode_group(&[1e6, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &cfg).unwrap();
        assert_eq!(big.shared_exp, cfg.max_exp_code());
        assert_eq!(big.mantissas[0], cfg.max_mantissa());
        assert_eq!(decode_group(&big, &cfg)[0], cfg.max_magnitude());
        let tiny = encode_group(&[1e-9; 9], &cfg).unwrap();
        assert!(tiny.is_zero());
        assert_eq!(tiny.shared_exp, 0);
    }

    #[test]
    fn bit_layout_is_msb_first() {
        let cfg = BfpConfig::default();
        let g = encode_group(&[-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5], &cfg).unwrap();
        let w = g.to_bits(&cfg);
        assert!(w < (1u128 << 58));
        assert_eq!(w >> 54, 9);
        // lane 0: sign 1, mantissa 16
        assert_eq!((w >> 48) & 0x3f, 0b110000);
        // lane 8: sign 0, mantissa 8
        assert_eq!(w & 0x3f, 0b001000);
        assert_eq!(BfpGroup::from_bits(w, &cfg).unwrap(), g);
    }

    #[test]
    fn tensor_tiling_shapes() {
        let cfg = BfpConfig::default();
        let t = quantize_tensor(&[0.5; 36], &[2, 18], 1, &cfg).unwrap();
        assert_eq!(t.groups.len(), 4);
        assert_eq!(t.pad_count, 0);
        let vals: Vec<f64> = (0..10).map(|i| i as f64 * 0.25 - 1.0).collect();
        let t = quantize_tensor(&vals, &[1, 10], 1, &cfg).unwrap();
        assert_eq!(t.groups.len(), 2);
        assert_eq!(t.pad_count, 8);
        let last = &t.groups[1];
        assert!(last.mantissas[1..].iter().all(|&m| m == 0));
        let back = dequantize_tensor(&t).unwrap();
        assert_eq!(back.len(), 10);
        let mut manual = vals.clone();
        fake_quantize(&mut manual, &[1, 10], 1, &cfg).unwrap();
        assert_eq!(back, manual);
    }

    #[test]
    fn zero_tensor_round_trip_and_empty_error() {
        let cfg = BfpConfig::default();
        let t = quantize_tensor(&[0.0; 27], &[3, 3, 3], 0, &cfg).unwrap();
        assert_eq!(dequantize_tensor(&t).unwrap(), vec![0.0; 27]);
        assert!(matches!(
            quantize_tensor(&[], &[0, 4], 1, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_last_axis_groups_strided_lanes() {
        let cfg = BfpConfig::default();
        // shape (9, 2): grouping axis 0 gathers column entries.
        let mut v = vec![0.0; 18];
        v[0] = 1.0; // column 0
        v[1] = 8.0; // column 1
        let t = quantize_tensor(&v, &[9, 2], 0, &cfg).unwrap();
        assert_eq!(t.groups.len(), 2);
        assert_eq!(t.groups[0].unbiased_exp(&cfg), 0);
        assert_eq!(t.groups[1].unbiased_exp(&cfg), 3);
        assert_eq!(dequantize_tensor(&t).unwrap(), v);
    }

    proptest! {
        #[test]
        fn reencoding_is_idempotent(v in proptest::collection::vec(-50.0f64..50.0, 9)) {
            let cfg = BfpConfig::default();
            let g = encode_group(&v, &cfg).unwrap();
            let d = decode_group(&g, &cfg);
            let g2 = encode_group(&d, &cfg).unwrap();
            prop_assert_eq!(&g2, &g);
        }

        #[test]
        fn power_of_two_scaling_shifts_exponent(v in proptest::collection::vec(-1.0f64..1.0, 9), k in -3i32..3) {
            let cfg = BfpConfig::default();
            let g = encode_group(&v, &cfg).unwrap();
            prop_assume!(!g.is_zero());
            let e = g.unbiased_exp(&cfg);
            prop_assume!(e + k >= cfg.min_exponent() && e + k <= cfg.max_exponent() && e > cfg.min_exponent());
            let scaled: Vec<f64> = v.iter().map(|x| x * pow2(k)).collect();
            let gs = encode_group(&scaled, &cfg).unwrap();
            prop_assert_eq!(gs.unbiased_exp(&cfg), e + k);
            prop_assert_eq!(gs.mantissas, g.mantissas);
        }

        #[test]
        fn fake_quantize_equals_round_trip(v in proptest::collection::vec(-40.0f64..40.0, 1..60), split in 1usize..4) {
            let cfg = BfpConfig::default();
            let n = v.len();
            let shape = if n % split == 0 { vec![split, n / split] } else { vec![1, n] };
            for axis in 0..2 {
                let bt = quantize_tensor(&v, &shape, axis, &cfg).unwrap();
                let mut f = v.clone();
                fake_quantize(&mut f, &shape, axis, &cfg).unwrap();
                prop_assert_eq!(dequantize_tensor(&bt).unwrap(), f);
            }
        }

        #[test]
        fn bits_round_trip(v in proptest::collection::vec(-10.0f64..10.0, 9)) {
            let cfg = BfpConfig::default();
            let g = encode_group(&v, &cfg).unwrap();
            prop_assert_eq!(BfpGroup::from_bits(g.to_bits(&cfg), &cfg).unwrap(), g);
        }
    }
}
