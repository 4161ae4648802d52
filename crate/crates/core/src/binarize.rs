//! Binarization primitives and the 1-bit packing codec.
//!
//! Bit layout: element `j` of a row lives in word `j / 64`, bit `j % 64`
//! (LSB first). Each row starts on a fresh word and bits past `cols` in the
//! last word are always zero.

use rand::Rng;

use crate::error::{BnnError, Result};
use crate::tensor::RealMatrix;

/// The two-symbol code a binarized value is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryAlphabet {
    /// `{-1, +1}`; bit 1 is `+1`.
    Signed,
    /// `{0, 1}`; bit 1 is `1`.
    Unsigned,
}

impl BinaryAlphabet {
    #[inline]
    pub fn high(self) -> f32 {
        1.0
    }

    #[inline]
    pub fn low(self) -> f32 {
        match self {
            BinaryAlphabet::Signed => -1.0,
            BinaryAlphabet::Unsigned => 0.0,
        }
    }

    #[inline]
    pub fn code(self, bit: bool) -> f32 {
        if bit {
            self.high()
        } else {
            self.low()
        }
    }

    /// Sign rule: strictly positive maps high, everything else (zero included) maps low.
    #[inline]
    pub fn binarize(self, x: f32) -> f32 {
        self.code(x > 0.0)
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryAlphabet::Signed => "signed",
            BinaryAlphabet::Unsigned => "unsigned",
        }
    }
}

#[inline]
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Mask of the valid bits in the last word of a `bits`-long row.
#[inline]
pub(crate) fn tail_mask(bits: usize) -> u64 {
    match bits % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Binary matrix stored one bit per element in per-row padded `u64` words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedMatrix {
    rows: usize,
    cols: usize,
    alphabet: BinaryAlphabet,
    words: Vec<u64>,
}

impl PackedMatrix {
    /// Wraps raw words, checking the length and that padding bits are clear.
    pub fn from_words(rows: usize, cols: usize, alphabet: BinaryAlphabet, words: Vec<u64>) -> Result<Self> {
        let wpr = words_for(cols);
        if words.len() != rows * wpr {
            return Err(BnnError::Config(format!(
                "packed matrix {rows}x{cols} needs {} words, got {}",
                rows * wpr,
                words.len()
            )));
        }
        let m = PackedMatrix {
            rows,
            cols,
            alphabet,
            words,
        };
        if let Some(row) = m.first_dirty_row() {
            return Err(BnnError::format(
                "padding",
                row,
                format!("nonzero padding bits in row {row}"),
            ));
        }
        Ok(m)
    }

    fn first_dirty_row(&self) -> Option<usize> {
        let wpr = self.words_per_row();
        if wpr == 0 {
            return None;
        }
        let mask = tail_mask(self.cols);
        (0..self.rows).find(|&r| self.words[r * wpr + wpr - 1] & !mask != 0)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn alphabet(&self) -> BinaryAlphabet {
        self.alphabet
    }

    pub fn words_per_row(&self) -> usize {
        words_for(self.cols)
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn row_words(&self, row: usize) -> &[u64] {
        let wpr = self.words_per_row();
        &self.words[row * wpr..(row + 1) * wpr]
    }

    #[inline]
    pub fn bit(&self, row: usize, col: usize) -> bool {
        let w = self.row_words(row)[col / 64];
        (w >> (col % 64)) & 1 == 1
    }

    /// Number of high bits in a row.
    pub fn row_popcount(&self, row: usize) -> u32 {
        self.row_words(row).iter().map(|w| w.count_ones()).sum()
    }

    /// Size of the packed weight payload in bytes.
    pub fn byte_len(&self) -> usize {
        self.words.len() * 8
    }
}

/// Sign binarization into `alphabet`'s codes.
pub fn sign_binarize(w: &RealMatrix, alphabet: BinaryAlphabet) -> RealMatrix {
    w.map(|v| alphabet.binarize(v))
}

/// Clamps every element into `[-1, +1]`.
pub fn clip_weights(w: &RealMatrix) -> RealMatrix {
    w.map(clip_scalar)
}

#[inline]
pub(crate) fn clip_scalar(v: f32) -> f32 {
    v.clamp(-1.0, 1.0)
}

/// Straight-through validity mask: 0 where `|h| > k`, 1 elsewhere.
pub fn grad_mask(h_pre: &[f32], k: f32) -> Result<Vec<f32>> {
    if k.is_nan() || k <= 0.0 {
        return Err(BnnError::Config(format!("mask threshold k must be > 0, got {k}")));
    }
    Ok(h_pre.iter().map(|&h| if h.abs() > k { 0.0 } else { 1.0 }).collect())
}

/// Probability of snapping a weight to its sign given `|w|`.
pub type SnapProbability = fn(f32) -> f32;

/// `p(|w|) = |w|`.
pub fn identity_snap_probability(abs_w: f32) -> f32 {
    abs_w
}

/// Semi-stochastic binarization with `p(|w|) = |w|`.
pub fn semi_stochastic_round<R: Rng + ?Sized>(w: &RealMatrix, rng: &mut R) -> Result<RealMatrix> {
    semi_stochastic_round_with(w, rng, identity_snap_probability)
}

/// Independently replaces each element with its sign (`±1`) with probability
/// `prob(|w|)`; otherwise leaves it untouched. Requires `|w| <= 1`.
pub fn semi_stochastic_round_with<R: Rng + ?Sized>(
    w: &RealMatrix,
    rng: &mut R,
    prob: SnapProbability,
) -> Result<RealMatrix> {
    if let Some(pos) = w.as_slice().iter().position(|v| v.abs() > 1.0) {
        return Err(BnnError::Precondition(format!(
            "semi-stochastic rounding needs clipped weights; |w| > 1 at row {}, col {}",
            pos / w.cols(),
            pos % w.cols()
        )));
    }
    let mut out = w.clone();
    semi_stochastic_round_in_place(&mut out, rng, prob);
    Ok(out)
}

pub(crate) fn semi_stochastic_round_in_place<R: Rng + ?Sized>(w: &mut RealMatrix, rng: &mut R, prob: SnapProbability) {
    for v in w.as_mut_slice() {
        let u: f32 = rng.random();
        if u < prob(v.abs()) {
            // Zero never reaches here under the identity map since u >= 0.
            *v = if *v > 0.0 { 1.0 } else { -1.0 };
        }
    }
}

/// Packs a matrix whose elements are all codes of `alphabet`.
pub fn pack_bits(b: &RealMatrix, alphabet: BinaryAlphabet) -> Result<PackedMatrix> {
    let wpr = words_for(b.cols());
    let mut words = vec![0u64; b.rows() * wpr];
    for r in 0..b.rows() {
        let dst = &mut words[r * wpr..(r + 1) * wpr];
        for (c, &v) in b.row(r).iter().enumerate() {
            if v == alphabet.high() {
                dst[c / 64] |= 1u64 << (c % 64);
            } else if v != alphabet.low() {
                return Err(BnnError::Data(format!(
                    "value {v} at row {r}, col {c} is not a {} code",
                    alphabet.name()
                )));
            }
        }
    }
    Ok(PackedMatrix {
        rows: b.rows(),
        cols: b.cols(),
        alphabet,
        words,
    })
}

/// Binarizes real values with the sign rule and packs them in one pass.
pub fn pack_sign(w: &RealMatrix, alphabet: BinaryAlphabet) -> PackedMatrix {
    let wpr = words_for(w.cols());
    let mut words = vec![0u64; w.rows() * wpr];
    for r in 0..w.rows() {
        pack_row_sign(w.row(r), &mut words[r * wpr..(r + 1) * wpr]);
    }
    PackedMatrix {
        rows: w.rows(),
        cols: w.cols(),
        alphabet,
        words,
    }
}

#[inline]
pub(crate) fn pack_row_sign(values: &[f32], dst: &mut [u64]) {
    for (chunk, word) in values.chunks(64).zip(dst.iter_mut()) {
        let mut acc = 0u64;
        for (bit, &v) in chunk.iter().enumerate() {
            acc |= u64::from(v > 0.0) << bit;
        }
        *word = acc;
    }
}

/// Expands a packed matrix back into its alphabet's codes.
pub fn unpack_bits(p: &PackedMatrix) -> Result<RealMatrix> {
    if let Some(row) = p.first_dirty_row() {
        return Err(BnnError::format(
            "padding",
            row,
            format!("nonzero padding bits in row {row}"),
        ));
    }
    let mut data = Vec::with_capacity(p.rows * p.cols);
    for r in 0..p.rows {
        for c in 0..p.cols {
            data.push(p.alphabet.code(p.bit(r, c)));
        }
    }
    RealMatrix::new(p.rows, p.cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sign_maps_zero_low() {
        let w = RealMatrix::from_rows(&[[0.3, -0.5], [0.0, 2.0]]);
        assert_eq!(
            sign_binarize(&w, BinaryAlphabet::Signed),
            RealMatrix::from_rows(&[[1.0, -1.0], [-1.0, 1.0]])
        );
        let w = RealMatrix::from_rows(&[[0.3, -0.5]]);
        assert_eq!(
            sign_binarize(&w, BinaryAlphabet::Unsigned),
            RealMatrix::from_rows(&[[1.0, 0.0]])
        );
        // -0.0 is not > 0
        assert_eq!(BinaryAlphabet::Signed.binarize(-0.0), -1.0);
    }

    #[test]
    fn sign_is_idempotent_on_binary_input() {
        let b = RealMatrix::from_rows(&[[1.0, -1.0, -1.0], [1.0, 1.0, -1.0]]);
        assert_eq!(sign_binarize(&b, BinaryAlphabet::Signed), b);
        let u = RealMatrix::from_rows(&[[1.0, 0.0, 0.0]]);
        assert_eq!(sign_binarize(&u, BinaryAlphabet::Unsigned), u);
    }

    #[test]
    fn clip_cases() {
        let w = RealMatrix::from_rows(&[[1.7, -2.3, 0.4]]);
        let c = clip_weights(&w);
        assert_eq!(c, RealMatrix::from_rows(&[[1.0, -1.0, 0.4]]));
        assert_eq!(clip_weights(&c), c);
    }

    #[test]
    fn mask_cases() {
        assert_eq!(grad_mask(&[1.5, -0.5, 0.0], 1.0).unwrap(), vec![0.0, 1.0, 1.0]);
        assert_eq!(grad_mask(&[2.0, -2.0], 2.0).unwrap(), vec![1.0, 1.0]);
        assert_eq!(grad_mask(&[3.0, -4.0, 9.0], 2.5).unwrap(), vec![0.0; 3]);
        assert!(matches!(grad_mask(&[1.0], 0.0), Err(BnnError::Config(_))));
        assert!(matches!(grad_mask(&[1.0], -1.0), Err(BnnError::Config(_))));
        assert!(matches!(grad_mask(&[1.0], f32::NAN), Err(BnnError::Config(_))));
    }

    #[test]
    fn semi_stochastic_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = RealMatrix::from_rows(&[[1.0, -1.0, 0.0, 0.0]]);
        for _ in 0..1000 {
            assert_eq!(semi_stochastic_round(&w, &mut rng).unwrap(), w);
        }
    }

    #[test]
    fn semi_stochastic_rejects_unclipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = RealMatrix::from_rows(&[[1.01]]);
        assert!(matches!(
            semi_stochastic_round(&w, &mut rng),
            Err(BnnError::Precondition(_))
        ));
    }

    #[test]
    fn semi_stochastic_frequency_matches_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trials = 100_000;
        let w = RealMatrix::new(1, trials, vec![0.6; trials]).unwrap();
        let out = semi_stochastic_round(&w, &mut rng).unwrap();
        let replaced = out.as_slice().iter().filter(|&&v| v != 0.6).count();
        assert!(out.as_slice().iter().all(|&v| v == 0.6 || v == 1.0));
        let frac = replaced as f64 / trials as f64;
        assert!((frac - 0.6).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn pack_layout() {
        let ones = RealMatrix::new(1, 64, vec![1.0; 64]).unwrap();
        let p = pack_bits(&ones, BinaryAlphabet::Signed).unwrap();
        assert_eq!(p.words(), &[u64::MAX]);
        let r = RealMatrix::from_rows(&[[1.0, -1.0, 1.0]]);
        let p = pack_bits(&r, BinaryAlphabet::Signed).unwrap();
        assert_eq!(p.words(), &[0x5]);
        assert_eq!(unpack_bits(&p).unwrap(), r);
    }

    #[test]
    fn pack_rejects_non_codes() {
        let r = RealMatrix::from_rows(&[[1.0, -1.0], [0.5, 1.0]]);
        let err = pack_bits(&r, BinaryAlphabet::Signed).unwrap_err();
        assert!(err.to_string().contains("row 1, col 0"), "{err}");
        let r = RealMatrix::from_rows(&[[-1.0]]);
        assert!(pack_bits(&r, BinaryAlphabet::Unsigned).is_err());
    }

    #[test]
    fn unpack_rejects_dirty_padding() {
        assert!(PackedMatrix::from_words(1, 3, BinaryAlphabet::Signed, vec![0b1000]).is_err());
        assert!(PackedMatrix::from_words(2, 3, BinaryAlphabet::Signed, vec![0b111]).is_err());
        let forged = PackedMatrix {
            rows: 1,
            cols: 3,
            alphabet: BinaryAlphabet::Signed,
            words: vec![0b1_0101],
        };
        assert!(matches!(unpack_bits(&forged), Err(BnnError::Format { .. })));
    }

    #[test]
    fn random_7x130_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = (0..7 * 130)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let m = RealMatrix::new(7, 130, data).unwrap();
        let p = pack_bits(&m, BinaryAlphabet::Signed).unwrap();
        assert_eq!(p.words().len(), 7 * 3);
        assert_eq!(unpack_bits(&p).unwrap(), m);
        assert_eq!(pack_sign(&m, BinaryAlphabet::Signed), p);
    }

    fn binary_matrix() -> impl Strategy<Value = (RealMatrix, BinaryAlphabet)> {
        (1usize..6, 1usize..=129, any::<bool>()).prop_flat_map(|(rows, cols, signed)| {
            let alphabet = if signed {
                BinaryAlphabet::Signed
            } else {
                BinaryAlphabet::Unsigned
            };
            proptest::collection::vec(any::<bool>(), rows * cols).prop_map(move |bits| {
                let data = bits.into_iter().map(|b| alphabet.code(b)).collect();
                (RealMatrix::new(rows, cols, data).unwrap(), alphabet)
            })
        })
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection((m, alphabet) in binary_matrix()) {
            let p = pack_bits(&m, alphabet).unwrap();
            prop_assert_eq!(p.words().len(), m.rows() * m.cols().div_ceil(64));
            let mask = tail_mask(m.cols());
            for r in 0..m.rows() {
                prop_assert_eq!(p.row_words(r).last().unwrap() & !mask, 0);
            }
            prop_assert_eq!(unpack_bits(&p).unwrap(), m);
        }

        #[test]
        fn sign_and_clip_properties(data in proptest::collection::vec(-5.0f32..5.0, 12)) {
            let w = RealMatrix::new(3, 4, data).unwrap();
            for alphabet in [BinaryAlphabet::Signed, BinaryAlphabet::Unsigned] {
                let s = sign_binarize(&w, alphabet);
                prop_assert!(s.as_slice().iter().all(|&v| v == alphabet.high() || v == alphabet.low()));
                prop_assert_eq!(sign_binarize(&s, alphabet), s.clone());
            }
            let c = clip_weights(&w);
            prop_assert!(c.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert_eq!(clip_weights(&c), c.clone());
            // monotone
            for (a, b) in w.as_slice().iter().zip(w.as_slice().iter().skip(1)) {
                if a <= b {
                    prop_assert!(clip_scalar(*a) <= clip_scalar(*b));
                }
            }
        }

        #[test]
        fn mask_monotone_in_k(h in proptest::collection::vec(-4.0f32..4.0, 16), k1 in 0.01f32..4.0, dk in 0.0f32..3.0) {
            let masked = |k: f32| grad_mask(&h, k).unwrap().iter().filter(|&&m| m == 0.0).count();
            prop_assert!(masked(k1 + dk) <= masked(k1));
        }

        #[test]
        fn semi_stochastic_never_flips(data in proptest::collection::vec(-1.0f32..=1.0, 20), seed in any::<u64>()) {
            let w = RealMatrix::new(4, 5, data).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = semi_stochastic_round(&w, &mut rng).unwrap();
            for (a, b) in w.as_slice().iter().zip(out.as_slice()) {
                prop_assert!(b == a || *b == 1.0 || *b == -1.0);
                if *a != 0.0 {
                    prop_assert_eq!(a.signum(), b.signum());
                }
            }
        }
    }
}
