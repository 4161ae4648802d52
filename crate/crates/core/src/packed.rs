//! Bit-packed inference.
//!
//! Binary-weight layers run without multiplications: against real inputs
//! each weight bit selects add or subtract, and against binary inputs the
//! dot product is a popcount over XOR (signed) or AND (unsigned) words.
//! Accumulation order matches the reference `gemv`, so packed and reference
//! outputs agree bit for bit.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binarize::{pack_row_sign, pack_sign, tail_mask, unpack_bits, words_for, BinaryAlphabet, PackedMatrix};
use crate::error::{BnnError, Result};
use crate::network::{ActivationKind, Layer, LayerSpec, Network, UpdatePolicy, WeightMode};
use crate::tensor::{gemv, gemv_into, softmax_into, RealMatrix, RealVector};

/// A binary vector packed like one [`PackedMatrix`] row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedVector {
    len: usize,
    alphabet: BinaryAlphabet,
    words: Vec<u64>,
}

impl PackedVector {
    pub fn from_words(len: usize, alphabet: BinaryAlphabet, words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(BnnError::Config(format!(
                "{len} bits need {} words, got {}",
                words_for(len),
                words.len()
            )));
        }
        if let Some(&last) = words.last() {
            if last & !tail_mask(len) != 0 {
                return Err(BnnError::format("padding", words.len() - 1, "nonzero padding bits"));
            }
        }
        Ok(PackedVector { len, alphabet, words })
    }

    /// Sign-binarizes `x` and packs it.
    pub fn from_sign(x: &[f32], alphabet: BinaryAlphabet) -> Self {
        let mut words = vec![0u64; words_for(x.len())];
        pack_row_sign(x, &mut words);
        PackedVector {
            len: x.len(),
            alphabet,
            words,
        }
    }

    /// Packs a vector whose entries are all codes of `alphabet`.
    pub fn from_codes(x: &[f32], alphabet: BinaryAlphabet) -> Result<Self> {
        if let Some(i) = x.iter().position(|&v| v != alphabet.high() && v != alphabet.low()) {
            return Err(BnnError::Data(format!(
                "value {} at {i} is not a {} code",
                x[i],
                alphabet.name()
            )));
        }
        Ok(PackedVector::from_sign(x, alphabet))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn alphabet(&self) -> BinaryAlphabet {
        self.alphabet
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn to_codes(&self) -> RealVector {
        (0..self.len)
            .map(|i| self.alphabet.code(self.bit(i)))
            .collect::<Vec<_>>()
            .into()
    }
}

fn check_dot_operands(a: &PackedVector, b: &[u64], n: usize, alphabet: BinaryAlphabet) -> Result<()> {
    if a.alphabet != alphabet {
        return Err(BnnError::Config(format!(
            "{} dot needs {} operands",
            alphabet.name(),
            alphabet.name()
        )));
    }
    if a.len != n || b.len() != words_for(n) {
        return Err(BnnError::Internal(format!(
            "dot length mismatch: vector has {} bits, row has {} words, n = {n}",
            a.len,
            b.len()
        )));
    }
    Ok(())
}

/// Signed dot product `Σ aᵢbᵢ` over `{-1, +1}`, as `n - 2·popcount(a XOR b)`.
pub fn xnor_dot(a: &PackedVector, b: &[u64], n: usize) -> Result<i64> {
    check_dot_operands(a, b, n, BinaryAlphabet::Signed)?;
    Ok(xnor_words(&a.words, b, n))
}

/// Unsigned dot product `Σ aᵢbᵢ` over `{0, 1}`, as `popcount(a AND b)`.
pub fn and_dot(a: &PackedVector, b: &[u64], n: usize) -> Result<i64> {
    check_dot_operands(a, b, n, BinaryAlphabet::Unsigned)?;
    Ok(and_words(&a.words, b))
}

#[inline]
fn xnor_words(a: &[u64], b: &[u64], n: usize) -> i64 {
    debug_assert!(a.last().is_none_or(|&w| w & !tail_mask(n) == 0));
    debug_assert!(b.last().is_none_or(|&w| w & !tail_mask(n) == 0));
    let diff: u32 = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum();
    n as i64 - 2 * i64::from(diff)
}

#[inline]
fn and_words(a: &[u64], b: &[u64]) -> i64 {
    a.iter().zip(b).map(|(x, y)| i64::from((x & y).count_ones())).sum()
}

fn check_bias(rows: usize, bias: &[f32]) -> Result<()> {
    if bias.len() != rows {
        return Err(BnnError::Config(format!(
            "bias has {} entries, matrix has {rows} rows",
            bias.len()
        )));
    }
    Ok(())
}

/// `w · x + bias` for a binary `w` and real `x`, using only additions and
/// subtractions (signed) or masked additions (unsigned).
pub fn packed_gemv_real(w: &PackedMatrix, x: &[f32], bias: &[f32]) -> Result<RealVector> {
    if w.cols() != x.len() {
        return Err(BnnError::Config(format!(
            "packed gemv shape mismatch: w is {}x{}, x has {}",
            w.rows(),
            w.cols(),
            x.len()
        )));
    }
    check_bias(w.rows(), bias)?;
    let mut out = vec![0.0f32; w.rows()];
    packed_gemv_real_into(w, x, bias, &mut out);
    Ok(RealVector::new(out))
}

fn packed_gemv_real_into(w: &PackedMatrix, x: &[f32], bias: &[f32], out: &mut [f32]) {
    let signed = w.alphabet() == BinaryAlphabet::Signed;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (&word, xs) in w.row_words(i).iter().zip(x.chunks(64)) {
            for (b, &v) in xs.iter().enumerate() {
                let v = f64::from(v);
                if word >> b & 1 == 1 {
                    acc += v;
                } else if signed {
                    acc -= v;
                } else {
                    // 0 · v, kept so signed zeros and NaNs follow the reference path
                    acc += 0.0 * v;
                }
            }
        }
        *o = (acc + f64::from(bias[i])) as f32;
    }
}

/// `w · x + bias` for binary `w` and binary `x` of the same alphabet.
/// The dot product is an exact integer; floats appear only at the bias.
pub fn packed_gemv_binary(w: &PackedMatrix, x: &PackedVector, bias: &[f32]) -> Result<RealVector> {
    if w.alphabet() != x.alphabet() {
        return Err(BnnError::Config(format!(
            "alphabet mismatch: weights are {}, activations are {}",
            w.alphabet().name(),
            x.alphabet().name()
        )));
    }
    if w.cols() != x.len() {
        return Err(BnnError::Config(format!(
            "packed gemv shape mismatch: w is {}x{}, x has {}",
            w.rows(),
            w.cols(),
            x.len()
        )));
    }
    check_bias(w.rows(), bias)?;
    let mut out = vec![0.0f32; w.rows()];
    packed_gemv_binary_into(w, x, bias, &mut out);
    Ok(RealVector::new(out))
}

fn packed_gemv_binary_into(w: &PackedMatrix, x: &PackedVector, bias: &[f32], out: &mut [f32]) {
    let n = w.cols();
    for (i, o) in out.iter_mut().enumerate() {
        let dot = match w.alphabet() {
            BinaryAlphabet::Signed => xnor_words(&x.words, w.row_words(i), n),
            BinaryAlphabet::Unsigned => and_words(&x.words, w.row_words(i)),
        };
        *o = (dot as f64 + f64::from(bias[i])) as f32;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PackedWeights {
    Real(RealMatrix),
    Packed(PackedMatrix),
}

impl PackedWeights {
    pub fn rows(&self) -> usize {
        match self {
            PackedWeights::Real(m) => m.rows(),
            PackedWeights::Packed(p) => p.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            PackedWeights::Real(m) => m.cols(),
            PackedWeights::Packed(p) => p.cols(),
        }
    }

    /// Serialized weight payload size.
    pub fn byte_len(&self) -> usize {
        match self {
            PackedWeights::Real(m) => m.as_slice().len() * 4,
            PackedWeights::Packed(p) => p.byte_len(),
        }
    }
}

/// One inference layer: real weights, or packed binary weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayer {
    weights: PackedWeights,
    bias: RealVector,
    activation: ActivationKind,
    policy: UpdatePolicy,
}

impl PackedLayer {
    pub fn new(
        weights: PackedWeights,
        bias: RealVector,
        activation: ActivationKind,
        policy: UpdatePolicy,
    ) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(BnnError::Config(format!(
                "bias has {} entries, weights have {} rows",
                bias.len(),
                weights.rows()
            )));
        }
        if !bias.is_finite() {
            return Err(BnnError::Config("non-finite bias".into()));
        }
        if let PackedWeights::Real(m) = &weights {
            if !m.is_finite() {
                return Err(BnnError::Config("non-finite weights".into()));
            }
        }
        Ok(PackedLayer {
            weights,
            bias,
            activation,
            policy,
        })
    }

    pub fn weights(&self) -> &PackedWeights {
        &self.weights
    }

    pub fn bias(&self) -> &RealVector {
        &self.bias
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn policy(&self) -> UpdatePolicy {
        self.policy
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            in_dim: self.in_dim(),
            out_dim: self.out_dim(),
            weight_mode: match &self.weights {
                PackedWeights::Real(_) => WeightMode::Real,
                PackedWeights::Packed(p) => WeightMode::binary(p.alphabet()),
            },
            activation: self.activation,
            policy: self.policy,
        }
    }
}

/// Immutable inference model with binary-mode layers stored one bit per weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    layers: Vec<PackedLayer>,
}

impl PackedModel {
    pub fn from_layers(layers: Vec<PackedLayer>) -> Result<Self> {
        let model = PackedModel { layers };
        crate::network::NetworkConfig {
            layers: model.layers.iter().map(PackedLayer::spec).collect(),
        }
        .validate()?;
        Ok(model)
    }

    /// Packs every binary-mode layer of `net` (sign of its shadow weights);
    /// real-mode layers are copied.
    pub fn from_network(net: &Network) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                let spec = l.spec();
                let weights = match spec.weight_mode.alphabet() {
                    Some(a) => PackedWeights::Packed(pack_sign(l.weights(), a)),
                    None => PackedWeights::Real(l.weights().clone()),
                };
                PackedLayer {
                    weights,
                    bias: l.bias().clone(),
                    activation: spec.activation,
                    policy: spec.policy,
                }
            })
            .collect();
        PackedModel { layers }
    }

    /// Float network whose binary-mode layers hold the unpacked codes.
    pub fn to_network(&self) -> Result<Network> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let weights = match &l.weights {
                    PackedWeights::Real(m) => m.clone(),
                    PackedWeights::Packed(p) => unpack_bits(p)?,
                };
                Layer::new(l.spec(), weights, l.bias.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Network::from_layers(layers)
    }

    pub fn layers(&self) -> &[PackedLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Total serialized weight payload in bytes.
    pub fn weight_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.weights.byte_len()).sum()
    }

    /// Class posteriors for one input.
    pub fn infer(&self, x: &[f32]) -> Result<RealVector> {
        if x.len() != self.input_dim() {
            return Err(BnnError::Config(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let last = self.layers.last().unwrap();
        if last.activation != ActivationKind::Softmax {
            return Err(BnnError::format(
                "activation",
                self.layers.len() - 1,
                "last layer must be softmax",
            ));
        }
        let mut h: Vec<f32> = x.to_vec();
        let mut packed: Option<PackedVector> = None;
        for layer in &self.layers {
            let mut pre = vec![0.0f32; layer.out_dim()];
            match &layer.weights {
                PackedWeights::Real(m) => gemv_into(m, &h, &layer.bias, &mut pre),
                PackedWeights::Packed(p) => match &packed {
                    Some(v) if v.alphabet == p.alphabet() => packed_gemv_binary_into(p, v, &layer.bias, &mut pre),
                    _ => packed_gemv_real_into(p, &h, &layer.bias, &mut pre),
                },
            }
            h = vec![0.0f32; layer.out_dim()];
            if layer.activation == ActivationKind::Softmax {
                softmax_into(&pre, &mut h);
            } else {
                layer.activation.apply_into(&pre, &mut h);
            }
            packed = layer
                .activation
                .binary_alphabet()
                .map(|a| PackedVector::from_sign(&pre, a));
        }
        Ok(RealVector::new(h))
    }

    pub fn predict_class(&self, x: &[f32]) -> Result<usize> {
        Ok(self.infer(x)?.argmax())
    }
}

/// One line of `bench` output.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub reps: usize,
    pub ns_per_gemv: f64,
    pub bytes_model: usize,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "kernel,rows,cols,reps,ns_per_gemv,bytes_model";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.1},{}",
            self.kernel, self.rows, self.cols, self.reps, self.ns_per_gemv, self.bytes_model
        )
    }
}

/// Times the reference, binary-weight and fully binary kernels on one
/// random `rows × cols` matrix.
pub fn bench(rows: usize, cols: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if rows == 0 || cols == 0 || reps == 0 {
        return Err(BnnError::Config("bench needs rows, cols and reps >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let shadow = RealMatrix::new(rows, cols, data)?;
    let dense = shadow.map(|v| BinaryAlphabet::Signed.binarize(v));
    let packed = pack_sign(&shadow, BinaryAlphabet::Signed);
    let x: Vec<f32> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xb = PackedVector::from_sign(&x, BinaryAlphabet::Signed);
    let bias = vec![0.0f32; rows];

    let time = |f: &dyn Fn() -> Result<RealVector>| -> Result<f64> {
        black_box(f()?);
        let start = Instant::now();
        for _ in 0..reps {
            black_box(f()?);
        }
        Ok(start.elapsed().as_nanos() as f64 / reps as f64)
    };
    let row = |kernel, ns, bytes_model| BenchRow {
        kernel,
        rows,
        cols,
        reps,
        ns_per_gemv: ns,
        bytes_model,
    };
    Ok(vec![
        row(
            "reference_f32",
            time(&|| gemv(&dense, black_box(&x), &bias))?,
            rows * cols * 4,
        ),
        row(
            "packed_real_act",
            time(&|| packed_gemv_real(&packed, black_box(&x), &bias))?,
            packed.byte_len(),
        ),
        row(
            "packed_binary",
            time(&|| packed_gemv_binary(&packed, black_box(&xb), &bias))?,
            packed.byte_len(),
        ),
    ])
}
