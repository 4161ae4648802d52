//! Model files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "BNN1"  version:u16 = 1  layer_count:u16
//! per layer:
//!   in_dim:u32  out_dim:u32  encoding:u8  activation:u8  policy:u8
//!   bias: out_dim × f32
//!   weights: out_dim × in_dim f32 (real encodings)
//!            out_dim × ceil(in_dim/64) u64, LSB-first, zero padding (packed)
//! crc32 (IEEE) of all preceding bytes: u32
//! ```
//!
//! Encodings: 0 real weights, 1 packed signed, 2 packed unsigned, 3 real
//! shadow weights of a signed binary-weight layer, 4 the same for unsigned.
//! Activations: 0 sigmoid, 1 binary signed, 2 binary unsigned, 3 softmax,
//! 4 identity. Policies: 0 trainable, 1 fixed.

use std::fs;
use std::path::Path;

use crate::binarize::{words_for, BinaryAlphabet, PackedMatrix};
use crate::error::{BnnError, Result};
use crate::network::{ActivationKind, Layer, LayerSpec, Network, UpdatePolicy, WeightMode};
use crate::packed::{PackedLayer, PackedModel, PackedWeights};
use crate::tensor::{RealMatrix, RealVector};

pub const MAGIC: &[u8; 4] = b"BNN1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 8;
/// Fixed bytes per layer before the bias.
pub const LAYER_HEADER_LEN: usize = 11;
pub const CRC_LEN: usize = 4;

const ENC_REAL: u8 = 0;
const ENC_PACKED_SIGNED: u8 = 1;
const ENC_PACKED_UNSIGNED: u8 = 2;
const ENC_SHADOW_SIGNED: u8 = 3;
const ENC_SHADOW_UNSIGNED: u8 = 4;

/// Either kind of model a file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    /// Real weights, or real shadow weights for binary-weight layers.
    Float(Network),
    /// Binary-weight layers stored one bit per weight.
    Packed(PackedModel),
}

impl Model {
    pub fn input_dim(&self) -> usize {
        match self {
            Model::Float(n) => n.input_dim(),
            Model::Packed(p) => p.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Model::Float(n) => n.output_dim(),
            Model::Packed(p) => p.output_dim(),
        }
    }

    /// Class posteriors for one input.
    pub fn infer(&self, x: &[f32]) -> Result<RealVector> {
        match self {
            Model::Float(n) => n.predict(x),
            Model::Packed(p) => p.infer(x),
        }
    }

    /// The packed form; float models are packed on the fly.
    pub fn to_packed(&self) -> PackedModel {
        match self {
            Model::Float(n) => PackedModel::from_network(n),
            Model::Packed(p) => p.clone(),
        }
    }

    pub fn into_network(self) -> Result<Network> {
        match self {
            Model::Float(n) => Ok(n),
            Model::Packed(p) => p.to_network(),
        }
    }
}

impl From<Network> for Model {
    fn from(n: Network) -> Self {
        Model::Float(n)
    }
}

impl From<PackedModel> for Model {
    fn from(p: PackedModel) -> Self {
        Model::Packed(p)
    }
}

fn activation_byte(a: ActivationKind) -> u8 {
    match a {
        ActivationKind::Sigmoid => 0,
        ActivationKind::BinarySigned => 1,
        ActivationKind::BinaryUnsigned => 2,
        ActivationKind::Softmax => 3,
        ActivationKind::Identity => 4,
    }
}

fn activation_from_byte(b: u8) -> Option<ActivationKind> {
    Some(match b {
        0 => ActivationKind::Sigmoid,
        1 => ActivationKind::BinarySigned,
        2 => ActivationKind::BinaryUnsigned,
        3 => ActivationKind::Softmax,
        4 => ActivationKind::Identity,
        _ => return None,
    })
}

fn policy_byte(p: UpdatePolicy) -> u8 {
    match p {
        UpdatePolicy::Trainable => 0,
        UpdatePolicy::Fixed => 1,
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn layer_header(&mut self, spec: &LayerSpec, encoding: u8) {
        self.buf.extend_from_slice(&(spec.in_dim as u32).to_le_bytes());
        self.buf.extend_from_slice(&(spec.out_dim as u32).to_le_bytes());
        self.buf.push(encoding);
        self.buf.push(activation_byte(spec.activation));
        self.buf.push(policy_byte(spec.policy));
    }

    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn u64s(&mut self, v: &[u64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn check_encodable(layers: usize, dims: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    if layers > usize::from(u16::MAX) {
        return Err(BnnError::Config(format!("{layers} layers do not fit the file header")));
    }
    for (i, o) in dims {
        if i > u32::MAX as usize || o > u32::MAX as usize {
            return Err(BnnError::Config(format!("layer {o}x{i} does not fit the file format")));
        }
    }
    Ok(())
}

/// Serializes a model to bytes.
pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.buf.extend_from_slice(&VERSION.to_le_bytes());
    match model {
        Model::Float(net) => {
            check_encodable(
                net.layers().len(),
                net.layers().iter().map(|l| (l.spec().in_dim, l.spec().out_dim)),
            )?;
            w.buf.extend_from_slice(&(net.layers().len() as u16).to_le_bytes());
            for layer in net.layers() {
                let spec = layer.spec();
                let enc = match spec.weight_mode {
                    WeightMode::Real => ENC_REAL,
                    WeightMode::BinarySigned => ENC_SHADOW_SIGNED,
                    WeightMode::BinaryUnsigned => ENC_SHADOW_UNSIGNED,
                };
                w.layer_header(spec, enc);
                w.f32s(layer.bias());
                w.f32s(layer.weights().as_slice());
            }
        }
        Model::Packed(p) => {
            check_encodable(p.layers().len(), p.layers().iter().map(|l| (l.in_dim(), l.out_dim())))?;
            w.buf.extend_from_slice(&(p.layers().len() as u16).to_le_bytes());
            for layer in p.layers() {
                let spec = layer.spec();
                match layer.weights() {
                    PackedWeights::Real(m) => {
                        w.layer_header(&spec, ENC_REAL);
                        w.f32s(layer.bias());
                        w.f32s(m.as_slice());
                    }
                    PackedWeights::Packed(m) => {
                        let enc = match m.alphabet() {
                            BinaryAlphabet::Signed => ENC_PACKED_SIGNED,
                            BinaryAlphabet::Unsigned => ENC_PACKED_UNSIGNED,
                        };
                        w.layer_header(&spec, enc);
                        w.f32s(layer.bias());
                        w.u64s(m.words());
                    }
                }
            }
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.buf.extend_from_slice(&crc.to_le_bytes());
    Ok(w.buf)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(BnnError::format(
                field,
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.data.len() - self.pos),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    /// `count` items of `size` bytes, checked against the remaining length before allocating.
    fn array(&mut self, count: usize, size: usize, field: &str) -> Result<&'a [u8]> {
        let n = count
            .checked_mul(size)
            .ok_or_else(|| BnnError::format(field, self.pos, "length overflows"))?;
        self.take(n, field)
    }

    fn f32s(&mut self, count: usize, field: &str) -> Result<Vec<f32>> {
        let start = self.pos;
        let v: Vec<f32> = self
            .array(count, 4, field)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(BnnError::format(field, start + 4 * i, "non-finite value"));
        }
        Ok(v)
    }

    fn u64s(&mut self, count: usize, field: &str) -> Result<Vec<u64>> {
        Ok(self
            .array(count, 8, field)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

enum RawWeights {
    Real(RealMatrix),
    Packed(PackedMatrix),
}

struct RawLayer {
    spec: LayerSpec,
    bias: RealVector,
    weights: RawWeights,
    offset: usize,
}

/// Parses bytes produced by [`encode`].
pub fn decode(data: &[u8]) -> Result<Model> {
    let mut r = Reader { data, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(BnnError::format("magic", 0, "expected \"BNN1\""));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(BnnError::format("version", 4, format!("unsupported version {version}")));
    }
    let layer_count = usize::from(r.u16("layer_count")?);
    if data.len() < HEADER_LEN + CRC_LEN {
        return Err(BnnError::format("crc", data.len(), "truncated: no checksum"));
    }
    let body_len = data.len() - CRC_LEN;
    let stored = u32::from_le_bytes(data[body_len..].try_into().unwrap());
    let computed = crc32fast::hash(&data[..body_len]);
    if stored != computed {
        return Err(BnnError::format(
            "crc",
            body_len,
            format!("checksum mismatch: stored {stored:08x}, computed {computed:08x}"),
        ));
    }
    if layer_count == 0 {
        return Err(BnnError::format("layer_count", 6, "model has no layers"));
    }

    let mut r = Reader {
        data: &data[..body_len],
        pos: HEADER_LEN,
    };
    let mut layers = Vec::with_capacity(layer_count);
    for l in 0..layer_count {
        let offset = r.pos;
        let in_dim = r.u32("in_dim")? as usize;
        let out_dim = r.u32("out_dim")? as usize;
        if in_dim == 0 || out_dim == 0 {
            return Err(BnnError::format(
                "in_dim",
                offset,
                format!("layer {l} has a zero dimension"),
            ));
        }
        if let Some(prev) = layers.last().map(|p: &RawLayer| p.spec.out_dim) {
            if prev != in_dim {
                return Err(BnnError::format(
                    "in_dim",
                    offset,
                    format!("layer {l} takes {in_dim} inputs, previous layer has {prev} outputs"),
                ));
            }
        }
        let enc_at = r.pos;
        let enc = r.u8("encoding")?;
        let act_at = r.pos;
        let activation = activation_from_byte(r.u8("activation")?)
            .ok_or_else(|| BnnError::format("activation", act_at, format!("unknown activation {}", data[act_at])))?;
        let pol_at = r.pos;
        let policy = match r.u8("policy")? {
            0 => UpdatePolicy::Trainable,
            1 => UpdatePolicy::Fixed,
            b => return Err(BnnError::format("policy", pol_at, format!("unknown policy {b}"))),
        };
        let bias = RealVector::new(r.f32s(out_dim, "bias")?);
        let w_at = r.pos;
        let (weight_mode, weights) = match enc {
            ENC_REAL | ENC_SHADOW_SIGNED | ENC_SHADOW_UNSIGNED => {
                let count = out_dim
                    .checked_mul(in_dim)
                    .ok_or_else(|| BnnError::format("weights", w_at, "length overflows"))?;
                let w = RealMatrix::new(out_dim, in_dim, r.f32s(count, "weights")?)?;
                let mode = match enc {
                    ENC_REAL => WeightMode::Real,
                    ENC_SHADOW_SIGNED => WeightMode::BinarySigned,
                    _ => WeightMode::BinaryUnsigned,
                };
                (mode, RawWeights::Real(w))
            }
            ENC_PACKED_SIGNED | ENC_PACKED_UNSIGNED => {
                let alphabet = if enc == ENC_PACKED_SIGNED {
                    BinaryAlphabet::Signed
                } else {
                    BinaryAlphabet::Unsigned
                };
                let wpr = words_for(in_dim);
                let count = out_dim
                    .checked_mul(wpr)
                    .ok_or_else(|| BnnError::format("weights", w_at, "length overflows"))?;
                let words = r.u64s(count, "weights")?;
                let m = PackedMatrix::from_words(out_dim, in_dim, alphabet, words).map_err(|e| match e {
                    BnnError::Format {
                        offset: row, reason, ..
                    } => BnnError::format("padding", w_at + (row * wpr + wpr - 1) * 8, reason),
                    other => other,
                })?;
                (WeightMode::binary(alphabet), RawWeights::Packed(m))
            }
            b => {
                return Err(BnnError::format(
                    "encoding",
                    enc_at,
                    format!("unknown weight encoding {b}"),
                ))
            }
        };
        layers.push(RawLayer {
            spec: LayerSpec {
                in_dim,
                out_dim,
                weight_mode,
                activation,
                policy,
            },
            bias,
            weights,
            offset,
        });
    }
    if r.pos != body_len {
        return Err(BnnError::format(
            "trailer",
            r.pos,
            format!("{} unexpected bytes after last layer", body_len - r.pos),
        ));
    }

    let any_packed = layers.iter().any(|l| matches!(l.weights, RawWeights::Packed(_)));
    let any_shadow = layers
        .iter()
        .any(|l| matches!(l.weights, RawWeights::Real(_)) && l.spec.weight_mode.is_binary());
    if any_packed && any_shadow {
        let l = layers
            .iter()
            .find(|l| matches!(l.weights, RawWeights::Real(_)) && l.spec.weight_mode.is_binary())
            .unwrap();
        return Err(BnnError::format(
            "encoding",
            l.offset + 8,
            "shadow-weight layer in a packed model",
        ));
    }
    let last_offset = layers.last().unwrap().offset;
    let structural = |e: BnnError| match e {
        BnnError::Config(reason) => BnnError::format("layers", last_offset, reason),
        other => other,
    };
    if any_packed {
        let packed = layers
            .into_iter()
            .map(|l| {
                let w = match l.weights {
                    RawWeights::Real(m) => PackedWeights::Real(m),
                    RawWeights::Packed(p) => PackedWeights::Packed(p),
                };
                PackedLayer::new(w, l.bias, l.spec.activation, l.spec.policy)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(structural)?;
        Ok(Model::Packed(PackedModel::from_layers(packed).map_err(structural)?))
    } else {
        let net = layers
            .into_iter()
            .map(|l| {
                let RawWeights::Real(w) = l.weights else { unreachable!() };
                Layer::new(l.spec, w, l.bias).map_err(|e| match e {
                    BnnError::Config(reason) => BnnError::format("weights", l.offset + LAYER_HEADER_LEN, reason),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model::Float(Network::from_layers(net).map_err(structural)?))
    }
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    decode(&fs::read(path)?)
}

/// Serialized size of one layer.
pub fn layer_byte_len(spec: &LayerSpec, packed: bool) -> usize {
    let weights = if packed {
        spec.out_dim * words_for(spec.in_dim) * 8
    } else {
        spec.out_dim * spec.in_dim * 4
    };
    LAYER_HEADER_LEN + 4 * spec.out_dim + weights
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binarize::sign_binarize;
    use crate::network::{BinaryMode, BinaryScheme, NetworkConfig};
    use proptest::prelude::{any, prop_assert_eq, proptest};

    fn binary_net(seed: u64) -> Network {
        let base = NetworkConfig::sigmoid_mlp(&[10, 70, 33, 20, 4]).unwrap();
        let config = BinaryScheme {
            mode: BinaryMode::Both,
            alphabet: BinaryAlphabet::Signed,
            fix_input: true,
            fix_softmax: false,
        }
        .target_config(&base)
        .unwrap();
        Network::init_random(&config, seed).unwrap()
    }

    #[test]
    fn float_round_trip_is_byte_identical() {
        for net in [
            Network::init_random(&NetworkConfig::sigmoid_mlp(&[5, 3, 2]).unwrap(), 1).unwrap(),
            binary_net(2),
        ] {
            let bytes = encode(&Model::Float(net.clone())).unwrap();
            let back = decode(&bytes).unwrap();
            assert_eq!(back, Model::Float(net));
            assert_eq!(encode(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn packed_round_trip_and_unpack_equals_sign_of_shadow() {
        let net = binary_net(3);
        let packed = PackedModel::from_network(&net);
        let bytes = encode(&Model::Packed(packed.clone())).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, Model::Packed(packed));
        assert_eq!(encode(&back).unwrap(), bytes);
        let unpacked = back.into_network().unwrap();
        for (a, b) in net.layers().iter().zip(unpacked.layers()) {
            match a.spec().weight_mode.alphabet() {
                Some(al) => assert_eq!(b.weights(), &sign_binarize(a.weights(), al)),
                None => assert_eq!(a.weights(), b.weights()),
            }
        }
    }

    #[test]
    fn header_bytes() {
        let net = Network::init_random(&NetworkConfig::sigmoid_mlp(&[2, 2]).unwrap(), 0).unwrap();
        let bytes = encode(&Model::Float(net)).unwrap();
        assert_eq!(&bytes[..8], b"BNN1\x01\x00\x01\x00");
        assert_eq!(&bytes[8..19], &[2, 0, 0, 0, 2, 0, 0, 0, 0, 3, 0]);
        assert_eq!(bytes.len(), 8 + 11 + 8 + 16 + 4);
        let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        assert_eq!(&bytes[bytes.len() - 4..], &crc.to_le_bytes());
    }

    fn all_plus_packed_layer() -> Vec<u8> {
        let spec = LayerSpec {
            weight_mode: WeightMode::BinarySigned,
            ..LayerSpec::real(64, 1, ActivationKind::Softmax)
        };
        let layer = Layer::new(spec, RealMatrix::from_rows(&[[1.0; 64]]), RealVector::zeros(1)).unwrap();
        let net = Network::from_layers(vec![layer]).unwrap();
        encode(&Model::Packed(PackedModel::from_network(&net))).unwrap()
    }

    #[test]
    fn all_plus_row_is_ff_bytes() {
        let bytes = all_plus_packed_layer();
        // header 8, layer header 11, bias 4, then the weight row
        assert_eq!(bytes[8 + 8], ENC_PACKED_SIGNED);
        assert_eq!(&bytes[23..31], &[0xFF; 8]);
        assert_eq!(
            bytes.len(),
            8 + layer_byte_len(&LayerSpec::real(64, 1, ActivationKind::Softmax), true) + 4
        );
    }

    #[test]
    fn packed_layer_sizes_match_formula() {
        let net = binary_net(5);
        let packed = PackedModel::from_network(&net);
        let bytes = encode(&Model::Packed(packed.clone())).unwrap();
        let expected: usize = HEADER_LEN
            + CRC_LEN
            + packed
                .layers()
                .iter()
                .map(|l| {
                    let s = l.spec();
                    let hidden = matches!(l.weights(), PackedWeights::Packed(_));
                    if hidden {
                        assert_eq!(
                            layer_byte_len(&s, true),
                            11 + 4 * s.out_dim + 8 * s.out_dim * s.in_dim.div_ceil(64)
                        );
                    }
                    layer_byte_len(&s, hidden)
                })
                .sum::<usize>();
        assert_eq!(bytes.len(), expected);
    }

    fn format_field(e: BnnError) -> (String, usize) {
        match e {
            BnnError::Format { field, offset, .. } => (field, offset),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    fn with_crc(mut body: Vec<u8>) -> Vec<u8> {
        let n = body.len() - 4;
        let crc = crc32fast::hash(&body[..n]);
        body[n..].copy_from_slice(&crc.to_le_bytes());
        body
    }

    #[test]
    fn rejects_bad_header_fields() {
        let good = all_plus_packed_layer();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(format_field(decode(&bad).unwrap_err()), ("magic".into(), 0));
        let mut v2 = good.clone();
        v2[4] = 2;
        let err = decode(&with_crc(v2)).unwrap_err();
        assert!(err.to_string().contains("unsupported version 2"));
        assert_eq!(format_field(err), ("version".into(), 4));
        let mut zero = good.clone();
        zero[6] = 0;
        assert_eq!(format_field(decode(&with_crc(zero)).unwrap_err()).0, "layer_count");
        let mut more = good.clone();
        more[6] = 2;
        assert_eq!(
            format_field(decode(&with_crc(more)).unwrap_err()),
            ("in_dim".into(), good.len() - 4)
        );
        let mut enc = good.clone();
        enc[16] = 9;
        assert_eq!(
            format_field(decode(&with_crc(enc)).unwrap_err()),
            ("encoding".into(), 16)
        );
        let mut act = good.clone();
        act[17] = 7;
        assert_eq!(
            format_field(decode(&with_crc(act)).unwrap_err()),
            ("activation".into(), 17)
        );
        let mut pol = good.clone();
        pol[18] = 2;
        assert_eq!(format_field(decode(&with_crc(pol)).unwrap_err()), ("policy".into(), 18));
    }

    #[test]
    fn rejects_dirty_padding() {
        let spec = LayerSpec {
            weight_mode: WeightMode::BinarySigned,
            ..LayerSpec::real(3, 2, ActivationKind::Softmax)
        };
        let layer = Layer::new(
            spec,
            RealMatrix::from_rows(&[[1.0, -1.0, 1.0], [-1.0, 1.0, 1.0]]),
            RealVector::zeros(2),
        )
        .unwrap();
        let net = Network::from_layers(vec![layer]).unwrap();
        let mut bytes = encode(&Model::Packed(PackedModel::from_network(&net))).unwrap();
        // second row's word starts after header, layer header, bias and one word
        let row1 = 8 + 11 + 8 + 8;
        bytes[row1] |= 0b1000;
        assert_eq!(
            format_field(decode(&with_crc(bytes)).unwrap_err()),
            ("padding".into(), row1)
        );
    }

    #[test]
    fn rejects_dim_chain_break_and_shadow_out_of_range() {
        let net = Network::init_random(&NetworkConfig::sigmoid_mlp(&[3, 2, 2]).unwrap(), 0).unwrap();
        let bytes = encode(&Model::Float(net)).unwrap();
        let second = 8 + 11 + 8 + 24;
        let mut broken = bytes.clone();
        broken[second] = 5;
        let (field, offset) = format_field(decode(&with_crc(broken)).unwrap_err());
        assert_eq!((field.as_str(), offset), ("in_dim", second));

        let mut shadow = bytes.clone();
        shadow[8 + 8] = ENC_SHADOW_SIGNED;
        shadow[8 + 11 + 8..8 + 11 + 12].copy_from_slice(&2.5f32.to_le_bytes());
        assert_eq!(format_field(decode(&with_crc(shadow)).unwrap_err()).0, "weights");

        let mut nan = bytes;
        nan[8 + 11..8 + 15].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(format_field(decode(&with_crc(nan)).unwrap_err()), ("bias".into(), 19));
    }

    #[test]
    fn truncation_and_corruption_are_errors() {
        let bytes = encode(&Model::Float(binary_net(7))).unwrap();
        for n in [0, 3, 5, 8, 11, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..n]), Err(BnnError::Format { .. })), "len {n}");
        }
        // a truncated body with a recomputed checksum still fails structurally
        let cut = with_crc(bytes[..bytes.len() / 2].to_vec());
        assert!(matches!(decode(&cut), Err(BnnError::Format { .. })));
        let mut extra = bytes.clone();
        extra.splice(bytes.len() - 4..bytes.len() - 4, [0u8; 3]);
        assert_eq!(
            format_field(decode(&with_crc(extra)).unwrap_err()),
            ("trailer".into(), bytes.len() - 4)
        );
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bnn");
        let model = Model::Packed(PackedModel::from_network(&binary_net(1)));
        save_model(&model, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), model);
        assert!(matches!(load_model(dir.path().join("missing")), Err(BnnError::Io(_))));
    }

    proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn any_flipped_byte_fails_crc(seed in any::<u64>(), pos in any::<proptest::sample::Index>(), bit in 0u8..8) {
            let bytes = encode(&Model::Packed(PackedModel::from_network(&binary_net(seed % 4)))).unwrap();
            let i = pos.index(bytes.len());
            let mut bad = bytes.clone();
            bad[i] ^= 1 << bit;
            let err = decode(&bad).unwrap_err();
            let field = format_field(err).0;
            prop_assert_eq!(field.as_str(), match i { 0..=3 => "magic", 4..=5 => "version", _ => "crc" });
        }

        #[test]
        fn float_bytes_round_trip(seed in any::<u64>()) {
            let model = Model::Float(binary_net(seed));
            let bytes = encode(&model).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back).unwrap(), bytes);
            prop_assert_eq!(back, model);
        }
    }
}
