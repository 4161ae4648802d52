//! Network model: layer configuration, shadow weights, and forward propagation.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binarize::{clip_weights, sign_binarize, BinaryAlphabet};
use crate::error::{BnnError, Result};
use crate::tensor::{gemv_into, sigmoid_scalar, softmax_into, RealMatrix, RealVector};

/// Nonlinearity applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Sigmoid,
    BinarySigned,
    BinaryUnsigned,
    Softmax,
    /// Pure linear layer; used for gradient-check scaffolding.
    Identity,
}

impl ActivationKind {
    pub fn token(self) -> char {
        match self {
            ActivationKind::Sigmoid => 's',
            ActivationKind::BinarySigned => 'b',
            ActivationKind::BinaryUnsigned => 'u',
            ActivationKind::Softmax => 'd',
            ActivationKind::Identity => 'i',
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Some(match token {
            "s" => ActivationKind::Sigmoid,
            "b" => ActivationKind::BinarySigned,
            "u" => ActivationKind::BinaryUnsigned,
            "d" => ActivationKind::Softmax,
            "i" => ActivationKind::Identity,
            _ => return None,
        })
    }

    pub fn binary_alphabet(self) -> Option<BinaryAlphabet> {
        match self {
            ActivationKind::BinarySigned => Some(BinaryAlphabet::Signed),
            ActivationKind::BinaryUnsigned => Some(BinaryAlphabet::Unsigned),
            _ => None,
        }
    }

    pub fn binary(alphabet: BinaryAlphabet) -> Self {
        match alphabet {
            BinaryAlphabet::Signed => ActivationKind::BinarySigned,
            BinaryAlphabet::Unsigned => ActivationKind::BinaryUnsigned,
        }
    }

    pub fn is_binary(self) -> bool {
        self.binary_alphabet().is_some()
    }

    /// Applies the activation to `pre`, writing into `out` (same length).
    pub fn apply_into(self, pre: &[f32], out: &mut [f32]) {
        match self {
            ActivationKind::Sigmoid => {
                for (o, &p) in out.iter_mut().zip(pre) {
                    *o = sigmoid_scalar(p);
                }
            }
            ActivationKind::BinarySigned | ActivationKind::BinaryUnsigned => {
                let alphabet = self.binary_alphabet().unwrap();
                for (o, &p) in out.iter_mut().zip(pre) {
                    *o = alphabet.binarize(p);
                }
            }
            ActivationKind::Softmax => softmax_into(pre, out),
            ActivationKind::Identity => out.copy_from_slice(pre),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::BinarySigned => "binary-signed",
            ActivationKind::BinaryUnsigned => "binary-unsigned",
            ActivationKind::Softmax => "softmax",
            ActivationKind::Identity => "identity",
        };
        f.write_str(name)
    }
}

/// How a layer's weights enter forward and backward propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightMode {
    Real,
    BinarySigned,
    BinaryUnsigned,
}

impl WeightMode {
    pub fn alphabet(self) -> Option<BinaryAlphabet> {
        match self {
            WeightMode::Real => None,
            WeightMode::BinarySigned => Some(BinaryAlphabet::Signed),
            WeightMode::BinaryUnsigned => Some(BinaryAlphabet::Unsigned),
        }
    }

    pub fn binary(alphabet: BinaryAlphabet) -> Self {
        match alphabet {
            BinaryAlphabet::Signed => WeightMode::BinarySigned,
            BinaryAlphabet::Unsigned => WeightMode::BinaryUnsigned,
        }
    }

    pub fn is_binary(self) -> bool {
        self != WeightMode::Real
    }

    fn token(self) -> char {
        match self {
            WeightMode::Real => 'r',
            WeightMode::BinarySigned => 'b',
            WeightMode::BinaryUnsigned => 'u',
        }
    }

    fn from_token(token: &str) -> Option<Self> {
        Some(match token {
            "r" => WeightMode::Real,
            "b" => WeightMode::BinarySigned,
            "u" => WeightMode::BinaryUnsigned,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpdatePolicy {
    Trainable,
    /// Parameters stay exactly at their initial values.
    Fixed,
}

impl UpdatePolicy {
    fn token(self) -> char {
        match self {
            UpdatePolicy::Trainable => 't',
            UpdatePolicy::Fixed => 'f',
        }
    }

    fn from_token(token: &str) -> Option<Self> {
        Some(match token {
            "t" => UpdatePolicy::Trainable,
            "f" => UpdatePolicy::Fixed,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight_mode: WeightMode,
    pub activation: ActivationKind,
    pub policy: UpdatePolicy,
}

impl LayerSpec {
    pub fn real(in_dim: usize, out_dim: usize, activation: ActivationKind) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            weight_mode: WeightMode::Real,
            activation,
            policy: UpdatePolicy::Trainable,
        }
    }
}

/// Parses a comma-separated activation string such as `s,b,b,b,b,s,d`.
///
/// Tokens: `s` sigmoid, `b` binary (-1,+1), `u` binary (0,1), `d` softmax,
/// `i` identity. The last token must be `d`. Error positions are 1-based.
pub fn parse_layer_string(spec: &str) -> Result<Vec<ActivationKind>> {
    let tokens: Vec<&str> = spec.split(',').map(str::trim).collect();
    let mut kinds = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        let kind = ActivationKind::from_token(tok)
            .ok_or_else(|| BnnError::Config(format!("unknown activation token '{tok}' at position {}", i + 1)))?;
        if kind == ActivationKind::Softmax && i + 1 != tokens.len() {
            return Err(BnnError::Config(format!(
                "softmax must be the last layer, found at position {}",
                i + 1
            )));
        }
        kinds.push(kind);
    }
    if kinds.last() != Some(&ActivationKind::Softmax) {
        return Err(BnnError::Config(format!(
            "last activation must be softmax (d), position {}",
            kinds.len()
        )));
    }
    Ok(kinds)
}

fn parse_token_list<T>(key: &str, value: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .enumerate()
        .map(|(i, tok)| {
            parse(tok).ok_or_else(|| BnnError::Config(format!("{key}: unknown token '{tok}' at position {}", i + 1)))
        })
        .collect()
}

/// Ordered layer specifications of a feedforward network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub layers: Vec<LayerSpec>,
}

impl NetworkConfig {
    /// Builds a config from layer widths (input through output) and per-layer
    /// activations. Weight modes default to real and policies to trainable.
    pub fn from_dims(dims: &[usize], activations: &[ActivationKind]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(BnnError::Config("dims needs at least input and output widths".into()));
        }
        if activations.len() != dims.len() - 1 {
            return Err(BnnError::Config(format!(
                "{} layers from dims but {} activations",
                dims.len() - 1,
                activations.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &a)| LayerSpec::real(d[0], d[1], a))
            .collect();
        let config = NetworkConfig { layers };
        config.validate()?;
        Ok(config)
    }

    /// Sigmoid hidden layers and a softmax output over the given widths.
    pub fn sigmoid_mlp(dims: &[usize]) -> Result<Self> {
        let n = dims.len().saturating_sub(1);
        let mut acts = vec![ActivationKind::Sigmoid; n];
        if let Some(last) = acts.last_mut() {
            *last = ActivationKind::Softmax;
        }
        NetworkConfig::from_dims(dims, &acts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(BnnError::Config("network has no layers".into()));
        }
        let last = self.layers.len() - 1;
        for (l, spec) in self.layers.iter().enumerate() {
            if spec.in_dim == 0 || spec.out_dim == 0 {
                return Err(BnnError::Config(format!("layer {l} has a zero dimension")));
            }
            if l > 0 && spec.in_dim != self.layers[l - 1].out_dim {
                return Err(BnnError::Config(format!(
                    "layer {l} expects {} inputs but layer {} produces {}",
                    spec.in_dim,
                    l - 1,
                    self.layers[l - 1].out_dim
                )));
            }
            let is_softmax = spec.activation == ActivationKind::Softmax;
            if is_softmax != (l == last) {
                return Err(BnnError::Config(format!(
                    "layer {l}: softmax is required on, and only on, the final layer"
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    /// Parses the line-oriented `key = value` format.
    ///
    /// Keys: `dims` (required), `activations` (default sigmoid hidden layers
    /// and softmax output), `weight_modes` (`r`/`b`/`u`), `policies` (`t`/`f`).
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dims = None;
        let mut acts = None;
        let mut modes = None;
        let mut policies = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| BnnError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "dims" => {
                    dims = Some(parse_token_list(key, value, |t| {
                        t.parse::<usize>().ok().filter(|&d| d > 0)
                    })?)
                }
                "activations" => acts = Some(parse_layer_string(value)?),
                "weight_modes" => modes = Some(parse_token_list(key, value, WeightMode::from_token)?),
                "policies" => policies = Some(parse_token_list(key, value, UpdatePolicy::from_token)?),
                other => return Err(BnnError::Config(format!("line {}: unknown key '{other}'", n + 1))),
            }
        }
        let dims = dims.ok_or_else(|| BnnError::Config("missing `dims`".into()))?;
        let mut config = match acts {
            Some(acts) => NetworkConfig::from_dims(&dims, &acts)?,
            None => NetworkConfig::sigmoid_mlp(&dims)?,
        };
        let n = config.layers.len();
        if let Some(modes) = modes {
            if modes.len() != n {
                return Err(BnnError::Config(format!(
                    "weight_modes has {} entries, need {n}",
                    modes.len()
                )));
            }
            for (spec, m) in config.layers.iter_mut().zip(modes) {
                spec.weight_mode = m;
            }
        }
        if let Some(policies) = policies {
            if policies.len() != n {
                return Err(BnnError::Config(format!(
                    "policies has {} entries, need {n}",
                    policies.len()
                )));
            }
            for (spec, p) in config.layers.iter_mut().zip(policies) {
                spec.policy = p;
            }
        }
        Ok(config)
    }

    pub fn to_text(&self) -> String {
        let join = |f: &dyn Fn(&LayerSpec) -> char| {
            self.layers
                .iter()
                .map(|l| f(l).to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let dims = self.dims().iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "dims = {dims}\nactivations = {}\nweight_modes = {}\npolicies = {}\n",
            join(&|l| l.activation.token()),
            join(&|l| l.weight_mode.token()),
            join(&|l| l.policy.token()),
        )
    }
}

impl FromStr for NetworkConfig {
    type Err = BnnError;
    fn from_str(s: &str) -> Result<Self> {
        NetworkConfig::parse(s)
    }
}

/// Which parts of the hidden stack a binary scheme binarizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryMode {
    /// Binary weights in every layer except the input and softmax layers.
    Weights,
    /// Binary activations in every hidden layer except the first and last.
    Activations,
    /// Both of the above.
    Both,
}

impl FromStr for BinaryMode {
    type Err = BnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bw" => Ok(BinaryMode::Weights),
            "ba" => Ok(BinaryMode::Activations),
            "bnn" => Ok(BinaryMode::Both),
            other => Err(BnnError::Config(format!("unknown mode '{other}' (bw, ba, bnn)"))),
        }
    }
}

/// A recipe for turning a real-valued baseline configuration into a binary one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryScheme {
    pub mode: BinaryMode,
    pub alphabet: BinaryAlphabet,
    pub fix_input: bool,
    pub fix_softmax: bool,
}

impl BinaryScheme {
    pub fn target_config(&self, base: &NetworkConfig) -> Result<NetworkConfig> {
        let n = base.layers.len();
        let mut out = base.clone();
        let binarize_weights = matches!(self.mode, BinaryMode::Weights | BinaryMode::Both);
        let binarize_acts = matches!(self.mode, BinaryMode::Activations | BinaryMode::Both);
        if binarize_weights && n < 3 {
            return Err(BnnError::Config(
                "binary weights need at least one layer between input and softmax layers".into(),
            ));
        }
        if binarize_acts && n < 4 {
            return Err(BnnError::Config(
                "binary activations need at least three hidden layers".into(),
            ));
        }
        for (l, spec) in out.layers.iter_mut().enumerate() {
            spec.policy = UpdatePolicy::Trainable;
            if binarize_weights && l >= 1 && l + 1 < n {
                spec.weight_mode = WeightMode::binary(self.alphabet);
            }
            if binarize_acts && l >= 1 && l + 2 < n {
                spec.activation = ActivationKind::binary(self.alphabet);
            }
        }
        if self.fix_input {
            out.layers[0].policy = UpdatePolicy::Fixed;
        }
        if self.fix_softmax {
            out.layers[n - 1].policy = UpdatePolicy::Fixed;
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    /// `out_dim x in_dim` real-valued (shadow) weights.
    weights: RealMatrix,
    bias: RealVector,
}

impl Layer {
    pub fn new(spec: LayerSpec, weights: RealMatrix, bias: RealVector) -> Result<Self> {
        if weights.rows() != spec.out_dim || weights.cols() != spec.in_dim {
            return Err(BnnError::Config(format!(
                "weights are {}x{}, layer needs {}x{}",
                weights.rows(),
                weights.cols(),
                spec.out_dim,
                spec.in_dim
            )));
        }
        if bias.len() != spec.out_dim {
            return Err(BnnError::Config(format!(
                "bias has {} entries, layer needs {}",
                bias.len(),
                spec.out_dim
            )));
        }
        if !weights.is_finite() || !bias.is_finite() {
            return Err(BnnError::Data("layer parameters must be finite".into()));
        }
        if spec.weight_mode.is_binary() && weights.as_slice().iter().any(|v| v.abs() > 1.0) {
            return Err(BnnError::Config(
                "binary-mode shadow weights must lie in [-1, +1]".into(),
            ));
        }
        Ok(Layer { spec, weights, bias })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weights(&self) -> &RealMatrix {
        &self.weights
    }

    pub fn bias(&self) -> &RealVector {
        &self.bias
    }

    pub(crate) fn params_mut(&mut self) -> (&mut RealMatrix, &mut RealVector) {
        (&mut self.weights, &mut self.bias)
    }

    /// The matrix used for propagation: the sign view for binary modes.
    pub fn effective_weights(&self) -> Cow<'_, RealMatrix> {
        match self.spec.weight_mode.alphabet() {
            Some(alphabet) => Cow::Owned(sign_binarize(&self.weights, alphabet)),
            None => Cow::Borrowed(&self.weights),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Keep every layer's pre-activation and activation.
    Train,
    /// Keep only the final layer.
    Infer,
}

/// Per-layer record of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub input: RealVector,
    /// Pre-activations, one per retained layer.
    pub pre: Vec<RealVector>,
    /// Activations, one per retained layer.
    pub post: Vec<RealVector>,
}

impl Trace {
    pub fn output(&self) -> &RealVector {
        self.post.last().expect("trace has at least one layer")
    }

    /// Input to layer `l` (train-mode traces only).
    pub fn layer_input(&self, l: usize) -> &RealVector {
        if l == 0 {
            &self.input
        } else {
            &self.post[l - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let config = NetworkConfig {
            layers: layers.iter().map(|l| l.spec).collect(),
        };
        config.validate()?;
        Ok(Network { layers })
    }

    /// Glorot-uniform weights in `[-a, a]`, `a = sqrt(6 / (in + out))`, zero biases.
    pub fn init_random(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.layers.len());
        for spec in &config.layers {
            let a = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt() as f32;
            let mut data: Vec<f32> = (0..spec.in_dim * spec.out_dim)
                .map(|_| rng.random_range(-a..=a))
                .collect();
            if spec.weight_mode.is_binary() {
                data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            }
            let weights = RealMatrix::new(spec.out_dim, spec.in_dim, data)?;
            layers.push(Layer::new(*spec, weights, RealVector::zeros(spec.out_dim))?);
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn config(&self) -> NetworkConfig {
        NetworkConfig {
            layers: self.layers.iter().map(|l| l.spec).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().spec.out_dim
    }

    /// Replaces one layer's parameters, re-checking every layer invariant.
    pub fn set_layer_params(&mut self, l: usize, weights: RealMatrix, bias: RealVector) -> Result<()> {
        let spec = self
            .layers
            .get(l)
            .ok_or_else(|| BnnError::Config(format!("no layer {l}")))?
            .spec;
        self.layers[l] = Layer::new(spec, weights, bias)?;
        Ok(())
    }

    pub fn has_binary_weights(&self) -> bool {
        self.layers.iter().any(|l| l.spec.weight_mode.is_binary())
    }

    pub fn has_binary_activations(&self) -> bool {
        self.layers.iter().any(|l| l.spec.activation.is_binary())
    }

    /// Binary weights and binary activations both present.
    pub fn is_full_binary(&self) -> bool {
        self.has_binary_weights() && self.has_binary_activations()
    }

    pub fn effective_weights(&self) -> Vec<Cow<'_, RealMatrix>> {
        self.layers.iter().map(Layer::effective_weights).collect()
    }

    pub fn forward(&self, x: &[f32], mode: ForwardMode) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(BnnError::Config(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let eff = self.effective_weights();
        let trace = self.forward_with(&eff, x);
        Ok(match mode {
            ForwardMode::Train => trace,
            ForwardMode::Infer => Trace {
                input: trace.input,
                pre: vec![trace.pre.into_iter().last().unwrap()],
                post: vec![trace.post.into_iter().last().unwrap()],
            },
        })
    }

    /// Output probabilities only.
    pub fn predict(&self, x: &[f32]) -> Result<RealVector> {
        Ok(self.forward(x, ForwardMode::Infer)?.post.pop().unwrap())
    }

    /// Train-mode forward with precomputed effective weights. `x` must match the input width.
    pub(crate) fn forward_with(&self, eff: &[Cow<'_, RealMatrix>], x: &[f32]) -> Trace {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<RealVector> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input: &[f32] = if l == 0 { x } else { &post[l - 1] };
            let mut h_pre = vec![0.0f32; layer.spec.out_dim];
            gemv_into(&eff[l], input, &layer.bias, &mut h_pre);
            let mut h = vec![0.0f32; layer.spec.out_dim];
            layer.spec.activation.apply_into(&h_pre, &mut h);
            pre.push(RealVector::new(h_pre));
            post.push(RealVector::new(h));
        }
        Trace {
            input: RealVector::from(x),
            pre,
            post,
        }
    }

    /// Copies this (baseline) network into the `target` configuration.
    ///
    /// Dimensions must match layer by layer. Layers that end up in a binary
    /// weight mode get their shadow weights clipped into `[-1, +1]`.
    pub fn derive_binary_config(&self, target: &NetworkConfig) -> Result<Network> {
        target.validate()?;
        if target.layers.len() != self.layers.len() {
            return Err(BnnError::Config(format!(
                "baseline has {} layers, target has {}",
                self.layers.len(),
                target.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, (src, spec)) in self.layers.iter().zip(&target.layers).enumerate() {
            if src.spec.in_dim != spec.in_dim || src.spec.out_dim != spec.out_dim {
                return Err(BnnError::Config(format!(
                    "layer {l}: baseline is {}x{}, target is {}x{}",
                    src.spec.out_dim, src.spec.in_dim, spec.out_dim, spec.in_dim
                )));
            }
            let weights = if spec.weight_mode.is_binary() {
                clip_weights(&src.weights)
            } else {
                src.weights.clone()
            };
            layers.push(Layer::new(*spec, weights, src.bias.clone())?);
        }
        Ok(Network { layers })
    }
}
