//! EV-FlowNet and FireFlowNet builders with per-layer activation choice.
//!
//! A network is a list of activation layers (each one or two convolutions
//! followed by LIF, ReLU or ConvRNN) plus analog 1x1 flow heads. Layers are
//! addressed by position for [`HybridConfig`]:
//!
//! * EV-FlowNet: `enc1..enc4` (0-3), `res1, res2` (4-5), `dec1..dec4` (6-9)
//! * FireFlowNet: `L1, L2, R1, R2, L3` (0-4)
//!
//! The forward pass runs one `[B, 2, H, W]` event slice per timestep and
//! records everything on a [`Tape`], so the same code serves training (BPTT)
//! and inference. The full-scale flow is the sum of the finest head's outputs
//! over all timesteps.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Mode, ParamId, ParamStore, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::events::EventTensor;
use crate::flow::FlowField;
use crate::neuron::{raw_from_threshold_leak, ResetMode, Surrogate, THRESHOLD_FLOOR};
use crate::tensor::Tensor;

/// Initial threshold and leak of every spiking layer.
pub const INIT_THRESHOLD: f32 = 1.0;
pub const INIT_LEAK: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    EvFlowNet,
    FireFlowNet,
}

impl Family {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "evflownet" | "ev-flownet" => Ok(Self::EvFlowNet),
            "fireflownet" | "fireflow" => Ok(Self::FireFlowNet),
            other => Err(Error::UnsupportedFamily(other.to_string())),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EvFlowNet => "evflownet",
            Self::FireFlowNet => "fireflownet",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Lif,
    Relu,
    ConvRnn,
    /// Flow heads only.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Encoder,
    Residual,
    Decoder,
    FlowHead,
    PlainConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
}

impl LayerSpec {
    fn new(
        name: &str,
        kind: LayerKind,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let activation = if kind == LayerKind::FlowHead {
            Activation::Linear
        } else {
            Activation::Relu
        };
        Self {
            name: name.into(),
            kind,
            in_ch,
            out_ch,
            kernel,
            stride,
            activation,
        }
    }

    fn geom(&self) -> ConvGeom {
        match self.kind {
            LayerKind::Decoder => {
                ConvGeom::new(self.kernel, self.stride, (self.kernel - self.stride) / 2)
            }
            _ => ConvGeom::new(self.kernel, self.stride, self.kernel / 2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub family: Family,
    /// Base channel count; the constant width for FireFlowNet.
    pub k: usize,
    pub steps: usize,
    pub layers: Vec<LayerSpec>,
    pub reset: ResetMode,
    pub surrogate_width: f32,
    pub bntt: bool,
}

impl NetworkSpec {
    pub fn new(family: Family, k: usize, steps: usize) -> Result<Self> {
        if k == 0 || steps == 0 {
            return Err(Error::InvalidConfig(format!("k = {k}, T = {steps}")));
        }
        let layers = match family {
            Family::EvFlowNet => evflownet_layers(k),
            Family::FireFlowNet => fireflownet_layers(k),
        };
        Ok(Self {
            family,
            k,
            steps,
            layers,
            reset: ResetMode::Hard,
            surrogate_width: 1.0,
            bntt: true,
        })
    }

    pub fn evflownet(k: usize, steps: usize) -> Result<Self> {
        Self::new(Family::EvFlowNet, k, steps)
    }

    pub fn fireflownet(width: usize, steps: usize) -> Result<Self> {
        Self::new(Family::FireFlowNet, width, steps)
    }

    /// Layers that carry an activation, in [`HybridConfig`] index order.
    pub fn activation_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind != LayerKind::FlowHead)
    }

    pub fn num_activation_layers(&self) -> usize {
        self.activation_layers().count()
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.activation_layers().map(|l| l.name.clone()).collect()
    }

    /// Input resolutions must survive four halvings for EV-FlowNet.
    pub fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        let m = match self.family {
            Family::EvFlowNet => 16,
            Family::FireFlowNet => 1,
        };
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} needs a resolution divisible by {m}, got {height}x{width}",
                self.family
            )));
        }
        Ok(())
    }
}

fn evflownet_layers(k: usize) -> Vec<LayerSpec> {
    use LayerKind::*;
    vec![
        LayerSpec::new("enc1", Encoder, 2, k, 3, 2),
        LayerSpec::new("enc2", Encoder, k, 2 * k, 3, 2),
        LayerSpec::new("enc3", Encoder, 2 * k, 4 * k, 3, 2),
        LayerSpec::new("enc4", Encoder, 4 * k, 8 * k, 3, 2),
        LayerSpec::new("res1", Residual, 8 * k, 8 * k, 3, 1),
        LayerSpec::new("res2", Residual, 8 * k, 8 * k, 3, 1),
        LayerSpec::new("dec1", Decoder, 16 * k, 4 * k, 4, 2),
        LayerSpec::new("flow1", FlowHead, 4 * k, 2, 1, 1),
        LayerSpec::new("dec2", Decoder, 8 * k + 2, 2 * k, 4, 2),
        LayerSpec::new("flow2", FlowHead, 2 * k, 2, 1, 1),
        LayerSpec::new("dec3", Decoder, 4 * k + 2, k, 4, 2),
        LayerSpec::new("flow3", FlowHead, k, 2, 1, 1),
        LayerSpec::new("dec4", Decoder, 2 * k + 2, k, 4, 2),
        LayerSpec::new("flow4", FlowHead, k, 2, 1, 1),
    ]
}

fn fireflownet_layers(w: usize) -> Vec<LayerSpec> {
    use LayerKind::*;
    vec![
        LayerSpec::new("L1", PlainConv, 2, w, 3, 1),
        LayerSpec::new("L2", PlainConv, w, w, 3, 1),
        LayerSpec::new("R1", Residual, w, w, 3, 1),
        LayerSpec::new("R2", Residual, w, w, 3, 1),
        LayerSpec::new("L3", PlainConv, w, w, 3, 1),
        LayerSpec::new("flow", FlowHead, w, 2, 1, 1),
    ]
}

/// Which activation layers are LIF and which are ConvRNN; the rest are ReLU.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HybridConfig {
    pub spiking: BTreeSet<usize>,
    #[serde(default)]
    pub recurrent: BTreeSet<usize>,
}

impl HybridConfig {
    pub fn full_ann() -> Self {
        Self::default()
    }

    pub fn full_snn(layers: usize) -> Self {
        Self::spiking(0..layers)
    }

    pub fn first_spiking() -> Self {
        Self::spiking([0])
    }

    /// First layer ConvRNN, all others ReLU.
    pub fn rnn_first() -> Self {
        Self {
            spiking: BTreeSet::new(),
            recurrent: [0].into(),
        }
    }

    pub fn spiking(indices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            spiking: indices.into_iter().collect(),
            recurrent: BTreeSet::new(),
        }
    }

    /// `none`, `all`, `first`, `rnn` or a comma-separated index list.
    pub fn parse(s: &str, layers: usize) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "none" | "ann" | "full-ann" | "" => Ok(Self::full_ann()),
            "all" | "snn" | "full-snn" => Ok(Self::full_snn(layers)),
            "first" | "hybrid" => Ok(Self::first_spiking()),
            "rnn" | "rnn-first" => Ok(Self::rnn_first()),
            _ => s
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::InvalidHybridConfig(format!("bad layer index {p:?}")))
                })
                .collect::<Result<BTreeSet<_>>>()
                .map(|spiking| Self {
                    spiking,
                    recurrent: BTreeSet::new(),
                }),
        }
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let names: Vec<&LayerSpec> = spec.activation_layers().collect();
        for &i in self.spiking.iter().chain(&self.recurrent) {
            if i >= names.len() {
                return Err(Error::InvalidHybridConfig(format!(
                    "layer index {i} out of range for {} with {} layers",
                    spec.family,
                    names.len()
                )));
            }
        }
        if let Some(i) = self.spiking.intersection(&self.recurrent).next() {
            return Err(Error::InvalidHybridConfig(format!(
                "layer {i} is both spiking and recurrent"
            )));
        }
        if let Some(&i) = self
            .recurrent
            .iter()
            .find(|&&i| names[i].kind == LayerKind::Residual)
        {
            return Err(Error::InvalidHybridConfig(format!(
                "ConvRNN is not supported in residual layer {i}"
            )));
        }
        Ok(())
    }

    pub fn activation(&self, index: usize) -> Activation {
        if self.spiking.contains(&index) {
            Activation::Lif
        } else if self.recurrent.contains(&index) {
            Activation::ConvRnn
        } else {
            Activation::Relu
        }
    }

    /// Short label such as `full-ann`, `full-snn`, `spiking[0,3]`.
    pub fn label(&self, layers: usize) -> String {
        if !self.recurrent.is_empty() {
            let r: Vec<String> = self.recurrent.iter().map(usize::to_string).collect();
            let s: Vec<String> = self.spiking.iter().map(usize::to_string).collect();
            return format!("rnn[{}]spiking[{}]", r.join(","), s.join(","));
        }
        if self.spiking.is_empty() {
            "full-ann".into()
        } else if self.spiking.len() == layers && self.spiking.iter().copied().eq(0..layers) {
            "full-snn".into()
        } else {
            let s: Vec<String> = self.spiking.iter().map(usize::to_string).collect();
            format!("spiking[{}]", s.join(","))
        }
    }
}

/// Declarative network description, as stored in a TOML file.
///
/// ```toml
/// family = "evflownet"
/// k = 16
/// steps = 5
/// spiking = "first"   # none | all | first | rnn | "0,2"
/// seed = 7
/// reset = "hard"
/// bntt = true
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub family: Family,
    pub k: usize,
    pub steps: usize,
    #[serde(default = "default_spiking")]
    pub spiking: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub reset: ResetMode,
    #[serde(default = "default_true")]
    pub bntt: bool,
}

fn default_spiking() -> String {
    "first".into()
}

fn default_true() -> bool {
    true
}

impl NetworkFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network file serializes")
    }

    pub fn resolve(&self) -> Result<(NetworkSpec, HybridConfig)> {
        let mut spec = NetworkSpec::new(self.family, self.k, self.steps)?;
        spec.reset = self.reset;
        spec.bntt = self.bntt;
        let hybrid = HybridConfig::parse(&self.spiking, spec.num_activation_layers())?;
        hybrid.validate(&spec)?;
        Ok((spec, hybrid))
    }
}

#[derive(Clone, Debug)]
struct BnUnit {
    gamma: Vec<ParamId>,
    beta: Vec<ParamId>,
    stats: usize,
}

#[derive(Clone, Debug)]
struct ConvUnit {
    w: ParamId,
    b: Option<ParamId>,
    bn: Option<BnUnit>,
    geom: ConvGeom,
    transposed: bool,
}

#[derive(Clone, Debug)]
struct RnnUnit {
    wh: ParamId,
    bh: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct Layer {
    spec: LayerSpec,
    convs: Vec<ConvUnit>,
    lif: Option<(ParamId, ParamId)>,
    rnn: Option<RnnUnit>,
}

#[derive(Clone, Debug)]
struct Head {
    spec: LayerSpec,
    w: ParamId,
    b: ParamId,
}

/// A built network: parameters, BNTT running statistics and layer wiring.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    hybrid: HybridConfig,
    seed: u64,
    params: ParamStore,
    stats: Vec<RunningStats>,
    layers: Vec<Layer>,
    heads: Vec<Head>,
}

/// Per-convolution activity recorded during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvActivity {
    pub name: String,
    /// Activation of the site this convolution feeds.
    pub activation: Activation,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub transposed: bool,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub weights: usize,
    /// Per timestep, summed over the batch.
    pub input_nonzero: Vec<u64>,
    pub output_nonzero: Vec<u64>,
    /// Per sample and timestep, input elements carried as binary spikes.
    /// The rest of the input is analog.
    pub input_spikes: u64,
    /// Per sample and timestep, output elements that are binary spikes.
    pub output_spikes: u64,
    /// Whether this convolution's output feeds a stateful cell.
    pub stateful: bool,
}

impl ConvActivity {
    pub fn input_elems(&self) -> u64 {
        (self.in_ch * self.in_hw.0 * self.in_hw.1) as u64
    }

    pub fn output_elems(&self) -> u64 {
        (self.out_ch * self.out_hw.0 * self.out_hw.1) as u64
    }

    /// Dense multiply-accumulates per sample per timestep.
    pub fn dense_ops(&self) -> u64 {
        let k2 = (self.kernel * self.kernel) as u64;
        if self.transposed {
            self.input_elems() * self.out_ch as u64 * k2
        } else {
            self.output_elems() * self.in_ch as u64 * k2
        }
    }
}

/// Activity of every convolution in execution order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    pub steps: usize,
    pub batch: usize,
    pub convs: Vec<ConvActivity>,
}

impl ActivationTrace {
    /// Total spikes emitted by LIF sites at each timestep.
    pub fn spikes_per_step(&self) -> Vec<u64> {
        let mut out = vec![0; self.steps];
        for c in self
            .convs
            .iter()
            .filter(|c| c.activation == Activation::Lif)
        {
            for (o, &n) in out.iter_mut().zip(&c.output_nonzero) {
                *o += n;
            }
        }
        out
    }
}

/// Result of running a network on a tape.
#[derive(Debug)]
pub struct TapeRun {
    /// Accumulated full-scale flow, `[B, 2, H, W]`.
    pub flow: Var,
    /// Accumulated flow per head, coarse to fine; the last equals `flow`.
    pub scales: Vec<Var>,
    /// Head outputs per timestep, coarse to fine.
    pub per_step: Vec<Vec<Var>>,
    pub params: Vec<(ParamId, Var)>,
    pub trace: ActivationTrace,
}

/// Result of [`Network::forward_sequence`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub flow: Vec<FlowField>,
    pub multiscale: Vec<Vec<Tensor>>,
    pub trace: ActivationTrace,
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, (6.0 / fan_in as f32).sqrt(), rng)
}

/// Channel-wise concatenation of a decoder input with its encoder skip and,
/// when present, the coarser flow prediction.
pub fn skip_connect(
    decoder_in: &Tensor,
    encoder_out: &Tensor,
    coarse_flow: Option<&Tensor>,
) -> Result<Tensor> {
    let mut parts = vec![decoder_in, encoder_out];
    parts.extend(coarse_flow);
    Tensor::concat_channels(&parts)
}

/// Stacks per-sample event tensors into one `[B, 2, H, W]` tensor per timestep.
pub fn batch_inputs(samples: &[&EventTensor]) -> Result<Vec<Tensor>> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let shape = first.data.shape().to_vec();
    if let Some(bad) = samples.iter().find(|s| s.data.shape() != shape.as_slice()) {
        return Err(Error::ShapeMismatch(format!(
            "batch mixes {:?} and {:?}",
            shape,
            bad.data.shape()
        )));
    }
    (0..first.bins())
        .map(|t| {
            let slices: Vec<Tensor> = samples.iter().map(|s| s.slice(t)).collect();
            Tensor::stack(&slices)
        })
        .collect()
}

pub fn build_network(spec: &NetworkSpec, hybrid: &HybridConfig, seed: u64) -> Result<Network> {
    Network::build(spec, hybrid, seed)
}

impl Network {
    pub fn build(spec: &NetworkSpec, hybrid: &HybridConfig, seed: u64) -> Result<Self> {
        if spec.k == 0 || spec.steps == 0 {
            return Err(Error::InvalidConfig(format!(
                "k = {}, T = {}",
                spec.k, spec.steps
            )));
        }
        if !(spec.surrogate_width > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "surrogate width {}",
                spec.surrogate_width
            )));
        }
        hybrid.validate(spec)?;
        let mut spec = spec.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // ConvRNN weights come from their own stream so the remaining layers
        // initialize identically whatever the activation assignment.
        let mut rnn_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_C0DE_0000_0001);
        let mut params = ParamStore::new();
        let mut stats = Vec::new();
        let mut layers = Vec::new();
        let mut heads = Vec::new();
        let mut index = 0;
        for ls in spec.layers.iter_mut() {
            if ls.kind == LayerKind::FlowHead {
                let fan_in = ls.in_ch;
                let w = params.add(
                    format!("{}.weight", ls.name),
                    kaiming(&[2, ls.in_ch, 1, 1], fan_in, &mut rng).map(|v| 0.1 * v),
                );
                let b = params.add(format!("{}.bias", ls.name), Tensor::zeros(&[2]));
                heads.push(Head {
                    spec: ls.clone(),
                    w,
                    b,
                });
                continue;
            }
            ls.activation = hybrid.activation(index);
            let n_convs = if ls.kind == LayerKind::Residual { 2 } else { 1 };
            let mut convs = Vec::new();
            for c in 0..n_convs {
                let name = if n_convs == 1 {
                    ls.name.clone()
                } else {
                    format!("{}.conv{}", ls.name, c + 1)
                };
                let transposed = ls.kind == LayerKind::Decoder;
                let (shape, fan_in) = if transposed {
                    (
                        vec![ls.in_ch, ls.out_ch, ls.kernel, ls.kernel],
                        ls.in_ch * ls.kernel * ls.kernel / (ls.stride * ls.stride),
                    )
                } else {
                    let cin = if c == 0 { ls.in_ch } else { ls.out_ch };
                    (
                        vec![ls.out_ch, cin, ls.kernel, ls.kernel],
                        cin * ls.kernel * ls.kernel,
                    )
                };
                let w = params.add(format!("{name}.weight"), kaiming(&shape, fan_in, &mut rng));
                let (b, bn) = if spec.bntt {
                    let gamma = (0..spec.steps)
                        .map(|t| {
                            params.add(
                                format!("{name}.bn.gamma.{t}"),
                                Tensor::full(&[ls.out_ch], 1.0),
                            )
                        })
                        .collect();
                    let beta = (0..spec.steps)
                        .map(|t| {
                            params.add(format!("{name}.bn.beta.{t}"), Tensor::zeros(&[ls.out_ch]))
                        })
                        .collect();
                    stats.push(RunningStats::new(ls.out_ch, spec.steps));
                    (
                        None,
                        Some(BnUnit {
                            gamma,
                            beta,
                            stats: stats.len() - 1,
                        }),
                    )
                } else {
                    (
                        Some(params.add(format!("{name}.bias"), Tensor::zeros(&[ls.out_ch]))),
                        None,
                    )
                };
                convs.push(ConvUnit {
                    w,
                    b,
                    bn,
                    geom: ls.geom(),
                    transposed,
                });
            }
            let lif = (ls.activation == Activation::Lif).then(|| {
                let (rv, rl) = raw_from_threshold_leak(INIT_THRESHOLD, INIT_LEAK);
                (
                    params.add(format!("{}.v_th_raw", ls.name), Tensor::scalar(rv)),
                    params.add(format!("{}.leak_raw", ls.name), Tensor::scalar(rl)),
                )
            });
            let rnn = (ls.activation == Activation::ConvRnn).then(|| {
                let c = ls.out_ch;
                RnnUnit {
                    wh: params.add(
                        format!("{}.rnn.wh", ls.name),
                        kaiming(&[c, c, 3, 3], c * 9, &mut rnn_rng),
                    ),
                    bh: params.add(format!("{}.rnn.bh", ls.name), Tensor::zeros(&[c])),
                    wo: params.add(
                        format!("{}.rnn.wo", ls.name),
                        kaiming(&[c, c, 1, 1], c, &mut rnn_rng),
                    ),
                    bo: params.add(format!("{}.rnn.bo", ls.name), Tensor::zeros(&[c])),
                }
            });
            layers.push(Layer {
                spec: ls.clone(),
                convs,
                lif,
                rnn,
            });
            index += 1;
        }
        Ok(Self {
            spec,
            hybrid: hybrid.clone(),
            seed,
            params,
            stats,
            layers,
            heads,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn hybrid(&self) -> &HybridConfig {
        &self.hybrid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    /// Effective `(v_th, leak)` of each spiking layer, by layer name.
    pub fn lif_parameters(&self) -> Vec<(String, f32, f32)> {
        self.layers
            .iter()
            .filter_map(|l| {
                let (rv, rl) = l.lif?;
                let (v, lk) = crate::neuron::reparam_threshold_leak(
                    self.params.get(rv).item(),
                    self.params.get(rl).item(),
                );
                Some((l.spec.name.clone(), v, lk))
            })
            .collect()
    }

    /// Inference on a batch of event tensors (eval-mode BNTT, running stats untouched).
    pub fn forward_sequence(&self, samples: &[&EventTensor]) -> Result<ForwardOutput> {
        let inputs = batch_inputs(samples)?;
        let mut tape = Tape::new();
        let mut stats = self.stats.clone();
        let run = self.forward_with_stats(&mut tape, &inputs, Mode::Eval, &mut stats)?;
        let flow = tape.value(run.flow);
        let flows = (0..samples.len())
            .map(|b| FlowField::from_tensor(flow.sample(b)))
            .collect::<Result<Vec<_>>>()?;
        let multiscale = run
            .per_step
            .iter()
            .map(|vs| vs.iter().map(|&v| tape.value(v).clone()).collect())
            .collect();
        Ok(ForwardOutput {
            flow: flows,
            multiscale,
            trace: run.trace,
        })
    }

    /// Records the unrolled forward pass on `tape`. Train mode updates the
    /// BNTT running statistics.
    pub fn forward_on_tape(
        &mut self,
        tape: &mut Tape,
        inputs: &[Tensor],
        mode: Mode,
    ) -> Result<TapeRun> {
        let mut stats = std::mem::take(&mut self.stats);
        let out = self.forward_with_stats(tape, inputs, mode, &mut stats);
        self.stats = stats;
        out
    }

    fn forward_with_stats(
        &self,
        tape: &mut Tape,
        inputs: &[Tensor],
        mode: Mode,
        stats: &mut [RunningStats],
    ) -> Result<TapeRun> {
        if inputs.len() != self.spec.steps {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} timesteps, input has {}",
                self.spec.steps,
                inputs.len()
            )));
        }
        let (batch, c, h, w) = inputs[0].dims4()?;
        if c != 2 {
            return Err(Error::ShapeMismatch(format!(
                "input needs 2 polarity channels, got {c}"
            )));
        }
        if let Some(bad) = inputs.iter().find(|x| x.shape() != inputs[0].shape()) {
            return Err(Error::ShapeMismatch(format!(
                "timestep shapes {:?} vs {:?}",
                inputs[0].shape(),
                bad.shape()
            )));
        }
        self.spec.check_resolution(h, w)?;
        if mode == Mode::Train && batch < 2 && self.spec.bntt {
            return Err(Error::DegenerateBatch(batch));
        }

        let params: Vec<(ParamId, Var)> = self
            .params
            .iter()
            .map(|(id, _, v)| (id, tape.param(id, v.clone())))
            .collect();
        let pv = |id: ParamId| params[id.0].1;
        let surrogate = Surrogate {
            width: self.spec.surrogate_width,
        };

        // (v_th, leak) per spiking layer, shared across time.
        let mut lif_vars = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            lif_vars.push(match l.lif {
                Some((rv, rl)) => {
                    let sp = tape.softplus(pv(rv))?;
                    let v_th = tape.add_const(sp, THRESHOLD_FLOOR)?;
                    let leak = tape.sigmoid(pv(rl))?;
                    Some((v_th, leak))
                }
                None => None,
            });
        }

        let mut state = RunState::new(&self.layers);
        let mut trace = ActivationTrace {
            steps: self.spec.steps,
            batch,
            convs: Vec::new(),
        };
        let mut per_step = Vec::with_capacity(self.spec.steps);
        let mut sums: Vec<Option<Var>> = vec![None; self.heads.len()];

        for (t, x_t) in inputs.iter().enumerate() {
            let mut ctx = StepCtx {
                tape: &mut *tape,
                t,
                mode,
                stats: &mut *stats,
                trace: &mut trace,
                pv: &pv,
                surrogate,
            };
            let x = ctx.tape.input(x_t.clone());
            let heads = match self.spec.family {
                Family::EvFlowNet => self.step_evflownet(&mut ctx, x, &lif_vars, &mut state)?,
                Family::FireFlowNet => self.step_fireflownet(&mut ctx, x, &lif_vars, &mut state)?,
            };
            for (sum, &hv) in sums.iter_mut().zip(&heads) {
                *sum = Some(match *sum {
                    Some(s) => tape.add(s, hv)?,
                    None => hv,
                });
            }
            per_step.push(heads);
        }
        let scales: Vec<Var> = sums
            .into_iter()
            .map(|s| s.expect("at least one timestep"))
            .collect();
        Ok(TapeRun {
            flow: *scales.last().expect("a flow head"),
            scales,
            per_step,
            params,
            trace,
        })
    }

    fn step_fireflownet(
        &self,
        ctx: &mut StepCtx<'_>,
        x: Var,
        lif: &[Option<(Var, Var)>],
        st: &mut RunState,
    ) -> Result<Vec<Var>> {
        let mut cur = x;
        let mut binary = false;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = self.apply_layer(ctx, i, layer, &[(cur, binary)], lif[i], st)?;
            binary = layer.spec.activation == Activation::Lif;
        }
        Ok(vec![self.apply_head(ctx, &self.heads[0], cur, binary)?])
    }

    fn step_evflownet(
        &self,
        ctx: &mut StepCtx<'_>,
        x: Var,
        lif: &[Option<(Var, Var)>],
        st: &mut RunState,
    ) -> Result<Vec<Var>> {
        let spiking = |i: usize| self.layers[i].spec.activation == Activation::Lif;
        let mut skips = Vec::with_capacity(4);
        let mut cur = x;
        let mut binary = false;
        for i in 0..6 {
            cur = self.apply_layer(ctx, i, &self.layers[i], &[(cur, binary)], lif[i], st)?;
            binary = spiking(i);
            if i < 4 {
                skips.push((cur, binary));
            }
        }
        let mut flows = Vec::with_capacity(4);
        let mut coarse: Option<Var> = None;
        for d in 0..4 {
            let i = 6 + d;
            let mut parts = vec![(cur, binary), skips[3 - d]];
            if let Some(f) = coarse {
                parts.push((f, false));
            }
            cur = self.apply_layer(ctx, i, &self.layers[i], &parts, lif[i], st)?;
            binary = spiking(i);
            let f = self.apply_head(ctx, &self.heads[d], cur, binary)?;
            flows.push(f);
            coarse = Some(f);
        }
        Ok(flows)
    }

    fn conv(&self, ctx: &mut StepCtx<'_>, unit: &ConvUnit, x: Var) -> Result<Var> {
        let w = (ctx.pv)(unit.w);
        let b = unit.b.map(ctx.pv);
        let y = if unit.transposed {
            ctx.tape.conv_transpose2d(x, w, b, unit.geom)?
        } else {
            ctx.tape.conv2d(x, w, b, unit.geom)?
        };
        match &unit.bn {
            Some(bn) => {
                let (g, be) = ((ctx.pv)(bn.gamma[ctx.t]), (ctx.pv)(bn.beta[ctx.t]));
                ctx.tape
                    .bntt(y, g, be, ctx.t, &mut ctx.stats[bn.stats], ctx.mode)
            }
            None => Ok(y),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn activate(
        &self,
        ctx: &mut StepCtx<'_>,
        layer: &Layer,
        slot: usize,
        pre: Var,
        lif: Option<(Var, Var)>,
        st: &mut RunState,
    ) -> Result<Var> {
        match layer.spec.activation {
            Activation::Relu => ctx.tape.relu(pre),
            Activation::Linear => Ok(pre),
            Activation::Lif => {
                let (v_th, leak) = lif.expect("spiking layer has threshold and leak");
                let carried = match st.membrane[slot] {
                    Some(c) => c,
                    None => ctx.tape.input(Tensor::zeros(ctx.tape.value(pre).shape())),
                };
                let leaked = ctx.tape.mul_scalar(carried, leak)?;
                let u = ctx.tape.add(leaked, pre)?;
                let o = ctx.tape.spike(u, v_th, ctx.surrogate)?;
                st.membrane[slot] = Some(match self.spec.reset {
                    ResetMode::Hard => ctx.tape.hard_reset(u, o)?,
                    ResetMode::Soft => {
                        let drop = ctx.tape.mul_scalar(o, v_th)?;
                        ctx.tape.sub(u, drop)?
                    }
                });
                Ok(o)
            }
            Activation::ConvRnn => {
                let rnn = layer.rnn.as_ref().expect("recurrent layer has weights");
                let same = ConvGeom::new(3, 1, 1);
                let h = match st.membrane[slot] {
                    Some(hp) => {
                        let from_h =
                            ctx.tape
                                .conv2d(hp, (ctx.pv)(rnn.wh), Some((ctx.pv)(rnn.bh)), same)?;
                        let s = ctx.tape.add(pre, from_h)?;
                        ctx.tape.tanh(s)?
                    }
                    None => {
                        // zero hidden state: conv_h contributes only its bias
                        let zeros = ctx.tape.input(Tensor::zeros(ctx.tape.value(pre).shape()));
                        let from_h = ctx.tape.conv2d(
                            zeros,
                            (ctx.pv)(rnn.wh),
                            Some((ctx.pv)(rnn.bh)),
                            same,
                        )?;
                        let s = ctx.tape.add(pre, from_h)?;
                        ctx.tape.tanh(s)?
                    }
                };
                st.membrane[slot] = Some(h);
                ctx.tape.conv2d(
                    h,
                    (ctx.pv)(rnn.wo),
                    Some((ctx.pv)(rnn.bo)),
                    ConvGeom::new(1, 1, 0),
                )
            }
        }
    }

    fn apply_layer(
        &self,
        ctx: &mut StepCtx<'_>,
        index: usize,
        layer: &Layer,
        parts: &[(Var, bool)],
        lif: Option<(Var, Var)>,
        st: &mut RunState,
    ) -> Result<Var> {
        let x = if parts.len() == 1 {
            parts[0].0
        } else {
            let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
            ctx.tape.concat(&vars)?
        };
        let in_spikes = parts
            .iter()
            .map(|&(v, bin)| {
                if bin {
                    per_sample(ctx.tape.value(v))
                } else {
                    0
                }
            })
            .sum();
        let slot = st.slot[index];
        let spiking = layer.spec.activation == Activation::Lif;
        let out_spikes = |t: &Tensor| if spiking { per_sample(t) } else { 0 };
        let stateful = matches!(layer.spec.activation, Activation::Lif | Activation::ConvRnn);
        match layer.spec.kind {
            LayerKind::Residual => {
                let pre_a = self.conv(ctx, &layer.convs[0], x)?;
                let a = self.activate(ctx, layer, slot, pre_a, lif, st)?;
                let name_a = format!("{}.conv1", layer.spec.name);
                ctx.record(
                    &name_a,
                    layer,
                    &layer.convs[0],
                    x,
                    in_spikes,
                    a,
                    out_spikes(ctx.tape.value(a)),
                    stateful,
                );
                let pre_b = self.conv(ctx, &layer.convs[1], a)?;
                let sum = ctx.tape.add(pre_b, x)?;
                let b = self.activate(ctx, layer, slot + 1, sum, lif, st)?;
                let a_spikes = out_spikes(ctx.tape.value(a));
                let name_b = format!("{}.conv2", layer.spec.name);
                ctx.record(
                    &name_b,
                    layer,
                    &layer.convs[1],
                    a,
                    a_spikes,
                    b,
                    out_spikes(ctx.tape.value(b)),
                    stateful,
                );
                Ok(b)
            }
            _ => {
                let pre = self.conv(ctx, &layer.convs[0], x)?;
                let y = self.activate(ctx, layer, slot, pre, lif, st)?;
                let bits = out_spikes(ctx.tape.value(y));
                ctx.record(
                    &layer.spec.name,
                    layer,
                    &layer.convs[0],
                    x,
                    in_spikes,
                    y,
                    bits,
                    stateful,
                );
                if let Some(rnn) = &layer.rnn {
                    // the hidden-state and output convolutions of the cell
                    let h = st.membrane[slot].expect("hidden state just written");
                    ctx.record_extra(
                        &format!("{}.rnn.h", layer.spec.name),
                        &layer.spec,
                        h,
                        h,
                        3,
                        rnn_weights(&self.params, rnn.wh),
                    );
                    ctx.record_extra(
                        &format!("{}.rnn.o", layer.spec.name),
                        &layer.spec,
                        h,
                        y,
                        1,
                        rnn_weights(&self.params, rnn.wo),
                    );
                }
                Ok(y)
            }
        }
    }

    fn apply_head(&self, ctx: &mut StepCtx<'_>, head: &Head, x: Var, binary: bool) -> Result<Var> {
        let y = ctx.tape.conv2d(
            x,
            (ctx.pv)(head.w),
            Some((ctx.pv)(head.b)),
            ConvGeom::new(1, 1, 0),
        )?;
        let in_spikes = if binary {
            per_sample(ctx.tape.value(x))
        } else {
            0
        };
        let out_spikes = 0;
        let unit = ConvUnit {
            w: head.w,
            b: Some(head.b),
            bn: None,
            geom: ConvGeom::new(1, 1, 0),
            transposed: false,
        };
        let layer = Layer {
            spec: head.spec.clone(),
            convs: vec![],
            lif: None,
            rnn: None,
        };
        ctx.record(
            &head.spec.name,
            &layer,
            &unit,
            x,
            in_spikes,
            y,
            out_spikes,
            false,
        );
        Ok(y)
    }
}

fn rnn_weights(params: &ParamStore, id: ParamId) -> usize {
    params.get(id).numel()
}

fn per_sample(t: &Tensor) -> u64 {
    (t.numel() / t.dim(0)) as u64
}

fn spatial(t: &Tensor) -> (usize, usize) {
    (t.dim(2), t.dim(3))
}

/// Per-forward recurrent state: one slot per activation site.
struct RunState {
    slot: Vec<usize>,
    membrane: Vec<Option<Var>>,
}

impl RunState {
    fn new(layers: &[Layer]) -> Self {
        let mut slot = Vec::with_capacity(layers.len());
        let mut n = 0;
        for l in layers {
            slot.push(n);
            n += if l.spec.kind == LayerKind::Residual {
                2
            } else {
                1
            };
        }
        Self {
            slot,
            membrane: vec![None; n],
        }
    }
}

struct StepCtx<'a> {
    tape: &'a mut Tape,
    t: usize,
    mode: Mode,
    stats: &'a mut [RunningStats],
    trace: &'a mut ActivationTrace,
    pv: &'a dyn Fn(ParamId) -> Var,
    surrogate: Surrogate,
}

fn entry<'t>(
    trace: &'t mut ActivationTrace,
    name: &str,
    make: impl FnOnce() -> ConvActivity,
) -> &'t mut ConvActivity {
    let pos = match trace.convs.iter().position(|c| c.name == name) {
        Some(p) => p,
        None => {
            trace.convs.push(make());
            trace.convs.len() - 1
        }
    };
    &mut trace.convs[pos]
}

impl StepCtx<'_> {
    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        name: &str,
        layer: &Layer,
        unit: &ConvUnit,
        x: Var,
        in_spikes: u64,
        y: Var,
        out_spikes: u64,
        stateful: bool,
    ) {
        let (xv, yv) = (self.tape.value(x), self.tape.value(y));
        let steps = self.trace.steps;
        let w_numel = {
            let s = &layer.spec;
            match s.kind {
                LayerKind::Decoder => s.in_ch * s.out_ch * s.kernel * s.kernel,
                LayerKind::Residual => s.out_ch * s.out_ch * s.kernel * s.kernel,
                _ => s.out_ch * s.in_ch * s.kernel * s.kernel,
            }
        };
        let make = || ConvActivity {
            name: name.to_string(),
            activation: layer.spec.activation,
            in_ch: xv.dim(1),
            out_ch: yv.dim(1),
            kernel: unit.geom.kernel,
            transposed: unit.transposed,
            in_hw: spatial(xv),
            out_hw: spatial(yv),
            weights: w_numel,
            input_nonzero: vec![0; steps],
            output_nonzero: vec![0; steps],
            input_spikes: in_spikes,
            output_spikes: out_spikes,
            stateful,
        };
        let (inz, onz) = (xv.count_nonzero() as u64, yv.count_nonzero() as u64);
        let t = self.t;
        let e = entry(self.trace, name, make);
        e.input_nonzero[t] += inz;
        e.output_nonzero[t] += onz;
    }

    fn record_extra(
        &mut self,
        name: &str,
        spec: &LayerSpec,
        x: Var,
        y: Var,
        kernel: usize,
        weights: usize,
    ) {
        let (xv, yv) = (self.tape.value(x), self.tape.value(y));
        let steps = self.trace.steps;
        let make = || ConvActivity {
            name: name.to_string(),
            activation: spec.activation,
            in_ch: xv.dim(1),
            out_ch: yv.dim(1),
            kernel,
            transposed: false,
            in_hw: spatial(xv),
            out_hw: spatial(yv),
            weights,
            input_nonzero: vec![0; steps],
            output_nonzero: vec![0; steps],
            input_spikes: 0,
            output_spikes: 0,
            stateful: kernel == 3,
        };
        let (inz, onz) = (xv.count_nonzero() as u64, yv.count_nonzero() as u64);
        let t = self.t;
        let e = entry(self.trace, name, make);
        e.input_nonzero[t] += inz;
        e.output_nonzero[t] += onz;
    }
}
