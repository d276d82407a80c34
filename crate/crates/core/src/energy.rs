//! Analytical inference-energy model.
//!
//! Two memory levels (DRAM and one global buffer) plus compute. Per layer:
//!
//! - compute: `sum_t ops * sparsity_t * e_ac` for spike-driven layers,
//!   `T * ops * e_mac` otherwise (ReLU zeros are not exploited);
//! - weights: every weight word is loaded from DRAM and read once from the
//!   buffer, once per inference when the layer's weights fit in the
//!   buffer and once per timestep when they do not;
//! - activations: input and output words are read/written in the buffer
//!   every timestep; words that do not fit spill to DRAM (one write and
//!   one read each). A spike takes `spike_bits` bits (1 by default, so 32
//!   spikes share a word);
//! - membrane: one read and one write per stateful neuron per timestep,
//!   in the buffer when the layer's state fits and in DRAM otherwise.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::events::EventTensor;
use crate::network::{Activation, ActivationTrace, HybridConfig, Network, NetworkSpec};

const WORD_BYTES: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyTable {
    /// pJ per multiply-accumulate.
    pub e_mac: f64,
    /// pJ per accumulate.
    pub e_ac: f64,
    /// pJ per 32-bit DRAM access.
    pub e_dram: f64,
    /// pJ per 32-bit buffer access.
    pub e_buf: f64,
    /// Bytes.
    pub buffer_capacity: u64,
    /// Bits moved per binary spike; 1 means 32 spikes share a word.
    pub spike_bits: u32,
}

impl Default for EnergyTable {
    fn default() -> Self {
        Self {
            e_mac: 4.6,
            e_ac: 0.9,
            e_dram: 640.0,
            e_buf: 6.0,
            buffer_capacity: 108 * 1024,
            spike_bits: 1,
        }
    }
}

impl EnergyTable {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidEnergyTable(m));
        for (k, v) in [
            ("e_mac", self.e_mac),
            ("e_ac", self.e_ac),
            ("e_dram", self.e_dram),
            ("e_buf", self.e_buf),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} = {v} must be positive"));
            }
        }
        if self.buffer_capacity == 0 {
            return Err(Error::CapacityZero);
        }
        if !(1..=32).contains(&self.spike_bits) {
            return bad(format!(
                "spike_bits = {} must be in 1..=32",
                self.spike_bits
            ));
        }
        if self.e_ac >= self.e_mac {
            return bad(format!(
                "e_ac ({}) must be below e_mac ({})",
                self.e_ac, self.e_mac
            ));
        }
        if self.e_buf >= self.e_dram {
            return bad(format!(
                "e_buf ({}) must be below e_dram ({})",
                self.e_buf, self.e_dram
            ));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Missing keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidEnergyTable(format!("line {}: expected key = value", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| {
                v.parse::<f64>().map_err(|_| {
                    Error::InvalidEnergyTable(format!("line {}: bad number `{v}`", n + 1))
                })
            };
            match k {
                "e_mac" => t.e_mac = num(v)?,
                "e_ac" => t.e_ac = num(v)?,
                "e_dram" => t.e_dram = num(v)?,
                "e_buf" => t.e_buf = num(v)?,
                "buffer_capacity" => {
                    t.buffer_capacity = v.parse().map_err(|_| {
                        Error::InvalidEnergyTable(format!("line {}: bad capacity `{v}`", n + 1))
                    })?
                }
                "spike_bits" => {
                    t.spike_bits = v.parse().map_err(|_| {
                        Error::InvalidEnergyTable(format!("line {}: bad spike_bits `{v}`", n + 1))
                    })?
                }
                other => {
                    return Err(Error::InvalidEnergyTable(format!(
                        "line {}: unknown key `{other}`",
                        n + 1
                    )))
                }
            }
        }
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        format!(
            "e_mac = {}\ne_ac = {}\ne_dram = {}\ne_buf = {}\nbuffer_capacity = {}\nspike_bits = {}\n",
            self.e_mac, self.e_ac, self.e_dram, self.e_buf, self.buffer_capacity, self.spike_bits
        )
    }
}

/// Per-sample activity of one convolution, as consumed by the model.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub layer: String,
    pub steps: usize,
    pub output_elems: u64,
    /// Dense synaptic operations per timestep.
    pub ops_per_step: u64,
    /// Fraction of nonzero inputs at each timestep.
    pub sparsity: Vec<f64>,
    pub is_spiking_input: bool,
    pub has_membrane: bool,
    pub weights: u64,
    pub input_elems: u64,
    /// Input elements that are binary spikes; the rest are 32-bit values.
    pub input_spikes: u64,
    pub output_spikes: u64,
}

impl LayerTrace {
    pub fn validate(&self) -> Result<()> {
        if self.sparsity.len() != self.steps
            || self.sparsity.iter().any(|s| !(0.0..=1.0).contains(s))
        {
            return Err(Error::TraceMissing(format!(
                "layer {} has invalid sparsity {:?}",
                self.layer, self.sparsity
            )));
        }
        Ok(())
    }

    /// Copy with every timestep's sparsity replaced by `s`.
    pub fn with_sparsity(&self, s: f64) -> Self {
        Self {
            sparsity: vec![s; self.steps],
            ..self.clone()
        }
    }

    pub fn mean_sparsity(&self) -> f64 {
        self.sparsity.iter().sum::<f64>() / self.steps.max(1) as f64
    }
}

/// Converts a recorded activation trace into per-layer model inputs.
/// Convolutions feeding LIF neurons are treated as spike-driven.
pub fn trace_from_run(net: &Network, trace: &ActivationTrace) -> Result<Vec<LayerTrace>> {
    if trace.steps == 0 || trace.batch == 0 || trace.convs.is_empty() {
        return Err(Error::TraceMissing("empty activation trace".into()));
    }
    for name in net.spec().layer_names() {
        let found = trace
            .convs
            .iter()
            .any(|c| c.name == name || c.name.starts_with(&format!("{name}.")));
        if !found {
            return Err(Error::TraceMissing(format!(
                "no activity recorded for layer {name}"
            )));
        }
    }
    trace
        .convs
        .iter()
        .map(|c| {
            if c.input_nonzero.len() != trace.steps {
                return Err(Error::TraceMissing(format!(
                    "layer {} has {} steps",
                    c.name,
                    c.input_nonzero.len()
                )));
            }
            let denom = (c.input_elems() * trace.batch as u64) as f64;
            Ok(LayerTrace {
                layer: c.name.clone(),
                steps: trace.steps,
                output_elems: c.output_elems(),
                ops_per_step: c.dense_ops(),
                sparsity: c.input_nonzero.iter().map(|&n| n as f64 / denom).collect(),
                is_spiking_input: c.activation == Activation::Lif,
                has_membrane: c.stateful,
                weights: c.weights as u64,
                input_elems: c.input_elems(),
                input_spikes: c.input_spikes,
                output_spikes: c.output_spikes,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerEnergy {
    pub layer: String,
    pub compute_pj: f64,
    pub weight_pj: f64,
    pub act_pj: f64,
    pub membrane_pj: f64,
}

impl LayerEnergy {
    pub fn total_pj(&self) -> f64 {
        self.compute_pj + self.weight_pj + self.act_pj + self.membrane_pj
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergy>,
}

pub const ENERGY_CSV_HEADER: &str = "layer,compute_pJ,weight_pJ,act_pJ,membrane_pJ";

impl EnergyReport {
    fn sum(&self, f: impl Fn(&LayerEnergy) -> f64) -> f64 {
        self.layers.iter().map(f).sum()
    }

    pub fn compute_pj(&self) -> f64 {
        self.sum(|l| l.compute_pj)
    }

    pub fn weight_pj(&self) -> f64 {
        self.sum(|l| l.weight_pj)
    }

    pub fn act_pj(&self) -> f64 {
        self.sum(|l| l.act_pj)
    }

    pub fn membrane_pj(&self) -> f64 {
        self.sum(|l| l.membrane_pj)
    }

    pub fn total_pj(&self) -> f64 {
        self.sum(LayerEnergy::total_pj)
    }

    pub fn total_mj(&self) -> f64 {
        self.total_pj() * 1e-9
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{ENERGY_CSV_HEADER}\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                l.layer, l.compute_pj, l.weight_pj, l.act_pj, l.membrane_pj
            );
        }
        out
    }
}

impl fmt::Display for EnergyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>14} {:>14} {:>14} {:>14}",
            "layer", "compute uJ", "weights uJ", "acts uJ", "membrane uJ"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<12} {:>14.4} {:>14.4} {:>14.4} {:>14.4}",
                l.layer,
                l.compute_pj * 1e-6,
                l.weight_pj * 1e-6,
                l.act_pj * 1e-6,
                l.membrane_pj * 1e-6
            )?;
        }
        write!(f, "total {:.6} mJ", self.total_mj())
    }
}

/// 32-bit words needed to move `elems` values of which `spikes` are binary.
fn words(elems: u64, spikes: u64, spike_bits: u32) -> u64 {
    (spikes * spike_bits as u64).div_ceil(32) + (elems - spikes)
}

pub fn estimate_layer(t: &LayerTrace, table: &EnergyTable) -> LayerEnergy {
    let steps = t.steps as f64;
    let cap_words = table.buffer_capacity / WORD_BYTES;

    let compute_pj = if t.is_spiking_input {
        t.sparsity
            .iter()
            .map(|&s| t.ops_per_step as f64 * s * table.e_ac)
            .sum()
    } else {
        steps * t.ops_per_step as f64 * table.e_mac
    };

    let fetches = if t.weights > cap_words { steps } else { 1.0 };
    let weight_pj = t.weights as f64 * (table.e_dram + table.e_buf) * fetches;

    let act_words = words(t.input_elems, t.input_spikes, table.spike_bits)
        + words(t.output_elems, t.output_spikes, table.spike_bits);
    let spill = act_words.saturating_sub(cap_words);
    let act_pj = steps * (act_words as f64 * table.e_buf + 2.0 * spill as f64 * table.e_dram);

    let membrane_pj = if t.has_membrane {
        let e = if t.output_elems > cap_words {
            table.e_dram
        } else {
            table.e_buf
        };
        2.0 * t.output_elems as f64 * steps * e
    } else {
        0.0
    };

    LayerEnergy {
        layer: t.layer.clone(),
        compute_pj,
        weight_pj,
        act_pj,
        membrane_pj,
    }
}

pub fn estimate_energy(traces: &[LayerTrace], table: &EnergyTable) -> Result<EnergyReport> {
    if table.buffer_capacity == 0 {
        return Err(Error::CapacityZero);
    }
    table.validate()?;
    let mut layers = Vec::with_capacity(traces.len());
    for t in traces {
        t.validate()?;
        layers.push(estimate_layer(t, table));
    }
    Ok(EnergyReport { layers })
}

/// Runs `net` on `inputs` and estimates the per-sample inference energy.
pub fn energy_of(
    net: &Network,
    inputs: &[&EventTensor],
    table: &EnergyTable,
) -> Result<EnergyReport> {
    let out = net.forward_sequence(inputs)?;
    estimate_energy(&trace_from_run(net, &out.trace)?, table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantEnergy {
    pub label: String,
    pub report: EnergyReport,
}

impl VariantEnergy {
    pub fn total_mj(&self) -> f64 {
        self.report.total_mj()
    }
}

/// Builds every configuration with the same seed and evaluates it on the
/// same input.
pub fn compare_variants(
    spec: &NetworkSpec,
    configs: &[(String, HybridConfig)],
    seed: u64,
    inputs: &[&EventTensor],
    table: &EnergyTable,
) -> Result<Vec<VariantEnergy>> {
    configs
        .iter()
        .map(|(label, h)| {
            let net = Network::build(spec, h, seed)?;
            Ok(VariantEnergy {
                label: label.clone(),
                report: energy_of(&net, inputs, table)?,
            })
        })
        .collect()
}

pub fn variants_csv(rows: &[VariantEnergy]) -> String {
    let mut out = String::from("variant,compute_pJ,weight_pJ,act_pJ,membrane_pJ,total_mJ\n");
    for v in rows {
        let r = &v.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            v.label,
            r.compute_pj(),
            r.weight_pj(),
            r.act_pj(),
            r.membrane_pj(),
            r.total_mj()
        );
    }
    out
}
