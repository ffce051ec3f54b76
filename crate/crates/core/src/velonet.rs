//! Conditional velocity network `v(z_t, t, c)` and low-rank expert adapters.
//!
//! Layout: the condition goes through a 4→16 linear embedding, `t` through 8
//! sinusoidal features, and `[z_t | time | cond]` (88 wide) through
//! 88→128→128→64 with SiLU between. Every linear layer, the condition
//! embedding included, can carry a LoRA delta `(α/r)·B·A`.
//!
//! There are two evaluation routes over the same arithmetic: [`VelocityNet::forward`]
//! works on plain slices for sampling, [`VelocityNet::forward_tape`] records on
//! a [`Tape`] for training. They agree bit for bit.

use std::f64::consts::PI;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Shape, Tape, Tensor, Var};
use crate::linalg::{gemm_nt, silu};
use crate::seeds;
use crate::synthgen::{Dimension, COND_DIM, SEQ_LEN};
use crate::tpo::SegmentSchedule;

pub const TIME_FREQS: usize = 4;
pub const LORA_INIT_STD: f64 = 0.02;
pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;
const PARAMS_FORMAT: &str = "segpref-params-v1";

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tape(#[from] AutodiffError),
    #[error("lora rank must be at least 1")]
    ZeroRank,
    #[error("lora rank {rank} exceeds the smaller dimension ({limit}) of layer {layer}")]
    RankTooLarge {
        layer: &'static str,
        rank: usize,
        limit: usize,
    },
    #[error("adapter for layer {layer} does not fit: A is {a}, B is {b}, layer is {inputs}→{outputs}")]
    AdapterMismatch {
        layer: &'static str,
        a: Shape,
        b: Shape,
        inputs: usize,
        outputs: usize,
    },
    #[error("field {field}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        field: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("input batch: {0}")]
    Batch(String),
    #[error("t = {0} outside [0, 1)")]
    TimeRange(f64),
    #[error("parameter file: {0}")]
    Parse(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Identifies one of the four linear layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerId {
    CondEmbed,
    Hidden1,
    Hidden2,
    Output,
}

impl LayerId {
    pub const ALL: [LayerId; 4] = [
        LayerId::CondEmbed,
        LayerId::Hidden1,
        LayerId::Hidden2,
        LayerId::Output,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LayerId::CondEmbed => "cond_embed",
            LayerId::Hidden1 => "hidden1",
            LayerId::Hidden2 => "hidden2",
            LayerId::Output => "output",
        }
    }

    fn index(&self) -> usize {
        *self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub seq_len: usize,
    pub cond_dim: usize,
    pub cond_embed: usize,
    pub time_freqs: usize,
    pub hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            seq_len: SEQ_LEN,
            cond_dim: COND_DIM,
            cond_embed: 16,
            time_freqs: TIME_FREQS,
            hidden: 128,
        }
    }
}

impl Architecture {
    pub fn time_dim(&self) -> usize {
        2 * self.time_freqs
    }

    pub fn input_dim(&self) -> usize {
        self.seq_len + self.time_dim() + self.cond_embed
    }

    /// `(inputs, outputs)` of a layer.
    pub fn layer_dims(&self, id: LayerId) -> (usize, usize) {
        match id {
            LayerId::CondEmbed => (self.cond_dim, self.cond_embed),
            LayerId::Hidden1 => (self.input_dim(), self.hidden),
            LayerId::Hidden2 => (self.hidden, self.hidden),
            LayerId::Output => (self.hidden, self.seq_len),
        }
    }

    pub fn param_count(&self) -> usize {
        LayerId::ALL
            .iter()
            .map(|&id| {
                let (i, o) = self.layer_dims(id);
                i * o + o
            })
            .sum()
    }
}

/// Uniform access to the trainable tensors of a module, in a fixed order.
pub trait ParamStore {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors()
            .into_iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect()
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Overwrites all parameters from a flat vector in [`ParamStore::tensors`] order.
    fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `outputs × inputs`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init<R: rand::Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::matrix(outputs, inputs, weight),
            bias: Tensor::vector(bias),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    arch: Architecture,
    layers: [Linear; 4],
}

/// Sinusoidal time features `sin/cos(t·2^k·π)`, `k = 0..freqs`.
pub fn time_embedding(t: f64, freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * freqs);
    for k in 0..freqs {
        let w = t * (1u64 << k) as f64 * PI;
        out.push(w.sin());
        out.push(w.cos());
    }
    out
}

/// Which parameters a tape forward registers as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Adapter,
    Base,
}

/// Trainable leaves registered by [`VelocityNet::forward_tape`], in
/// [`ParamStore`] order of the module they belong to.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    /// Gradients aligned with the bound module's [`ParamStore::tensors`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| grads.get(v).cloned().expect("bound parameter has an adjoint"))
            .collect()
    }
}

/// Input batch for a forward pass: `rows` samples of `z` (64 wide), `t` and a
/// condition (4 wide).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub z: Vec<f64>,
    pub t: Vec<f64>,
    pub cond: Vec<f64>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.t.len()
    }

    fn validate(&self, arch: &Architecture) -> Result<(), NetError> {
        let m = self.rows();
        if self.z.len() != m * arch.seq_len || self.cond.len() != m * arch.cond_dim {
            return Err(NetError::Batch(format!(
                "{m} rows but z has {} values and cond has {}",
                self.z.len(),
                self.cond.len()
            )));
        }
        if let Some(&t) = self.t.iter().find(|t| !(0.0..1.0).contains(*t)) {
            return Err(NetError::TimeRange(t));
        }
        Ok(())
    }

    fn time_features(&self, arch: &Architecture) -> Vec<f64> {
        self.t
            .iter()
            .flat_map(|&t| time_embedding(t, arch.time_freqs))
            .collect()
    }
}

impl VelocityNet {
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = seeds::rng(seed);
        let layers = LayerId::ALL.map(|id| {
            let (i, o) = arch.layer_dims(id);
            Linear::init(&mut rng, i, o)
        });
        Self { arch, layers }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layer(&self, id: LayerId) -> &Linear {
        &self.layers[id.index()]
    }

    pub fn layer_mut(&mut self, id: LayerId) -> &mut Linear {
        &mut self.layers[id.index()]
    }

    fn check_adapters(&self, lora: &LoraSet) -> Result<(), NetError> {
        for id in LayerId::ALL {
            let layer = self.layer(id);
            let ad = lora.adapter(id);
            let (a, b) = (ad.a.shape(), ad.b.shape());
            let ok = ad.a.cols() == layer.inputs()
                && ad.b.rows() == layer.outputs()
                && ad.a.rows() == ad.b.cols()
                && matches!(a, Shape::Matrix(..))
                && matches!(b, Shape::Matrix(..));
            if !ok {
                return Err(NetError::AdapterMismatch {
                    layer: id.name(),
                    a,
                    b,
                    inputs: layer.inputs(),
                    outputs: layer.outputs(),
                });
            }
        }
        Ok(())
    }

    /// Velocity for every row of `batch`, optionally with an adapter applied.
    pub fn forward(&self, lora: Option<&LoraSet>, batch: &Batch) -> Result<Vec<f64>, NetError> {
        batch.validate(&self.arch)?;
        if let Some(l) = lora {
            self.check_adapters(l)?;
        }
        let m = batch.rows();
        let ad = |id: LayerId| lora.map(|l| l.adapter(id));

        let cemb = linear_plain(&batch.cond, m, self.layer(LayerId::CondEmbed), ad(LayerId::CondEmbed));
        let temb = batch.time_features(&self.arch);
        let (zs, ts, cs) = (self.arch.seq_len, self.arch.time_dim(), self.arch.cond_embed);
        let mut input = Vec::with_capacity(m * self.arch.input_dim());
        for r in 0..m {
            input.extend_from_slice(&batch.z[r * zs..(r + 1) * zs]);
            input.extend_from_slice(&temb[r * ts..(r + 1) * ts]);
            input.extend_from_slice(&cemb[r * cs..(r + 1) * cs]);
        }
        let mut h = linear_plain(&input, m, self.layer(LayerId::Hidden1), ad(LayerId::Hidden1));
        h.iter_mut().for_each(|v| *v = silu(*v));
        let mut h = linear_plain(&h, m, self.layer(LayerId::Hidden2), ad(LayerId::Hidden2));
        h.iter_mut().for_each(|v| *v = silu(*v));
        let out = linear_plain(&h, m, self.layer(LayerId::Output), ad(LayerId::Output));
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "velocity", index: i }.into());
        }
        Ok(out)
    }

    /// Records the forward pass on `tape` and returns the `rows × 64` output.
    /// `train` selects which leaves are parameters; the rest are constants.
    pub fn forward_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        lora: Option<&'a LoraSet>,
        train: Trainable,
        batch: &Batch,
    ) -> Result<(Var, BoundParams), NetError> {
        batch.validate(&self.arch)?;
        if let Some(l) = lora {
            self.check_adapters(l)?;
        }
        if train == Trainable::Adapter && lora.is_none() {
            return Err(NetError::Batch("adapter training requested without an adapter".into()));
        }
        let m = batch.rows();
        let mut bound = BoundParams::default();

        let mut layer_vars = Vec::with_capacity(4);
        for id in LayerId::ALL {
            let l = self.layer(id);
            let vars = if train == Trainable::Base {
                let w = tape.param_ref(&l.weight);
                let b = tape.param_ref(&l.bias);
                bound.vars.extend([w, b]);
                (w, b)
            } else {
                (tape.constant_ref(&l.weight), tape.constant_ref(&l.bias))
            };
            layer_vars.push(vars);
        }
        let mut adapter_vars = Vec::with_capacity(4);
        if let Some(l) = lora {
            for id in LayerId::ALL {
                let ad = l.adapter(id);
                let vars = if train == Trainable::Adapter {
                    let a = tape.param_ref(&ad.a);
                    let b = tape.param_ref(&ad.b);
                    bound.vars.extend([a, b]);
                    (a, b)
                } else {
                    (tape.constant_ref(&ad.a), tape.constant_ref(&ad.b))
                };
                adapter_vars.push(Some((vars.0, vars.1, ad.scale())));
            }
        } else {
            adapter_vars.resize(4, None);
        }

        let linear = |tape: &mut Tape<'a>, x: Var, id: LayerId| -> Result<Var, AutodiffError> {
            let (w, b) = layer_vars[id.index()];
            let y = tape.matmul_t(x, w)?;
            let y = tape.add(y, b)?;
            match adapter_vars[id.index()] {
                Some((a, bb, s)) => {
                    let xa = tape.matmul_t(x, a)?;
                    let u = tape.matmul_t(xa, bb)?;
                    let su = tape.scale(u, s)?;
                    tape.add(y, su)
                }
                None => Ok(y),
            }
        };

        let cond = tape.constant(Tensor::matrix(m, self.arch.cond_dim, batch.cond.clone()));
        let cemb = linear(tape, cond, LayerId::CondEmbed)?;
        let z = tape.constant(Tensor::matrix(m, self.arch.seq_len, batch.z.clone()));
        let temb = tape.constant(Tensor::matrix(m, self.arch.time_dim(), batch.time_features(&self.arch)));
        let input = tape.concat(&[z, temb, cemb])?;
        let h = linear(tape, input, LayerId::Hidden1)?;
        let h = tape.silu(h)?;
        let h = linear(tape, h, LayerId::Hidden2)?;
        let h = tape.silu(h)?;
        let out = linear(tape, h, LayerId::Output)?;
        Ok((out, bound))
    }
}

impl ParamStore for VelocityNet {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

fn linear_plain(x: &[f64], m: usize, layer: &Linear, adapter: Option<&LoraAdapter>) -> Vec<f64> {
    let (i, o) = (layer.inputs(), layer.outputs());
    let mut y = vec![0.0; m * o];
    gemm_nt(x, layer.weight.data(), &mut y, m, i, o);
    for row in y.chunks_mut(o) {
        for (v, b) in row.iter_mut().zip(layer.bias.data()) {
            *v += b;
        }
    }
    if let Some(ad) = adapter {
        let r = ad.rank();
        let mut xa = vec![0.0; m * r];
        gemm_nt(x, ad.a.data(), &mut xa, m, i, r);
        let mut u = vec![0.0; m * o];
        gemm_nt(&xa, ad.b.data(), &mut u, m, r, o);
        let s = ad.scale();
        for (v, uu) in y.iter_mut().zip(&u) {
            *v += s * uu;
        }
    }
    y
}

/// Low-rank delta for one layer: `(α/r)·B·A` with `A: r×in`, `B: out×r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Dense `(α/r)·B·A`.
    pub fn delta(&self) -> Vec<f64> {
        let (r, i, o) = (self.rank(), self.a.cols(), self.b.rows());
        let mut d = vec![0.0; o * i];
        crate::linalg::gemm_nn(self.b.data(), self.a.data(), &mut d, o, r, i);
        let s = self.scale();
        d.iter_mut().for_each(|v| *v *= s);
        d
    }
}

/// One adapter per linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet {
    adapters: [LoraAdapter; 4],
    rank: usize,
}

impl LoraSet {
    pub fn adapter(&self, id: LayerId) -> &LoraAdapter {
        &self.adapters[id.index()]
    }

    /// Requested rank; the condition embedding uses `min(rank, 4)`.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.adapters[0].alpha
    }

    /// True when every `B` is zero, i.e. the set leaves the network unchanged.
    pub fn is_neutral(&self) -> bool {
        self.adapters
            .iter()
            .all(|a| a.b.data().iter().all(|&v| v == 0.0))
    }
}

impl ParamStore for LoraSet {
    fn tensors(&self) -> Vec<&Tensor> {
        self.adapters.iter().flat_map(|a| [&a.a, &a.b]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.adapters
            .iter_mut()
            .flat_map(|a| [&mut a.a, &mut a.b])
            .collect()
    }
}

/// Creates adapters for every linear layer: `B = 0`, `A ~ N(0, 0.02²)`.
///
/// The rank must fit every trunk layer. The 4-input condition embedding cannot
/// hold more than rank 4, so its adapter is capped there.
pub fn attach_lora(net: &VelocityNet, rank: usize, alpha: f64, seed: u64) -> Result<LoraSet, NetError> {
    if rank == 0 {
        return Err(NetError::ZeroRank);
    }
    for id in [LayerId::Hidden1, LayerId::Hidden2, LayerId::Output] {
        let (i, o) = net.arch().layer_dims(id);
        if rank > i.min(o) {
            return Err(NetError::RankTooLarge {
                layer: id.name(),
                rank,
                limit: i.min(o),
            });
        }
    }
    let mut rng = seeds::rng(seed);
    let normal = Normal::new(0.0, LORA_INIT_STD).expect("valid std");
    let adapters = LayerId::ALL.map(|id| {
        let (i, o) = net.arch().layer_dims(id);
        let r = rank.min(i.min(o));
        let a = (0..r * i).map(|_| normal.sample(&mut rng)).collect();
        LoraAdapter {
            a: Tensor::matrix(r, i, a),
            b: Tensor::zeros(Shape::Matrix(o, r)),
            alpha,
        }
    });
    Ok(LoraSet { adapters, rank })
}

/// Two experts routed by the segment schedule; either may be absent.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub motion: Option<LoraSet>,
    pub fidelity: Option<LoraSet>,
    pub schedule: SegmentSchedule,
}

impl LoraPair {
    pub fn expert(&self, dim: Dimension) -> Option<&LoraSet> {
        match dim {
            Dimension::Motion => self.motion.as_ref(),
            Dimension::Fidelity => self.fidelity.as_ref(),
        }
    }

    pub fn expert_mut(&mut self, dim: Dimension) -> Option<&mut LoraSet> {
        match dim {
            Dimension::Motion => self.motion.as_mut(),
            Dimension::Fidelity => self.fidelity.as_mut(),
        }
    }

    /// The expert active at `t`; exactly one interval owns every `t`.
    pub fn at(&self, t: f64) -> Option<&LoraSet> {
        self.expert(self.schedule.dimension_at(t))
    }
}

/// Adapter routing attached to a base network.
#[derive(Debug, Clone, PartialEq)]
pub enum Experts {
    None,
    /// One adapter used at every timestep.
    Single(LoraSet),
    Gated(LoraPair),
}

/// A velocity network plus whatever adapters route on top of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: VelocityNet,
    pub experts: Experts,
}

impl Model {
    pub fn base(net: VelocityNet) -> Self {
        Self {
            net,
            experts: Experts::None,
        }
    }

    pub fn adapter_at(&self, t: f64) -> Option<&LoraSet> {
        match &self.experts {
            Experts::None => None,
            Experts::Single(l) => Some(l),
            Experts::Gated(pair) => pair.at(t),
        }
    }

    /// Velocity at a shared `t` for every row.
    pub fn velocity(&self, batch: &Batch) -> Result<Vec<f64>, NetError> {
        let t = batch.t.first().copied().unwrap_or(0.0);
        debug_assert!(batch.t.iter().all(|&x| x == t));
        self.net.forward(self.adapter_at(t), batch)
    }
}

/// Single-row convenience wrapper around [`VelocityNet::forward`].
pub fn eval_velocity(
    net: &VelocityNet,
    active: Option<&LoraSet>,
    z: &[f64],
    t: f64,
    cond: &[f64],
) -> Result<Vec<f64>, NetError> {
    net.forward(
        active,
        &Batch {
            z: z.to_vec(),
            t: vec![t],
            cond: cond.to_vec(),
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LoraRecord {
    rank: usize,
    alpha: f64,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ExpertsRecord {
    None,
    Single {
        lora: LoraRecord,
    },
    Gated {
        f_switch: f64,
        motion: Option<LoraRecord>,
        fidelity: Option<LoraRecord>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsFile {
    format: String,
    arch: Architecture,
    net: Vec<TensorRecord>,
    experts: ExpertsRecord,
}

fn net_names() -> Vec<String> {
    LayerId::ALL
        .iter()
        .flat_map(|id| [format!("{}.weight", id.name()), format!("{}.bias", id.name())])
        .collect()
}

fn lora_names(prefix: &str) -> Vec<String> {
    LayerId::ALL
        .iter()
        .flat_map(|id| [format!("{prefix}.{}.A", id.name()), format!("{prefix}.{}.B", id.name())])
        .collect()
}

fn to_records(store: &dyn ParamStore, names: &[String]) -> Vec<TensorRecord> {
    store
        .tensors()
        .into_iter()
        .zip(names)
        .map(|(t, name)| TensorRecord {
            name: name.clone(),
            shape: t.shape().dims(),
            data: t.data().to_vec(),
        })
        .collect()
}

fn lora_record(l: &LoraSet, prefix: &str) -> LoraRecord {
    LoraRecord {
        rank: l.rank(),
        alpha: l.alpha(),
        tensors: to_records(l, &lora_names(prefix)),
    }
}

fn fill_from_records(
    store: &mut dyn ParamStore,
    names: &[String],
    records: Vec<TensorRecord>,
) -> Result<(), NetError> {
    if records.len() != names.len() {
        return Err(NetError::Parse(format!(
            "expected {} tensors, found {}",
            names.len(),
            records.len()
        )));
    }
    for ((slot, name), rec) in store.tensors_mut().into_iter().zip(names).zip(records) {
        if &rec.name != name {
            return Err(NetError::Parse(format!("expected tensor {name}, found {}", rec.name)));
        }
        let expected = slot.shape().dims();
        if rec.shape != expected || rec.data.len() != slot.len() {
            return Err(NetError::ShapeMismatch {
                field: name.clone(),
                expected,
                found: rec.shape,
            });
        }
        slot.data_mut().copy_from_slice(&rec.data);
    }
    Ok(())
}

fn lora_from_record(net: &VelocityNet, rec: LoraRecord, prefix: &str) -> Result<LoraSet, NetError> {
    // Shapes come from the architecture; values from the file.
    let mut set = attach_lora(net, rec.rank, rec.alpha, 0)?;
    fill_from_records(&mut set, &lora_names(prefix), rec.tensors)?;
    Ok(set)
}

/// Writes the network and its adapters as JSON with shape metadata.
pub fn serialize_params(model: &Model, path: &Path) -> Result<(), NetError> {
    let experts = match &model.experts {
        Experts::None => ExpertsRecord::None,
        Experts::Single(l) => ExpertsRecord::Single {
            lora: lora_record(l, "single"),
        },
        Experts::Gated(p) => ExpertsRecord::Gated {
            f_switch: p.schedule.f_switch(),
            motion: p.motion.as_ref().map(|l| lora_record(l, "motion")),
            fidelity: p.fidelity.as_ref().map(|l| lora_record(l, "fidelity")),
        },
    };
    let file = ParamsFile {
        format: PARAMS_FORMAT.into(),
        arch: *model.net.arch(),
        net: to_records(&model.net, &net_names()),
        experts,
    };
    let text = serde_json::to_string(&file).map_err(|e| NetError::Parse(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a parameter file into the given architecture. Every stored shape must
/// match what `arch` implies.
pub fn load_params(path: &Path, arch: &Architecture) -> Result<Model, NetError> {
    let text = std::fs::read_to_string(path).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: ParamsFile = serde_json::from_str(&text).map_err(|e| NetError::Parse(e.to_string()))?;
    if file.format != PARAMS_FORMAT {
        return Err(NetError::Parse(format!("unknown format {:?}", file.format)));
    }
    let mut net = VelocityNet::new(*arch, 0);
    fill_from_records(&mut net, &net_names(), file.net)?;
    let experts = match file.experts {
        ExpertsRecord::None => Experts::None,
        ExpertsRecord::Single { lora } => Experts::Single(lora_from_record(&net, lora, "single")?),
        ExpertsRecord::Gated {
            f_switch,
            motion,
            fidelity,
        } => Experts::Gated(LoraPair {
            motion: motion.map(|r| lora_from_record(&net, r, "motion")).transpose()?,
            fidelity: fidelity.map(|r| lora_from_record(&net, r, "fidelity")).transpose()?,
            schedule: SegmentSchedule::new(f_switch).map_err(|e| NetError::Parse(e.to_string()))?,
        }),
    };
    Ok(Model { net, experts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(seed: u64, rows: usize) -> Batch {
        let mut rng = seeds::rng(seed);
        Batch {
            z: (0..rows * SEQ_LEN).map(|_| rng.random_range(-2.0..2.0)).collect(),
            t: (0..rows).map(|_| rng.random_range(0.0..1.0)).collect(),
            cond: (0..rows * COND_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn parameter_count_matches_layout() {
        let arch = Architecture::default();
        let want = 88 * 128 + 128 + 128 * 128 + 128 + 128 * 64 + 64 + 4 * 16 + 16;
        assert_eq!(arch.param_count(), want);
        assert_eq!(VelocityNet::new(arch, 1).num_params(), want);
        assert_eq!(arch.input_dim(), 88);
    }

    #[test]
    fn output_has_sequence_width() {
        let net = VelocityNet::new(Architecture::default(), 1);
        let out = net.forward(None, &random_batch(2, 3)).unwrap();
        assert_eq!(out.len(), 3 * 64);
    }

    #[test]
    fn lora_shapes_and_zero_init() {
        let net = VelocityNet::new(Architecture::default(), 1);
        let l = attach_lora(&net, 8, 16.0, 3).unwrap();
        let h1 = l.adapter(LayerId::Hidden1);
        assert_eq!(h1.a.shape(), Shape::Matrix(8, 88));
        assert_eq!(h1.b.shape(), Shape::Matrix(128, 8));
        assert_eq!(l.adapter(LayerId::CondEmbed).rank(), 4);
        assert!(l.is_neutral());
        for id in LayerId::ALL {
            assert!(l.adapter(id).delta().iter().all(|&v| v == 0.0));
        }
        assert_eq!(attach_lora(&net, 8, 16.0, 3).unwrap(), l);
    }

    #[test]
    fn bad_ranks_rejected() {
        let net = VelocityNet::new(Architecture::default(), 1);
        assert!(matches!(attach_lora(&net, 0, 16.0, 3), Err(NetError::ZeroRank)));
        let err = attach_lora(&net, 65, 16.0, 3).unwrap_err();
        assert!(err.to_string().contains("output"), "{err}");
    }

    #[test]
    fn mismatched_adapter_rejected() {
        let small = Architecture {
            hidden: 32,
            ..Architecture::default()
        };
        let net = VelocityNet::new(Architecture::default(), 1);
        let other = VelocityNet::new(small, 1);
        let l = attach_lora(&other, 4, 8.0, 1).unwrap();
        let err = net.forward(Some(&l), &random_batch(1, 1)).unwrap_err();
        assert!(matches!(err, NetError::AdapterMismatch { layer: "hidden1", .. }), "{err}");
    }

    #[test]
    fn fresh_adapter_is_exactly_neutral() {
        let net = VelocityNet::new(Architecture::default(), 7);
        let l = attach_lora(&net, 8, 16.0, 9).unwrap();
        let mut zero_alpha = attach_lora(&net, 8, 0.0, 9).unwrap();
        // non-zero B but α = 0
        for t in zero_alpha.tensors_mut().into_iter().skip(1).step_by(2) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.5);
        }
        for s in 0..100 {
            let b = random_batch(100 + s, 1);
            let base = net.forward(None, &b).unwrap();
            assert_eq!(net.forward(Some(&l), &b).unwrap(), base);
            assert_eq!(net.forward(Some(&zero_alpha), &b).unwrap(), base);
        }
    }

    #[test]
    fn tape_and_plain_routes_agree_bitwise() {
        let net = VelocityNet::new(Architecture::default(), 4);
        let mut l = attach_lora(&net, 8, 16.0, 5).unwrap();
        let mut rng = seeds::rng(6);
        for t in l.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let b = random_batch(8, 5);
        for lora in [None, Some(&l)] {
            let plain = net.forward(lora, &b).unwrap();
            let mut tape = Tape::new();
            let (out, _) = net.forward_tape(&mut tape, lora, Trainable::Nothing, &b).unwrap();
            assert_eq!(tape.value(out).data(), plain.as_slice());
        }
    }

    #[test]
    fn b_perturbation_matches_first_order_prediction() {
        // Nudge one entry of B on the output layer: the output row j moves by
        // (α/r)·ε·(A·h)[k] where h is the input to that layer.
        let net = VelocityNet::new(Architecture::default(), 4);
        let base_lora = attach_lora(&net, 8, 16.0, 5).unwrap();
        let b = random_batch(12, 1);
        let (j, k, eps) = (10, 3, 1e-3);

        // hidden activation feeding the output layer
        let cemb = linear_plain(&b.cond, 1, net.layer(LayerId::CondEmbed), None);
        let mut input = b.z.clone();
        input.extend(time_embedding(b.t[0], TIME_FREQS));
        input.extend(cemb);
        let mut h1 = linear_plain(&input, 1, net.layer(LayerId::Hidden1), None);
        h1.iter_mut().for_each(|v| *v = silu(*v));
        let mut h2 = linear_plain(&h1, 1, net.layer(LayerId::Hidden2), None);
        h2.iter_mut().for_each(|v| *v = silu(*v));
        let a = base_lora.adapter(LayerId::Output).a.data();
        let ah: f64 = (0..128).map(|c| a[k * 128 + c] * h2[c]).sum();
        let predicted = 16.0 / 8.0 * eps * ah;

        let mut nudged = base_lora.clone();
        let idx = LayerId::Output.index() * 2 + 1;
        nudged.tensors_mut()[idx].data_mut()[j * 8 + k] = eps;
        let before = net.forward(Some(&base_lora), &b).unwrap();
        let after = net.forward(Some(&nudged), &b).unwrap();
        assert!((after[j] - before[j] - predicted).abs() < 1e-12);
        for (i, (x, y)) in before.iter().zip(&after).enumerate() {
            if i != j {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn time_outside_unit_interval_rejected() {
        let net = VelocityNet::new(Architecture::default(), 1);
        let mut b = random_batch(1, 1);
        b.t[0] = 1.0;
        assert!(matches!(net.forward(None, &b), Err(NetError::TimeRange(_))));
    }

    #[test]
    fn params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let net = VelocityNet::new(Architecture::default(), 3);
        let mut m = attach_lora(&net, 8, 16.0, 4).unwrap();
        let mut rng = seeds::rng(1);
        for t in m.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-1.0..1.0) * 1e-3);
        }
        let model = Model {
            net: net.clone(),
            experts: Experts::Gated(LoraPair {
                motion: Some(m),
                fidelity: None,
                schedule: SegmentSchedule::new(0.2).unwrap(),
            }),
        };
        serialize_params(&model, &path).unwrap();
        let back = load_params(&path, &Architecture::default()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn truncated_or_mismatched_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let model = Model::base(VelocityNet::new(Architecture::default(), 3));
        serialize_params(&model, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_params(&path, &Architecture::default()), Err(NetError::Parse(_))));

        std::fs::write(&path, &text).unwrap();
        let wrong = Architecture {
            hidden: 64,
            ..Architecture::default()
        };
        let err = load_params(&path, &wrong).unwrap_err();
        match err {
            NetError::ShapeMismatch { field, .. } => assert_eq!(field, "hidden1.weight"),
            other => panic!("unexpected {other}"),
        }
    }
}
