//! Elastic inverted-residual supernet.
//!
//! Parameters are stored once at their maximal shapes. A subnet is a
//! [`SubnetView`] over that storage: depth keeps the first blocks of every
//! stage, width keeps leading channels, and kernel size takes the centered
//! crop of the stored maximal kernel. Forward passes materialize the
//! selected slices into a per-step graph and gradients are scattered back
//! into the same storage, so every subnet trains the shared weights.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{OqatError, Result};
use crate::numerics::{argmax_rows, Gradients, Graph, NodeId, Tensor};
use crate::quantizer::{init_step_size, lsq_grad_scale, QRange, StepSharingScheme};
use crate::space::{ArchSpec, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Stem,
    Expand,
    Depthwise,
    Project,
    Head,
    Classifier,
}

#[derive(Debug, Clone)]
pub struct LayerDef {
    pub name: String,
    pub kind: LayerKind,
    pub stage: Option<usize>,
    pub block: Option<usize>,
    pub weight: usize,
    pub bias: Option<usize>,
    pub bn: Option<(usize, usize)>,
    /// Position among quantized layers; `None` for the unquantized first
    /// conv and last linear layer.
    pub qindex: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// Quantization settings of a supernet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// `false` trains a floating-point supernet.
    pub enabled: bool,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub scheme: StepSharingScheme,
    /// Scale step gradients by `1 / sqrt(N * q_max)`.
    pub lsq_grad_scale: bool,
}

impl QuantConfig {
    pub fn bits(bits: u32) -> Self {
        Self { enabled: true, weight_bits: bits, act_bits: bits, scheme: StepSharingScheme::PerLayer, lsq_grad_scale: true }
    }

    pub fn float() -> Self {
        Self { enabled: false, ..Self::bits(32) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled {
            for b in [self.weight_bits, self.act_bits] {
                if !(2..=16).contains(&b) {
                    return Err(OqatError::Config(format!("bit width must be in 2..=16, got {b}")));
                }
            }
        }
        Ok(())
    }

    /// Label used in reports: `fp` or the bit width (`w/a` when they differ).
    pub fn label(&self) -> String {
        if !self.enabled {
            "fp".into()
        } else if self.weight_bits == self.act_bits {
            self.weight_bits.to_string()
        } else {
            format!("{}/{}", self.weight_bits, self.act_bits)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StepKind {
    Weight,
    Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StepVariant {
    Shared,
    Kernel(usize),
    Subnet(String),
}

/// Identifies one learned step size.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StepKey {
    /// Index among quantized layers.
    pub qlayer: usize,
    pub kind: StepKind,
    pub variant: StepVariant,
}

impl fmt::Display for StepKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            StepKind::Weight => "w",
            StepKind::Activation => "a",
        };
        let variant = match &self.variant {
            StepVariant::Shared => "shared".to_string(),
            StepVariant::Kernel(k) => format!("k{k}"),
            StepVariant::Subnet(a) => format!("arch:{a}"),
        };
        write!(f, "{}/{}/{}", self.qlayer, kind, variant)
    }
}

impl std::str::FromStr for StepKey {
    type Err = OqatError;

    fn from_str(s: &str) -> Result<Self> {
        let err = || OqatError::Invalid(format!("malformed step key `{s}`"));
        let mut it = s.splitn(3, '/');
        let qlayer = it.next().and_then(|v| v.parse().ok()).ok_or_else(err)?;
        let kind = match it.next() {
            Some("w") => StepKind::Weight,
            Some("a") => StepKind::Activation,
            _ => return Err(err()),
        };
        let v = it.next().ok_or_else(err)?;
        let variant = if v == "shared" {
            StepVariant::Shared
        } else if let Some(a) = v.strip_prefix("arch:") {
            StepVariant::Subnet(a.to_string())
        } else if let Some(k) = v.strip_prefix('k') {
            StepVariant::Kernel(k.parse().map_err(|_| err())?)
        } else {
            return Err(err());
        };
        Ok(Self { qlayer, kind, variant })
    }
}

/// BatchNorm running statistics are kept per layer and per number of
/// active blocks preceding it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BnKey {
    pub layer: usize,
    pub preceding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

pub type BnStats = BTreeMap<BnKey, RunningStats>;

/// Which BatchNorm statistics a forward pass normalizes with.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Batch statistics (training and calibration).
    Batch,
    /// Fixed running statistics.
    Running(&'a BnStats),
}

/// Slice of a stored parameter: leading `out` rows, leading `inp` columns and
/// the centered `kernel x kernel` window. Lower-rank parameters ignore the
/// trailing fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlice {
    pub param: usize,
    pub out: usize,
    pub inp: usize,
    pub kernel: usize,
}

/// Read-only window into supernet storage; no values are copied.
#[derive(Debug, Clone, Copy)]
pub struct WeightView<'a> {
    stored: &'a Tensor<f32>,
    slice: ParamSlice,
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    let mut d = [1; 4];
    d[..shape.len()].copy_from_slice(shape);
    d
}

impl<'a> WeightView<'a> {
    pub fn shape(&self) -> Vec<usize> {
        match self.stored.shape().len() {
            1 => vec![self.slice.out],
            2 => vec![self.slice.out, self.slice.inp],
            _ => vec![self.slice.out, self.slice.inp, self.slice.kernel, self.slice.kernel],
        }
    }

    /// Flat index into the stored tensor of view element `(o, i, y, x)`.
    pub fn storage_index(&self, o: usize, i: usize, y: usize, x: usize) -> usize {
        let [_, si, sk, _] = dims4(self.stored.shape());
        let off = (sk - self.slice.kernel) / 2;
        ((o * si + i) * sk + y + off) * sk + x + off
    }

    pub fn get(&self, o: usize, i: usize, y: usize, x: usize) -> f32 {
        self.stored.data()[self.storage_index(o, i, y, x)]
    }

    pub fn storage(&self) -> &'a Tensor<f32> {
        self.stored
    }

    /// Materialize the window as a dense tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let k = self.slice.kernel;
        let mut out = Vec::with_capacity(self.slice.out * self.slice.inp * k * k);
        for o in 0..self.slice.out {
            for i in 0..self.slice.inp {
                for y in 0..k {
                    let start = self.storage_index(o, i, y, 0);
                    out.extend_from_slice(&self.stored.data()[start..start + k]);
                }
            }
        }
        Tensor::new(self.shape(), out).expect("slice shape")
    }

    fn scatter_add(slice: &ParamSlice, stored_shape: &[usize], dst: &mut [f32], grad: &[f32]) {
        let [_, si, sk, _] = dims4(stored_shape);
        let k = slice.kernel;
        let off = (sk - k) / 2;
        let mut at = 0;
        for o in 0..slice.out {
            for i in 0..slice.inp {
                for y in 0..k {
                    let start = ((o * si + i) * sk + y + off) * sk + off;
                    for (d, &g) in dst[start..start + k].iter_mut().zip(&grad[at..at + k]) {
                        *d += g;
                    }
                    at += k;
                }
            }
        }
    }
}

/// One layer as realized by a particular architecture.
#[derive(Debug, Clone, Copy)]
struct ActiveLayer {
    layer: usize,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
}

/// Graph of one forward pass plus the bindings needed to route gradients
/// and statistics back into the supernet.
pub struct ForwardPass {
    pub graph: Graph<f32>,
    pub logits: NodeId,
    weight_bindings: Vec<(NodeId, ParamSlice)>,
    step_bindings: Vec<(NodeId, StepKey)>,
    bn_nodes: Vec<(BnKey, NodeId)>,
    /// Input of every quantized layer, pre-quantization, with its weight slice.
    qinputs: Vec<(usize, NodeId, NodeId)>,
    pub missing_bn: usize,
}

impl ForwardPass {
    /// Batch statistics of every BatchNorm (training-mode passes only).
    pub fn batch_stats(&self) -> Vec<(BnKey, Vec<f32>, Vec<f32>)> {
        self.bn_nodes
            .iter()
            .filter_map(|(k, n)| self.graph.batch_stats(*n).map(|(m, v)| (*k, m.to_vec(), v.to_vec())))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Supernet {
    space: SearchSpace,
    quant: QuantConfig,
    layers: Vec<LayerDef>,
    params: Vec<Param>,
    steps: BTreeMap<StepKey, Tensor<f32>>,
    bn_stats: BnStats,
}

impl Supernet {
    /// Fresh supernet with seeded initialization. Activation step sizes are
    /// set later by [`Supernet::prepare_steps`].
    pub fn new(space: SearchSpace, quant: QuantConfig, seed: u64) -> Result<Self> {
        space.validate()?;
        quant.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Param> = Vec::new();
        let mut layers: Vec<LayerDef> = Vec::new();
        let mut qcount = 0;

        let add_param = |params: &mut Vec<Param>, name: String, shape: Vec<usize>, init: Init, rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Const(v) => vec![v; n],
                Init::Normal(std) => {
                    let d = Normal::new(0.0f32, std).expect("valid std");
                    (0..n).map(|_| d.sample(rng)).collect()
                }
            };
            params.push(Param { name, tensor: Tensor::new(shape, data).expect("shape") });
            params.len() - 1
        };

        let mut push_conv = |params: &mut Vec<Param>,
                             layers: &mut Vec<LayerDef>,
                             rng: &mut ChaCha8Rng,
                             name: String,
                             kind: LayerKind,
                             pos: (Option<usize>, Option<usize>),
                             shape: [usize; 4],
                             quantized: bool| {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
            let w = add_param(params, format!("{name}.weight"), shape.to_vec(), Init::Normal((2.0 / fan_in).sqrt()), rng);
            let g = add_param(params, format!("{name}.bn.gamma"), vec![shape[0]], Init::Const(1.0), rng);
            let b = add_param(params, format!("{name}.bn.beta"), vec![shape[0]], Init::Const(0.0), rng);
            let qindex = quantized.then(|| {
                qcount += 1;
                qcount - 1
            });
            layers.push(LayerDef { name, kind, stage: pos.0, block: pos.1, weight: w, bias: None, bn: Some((g, b)), qindex });
        };

        let kmax_stem = 3;
        push_conv(
            &mut params,
            &mut layers,
            &mut rng,
            "stem".into(),
            LayerKind::Stem,
            (None, None),
            [space.stem_channels, space.in_channels, kmax_stem, kmax_stem],
            false,
        );
        let mut in_max = space.stem_channels;
        for (s, st) in space.stages.iter().enumerate() {
            for b in 0..st.max_depth {
                let hidden = in_max * space.expand_ratio;
                let base = format!("stages.{s}.blocks.{b}");
                let pos = (Some(s), Some(b));
                push_conv(&mut params, &mut layers, &mut rng, format!("{base}.expand"), LayerKind::Expand, pos, [hidden, in_max, 1, 1], true);
                let k = st.max_kernel();
                push_conv(&mut params, &mut layers, &mut rng, format!("{base}.depthwise"), LayerKind::Depthwise, pos, [hidden, 1, k, k], true);
                push_conv(&mut params, &mut layers, &mut rng, format!("{base}.project"), LayerKind::Project, pos, [st.max_width(), hidden, 1, 1], true);
                in_max = st.max_width();
            }
        }
        push_conv(&mut params, &mut layers, &mut rng, "head".into(), LayerKind::Head, (None, None), [space.head_channels, in_max, 1, 1], true);

        let fan_in = space.head_channels as f32;
        let w = add_param(&mut params, "classifier.weight".into(), vec![space.num_classes, space.head_channels], Init::Normal((1.0 / fan_in).sqrt()), &mut rng);
        let b = add_param(&mut params, "classifier.bias".into(), vec![space.num_classes], Init::Const(0.0), &mut rng);
        layers.push(LayerDef {
            name: "classifier".into(),
            kind: LayerKind::Classifier,
            stage: None,
            block: None,
            weight: w,
            bias: Some(b),
            bn: None,
            qindex: None,
        });

        Ok(Self { space, quant, layers, params, steps: BTreeMap::new(), bn_stats: BTreeMap::new() })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    /// Copy sharing the same weights whose elastic choices are narrowed to
    /// `space`, e.g. for searching a small subspace exhaustively.
    pub fn restricted(&self, space: SearchSpace) -> Result<Supernet> {
        space.validate()?;
        if !space.is_restriction_of(&self.space) {
            return Err(OqatError::Config("space is not a restriction of the supernet space".into()));
        }
        Ok(Supernet { space, ..self.clone() })
    }

    pub fn quant(&self) -> &QuantConfig {
        &self.quant
    }

    pub fn set_quant(&mut self, quant: QuantConfig) -> Result<()> {
        quant.validate()?;
        self.quant = quant;
        Ok(())
    }

    pub fn layers(&self) -> &[LayerDef] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn steps(&self) -> &BTreeMap<StepKey, Tensor<f32>> {
        &self.steps
    }

    pub fn steps_mut(&mut self) -> &mut BTreeMap<StepKey, Tensor<f32>> {
        &mut self.steps
    }

    pub fn step(&self, key: &StepKey) -> Option<f32> {
        self.steps.get(key).map(Tensor::item)
    }

    pub fn bn_stats(&self) -> &BnStats {
        &self.bn_stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut BnStats {
        &mut self.bn_stats
    }

    pub fn quantized_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.qindex.is_some()).count()
    }

    /// Layer holding quantized index `q`.
    pub fn quantized_layer(&self, q: usize) -> &LayerDef {
        self.layers.iter().find(|l| l.qindex == Some(q)).expect("quantized layer index")
    }

    fn layer_index(&self, kind: LayerKind, stage: Option<usize>, block: Option<usize>) -> usize {
        self.layers
            .iter()
            .position(|l| l.kind == kind && l.stage == stage && l.block == block)
            .expect("layer exists")
    }

    /// View of `arch` over this supernet's storage.
    pub fn select(&self, arch: &ArchSpec) -> Result<SubnetView<'_>> {
        self.space.check(arch)?;
        Ok(SubnetView { net: self, arch: arch.clone() })
    }

    pub fn max_view(&self) -> SubnetView<'_> {
        SubnetView { net: self, arch: self.space.max_arch() }
    }

    /// Layers realized by `arch`, in execution order (classifier excluded),
    /// with the BatchNorm key each one uses.
    fn active_layers(&self, arch: &ArchSpec) -> Vec<(ActiveLayer, BnKey)> {
        let sp = &self.space;
        let mut out = Vec::new();
        let stem = self.layer_index(LayerKind::Stem, None, None);
        out.push((
            ActiveLayer { layer: stem, in_ch: sp.in_channels, out_ch: sp.stem_channels, kernel: 3, stride: sp.stem_stride, groups: 1 },
            BnKey { layer: stem, preceding: 0 },
        ));
        let mut in_w = sp.stem_channels;
        let mut preceding = 0;
        for (s, st) in sp.stages.iter().enumerate() {
            for j in 0..arch.depths[s] {
                let out_w = arch.widths[s][j];
                let k = arch.kernels[s][j];
                let stride = if j == 0 { st.stride } else { 1 };
                let hidden = in_w * sp.expand_ratio;
                let pos = (Some(s), Some(j));
                let e = self.layer_index(LayerKind::Expand, pos.0, pos.1);
                let d = self.layer_index(LayerKind::Depthwise, pos.0, pos.1);
                let p = self.layer_index(LayerKind::Project, pos.0, pos.1);
                out.push((ActiveLayer { layer: e, in_ch: in_w, out_ch: hidden, kernel: 1, stride: 1, groups: 1 }, BnKey { layer: e, preceding }));
                out.push((ActiveLayer { layer: d, in_ch: hidden, out_ch: hidden, kernel: k, stride, groups: hidden }, BnKey { layer: d, preceding }));
                out.push((ActiveLayer { layer: p, in_ch: hidden, out_ch: out_w, kernel: 1, stride: 1, groups: 1 }, BnKey { layer: p, preceding }));
                in_w = out_w;
                preceding += 1;
            }
        }
        let head = self.layer_index(LayerKind::Head, None, None);
        out.push((
            ActiveLayer { layer: head, in_ch: in_w, out_ch: sp.head_channels, kernel: 1, stride: 1, groups: 1 },
            BnKey { layer: head, preceding },
        ));
        out
    }

    fn weight_slice(&self, al: &ActiveLayer) -> ParamSlice {
        let l = &self.layers[al.layer];
        ParamSlice { param: l.weight, out: al.out_ch, inp: al.in_ch / al.groups, kernel: al.kernel }
    }

    pub fn weight_view(&self, slice: ParamSlice) -> WeightView<'_> {
        WeightView { stored: &self.params[slice.param].tensor, slice }
    }

    /// Step-size key used by quantized layer `q` of `arch` under the
    /// configured sharing scheme.
    pub fn step_key(&self, q: usize, kind: StepKind, arch: &ArchSpec, kernel: usize) -> StepKey {
        let layer = self.quantized_layer(q);
        let variant = match self.quant.scheme {
            StepSharingScheme::PerLayer => StepVariant::Shared,
            StepSharingScheme::SwitchablePerChoice if layer.kind == LayerKind::Depthwise => StepVariant::Kernel(kernel),
            StepSharingScheme::SwitchablePerChoice => StepVariant::Shared,
            StepSharingScheme::PerSubnet => StepVariant::Subnet(arch.compact()),
        };
        StepKey { qlayer: q, kind, variant }
    }

    /// Build the forward graph of `arch` on `images`.
    pub fn forward(&self, arch: &ArchSpec, images: Tensor<f32>, bn: BnMode<'_>) -> Result<ForwardPass> {
        self.forward_with(arch, images, bn, self.quant.enabled)
    }

    fn forward_with(&self, arch: &ArchSpec, images: Tensor<f32>, bn: BnMode<'_>, quantize: bool) -> Result<ForwardPass> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.space.in_channels || s[2] != arch.resolution || s[3] != arch.resolution {
            return Err(OqatError::Shape(format!(
                "input {:?} does not match {} channels at resolution {}",
                s, self.space.in_channels, arch.resolution
            )));
        }
        let mut g = Graph::new();
        let mut weight_bindings = Vec::new();
        let mut step_bindings = Vec::new();
        let mut bn_nodes = Vec::new();
        let mut qinputs = Vec::new();
        let mut missing_bn = 0;
        let mut x = g.input(images);
        let mut block_input: Option<NodeId> = None;

        let active = self.active_layers(arch);
        for (al, key) in &active {
            let layer = &self.layers[al.layer];
            if layer.kind == LayerKind::Expand {
                block_input = Some(x);
            }
            let slice = self.weight_slice(al);
            let w = g.param(self.weight_view(slice).to_tensor());
            weight_bindings.push((w, slice));
            let (mut xin, mut win) = (x, w);
            if let Some(q) = layer.qindex {
                qinputs.push((q, x, w));
                if quantize {
                    let wkey = self.step_key(q, StepKind::Weight, arch, al.kernel);
                    let akey = self.step_key(q, StepKind::Activation, arch, al.kernel);
                    let ws = self.steps.get(&wkey).ok_or_else(|| OqatError::Quant(format!("step size {wkey} not initialized")))?;
                    let as_ = self.steps.get(&akey).ok_or_else(|| OqatError::Quant(format!("step size {akey} not initialized")))?;
                    let wr = QRange::signed(self.quant.weight_bits);
                    let ar = QRange::unsigned(self.quant.act_bits);
                    let wn = g.param(ws.clone());
                    let an = g.param(as_.clone());
                    step_bindings.push((wn, wkey));
                    step_bindings.push((an, akey));
                    let scale = |n: usize, r: QRange| if self.quant.lsq_grad_scale { lsq_grad_scale(n, r) as f32 } else { 1.0 };
                    let a_scale = scale(g.value(x).numel(), ar);
                    let w_scale = scale(g.value(w).numel(), wr);
                    xin = g.fake_quant(x, an, ar, a_scale)?;
                    win = g.fake_quant(w, wn, wr, w_scale)?;
                }
            }
            let mut h = g.conv2d(xin, win, al.stride, al.kernel / 2, al.groups)?;
            let (gi, bi) = layer.bn.expect("conv layers carry BatchNorm");
            let bn_slice = |p| ParamSlice { param: p, out: al.out_ch, inp: 1, kernel: 1 };
            let gamma = g.param(self.weight_view(bn_slice(gi)).to_tensor());
            let beta = g.param(self.weight_view(bn_slice(bi)).to_tensor());
            weight_bindings.push((gamma, bn_slice(gi)));
            weight_bindings.push((beta, bn_slice(bi)));
            h = match bn {
                BnMode::Batch => g.batchnorm_train(h, gamma, beta)?,
                BnMode::Running(stats) => {
                    let (m, v) = match stats.get(key) {
                        Some(st) if st.mean.len() >= al.out_ch => (st.mean[..al.out_ch].to_vec(), st.var[..al.out_ch].to_vec()),
                        _ => {
                            missing_bn += 1;
                            (vec![0.0; al.out_ch], vec![1.0; al.out_ch])
                        }
                    };
                    g.batchnorm_eval(h, gamma, beta, &m, &v)?
                }
            };
            bn_nodes.push((*key, h));
            if layer.kind != LayerKind::Project {
                h = g.relu(h);
            } else if let Some(inp) = block_input.take() {
                // identity shortcut only when stride and width are preserved
                if g.value(inp).shape() == g.value(h).shape() {
                    h = g.add(h, inp)?;
                }
            }
            x = h;
        }

        let pooled = g.global_avg_pool(x)?;
        let cls = self.layers.last().expect("classifier");
        let wt = &self.params[cls.weight].tensor;
        let w = g.param(wt.clone());
        let full = |p: usize, t: &Tensor<f32>| ParamSlice { param: p, out: t.dim(0), inp: t.shape().get(1).copied().unwrap_or(1), kernel: 1 };
        weight_bindings.push((w, full(cls.weight, wt)));
        let bias_idx = cls.bias.expect("classifier bias");
        let bt = &self.params[bias_idx].tensor;
        let b = g.param(bt.clone());
        weight_bindings.push((b, full(bias_idx, bt)));
        let logits = g.linear(pooled, w, Some(b))?;

        Ok(ForwardPass { graph: g, logits, weight_bindings, step_bindings, bn_nodes, qinputs, missing_bn })
    }

    /// Add the gradients of a backward pass into the shared storage.
    pub fn accumulate_grads(&mut self, pass: &ForwardPass, grads: &Gradients<f32>) {
        for (node, slice) in &pass.weight_bindings {
            if let Some(g) = grads.get(*node) {
                let t = &mut self.params[slice.param].tensor;
                let shape = t.shape().to_vec();
                WeightView::scatter_add(slice, &shape, t.grad_mut(), g);
            }
        }
        for (node, key) in &pass.step_bindings {
            if let (Some(g), Some(t)) = (grads.get(*node), self.steps.get_mut(key)) {
                t.grad_mut()[0] += g[0];
            }
        }
    }

    /// Blend the batch statistics of a training pass into the stored running
    /// statistics (leading channels only).
    fn stored_stats(&mut self, key: BnKey) -> &mut RunningStats {
        let max_ch = self.params[self.layers[key.layer].bn.unwrap().0].tensor.numel();
        self.bn_stats.entry(key).or_insert_with(|| RunningStats { mean: vec![0.0; max_ch], var: vec![1.0; max_ch] })
    }

    /// Overwrite the leading channels of the stored statistics with `stats`.
    pub fn store_bn_stats(&mut self, stats: &BnStats) {
        for (key, st) in stats {
            let entry = self.stored_stats(*key);
            entry.mean[..st.mean.len()].copy_from_slice(&st.mean);
            entry.var[..st.var.len()].copy_from_slice(&st.var);
        }
    }

    pub fn update_running_stats(&mut self, pass: &ForwardPass, momentum: f32) {
        for (key, mean, var) in pass.batch_stats() {
            let st = self.stored_stats(key);
            for (r, b) in st.mean.iter_mut().zip(&mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in st.var.iter_mut().zip(&var) {
                *r = ((1.0 - momentum) * *r + momentum * b).max(0.0);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
        self.steps.values_mut().for_each(Tensor::zero_grad);
    }

    /// Step keys `arch` reads under the current scheme.
    pub fn required_steps(&self, arch: &ArchSpec) -> Vec<(StepKey, ParamSlice)> {
        let mut out = Vec::new();
        for (al, _) in self.active_layers(arch) {
            if let Some(q) = self.layers[al.layer].qindex {
                let slice = self.weight_slice(&al);
                out.push((self.step_key(q, StepKind::Weight, arch, al.kernel), slice));
                out.push((self.step_key(q, StepKind::Activation, arch, al.kernel), slice));
            }
        }
        out
    }

    /// Initialize every step size `arch` needs that does not exist yet.
    /// Weight steps come from the sliced weights, activation steps from a
    /// floating-point pass over `images`.
    pub fn prepare_steps(&mut self, arch: &ArchSpec, images: &Tensor<f32>) -> Result<usize> {
        if !self.quant.enabled {
            return Ok(0);
        }
        let missing: Vec<(StepKey, ParamSlice)> =
            self.required_steps(arch).into_iter().filter(|(k, _)| !self.steps.contains_key(k)).collect();
        if missing.is_empty() {
            return Ok(0);
        }
        let act_means = self.observe_activations(arch, std::slice::from_ref(images))?;
        let wr = QRange::signed(self.quant.weight_bits);
        let ar = QRange::unsigned(self.quant.act_bits);
        for (key, slice) in &missing {
            let s = match key.kind {
                StepKind::Weight => init_step_size(self.weight_view(*slice).to_tensor().data(), wr),
                StepKind::Activation => init_from_mean(act_means[&key.qlayer], ar),
            };
            self.steps.insert(key.clone(), Tensor::scalar(s));
        }
        Ok(missing.len())
    }

    /// Mean absolute input of every quantized layer of `arch` over `batches`,
    /// measured in floating point with batch statistics.
    pub fn observe_activations(&self, arch: &ArchSpec, batches: &[Tensor<f32>]) -> Result<BTreeMap<usize, f64>> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for images in batches {
            let pass = self.forward_with(arch, images.clone(), BnMode::Batch, false)?;
            for (q, x, _) in &pass.qinputs {
                let v = pass.graph.value(*x).data();
                let e = sums.entry(*q).or_insert((0.0, 0));
                e.0 += v.iter().map(|a| a.abs() as f64).sum::<f64>();
                e.1 += v.len();
            }
        }
        Ok(sums.into_iter().map(|(q, (s, n))| (q, s / n.max(1) as f64)).collect())
    }

    /// Quantized layers of `arch`: `(qindex, weight slice)`.
    pub fn quantized_slices(&self, arch: &ArchSpec) -> Vec<(usize, ParamSlice)> {
        self.active_layers(arch)
            .into_iter()
            .filter_map(|(al, _)| self.layers[al.layer].qindex.map(|q| (q, self.weight_slice(&al))))
            .collect()
    }
}

pub(crate) fn init_from_mean(mean_abs: f64, range: QRange) -> f32 {
    if mean_abs == 0.0 {
        crate::quantizer::STEP_FLOOR
    } else {
        (2.0 * mean_abs / (range.max as f64).sqrt()) as f32
    }
}

enum Init {
    Const(f32),
    Normal(f32),
}

/// Evaluation result of one subnet on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub warnings: Vec<String>,
}

/// Executable subnet: an architecture read through supernet storage.
#[derive(Debug, Clone)]
pub struct SubnetView<'a> {
    net: &'a Supernet,
    arch: ArchSpec,
}

impl<'a> SubnetView<'a> {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn supernet(&self) -> &'a Supernet {
        self.net
    }

    /// Narrow this view to `arch`, which must not exceed it in any dimension.
    pub fn select(&self, arch: &ArchSpec) -> Result<SubnetView<'a>> {
        self.net.space.check(arch)?;
        let bad = |field: String| Err(OqatError::ArchOutOfSpace { field, detail: format!("exceeds parent view {}", self.arch) });
        for s in 0..arch.depths.len() {
            if arch.depths[s] > self.arch.depths[s] {
                return bad(format!("depths[{s}]"));
            }
            for j in 0..arch.depths[s] {
                if arch.widths[s][j] > self.arch.widths[s][j] {
                    return bad(format!("widths[{s}][{j}]"));
                }
                if arch.kernels[s][j] > self.arch.kernels[s][j] {
                    return bad(format!("kernels[{s}][{j}]"));
                }
            }
        }
        if arch.resolution > self.arch.resolution {
            return bad("resolution".into());
        }
        Ok(SubnetView { net: self.net, arch: arch.clone() })
    }

    /// Weight windows of every active conv layer in execution order,
    /// followed by the classifier weight.
    pub fn weights(&self) -> Vec<(String, WeightView<'a>)> {
        let mut out: Vec<(String, WeightView<'a>)> = self
            .net
            .active_layers(&self.arch)
            .into_iter()
            .map(|(al, _)| (self.net.layers[al.layer].name.clone(), self.net.weight_view(self.net.weight_slice(&al))))
            .collect();
        let cls = self.net.layers.last().unwrap();
        let t = &self.net.params[cls.weight].tensor;
        out.push((
            cls.name.clone(),
            WeightView { stored: t, slice: ParamSlice { param: cls.weight, out: t.dim(0), inp: t.dim(1), kernel: 1 } },
        ));
        out
    }

    /// Logits in eval mode with the given BatchNorm statistics.
    pub fn logits(&self, images: Tensor<f32>, bn: &BnStats) -> Result<(Tensor<f32>, usize)> {
        let pass = self.net.forward(&self.arch, images, BnMode::Running(bn))?;
        Ok((pass.graph.value(pass.logits).clone(), pass.missing_bn))
    }

    /// Recompute BatchNorm statistics from forward passes over `batches`:
    /// the plain average of per-batch means and variances.
    pub fn calibrate_bn(&self, batches: &[Tensor<f32>]) -> Result<BnStats> {
        if batches.is_empty() {
            return Err(OqatError::Invalid("calibration needs at least one batch".into()));
        }
        let mut acc: BTreeMap<BnKey, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for images in batches {
            let pass = self.net.forward(&self.arch, images.clone(), BnMode::Batch)?;
            for (key, m, v) in pass.batch_stats() {
                let e = acc.entry(key).or_insert_with(|| (vec![0.0; m.len()], vec![0.0; v.len()]));
                e.0.iter_mut().zip(&m).for_each(|(a, &b)| *a += b as f64);
                e.1.iter_mut().zip(&v).for_each(|(a, &b)| *a += b as f64);
            }
        }
        let n = batches.len() as f64;
        Ok(acc
            .into_iter()
            .map(|(k, (m, v))| {
                (k, RunningStats { mean: m.iter().map(|x| (x / n) as f32).collect(), var: v.iter().map(|x| (x / n) as f32).collect() })
            })
            .collect())
    }

    /// Calibration batches of `split` at this view's resolution.
    pub fn calibration_batches(&self, split: &Split, batch_size: usize, max_batches: usize) -> Result<Vec<Tensor<f32>>> {
        split
            .chunks(batch_size)
            .into_iter()
            .take(max_batches.max(1))
            .map(|idx| split.batch(&idx, self.arch.resolution).map(|(t, _)| t))
            .collect()
    }

    /// Top-1 accuracy over `split`. `bn = None` evaluates with the running
    /// statistics stored in the supernet and records a warning.
    pub fn evaluate(&self, split: &Split, bn: Option<&BnStats>, batch_size: usize) -> Result<EvalOutcome> {
        let mut warnings = Vec::new();
        let stats = match bn {
            Some(s) => s,
            None => {
                warnings.push("uncalibrated: evaluated with supernet running statistics".to_string());
                &self.net.bn_stats
            }
        };
        let mut correct = 0;
        let mut missing = 0;
        for idx in split.chunks(batch_size) {
            let (images, labels) = split.batch(&idx, self.arch.resolution)?;
            let (logits, miss) = self.logits(images, stats)?;
            missing += miss;
            correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, y)| p == y).count();
        }
        if missing > 0 {
            warnings.push(format!("{missing} BatchNorm lookups fell back to identity statistics"));
        }
        let total = split.len();
        Ok(EvalOutcome { accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 }, correct, total, warnings })
    }

    /// Calibrate on `calib` then evaluate on `split`.
    pub fn calibrate_and_evaluate(&self, calib: &Split, split: &Split, batch_size: usize, calib_batches: usize) -> Result<EvalOutcome> {
        let batches = self.calibration_batches(calib, batch_size, calib_batches)?;
        let bn = self.calibrate_bn(&batches)?;
        self.evaluate(split, Some(&bn), batch_size)
    }
}
