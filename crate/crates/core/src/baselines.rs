//! Adaptation methods over the shared frozen encoder.
//!
//! Each method is a partition of the named parameters into trainable and
//! frozen, plus a readout:
//!
//! | method        | trainable                                   | readout          |
//! |---------------|---------------------------------------------|------------------|
//! | `linear`      | head                                        | `LN(Z^L_cls)`    |
//! | `mlp_k`       | k-layer MLP head                            | `LN(Z^L_cls)`    |
//! | `bias`        | every bias and LayerNorm shift, head        | `LN(Z^L_cls)`    |
//! | `partial_k`   | last k layers, final LN, head               | `LN(Z^L_cls)`    |
//! | `ft_all`      | everything                                  | `LN(Z^L_cls)`    |
//! | `vpt_shallow` | input prompts, head                         | `LN(Z^L_cls)`    |
//! | `vpt_deep`    | fresh prompts at every layer input, head    | `LN(Z^L_cls)`    |
//! | `expres`      | prompts, residual prompts, head             | `LN(mean(P^L))`  |

use crate::error::{Error, Result};
use crate::expres::{self, BankNodes, PromptBank, ResidualSiteConfig, Site};
use crate::format::Archive;
use crate::graph::{Graph, NodeId};
use crate::seed;
use crate::tensor::Tensor;
use crate::vit::{self, EncoderTrace, VitConfig, VitNodes, VitWeights};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Linear,
    MlpK,
    Bias,
    PartialK,
    FtAll,
    VptShallow,
    VptDeep,
    Expres,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Linear,
        Method::MlpK,
        Method::Bias,
        Method::PartialK,
        Method::FtAll,
        Method::VptShallow,
        Method::VptDeep,
        Method::Expres,
    ];

    pub fn uses_prompts(self) -> bool {
        matches!(self, Method::VptShallow | Method::VptDeep | Method::Expres)
    }

    pub fn uses_k(self) -> bool {
        matches!(self, Method::MlpK | Method::PartialK)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Linear => "linear",
            Method::MlpK => "mlp_k",
            Method::Bias => "bias",
            Method::PartialK => "partial_k",
            Method::FtAll => "ft_all",
            Method::VptShallow => "vpt_shallow",
            Method::VptDeep => "vpt_deep",
            Method::Expres => "expres",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_").to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::contract(format!("unknown adaptation method `{s}`")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which method to run and its knobs, as it appears in a run config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationSpec {
    pub method: Method,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<BTreeSet<Site>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_layer: Option<usize>,
    /// Propagation cutoff layer (EXPRES only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<usize>,
}

impl AdaptationSpec {
    pub fn new(method: Method) -> Self {
        AdaptationSpec { method, m: None, k: None, sites: None, start_layer: None, end_layer: None, cutoff: None }
    }

    pub fn with_m(mut self, m: usize) -> Self {
        self.m = Some(m);
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn with_sites(mut self, sites: impl IntoIterator<Item = Site>) -> Self {
        self.sites = Some(sites.into_iter().collect());
        self
    }

    pub fn with_layers(mut self, start: usize, end: usize) -> Self {
        self.start_layer = Some(start);
        self.end_layer = Some(end);
        self
    }

    pub fn with_cutoff(mut self, cutoff: Option<usize>) -> Self {
        self.cutoff = cutoff;
        self
    }

    /// Residual sites and layers; defaults to the MSA-block sites on every layer.
    pub fn site_config(&self, cfg: &VitConfig) -> ResidualSiteConfig {
        ResidualSiteConfig {
            sites: self.sites.clone().unwrap_or_else(|| Site::ATT.into()),
            start_layer: self.start_layer.unwrap_or(0),
            end_layer: self.end_layer.unwrap_or(cfg.layers.saturating_sub(1)),
        }
    }

    /// Copy with defaults written out.
    pub fn resolved(&self, cfg: &VitConfig) -> Self {
        let mut s = self.clone();
        if s.method == Method::Expres {
            let sc = self.site_config(cfg);
            s.sites = Some(sc.sites);
            s.start_layer = Some(sc.start_layer);
            s.end_layer = Some(sc.end_layer);
        }
        s
    }

    pub fn violations(&self, cfg: &VitConfig) -> Vec<String> {
        let mut v = Vec::new();
        if self.method.uses_prompts() {
            match self.m {
                Some(m) if m >= 1 => {}
                _ => v.push(format!("adaptation.M: {} requires M ≥ 1", self.method)),
            }
        }
        if self.method.uses_k() {
            match self.k {
                Some(k) if k >= 1 => {
                    if self.method == Method::PartialK && k > cfg.layers {
                        v.push(format!("adaptation.k: {k} exceeds L = {}", cfg.layers));
                    }
                }
                _ => v.push(format!("adaptation.k: {} requires k ≥ 1", self.method)),
            }
        }
        if self.method == Method::Expres {
            v.extend(self.site_config(cfg).violations(cfg.layers));
            if let Some(c) = self.cutoff {
                if c > cfg.layers {
                    v.push(format!("adaptation.cutoff: {c} outside [0, {}]", cfg.layers));
                }
            }
        } else {
            for (field, set) in [
                ("sites", self.sites.is_some()),
                ("start_layer", self.start_layer.is_some()),
                ("end_layer", self.end_layer.is_some()),
                ("cutoff", self.cutoff.is_some()),
            ] {
                if set {
                    v.push(format!("adaptation.{field}: only meaningful for expres"));
                }
            }
        }
        v
    }

    pub fn validate(&self, cfg: &VitConfig) -> Result<()> {
        let v = self.violations(cfg);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Whether the backbone tensor `name` is trained by this method.
    pub fn trains_backbone_tensor(&self, cfg: &VitConfig, name: &str) -> bool {
        match self.method {
            Method::FtAll => true,
            Method::Bias => vit::is_bias_name(name),
            Method::PartialK => {
                let k = self.k.unwrap_or(1);
                if name.starts_with("final_ln.") {
                    return true;
                }
                if let Some(rest) = name.strip_prefix("layer") {
                    let idx: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
                    return idx + k >= cfg.layers;
                }
                // Embeddings count as the bottom stage, tuned only when every layer is.
                k >= cfg.layers
            }
            _ => false,
        }
    }

    /// Names and extents of every adaptation-owned (non-backbone) tensor.
    pub fn extra_shapes(&self, cfg: &VitConfig, num_classes: usize) -> Vec<(String, Vec<usize>)> {
        let d = cfg.d;
        let m = self.m.unwrap_or(0);
        let mut out = Vec::new();
        if self.method == Method::MlpK {
            for i in 0..self.k.unwrap_or(1).saturating_sub(1) {
                out.push((format!("head.mlp{i}.W"), vec![d, d]));
                out.push((format!("head.mlp{i}.b"), vec![d]));
            }
        }
        out.push(("head.W".into(), vec![d, num_classes]));
        out.push(("head.b".into(), vec![num_classes]));
        match self.method {
            Method::VptShallow => out.push((expres::PROMPT_NAME.into(), vec![m, d])),
            Method::VptDeep => {
                for l in 0..cfg.layers {
                    out.push((vpt_deep_name(l), vec![m, d]));
                }
            }
            Method::Expres => {
                out.push((expres::PROMPT_NAME.into(), vec![m, d]));
                let sc = self.site_config(cfg);
                for l in sc.layers() {
                    for &s in &sc.sites {
                        out.push((expres::residual_name(l, s), vec![m, s.width(cfg)]));
                    }
                }
            }
            _ => {}
        }
        out
    }

    /// Every trainable tensor with its extents, enumerated from the layouts.
    pub fn trainable_shapes(&self, cfg: &VitConfig, num_classes: usize) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<_> = cfg
            .param_shapes()
            .into_iter()
            .filter(|(n, _)| self.trains_backbone_tensor(cfg, n))
            .collect();
        out.extend(self.extra_shapes(cfg, num_classes));
        out
    }
}

pub fn vpt_deep_name(layer: usize) -> String {
    format!("prompt.P{layer}")
}

/// Which last-layer patch representation feeds the dense head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseRepr {
    #[default]
    Keys,
    Queries,
    Mlp,
}

/// A frozen backbone plus the adaptation-owned tensors of one method.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: AdaptationSpec,
    pub weights: VitWeights,
    pub extras: Archive,
    pub num_classes: usize,
    trainable: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct HeadNodes {
    pub hidden: Vec<(NodeId, NodeId)>,
    pub w: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub vit: VitNodes,
    pub bank: Option<BankNodes>,
    pub deep_prompts: Vec<NodeId>,
    pub head: HeadNodes,
}

/// Builds the trainable partition and initial values for `spec`. Head
/// matrices and prompts are drawn from a truncated normal (std 0.02),
/// biases and residual prompts start at zero.
pub fn build_adaptation(spec: &AdaptationSpec, weights: VitWeights, num_classes: usize, seed: u64) -> Result<Model> {
    let cfg = weights.config().clone();
    if num_classes < 2 {
        return Err(Error::contract(format!("a head needs C ≥ 2 classes, got {num_classes}")));
    }
    spec.validate(&cfg)?;
    let spec = spec.resolved(&cfg);
    let mut rng = seed::rng_for(seed, &format!("adapt.{}", spec.method));
    let mut extras = Archive::new();
    if spec.method == Method::Expres {
        let bank = expres::init_prompts(
            &spec.site_config(&cfg),
            spec.m.unwrap_or(0),
            &cfg,
            seed::derive(seed, "adapt.prompts"),
        )?;
        extras.extend(bank.to_archive());
    }
    for (name, dims) in spec.extra_shapes(&cfg, num_classes) {
        if extras.contains_key(&name) {
            continue;
        }
        let t = if name.ends_with(".b") { Tensor::zeros(&dims) } else { Tensor::trunc_normal(&dims, 0.02, &mut rng) };
        extras.insert(name, t);
    }
    let trainable = spec.trainable_shapes(&cfg, num_classes).into_iter().map(|(n, _)| n).collect();
    Ok(Model { spec, weights, extras, num_classes, trainable })
}

impl Model {
    pub fn config(&self) -> &VitConfig {
        self.weights.config()
    }

    pub fn trainable_names(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.extras.get(name).or_else(|| self.weights.tensors().get(name))
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        if let Some(slot) = self.extras.get_mut(name) {
            if slot.dims() != t.dims() {
                return Err(Error::shape(name, format!("{:?} vs {:?}", t.dims(), slot.dims())));
            }
            *slot = t;
            Ok(())
        } else {
            self.weights.set(name, t)
        }
    }

    /// Current values of every trainable tensor.
    pub fn trainable_values(&self) -> Archive {
        self.trainable
            .iter()
            .map(|n| (n.clone(), self.get(n).expect("trainable names resolve").clone()))
            .collect()
    }

    /// Hash over all frozen tensors (backbone and extras).
    pub fn frozen_hash(&self) -> String {
        let frozen: Archive = self
            .weights
            .tensors()
            .iter()
            .chain(self.extras.iter())
            .filter(|(n, _)| !self.trainable.contains(*n))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        vit::archive_hash(&frozen)
    }

    pub fn bank(&self) -> Option<PromptBank> {
        (self.spec.method == Method::Expres).then(|| {
            let a: Archive =
                self.extras.iter().filter(|(n, _)| n.starts_with("prompt.")).map(|(n, t)| (n.clone(), t.clone())).collect();
            PromptBank::from_archive(&a).expect("bank entries are built together")
        })
    }

    pub fn prompt_count(&self) -> usize {
        if self.spec.method.uses_prompts() {
            self.spec.m.unwrap_or(0)
        } else {
            0
        }
    }

    /// Registers every tensor of the model as a graph leaf.
    pub fn register(&self, g: &mut Graph) -> Result<ModelNodes> {
        let cfg = self.config().clone();
        let vit = VitNodes::register(g, &self.weights, |n| self.trainable.contains(n))?;
        let bank = match self.bank() {
            Some(b) => Some(BankNodes::register(g, &b, &cfg, true)?),
            None => None,
        };
        let mut deep_prompts = Vec::new();
        match self.spec.method {
            Method::VptShallow => {
                deep_prompts.push(g.param(expres::PROMPT_NAME, &self.extras[expres::PROMPT_NAME], true)?)
            }
            Method::VptDeep => {
                for l in 0..cfg.layers {
                    let n = vpt_deep_name(l);
                    deep_prompts.push(g.param(&n, &self.extras[&n], true)?);
                }
            }
            _ => {}
        }
        let mut hidden = Vec::new();
        let mut i = 0;
        while let Some(w) = self.extras.get(&format!("head.mlp{i}.W")) {
            let b = &self.extras[&format!("head.mlp{i}.b")];
            hidden.push((g.param(&format!("head.mlp{i}.W"), w, true)?, g.param(&format!("head.mlp{i}.b"), b, true)?));
            i += 1;
        }
        let head = HeadNodes {
            hidden,
            w: g.param("head.W", &self.extras["head.W"], true)?,
            b: g.param("head.b", &self.extras["head.b"], true)?,
        };
        Ok(ModelNodes { vit, bank, deep_prompts, head })
    }

    /// Runs the method's encoder on one image.
    pub fn encode(&self, g: &mut Graph, nodes: &ModelNodes, image: &Tensor, input_name: &str) -> Result<EncoderTrace> {
        match self.spec.method {
            Method::Expres => {
                let bank = nodes.bank.as_ref().expect("expres registers a bank");
                expres::prompted_encoder(g, &nodes.vit, bank, image, input_name, self.spec.cutoff)
            }
            Method::VptShallow => {
                let z0 = nodes.vit.embed(g, image, input_name)?;
                let z = g.concat(&[z0, nodes.deep_prompts[0]], 0)?;
                vit::encoder_forward(g, z, &nodes.vit, self.prompt_count(), &[], None)
            }
            Method::VptDeep => vpt_deep_encoder(g, &nodes.vit, &nodes.deep_prompts, image, input_name),
            _ => {
                let z0 = nodes.vit.embed(g, image, input_name)?;
                vit::encoder_forward(g, z0, &nodes.vit, 0, &[], None)
            }
        }
    }

    /// Image-level representation `y ∈ R^d`.
    pub fn representation(&self, g: &mut Graph, nodes: &ModelNodes, trace: &EncoderTrace) -> Result<NodeId> {
        match self.spec.method {
            Method::Expres => expres::pooled_representation(g, &nodes.vit, trace),
            _ => vit::cls_representation(g, &nodes.vit, trace),
        }
    }

    /// Last-layer patch representation `[N, d]` for dense prediction.
    pub fn dense(&self, g: &mut Graph, trace: &EncoderTrace, repr: DenseRepr) -> Result<NodeId> {
        match repr {
            DenseRepr::Keys => Ok(trace.keys),
            DenseRepr::Queries => Ok(trace.queries),
            DenseRepr::Mlp => {
                let n = g.dims(trace.tokens)[0] - 1;
                g.slice(trace.tokens, 0, 1, n)
            }
        }
    }

    /// Full classification path for one image, `[1, C]` logits.
    pub fn logits(&self, g: &mut Graph, nodes: &ModelNodes, image: &Tensor, input_name: &str) -> Result<NodeId> {
        let trace = self.encode(g, nodes, image, input_name)?;
        let y = self.representation(g, nodes, &trace)?;
        let row = g.reshape(y, &[1, self.config().d])?;
        apply_head(g, &nodes.head, row)
    }
}

/// Applies the head to each row of `[B, d]` features, giving `[B, C]`.
pub fn apply_head(g: &mut Graph, head: &HeadNodes, x: NodeId) -> Result<NodeId> {
    g.set_scope("classifier");
    let mut h = x;
    for &(w, b) in &head.hidden {
        let a = g.matmul(h, w)?;
        let a = g.add_row(a, b)?;
        h = g.gelu(a)?;
    }
    let z = g.matmul(h, head.w)?;
    g.add_row(z, head.b)
}

/// VPT-deep encoder: layer 0 sees `[Z⁰ || P_0]`; before every later layer
/// the prompt rows are replaced by that layer's own prompts.
pub fn vpt_deep_encoder(
    g: &mut Graph,
    vit: &VitNodes,
    layer_prompts: &[NodeId],
    image: &Tensor,
    input_name: &str,
) -> Result<EncoderTrace> {
    let cfg = &vit.cfg;
    if layer_prompts.len() != cfg.layers {
        return Err(Error::shape(
            "vpt_deep",
            format!("{} prompt sets for {} layers", layer_prompts.len(), cfg.layers),
        ));
    }
    let m = g.dims(layer_prompts[0])[0];
    for &p in layer_prompts {
        if g.dims(p) != [m, cfg.d] {
            return Err(Error::shape(g.label(p).to_string(), format!("{:?}, expected [{m}, {}]", g.dims(p), cfg.d)));
        }
    }
    let z0 = vit.embed(g, image, input_name)?;
    let n_tok = g.dims(z0)[0];
    let mut z = g.concat(&[z0, layer_prompts[0]], 0)?;
    let mut traces = Vec::with_capacity(cfg.layers);
    for (l, layer) in vit.layers.iter().enumerate() {
        g.set_scope(format!("layer{l}"));
        if l > 0 {
            let tokens = g.slice(z, 0, 0, n_tok)?;
            z = g.concat(&[tokens, layer_prompts[l]], 0)?;
        }
        let trace = vit::layer_forward(g, z, layer, cfg, None, None)?;
        z = trace.out;
        traces.push(trace);
    }
    vit::finish_encoder(g, traces, n_tok, m)
}

/// Tensor-level VPT-deep representation `LN(Z^L_cls)`.
pub fn vpt_deep_forward(image: &Tensor, weights: &VitWeights, layer_prompts: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let vit = VitNodes::register(&mut g, weights, |_| false)?;
    let prompts = layer_prompts
        .iter()
        .enumerate()
        .map(|(l, p)| g.input(&vpt_deep_name(l), p))
        .collect::<Result<Vec<_>>>()?;
    let trace = vpt_deep_encoder(&mut g, &vit, &prompts, image, "image")?;
    let y = vit::cls_representation(&mut g, &vit, &trace)?;
    Ok(g.value(y))
}

/// Tensor-level VPT-shallow representation `LN(Z^L_cls)`.
pub fn vpt_shallow_forward(image: &Tensor, weights: &VitWeights, prompts: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vit = VitNodes::register(&mut g, weights, |_| false)?;
    let p = g.input(expres::PROMPT_NAME, prompts)?;
    let z0 = vit.embed(&mut g, image, "image")?;
    let z = g.concat(&[z0, p], 0)?;
    let trace = vit::encoder_forward(&mut g, z, &vit, prompts.dims()[0], &[], None)?;
    let y = vit::cls_representation(&mut g, &vit, &trace)?;
    Ok(g.value(y))
}

/// Tensor-level plain ViT representation `LN(Z^L_cls)` (no prompts).
pub fn plain_forward(image: &Tensor, weights: &VitWeights) -> Result<Tensor> {
    let mut g = Graph::new();
    let vit = VitNodes::register(&mut g, weights, |_| false)?;
    let z0 = vit.embed(&mut g, image, "image")?;
    let trace = vit::encoder_forward(&mut g, z0, &vit, 0, &[], None)?;
    let y = vit::cls_representation(&mut g, &vit, &trace)?;
    Ok(g.value(y))
}

/// Per-method trainable element counts from the tensor layouts.
pub fn enumerate_trainable(spec: &AdaptationSpec, cfg: &VitConfig, num_classes: usize) -> u64 {
    spec.trainable_shapes(cfg, num_classes)
        .iter()
        .map(|(_, d)| d.iter().product::<usize>() as u64)
        .sum()
}

/// Groups the trainable names of a model by owner, for reporting.
pub fn trainable_summary(model: &Model) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for n in model.trainable_names() {
        let key = if n.starts_with("head.") {
            "head"
        } else if n.starts_with("prompt.") {
            "prompts"
        } else {
            "backbone"
        };
        *out.entry(key).or_insert(0) += 1;
    }
    out
}
