//! Expressive prompt tuning with residual tokens.
//!
//! Shallow prompts `P⁰ ∈ R^{M×d}` are appended after the patch tokens and
//! propagated through the frozen encoder. Per-layer residual prompts
//! `Δ[l][site] ∈ R^{M×d}` are added to the prompt rows of the LayerNorm
//! output, the Q/K/V projections and the multi-head output projection
//! (optionally also inside the MLP block). The representation is the frozen
//! final LayerNorm applied to the mean of the propagated prompt rows.

use crate::baselines::{AdaptationSpec, Method};
use crate::error::{Error, Result};
use crate::format::Archive;
use crate::graph::{self, Graph, NodeId};
use crate::seed;
use crate::tensor::Tensor;
use crate::vit::{self, EncoderTrace, LayerActivations, LayerResiduals, VitConfig, VitNodes, VitWeights};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Site {
    #[serde(rename = "LN")]
    Ln,
    Q,
    K,
    V,
    #[serde(rename = "proj")]
    Proj,
    #[serde(rename = "LN_mlp")]
    LnMlp,
    #[serde(rename = "L1_mlp")]
    L1Mlp,
    #[serde(rename = "L2_mlp")]
    L2Mlp,
}

impl Site {
    pub const ALL: [Site; 8] =
        [Site::Ln, Site::Q, Site::K, Site::V, Site::Proj, Site::LnMlp, Site::L1Mlp, Site::L2Mlp];

    /// The MSA-block set used by default.
    pub const ATT: [Site; 5] = [Site::Ln, Site::Q, Site::K, Site::V, Site::Proj];

    pub const MLP: [Site; 3] = [Site::LnMlp, Site::L1Mlp, Site::L2Mlp];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::Ln => "LN",
            Site::Q => "Q",
            Site::K => "K",
            Site::V => "V",
            Site::Proj => "proj",
            Site::LnMlp => "LN_mlp",
            Site::L1Mlp => "L1_mlp",
            Site::L2Mlp => "L2_mlp",
        }
    }

    /// Row width of the residual: the MLP hidden width for `L1_mlp`, `d` otherwise.
    pub fn width(self, cfg: &VitConfig) -> usize {
        match self {
            Site::L1Mlp => cfg.hidden(),
            _ => cfg.d,
        }
    }

    fn slot(self, r: &mut LayerResiduals) -> &mut Option<NodeId> {
        match self {
            Site::Ln => &mut r.ln,
            Site::Q => &mut r.q,
            Site::K => &mut r.k,
            Site::V => &mut r.v,
            Site::Proj => &mut r.proj,
            Site::LnMlp => &mut r.ln_mlp,
            Site::L1Mlp => &mut r.l1_mlp,
            Site::L2Mlp => &mut r.l2_mlp,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown residual site `{s}`")))
    }
}

/// Parses a comma-separated site list; `Att` and `MLP` expand to their blocks.
pub fn parse_sites(list: &str) -> Result<BTreeSet<Site>> {
    let mut out = BTreeSet::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "Att" => out.extend(Site::ATT),
            "MLP" => out.extend(Site::MLP),
            "QKV" => out.extend([Site::Q, Site::K, Site::V]),
            other => {
                out.insert(other.parse()?);
            }
        }
    }
    Ok(out)
}

/// Which sites carry residual prompts, over the inclusive layer range
/// `start_layer..=end_layer`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualSiteConfig {
    pub sites: BTreeSet<Site>,
    pub start_layer: usize,
    pub end_layer: usize,
}

impl ResidualSiteConfig {
    pub fn att(layers: usize) -> Self {
        ResidualSiteConfig { sites: Site::ATT.into(), start_layer: 0, end_layer: layers.saturating_sub(1) }
    }

    pub fn none(layers: usize) -> Self {
        ResidualSiteConfig { sites: BTreeSet::new(), start_layer: 0, end_layer: layers.saturating_sub(1) }
    }

    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        self.start_layer..=self.end_layer
    }

    pub fn layer_count(&self) -> usize {
        self.end_layer + 1 - self.start_layer
    }

    pub fn violations(&self, layers: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.start_layer > self.end_layer {
            v.push(format!(
                "adaptation.start_layer: {} exceeds end_layer {}",
                self.start_layer, self.end_layer
            ));
        }
        if self.end_layer >= layers {
            v.push(format!("adaptation.end_layer: {} must be < L = {layers}", self.end_layer));
        }
        v
    }
}

/// Shallow prompts plus per-layer, per-site residual prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub prompts: Tensor,
    pub residuals: BTreeMap<(usize, Site), Tensor>,
}

pub const PROMPT_NAME: &str = "prompt.P0";

pub fn residual_name(layer: usize, site: Site) -> String {
    format!("prompt.d{layer}.{site}")
}

/// `P⁰` from a truncated normal (std 0.02); every residual starts at zero.
pub fn init_prompts(cfg: &ResidualSiteConfig, m: usize, vit: &VitConfig, seed: u64) -> Result<PromptBank> {
    if m < 1 {
        return Err(Error::contract("M >= 1 prompts are required (pooling zero prompts is undefined)"));
    }
    let mut rng = seed::rng_for(seed, "prompts.P0");
    let prompts = Tensor::trunc_normal(&[m, vit.d], 0.02, &mut rng);
    let residuals = cfg
        .layers()
        .flat_map(|l| cfg.sites.iter().map(move |&s| (l, s)))
        .map(|(l, s)| ((l, s), Tensor::zeros(&[m, s.width(vit)])))
        .collect();
    Ok(PromptBank { prompts, residuals })
}

impl PromptBank {
    pub fn m(&self) -> usize {
        self.prompts.dims()[0]
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.insert(PROMPT_NAME.to_string(), self.prompts.clone());
        for (&(l, s), t) in &self.residuals {
            a.insert(residual_name(l, s), t.clone());
        }
        a
    }

    /// Rebuilds a bank from archive entries named `prompt.P0` / `prompt.d{l}.{site}`.
    pub fn from_archive(a: &Archive) -> Result<Self> {
        let prompts = a
            .get(PROMPT_NAME)
            .cloned()
            .ok_or_else(|| Error::format(format!("missing `{PROMPT_NAME}`")))?;
        let mut residuals = BTreeMap::new();
        for (name, t) in a {
            let Some(rest) = name.strip_prefix("prompt.d") else { continue };
            let (layer, site) = rest
                .split_once('.')
                .ok_or_else(|| Error::format(format!("bad residual name `{name}`")))?;
            let layer: usize =
                layer.parse().map_err(|_| Error::format(format!("bad layer in `{name}`")))?;
            residuals.insert((layer, site.parse()?), t.clone());
        }
        Ok(PromptBank { prompts, residuals })
    }

    /// Copy with every residual removed (the shallow-prompt model).
    pub fn shallow(&self) -> Self {
        PromptBank { prompts: self.prompts.clone(), residuals: BTreeMap::new() }
    }

    /// Applies the same row permutation to `P⁰` and to every residual.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        let permute = |t: &Tensor| -> Result<Tensor> {
            let rows: Vec<Tensor> = perm.iter().map(|&i| t.rows(i, 1)).collect::<Result<_>>()?;
            Tensor::vstack(&rows.iter().collect::<Vec<_>>())
        };
        Ok(PromptBank {
            prompts: permute(&self.prompts)?,
            residuals: self
                .residuals
                .iter()
                .map(|(k, t)| permute(t).map(|p| (*k, p)))
                .collect::<Result<_>>()?,
        })
    }

    fn check(&self, vit: &VitConfig) -> Result<()> {
        let m = self.m();
        if m < 1 || self.prompts.dims() != [m, vit.d] {
            return Err(Error::shape(PROMPT_NAME, format!("{:?} for d = {}", self.prompts.dims(), vit.d)));
        }
        for (&(l, s), t) in &self.residuals {
            if l >= vit.layers {
                return Err(Error::contract(format!("residual layer {l} >= L = {}", vit.layers)));
            }
            if t.dims() != [m, s.width(vit)] {
                return Err(Error::shape(
                    residual_name(l, s),
                    format!("{:?}, expected [{m}, {}]", t.dims(), s.width(vit)),
                ));
            }
        }
        Ok(())
    }
}

/// Bank tensors registered as graph leaves.
#[derive(Debug, Clone)]
pub struct BankNodes {
    pub prompts: NodeId,
    pub residuals: Vec<LayerResiduals>,
    pub m: usize,
}

impl BankNodes {
    pub fn register(g: &mut Graph, bank: &PromptBank, vit: &VitConfig, trainable: bool) -> Result<Self> {
        bank.check(vit)?;
        let prompts = g.param(PROMPT_NAME, &bank.prompts, trainable)?;
        let mut residuals = vec![LayerResiduals::default(); vit.layers];
        for (&(l, s), t) in &bank.residuals {
            let id = g.param(&residual_name(l, s), t, trainable)?;
            *s.slot(&mut residuals[l]) = Some(id);
        }
        Ok(BankNodes { prompts, residuals, m: bank.m() })
    }

    /// Same prompts with the residual path switched off.
    pub fn without_residuals(&self) -> Self {
        BankNodes { prompts: self.prompts, residuals: Vec::new(), m: self.m }
    }
}

/// Builds `Z̃⁰ = [Z⁰ || P⁰]` and runs the prompted encoder.
pub fn prompted_encoder(
    g: &mut Graph,
    vit: &VitNodes,
    bank: &BankNodes,
    image: &Tensor,
    input_name: &str,
    cutoff: Option<usize>,
) -> Result<EncoderTrace> {
    let z0 = vit.embed(g, image, input_name)?;
    let z = g.concat(&[z0, bank.prompts], 0)?;
    vit::encoder_forward(g, z, vit, bank.m, &bank.residuals, cutoff)
}

/// `y = LN(AvgPool(P^L))`.
pub fn pooled_representation(g: &mut Graph, vit: &VitNodes, trace: &EncoderTrace) -> Result<NodeId> {
    let p = trace
        .prompts
        .ok_or_else(|| Error::contract("pooled readout needs at least one prompt"))?;
    let pooled = g.mean(p, 0)?;
    vit::final_norm(g, vit, pooled)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Run the shallow-prompt model (residuals ignored).
    pub shallow_only: bool,
    pub cutoff: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ExpresOutput {
    pub y: Tensor,
    pub tokens: Tensor,
    pub prompts: Tensor,
    pub layers: Vec<LayerActivations>,
}

/// Tensor-level EXPRES forward pass.
pub fn expres_forward(
    image: &Tensor,
    weights: &VitWeights,
    bank: &PromptBank,
    opts: ForwardOptions,
) -> Result<ExpresOutput> {
    let mut g = Graph::new();
    let vit = VitNodes::register(&mut g, weights, |_| false)?;
    let mut nodes = BankNodes::register(&mut g, bank, weights.config(), false)?;
    if opts.shallow_only {
        nodes = nodes.without_residuals();
    }
    let trace = prompted_encoder(&mut g, &vit, &nodes, image, "image", opts.cutoff)?;
    let y = pooled_representation(&mut g, &vit, &trace)?;
    Ok(ExpresOutput {
        y: g.value(y),
        tokens: g.value(trace.tokens),
        prompts: g.value(trace.prompts.expect("M >= 1")),
        layers: trace.layers.iter().map(|t| LayerActivations::read(&g, t)).collect(),
    })
}

// ------------------------------------------------------------- reweighting

/// `α = exp(qᵀΔ / scale)`.
pub fn reweighting_factor(q: &[f64], delta: &[f64], scale: f64) -> f64 {
    let mut dot = 0.0;
    for (a, b) in q.iter().zip(delta) {
        dot += a * b;
    }
    (dot / scale).exp()
}

/// Checks, for every layer and head, that the attention weights computed
/// with `K + [0 || Δ_K]` equal the residual-free weights multiplied by
/// `α_ij` and renormalised. Returns the largest absolute discrepancy.
pub fn verify_reweighting(weights: &VitWeights, bank: &PromptBank, image: &Tensor) -> Result<f32> {
    let cfg = weights.config();
    let mut g = Graph::new();
    let vit = VitNodes::register(&mut g, weights, |_| false)?;
    let nodes = BankNodes::register(&mut g, bank, cfg, false)?;
    let trace = prompted_encoder(&mut g, &vit, &nodes, image, "image", None)?;
    let m = bank.m();
    let dh = cfg.head_dim();
    let scale = (dh as f64).sqrt();
    let mut worst = 0.0f64;
    for (l, layer) in trace.layers.iter().enumerate() {
        let q = g.value_f64(layer.q);
        let k = g.value_f64(layer.k);
        let t = g.dims(layer.q)[0];
        let d = cfg.d;
        let delta: Vec<f64> = match bank.residuals.get(&(l, Site::K)) {
            Some(dk) => dk.data().iter().map(|&v| v as f64).collect(),
            None => vec![0.0; m * d],
        };
        for h in 0..cfg.heads {
            let attn = g.value_f64(layer.attn[h]);
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let qi = &q[i * d..][cols.clone()];
                // Base logits use the keys without the residual.
                let mut base = Vec::with_capacity(t);
                for j in 0..t {
                    let kj = &k[j * d..][cols.clone()];
                    let mut dot = 0.0;
                    for c in 0..dh {
                        let dk = if j + m >= t { delta[(j + m - t) * d + cols.start + c] } else { 0.0 };
                        dot += qi[c] * (kj[c] - dk);
                    }
                    base.push(dot / scale);
                }
                let mx = base.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut reweighted = Vec::with_capacity(t);
                for (j, b) in base.iter().enumerate() {
                    let w = (b - mx).exp();
                    let alpha = if j + m >= t {
                        reweighting_factor(qi, &delta[(j + m - t) * d..][cols.clone()], scale)
                    } else {
                        1.0
                    };
                    reweighted.push(w * alpha);
                }
                let z: f64 = reweighted.iter().sum();
                for j in 0..t {
                    worst = worst.max((attn[i * t + j] - reweighted[j] / z).abs());
                }
            }
        }
    }
    Ok(worst as f32)
}

// ----------------------------------------------------------- cost accounting

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub tuned_params: u64,
    pub backbone_params: u64,
    pub tuned_ratio_pct: f64,
    pub gmacs: f64,
}

/// Parameters of the classification head for `spec`.
pub fn head_params(spec: &AdaptationSpec, cfg: &VitConfig, num_classes: usize) -> u64 {
    let (d, c) = (cfg.d as u64, num_classes as u64);
    let hidden_layers = match spec.method {
        Method::MlpK => spec.k.unwrap_or(1).saturating_sub(1) as u64,
        _ => 0,
    };
    hidden_layers * (d * d + d) + d * c + c
}

/// Closed-form trainable-parameter count and ratio against backbone + head.
pub fn count_trainable(spec: &AdaptationSpec, cfg: &VitConfig, num_classes: usize) -> CostReport {
    let (d, l) = (cfg.d as u64, cfg.layers as u64);
    let h = cfg.hidden() as u64;
    let m = spec.m.unwrap_or(0) as u64;
    let k = spec.k.unwrap_or(1) as u64;
    let head = head_params(spec, cfg, num_classes);
    let backbone = cfg.backbone_param_count();
    let per_layer = 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
    let embeddings = cfg.patch_dim() as u64 * d + d + d + (cfg.num_patches() as u64 + 1) * d;
    let tuned = match spec.method {
        Method::Linear | Method::MlpK => head,
        Method::Bias => d + l * (7 * d + h) + d + head,
        Method::PartialK => {
            let emb = if k == l { embeddings } else { 0 };
            k * per_layer + 2 * d + emb + head
        }
        Method::FtAll => backbone + head,
        Method::VptShallow => m * d + head,
        Method::VptDeep => l * m * d + head,
        Method::Expres => {
            let sites = spec.site_config(cfg);
            let per_prompt: u64 = sites.sites.iter().map(|s| s.width(cfg) as u64).sum();
            m * d + per_prompt * sites.layer_count() as u64 * m + head
        }
    };
    CostReport {
        tuned_params: tuned,
        backbone_params: backbone,
        tuned_ratio_pct: 100.0 * tuned as f64 / (backbone + head) as f64,
        gmacs: estimate_macs_for(spec, cfg) as f64 / 1e9,
    }
}

/// Multiply-accumulates for one forward pass with `prompts` propagated
/// prompt tokens: QKV, attention, output projection and MLP per layer, plus
/// the patch embedding.
pub fn estimate_macs(cfg: &VitConfig, prompts: usize) -> u64 {
    let t = (cfg.num_patches() + 1 + prompts) as u64;
    let d = cfg.d as u64;
    let hidden = cfg.hidden() as u64;
    let per_layer = 3 * t * d * d + 2 * t * t * d + t * d * d + 2 * t * d * hidden;
    let patch = cfg.num_patches() as u64 * cfg.patch_dim() as u64 * d;
    cfg.layers as u64 * per_layer + patch
}

/// [`estimate_macs`] for the token count `spec` propagates, plus one
/// operation per residual element added.
pub fn estimate_macs_for(spec: &AdaptationSpec, cfg: &VitConfig) -> u64 {
    let m = if spec.method.uses_prompts() { spec.m.unwrap_or(0) } else { 0 };
    let mut macs = estimate_macs(cfg, m);
    if spec.method == Method::Expres {
        let sites = spec.site_config(cfg);
        let per_prompt: u64 = sites.sites.iter().map(|s| s.width(cfg) as u64).sum();
        macs += per_prompt * sites.layer_count() as u64 * m as u64;
    }
    macs
}

// ---------------------------------------------------------- attention dumps

/// Attention of prompt `prompt_index` (as a query) over the patch keys at
/// `layer`, averaged over heads, renormalised over the patch columns and
/// laid out on the `g x g` grid.
pub fn dump_prompt_attention(
    layers: &[LayerActivations],
    prompts: usize,
    prompt_index: usize,
    layer: usize,
) -> Result<Tensor> {
    if layer >= layers.len() {
        return Err(Error::contract(format!("layer {layer} >= {}", layers.len())));
    }
    if prompt_index >= prompts {
        return Err(Error::contract(format!("prompt {prompt_index} >= M = {prompts}")));
    }
    let acts = &layers[layer];
    let t = acts.attn[0].dims()[0];
    let n = t - 1 - prompts;
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(Error::contract(format!("{n} patches do not form a square grid")));
    }
    let row = t - prompts + prompt_index;
    let mut map = vec![0.0f64; n];
    for a in &acts.attn {
        for (j, v) in map.iter_mut().enumerate() {
            *v += a.at2(row, 1 + j) as f64;
        }
    }
    let total: f64 = map.iter().sum();
    let data = if total > 0.0 {
        map.iter().map(|v| (v / total) as f32).collect()
    } else {
        vec![1.0 / n as f32; n]
    };
    Tensor::new(vec![grid, grid], data)
}

/// Helper for oracles and tests: row-wise softmax of `x / temperature`.
pub fn softmax_reference(x: &[f64], width: usize, temperature: f64) -> Vec<f64> {
    graph::softmax_rows(x, width, temperature, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_prompts_are_rejected() {
        let cfg = VitConfig::preset("toy").unwrap();
        assert!(matches!(
            init_prompts(&ResidualSiteConfig::att(2), 0, &cfg, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fresh_residuals_are_zero_and_prompts_seeded() {
        let cfg = VitConfig::preset("toy").unwrap();
        let sites = ResidualSiteConfig::att(cfg.layers);
        let a = init_prompts(&sites, 3, &cfg, 9).unwrap();
        let b = init_prompts(&sites, 3, &cfg, 9).unwrap();
        assert_eq!(a.prompts, b.prompts);
        assert_eq!(a.residuals.len(), 5 * cfg.layers);
        assert!(a.residuals.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn alpha_is_two_for_ln2_residual() {
        // One head, d = 1, q = 1, base key 0, Δ = ln 2: the prompt column
        // is doubled before renormalisation.
        let alpha = reweighting_factor(&[1.0], &[std::f64::consts::LN_2], 1.0);
        assert!((alpha - 2.0).abs() < 1e-15);
        // Direct softmax over logits [0 (token), ln 2 (prompt)].
        let direct = softmax_reference(&[0.0, std::f64::consts::LN_2], 2, 1.0);
        let base = [1.0, 1.0 * alpha];
        let z: f64 = base.iter().sum();
        assert!((direct[0] - base[0] / z).abs() < 1e-15);
        assert!((direct[1] - base[1] / z).abs() < 1e-15);
        assert!((direct[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn site_lists_parse() {
        let s = parse_sites("Att").unwrap();
        assert_eq!(s, Site::ATT.into_iter().collect());
        assert!(parse_sites("LN,bogus").is_err());
        let j: Vec<Site> = serde_json::from_str(r#"["LN","proj","L1_mlp"]"#).unwrap();
        assert_eq!(j, vec![Site::Ln, Site::Proj, Site::L1Mlp]);
    }

    #[test]
    fn bank_archive_names() {
        let cfg = VitConfig::preset("toy").unwrap();
        let bank = init_prompts(&ResidualSiteConfig::att(cfg.layers), 2, &cfg, 1).unwrap();
        let a = bank.to_archive();
        assert!(a.contains_key("prompt.P0"));
        assert!(a.contains_key("prompt.d1.proj"));
        assert_eq!(PromptBank::from_archive(&a).unwrap(), bank);
    }
}
