//! Frozen pre-LayerNorm Vision Transformer encoder.
//!
//! Token layout is `[cls, patch_0 .. patch_{N-1}, prompt_0 .. prompt_{M-1}]`,
//! patches ordered row-major over the grid. Each layer computes
//!
//! ```text
//! H = MSA(LN(Z)) + Z
//! Z' = MLP(LN(H)) + H
//! ```
//!
//! Residual prompts, when given, are added to the rows of the last `M`
//! (prompt) positions right after the matching computation.

use crate::error::{Error, Result};
use crate::format::{self, Archive};
use crate::graph::{self, Graph, NodeId};
use crate::seed;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_channels() -> usize {
    3
}

impl VitConfig {
    /// ViT-B/16 at 224 x 224.
    pub fn vit_b16() -> Self {
        VitConfig { image_size: 224, patch_size: 16, d: 768, layers: 12, heads: 12, mlp_ratio: 4, channels: 3 }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vitb16" | "vit-b16" | "ViT-B/16" => Some(Self::vit_b16()),
            "toy" => Some(VitConfig { image_size: 16, patch_size: 8, d: 8, layers: 2, heads: 2, mlp_ratio: 4, channels: 3 }),
            _ => None,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.d
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Every violated constraint, as `field: problem` strings.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, val) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("d", self.d),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("channels", self.channels),
        ] {
            if val == 0 {
                v.push(format!("vit.{name}: must be >= 1"));
            }
        }
        if self.patch_size > 0 && !self.image_size.is_multiple_of(self.patch_size) {
            v.push(format!(
                "vit.image_size: {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads > 0 && !self.d.is_multiple_of(self.heads) {
            v.push(format!("vit.d: {} is not divisible by heads {}", self.d, self.heads));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Canonical parameter names and extents, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.d, self.hidden());
        let mut out = vec![
            ("patch.W".to_string(), vec![self.patch_dim(), d]),
            ("patch.b".to_string(), vec![d]),
            ("cls".to_string(), vec![d]),
            ("pos".to_string(), vec![self.num_patches() + 1, d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            out.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("Wq"), vec![d, d]),
                (p("Wq.b"), vec![d]),
                (p("Wk"), vec![d, d]),
                (p("Wk.b"), vec![d]),
                (p("Wv"), vec![d, d]),
                (p("Wv.b"), vec![d]),
                (p("Wproj"), vec![d, d]),
                (p("Wproj.b"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.W1"), vec![d, h]),
                (p("mlp.b1"), vec![h]),
                (p("mlp.W2"), vec![h, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.push(("final_ln.g".to_string(), vec![d]));
        out.push(("final_ln.b".to_string(), vec![d]));
        out
    }

    pub fn backbone_param_count(&self) -> u64 {
        self.param_shapes().iter().map(|(_, d)| d.iter().product::<usize>() as u64).sum()
    }
}

/// Named frozen parameter set of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights {
    cfg: VitConfig,
    tensors: Archive,
}

impl VitWeights {
    /// Seeded stand-in for pretrained weights: truncated normal with std
    /// `1/√fan_in` for weight matrices, std 0.02 for the class token and
    /// positional embeddings, zero biases, unit LayerNorm gains.
    pub fn init(cfg: &VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng_for(seed, "vit.init");
        let tensors = cfg
            .param_shapes()
            .into_iter()
            .map(|(name, dims)| {
                let t = if name.ends_with(".g") {
                    Tensor::full(&dims, 1.0)
                } else if is_bias_name(&name) {
                    Tensor::zeros(&dims)
                } else if dims.len() == 2 && name != "pos" {
                    Tensor::trunc_normal(&dims, 1.0 / (dims[0] as f32).sqrt(), &mut rng)
                } else {
                    Tensor::trunc_normal(&dims, 0.02, &mut rng)
                };
                (name, t)
            })
            .collect();
        Ok(VitWeights { cfg: cfg.clone(), tensors })
    }

    pub fn from_archive(cfg: &VitConfig, mut archive: Archive) -> Result<Self> {
        cfg.validate()?;
        let mut report = crate::error::LoadReport::default();
        let mut tensors = Archive::new();
        for (name, dims) in cfg.param_shapes() {
            match archive.remove(&name) {
                None => report.missing.push(name),
                Some(t) if t.dims() != dims.as_slice() => {
                    report.misshaped.push((name, dims, t.dims().to_vec()))
                }
                Some(t) => {
                    if !t.is_finite() {
                        return Err(Error::numeric(name, "non-finite checkpoint value"));
                    }
                    tensors.insert(name, t);
                }
            }
        }
        report.unexpected = archive.into_keys().collect();
        if !report.is_clean() {
            return Err(Error::Load(report));
        }
        Ok(VitWeights { cfg: cfg.clone(), tensors })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("weights are complete by construction, `{name}` missing"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &Archive {
        &self.tensors
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown backbone tensor `{name}`")))?;
        if slot.dims() != t.dims() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", t.dims(), slot.dims())));
        }
        *slot = t;
        Ok(())
    }

    /// SHA-256 over every tensor in name order.
    pub fn content_hash(&self) -> String {
        archive_hash(&self.tensors)
    }
}

pub fn archive_hash(archive: &Archive) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in archive {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        t.hash_into(&mut h);
    }
    hex::encode(h.finalize())
}

pub fn is_bias_name(name: &str) -> bool {
    name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2")
}

pub fn save_checkpoint(weights: &VitWeights, path: impl AsRef<Path>) -> Result<()> {
    format::write_archive(path, &weights.tensors)
}

pub fn load_checkpoint(cfg: &VitConfig, path: impl AsRef<Path>) -> Result<VitWeights> {
    VitWeights::from_archive(cfg, format::read_archive(path)?)
}

// ----------------------------------------------------------------- embedding

/// Rearranges a `[C, H, W]` image into `[N, C·p·p]` patch rows; patches are
/// row-major over the grid and each row is channel-major then row-major
/// within the patch.
pub fn extract_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    let d = image.dims();
    if d.len() != 3 || d[1] != d[2] || patch == 0 || !d[1].is_multiple_of(patch) {
        return Err(Error::shape(
            "patchify",
            format!("image {d:?} cannot be tiled by {patch}x{patch} patches"),
        ));
    }
    let (c, side) = (d[0], d[1]);
    let g = side / patch;
    let src = image.data();
    let mut out = Vec::with_capacity(c * side * side);
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for py in 0..patch {
                    let row = ch * side * side + (gy * patch + py) * side + gx * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![g * g, c * patch * patch], out)
}

/// Bilinearly resamples the patch-grid rows of a positional table to a
/// `new_grid x new_grid` grid; the class row is copied unchanged.
pub fn interpolate_pos_embed(pos: &Tensor, new_grid: usize) -> Result<Tensor> {
    let dims = pos.dims();
    if dims.len() != 2 || dims[0] < 2 || new_grid == 0 {
        return Err(Error::shape("interpolate_pos_embed", format!("table {dims:?}")));
    }
    let (n, d) = (dims[0] - 1, dims[1]);
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::contract(format!("{n} patch positions do not form a square grid")));
    }
    if new_grid == g {
        return Ok(pos.clone());
    }
    // [N, d] -> [d, g, g] planes, resample, back to rows.
    let mut planes = vec![0.0f64; d * n];
    for i in 0..n {
        for c in 0..d {
            planes[c * n + i] = pos.at2(1 + i, c) as f64;
        }
    }
    let out = graph::bilinear_resize(&planes, d, g, g, new_grid, new_grid);
    let m = new_grid * new_grid;
    let mut data = pos.row(0).to_vec();
    data.reserve(m * d);
    for i in 0..m {
        for c in 0..d {
            data.push(out[c * m + i] as f32);
        }
    }
    Tensor::new(vec![m + 1, d], data)
}

// ------------------------------------------------------------- graph builders

#[derive(Debug, Clone)]
pub struct LayerNodes {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wproj: NodeId,
    pub bproj: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Backbone parameters registered as graph leaves.
#[derive(Debug, Clone)]
pub struct VitNodes {
    pub cfg: VitConfig,
    pub patch_w: NodeId,
    pub patch_b: NodeId,
    pub cls: NodeId,
    pub pos: NodeId,
    pub layers: Vec<LayerNodes>,
    pub final_g: NodeId,
    pub final_b: NodeId,
}

impl VitNodes {
    /// Registers every backbone tensor under its canonical name;
    /// `trainable(name)` decides which ones receive gradients.
    pub fn register(g: &mut Graph, w: &VitWeights, trainable: impl Fn(&str) -> bool) -> Result<Self> {
        let mut reg = |name: &str| g.param(name, w.get(name), trainable(name));
        let patch_w = reg("patch.W")?;
        let patch_b = reg("patch.b")?;
        let cls = reg("cls")?;
        let pos = reg("pos")?;
        let mut layers = Vec::with_capacity(w.cfg.layers);
        for l in 0..w.cfg.layers {
            let mut r = |s: &str| reg(&format!("layer{l}.{s}"));
            layers.push(LayerNodes {
                ln1_g: r("ln1.g")?,
                ln1_b: r("ln1.b")?,
                wq: r("Wq")?,
                bq: r("Wq.b")?,
                wk: r("Wk")?,
                bk: r("Wk.b")?,
                wv: r("Wv")?,
                bv: r("Wv.b")?,
                wproj: r("Wproj")?,
                bproj: r("Wproj.b")?,
                ln2_g: r("ln2.g")?,
                ln2_b: r("ln2.b")?,
                w1: r("mlp.W1")?,
                b1: r("mlp.b1")?,
                w2: r("mlp.W2")?,
                b2: r("mlp.b2")?,
            });
        }
        let final_g = reg("final_ln.g")?;
        let final_b = reg("final_ln.b")?;
        Ok(VitNodes { cfg: w.cfg.clone(), patch_w, patch_b, cls, pos, layers, final_g, final_b })
    }

    /// `Z⁰` for one image: class token and patch projections plus positional
    /// embeddings, resampled when the image grid differs from the table's.
    pub fn embed(&self, g: &mut Graph, image: &Tensor, input_name: &str) -> Result<NodeId> {
        let patches = extract_patches(image, self.cfg.patch_size)?;
        if patches.dims()[1] != self.cfg.patch_dim() {
            return Err(Error::shape(
                "patchify",
                format!("image has {} channels, model expects {}", image.dims()[0], self.cfg.channels),
            ));
        }
        let grid = image.dims()[1] / self.cfg.patch_size;
        g.set_scope("embed");
        let x = g.input(input_name, &patches)?;
        let proj = g.matmul(x, self.patch_w)?;
        let proj = g.add_row(proj, self.patch_b)?;
        let cls = g.reshape(self.cls, &[1, self.cfg.d])?;
        let tokens = g.concat(&[cls, proj], 0)?;
        let pos = self.positional(g, grid)?;
        g.add(tokens, pos)
    }

    fn positional(&self, g: &mut Graph, grid: usize) -> Result<NodeId> {
        let (g0, d) = (self.cfg.grid(), self.cfg.d);
        if grid == g0 {
            return Ok(self.pos);
        }
        let parts = g.chunk(self.pos, 0, &[1, g0 * g0])?;
        let planes = g.transpose(parts[1])?;
        let planes = g.reshape(planes, &[d, g0, g0])?;
        let resized = g.resize(planes, grid, grid)?;
        let flat = g.reshape(resized, &[d, grid * grid])?;
        let rows = g.transpose(flat)?;
        g.concat(&[parts[0], rows], 0)
    }
}

/// Residual prompt nodes for one layer, each `[M, width]`.
#[derive(Debug, Clone, Default)]
pub struct LayerResiduals {
    pub ln: Option<NodeId>,
    pub q: Option<NodeId>,
    pub k: Option<NodeId>,
    pub v: Option<NodeId>,
    pub proj: Option<NodeId>,
    pub ln_mlp: Option<NodeId>,
    pub l1_mlp: Option<NodeId>,
    pub l2_mlp: Option<NodeId>,
}

impl LayerResiduals {
    pub fn is_empty(&self) -> bool {
        [self.ln, self.q, self.k, self.v, self.proj, self.ln_mlp, self.l1_mlp, self.l2_mlp]
            .iter()
            .all(Option::is_none)
    }
}

/// Node handles for one layer's intermediate values.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub input: NodeId,
    pub z_prime: NodeId,
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
    /// Per-head attention weights, `[T, T]` each.
    pub attn: Vec<NodeId>,
    pub msa_out: NodeId,
    pub h: NodeId,
    pub out: NodeId,
}

/// `x + [0 || delta]`: adds `delta` to the last `M` rows of `x`.
fn add_at_tail(g: &mut Graph, x: NodeId, delta: Option<NodeId>) -> Result<NodeId> {
    let Some(delta) = delta else { return Ok(x) };
    let (xd, dd) = (g.dims(x).to_vec(), g.dims(delta).to_vec());
    if dd.len() != 2 || dd[1] != xd[1] || dd[0] >= xd[0] {
        return Err(Error::shape(
            g.label(delta).to_string(),
            format!("residual {dd:?} does not fit the prompt rows of {xd:?}"),
        ));
    }
    let zeros = g.zeros(&[xd[0] - dd[0], xd[1]])?;
    let padded = g.concat(&[zeros, delta], 0)?;
    g.add(x, padded)
}

fn affine(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Attention mask for the propagation cutoff: tokens attend among
/// themselves and each prompt row attends only to itself.
pub fn cutoff_mask(tokens: usize, prompts: usize) -> Arc<Vec<bool>> {
    let t = tokens + prompts;
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            m[i * t + j] = (i < tokens && j < tokens) || i == j;
        }
    }
    Arc::new(m)
}

/// Multi-head self-attention with skip connection: `H = MSA(LN(Z)) + Z`.
/// Returns `H` and the partially filled trace (`out` is set to `H`).
pub fn msa_block(
    g: &mut Graph,
    z: NodeId,
    layer: &LayerNodes,
    cfg: &VitConfig,
    res: Option<&LayerResiduals>,
    mask: Option<Arc<Vec<bool>>>,
) -> Result<LayerTrace> {
    let empty = LayerResiduals::default();
    let res = res.unwrap_or(&empty);
    let zn = g.layernorm(z, layer.ln1_g, layer.ln1_b)?;
    let z_prime = add_at_tail(g, zn, res.ln)?;
    let q = affine(g, z_prime, layer.wq, layer.bq)?;
    let q = add_at_tail(g, q, res.q)?;
    let k = affine(g, z_prime, layer.wk, layer.bk)?;
    let k = add_at_tail(g, k, res.k)?;
    let v = affine(g, z_prime, layer.wv, layer.bv)?;
    let v = add_at_tail(g, v, res.v)?;
    let dh = cfg.head_dim();
    let temperature = (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attn = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let a = g.masked_softmax(scores, temperature, mask.clone())?;
        heads.push(g.matmul(a, vh)?);
        attn.push(a);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    let o = affine(g, cat, layer.wproj, layer.bproj)?;
    let msa_out = add_at_tail(g, o, res.proj)?;
    let h = g.add(msa_out, z)?;
    Ok(LayerTrace { input: z, z_prime, q, k, v, attn, msa_out, h, out: h })
}

/// `Z' = MLP(LN(H)) + H` with GELU between the two linear maps.
pub fn mlp_block(g: &mut Graph, h: NodeId, layer: &LayerNodes, res: Option<&LayerResiduals>) -> Result<NodeId> {
    let empty = LayerResiduals::default();
    let res = res.unwrap_or(&empty);
    let hn = g.layernorm(h, layer.ln2_g, layer.ln2_b)?;
    let hn = add_at_tail(g, hn, res.ln_mlp)?;
    let a = affine(g, hn, layer.w1, layer.b1)?;
    let a = add_at_tail(g, a, res.l1_mlp)?;
    let a = g.gelu(a)?;
    let b = affine(g, a, layer.w2, layer.b2)?;
    let b = add_at_tail(g, b, res.l2_mlp)?;
    g.add(b, h)
}

pub fn layer_forward(
    g: &mut Graph,
    z: NodeId,
    layer: &LayerNodes,
    cfg: &VitConfig,
    res: Option<&LayerResiduals>,
    mask: Option<Arc<Vec<bool>>>,
) -> Result<LayerTrace> {
    let mut trace = msa_block(g, z, layer, cfg, res, mask)?;
    trace.out = mlp_block(g, trace.h, layer, res)?;
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub layers: Vec<LayerTrace>,
    /// Class and patch rows of the last layer output, `[N+1, d]`.
    pub tokens: NodeId,
    /// Prompt rows of the last layer output, `[M, d]`, when `M > 0`.
    pub prompts: Option<NodeId>,
    /// Last-layer keys of the patch positions (all heads concatenated), `[N, d]`.
    pub keys: NodeId,
    /// Last-layer queries of the patch positions, `[N, d]`.
    pub queries: NodeId,
}

/// Runs all layers over `tokens` (`[N+1+M, d]`). From layer `cutoff` on,
/// prompt rows are cut off from attention.
pub fn encoder_forward(
    g: &mut Graph,
    tokens: NodeId,
    vit: &VitNodes,
    prompts: usize,
    residuals: &[LayerResiduals],
    cutoff: Option<usize>,
) -> Result<EncoderTrace> {
    let cfg = &vit.cfg;
    if let Some(c) = cutoff {
        if c > cfg.layers {
            return Err(Error::contract(format!("cutoff {c} outside [0, {}]", cfg.layers)));
        }
    }
    if !residuals.is_empty() && residuals.len() != cfg.layers {
        return Err(Error::contract(format!(
            "{} residual layers for a {}-layer encoder",
            residuals.len(),
            cfg.layers
        )));
    }
    let t = g.dims(tokens)[0];
    if t <= prompts {
        return Err(Error::shape("encoder", format!("{t} tokens cannot hold {prompts} prompts")));
    }
    let n_tok = t - prompts;
    let mask = (prompts > 0).then(|| cutoff_mask(n_tok, prompts));
    let mut z = tokens;
    let mut traces = Vec::with_capacity(cfg.layers);
    for (l, layer) in vit.layers.iter().enumerate() {
        g.set_scope(format!("layer{l}"));
        let masked = cutoff.is_some_and(|c| l >= c);
        let m = if masked { mask.clone() } else { None };
        let trace = layer_forward(g, z, layer, cfg, residuals.get(l), m)?;
        z = trace.out;
        traces.push(trace);
    }
    finish_encoder(g, traces, n_tok, prompts)
}

/// Chunks the last layer output and extracts the last-layer patch keys and
/// queries.
pub fn finish_encoder(
    g: &mut Graph,
    traces: Vec<LayerTrace>,
    tokens: usize,
    prompts: usize,
) -> Result<EncoderTrace> {
    g.set_scope("head");
    let last = traces.last().ok_or_else(|| Error::contract("encoder has no layers"))?;
    let (out, k, q) = (last.out, last.k, last.q);
    let split = split_tokens(g, out, tokens, prompts)?;
    let n = tokens - 1;
    let keys = g.slice(k, 0, 1, n)?;
    let queries = g.slice(q, 0, 1, n)?;
    Ok(EncoderTrace { layers: traces, tokens: split.0, prompts: split.1, keys, queries })
}

/// `chunk`: splits `[N+1+M, d]` rows into tokens and prompts.
pub fn split_tokens(g: &mut Graph, z: NodeId, tokens: usize, prompts: usize) -> Result<(NodeId, Option<NodeId>)> {
    if prompts == 0 {
        return Ok((z, None));
    }
    let parts = g.chunk(z, 0, &[tokens, prompts])?;
    Ok((parts[0], Some(parts[1])))
}

/// `LN(row)` with the frozen final LayerNorm, for a `[d]` or `[1, d]` node.
pub fn final_norm(g: &mut Graph, vit: &VitNodes, row: NodeId) -> Result<NodeId> {
    let r = g.reshape(row, &[1, vit.cfg.d])?;
    let y = g.layernorm(r, vit.final_g, vit.final_b)?;
    g.reshape(y, &[vit.cfg.d])
}

/// Plain ViT representation `LN(Z^L_cls)`.
pub fn cls_representation(g: &mut Graph, vit: &VitNodes, trace: &EncoderTrace) -> Result<NodeId> {
    let cls = g.slice(trace.tokens, 0, 0, 1)?;
    final_norm(g, vit, cls)
}

// --------------------------------------------------------- tensor-level API

/// Concrete per-layer activations read back from a graph.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub z_prime: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub attn: Vec<Tensor>,
    pub msa_out: Tensor,
    pub h: Tensor,
    pub out: Tensor,
}

impl LayerActivations {
    pub fn read(g: &Graph, t: &LayerTrace) -> Self {
        LayerActivations {
            z_prime: g.value(t.z_prime),
            q: g.value(t.q),
            k: g.value(t.k),
            v: g.value(t.v),
            attn: t.attn.iter().map(|&a| g.value(a)).collect(),
            msa_out: g.value(t.msa_out),
            h: g.value(t.h),
            out: g.value(t.out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub tokens: Tensor,
    pub prompts: Option<Tensor>,
    pub keys: Tensor,
    pub layers: Vec<LayerActivations>,
}

/// Embeds one image with the frozen backbone.
pub fn patchify_embed(image: &Tensor, weights: &VitWeights) -> Result<Tensor> {
    let d = image.dims();
    if d.len() != 3 || d[1] != weights.cfg.image_size || d[2] != weights.cfg.image_size {
        return Err(Error::shape(
            "patchify",
            format!("image {d:?}, expected side {}", weights.cfg.image_size),
        ));
    }
    let mut g = Graph::new();
    let vit = VitNodes::register(&mut g, weights, |_| false)?;
    let z = vit.embed(&mut g, image, "image")?;
    Ok(g.value(z))
}

/// Tensor-level encoder pass. `residuals` maps layer index to per-site
/// tensors (`[M, width]`).
pub fn run_encoder(
    tokens: &Tensor,
    weights: &VitWeights,
    prompts: usize,
    residuals: &BTreeMap<usize, BTreeMap<String, Tensor>>,
    cutoff: Option<usize>,
) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let vit = VitNodes::register(&mut g, weights, |_| false)?;
    let z = g.input("tokens", tokens)?;
    let mut res = vec![LayerResiduals::default(); weights.cfg.layers];
    for (&l, sites) in residuals {
        let slot = res
            .get_mut(l)
            .ok_or_else(|| Error::contract(format!("residual layer {l} out of range")))?;
        for (site, t) in sites {
            let id = g.input(&format!("res.{l}.{site}"), t)?;
            let target = match site.as_str() {
                "LN" => &mut slot.ln,
                "Q" => &mut slot.q,
                "K" => &mut slot.k,
                "V" => &mut slot.v,
                "proj" => &mut slot.proj,
                "LN_mlp" => &mut slot.ln_mlp,
                "L1_mlp" => &mut slot.l1_mlp,
                "L2_mlp" => &mut slot.l2_mlp,
                other => return Err(Error::contract(format!("unknown residual site `{other}`"))),
            };
            *target = Some(id);
        }
    }
    let trace = encoder_forward(&mut g, z, &vit, prompts, &res, cutoff)?;
    Ok(EncoderOutput {
        tokens: g.value(trace.tokens),
        prompts: trace.prompts.map(|p| g.value(p)),
        keys: g.value(trace.keys),
        layers: trace.layers.iter().map(|t| LayerActivations::read(&g, t)).collect(),
    })
}
