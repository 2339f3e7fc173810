//! Straight-line f64 reference encoder shared by the integration tests.
//! Written against the equations with plain loops, independent of the graph.
#![allow(dead_code)]

use expres::expres::{PromptBank, Site};
use expres::vit::{VitConfig, VitWeights};
use expres::Tensor;
use rand::Rng;
use std::collections::BTreeMap;

pub type Mat = Vec<Vec<f64>>;

pub fn toy_cfg(d: usize, layers: usize, heads: usize, grid: usize) -> VitConfig {
    VitConfig { image_size: 2 * grid, patch_size: 2, d, layers, heads, mlp_ratio: 2, channels: 3 }
}

/// Backbone with unit-scale entries everywhere, including LN gains and
/// biases, so no term of the forward pass is trivially zero or one.
pub fn rich_weights(cfg: &VitConfig, seed: u64) -> VitWeights {
    let mut w = VitWeights::init(cfg, seed).unwrap();
    let mut rng = expres::seed::rng_for(seed, "test.rich");
    for (name, dims) in cfg.param_shapes() {
        let std = if dims.len() == 2 { 1.0 / (dims[0] as f32).sqrt() } else { 0.3 };
        let mut t = Tensor::trunc_normal(&dims, std, &mut rng);
        if name.ends_with(".g") {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        w.set(&name, t).unwrap();
    }
    w
}

pub fn image(cfg: &VitConfig, seed: u64) -> Tensor {
    let mut rng = expres::seed::rng_for(seed, "test.image");
    Tensor::uniform(&[cfg.channels, cfg.image_size, cfg.image_size], 0.0, 1.0, &mut rng)
}

pub fn random_bank(cfg: &VitConfig, m: usize, sites: &[Site], std: f32, seed: u64) -> PromptBank {
    let mut rng = expres::seed::rng_for(seed, "test.bank");
    let prompts = Tensor::trunc_normal(&[m, cfg.d], 0.5, &mut rng);
    let mut residuals = BTreeMap::new();
    for l in 0..cfg.layers {
        for &s in sites {
            residuals.insert((l, s), Tensor::trunc_normal(&[m, s.width(cfg)], std, &mut rng));
        }
    }
    PromptBank { prompts, residuals }
}

pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

pub fn mat(t: &Tensor) -> Mat {
    let d = t.dims();
    assert_eq!(d.len(), 2);
    (0..d[0]).map(|i| (0..d[1]).map(|j| t.data()[i * d[1] + j] as f64).collect()).collect()
}

pub fn vector(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn p(w: &VitWeights, name: &str) -> Mat {
    mat(w.get(name))
}

fn v(w: &VitWeights, name: &str) -> Vec<f64> {
    vector(w.get(name))
}

fn affine(x: &[f64], w: &Mat, b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(&w[i]) {
            *o += xi * wij;
        }
    }
    out
}

pub fn layernorm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-6).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mu) * r * g + b).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `Z⁰`: class token then patch projections, plus positions. Patches are
/// read pixel by pixel.
pub fn embed(w: &VitWeights, img: &Tensor) -> Mat {
    let cfg = w.config();
    let (c, s, ps) = (cfg.channels, cfg.image_size, cfg.patch_size);
    let g = s / ps;
    let pw = p(w, "patch.W");
    let pb = v(w, "patch.b");
    let pos = p(w, "pos");
    let mut z = vec![v(w, "cls")];
    for gy in 0..g {
        for gx in 0..g {
            let mut x = Vec::new();
            for ch in 0..c {
                for py in 0..ps {
                    for px in 0..ps {
                        x.push(img.data()[ch * s * s + (gy * ps + py) * s + gx * ps + px] as f64);
                    }
                }
            }
            z.push(affine(&x, &pw, &pb));
        }
    }
    for (row, pr) in z.iter_mut().zip(&pos) {
        for (a, b) in row.iter_mut().zip(pr) {
            *a += b;
        }
    }
    z
}

/// Residuals per layer and site, as plain matrices.
pub type Residuals = BTreeMap<(usize, Site), Mat>;

pub fn residuals(bank: &PromptBank) -> Residuals {
    bank.residuals.iter().map(|(k, t)| (*k, mat(t))).collect()
}

fn add_tail(x: &mut Mat, delta: Option<&Mat>) {
    if let Some(d) = delta {
        let off = x.len() - d.len();
        for (i, row) in d.iter().enumerate() {
            for (a, b) in x[off + i].iter_mut().zip(row) {
                *a += b;
            }
        }
    }
}

/// One encoder layer over all `T` rows, attention computed query by query.
/// With `cut`, the last `m` rows neither attend nor are attended to.
pub fn layer(w: &VitWeights, l: usize, z: &Mat, m: usize, res: &Residuals, cut: bool) -> Mat {
    let cfg = w.config();
    let (d, nh) = (cfg.d, cfg.heads);
    let dh = d / nh;
    let t = z.len();
    let name = |s: &str| format!("layer{l}.{s}");
    let r = |s: Site| res.get(&(l, s));
    let mut zp: Mat = z.iter().map(|row| layernorm(row, &v(w, &name("ln1.g")), &v(w, &name("ln1.b")))).collect();
    add_tail(&mut zp, r(Site::Ln));
    let proj = |x: &Mat, wn: &str| -> Mat {
        let (wm, b) = (p(w, &name(wn)), v(w, &name(&format!("{wn}.b"))));
        x.iter().map(|row| affine(row, &wm, &b)).collect()
    };
    let mut q = proj(&zp, "Wq");
    add_tail(&mut q, r(Site::Q));
    let mut k = proj(&zp, "Wk");
    add_tail(&mut k, r(Site::K));
    let mut vv = proj(&zp, "Wv");
    add_tail(&mut vv, r(Site::V));
    let tokens = t - m;
    let mut cat = vec![vec![0.0; d]; t];
    for i in 0..t {
        for h in 0..nh {
            let cols = h * dh..(h + 1) * dh;
            let allowed = |j: usize| !cut || (i < tokens && j < tokens) || i == j;
            let mut logits = Vec::new();
            for j in 0..t {
                if allowed(j) {
                    let dot: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                    logits.push((j, dot / (dh as f64).sqrt()));
                }
            }
            let mx = logits.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
            let den: f64 = logits.iter().map(|x| (x.1 - mx).exp()).sum();
            for &(j, s) in &logits {
                let a = (s - mx).exp() / den;
                for c in cols.clone() {
                    cat[i][c] += a * vv[j][c];
                }
            }
        }
    }
    let mut o = proj(&cat, "Wproj");
    add_tail(&mut o, r(Site::Proj));
    let h: Mat = o.iter().zip(z).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
    let mut hn: Mat = h.iter().map(|row| layernorm(row, &v(w, &name("ln2.g")), &v(w, &name("ln2.b")))).collect();
    add_tail(&mut hn, r(Site::LnMlp));
    let (w1, b1, w2, b2) = (p(w, &name("mlp.W1")), v(w, &name("mlp.b1")), p(w, &name("mlp.W2")), v(w, &name("mlp.b2")));
    let mut a: Mat = hn.iter().map(|row| affine(row, &w1, &b1)).collect();
    add_tail(&mut a, r(Site::L1Mlp));
    let a: Mat = a.iter().map(|row| row.iter().map(|&x| gelu(x)).collect()).collect();
    let mut b: Mat = a.iter().map(|row| affine(row, &w2, &b2)).collect();
    add_tail(&mut b, r(Site::L2Mlp));
    b.iter().zip(&h).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

/// Full encoder over `[Z⁰ || P]`, returning the last layer's rows.
pub fn encode(w: &VitWeights, img: &Tensor, prompts: Option<&Mat>, res: &Residuals, cutoff: Option<usize>) -> Mat {
    let mut z = embed(w, img);
    let m = prompts.map_or(0, |p| p.len());
    if let Some(p) = prompts {
        z.extend(p.iter().cloned());
    }
    for l in 0..w.config().layers {
        z = layer(w, l, &z, m, res, cutoff.is_some_and(|c| l >= c));
    }
    z
}

pub fn final_ln(w: &VitWeights, row: &[f64]) -> Vec<f64> {
    layernorm(row, &v(w, "final_ln.g"), &v(w, "final_ln.b"))
}

/// `LN(mean of the prompt rows)`.
pub fn pooled(w: &VitWeights, z: &Mat, m: usize) -> Vec<f64> {
    let d = z[0].len();
    let mut mean = vec![0.0; d];
    for row in &z[z.len() - m..] {
        for (a, b) in mean.iter_mut().zip(row) {
            *a += b / m as f64;
        }
    }
    final_ln(w, &mean)
}

pub fn max_diff(a: &[f64], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - *y as f64).abs()).fold(0.0, f64::max)
}
