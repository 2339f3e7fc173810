mod common;

use common::*;
use expres::error::LoadReport;
use expres::graph::Graph;
use expres::vit::{self, LayerNodes, VitConfig, VitNodes, VitWeights};
use expres::{Error, Tensor};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn no_residuals() -> BTreeMap<usize, BTreeMap<String, Tensor>> {
    BTreeMap::new()
}

#[test]
fn one_patch_row_is_a_dot_product() {
    let cfg = VitConfig { image_size: 2, patch_size: 2, d: 3, layers: 1, heads: 1, mlp_ratio: 1, channels: 1 };
    let mut w = VitWeights::init(&cfg, 0).unwrap();
    w.set("patch.W", Tensor::new(vec![4, 3], vec![1., 0., 2., 0., 1., 0., -1., 0., 1., 0.5, 0.5, 0.]).unwrap()).unwrap();
    w.set("patch.b", Tensor::from_vec(vec![0.25, -0.5, 1.0])).unwrap();
    w.set("cls", Tensor::from_vec(vec![9., 8., 7.])).unwrap();
    w.set("pos", Tensor::new(vec![2, 3], vec![1., 1., 1., 0.1, 0.2, 0.3]).unwrap()).unwrap();
    let img = Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
    let z = vit::patchify_embed(&img, &w).unwrap();
    // flatten = [1, 2, 3, 4]
    let want = [1. - 3. + 2. + 0.25 + 0.1, 2. + 2. - 0.5 + 0.2, 2. + 3. + 1. + 0.3];
    assert_eq!(z.dims(), &[2, 3]);
    assert_eq!(z.row(0), &[10., 9., 8.]);
    for (a, b) in z.row(1).iter().zip(want) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn zero_image_with_zero_offsets_leaves_only_the_class_token() {
    let cfg = VitConfig { image_size: 32, patch_size: 16, d: 8, layers: 1, heads: 2, mlp_ratio: 4, channels: 3 };
    let mut w = VitWeights::init(&cfg, 1).unwrap();
    w.set("pos", Tensor::zeros(&[5, 8])).unwrap();
    let z = vit::patchify_embed(&Tensor::zeros(&[3, 32, 32]), &w).unwrap();
    assert_eq!(z.dims(), &[5, 8]);
    assert_eq!(z.row(0), w.get("cls").data());
    assert!(z.data()[8..].iter().all(|&v| v == 0.0));
    assert!(matches!(vit::patchify_embed(&Tensor::zeros(&[3, 16, 16]), &w), Err(Error::Shape { .. })));
}

/// Half-pixel bilinear resampling written out for one output coordinate.
fn half_pixel(grid: &[[f64; 2]; 2], oy: usize, ox: usize, out: usize) -> f64 {
    let src = |o: usize| ((o as f64 + 0.5) * 2.0 / out as f64 - 0.5).clamp(0.0, 1.0);
    let (y, x) = (src(oy), src(ox));
    let top = grid[0][0] * (1.0 - x) + grid[0][1] * x;
    let bot = grid[1][0] * (1.0 - x) + grid[1][1] * x;
    top * (1.0 - y) + bot * y
}

#[test]
fn positional_grid_two_to_three_follows_the_half_pixel_formula() {
    let d = 2;
    let mut data = vec![5.0, -5.0];
    for v in [0.0, 1.0, 2.0, 3.0] {
        data.extend([v, 10.0 * v]);
    }
    let pos = Tensor::new(vec![5, d], data).unwrap();
    let out = vit::interpolate_pos_embed(&pos, 3).unwrap();
    assert_eq!(out.dims(), &[10, d]);
    assert_eq!(out.row(0), &[5.0, -5.0]);
    for oy in 0..3 {
        for ox in 0..3 {
            let want = half_pixel(&[[0.0, 1.0], [2.0, 3.0]], oy, ox, 3);
            let got = out.row(1 + oy * 3 + ox);
            assert!((got[0] as f64 - want).abs() < 1e-6);
            assert!((got[1] as f64 - 10.0 * want).abs() < 1e-5);
        }
    }
    assert_eq!(vit::interpolate_pos_embed(&pos, 2).unwrap(), pos);
    let constant = Tensor::full(&[10, 3], 0.75);
    assert!(vit::interpolate_pos_embed(&constant, 5).unwrap().data().iter().all(|&v| v == 0.75));
    assert!(matches!(vit::interpolate_pos_embed(&Tensor::zeros(&[4, 2]), 3), Err(Error::Contract(_))));
}

fn register_layer(cfg: &VitConfig, seed: u64) -> (Graph, VitNodes, VitWeights) {
    let w = rich_weights(cfg, seed);
    let mut g = Graph::new();
    let nodes = VitNodes::register(&mut g, &w, |_| false).unwrap();
    (g, nodes, w)
}

fn layer0(nodes: &VitNodes) -> &LayerNodes {
    &nodes.layers[0]
}

#[test]
fn single_token_attention_is_value_through_projection() {
    let cfg = VitConfig { image_size: 4, patch_size: 2, d: 4, layers: 1, heads: 2, mlp_ratio: 2, channels: 3 };
    let (mut g, nodes, w) = register_layer(&cfg, 3);
    let z = Tensor::new(vec![1, 4], vec![0.3, -1.2, 0.8, 2.0]).unwrap();
    let zn = g.input("z", &z).unwrap();
    let trace = vit::msa_block(&mut g, zn, layer0(&nodes), &cfg, None, None).unwrap();
    for a in &trace.attn {
        assert_eq!(g.value(*a).data(), &[1.0]);
    }
    let row: Vec<f64> = vector(&z);
    let ln = layernorm(&row, &vector(w.get("layer0.ln1.g")), &vector(w.get("layer0.ln1.b")));
    let lin = |x: &[f64], wn: &str| {
        let (m, b) = (mat(w.get(wn)), vector(w.get(&format!("{wn}.b"))));
        (0..4).map(|j| b[j] + (0..4).map(|i| x[i] * m[i][j]).sum::<f64>()).collect::<Vec<f64>>()
    };
    let v = lin(&ln, "layer0.Wv");
    let o = lin(&v, "layer0.Wproj");
    let want: Vec<f64> = o.iter().zip(&row).map(|(a, b)| a + b).collect();
    assert!(max_diff(&want, g.value(trace.h).data()) < 1e-6);
}

#[test]
fn zero_residuals_match_the_plain_block_bit_exactly() {
    let cfg = toy_cfg(4, 1, 2, 2);
    let (mut g, nodes, _) = register_layer(&cfg, 4);
    let z = Tensor::trunc_normal(&[7, 4], 1.0, &mut expres::seed::rng(4));
    let zn = g.input("z", &z).unwrap();
    let plain = vit::msa_block(&mut g, zn, layer0(&nodes), &cfg, None, None).unwrap();
    let zero = g.zeros(&[2, 4]).unwrap();
    let res = vit::LayerResiduals { ln: Some(zero), q: Some(zero), k: Some(zero), v: Some(zero), proj: Some(zero), ..Default::default() };
    let with = vit::msa_block(&mut g, zn, layer0(&nodes), &cfg, Some(&res), None).unwrap();
    assert_eq!(g.value(plain.h), g.value(with.h));
    let wrong = g.zeros(&[2, 3]).unwrap();
    let bad = vit::LayerResiduals { q: Some(wrong), ..Default::default() };
    assert!(matches!(vit::msa_block(&mut g, zn, layer0(&nodes), &cfg, Some(&bad), None), Err(Error::Shape { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn msa_is_permutation_equivariant(seed in any::<u64>(), t in 1usize..9, heads in prop::sample::select(vec![1usize, 2, 4])) {
        let cfg = VitConfig { image_size: 4, patch_size: 2, d: 8, layers: 1, heads, mlp_ratio: 2, channels: 3 };
        let (mut g, nodes, _) = register_layer(&cfg, seed);
        let mut rng = expres::seed::rng(seed);
        let z = Tensor::trunc_normal(&[t, 8], 1.0, &mut rng);
        let perm = permutation(t, &mut rng);
        let rows: Vec<Tensor> = perm.iter().map(|&i| z.rows(i, 1).unwrap()).collect();
        let zp = Tensor::vstack(&rows.iter().collect::<Vec<_>>()).unwrap();
        let a = g.input("a", &z).unwrap();
        let b = g.input("b", &zp).unwrap();
        let ta = vit::msa_block(&mut g, a, layer0(&nodes), &cfg, None, None).unwrap();
        let tb = vit::msa_block(&mut g, b, layer0(&nodes), &cfg, None, None).unwrap();
        let (ha, hb) = (g.value(ta.h), g.value(tb.h));
        for (new, &old) in perm.iter().enumerate() {
            for (x, y) in hb.row(new).iter().zip(ha.row(old)) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn earlier_layers_ignore_a_later_cutoff(seed in any::<u64>(), c in 0usize..3) {
        let cfg = toy_cfg(8, 3, 2, 2);
        let w = rich_weights(&cfg, seed);
        let z = Tensor::trunc_normal(&[7, 8], 1.0, &mut expres::seed::rng(seed));
        let a = vit::run_encoder(&z, &w, 2, &no_residuals(), Some(c)).unwrap();
        let b = vit::run_encoder(&z, &w, 2, &no_residuals(), Some(c + 1)).unwrap();
        for l in 0..c {
            prop_assert_eq!(&a.layers[l].out, &b.layers[l].out);
        }
    }
}

#[test]
fn loop_oracle_matches_the_encoder() {
    // d=4, L=2, one head, N=4 patches, one prompt.
    let cfg = toy_cfg(4, 2, 1, 2);
    for seed in 0..10 {
        let w = rich_weights(&cfg, seed);
        let img = image(&cfg, seed);
        let prompt = Tensor::trunc_normal(&[1, 4], 1.0, &mut expres::seed::rng(seed));
        let z0 = vit::patchify_embed(&img, &w).unwrap();
        let tokens = Tensor::vstack(&[&z0, &prompt]).unwrap();
        let out = vit::run_encoder(&tokens, &w, 1, &no_residuals(), None).unwrap();
        let want = encode(&w, &img, Some(&mat(&prompt)), &Residuals::new(), None);
        let flat: Vec<f64> = want.iter().flatten().copied().collect();
        let got = Tensor::vstack(&[&out.tokens, out.prompts.as_ref().unwrap()]).unwrap();
        assert!(max_diff(&flat, got.data()) < 1e-6, "seed {seed}");
        // Cut off from layer 1: prompts only self-attend there.
        let out = vit::run_encoder(&tokens, &w, 1, &no_residuals(), Some(1)).unwrap();
        let want = encode(&w, &img, Some(&mat(&prompt)), &Residuals::new(), Some(1));
        let flat: Vec<f64> = want.iter().flatten().copied().collect();
        let got = Tensor::vstack(&[&out.tokens, out.prompts.as_ref().unwrap()]).unwrap();
        assert!(max_diff(&flat, got.data()) < 1e-6, "seed {seed}, cutoff 1");
    }
}

#[test]
fn cutoff_at_depth_equals_no_cutoff() {
    let cfg = toy_cfg(8, 3, 2, 2);
    let w = rich_weights(&cfg, 5);
    let z = Tensor::trunc_normal(&[8, 8], 1.0, &mut expres::seed::rng(5));
    let a = vit::run_encoder(&z, &w, 3, &no_residuals(), None).unwrap();
    let b = vit::run_encoder(&z, &w, 3, &no_residuals(), Some(3)).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.prompts, b.prompts);
    assert!(matches!(vit::run_encoder(&z, &w, 3, &no_residuals(), Some(4)), Err(Error::Contract(_))));
}

#[test]
fn no_prompts_gives_the_plain_forward() {
    let cfg = toy_cfg(8, 2, 2, 2);
    let w = rich_weights(&cfg, 6);
    let img = image(&cfg, 6);
    let z0 = vit::patchify_embed(&img, &w).unwrap();
    let out = vit::run_encoder(&z0, &w, 0, &no_residuals(), None).unwrap();
    assert!(out.prompts.is_none());
    let want: Vec<f64> = encode(&w, &img, None, &Residuals::new(), None).into_iter().flatten().collect();
    assert!(max_diff(&want, out.tokens.data()) < 1e-6);
}

#[test]
fn final_keys_are_the_last_layer_patch_rows() {
    let cfg = toy_cfg(8, 2, 2, 2);
    let w = rich_weights(&cfg, 7);
    let z = Tensor::trunc_normal(&[7, 8], 1.0, &mut expres::seed::rng(7));
    let out = vit::run_encoder(&z, &w, 2, &no_residuals(), None).unwrap();
    let last = out.layers.last().unwrap();
    assert_eq!(out.keys, last.k.rows(1, 4).unwrap());
    // Re-derive from the cached Z' node of the last layer.
    let mut g = Graph::new();
    let nodes = VitNodes::register(&mut g, &w, |_| false).unwrap();
    let zin = g.input("z", &z).unwrap();
    let trace = vit::encoder_forward(&mut g, zin, &nodes, 2, &[], None).unwrap();
    let last = trace.layers.last().unwrap();
    let k = g.matmul(last.z_prime, nodes.layers[1].wk).unwrap();
    let k = g.add_row(k, nodes.layers[1].bk).unwrap();
    let patches = g.slice(k, 0, 1, 4).unwrap();
    assert_eq!(g.value_f64(patches), g.value_f64(trace.keys));
    assert_eq!(g.value(trace.keys), out.keys);
}

#[test]
fn checkpoints_round_trip_and_name_offenders() {
    let cfg = toy_cfg(8, 4, 2, 2);
    let w = rich_weights(&cfg, 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.xt");
    vit::save_checkpoint(&w, &path).unwrap();
    assert_eq!(vit::load_checkpoint(&cfg, &path).unwrap(), w);

    let mut archive = w.tensors().clone();
    archive.remove("layer3.Wproj");
    archive.insert("extra".into(), Tensor::zeros(&[1]));
    archive.insert("cls".into(), Tensor::zeros(&[3]));
    expres::format::write_archive(&path, &archive).unwrap();
    match vit::load_checkpoint(&cfg, &path) {
        Err(Error::Load(LoadReport { missing, unexpected, misshaped })) => {
            assert_eq!(missing, vec!["layer3.Wproj".to_string()]);
            assert_eq!(unexpected, vec!["extra".to_string()]);
            assert_eq!(misshaped[0].0, "cls");
        }
        other => panic!("{other:?}"),
    }

    let bytes = expres::format::encode_archive(w.tensors()).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(vit::load_checkpoint(&cfg, &path), Err(Error::Format(_))));
}
