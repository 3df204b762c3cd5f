use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{Graph, Padding, Tensor};

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        in_channels: 2,
        embed_dim: 3,
        height_dim: 4,
        num_classes: 4,
        scales: vec![Scale::ONE, Scale::new(1, 2)],
        encoder_depth: 2,
        gen_channels: 3,
    }
}

fn rand_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

#[test]
fn encode_spatial_preserves_resolution_and_channels() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.leaf(&rand_input(&mut rng, &[2, 2, 8, 8]));
    let f = encode_spatial(&mut g, x, &vars, &cfg).unwrap();
    assert_eq!(g.shape(f), &[2, 3, 8, 8]);
}

#[test]
fn encode_spatial_rejects_wrong_channel_count() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.leaf(&Tensor::zeros(vec![1, 5, 8, 8]));
    assert!(encode_spatial(&mut g, x, &vars, &cfg).is_err());
}

#[test]
fn encode_spatial_zero_input_zero_bias_gives_zero() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    for i in 0..cfg.encoder_depth {
        let bias = params.map_mut().get_mut(&format!("enc{i}.bias")).unwrap();
        bias.data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.leaf(&Tensor::zeros(vec![1, 2, 6, 6]));
    let f = encode_spatial(&mut g, x, &vars, &cfg).unwrap();
    assert!(g.value(f).iter().all(|&v| v == 0.0));
}

#[test]
fn encode_spatial_matches_hand_composed_chain() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    let input = rand_input(&mut rng, &[1, 2, 4, 4]);

    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.leaf(&input);
    let f = encode_spatial(&mut g, x, &vars, &cfg).unwrap();

    let mut o = Graph::new();
    let x2 = o.leaf(&input);
    let mut h = x2;
    for i in 0..cfg.encoder_depth {
        let w = o.leaf(params.get(&format!("enc{i}.weight")));
        let b = o.leaf(params.get(&format!("enc{i}.bias")));
        let c = o.conv2d(h, w, b, 1, Padding::Same).unwrap();
        h = o.relu(c).unwrap();
    }
    assert_eq!(g.value(f), o.value(h));
}

#[test]
fn height_features_replicates_the_table() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    let table = params.get("height_embed").data().to_vec();

    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let one = height_features(&mut g, &vars, &cfg, 1, 1).unwrap();
    assert_eq!(g.shape(one), &[1, cfg.height_dim, 1, cfg.embed_dim]);
    assert_eq!(g.value(one), table.as_slice());

    let rep = height_features(&mut g, &vars, &cfg, 3, 5).unwrap();
    assert_eq!(g.shape(rep), &[3, cfg.height_dim, 5, cfg.embed_dim]);
    let v = g.value(rep);
    let (d, w, e) = (cfg.height_dim, 5usize, cfg.embed_dim);
    for b in 0..3 {
        for di in 0..d {
            for wi in 0..w {
                for ei in 0..e {
                    let got = v[((b * d + di) * w + wi) * e + ei];
                    assert_eq!(got, table[di * e + ei]);
                }
            }
        }
    }
}

#[test]
fn fuse_with_zero_embedding_repeats_spatial_slices() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    params
        .map_mut()
        .get_mut("height_embed")
        .unwrap()
        .data_mut()
        .fill(0.0);
    let spatial = rand_input(&mut rng, &[2, 3, 4, 5]);
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let fs = g.leaf(&spatial);
    let fh = height_features(&mut g, &vars, &cfg, 2, 5).unwrap();
    let vol = fuse(&mut g, fs, fh, &cfg).unwrap();
    assert_eq!(g.shape(vol), &[2, 3, cfg.height_dim, 4, 5]);
    let v = g.value(vol);
    let plane = 4 * 5;
    for b in 0..2 {
        for e in 0..3 {
            for d in 0..cfg.height_dim {
                let base = ((b * 3 + e) * cfg.height_dim + d) * plane;
                let expect = &spatial.data()[(b * 3 + e) * plane..][..plane];
                assert_eq!(&v[base..base + plane], expect);
            }
        }
    }
}

#[test]
fn fuse_with_zero_spatial_exposes_the_table() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    let table = params.get("height_embed").data().to_vec();
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let fs = g.leaf(&Tensor::zeros(vec![1, 3, 2, 2]));
    let fh = height_features(&mut g, &vars, &cfg, 1, 2).unwrap();
    let vol = fuse(&mut g, fs, fh, &cfg).unwrap();
    let v = g.value(vol);
    for e in 0..3 {
        for d in 0..cfg.height_dim {
            for p in 0..4 {
                assert_eq!(v[(e * cfg.height_dim + d) * 4 + p], table[d * 3 + e]);
            }
        }
    }
}

#[test]
fn fuse_matches_triple_loop_reference() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    let table = params.get("height_embed").data().to_vec();
    let spatial = rand_input(&mut rng, &[2, 3, 3, 4]);
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let fs = g.leaf(&spatial);
    let fh = height_features(&mut g, &vars, &cfg, 2, 4).unwrap();
    let vol = fuse(&mut g, fs, fh, &cfg).unwrap();
    let v = g.value(vol);
    let (e_n, d_n, h_n, w_n) = (3usize, cfg.height_dim, 3usize, 4usize);
    for b in 0..2 {
        for e in 0..e_n {
            for d in 0..d_n {
                for h in 0..h_n {
                    for w in 0..w_n {
                        let got = v[(((b * e_n + e) * d_n + d) * h_n + h) * w_n + w];
                        let want = spatial.data()[((b * e_n + e) * h_n + h) * w_n + w]
                            + table[d * e_n + e];
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }
}

#[test]
fn multiscale_single_scale_degenerates_to_conv_plus_fusion() {
    let mut cfg = tiny_cfg();
    cfg.scales = vec![Scale::ONE];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    let volume = rand_input(&mut rng, &[1, 3, 4, 4, 4]);

    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let v = g.leaf(&volume);
    let gen = multiscale_generate(&mut g, v, &vars, &cfg).unwrap();
    assert_eq!(g.shape(gen), &[1, cfg.gen_channels, 4, 4, 4]);

    // composed oracle: conv3d + relu + 1x1x1 fusion + relu
    let mut o = Graph::new();
    let v2 = o.leaf(&volume);
    let w = o.leaf(params.get("scale0.weight"));
    let b = o.leaf(params.get("scale0.bias"));
    let c = o.conv3d(v2, w, b, 1, Padding::Same).unwrap();
    let r = o.relu(c).unwrap();
    let fw = o.leaf(params.get("fuse.weight"));
    let fb = o.leaf(params.get("fuse.bias"));
    let f = o.conv3d(r, fw, fb, 1, Padding::Same).unwrap();
    let out = o.relu(f).unwrap();
    assert_eq!(g.value(gen), o.value(out));
}

#[test]
fn multiscale_matches_composed_oracle_across_scales() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    let volume = rand_input(&mut rng, &[1, 3, 4, 8, 8]);

    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let v = g.leaf(&volume);
    let gen = multiscale_generate(&mut g, v, &vars, &cfg).unwrap();

    let mut o = Graph::new();
    let v2 = o.leaf(&volume);
    let mut branches = Vec::new();
    for (i, s) in cfg.scales.iter().enumerate() {
        let w = o.leaf(params.get(&format!("scale{i}.weight")));
        let b = o.leaf(params.get(&format!("scale{i}.bias")));
        let bin = if s.is_one() {
            v2
        } else {
            o.interp3d(v2, s.as_f64()).unwrap()
        };
        let c = o.conv3d(bin, w, b, 1, Padding::Same).unwrap();
        let r = o.relu(c).unwrap();
        let back = if s.is_one() {
            r
        } else {
            o.interp3d_to(r, [4, 8, 8]).unwrap()
        };
        branches.push(back);
    }
    let cat = o.concat(&branches, 1).unwrap();
    let fw = o.leaf(params.get("fuse.weight"));
    let fb = o.leaf(params.get("fuse.bias"));
    let f = o.conv3d(cat, fw, fb, 1, Padding::Same).unwrap();
    let out = o.relu(f).unwrap();
    assert_eq!(g.value(gen), o.value(out));
}

#[test]
fn phase_gate_uniform_on_zero_features_and_zero_params() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    for name in ["gate0.weight", "gate0.bias", "gate1.weight", "gate1.bias"] {
        params.map_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let feats = g.leaf(&Tensor::zeros(vec![1, cfg.gen_channels, 2, 3, 3]));
    let probs = phase_gate(&mut g, feats, &vars, &cfg).unwrap();
    assert!(g.value(probs).iter().all(|&p| p == 0.25));
}

#[test]
fn phase_gate_argmax_matches_logit_argmax() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    let feats = rand_input(&mut rng, &[1, cfg.gen_channels, 3, 4, 4]);

    // logits route: same convs, no softmax
    let mut o = Graph::new();
    let vars_o: BTreeMap<String, crate::tensor::Var> = params.register(&mut o);
    let f2 = o.leaf(&feats);
    let c0 = o
        .conv3d(f2, vars_o["gate0.weight"], vars_o["gate0.bias"], 1, Padding::Same)
        .unwrap();
    let a0 = o.relu(c0).unwrap();
    let logits = o
        .conv3d(a0, vars_o["gate1.weight"], vars_o["gate1.bias"], 1, Padding::Same)
        .unwrap();

    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let f = g.leaf(&feats);
    let probs = phase_gate(&mut g, f, &vars, &cfg).unwrap();

    let n = cfg.num_classes;
    let voxels = 3 * 4 * 4;
    let pv = g.value(probs);
    let lv = o.value(logits);
    let argmax = |v: &[f64], voxel: usize| -> usize {
        (0..n)
            .max_by(|&a, &b| {
                v[a * voxels + voxel]
                    .partial_cmp(&v[b * voxels + voxel])
                    .unwrap()
            })
            .unwrap()
    };
    for voxel in 0..voxels {
        assert_eq!(argmax(pv, voxel), argmax(lv, voxel));
    }
}

#[test]
fn forward_emits_normalized_probability_volume() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    let input = rand_input(&mut rng, &[2, 2, 8, 8]);
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.leaf(&input);
    let probs = forward(&mut g, x, &vars, &cfg).unwrap();
    assert_eq!(g.shape(probs), &[2, 4, cfg.height_dim, 8, 8]);
    let v = g.value(probs);
    let voxels = cfg.height_dim * 64;
    for b in 0..2 {
        for voxel in 0..voxels {
            let sum: f64 = (0..4).map(|n| v[(b * 4 + n) * voxels + voxel]).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn forward_inference_mode_matches_training_mode() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    let input = rand_input(&mut rng, &[1, 2, 8, 8]);

    let mut t = Graph::new();
    let vars_t = params.register(&mut t);
    let xt = t.leaf(&input);
    let pt = forward(&mut t, xt, &vars_t, &cfg).unwrap();

    let mut i = Graph::inference();
    let vars_i = params.register(&mut i);
    let xi = i.leaf(&input);
    let pi = forward(&mut i, xi, &vars_i, &cfg).unwrap();

    assert!(t
        .value(pt)
        .iter()
        .zip(i.value(pi))
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn forward_is_translation_equivariant_in_the_interior() {
    let mut cfg = tiny_cfg();
    cfg.scales = vec![Scale::ONE];
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    let (h, w) = (8usize, 16usize);
    let input = rand_input(&mut rng, &[1, 2, h, w]);
    let mut shifted = vec![0.0; input.numel()];
    for c in 0..2 {
        for y in 0..h {
            for x in 1..w {
                shifted[(c * h + y) * w + x] = input.data()[(c * h + y) * w + x - 1];
            }
        }
    }
    let shifted = Tensor::from_vec(vec![1, 2, h, w], shifted).unwrap();

    let run = |inp: &Tensor| {
        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let x = g.leaf(inp);
        let p = forward(&mut g, x, &vars, &cfg).unwrap();
        g.value(p).to_vec()
    };
    let base = run(&input);
    let moved = run(&shifted);
    // receptive radius: two 3x3 encoder convs + two 3x3x3 gate/branch convs
    let margin = 5;
    let d = cfg.height_dim;
    for n in 0..4 {
        for di in 0..d {
            for y in 0..h {
                for x in margin..w - margin {
                    let a = moved[((n * d + di) * h + y) * w + x];
                    let b = base[((n * d + di) * h + y) * w + x - 1];
                    assert!(
                        a.to_bits() == b.to_bits(),
                        "voxel ({n},{di},{y},{x}) shifted {a} vs {b}"
                    );
                }
            }
        }
    }
}

#[test]
fn forward_has_no_cross_batch_leakage() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    let a = rand_input(&mut rng, &[1, 2, 8, 8]);
    let b = rand_input(&mut rng, &[1, 2, 8, 8]);
    let stack = |x: &Tensor, y: &Tensor| {
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        Tensor::from_vec(vec![2, 2, 8, 8], data).unwrap()
    };
    let run = |inp: &Tensor| {
        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let x = g.leaf(inp);
        let p = forward(&mut g, x, &vars, &cfg).unwrap();
        g.value(p).to_vec()
    };
    let ab = run(&stack(&a, &b));
    let ba = run(&stack(&b, &a));
    let half = ab.len() / 2;
    assert_eq!(&ab[..half], &ba[half..]);
    assert_eq!(&ab[half..], &ba[..half]);
}

#[test]
fn every_parameter_is_connected_to_the_loss() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let params = ModelParameters::init_sgmagnet(&cfg, &mut rng).unwrap();
    let input = rand_input(&mut rng, &[2, 2, 8, 8]);
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.leaf(&input);
    let probs = forward(&mut g, x, &vars, &cfg).unwrap();
    let weights = rand_input(&mut rng, &[2, 4, cfg.height_dim, 8, 8]);
    let r = g.leaf(&weights);
    let weighted = g.mul(probs, r).unwrap();
    let loss = g.sum(weighted).unwrap();
    g.backward(loss).unwrap();
    for (name, var) in &vars {
        let grad = g.grad_vec(*var);
        assert!(
            grad.iter().any(|&v| v != 0.0),
            "parameter '{name}' received an all-zero gradient"
        );
    }
}

#[test]
fn baseline_honors_the_output_contract() {
    let cfg = ModelConfig {
        in_channels: 20,
        embed_dim: 4,
        height_dim: 6,
        num_classes: 4,
        scales: vec![Scale::ONE],
        encoder_depth: 2,
        gen_channels: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = ModelParameters::init_baseline(&cfg, &mut rng).unwrap();
    let input = rand_input(&mut rng, &[1, 20, 8, 8]);
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.leaf(&input);
    let probs = baseline_forward(&mut g, x, &vars, &cfg).unwrap();
    assert_eq!(g.shape(probs), &[1, 4, 6, 8, 8]);
    let v = g.value(probs);
    let voxels = 6 * 64;
    for voxel in 0..voxels {
        let sum: f64 = (0..4).map(|n| v[n * voxels + voxel]).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}
