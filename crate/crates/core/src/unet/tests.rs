use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{decode_checkpoint, encode_checkpoint};
use super::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        in_channels: 3,
        cond_channels: 3,
        base_channels: 8,
        channel_mult: vec![1, 2],
        num_res_blocks: 1,
        attention_resolutions: vec![4],
        head_channels: 8,
        groups: 4,
        spade_hidden: 8,
        attention_scale: 1.0,
        learn_attention_scale: false,
        timesteps: 20,
    }
}

fn randomize(store: &mut ParamStore, filter: impl Fn(&str) -> bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().to_vec();
    for name in names {
        if filter(&name) {
            let t = store.get_mut(&name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
}

fn inputs(cfg: &ModelConfig, n: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let x = Tensor::randn(&[n, cfg.in_channels, s, s], 1.0, &mut rng);
    let y = Tensor::from_fn(&[n, cfg.cond_channels, s, s], |i| {
        let p = i % (s * s);
        let c = (i / (s * s)) % cfg.cond_channels;
        if (p % s + p / s) % cfg.cond_channels == c {
            1.0
        } else {
            0.0
        }
    });
    (x, y)
}

#[test]
fn default_config_is_valid_and_parameter_count_is_pinned() {
    let cfg = ModelConfig::default();
    cfg.validate().unwrap();
    let a = UNet::new(cfg.clone(), 0).unwrap();
    let b = UNet::new(cfg, 1).unwrap();
    assert_eq!(a.params().num_scalars(), b.params().num_scalars());
    assert_eq!(a.params().num_scalars(), 7_842_918);
}

#[test]
fn config_validation() {
    let mut cfg = tiny();
    cfg.attention_resolutions = vec![2];
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = tiny();
    cfg.image_size = 12;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny();
    cfg.head_channels = 5;
    assert!(cfg.validate().is_err());
}

#[test]
fn sinusoidal_base_at_zero() {
    let e = sinusoidal_embedding(0, 16);
    assert!(e[..8].iter().all(|&v| v == 0.0));
    assert!(e[8..].iter().all(|&v| v == 1.0));
}

#[test]
fn time_embeddings_never_collide() {
    let mut cfg = tiny();
    cfg.timesteps = 200;
    let m = UNet::new(cfg, 3).unwrap();
    let mut g = Graph::<f32>::new();
    let p = m.params().bind(&mut g, false);
    let t: Vec<usize> = (0..=200).collect();
    let e = m.time_embed(&mut g, &p, &t).unwrap();
    let d = g.shape(e)[1];
    let rows: Vec<&[f32]> = g.value(e).data().chunks(d).collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            assert!(rows[i] != rows[j], "t={i} and t={j} collide");
        }
    }
    let again = m.time_embed(&mut g, &p, &t).unwrap();
    assert_eq!(g.value(e).data(), g.value(again).data());
    assert!(matches!(m.time_embed(&mut g, &p, &[201]), Err(Error::Input(_))));
}

#[test]
fn output_heads_match_input_shape_and_eps_starts_at_zero() {
    let cfg = tiny();
    let m = UNet::new(cfg.clone(), 0).unwrap();
    let (x, y) = inputs(&cfg, 2, 1);
    let (e, v) = m.predict(&x, &y, &[3, 17]).unwrap();
    assert_eq!(e.shape(), x.shape());
    assert_eq!(v.shape(), x.shape());
    assert!(e.data().iter().all(|&q| q == 0.0));
    assert!(v.data().iter().all(|&q| q == 0.0));
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny();
    let mut m = UNet::new(cfg.clone(), 0).unwrap();
    randomize(m.params_mut(), |n| n.starts_with("out.conv"), 2);
    let (x, y) = inputs(&cfg, 2, 1);
    let a = m.predict(&x, &y, &[1, 2]).unwrap();
    let b = m.predict(&x, &y, &[1, 2]).unwrap();
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn shape_errors_are_input_errors() {
    let cfg = tiny();
    let m = UNet::new(cfg.clone(), 0).unwrap();
    let (x, y) = inputs(&cfg, 2, 1);
    assert!(matches!(m.predict(&x, &y, &[1]), Err(Error::Input(_))));
    let (_, y1) = inputs(&cfg, 1, 1);
    assert!(matches!(m.predict(&x, &y1, &[1, 1]), Err(Error::Input(_))));
}

#[test]
fn zero_value_projection_makes_attention_the_identity_at_every_resolution() {
    let mut cfg = tiny();
    cfg.attention_resolutions = vec![8, 4];
    let m = UNet::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for name in ["down.0.0.attn", "down.1.0.attn", "mid.attn", "up.0.1.attn", "up.1.0.attn"] {
        let c = m.params().get(&format!("{name}.f.weight")).unwrap().shape()[0];
        let s = if name.starts_with("down.0") || name.starts_with("up.0") { 8 } else { 4 };
        let mut g = Graph::<f32>::new();
        let p = m.params().bind(&mut g, false);
        let x = g.constant(Tensor::randn(&[2, c, s, s], 1.0, &mut rng));
        let y = m.attention_block(&mut g, &p, name, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data(), "{name}");
    }
}

#[test]
fn single_site_attention_adds_value_of_projection() {
    let cfg = tiny();
    let mut m = UNet::new(cfg, 5).unwrap();
    randomize(m.params_mut(), |n| n.starts_with("mid.attn.v"), 4);
    let c = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xt = Tensor::<f32>::randn(&[1, c, 1, 1], 1.0, &mut rng);
    let mut g = Graph::<f64>::new();
    let p = m.params().bind(&mut g, false);
    let x = g.constant(xt.cast());
    let y = m.attention_block(&mut g, &p, "mid.attn", x).unwrap();
    // oracle: softmax over a single site is 1, so y = x + V (H x)
    let lin = |wn: &str, bn: &str, v: &[f64]| -> Vec<f64> {
        let w = m.params().get(wn).unwrap().data();
        let b = m.params().get(bn).unwrap().data();
        (0..c).map(|o| b[o] as f64 + (0..c).map(|i| w[o * c + i] as f64 * v[i]).sum::<f64>()).collect()
    };
    let xv: Vec<f64> = xt.data().iter().map(|&v| v as f64).collect();
    let h = lin("mid.attn.h.weight", "mid.attn.h.bias", &xv);
    let v = lin("mid.attn.v.weight", "mid.attn.v.bias", &h);
    for i in 0..c {
        assert!((g.value(y).data()[i] - (xv[i] + v[i])).abs() < 1e-12);
    }
}

#[test]
fn cosine_similarity_of_a_vector_with_itself_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::<f64>::new();
    let f = g.constant(Tensor::randn(&[1, 8, 5], 1.0, &mut rng));
    let fa = g.l2_normalize(f, COSINE_EPS).unwrap();
    let fb = g.l2_normalize(f, COSINE_EPS).unwrap();
    let m = g.bmm(fa, fb, true, false).unwrap();
    for u in 0..5 {
        assert!((g.value(m).data()[u * 5 + u] - 1.0).abs() < 1e-5);
    }
}

#[test]
fn spade_with_zero_heads_is_plain_group_norm() {
    let cfg = tiny();
    let m = UNet::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f32>::new();
    let p = m.params().bind(&mut g, false);
    let a = g.constant(Tensor::randn(&[2, 8, 8, 8], 1.0, &mut rng));
    let (_, y) = inputs(&cfg, 2, 0);
    let yv = g.constant(y);
    let out = m.spade(&mut g, &p, "up.0.0", a, yv).unwrap();
    let plain = g.group_norm(a, cfg.groups, NORM_EPS as f32).unwrap();
    assert_eq!(g.value(out).data(), g.value(plain).data());
    let null = g.constant(Tensor::zeros(&[2, 3, 8, 8]));
    let out0 = m.spade(&mut g, &p, "up.0.0", a, null).unwrap();
    assert_eq!(g.value(out0).data(), g.value(plain).data());
}

#[test]
fn spade_responds_to_the_map() {
    let cfg = tiny();
    let mut m = UNet::new(cfg.clone(), 0).unwrap();
    randomize(m.params_mut(), |n| n.contains("spade.head"), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f32>::new();
    let p = m.params().bind(&mut g, false);
    let a = g.constant(Tensor::randn(&[1, 8, 8, 8], 1.0, &mut rng));
    let (_, y) = inputs(&cfg, 1, 0);
    let y1 = g.constant(y.clone());
    let y2 = g.constant(Tensor::from_fn(y.shape(), |i| y.data()[(i + 8) % y.numel()]));
    let o1 = m.spade(&mut g, &p, "up.0.0", a, y1).unwrap();
    let o2 = m.spade(&mut g, &p, "up.0.0", a, y2).unwrap();
    assert_ne!(g.value(o1).data(), g.value(o2).data());
    let small = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    assert!(matches!(m.spade(&mut g, &p, "up.0.0", a, small), Err(Error::Contract(_))));
}

#[test]
fn encoder_block_with_identity_modulation_is_plain_residual_block() {
    let cfg = tiny();
    let mut m = UNet::new(cfg.clone(), 0).unwrap();
    for n in ["down.0.0.temb.weight", "down.0.0.temb.bias"] {
        m.params_mut().get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::<f32>::new();
    let p = m.params().bind(&mut g, false);
    let x = g.constant(Tensor::randn(&[2, 8, 8, 8], 1.0, &mut rng));
    let emb = g.constant(Tensor::randn(&[2, cfg.time_dim()], 1.0, &mut rng));
    let out = m.encoder_block(&mut g, &p, "down.0.0", x, emb).unwrap();
    let h = m.conv(&mut g, &p, "down.0.0.conv1", x, 1).unwrap();
    let h = g.group_norm(h, cfg.groups, 1e-5).unwrap();
    let h = g.channel_affine(h, p.var("down.0.0.norm.weight"), p.var("down.0.0.norm.bias")).unwrap();
    let h = g.silu(h).unwrap();
    let h = m.conv(&mut g, &p, "down.0.0.conv2", h, 1).unwrap();
    let manual = g.add(h, x).unwrap();
    assert_eq!(g.value(out).data(), g.value(manual).data());

    // zero input with zero biases and identity modulation stays zero
    let z = g.constant(Tensor::zeros(&[2, 8, 8, 8]));
    let out = m.encoder_block(&mut g, &p, "down.0.0", z, emb).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_output_depends_on_time_embedding() {
    let cfg = tiny();
    let m = UNet::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::randn(&[1, 8, 8, 8], 1.0, &mut rng);
    let e0 = Tensor::<f64>::randn(&[1, cfg.time_dim()], 1.0, &mut rng);
    let eval = |e: &Tensor<f64>| -> (f64, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let p = m.params().bind(&mut g, false);
        let xv = g.constant(x.clone());
        let ev = g.leaf(e.clone().with_requires_grad(true));
        let out = m.encoder_block(&mut g, &p, "down.0.0", xv, ev).unwrap();
        let s = g.sum(out).unwrap();
        g.backward(s).unwrap();
        (g.value(s).data()[0], g.grad(ev).unwrap().to_vec())
    };
    let (_, grad) = eval(&e0);
    assert!(grad.iter().any(|&v| v.abs() > 1e-6));
    let h = 1e-5;
    let mut ep = e0.clone();
    ep.data_mut()[0] += h;
    let mut em = e0.clone();
    em.data_mut()[0] -= h;
    let fd = (eval(&ep).0 - eval(&em).0) / (2.0 * h);
    assert!((fd - grad[0]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", grad[0]);
}

#[test]
fn gradient_reaches_spade_heads() {
    let cfg = tiny();
    let mut m = UNet::new(cfg.clone(), 0).unwrap();
    randomize(m.params_mut(), |n| n.starts_with("out.conv") || n.contains("spade.head"), 8);
    let (x, y) = inputs(&cfg, 1, 2);
    let target = "up.0.0.spade.head.weight";
    let idx = 5;
    let loss_and_grad = |m: &UNet| -> (f64, f64) {
        let mut g = Graph::<f64>::new();
        let p = m.params().bind(&mut g, true);
        let xv = g.constant(x.cast());
        let (e, _) = m.forward(&mut g, &p, xv, &y.cast(), &[4]).unwrap();
        let sq = g.mul(e, e).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        (g.value(l).data()[0], g.grad(p.var(target)).unwrap()[idx])
    };
    let (_, analytic) = loss_and_grad(&m);
    assert!(analytic.abs() > 1e-8);
    let h = 1e-3f32;
    let mut mp = m.clone();
    mp.params_mut().get_mut(target).unwrap().data_mut()[idx] += h;
    let mut mm = m.clone();
    mm.params_mut().get_mut(target).unwrap().data_mut()[idx] -= h;
    let fd = (loss_and_grad(&mp).0 - loss_and_grad(&mm).0) / (2.0 * h as f64);
    assert!((fd - analytic).abs() <= 1e-3 * analytic.abs().max(1e-3), "{fd} vs {analytic}");
}

#[test]
fn learnable_attention_scale_trains() {
    let mut cfg = tiny();
    cfg.learn_attention_scale = true;
    cfg.attention_scale = 2.0;
    let mut m = UNet::new(cfg.clone(), 0).unwrap();
    randomize(m.params_mut(), |n| n.starts_with("mid.attn.v"), 1);
    assert_eq!(m.params().get("mid.attn.alpha").unwrap().data(), &[2.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f32>::new();
    let p = m.params().bind(&mut g, true);
    let x = g.constant(Tensor::randn(&[1, 16, 2, 2], 1.0, &mut rng));
    let y = m.attention_block(&mut g, &p, "mid.attn", x).unwrap();
    let sq = g.mul(y, y).unwrap();
    let l = g.sum(sq).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(p.var("mid.attn.alpha")).unwrap()[0] != 0.0);
}

#[test]
fn checkpoint_round_trip_preserves_forward_bitwise() {
    let cfg = tiny();
    let mut m = UNet::new(cfg.clone(), 0).unwrap();
    randomize(m.params_mut(), |_| true, 11);
    let bytes = encode_checkpoint(m.params(), cfg.hash());
    let (header, store) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(header.config_hash, cfg.hash());
    assert_eq!(header.version, CHECKPOINT_VERSION);
    let loaded = UNet::from_params(cfg.clone(), store).unwrap();
    let (x, y) = inputs(&cfg, 2, 6);
    let a = m.predict(&x, &y, &[5, 9]).unwrap();
    let b = loaded.predict(&x, &y, &[5, 9]).unwrap();
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, m.params(), cfg.hash()).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(read_checkpoint_header(&path).unwrap().tensors as usize, m.params().len());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = tiny();
    let m = UNet::new(cfg.clone(), 0).unwrap();
    let bytes = encode_checkpoint(m.params(), cfg.hash());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_checkpoint(&long), Err(Error::Format(_))));
    let mut other = cfg.clone();
    other.base_channels = 16;
    let (_, store) = decode_checkpoint(&bytes).unwrap();
    assert!(UNet::from_params(other, store).is_err());
}

#[test]
fn config_hash_tracks_architecture() {
    let a = tiny();
    let mut b = tiny();
    assert_eq!(a.hash(), b.hash());
    b.spade_hidden = 16;
    assert_ne!(a.hash(), b.hash());
}
