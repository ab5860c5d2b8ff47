use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 32 * 32).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::new(vec![n, 1, 32, 32], data).unwrap()
}

fn net(seed: u64) -> DualHeadNet<f64> {
    DualHeadNet::new(ToyBackboneConfig::default(), 20, seed).unwrap()
}

#[test]
fn default_shapes() {
    let cfg = ToyBackboneConfig::default();
    assert_eq!(cfg.final_size(), 4);
    assert_eq!(cfg.flat_features(), 512);
    let out = net(1).forward(&images(3, 0)).unwrap();
    assert_eq!(out.recognition.shape(), &[3, 64]);
    assert_eq!(out.mask_embedding.shape(), &[3, 8]);
    assert_eq!(out.mask_logits.shape(), &[3, 2]);
    assert_eq!(out.len(), 3);
}

#[test]
fn zero_image_gives_zero_embeddings() {
    let out = net(2).forward(&Tensor::zeros(vec![1, 1, 32, 32])).unwrap();
    assert!(out.recognition.data().iter().all(|&v| v == 0.0));
    assert!(out.mask_embedding.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zeroed_embedding_layers_give_zero_embeddings() {
    let mut m = net(3);
    let h = m.heads();
    for k in [h.recognition, h.mask] {
        m.params_mut().value_mut(k).data_mut().fill(0.0);
    }
    let out = m.forward(&images(2, 5)).unwrap();
    assert!(out.recognition.data().iter().all(|&v| v == 0.0));
    assert!(out.mask_embedding.data().iter().all(|&v| v == 0.0));
    // Logits reduce to the bias, which starts at zero.
    assert!(out.mask_logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_deterministic() {
    let m = net(4);
    let x = images(2, 9);
    assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
    assert_eq!(net(4), m);
    assert_ne!(net(5), m);
}

#[test]
fn batch_equals_single_forwards() {
    let m = net(6);
    let x = images(2, 11);
    let both = m.forward(&x).unwrap();
    for i in 0..2 {
        let one = Tensor::new(vec![1, 1, 32, 32], x.data()[i * 1024..(i + 1) * 1024].to_vec()).unwrap();
        let single = m.forward(&one).unwrap().get(0);
        let row = both.get(i);
        let pairs = single
            .recognition_embedding
            .iter()
            .zip(&row.recognition_embedding)
            .chain(single.mask_embedding.iter().zip(&row.mask_embedding))
            .chain(single.mask_logits.iter().zip(&row.mask_logits));
        for (a, b) in pairs {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn mask_logits_are_affine_in_mask_embedding() {
    let mut m = net(7);
    let h = m.heads();
    m.params_mut().value_mut(h.mask_fc_bias).data_mut().copy_from_slice(&[0.3, -0.2]);
    let out = m.forward(&images(3, 2)).unwrap();
    let w = m.params().get(h.mask_fc_weight).value.clone();
    for i in 0..3 {
        let e = out.mask_embedding.row(i);
        for c in 0..2 {
            let want = [0.3, -0.2][c] + (0..8).map(|j| e[j] * w.data()[j * 2 + c]).sum::<f64>();
            assert!((out.mask_logits.row(i)[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn bad_images_are_rejected() {
    let m = net(8);
    let err = m.forward(&Tensor::zeros(vec![1, 1, 28, 28])).unwrap_err();
    assert!(err.to_string().contains("[1, 1, 28, 28]"), "{err}");
    assert!(m.forward(&Tensor::zeros(vec![32, 32])).is_err());
    assert!(m.forward(&Tensor::full(vec![1, 1, 32, 32], 1.5)).is_err());
}

#[test]
fn config_validation() {
    let mut cfg = ToyBackboneConfig::default();
    cfg.recognition_dim = 4;
    assert!(cfg.validate().unwrap_err().to_string().contains("recognition_dim"));
    let mut cfg = ToyBackboneConfig::default();
    cfg.mask_dim = 1;
    assert!(cfg.validate().unwrap_err().to_string().contains("mask_dim"));
    let mut cfg = ToyBackboneConfig::default();
    cfg.input_size = 0;
    assert!(cfg.validate().is_err());
    assert!(DualHeadNet::<f64>::new(ToyBackboneConfig::default(), 1, 0).is_err());
}

#[test]
fn normalized_recognition_embedding_has_unit_norm() {
    let m = net(9);
    let mut tape = Tape::new();
    let reg = m.register(&mut tape);
    let x = tape.input(images(4, 3));
    let out = m.forward_nodes(&mut tape, &reg, x).unwrap();
    let n = tape.l2_normalize(out.recognition).unwrap();
    for i in 0..4 {
        let norm: f64 = tape.value(n).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn toy_descriptor_matches_live_parameters() {
    let m = net(10);
    let arch = m.descriptor();
    assert_eq!(param_count(&arch.layers()), m.param_count());
    assert_eq!(arch.trainable(Frozen::None), m.param_count());
    let backbone: u64 = m
        .params()
        .iter()
        .filter(|p| p.group == ParamGroup::Backbone)
        .map(|p| p.value.numel() as u64)
        .sum();
    assert_eq!(arch.count(ModuleRole::Backbone), backbone);
    let frozen = m.clone().freeze(Frozen::Backbone);
    assert_eq!(arch.trainable(Frozen::Backbone), frozen.trainable_param_count());
    assert_eq!(frozen.trainable_param_count(), m.param_count() - backbone);
}

#[test]
fn frozen_backbone_gets_no_gradients() {
    let m = net(11).freeze(Frozen::Backbone);
    let mut tape = Tape::new();
    let reg = m.register(&mut tape);
    let x = tape.input(images(2, 4));
    let out = m.forward_nodes(&mut tape, &reg, x).unwrap();
    let a = tape.dot(out.recognition, out.recognition).unwrap();
    let b = tape.sum(out.mask_logits);
    let l = tape.add(a, b).unwrap();
    let g = tape.backward(l).unwrap();
    for (k, p) in m.params().iter().enumerate() {
        let expect = p.group == ParamGroup::Head && p.name != "arcface.weight";
        assert_eq!(g.contains(k), expect, "{}", p.name);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m: DualHeadNet<f32> = DualHeadNet::new(ToyBackboneConfig::default(), 20, 12).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&m, &mut bytes).unwrap();
    assert!(bytes.starts_with(b"FOCUSFACE-CKPT 1\nseed 12\n"));
    let back: DualHeadNet<f32> = read_checkpoint(bytes.as_slice()).unwrap();
    for (a, b) in m.params().iter().zip(back.params().iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(bytes, again);

    // A 64-bit model stores its f32 rounding; reloading and saving is stable.
    let wide = net(12);
    let mut w1 = Vec::new();
    write_checkpoint(&wide, &mut w1).unwrap();
    let reloaded: DualHeadNet<f64> = read_checkpoint(w1.as_slice()).unwrap();
    let mut w2 = Vec::new();
    write_checkpoint(&reloaded, &mut w2).unwrap();
    assert_eq!(w1, w2);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let m = net(13);
    save_checkpoint(&m, &path).unwrap();
    let back: DualHeadNet<f64> = load_checkpoint(&path).unwrap();
    assert_eq!(back.seed(), 13);
    assert_eq!(back.config(), m.config());
    assert!(load_checkpoint::<f64>(&dir.path().join("missing")).is_err());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let m = net(14);
    let mut bytes = Vec::new();
    write_checkpoint(&m, &mut bytes).unwrap();
    let truncated = &bytes[..bytes.len() - 3];
    assert!(read_checkpoint::<f64, _>(truncated).unwrap_err().to_string().contains("truncated"));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(read_checkpoint::<f64, _>(trailing.as_slice()).is_err());
    assert!(read_checkpoint::<f64, _>(&b"hello\nend\n"[..]).is_err());
    let edited = String::from_utf8_lossy(&bytes).replacen("param conv1.weight 8,1,3,3", "param conv1.weight 8,1,3,4", 1);
    assert!(read_checkpoint::<f64, _>(edited.as_bytes()).is_err());
}
