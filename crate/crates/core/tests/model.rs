use fasvit::autograd::Tape;
use fasvit::tensor::Tensor;
use fasvit::vit::{extract_patch_weights, Backbone, ModelConfig, VitReg};

fn batch(cfg: &ModelConfig, b: usize) -> Tensor {
    let s = cfg.image_size;
    Tensor::from_fn(&[b, cfg.channels, s, s], |i| ((i * 7919) % 97) as f64 / 48.0 - 1.0)
}

#[test]
fn base_config_parameter_count_and_tokens() {
    let cfg = ModelConfig::base();
    let n = cfg.param_count() as f64;
    assert!((n / 87e6 - 1.0).abs() < 0.02, "{n}");
    assert_eq!(cfg.seq_len(), 256 + 1 + cfg.num_registers);
}

#[test]
fn param_count_matches_allocated_store() {
    for cfg in [ModelConfig::tiny(), ModelConfig::desk()] {
        let m = VitReg::new(cfg.clone(), 0).unwrap();
        let total: usize = m.params().iter().map(|p| p.value.numel()).sum();
        assert_eq!(total, cfg.param_count());
        let pos = m.params().iter().find(|p| p.name == "pos_embed").unwrap();
        assert_eq!(pos.value.shape(), &[1 + cfg.num_patches(), cfg.embed_dim]);
    }
}

#[test]
fn forward_shapes_and_attention_rows() {
    let cfg = ModelConfig::tiny();
    let m = VitReg::new(cfg.clone(), 3).unwrap();
    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape);
    let out = m.forward(&mut tape, &bound, &batch(&cfg, 3)).unwrap();
    assert_eq!(tape.value(out.logits).shape(), &[3, 2]);
    assert_eq!(tape.value(out.cls_features).shape(), &[3, cfg.embed_dim]);
    assert_eq!(
        tape.value(out.patch_features).shape(),
        &[3, cfg.num_patches(), cfg.embed_dim]
    );
    assert_eq!(out.cls_attention.len(), cfg.depth);
    assert_eq!(out.num_prefix, 1 + cfg.num_registers);
    for rows in &out.cls_attention {
        assert_eq!(rows.shape(), &[3, cfg.num_heads, cfg.seq_len()]);
        for row in rows.data().chunks(cfg.seq_len()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let w = extract_patch_weights(&out, None).unwrap();
    assert_eq!(w.shape(), &[3, cfg.num_patches()]);
    for row in w.data().chunks(cfg.num_patches()) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(extract_patch_weights(&out, Some(cfg.depth)).is_err());
    assert!(out.p_live.data().iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn batch_rows_are_independent() {
    let cfg = ModelConfig::tiny();
    let m = VitReg::new(cfg.clone(), 5).unwrap();
    let imgs = batch(&cfg, 4);
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape);
        m.forward(&mut tape, &bound, x).unwrap().p_live
    };
    let all = run(&imgs);
    let per = imgs.numel() / 4;
    for i in 0..4 {
        let one = Tensor::new(
            vec![1, cfg.channels, cfg.image_size, cfg.image_size],
            imgs.data()[i * per..(i + 1) * per].to_vec(),
        )
        .unwrap();
        assert!((run(&one).data()[0] - all.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn initialization_depends_only_on_seed() {
    let a = VitReg::new(ModelConfig::tiny(), 9).unwrap();
    let b = VitReg::new(ModelConfig::tiny(), 9).unwrap();
    let c = VitReg::new(ModelConfig::tiny(), 10).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn registers_change_sequence_but_not_patch_count() {
    let cfg = ModelConfig {
        num_registers: 0,
        ..ModelConfig::tiny()
    };
    let m = VitReg::new(cfg.clone(), 1).unwrap();
    assert!(m.params().iter().all(|p| p.name != "registers"));
    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape);
    let out = m.forward(&mut tape, &bound, &batch(&cfg, 2)).unwrap();
    assert_eq!(out.num_prefix, 1);
    assert_eq!(out.cls_attention[0].shape()[2], 1 + cfg.num_patches());
}
