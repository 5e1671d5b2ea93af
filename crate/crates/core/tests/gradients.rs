//! Finite-difference checks for every differentiable operation and for the
//! composed model with its full training loss.

use fasvit::autograd::{Tape, Var};
use fasvit::gradcheck::{check_gradients, finite_diff_check, GradCheck};
use fasvit::label::{Label, PatchLabel};
use fasvit::losses::{l2_softmax_loss, total_loss, LossConfig, PatchHead};
use fasvit::tensor::Tensor;
use fasvit::vit::{Backbone, ModelConfig, VitReg};
use fasvit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Projects a tensor output onto fixed random weights so every element
/// contributes a distinct amount to the scalar.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = random(tape.shape(x), seed);
    let p = tape.mul_const(x, &w)?;
    Ok(tape.sum(p))
}

const STRICT: GradCheck = GradCheck {
    h: 1e-4,
    tol: 1e-6,
    floor: 1e-3,
};

#[test]
fn matmul_sum_gradient() {
    let a = random(&[3, 4], 1);
    let b = random(&[4, 2], 2);
    let report = check_gradients(
        |tape, v| {
            let c = tape.matmul(v[0], v[1])?;
            Ok(tape.sum(c))
        },
        &[a, b],
        STRICT,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn batched_matmul_and_transpose() {
    let a = random(&[2, 3, 4], 3);
    let b = random(&[2, 5, 4], 4);
    let report = check_gradients(
        |tape, v| {
            let bt = tape.transpose_last2(v[1])?;
            let c = tape.matmul(v[0], bt)?;
            project(tape, c, 5)
        },
        &[a, b],
        STRICT,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn gelu_gradient_at_half() {
    let x = Tensor::new(vec![1], vec![0.5]).unwrap();
    let report = finite_diff_check(
        |tape, x| {
            let y = tape.gelu(x);
            Ok(tape.sum(y))
        },
        &x,
        1e-4,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn elementwise_and_shape_ops() {
    let x = random(&[2, 3, 4], 6);
    let y = random(&[2, 3, 4], 7);
    let bias = random(&[3, 4], 8);
    let report = check_gradients(
        |tape, v| {
            let s = tape.sub(v[0], v[1])?;
            let m = tape.mul(s, v[0])?;
            let b = tape.add_bcast(m, v[2])?;
            let g = tape.gelu(b);
            let p = tape.permute(g, &[1, 0, 2])?;
            let r = tape.reshape(p, &[3, 8])?;
            let n = tape.narrow(r, 1, 2, 5)?;
            let head = tape.narrow(v[2], 0, 0, 1)?;
            let head = tape.reshape(head, &[1, 1, 4])?;
            let rep = tape.repeat_batch(head, 2)?;
            let cat = tape.concat(&[v[1], rep], 1)?;
            let e = tape.exp(cat);
            let l = tape.ln(e);
            let a = project(tape, n, 9)?;
            let c = project(tape, l, 10)?;
            let total = tape.add(a, c)?;
            Ok(tape.scale(total, 0.7))
        },
        &[x, y, bias],
        STRICT,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn softmax_and_layer_norm() {
    let x = random(&[4, 8], 11);
    let g = random(&[8], 12);
    let b = random(&[8], 13);
    let report = check_gradients(
        |tape, v| {
            let ln = tape.layer_norm(v[0], v[1], v[2], 1e-6)?;
            let s0 = tape.softmax(ln, 0)?;
            let s1 = tape.softmax(ln, 1)?;
            let a = project(tape, s0, 14)?;
            let c = project(tape, s1, 15)?;
            tape.add(a, c)
        },
        &[x, g, b],
        STRICT,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn softmax_cross_entropy_on_random_logits() {
    let logits = random(&[6, 3], 16).map(|v| 3.0 * v);
    let targets = [0, 2, 1, 1, 0, 2];
    let report = finite_diff_check(
        |tape, z| {
            let lp = tape.log_softmax(z);
            let p = tape.pick(lp, &targets)?;
            let m = tape.mean(p);
            Ok(tape.scale(m, -1.0))
        },
        &logits,
        1e-4,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn l2_softmax_gradient_through_normalization() {
    let features = random(&[5, 6], 17);
    let w = random(&[6, 2], 18);
    let b = random(&[2], 19);
    let report = check_gradients(
        |tape, v| {
            let head = PatchHead {
                weight: v[1],
                bias: v[2],
                alpha: 4.0,
            };
            l2_softmax_loss(tape, v[0], &[0, 1, 1, 0, 1], &head)
        },
        &[features, w, b],
        STRICT,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn tiny_vit_full_loss_gradient() {
    let cfg = ModelConfig::tiny();
    let model = VitReg::new(cfg.clone(), 21).unwrap();
    let images = random(&[2, 3, 16, 16], 22);
    let labels = [Label::Live, Label::Spoof];
    let n = cfg.num_patches();
    let patch_labels = vec![
        vec![PatchLabel::Live; n],
        (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    PatchLabel::Live
                } else {
                    PatchLabel::Spoof
                }
            })
            .collect(),
    ];
    let params: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let loss_cfg = LossConfig {
        alpha: 3.0,
        ..LossConfig::default()
    };

    let started = std::time::Instant::now();
    let report = check_gradients(
        |tape, bound| {
            let out = model.forward(tape, bound, &images)?;
            let head = PatchHead::new(model.patch_head(bound), loss_cfg.alpha)?;
            let losses = total_loss(tape, &out, &labels, &patch_labels, &head, &loss_cfg)?;
            let feats = project(tape, out.patch_features, 23)?;
            let total = tape.add(losses.l_total, feats)?;
            Ok(total)
        },
        &params,
        STRICT,
    )
    .unwrap();
    eprintln!("tiny vit gradcheck: {report:?} in {:?}", started.elapsed());
    assert!(report.passed(), "{report:?}");
    assert!(started.elapsed().as_secs() < 60);
}
