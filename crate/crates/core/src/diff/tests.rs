use super::*;
use alloc::vec;
use proptest::prelude::*;

fn ramp(n: usize, scale: f64) -> Tensor {
    Tensor::vector((0..n).map(|i| scale * (i as f64 + 1.0) - 0.3).collect())
}

/// Builds `f` on a fresh graph at `x` and returns value, gradient and signature.
fn program(x: &[f64], build: impl Fn(&mut Graph, NodeId) -> NodeId) -> Result<Evaluation> {
    let mut g = Graph::new();
    let leaf = g.leaf(Tensor::vector(x.to_vec()));
    let loss = build(&mut g, leaf);
    let grads = g.backward(loss)?;
    Ok(Evaluation {
        value: g.value(loss).item(),
        gradient: grads.get_or_zeros(leaf, x.len()),
        signature: g.signature(),
    })
}

#[test]
fn sum_has_unit_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(ramp(5, 1.0));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0; 5]);
}

#[test]
fn sum_of_squares_has_gradient_two_x() {
    let mut g = Graph::new();
    let x = g.leaf(ramp(4, 0.7));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    let expected: Vec<f64> = g.value(x).data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(grads.get(x).unwrap(), expected.as_slice());
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0));
    let y = g.leaf(Tensor::scalar(3.0));
    let xd = g.detach(x);
    let s = g.add(xd, y).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).is_none());
    assert_eq!(grads.get_or_zeros(x, 1), vec![0.0]);
    assert_eq!(grads.get(y).unwrap(), &[1.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::scalar(2.0));
    let x = g.leaf(Tensor::scalar(3.0));
    let p = g.mul(c, x).unwrap();
    let grads = g.backward(p).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap(), &[2.0]);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(ramp(3, 1.0));
    assert!(matches!(g.backward(x), Err(Error::InvalidInput(_))));
}

#[test]
fn incompatible_shapes_are_rejected() {
    let mut g = Graph::new();
    let a = g.leaf(ramp(3, 1.0));
    let b = g.leaf(ramp(4, 1.0));
    assert!(g.add(a, b).is_err());
}

#[test]
fn first_non_finite_node_is_named() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(-1.0));
    let l = g.ln(x);
    let _ = g.exp(l);
    assert_eq!(g.check_finite(), Err(Error::NonFinite { node: 1, op: "ln" }));
}

#[test]
fn backward_is_bitwise_deterministic() {
    let build = |x: &[f64]| {
        program(x, |g, leaf| {
            let e = g.exp(leaf);
            let bm = g.tanh(e);
            g.mean(bm)
        })
    };
    let x: Vec<f64> = ramp(16, 0.1).into_data();
    let a = build(&x).unwrap();
    let b = build(&x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn quadratic_passes_tight_check() {
    let x = ramp(10, 0.37).into_data();
    let f = |x: &[f64]| {
        program(x, |g, leaf| {
            let sq = g.mul(leaf, leaf).unwrap();
            let k = g.scale(sq, 1.7);
            g.sum(k)
        })
    };
    let reports = finite_difference_check(f, &x, 1e-3, 10, 1).unwrap();
    assert_eq!(reports.len(), 10);
    assert!(reports.iter().all(|r| r.relative_error < 1e-8), "{reports:?}");
}

#[test]
fn detached_leaf_reports_zero_analytic_gradient() {
    let x = ramp(4, 0.5).into_data();
    let f = |x: &[f64]| {
        program(x, |g, leaf| {
            let d = g.detach(leaf);
            let sq = g.mul(d, d).unwrap();
            g.sum(sq)
        })
    };
    let reports = finite_difference_check(f, &x, 1e-4, 4, 3).unwrap();
    assert!(reports.iter().all(|r| r.analytic == 0.0 && r.numeric != 0.0));
}

#[test]
fn bilinear_sampling_passes_check_away_from_kinks() {
    // Image is a data constant; the leaf holds sampling coordinates.
    let img: Vec<f64> = (0..36).map(|i| libm::sin(i as f64 * 0.7) * 0.5 + 0.5).collect();
    let coords: Vec<f64> = (0..18).flat_map(|i| [0.37 + 0.29 * i as f64, 4.61 - 0.23 * i as f64]).collect();
    let f = |x: &[f64]| {
        let mut g = Graph::new();
        let im = g.constant(Tensor::new([6, 6, 1], img.clone()).unwrap());
        let leaf = g.leaf(Tensor::new([3, 6, 2], x.to_vec()).unwrap());
        let (s, _) = g.bilinear_sample(im, leaf).unwrap();
        let sq = g.mul(s, s).unwrap();
        let loss = g.mean(sq);
        let grads = g.backward(loss)?;
        Ok(Evaluation {
            value: g.value(loss).item(),
            gradient: grads.get_or_zeros(leaf, x.len()),
            signature: g.signature(),
        })
    };
    let reports = finite_difference_check(f, &coords, 1e-4, 20, 9).unwrap();
    assert!(!reports.is_empty());
    assert!(reports.iter().all(|r| r.relative_error < 1e-3), "{reports:?}");
}

#[test]
fn kinked_probes_are_redrawn() {
    // |x| at x = 0 is a kink: that coordinate must never be reported.
    let x = vec![0.0, 0.5, -0.25];
    let f = |x: &[f64]| {
        program(x, |g, leaf| {
            let a = g.abs(leaf);
            g.sum(a)
        })
    };
    let reports = finite_difference_check(f, &x, 1e-4, 3, 0).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.location != 0));
}

#[test]
fn every_op_passes_finite_differences() {
    // A single program touching each differentiable op.
    let k = crate::geometry::Intrinsics::new(4.0, 4.0, 1.5, 1.5).unwrap();
    let f = |x: &[f64]| {
        let mut g = Graph::new();
        let img = g.leaf(Tensor::new([4, 4, 3], x[..48].to_vec()).unwrap());
        let depth_raw = g.leaf(Tensor::new([4, 4, 1], x[48..64].to_vec()).unwrap());
        let pose = g.leaf(Tensor::vector(x[64..70].to_vec()));
        let light = g.leaf(Tensor::vector(x[70..73].to_vec()));
        let weight = g.leaf(Tensor::new([2, 3, 9], x[73..127].to_vec()).unwrap());
        let bias = g.leaf(Tensor::new([2, 1, 1], x[127..129].to_vec()).unwrap());

        let depth = g.exp(depth_raw);
        let (coords, valid) = g.correspondence(depth, pose, k).unwrap();
        let (warped, _) = g.bilinear_sample(img, coords).unwrap();
        let params = g.light_squash(light).unwrap();
        let l = g.illumination(params, 4, 4).unwrap();
        let lit = g.mul(warped, l).unwrap();
        let boxed = g.box_mean(lit, 1);
        let sig = g.sigmoid(boxed);
        let mono = g.channel_mean(sig);
        let dx = g.diff_x(mono).unwrap();
        let dy = g.diff_y(mono).unwrap();
        let adx = g.abs(dx);
        let ady = g.abs(dy);
        let both = g.minimum(adx, ady).unwrap();
        let conv = g.conv3x3(img, weight, bias).unwrap();
        let th = g.tanh(conv);
        let cm = g.channel_mean(th);
        let shifted = g.offset(cm, 2.0);
        let lg = g.ln(shifted);
        let ratio = g.div(both, shifted).unwrap();
        let filled = g.fill(ratio, &valid, 0.0).unwrap();
        let m1 = g.masked_mean(filled, &[true; 16]).unwrap();
        let m2 = g.mean(lg);
        let p = g.percentile(mono, 80.0).unwrap();
        let pc = g.clamp_min(p, 1e-4);
        let sub = g.sub(m1, m2).unwrap();
        let t = g.add(sub, pc).unwrap();
        let loss = g.scale(t, 3.0);
        let grads = g.backward(loss)?;
        let mut gradient = Vec::new();
        for id in [img, depth_raw, pose, light, weight, bias] {
            gradient.extend(grads.get_or_zeros(id, g.value(id).len()));
        }
        Ok(Evaluation { value: g.value(loss).item(), gradient, signature: g.signature() })
    };
    let mut x: Vec<f64> = (0..129).map(|i| 0.5 + 0.4 * libm::sin(1.3 * i as f64)).collect();
    for v in &mut x[48..64] {
        *v *= 0.2;
    }
    x[64..70].copy_from_slice(&[0.02, -0.03, 0.01, 0.1, -0.05, 0.02]);
    x[70..73].copy_from_slice(&[0.3, -0.2, -1.0]);
    let reports = finite_difference_check(f, &x, 1e-4, 129, 5).unwrap();
    assert!(reports.len() > 60, "only {} kink-free probes", reports.len());
    let worst = reports.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    assert!(worst < 1e-3, "{:?}", reports.iter().filter(|r| r.relative_error >= 1e-3).collect::<Vec<_>>());
}

#[test]
fn corrupted_vjp_is_detected() {
    let f = |x: &[f64]| {
        let mut g = Graph::new();
        g.corrupt_illumination_vjp_for_testing();
        let leaf = g.leaf(Tensor::vector(x.to_vec()));
        let l = g.illumination(leaf, 6, 6).unwrap();
        let loss = g.mean(l);
        let grads = g.backward(loss)?;
        Ok(Evaluation { value: g.value(loss).item(), gradient: grads.get_or_zeros(leaf, 3), signature: g.signature() })
    };
    let reports = finite_difference_check(f, &[0.3, 0.6, 2.0], 1e-4, 3, 0).unwrap();
    assert!(reports.iter().any(|r| r.relative_error > 1e-3));
}

proptest! {
    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let x: Vec<f64> = (0..6).map(|i| libm::sin((seed + i) as f64)).collect();
        let f_part = |g: &mut Graph, leaf: NodeId| { let e = g.exp(leaf); g.sum(e) };
        let g_part = |g: &mut Graph, leaf: NodeId| { let s = g.sigmoid(leaf); let q = g.mul(s, leaf).unwrap(); g.mean(q) };
        let gf = program(&x, f_part).unwrap().gradient;
        let gg = program(&x, g_part).unwrap().gradient;
        let combined = program(&x, |g, leaf| {
            let fv = f_part(g, leaf);
            let gv = g_part(g, leaf);
            let fa = g.scale(fv, a);
            let gb = g.scale(gv, b);
            g.add(fa, gb).unwrap()
        }).unwrap().gradient;
        for i in 0..6 {
            prop_assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn masks_enter_the_branch_signature() {
    let sig = |mask: &[bool]| {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new([1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let kept = g.fill(x, mask, 0.0).unwrap();
        g.masked_mean(kept, mask).unwrap();
        g.signature()
    };
    assert_eq!(sig(&[true, false, true]), sig(&[true, false, true]));
    assert_ne!(sig(&[true, false, true]), sig(&[true, true, true]));
    assert_eq!(Graph::default().signature(), Graph::new().signature());
}
