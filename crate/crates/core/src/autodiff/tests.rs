use super::*;
use crate::error::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct quadruple-loop cross-correlation.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize, stride: usize) -> Vec<f64> {
    let [bn, c, h, wd] = x.dims4("x").unwrap();
    let [k, _, kh, kw] = w.dims4("w").unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for bi in 0..bn {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.data()[ki];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((ki * c + ci) * kh + dy) * kw + dx];
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 1, 5, 4]);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let w = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(xv, w, b, 0, 1).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn conv_box_filter_on_constant() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 1, 6, 6], 3.5));
    let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, w, b, 1, 1).unwrap();
    let v = t.value(y).data();
    for yy in 1..5 {
        for xx in 1..5 {
            assert!((v[yy * 6 + xx] - 3.5).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_matches_naive_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (pad, stride) in [(1, 1), (0, 1), (1, 2)] {
        let x = rand_tensor(&mut rng, &[2, 3, 6, 6]);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = match t.conv2d(xv, wv, bv, pad, stride) {
            Ok(y) => y,
            Err(_) => continue,
        };
        let naive = naive_conv(&x, &w, &b, pad, stride);
        let diff = t.value(y).data().iter().zip(&naive).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "pad {pad} stride {stride}: {diff}");
    }
}

#[test]
fn conv_shape_errors() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = t.constant(Tensor::zeros(&[3, 1, 3, 3]));
    let b = t.constant(Tensor::zeros(&[3]));
    assert!(matches!(t.conv2d(x, w, b, 1, 1), Err(Error::Shape(_))));
    let w2 = t.constant(Tensor::zeros(&[3, 2, 2, 2]));
    assert!(t.conv2d(x, w2, b, 1, 1).is_err());
    let w3 = t.constant(Tensor::zeros(&[3, 2, 3, 3]));
    assert!(t.conv2d(x, w3, b, 0, 2).is_err()); // (4 − 3) / 2 not integral
}

#[test]
fn relu_and_maxpool_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 2.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = t.maxpool2x2(x).unwrap();
    assert_eq!(t.value(p).data(), &[4.0]);
    let s = t.sum(p).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);

    // tie goes to the first window position
    let mut t = Tape::new();
    let x = t.param(Tensor::full(&[1, 1, 2, 2], 1.0));
    let p = t.maxpool2x2(x).unwrap();
    let s = t.sum(p).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);

    let odd = t.constant(Tensor::zeros(&[1, 1, 3, 2]));
    assert!(t.maxpool2x2(odd).is_err());
}

#[test]
fn upsample_then_pool_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let u = t.upsample2x(v).unwrap();
        let p = t.maxpool2x2(u).unwrap();
        assert_eq!(t.value(p), &x);
    }
}

#[test]
fn softmax_and_cross_entropy_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(&[1, 4]));
    let p = t.softmax_rows(x).unwrap();
    assert!(t.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let l = t.cross_entropy_rows(p, &[3]).unwrap();
    assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap());
    let p = t.softmax_rows(x).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 0.0]);
    let l = t.cross_entropy_rows(p, &[2]).unwrap();
    assert_eq!(t.value(l).item(), 1000.0);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, -1.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(&[2, 3]));
    let p = t.softmax_rows(x).unwrap();
    assert!(matches!(t.cross_entropy_rows(p, &[1, 4]), Err(Error::IndexOutOfRange { .. })));
    assert!(t.cross_entropy_rows(p, &[0, 1]).is_err());
    assert!(t.cross_entropy_rows(p, &[1]).is_err());
}

#[test]
fn fused_and_unfused_cross_entropy_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = rand_tensor(&mut rng, &[3, 5]);
    let targets = [2, 5, 1];
    let fused = {
        let mut t = Tape::new();
        let x = t.param(logits.clone());
        let p = t.softmax_rows(x).unwrap();
        let l = t.cross_entropy_rows(p, &targets).unwrap();
        t.backward(l).unwrap();
        (t.value(l).item(), t.grad(x).unwrap().clone())
    };
    let unfused = {
        let mut t = Tape::new();
        let x = t.param(logits.clone());
        let p = t.softmax_rows(x).unwrap();
        let p2 = t.mul_scalar(p, 1.0).unwrap();
        let l = t.cross_entropy_rows(p2, &targets).unwrap();
        t.backward(l).unwrap();
        (t.value(l).item(), t.grad(x).unwrap().clone())
    };
    assert!((fused.0 - unfused.0).abs() < 1e-12);
    for (a, b) in fused.1.data().iter().zip(unfused.1.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn backward_simple_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = rand_tensor(&mut rng, &[3, 4]);
    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    assert!(matches!(t.backward(s), Err(Error::RecordConsumed)));

    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    let l = t.mul_scalar(s, 0.5).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &x0);

    let mut t = Tape::new();
    let x = t.param(x0);
    assert!(t.backward(x).is_err());
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
    let p = t.mul_scalar(x, 1.0).unwrap();
    // −ln 0
    assert!(matches!(t.cross_entropy_rows(p, &[2]), Err(Error::NonFinite(_))));
}

#[test]
fn bce_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(&[4]));
    let l = t.bce_with_logits(x, &[1.0, 0.0, 1.0, 0.0]).unwrap();
    assert!((t.value(l).item() - 2f64.ln()).abs() < 1e-15);
    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[2], vec![50.0, -50.0]).unwrap());
    let l = t.bce_with_logits(x, &[1.0, 0.0]).unwrap();
    assert!(t.value(l).item() < 1e-20);
}

type Case = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> crate::error::Result<Var>>, Vec<Vec<usize>>);

fn primitive_cases() -> Vec<Case> {
    vec![
        ("conv2d", Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            let q = t.mul(y, y)?;
            t.sum(q)
        }), vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]]),
        ("relu", Box::new(|t, v| {
            let y = t.relu(v[0])?;
            let q = t.mul(y, y)?;
            t.sum(q)
        }), vec![vec![2, 7]]),
        ("maxpool", Box::new(|t, v| {
            let y = t.maxpool2x2(v[0])?;
            let q = t.mul(y, y)?;
            t.sum(q)
        }), vec![vec![1, 2, 4, 6]]),
        ("upsample", Box::new(|t, v| {
            let y = t.upsample2x(v[0])?;
            let q = t.mul(y, y)?;
            t.sum(q)
        }), vec![vec![1, 2, 3, 2]]),
        ("concat", Box::new(|t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            let q = t.mul(y, y)?;
            t.sum(q)
        }), vec![vec![2, 1, 3, 3], vec![2, 2, 3, 3]]),
        ("softmax_ce", Box::new(|t, v| {
            let p = t.softmax_rows(v[0])?;
            t.cross_entropy_rows(p, &[1, 3, 4])
        }), vec![vec![3, 4]]),
        ("pad_crop", Box::new(|t, v| {
            let p = t.pad2d(v[0], 5, 6)?;
            let q = t.mul(p, p)?;
            let c = t.crop2d(q, 2, 3)?;
            t.sum(c)
        }), vec![vec![1, 2, 3, 4]]),
    ]
}

#[test]
fn primitive_gradients() {
    for (name, f, shapes) in primitive_cases() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let r = grad_check_inputs(&f, &inputs, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-6, "{name} seed {seed}: {r:?}");
            assert!(r.checked > 0);
        }
    }
}

#[test]
fn grad_check_detects_wrong_backward() {
    let sum_err = grad_check(|t, x| t.sum(x), &Tensor::full(&[5], 0.3), 1e-5).unwrap();
    assert!(sum_err < 1e-10);
    let wrong = Elementwise { name: "bad_square", f: |v| v * v, df: |v| v };
    let err = grad_check(
        |t, x| {
            let y = t.map(x, wrong)?;
            t.sum(y)
        },
        &Tensor::full(&[4], 0.7),
        1e-5,
    )
    .unwrap();
    assert!(err > 1e-2, "{err}");
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    let w0 = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b0 = rand_tensor(&mut rng, &[3]);
    let run = |a: f64, c: f64| {
        let mut t = Tape::new();
        let (x, w, b) = (t.param(x0.clone()), t.param(w0.clone()), t.param(b0.clone()));
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        let r = t.relu(y).unwrap();
        let l1 = t.sum(r).unwrap();
        let sq = t.mul(y, y).unwrap();
        let l2 = t.mean(sq).unwrap();
        let s1 = t.mul_scalar(l1, a).unwrap();
        let s2 = t.mul_scalar(l2, c).unwrap();
        let l = t.add(s1, s2).unwrap();
        t.backward(l).unwrap();
        t.grad(w).unwrap().clone()
    };
    let (g1, g2, g12) = (run(1.0, 0.0), run(0.0, 1.0), run(2.0, -3.0));
    for ((a, b), c) in g1.data().iter().zip(g2.data()).zip(g12.data()) {
        assert!((2.0 * a - 3.0 * b - c).abs() < 1e-12);
    }
}

#[test]
fn deterministic_and_mode_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x0 = rand_tensor(&mut rng, &[4, 2, 6, 6]);
    let w0 = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b0 = rand_tensor(&mut rng, &[3]);
    let run = |exec| {
        let mut t = Tape::with_exec(exec);
        let (x, w, b) = (t.param(x0.clone()), t.param(w0.clone()), t.param(b0.clone()));
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        let q = t.mul(y, y).unwrap();
        let l = t.sum(q).unwrap();
        t.backward(l).unwrap();
        (t.value(y).clone(), t.grad(x).unwrap().clone(), t.grad(w).unwrap().clone())
    };
    let a = run(crate::exec::Exec::Sequential);
    let b = run(crate::exec::Exec::Parallel);
    let c = run(crate::exec::Exec::Parallel);
    assert_eq!(a, b);
    assert_eq!(b, c);
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = t.param(Tensor::full(&[1, 1, 3, 3], 0.5));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, w, b, 1, 1).unwrap();
    let l = t.sum(y).unwrap();
    t.backward(l).unwrap();
    assert!(t.grad(x).is_none());
    assert!(t.grad(b).is_none());
    assert!(t.grad(w).is_some());
    assert!(t.grad(y).is_some());
}
