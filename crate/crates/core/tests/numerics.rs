use bimal_core::numerics::{finite_diff_check, Graph, Primitive, Tensor, Var};
use bimal_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar with non-uniform weights so every output
/// coordinate influences the checked gradient differently.
fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let n = g.value(v).len();
    let w = Tensor::new(
        g.shape(v).to_vec(),
        (0..n).map(|i| 0.3 + 0.1 * ((i * 7) % 11) as f64).collect(),
    )?;
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn check(
    mut f: impl FnMut(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
) -> f64 {
    finite_diff_check(
        |g, v| {
            let out = f(g, v)?;
            weighted_sum(g, out)
        },
        inputs,
        1e-5,
    )
    .unwrap()
}

#[test]
fn every_primitive_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let b = uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let pos = uniform(&[2, 3], 0.5, 2.0, &mut rng);
    let row = uniform(&[3], -1.0, 1.0, &mut rng);

    let cases: Vec<(&str, Primitive, Vec<Tensor>)> = vec![
        ("add", Primitive::Add, vec![a.clone(), b.clone()]),
        ("sub", Primitive::Sub, vec![a.clone(), b.clone()]),
        ("mul", Primitive::Mul, vec![a.clone(), b.clone()]),
        ("div", Primitive::Div, vec![a.clone(), pos.clone()]),
        ("neg", Primitive::Neg, vec![a.clone()]),
        ("exp", Primitive::Exp, vec![a.clone()]),
        ("log", Primitive::Log, vec![pos.clone()]),
        ("tanh", Primitive::Tanh, vec![a.clone()]),
        ("sum", Primitive::Sum, vec![a.clone()]),
        ("mean", Primitive::Mean, vec![a.clone()]),
        ("broadcast", Primitive::Broadcast(vec![4, 3]), vec![row.clone()]),
        ("reshape", Primitive::Reshape(vec![3, 2]), vec![a.clone()]),
        ("slice", Primitive::Slice(vec![0..2, 1..3]), vec![a.clone()]),
        ("concat", Primitive::Concat { axis: 1 }, vec![a.clone(), b.clone()]),
    ];
    for (name, op, inputs) in cases {
        let err = check(|g, v| g.apply_primitive(op.clone(), v), &inputs);
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn auxiliary_ops_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform(&[2, 2, 3], -1.0, 1.0, &mut rng);
    let w = uniform(&[3, 3], -1.0, 1.0, &mut rng);
    assert!(check(|g, v| g.matmul_channels(v[0], v[1]), &[w.clone(), x.clone()]) < 1e-4);
    assert!(check(|g, v| g.log_softmax_channels(v[0]), std::slice::from_ref(&x)) < 1e-5);
    assert!(check(|g, v| g.permute(v[0], &[2, 0, 1]), std::slice::from_ref(&x)) < 1e-4);
    assert!(check(|g, v| g.sum_last(v[0]), std::slice::from_ref(&x)) < 1e-4);
    assert!(check(|g, v| Ok(g.scale(v[0], -2.5)), std::slice::from_ref(&x)) < 1e-4);
    assert!(check(|g, v| Ok(g.add_scalar(v[0], 0.7)), std::slice::from_ref(&x)) < 1e-4);

    let img = uniform(&[4, 4, 2], -1.0, 1.0, &mut rng);
    let k = uniform(&[3, 3, 2, 3], -1.0, 1.0, &mut rng);
    let bias = uniform(&[3], -1.0, 1.0, &mut rng);
    assert!(check(|g, v| g.conv2d(v[0], v[1], v[2]), &[img.clone(), k.clone(), bias.clone()]) < 1e-4);
    let batch = uniform(&[2, 4, 4, 2], -1.0, 1.0, &mut rng);
    assert!(check(|g, v| g.conv2d(v[0], v[1], v[2]), &[batch, k, bias]) < 1e-4);
}

#[test]
fn tanh_derivative_at_half() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![0.5]));
    let y = g.tanh(x);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    let analytic = grads.get(x).unwrap().data()[0];
    assert!((analytic - 0.786448).abs() < 1e-6);
    let h = 1e-5;
    let numeric = ((0.5f64 + h).tanh() - (0.5f64 - h).tanh()) / (2.0 * h);
    assert!((analytic - numeric).abs() / analytic < 1e-6);
}

fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
    let [h, w, cin] = x.shape()[..] else { panic!() };
    let cout = k.shape()[3];
    let mut out = vec![0.0; h * w * cout];
    for i in 0..h {
        for j in 0..w {
            for o in 0..cout {
                let mut acc = b.data()[o];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (yy, xx) = (i as isize + dy as isize - 1, j as isize + dx as isize - 1);
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        for c in 0..cin {
                            let xv = x.data()[(yy as usize * w + xx as usize) * cin + c];
                            acc += xv * k.data()[((dy * 3 + dx) * cin + c) * cout + o];
                        }
                    }
                }
                out[(i * w + j) * cout + o] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_quadruple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (cin, cout) in [(2, 1), (2, 3), (1, 4)] {
        let x = uniform(&[4, 4, cin], -1.0, 1.0, &mut rng);
        let k = uniform(&[3, 3, cin, cout], -1.0, 1.0, &mut rng);
        let b = uniform(&[cout], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, kv, bv).unwrap();
        let want = naive_conv(&x, &k, &b);
        let diff = g
            .value(y)
            .data()
            .iter()
            .zip(&want)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-12, "{diff}");
    }
}

#[test]
fn matmul_channels_matches_per_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(&[2, 2, 3], -1.0, 1.0, &mut rng);
    let w = uniform(&[3, 3], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let (wv, xv) = (g.constant(w.clone()), g.constant(x.clone()));
    let y = g.matmul_channels(wv, xv).unwrap();
    for p in 0..4 {
        for i in 0..3 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += w.data()[i * 3 + j] * x.data()[p * 3 + j];
            }
            assert!((g.value(y).data()[p * 3 + i] - acc).abs() < 1e-14);
        }
    }
}

#[test]
fn primitives_are_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform(&[3, 4, 6], -3.0, 3.0, &mut rng);
    let run = || {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let l = g.log_softmax_channels(v).unwrap();
        let t = g.tanh(l);
        g.value(t).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn log_softmax_normalizes(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![2, 6], data).unwrap());
        let l = g.log_softmax_channels(v).unwrap();
        for row in g.value(l).data().chunks(6) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_gradients_random(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = uniform(&[3], -2.0, 2.0, &mut rng);
        let b = uniform(&[3], 0.5, 2.0, &mut rng);
        let err = check(
            |g, v| {
                let q = g.div(v[0], v[1])?;
                let e = g.exp(q);
                let l = g.log(v[1])?;
                let t = g.tanh(e);
                g.mul(t, l)
            },
            &[a, b],
        );
        prop_assert!(err < 1e-4);
    }
}
