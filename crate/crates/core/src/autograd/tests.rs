use super::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "a={a} b={b} |diff|={}", (a - b).abs());
}

#[test]
fn matmul_hand_example() {
    let tape = Tape::new();
    let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let b = tape.leaf(vec![1.0, 1.0], &[2, 1]);
    assert_eq!(a.matmul(&b).value(), vec![3.0, 7.0]);
}

#[test]
fn softplus_at_zero_is_log_two() {
    let tape = Tape::new();
    let x = tape.scalar(0.0);
    assert_close(x.softplus().scalar(), std::f64::consts::LN_2, 1e-15);
}

#[test]
fn softplus_stable_branch_matches_definition() {
    let tape = Tape::new();
    let x = tape.leaf(vec![25.0, -30.0, 20.0001], &[3]);
    let y = x.softplus().value();
    assert_close(y[0], 25.0 + (-25.0f64).exp().ln_1p(), 1e-15);
    assert_close(y[1], (-30.0f64).exp().ln_1p(), 1e-18);
    assert!(y[2] > 20.0);
}

#[test]
fn clip_grad_forward_identity_backward_clipped() {
    let tape = Tape::new();
    let x = tape.leaf_grad(vec![5.0], &[1]);
    let y = x.clip_grad(10.0);
    assert_eq!(y.value(), vec![5.0]);
    // Upstream gradient 100 via scaling.
    let loss = y.scale(100.0).sum();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![10.0]);
}

#[test]
fn clip_grad_is_identity_forward_for_any_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tape = Tape::new();
    let data: Vec<f64> = (0..64).map(|_| rng.random_range(-1e6..1e6)).collect();
    let x = tape.leaf(data.clone(), &[64]);
    assert_eq!(x.clip_grad(10.0).value(), data);
}

#[test]
fn backward_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.leaf_grad(vec![1.0, 2.0, 3.0], &[3]);
    let loss = (&x * &x).sum();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
}

#[test]
fn backward_tanh_at_zero() {
    let tape = Tape::new();
    let x = tape.leaf_grad(vec![0.0], &[1]);
    let loss = x.tanh().sum();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0]);
}

#[test]
fn backward_matmul_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();

    let b_fixed = b.clone();
    let err = grad_check_shaped(
        move |tape, x| {
            let bt = tape.leaf(b_fixed.clone(), &[3, 3]);
            x.matmul(&bt).sum()
        },
        &a,
        &[3, 3],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "matmul dA rel err {err}");

    let a_fixed = a.clone();
    let err = grad_check_shaped(
        move |tape, x| {
            let at = tape.leaf(a_fixed.clone(), &[3, 3]);
            at.matmul(x).sum()
        },
        &b,
        &[3, 3],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "matmul dB rel err {err}");
}

#[test]
fn gradient_accumulation_is_additive() {
    // backward of f(x) + g(x) equals backward of f plus backward of g, exactly.
    let point = vec![0.3, -0.7, 1.2];
    let run = |which: u8| -> Vec<f64> {
        let tape = Tape::new();
        let x = tape.leaf_grad(point.clone(), &[3]);
        let f = x.square().sum();
        let g = x.tanh().sum();
        let loss = match which {
            0 => f,
            1 => g,
            _ => f + g,
        };
        tape.backward(&loss).unwrap();
        x.grad().unwrap()
    };
    let (gf, gg, gsum) = (run(0), run(1), run(2));
    for i in 0..3 {
        assert_eq!(gsum[i], gf[i] + gg[i]);
    }
}

#[test]
fn fan_out_accumulates() {
    let tape = Tape::new();
    let x = tape.leaf_grad(vec![2.0], &[1]);
    let y = &x * &x; // x used twice
    let loss = y.sum();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::new();
    let x = tape.leaf_grad(vec![1.0, 2.0], &[2]);
    let err = tape.backward(&x).unwrap_err();
    assert!(err.to_string().contains("scalar"));
}

#[test]
fn backward_twice_rejected() {
    let tape = Tape::new();
    let x = tape.leaf_grad(vec![1.0], &[1]);
    let loss = x.square().sum();
    tape.backward(&loss).unwrap();
    let err = tape.backward(&loss).unwrap_err();
    assert!(err.to_string().contains("consumed"));
}

#[test]
#[should_panic(expected = "matmul")]
fn matmul_shape_mismatch_names_op_and_shapes() {
    let tape = Tape::new();
    let a = tape.leaf(vec![0.0; 6], &[2, 3]);
    let b = tape.leaf(vec![0.0; 4], &[2, 2]);
    let _ = a.matmul(&b);
}

#[test]
#[should_panic(expected = "add")]
fn add_shape_mismatch_rejected() {
    let tape = Tape::new();
    let a = tape.leaf(vec![0.0; 6], &[2, 3]);
    let b = tape.leaf(vec![0.0; 4], &[4]);
    let _ = &a + &b;
}

#[test]
fn non_finite_input_rejected_in_debug() {
    if !cfg!(debug_assertions) {
        return;
    }
    let result = std::panic::catch_unwind(|| {
        let tape = Tape::new();
        let _ = tape.leaf(vec![f64::NAN], &[1]);
    });
    assert!(result.is_err());
}

#[test]
fn broadcast_trailing_alignment() {
    let tape = Tape::new();
    let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
    let b = tape.leaf(vec![10.0, 20.0, 30.0], &[3]);
    let c = &a + &b;
    assert_eq!(c.value(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);

    let col = tape.leaf(vec![100.0, 200.0], &[2, 1]);
    let d = &a + &col;
    assert_eq!(d.value(), vec![101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);
}

#[test]
fn broadcast_backward_reduces() {
    let err = grad_check(
        |tape, x| {
            let big = tape.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
            (&big * &x.reshape(&[1, 3])).sum()
        },
        &[0.5, -0.5, 2.0],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "broadcast rel err {err}");
}

#[test]
fn slice_and_concat_roundtrip_gradients() {
    let err = grad_check_shaped(
        |tape, x| {
            let left = x.slice_axis(1, 0, 2);
            let right = x.slice_axis(1, 2, 1);
            let back = tape.concat(&[&right, &left], 1);
            (back.square()).sum()
        },
        &[1.0, -2.0, 3.0, 0.5, 0.25, -1.5],
        &[2, 3],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "slice/concat rel err {err}");
}

#[test]
fn every_primitive_passes_gradcheck_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..20 {
        let _ = seed;
        let point: Vec<f64> = (0..6).map(|_| rng.random_range(-0.9..0.9)).collect();
        let other: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();

        let cases: Vec<(&str, Box<dyn Fn(&Tape, &Tensor) -> Tensor>)> = {
            let o = other.clone();
            vec![
                ("exp", Box::new(|_: &Tape, x: &Tensor| x.exp().sum())),
                ("log", Box::new(|_: &Tape, x: &Tensor| x.add_scalar(2.0).log().sum())),
                ("tanh", Box::new(|_: &Tape, x: &Tensor| x.tanh().sum())),
                ("softplus", Box::new(|_: &Tape, x: &Tensor| x.softplus().sum())),
                ("leaky_relu", Box::new(|_: &Tape, x: &Tensor| x.leaky_relu().sum())),
                ("square", Box::new(|_: &Tape, x: &Tensor| x.square().sum())),
                ("negate", Box::new(|_: &Tape, x: &Tensor| x.negate().sum())),
                ("mean", Box::new(|_: &Tape, x: &Tensor| x.square().mean())),
                (
                    "mul_div",
                    Box::new(move |tape: &Tape, x: &Tensor| {
                        let o = tape.leaf(o.clone(), &[6]);
                        ((x * &o) / &o.square()).sum()
                    }),
                ),
                (
                    "sum_axis",
                    Box::new(|_: &Tape, x: &Tensor| {
                        x.reshape(&[2, 3]).sum_axis(1).square().sum()
                    }),
                ),
                (
                    "mean_axis",
                    Box::new(|_: &Tape, x: &Tensor| {
                        x.reshape(&[2, 3]).mean_axis(0).square().sum()
                    }),
                ),
                (
                    "minimum",
                    Box::new(move |tape: &Tape, x: &Tensor| {
                        let o = tape.leaf(vec![0.1, -0.2, 0.3, -0.4, 0.5, -0.6], &[6]);
                        x.minimum(&o).square().sum()
                    }),
                ),
            ]
        };
        for (name, f) in cases {
            let err = grad_check(f, &point, 1e-5).unwrap();
            assert!(err < 1e-7, "{name} rel err {err} at seed {seed}");
        }
    }
}

#[test]
fn conv_ops_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..2 * 2 * 4 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..3 * 2 * 3 * 3).map(|_| rng.random_range(-0.5..0.5)).collect();

    // Gradient w.r.t. the conv input.
    let kf = k.clone();
    let err = grad_check_shaped(
        move |tape, x| {
            let kt = tape.leaf(kf.clone(), &[3, 2, 3, 3]);
            x.conv2d_s2(&kt).square().sum()
        },
        &x,
        &[2, 2, 4, 4],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "conv2d input rel err {err}");

    // Gradient w.r.t. the conv kernel.
    let xf = x.clone();
    let err = grad_check_shaped(
        move |tape, kt| {
            let xt = tape.leaf(xf.clone(), &[2, 2, 4, 4]);
            xt.conv2d_s2(kt).square().sum()
        },
        &k,
        &[3, 2, 3, 3],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "conv2d kernel rel err {err}");

    // Transposed conv, both gradients. Kernel layout [c_in, c_out, 3, 3].
    let kt_data: Vec<f64> = (0..2 * 3 * 3 * 3).map(|_| rng.random_range(-0.5..0.5)).collect();
    let kf = kt_data.clone();
    let err = grad_check_shaped(
        move |tape, x| {
            let kt = tape.leaf(kf.clone(), &[2, 3, 3, 3]);
            x.conv_transpose2d_s2(&kt).square().sum()
        },
        &x,
        &[2, 2, 4, 4],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "conv_t input rel err {err}");

    let xf = x.clone();
    let err = grad_check_shaped(
        move |tape, kt| {
            let xt = tape.leaf(xf.clone(), &[2, 2, 4, 4]);
            xt.conv_transpose2d_s2(kt).square().sum()
        },
        &kt_data,
        &[2, 3, 3, 3],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "conv_t kernel rel err {err}");
}

#[test]
fn conv_shapes_halve_and_double() {
    let tape = Tape::new();
    let x = tape.leaf(vec![0.0; 1 * 1 * 16 * 16], &[1, 1, 16, 16]);
    let k = tape.leaf(vec![0.0; 4 * 1 * 3 * 3], &[4, 1, 3, 3]);
    let y = x.conv2d_s2(&k);
    assert_eq!(y.shape(), vec![1, 4, 8, 8]);

    let kt = tape.leaf(vec![0.0; 4 * 2 * 3 * 3], &[4, 2, 3, 3]);
    let z = y.conv_transpose2d_s2(&kt);
    assert_eq!(z.shape(), vec![1, 2, 16, 16]);
}

#[test]
fn grad_check_constant_function_is_zero() {
    let err = grad_check(|tape, _x| tape.scalar(3.5), &[1.0, 2.0], 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_exp_example() {
    let err = grad_check(|_, x| x.exp().sum(), &[0.0, 1.0], 1e-5).unwrap();
    assert!(err < 1e-7, "rel err {err}");
}

#[test]
fn grad_check_rejects_non_finite() {
    // log of a negative perturbed point produces NaN.
    let err = grad_check(|_, x| x.log().sum(), &[1e-9], 1e-5);
    assert!(err.is_err());
}

#[test]
fn detach_stops_gradients() {
    let tape = Tape::new();
    let x = tape.leaf_grad(vec![2.0], &[1]);
    let d = x.square().detach();
    let loss = (&d * &x).sum();
    tape.backward(&loss).unwrap();
    // Only the direct x path contributes: d(d*x)/dx = d = 4.
    assert_eq!(x.grad().unwrap(), vec![4.0]);
    assert!(!d.requires_grad());
}

#[test]
fn minimum_is_exact_and_routes_gradient() {
    let tape = Tape::new();
    let a = tape.leaf_grad(vec![1.0, 5.0], &[2]);
    let b = tape.leaf_grad(vec![3.0, 2.0], &[2]);
    let m = a.minimum(&b);
    assert_eq!(m.value(), vec![1.0, 2.0]);
    tape.backward(&m.sum()).unwrap();
    assert_eq!(a.grad().unwrap(), vec![1.0, 0.0]);
    assert_eq!(b.grad().unwrap(), vec![0.0, 1.0]);
}

#[test]
fn adam_first_step_identity() {
    let p = Param::new("p", vec![1], vec![0.0]);
    assert!(adam_update(&p, &[1.0], 0.001));
    let v = p.value()[0];
    assert_close(v, -0.001, 1e-6);
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let p = Param::new("p", vec![2], vec![0.5, -0.5]);
    assert!(adam_update(&p, &[0.0, 0.0], 0.01));
    assert_eq!(p.value(), vec![0.5, -0.5]);
}

#[test]
fn adam_nan_gradient_skips_update() {
    let p = Param::new("p", vec![1], vec![0.25]);
    assert!(!adam_update(&p, &[f64::NAN], 0.01));
    assert_eq!(p.value(), vec![0.25]);
    assert_eq!(p.borrow().adam_t, 0);
}

#[test]
fn adam_converges_on_quadratic() {
    let p = Param::new("x", vec![1], vec![1.0]);
    for _ in 0..1000 {
        let tape = Tape::new();
        let x = tape.param(&p);
        let loss = x.square().sum();
        tape.backward(&loss).unwrap();
        adam_step_group(&tape, &[p.clone()], 0.01);
    }
    assert!(p.value()[0].abs() < 0.01, "x = {}", p.value()[0]);
}

#[test]
fn param_bound_twice_shares_one_leaf() {
    let p = Param::new("w", vec![1], vec![3.0]);
    let tape = Tape::new();
    let a = tape.param(&p);
    let b = tape.param(&p);
    assert_eq!(a.id(), b.id());
    let loss = (&a * &b).sum();
    tape.backward(&loss).unwrap();
    let grads = tape.param_grads();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads[0].1, vec![6.0]);
}

#[test]
fn unreached_param_gets_no_gradient() {
    let p = Param::new("w", vec![1], vec![3.0]);
    let q = Param::new("u", vec![1], vec![4.0]);
    let tape = Tape::new();
    let a = tape.param(&p);
    let _b = tape.param(&q);
    tape.backward(&a.square().sum()).unwrap();
    let grads = tape.param_grads();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads[0].0.name(), "w");
}
