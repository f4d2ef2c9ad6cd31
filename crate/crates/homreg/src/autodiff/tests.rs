use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Central-difference check of analytic parameter gradients for a scalar
/// function rebuilt from raw tensors on every evaluation.
fn check_grads(params: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
    let eval = |ps: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(t.clone(), i))
            .collect();
        let root = build(&mut tape, &vars);
        tape.value(root).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(t.clone(), i))
        .collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root);

    let eps = 1e-5;
    for (pi, p) in params.iter().enumerate() {
        let g = grads
            .by_param
            .get(&pi)
            .unwrap_or_else(|| panic!("missing grad for param {pi}"));
        let n = p.numel();
        let stride = (n / 64).max(1); // probe at most ~64 entries per tensor
        for idx in (0..n).step_by(stride) {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[idx] += eps;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[idx] -= eps;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let ana = g.data()[idx];
            let denom = ana.abs().max(num.abs()).max(1e-4);
            assert!(
                (ana - num).abs() / denom < tol,
                "param {pi} idx {idx}: analytic {ana} numeric {num}"
            );
        }
    }
}

#[test]
fn grad_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for stride in [1, 2] {
        let params = vec![
            rand_tensor(vec![2, 6, 6], &mut rng),
            rand_tensor(vec![3, 2, 3, 3], &mut rng),
            rand_tensor(vec![3], &mut rng),
        ];
        check_grads(
            &params,
            move |t, v| {
                let y = conv2d(t, v[0], v[1], v[2], stride, 1);
                mean_all(t, y)
            },
            1e-5,
        );
    }
}

#[test]
fn grad_instance_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = vec![
        rand_tensor(vec![3, 5, 4], &mut rng),
        rand_tensor(vec![3], &mut rng),
        rand_tensor(vec![3], &mut rng),
    ];
    check_grads(
        &params,
        |t, v| {
            let y = instance_norm(t, v[0], v[1], v[2]);
            // square so the mean-invariance of normalization doesn't hide errors
            let y2 = add(t, y, y);
            let z = mse_const(t, y2, Tensor::zeros(vec![3, 5, 4]));
            z
        },
        1e-4,
    );
}

#[test]
fn grad_pool_upsample_concat_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = vec![
        rand_tensor(vec![2, 4, 4], &mut rng),
        rand_tensor(vec![3, 4, 4], &mut rng),
    ];
    check_grads(
        &params,
        |t, v| {
            let p = maxpool2(t, v[0]);
            let u = upsample_nearest2(t, p);
            let cat = concat_c(t, u, v[1]);
            let g = global_avg_pool(t, cat);
            mse_const(t, g, Tensor::new(vec![5], vec![0.3; 5]))
        },
        1e-5,
    );
}

#[test]
fn grad_linear_softmax_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = vec![
        rand_tensor(vec![6], &mut rng),
        rand_tensor(vec![8, 6], &mut rng),
        rand_tensor(vec![8], &mut rng),
    ];
    check_grads(
        &params,
        |t, v| {
            let y = linear(t, v[0], v[1], v[2]);
            let s = block_softmax(t, y, 4);
            let m = mse_const(t, s, Tensor::new(vec![8], vec![0.25; 8]));
            let l = l1_const(t, y, Tensor::new(vec![8], vec![10.0; 8]));
            let ls = scale(t, l, 0.01);
            add(t, m, ls)
        },
        1e-5,
    );
}

#[test]
fn grad_relu_away_from_kink() {
    let params = vec![Tensor::new(vec![4], vec![0.5, -0.7, 1.2, -0.1])];
    check_grads(
        &params,
        |t, v| {
            let y = relu(t, v[0]);
            mean_all(t, y)
        },
        1e-6,
    );
}

#[test]
fn leaky_relu_value_and_grad() {
    let params = vec![Tensor::new(vec![4], vec![0.5, -0.7, 1.2, -0.1])];
    let mut tape = Tape::new();
    let v = tape.param(params[0].clone(), 0);
    let y = leaky_relu(&mut tape, v, 0.1);
    let got = tape.value(y).data().to_vec();
    let want = [0.5, -0.07, 1.2, -0.01];
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
    check_grads(
        &params,
        |t, v| {
            let y = leaky_relu(t, v[0], 0.1);
            mean_all(t, y)
        },
        1e-6,
    );
}

#[test]
fn grad_abs_cos_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = vec![
        rand_tensor(vec![4, 3, 3], &mut rng),
        rand_tensor(vec![4, 3, 3], &mut rng),
    ];
    check_grads(&params, |t, v| abs_cos_mean(t, v[0], v[1]), 1e-4);
}

#[test]
fn grad_warp_offsets_through_dlt() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // smooth feature map keeps the bilinear interpolant well approximated
    // by finite differences
    let base = rand_tensor(vec![2, 10, 10], &mut rng);
    let params = vec![
        base,
        Tensor::new(
            vec![8],
            vec![0.7, -0.4, 0.3, 0.6, -0.5, 0.2, 0.4, -0.3],
        ),
    ];
    check_grads(
        &params,
        |t, v| {
            let wv = warp_offsets(t, v[0], v[1]).expect("non-degenerate");
            // weight pixels unevenly so translation components are observable
            let sq = local_correlation(t, wv, wv, 0);
            mean_all(t, sq)
        },
        2e-3,
    );
}

#[test]
fn warp_zero_offsets_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = rand_tensor(vec![3, 8, 8], &mut rng);
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let o = tape.constant(Tensor::zeros(vec![8]));
    let w = warp_offsets(&mut tape, fv, o).unwrap();
    let out = tape.value(w);
    for (a, b) in out.data().iter().zip(f.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

/// Independent triple-loop correlation used as the oracle.
pub fn correlation_brute_force(src: &Tensor, tar: &Tensor, r: usize) -> Tensor {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let n = h * w;
    let d = 2 * r + 1;
    let mut out = vec![0.0; d * d * n];
    let ri = r as i64;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            for du in -ri..=ri {
                for dv in -ri..=ri {
                    let (ys, xs) = (y + du, x + dv);
                    let mut dot = 0.0;
                    if ys >= 0 && ys < h as i64 && xs >= 0 && xs < w as i64 {
                        for ci in 0..c {
                            dot += src.data()[ci * n + ys as usize * w + xs as usize]
                                * tar.data()[ci * n + y as usize * w + x as usize];
                        }
                    }
                    let ch = (du + ri) as usize * d + (dv + ri) as usize;
                    out[ch * n + y as usize * w + x as usize] = dot / (c as f64).sqrt();
                }
            }
        }
    }
    Tensor::new(vec![d * d, h, w], out)
}

#[test]
fn correlation_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let src = rand_tensor(vec![8, 8, 8], &mut rng);
    let tar = rand_tensor(vec![8, 8, 8], &mut rng);
    let mut tape = Tape::new();
    let s = tape.constant(src.clone());
    let t = tape.constant(tar.clone());
    let v = local_correlation(&mut tape, s, t, 2);
    let oracle = correlation_brute_force(&src, &tar, 2);
    for (a, b) in tape.value(v).data().iter().zip(oracle.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn correlation_constant_feature_cases() {
    // r=0, equal unit-ish constants -> per-position |f|^2 / sqrt(C)
    let c = 4;
    let f = Tensor::new(vec![c, 2, 2], vec![0.5; c * 4]);
    let mut tape = Tape::new();
    let s = tape.constant(f.clone());
    let t = tape.constant(f.clone());
    let v = local_correlation(&mut tape, s, t, 0);
    let expect = (c as f64 * 0.25) / (c as f64).sqrt();
    for a in tape.value(v).data() {
        assert!((a - expect).abs() < 1e-12);
    }
    // orthogonal constant maps -> zero volume
    let a = Tensor::new(vec![2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let b = Tensor::new(vec![2, 2, 2], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    let mut tape = Tape::new();
    let s = tape.constant(a);
    let t = tape.constant(b);
    let v = local_correlation(&mut tape, s, t, 1);
    assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
}

#[test]
fn grad_local_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = vec![
        rand_tensor(vec![3, 4, 4], &mut rng),
        rand_tensor(vec![3, 4, 4], &mut rng),
    ];
    check_grads(
        &params,
        |t, v| {
            let vol = local_correlation(t, v[0], v[1], 1);
            let sq = mse_const(t, vol, Tensor::zeros(vec![9, 4, 4]));
            sq
        },
        1e-5,
    );
}

#[test]
fn constants_receive_no_backward_work() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]));
    let b = tape.param(Tensor::new(vec![2], vec![3.0, 4.0]), 0);
    let s = add(&mut tape, a, b);
    let root = mean_all(&mut tape, s);
    let grads = tape.backward(root);
    assert_eq!(grads.by_param.len(), 1);
    let g = &grads.by_param[&0];
    assert!((g.data()[0] - 0.5).abs() < 1e-12);
}
