use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Central finite differences of `sum(out * r)` against reverse mode, for
/// every input. Error is the max abs difference over the max abs
/// numerical gradient.
fn grad_check<F>(inputs: Vec<Tensor>, seed: u64, build: F) -> f32
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let h = 1e-3f32;
    let run = |ins: &[Tensor]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        (g, vars, out)
    };
    let (g0, _, out0) = run(&inputs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f32> = (0..g0.value(out0).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |ins: &[Tensor]| -> f64 {
        let (g, _, out) = run(ins);
        g.value(out).data().iter().zip(&r).map(|(a, b)| *a as f64 * *b as f64).sum()
    };
    let (mut g, vars, out) = run(&inputs);
    g.backward_from(out, r.clone()).unwrap();
    let mut worst = 0.0f32;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= h;
            numeric.push(((loss(&plus) - loss(&minus)) / (2.0 * h as f64)) as f32);
        }
        let scale = numeric.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
        let err = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f32, |m, (a, n)| m.max((a - n).abs()))
            / scale;
        worst = worst.max(err);
    }
    worst
}

const FD_TOL: f32 = 1e-3;

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, dilation) in [(1, 1), (1, 2), (2, 1)] {
        let x = rand_tensor(&mut rng, &[5, 6, 2], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[3, 3, 2, 3], -1.0, 1.0);
        let err = grad_check(vec![x, k], 11, |g, v| g.conv2d(v[0], v[1], stride, dilation).unwrap());
        assert!(err < FD_TOL, "stride {stride} dilation {dilation}: {err}");
    }
}

#[test]
fn conv3d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for stride in [[1, 1, 1], [2, 2, 2], [2, 2, 1]] {
        let x = rand_tensor(&mut rng, &[4, 4, 4, 2], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[3, 3, 3, 2, 2], -1.0, 1.0);
        let err = grad_check(vec![x, k], 12, |g, v| g.conv3d(v[0], v[1], stride).unwrap());
        assert!(err < FD_TOL, "stride {stride:?}: {err}");
    }
}

#[test]
fn deconv3d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[3, 3, 3, 2, 3], -1.0, 1.0);
    let err = grad_check(vec![x, k], 13, |g, v| g.deconv3d(v[0], v[1], [2, 2, 2]).unwrap());
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // keep relu inputs away from the kink
    let mut x = rand_tensor(&mut rng, &[3, 4, 2], 0.1, 1.0);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if i % 3 == 0 {
            *v = -*v;
        }
    }
    assert!(grad_check(vec![x.clone()], 14, |g, v| g.relu(v[0])) < FD_TOL);
    let y = rand_tensor(&mut rng, &[3, 4, 2], -1.0, 1.0);
    assert!(grad_check(vec![x.clone(), y], 15, |g, v| g.add(v[0], v[1]).unwrap()) < FD_TOL);
    let b = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    assert!(grad_check(vec![x.clone(), b], 16, |g, v| g.bias_add(v[0], v[1]).unwrap()) < FD_TOL);
    assert!(grad_check(vec![x.clone()], 17, |g, v| g.reshape(v[0], &[12, 2]).unwrap()) < FD_TOL);
    let z = rand_tensor(&mut rng, &[3, 4, 3], -1.0, 1.0);
    assert!(grad_check(vec![x, z], 18, |g, v| g.concat_channels(&[v[1], v[0], v[1]]).unwrap()) < FD_TOL);
}

#[test]
fn batchnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 3, 2], -2.0, 2.0);
    let s = rand_tensor(&mut rng, &[2], 0.5, 1.5);
    let b = rand_tensor(&mut rng, &[2], -0.5, 0.5);
    let err = grad_check(vec![x.clone(), s.clone(), b.clone()], 19, |g, v| g.batchnorm_train(v[0], v[1], v[2]).unwrap().0);
    assert!(err < FD_TOL, "train: {err}");
    let err = grad_check(vec![x, s, b], 20, |g, v| {
        g.batchnorm_eval(v[0], v[1], v[2], &[0.2, -0.1], &[1.5, 0.7]).unwrap()
    });
    assert!(err < FD_TOL, "eval: {err}");
}

#[test]
fn softargmin_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = rand_tensor(&mut rng, &[3, 2, 5], -2.0, 2.0);
    assert!(grad_check(vec![c], 21, |g, v| g.softargmin(v[0]).unwrap()) < FD_TOL);
}

#[test]
fn masked_l1_gradients() {
    // predictions at least 0.2 away from the rounded targets
    let target = vec![1.2, 3.7, 0.0, 5.4, 2.0, 2.6];
    let pred = Tensor::from_vec(&[2, 3], vec![0.5, 4.5, 1.1, 4.2, 3.3, 1.9]).unwrap();
    let cov = vec![1, 2, 0, 3, 4, 1];
    let err = grad_check(vec![pred], 22, |g, v| g.masked_l1_loss(v[0], &target, &cov).unwrap());
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn gather_gradients() {
    let plan = Arc::new(GatherPlan {
        source_rows: 6,
        entries: vec![
            Some(([0, 1, 3, 4], [0.1, 0.2, 0.3, 0.4])),
            None,
            Some(([1, 2, 4, 5], [0.25, 0.25, 0.25, 0.25])),
            Some(([0, 1, 3, 4], [0.0, 1.0, 0.0, 0.0])),
        ],
    });
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let src = rand_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
    let err = grad_check(vec![src], 23, |g, v| g.gather(v[0], plan.clone(), &[2, 2]).unwrap());
    assert!(err < FD_TOL, "{err}");
}

// ------------------------------------------------------------ oracles

fn conv2d_loop_oracle(x: &Tensor, k: &Tensor, dilation: usize) -> Vec<f32> {
    let [h, w, cin] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let [kh, kw, _, cout] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let (ph, pw) = ((kh - 1) * dilation / 2, (kw - 1) * dilation / 2);
    let mut out = vec![0.0f32; h * w * cout];
    for oy in 0..h {
        for ox in 0..w {
            for co in 0..cout {
                let mut s = 0.0f64;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = oy as isize + (ky * dilation) as isize - ph as isize;
                        let ix = ox as isize + (kx * dilation) as isize - pw as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x.data()[((iy as usize) * w + ix as usize) * cin + ci];
                            let kv = k.data()[((ky * kw + kx) * cin + ci) * cout + co];
                            s += xv as f64 * kv as f64;
                        }
                    }
                }
                out[(oy * w + ox) * cout + co] = s as f32;
            }
        }
    }
    out
}

#[test]
fn conv2d_identity_and_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[4, 5, 3], -1.0, 1.0);
    let mut id = Tensor::zeros(&[1, 1, 3, 3]);
    for c in 0..3 {
        id.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(id));
    let y = g.conv2d(xv, kv, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);

    let mut g = Graph::new();
    let xv = g.constant(Tensor::filled(&[5, 5, 1], 1.0));
    let kv = g.constant(Tensor::filled(&[3, 3, 1, 1], 1.0));
    let y = g.conv2d(xv, kv, 1, 1).unwrap();
    assert_eq!(g.value(y).data()[2 * 5 + 2], 9.0);
    assert_eq!(g.value(y).data()[0], 4.0);

    let bad = g.constant(Tensor::zeros(&[3, 3, 2, 1]));
    assert!(matches!(g.conv2d(xv, bad, 1, 1), Err(Error::Shape(_))));
}

#[test]
fn conv2d_dilated_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[6, 6, 2], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[3, 3, 2, 3], -1.0, 1.0);
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(xv, kv, 1, 2).unwrap();
    let oracle = conv2d_loop_oracle(&x, &k, 2);
    for (a, b) in g.value(y).data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn conv3d_identity_box_and_wrap() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[3, 4, 2, 2], -1.0, 1.0);
    let mut id = Tensor::zeros(&[1, 1, 1, 2, 2]);
    id.data_mut()[0] = 1.0;
    id.data_mut()[3] = 1.0;
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(id));
    let y = g.conv3d(xv, kv, [1, 1, 1]).unwrap();
    assert_eq!(g.value(y), &x);

    let mut g = Graph::new();
    let xv = g.constant(Tensor::filled(&[5, 5, 5, 1], 1.0));
    let kv = g.constant(Tensor::filled(&[3, 3, 3, 1, 1], 1.0));
    let y = g.conv3d(xv, kv, [1, 1, 1]).unwrap();
    assert_eq!(g.value(y).data()[(2 * 5 + 2) * 5 + 2], 27.0);

    // circular W: a feature in column 0 reaches output column W-1
    let (h, w, d) = (3, 6, 3);
    let x = rand_tensor(&mut rng, &[h, w, d, 1], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[3, 3, 3, 1, 1], -1.0, 1.0);
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv3d(xv, kv, [1, 1, 1]).unwrap();
    let at = |t: &[f32], a: usize, b: usize, c: usize| t[(a * w + b) * d + c];
    for oy in 0..h {
        for ox in 0..w {
            for oz in 0..d {
                let mut s = 0.0f64;
                for ky in 0..3 {
                    for kx in 0..3 {
                        for kz in 0..3 {
                            let iy = oy as isize + ky as isize - 1;
                            let iz = oz as isize + kz as isize - 1;
                            if iy < 0 || iz < 0 || iy >= h as isize || iz >= d as isize {
                                continue;
                            }
                            let ix = (ox + w + kx - 1) % w;
                            s += at(x.data(), iy as usize, ix, iz as usize) as f64
                                * k.data()[(ky * 3 + kx) * 3 + kz] as f64;
                        }
                    }
                }
                assert!((at(g.value(y).data(), oy, ox, oz) as f64 - s).abs() < 1e-6);
            }
        }
    }
    let mut impulse = Tensor::zeros(&[h, w, d, 1]);
    impulse.data_mut()[(w + 0) * d + 1] = 1.0;
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(impulse), g.constant(k));
    let y = g.conv3d(xv, kv, [1, 1, 1]).unwrap();
    assert_ne!(at(g.value(y).data(), 1, w - 1, 1), 0.0);
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

#[test]
fn conv_deconv_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (cin, cout) = (3, 2);
    let x = rand_tensor(&mut rng, &[4, 6, 4, cin], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[3, 3, 3, cin, cout], -1.0, 1.0);
    let y = rand_tensor(&mut rng, &[2, 3, 2, cout], -1.0, 1.0);
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let cx = g.conv3d(xv, kv, [2, 2, 2]).unwrap();
    assert_eq!(g.shape(cx), &[2, 3, 2, cout]);
    let lhs = dot(g.value(cx).data(), y.data());
    let kt = Tensor::from_vec(&[3, 3, 3, cout, cin], conv::swap_channel_axes(k.data(), 27, cin, cout)).unwrap();
    let (yv, ktv) = (g.constant(y), g.constant(kt));
    let dy = g.deconv3d(yv, ktv, [2, 2, 2]).unwrap();
    assert_eq!(g.shape(dy), x.shape());
    let rhs = dot(x.data(), g.value(dy).data());
    assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");

    // conv2d: forward against its own backward
    let x = rand_tensor(&mut rng, &[7, 8, 2], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[5, 5, 2, 3], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let kv = g.constant(k);
    let out = g.conv2d(xv, kv, 2, 1).unwrap();
    let y = rand_tensor(&mut rng, g.shape(out), -1.0, 1.0);
    let lhs = dot(g.value(out).data(), y.data());
    g.backward_from(out, y.data().to_vec()).unwrap();
    let rhs = dot(x.data(), g.grad(xv).unwrap());
    assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()));
}

#[test]
fn deconv_zero_and_impulse() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let k = rand_tensor(&mut rng, &[3, 3, 3, 1, 1], -1.0, 1.0);
    let mut g = Graph::new();
    let kv = g.constant(k.clone());
    let z = g.constant(Tensor::zeros(&[2, 2, 2, 1]));
    let y = g.deconv3d(z, kv, [2, 2, 2]).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    // an impulse at (1,1,1) lands on 2*1 + tap - 0 along every axis
    let mut imp = Tensor::zeros(&[3, 3, 3, 1]);
    imp.data_mut()[(3 + 1) * 3 + 1] = 1.0;
    let iv = g.constant(imp);
    let y = g.deconv3d(iv, kv, [2, 2, 2]).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[6, 6, 6, 1]);
    let mut expected = vec![0.0f32; 216];
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                expected[((2 + a) * 6 + 2 + b) * 6 + 2 + c] = k.data()[(a * 3 + b) * 3 + c];
            }
        }
    }
    assert_eq!(out.data(), &expected[..]);
}

#[test]
fn relu_add_batchnorm_examples() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);

    let a = g.variable(Tensor::filled(&[3], 1.0));
    let b = g.variable(Tensor::filled(&[3], 2.0));
    let s = g.add(a, b).unwrap();
    g.backward_from(s, vec![0.5, -1.0, 2.0]).unwrap();
    assert_eq!(g.grad(a).unwrap(), g.grad(b).unwrap());
    assert_eq!(g.grad(a).unwrap(), &[0.5, -1.0, 2.0]);

    // already standardized channel: (-1, 1, -1, 1) has mean 0, variance 1
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap());
    let sc = g.constant(Tensor::filled(&[1], 1.0));
    let sh = g.constant(Tensor::zeros(&[1]));
    let (y, stats) = g.batchnorm_train(x, sc, sh).unwrap();
    assert_eq!((stats.mean[0], stats.var[0]), (0.0, 1.0));
    for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn softargmin_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::filled(&[2, 3, 5], 0.7));
    let y = g.softargmin(c).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 2.0).abs() < 1e-6));

    let mut costs = vec![30.0f32; 8];
    costs[5] = 0.0;
    let c = g.constant(Tensor::from_vec(&[1, 8], costs).unwrap());
    let y = g.softargmin(c).unwrap();
    assert!((g.value(y).data()[0] - 5.0).abs() < 1e-3);

    let base = vec![0.5f32, 1.25, 3.0, 0.0, 2.5, 1.0];
    let shifted: Vec<f32> = base.iter().map(|v| v + 3.0).collect();
    let a = g.constant(Tensor::from_vec(&[2, 3], base).unwrap());
    let b = g.constant(Tensor::from_vec(&[2, 3], shifted).unwrap());
    let (ya, yb) = (g.softargmin(a).unwrap(), g.softargmin(b).unwrap());
    let bits = |v: Var| g.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(ya), bits(yb));

    // hand value: costs (0, ln 2, ln 4) -> weights 4/7, 2/7, 1/7 -> index 4/7
    let c = g.constant(Tensor::from_vec(&[3], vec![0.0, 2f32.ln(), 4f32.ln()]).unwrap());
    let y = g.softargmin(c).unwrap();
    assert!((g.value(y).data()[0] - 4.0 / 7.0).abs() < 1e-6);
}

#[test]
fn masked_l1_examples_and_oracle() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_vec(&[3], vec![1.0, 4.0, 7.0]).unwrap());
    let l = g.masked_l1_loss(p, &[1.2, 3.6, 7.4], &[1, 2, 1]).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);

    let p = g.constant(Tensor::from_vec(&[1], vec![9.0]).unwrap());
    let l = g.masked_l1_loss(p, &[5.0], &[2]).unwrap();
    assert_eq!(g.value(l).data()[0], 2.0);

    assert!(g.masked_l1_loss(p, &[5.0], &[0]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pred: Vec<f32> = (0..16).map(|_| rng.gen_range(0.0..15.0)).collect();
    let gt: Vec<f32> = (0..16).map(|_| rng.gen_range(0.0..15.0)).collect();
    let cov: Vec<u32> = (0..16).map(|_| rng.gen_range(0..5)).collect();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for i in 0..16 {
        if cov[i] > 0 {
            sum += ((pred[i] - gt[i].round()).abs() / cov[i] as f32) as f64;
            count += 1;
        }
    }
    let oracle = sum / count as f64;
    let p = g.constant(Tensor::from_vec(&[4, 4], pred).unwrap());
    let l = g.masked_l1_loss(p, &gt, &cov).unwrap();
    assert!((g.value(l).data()[0] as f64 - oracle).abs() < 1e-6);
}

#[test]
fn backward_is_linear_in_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, &[4, 4, 2], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[3, 3, 2, 2], -1.0, 1.0);
    let w1: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w2: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let kv = g.variable(k.clone());
        let xv = g.constant(x.clone());
        let y = g.conv2d(xv, kv, 1, 1).unwrap();
        let y = g.relu(y);
        let l1 = g.weighted_sum(y, w1.clone()).unwrap();
        let l2 = g.weighted_sum(y, w2.clone()).unwrap();
        let l = match which {
            0 => l1,
            1 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(l).unwrap();
        g.grad(kv).unwrap().to_vec()
    };
    let (a, b, both) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..a.len() {
        assert!((a[i] + b[i] - both[i]).abs() <= 1e-6 * (1.0 + both[i].abs()));
    }
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(&[2], 1.0));
    let w = g.variable(Tensor::filled(&[2], 3.0));
    let y = g.add(x, w).unwrap();
    let l = g.weighted_sum(y, vec![1.0, 2.0]).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(x).is_none());
    assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    assert!(g.backward(y).is_err());
}
