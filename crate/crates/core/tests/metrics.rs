use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revdeblur::metrics::{linear_cka, mse, psnr, psnr_from_mse, slope, ssim, FeatureMatrix, PSNR_CAP};
use revdeblur::Tensor;

fn rand_img(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::uniform(shape, 0.0, 1.0, rng)
}

#[test]
fn psnr_of_constant_offset() {
    let a = Tensor::<f64>::full([1, 3, 4, 4], 0.5);
    let b = Tensor::<f64>::full([1, 3, 4, 4], 0.6);
    let expected = 10.0 * (1.0 / 0.01f64).log10();
    assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn psnr_identical_is_capped() {
    let a = Tensor::<f32>::full([1, 3, 4, 4], 0.25);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert_eq!(psnr_from_mse(0.0), PSNR_CAP);
    assert_eq!(psnr_from_mse(1e-30), PSNR_CAP);
}

#[test]
fn psnr_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_img(&mut rng, [2, 3, 7, 5]);
    let b = rand_img(&mut rng, [2, 3, 7, 5]);
    let mut s = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        s += (x - y) * (x - y);
    }
    let m = s / a.len() as f64;
    assert!((mse(&a, &b).unwrap() - m).abs() < 1e-15);
    assert!((psnr(&a, &b).unwrap() + 10.0 * m.log10()).abs() < 1e-9);
}

#[test]
fn psnr_rejects_shape_mismatch() {
    let a = Tensor::<f32>::zeros([1, 3, 4, 4]);
    let b = Tensor::<f32>::zeros([1, 3, 4, 5]);
    assert!(psnr(&a, &b).is_err());
    assert!(ssim(&a, &b).is_err());
}

/// Direct per-window SSIM with a 2-D Gaussian, no separability.
fn ssim_oracle(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let [b, c, h, w] = x.shape();
    let k = 11usize;
    let sigma = 1.5f64;
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            g[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let gs: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= gs);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut n = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            let mut plane = 0.0;
            let mut cnt = 0usize;
            for oy in 0..=h - k {
                for ox in 0..=w - k {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wt = g[i * k + j];
                            let xv = x.at(bi, ci, oy + i, ox + j);
                            let yv = y.at(bi, ci, oy + i, ox + j);
                            mx += wt * xv;
                            my += wt * yv;
                            sxx += wt * xv * xv;
                            syy += wt * yv * yv;
                            sxy += wt * xv * yv;
                        }
                    }
                    let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    plane += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    cnt += 1;
                }
            }
            total += plane / cnt as f64;
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn ssim_matches_direct_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_img(&mut rng, [1, 2, 16, 13]);
    let noise = rand_img(&mut rng, [1, 2, 16, 13]);
    let b = a.zip_map(&noise, |p, q| 0.8 * p + 0.2 * q).unwrap();
    let got = ssim(&a, &b).unwrap();
    let want = ssim_oracle(&a, &b);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn ssim_of_identical_images_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_img(&mut rng, [1, 3, 12, 12]);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_rejects_small_images() {
    let a = Tensor::<f64>::zeros([1, 1, 10, 20]);
    assert!(ssim(&a, &a).is_err());
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureMatrix {
    FeatureMatrix::new(n, d, (0..n * d).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
}

fn cka_oracle(x: &FeatureMatrix, y: &FeatureMatrix) -> f64 {
    let n = x.rows;
    let gram = |m: &FeatureMatrix| {
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = (0..m.cols).map(|c| m.data[i * m.cols + c] * m.data[j * m.cols + c]).sum();
            }
        }
        k
    };
    let center = |k: Vec<f64>| {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        let ha = if i == a { 1.0 } else { 0.0 } - 1.0 / n as f64;
                        let hb = if b == j { 1.0 } else { 0.0 } - 1.0 / n as f64;
                        v += ha * k[a * n + b] * hb;
                    }
                }
                out[i * n + j] = v;
            }
        }
        out
    };
    let k = center(gram(x));
    let l = center(gram(y));
    let hsic = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

#[test]
fn cka_matches_hsic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_features(&mut rng, 9, 5);
    let y = random_features(&mut rng, 9, 7);
    let got = linear_cka(&x, &y).unwrap();
    assert!((got - cka_oracle(&x, &y)).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&got));
}

#[test]
fn cka_self_similarity_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_features(&mut rng, 12, 6);
    assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-10);
}

#[test]
fn cka_is_invariant_to_isotropic_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_features(&mut rng, 10, 4);
    let y = random_features(&mut rng, 10, 3);
    let xs = FeatureMatrix::new(10, 4, x.data.iter().map(|v| v * 7.3).collect()).unwrap();
    let a = linear_cka(&x, &y).unwrap();
    let b = linear_cka(&xs, &y).unwrap();
    assert!((a - b).abs() < 1e-10);
}

#[test]
fn cka_is_invariant_to_orthogonal_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d) = (10, 4);
    let x = random_features(&mut rng, n, d);
    let y = random_features(&mut rng, n, 3);
    // Gram-Schmidt on a random matrix gives an orthogonal Q.
    let mut q: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = (0..d).map(|k| q[i][k] * q[j][k]).sum();
            for k in 0..d {
                q[i][k] -= dot * q[j][k];
            }
        }
        let norm: f64 = q[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        q[i].iter_mut().for_each(|v| *v /= norm);
    }
    let mut xq = vec![0.0; n * d];
    for r in 0..n {
        for c in 0..d {
            xq[r * d + c] = (0..d).map(|k| x.data[r * d + k] * q[k][c]).sum();
        }
    }
    let xq = FeatureMatrix::new(n, d, xq).unwrap();
    let a = linear_cka(&x, &y).unwrap();
    let b = linear_cka(&xq, &y).unwrap();
    assert!((a - b).abs() < 1e-10);
}

#[test]
fn cka_rejects_degenerate_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_features(&mut rng, 5, 3);
    let y = random_features(&mut rng, 6, 3);
    assert!(linear_cka(&x, &y).is_err());
    let c = FeatureMatrix::new(5, 2, vec![1.0; 10]).unwrap();
    assert!(linear_cka(&x, &c).is_err());
    assert!(FeatureMatrix::new(2, 2, vec![1.0; 3]).is_err());
}

#[test]
fn feature_matrix_from_tensor_flattens_per_sample() {
    let t = Tensor::<f32>::from_vec([2, 2, 1, 2], (0..8).map(|v| v as f32).collect()).unwrap();
    let m = FeatureMatrix::from_tensor(&t);
    assert_eq!((m.rows, m.cols), (2, 4));
    assert_eq!(m.data[4], 4.0);
    let s = FeatureMatrix::stack(&[m.clone(), m]).unwrap();
    assert_eq!(s.rows, 4);
}

#[test]
fn slope_of_a_line() {
    let x = [1.0, 2.0, 4.0, 8.0];
    let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
    assert!((slope(&x, &y) - 3.0).abs() < 1e-12);
}
