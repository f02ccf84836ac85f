use fcppn_core::coordnet::{init_params, Head, NetworkConfig};
use fcppn_core::fourier::{
    brute_force_dft, brute_force_idft, channel_index, coefficient_channels, reshape_head,
    synthesize_localized, CoefficientField, LocalizedIdft, PhaseCoords,
};
use fcppn_core::generator::render;
use fcppn_core::gradcheck::{gradient_check, GradCheckOptions};
use fcppn_core::{Graph, Tensor};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

fn rng(seed: u64) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// The same complex grid per colour at every pixel; `grids[c][ωy·fw + ωx]`.
fn constant_field(
    grids: &[Vec<Complex64>; 3],
    h: usize,
    w: usize,
    fw: usize,
    fh: usize,
) -> CoefficientField<f64> {
    let ch = coefficient_channels(fw, fh);
    let mut per_pixel = vec![0.0; ch];
    for (c, grid) in grids.iter().enumerate() {
        for wy in 0..fh {
            for wx in 0..fw {
                let z = grid[wy * fw + wx];
                per_pixel[channel_index(fw, fh, c, wx, wy, 0)] = z.re;
                per_pixel[channel_index(fw, fh, c, wx, wy, 1)] = z.im;
            }
        }
    }
    let t = Tensor::from_fn(&[h, w, ch], |i| per_pixel[i % ch]);
    reshape_head(t, fw, fh).unwrap()
}

fn random_grid(r: &mut Xoshiro256StarStar, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
        .collect()
}

#[test]
fn localized_synthesis_matches_brute_force_idft() {
    let mut r = rng(1);
    let (fw, fh) = (8, 8);
    let grids = [0, 1, 2].map(|_| random_grid(&mut r, fw * fh));
    // 8×8 image: one full period; 13×11 image: wraps into the next period
    for (w, h) in [(8, 8), (13, 11)] {
        let field = constant_field(&grids, h, w, fw, fh);
        let img = synthesize_localized(&field, &PhaseCoords::base(w, h)).unwrap();
        for (c, grid) in grids.iter().enumerate() {
            let oracle = brute_force_idft(grid, fw, fh);
            for y in 0..h {
                for x in 0..w {
                    let expect = oracle[(y % fh) * fw + x % fw].re;
                    assert!((img.at3(y, x, c) - expect).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn rectangular_frequency_grid_matches_oracle() {
    let mut r = rng(2);
    let (fw, fh) = (5, 3);
    let grids = [0, 1, 2].map(|_| random_grid(&mut r, fw * fh));
    let field = constant_field(&grids, fh, fw, fw, fh);
    let img = synthesize_localized(&field, &PhaseCoords::base(fw, fh)).unwrap();
    for (c, grid) in grids.iter().enumerate() {
        let oracle = brute_force_idft(grid, fw, fh);
        for y in 0..fh {
            for x in 0..fw {
                assert!((img.at3(y, x, c) - oracle[y * fw + x].re).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn dft_idft_round_trip() {
    let mut r = rng(3);
    for (w, h) in [(8, 8), (5, 7), (1, 4)] {
        let img = random_grid(&mut r, w * h);
        let back = brute_force_idft(&brute_force_dft(&img, w, h), w, h);
        for (a, b) in img.iter().zip(&back) {
            assert!((a - b).norm() < 1e-9);
        }
    }
}

#[test]
fn brute_force_trivial_cases() {
    let zero = brute_force_idft(&[Complex64::new(0.0, 0.0); 6], 3, 2);
    assert!(zero.iter().all(|z| z.norm() == 0.0));
    let mut dc = vec![Complex64::new(0.0, 0.0); 4];
    dc[0] = Complex64::new(3.0, 0.0);
    for v in brute_force_idft(&dc, 2, 2) {
        assert!((v - Complex64::new(1.5, 0.0)).norm() < 1e-15);
    }
}

#[test]
fn constant_coefficients_give_periodic_output() {
    let mut r = rng(4);
    let (fw, fh) = (10, 10);
    let grids = [0, 1, 2].map(|_| random_grid(&mut r, fw * fh));
    let field = constant_field(&grids, 64, 64, fw, fh);
    let img = synthesize_localized(&field, &PhaseCoords::base(64, 64)).unwrap();
    let mut worst: f64 = 0.0;
    for y in 0..64 {
        for x in 0..64 {
            for c in 0..3 {
                let v = img.at3(y, x, c);
                if x + fw < 64 {
                    worst = worst.max((v - img.at3(y, x + fw, c)).abs());
                }
                if y + fh < 64 {
                    worst = worst.max((v - img.at3(y + fh, x, c)).abs());
                }
            }
        }
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn synthesis_is_linear() {
    let mut r = rng(5);
    let (h, w, fw, fh) = (4, 6, 3, 2);
    let ch = coefficient_channels(fw, fh);
    let f1 = Tensor::<f64>::from_fn(&[h, w, ch], |_| r.random_range(-1.0..1.0));
    let f2 = Tensor::<f64>::from_fn(&[h, w, ch], |_| r.random_range(-1.0..1.0));
    let (a, b) = (0.7, -1.9);
    let mix = Tensor::from_fn(&[h, w, ch], |i| a * f1.data()[i] + b * f2.data()[i]);
    let phase = PhaseCoords::base(w, h);
    let s = |t: Tensor<f64>| synthesize_localized(&reshape_head(t, fw, fh).unwrap(), &phase).unwrap();
    let (s1, s2, sm) = (s(f1), s(f2), s(mix));
    for i in 0..sm.len() {
        assert!((sm.data()[i] - (a * s1.data()[i] + b * s2.data()[i])).abs() < 1e-10);
    }
}

#[test]
fn synthesis_gradient_passes_check() {
    let mut r = rng(6);
    let (h, w, fw, fh) = (3, 4, 4, 3);
    let ch = coefficient_channels(fw, fh);
    let idft = LocalizedIdft::<f64>::new(&PhaseCoords::base(w, h), fw, fh).unwrap();
    let mut g = Graph::new();
    let coeffs = g.param(Tensor::from_fn(&[h, w, ch], |_| r.random_range(-1.0..1.0)));
    let img = idft.node(&mut g, coeffs).unwrap();
    let rgb = g.sigmoid(img).unwrap();
    let target = g.constant(Tensor::from_fn(&[h, w, 3], |_| r.random_range(0.0..1.0)));
    let d = g.sub(rgb, target).unwrap();
    let sq = g.square(d).unwrap();
    let loss = g.reduce_mean(sq).unwrap();
    let rep = gradient_check(&mut g, loss, coeffs, &GradCheckOptions::default()).unwrap();
    assert!(rep.passed, "{}", rep.max_rel_error);
}

#[test]
fn single_frequency_fcppn_collapses_to_cppn() {
    let fc = NetworkConfig {
        depth: 3,
        filters: 6,
        head: Head::Fcppn,
        freq_w: 1,
        freq_h: 1,
        seed: 17,
        ..Default::default()
    };
    let cc = NetworkConfig {
        head: Head::Cppn,
        ..fc.clone()
    };
    let mut fparams = init_params::<f64>(&fc).unwrap();
    let re = |c: usize| channel_index(1, 1, c, 0, 0, 0);
    // biases start at zero; give the head a non-trivial offset as well
    for c in 0..3 {
        fparams.layers.last_mut().unwrap().bias.data_mut()[re(c)] = 0.1 * c as f64 - 0.05;
    }
    let mut cparams = fparams.clone();
    let fhead = fparams.layers.last().unwrap();
    let cin = fhead.weights.shape()[0];
    let head = cparams.layers.last_mut().unwrap();
    head.weights = Tensor::from_fn(&[cin, 3], |i| fhead.weights.data()[(i / 3) * 6 + re(i % 3)]);
    head.bias = Tensor::from_fn(&[3], |c| fhead.bias.data()[re(c)]);
    let a = render(&fparams, &fc, (9, 7), (9, 7), &[]).unwrap();
    let b = render(&cparams, &cc, (9, 7), (9, 7), &[]).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);

    let a32 = render(&fparams.cast::<f32>(), &fc, (9, 7), (9, 7), &[]).unwrap();
    let b32 = render(&cparams.cast::<f32>(), &cc, (9, 7), (9, 7), &[]).unwrap();
    assert!(a32.max_abs_diff(&b32) < 1e-6);
}
