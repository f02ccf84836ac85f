use fcppn_core::coordnet::{
    forward_network, init_params, make_grid, make_render_grid, Head, InitRule, InputField,
    NetworkConfig, Params, COORD_EXTENT,
};
use fcppn_core::fourier::{channel_index, PhaseCoords};
use fcppn_core::generator::{render, render_field};
use proptest::prelude::*;

fn config(head: Head) -> NetworkConfig {
    NetworkConfig {
        depth: 4,
        filters: 8,
        head,
        freq_w: 3,
        freq_h: 2,
        seed: 5,
        ..Default::default()
    }
}

/// Plain scalar evaluation of the network at one input vector.
fn scalar_network(params: &Params<f64>, input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    let n = params.layers.len();
    for (l, layer) in params.layers.iter().enumerate() {
        let (cin, cout) = (layer.weights.shape()[0], layer.weights.shape()[1]);
        let mut a = layer.bias.data().to_vec();
        for o in 0..cout {
            for i in 0..cin {
                a[o] += x[i] * layer.weights.data()[i * cout + o];
            }
        }
        if l + 1 == n {
            return a;
        }
        let mut next: Vec<f64> = a.iter().map(|v| v.atan() / 0.67).collect();
        next.extend(a.iter().map(|v| v.atan().powi(2) / 0.67));
        x = next;
    }
    unreachable!()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Scalar pixel oracle for both heads, including synthesis at phase `(px, py)`.
fn scalar_pixel(params: &Params<f64>, cfg: &NetworkConfig, input: &[f64], px: f64, py: f64) -> [f64; 3] {
    let head = scalar_network(params, input);
    let mut rgb = [0.0; 3];
    for c in 0..3 {
        rgb[c] = match cfg.head {
            Head::Cppn => head[c],
            Head::Fcppn => {
                let (fw, fh) = (cfg.freq_w, cfg.freq_h);
                let mut acc = 0.0;
                for wy in 0..fh {
                    for wx in 0..fw {
                        let t = std::f64::consts::TAU
                            * (wx as f64 * px / fw as f64 + wy as f64 * py / fh as f64);
                        acc += head[channel_index(fw, fh, c, wx, wy, 0)] * t.cos()
                            - head[channel_index(fw, fh, c, wx, wy, 1)] * t.sin();
                    }
                }
                acc / ((fw * fh) as f64).sqrt()
            }
        };
        rgb[c] = sigmoid(rgb[c]);
    }
    rgb
}

#[test]
fn grid_matches_scalar_pixel_oracle() {
    for head in [Head::Cppn, Head::Fcppn] {
        let cfg = config(head);
        let params = init_params::<f64>(&cfg).unwrap();
        let img = render(&params.cast::<f32>(), &cfg, (7, 5), (7, 5), &[]).unwrap();
        let field: InputField<f64> = make_grid(7, 5, &[]).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                let input = [field.samples.at3(y, x, 0), field.samples.at3(y, x, 1)];
                let expect = scalar_pixel(&params, &cfg, &input, x as f64, y as f64);
                for c in 0..3 {
                    let got = img.at3(y, x, c) as f64;
                    assert!((got - expect[c]).abs() < 1e-6, "{head:?} ({x},{y},{c}) {got} vs {}", expect[c]);
                }
            }
        }
    }
}

#[test]
fn output_depends_only_on_own_coordinates() {
    let cfg = config(Head::Fcppn);
    let params = init_params::<f64>(&cfg).unwrap();
    let mut field: InputField<f64> = make_grid(4, 3, &[]).unwrap();
    let before = forward_network(&params, &cfg, &field).unwrap();
    // scramble every pixel except row 1, column 2
    let p = 4 + 2;
    for (i, v) in field.samples.data_mut().iter_mut().enumerate() {
        if i / 2 != p {
            *v = (i as f64 * 0.77).sin() * 3.0;
        }
    }
    let after = forward_network(&params, &cfg, &field).unwrap();
    let ch = before.shape()[2];
    assert_eq!(&before.data()[p * ch..(p + 1) * ch], &after.data()[p * ch..(p + 1) * ch]);
}

#[test]
fn same_coordinates_under_different_grids_agree() {
    let cfg = config(Head::Cppn);
    let params = init_params::<f64>(&cfg).unwrap();
    let eval = |w: usize, h: usize| forward_network(&params, &cfg, &make_grid(w, h, &[]).unwrap()).unwrap();
    let (a, b, c) = (eval(3, 3), eval(5, 5), eval(9, 1));
    // the centre (0, 0) and the corner (−√3, −√3)
    for k in 0..3 {
        assert!((a.at3(1, 1, k) - b.at3(2, 2, k)).abs() <= 1e-12);
        assert!((a.at3(0, 0, k) - b.at3(0, 0, k)).abs() <= 1e-12);
        assert!((a.at3(1, 0, k) - c.at3(0, 0, k)).abs() <= 1e-12);
    }
}

#[test]
fn hidden_layers_have_twice_filters_channels() {
    let cfg = config(Head::Fcppn);
    let shapes = cfg.layer_shapes();
    assert_eq!(shapes.len(), cfg.depth + 1);
    for &(cin, _) in &shapes[1..] {
        assert_eq!(cin, 2 * cfg.filters);
    }
    assert_eq!(shapes.last().unwrap().1, 6 * cfg.freq_w * cfg.freq_h);
}

#[test]
fn zero_network_is_half_grey() {
    let cfg = config(Head::Cppn);
    let mut params = init_params::<f64>(&cfg).unwrap();
    for l in &mut params.layers {
        l.weights.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let out = forward_network(&params, &cfg, &make_grid(3, 2, &[]).unwrap()).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.5));
}

#[test]
fn cppn_outputs_are_strictly_inside_unit_interval() {
    let cfg = NetworkConfig {
        init: InitRule::LiteralVariance,
        ..config(Head::Cppn)
    };
    let params = init_params::<f64>(&cfg).unwrap();
    let out = forward_network(&params, &cfg, &make_grid(16, 16, &[]).unwrap()).unwrap();
    assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn output_is_continuous_in_coordinates() {
    let cfg = config(Head::Fcppn);
    let params = init_params::<f64>(&cfg).unwrap();
    let base: InputField<f64> = make_grid(5, 5, &[]).unwrap();
    let mut moved = base.clone();
    moved.samples.data_mut().iter_mut().step_by(2).for_each(|v| *v += 1e-6);
    let a = forward_network(&params, &cfg, &base).unwrap();
    let b = forward_network(&params, &cfg, &moved).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-3);
}

#[test]
fn tiled_render_matches_single_pass() {
    let cfg = config(Head::Fcppn);
    let params = init_params::<f32>(&cfg).unwrap();
    // 300 rows of 64 pixels spans two tiles
    let field: InputField<f32> = make_render_grid(64, 300, 32, 150, &[]).unwrap();
    let tiled = render_field(&params, &cfg, &field).unwrap();
    let single_rows = field.rows(0, 300);
    assert_eq!(single_rows.samples, field.samples);
    let top = render_field(&params, &cfg, &field.rows(0, 10)).unwrap();
    let bottom = render_field(&params, &cfg, &field.rows(290, 300)).unwrap();
    let row = 64 * 3;
    assert_eq!(&tiled.data()[..10 * row], top.data());
    assert_eq!(&tiled.data()[290 * row..], bottom.data());
}

#[test]
fn supersampled_render_coincides_with_base() {
    let cfg = config(Head::Fcppn);
    let params = init_params::<f64>(&cfg).unwrap();
    let (bw, bh) = (6, 5);
    let base = render(&params, &cfg, (bw, bh), (bw, bh), &[]).unwrap();
    let fine = render(&params, &cfg, (2 * bw - 1, 2 * bh - 1), (bw, bh), &[]).unwrap();
    for y in 0..bh {
        for x in 0..bw {
            for c in 0..3 {
                assert!((base.at3(y, x, c) - fine.at3(2 * y, 2 * x, c)).abs() < 1e-12);
            }
        }
    }
    let p = PhaseCoords::resampled(2 * bw - 1, 2 * bh - 1, bw, bh);
    assert_eq!(p.xs[2], 1.0);
    assert_eq!(p.xs[1], 0.5);
}

#[test]
fn grid_spans_symmetric_range() {
    let f: InputField<f64> = make_grid(4, 6, &[0.25, -1.0]).unwrap();
    assert_eq!(f.samples.shape(), &[6, 4, 4]);
    assert_eq!(f.samples.at3(0, 0, 0), -COORD_EXTENT);
    assert_eq!(f.samples.at3(5, 3, 1), COORD_EXTENT);
    assert!((f.samples.at3(0, 1, 0) + f.samples.at3(0, 2, 0)).abs() < 1e-15);
    assert_eq!(f.samples.at3(2, 2, 3), -1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn init_is_deterministic_per_seed(seed in any::<u64>()) {
        let cfg = NetworkConfig { seed, ..config(Head::Fcppn) };
        let a: Params<f32> = init_params(&cfg).unwrap();
        let b: Params<f32> = init_params(&cfg).unwrap();
        prop_assert_eq!(a.to_flat(), b.to_flat());
    }

    #[test]
    fn flat_round_trip(seed in any::<u64>()) {
        let cfg = NetworkConfig { seed, ..config(Head::Cppn) };
        let p: Params<f64> = init_params(&cfg).unwrap();
        let back = Params::<f64>::from_flat(&cfg, &p.to_flat()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn render_is_pure(w in 1usize..12, h in 1usize..12) {
        let cfg = config(Head::Fcppn);
        let params: Params<f32> = init_params(&cfg).unwrap();
        let a = render(&params, &cfg, (w, h), (w, h), &[]).unwrap();
        let b = render(&params, &cfg, (w, h), (w, h), &[]).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn params_cast_round_trips_f32_values() {
    let cfg = config(Head::Cppn);
    let p: Params<f32> = init_params(&cfg).unwrap();
    assert_eq!(p.cast::<f64>().cast::<f32>(), p);
}
