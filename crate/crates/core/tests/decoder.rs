use diffaudio::autograd::{gelu_scalar, grad_check_store, ConvSpec, GradCheckOptions, Tape, LAYER_NORM_EPS};
use diffaudio::decoder::{decode, init_params, tokens_to_grid, DecoderConfig, TargetMode};
use diffaudio::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(groups: usize) -> DecoderConfig {
    DecoderConfig {
        layers: 6,
        kernel: 3,
        groups,
        target: TargetMode::Features,
    }
}

fn store(c: &DecoderConfig, ch: usize, target: usize, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_params(c, ch, target, &mut ChaCha8Rng::seed_from_u64(seed), &mut s).unwrap();
    s
}

fn randomise_biases(s: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = s.names().iter().filter(|n| n.ends_with(".b")).cloned().collect();
    for n in names {
        let t = s.get_mut(&n).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
}

fn run(s: &ParamStore, c: &DecoderConfig, grid: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    tape.bind_store(s, false);
    let g = tape.constant(grid.clone());
    let y = decode(&mut tape, g, c).unwrap();
    tape.value(y).clone()
}

// Plain-loop convolution with zero padding, used as an oracle.
fn conv_ref(x: &[f64], (c, h, w): (usize, usize, usize), wt: &[f64], cout: usize, k: usize, groups: usize) -> Vec<f64> {
    let cin_g = c / groups;
    let cout_g = cout / groups;
    let pad = (k / 2) as isize;
    let mut y = vec![0.0; cout * h * w];
    for o in 0..cout {
        let g = o / cout_g;
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for ci in 0..cin_g {
                    let ch = g * cin_g + ci;
                    for a in 0..k {
                        for b in 0..k {
                            let (ii, jj) = (i as isize + a as isize - pad, j as isize + b as isize - pad);
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            acc += x[ch * h * w + ii as usize * w + jj as usize]
                                * wt[((o * cin_g + ci) * k + a) * k + b];
                        }
                    }
                }
                y[o * h * w + i * w + j] = acc;
            }
        }
    }
    y
}

#[test]
fn grouped_conv_matches_dense_and_depthwise_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (c, h, w) = (4, 5, 6);
    let x = Tensor::randn(&[c, h, w], 1.0, &mut rng);
    for groups in [1, c] {
        let wt = Tensor::randn(&[c, c / groups, 3, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(wt.clone());
        let spec = ConvSpec {
            stride: 1,
            padding: 1,
            groups,
        };
        let y = tape.conv2d(xv, wv, None, spec).unwrap();
        let want = conv_ref(x.data(), (c, h, w), wt.data(), c, 3, groups);
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_conv_weights_give_spatially_constant_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (ch, target) = (8, 3);
    let c = cfg(4);
    let mut s = store(&c, ch, target, 3);
    randomise_biases(&mut s, &mut rng);
    for l in 0..6 {
        let t = s.get_mut(&format!("dec.{l}.conv.w")).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    // per-site oracle: each layer sees only its conv bias
    let mut v = vec![0.0; ch];
    for l in 0..6 {
        let b = s.get(&format!("dec.{l}.conv.b")).unwrap().data();
        let g = s.get(&format!("dec.{l}.ln.g")).unwrap().data();
        let beta = s.get(&format!("dec.{l}.ln.b")).unwrap().data();
        let mean = b.iter().sum::<f64>() / ch as f64;
        let var = b.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / ch as f64;
        for i in 0..ch {
            v[i] = gelu_scalar(g[i] * (b[i] - mean) / (var + LAYER_NORM_EPS).sqrt() + beta[i]);
        }
    }
    let pw = s.get("dec.proj.w").unwrap().data();
    let pb = s.get("dec.proj.b").unwrap().data();
    let want: Vec<f64> = (0..target)
        .map(|t| pb[t] + (0..ch).map(|i| pw[t * ch + i] * v[i]).sum::<f64>())
        .collect();

    let grid = Tensor::randn(&[ch, 3, 4], 1.0, &mut rng);
    let y = run(&s, &c, &grid);
    assert_eq!(y.shape(), &[12, target]);
    for r in 0..12 {
        for t in 0..target {
            assert!((y.at(r, t) - want[t]).abs() < 1e-12);
        }
    }
}

#[test]
fn decoder_gradient_check() {
    let c = cfg(16);
    let s = store(&c, 16, 4, 4);
    let grid = Tensor::randn(&[16, 3, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let report = grad_check_store(
        |tape, v| {
            let y = decode(tape, v[0], &c)?;
            let y = tape.mul(y, y)?;
            Ok(tape.sum(y))
        },
        &s,
        &[grid],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-5, "{report:?}");
}

#[test]
fn interior_translation_covariance() {
    let c = cfg(2);
    let mut s = store(&c, 4, 3, 6);
    randomise_biases(&mut s, &mut ChaCha8Rng::seed_from_u64(7));
    let (ch, h, w) = (4, 3, 16);
    let grid = Tensor::randn(&[ch, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
    let mut shifted = Tensor::zeros(&[ch, h, w]);
    for k in 0..ch {
        for i in 0..h {
            for j in 1..w {
                shifted.data_mut()[(k * h + i) * w + j] = grid.data()[(k * h + i) * w + j - 1];
            }
        }
    }
    let a = run(&s, &c, &grid);
    let b = run(&s, &c, &shifted);
    // receptive radius is 6; sites 7..=9 see no padding difference
    for i in 0..h {
        for j in 7..=9 {
            for t in 0..3 {
                assert!((b.at(i * w + j, t) - a.at(i * w + j - 1, t)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn ten_second_grid_decodes_to_504_rows() {
    let c = DecoderConfig {
        layers: 1,
        ..cfg(2)
    };
    let s = store(&c, 4, 4, 9);
    let mut tape = Tape::new();
    tape.bind_store(&s, false);
    let toks = tape.constant(Tensor::zeros(&[504, 4]));
    let g = tokens_to_grid(&mut tape, toks, 63, 8).unwrap();
    let y = decode(&mut tape, g, &c).unwrap();
    assert_eq!(tape.shape(y), &[504, 4]);
}

#[test]
fn channel_group_mismatch_is_rejected() {
    let c = cfg(16);
    let s = store(&c, 16, 2, 0);
    let mut tape = Tape::new();
    tape.bind_store(&s, false);
    let g = tape.constant(Tensor::zeros(&[12, 2, 2]));
    assert!(decode(&mut tape, g, &c).is_err());
}
