//! Independent convolution oracle: explicit zero-padded copies and direct
//! dot products, structured differently from the library kernels.

use awlab_core::ops;
use awlab_core::rng::{normal_vec, substream};
use awlab_core::Tensor;

fn pad_input(x: &Tensor, pad: usize) -> (Vec<f64>, usize, usize) {
    let (n, c, h, w) = x.dims4().unwrap();
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; n * c * ph * pw];
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[((ni * c + ci) * ph + i + pad) * pw + j + pad] =
                        x.data()[((ni * c + ci) * h + i) * w + j];
                }
            }
        }
    }
    (out, ph, pw)
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, _, _) = x.dims4().unwrap();
    let (co, _, k, _) = w.dims4().unwrap();
    let (px, ph, pw) = pad_input(x, pad);
    let oh = (ph - k) / stride + 1;
    let ow = (pw - k) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for ni in 0..n {
        for o in 0..co {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ki in 0..k {
                            for kj in 0..k {
                                let xi = oi * stride + ki;
                                let xj = oj * stride + kj;
                                acc += px[((ni * ci + c) * ph + xi) * pw + xj]
                                    * w.data()[((o * ci + c) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((ni * co + o) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

fn dwconv_oracle(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4().unwrap();
    let k = w.shape()[2];
    let (px, ph, pw) = pad_input(x, pad);
    let mut out = vec![0.0; n * c * h * wd];
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..h {
                for oj in 0..wd {
                    let mut acc = 0.0;
                    for ki in 0..k {
                        for kj in 0..k {
                            acc += px[((ni * c + ci) * ph + oi + ki) * pw + oj + kj]
                                * w.data()[(ci * k + ki) * k + kj];
                        }
                    }
                    out[((ni * c + ci) * h + oi) * wd + oj] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, wd], out).unwrap()
}

fn rand_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), normal_vec(rng, shape.iter().product())).unwrap()
}

#[test]
fn conv2d_matches_oracle_on_random_instances() {
    let mut rng = substream(11, "conv-oracle");
    let cases = [
        (1usize, 1usize, 2usize, 3usize, 5usize, 1usize, 1usize),
        (2, 3, 4, 1, 6, 1, 0),
        (1, 2, 5, 3, 7, 2, 1),
        (3, 4, 2, 5, 9, 1, 2),
        (2, 2, 3, 3, 8, 2, 1),
    ];
    for (n, ci, co, k, s, stride, pad) in cases {
        for _ in 0..8 {
            let x = rand_tensor(&mut rng, &[n, ci, s, s]);
            let w = rand_tensor(&mut rng, &[co, ci, k, k]);
            let b = rand_tensor(&mut rng, &[co]);
            let got = ops::conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let want = conv_oracle(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12, "conv mismatch: {a} vs {e}");
            }
        }
    }
}

#[test]
fn dwconv2d_matches_oracle_on_random_instances() {
    let mut rng = substream(12, "dw-oracle");
    for (c, k, s) in [(1usize, 1usize, 4usize), (3, 3, 6), (4, 5, 8), (2, 3, 5)] {
        for _ in 0..10 {
            let x = rand_tensor(&mut rng, &[2, c, s, s]);
            let w = rand_tensor(&mut rng, &[c, 1, k, k]);
            let got = ops::dwconv2d_forward(&x, &w, (k - 1) / 2).unwrap();
            let want = dwconv_oracle(&x, &w, (k - 1) / 2);
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12, "dwconv mismatch: {a} vs {e}");
            }
        }
    }
}
