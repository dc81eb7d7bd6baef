//! Straight-line loop references for the three excitation paths.

use action_kit::excitation::{CeWeights, MeWeights, SteWeights};
use action_kit::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type D5 = [usize; 5];

pub fn at(t: &Tensor<f64>, d: D5, i: D5) -> f64 {
    t.data()[(((i[0] * d[1] + i[1]) * d[2] + i[2]) * d[3] + i[3]) * d[4] + i[4]]
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn w(t: &Tensor<f64>) -> &[f64] {
    t.data()
}

pub fn excite(x: &Tensor<f64>, d: D5, mask: impl Fn(D5) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for n in 0..d[0] {
        for t in 0..d[1] {
            for c in 0..d[2] {
                for h in 0..d[3] {
                    for wi in 0..d[4] {
                        let i = [n, t, c, h, wi];
                        let v = at(x, d, i);
                        out.push(v + v * mask(i));
                    }
                }
            }
        }
    }
    out
}

pub fn ste_oracle(x: &Tensor<f64>, p: &SteWeights<f64>) -> Vec<f64> {
    let d: D5 = x.shape().try_into().unwrap();
    let [n_, t_, c_, h_, w_] = d;
    let k = w(&p.k3d.value);
    let mean = |n: usize, t: usize, h: usize, wi: usize| (0..c_).map(|c| at(x, d, [n, t, c, h, wi])).sum::<f64>() / c_ as f64;
    let mut m = vec![0.0; n_ * t_ * h_ * w_];
    for n in 0..n_ {
        for t in 0..t_ {
            for h in 0..h_ {
                for wi in 0..w_ {
                    let mut acc = w(&p.bias.value)[0];
                    for dt in 0..3 {
                        for dh in 0..3 {
                            for dw in 0..3 {
                                let (tt, hh, ww) = (t + dt, h + dh, wi + dw);
                                if tt < 1 || hh < 1 || ww < 1 || tt > t_ || hh > h_ || ww > w_ {
                                    continue;
                                }
                                acc += k[(dt * 3 + dh) * 3 + dw] * mean(n, tt - 1, hh - 1, ww - 1);
                            }
                        }
                    }
                    m[((n * t_ + t) * h_ + h) * w_ + wi] = sigmoid(acc);
                }
            }
        }
    }
    excite(x, d, |[n, t, _, h, wi]| m[((n * t_ + t) * h_ + h) * w_ + wi])
}

pub fn ce_oracle(x: &Tensor<f64>, p: &CeWeights<f64>) -> Vec<f64> {
    let d: D5 = x.shape().try_into().unwrap();
    let [n_, t_, c_, h_, w_] = d;
    let cr = p.reduced;
    let (k1, b1, k2, b2, k3, b3) =
        (w(&p.k1_squeeze.value), w(&p.b1.value), w(&p.k2_temporal.value), w(&p.b2.value), w(&p.k3_unsqueeze.value), w(&p.b3.value));
    let mut m = vec![0.0; n_ * t_ * c_];
    for n in 0..n_ {
        let mut pooled = vec![vec![0.0; c_]; t_];
        for (t, row) in pooled.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for h in 0..h_ {
                    for wi in 0..w_ {
                        s += at(x, d, [n, t, c, h, wi]);
                    }
                }
                *v = s / (h_ * w_) as f64;
            }
        }
        let squeezed: Vec<Vec<f64>> =
            pooled.iter().map(|f| (0..cr).map(|o| b1[o] + (0..c_).map(|c| k1[o * c_ + c] * f[c]).sum::<f64>()).collect()).collect();
        for t in 0..t_ {
            let temporal: Vec<f64> = (0..cr)
                .map(|o| {
                    let mut acc = b2[o];
                    for i in 0..cr {
                        for dt in 0..3 {
                            let tt = t + dt;
                            if (1..=t_).contains(&tt) {
                                acc += k2[(o * cr + i) * 3 + dt] * squeezed[tt - 1][i];
                            }
                        }
                    }
                    acc
                })
                .collect();
            for c in 0..c_ {
                let v = b3[c] + (0..cr).map(|i| k3[c * cr + i] * temporal[i]).sum::<f64>();
                m[(n * t_ + t) * c_ + c] = sigmoid(v);
            }
        }
    }
    excite(x, d, |[n, t, c, _, _]| m[(n * t_ + t) * c_ + c])
}

pub fn me_oracle(x: &Tensor<f64>, p: &MeWeights<f64>) -> Vec<f64> {
    let d: D5 = x.shape().try_into().unwrap();
    let [n_, t_, c_, h_, w_] = d;
    let cr = p.reduced;
    let (k1, b1, kd, bd, k3, b3) =
        (w(&p.k1_squeeze.value), w(&p.b1.value), w(&p.k_diff.value), w(&p.b_diff.value), w(&p.k3_unsqueeze.value), w(&p.b3.value));
    let idx = |n: usize, t: usize, o: usize, h: usize, wi: usize| (((n * t_ + t) * cr + o) * h_ + h) * w_ + wi;
    let mut fr = vec![0.0; n_ * t_ * cr * h_ * w_];
    for n in 0..n_ {
        for t in 0..t_ {
            for o in 0..cr {
                for h in 0..h_ {
                    for wi in 0..w_ {
                        fr[idx(n, t, o, h, wi)] = b1[o] + (0..c_).map(|c| k1[o * c_ + c] * at(x, d, [n, t, c, h, wi])).sum::<f64>();
                    }
                }
            }
        }
    }
    let mut m = vec![0.0; n_ * t_ * c_];
    for n in 0..n_ {
        for t in 0..t_ {
            let mut pooled = vec![0.0; cr];
            if t + 1 < t_ {
                for (o, pv) in pooled.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for h in 0..h_ {
                        for wi in 0..w_ {
                            let mut conv = bd[o];
                            for dh in 0..3 {
                                for dw in 0..3 {
                                    let (hh, ww) = (h + dh, wi + dw);
                                    if hh >= 1 && ww >= 1 && hh <= h_ && ww <= w_ {
                                        conv += kd[o * 9 + dh * 3 + dw] * fr[idx(n, t + 1, o, hh - 1, ww - 1)];
                                    }
                                }
                            }
                            s += conv - fr[idx(n, t, o, h, wi)];
                        }
                    }
                    *pv = s / (h_ * w_) as f64;
                }
            }
            for c in 0..c_ {
                let v = b3[c] + (0..cr).map(|i| k3[c * cr + i] * pooled[i]).sum::<f64>();
                m[(n * t_ + t) * c_ + c] = sigmoid(v);
            }
        }
    }
    excite(x, d, |[n, t, c, _, _]| m[(n * t_ + t) * c_ + c])
}

pub const SHAPES: [(D5, usize); 5] =
    [([1, 3, 4, 3, 3], 2), ([2, 4, 6, 2, 3], 3), ([1, 1, 4, 2, 2], 2), ([1, 5, 20, 2, 2], 16), ([2, 2, 8, 4, 1], 4)];

pub fn input(d: D5, seed: u64) -> Tensor<f64> {
    Tensor::randn(&d, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Largest elementwise relative error of `got` against `want`.
pub fn max_rel(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter().zip(want).map(|(g, w)| (g - w).abs() / w.abs().max(1e-12)).fold(0.0, f64::max)
}
