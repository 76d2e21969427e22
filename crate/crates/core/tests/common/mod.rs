//! Nested-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use gmlnet::blocks::{BlockMode, McbParams};
use gmlnet::eval::ScoredSet;
use gmlnet::network::{compute_loss, L1Reduction, Model};
use gmlnet::{Dims5, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn at(x: &Tensor<f64>, d: &Dims5, b: usize, c: usize, t: isize, h: isize, w: isize) -> f64 {
    if t < 0 || h < 0 || w < 0 || t >= d.t as isize || h >= d.h as isize || w >= d.w as isize {
        return 0.0;
    }
    x.data()[d.index(b, c, t as usize, h as usize, w as usize)]
}

pub fn pointwise_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let d = x.dims5().unwrap();
    let c_out = w.shape()[0];
    let od = d.with_channels(c_out);
    let mut out = Tensor::zeros(&od.as_vec());
    for b in 0..d.b {
        for co in 0..c_out {
            for t in 0..d.t {
                for h in 0..d.h {
                    for ww in 0..d.w {
                        let mut acc = bias.data()[co];
                        for ci in 0..d.c {
                            acc += w.data()[co * d.c + ci] * x.data()[d.index(b, ci, t, h, ww)];
                        }
                        out.data_mut()[od.index(b, co, t, h, ww)] = acc;
                    }
                }
            }
        }
    }
    out
}

pub fn spatial_oracle(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let d = x.dims5().unwrap();
    let mut out = Tensor::zeros(x.shape());
    for b in 0..d.b {
        for c in 0..d.c {
            for t in 0..d.t {
                for h in 0..d.h {
                    for w in 0..d.w {
                        let mut acc = 0.0;
                        for i in 0..3 {
                            for j in 0..3 {
                                let v = at(x, &d, b, c, t as isize, h as isize + i - 1, w as isize + j - 1);
                                acc += k.data()[c * 9 + (i * 3 + j) as usize] * v;
                            }
                        }
                        out.data_mut()[d.index(b, c, t, h, w)] = acc;
                    }
                }
            }
        }
    }
    out
}

pub fn temporal_oracle(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let d = x.dims5().unwrap();
    let mut out = Tensor::zeros(x.shape());
    for b in 0..d.b {
        for c in 0..d.c {
            for t in 0..d.t {
                for h in 0..d.h {
                    for w in 0..d.w {
                        let mut acc = 0.0;
                        for i in 0..3 {
                            acc += k.data()[c * 3 + i as usize] * at(x, &d, b, c, t as isize + i - 1, h as isize, w as isize);
                        }
                        out.data_mut()[d.index(b, c, t, h, w)] = acc;
                    }
                }
            }
        }
    }
    out
}

pub fn shifted_subtract_oracle(cur: &Tensor<f64>, pre: &Tensor<f64>) -> Tensor<f64> {
    let d = cur.dims5().unwrap();
    let mut out = Tensor::zeros(cur.shape());
    for b in 0..d.b {
        for c in 0..d.c {
            for t in 1..d.t {
                for h in 0..d.h {
                    for w in 0..d.w {
                        out.data_mut()[d.index(b, c, t, h, w)] =
                            cur.data()[d.index(b, c, t, h, w)] - pre.data()[d.index(b, c, t - 1, h, w)];
                    }
                }
            }
        }
    }
    out
}


pub fn add_oracle(x: &Tensor<f64>, y: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(x.shape(), |i| x.data()[i] + y.data()[i])
}

pub fn relu_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(x.shape(), |i| if x.data()[i] > 0.0 { x.data()[i] } else { 0.0 })
}

pub fn pool_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let d = x.dims5().unwrap();
    let od = Dims5::new(d.b, d.c, d.t, d.h / 2, d.w / 2);
    let mut out = Tensor::zeros(&od.as_vec());
    for b in 0..d.b {
        for c in 0..d.c {
            for t in 0..d.t {
                for h in 0..od.h {
                    for w in 0..od.w {
                        let mut s = 0.0;
                        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            s += x.data()[d.index(b, c, t, 2 * h + i, 2 * w + j)];
                        }
                        out.data_mut()[od.index(b, c, t, h, w)] = s / 4.0;
                    }
                }
            }
        }
    }
    out
}

pub fn gap_oracle(x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let d = x.dims5().unwrap();
    (0..d.b)
        .map(|b| {
            (0..d.c)
                .map(|c| {
                    let start = d.index(b, c, 0, 0, 0);
                    x.data()[start..start + d.volume()].iter().sum::<f64>() / d.volume() as f64
                })
                .collect()
        })
        .collect()
}

pub fn linear_oracle(rows: &[Vec<f64>], w: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    rows.iter()
        .map(|r| (0..co).map(|o| bias.data()[o] + (0..ci).map(|i| w.data()[o * ci + i] * r[i]).sum::<f64>()).collect())
        .collect()
}

/// Logits of both heads and `F*`, evaluated with the loop oracles only.
pub struct ModelOracle {
    pub logits_main: Vec<Vec<f64>>,
    pub logits_ad: Option<Vec<Vec<f64>>>,
    pub f_star: Option<Tensor<f64>>,
}

pub fn model_oracle(m: &Model<f64>, x: &Tensor<f64>) -> ModelOracle {
    let v = |id| m.store.value(id).clone();
    let pw = |ids: &gmlnet::blocks::PointwiseIds, x: &Tensor<f64>| pointwise_oracle(x, &v(ids.weight), &v(ids.bias));
    let mut h = pw(&m.stem, x);
    let mut tap = None;
    for (i, stage) in m.stages.iter().enumerate() {
        let p = &stage.block;
        let mut out = spatial_oracle(&temporal_oracle(&h, &v(p.temporal_k)), &v(p.spatial_k));
        if let Some(mo) = &p.motion {
            let f_d = pw(&mo.down, &h);
            let kpm = v(mo.kpm);
            let m_raw = shifted_subtract_oracle(&f_d, &spatial_oracle(&f_d, &kpm));
            out = add_oracle(&out, &pw(&mo.up_m, &m_raw));
            if let Some(up_mm) = &mo.up_mm {
                let mm_raw = shifted_subtract_oracle(&m_raw, &spatial_oracle(&m_raw, &kpm));
                out = add_oracle(&out, &pw(up_mm, &mm_raw));
            }
        }
        h = relu_oracle(&out);
        if i == m.config.ad_tap_stage {
            tap = Some(h.clone());
        }
        if let Some(tr) = &stage.transition {
            h = pw(tr, &pool_oracle(&h));
        }
    }
    let logits_main = linear_oracle(&gap_oracle(&h), &v(m.head.weight), &v(m.head.bias));
    let (logits_ad, f_star) = match &m.ad {
        Some(ad) => {
            let mut f = tap.unwrap();
            for u in &ad.params.units {
                let r = relu_oracle(&spatial_oracle(&f, &v(u.cw_k)));
                f = add_oracle(&f, &pw(&u.pw, &r));
            }
            let l = linear_oracle(&gap_oracle(&f), &v(ad.head.weight), &v(ad.head.bias));
            (Some(l), Some(f))
        }
        None => (None, None),
    };
    ModelOracle { logits_main, logits_ad, f_star }
}

pub fn random_dims(rng: &mut ChaCha8Rng) -> Dims5 {
    Dims5::new(
        rng.gen_range(1..=2),
        rng.gen_range(1..=8),
        rng.gen_range(1..=4),
        rng.gen_range(1..=6),
        rng.gen_range(1..=6),
    )
}

/// Pair counting with integer half-units, so the comparison is exact.
pub fn pair_auc(s: &ScoredSet) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &li) in s.labels.iter().enumerate() {
        for (j, &lj) in s.labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1;
                twice += match s.scores[i].partial_cmp(&s.scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

pub fn random_set(rng: &mut ChaCha8Rng) -> ScoredSet {
    let n = rng.gen_range(2..=60);
    // Coarse scores so ties are common.
    let levels = rng.gen_range(2..=20);
    let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
    ScoredSet::new(scores, labels).unwrap()
}

/// Block with ratio 1, identity down-projection and a centre-tap `K_PM`.
pub fn identity_motion_block(channels: usize, seed: u64) -> (ParamStore<f32>, McbParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = McbParams::init(&mut store, "blk", channels, 1, BlockMode::Mcb, &mut rng).unwrap();
    let m = p.motion.clone().unwrap();
    *store.value_mut(m.down.weight) =
        Tensor::from_fn(&[channels, channels], |i| if i / channels == i % channels { 1.0 } else { 0.0 });
    *store.value_mut(m.down.bias) = Tensor::zeros(&[channels]);
    *store.value_mut(m.kpm) = Tensor::from_fn(&[channels, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
    (store, p)
}

/// Small integers keep every f32 sum exact.
pub fn integer_input(d: Dims5, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(&d.as_vec(), |_| rng.gen_range(-8i32..=8) as f32)
}

/// F* with two samples at chosen per-sample L1 norms, plus two fakes.
pub fn loss_for(norms: [f32; 4], labels: [usize; 4]) -> (f32, f32, f32, f32) {
    let per = 2 * 2 * 2 * 2;
    let f = Tensor::from_fn(&[4, 2, 2, 2, 2], |i| {
        let s = i / per;
        let sign = if i % 3 == 0 { -1.0 } else { 1.0 };
        sign * norms[s] / per as f32
    });
    let mut tape = Tape::<f32>::new();
    let fs = tape.leaf(f);
    let lm = tape.leaf(Tensor::from_vec(&[4, 2], vec![0.3, -0.2, 1.0, 0.5, -1.0, 2.0, 0.0, 0.1]).unwrap());
    let la = tape.leaf(Tensor::from_vec(&[4, 2], vec![0.7, 0.2, -0.4, 0.9, 0.2, 0.2, 1.5, -1.5]).unwrap());
    let l = compute_loss(&mut tape, lm, Some(la), Some(fs), &labels, L1Reduction::Sum).unwrap();
    let b = l.bundle(&tape);
    (b.l_cls1, b.l_l1, b.l_cls2, b.total)
}
