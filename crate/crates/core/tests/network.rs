//! Whole-model forward passes, loss composition and prediction.

use gmlnet::blocks::BlockMode;
use gmlnet::network::{average_fake_score, compute_loss, L1Reduction, Model, ModelConfig};
use gmlnet::{Error, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{loss_for, model_oracle};

fn small(mode: BlockMode, ad: bool, seed: u64) -> ModelConfig {
    ModelConfig {
        mode,
        ad_enabled: ad,
        seed,
        ..ModelConfig::default()
    }
}

fn input(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Logits for seed 0, mode mcb, AD on, input `input(&[2, 3, 4, 8, 8], 42)`,
/// evaluated by the loop oracles in f64.
const GOLDEN_MAIN: [[f64; 2]; 2] = [[-5.321144198612741, -1.2131658149920417], [-6.372328483187395, -1.4308953850699009]];
const GOLDEN_AD: [[f64; 2]; 2] = [[-4.874527797522022, 8.408812146563612], [-5.786223164435011, 10.332054282061204]];

#[test]
fn forward_matches_loop_oracle() {
    for (mode, ad, seed) in [
        (BlockMode::Mcb, true, 0),
        (BlockMode::Mcb, false, 1),
        (BlockMode::Stm, true, 2),
        (BlockMode::CstmOnly, true, 3),
    ] {
        let mut model = Model::build(&small(mode, ad, seed)).unwrap().cast::<f64>();
        // Non-zero biases and AD weights so every term is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for p in model.store.iter_mut() {
            if p.name.ends_with(".bias") || p.name.starts_with("ad.unit") {
                p.value = Tensor::uniform(p.value.shape(), -0.3, 0.3, &mut rng);
            }
        }
        let x = input(&[2, 3, 4, 8, 8], seed).cast::<f64>();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = model.forward(&mut tape, xv).unwrap();
        let want = model_oracle(&model, &x);
        let got = tape.value(out.logits_main).data();
        for (g, w) in got.iter().zip(want.logits_main.concat()) {
            assert!((g - w).abs() <= 1e-9, "{mode}: {g} vs {w}");
        }
        match (out.logits_ad, want.logits_ad) {
            (Some(l), Some(w)) => {
                for (g, w) in tape.value(l).data().iter().zip(w.concat()) {
                    assert!((g - w).abs() <= 1e-9, "{mode} ad: {g} vs {w}");
                }
                let fs = tape.value(out.f_star.unwrap());
                let e = common::max_abs_diff(fs, &want.f_star.unwrap());
                assert!(e <= 1e-9);
            }
            (None, None) => assert!(!ad),
            _ => panic!("AD head presence differs"),
        }
    }
}

#[test]
fn golden_logits() {
    let model = Model::build(&small(BlockMode::Mcb, true, 0)).unwrap().cast::<f64>();
    let x = input(&[2, 3, 4, 8, 8], 42).cast::<f64>();
    let want = model_oracle(&model, &x);
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let out = model.forward(&mut tape, xv).unwrap();
    let main = tape.value(out.logits_main).data().to_vec();
    let ad = tape.value(out.logits_ad.unwrap()).data().to_vec();
    for (i, row) in GOLDEN_MAIN.iter().enumerate() {
        for j in 0..2 {
            assert!((want.logits_main[i][j] - row[j]).abs() <= 1e-12);
            assert!((main[2 * i + j] - row[j]).abs() <= 1e-9);
        }
    }
    let want_ad = want.logits_ad.unwrap();
    for (i, row) in GOLDEN_AD.iter().enumerate() {
        for j in 0..2 {
            assert!((want_ad[i][j] - row[j]).abs() <= 1e-12);
            assert!((ad[2 * i + j] - row[j]).abs() <= 1e-9);
        }
    }
}

#[test]
fn zero_input_gives_zero_logits() {
    // Biases start at zero, so every layer maps zero to zero.
    let model = Model::build(&small(BlockMode::Mcb, true, 5)).unwrap();
    let pred = model.predict(&Tensor::zeros(&[3, 3, 8, 8, 8])).unwrap();
    assert!(pred.score.iter().all(|&s| s == 0.5));
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::zeros(&[1, 3, 8, 8, 8]));
    let out = model.forward(&mut tape, xv).unwrap();
    assert!(tape.value(out.logits_main).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(out.logits_ad.unwrap()).data().iter().all(|&v| v == 0.0));
}

#[test]
fn disabling_ad_leaves_the_backbone_untouched() {
    let on = Model::build(&small(BlockMode::Mcb, true, 9)).unwrap();
    let off = Model::build(&small(BlockMode::Mcb, false, 9)).unwrap();
    assert!(off.store.iter().all(|p| !p.name.starts_with("ad.")));
    assert!(on.store.len() > off.store.len());
    for p in off.store.iter() {
        let q = on.store.get(on.store.id(&p.name).unwrap());
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    let x = input(&[2, 3, 8, 16, 16], 1);
    let a = on.predict(&x).unwrap();
    let b = off.predict(&x).unwrap();
    assert_eq!(a.p_main, b.p_main);
    assert!(b.p_ad.is_none());
    let main_only: Vec<f32> = b.p_main.iter().map(|p| p[1]).collect();
    assert_eq!(b.score, main_only);
}

#[test]
fn tap_width_follows_stage() {
    let cfg = ModelConfig {
        stages: 2,
        base_width: 16,
        width_multiplier: 2,
        ad_tap_stage: 1,
        ..ModelConfig::default()
    };
    assert_eq!(cfg.stage_widths(), [16, 32]);
    let model = Model::build(&cfg).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(input(&[1, 3, 4, 8, 8], 2));
    let out = model.forward(&mut tape, xv).unwrap();
    let tap = tape.value(out.tap).dims5().unwrap();
    assert_eq!(tap.c, 32);
    assert_eq!(tape.value(out.f_star.unwrap()).shape(), tape.value(out.tap).shape());
    assert_eq!(tape.value(out.logits_main).shape(), [1, 2]);
}

#[test]
fn rejects_bad_inputs() {
    let model = Model::build(&ModelConfig::default()).unwrap();
    assert!(matches!(model.predict(&Tensor::zeros(&[1, 2, 4, 8, 8])), Err(Error::Dimension { .. })));
    assert!(model.predict(&Tensor::zeros(&[1, 3, 4, 1, 1])).is_err());
    assert!(model.predict(&Tensor::zeros(&[3, 4, 8, 8])).is_err());
}

#[test]
fn config_round_trips_through_text() {
    let cfg = ModelConfig {
        stages: 3,
        mode: BlockMode::Stm,
        ad_enabled: false,
        reduction_ratio: 4,
        seed: 77,
        l1_reduction: L1Reduction::Mean,
        ..ModelConfig::default()
    };
    assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
}

#[test]
fn l1_term_averages_real_samples() {
    let (c1, l1, c2, total) = loss_for([3.0, 5.0, 11.0, 13.0], [0, 0, 1, 1]);
    assert_eq!(l1, 4.0);
    assert_eq!(total, (c1 + l1) + c2);
    // Fake samples never contribute.
    let (_, l1_other, _, _) = loss_for([3.0, 5.0, 0.0, 100.0], [0, 0, 1, 1]);
    assert_eq!(l1, l1_other);
    let (_, l1_fake, _, _) = loss_for([3.0, 5.0, 11.0, 13.0], [1, 1, 1, 1]);
    assert_eq!(l1_fake, 0.0);
}

#[test]
fn mean_reduction_divides_by_sample_size() {
    let mut tape = Tape::<f64>::new();
    let fs = tape.leaf(Tensor::filled(&[2, 2, 2, 2, 2], 0.5));
    let lm = tape.leaf(Tensor::zeros(&[2, 2]));
    let la = tape.leaf(Tensor::zeros(&[2, 2]));
    let l = compute_loss(&mut tape, lm, Some(la), Some(fs), &[0, 1], L1Reduction::Mean).unwrap();
    assert_eq!(l.bundle(&tape).l_l1, 0.5);
    assert!(compute_loss(&mut tape, lm, Some(la), Some(fs), &[0, 2], L1Reduction::Sum).is_err());
    assert!(compute_loss(&mut tape, lm, Some(la), None, &[0, 1], L1Reduction::Sum).is_err());
}

#[test]
fn loss_without_ad_is_main_cross_entropy() {
    let mut tape = Tape::<f32>::new();
    let lm = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let l = compute_loss(&mut tape, lm, None, None, &[0, 1], L1Reduction::Sum).unwrap();
    let b = l.bundle(&tape);
    assert_eq!((b.l_l1, b.l_cls2), (0.0, 0.0));
    assert_eq!(b.total, b.l_cls1);
    assert!((b.l_cls1 - (1.0 + (-1.0f32).exp()).ln()).abs() < 1e-6);
}

#[test]
fn score_averages_both_heads() {
    let main = [[0.8, 0.2], [0.1, 0.9]];
    let ad = [[0.4, 0.6], [0.3, 0.7]];
    let s = average_fake_score(&main, Some(&ad));
    assert!((s[0] - 0.4).abs() < 1e-7 && (s[1] - 0.8).abs() < 1e-7);
    assert_eq!(average_fake_score(&main, None), vec![0.2, 0.9]);
}
