//! Generator contracts, frame geometry and on-disk formats.

use gmlnet::data::{
    crop_box, gen_dataset, gen_sequence, sample_frames, second_difference_energy, write_dataset, Dataset, GenParams,
    Label, Manifest, MANIFEST_FILE,
};
use gmlnet::io::{decode_tensor, encode_tensor, read_tensor, write_tensor};
use gmlnet::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[test]
fn crop_box_examples() {
    assert_eq!(crop_box(100.0, 100.0, (50.0, 50.0)).unwrap().side, 200);
    assert_eq!(crop_box(64.0, 100.0, (0.0, 0.0)).unwrap().side, 160);
    assert_eq!(crop_box(50.0, 200.0, (0.0, 0.0)).unwrap().side, 200);
    let b = crop_box(100.0, 100.0, (120.0, 80.0)).unwrap();
    assert_eq!((b.x0, b.y0), (20, -20));
    let c = b.clamp_to(300, 300);
    assert_eq!((c.x0, c.y0, c.side), (20, 0, 200));
    assert!(crop_box(0.0, 10.0, (0.0, 0.0)).is_err());
    assert!(crop_box(10.0, -1.0, (0.0, 0.0)).is_err());
}

#[test]
fn sample_frames_examples() {
    let w = sample_frames(32, 2, 8).unwrap();
    assert_eq!(w, vec![(0..16).step_by(2).collect::<Vec<_>>(), (16..32).step_by(2).collect()]);
    assert_eq!(sample_frames(15, 2, 8).unwrap(), vec![(0..15).step_by(2).collect::<Vec<_>>()]);
    assert!(sample_frames(7, 2, 8).unwrap().is_empty());
    assert!(sample_frames(7, 0, 8).is_err());
}

#[test]
fn generator_is_deterministic_and_bounded() {
    let p = GenParams::default();
    for label in [Label::Real, Label::Fake] {
        let a = gen_sequence(&p, label, 5).unwrap();
        let b = gen_sequence(&p, label, 5).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.tensor), bits(&b.tensor));
        assert_eq!(a.tensor.shape(), [1, 3, 8, 32, 32]);
        assert!(a.tensor.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.label, label);
    }
    assert_ne!(gen_sequence(&p, Label::Real, 5).unwrap().tensor, gen_sequence(&p, Label::Real, 6).unwrap().tensor);
}

#[test]
fn vanishing_jitter_reproduces_the_real_clip() {
    let mut p = GenParams::default();
    p.jitter_amp = 1e-12;
    for seed in 0..5 {
        let real = gen_sequence(&p, Label::Real, seed).unwrap();
        let fake = gen_sequence(&p, Label::Fake, seed).unwrap();
        let diff = real.tensor.data().iter().zip(fake.tensor.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-6, "seed {seed}: {diff}");
    }
    p.jitter_amp = 0.0;
    assert!(gen_sequence(&p, Label::Fake, 0).is_err());
    assert!(gen_sequence(&p, Label::Real, 0).is_ok());
}

#[test]
fn fakes_differ_only_inside_their_region() {
    let p = GenParams::default();
    for seed in 0..20 {
        let real = gen_sequence(&p, Label::Real, seed).unwrap();
        let fake = gen_sequence(&p, Label::Fake, seed).unwrap();
        assert_eq!(real.region, fake.region);
        let d = real.tensor.dims5().unwrap();
        let mut changed = 0;
        for c in 0..d.c {
            for t in 0..d.t {
                for y in 0..d.h {
                    for x in 0..d.w {
                        let i = d.index(0, c, t, y, x);
                        if real.tensor.data()[i] != fake.tensor.data()[i] {
                            assert!(real.region.contains(y, x), "seed {seed} ({y},{x})");
                            changed += 1;
                        }
                    }
                }
            }
        }
        assert!(changed > 0);
    }
}

#[test]
fn second_difference_separates_pairs() {
    let p = GenParams::default();
    let wins = (0..100)
        .filter(|&seed| {
            let real = gen_sequence(&p, Label::Real, seed).unwrap();
            let fake = gen_sequence(&p, Label::Fake, seed).unwrap();
            second_difference_energy(&fake.tensor, &fake.region).unwrap()
                > second_difference_energy(&real.tensor, &real.region).unwrap()
        })
        .count();
    assert!(wins >= 95, "{wins}/100");
}

#[test]
fn tensor_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = Tensor::<f32>::uniform(&[2, 3, 4, 5, 6], -1e3, 1e3, &mut rng);
    let path = dir.path().join("x.gmlt");
    write_tensor(&path, &t).unwrap();
    let back = read_tensor(&path).unwrap();
    assert_eq!(
        t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(back.shape(), t.shape());

    let one = encode_tensor(&Tensor::filled(&[1, 1, 1, 1, 1], 2.5)).unwrap();
    assert_eq!(one.len(), 31);
    assert_eq!(&one[..7], b"GMLT\x01\x01\x05");
    assert_eq!(&one[27..], 2.5f32.to_le_bytes());
}

#[test]
fn tensor_file_errors_are_distinct() {
    let p = Path::new("t.gmlt");
    let good = encode_tensor(&Tensor::filled(&[1, 2, 1, 1, 1], 1.0)).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode_tensor(&bad, p), Err(Error::BadMagic { .. })));

    let mut version = good.clone();
    version[4] = 9;
    assert!(matches!(decode_tensor(&version, p), Err(Error::Unsupported { .. })));

    assert!(matches!(decode_tensor(&good[..good.len() - 1], p), Err(Error::Truncated { .. })));
    assert!(matches!(decode_tensor(&good[..10], p), Err(Error::Truncated { .. })));

    let mut huge = good.clone();
    for i in 0..5 {
        huge[7 + 4 * i..11 + 4 * i].copy_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(matches!(decode_tensor(&huge, p), Err(Error::DimOverflow { .. })));

    assert!(matches!(read_tensor("/nonexistent/dir/t.gmlt"), Err(Error::Io { .. })));
}

#[test]
fn dataset_round_trips_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = GenParams::default();
    p.h = 16;
    p.w = 16;
    let samples = gen_dataset(&p, 6, 0.5, 11).unwrap();
    assert_eq!(samples.iter().filter(|s| s.label == Label::Fake).count(), 3);
    let manifest = write_dataset(dir.path(), &samples).unwrap();
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert_eq!(text.lines().next().unwrap(), format!("seq_00000.gmlt,1,{}", samples[0].seed));
    assert_eq!(Manifest::read(dir.path()).unwrap(), manifest);

    let loaded = Dataset::load(dir.path()).unwrap();
    let direct = Dataset::from_samples(&samples).unwrap();
    assert_eq!(loaded.inputs, direct.inputs);
    assert_eq!(loaded.labels, vec![1, 1, 1, 0, 0, 0]);
    assert_eq!(gen_dataset(&p, 6, 0.5, 11).unwrap()[4].tensor, samples[4].tensor);
}

#[test]
fn manifest_rejects_bad_records() {
    let p = Path::new("manifest.csv");
    assert!(Manifest::parse("a.gmlt,2,1\n", p).is_err());
    assert!(Manifest::parse("a.gmlt,1\n", p).is_err());
    assert!(Manifest::parse("a.gmlt,1,x\n", p).is_err());
    assert!(Manifest::parse("a.gmlt,1,1\na.gmlt,0,2\n", p).is_err());
    let m = Manifest::parse("a.gmlt,1,7\nb.gmlt,0,8\n", p).unwrap();
    assert_eq!(m.entries.len(), 2);
    assert_eq!(m.to_text(), "a.gmlt,1,7\nb.gmlt,0,8\n");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crop_side_is_symmetric(w in 0.5f64..2000.0, h in 0.5f64..2000.0) {
        prop_assert_eq!(crop_box(w, h, (0.0, 0.0)).unwrap().side, crop_box(h, w, (0.0, 0.0)).unwrap().side);
    }

    #[test]
    fn windows_respect_stride(len in 0usize..200, stride in 1usize..5, seq in 1usize..10) {
        let windows = sample_frames(len, stride, seq).unwrap();
        let flat: Vec<usize> = windows.concat();
        prop_assert_eq!(flat.len(), windows.len() * seq);
        for (i, &f) in flat.iter().enumerate() {
            prop_assert_eq!(f, i * stride);
            prop_assert!(f < len);
        }
        prop_assert!((len.div_ceil(stride)) / seq == windows.len());
    }

    #[test]
    fn any_tensor_round_trips(b in 1usize..3, c in 1usize..4, t in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let x = Tensor::<f32>::uniform(&[b, c, t, h, w], -10.0, 10.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = encode_tensor(&x).unwrap();
        prop_assert_eq!(bytes.len(), 27 + 4 * x.numel());
        prop_assert_eq!(decode_tensor(&bytes, Path::new("p")).unwrap(), x);
    }
}
