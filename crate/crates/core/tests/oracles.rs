//! Independent oracles (dense linear algebra via nalgebra) and end-to-end
//! properties.

mod common;

use common::*;
use lasers::autoencoder::{decode, encode, train, train_model_target, AffineCoder, Model, TrainConfig, UpdateRule};
use lasers::bottleneck::BottleneckKind;
use lasers::cli::{center_mask, checkpoint_of, mask_evaluate, model_from_checkpoint};
use lasers::data_io::{decode_checkpoint, encode_checkpoint, generate_planted, load_images, PlantedModel};
use lasers::metrics::{savitzky_golay, top_right_singular_vector, top_singular_projection};
use lasers::tensor::{LatentTensor, SignalMatrix};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn fix_sign(mut v: Vec<f64>) -> Vec<f64> {
    let (mut best, mut mag) = (0, 0.0);
    for (i, x) in v.iter().enumerate() {
        if x.abs() > mag {
            (best, mag) = (i, x.abs());
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

#[test]
fn projection_matches_svd_oracle() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let (h, w, l) = (5, 4, 6);
        let data = gaussian_vec(&mut r, h * w * l);
        let z = LatentTensor::new(h, w, l, data.clone()).unwrap();
        let m = DMatrix::from_row_slice(h * w, l, &data);
        let svd = m.clone().svd(false, true);
        let top = svd.singular_values.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        let v_t = svd.v_t.unwrap();
        let oracle = fix_sign(v_t.row(top).iter().copied().collect());
        let got = top_right_singular_vector(&z).unwrap();
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "seed {seed}: {got:?} vs {oracle:?}");
        }

        let proj = &m * DVector::from_vec(oracle);
        let (lo, hi) = (proj.min(), proj.max());
        let image = top_singular_projection(&z);
        for (a, b) in image.iter().zip(proj.iter()) {
            assert!((a - (b - lo) / (hi - lo)).abs() < 1e-8);
        }
    }
}

#[test]
fn projection_of_rank_one_tensor_recovers_pattern() {
    let pattern: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let v = [0.6, 0.0, -0.8];
    let data: Vec<f64> = pattern.iter().flat_map(|p| v.iter().map(move |c| p * c)).collect();
    let z = LatentTensor::new(3, 4, 3, data).unwrap();
    let image = top_singular_projection(&z);
    // the sign convention flips v (its largest entry is -0.8), reversing the ramp
    for (i, px) in image.iter().enumerate() {
        assert!((px - (1.0 - i as f64 / 11.0)).abs() < 1e-9);
    }
}

/// Least-squares polynomial through the window used for point `i`,
/// evaluated at `i`.
fn savgol_oracle(series: &[f64], window: usize, order: usize) -> Vec<f64> {
    let n = series.len();
    let half = window / 2;
    (0..n)
        .map(|i| {
            let start = i.saturating_sub(half).min(n - window);
            let a = DMatrix::from_fn(window, order + 1, |r, p| ((start + r) as f64).powi(p as i32));
            let b = DVector::from_iterator(window, series[start..start + window].iter().copied());
            let coef = a.svd(true, true).solve(&b, 1e-14).unwrap();
            (0..=order).map(|p| coef[p] * (i as f64).powi(p as i32)).sum()
        })
        .collect()
}

#[test]
fn savitzky_golay_matches_least_squares_oracle() {
    let mut r = rng(3);
    for (window, order) in [(9, 2), (5, 1), (7, 3), (9, 0)] {
        let series = gaussian_vec(&mut r, 30);
        let got = savitzky_golay(&series, window, order).unwrap();
        let oracle = savgol_oracle(&series, window, order);
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "window {window} order {order}: {a} vs {b}");
        }
    }
}

proptest! {
    #[test]
    fn savitzky_golay_is_linear(
        a in proptest::collection::vec(-10.0f64..10.0, 12..40),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v.sin() + i as f64 * 0.1).collect();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
        let sa = savitzky_golay(&a, 9, 2).unwrap();
        let sb = savitzky_golay(&b, 9, 2).unwrap();
        let sm = savitzky_golay(&mix, 9, 2).unwrap();
        for i in 0..a.len() {
            prop_assert!((sm[i] - (alpha * sa[i] + beta * sb[i])).abs() < 1e-8);
        }
    }

    #[test]
    fn savitzky_golay_keeps_quadratics(c0 in -5.0f64..5.0, c1 in -1.0f64..1.0, c2 in -0.1f64..0.1, n in 9usize..40) {
        let series: Vec<f64> = (0..n).map(|i| c0 + c1 * i as f64 + c2 * (i * i) as f64).collect();
        let out = savitzky_golay(&series, 9, 2).unwrap();
        for (a, b) in out.iter().zip(&series) {
            prop_assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn encode_matches_dense_product() {
    let mut r = rng(8);
    let (m, l, n) = (7, 4, 5);
    let c = AffineCoder::affine(
        m,
        l,
        gaussian_vec(&mut r, l * m),
        gaussian_vec(&mut r, l),
        gaussian_vec(&mut r, m * l),
        gaussian_vec(&mut r, m),
    )
    .unwrap();
    let x = uniform_matrix(&mut r, m, n);
    let z = encode(&x, &c).unwrap();
    let oracle = DMatrix::from_row_slice(l, m, &c.enc_w) * DMatrix::from_column_slice(m, n, x.data())
        + DMatrix::from_fn(l, n, |i, _| c.enc_b[i]);
    for (a, b) in z.data().iter().zip(oracle.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
    let y = decode(&z, &c).unwrap();
    let oracle = DMatrix::from_row_slice(m, l, &c.dec_w) * oracle + DMatrix::from_fn(m, n, |i, _| c.dec_b[i]);
    for (a, b) in y.data().iter().zip(oracle.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn decode_inverts_encode_with_explicit_inverse() {
    let mut r = rng(9);
    let m = 6;
    let enc = DMatrix::from_row_slice(m, m, &gaussian_vec(&mut r, m * m)) + DMatrix::identity(m, m) * 3.0;
    let enc_b = DVector::from_vec(gaussian_vec(&mut r, m));
    let inv = enc.clone().try_inverse().unwrap();
    let dec_b = -(&inv * &enc_b);
    let row_major = |a: &DMatrix<f64>| a.transpose().as_slice().to_vec();
    let c = AffineCoder::affine(m, m, row_major(&enc), enc_b.as_slice().to_vec(), row_major(&inv), dec_b.as_slice().to_vec())
        .unwrap();
    let x = uniform_matrix(&mut r, m, 11);
    let back = decode(&encode(&x, &c).unwrap(), &c).unwrap();
    for (a, b) in back.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

fn planted(dim: usize, k: usize, n: usize, seed: u64) -> SignalMatrix {
    let d = gaussian_dictionary(k, dim, seed);
    generate_planted(&PlantedModel::new(d, 3), n, seed + 10).unwrap().0.samples
}

#[test]
fn dl_fits_planted_data_and_vq_cannot() {
    let x = planted(32, 32, 1000, 5);
    for rule in [UpdateRule::Gradient, UpdateRule::Bcd] {
        let cfg = TrainConfig { kind: BottleneckKind::Dl, k: 64, s: 3, lr: 1e-2, epochs: 200, update_rule: rule, seed: 5, ..TrainConfig::default() };
        let dl = train(&x, &cfg).unwrap();
        let mse = dl.history.last().unwrap().mse;
        assert!(mse < 1e-3, "{rule}: final DL MSE {mse}");
    }
    let cfg = TrainConfig { kind: BottleneckKind::Vq, k: 64, epochs: 50, seed: 5, ..TrainConfig::default() };
    let vq = train(&x, &cfg).unwrap().model.evaluate(&x, &cfg).unwrap();
    // one codeword per signal cannot follow continuous 3-atom mixtures
    assert!(vq.recon_mse > 1e-2, "VQ MSE {}", vq.recon_mse);
}

#[test]
fn checkpoints_restore_models() {
    let x = planted(16, 16, 300, 6);
    for (kind, coder) in [
        (BottleneckKind::Vq, lasers::autoencoder::CoderMode::RawPatch),
        (BottleneckKind::Dl, lasers::autoencoder::CoderMode::Affine),
        (BottleneckKind::Identity, lasers::autoencoder::CoderMode::Affine),
    ] {
        let cfg = TrainConfig { kind, coder, k: 24, l: 8, s: 3, epochs: 3, batch_size: 50, seed: 6, ..TrainConfig::default() };
        let model = train(&x, &cfg).unwrap().model;
        let bytes = encode_checkpoint(&checkpoint_of(&model)).unwrap();
        let restored = model_from_checkpoint(decode_checkpoint(&bytes).unwrap(), &cfg, 16).unwrap();
        assert_eq!(restored.bottleneck.kind(), kind);
        // stored as f32: a second round trip is byte-identical
        assert_eq!(encode_checkpoint(&checkpoint_of(&restored)).unwrap(), bytes);
        let a = model.evaluate(&x, &cfg).unwrap();
        let b = restored.evaluate(&x, &cfg).unwrap();
        assert!((a.recon_mse - b.recon_mse).abs() < 1e-5 * (1.0 + a.recon_mse), "{kind}: {a:?} vs {b:?}");
    }
}

#[test]
fn masked_training_favours_dl() {
    let data = load_images(&images_dir(), 8, 2000, 7).unwrap().samples;
    let (masked, side, _) = center_mask(&data, 0.25).unwrap();
    assert_eq!(side, 2);
    let psnr = |kind| {
        let cfg = paired_config(kind);
        let model = Model::new(&masked, &cfg).unwrap();
        let model = train_model_target(model, &masked, &data, &cfg).unwrap().model;
        mask_evaluate(&model, &data, 0.25, &cfg).unwrap().full_psnr
    };
    let (dl, vq) = (psnr(BottleneckKind::Dl), psnr(BottleneckKind::Vq));
    assert!(dl >= vq, "DL {dl} dB vs VQ {vq} dB");
}

#[test]
fn identical_configs_share_initial_coder() {
    // only the bottleneck differs: same data, same coder init
    let x = planted(16, 16, 200, 7);
    let mk = |kind| {
        let cfg = TrainConfig { kind, coder: lasers::autoencoder::CoderMode::Affine, k: 32, l: 8, s: 2, seed: 7, ..TrainConfig::default() };
        Model::new(&x, &cfg).unwrap()
    };
    let (a, b) = (mk(BottleneckKind::Vq), mk(BottleneckKind::Dl));
    assert_eq!(a.coder, b.coder);
}
