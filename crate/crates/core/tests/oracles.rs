use std::path::PathBuf;

use dsae_core::distributions::{kl_diag_gaussians, normal_pdf};
use dsae_core::eval::{extract_pitch_contour, frechet_distance, sym_matrix_sqrt, GaussianStats};
use dsae_core::synthdata::{
    decode_dataset, encode_dataset, generate_dataset, render_sequence, Dataset, FactorSpec,
};
use dsae_core::{DiagGaussian, Rng, Tape, Tensor};

fn kl_1d(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    let mut tape = Tape::new();
    let mut g = |m: f64, l: f64| {
        let m = tape.constant(Tensor::new(&[1], vec![m]).unwrap());
        let l = tape.constant(Tensor::new(&[1], vec![l]).unwrap());
        (m, l)
    };
    let (a, b) = g(mq, lq);
    let (c, d) = g(mp, lp);
    let q = DiagGaussian::new(&tape, a, b).unwrap();
    let p = DiagGaussian::new(&tape, c, d).unwrap();
    let kl = kl_diag_gaussians(&mut tape, &q, &p).unwrap();
    tape.value(kl).item()
}

/// E_q[log q(x) − log p(x)] from 10⁶ draws of q.
fn kl_monte_carlo(mq: f64, vq: f64, mp: f64, vp: f64, seed: u64) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let x = mq + vq.sqrt() * rng.normal();
        acc += normal_pdf(x, mq, vq).ln() - normal_pdf(x, mp, vp).ln();
    }
    acc / n as f64
}

#[test]
fn kl_matches_closed_form_and_sampling() {
    let e = std::f64::consts::E;
    // (q mean, q logvar, p mean, p logvar, expected)
    let cases = [
        (0.3, -0.2, 0.3, -0.2, 0.0),
        (1.0, 0.0, 0.0, 0.0, 0.5),
        (0.0, 1.0, 0.0, 0.0, (e - 2.0) / 2.0),
    ];
    for (k, &(mq, lq, mp, lp, want)) in cases.iter().enumerate() {
        let got = kl_1d(mq, lq, mp, lp);
        assert!((got - want).abs() < 1e-9, "case {k}: {got} vs {want}");
        let mc = kl_monte_carlo(mq, lq.exp(), mp, lp.exp(), 11 + k as u64);
        let tol = if want == 0.0 { 1e-9 } else { 0.01 * want };
        assert!((mc - want).abs() <= tol, "case {k}: sampled {mc} vs {want}");
    }
}

#[test]
fn frechet_trivial_cases() {
    let stats = |mean: Vec<f64>, cov: Vec<f64>| GaussianStats { mean, cov };
    let id = vec![1.0, 0.0, 0.0, 1.0];
    let a = stats(vec![0.0, 0.0], id.clone());
    let b = stats(vec![3.0, -1.0], id.clone());
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    assert!((frechet_distance(&a, &b).unwrap() - 10.0).abs() < 1e-8);
    // 1-D: (0 − 0)² + 1 + 4 − 2·√4 = 1.
    let s1 = stats(vec![0.0], vec![1.0]);
    let s4 = stats(vec![0.0], vec![4.0]);
    assert!((frechet_distance(&s1, &s4).unwrap() - 1.0).abs() < 1e-8);
}

#[test]
fn matrix_sqrt_reconstructs() {
    let mut rng = Rng::seed_from_u64(5);
    for n in [1, 2, 5, 12] {
        let a: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum::<f64>();
            }
        }
        let r = sym_matrix_sqrt(n, &m).unwrap();
        let mut err = 0.0;
        for i in 0..n {
            for j in 0..n {
                let rr: f64 = (0..n).map(|k| r[i * n + k] * r[k * n + j]).sum();
                err += (rr - m[i * n + j]).powi(2);
            }
        }
        assert!(err.sqrt() < 1e-8, "n = {n}: Frobenius error {}", err.sqrt());
    }
}

#[test]
fn pitch_contour_recovers_every_grid_point() {
    let spec = FactorSpec {
        octaves: 2,
        noise_std: 0.0,
        ..FactorSpec::default()
    };
    // Each melody walks the pitch range, so together they cover every
    // (note, instrument, octave) triple.
    let notes: Vec<u8> = (0..spec.n_notes).map(|k| (k % spec.pitch_range) as u8).collect();
    let reversed: Vec<u8> = notes.iter().rev().copied().collect();
    for melody in [&notes, &reversed] {
        for inst in 0..spec.n_instruments {
            for oct in 0..spec.octaves {
                let x = render_sequence(melody, inst, oct, &spec, None).unwrap();
                let want: Vec<usize> = (0..spec.seq_len())
                    .map(|t| spec.fundamental_bin(melody[t / spec.note_len] as usize, oct))
                    .collect();
                assert_eq!(extract_pitch_contour(&x), want, "instrument {inst}, octave {oct}");
            }
        }
    }
}

#[test]
fn dataset_bytes_round_trip_and_detect_corruption() {
    let spec = FactorSpec {
        octaves: 2,
        ..FactorSpec::default()
    };
    let data = generate_dataset(&spec, 40, 9).unwrap();
    let bytes = encode_dataset(&data.train).unwrap();
    let back = decode_dataset(&bytes).unwrap();
    // Melodies are not stored; spectrograms and labels are.
    assert_eq!(back.len(), data.train.len());
    for (a, b) in back.records.iter().zip(&data.train.records) {
        assert_eq!(a.x, b.x);
        assert_eq!((a.instrument, a.octave), (b.instrument, b.octave));
        assert!(a.melody.is_none());
    }
    assert_eq!(encode_dataset(&back).unwrap(), bytes);
    for pos in [10, bytes.len() / 2, bytes.len() - 5] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        assert!(decode_dataset(&bad).is_err(), "flip at byte {pos} went unnoticed");
    }
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/fixture8.dseq")
}

fn fixture_dataset() -> Dataset {
    generate_dataset(&FactorSpec::default(), 10, 2024).unwrap().train
}

/// Guards the file format and the generator's random stream against silent
/// changes. Regenerate with `DSAE_WRITE_FIXTURES=1` after an intended change.
#[test]
fn committed_fixture_matches_generator() {
    let data = fixture_dataset();
    assert_eq!(data.len(), 8);
    let bytes = encode_dataset(&data).unwrap();
    if std::env::var_os("DSAE_WRITE_FIXTURES").is_some() {
        std::fs::write(fixture_path(), &bytes).unwrap();
    }
    let committed = std::fs::read(fixture_path()).unwrap();
    assert_eq!(committed, bytes);
    let decoded = decode_dataset(&committed).unwrap();
    assert_eq!(decoded.labels(0), vec![1, 0, 1, 0, 0, 1, 0, 0]);
}
