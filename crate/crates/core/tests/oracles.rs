//! Front-end and quantizer checks against direct f64 reference computations.

use nvc_core::features::{FeatureFrame, MelConfig, MelExtractor};
use nvc_core::filterbank::{analyze, prototype, PrototypeKind, QmfCascade};
use nvc_core::pipeline::synthetic_utterance;
use nvc_core::quantizer::{fit_klt, kmeans};
use nvc_core::rng::CounterRng;
use nvc_core::vocoder::{mol_log_likelihood, MolParams};
use nvc_core::AudioBuffer;

/// Log-mel of one window by a direct DFT and filters built from the HTK
/// mel formula.
fn mel_oracle(cfg: &MelConfig, window: &[f32]) -> Vec<f64> {
    let n_fft = cfg.fft_size;
    let len = cfg.window_len();
    let sr = cfg.sample_rate as f64;
    let tau = std::f64::consts::TAU;
    let x: Vec<f64> = (0..len)
        .map(|n| {
            let w = 0.5 - 0.5 * (tau * n as f64 / len as f64).cos();
            window.get(n).map_or(0.0, |&s| s as f64 * w)
        })
        .collect();
    let power: Vec<f64> = (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                let a = tau * (k * n % n_fft) as f64 / n_fft as f64;
                re += v * a.cos();
                im -= v * a.sin();
            }
            re * re + im * im
        })
        .collect();
    let mel = |f: f64| 1127.0 * (1.0 + f / 700.0).ln();
    let inv = |m: f64| 700.0 * ((m / 1127.0).exp() - 1.0);
    let (lo, hi) = (mel(cfg.fmin_hz), mel(cfg.fmax_hz));
    let edge = |i: usize| inv(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64);
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edge(m), edge(m + 1), edge(m + 2));
            let e: f64 = power
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let f = k as f64 * sr / n_fft as f64;
                    let w = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    w * p
                })
                .sum();
            e.max(cfg.log_floor).ln()
        })
        .collect()
}

#[test]
fn log_mel_matches_direct_dft() {
    let cfg = MelConfig::default();
    let ex = MelExtractor::new(cfg.clone()).unwrap();
    let audio = synthetic_utterance(0.5, 3);
    let frames = ex.extract(&audio).unwrap();
    assert_eq!(frames.len(), 13);
    let hop = cfg.hop_len();
    for t in [0, 5, 12] {
        let end = (t * hop + cfg.window_len()).min(audio.len());
        let want = mel_oracle(&cfg, &audio.samples()[t * hop..end]);
        for (m, (g, w)) in frames[t].values.iter().zip(&want).enumerate() {
            assert!((*g as f64 - w).abs() < 1e-4, "frame {t} band {m}: {g} vs {w}");
        }
    }
}

#[test]
fn pure_tone_peaks_in_the_band_around_its_frequency() {
    let cfg = MelConfig::default();
    let tone: Vec<f32> = (0..16000)
        .map(|n| (0.3 * (std::f64::consts::TAU * 1000.0 * n as f64 / 16000.0).sin()) as f32)
        .collect();
    let frames = MelExtractor::new(cfg.clone())
        .unwrap()
        .extract(&AudioBuffer::from_samples(tone).unwrap())
        .unwrap();
    let v = &frames[10].values;
    let peak = (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let centers = nvc_core::features::mel_centers(&cfg);
    let nearest = (0..centers.len())
        .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
        .unwrap();
    assert!(peak.abs_diff(nearest) <= 1, "peak band {peak}, nearest center {nearest}");
}

fn correlated_frames(n: usize, d: usize, seed: u64) -> Vec<FeatureFrame> {
    let mut rng = CounterRng::new(seed);
    // A random mixing of independent sources with decaying variances.
    let mix: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
    (0..n)
        .map(|i| {
            let s: Vec<f64> = (0..d).map(|j| rng.normal() * 3.0 / (1.0 + j as f64)).collect();
            let v = (0..d)
                .map(|r| (1.0 + (0..d).map(|c| mix[r * d + c] * s[c]).sum::<f64>()) as f32)
                .collect();
            FeatureFrame::new(v, i).unwrap()
        })
        .collect()
}

#[test]
fn klt_is_orthonormal_and_decorrelates() {
    let d = 12;
    let frames = correlated_frames(4000, d, 1);
    let klt = fit_klt(&frames).unwrap();
    let b = klt.basis();
    for i in 0..d {
        for j in 0..d {
            let dot: f64 = b.row(i).iter().zip(b.row(j)).map(|(x, y)| *x as f64 * *y as f64).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-5, "rows {i},{j}: {dot}");
        }
    }
    let ev = klt.eigenvalues();
    assert!(ev.windows(2).all(|w| w[0] >= w[1]), "{ev:?}");

    // Sample covariance of the coefficients is diagonal with the eigenvalues.
    let y: Vec<Vec<f32>> = frames.iter().map(|f| klt.forward(&f.values)).collect();
    let n = y.len() as f64;
    for i in 0..d {
        for j in 0..d {
            let c: f64 = y.iter().map(|v| v[i] as f64 * v[j] as f64).sum::<f64>() / n;
            let scale = (ev[i] * ev[j]).sqrt();
            if i == j {
                assert!((c - ev[i]).abs() < 1e-3 * ev[0], "var {i}: {c} vs {}", ev[i]);
            } else {
                assert!(c.abs() < 1e-3 * scale.max(1e-9) + 1e-4, "cov {i},{j}: {c}");
            }
        }
    }
    for (f, c) in frames.iter().zip(&y).take(50) {
        let back = klt.inverse(c);
        for (a, b) in back.iter().zip(&f.values) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}

#[test]
fn kmeans_converges_to_a_lloyd_fixed_point() {
    let mut rng = CounterRng::new(5);
    let centers: Vec<Vec<f32>> = (0..6)
        .map(|_| (0..3).map(|_| rng.range(-50.0, 50.0) as f32).collect())
        .collect();
    let points: Vec<Vec<f32>> = (0..1200)
        .map(|i| centers[i % 6].iter().map(|&c| c + 0.1 * rng.normal() as f32).collect())
        .collect();
    let cb = kmeans(&points, 6, 50, 2).unwrap();
    // Every codeword is the mean of the points nearest to it.
    let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>();
    let mut sums = vec![[0.0f64; 3]; 6];
    let mut counts = [0usize; 6];
    for p in &points {
        let k = (0..6).min_by(|&a, &b| dist(cb.row(a), p).total_cmp(&dist(cb.row(b), p))).unwrap();
        counts[k] += 1;
        for (s, v) in sums[k].iter_mut().zip(p) {
            *s += *v as f64;
        }
    }
    for k in 0..6 {
        assert!(counts[k] > 0, "codeword {k} owns no points");
        for j in 0..3 {
            let mean = sums[k][j] / counts[k] as f64;
            assert!((cb.get(k, j) as f64 - mean).abs() < 1e-4);
        }
    }
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Expected share of white-noise energy in each tree-ordered band: the
/// energy of the equivalent filter `h_first(z) · h_second(z²)` over the
/// decimation factor.
fn band_energy_oracle(h0: &[f64]) -> Vec<f64> {
    let h1: Vec<f64> = h0.iter().enumerate().map(|(n, v)| if n % 2 == 0 { *v } else { -v }).collect();
    let up = |h: &[f64]| {
        let mut u = vec![0.0; 2 * h.len() - 1];
        for (i, v) in h.iter().enumerate() {
            u[2 * i] = *v;
        }
        u
    };
    let mut out = Vec::new();
    for first in [h0, &h1[..]] {
        for second in [h0, &h1[..]] {
            let eq = convolve(first, &up(second));
            out.push(eq.iter().map(|v| v * v).sum::<f64>() / 4.0);
        }
    }
    out
}

#[test]
fn white_noise_splits_evenly_across_bands() {
    let n = 1 << 18;
    let mut rng = CounterRng::new(9);
    let x: Vec<f32> = (0..n).map(|_| (0.3 * rng.normal()) as f32).collect();
    let input: f64 = x.iter().map(|v| (*v as f64).powi(2)).sum();
    for kind in [PrototypeKind::Johnston16B, PrototypeKind::LowRipple16] {
        let want = band_energy_oracle(&prototype(kind));
        let bands = analyze(&AudioBuffer::from_samples(x.clone()).unwrap(), &QmfCascade::with_kind(2, kind)).unwrap();
        for (b, w) in want.iter().enumerate() {
            assert!((w - 0.25).abs() < 0.01, "{kind:?} band {b} oracle share {w}");
            let e: f64 = (0..bands.steps()).map(|t| (bands.row(t)[b] as f64).powi(2)).sum();
            let share = e / input;
            assert!((share - w).abs() < 0.01, "{kind:?} band {b}: {share} vs {w}");
        }
    }
}

#[test]
fn mixture_log_likelihood_matches_closed_form() {
    let mut rng = CounterRng::new(13);
    for _ in 0..200 {
        let k = 1 + rng.below(8) as usize;
        let mut p = Vec::with_capacity(3 * k);
        p.extend((0..k).map(|_| rng.range(-3.0, 3.0) as f32));
        p.extend((0..k).map(|_| rng.range(-0.5, 0.5) as f32));
        p.extend((0..k).map(|_| rng.range(-5.0, -1.0) as f32));
        let x = rng.range(-1.0, 1.0) as f32;
        let params = MolParams::from_slice(&p);
        let z: f64 = p[..k].iter().map(|&l| (l as f64).exp()).sum();
        let density: f64 = (0..k)
            .map(|j| {
                let w = (p[j] as f64).exp() / z;
                let s = (p[2 * k + j] as f64).exp();
                let e = (-(x as f64 - p[k + j] as f64) / s).exp();
                w * e / (s * (1.0 + e).powi(2))
            })
            .sum();
        let got = mol_log_likelihood(&params, x, 1e-4);
        assert!((got - density.ln()).abs() < 1e-9 * density.ln().abs().max(1.0), "{got} vs {}", density.ln());
    }
}
