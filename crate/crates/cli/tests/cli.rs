use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use nvc_core::audio::{read_wav, write_wav};
use nvc_core::pipeline::synthetic_utterance;
use nvc_core::AudioBuffer;

fn nvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvc"))
        .args(args)
        .output()
        .expect("spawn nvc")
}

fn ok(args: &[&str]) -> String {
    let out = nvc(args);
    assert!(
        out.status.success(),
        "nvc {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn field<'a>(porcelain: &'a str, key: &str) -> &'a str {
    porcelain
        .lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
        .unwrap_or_else(|| panic!("no `{key}` in {porcelain}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One small weight file shared by every test in this binary.
fn weights() -> &'static Path {
    static DIR: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    let (_, p) = DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("small.nvw");
        ok(&["init-weights", s(&p), "--small", "--seed", "3"]);
        (dir, p)
    });
    p
}

fn wav(dir: &Path, name: &str, audio: &AudioBuffer) -> PathBuf {
    let p = dir.join(name);
    write_wav(&p, audio).unwrap();
    p
}

#[test]
fn encode_one_second_gives_375_payload_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let input = wav(dir.path(), "in.wav", &synthetic_utterance(1.0, 1));
    let bs = dir.path().join("a.nvc");
    let out = ok(&["--porcelain", "encode", s(&input), s(&bs), "--weights", s(weights())]);
    assert_eq!(field(&out, "frames"), "25");
    assert_eq!(field(&out, "bitrate_bps"), "3000");
    let bytes = std::fs::read(&bs).unwrap();
    assert_eq!(bytes.len(), 13 + 375);
    assert_eq!(&bytes[..4], b"NVC1");

    let again = dir.path().join("b.nvc");
    ok(&["encode", s(&input), s(&again), "--weights", s(weights())]);
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
}

#[test]
fn decode_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let input = wav(dir.path(), "in.wav", &synthetic_utterance(1.0, 2));
    let bs = dir.path().join("a.nvc");
    ok(&["encode", s(&input), s(&bs), "--weights", s(weights())]);
    let decode = |name: &str, seed: &str| {
        let p = dir.path().join(name);
        ok(&["decode", s(&bs), s(&p), "--weights", s(weights()), "--seed", seed]);
        std::fs::read(p).unwrap()
    };
    let a = decode("a.wav", "5");
    let b = decode("b.wav", "5");
    let c = decode("c.wav", "6");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(read_wav(dir.path().join("a.wav")).unwrap().len(), 16000);
}

#[test]
fn truncated_bitstream_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let input = wav(dir.path(), "in.wav", &synthetic_utterance(0.5, 3));
    let bs = dir.path().join("a.nvc");
    ok(&["encode", s(&input), s(&bs), "--weights", s(weights())]);
    let bytes = std::fs::read(&bs).unwrap();
    std::fs::write(&bs, &bytes[..bytes.len() - 3]).unwrap();
    let out = nvc(&["decode", s(&bs), s(&dir.path().join("o.wav")), "--weights", s(weights())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bitstream"));
}

#[test]
fn roundtrip_rounds_up_to_whole_frames_and_logs_bitrate() {
    let dir = tempfile::tempdir().unwrap();
    let input = wav(dir.path(), "in.wav", &synthetic_utterance(0.7, 4));
    let o = dir.path().join("o.wav");
    for regime in ["c2c", "n2n", "dn2n", "dc2c"] {
        let out = ok(&[
            "--porcelain", "roundtrip", s(&input), s(&o), "--weights", s(weights()),
            "--regime", regime,
        ]);
        assert_eq!(field(&out, "bitrate"), "3000");
        assert_eq!(field(&out, "regime"), regime);
        // 0.7 s = 11200 samples -> 18 frames.
        assert_eq!(read_wav(&o).unwrap().len(), 18 * 640);
    }
}

#[test]
fn denoised_regime_without_tasnet_tensors_fails() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("nodenoise.nvw");
    ok(&["init-weights", s(&w), "--small", "--no-denoiser"]);
    let input = wav(dir.path(), "in.wav", &synthetic_utterance(0.3, 5));
    let o = dir.path().join("o.wav");
    let out = nvc(&["roundtrip", s(&input), s(&o), "--weights", s(&w), "--regime", "dn2n"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tasnet."));
    let out = nvc(&["denoise", s(&input), s(&o), "--weights", s(&w)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tasnet."));
}

#[test]
fn denoise_keeps_length() {
    let dir = tempfile::tempdir().unwrap();
    let input = wav(dir.path(), "in.wav", &synthetic_utterance(0.41, 6));
    let o = dir.path().join("o.wav");
    ok(&["denoise", s(&input), s(&o), "--weights", s(weights())]);
    assert_eq!(read_wav(&o).unwrap().len(), 6560);
}

#[test]
fn mix_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let clean = wav(dir.path(), "clean.wav", &synthetic_utterance(1.0, 7));
    let noise = wav(dir.path(), "noise.wav", &synthetic_utterance(0.3, 8));
    let mixed = dir.path().join("mix.wav");
    let out = ok(&[
        "--porcelain", "mix", s(&clean), s(&noise), s(&mixed), "--snr-db", "10", "--seed", "2",
    ]);
    let measured: f64 = field(&out, "measured_snr_db").parse().unwrap();
    assert!((measured - 10.0).abs() < 1e-6);

    let out = ok(&["--porcelain", "metrics", s(&clean), s(&clean)]);
    assert_eq!(field(&out, "si_snr_db"), "100.0000");
    let out = ok(&["--porcelain", "metrics", s(&clean), s(&clean), "--noisy", s(&mixed)]);
    let snri: f64 = field(&out, "si_snri_db").parse().unwrap();
    assert!(snri > 80.0, "{snri}");
}

#[test]
fn inspect_reports_sparsity() {
    let out = ok(&["--porcelain", "inspect", s(weights())]);
    let line = |name: &str| {
        out.lines()
            .find(|l| l.starts_with(&format!("tensor={name} ")))
            .unwrap_or_else(|| panic!("{name} missing"))
            .to_string()
    };
    assert!(line("gru.ur").contains("sparsity=93.75%"));
    assert!(line("gru.ur").contains("storage=blockdiag16"));
    assert!(line("gru.br").contains("sparsity=0.00%"));
    assert!(out.contains("meta.vq.layout="));

    let missing = nvc(&["inspect", "/nonexistent/x.nvw"]);
    assert!(!missing.status.success());
}

#[test]
fn pairs_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let clean = wav(dir.path(), "clean.wav", &synthetic_utterance(0.5, 9));
    let noise = wav(dir.path(), "noise.wav", &synthetic_utterance(0.2, 10));
    let manifest = dir.path().join("m.tsv");
    std::fs::write(
        &manifest,
        format!(
            "# clean\tnoise\tsnr_db\tregime\tseed\n{c}\t{n}\t5\tn2c\t1\n{c}\t{n}\t12\tdn2n\t2\n",
            c = s(&clean),
            n = s(&noise)
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("pairs");
    let no_weights = nvc(&["pairs", s(&manifest), s(&out_dir)]);
    assert!(!no_weights.status.success());

    ok(&["pairs", s(&manifest), s(&out_dir), "--weights", s(weights())]);
    let target = read_wav(out_dir.join("00000_target.wav")).unwrap();
    assert_eq!(target, read_wav(&clean).unwrap());
    assert!(out_dir.join("00001_cond.wav").exists());
}

#[test]
fn wrong_sample_rate_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = AudioBuffer::new(vec![0.1; 800], 8000).unwrap();
    let p = dir.path().join("8k.wav");
    write_wav(&p, &a).unwrap();
    let out = nvc(&["encode", s(&p), s(&dir.path().join("x.nvc")), "--weights", s(weights())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("8000"));
}
