use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use tdnn_forge::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use tdnn_forge::config::{preset, Scale};
use tdnn_forge::data::{generate, load_archive, save_archive, Dataset, SynthTaskConfig, Utterance};
use tdnn_forge::features::{log_mel_fbank, FbankConfig, FrameSequence};
use tdnn_forge::numerics::Tensor;
use tdnn_forge::tdnn::build_tdnn;
use tdnn_forge::training::TrainState;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tdnn-forge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_synth(dir: &Path) -> PathBuf {
    let cfg = SynthTaskConfig { n_utterances: 20, frames_per_utterance: 200, seed: 3, ..Default::default() };
    let path = dir.join("small.tdnf");
    save_archive(&generate(&cfg).unwrap(), &path).unwrap();
    path
}

#[test]
fn list_presets_and_param_count() {
    let o = run(&["list-presets"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 11);

    let o = run(&["param-count", "--preset", "resnet-tdnn"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("6,612,000"));

    let o = run(&["param-count", "--preset", "cnn-frontend"]);
    let out = stdout(&o);
    assert!(out.contains("17,500") && out.contains("700"), "{out}");

    let o = run(&["param-count", "--preset", "double-tdnn"]);
    assert!(stdout(&o).contains("solved for the 6.6M budget"));
}

#[test]
fn schema_errors_exit_2_and_name_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    let mut good = preset("tdnn-baseline").unwrap().config.scaled(Scale::Tiny).to_json();
    good = good.replacen("\"width\"", "\"widht\"", 1);
    std::fs::write(&cfg, good).unwrap();
    let o = run(&["param-count", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("widht") && err.contains("line"), "{err}");

    std::fs::write(&cfg, "{\"tdnn\": [").unwrap();
    assert_eq!(run(&["param-count", "--config", p(&cfg)]).status.code(), Some(2));
    assert_eq!(run(&["param-count", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(run(&["train"]).status.code(), Some(2));
}

#[test]
fn config_file_train_and_eval() {
    let dir = TempDir::new().unwrap();
    let data = small_synth(dir.path());
    let mut cfg = preset("tdnn-baseline").unwrap().config.scaled(Scale::Desk);
    cfg.training.max_epochs = 1;
    let cfg_path = dir.path().join("arch.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--config", p(&cfg_path), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let history = std::fs::read_to_string(out.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1);
    assert_eq!(stdout(&o).trim(), history.trim());
    for f in ["best.ckpt", "last.ckpt", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let ckpt = out.join("best.ckpt");
    let a = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]);
    let b = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let report = stdout(&a);
    assert!(report.starts_with("frames 4000\naccuracy "), "{report}");
}

#[test]
fn numeric_divergence_exits_3() {
    let dir = TempDir::new().unwrap();
    let data = small_synth(dir.path());
    let o = run(&[
        "train", "--preset", "tdnn-baseline", "--scale", "desk", "--data", p(&data), "--out",
        p(&dir.path().join("run")), "--lr", "1e300",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("epoch 1") && err.contains("batch") && err.contains("lr 1e300"), "{err}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let data = small_synth(dir.path());
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--preset", "resnet-tdnn", "--scale", "desk", "--data", p(&data), "--out", p(out)];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        o
    };
    let whole = dir.path().join("whole");
    let split = dir.path().join("split");
    train(&whole, &["--max-epochs", "4"]);
    train(&split, &["--max-epochs", "2"]);
    let resumed_from = dir.path().join("half.ckpt");
    std::fs::copy(split.join("last.ckpt"), &resumed_from).unwrap();
    train(&split, &["--max-epochs", "4", "--resume", p(&resumed_from)]);

    let a = load_checkpoint(&whole.join("last.ckpt")).unwrap();
    let b = load_checkpoint(&split.join("last.ckpt")).unwrap();
    assert_eq!(a.tensors, b.tensors);
    assert_eq!(a.state, b.state);
    assert_eq!(a.state.epoch, 4);
    let epochs: Vec<String> = std::fs::read_to_string(split.join("history.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].to_string())
        .collect();
    assert_eq!(epochs, ["1", "2", "3", "4"]);
}

#[test]
fn resume_refuses_other_architecture() {
    let dir = TempDir::new().unwrap();
    let data = small_synth(dir.path());
    let cfg = preset("resnet-tdnn").unwrap().config.scaled(Scale::Desk);
    let mut cfg9 = cfg.clone();
    cfg9.output.n_classes = 9;
    let m = build_tdnn(&cfg9.tdnn_spec(), 0).unwrap();
    let ck = dir.path().join("other.ckpt");
    save_checkpoint(&ck, &Checkpoint::capture(&cfg9, &m, &TrainState::new(&cfg9.training))).unwrap();
    let o = run(&[
        "train", "--preset", "tdnn-baseline", "--scale", "desk", "--data", p(&data), "--out",
        p(&dir.path().join("run")), "--resume", p(&ck),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("digest"), "{}", stderr(&o));
}

#[test]
fn untrained_model_is_at_chance() {
    let dir = TempDir::new().unwrap();
    let classes = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let utts = (0..10)
        .map(|u| {
            let t = 300;
            let frames = Tensor::uniform(&[t, 40], 1.0, &mut rng);
            let labels = (0..t).map(|_| rng.random_range(0..classes as u32)).collect();
            Utterance { seq: FrameSequence::new(frames, format!("u{u}"), "s").unwrap(), labels }
        })
        .collect();
    let data = dir.path().join("uniform.tdnf");
    save_archive(&Dataset::new(utts).unwrap(), &data).unwrap();

    let mut cfg = preset("tdnn-baseline").unwrap().config.scaled(Scale::Desk);
    cfg.output.n_classes = classes;
    let ck = dir.path().join("init.ckpt");
    let m = build_tdnn(&cfg.tdnn_spec(), 5).unwrap();
    save_checkpoint(&ck, &Checkpoint::capture(&cfg, &m, &TrainState::new(&cfg.training))).unwrap();
    let o = run(&["eval", "--checkpoint", p(&ck), "--data", p(&data)]);
    assert_eq!(o.status.code(), Some(0));
    let acc: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("accuracy "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((acc - 1.0 / classes as f64).abs() < 0.1, "accuracy {acc}");

    cfg.output.n_classes = 3;
    let small = build_tdnn(&cfg.tdnn_spec(), 5).unwrap();
    save_checkpoint(&ck, &Checkpoint::capture(&cfg, &small, &TrainState::new(&cfg.training))).unwrap();
    let o = run(&["eval", "--checkpoint", p(&ck), "--data", p(&data)]);
    assert_eq!(o.status.code(), Some(2), "labels beyond the output layer");
}

#[test]
fn converged_model_evaluates_above_95_percent() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("synth.tdnf");
    let o = run(&["synth", "--out", p(&data)]);
    assert_eq!(o.status.code(), Some(0));
    let out = dir.path().join("run");
    let o = run(&[
        "train", "--preset", "resnet-tdnn", "--scale", "desk", "--data", p(&data), "--out", p(&out),
        "--target-accuracy", "0.96",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(&["eval", "--checkpoint", p(&out.join("last.ckpt")), "--data", p(&data)]);
    let acc: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("accuracy "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn grad_check_covers_blocks_and_fails_on_corruption() {
    let o = run(&["grad-check", "--preset", "cnn-tdnn"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    for block in ["frontend.filters", "frontend.bias", "kernel1.layer0.weight", "kernel4.layer0.bias", "output.weight"] {
        assert!(out.contains(block), "{block} missing from\n{out}");
    }
    let o = run(&["grad-check", "--preset", "cnn-tdnn", "--corrupt-backward"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("output.weight") && stdout(&o).contains("FAIL"));
}

fn write_wav(path: &Path, samples: &[i16], rate: u32) {
    let spec = hound::WavSpec { channels: 1, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in samples {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
}

fn tone(freq: f64, amp: f64, n: usize, rate: u32, rng: &mut ChaCha8Rng) -> Vec<i16> {
    (0..n)
        .map(|i| {
            let v = amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() + rng.random_range(-200.0..200.0);
            v.round() as i16
        })
        .collect()
}

#[test]
fn features_shared_segment_variance() {
    let dir = TempDir::new().unwrap();
    let wavs = dir.path().join("wavs");
    std::fs::create_dir(&wavs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rate = 16_000;
    write_wav(&wavs.join("a.wav"), &tone(440.0, 8000.0, 8000, rate, &mut rng), rate);
    write_wav(&wavs.join("b.wav"), &tone(1500.0, 3000.0, 12000, rate, &mut rng), rate);
    write_wav(&wavs.join("c.wav"), &tone(300.0, 5000.0, 6000, rate, &mut rng), rate);
    std::fs::write(wavs.join("broken.wav"), b"RIFF nonsense").unwrap();
    let segs = dir.path().join("segments.txt");
    std::fs::write(&segs, "a show1\nb show1\nc show2\n").unwrap();
    let archive = dir.path().join("feats.tdnf");
    let o = bin()
        .args(["features", "--data", p(&wavs), "--out", p(&archive), "--segments", p(&segs)])
        .env("TDNN_FORGE_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("broken.wav"), "{}", stderr(&o));

    let ds = load_archive(&archive).unwrap();
    assert_eq!(ds.len(), 3);
    assert!(ds.utterances().iter().all(|u| u.labels.iter().all(|&l| l == 0)));

    // recompute from the raw features
    let raw: Vec<Tensor> = ["a", "b"]
        .iter()
        .map(|n| {
            let mut r = hound::WavReader::open(wavs.join(format!("{n}.wav"))).unwrap();
            let pcm: Vec<f64> = r.samples::<i16>().map(|s| s.unwrap() as f64 / 32768.0).collect();
            log_mel_fbank(&pcm, rate, &FbankConfig::default()).unwrap()
        })
        .collect();
    let centered: Vec<Vec<Vec<f64>>> = raw
        .iter()
        .map(|t| {
            let n = t.rows() as f64;
            let mean: Vec<f64> = (0..40).map(|d| (0..t.rows()).map(|r| t.row(r)[d]).sum::<f64>() / n).collect();
            (0..t.rows()).map(|r| t.row(r).iter().zip(&mean).map(|(v, m)| v - m).collect()).collect()
        })
        .collect();
    let all: Vec<&Vec<f64>> = centered.iter().flatten().collect();
    let std: Vec<f64> = (0..40)
        .map(|d| (all.iter().map(|r| r[d] * r[d]).sum::<f64>() / all.len() as f64).sqrt())
        .collect();
    for (u, utt) in centered.iter().enumerate() {
        let got = &ds.utterances()[u].seq;
        assert_eq!(got.segment_id, "show1");
        for (r, row) in utt.iter().enumerate() {
            for d in 0..40 {
                let expect = row[d] / std[d];
                let diff = (got.frames.row(r)[d] - expect).abs();
                assert!(diff <= 1e-6 * expect.abs().max(1.0), "utt {u} frame {r} dim {d}: {diff:e}");
            }
        }
    }
    assert_eq!(ds.utterances()[2].seq.segment_id, "show2");
}

#[test]
fn features_silence_and_total_failure() {
    let dir = TempDir::new().unwrap();
    let wavs = dir.path().join("wavs");
    std::fs::create_dir(&wavs).unwrap();
    write_wav(&wavs.join("quiet.wav"), &vec![0i16; 4000], 16_000);
    let archive = dir.path().join("quiet.tdnf");
    let o = run(&["features", "--data", p(&wavs), "--out", p(&archive)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ds = load_archive(&archive).unwrap();
    let frames = ds.utterances()[0].seq.frames.data();
    assert!(frames.iter().all(|&v| v == frames[0]));

    std::fs::remove_file(wavs.join("quiet.wav")).unwrap();
    std::fs::write(wavs.join("bad.wav"), b"not audio").unwrap();
    let o = run(&["features", "--data", p(&wavs), "--out", p(&dir.path().join("none.tdnf"))]);
    assert_eq!(o.status.code(), Some(2));
}
