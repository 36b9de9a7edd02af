//! Command-line front door.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/config/input error,
//! 3 numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{fmt_count, preset, presets, ArchitectureConfig, Claim, Scale};
use crate::data::{generate, load_archive, save_archive, Dataset, SynthTaskConfig, Utterance, BACKGROUND};
use crate::error::Error;
use crate::features::{log_mel_fbank, normalize, read_wav, FrameSequence};
use crate::frontends::FrontendSpec;
use crate::gradcheck::{grad_check_model, probe_batch, GRAD_CHECK_EPS, GRAD_CHECK_TOL};
use crate::tdnn::{build_tdnn, ModelGrads};
use crate::training::{evaluate, train_with, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Percentage of utterances held out for validation.
pub const VALIDATION_PERCENT: u32 = 10;

#[derive(Debug, Parser)]
#[command(name = "tdnn-forge", version, about = "Deep-kernel sub-sampled TDNN toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a feature archive.
    Train(TrainArgs),
    /// Frame accuracy and cross-entropy of a checkpoint.
    Eval(EvalArgs),
    /// Exact parameter counts per module.
    ParamCount(ArchArgs),
    /// Finite-difference check of every parameter block.
    GradCheck(GradCheckArgs),
    /// Log-Mel features for a directory of WAV files.
    Features(FeaturesArgs),
    /// Names of the built-in architectures.
    ListPresets,
    /// Write the synthetic task as an archive.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    /// JSON architecture file.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in architecture name.
    #[arg(long)]
    pub preset: Option<String>,
    /// Size override.
    #[arg(long, value_enum)]
    pub scale: Option<Scale>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Feature archive; 10% of utterances are held out by id hash.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and history.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Stop once validation accuracy reaches this value.
    #[arg(long)]
    pub target_accuracy: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// JSON architecture file.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in architecture name; all presets when neither is given.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, value_enum, default_value = "tiny")]
    pub scale: Scale,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test fixture: perturbs one analytic gradient.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// Directory of 16-bit mono WAV files.
    #[arg(long)]
    pub data: PathBuf,
    /// Archive to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Lines of `utterance_id segment_id`; unlisted files form their own segment.
    #[arg(long)]
    pub segments: Option<PathBuf>,
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub utterances: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

/// A failed command: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: EXIT_USAGE, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

type CmdResult = std::result::Result<i32, Failure>;

/// Runs a parsed command, writing reports to `out`; returns the exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::ParamCount(a) => cmd_param_count(&a, out),
        Command::GradCheck(a) => cmd_grad_check(&a, out),
        Command::Features(a) => cmd_features(&a, out),
        Command::ListPresets => cmd_list_presets(out),
        Command::Synth(a) => cmd_synth(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Parses `argv` and runs it; clap's own errors map to exit 2.
pub fn main_with_args<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(argv) {
        Ok(cli) => run(cli, out),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

/// Resolved architecture and whether it came from a preset.
fn load_arch(config: &Option<PathBuf>, preset_name: &Option<String>) -> std::result::Result<(ArchitectureConfig, bool), Failure> {
    match (config, preset_name) {
        (Some(path), None) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let cfg = ArchitectureConfig::from_json(&text)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?;
            Ok((cfg, false))
        }
        (None, Some(name)) => match preset(name) {
            Some(p) => Ok((p.config, true)),
            None => Err(usage(format!("unknown preset {name:?}; try list-presets"))),
        },
        (None, None) => Err(usage("give --config or --preset")),
        (Some(_), Some(_)) => Err(usage("--config and --preset are mutually exclusive")),
    }
}

fn write_line(out: &mut dyn Write, line: &str) -> std::result::Result<(), Failure> {
    writeln!(out, "{line}").map_err(Failure::from)
}

fn cmd_list_presets(out: &mut dyn Write) -> CmdResult {
    for p in presets() {
        write_line(out, &format!("{:<28} {}", p.name, p.description))?;
    }
    Ok(EXIT_OK)
}

fn cmd_param_count(a: &ArchArgs, out: &mut dyn Write) -> CmdResult {
    let (mut cfg, _) = load_arch(&a.config, &a.preset)?;
    if let Some(s) = a.scale {
        cfg = cfg.scaled(s);
    }
    let spec = cfg.tdnn_spec();
    spec.validate()?;
    let p = a.preset.as_deref().and_then(preset);
    if let Some(p) = &p {
        write_line(out, &format!("preset {}: {}", p.name, p.description))?;
    }
    let solved = p.as_ref().is_some_and(|p| p.solved_width) && a.scale.is_none_or(|s| s == Scale::Paper);
    write_line(
        out,
        &format!(
            "width {}{}, outputs {}, depth {}",
            spec.width,
            if solved { " (solved for the 6.6M budget)" } else { "" },
            spec.out_dim,
            spec.layer_depth()
        ),
    )?;
    let fe = spec.frontend_param_count();
    write_line(out, &format!("{:<24} {:>12}", format!("frontend ({})", spec.frontend.kind_name()), fmt_count(fe)))?;
    if let FrontendSpec::BandedCnn(b) = &spec.frontend {
        write_line(out, &format!("{:<24} {:>12}", "  conv weights", fmt_count(b.weight_count())))?;
        write_line(out, &format!("{:<24} {:>12}", "  conv biases", fmt_count(b.bias_count())))?;
    }
    for (i, (k, n)) in spec.kernels.iter().zip(spec.kernel_param_counts()).enumerate() {
        write_line(out, &format!("{:<24} {:>12}", format!("kernel{} ({})", i + 1, k.name()), fmt_count(n)))?;
    }
    write_line(out, &format!("{:<24} {:>12}", "output", fmt_count(spec.output_param_count())))?;
    let total = spec.param_count();
    write_line(out, &format!("{:<24} {:>12}", "total", fmt_count(total)))?;
    if let (Some(p), None | Some(Scale::Paper)) = (&p, a.scale) {
        if let Some(claim) = p.claim {
            let line = match claim {
                Claim::TotalParams(n) => {
                    let dev = (total as f64 - n as f64) / n as f64 * 100.0;
                    format!(
                        "quoted: {}; computed {} ({dev:+.2}%, {} the ±2% band)",
                        claim.describe(),
                        fmt_count(total),
                        if dev.abs() <= 2.0 { "within" } else { "outside" }
                    )
                }
                Claim::ConvWeights(n) => {
                    let w = match &spec.frontend {
                        FrontendSpec::BandedCnn(b) => b.weight_count(),
                        _ => 0,
                    };
                    format!(
                        "quoted: {}; computed {} ({})",
                        claim.describe(),
                        fmt_count(w),
                        if w == n { "exact" } else { "differs" }
                    )
                }
                Claim::FrontendParams(n) => format!(
                    "quoted: {}; computed {} (ratio {:.2}; layout: per direction 5 frequency-dependent copies of W_F, V_F, b_F plus one Linear-RNN, directions untied)",
                    claim.describe(),
                    fmt_count(fe),
                    fe as f64 / n as f64
                ),
            };
            write_line(out, &line)?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_grad_check(a: &GradCheckArgs, out: &mut dyn Write) -> CmdResult {
    let targets: Vec<(String, ArchitectureConfig)> = match (&a.config, &a.preset) {
        (None, None) => presets().into_iter().map(|p| (p.name.to_string(), p.config)).collect(),
        _ => {
            let (cfg, _) = load_arch(&a.config, &a.preset)?;
            let name = a.preset.clone().unwrap_or_else(|| "config".into());
            vec![(name, cfg)]
        }
    };
    let tamper = |g: &mut ModelGrads| {
        g.output.weight.data_mut()[0] += 1.0;
    };
    let mut all_ok = true;
    for (name, cfg) in targets {
        let cfg = cfg.scaled(a.scale);
        let model = build_tdnn(&cfg.tdnn_spec(), a.seed)?;
        let (windows, labels) = probe_batch(&model, 2, a.seed.wrapping_add(1));
        let report = grad_check_model(
            &model,
            &windows,
            &labels,
            GRAD_CHECK_EPS,
            if a.corrupt_backward { Some(&tamper) } else { None },
        )?;
        let ok = report.passed(GRAD_CHECK_TOL);
        all_ok &= ok;
        write_line(
            out,
            &format!(
                "{name}: {} max rel err {:.3e} over {} blocks",
                if ok { "PASS" } else { "FAIL" },
                report.max_rel_err(),
                report.blocks.len()
            ),
        )?;
        for b in &report.blocks {
            let flag = if b.rel_err < GRAD_CHECK_TOL { "ok" } else { "FAIL" };
            write_line(out, &format!("  {:<32} {:>6} {:.3e} {flag}", b.name, b.scalars, b.rel_err))?;
        }
    }
    Ok(if all_ok { EXIT_OK } else { EXIT_CHECK })
}

fn history_line(r: &crate::training::EpochRecord) -> String {
    serde_json::to_string(r).expect("record serializes")
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let (mut cfg, from_preset) = load_arch(&a.arch.config, &a.arch.preset)?;
    if let Some(s) = a.arch.scale {
        cfg = cfg.scaled(s);
    }
    let data = load_archive(&a.data).map_err(|e| usage(format!("{}: {e}", a.data.display())))?;
    if data.is_empty() {
        return Err(usage(format!("{} holds no utterances", a.data.display())));
    }
    if from_preset {
        cfg.output.n_classes = data.n_labels();
    }
    if let Some(seed) = a.seed {
        cfg.training.seed = seed;
    }
    if let Some(n) = a.max_epochs {
        cfg.training.max_epochs = n;
    }
    if let Some(lr) = a.lr {
        cfg.training.initial_lr = lr;
    }
    if let Some(t) = a.target_accuracy {
        cfg.training.target_accuracy = Some(t);
    }
    cfg.validate()?;
    if data.n_labels() > cfg.output.n_classes {
        return Err(usage(format!(
            "data has labels up to {} but the model has {} outputs",
            data.n_labels() - 1,
            cfg.output.n_classes
        )));
    }
    let (train_ds, val_ds) = data.split(VALIDATION_PERCENT)?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(usage("need utterances on both sides of the train/validation split"));
    }
    fs::create_dir_all(&a.out)?;
    let (mut model, mut state) = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            ck.check_resume(&cfg)?;
            (ck.model()?, ck.state)
        }
        None => (build_tdnn(&cfg.tdnn_spec(), cfg.training.seed)?, TrainState::new(&cfg.training)),
    };
    fs::write(a.out.join("config.json"), cfg.to_json())?;
    let history_path = a.out.join("history.jsonl");
    let mut history = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&history_path)?;
    let mut best_val = state.scheduler.best.unwrap_or(f64::INFINITY);
    let best_path = a.out.join("best.ckpt");
    let last_path = a.out.join("last.ckpt");
    let result = train_with(&mut model, &train_ds, &val_ds, &cfg.training, a.threads, &mut state, |m, rec, st| {
        let line = history_line(rec);
        writeln!(out, "{line}")?;
        writeln!(history, "{line}")?;
        let ck = Checkpoint::capture(&cfg, m, st);
        save_checkpoint(&last_path, &ck)?;
        if rec.val_loss < best_val {
            best_val = rec.val_loss;
            save_checkpoint(&best_path, &ck)?;
        }
        Ok(())
    });
    result?;
    if !best_path.exists() {
        save_checkpoint(&best_path, &Checkpoint::capture(&cfg, &model, &state))?;
    }
    Ok(EXIT_OK)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint).map_err(|e| usage(format!("{}: {e}", a.checkpoint.display())))?;
    let model = ck.model()?;
    let data = load_archive(&a.data).map_err(|e| usage(format!("{}: {e}", a.data.display())))?;
    let r = evaluate(&model, &data, a.threads)?;
    write_line(out, &format!("frames {}", r.frames))?;
    write_line(out, &format!("accuracy {:.6}", r.accuracy))?;
    write_line(out, &format!("cross_entropy {:.6}", r.mean_loss))?;
    Ok(EXIT_OK)
}

fn read_segment_map(path: &Path) -> std::result::Result<Vec<(String, String)>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut map = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(u), Some(s), None) => map.push((u.to_string(), s.to_string())),
            _ => return Err(usage(format!("{}:{}: expected `utterance_id segment_id`", path.display(), i + 1))),
        }
    }
    Ok(map)
}

fn cmd_features(a: &FeaturesArgs, out: &mut dyn Write) -> CmdResult {
    let fbank = match (&a.config, &a.preset) {
        (None, None) => Default::default(),
        _ => load_arch(&a.config, &a.preset)?.0.features,
    };
    let segments = match &a.segments {
        Some(p) => read_segment_map(p)?,
        None => Vec::new(),
    };
    let mut wavs: Vec<PathBuf> = fs::read_dir(&a.data)
        .map_err(|e| usage(format!("{}: {e}", a.data.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(usage(format!("no .wav files in {}", a.data.display())));
    }
    let mut seqs = Vec::new();
    for path in &wavs {
        let utt = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let seg = segments
            .iter()
            .find(|(u, _)| *u == utt)
            .map(|(_, s)| s.clone())
            .unwrap_or_else(|| utt.clone());
        let extracted = read_wav(path).and_then(|(pcm, rate)| {
            let frames = log_mel_fbank(&pcm, rate, &fbank)?;
            let mut s = FrameSequence::new(frames, utt.clone(), seg)?;
            s.sample_rate_src = rate;
            Ok(s)
        });
        match extracted {
            Ok(s) => seqs.push(s),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if seqs.is_empty() {
        return Err(usage("no WAV file could be processed"));
    }
    let (normed, report) = normalize(&seqs)?;
    for (seg, d) in &report.floored {
        log::warn!("segment {seg}: dimension {d} has zero variance; floored");
    }
    let utts = normed
        .into_iter()
        .map(|seq| {
            let labels = vec![BACKGROUND; seq.n_frames()];
            Utterance { seq, labels }
        })
        .collect();
    let ds = Dataset::new(utts)?;
    save_archive(&ds, &a.out)?;
    write_line(
        out,
        &format!("wrote {} utterances, {} frames to {}", ds.len(), ds.n_frames(), a.out.display()),
    )?;
    Ok(EXIT_OK)
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> CmdResult {
    let mut cfg = SynthTaskConfig::default();
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.classes {
        cfg.n_classes = v;
    }
    if let Some(v) = a.utterances {
        cfg.n_utterances = v;
    }
    if let Some(v) = a.frames {
        cfg.frames_per_utterance = v;
    }
    if let Some(v) = a.noise {
        cfg.noise_std = v;
    }
    let ds = generate(&cfg)?;
    save_archive(&ds, &a.out)?;
    write_line(
        out,
        &format!(
            "wrote {} utterances, {} frames, {} classes plus background to {}",
            ds.len(),
            ds.n_frames(),
            cfg.n_classes,
            a.out.display()
        ),
    )?;
    Ok(EXIT_OK)
}
