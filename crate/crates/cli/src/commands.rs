//! Subcommand implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use avasd::dsp::MfccExtractor;
use avasd::io::checkpoint::{load_checkpoint, save_checkpoint};
use avasd::io::dataset::{save_raw, AudioFrontEnd, Dataset, Normalization};
use avasd::io::manifest::Split;
use avasd::io::synth::gen_synthetic;
use avasd::io::{blob, wav};
use avasd::model::{AsdModel, Variant};
use avasd::train::{benchmark_inference, evaluate, train, AudioSource, EpochRecord, EvalReport, LatencyStats};
use serde::Serialize;

use crate::config::{apply, FileConfig, ModelChoice, Preset};
use crate::{AblateArgs, BenchArgs, Cli, Command, EvalArgs, ExtractMfccArgs, GenSynthArgs, OptimArgs, SplitArg, TrainArgs, UsageError};

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenSynth(a) => gen_synth(file, a),
        Command::ExtractMfcc(a) => extract_mfcc(file, a),
        Command::Train(a) => train_cmd(file, a),
        Command::Eval(a) => eval_cmd(file, a),
        Command::Bench(a) => bench_cmd(file, a),
        Command::Ablate(a) => ablate(file, a),
    }
}

/// Rejects an invalid resolved config as a usage error.
fn checked(r: avasd::Result<()>) -> anyhow::Result<()> {
    r.map_err(|e| UsageError(e.to_string()).into())
}

/// Worker threads for evaluation: the machine's parallelism, capped by
/// `AVASD_THREADS` when set.
fn threads() -> anyhow::Result<usize> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("AVASD_THREADS") {
        Ok(v) => {
            let cap: usize = v
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| UsageError(format!("AVASD_THREADS={v:?} is not a positive integer")))?;
            Ok(available.min(cap))
        }
        Err(_) => Ok(available),
    }
}

/// Prints the resolved settings as TOML on stderr.
fn print_resolved(command: &str, seed: u64, value: &impl Serialize) -> anyhow::Result<()> {
    let body = toml::to_string(value).context("serializing resolved config")?;
    eprintln!("# avasd {command}: resolved config\nseed = {seed}\n{body}");
    Ok(())
}

fn apply_optim(cfg: &mut avasd::train::TrainConfig, o: &OptimArgs) {
    apply(&mut cfg.lr, o.lr);
    apply(&mut cfg.momentum, o.momentum);
    apply(&mut cfg.patience, o.patience);
    apply(&mut cfg.batch_size, o.batch);
    apply(&mut cfg.max_epochs, o.max_epochs);
    apply(&mut cfg.seed, o.seed);
}

fn gen_synth(file: FileConfig, a: GenSynthArgs) -> anyhow::Result<()> {
    let mut cfg = file.synth;
    apply(&mut cfg.n_sequences, a.n);
    apply(&mut cfg.seq_len, a.seq_len);
    apply(&mut cfg.confuser_fraction, a.confusers);
    apply(&mut cfg.snr_db, a.snr_db);
    apply(&mut cfg.seed, a.seed);
    checked(cfg.validate())?;
    print_resolved("gen-synth", cfg.seed, &Resolved { synth: &cfg })?;
    let raw = gen_synthetic(&cfg)?;
    let records = save_raw(&a.out, &cfg, &raw)?;
    let steps: usize = records.iter().map(|r| r.labels.len()).sum();
    let pos: usize = records.iter().map(|r| r.labels.iter().filter(|&&l| l == 1).count()).sum();
    let val = records.iter().filter(|r| r.split == Split::Val).count();
    emit(&format!(
        "wrote {} sequences ({} train, {val} val) to {}; positive steps {:.4}\n",
        records.len(),
        records.len() - val,
        a.out.display(),
        pos as f64 / steps as f64
    ))?;
    Ok(())
}

#[derive(Serialize)]
struct Resolved<T: Serialize> {
    synth: T,
}

fn extract_mfcc(file: FileConfig, a: ExtractMfccArgs) -> anyhow::Result<()> {
    let w = wav::read_wav(&a.wav)?;
    let mut cfg = file.mfcc;
    apply(&mut cfg.n_mels, a.n_mels);
    apply(&mut cfg.n_fft, a.n_fft);
    cfg.sample_rate_hz = w.sample_rate;
    cfg.fmax_hz = cfg.fmax_hz.min(f64::from(w.sample_rate) / 2.0);
    checked(cfg.validate())?;
    #[derive(Serialize)]
    struct R<'a> {
        mfcc: &'a avasd::dsp::MfccConfig,
    }
    print_resolved("extract-mfcc", 0, &R { mfcc: &cfg })?;
    let m = MfccExtractor::new(&cfg)?.mfcc(&w.samples)?;
    blob::save(&a.out, &m)?;
    emit(&format!("wrote MFCC {:?} to {}\n", m.shape(), a.out.display()))?;
    Ok(())
}

fn load_data(file: &FileConfig, dir: &Path) -> anyhow::Result<Dataset> {
    checked(file.mfcc.validate())?;
    Dataset::load(dir, &file.mfcc, file.synth.step_seconds).with_context(|| format!("loading dataset {}", dir.display()))
}

fn resolve_model(file: &FileConfig, a: &crate::ModelArgs) -> anyhow::Result<ModelChoice> {
    let mut m = file.model.clone();
    apply(&mut m.variant, a.variant);
    apply(&mut m.bigru_layers, a.bigru_layers.map(usize::from));
    apply(&mut m.preset, a.preset);
    if !(1..=2).contains(&m.bigru_layers) {
        return Err(UsageError(format!("bigru_layers {} must be 1 or 2", m.bigru_layers)).into());
    }
    Ok(m)
}

fn log_epoch(tag: &str) -> impl FnMut(&EpochRecord) + '_ {
    move |r| {
        eprintln!(
            "{tag}epoch {:>3}  loss {:.4} (av {:.4} a {:.4} v {:.4})  val auc av {:.4} a {:.4} v {:.4}{}  {:.1}s",
            r.epoch,
            r.loss_total,
            r.loss_av,
            r.loss_a,
            r.loss_v,
            r.val_auc_av,
            r.val_auc_a,
            r.val_auc_v,
            if r.improved { " *" } else { "" },
            r.seconds
        )
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize)]
struct History<'a> {
    best_epoch: usize,
    stopped_early: bool,
    epoch: &'a [EpochRecord],
}

/// Trains one model; returns it with its normalization.
fn fit(
    data: &Dataset,
    choice: &ModelChoice,
    cfg: &avasd::train::TrainConfig,
    out: &Path,
    tag: &str,
) -> anyhow::Result<(AsdModel, Normalization)> {
    let mut mcfg = choice.config();
    mcfg.seq_len = data.layout.steps;
    mcfg.frames = data.layout.frames;
    mcfg.image_size = data.layout.image_size;
    mcfg.mfcc_coeffs = data.n_ceps;
    checked(mcfg.validate())?;
    let norm = data.fit_normalization()?;
    let model = AsdModel::new(mcfg, cfg.seed)?;
    eprintln!("{tag}{} parameters", model.num_parameters());
    let outcome = train(model, data, &norm, cfg, log_epoch(tag))?;
    save_checkpoint(out, &outcome.model, Some(&norm))?;
    let history = History {
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
        epoch: &outcome.history,
    };
    let text = toml::to_string(&history).context("serializing history")?;
    let hist_path = with_suffix(out, ".history.toml");
    std::fs::write(&hist_path, text).with_context(|| format!("writing {}", hist_path.display()))?;
    Ok((outcome.model, norm))
}

fn train_cmd(file: FileConfig, a: TrainArgs) -> anyhow::Result<()> {
    let choice = resolve_model(&file, &a.model)?;
    let mut cfg = file.train.clone();
    apply_optim(&mut cfg, &a.optim);
    cfg.eval_threads = threads()?;
    checked(cfg.validate())?;
    #[derive(Serialize)]
    struct R<'a> {
        model: &'a ModelChoice,
        train: &'a avasd::train::TrainConfig,
        mfcc: &'a avasd::dsp::MfccConfig,
    }
    print_resolved("train", cfg.seed, &R { model: &choice, train: &cfg, mfcc: &file.mfcc })?;
    let data = load_data(&file, &a.data)?;
    fit(&data, &choice, &cfg, &a.out, "")?;
    emit(&format!("wrote checkpoint {}\n", a.out.display()))?;
    Ok(())
}

fn split_indices(data: &Dataset, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::Train => data.indices(Split::Train),
        SplitArg::Val => data.indices(Split::Val),
        SplitArg::All => (0..data.sequences.len()).collect(),
    }
}

fn eval_cmd(file: FileConfig, a: EvalArgs) -> anyhow::Result<()> {
    let seed = a.seed.unwrap_or(file.train.seed);
    #[derive(Serialize)]
    struct R<'a> {
        noise: bool,
        split: String,
        mfcc: &'a avasd::dsp::MfccConfig,
    }
    print_resolved(
        "eval",
        seed,
        &R {
            noise: a.noise,
            split: format!("{:?}", a.split).to_lowercase(),
            mfcc: &file.mfcc,
        },
    )?;
    let ck = load_checkpoint::<f64>(&a.ckpt)?;
    let data = load_data(&file, &a.data)?;
    let norm = match ck.normalization {
        Some(n) => n,
        None => {
            eprintln!("checkpoint has no feature statistics; fitting them on the training split");
            data.fit_normalization()?
        }
    };
    let idx = split_indices(&data, a.split);
    let front = AudioFrontEnd::new(&file.mfcc)?;
    let source = if a.noise {
        AudioSource::Noisy { front: &front, seed }
    } else {
        AudioSource::Clean
    };
    let report = evaluate(&ck.model, &data, &idx, &norm, source, threads()?)?;
    let text = report.to_toml()?;
    let out = a.out.unwrap_or_else(|| with_suffix(&a.ckpt, if a.noise { ".eval-noisy.toml" } else { ".eval.toml" }));
    std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
    emit(&text)?;
    eprintln!("report written to {}", out.display());
    Ok(())
}

/// Table 1 latencies (ms, 11 GB consumer GPU), for reference only.
fn paper_latency_ms(variant: Variant, layers: usize) -> Option<f64> {
    match (variant, layers) {
        (Variant::M1, 2) => Some(44.41),
        (Variant::M1, 1) => Some(39.78),
        (Variant::M2, 2) => Some(44.48),
        (Variant::M2, 1) => Some(40.37),
        (Variant::M3, 2) => Some(47.44),
        (Variant::M3, 1) => Some(42.10),
        _ => None,
    }
}

fn bench(model: &AsdModel, reps: usize, warmup: usize, seed: u64, dsp: Option<(&AudioFrontEnd, f64)>) -> anyhow::Result<LatencyStats> {
    let model32: AsdModel<f32> = model.cast();
    let (stats, _) = benchmark_inference(&model32, reps, warmup, seed, dsp).map_err(|e| match e {
        avasd::Error::InvalidArgument { reason, .. } => anyhow::Error::new(UsageError(reason)),
        other => other.into(),
    })?;
    Ok(stats)
}

fn bench_cmd(file: FileConfig, a: BenchArgs) -> anyhow::Result<()> {
    let mut b = file.bench.clone();
    apply(&mut b.reps, a.reps);
    apply(&mut b.warmup, a.warmup);
    print_resolved("bench", file.train.seed, &b)?;
    let ck = load_checkpoint::<f64>(&a.ckpt)?;
    let front = AudioFrontEnd::new(&file.mfcc)?;
    let dsp = a.with_dsp.then_some((&front, file.synth.step_seconds));
    let stats = bench(&ck.model, b.reps, b.warmup, file.train.seed, dsp)?;
    emit(&toml::to_string(&stats).context("serializing latency")?)?;
    let c = ck.model.config();
    if let Some(p) = paper_latency_ms(c.variant, c.stream_bigru_layers) {
        emit(&format!("# reference (different hardware and width): {p} ms\n"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    audio_stream: String,
    bigru_layers: usize,
    latency_median_ms: f64,
    paper_latency_ms: Option<f64>,
    auc_v: f64,
    auc_a: f64,
    auc_av: f64,
}

#[derive(Serialize)]
struct AblationTable {
    row: Vec<AblationRow>,
}

fn ablate(file: FileConfig, a: AblateArgs) -> anyhow::Result<()> {
    let mut cfg = file.train.clone();
    apply_optim(&mut cfg, &a.optim);
    cfg.eval_threads = threads()?;
    checked(cfg.validate())?;
    let mut bench_cfg = file.bench.clone();
    apply(&mut bench_cfg.reps, a.reps);
    apply(&mut bench_cfg.warmup, a.warmup);
    let preset = a.preset.unwrap_or(file.model.preset);
    #[derive(Serialize)]
    struct R<'a> {
        preset: Preset,
        train: &'a avasd::train::TrainConfig,
        bench: &'a crate::config::BenchConfig,
    }
    print_resolved("ablate", cfg.seed, &R { preset, train: &cfg, bench: &bench_cfg })?;
    let data = load_data(&file, &a.data)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let val = data.indices(Split::Val);
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        for layers in [2, 1] {
            let choice = ModelChoice {
                variant,
                bigru_layers: layers,
                preset,
            };
            let tag = format!("[{variant} x{layers}] ");
            let ckpt = a.out.join(format!("{variant}-bigru{layers}.avck"));
            let (model, norm) = fit(&data, &choice, &cfg, &ckpt, &tag)?;
            let mut report: EvalReport = evaluate(&model, &data, &val, &norm, AudioSource::Clean, cfg.eval_threads)?;
            let latency = bench(&model, bench_cfg.reps, bench_cfg.warmup, cfg.seed, None)?;
            report.latency = Some(latency.clone());
            std::fs::write(with_suffix(&ckpt, ".eval.toml"), report.to_toml()?).context("writing report")?;
            rows.push(AblationRow {
                variant: variant.to_string(),
                audio_stream: variant.description().to_string(),
                bigru_layers: layers,
                latency_median_ms: latency.median_ms,
                paper_latency_ms: paper_latency_ms(variant, layers),
                auc_v: report.auc_v,
                auc_a: report.auc_a,
                auc_av: report.auc_av,
            });
        }
    }
    let table = AblationTable { row: rows };
    let toml_path = a.out.join("ablation.toml");
    std::fs::write(&toml_path, toml::to_string(&table).context("serializing table")?)
        .with_context(|| format!("writing {}", toml_path.display()))?;
    let md = markdown(&table);
    let md_path = a.out.join("ablation.md");
    std::fs::write(&md_path, &md).with_context(|| format!("writing {}", md_path.display()))?;
    emit(&md)?;
    Ok(())
}

fn markdown(t: &AblationTable) -> String {
    let mut s = String::from(
        "| Model | Audio stream | Visual stream | BiGRU | Inf. time (ms) | Paper inf. time (ms) | Video AUC | Audio AUC | AV AUC |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in &t.row {
        s.push_str(&format!(
            "| {} | {} | VGG-M | {} | {:.2} | {} | {:.4} | {:.4} | {:.4} |\n",
            r.variant.to_uppercase(),
            r.audio_stream,
            r.bigru_layers,
            r.latency_median_ms,
            r.paper_latency_ms.map_or("-".into(), |p| format!("{p:.2}")),
            r.auc_v,
            r.auc_a,
            r.auc_av
        ));
    }
    s
}

/// Writes to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> anyhow::Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r.context("writing to stdout"),
    }
}
