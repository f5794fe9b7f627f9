//! Command-line front end.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::divergence::{corpus_summary, normalized_divergence, read_pairs, CorpusSummary, Granularity, Transcript};
use crate::error::{Error, IoContext, Result};
use crate::kv::KeyValues;
use crate::metrics::{ApPooling, DetectionReport, LocalizationReport};
use crate::model::Task;
use crate::syndata::{read_dataset, write_dataset, Generator, SyntheticConfig, MANIFEST};
use crate::trainer::{evaluate, train_with, write_predictions, MetricReport, TrainConfig, TrainLog};

pub const CHECKPOINT_FILE: &str = "checkpoint.dmck";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "dimodif", version, about = "Audio-visual forgery detection and localization toolkit")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (DIR/train and DIR/val).
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        val: usize,
    },
    /// Train on DIR/train, select on DIR/val; writes checkpoint and log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset directory (or its val split).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Task,
        /// Score merged cross-modality segments only.
        #[arg(long)]
        joint: bool,
        #[arg(long)]
        json: bool,
        /// Average AP per video instead of pooling proposals.
        #[arg(long)]
        per_video: bool,
        /// Write decoded proposals here as JSON lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Divergence score per transcript pair and a corpus summary.
    ScoreTranscripts {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value = "chars")]
        granularity: Granularity,
        #[arg(long)]
        json: bool,
    },
    /// Training curves from a log as a text table.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            let _ = writeln!(err, "error: --threads must be at least 1");
            return 2;
        }
        // a global pool can only be installed once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::TaskMismatch { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).context(|| "writing output".to_string())
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn run(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Generate { config, out: dir, train, val } => {
            let cfg = match config {
                Some(path) => {
                    let mut kv = KeyValues::read(&path)?;
                    let cfg = SyntheticConfig::from_kv(&mut kv)?;
                    kv.finish()?;
                    cfg
                }
                None => SyntheticConfig::default(),
            };
            let g = Generator::new(cfg)?;
            let tr = g.generate_range(0, train);
            let va = g.generate_range(train as u64, val);
            write_dataset(&tr, &dir.join("train"))?;
            write_dataset(&va, &dir.join("val"))?;
            let fakes = |s: &[crate::syndata::Sample]| s.iter().filter(|x| x.is_fake()).count();
            emit(
                out,
                &format!(
                    "wrote {} train ({} fake) and {} val ({} fake) samples to {}\n",
                    tr.len(),
                    fakes(&tr),
                    va.len(),
                    fakes(&va),
                    dir.display()
                ),
            )
        }
        Command::Train { config, data, out: dir, quiet } => {
            let mut cfg = TrainConfig::read(&config)?;
            let tr = read_dataset(&data.join("train"))?;
            let va = read_dataset(&data.join("val"))?;
            if let Some(s) = tr.first() {
                cfg.model.d0 = s.feature_dim();
            }
            std::fs::create_dir_all(&dir).context(|| format!("creating {}", dir.display()))?;
            let outcome = train_with(&cfg, &tr, &va, |e| {
                if !quiet {
                    let _ = writeln!(
                        err,
                        "epoch {:>3}  loss {:.5}  val {:.5}  lr {:e}  {:.1}s",
                        e.epoch, e.train.total, e.val.selection, e.lr, e.wall_secs
                    );
                }
            })?;
            outcome.checkpoint.write(&dir.join(CHECKPOINT_FILE))?;
            outcome.log.write(&dir.join(LOG_FILE))?;
            let best = outcome.log.best();
            emit(
                out,
                &format!(
                    "stopped ({}) after {} epochs; best epoch {} with validation metric {}\n",
                    outcome.stop,
                    outcome.log.epochs.len(),
                    best.map_or(0, |b| b.epoch),
                    best.map_or(0.0, |b| b.val.selection)
                ),
            )
        }
        Command::Eval { checkpoint, data, task, joint, json: as_json, per_video, predictions } => {
            let ck = Checkpoint::read(&checkpoint)?;
            let dir = if data.join(MANIFEST).exists() { data } else { data.join("val") };
            let samples = read_dataset(&dir)?;
            let pooling = if per_video { ApPooling::PerVideo } else { ApPooling::Global };
            let ev = evaluate(&ck, &samples, task, pooling)?;
            if let Some(p) = predictions {
                write_predictions(&ev.predictions, &p)?;
            }
            let mut report = ev.report;
            if joint {
                report.visual = None;
                report.audio = None;
            }
            emit(out, &if as_json { json(&report) } else { format_report(&report) })
        }
        Command::ScoreTranscripts { pairs, granularity, json: as_json } => {
            let pairs = read_pairs(&pairs)?;
            let scores: Vec<f64> = pairs
                .iter()
                .map(|p| normalized_divergence(&Transcript::new(&p.a, granularity), &Transcript::new(&p.b, granularity)))
                .collect();
            let summary = corpus_summary(&scores)?;
            if as_json {
                #[derive(serde::Serialize)]
                struct Scored {
                    line: usize,
                    score: f64,
                }
                #[derive(serde::Serialize)]
                struct Output {
                    scores: Vec<Scored>,
                    summary: CorpusSummary,
                }
                let scores = pairs.iter().zip(&scores).map(|(p, &score)| Scored { line: p.line, score }).collect();
                return emit(out, &json(&Output { scores, summary }));
            }
            let mut s = String::from("line\tscore\n");
            for (p, v) in pairs.iter().zip(&scores) {
                let _ = writeln!(s, "{}\t{v}", p.line);
            }
            s.push_str(&format_summary(&summary));
            emit(out, &s)
        }
        Command::Report { log, json: as_json } => {
            let log = TrainLog::read(&log)?;
            if as_json {
                return emit(out, &json(&log));
            }
            emit(out, &format_log(&log))
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| x.to_string())
}

fn format_localization(name: &str, r: &LocalizationReport) -> String {
    let mut s = format!("{name:<8}");
    for (p, v) in &r.ap {
        let _ = write!(s, "  AP@{p} {}", opt(*v));
    }
    for (n, v) in &r.ar {
        let _ = write!(s, "  AR@{n} {}", opt(*v));
    }
    s.push('\n');
    s
}

fn format_detection(name: &str, r: &DetectionReport) -> String {
    format!("{name:<8}  AUC {}  AP {}  ACC {}\n", opt(r.auc), opt(r.ap), opt(r.acc))
}

pub fn format_report(r: &MetricReport) -> String {
    let mut s = format!("task {}  samples {}  selection {}\n", r.task, r.samples, r.selection);
    for (name, rep) in [("joint", &r.joint), ("visual", &r.visual), ("audio", &r.audio)] {
        if let Some(rep) = rep {
            s.push_str(&format_localization(name, rep));
        }
    }
    s.push_str(&format_detection("video", &r.detection));
    s.push_str(&format_detection("visual", &r.detection_visual));
    s.push_str(&format_detection("audio", &r.detection_audio));
    s
}

pub fn format_summary(c: &CorpusSummary) -> String {
    let mut s = format!(
        "count {}  mean {}  min {}  q1 {}  median {}  q3 {}  max {}\nbin\tcount\n",
        c.count, c.mean, c.min, c.q1, c.median, c.q3, c.max
    );
    for (i, n) in c.histogram.iter().enumerate().filter(|(_, n)| **n > 0) {
        let _ = writeln!(s, "{:.2}\t{n}", i as f64 / 100.0);
    }
    s
}

pub fn format_log(log: &TrainLog) -> String {
    let mut s = String::from("epoch\tlr\tloss\tfocal\tdiou\tsmooth_l1\tselection\tap@0.5\tar@10\tauc\tsecs\n");
    for e in &log.epochs {
        let j = e.val.joint.as_ref();
        let _ = writeln!(
            s,
            "{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{:.1}",
            e.epoch,
            e.lr,
            e.train.total,
            e.train.focal,
            e.train.diou,
            e.train.smooth_l1,
            e.val.selection,
            opt(j.and_then(|r| r.ap(0.5))),
            opt(j.and_then(|r| r.ar(10))),
            opt(e.val.detection.auc),
            e.wall_secs
        );
    }
    if let Some(b) = log.best() {
        let _ = writeln!(s, "best epoch {} selection {}", b.epoch, b.val.selection);
    }
    s
}

/// Entry point for the binary.
pub fn main_with_args() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    dispatch(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
