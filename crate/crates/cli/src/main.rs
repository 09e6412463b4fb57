use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use latefuse::checkpoint::Checkpoint;
use latefuse::codec::{oracle_transcribe, write_wav, Codec};
use latefuse::config::{load_config_text, Config};
use latefuse::data::{qa_items, PromptedSample, TaskKind};
use latefuse::eval::{
    codec_round_trip_snr, forgetting_report, speech_qa_eval, text_accuracy, tts_cer, ForgettingReport, SpeechQaReport,
};
use latefuse::lm::TokenModel;
use latefuse::mole::routing_accuracy;
use latefuse::pipeline::{
    build_dataset, fit_speech_side, heldout_texts, load_speech, read_dataset, run_stage0, run_stage1, run_stage2,
    run_stage3, speech_checkpoint, speech_qa_infer, synthesize, write_dataset, LmArtifacts, MetricRecord, RunDir,
};
use latefuse::aclm::AcousticLm;

#[derive(Parser, Debug)]
#[command(name = "latefuse", version, about = "Late-fusion speech and text language modeling at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON). Defaults to the selected preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory; every output goes here.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    /// Prints the full-scale reference hyperparameters and exits.
    Paper,
    /// Tiny and fast; checks that every step runs.
    Smoke,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelChoice {
    /// The mixture when stage 3 exists, otherwise the stage's own expert.
    Auto,
    Expert,
    Mole,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the TTS, text-QA and speech-QA datasets (needs fit-codec).
    GenData,
    /// Fits the semantic and acoustic tokenizers and the acoustic LM.
    FitCodec,
    /// Stage 0: trains the base model on text QA.
    Pretrain,
    /// Stage 1: vocabulary extension and the TTS expert.
    Stage1,
    /// Stage 2: text-QA (and speech-QA) experts with embeddings and head frozen.
    Stage2,
    /// Stage 3: router training over the frozen experts.
    Stage3,
    /// Synthesizes speech for a string; writes out.wav.
    Synth {
        #[arg(long)]
        text: String,
        #[arg(long, value_enum, default_value_t = ModelChoice::Auto)]
        model: ModelChoice,
    },
    /// Answers a toy question in text and speech; writes qa.json and qa.wav.
    Qa {
        #[arg(long)]
        question: String,
        #[arg(long, value_enum, default_value_t = ModelChoice::Auto)]
        model: ModelChoice,
    },
    /// Measures every stage; writes eval.json.
    Eval,
    /// Renders the forgetting report from eval.json as CSV and text.
    Report,
}

/// Removes the run lock when dropped.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(out: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(latefuse::Error::Dependency(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                out.display(),
                path.display()
            ))
            .into()),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn print_paper_preset() {
    let c = Config::paper();
    let s1 = c.stages.iter().find(|s| s.stage == 1).expect("paper preset has stage 1");
    let s3 = c.stages.iter().find(|s| s.stage == 3).expect("paper preset has stage 3");
    println!("full-scale reference hyperparameters (documentation only; nothing is trained):");
    println!("  lora rank {} alpha {}", c.lora.rank, c.lora.alpha);
    println!("  semantic tokens {}", c.vocab.n_semantic);
    println!("  batch size {}, sequence length {}, steps per stage {}", s1.batch_size, c.lm.max_seq_len, s1.steps);
    println!(
        "  AdamW lr {} (stage 3: {}), beta1 {} beta2 {}, cosine schedule",
        s1.optimizer.lr_max, s3.optimizer.lr_max, s1.optimizer.beta1, s1.optimizer.beta2
    );
    println!(
        "  model d_model {} layers {} heads {} d_ff {}",
        c.lm.d_model, c.lm.n_layers, c.lm.n_heads, c.lm.d_ff
    );
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            load_config_text(&text)?
        }
        None if cli.preset == Preset::Smoke => Config::smoke(),
        None => Config::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

struct Run {
    cfg: Config,
    dir: RunDir,
}

impl Run {
    fn metrics(&self) -> anyhow::Result<File> {
        let path = self.dir.metrics();
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))
    }

    fn speech(&self) -> anyhow::Result<(Codec, AcousticLm<f32>)> {
        let c = Checkpoint::load(&self.dir.codec()).map_err(|e| dependency(e, "run fit-codec first"))?;
        Ok(load_speech(&self.cfg, &c)?)
    }

    fn datasets(&self, kinds: &[TaskKind]) -> anyhow::Result<BTreeMap<TaskKind, Vec<PromptedSample>>> {
        let mut out = BTreeMap::new();
        for &k in kinds {
            out.insert(k, read_dataset(&self.dir.data(k), &self.cfg.vocab)?);
        }
        Ok(out)
    }

    fn stage_kinds(&self, stage: u8) -> anyhow::Result<Vec<TaskKind>> {
        Ok(self.cfg.stage(stage)?.datasets.iter().map(|d| d.kind).collect())
    }

    fn load_stage(&self, stage: u8) -> anyhow::Result<LmArtifacts> {
        let path = self.dir.stage(stage);
        let hint = match stage {
            0 => "run pretrain first".to_string(),
            s => format!("run stage{s} first"),
        };
        let c = Checkpoint::load(&path).map_err(|e| dependency(e, &hint))?;
        if c.config != self.cfg.to_canonical_json() {
            eprintln!("warning: {} was produced under a different config", path.display());
        }
        Ok(LmArtifacts::from_checkpoint(&self.cfg, &c)?)
    }

    fn save_stage(&self, stage: u8, a: &LmArtifacts) -> anyhow::Result<()> {
        a.to_checkpoint(&self.cfg).save(&self.dir.stage(stage))?;
        eprintln!("wrote {}", self.dir.stage(stage).display());
        Ok(())
    }

    fn heldout(&self) -> anyhow::Result<Vec<String>> {
        let tts = read_dataset(&self.dir.data(TaskKind::Tts), &self.cfg.vocab)?;
        Ok(heldout_texts(self.cfg.seed, 50, &tts))
    }

    fn train_stage(&self, stage: u8) -> anyhow::Result<()> {
        let data = self.datasets(&self.stage_kinds(stage)?)?;
        let mut log = self.metrics()?;
        let mut last: Option<MetricRecord> = None;
        let write = |log: &mut File, r: &MetricRecord| -> latefuse::Result<()> {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| latefuse::Error::io(self.dir.metrics(), e))
        };
        let mut sink = |r: &MetricRecord| -> latefuse::Result<()> {
            write(&mut log, r)?;
            eprintln!(
                "stage {} {}step {} loss {:.4} lr {:.2e}",
                r.stage,
                r.task.as_deref().map(|t| format!("{t} ")).unwrap_or_default(),
                r.step,
                r.loss,
                r.lr
            );
            last = Some(r.clone());
            Ok(())
        };
        let (out, metrics) = match stage {
            0 => {
                let a = run_stage0(&self.cfg, &data, &mut sink)?;
                let m = BTreeMap::from([("text_accuracy".to_string(), text_accuracy(&a.lm, &qa_items())?)]);
                (a, m)
            }
            1 => {
                let base = self.load_stage(0)?;
                let (codec, aclm) = self.speech()?;
                let a = run_stage1(&self.cfg, &base, &data, &mut sink)?;
                let tts = a.adapted("tts")?;
                let m = BTreeMap::from([
                    ("text_accuracy".to_string(), text_accuracy(&tts, &qa_items())?),
                    ("tts_cer".to_string(), tts_cer(&tts, &codec, &aclm, &self.heldout()?)?),
                ]);
                (a, m)
            }
            2 => {
                let prev = self.load_stage(1)?;
                let a = run_stage2(&self.cfg, &prev, &data, &mut sink)?;
                let mut m = BTreeMap::from([(
                    "text_accuracy".to_string(),
                    text_accuracy(&a.adapted("text_qa")?, &qa_items())?,
                )]);
                if a.expert("speech_qa").is_ok() {
                    let (codec, aclm) = self.speech()?;
                    let r = speech_qa_eval(&a.adapted("speech_qa")?, &codec, &aclm)?;
                    m.insert("speech_qa_spoken_correct".into(), r.spoken_correct);
                }
                (a, m)
            }
            _ => {
                let prev = self.load_stage(2)?;
                let (a, warnings) = run_stage3(&self.cfg, &prev, &data, &mut sink)?;
                for w in warnings {
                    eprintln!("warning: {w}");
                }
                let mole = a.mole(&self.cfg)?;
                let mut m = BTreeMap::from([("text_accuracy".to_string(), text_accuracy(&mole, &qa_items())?)]);
                for (kind, samples) in &data {
                    let (top, _) = routing_accuracy(&mole, &samples[..samples.len().min(100)], 0.99)?;
                    m.insert(format!("routing_{}", kind.name()), top);
                }
                (a, m)
            }
        };
        if let Some(mut r) = last {
            r.task = None;
            r.metrics = metrics;
            for (k, v) in &r.metrics {
                eprintln!("stage {stage} {k} {v:.3}");
            }
            write(&mut log, &r)?;
        }
        self.save_stage(stage, &out)
    }

    fn model(&self, choice: ModelChoice, expert: &str) -> anyhow::Result<Box<dyn TokenModel<f32>>> {
        let mole = match choice {
            ModelChoice::Mole => true,
            ModelChoice::Auto => self.dir.stage(3).exists(),
            ModelChoice::Expert => false,
        };
        if mole {
            return Ok(Box::new(self.load_stage(3)?.mole(&self.cfg)?));
        }
        let stage = if expert == "tts" { 1 } else { 2 };
        Ok(Box::new(self.load_stage(stage)?.adapted(expert)?))
    }

    fn gen_data(&self) -> anyhow::Result<()> {
        let (codec, _) = self.speech()?;
        let mut wanted: BTreeMap<TaskKind, usize> = BTreeMap::new();
        for d in self.cfg.stages.iter().flat_map(|s| &s.datasets) {
            let n = wanted.entry(d.kind).or_default();
            *n = (*n).max(d.n_samples);
        }
        for (kind, n) in wanted {
            let samples = build_dataset(kind, n, self.cfg.seed, Some(&codec), &self.cfg.vocab)?;
            let path = self.dir.data(kind);
            write_dataset(&path, &samples)?;
            eprintln!("wrote {} ({} samples)", path.display(), samples.len());
        }
        Ok(())
    }

    fn fit_codec(&self) -> anyhow::Result<()> {
        let (codec, aclm, report) = fit_speech_side(&self.cfg)?;
        speech_checkpoint(&self.cfg, &codec, &aclm).save(&self.dir.codec())?;
        let probe: Vec<String> = (0..3).map(|i| "0123456789abcde ".chars().cycle().skip(i * 5).take(12).collect()).collect();
        let snr = codec_round_trip_snr(&codec, &probe)?;
        let mut metrics = BTreeMap::from([("codec_snr_db".to_string(), snr)]);
        if let Some(l) = report.aclm_loss.last() {
            metrics.insert("aclm_final_loss".into(), *l);
        }
        let rec = MetricRecord {
            stage: 0,
            task: Some("codec".into()),
            step: report.aclm_loss.len(),
            loss: report.aclm_loss.last().copied().unwrap_or(0.0),
            lr: self.cfg.acoustic_lm.lr,
            grad_norm: 0.0,
            metrics,
        };
        writeln!(self.metrics()?, "{}", serde_json::to_string(&rec)?)?;
        eprintln!("codec round-trip SNR {snr:.1} dB; wrote {}", self.dir.codec().display());
        Ok(())
    }

    fn synth(&self, text: &str, choice: ModelChoice) -> anyhow::Result<()> {
        let (codec, aclm) = self.speech()?;
        let model = self.model(choice, "tts")?;
        let w = synthesize(model.as_ref(), &codec, &aclm, text)?;
        let path = self.dir.root.join("out.wav");
        write_wav(&path, &w)?;
        match oracle_transcribe(&w) {
            Ok(t) => eprintln!("wrote {}; oracle transcription {t:?}", path.display()),
            Err(e) => eprintln!("wrote {}; not transcribable: {e}", path.display()),
        }
        Ok(())
    }

    fn qa(&self, question: &str, choice: ModelChoice) -> anyhow::Result<()> {
        let (codec, aclm) = self.speech()?;
        let model = self.model(choice, "speech_qa")?;
        let ans = speech_qa_infer(model.as_ref(), &codec, &aclm, question)?;
        let wav = self.dir.root.join("qa.wav");
        let spoken = match &ans.waveform {
            Some(w) => {
                write_wav(&wav, w)?;
                oracle_transcribe(w).ok()
            }
            None => None,
        };
        let doc = serde_json::json!({
            "question": question,
            "answer": ans.text,
            "tokens": ans.tokens,
            "format_error": ans.format_error,
            "spoken_transcription": spoken,
        });
        let path = self.dir.root.join("qa.json");
        std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
        if let Some(e) = &ans.format_error {
            eprintln!("warning: {e}; text-only answer");
        }
        eprintln!("answer {:?}; wrote {}", ans.text, path.display());
        Ok(())
    }

    fn eval(&self) -> anyhow::Result<()> {
        let (codec, aclm) = self.speech()?;
        let stages: Vec<LmArtifacts> = (0..4).map(|s| self.load_stage(s)).collect::<anyhow::Result<_>>()?;
        let names: Vec<String> = (0..4).map(|s| self.dir.stage(s).display().to_string()).collect();
        let heldout = self.heldout()?;
        let report = forgetting_report(
            &self.cfg,
            [
                (&stages[0], names[0].as_str()),
                (&stages[1], names[1].as_str()),
                (&stages[2], names[2].as_str()),
                (&stages[3], names[3].as_str()),
            ],
            &codec,
            &aclm,
            &heldout,
        )?;
        let sqa_expert: Option<SpeechQaReport> = match stages[2].adapted("speech_qa") {
            Ok(m) => Some(speech_qa_eval(&m, &codec, &aclm)?),
            Err(_) => None,
        };
        let sqa_mole = speech_qa_eval(&stages[3].mole(&self.cfg)?, &codec, &aclm)?;
        let snr = codec_round_trip_snr(&codec, &heldout)?;
        let doc = serde_json::json!({
            "report": report,
            "checks": report.checks().into_iter().map(|(what, ok)| serde_json::json!({"check": what, "ok": ok})).collect::<Vec<_>>(),
            "speech_qa_expert": sqa_expert,
            "speech_qa_mole": sqa_mole,
            "codec_snr_db": snr,
        });
        let path = self.dir.root.join("eval.json");
        std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
        eprint!("{}", report.to_text());
        eprintln!("wrote {}", path.display());
        Ok(())
    }

    fn report(&self) -> anyhow::Result<()> {
        let path = self.dir.root.join("eval.json");
        if !path.exists() {
            return Err(latefuse::Error::Dependency(format!("missing {}; run eval first", path.display())).into());
        }
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        let report: ForgettingReport = serde_json::from_value(doc["report"].clone())
            .map_err(|e| latefuse::Error::Data(format!("{}: {e}", path.display())))?;
        let mut text = report.to_text();
        if let Some(snr) = doc["codec_snr_db"].as_f64() {
            text.push_str(&format!("\nCodec round-trip SNR on held-out strings: {snr:.1} dB\n"));
        }
        for key in ["speech_qa_expert", "speech_qa_mole"] {
            if let Ok(r) = serde_json::from_value::<SpeechQaReport>(doc[key].clone()) {
                text.push_str(&format!(
                    "{key}: layout ok {:.0}%, text correct {:.0}%, spoken correct {:.0}%\n",
                    r.layout_ok, r.text_correct, r.spoken_correct
                ));
            }
        }
        let csv = self.dir.root.join("report.csv");
        let txt = self.dir.root.join("report.txt");
        std::fs::write(&csv, report.to_csv())?;
        std::fs::write(&txt, &text)?;
        eprintln!("wrote {} and {}", csv.display(), txt.display());
        Ok(())
    }
}

fn dependency(e: latefuse::Error, hint: &str) -> anyhow::Error {
    match e {
        latefuse::Error::Dependency(m) => latefuse::Error::Dependency(format!("{m}; {hint}")).into(),
        other => other.into(),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.preset == Preset::Paper {
        print_paper_preset();
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    let _lock = RunLock::acquire(&cli.out)?;
    let run = Run {
        cfg,
        dir: RunDir::new(&cli.out),
    };
    match &cli.command {
        Command::GenData => run.gen_data(),
        Command::FitCodec => run.fit_codec(),
        Command::Pretrain => run.train_stage(0),
        Command::Stage1 => run.train_stage(1),
        Command::Stage2 => run.train_stage(2),
        Command::Stage3 => run.train_stage(3),
        Command::Synth { text, model } => run.synth(text, *model),
        Command::Qa { question, model } => run.qa(question, *model),
        Command::Eval => run.eval(),
        Command::Report => run.report(),
    }
}

/// 1 for problems with the request (config, missing inputs, bad text),
/// 2 for failures while computing.
fn exit_code(e: &anyhow::Error) -> u8 {
    use latefuse::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Config(_) | E::Dependency(_) | E::Alphabet(_)) => 1,
        Some(_) => 2,
        None if e.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
