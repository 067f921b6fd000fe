use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mma_core::decoding::{decode, read_records, write_records, BeamConfig, DecodeRecord, NullLm, SearchMode};
use mma_core::metrics::{evaluate, EvalReport};
use mma_core::model::{Example, Model, ModelConfig, StepStats, TrainConfig, Trainer};
use mma_core::monoattn::hard_boundary;
use mma_core::numerics::RngStreams;
use mma_core::synthdata::{self, Sample};

use crate::config::{RunConfig, Split};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    GenData,
    Train,
    Decode,
    Eval,
    Align,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Decode => "decode",
            Command::Eval => "eval",
            Command::Align => "align",
            Command::Ablate => "ablate",
        }
    }
}

/// Files written by one run; removed again unless the run commits.
struct Outputs {
    created: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Self { created: Vec::new(), committed: false }
    }

    fn claim(&mut self, path: PathBuf) -> Result<PathBuf, CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        self.created.push(path.clone());
        Ok(path)
    }

    fn write(&mut self, path: PathBuf, body: &str) -> Result<PathBuf, CliError> {
        let path = self.claim(path)?;
        std::fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.created {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), source }
}

/// Runs one subcommand and returns the files it wrote. On failure every
/// file written so far is removed.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    let mut out = Outputs::new();
    let dir = match cmd {
        Command::GenData => &cfg.paths.data,
        _ => &cfg.paths.out,
    };
    let resolved = serde_json::to_string_pretty(cfg).expect("config serializes");
    out.write(dir.join(format!("{}.config.json", cmd.name())), &resolved)?;
    match cmd {
        Command::GenData => gen_data(cfg, &mut out)?,
        Command::Train => train(cfg, &mut out)?,
        Command::Decode => decode_cmd(cfg, &mut out)?,
        Command::Eval => eval(cfg, &mut out)?,
        Command::Align => align(cfg, &mut out)?,
        Command::Ablate => ablate(cfg, &mut out)?,
    }
    out.committed = true;
    Ok(std::mem::take(&mut out.created))
}

fn gen_data(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let (splits, warnings) = synthdata::generate(&cfg.task)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    for name in ["train.jsonl", "dev.jsonl", "test.jsonl", synthdata::MANIFEST_FILE] {
        out.claim(cfg.paths.data.join(name))?;
    }
    synthdata::write_dataset(&cfg.paths.data, &cfg.task, &splits)?;
    Ok(())
}

/// One split of the dataset in `paths.data`, checked against the model's
/// input and vocabulary sizes.
pub fn load_split(cfg: &RunConfig, split: Split, model: &ModelConfig) -> Result<Vec<Sample>, CliError> {
    let dir = &cfg.paths.data;
    let manifest = synthdata::read_manifest(dir).map_err(|e| match e {
        mma_core::Error::Io(src) => io_err(&dir.join(synthdata::MANIFEST_FILE), src),
        other => other.into(),
    })?;
    let t = &manifest.config;
    if t.d_in != model.d_in || t.vocab_size + 3 != model.vocab_size || t.stack_factor != model.frame_stack_factor {
        return Err(mma_core::Error::Config(format!(
            "dataset in {} (d_in {}, vocab {}, stack {}) does not fit the model (d_in {}, vocab {}, stack {})",
            dir.display(),
            t.d_in,
            t.vocab_size,
            t.stack_factor,
            model.d_in,
            model.vocab_size - 3,
            model.frame_stack_factor
        ))
        .into());
    }
    let entry = match split {
        Split::Train => &manifest.train,
        Split::Dev => &manifest.dev,
        Split::Test => &manifest.test,
    };
    Ok(synthdata::read_split(dir, entry)?)
}

pub fn examples(samples: &[Sample]) -> Vec<Example> {
    samples.iter().map(|s| Example { frames: s.frames.clone(), symbols: s.tokens.clone() }).collect()
}

/// Trains a fresh model on `samples`.
pub fn train_model(
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    samples: &[Sample],
    log_every: u64,
) -> Result<(Model, Vec<StepStats>), CliError> {
    let streams = RngStreams::new(seed);
    let model = Model::new(model_cfg, &streams)?;
    let mut trainer = Trainer::new(model, train_cfg.clone(), streams);
    let data = examples(samples);
    let stats = trainer.fit(&data, |s| {
        if log_every > 0 && s.step % log_every == 0 {
            eprintln!("step {:>6}  loss {:.4}  lr {:.3e}  grad {:.3}", s.step, s.loss, s.lr, s.grad_norm);
        }
    })?;
    Ok((trainer.into_model(), stats))
}

pub fn loss_csv(stats: &[StepStats]) -> String {
    let mut s = String::from("step,loss,lr,grad_norm\n");
    for st in stats {
        let _ = writeln!(s, "{},{},{},{}", st.step, st.loss, st.lr, st.grad_norm);
    }
    s
}

fn train(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let model_cfg = cfg.effective_model();
    let samples = load_split(cfg, Split::Train, &model_cfg)?;
    let (model, stats) = train_model(model_cfg, &cfg.train, cfg.seed, &samples, cfg.log_every)?;
    let ckpt = out.claim(cfg.paths.checkpoint())?;
    model.save(&ckpt)?;
    out.write(cfg.paths.out.join("loss.csv"), &loss_csv(&stats))?;
    Ok(())
}

/// Maps `f` over `items` on `threads` workers; results keep input order.
fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R, CliError> + Sync,
) -> Result<Vec<R>, CliError> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R, CliError>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Decodes samples with references and true boundaries attached.
pub fn decode_samples(
    model: &Model,
    samples: &[Sample],
    beam: &BeamConfig,
    mode: SearchMode,
    threads: usize,
) -> Result<Vec<DecodeRecord>, CliError> {
    let lm = NullLm { vocab_size: model.config.vocab_size };
    let vocab = model.vocab();
    par_map(samples, threads, |s| {
        let out = decode(model, &s.frames, beam, mode, &lm)?;
        let mut rec = DecodeRecord::new(s.id.clone(), &out, &vocab);
        rec.reference = Some(s.tokens.clone());
        rec.true_boundaries = Some(s.true_boundaries.clone());
        Ok(rec)
    })
}

fn load_model(cfg: &RunConfig) -> Result<Model, CliError> {
    let path = cfg.paths.checkpoint();
    Model::load(&path).map_err(|e| match e {
        mma_core::Error::Io(src) => io_err(&path, src),
        other => other.into(),
    })
}

fn limited<'a>(cfg: &RunConfig, samples: &'a [Sample]) -> &'a [Sample] {
    &samples[..cfg.limit.unwrap_or(samples.len()).min(samples.len())]
}

fn decode_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let samples = load_split(cfg, cfg.split, &model.config)?;
    let records = decode_samples(&model, limited(cfg, &samples), &cfg.beam, cfg.mode, cfg.threads)?;
    let unfinished = records.iter().filter(|r| r.unfinished).count();
    if unfinished > 0 {
        eprintln!("warning: {unfinished} utterances reached max_len without finishing");
    }
    let path = out.claim(cfg.paths.decodes())?;
    write_records(&records, &path)?;
    Ok(())
}

fn eval(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let path = cfg.paths.decodes();
    let records = read_records(&path).map_err(|e| match e {
        mma_core::Error::Io(src) => io_err(&path, src),
        other => other.into(),
    })?;
    let report = evaluate(&records)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    out.write(cfg.paths.out.join("eval_summary.csv"), &report.summary_csv())?;
    out.write(cfg.paths.out.join("eval_utterances.csv"), &report.utterance_csv())?;
    print!("{}", report.summary_csv());
    Ok(())
}

/// Heatmap rows `id,layer,head,step,frame,p,alpha,boundary` from
/// teacher-forced test-mode alignments; `boundary` marks each head's hard
/// boundary at that step.
pub fn alignment_csv(model: &Model, samples: &[Sample]) -> Result<String, CliError> {
    let mut s = String::from("id,layer,head,step,frame,p,alpha,boundary\n");
    for x in samples {
        let (_, layers) = model.teacher_forced(&x.frames, &x.tokens)?;
        for la in &layers {
            for (head, (p, alpha)) in la.p.iter().zip(&la.alpha).enumerate() {
                let mut prev = 1;
                for i in 0..p.rows() {
                    let b = hard_boundary(p.row(i), prev);
                    if let Some(t) = b {
                        prev = t;
                    }
                    for j in 0..p.cols() {
                        let mark = u8::from(b == Some(j + 1));
                        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", x.id, la.layer, head, i + 1, j + 1, p.at(i, j), alpha.at(i, j), mark);
                    }
                }
            }
        }
    }
    Ok(s)
}

fn align(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let samples = load_split(cfg, cfg.split, &model.config)?;
    let n = cfg.align.utterances.min(samples.len());
    out.write(cfg.paths.out.join("align.csv"), &alignment_csv(&model, &samples[..n])?)?;
    Ok(())
}

fn report_cells(r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.wer_percent.map_or_else(String::new, |w| w.to_string()),
        r.r_cov_percent,
        r.r_str_percent,
        r.mean_frames_streamed,
        r.forced_total,
        r.latency.mean,
        r.latency.max
    )
}

fn ablate(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let d_lm_values = cfg.ablate.d_lm_values.clone().unwrap_or_else(|| (0..cfg.model.dec_layers).collect());
    let seeds = cfg.ablate.seeds.clone().unwrap_or_else(|| vec![cfg.seed]);
    let train_samples = load_split(cfg, Split::Train, &cfg.model)?;
    let eval_samples = load_split(cfg, cfg.split, &cfg.model)?;
    let eval_samples = limited(cfg, &eval_samples);
    let mut csv = String::from(
        "seed,d_lm,headdrop,mode,final_loss,wer_percent,r_cov_percent,r_str_percent,mean_frames_streamed,forced_total,latency_mean,latency_max\n",
    );
    for &seed in &seeds {
        for &d_lm in &d_lm_values {
            for &hd in &cfg.ablate.headdrop_values {
                let mut model_cfg = ModelConfig { d_lm, ..cfg.model.clone() };
                if !hd {
                    model_cfg.p_hd = 0.0;
                }
                eprintln!("ablate: seed {seed}, d_lm {d_lm}, headdrop {hd}");
                let (model, stats) = train_model(model_cfg, &cfg.train, seed, &train_samples, cfg.log_every)?;
                let final_loss = stats.last().map_or(f32::NAN, |s| s.loss);
                for &mode in &cfg.ablate.modes {
                    let records = decode_samples(&model, eval_samples, &cfg.beam, mode, cfg.threads)?;
                    let report = evaluate(&records)?;
                    let _ = writeln!(
                        csv,
                        "{seed},{d_lm},{},{},{final_loss},{}",
                        u8::from(hd),
                        mode.as_str(),
                        report_cells(&report)
                    );
                }
            }
        }
    }
    out.write(cfg.paths.out.join("ablate.csv"), &csv)?;
    Ok(())
}
