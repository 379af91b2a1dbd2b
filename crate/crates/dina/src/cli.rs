//! Command-line driver. `run` returns the process exit code: 0 on success,
//! 1 on usage errors, 2 on runtime errors.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::{json, Value};

use dina_core::grpo::{self, Rollout};
use dina_core::math;
use dina_core::pipeline_sim::{self, CommKind, MappingKind, Phase};
use dina_core::recon_probe;
use dina_core::rvq;
use dina_core::seqcodec::{self, GuideMode, Modality, PackedSequence, Segment, SegmentKind};
use dina_core::toy_model::{GenMode, GenerateOptions, TrainState};
use dina_core::Tensor;

use crate::config::RunConfig;
use crate::formats::{self, Verdict};
use crate::profile::parse_profile;

#[derive(Debug, Parser)]
#[command(name = "dina", version, about = "Discrete multimodal tokenizer, toy model and training utilities")]
pub struct Cli {
    /// Raise log verbosity (-v debug, -vv trace). RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an RVQ tokenizer on a feature file
    RvqTrain(RvqTrainArgs),
    /// Quantize features into a token grid
    Tokenize(TokenizeArgs),
    /// Reconstruct features from a token grid
    Detokenize(DetokenizeArgs),
    /// Synthesize a packed multimodal dataset shard
    BuildData(BuildDataArgs),
    /// Print the layout table of one packed sequence
    Inspect(InspectArgs),
    /// Train the toy backbone
    Train(TrainArgs),
    /// Generate from a toy checkpoint
    Generate(GenerateArgs),
    /// Score a rollout log with group advantages and filters
    GrpoStep(GrpoStepArgs),
    /// Fit a pixel decoder on frozen encoder features
    ProbeRecon(ProbeArgs),
    /// Simulate a pipeline-parallel schedule
    PipeSim(PipeSimArgs),
    /// Compare VQ and RVQ reconstruction across level counts
    LevelSweep(LevelSweepArgs),
}

#[derive(Debug, Args)]
pub struct RvqTrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Feature file (binary or whitespace text rows)
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetokenizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Map back to the input feature space through the semantic decoder
    #[arg(long)]
    pub semantic: bool,
}

#[derive(Debug, Args)]
pub struct BuildDataArgs {
    /// Run config holding the [data] section and its mix
    #[arg(long, alias = "config")]
    pub mix: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a synthetic feature set for tokenizer training
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub shard: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Print at most this many steps
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Shard file, overriding [train].data
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Checkpoint path, overriding [train].checkpoint
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// text, image_tokens, audio_parallel or audio_serial
    #[arg(long)]
    pub mode: String,
    #[arg(long)]
    pub prompt: PathBuf,
    /// JSON output; stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub max_steps: usize,
    /// Sampling temperature; greedy when absent
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub delay: usize,
    /// Image grid for image_tokens, as HxW
    #[arg(long, default_value = "4x4")]
    pub image_shape: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GrpoStepArgs {
    #[arg(long)]
    pub rollouts: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    /// Write a synthetic log of this many groups to --rollouts first
    #[arg(long, value_name = "GROUPS")]
    pub demo: Option<usize>,
    /// Write the log back with filter verdicts
    #[arg(long)]
    pub out_rollouts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// random, identity or no_residual, overriding [probe].encoder
    #[arg(long)]
    pub encoder: Option<String>,
    /// Number of seeds, starting at the config seed
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Also run the residual-ablated encoder on the same seeds
    #[arg(long)]
    pub ablate: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipeSimArgs {
    #[arg(long)]
    pub profile: PathBuf,
    /// linear or vshape
    #[arg(long)]
    pub mapping: String,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print a per-device timeline to stdout
    #[arg(long)]
    pub timeline: bool,
}

#[derive(Debug, Args)]
pub struct LevelSweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Feature file; synthetic features when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::RvqTrain(a) => rvq_train(a),
        Command::Tokenize(a) => tokenize(a),
        Command::Detokenize(a) => detokenize(a),
        Command::BuildData(a) => build_data(a),
        Command::Inspect(a) => inspect(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::GrpoStep(a) => grpo_step(a),
        Command::ProbeRecon(a) => probe_recon(a),
        Command::PipeSim(a) => pipe_sim(a),
        Command::LevelSweep(a) => level_sweep(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    info!("resolved config:\n{}", cfg.resolved().trim_end());
    Ok(cfg)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    formats::write_file(path, text.as_bytes())?;
    info!("wrote {}", path.display());
    Ok(())
}

fn read_features(path: &Path) -> Result<Tensor> {
    let x = formats::decode_features(&formats::read_file(path)?).with_context(|| format!("reading features {}", path.display()))?;
    info!("{}: {} × {} features", path.display(), x.rows, x.cols);
    Ok(x)
}

fn read_rvq(path: &Path) -> Result<rvq::RvqModel> {
    formats::decode_rvq(&formats::read_file(path)?).with_context(|| format!("reading tokenizer {}", path.display()))
}

fn read_toy(path: &Path) -> Result<TrainState> {
    let entries = formats::decode_named(&formats::read_file(path)?).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(TrainState::from_tensors(entries)?)
}

fn read_shard(path: &Path) -> Result<Vec<PackedSequence>> {
    formats::decode_shard(&formats::read_file(path)?).with_context(|| format!("reading shard {}", path.display()))
}

// ---- tokenizer ----

fn rvq_train(a: RvqTrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let data = read_features(&a.data)?;
    let t0 = Instant::now();
    let (model, history) = rvq::train_rvq(&data, &cfg.rvq_train())?;
    let sizes = model.codebook.sizes();
    for h in history.iter().filter(|h| h.step % 50 == 0 || h.step + 1 == history.len()) {
        info!(
            "step {:>5}  loss {:.5}  commit {:.5}  semantic {:.5}  mse {:.5}  utilization {:.3}",
            h.step,
            h.loss,
            h.commit,
            h.semantic,
            h.reconstruction_mse,
            h.ema.utilization(&sizes)
        );
    }
    info!("trained {} levels in {:.1?}", sizes.len(), t0.elapsed());
    formats::write_file(&a.out, &formats::encode_rvq(&model))?;
    info!("wrote {}", a.out.display());
    if let Some(path) = &a.report {
        let curve: Vec<Value> = history
            .iter()
            .map(|h| json!({"step": h.step, "loss": h.loss, "commit": h.commit, "semantic": h.semantic, "mse": h.reconstruction_mse}))
            .collect();
        let last = history.last();
        write_json(
            path,
            &json!({
                "sizes": sizes,
                "dim": model.codebook.dim(),
                "final_mse": last.map(|h| h.reconstruction_mse),
                "final_utilization": last.map(|h| h.ema.utilization(&sizes)),
                "history": curve,
            }),
        )?;
    }
    Ok(())
}

fn tokenize(a: TokenizeArgs) -> Result<()> {
    init_quiet_config();
    let model = read_rvq(&a.ckpt)?;
    let x = read_features(&a.input)?;
    let q = rvq::quantize(&x, &model.codebook, &model.projection)?;
    info!("{} positions × {} levels, commit loss {:.6}", q.token_grid.n_positions(), q.token_grid.n_levels(), q.commit_loss);
    formats::write_file(&a.out, &formats::encode_tokens(&q.token_grid))?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn detokenize(a: DetokenizeArgs) -> Result<()> {
    init_quiet_config();
    let model = read_rvq(&a.ckpt)?;
    let grid = formats::decode_tokens(&formats::read_file(&a.input)?).with_context(|| format!("reading tokens {}", a.input.display()))?;
    let mut z = rvq::dequantize(&grid, &model.codebook)?;
    if a.semantic {
        z = model.semantic_decoder.apply(&z)?;
    }
    formats::write_file(&a.out, &formats::encode_features(&z))?;
    info!("wrote {} × {} features to {}", z.rows, z.cols, a.out.display());
    Ok(())
}

// Commands without a config still log the (default) configuration they run under.
fn init_quiet_config() {
    info!("resolved config: defaults (command takes no config)");
}

// ---- data ----

fn build_data(a: BuildDataArgs) -> Result<()> {
    let cfg = load_config(a.mix.as_deref())?;
    let dcfg = cfg.dataset()?;
    let seqs = seqcodec::build_dataset(&cfg.mix()?, &dcfg)?;
    let steps: usize = seqs.iter().map(PackedSequence::len).sum();
    let samples: usize = seqs.iter().map(|s| s.samples.len()).sum();
    info!("{samples} samples packed into {} sequences ({steps} steps)", seqs.len());
    formats::write_file(&a.out, &formats::encode_shard(&seqs))?;
    info!("wrote {}", a.out.display());
    if let Some(path) = &a.features {
        let x = rvq::synthetic_features(cfg.data.n_features, cfg.data.feature_dim, cfg.seed);
        formats::write_file(path, &formats::encode_features(&x))?;
        info!("wrote {} × {} features to {}", x.rows, x.cols, path.display());
    }
    Ok(())
}

fn modality_tag(m: Modality) -> &'static str {
    match m {
        Modality::Text => "text",
        Modality::Audio => "audio",
        Modality::Vision => "vision",
    }
}

fn span_tag(s: SegmentKind) -> &'static str {
    match s {
        SegmentKind::Text => "text",
        SegmentKind::PureAudio => "pure-audio",
        SegmentKind::TextGuidedAudio => "guided-audio",
        SegmentKind::Vision => "vision",
    }
}

fn opt(v: Option<u32>) -> String {
    v.map_or_else(|| "-".into(), |x| x.to_string())
}

pub fn layout_table(seq: &PackedSequence, limit: Option<usize>) -> String {
    let mut out = String::new();
    out.push_str("samples:\n");
    for s in &seq.samples {
        let kind = s.kind.map_or("-", |k| k.name());
        out.push_str(&format!("  id {:<6} kind {:<11} steps {}..{}\n", s.id, kind, s.start, s.start + s.len));
    }
    out.push_str(&format!(
        "{:>6} {:>4} {:<12} {:<6} {:>6} {:>6} {:<20} {:>3} {:>4} {:>4}\n",
        "step", "seg", "span", "mod", "text", "marker", "frame", "pad", "tsup", "fsup"
    ));
    let n = limit.unwrap_or(seq.steps.len()).min(seq.steps.len());
    for (i, s) in seq.steps[..n].iter().enumerate() {
        let frame = s.frame.as_ref().map_or_else(|| "-".into(), |f| f.iter().map(u32::to_string).collect::<Vec<_>>().join(","));
        let yn = |b: bool| if b { "y" } else { "." };
        out.push_str(&format!(
            "{:>6} {:>4} {:<12} {:<6} {:>6} {:>6} {:<20} {:>3} {:>4} {:>4}\n",
            i,
            s.segment,
            span_tag(s.span),
            modality_tag(s.modality),
            opt(s.text),
            opt(s.marker),
            frame,
            yn(s.pad),
            yn(s.text_sup),
            yn(s.frame_sup)
        ));
    }
    if n < seq.steps.len() {
        out.push_str(&format!("... {} more steps\n", seq.steps.len() - n));
    }
    out
}

fn inspect(a: InspectArgs) -> Result<()> {
    init_quiet_config();
    let seqs = read_shard(&a.shard)?;
    let seq = seqs.get(a.index).with_context(|| format!("index {} out of range: shard holds {} sequences", a.index, seqs.len()))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "sequence {} of {}: {} steps", a.index, seqs.len(), seq.len())?;
    stdout.write_all(layout_table(seq, a.limit).as_bytes())?;
    Ok(())
}

// ---- toy model ----

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(Some(&a.config))?;
    let steps = a.steps.unwrap_or(cfg.train.steps);
    let data = match a.data.as_ref().or(cfg.train.data.as_ref()) {
        Some(path) => read_shard(path)?,
        None => {
            info!("no shard given; synthesizing from [data]");
            seqcodec::build_dataset(&cfg.mix()?, &cfg.dataset()?)?
        }
    };
    if data.is_empty() {
        bail!("training shard is empty");
    }
    let mut state = match &cfg.train.resume {
        Some(path) => {
            let s = read_toy(path)?;
            if s.model.cfg != cfg.toy() {
                bail!("checkpoint {} was trained with a different model config", path.display());
            }
            info!("resumed at step {}", s.step());
            s
        }
        None => TrainState::new(&cfg.toy(), cfg.toy_train())?,
    };
    info!("{} parameters, {} sequences, {steps} steps", state.store.num_scalars(), data.len());
    let t0 = Instant::now();
    let every = cfg.train.log_every.max(1);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = &data[state.batch_index(data.len())];
        let r = state.train_step(batch)?;
        if r.step % every as u64 == 0 || losses.len() + 1 == steps {
            info!("step {:>6}  loss {:.5}  text {:.5}  depth {:.5}", r.step, r.loss.total, r.loss.text, r.loss.depth);
        }
        losses.push(r.loss.total);
    }
    info!("trained {steps} steps in {:.1?}", t0.elapsed());
    let ckpt = a.out.or(cfg.train.checkpoint.clone()).unwrap_or_else(|| cfg.out_dir.join("toy.ckpt"));
    formats::write_file(&ckpt, &formats::encode_named(&state.to_tensors()))?;
    info!("wrote {}", ckpt.display());
    if let Some(path) = &a.report {
        write_json(path, &json!({"steps": steps, "final_step": state.step(), "final_loss": losses.last(), "losses": losses}))?;
    }
    Ok(())
}

fn segment_json(s: &Segment) -> Value {
    let frames: Option<Vec<Vec<u32>>> = s.grid.as_ref().map(|g| g.positions().map(<[u32]>::to_vec).collect());
    json!({
        "kind": span_tag(s.kind),
        "text": s.text,
        "frames": frames,
        "shape": s.grid.as_ref().map(|g| g.shape().to_vec()),
        "delay": s.delay,
        "mode": match s.mode { GuideMode::Parallel => "parallel", GuideMode::Serial => "serial" },
    })
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| d.trim().parse::<usize>().with_context(|| format!("bad image shape {s:?}, expected HxW")))
        .collect()
}

fn generate(a: GenerateArgs) -> Result<()> {
    init_quiet_config();
    let mode = GenMode::parse(&a.mode)?;
    let state = read_toy(&a.ckpt)?;
    let text = std::fs::read_to_string(&a.prompt).with_context(|| format!("reading prompt {}", a.prompt.display()))?;
    let prompt = formats::parse_prompt(&text, state.model.cfg.levels.len())?;
    let opts = GenerateOptions { max_steps: a.max_steps, temperature: a.temperature, delay: a.delay, image_shape: parse_shape(&a.image_shape)? };
    let g = state.model.generate(&state.store, &prompt, mode, &opts, a.seed)?;
    if g.truncated {
        warn!("generation hit the step cap before finishing");
    }
    let out = json!({
        "mode": a.mode,
        "truncated": g.truncated,
        "generated_steps": g.steps.len(),
        "segments": g.segments.iter().map(segment_json).collect::<Vec<_>>(),
    });
    match &a.out {
        Some(path) => write_json(path, &out)?,
        None => println!("{}", serde_json::to_string_pretty(&out)?),
    }
    Ok(())
}

// ---- GRPO ----

/// Synthetic rollout log: random per-level policies, rewards from matching a
/// fixed pattern, one near-uniform (high entropy) rollout in group 0 and one
/// sampler/actor mismatch in group 1.
pub fn demo_rollouts(groups: usize, group_size: usize, levels: usize, seed: u64) -> Vec<Rollout> {
    const T: usize = 6;
    const K: usize = 8;
    let pattern: Vec<u32> = (0..T as u32).map(|t| t % K as u32).collect();
    let mut out = Vec::new();
    for g in 0..groups {
        for i in 0..group_size {
            let mut rng = math::rng_for(seed, (g * group_size + i) as u64);
            let flat = g == 0 && i + 1 == group_size;
            let scale = if flat { 0.05 } else { 2.5 };
            let old: Vec<Tensor> = (0..levels).map(|_| Tensor::randn(T, K, scale, &mut rng)).collect();
            let actor: Vec<Tensor> = old.iter().map(|o| {
                let mut a = o.clone();
                a.add_assign(&Tensor::randn(T, K, 0.05, &mut rng));
                a
            }).collect();
            let actions: Vec<Vec<u32>> = (0..T)
                .map(|t| old.iter().map(|lg| math::categorical(&mut rng, &math::softmax(lg.row(t))) as u32).collect())
                .collect();
            let actor_logp = grpo::log_prob_table(&actor, &actions);
            let old_logp = grpo::log_prob_table(&old, &actions);
            let mut sampler_prob: Vec<f64> = old_logp.iter().map(|r| math::exp(r[0])).collect();
            let mut actor_prob: Vec<f64> = actor_logp.iter().map(|r| math::exp(r[0])).collect();
            if g == 1 && i == 1 {
                sampler_prob[2] = 0.45;
                actor_prob[2] = 0.01;
            }
            let level0: Vec<u32> = actions.iter().map(|a| a[0]).collect();
            out.push(Rollout {
                group: g as u32,
                reward: grpo::synthetic_reward(&level0, &pattern),
                actions,
                actor_logp,
                old_logp,
                sampler_prob,
                actor_prob,
                entropy: grpo::mean_entropy(&actor[0]),
            });
        }
    }
    out
}

fn grpo_step(a: GrpoStepArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let gcfg = cfg.grpo()?;
    if let Some(groups) = a.demo {
        let levels = gcfg.level_weights.as_ref().map_or(cfg.data.levels.len(), Vec::len);
        let demo = demo_rollouts(groups, gcfg.group_size, levels, cfg.seed);
        let log: Vec<(Rollout, Verdict)> = demo.into_iter().map(|r| (r, Verdict::Unscored)).collect();
        formats::write_file(&a.rollouts, &formats::encode_rollouts(&log))?;
        info!("wrote {} synthetic rollouts to {}", log.len(), a.rollouts.display());
    }
    let log = formats::decode_rollouts(&formats::read_file(&a.rollouts)?).with_context(|| format!("reading rollouts {}", a.rollouts.display()))?;
    let rollouts: Vec<Rollout> = log.into_iter().map(|(r, _)| r).collect();
    if rollouts.is_empty() {
        bail!("rollout log is empty");
    }
    let adv = grpo::rollout_advantages(&rollouts)?;
    let gen = grpo::grpo_gen_loss(&rollouts, &adv, &gcfg, None)?;
    let und = grpo::grpo_und_loss(&rollouts, &adv, &gcfg)?;
    let f = &und.filter;
    info!(
        "{} rollouts: generation objective {:.6}, understanding objective {:.6}{}, kept {}/{}",
        rollouts.len(),
        gen,
        und.value,
        if und.skipped { " (skipped)" } else { "" },
        f.kept(),
        rollouts.len()
    );
    for (i, reasons) in f.reasons.iter().enumerate().filter(|(_, r)| !r.is_empty()) {
        info!("rollout {i} dropped: {}", grpo::describe(reasons));
    }
    let per: Vec<Value> = rollouts
        .iter()
        .enumerate()
        .map(|(i, r)| {
            json!({
                "index": i,
                "group": r.group,
                "reward": r.reward,
                "advantage": adv[i],
                "entropy": r.entropy,
                "kept": f.keep[i],
                "reasons": f.reasons[i].iter().map(ToString::to_string).collect::<Vec<_>>(),
            })
        })
        .collect();
    write_json(
        &a.report,
        &json!({
            "rollouts": rollouts.len(),
            "generation_objective": gen,
            "understanding_objective": und.value,
            "understanding_skipped": und.skipped,
            "entropy_mean": f.entropy_mean,
            "entropy_std": f.entropy_std,
            "entropy_threshold": f.threshold,
            "kept": f.kept(),
            "dropped": rollouts.len() - f.kept(),
            "per_rollout": per,
        }),
    )?;
    if let Some(path) = &a.out_rollouts {
        let log: Vec<(Rollout, Verdict)> =
            rollouts.into_iter().zip(&f.keep).map(|(r, &k)| (r, if k { Verdict::Kept } else { Verdict::Dropped })).collect();
        formats::write_file(path, &formats::encode_rollouts(&log))?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

// ---- probes and simulators ----

fn finite(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

fn probe_recon(a: ProbeArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut pcfg = cfg.probe()?;
    if let Some(kind) = &a.encoder {
        pcfg.encoder.kind = recon_probe::EncoderKind::parse(kind)?;
    }
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let mut kinds = vec![pcfg.encoder.kind];
    if a.ablate && pcfg.encoder.kind != recon_probe::EncoderKind::NoResidual {
        kinds.push(recon_probe::EncoderKind::NoResidual);
    }
    let mut runs = Vec::new();
    let mut means = Vec::new();
    for &kind in &kinds {
        let mut psnrs = Vec::new();
        for s in cfg.seed..cfg.seed + a.seeds {
            let mut c = pcfg.clone();
            c.encoder.kind = kind;
            let r = recon_probe::run_probe(&c, s)?;
            info!("{} seed {s}: {}", kind.name(), recon_probe::describe(&r.report));
            psnrs.push(r.report.mean_psnr);
            runs.push(json!({
                "encoder": kind.name(),
                "seed": s,
                "mean_psnr": finite(r.report.mean_psnr),
                "mean_ssim": r.report.mean_ssim,
                "unbounded": r.report.unbounded,
                "psnr": r.report.psnr.iter().map(|&p| finite(p)).collect::<Vec<_>>(),
                "ssim": r.report.ssim,
            }));
        }
        let mean = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
        info!("{}: mean PSNR over {} seeds {:.3} dB", kind.name(), psnrs.len(), mean);
        means.push(json!({"encoder": kind.name(), "mean_psnr": finite(mean)}));
    }
    if let Some(path) = &a.report {
        write_json(path, &json!({"summary": means, "runs": runs}))?;
    }
    Ok(())
}

fn phase_tag(p: Phase) -> &'static str {
    match p {
        Phase::Forward => "forward",
        Phase::Backward => "backward",
    }
}

fn comm_tag(k: CommKind) -> &'static str {
    match k {
        CommKind::Activation => "activation",
        CommKind::Gradient => "gradient",
        CommKind::Skip => "skip",
    }
}

fn pipe_sim(a: PipeSimArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let text = std::fs::read_to_string(&a.profile).with_context(|| format!("reading profile {}", a.profile.display()))?;
    let p = parse_profile(&text).with_context(|| format!("parsing profile {}", a.profile.display()))?;
    let kind = MappingKind::parse(&a.mapping)?;
    let m = pipeline_sim::assign(kind, &p)?;
    for w in &m.warnings {
        warn!("{w}");
    }
    let s = pipeline_sim::simulate(&m, &p)?;
    info!(
        "{}: makespan {:.4}, bubble {:.4}, comm volume {}, skip transfers {}",
        kind.name(),
        s.makespan,
        s.bubble,
        s.comm_volume,
        s.skip_events()
    );
    if a.timeline {
        print!("{}", pipeline_sim::timeline(&s, cfg.sim.timeline_width));
    }
    if let Some(path) = &a.report {
        let chunks: Vec<Value> = m
            .chunks
            .iter()
            .map(|c| json!({"device": c.device, "components": c.components.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>()}))
            .collect();
        let tasks: Vec<Value> = s
            .devices
            .iter()
            .enumerate()
            .flat_map(|(d, evs)| {
                evs.iter().map(move |e| json!({"device": d, "chunk": e.chunk, "micro": e.micro, "phase": phase_tag(e.phase), "start": e.start, "end": e.end}))
            })
            .collect();
        let comm: Vec<Value> = s
            .comm
            .iter()
            .map(|c| json!({"src": c.src, "dst": c.dst, "micro": c.micro, "kind": comm_tag(c.kind), "time": c.time, "volume": c.volume}))
            .collect();
        write_json(
            path,
            &json!({
                "mapping": kind.name(),
                "summary": {
                    "makespan": s.makespan,
                    "bubble": s.bubble,
                    "busy": s.busy,
                    "loads": m.loads,
                    "comm_volume": s.comm_volume,
                    "comm_events": s.comm.len(),
                    "skip_events": s.skip_events(),
                },
                "warnings": m.warnings,
                "chunks": chunks,
                "tasks": tasks,
                "comm": comm,
            }),
        )?;
    }
    Ok(())
}

fn level_sweep(a: LevelSweepArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let data = match &a.data {
        Some(path) => read_features(path)?,
        None => rvq::synthetic_features(cfg.data.n_features, cfg.data.feature_dim, cfg.seed),
    };
    let (configs, scfg) = cfg.sweep()?;
    let points = rvq::level_sweep_report(&data, &configs, &scfg)?;
    let mut rows = Vec::new();
    for p in &points {
        let name = format!("{}-{}", if p.strategy == rvq::Strategy::Vq { "vq" } else { "rvq" }, p.levels);
        info!("{name:<8} final mse {:.6}", p.final_mse);
        rows.push(json!({"config": name, "final_mse": p.final_mse, "curve": p.curve}));
    }
    if let Some(path) = &a.report {
        write_json(path, &json!({"points": rows}))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_rollouts_trip_both_filters() {
        let r = demo_rollouts(2, 4, 3, 0);
        assert_eq!(r.len(), 8);
        let f = grpo::filter_sequences(&r, &dina_core::grpo::GrpoConfig::default()).unwrap();
        assert!(f.reasons[3].iter().any(|x| matches!(x, grpo::DropReason::Entropy { .. })));
        assert!(f.reasons[5].iter().any(|x| matches!(x, grpo::DropReason::Divergence { token: 2, .. })));
    }

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("3x5").unwrap(), vec![3, 5]);
        assert!(parse_shape("3by5").is_err());
    }
}
