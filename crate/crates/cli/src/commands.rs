use std::fmt::Write as _;
use std::path::Path;

use clap::ArgMatches;
use motionrnn_core::checkpoint::load_checkpoint;
use motionrnn_core::datagen::{
    encode_pgm, generate_sequence, load_idx_images, read_vseq, sequence_seed, write_vseq, Bitmap, GeneratorConfig,
    SequenceBatch,
};
use motionrnn_core::io::atomic_write;
use motionrnn_core::metrics::{trend_field_export, Convention};
use motionrnn_core::model::{model_forward_step, rollout, Model, ModelConfig, ModelState};
use motionrnn_core::trainer::{self, evaluate, TrainOutputs};
use motionrnn_core::{Error, Result, Tape};
use rayon::prelude::*;

use crate::config::{explicit, DataArgs, RunConfig};
use crate::{AblateCmd, EvalCmd, GenDataArgs, PredictCmd, TrainCmd, TrendCmd};

pub const THREADS_VAR: &str = "MOTIONRNN_THREADS";

/// Sizes the global worker pool from `MOTIONRNN_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(THREADS_VAR, format!("expected a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(THREADS_VAR, e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_digits(path: Option<&Path>) -> Result<Option<Vec<Bitmap>>> {
    path.map(load_idx_images).transpose()
}

/// Sequences generated in parallel and stacked in index order.
fn generate(seed: u64, split: &str, count: usize, gen: &GeneratorConfig, digits: Option<&[Bitmap]>) -> Result<SequenceBatch> {
    let seqs = (0..count)
        .into_par_iter()
        .map(|i| generate_sequence(sequence_seed(seed, split, i), gen, digits))
        .collect::<Result<Vec<_>>>()?;
    SequenceBatch::from_sequences(&seqs, gen.split)
}

fn load_or_generate(
    path: Option<&Path>,
    cfg: &RunConfig,
    split: &str,
    count: usize,
    digits: Option<&[Bitmap]>,
) -> Result<SequenceBatch> {
    match path {
        Some(p) => read_vseq(p),
        None => generate(cfg.seed, split, count, &cfg.generator, digits),
    }
}

fn check_frames(model: &ModelConfig, data: &SequenceBatch, what: &str) -> Result<()> {
    let want = [model.in_channels, model.height, model.width];
    if data.frame_shape() != want {
        return Err(Error::config(what, format!("frames are {:?}, model expects {:?}", data.frame_shape(), want)));
    }
    Ok(())
}

/// Layers the config file and flags shared by the data-consuming commands.
fn data_config(m: &ArgMatches, common: &crate::config::CommonArgs, seq: &crate::config::SeqArgs, data: &DataArgs) -> Result<RunConfig> {
    let mut cfg = common.base(m)?;
    seq.apply(m, &mut cfg.train);
    data.apply(m, &mut cfg);
    Ok(cfg)
}

pub fn gen_data(a: &GenDataArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = a.common.base(m)?;
    a.seq.apply(m, &mut cfg.train);
    a.gen.apply(m, &mut cfg.generator);
    cfg.finish()?;
    if a.count == 0 {
        return Err(Error::config("count", "must be positive"));
    }
    let digits = load_digits(a.gen.idx.as_deref())?;
    let batch = generate(cfg.seed, &a.split, a.count, &cfg.generator, digits.as_deref())?;
    write_vseq(&a.out, &batch)?;
    println!(
        "wrote {} sequences of {} frames ({}x{}) to {}",
        batch.len(),
        batch.steps(),
        cfg.generator.frame_size,
        cfg.generator.frame_size,
        a.out.display()
    );
    Ok(())
}

/// Training and held-out data for `train` and `ablate`; the model frame
/// shape follows loaded files.
fn train_data(cfg: &mut RunConfig, data: &DataArgs) -> Result<(SequenceBatch, Option<SequenceBatch>)> {
    cfg.finish()?;
    let digits = load_digits(data.gen.idx.as_deref())?;
    let train = load_or_generate(data.data.as_deref(), cfg, "train", cfg.dataset.train_count, digits.as_deref())?;
    let [c, h, w] = train.frame_shape();
    cfg.model.in_channels = c;
    cfg.model.height = h;
    cfg.model.width = w;
    cfg.model.validate()?;
    let eval = match (&data.eval_data, cfg.dataset.eval_count) {
        (Some(p), _) => Some(read_vseq(p)?),
        (None, 0) => None,
        (None, n) => Some(generate(cfg.seed, "test", n, &cfg.generator, digits.as_deref())?),
    };
    if let Some(e) = &eval {
        check_frames(&cfg.model, e, "eval_data")?;
    }
    Ok((train, eval))
}

pub fn train(a: &TrainCmd, m: &ArgMatches) -> Result<()> {
    let mut cfg = data_config(m, &a.common, &a.seq, &a.data)?;
    a.model.apply(m, &mut cfg.model);
    a.train.apply(m, &mut cfg.train);
    let (train_set, eval_set) = train_data(&mut cfg, &a.data)?;
    create_dir(&a.out)?;
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| a.out.join("model.mrnn"));
    if let Some(parent) = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let resolved = toml::to_string(&cfg).map_err(|e| Error::config("config", e.to_string()))?;
    atomic_write(&a.out.join("config.toml"), resolved.as_bytes())?;

    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let outputs = TrainOutputs { log: Some(a.out.join("train_log.csv")), checkpoint: Some(checkpoint.clone()) };
    let outcome = trainer::train(&mut model, &train_set, eval_set.as_ref(), &cfg.train, &outputs)?;
    println!("parameters: {}", model.param_count());
    if let Some(last) = outcome.log.last() {
        println!("iteration {}: loss {:.6}", last.iteration, last.loss);
        if let (Some(mse), Some(ssim)) = (last.eval_mse, last.eval_ssim) {
            println!("held-out mse {mse:.6} ssim {ssim:.4}");
        }
    }
    println!("checkpoint: {}", checkpoint.display());
    Ok(())
}

/// Loads a checkpoint and the sequences it should run on.
fn model_and_data(
    m: &ArgMatches,
    cfg: &mut RunConfig,
    checkpoint: &Path,
    data: &DataArgs,
    split: &str,
) -> Result<(Model<f32>, SequenceBatch)> {
    let model: Model<f32> = load_checkpoint(checkpoint)?;
    if !explicit(m, "frame_size") {
        cfg.generator.frame_size = model.config.height;
    }
    cfg.finish()?;
    let digits = load_digits(data.gen.idx.as_deref())?;
    let batch = load_or_generate(data.data.as_deref(), cfg, split, cfg.dataset.eval_count, digits.as_deref())?;
    check_frames(&model.config, &batch, "data")?;
    Ok((model, batch))
}

pub fn eval(a: &EvalCmd, m: &ArgMatches) -> Result<()> {
    let mut cfg = data_config(m, &a.common, &a.seq, &a.data)?;
    if explicit(m, "metrics") || a.common.config.is_none() {
        cfg.metrics = a.metrics.clone();
    }
    let metrics = cfg.metric_list()?;
    let (model, data) = model_and_data(m, &mut cfg, &a.checkpoint, &a.data, "test")?;
    if data.steps() < cfg.train.context + cfg.train.horizon {
        return Err(Error::config("horizon", format!("sequences have only {} frames", data.steps())));
    }
    let convention = if a.paper_units { Convention::FrameSum } else { Convention::PixelMean };
    let report = evaluate(&model, &data, cfg.train.context, cfg.train.horizon, cfg.train.batch, &metrics, convention)?;
    atomic_write(&a.out, report.to_csv().as_bytes())?;
    for metric in &metrics {
        if let Some(v) = report.aggregate(*metric) {
            println!("{:>10} {v:.6}", metric.name());
        }
    }
    println!("report: {}", a.out.display());
    Ok(())
}

pub fn predict(a: &PredictCmd, m: &ArgMatches) -> Result<()> {
    let mut cfg = data_config(m, &a.common, &a.seq, &a.data)?;
    let (model, data) = model_and_data(m, &mut cfg, &a.checkpoint, &a.data, "test")?;
    let (context, horizon) = (cfg.train.context, cfg.train.horizon);
    if a.index >= data.len() {
        return Err(Error::config("index", format!("{} is out of range for {} sequences", a.index, data.len())));
    }
    if data.steps() < context + horizon {
        return Err(Error::config("horizon", format!("sequences have only {} frames", data.steps())));
    }
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    let idx = [a.index];
    let ctx: Vec<_> = (0..context).map(|t| tape.constant(data.frames_at(&idx, t))).collect();
    let out = rollout(&model, &bound, &ctx, horizon, &[], None, None)?;

    // encode everything first so a bad frame leaves no partial output
    let mut files = Vec::new();
    for t in 0..context {
        files.push((format!("context_{t:02}.pgm"), encode_pgm(&data.frames_at(&idx, t).select(0, 0)?)?));
    }
    for (j, p) in out.horizon_preds.iter().enumerate() {
        files.push((format!("pred_{j:02}.pgm"), encode_pgm(&p.value().select(0, 0)?)?));
        files.push((format!("truth_{j:02}.pgm"), encode_pgm(&data.frames_at(&idx, context + j).select(0, 0)?)?));
    }
    create_dir(&a.out)?;
    for (name, bytes) in &files {
        atomic_write(&a.out.join(name), bytes)?;
    }
    println!("wrote {} frames to {}", files.len(), a.out.display());
    Ok(())
}

pub fn export_trend(a: &TrendCmd, m: &ArgMatches) -> Result<()> {
    let mut cfg = data_config(m, &a.common, &a.seq, &a.data)?;
    let (model, data) = model_and_data(m, &mut cfg, &a.checkpoint, &a.data, "test")?;
    if model.layout.motion.is_empty() {
        return Err(Error::config("checkpoint", "model has no MotionGRU units"));
    }
    if a.interface >= model.layout.motion.len() {
        return Err(Error::config(
            "interface",
            format!("{} is out of range for {} interfaces", a.interface, model.layout.motion.len()),
        ));
    }
    if a.index >= data.len() {
        return Err(Error::config("index", format!("{} is out of range for {} sequences", a.index, data.len())));
    }
    if a.step > data.steps() {
        return Err(Error::config("step", format!("sequences have only {} frames", data.steps())));
    }
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    let mut state = ModelState::zeros(&tape, &model.config, 1);
    for t in 0..a.step {
        let frame = tape.constant(data.frames_at(&[a.index], t));
        state = model_forward_step(&model, &bound, frame, &state)?.1;
    }
    let d = state.motion[a.interface].d.value().select(0, 0)?;
    let arrows = trend_field_export(&d, &a.out)?;
    println!("wrote {} arrows to {} and {}", arrows.len(), a.out.display(), a.out.with_extension("svg").display());
    Ok(())
}

pub fn ablate(a: &AblateCmd, m: &ArgMatches) -> Result<()> {
    let mut cfg = data_config(m, &a.common, &a.seq, &a.data)?;
    a.model.apply(m, &mut cfg.model);
    a.train.apply(m, &mut cfg.train);
    if explicit(m, "metrics") || a.common.config.is_none() {
        cfg.metrics = a.metrics.clone();
    }
    let metrics = cfg.metric_list()?;
    let (train_set, eval_set) = train_data(&mut cfg, &a.data)?;
    let eval_set = eval_set.as_ref().unwrap_or(&train_set);

    // flags given as --no-* pin that toggle off; the others span both values
    let values = |on: bool| if on { vec![true, false] } else { vec![false] };
    let mut grid = Vec::new();
    for mh in values(cfg.model.enable_mh) {
        for tv in values(cfg.model.enable_tv) {
            for tm in values(cfg.model.enable_tm) {
                grid.push(ModelConfig { enable_mh: mh, enable_tv: tv, enable_tm: tm, ..cfg.model.clone() });
            }
        }
    }
    let rows = grid
        .par_iter()
        .map(|mc| -> Result<String> {
            let mut model = Model::<f32>::new(mc.clone(), cfg.seed)?;
            let outcome = trainer::train(&mut model, &train_set, None, &cfg.train, &TrainOutputs::default())?;
            let tail = (outcome.log.len() / 10).max(1).min(outcome.log.len());
            let final_loss = if tail == 0 {
                String::new()
            } else {
                let s: f64 = outcome.log[outcome.log.len() - tail..].iter().map(|r| r.loss).sum();
                (s / tail as f64).to_string()
            };
            let report =
                evaluate(&model, eval_set, cfg.train.context, cfg.train.horizon, cfg.train.batch, &metrics, Convention::PixelMean)?;
            let mut row = format!(
                "{},{},{},{},{}",
                mc.enable_mh,
                mc.enable_tv,
                mc.enable_tm,
                model.param_count(),
                final_loss
            );
            for metric in &metrics {
                let _ = write!(row, ",{}", report.aggregate(*metric).unwrap_or(f64::NAN));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("mh,tv,tm,params,final_loss");
    for metric in &metrics {
        let _ = write!(csv, ",{}", metric.name());
    }
    csv.push('\n');
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    atomic_write(&a.out, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}
