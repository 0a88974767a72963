use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use netclus::math::argmax;
use netclus::student::{train_cfe, train_distill, Activation, LossTrace, TrainConfig, TrainingData};
use netclus::{LabeledDataset, StudentModel};
use serde_json::json;

use super::Data;
use crate::config::{load_over, parse_list};
use crate::plot::{line_chart, Series};
use crate::report::{table, Sink};
use crate::Outcome;

#[derive(Debug, clap::Args)]
pub struct TrainFlags {
    /// Dataset directory (or manifest file).
    #[arg(long)]
    data: PathBuf,
    /// Where to write the trained model.
    #[arg(long)]
    out: PathBuf,
    /// Training config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Three comma-separated hidden widths.
    #[arg(long, value_parser = parse_list::<usize>)]
    hidden: Option<std::vec::Vec<usize>>,
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    /// Drop training flows whose recorded teacher label disagrees with the ground truth.
    #[arg(long)]
    without_teacher_disagreements: bool,
    /// Per-epoch loss as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Loss curve as SVG.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Debug, clap::Args)]
pub struct CfeArgs {
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, clap::Args)]
pub struct DistillArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Teacher outputs (JSON lines) for the training flows.
    #[arg(long)]
    teacher: PathBuf,
}

fn effective_config(flags: &TrainFlags, defaults: TrainConfig, seed: Option<u64>) -> anyhow::Result<TrainConfig> {
    let mut c = load_over(defaults, flags.config.as_deref())?;
    if let Some(s) = seed {
        c.seed = s;
    }
    c.epochs = flags.epochs.unwrap_or(c.epochs);
    c.learning_rate = flags.learning_rate.unwrap_or(c.learning_rate);
    c.batch_size = flags.batch_size.unwrap_or(c.batch_size);
    c.loss.lambda = flags.lambda.unwrap_or(c.loss.lambda);
    if let Some(h) = &flags.hidden {
        c.hidden_dims = h
            .as_slice()
            .try_into()
            .map_err(|_| crate::config::bad("--hidden takes exactly three widths"))?;
    }
    if let Some(a) = flags.activation {
        c.activation = match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
        };
    }
    c.validate()?;
    Ok(c)
}

fn training_split(data: &Data, flags: &TrainFlags) -> anyhow::Result<LabeledDataset> {
    let ds = data.split(netclus::ingest::Split::Train)?;
    Ok(if flags.without_teacher_disagreements {
        ds.without_teacher_disagreements()
    } else {
        ds
    })
}

fn write_outputs(flags: &TrainFlags, model: &StudentModel, trace: &LossTrace, title: &str) -> anyhow::Result<()> {
    model
        .save(&flags.out)
        .with_context(|| format!("writing model {}", flags.out.display()))?;
    if let Some(p) = &flags.trace {
        write_trace(p, trace)?;
    }
    if let Some(p) = &flags.plot {
        let points = trace.iter().map(|e| (e.epoch as f64, e.loss.total)).collect();
        let svg = line_chart(title, "epoch", "loss", &[Series { name: "total", points }]);
        std::fs::write(p, svg).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn write_trace(path: &Path, trace: &LossTrace) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("writing {}", path.display()))?,
    );
    for e in trace {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn accuracy(model: &StudentModel, data: &TrainingData) -> anyhow::Result<Option<f64>> {
    let Some(labels) = &data.labels else {
        return Ok(None);
    };
    let out = model.forward(data.features.view())?;
    let hits = out
        .logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(&row.to_vec()) == y)
        .count();
    Ok(Some(hits as f64 / labels.len() as f64))
}

fn report(
    sink: &Sink,
    command: &str,
    config: &TrainConfig,
    flags: &TrainFlags,
    data: &TrainingData,
    model: &StudentModel,
    trace: &LossTrace,
    seconds: f64,
) -> anyhow::Result<()> {
    let last = trace.last().expect("at least one epoch");
    let acc = accuracy(model, data)?;
    table(
        command,
        &[
            ("flows", data.len().to_string()),
            ("epochs", trace.len().to_string()),
            ("final loss", format!("{:.6}", last.loss.total)),
            ("train accuracy", acc.map(|a| format!("{a:.4}")).unwrap_or("-".into())),
            ("model", flags.out.display().to_string()),
        ],
    );
    sink.emit(&json!({
        "command": command,
        "config": config,
        "data": flags.data,
        "model": flags.out,
        "flows": data.len(),
        "without_teacher_disagreements": flags.without_teacher_disagreements,
        "final_loss": last,
        "train_accuracy": acc,
        "parameters": model.num_params(),
        "timing": { "train": seconds },
    }))
}

pub fn run_cfe(args: CfeArgs, seed: Option<u64>, sink: &Sink) -> anyhow::Result<Outcome> {
    let flags = &args.flags;
    let config = effective_config(flags, TrainConfig::default(), seed)?;
    let data = Data::open(&flags.data)?;
    let ds = training_split(&data, flags)?;
    let td = TrainingData::labeled(&ds)?;
    let m = &data.manifest;
    let model = config.init_model(m.feature_dim, m.embedding_dim, m.num_classes)?;
    let start = Instant::now();
    let (model, trace) = train_cfe(model, &td, &config)?;
    let seconds = start.elapsed().as_secs_f64();
    write_outputs(flags, &model, &trace, "CFE training loss")?;
    report(sink, "train-cfe", &config, flags, &td, &model, &trace, seconds)?;
    Ok(Outcome::Ok)
}

pub fn run_distill(args: DistillArgs, seed: Option<u64>, sink: &Sink) -> anyhow::Result<Outcome> {
    let flags = &args.flags;
    let config = effective_config(flags, TrainConfig::distill(), seed)?;
    let data = Data::open(&flags.data)?;
    let teacher = data
        .manifest
        .load_teacher_file(&args.teacher)
        .with_context(|| format!("loading teacher file {}", args.teacher.display()))?;
    let mut ds = training_split(&data, flags)?;
    ds.teacher = None;
    let ids: std::collections::HashSet<&str> = ds.flows.iter().map(|f| f.id.as_str()).collect();
    let own = teacher.into_iter().filter(|(k, _)| ids.contains(k.as_str())).collect();
    ds.attach_teacher(own)?;
    let td = TrainingData::with_teacher(&ds)?;
    let m = &data.manifest;
    let model = config.init_model(m.feature_dim, m.embedding_dim, m.num_classes)?;
    let start = Instant::now();
    let (model, trace) = train_distill(model, &td, &config)?;
    let seconds = start.elapsed().as_secs_f64();
    write_outputs(flags, &model, &trace, "distillation loss")?;
    report(sink, "distill", &config, flags, &td, &model, &trace, seconds)?;
    Ok(Outcome::Ok)
}
