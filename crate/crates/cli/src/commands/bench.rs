use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use netclus::datagen::{synthesize, SynthSpec};
use netclus::eval::{cluster_scaling, hybrid_speedup, ScalingRow};
use netclus::pipeline::{batch_embed, InferConfig};
use netclus::student::{train_cfe, TrainingData};
use netclus::{FlowRecord, MergeParams, StudentModel, TrainConfig};
use serde_json::json;

use crate::config::{bad, load_over, parse_list};
use crate::plot::{line_chart, Series};
use crate::report::{pct, secs, table, Sink};
use crate::Outcome;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Flow counts for the clustering scaling run.
    #[arg(long, value_parser = parse_list::<usize>, default_value = "1000,4000,16000")]
    sizes: std::vec::Vec<usize>,
    /// Synthetic data spec (TOML) merged over the reference spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Flows routed in the speedup run.
    #[arg(long, default_value_t = 10_000)]
    flows: usize,
    /// Simulated teacher latency as a multiple of the student's per-flow latency.
    #[arg(long, default_value_t = 10.0)]
    latency_multiplier: f64,
    /// Trained student; one is trained on the synthetic data when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Scaling timings keep the fastest of this many runs.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// SVG plot of clustering time against flow count.
    #[arg(long)]
    plot: Option<PathBuf>,
}

pub fn run(args: Args, seed: Option<u64>, sink: &Sink) -> anyhow::Result<Outcome> {
    if args.sizes.is_empty() || args.sizes.contains(&0) || args.flows == 0 || args.repeats == 0 {
        return Err(bad("--sizes, --flows and --repeats must be positive"));
    }
    let mut spec = load_over(SynthSpec::reference(), args.spec.as_deref())?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let c = spec.num_classes;
    let needed = args.flows.max(*args.sizes.iter().max().unwrap());
    spec.test_flows_per_class = spec.test_flows_per_class.max(needed.div_ceil(c));
    spec.validate()?;
    let data = synthesize(&spec)?;

    let start = Instant::now();
    let model = match &args.model {
        Some(p) => {
            let m = StudentModel::load(p).with_context(|| format!("loading model {}", p.display()))?;
            if m.input_dim() != spec.feature_dim || m.num_classes() != c {
                return Err(bad(format!(
                    "model {} does not fit the spec ({} features, {} classes)",
                    p.display(),
                    spec.feature_dim,
                    c
                )));
            }
            m
        }
        None => {
            let config = TrainConfig {
                seed: spec.seed,
                ..TrainConfig::default()
            };
            let init = config.init_model(spec.feature_dim, spec.embedding_dim, c)?;
            train_cfe(init, &TrainingData::labeled(&data.train)?, &config)?.0
        }
    };
    let train_secs = start.elapsed().as_secs_f64();

    let test: Vec<&FlowRecord> = data.test.flows.iter().collect();
    let emb = batch_embed(&model, &test, 1024)?.embeddings;
    let mut params = MergeParams::for_classes(c);
    params.seed = spec.seed;
    let mut scaling: Option<Vec<ScalingRow>> = None;
    for _ in 0..args.repeats {
        let rows = cluster_scaling(emb.view(), &args.sizes, &params)?;
        scaling = Some(match scaling {
            None => rows,
            Some(best) => best
                .into_iter()
                .zip(rows)
                .map(|(b, r)| if r.seconds < b.seconds { r } else { b })
                .collect(),
        });
    }
    let scaling = scaling.expect("repeats >= 1");
    let (first, last) = (scaling.first().unwrap(), scaling.last().unwrap());
    let growth = last.seconds / first.seconds;

    let mut infer = InferConfig::for_classes(c);
    infer.merge.seed = spec.seed;
    let anchors = data.train.anchors(infer.anchors_per_class);
    let speed = hybrid_speedup(
        &model,
        &data.test.flows[..args.flows],
        &anchors,
        &infer,
        args.latency_multiplier,
    )?;

    if let Some(p) = &args.plot {
        let pts = scaling.iter().map(|r| (r.n as f64, r.seconds)).collect();
        let svg = line_chart(
            "clustering time",
            "flows",
            "seconds",
            &[Series { name: "cluster", points: pts }],
        );
        std::fs::write(p, svg).with_context(|| format!("writing {}", p.display()))?;
    }

    let mut rows: Vec<(&str, String)> = scaling
        .iter()
        .map(|r| ("cluster", format!("n={:<6} {} ({} rounds)", r.n, secs(r.seconds), r.rounds)))
        .collect();
    rows.push(("growth", format!("{growth:.1}x for {}x flows", last.n as f64 / first.n as f64)));
    rows.push(("fast path", pct(speed.fast_path_fraction)));
    rows.push(("hybrid", secs(speed.hybrid)));
    rows.push(("all fallback", secs(speed.all_fallback)));
    rows.push(("speedup", format!("{:.2}x", speed.speedup)));
    table("bench", &rows);

    sink.emit(&json!({
        "command": "bench",
        "config": {
            "spec": spec,
            "sizes": args.sizes,
            "flows": args.flows,
            "latency_multiplier": args.latency_multiplier,
            "repeats": args.repeats,
            "model": args.model,
        },
        "scaling": scaling.iter().map(|r| json!({
            "n": r.n,
            "clusters": r.clusters,
            "rounds": r.rounds,
            "timing": { "cluster": r.seconds },
        })).collect::<Vec<_>>(),
        "speedup": {
            "flows": speed.flows,
            "anchors": speed.anchors,
            "fast_path_fraction": speed.fast_path_fraction,
            "timing": speed,
        },
        "timing": { "train": train_secs, "growth": growth },
    }))?;
    Ok(Outcome::Ok)
}
