use std::path::PathBuf;

use anyhow::Context;
use netclus::eval::{
    asi_sweep, cluster_purity, macro_prf, novelty_score, scored_pairs, sweep_csv, truth_map, SweepParam,
};
use netclus::ingest::Split;
use netclus::pipeline::{
    all_fallback, prepare, record_speedup, route_flows, write_decisions, InferConfig, OracleConfig, Prepared,
    TeacherOracle,
};
use netclus::{FlowRecord, LabeledDataset, StudentModel};
use serde_json::{json, Value};

use super::{load_model, Data, SplitArg};
use crate::config::{bad, load, load_over, parse_delta, parse_grid};
use crate::plot::{line_chart, Series};
use crate::report::{pct, secs, table, Sink};
use crate::Outcome;

#[derive(Debug, clap::Args)]
pub struct InferFlags {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Oracle config (TOML); default: the dataset's recorded teacher.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Inference config (TOML): batch sizes, anchors, [merge], [discriminant].
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Routing thresholds `gamma,eta`.
    #[arg(long, value_parser = parse_delta)]
    delta: Option<(f64, f64)>,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    flags: InferFlags,
    /// Per-flow decisions as JSON lines.
    #[arg(long)]
    decisions: Option<PathBuf>,
    /// Also time the oracle on every flow and report the speedup.
    #[arg(long)]
    all_fallback: bool,
}

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    #[command(flatten)]
    flags: InferFlags,
    #[arg(long, value_parser = ["gamma", "eta"])]
    vary: String,
    /// `start:stop:step`.
    #[arg(long, value_parser = parse_grid)]
    grid: std::vec::Vec<f64>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// SVG plot of fast-path fraction and precision against the threshold.
    #[arg(long)]
    plot: Option<PathBuf>,
}

struct Setup {
    data: Data,
    model: StudentModel,
    flows: LabeledDataset,
    train: Option<LabeledDataset>,
    oracle: TeacherOracle,
    oracle_config: OracleConfig,
    config: InferConfig,
}

impl Setup {
    fn new(flags: &InferFlags, seed: Option<u64>) -> anyhow::Result<Self> {
        let data = Data::open(&flags.data)?;
        let model = load_model(&flags.model, &data)?;
        let c = data.manifest.num_classes;
        let mut config = load_over(InferConfig::for_classes(c), flags.config.as_deref())?;
        if let Some(s) = seed {
            config.merge.seed = s;
        }
        if let Some((g, e)) = flags.delta {
            config.discriminant.gamma = g;
            config.discriminant.eta = e;
        }
        config.validate(c)?;

        let mut oracle_config = match &flags.oracle {
            Some(p) => load::<OracleConfig>(p)?,
            None => OracleConfig::Recorded { teacher: None },
        };
        if let OracleConfig::Simulated(s) = &mut oracle_config {
            s.num_classes = c;
            if let Some(seed) = seed {
                s.seed = seed;
            }
        }
        let m = &data.manifest;
        let oracle = TeacherOracle::from_config(&oracle_config, |path| {
            let path = match path {
                Some(p) => p.to_path_buf(),
                None => data.base.join(m.teacher_path.as_ref().ok_or_else(|| {
                    netclus::Error::Config("recorded oracle needs a teacher file; the manifest names none".into())
                })?),
            };
            m.load_teacher_file(&path)
        })
        .context("configuring oracle")?;

        let flows = data.split(flags.split)?;
        let train = if config.anchors_per_class > 0 {
            Some(data.split(Split::Train)?)
        } else {
            None
        };
        Ok(Self {
            data,
            model,
            flows,
            train,
            oracle,
            oracle_config,
            config,
        })
    }

    fn anchors(&self) -> Vec<&FlowRecord> {
        self.train
            .as_ref()
            .map(|t| t.anchors(self.config.anchors_per_class))
            .unwrap_or_default()
    }

    fn prepare(&self) -> anyhow::Result<Prepared> {
        Ok(prepare(&self.model, &self.flows.flows, &self.anchors(), &self.config)?)
    }

    fn config_json(&self, flags: &InferFlags) -> Value {
        json!({
            "infer": self.config,
            "oracle": self.oracle_config,
            "split": flags.split,
            "model": flags.model,
            "data": flags.data,
        })
    }
}

pub fn run(args: Args, seed: Option<u64>, sink: &Sink) -> anyhow::Result<Outcome> {
    let setup = Setup::new(&args.flags, seed)?;
    let prepared = setup.prepare()?;
    let flows = &setup.flows.flows;
    let mut outcome = route_flows(
        &prepared,
        flows,
        &setup.oracle,
        &setup.config.discriminant,
        setup.config.oracle_batch_size,
    )?;

    let truth = truth_map(flows);
    let (p, t, counts) = scored_pairs(&outcome.decisions, &truth);
    let c = setup.data.manifest.num_classes;
    let prf = if p.is_empty() { None } else { Some(macro_prf(&p, &t, c)?) };
    let holdout = setup.data.holdout_classes();
    let novelty = (!holdout.is_empty()).then(|| novelty_score(&outcome.decisions, &truth, &holdout));
    let labels: Vec<Option<usize>> = flows
        .iter()
        .chain(setup.anchors())
        .map(|f| f.label)
        .collect();
    let purity = cluster_purity(&prepared.clustering.clusters, &labels).ok().map(|r| r.weighted);

    let mut fallback_f1 = None;
    if args.all_fallback {
        let (answers, seconds) = all_fallback(flows, &setup.oracle, setup.config.oracle_batch_size);
        record_speedup(&mut outcome.summary, seconds);
        let (mut ap, mut at) = (Vec::new(), Vec::new());
        for (f, a) in flows.iter().zip(&answers) {
            if let (Ok(label), Some(y)) = (a, f.label) {
                ap.push(*label);
                at.push(y);
            }
        }
        if !ap.is_empty() {
            fallback_f1 = Some(macro_prf(&ap, &at, c)?.macro_f1);
        }
    }

    if let Some(path) = &args.decisions {
        write_decisions(path, &outcome.decisions)?;
    }

    let s = &outcome.summary;
    let mut rows = vec![
        ("flows", format!("{} (+{} anchors)", s.flows, s.anchors)),
        ("clusters", s.clusters.to_string()),
        ("fast path", pct(s.fast_path_fraction)),
        ("fallback", pct(s.fallback_fraction)),
        ("novel candidates", format!("{} in {} clusters", s.novel_candidate, s.novel_clusters.len())),
        ("errored", s.errored.to_string()),
        ("macro F1", prf.as_ref().map(|r| format!("{:.4}", r.macro_f1)).unwrap_or("-".into())),
        ("hybrid time", secs(s.timing.hybrid)),
    ];
    if let Some(sp) = s.timing.speedup {
        rows.push(("speedup", format!("{sp:.2}x")));
    }
    table("inference", &rows);

    sink.emit(&json!({
        "command": "infer",
        "config": setup.config_json(&args.flags),
        "summary": s,
        "eval": {
            "scored": counts,
            "macro": prf.as_ref().map(|r| json!({
                "precision": r.macro_precision,
                "recall": r.macro_recall,
                "f1": r.macro_f1,
            })),
            "per_class": prf.as_ref().map(|r| &r.per_class),
            "novelty": novelty,
            "weighted_purity": purity,
            "all_fallback_macro_f1": fallback_f1,
        },
        "fast_path_fraction": s.fast_path_fraction,
    }))?;
    Ok(if s.errored > 0 { Outcome::Partial } else { Outcome::Ok })
}

pub fn run_sweep(args: SweepArgs, seed: Option<u64>, sink: &Sink) -> anyhow::Result<Outcome> {
    let setup = Setup::new(&args.flags, seed)?;
    let vary: SweepParam = args.vary.parse()?;
    if args.grid.iter().any(|g| !(0.0..=1.0).contains(g)) {
        return Err(bad("sweep grid values must lie in [0, 1]"));
    }
    let prepared = setup.prepare()?;
    let rows = asi_sweep(
        &prepared,
        &setup.flows.flows,
        &setup.oracle,
        &setup.config.discriminant,
        vary,
        &args.grid,
        setup.config.oracle_batch_size,
    )?;
    if let Some(p) = &args.csv {
        std::fs::write(p, sweep_csv(&rows)).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &args.plot {
        let frac = rows.iter().map(|r| (r.threshold, r.fast_path_fraction)).collect();
        let prec = rows
            .iter()
            .filter_map(|r| r.fast_path_precision.map(|v| (r.threshold, v)))
            .collect();
        let macro_p = rows.iter().map(|r| (r.threshold, r.macro_precision)).collect();
        let svg = line_chart(
            &format!("ASI sweep over {}", args.vary),
            &args.vary,
            "fraction",
            &[
                Series { name: "fast-path fraction", points: frac },
                Series { name: "fast-path precision", points: prec },
                Series { name: "macro precision", points: macro_p },
            ],
        );
        std::fs::write(p, svg).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!("{:>9}  {:>9}  {:>9}  {:>9}", args.vary, "fast", "fp-prec", "macro-P");
    for r in &rows {
        let fpp = r.fast_path_precision.map(|v| format!("{v:.4}")).unwrap_or("-".into());
        eprintln!(
            "{:>9.3}  {:>9}  {:>9}  {:>9.4}",
            r.threshold,
            pct(r.fast_path_fraction),
            fpp,
            r.macro_precision
        );
    }
    sink.emit(&json!({
        "command": "sweep",
        "config": setup.config_json(&args.flags),
        "vary": args.vary,
        "grid": args.grid,
        "rows": rows,
        "timing": { "embed": prepared.timing.embed, "cluster": prepared.timing.cluster, "asi": prepared.timing.asi },
    }))?;
    Ok(Outcome::Ok)
}
