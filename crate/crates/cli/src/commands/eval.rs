use std::path::PathBuf;

use netclus::eval::{macro_prf, novelty_score, scored_pairs, truth_map};
use netclus::pipeline::read_decisions;
use serde_json::json;

use super::{Data, SplitArg};
use crate::config::{bad, parse_list};
use crate::report::{table, Sink};
use crate::Outcome;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Decisions file written by `infer --decisions`.
    #[arg(long)]
    decisions: PathBuf,
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Held-out classes for novelty scoring (default: from the manifest).
    #[arg(long, value_parser = parse_list::<usize>)]
    holdout: Option<std::vec::Vec<usize>>,
}

pub fn run(args: Args, sink: &Sink) -> anyhow::Result<Outcome> {
    let data = Data::open(&args.truth)?;
    let flows = data.split(args.split)?;
    let decisions = read_decisions(&args.decisions)?;
    let truth = truth_map(&flows.flows);
    let (p, t, counts) = scored_pairs(&decisions, &truth);
    if p.is_empty() {
        return Err(bad("no decision carries both a label and ground truth"));
    }
    let report = macro_prf(&p, &t, data.manifest.num_classes)?;
    let holdout = args.holdout.unwrap_or_else(|| data.holdout_classes());
    let novelty = (!holdout.is_empty()).then(|| novelty_score(&decisions, &truth, &holdout));
    let mut rows = vec![
        ("scored flows", counts.scored.to_string()),
        ("macro precision", format!("{:.4}", report.macro_precision)),
        ("macro recall", format!("{:.4}", report.macro_recall)),
        ("macro F1", format!("{:.4}", report.macro_f1)),
    ];
    if let Some(n) = &novelty {
        rows.push(("novelty recall", format!("{:.4}", n.recall)));
        rows.push(("false-flag rate", format!("{:.4}", n.false_flag_rate)));
    }
    table("evaluation", &rows);
    sink.emit(&json!({
        "command": "eval",
        "config": {
            "decisions": args.decisions,
            "truth": args.truth,
            "split": args.split,
            "holdout": holdout,
        },
        "counts": counts,
        "macro": {
            "precision": report.macro_precision,
            "recall": report.macro_recall,
            "f1": report.macro_f1,
        },
        "per_class": report.per_class,
        "novelty": novelty,
    }))?;
    Ok(Outcome::Ok)
}
