use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use netclus::cluster::{assign_pseudo_labels, cluster, MergeParams};
use netclus::eval::cluster_purity;
use netclus::pipeline::batch_embed;
use netclus::FlowRecord;
use serde_json::json;

use super::{load_model, Data, SplitArg};
use crate::config::load_over;
use crate::report::{pct, secs, table, Sink};
use crate::Outcome;

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Merge parameters (TOML).
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Target cluster count (default: ten per class).
    #[arg(long)]
    stop: Option<usize>,
    /// Labeled training flows per class added to the clustering.
    #[arg(long, default_value_t = 0)]
    anchors_per_class: usize,
    /// Flow-to-cluster assignments as JSON lines.
    #[arg(long)]
    assignments: Option<PathBuf>,
}

pub fn run(args: Args, seed: Option<u64>, sink: &Sink) -> anyhow::Result<Outcome> {
    let data = Data::open(&args.data)?;
    let model = load_model(&args.model, &data)?;
    let c = data.manifest.num_classes;
    let mut params = load_over(MergeParams::for_classes(c), args.params.as_deref())?;
    if let Some(s) = seed {
        params.seed = s;
    }
    params.stop_cluster_count = args.stop.unwrap_or(params.stop_cluster_count);
    params.validate(c)?;

    let flows = data.split(args.split)?;
    let train;
    let anchors: Vec<&FlowRecord> = if args.anchors_per_class > 0 {
        train = data.split(SplitArg::Train)?;
        train.anchors(args.anchors_per_class)
    } else {
        Vec::new()
    };
    let rows: Vec<&FlowRecord> = flows.flows.iter().chain(anchors.iter().copied()).collect();

    let start = Instant::now();
    let out = batch_embed(&model, &rows, 1024)?;
    let embed = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let mut clustering = cluster(out.embeddings.view(), &params)?;
    assign_pseudo_labels(&mut clustering.clusters, out.logits.view())?;
    let cluster_secs = start.elapsed().as_secs_f64();

    let truth: Vec<Option<usize>> = rows.iter().map(|f| f.label).collect();
    let purity = cluster_purity(&clustering.clusters, &truth).ok();

    if let Some(p) = &args.assignments {
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(p).with_context(|| format!("writing {}", p.display()))?,
        );
        let assignment = clustering.assignment(rows.len());
        for (f, pos) in rows.iter().zip(assignment) {
            serde_json::to_writer(&mut w, &json!({ "flow_id": f.id, "cluster_id": clustering.clusters[pos].id }))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }

    let per_cluster: Vec<_> = clustering
        .clusters
        .iter()
        .map(|cl| {
            let p = purity
                .as_ref()
                .and_then(|r| r.per_cluster.iter().find(|(id, _)| *id == cl.id).map(|x| x.1));
            json!({ "cluster_id": cl.id, "size": cl.size(), "pseudo_label": cl.pseudo_label, "purity": p })
        })
        .collect();
    table(
        "clustering",
        &[
            ("items", rows.len().to_string()),
            ("clusters", clustering.clusters.len().to_string()),
            ("rounds", format!("{} ({} approximate)", clustering.rounds, clustering.approximate_rounds)),
            ("weighted purity", purity.as_ref().map(|p| pct(p.weighted)).unwrap_or("-".into())),
            ("cluster time", secs(cluster_secs)),
        ],
    );
    sink.emit(&json!({
        "command": "cluster",
        "config": {
            "params": params,
            "split": args.split,
            "anchors_per_class": args.anchors_per_class,
            "model": args.model,
            "data": args.data,
        },
        "items": rows.len(),
        "anchors": anchors.len(),
        "clusters": clustering.clusters.len(),
        "rounds": clustering.rounds,
        "approximate_rounds": clustering.approximate_rounds,
        "weighted_purity": purity.as_ref().map(|p| p.weighted),
        "per_cluster": per_cluster,
        "timing": { "embed": embed, "cluster": cluster_secs },
    }))?;
    Ok(Outcome::Ok)
}
