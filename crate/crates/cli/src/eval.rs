use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Subcommand};
use decorum::decorate::SweepQuery;
use decorum::metrics::{
    build_tfr_samples, clip_score, fid, kid, kid_subsets, percent, text_table, tfr_report,
    top_k_accuracy, EmbeddingSet, TfrSample, TfrScene, TopKRecord,
};
use serde::Serialize;

use crate::io::{emit, envelope, load_inventory, load_prior, read_json, Usage};
use crate::Ctx;

#[derive(Subcommand)]
pub enum EvalCommand {
    /// Text-to-scene fidelity rate.
    Tfr(TfrArgs),
    /// Top-K retrieval accuracy, optionally swept over the prior weight.
    Topk(TopkArgs),
    /// Frechet distance between two embedding sets.
    Fid(PairArgs),
    /// Kernel distance between two embedding sets.
    Kid(KidArgs),
    /// Prompt/view embedding agreement.
    Clipscore(ClipArgs),
}

#[derive(Args)]
pub struct TfrArgs {
    /// JSON list of pre-scored samples.
    #[arg(long, conflicts_with = "scenes", required_unless_present = "scenes")]
    samples: Option<PathBuf>,
    /// JSON list of `{id, prompt, views}` scenes scored through the backend.
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Negative scenes per prompt.
    #[arg(long)]
    negatives: Option<usize>,
    /// Thresholds in [0, 1] for TFR@k.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TopkArgs {
    /// JSON list of `{id, ground_truth, ranked}` records.
    #[arg(long, conflicts_with_all = ["queries", "lambda_p_sweep"], required_unless_present = "queries")]
    records: Option<PathBuf>,
    /// JSON list of `{id, description, ground_truth, candidates}` queries.
    #[arg(long, requires = "inventory")]
    queries: Option<PathBuf>,
    #[arg(long)]
    inventory: Option<PathBuf>,
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Prior weights to evaluate, one row each.
    #[arg(long, value_delimiter = ',')]
    lambda_p_sweep: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PairArgs {
    /// Embedding file (text, or binary with a `.bin` extension).
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct KidArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Average over this many random subsets instead of using all rows.
    #[arg(long)]
    subsets: Option<usize>,
    #[arg(long)]
    subset_size: Option<usize>,
}

#[derive(Args)]
pub struct ClipArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ValueReport {
    metric: &'static str,
    value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    std: Option<f64>,
}

#[derive(Serialize)]
struct TopkRow {
    lambda_p: Option<f64>,
    accuracy: BTreeMap<usize, f64>,
}

#[derive(Serialize)]
struct ClipReport {
    mean: f64,
    per_scene: BTreeMap<String, f64>,
}

pub fn run(ctx: &mut Ctx, cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Tfr(a) => tfr(ctx, a),
        EvalCommand::Topk(a) => topk(ctx, a),
        EvalCommand::Fid(a) => {
            let (x, y) = (EmbeddingSet::read(&a.a)?, EmbeddingSet::read(&a.b)?);
            let v = fid(&x, &y)?;
            single(ctx, "fid", v, None, a.out)
        }
        EvalCommand::Kid(a) => {
            let (x, y) = (
                EmbeddingSet::read(&a.pair.a)?,
                EmbeddingSet::read(&a.pair.b)?,
            );
            match a.subsets {
                None => single(ctx, "kid", kid(&x, &y)?, None, a.pair.out),
                Some(n) => {
                    let size = a.subset_size.unwrap_or(ctx.config.eval.kid_subset_size);
                    let est = kid_subsets(&x, &y, n, size, ctx.config.eval.seed)?;
                    single(ctx, "kid", est.mean, Some(est.std), a.pair.out)
                }
            }
        }
        EvalCommand::Clipscore(a) => clipscore(ctx, a),
    }
}

fn single(
    ctx: &Ctx,
    metric: &'static str,
    value: f64,
    std: Option<f64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let table = match std {
        None => format!("{metric}: {value:.6}\n"),
        Some(s) => format!("{metric}: {value:.6} +/- {s:.6}\n"),
    };
    let report = ValueReport { metric, value, std };
    emit(
        ctx.format,
        &table,
        &envelope(metric, &ctx.config, report),
        out.as_deref(),
    )
}

fn tfr(ctx: &Ctx, a: TfrArgs) -> Result<()> {
    let thresholds = a
        .thresholds
        .unwrap_or_else(|| ctx.config.eval.tfr_thresholds.clone());
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Usage(format!("threshold {t} is outside [0, 1]")).into());
    }
    let samples: Vec<TfrSample> = match (&a.samples, &a.scenes) {
        (Some(p), _) => read_json(p)?,
        (None, Some(p)) => {
            let scenes: Vec<TfrScene> = read_json(p)?;
            let batch = a.negatives.unwrap_or(ctx.config.eval.negative_batch);
            let question = ctx.config.templates().decorate_scoring;
            build_tfr_samples(
                &scenes,
                batch,
                ctx.config.eval.seed,
                &question,
                &ctx.gateway()?,
            )?
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    let report = tfr_report(&samples, &thresholds)?;
    let mut rows = vec![vec![
        "mean TFR".to_string(),
        format!("{:.4}", report.mean_tfr),
    ]];
    for (k, v) in &report.tfr_at {
        rows.push(vec![format!("TFR@{k}"), percent(*v)]);
    }
    let table = text_table(&["metric", "value"], &rows);
    emit(
        ctx.format,
        &table,
        &envelope("tfr", &ctx.config, report),
        a.out.as_deref(),
    )
}

fn topk(ctx: &Ctx, a: TopkArgs) -> Result<()> {
    let ks = a.k.unwrap_or_else(|| ctx.config.eval.top_k.clone());
    if ks.is_empty() || ks.contains(&0) {
        return Err(Usage("--k values must be positive".into()).into());
    }
    let rows: Vec<TopkRow> = if let Some(p) = &a.records {
        let records: Vec<TopKRecord> = read_json(p)?;
        vec![TopkRow {
            lambda_p: None,
            accuracy: top_k_accuracy(&records, &ks)?,
        }]
    } else {
        let (Some(qp), Some(ip)) = (&a.queries, &a.inventory) else {
            bail!(Usage("--queries requires --inventory".into()));
        };
        let queries: Vec<SweepQuery> = read_json(qp)?;
        let inventory = load_inventory(ip)?;
        let engine = ctx.engine(ctx.gateway()?, load_prior(a.prior.as_deref(), &inventory)?)?;
        let lambdas = a
            .lambda_p_sweep
            .unwrap_or_else(|| vec![ctx.config.retrieval.lambda_p]);
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Usage("prior weights must be non-negative".into()).into());
        }
        engine
            .lambda_sweep(&inventory, &queries, &lambdas, &ks)?
            .into_iter()
            .map(|r| TopkRow {
                lambda_p: Some(r.lambda_p),
                accuracy: r.accuracy,
            })
            .collect()
    };
    let headers: Vec<String> = std::iter::once("lambda_p".to_string())
        .chain(ks.iter().map(|k| format!("Top-{k}")))
        .collect();
    let header_refs: Vec<&str> = headers.iter().map(String::as_str).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            std::iter::once(r.lambda_p.map_or("-".into(), |l| l.to_string()))
                .chain(ks.iter().map(|k| percent(r.accuracy[k])))
                .collect()
        })
        .collect();
    let table = text_table(&header_refs, &body);
    emit(
        ctx.format,
        &table,
        &envelope("topk", &ctx.config, rows),
        a.out.as_deref(),
    )
}

fn clipscore(ctx: &Ctx, a: ClipArgs) -> Result<()> {
    let scenes: Vec<TfrScene> = read_json(&a.scenes)?;
    if scenes.is_empty() {
        bail!("no scenes in {}", a.scenes.display());
    }
    let gw = ctx.gateway()?;
    let mut per_scene = BTreeMap::new();
    for s in &scenes {
        per_scene.insert(s.id.clone(), clip_score(&s.prompt, &s.views, &gw)?);
    }
    let mean = per_scene.values().sum::<f64>() / per_scene.len() as f64;
    let mut rows: Vec<Vec<String>> = per_scene
        .iter()
        .map(|(id, v)| vec![id.clone(), format!("{v:.4}")])
        .collect();
    rows.push(vec!["mean".into(), format!("{mean:.4}")]);
    let table = text_table(&["scene", "clipscore"], &rows);
    let report = ClipReport { mean, per_scene };
    emit(
        ctx.format,
        &table,
        &envelope("clipscore", &ctx.config, report),
        a.out.as_deref(),
    )
}
