mod eval;
mod io;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use decorum::config::Config;
use decorum::decorate::{read_counts, CoarseM, DecorateEngine, ObjectPrior};
use decorum::gateway::Gateway;
use decorum::metrics::text_table;
use decorum::pipeline::dataset::{
    self, front_rooms, prepare_dataset, read_annotations_jsonl, read_grand_annotations,
    read_scenes_jsonl, write_prepared, PrepareOptions, SplitLists, SplitSizes, SplitSpec,
};
use decorum::pipeline::{run_generate, GenerateRequest, Pipeline};
use decorum::scene::{Category, FloorPlan, MeshAsset};

use crate::io::{
    emit, envelope, load_inventory, load_prior, read_json, to_json, write_file, Format, Usage,
};

#[derive(Parser)]
#[command(
    name = "decorum",
    version,
    about = "Text-to-scene generation and furniture retrieval"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Upper bound on concurrent requests per backend.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    jobs: Option<u32>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "table")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and furnish a scene from a text prompt.
    Generate(GenerateArgs),
    /// Rank inventory assets for one object description.
    Retrieve(RetrieveArgs),
    /// Evaluation metrics.
    #[command(subcommand)]
    Eval(eval::EvalCommand),
    /// Filter, annotate and split a scene dataset.
    PrepareData(PrepareArgs),
    /// Estimate a smoothed object prior from usage counts.
    EstimatePrior(PriorArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    prompt: String,
    /// Floor size in meters, `WIDTHxDEPTH`.
    #[arg(long, value_parser = parse_room)]
    room: FloorPlan,
    /// Inventory JSON file.
    #[arg(long)]
    inventory: PathBuf,
    /// Prior JSON from `estimate-prior`; uniform when omitted.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Allow assets of any category for every object.
    #[arg(long)]
    cross_category: bool,
    /// Record zero stage timings so artifacts are reproducible byte for byte.
    #[arg(long)]
    frozen_clock: bool,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    description: String,
    #[arg(long)]
    inventory: PathBuf,
    /// Restrict candidates to one category.
    #[arg(long)]
    category: Option<Category>,
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Coarse prefilter size: `all` or a positive integer.
    #[arg(long)]
    coarse_m: Option<CoarseM>,
    #[arg(long)]
    lambda_p: Option<f64>,
    /// Rows to print.
    #[arg(long)]
    top_k: Option<usize>,
    /// Write the ranked result document here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum ScenesFormat {
    /// Line-delimited `{"scene_id", "floor_polygon"}` records.
    Native,
    /// 3D-FRONT house JSON file or directory of them.
    Front,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum AnnotationsFormat {
    /// Line-delimited `{"scene_id", "annotation"}` records.
    Native,
    /// 3D-GRAND grounded scene descriptions.
    Grand,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, value_enum, default_value = "native")]
    scenes_format: ScenesFormat,
    /// Keep only 3D-FRONT rooms whose type contains this text.
    #[arg(long)]
    room_type: Option<String>,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, value_enum, default_value = "native")]
    annotations_format: AnnotationsFormat,
    /// JSON file with `train`, `val` and `test` id lists; seeded random split otherwise.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Train/val/test fractions for the random split.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// Expected train,val,test sizes to compare against.
    #[arg(long, value_delimiter = ',')]
    expect_sizes: Option<Vec<usize>>,
    /// Meters a floor may deviate from an axis-aligned rectangle.
    #[arg(long, default_value_t = 0.01)]
    rect_tolerance: f64,
    /// Summarize each annotation into a user prompt with the chat backend.
    #[arg(long)]
    synthesize_prompts: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PriorArgs {
    /// CSV with header `asset_id,count`.
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    inventory: PathBuf,
    /// Smoothing pseudo-count; must be positive.
    #[arg(long, default_value_t = 1.0, value_parser = parse_alpha)]
    alpha: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_room(s: &str) -> Result<FloorPlan, String> {
    let (w, d) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxDEPTH in meters, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    FloorPlan::new(num(w)?, num(d)?).map_err(|e| e.to_string())
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if a.is_finite() && a > 0.0 {
        Ok(a)
    } else {
        Err(format!("alpha must be positive, got {s}"))
    }
}

pub(crate) struct Ctx {
    pub config: Config,
    pub jobs: Option<usize>,
    pub format: Format,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(seed) = cli.seed {
            config.pipeline.seed = seed;
            config.eval.seed = seed;
        }
        Ok(Ctx {
            config,
            jobs: cli.jobs.map(|j| j as usize),
            format: cli.format,
        })
    }

    pub fn gateway(&self) -> Result<Gateway> {
        Ok(self.config.gateway(self.jobs)?)
    }

    pub fn engine(&self, gateway: Gateway, prior: ObjectPrior) -> Result<DecorateEngine> {
        Ok(
            DecorateEngine::new(gateway, prior, self.config.retrieval.clone())?
                .with_question(self.config.templates().decorate_scoring),
        )
    }
}

fn generate(ctx: &mut Ctx, args: GenerateArgs) -> Result<()> {
    ctx.config.pipeline.cross_category |= args.cross_category;
    let inventory = load_inventory(&args.inventory)?;
    let request = GenerateRequest {
        prompt: &args.prompt,
        room: args.room,
        inventory: &inventory,
        prior: load_prior(args.prior.as_deref(), &inventory)?,
        frozen_clock: args.frozen_clock,
    };
    let (record, paths) = run_generate(&ctx.config, ctx.jobs, request, &args.out)?;
    for r in record.unfurnished() {
        eprintln!(
            "warning: {} left unfurnished: {}",
            r.tag,
            r.unfurnished_reason.as_deref().unwrap_or("unknown")
        );
    }
    for s in &record.stages {
        for w in &s.warnings {
            eprintln!("warning: {}: {w}", s.stage);
        }
    }
    match ctx.format {
        Format::Json => print!("{}", fs::read_to_string(&paths.manifest)?),
        Format::Table => {
            let rows: Vec<Vec<String>> = record
                .retrieval
                .iter()
                .map(|r| {
                    vec![
                        r.tag.to_string(),
                        r.chosen.as_ref().map_or("-".into(), |c| c.to_string()),
                        r.result
                            .as_ref()
                            .and_then(|x| x.best())
                            .map_or("-".into(), |b| format!("{:.4}", b.total)),
                    ]
                })
                .collect();
            print!("{}", text_table(&["object", "asset", "total"], &rows));
            println!("wrote {}", args.out.display());
        }
    }
    Ok(())
}

fn retrieve(ctx: &mut Ctx, args: RetrieveArgs) -> Result<()> {
    if let Some(m) = args.coarse_m {
        ctx.config.retrieval.coarse_m = m;
    }
    if let Some(l) = args.lambda_p {
        ctx.config.retrieval.lambda_p = l;
    }
    if ctx.config.retrieval.validate().is_err() {
        return Err(Usage(format!("invalid --lambda-p {:?}", args.lambda_p)).into());
    }
    if args.top_k == Some(0) {
        return Err(Usage("--top-k must be at least 1".into()).into());
    }
    let inventory = load_inventory(&args.inventory)?;
    let candidates: Vec<&MeshAsset> = match &args.category {
        Some(c) => inventory.in_category(c).collect(),
        None => inventory.assets.iter().collect(),
    };
    if candidates.is_empty() {
        anyhow::bail!("no candidate assets");
    }
    let engine = ctx.engine(
        ctx.gateway()?,
        load_prior(args.prior.as_deref(), &inventory)?,
    )?;
    let result = engine.retrieve(&args.description, &candidates)?;
    let shown = args
        .top_k
        .unwrap_or(result.scores.len())
        .min(result.scores.len());
    let rows: Vec<Vec<String>> = result.scores[..shown]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            vec![
                (i + 1).to_string(),
                s.asset.to_string(),
                format!("{:.6}", s.total),
                format!("{:.6}", s.log_prior_term),
                format!("{:.6}", s.token_loglik),
            ]
        })
        .collect();
    let mut table = text_table(&["rank", "asset", "total", "prior", "loglik"], &rows);
    for s in &result.skipped {
        table.push_str(&format!("skipped {}: {}\n", s.asset, s.reason));
    }
    let report = engine.report(&args.description, candidates.len(), result);
    emit(
        ctx.format,
        &table,
        &envelope("retrieve", &ctx.config, report),
        args.out.as_deref(),
    )
}

fn prepare_data(ctx: &mut Ctx, args: PrepareArgs) -> Result<()> {
    let (scenes, mut skipped) = match args.scenes_format {
        ScenesFormat::Native => read_scenes_jsonl(&args.scenes)?,
        ScenesFormat::Front => read_front(&args.scenes, args.room_type.as_deref())?,
    };
    let (annotations, ann_skips) = match args.annotations_format {
        AnnotationsFormat::Native => read_annotations_jsonl(&args.annotations)?,
        AnnotationsFormat::Grand => read_grand_annotations(&args.annotations)?,
    };
    skipped.extend(ann_skips);
    for (flag, len) in [
        ("--fractions", args.fractions.as_ref().map(Vec::len)),
        ("--expect-sizes", args.expect_sizes.as_ref().map(Vec::len)),
    ] {
        if len.is_some_and(|n| n != 3) {
            return Err(Usage(format!("{flag} takes exactly three comma-separated values")).into());
        }
    }
    let seed = ctx.config.pipeline.seed;
    let split = match (&args.splits, &args.fractions) {
        (Some(_), Some(_)) => {
            return Err(Usage("--splits and --fractions are mutually exclusive".into()).into())
        }
        (Some(p), None) => SplitSpec::Explicit(read_json::<SplitLists>(p)?),
        (None, Some(f)) => SplitSpec::Random {
            seed,
            fractions: [f[0], f[1], f[2]],
        },
        (None, None) => SplitSpec::reference(seed),
    };
    let options = PrepareOptions {
        rect_tolerance: args.rect_tolerance,
        split,
        expected_sizes: args.expect_sizes.map(|s| SplitSizes {
            train: s[0],
            val: s[1],
            test: s[2],
        }),
    };
    let synthesizer = if args.synthesize_prompts {
        Some(Pipeline::new(
            ctx.gateway()?,
            ctx.config.templates(),
            ctx.config.pipeline.clone(),
        )?)
    } else {
        None
    };
    let prepared = prepare_dataset(
        &scenes,
        &annotations,
        &options,
        synthesizer.as_ref(),
        skipped,
    )
    .map_err(|e| match e {
        dataset::DatasetError::Validation(m) => anyhow::Error::new(Usage(m)),
        other => other.into(),
    })?;
    write_prepared(&prepared, &args.out)?;
    let s = &prepared.summary;
    match ctx.format {
        Format::Json => print!("{}", to_json(s)),
        Format::Table => {
            let rows = vec![
                vec!["train".into(), s.sizes.train.to_string()],
                vec!["val".into(), s.sizes.val.to_string()],
                vec!["test".into(), s.sizes.test.to_string()],
                vec!["skipped".into(), s.skipped.to_string()],
            ];
            print!("{}", text_table(&["split", "records"], &rows));
            if let Some(m) = s.matches_expected {
                println!("matches expected sizes: {m}");
            }
        }
    }
    Ok(())
}

fn read_front(
    path: &Path,
    room_type: Option<&str>,
) -> Result<(Vec<dataset::RawScene>, Vec<dataset::SkipEntry>)> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut scenes = Vec::new();
    let mut skips = Vec::new();
    for f in files {
        let source = f.display().to_string();
        let parsed = fs::read_to_string(&f)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).map_err(|e| e.to_string()));
        match parsed {
            Ok(house) => {
                let (s, k) = front_rooms(&house, &source, room_type);
                scenes.extend(s);
                skips.extend(k);
            }
            Err(e) => skips.push(dataset::SkipEntry {
                source,
                scene_id: None,
                reason: format!("unreadable house file: {e}"),
            }),
        }
    }
    Ok((scenes, skips))
}

fn estimate_prior(ctx: &mut Ctx, args: PriorArgs) -> Result<()> {
    let inventory = load_inventory(&args.inventory)?;
    let counts = read_counts(&args.counts)?;
    let prior = ObjectPrior::estimate(&counts, &inventory, args.alpha)?;
    let mass = prior.total_mass();
    let rows: Vec<Vec<String>> = inventory
        .assets
        .iter()
        .map(|a| {
            let lp = prior.log_prob(&a.id).expect("prior covers inventory");
            vec![
                a.id.to_string(),
                counts.get(&a.id).copied().unwrap_or(0).to_string(),
                format!("{:.9}", lp.exp()),
            ]
        })
        .collect();
    let mut table = text_table(&["asset", "count", "probability"], &rows);
    table.push_str(&format!("total mass: {mass:.12}\n"));
    eprintln!("total mass: {mass:.12}");
    if let Some(out) = &args.out {
        write_file(out, &to_json(&prior))?;
    }
    match ctx.format {
        Format::Table => print!("{table}"),
        Format::Json => print!("{}", to_json(&prior)),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut ctx = Ctx::new(&cli)?;
    match cli.command {
        Command::Generate(a) => generate(&mut ctx, a),
        Command::Retrieve(a) => retrieve(&mut ctx, a),
        Command::Eval(c) => eval::run(&mut ctx, c),
        Command::PrepareData(a) => prepare_data(&mut ctx, a),
        Command::EstimatePrior(a) => estimate_prior(&mut ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
