use std::collections::HashSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vladbench_core::evaluation::ApVariant;
use vladbench_core::feature_io::{synth_dataset, SynthConfig};
use vladbench_core::pipeline::{DimOut, PipelineConfig};
use vladbench_core::stages::Workspace;
use vladbench_core::visualization::{correspondence_mosaic, patch_clusters, sample_patch_refs, PatchDatabase};
use vladbench_core::vlad::Normalization;
use vladbench_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_COMPUTE: u8 = 3;

/// VLAD retrieval benchmark over exported CNN feature maps.
///
/// Stages read and write versioned binary artifacts under --output-dir and
/// are cached: rerunning a stage with identical inputs and settings reuses
/// its output. Set VLADBENCH_THREADS to cap the worker count.
#[derive(Parser, Debug)]
#[command(name = "vladbench", version)]
struct Cli {
    /// More logging on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with planted group patterns.
    Synth(SynthArgs),
    /// Train k-means vocabularies for every layer and scale.
    TrainVocab(ConfigArgs),
    /// Encode every image as a (multi-scale) VLAD.
    Encode(ConfigArgs),
    /// Fit PCA + whitening on the encoded VLADs.
    FitPca(ConfigArgs),
    /// Build the compressed (projected) index.
    Project(ConfigArgs),
    /// Build the index at the configured dimension (`--dim none` = raw VLAD).
    Index(ConfigArgs),
    /// Rank the database against one indexed image.
    Query(QueryArgs),
    /// Score every layer x scale set; prints mAP and a CSV row each.
    Evaluate(ConfigArgs),
    /// Evaluate all layers x scale sets and write sweep.csv / sweep.dat.
    Sweep(ConfigArgs),
    /// Render a correspondence mosaic for one image.
    VizCorrespondence(MosaicArgs),
    /// Render rows of sampled patches with their nearest neighbours.
    VizClusters(ClusterArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Dataset directory.
    #[arg(long, default_value = "out/synth")]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    groups: usize,
    #[arg(long, default_value_t = 4)]
    per_group: usize,
    /// Grid side of the `mid` layer at scale 1 (even).
    #[arg(long, default_value_t = 6)]
    side: usize,
    #[arg(long, default_value_t = 16)]
    depth: usize,
    /// Background noise amplitude.
    #[arg(long)]
    noise: Option<f32>,
    /// Pattern offset from its background atom, relative to the atom norm.
    #[arg(long)]
    pattern_offset: Option<f32>,
    /// Pure-noise control: no shared patterns within groups.
    #[arg(long)]
    noise_only: bool,
    /// Skip the PPM images.
    #[arg(long)]
    no_images: bool,
}

/// Pipeline settings. A --config JSON file supplies the base; flags override it.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest [default: <output-dir>/synth/manifest.json].
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Layer name; repeat or comma-separate for several.
    #[arg(long = "layer", value_delimiter = ',')]
    layers: Vec<String>,
    /// Scale set such as `1` or `1,2`; repeat for several sets.
    #[arg(long = "scales", value_parser = parse_scale_set)]
    scale_sets: Vec<Vec<u32>>,
    /// Visual words per vocabulary.
    #[arg(long)]
    k: Option<usize>,
    /// raw | intra | ssr | intra+global_l2 | ssr+global_l2
    #[arg(long, value_parser = parse_normalization)]
    normalization: Option<Normalization>,
    /// PCA output dimension, or `none` for uncompressed VLADs.
    #[arg(long, value_parser = parse_dim)]
    dim: Option<DimOut>,
    #[arg(long)]
    kmeans_seed: Option<u64>,
    #[arg(long)]
    sample_seed: Option<u64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    rel_tol: Option<f64>,
    /// Descriptors sampled for k-means.
    #[arg(long)]
    sample_cap: Option<usize>,
    #[arg(long)]
    whiten_epsilon: Option<f64>,
    /// Skip L2 normalization after projection.
    #[arg(long)]
    no_projection_l2: bool,
    /// discrete | trapezoid
    #[arg(long, value_parser = parse_ap_variant)]
    ap_variant: Option<ApVariant>,
    /// Manifest used to train vocabularies instead of the database.
    #[arg(long)]
    vocab_corpus: Option<PathBuf>,
    /// Manifest used to fit PCA instead of the database.
    #[arg(long)]
    pca_corpus: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Indexed image to query with.
    #[arg(long)]
    id: String,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Keep the query image itself in the ranking.
    #[arg(long)]
    include_self: bool,
}

#[derive(Args, Debug)]
struct MosaicArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    target: String,
    #[arg(long, default_value_t = 5)]
    k_nn: usize,
    #[arg(long, default_value_t = 1)]
    scale: u32,
    /// Allow patches from the target image itself.
    #[arg(long)]
    include_self: bool,
    /// Output PPM [default: <output-dir>/viz/mosaic_<target>_<layer>_s<scale>.ppm].
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Number of sampled reference patches (rows).
    #[arg(long, default_value_t = 8)]
    patches: usize,
    #[arg(long, default_value_t = 8)]
    k_nn: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    scale: u32,
    /// Output PPM [default: <output-dir>/viz/clusters_<layer>_s<scale>.ppm].
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_scale_set(s: &str) -> Result<Vec<u32>, String> {
    let set = s
        .split([',', '+'])
        .map(|p| p.trim().parse::<u32>().map_err(|_| format!("bad scale {p:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    if set.is_empty() {
        return Err("empty scale set".into());
    }
    Ok(set)
}

fn parse_normalization(s: &str) -> Result<Normalization, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_dim(s: &str) -> Result<DimOut, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_ap_variant(s: &str) -> Result<ApVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = Result<T, Failure>;

impl ConfigArgs {
    fn resolve(&self) -> CliResult<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if self.manifest.is_some() {
            c.manifest = self.manifest.clone();
        }
        if !self.layers.is_empty() {
            c.layers = self.layers.clone();
        }
        if !self.scale_sets.is_empty() {
            c.scale_sets = self.scale_sets.clone();
        }
        macro_rules! over {
            ($($f:ident => $g:ident),*) => { $( if let Some(v) = self.$f.clone() { c.$g = v; } )* };
        }
        over!(k => k, normalization => normalization, dim => dim_out, kmeans_seed => kmeans_seed,
              sample_seed => sample_seed, max_iter => max_iter, rel_tol => rel_tol, sample_cap => sample_cap,
              whiten_epsilon => whiten_epsilon, ap_variant => ap_variant, output_dir => output_dir);
        if self.no_projection_l2 {
            c.projection_l2 = false;
        }
        if self.vocab_corpus.is_some() {
            c.vocab_corpus = self.vocab_corpus.clone();
        }
        if self.pca_corpus.is_some() {
            c.pca_corpus = self.pca_corpus.clone();
        }
        if c.scale_sets.is_empty() || c.scale_sets.iter().any(Vec::is_empty) {
            return Err(Failure::Usage("need at least one non-empty scale set".into()));
        }
        if c.k == 0 {
            return Err(Failure::Usage("--k must be positive".into()));
        }
        Ok(c)
    }

    fn open(&self, command: &str) -> CliResult<Workspace> {
        let ws = Workspace::open(self.resolve()?)?;
        ws.write_run_meta(command)?;
        Ok(ws)
    }
}

fn configurations(ws: &Workspace) -> Vec<(String, Vec<u32>)> {
    let mut out = Vec::new();
    for layer in &ws.config.layers {
        for s in &ws.config.scale_sets {
            out.push((layer.clone(), s.clone()));
        }
    }
    out
}

fn require_dim(ws: &Workspace, stage: &str) -> CliResult<usize> {
    ws.config
        .dim_out
        .0
        .ok_or_else(|| Failure::Usage(format!("{stage} needs a numeric --dim")))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => {
            let mut cfg = SynthConfig::new(a.seed, a.groups, a.per_group, a.side, a.depth);
            cfg.planted = !a.noise_only;
            if let Some(n) = a.noise {
                cfg.noise = n;
            }
            if let Some(o) = a.pattern_offset {
                cfg.pattern_offset = o;
            }
            cfg.write_images = !a.no_images;
            synth_dataset(&cfg, &a.out)?;
            println!("{}", a.out.join("manifest.json").display());
        }
        Command::TrainVocab(a) => {
            let mut ws = a.open("train-vocab")?;
            let mut done = HashSet::new();
            for (layer, scales) in configurations(&ws) {
                for s in scales {
                    if done.insert((layer.clone(), s)) {
                        println!("{}", ws.vocab(&layer, s)?.0.display());
                    }
                }
            }
        }
        Command::Encode(a) => {
            let mut ws = a.open("encode")?;
            for (layer, scales) in configurations(&ws) {
                println!("{}", ws.vlads(&layer, &scales)?.0.display());
            }
        }
        Command::FitPca(a) => {
            let mut ws = a.open("fit-pca")?;
            let dim = require_dim(&ws, "fit-pca")?;
            for (layer, scales) in configurations(&ws) {
                println!("{}", ws.projection(&layer, &scales, dim)?.0.display());
            }
        }
        Command::Project(a) => {
            let mut ws = a.open("project")?;
            let dim = require_dim(&ws, "project")?;
            for (layer, scales) in configurations(&ws) {
                println!("{}", ws.index(&layer, &scales, DimOut(Some(dim)))?.0.display());
            }
        }
        Command::Index(a) => {
            let mut ws = a.open("index")?;
            let dim = ws.config.dim_out;
            for (layer, scales) in configurations(&ws) {
                println!("{}", ws.index(&layer, &scales, dim)?.0.display());
            }
        }
        Command::Query(a) => {
            let mut ws = a.cfg.open("query")?;
            let (layer, scales) = configurations(&ws).remove(0);
            let dim = ws.config.dim_out;
            let (_, index) = ws.index(&layer, &scales, dim)?;
            let mut exclude = HashSet::new();
            if !a.include_self {
                exclude.insert(a.id.clone());
            }
            let ranked = index.query_by_id(&a.id, Some(a.top_k), &exclude)?;
            for (rank, hit) in ranked.hits.iter().enumerate() {
                println!("{}\t{}\t{:.6}", rank + 1, hit.image_id, hit.distance);
            }
        }
        Command::Evaluate(a) => {
            let mut ws = a.open("evaluate")?;
            let dim = ws.config.dim_out;
            for (layer, scales) in configurations(&ws) {
                let (report, outcome) = ws.evaluate(&layer, &scales, dim)?;
                if !outcome.summary.skipped.is_empty() {
                    log::warn!("{} queries without positives skipped", outcome.summary.skipped.len());
                }
                println!("{:.4}", outcome.summary.map);
                println!("{}", report.csv_row(&report.rows[0]));
            }
        }
        Command::Sweep(a) => {
            let mut ws = a.open("sweep")?;
            let report = ws.sweep()?;
            print!("{}", report.to_csv());
        }
        Command::VizCorrespondence(a) => {
            let ws = a.cfg.open("viz-correspondence")?;
            let layer = ws.config.layers[0].clone();
            let db = PatchDatabase::from_manifest(&ws.manifest, &layer, a.scale, true)?;
            let img = correspondence_mosaic(&db, &a.target, a.k_nn, !a.include_self)?;
            let out = a.output.unwrap_or_else(|| {
                ws.config
                    .output_dir
                    .join("viz")
                    .join(format!("mosaic_{}_{layer}_s{}.ppm", a.target, a.scale))
            });
            vladbench_core::binio::write_file(&out, &img.to_ppm())?;
            println!("{}", out.display());
        }
        Command::VizClusters(a) => {
            let ws = a.cfg.open("viz-clusters")?;
            let layer = ws.config.layers[0].clone();
            let db = PatchDatabase::from_manifest(&ws.manifest, &layer, a.scale, true)?;
            let refs = sample_patch_refs(&db, a.patches, a.seed)?;
            let img = patch_clusters(&db, &refs, a.k_nn)?;
            let out = a.output.unwrap_or_else(|| {
                ws.config
                    .output_dir
                    .join("viz")
                    .join(format!("clusters_{layer}_s{}.ppm", a.scale))
            });
            vladbench_core::binio::write_file(&out, &img.to_ppm())?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("VLADBENCH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("VLADBENCH_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { EXIT_INPUT } else { EXIT_COMPUTE })
        }
    }
}
