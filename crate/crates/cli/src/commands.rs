use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use ppp_core::engine::{evaluate_split_detailed, write_assignment_csv, TreeView};
use ppp_core::gmm::write_mixture_json;
use ppp_core::som::write_codebook_csv;
use ppp_core::synth::{generate_planted, repeatability_trial, PlantedSpec};
use ppp_core::{build_tree, cut_tree, CutTarget, DesignMatrix, PppConfig, PppTree, TreeDocument};

use crate::config::{parse_grid, read_config_file, RunSettings};
use crate::error::{CliError, CliResult};
use crate::input::{load_csv, write_table, LoadOptions};

#[derive(Debug, Parser)]
#[command(name = "ppp", version, about = "Recursive feature partitioning validated by Gaussian mixtures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Grow a partition tree over the columns of a CSV file.
    Cluster(ClusterArgs),
    /// Write a planted block dataset.
    Synth(SynthArgs),
    /// Grow one tree per seed and report how stable the root split is.
    Bench(BenchArgs),
    /// Re-cut a saved tree into feature clusters.
    Cut(CutArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// The first line is data, not feature names.
    #[arg(long)]
    pub no_header: bool,
    /// The first column holds instance names.
    #[arg(long)]
    pub id_column: bool,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
}

impl InputArgs {
    pub fn options(&self) -> CliResult<LoadOptions> {
        if !self.delimiter.is_ascii() {
            return Err(CliError::Usage("delimiter must be a single ASCII character".into()));
        }
        Ok(LoadOptions {
            has_header: !self.no_header,
            id_column: self.id_column,
            delimiter: self.delimiter as u8,
        })
    }
}

#[derive(Debug, Args, Default)]
pub struct PipelineArgs {
    /// Flat `key = value` settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed SOM grid for every node, e.g. 4x4.
    #[arg(long, value_name = "RxC")]
    pub som_grid: Option<String>,
    #[arg(long)]
    pub som_epochs: Option<usize>,
    #[arg(long)]
    pub em_tol: Option<f64>,
    #[arg(long)]
    pub em_max_iter: Option<usize>,
    #[arg(long, value_parser = ["full", "diag"])]
    pub cov_mode: Option<String>,
    #[arg(long)]
    pub reg_eps: Option<f64>,
    #[arg(long)]
    pub max_split_attempts: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_parser = ["competitive", "weighted"])]
    pub posterior_mode: Option<String>,
    #[arg(long, value_parser = ["gamma0", "all"])]
    pub gamma_rows: Option<String>,
    #[arg(long, value_parser = ["normalized", "raw"])]
    pub score_mode: Option<String>,
    #[arg(long, value_parser = ["random", "plusplus"])]
    pub kmeans_init: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl PipelineArgs {
    fn flags(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("som_grid", self.som_grid.clone());
        push("som_epochs", self.som_epochs.map(|v| v.to_string()));
        push("em_tol", self.em_tol.map(|v| v.to_string()));
        push("em_max_iter", self.em_max_iter.map(|v| v.to_string()));
        push("cov_mode", self.cov_mode.clone());
        push("reg_eps", self.reg_eps.map(|v| v.to_string()));
        push("max_split_attempts", self.max_split_attempts.map(|v| v.to_string()));
        push("patience", self.patience.map(|v| v.to_string()));
        push("threshold", self.threshold.map(|v| v.to_string()));
        push("posterior_mode", self.posterior_mode.clone());
        push("gamma_rows", self.gamma_rows.clone());
        push("score_mode", self.score_mode.clone());
        push("kmeans_init", self.kmeans_init.clone());
        push("threads", self.threads.map(|v| v.to_string()));
        out
    }

    pub fn settings(&self, extra: Vec<(&'static str, String)>) -> CliResult<RunSettings> {
        let file = self.config.as_deref().map(read_config_file).transpose()?;
        let mut flags = self.flags();
        flags.extend(extra);
        RunSettings::resolve(file.as_ref(), flags)
    }
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Cut the tree at this depth for the assignment file instead of using leaves.
    #[arg(long)]
    pub cut_depth: Option<i64>,
    /// Also write the root SOM codebook and mixture of the best root attempt.
    #[arg(long)]
    pub export_models: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Instance blocks x feature blocks.
    #[arg(long, default_value = "2x2", value_name = "RxC")]
    pub blocks: String,
    #[arg(long, default_value_t = 200)]
    pub instances: usize,
    #[arg(long, default_value_t = 20)]
    pub features: usize,
    /// Mean of the raised blocks.
    #[arg(long, default_value_t = 4.0)]
    pub gap: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Two-level layout with four blocks each way; `--blocks` is ignored.
    #[arg(long)]
    pub nested: bool,
    /// Extra mean on each nested block's own instances.
    #[arg(long, default_value_t = 3.0)]
    pub sub_gap: f64,
    /// Directory for data.csv and the truth files; stdout gets the data otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Master seeds: an inclusive range `a..b` or a comma list.
    #[arg(long, default_value = "1..10")]
    pub seeds: String,
    /// `feature_id,block` file to score root splits against.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CutArgs {
    /// A tree.json written by `cluster`.
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long, conflicts_with = "leaves")]
    pub cut_depth: Option<i64>,
    #[arg(long)]
    pub leaves: bool,
    /// Assignment file; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Cluster(a) => run_cluster(&a),
        Command::Synth(a) => run_synth(&a),
        Command::Bench(a) => run_bench(&a),
        Command::Cut(a) => run_cut(&a),
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> CliResult<()>) -> CliResult<()> {
    let err = |e: io::Error| CliError::Output {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    body(&mut w)?;
    w.flush().map_err(err)
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Output {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub input: String,
    pub config: PppConfig,
    pub master_seed: u64,
    pub cut_depth: Option<i64>,
    pub tool_version: &'static str,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
}

/// Writes to a sibling temp file first so readers never see a partial manifest.
fn write_manifest(path: &Path, manifest: &RunManifest) -> CliResult<()> {
    let tmp = path.with_extension("json.tmp");
    write_file(&tmp, |w| {
        serde_json::to_writer_pretty(&mut *w, manifest).map_err(|e| CliError::Pipeline(e.into()))?;
        Ok(())
    })?;
    fs::rename(&tmp, path).map_err(|e| CliError::Output {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn cut_target(depth: Option<i64>) -> CutTarget {
    depth.map_or(CutTarget::Leaves, CutTarget::Depth)
}

pub fn run_cluster(args: &ClusterArgs) -> CliResult<()> {
    let started = Instant::now();
    let extra = args.cut_depth.map(|d| ("cut_depth", d.to_string())).into_iter().collect();
    let settings = args.pipeline.settings(extra)?;
    let data = load_csv(&args.input.input, args.input.options()?)?;
    data.ensure_clusterable()?;
    info!("loaded {}x{} from {}", data.n_instances(), data.n_features(), args.input.input.display());

    let tree = with_threads(settings.threads, || build_tree(&data, &settings.ppp))??;
    let clusters = cut_tree(&tree.root, cut_target(settings.cut_depth))?;

    create_dir(&args.out)?;
    let mut outputs = Vec::new();
    let mut emit = |name: &str, body: &mut dyn FnMut(&mut BufWriter<File>) -> CliResult<()>| {
        let path = args.out.join(name);
        write_file(&path, body)?;
        outputs.push(path.display().to_string());
        Ok::<_, CliError>(())
    };
    emit("tree.json", &mut |w| Ok(tree.write_json(w)?))?;
    emit("assignment.csv", &mut |w| Ok(write_assignment_csv(&clusters, &tree.feature_ids, w)?))?;
    emit("diagnostics.csv", &mut |w| Ok(tree.write_diagnostics_csv(w)?))?;
    if args.export_models {
        let seed = tree
            .root
            .best_eval
            .as_ref()
            .map_or_else(|| tree.root.attempt_seed(settings.ppp.master_seed, 0), |e| e.seed);
        let artifacts = evaluate_split_detailed(&tree.root, &data, &settings.ppp, seed)?;
        emit("root_codebook.csv", &mut |w| Ok(write_codebook_csv(&artifacts.parent.som, w)?))?;
        emit("root_mixture.json", &mut |w| Ok(write_mixture_json(&artifacts.parent.mixture, w)?))?;
    }

    let manifest_path = args.out.join("manifest.json");
    outputs.push(manifest_path.display().to_string());
    write_manifest(
        &manifest_path,
        &RunManifest {
            input: args.input.input.display().to_string(),
            config: settings.ppp.clone(),
            master_seed: settings.ppp.master_seed.0,
            cut_depth: settings.cut_depth,
            tool_version: env!("CARGO_PKG_VERSION"),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            outputs,
        },
    )?;

    print_summary(&tree, clusters.len());
    Ok(())
}

fn print_summary(tree: &PppTree, n_clusters: usize) {
    let leaves = tree.leaves().len();
    println!("leaves: {leaves}");
    if n_clusters != leaves {
        println!("clusters at cut: {n_clusters}");
    }
    let levels = tree.phi_by_level();
    if levels.is_empty() {
        println!("no accepted splits");
    }
    for (depth, n, phi) in levels {
        println!("depth {depth}: {n} split(s), mean phi {phi:.3}");
    }
}

pub fn synth_spec(args: &SynthArgs) -> CliResult<PlantedSpec> {
    let (rows, cols) = if args.nested { (4, 4) } else { parse_grid(&args.blocks)? };
    if rows > args.instances || cols > args.features {
        return Err(CliError::Usage(format!(
            "{rows}x{cols} blocks need at least {rows} instances and {cols} features"
        )));
    }
    let spec = if args.nested {
        PlantedSpec::nested(args.instances, args.features, args.gap, args.sub_gap, args.noise, args.seed)
    } else {
        PlantedSpec::checkerboard(args.instances, args.features, rows, cols, args.gap, args.noise, args.seed)
    };
    spec.map_err(|e| CliError::Usage(e.to_string()))
}

pub fn run_synth(args: &SynthArgs) -> CliResult<()> {
    let spec = synth_spec(args)?;
    let planted = generate_planted(&spec)?;
    let options = LoadOptions::default();
    match &args.out {
        None => {
            let stdout = io::stdout();
            write_table(&planted.matrix, options, stdout.lock())
        }
        Some(dir) => {
            create_dir(dir)?;
            write_file(&dir.join("data.csv"), |w| write_table(&planted.matrix, options, w))?;
            write_file(&dir.join("feature_truth.csv"), |w| {
                writeln!(w, "feature_id,block").and_then(|_| {
                    planted
                        .feature_labels
                        .iter()
                        .enumerate()
                        .try_for_each(|(j, b)| writeln!(w, "{},{b}", planted.matrix.feature_label(j)))
                })
                .map_err(|e| CliError::Pipeline(e.into()))
            })?;
            write_file(&dir.join("instance_truth.csv"), |w| {
                writeln!(w, "instance_index,block").and_then(|_| {
                    planted
                        .instance_labels
                        .iter()
                        .enumerate()
                        .try_for_each(|(i, b)| writeln!(w, "{i},{b}"))
                })
                .map_err(|e| CliError::Pipeline(e.into()))
            })
        }
    }
}

/// `a..b` (inclusive) or `a,b,c`.
pub fn parse_seeds(spec: &str) -> CliResult<Vec<u64>> {
    let bad = || CliError::Usage(format!("invalid seed list {spec:?}"));
    let seeds: Vec<u64> = if let Some((a, b)) = spec.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<CliResult<_>>()?
    };
    if seeds.len() < 2 {
        return Err(CliError::Usage("bench needs at least two seeds".into()));
    }
    Ok(seeds)
}

fn read_truth(path: &Path, data: &DesignMatrix) -> CliResult<Vec<usize>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Input {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut labels = vec![None; data.n_features()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Format(e.to_string()))?;
        let (id, block) = match (rec.get(0), rec.get(1)) {
            (Some(i), Some(b)) => (i, b),
            _ => return Err(CliError::Format("truth rows need feature_id,block".into())),
        };
        let j = (0..data.n_features())
            .find(|&j| data.feature_label(j) == id)
            .ok_or_else(|| CliError::Validation(format!("truth names unknown feature {id:?}")))?;
        labels[j] = Some(block.parse().map_err(|_| CliError::Format(format!("bad block label {block:?}")))?);
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(j, l)| l.ok_or_else(|| CliError::Validation(format!("feature {} has no truth label", data.feature_label(j)))))
        .collect()
}

pub fn run_bench(args: &BenchArgs) -> CliResult<()> {
    let settings = args.pipeline.settings(Vec::new())?;
    let seeds = parse_seeds(&args.seeds)?;
    let data = load_csv(&args.input.input, args.input.options()?)?;
    data.ensure_clusterable()?;
    let truth = args.truth.as_deref().map(|p| read_truth(p, &data)).transpose()?;

    let report = with_threads(settings.threads, || {
        repeatability_trial(&data, &settings.ppp, &seeds, truth.as_deref())
    })??;

    create_dir(&args.out)?;
    write_file(&args.out.join("report.json"), |w| Ok(report.write_json(w)?))?;
    write_file(&args.out.join("per_seed.csv"), |w| Ok(report.write_per_seed_csv(w)?))?;
    println!("seeds: {}", seeds.len());
    println!("modal root split frequency: {:.2}", report.modal_frequency);
    println!("mean pairwise leaf ARI: {:.3}", report.mean_leaf_ari);
    println!("unsplit roots: {}", report.unsplittable_roots);
    Ok(())
}

pub fn run_cut(args: &CutArgs) -> CliResult<()> {
    let file = File::open(&args.tree).map_err(|e| CliError::Input {
        path: args.tree.clone(),
        reason: e.to_string(),
    })?;
    let doc = TreeDocument::read_json(io::BufReader::new(file)).map_err(|e| CliError::Format(e.to_string()))?;
    let target = if args.leaves { CutTarget::Leaves } else { cut_target(args.cut_depth) };
    let clusters = cut_tree(&doc.root, target)?;
    let covered: usize = clusters.iter().map(Vec::len).sum();
    if covered != doc.n_features || doc.root.feature_indices().len() != doc.n_features {
        return Err(CliError::Validation("tree does not cover its feature universe".into()));
    }
    match &args.out {
        Some(path) => write_file(path, |w| Ok(write_assignment_csv(&clusters, &doc.feature_ids, w)?)),
        None => Ok(write_assignment_csv(&clusters, &doc.feature_ids, io::stdout().lock())?),
    }
}
