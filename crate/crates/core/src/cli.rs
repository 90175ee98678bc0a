//! Command-line surface. Every flag overrides one key of the [`RunConfig`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::crnet::{remove_shadow, CrNet};
use crate::data_io::{
    filter_by_manifest, images_by_stem, load_image, load_mask, load_triplets, read_manifest, save_image, save_plane,
    scan_dataset, Triplet,
};
use crate::error::{Error, Result, UnpairedFile};
use crate::lrnet::LrNet;
use crate::mask_refine::MaskRefiner;
use crate::metrics::{evaluate, RegionReport};
use crate::params::{config_hash, ParamStore};
use crate::shadow_model::{color_bias_analysis, generate_dataset};
use crate::training::pool::CheckpointPool;
use crate::training::run::{ColorLossSpace, LOSS_COLUMNS, MASK_COLUMNS};
use crate::training::{train_crnet, train_lrnet, train_maskrefine, LumaSource, MetricsLog, Sample};

/// Environment variable fixing the worker-thread count (ignored with `--deterministic`).
pub const WORKERS_ENV: &str = "SHADOWHACK_NUM_WORKERS";

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const LRNET_ARCHIVE: &str = "lrnet.bin";
pub const CRNET_ARCHIVE: &str = "crnet.bin";
pub const MASK_ARCHIVE: &str = "maskrefine.bin";
pub const REPORT_TSV: &str = "report.tsv";
pub const REPORT_JSON: &str = "report.json";
pub const BIAS_TSV: &str = "bias.tsv";
pub const BIAS_JSON: &str = "bias.json";
pub const BIAS_PLOT: &str = "bias.png";
/// Subdirectory of the inference output holding refined masks.
pub const REFINED_MASK_DIR: &str = "refined_mask";

#[derive(Debug, Parser)]
#[command(name = "shadowhack", version, about = "Shadow removal by luminance/chroma decoupling")]
pub struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `deterministic`: single worker thread, bit-reproducible output.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    SynthGen {
        /// `synth.count`
        #[arg(long)]
        n: Option<usize>,
        /// `synth.size`
        #[arg(long)]
        size: Option<usize>,
        /// `synth.degradation.noise_std`
        #[arg(long)]
        noise: Option<f64>,
        /// `synth.degradation.blur_radius`
        #[arg(long)]
        blur: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the luminance network and collect its snapshot pool.
    TrainLrnet(TrainArgs),
    /// Train the color network against a luminance run.
    TrainCrnet {
        #[command(flatten)]
        train: TrainArgs,
        /// Run directory of `train-lrnet`.
        #[arg(long)]
        lrnet_run: PathBuf,
        /// `train.ensemble = false`
        #[arg(long)]
        no_ensemble: bool,
        /// `train.color_loss` (rgb or chroma)
        #[arg(long)]
        color_loss: Option<ColorLossSpace>,
        /// `train.color_encoder_archive`
        #[arg(long)]
        color_encoder: Option<PathBuf>,
    },
    /// Train the mask refiner on corrupted masks.
    TrainMaskrefine(TrainArgs),
    /// Remove shadows from images.
    Infer {
        /// Image file or directory.
        #[arg(long)]
        input: PathBuf,
        /// Mask file or directory (paired with inputs by file stem).
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        lr_weights: PathBuf,
        #[arg(long)]
        cr_weights: PathBuf,
        /// Pass masks through the mask refiner first.
        #[arg(long, requires = "mask_weights")]
        refine_mask: bool,
        #[arg(long)]
        mask_weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a dataset's ground truth.
    Eval {
        /// Directory of predictions named by sample id.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset root with `gt/` and `mask/`.
        #[arg(long)]
        data: PathBuf,
        /// Directory for the report files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram the reflectance bias between shadow and shadow-free images.
    AnalyzeBias {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `bias.bins`
        #[arg(long)]
        bins: Option<usize>,
        /// `bias.range`
        #[arg(long)]
        range: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Output run directory.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Restrict the dataset to the ids listed in this file.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// `train.optimizer.total_steps`
    #[arg(long)]
    pub steps: Option<usize>,
    /// `train.optimizer.crop`
    #[arg(long)]
    pub crop: Option<usize>,
    /// `train.optimizer.batch_size`
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `train.optimizer.lr_start`
    #[arg(long)]
    pub lr: Option<f64>,
    /// `train.perceptual_weight`
    #[arg(long)]
    pub perceptual_weight: Option<f64>,
    /// `train.perceptual_archive`
    #[arg(long)]
    pub perceptual_weights: Option<PathBuf>,
    /// `train.snapshots`
    #[arg(long)]
    pub snapshots: Option<usize>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let o = &mut cfg.train.optimizer;
        set(&mut o.total_steps, self.steps);
        set(&mut o.crop, self.crop);
        set(&mut o.batch_size, self.batch_size);
        set(&mut o.lr_start, self.lr);
        set(&mut cfg.train.perceptual_weight, self.perceptual_weight);
        set(&mut cfg.train.snapshots, self.snapshots);
        if self.perceptual_weights.is_some() {
            cfg.train.perceptual_archive = self.perceptual_weights.clone();
        }
    }
}

fn set<T: Clone>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Loads the config file (if any) and applies every flag.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    cfg.deterministic |= cli.deterministic;
    match &cli.command {
        Command::SynthGen { n, size, noise, blur, .. } => {
            set(&mut cfg.synth.count, *n);
            set(&mut cfg.synth.size, *size);
            set(&mut cfg.synth.degradation.noise_std, *noise);
            set(&mut cfg.synth.degradation.blur_radius, *blur);
        }
        Command::TrainLrnet(a) | Command::TrainMaskrefine(a) => a.apply(&mut cfg),
        Command::TrainCrnet {
            train,
            no_ensemble,
            color_loss,
            color_encoder,
            ..
        } => {
            train.apply(&mut cfg);
            cfg.train.ensemble &= !no_ensemble;
            set(&mut cfg.train.color_loss, *color_loss);
            if color_encoder.is_some() {
                cfg.train.color_encoder_archive = color_encoder.clone();
            }
        }
        Command::AnalyzeBias { bins, range, .. } => {
            set(&mut cfg.bias.bins, *bins);
            set(&mut cfg.bias.range, *range);
        }
        Command::Infer { .. } | Command::Eval { .. } => {}
    }
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads(cfg: &RunConfig) -> Result<()> {
    let workers = if cfg.deterministic {
        Some(1)
    } else {
        match std::env::var(WORKERS_ENV) {
            Ok(v) => Some(
                v.parse::<usize>()
                    .ok()
                    .filter(|n| *n >= 1)
                    .ok_or_else(|| Error::validation(format!("{WORKERS_ENV}=`{v}` is not a positive integer")))?,
            ),
            Err(_) => None,
        }
    };
    if let Some(n) = workers {
        // a pool may already exist when commands run in-process; its size then stands
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    configure_threads(&cfg)?;
    match &cli.command {
        Command::SynthGen { out, .. } => cmd_synth_gen(&cfg, out),
        Command::TrainLrnet(a) => cmd_train_lrnet(&cfg, a),
        Command::TrainCrnet { train, lrnet_run, .. } => cmd_train_crnet(&cfg, train, lrnet_run),
        Command::TrainMaskrefine(a) => cmd_train_maskrefine(&cfg, a),
        Command::Infer {
            input,
            mask,
            lr_weights,
            cr_weights,
            refine_mask,
            mask_weights,
            out,
        } => cmd_infer(
            &cfg,
            &InferPaths {
                input,
                mask,
                lr_weights,
                cr_weights,
                mask_weights: mask_weights.as_deref().filter(|_| *refine_mask),
                out,
            },
        ),
        Command::Eval { pred, data, out } => cmd_eval(&cfg, pred, data, out.as_deref()),
        Command::AnalyzeBias { data, out, .. } => cmd_analyze_bias(&cfg, data, out),
    }
}

fn hex(hash: u64) -> String {
    format!("{hash:016x}")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::validation(e.to_string()))?;
    text.push('\n');
    write(path, &text)
}

pub fn cmd_synth_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = &cfg.synth;
    let triplets = generate_dataset(s.count, (s.size, s.size), &s.degradation, &s.scene, cfg.seed, out)?;
    println!("wrote {} triplets ({}x{}) to {}", triplets.len(), s.size, s.size, out.display());
    Ok(())
}

fn load_samples(data: &Path, manifest: Option<&Path>) -> Result<Vec<Sample>> {
    let mut paths = scan_dataset(data)?;
    if let Some(m) = manifest {
        paths = filter_by_manifest(paths, &read_manifest(m)?)?;
    }
    if paths.is_empty() {
        return Err(Error::NoSamples(format!("no samples under {}", data.display())));
    }
    load_triplets(&paths)?.into_iter().map(Sample::try_from).collect()
}

#[derive(Serialize)]
struct RunSummary {
    command: &'static str,
    config_hash: String,
    model_hash: String,
    steps: usize,
    first_loss: f64,
    final_loss: f64,
    snapshots: Vec<u64>,
}

/// Creates the run directory and stores the resolved config in it.
fn start_run(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut text = format!("# config hash {}\n", hex(cfg.hash()));
    text.push_str(&cfg.to_toml()?);
    write(&dir.join(CONFIG_FILE), &text)
}

fn finish_run(
    cfg: &RunConfig,
    dir: &Path,
    command: &'static str,
    model_hash: u64,
    log: &MetricsLog,
    snapshots: Vec<u64>,
) -> Result<()> {
    let losses = log.losses();
    let summary = RunSummary {
        command,
        config_hash: hex(cfg.hash()),
        model_hash: hex(model_hash),
        steps: losses.len(),
        first_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        snapshots,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    println!(
        "{command}: {} steps, loss {:.6} -> {:.6}, run dir {}",
        summary.steps,
        summary.first_loss,
        summary.final_loss,
        dir.display()
    );
    Ok(())
}

/// File name of the snapshot taken after `step`.
pub fn snapshot_name(step: u64) -> String {
    format!("lrnet_step{step:06}.bin")
}

pub fn cmd_train_lrnet(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let data = load_samples(&args.data, args.manifest.as_deref())?;
    let dir = &args.run_dir;
    start_run(cfg, dir)?;
    let mut log = MetricsLog::create(&dir.join(METRICS_FILE), &LOSS_COLUMNS)?;
    let (store, pool) = train_lrnet(&data, &cfg.lrnet, &cfg.train, &mut log)?;
    let hash = config_hash(&cfg.lrnet);
    store.save(&dir.join(LRNET_ARCHIVE), hash)?;
    let snap_dir = dir.join(SNAPSHOT_DIR);
    create_dir(&snap_dir)?;
    for s in pool.snapshots() {
        s.weights.save(&snap_dir.join(snapshot_name(s.step)), hash)?;
    }
    finish_run(cfg, dir, "train-lrnet", hash, &log, pool.steps())
}

/// Loads an archive, checking it was written for `hash`.
fn load_weights(path: &Path, hash: u64, what: &str) -> Result<ParamStore> {
    let (header, store) = ParamStore::load(path, DType::F32)?;
    if header.config_hash != hash {
        return Err(Error::validation(format!(
            "{} was trained with a different {what} configuration (hash {} vs {})",
            path.display(),
            hex(header.config_hash),
            hex(hash)
        )));
    }
    Ok(store)
}

/// Final weights and snapshot pool of a luminance run directory.
pub fn load_lrnet_run(dir: &Path, cfg: &RunConfig) -> Result<(ParamStore, CheckpointPool)> {
    let hash = config_hash(&cfg.lrnet);
    let weights = load_weights(&dir.join(LRNET_ARCHIVE), hash, "lrnet")?;
    let snap_dir = dir.join(SNAPSHOT_DIR);
    let mut names: Vec<PathBuf> = match fs::read_dir(&snap_dir) {
        Ok(entries) => entries
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&snap_dir, err)))
            .collect::<Result<_>>()?,
        Err(_) => Vec::new(),
    };
    names.retain(|p| p.extension().is_some_and(|e| e == "bin"));
    names.sort();
    let mut pool = CheckpointPool::new();
    for p in names {
        let (header, store) = ParamStore::load(&p, DType::F32)?;
        if header.config_hash != hash {
            return Err(Error::validation(format!("{} has a different lrnet configuration", p.display())));
        }
        let mut store = store;
        store.set_step(header.step);
        pool.push(&store)?;
    }
    Ok((weights, pool))
}

pub fn cmd_train_crnet(cfg: &RunConfig, args: &TrainArgs, lrnet_run: &Path) -> Result<()> {
    let data = load_samples(&args.data, args.manifest.as_deref())?;
    let (weights, pool) = load_lrnet_run(lrnet_run, cfg)?;
    if cfg.train.ensemble && pool.is_empty() {
        return Err(Error::validation(format!(
            "{} holds no snapshots; rerun train-lrnet or pass --no-ensemble",
            lrnet_run.display()
        )));
    }
    let dir = &args.run_dir;
    start_run(cfg, dir)?;
    let mut log = MetricsLog::create(&dir.join(METRICS_FILE), &LOSS_COLUMNS)?;
    let source = LumaSource {
        config: &cfg.lrnet,
        weights: &weights,
        pool: &pool,
    };
    let store = train_crnet(&data, &source, &cfg.crnet, &cfg.train, &mut log)?;
    let hash = config_hash(&cfg.crnet);
    store.save(&dir.join(CRNET_ARCHIVE), hash)?;
    finish_run(cfg, dir, "train-crnet", hash, &log, pool.steps())
}

pub fn cmd_train_maskrefine(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let data = load_samples(&args.data, args.manifest.as_deref())?;
    let dir = &args.run_dir;
    start_run(cfg, dir)?;
    let mut log = MetricsLog::create(&dir.join(METRICS_FILE), &MASK_COLUMNS)?;
    let store = train_maskrefine(&data, &cfg.mask_refine, &cfg.train, &mut log)?;
    let hash = config_hash(&cfg.mask_refine);
    store.save(&dir.join(MASK_ARCHIVE), hash)?;
    finish_run(cfg, dir, "train-maskrefine", hash, &log, Vec::new())
}

/// Files of `path` keyed by stem: the file itself, or the images of a directory.
fn files_by_stem(path: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if path.is_dir() {
        return images_by_stem(path);
    }
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::validation(format!("{} has no usable file name", path.display())))?;
    Ok(BTreeMap::from([(stem.to_owned(), path.to_path_buf())]))
}

/// Pairs two stem maps; a single file on each side pairs regardless of names.
fn pair(
    left: BTreeMap<String, PathBuf>,
    right: BTreeMap<String, PathBuf>,
    missing_right: &'static str,
    missing_left: &'static str,
) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if left.len() == 1 && right.len() == 1 {
        let (id, a) = left.into_iter().next().expect("one entry");
        let (_, b) = right.into_iter().next().expect("one entry");
        return Ok(vec![(id, a, b)]);
    }
    let mut unpaired: Vec<UnpairedFile> = left
        .iter()
        .filter(|(id, _)| !right.contains_key(*id))
        .map(|(_, p)| UnpairedFile {
            path: p.clone(),
            missing: missing_right,
        })
        .collect();
    unpaired.extend(right.iter().filter(|(id, _)| !left.contains_key(*id)).map(|(_, p)| UnpairedFile {
        path: p.clone(),
        missing: missing_left,
    }));
    if !unpaired.is_empty() {
        return Err(Error::Unpaired(unpaired));
    }
    Ok(left
        .into_iter()
        .map(|(id, a)| {
            let b = right[&id].clone();
            (id, a, b)
        })
        .collect())
}

pub struct InferPaths<'a> {
    pub input: &'a Path,
    pub mask: &'a Path,
    pub lr_weights: &'a Path,
    pub cr_weights: &'a Path,
    /// Mask-refiner weights; masks are refined when present.
    pub mask_weights: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn cmd_infer(cfg: &RunConfig, paths: &InferPaths) -> Result<()> {
    let pairs = pair(files_by_stem(paths.input)?, files_by_stem(paths.mask)?, "mask", "input")?;
    if pairs.is_empty() {
        return Err(Error::NoSamples(format!("no images under {}", paths.input.display())));
    }
    let lr_store = load_weights(paths.lr_weights, config_hash(&cfg.lrnet), "lrnet")?;
    let cr_store = load_weights(paths.cr_weights, config_hash(&cfg.crnet), "crnet")?;
    let lrnet = LrNet::new(&cfg.lrnet, &lr_store.frozen_view())?;
    let crnet = CrNet::new(&cfg.crnet, &cr_store.frozen_view())?;
    let refiner = match paths.mask_weights {
        Some(p) => {
            let store = load_weights(p, config_hash(&cfg.mask_refine), "mask_refine")?;
            Some(MaskRefiner::new(&cfg.mask_refine, &store.frozen_view())?)
        }
        None => None,
    };
    create_dir(paths.out)?;
    if refiner.is_some() {
        create_dir(&paths.out.join(REFINED_MASK_DIR))?;
    }
    for (id, input, mask) in &pairs {
        let img = load_image(input)?;
        let mut m = load_mask(mask)?;
        if let Some(r) = &refiner {
            m = r.refine(&img, &m)?.threshold(0.5);
            save_plane(&paths.out.join(REFINED_MASK_DIR).join(format!("{id}.png")), &m)?;
        }
        let out = remove_shadow(&img, &m, &lrnet, &crnet)?;
        save_image(&paths.out.join(format!("{id}.png")), &out)?;
    }
    println!("wrote {} images to {}", pairs.len(), paths.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    config_hash: String,
    images: usize,
    mean: RegionReport,
    per_image: BTreeMap<String, RegionReport>,
}

/// Per-image reports, keyed by id, of the predictions under `pred` against `data`.
pub fn evaluate_dir(pred: &Path, data: &Path) -> Result<BTreeMap<String, RegionReport>> {
    let samples = scan_dataset(data)?;
    let with_gt: BTreeMap<String, (PathBuf, PathBuf)> = samples
        .into_iter()
        .filter_map(|s| s.gt.map(|gt| (s.id, (gt, s.mask))))
        .collect();
    if with_gt.is_empty() {
        return Err(Error::NoSamples(format!("no ground truth under {}", data.display())));
    }
    let gts = with_gt.iter().map(|(id, (gt, _))| (id.clone(), gt.clone())).collect();
    let pairs = pair(images_by_stem(pred)?, gts, "ground truth", "prediction")?;
    pairs
        .into_iter()
        .map(|(id, p, gt)| {
            let report = evaluate(&load_image(&p)?, &load_image(&gt)?, &load_mask(&with_gt[&id].1)?)?;
            Ok((id, report))
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, pred: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let per_image = evaluate_dir(pred, data)?;
    let reports: Vec<RegionReport> = per_image.values().cloned().collect();
    let mean = RegionReport::mean(&reports)?;
    print!("{}", mean.to_table());
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join(REPORT_TSV), &mean.to_tsv())?;
        let report = EvalReport {
            config_hash: hex(cfg.hash()),
            images: reports.len(),
            mean,
            per_image,
        };
        write_json(&dir.join(REPORT_JSON), &report)?;
    }
    Ok(())
}

fn load_pairs(data: &Path) -> Result<Vec<Triplet>> {
    let paths = scan_dataset(data)?;
    if paths.is_empty() {
        return Err(Error::NoSamples(format!("no samples under {}", data.display())));
    }
    let triplets = load_triplets(&paths)?;
    if let Some(t) = triplets.iter().find(|t| t.gt.is_none()) {
        return Err(Error::validation(format!("sample `{}` has no shadow-free image", t.id)));
    }
    Ok(triplets)
}

pub fn cmd_analyze_bias(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let pairs: Vec<_> = load_pairs(data)?
        .into_iter()
        .map(|t| (t.shadow, t.gt.expect("checked"), t.mask))
        .collect();
    let report = color_bias_analysis(&pairs, &cfg.bias)?;
    create_dir(out)?;
    write(&out.join(BIAS_TSV), &report.to_tsv())?;
    write_json(&out.join(BIAS_JSON), &report)?;
    save_image(&out.join(BIAS_PLOT), &report.plot())?;
    println!(
        "{} shadow pixels; mean bias R {:+.4} G {:+.4} B {:+.4}",
        report.samples, report.mean[0], report.mean[1], report.mean[2]
    );
    Ok(())
}
