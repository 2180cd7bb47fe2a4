//! Command-line front end: crop, split, train, eval, annotate, inspect and
//! gradcheck.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 failed gradient check.

pub mod config;

use std::collections::HashMap;
use std::ffi::OsString;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use stormchip::augment::substream;
use stormchip::datapipe::{
    self, crop_candidates, dedup_and_filter, read_exclusions, rebase_chip_paths, select_split, ChipDataset,
    ChipRecord, Split,
};
use stormchip::metrics;
use stormchip::network::{
    build_logistic_head, build_paper_net_variant, build_vgg16_shaped_variant, compose_feature_head,
    conv_stage_layers, dead_filter_report, export_activation_maps, gradcheck, Mode, Network,
};
use stormchip::optim::{self, Dataset, InMemoryDataset};
use stormchip::persist::{load_checkpoint, save_checkpoint, write_annotations};
use stormchip::tensor::{resize_bilinear, Tensor};
use stormchip::{Error, Result};

pub use config::{ModelKind, RunConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

const PREDICT_BATCH: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "stormchip", version, about = "Building-damage annotation from satellite imagery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop chips around building coordinates and write a manifest.
    Crop(CropArgs),
    /// Assign train/val/test splits to a manifest.
    Split(SplitArgs),
    /// Train a model on the train split, validating on val.
    Train(TrainArgs),
    /// Score a split and report accuracy, AUC and misclassifications.
    Eval(EvalArgs),
    /// Crop and score buildings, writing damage annotations.
    Annotate(AnnotateArgs),
    /// Export feature maps and dead-filter counts for one chip.
    Inspect(InspectArgs),
    /// Run the finite-difference gradient check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration file (key = value lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CropArgs {
    #[arg(long)]
    pub strips: PathBuf,
    #[arg(long)]
    pub buildings: PathBuf,
    /// Window extent in pixels.
    #[arg(long)]
    pub window: Option<usize>,
    /// Operator exclusion list, one building id per line.
    #[arg(long)]
    pub exclusions: Option<PathBuf>,
    /// Output directory for `manifest.csv` and `chips/`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Manifest to write; must differ from the input.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for `model.ckpt`, `last.ckpt` and `history.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// cnn, lr or vgg16.
    #[arg(long)]
    pub model: Option<String>,
    /// Trained checkpoint whose features feed the `lr` model.
    #[arg(long)]
    pub features_from: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// train, val, test_balanced or test_unbalanced.
    #[arg(long, default_value = "test_balanced")]
    pub split: String,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output directory for `report.txt`, `roc.csv` and `misclassified.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `id,lon,lat[,label]` sites to annotate.
    #[arg(long)]
    pub buildings: PathBuf,
    #[arg(long)]
    pub strips: PathBuf,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub exclusions: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Annotation CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub chip: PathBuf,
    /// Convolution stages to export, 1-based and comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub layers: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub seeds_per_kind: usize,
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_DATA
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Crop(a) => cmd_crop(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Annotate(a) => cmd_annotate(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn resolve(args: &ConfigArgs, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    eprintln!("resolved configuration:");
    for (k, v) in cfg.entries() {
        eprintln!("  {k} = {v}");
    }
    Ok(cfg)
}

fn manifest_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn cmd_crop(a: CropArgs) -> Result<i32> {
    let cfg = resolve(&a.cfg, &[("window_px", a.window.map(|w| w.to_string()))])?;
    let buildings = datapipe::read_buildings(&a.buildings)?;
    let exclusions = a.exclusions.as_deref().map(read_exclusions).transpose()?;
    let rows = datapipe::build_manifest(&buildings, &a.strips, &a.out, &cfg.crop, exclusions.as_ref())?;
    let path = a.out.join("manifest.csv");
    datapipe::write_manifest(&rows, &path)?;
    let mut reasons: Vec<(String, usize)> = Vec::new();
    for r in rows.iter().filter_map(|r| r.exclude_reason) {
        match reasons.iter_mut().find(|(k, _)| k == r.as_str()) {
            Some((_, n)) => *n += 1,
            None => reasons.push((r.as_str().to_string(), 1)),
        }
    }
    let kept = rows.iter().filter(|r| !r.excluded()).count();
    println!("buildings={} kept={kept} excluded={}", rows.len(), rows.len() - kept);
    for (reason, n) in reasons {
        println!("  {reason}={n}");
    }
    println!("manifest={}", path.display());
    Ok(0)
}

fn cmd_split(a: SplitArgs) -> Result<i32> {
    let cfg = resolve(&a.cfg, &[("split_seed", a.seed.map(|s| s.to_string()))])?;
    let same = |p: &Path| std::path::absolute(p).ok();
    if same(&a.manifest) == same(&a.out) {
        return Err(Error::Usage("--out must differ from --manifest".into()));
    }
    let mut rows = datapipe::read_manifest(&a.manifest)?;
    let counts = datapipe::make_splits(&mut rows, &cfg.split)?;
    rebase_chip_paths(&mut rows, manifest_dir(&a.manifest), manifest_dir(&a.out))?;
    datapipe::write_manifest(&rows, &a.out)?;
    let pair = |c: [usize; 2]| format!("{}/{}", c[1], c[0]);
    println!("split (damaged/undamaged)");
    println!("  train={}", pair(counts.train));
    println!("  val={}", pair(counts.val));
    println!("  test_balanced={}", pair(counts.test_balanced));
    println!("  test_unbalanced={}", pair(counts.test_unbalanced));
    Ok(0)
}

fn chip_dataset(manifest: &Path, rows: &[ChipRecord], split: Split, shape: &[usize]) -> Result<ChipDataset> {
    let selected = select_split(rows, split);
    if selected.is_empty() {
        return Err(Error::Validation(format!("manifest has no rows in split {split}")));
    }
    let &[_, h, w] = shape else {
        return Err(Error::Usage(format!("network input {shape:?} is not an image")));
    };
    ChipDataset::new(&selected, manifest_dir(manifest), h, w)
}

fn build_model(cfg: &RunConfig) -> Result<Network<f32>> {
    let net = match cfg.model {
        ModelKind::Cnn => {
            if cfg.input_px != 150 {
                return Err(Error::Config(format!(
                    "the cnn model takes 150×150 input, got input_px = {}",
                    cfg.input_px
                )));
            }
            build_paper_net_variant(cfg.variant)
        }
        ModelKind::Vgg16 => build_vgg16_shaped_variant(&[3, cfg.input_px, cfg.input_px], cfg.variant)?,
        ModelKind::Lr => unreachable!("lr is built from a feature extractor"),
    };
    let mut net = net;
    net.init_xavier(&mut substream(cfg.train.seed, 0));
    Ok(net)
}

/// Eval-mode flatten features of every sample, as a rank-1 dataset.
fn feature_dataset(extractor: &Network<f32>, data: &ChipDataset) -> Result<InMemoryDataset<f32>> {
    let mut samples = Vec::with_capacity(Dataset::<f32>::len(data));
    let mut labels = Vec::with_capacity(samples.capacity());
    let indices: Vec<usize> = (0..Dataset::<f32>::len(data)).collect();
    for chunk in indices.chunks(PREDICT_BATCH) {
        let (x, y) = optim::load_batch::<f32>(data, chunk)?;
        let f = extractor.extract_features(&x)?;
        for i in 0..chunk.len() {
            samples.push(Tensor::from_vec(&f.shape()[1..], f.item(i).to_vec())?);
        }
        labels.extend_from_slice(y.data());
    }
    InMemoryDataset::new(samples, labels)
}

fn log_epoch(row: &optim::EpochRow) {
    eprintln!(
        "epoch {:>3}  train_loss={:.5} train_acc={:.4}  val_loss={:.5} val_acc={:.4}",
        row.epoch, row.train_loss, row.train_accuracy, row.val_loss, row.val_accuracy
    );
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let cfg = resolve(
        &a.cfg,
        &[
            ("model", a.model.clone()),
            ("epochs", a.epochs.map(|e| e.to_string())),
            ("seed", a.seed.map(|s| s.to_string())),
        ],
    )?;
    let train_cfg = cfg.train_config();
    let rows = datapipe::read_manifest(&a.manifest)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;

    let (final_net, best_net, outcome) = if cfg.model == ModelKind::Lr {
        let source = a
            .features_from
            .as_deref()
            .ok_or_else(|| Error::Usage("--model lr needs --features-from CKPT".into()))?;
        let extractor = load_checkpoint(source)?;
        let shape = extractor.input_shape().to_vec();
        let train = feature_dataset(&extractor, &chip_dataset(&a.manifest, &rows, Split::Train, &shape)?)?;
        let val = feature_dataset(&extractor, &chip_dataset(&a.manifest, &rows, Split::Val, &shape)?)?;
        let mut head = build_logistic_head::<f32>(train.sample_shape()[0]);
        head.init_xavier(&mut substream(cfg.train.seed, 0));
        let outcome = optim::fit_with(&mut head, &train, &val, &train_cfg, |row, _| {
            log_epoch(row);
            ControlFlow::Continue(())
        })?;
        let last = compose_feature_head(&extractor, &head)?;
        head.set_params(outcome.best_params.clone())?;
        let best = compose_feature_head(&extractor, &head)?;
        (last, best, outcome)
    } else {
        if a.features_from.is_some() {
            return Err(Error::Usage("--features-from only applies to --model lr".into()));
        }
        let mut net = build_model(&cfg)?;
        let shape = net.input_shape().to_vec();
        let train = chip_dataset(&a.manifest, &rows, Split::Train, &shape)?;
        let val = chip_dataset(&a.manifest, &rows, Split::Val, &shape)?;
        eprintln!(
            "training {} ({} parameters) on {} samples, validating on {}",
            cfg.model.as_str(),
            net.param_count(),
            Dataset::<f32>::len(&train),
            Dataset::<f32>::len(&val)
        );
        let outcome = optim::fit_with(&mut net, &train, &val, &train_cfg, |row, _| {
            log_epoch(row);
            ControlFlow::Continue(())
        })?;
        let mut best = net.clone();
        best.set_params(outcome.best_params.clone())?;
        (net, best, outcome)
    };

    eprintln!(
        "first training step: {:.3} s (batch {})",
        outcome.first_step.as_secs_f64(),
        train_cfg.batch_size
    );
    save_checkpoint(&final_net, &a.out.join("last.ckpt"))?;
    save_checkpoint(&best_net, &a.out.join("model.ckpt"))?;
    outcome.history.write_csv(&a.out.join("history.csv"))?;
    let best_row = &outcome.history.rows[outcome.best_epoch - 1];
    println!(
        "best_epoch={} val_acc={:.4} checkpoint={}",
        outcome.best_epoch,
        best_row.val_accuracy,
        a.out.join("model.ckpt").display()
    );
    Ok(0)
}

/// Damaged probabilities for every sample of `data`, in order.
pub fn score_dataset(net: &Network<f32>, data: &ChipDataset) -> Result<Vec<f64>> {
    let n = Dataset::<f32>::len(data);
    let indices: Vec<usize> = (0..n).collect();
    let mut scores = Vec::with_capacity(n);
    for chunk in indices.chunks(PREDICT_BATCH) {
        let (x, _) = optim::load_batch::<f32>(data, chunk)?;
        scores.extend(net.predict(&x)?.data().iter().map(|&p| p as f64));
    }
    Ok(scores)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let cfg = resolve(&a.cfg, &[("threshold", a.threshold.map(|t| t.to_string()))])?;
    let split: Split = a.split.parse().map_err(|e: Error| Error::Usage(e.to_string()))?;
    if split == Split::None {
        return Err(Error::Usage("--split none is not an evaluation set".into()));
    }
    let net = load_checkpoint(&a.ckpt)?;
    let rows = datapipe::read_manifest(&a.manifest)?;
    let selected = select_split(&rows, split);
    let data = chip_dataset(&a.manifest, &rows, split, net.input_shape())?;
    let scores = score_dataset(&net, &data)?;
    let labels = data.labels();
    let report = metrics::evaluate(&scores, labels, cfg.threshold)?;

    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    report.write_files(&a.out.join("report.txt"), &a.out.join("roc.csv"))?;
    let ids: Vec<String> = selected.iter().map(|r| r.id.clone()).collect();
    let wrong = metrics::misclassification_export(&ids, labels, &scores, cfg.threshold)?;
    let path = a.out.join("misclassified.csv");
    std::fs::write(&path, metrics::misclassification_csv(&wrong)).map_err(|e| Error::Io { path, source: e })?;

    let c = &report.confusion;
    println!("split={split} n={} damaged={} undamaged={}", scores.len(), c.n_pos, c.n_neg);
    println!("accuracy={:.4}", c.accuracy);
    match report.auc() {
        Some(auc) => println!("auc={auc:.4}"),
        None => println!("auc=undefined"),
    }
    Ok(0)
}

fn cmd_annotate(a: AnnotateArgs) -> Result<i32> {
    let cfg = resolve(
        &a.cfg,
        &[
            ("window_px", a.window.map(|w| w.to_string())),
            ("threshold", a.threshold.map(|t| t.to_string())),
        ],
    )?;
    let net = load_checkpoint(&a.ckpt)?;
    let &[_, h, w] = net.input_shape() else {
        return Err(Error::Usage(format!("network input {:?} is not an image", net.input_shape())));
    };
    let sites = datapipe::read_sites(&a.buildings)?;
    let exclusions = a.exclusions.as_deref().map(read_exclusions).transpose()?;

    let mut scores: HashMap<usize, f64> = HashMap::new();
    let mut pending: Vec<(usize, Tensor<f32>)> = Vec::new();
    let flush = |pending: &mut Vec<(usize, Tensor<f32>)>, scores: &mut HashMap<usize, f64>| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let items: Vec<Tensor<f32>> = pending.iter().map(|(_, t)| t.clone()).collect();
        let p = net.predict(&Tensor::stack(&items)?)?;
        for ((i, _), &v) in pending.iter().zip(p.data()) {
            scores.insert(*i, v as f64);
        }
        pending.clear();
        Ok(())
    };
    let candidates = crop_candidates(&sites, &a.strips, &cfg.crop, |i, chip| {
        pending.push((i, resize_bilinear(chip, h, w)?));
        if pending.len() == PREDICT_BATCH {
            flush(&mut pending, &mut scores)?;
        }
        Ok(())
    })?;
    flush(&mut pending, &mut scores)?;

    let rows = dedup_and_filter(&sites, &candidates, cfg.crop.window_px, &cfg.crop.thresholds, exclusions.as_ref())?;
    let index: HashMap<&str, usize> = sites.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let kept: Vec<&ChipRecord> = rows.iter().filter(|r| !r.excluded()).collect();
    let kept_scores: Vec<f64> = kept.iter().map(|r| scores[&index[r.id.as_str()]]).collect();
    write_annotations(&kept, &kept_scores, cfg.threshold, &a.out)?;
    let damaged = kept_scores.iter().filter(|&&s| s >= cfg.threshold).count();
    println!(
        "sites={} annotated={} damaged={damaged} skipped={}",
        sites.len(),
        kept.len(),
        sites.len() - kept.len()
    );
    Ok(0)
}

fn cmd_inspect(a: InspectArgs) -> Result<i32> {
    let net = load_checkpoint(&a.ckpt)?;
    let &[_, h, w] = net.input_shape() else {
        return Err(Error::Usage(format!("network input {:?} is not an image", net.input_shape())));
    };
    let chip = resize_bilinear(&datapipe::load_image(&a.chip)?, h, w)?;
    let batch = Tensor::stack(&[chip])?;
    let stage_layers = conv_stage_layers(&net);
    let deepest = a
        .layers
        .iter()
        .map(|&s| {
            s.checked_sub(1)
                .and_then(|k| stage_layers.get(k))
                .copied()
                .ok_or_else(|| Error::Usage(format!("convolution stage {s} does not exist (network has {})", stage_layers.len())))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .ok_or_else(|| Error::Usage("--layers is empty".into()))?;
    let pass = net.forward_prefix(&batch, deepest + 1, Mode::Eval)?;
    let written = export_activation_maps(&net, &pass, &a.layers, 0, &a.out)?;
    for &stage in &a.layers {
        let r = dead_filter_report(&net, &pass, stage_layers[stage - 1])?;
        println!("layer {stage}: dead_filters={}/{} ({:.1}%)", r.dead, r.total, 100.0 * r.fraction);
    }
    println!("maps={} dir={}", written.len(), a.out.display());
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    if a.seeds_per_kind == 0 {
        return Err(Error::Usage("--seeds-per-kind must be at least 1".into()));
    }
    let report = gradcheck::run_suite(a.seed, a.seeds_per_kind);
    println!("{report}");
    Ok(if report.passed() { 0 } else { EXIT_NUMERIC })
}
