//! Subcommand implementations. Every command is deterministic under a fixed
//! config and seed: reruns produce byte-identical outputs.

use std::fs;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use latentcf::attack::{
    counterfactual_attack, render_trajectory, repair_misclassification, AttackConfig,
    CounterfactualTrace, OptimizerKind, VaePipeline,
};
use latentcf::attribution::{
    fit_attribute_models, global_scores, local_scores, resolve_diameters, top_k_report,
    Aggregation, AttributeModel, CounterfactualPair, GlobalOptions, Normalization,
};
use latentcf::data::{derive_attributes, load_idx, synth_digits, synth_manifold, write_idx, ImageDataset};
use latentcf::linear::{fit_direction, linear_counterfactual};
use latentcf::nets::{
    accuracy, classifier_train, vae_train, Activation, MlpSpec, TrainParams, VaeLossWeights,
};
use latentcf::tensor::Tensor;

use crate::checkpoint::{
    load_attribute_models, load_classifier, load_vae, parse_penalty, save_attribute_models,
    save_classifier, save_direction, save_vae,
};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pgm::export_grid;

#[derive(Parser)]
#[command(
    name = "latentcf",
    version,
    about = "Latent-space counterfactuals: train models, run attacks, score attributes"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as an IDX image/label pair
    GenData(GenDataArgs),
    /// Train the softmax MLP classifier
    TrainClassifier(TrainClassifierArgs),
    /// Train the VAE encoder/generator
    TrainVae(TrainVaeArgs),
    /// Fit GLM attribute models over the VAE latent space
    FitAttributes(FitAttributesArgs),
    /// Run a latent counterfactual attack on one image
    Attack(AttackArgs),
    /// Repair every misclassified input by ascending its true class to 0.5
    Repair(RepairArgs),
    /// Fit a logistic latent direction and apply closed-form edits
    Interfacegan(InterfaceganArgs),
    /// Local importance scores for original/counterfactual pairs
    LocalScores(LocalScoresArgs),
    /// Aggregate local scores into a global ranking
    GlobalScores(GlobalScoresArgs),
    /// Tile images from an IDX file into a PGM grid
    ExportGrid(ExportGridArgs),
}

#[derive(Args)]
struct IdxPair {
    /// IDX image file
    #[arg(long)]
    images: PathBuf,
    /// IDX label file
    #[arg(long)]
    labels: PathBuf,
}

impl IdxPair {
    fn load(&self) -> Result<ImageDataset> {
        Ok(load_idx(&self.images, &self.labels)?)
    }
}

#[derive(Args)]
struct ConfigArg {
    /// Key-value config file; explicit flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::from_file(path),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// digits | manifold
    #[arg(long, default_value = "digits")]
    kind: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Image side length for digits
    #[arg(long, default_value_t = 28)]
    side: usize,
    /// Latent dimension for the manifold kind
    #[arg(long, default_value_t = 8)]
    d_latent: usize,
    /// Pixel count for the manifold kind
    #[arg(long, default_value_t = 64)]
    image_dim: usize,
    #[arg(long)]
    out_images: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[command(flatten)]
    data: IdxPair,
    /// Held-out IDX image file for accuracy reporting
    #[arg(long)]
    eval_images: Option<PathBuf>,
    #[arg(long)]
    eval_labels: Option<PathBuf>,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Class count; inferred from the labels when omitted
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct TrainVaeArgs {
    #[command(flatten)]
    data: IdxPair,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    kl_weight: Option<f64>,
    #[arg(long)]
    l1_weight: Option<f64>,
    #[arg(long)]
    sobel_weight: Option<f64>,
}

#[derive(Args)]
struct FitAttributesArgs {
    #[command(flatten)]
    data: IdxPair,
    /// VAE checkpoint
    #[arg(long)]
    vae: PathBuf,
    /// Output checkpoint for the fitted attribute models
    #[arg(long)]
    out: PathBuf,
    /// Also write the derived attribute table as CSV
    #[arg(long)]
    table_out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
    /// none | ridge:<lambda> | lasso:<lambda>
    #[arg(long)]
    penalty: Option<String>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    vae: PathBuf,
    #[command(flatten)]
    data: IdxPair,
    /// Dataset index of the image to attack
    #[arg(long)]
    index: usize,
    /// Classifier output coordinate to push
    #[arg(long)]
    class_index: usize,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    target: Option<f64>,
    #[arg(long)]
    attack_lr: Option<f64>,
    /// adam | sgd
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    snapshot_stride: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct RepairArgs {
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    vae: PathBuf,
    #[command(flatten)]
    data: IdxPair,
    #[arg(long)]
    out_dir: PathBuf,
    /// Repair at most this many misclassified inputs
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    attack_lr: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    snapshot_stride: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct InterfaceganArgs {
    #[arg(long)]
    vae: PathBuf,
    #[command(flatten)]
    data: IdxPair,
    /// Binary derived attribute to fit the direction on (see fit-attributes)
    #[arg(long)]
    attribute: String,
    #[arg(long)]
    out_dir: PathBuf,
    /// Direction checkpoint path (default: <out-dir>/direction.ckpt)
    #[arg(long)]
    direction_out: Option<PathBuf>,
    /// Ridge strength for the logistic fit
    #[arg(long, default_value_t = 0.01)]
    ridge: f64,
    /// Target when the starting prediction is below 0.5
    #[arg(long, default_value_t = 0.75)]
    target_hi: f64,
    /// Target when the starting prediction is at or above 0.5
    #[arg(long, default_value_t = 0.25)]
    target_lo: f64,
    /// Edit at most this many images
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct PairFiles {
    #[arg(long)]
    originals_images: PathBuf,
    #[arg(long)]
    originals_labels: PathBuf,
    #[arg(long)]
    counterfactuals_images: PathBuf,
    #[arg(long)]
    counterfactuals_labels: PathBuf,
}

impl PairFiles {
    fn load(&self) -> Result<(ImageDataset, ImageDataset)> {
        let originals = load_idx(&self.originals_images, &self.originals_labels)?;
        let counterfactuals =
            load_idx(&self.counterfactuals_images, &self.counterfactuals_labels)?;
        if originals.n() != counterfactuals.n() {
            return Err(CliError::Usage(format!(
                "{} originals vs {} counterfactuals",
                originals.n(),
                counterfactuals.n()
            )));
        }
        Ok((originals, counterfactuals))
    }
}

#[derive(Args)]
struct LocalScoresArgs {
    #[arg(long)]
    vae: PathBuf,
    /// Attribute model checkpoint from fit-attributes
    #[arg(long)]
    attrs: PathBuf,
    #[command(flatten)]
    pairs: PairFiles,
    /// Score only this pair index
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GlobalScoresArgs {
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    attrs: PathBuf,
    #[command(flatten)]
    pairs: PairFiles,
    /// CSV of original model predictions (image_id,prediction)
    #[arg(long)]
    preds: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    /// signed | absolute
    #[arg(long)]
    mode: Option<String>,
    /// mean | sum
    #[arg(long)]
    normalize: Option<String>,
    /// Divide each image's scores by their absolute sum first
    #[arg(long)]
    per_image_renormalize: bool,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportGridArgs {
    #[command(flatten)]
    data: IdxPair,
    /// Comma-separated dataset indices; all images when omitted
    #[arg(long)]
    indices: Option<String>,
    #[arg(long, default_value_t = 8)]
    cols: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Parses argv and runs the chosen subcommand, translating errors to the
/// documented exit codes: 0 success, 1 usage, 2 runtime.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{err}");
                    0
                }
                _ => {
                    eprint!("{err}");
                    1
                }
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::TrainClassifier(args) => train_classifier(args),
        Command::TrainVae(args) => train_vae(args),
        Command::FitAttributes(args) => fit_attributes(args),
        Command::Attack(args) => attack(args),
        Command::Repair(args) => repair(args),
        Command::Interfacegan(args) => interfacegan(args),
        Command::LocalScores(args) => local_scores_cmd(args),
        Command::GlobalScores(args) => global_scores_cmd(args),
        Command::ExportGrid(args) => export_grid_cmd(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let ds = match args.kind.as_str() {
        "digits" => {
            if args.side < 3 {
                return Err(CliError::Usage("side must be at least 3".into()));
            }
            synth_digits(args.seed, args.n, args.side)
        }
        "manifold" => synth_manifold(args.seed, args.n, args.d_latent, args.image_dim)?.dataset,
        other => {
            return Err(CliError::Usage(format!(
                "unknown data kind '{other}' (expected digits or manifold)"
            )))
        }
    };
    write_idx(&ds, &args.out_images, &args.out_labels)?;
    println!(
        "wrote {} {}x{} images to {} / {}",
        ds.n(),
        ds.h,
        ds.w,
        args.out_images.display(),
        args.out_labels.display()
    );
    Ok(())
}

fn train_classifier(args: TrainClassifierArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.epochs = args.epochs.unwrap_or(cfg.epochs);
    cfg.learning_rate = args.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    cfg.hidden = args.hidden.unwrap_or(cfg.hidden);
    cfg.validate()?;

    let data = args.data.load()?;
    let classes = args
        .classes
        .unwrap_or_else(|| data.labels.iter().copied().max().unwrap_or(0) + 1)
        .max(2);
    let spec = MlpSpec::classifier(
        vec![data.image_len(), cfg.hidden, classes],
        Activation::Relu,
    )?;
    let hp = TrainParams {
        epochs: cfg.epochs,
        seed: cfg.seed,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
    };
    let (clf, log) = classifier_train(&data, &spec, &hp)?;
    println!(
        "trained classifier {} -> {} -> {classes} on {} images",
        data.image_len(),
        cfg.hidden,
        data.n()
    );
    for (i, loss) in log.epoch_losses.iter().enumerate() {
        println!("epoch {}: mean loss {loss:.6}", i + 1);
    }
    println!("train accuracy {:.4}", accuracy(&clf, &data)?);
    if let (Some(ei), Some(el)) = (&args.eval_images, &args.eval_labels) {
        let eval = load_idx(ei, el)?;
        println!("test accuracy {:.4}", accuracy(&clf, &eval)?);
    }
    save_classifier(&args.out, &clf)?;
    println!("saved checkpoint to {}", args.out.display());
    Ok(())
}

fn train_vae(args: TrainVaeArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.epochs = args.epochs.unwrap_or(cfg.epochs);
    cfg.learning_rate = args.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    cfg.hidden = args.hidden.unwrap_or(cfg.hidden);
    cfg.latent_dim = args.latent_dim.unwrap_or(cfg.latent_dim);
    cfg.kl_weight = args.kl_weight.unwrap_or(cfg.kl_weight);
    cfg.l1_weight = args.l1_weight.unwrap_or(cfg.l1_weight);
    cfg.sobel_weight = args.sobel_weight.unwrap_or(cfg.sobel_weight);
    cfg.validate()?;

    let data = args.data.load()?;
    let weights = VaeLossWeights {
        kl_weight: cfg.kl_weight,
        l1_weight: cfg.l1_weight,
        sobel_weight: cfg.sobel_weight,
    };
    let hp = TrainParams {
        epochs: cfg.epochs,
        seed: cfg.seed,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
    };
    let (vae, log) = vae_train(&data, cfg.latent_dim, cfg.hidden, &weights, &hp)?;
    println!(
        "trained VAE with latent dimension {} on {} images",
        cfg.latent_dim,
        data.n()
    );
    for (i, loss) in log.epoch_losses.iter().enumerate() {
        println!("epoch {}: mean loss {loss:.6}", i + 1);
    }
    save_vae(&args.out, &vae)?;
    println!("saved checkpoint to {}", args.out.display());
    Ok(())
}

fn fit_attributes(args: FitAttributesArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(p) = &args.penalty {
        cfg.penalty = parse_penalty(p)?;
    }
    cfg.validate()?;

    let data = args.data.load()?;
    let vae = load_vae(&args.vae)?;
    let table = derive_attributes(&data);

    if let Some(table_path) = &args.table_out {
        let mut out = String::from("image_id,attribute,value\n");
        for i in 0..table.n() {
            for (name, values) in table.iter() {
                out.push_str(&format!("{i},{name},{}\n", values[i]));
            }
        }
        fs::write(table_path, out)?;
        println!("wrote attribute table to {}", table_path.display());
    }

    let latents = vae.encode(&data.images_matrix())?;
    let fits = fit_attribute_models(&latents, &table, cfg.penalty)?;
    let mut models: Vec<AttributeModel> = Vec::with_capacity(fits.len());
    for fit in fits {
        println!(
            "fit {}: converged={} iterations={}{}",
            fit.model.spec.name,
            fit.converged,
            fit.iterations,
            if fit.sample_warning {
                " (sample smaller than recommended)"
            } else {
                ""
            }
        );
        models.push(fit.model);
    }
    resolve_diameters(&mut models, &data, &vae)?;
    save_attribute_models(&args.out, &models)?;
    println!("saved {} attribute models to {}", models.len(), args.out.display());
    Ok(())
}

fn attack_config(
    cfg: &RunConfig,
    target: Option<f64>,
    attack_lr: Option<f64>,
    optimizer: Option<&str>,
    max_iters: Option<usize>,
    snapshot_stride: Option<usize>,
) -> Result<AttackConfig> {
    let optimizer = match optimizer {
        Some(s) => OptimizerKind::parse(s).map_err(|e| CliError::Usage(e.to_string()))?,
        None => cfg.optimizer,
    };
    Ok(AttackConfig {
        target: target.unwrap_or(cfg.target),
        class_index: 0,
        learning_rate: attack_lr.unwrap_or(cfg.attack_lr),
        optimizer,
        max_iters: max_iters.unwrap_or(cfg.max_iters),
        snapshot_stride: snapshot_stride.unwrap_or(cfg.snapshot_stride),
        direction: None,
    })
}

fn write_trace_csv(path: &Path, trace: &CounterfactualTrace) -> Result<()> {
    let mut out = String::from("iteration,prediction\n");
    for (i, p) in trace.pred_path.iter().enumerate() {
        out.push_str(&format!("{i},{p}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_preds_csv(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from("image_id,prediction\n");
    for (id, p) in rows {
        out.push_str(&format!("{id},{p}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_pair_outputs(
    dir: &Path,
    originals: ImageDataset,
    counterfactuals: ImageDataset,
    preds: &[(usize, f64)],
) -> Result<()> {
    write_idx(
        &originals,
        dir.join("originals-images.idx"),
        dir.join("originals-labels.idx"),
    )?;
    write_idx(
        &counterfactuals,
        dir.join("counterfactuals-images.idx"),
        dir.join("counterfactuals-labels.idx"),
    )?;
    write_preds_csv(&dir.join("preds.csv"), preds)?;
    Ok(())
}

fn attack(args: AttackArgs) -> Result<()> {
    let cfg = args.config.load()?;
    cfg.validate()?;
    let acfg = AttackConfig {
        class_index: args.class_index,
        ..attack_config(
            &cfg,
            args.target,
            args.attack_lr,
            args.optimizer.as_deref(),
            args.max_iters,
            args.snapshot_stride,
        )?
    };
    acfg.validate()?;
    let frames = args.frames.unwrap_or(cfg.frames);
    if frames < 2 {
        return Err(CliError::Usage("frames must be at least 2".into()));
    }

    let data = args.data.load()?;
    if args.index >= data.n() {
        return Err(CliError::Usage(format!(
            "index {} out of range for {} images",
            args.index,
            data.n()
        )));
    }
    let classifier = load_classifier(&args.classifier)?;
    let vae = load_vae(&args.vae)?;
    fs::create_dir_all(&args.out_dir)?;

    let x = data.image(args.index);
    let trace = counterfactual_attack(&x, &classifier, &vae, &acfg)?;

    write_trace_csv(&args.out_dir.join("trace.csv"), &trace)?;
    let pipeline = VaePipeline {
        classifier: &classifier,
        vae: &vae,
    };
    let frames_imgs = render_trajectory(&trace, &pipeline, frames)?;
    export_grid(
        &frames_imgs,
        frames_imgs.len(),
        args.out_dir.join("frames.pgm"),
    )?;

    let label = data.labels[args.index];
    let originals = ImageDataset::new(data.h, data.w, x.values().to_vec(), vec![label])?;
    let counterfactuals = ImageDataset::new(
        data.h,
        data.w,
        trace.counterfactual_image.values().to_vec(),
        vec![label],
    )?;
    write_pair_outputs(
        &args.out_dir,
        originals,
        counterfactuals,
        &[(args.index, trace.pred_path[0])],
    )?;

    println!(
        "attack on image {} (class {}): {} after {} iterations, {:.6} -> {:.6}",
        args.index,
        args.class_index,
        if trace.converged { "converged" } else { "stopped" },
        trace.iterations(),
        trace.pred_path[0],
        trace.final_prediction()
    );
    Ok(())
}

fn repair(args: RepairArgs) -> Result<()> {
    let cfg = args.config.load()?;
    cfg.validate()?;
    let acfg = attack_config(
        &cfg,
        None,
        args.attack_lr,
        args.optimizer.as_deref(),
        args.max_iters,
        args.snapshot_stride,
    )?;
    let frames = args.frames.unwrap_or(cfg.frames);
    if frames < 2 {
        return Err(CliError::Usage("frames must be at least 2".into()));
    }

    let data = args.data.load()?;
    let classifier = load_classifier(&args.classifier)?;
    let vae = load_vae(&args.vae)?;
    fs::create_dir_all(&args.out_dir)?;
    let pipeline = VaePipeline {
        classifier: &classifier,
        vae: &vae,
    };

    let mut summary = String::from(
        "image_id,true_label,predicted_label,initial_prob,converged,iterations,final_prob\n",
    );
    let mut kept_pixels: Vec<f64> = Vec::new();
    let mut kept_cf_pixels: Vec<f64> = Vec::new();
    let mut kept_labels: Vec<usize> = Vec::new();
    let mut preds: Vec<(usize, f64)> = Vec::new();
    let mut misclassified = 0usize;
    let mut repaired = 0usize;
    let limit = args.limit.unwrap_or(usize::MAX);

    for i in 0..data.n() {
        if misclassified >= limit {
            break;
        }
        let x = data.image(i);
        let probs = classifier.predict_one(&x)?;
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let true_label = data.labels[i];
        if argmax == true_label {
            continue;
        }
        misclassified += 1;

        let trace = repair_misclassification(&x, true_label, &classifier, &vae, &acfg)?;
        summary.push_str(&format!(
            "{i},{true_label},{argmax},{},{},{},{}\n",
            trace.pred_path[0],
            trace.converged,
            trace.iterations(),
            trace.final_prediction()
        ));
        write_trace_csv(&args.out_dir.join(format!("trace-{i}.csv")), &trace)?;
        let frame_imgs = render_trajectory(&trace, &pipeline, frames)?;
        export_grid(
            &frame_imgs,
            frame_imgs.len(),
            args.out_dir.join(format!("frames-{i}.pgm")),
        )?;

        if trace.converged {
            repaired += 1;
            kept_pixels.extend_from_slice(x.values());
            kept_cf_pixels.extend_from_slice(trace.counterfactual_image.values());
            kept_labels.push(true_label);
            preds.push((i, trace.pred_path[0]));
        }
    }

    fs::write(args.out_dir.join("summary.csv"), summary)?;
    if !kept_labels.is_empty() {
        let originals = ImageDataset::new(data.h, data.w, kept_pixels, kept_labels.clone())?;
        let counterfactuals = ImageDataset::new(data.h, data.w, kept_cf_pixels, kept_labels)?;
        write_pair_outputs(&args.out_dir, originals, counterfactuals, &preds)?;
    }
    println!(
        "repaired {repaired} of {misclassified} misclassified images (cap {} iterations)",
        acfg.max_iters
    );
    Ok(())
}

fn interfacegan(args: InterfaceganArgs) -> Result<()> {
    for (name, t) in [("target-hi", args.target_hi), ("target-lo", args.target_lo)] {
        if !(t > 0.0 && t < 1.0) {
            return Err(CliError::Usage(format!(
                "{name} must lie in (0, 1), got {t}"
            )));
        }
    }
    let data = args.data.load()?;
    let vae = load_vae(&args.vae)?;
    let table = derive_attributes(&data);
    let column = table.column(&args.attribute).ok_or_else(|| {
        let known: Vec<&str> = table.attribute_names().collect();
        CliError::Usage(format!(
            "unknown attribute '{}'; derived attributes: {}",
            args.attribute,
            known.join(", ")
        ))
    })?;
    if !table.is_binary(&args.attribute) {
        return Err(CliError::Usage(format!(
            "attribute '{}' is not binary; use one of the *_hi attributes",
            args.attribute
        )));
    }

    let latents = vae.encode(&data.images_matrix())?;
    let d = vae.latent_dim;
    let dir = fit_direction(&latents, column, args.ridge, args.attribute.clone())?;
    fs::create_dir_all(&args.out_dir)?;
    let dir_path = args
        .direction_out
        .clone()
        .unwrap_or_else(|| args.out_dir.join("direction.ckpt"));
    save_direction(&dir_path, &dir)?;

    let count = args.limit.unwrap_or(data.n()).min(data.n());
    let mut edits = String::from("image_id,p_before,eta,p_after\n");
    let mut originals_px = Vec::new();
    let mut cf_px = Vec::new();
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    let mut before_imgs = Vec::new();
    let mut after_imgs = Vec::new();
    let mut skipped = 0usize;

    for i in 0..count {
        let z = &latents.values()[i * d..(i + 1) * d];
        let p = dir.predict(z);
        let target = if p < 0.5 { args.target_hi } else { args.target_lo };
        let (z_prime, eta) = match linear_counterfactual(z, target, &dir) {
            Ok(v) => v,
            Err(latentcf::Error::SaturatedPrediction { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let p_after = dir.predict(&z_prime);
        edits.push_str(&format!("{i},{p},{eta},{p_after}\n"));

        let x = data.image(i);
        let x_prime = vae.decode_image(&z_prime)?;
        originals_px.extend_from_slice(x.values());
        cf_px.extend_from_slice(x_prime.values());
        labels.push(column[i] as usize);
        preds.push((i, p));
        if before_imgs.len() < 16 {
            before_imgs.push(vae.decode_image(z)?);
            after_imgs.push(x_prime);
        }
    }

    fs::write(args.out_dir.join("edits.csv"), edits)?;
    if !labels.is_empty() {
        let originals = ImageDataset::new(data.h, data.w, originals_px, labels.clone())?;
        let counterfactuals = ImageDataset::new(data.h, data.w, cf_px, labels)?;
        write_pair_outputs(&args.out_dir, originals, counterfactuals, &preds)?;
    }
    if !before_imgs.is_empty() {
        let cols = before_imgs.len().min(8);
        export_grid(&before_imgs, cols, args.out_dir.join("before.pgm"))?;
        export_grid(&after_imgs, cols, args.out_dir.join("after.pgm"))?;
    }
    println!(
        "edited {} images along '{}' ({} skipped as saturated); direction saved to {}",
        preds.len(),
        args.attribute,
        skipped,
        dir_path.display()
    );
    Ok(())
}

fn local_scores_cmd(args: LocalScoresArgs) -> Result<()> {
    let vae = load_vae(&args.vae)?;
    let models = load_attribute_models(&args.attrs)?;
    let (originals, counterfactuals) = args.pairs.load()?;

    let indices: Vec<usize> = match args.index {
        Some(i) => {
            if i >= originals.n() {
                return Err(CliError::Usage(format!(
                    "index {i} out of range for {} pairs",
                    originals.n()
                )));
            }
            vec![i]
        }
        None => (0..originals.n()).collect(),
    };

    let mut out = String::from("image_id,attribute,phi\n");
    for &i in &indices {
        let phi = local_scores(
            &originals.image(i),
            &counterfactuals.image(i),
            &models,
            &vae,
        )?;
        for (model, value) in models.iter().zip(phi) {
            out.push_str(&format!("{i},{},{value}\n", model.spec.name));
        }
    }
    fs::write(&args.out, out)?;
    println!(
        "wrote {} local scores to {}",
        indices.len() * models.len(),
        args.out.display()
    );
    Ok(())
}

fn read_preds_csv(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "image_id,prediction" {
        return Err(CliError::Csv {
            path: path.display().to_string(),
            msg: format!("unexpected header '{header}'"),
        });
    }
    let mut preds = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let (_, p) = line.split_once(',').ok_or_else(|| CliError::Csv {
            path: path.display().to_string(),
            msg: format!("malformed row '{line}'"),
        })?;
        preds.push(p.parse::<f64>().map_err(|_| CliError::Csv {
            path: path.display().to_string(),
            msg: format!("bad prediction '{p}'"),
        })?);
    }
    if preds.len() != expected {
        return Err(CliError::Csv {
            path: path.display().to_string(),
            msg: format!("{} predictions for {expected} pairs", preds.len()),
        });
    }
    Ok(preds)
}

fn global_scores_cmd(args: GlobalScoresArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(mode) = &args.mode {
        cfg.aggregation = Aggregation::parse(mode).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(norm) = &args.normalize {
        cfg.normalization =
            Normalization::parse(norm).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    cfg.top_k = args.k.unwrap_or(cfg.top_k);
    cfg.validate()?;

    let vae = load_vae(&args.vae)?;
    let models = load_attribute_models(&args.attrs)?;
    let (originals, counterfactuals) = args.pairs.load()?;
    let preds = read_preds_csv(&args.preds, originals.n())?;

    let pairs: Vec<CounterfactualPair> = (0..originals.n())
        .map(|i| CounterfactualPair {
            original: originals.image(i),
            counterfactual: counterfactuals.image(i),
            original_prediction: preds[i],
        })
        .collect();
    let opts = GlobalOptions {
        aggregation: cfg.aggregation,
        normalization: cfg.normalization,
        per_image_renormalize: args.per_image_renormalize,
    };
    let table = global_scores(&pairs, &models, &vae, &opts)?;

    let full = top_k_report(&table.attributes, &table.psi, table.attributes.len())?;
    let mut out = String::from("attribute,psi,sign,rank\n");
    for entry in &full.entries {
        out.push_str(&format!(
            "{},{},{},{}\n",
            entry.attribute,
            entry.psi,
            entry.direction.name(),
            entry.rank
        ));
    }
    fs::write(&args.out, out)?;

    let top = top_k_report(&table.attributes, &table.psi, cfg.top_k)?;
    if top.clamped {
        eprintln!(
            "note: k={} exceeds the {} attributes; reporting all",
            cfg.top_k,
            table.attributes.len()
        );
    }
    println!(
        "global scores over {} pairs ({}, {}):",
        table.n,
        opts.aggregation.name(),
        opts.normalization.name()
    );
    for entry in &top.entries {
        println!(
            "  {}. {} {:+.6} ({})",
            entry.rank,
            entry.attribute,
            entry.psi,
            entry.direction.name()
        );
    }
    println!("wrote full ranking to {}", args.out.display());
    Ok(())
}

fn export_grid_cmd(args: ExportGridArgs) -> Result<()> {
    let data = args.data.load()?;
    if data.is_empty() {
        return Err(CliError::Usage("dataset is empty".into()));
    }
    let indices: Vec<usize> = match &args.indices {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("bad index '{s}'")))
            })
            .collect::<Result<_>>()?,
        None => (0..data.n()).collect(),
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= data.n()) {
        return Err(CliError::Usage(format!(
            "index {bad} out of range for {} images",
            data.n()
        )));
    }
    let images: Vec<Tensor> = indices.iter().map(|&i| data.image(i)).collect();
    export_grid(&images, args.cols, &args.out)?;
    println!(
        "wrote {}-image grid to {}",
        images.len(),
        args.out.display()
    );
    Ok(())
}
