//! `sadl`: synthesize data, pre-train, fine-tune, evaluate and inspect.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data
//! error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use sadl::config::RunConfig;
use sadl::data::{
    load_cd_pairs, load_scenes, read_pgm, read_ppm, write_cd_dataset, write_scene_dataset, Manifest, Split,
};
use sadl::model::{is_encoder_param, InputNorm, Model, ModelConfig, DS};
use sadl::rng;
use sadl::sampling::downscale_mask;
use sadl::train::cd::{cd_checkpoint, cd_model_from_checkpoint, finetune_csv};
use sadl::train::gradcheck::loss_gradcheck;
use sadl::train::selfsim::model_similarity_map;
use sadl::train::{
    build_cd_model, checkpoint_preset, epoch_means, evaluate_cd, finetune_cd, format_metrics, init_model,
    load_params, model_checkpoint, norm_from_checkpoint, pretrain, pretrain_csv, Checkpoint, TrainError,
};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "sadl",
    version,
    about = "Semantic-aware dense pre-training and change detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes (or change pairs) and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes or pairs (overrides `num` in the config).
        #[arg(long)]
        num: Option<usize>,
        /// Side length in pixels, a multiple of 16.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write bitemporal change pairs instead of single scenes.
        #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value = "false")]
        cd_pairs: bool,
        /// `key = value` run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Self-supervised pre-training on the train split of a scene dataset.
    Pretrain {
        /// Directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path, rewritten after every epoch.
        #[arg(long)]
        out: PathBuf,
        /// Per-step CSV log.
        #[arg(long)]
        log: PathBuf,
    },
    /// Fine-tune a change-detection model.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Pre-trained checkpoint, or `random`.
        #[arg(long)]
        init: String,
        /// Fraction of the train split to use, in (0, 1].
        #[arg(long, default_value_t = 1.0)]
        frac: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Print `precision recall f1 iou` of a change-detection checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write the self-similarity heat map of one feature position.
    Selfsim {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Building mask; adds the map's mass on the query point's class.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Feature-map position `row,col` (input coordinates divided by 4).
        #[arg(long)]
        point: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the pre-training loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of parameter coordinates to check.
        #[arg(long, default_value_t = 200)]
        coords: usize,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(f) = configure_threads() {
        return report(f);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    match f {
        Failure::Usage(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Failure::Runtime(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `SADL_THREADS` caps the worker pool used to build views.
fn configure_threads() -> Outcome {
    let Ok(v) = std::env::var("SADL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("SADL_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Synth {
            out,
            num,
            size,
            seed,
            cd_pairs,
            config,
        } => synth(&out, num, size, seed, cd_pairs, config.as_deref()),
        Command::Pretrain {
            data,
            config,
            out,
            log,
        } => cmd_pretrain(&data, config.as_deref(), &out, &log),
        Command::Finetune {
            data,
            init,
            frac,
            config,
            out,
            log,
        } => cmd_finetune(&data, &init, frac, config.as_deref(), &out, &log),
        Command::Eval { model, data, split } => cmd_eval(&model, &data, &split),
        Command::Selfsim {
            model,
            image,
            mask,
            point,
            out,
        } => cmd_selfsim(&model, &image, mask.as_deref(), &point, &out),
        Command::Gradcheck { seed, coords } => cmd_gradcheck(seed, coords),
    }
}

fn load_config(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    let Some(p) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(p)
        .with_context(|| format!("reading config {}", p.display()))
        .map_err(Failure::Usage)?;
    RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
}

/// `<path>.cfg` beside an output file.
fn echo_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn write_echo(path: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::write(path, cfg.echo()).with_context(|| format!("writing {}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn synth(
    out: &Path,
    num: Option<usize>,
    size: Option<usize>,
    seed: Option<u64>,
    cd_pairs: bool,
    config: Option<&Path>,
) -> Outcome {
    let mut cfg = load_config(config)?;
    if let Some(n) = num {
        cfg.num = n;
    }
    if let Some(s) = size {
        cfg.cd.scene.size = s;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let size = cfg.cd.scene.size;
    if size == 0 || size % 16 != 0 {
        return Err(usage(format!("--size {size} must be a positive multiple of 16")));
    }
    if cfg.num == 0 {
        return Err(usage("--num must be at least 1"));
    }
    let m = if cd_pairs {
        write_cd_dataset(out, cfg.num, &cfg.cd, cfg.train.seed)
    } else {
        write_scene_dataset(out, cfg.num, &cfg.cd.scene, cfg.train.seed)
    }
    .context("writing dataset")?;
    write_echo(&out.join("run.cfg"), &cfg)?;
    let kind = if cd_pairs { "pairs" } else { "scenes" };
    println!(
        "wrote {} {kind} to {} (train {}, val {}, test {})",
        m.records.len(),
        out.display(),
        m.split(Split::Train).len(),
        m.split(Split::Val).len(),
        m.split(Split::Test).len()
    );
    Ok(())
}

fn load_manifest(dir: &Path) -> anyhow::Result<Manifest> {
    Manifest::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn cmd_pretrain(data: &Path, config: Option<&Path>, out: &Path, log: &Path) -> Outcome {
    let cfg = load_config(config)?;
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    let m = load_manifest(data)?;
    let train = m.split(Split::Train);
    if train.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "{}: training split is empty",
            data.display()
        )));
    }
    let (images, masks) = load_scenes(&m, &train).context("loading scenes")?;
    let model = init_model(&cfg.train, &images);
    let meta = |epoch: usize| {
        vec![
            ("epoch", epoch.to_string()),
            ("seed", cfg.train.seed.to_string()),
            ("config_hash", format!("{:016x}", cfg.hash())),
            ("kind", "pretrain".to_string()),
        ]
    };
    write_echo(&echo_path(out), &cfg)?;
    model_checkpoint(&model, &meta(0))
        .save(out)
        .context("saving checkpoint")?;
    let (_, rows) = pretrain(&cfg.train, model, &images, &masks, |epoch, m| {
        model_checkpoint(m, &meta(epoch)).save(out)?;
        Ok(())
    })
    .context("pre-training")?;
    write_file(log, pretrain_csv(&rows))?;
    let means = epoch_means(&rows, images.len().div_ceil(cfg.train.batch));
    println!(
        "{} steps over {} scenes; epoch mean loss {}",
        rows.len(),
        images.len(),
        means
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}

fn cmd_finetune(
    data: &Path,
    init: &str,
    frac: f64,
    config: Option<&Path>,
    out: &Path,
    log: &Path,
) -> Outcome {
    let cfg = load_config(config)?;
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(usage(format!("--frac {frac} must lie in (0, 1]")));
    }
    let ck = if init == "random" {
        None
    } else {
        let p = Path::new(init);
        if !p.is_file() {
            return Err(Failure::Runtime(anyhow!(
                "--init {init}: no such checkpoint file"
            )));
        }
        Some(Checkpoint::load(p).with_context(|| format!("loading {init}"))?)
    };
    let m = load_manifest(data)?;
    let train_recs = m
        .subsample_train(frac, cfg.train.seed)
        .context("sub-sampling train split")?;
    let train = load_cd_pairs(&m, &train_recs).context("loading train pairs")?;
    let val = load_cd_pairs(&m, &m.split(Split::Val)).context("loading val pairs")?;
    if val.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "{}: validation split is empty",
            data.display()
        )));
    }
    let norm_images: Vec<_> = train
        .iter()
        .flat_map(|p| [p.image_t1.clone(), p.image_t2.clone()])
        .collect();
    let model = build_cd_model(
        cfg.train.model_config(),
        ck.as_ref(),
        InputNorm::from_images(&norm_images),
        cfg.train.seed,
    )
    .context("building model")?;
    write_echo(&echo_path(out), &cfg)?;
    let (best, rows) = finetune_cd(&cfg.train, model, &train, &val).context("fine-tuning")?;
    write_file(log, finetune_csv(&rows))?;
    let best_row = rows
        .iter()
        .max_by(|a, b| a.metrics.f1.total_cmp(&b.metrics.f1).then(b.epoch.cmp(&a.epoch)))
        .expect("at least one evaluation");
    let meta = [
        ("epoch", best_row.epoch.to_string()),
        ("seed", cfg.train.seed.to_string()),
        ("config_hash", format!("{:016x}", cfg.hash())),
        ("init", init.to_string()),
        ("frac", frac.to_string()),
    ];
    cd_checkpoint(&best, &meta)
        .save(out)
        .context("saving checkpoint")?;
    println!(
        "{} training pairs; best val epoch {}: {}",
        train.len(),
        best_row.epoch,
        format_metrics(&best_row.metrics)
    );
    Ok(())
}

fn cmd_eval(model: &Path, data: &Path, split: &str) -> Outcome {
    let split: Split = split.parse().map_err(|e| usage(format!("--split: {e}")))?;
    let ck = Checkpoint::load(model).with_context(|| format!("loading {}", model.display()))?;
    let cd = cd_model_from_checkpoint(&ck)?;
    let m = load_manifest(data)?;
    let recs = m.split(split);
    if recs.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "{}: {split} split is empty",
            data.display()
        )));
    }
    let pairs = load_cd_pairs(&m, &recs).context("loading pairs")?;
    let metrics = evaluate_cd(&cd, &pairs)?;
    println!("{}", format_metrics(&metrics));
    Ok(())
}

fn parse_point(s: &str) -> std::result::Result<(usize, usize), Failure> {
    let bad = || usage(format!("--point `{s}` must be `row,col`"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        r.trim().parse().map_err(|_| bad())?,
        c.trim().parse().map_err(|_| bad())?,
    ))
}

/// Encoder of either a pre-training or a change-detection checkpoint.
fn encoder_from_checkpoint(ck: &Checkpoint) -> anyhow::Result<Model> {
    let cfg = ModelConfig::from_preset(checkpoint_preset(ck)?);
    let mut model = Model::init(cfg, &mut rng::seeded(0));
    load_params(&mut model.params, ck, is_encoder_param)?;
    model.norm = norm_from_checkpoint(ck)?;
    Ok(model)
}

fn cmd_selfsim(model: &Path, image: &Path, mask: Option<&Path>, point: &str, out: &Path) -> Outcome {
    let point = parse_point(point)?;
    let ck = Checkpoint::load(model).with_context(|| format!("loading {}", model.display()))?;
    let encoder = encoder_from_checkpoint(&ck)?;
    let img = read_ppm(image).with_context(|| format!("reading {}", image.display()))?;
    let map = model_similarity_map(&encoder, &img, point)?;
    write_file(out, map.to_pgm())?;
    print!("wrote {}x{} map to {}", map.height, map.width, out.display());
    if let Some(p) = mask {
        let mask = read_pgm(p).with_context(|| format!("reading {}", p.display()))?;
        mask.same_size(img.height(), img.width())
            .map_err(|e| anyhow!("{}: {e}", p.display()))?;
        let small = downscale_mask(&mask, DS);
        let class = small.get(point.0, point.1);
        let mass: f64 = small
            .data()
            .iter()
            .zip(&map.data)
            .filter(|(&k, _)| k == class)
            .map(|(_, v)| v)
            .sum();
        print!("; query class {class}, mass on that class {mass:.4}");
    }
    println!();
    Ok(())
}

fn cmd_gradcheck(seed: u64, coords: usize) -> Outcome {
    if coords == 0 {
        return Err(usage("--coords must be at least 1"));
    }
    let r = loss_gradcheck(seed, coords).context("gradient check")?;
    println!(
        "checked {} skipped {} within_tol {} max_rel_err {:.3e} mean_rel_err {:.3e}",
        r.checked, r.skipped, r.within_tolerance, r.max_rel_error, r.mean_rel_error
    );
    if r.checked == 0 {
        return Err(Failure::Runtime(anyhow!("no coordinates could be checked")));
    }
    if r.max_rel_error > GRADCHECK_TOLERANCE {
        return Err(Failure::Runtime(anyhow!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            r.max_rel_error
        )));
    }
    Ok(())
}
