mod dataset;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use tokenseg::ablation::{sweep, sweep_csv, Axis};
use tokenseg::config::{parse_dims, Config};
use tokenseg::decoder::binarize;
use tokenseg::trainer::{case_seed, evaluate, load_checkpoint, save_checkpoint, train_model, Evaluation};
use tokenseg::model::Model;
use tokenseg::volume::{generate_phantom, load_volume, save_mask, save_volume, PhantomRecipe};

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "tokenseg", version, about = "Sparse-token volumetric segmentation on synthetic phantoms")]
struct Cli {
    /// Seed for phantoms, parameter init and selection.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Config override `key=value`; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labelled phantom dataset.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Recipe file (`key = value`, keys as the inline flags).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Volume shape, `DxHxW`.
        #[arg(long)]
        dims: Option<String>,
        #[arg(long)]
        min_blobs: Option<usize>,
        #[arg(long)]
        max_blobs: Option<usize>,
        #[arg(long)]
        min_radius: Option<f64>,
        #[arg(long)]
        max_radius: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train and write checkpoints, the run log and a manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validation dataset; defaults to the training data.
        #[arg(long)]
        val_data: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Segment one volume.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        theta: Option<f64>,
        /// Write the selected tokens as CSV.
        #[arg(long)]
        emit_tokens: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labelled dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Sweep one axis, training and evaluating once per value.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation dataset; defaults to the training data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// Exit 2 for usage and config problems, 1 for everything else.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<tokenseg::Error>() {
            Some(tokenseg::Error::Config(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<tokenseg::Error> for Failure {
    fn from(e: tokenseg::Error) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Phantom { .. } => cmd_phantom(&cli),
        Command::Train { .. } => cmd_train(&cli),
        Command::Infer { .. } => cmd_infer(&cli),
        Command::Eval { .. } => cmd_eval(&cli),
        Command::Ablate { .. } => cmd_ablate(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Defaults, then the config file, then `--set` pairs and `--seed`.
fn resolve_config(cli: &Cli, overrides: &Overrides) -> std::result::Result<Config, Failure> {
    let mut cfg = Config::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for pair in &overrides.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_dir(path: &Path, what: &str) -> Outcome {
    if !path.is_dir() {
        return Err(usage(format!("{what} directory {} does not exist", path.display())));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(Failure::Runtime)
}

fn read_dataset(dir: &Path, manifest: &mut Manifest) -> std::result::Result<Vec<dataset::Entry>, Failure> {
    require_dir(dir, "data")?;
    let entries = dataset::read_index(dir).map_err(Failure::Usage)?;
    manifest.input(&dir.join(dataset::INDEX_FILE))?;
    for e in &entries {
        for p in [&e.volume, &e.mask] {
            if p.exists() {
                manifest.input(p)?;
            }
        }
    }
    Ok(entries)
}

fn recipe_set(r: &mut PhantomRecipe, key: &str, value: &str) -> Outcome {
    let bad = || usage(format!("phantom spec: cannot parse {key} = {value:?}"));
    let v = value.trim();
    match key.trim() {
        "dims" => r.dims = parse_dims(v)?,
        "min_blobs" => r.min_blobs = v.parse().map_err(|_| bad())?,
        "max_blobs" => r.max_blobs = v.parse().map_err(|_| bad())?,
        "min_radius" => r.min_radius = v.parse().map_err(|_| bad())?,
        "max_radius" => r.max_radius = v.parse().map_err(|_| bad())?,
        "min_intensity" => r.min_intensity = v.parse().map_err(|_| bad())?,
        "max_intensity" => r.max_intensity = v.parse().map_err(|_| bad())?,
        "background" => r.background = v.parse().map_err(|_| bad())?,
        "noise" => r.noise_sigma = v.parse().map_err(|_| bad())?,
        other => return Err(usage(format!("phantom spec: unknown key {other:?}"))),
    }
    Ok(())
}

fn cmd_phantom(cli: &Cli) -> Outcome {
    let Command::Phantom {
        out,
        count,
        spec,
        dims,
        min_blobs,
        max_blobs,
        min_radius,
        max_radius,
        noise,
    } = &cli.command
    else {
        unreachable!()
    };
    if *count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let mut recipe = PhantomRecipe::default();
    if let Some(path) = spec {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read spec {}: {e}", path.display())))?;
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("phantom spec: expected key = value, got {line:?}")))?;
            recipe_set(&mut recipe, k, v)?;
        }
    }
    if let Some(d) = dims {
        recipe.dims = parse_dims(d)?;
    }
    recipe.min_blobs = min_blobs.unwrap_or(recipe.min_blobs);
    recipe.max_blobs = max_blobs.unwrap_or(recipe.max_blobs);
    recipe.min_radius = min_radius.unwrap_or(recipe.min_radius);
    recipe.max_radius = max_radius.unwrap_or(recipe.max_radius);
    recipe.noise_sigma = noise.unwrap_or(recipe.noise_sigma);
    recipe.validate().map_err(|e| usage(e.to_string()))?;
    let seed = cli.seed.unwrap_or(0);

    create_dir(out)?;
    let mut m = Manifest::new("phantom", seed);
    m.set("count", count);
    m.set("recipe", format!("{recipe:?}"));
    m.output("index", &out.join(dataset::INDEX_FILE));
    m.write(&out.join("manifest.txt"))?;

    let mut rows = Vec::with_capacity(*count);
    for i in 0..*count {
        let spec = recipe.sample(seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
        let (v, mask) = generate_phantom(&spec)?;
        let id = format!("case_{i:03}");
        let (vn, mn) = (format!("{id}.vol.tsv3"), format!("{id}.mask.tsv3"));
        save_volume(&v, out.join(&vn))?;
        save_mask(&mask, out.join(&mn))?;
        if cli.verbose {
            eprintln!("{id}: {} blobs, {} foreground voxels", spec.blobs.len(), mask.count());
        }
        rows.push((id, vn, mn));
    }
    dataset::write_index(out, &rows).map_err(Failure::Runtime)
}

fn cmd_train(cli: &Cli) -> Outcome {
    let Command::Train {
        data,
        out,
        val_data,
        overrides,
    } = &cli.command
    else {
        unreachable!()
    };
    let cfg = resolve_config(cli, overrides)?;
    let mut m = Manifest::new("train", cfg.seed);
    let train_entries = read_dataset(data, &mut m)?;
    let val_entries = match val_data {
        Some(v) => Some(read_dataset(v, &mut m)?),
        None => None,
    };
    create_dir(out)?;
    m.config(&cfg.to_text());
    let paths = [
        ("best_checkpoint", out.join("best.ckpt")),
        ("final_checkpoint", out.join("final.ckpt")),
        ("runlog", out.join("runlog.csv")),
    ];
    for (name, p) in &paths {
        m.output(name, p);
    }
    m.write(&out.join("manifest.txt"))?;

    let train_set = dataset::load_all(&train_entries)?;
    let val_set = match &val_entries {
        Some(v) => dataset::load_all(v)?,
        None => train_set.clone(),
    };
    let verbose = cli.verbose;
    let outcome = train_model(Model::new(&cfg)?, &train_set, &val_set, &mut |r| {
        if verbose {
            eprintln!(
                "epoch {:4}  train {:.5}  val {:.5}  dice {:.4}  lr {:.3e}",
                r.epoch, r.train_loss, r.val_loss, r.val_dice, r.lr
            );
        }
    })?;
    save_checkpoint(&outcome.best, &paths[0].1)?;
    save_checkpoint(&outcome.last, &paths[1].1)?;
    fs::write(&paths[2].1, outcome.log.to_csv()).with_context(|| format!("writing {}", paths[2].1.display()))?;
    if let Some(why) = outcome.aborted {
        return Err(Failure::Runtime(anyhow!("training aborted: {why}; last good parameters saved")));
    }
    if verbose {
        eprintln!(
            "best epoch {} of {}{}",
            outcome.best_epoch,
            outcome.log.len(),
            if outcome.stopped_early { " (early stop)" } else { "" }
        );
    }
    Ok(())
}

fn cmd_infer(cli: &Cli) -> Outcome {
    let Command::Infer {
        ckpt,
        input,
        out,
        theta,
        emit_tokens,
    } = &cli.command
    else {
        unreachable!()
    };
    let model = load_checkpoint(ckpt)?;
    let v = load_volume(input)?;
    if let Some(d) = model.config.input_dims {
        if d != v.dims {
            return Err(Failure::Runtime(anyhow!(
                "volume {} has shape {}, checkpoint {} was trained on {}",
                input.display(),
                v.dims,
                ckpt.display(),
                d
            )));
        }
    }
    let theta = theta.unwrap_or(model.config.theta);
    let pred = model.predict(&v, case_seed(model.config.seed, 0))?;
    let mask = binarize(&pred.prob, v.dims, v.spacing, theta)?;
    save_mask(&mask, out)?;
    if let Some(path) = emit_tokens {
        let mut s = String::from("rank,level,d,h,w,code,score\n");
        for (i, t) in pred.tokens.tokens.iter().enumerate() {
            s.push_str(&format!(
                "{i},{},{},{},{},{},{:?}\n",
                t.level, t.coord.0, t.coord.1, t.coord.2, t.code, t.score
            ));
        }
        fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    }
    if cli.verbose {
        eprintln!("{} foreground voxels of {}", mask.count(), v.dims.len());
    }
    Ok(())
}

fn cmd_eval(cli: &Cli) -> Outcome {
    let Command::Eval { ckpt, data, out, theta } = &cli.command else {
        unreachable!()
    };
    let model = load_checkpoint(ckpt)?;
    require_dir(data, "data")?;
    let entries = dataset::read_index(data).map_err(Failure::Usage)?;
    let (cases, skipped) = dataset::load_lenient(&entries);
    let theta = theta.unwrap_or(model.config.theta);
    let mut report = if cases.is_empty() {
        String::from("cases=0\n")
    } else {
        let ev: Evaluation = evaluate(&model, &cases, theta)?;
        ev.to_report()
    };
    for (id, why) in &skipped {
        report.push_str(&format!("skipped.{id}={}\n", why.replace('\n', " ")));
    }
    fs::write(out, &report).with_context(|| format!("writing {}", out.display()))?;
    if !skipped.is_empty() {
        let ids: Vec<&str> = skipped.iter().map(|(i, _)| i.as_str()).collect();
        return Err(Failure::Runtime(anyhow!("unreadable cases skipped: {}", ids.join(", "))));
    }
    Ok(())
}

fn cmd_ablate(cli: &Cli) -> Outcome {
    let Command::Ablate {
        axis,
        values,
        data,
        eval_data,
        out,
        overrides,
    } = &cli.command
    else {
        unreachable!()
    };
    let axis: Axis = axis.parse()?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(usage("--values lists nothing"));
    }
    let cfg = resolve_config(cli, overrides)?;
    for v in &values {
        tokenseg::ablation::apply_axis(&cfg, axis, v)?;
    }
    let mut m = Manifest::new("ablate", cfg.seed);
    let train_entries = read_dataset(data, &mut m)?;
    let eval_entries = match eval_data {
        Some(d) => Some(read_dataset(d, &mut m)?),
        None => None,
    };
    m.config(&cfg.to_text());
    m.set("axis", format!("{axis:?}").to_lowercase());
    m.set("values", values.join(","));
    m.output("sweep", out);
    let mut mpath = out.clone().into_os_string();
    mpath.push(".manifest.txt");
    m.write(Path::new(&mpath))?;

    let train_set = dataset::load_all(&train_entries)?;
    let eval_set = match &eval_entries {
        Some(e) => dataset::load_all(e)?,
        None => train_set.clone(),
    };
    let rows = sweep(&cfg, axis, &values, &train_set, &eval_set)?;
    fs::write(out, sweep_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
