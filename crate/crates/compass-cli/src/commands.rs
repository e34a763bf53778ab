//! The five subcommands: train, encode, decode, eval, report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;

use compass_core::checkpoint;
use compass_core::entropy;
use compass_core::evalkit::{self, CurvePoint, RateCurve};
use compass_core::image_io;
use compass_core::model::{CompassModel, ModelConfig};
use compass_core::pipeline;
use compass_core::training::{self, TrainConfig, TrainStage, Trainer};

use crate::util::{
    atomic_via, atomic_write, data, load_model, parse_indices, parse_scales, registry_path,
    usage, AppError, AppResult, ModelOverrides,
};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Folder of training images (PNG or PPM family)
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint file to write
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Stage: pretrain-bl | pretrain-liff | pretrain-rc | joint
    #[arg(long, default_value = "pretrain-bl")]
    pub stage: String,
    /// Existing checkpoint to start an enhancement stage from
    #[arg(long, value_name = "FILE")]
    pub base: Option<PathBuf>,
    /// Checkpoint of an interrupted run to continue (its stored settings
    /// win; only --steps, --data, and --log are honored alongside it)
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    /// Total steps the run should reach (0 = initialize and save only)
    #[arg(long)]
    pub steps: Option<u64>,
    /// Rate–distortion weight
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Enhancement layers per sampled pyramid
    #[arg(long)]
    pub layers: Option<usize>,
    /// Pyramids sampled per step
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Side length of the largest-layer training crop
    #[arg(long)]
    pub crop_size: Option<usize>,
    /// Smallest per-layer scale factor sampled during training
    #[arg(long)]
    pub scale_min: Option<f64>,
    /// Largest per-layer scale factor sampled during training
    #[arg(long)]
    pub scale_max: Option<f64>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Steps per plateau window of the learning-rate schedule (0 disables)
    #[arg(long)]
    pub plateau_window: Option<u64>,
    /// Floor the plateau schedule never halves below
    #[arg(long)]
    pub min_lr: Option<f64>,
    /// Seed for initialization and all per-step randomness
    #[arg(long)]
    pub seed: Option<u64>,
    /// Progress/log cadence in steps
    #[arg(long)]
    pub log_every: Option<u64>,
    /// Write the per-step loss curve as CSV here
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Architecture preset for fresh models: default | small | tiny
    #[arg(long, value_name = "PRESET")]
    pub model_size: Option<String>,
    #[command(flatten)]
    pub overrides: ModelOverrides,
}

fn preset(name: Option<&str>) -> AppResult<ModelConfig> {
    match name.unwrap_or("default") {
        "default" => Ok(ModelConfig::default()),
        "small" => Ok(ModelConfig::small()),
        "tiny" => Ok(ModelConfig::tiny()),
        other => Err(usage(format!(
            "unknown --model-size {other:?}; expected default, small, or tiny"
        ))),
    }
}

pub fn train(a: TrainArgs) -> AppResult<()> {
    if a.resume.is_some() && a.base.is_some() {
        return Err(usage("--resume already carries a model; drop --base"));
    }
    let dataset = training::load_dataset(&a.data)?;

    let mut trainer = if let Some(resume) = &a.resume {
        let ck = checkpoint::load(resume)
            .map_err(|e| data(format!("cannot load {}: {e}", resume.display())))?;
        let mut t = Trainer::from_checkpoint(ck, dataset)?;
        if let Some(steps) = a.steps {
            t.set_total_steps(steps);
        }
        t
    } else {
        let stage: TrainStage = a.stage.parse().map_err(|e| usage(format!("{e}")))?;
        let mut cfg = TrainConfig {
            stage,
            ..TrainConfig::default()
        };
        cfg.steps = a.steps.unwrap_or(0);
        if let Some(v) = a.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = a.layers {
            cfg.layers = v;
        }
        if let Some(v) = a.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = a.crop_size {
            cfg.crop_size = v;
        }
        if let Some(v) = a.scale_min {
            cfg.scale_min = v;
        }
        if let Some(v) = a.scale_max {
            cfg.scale_max = v;
        }
        if let Some(v) = a.lr {
            cfg.lr = v;
        }
        if let Some(v) = a.plateau_window {
            cfg.plateau_window = v;
        }
        if let Some(v) = a.min_lr {
            cfg.min_lr = v;
        }
        if let Some(v) = a.seed {
            cfg.seed = v;
        }
        if let Some(v) = a.log_every {
            cfg.log_every = v;
        }

        let model = match &a.base {
            Some(base) => {
                let ck = checkpoint::load(base)
                    .map_err(|e| data(format!("cannot load {}: {e}", base.display())))?;
                let mut m = ck.into_model()?;
                a.overrides.apply(&mut m.config)?;
                m
            }
            None => {
                if stage.needs_base() {
                    return Err(AppError::Data(
                        compass_core::Error::MissingBaseCheckpoint(format!(
                            "stage {} starts from an existing base-layer model; \
                             pass --base <ckpt> or --resume <ckpt>",
                            stage.as_str()
                        ))
                        .to_string(),
                    ));
                }
                let mut mc = preset(a.model_size.as_deref())?;
                a.overrides.apply(&mut mc)?;
                CompassModel::init(mc, a.seed.unwrap_or(cfg.seed))?
            }
        };
        Trainer::new(model, cfg, dataset)?
    };

    let total = trainer.config().steps;
    let every = trainer.config().log_every;
    let records = trainer.run_with(|r| {
        if (every > 0 && r.step % every == 0) || r.step == total {
            println!("step {}/{}: loss {:.4}, lr {:.2e}", r.step, total, r.loss, r.lr);
        }
    })?;
    trainer.save(&a.out)?;
    if let Some(log) = &a.log {
        atomic_via(log, "", |tmp| {
            training::write_log(tmp, &records).map_err(Into::into)
        })?;
        println!("wrote {}", log.display());
    }
    println!("saved {} at step {}", a.out.display(), trainer.step());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    /// Image to encode; it becomes the largest layer
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Output stream file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Model checkpoint (default: registry slot `quality`)
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Rate point index recorded in the stream and used for registry lookup
    #[arg(long, default_value_t = 0)]
    pub quality: usize,
    /// Enhancement-layer scale factors relative to the base layer,
    /// strictly increasing, e.g. "1.5,2.0"; omit for a single layer
    #[arg(long, value_name = "LIST")]
    pub scales: Option<String>,
    /// Also write the encoder-side per-layer reconstructions here
    #[arg(long, value_name = "DIR")]
    pub dump_recon: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ModelOverrides,
}

pub fn encode(a: EncodeArgs) -> AppResult<()> {
    if a.quality > 255 {
        return Err(usage("--quality must fit in one byte (0..=255)"));
    }
    let scales = parse_scales(a.scales.as_deref())?;
    let model = load_model(a.model.as_deref(), a.quality, &a.overrides)?;
    let img = image_io::load_image(&a.input)
        .map_err(|e| data(format!("cannot load {}: {e}", a.input.display())))?;
    let targets = evalkit::pyramid_targets(&img, &scales)?;
    let out = pipeline::encode(&model, &targets, a.quality as u8)?;
    atomic_write(&a.out, &out.stream)?;
    for (k, st) in out.stats.iter().enumerate() {
        println!(
            "layer {k}: {}x{}, {} bits (estimated {:.0})",
            st.height,
            st.width,
            st.substream_bits,
            st.estimated_bits()
        );
    }
    println!("wrote {} ({} bytes)", a.out.display(), out.stream.len());
    if let Some(dir) = &a.dump_recon {
        std::fs::create_dir_all(dir)
            .map_err(|e| data(format!("cannot create {}: {e}", dir.display())))?;
        for (k, recon) in out.recons.iter().enumerate() {
            let path = dir.join(format!("layer_{k}.png"));
            atomic_via(&path, ".png", |tmp| {
                image_io::save_image(tmp, recon).map_err(Into::into)
            })?;
            println!("recon layer {k} -> {}", path.display());
        }
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// Stream file to decode
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Directory for the decoded layer images
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Model checkpoint (default: registry slot from the stream's quality
    /// byte)
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Decode only layers 0..=LAYER instead of the whole stream
    #[arg(long)]
    pub layer: Option<usize>,
    #[command(flatten)]
    pub overrides: ModelOverrides,
}

pub fn decode(a: DecodeArgs) -> AppResult<()> {
    let bytes = std::fs::read(&a.input)
        .map_err(|e| data(format!("cannot read {}: {e}", a.input.display())))?;
    let header = entropy::peek_header(&bytes)?;
    let model = load_model(
        a.model.as_deref(),
        header.quality_index as usize,
        &a.overrides,
    )?;
    let out = pipeline::decode(&model, &bytes, a.layer)?;
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| data(format!("cannot create {}: {e}", a.out_dir.display())))?;
    for (k, recon) in out.recons.iter().enumerate() {
        let path = a.out_dir.join(format!("layer_{k}.png"));
        atomic_via(&path, ".png", |tmp| {
            image_io::save_image(tmp, recon).map_err(Into::into)
        })?;
        println!(
            "layer {k}: {}x{} -> {}",
            recon.shape()[0],
            recon.shape()[1],
            path.display()
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Folder of evaluation images
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Per-layer measurement CSV to write
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Enhancement-layer scale factors, e.g. "1.5,2.0"
    #[arg(long, value_name = "LIST")]
    pub scales: Option<String>,
    /// Comma-separated checkpoint paths (rate points in order)
    #[arg(long, value_name = "LIST")]
    pub models: Option<String>,
    /// Comma-separated registry indices (uses COMPASS_MODEL_DIR)
    #[arg(long, value_name = "LIST")]
    pub lambdas: Option<String>,
    /// Also write the aggregate operating points as CSV
    #[arg(long, value_name = "FILE")]
    pub curve_out: Option<PathBuf>,
    /// Earlier measurement CSV to compare against (prints the average rate
    /// difference)
    #[arg(long, value_name = "FILE")]
    pub baseline: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ModelOverrides,
}

pub fn eval(a: EvalArgs) -> AppResult<()> {
    let scales = parse_scales(a.scales.as_deref())?;
    let mut models: Vec<(usize, CompassModel)> = Vec::new();
    match (&a.models, &a.lambdas) {
        (Some(paths), None) => {
            for (i, p) in paths.split(',').enumerate() {
                let path = Path::new(p.trim());
                let ck = checkpoint::load(path)
                    .map_err(|e| data(format!("cannot load {}: {e}", path.display())))?;
                let mut m = ck.into_model()?;
                a.overrides.apply(&mut m.config)?;
                models.push((i, m));
            }
        }
        (None, Some(list)) => {
            for idx in parse_indices(list)? {
                let path = registry_path(idx)?;
                let ck = checkpoint::load(&path)
                    .map_err(|e| data(format!("cannot load {}: {e}", path.display())))?;
                let mut m = ck.into_model()?;
                a.overrides.apply(&mut m.config)?;
                models.push((idx, m));
            }
        }
        (None, None) => return Err(usage("pass --models or --lambdas")),
        (Some(_), Some(_)) => {
            return Err(usage("pass either --models or --lambdas, not both"))
        }
    }
    let images = evalkit::load_eval_images(&a.data)?;
    let refs: Vec<(usize, &CompassModel)> = models.iter().map(|(i, m)| (*i, m)).collect();
    let ev = evalkit::evaluate_dataset(&images, &refs, &scales)?;
    atomic_via(&a.out, "", |tmp| {
        evalkit::write_records(tmp, &ev.records).map_err(Into::into)
    })?;
    for p in &ev.points {
        println!(
            "lambda {}: bpp {:.4}, psnr {:.2} dB",
            p.lambda_index, p.mean_bpp, p.mean_psnr
        );
    }
    println!("wrote {}", a.out.display());
    if let Some(curve_out) = &a.curve_out {
        let mut text = String::from("lambda,bpp,psnr\n");
        for p in &ev.points {
            text += &format!("{},{:.6},{:.4}\n", p.lambda_index, p.mean_bpp, p.mean_psnr);
        }
        atomic_write(curve_out, text.as_bytes())?;
        println!("wrote {}", curve_out.display());
    }
    if let Some(baseline) = &a.baseline {
        let anchor = curve_from_records_csv(baseline)?;
        let test = curve_from_points(&ev.points)?;
        let bd = evalkit::bd_rate(&anchor, &test)?;
        println!("bd-rate vs baseline: {bd:.3}% (negative = fewer bits at equal quality)");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Measurement CSV of the reference arm
    #[arg(long, value_name = "FILE")]
    pub anchor: PathBuf,
    /// Measurement CSV of the arm under test
    #[arg(long, value_name = "FILE")]
    pub test: PathBuf,
    /// Write a summary CSV here
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

pub fn report(a: ReportArgs) -> AppResult<()> {
    let anchor = curve_from_records_csv(&a.anchor)?;
    let test = curve_from_records_csv(&a.test)?;
    let bd = evalkit::bd_rate(&anchor, &test)?;
    println!("bd-rate (test vs anchor): {bd:.3}% (negative = test spends fewer bits)");
    if let Some(out) = &a.out {
        let text = format!("metric,value\nbd_rate_percent,{bd:.6}\n");
        atomic_write(out, text.as_bytes())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn curve_from_points(points: &[CurvePoint]) -> AppResult<RateCurve> {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.mean_bpp, p.mean_psnr)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    RateCurve::new(pts).map_err(|e| data(format!("cannot build a rate curve: {e}")))
}

/// Rebuild the final-layer aggregate curve from a measurement CSV: for each
/// rate point, take every image's highest layer and average bpp and PSNR.
fn curve_from_records_csv(path: &Path) -> AppResult<RateCurve> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| data(format!("cannot read {}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| data(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| data(format!("{}: missing column {name:?}", path.display())))
    };
    let (ci, cl, cy, cb, cp) = (col("image")?, col("lambda")?, col("layer")?, col("bpp")?, col("psnr")?);
    let mut best: BTreeMap<(usize, String), (usize, f64, f64)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| data(format!("{}: {e}", path.display())))?;
        let field = |i: usize| -> AppResult<&str> {
            rec.get(i)
                .ok_or_else(|| data(format!("{}: short row", path.display())))
        };
        let lambda: usize = field(cl)?
            .parse()
            .map_err(|_| data(format!("{}: bad lambda value", path.display())))?;
        let layer: usize = field(cy)?
            .parse()
            .map_err(|_| data(format!("{}: bad layer value", path.display())))?;
        let bpp: f64 = field(cb)?
            .parse()
            .map_err(|_| data(format!("{}: bad bpp value", path.display())))?;
        let psnr: f64 = field(cp)?
            .parse()
            .map_err(|_| data(format!("{}: bad psnr value", path.display())))?;
        let key = (lambda, field(ci)?.to_string());
        match best.get(&key) {
            Some(&(l0, _, _)) if l0 >= layer => {}
            _ => {
                best.insert(key, (layer, bpp, psnr));
            }
        }
    }
    let mut agg: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for ((lambda, _), &(_, bpp, psnr)) in &best {
        let e = agg.entry(*lambda).or_insert((0.0, 0.0, 0));
        e.0 += bpp;
        e.1 += psnr;
        e.2 += 1;
    }
    let mut pts: Vec<(f64, f64)> = agg
        .values()
        .map(|&(b, p, n)| (b / n as f64, p / n as f64))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    RateCurve::new(pts).map_err(|e| {
        data(format!(
            "{}: cannot build a rate curve from these records: {e}",
            path.display()
        ))
    })
}
