use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use range_score::geometry::{project, unproject};
use range_score::ingest::{
    read_sweep, subsample_beams, write_kitti_bin, BeamSelection, SweepFormat,
};
use range_score::io::{load_range_image, save_range_image, write_ply};
use range_score::metrics::{
    compare_clouds, frd, heldout_eval_mask, mae_densification, manifest_sha256,
    nearest_row_baseline, pooled_bev, FeatureExtractor, MetricReport, NetworkFeatures,
    PixelFeatures,
};
use range_score::sampling::{densify_batch, sample, DensifyTask};
use range_score::scorenet::{load_checkpoint, save_checkpoint, Checkpoint, ScoreNet};
use range_score::synthworld::{build_scene, raycast, BeamPattern};
use range_score::training::train;
use range_score::{PointCloud, ProjectionConfig, RangeImage};

use crate::config::{parse_variant, RunConfig};
use crate::plot::write_bev_png;
use crate::{
    Cli, Command, DensifyArgs, EvalArgs, ProjectArgs, SampleArgs, SamplerFlags, SweepFormatArg,
    SynthArgs, TrainArgs, EXIT_CONFIG, EXIT_PARTIAL, OUTPUT_ROOT_ENV,
};

pub const RANGE_IMAGE_EXT: &str = "rimg";

/// A problem with the configuration or the referenced inputs, detected
/// before any work is done.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn classify(err: &anyhow::Error) -> u8 {
    let is_config = err.chain().any(|e| {
        e.is::<ConfigError>()
            || e.is::<toml::de::Error>()
            || matches!(
                e.downcast_ref::<range_score::Error>(),
                Some(
                    range_score::Error::InvalidConfig(_) | range_score::Error::ShapeMismatch { .. }
                )
            )
    });
    if is_config {
        EXIT_CONFIG
    } else {
        EXIT_PARTIAL
    }
}

/// How many inputs of a batch command failed.
pub struct Outcome {
    pub failures: usize,
}

impl Outcome {
    fn ok() -> Self {
        Outcome { failures: 0 }
    }

    pub fn exit_code(&self) -> ExitCode {
        if self.failures == 0 {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(EXIT_PARTIAL)
        }
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| config_error(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = cli.preset {
        cfg.preset = p;
        cfg.projection = None;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    match cli.command {
        Command::Project(a) => cmd_project(&cfg, a),
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Sample(a) => cmd_sample(cfg, a),
        Command::Densify(a) => cmd_densify(cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
    }
}

fn validate(cfg: &RunConfig) -> Result<()> {
    cfg.validate().map_err(|e| config_error(format!("{e:#}")))
}

fn output_dir(out: &Path) -> Result<PathBuf> {
    let dir = match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

#[derive(Serialize)]
struct Invocation<'a> {
    command: &'a str,
    args: Vec<String>,
}

/// Writes `config.toml` (the full effective configuration, loadable with
/// `--config`) and `command.json` (the exact argument vector).
fn write_snapshot(dir: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let inv = Invocation {
        command,
        args: std::env::args().collect(),
    };
    fs::write(
        dir.join("command.json"),
        serde_json::to_string_pretty(&inv)?,
    )?;
    Ok(())
}

fn write_manifest(dir: &Path, files: &[PathBuf]) -> Result<()> {
    let mut text = String::new();
    for f in files {
        text.push_str(&f.file_name().unwrap_or_default().to_string_lossy());
        text.push('\n');
    }
    fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

/// Expands directories into their files with extension `ext`, sorted.
fn collect_inputs(inputs: &[PathBuf], ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && f.extension().is_some_and(|e| e == ext))
                .collect();
            files.sort();
            out.extend(files);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(config_error(format!(
                "input {} does not exist",
                p.display()
            )));
        }
    }
    if out.is_empty() {
        return Err(config_error(format!("no .{ext} inputs found")));
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned()
}

fn load_images(paths: &[PathBuf], expected: Option<&ProjectionConfig>) -> Result<Vec<RangeImage>> {
    paths
        .iter()
        .map(|p| {
            let (img, _) = load_range_image(p)?;
            if let Some(e) = expected {
                if (img.height(), img.width()) != (e.height, e.width) {
                    return Err(range_score::Error::ShapeMismatch {
                        expected: format!("{}x{} image", e.height, e.width),
                        got: format!("{}x{} in {}", img.height(), img.width(), p.display()),
                    }
                    .into());
                }
            }
            Ok(img)
        })
        .collect()
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(config_error(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn apply_sampler_flags(cfg: &mut RunConfig, flags: &SamplerFlags) -> Result<()> {
    if let Some(v) = flags.step_size {
        cfg.sampler.step_size = v;
    }
    if let Some(v) = flags.steps_per_level {
        cfg.sampler.steps_per_level = v;
    }
    if let Some(v) = &flags.variant {
        cfg.sampler.variant = parse_variant(v).map_err(|e| config_error(e.to_string()))?;
    }
    Ok(())
}

/// The checkpoint's own geometry and schedule replace the configured ones.
fn adopt_checkpoint(cfg: &mut RunConfig, ck: &Checkpoint) {
    if let Some(p) = ck.projection {
        cfg.projection = Some(p);
    }
    let s = &ck.schedule;
    cfg.schedule.sigma_first = s.first();
    cfg.schedule.sigma_last = s.last();
    cfg.schedule.levels = s.len();
}

fn save_cloud_ply(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    write_ply(&mut w, pc)?;
    w.flush()?;
    Ok(())
}

fn cmd_project(cfg: &RunConfig, args: ProjectArgs) -> Result<Outcome> {
    validate(cfg)?;
    let proj = cfg.projection();
    let inputs = collect_inputs(&args.inputs, "bin")?;
    let dir = output_dir(&args.out)?;
    let format = match args.format {
        SweepFormatArg::Kitti => SweepFormat::Kitti,
        SweepFormatArg::Nuscenes => SweepFormat::Nuscenes,
    };
    let mut written = Vec::new();
    let mut failures = 0;
    for input in &inputs {
        let result = read_sweep(input, format).and_then(|rec| {
            let img = project(&rec.cloud, &proj)?;
            let out = dir.join(format!("{}.{RANGE_IMAGE_EXT}", stem(input)));
            save_range_image(&out, &img, &proj)?;
            Ok(out)
        });
        match result {
            Ok(out) => written.push(out),
            Err(e) => {
                eprintln!("error: {}: {e}", input.display());
                failures += 1;
            }
        }
    }
    write_manifest(&dir, &written)?;
    write_snapshot(&dir, cfg, "project")?;
    println!(
        "projected {} of {} sweeps into {}",
        written.len(),
        inputs.len(),
        dir.display()
    );
    Ok(Outcome { failures })
}

fn cmd_synth(cfg: &RunConfig, args: SynthArgs) -> Result<Outcome> {
    validate(cfg)?;
    let proj = cfg.projection();
    let pattern = BeamPattern::for_projection(&proj);
    let dir = output_dir(&args.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut written = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let scene_seed: u64 = rng.gen();
        let scene = build_scene(scene_seed, &cfg.scene)?;
        let pc = raycast(&scene, &pattern)?;
        let img = project(&pc, &proj)?;
        let name = format!("sweep_{i:05}");
        let out = dir.join(format!("{name}.{RANGE_IMAGE_EXT}"));
        save_range_image(&out, &img, &proj)?;
        fs::write(dir.join(format!("{name}.scene")), scene.to_config_string())?;
        if args.bin {
            fs::write(dir.join(format!("{name}.bin")), write_kitti_bin(&pc))?;
        }
        written.push(out);
    }
    write_manifest(&dir, &written)?;
    write_snapshot(&dir, cfg, "synth")?;
    println!(
        "wrote {} {}x{} sweeps to {}",
        args.count,
        proj.height,
        proj.width,
        dir.display()
    );
    Ok(Outcome::ok())
}

fn cmd_train(mut cfg: RunConfig, args: TrainArgs) -> Result<Outcome> {
    let t = &mut cfg.train;
    if let Some(v) = args.steps {
        t.steps = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = args.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = args.channel_divisor {
        cfg.network.channel_divisor = v;
        cfg.network.channels = None;
    }
    if let Some(v) = args.levels {
        cfg.schedule.levels = v;
    }
    if let Some(v) = args.sigma_first {
        cfg.schedule.sigma_first = v;
    }
    if let Some(v) = args.sigma_last {
        cfg.schedule.sigma_last = v;
    }
    validate(&cfg)?;
    let proj = cfg.projection();
    if !args.data.is_dir() {
        return Err(config_error(format!(
            "data directory {} not found",
            args.data.display()
        )));
    }
    let paths = collect_inputs(std::slice::from_ref(&args.data), RANGE_IMAGE_EXT)?;
    let images = load_images(&paths, Some(&proj))?;
    let data = RangeImage::batch_to_tensor(&images)?;
    drop(images);
    let schedule = cfg.schedule()?;
    let mut net = ScoreNet::new(cfg.network()?, cfg.network.init_seed)?;
    let dir = output_dir(&args.out)?;
    write_snapshot(&dir, &cfg, "train")?;
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    let train_cfg = cfg.train_config();
    let log = train(&mut net, &data, &schedule, &train_cfg, |step, net| {
        let ck = Checkpoint {
            net: net.clone(),
            schedule: schedule.clone(),
            step,
            projection: Some(proj),
        };
        save_checkpoint(&ck_dir.join(format!("step_{step:07}.ckpt")), &ck)
    })?;
    log.save_csv(&dir.join("loss.csv"))?;
    let ck = Checkpoint {
        net,
        schedule,
        step: train_cfg.steps,
        projection: Some(proj),
    };
    save_checkpoint(&dir.join("model.ckpt"), &ck)?;
    let n = log.records.len();
    let tail = n.saturating_sub(100)..n;
    println!(
        "trained {} steps on {} images; final mean loss {:.4e}; checkpoint {}",
        n,
        data.batch(),
        log.mean_loss(tail),
        dir.join("model.ckpt").display()
    );
    Ok(Outcome::ok())
}

fn cmd_sample(mut cfg: RunConfig, args: SampleArgs) -> Result<Outcome> {
    let ck = load_model(&args.checkpoint)?;
    adopt_checkpoint(&mut cfg, &ck);
    apply_sampler_flags(&mut cfg, &args.sampler)?;
    validate(&cfg)?;
    let proj = cfg.projection();
    let dir = output_dir(&args.out)?;
    write_snapshot(&dir, &cfg, "sample")?;
    let images = sample(
        &ck.net,
        &ck.schedule,
        &cfg.sampler_config(),
        args.count,
        &proj,
    )?;
    let mut written = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let out = dir.join(format!("sample_{i:04}.{RANGE_IMAGE_EXT}"));
        save_range_image(&out, img, &proj)?;
        if args.ply {
            save_cloud_ply(&out.with_extension("ply"), &unproject(img, &proj)?)?;
        }
        written.push(out);
    }
    write_manifest(&dir, &written)?;
    println!("wrote {} samples to {}", images.len(), dir.display());
    Ok(Outcome::ok())
}

#[derive(Serialize)]
struct DensifyEntry {
    input: String,
    heldout_pixels: usize,
    mae: Option<f64>,
    nearest_row_mae: Option<f64>,
}

fn cmd_densify(mut cfg: RunConfig, args: DensifyArgs) -> Result<Outcome> {
    let ck = load_model(&args.checkpoint)?;
    adopt_checkpoint(&mut cfg, &ck);
    apply_sampler_flags(&mut cfg, &args.sampler)?;
    if let Some(s) = args.stride {
        cfg.densify.stride = s;
    }
    if let Some(l) = args.lambda {
        cfg.densify.lambda = l;
    }
    if args.per_level_scaling {
        cfg.densify.per_level_scaling = true;
    }
    validate(&cfg)?;
    let proj = cfg.projection();
    let inputs = collect_inputs(&args.inputs, RANGE_IMAGE_EXT)?;
    let references = load_images(&inputs, Some(&proj))?;
    let selection = BeamSelection::Stride(cfg.densify.stride);
    let kept = selection.rows(proj.height)?;
    let dir = output_dir(&args.out)?;
    write_snapshot(&dir, &cfg, "densify")?;
    let mut tasks = Vec::with_capacity(references.len());
    let mut sparse = Vec::with_capacity(references.len());
    for r in &references {
        let (sp, rows) = subsample_beams(r, &selection)?;
        let mut task = DensifyTask::new(&sp, rows.and(sp.mask()), cfg.densify.lambda);
        task.per_level_scaling = cfg.densify.per_level_scaling;
        tasks.push(task);
        sparse.push((sp, rows));
    }
    let dense = densify_batch(&ck.net, &tasks, &ck.schedule, &cfg.sampler_config())?;
    let dense = RangeImage::batch_from_tensor(&proj, &dense)?;
    let mut report = Vec::new();
    let mut written = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let name = stem(input);
        let (sp, rows) = &sparse[k];
        save_range_image(
            &dir.join(format!("{name}_sparse.{RANGE_IMAGE_EXT}")),
            sp,
            &proj,
        )?;
        let out = dir.join(format!("{name}_dense.{RANGE_IMAGE_EXT}"));
        save_range_image(&out, &dense[k], &proj)?;
        if args.ply {
            save_cloud_ply(&out.with_extension("ply"), &unproject(&dense[k], &proj)?)?;
        }
        written.push(out);
        let eval = heldout_eval_mask(&references[k], rows);
        let (mae, nn) = if eval.count() > 0 {
            let baseline = nearest_row_baseline(sp, &kept)?;
            (
                Some(mae_densification(&dense[k], &references[k], &eval, &proj)?),
                Some(mae_densification(&baseline, &references[k], &eval, &proj)?),
            )
        } else {
            (None, None)
        };
        report.push(DensifyEntry {
            input: input.display().to_string(),
            heldout_pixels: eval.count(),
            mae,
            nearest_row_mae: nn,
        });
    }
    write_manifest(&dir, &written)?;
    fs::write(
        dir.join("densify.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "densified {} sweeps ({} of {} beams kept) into {}",
        inputs.len(),
        kept.len(),
        proj.height,
        dir.display()
    );
    Ok(Outcome::ok())
}

fn cmd_eval(cfg: &RunConfig, args: EvalArgs) -> Result<Outcome> {
    validate(cfg)?;
    let ref_paths = collect_inputs(std::slice::from_ref(&args.reference), RANGE_IMAGE_EXT)?;
    let cand_paths = collect_inputs(std::slice::from_ref(&args.candidate), RANGE_IMAGE_EXT)?;
    let load_clouds = |paths: &[PathBuf]| -> Result<(Vec<RangeImage>, Vec<PointCloud>)> {
        let mut imgs = Vec::new();
        let mut clouds = Vec::new();
        for p in paths {
            let (img, pcfg) = load_range_image(p)?;
            clouds.push(unproject(&img, &pcfg)?);
            imgs.push(img);
        }
        Ok((imgs, clouds))
    };
    let (ref_imgs, ref_clouds) = load_clouds(&ref_paths)?;
    let (cand_imgs, cand_clouds) = load_clouds(&cand_paths)?;
    let m = &cfg.metrics;
    let (mmd, bandwidth, jsd) = compare_clouds(&ref_clouds, &cand_clouds, m)?;
    let frd_result = {
        let ck = args.checkpoint.as_deref().map(load_model).transpose()?;
        let extractor: Option<Box<dyn FeatureExtractor + '_>> = match &ck {
            Some(ck) => Some(Box::new(NetworkFeatures {
                net: &ck.net,
                level: ck.schedule.level(ck.schedule.len() - 1),
            })),
            None if args.pixel_frd => Some(Box::new(PixelFeatures)),
            None => None,
        };
        match extractor {
            Some(ex) => {
                let a = RangeImage::batch_to_tensor(&ref_imgs)?;
                let b = RangeImage::batch_to_tensor(&cand_imgs)?;
                Some(frd(&a, &b, ex.as_ref(), m.frd_subsample, m.seed)?)
            }
            None => None,
        }
    };
    let report = MetricReport {
        mmd,
        mmd_bandwidth: bandwidth,
        jsd,
        frd: frd_result,
        config: m.clone(),
        reference_count: ref_paths.len(),
        candidate_count: cand_paths.len(),
        reference_manifest_sha256: Some(manifest_sha256(&ref_paths)?),
        candidate_manifest_sha256: Some(manifest_sha256(&cand_paths)?),
    };
    let dir = output_dir(&args.out)?;
    write_snapshot(&dir, cfg, "eval")?;
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let bins = m.jsd_bins;
    let counts = |clouds: &[PointCloud]| pooled_bev(clouds, bins, m.extent);
    write_bev_png(&dir.join("bev_reference.png"), &counts(&ref_clouds)?, bins)?;
    write_bev_png(&dir.join("bev_candidate.png"), &counts(&cand_clouds)?, bins)?;
    if let Some(f) = &report.frd {
        if f.ridge_added {
            eprintln!("note: covariance was rank deficient; ridge added for FRD");
        }
    }
    println!(
        "MMD {:.4e} (h = {:.4e})  JSD {:.4e}{}",
        report.mmd,
        report.mmd_bandwidth,
        report.jsd,
        report
            .frd
            .as_ref()
            .map(|f| format!("  FRD {:.4e}", f.value))
            .unwrap_or_default()
    );
    if report.mmd.is_nan() || report.jsd.is_nan() {
        bail!("metric evaluation produced NaN");
    }
    Ok(Outcome::ok())
}
