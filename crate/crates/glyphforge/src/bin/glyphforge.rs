//! Command-line front end: data generation, training, editing,
//! evaluation and attention inspection over one shared TOML config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use image::RgbImage;

use glyphforge::checkpoint::{read_meta, save_checkpoint, CheckpointMeta, CHECKPOINT_SCHEMA};
use glyphforge::config::RunConfig;
use glyphforge::data::{generate_corpus_with_workers, load_sample};
use glyphforge::diffusion::{
    prepare_batch, sample_edit, select_layers_for_batch, token_maps_for_sample, train,
    train_codec, EditModel, LatentBundle, NoiseSchedule, StyleMode, TrainContext, TrainOptions,
    CODEC_KIND,
};
use glyphforge::eval::{evaluate, write_sidecar, EditSidecar};
use glyphforge::glyph::BBox;
use glyphforge::layout::{binarize, derive_box_pipeline, gaussian_blur, layer_score, TokenMaps};
use glyphforge::perception::{load_recognizer, train_recognizer, RecognizerTrainOptions};
use glyphforge::rngutil::RngStream;

#[derive(Parser)]
#[command(name = "glyphforge", version, about = "Glyph-conditioned text editing in images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration TOML; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            None => Ok(RunConfig::default()),
            Some(p) => {
                RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus.
    SynthData {
        #[command(flatten)]
        config: ConfigArg,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corpus directory (created if absent).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Train the denoiser on a generated corpus.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Corpus directory from synth-data.
        #[arg(long)]
        data: PathBuf,
        /// 1 = conditioning only, 2 = style phases, all = full schedule.
        #[arg(long, default_value = "all")]
        phase: String,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Qualified recognizer checkpoint (needed when β ≠ 0 and for
        /// phase 2).
        #[arg(long)]
        recognizer: Option<PathBuf>,
        /// Pretrained autoencoder checkpoint (trained codec configs).
        #[arg(long)]
        codec_checkpoint: Option<PathBuf>,
        /// Run directory; `runs/<config-hash>_<timestamp>` when omitted.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Stop after this many total steps (smoke runs).
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Train the stand-in recognizer and report held-out accuracy.
    TrainRecognizer {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1500)]
        steps: usize,
        /// Held-out samples scored after training.
        #[arg(long, default_value_t = 200)]
        holdout: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the tiny latent autoencoder and report holdout PSNR.
    TrainCodec {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
    },
    /// Replace the text inside a region of an image.
    Edit {
        #[command(flatten)]
        config: ConfigArg,
        /// Input image (model resolution).
        #[arg(long)]
        image: PathBuf,
        /// Edit region as x0,y0,x1,y1 pixels.
        #[arg(long, value_parser = parse_box)]
        mask_box: BBox,
        /// Replacement text.
        #[arg(long)]
        text: String,
        /// Style reference as path:transcription; the default styles
        /// from the edit region itself when a recognizer is attached.
        #[arg(long, conflicts_with = "no_style")]
        style_ref: Option<String>,
        /// Disable the style branch.
        #[arg(long)]
        no_style: bool,
        /// Denoiser checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Recognizer checkpoint (enables style preservation).
        #[arg(long)]
        recognizer: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampling steps (full schedule when omitted).
        #[arg(long)]
        steps: Option<usize>,
        /// Output PNG; a JSON sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score edited images against their corpus ground truth.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory of edited PNGs + sidecars.
        #[arg(long)]
        edited: PathBuf,
        /// Corpus manifest (the file or its directory).
        #[arg(long)]
        manifest: PathBuf,
        /// Recognizer checkpoint.
        #[arg(long)]
        recognizer: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Dump cross-attention maps, derived boxes and per-layer IoU for
    /// one corpus sample.
    InspectAttention {
        #[command(flatten)]
        config: ConfigArg,
        /// Denoiser checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample directory from synth-data.
        #[arg(long)]
        sample: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Noising timestep for the probe forward pass (default T/2).
        #[arg(long)]
        timestep: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_box(s: &str) -> std::result::Result<BBox, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err("expected x0,y0,x1,y1".into());
    }
    let mut v = [0i32; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p
            .trim()
            .parse::<i32>()
            .map_err(|e| format!("bad coordinate {p:?}: {e}"))?;
    }
    BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            config,
            n,
            seed,
            out,
            workers,
        } => cmd_synth_data(&config.load()?, n, seed, &out, workers),
        Command::Train {
            config,
            data,
            phase,
            resume,
            recognizer,
            codec_checkpoint,
            run_dir,
            max_steps,
        } => cmd_train(
            &config.load()?,
            &data,
            &phase,
            resume,
            recognizer,
            codec_checkpoint,
            run_dir,
            max_steps,
        ),
        Command::TrainRecognizer {
            config,
            out,
            steps,
            holdout,
            seed,
        } => cmd_train_recognizer(&config.load()?, &out, steps, holdout, seed),
        Command::TrainCodec { config, out, steps } => cmd_train_codec(&config.load()?, &out, steps),
        Command::Edit {
            config,
            image,
            mask_box,
            text,
            style_ref,
            no_style,
            checkpoint,
            recognizer,
            seed,
            steps,
            out,
        } => cmd_edit(
            &config.load()?,
            &image,
            mask_box,
            &text,
            style_ref,
            no_style,
            &checkpoint,
            recognizer,
            seed,
            steps,
            &out,
        ),
        Command::Eval {
            config,
            edited,
            manifest,
            recognizer,
            out,
            workers,
        } => cmd_eval(&config.load()?, &edited, &manifest, &recognizer, &out, workers),
        Command::InspectAttention {
            config,
            checkpoint,
            sample,
            out,
            timestep,
            seed,
        } => cmd_inspect(&config.load()?, &checkpoint, &sample, &out, timestep, seed),
    }
}

fn save_config_into(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    cfg.save(&dir.join("config.toml"))?;
    Ok(())
}

fn cmd_synth_data(cfg: &RunConfig, n: usize, seed: u64, out: &Path, workers: usize) -> Result<()> {
    save_config_into(cfg, out)?;
    let manifest = generate_corpus_with_workers(n, seed, out, cfg, None, workers)?;
    println!(
        "corpus {}: {} samples ({} failed), seed {}, config {}",
        out.display(),
        manifest.sample_ids.len(),
        manifest.failed.len(),
        seed,
        cfg.short_hash()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    phase: &str,
    resume: Option<PathBuf>,
    recognizer: Option<PathBuf>,
    codec_checkpoint: Option<PathBuf>,
    run_dir: Option<PathBuf>,
    max_steps: Option<usize>,
) -> Result<()> {
    let schedule_total = cfg.steps_phase1 + cfg.steps_phase2_adapter + cfg.steps_phase2_joint;
    let target = match phase {
        "1" => cfg.steps_phase1,
        "2" | "all" => schedule_total,
        other => bail!("unknown phase {other:?}: expected 1, 2 or all"),
    };
    let target = max_steps.map_or(target, |m| m.min(target));

    if phase == "2" && resume.is_none() {
        bail!("phase 2 continues from a phase-1 checkpoint; pass one with --resume");
    }
    if let Some(ckpt) = &resume {
        let meta = read_meta(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
        if phase == "2" && meta.step < cfg.steps_phase1 {
            bail!(
                "checkpoint {} stops at step {}, before the end of phase 1 ({})",
                ckpt.display(),
                meta.step,
                cfg.steps_phase1
            );
        }
        if meta.step >= target {
            println!(
                "nothing to do: {} is already at step {} of {}",
                ckpt.display(),
                meta.step,
                target
            );
            return Ok(());
        }
    }

    let run_dir = run_dir.unwrap_or_else(|| {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        PathBuf::from("runs").join(format!("{}_{ts}", cfg.short_hash()))
    });
    save_config_into(cfg, &run_dir)?;

    let mut opts = TrainOptions::new(data, &run_dir);
    opts.recognizer_checkpoint = recognizer;
    opts.codec_checkpoint = codec_checkpoint;
    opts.resume = resume;
    opts.max_steps = Some(target);

    println!("run {} (config {})", run_dir.display(), cfg.short_hash());
    let summary = train(cfg, &opts)?;
    println!(
        "trained to step {} (loss {:.5}); final checkpoint {}",
        summary.final_step,
        summary.final_loss.total,
        summary.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_train_recognizer(
    cfg: &RunConfig,
    out: &Path,
    steps: usize,
    holdout: usize,
    seed: u64,
) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let opts = RecognizerTrainOptions {
        steps,
        holdout,
        seed,
        ..Default::default()
    };
    let (_store, _rec, report) = train_recognizer(cfg, &opts, Some(out))?;
    println!(
        "recognizer {}: {:.4} exact match on {} held-out samples (loss {:.4}, config {})",
        out.display(),
        report.holdout_accuracy,
        report.holdout_samples,
        report.final_loss,
        cfg.short_hash()
    );
    Ok(())
}

fn cmd_train_codec(cfg: &RunConfig, out: &Path, steps: usize) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let device = candle_core::Device::Cpu;
    let (store, report) = train_codec(cfg, steps, &device)?;
    let meta = CheckpointMeta {
        kind: CODEC_KIND.to_string(),
        config_hash: cfg.content_hash(),
        alphabet_hash: cfg.alphabet()?.hash(),
        step: steps,
        phase: "codec".to_string(),
        schema_version: CHECKPOINT_SCHEMA,
    };
    save_checkpoint(out, &store, &meta)?;
    println!(
        "codec {}: holdout PSNR {:.2} dB after {} steps (config {})",
        out.display(),
        report.holdout_psnr,
        report.steps,
        cfg.short_hash()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_edit(
    cfg: &RunConfig,
    image: &Path,
    mask_box: BBox,
    text: &str,
    style_ref: Option<String>,
    no_style: bool,
    checkpoint: &Path,
    recognizer: Option<PathBuf>,
    seed: u64,
    steps: Option<usize>,
    out: &Path,
) -> Result<()> {
    let device = candle_core::Device::Cpu;
    let input = image::open(image)
        .with_context(|| format!("opening {}", image.display()))?
        .to_rgb8();
    let mut model = EditModel::load(checkpoint, cfg, &device)?;
    if let Some(rec) = &recognizer {
        model.attach_recognizer(rec)?;
    }

    let style = if no_style {
        StyleMode::Off
    } else if let Some(spec) = &style_ref {
        let (path, transcription) = spec
            .rsplit_once(':')
            .filter(|(p, t)| !p.is_empty() && !t.is_empty())
            .ok_or_else(|| anyhow::anyhow!("--style-ref wants path:transcription, got {spec:?}"))?;
        let reference = image::open(path)
            .with_context(|| format!("opening style reference {path}"))?
            .to_rgb8();
        StyleMode::Reference {
            image: reference,
            text: transcription.to_string(),
        }
    } else if model.ctx.style.is_some() && model.ctx.recognizer.is_some() {
        StyleMode::Preserve
    } else {
        StyleMode::Off
    };
    let style_name = match &style {
        StyleMode::Off => "off",
        StyleMode::Preserve => "preserve",
        StyleMode::Reference { .. } => "reference",
    };

    let steps = steps.unwrap_or(cfg.t_steps);
    let edit = sample_edit(&model, &input, mask_box, text, &style, steps, seed)?;

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    edit.image.save(out)?;
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "edit".to_string());
    let sidecar_path = out.with_extension("json");
    write_sidecar(
        &sidecar_path,
        &EditSidecar {
            sample_id: stem,
            text: text.to_string(),
            region: [edit.region.x0, edit.region.y0, edit.region.x1, edit.region.y1],
            seed,
            steps,
            config_hash: cfg.content_hash(),
        },
    )?;
    println!(
        "edited {} -> {} (style {}, {} steps, seed {}, config {})",
        image.display(),
        out.display(),
        style_name,
        steps,
        seed,
        cfg.short_hash()
    );
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    edited: &Path,
    manifest: &Path,
    recognizer: &Path,
    out: &Path,
    workers: usize,
) -> Result<()> {
    let corpus_dir = if manifest.is_file() {
        manifest
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
    } else {
        manifest
    };
    let alphabet = cfg.alphabet()?;
    let (_store, rec, _meta) = load_recognizer(recognizer, cfg, &alphabet)?;
    save_config_into(cfg, out)?;
    let outcome = evaluate(edited, corpus_dir, &rec, &alphabet, Some(out), workers)?;
    let r = &outcome.report;
    println!(
        "eval {}: acc {:.4}, ned {:.4} over {} samples ({} missing){}",
        out.display(),
        r.acc,
        r.ned_mean,
        r.n_samples,
        r.n_missing,
        match r.style_distance_mean {
            Some(d) => format!(", style distance {d:.4}"),
            None => String::new(),
        }
    );
    Ok(())
}

fn draw_rect(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let (w, h) = (img.width() as i32, img.height() as i32);
    let px = image::Rgb(color);
    for x in b.x0.max(0)..b.x1.min(w) {
        for y in [b.y0, b.y1 - 1] {
            if (0..h).contains(&y) {
                img.put_pixel(x as u32, y as u32, px);
            }
        }
    }
    for y in b.y0.max(0)..b.y1.min(h) {
        for x in [b.x0, b.x1 - 1] {
            if (0..w).contains(&x) {
                img.put_pixel(x as u32, y as u32, px);
            }
        }
    }
}

fn save_map(grid: &glyphforge::grid::Grid, scale: f32, path: &Path) -> Result<()> {
    let mut g = grid.clone();
    if scale > 0.0 {
        for v in g.data_mut() {
            *v /= scale;
        }
    }
    g.to_gray_image().save(path)?;
    Ok(())
}

fn cmd_inspect(
    cfg: &RunConfig,
    checkpoint: &Path,
    sample_dir: &Path,
    out: &Path,
    timestep: Option<usize>,
    seed: u64,
) -> Result<()> {
    let device = candle_core::Device::Cpu;
    let (store, _meta) = {
        let meta = read_meta(checkpoint)?;
        glyphforge::checkpoint::check_compat(
            &meta,
            glyphforge::diffusion::DENOISER_KIND,
            Some(&cfg.content_hash()),
            &cfg.alphabet()?.hash(),
        )?;
        glyphforge::checkpoint::load_checkpoint(checkpoint, &device)?
    };
    let ctx = TrainContext::from_store(cfg, &device, store)?;
    let sample = load_sample(sample_dir)?;
    let t = timestep.unwrap_or(cfg.t_steps / 2);
    if t >= cfg.t_steps {
        bail!("timestep {t} out of range [0, {})", cfg.t_steps);
    }

    let batch = prepare_batch(&ctx, &[&sample], false, seed)?;
    let dims = batch.z0.dims().to_vec();
    let mut rng = RngStream::derive(seed, "inspect-noise", 0);
    let eps = NoiseSchedule::draw_training_noise(&mut rng, &dims, 0.0, &device)?;
    let z_t = ctx.schedule.add_noise_batch(&batch.z0, &eps, &[t])?;
    let x_in = LatentBundle {
        noisy_latent: z_t,
        masked_image_latent: batch.masked_latent.clone(),
        mask_down: batch.mask_down.clone(),
        glyph_latent: batch.glyph_latent.clone(),
    }
    .concat()?;
    let fwd = ctx.denoiser.forward(&x_in, &[t], &batch.cond, None)?;

    let (_b, _c, ph, pw) = batch.clean.dims4()?;
    let model_hw = (ph, pw);
    let selected = select_layers_for_batch(&fwd.captures, &batch, cfg, model_hw)?;
    let params = cfg.layout_params();
    let gts = &batch.gt_boxes[0];
    let chars: Vec<char> = sample.text.chars().collect();

    fs::create_dir_all(out)?;
    save_config_into(cfg, out)?;

    let mut layers_json = Vec::new();
    for cap in &fwd.captures {
        let maps = token_maps_for_sample(cap, 0, gts.len())?;
        let is_selected = selected.contains(&cap.layer_id);
        let gt_only: Vec<BBox> = gts.iter().flatten().copied().collect();
        let score = layer_score(
            &TokenMaps {
                layer_id: cap.layer_id,
                maps: maps
                    .maps
                    .iter()
                    .zip(gts)
                    .filter(|(_, g)| g.is_some())
                    .map(|(m, _)| m.clone())
                    .collect(),
            },
            &gt_only,
            &params,
            model_hw,
        );

        let mut tokens_json = Vec::new();
        for (k, map) in maps.maps.iter().enumerate() {
            let derived = derive_box_pipeline(map, &params, model_hw);
            let gt = gts[k];
            let iou = match (&derived, &gt) {
                (Some(d), Some(g)) => d.iou(g),
                _ => 0.0,
            };
            tokens_json.push(serde_json::json!({
                "token": k,
                "char": chars.get(k).map(|c| c.to_string()),
                "gt_box": gt.map(|g| [g.x0, g.y0, g.x1, g.y1]),
                "derived_box": derived.map(|d| [d.x0, d.y0, d.x1, d.y1]),
                "iou": iou,
            }));

            if is_selected {
                let l = cap.layer_id;
                save_map(map, map.max_value(), &out.join(format!("l{l}_t{k}_raw.png")))?;
                let bin = binarize(map, params.threshold);
                save_map(&bin, 255.0, &out.join(format!("l{l}_t{k}_bin.png")))?;
                let blur = gaussian_blur(&bin, params.blur_kernel, params.blur_sigma);
                save_map(&blur, 255.0, &out.join(format!("l{l}_t{k}_blur.png")))?;
                let mut overlay = sample.image.clone();
                if let Some(g) = &gt {
                    draw_rect(&mut overlay, g, [0, 200, 0]);
                }
                if let Some(d) = &derived {
                    draw_rect(&mut overlay, d, [220, 0, 0]);
                }
                overlay.save(out.join(format!("l{l}_t{k}_overlay.png")))?;
            }
        }
        layers_json.push(serde_json::json!({
            "layer_id": cap.layer_id,
            "selected": is_selected,
            "score": score,
            "tokens": tokens_json,
        }));
    }

    let doc = serde_json::json!({
        "sample_id": sample.sample_id,
        "text": sample.text,
        "timestep": t,
        "seed": seed,
        "config_hash": cfg.content_hash(),
        "selected_layers": selected,
        "layers": layers_json,
    });
    fs::write(out.join("iou.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    println!(
        "inspected {} at t={t}: selected layers {:?} -> {}",
        sample.sample_id,
        selected,
        out.display()
    );
    Ok(())
}
