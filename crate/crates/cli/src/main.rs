//! Command-line surface: scene synthesis and fitting, payload embedding,
//! rendering, recovery, evaluation, robustness sweeps and gradient
//! self-checks. Every subcommand takes a JSON config plus dotted-key
//! overrides and banner-logs the resolved settings, so a run is fully
//! described by its command line.
//!
//! Exit codes: 0 success, 2 validation/config error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use gstego::embed::Payload;
use gstego::io::{load_checkpoint, load_ply, load_png, save_ply, save_png, Checkpoint};
use gstego::perturb::{sweep_csv, sweep_svg, PerturbKind, PerturbSpec};
use gstego::render::{tile_render, Camera, CameraRig, RenderOptions};
use gstego::train::{
    base_scene_of, recover, robustness_sweep, EvalReport, Recovery, TrainConfig, Trainer,
};
use gstego::{config, fit, gradsuite, synth, Error, Image32, Real, Scene32};

#[derive(Parser)]
#[command(
    name = "gstego",
    version,
    about = "Hide a small image or bit string inside a 3D Gaussian splat scene"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config plumbing shared by the subcommands: file, overrides, and the
/// `--seed`/`--threads` conveniences (sugar for `--set seed=…`).
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; overrides apply on top of it.
    #[arg(long, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. --set lr=0.01 or --set embed.d_model=64.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's `threads`.
    #[arg(long)]
    threads: Option<usize>,
}

impl ConfigArgs {
    fn resolve<T: DeserializeOwned + Serialize>(&self, label: &str) -> Result<T> {
        let mut sets = self.set.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if let Some(t) = self.threads {
            sets.push(format!("threads={t}"));
        }
        let cfg: T = config::resolve(self.config.as_deref(), &sets)?;
        eprintln!("[{label}] resolved config: {}", config::banner(&cfg));
        Ok(cfg)
    }
}

/// Either/or payload source for `embed`.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct PayloadArgs {
    /// RGB image to hide.
    #[arg(long, value_name = "PNG")]
    payload_image: Option<PathBuf>,
    /// Bit string to hide, e.g. 0110100111.
    #[arg(long, value_name = "BITS")]
    payload_bits: Option<String>,
}

impl PayloadArgs {
    fn load(&self) -> Result<Payload<Real>> {
        if let Some(path) = &self.payload_image {
            return Ok(Payload::Image(load_png(path)?));
        }
        let s = self.payload_bits.as_ref().expect("clap group");
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(anyhow!("payload bits must be 0/1, found {other:?}")),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Payload::Bits(bits))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural textured base scene and write it as PLY.
    Synth {
        /// Output scene.
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit a fixed-count Gaussian scene to posed images.
    Fit {
        /// Capture manifest: {"images": [...], "rig": {...}}.
        capture: PathBuf,
        /// Output scene.
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train payload embedding on a base scene; writes the steganographic
    /// scene and a checkpoint that carries everything recovery needs.
    Embed {
        /// Clean base scene.
        base: PathBuf,
        #[command(flatten)]
        payload: PayloadArgs,
        /// Output steganographic scene.
        #[arg(long, value_name = "PLY")]
        out_ply: PathBuf,
        /// Output checkpoint.
        #[arg(long, value_name = "FILE")]
        out_checkpoint: PathBuf,
        /// Per-step metrics CSV.
        #[arg(long, value_name = "CSV")]
        metrics: Option<PathBuf>,
        /// Camera rig JSON; defaults to a 32-view orbit sized to the scene.
        #[arg(long, value_name = "JSON")]
        rig: Option<PathBuf>,
        /// Rig index of the checking view.
        #[arg(long, default_value_t = 0)]
        checking_index: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render one view of a scene to PNG.
    Render {
        /// Scene to render.
        scene: PathBuf,
        /// Output image.
        out: PathBuf,
        /// Camera rig JSON; defaults to an orbit sized to the scene.
        #[arg(long, value_name = "JSON")]
        rig: Option<PathBuf>,
        /// Rig index of the view to render.
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Decode the payload from a scene using a trained checkpoint.
    Recover {
        checkpoint: PathBuf,
        /// Scene to decode from (normally the stego PLY).
        scene: PathBuf,
        /// Write the recovered hidden image here.
        #[arg(long, value_name = "PNG")]
        out: Option<PathBuf>,
    },
    /// Full metric table for a checkpoint: held-out rendering fidelity plus
    /// payload recovery. Self-contained; the base scene rides in the file.
    Evaluate { checkpoint: PathBuf },
    /// Sweep a perturbation family over the checking-view render and score
    /// recovery at each level.
    Robustness {
        checkpoint: PathBuf,
        /// Write the sweep table here instead of stdout.
        #[arg(long, value_name = "CSV")]
        csv: Option<PathBuf>,
        /// Write an SVG plot of the sweep.
        #[arg(long, value_name = "SVG")]
        plot: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run every finite-difference gradient suite and print the matrix.
    Gradcheck,
}

/// Camera rig description accepted wherever a rig file is expected.
#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RigSpec {
    Orbit {
        count: usize,
        radius: f64,
        max_elevation_deg: f64,
        width: usize,
        height: usize,
        fov_y_deg: f64,
    },
    Cameras(Vec<Camera<Real>>),
}

impl RigSpec {
    fn build(&self) -> Result<CameraRig<Real>> {
        match self {
            RigSpec::Orbit { count, radius, max_elevation_deg, width, height, fov_y_deg } => {
                Ok(CameraRig::orbit(
                    *count,
                    *radius as Real,
                    *max_elevation_deg as Real,
                    *width,
                    *height,
                    *fov_y_deg as Real,
                )?)
            }
            RigSpec::Cameras(cams) => {
                if cams.is_empty() {
                    return Err(Error::Validation("rig has no cameras".into()).into());
                }
                Ok(CameraRig { cameras: cams.clone() })
            }
        }
    }
}

fn load_rig(path: &Path) -> Result<CameraRig<Real>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read rig {}", path.display()))?;
    let spec: RigSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("rig {} is malformed: {e}", path.display())))?;
    spec.build()
}

/// Inward-looking orbit scaled to the scene when no rig file is given.
fn default_rig(scene: &Scene32, res: usize) -> Result<CameraRig<Real>> {
    let radius = (1.6 * scene.diameter().max(0.5)).max(1e-3);
    Ok(CameraRig::orbit(32, radius, 40.0, res, res, 45.0)?)
}

/// Posed multi-view capture for `fit`: image paths are relative to the
/// manifest's directory.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptureSpec {
    images: Vec<PathBuf>,
    rig: RigSpec,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RenderConfig {
    /// Side length of the default orbit rig (ignored with --rig).
    resolution: usize,
    tile_size: usize,
    threads: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { resolution: 256, tile_size: 16, threads: 1 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RobustnessConfig {
    kind: PerturbKind,
    /// Sweep levels; defaults depend on the family.
    values: Option<Vec<f64>>,
    /// Seed for the additive-noise family.
    seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig { kind: PerturbKind::Jpeg, values: None, seed: 7 }
    }
}

impl RobustnessConfig {
    fn spec(&self) -> PerturbSpec {
        let values = self.values.clone().unwrap_or_else(|| match self.kind {
            PerturbKind::Jpeg => vec![90.0, 70.0, 50.0, 30.0, 10.0],
            PerturbKind::Blur => vec![0.0, 0.5, 1.0, 1.5, 2.0],
            PerturbKind::Noise => vec![0.0, 0.01, 0.02, 0.05, 0.1],
        });
        PerturbSpec { kind: self.kind, values }
    }
}

fn print_recovery(rec: &Recovery<Real>) {
    if let Some(p) = rec.psnr_hidden {
        println!("hidden_psnr_db {p:.3}");
    }
    if let Some(s) = rec.ssim_hidden {
        println!("hidden_ssim {s:.4}");
    }
    if let Some(bits) = &rec.bits {
        let s: String = bits.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
        println!("bits {s}");
    }
    if let Some(a) = rec.bit_acc {
        println!("bit_accuracy {a:.4}");
    }
    if let Some(l1) = rec.negative_l1_null {
        println!("clean_decode_l1_to_null {l1:.4}");
    }
    if let Some(s) = rec.negative_ssim_hidden {
        println!("clean_decode_ssim_vs_hidden {s:.4}");
    }
}

fn print_eval(rep: &EvalReport<Real>) {
    for (idx, p) in &rep.render_psnr_holdout {
        println!("holdout_view {idx} render_psnr_db {p:.3}");
    }
    if let Some(m) = rep.render_psnr_holdout_mean {
        println!("holdout_mean_render_psnr_db {m:.3}");
    }
    println!("checking_view_render_psnr_db {:.3}", rep.render_psnr_checking);
    print_recovery(&rep.recovery);
}

fn banner_checkpoint(label: &str, ck: &Checkpoint<Real>) {
    eprintln!(
        "[{label}] checkpoint seed {} config: {}",
        ck.seed,
        serde_json::to_string_pretty(&ck.config).unwrap_or_else(|e| format!("<{e}>"))
    );
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Synth { out, cfg } => {
            let cfg: synth::SynthConfig = cfg.resolve("synth")?;
            let scene: Scene32 = synth::synthesize(&cfg)?;
            save_ply(&scene, &out)?;
            eprintln!("[synth] wrote {} primitives to {}", scene.len(), out.display());
        }
        Cmd::Fit { capture, out, cfg } => {
            let cfg: fit::FitConfig = cfg.resolve("fit")?;
            let text = std::fs::read_to_string(&capture)
                .with_context(|| format!("cannot read capture {}", capture.display()))?;
            let spec: CaptureSpec = serde_json::from_str(&text).map_err(|e| {
                Error::Config(format!("capture {} is malformed: {e}", capture.display()))
            })?;
            let rig = spec.rig.build()?;
            let dir = capture.parent().unwrap_or_else(|| Path::new("."));
            let images = spec
                .images
                .iter()
                .map(|p| load_png::<Real>(&dir.join(p)))
                .collect::<gstego::Result<Vec<Image32>>>()?;
            let scene = fit::fit_scene(&images, &rig, &cfg)?;
            save_ply(&scene, &out)?;
            eprintln!("[fit] wrote {} primitives to {}", scene.len(), out.display());
        }
        Cmd::Embed {
            base,
            payload,
            out_ply,
            out_checkpoint,
            metrics,
            rig,
            checking_index,
            cfg,
        } => {
            let cfg: TrainConfig = cfg.resolve("embed")?;
            let base = load_ply(&base)?;
            let rig = match &rig {
                Some(path) => load_rig(path)?,
                None => default_rig(&base, cfg.render_res)?,
            };
            let payload = payload.load()?;
            let mut tr = Trainer::new(cfg, rig, checking_index, base, payload, None)?;
            tr.run(metrics.as_deref(), Some(&out_checkpoint))?;
            let scene = tr.generate_scene()?;
            save_ply(&scene, &out_ply)?;
            eprintln!(
                "[embed] wrote scene {} and checkpoint {}",
                out_ply.display(),
                out_checkpoint.display()
            );
            print_eval(&tr.evaluate()?);
        }
        Cmd::Render { scene, out, rig, view, cfg } => {
            let cfg: RenderConfig = cfg.resolve("render")?;
            let scene = load_ply(&scene)?;
            let rig = match &rig {
                Some(path) => load_rig(path)?,
                None => default_rig(&scene, cfg.resolution)?,
            };
            let cam = rig.cameras.get(view).ok_or_else(|| {
                Error::Validation(format!("view {view} out of range, rig has {}", rig.len()))
            })?;
            let opts = RenderOptions::<Real> {
                tile_size: cfg.tile_size,
                threads: cfg.threads,
                ..RenderOptions::default()
            };
            let r = tile_render(&scene, cam, &opts)?;
            let img = Image32::from_vec(r.width, r.height, 3, r.pixels)?;
            save_png(&img, &out)?;
            eprintln!("[render] wrote view {view} to {}", out.display());
        }
        Cmd::Recover { checkpoint, scene, out } => {
            let ck = load_checkpoint::<Real>(&checkpoint)?;
            banner_checkpoint("recover", &ck);
            let scene: Scene32 = load_ply(&scene)?;
            let rec = recover(&ck, &scene)?;
            if let (Some(path), Some(img)) = (&out, &rec.hidden) {
                save_png(img, path)?;
                eprintln!("[recover] wrote hidden image to {}", path.display());
            }
            print_recovery(&rec);
        }
        Cmd::Evaluate { checkpoint } => {
            let ck = load_checkpoint::<Real>(&checkpoint)?;
            banner_checkpoint("evaluate", &ck);
            let base = base_scene_of(&ck)?;
            let mut tr = Trainer::from_checkpoint(&ck, base)?;
            print_eval(&tr.evaluate()?);
        }
        Cmd::Robustness { checkpoint, csv, plot, cfg } => {
            let cfg: RobustnessConfig = cfg.resolve("robustness")?;
            let ck = load_checkpoint::<Real>(&checkpoint)?;
            let spec = cfg.spec();
            let report = robustness_sweep(&ck, &spec, cfg.seed)?;
            if !report.trained {
                eprintln!("[robustness] note: checkpoint is untrained; numbers describe the raw decoder");
            }
            let table = sweep_csv(&report.rows);
            match &csv {
                Some(path) => {
                    std::fs::write(path, &table)
                        .with_context(|| format!("cannot write {}", path.display()))?;
                    eprintln!("[robustness] wrote {}", path.display());
                }
                None => print!("{table}"),
            }
            if let Some(path) = &plot {
                let metric =
                    if report.rows.first().and_then(|r| r.ssim_hidden).is_some() {
                        "ssim_hidden"
                    } else {
                        "bit_acc"
                    };
                let title = format!("{:?} sweep", spec.kind).to_lowercase();
                let svg = sweep_svg(&[report.rows.clone()], metric, &title)?;
                std::fs::write(path, svg)
                    .with_context(|| format!("cannot write {}", path.display()))?;
                eprintln!("[robustness] wrote {}", path.display());
            }
        }
        Cmd::Gradcheck => {
            eprintln!("[gradcheck] deterministic finite-difference suites");
            let reports = gradsuite::full_suite()?;
            let mut failed = 0usize;
            for r in &reports {
                println!("{r}");
                if !r.pass() {
                    failed += 1;
                }
            }
            if failed > 0 {
                eprintln!("{failed} of {} gradient checks failed", reports.len());
                return Ok(ExitCode::from(3));
            }
            eprintln!("all {} gradient checks passed", reports.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<Error>().map(|e| e.exit_code()).unwrap_or(2);
            ExitCode::from(code as u8)
        }
    }
}
