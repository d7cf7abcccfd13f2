use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use pidg_core::assets::{read_json, read_scene, write_scene, SceneAssets};
use pidg_core::flow::FlowField;
use pidg_core::image::Image;
use pidg_core::io::{write_depth, write_flow, write_ppm, DepthMap};
use pidg_core::losses::psnr;
use pidg_core::render::Camera;
use pidg_core::scenegen::{generate, SceneSpec};
use pidg_core::train::{load_checkpoint, run, Ablation, RunConfig, Trainer};

#[derive(Parser)]
#[command(name = "pidg", version, about = "Physics-informed deformable Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene from a JSON spec.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a scene directory; writes metrics.csv and checkpoints.
    Train {
        /// Run configuration (JSON). Not needed with --resume.
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Iteration budget; with --resume, the iteration to stop at.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        ablate: Option<Ablation>,
        /// Continue from a checkpoint, using its embedded configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Scene directory, overriding the configuration.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Render a checkpoint at time `t`.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        t: f64,
        /// Training camera to render from.
        #[arg(long, default_value_t = 0, conflicts_with = "pose")]
        camera: usize,
        /// Camera as JSON instead of a training camera.
        #[arg(long)]
        pose: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "color,depth")]
        emit: Vec<Emit>,
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against its scene; prints JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Emit {
    Color,
    Depth,
    Flow,
    Quiver,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    let result = match cli.command {
        Command::Synth { config, out, seed } => synth(&config, &out, seed),
        Command::Train {
            config,
            out,
            seed,
            iters,
            ablate,
            resume,
            scene,
        } => train(config, out, seed, iters, ablate, resume, scene),
        Command::Render {
            checkpoint,
            t,
            camera,
            pose,
            out,
            emit,
            scene,
        } => render(&checkpoint, t, camera, pose, &out, &emit, scene),
        Command::Eval { checkpoint, scene, out } => eval(&checkpoint, scene, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("PIDG_THREADS") else { return Ok(()) };
    let n: usize = v.parse().with_context(|| format!("PIDG_THREADS={v} is not a thread count"))?;
    if n == 0 {
        bail!("PIDG_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: SceneSpec = read_json(config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let scene = generate(&spec)?;
    write_scene(&scene, out)?;
    eprintln!("wrote {} frames to {}", scene.frames(), out.display());
    Ok(())
}

/// Relative scene paths in a config file are resolved against its directory.
fn resolve(base: Option<&Path>, p: &str) -> PathBuf {
    let p = Path::new(p);
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

fn load_assets(dir: &Path, config: &RunConfig) -> Result<SceneAssets> {
    let assets = read_scene(dir).with_context(|| format!("loading scene {}", dir.display()))?;
    let (w, h) = assets.data.size();
    if [w, h] != config.image_size {
        bail!("scene is {w}×{h} but image_size is {:?}", config.image_size);
    }
    Ok(assets)
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    iters: Option<usize>,
    ablate: Option<Ablation>,
    resume: Option<PathBuf>,
    scene: Option<PathBuf>,
) -> Result<()> {
    let mut trainer = if let Some(ck_path) = &resume {
        if seed.is_some() || ablate.is_some() || config.is_some() {
            bail!("--resume uses the checkpoint's configuration; drop --config, --seed and --ablate");
        }
        let ck = load_checkpoint(ck_path).with_context(|| format!("reading {}", ck_path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&ck.config).context("checkpoint configuration")?;
        let dir = scene.clone().unwrap_or_else(|| PathBuf::from(&cfg.scene));
        let assets = load_assets(&dir, &cfg)?;
        Trainer::from_checkpoint(&ck, assets.data)?
    } else {
        let path = config.expect("clap requires --config without --resume");
        let mut cfg: RunConfig = read_json(&path)?;
        let base = path.parent();
        cfg.scene = match &scene {
            Some(s) => s.display().to_string(),
            None => resolve(base, &cfg.scene).display().to_string(),
        };
        if let Some(o) = &out {
            cfg.out = o.display().to_string();
        } else {
            cfg.out = resolve(base, &cfg.out).display().to_string();
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(n) = iters {
            cfg.iterations = n;
        }
        if let Some(a) = ablate {
            cfg.ablation = a;
        }
        cfg.validate()?;
        let assets = load_assets(Path::new(&cfg.scene), &cfg)?;
        Trainer::new(cfg, assets.data)?
    };
    let out_dir = match (&out, &resume) {
        (Some(o), _) => o.clone(),
        _ => PathBuf::from(&trainer.config.out),
    };
    if out_dir.as_os_str().is_empty() {
        bail!("no output directory: pass --out or set `out` in the configuration");
    }
    let until = match (&resume, iters) {
        (Some(_), Some(n)) => n,
        _ => trainer.config.iterations,
    };
    if until < trainer.iteration {
        bail!("checkpoint is already at iteration {}", trainer.iteration);
    }
    let start = trainer.iteration;
    let result = run(&mut trainer, &out_dir, until)?;
    if let Some(last) = result.metrics.last() {
        eprintln!(
            "iterations {}..{}: loss {:.6}, psnr {:.2} dB, {} gaussians",
            start + 1,
            last.iter,
            last.loss_total,
            last.psnr,
            last.num_gaussians
        );
    }
    for p in &result.checkpoints {
        eprintln!("checkpoint {}", p.display());
    }
    Ok(())
}

fn restore(checkpoint: &Path, scene: Option<PathBuf>) -> Result<(Trainer<f64>, SceneAssets)> {
    let ck = load_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let cfg: RunConfig = serde_json::from_str(&ck.config).context("checkpoint configuration")?;
    let dir = scene.unwrap_or_else(|| PathBuf::from(&cfg.scene));
    let assets = load_assets(&dir, &cfg)?;
    let trainer = Trainer::from_checkpoint(&ck, assets.data.clone())?;
    Ok((trainer, assets))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn render(
    checkpoint: &Path,
    t: f64,
    camera: usize,
    pose: Option<PathBuf>,
    out: &Path,
    emit: &[Emit],
    scene: Option<PathBuf>,
) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        bail!("t = {t} outside [0, 1]");
    }
    let (trainer, _) = restore(checkpoint, scene)?;
    let data = trainer.data();
    let cam: Camera<f64> = match &pose {
        Some(p) => {
            let c: Camera<f64> = read_json(p)?;
            c.validate()?;
            c
        }
        None => data
            .cameras
            .get(camera)
            .cloned()
            .with_context(|| format!("camera {camera} out of range ({} cameras)", data.cameras.len()))?,
    };
    fs::create_dir_all(out)?;
    // Flow looks one frame interval ahead, clamped to the end of the clip.
    let dt = 1.0 / (data.frames() - 1) as f64;
    let pair = trainer.flow_pair(&cam, t, (t + dt).min(1.0))?;
    let frame = &pair.render;
    let color = Image::from_pixels(frame.width, frame.height, &frame.color);
    if pose.is_none() {
        if let Some(f) = data.times.iter().position(|&ft| ft == t) {
            if f == camera {
                eprintln!("psnr {:.4} dB vs frame {f}", psnr(&color, &data.images[f])?);
            }
        }
    }
    for e in emit {
        match e {
            Emit::Color => write_ppm(&mut create(&out.join("color.ppm"))?, &color)?,
            Emit::Depth => {
                let depth = DepthMap {
                    width: frame.width,
                    height: frame.height,
                    data: frame.depth.clone(),
                };
                write_depth(&mut create(&out.join("depth.dep"))?, &depth)?;
            }
            Emit::Flow => {
                write_flow(&mut create(&out.join("flow_g.flo"))?, &pair.flow_g)?;
                write_flow(&mut create(&out.join("flow_v.flo"))?, &pair.flow_v)?;
            }
            Emit::Quiver => {
                let quiver = draw_quiver(&color, &trainer, &cam, t)?;
                write_ppm(&mut create(&out.join("quiver.ppm"))?, &quiver)?;
            }
        }
    }
    Ok(())
}

/// Velocity arrows of the dynamic particles over a dimmed color render.
fn draw_quiver(color: &Image<f64>, trainer: &Trainer<f64>, cam: &Camera<f64>, t: f64) -> Result<Image<f64>> {
    let mut img = color.clone();
    for p in img.data.iter_mut() {
        *p *= 0.5;
    }
    let pose = trainer.posed(t, true)?;
    let state = trainer.particle_state(t)?;
    let dt = 1.0 / (trainer.data().frames() - 1) as f64;
    for ((p, x), (v, _)) in trainer.cloud.particles.iter().zip(&pose.mu).zip(&state) {
        if !p.dynamic {
            continue;
        }
        let (a, z) = cam.project_world(x);
        if z <= 0.0 || !cam.in_image(a) {
            continue;
        }
        let d = pidg_core::flow::project_velocity_at(cam, x, v);
        // Arrows show one frame interval of motion, magnified for legibility.
        let b = [a[0] + 4.0 * d[0] * dt, a[1] + 4.0 * d[1] * dt];
        line(&mut img, a, b, [1.0, 0.9, 0.1]);
        line(&mut img, a, a, [1.0, 0.1, 0.1]);
    }
    Ok(img)
}

fn line(img: &mut Image<f64>, a: [f64; 2], b: [f64; 2], rgb: [f64; 3]) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).clamp(1, 4 * img.width.max(img.height));
    for s in 0..=steps {
        let u = s as f64 / steps as f64;
        let (x, y) = ((a[0] + u * (b[0] - a[0])).round(), (a[1] + u * (b[1] - a[1])).round());
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width && (y as usize) < img.height {
            img.set(x as usize, y as usize, rgb);
        }
    }
}

fn eval(checkpoint: &Path, scene: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let (trainer, assets) = restore(checkpoint, scene)?;
    let truth: &[FlowField<f64>] = &assets.motion_flow;
    let report = trainer.evaluate(Some(truth))?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(p) = out {
        let mut w = create(&p)?;
        writeln!(w, "{text}")?;
        w.flush()?;
    }
    Ok(())
}
