use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use wildsplat_core::scene::synthetic::{generate_synthetic_scene, SyntheticConfig};
use wildsplat_core::scene::{load_scene, save_scene, validate_scene_dir, CameraView};
use wildsplat_core::trainer::{evaluate, MaskDump, TrainConfig, TrainState};
use wildsplat_server::protocol::{AppearanceSpec, Encoding, RenderRequest};
use wildsplat_server::snapshot::Snapshot;
use wildsplat_server::{Service, ServiceConfig};

#[derive(Parser)]
#[command(name = "wildsplat", version, about = "Gaussian splatting for photo collections with varying appearance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create or check scene directories.
    #[command(subcommand)]
    Scene(SceneCommand),
    /// Train on a scene; step reports go to stdout as JSON lines.
    Train(TrainArgs),
    /// Held-out evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Render one frame from a checkpoint.
    Render(RenderArgs),
    /// Serve a checkpoint over HTTP and WebSocket.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum SceneCommand {
    /// Generate a synthetic scene.
    Gen(GenArgs),
    /// Load a scene directory and report what is wrong with it, if anything.
    Validate { dir: PathBuf },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    gaussians: usize,
    #[arg(long, default_value_t = 24)]
    views: usize,
    #[arg(long, default_value_t = 4)]
    appearances: usize,
    /// Area fraction of each occluder rectangle (0 = none).
    #[arg(long, default_value_t = 0.0)]
    occluder_frac: f64,
    /// Fraction of images that get an occluder.
    #[arg(long, default_value_t = 0.3)]
    occluded_images: f64,
    /// Faint Gaussians on a distant shell in the initial cloud.
    #[arg(long, default_value_t = 0)]
    far_shell: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30_000)]
    iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    per_min: Option<f64>,
    #[arg(long)]
    per_max: Option<f64>,
    #[arg(long)]
    lambda_alpha: Option<f64>,
    #[arg(long)]
    lambda_ssim: Option<f64>,
    /// Disable the background model (and with it the alpha loss).
    #[arg(long)]
    no_bg: bool,
    /// Disable the robust mask.
    #[arg(long)]
    no_mask: bool,
    /// Write robust masks as PNG into this directory.
    #[arg(long)]
    dump_masks: Option<PathBuf>,
    /// Step interval for --dump-masks.
    #[arg(long, default_value_t = 500)]
    dump_every: u64,
    /// Save a checkpoint every N steps (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    resume: bool,
    /// Save and exit after this many steps; --resume picks up from there.
    #[arg(long)]
    stop_at: Option<u64>,
    /// Steps before the robust mask switches on.
    #[arg(long)]
    mask_warmup: Option<u64>,
    /// Write step reports here instead of stdout.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Scene holding the held-out images.
    #[arg(long)]
    scene: PathBuf,
    /// Fit each embedding on the left half and score the right half.
    #[arg(long, required = true)]
    half_protocol: bool,
    /// Embedding optimization steps (default: the checkpoint's setting).
    #[arg(long)]
    iterations: Option<usize>,
    /// Also write the table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Training image whose appearance to use.
    #[arg(long)]
    appearance: usize,
    /// Render from this training camera.
    #[arg(long, conflicts_with = "camera")]
    view: Option<usize>,
    /// Render from a camera given as JSON.
    #[arg(long)]
    camera: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Viewer bundle to serve at /.
    #[arg(long)]
    r#static: Option<PathBuf>,
    /// Appearance cache size in embeddings.
    #[arg(long, default_value_t = 16)]
    cache: usize,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Scene(SceneCommand::Gen(a)) => scene_gen(a),
        Command::Scene(SceneCommand::Validate { dir }) => {
            let summary = validate_scene_dir(&dir).with_context(|| format!("scene {} is invalid", dir.display()))?;
            println!("{summary}");
            Ok(())
        }
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
        Command::Serve(a) => serve(a),
    }
}

fn scene_gen(a: GenArgs) -> Result<()> {
    let config = SyntheticConfig {
        seed: a.seed,
        gaussians: a.gaussians,
        views: a.views,
        appearances: a.appearances,
        occluder_fraction: a.occluder_frac,
        occluded_images: a.occluded_images,
        far_shell: a.far_shell,
        width: a.width,
        height: a.height,
        ..Default::default()
    };
    let scene = generate_synthetic_scene(&config)?;
    save_scene(&scene.bundle, &a.out)?;
    let labels = serde_json::json!({
        "image_appearance": scene.truth.image_appearance,
        "occluded": scene.truth.occluder_masks.iter().map(Option::is_some).collect::<Vec<_>>(),
    });
    std::fs::write(a.out.join("truth.json"), serde_json::to_vec_pretty(&labels)?)?;
    println!(
        "wrote {} images and {} Gaussians to {}",
        scene.bundle.images.len(),
        scene.bundle.cloud.len(),
        a.out.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut c = TrainConfig {
        iterations: a.iters,
        seed: a.seed,
        use_background: !a.no_bg,
        use_mask: !a.no_mask,
        ..Default::default()
    };
    if let Some(v) = a.per_min {
        c.mask.per_min = v;
    }
    if let Some(v) = a.per_max {
        c.mask.per_max = v;
    }
    if let Some(v) = a.lambda_alpha {
        c.lambda_alpha = v;
    }
    if let Some(v) = a.lambda_ssim {
        c.lambda_ssim = v;
    }
    if let Some(v) = a.mask_warmup {
        c.mask_warmup = v;
    }
    c
}

fn train(a: TrainArgs) -> Result<()> {
    let mut state = if a.resume {
        let s = TrainState::load(&a.out).with_context(|| format!("cannot resume from {}", a.out.display()))?;
        if s.config.iterations != a.iters {
            bail!("checkpoint was configured for {} iterations, not {}", s.config.iterations, a.iters);
        }
        s
    } else {
        let bundle = load_scene(&a.scene)?;
        TrainState::new(bundle, train_config(&a))?
    };
    state.dump_dir = Some(a.out.join("diagnostics"));
    state.mask_dump = a.dump_masks.clone().map(|dir| MaskDump {
        dir,
        every: a.dump_every,
    });

    let mut sink: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| p.display().to_string())?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    let end = a.stop_at.unwrap_or(a.iters).min(a.iters);
    while state.iteration < end {
        let report = state.train_step()?;
        serde_json::to_writer(&mut sink, &report)?;
        writeln!(sink)?;
        if a.checkpoint_every > 0 && state.iteration % a.checkpoint_every == 0 && state.iteration < end {
            sink.flush()?;
            state.save(&a.out)?;
        }
    }
    sink.flush()?;
    state.save(&a.out)?;
    log::info!(
        "saved checkpoint at iteration {} ({} Gaussians) to {}",
        state.iteration,
        state.num_gaussians(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let state = TrainState::load(&a.ckpt)?;
    let test = load_scene(&a.scene)?.images;
    let iterations = a.iterations.unwrap_or(state.config.eval_iterations);
    let table = evaluate(&state.model, &test, iterations, state.config.eval_lr)?;
    print!("{}", table.to_text());
    if let Some(p) = &a.json {
        std::fs::write(p, serde_json::to_vec_pretty(&table)?)?;
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let state = TrainState::load(&a.ckpt)?;
    let camera: CameraView = match (&a.camera, a.view) {
        (Some(p), _) => serde_json::from_slice(&std::fs::read(p).with_context(|| p.display().to_string())?)?,
        (None, Some(v)) => match state.images.get(v) {
            Some(img) => img.camera.clone(),
            None => bail!("no training view {v} (checkpoint has {})", state.images.len()),
        },
        (None, None) => bail!("give --view or --camera"),
    };
    let snapshot = Snapshot::from_state(&state, 1, 1);
    let req = RenderRequest {
        camera,
        appearance: AppearanceSpec::Image { index: a.appearance },
        width: a.width,
        height: a.height,
        encoding: Encoding::Png,
    };
    let frame = snapshot.render_once(&req)?;
    write_file(&a.out, &frame.bytes)?;
    println!("{}x{} frame written to {}", frame.width, frame.height, a.out.display());
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn serve(a: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        cache_capacity: a.cache,
        static_dir: a.r#static,
        ..Default::default()
    };
    let service = Service::from_checkpoint(&a.ckpt, config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(wildsplat_server::serve(service, a.bind))?;
    Ok(())
}
