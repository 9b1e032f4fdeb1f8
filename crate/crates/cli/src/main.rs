mod manifest;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use voxcond_core::conditions::{frame_dir, FrameSidecar, SIDECAR_FILE};
use voxcond_core::scenegen::SceneError;
use voxcond_core::{generate_scene, CameraRig, CasterRegistry, RenderSettings, Renderer, SceneConfig, SemanticGrid};
use voxcond_diffusion::toydiff::ablate::{run_ablation, AblationConfig};
use voxcond_diffusion::toydiff::checkpoint;
use voxcond_diffusion::toydiff::data::SyntheticSetConfig;
use voxcond_diffusion::toydiff::model::{ModelConfig, ToyDenoiser};
use voxcond_diffusion::toydiff::sample::{reconstruction_error, sample, SampleConfig};
use voxcond_diffusion::toydiff::train::{smoothed_endpoints, train, TrainConfig};

use manifest::{sha256_hex, RunManifest, MANIFEST_FILE};

/// A problem with the invocation or a config file; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Parser)]
#[command(name = "voxcond", version, about = "Voxel scenes to multi-view condition maps and a toy conditional video denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Procedural semantic voxel scenes.
    Scene {
        #[command(subcommand)]
        command: SceneCommand,
    },
    /// Render condition maps of a generated scene through a camera rig.
    Project(ProjectArgs),
    /// Camera rig utilities.
    Rig {
        #[command(subcommand)]
        command: RigCommand,
    },
    /// Train the toy denoiser on rendered synthetic clips.
    Train(TrainArgs),
    /// Sample held-out clips from a checkpoint and score them.
    Sample(SampleArgs),
    /// Paired loss-weight / adapter / condition-group ablation.
    Ablate(AblateArgs),
    /// Ray throughput of the available casters.
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum SceneCommand {
    /// Generate .vxsg frames and a track manifest from a JSON config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum RigCommand {
    /// Write the default six-camera rig as JSON.
    Default {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Rig JSON; the default six-camera rig when omitted.
    #[arg(long)]
    rig: Option<PathBuf>,
    #[arg(long, default_value_t = voxcond_core::conditions::DEFAULT_D_MAX)]
    dmax: f64,
    #[arg(long, default_value_t = voxcond_core::conditions::DEFAULT_PLANES)]
    planes: usize,
    /// Comma-separated subset of rig views.
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<String>>,
    #[arg(long, default_value = "dda")]
    caster: String,
    /// Scene directory name under the output root; the scene folder name by default.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training run config; defaults throughout when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sampling config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic data config JSON; held-out clips are sampled.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Route control features through the adapters.
    #[arg(long)]
    adapter: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 2)]
    frames: usize,
    /// Resolution factor applied to the default rig.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, value_delimiter = ',', default_value = "dda")]
    casters: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    jobs: Option<usize>,
}

/// Config for `train`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainRun {
    data: SyntheticSetConfig,
    /// Ignored in favor of the checkpoint's config with `--init`, but must
    /// agree with it when given.
    model: Option<ModelConfig>,
    train: TrainConfig,
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config parse error: {}: {e}", path.display())))
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), load_json)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| anyhow!("thread pool: {e}"))
}

fn scene_gen(config: &Path, out: &Path) -> Result<()> {
    let cfg: SceneConfig = load_json(config)?;
    let start = Instant::now();
    let scene = generate_scene(&cfg).map_err(|e| match e {
        SceneError::Infeasible(_) | SceneError::InvalidConfig(_) | SceneError::InvalidTrack(_) => usage(e.to_string()),
        other => anyhow!(other),
    })?;
    let generate = start.elapsed().as_secs_f64();
    create_out(out)?;
    for (i, grid) in scene.frames.iter().enumerate() {
        let path = out.join(format!("frame_{i:04}.vxsg"));
        fs::write(&path, grid.write_grid()).with_context(|| format!("writing {}", path.display()))?;
    }
    write_json(&out.join("tracks.json"), &scene.manifest())?;
    let mut m = RunManifest::new("scene gen").config("scene", &cfg);
    m.seeds = vec![cfg.seed];
    m.config = serde_json::to_value(&cfg)?;
    m.wall_time_s.insert("generate".into(), generate);
    m.finish(out)?;
    println!("wrote {} frames to {}", scene.frames.len(), out.display());
    Ok(())
}

fn frame_index(name: &str) -> Option<usize> {
    name.strip_prefix("frame_")?.strip_suffix(".vxsg")?.parse().ok()
}

/// Frames listed in a scene manifest, checked against their recorded hashes.
fn load_scene(dir: &Path) -> Result<(RunManifest, Vec<(usize, SemanticGrid, String)>)> {
    if !dir.join(MANIFEST_FILE).exists() {
        bail!("{} has no {MANIFEST_FILE}; generate it with `scene gen`", dir.display());
    }
    let m = RunManifest::load(dir)?;
    if m.command != "scene gen" {
        bail!("{} holds a `{}` run, not a scene", dir.display(), m.command);
    }
    let mut frames = Vec::new();
    for f in &m.outputs {
        let Some(i) = frame_index(&f.path) else { continue };
        let path = dir.join(&f.path);
        let bytes = fs::read(&path).map_err(|e| anyhow!("missing frame {}: {e}", path.display()))?;
        let hash = sha256_hex(&bytes);
        if hash != f.sha256 {
            bail!("grid hash mismatch against manifest: {}", path.display());
        }
        let grid = SemanticGrid::read_grid(&bytes).with_context(|| format!("decoding {}", path.display()))?;
        frames.push((i, grid, hash));
    }
    if frames.is_empty() {
        bail!("scene manifest in {} lists no frames", dir.display());
    }
    frames.sort_by_key(|f| f.0);
    if let Some(gap) = frames.iter().enumerate().find(|(k, f)| *k != f.0) {
        bail!("missing frame {} in {}", gap.0, dir.display());
    }
    Ok((m, frames))
}

fn project(a: &ProjectArgs) -> Result<()> {
    let settings = RenderSettings::new(a.dmax, a.planes).map_err(|e| usage(e.to_string()))?;
    let rig = match &a.rig {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read rig {}: {e}", p.display())))?;
            CameraRig::from_json(&text).map_err(|e| usage(format!("config parse error: {}: {e}", p.display())))?
        }
        None => CameraRig::default_rig(),
    };
    let rig = match &a.views {
        Some(v) => {
            let names: Vec<&str> = v.iter().map(String::as_str).collect();
            rig.select(&names).map_err(|e| usage(e.to_string()))?
        }
        None => rig,
    };
    let caster = CasterRegistry::with_builtins().get(&a.caster).map_err(|e| usage(e.to_string()))?;
    let (scene_manifest, frames) = load_scene(&a.scene)?;
    let scene_name = match &a.name {
        Some(n) => n.clone(),
        None => a
            .scene
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "scene".into()),
    };
    let rig_hash = rig.content_hash();
    if a.out.join(MANIFEST_FILE).exists() {
        let prev = RunManifest::load(&a.out)?;
        if let Some(h) = prev.config_hashes.get("rig") {
            if *h != rig_hash {
                bail!("rig hash mismatch against manifest in {}", a.out.display());
            }
        }
    }
    let pool = thread_pool(a.jobs)?;
    let renderer = Renderer::new(settings).with_caster(caster);
    let tasks: Vec<(usize, usize)> = (0..frames.len())
        .flat_map(|f| (0..rig.len()).map(move |v| (f, v)))
        .collect();
    let start = Instant::now();
    let stacks: Vec<_> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(f, v)| {
                let t = Instant::now();
                let stack = renderer.render_stack(&frames[f].1, &rig.views()[v], frames[f].0);
                (f, v, stack, t.elapsed().as_secs_f64())
            })
            .collect()
    });
    let render = start.elapsed().as_secs_f64();

    let start = Instant::now();
    create_out(&a.out)?;
    let views: Vec<String> = rig.views().iter().map(|v| v.name.clone()).collect();
    let mut per_view: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    let mut files = 0;
    for (f, v, stack, secs) in &stacks {
        let (index, grid, hash) = &frames[*f];
        let dir = frame_dir(&a.out, &scene_name, *index);
        if *v == 0 {
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let sidecar = FrameSidecar {
                scene: scene_name.clone(),
                frame: *index,
                d_max: settings.d_max,
                planes: settings.planes,
                caster: a.caster.clone(),
                rig_hash: rig_hash.clone(),
                grid_hash: hash.clone(),
                views: views.clone(),
            };
            write_json(&dir.join(SIDECAR_FILE), &sidecar)?;
        }
        files += stack.write_to(&dir, grid.taxonomy())?.len();
        let e = per_view.entry(*v).or_default();
        e.0 += rig.views()[*v].intrinsics.pixel_count();
        e.1 += secs;
    }
    let write = start.elapsed().as_secs_f64();

    let mut m = RunManifest::new("project").config("rig", &rig.to_config()).config("render", &settings);
    if let Some(h) = scene_manifest.config_hashes.get("scene") {
        m.config_hashes.insert("scene".into(), h.clone());
    }
    m.seeds = scene_manifest.seeds.clone();
    m.config = json!({
        "scene": scene_name,
        "d_max": settings.d_max,
        "planes": settings.planes,
        "caster": a.caster,
        "views": views,
    });
    for (i, _, hash) in &frames {
        m.inputs.insert(format!("frame_{i:04}.vxsg"), hash.clone());
    }
    m.wall_time_s.insert("render".into(), render);
    m.wall_time_s.insert("write".into(), write);
    m.finish(&a.out)?;
    for (v, (rays, secs)) in &per_view {
        println!(
            "view {}: {rays} rays in {secs:.3} s, {:.0} rays/s",
            views[*v],
            *rays as f64 / secs.max(1e-9)
        );
    }
    println!("wrote {files} images for {} frames x {} views to {}", frames.len(), views.len(), a.out.display());
    Ok(())
}

fn rig_default(out: Option<&Path>) -> Result<()> {
    let json = CameraRig::default_rig().to_json();
    match out {
        Some(p) => fs::write(p, format!("{json}\n")).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn check_clip_shape(model: &ModelConfig, data: &SyntheticSetConfig, clip: &voxcond_diffusion::toydiff::data::Clip) -> Result<()> {
    let want = [model.frames(), model.latent_channels, model.height, model.width];
    let got = clip.z0.shape();
    if want != got || model.planes != data.planes || model.views != clip.views {
        return Err(usage(format!(
            "model expects clips of shape {want:?} with {} views and {} planes; data gives {got:?} with {} views and {} planes",
            model.views, model.planes, clip.views, data.planes
        )));
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<ToyDenoiser> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    checkpoint::from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut run: TrainRun = load_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    run.train.validate().map_err(|e| usage(e.to_string()))?;
    let mut model = match &a.init {
        Some(p) => {
            let m = load_checkpoint(p)?;
            if let Some(cfg) = &run.model {
                if cfg != m.config() {
                    return Err(usage("`model` in the config disagrees with the --init checkpoint"));
                }
            }
            m
        }
        None => ToyDenoiser::new(run.model.clone().unwrap_or_default()).map_err(|e| usage(e.to_string()))?,
    };
    let start = Instant::now();
    let set = run.data.build().map_err(|e| usage(e.to_string()))?;
    let data_secs = start.elapsed().as_secs_f64();
    let first = set.train.first().ok_or_else(|| usage("data config yields no training clips"))?;
    check_clip_shape(model.config(), &run.data, first)?;

    create_out(&a.out)?;
    let mut log_lines = String::new();
    let start = Instant::now();
    let log = train(&mut model, &set.train, &run.train, |l| {
        log_lines.push_str(&serde_json::to_string(l).expect("log entry serializes"));
        log_lines.push('\n');
        if l.step % 50 == 0 {
            log::info!("step {} loss {:.5}", l.step, l.loss);
        }
    })?;
    let train_secs = start.elapsed().as_secs_f64();
    fs::write(a.out.join("train_log.jsonl"), log_lines)?;
    fs::write(a.out.join("checkpoint.tdck"), checkpoint::to_bytes(&model)?)?;

    let mut m = RunManifest::new("train")
        .config("model", model.config())
        .config("train", &run.train)
        .config("data", &run.data);
    m.seeds = vec![run.train.seed, model.config().seed];
    m.config = serde_json::to_value(&run)?;
    if let Some(p) = &a.init {
        m.inputs.insert("init".into(), sha256_hex(&fs::read(p)?));
    }
    m.wall_time_s.insert("data".into(), data_secs);
    m.wall_time_s.insert("train".into(), train_secs);
    m.finish(&a.out)?;
    let (s0, s1) = smoothed_endpoints(&log, 50);
    println!(
        "trained {} steps in {train_secs:.1} s; smoothed loss {s0:.4} -> {s1:.4} ({:.1}%)",
        log.len(),
        100.0 * s1 / s0
    );
    Ok(())
}

fn sample_cmd(a: &SampleArgs) -> Result<()> {
    let mut cfg: SampleConfig = load_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data: SyntheticSetConfig = load_or_default(a.data.as_deref())?;
    let model = load_checkpoint(&a.checkpoint)?;
    let set = data.build().map_err(|e| usage(e.to_string()))?;
    let first = set.heldout.first().ok_or_else(|| usage("data config yields no held-out clips"))?;
    check_clip_shape(model.config(), &data, first)?;

    create_out(&a.out)?;
    let start = Instant::now();
    let mut per_clip = Vec::new();
    for clip in &set.heldout {
        let z = sample(&model, clip, &cfg, a.adapter)?;
        let mut bytes = Vec::with_capacity(8 * z.data.len());
        for v in &z.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let file = format!("{}.f64", clip.name.replace('/', "_"));
        fs::write(a.out.join(&file), bytes)?;
        let err = reconstruction_error(&model, std::slice::from_ref(clip), &cfg, a.adapter)?;
        per_clip.push(json!({"clip": clip.name, "file": file, "shape": z.shape(), "error": err}));
    }
    let pooled = reconstruction_error(&model, &set.heldout, &cfg, a.adapter)?;
    let secs = start.elapsed().as_secs_f64();
    write_json(&a.out.join("metrics.json"), &json!({"adapter": a.adapter, "clips": per_clip, "pooled": pooled}))?;
    let mut m = RunManifest::new("sample")
        .config("model", model.config())
        .config("sample", &cfg)
        .config("data", &data);
    m.seeds = vec![cfg.seed];
    m.config = json!({"sample": cfg, "data": data, "adapter": a.adapter});
    m.inputs.insert("checkpoint".into(), sha256_hex(&fs::read(&a.checkpoint)?));
    m.wall_time_s.insert("sample".into(), secs);
    m.finish(&a.out)?;
    println!(
        "sampled {} clips; error all {:.5} fg {:.5} bg {:.5}",
        set.heldout.len(),
        pooled.all,
        pooled.fg,
        pooled.bg
    );
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let cfg: AblationConfig = load_or_default(a.config.as_deref())?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if a.jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    let start = Instant::now();
    let report = run_ablation(&cfg, a.jobs.unwrap_or(1))?;
    let secs = start.elapsed().as_secs_f64();
    create_out(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    fs::write(a.out.join("report.md"), report.to_markdown())?;
    let mut m = RunManifest::new("ablate").config("ablation", &cfg).config("model", &cfg.model);
    m.seeds = cfg.seeds.clone();
    m.config = serde_json::to_value(&cfg)?;
    m.wall_time_s.insert("ablate".into(), secs);
    m.finish(&a.out)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let registry = CasterRegistry::with_builtins();
    let casters = a
        .casters
        .iter()
        .map(|n| registry.get(n).map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let rig = CameraRig::default_rig().scaled(a.scale).map_err(|e| usage(e.to_string()))?;
    let scene = generate_scene(&SceneConfig {
        seed: a.seed,
        frames: a.frames.max(1),
        ..SceneConfig::default()
    })
    .map_err(|e| usage(e.to_string()))?;
    let pool = thread_pool(a.jobs)?;
    for caster in casters {
        let renderer = Renderer::new(RenderSettings::default()).with_caster(caster.clone());
        let mut per_view: BTreeMap<String, (usize, f64)> = BTreeMap::new();
        pool.install(|| {
            for (f, grid) in scene.frames.iter().enumerate() {
                for r in renderer.render_rig(grid, &rig, f) {
                    let e = per_view.entry(r.stack.meta.view.clone()).or_default();
                    e.0 += r.rays;
                    e.1 += r.elapsed.as_secs_f64();
                }
            }
        });
        let (rays, secs) = per_view.values().fold((0, 0.0), |(r, s), (r2, s2)| (r + r2, s + s2));
        for (view, (r, s)) in &per_view {
            println!("{} view {view}: {:.0} rays/s", caster.name(), *r as f64 / s.max(1e-9));
        }
        println!("{} total: {rays} rays in {secs:.3} s, {:.0} rays/s", caster.name(), rays as f64 / secs.max(1e-9));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Scene {
            command: SceneCommand::Gen { config, out },
        } => scene_gen(&config, &out),
        Command::Project(a) => project(&a),
        Command::Rig {
            command: RigCommand::Default { out },
        } => rig_default(out.as_deref()),
        Command::Train(a) => train_cmd(&a),
        Command::Sample(a) => sample_cmd(&a),
        Command::Ablate(a) => ablate_cmd(&a),
        Command::Bench(a) => bench(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VOXCOND_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
