use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mononav::camera::DepthImage;
use mononav::eval::evaluate_sequence;
use mononav::primitives::{LibraryParams, PrimitiveLibrary};
use mononav::sim::batch::{batch_run, BatchSummary};
use mononav::sim::noise::{calibrate, Knob, NoiseModel};
use mononav::sim::{builtin, run_episode_with_map, Scene, BUILTIN_SCENES};
use mononav::tsdf::{write_ply, VoxelBlockGrid};
use mononav::RunConfig;

#[derive(Parser)]
#[command(name = "mononav", version, about = "TSDF mapping, motion-primitive planning and closed-loop simulation")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, env = "MONONAV_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a motion-primitive library as JSON.
    GenPrimitives(GenArgs),
    /// Run closed-loop episodes and write a run directory.
    Sim(SimArgs),
    /// Compare estimated depth images against ground truth.
    EvalDepth(EvalArgs),
    /// Write occupied voxels as PLY from a saved map or a replayed run.
    Export(ExportArgs),
    /// Sweep a noise parameter to match a target wall PCD.
    CalibrateNoise(CalibrateArgs),
    /// List bundled scenes, or write them as JSON into a directory.
    Scenes {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    speed: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    max_yaw_rate: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    waypoints: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    /// Scene JSON path, `builtin:<name>`, or `builtin:all`.
    #[arg(long)]
    scene: String,
    /// Master seed; episode i uses a seed derived from it.
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Per-pixel relative depth noise (overrides noise.mult_sigma).
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Planner clearance in meters (overrides planner.clearance).
    #[arg(long)]
    clearance: Option<f64>,
    /// Use the calibrated noise preset as the base noise model.
    #[arg(long)]
    calibrated_noise: bool,
    /// Also write each episode's final map (.mnvg) and occupied voxels (.ply).
    #[arg(long)]
    save_map: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth depth file (.mndp or .png) or directory.
    #[arg(long)]
    gt: PathBuf,
    /// Estimated depth file or directory; files pair up by name.
    #[arg(long)]
    est: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct ExportArgs {
    /// Serialized map written by `sim --save-map`.
    #[arg(long, conflicts_with = "run", required_unless_present = "run")]
    map: Option<PathBuf>,
    /// Run directory to replay.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Episode index within the run (order of summary.json).
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, value_enum, default_value_t = KnobArg::Bias)]
    knob: KnobArg,
    /// Candidate values, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.225, 0.25, 0.255, 0.26, 0.275, 0.3])]
    candidates: Vec<f64>,
    /// Value of the other noise parameter.
    #[arg(long, default_value_t = 0.05)]
    fixed: f64,
    #[arg(long, default_value_t = 0.4)]
    target: f64,
    #[arg(long, default_value_t = 3.0)]
    range: f64,
    #[arg(long, default_value_t = 200)]
    frames: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum KnobArg {
    Mult,
    Bias,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::GenPrimitives(a) => gen_primitives(cfg, a),
        Cmd::Sim(a) => sim(cfg, a),
        Cmd::EvalDepth(a) => eval_depth(cfg, a),
        Cmd::Export(a) => export(cfg, a),
        Cmd::CalibrateNoise(a) => calibrate_noise(cfg, a),
        Cmd::Scenes { out } => scenes(out),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    cfg.validate().with_context(|| format!("in config {}", path.display()))?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gen_primitives(cfg: RunConfig, a: GenArgs) -> Result<()> {
    let d = cfg.library;
    let params = LibraryParams {
        speed: a.speed.unwrap_or(d.speed),
        horizon: a.horizon.unwrap_or(d.horizon),
        max_yaw_rate: a.max_yaw_rate.unwrap_or(d.max_yaw_rate),
        count: a.count.unwrap_or(d.count),
        n_waypoints: a.waypoints.unwrap_or(d.n_waypoints),
        substeps: d.substeps,
    };
    let lib = PrimitiveLibrary::generate(params)?;
    lib.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} primitives to {}", lib.len(), a.out.display());
    Ok(())
}

fn resolve_scenes(spec: &str) -> Result<Vec<Scene>> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        if name == "all" {
            return Ok(mononav::sim::bundled());
        }
        return builtin(name)
            .map(|s| vec![s])
            .with_context(|| format!("unknown builtin scene `{name}` (known: {})", BUILTIN_SCENES.join(", ")));
    }
    let path = Path::new(spec);
    let mut scene = Scene::load(path).with_context(|| format!("loading scene {}", path.display()))?;
    if scene.name == "scene" {
        if let Some(stem) = path.file_stem() {
            scene.name = stem.to_string_lossy().into_owned();
        }
    }
    Ok(vec![scene])
}

fn sim(mut cfg: RunConfig, a: SimArgs) -> Result<()> {
    if a.calibrated_noise {
        cfg.noise = NoiseModel::calibrated();
    }
    if let Some(s) = a.noise_sigma {
        cfg.noise.mult_sigma = s;
    }
    if let Some(c) = a.clearance {
        cfg.planner.clearance = c;
    }
    cfg.noise.seed = a.seed;
    cfg.validate()?;
    if a.trials == 0 {
        bail!("--trials must be >= 1");
    }
    let scenes = resolve_scenes(&a.scene)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("config.toml"), toml::to_string_pretty(&cfg)?)?;
    let scene_dir = a.out.join("scenes");
    fs::create_dir_all(&scene_dir).with_context(|| format!("creating {}", scene_dir.display()))?;
    for s in &scenes {
        let p = scene_dir.join(format!("{}.json", s.name));
        s.save(&p).with_context(|| format!("writing {}", p.display()))?;
    }

    let runs = batch_run(&scenes, &cfg, a.trials, a.seed)?;
    for (i, log) in runs.iter().enumerate() {
        let dir = a.out.join(&log.scene);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let stem = format!("trial_{:03}", i % a.trials);
        write(&dir.join(format!("{stem}.csv")), log.to_csv())?;
        write(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&log.summary())? + "\n")?;
        if a.save_map {
            let scene = scenes.iter().find(|s| s.name == log.scene).expect("ran this scene");
            let mut c = cfg;
            c.noise.seed = log.seed;
            let (_, map) = run_episode_with_map(scene, &c)?;
            let p = dir.join(format!("{stem}.mnvg"));
            map.save(&p).with_context(|| format!("writing {}", p.display()))?;
            let p = dir.join(format!("{stem}.ply"));
            map.export_ply(&c.occupancy, &p).with_context(|| format!("writing {}", p.display()))?;
        }
    }
    let summary = BatchSummary::from_runs(&runs);
    write(&a.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let text = summary.to_text();
    write(&a.out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn read_depth(path: &Path, cfg: &RunConfig) -> Result<DepthImage> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let img = match ext.as_str() {
        "mndp" => DepthImage::read_mndp(path),
        "png" => DepthImage::read_png_mm(path, cfg.camera),
        _ => bail!("{}: expected a .mndp or .png depth image", path.display()),
    };
    img.with_context(|| format!("reading {}", path.display()))
}

fn depth_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e.with_context(|| format!("listing {}", dir.display()))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if p.is_file() && (ext == "mndp" || ext == "png") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn eval_depth(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let pairs: Vec<(PathBuf, PathBuf)> = match (a.gt.is_dir(), a.est.is_dir()) {
        (false, false) => vec![(a.gt.clone(), a.est.clone())],
        (true, true) => {
            let gts = depth_files(&a.gt)?;
            if gts.is_empty() {
                bail!("{}: no .mndp or .png files", a.gt.display());
            }
            gts.into_iter()
                .map(|g| {
                    let e = a.est.join(g.file_name().expect("listed file"));
                    if !e.is_file() {
                        bail!("{}: no estimate for {}", e.display(), g.display());
                    }
                    Ok((g, e))
                })
                .collect::<Result<_>>()?
        }
        _ => bail!("--gt and --est must both be files or both be directories"),
    };
    let mut frames = Vec::with_capacity(pairs.len());
    for (g, e) in &pairs {
        frames.push((read_depth(g, &cfg)?, read_depth(e, &cfg)?));
    }
    let report = evaluate_sequence(&frames).context("evaluating depth")?;
    match a.format {
        Format::Text => print!("{}", report.to_text()),
        Format::Json => println!("{}", report.to_json()?),
    }
    Ok(())
}

fn export(cfg: RunConfig, a: ExportArgs) -> Result<()> {
    let (map, filter) = match (&a.map, &a.run) {
        (Some(p), _) => (
            VoxelBlockGrid::load(p).with_context(|| format!("loading map {}", p.display()))?,
            cfg.occupancy,
        ),
        (None, Some(dir)) => replay(dir, a.episode)?,
        (None, None) => bail!("one of --map or --run is required"),
    };
    let points = map.extract_occupied(&filter);
    write_ply(&points, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} occupied voxels to {}", points.len(), a.out.display());
    Ok(())
}

/// Re-runs one episode of a run directory and returns its final map.
fn replay(dir: &Path, episode: usize) -> Result<(VoxelBlockGrid, mononav::OccupancyFilter)> {
    let cfg = load_config(Some(&dir.join("config.toml")))?;
    let p = dir.join("summary.json");
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let summary: BatchSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    let Some(ep) = summary.episodes.get(episode) else {
        bail!("{}: episode {episode} out of range ({} episodes)", p.display(), summary.episodes.len());
    };
    let sp = dir.join("scenes").join(format!("{}.json", ep.scene));
    let scene = Scene::load(&sp).with_context(|| format!("loading scene {}", sp.display()))?;
    let mut c = cfg;
    c.noise.seed = ep.seed;
    let (_, map) = run_episode_with_map(&scene, &c)?;
    Ok((map, c.occupancy))
}

fn calibrate_noise(cfg: RunConfig, a: CalibrateArgs) -> Result<()> {
    let (knob, base) = match a.knob {
        KnobArg::Bias => (Knob::BiasSigma, NoiseModel { mult_sigma: a.fixed, ..Default::default() }),
        KnobArg::Mult => (Knob::MultSigma, NoiseModel { bias_sigma: a.fixed, ..Default::default() }),
    };
    let c = calibrate(base, knob, &a.candidates, a.target, &cfg.camera, a.range, a.frames)?;
    println!("{:>10} {:>10}", "value", "pcd [m]");
    for (v, pcd) in &c.sweep {
        println!("{v:>10.4} {pcd:>10.4}");
    }
    println!(
        "chosen: mult_sigma={} bias_sigma={} (pcd {:.4} m, target {} m)",
        c.chosen.mult_sigma, c.chosen.bias_sigma, c.chosen_pcd, a.target
    );
    Ok(())
}

fn scenes(out: Option<PathBuf>) -> Result<()> {
    for s in mononav::sim::bundled() {
        match &out {
            Some(dir) => {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                let p = dir.join(format!("{}.json", s.name));
                s.save(&p).with_context(|| format!("writing {}", p.display()))?;
                println!("{}", p.display());
            }
            None => println!("{}", s.name),
        }
    }
    Ok(())
}
