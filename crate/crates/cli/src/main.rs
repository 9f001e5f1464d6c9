use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use occrebench::benchmark::{
    build_opacity_map, compute_metrics, conventional_voxelize, frustum_mask, visibility_mask,
    voxelize_occupancy, MetricsReport, OCCUPANCY_THRESHOLD,
};
use occrebench::field::{ground_truth_occupancy, render_reference_image, DensityField};
use occrebench::fixtures::{self, DeskFixture};
use occrebench::io::{
    csv_table, fingerprint, load_voxel_grid, parse_scene_spec, write_atomic, encode_grid,
    GridFileError, GridPayload, MetricsFile, SceneSpec, SpecError,
};
use occrebench::losses::{gradcheck, GRADCHECK_ABS_FLOOR, GRADCHECK_REL_TOL};
use occrebench::optimizer::{
    run_polarization_ablation, train, EvalSetup, TrainConfig, TrainError, TrainingSet,
};
use occrebench::rendering::SamplingConfig;
use occrebench::{GridGeometry, Pose, VoxelDensityField, VoxelGrid};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Occupancy benchmark for density fields: ground truth, opacity maps,
/// voxelization, masks, metrics and training.
#[derive(Parser)]
#[command(name = "occrebench", version)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Replace the scene's grid with a named preset (desk, sscbench-kitti360).
    #[arg(long, global = true)]
    grid_preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scene utilities.
    #[command(subcommand)]
    Scene(SceneCommand),
    /// Build the target view's opacity map (camera-frame f32 grid).
    Opacity {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        field: FieldArgs,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predicted occupancy under either protocol.
    Voxelize {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        field: FieldArgs,
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = OCCUPANCY_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frustum and visibility masks of the target view.
    Masks {
        #[command(flatten)]
        scene: SceneArgs,
        /// Ground-truth grid; computed from the scene when omitted.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        frustum_out: PathBuf,
        #[arg(long)]
        visibility_out: PathBuf,
    },
    /// Score a predicted grid against ground truth.
    Eval {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth grid; computed from the scene when omitted.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare analytic loss gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        fixtures: usize,
        #[arg(long, default_value_t = GRADCHECK_REL_TOL)]
        tolerance: f64,
        /// Absolute errors at or below this count as exact.
        #[arg(long, default_value_t = GRADCHECK_ABS_FLOOR)]
        abs_floor: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a voxel density field on the scene's views.
    Fit {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Checkpoint output (f32 parameter grid).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Paired runs with and without the polarization loss.
    AblateLp {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Fitted density against sample interval along one ray, as CSV.
    DemoMagnitude {
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 3.0)]
        near: f64,
        #[arg(long, default_value_t = 18.0)]
        far: f64,
        /// Emit every k-th sample index.
        #[arg(long, default_value_t = 8)]
        every: usize,
        #[arg(long, default_value_t = 0.7)]
        alpha: f64,
        #[arg(long, default_value_t = 8000)]
        iterations: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SceneCommand {
    /// Ground-truth occupancy grid.
    Gt {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reference images of every camera as PPM files.
    Render {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Opacity,
    Sigma,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureName {
    Desk,
    Occluder,
    Wall,
    Protocol,
    Magnitude,
}

#[derive(Args)]
struct SceneArgs {
    /// Scene spec (TOML).
    #[arg(long, conflicts_with = "fixture", required_unless_present = "fixture")]
    scene: Option<PathBuf>,
    /// Built-in scene instead of a spec file.
    #[arg(long, value_enum)]
    fixture: Option<FixtureName>,
}

#[derive(Args)]
struct FieldArgs {
    /// Trained checkpoint; the scene's analytic density is used when omitted.
    #[arg(long)]
    field: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
}

/// Failures split by exit code.
enum Failure {
    Invalid(anyhow::Error),
    Internal(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn invalid(self, what: &str) -> Outcome<T>;
    fn internal(self, what: &str) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self, what: &str) -> Outcome<T> {
        self.map_err(|e| Failure::Invalid(e.into().context(what.to_string())))
    }
    fn internal(self, what: &str) -> Outcome<T> {
        self.map_err(|e| Failure::Internal(e.into().context(what.to_string())))
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) | TrainError::NoOverlap | TrainError::NoSourceViews => {
            Failure::Invalid(e.into())
        }
        other => Failure::Internal(other.into()),
    }
}

struct LoadedScene {
    spec: SceneSpec,
    /// Bytes identifying the scene for config fingerprints.
    identity: Vec<u8>,
}

impl LoadedScene {
    fn target(&self) -> &occrebench::CameraView {
        &self.spec.cameras[0]
    }
}

fn fixture_spec(f: DeskFixture) -> SceneSpec {
    let mut cameras = vec![f.target];
    cameras.extend(f.sources);
    SceneSpec {
        scene: f.scene,
        cameras,
        grid: f.grid,
    }
}

fn load_scene(args: &SceneArgs, preset: Option<&str>) -> Outcome<LoadedScene> {
    let (mut spec, identity) = match (&args.scene, args.fixture) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .invalid("scene spec")?;
            let spec = parse_scene_spec(&text)
                .map_err(|e: SpecError| anyhow!(e))
                .invalid(&format!("{}", path.display()))?;
            (spec, text.into_bytes())
        }
        (None, Some(name)) => {
            let f = match name {
                FixtureName::Desk => fixtures::desk_fixture(),
                FixtureName::Occluder => fixtures::occluder_fixture(),
                FixtureName::Wall => fixtures::wall_fixture(),
                FixtureName::Protocol => fixtures::protocol_fixture(),
                FixtureName::Magnitude => fixtures::magnitude_fixture(),
            };
            let id = format!("fixture:{}", name.to_possible_value().expect("named").get_name());
            (fixture_spec(f), id.into_bytes())
        }
        (None, None) => return Err(Failure::Invalid(anyhow!("give --scene or --fixture"))),
    };
    let mut identity = identity;
    if let Some(p) = preset {
        spec.grid = GridGeometry::preset(p).invalid("--grid-preset")?;
        identity.extend_from_slice(format!("\npreset:{p}").as_bytes());
    }
    Ok(LoadedScene { spec, identity })
}

fn read_grid(path: &Path) -> Outcome<GridPayload> {
    load_voxel_grid(path)
        .map_err(|e: GridFileError| anyhow!(e))
        .invalid(&format!("reading {}", path.display()))
}

fn read_bool_grid(path: &Path) -> Outcome<VoxelGrid<bool>> {
    read_grid(path)?
        .into_bool()
        .invalid(&format!("reading {}", path.display()))
}

fn save(path: &Path, bytes: &[u8]) -> Outcome<()> {
    write_atomic(path, bytes).internal(&format!("writing {}", path.display()))
}

fn save_grid(path: &Path, grid: GridPayload) -> Outcome<()> {
    save(path, &encode_grid(&grid))
}

fn load_field(args: &FieldArgs, scene: &LoadedScene) -> Outcome<Box<dyn DensityField>> {
    match &args.field {
        Some(path) => {
            let grid = read_grid(path)?
                .into_f32()
                .invalid(&format!("reading {}", path.display()))?;
            Ok(Box::new(VoxelDensityField::from_grid(&grid)))
        }
        None => Ok(Box::new(scene.spec.scene.clone())),
    }
}

fn gt_grid(path: &Option<PathBuf>, scene: &LoadedScene) -> Outcome<VoxelGrid<bool>> {
    match path {
        Some(p) => read_bool_grid(p),
        None => Ok(ground_truth_occupancy(&scene.spec.scene, &scene.spec.grid)),
    }
}

fn train_config(args: &TrainArgs, scene: &LoadedScene, seed: u64) -> Outcome<(TrainConfig, String)> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .invalid("train config")?;
            toml::from_str::<TrainConfig>(&text).invalid(&format!("{}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    // Rays are sampled inside the target camera's own depth bounds.
    let fr = scene.target().frustum;
    cfg.near = fr.near;
    cfg.far = fr.far;
    cfg.seed = seed;
    cfg.validate().map_err(train_failure)?;
    let json = serde_json::to_string(&cfg).internal("serializing config")?;
    Ok((cfg, json))
}

fn training_set(scene: &LoadedScene) -> Outcome<TrainingSet> {
    let cams = &scene.spec.cameras;
    if cams.len() < 2 {
        return Err(Failure::Invalid(anyhow!(
            "training needs a target camera and at least one source camera"
        )));
    }
    Ok(TrainingSet::from_scene(&scene.spec.scene, cams[0].clone(), &cams[1..]))
}

fn fingerprint_of(parts: &[&[u8]]) -> String {
    let mut all = Vec::new();
    for p in parts {
        all.extend_from_slice(&(p.len() as u64).to_le_bytes());
        all.extend_from_slice(p);
    }
    fingerprint(&all)
}

fn metric_cells(m: &MetricsReport) -> Vec<String> {
    m.values()
        .iter()
        .map(|v| v.map_or(String::new(), |x| x.to_string()))
        .collect()
}

fn run(cli: Cli) -> Outcome<()> {
    let seed = cli.seed;
    let preset = cli.grid_preset.as_deref();
    match cli.command {
        Command::Scene(SceneCommand::Gt { scene, out }) => {
            let s = load_scene(&scene, preset)?;
            let gt = ground_truth_occupancy(&s.spec.scene, &s.spec.grid);
            save_grid(&out, GridPayload::Bool(gt))
        }
        Command::Scene(SceneCommand::Render { scene, out_dir }) => {
            let s = load_scene(&scene, preset)?;
            std::fs::create_dir_all(&out_dir).internal("creating output directory")?;
            for cam in &s.spec.cameras {
                let img = render_reference_image(&s.spec.scene, cam);
                save(&out_dir.join(format!("{}.ppm", cam.name)), &img.to_ppm())?;
            }
            Ok(())
        }
        Command::Opacity {
            scene,
            field,
            samples,
            out,
        } => {
            let s = load_scene(&scene, preset)?;
            let f = load_field(&field, &s)?;
            let cfg = SamplingConfig::eval(samples, &s.target().frustum).invalid("--samples")?;
            let map = build_opacity_map(f.as_ref(), s.target(), &cfg).internal("opacity map")?;
            save_grid(&out, GridPayload::F32(map.to_grid()))
        }
        Command::Voxelize {
            scene,
            field,
            protocol,
            samples,
            threshold,
            out,
        } => {
            let s = load_scene(&scene, preset)?;
            if !threshold.is_finite() {
                return Err(Failure::Invalid(anyhow!("--threshold must be finite")));
            }
            let f = load_field(&field, &s)?;
            let target = s.target();
            let pred = match protocol {
                Protocol::Opacity => {
                    let cfg = SamplingConfig::eval(samples, &target.frustum).invalid("--samples")?;
                    let map = build_opacity_map(f.as_ref(), target, &cfg).internal("opacity map")?;
                    let t_vc = target.voxel_to_camera(&Pose::identity());
                    voxelize_occupancy(
                        &map,
                        &s.spec.grid,
                        &t_vc,
                        &target.intrinsics,
                        &target.frustum,
                        threshold,
                    )
                    .internal("voxelization")?
                }
                Protocol::Sigma => {
                    conventional_voxelize(f.as_ref(), &s.spec.grid, &Pose::identity(), threshold)
                }
            };
            save_grid(&out, GridPayload::Bool(pred))
        }
        Command::Masks {
            scene,
            gt,
            frustum_out,
            visibility_out,
        } => {
            let s = load_scene(&scene, preset)?;
            let gt = gt_grid(&gt, &s)?;
            let target = s.target();
            let t_vc = target.voxel_to_camera(&Pose::identity());
            let fm = frustum_mask(&gt.geometry, &t_vc, &target.intrinsics);
            let vm = visibility_mask(&gt, &target.intrinsics, &target.frustum, &t_vc);
            save_grid(&frustum_out, GridPayload::Bool(fm))?;
            save_grid(&visibility_out, GridPayload::Bool(vm))
        }
        Command::Eval {
            scene,
            pred,
            gt,
            json,
            csv,
        } => {
            let s = load_scene(&scene, preset)?;
            let pred_bytes = std::fs::read(&pred)
                .with_context(|| format!("reading {}", pred.display()))
                .invalid("prediction")?;
            let pred_grid = read_bool_grid(&pred)?;
            let gt_grid = gt_grid(&gt, &s)?;
            let target = s.target();
            let t_vc = target.voxel_to_camera(&Pose::identity());
            let fm = frustum_mask(&gt_grid.geometry, &t_vc, &target.intrinsics);
            let vm = visibility_mask(&gt_grid, &target.intrinsics, &target.frustum, &t_vc);
            let report = compute_metrics(&pred_grid, &gt_grid, &fm, &vm).invalid("metrics")?;
            let gt_bytes = encode_grid(&GridPayload::Bool(gt_grid));
            let fp = fingerprint_of(&[b"eval", &s.identity, &pred_bytes, &gt_bytes]);
            let file = MetricsFile::new(report, seed, fp);
            let text = file.to_json();
            print!("{text}");
            if let Some(p) = json {
                save(&p, text.as_bytes())?;
            }
            if let Some(p) = csv {
                save(&p, file.to_csv().as_bytes())?;
            }
            Ok(())
        }
        Command::Gradcheck {
            fixtures,
            tolerance,
            abs_floor,
            out,
        } => {
            if fixtures == 0 {
                return Err(Failure::Invalid(anyhow!("--fixtures must be positive")));
            }
            let rows = gradcheck(fixtures, seed);
            let max_rel = rows.iter().map(|r| r.floored_rel_error(abs_floor)).fold(0.0, f64::max);
            let table = csv_table(
                &["fixture", "kind", "index", "analytic", "numeric", "abs_error", "raw_rel_error", "rel_error"],
                rows.iter().map(|r| {
                    vec![
                        r.fixture.to_string(),
                        r.kind.name().to_string(),
                        r.index.to_string(),
                        r.analytic.to_string(),
                        r.numeric.to_string(),
                        r.abs_error().to_string(),
                        r.rel_error().to_string(),
                        r.floored_rel_error(abs_floor).to_string(),
                    ]
                }),
            );
            match out {
                Some(p) => save(&p, table.as_bytes())?,
                None => print!("{table}"),
            }
            eprintln!("max_rel_error={max_rel:e} entries={}", rows.len());
            if max_rel < tolerance {
                Ok(())
            } else {
                Err(Failure::Internal(anyhow!(
                    "max relative error {max_rel:e} exceeds {tolerance:e}"
                )))
            }
        }
        Command::Fit {
            scene,
            train: targs,
            out,
            trace,
        } => {
            let s = load_scene(&scene, preset)?;
            let (cfg, _) = train_config(&targs, &s, seed)?;
            let data = training_set(&s)?;
            let mut field = VoxelDensityField::new(s.spec.grid);
            let entries = train(&mut field, &data, &cfg).map_err(train_failure)?;
            save_grid(&out, GridPayload::F32(field.to_grid()))?;
            if let Some(p) = trace {
                let table = csv_table(
                    &["iteration", "total", "reconstruction", "polarization"],
                    entries.iter().map(|e| {
                        vec![
                            e.iteration.to_string(),
                            e.total.to_string(),
                            e.reconstruction.to_string(),
                            e.polarization.to_string(),
                        ]
                    }),
                );
                save(&p, table.as_bytes())?;
            }
            if let (Some(first), Some(last)) = (entries.first(), entries.last()) {
                eprintln!("loss {} -> {}", first.total, last.total);
            }
            Ok(())
        }
        Command::AblateLp {
            scene,
            train: targs,
            seeds,
            out,
            json,
        } => {
            if seeds == 0 {
                return Err(Failure::Invalid(anyhow!("--seeds must be positive")));
            }
            let s = load_scene(&scene, preset)?;
            let (cfg, _) = train_config(&targs, &s, seed)?;
            let data = training_set(&s)?;
            let eval = EvalSetup {
                gt: ground_truth_occupancy(&s.spec.scene, &s.spec.grid),
                samples: cfg.samples,
            };
            let init = VoxelDensityField::new(s.spec.grid);
            let seed_list: Vec<u64> = (seed..seed + seeds).collect();
            let result = run_polarization_ablation(&init, &data, &eval, &cfg, &seed_list)
                .map_err(train_failure)?;
            let mut header = vec!["arm", "seed", "lambda_p"];
            header.extend(MetricsReport::NAMES);
            let mut rows = Vec::new();
            for (arm, runs) in [("with_lp", &result.with_lp), ("without_lp", &result.without_lp)] {
                for r in runs {
                    let mut row = vec![arm.to_string(), r.seed.to_string(), r.lambda_p.to_string()];
                    row.extend(metric_cells(&r.metrics));
                    rows.push(row);
                }
            }
            for (arm, pick) in [("mean_with_lp", 0usize), ("mean_without_lp", 1)] {
                let mut row = vec![arm.to_string(), String::new(), String::new()];
                for m in 0..MetricsReport::NAMES.len() {
                    let means = result.mean(m);
                    let v = if pick == 0 { means.0 } else { means.1 };
                    row.push(v.map_or(String::new(), |x| x.to_string()));
                }
                rows.push(row);
            }
            save(&out, csv_table(&header, rows).as_bytes())?;
            if let Some(p) = json {
                let mut text = serde_json::to_string_pretty(&result).internal("serializing")?;
                text.push('\n');
                save(&p, text.as_bytes())?;
            }
            Ok(())
        }
        Command::DemoMagnitude {
            samples,
            near,
            far,
            every,
            alpha,
            iterations,
            out,
        } => {
            if every == 0 || iterations == 0 {
                return Err(Failure::Invalid(anyhow!("--every and --iterations must be positive")));
            }
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Failure::Invalid(anyhow!("--alpha must lie in (0, 1)")));
            }
            let cfg = SamplingConfig::new(
                samples,
                near,
                far,
                occrebench::SamplingMode::Eval,
                seed,
            )
            .invalid("sampling")?;
            let indices: Vec<usize> = (0..samples).step_by(every).collect();
            let rows = fixtures::magnitude_table(&cfg, &indices, alpha, iterations);
            let table = csv_table(
                &[
                    "index",
                    "t",
                    "delta",
                    "sigma",
                    "alpha",
                    "delta_ratio",
                    "sigma_ratio",
                    "sigma_occupied",
                    "alpha_occupied",
                ],
                rows.iter().map(|r| {
                    vec![
                        r.index.to_string(),
                        r.t.to_string(),
                        r.delta.to_string(),
                        r.sigma.to_string(),
                        r.alpha.to_string(),
                        r.delta_ratio.to_string(),
                        r.sigma_ratio.to_string(),
                        r.sigma_occupied.to_string(),
                        r.alpha_occupied.to_string(),
                    ]
                }),
            );
            match out {
                Some(p) => save(&p, table.as_bytes()),
                None => {
                    print!("{table}");
                    Ok(())
                }
            }
        }
    }
}

fn configure_threads() -> Outcome<()> {
    let Ok(v) = std::env::var("OCCREBENCH_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Invalid(anyhow!("OCCREBENCH_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .internal("thread pool")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(2)
        }
    }
}
