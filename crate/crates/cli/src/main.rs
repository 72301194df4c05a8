//! `csm`: synthetic scene generation, surface-map fitting, keypoint
//! transfer, evaluation, rendering and gradient self-checks.

mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use csm_core::correspondence::{default_tau, source_pixel, TargetIndex, TransferResult};
use csm_core::fitter::{fit, DirectionInit, FitConfig, FitImage, FitOutput};
use csm_core::gradcheck::{self, GradcheckConfig};
use csm_core::io::{self, TransferRow};
use csm_core::losses::{LossConfig, LossFlags, LossWeights};
use csm_core::metrics::{apk, pck, write_pr_curve, EvalRecord, EvalSummary};
use csm_core::raster::{render_depth, render_soft_silhouette, render_surface_directions};
use csm_core::scenegen::{generate, gt_file, load_scene, save_scene, CameraLaw, KeypointObs, SceneConfig};
use csm_core::template::{load_template, RadialProfile, TemplateSpec};
use csm_core::{Camera, CsmError, HypothesisSet, Mask, SurfaceMap, TemplateShape};

const SUBCOMMANDS: [&str; 6] = ["scenegen", "fit", "transfer", "eval", "gradcheck", "render"];

#[derive(Parser, Debug)]
#[command(name = "csm", version, about = "Canonical surface mapping by direct per-image optimization")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "CSM_THREADS")]
    threads: Option<usize>,
    /// File of `key = value` lines providing defaults for the flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene directory.
    Scenegen(ScenegenArgs),
    /// Fit surface maps (and cameras unless --known-pose) to masks.
    Fit(FitArgs),
    /// Transfer keypoints from a source to a target image.
    Transfer(TransferArgs),
    /// PCK and transfer AP from records CSV files.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Render depth, silhouettes and ground-truth directions for one camera.
    Render(RenderArgs),
}

#[derive(Args, Debug, Clone)]
struct TemplateArgs {
    /// Template mesh (OBJ); requires --template-sph.
    #[arg(long, requires = "template_sph", conflicts_with_all = ["template", "template_params", "subdiv"])]
    template_obj: Option<PathBuf>,
    /// Per-vertex unit sphere coordinates for --template-obj.
    #[arg(long, requires = "template_obj")]
    template_sph: Option<PathBuf>,
    /// Built-in template profile: sphere, ellipsoid or blob.
    #[arg(long)]
    template: Option<String>,
    /// Comma-separated profile parameters (blob: a,b; ellipsoid: sx,sy,sz).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    template_params: Option<Vec<f64>>,
    /// Icosphere subdivision level of a built-in template.
    #[arg(long)]
    subdiv: Option<u32>,
}

impl TemplateArgs {
    fn given(&self) -> bool {
        self.template_obj.is_some() || self.template.is_some() || self.template_params.is_some() || self.subdiv.is_some()
    }

    /// The template and, for built-in ones, its generator settings.
    fn load(&self) -> Result<(TemplateShape, Option<TemplateSpec>), CliError> {
        if let (Some(obj), Some(sph)) = (&self.template_obj, &self.template_sph) {
            return Ok((load_template(obj, sph)?, None));
        }
        let id = self.template.as_deref().unwrap_or("blob");
        let params = match (&self.template_params, id) {
            (Some(p), _) => p.clone(),
            (None, "blob") => vec![0.3, 0.2],
            (None, "ellipsoid") => vec![1.0, 0.7, 0.5],
            (None, _) => vec![],
        };
        let subdivisions = self.subdiv.unwrap_or(3);
        if subdivisions > 5 {
            return Err(CliError::Usage(format!("--subdiv must be in [0, 5], got {subdivisions}")));
        }
        let spec = TemplateSpec {
            subdivisions,
            profile: RadialProfile::from_id(id, &params).map_err(|e| CliError::Usage(format!("--template: {e}")))?,
        };
        Ok((spec.build()?, Some(spec)))
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct ScenegenArgs {
    /// Output scene directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Camera law: ring or random.
    #[arg(long, default_value = "ring")]
    camera_law: CameraLaw,
    /// Elevation of ring views in degrees.
    #[arg(long, default_value_t = 15.0, allow_negative_numbers = true)]
    ring_elevation: f64,
    /// Azimuth of the first ring view in degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    ring_phase: f64,
    /// On-screen object radius as a fraction of the smaller image side.
    #[arg(long, default_value_t = 0.3)]
    fill: f64,
    #[command(flatten)]
    template: TemplateArgs,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct FitArgs {
    /// Scene directory produced by `scenegen`.
    #[arg(long, conflicts_with_all = ["masks", "cameras"], required_unless_present = "masks")]
    scene: Option<PathBuf>,
    /// Mask PGM files (with --template-obj/--template-sph or a built-in template).
    #[arg(long, num_args = 1..)]
    masks: Vec<PathBuf>,
    /// cameras.json for --known-pose with --masks.
    #[arg(long)]
    cameras: Option<PathBuf>,
    #[command(flatten)]
    template: TemplateArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Camera hypotheses per image (1 with --known-pose).
    #[arg(long)]
    hypotheses: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Direction initialization: hemisphere or random.
    #[arg(long, default_value = "hemisphere")]
    init: DirectionInit,
    /// Standard deviation of the noise on hemisphere initial directions.
    #[arg(long, default_value_t = 0.05)]
    init_noise: f64,
    /// Drop the visibility term.
    #[arg(long)]
    no_vis: bool,
    /// Evaluate per-pixel terms on every pixel, not only the mask.
    #[arg(long)]
    no_mask_restrict: bool,
    /// Keep cameras fixed at the given ones.
    #[arg(long)]
    known_pose: bool,
    /// Visibility margin (depth units).
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
    /// Soft-silhouette sharpness in pixels.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Weight of the rotation-spread part of the diversity term.
    #[arg(long, default_value_t = 0.1)]
    lambda_div: f64,
    #[arg(long, default_value_t = 1.0)]
    w_cyc: f64,
    #[arg(long, default_value_t = 1.0)]
    w_vis: f64,
    #[arg(long, default_value_t = 1.0)]
    w_mask: f64,
    #[arg(long, default_value_t = 1.0)]
    w_div: f64,
    #[arg(long, default_value_t = 1.0)]
    w_fg: f64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct TransferArgs {
    /// Scene directory; selects masks, keypoints and (by default) ground-truth maps.
    #[arg(long, requires_all = ["source", "target"], conflicts_with_all = ["source_map", "source_mask", "target_map", "target_mask", "keypoints"])]
    scene: Option<PathBuf>,
    /// Source view index in the scene.
    #[arg(long)]
    source: Option<usize>,
    /// Target view index in the scene.
    #[arg(long)]
    target: Option<usize>,
    /// Directory of fitted `map_k.csmuv` files to use instead of ground truth.
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long, requires_all = ["source_mask", "target_map", "target_mask", "keypoints"])]
    source_map: Option<PathBuf>,
    #[arg(long)]
    source_mask: Option<PathBuf>,
    #[arg(long)]
    target_map: Option<PathBuf>,
    #[arg(long)]
    target_mask: Option<PathBuf>,
    /// Source keypoints CSV (visible rows are transferred).
    #[arg(long)]
    keypoints: Option<PathBuf>,
    /// Target keypoints CSV, used as ground truth in --records.
    #[arg(long)]
    target_keypoints: Option<PathBuf>,
    #[command(flatten)]
    template: TemplateArgs,
    /// Correspondence threshold in template units (default 0.1 × bounding radius).
    #[arg(long)]
    tau: Option<f64>,
    /// Output transfers CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also write evaluation records here.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EvalArgs {
    /// Records CSV files (concatenated).
    #[arg(long, num_args = 1.., required = true)]
    records: Vec<PathBuf>,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    /// PCK radius as a fraction of max(height, width).
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Number of ground-truth correspondences (default: records with ground truth).
    #[arg(long)]
    n_pair: Option<usize>,
    /// Output directory for metrics.json and pr_curve.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add a sample on a visibility hinge kink (the check must then fail).
    #[arg(long)]
    perturb_kinks: bool,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct RenderArgs {
    #[command(flatten)]
    template: TemplateArgs,
    /// Camera JSON file.
    #[arg(long, conflicts_with_all = ["scene", "s", "t", "r"])]
    camera: Option<PathBuf>,
    /// Scene directory whose template and camera --view are used.
    #[arg(long, requires = "view")]
    scene: Option<PathBuf>,
    #[arg(long)]
    view: Option<usize>,
    /// Scale (pixels per template unit).
    #[arg(long)]
    s: Option<f64>,
    /// Translation `tx,ty` in pixels.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    t: Option<Vec<f64>>,
    /// Euler angles `r1,r2,r3` in radians.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    r: Option<Vec<f64>>,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numerical(String),
    Core(CsmError),
}

impl From<CsmError> for CliError {
    fn from(e: CsmError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_scenegen(a: &ScenegenArgs) -> CliResult<()> {
    let (template, spec) = a.template.load()?;
    let config = SceneConfig {
        n_views: a.n_views,
        seed: a.seed,
        height: a.height,
        width: a.width,
        law: a.camera_law,
        ring_elevation_deg: a.ring_elevation,
        ring_phase_deg: a.ring_phase,
        fill: a.fill,
    };
    if a.n_views == 0 {
        return Err(CliError::Usage("--n-views must be at least 1".into()));
    }
    if a.height == 0 || a.width == 0 {
        return Err(CliError::Usage("--height and --width must be positive".into()));
    }
    if !(a.fill > 0.0 && a.fill.is_finite()) {
        return Err(CliError::Usage("--fill must be positive".into()));
    }
    let scene = generate(&template, &config)?;
    save_scene(&scene, &template, spec.as_ref(), &a.out)?;
    log::info!("wrote {} views to {}", scene.views.len(), a.out.display());
    Ok(())
}

pub fn map_file(k: usize) -> String {
    format!("map_{k}.csmuv")
}

fn fit_config(a: &FitArgs) -> CliResult<FitConfig> {
    let n_hypotheses = match (a.known_pose, a.hypotheses) {
        (true, Some(n)) if n != 1 => {
            return Err(CliError::Usage(format!("--known-pose uses one camera per image; got --hypotheses {n}")))
        }
        (true, _) => 1,
        (false, Some(n)) => n,
        (false, None) => 8,
    };
    let config = FitConfig {
        iterations: a.iterations,
        lr: a.lr,
        n_hypotheses,
        seed: a.seed,
        init_noise: a.init_noise,
        init: a.init,
        loss: LossConfig {
            weights: LossWeights {
                cyc: a.w_cyc,
                vis: a.w_vis,
                mask: a.w_mask,
                div: a.w_div,
                fg: a.w_fg,
            },
            flags: LossFlags {
                enable_vis: !a.no_vis,
                restrict_to_mask: !a.no_mask_restrict,
                known_pose: a.known_pose,
            },
            lambda_div: a.lambda_div,
            margin: a.margin,
            gamma: a.gamma,
            ..LossConfig::default()
        },
        ..FitConfig::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

#[derive(Serialize)]
struct ImageSummary {
    image: usize,
    best_iteration: usize,
    selected: usize,
    probabilities: Vec<f64>,
    initial_total: f64,
    final_total: f64,
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let config = fit_config(a)?;
    let (template, images) = if let Some(dir) = &a.scene {
        if a.template.given() {
            return Err(CliError::Usage("--scene supplies the template; drop the template flags".into()));
        }
        let (scene, template, _) = load_scene(dir)?;
        let images = scene
            .views
            .iter()
            .map(|v| FitImage {
                mask: v.mask.clone(),
                camera: Some(v.camera),
            })
            .collect::<Vec<_>>();
        (template, images)
    } else {
        let (template, _) = a.template.load()?;
        let cameras = match &a.cameras {
            Some(p) => Some(io::read_cameras(p)?),
            None => None,
        };
        if let Some(c) = &cameras {
            if c.len() != a.masks.len() {
                return Err(CliError::Usage(format!("{} cameras for {} masks", c.len(), a.masks.len())));
            }
        }
        let images = a
            .masks
            .iter()
            .enumerate()
            .map(|(k, p)| {
                Ok(FitImage {
                    mask: io::read_mask_pgm(p)?,
                    camera: cameras.as_ref().map(|c| c[k]),
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        (template, images)
    };
    if images.is_empty() {
        return Err(CliError::Usage("no input images".into()));
    }
    if config.loss.flags.known_pose && images.iter().any(|im| im.camera.is_none()) {
        return Err(CliError::Usage("--known-pose needs cameras (--scene or --cameras)".into()));
    }
    let images: Vec<FitImage> = if config.loss.flags.known_pose {
        images
    } else {
        images.into_iter().map(|im| FitImage { camera: None, ..im }).collect()
    };

    let start = Instant::now();
    let out = fit(&images, &template, &config)?;
    log::info!("fit {} images x {} iterations in {:.1?}", images.len(), config.iterations, start.elapsed());
    write_fit(&out, &images, &a.out)
}

fn write_fit(out: &FitOutput, images: &[FitImage], dir: &Path) -> CliResult<()> {
    create_dir(dir)?;
    let mut hyps: Vec<HypothesisSet> = Vec::with_capacity(out.images.len());
    let mut summary = Vec::with_capacity(out.images.len());
    for (k, (f, im)) in out.images.iter().zip(images).enumerate() {
        io::write_csmuv(&f.map, &dir.join(map_file(k)))?;
        io::write_visualization_ppm(&im.mask, &f.map, &dir.join(format!("viz_{k}.ppm")))?;
        hyps.push(f.hypotheses.clone());
        summary.push(ImageSummary {
            image: k,
            best_iteration: f.best_iteration,
            selected: f.hypotheses.best_index(),
            probabilities: f.hypotheses.probs(),
            initial_total: f.history.first().map_or(f64::NAN, |h| h.total),
            final_total: f.history.last().map_or(f64::NAN, |h| h.total),
        });
    }
    io::write_json_value(&hyps, &dir.join("hypotheses.json"))?;
    io::write_json_value(&summary, &dir.join("fit_summary.json"))?;
    io::write_losses_csv(&out.mean_history(), &dir.join("losses.csv"))?;
    Ok(())
}

struct TransferInputs {
    template: TemplateShape,
    c_s: SurfaceMap,
    m_s: Mask,
    c_t: SurfaceMap,
    m_t: Mask,
    kps_s: Vec<KeypointObs>,
    kps_t: Option<Vec<KeypointObs>>,
}

fn transfer_inputs(a: &TransferArgs) -> CliResult<TransferInputs> {
    if let Some(dir) = &a.scene {
        if a.template.given() {
            return Err(CliError::Usage("--scene supplies the template; drop the template flags".into()));
        }
        let (scene, template, _) = load_scene(dir)?;
        let (s, t) = (a.source.expect("required"), a.target.expect("required"));
        let n = scene.views.len();
        if s >= n || t >= n {
            return Err(CliError::Usage(format!("--source/--target must be below {n}")));
        }
        let map = |k: usize| -> CliResult<SurfaceMap> {
            match &a.maps {
                Some(m) => Ok(io::read_csmuv(&m.join(map_file(k)))?),
                None => Ok(io::read_csmuv(&dir.join(gt_file(k)))?),
            }
        };
        Ok(TransferInputs {
            c_s: map(s)?,
            c_t: map(t)?,
            m_s: scene.views[s].mask.clone(),
            m_t: scene.views[t].mask.clone(),
            kps_s: scene.views[s].keypoints.clone(),
            kps_t: Some(scene.views[t].keypoints.clone()),
            template,
        })
    } else {
        let need = |p: &Option<PathBuf>, flag: &str| {
            p.clone().ok_or_else(|| CliError::Usage(format!("--{flag} is required without --scene")))
        };
        let (template, _) = a.template.load()?;
        Ok(TransferInputs {
            c_s: io::read_csmuv(&need(&a.source_map, "source-map")?)?,
            m_s: io::read_mask_pgm(&need(&a.source_mask, "source-mask")?)?,
            c_t: io::read_csmuv(&need(&a.target_map, "target-map")?)?,
            m_t: io::read_mask_pgm(&need(&a.target_mask, "target-mask")?)?,
            kps_s: io::read_keypoints_csv(&need(&a.keypoints, "keypoints")?)?,
            kps_t: match &a.target_keypoints {
                Some(p) => Some(io::read_keypoints_csv(p)?),
                None => None,
            },
            template,
        })
    }
}

fn cmd_transfer(a: &TransferArgs) -> CliResult<()> {
    let inp = transfer_inputs(a)?;
    let tau = a.tau.unwrap_or_else(|| default_tau(&inp.template));
    if !(tau >= 0.0) {
        return Err(CliError::Usage("--tau must be non-negative".into()));
    }
    let index = TargetIndex::new(&inp.c_t, &inp.m_t, &inp.template)?;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (i, kp) in inp.kps_s.iter().enumerate().filter(|(_, k)| k.visible) {
        let p = source_pixel(&inp.m_s, kp.x, kp.y)
            .ok_or_else(|| CliError::Usage(format!("keypoint {} has no source foreground pixel", kp.name)))?;
        let r: TransferResult = index.nearest(&inp.template.phi(&inp.c_s.dirs[p]).position, tau);
        rows.push(TransferRow::new(&kp.name, &r));
        let gt = inp
            .kps_t
            .as_ref()
            .and_then(|t| t.iter().find(|k| k.name == kp.name))
            .filter(|k| k.visible)
            .map(|k| [k.x, k.y]);
        records.push(EvalRecord {
            id: i as u64,
            pred: r.target_pixel,
            confidence: r.confidence,
            gt,
            height: inp.m_t.height,
            width: inp.m_t.width,
        });
    }
    io::write_transfers_csv(&rows, &a.out)?;
    if let Some(path) = &a.records {
        io::write_records_csv(&records, path)?;
    }
    log::info!("transferred {} keypoints", rows.len());
    Ok(())
}

#[derive(Serialize)]
struct Metrics {
    #[serde(flatten)]
    summary: EvalSummary,
    alpha: f64,
    n_records: usize,
    n_pair: usize,
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    if !(a.alpha > 0.0) {
        return Err(CliError::Usage("--alpha must be positive".into()));
    }
    let mut records = Vec::new();
    for p in &a.records {
        records.extend(io::read_records_csv(p, a.height, a.width)?);
    }
    if records.is_empty() {
        return Err(CliError::Usage("no records to evaluate".into()));
    }
    let n_pair = a.n_pair.unwrap_or_else(|| records.iter().filter(|r| r.gt.is_some()).count());
    let curve = apk(&records, a.alpha, n_pair)?;
    let summary = EvalSummary {
        ap: curve.ap,
        pck: pck(&records, a.alpha)?,
    };
    create_dir(&a.out)?;
    write_pr_curve(&curve, &a.out.join("pr_curve.csv"))?;
    let metrics = Metrics {
        summary,
        alpha: a.alpha,
        n_records: records.len(),
        n_pair,
    };
    io::write_json_value(&metrics, &a.out.join("metrics.json"))?;
    println!("{}", serde_json::to_string(&metrics).expect("serializable"));
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let report = gradcheck::run(&GradcheckConfig {
        seed: a.seed,
        perturb_kinks: a.perturb_kinks,
    })?;
    let text = serde_json::to_string_pretty(&report).expect("serializable");
    if let Some(p) = &a.out {
        io::write_json_value(&report, p)?;
    }
    println!("{text}");
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
        Err(CliError::Numerical(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn render_camera(a: &RenderArgs) -> CliResult<(TemplateShape, Camera)> {
    if let Some(dir) = &a.scene {
        let (scene, template, _) = load_scene(dir)?;
        let k = a.view.expect("required");
        let view = scene
            .views
            .get(k)
            .ok_or_else(|| CliError::Usage(format!("--view {k} out of range ({} views)", scene.views.len())))?;
        return Ok((template, view.camera));
    }
    let (template, _) = a.template.load()?;
    let cam = if let Some(p) = &a.camera {
        io::read_camera(p)?
    } else {
        let s = a.s.unwrap_or(0.3 * a.height.min(a.width) as f64 / template.bounding_radius());
        let t = a.t.clone().unwrap_or(vec![a.width as f64 / 2.0, a.height as f64 / 2.0]);
        let r = a.r.clone().unwrap_or(vec![0.0; 3]);
        if t.len() != 2 || r.len() != 3 {
            return Err(CliError::Usage("--t takes tx,ty and --r takes r1,r2,r3".into()));
        }
        Camera::new(s, [t[0], t[1]], [r[0], r[1], r[2]]).map_err(|e| CliError::Usage(e.to_string()))?
    };
    Ok((template, cam))
}

fn cmd_render(a: &RenderArgs) -> CliResult<()> {
    if a.height == 0 || a.width == 0 {
        return Err(CliError::Usage("--height and --width must be positive".into()));
    }
    if !(a.gamma > 0.0) {
        return Err(CliError::Usage("--gamma must be positive".into()));
    }
    let (template, cam) = render_camera(a)?;
    let (h, w) = (a.height, a.width);
    create_dir(&a.out)?;
    let depth = render_depth(&template, &cam, h, w);
    io::write_depth_pgm(w, h, &depth.depth, &a.out.join("depth.pgm"))?;
    let (map, mask) = render_surface_directions(&template, &cam, h, w);
    io::write_mask_pgm(&mask, &a.out.join("mask.pgm"))?;
    io::write_csmuv(&map, &a.out.join("gt.csmuv"))?;
    io::write_visualization_ppm(&mask, &map, &a.out.join("viz.ppm"))?;
    let soft = render_soft_silhouette(&template, &cam, h, w, a.gamma);
    let soft_mask = Mask {
        width: w,
        height: h,
        fg: soft.alpha,
    };
    io::write_mask_pgm(&soft_mask, &a.out.join("soft.pgm"))?;
    io::write_camera(&cam, &a.out.join("camera.json"))?;
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Scenegen(a) => cmd_scenegen(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Render(a) => cmd_render(a),
    }
}

fn main() -> ExitCode {
    let raw: Vec<OsString> = std::env::args_os().collect();
    let args = match config::expand_args(raw, &SUBCOMMANDS) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
