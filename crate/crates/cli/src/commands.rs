use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Result};
use boxloss::assignment::{kmeans_anchors, KMeansDistance};
use boxloss::geometry::{BBox, PenaltyKind};
use boxloss::gradcheck::{check_kind, GradCheckSummary};
use boxloss::losses::{iou_coefficient, CoeffConfig, CoeffMode, NegativeBranch, SampleKind};
use boxloss::postprocess::{coco_thresholds, evaluate_ap, nms_per_image, Detection, GroundTruth};
use boxloss::simulation::{
    direction_sweep, run_regression_benchmark, run_toy_experiment, BenchmarkConfig, Convergence,
    DescentObjective, SceneSpec, SweepConfig, ToyConfig,
};
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::io::InputFile;

/// Result of a command before it is framed with the manifest.
pub struct Outcome {
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputFile>,
    pub body: String,
    /// Process exit code after the report is written.
    pub exit_code: i32,
}

impl Outcome {
    fn ok(
        config: impl Serialize,
        seed: Option<u64>,
        inputs: Vec<InputFile>,
        body: String,
    ) -> Result<Self> {
        Ok(Self {
            config: serde_json::to_value(config)?,
            seed,
            inputs,
            body,
            exit_code: 0,
        })
    }
}

fn parse_box(s: &str) -> std::result::Result<BBox<f64>, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected cx,cy,w,h, got `{s}`"));
    }
    let mut v = [0.0; 4];
    for (slot, (p, name)) in v.iter_mut().zip(parts.iter().zip(["cx", "cy", "w", "h"])) {
        *slot = p
            .parse()
            .map_err(|_| format!("field `{name}`: `{p}` is not a number"))?;
    }
    BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<PenaltyKind, String> {
    PenaltyKind::parse(s)
        .ok_or_else(|| format!("unknown loss kind `{s}` (l1, iou, giou, diou, miou)"))
}

fn parse_mode(s: &str) -> std::result::Result<CoeffMode, String> {
    CoeffMode::parse(s)
        .ok_or_else(|| format!("unknown coefficient mode `{s}` (none, pos, neg, both)"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum BranchArg {
    /// (1 - IoU)^gamma
    OneMinusIou,
    /// IoU^gamma
    IouPow,
}

impl From<BranchArg> for NegativeBranch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::OneMinusIou => NegativeBranch::OneMinusIoUPow,
            BranchArg::IouPow => NegativeBranch::IoUPowAsPrinted,
        }
    }
}

// ---- sweep ----

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct SweepArgs {
    /// Side of both square boxes.
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,
    /// Length of the move.
    #[arg(long, default_value_t = 0.1)]
    pub dr: f64,
    /// Number of directions over a full turn.
    #[arg(long, default_value_t = 3600)]
    pub steps: usize,
    /// Add a column evaluated on true box geometry.
    #[arg(long)]
    pub geometric: bool,
}

pub fn sweep(args: &SweepArgs) -> Result<Outcome> {
    let cfg = SweepConfig {
        a: args.a,
        dr: args.dr,
        n_theta: args.steps,
    };
    let profile = direction_sweep(&cfg)?;
    let mut body = String::new();
    body.push_str(if args.geometric {
        "theta_deg,r_diou,r_diou_geometric\n"
    } else {
        "theta_deg,r_diou\n"
    });
    for (i, p) in profile.points.iter().enumerate() {
        let deg = 360.0 * i as f64 / cfg.n_theta as f64;
        if args.geometric {
            writeln!(body, "{deg},{},{}", p.r_model, p.r_geometric)?;
        } else {
            writeln!(body, "{deg},{}", p.r_model)?;
        }
    }
    writeln!(body, "argmin,{}", profile.argmin_deg())?;
    writeln!(
        body,
        "# published_min_deg={} disagrees_with_published={}",
        profile.published_min_deg, profile.disagrees_with_published
    )?;
    Outcome::ok(cfg, None, vec![], body)
}

// ---- gradcheck ----

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct GradcheckArgs {
    /// Kind to check, or `all`.
    #[arg(long, default_value = "all")]
    pub kind: String,
    /// Samples per kind.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
}

#[derive(Serialize)]
struct GradcheckConfig {
    kinds: Vec<PenaltyKind>,
    n: usize,
    tol: f64,
    step: f64,
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<Outcome> {
    if args.n == 0 {
        bail!("--n must be at least 1");
    }
    if !(args.tol.is_finite() && args.tol > 0.0) {
        bail!("--tol must be positive");
    }
    if !(args.step.is_finite() && args.step > 0.0) {
        bail!("--step must be positive");
    }
    let kinds: Vec<PenaltyKind> = if args.kind == "all" {
        PenaltyKind::BOX_KINDS.to_vec()
    } else {
        let k = parse_kind(&args.kind).map_err(anyhow::Error::msg)?;
        if k == PenaltyKind::L1Norm {
            bail!("l1 has no box-space gradient to check");
        }
        vec![k]
    };
    let summaries: Vec<GradCheckSummary> = kinds
        .iter()
        .map(|&k| check_kind(k, args.n, args.seed, args.step))
        .collect::<boxloss::Result<_>>()?;
    let mut body = String::from("kind,samples,max_rel_err,tol,pass\n");
    let mut all_pass = true;
    for s in &summaries {
        let pass = s.passes(args.tol);
        all_pass &= pass;
        writeln!(
            body,
            "{},{},{:e},{:e},{}",
            s.kind, s.samples, s.max_rel_err, args.tol, pass
        )?;
    }
    let cfg = GradcheckConfig {
        kinds,
        n: args.n,
        tol: args.tol,
        step: args.step,
    };
    let mut out = Outcome::ok(cfg, Some(args.seed), vec![], body)?;
    if !all_pass {
        out.exit_code = 2;
    }
    Ok(out)
}

// ---- converge ----

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct ConvergeArgs {
    /// Comma-separated loss kinds.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind, default_value = "l1,iou,giou,diou,miou")]
    pub kinds: Vec<PenaltyKind>,
    /// Target box as cx,cy,w,h.
    #[arg(long, value_parser = parse_box, default_value = "0,0,1,1")]
    pub target: BBox<f64>,
    /// JSONL file of start boxes; the built-in 225-start grid otherwise.
    #[arg(long)]
    pub starts: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub max_steps: usize,
    /// IoU at which a run counts as converged.
    #[arg(long, default_value_t = 0.9)]
    pub tau: f64,
    /// Converge on center distance instead of IoU.
    #[arg(long)]
    pub center_tol: Option<f64>,
    /// Update only the center.
    #[arg(long)]
    pub center_only: bool,
    /// Descend on the distance term alone (diou and miou only).
    #[arg(long)]
    pub distance_term_only: bool,
    /// Uniform jitter added to each start center.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn converge(args: &ConvergeArgs) -> Result<Outcome> {
    let mut inputs = Vec::new();
    let starts = match &args.starts {
        Some(p) => {
            let f = InputFile::read(p)?;
            let boxes: Vec<BBox<f64>> = f.parse_jsonl()?;
            inputs.push(f);
            boxes
        }
        None => BenchmarkConfig::default_grid(),
    };
    let cfg = BenchmarkConfig {
        kinds: args.kinds.clone(),
        target: args.target,
        starts,
        learning_rate: args.lr,
        max_steps: args.max_steps,
        convergence: match args.center_tol {
            Some(t) => Convergence::CenterDistance(t),
            None => Convergence::Iou(args.tau),
        },
        objective: if args.distance_term_only {
            DescentObjective::DistanceTermOnly
        } else {
            DescentObjective::FullLoss
        },
        center_only: args.center_only,
        record_trajectories: false,
        start_jitter: args.jitter,
        seed: args.seed,
    };
    let report = run_regression_benchmark(&cfg)?;
    let mut body = String::from(
        "run,kind,start_cx,start_cy,start_w,start_h,initial_iou,final_iou,steps,converged,diverged\n",
    );
    for r in &report.runs {
        writeln!(
            body,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.run_index,
            r.kind,
            r.start.cx,
            r.start.cy,
            r.start.w,
            r.start.h,
            r.initial_iou,
            r.final_iou,
            r.steps,
            r.converged,
            r.diverged
        )?;
    }
    for s in &report.summaries {
        writeln!(
            body,
            "# summary kind={} runs={} overlapping={} converged_overlapping={} overlapping_rate={} \
             converged_total={} diverged={} mean_steps_converged={} mean_final_iou={}",
            s.kind,
            s.runs,
            s.overlapping_starts,
            s.converged_overlapping,
            s.overlapping_rate,
            s.converged_total,
            s.diverged,
            s.mean_steps_converged,
            s.mean_final_iou
        )?;
    }
    // The start list is recorded through the input digest, not inline.
    let mut config = serde_json::to_value(&cfg)?;
    if args.starts.is_some() {
        config["starts"] = serde_json::Value::String("<input>".into());
    } else {
        config["starts"] = serde_json::Value::String("default_grid".into());
    }
    Ok(Outcome {
        config,
        seed: Some(args.seed),
        inputs,
        body,
        exit_code: 0,
    })
}

// ---- toy ----

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Samples that get the IoU coefficient: none, pos, neg, both.
    #[arg(long, value_parser = parse_mode, default_value = "none")]
    pub mode: CoeffMode,
    /// Localization loss kind.
    #[arg(long, value_parser = parse_kind, default_value = "diou")]
    pub loc: PenaltyKind,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long, value_enum, default_value_t = BranchArg::OneMinusIou)]
    pub neg_branch: BranchArg,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lr_cls: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr_loc: f64,
    /// JSON scene description; the built-in scene otherwise.
    #[arg(long)]
    pub scene: Option<PathBuf>,
}

pub fn toy(args: &ToyArgs) -> Result<Outcome> {
    let mut inputs = Vec::new();
    let mut cfg = ToyConfig::default();
    if let Some(p) = &args.scene {
        let f = InputFile::read(p)?;
        cfg.scene = serde_json::from_slice::<SceneSpec>(&f.bytes)
            .map_err(|e| anyhow::anyhow!("{}:{}: {}", p.display(), e.line(), e))?;
        inputs.push(f);
    }
    cfg.epochs = args.epochs;
    cfg.seed = args.seed;
    cfg.lr_cls = args.lr_cls;
    cfg.lr_loc = args.lr_loc;
    cfg.loss.alpha = args.alpha;
    cfg.loss.loc_kind = args.loc;
    cfg.loss.coeff_mode = args.mode;
    cfg.loss.coeff = CoeffConfig::new(args.gamma, args.neg_branch.into())?;
    let report = run_toy_experiment(&cfg)?;
    let mut body = serde_json::to_string_pretty(&report)?;
    body.push('\n');
    Outcome::ok(&cfg, Some(args.seed), inputs, body)
}

// ---- cluster ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum DistanceArg {
    Iou,
    Euclidean,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct ClusterArgs {
    /// JSONL boxes; only width and height are used.
    pub boxes: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, value_enum, default_value_t = DistanceArg::Iou)]
    pub distance: DistanceArg,
}

#[derive(Serialize)]
struct ClusterConfig {
    k: usize,
    max_iters: usize,
    distance: DistanceArg,
}

pub fn cluster(args: &ClusterArgs) -> Result<Outcome> {
    let f = InputFile::read(&args.boxes)?;
    let boxes: Vec<BBox<f64>> = f.parse_jsonl()?;
    let sizes: Vec<(f64, f64)> = boxes.iter().map(|b| (b.w, b.h)).collect();
    let metric = match args.distance {
        DistanceArg::Iou => KMeansDistance::OneMinusIoU,
        DistanceArg::Euclidean => KMeansDistance::Euclidean,
    };
    let res = kmeans_anchors(&sizes, args.k, args.seed, args.max_iters, metric)?;
    let mut body = String::from("w,h,members\n");
    for c in &res.clusters {
        writeln!(body, "{},{},{}", c.w, c.h, c.member_count)?;
    }
    writeln!(
        body,
        "# iterations={} distortion={}",
        res.iterations,
        res.distortion()
    )?;
    let cfg = ClusterConfig {
        k: args.k,
        max_iters: args.max_iters,
        distance: args.distance,
    };
    Outcome::ok(cfg, Some(args.seed), vec![f], body)
}

// ---- nms ----

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct NmsArgs {
    /// JSONL detections with cx, cy, w, h, score and optional image_id.
    pub detections: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
}

pub fn nms(args: &NmsArgs) -> Result<Outcome> {
    if !(0.0..=1.0).contains(&args.iou) {
        bail!("--iou must lie in [0, 1]");
    }
    let f = InputFile::read(&args.detections)?;
    let dets: Vec<Detection<f64>> = f.parse_jsonl()?;
    let kept = nms_per_image(&dets, args.iou);
    let mut body = String::new();
    for d in &kept {
        body.push_str(&serde_json::to_string(d)?);
        body.push('\n');
    }
    Outcome::ok(serde_json::json!({ "iou": args.iou }), None, vec![f], body)
}

// ---- eval ----

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct EvalArgs {
    /// JSONL detections.
    pub detections: PathBuf,
    /// JSONL ground truth with cx, cy, w, h and optional image_id.
    pub ground_truth: PathBuf,
    /// Comma-separated IoU thresholds; 0.50:0.05:0.95 otherwise.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Vec<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| x.to_string())
}

pub fn eval(args: &EvalArgs) -> Result<Outcome> {
    for &t in &args.thresholds {
        if !(t > 0.0 && t <= 1.0) {
            bail!("threshold {t} outside (0, 1]");
        }
    }
    let fd = InputFile::read(&args.detections)?;
    let fg = InputFile::read(&args.ground_truth)?;
    let dets: Vec<Detection<f64>> = fd.parse_jsonl()?;
    let gts: Vec<GroundTruth<f64>> = fg.parse_jsonl()?;
    let thresholds = if args.thresholds.is_empty() {
        coco_thresholds()
    } else {
        args.thresholds.clone()
    };
    let report = evaluate_ap(&dets, &gts, &thresholds);
    let mut body = String::from("metric,value\n");
    writeln!(body, "ap,{}", report.ap)?;
    writeln!(body, "ap50,{}", opt(report.ap50))?;
    writeln!(body, "ap75,{}", opt(report.ap75))?;
    writeln!(body, "ap_s,{}", opt(report.ap_s))?;
    writeln!(body, "ap_m,{}", opt(report.ap_m))?;
    writeln!(body, "ap_l,{}", opt(report.ap_l))?;
    for (t, ap) in &report.per_threshold {
        writeln!(body, "ap@{t},{ap}")?;
    }
    Outcome::ok(
        serde_json::json!({ "thresholds": thresholds }),
        None,
        vec![fd, fg],
        body,
    )
}

// ---- coeff ----

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct CoeffArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,5")]
    pub gammas: Vec<f64>,
    /// Number of IoU points in [0, 1].
    #[arg(long, default_value_t = 11)]
    pub points: usize,
    #[arg(long, value_enum, default_value_t = BranchArg::OneMinusIou)]
    pub neg_branch: BranchArg,
}

pub fn coeff(args: &CoeffArgs) -> Result<Outcome> {
    if args.points < 2 {
        bail!("--points must be at least 2");
    }
    let cfgs: Vec<CoeffConfig<f64>> = args
        .gammas
        .iter()
        .map(|&g| CoeffConfig::new(g, args.neg_branch.into()))
        .collect::<boxloss::Result<_>>()?;
    let mut body = String::from("iou,gamma,positive,negative\n");
    for i in 0..args.points {
        let u = i as f64 / (args.points - 1) as f64;
        for c in &cfgs {
            let p = iou_coefficient(SampleKind::Positive, u, c);
            let n = iou_coefficient(SampleKind::Negative, u, c);
            writeln!(body, "{u},{},{p},{n}", c.gamma)?;
        }
    }
    let cfg = serde_json::json!({ "gammas": args.gammas, "points": args.points, "neg_branch": args.neg_branch });
    Outcome::ok(cfg, None, vec![], body)
}
