use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use stableflow_core::dynamics::{Task, TaskKind, Trajectory};
use stableflow_core::parallel::par_map;
use stableflow_core::ppo::{
    deterministic_episode, itr90, train as ppo_train, BaselinePolicy, Checkpoint, IterationMetrics, NfPolicy, Policy, PolicyKind,
    BASELINE_HIDDEN,
};
use stableflow_core::verify::{
    deterministic_rollout, energy_grid, verify_convergence, verify_jacobian_rank, verify_lyapunov_decrease,
    verify_passivity, verify_structure, VerificationReport, Window,
};
use stableflow_core::{flow_forward, lyapunov_potential, FlowParams, Gains, PlantState, PolicyParams};

use crate::config::ExperimentConfig;
use crate::output::{write_atomic, write_json, write_manifest};
use crate::{CliError, Context, StartsArgs};

pub const METRICS_HEADER: &str = "iteration,mean_return,success_rate,mean_policy_std,mean_abs_u,mean_dist";
pub const SWEEP_HEADER: &str = "policy_kind,sigma_init,itr90,mean_dist,mean_abs_u";

const STARTS_STREAM: u64 = 0x5354_4152_5453;
const VERIFY_START_SPEED: f64 = 0.5;
const RANK_WINDOW_HALF: f64 = 1.0;
const RANK_RESOLUTION: usize = 21;
const GRID_WINDOW_HALF: f64 = 0.3;

fn starts_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STARTS_STREAM);
    rng
}

fn core_io(e: CliError) -> stableflow_core::Error {
    stableflow_core::Error::Io(std::io::Error::other(e.to_string()))
}

pub fn metrics_csv(rows: &[IterationMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.iteration, m.mean_return, m.success_rate, m.mean_policy_std, m.mean_abs_u, m.mean_dist
        );
    }
    s
}

fn timing_csv(rows: &[IterationMetrics]) -> String {
    let mut s = String::from("iteration,wall_seconds,episodes_discarded\n");
    for m in rows {
        let _ = writeln!(s, "{},{},{}", m.iteration, m.wall_seconds, m.episodes_discarded);
    }
    s
}

fn train_policy<P: Policy>(
    cfg: &ExperimentConfig,
    task: &Task,
    policy: P,
    seed: u64,
    dir: &Path,
    jobs: usize,
    snapshot: fn(&P) -> Checkpoint,
) -> Result<Vec<IterationMetrics>, CliError> {
    let tcfg = cfg.train_config(seed);
    let every = cfg.output.checkpoint_every;
    let save = |path: PathBuf, p: &P| -> Result<(), CliError> {
        let text = snapshot(p).to_json()?;
        write_atomic(&path, text.as_bytes())
    };
    let mut rows = Vec::new();
    write_atomic(&dir.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    let outcome = ppo_train(task, policy, &tcfg, jobs, |m, p| {
        rows.push(m.clone());
        write_atomic(&dir.join("metrics.csv"), metrics_csv(&rows).as_bytes()).map_err(core_io)?;
        write_atomic(&dir.join("timing.csv"), timing_csv(&rows).as_bytes()).map_err(core_io)?;
        let done = m.iteration + 1;
        if done % every == 0 {
            save(dir.join("checkpoints").join(format!("iter_{done:04}.json")), p).map_err(core_io)?;
        }
        Ok(())
    })?;
    save(dir.join("final.json"), &outcome.policy)?;
    Ok(outcome.metrics)
}

/// Trains one policy and writes metrics, timing, checkpoints and the final
/// policy under `dir`.
pub fn run_training(
    cfg: &ExperimentConfig,
    task: &Task,
    kind: PolicyKind,
    sigma_init: f64,
    seed: u64,
    dir: &Path,
    jobs: usize,
) -> Result<Vec<IterationMetrics>, CliError> {
    let dim = task.dim();
    let x_ref = task.x_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &cfg.policy;
    match kind {
        PolicyKind::Nf => {
            let policy = NfPolicy::init(dim, p.n_flow, p.n_h, sigma_init, &x_ref, cfg.gains()?, &mut rng)?;
            train_policy(cfg, task, policy, seed, dir, jobs, |p| Checkpoint::from(p))
        }
        PolicyKind::Baseline => {
            let policy = BaselinePolicy::init(dim, &BASELINE_HIDDEN, sigma_init, &x_ref, &mut rng)?;
            train_policy(cfg, task, policy, seed, dir, jobs, |p| Checkpoint::from(p))
        }
    }
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let task = cfg.build_task()?;
    let kind = cfg.policy.kind;
    write_manifest(&ctx.out, "train", cfg, ctx.seeds.clone(), None)?;
    let outer = ctx.jobs.min(ctx.seeds.len()).max(1);
    let inner = (ctx.jobs / outer).max(1);
    let results = par_map(outer, ctx.seeds.len(), |i| {
        let seed = ctx.seeds[i];
        let dir = ctx.out.join(kind.as_str()).join(format!("seed_{seed}"));
        run_training(cfg, &task, kind, cfg.policy.sigma_init, seed, &dir, inner).map(|m| (seed, m))
    });
    for r in results {
        let (seed, metrics) = r?;
        let success: Vec<f64> = metrics.iter().map(|m| m.success_rate).collect();
        let last = metrics.last().map_or(f64::NAN, |m| m.success_rate);
        let hit = itr90(&success).map_or("never".to_string(), |i| i.to_string());
        ctx.say(&format!(
            "{} seed {seed}: {} iterations, final success {last:.2}, itr90 {hit}",
            kind.as_str(),
            metrics.len()
        ));
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Checkpoint::from_json(&text).map_err(|e| CliError::Usage(format!("{}: invalid checkpoint: {e}", path.display())))
}

fn nf_checkpoint(path: &Path) -> Result<(PolicyParams, Gains), CliError> {
    match load_checkpoint(path)? {
        Checkpoint::Nf { policy, gains } => Ok((policy, gains)),
        Checkpoint::Baseline { .. } => Err(CliError::Unsupported(format!(
            "{} holds a baseline policy; this command needs a normalizing-flow policy",
            path.display()
        ))),
    }
}

fn check_dim(task: &Task, dim: usize) -> Result<(), CliError> {
    if task.dim() != dim {
        return Err(CliError::Usage(format!(
            "policy is {dim}-dimensional but task {} is {}-dimensional",
            task.kind().as_str(),
            task.dim()
        )));
    }
    Ok(())
}

fn verification_starts(task: &Task, n: usize, seed: u64) -> Result<Vec<PlantState>, CliError> {
    let mut rng = starts_rng(seed);
    let speed = Normal::new(0.0, VERIFY_START_SPEED).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut starts = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = task.sample_start(&mut rng);
        if task.kind() != TaskKind::Block2d {
            s.xdot = DVector::from_fn(task.dim(), |_, _| speed.sample(&mut rng));
        }
        starts.push(s);
    }
    Ok(starts)
}

fn battery(
    ctx: &Context,
    task: &Task,
    policy: &PolicyParams,
    gains: &Gains,
    starts: &[PlantState],
    jobs: usize,
) -> Result<Vec<VerificationReport>, CliError> {
    let v = &ctx.cfg.verify;
    let mut reports = Vec::new();
    match task {
        Task::Block(plant) => {
            reports.push(verify_passivity(plant, policy, gains, starts, v, jobs)?);
        }
        Task::Point { plant, .. } => {
            reports.push(verify_lyapunov_decrease(plant, policy, gains, starts, v, jobs)?);
            reports.push(verify_convergence(plant, policy, gains, starts, v, jobs)?);
        }
        Task::Arm { plant, .. } => {
            reports.push(verify_lyapunov_decrease(plant, policy, gains, starts, v, jobs)?);
            reports.push(verify_convergence(plant, policy, gains, starts, v, jobs)?);
            let mut skew = Vec::new();
            for (i, s) in starts.iter().enumerate() {
                match deterministic_rollout(plant, policy, gains, s, v.horizon, &v.sim) {
                    Ok(traj) => {
                        let mut r = verify_structure(plant, &traj, v);
                        if let Some(w) = r.witness.as_mut() {
                            w.case = i;
                        }
                        skew.push(r);
                    }
                    Err(e) => log::warn!("skew check skipped for start {i}: {e}"),
                }
            }
            if !skew.is_empty() {
                reports.push(VerificationReport::merge(skew)?);
            }
        }
    }
    let x_ref: Vec<f64> = policy.x_ref.clone();
    let window = Window::centered(&x_ref, RANK_WINDOW_HALF);
    reports.push(verify_jacobian_rank(&policy.flow, &window, RANK_RESOLUTION, v)?);
    Ok(reports)
}

pub fn verify(ctx: &Context, checkpoint: Option<&Path>, random_flows: Option<usize>, n_starts: usize) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    cfg.validate()?;
    let task = cfg.build_task()?;
    if n_starts == 0 {
        return Err(CliError::Usage("--n-starts must be at least 1".into()));
    }
    let base = ctx.base_seed();
    let per_flow: Vec<Result<Vec<VerificationReport>, CliError>> = match (checkpoint, random_flows) {
        (Some(path), _) => {
            let (policy, gains) = nf_checkpoint(path)?;
            check_dim(&task, policy.dim())?;
            let starts = verification_starts(&task, n_starts, base)?;
            vec![battery(ctx, &task, &policy, &gains, &starts, ctx.jobs)]
        }
        (None, Some(n)) => {
            if n == 0 {
                return Err(CliError::Usage("--random-flows must be at least 1".into()));
            }
            let gains = cfg.gains()?;
            let dim = task.dim();
            let x_ref: Vec<f64> = task.x_ref().iter().copied().collect();
            par_map(ctx.jobs, n, |i| {
                let seed = base + i as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let flow = FlowParams::random(dim, cfg.policy.n_flow, cfg.policy.n_h, &mut rng)?;
                let policy = PolicyParams::with_sigma(flow, cfg.policy.sigma_init, x_ref.clone())?;
                let starts = verification_starts(&task, n_starts, seed)?;
                let mut reports = battery(ctx, &task, &policy, &gains, &starts, 1)?;
                for r in &mut reports {
                    if let Some(w) = r.witness.as_mut() {
                        let note = w.note.take().map_or(String::new(), |n| format!("; {n}"));
                        w.note = Some(format!("flow seed {seed}{note}"));
                    }
                }
                Ok(reports)
            })
        }
        (None, None) => return Err(CliError::Usage("pass --checkpoint or --random-flows".into())),
    };
    let mut by_property: Vec<Vec<VerificationReport>> = Vec::new();
    for flow_reports in per_flow {
        for (k, r) in flow_reports?.into_iter().enumerate() {
            if by_property.len() <= k {
                by_property.push(Vec::new());
            }
            by_property[k].push(r);
        }
    }
    let reports = by_property
        .into_iter()
        .map(VerificationReport::merge)
        .collect::<stableflow_core::Result<Vec<_>>>()?;
    let extra = json!({
        "task": task.kind().as_str(),
        "checkpoint": checkpoint.map(|p| p.display().to_string()),
        "random_flows": random_flows,
        "n_starts": n_starts,
    });
    write_manifest(&ctx.out, "verify", cfg, vec![base], Some(extra))?;
    write_json(&ctx.out.join("verify_report.json"), &reports)?;
    for r in &reports {
        ctx.say(&r.summary());
    }
    let failed: Vec<&VerificationReport> = reports.iter().filter(|r| !r.pass).collect();
    if failed.is_empty() {
        return Ok(());
    }
    let mut msg = String::new();
    for r in failed {
        let wit = r.witness.as_ref().map_or("none".to_string(), |w| serde_json::to_string(w).unwrap_or_default());
        let _ = write!(msg, "\n  {} (worst {:.3e} {}), witness {wit}", r.property, r.worst_violation, r.units);
    }
    Err(CliError::Verification(msg))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StartSpec {
    Rest(Vec<f64>),
    Full {
        x: Vec<f64>,
        #[serde(default)]
        xdot: Option<Vec<f64>>,
    },
}

fn resolve_starts(ctx: &Context, task: &Task, args: &StartsArgs) -> Result<Vec<PlantState>, CliError> {
    let starts = if let Some(path) = &args.starts {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let specs: Vec<StartSpec> = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: expected a JSON array of start states: {e}", path.display())))?;
        let mut out = Vec::with_capacity(specs.len());
        for spec in specs {
            let (x, xdot) = match spec {
                StartSpec::Rest(x) => (x, None),
                StartSpec::Full { x, xdot } => (x, xdot),
            };
            let xdot = xdot.unwrap_or_else(|| vec![0.0; x.len()]);
            if x.len() != task.dim() {
                return Err(CliError::Usage(format!(
                    "{}: start has {} coordinates, task needs {}",
                    path.display(),
                    x.len(),
                    task.dim()
                )));
            }
            out.push(PlantState::from_slices(&x, &xdot).map_err(|e| CliError::Usage(e.to_string()))?);
        }
        out
    } else if let Some(n) = args.n_random {
        let mut rng = starts_rng(ctx.base_seed());
        (0..n).map(|_| task.sample_start(&mut rng)).collect()
    } else {
        task.eval_starts()
    };
    if starts.is_empty() {
        return Err(CliError::Usage("no start states".into()));
    }
    Ok(starts)
}

#[derive(Clone)]
enum AnyPolicy {
    Nf(NfPolicy),
    Baseline(BaselinePolicy),
}

impl AnyPolicy {
    fn load(path: &Path) -> Result<Self, CliError> {
        Ok(match load_checkpoint(path)? {
            Checkpoint::Nf { policy, gains } => AnyPolicy::Nf(NfPolicy::new(policy, gains)?),
            Checkpoint::Baseline { policy } => AnyPolicy::Baseline(policy),
        })
    }

    fn dim(&self) -> usize {
        match self {
            AnyPolicy::Nf(p) => p.dim(),
            AnyPolicy::Baseline(p) => p.dim(),
        }
    }

    fn kind(&self) -> PolicyKind {
        match self {
            AnyPolicy::Nf(p) => p.kind(),
            AnyPolicy::Baseline(p) => p.kind(),
        }
    }

    fn episode(&self, ctx: &Context, task: &Task, start: PlantState) -> stableflow_core::Result<Trajectory> {
        let cfg = ctx.cfg.train_config(ctx.base_seed());
        match self {
            AnyPolicy::Nf(p) => deterministic_episode(task, p, start, &cfg),
            AnyPolicy::Baseline(p) => deterministic_episode(task, p, start, &cfg),
        }
    }
}

#[derive(Serialize)]
struct EvalRecord {
    start: usize,
    x0: Vec<f64>,
    status: String,
    success: bool,
    final_dist: Option<f64>,
    total_reward: Option<f64>,
    trajectory: Option<String>,
}

pub fn eval(ctx: &Context, checkpoint: &Path, starts: &StartsArgs) -> Result<(), CliError> {
    let task = ctx.cfg.build_task()?;
    let policy = AnyPolicy::load(checkpoint)?;
    check_dim(&task, policy.dim())?;
    let starts = resolve_starts(ctx, &task, starts)?;
    let dir = ctx.out.join("eval");
    let x_ref = task.x_ref();
    let results = par_map(ctx.jobs, starts.len(), |i| policy.episode(ctx, &task, starts[i].clone()));
    let mut records = Vec::with_capacity(starts.len());
    for (i, (start, res)) in starts.iter().zip(results).enumerate() {
        let x0: Vec<f64> = start.x.iter().copied().collect();
        let rec = match res {
            Ok(traj) => {
                let name = format!("traj_{i:03}.jsonl");
                write_atomic(&dir.join(&name), traj.to_jsonl()?.as_bytes())?;
                EvalRecord {
                    start: i,
                    x0,
                    status: "ok".into(),
                    success: traj.success,
                    final_dist: Some((&traj.final_state().x - &x_ref).norm()),
                    total_reward: Some(traj.total_reward()),
                    trajectory: Some(name),
                }
            }
            Err(e @ (stableflow_core::Error::Divergence { .. }
            | stableflow_core::Error::NonFinite(_)
            | stableflow_core::Error::NonFiniteLayer { .. }
            | stableflow_core::Error::SingularMass { .. })) => {
                log::warn!("start {i} diverged: {e}");
                EvalRecord {
                    start: i,
                    x0,
                    status: format!("diverged: {e}"),
                    success: false,
                    final_dist: None,
                    total_reward: None,
                    trajectory: None,
                }
            }
            Err(e) => return Err(e.into()),
        };
        records.push(rec);
    }
    let extra = json!({ "checkpoint": checkpoint.display().to_string(), "policy_kind": policy.kind().as_str() });
    write_manifest(&ctx.out, "eval", &ctx.cfg, vec![ctx.base_seed()], Some(extra))?;
    write_json(&dir.join("summary.json"), &records)?;
    let ok = records.iter().filter(|r| r.success).count();
    for r in &records {
        let dist = r.final_dist.map_or("-".to_string(), |d| format!("{d:.4}"));
        ctx.say(&format!("start {:3} success {:5} final_dist {dist} {}", r.start, r.success, r.status));
    }
    ctx.say(&format!("success {ok}/{}", records.len()));
    Ok(())
}

fn parse_window(text: &str) -> Result<Window, CliError> {
    let v: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--window: {e}")))?;
    let [x_min, x_max, y_min, y_max] = v[..] else {
        return Err(CliError::Usage("--window needs x_min,x_max,y_min,y_max".into()));
    };
    let w = Window {
        x_min,
        x_max,
        y_min,
        y_max,
    };
    w.validate().map_err(|e| CliError::Usage(format!("--window: {e}")))?;
    Ok(w)
}

pub fn grid(
    ctx: &Context,
    checkpoint: &Path,
    window: Option<&str>,
    resolution: usize,
    starts: &StartsArgs,
) -> Result<(), CliError> {
    let (policy, gains) = nf_checkpoint(checkpoint)?;
    if policy.dim() != 2 {
        return Err(stableflow_core::Error::UnsupportedDimension(policy.dim()).into());
    }
    if resolution < 2 {
        return Err(CliError::Usage("--resolution must be at least 2".into()));
    }
    let task = ctx.cfg.build_task()?;
    check_dim(&task, policy.dim())?;
    let window = match window {
        Some(w) => parse_window(w)?,
        None => Window::centered(&policy.x_ref, GRID_WINDOW_HALF),
    };
    let grid = energy_grid(&policy, &gains, &window, resolution)?;
    write_atomic(&ctx.out.join("grid.csv"), grid.to_csv().as_bytes())?;

    let starts = resolve_starts(ctx, &task, starts)?;
    let nf = NfPolicy::new(policy.clone(), gains.clone())?;
    let x_ref = policy.x_ref();
    let y_ref: Vec<f64> = flow_forward(&policy.flow, &x_ref)?.iter().copied().collect();
    let cfg = ctx.cfg.train_config(ctx.base_seed());
    let mut lines = String::new();
    for (i, start) in starts.into_iter().enumerate() {
        let traj = match deterministic_episode(&task, &nf, start, &cfg) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("overlay start {i} failed: {e}");
                continue;
            }
        };
        for (k, s) in traj.states.iter().enumerate() {
            let y = flow_forward(&policy.flow, &s.x)?;
            let rec = json!({
                "traj": i,
                "step": k,
                "t": traj.times[k],
                "x": s.x.as_slice(),
                "y": y.as_slice(),
                "y_ref": y_ref,
                "potential": lyapunov_potential(&policy, &gains, &s.x)?,
            });
            lines.push_str(&rec.to_string());
            lines.push('\n');
        }
    }
    write_atomic(&ctx.out.join("overlay.jsonl"), lines.as_bytes())?;
    let (i, j) = grid.argmin();
    let extra = json!({ "checkpoint": checkpoint.display().to_string(), "resolution": resolution });
    write_manifest(&ctx.out, "grid", &ctx.cfg, vec![ctx.base_seed()], Some(extra))?;
    ctx.say(&format!(
        "grid minimum {:.4e} at ({:.4}, {:.4})",
        grid.min_value(),
        grid.xs[i],
        grid.ys[j]
    ));
    Ok(())
}

/// One row of the σ_init sweep summary, aggregated over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kind: PolicyKind,
    pub sigma_init: f64,
    /// Mean over the seeds that reached the threshold.
    pub itr90: Option<f64>,
    pub mean_dist: f64,
    pub mean_abs_u: f64,
}

pub fn sweep_row(kind: PolicyKind, sigma_init: f64, runs: &[Vec<IterationMetrics>]) -> SweepRow {
    let hits: Vec<f64> = runs
        .iter()
        .filter_map(|m| itr90(&m.iter().map(|r| r.success_rate).collect::<Vec<_>>()))
        .map(|i| i as f64)
        .collect();
    let all: Vec<&IterationMetrics> = runs.iter().flatten().collect();
    let mean = |f: fn(&IterationMetrics) -> f64| {
        if all.is_empty() {
            f64::NAN
        } else {
            all.iter().map(|m| f(m)).sum::<f64>() / all.len() as f64
        }
    };
    SweepRow {
        kind,
        sigma_init,
        itr90: (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64),
        mean_dist: mean(|m| m.mean_dist),
        mean_abs_u: mean(|m| m.mean_abs_u),
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let itr = r.itr90.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{itr},{},{}", r.kind.as_str(), r.sigma_init, r.mean_dist, r.mean_abs_u);
    }
    s
}

pub fn sweep_sigma(ctx: &Context, sigmas: &[f64]) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(CliError::Usage("--sigmas must be positive finite numbers".into()));
    }
    let task = cfg.build_task()?;
    let kinds = [PolicyKind::Nf, PolicyKind::Baseline];
    let mut jobs = Vec::new();
    for kind in kinds {
        for &sigma in sigmas {
            for &seed in &ctx.seeds {
                jobs.push((kind, sigma, seed));
            }
        }
    }
    write_manifest(
        &ctx.out,
        "sweep-sigma",
        cfg,
        ctx.seeds.clone(),
        Some(json!({ "sigmas": sigmas })),
    )?;
    let results = par_map(ctx.jobs, jobs.len(), |i| {
        let (kind, sigma, seed) = jobs[i];
        let dir = ctx
            .out
            .join("sweep")
            .join(kind.as_str())
            .join(format!("sigma_{sigma}"))
            .join(format!("seed_{seed}"));
        run_training(cfg, &task, kind, sigma, seed, &dir, 1)
    });
    let mut runs = Vec::with_capacity(results.len());
    for r in results {
        runs.push(r?);
    }
    let mut rows = Vec::new();
    let per = ctx.seeds.len();
    for (k, chunk) in runs.chunks(per).enumerate() {
        let (kind, sigma, _) = jobs[k * per];
        rows.push(sweep_row(kind, sigma, chunk));
    }
    write_atomic(&ctx.out.join("sweep_summary.csv"), sweep_csv(&rows).as_bytes())?;
    for r in &rows {
        ctx.say(&format!(
            "{:8} sigma {:5} itr90 {:>6} mean_dist {:.4} mean_abs_u {:.3}",
            r.kind.as_str(),
            r.sigma_init,
            r.itr90.map_or("-".to_string(), |v| format!("{v:.1}")),
            r.mean_dist,
            r.mean_abs_u
        ));
    }
    Ok(())
}
