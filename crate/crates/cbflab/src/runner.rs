//! Command dispatch: builds the configured objects, runs the requested
//! analysis, and assembles the versioned report.
//!
//! Exit-code contract: 0 when everything completed, 2 when any tested
//! condition is Violated, 1 on errors (bad config, runtime failure). The
//! `all` command walks the four-step narrative — Controller, Perturbation,
//! Zero, Input — skipping steps whose config blocks are absent and labeling
//! every result row with its step.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use serde_json::{json, Value};

use crate::config::{
    load_config, AnalysisConfig, BuiltPerturbation, ConfigError, InputSetConfig, SystemKind,
};
use crate::dsl::Expr;
use crate::flow::{self};
use crate::geometry::{
    boundary_sample, build_cubical_complex, classify_boundary, BoundaryLabel, SafeSet,
};
use crate::obstruction::{
    brockett_check_with, candidate_perturbations, check_neighborhood_family_with,
    check_theorem3_with, ObstructionVerdict, Outcome, SamplingOptions,
};
use crate::report::{overall, CommandOutcome, CommandResult, Report, REPORT_SCHEMA_VERSION};
use crate::synthesis::{self, SynthesisError};
use crate::system::{Controller, InputSet, System, VectorField};
use crate::zeros::verify_poincare_hopf;

/// Boundary sample count for `classify`, before the run multiplier.
const CLASSIFY_BOUNDARY_POINTS: usize = 100;

/// The analyses the frontend can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Euler characteristics of the candidate set and its boundary.
    Euler,
    /// Label the boundary behavior of the configured field.
    Classify,
    /// Zero-existence certification for the configured field.
    PoincareHopf,
    /// Fixed-perturbation solvability check.
    ObstructT3,
    /// Scale-family solvability check near the boundary.
    ObstructFamily,
    /// Solvability sweep around a declared equilibrium.
    Brockett,
    /// Forward invariance of the closed loop (or a raw field).
    FlowInvariance,
    /// Inward thickening of the candidate set and the decay identity.
    FlowOut,
    /// Strict-margin controller synthesis and verification.
    Synthesize,
    /// The full four-step narrative over everything configured.
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Euler => "euler",
            Command::Classify => "classify",
            Command::PoincareHopf => "poincare-hopf",
            Command::ObstructT3 => "obstruct-t3",
            Command::ObstructFamily => "obstruct-family",
            Command::Brockett => "brockett",
            Command::FlowInvariance => "flow-invariance",
            Command::FlowOut => "flow-out",
            Command::Synthesize => "synthesize",
            Command::All => "all",
        }
    }

    pub fn parse_name(s: &str) -> Option<Command> {
        let all = [
            Command::Euler,
            Command::Classify,
            Command::PoincareHopf,
            Command::ObstructT3,
            Command::ObstructFamily,
            Command::Brockett,
            Command::FlowInvariance,
            Command::FlowOut,
            Command::Synthesize,
            Command::All,
        ];
        all.into_iter().find(|c| c.name() == s)
    }

    /// The narrative step this command belongs to.
    fn step(self) -> &'static str {
        match self {
            Command::Euler | Command::Classify | Command::FlowInvariance | Command::Synthesize => {
                "Controller"
            }
            Command::FlowOut => "Perturbation",
            Command::PoincareHopf => "Zero",
            Command::ObstructT3 | Command::ObstructFamily | Command::Brockett => "Input",
            Command::All => "All",
        }
    }
}

/// The default `all` sequence: the closed-loop/controller checks, then the
/// perturbed set construction, then zero existence, then input solvability.
const NARRATIVE: [Command; 9] = [
    Command::Euler,
    Command::Classify,
    Command::FlowInvariance,
    Command::Synthesize,
    Command::FlowOut,
    Command::PoincareHopf,
    Command::ObstructT3,
    Command::ObstructFamily,
    Command::Brockett,
];

/// Command-line overrides applied on top of the config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub resolution: Option<usize>,
    /// Directory for per-command CSV exports.
    pub csv_dir: Option<PathBuf>,
}

struct Ctx<'a> {
    cfg: &'a AnalysisConfig,
    seed: u64,
    resolution: Option<usize>,
    csv_dir: Option<PathBuf>,
}

type CmdOut = Result<(CommandOutcome, Value, Vec<String>), String>;

impl Ctx<'_> {
    fn safeset(&self) -> Result<SafeSet, String> {
        self.cfg
            .build_safeset(self.resolution)
            .map_err(|e| e.to_string())?
            .ok_or_else(|| "needs a [safeset] block".to_string())
    }

    fn system(&self) -> Result<System, String> {
        self.cfg
            .build_system()
            .map_err(|e| e.to_string())?
            .ok_or_else(|| "needs a [system] block".to_string())
    }

    fn sampling(&self) -> SamplingOptions {
        SamplingOptions {
            sample_multiplier: self.cfg.run.sample_multiplier,
            seed: self.seed,
        }
    }

    /// Writes a CSV export, returning a warning string on failure.
    fn csv(&self, name: &str, content: &str, warnings: &mut Vec<String>) {
        let Some(dir) = &self.csv_dir else {
            return;
        };
        let write = || -> std::io::Result<PathBuf> {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(name);
            std::fs::write(&path, content)?;
            Ok(path)
        };
        if let Err(e) = write() {
            warnings.push(format!("csv export {name} failed: {e}"));
        }
    }
}

/// Runs one command (or the narrative) against a validated config.
pub fn run(cfg: &AnalysisConfig, command: Command, opts: &RunOptions) -> Result<Report, ConfigError> {
    let threads = opts.threads.or(cfg.run.threads);
    let seed = opts.seed.unwrap_or(cfg.run.seed);
    let started = Instant::now();
    let ctx = Ctx {
        cfg,
        seed,
        resolution: opts.resolution,
        csv_dir: opts.csv_dir.clone(),
    };
    let results = match threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| ConfigError::Field {
                path: "run.threads".into(),
                detail: e.to_string(),
            })?
            .install(|| execute(&ctx, command)),
        None => execute(&ctx, command),
    }?;
    let mut warnings = Vec::new();
    if !cfg.run.tolerances.is_empty() {
        warnings.push(
            "tolerance overrides are recorded for provenance; the numeric checks use their \
             fixed built-in tolerances"
                .to_string(),
        );
    }
    let verdict = overall(&results);
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        tool: "cbflab",
        tool_version: env!("CARGO_PKG_VERSION"),
        command: command.name().to_string(),
        config_sha256: cfg.source_sha256.clone(),
        seed,
        sample_multiplier: cfg.run.sample_multiplier,
        resolution: opts
            .resolution
            .or_else(|| cfg.safeset.as_ref().map(|s| s.resolution)),
        threads,
        tolerance_overrides: cfg.run.tolerances.clone(),
        results,
        warnings,
        verdict,
        total_wall_time_s: started.elapsed().as_secs_f64(),
    })
}

fn execute(ctx: &Ctx, command: Command) -> Result<Vec<CommandResult>, ConfigError> {
    match command {
        Command::All => {
            let plan: Vec<Command> = match &ctx.cfg.run.commands {
                Some(names) => names
                    .iter()
                    .map(|n| Command::parse_name(n).expect("validated by the config"))
                    .collect(),
                None => NARRATIVE.to_vec(),
            };
            Ok(plan
                .into_iter()
                .map(|cmd| run_one(ctx, cmd, Some(cmd.step())))
                .collect())
        }
        cmd => {
            if let Err(missing) = prerequisites(ctx.cfg, cmd) {
                return Err(ConfigError::Field {
                    path: missing.path.to_string(),
                    detail: format!("{} ({})", missing.detail, cmd.name()),
                });
            }
            Ok(vec![run_one(ctx, cmd, None)])
        }
    }
}

fn run_one(ctx: &Ctx, cmd: Command, step: Option<&str>) -> CommandResult {
    if let Err(missing) = prerequisites(ctx.cfg, cmd) {
        return CommandResult {
            command: cmd.name().to_string(),
            step: step.map(str::to_string),
            outcome: CommandOutcome::Skipped,
            wall_time_s: 0.0,
            data: json!({ "needs": missing.path, "reason": missing.detail }),
            warnings: vec![],
        };
    }
    let t = Instant::now();
    let out = dispatch(ctx, cmd);
    let wall_time_s = t.elapsed().as_secs_f64();
    match out {
        Ok((outcome, data, warnings)) => CommandResult {
            command: cmd.name().to_string(),
            step: step.map(str::to_string),
            outcome,
            wall_time_s,
            data,
            warnings,
        },
        Err(e) => CommandResult {
            command: cmd.name().to_string(),
            step: step.map(str::to_string),
            outcome: CommandOutcome::Error,
            wall_time_s,
            data: json!({ "error": e }),
            warnings: vec![],
        },
    }
}

struct Missing {
    path: &'static str,
    detail: String,
}

fn missing(path: &'static str, detail: &str) -> Missing {
    Missing {
        path,
        detail: detail.to_string(),
    }
}

/// Whether the config supports the quadratic-program safety filter
/// (affine dynamics with a full-space or box input set).
fn qp_able(cfg: &AnalysisConfig) -> bool {
    cfg.system
        .as_ref()
        .map(|sc| {
            sc.kind == SystemKind::Affine
                && matches!(
                    sc.input_set,
                    InputSetConfig::Full | InputSetConfig::Box { .. }
                )
        })
        .unwrap_or(false)
}

fn prerequisites(cfg: &AnalysisConfig, cmd: Command) -> Result<(), Missing> {
    let has_safeset = cfg.safeset.is_some();
    let has_system = cfg.system.is_some();
    let has_field = cfg.field.is_some();
    let has_controller = cfg.controller.is_some();
    let has_family = cfg
        .perturbations
        .iter()
        .any(|p| p.family || p.scale.is_some());
    let need_safeset = || {
        if has_safeset {
            Ok(())
        } else {
            Err(missing("safeset", "needs the candidate set [safeset]"))
        }
    };
    match cmd {
        Command::Euler | Command::FlowOut => need_safeset(),
        Command::Classify => {
            need_safeset()?;
            if has_field || (has_system && (qp_able(cfg) || has_controller)) {
                Ok(())
            } else {
                Err(missing(
                    "field",
                    "needs a [field], a QP-compatible [system] (full/box inputs), or a [controller]",
                ))
            }
        }
        Command::PoincareHopf => {
            need_safeset()?;
            if has_field {
                Ok(())
            } else {
                Err(missing("field", "zero certification needs a concrete [field]"))
            }
        }
        Command::ObstructT3 => {
            need_safeset()?;
            if has_system {
                Ok(())
            } else {
                Err(missing("system", "solvability checks need a [system]"))
            }
        }
        Command::ObstructFamily => {
            need_safeset()?;
            if !has_system {
                return Err(missing("system", "solvability checks need a [system]"));
            }
            if has_family {
                Ok(())
            } else {
                Err(missing(
                    "perturbation",
                    "needs a [[perturbation]] with family = true (or a scale parameter)",
                ))
            }
        }
        Command::Brockett => {
            if !has_system {
                return Err(missing("system", "needs a [system]"));
            }
            if cfg.brockett.is_some() {
                Ok(())
            } else {
                Err(missing("brockett", "needs a [brockett] block with xstar and ball_radius"))
            }
        }
        Command::FlowInvariance => {
            need_safeset()?;
            if has_field || (has_system && (qp_able(cfg) || has_controller)) {
                Ok(())
            } else {
                Err(missing(
                    "field",
                    "needs a [field], a QP-compatible [system] (full/box inputs), or a [controller]",
                ))
            }
        }
        Command::Synthesize => {
            need_safeset()?;
            match &cfg.system {
                Some(sc) if sc.kind == SystemKind::Affine => Ok(()),
                Some(_) => Err(missing("system", "synthesis needs an affine [system]")),
                None => Err(missing("system", "synthesis needs an affine [system]")),
            }
        }
        Command::All => Ok(()),
    }
}

fn dispatch(ctx: &Ctx, cmd: Command) -> CmdOut {
    match cmd {
        Command::Euler => cmd_euler(ctx),
        Command::Classify => cmd_classify(ctx),
        Command::PoincareHopf => cmd_poincare_hopf(ctx),
        Command::ObstructT3 => cmd_obstruct_t3(ctx),
        Command::ObstructFamily => cmd_obstruct_family(ctx),
        Command::Brockett => cmd_brockett(ctx),
        Command::FlowInvariance => cmd_flow_invariance(ctx),
        Command::FlowOut => cmd_flow_out(ctx),
        Command::Synthesize => cmd_synthesize(ctx),
        Command::All => unreachable!("the narrative is expanded in execute"),
    }
}

fn zero_controller(m: usize) -> Controller {
    Controller::from_exprs(vec![Expr::Const(0.0); m])
}

/// The field whose boundary behavior / invariance is in question: an
/// explicit `[field]` wins; otherwise the closed loop, QP-filtered when the
/// input set supports it.
fn invariance_field(ctx: &Ctx, s: &SafeSet) -> Result<(VectorField, String), String> {
    if let Some(f) = ctx.cfg.build_field().map_err(|e| e.to_string())? {
        return Ok((f, "declared field".to_string()));
    }
    let sys = ctx.system()?;
    if let Some(aff) = sys.as_affine() {
        if matches!(
            aff.input_set(),
            InputSet::FullSpace { .. } | InputSet::Box { .. }
        ) {
            let alpha = ctx.cfg.build_alpha().map_err(|e| e.to_string())?;
            let nominal = ctx
                .cfg
                .build_controller()
                .map_err(|e| e.to_string())?
                .unwrap_or_else(|| zero_controller(aff.m()));
            let k = synthesis::qp_filter(aff, s, &alpha, &nominal).map_err(|e| e.to_string())?;
            return Ok((sys.closed_loop(&k), "qp-filtered closed loop".to_string()));
        }
    }
    let k = ctx
        .cfg
        .build_controller()
        .map_err(|e| e.to_string())?
        .ok_or_else(|| {
            "needs a [field], a QP-compatible input set (full/box), or a [controller]".to_string()
        })?;
    Ok((
        sys.closed_loop(&k),
        "closed loop of the declared controller".to_string(),
    ))
}

fn cmd_euler(ctx: &Ctx) -> CmdOut {
    let s = ctx.safeset()?;
    let cx = build_cubical_complex(&s).map_err(|e| e.to_string())?;
    let mut warnings = Vec::new();
    ctx.csv("euler.csv", &cx.counts_csv(), &mut warnings);
    let data = json!({
        "resolution": s.resolution(),
        "euler_characteristic": cx.euler_characteristic(),
        "boundary_euler_characteristic": cx.boundary_euler_characteristic(),
        "cell_counts": cx.cell_counts(),
        "boundary_cell_counts": cx.boundary_cell_counts(),
        "top_cells": cx.top_cell_count(),
    });
    Ok((CommandOutcome::Completed, data, warnings))
}

fn cmd_classify(ctx: &Ctx) -> CmdOut {
    let s = ctx.safeset()?;
    let (field, provenance) = invariance_field(ctx, &s)?;
    let count = CLASSIFY_BOUNDARY_POINTS * ctx.cfg.run.sample_multiplier;
    let bs = boundary_sample(&s, count).map_err(|e| e.to_string())?;
    let mut warnings = bs.warnings.clone();
    let (rows, summary) = classify_boundary(&s, &field, &bs.points).map_err(|e| e.to_string())?;
    let count_of = |l: BoundaryLabel| rows.iter().filter(|r| r.label == l).count();
    let outward_example = rows
        .iter()
        .find(|r| r.label == BoundaryLabel::Outward)
        .map(|r| json!({ "point": r.point, "value": r.value }));
    let mut csv = String::from("value,label,point\n");
    for r in &rows {
        let coords: Vec<String> = r.point.iter().map(|c| c.to_string()).collect();
        csv.push_str(&format!(
            "{},{:?},{}\n",
            r.value,
            r.label,
            coords.join(";")
        ));
    }
    ctx.csv("classify.csv", &csv, &mut warnings);
    let data = json!({
        "field": provenance,
        "points": rows.len(),
        "summary": summary.to_string(),
        "inward": count_of(BoundaryLabel::Inward),
        "tangent": count_of(BoundaryLabel::Tangent),
        "outward": count_of(BoundaryLabel::Outward),
        "outward_example": outward_example,
    });
    Ok((CommandOutcome::Completed, data, warnings))
}

fn cmd_poincare_hopf(ctx: &Ctx) -> CmdOut {
    let s = ctx.safeset()?;
    let field = ctx
        .cfg
        .build_field()
        .map_err(|e| e.to_string())?
        .ok_or_else(|| "zero certification needs a [field]".to_string())?;
    let rep = verify_poincare_hopf(&field, &s).map_err(|e| e.to_string())?;
    let mut warnings = rep.warnings.clone();
    let mut csv = String::from("residual,method,isolated,point\n");
    for c in &rep.certificates {
        let coords: Vec<String> = c.point.iter().map(|x| x.to_string()).collect();
        csv.push_str(&format!(
            "{},{:?},{},{}\n",
            c.residual,
            c.method,
            c.isolated_heuristic,
            coords.join(";")
        ));
    }
    ctx.csv("poincare-hopf.csv", &csv, &mut warnings);
    let data = json!({
        "chi": rep.chi,
        "boundary_summary": rep.summary.to_string(),
        "hypotheses_met": rep.hypotheses_met,
        "used_perturbation": rep.used_perturbation,
        "zeros": rep.certificates,
        "theorem_contradiction": rep.theorem_contradiction,
    });
    let outcome = if rep.theorem_contradiction {
        CommandOutcome::Error
    } else {
        CommandOutcome::Completed
    };
    Ok((outcome, data, warnings))
}

fn verdict_outcome(v: &ObstructionVerdict) -> CommandOutcome {
    match &v.outcome {
        Outcome::Violated { .. } => CommandOutcome::Violated,
        Outcome::NotViolated { .. } => CommandOutcome::NotViolated,
        Outcome::Inconclusive => CommandOutcome::Inconclusive,
    }
}

/// Worst obstruction outcome across several checks.
fn aggregate(outcomes: impl IntoIterator<Item = CommandOutcome>) -> CommandOutcome {
    let mut worst = CommandOutcome::NotViolated;
    for o in outcomes {
        let rank = |c: CommandOutcome| match c {
            CommandOutcome::Violated => 2,
            CommandOutcome::Inconclusive => 1,
            _ => 0,
        };
        if rank(o) > rank(worst) {
            worst = o;
        }
    }
    worst
}

fn ladder_csv(header_name: &str, checks: &[(String, &ObstructionVerdict)]) -> String {
    let mut csv = format!(
        "{header_name},scale,fully_unsolvable,any_solvable,min_residual,witness_min_residual\n"
    );
    for (name, v) in checks {
        for rung in &v.epsilon_ladder {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                name,
                rung.scale,
                rung.fully_unsolvable,
                rung.any_solvable,
                rung.min_residual,
                rung.witness_min_residual
                    .map(|x| x.to_string())
                    .unwrap_or_default()
            ));
        }
    }
    csv
}

fn cmd_obstruct_t3(ctx: &Ctx) -> CmdOut {
    let s = ctx.safeset()?;
    let sys = ctx.system()?;
    let declared: Vec<BuiltPerturbation> = ctx
        .cfg
        .build_perturbations()
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter(|p| !p.field.is_family())
        .collect();
    let mut warnings = Vec::new();
    let perturbations: Vec<(String, crate::obstruction::PerturbationField)> = if declared
        .is_empty()
    {
        warnings.push(
            "no fixed [[perturbation]] declared; testing the built-in candidates".to_string(),
        );
        candidate_perturbations(&s)
            .map_err(|e| e.to_string())?
            .into_iter()
            .filter(|z| !z.is_family())
            .map(|z| (z.description().to_string(), z))
            .collect()
    } else {
        declared.into_iter().map(|p| (p.name, p.field)).collect()
    };
    let opts = ctx.sampling();
    let mut checks = Vec::new();
    let mut verdicts = Vec::new();
    for (name, z) in &perturbations {
        let v = check_theorem3_with(&sys, &s, z, &opts).map_err(|e| e.to_string())?;
        checks.push(json!({ "name": name, "verdict": v.to_json() }));
        verdicts.push((name.clone(), v));
    }
    let outcome = aggregate(verdicts.iter().map(|(_, v)| verdict_outcome(v)));
    let refs: Vec<(String, &ObstructionVerdict)> =
        verdicts.iter().map(|(n, v)| (n.clone(), v)).collect();
    ctx.csv("obstruct-t3.csv", &ladder_csv("perturbation", &refs), &mut warnings);
    Ok((outcome, json!({ "checks": checks }), warnings))
}

fn cmd_obstruct_family(ctx: &Ctx) -> CmdOut {
    let s = ctx.safeset()?;
    let sys = ctx.system()?;
    let families: Vec<BuiltPerturbation> = ctx
        .cfg
        .build_perturbations()
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter(|p| p.field.is_family())
        .collect();
    if families.is_empty() {
        return Err("no scale-family [[perturbation]] declared (set family = true)".to_string());
    }
    let opts = ctx.sampling();
    let mut warnings = Vec::new();
    let mut checks = Vec::new();
    let mut verdicts = Vec::new();
    for fam in &families {
        for &theorem in &fam.theorems {
            let v = check_neighborhood_family_with(&sys, &s, &fam.field, theorem, &opts)
                .map_err(|e| e.to_string())?;
            checks.push(json!({
                "name": fam.name,
                "theorem": theorem.to_string(),
                "verdict": v.to_json(),
            }));
            verdicts.push((format!("{}:{}", fam.name, theorem), v));
        }
    }
    let outcome = aggregate(verdicts.iter().map(|(_, v)| verdict_outcome(v)));
    let refs: Vec<(String, &ObstructionVerdict)> =
        verdicts.iter().map(|(n, v)| (n.clone(), v)).collect();
    ctx.csv(
        "obstruct-family.csv",
        &ladder_csv("family", &refs),
        &mut warnings,
    );
    Ok((outcome, json!({ "checks": checks }), warnings))
}

fn cmd_brockett(ctx: &Ctx) -> CmdOut {
    let sys = ctx.system()?;
    let bc = ctx
        .cfg
        .brockett
        .as_ref()
        .ok_or_else(|| "needs a [brockett] block".to_string())?;
    let v = brockett_check_with(&sys, &bc.xstar, bc.ball_radius, &bc.options())
        .map_err(|e| e.to_string())?;
    let outcome = verdict_outcome(&v);
    let mut warnings = Vec::new();
    let refs = vec![("brockett".to_string(), &v)];
    ctx.csv("brockett.csv", &ladder_csv("check", &refs), &mut warnings);
    let data = json!({
        "xstar": bc.xstar,
        "ball_radius": bc.ball_radius,
        "verdict": v.to_json(),
    });
    Ok((outcome, data, warnings))
}

fn cmd_flow_invariance(ctx: &Ctx) -> CmdOut {
    let s = ctx.safeset()?;
    let (field, provenance) = invariance_field(ctx, &s)?;
    let rep = flow::verify_forward_invariance(
        &field,
        &s,
        ctx.cfg.flow.trajectories(),
        ctx.cfg.flow.horizon(),
    )
    .map_err(|e| e.to_string())?;
    let mut warnings = Vec::new();
    let witness = rep.witness.as_ref().map(|w| {
        json!({
            "initial": w.initial,
            "time": w.time,
            "state": w.state,
            "h_value": w.h_value,
        })
    });
    if let Some(w) = &rep.witness {
        let mut csv = String::from("t,state\n");
        for (t, x) in w.trajectory.times.iter().zip(&w.trajectory.states) {
            let coords: Vec<String> = x.iter().map(|c| c.to_string()).collect();
            csv.push_str(&format!("{},{}\n", t, coords.join(";")));
        }
        ctx.csv("flow-invariance-witness.csv", &csv, &mut warnings);
    }
    let integration_errors: Vec<Value> = rep
        .failures
        .iter()
        .take(5)
        .map(|(p, e)| json!({ "initial": p, "error": e }))
        .collect();
    let data = json!({
        "field": provenance,
        "pass": rep.pass,
        "min_h": rep.min_h,
        "trajectories": rep.trajectories,
        "horizon": ctx.cfg.flow.horizon(),
        "witness": witness,
        "integration_error_count": rep.failures.len(),
        "integration_errors": integration_errors,
    });
    let outcome = if rep.pass {
        CommandOutcome::Completed
    } else {
        CommandOutcome::Violated
    };
    Ok((outcome, data, warnings))
}

fn cmd_flow_out(ctx: &Ctx) -> CmdOut {
    let s = ctx.safeset()?;
    let t0 = ctx.cfg.flow.t0();
    let t1 = ctx.cfg.flow.t1();
    let fo = flow::flow_out(&s, t0, t1).map_err(|e| e.to_string())?;
    let mut warnings = fo.warnings.clone();
    let chi_inner = build_cubical_complex(&fo.inner)
        .map_err(|e| e.to_string())?
        .euler_characteristic();
    let chi_flow_out = build_cubical_complex(&fo.shifted)
        .map_err(|e| e.to_string())?
        .euler_characteristic();
    ctx.csv("flow-out.csv", &fo.boundary_image_csv(), &mut warnings);
    let mut data = json!({
        "t0": t0,
        "t1": t1,
        "max_identity_error": fo.max_identity_error,
        "boundary_points": fo.boundary_image.len(),
        "chi_inner": chi_inner,
        "chi_flow_out": chi_flow_out,
        "chi_equal": chi_inner == chi_flow_out,
    });
    let mut outcome = CommandOutcome::Completed;
    if chi_inner != chi_flow_out {
        warnings.push(format!(
            "Euler characteristic changed under thickening: {chi_inner} vs {chi_flow_out} \
             (resolution artifact — refine the grid)"
        ));
        outcome = CommandOutcome::Inconclusive;
    }
    // With a concrete field and rate configured, also audit the full lemma:
    // barrier inequality on the band, inwardness on the thickened boundary.
    if let Some(field) = ctx.cfg.build_field().map_err(|e| e.to_string())? {
        let alpha = ctx.cfg.build_alpha().map_err(|e| e.to_string())?;
        let lemma = flow::verify_lemma1(&s, &field, &alpha, t0).map_err(|e| e.to_string())?;
        warnings.extend(lemma.warnings.iter().cloned());
        data["lemma_check"] = json!({
            "hypothesis_ok": lemma.hypothesis_ok,
            "hypothesis_witness": lemma.hypothesis_witness,
            "chi_equal": lemma.chi_equal,
            "inward_ok": lemma.inward_ok,
            "min_inward_value": lemma.min_inward_value,
            "inward_witness": lemma.inward_witness,
            "max_identity_error": lemma.max_identity_error,
            "pass": lemma.pass,
        });
        if !lemma.pass {
            outcome = CommandOutcome::Violated;
        }
    }
    Ok((outcome, data, warnings))
}

fn cmd_synthesize(ctx: &Ctx) -> CmdOut {
    let s = ctx.safeset()?;
    let sys = ctx.system()?;
    let Some(aff) = sys.as_affine() else {
        return Err("synthesis needs an affine [system]".to_string());
    };
    let alpha = ctx.cfg.build_alpha().map_err(|e| e.to_string())?;
    let patches = match synthesis::build_local_cover(aff, &s, &alpha) {
        Ok(p) => p,
        Err(SynthesisError::NotStrict {
            point,
            required,
            achieved,
        }) => {
            let data = json!({
                "reason": "the strict margin is unattainable",
                "witness": point,
                "required": required,
                "achieved": achieved,
            });
            return Ok((CommandOutcome::Violated, data, vec![]));
        }
        Err(e) => return Err(e.to_string()),
    };
    let mut warnings = Vec::new();
    let mut csv = String::from("radius,input,center\n");
    for p in &patches {
        let center: Vec<String> = p.center.iter().map(|c| c.to_string()).collect();
        let input: Vec<String> = p.input.iter().map(|c| c.to_string()).collect();
        csv.push_str(&format!(
            "{},{},{}\n",
            p.radius,
            input.join(";"),
            center.join(";")
        ));
    }
    ctx.csv("synthesize.csv", &csv, &mut warnings);
    let blended = synthesis::blend(patches).map_err(|e| e.to_string())?;
    let controller_json = serde_json::to_value(&blended).map_err(|e| e.to_string())?;
    let kappa = Controller::Blended(blended);
    match synthesis::verify_strict(aff, &s, &alpha, &kappa) {
        Ok(rep) => {
            let data = json!({
                "patches": controller_json["patches"].as_array().map(|a| a.len()).unwrap_or(0),
                "strictness": rep,
                "controller": controller_json,
            });
            Ok((CommandOutcome::Completed, data, warnings))
        }
        Err(SynthesisError::StrictnessViolation { point, slack }) => {
            let data = json!({
                "reason": "the blended controller is not strict on the thickened set",
                "witness": point,
                "slack": slack,
                "controller": controller_json,
            });
            Ok((CommandOutcome::Violated, data, warnings))
        }
        Err(e) => Err(e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Command-line frontend.

#[derive(Debug, Parser)]
#[command(
    name = "cbflab",
    version,
    about = "Numerical tests for topological obstructions to control barrier functions"
)]
struct Cli {
    /// Analysis to run.
    #[arg(value_enum)]
    command: Command,
    /// TOML analysis configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Write the full JSON report to this file (otherwise it goes to stdout).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Override run.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (overrides run.threads).
    #[arg(long)]
    threads: Option<usize>,
    /// Override safeset.resolution.
    #[arg(long)]
    resolution: Option<usize>,
    /// Directory for per-command CSV exports.
    #[arg(long, value_name = "DIR")]
    csv_dir: Option<PathBuf>,
}

/// Entry point behind the binary: parses arguments, runs, prints a summary
/// line per command, and returns the process exit code.
pub fn cli_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Usage problems exit 1; --help/--version exit 0. Clap's default
            // exit code (2) is reserved for Violated verdicts here.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run_cli(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run_cli(cli: Cli) -> Result<i32, Box<dyn std::error::Error>> {
    let cfg = load_config(&cli.config)?;
    let opts = RunOptions {
        seed: cli.seed,
        threads: cli.threads,
        resolution: cli.resolution,
        csv_dir: cli.csv_dir,
    };
    let report = run(&cfg, cli.command, &opts)?;
    // Progress and verdict lines go to stderr so stdout stays a clean JSON
    // stream when no --out path is given.
    for r in &report.results {
        let step = r
            .step
            .as_deref()
            .map(|s| format!(" [{s}]"))
            .unwrap_or_default();
        eprintln!(
            "{}{} {} ({:.2}s)",
            r.command, step, r.outcome, r.wall_time_s
        );
    }
    eprintln!(
        "verdict: {} (seed {}, config sha256 {})",
        report.verdict,
        report.seed,
        &report.config_sha256[..12.min(report.config_sha256.len())]
    );
    match &cli.out {
        Some(path) => {
            std::fs::write(path, report.to_json_pretty() + "\n")?;
            eprintln!("report: {}", path.display());
        }
        None => println!("{}", report.to_json_pretty()),
    }
    Ok(report.exit_code())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::config_from_str;

    const DISK: &str = r#"
        [safeset]
        h = "1 - x1^2 - x2^2"
        lower = [-1.5, -1.5]
        upper = [1.5, 1.5]
        resolution = 16

        [field]
        components = ["-x1 - x2", "x1 - x2"]
    "#;

    #[test]
    fn command_names_round_trip() {
        for cmd in NARRATIVE.into_iter().chain([Command::All]) {
            assert_eq!(Command::parse_name(cmd.name()), Some(cmd));
        }
        assert_eq!(Command::parse_name("no-such"), None);
    }

    #[test]
    fn euler_runs_and_reports() {
        let cfg = config_from_str(DISK).unwrap();
        let report = run(&cfg, Command::Euler, &RunOptions::default()).unwrap();
        assert_eq!(report.schema_version, REPORT_SCHEMA_VERSION);
        assert_eq!(report.command, "euler");
        assert_eq!(report.seed, 0);
        assert_eq!(report.results.len(), 1);
        assert_eq!(report.results[0].outcome, CommandOutcome::Completed);
        assert_eq!(report.results[0].data["euler_characteristic"], 1);
        assert_eq!(report.exit_code(), 0);
    }

    #[test]
    fn resolution_override_reaches_the_complex() {
        let cfg = config_from_str(DISK).unwrap();
        let opts = RunOptions {
            resolution: Some(24),
            ..Default::default()
        };
        let report = run(&cfg, Command::Euler, &opts).unwrap();
        assert_eq!(report.resolution, Some(24));
        assert_eq!(report.results[0].data["resolution"], 24);
    }

    #[test]
    fn outward_field_fails_invariance_with_exit_code_2() {
        let text = r#"
            [safeset]
            h = "1 - x1^2 - x2^2"
            lower = [-1.5, -1.5]
            upper = [1.5, 1.5]
            resolution = 16

            [field]
            components = ["x1", "x2"]

            [flow]
            horizon = 2.0
            trajectories = 20
        "#;
        let cfg = config_from_str(text).unwrap();
        let report = run(&cfg, Command::FlowInvariance, &RunOptions::default()).unwrap();
        assert_eq!(report.results[0].outcome, CommandOutcome::Violated);
        assert!(report.results[0].data["witness"].is_object());
        assert_eq!(report.exit_code(), 2);
    }

    #[test]
    fn missing_blocks_error_with_the_field_path() {
        let cfg = config_from_str(DISK).unwrap();
        let err = run(&cfg, Command::Brockett, &RunOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("system"), "{msg}");
    }

    #[test]
    fn the_narrative_skips_unconfigured_steps_in_order() {
        let cfg = config_from_str(DISK).unwrap();
        let report = run(&cfg, Command::All, &RunOptions::default()).unwrap();
        let steps: Vec<&str> = report
            .results
            .iter()
            .map(|r| r.step.as_deref().unwrap())
            .collect();
        // The four-step order: Controller ... Perturbation ... Zero ... Input.
        let order = ["Controller", "Perturbation", "Zero", "Input"];
        let mut last = 0;
        for s in &steps {
            let idx = order.iter().position(|o| o == s).unwrap();
            assert!(idx >= last, "narrative out of order: {steps:?}");
            last = idx;
        }
        // Without a [system], all input-solvability rows are skipped.
        for r in &report.results {
            match r.command.as_str() {
                "obstruct-t3" | "obstruct-family" | "brockett" | "synthesize" => {
                    assert_eq!(r.outcome, CommandOutcome::Skipped, "{}", r.command);
                }
                "euler" | "classify" | "flow-out" | "poincare-hopf" | "flow-invariance" => {
                    assert_ne!(r.outcome, CommandOutcome::Skipped, "{}", r.command);
                }
                other => panic!("unexpected row {other}"),
            }
        }
    }

    #[test]
    fn run_commands_list_overrides_the_narrative() {
        let text = format!("{DISK}\n[run]\ncommands = [\"euler\", \"classify\"]\n");
        let cfg = config_from_str(&text).unwrap();
        let report = run(&cfg, Command::All, &RunOptions::default()).unwrap();
        let names: Vec<&str> = report.results.iter().map(|r| r.command.as_str()).collect();
        assert_eq!(names, vec!["euler", "classify"]);
    }

    #[test]
    fn reports_are_deterministic_modulo_wall_times() {
        let cfg = config_from_str(DISK).unwrap();
        let a = run(&cfg, Command::All, &RunOptions::default()).unwrap();
        let b = run(&cfg, Command::All, &RunOptions::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&a.verdict_view()).unwrap(),
            serde_json::to_string(&b.verdict_view()).unwrap()
        );
    }

    #[test]
    fn csv_exports_land_in_the_requested_directory() {
        let dir = std::env::temp_dir().join(format!("cbflab-csv-{}", std::process::id()));
        let cfg = config_from_str(DISK).unwrap();
        let opts = RunOptions {
            csv_dir: Some(dir.clone()),
            ..Default::default()
        };
        let report = run(&cfg, Command::Euler, &opts).unwrap();
        assert!(report.results[0].warnings.is_empty());
        let csv = std::fs::read_to_string(dir.join("euler.csv")).unwrap();
        assert!(csv.contains("dimension") || csv.contains(','), "{csv}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
