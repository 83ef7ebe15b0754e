//! The TOML analysis configuration consumed by the command-line frontend.
//!
//! One config file names a control system, a candidate safe set, a class-K
//! rate, and the perturbations to test; every command reads the same format
//! and picks out the blocks it needs. Validation is eager: [`load_config`]
//! constructs every declared object once, so bad expressions, out-of-range
//! variables (`u3` in a two-input system), and dimension mismatches surface
//! with the offending field path before any analysis starts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::{parse, Expr};
use crate::flow::AlphaFunction;
use crate::geometry::{AxisBox, SafeSet};
use crate::obstruction::{BrockettOptions, PerturbationField, Theorem};
use crate::system::{
    ControlAffineSystem, Controller, GeneralSystem, InputSet, System, VectorField,
};

/// Class-K coefficient used when the `[alpha]` block is omitted.
const DEFAULT_ALPHA_C: f64 = 1.0;
/// Flow-out depth t0 used when `[flow] t0` is omitted.
const DEFAULT_T0: f64 = 0.2;
/// Integration horizon for invariance checks when `[flow] horizon` is omitted.
const DEFAULT_HORIZON: f64 = 10.0;
/// Trajectory count for invariance checks when `[flow] trajectories` is
/// omitted.
const DEFAULT_TRAJECTORIES: usize = 100;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("config `{path}`: {detail}")]
    Field { path: String, detail: String },
}

fn field_err(path: impl Into<String>, detail: impl std::fmt::Display) -> ConfigError {
    ConfigError::Field {
        path: path.into(),
        detail: detail.to_string(),
    }
}

/// Top-level configuration. Only `[safeset]` and/or `[system]` are
/// mandatory; commands that need an absent block say so.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub system: Option<SystemConfig>,
    pub safeset: Option<SafeSetConfig>,
    pub alpha: Option<AlphaConfig>,
    pub field: Option<FieldConfig>,
    pub controller: Option<ControllerConfig>,
    #[serde(default, rename = "perturbation")]
    pub perturbations: Vec<PerturbationConfig>,
    pub brockett: Option<BrockettConfig>,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub run: RunConfig,
    /// SHA-256 of the source file, filled in by [`load_config`].
    #[serde(skip)]
    pub source_sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Affine,
    General,
}

/// A control system. `affine` systems take `drift` (optional, default 0)
/// and `inputs` (one n-component column per channel); `general` systems
/// take `dynamics` in `x1..xn, u1..um`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub kind: SystemKind,
    pub n: usize,
    pub m: usize,
    pub drift: Option<Vec<String>>,
    pub inputs: Option<Vec<Vec<String>>>,
    pub dynamics: Option<Vec<String>>,
    pub input_set: InputSetConfig,
}

/// The admissible input set. TOML inline-table form, e.g.
/// `input_set = { kind = "ball", radius = 1.0 }`.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputSetConfig {
    Full,
    Ball { radius: f64 },
    Sphere { radius: f64 },
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Finite { points: Vec<Vec<f64>> },
}

impl InputSetConfig {
    fn build(&self, m: usize) -> Result<InputSet, String> {
        let set = match self {
            InputSetConfig::Full => InputSet::FullSpace { m },
            InputSetConfig::Ball { radius } => InputSet::Ball { radius: *radius },
            InputSetConfig::Sphere { radius } => InputSet::Sphere { radius: *radius },
            InputSetConfig::Box { lower, upper } => InputSet::Box {
                lower: lower.clone(),
                upper: upper.clone(),
            },
            InputSetConfig::Finite { points } => InputSet::FinitePoints {
                points: points.clone(),
            },
        };
        set.validate(m).map_err(|e| e.to_string())?;
        Ok(set)
    }
}

/// The candidate safe set C = {h >= 0} inside an axis-aligned box.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafeSetConfig {
    /// Barrier expression in `x1..xn`.
    pub h: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Grid cells per axis for the cubical complex.
    pub resolution: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaKind {
    Linear,
    Cubic,
    Expr,
}

/// Extended class-K rate. `linear`/`cubic` take a positive coefficient `c`;
/// `expr` takes an expression in the variable `r`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaConfig {
    pub kind: AlphaKind,
    pub c: Option<f64>,
    pub expr: Option<String>,
}

/// A standalone vector field in `x1..xn` (closed-loop dynamics, a candidate
/// for zero certification, or a field whose boundary behavior is in
/// question).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub components: Vec<String>,
}

/// A state-feedback controller, one expression per input channel.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub exprs: Vec<String>,
}

/// A perturbation to test for solvability obstructions. Fixed fields run
/// the single-field check; `family = true` tests the scaled family
/// eps * components on shrinking neighborhoods of the boundary.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub name: String,
    pub components: Vec<String>,
    #[serde(default)]
    pub family: bool,
    /// Name of a scale parameter the components already reference.
    pub scale: Option<String>,
    /// Which statements to test: `"T3"` for fixed fields, any of
    /// `"T4"`, `"T5"`, `"Cor1"` for families.
    pub theorems: Option<Vec<String>>,
}

/// A perturbation block resolved into an evaluable field plus the theorems
/// it should be tested under.
#[derive(Debug, Clone)]
pub struct BuiltPerturbation {
    pub name: String,
    pub field: PerturbationField,
    pub theorems: Vec<Theorem>,
}

/// Equilibrium-centered solvability sweep parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrockettConfig {
    pub xstar: Vec<f64>,
    pub ball_radius: f64,
    pub grid_points_per_axis: Option<usize>,
    pub refine_starts: Option<usize>,
    pub rungs: Option<u32>,
}

impl BrockettConfig {
    pub fn options(&self) -> BrockettOptions {
        let d = BrockettOptions::default();
        BrockettOptions {
            grid_points_per_axis: self.grid_points_per_axis.unwrap_or(d.grid_points_per_axis),
            refine_starts: self.refine_starts.unwrap_or(d.refine_starts),
            rungs: self.rungs.unwrap_or(d.rungs),
        }
    }
}

/// Time parameters shared by the flow commands.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Flow-out depth: the thickened set is C shifted to h >= -t0.
    pub t0: Option<f64>,
    /// Integration horizon for the boundary flow (must exceed t0).
    pub t1: Option<f64>,
    /// Horizon for invariance checks.
    pub horizon: Option<f64>,
    /// Initial-condition count for invariance checks.
    pub trajectories: Option<usize>,
}

impl FlowConfig {
    pub fn t0(&self) -> f64 {
        self.t0.unwrap_or(DEFAULT_T0)
    }

    pub fn t1(&self) -> f64 {
        self.t1.unwrap_or(2.0 * self.t0())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon.unwrap_or(DEFAULT_HORIZON)
    }

    pub fn trajectories(&self) -> usize {
        self.trajectories.unwrap_or(DEFAULT_TRAJECTORIES)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if !(self.t0() > 0.0 && self.t0().is_finite()) {
            return Err(field_err("flow.t0", "must be positive and finite"));
        }
        if !(self.t1() > self.t0()) {
            return Err(field_err(
                "flow.t1",
                format!("must exceed t0 = {}", self.t0()),
            ));
        }
        if !(self.horizon() > 0.0 && self.horizon().is_finite()) {
            return Err(field_err("flow.horizon", "must be positive and finite"));
        }
        if self.trajectories() == 0 {
            return Err(field_err("flow.trajectories", "must be at least 1"));
        }
        Ok(())
    }
}

/// Execution-level settings. Every randomized sweep derives from `seed`,
/// and reports echo it, so a rerun with the same config and seed reproduces
/// every verdict.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; absent = library default.
    pub threads: Option<usize>,
    /// Multiplies boundary and interior sampling counts in the sweeps.
    pub sample_multiplier: usize,
    /// Commands the `all` narrative executes, in order; absent = the full
    /// default sequence.
    pub commands: Option<Vec<String>>,
    /// Named tolerance overrides. Values must be positive; they are echoed
    /// in reports for provenance.
    pub tolerances: BTreeMap<String, f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: None,
            sample_multiplier: 1,
            commands: None,
            tolerances: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        if self.sample_multiplier == 0 {
            return Err(field_err("run.sample_multiplier", "must be at least 1"));
        }
        if self.threads == Some(0) {
            return Err(field_err("run.threads", "must be at least 1"));
        }
        if let Some(cmds) = &self.commands {
            for (i, name) in cmds.iter().enumerate() {
                let known = crate::runner::Command::parse_name(name);
                match known {
                    None => {
                        return Err(field_err(
                            format!("run.commands[{i}]"),
                            format!("unknown command `{name}`"),
                        ))
                    }
                    Some(crate::runner::Command::All) => {
                        return Err(field_err(
                            format!("run.commands[{i}]"),
                            "`all` cannot appear inside its own command list",
                        ))
                    }
                    Some(_) => {}
                }
            }
        }
        for (name, value) in &self.tolerances {
            if !(*value > 0.0 && value.is_finite()) {
                return Err(field_err(
                    format!("run.tolerances.{name}"),
                    format!("must be positive and finite, got {value}"),
                ));
            }
        }
        Ok(())
    }
}

fn parse_expr_at(src: &str, path: &str) -> Result<Expr, ConfigError> {
    parse(src).map_err(|e| field_err(path, e))
}

/// Free variables must be drawn from `x1..xn`, plus `extra` when given
/// (scale parameters).
fn check_vars(e: &Expr, n: usize, extra: Option<&str>, path: &str) -> Result<(), ConfigError> {
    for v in e.free_vars() {
        let state_ok = v
            .strip_prefix('x')
            .and_then(|s| s.parse::<usize>().ok())
            .map(|k| k >= 1 && k <= n)
            .unwrap_or(false);
        if !state_ok && Some(v) != extra {
            return Err(field_err(
                path,
                format!("variable `{v}` is not among x1..x{n}"),
            ));
        }
    }
    Ok(())
}

fn parse_theorem(s: &str, path: &str) -> Result<Theorem, ConfigError> {
    match s.to_ascii_lowercase().as_str() {
        "t3" => Ok(Theorem::T3),
        "t4" => Ok(Theorem::T4),
        "t5" => Ok(Theorem::T5),
        "cor1" | "corollary1" => Ok(Theorem::Cor1),
        other => Err(field_err(
            path,
            format!("unknown theorem `{other}` (expected T3, T4, T5 or Cor1)"),
        )),
    }
}

impl AnalysisConfig {
    /// State dimension, from the system if present, else the safe-set box.
    pub fn dimension(&self) -> Option<usize> {
        self.system
            .as_ref()
            .map(|s| s.n)
            .or_else(|| self.safeset.as_ref().map(|s| s.lower.len()))
    }

    pub fn build_system(&self) -> Result<Option<System>, ConfigError> {
        let Some(sc) = &self.system else {
            return Ok(None);
        };
        if sc.n == 0 {
            return Err(field_err("system.n", "state dimension must be at least 1"));
        }
        if sc.m == 0 {
            return Err(field_err("system.m", "input dimension must be at least 1"));
        }
        let input_set = sc
            .input_set
            .build(sc.m)
            .map_err(|e| field_err("system.input_set", e))?;
        match sc.kind {
            SystemKind::Affine => {
                if sc.dynamics.is_some() {
                    return Err(field_err(
                        "system.dynamics",
                        "affine systems take drift/inputs, not dynamics",
                    ));
                }
                let drift_src = sc
                    .drift
                    .clone()
                    .unwrap_or_else(|| vec!["0".to_string(); sc.n]);
                if drift_src.len() != sc.n {
                    return Err(field_err(
                        "system.drift",
                        format!("expected {} components, got {}", sc.n, drift_src.len()),
                    ));
                }
                let mut drift = Vec::with_capacity(sc.n);
                for (i, src) in drift_src.iter().enumerate() {
                    let path = format!("system.drift[{i}]");
                    let e = parse_expr_at(src, &path)?;
                    check_vars(&e, sc.n, None, &path)?;
                    drift.push(e);
                }
                let Some(cols) = &sc.inputs else {
                    return Err(field_err(
                        "system.inputs",
                        "affine systems need one column of n expressions per input channel",
                    ));
                };
                if cols.len() != sc.m {
                    return Err(field_err(
                        "system.inputs",
                        format!("expected {} columns, got {}", sc.m, cols.len()),
                    ));
                }
                let mut inputs = Vec::with_capacity(sc.m);
                for (j, col) in cols.iter().enumerate() {
                    if col.len() != sc.n {
                        return Err(field_err(
                            format!("system.inputs[{j}]"),
                            format!("expected {} components, got {}", sc.n, col.len()),
                        ));
                    }
                    let mut parsed = Vec::with_capacity(sc.n);
                    for (i, src) in col.iter().enumerate() {
                        let path = format!("system.inputs[{j}][{i}]");
                        let e = parse_expr_at(src, &path)?;
                        check_vars(&e, sc.n, None, &path)?;
                        parsed.push(e);
                    }
                    inputs.push(parsed);
                }
                let sys = ControlAffineSystem::new(sc.n, sc.m, drift, inputs, input_set)
                    .map_err(|e| field_err("system", e))?;
                Ok(Some(System::Affine(sys)))
            }
            SystemKind::General => {
                if sc.drift.is_some() || sc.inputs.is_some() {
                    return Err(field_err(
                        "system",
                        "general systems take dynamics, not drift/inputs",
                    ));
                }
                let Some(dsrc) = &sc.dynamics else {
                    return Err(field_err(
                        "system.dynamics",
                        "general systems need n dynamics expressions in x1..xn, u1..um",
                    ));
                };
                if dsrc.len() != sc.n {
                    return Err(field_err(
                        "system.dynamics",
                        format!("expected {} components, got {}", sc.n, dsrc.len()),
                    ));
                }
                let mut dynamics = Vec::with_capacity(sc.n);
                for (i, src) in dsrc.iter().enumerate() {
                    dynamics.push(parse_expr_at(src, &format!("system.dynamics[{i}]"))?);
                }
                // Variable scope (x1..xn, u1..um) is checked by the
                // constructor, which is where m bounds the input names.
                let sys = GeneralSystem::new(sc.n, sc.m, dynamics, input_set)
                    .map_err(|e| field_err("system.dynamics", e))?;
                Ok(Some(System::General(sys)))
            }
        }
    }

    /// `resolution_override` substitutes for `safeset.resolution` when set
    /// (the `--resolution` flag).
    pub fn build_safeset(
        &self,
        resolution_override: Option<usize>,
    ) -> Result<Option<SafeSet>, ConfigError> {
        let Some(ss) = &self.safeset else {
            return Ok(None);
        };
        let n = ss.lower.len();
        if n == 0 {
            return Err(field_err("safeset.lower", "must have at least one entry"));
        }
        if ss.upper.len() != n {
            return Err(field_err(
                "safeset.upper",
                format!("expected {} entries to match lower, got {}", n, ss.upper.len()),
            ));
        }
        if let Some(sys) = &self.system {
            if sys.n != n {
                return Err(field_err(
                    "safeset.lower",
                    format!("dimension {} does not match system.n = {}", n, sys.n),
                ));
            }
        }
        let bbox = AxisBox::new(ss.lower.clone(), ss.upper.clone())
            .map_err(|e| field_err("safeset", e))?;
        let h = parse_expr_at(&ss.h, "safeset.h")?;
        check_vars(&h, n, None, "safeset.h")?;
        let res = resolution_override.unwrap_or(ss.resolution);
        if res == 0 {
            return Err(field_err("safeset.resolution", "must be at least 1"));
        }
        SafeSet::new(h, bbox, res)
            .map(Some)
            .map_err(|e| field_err("safeset", e))
    }

    /// The configured rate, or linear with unit coefficient by default.
    pub fn build_alpha(&self) -> Result<AlphaFunction, ConfigError> {
        let Some(ac) = &self.alpha else {
            return AlphaFunction::linear(DEFAULT_ALPHA_C).map_err(|e| field_err("alpha", e));
        };
        match ac.kind {
            AlphaKind::Linear | AlphaKind::Cubic => {
                if ac.expr.is_some() {
                    return Err(field_err(
                        "alpha.expr",
                        "only kind = \"expr\" takes an expression",
                    ));
                }
                let c = ac.c.unwrap_or(DEFAULT_ALPHA_C);
                let built = match ac.kind {
                    AlphaKind::Linear => AlphaFunction::linear(c),
                    _ => AlphaFunction::cubic(c),
                };
                built.map_err(|e| field_err("alpha.c", e))
            }
            AlphaKind::Expr => {
                if ac.c.is_some() {
                    return Err(field_err(
                        "alpha.c",
                        "kind = \"expr\" takes an expression, not a coefficient",
                    ));
                }
                let Some(src) = &ac.expr else {
                    return Err(field_err("alpha.expr", "required when kind = \"expr\""));
                };
                let e = parse_expr_at(src, "alpha.expr")?;
                AlphaFunction::from_expr(e).map_err(|e| field_err("alpha.expr", e))
            }
        }
    }

    pub fn build_field(&self) -> Result<Option<VectorField>, ConfigError> {
        let Some(fc) = &self.field else {
            return Ok(None);
        };
        let n = self
            .dimension()
            .ok_or_else(|| field_err("field", "needs a [system] or [safeset] block for the dimension"))?;
        if fc.components.len() != n {
            return Err(field_err(
                "field.components",
                format!("expected {} components, got {}", n, fc.components.len()),
            ));
        }
        let mut exprs = Vec::with_capacity(n);
        for (i, src) in fc.components.iter().enumerate() {
            let path = format!("field.components[{i}]");
            let e = parse_expr_at(src, &path)?;
            check_vars(&e, n, None, &path)?;
            exprs.push(e);
        }
        VectorField::from_exprs(&exprs)
            .map(Some)
            .map_err(|e| field_err("field", e))
    }

    pub fn build_controller(&self) -> Result<Option<Controller>, ConfigError> {
        let Some(cc) = &self.controller else {
            return Ok(None);
        };
        let Some(sc) = &self.system else {
            return Err(field_err("controller", "requires a [system] block"));
        };
        if cc.exprs.len() != sc.m {
            return Err(field_err(
                "controller.exprs",
                format!("expected {} expressions (system.m), got {}", sc.m, cc.exprs.len()),
            ));
        }
        let mut exprs = Vec::with_capacity(sc.m);
        for (i, src) in cc.exprs.iter().enumerate() {
            let path = format!("controller.exprs[{i}]");
            let e = parse_expr_at(src, &path)?;
            check_vars(&e, sc.n, None, &path)?;
            exprs.push(e);
        }
        Ok(Some(Controller::from_exprs(exprs)))
    }

    pub fn build_perturbations(&self) -> Result<Vec<BuiltPerturbation>, ConfigError> {
        if self.perturbations.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.dimension().ok_or_else(|| {
            field_err(
                "perturbation",
                "needs a [system] or [safeset] block for the dimension",
            )
        })?;
        let mut out = Vec::with_capacity(self.perturbations.len());
        for (k, pc) in self.perturbations.iter().enumerate() {
            let path = format!("perturbation[{k}]");
            if pc.name.trim().is_empty() {
                return Err(field_err(format!("{path}.name"), "must be non-empty"));
            }
            if pc.components.len() != n {
                return Err(field_err(
                    format!("{path}.components"),
                    format!("expected {} components, got {}", n, pc.components.len()),
                ));
            }
            if pc.family && pc.scale.is_some() {
                return Err(field_err(
                    &path,
                    "`family = true` scales the components itself; \
                     `scale` names a parameter already present — use one or the other",
                ));
            }
            let mut exprs = Vec::with_capacity(n);
            for (i, src) in pc.components.iter().enumerate() {
                let cpath = format!("{path}.components[{i}]");
                let e = parse_expr_at(src, &cpath)?;
                check_vars(&e, n, pc.scale.as_deref(), &cpath)?;
                exprs.push(e);
            }
            let field = if pc.family {
                PerturbationField::scaled_family(exprs, &pc.name)
            } else {
                PerturbationField::new(exprs, pc.scale.clone(), &pc.name)
            }
            .map_err(|e| field_err(&path, e))?;
            let theorems = match &pc.theorems {
                None => {
                    if field.is_family() {
                        vec![Theorem::Cor1, Theorem::T4]
                    } else {
                        vec![Theorem::T3]
                    }
                }
                Some(list) => {
                    let tpath = format!("{path}.theorems");
                    let parsed: Vec<Theorem> = list
                        .iter()
                        .map(|s| parse_theorem(s, &tpath))
                        .collect::<Result<_, _>>()?;
                    for t in &parsed {
                        let family_theorem = matches!(t, Theorem::T4 | Theorem::T5 | Theorem::Cor1);
                        if field.is_family() && !family_theorem {
                            return Err(field_err(
                                &tpath,
                                format!("{t} tests a fixed field, not a scale family"),
                            ));
                        }
                        if !field.is_family() && family_theorem {
                            return Err(field_err(
                                &tpath,
                                format!("{t} tests a scale family; set family = true"),
                            ));
                        }
                    }
                    parsed
                }
            };
            out.push(BuiltPerturbation {
                name: pc.name.clone(),
                field,
                theorems,
            });
        }
        Ok(out)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.system.is_none() && self.safeset.is_none() {
            return Err(field_err(
                "",
                "at least one of [system] or [safeset] is required",
            ));
        }
        self.build_system()?;
        self.build_safeset(None)?;
        self.build_alpha()?;
        self.build_field()?;
        self.build_controller()?;
        self.build_perturbations()?;
        if let Some(b) = &self.brockett {
            let Some(sc) = &self.system else {
                return Err(field_err("brockett", "requires a [system] block"));
            };
            if b.xstar.len() != sc.n {
                return Err(field_err(
                    "brockett.xstar",
                    format!("expected {} coordinates, got {}", sc.n, b.xstar.len()),
                ));
            }
            if !(b.ball_radius > 0.0 && b.ball_radius.is_finite()) {
                return Err(field_err("brockett.ball_radius", "must be positive and finite"));
            }
            let opts = b.options();
            if opts.grid_points_per_axis < 2 {
                return Err(field_err("brockett.grid_points_per_axis", "must be at least 2"));
            }
            if opts.rungs == 0 {
                return Err(field_err("brockett.rungs", "must be at least 1"));
            }
        }
        self.flow.validate()?;
        self.run.validate()?;
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Parses and validates a config from TOML text.
pub fn config_from_str(text: &str) -> Result<AnalysisConfig, ConfigError> {
    let mut cfg: AnalysisConfig = toml::from_str(text)?;
    cfg.source_sha256 = sha256_hex(text.as_bytes());
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, parses, and validates a config file. Every declared object is
/// constructed once here, so all reference and dimension errors surface
/// before any command runs.
pub fn load_config(path: impl AsRef<Path>) -> Result<AnalysisConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    config_from_str(&text)
}
