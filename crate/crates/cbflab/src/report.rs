//! Versioned JSON run reports.
//!
//! A report records the tool version, a hash of the config it ran from, the
//! seed, and one result row per executed command. All verdict content is
//! deterministic for a fixed config and seed; wall-clock timings live in
//! dedicated `*wall_time_s` fields so [`Report::verdict_view`] can strip
//! them when two runs are compared.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::Value;

/// Bumped whenever the serialized report changes shape.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Outcome of one executed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CommandOutcome {
    /// Ran to completion with nothing to flag.
    Completed,
    /// The tested necessary condition (or invariance/strictness claim)
    /// fails, with a witness in the result data.
    Violated,
    /// An obstruction check ran and found solving inputs at every scale.
    NotViolated,
    /// The check ran but is silent (e.g. vanishing Euler characteristic).
    Inconclusive,
    /// Prerequisite config blocks are absent; emitted only by `all`.
    Skipped,
    /// The command failed at runtime.
    Error,
}

impl std::fmt::Display for CommandOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CommandOutcome::Completed => "Completed",
            CommandOutcome::Violated => "Violated",
            CommandOutcome::NotViolated => "NotViolated",
            CommandOutcome::Inconclusive => "Inconclusive",
            CommandOutcome::Skipped => "Skipped",
            CommandOutcome::Error => "Error",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CommandResult {
    pub command: String,
    /// Narrative step label when run as part of `all`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<String>,
    pub outcome: CommandOutcome,
    pub wall_time_s: f64,
    pub data: Value,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: String,
    /// SHA-256 of the config file the run was produced from.
    pub config_sha256: String,
    pub seed: u64,
    pub sample_multiplier: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Echo of `run.tolerances`; provenance only.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub tolerance_overrides: BTreeMap<String, f64>,
    pub results: Vec<CommandResult>,
    pub warnings: Vec<String>,
    /// Worst outcome across the result rows.
    pub verdict: CommandOutcome,
    pub total_wall_time_s: f64,
}

/// Worst-first severity for aggregating row outcomes into a verdict.
fn severity(o: CommandOutcome) -> u8 {
    match o {
        CommandOutcome::Error => 5,
        CommandOutcome::Violated => 4,
        CommandOutcome::Inconclusive => 3,
        CommandOutcome::NotViolated => 2,
        CommandOutcome::Completed => 1,
        CommandOutcome::Skipped => 0,
    }
}

/// The verdict for a set of result rows (Completed when empty).
pub fn overall(results: &[CommandResult]) -> CommandOutcome {
    results
        .iter()
        .map(|r| r.outcome)
        .max_by_key(|o| severity(*o))
        .unwrap_or(CommandOutcome::Completed)
}

impl Report {
    /// Process exit code: 1 when any command errored, 2 when any verdict is
    /// Violated, 0 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self
            .results
            .iter()
            .any(|r| r.outcome == CommandOutcome::Error)
        {
            return 1;
        }
        if self
            .results
            .iter()
            .any(|r| r.outcome == CommandOutcome::Violated)
        {
            return 2;
        }
        0
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("report serialization cannot fail")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("report serialization cannot fail")
    }

    /// The report with every wall-time nulled out. Two runs of the same
    /// config and seed serialize identically here, byte for byte.
    pub fn verdict_view(&self) -> Value {
        let mut v = self.to_json();
        strip_times(&mut v);
        v
    }
}

fn strip_times(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for key in ["wall_time_s", "total_wall_time_s"] {
                if map.contains_key(key) {
                    map.insert(key.to_string(), Value::Null);
                }
            }
            for (_, vv) in map.iter_mut() {
                strip_times(vv);
            }
        }
        Value::Array(items) => {
            for vv in items {
                strip_times(vv);
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn row(outcome: CommandOutcome, wall: f64) -> CommandResult {
        CommandResult {
            command: "euler".into(),
            step: None,
            outcome,
            wall_time_s: wall,
            data: json!({"euler_characteristic": 1}),
            warnings: vec![],
        }
    }

    fn report(rows: Vec<CommandResult>) -> Report {
        let verdict = overall(&rows);
        Report {
            schema_version: REPORT_SCHEMA_VERSION,
            tool: "cbflab",
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "euler".into(),
            config_sha256: "0".repeat(64),
            seed: 0,
            sample_multiplier: 1,
            resolution: Some(32),
            threads: None,
            tolerance_overrides: BTreeMap::new(),
            results: rows,
            warnings: vec![],
            verdict,
            total_wall_time_s: 0.5,
        }
    }

    #[test]
    fn exit_codes_follow_the_worst_row() {
        assert_eq!(report(vec![row(CommandOutcome::Completed, 0.1)]).exit_code(), 0);
        assert_eq!(
            report(vec![
                row(CommandOutcome::Completed, 0.1),
                row(CommandOutcome::Violated, 0.2),
            ])
            .exit_code(),
            2
        );
        assert_eq!(
            report(vec![
                row(CommandOutcome::Violated, 0.1),
                row(CommandOutcome::Error, 0.2),
            ])
            .exit_code(),
            1
        );
    }

    #[test]
    fn verdict_view_is_invariant_to_timings() {
        let a = report(vec![row(CommandOutcome::Completed, 0.123)]);
        let mut b = report(vec![row(CommandOutcome::Completed, 9.875)]);
        b.total_wall_time_s = 42.0;
        assert_eq!(
            serde_json::to_string(&a.verdict_view()).unwrap(),
            serde_json::to_string(&b.verdict_view()).unwrap()
        );
    }

    #[test]
    fn overall_prefers_violated_over_inconclusive() {
        let rows = vec![
            row(CommandOutcome::Inconclusive, 0.1),
            row(CommandOutcome::Violated, 0.1),
            row(CommandOutcome::Skipped, 0.0),
        ];
        assert_eq!(overall(&rows), CommandOutcome::Violated);
    }
}
