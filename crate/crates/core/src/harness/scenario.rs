//! Scenario files (TOML).
//!
//! ```toml
//! seed = 1
//! horizon = 200
//!
//! [cluster]
//! nodes = 2
//! slots_per_node = 4
//!
//! [policy]
//! name = "GROW_WHEN_IDLE"
//!
//! [[jobs]]
//! id = "p1"
//! initial_procs = 4
//! col_defaults = "amdahl_serial_fraction=0.05"
//!
//! [[jobs.phases]]
//! work = 20.0
//! actions = [{ kind = "grow", col = "num_delta=2" }]
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::Placement;
use crate::col::ColAttributes;
use crate::datastore::MAX_VALUE_BYTES;
use crate::pset::{PSetName, ZERO_PSET};
use crate::scheduler::Policy;
use crate::Tick;

/// Placeholder for a job's PSet at the time an action fires.
pub const CURRENT: &str = "@current";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Validation(String),
}

fn default_launch_latency() -> Tick {
    2
}

fn default_term_latency() -> Tick {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub nodes: u32,
    pub slots_per_node: u32,
    /// MiB per node; absent means memory is not constrained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_per_node: Option<u64>,
    #[serde(default = "default_launch_latency")]
    pub launch_latency: Tick,
    #[serde(default = "default_term_latency")]
    pub term_latency: Tick,
    #[serde(default)]
    pub placement: Placement,
    /// Extra launch delay drawn uniformly from `0..=launch_jitter` using the seed.
    #[serde(default)]
    pub launch_jitter: Tick,
}

impl ClusterSpec {
    pub fn total_slots(&self) -> u64 {
        u64::from(self.nodes) * u64::from(self.slots_per_node)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Grow {
        #[serde(default)]
        col: String,
    },
    Shrink {
        #[serde(default)]
        col: String,
    },
    Add {
        #[serde(default)]
        col: String,
    },
    Split {
        counts: Vec<usize>,
    },
    Union {
        names: Vec<String>,
    },
    Publish {
        #[serde(default = "current")]
        pset: String,
        key: String,
        value: String,
    },
    Lookup {
        #[serde(default = "current")]
        pset: String,
        key: String,
        #[serde(default)]
        wait: bool,
    },
}

fn current() -> String {
    CURRENT.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    /// Work units; progress per tick is the job's Amdahl speedup.
    pub work: f64,
    /// Fired in order once the phase's work is done.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub id: String,
    #[serde(default)]
    pub arrival_tick: Tick,
    pub initial_procs: u32,
    /// Lower bound for system-initiated shrinking; defaults to `initial_procs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_procs: Option<u32>,
    /// Upper bound for system-initiated growth; defaults to `initial_procs`
    /// plus the `max_delta` of `col_defaults`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_procs: Option<u32>,
    /// The system may resize this job on its own.
    #[serde(default)]
    pub malleable: bool,
    /// Jumps the start queue and may trigger system shrinks.
    #[serde(default)]
    pub urgent: bool,
    #[serde(default)]
    pub col_defaults: String,
    pub phases: Vec<Phase>,
}

impl JobSpec {
    pub fn pset_name(&self) -> PSetName {
        PSetName::new(format!("app/{}", self.id)).expect("validated id")
    }

    pub fn min_procs(&self) -> u32 {
        self.min_procs.unwrap_or(self.initial_procs)
    }

    pub fn max_procs(&self) -> u32 {
        self.max_procs
            .unwrap_or_else(|| self.initial_procs + self.defaults().max_delta.unwrap_or(0))
    }

    pub fn defaults(&self) -> ColAttributes {
        ColAttributes::parse(&self.col_defaults).expect("validated defaults")
    }

    /// Payload of an action: job defaults overridden by the action's own keys.
    pub fn merged_col(&self, col: &str) -> String {
        match (self.col_defaults.is_empty(), col.is_empty()) {
            (true, _) => col.to_string(),
            (false, true) => self.col_defaults.clone(),
            (false, false) => format!("{};{}", self.col_defaults, col),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub horizon: Tick,
    pub cluster: ClusterSpec,
    pub policy: Policy,
    #[serde(default)]
    pub jobs: Vec<JobSpec>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario is always serializable")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |m: String| Err(ScenarioError::Validation(m));
        if self.horizon == 0 {
            return fail("horizon must be at least 1".into());
        }
        if self.cluster.nodes == 0 || self.cluster.slots_per_node == 0 {
            return fail("cluster needs at least one node and one slot per node".into());
        }
        if self.policy.tick_interval == 0 {
            return fail("policy.tick_interval must be at least 1".into());
        }
        let total = self.cluster.total_slots();
        let mut ids = BTreeSet::new();
        for job in &self.jobs {
            let id = &job.id;
            if id.is_empty()
                || !id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return fail(format!("bad job id `{id}`"));
            }
            if !ids.insert(id.clone()) {
                return fail(format!("duplicate job id `{id}`"));
            }
            if job.initial_procs == 0 || u64::from(job.initial_procs) > total {
                return fail(format!(
                    "job {id}: initial_procs {} outside 1..={total}",
                    job.initial_procs
                ));
            }
            if job.min_procs() == 0 || job.min_procs() > job.initial_procs {
                return fail(format!("job {id}: min_procs must be in 1..=initial_procs"));
            }
            let defaults = ColAttributes::parse(&job.col_defaults)
                .map_err(|e| ScenarioError::Validation(format!("job {id}: col_defaults: {e}")))?;
            if job.max_procs() < job.initial_procs {
                return fail(format!("job {id}: max_procs below initial_procs"));
            }
            if defaults.amdahl_serial_fraction.is_none() {
                return fail(format!(
                    "job {id}: col_defaults must set amdahl_serial_fraction"
                ));
            }
            if let (Some(mem), Some(node)) = (defaults.mem_per_process, self.cluster.mem_per_node) {
                if mem > node {
                    return fail(format!("job {id}: mem_per_process exceeds node memory"));
                }
                let per_node = (node / mem.max(1)).min(u64::from(self.cluster.slots_per_node));
                if u64::from(job.initial_procs) > per_node * u64::from(self.cluster.nodes) {
                    return fail(format!(
                        "job {id}: initial_procs cannot fit in cluster memory"
                    ));
                }
            }
            if job.phases.is_empty() {
                return fail(format!("job {id}: at least one phase is required"));
            }
            let own = format!("app/{id}");
            for (k, phase) in job.phases.iter().enumerate() {
                if !phase.work.is_finite() || phase.work < 0.0 {
                    return fail(format!("job {id} phase {k}: work must be finite and >= 0"));
                }
                for action in &phase.actions {
                    self.validate_action(job, &own, action).map_err(|m| {
                        ScenarioError::Validation(format!("job {id} phase {k}: {m}"))
                    })?;
                }
            }
        }
        Ok(())
    }

    fn validate_action(&self, job: &JobSpec, own: &str, action: &Action) -> Result<(), String> {
        let own_ref = |name: &str| name == CURRENT || name == own;
        match action {
            Action::Grow { col } | Action::Shrink { col } | Action::Add { col } => {
                let attrs =
                    ColAttributes::parse(&job.merged_col(col)).map_err(|e| e.to_string())?;
                if attrs.num_delta == 0 {
                    return Err("resizing actions need num_delta >= 1".into());
                }
            }
            Action::Split { counts } => {
                if counts.is_empty() || counts.contains(&0) {
                    return Err("split counts must be non-empty and positive".into());
                }
            }
            Action::Union { names } => {
                if names.is_empty() {
                    return Err("union needs at least one name".into());
                }
                for n in names {
                    if !(own_ref(n) || n == ZERO_PSET) {
                        return Err(format!(
                            "union may only name @current, {own} or {ZERO_PSET}, not `{n}`"
                        ));
                    }
                }
            }
            Action::Publish { pset, key, value } => {
                if !own_ref(pset) || key.is_empty() {
                    return Err(format!(
                        "publish needs a key and a pset of @current or {own}"
                    ));
                }
                if value.len() > MAX_VALUE_BYTES {
                    return Err("published value exceeds 64 KiB".into());
                }
            }
            Action::Lookup { pset, key, .. } => {
                if !own_ref(pset) || key.is_empty() {
                    return Err(format!(
                        "lookup needs a key and a pset of @current or {own}"
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
horizon = 10
[cluster]
nodes = 1
slots_per_node = 4
[policy]
name = "FIFO_STRICT"
[[jobs]]
id = "a"
initial_procs = 2
col_defaults = "amdahl_serial_fraction=0.1"
[[jobs.phases]]
work = 3.0
actions = [{ kind = "grow", col = "num_delta=1" }, { kind = "split", counts = [1, 2] }]
"#;

    #[test]
    fn parses_with_defaults() {
        let sc = Scenario::from_toml(MINIMAL).unwrap();
        assert_eq!(sc.cluster.launch_latency, 2);
        assert_eq!(sc.cluster.term_latency, 1);
        assert_eq!(sc.policy.max_defer_ticks, 50);
        assert_eq!(sc.jobs[0].phases[0].actions.len(), 2);
        assert_eq!(sc.jobs[0].min_procs(), 2);
        let again = Scenario::from_toml(&sc.to_toml()).unwrap();
        assert_eq!(again, sc);
    }

    #[test]
    fn validation_failures() {
        let cases = [
            ("initial_procs = 2", "initial_procs = 9"),
            ("id = \"a\"", "id = \"a b\""),
            (
                "col_defaults = \"amdahl_serial_fraction=0.1\"",
                "col_defaults = \"\"",
            ),
            ("num_delta=1", "num_delta=0"),
            ("counts = [1, 2]", "counts = [0]"),
            ("name = \"FIFO_STRICT\"", "name = \"ROUND_ROBIN\""),
            ("horizon = 10", "horizon = 0"),
        ];
        for (from, to) in cases {
            let text = MINIMAL.replace(from, to);
            assert!(Scenario::from_toml(&text).is_err(), "{to}");
        }
        let bad_union = MINIMAL.replace(
            "{ kind = \"split\", counts = [1, 2] }",
            "{ kind = \"union\", names = [\"app/other\"] }",
        );
        assert!(matches!(
            Scenario::from_toml(&bad_union),
            Err(ScenarioError::Validation(_))
        ));
    }

    #[test]
    fn merged_col_overrides_defaults() {
        let sc = Scenario::from_toml(MINIMAL).unwrap();
        let merged = sc.jobs[0].merged_col("amdahl_serial_fraction=0.5;num_delta=1");
        let a = ColAttributes::parse(&merged).unwrap();
        assert_eq!(a.amdahl_serial_fraction, Some(0.5));
    }
}
