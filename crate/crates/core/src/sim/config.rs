//! Scenario files (TOML) and their validation.

use std::collections::BTreeSet;
use std::fmt;

use serde::Deserialize;

use super::workload::WorkloadSpec;
use super::ScriptAction;
use crate::manager::ManagerConfig;
use crate::registry::RegistryMode;
use crate::styles::LogBase;
use crate::time::{de_duration, SimTime, DAY, MINUTE, SECOND, WEEK};
use crate::topology::{OverlayTopology, TopologyError, TopologySpec};

/// One field-level diagnostic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct ConfigInvalid {
    pub errors: Vec<FieldError>,
}

impl ConfigInvalid {
    pub fn single(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigInvalid {
            errors: vec![FieldError {
                field: field.into(),
                message: message.into(),
            }],
        }
    }
}

impl fmt::Display for ConfigInvalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration")?;
        for e in &self.errors {
            write!(f, "\n  {}: {}", e.field, e.message)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(deserialize_with = "de_duration")]
    pub latency_min: SimTime,
    #[serde(deserialize_with = "de_duration")]
    pub latency_max: SimTime,
    pub loss_rate: f64,
    #[serde(deserialize_with = "de_duration")]
    pub reply_timeout: SimTime,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            latency_min: 20,
            latency_max: 200,
            loss_rate: 0.0,
            reply_timeout: 10 * SECOND,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologyConfig {
    /// A hub with `leaves` leaf brokers.
    Star { leaves: usize },
    /// A single broker.
    Single,
    /// Complete tree of the given branching factor and depth.
    Tree { branching: usize, depth: usize },
    /// Broker `b{i}` hangs below `b{parents[i-1]}`.
    Parents { parents: Vec<usize> },
    Explicit {
        brokers: Vec<String>,
        #[serde(default)]
        links: Vec<(String, String)>,
    },
}

impl TopologyConfig {
    pub fn build(&self) -> Result<OverlayTopology, TopologyError> {
        match self {
            TopologyConfig::Star { leaves } => Ok(OverlayTopology::star(*leaves)),
            TopologyConfig::Single => Ok(OverlayTopology::balanced_tree(1, 0)),
            TopologyConfig::Tree { branching, depth } => Ok(OverlayTopology::balanced_tree(*branching, *depth)),
            TopologyConfig::Parents { parents } => OverlayTopology::from_parents(parents),
            TopologyConfig::Explicit { brokers, links } => OverlayTopology::from_spec(&TopologySpec {
                brokers: brokers.clone(),
                links: links.clone(),
                attach: Default::default(),
            }),
        }
    }
}

/// A scripted step with its simulated time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimedAction {
    pub at: SimTime,
    pub action: ScriptAction,
}

impl<'de> Deserialize<'de> for TimedAction {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let mut table = toml::Table::deserialize(de)?;
        let at = match table.remove("at") {
            Some(toml::Value::String(s)) => crate::time::parse_duration(&s).map_err(D::Error::custom)?,
            Some(toml::Value::Integer(ms)) if ms >= 0 => ms as SimTime,
            Some(other) => return Err(D::Error::custom(format!("invalid `at`: {other}"))),
            None => return Err(D::Error::missing_field("at")),
        };
        let action = ScriptAction::deserialize(toml::Value::Table(table)).map_err(D::Error::custom)?;
        Ok(TimedAction { at, action })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    #[serde(default)]
    pub broker: Option<String>,
    #[serde(default)]
    pub directory: bool,
    #[serde(default)]
    pub registry: Option<RegistryMode>,
    #[serde(default)]
    pub workload: bool,
    #[serde(default)]
    pub script: Vec<TimedAction>,
}

/// Many similar nodes `{prefix}{i}`, attached round-robin to `brokers`
/// (all brokers when empty).
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeGroup {
    pub prefix: String,
    pub count: usize,
    #[serde(default)]
    pub brokers: Vec<String>,
    #[serde(default)]
    pub registry: Option<RegistryMode>,
    #[serde(default)]
    pub workload: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutageSpec {
    #[serde(default)]
    pub link: Option<(String, String)>,
    #[serde(default)]
    pub node: Option<String>,
    #[serde(deserialize_with = "de_duration")]
    pub from: SimTime,
    #[serde(deserialize_with = "de_duration")]
    pub until: SimTime,
}

/// Which traffic formula a check compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// Federation payload deliveries (the style's promotion formula).
    Promotion,
    Heartbeat,
    Resubscription,
}

impl Quantity {
    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::Promotion => "promotion",
            Quantity::Heartbeat => "heartbeat",
            Quantity::Resubscription => "resubscription",
        }
    }
}

impl std::str::FromStr for Quantity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "promotion" => Ok(Quantity::Promotion),
            "heartbeat" => Ok(Quantity::Heartbeat),
            "resubscription" => Ok(Quantity::Resubscription),
            _ => Err(format!("unknown quantity `{s}`")),
        }
    }
}

/// A traffic-formula oracle for one federation of a lossless scenario.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormulaCheck {
    pub federation: String,
    #[serde(default = "promotion")]
    pub quantity: Quantity,
    pub p: u64,
    pub n: u64,
    #[serde(deserialize_with = "de_duration")]
    pub d: SimTime,
    #[serde(default = "day", deserialize_with = "de_duration")]
    pub t_renew: SimTime,
    #[serde(default = "day", deserialize_with = "de_duration")]
    pub t_heartbeat: SimTime,
    #[serde(default = "week", deserialize_with = "de_duration")]
    pub t_resubscription: SimTime,
    #[serde(default = "two")]
    pub c: f64,
    #[serde(default)]
    pub log: LogBase,
    /// Relative tolerance; 0 demands exact equality.
    #[serde(default)]
    pub tolerance: f64,
}

fn promotion() -> Quantity {
    Quantity::Promotion
}
fn day() -> SimTime {
    DAY
}
fn week() -> SimTime {
    WEEK
}
fn two() -> f64 {
    2.0
}
fn one() -> u64 {
    1
}
fn five_minutes() -> SimTime {
    5 * MINUTE
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "one")]
    pub seed: u64,
    #[serde(deserialize_with = "de_duration")]
    pub duration: SimTime,
    #[serde(default = "five_minutes", deserialize_with = "de_duration")]
    pub action_period: SimTime,
    /// When generated workload actions start.
    #[serde(default = "five_minutes", deserialize_with = "de_duration")]
    pub workload_start: SimTime,
    #[serde(default)]
    pub network: NetworkSpec,
    pub topology: TopologyConfig,
    #[serde(default)]
    pub manager: ManagerConfig,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub groups: Vec<NodeGroup>,
    #[serde(default)]
    pub outages: Vec<OutageSpec>,
    #[serde(default)]
    pub workload: Option<WorkloadSpec>,
    #[serde(default)]
    pub checks: Vec<FormulaCheck>,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigInvalid> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| format!("byte {}", s.start)).unwrap_or_else(|| "file".into());
            ConfigInvalid::single(field, e.message())
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigInvalid> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigInvalid::single(path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text)
    }

    /// Explicit nodes followed by the expanded groups.
    pub fn expand_nodes(&self) -> Vec<NodeSpec> {
        let mut nodes = self.nodes.clone();
        let all_brokers = self.topology.build().map(|t| t.brokers).unwrap_or_default();
        for g in &self.groups {
            let brokers = if g.brokers.is_empty() { &all_brokers } else { &g.brokers };
            for i in 0..g.count {
                nodes.push(NodeSpec {
                    id: format!("{}{i}", g.prefix),
                    broker: brokers.get(i % brokers.len().max(1)).cloned(),
                    directory: false,
                    registry: g.registry,
                    workload: g.workload,
                    script: Vec::new(),
                });
            }
        }
        nodes
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<(), ConfigInvalid> {
        let mut errors = Vec::new();
        let mut err = |field: &str, message: String| {
            errors.push(FieldError {
                field: field.to_owned(),
                message,
            })
        };
        if self.duration == 0 {
            err("duration", "must be positive".into());
        }
        if self.action_period == 0 {
            err("action_period", "must be positive".into());
        }
        let net = &self.network;
        if !(0.0..=1.0).contains(&net.loss_rate) {
            err("network.loss_rate", format!("{} is not a probability", net.loss_rate));
        }
        if net.latency_min > net.latency_max {
            err("network.latency_min", "exceeds latency_max".into());
        }
        if net.reply_timeout == 0 {
            err("network.reply_timeout", "must be positive".into());
        }
        match self.topology.build() {
            Ok(topo) => {
                if let Err(e) = crate::topology::route_table_check(&topo) {
                    err("topology", e.to_string());
                }
                let mut seen = BTreeSet::new();
                for n in self.expand_nodes() {
                    if !seen.insert(n.id.clone()) {
                        err("nodes.id", format!("duplicate node `{}`", n.id));
                    }
                    match &n.broker {
                        Some(b) if topo.index(b).is_err() => err(&format!("nodes.{}.broker", n.id), format!("unknown broker `{b}`")),
                        None => err(&format!("nodes.{}.broker", n.id), "missing".into()),
                        _ => {}
                    }
                }
            }
            Err(e) => err("topology", e.to_string()),
        }
        for (i, o) in self.outages.iter().enumerate() {
            if o.from >= o.until {
                err(&format!("outages[{i}]"), "`from` must precede `until`".into());
            }
        }
        if let Some(w) = &self.workload {
            for (field, message) in w.problems() {
                err(&format!("workload.{field}"), message);
            }
            if !self.nodes.iter().any(|n| n.directory) {
                err("nodes", "a workload needs at least one directory node".into());
            }
        }
        for (i, c) in self.checks.iter().enumerate() {
            if c.tolerance < 0.0 {
                err(&format!("checks[{i}].tolerance"), "must not be negative".into());
            }
            if c.t_renew == 0 || c.t_heartbeat == 0 || c.t_resubscription == 0 {
                err(&format!("checks[{i}]"), "periods must be positive".into());
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigInvalid { errors })
        }
    }
}
