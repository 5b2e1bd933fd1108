//! Scenario-driven simulation: configuration, scripted and generated
//! workloads, and the metrics report.

pub mod config;
pub mod report;
pub mod workload;

use std::collections::BTreeMap;
use std::sync::Arc;

use dire_model::query::{ConstraintSpec, Interest, SubConstraint};
use dire_model::xml::{parse_canonical, Element, SchemaDescriptor};
use dire_model::{ElementId, ModelError, NodeId};
use serde::Deserialize;

use crate::directory::FedRef;
use crate::manager::{CommandError, DeliveryManager, ManagementCommand};
use crate::styles::StyleKind;
use crate::time::SimTime;
use crate::world::{Action, Ctx, NetworkParams, Node, NodeIdx, Outage, OutageTarget, Timer, World};

pub use config::{ConfigInvalid, FieldError, FormulaCheck, NodeSpec, Quantity, SimConfig, TimedAction};
pub use report::{check_formulas, emit_report, CheckResult, MetricsReport};
pub use workload::{gen_action, ActionKind, ActionWeights, GenAction, NodeView, WorkloadActor, WorkloadSpec};

/// An XML-like element tree as written in scenario files.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementSpec {
    pub name: String,
    #[serde(default)]
    pub attrs: BTreeMap<String, String>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub children: Vec<ElementSpec>,
}

impl ElementSpec {
    pub fn to_element(&self) -> Element {
        let mut el = Element::new(self.name.as_str());
        for (k, v) in &self.attrs {
            el = el.attr(k.as_str(), v.as_str());
        }
        if let Some(t) = &self.text {
            el = el.text(t.as_str());
        }
        for c in &self.children {
            el = el.child(c.to_element());
        }
        el
    }
}

/// A facet document: either a canonical XML string or an element tree.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FacetDoc {
    pub schema: String,
    #[serde(default)]
    pub xml: Option<String>,
    #[serde(default)]
    pub root: Option<ElementSpec>,
}

impl FacetDoc {
    pub fn build(&self) -> Result<(SchemaDescriptor, Element), ModelError> {
        let schema = SchemaDescriptor::open(self.schema.as_str())?;
        let root = match (&self.xml, &self.root) {
            (Some(xml), None) => parse_canonical(xml.as_bytes())?,
            (None, Some(root)) => root.to_element(),
            _ => return Err(ModelError::InvalidSchema("facet needs exactly one of `xml` or `root`".into())),
        };
        Ok((schema, root))
    }
}

/// An interest as written in scripts; services are named by label or id.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptInterest {
    ById { service: String },
    Constraints { conjuncts: Vec<ConstraintSpec> },
    AddInfo { service: String, schema_id: String, path: String },
}

/// One scripted step for a node. Elements are referred to by the label
/// given at creation time or by their textual id.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptAction {
    CreateService {
        label: String,
        #[serde(default)]
        name: Option<String>,
        #[serde(default = "yes")]
        allow_add_info: bool,
        #[serde(default)]
        facets: Vec<FacetDoc>,
        /// Shares the service on the marketplace right away.
        #[serde(default)]
        share: bool,
    },
    CreateAddInfo {
        label: String,
        service: String,
        facet: FacetDoc,
        #[serde(default)]
        share: bool,
    },
    Share { element: String },
    ShareAddInfo { element: String },
    Unshare { element: String },
    DeclareInterest { interest: ScriptInterest },
    CreateFederation { name: String, style: StyleKind },
    JoinFederation { federation: String },
    LeaveFederation { federation: String },
    Promote { federation: String, element: String },
    Retract { federation: String, element: String },
    DismissFederation { federation: String },
    DiscoverDirectories,
    Crash,
    Recover,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScriptError {
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("invalid document: {0}")]
    Document(#[from] ModelError),
    #[error(transparent)]
    Command(#[from] CommandError),
}

impl ScriptError {
    pub fn name(&self) -> &'static str {
        match self {
            ScriptError::UnknownLabel(_) => "unknown_label",
            ScriptError::Document(_) => "invalid_document",
            ScriptError::Command(e) => e.name(),
        }
    }
}

fn resolve(ctx: &Ctx<'_>, label: &str) -> Result<ElementId, ScriptError> {
    if let Some(id) = ctx.label(label) {
        return Ok(id.clone());
    }
    label.parse().map_err(|_| ScriptError::UnknownLabel(label.to_owned()))
}

fn resolve_interest(ctx: &Ctx<'_>, interest: &ScriptInterest) -> Result<Interest, ScriptError> {
    Ok(match interest {
        ScriptInterest::ById { service } => Interest::ById(resolve(ctx, service)?),
        ScriptInterest::Constraints { conjuncts } => Interest::by_constraints(
            conjuncts
                .iter()
                .map(|c| SubConstraint::new(c.schema_id.clone(), &c.path))
                .collect::<Result<_, _>>()?,
        )?,
        ScriptInterest::AddInfo {
            service,
            schema_id,
            path,
        } => Interest::add_info(resolve(ctx, service)?, schema_id.clone(), path)?,
    })
}

fn fed(name: &str) -> FedRef {
    FedRef::Name(name.to_owned())
}

/// Executes one scripted step on a node.
pub fn execute_script(dm: &mut DeliveryManager, action: ScriptAction, ctx: &mut Ctx<'_>) -> Result<(), ScriptError> {
    let cmd = match action {
        ScriptAction::CreateService {
            label,
            name,
            allow_add_info,
            facets,
            share,
        } => {
            let docs = facets.iter().map(FacetDoc::build).collect::<Result<Vec<_>, _>>()?;
            let id = dm.create_service(ctx, name.as_deref().unwrap_or(&label), allow_add_info, docs)?;
            ctx.set_label(&label, id.clone());
            if !share {
                return Ok(());
            }
            ManagementCommand::Share(id)
        }
        ScriptAction::CreateAddInfo {
            label,
            service,
            facet,
            share,
        } => {
            let service = resolve(ctx, &service)?;
            let (schema, root) = facet.build()?;
            let id = dm.create_add_info(ctx, &service, &schema, root)?;
            ctx.set_label(&label, id.clone());
            if !share {
                return Ok(());
            }
            ManagementCommand::ShareAddInfo(id)
        }
        ScriptAction::Share { element } => ManagementCommand::Share(resolve(ctx, &element)?),
        ScriptAction::ShareAddInfo { element } => ManagementCommand::ShareAddInfo(resolve(ctx, &element)?),
        ScriptAction::Unshare { element } => ManagementCommand::Unshare(resolve(ctx, &element)?),
        ScriptAction::DeclareInterest { interest } => ManagementCommand::DeclareInterest(resolve_interest(ctx, &interest)?),
        ScriptAction::CreateFederation { name, style } => ManagementCommand::CreateFederation { name, style },
        ScriptAction::JoinFederation { federation } => ManagementCommand::JoinFederation(fed(&federation)),
        ScriptAction::LeaveFederation { federation } => ManagementCommand::LeaveFederation(fed(&federation)),
        ScriptAction::Promote { federation, element } => {
            ManagementCommand::Promote(fed(&federation), resolve(ctx, &element)?)
        }
        ScriptAction::Retract { federation, element } => {
            ManagementCommand::Retract(fed(&federation), resolve(ctx, &element)?)
        }
        ScriptAction::DismissFederation { federation } => ManagementCommand::DismissFederation(fed(&federation)),
        ScriptAction::DiscoverDirectories => ManagementCommand::DiscoverDirectories,
        // Crashes are turned into world actions when the scenario is built.
        ScriptAction::Crash | ScriptAction::Recover => return Ok(()),
    };
    dm.run_command(cmd, ctx)?;
    Ok(())
}

/// Runs a scripted step, counting failures in the run metrics.
pub fn run_script(node: &mut Node, action: ScriptAction, ctx: &mut Ctx<'_>) {
    let counted = matches!(
        action,
        ScriptAction::CreateService { .. } | ScriptAction::CreateAddInfo { .. }
    );
    if let Err(e) = execute_script(&mut node.dm, action, ctx) {
        // Command failures are already counted by the manager.
        if counted || !matches!(e, ScriptError::Command(_)) {
            *ctx.metrics().command_errors.entry(e.name().to_owned()).or_default() += 1;
        }
    }
}

/// A scenario ready to run.
pub struct Simulation {
    pub config: SimConfig,
    pub world: World,
}

impl Simulation {
    pub fn build(config: SimConfig) -> Result<Self, ConfigInvalid> {
        config.validate()?;
        let topology = config.topology.build().map_err(|e| ConfigInvalid::single("topology", e.to_string()))?;
        let net = NetworkParams {
            latency_min: config.network.latency_min,
            latency_max: config.network.latency_max,
            loss_rate: config.network.loss_rate,
            reply_timeout: config.network.reply_timeout,
        };
        let mut world = World::new(topology, net, config.seed).map_err(|e| ConfigInvalid::single("topology", e.to_string()))?;
        let nodes = config.expand_nodes();
        for spec in &nodes {
            let mut mcfg = config.manager.clone();
            if let Some(mode) = spec.registry {
                mcfg.registry = mode;
            }
            let id = NodeId::new(spec.id.as_str());
            let dm = DeliveryManager::new(id.clone(), mcfg);
            world
                .add_node(id, spec.broker.as_deref(), dm, spec.directory)
                .map_err(|e| ConfigInvalid::single(format!("nodes.{}.broker", spec.id), e.to_string()))?;
        }
        for spec in &nodes {
            let idx = world.index_of(&NodeId::new(spec.id.as_str())).expect("added above");
            for step in &spec.script {
                let action = match &step.action {
                    ScriptAction::Crash => Action::Crash,
                    ScriptAction::Recover => Action::Recover,
                    other => Action::Script(other.clone()),
                };
                world.schedule(step.at, idx, action);
            }
        }
        for o in &config.outages {
            let target = match (&o.link, &o.node) {
                (Some((a, b)), None) => {
                    let topo = world.topology();
                    let (a, b) = (topo.index(a), topo.index(b));
                    match (a, b) {
                        (Ok(a), Ok(b)) => OutageTarget::Link(a, b),
                        (Err(e), _) | (_, Err(e)) => return Err(ConfigInvalid::single("outages.link", e.to_string())),
                    }
                }
                (None, Some(n)) => match world.index_of(&NodeId::new(n.as_str())) {
                    Some(idx) => OutageTarget::Node(idx),
                    None => return Err(ConfigInvalid::single("outages.node", format!("unknown node `{n}`"))),
                },
                _ => return Err(ConfigInvalid::single("outages", "exactly one of `link` or `node` is required")),
            };
            world.add_outage(Outage {
                target,
                from: o.from,
                until: o.until,
            });
        }
        if let Some(spec) = &config.workload {
            install_workload(&mut world, &config, &nodes, spec);
        }
        Ok(Simulation { config, world })
    }

    /// Runs until the configured duration and returns the report.
    pub fn run(mut self) -> MetricsReport {
        self.run_to_end();
        self.report()
    }

    pub fn run_to_end(&mut self) {
        self.world.run_until(self.config.duration);
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport::collect(&self.world, &self.config)
    }
}

/// Builds and runs a scenario.
pub fn run(config: SimConfig) -> Result<MetricsReport, ConfigInvalid> {
    Ok(Simulation::build(config)?.run())
}

/// Creates the prebuilt federations and arms every workload node's timer.
fn install_workload(world: &mut World, config: &SimConfig, nodes: &[NodeSpec], spec: &WorkloadSpec) {
    let actors: Vec<NodeIdx> = nodes
        .iter()
        .filter(|n| n.workload)
        .map(|n| world.index_of(&NodeId::new(n.id.as_str())).expect("added above"))
        .collect();
    if actors.is_empty() {
        return;
    }
    let names: Arc<Vec<String>> = Arc::new((0..spec.federations).map(|i| format!("fed-{i}")).collect());
    let styles = &spec.federation_styles;
    for (i, name) in names.iter().enumerate() {
        let node = actors[i % actors.len()];
        let style = styles[i % styles.len()];
        world.schedule(
            1 + i as SimTime,
            node,
            Action::Script(ScriptAction::CreateFederation {
                name: name.clone(),
                style,
            }),
        );
    }
    let spec = Arc::new(spec.clone());
    // Workload actions begin once the federations are registered.
    let start = config.workload_start;
    for &idx in &actors {
        let phase = world.with_node(idx, |_, ctx| {
            use rand::Rng;
            ctx.rng().gen_range(0..config.action_period)
        });
        world.node_mut(idx).workload = Some(WorkloadActor::new(spec.clone(), names.clone(), config.action_period));
        world.set_timer(idx, start + phase, Timer::Workload);
    }
}
