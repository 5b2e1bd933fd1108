//! Random workload: every active node periodically performs one legal
//! action, the way a human operator would.

use std::collections::BTreeMap;
use std::sync::Arc;

use dire_model::query::{Interest, SubConstraint};
use dire_model::xml::{Element, SchemaDescriptor};
use dire_model::ElementId;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::Deserialize;

use crate::directory::FedRef;
use crate::manager::{DeliveryManager, ManagementCommand};
use crate::styles::StyleKind;
use crate::time::SimTime;
use crate::world::{Ctx, Timer};

pub const WSDL: &str = "wsdl";
pub const QOS: &str = "qos";
pub const OBSERVED: &str = "observed";
const EXTRA_SCHEMAS: [&str; 3] = ["soaptest", "sla", "doc"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ActionKind {
    Share,
    Subscribe,
    ShareAddInfo,
    SubscribeAddInfo,
    Join,
    Leave,
    Promote,
}

impl ActionKind {
    pub const ALL: [ActionKind; 7] = [
        ActionKind::Share,
        ActionKind::Subscribe,
        ActionKind::ShareAddInfo,
        ActionKind::SubscribeAddInfo,
        ActionKind::Join,
        ActionKind::Leave,
        ActionKind::Promote,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Share => "share",
            ActionKind::Subscribe => "subscribe",
            ActionKind::ShareAddInfo => "share_add_info",
            ActionKind::SubscribeAddInfo => "subscribe_add_info",
            ActionKind::Join => "join",
            ActionKind::Leave => "leave",
            ActionKind::Promote => "promote",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionWeights {
    pub share: f64,
    pub subscribe: f64,
    pub share_add_info: f64,
    pub subscribe_add_info: f64,
    pub join: f64,
    pub leave: f64,
    pub promote: f64,
}

impl Default for ActionWeights {
    fn default() -> Self {
        ActionWeights {
            share: 0.25,
            subscribe: 0.25,
            share_add_info: 0.1,
            subscribe_add_info: 0.1,
            join: 0.1,
            leave: 0.05,
            promote: 0.15,
        }
    }
}

impl ActionWeights {
    /// Weights in [`ActionKind::ALL`] order.
    pub fn as_array(&self) -> [f64; 7] {
        [
            self.share,
            self.subscribe,
            self.share_add_info,
            self.subscribe_add_info,
            self.join,
            self.leave,
            self.promote,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Number of distinct operation names.
    pub method_pool: u32,
    /// QoS response times are drawn from `0..=qos_max` tenths of seconds.
    pub qos_max: u32,
    /// Specification facets per service: a WSDL and a QoS facet plus up to
    /// `max_facets - 2` others.
    pub max_facets: usize,
    /// Probability that a service interest also bounds the response time.
    /// Calibrated so that an interest matches about 0.75% of services.
    pub qos_constraint_prob: f64,
    pub allow_add_info_prob: f64,
    pub federations: usize,
    pub federation_styles: Vec<StyleKind>,
    pub weights: ActionWeights,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            method_pool: 100,
            qos_max: 100,
            max_facets: 5,
            qos_constraint_prob: 0.51,
            allow_add_info_prob: 0.5,
            federations: 100,
            federation_styles: vec![StyleKind::Ps, StyleKind::Psr],
            weights: ActionWeights::default(),
        }
    }
}

impl WorkloadSpec {
    /// Field problems, for configuration diagnostics.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let w = self.weights.as_array();
        if w.iter().any(|x| !(0.0..=1.0).contains(x)) {
            out.push(("weights", "every weight must lie in [0, 1]".to_owned()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            out.push(("weights", format!("weights sum to {sum}, not 1")));
        }
        for (field, p) in [
            ("qos_constraint_prob", self.qos_constraint_prob),
            ("allow_add_info_prob", self.allow_add_info_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                out.push((field, format!("{p} is not a probability")));
            }
        }
        if self.method_pool == 0 {
            out.push(("method_pool", "must be positive".to_owned()));
        }
        if self.qos_max == 0 {
            out.push(("qos_max", "must be positive".to_owned()));
        }
        if !(2..=5).contains(&self.max_facets) {
            out.push(("max_facets", "must lie in 2..=5".to_owned()));
        }
        if self.federation_styles.is_empty() {
            out.push(("federation_styles", "must not be empty".to_owned()));
        }
        out
    }

    /// Probability that a generated service interest matches a generated
    /// service.
    pub fn expected_match_rate(&self) -> f64 {
        let m = self.qos_max as f64;
        // P(v <= T) with v uniform on 0..=m and T uniform on 1..=m.
        let below = ((m + 1.0) / 2.0 + 1.0) / (m + 1.0);
        let qos = 1.0 - self.qos_constraint_prob * (1.0 - below);
        qos / self.method_pool as f64
    }
}

/// What a generated service looks like before it is signed.
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceDraft {
    pub name: String,
    pub allow_add_info: bool,
    pub method: u32,
    pub response_time: u32,
    pub facets: Vec<(SchemaDescriptor, Element)>,
}

/// Service interest parameters, kept for fast match estimation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InterestDraft {
    pub method: u32,
    pub max_response_time: Option<u32>,
}

impl InterestDraft {
    pub fn matches(&self, s: &ServiceDraft) -> bool {
        self.method == s.method && self.max_response_time.is_none_or(|t| s.response_time <= t)
    }

    pub fn to_interest(self) -> Interest {
        let mut conjuncts = vec![SubConstraint::new(WSDL, &format!("//operation[@name='m{}']", self.method)).expect("valid")];
        if let Some(t) = self.max_response_time {
            conjuncts.push(SubConstraint::new(QOS, &format!("/QoS/responseTime <= {t}")).expect("valid"));
        }
        Interest::by_constraints(conjuncts).expect("non-empty")
    }
}

/// The parts of a node's state that decide which actions are legal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeView {
    /// Locally created elements that may be shared or promoted.
    pub own_elements: Vec<ElementId>,
    /// Known services that accept additional information.
    pub add_info_targets: Vec<ElementId>,
    /// Joined federations this node may leave.
    pub leavable: Vec<String>,
    /// Joined federations (including managed ones).
    pub joined: Vec<String>,
    /// Federations not joined, joining or managed.
    pub joinable: Vec<String>,
}

impl NodeView {
    pub fn of(dm: &DeliveryManager, feds: &[String]) -> Self {
        let mut view = NodeView {
            own_elements: dm.own_elements().map(|e| e.id().clone()).collect(),
            add_info_targets: dm
                .seen_services()
                .iter()
                .filter(|(_, allow)| **allow)
                .map(|(id, _)| id.clone())
                .collect(),
            ..NodeView::default()
        };
        let mut involved: BTreeMap<&str, bool> = BTreeMap::new();
        for m in dm.memberships().values() {
            involved.insert(&m.info.name, m.joined);
            if m.joined {
                view.joined.push(m.info.name.clone());
                if !dm.manages(&m.info.fed_id) {
                    view.leavable.push(m.info.name.clone());
                }
            }
        }
        view.joinable = feds
            .iter()
            .filter(|f| !involved.contains_key(f.as_str()) && !dm.is_joining(&FedRef::Name((*f).clone())))
            .cloned()
            .collect();
        view
    }

    pub fn allows(&self, kind: ActionKind) -> bool {
        match kind {
            ActionKind::Share | ActionKind::Subscribe => true,
            ActionKind::ShareAddInfo | ActionKind::SubscribeAddInfo => !self.add_info_targets.is_empty(),
            ActionKind::Join => !self.joinable.is_empty(),
            ActionKind::Leave => !self.leavable.is_empty(),
            ActionKind::Promote => !self.joined.is_empty() && !self.own_elements.is_empty(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GenAction {
    Share(ServiceDraft),
    Subscribe(InterestDraft),
    ShareAddInfo { service: ElementId, facet: (SchemaDescriptor, Element) },
    SubscribeAddInfo(Interest),
    Join(String),
    Leave(String),
    Promote { federation: String, element: ElementId },
}

impl GenAction {
    pub fn kind(&self) -> ActionKind {
        match self {
            GenAction::Share(_) => ActionKind::Share,
            GenAction::Subscribe(_) => ActionKind::Subscribe,
            GenAction::ShareAddInfo { .. } => ActionKind::ShareAddInfo,
            GenAction::SubscribeAddInfo(_) => ActionKind::SubscribeAddInfo,
            GenAction::Join(_) => ActionKind::Join,
            GenAction::Leave(_) => ActionKind::Leave,
            GenAction::Promote { .. } => ActionKind::Promote,
        }
    }
}

fn schema(id: &str) -> SchemaDescriptor {
    SchemaDescriptor::open(id).expect("non-empty schema id")
}

pub fn gen_service<R: Rng>(rng: &mut R, spec: &WorkloadSpec) -> ServiceDraft {
    let method = rng.gen_range(0..spec.method_pool);
    let response_time = rng.gen_range(0..=spec.qos_max);
    let mut facets = vec![
        (
            schema(WSDL),
            Element::new("definitions").child(Element::new("operation").attr("name", format!("m{method}"))),
        ),
        (
            schema(QOS),
            Element::new("QoS").child(Element::new("responseTime").text(response_time.to_string())),
        ),
    ];
    let extras = rng.gen_range(0..=spec.max_facets - 2);
    for s in &EXTRA_SCHEMAS[..extras] {
        let root = match *s {
            "soaptest" => (0..rng.gen_range(0..20)).fold(Element::new("SoapTest"), |el, i| {
                el.child(Element::new("testcase").attr("id", i.to_string()))
            }),
            "sla" => Element::new("sla").child(Element::new("availability").text(format!("{:.3}", rng.gen_range(0.9..1.0)))),
            _ => Element::new("doc").child(Element::new("summary").text(format!("operation m{method}"))),
        };
        facets.push((schema(s), root));
    }
    ServiceDraft {
        name: format!("service-m{method}"),
        allow_add_info: rng.gen_bool(spec.allow_add_info_prob),
        method,
        response_time,
        facets,
    }
}

pub fn gen_interest<R: Rng>(rng: &mut R, spec: &WorkloadSpec) -> InterestDraft {
    InterestDraft {
        method: rng.gen_range(0..spec.method_pool),
        max_response_time: rng
            .gen_bool(spec.qos_constraint_prob)
            .then(|| rng.gen_range(1..=spec.qos_max)),
    }
}

fn pick<'a, T, R: Rng>(rng: &mut R, items: &'a [T]) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

/// Draws a legal action. Kinds that are illegal in the current state get
/// no weight, so a node outside every federation never leaves or promotes.
pub fn gen_action<R: Rng>(rng: &mut R, spec: &WorkloadSpec, view: &NodeView) -> GenAction {
    let weights: Vec<f64> = ActionKind::ALL
        .iter()
        .zip(spec.weights.as_array())
        .map(|(k, w)| if view.allows(*k) { w } else { 0.0 })
        .collect();
    let kind = match WeightedIndex::new(&weights) {
        Ok(dist) => ActionKind::ALL[dist.sample(rng)],
        Err(_) => ActionKind::Share,
    };
    match kind {
        ActionKind::Share => GenAction::Share(gen_service(rng, spec)),
        ActionKind::Subscribe => GenAction::Subscribe(gen_interest(rng, spec)),
        ActionKind::ShareAddInfo => {
            let service = pick(rng, &view.add_info_targets).clone();
            let completeness: f64 = rng.gen();
            let root = Element::new("observed").child(Element::new("completeness").text(format!("{completeness:.3}")));
            GenAction::ShareAddInfo {
                service,
                facet: (schema(OBSERVED), root),
            }
        }
        ActionKind::SubscribeAddInfo => {
            let service = pick(rng, &view.add_info_targets).clone();
            let threshold: f64 = rng.gen();
            let interest = Interest::add_info(service, OBSERVED, &format!("/observed/completeness >= {threshold:.3}"))
                .expect("valid path");
            GenAction::SubscribeAddInfo(interest)
        }
        ActionKind::Join => GenAction::Join(pick(rng, &view.joinable).clone()),
        ActionKind::Leave => GenAction::Leave(pick(rng, &view.leavable).clone()),
        ActionKind::Promote => GenAction::Promote {
            federation: pick(rng, &view.joined).clone(),
            element: pick(rng, &view.own_elements).clone(),
        },
    }
}

/// Drives one node's generated workload.
pub struct WorkloadActor {
    spec: Arc<WorkloadSpec>,
    federations: Arc<Vec<String>>,
    period: SimTime,
    pub actions: BTreeMap<ActionKind, u64>,
}

impl WorkloadActor {
    pub fn new(spec: Arc<WorkloadSpec>, federations: Arc<Vec<String>>, period: SimTime) -> Self {
        WorkloadActor {
            spec,
            federations,
            period,
            actions: BTreeMap::new(),
        }
    }

    pub fn act(&mut self, dm: &mut DeliveryManager, ctx: &mut Ctx<'_>) {
        ctx.set_timer(self.period, Timer::Workload);
        let view = NodeView::of(dm, &self.federations);
        let action = gen_action(ctx.rng(), &self.spec, &view);
        *self.actions.entry(action.kind()).or_default() += 1;
        let cmd = match action {
            GenAction::Share(draft) => match dm.create_service(ctx, &draft.name, draft.allow_add_info, draft.facets) {
                Ok(id) => ManagementCommand::Share(id),
                Err(_) => return,
            },
            GenAction::Subscribe(draft) => ManagementCommand::DeclareInterest(draft.to_interest()),
            GenAction::ShareAddInfo { service, facet } => match dm.create_add_info(ctx, &service, &facet.0, facet.1) {
                Ok(id) => ManagementCommand::ShareAddInfo(id),
                Err(_) => return,
            },
            GenAction::SubscribeAddInfo(interest) => ManagementCommand::DeclareInterest(interest),
            GenAction::Join(name) => ManagementCommand::JoinFederation(FedRef::Name(name)),
            GenAction::Leave(name) => ManagementCommand::LeaveFederation(FedRef::Name(name)),
            GenAction::Promote { federation, element } => ManagementCommand::Promote(FedRef::Name(federation), element),
        };
        let _ = dm.run_command(cmd, ctx);
    }
}

/// Empirical match rate of `interests` generated interests against
/// `services` generated services.
pub fn estimate_match_rate<R: Rng>(rng: &mut R, spec: &WorkloadSpec, services: usize, interests: usize) -> f64 {
    // Response times of the services offering each method, sorted.
    let mut by_method: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for _ in 0..services {
        let s = gen_service(rng, spec);
        by_method.entry(s.method).or_default().push(s.response_time);
    }
    for times in by_method.values_mut() {
        times.sort_unstable();
    }
    let mut hits = 0u64;
    for _ in 0..interests {
        let i = gen_interest(rng, spec);
        let Some(times) = by_method.get(&i.method) else {
            continue;
        };
        hits += match i.max_response_time {
            None => times.len(),
            Some(t) => times.partition_point(|&v| v <= t),
        } as u64;
    }
    hits as f64 / (services as f64 * interests as f64)
}
