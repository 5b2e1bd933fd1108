//! Discrete-event world: brokers, nodes, links and one ordered event queue.
//!
//! All randomness (latencies, losses, protocol choices) is drawn from one
//! seeded generator and events are ordered by `(time, sequence)`, so a run
//! is a pure function of its inputs.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::sync::Arc;

use dire_model::{ElementId, IdGenerator, KeyRing, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::directory::DirectoryService;
use crate::dispatcher::{
    ClientIdx, Completion, Envelope, Filter, PayloadKind, RoutingTables, SubId, TrafficClass,
};
use crate::manager::{DeliveryManager, ManagementCommand};
use crate::styles::gossip::GossipPacket;
use crate::styles::StyleKind;
use crate::time::{SimTime, SECOND};
use crate::topology::{route_table_check, BrokerIdx, OverlayTopology, TopologyError};

pub type NodeIdx = u32;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub latency_min: SimTime,
    pub latency_max: SimTime,
    /// Independent per-link, per-message loss probability.
    pub loss_rate: f64,
    pub reply_timeout: SimTime,
}

impl Default for NetworkParams {
    fn default() -> Self {
        NetworkParams {
            latency_min: 20,
            latency_max: 200,
            loss_rate: 0.0,
            reply_timeout: 10 * SECOND,
        }
    }
}

/// A timed link-down interval.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OutageTarget {
    /// The node's attachment link and all its point-to-point channels.
    Node(NodeIdx),
    /// An inter-broker link (either direction).
    Link(BrokerIdx, BrokerIdx),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outage {
    pub target: OutageTarget,
    pub from: SimTime,
    pub until: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StyleTimer {
    Renew(ElementId),
    Sweep,
    Heartbeat,
    Resubscribe,
    JoinRetry,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Timer {
    Workload,
    MarketRenew(ElementId),
    Purge,
    FederationRenew(ElementId),
    MemberCheck(ElementId),
    DirectorySweep,
    Style { fed: ElementId, timer: StyleTimer },
}

/// Who is waiting for the replies to a request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RequestOwner {
    Manager,
    Style(ElementId),
}

/// Scripted or generated input to a node.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Command(ManagementCommand),
    Script(crate::sim::ScriptAction),
    Crash,
    Recover,
}

#[derive(Clone, Debug)]
pub enum NodeEvent {
    Deliver(Envelope),
    Reply { owner: RequestOwner, env: Envelope },
    RepliesDone {
        owner: RequestOwner,
        request: ElementId,
        completion: Completion,
        received: usize,
    },
    P2p { from: NodeIdx, packet: Arc<GossipPacket> },
    SendFailed { to: NodeIdx, packet: Arc<GossipPacket> },
    Timer(Timer),
    Action(Action),
}

#[derive(Clone, Debug)]
enum Hop {
    Broker(BrokerIdx),
    Client(NodeIdx),
}

#[derive(Clone, Debug)]
enum Event {
    BrokerArrive {
        broker: BrokerIdx,
        from: Hop,
        env: Envelope,
        publisher: NodeIdx,
    },
    NodeDeliver {
        node: NodeIdx,
        env: Envelope,
    },
    P2p {
        to: NodeIdx,
        from: NodeIdx,
        packet: Arc<GossipPacket>,
        class: TrafficClass,
        units: u32,
    },
    Node {
        node: NodeIdx,
        event: NodeEvent,
    },
    ReplyTimeout {
        request: ElementId,
    },
}

struct Scheduled {
    at: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Directed send accounting for one traffic class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChannelCounts {
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
    /// Messages nobody subscribed to, dropped at the publisher's broker.
    pub discarded: u64,
}

/// Per-message hop record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HopRecord {
    pub brokers_visited: u32,
    pub link_hops: u32,
    /// Clients the message was addressed to when published.
    pub receivers: u32,
}

/// Per-federation payload accounting.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FedTraffic {
    pub name: String,
    pub style: Option<StyleKind>,
    pub messages: u64,
    pub events: u64,
}

/// Dissemination record of one promotion.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReachRecord {
    pub fed: Option<ElementId>,
    /// Members other than the promoter at promotion time.
    pub audience: BTreeSet<NodeIdx>,
    pub reached: BTreeSet<NodeIdx>,
}

/// Raw counters collected while a world runs.
#[derive(Clone, Debug, Default)]
pub struct Metrics {
    pub channels: BTreeMap<TrafficClass, ChannelCounts>,
    pub hops: BTreeMap<ElementId, HopRecord>,
    pub feds: BTreeMap<ElementId, FedTraffic>,
    pub latencies: BTreeMap<StyleKind, Vec<SimTime>>,
    pub reach: BTreeMap<ElementId, ReachRecord>,
    pub rejected_unauthorized: u64,
    pub command_errors: BTreeMap<String, u64>,
    pub commands: BTreeMap<String, u64>,
    pub match_stats: dire_model::query::MatchStats,
    pub broker_steps: u64,
    pub market_positive: u64,
    pub market_negative: u64,
}

impl Metrics {
    fn channel(&mut self, class: TrafficClass) -> &mut ChannelCounts {
        self.channels.entry(class).or_default()
    }
}

struct PendingRequest {
    requester: NodeIdx,
    owner: RequestOwner,
    expected: usize,
    received: usize,
    done: bool,
}

/// Everything in the world except the nodes themselves.
pub struct Core {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    rng: ChaCha8Rng,
    pub net: NetworkParams,
    outages: Vec<Outage>,
    topology: OverlayTopology,
    routing: RoutingTables,
    attach: Vec<BrokerIdx>,
    alive: Vec<bool>,
    node_ids: Vec<NodeId>,
    index: BTreeMap<NodeId, NodeIdx>,
    fifo: HashMap<(u64, u64), SimTime>,
    reply_routes: Vec<HashMap<ElementId, Hop>>,
    pending: HashMap<ElementId, PendingRequest>,
    fed_members: BTreeMap<ElementId, BTreeSet<NodeIdx>>,
    keys: KeyRing,
    ids: Vec<IdGenerator>,
    labels: BTreeMap<String, ElementId>,
    pub metrics: Metrics,
}

impl Core {
    fn schedule(&mut self, at: SimTime, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            at,
            seq: self.seq,
            event,
        }));
    }

    fn latency(&mut self) -> SimTime {
        if self.net.latency_max <= self.net.latency_min {
            self.net.latency_min
        } else {
            self.rng.gen_range(self.net.latency_min..=self.net.latency_max)
        }
    }

    fn lost(&mut self) -> bool {
        self.net.loss_rate > 0.0 && self.rng.gen_bool(self.net.loss_rate)
    }

    fn node_down(&self, node: NodeIdx) -> bool {
        self.outages
            .iter()
            .any(|o| o.target == OutageTarget::Node(node) && (o.from..o.until).contains(&self.now))
    }

    fn link_down(&self, a: BrokerIdx, b: BrokerIdx) -> bool {
        self.outages.iter().any(|o| {
            (o.target == OutageTarget::Link(a, b) || o.target == OutageTarget::Link(b, a))
                && (o.from..o.until).contains(&self.now)
        })
    }

    /// Arrival time on a FIFO channel identified by `key`, or `None` if the
    /// message is dropped.
    fn transmit(&mut self, key: (u64, u64), down: bool) -> Option<SimTime> {
        let lat = self.latency();
        if down || self.lost() {
            return None;
        }
        let last = self.fifo.entry(key).or_insert(0);
        let at = (self.now + lat).max(*last);
        *last = at;
        Some(at)
    }

    fn broker_key(b: BrokerIdx) -> u64 {
        b as u64
    }

    fn client_key(n: NodeIdx) -> u64 {
        (1u64 << 32) | n as u64
    }

    /// Receivers of `env` from `publisher`, as a lossless network would
    /// deliver it.
    fn intended(&self, env: &Envelope, publisher: NodeIdx) -> usize {
        if env.kind == PayloadKind::Reply {
            1
        } else {
            self.routing.recipients(env, Some(publisher as ClientIdx)).len()
        }
    }

    fn count_lost(&mut self, class: TrafficClass, units: u32, receivers: usize) {
        self.metrics.channel(class).lost += units as u64 * receivers as u64;
    }

    fn publish_from(&mut self, node: NodeIdx, mut env: Envelope) {
        env.hop_trace.clear();
        let receivers = self.intended(&env, node);
        let units = env.units as u64;
        let ch = self.metrics.channel(env.class);
        if receivers == 0 {
            ch.discarded += units;
        } else {
            ch.sent += units * receivers as u64;
        }
        if env.kind != PayloadKind::Reply {
            self.metrics.hops.entry(env.msg_id.clone()).or_default().receivers = receivers as u32;
        }
        let broker = self.attach[node as usize];
        let down = self.node_down(node);
        match self.transmit((Self::client_key(node), Self::broker_key(broker)), down) {
            Some(at) => self.schedule(
                at,
                Event::BrokerArrive {
                    broker,
                    from: Hop::Client(node),
                    env,
                    publisher: node,
                },
            ),
            None => self.count_lost(env.class, env.units, receivers),
        }
    }

    fn broker_arrive(&mut self, broker: BrokerIdx, from: Hop, mut env: Envelope, publisher: NodeIdx) {
        env.hop_trace.push(broker as u32);
        if env.kind == PayloadKind::Reply {
            let next = env
                .reply_to
                .as_ref()
                .and_then(|req| self.reply_routes[broker].get(req).cloned());
            match next {
                Some(Hop::Broker(b)) => self.forward_link(broker, b, env, publisher, 1),
                Some(Hop::Client(c)) => self.forward_client(broker, c, env),
                None => self.count_lost(env.class, env.units, 1),
            }
            return;
        }
        if let Some(rec) = self.metrics.hops.get_mut(&env.msg_id) {
            rec.brokers_visited += 1;
            if matches!(from, Hop::Broker(_)) {
                rec.link_hops += 1;
            }
        }
        if env.repliable {
            let routes = &mut self.reply_routes[broker];
            if routes.len() > 50_000 {
                routes.clear();
            }
            routes.insert(env.msg_id.clone(), from.clone());
        }
        let came_from = match from {
            Hop::Broker(b) => Some(b),
            Hop::Client(_) => None,
        };
        let step = self.routing.step(broker, came_from, &env, Some(publisher as ClientIdx));
        self.metrics.broker_steps += 1;
        self.metrics.match_stats.add(&step.stats);
        for c in step.local {
            self.forward_client(broker, c as NodeIdx, env.clone());
        }
        for nb in step.forward {
            let receivers = if self.net.loss_rate > 0.0 || !self.outages.is_empty() {
                self.routing.recipients_behind(broker, nb, &env, Some(publisher as ClientIdx))
            } else {
                0
            };
            self.forward_link(broker, nb, env.clone(), publisher, receivers);
        }
    }

    fn forward_link(&mut self, from: BrokerIdx, to: BrokerIdx, env: Envelope, publisher: NodeIdx, receivers: usize) {
        let down = self.link_down(from, to);
        match self.transmit((Self::broker_key(from), Self::broker_key(to)), down) {
            Some(at) => self.schedule(
                at,
                Event::BrokerArrive {
                    broker: to,
                    from: Hop::Broker(from),
                    env,
                    publisher,
                },
            ),
            None => self.count_lost(env.class, env.units, receivers),
        }
    }

    fn forward_client(&mut self, broker: BrokerIdx, node: NodeIdx, env: Envelope) {
        let down = self.node_down(node);
        match self.transmit((Self::broker_key(broker), Self::client_key(node)), down) {
            Some(at) => self.schedule(at, Event::NodeDeliver { node, env }),
            None => self.count_lost(env.class, env.units, 1),
        }
    }

    fn send_p2p(&mut self, from: NodeIdx, to: NodeIdx, packet: Arc<GossipPacket>, class: TrafficClass, units: u32) {
        self.metrics.channel(class).sent += units as u64;
        let down = self.node_down(from) || self.node_down(to);
        match self.transmit((Self::client_key(from), Self::client_key(to)), down) {
            Some(at) => self.schedule(
                at,
                Event::P2p {
                    to,
                    from,
                    packet,
                    class,
                    units,
                },
            ),
            None => self.count_lost(class, units, 1),
        }
    }
}

/// A node's handle on the world while it handles one event.
pub struct Ctx<'a> {
    core: &'a mut Core,
    me: NodeIdx,
}

impl Ctx<'_> {
    pub fn now(&self) -> SimTime {
        self.core.now
    }

    pub fn me(&self) -> NodeIdx {
        self.me
    }

    pub fn node_id(&self, idx: NodeIdx) -> &NodeId {
        &self.core.node_ids[idx as usize]
    }

    pub fn lookup(&self, node: &NodeId) -> Option<NodeIdx> {
        self.core.index.get(node).copied()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.core.rng
    }

    pub fn keys(&self) -> &KeyRing {
        &self.core.keys
    }

    pub fn metrics(&mut self) -> &mut Metrics {
        &mut self.core.metrics
    }

    pub fn subscribe(&mut self, filter: Filter) -> SubId {
        let broker = self.core.attach[self.me as usize];
        self.core.routing.subscribe(self.me as ClientIdx, broker, filter)
    }

    pub fn unsubscribe(&mut self, sub: SubId) -> bool {
        self.core.routing.unsubscribe(sub)
    }

    /// Publishes a fire-and-forget message.
    pub fn publish(&mut self, env: Envelope) {
        debug_assert!(env.validate().is_ok());
        self.core.publish_from(self.me, env);
    }

    /// Publishes a repliable message. Replies and the completion signal come
    /// back as [`NodeEvent::Reply`] and [`NodeEvent::RepliesDone`].
    pub fn publish_request(&mut self, mut env: Envelope, owner: RequestOwner) {
        env.repliable = true;
        let expected = self.core.intended(&env, self.me);
        let request = env.msg_id.clone();
        self.core.pending.insert(
            request.clone(),
            PendingRequest {
                requester: self.me,
                owner: owner.clone(),
                expected,
                received: 0,
                done: expected == 0,
            },
        );
        if expected == 0 {
            let now = self.core.now;
            self.core.schedule(
                now,
                Event::Node {
                    node: self.me,
                    event: NodeEvent::RepliesDone {
                        owner,
                        request: request.clone(),
                        completion: Completion::AllReceived,
                        received: 0,
                    },
                },
            );
        } else {
            let at = self.core.now + self.core.net.reply_timeout;
            self.core.schedule(at, Event::ReplyTimeout { request });
        }
        self.core.publish_from(self.me, env);
    }

    /// Sends a reply back along the path `request` travelled.
    pub fn reply(&mut self, request: &Envelope, msg_id: ElementId, body: Vec<u8>, units: u32) {
        let reply = Envelope::reply(msg_id, request, body).with_units(units);
        self.core.publish_from(self.me, reply);
    }

    /// Like [`Ctx::reply`], accounting the reply under `class`.
    pub fn reply_with_class(
        &mut self,
        request: &Envelope,
        msg_id: ElementId,
        body: Vec<u8>,
        units: u32,
        class: TrafficClass,
    ) {
        let reply = Envelope::reply(msg_id, request, body).with_units(units).with_class(class);
        self.core.publish_from(self.me, reply);
    }

    /// Resolves a scenario label to the element it names.
    pub fn label(&self, name: &str) -> Option<&ElementId> {
        self.core.labels.get(name)
    }

    pub fn set_label(&mut self, name: &str, id: ElementId) {
        self.core.labels.insert(name.to_owned(), id);
    }

    /// A fresh element or message id minted by this node.
    pub fn next_id(&mut self) -> ElementId {
        self.core.ids[self.me as usize].next_id()
    }

    pub fn send_p2p(&mut self, to: NodeIdx, packet: Arc<GossipPacket>, class: TrafficClass, units: u32) {
        self.core.send_p2p(self.me, to, packet, class, units);
    }

    pub fn set_timer(&mut self, delay: SimTime, timer: Timer) {
        let at = self.core.now + delay;
        self.core.schedule(
            at,
            Event::Node {
                node: self.me,
                event: NodeEvent::Timer(timer),
            },
        );
    }

    /// Records federation membership changes, for reach statistics.
    pub fn set_member(&mut self, fed: &ElementId, member: bool) {
        let set = self.core.fed_members.entry(fed.clone()).or_default();
        if member {
            set.insert(self.me);
        } else {
            set.remove(&self.me);
        }
    }

    pub fn fed_info(&mut self, fed: &ElementId, name: &str, style: StyleKind) {
        let t = self.core.metrics.feds.entry(fed.clone()).or_default();
        t.name = name.to_owned();
        t.style = Some(style);
    }

    /// Counts a promotion event and snapshots its audience.
    pub fn promotion_started(&mut self, fed: &ElementId, element: &ElementId) {
        self.core.metrics.feds.entry(fed.clone()).or_default().events += 1;
        let audience: BTreeSet<NodeIdx> = self
            .core
            .fed_members
            .get(fed)
            .map(|m| m.iter().copied().filter(|&n| n != self.me).collect())
            .unwrap_or_default();
        self.core.metrics.reach.insert(
            element.clone(),
            ReachRecord {
                fed: Some(fed.clone()),
                audience,
                reached: BTreeSet::new(),
            },
        );
    }

    pub fn element_reached(&mut self, element: &ElementId) {
        if let Some(r) = self.core.metrics.reach.get_mut(element) {
            r.reached.insert(self.me);
        }
    }

    pub fn record_latency(&mut self, style: StyleKind, latency: SimTime) {
        self.core.metrics.latencies.entry(style).or_default().push(latency);
    }
}

pub struct Node {
    pub id: NodeId,
    pub idx: NodeIdx,
    pub dm: DeliveryManager,
    pub directory: Option<DirectoryService>,
    pub workload: Option<crate::sim::workload::WorkloadActor>,
}

impl Node {
    fn handle(&mut self, event: NodeEvent, ctx: &mut Ctx<'_>) {
        match event {
            NodeEvent::Deliver(env) if env.kind == PayloadKind::Directory => {
                if let Some(dir) = &mut self.directory {
                    dir.on_deliver(&env, ctx);
                }
            }
            NodeEvent::Timer(Timer::DirectorySweep) => {
                if let Some(dir) = &mut self.directory {
                    dir.on_sweep(ctx);
                }
            }
            NodeEvent::Timer(Timer::Workload) => {
                if let Some(w) = &mut self.workload {
                    w.act(&mut self.dm, ctx);
                }
            }
            NodeEvent::Action(Action::Script(script)) => {
                crate::sim::run_script(self, script, ctx);
            }
            other => self.dm.handle(other, ctx),
        }
    }
}

pub struct World {
    pub core: Core,
    pub nodes: Vec<Node>,
}

impl World {
    pub fn new(topology: OverlayTopology, net: NetworkParams, seed: u64) -> Result<Self, TopologyError> {
        let (tree, _) = route_table_check(&topology)?;
        let brokers = tree.len();
        Ok(World {
            core: Core {
                now: 0,
                seq: 0,
                queue: BinaryHeap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                net,
                outages: Vec::new(),
                topology,
                routing: RoutingTables::new(tree),
                attach: Vec::new(),
                alive: Vec::new(),
                node_ids: Vec::new(),
                index: BTreeMap::new(),
                fifo: HashMap::new(),
                reply_routes: vec![HashMap::new(); brokers],
                pending: HashMap::new(),
                fed_members: BTreeMap::new(),
                keys: KeyRing::new(),
                ids: Vec::new(),
                labels: BTreeMap::new(),
                metrics: Metrics::default(),
            },
            nodes: Vec::new(),
        })
    }

    pub fn now(&self) -> SimTime {
        self.core.now
    }

    pub fn topology(&self) -> &OverlayTopology {
        &self.core.topology
    }

    pub fn routing(&self) -> &RoutingTables {
        &self.core.routing
    }

    /// Adds a node attached to the broker named in the topology (or to
    /// `broker` when given).
    pub fn add_node(
        &mut self,
        id: NodeId,
        broker: Option<&str>,
        dm: DeliveryManager,
        directory: bool,
    ) -> Result<NodeIdx, TopologyError> {
        let b = match broker {
            Some(name) => self.core.topology.index(name)?,
            None => self
                .core
                .topology
                .broker_of(&id)
                .ok_or_else(|| TopologyError::UnknownBroker(format!("no attachment for {id}")))?,
        };
        let idx = self.nodes.len() as NodeIdx;
        self.core.topology.attachments.insert(id.clone(), b);
        self.core.attach.push(b);
        self.core.alive.push(true);
        self.core.node_ids.push(id.clone());
        self.core.index.insert(id.clone(), idx);
        self.core.keys.register(id.clone(), 0x5eed ^ idx as u64);
        self.core.ids.push(IdGenerator::new(id.clone()));
        self.nodes.push(Node {
            id,
            idx,
            dm,
            directory: None,
            workload: None,
        });
        if directory {
            let mut ctx = Ctx {
                core: &mut self.core,
                me: idx,
            };
            let node = &mut self.nodes[idx as usize];
            node.directory = Some(DirectoryService::start(&node.id, &mut ctx));
        }
        let mut ctx = Ctx {
            core: &mut self.core,
            me: idx,
        };
        self.nodes[idx as usize].dm.start(&mut ctx);
        Ok(idx)
    }

    pub fn label(&self, name: &str) -> Option<&ElementId> {
        self.core.labels.get(name)
    }

    pub fn index_of(&self, id: &NodeId) -> Option<NodeIdx> {
        self.core.index.get(id).copied()
    }

    pub fn node(&self, idx: NodeIdx) -> &Node {
        &self.nodes[idx as usize]
    }

    pub fn node_mut(&mut self, idx: NodeIdx) -> &mut Node {
        &mut self.nodes[idx as usize]
    }

    pub fn node_by_name(&self, id: &str) -> Option<&Node> {
        self.index_of(&NodeId::new(id)).map(|i| self.node(i))
    }

    pub fn is_alive(&self, idx: NodeIdx) -> bool {
        self.core.alive[idx as usize]
    }

    pub fn add_outage(&mut self, outage: Outage) {
        self.core.outages.push(outage);
    }

    pub fn keys(&self) -> &KeyRing {
        &self.core.keys
    }

    pub fn metrics(&self) -> &Metrics {
        &self.core.metrics
    }

    pub fn members(&self, fed: &ElementId) -> BTreeSet<NodeIdx> {
        self.core.fed_members.get(fed).cloned().unwrap_or_default()
    }

    pub fn schedule(&mut self, at: SimTime, node: NodeIdx, action: Action) {
        self.core.schedule(
            at,
            Event::Node {
                node,
                event: NodeEvent::Action(action),
            },
        );
    }

    pub fn set_timer(&mut self, node: NodeIdx, at: SimTime, timer: Timer) {
        self.core.schedule(
            at,
            Event::Node {
                node,
                event: NodeEvent::Timer(timer),
            },
        );
    }

    /// Runs `f` against a node as if it were handling an event now.
    pub fn with_node<R>(&mut self, idx: NodeIdx, f: impl FnOnce(&mut Node, &mut Ctx<'_>) -> R) -> R {
        let mut ctx = Ctx {
            core: &mut self.core,
            me: idx,
        };
        f(&mut self.nodes[idx as usize], &mut ctx)
    }

    /// Processes every event scheduled strictly before `end`.
    pub fn run_until(&mut self, end: SimTime) {
        while let Some(Reverse(next)) = self.core.queue.peek() {
            if next.at >= end {
                break;
            }
            let Reverse(Scheduled { at, event, .. }) = self.core.queue.pop().expect("peeked");
            self.core.now = at;
            self.dispatch(event);
        }
        self.core.now = self.core.now.max(end);
    }

    fn dispatch(&mut self, event: Event) {
        match event {
            Event::BrokerArrive {
                broker,
                from,
                env,
                publisher,
            } => self.core.broker_arrive(broker, from, env, publisher),
            Event::NodeDeliver { node, env } => {
                if !self.core.alive[node as usize] {
                    self.core.count_lost(env.class, env.units, 1);
                    return;
                }
                self.core.metrics.channel(env.class).delivered += env.units as u64;
                if env.class == TrafficClass::Payload {
                    if let Some(fed) = &env.fed {
                        self.core.metrics.feds.entry(fed.clone()).or_default().messages += env.units as u64;
                    }
                    match env.kind {
                        PayloadKind::Service | PayloadKind::AddInfo => self.core.metrics.market_positive += 1,
                        _ => {}
                    }
                }
                let event = match env.kind {
                    PayloadKind::Reply => {
                        let Some(req) = env.reply_to.as_ref().and_then(|r| self.core.pending.get_mut(r)) else {
                            return;
                        };
                        if req.requester != node || req.done {
                            return;
                        }
                        req.received += 1;
                        let owner = req.owner.clone();
                        if req.received >= req.expected {
                            req.done = true;
                            let request = env.reply_to.clone().expect("reply has request id");
                            let received = req.received;
                            let now = self.core.now;
                            self.core.schedule(
                                now,
                                Event::Node {
                                    node,
                                    event: NodeEvent::RepliesDone {
                                        owner: owner.clone(),
                                        request,
                                        completion: Completion::AllReceived,
                                        received,
                                    },
                                },
                            );
                        }
                        NodeEvent::Reply { owner, env }
                    }
                    _ => NodeEvent::Deliver(env),
                };
                self.deliver(node, event);
            }
            Event::P2p {
                to,
                from,
                packet,
                class,
                units,
            } => {
                if !self.core.alive[to as usize] {
                    self.core.count_lost(class, units, 1);
                    // The sender notices the broken channel after a round trip.
                    let back = self.core.latency();
                    let at = self.core.now + back;
                    self.core.schedule(
                        at,
                        Event::Node {
                            node: from,
                            event: NodeEvent::SendFailed { to, packet },
                        },
                    );
                    return;
                }
                self.core.metrics.channel(class).delivered += units as u64;
                if class == TrafficClass::Payload {
                    self.core.metrics.feds.entry(packet.fed.clone()).or_default().messages += units as u64;
                }
                self.deliver(to, NodeEvent::P2p { from, packet });
            }
            Event::Node { node, event } => {
                match &event {
                    NodeEvent::Action(Action::Crash) => {
                        self.core.alive[node as usize] = false;
                        return;
                    }
                    NodeEvent::Action(Action::Recover) => {
                        self.core.alive[node as usize] = true;
                        return;
                    }
                    _ => {}
                }
                if self.core.alive[node as usize] {
                    self.deliver(node, event);
                }
            }
            Event::ReplyTimeout { request } => {
                let Some(req) = self.core.pending.remove(&request) else {
                    return;
                };
                if req.done {
                    return;
                }
                let node = req.requester;
                if self.core.alive[node as usize] {
                    self.deliver(
                        node,
                        NodeEvent::RepliesDone {
                            owner: req.owner,
                            request,
                            completion: Completion::TimedOut,
                            received: req.received,
                        },
                    );
                }
            }
        }
    }

    fn deliver(&mut self, node: NodeIdx, event: NodeEvent) {
        let mut ctx = Ctx {
            core: &mut self.core,
            me: node,
        };
        self.nodes[node as usize].handle(event, &mut ctx);
    }

    /// Number of events still queued.
    pub fn pending_events(&self) -> usize {
        self.core.queue.len()
    }
}
