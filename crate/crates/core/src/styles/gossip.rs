//! Epidemic dissemination over SCAMP partial views.
//!
//! Membership: a joiner's request takes a short random walk to an effective
//! contact, which forwards the new subscription to every member of its view
//! plus `c` extra copies. A node receiving a forwarded subscription keeps it
//! with probability `1 / (1 + |view|)` and otherwise passes it to a random
//! view member; nodes already holding the subject always pass it on.
//! Subscriptions are leased until the subject's next resubscription;
//! heartbeats detect crashed view members.
//!
//! Dissemination: a node pushes each promotion (or tombstone) it learns about
//! for the first time to its whole view. Tombstoned ids are never accepted
//! again. Once per heartbeat period a node also exchanges a digest with one
//! view member and receives whatever it missed.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use dire_model::{ElementId, NodeId};
use rand::Rng;
use serde::Deserialize;

use super::{CooperationStyle, Events, PromotedElement, StyleEvent, StyleKind};
use crate::directory::FederationInfo;
use crate::dispatcher::TrafficClass;
use crate::time::{de_duration, SimTime, DAY, HOUR, SECOND, WEEK};
use crate::world::{Ctx, NodeIdx, StyleTimer, Timer};

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GossipParams {
    /// Fault-tolerance parameter: extra subscription copies per join.
    pub c: u32,
    #[serde(deserialize_with = "de_duration")]
    pub heartbeat_period: SimTime,
    #[serde(deserialize_with = "de_duration")]
    pub resubscription_period: SimTime,
    /// Consecutive failed heartbeats before a view entry is evicted.
    pub max_missed_heartbeats: u32,
    /// Random-walk length used to pick the effective contact of a join.
    pub join_walk: u8,
    /// Extra copies forwarded on resubscription (joins use `c`).
    pub resub_extra_copies: u32,
    /// Forwarding steps after which a wandering subscription is kept.
    pub max_walk: u16,
    /// Slack added to subscription leases to cover in-flight renewals.
    #[serde(deserialize_with = "de_duration")]
    pub lease_grace: SimTime,
    #[serde(deserialize_with = "de_duration")]
    pub join_retry: SimTime,
    pub join_attempts: u32,
}

impl Default for GossipParams {
    fn default() -> Self {
        GossipParams {
            c: 2,
            heartbeat_period: DAY,
            resubscription_period: WEEK,
            max_missed_heartbeats: 3,
            join_walk: 3,
            resub_extra_copies: 0,
            max_walk: 200,
            lease_grace: HOUR,
            join_retry: 30 * SECOND,
            join_attempts: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GossipPacket {
    pub fed: ElementId,
    pub msg: GossipMsg,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GossipMsg {
    JoinRequest {
        subject: NodeIdx,
        expires_at: SimTime,
        ttl: u8,
    },
    /// From the effective contact to the joiner, which adds it to its view.
    Welcome { expires_at: SimTime },
    Subscription {
        subject: NodeIdx,
        expires_at: SimTime,
        hops: u16,
        resubscription: bool,
    },
    Resubscribe { expires_at: SimTime },
    Heartbeat,
    Push(Arc<PromotedElement>),
    Tombstone(ElementId),
    /// Anti-entropy digest: what the sender holds and has seen retracted.
    CatchUpRequest {
        known: Vec<ElementId>,
        tombstones: Vec<ElementId>,
    },
    CatchUp {
        live: Vec<Arc<PromotedElement>>,
        tombstones: Vec<ElementId>,
    },
    Leave,
    Dismiss,
    /// The receiver is not a member of the federation.
    NotMember,
}

impl GossipMsg {
    pub fn class(&self) -> TrafficClass {
        match self {
            GossipMsg::JoinRequest { .. } | GossipMsg::Welcome { .. } => TrafficClass::Join,
            GossipMsg::Subscription { resubscription, .. } => {
                if *resubscription {
                    TrafficClass::Resubscription
                } else {
                    TrafficClass::Join
                }
            }
            GossipMsg::Resubscribe { .. } => TrafficClass::Resubscription,
            GossipMsg::Heartbeat => TrafficClass::Heartbeat,
            GossipMsg::Push(_) | GossipMsg::CatchUp { .. } => TrafficClass::Payload,
            GossipMsg::Tombstone(_)
            | GossipMsg::CatchUpRequest { .. }
            | GossipMsg::Leave
            | GossipMsg::Dismiss
            | GossipMsg::NotMember => TrafficClass::Control,
        }
    }

    pub fn units(&self) -> u32 {
        match self {
            GossipMsg::CatchUp { live, .. } => live.len() as u32,
            GossipMsg::CatchUpRequest { .. } => 1,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ViewEntry {
    node: NodeIdx,
    expires_at: SimTime,
    missed: u32,
}

pub struct GossipStyle {
    fed: ElementId,
    contact: NodeId,
    params: GossipParams,
    view: Vec<ViewEntry>,
    own: BTreeMap<ElementId, Arc<PromotedElement>>,
    received: BTreeMap<ElementId, Arc<PromotedElement>>,
    tombstones: BTreeSet<ElementId>,
    joined: bool,
    active: bool,
    dismissed: bool,
    join_attempts: u32,
    next_resubscription: SimTime,
    /// Last time any packet of this federation arrived.
    last_heard: SimTime,
}

impl GossipStyle {
    pub fn new(info: &FederationInfo, params: GossipParams) -> Self {
        GossipStyle {
            fed: info.fed_id.clone(),
            contact: NodeId::new(info.join_params.get("contact").cloned().unwrap_or_default()),
            params,
            view: Vec::new(),
            own: BTreeMap::new(),
            received: BTreeMap::new(),
            tombstones: BTreeSet::new(),
            joined: false,
            active: false,
            dismissed: false,
            join_attempts: 0,
            next_resubscription: 0,
            last_heard: 0,
        }
    }

    /// Live partial view.
    pub fn view(&self, now: SimTime) -> Vec<NodeIdx> {
        self.view.iter().filter(|e| e.expires_at > now).map(|e| e.node).collect()
    }

    pub fn tombstones(&self) -> &BTreeSet<ElementId> {
        &self.tombstones
    }

    fn timer(&self, timer: StyleTimer) -> Timer {
        Timer::Style {
            fed: self.fed.clone(),
            timer,
        }
    }

    fn send(&self, ctx: &mut Ctx<'_>, to: NodeIdx, msg: GossipMsg) {
        let class = msg.class();
        let units = msg.units();
        let packet = Arc::new(GossipPacket {
            fed: self.fed.clone(),
            msg,
        });
        ctx.send_p2p(to, packet, class, units);
    }

    /// Sends one shared packet to several peers.
    fn send_all(&self, ctx: &mut Ctx<'_>, to: &[NodeIdx], msg: GossipMsg) {
        if to.is_empty() {
            return;
        }
        let class = msg.class();
        let units = msg.units();
        let packet = Arc::new(GossipPacket {
            fed: self.fed.clone(),
            msg,
        });
        for &peer in to {
            ctx.send_p2p(peer, packet.clone(), class, units);
        }
    }

    fn prune(&mut self, now: SimTime) {
        self.view.retain(|e| e.expires_at > now);
    }

    fn random_member(&mut self, ctx: &mut Ctx<'_>, exclude: Option<NodeIdx>) -> Option<NodeIdx> {
        self.prune(ctx.now());
        let candidates: Vec<NodeIdx> = self
            .view
            .iter()
            .map(|e| e.node)
            .filter(|&n| Some(n) != exclude)
            .collect();
        if candidates.is_empty() {
            None
        } else {
            let i = ctx.rng().gen_range(0..candidates.len());
            Some(candidates[i])
        }
    }

    fn own_expiry(&self) -> SimTime {
        self.next_resubscription + self.params.lease_grace
    }

    /// Adds or refreshes a view entry; returns whether it was new.
    fn keep(&mut self, node: NodeIdx, expires_at: SimTime) -> bool {
        match self.view.iter_mut().find(|e| e.node == node) {
            Some(e) => {
                e.expires_at = e.expires_at.max(expires_at);
                false
            }
            None => {
                self.view.push(ViewEntry {
                    node,
                    expires_at,
                    missed: 0,
                });
                true
            }
        }
    }

    fn in_view(&self, node: NodeIdx, now: SimTime) -> bool {
        self.view.iter().any(|e| e.node == node && e.expires_at > now)
    }

    fn start_maintenance(&mut self, ctx: &mut Ctx<'_>) {
        self.last_heard = ctx.now();
        let hb = ctx.rng().gen_range(1..=self.params.heartbeat_period);
        ctx.set_timer(hb, self.timer(StyleTimer::Heartbeat));
        let rs = ctx.rng().gen_range(1..=self.params.resubscription_period);
        self.next_resubscription = ctx.now() + rs;
        ctx.set_timer(rs, self.timer(StyleTimer::Resubscribe));
    }

    fn send_join_request(&mut self, ctx: &mut Ctx<'_>) -> bool {
        let contact = match ctx.lookup(&self.contact) {
            // The advertised contact rejoins through someone it knows.
            Some(c) if c == ctx.me() => self.random_member(ctx, None),
            other => other,
        };
        let Some(contact) = contact else {
            return false;
        };
        self.join_attempts += 1;
        let msg = GossipMsg::JoinRequest {
            subject: ctx.me(),
            expires_at: self.own_expiry(),
            ttl: self.params.join_walk,
        };
        self.send(ctx, contact, msg);
        ctx.set_timer(self.params.join_retry, self.timer(StyleTimer::JoinRetry));
        true
    }

    /// Acts as contact for `subject`: forwards the subscription to the whole
    /// view plus `extra` random copies.
    fn spread_subscription(&mut self, ctx: &mut Ctx<'_>, subject: NodeIdx, expires_at: SimTime, extra: u32, resub: bool) {
        let now = ctx.now();
        self.prune(now);
        let targets: Vec<NodeIdx> = self.view.iter().map(|e| e.node).collect();
        if targets.is_empty() {
            if subject != ctx.me() {
                self.keep(subject, expires_at);
            }
            return;
        }
        let msg = GossipMsg::Subscription {
            subject,
            expires_at,
            hops: 0,
            resubscription: resub,
        };
        self.send_all(ctx, &targets, msg.clone());
        for _ in 0..extra {
            let i = ctx.rng().gen_range(0..targets.len());
            self.send(ctx, targets[i], msg.clone());
        }
    }

    /// Sends `peer` a digest so it can return what this node is missing.
    fn request_catch_up(&mut self, ctx: &mut Ctx<'_>, peer: NodeIdx) {
        let msg = GossipMsg::CatchUpRequest {
            known: self.live(),
            tombstones: self.tombstones.iter().cloned().collect(),
        };
        self.send(ctx, peer, msg);
    }

    fn push(&mut self, ctx: &mut Ctx<'_>, msg: GossipMsg, except: Option<NodeIdx>) {
        self.prune(ctx.now());
        let targets: Vec<NodeIdx> = self.view.iter().map(|e| e.node).filter(|&n| Some(n) != except).collect();
        self.send_all(ctx, &targets, msg);
    }

    fn accept(&mut self, el: &Arc<PromotedElement>) -> bool {
        if self.tombstones.contains(&el.id) || self.own.contains_key(&el.id) || self.received.contains_key(&el.id) {
            return false;
        }
        self.received.insert(el.id.clone(), el.clone());
        true
    }

    fn bury(&mut self, id: &ElementId) -> Option<StyleEvent> {
        if !self.tombstones.insert(id.clone()) {
            return None;
        }
        let was_live = self.received.remove(id).is_some() | self.own.remove(id).is_some();
        was_live.then(|| StyleEvent::Removed(id.clone()))
    }

    fn handle_subscription(&mut self, ctx: &mut Ctx<'_>, subject: NodeIdx, expires_at: SimTime, hops: u16, resub: bool) {
        let now = ctx.now();
        let me = ctx.me();
        // A copy reaching a node that already holds the subject keeps
        // walking, so every copy ends up as exactly one view entry.
        // In small federations every node may already hold the subject:
        // such a copy is dropped once it has walked `max_walk` steps.
        let held = subject == me || self.in_view(subject, now);
        if hops >= self.params.max_walk {
            if !held {
                self.keep(subject, expires_at);
            }
            return;
        }
        if !held {
            self.prune(now);
            let p = 1.0 / (1.0 + self.view.len() as f64);
            if ctx.rng().gen_bool(p) {
                self.keep(subject, expires_at);
                return;
            }
        }
        if let Some(next) = self.random_member(ctx, Some(subject)) {
            let msg = GossipMsg::Subscription {
                subject,
                expires_at,
                hops: hops + 1,
                resubscription: resub,
            };
            self.send(ctx, next, msg);
        } else if subject != me {
            self.keep(subject, expires_at);
        }
    }
}

impl CooperationStyle for GossipStyle {
    fn kind(&self) -> StyleKind {
        StyleKind::Gossip
    }

    fn create(&mut self, ctx: &mut Ctx<'_>) -> Events {
        self.active = true;
        self.joined = true;
        self.start_maintenance(ctx);
        vec![StyleEvent::Joined]
    }

    fn join(&mut self, ctx: &mut Ctx<'_>) -> Events {
        self.active = true;
        self.start_maintenance(ctx);
        self.join_attempts = 0;
        if self.send_join_request(ctx) {
            Vec::new()
        } else {
            // The advertised contact is this node: it starts a fresh view.
            self.joined = true;
            vec![StyleEvent::Joined]
        }
    }

    fn leave(&mut self, ctx: &mut Ctx<'_>) {
        let own: Vec<ElementId> = self.own.keys().cloned().collect();
        for id in own {
            self.bury(&id);
            self.push(ctx, GossipMsg::Tombstone(id), None);
        }
        self.push(ctx, GossipMsg::Leave, None);
        self.view.clear();
        self.received.clear();
        self.active = false;
        self.joined = false;
    }

    fn close(&mut self, _ctx: &mut Ctx<'_>) {
        self.view.clear();
        self.received.clear();
        self.active = false;
        self.joined = false;
    }

    fn promote(&mut self, ctx: &mut Ctx<'_>, element: Arc<PromotedElement>) -> Events {
        if self.tombstones.contains(&element.id) {
            return Vec::new();
        }
        let fresh = !self.received.contains_key(&element.id);
        self.own.insert(element.id.clone(), element.clone());
        if fresh {
            self.push(ctx, GossipMsg::Push(element), None);
        }
        Vec::new()
    }

    fn retract(&mut self, ctx: &mut Ctx<'_>, id: &ElementId) -> Events {
        if !self.own.contains_key(id) {
            return Vec::new();
        }
        let events = self.bury(id).into_iter().collect();
        self.push(ctx, GossipMsg::Tombstone(id.clone()), None);
        events
    }

    fn dismiss(&mut self, ctx: &mut Ctx<'_>) {
        self.dismissed = true;
        self.push(ctx, GossipMsg::Dismiss, None);
    }

    fn on_p2p(&mut self, ctx: &mut Ctx<'_>, from: NodeIdx, msg: &GossipMsg) -> Events {
        if !self.active {
            return Vec::new();
        }
        let now = ctx.now();
        self.last_heard = now;
        if let Some(e) = self.view.iter_mut().find(|e| e.node == from) {
            e.missed = 0;
        }
        match msg {
            GossipMsg::JoinRequest {
                subject,
                expires_at,
                ttl,
            } => {
                let next = if *ttl > 0 {
                    self.random_member(ctx, Some(*subject))
                } else {
                    None
                };
                match next {
                    Some(peer) => {
                        let msg = GossipMsg::JoinRequest {
                            subject: *subject,
                            expires_at: *expires_at,
                            ttl: ttl - 1,
                        };
                        self.send(ctx, peer, msg);
                    }
                    None => {
                        let welcome = GossipMsg::Welcome {
                            expires_at: self.own_expiry(),
                        };
                        self.send(ctx, *subject, welcome);
                        self.spread_subscription(ctx, *subject, *expires_at, self.params.c, false);
                    }
                }
                Vec::new()
            }
            GossipMsg::Welcome { expires_at } => {
                self.keep(from, *expires_at);
                self.request_catch_up(ctx, from);
                if self.joined {
                    Vec::new()
                } else {
                    self.joined = true;
                    vec![StyleEvent::Joined]
                }
            }
            GossipMsg::Subscription {
                subject,
                expires_at,
                hops,
                resubscription,
            } => {
                self.handle_subscription(ctx, *subject, *expires_at, *hops, *resubscription);
                Vec::new()
            }
            GossipMsg::Resubscribe { expires_at } => {
                let extra = self.params.resub_extra_copies;
                self.spread_subscription(ctx, from, *expires_at, extra, true);
                Vec::new()
            }
            GossipMsg::Heartbeat => Vec::new(),
            GossipMsg::Push(el) => {
                if !self.accept(el) {
                    return Vec::new();
                }
                self.push(ctx, GossipMsg::Push(el.clone()), Some(from));
                vec![StyleEvent::Received(el.clone())]
            }
            GossipMsg::Tombstone(id) => {
                if self.tombstones.contains(id) {
                    return Vec::new();
                }
                let events = self.bury(id).into_iter().collect();
                self.push(ctx, GossipMsg::Tombstone(id.clone()), Some(from));
                events
            }
            GossipMsg::CatchUpRequest { known, tombstones } => {
                let events: Events = tombstones.iter().filter_map(|id| self.bury(id)).collect();
                let known: BTreeSet<&ElementId> = known.iter().collect();
                let live: Vec<Arc<PromotedElement>> = self
                    .own
                    .values()
                    .chain(self.received.values())
                    .filter(|el| !known.contains(&el.id))
                    .cloned()
                    .collect();
                let retracted: Vec<ElementId> = self.tombstones.iter().filter(|id| known.contains(id)).cloned().collect();
                // Pull in the other direction when the digest names
                // elements this node has never seen.
                let behind = known
                    .iter()
                    .any(|id| !self.tombstones.contains(*id) && !self.own.contains_key(*id) && !self.received.contains_key(*id));
                if behind {
                    self.request_catch_up(ctx, from);
                }
                if !live.is_empty() || !retracted.is_empty() {
                    self.send(
                        ctx,
                        from,
                        GossipMsg::CatchUp {
                            live,
                            tombstones: retracted,
                        },
                    );
                }
                events
            }
            GossipMsg::CatchUp { live, tombstones } => {
                let mut events: Events = tombstones.iter().filter_map(|id| self.bury(id)).collect();
                for el in live {
                    if self.accept(el) {
                        events.push(StyleEvent::Received(el.clone()));
                    }
                }
                events
            }
            GossipMsg::Leave | GossipMsg::NotMember => {
                self.view.retain(|e| e.node != from);
                Vec::new()
            }
            GossipMsg::Dismiss => {
                if self.dismissed {
                    return Vec::new();
                }
                self.dismissed = true;
                self.push(ctx, GossipMsg::Dismiss, Some(from));
                let _ = now;
                vec![StyleEvent::Dismissed]
            }
        }
    }

    fn on_send_failed(&mut self, _ctx: &mut Ctx<'_>, to: NodeIdx, msg: &GossipMsg) -> Events {
        if matches!(msg, GossipMsg::Heartbeat) {
            let limit = self.params.max_missed_heartbeats;
            if let Some(e) = self.view.iter_mut().find(|e| e.node == to) {
                e.missed += 1;
                if e.missed >= limit {
                    self.view.retain(|e| e.node != to);
                }
            }
        }
        Vec::new()
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: StyleTimer) -> Events {
        if !self.active {
            return Vec::new();
        }
        match timer {
            StyleTimer::Heartbeat => {
                let now = ctx.now();
                self.prune(now);
                // Isolated: nobody is left in the view, or nobody has had
                // this node in theirs for two heartbeat periods.
                let silent = now.saturating_sub(self.last_heard) > 2 * self.params.heartbeat_period;
                if self.joined && (self.view.is_empty() || silent) {
                    self.join_attempts = 0;
                    self.last_heard = now;
                    self.send_join_request(ctx);
                }
                self.push(ctx, GossipMsg::Heartbeat, None);
                // Anti-entropy: a node that was briefly unreachable would
                // otherwise miss pushes for good.
                if let Some(peer) = self.random_member(ctx, None) {
                    self.request_catch_up(ctx, peer);
                }
                ctx.set_timer(self.params.heartbeat_period, self.timer(StyleTimer::Heartbeat));
            }
            StyleTimer::Resubscribe => {
                self.next_resubscription = ctx.now() + self.params.resubscription_period;
                let expires_at = self.own_expiry();
                if let Some(peer) = self.random_member(ctx, None) {
                    self.send(ctx, peer, GossipMsg::Resubscribe { expires_at });
                }
                ctx.set_timer(self.params.resubscription_period, self.timer(StyleTimer::Resubscribe));
            }
            StyleTimer::JoinRetry => {
                if !self.joined && self.join_attempts < self.params.join_attempts {
                    self.send_join_request(ctx);
                }
            }
            StyleTimer::Renew(_) | StyleTimer::Sweep => {}
        }
        Vec::new()
    }

    fn live(&self) -> Vec<ElementId> {
        let mut ids: Vec<ElementId> = self.own.keys().chain(self.received.keys()).cloned().collect();
        ids.sort();
        ids.dedup();
        ids
    }

    fn own_promotions(&self) -> Vec<ElementId> {
        self.own.keys().cloned().collect()
    }

    fn peers(&self, now: SimTime) -> Vec<NodeIdx> {
        self.view(now)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testkit::{held, labels, run_until, FedKit};
    use super::*;
    use crate::directory::FedRef;
    use crate::time::{HOUR, MINUTE};

    fn views(sim: &crate::sim::Simulation, members: usize) -> Vec<Vec<NodeIdx>> {
        let now = sim.world.now();
        (0..members)
            .map(|i| {
                let dm = &sim.world.node_by_name(&format!("m{i}")).unwrap().dm;
                dm.membership(&FedRef::Name("fed".into())).unwrap().style().peers(now)
            })
            .collect()
    }

    #[test]
    fn every_member_ends_up_with_a_partial_view() {
        let members = 30;
        let mut sim = FedKit::new(StyleKind::Gossip, members, 0).build();
        run_until(&mut sim, HOUR);
        for (i, view) in views(&sim, members).iter().enumerate() {
            let me = sim.world.index_of(&format!("m{i}").as_str().into()).unwrap();
            assert!(!view.is_empty(), "m{i} has an empty view");
            assert!(!view.contains(&me), "m{i} lists itself");
            assert!(view.len() < members - 1, "m{i} knows everybody");
        }
    }

    #[test]
    fn promotions_spread_to_all_members() {
        let mut sim = FedKit::new(StyleKind::Gossip, 20, 3).build();
        run_until(&mut sim, HOUR);
        for i in 0..20 {
            assert_eq!(held(&sim.world, i), labels(&["s0", "s1", "s2"]), "member m{i}");
        }
    }

    #[test]
    fn retraction_spreads_as_a_tombstone() {
        let mut sim = FedKit::new(StyleKind::Gossip, 12, 2)
            .step(0, "30m", "op = \"retract\"\nfederation = \"fed\"\nelement = \"s0\"")
            .build();
        run_until(&mut sim, 30 * MINUTE + 5 * MINUTE);
        for i in 0..12 {
            assert_eq!(held(&sim.world, i), labels(&["s1"]), "member m{i}");
        }
    }
}
