use std::collections::BTreeMap;

use dire_model::query::{MatchStats, MessageMatcher};

use super::{Envelope, Filter};
use crate::topology::{BrokerIdx, Tree};

/// Dense client index, assigned by whoever owns the client names.
pub type ClientIdx = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubId(pub u64);

#[derive(Clone, Debug)]
struct SubEntry {
    client: ClientIdx,
    broker: BrokerIdx,
    filter: Filter,
}

/// What one broker does with one message.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepOutcome {
    /// Neighbouring brokers to forward to.
    pub forward: Vec<BrokerIdx>,
    /// Locally attached clients to deliver to (publisher excluded).
    pub local: Vec<ClientIdx>,
    pub stats: MatchStats,
}

/// Subscription tables of every broker.
///
/// Subscriptions (and unsubscriptions) propagate to all brokers at once, so
/// a single global table stands in for the per-broker copies; a broker only
/// consults the entries located in directions other than the one the
/// message came from, which is exactly what its per-neighbour tables hold.
#[derive(Clone, Debug)]
pub struct RoutingTables {
    tree: Tree,
    subs: Vec<Option<SubEntry>>,
    topic_subs: Vec<BTreeMap<String, Vec<SubId>>>,
    content_subs: Vec<Vec<SubId>>,
}

impl RoutingTables {
    pub fn new(tree: Tree) -> Self {
        let n = tree.len();
        RoutingTables {
            tree,
            subs: Vec::new(),
            topic_subs: vec![BTreeMap::new(); n],
            content_subs: vec![Vec::new(); n],
        }
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn subscribe(&mut self, client: ClientIdx, broker: BrokerIdx, filter: Filter) -> SubId {
        let id = SubId(self.subs.len() as u64);
        match filter.topic_name() {
            Some(t) => self.topic_subs[broker].entry(t.to_owned()).or_default().push(id),
            None => self.content_subs[broker].push(id),
        }
        self.subs.push(Some(SubEntry { client, broker, filter }));
        id
    }

    /// Removes a subscription; returns false if it was already gone.
    pub fn unsubscribe(&mut self, id: SubId) -> bool {
        let Some(entry) = self.subs.get_mut(id.0 as usize).and_then(Option::take) else {
            return false;
        };
        match entry.filter.topic_name() {
            Some(t) => {
                let list = self.topic_subs[entry.broker].get_mut(t).expect("indexed topic");
                list.retain(|s| *s != id);
                if list.is_empty() {
                    self.topic_subs[entry.broker].remove(t);
                }
            }
            None => self.content_subs[entry.broker].retain(|s| *s != id),
        }
        true
    }

    /// Drops every subscription of `client`.
    pub fn unsubscribe_client(&mut self, client: ClientIdx) -> usize {
        let ids: Vec<SubId> = self
            .subs
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Some(e) if e.client == client))
            .map(|(i, _)| SubId(i as u64))
            .collect();
        ids.iter().filter(|id| self.unsubscribe(**id)).count()
    }

    pub fn filter(&self, id: SubId) -> Option<&Filter> {
        self.subs.get(id.0 as usize)?.as_ref().map(|e| &e.filter)
    }

    pub fn subscriptions_per_broker(&self) -> Vec<usize> {
        let mut counts = vec![0; self.tree.len()];
        for e in self.subs.iter().flatten() {
            counts[e.broker] += 1;
        }
        counts
    }

    pub fn active_subscriptions(&self) -> usize {
        self.subs.iter().flatten().count()
    }

    fn entry(&self, id: SubId) -> &SubEntry {
        self.subs[id.0 as usize].as_ref().expect("indexed subscription is live")
    }

    fn sub_matches(&self, id: SubId, env: &Envelope, matcher: &mut MessageMatcher<'_>) -> bool {
        match &self.entry(id).filter {
            // Topic entries are indexed by topic, so reaching here is a hit.
            Filter::Topic(_) | Filter::DirectoryTopic => true,
            Filter::Content(interest) => env.kind.market_kind().is_some() && matcher.matches(interest),
        }
    }

    /// Clients at `broker`, other than `publisher`, with a matching
    /// subscription; `first_only` stops at the first one.
    fn matching_at(
        &self,
        broker: BrokerIdx,
        env: &Envelope,
        publisher: Option<ClientIdx>,
        matcher: &mut MessageMatcher<'_>,
        first_only: bool,
        out: &mut Vec<ClientIdx>,
    ) {
        let candidates: &[SubId] = match &env.topic {
            Some(t) => self.topic_subs[broker].get(t).map(Vec::as_slice).unwrap_or(&[]),
            None if env.kind.market_kind().is_some() => &self.content_subs[broker],
            None => &[],
        };
        for &id in candidates {
            let client = self.entry(id).client;
            if Some(client) == publisher || out.contains(&client) {
                continue;
            }
            if self.sub_matches(id, env, matcher) {
                out.push(client);
                if first_only {
                    return;
                }
            }
        }
    }

    /// Routing decision of `broker` for `env`, arriving from neighbour
    /// `from` (or from a local client when `None`).
    pub fn step(
        &self,
        broker: BrokerIdx,
        from: Option<BrokerIdx>,
        env: &Envelope,
        publisher: Option<ClientIdx>,
    ) -> StepOutcome {
        let mut matcher = market_matcher(env);
        let mut out = StepOutcome::default();
        self.matching_at(broker, env, publisher, &mut matcher, false, &mut out.local);
        out.local.sort_unstable();
        let mut scratch = Vec::new();
        for &nb in &self.tree.adjacency[broker] {
            if Some(nb) == from {
                continue;
            }
            let behind = (0..self.tree.len()).filter(|&x| x != broker && self.tree.next_hop(broker, x) == nb);
            for x in behind {
                scratch.clear();
                self.matching_at(x, env, publisher, &mut matcher, true, &mut scratch);
                if !scratch.is_empty() {
                    out.forward.push(nb);
                    break;
                }
            }
        }
        out.stats = matcher.stats;
        out
    }

    /// Global view: every client that should receive `env` when published
    /// by `publisher`, with the broker it is attached to.
    pub fn recipients(&self, env: &Envelope, publisher: Option<ClientIdx>) -> Vec<(ClientIdx, BrokerIdx)> {
        let mut matcher = market_matcher(env);
        let mut out = Vec::new();
        for b in 0..self.tree.len() {
            let mut here = Vec::new();
            self.matching_at(b, env, publisher, &mut matcher, false, &mut here);
            out.extend(here.into_iter().map(|c| (c, b)));
        }
        out.sort_unstable();
        out.dedup_by_key(|(c, _)| *c);
        out
    }

    /// Recipients located behind `nb` as seen from `broker`.
    pub fn recipients_behind(
        &self,
        broker: BrokerIdx,
        nb: BrokerIdx,
        env: &Envelope,
        publisher: Option<ClientIdx>,
    ) -> usize {
        self.recipients(env, publisher)
            .into_iter()
            .filter(|&(_, b)| b != broker && self.tree.next_hop(broker, b) == nb)
            .count()
    }
}

fn market_matcher(env: &Envelope) -> MessageMatcher<'_> {
    let kind = env.kind.market_kind().unwrap_or(dire_model::query::MarketKind::Service);
    MessageMatcher::new(kind, &env.body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatcher::PayloadKind;
    use crate::topology::{route_table_check, OverlayTopology};

    fn tables(topo: &OverlayTopology) -> RoutingTables {
        RoutingTables::new(route_table_check(topo).unwrap().0)
    }

    fn topic_env(topic: &str) -> Envelope {
        Envelope::new("p:1".parse().unwrap(), PayloadKind::Federation, Vec::new()).on_topic(topic)
    }

    #[test]
    fn unmatched_message_stays_at_origin() {
        let mut t = tables(&OverlayTopology::star(3));
        t.subscribe(1, 2, Filter::topic("other").unwrap());
        let step = t.step(1, None, &topic_env("PrimaryMarket"), Some(0));
        assert!(step.forward.is_empty() && step.local.is_empty());
    }

    #[test]
    fn forwards_only_toward_interested_subtrees() {
        let mut t = tables(&OverlayTopology::star(3));
        t.subscribe(7, 3, Filter::topic("PrimaryMarket").unwrap());
        let env = topic_env("PrimaryMarket");
        assert_eq!(t.step(1, None, &env, Some(0)).forward, vec![0]);
        assert_eq!(t.step(0, Some(1), &env, Some(0)).forward, vec![3]);
        assert_eq!(t.step(3, Some(0), &env, Some(0)).local, vec![7]);
    }

    #[test]
    fn publisher_never_matches_itself() {
        let mut t = tables(&OverlayTopology::star(1));
        t.subscribe(0, 1, Filter::topic("x").unwrap());
        let step = t.step(1, None, &topic_env("x"), Some(0));
        assert!(step.local.is_empty() && step.forward.is_empty());
        assert!(t.recipients(&topic_env("x"), Some(0)).is_empty());
    }

    #[test]
    fn unsubscribe_is_immediate_everywhere() {
        let mut t = tables(&OverlayTopology::star(2));
        let s = t.subscribe(5, 2, Filter::topic("x").unwrap());
        assert!(t.unsubscribe(s));
        assert!(!t.unsubscribe(s));
        assert!(t.step(1, None, &topic_env("x"), Some(0)).forward.is_empty());
        assert_eq!(t.active_subscriptions(), 0);
    }

    #[test]
    fn one_delivery_per_client_even_with_overlapping_filters() {
        let mut t = tables(&OverlayTopology::star(1));
        t.subscribe(4, 0, Filter::topic(crate::dispatcher::DIRECTORY_TOPIC).unwrap());
        t.subscribe(4, 0, Filter::DirectoryTopic);
        let env = topic_env(crate::dispatcher::DIRECTORY_TOPIC);
        assert_eq!(t.step(0, None, &env, Some(9)).local, vec![4]);
        assert_eq!(t.unsubscribe_client(4), 2);
    }
}
