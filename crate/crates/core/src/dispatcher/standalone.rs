//! Synchronous, lossless dispatcher: the routing algorithm without a
//! network clock. Useful for checking routing decisions in isolation; the
//! simulator drives the same [`RoutingTables`] hop by hop.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use dire_model::query::MatchStats;
use dire_model::{IdGenerator, NodeId};

use super::routing::{ClientIdx, RoutingTables, SubId};
use super::{DispatchError, Envelope, Filter};
use crate::topology::{route_table_check, BrokerIdx, OverlayTopology, RouteDiagnostics, TopologyError};

#[derive(Clone, Debug, PartialEq)]
pub struct Delivery {
    pub client: NodeId,
    /// Brokers from the publisher's broker to the recipient's, inclusive.
    pub path: Vec<String>,
    pub envelope: Envelope,
}

impl Delivery {
    pub fn inter_broker_hops(&self) -> usize {
        self.path.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeliveryTrace {
    pub deliveries: Vec<Delivery>,
    /// Link traversals between brokers, over the whole dissemination tree.
    pub inter_broker_hops: usize,
    /// Distinct brokers that handled the message.
    pub brokers_visited: usize,
    /// The message matched nothing and stopped at the publisher's broker.
    pub discarded: bool,
    pub stats: MatchStats,
    /// Per-broker document decodes (one entry per broker visited).
    pub parses_per_broker: Vec<u64>,
}

impl DeliveryTrace {
    pub fn recipients(&self) -> Vec<&NodeId> {
        self.deliveries.iter().map(|d| &d.client).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Completion {
    AllReceived,
    TimedOut,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplyRecord {
    pub from: NodeId,
    pub envelope: Envelope,
    /// Brokers the reply went through, from the replier's broker back to
    /// the requester's.
    pub path: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplyOutcome {
    pub trace: DeliveryTrace,
    pub expected: usize,
    pub replies: Vec<ReplyRecord>,
    pub completion: Completion,
}

pub struct Dispatcher {
    topo: OverlayTopology,
    tables: RoutingTables,
    clients: BTreeMap<NodeId, ClientIdx>,
    names: Vec<NodeId>,
    reply_ids: IdGenerator,
}

impl Dispatcher {
    pub fn new(topo: OverlayTopology) -> Result<Self, TopologyError> {
        let (tree, _) = route_table_check(&topo)?;
        let names: Vec<NodeId> = topo.attachments.keys().cloned().collect();
        let clients = names.iter().enumerate().map(|(i, n)| (n.clone(), i as ClientIdx)).collect();
        Ok(Dispatcher {
            topo,
            tables: RoutingTables::new(tree),
            clients,
            names,
            reply_ids: IdGenerator::new(NodeId::new("dispatcher")),
        })
    }

    pub fn topology(&self) -> &OverlayTopology {
        &self.topo
    }

    fn client(&self, node: &NodeId) -> Result<(ClientIdx, BrokerIdx), DispatchError> {
        let idx = self
            .clients
            .get(node)
            .copied()
            .ok_or_else(|| DispatchError::DetachedClient(node.to_string()))?;
        Ok((idx, self.topo.attachments[node]))
    }

    pub fn subscribe(&mut self, client: &NodeId, filter: Filter) -> Result<SubId, DispatchError> {
        if let Filter::Topic(t) = &filter {
            if t.is_empty() {
                return Err(DispatchError::EmptyTopic);
            }
        }
        let (idx, broker) = self.client(client)?;
        Ok(self.tables.subscribe(idx, broker, filter))
    }

    pub fn unsubscribe(&mut self, sub: SubId) -> bool {
        self.tables.unsubscribe(sub)
    }

    pub fn route_table_check(&self) -> RouteDiagnostics {
        let (_, mut diag) = route_table_check(&self.topo).expect("checked at construction");
        diag.subscriptions_per_broker = self.tables.subscriptions_per_broker();
        diag
    }

    pub fn publish(&mut self, client: &NodeId, env: Envelope) -> Result<DeliveryTrace, DispatchError> {
        env.validate()?;
        let (publisher, origin) = self.client(client)?;
        Ok(self.disseminate(publisher, origin, env))
    }

    fn disseminate(&self, publisher: ClientIdx, origin: BrokerIdx, mut env: Envelope) -> DeliveryTrace {
        env.hop_trace.clear();
        let mut trace = DeliveryTrace {
            deliveries: Vec::new(),
            inter_broker_hops: 0,
            brokers_visited: 0,
            discarded: false,
            stats: MatchStats::default(),
            parses_per_broker: Vec::new(),
        };
        let mut queue = VecDeque::from([(origin, None::<BrokerIdx>, env)]);
        while let Some((broker, from, mut env)) = queue.pop_front() {
            env.hop_trace.push(broker as u32);
            trace.brokers_visited += 1;
            let step = self.tables.step(broker, from, &env, Some(publisher));
            trace.stats.add(&step.stats);
            trace.parses_per_broker.push(step.stats.document_parses);
            for client in step.local {
                trace.deliveries.push(Delivery {
                    client: self.names[client as usize].clone(),
                    path: env.hop_trace.iter().map(|&b| self.topo.brokers[b as usize].clone()).collect(),
                    envelope: env.clone(),
                });
            }
            for nb in step.forward {
                trace.inter_broker_hops += 1;
                queue.push_back((nb, Some(broker), env.clone()));
            }
        }
        trace.discarded = trace.deliveries.is_empty();
        trace.deliveries.sort_by(|a, b| a.client.cmp(&b.client));
        trace
    }

    /// Publishes a repliable message and collects replies along the reverse
    /// paths. `responder` is asked once per live recipient; recipients in
    /// `crashed` never answer, so the request then completes by timeout.
    pub fn publish_repliable(
        &mut self,
        client: &NodeId,
        env: Envelope,
        crashed: &BTreeSet<NodeId>,
        mut responder: impl FnMut(&NodeId, &Envelope) -> Option<Vec<u8>>,
    ) -> Result<ReplyOutcome, DispatchError> {
        if !env.repliable {
            return Err(DispatchError::NotRepliable);
        }
        env.validate()?;
        let (publisher, origin) = self.client(client)?;
        let expected = self.tables.recipients(&env, Some(publisher)).len();
        let trace = self.disseminate(publisher, origin, env);
        let mut replies = Vec::new();
        for d in &trace.deliveries {
            if crashed.contains(&d.client) {
                continue;
            }
            if let Some(body) = responder(&d.client, &d.envelope) {
                let mut reply = Envelope::reply(self.reply_ids.next_id(), &d.envelope, body);
                reply.hop_trace = d.envelope.hop_trace.iter().rev().copied().collect();
                let path = d.path.iter().rev().cloned().collect();
                replies.push(ReplyRecord {
                    from: d.client.clone(),
                    envelope: reply,
                    path,
                });
            }
        }
        let completion = if replies.len() == expected {
            Completion::AllReceived
        } else {
            Completion::TimedOut
        };
        Ok(ReplyOutcome {
            trace,
            expected,
            replies,
            completion,
        })
    }
}
