//! Content-based publish/subscribe over an acyclic broker overlay.
//!
//! Subscriptions are forwarded to every broker, so each broker knows, for
//! every neighbour, the filters reachable through it. A message is forwarded
//! over a link only when the subtree behind the link holds at least one
//! matching subscription; a message nobody wants never leaves the broker of
//! its publisher.

mod routing;
mod standalone;

use std::sync::Arc;

use dire_model::codec::{Reader, Writer};
use dire_model::query::{Interest, MarketKind};
use dire_model::{ElementId, ModelError};

pub use routing::{ClientIdx, RoutingTables, StepOutcome, SubId};
pub use standalone::{Completion, Delivery, DeliveryTrace, Dispatcher, ReplyOutcome, ReplyRecord};

use crate::time::SimTime;

/// Topic on which federation directories listen.
pub const DIRECTORY_TOPIC: &str = "FederationDirectory";

/// Topic of one directory instance, used for lookups addressed to it.
pub fn directory_endpoint_topic(node: &str) -> String {
    format!("{DIRECTORY_TOPIC}/{node}")
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DispatchError {
    #[error("client `{0}` is not attached to any broker")]
    DetachedClient(String),
    #[error("empty topic name")]
    EmptyTopic,
    #[error("envelope is not repliable")]
    NotRepliable,
    #[error("reply envelope without a request id")]
    ReplyWithoutRequest,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Filter {
    Topic(String),
    Content(Interest),
    DirectoryTopic,
}

impl Filter {
    pub fn topic(name: impl Into<String>) -> Result<Filter, DispatchError> {
        let name = name.into();
        if name.is_empty() {
            return Err(DispatchError::EmptyTopic);
        }
        Ok(Filter::Topic(name))
    }

    /// Topic this filter listens on, if it is topic based.
    pub fn topic_name(&self) -> Option<&str> {
        match self {
            Filter::Topic(t) => Some(t),
            Filter::DirectoryTopic => Some(DIRECTORY_TOPIC),
            Filter::Content(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PayloadKind {
    Service,
    AddInfo,
    Federation,
    Directory,
    Reply,
}

impl PayloadKind {
    pub fn market_kind(self) -> Option<MarketKind> {
        match self {
            PayloadKind::Service => Some(MarketKind::Service),
            PayloadKind::AddInfo => Some(MarketKind::AddInfo),
            _ => None,
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(tag: u8) -> Result<Self, ModelError> {
        Ok(match tag {
            0 => PayloadKind::Service,
            1 => PayloadKind::AddInfo,
            2 => PayloadKind::Federation,
            3 => PayloadKind::Directory,
            4 => PayloadKind::Reply,
            _ => return Err(ModelError::Decode("invalid payload kind")),
        })
    }
}

/// What a directed message is counted as in traffic statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrafficClass {
    /// Marketplace elements and federation promotions.
    Payload,
    /// Discards, dismissals, join requests and other protocol chatter.
    Control,
    /// Directory registration, discovery and lookups.
    Directory,
    Heartbeat,
    Resubscription,
    /// Membership subscriptions issued when joining a gossip federation.
    Join,
}

impl TrafficClass {
    pub const ALL: [TrafficClass; 6] = [
        TrafficClass::Payload,
        TrafficClass::Control,
        TrafficClass::Directory,
        TrafficClass::Heartbeat,
        TrafficClass::Resubscription,
        TrafficClass::Join,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrafficClass::Payload => "payload",
            TrafficClass::Control => "control",
            TrafficClass::Directory => "directory",
            TrafficClass::Heartbeat => "heartbeat",
            TrafficClass::Resubscription => "resubscription",
            TrafficClass::Join => "join",
        }
    }

    fn from_tag(tag: u8) -> Result<Self, ModelError> {
        TrafficClass::ALL
            .get(tag as usize)
            .copied()
            .ok_or(ModelError::Decode("invalid traffic class"))
    }
}

/// Lease terms stamped by the sender of leased information.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeaseTerms {
    pub issued_at: SimTime,
    pub duration: SimTime,
}

impl LeaseTerms {
    pub fn expires_at(&self) -> SimTime {
        self.issued_at.saturating_add(self.duration)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub msg_id: ElementId,
    /// Set for topic-routed payloads; marketplace payloads are routed on
    /// content and carry no topic.
    pub topic: Option<String>,
    pub kind: PayloadKind,
    pub body: Arc<[u8]>,
    pub repliable: bool,
    pub reply_to: Option<ElementId>,
    /// Brokers traversed so far, in order.
    pub hop_trace: Vec<u32>,
    pub class: TrafficClass,
    /// Number of payload elements carried (several for batched replies).
    pub units: u32,
    /// Federation the message belongs to, for per-federation statistics.
    pub fed: Option<ElementId>,
    pub lease: Option<LeaseTerms>,
}

impl Envelope {
    pub fn new(msg_id: ElementId, kind: PayloadKind, body: impl Into<Arc<[u8]>>) -> Self {
        Envelope {
            msg_id,
            topic: None,
            kind,
            body: body.into(),
            repliable: false,
            reply_to: None,
            hop_trace: Vec::new(),
            class: TrafficClass::Payload,
            units: 1,
            fed: None,
            lease: None,
        }
    }

    pub fn on_topic(mut self, topic: impl Into<String>) -> Self {
        self.topic = Some(topic.into());
        self
    }

    pub fn repliable(mut self) -> Self {
        self.repliable = true;
        self
    }

    pub fn with_class(mut self, class: TrafficClass) -> Self {
        self.class = class;
        self
    }

    pub fn with_units(mut self, units: u32) -> Self {
        self.units = units;
        self
    }

    pub fn for_federation(mut self, fed: ElementId) -> Self {
        self.fed = Some(fed);
        self
    }

    pub fn with_lease(mut self, lease: LeaseTerms) -> Self {
        self.lease = Some(lease);
        self
    }

    /// A reply to `request`, inheriting its class and federation.
    pub fn reply(msg_id: ElementId, request: &Envelope, body: impl Into<Arc<[u8]>>) -> Self {
        Envelope {
            reply_to: Some(request.msg_id.clone()),
            class: request.class,
            fed: request.fed.clone(),
            ..Envelope::new(msg_id, PayloadKind::Reply, body)
        }
    }

    pub fn validate(&self) -> Result<(), DispatchError> {
        if self.kind == PayloadKind::Reply && self.reply_to.is_none() {
            return Err(DispatchError::ReplyWithoutRequest);
        }
        if matches!(&self.topic, Some(t) if t.is_empty()) {
            return Err(DispatchError::EmptyTopic);
        }
        Ok(())
    }

    /// Wire form: fixed header followed by the body bytes.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.id(&self.msg_id).u8(self.kind.tag());
        match &self.topic {
            Some(t) => w.bool(true).str(t),
            None => w.bool(false),
        };
        w.bool(self.repliable);
        match &self.reply_to {
            Some(id) => w.bool(true).id(id),
            None => w.bool(false),
        };
        w.u16(self.hop_trace.len() as u16);
        for &h in &self.hop_trace {
            w.u32(h);
        }
        w.u8(self.class as u8).u32(self.units);
        match &self.fed {
            Some(id) => w.bool(true).id(id),
            None => w.bool(false),
        };
        match &self.lease {
            Some(l) => w.bool(true).u64(l.issued_at).u64(l.duration),
            None => w.bool(false),
        };
        w.blob(&self.body);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader::new(bytes);
        let msg_id = r.id()?;
        let kind = PayloadKind::from_tag(r.u8()?)?;
        let topic = if r.bool()? { Some(r.str()?) } else { None };
        let repliable = r.bool()?;
        let reply_to = if r.bool()? { Some(r.id()?) } else { None };
        let n = r.u16()?;
        let hop_trace = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
        let class = TrafficClass::from_tag(r.u8()?)?;
        let units = r.u32()?;
        let fed = if r.bool()? { Some(r.id()?) } else { None };
        let lease = if r.bool()? {
            Some(LeaseTerms {
                issued_at: r.u64()?,
                duration: r.u64()?,
            })
        } else {
            None
        };
        let body: Arc<[u8]> = r.blob()?.into();
        r.finish()?;
        Ok(Envelope {
            msg_id,
            topic,
            kind,
            body,
            repliable,
            reply_to,
            hop_trace,
            class,
            units,
            fed,
            lease,
        })
    }
}
