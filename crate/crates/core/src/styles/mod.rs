//! Cooperation styles: how a federation disseminates its promotions.
//!
//! Every style implements [`CooperationStyle`] and runs inside its delivery
//! manager's event loop. A style reports what happened to the federation
//! replica through [`StyleEvent`]s; the manager stores and purges elements.

pub mod gossip;
pub mod ps;
pub mod psr;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use dire_model::codec::{Reader, Writer};
use dire_model::query::MarketKind;
use dire_model::{ElementId, ModelError, NodeId};
use serde::Deserialize;

use crate::directory::FederationInfo;
use crate::dispatcher::{Completion, Envelope};
use crate::time::{de_duration, SimTime, DAY, HOUR, WEEK};
use crate::world::{Ctx, NodeIdx, StyleTimer};

pub use gossip::{GossipParams, GossipStyle};
pub use ps::PsStyle;
pub use psr::PsrStyle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleKind {
    Ps,
    Psr,
    Gossip,
}

impl StyleKind {
    pub const ALL: [StyleKind; 3] = [StyleKind::Ps, StyleKind::Psr, StyleKind::Gossip];

    pub fn as_str(self) -> &'static str {
        match self {
            StyleKind::Ps => "ps",
            StyleKind::Psr => "psr",
            StyleKind::Gossip => "gossip",
        }
    }

    /// Join parameter keys the style requires in its federation info.
    pub fn required_params(self) -> &'static [&'static str] {
        match self {
            StyleKind::Ps | StyleKind::Psr => &["topic"],
            StyleKind::Gossip => &["contact"],
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(tag: u8) -> Result<Self, ModelError> {
        StyleKind::ALL
            .get(tag as usize)
            .copied()
            .ok_or(ModelError::Decode("invalid style"))
    }

    pub fn write(self, w: &mut Writer) {
        w.u8(self.tag());
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, ModelError> {
        Self::from_tag(r.u8()?)
    }
}

impl fmt::Display for StyleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StyleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ps" => Ok(StyleKind::Ps),
            "psr" => Ok(StyleKind::Psr),
            "gossip" => Ok(StyleKind::Gossip),
            other => Err(format!("unknown cooperation style `{other}`")),
        }
    }
}

/// An element injected into a federation, in wire form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromotedElement {
    pub id: ElementId,
    pub kind: MarketKind,
    pub promoted_by: NodeId,
    pub promoted_at: SimTime,
    pub wire: Arc<[u8]>,
}

impl PromotedElement {
    pub fn write(&self, w: &mut Writer) {
        w.id(&self.id)
            .u8(match self.kind {
                MarketKind::Service => 0,
                MarketKind::AddInfo => 1,
            })
            .str(self.promoted_by.as_str())
            .u64(self.promoted_at)
            .blob(&self.wire);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, ModelError> {
        let id = r.id()?;
        let kind = match r.u8()? {
            0 => MarketKind::Service,
            1 => MarketKind::AddInfo,
            _ => return Err(ModelError::Decode("invalid element kind")),
        };
        Ok(PromotedElement {
            id,
            kind,
            promoted_by: NodeId::new(r.str()?),
            promoted_at: r.u64()?,
            wire: r.blob()?.into(),
        })
    }
}

/// Payload of topic-based federation traffic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FedMsg {
    /// A promotion, or a renewal of one when a lease is attached.
    Promote(PromotedElement),
    Discard(ElementId),
    JoinRequest,
    JoinReply(Vec<PromotedElement>),
    Dismiss,
}

impl FedMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            FedMsg::Promote(el) => {
                w.u8(0);
                el.write(&mut w);
            }
            FedMsg::Discard(id) => {
                w.u8(1).id(id);
            }
            FedMsg::JoinRequest => {
                w.u8(2);
            }
            FedMsg::JoinReply(els) => {
                w.u8(3).u32(els.len() as u32);
                for el in els {
                    el.write(&mut w);
                }
            }
            FedMsg::Dismiss => {
                w.u8(4);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader::new(bytes);
        let msg = match r.u8()? {
            0 => FedMsg::Promote(PromotedElement::read(&mut r)?),
            1 => FedMsg::Discard(r.id()?),
            2 => FedMsg::JoinRequest,
            3 => {
                let n = r.u32()?;
                FedMsg::JoinReply((0..n).map(|_| PromotedElement::read(&mut r)).collect::<Result<_, _>>()?)
            }
            4 => FedMsg::Dismiss,
            _ => return Err(ModelError::Decode("invalid federation message")),
        };
        r.finish()?;
        Ok(msg)
    }
}

/// What a style tells its delivery manager.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StyleEvent {
    /// An element entered the local replica (possibly again).
    Received(Arc<PromotedElement>),
    /// An element left the replica (discarded, tombstoned or expired).
    Removed(ElementId),
    /// Joining finished; promotions are now allowed.
    Joined,
    /// The federation was dismissed by its manager.
    Dismissed,
}

pub type Events = Vec<StyleEvent>;

/// Tunables shared by the topic-based styles.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopicParams {
    /// Lease attached to PS promotions.
    #[serde(deserialize_with = "de_duration")]
    pub lease: SimTime,
    #[serde(deserialize_with = "de_duration")]
    pub renew: SimTime,
    /// How often PS members drop expired promotions.
    #[serde(deserialize_with = "de_duration")]
    pub sweep: SimTime,
    /// PSR join attempts before giving up on a full catch-up.
    pub join_attempts: u32,
}

impl Default for TopicParams {
    fn default() -> Self {
        TopicParams {
            lease: WEEK,
            renew: DAY,
            sweep: HOUR,
            join_attempts: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleParams {
    pub topic: TopicParams,
    pub gossip: GossipParams,
}

/// The contract every cooperation style fulfils.
pub trait CooperationStyle: Send {
    fn kind(&self) -> StyleKind;

    /// Starts the federation as its manager.
    fn create(&mut self, ctx: &mut Ctx<'_>) -> Events;

    /// Starts joining; completion is signalled by [`StyleEvent::Joined`].
    fn join(&mut self, ctx: &mut Ctx<'_>) -> Events;

    /// Leaves, retracting this member's own promotions.
    fn leave(&mut self, ctx: &mut Ctx<'_>);

    /// Stops participating without announcing anything (after a dismissal).
    fn close(&mut self, ctx: &mut Ctx<'_>);

    fn promote(&mut self, ctx: &mut Ctx<'_>, element: Arc<PromotedElement>) -> Events;

    fn retract(&mut self, ctx: &mut Ctx<'_>, id: &ElementId) -> Events;

    /// Sends the dismissal notice through the style's own channel.
    fn dismiss(&mut self, ctx: &mut Ctx<'_>);

    fn on_deliver(&mut self, _ctx: &mut Ctx<'_>, _env: &Envelope) -> Events {
        Vec::new()
    }

    fn on_reply(&mut self, _ctx: &mut Ctx<'_>, _env: &Envelope) -> Events {
        Vec::new()
    }

    fn on_replies_done(&mut self, _ctx: &mut Ctx<'_>, _request: &ElementId, _completion: Completion) -> Events {
        Vec::new()
    }

    fn on_p2p(&mut self, _ctx: &mut Ctx<'_>, _from: NodeIdx, _msg: &gossip::GossipMsg) -> Events {
        Vec::new()
    }

    fn on_send_failed(&mut self, _ctx: &mut Ctx<'_>, _to: NodeIdx, _msg: &gossip::GossipMsg) -> Events {
        Vec::new()
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: StyleTimer) -> Events;

    /// Ids currently in this member's replica, own promotions included.
    fn live(&self) -> Vec<ElementId>;

    /// Peers this member talks to directly (empty for broker-based styles).
    fn peers(&self, _now: SimTime) -> Vec<NodeIdx> {
        Vec::new()
    }

    /// Ids this member promoted and has not retracted.
    fn own_promotions(&self) -> Vec<ElementId>;
}

pub fn new_style(info: &FederationInfo, params: &StyleParams) -> Box<dyn CooperationStyle> {
    match info.style {
        StyleKind::Ps => Box::new(PsStyle::new(info, params.topic.clone())),
        StyleKind::Psr => Box::new(PsrStyle::new(info, params.topic.clone())),
        StyleKind::Gossip => Box::new(GossipStyle::new(info, params.gossip.clone())),
    }
}

/// Logarithm used by the traffic formulas; the base is a free choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
    Two,
    Ten,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
            LogBase::Ten => x.log10(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LogBase::Natural => "natural",
            LogBase::Two => "two",
            LogBase::Ten => "ten",
        }
    }
}

impl FromStr for LogBase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "natural" => Ok(LogBase::Natural),
            "two" => Ok(LogBase::Two),
            "ten" => Ok(LogBase::Ten),
            _ => Err(format!("unknown logarithm base `{s}`")),
        }
    }
}

/// Inputs of the analytic traffic formulas.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficModel {
    /// Promoted elements.
    pub p: u64,
    /// Members.
    pub n: u64,
    /// Federation running time.
    #[serde(deserialize_with = "de_duration")]
    pub d: SimTime,
    #[serde(default = "default_day", deserialize_with = "de_duration")]
    pub t_renew: SimTime,
    #[serde(default = "default_day", deserialize_with = "de_duration")]
    pub t_heartbeat: SimTime,
    #[serde(default = "default_week", deserialize_with = "de_duration")]
    pub t_resubscription: SimTime,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default)]
    pub log: LogBase,
}

fn default_day() -> SimTime {
    DAY
}
fn default_week() -> SimTime {
    WEEK
}
fn default_c() -> f64 {
    2.0
}

impl TrafficModel {
    pub fn new(p: u64, n: u64, d: SimTime) -> Self {
        TrafficModel {
            p,
            n,
            d,
            t_renew: DAY,
            t_heartbeat: DAY,
            t_resubscription: WEEK,
            c: 2.0,
            log: LogBase::Natural,
        }
    }

    fn log_n(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.log.log(self.n as f64)
        }
    }

    /// Expected gossip heartbeats over the running time.
    pub fn gossip_heartbeats(&self) -> f64 {
        self.n as f64 * self.log_n() * (self.c + 1.0) * self.d as f64 / self.t_heartbeat as f64
    }

    /// Expected gossip resubscription messages over the running time.
    pub fn gossip_resubscriptions(&self) -> f64 {
        let l = self.log_n() * (self.c + 1.0);
        self.n as f64 * l * l * self.d as f64 / self.t_resubscription as f64
    }
}

/// Expected payload messages carrying promotions.
pub fn expected_traffic(model: &TrafficModel, style: StyleKind) -> f64 {
    let p = model.p as f64;
    let n = model.n as f64;
    match style {
        StyleKind::Ps => p * (n - 1.0).max(0.0) * (model.d / model.t_renew) as f64,
        StyleKind::Psr => p * (n - 1.0).max(0.0),
        StyleKind::Gossip => p * n * model.log_n() * (model.c + 1.0),
    }
}

/// Join parameters for a freshly created federation.
pub fn default_join_params(style: StyleKind, name: &str, manager: &NodeId) -> BTreeMap<String, String> {
    let mut params = BTreeMap::new();
    match style {
        StyleKind::Ps | StyleKind::Psr => params.insert("topic".to_owned(), name.to_owned()),
        StyleKind::Gossip => params.insert("contact".to_owned(), manager.as_str().to_owned()),
    };
    params
}
