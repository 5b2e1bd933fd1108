//! Lease-based federation directory.
//!
//! Directory instances listen on the `FederationDirectory` topic: managers
//! broadcast registrations, renewals and dismissals there, and every
//! instance applies them, so instances converge without talking to each
//! other. Discovery and lookups are repliable requests.

use std::collections::BTreeMap;

use dire_model::codec::{Reader, Writer};
use dire_model::{ElementId, ModelError, NodeId};

use crate::dispatcher::{directory_endpoint_topic, Envelope, Filter, PayloadKind, TrafficClass};
use crate::styles::StyleKind;
use crate::time::{LeaseError, LeaseState, SimTime, HOUR};
use crate::world::{Ctx, Timer};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DirectoryError {
    #[error("only the manager may change federation {0}")]
    NotManager(ElementId),
    #[error("federation {0} is already registered")]
    DuplicateFederation(String),
    #[error("unknown federation `{0}`")]
    UnknownFederation(String),
    #[error("no directory answered the discovery request")]
    NoDirectoryAvailable,
    #[error("style {style} requires join parameter `{key}`")]
    MissingJoinParam { style: StyleKind, key: &'static str },
    #[error(transparent)]
    Lease(#[from] LeaseError),
}

/// Federation reference used by commands: by id or by unique name.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FedRef {
    Id(ElementId),
    Name(String),
}

impl FedRef {
    fn write(&self, w: &mut Writer) {
        match self {
            FedRef::Id(id) => w.u8(0).id(id),
            FedRef::Name(n) => w.u8(1).str(n),
        };
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, ModelError> {
        Ok(match r.u8()? {
            0 => FedRef::Id(r.id()?),
            1 => FedRef::Name(r.str()?),
            _ => return Err(ModelError::Decode("invalid federation reference")),
        })
    }
}

impl std::fmt::Display for FedRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FedRef::Id(id) => write!(f, "{id}"),
            FedRef::Name(n) => f.write_str(n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FederationInfo {
    pub fed_id: ElementId,
    pub name: String,
    pub style: StyleKind,
    pub join_params: BTreeMap<String, String>,
    pub manager: NodeId,
    pub lease: LeaseState,
}

impl FederationInfo {
    pub fn new(
        fed_id: ElementId,
        name: impl Into<String>,
        style: StyleKind,
        join_params: BTreeMap<String, String>,
        manager: NodeId,
        lease: LeaseState,
    ) -> Result<Self, DirectoryError> {
        for &key in style.required_params() {
            if join_params.get(key).is_none_or(|v| v.is_empty()) {
                return Err(DirectoryError::MissingJoinParam { style, key });
            }
        }
        Ok(FederationInfo {
            fed_id,
            name: name.into(),
            style,
            join_params,
            manager,
            lease,
        })
    }

    pub fn matches(&self, fed: &FedRef) -> bool {
        match fed {
            FedRef::Id(id) => &self.fed_id == id,
            FedRef::Name(n) => &self.name == n,
        }
    }

    pub fn write(&self, w: &mut Writer) {
        w.id(&self.fed_id).str(&self.name);
        self.style.write(w);
        w.u16(self.join_params.len() as u16);
        for (k, v) in &self.join_params {
            w.str(k).str(v);
        }
        w.str(self.manager.as_str())
            .u64(self.lease.issued_at)
            .u64(self.lease.duration)
            .u64(self.lease.renew_period);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, ModelError> {
        let fed_id = r.id()?;
        let name = r.str()?;
        let style = StyleKind::read(r)?;
        let n = r.u16()?;
        let mut join_params = BTreeMap::new();
        for _ in 0..n {
            let k = r.str()?;
            join_params.insert(k, r.str()?);
        }
        let manager = NodeId::new(r.str()?);
        let lease = LeaseState::new(r.u64()?, r.u64()?, r.u64()?)
            .map_err(|_| ModelError::Decode("invalid federation lease"))?;
        FederationInfo::new(fed_id, name, style, join_params, manager, lease)
            .map_err(|_| ModelError::Decode("federation info lacks join parameters"))
    }
}

/// Payload of directory traffic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DirMsg {
    /// Registration or renewal, broadcast to every directory.
    Register(FederationInfo),
    Dismiss { fed: ElementId, manager: NodeId },
    Discover,
    DiscoverReply { endpoint: NodeId },
    Lookup(FedRef),
    LookupReply(Option<FederationInfo>),
}

impl DirMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            DirMsg::Register(info) => {
                w.u8(0);
                info.write(&mut w);
            }
            DirMsg::Dismiss { fed, manager } => {
                w.u8(1).id(fed).str(manager.as_str());
            }
            DirMsg::Discover => {
                w.u8(2);
            }
            DirMsg::DiscoverReply { endpoint } => {
                w.u8(3).str(endpoint.as_str());
            }
            DirMsg::Lookup(fed) => {
                w.u8(4);
                fed.write(&mut w);
            }
            DirMsg::LookupReply(info) => {
                w.u8(5);
                match info {
                    Some(info) => {
                        w.bool(true);
                        info.write(&mut w);
                    }
                    None => {
                        w.bool(false);
                    }
                }
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader::new(bytes);
        let msg = match r.u8()? {
            0 => DirMsg::Register(FederationInfo::read(&mut r)?),
            1 => DirMsg::Dismiss {
                fed: r.id()?,
                manager: NodeId::new(r.str()?),
            },
            2 => DirMsg::Discover,
            3 => DirMsg::DiscoverReply {
                endpoint: NodeId::new(r.str()?),
            },
            4 => DirMsg::Lookup(FedRef::read(&mut r)?),
            5 => DirMsg::LookupReply(if r.bool()? {
                Some(FederationInfo::read(&mut r)?)
            } else {
                None
            }),
            _ => return Err(ModelError::Decode("invalid directory message")),
        };
        r.finish()?;
        Ok(msg)
    }
}

/// Entries held by one directory instance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DirectoryState {
    entries: BTreeMap<ElementId, FederationInfo>,
}

impl DirectoryState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a new federation. Names are unique among live entries.
    pub fn register(&mut self, info: FederationInfo, now: SimTime) -> Result<(), DirectoryError> {
        if self.entries.contains_key(&info.fed_id) {
            return Err(DirectoryError::DuplicateFederation(info.fed_id.to_string()));
        }
        if self.lookup(&FedRef::Name(info.name.clone()), now).is_some() {
            return Err(DirectoryError::DuplicateFederation(info.name));
        }
        self.entries.insert(info.fed_id.clone(), info);
        Ok(())
    }

    /// Restarts the lease of `fed_id` at `now`.
    pub fn renew(&mut self, fed_id: &ElementId, caller: &NodeId, now: SimTime) -> Result<(), DirectoryError> {
        let entry = self
            .entries
            .get_mut(fed_id)
            .ok_or_else(|| DirectoryError::UnknownFederation(fed_id.to_string()))?;
        if &entry.manager != caller {
            return Err(DirectoryError::NotManager(fed_id.clone()));
        }
        entry.lease = entry.lease.renewed(now);
        Ok(())
    }

    /// Applies a broadcast registration: registers unknown federations and
    /// renews known ones with the lease carried by the message.
    pub fn apply(&mut self, info: FederationInfo, now: SimTime) -> Result<(), DirectoryError> {
        match self.entries.get_mut(&info.fed_id) {
            Some(entry) if entry.manager != info.manager => Err(DirectoryError::NotManager(info.fed_id)),
            Some(entry) => {
                if info.lease.issued_at >= entry.lease.issued_at {
                    *entry = info;
                }
                Ok(())
            }
            None => self.register(info, now),
        }
    }

    pub fn dismiss(&mut self, fed_id: &ElementId, caller: &NodeId) -> Result<FederationInfo, DirectoryError> {
        match self.entries.get(fed_id) {
            None => Err(DirectoryError::UnknownFederation(fed_id.to_string())),
            Some(e) if &e.manager != caller => Err(DirectoryError::NotManager(fed_id.clone())),
            Some(_) => Ok(self.entries.remove(fed_id).expect("present")),
        }
    }

    /// Live entry matching `fed`.
    pub fn lookup(&self, fed: &FedRef, now: SimTime) -> Option<&FederationInfo> {
        match fed {
            FedRef::Id(id) => self.entries.get(id).filter(|e| !e.lease.expired(now)),
            FedRef::Name(_) => self.entries.values().find(|e| e.matches(fed) && !e.lease.expired(now)),
        }
    }

    /// Drops expired entries; returns their ids.
    pub fn sweep(&mut self, now: SimTime) -> Vec<ElementId> {
        let expired: Vec<ElementId> = self
            .entries
            .values()
            .filter(|e| e.lease.expired(now))
            .map(|e| e.fed_id.clone())
            .collect();
        for id in &expired {
            self.entries.remove(id);
        }
        expired
    }

    pub fn listing(&self, now: SimTime) -> Vec<&FederationInfo> {
        self.entries.values().filter(|e| !e.lease.expired(now)).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A directory instance hosted by a node.
pub struct DirectoryService {
    endpoint: NodeId,
    pub state: DirectoryState,
    pub sweep_period: SimTime,
    /// Broadcasts that were refused (duplicate names, foreign renewals).
    pub refused: u64,
}

impl DirectoryService {
    pub fn start(endpoint: &NodeId, ctx: &mut Ctx<'_>) -> Self {
        ctx.subscribe(Filter::DirectoryTopic);
        ctx.subscribe(Filter::Topic(directory_endpoint_topic(endpoint.as_str())));
        let sweep_period = HOUR;
        ctx.set_timer(sweep_period, Timer::DirectorySweep);
        DirectoryService {
            endpoint: endpoint.clone(),
            state: DirectoryState::new(),
            sweep_period,
            refused: 0,
        }
    }

    pub fn on_deliver(&mut self, env: &Envelope, ctx: &mut Ctx<'_>) {
        let Ok(msg) = DirMsg::decode(&env.body) else {
            return;
        };
        let now = ctx.now();
        let answer = match msg {
            DirMsg::Register(info) => {
                if self.state.apply(info, now).is_err() {
                    self.refused += 1;
                }
                None
            }
            DirMsg::Dismiss { fed, manager } => {
                if self.state.dismiss(&fed, &manager).is_err() {
                    self.refused += 1;
                }
                None
            }
            DirMsg::Discover => Some(DirMsg::DiscoverReply {
                endpoint: self.endpoint.clone(),
            }),
            DirMsg::Lookup(fed) => Some(DirMsg::LookupReply(self.state.lookup(&fed, now).cloned())),
            DirMsg::DiscoverReply { .. } | DirMsg::LookupReply(_) => None,
        };
        if let (Some(answer), true) = (answer, env.repliable) {
            let id = ctx.next_id();
            ctx.reply(env, id, answer.encode(), 1);
        }
    }

    pub fn on_sweep(&mut self, ctx: &mut Ctx<'_>) {
        self.state.sweep(ctx.now());
        ctx.set_timer(self.sweep_period, Timer::DirectorySweep);
    }
}

/// Envelope for a directory message on `topic`.
pub fn directory_envelope(ctx: &mut Ctx<'_>, topic: String, msg: &DirMsg) -> Envelope {
    Envelope::new(ctx.next_id(), PayloadKind::Directory, msg.encode())
        .on_topic(topic)
        .with_class(TrafficClass::Directory)
}
