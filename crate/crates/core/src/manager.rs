//! The delivery manager: one per organization, bridging its local registry
//! and the publish/subscribe substrate.
//!
//! It shares locally created services on the marketplace under renewable
//! leases, stores what matches the declared interests, talks to federation
//! directories and hosts one cooperation style per joined federation.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use dire_model::query::{Interest, MarketKind};
use dire_model::xml::{Element, FacetXml, SchemaDescriptor};
use dire_model::{ElementId, Facet, FacetKind, NodeId, ServiceEntry, SignatureScheme};
use serde::Deserialize;

use crate::directory::{directory_envelope, DirMsg, FedRef, FederationInfo};
use crate::dispatcher::{
    directory_endpoint_topic, Completion, Envelope, Filter, LeaseTerms, PayloadKind, SubId, TrafficClass,
    DIRECTORY_TOPIC,
};
use crate::registry::{new_registry, LocalRegistry, RegistryMode, StoredElement};
use crate::styles::gossip::GossipMsg;
use crate::styles::{
    default_join_params, new_style, CooperationStyle, Events, PromotedElement, StyleEvent, StyleKind, StyleParams,
};
use crate::time::{de_duration, LeaseState, SimTime, DAY, HOUR, WEEK};
use crate::world::{Action, Ctx, NodeEvent, RequestOwner, Timer};

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManagerConfig {
    #[serde(deserialize_with = "de_duration")]
    pub market_lease: SimTime,
    #[serde(deserialize_with = "de_duration")]
    pub market_renew: SimTime,
    #[serde(deserialize_with = "de_duration")]
    pub purge_period: SimTime,
    #[serde(deserialize_with = "de_duration")]
    pub federation_lease: SimTime,
    #[serde(deserialize_with = "de_duration")]
    pub federation_renew: SimTime,
    #[serde(deserialize_with = "de_duration")]
    pub check_period: SimTime,
    pub registry: RegistryMode,
    pub styles: StyleParams,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            market_lease: WEEK,
            market_renew: DAY,
            purge_period: HOUR,
            federation_lease: WEEK,
            federation_renew: DAY,
            check_period: DAY,
            registry: RegistryMode::InMemory,
            styles: StyleParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InterestHandle(pub u64);

#[derive(Clone, Debug, PartialEq)]
pub enum ManagementCommand {
    Share(ElementId),
    ShareAddInfo(ElementId),
    /// Stops renewing a marketplace share; receivers purge it on expiry.
    Unshare(ElementId),
    DeclareInterest(Interest),
    RevokeInterest(InterestHandle),
    CreateFederation { name: String, style: StyleKind },
    JoinFederation(FedRef),
    LeaveFederation(FedRef),
    Promote(FedRef, ElementId),
    /// Withdraws one of this member's promotions.
    Retract(FedRef, ElementId),
    DismissFederation(FedRef),
    DiscoverDirectories,
}

impl ManagementCommand {
    pub fn name(&self) -> &'static str {
        match self {
            ManagementCommand::Share(_) => "share",
            ManagementCommand::ShareAddInfo(_) => "share_add_info",
            ManagementCommand::Unshare(_) => "unshare",
            ManagementCommand::DeclareInterest(_) => "declare_interest",
            ManagementCommand::RevokeInterest(_) => "revoke_interest",
            ManagementCommand::CreateFederation { .. } => "create_federation",
            ManagementCommand::JoinFederation(_) => "join_federation",
            ManagementCommand::LeaveFederation(_) => "leave_federation",
            ManagementCommand::Promote(..) => "promote",
            ManagementCommand::Retract(..) => "retract",
            ManagementCommand::DismissFederation(_) => "dismiss_federation",
            ManagementCommand::DiscoverDirectories => "discover_directories",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CommandOutcome {
    Done,
    Interest(InterestHandle),
    Federation(ElementId),
    /// Completion depends on replies still to come.
    Pending,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CommandError {
    #[error("unknown service {0}")]
    UnknownService(ElementId),
    #[error("unknown facet {0}")]
    UnknownFacet(ElementId),
    #[error("unknown element {0}")]
    UnknownElement(ElementId),
    #[error("{0} was created by another node")]
    NotCreator(ElementId),
    #[error("service {0} does not accept additional information")]
    AddInfoForbidden(ElementId),
    #[error("not a member of federation {0}")]
    NotAMember(String),
    #[error("already joined or joining federation {0}")]
    AlreadyJoined(String),
    #[error("unknown federation {0}")]
    UnknownFederation(String),
    #[error("only the manager of {0} may do this")]
    NotManager(String),
    #[error("federation {0} already exists")]
    DuplicateFederation(String),
    #[error("the manager of {0} must dismiss it instead of leaving")]
    ManagerCannotLeave(String),
    #[error("unknown interest handle {0}")]
    UnknownInterest(u64),
    #[error("invalid description: {0}")]
    InvalidDescription(String),
}

impl CommandError {
    pub fn name(&self) -> &'static str {
        match self {
            CommandError::UnknownService(_) => "unknown_service",
            CommandError::UnknownFacet(_) => "unknown_facet",
            CommandError::UnknownElement(_) => "unknown_element",
            CommandError::NotCreator(_) => "not_creator",
            CommandError::AddInfoForbidden(_) => "add_info_forbidden",
            CommandError::NotAMember(_) => "not_a_member",
            CommandError::AlreadyJoined(_) => "already_joined",
            CommandError::UnknownFederation(_) => "unknown_federation",
            CommandError::NotManager(_) => "not_manager",
            CommandError::DuplicateFederation(_) => "duplicate_federation",
            CommandError::ManagerCannotLeave(_) => "manager_cannot_leave",
            CommandError::UnknownInterest(_) => "unknown_interest",
            CommandError::InvalidDescription(_) => "invalid_description",
        }
    }
}

/// Observable milestones, kept for tests and reports.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ManagerEvent {
    Discovered { endpoints: Vec<NodeId>, completion: Completion },
    Joined(ElementId),
    JoinFailed { fed: FedRef, reason: String },
    Left(ElementId),
    Dismissed(ElementId),
    CheckActive(ElementId),
    CheckDeferred(ElementId),
    Purged(Vec<ElementId>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ManagerStats {
    pub rejected_unauthorized: u64,
    pub market_received: u64,
    pub federation_received: u64,
}

/// Why an element is held although it was not created here.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Origin {
    market_expires: Option<SimTime>,
    feds: BTreeSet<ElementId>,
}

pub struct Membership {
    pub info: FederationInfo,
    style: Box<dyn CooperationStyle>,
    pub joined: bool,
    /// When this node started joining (or created the federation).
    pub joined_at: SimTime,
    replica: BTreeSet<ElementId>,
}

impl Membership {
    pub fn style(&self) -> &dyn CooperationStyle {
        self.style.as_ref()
    }

    pub fn style_mut(&mut self) -> &mut dyn CooperationStyle {
        self.style.as_mut()
    }
}

#[derive(Clone, Debug)]
enum Purpose {
    Explicit,
    Join(FedRef),
    Check(ElementId),
}

#[derive(Clone, Debug)]
enum Request {
    Discover { purpose: Purpose, endpoints: Vec<NodeId>, acted: bool },
    Lookup { purpose: Purpose, answered: bool },
}

pub struct DeliveryManager {
    node: NodeId,
    pub cfg: ManagerConfig,
    registry: Box<dyn LocalRegistry>,
    own: BTreeMap<ElementId, StoredElement>,
    remote: BTreeMap<ElementId, Origin>,
    shared: BTreeSet<ElementId>,
    interests: BTreeMap<InterestHandle, (Interest, SubId)>,
    next_handle: u64,
    /// Services seen on the network or created here, with their
    /// allow-add-info flag; kept even without a registry.
    seen_services: BTreeMap<ElementId, bool>,
    memberships: BTreeMap<ElementId, Membership>,
    joining: BTreeSet<FedRef>,
    requests: BTreeMap<ElementId, Request>,
    directory: Option<NodeId>,
    managed: BTreeMap<ElementId, FederationInfo>,
    pub stats: ManagerStats,
    pub log: Vec<(SimTime, ManagerEvent)>,
}

impl DeliveryManager {
    pub fn new(node: NodeId, cfg: ManagerConfig) -> Self {
        DeliveryManager {
            node,
            registry: new_registry(cfg.registry),
            cfg,
            own: BTreeMap::new(),
            remote: BTreeMap::new(),
            shared: BTreeSet::new(),
            interests: BTreeMap::new(),
            next_handle: 0,
            seen_services: BTreeMap::new(),
            memberships: BTreeMap::new(),
            joining: BTreeSet::new(),
            requests: BTreeMap::new(),
            directory: None,
            managed: BTreeMap::new(),
            stats: ManagerStats::default(),
            log: Vec::new(),
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn start(&mut self, ctx: &mut Ctx<'_>) {
        if self.registry.mode() == RegistryMode::InMemory {
            ctx.set_timer(self.cfg.purge_period, Timer::Purge);
        }
    }

    // ---- queries -------------------------------------------------------

    pub fn registry(&self) -> &dyn LocalRegistry {
        self.registry.as_ref()
    }

    pub fn own_elements(&self) -> impl Iterator<Item = &StoredElement> {
        self.own.values()
    }

    pub fn own_element(&self, id: &ElementId) -> Option<&StoredElement> {
        self.own.get(id)
    }

    pub fn shared(&self) -> &BTreeSet<ElementId> {
        &self.shared
    }

    /// Remote elements currently held (everything in the registry that was
    /// not created here).
    pub fn remote_ids(&self) -> Vec<ElementId> {
        self.registry.ids().into_iter().filter(|id| !self.own.contains_key(id)).collect()
    }

    pub fn seen_services(&self) -> &BTreeMap<ElementId, bool> {
        &self.seen_services
    }

    pub fn interests(&self) -> impl Iterator<Item = (&InterestHandle, &Interest)> {
        self.interests.iter().map(|(h, (i, _))| (h, i))
    }

    pub fn memberships(&self) -> &BTreeMap<ElementId, Membership> {
        &self.memberships
    }

    pub fn membership(&self, fed: &FedRef) -> Option<&Membership> {
        self.memberships.values().find(|m| m.info.matches(fed))
    }

    pub fn is_joining(&self, fed: &FedRef) -> bool {
        self.joining.contains(fed)
    }

    pub fn manages(&self, fed: &ElementId) -> bool {
        self.managed.contains_key(fed)
    }

    /// Elements this member holds for `fed`, own promotions included.
    pub fn replica(&self, fed: &FedRef) -> Option<Vec<ElementId>> {
        self.membership(fed).map(|m| m.style.live())
    }

    pub fn directory_endpoint(&self) -> Option<&NodeId> {
        self.directory.as_ref()
    }

    // ---- local creation ------------------------------------------------

    /// Creates a service with the given specification facets
    /// `(schema, document root)`, signed by this node.
    pub fn create_service(
        &mut self,
        ctx: &mut Ctx<'_>,
        name: &str,
        allow_add_info: bool,
        facets: Vec<(SchemaDescriptor, Element)>,
    ) -> Result<ElementId, CommandError> {
        let mut entry = ServiceEntry::new(ctx.next_id(), name, self.node.clone(), allow_add_info);
        for (schema, root) in facets {
            let facet = self.sign_facet(ctx, FacetKind::Specification, entry.id.clone(), &schema, root)?;
            entry
                .attach_facet(facet, &self.node, ctx.keys())
                .map_err(|e| CommandError::InvalidDescription(e.to_string()))?;
        }
        let id = entry.id.clone();
        self.seen_services.insert(id.clone(), allow_add_info);
        self.store_own(StoredElement::Service(entry));
        Ok(id)
    }

    /// Creates an additional-information facet about `service`.
    pub fn create_add_info(
        &mut self,
        ctx: &mut Ctx<'_>,
        service: &ElementId,
        schema: &SchemaDescriptor,
        root: Element,
    ) -> Result<ElementId, CommandError> {
        let allow = match self.registry.get(service) {
            Some(StoredElement::Service(s)) => s.allow_add_info,
            _ => *self
                .seen_services
                .get(service)
                .ok_or_else(|| CommandError::UnknownService(service.clone()))?,
        };
        if !allow {
            return Err(CommandError::AddInfoForbidden(service.clone()));
        }
        let facet = self.sign_facet(ctx, FacetKind::AdditionalInfo, service.clone(), schema, root)?;
        let id = facet.id.clone();
        self.store_own(StoredElement::Facet(facet));
        Ok(id)
    }

    fn sign_facet(
        &self,
        ctx: &mut Ctx<'_>,
        kind: FacetKind,
        service: ElementId,
        schema: &SchemaDescriptor,
        root: Element,
    ) -> Result<Facet, CommandError> {
        let doc = FacetXml::new(ctx.next_id(), schema, root).map_err(|e| CommandError::InvalidDescription(e.to_string()))?;
        Facet::signed(ctx.next_id(), kind, service, doc, self.node.clone(), ctx.keys())
            .map_err(|e| CommandError::InvalidDescription(e.to_string()))
    }

    fn store_own(&mut self, element: StoredElement) {
        self.registry.put(element.clone());
        self.own.insert(element.id().clone(), element);
    }

    /// Replaces a locally created element by a new version with a fresh id
    /// (delete, then create). Shares move to the new version.
    pub fn replace_own(&mut self, ctx: &mut Ctx<'_>, old: &ElementId, mut new: StoredElement) -> Result<ElementId, CommandError> {
        if self.own.remove(old).is_none() {
            return Err(CommandError::UnknownElement(old.clone()));
        }
        self.registry.delete(old);
        let id = ctx.next_id();
        match &mut new {
            StoredElement::Service(s) => s.id = id.clone(),
            StoredElement::Facet(f) => f.id = id.clone(),
        }
        let was_shared = self.shared.remove(old);
        self.store_own(new);
        if was_shared {
            self.shared.insert(id.clone());
            self.publish_share(ctx, &id);
            ctx.set_timer(self.cfg.market_renew, Timer::MarketRenew(id.clone()));
        }
        Ok(id)
    }

    // ---- commands ------------------------------------------------------

    pub fn execute(&mut self, cmd: ManagementCommand, ctx: &mut Ctx<'_>) -> Result<CommandOutcome, CommandError> {
        match cmd {
            ManagementCommand::Share(id) => self.share_service(ctx, id),
            ManagementCommand::ShareAddInfo(id) => self.share_add_info(ctx, id),
            ManagementCommand::Unshare(id) => {
                if self.shared.remove(&id) {
                    Ok(CommandOutcome::Done)
                } else {
                    Err(CommandError::UnknownElement(id))
                }
            }
            ManagementCommand::DeclareInterest(interest) => {
                Ok(CommandOutcome::Interest(self.declare_interest(ctx, interest)))
            }
            ManagementCommand::RevokeInterest(handle) => match self.interests.remove(&handle) {
                Some((_, sub)) => {
                    ctx.unsubscribe(sub);
                    Ok(CommandOutcome::Done)
                }
                None => Err(CommandError::UnknownInterest(handle.0)),
            },
            ManagementCommand::CreateFederation { name, style } => self.create_federation(ctx, name, style),
            ManagementCommand::JoinFederation(fed) => self.join_federation(ctx, fed),
            ManagementCommand::LeaveFederation(fed) => self.leave_federation(ctx, &fed),
            ManagementCommand::Promote(fed, id) => self.promote(ctx, &fed, id),
            ManagementCommand::Retract(fed, id) => self.retract(ctx, &fed, &id),
            ManagementCommand::DismissFederation(fed) => self.dismiss_federation(ctx, &fed),
            ManagementCommand::DiscoverDirectories => {
                self.discover_directories(ctx, Purpose::Explicit);
                Ok(CommandOutcome::Pending)
            }
        }
    }

    pub fn share_service(&mut self, ctx: &mut Ctx<'_>, id: ElementId) -> Result<CommandOutcome, CommandError> {
        match self.own.get(&id) {
            Some(StoredElement::Service(_)) => {}
            Some(StoredElement::Facet(_)) => return Err(CommandError::UnknownService(id)),
            None if self.registry.contains(&id) || self.seen_services.contains_key(&id) => {
                return Err(CommandError::NotCreator(id))
            }
            None => return Err(CommandError::UnknownService(id)),
        }
        self.start_share(ctx, id);
        Ok(CommandOutcome::Done)
    }

    pub fn share_add_info(&mut self, ctx: &mut Ctx<'_>, id: ElementId) -> Result<CommandOutcome, CommandError> {
        let service = match self.own.get(&id) {
            Some(StoredElement::Facet(f)) if f.kind == FacetKind::AdditionalInfo => f.service_ref.clone(),
            _ => return Err(CommandError::UnknownFacet(id)),
        };
        if self.seen_services.get(&service) == Some(&false) {
            return Err(CommandError::AddInfoForbidden(service));
        }
        self.start_share(ctx, id);
        Ok(CommandOutcome::Done)
    }

    fn start_share(&mut self, ctx: &mut Ctx<'_>, id: ElementId) {
        self.publish_share(ctx, &id);
        if self.shared.insert(id.clone()) {
            ctx.set_timer(self.cfg.market_renew, Timer::MarketRenew(id));
        }
    }

    fn publish_share(&mut self, ctx: &mut Ctx<'_>, id: &ElementId) {
        let Some(element) = self.own.get(id) else {
            return;
        };
        let kind = match element.market_kind() {
            MarketKind::Service => PayloadKind::Service,
            MarketKind::AddInfo => PayloadKind::AddInfo,
        };
        let env = Envelope::new(ctx.next_id(), kind, element.encode()).with_lease(LeaseTerms {
            issued_at: ctx.now(),
            duration: self.cfg.market_lease,
        });
        ctx.publish(env);
    }

    pub fn declare_interest(&mut self, ctx: &mut Ctx<'_>, interest: Interest) -> InterestHandle {
        let handle = InterestHandle(self.next_handle);
        self.next_handle += 1;
        let sub = ctx.subscribe(Filter::Content(interest.clone()));
        self.interests.insert(handle, (interest, sub));
        handle
    }

    /// Deletes every remote element whose marketplace lease has expired and
    /// that no federation holds.
    pub fn purge_expired(&mut self, now: SimTime) -> Vec<ElementId> {
        let mut purged = Vec::new();
        for (id, prov) in self.remote.iter_mut() {
            if matches!(prov.market_expires, Some(exp) if now > exp) {
                prov.market_expires = None;
                if prov.feds.is_empty() {
                    purged.push(id.clone());
                }
            }
        }
        for id in &purged {
            self.remote.remove(id);
            self.registry.delete(id);
        }
        purged
    }

    fn create_federation(&mut self, ctx: &mut Ctx<'_>, name: String, style: StyleKind) -> Result<CommandOutcome, CommandError> {
        if self.memberships.values().any(|m| m.info.name == name) {
            return Err(CommandError::DuplicateFederation(name));
        }
        let params = default_join_params(style, &name, &self.node);
        let lease = LeaseState::new(ctx.now(), self.cfg.federation_lease, self.cfg.federation_renew)
            .map_err(|e| CommandError::InvalidDescription(e.to_string()))?;
        let info = FederationInfo::new(ctx.next_id(), name, style, params, self.node.clone(), lease)
            .map_err(|e| CommandError::InvalidDescription(e.to_string()))?;
        let fed = info.fed_id.clone();
        self.broadcast_directory(ctx, &DirMsg::Register(info.clone()));
        ctx.set_timer(self.cfg.federation_renew, Timer::FederationRenew(fed.clone()));
        self.managed.insert(fed.clone(), info.clone());
        ctx.fed_info(&fed, &info.name, style);
        let mut style_impl = new_style(&info, &self.cfg.styles);
        let events = style_impl.create(ctx);
        self.memberships.insert(
            fed.clone(),
            Membership {
                info,
                style: style_impl,
                joined: false,
                joined_at: ctx.now(),
                replica: BTreeSet::new(),
            },
        );
        self.apply_events(ctx, &fed, events);
        Ok(CommandOutcome::Federation(fed))
    }

    fn broadcast_directory(&self, ctx: &mut Ctx<'_>, msg: &DirMsg) {
        let env = directory_envelope(ctx, DIRECTORY_TOPIC.to_owned(), msg);
        ctx.publish(env);
    }

    fn join_federation(&mut self, ctx: &mut Ctx<'_>, fed: FedRef) -> Result<CommandOutcome, CommandError> {
        if self.membership(&fed).is_some() || self.joining.contains(&fed) {
            return Err(CommandError::AlreadyJoined(fed.to_string()));
        }
        self.joining.insert(fed.clone());
        self.lookup_or_discover(ctx, Purpose::Join(fed));
        Ok(CommandOutcome::Pending)
    }

    fn lookup_or_discover(&mut self, ctx: &mut Ctx<'_>, purpose: Purpose) {
        match self.directory.clone() {
            Some(dir) => self.lookup(ctx, &dir, purpose),
            None => self.discover_directories(ctx, purpose),
        }
    }

    fn discover_directories(&mut self, ctx: &mut Ctx<'_>, purpose: Purpose) {
        let env = directory_envelope(ctx, DIRECTORY_TOPIC.to_owned(), &DirMsg::Discover);
        self.requests.insert(
            env.msg_id.clone(),
            Request::Discover {
                purpose,
                endpoints: Vec::new(),
                acted: false,
            },
        );
        ctx.publish_request(env, RequestOwner::Manager);
    }

    fn lookup(&mut self, ctx: &mut Ctx<'_>, dir: &NodeId, purpose: Purpose) {
        let target = match &purpose {
            Purpose::Join(fed) => fed.clone(),
            Purpose::Check(fed) => FedRef::Id(fed.clone()),
            Purpose::Explicit => return,
        };
        let env = directory_envelope(ctx, directory_endpoint_topic(dir.as_str()), &DirMsg::Lookup(target));
        self.requests.insert(
            env.msg_id.clone(),
            Request::Lookup {
                purpose,
                answered: false,
            },
        );
        ctx.publish_request(env, RequestOwner::Manager);
    }

    fn on_directory_reply(&mut self, ctx: &mut Ctx<'_>, env: &Envelope) {
        let Some(req_id) = env.reply_to.clone() else {
            return;
        };
        let Ok(msg) = DirMsg::decode(&env.body) else {
            return;
        };
        match (self.requests.get_mut(&req_id), msg) {
            (
                Some(Request::Discover {
                    purpose,
                    endpoints,
                    acted,
                }),
                DirMsg::DiscoverReply { endpoint },
            ) => {
                endpoints.push(endpoint.clone());
                if !*acted {
                    // The first answer is the lowest-latency directory.
                    *acted = true;
                    let purpose = purpose.clone();
                    self.directory = Some(endpoint.clone());
                    self.lookup(ctx, &endpoint, purpose);
                }
            }
            (Some(Request::Lookup { purpose, answered }), DirMsg::LookupReply(info)) => {
                *answered = true;
                let purpose = purpose.clone();
                self.on_lookup(ctx, purpose, info);
            }
            _ => {}
        }
    }

    fn on_lookup(&mut self, ctx: &mut Ctx<'_>, purpose: Purpose, info: Option<FederationInfo>) {
        match (purpose, info) {
            (Purpose::Join(fed), Some(info)) => {
                self.joining.remove(&fed);
                if self.memberships.contains_key(&info.fed_id) {
                    return;
                }
                self.start_membership(ctx, info);
            }
            (Purpose::Join(fed), None) => {
                self.joining.remove(&fed);
                self.record(
                    ctx,
                    ManagerEvent::JoinFailed {
                        fed: fed.clone(),
                        reason: format!("unknown federation {fed}"),
                    },
                );
            }
            (Purpose::Check(fed), Some(_)) => self.record(ctx, ManagerEvent::CheckActive(fed)),
            (Purpose::Check(fed), None) => {
                if self.memberships.contains_key(&fed) && !self.managed.contains_key(&fed) {
                    self.drop_membership(ctx, &fed, false);
                    self.record(ctx, ManagerEvent::Dismissed(fed));
                }
            }
            (Purpose::Explicit, _) => {}
        }
    }

    fn start_membership(&mut self, ctx: &mut Ctx<'_>, info: FederationInfo) {
        let fed = info.fed_id.clone();
        ctx.fed_info(&fed, &info.name, info.style);
        let mut style = new_style(&info, &self.cfg.styles);
        let events = style.join(ctx);
        self.memberships.insert(
            fed.clone(),
            Membership {
                info,
                style,
                joined: false,
                joined_at: ctx.now(),
                replica: BTreeSet::new(),
            },
        );
        ctx.set_timer(self.cfg.check_period, Timer::MemberCheck(fed.clone()));
        self.apply_events(ctx, &fed, events);
    }

    fn on_request_done(&mut self, ctx: &mut Ctx<'_>, request: &ElementId, completion: Completion) {
        let Some(req) = self.requests.remove(request) else {
            return;
        };
        match req {
            Request::Discover {
                purpose,
                endpoints,
                acted,
            } => {
                self.record(
                    ctx,
                    ManagerEvent::Discovered {
                        endpoints: endpoints.clone(),
                        completion,
                    },
                );
                if !acted {
                    self.unreachable(ctx, purpose, "no directory available");
                }
            }
            Request::Lookup { purpose, answered } => {
                if !answered {
                    // The cached directory is gone; discover again next time.
                    self.directory = None;
                    self.unreachable(ctx, purpose, "directory unreachable");
                }
            }
        }
    }

    fn unreachable(&mut self, ctx: &mut Ctx<'_>, purpose: Purpose, reason: &str) {
        match purpose {
            Purpose::Join(fed) => {
                self.joining.remove(&fed);
                self.record(
                    ctx,
                    ManagerEvent::JoinFailed {
                        fed,
                        reason: reason.to_owned(),
                    },
                );
            }
            Purpose::Check(fed) => self.record(ctx, ManagerEvent::CheckDeferred(fed)),
            Purpose::Explicit => {}
        }
    }

    fn find_fed(&self, fed: &FedRef) -> Option<ElementId> {
        self.membership(fed).map(|m| m.info.fed_id.clone())
    }

    fn leave_federation(&mut self, ctx: &mut Ctx<'_>, fed: &FedRef) -> Result<CommandOutcome, CommandError> {
        let id = self.find_fed(fed).ok_or_else(|| CommandError::NotAMember(fed.to_string()))?;
        if self.managed.contains_key(&id) {
            return Err(CommandError::ManagerCannotLeave(fed.to_string()));
        }
        self.drop_membership(ctx, &id, true);
        self.record(ctx, ManagerEvent::Left(id));
        Ok(CommandOutcome::Done)
    }

    /// Removes a membership and the replica it contributed.
    fn drop_membership(&mut self, ctx: &mut Ctx<'_>, fed: &ElementId, announce: bool) {
        let Some(mut m) = self.memberships.remove(fed) else {
            return;
        };
        if announce {
            m.style.leave(ctx);
        } else {
            m.style.close(ctx);
        }
        ctx.set_member(fed, false);
        for id in m.replica {
            self.release(fed, &id);
        }
    }

    fn release(&mut self, fed: &ElementId, id: &ElementId) {
        if let Some(prov) = self.remote.get_mut(id) {
            prov.feds.remove(fed);
            if prov.feds.is_empty() && prov.market_expires.is_none() {
                self.remote.remove(id);
                self.registry.delete(id);
            }
        }
    }

    fn promote(&mut self, ctx: &mut Ctx<'_>, fed: &FedRef, id: ElementId) -> Result<CommandOutcome, CommandError> {
        let fed_id = match self.membership(fed) {
            Some(m) if m.joined => m.info.fed_id.clone(),
            _ => return Err(CommandError::NotAMember(fed.to_string())),
        };
        let element = self
            .own
            .get(&id)
            .or_else(|| self.registry.get(&id))
            .ok_or_else(|| CommandError::UnknownElement(id.clone()))?;
        let promoted = Arc::new(PromotedElement {
            id: id.clone(),
            kind: element.market_kind(),
            promoted_by: self.node.clone(),
            promoted_at: ctx.now(),
            wire: element.encode().into(),
        });
        ctx.promotion_started(&fed_id, &id);
        let m = self.memberships.get_mut(&fed_id).expect("member");
        m.replica.insert(id);
        let events = m.style.promote(ctx, promoted);
        self.apply_events(ctx, &fed_id, events);
        Ok(CommandOutcome::Done)
    }

    fn retract(&mut self, ctx: &mut Ctx<'_>, fed: &FedRef, id: &ElementId) -> Result<CommandOutcome, CommandError> {
        let fed_id = self.find_fed(fed).ok_or_else(|| CommandError::NotAMember(fed.to_string()))?;
        let m = self.memberships.get_mut(&fed_id).expect("member");
        if !m.style.own_promotions().contains(id) {
            return Err(CommandError::UnknownElement(id.clone()));
        }
        let events = m.style.retract(ctx, id);
        self.apply_events(ctx, &fed_id, events);
        Ok(CommandOutcome::Done)
    }

    fn dismiss_federation(&mut self, ctx: &mut Ctx<'_>, fed: &FedRef) -> Result<CommandOutcome, CommandError> {
        let Some(fed_id) = self.managed.values().find(|i| i.matches(fed)).map(|i| i.fed_id.clone()) else {
            return Err(match self.membership(fed) {
                Some(_) => CommandError::NotManager(fed.to_string()),
                None => CommandError::UnknownFederation(fed.to_string()),
            });
        };
        self.managed.remove(&fed_id);
        self.broadcast_directory(
            ctx,
            &DirMsg::Dismiss {
                fed: fed_id.clone(),
                manager: self.node.clone(),
            },
        );
        if let Some(m) = self.memberships.get_mut(&fed_id) {
            m.style.dismiss(ctx);
        }
        self.drop_membership(ctx, &fed_id, false);
        self.record(ctx, ManagerEvent::Dismissed(fed_id));
        Ok(CommandOutcome::Done)
    }

    // ---- receiving -----------------------------------------------------

    /// Checks a received element: signatures, specification authorship and
    /// the creator's permission for additional information.
    fn authorized(&self, element: &StoredElement, keys: &dyn SignatureScheme) -> bool {
        match element {
            StoredElement::Service(s) => s.verify_authority(keys).is_ok(),
            StoredElement::Facet(f) => {
                if f.kind != FacetKind::AdditionalInfo || !f.verify(keys) {
                    return false;
                }
                let allow = match self.registry.get(&f.service_ref) {
                    Some(StoredElement::Service(s)) => Some(s.allow_add_info),
                    _ => self.seen_services.get(&f.service_ref).copied(),
                };
                allow != Some(false)
            }
        }
    }

    fn decode_checked(&mut self, ctx: &mut Ctx<'_>, kind: MarketKind, wire: &[u8]) -> Option<StoredElement> {
        let element = StoredElement::decode(kind, wire).ok();
        match element {
            Some(e) if self.authorized(&e, ctx.keys()) => {
                if let StoredElement::Service(s) = &e {
                    self.seen_services.insert(s.id.clone(), s.allow_add_info);
                }
                Some(e)
            }
            _ => {
                self.stats.rejected_unauthorized += 1;
                ctx.metrics().rejected_unauthorized += 1;
                None
            }
        }
    }

    fn on_market(&mut self, ctx: &mut Ctx<'_>, env: &Envelope) {
        let Some(kind) = env.kind.market_kind() else {
            return;
        };
        let Some(element) = self.decode_checked(ctx, kind, &env.body) else {
            return;
        };
        self.stats.market_received += 1;
        let id = element.id().clone();
        if self.own.contains_key(&id) || self.registry.mode() == RegistryMode::Null {
            return;
        }
        let expires = env
            .lease
            .map(|l| l.expires_at())
            .unwrap_or(ctx.now() + self.cfg.market_lease);
        let prov = self.remote.entry(id).or_default();
        prov.market_expires = Some(prov.market_expires.map_or(expires, |e| e.max(expires)));
        self.registry.put(element);
    }

    fn apply_events(&mut self, ctx: &mut Ctx<'_>, fed: &ElementId, events: Events) {
        for event in events {
            match event {
                StyleEvent::Joined => {
                    if let Some(m) = self.memberships.get_mut(fed) {
                        if !m.joined {
                            m.joined = true;
                            ctx.set_member(fed, true);
                            self.record(ctx, ManagerEvent::Joined(fed.clone()));
                        }
                    }
                }
                StyleEvent::Received(el) => self.on_federation_element(ctx, fed, &el),
                StyleEvent::Removed(id) => {
                    if let Some(m) = self.memberships.get_mut(fed) {
                        if m.replica.remove(&id) {
                            self.release(fed, &id);
                        }
                    }
                }
                StyleEvent::Dismissed => {
                    if self.memberships.contains_key(fed) && !self.managed.contains_key(fed) {
                        self.drop_membership(ctx, fed, false);
                        self.record(ctx, ManagerEvent::Dismissed(fed.clone()));
                    }
                }
            }
        }
    }

    fn on_federation_element(&mut self, ctx: &mut Ctx<'_>, fed: &ElementId, el: &PromotedElement) {
        let Some(m) = self.memberships.get(fed) else {
            return;
        };
        if m.replica.contains(&el.id) {
            return;
        }
        let (style, joined_at) = (m.style.kind(), m.joined_at);
        if !self.own.contains_key(&el.id) {
            if self.decode_checked(ctx, el.kind, &el.wire).is_none() {
                return;
            }
            self.stats.federation_received += 1;
            if self.registry.mode() == RegistryMode::InMemory {
                let element = StoredElement::decode(el.kind, &el.wire).expect("checked above");
                self.remote.entry(el.id.clone()).or_default().feds.insert(fed.clone());
                self.registry.put(element);
            }
        }
        let m = self.memberships.get_mut(fed).expect("checked above");
        m.replica.insert(el.id.clone());
        let reference = el.promoted_at.max(joined_at);
        ctx.record_latency(style, ctx.now().saturating_sub(reference));
        ctx.element_reached(&el.id);
    }

    fn record(&mut self, ctx: &Ctx<'_>, event: ManagerEvent) {
        self.log.push((ctx.now(), event));
    }

    /// Entry point for everything the world delivers to this manager.
    pub fn handle(&mut self, event: NodeEvent, ctx: &mut Ctx<'_>) {
        match event {
            NodeEvent::Deliver(env) => match &env.fed {
                Some(fed) => {
                    let fed = fed.clone();
                    if let Some(m) = self.memberships.get_mut(&fed) {
                        let events = m.style.on_deliver(ctx, &env);
                        self.apply_events(ctx, &fed, events);
                    }
                }
                None => self.on_market(ctx, &env),
            },
            NodeEvent::Reply { owner, env } => match owner {
                RequestOwner::Manager => self.on_directory_reply(ctx, &env),
                RequestOwner::Style(fed) => {
                    if let Some(m) = self.memberships.get_mut(&fed) {
                        let events = m.style.on_reply(ctx, &env);
                        self.apply_events(ctx, &fed, events);
                    }
                }
            },
            NodeEvent::RepliesDone {
                owner,
                request,
                completion,
                ..
            } => match owner {
                RequestOwner::Manager => self.on_request_done(ctx, &request, completion),
                RequestOwner::Style(fed) => {
                    if let Some(m) = self.memberships.get_mut(&fed) {
                        let events = m.style.on_replies_done(ctx, &request, completion);
                        self.apply_events(ctx, &fed, events);
                    }
                }
            },
            NodeEvent::P2p { from, packet } => {
                let fed = packet.fed.clone();
                match self.memberships.get_mut(&fed) {
                    Some(m) => {
                        let events = m.style.on_p2p(ctx, from, &packet.msg);
                        self.apply_events(ctx, &fed, events);
                    }
                    None => {
                        if !matches!(packet.msg, GossipMsg::NotMember | GossipMsg::Leave | GossipMsg::Dismiss) {
                            let nack = Arc::new(crate::styles::gossip::GossipPacket {
                                fed,
                                msg: GossipMsg::NotMember,
                            });
                            ctx.send_p2p(from, nack, TrafficClass::Control, 1);
                        }
                    }
                }
            }
            NodeEvent::SendFailed { to, packet } => {
                let fed = packet.fed.clone();
                if let Some(m) = self.memberships.get_mut(&fed) {
                    let events = m.style.on_send_failed(ctx, to, &packet.msg);
                    self.apply_events(ctx, &fed, events);
                }
            }
            NodeEvent::Timer(timer) => self.on_timer(ctx, timer),
            NodeEvent::Action(Action::Command(cmd)) => {
                let _ = self.run_command(cmd, ctx);
            }
            NodeEvent::Action(_) => {}
        }
    }

    /// Executes a command and accounts for it in the run metrics.
    pub fn run_command(&mut self, cmd: ManagementCommand, ctx: &mut Ctx<'_>) -> Result<CommandOutcome, CommandError> {
        let name = cmd.name();
        *ctx.metrics().commands.entry(name.to_owned()).or_default() += 1;
        let result = self.execute(cmd, ctx);
        if let Err(e) = &result {
            *ctx.metrics().command_errors.entry(e.name().to_owned()).or_default() += 1;
        }
        result
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: Timer) {
        match timer {
            Timer::MarketRenew(id) => {
                if self.shared.contains(&id) {
                    self.publish_share(ctx, &id);
                    ctx.set_timer(self.cfg.market_renew, Timer::MarketRenew(id));
                }
            }
            Timer::Purge => {
                let purged = self.purge_expired(ctx.now());
                if !purged.is_empty() {
                    self.record(ctx, ManagerEvent::Purged(purged));
                }
                ctx.set_timer(self.cfg.purge_period, Timer::Purge);
            }
            Timer::FederationRenew(fed) => {
                if let Some(info) = self.managed.get_mut(&fed) {
                    info.lease = info.lease.renewed(ctx.now());
                    let msg = DirMsg::Register(info.clone());
                    self.broadcast_directory(ctx, &msg);
                    ctx.set_timer(self.cfg.federation_renew, Timer::FederationRenew(fed));
                }
            }
            Timer::MemberCheck(fed) => {
                if self.memberships.contains_key(&fed) && !self.managed.contains_key(&fed) {
                    self.lookup_or_discover(ctx, Purpose::Check(fed.clone()));
                    ctx.set_timer(self.cfg.check_period, Timer::MemberCheck(fed));
                }
            }
            Timer::Style { fed, timer } => {
                if let Some(m) = self.memberships.get_mut(&fed) {
                    let events = m.style.on_timer(ctx, timer);
                    self.apply_events(ctx, &fed, events);
                }
            }
            Timer::Workload | Timer::DirectorySweep => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{SimConfig, Simulation};
    use crate::time::MINUTE;
    use crate::world::NodeIdx;
    use dire_model::query::SubConstraint;

    const SCENARIO: &str = r#"
seed = 2
duration = "2d"

[topology]
kind = "star"
leaves = 2

[manager]
market_lease = "2h"
market_renew = "30m"
purge_period = "10m"

[[nodes]]
id = "dir"
broker = "hub"
directory = true

[[nodes]]
id = "provider"
broker = "b1"

[[nodes]]
id = "customer"
broker = "b2"
"#;

    const PROVIDER: NodeIdx = 1;
    const CUSTOMER: NodeIdx = 2;

    fn sim() -> Simulation {
        Simulation::build(SimConfig::from_toml(SCENARIO).unwrap()).unwrap()
    }

    fn cmd(sim: &mut Simulation, node: NodeIdx, cmd: ManagementCommand) -> Result<CommandOutcome, CommandError> {
        sim.world.with_node(node, |n, ctx| n.dm.run_command(cmd, ctx))
    }

    fn service(sim: &mut Simulation, node: NodeIdx, allow_add_info: bool) -> ElementId {
        sim.world
            .with_node(node, |n, ctx| n.dm.create_service(ctx, "svc", allow_add_info, Vec::new()))
            .unwrap()
    }

    fn wsdl_interest() -> Interest {
        Interest::by_constraints(vec![SubConstraint::new("wsdl", "//operation").unwrap()]).unwrap()
    }

    fn fed(name: &str) -> FedRef {
        FedRef::Name(name.into())
    }

    fn advance(sim: &mut Simulation, by: SimTime) {
        let to = sim.world.now() + by;
        sim.world.run_until(to);
    }

    #[test]
    fn commands_on_unknown_elements_fail() {
        let mut sim = sim();
        let ghost = ElementId::new(NodeId::new("provider"), 999);
        assert_eq!(
            cmd(&mut sim, PROVIDER, ManagementCommand::Share(ghost.clone())),
            Err(CommandError::UnknownService(ghost.clone()))
        );
        assert_eq!(
            cmd(&mut sim, PROVIDER, ManagementCommand::RevokeInterest(InterestHandle(42))),
            Err(CommandError::UnknownInterest(42))
        );
        assert_eq!(sim.world.metrics().command_errors.values().sum::<u64>(), 2);
    }

    #[test]
    fn add_info_respects_the_service_setting() {
        let mut sim = sim();
        let closed = service(&mut sim, PROVIDER, false);
        let schema = SchemaDescriptor::new("observed", None).unwrap();
        let root = Element::new("observed");
        let err = sim
            .world
            .with_node(PROVIDER, |n, ctx| n.dm.create_add_info(ctx, &closed, &schema, root.clone()));
        assert_eq!(err, Err(CommandError::AddInfoForbidden(closed)));
        let ghost = ElementId::new(NodeId::new("nobody"), 1);
        let err = sim
            .world
            .with_node(CUSTOMER, |n, ctx| n.dm.create_add_info(ctx, &ghost, &schema, root));
        assert_eq!(err, Err(CommandError::UnknownService(ghost)));
    }

    #[test]
    fn unshared_services_are_purged_after_their_lease() {
        let mut sim = sim();
        let id = service(&mut sim, PROVIDER, true);
        cmd(&mut sim, CUSTOMER, ManagementCommand::DeclareInterest(Interest::ById(id.clone()))).unwrap();
        advance(&mut sim, MINUTE);
        cmd(&mut sim, PROVIDER, ManagementCommand::Share(id.clone())).unwrap();
        advance(&mut sim, 3 * HOUR);
        assert_eq!(sim.world.node(CUSTOMER).dm.remote_ids(), vec![id.clone()]);
        cmd(&mut sim, PROVIDER, ManagementCommand::Unshare(id.clone())).unwrap();
        advance(&mut sim, HOUR);
        assert_eq!(sim.world.node(CUSTOMER).dm.remote_ids(), vec![id.clone()]);
        advance(&mut sim, 2 * HOUR);
        assert!(sim.world.node(CUSTOMER).dm.remote_ids().is_empty());
        assert!(sim
            .world
            .node(CUSTOMER)
            .dm
            .log
            .iter()
            .any(|(_, e)| matches!(e, ManagerEvent::Purged(ids) if ids.contains(&id))));
    }

    fn wsdl_service(sim: &mut Simulation) -> ElementId {
        let doc: crate::sim::FacetDoc =
            toml::from_str("schema = \"wsdl\"\nxml = '<definitions><operation name=\"q\"/></definitions>'").unwrap();
        let facets = vec![doc.build().unwrap()];
        let id = sim
            .world
            .with_node(PROVIDER, |n, ctx| n.dm.create_service(ctx, "svc", true, facets))
            .unwrap();
        cmd(sim, PROVIDER, ManagementCommand::Share(id.clone())).unwrap();
        id
    }

    #[test]
    fn revoked_interests_stop_deliveries() {
        let mut sim = sim();
        let handle = match cmd(&mut sim, CUSTOMER, ManagementCommand::DeclareInterest(wsdl_interest())).unwrap() {
            CommandOutcome::Interest(h) => h,
            other => panic!("unexpected outcome {other:?}"),
        };
        advance(&mut sim, MINUTE);
        let first = wsdl_service(&mut sim);
        advance(&mut sim, MINUTE);
        assert_eq!(sim.world.node(CUSTOMER).dm.remote_ids(), vec![first.clone()]);
        cmd(&mut sim, CUSTOMER, ManagementCommand::RevokeInterest(handle)).unwrap();
        assert_eq!(
            cmd(&mut sim, CUSTOMER, ManagementCommand::RevokeInterest(handle)),
            Err(CommandError::UnknownInterest(handle.0))
        );
        advance(&mut sim, MINUTE);
        wsdl_service(&mut sim);
        advance(&mut sim, MINUTE);
        assert_eq!(sim.world.node(CUSTOMER).dm.remote_ids(), vec![first]);
    }

    #[test]
    fn federation_roles_are_enforced() {
        let mut sim = sim();
        let id = service(&mut sim, CUSTOMER, true);
        assert_eq!(
            cmd(&mut sim, CUSTOMER, ManagementCommand::Promote(fed("f"), id.clone())),
            Err(CommandError::NotAMember("f".into()))
        );
        cmd(
            &mut sim,
            PROVIDER,
            ManagementCommand::CreateFederation {
                name: "f".into(),
                style: StyleKind::Psr,
            },
        )
        .unwrap();
        assert_eq!(
            cmd(&mut sim, PROVIDER, ManagementCommand::LeaveFederation(fed("f"))),
            Err(CommandError::ManagerCannotLeave("f".into()))
        );
        advance(&mut sim, MINUTE);
        cmd(&mut sim, CUSTOMER, ManagementCommand::JoinFederation(fed("f"))).unwrap();
        advance(&mut sim, MINUTE);
        let joined = &sim.world.node(CUSTOMER).dm.log;
        assert!(joined.iter().any(|(_, e)| matches!(e, ManagerEvent::Joined(_))));
        assert_eq!(
            cmd(&mut sim, CUSTOMER, ManagementCommand::JoinFederation(fed("f"))),
            Err(CommandError::AlreadyJoined("f".into()))
        );
        assert_eq!(
            cmd(&mut sim, CUSTOMER, ManagementCommand::DismissFederation(fed("f"))),
            Err(CommandError::NotManager("f".into()))
        );
        cmd(&mut sim, CUSTOMER, ManagementCommand::Promote(fed("f"), id.clone())).unwrap();
        advance(&mut sim, MINUTE);
        assert_eq!(sim.world.node(PROVIDER).dm.replica(&fed("f")), Some(vec![id]));
    }
}
