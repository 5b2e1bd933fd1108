//! Publish/subscribe with leases: promotions are re-published on the
//! federation topic every renew period and expire at members when the
//! renewals stop.

use std::collections::BTreeMap;
use std::sync::Arc;

use dire_model::ElementId;

use super::{CooperationStyle, Events, FedMsg, PromotedElement, StyleEvent, StyleKind, TopicParams};
use crate::directory::FederationInfo;
use crate::dispatcher::{Envelope, Filter, LeaseTerms, PayloadKind, SubId, TrafficClass};
use crate::time::SimTime;
use crate::world::{Ctx, StyleTimer, Timer};

pub struct PsStyle {
    fed: ElementId,
    topic: String,
    params: TopicParams,
    sub: Option<SubId>,
    own: BTreeMap<ElementId, Arc<PromotedElement>>,
    /// Received promotions with their expiry.
    received: BTreeMap<ElementId, (Arc<PromotedElement>, SimTime)>,
}

impl PsStyle {
    pub fn new(info: &FederationInfo, params: TopicParams) -> Self {
        PsStyle {
            fed: info.fed_id.clone(),
            topic: info.join_params.get("topic").cloned().unwrap_or_else(|| info.name.clone()),
            params,
            sub: None,
            own: BTreeMap::new(),
            received: BTreeMap::new(),
        }
    }

    fn start(&mut self, ctx: &mut Ctx<'_>) -> Events {
        if self.sub.is_none() {
            self.sub = Some(ctx.subscribe(Filter::Topic(self.topic.clone())));
            let phase = self.params.sweep;
            ctx.set_timer(phase, self.timer(StyleTimer::Sweep));
        }
        vec![StyleEvent::Joined]
    }

    fn timer(&self, timer: StyleTimer) -> Timer {
        Timer::Style {
            fed: self.fed.clone(),
            timer,
        }
    }

    fn publish(&self, ctx: &mut Ctx<'_>, msg: FedMsg, class: TrafficClass, lease: Option<LeaseTerms>) {
        let mut env = Envelope::new(ctx.next_id(), PayloadKind::Federation, msg.encode())
            .on_topic(self.topic.clone())
            .with_class(class)
            .for_federation(self.fed.clone());
        if let Some(l) = lease {
            env = env.with_lease(l);
        }
        ctx.publish(env);
    }

    fn publish_promotion(&self, ctx: &mut Ctx<'_>, el: &PromotedElement) {
        let lease = LeaseTerms {
            issued_at: ctx.now(),
            duration: self.params.lease,
        };
        self.publish(ctx, FedMsg::Promote(el.clone()), TrafficClass::Payload, Some(lease));
    }
}

impl CooperationStyle for PsStyle {
    fn kind(&self) -> StyleKind {
        StyleKind::Ps
    }

    fn create(&mut self, ctx: &mut Ctx<'_>) -> Events {
        self.start(ctx)
    }

    fn join(&mut self, ctx: &mut Ctx<'_>) -> Events {
        self.start(ctx)
    }

    fn leave(&mut self, ctx: &mut Ctx<'_>) {
        // Own promotions simply stop being renewed and expire at members.
        if let Some(sub) = self.sub.take() {
            ctx.unsubscribe(sub);
        }
        self.own.clear();
        self.received.clear();
    }

    fn close(&mut self, ctx: &mut Ctx<'_>) {
        if let Some(sub) = self.sub.take() {
            ctx.unsubscribe(sub);
        }
    }

    fn promote(&mut self, ctx: &mut Ctx<'_>, element: Arc<PromotedElement>) -> Events {
        let id = element.id.clone();
        if self.own.insert(id.clone(), element.clone()).is_none() {
            ctx.set_timer(self.params.renew, self.timer(StyleTimer::Renew(id)));
        }
        self.publish_promotion(ctx, &element);
        Vec::new()
    }

    fn retract(&mut self, _ctx: &mut Ctx<'_>, id: &ElementId) -> Events {
        if self.own.remove(id).is_some() && !self.received.contains_key(id) {
            vec![StyleEvent::Removed(id.clone())]
        } else {
            Vec::new()
        }
    }

    fn dismiss(&mut self, ctx: &mut Ctx<'_>) {
        self.publish(ctx, FedMsg::Dismiss, TrafficClass::Control, None);
    }

    fn on_deliver(&mut self, ctx: &mut Ctx<'_>, env: &Envelope) -> Events {
        let Ok(msg) = FedMsg::decode(&env.body) else {
            return Vec::new();
        };
        match msg {
            FedMsg::Promote(el) => {
                let expires = env
                    .lease
                    .map(|l| l.expires_at())
                    .unwrap_or(ctx.now() + self.params.lease);
                let el = Arc::new(el);
                let slot = self.received.entry(el.id.clone()).or_insert((el.clone(), 0));
                slot.1 = slot.1.max(expires);
                slot.0 = el.clone();
                vec![StyleEvent::Received(el)]
            }
            FedMsg::Dismiss => vec![StyleEvent::Dismissed],
            _ => Vec::new(),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: StyleTimer) -> Events {
        match timer {
            StyleTimer::Renew(id) => {
                if let Some(el) = self.own.get(&id).cloned() {
                    self.publish_promotion(ctx, &el);
                    ctx.set_timer(self.params.renew, self.timer(StyleTimer::Renew(id)));
                }
                Vec::new()
            }
            StyleTimer::Sweep if self.sub.is_some() => {
                let now = ctx.now();
                let expired: Vec<ElementId> = self
                    .received
                    .iter()
                    .filter(|(_, (_, exp))| now > *exp)
                    .map(|(id, _)| id.clone())
                    .collect();
                let mut events = Vec::new();
                for id in expired {
                    self.received.remove(&id);
                    if !self.own.contains_key(&id) {
                        events.push(StyleEvent::Removed(id));
                    }
                }
                ctx.set_timer(self.params.sweep, self.timer(StyleTimer::Sweep));
                events
            }
            _ => Vec::new(),
        }
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
}
