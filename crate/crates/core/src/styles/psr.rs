//! Publish/subscribe with replies: promotions are published once and last
//! until discarded; a joiner asks the members for their promotions with a
//! repliable request.

use std::collections::BTreeMap;
use std::sync::Arc;

use dire_model::ElementId;

use super::{CooperationStyle, Events, FedMsg, PromotedElement, StyleEvent, StyleKind, TopicParams};
use crate::directory::FederationInfo;
use crate::dispatcher::{Completion, Envelope, Filter, PayloadKind, SubId, TrafficClass};
use crate::time::SECOND;
use crate::world::{Ctx, RequestOwner, StyleTimer, Timer};

pub struct PsrStyle {
    fed: ElementId,
    topic: String,
    params: TopicParams,
    sub: Option<SubId>,
    own: BTreeMap<ElementId, Arc<PromotedElement>>,
    received: BTreeMap<ElementId, Arc<PromotedElement>>,
    join_request: Option<ElementId>,
    attempts: u32,
    joined: bool,
    /// The last catch-up attempt ended without every reply.
    pub partial_catch_up: bool,
}

impl PsrStyle {
    pub fn new(info: &FederationInfo, params: TopicParams) -> Self {
        PsrStyle {
            fed: info.fed_id.clone(),
            topic: info.join_params.get("topic").cloned().unwrap_or_else(|| info.name.clone()),
            params,
            sub: None,
            own: BTreeMap::new(),
            received: BTreeMap::new(),
            join_request: None,
            attempts: 0,
            joined: false,
            partial_catch_up: false,
        }
    }

    fn envelope(&self, ctx: &mut Ctx<'_>, msg: &FedMsg, class: TrafficClass) -> Envelope {
        Envelope::new(ctx.next_id(), PayloadKind::Federation, msg.encode())
            .on_topic(self.topic.clone())
            .with_class(class)
            .for_federation(self.fed.clone())
    }

    fn request_catch_up(&mut self, ctx: &mut Ctx<'_>) {
        self.attempts += 1;
        let env = self.envelope(ctx, &FedMsg::JoinRequest, TrafficClass::Control);
        self.join_request = Some(env.msg_id.clone());
        ctx.publish_request(env, RequestOwner::Style(self.fed.clone()));
    }

    fn accept(&mut self, el: PromotedElement) -> Option<StyleEvent> {
        if self.own.contains_key(&el.id) {
            return None;
        }
        let el = Arc::new(el);
        self.received.insert(el.id.clone(), el.clone());
        Some(StyleEvent::Received(el))
    }
}

impl CooperationStyle for PsrStyle {
    fn kind(&self) -> StyleKind {
        StyleKind::Psr
    }

    fn create(&mut self, ctx: &mut Ctx<'_>) -> Events {
        self.sub = Some(ctx.subscribe(Filter::Topic(self.topic.clone())));
        self.joined = true;
        vec![StyleEvent::Joined]
    }

    fn join(&mut self, ctx: &mut Ctx<'_>) -> Events {
        if self.sub.is_none() {
            self.sub = Some(ctx.subscribe(Filter::Topic(self.topic.clone())));
        }
        self.attempts = 0;
        self.request_catch_up(ctx);
        Vec::new()
    }

    fn leave(&mut self, ctx: &mut Ctx<'_>) {
        let own: Vec<ElementId> = self.own.keys().cloned().collect();
        for id in own {
            let env = self.envelope(ctx, &FedMsg::Discard(id), TrafficClass::Control);
            ctx.publish(env);
        }
        if let Some(sub) = self.sub.take() {
            ctx.unsubscribe(sub);
        }
        self.own.clear();
        self.received.clear();
        self.joined = false;
    }

    fn close(&mut self, ctx: &mut Ctx<'_>) {
        if let Some(sub) = self.sub.take() {
            ctx.unsubscribe(sub);
        }
    }

    fn promote(&mut self, ctx: &mut Ctx<'_>, element: Arc<PromotedElement>) -> Events {
        self.own.insert(element.id.clone(), element.clone());
        let env = self.envelope(ctx, &FedMsg::Promote((*element).clone()), TrafficClass::Payload);
        ctx.publish(env);
        Vec::new()
    }

    fn retract(&mut self, ctx: &mut Ctx<'_>, id: &ElementId) -> Events {
        if self.own.remove(id).is_none() {
            return Vec::new();
        }
        let env = self.envelope(ctx, &FedMsg::Discard(id.clone()), TrafficClass::Control);
        ctx.publish(env);
        if self.received.contains_key(id) {
            Vec::new()
        } else {
            vec![StyleEvent::Removed(id.clone())]
        }
    }

    fn dismiss(&mut self, ctx: &mut Ctx<'_>) {
        let env = self.envelope(ctx, &FedMsg::Dismiss, TrafficClass::Control);
        ctx.publish(env);
    }

    fn on_deliver(&mut self, ctx: &mut Ctx<'_>, env: &Envelope) -> Events {
        let Ok(msg) = FedMsg::decode(&env.body) else {
            return Vec::new();
        };
        match msg {
            FedMsg::Promote(el) => self.accept(el).into_iter().collect(),
            FedMsg::Discard(id) => match self.received.remove(&id) {
                Some(_) if !self.own.contains_key(&id) => vec![StyleEvent::Removed(id)],
                _ => Vec::new(),
            },
            FedMsg::JoinRequest => {
                if env.repliable {
                    let els: Vec<PromotedElement> = self.own.values().map(|e| (**e).clone()).collect();
                    let units = els.len() as u32;
                    let id = ctx.next_id();
                    let mut reply = FedMsg::JoinReply(els).encode();
                    reply.shrink_to_fit();
                    ctx.reply_with_class(env, id, reply, units, TrafficClass::Payload);
                }
                Vec::new()
            }
            FedMsg::Dismiss => vec![StyleEvent::Dismissed],
            FedMsg::JoinReply(_) => Vec::new(),
        }
    }

    fn on_reply(&mut self, _ctx: &mut Ctx<'_>, env: &Envelope) -> Events {
        if env.reply_to != self.join_request {
            return Vec::new();
        }
        match FedMsg::decode(&env.body) {
            Ok(FedMsg::JoinReply(els)) => els.into_iter().filter_map(|el| self.accept(el)).collect(),
            _ => Vec::new(),
        }
    }

    fn on_replies_done(&mut self, ctx: &mut Ctx<'_>, request: &ElementId, completion: Completion) -> Events {
        if Some(request) != self.join_request.as_ref() {
            return Vec::new();
        }
        self.join_request = None;
        self.partial_catch_up = completion == Completion::TimedOut;
        let mut events = Vec::new();
        if !self.joined {
            self.joined = true;
            events.push(StyleEvent::Joined);
        }
        if self.partial_catch_up && self.attempts < self.params.join_attempts {
            ctx.set_timer(
                SECOND,
                Timer::Style {
                    fed: self.fed.clone(),
                    timer: StyleTimer::JoinRetry,
                },
            );
        }
        events
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: StyleTimer) -> Events {
        if timer == StyleTimer::JoinRetry && self.sub.is_some() {
            self.request_catch_up(ctx);
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
}

#[cfg(test)]
mod tests {
    use super::super::testkit::{fed_messages, held, labels, run_until, FedKit};
    use super::*;
    use crate::time::{DAY, HOUR, MINUTE};

    #[test]
    fn late_joiner_catches_up_from_a_reply() {
        let kit = FedKit::new(StyleKind::Psr, 4, 3).step(3, "2h", "op = \"leave_federation\"\nfederation = \"fed\"");
        let mut sim = kit.step(3, "3h", "op = \"join_federation\"\nfederation = \"fed\"").build();
        run_until(&mut sim, 150 * MINUTE);
        assert_eq!(held(&sim.world, 3), None);
        run_until(&mut sim, 3 * HOUR + MINUTE);
        assert_eq!(held(&sim.world, 3), labels(&["s0", "s1", "s2"]));
    }

    #[test]
    fn retraction_is_immediate() {
        let mut sim = FedKit::new(StyleKind::Psr, 4, 2)
            .step(1, "1h", "op = \"retract\"\nfederation = \"fed\"\nelement = \"s1\"")
            .build();
        run_until(&mut sim, HOUR - MINUTE);
        assert_eq!(held(&sim.world, 3), labels(&["s0", "s1"]));
        run_until(&mut sim, HOUR + MINUTE);
        for i in 0..4 {
            assert_eq!(held(&sim.world, i), labels(&["s0"]), "member m{i}");
        }
    }

    #[test]
    fn promotions_are_sent_once() {
        let mut sim = FedKit::new(StyleKind::Psr, 4, 2).build();
        sim.world.run_until(20 * MINUTE);
        let after_promotion = fed_messages(&sim.world);
        assert_eq!(after_promotion, 2 * 3);
        sim.world.run_until(DAY - MINUTE);
        assert_eq!(fed_messages(&sim.world), after_promotion);
    }
}
