//! Forged elements injected by an outsider node.

use dire_core::dispatcher::{Envelope, LeaseTerms, PayloadKind};
use dire_core::registry::StoredElement;
use dire_core::sim::Simulation;
use dire_core::time::DAY;
use dire_model::service::{Facet, FacetKind, ServiceEntry};
use dire_model::xml::{Element, FacetXml, SchemaDescriptor};
use dire_model::{ElementId, NodeId};
use proptest::prelude::*;

/// Ways an outsider may try to slip content past a customer.
#[derive(Clone, Copy, Debug)]
pub enum Forgery {
    /// Specification facet signed by the outsider on a service it did not create.
    ForeignSpec,
    /// Specification facet claiming the creator as author, signed by the outsider.
    ImpersonatedSpec,
    /// Stand-alone additional information about a closed service.
    AddInfoOnClosed,
    /// The closed service re-sent with additional information attached.
    ClosedWithAddInfo,
    /// The open service with its specification edited after signing.
    TamperedSpec,
    /// Additional information edited after signing.
    TamperedAddInfo,
}

pub const FORGERIES: [Forgery; 6] = [
    Forgery::ForeignSpec,
    Forgery::ImpersonatedSpec,
    Forgery::AddInfoOnClosed,
    Forgery::ClosedWithAddInfo,
    Forgery::TamperedSpec,
    Forgery::TamperedAddInfo,
];

pub fn arb_child() -> impl Strategy<Value = Element> {
    ("[a-z]{1,6}", "[a-z0-9 ]{0,8}", prop::option::of("[0-9]{1,3}"))
        .prop_map(|(name, text, attr)| {
            let el = Element::new(name).text(text);
            match attr {
                Some(v) => el.attr("v", v),
                None => el,
            }
        })
}

pub fn service_of(sim: &Simulation, label: &str) -> ServiceEntry {
    let id = sim.world.label(label).expect("label");
    match sim.world.node_by_name("provider").unwrap().dm.own_element(id) {
        Some(StoredElement::Service(s)) => s.clone(),
        other => panic!("{label}: {other:?}"),
    }
}

fn tamper(facet: &mut Facet, child: &Element) {
    let root = facet.content.root().clone().child(child.clone());
    facet.content = FacetXml::from_parts(facet.content.id().clone(), facet.schema_id.clone(), root).unwrap();
}

/// Injects one forgery of each listed kind from the outsider; returns how
/// many elements were sent and their ids.
pub fn inject(sim: &mut Simulation, plan: &[(usize, Element)]) -> (u64, Vec<ElementId>) {
    let open = service_of(sim, "open");
    let closed = service_of(sim, "closed");
    let provider = NodeId::new("provider");
    let outsider = sim.world.index_of(&NodeId::new("outsider")).unwrap();
    sim.world.with_node(outsider, |node, ctx| {
        let me = node.id.clone();
        let wsdl = SchemaDescriptor::open("wsdl").unwrap();
        let observed = SchemaDescriptor::open("observed").unwrap();
        let mut forged_ids = Vec::new();
        let mut sent = 0;
        for (pick, child) in plan {
            let spec_root = Element::new("definitions")
                .child(Element::new("operation").attr("name", "quote"))
                .child(child.clone());
            let info_root = Element::new("observed").child(child.clone());
            let element = match FORGERIES[pick % FORGERIES.len()] {
                Forgery::ForeignSpec | Forgery::ImpersonatedSpec => {
                    let mut svc = ServiceEntry::new(ctx.next_id(), "forged", provider.clone(), true);
                    let doc = FacetXml::new(ctx.next_id(), &wsdl, spec_root).unwrap();
                    let mut f = Facet::signed(ctx.next_id(), FacetKind::Specification, svc.id.clone(), doc, me.clone(), ctx.keys())
                        .unwrap();
                    if matches!(FORGERIES[pick % FORGERIES.len()], Forgery::ImpersonatedSpec) {
                        f.author = provider.clone();
                    }
                    svc.spec_facets.push(f);
                    forged_ids.push(svc.id.clone());
                    StoredElement::Service(svc)
                }
                Forgery::AddInfoOnClosed => {
                    let doc = FacetXml::new(ctx.next_id(), &observed, info_root).unwrap();
                    let f = Facet::signed(ctx.next_id(), FacetKind::AdditionalInfo, closed.id.clone(), doc, me.clone(), ctx.keys())
                        .unwrap();
                    forged_ids.push(f.id.clone());
                    StoredElement::Facet(f)
                }
                Forgery::ClosedWithAddInfo => {
                    let mut svc = closed.clone();
                    let doc = FacetXml::new(ctx.next_id(), &observed, info_root).unwrap();
                    let f = Facet::signed(ctx.next_id(), FacetKind::AdditionalInfo, svc.id.clone(), doc, me.clone(), ctx.keys())
                        .unwrap();
                    svc.add_info_facets.push(f);
                    StoredElement::Service(svc)
                }
                Forgery::TamperedSpec => {
                    let mut svc = open.clone();
                    tamper(&mut svc.spec_facets[0], child);
                    StoredElement::Service(svc)
                }
                Forgery::TamperedAddInfo => {
                    let doc = FacetXml::new(ctx.next_id(), &observed, Element::new("observed")).unwrap();
                    let mut f = Facet::signed(ctx.next_id(), FacetKind::AdditionalInfo, open.id.clone(), doc, me.clone(), ctx.keys())
                        .unwrap();
                    tamper(&mut f, child);
                    forged_ids.push(f.id.clone());
                    StoredElement::Facet(f)
                }
            };
            let kind = match element {
                StoredElement::Service(_) => PayloadKind::Service,
                StoredElement::Facet(_) => PayloadKind::AddInfo,
            };
            let env = Envelope::new(ctx.next_id(), kind, element.encode()).with_lease(LeaseTerms {
                issued_at: ctx.now(),
                duration: 7 * DAY,
            });
            ctx.publish(env);
            sent += 1;
        }
        (sent, forged_ids)
    })
}

pub fn customer_state(sim: &Simulation) -> (u64, Vec<ElementId>) {
    let dm = &sim.world.node_by_name("customer").unwrap().dm;
    (dm.stats.rejected_unauthorized, dm.registry().ids())
}

