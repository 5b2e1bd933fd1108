use serde::{Deserialize, Serialize};

use crate::id::{ElementId, NodeId};
use crate::signature::{Signature, SignatureError, SignatureScheme};
use crate::xml::FacetXml;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FacetKind {
    /// Provided features, authored only by the service creator.
    Specification,
    /// Observed features, authored by anyone the creator allows.
    AdditionalInfo,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Facet {
    pub id: ElementId,
    pub kind: FacetKind,
    pub schema_id: String,
    pub content: FacetXml,
    pub author: NodeId,
    pub signature: Signature,
    pub service_ref: ElementId,
}

impl Facet {
    /// Builds a facet and signs its content as `author`.
    pub fn signed(
        id: ElementId,
        kind: FacetKind,
        service_ref: ElementId,
        content: FacetXml,
        author: NodeId,
        scheme: &dyn SignatureScheme,
    ) -> Result<Self, SignatureError> {
        let signature = scheme.sign_doc(&author, &content)?;
        Ok(Facet {
            id,
            kind,
            schema_id: content.schema_id().to_owned(),
            content,
            author,
            signature,
            service_ref,
        })
    }

    /// Signature is by the author and matches the content.
    pub fn verify(&self, scheme: &dyn SignatureScheme) -> bool {
        self.schema_id == self.content.schema_id()
            && self.signature.signer == self.author
            && scheme.verify_doc(&self.author, &self.content, &self.signature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttachError {
    #[error("specification facets can only be added by the service creator")]
    SpecByNonCreator,
    #[error("service does not accept additional-information facets")]
    AddInfoForbidden,
    #[error("element id {0} already present in the service")]
    DuplicateId(ElementId),
    #[error("facet refers to service {found}, not {expected}")]
    WrongService { expected: ElementId, found: ElementId },
    #[error("facet signature does not verify")]
    InvalidSignature,
}

/// Why a received service description was refused.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthorityError {
    #[error("specification facet {0} not authored by the service creator")]
    ForeignSpecification(ElementId),
    #[error("facet {0} fails signature verification")]
    BadSignature(ElementId),
    #[error("additional-information facet {0} on a service that forbids them")]
    AddInfoForbidden(ElementId),
    #[error("facet {0} does not belong to this service")]
    WrongService(ElementId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServiceEntry {
    pub id: ElementId,
    pub name: String,
    pub creator: NodeId,
    pub allow_add_info: bool,
    pub spec_facets: Vec<Facet>,
    pub add_info_facets: Vec<Facet>,
}

impl ServiceEntry {
    pub fn new(id: ElementId, name: impl Into<String>, creator: NodeId, allow_add_info: bool) -> Self {
        ServiceEntry {
            id,
            name: name.into(),
            creator,
            allow_add_info,
            spec_facets: Vec::new(),
            add_info_facets: Vec::new(),
        }
    }

    pub fn facets(&self) -> impl Iterator<Item = &Facet> {
        self.spec_facets.iter().chain(self.add_info_facets.iter())
    }

    fn contains_id(&self, id: &ElementId) -> bool {
        &self.id == id || self.facets().any(|f| &f.id == id)
    }

    /// Adds `facet` on behalf of `actor`, enforcing authorship rules.
    pub fn attach_facet(
        &mut self,
        facet: Facet,
        actor: &NodeId,
        scheme: &dyn SignatureScheme,
    ) -> Result<(), AttachError> {
        if facet.service_ref != self.id {
            return Err(AttachError::WrongService {
                expected: self.id.clone(),
                found: facet.service_ref,
            });
        }
        match facet.kind {
            FacetKind::Specification => {
                if actor != &self.creator || facet.author != self.creator {
                    return Err(AttachError::SpecByNonCreator);
                }
            }
            FacetKind::AdditionalInfo => {
                if !self.allow_add_info {
                    return Err(AttachError::AddInfoForbidden);
                }
                if &facet.author != actor {
                    return Err(AttachError::InvalidSignature);
                }
            }
        }
        if !facet.verify(scheme) {
            return Err(AttachError::InvalidSignature);
        }
        if self.contains_id(&facet.id) {
            return Err(AttachError::DuplicateId(facet.id));
        }
        match facet.kind {
            FacetKind::Specification => self.spec_facets.push(facet),
            FacetKind::AdditionalInfo => self.add_info_facets.push(facet),
        }
        Ok(())
    }

    /// Checks a description received from the network: every specification
    /// facet is by the creator and every signature verifies.
    pub fn verify_authority(&self, scheme: &dyn SignatureScheme) -> Result<(), AuthorityError> {
        for facet in &self.spec_facets {
            if facet.service_ref != self.id {
                return Err(AuthorityError::WrongService(facet.id.clone()));
            }
            if facet.kind != FacetKind::Specification || facet.author != self.creator {
                return Err(AuthorityError::ForeignSpecification(facet.id.clone()));
            }
            if !facet.verify(scheme) {
                return Err(AuthorityError::BadSignature(facet.id.clone()));
            }
        }
        if !self.allow_add_info {
            if let Some(f) = self.add_info_facets.first() {
                return Err(AuthorityError::AddInfoForbidden(f.id.clone()));
            }
        }
        for facet in &self.add_info_facets {
            if facet.service_ref != self.id {
                return Err(AuthorityError::WrongService(facet.id.clone()));
            }
            if !facet.verify(scheme) {
                return Err(AuthorityError::BadSignature(facet.id.clone()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::IdGenerator;
    use crate::signature::KeyRing;
    use crate::xml::{Element, SchemaDescriptor};

    struct Fixture {
        ring: KeyRing,
        provider: NodeId,
        customer: NodeId,
        ids: IdGenerator,
        wsdl: SchemaDescriptor,
    }

    fn fixture() -> Fixture {
        let provider = NodeId::new("provider");
        let customer = NodeId::new("customer");
        let mut ring = KeyRing::new();
        ring.register(provider.clone(), 1);
        ring.register(customer.clone(), 1);
        Fixture {
            ring,
            ids: IdGenerator::new(provider.clone()),
            provider,
            customer,
            wsdl: SchemaDescriptor::open("WSDL").unwrap(),
        }
    }

    fn facet(fx: &mut Fixture, service: &ElementId, kind: FacetKind, author: &NodeId) -> Facet {
        let root = Element::new("definitions").child(Element::new("operation").attr("name", "getLastTrade"));
        let content = FacetXml::new(fx.ids.next_id(), &fx.wsdl, root).unwrap();
        Facet::signed(fx.ids.next_id(), kind, service.clone(), content, author.clone(), &fx.ring).unwrap()
    }

    #[test]
    fn creator_attaches_specification_facet() {
        let mut fx = fixture();
        let mut svc = ServiceEntry::new(fx.ids.next_id(), "InformationBroker", fx.provider.clone(), false);
        let author = fx.provider.clone();
        let f = facet(&mut fx, &svc.id.clone(), FacetKind::Specification, &author);
        svc.attach_facet(f, &fx.provider, &fx.ring).unwrap();
        assert_eq!(svc.spec_facets.len(), 1);
        assert!(svc.verify_authority(&fx.ring).is_ok());
    }

    #[test]
    fn non_creator_cannot_attach_specification_facet() {
        let mut fx = fixture();
        let mut svc = ServiceEntry::new(fx.ids.next_id(), "s", fx.provider.clone(), true);
        let author = fx.customer.clone();
        let f = facet(&mut fx, &svc.id.clone(), FacetKind::Specification, &author);
        assert_eq!(svc.attach_facet(f, &fx.customer, &fx.ring), Err(AttachError::SpecByNonCreator));
    }

    #[test]
    fn add_info_requires_permission() {
        let mut fx = fixture();
        let mut closed = ServiceEntry::new(fx.ids.next_id(), "s", fx.provider.clone(), false);
        let author = fx.customer.clone();
        let f = facet(&mut fx, &closed.id.clone(), FacetKind::AdditionalInfo, &author);
        assert_eq!(closed.attach_facet(f, &fx.customer, &fx.ring), Err(AttachError::AddInfoForbidden));

        let mut open = ServiceEntry::new(fx.ids.next_id(), "s", fx.provider.clone(), true);
        let author = fx.customer.clone();
        let f = facet(&mut fx, &open.id.clone(), FacetKind::AdditionalInfo, &author);
        open.attach_facet(f, &fx.customer, &fx.ring).unwrap();
        assert_eq!(open.add_info_facets.len(), 1);
    }

    #[test]
    fn duplicate_facet_id_is_rejected() {
        let mut fx = fixture();
        let mut svc = ServiceEntry::new(fx.ids.next_id(), "s", fx.provider.clone(), false);
        let author = fx.provider.clone();
        let f = facet(&mut fx, &svc.id.clone(), FacetKind::Specification, &author);
        svc.attach_facet(f.clone(), &fx.provider, &fx.ring).unwrap();
        assert_eq!(
            svc.attach_facet(f.clone(), &fx.provider, &fx.ring),
            Err(AttachError::DuplicateId(f.id))
        );
    }

    #[test]
    fn facet_for_other_service_is_rejected() {
        let mut fx = fixture();
        let mut svc = ServiceEntry::new(fx.ids.next_id(), "s", fx.provider.clone(), false);
        let other = fx.ids.next_id();
        let author = fx.provider.clone();
        let f = facet(&mut fx, &other, FacetKind::Specification, &author);
        assert!(matches!(
            svc.attach_facet(f, &fx.provider, &fx.ring),
            Err(AttachError::WrongService { .. })
        ));
    }

    #[test]
    fn forged_specification_is_caught_on_receive() {
        let mut fx = fixture();
        let mut svc = ServiceEntry::new(fx.ids.next_id(), "s", fx.provider.clone(), false);
        // Customer claims provider authorship but can only sign with its own key.
        let author = fx.customer.clone();
        let mut f = facet(&mut fx, &svc.id.clone(), FacetKind::Specification, &author);
        f.author = fx.provider.clone();
        f.signature.signer = fx.provider.clone();
        svc.spec_facets.push(f.clone());
        assert_eq!(svc.verify_authority(&fx.ring), Err(AuthorityError::BadSignature(f.id)));
    }
}
