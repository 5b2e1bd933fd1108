//! Local registry contract and its two implementations.
//!
//! The delivery manager only talks to a registry through [`LocalRegistry`];
//! adapters for real registry products would implement the same trait. The
//! null registry drops everything it is given and stands in for the
//! lightweight managers used to generate load.

use std::collections::{BTreeMap, BTreeSet};

use dire_model::codec;
use dire_model::query::{match_add_info, match_service, Interest, MarketKind, MatchStats};
use dire_model::{ElementId, Facet, ModelError, ServiceEntry};
use serde::Deserialize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StoredElement {
    Service(ServiceEntry),
    Facet(Facet),
}

impl StoredElement {
    pub fn id(&self) -> &ElementId {
        match self {
            StoredElement::Service(s) => &s.id,
            StoredElement::Facet(f) => &f.id,
        }
    }

    pub fn market_kind(&self) -> MarketKind {
        match self {
            StoredElement::Service(_) => MarketKind::Service,
            StoredElement::Facet(_) => MarketKind::AddInfo,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            StoredElement::Service(s) => codec::encode_service(s),
            StoredElement::Facet(f) => codec::encode_facet(f),
        }
    }

    pub fn decode(kind: MarketKind, bytes: &[u8]) -> Result<Self, ModelError> {
        Ok(match kind {
            MarketKind::Service => StoredElement::Service(codec::decode_service(bytes)?),
            MarketKind::AddInfo => StoredElement::Facet(codec::decode_facet(bytes)?),
        })
    }

    pub fn matches(&self, interest: &Interest) -> bool {
        let mut stats = MatchStats::default();
        match self {
            StoredElement::Service(s) => match_service(interest, s, &mut stats),
            StoredElement::Facet(f) => match_add_info(interest, f, &mut stats),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistryMode {
    #[default]
    InMemory,
    Null,
}

pub trait LocalRegistry: Send {
    fn mode(&self) -> RegistryMode;
    /// Inserts or replaces the element with the same id.
    fn put(&mut self, element: StoredElement);
    fn get(&self, id: &ElementId) -> Option<&StoredElement>;
    fn delete(&mut self, id: &ElementId) -> bool;
    fn query(&self, interest: &Interest) -> Vec<ElementId>;
    fn ids(&self) -> Vec<ElementId>;
    /// Additional-information facets referring to `service`, whether or
    /// not the service itself is held.
    fn add_info_for(&self, service: &ElementId) -> Vec<ElementId>;

    fn contains(&self, id: &ElementId) -> bool {
        self.get(id).is_some()
    }

    fn len(&self) -> usize {
        self.ids().len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn new_registry(mode: RegistryMode) -> Box<dyn LocalRegistry> {
    match mode {
        RegistryMode::InMemory => Box::<InMemoryRegistry>::default(),
        RegistryMode::Null => Box::new(NullRegistry),
    }
}

#[derive(Clone, Debug, Default)]
pub struct InMemoryRegistry {
    elements: BTreeMap<ElementId, StoredElement>,
    add_info: BTreeMap<ElementId, BTreeSet<ElementId>>,
}

impl LocalRegistry for InMemoryRegistry {
    fn mode(&self) -> RegistryMode {
        RegistryMode::InMemory
    }

    fn put(&mut self, element: StoredElement) {
        if let StoredElement::Facet(f) = &element {
            self.add_info
                .entry(f.service_ref.clone())
                .or_default()
                .insert(f.id.clone());
        }
        self.elements.insert(element.id().clone(), element);
    }

    fn get(&self, id: &ElementId) -> Option<&StoredElement> {
        self.elements.get(id)
    }

    fn delete(&mut self, id: &ElementId) -> bool {
        match self.elements.remove(id) {
            Some(StoredElement::Facet(f)) => {
                if let Some(set) = self.add_info.get_mut(&f.service_ref) {
                    set.remove(id);
                    if set.is_empty() {
                        self.add_info.remove(&f.service_ref);
                    }
                }
                true
            }
            Some(_) => true,
            None => false,
        }
    }

    fn query(&self, interest: &Interest) -> Vec<ElementId> {
        self.elements
            .values()
            .filter(|e| e.matches(interest))
            .map(|e| e.id().clone())
            .collect()
    }

    fn ids(&self) -> Vec<ElementId> {
        self.elements.keys().cloned().collect()
    }

    fn add_info_for(&self, service: &ElementId) -> Vec<ElementId> {
        self.add_info
            .get(service)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    fn len(&self) -> usize {
        self.elements.len()
    }
}

/// Registry that keeps nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullRegistry;

impl LocalRegistry for NullRegistry {
    fn mode(&self) -> RegistryMode {
        RegistryMode::Null
    }

    fn put(&mut self, _element: StoredElement) {}

    fn get(&self, _id: &ElementId) -> Option<&StoredElement> {
        None
    }

    fn delete(&mut self, _id: &ElementId) -> bool {
        false
    }

    fn query(&self, _interest: &Interest) -> Vec<ElementId> {
        Vec::new()
    }

    fn ids(&self) -> Vec<ElementId> {
        Vec::new()
    }

    fn add_info_for(&self, _service: &ElementId) -> Vec<ElementId> {
        Vec::new()
    }
}
