//! Technology-agnostic service description model.
//!
//! A service is described by facets: typed XML-like documents that are
//! either specifications (written by the service creator) or additional
//! information (written by users, when the creator allows it). Facet
//! contents are signed over their canonical serialization, and marketplace
//! interests select services through a small path-expression language.

pub mod codec;
pub mod id;
pub mod query;
pub mod service;
pub mod signature;
pub mod store;
pub mod xml;

pub use id::{ElementId, IdGenerator, NodeId};
pub use service::{AttachError, AuthorityError, Facet, FacetKind, ServiceEntry};
pub use signature::{KeyRing, Signature, SignatureError, SignatureScheme};
pub use store::{ElementStore, StoreError};
pub use xml::{canonicalize, Element, FacetXml, SchemaDescriptor, StructureNode};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("malformed element id `{0}`")]
    MalformedId(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("document does not match its schema: {0}")]
    SchemaViolation(String),
    #[error("decode error: {0}")]
    Decode(&'static str),
    #[error("empty expression")]
    EmptyExpression,
    #[error("unsupported path syntax: {0}")]
    UnsupportedSyntax(String),
}
