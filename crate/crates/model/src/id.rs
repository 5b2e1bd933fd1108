use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ModelError;

/// Identifier of a node (delivery manager, directory or broker client).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(value: impl Into<String>) -> Self {
        NodeId(value.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_owned())
    }
}

/// Globally unique element identifier of the form `<node-id>:<counter>`.
///
/// The creator node id makes ids from different nodes disjoint, the counter
/// makes ids from one node disjoint. Ids are never reused.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ElementId {
    node: NodeId,
    counter: u64,
}

impl ElementId {
    pub fn new(node: NodeId, counter: u64) -> Self {
        ElementId { node, counter }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }
}

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.node, self.counter)
    }
}

impl FromStr for ElementId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (node, counter) = s
            .rsplit_once(':')
            .ok_or_else(|| ModelError::MalformedId(s.to_owned()))?;
        if node.is_empty() {
            return Err(ModelError::MalformedId(s.to_owned()));
        }
        let counter = counter
            .parse()
            .map_err(|_| ModelError::MalformedId(s.to_owned()))?;
        Ok(ElementId::new(NodeId::new(node), counter))
    }
}

impl TryFrom<String> for ElementId {
    type Error = ModelError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<ElementId> for String {
    fn from(id: ElementId) -> Self {
        id.to_string()
    }
}

/// Per-node monotonic id source.
#[derive(Clone, Debug)]
pub struct IdGenerator {
    node: NodeId,
    next: u64,
}

impl IdGenerator {
    pub fn new(node: NodeId) -> Self {
        IdGenerator { node, next: 1 }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn next_id(&mut self) -> ElementId {
        let id = ElementId::new(self.node.clone(), self.next);
        self.next += 1;
        id
    }
}
