use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader, Writer};
use crate::id::ElementId;
use crate::query::eval::eval_path;
use crate::query::path::{parse_path, PathExpr};
use crate::service::{Facet, FacetKind, ServiceEntry};
use crate::ModelError;

#[derive(Clone, Debug, PartialEq)]
pub struct SubConstraint {
    pub schema_id: String,
    pub expr: PathExpr,
}

impl SubConstraint {
    pub fn new(schema_id: impl Into<String>, expr: &str) -> Result<Self, ModelError> {
        let schema_id = schema_id.into();
        if schema_id.is_empty() {
            return Err(ModelError::InvalidSchema("empty schema id in constraint".into()));
        }
        Ok(SubConstraint {
            schema_id,
            expr: parse_path(expr)?,
        })
    }
}

/// A marketplace subscription.
#[derive(Clone, Debug, PartialEq)]
pub enum Interest {
    ById(ElementId),
    /// Satisfied when every conjunct holds on some specification facet of
    /// the conjunct's schema.
    ByConstraints(Vec<SubConstraint>),
    AddInfo {
        service_id: ElementId,
        schema_id: String,
        expr: PathExpr,
    },
}

/// Evaluation counters, used to observe short-circuiting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchStats {
    pub conjuncts_evaluated: u64,
    pub path_evaluations: u64,
    pub document_parses: u64,
}

impl MatchStats {
    pub fn add(&mut self, other: &MatchStats) {
        self.conjuncts_evaluated += other.conjuncts_evaluated;
        self.path_evaluations += other.path_evaluations;
        self.document_parses += other.document_parses;
    }
}

impl Interest {
    pub fn by_constraints(conjuncts: Vec<SubConstraint>) -> Result<Self, ModelError> {
        if conjuncts.is_empty() {
            return Err(ModelError::EmptyExpression);
        }
        Ok(Interest::ByConstraints(conjuncts))
    }

    pub fn add_info(service_id: ElementId, schema_id: impl Into<String>, expr: &str) -> Result<Self, ModelError> {
        let schema_id = schema_id.into();
        if schema_id.is_empty() {
            return Err(ModelError::InvalidSchema("empty schema id in interest".into()));
        }
        Ok(Interest::AddInfo {
            service_id,
            schema_id,
            expr: parse_path(expr)?,
        })
    }

    pub fn targets_services(&self) -> bool {
        !matches!(self, Interest::AddInfo { .. })
    }

    pub fn write(&self, w: &mut Writer) {
        match self {
            Interest::ById(id) => {
                w.u8(0).id(id);
            }
            Interest::ByConstraints(cs) => {
                w.u8(1).u16(cs.len() as u16);
                for c in cs {
                    w.str(&c.schema_id).str(&c.expr.to_string());
                }
            }
            Interest::AddInfo {
                service_id,
                schema_id,
                expr,
            } => {
                w.u8(2).id(service_id).str(schema_id).str(&expr.to_string());
            }
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, ModelError> {
        match r.u8()? {
            0 => Ok(Interest::ById(r.id()?)),
            1 => {
                let n = r.u16()?;
                let mut cs = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let schema = r.str()?;
                    cs.push(SubConstraint::new(schema, &r.str()?)?);
                }
                Interest::by_constraints(cs)
            }
            2 => {
                let id = r.id()?;
                let schema = r.str()?;
                Interest::add_info(id, schema, &r.str()?)
            }
            _ => Err(ModelError::Decode("invalid interest tag")),
        }
    }
}

/// Matches a service description against a service interest.
///
/// Conjuncts are evaluated in order and evaluation stops at the first one
/// that fails.
pub fn match_service(interest: &Interest, entry: &ServiceEntry, stats: &mut MatchStats) -> bool {
    match interest {
        Interest::ById(id) => &entry.id == id,
        Interest::ByConstraints(conjuncts) => conjuncts.iter().all(|c| {
            stats.conjuncts_evaluated += 1;
            entry
                .spec_facets
                .iter()
                .filter(|f| f.schema_id == c.schema_id)
                .any(|f| {
                    stats.path_evaluations += 1;
                    eval_path(&c.expr, f.content.root())
                })
        }),
        Interest::AddInfo { .. } => false,
    }
}

/// Matches an additional-information facet. The service reference is
/// checked first, then the schema, and only then the path expression.
pub fn match_add_info(interest: &Interest, facet: &Facet, stats: &mut MatchStats) -> bool {
    let Interest::AddInfo {
        service_id,
        schema_id,
        expr,
    } = interest
    else {
        return false;
    };
    if facet.kind != FacetKind::AdditionalInfo || &facet.service_ref != service_id || &facet.schema_id != schema_id {
        return false;
    }
    stats.conjuncts_evaluated += 1;
    stats.path_evaluations += 1;
    eval_path(expr, facet.content.root())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarketKind {
    Service,
    AddInfo,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MarketDocument {
    Service(ServiceEntry),
    AddInfo(Facet),
}

/// Matches many interests against one encoded marketplace message,
/// decoding the message at most once.
pub struct MessageMatcher<'a> {
    kind: MarketKind,
    wire: &'a [u8],
    decoded: Option<Option<MarketDocument>>,
    pub stats: MatchStats,
}

impl<'a> MessageMatcher<'a> {
    pub fn new(kind: MarketKind, wire: &'a [u8]) -> Self {
        MessageMatcher {
            kind,
            wire,
            decoded: None,
            stats: MatchStats::default(),
        }
    }

    pub fn document(&mut self) -> Option<&MarketDocument> {
        if self.decoded.is_none() {
            self.stats.document_parses += 1;
            let doc = match self.kind {
                MarketKind::Service => codec::decode_service(self.wire).ok().map(MarketDocument::Service),
                MarketKind::AddInfo => codec::decode_facet(self.wire).ok().map(MarketDocument::AddInfo),
            };
            self.decoded = Some(doc);
        }
        self.decoded.as_ref().and_then(Option::as_ref)
    }

    pub fn matches(&mut self, interest: &Interest) -> bool {
        // Kind mismatch is decided without decoding.
        match (self.kind, interest.targets_services()) {
            (MarketKind::Service, false) | (MarketKind::AddInfo, true) => return false,
            _ => {}
        }
        let mut stats = self.stats;
        let hit = match self.document() {
            Some(MarketDocument::Service(entry)) => match_service(interest, entry, &mut stats),
            Some(MarketDocument::AddInfo(facet)) => match_add_info(interest, facet, &mut stats),
            None => false,
        };
        let parses = self.stats.document_parses;
        self.stats = stats;
        self.stats.document_parses = parses;
        hit
    }
}

/// Text form of an interest, as found in scenario files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterestSpec {
    ById { service_id: ElementId },
    Constraints { conjuncts: Vec<ConstraintSpec> },
    AddInfo { service_id: ElementId, schema_id: String, path: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub schema_id: String,
    pub path: String,
}

impl TryFrom<&InterestSpec> for Interest {
    type Error = ModelError;

    fn try_from(spec: &InterestSpec) -> Result<Self, Self::Error> {
        match spec {
            InterestSpec::ById { service_id } => Ok(Interest::ById(service_id.clone())),
            InterestSpec::Constraints { conjuncts } => Interest::by_constraints(
                conjuncts
                    .iter()
                    .map(|c| SubConstraint::new(c.schema_id.clone(), &c.path))
                    .collect::<Result<_, _>>()?,
            ),
            InterestSpec::AddInfo {
                service_id,
                schema_id,
                path,
            } => Interest::add_info(service_id.clone(), schema_id.clone(), path),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::NodeId;

    fn id(n: u64) -> ElementId {
        ElementId::new(NodeId::new("p"), n)
    }

    fn round_trip(interest: &Interest) -> Interest {
        let mut w = Writer::new();
        interest.write(&mut w);
        let bytes = w.finish();
        let mut r = Reader::new(&bytes);
        let back = Interest::read(&mut r).unwrap();
        r.finish().unwrap();
        back
    }

    #[test]
    fn interests_round_trip_on_the_wire() {
        let interests = [
            Interest::ById(id(3)),
            Interest::by_constraints(vec![
                SubConstraint::new("wsdl", "//operation[@name='q']").unwrap(),
                SubConstraint::new("qos", "/QoS/response/time < 100").unwrap(),
            ])
            .unwrap(),
            Interest::add_info(id(4), "observed", "/observed").unwrap(),
        ];
        for interest in &interests {
            assert_eq!(&round_trip(interest), interest);
        }
    }

    #[test]
    fn malformed_interests_are_rejected() {
        assert_eq!(Interest::by_constraints(Vec::new()), Err(ModelError::EmptyExpression));
        assert!(SubConstraint::new("", "/a").is_err());
        assert!(Interest::add_info(id(1), "", "/a").is_err());
        assert!(SubConstraint::new("wsdl", "").is_err());
        let mut r = Reader::new(&[9]);
        assert!(Interest::read(&mut r).is_err());
    }

    #[test]
    fn kind_mismatch_is_decided_without_decoding() {
        let wire = codec::encode_service(&ServiceEntry::new(id(1), "s", NodeId::new("p"), true));
        let mut m = MessageMatcher::new(MarketKind::Service, &wire);
        assert!(!m.matches(&Interest::add_info(id(1), "observed", "/observed").unwrap()));
        assert_eq!(m.stats.document_parses, 0);
    }

    #[test]
    fn a_message_is_decoded_once_for_many_interests() {
        let wire = codec::encode_service(&ServiceEntry::new(id(1), "s", NodeId::new("p"), true));
        let mut m = MessageMatcher::new(MarketKind::Service, &wire);
        assert!(m.matches(&Interest::ById(id(1))));
        assert!(!m.matches(&Interest::ById(id(2))));
        let wsdl = Interest::by_constraints(vec![SubConstraint::new("wsdl", "//operation").unwrap()]).unwrap();
        assert!(!m.matches(&wsdl));
        assert_eq!(m.stats.document_parses, 1);
        assert_eq!(m.stats.conjuncts_evaluated, 1);
        assert_eq!(m.stats.path_evaluations, 0);
    }

    #[test]
    fn undecodable_messages_match_nothing() {
        let mut m = MessageMatcher::new(MarketKind::Service, &[0xff, 0x00]);
        assert!(!m.matches(&Interest::ById(id(1))));
        assert!(m.document().is_none());
        assert_eq!(m.stats.document_parses, 1);
    }

    #[test]
    fn specs_convert_to_interests() {
        let spec = InterestSpec::Constraints {
            conjuncts: vec![ConstraintSpec {
                schema_id: "wsdl".into(),
                path: "//operation".into(),
            }],
        };
        assert_eq!(
            Interest::try_from(&spec).unwrap(),
            Interest::by_constraints(vec![SubConstraint::new("wsdl", "//operation").unwrap()]).unwrap()
        );
    }
}
