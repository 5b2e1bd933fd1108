//! Facet constraint language and interest matching.

pub mod eval;
pub mod interest;
pub mod path;

pub use eval::{eval_path, select};
pub use interest::{
    match_add_info, match_service, ConstraintSpec, Interest, InterestSpec, MarketDocument, MarketKind, MatchStats,
    MessageMatcher, SubConstraint,
};
pub use path::{parse_path, Axis, CmpOp, Comparison, Literal, PathExpr, Predicate, Step};
