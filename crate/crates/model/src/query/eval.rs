use crate::query::path::{parse_decimal, Axis, Comparison, Literal, PathExpr, Predicate, Step};
use crate::xml::Element;

fn predicate_holds(pred: &Predicate, el: &Element) -> bool {
    match pred {
        Predicate::AttrEq { attr, value } => el.attributes.get(attr) == Some(value),
        Predicate::ChildTextEq { child, value } => el.children_named(child).any(|c| c.trimmed_text() == value),
        Predicate::Count { child, op, value } => op.apply(el.children_named(child).count() as f64, *value),
    }
}

fn step_matches(step: &Step, el: &Element) -> bool {
    el.name == step.name && step.predicate.as_ref().is_none_or(|p| predicate_holds(p, el))
}

fn comparison_holds(cmp: &Comparison, el: &Element) -> bool {
    let text = el.trimmed_text();
    match &cmp.literal {
        Literal::Number(n) => parse_decimal(text).is_some_and(|v| cmp.op.apply(v, *n)),
        Literal::Str(s) => cmp.op.apply(text, s.as_str()),
    }
}

fn collect_descendants<'a>(el: &'a Element, step: &Step, out: &mut Vec<&'a Element>) {
    if step_matches(step, el) {
        out.push(el);
    }
    for child in &el.children {
        collect_descendants(child, step, out);
    }
}

/// Elements selected by the steps of `expr`, in document order.
pub fn select<'a>(expr: &PathExpr, root: &'a Element) -> Vec<&'a Element> {
    let (first, rest) = expr.steps.split_first().expect("parsed expressions have at least one step");
    let mut current = Vec::new();
    match expr.axis {
        Axis::RootPath => {
            if step_matches(first, root) {
                current.push(root);
            }
        }
        Axis::AnyDescendant => collect_descendants(root, first, &mut current),
    }
    for step in rest {
        current = current
            .into_iter()
            .flat_map(|el| el.children.iter().filter(|c| step_matches(step, c)))
            .collect();
        if current.is_empty() {
            break;
        }
    }
    current
}

/// True iff at least one selected element satisfies the trailing
/// comparison (or, without one, iff anything is selected).
pub fn eval_path(expr: &PathExpr, root: &Element) -> bool {
    let selected = select(expr, root);
    match &expr.comparison {
        None => !selected.is_empty(),
        Some(cmp) => selected.iter().any(|el| comparison_holds(cmp, el)),
    }
}
