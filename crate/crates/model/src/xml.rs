//! XML-like documents carried inside facets.
//!
//! Documents are plain element trees. The canonical form is a compact XML
//! serialization with attributes in key order; it is what gets signed and
//! what travels on the wire, so it must stay byte-stable.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::id::ElementId;
use crate::ModelError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Element {
    pub name: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default)]
    pub children: Vec<Element>,
    #[serde(default)]
    pub text: Option<String>,
}

impl Element {
    pub fn new(name: impl Into<String>) -> Self {
        Element {
            name: name.into(),
            attributes: BTreeMap::new(),
            children: Vec::new(),
            text: None,
        }
    }

    pub fn attr(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(key.into(), value.into());
        self
    }

    pub fn child(mut self, child: Element) -> Self {
        self.children.push(child);
        self
    }

    pub fn text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn children_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Element> + 'a {
        self.children.iter().filter(move |c| c.name == name)
    }

    /// Text content with surrounding whitespace removed; empty when absent.
    pub fn trimmed_text(&self) -> &str {
        self.text.as_deref().map(str::trim).unwrap_or("")
    }

    /// Number of elements in the tree rooted here.
    pub fn size(&self) -> usize {
        1 + self.children.iter().map(Element::size).sum::<usize>()
    }

    fn write_canonical(&self, out: &mut String) {
        out.push('<');
        out.push_str(&self.name);
        for (k, v) in &self.attributes {
            let _ = write!(out, " {k}=\"");
            escape_into(v, out);
            out.push('"');
        }
        if self.children.is_empty() && self.text.is_none() {
            out.push_str("/>");
            return;
        }
        out.push('>');
        if let Some(text) = &self.text {
            escape_into(text, out);
        }
        for child in &self.children {
            child.write_canonical(out);
        }
        out.push_str("</");
        out.push_str(&self.name);
        out.push('>');
    }
}

fn escape_into(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
}

/// Canonical byte form of an element tree.
pub fn canonicalize_element(root: &Element) -> Vec<u8> {
    let mut out = String::with_capacity(64);
    root.write_canonical(&mut out);
    out.into_bytes()
}

/// Parses bytes produced by [`canonicalize_element`].
pub fn parse_canonical(bytes: &[u8]) -> Result<Element, ModelError> {
    let text = std::str::from_utf8(bytes).map_err(|_| ModelError::Decode("invalid utf-8"))?;
    let mut parser = CanonicalParser { src: text, pos: 0 };
    let root = parser.element()?;
    if parser.pos != text.len() {
        return Err(ModelError::Decode("trailing bytes after root element"));
    }
    Ok(root)
}

struct CanonicalParser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> CanonicalParser<'a> {
    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn expect(&mut self, token: &str) -> Result<(), ModelError> {
        if self.rest().starts_with(token) {
            self.pos += token.len();
            Ok(())
        } else {
            Err(ModelError::Decode("unexpected token"))
        }
    }

    fn name(&mut self) -> Result<String, ModelError> {
        let len = self
            .rest()
            .find(|c: char| c == ' ' || c == '>' || c == '/' || c == '=')
            .unwrap_or(self.rest().len());
        if len == 0 {
            return Err(ModelError::Decode("empty name"));
        }
        let name = self.rest()[..len].to_owned();
        self.pos += len;
        Ok(name)
    }

    fn escaped_until(&mut self, stop: char) -> Result<String, ModelError> {
        let len = self
            .rest()
            .find(stop)
            .ok_or(ModelError::Decode("unterminated text"))?;
        let raw = &self.rest()[..len];
        self.pos += len;
        unescape(raw)
    }

    fn element(&mut self) -> Result<Element, ModelError> {
        self.expect("<")?;
        let mut el = Element::new(self.name()?);
        loop {
            if self.rest().starts_with("/>") {
                self.pos += 2;
                return Ok(el);
            }
            if self.rest().starts_with('>') {
                self.pos += 1;
                break;
            }
            self.expect(" ")?;
            let key = self.name()?;
            self.expect("=\"")?;
            let value = self.escaped_until('"')?;
            self.expect("\"")?;
            el.attributes.insert(key, value);
        }
        if !self.rest().starts_with('<') {
            el.text = Some(self.escaped_until('<')?);
        } else if self.rest().starts_with("</") {
            // `<a></a>` is how an element with empty text serializes.
            el.text = Some(String::new());
        }
        while !self.rest().starts_with("</") {
            if self.rest().is_empty() {
                return Err(ModelError::Decode("unterminated element"));
            }
            el.children.push(self.element()?);
        }
        self.expect("</")?;
        let close = self.name()?;
        if close != el.name {
            return Err(ModelError::Decode("mismatched closing tag"));
        }
        self.expect(">")?;
        Ok(el)
    }
}

fn unescape(raw: &str) -> Result<String, ModelError> {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(idx) = rest.find('&') {
        out.push_str(&rest[..idx]);
        rest = &rest[idx..];
        let (rep, len) = if rest.starts_with("&amp;") {
            ('&', 5)
        } else if rest.starts_with("&lt;") {
            ('<', 4)
        } else if rest.starts_with("&gt;") {
            ('>', 4)
        } else if rest.starts_with("&quot;") {
            ('"', 6)
        } else {
            return Err(ModelError::Decode("unknown entity"));
        };
        out.push(rep);
        rest = &rest[len..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Template node of a structural schema: element name, required attributes
/// and required child elements.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureNode {
    pub name: String,
    #[serde(default)]
    pub required_attributes: Vec<String>,
    #[serde(default)]
    pub children: Vec<StructureNode>,
}

impl StructureNode {
    pub fn new(name: impl Into<String>) -> Self {
        StructureNode {
            name: name.into(),
            required_attributes: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn require_attr(mut self, attr: impl Into<String>) -> Self {
        self.required_attributes.push(attr.into());
        self
    }

    pub fn require_child(mut self, child: StructureNode) -> Self {
        self.children.push(child);
        self
    }

    fn check_unique_children(&self) -> Result<(), ModelError> {
        let mut names = std::collections::HashSet::new();
        for child in &self.children {
            if !names.insert(child.name.as_str()) {
                return Err(ModelError::InvalidSchema(format!(
                    "duplicate child `{}` under `{}`",
                    child.name, self.name
                )));
            }
            child.check_unique_children()?;
        }
        Ok(())
    }

    fn validate(&self, el: &Element, path: &str) -> Result<(), ModelError> {
        let here = format!("{path}/{}", self.name);
        if el.name != self.name {
            return Err(ModelError::SchemaViolation(format!(
                "expected element `{here}`, found `{}`",
                el.name
            )));
        }
        for attr in &self.required_attributes {
            if !el.attributes.contains_key(attr) {
                return Err(ModelError::SchemaViolation(format!(
                    "missing attribute `{attr}` on `{here}`"
                )));
            }
        }
        for template in &self.children {
            let mut found = false;
            for child in el.children_named(&template.name) {
                found = true;
                template.validate(child, &here)?;
            }
            if !found {
                return Err(ModelError::SchemaViolation(format!(
                    "missing element `{here}/{}`",
                    template.name
                )));
            }
        }
        Ok(())
    }
}

/// Facet type: a schema name plus an optional structural template.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDescriptor {
    pub schema_id: String,
    #[serde(default)]
    pub structure: Option<StructureNode>,
}

impl SchemaDescriptor {
    pub fn new(schema_id: impl Into<String>, structure: Option<StructureNode>) -> Result<Self, ModelError> {
        let schema_id = schema_id.into();
        if schema_id.is_empty() {
            return Err(ModelError::InvalidSchema("empty schema id".into()));
        }
        if let Some(structure) = &structure {
            structure.check_unique_children()?;
        }
        Ok(SchemaDescriptor { schema_id, structure })
    }

    /// Schema with no structural template; every tree validates.
    pub fn open(schema_id: impl Into<String>) -> Result<Self, ModelError> {
        Self::new(schema_id, None)
    }

    pub fn validate(&self, root: &Element) -> Result<(), ModelError> {
        match &self.structure {
            Some(structure) => structure.validate(root, ""),
            None => Ok(()),
        }
    }
}

/// A typed document: identifier, schema reference and element tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FacetXml {
    id: ElementId,
    schema_id: String,
    root: Element,
}

impl FacetXml {
    /// Builds a document, validating it against `schema`.
    pub fn new(id: ElementId, schema: &SchemaDescriptor, root: Element) -> Result<Self, ModelError> {
        schema.validate(&root)?;
        Ok(FacetXml {
            id,
            schema_id: schema.schema_id.clone(),
            root,
        })
    }

    /// Rebuilds a document received from the wire. Structural validation is
    /// the sender's obligation; the receiver only has the schema name.
    pub fn from_parts(id: ElementId, schema_id: String, root: Element) -> Result<Self, ModelError> {
        if schema_id.is_empty() {
            return Err(ModelError::InvalidSchema("empty schema id".into()));
        }
        Ok(FacetXml { id, schema_id, root })
    }

    pub fn id(&self) -> &ElementId {
        &self.id
    }

    pub fn schema_id(&self) -> &str {
        &self.schema_id
    }

    pub fn root(&self) -> &Element {
        &self.root
    }

    pub fn canonicalize(&self) -> Vec<u8> {
        canonicalize_element(&self.root)
    }
}

/// Canonical serialization of a document.
pub fn canonicalize(doc: &FacetXml) -> Vec<u8> {
    doc.canonicalize()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribute_order_does_not_change_bytes() {
        let a = Element::new("a").attr("y", "2").attr("x", "1");
        let b = Element::new("a").attr("x", "1").attr("y", "2");
        assert_eq!(canonicalize_element(&a), canonicalize_element(&b));
        assert_eq!(canonicalize_element(&a), br#"<a x="1" y="2"/>"#.to_vec());
    }

    #[test]
    fn empty_root_is_single_empty_element() {
        assert_eq!(canonicalize_element(&Element::new("r")), b"<r/>".to_vec());
    }

    #[test]
    fn canonical_form_parses_back() {
        let tree = Element::new("definitions")
            .attr("name", "Quote & <Trade>")
            .child(Element::new("operation").attr("name", "getLastTrade"))
            .child(Element::new("doc").text("uses \"quotes\" & more"))
            .child(Element::new("empty").text(""));
        let bytes = canonicalize_element(&tree);
        assert_eq!(parse_canonical(&bytes).unwrap(), tree);
    }

    #[test]
    fn malformed_canonical_bytes_are_rejected() {
        for bad in ["", "<a>", "<a></b>", "<a/>x", "<a x=\"1/>", "<a>&bogus;</a>"] {
            assert!(parse_canonical(bad.as_bytes()).is_err(), "{bad}");
        }
    }

    #[test]
    fn structural_validation_requires_elements_and_attributes() {
        let schema = SchemaDescriptor::new(
            "QoS",
            Some(
                StructureNode::new("QoS").require_child(
                    StructureNode::new("response").require_child(StructureNode::new("time").require_attr("format")),
                ),
            ),
        )
        .unwrap();
        let good = Element::new("QoS").child(
            Element::new("response").child(Element::new("time").attr("format", "ms").text("80")),
        );
        assert!(schema.validate(&good).is_ok());

        let missing_attr = Element::new("QoS").child(Element::new("response").child(Element::new("time")));
        assert!(matches!(schema.validate(&missing_attr), Err(ModelError::SchemaViolation(_))));

        let missing_child = Element::new("QoS").child(Element::new("response"));
        assert!(schema.validate(&missing_child).is_err());

        let wrong_root = Element::new("WSDL");
        assert!(schema.validate(&wrong_root).is_err());
    }

    #[test]
    fn schema_rejects_empty_id_and_duplicate_children() {
        assert!(SchemaDescriptor::open("").is_err());
        let dup = StructureNode::new("r")
            .require_child(StructureNode::new("x"))
            .require_child(StructureNode::new("x"));
        assert!(SchemaDescriptor::new("S", Some(dup)).is_err());
    }
}
