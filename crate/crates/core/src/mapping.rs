//! Declarative source-to-graph mapping and the record extraction functions.
//!
//! A mapping file declares node types (label, key path, property paths) and
//! edge types (label plus start and end endpoints). Paths are dotted field
//! names with `[]` marking list unnesting, e.g. `entities.hashtags[].text`.
//! An endpoint whose key path unnests yields one node per list element; an
//! edge whose endpoints both unnest multiplies over the cartesian product.
//!
//! The XML layout is described in `mappings/graphmap.xsd`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

use crate::stream_source::RawRecord;

pub type Props = BTreeMap<String, Value>;

#[derive(Debug, Error, PartialEq)]
pub enum MappingError {
    #[error("cannot read mapping file {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed mapping XML at line {line}, column {column}: {message}")]
    Xml { line: u32, column: u32, message: String },
    #[error("mapping line {line}: {message}")]
    Structure { line: u32, message: String },
    #[error("edge `{edge}` references undeclared node type `{node}`")]
    UndeclaredNode { edge: String, node: String },
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("invalid path `{path}`: {message}")]
    Path { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Step {
    Field(String),
    Unnest,
}

/// A parsed path expression.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathExpr {
    text: String,
    steps: Vec<Step>,
}

/// Result of resolving a path against a document.
#[derive(Debug, Clone, PartialEq)]
pub enum Resolved {
    /// Nothing at the path. Never replaced by a made-up value.
    Absent,
    Scalar(Value),
    /// One entry per unnested element, in document order.
    List(Vec<Value>),
}

impl Resolved {
    pub fn is_absent(&self) -> bool {
        match self {
            Resolved::Absent => true,
            Resolved::Scalar(v) => v.is_null(),
            Resolved::List(_) => false,
        }
    }

    /// The scalar value, or the first list element.
    pub fn first_scalar(&self) -> Option<&Value> {
        match self {
            Resolved::Absent => None,
            Resolved::Scalar(v) => Some(v),
            Resolved::List(vs) => vs.first(),
        }
    }
}

impl PathExpr {
    pub fn parse(text: &str) -> Result<Self, MappingError> {
        let err = |message: &str| MappingError::Path { path: text.to_string(), message: message.to_string() };
        if text.trim().is_empty() {
            return Err(err("empty path"));
        }
        let mut steps = Vec::new();
        for part in text.split('.') {
            let (name, unnest) = match part.strip_suffix("[]") {
                Some(name) => (name, true),
                None => (part, false),
            };
            if name.is_empty() || name.contains(['[', ']']) {
                return Err(err("each segment needs a field name, optionally followed by []"));
            }
            steps.push(Step::Field(name.to_string()));
            if unnest {
                steps.push(Step::Unnest);
            }
        }
        Ok(Self { text: text.to_string(), steps })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn unnests(&self) -> bool {
        self.steps.contains(&Step::Unnest)
    }

    /// The path up to and including the first `[]`, if any.
    pub fn unnest_prefix(&self) -> Option<PathExpr> {
        let pos = self.steps.iter().position(|s| *s == Step::Unnest)?;
        let steps = self.steps[..=pos].to_vec();
        Some(Self { text: render(&steps), steps })
    }

    /// The remainder after the first `[]`; `None` if the path doesn't unnest
    /// or nothing follows the `[]`.
    fn after_unnest(&self) -> Option<PathExpr> {
        let pos = self.steps.iter().position(|s| *s == Step::Unnest)?;
        let steps = self.steps[pos + 1..].to_vec();
        if steps.is_empty() {
            return None;
        }
        Some(Self { text: render(&steps), steps })
    }

    pub fn resolve(&self, doc: &Value) -> Resolved {
        let mut out = Vec::new();
        let found = walk(doc, &self.steps, &mut out);
        if self.unnests() {
            if found {
                Resolved::List(out)
            } else {
                Resolved::Absent
            }
        } else {
            match out.pop() {
                Some(v) if !v.is_null() => Resolved::Scalar(v),
                _ => Resolved::Absent,
            }
        }
    }
}

impl fmt::Display for PathExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

fn render(steps: &[Step]) -> String {
    let mut s = String::new();
    for step in steps {
        match step {
            Step::Field(name) => {
                if !s.is_empty() {
                    s.push('.');
                }
                s.push_str(name);
            }
            Step::Unnest => s.push_str("[]"),
        }
    }
    s
}

/// Collects values at `steps` into `out`. Returns false if the path broke off
/// before reaching any list (so "missing list" differs from "empty list").
fn walk(v: &Value, steps: &[Step], out: &mut Vec<Value>) -> bool {
    match steps.split_first() {
        None => {
            out.push(v.clone());
            true
        }
        Some((Step::Field(name), rest)) => match v.get(name) {
            Some(child) => walk(child, rest, out),
            None => false,
        },
        Some((Step::Unnest, rest)) => match v.as_array() {
            Some(items) => {
                for item in items {
                    let mut sub = Vec::new();
                    if walk(item, rest, &mut sub) {
                        out.extend(sub.into_iter().filter(|x| !x.is_null()));
                    }
                }
                true
            }
            None => false,
        },
    }
}

/// Canonical key text for a scalar; `None` for null, objects and arrays.
pub fn key_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KeyCase {
    #[default]
    Preserve,
    Lower,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertySpec {
    pub name: String,
    pub path: PathExpr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeTypeSpec {
    pub label: String,
    pub key_path: PathExpr,
    pub key_case: KeyCase,
    pub properties: Vec<PropertySpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointSpec {
    pub node_type: String,
    /// Overrides the node type's key path when set.
    pub key_path: Option<PathExpr>,
    /// Properties for nodes reached through an overridden key path.
    pub properties: Vec<PropertySpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTypeSpec {
    pub label: String,
    pub start: EndpointSpec,
    pub end: EndpointSpec,
    pub properties: Vec<PropertySpec>,
}

impl EdgeTypeSpec {
    /// The list path(s) the edge multiplies over, if any.
    pub fn unnest_paths(&self, m: &MappingConfig) -> Vec<PathExpr> {
        [&self.start, &self.end]
            .into_iter()
            .filter_map(|ep| m.endpoint_key_path(ep).and_then(|p| p.unnest_prefix()))
            .collect()
    }
}

/// A validated mapping. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingConfig {
    pub name: String,
    pub node_types: Vec<NodeTypeSpec>,
    pub edge_types: Vec<EdgeTypeSpec>,
}

/// A node occurrence extracted from a record.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRef {
    pub label: String,
    pub key: String,
    pub props: Props,
}

impl NodeRef {
    pub fn new(label: impl Into<String>, key: impl Into<String>) -> Self {
        Self { label: label.into(), key: key.into(), props: Props::new() }
    }

    pub fn with_prop(mut self, name: &str, value: Value) -> Self {
        self.props.insert(name.to_string(), value);
        self
    }

    /// `label:key`, the identity string used in dumps and diagnostics.
    pub fn identity(&self) -> String {
        format!("{}:{}", self.label, self.key)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedEdge {
    pub start: NodeRef,
    pub end: NodeRef,
    pub label: String,
    pub props: Props,
}

/// Everything pulled out of one record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    /// Node occurrences from the node types' own key paths.
    pub nodes: Vec<NodeRef>,
    pub edges: Vec<ExtractedEdge>,
    /// Tuples dropped because a start or end key was missing.
    pub skipped: u64,
}

impl MappingConfig {
    pub fn node_type(&self, label: &str) -> Option<&NodeTypeSpec> {
        self.node_types.iter().find(|n| n.label == label)
    }

    fn endpoint_key_path<'a>(&'a self, ep: &'a EndpointSpec) -> Option<&'a PathExpr> {
        ep.key_path.as_ref().or_else(|| self.node_type(&ep.node_type).map(|n| &n.key_path))
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        let mut labels = HashSet::new();
        for n in &self.node_types {
            if !labels.insert(("node", n.label.as_str())) {
                return Err(MappingError::DuplicateLabel(n.label.clone()));
            }
        }
        for e in &self.edge_types {
            if !labels.insert(("edge", e.label.as_str())) {
                return Err(MappingError::DuplicateLabel(e.label.clone()));
            }
            for ep in [&e.start, &e.end] {
                if self.node_type(&ep.node_type).is_none() {
                    return Err(MappingError::UndeclaredNode { edge: e.label.clone(), node: ep.node_type.clone() });
                }
            }
        }
        Ok(())
    }

    /// Parses and validates mapping XML.
    pub fn from_xml(text: &str) -> Result<Self, MappingError> {
        let doc = roxmltree::Document::parse(text).map_err(|e| {
            let pos = e.pos();
            MappingError::Xml { line: pos.row, column: pos.col, message: e.to_string() }
        })?;
        let line_of = |n: roxmltree::Node| doc.text_pos_at(n.range().start).row;
        let root = doc.root_element();
        if root.tag_name().name() != "graphmap" {
            return Err(MappingError::Structure {
                line: line_of(root),
                message: format!("root element must be <graphmap>, found <{}>", root.tag_name().name()),
            });
        }
        let attr = |n: roxmltree::Node, name: &str| -> Result<String, MappingError> {
            n.attribute(name).map(str::to_string).ok_or_else(|| MappingError::Structure {
                line: line_of(n),
                message: format!("<{}> needs attribute `{name}`", n.tag_name().name()),
            })
        };
        let props_of = |n: roxmltree::Node| -> Result<Vec<PropertySpec>, MappingError> {
            n.children()
                .filter(|c| c.has_tag_name("property"))
                .map(|c| Ok(PropertySpec { name: attr(c, "name")?, path: PathExpr::parse(&attr(c, "path")?)? }))
                .collect()
        };

        let mut node_types = Vec::new();
        let mut edge_types = Vec::new();
        for section in root.children().filter(|c| c.is_element()) {
            match section.tag_name().name() {
                "nodes" => {
                    for n in section.children().filter(|c| c.has_tag_name("node")) {
                        let key = attr(n, "key")?;
                        let key_case = match n.attribute("case").unwrap_or("preserve") {
                            "preserve" => KeyCase::Preserve,
                            "lower" => KeyCase::Lower,
                            other => {
                                return Err(MappingError::Structure {
                                    line: line_of(n),
                                    message: format!("unknown key case `{other}`"),
                                })
                            }
                        };
                        node_types.push(NodeTypeSpec {
                            label: attr(n, "label")?,
                            key_path: PathExpr::parse(&key)?,
                            key_case,
                            properties: props_of(n)?,
                        });
                    }
                }
                "mapping" => {
                    for e in section.children().filter(|c| c.has_tag_name("edge")) {
                        let endpoint = |tag: &str| -> Result<EndpointSpec, MappingError> {
                            let ep =
                                e.children().find(|c| c.has_tag_name(tag)).ok_or_else(|| MappingError::Structure {
                                    line: line_of(e),
                                    message: format!("<edge> needs a <{tag}> element"),
                                })?;
                            Ok(EndpointSpec {
                                node_type: attr(ep, "node")?,
                                key_path: ep.attribute("key").map(PathExpr::parse).transpose()?,
                                properties: props_of(ep)?,
                            })
                        };
                        edge_types.push(EdgeTypeSpec {
                            label: attr(e, "label")?,
                            start: endpoint("start")?,
                            end: endpoint("end")?,
                            properties: props_of(e)?,
                        });
                    }
                }
                other => {
                    return Err(MappingError::Structure {
                        line: line_of(section),
                        message: format!("unexpected section <{other}>"),
                    })
                }
            }
        }
        let config = Self { name: root.attribute("name").unwrap_or("graphmap").to_string(), node_types, edge_types };
        config.validate()?;
        Ok(config)
    }

    /// Node occurrences from each node type's own key path, in declaration order.
    pub fn extract_nodes(&self, r: &RawRecord) -> Vec<NodeRef> {
        let mut out = Vec::new();
        for nt in &self.node_types {
            let (nodes, _) = resolve_nodes(&r.payload, nt, &nt.key_path, &nt.properties);
            out.extend(nodes.into_iter().flatten());
        }
        out
    }

    /// Edge tuples in (edge type declaration, unnest element) order.
    pub fn extract_edges(&self, r: &RawRecord) -> (Vec<ExtractedEdge>, u64) {
        let mut edges = Vec::new();
        let mut skipped = 0;
        for et in &self.edge_types {
            let (starts, s1) = self.resolve_endpoint(&r.payload, &et.start);
            let (ends, s2) = self.resolve_endpoint(&r.payload, &et.end);
            let props = resolve_props(&r.payload, &et.properties, None, None);
            // A missing key makes every tuple it would have joined invalid.
            if s1 || s2 {
                let n = (if s1 { 1 } else { starts.len() }) * (if s2 { 1 } else { ends.len() });
                skipped += n as u64;
                continue;
            }
            for s in &starts {
                for e in &ends {
                    match (s, e) {
                        (Some(s), Some(e)) => edges.push(ExtractedEdge {
                            start: s.clone(),
                            end: e.clone(),
                            label: et.label.clone(),
                            props: props.clone(),
                        }),
                        _ => skipped += 1,
                    }
                }
            }
        }
        (edges, skipped)
    }

    pub fn extract(&self, r: &RawRecord) -> Extraction {
        let (edges, skipped) = self.extract_edges(r);
        Extraction { nodes: self.extract_nodes(r), edges, skipped }
    }

    /// Returns per-element nodes (`None` where a list element lacks a key) and
    /// whether a scalar key was missing outright.
    fn resolve_endpoint(&self, doc: &Value, ep: &EndpointSpec) -> (Vec<Option<NodeRef>>, bool) {
        let nt = self.node_type(&ep.node_type).expect("validated mapping references declared node types");
        match &ep.key_path {
            Some(path) if *path != nt.key_path => resolve_nodes(doc, nt, path, &ep.properties),
            _ => resolve_nodes(doc, nt, &nt.key_path, &nt.properties),
        }
    }
}

fn resolve_nodes(
    doc: &Value,
    nt: &NodeTypeSpec,
    key_path: &PathExpr,
    props: &[PropertySpec],
) -> (Vec<Option<NodeRef>>, bool) {
    let make = |key: Option<String>, props: Props| {
        key.map(|k| NodeRef {
            label: nt.label.clone(),
            key: match nt.key_case {
                KeyCase::Preserve => k,
                KeyCase::Lower => k.to_lowercase(),
            },
            props,
        })
    };
    match key_path.unnest_prefix() {
        None => match key_path.resolve(doc) {
            Resolved::Scalar(v) => match key_text(&v) {
                Some(k) => (vec![make(Some(k), resolve_props(doc, props, None, None))], false),
                None => (vec![], true),
            },
            _ => (vec![], true),
        },
        Some(prefix) => {
            // Walk the list elements so element-relative properties stay aligned.
            let elements = match prefix.resolve(doc) {
                Resolved::List(items) => items,
                _ => return (vec![], false),
            };
            let rest = key_path.after_unnest();
            let nodes = elements
                .iter()
                .map(|el| {
                    let key = match &rest {
                        Some(rest) => rest.resolve(el).first_scalar().and_then(key_text),
                        None => key_text(el),
                    };
                    make(key, resolve_props(doc, props, Some(&prefix), Some(el)))
                })
                .collect();
            (nodes, false)
        }
    }
}

/// Properties sharing the key's list prefix resolve against the current
/// element; others against the whole record. Absent values are left out.
fn resolve_props(doc: &Value, props: &[PropertySpec], prefix: Option<&PathExpr>, element: Option<&Value>) -> Props {
    let mut out = Props::new();
    for p in props {
        let value = match (prefix, element) {
            (Some(prefix), Some(el)) if p.path.unnest_prefix().as_ref() == Some(prefix) => {
                match p.path.after_unnest() {
                    Some(rest) => rest.resolve(el),
                    None => Resolved::Scalar(el.clone()),
                }
            }
            _ => p.path.resolve(doc),
        };
        match value {
            Resolved::Absent => {}
            Resolved::Scalar(v) => {
                out.insert(p.name.clone(), v);
            }
            Resolved::List(vs) => {
                out.insert(p.name.clone(), Value::Array(vs));
            }
        }
    }
    out
}

/// Reads and validates a mapping file.
pub fn load_mapping(path: impl AsRef<Path>) -> Result<MappingConfig, MappingError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| MappingError::Io { path: path.display().to_string(), message: e.to_string() })?;
    MappingConfig::from_xml(&text)
}

/// The reference tweet mapping: user, tweet and hashtag nodes joined by
/// owner, mentioned, hashtag-used-in and mentioned-with-ht edges.
pub const TWEET_MAP_XML: &str = include_str!("../../../mappings/tweet-map.xml");

pub fn tweet_mapping() -> MappingConfig {
    MappingConfig::from_xml(TWEET_MAP_XML).expect("bundled tweet map is valid")
}
