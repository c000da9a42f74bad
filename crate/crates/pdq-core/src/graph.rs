//! Pose-graph data model plus parsing and serialization of the planar
//! g2o and TORO text formats.
//!
//! Information matrices are stored internally in `[δθ, δt_x, δt_y]`
//! ordering; both file dialects carry `(x, y, θ)`-ordered entries and are
//! permuted on the way in and out.

use crate::manifold::PlanarDualQuat;
use nalgebra::{Matrix3, Vector2};
use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use thiserror::Error;

/// Errors raised while building, parsing, or writing pose graphs.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: duplicate vertex id {id}")]
    DuplicateVertex { line: usize, id: u64 },
    #[error("line {line}: edge references vertex {id} with no VERTEX record")]
    MissingVertex { line: usize, id: u64 },
    #[error("edge {edge}: information matrix is not positive definite")]
    NonPositiveDefiniteInfo { edge: usize },
    #[error("edge {edge}: self loop (i = j = {node})")]
    SelfLoop { edge: usize, node: usize },
    #[error("edge {edge}: node index {index} out of range (node count {nodes})")]
    IndexOutOfRange { edge: usize, index: usize, nodes: usize },
    #[error("graph is empty")]
    Empty,
    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("information matrix is asymmetric (max deviation {deviation:.3e})")]
    AsymmetricInfo { deviation: f64 },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Symmetric 3x3 edge weight over `[δθ, δt_x, δt_y]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoMatrix(Matrix3<f64>);

impl InfoMatrix {
    pub fn identity() -> Self {
        InfoMatrix(Matrix3::identity())
    }

    /// Wraps a symmetric matrix; asymmetry beyond 1e-9 is rejected, small
    /// asymmetry is averaged away. Positive definiteness is not enforced
    /// here so that `validate` can report it as a diagnostic.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GraphError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GraphError::NonFinite {
                what: "information matrix",
            });
        }
        let deviation = (m - m.transpose()).abs().max();
        if deviation > 1e-9 {
            return Err(GraphError::AsymmetricInfo { deviation });
        }
        Ok(InfoMatrix(0.5 * (m + m.transpose())))
    }

    /// Builds from the six upper-triangle entries in `[δθ, δt_x, δt_y]`
    /// ordering: `(I11, I12, I13, I22, I23, I33)`.
    pub fn from_upper_triangle(u: [f64; 6]) -> Self {
        InfoMatrix(Matrix3::new(
            u[0], u[1], u[2], //
            u[1], u[3], u[4], //
            u[2], u[4], u[5],
        ))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Upper triangle in `[δθ, δt_x, δt_y]` ordering.
    pub fn upper_triangle(&self) -> [f64; 6] {
        let m = &self.0;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0.symmetric_eigenvalues().min()
    }

    pub fn is_positive_definite(&self) -> bool {
        nalgebra::Cholesky::new(self.0).is_some()
    }
}

/// Directed measured edge `⟨i, j, z_ij, Ω_ij⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    /// Source node index.
    pub i: usize,
    /// Target node index.
    pub j: usize,
    /// Measured relative pose of node `j` in the frame of node `i`.
    pub z: PlanarDualQuat,
    /// Information matrix over `[δθ, δt_x, δt_y]`.
    pub omega: InfoMatrix,
}

impl Edge {
    pub fn new(i: usize, j: usize, z: PlanarDualQuat, omega: InfoMatrix) -> Self {
        Edge { i, j, z, omega }
    }
}

/// A diagnostic produced by [`PoseGraph::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    SelfLoop { edge: usize },
    EdgeIndexOutOfRange { edge: usize },
    NonPositiveDefiniteInfo { edge: usize, min_eigenvalue: f64 },
    NonUnitNode { node: usize, deviation: f64 },
    NonFiniteNode { node: usize },
    Disconnected { components: usize },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::SelfLoop { edge } => write!(f, "edge {edge}: self loop"),
            Diagnostic::EdgeIndexOutOfRange { edge } => {
                write!(f, "edge {edge}: node index out of range")
            }
            Diagnostic::NonPositiveDefiniteInfo {
                edge,
                min_eigenvalue,
            } => write!(
                f,
                "edge {edge}: information matrix not positive definite (min eigenvalue {min_eigenvalue:.3e})"
            ),
            Diagnostic::NonUnitNode { node, deviation } => {
                write!(f, "node {node}: real part off unit circle by {deviation:.3e}")
            }
            Diagnostic::NonFiniteNode { node } => write!(f, "node {node}: non-finite pose"),
            Diagnostic::Disconnected { components } => {
                write!(f, "graph is disconnected ({components} components)")
            }
        }
    }
}

/// Node poses plus the measured edge set.
#[derive(Debug, Clone)]
pub struct PoseGraph {
    nodes: Vec<PlanarDualQuat>,
    edges: Vec<Edge>,
    /// Original file ids per dense node index (identity mapping for
    /// graphs built in memory).
    node_ids: Vec<u64>,
}

impl PoseGraph {
    /// Builds a graph from nodes and edges, checking edge indices.
    ///
    /// Connectivity is not required here; `validate` reports it and the
    /// optimizer rejects disconnected graphs.
    pub fn new(nodes: Vec<PlanarDualQuat>, edges: Vec<Edge>) -> Result<Self, GraphError> {
        let n = nodes.len();
        for (k, e) in edges.iter().enumerate() {
            if e.i >= n {
                return Err(GraphError::IndexOutOfRange {
                    edge: k,
                    index: e.i,
                    nodes: n,
                });
            }
            if e.j >= n {
                return Err(GraphError::IndexOutOfRange {
                    edge: k,
                    index: e.j,
                    nodes: n,
                });
            }
            if e.i == e.j {
                return Err(GraphError::SelfLoop { edge: k, node: e.i });
            }
        }
        let node_ids = (0..n as u64).collect();
        Ok(PoseGraph {
            nodes,
            edges,
            node_ids,
        })
    }

    /// Same edges and ids, new node poses.
    pub fn with_nodes(&self, nodes: Vec<PlanarDualQuat>) -> Self {
        assert_eq!(nodes.len(), self.nodes.len());
        PoseGraph {
            nodes,
            edges: self.edges.clone(),
            node_ids: self.node_ids.clone(),
        }
    }

    /// Same nodes and ids, new edge set.
    pub fn with_edges(&self, edges: Vec<Edge>) -> Self {
        PoseGraph {
            nodes: self.nodes.clone(),
            edges,
            node_ids: self.node_ids.clone(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, i: usize) -> &PlanarDualQuat {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[PlanarDualQuat] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Original file id of a dense node index.
    pub fn node_id(&self, i: usize) -> u64 {
        self.node_ids[i]
    }

    /// True when every node is reachable from node 0 over undirected edges.
    pub fn is_connected(&self) -> bool {
        self.component_count() == 1
    }

    fn component_count(&self) -> usize {
        let n = self.nodes.len();
        if n == 0 {
            return 0;
        }
        let mut adjacency = vec![Vec::new(); n];
        for e in &self.edges {
            if e.i < n && e.j < n {
                adjacency[e.i].push(e.j);
                adjacency[e.j].push(e.i);
            }
        }
        let mut seen = vec![false; n];
        let mut components = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(v) = stack.pop() {
                for &w in &adjacency[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        components
    }

    /// Checks every type invariant and returns one diagnostic per
    /// violation; an empty list means the graph is clean.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        for (k, node) in self.nodes.iter().enumerate() {
            if !node.coords().iter().all(|v| v.is_finite()) {
                out.push(Diagnostic::NonFiniteNode { node: k });
                continue;
            }
            let deviation = node.unit_deviation();
            if deviation > 1e-12 {
                out.push(Diagnostic::NonUnitNode { node: k, deviation });
            }
        }
        for (k, e) in self.edges.iter().enumerate() {
            if e.i >= self.nodes.len() || e.j >= self.nodes.len() {
                out.push(Diagnostic::EdgeIndexOutOfRange { edge: k });
                continue;
            }
            if e.i == e.j {
                out.push(Diagnostic::SelfLoop { edge: k });
            }
            let min_eigenvalue = e.omega.min_eigenvalue();
            if min_eigenvalue <= 0.0 {
                out.push(Diagnostic::NonPositiveDefiniteInfo {
                    edge: k,
                    min_eigenvalue,
                });
            }
        }
        let components = self.component_count();
        if components > 1 {
            out.push(Diagnostic::Disconnected { components });
        }
        out
    }
}

/// Which text dialect to expect when parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FormatHint {
    /// Detect from the first record tag (`VERTEX_SE2` vs `VERTEX2`).
    #[default]
    Auto,
    G2o,
    Toro,
}

impl std::str::FromStr for FormatHint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(FormatHint::Auto),
            "g2o" => Ok(FormatHint::G2o),
            "toro" => Ok(FormatHint::Toro),
            other => Err(format!("unknown format '{other}' (expected auto|g2o|toro)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Dialect {
    G2o,
    Toro,
}

struct RawVertex {
    line: usize,
    x: f64,
    y: f64,
    theta: f64,
}

struct RawEdge {
    line: usize,
    i: u64,
    j: u64,
    z: PlanarDualQuat,
    omega: InfoMatrix,
}

fn parse_floats(parts: &[&str], line: usize) -> Result<Vec<f64>, GraphError> {
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>().map_err(|_| GraphError::MalformedLine {
                line,
                message: format!("expected a number, found '{p}'"),
            })
        })
        .collect()
}

fn parse_id(part: &str, line: usize) -> Result<u64, GraphError> {
    part.parse::<u64>().map_err(|_| GraphError::MalformedLine {
        line,
        message: format!("expected a vertex id, found '{part}'"),
    })
}

/// Permutes g2o `(x, y, θ)` upper-triangle entries
/// `(I11, I12, I13, I22, I23, I33)` into the internal `[δθ, δt_x, δt_y]`
/// ordering.
fn info_from_g2o(v: &[f64]) -> InfoMatrix {
    InfoMatrix::from_upper_triangle([v[5], v[2], v[4], v[0], v[1], v[3]])
}

/// Permutes TORO entries `(Ixx, Ixy, Iyy, Itt, Ixt, Iyt)` into the
/// internal `[δθ, δt_x, δt_y]` ordering.
fn info_from_toro(v: &[f64]) -> InfoMatrix {
    InfoMatrix::from_upper_triangle([v[3], v[4], v[5], v[0], v[1], v[2]])
}

/// Inverse of [`info_from_g2o`]: internal matrix to g2o entry order.
fn info_to_g2o(info: &InfoMatrix) -> [f64; 6] {
    let m = info.matrix();
    [
        m[(1, 1)],
        m[(1, 2)],
        m[(0, 1)],
        m[(2, 2)],
        m[(0, 2)],
        m[(0, 0)],
    ]
}

/// Parses a planar pose graph from line-oriented text.
///
/// Blank lines and `#` comments are skipped, as are `FIX` records.
/// Vertex ids may be sparse; they are remapped to dense 0-based indices
/// in ascending id order and the original ids are kept for output.
pub fn parse_graph<R: BufRead>(reader: R, hint: FormatHint) -> Result<PoseGraph, GraphError> {
    let mut dialect = match hint {
        FormatHint::Auto => None,
        FormatHint::G2o => Some(Dialect::G2o),
        FormatHint::Toro => Some(Dialect::Toro),
    };
    let fixed = hint != FormatHint::Auto;

    let mut vertices: BTreeMap<u64, RawVertex> = BTreeMap::new();
    let mut edges: Vec<RawEdge> = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = trimmed.split_whitespace().collect();
        let tag = parts[0];

        let expect_dialect = |dialect: &mut Option<Dialect>, tag_dialect: Dialect| {
            match *dialect {
                None => {
                    *dialect = Some(tag_dialect);
                    Ok(())
                }
                Some(d) if d == tag_dialect => Ok(()),
                Some(_) => Err(GraphError::MalformedLine {
                    line: line_no,
                    message: if fixed {
                        format!("record '{tag}' does not belong to the requested format")
                    } else {
                        format!("record '{tag}' mixes g2o and TORO dialects")
                    },
                }),
            }
        };

        match tag {
            "VERTEX_SE2" | "VERTEX2" => {
                expect_dialect(
                    &mut dialect,
                    if tag == "VERTEX_SE2" {
                        Dialect::G2o
                    } else {
                        Dialect::Toro
                    },
                )?;
                if parts.len() != 5 {
                    return Err(GraphError::MalformedLine {
                        line: line_no,
                        message: format!("{tag} expects 'id x y theta'"),
                    });
                }
                let id = parse_id(parts[1], line_no)?;
                let v = parse_floats(&parts[2..5], line_no)?;
                if vertices.contains_key(&id) {
                    return Err(GraphError::DuplicateVertex { line: line_no, id });
                }
                vertices.insert(
                    id,
                    RawVertex {
                        line: line_no,
                        x: v[0],
                        y: v[1],
                        theta: v[2],
                    },
                );
            }
            "EDGE_SE2" | "EDGE2" => {
                let tag_dialect = if tag == "EDGE_SE2" {
                    Dialect::G2o
                } else {
                    Dialect::Toro
                };
                expect_dialect(&mut dialect, tag_dialect)?;
                // two ids and three pose numbers, optionally followed by
                // six information entries
                if parts.len() != 6 && parts.len() != 12 {
                    return Err(GraphError::MalformedLine {
                        line: line_no,
                        message: format!(
                            "{tag} expects 'i j dx dy dtheta' plus 6 information entries"
                        ),
                    });
                }
                let i = parse_id(parts[1], line_no)?;
                let j = parse_id(parts[2], line_no)?;
                let v = parse_floats(&parts[3..], line_no)?;
                let omega = if v.len() == 3 {
                    // missing information entries default to identity
                    InfoMatrix::identity()
                } else {
                    match tag_dialect {
                        Dialect::G2o => info_from_g2o(&v[3..9]),
                        Dialect::Toro => info_from_toro(&v[3..9]),
                    }
                };
                let z = PlanarDualQuat::from_pose(v[2], Vector2::new(v[0], v[1])).map_err(
                    |e| GraphError::MalformedLine {
                        line: line_no,
                        message: e.to_string(),
                    },
                )?;
                edges.push(RawEdge {
                    line: line_no,
                    i,
                    j,
                    z,
                    omega,
                });
            }
            // fixed-vertex annotations are common in g2o exports; the
            // anchor is chosen by solver configuration instead
            "FIX" => {}
            _ => {
                return Err(GraphError::MalformedLine {
                    line: line_no,
                    message: format!("unknown record tag '{tag}'"),
                });
            }
        }
    }

    if vertices.is_empty() {
        return Err(GraphError::Empty);
    }

    // dense remap in ascending id order
    let index_of: BTreeMap<u64, usize> = vertices
        .keys()
        .enumerate()
        .map(|(idx, &id)| (id, idx))
        .collect();

    let mut nodes = Vec::with_capacity(vertices.len());
    let mut node_ids = Vec::with_capacity(vertices.len());
    for (&id, raw) in &vertices {
        let pose = PlanarDualQuat::from_pose(raw.theta, Vector2::new(raw.x, raw.y)).map_err(
            |e| GraphError::MalformedLine {
                line: raw.line,
                message: e.to_string(),
            },
        )?;
        nodes.push(pose);
        node_ids.push(id);
    }

    let mut mapped_edges = Vec::with_capacity(edges.len());
    for (k, raw) in edges.into_iter().enumerate() {
        let i = *index_of
            .get(&raw.i)
            .ok_or(GraphError::MissingVertex {
                line: raw.line,
                id: raw.i,
            })?;
        let j = *index_of
            .get(&raw.j)
            .ok_or(GraphError::MissingVertex {
                line: raw.line,
                id: raw.j,
            })?;
        if i == j {
            return Err(GraphError::SelfLoop { edge: k, node: i });
        }
        if !raw.omega.is_positive_definite() {
            return Err(GraphError::NonPositiveDefiniteInfo { edge: k });
        }
        mapped_edges.push(Edge::new(i, j, raw.z, raw.omega));
    }

    let graph = PoseGraph {
        nodes,
        edges: mapped_edges,
        node_ids,
    };
    let components = graph.component_count();
    if components > 1 {
        return Err(GraphError::Disconnected { components });
    }
    Ok(graph)
}

/// Parses a graph from an in-memory string.
pub fn parse_graph_str(text: &str, hint: FormatHint) -> Result<PoseGraph, GraphError> {
    parse_graph(text.as_bytes(), hint)
}

/// Reads and parses a graph file.
pub fn load_graph<P: AsRef<Path>>(path: P, hint: FormatHint) -> Result<PoseGraph, GraphError> {
    let file = std::fs::File::open(path)?;
    parse_graph(std::io::BufReader::new(file), hint)
}

fn fmt_f(v: f64) -> String {
    // 17 significant digits round-trip f64 exactly
    format!("{v:.16e}")
}

/// Serializes a graph in the g2o dialect with 17-significant-digit
/// numbers, so parsing the output reproduces the graph.
pub fn write_graph(graph: &PoseGraph) -> String {
    let mut out = String::new();
    for (idx, node) in graph.nodes.iter().enumerate() {
        let (theta, t) = node.to_pose();
        out.push_str(&format!(
            "VERTEX_SE2 {} {} {} {}\n",
            graph.node_ids[idx],
            fmt_f(t.x),
            fmt_f(t.y),
            fmt_f(theta)
        ));
    }
    for e in &graph.edges {
        let (theta, t) = e.z.to_pose();
        let info = info_to_g2o(&e.omega);
        out.push_str(&format!(
            "EDGE_SE2 {} {} {} {} {} {} {} {} {} {} {}\n",
            graph.node_ids[e.i],
            graph.node_ids[e.j],
            fmt_f(t.x),
            fmt_f(t.y),
            fmt_f(theta),
            fmt_f(info[0]),
            fmt_f(info[1]),
            fmt_f(info[2]),
            fmt_f(info[3]),
            fmt_f(info[4]),
            fmt_f(info[5]),
        ));
    }
    out
}

/// Writes a graph to a file in the g2o dialect.
pub fn save_graph<P: AsRef<Path>>(graph: &PoseGraph, path: P) -> Result<(), GraphError> {
    std::fs::write(path, write_graph(graph))?;
    Ok(())
}
