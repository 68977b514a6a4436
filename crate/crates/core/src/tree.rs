//! Event trees over categorical path data.
//!
//! An [`EventTree`] is a rooted labelled tree whose non-leaf vertices
//! (situations) carry a conditional distribution over their outgoing edges.
//! Every observation is a complete root-to-leaf path, so per-edge counts
//! satisfy flow conservation at every internal vertex. A [`Hyperstage`]
//! partitions the situations into blocks within which merging into a common
//! stage is permitted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vertex identifier: the breadth-first index of a vertex in its tree.
///
/// Rendered as `s0`, `s1`, ... in files and reports.
pub type VertexId = usize;

/// One observed root-to-leaf path, as the sequence of edge labels taken.
pub type PathRecord = Vec<String>;

/// Labelled edge out of a situation, with its observation count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub label: String,
    pub child: VertexId,
    pub count: u64,
}

#[derive(Debug, Clone)]
struct Node {
    /// `(parent id, index of the incoming edge in the parent's edge list)`.
    parent: Option<(VertexId, usize)>,
    /// Outgoing edges in sorted-label order; empty for leaves.
    edges: Vec<Edge>,
    depth: usize,
}

/// Rooted labelled tree with per-edge observation counts.
///
/// Vertices are numbered breadth-first with children visited in sorted-label
/// order, so construction is deterministic: permuting the input records
/// yields an identical tree, identifiers included.
#[derive(Debug, Clone)]
pub struct EventTree {
    nodes: Vec<Node>,
}

/// Non-fatal oddity found in a tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeWarning {
    /// The situation has a single outgoing edge, so it carries no staging
    /// information.
    OutDegreeOne(VertexId),
}

impl fmt::Display for TreeWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeWarning::OutDegreeOne(v) => {
                write!(f, "situation {} has out-degree 1", vertex_name(*v))
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("empty record list")]
    EmptyRecords,
    #[error("record {row} is empty")]
    EmptyRecord { row: usize },
    #[error("record ends at an internal vertex (ambiguous leaf): {}", path.join(" / "))]
    PrefixRecord { path: Vec<String> },
    #[error("row {row}: non-empty cell after an empty cell")]
    GapInPath { row: usize },
    #[error("duplicate edge label {label:?} at {}", path.join(" / "))]
    DuplicateEdge { path: Vec<String>, label: String },
    #[error("counted path not present in declared structure: {}", path.join(" / "))]
    UnknownPath { path: Vec<String> },
    #[error("count on a path ending at an internal vertex: {}", path.join(" / "))]
    CountAtInternal { path: Vec<String> },
    #[error("declared structure has no edges")]
    EmptyStructure,
    #[error("bad vertex name {name:?} (expected s<number>)")]
    BadVertexName { name: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Render a vertex id as its external name, e.g. `s12`.
pub fn vertex_name(v: VertexId) -> String {
    format!("s{v}")
}

/// Parse an external vertex name back to its id.
pub fn parse_vertex_name(name: &str) -> Result<VertexId, TreeError> {
    name.strip_prefix('s')
        .and_then(|rest| rest.parse::<usize>().ok())
        .ok_or_else(|| TreeError::BadVertexName {
            name: name.to_string(),
        })
}

// Intermediate trie used while building; children keyed by label so the
// final breadth-first numbering is independent of record order.
#[derive(Default)]
struct TrieNode {
    children: BTreeMap<String, TrieNode>,
    /// Observations entering this vertex.
    arriving: u64,
    /// Observations terminating here.
    terminal: u64,
}

impl TrieNode {
    fn insert(&mut self, path: &[String]) {
        self.arriving += 1;
        let mut node = self;
        for label in path {
            node = node.children.entry(label.clone()).or_default();
            node.arriving += 1;
        }
        node.terminal += 1;
    }

    fn ensure_path(&mut self, path: &[String]) {
        let mut node = self;
        for label in path {
            node = node.children.entry(label.clone()).or_default();
        }
    }

    fn add_count(&mut self, path: &[String], n: u64) -> Result<(), TreeError> {
        self.arriving += n;
        let mut node = self;
        for (i, label) in path.iter().enumerate() {
            node = node
                .children
                .get_mut(label)
                .ok_or_else(|| TreeError::UnknownPath {
                    path: path[..=i].to_vec(),
                })?;
            node.arriving += n;
        }
        if !node.children.is_empty() {
            return Err(TreeError::CountAtInternal {
                path: path.to_vec(),
            });
        }
        node.terminal += n;
        Ok(())
    }

    // A vertex with both a terminal count and children means some record
    // stopped at an internal vertex.
    fn check_prefix_free(&self, path: &mut Vec<String>) -> Result<(), TreeError> {
        if self.terminal > 0 && !self.children.is_empty() {
            return Err(TreeError::PrefixRecord { path: path.clone() });
        }
        for (label, child) in &self.children {
            path.push(label.clone());
            child.check_prefix_free(path)?;
            path.pop();
        }
        Ok(())
    }
}

impl EventTree {
    /// Build a tree whose edges are exactly the prefixes of the observed
    /// label sequences, with counts equal to the number of records
    /// traversing each edge.
    pub fn from_records(records: &[PathRecord]) -> Result<EventTree, TreeError> {
        if records.is_empty() {
            return Err(TreeError::EmptyRecords);
        }
        let mut trie = TrieNode::default();
        for (i, record) in records.iter().enumerate() {
            if record.is_empty() {
                return Err(TreeError::EmptyRecord { row: i + 1 });
            }
            trie.insert(record);
        }
        trie.check_prefix_free(&mut Vec::new())?;
        Ok(Self::from_trie(&trie))
    }

    /// Build a tree from a declared structure plus leaf-path counts.
    ///
    /// Undeclared counts default to zero, which allows logically possible
    /// but unobserved paths to exist structurally.
    pub fn from_spec(spec: &TreeSpec) -> Result<EventTree, TreeError> {
        let mut trie = TrieNode::default();
        spec.tree.build_into(&mut trie);
        if trie.children.is_empty() {
            return Err(TreeError::EmptyStructure);
        }
        for pc in &spec.counts {
            trie.add_count(&pc.path, pc.n)?;
        }
        Ok(Self::from_trie(&trie))
    }

    // Breadth-first numbering over the trie; children already sorted by label.
    fn from_trie(trie: &TrieNode) -> EventTree {
        let mut nodes = vec![Node {
            parent: None,
            edges: Vec::new(),
            depth: 0,
        }];
        let mut queue: Vec<(&TrieNode, VertexId)> = vec![(trie, 0)];
        let mut head = 0;
        while head < queue.len() {
            let (tnode, id) = queue[head];
            head += 1;
            let depth = nodes[id].depth;
            for (edge_idx, (label, child)) in tnode.children.iter().enumerate() {
                let child_id = nodes.len();
                nodes.push(Node {
                    parent: Some((id, edge_idx)),
                    edges: Vec::new(),
                    depth: depth + 1,
                });
                nodes[id].edges.push(Edge {
                    label: label.clone(),
                    child: child_id,
                    count: child.arriving,
                });
                queue.push((child, child_id));
            }
        }
        EventTree { nodes }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> VertexId {
        0
    }

    pub fn is_leaf(&self, v: VertexId) -> bool {
        self.nodes[v].edges.is_empty()
    }

    pub fn edges(&self, v: VertexId) -> &[Edge] {
        &self.nodes[v].edges
    }

    pub fn out_degree(&self, v: VertexId) -> usize {
        self.nodes[v].edges.len()
    }

    pub fn parent(&self, v: VertexId) -> Option<(VertexId, usize)> {
        self.nodes[v].parent
    }

    pub fn depth(&self, v: VertexId) -> usize {
        self.nodes[v].depth
    }

    /// Situations in breadth-first order.
    pub fn situations(&self) -> impl Iterator<Item = VertexId> + '_ {
        (0..self.nodes.len()).filter(move |&v| !self.is_leaf(v))
    }

    pub fn leaves(&self) -> impl Iterator<Item = VertexId> + '_ {
        (0..self.nodes.len()).filter(move |&v| self.is_leaf(v))
    }

    /// Outgoing edge labels of `v` (already in sorted order).
    pub fn labels(&self, v: VertexId) -> Vec<&str> {
        self.nodes[v].edges.iter().map(|e| e.label.as_str()).collect()
    }

    /// Count on the incoming edge of `v`; for the root, the total number of
    /// observations.
    pub fn arriving_count(&self, v: VertexId) -> u64 {
        match self.nodes[v].parent {
            Some((p, idx)) => self.nodes[p].edges[idx].count,
            None => self.nodes[0].edges.iter().map(|e| e.count).sum(),
        }
    }

    /// Per-situation observation counts aligned to edge order.
    pub fn floret_counts(&self, v: VertexId) -> Vec<u64> {
        self.nodes[v].edges.iter().map(|e| e.count).collect()
    }

    /// Total number of observed root-to-leaf paths.
    pub fn total_records(&self) -> u64 {
        self.arriving_count(0)
    }

    /// Checks that every internal vertex's incoming count equals the sum of
    /// its outgoing counts. Holds by construction for both constructors.
    pub fn flow_conserved(&self) -> bool {
        self.situations().all(|v| {
            let out: u64 = self.nodes[v].edges.iter().map(|e| e.count).sum();
            self.arriving_count(v) == out
        })
    }

    pub fn warnings(&self) -> Vec<TreeWarning> {
        self.situations()
            .filter(|&v| self.out_degree(v) == 1)
            .map(TreeWarning::OutDegreeOne)
            .collect()
    }

    /// Labels along the path from the root to `v`.
    pub fn path_to(&self, v: VertexId) -> Vec<String> {
        let mut labels = Vec::new();
        let mut cur = v;
        while let Some((p, idx)) = self.nodes[cur].parent {
            labels.push(self.nodes[p].edges[idx].label.clone());
            cur = p;
        }
        labels.reverse();
        labels
    }

    /// Serializable declared-structure form of this tree (structure plus the
    /// per-leaf path counts), suitable for re-loading with [`EventTree::from_spec`].
    pub fn to_spec(&self) -> TreeSpec {
        fn build(tree: &EventTree, v: VertexId) -> NestedTree {
            NestedTree(
                tree.edges(v)
                    .iter()
                    .map(|e| (e.label.clone(), build(tree, e.child)))
                    .collect(),
            )
        }
        let counts = self
            .leaves()
            .filter(|&l| self.arriving_count(l) > 0)
            .map(|l| PathCount {
                path: self.path_to(l),
                n: self.arriving_count(l),
            })
            .collect();
        TreeSpec {
            tree: build(self, 0),
            counts,
        }
    }
}

/// Nested label-keyed structure: each key is an edge label, each value the
/// subtree it leads to. Leaves are empty objects.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq, Eq)]
#[serde(transparent)]
pub struct NestedTree(pub BTreeMap<String, NestedTree>);

impl NestedTree {
    fn build_into(&self, trie: &mut TrieNode) {
        for (label, sub) in &self.0 {
            trie.ensure_path(std::slice::from_ref(label));
            sub.build_into(trie.children.get_mut(label).expect("just inserted"));
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PathCount {
    pub path: Vec<String>,
    pub n: u64,
}

/// Declared tree file: structure plus optional leaf-path counts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TreeSpec {
    pub tree: NestedTree,
    #[serde(default)]
    pub counts: Vec<PathCount>,
}

impl TreeSpec {
    pub fn from_json(text: &str) -> Result<TreeSpec, TreeError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<TreeSpec, TreeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Read path records from CSV: one row per observation, columns are
/// successive edge labels, trailing empty cells mean the path ended early.
pub fn records_from_csv<R: Read>(reader: R, has_header: bool) -> Result<Vec<PathRecord>, TreeError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .from_reader(reader);
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let row_no = i + 1;
        let mut path: Vec<String> = Vec::new();
        let mut ended = false;
        for cell in row.iter() {
            if cell.is_empty() {
                ended = true;
            } else if ended {
                return Err(TreeError::GapInPath { row: row_no });
            } else {
                path.push(cell.to_string());
            }
        }
        if path.is_empty() {
            return Err(TreeError::EmptyRecord { row: row_no });
        }
        records.push(path);
    }
    Ok(records)
}

pub fn records_from_csv_path(
    path: impl AsRef<Path>,
    has_header: bool,
) -> Result<Vec<PathRecord>, TreeError> {
    records_from_csv(std::fs::File::open(path)?, has_header)
}

/// Write path records as CSV with an `e1..eD` header row; short paths get
/// trailing empty cells.
pub fn records_to_csv<W: std::io::Write>(
    records: &[PathRecord],
    writer: W,
) -> Result<(), TreeError> {
    let depth = records.iter().map(|r| r.len()).max().unwrap_or(1);
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record((1..=depth).map(|i| format!("e{i}")))?;
    for record in records {
        let mut row: Vec<&str> = record.iter().map(String::as_str).collect();
        row.resize(depth, "");
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Partition of the situations into hypersets: the blocks within which
/// situations may be placed in a common stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hyperstage {
    blocks: Vec<Vec<VertexId>>,
    /// Explicit edge alignment per situation; situations absent from the map
    /// align by sorted label.
    edge_order: BTreeMap<VertexId, Vec<String>>,
}

/// A single problem found by [`validate_hyperstage`]. Violations are data,
/// not failures; an empty report means the hyperstage is valid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HyperstageViolation {
    UnknownSituation { vertex: VertexId },
    DuplicateMember { vertex: VertexId },
    NotACover { missing: Vec<VertexId> },
    MixedOutDegree { block: usize },
    LabelMismatch { block: usize },
    BadEdgeOrder { vertex: VertexId },
}

impl fmt::Display for HyperstageViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HyperstageViolation::UnknownSituation { vertex } => {
                write!(f, "{} is not a situation of the tree", vertex_name(*vertex))
            }
            HyperstageViolation::DuplicateMember { vertex } => {
                write!(f, "{} appears in more than one block", vertex_name(*vertex))
            }
            HyperstageViolation::NotACover { missing } => {
                let names: Vec<String> = missing.iter().map(|v| vertex_name(*v)).collect();
                write!(f, "not a cover: missing {}", names.join(", "))
            }
            HyperstageViolation::MixedOutDegree { block } => {
                write!(f, "block {block} mixes out-degrees")
            }
            HyperstageViolation::LabelMismatch { block } => write!(
                f,
                "block {block} mixes edge label sets under sorted-label alignment"
            ),
            HyperstageViolation::BadEdgeOrder { vertex } => write!(
                f,
                "edge_order for {} is not a permutation of its labels",
                vertex_name(*vertex)
            ),
        }
    }
}

impl Hyperstage {
    pub fn new(
        mut blocks: Vec<Vec<VertexId>>,
        edge_order: BTreeMap<VertexId, Vec<String>>,
    ) -> Hyperstage {
        for block in &mut blocks {
            block.sort_unstable();
            block.dedup();
        }
        blocks.retain(|b| !b.is_empty());
        blocks.sort_by_key(|b| b[0]);
        Hyperstage { blocks, edge_order }
    }

    pub fn blocks(&self) -> &[Vec<VertexId>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &[VertexId] {
        &self.blocks[i]
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Aligned edge indices for situation `v`: entry `p` is the index (in the
    /// tree's edge order) of the edge occupying aligned position `p`.
    ///
    /// Sorted-label alignment is the identity because trees store edges in
    /// sorted order already; an explicit `edge_order` entry overrides it.
    pub fn alignment(&self, tree: &EventTree, v: VertexId) -> Option<Vec<usize>> {
        match self.edge_order.get(&v) {
            None => Some((0..tree.out_degree(v)).collect()),
            Some(order) => {
                if order.len() != tree.out_degree(v) {
                    return None;
                }
                let mut used = vec![false; order.len()];
                let mut align = Vec::with_capacity(order.len());
                for label in order {
                    let idx = tree
                        .edges(v)
                        .iter()
                        .enumerate()
                        .position(|(i, e)| e.label == *label && !used[i])?;
                    used[idx] = true;
                    align.push(idx);
                }
                Some(align)
            }
        }
    }

    pub fn edge_order(&self) -> &BTreeMap<VertexId, Vec<String>> {
        &self.edge_order
    }

    /// Index of the hyperset containing `v`, if any.
    pub fn hyperset_of(&self, v: VertexId) -> Option<usize> {
        self.blocks.iter().position(|b| b.binary_search(&v).is_ok())
    }

    pub fn from_json(text: &str) -> Result<Hyperstage, TreeError> {
        let file: HyperstageFile = serde_json::from_str(text)?;
        let (raw_blocks, raw_order) = match file {
            HyperstageFile::Bare(blocks) => (blocks, BTreeMap::new()),
            HyperstageFile::Full { blocks, edge_order } => (blocks, edge_order),
        };
        let mut blocks = Vec::with_capacity(raw_blocks.len());
        for raw in raw_blocks {
            let mut block = Vec::with_capacity(raw.len());
            for name in raw {
                block.push(parse_vertex_name(&name)?);
            }
            blocks.push(block);
        }
        let mut edge_order = BTreeMap::new();
        for (name, order) in raw_order {
            edge_order.insert(parse_vertex_name(&name)?, order);
        }
        Ok(Hyperstage::new(blocks, edge_order))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Hyperstage, TreeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_names(&self) -> Vec<Vec<String>> {
        self.blocks
            .iter()
            .map(|b| b.iter().map(|&v| vertex_name(v)).collect())
            .collect()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum HyperstageFile {
    Bare(Vec<Vec<String>>),
    Full {
        blocks: Vec<Vec<String>>,
        #[serde(default)]
        edge_order: BTreeMap<String, Vec<String>>,
    },
}

/// Group situations into blocks of identical outgoing label multisets.
///
/// This is the coarsest hyperstage under which sorted-label alignment is
/// well defined everywhere.
pub fn default_hyperstage(tree: &EventTree) -> Hyperstage {
    let mut groups: BTreeMap<Vec<&str>, Vec<VertexId>> = BTreeMap::new();
    for v in tree.situations() {
        groups.entry(tree.labels(v)).or_default().push(v);
    }
    let blocks = groups.into_values().collect();
    Hyperstage::new(blocks, BTreeMap::new())
}

/// Check a hyperstage against a tree, listing every violation found.
pub fn validate_hyperstage(tree: &EventTree, h: &Hyperstage) -> Vec<HyperstageViolation> {
    let mut violations = Vec::new();
    let situations: BTreeSet<VertexId> = tree.situations().collect();
    let mut seen: BTreeSet<VertexId> = BTreeSet::new();
    for (bi, block) in h.blocks().iter().enumerate() {
        for &v in block {
            if !situations.contains(&v) {
                violations.push(HyperstageViolation::UnknownSituation { vertex: v });
            } else if !seen.insert(v) {
                violations.push(HyperstageViolation::DuplicateMember { vertex: v });
            }
        }
        let members: Vec<VertexId> = block
            .iter()
            .copied()
            .filter(|v| situations.contains(v))
            .collect();
        if members.len() < 2 {
            continue;
        }
        let degree = tree.out_degree(members[0]);
        if members.iter().any(|&v| tree.out_degree(v) != degree) {
            violations.push(HyperstageViolation::MixedOutDegree { block: bi });
            continue;
        }
        let explicit = members.iter().all(|v| h.edge_order().contains_key(v));
        if explicit {
            for &v in &members {
                if h.alignment(tree, v).is_none() {
                    violations.push(HyperstageViolation::BadEdgeOrder { vertex: v });
                }
            }
        } else {
            // Sorted-label alignment requires identical label multisets.
            let reference = tree.labels(members[0]);
            if members.iter().any(|&v| tree.labels(v) != reference) {
                violations.push(HyperstageViolation::LabelMismatch { block: bi });
            }
            for &v in &members {
                if h.edge_order().contains_key(&v) && h.alignment(tree, v).is_none() {
                    violations.push(HyperstageViolation::BadEdgeOrder { vertex: v });
                }
            }
        }
    }
    let missing: Vec<VertexId> = situations.difference(&seen).copied().collect();
    if !missing.is_empty() {
        violations.push(HyperstageViolation::NotACover { missing });
    }
    violations
}
