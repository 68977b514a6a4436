//! Staged-tree and chain event graph renderings.
//!
//! The CEG is the quotient of a staged tree: situations with identical
//! staged futures collapse into positions and all leaves collapse into a
//! single sink. Both graphs are emitted as deterministic DOT text.

use crate::scoring::HypersetContext;
use crate::search::Staging;
use crate::tree::{vertex_name, EventTree, VertexId};

/// Fill colors cycled over stages, in canonical stage order.
const PALETTE: [&str; 12] = [
    "#a6cee3", "#1f78b4", "#b2df8a", "#33a02c", "#fb9a99", "#e31a1c",
    "#fdbf6f", "#ff7f00", "#cab2d6", "#6a3d9a", "#ffff99", "#b15928",
];

/// Partition of situations into positions, refining the staging; all
/// leaves share the implicit sink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionPartition {
    /// Position index per vertex; `None` for leaves (the sink).
    position_of: Vec<Option<usize>>,
    /// Member situations per position, ordered by smallest member.
    positions: Vec<Vec<VertexId>>,
}

impl PositionPartition {
    pub fn position_of(&self, v: VertexId) -> Option<usize> {
        self.position_of[v]
    }

    pub fn positions(&self) -> &[Vec<VertexId>] {
        &self.positions
    }

    pub fn position_count(&self) -> usize {
        self.positions.len()
    }

    /// Every position's members share one stage.
    pub fn refines(&self, stage_of: &[Option<usize>]) -> bool {
        self.positions
            .iter()
            .all(|members| members.iter().all(|&v| stage_of[v] == stage_of[members[0]]))
    }
}

/// Global stage index per vertex (None for leaves), with member lists in
/// canonical order across all hypersets.
pub fn stage_assignment(
    tree: &EventTree,
    stagings: &[Staging],
) -> (Vec<Option<usize>>, Vec<Vec<VertexId>>) {
    let mut blocks: Vec<Vec<VertexId>> = stagings
        .iter()
        .flat_map(|s| s.blocks().iter().cloned())
        .collect();
    // Situations left unstaged become their own singleton stages.
    let covered: std::collections::BTreeSet<VertexId> =
        blocks.iter().flatten().copied().collect();
    for v in tree.situations() {
        if !covered.contains(&v) {
            blocks.push(vec![v]);
        }
    }
    blocks.sort_by_key(|b| b[0]);
    let mut stage_of = vec![None; tree.node_count()];
    for (si, block) in blocks.iter().enumerate() {
        for &v in block {
            stage_of[v] = Some(si);
        }
    }
    (stage_of, blocks)
}

/// Coarsest partition in which two situations share a position iff they
/// share a stage and their aligned children are leaves or co-positioned.
/// Computed bottom-up; children always carry higher ids than parents.
pub fn compute_positions(
    tree: &EventTree,
    contexts: &[HypersetContext],
    stagings: &[Staging],
) -> PositionPartition {
    let (stage_of, _) = stage_assignment(tree, stagings);
    let mut position_of: Vec<Option<usize>> = vec![None; tree.node_count()];
    let mut key_to_pos: std::collections::BTreeMap<(usize, Vec<Option<usize>>), usize> =
        std::collections::BTreeMap::new();
    for v in (0..tree.node_count()).rev() {
        if tree.is_leaf(v) {
            continue;
        }
        let align = contexts
            .iter()
            .find_map(|c| c.alignment_of(v))
            .map(<[usize]>::to_vec)
            .unwrap_or_else(|| (0..tree.out_degree(v)).collect());
        let children: Vec<Option<usize>> = align
            .iter()
            .map(|&e| position_of[tree.edges(v)[e].child])
            .collect();
        let key = (stage_of[v].expect("situations are staged"), children);
        let next_id = key_to_pos.len();
        let pos = *key_to_pos.entry(key).or_insert(next_id);
        position_of[v] = Some(pos);
    }
    // Renumber by smallest member for a stable external order.
    let mut members: Vec<Vec<VertexId>> = vec![Vec::new(); key_to_pos.len()];
    for v in tree.situations() {
        members[position_of[v].expect("assigned above")].push(v);
    }
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by_key(|&i| members[i][0]);
    let mut renumber = vec![0usize; members.len()];
    for (new_id, &old_id) in order.iter().enumerate() {
        renumber[old_id] = new_id;
    }
    let positions: Vec<Vec<VertexId>> = order.into_iter().map(|i| members[i].clone()).collect();
    for slot in position_of.iter_mut().flatten() {
        *slot = renumber[*slot];
    }
    PositionPartition {
        position_of,
        positions,
    }
}

fn escape(text: &str) -> String {
    text.replace('\\', "\\\\").replace('"', "\\\"")
}

/// DOT rendering of the staged tree: one node per vertex, stages shown as
/// fill colors (singleton stages uncolored), edges labelled `label: count`.
pub fn staged_tree_dot(tree: &EventTree, stagings: &[Staging]) -> String {
    let (stage_of, stages) = stage_assignment(tree, stagings);
    let mut out = String::from("digraph staged_tree {\n  rankdir=LR;\n  node [shape=circle];\n");
    for v in 0..tree.node_count() {
        let name = vertex_name(v);
        let mut attrs = format!("label=\"{name}\"");
        if let Some(si) = stage_of[v] {
            if stages[si].len() > 1 {
                let color = PALETTE[si % PALETTE.len()];
                attrs.push_str(&format!(", style=filled, fillcolor=\"{color}\""));
            }
        }
        out.push_str(&format!("  {name} [{attrs}];\n"));
    }
    for v in 0..tree.node_count() {
        for edge in tree.edges(v) {
            out.push_str(&format!(
                "  {} -> {} [label=\"{}: {}\"];\n",
                vertex_name(v),
                vertex_name(edge.child),
                escape(&edge.label),
                edge.count
            ));
        }
    }
    out.push_str("}\n");
    out
}

/// DOT rendering of the CEG: one node per position plus the sink, parallel
/// edges preserved, edges labelled `label: p` with three-decimal
/// probabilities taken from per-situation mean vectors.
pub fn ceg_dot(
    tree: &EventTree,
    contexts: &[HypersetContext],
    stagings: &[Staging],
    probs: &[Vec<f64>],
) -> String {
    let (stage_of, stages) = stage_assignment(tree, stagings);
    let partition = compute_positions(tree, contexts, stagings);
    let mut out = String::from("digraph ceg {\n  rankdir=LR;\n  node [shape=circle];\n");
    for (pi, members) in partition.positions().iter().enumerate() {
        let name = format!("w{pi}");
        let mut attrs = format!("label=\"{name}\"");
        let si = stage_of[members[0]].expect("positions hold situations");
        if stages[si].len() > 1 {
            let color = PALETTE[si % PALETTE.len()];
            attrs.push_str(&format!(", style=filled, fillcolor=\"{color}\""));
        }
        out.push_str(&format!("  {name} [{attrs}];\n"));
    }
    out.push_str("  w_inf [label=\"w_inf\", shape=doublecircle];\n");
    for (pi, members) in partition.positions().iter().enumerate() {
        let v = members[0];
        for (e, edge) in tree.edges(v).iter().enumerate() {
            let head = match partition.position_of(edge.child) {
                Some(p) => format!("w{p}"),
                None => "w_inf".to_string(),
            };
            out.push_str(&format!(
                "  w{pi} -> {head} [label=\"{}: {:.3}\"];\n",
                escape(&edge.label),
                probs[v][e]
            ));
        }
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::PriorAssignment;
    use crate::tree::default_hyperstage;

    fn records(rows: &[&[&str]]) -> Vec<Vec<String>> {
        rows.iter()
            .map(|r| r.iter().map(|s| s.to_string()).collect())
            .collect()
    }

    fn setup(rows: &[&[&str]]) -> (EventTree, Vec<HypersetContext>) {
        let tree = EventTree::from_records(&records(rows)).unwrap();
        let prior = PriorAssignment::propagate(&tree, 2.0).unwrap();
        let h = default_hyperstage(&tree);
        let ctxs = HypersetContext::build_all(&tree, &prior, &h).unwrap();
        (tree, ctxs)
    }

    fn singleton_stagings(ctxs: &[HypersetContext]) -> Vec<Staging> {
        ctxs.iter()
            .map(|c| Staging::singletons(c.hyperset(), c.members()))
            .collect()
    }

    #[test]
    fn depth_one_tree_has_root_position_only() {
        let (tree, ctxs) = setup(&[&["a"], &["b"]]);
        let stagings = singleton_stagings(&ctxs);
        let partition = compute_positions(&tree, &ctxs, &stagings);
        assert_eq!(partition.position_count(), 1);
        assert_eq!(partition.positions()[0], vec![0]);
    }

    #[test]
    fn co_staged_leaf_parents_share_a_position() {
        let (tree, ctxs) = setup(&[&["a", "x"], &["a", "y"], &["b", "x"], &["b", "y"]]);
        // Merge s1 and s2 (both children are leaves).
        let stagings = vec![
            Staging::new(0, vec![vec![0]]),
            Staging::new(1, vec![vec![1, 2]]),
        ];
        let partition = compute_positions(&tree, &ctxs, &stagings);
        assert_eq!(partition.position_of(1), partition.position_of(2));
        assert_eq!(partition.position_count(), 2);
    }

    #[test]
    fn co_staged_situations_with_differently_staged_children_split() {
        // s1, s2 are co-staged, but their children s3..s6 are staged apart.
        let rows: &[&[&str]] = &[
            &["a", "x", "u"],
            &["a", "x", "v"],
            &["a", "y", "u"],
            &["a", "y", "v"],
            &["b", "x", "u"],
            &["b", "x", "v"],
            &["b", "y", "u"],
            &["b", "y", "v"],
        ];
        let (tree, ctxs) = setup(rows);
        // Hypersets: {s0}, {s1,s2}, {s3..s6}.
        let merged_children = vec![
            Staging::new(0, vec![vec![0]]),
            Staging::new(1, vec![vec![1, 2]]),
            Staging::new(2, vec![vec![3, 4, 5, 6]]),
        ];
        let partition = compute_positions(&tree, &ctxs, &merged_children);
        assert_eq!(partition.position_of(1), partition.position_of(2));

        let split_children = vec![
            Staging::new(0, vec![vec![0]]),
            Staging::new(1, vec![vec![1, 2]]),
            Staging::new(2, vec![vec![3, 5], vec![4, 6]]),
        ];
        let partition = compute_positions(&tree, &ctxs, &split_children);
        // s1's children are (s3, s4); s2's are (s5, s6): positionally aligned
        // stages, so s1 and s2 still merge.
        assert_eq!(partition.position_of(1), partition.position_of(2));

        let crossed_children = vec![
            Staging::new(0, vec![vec![0]]),
            Staging::new(1, vec![vec![1, 2]]),
            Staging::new(2, vec![vec![3, 6], vec![4, 5]]),
        ];
        let partition = compute_positions(&tree, &ctxs, &crossed_children);
        // Now s1's child stages are (A, B) but s2's are (B, A): split.
        assert_ne!(partition.position_of(1), partition.position_of(2));
    }

    #[test]
    fn singleton_staging_gives_singleton_positions() {
        let (tree, ctxs) = setup(&[&["a", "x"], &["a", "y"], &["b", "x"], &["b", "y"]]);
        let stagings = singleton_stagings(&ctxs);
        let partition = compute_positions(&tree, &ctxs, &stagings);
        assert_eq!(partition.position_count(), tree.situations().count());
        let (stage_of, _) = stage_assignment(&tree, &stagings);
        assert!(partition.refines(&stage_of));
    }

    #[test]
    fn positions_refine_the_staging() {
        let (tree, ctxs) = setup(&[&["a", "x"], &["a", "y"], &["b", "x"], &["b", "y"]]);
        let stagings = vec![
            Staging::new(0, vec![vec![0]]),
            Staging::new(1, vec![vec![1, 2]]),
        ];
        let partition = compute_positions(&tree, &ctxs, &stagings);
        let (stage_of, _) = stage_assignment(&tree, &stagings);
        assert!(partition.refines(&stage_of));
    }

    #[test]
    fn dot_outputs_are_deterministic_and_balanced() {
        let (tree, ctxs) = setup(&[&["a", "x"], &["a", "y"], &["b", "x"], &["b", "y"]]);
        let stagings = vec![
            Staging::new(0, vec![vec![0]]),
            Staging::new(1, vec![vec![1, 2]]),
        ];
        let dot1 = staged_tree_dot(&tree, &stagings);
        let dot2 = staged_tree_dot(&tree, &stagings);
        assert_eq!(dot1, dot2);
        assert_eq!(dot1.matches('{').count(), dot1.matches('}').count());
        // Co-staged situations share a fill color.
        let color_of = |v: usize| {
            dot1.lines()
                .find(|l| l.trim_start().starts_with(&format!("s{v} ")))
                .and_then(|l| l.split("fillcolor=\"").nth(1))
                .map(|rest| rest.split('"').next().unwrap().to_string())
        };
        assert_eq!(color_of(1), color_of(2));
        assert!(color_of(1).is_some());
        assert_eq!(color_of(0), None);
    }

    #[test]
    fn ceg_dot_over_positions() {
        let (tree, ctxs) = setup(&[&["a", "x"], &["a", "y"], &["b", "x"], &["b", "y"]]);
        let stagings = vec![
            Staging::new(0, vec![vec![0]]),
            Staging::new(1, vec![vec![1, 2]]),
        ];
        let model = crate::ensemble::ScoredModel {
            stagings: stagings.clone(),
            log_score: 0.0,
        };
        let probs = crate::ensemble::posterior_mean_probs(&tree, &ctxs, &model).unwrap();
        let dot = ceg_dot(&tree, &ctxs, &stagings, &probs);
        assert!(dot.contains("w_inf"));
        assert!(dot.contains("w0"));
        assert_eq!(dot.matches('{').count(), dot.matches('}').count());
        // Depth-1 check: root floret probabilities appear to three decimals.
        assert!(dot.contains(": 0."));
    }

    #[test]
    fn depth_one_ceg_has_two_nodes() {
        let (tree, ctxs) = setup(&[&["a"], &["b"], &["c"]]);
        let stagings = singleton_stagings(&ctxs);
        let model = crate::ensemble::ScoredModel {
            stagings: stagings.clone(),
            log_score: 0.0,
        };
        let probs = crate::ensemble::posterior_mean_probs(&tree, &ctxs, &model).unwrap();
        let dot = ceg_dot(&tree, &ctxs, &stagings, &probs);
        let node_lines = dot
            .lines()
            .filter(|l| l.trim_start().starts_with('w') && l.contains("label="))
            .count();
        assert_eq!(node_lines, 2); // w0 and w_inf
        let edge_lines = dot.lines().filter(|l| l.contains("->")).count();
        assert_eq!(edge_lines, 3);
    }
}
