//! The action tree: a trie of candidate-action increments, evaluated with a
//! bottom-up covariance-request pass and a top-down incremental-propagation
//! pass so that increments shared by several candidates are handled once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::belief::{BeliefState, VariableKey};
use crate::error::{Error, Result};
use crate::ramdl::{
    self, ActionIncrement, InfoObjective, InfoScore, ScoreKind,
};
use crate::recovery::{CovarianceCache, InferenceChange};

/// A candidate action as an ordered list of segment increments.
#[derive(Debug, Clone)]
pub struct CandidatePath {
    pub id: usize,
    pub segments: Vec<ActionIncrement>,
}

#[derive(Debug, Clone)]
pub struct FgpNode {
    pub id: usize,
    pub parent_edge: Option<usize>,
    /// Outgoing edge indices, in insertion order.
    pub children: Vec<usize>,
    /// Candidate ids whose posterior belief this node represents.
    pub candidate_labels: Vec<usize>,
    /// New variables introduced along the path from the root.
    known_new: BTreeSet<VariableKey>,
    /// Variables this node's own edge evaluations need (Y_u).
    own_request: BTreeSet<VariableKey>,
    /// Own request plus everything the subtree asked for (Y_T).
    subtree_request: BTreeSet<VariableKey>,
    pub cache: Option<CovarianceCache>,
    pub cond_cache: Option<CovarianceCache>,
}

#[derive(Debug, Clone)]
pub struct FgpEdge {
    pub from: usize,
    pub to: usize,
    pub increment: ActionIncrement,
    pub gain: Option<InfoScore>,
    /// How many times this edge's gain was computed (must stay at 1).
    pub eval_count: u32,
    /// How many times covariances were propagated across this edge.
    pub propagate_count: u32,
}

/// Rooted tree of beliefs (nodes) and action increments (edges). The root is
/// the prior belief; each leaf is labeled with the candidates it terminates.
#[derive(Debug, Clone)]
pub struct FgpTree {
    pub nodes: Vec<FgpNode>,
    pub edges: Vec<FgpEdge>,
    leaf_of: BTreeMap<usize, usize>,
}

/// Builds the longest-common-prefix trie over candidates' segment sequences.
pub fn build_trajectory_tree(candidates: &[CandidatePath]) -> Result<FgpTree> {
    if candidates.is_empty() {
        return Err(Error::Config("empty candidate list".into()));
    }
    let mut tree = FgpTree {
        nodes: vec![FgpNode {
            id: 0,
            parent_edge: None,
            children: Vec::new(),
            candidate_labels: Vec::new(),
            known_new: BTreeSet::new(),
            own_request: BTreeSet::new(),
            subtree_request: BTreeSet::new(),
            cache: None,
            cond_cache: None,
        }],
        edges: Vec::new(),
        leaf_of: BTreeMap::new(),
    };
    for cand in candidates {
        let mut at = 0usize;
        for seg in &cand.segments {
            at = tree.child_via(at, seg);
        }
        tree.nodes[at].candidate_labels.push(cand.id);
        tree.leaf_of.insert(cand.id, at);
    }
    Ok(tree)
}

impl FgpTree {
    fn child_via(&mut self, node: usize, seg: &ActionIncrement) -> usize {
        for &e in &self.nodes[node].children {
            if self.edges[e].increment.segment == seg.segment {
                return self.edges[e].to;
            }
        }
        let edge_id = self.edges.len();
        let child_id = self.nodes.len();
        let mut known_new = self.nodes[node].known_new.clone();
        known_new.extend(seg.new_vars.iter().copied());
        self.edges.push(FgpEdge {
            from: node,
            to: child_id,
            increment: seg.clone(),
            gain: None,
            eval_count: 0,
            propagate_count: 0,
        });
        self.nodes.push(FgpNode {
            id: child_id,
            parent_edge: Some(edge_id),
            children: Vec::new(),
            candidate_labels: Vec::new(),
            known_new,
            own_request: BTreeSet::new(),
            subtree_request: BTreeSet::new(),
            cache: None,
            cond_cache: None,
        });
        self.nodes[node].children.push(edge_id);
        child_id
    }

    pub fn leaf_of(&self, candidate: usize) -> Option<usize> {
        self.leaf_of.get(&candidate).copied()
    }

    /// Root-to-leaf edge index path of a candidate.
    pub fn path_of(&self, candidate: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut at = match self.leaf_of(candidate) {
            Some(n) => n,
            None => return path,
        };
        while let Some(e) = self.nodes[at].parent_edge {
            path.push(e);
            at = self.edges[e].from;
        }
        path.reverse();
        path
    }

    fn is_old_at(&self, node: usize, prior: &BeliefState) -> impl Fn(VariableKey) -> bool + 'static {
        let known = self.nodes[node].known_new.clone();
        let layout = prior.layout.clone();
        move |k: VariableKey| layout.contains(k) || known.contains(&k)
    }

    /// Bottom-up pass: each node asks its parent for the covariance entries
    /// its own edge evaluations and its subtree need. Returns the root's
    /// request set (the one-time prior computation set).
    pub fn query_required_covariances(
        &mut self,
        prior: &BeliefState,
        objective: &InfoObjective,
    ) -> Result<Vec<VariableKey>> {
        // Own requests: involved-old variables of outgoing edges, evaluated
        // at this node; leaves additionally need their candidates' terminal
        // focus for entropy objectives.
        for n in 0..self.nodes.len() {
            let mut own = BTreeSet::new();
            for &e in &self.nodes[n].children {
                let inc = &self.edges[e].increment;
                let is_old = self.is_old_at(n, prior);
                own.extend(inc.involved_old(&is_old));
            }
            if matches!(objective, InfoObjective::FocusedNewEntropy)
                && !self.nodes[n].candidate_labels.is_empty()
            {
                if let Some(e) = self.nodes[n].parent_edge {
                    if let Some(&terminal) = self.edges[e].increment.new_vars.last() {
                        own.insert(terminal);
                    }
                }
            }
            self.nodes[n].own_request = own;
        }

        // Children were created after their parents, so a reverse sweep sees
        // every child before its parent.
        for n in (0..self.nodes.len()).rev() {
            let mut subtree = self.nodes[n].own_request.clone();
            for &e in &self.nodes[n].children.clone() {
                let child = self.edges[e].to;
                let new_vars: BTreeSet<VariableKey> =
                    self.edges[e].increment.new_vars.iter().copied().collect();
                let is_old = self.is_old_at(n, prior);
                let involved_old = self.edges[e].increment.involved_old(&is_old);
                subtree.extend(involved_old);
                for &k in &self.nodes[child].subtree_request {
                    if !new_vars.contains(&k) {
                        subtree.insert(k);
                    }
                }
            }
            self.nodes[n].subtree_request = subtree;
        }
        Ok(self.nodes[0].subtree_request.iter().copied().collect())
    }

    /// Top-down pass: resolves every node's covariance cache from its
    /// parent's via the lemma update matching the edge's change kind. The
    /// root's blocks are the only computation that touches the full state.
    pub fn propagate_covariances(
        &mut self,
        prior: &BeliefState,
        objective: &InfoObjective,
    ) -> Result<()> {
        let root_vars: Vec<VariableKey> = self.nodes[0].subtree_request.iter().copied().collect();
        self.nodes[0].cache = Some(CovarianceCache::from_belief(prior, root_vars.clone())?);
        if let InfoObjective::FocusedOldGain(focus) = objective {
            let unfocused: Vec<VariableKey> = root_vars
                .iter()
                .copied()
                .filter(|k| !focus.contains(k))
                .collect();
            self.nodes[0].cond_cache = Some(CovarianceCache::from_belief_conditional(
                prior,
                unfocused,
                focus.clone(),
            )?);
        }

        for n in 0..self.nodes.len() {
            let Some(edge_id) = self.nodes[n].parent_edge else {
                continue;
            };
            let parent = self.edges[edge_id].from;
            let is_old = self.is_old_at(parent, prior);
            let change = self.edges[edge_id].increment.to_change(&is_old)?;
            let targets: Vec<VariableKey> =
                self.nodes[n].subtree_request.iter().copied().collect();

            // Every block read here was requested during the bottom-up pass;
            // a miss surfaces as MissingCacheBlock.
            let parent_cache = self.nodes[parent]
                .cache
                .as_ref()
                .expect("parent resolved before child");
            let needed: Vec<VariableKey> = needed_from_parent(&targets, &change);
            let restricted = parent_cache.restricted(&needed)?;
            let (posterior, _) = restricted.updated(&change)?;
            self.nodes[n].cache = Some(posterior.restricted(&targets)?);

            if let InfoObjective::FocusedOldGain(focus) = objective {
                let parent_cond = self.nodes[parent]
                    .cond_cache
                    .as_ref()
                    .expect("conditional cache resolved before child");
                let cond_targets: Vec<VariableKey> = targets
                    .iter()
                    .copied()
                    .filter(|k| !focus.contains(k))
                    .collect();
                let cond_needed: Vec<VariableKey> = needed_from_parent(&cond_targets, &change)
                    .into_iter()
                    .filter(|k| !focus.contains(k))
                    .collect();
                let restricted = parent_cond.restricted(&cond_needed)?;
                let (posterior, _) = restricted.updated(&change)?;
                self.nodes[n].cond_cache = Some(posterior.restricted(&cond_targets)?);
            }
            self.edges[edge_id].propagate_count += 1;
        }
        Ok(())
    }

    /// Per-edge gains from the tail node's cache. Each edge is scored once.
    fn score_edges(&mut self, prior: &BeliefState, objective: &InfoObjective) -> Result<()> {
        for e in 0..self.edges.len() {
            if matches!(objective, InfoObjective::FocusedNewEntropy) {
                // entropy is evaluated at leaf caches, not per edge
                continue;
            }
            let tail = self.edges[e].from;
            let is_old = self.is_old_at(tail, prior);
            let change = self.edges[e].increment.to_change(&is_old)?;
            let cache = self.nodes[tail].cache.as_ref().expect("tail resolved");
            let score = ramdl::score_change(
                &change,
                cache,
                self.nodes[tail].cond_cache.as_ref(),
                objective,
                &[],
            )?;
            self.edges[e].gain = Some(score);
            self.edges[e].eval_count += 1;
        }
        Ok(())
    }

    /// Renders the tree as a text outline: nodes, edge increments, gains.
    pub fn render_outline(&self) -> String {
        let mut out = String::new();
        self.render_node(0, 0, &mut out);
        out
    }

    fn render_node(&self, node: usize, depth: usize, out: &mut String) {
        let n = &self.nodes[node];
        let labels = if n.candidate_labels.is_empty() {
            String::new()
        } else {
            format!(" candidates={:?}", n.candidate_labels)
        };
        let _ = writeln!(out, "{:indent$}node {}{}", "", n.id, labels, indent = depth * 2);
        for &e in &n.children {
            let edge = &self.edges[e];
            let gain = edge
                .gain
                .map(|g| format!(" gain={:.6}", g.value))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{:indent$}edge segment={} rows={} new={}{}",
                "",
                edge.increment.segment.0,
                edge.increment.rows(),
                edge.increment.new_vars.len(),
                gain,
                indent = depth * 2 + 2
            );
            self.render_node(edge.to, depth + 1, out);
        }
    }
}

/// Variables the child needs from the parent's belief: targets that already
/// exist there plus the change's involved set.
fn needed_from_parent(targets: &[VariableKey], change: &InferenceChange) -> Vec<VariableKey> {
    let new_vars: BTreeSet<VariableKey> = change.new_vars().iter().copied().collect();
    let mut set: BTreeSet<VariableKey> = targets
        .iter()
        .copied()
        .filter(|k| !new_vars.contains(k))
        .collect();
    set.extend(change.involved.iter().copied());
    set.into_iter().collect()
}

/// Full tree evaluation: request pass, propagation pass, per-edge scoring,
/// and per-candidate aggregation (sum of gains along the path, or terminal
/// entropy at the leaf).
pub fn evaluate_tree(
    tree: &mut FgpTree,
    prior: &BeliefState,
    objective: &InfoObjective,
) -> Result<ramdl::Evaluation> {
    tree.query_required_covariances(prior, objective)?;
    tree.propagate_covariances(prior, objective)?;
    tree.score_edges(prior, objective)?;

    let candidates: Vec<usize> = tree.leaf_of.keys().copied().collect();
    let mut scores = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let score = match objective {
            InfoObjective::FocusedNewEntropy => {
                let leaf = tree.leaf_of[&cand];
                let edge = tree.nodes[leaf]
                    .parent_edge
                    .ok_or(Error::Config("candidate with no segments".into()))?;
                let terminal = *tree.edges[edge]
                    .increment
                    .new_vars
                    .last()
                    .ok_or(Error::Config("terminal segment adds no variables".into()))?;
                let cache = tree.nodes[leaf].cache.as_ref().expect("leaf resolved");
                let block = cache.block(&[terminal], &[terminal])?;
                InfoScore {
                    value: 0.5 * crate::linalg::dense::spd_log_det(&block)?,
                    kind: ScoreKind::FocusedEntropy,
                }
            }
            _ => {
                let kind = match objective {
                    InfoObjective::Unfocused => ScoreKind::UnfocusedGain,
                    _ => ScoreKind::FocusedGain,
                };
                let value = tree
                    .path_of(cand)
                    .iter()
                    .map(|&e| tree.edges[e].gain.expect("edge scored").value)
                    .sum();
                InfoScore { value, kind }
            }
        };
        scores.push((cand, score));
    }
    let best = ramdl::select_best(&scores);
    Ok(ramdl::Evaluation { scores, best })
}

/// Returns (sum of per-segment gains, gain of the concatenated increment):
/// the telescoping identity behind shared-prefix reuse.
pub fn ig_additivity_check(
    path: &[ActionIncrement],
    prior: &BeliefState,
) -> Result<(f64, f64)> {
    let candidates = vec![CandidatePath {
        id: 0,
        segments: path.to_vec(),
    }];
    let mut tree = build_trajectory_tree(&candidates)?;
    let objective = InfoObjective::Unfocused;
    let sum = evaluate_tree(&mut tree, prior, &objective)?
        .scores
        .first()
        .expect("one candidate")
        .1
        .value;

    let flat = ramdl::concat_increments(0, path);
    let direct = ramdl::evaluate_candidates_flat(&[flat], prior, &objective)?
        .scores
        .first()
        .expect("one candidate")
        .1
        .value;
    Ok((sum, direct))
}
