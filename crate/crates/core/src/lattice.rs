//! Finite filtered probability trees.
//!
//! Nodes are the atoms of the filtration. Every node stores the jump `ΔX` that
//! leads into it and the path value `X_t`; the root sits at `X_0 = 0`. Values of
//! adapted processes are stored per node, predictable ones on the parent of the
//! step they drive.

use crate::error::{Error, Result};
use std::collections::{HashMap, VecDeque};

pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub t: usize,
    pub parent: Option<usize>,
    /// Increment of X into this node (zero vector at the root).
    pub jump: Vec<f64>,
    /// Path value X_t.
    pub x: Vec<f64>,
    pub children: Vec<usize>,
    /// Distinct nonzero jump values among the children (the jump support).
    pub support: Vec<Vec<f64>>,
    /// For each child, its index in `support`, or `None` for a zero jump.
    pub child_class: Vec<Option<usize>>,
}

/// Description of one node when building a tree explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: usize,
    pub parent: Option<usize>,
    pub jump: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    horizon: usize,
    dim: usize,
    levels: Vec<Vec<usize>>,
}

fn is_zero(x: &[f64]) -> bool {
    x.iter().all(|v| *v == 0.0)
}

impl Tree {
    /// Tree in which every non-leaf node has the same list of branch jumps.
    pub fn uniform(horizon: usize, branches: &[Vec<f64>]) -> Result<Tree> {
        if branches.is_empty() {
            return Err(Error::invalid("uniform tree needs at least one branch"));
        }
        let mut specs = vec![NodeSpec { id: 0, parent: None, jump: vec![0.0; branches[0].len()] }];
        let mut frontier = vec![0usize];
        for _ in 0..horizon {
            let mut next = Vec::new();
            for &p in &frontier {
                for b in branches {
                    let id = specs.len();
                    specs.push(NodeSpec { id, parent: Some(p), jump: b.clone() });
                    next.push(id);
                }
            }
            frontier = next;
        }
        Tree::from_nodes(Some(horizon), &specs)
    }

    /// Builds a tree from node records given in any order. Ids are renumbered
    /// breadth-first; children keep their order of appearance.
    pub fn from_nodes(horizon: Option<usize>, specs: &[NodeSpec]) -> Result<Tree> {
        if specs.is_empty() {
            return Err(Error::invalid("tree has no nodes"));
        }
        let mut index: HashMap<usize, usize> = HashMap::new();
        for (i, s) in specs.iter().enumerate() {
            if index.insert(s.id, i).is_some() {
                return Err(Error::invalid(format!("duplicate node id {}", s.id)));
            }
        }
        let roots: Vec<usize> = (0..specs.len()).filter(|&i| specs[i].parent.is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::invalid(format!("expected exactly one root, found {}", roots.len())));
        }
        let dim = specs[roots[0]].jump.len().max(
            specs.iter().filter(|s| s.parent.is_some()).map(|s| s.jump.len()).next().unwrap_or(1),
        );
        let mut kids: Vec<Vec<usize>> = vec![Vec::new(); specs.len()];
        for (i, s) in specs.iter().enumerate() {
            if let Some(p) = s.parent {
                let pi = *index
                    .get(&p)
                    .ok_or_else(|| Error::invalid(format!("node {}: unknown parent {}", s.id, p)))?;
                if s.jump.len() != dim {
                    return Err(Error::invalid(format!(
                        "node {}: jump has dimension {}, expected {}",
                        s.id,
                        s.jump.len(),
                        dim
                    )));
                }
                if s.jump.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("node {}: non-finite jump", s.id)));
                }
                kids[pi].push(i);
            }
        }

        let mut nodes: Vec<Node> = Vec::with_capacity(specs.len());
        let mut new_id = vec![usize::MAX; specs.len()];
        let mut queue = VecDeque::new();
        queue.push_back((roots[0], None::<usize>, 0usize));
        while let Some((old, parent, t)) = queue.pop_front() {
            let id = nodes.len();
            new_id[old] = id;
            let jump = if parent.is_none() { vec![0.0; dim] } else { specs[old].jump.clone() };
            let x = match parent {
                None => vec![0.0; dim],
                Some(p) => nodes[p].x.iter().zip(&jump).map(|(a, b)| a + b).collect(),
            };
            if let Some(p) = parent {
                nodes[p].children.push(id);
            }
            nodes.push(Node {
                id,
                t,
                parent,
                jump,
                x,
                children: Vec::new(),
                support: Vec::new(),
                child_class: Vec::new(),
            });
            for &c in &kids[old] {
                queue.push_back((c, Some(id), t + 1));
            }
        }
        if nodes.len() != specs.len() {
            let orphan = (0..specs.len()).find(|&i| new_id[i] == usize::MAX).unwrap();
            return Err(Error::invalid(format!(
                "node {} is not reachable from the root (cycle or detached branch)",
                specs[orphan].id
            )));
        }

        let depth = nodes.iter().map(|n| n.t).max().unwrap_or(0);
        let horizon = horizon.unwrap_or(depth);
        for n in &nodes {
            if n.t > horizon {
                return Err(Error::invalid(format!(
                    "node {} sits at time {} beyond the horizon {}",
                    specs[index_of(&new_id, n.id)].id,
                    n.t,
                    horizon
                )));
            }
            if n.children.is_empty() && n.t != horizon {
                return Err(Error::invalid(format!(
                    "node {} is a leaf at time {} but the horizon is {}",
                    specs[index_of(&new_id, n.id)].id,
                    n.t,
                    horizon
                )));
            }
        }

        for i in 0..nodes.len() {
            let mut support: Vec<Vec<f64>> = Vec::new();
            let mut classes = Vec::with_capacity(nodes[i].children.len());
            for &c in &nodes[i].children {
                let j = &nodes[c].jump;
                if is_zero(j) {
                    classes.push(None);
                } else if let Some(k) = support.iter().position(|s| s == j) {
                    classes.push(Some(k));
                } else {
                    support.push(j.clone());
                    classes.push(Some(support.len() - 1));
                }
            }
            nodes[i].support = support;
            nodes[i].child_class = classes;
        }

        let mut levels = vec![Vec::new(); horizon + 1];
        for n in &nodes {
            levels[n.t].push(n.id);
        }
        Ok(Tree { nodes, horizon, dim, levels })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.nodes[id].children
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].children.is_empty()
    }

    pub fn level(&self, t: usize) -> &[usize] {
        &self.levels[t]
    }

    pub fn leaves(&self) -> &[usize] {
        &self.levels[self.horizon]
    }

    pub fn internal(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(move |&i| !self.is_leaf(i))
    }

    /// Nodes from the root down to `id`, inclusive.
    pub fn path(&self, id: usize) -> Vec<usize> {
        let mut out = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    /// The subtree rooted at `id` in breadth-first order (starting with `id`).
    pub fn subtree(&self, id: usize) -> Vec<usize> {
        let mut out = vec![id];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(&self.nodes[out[i]].children);
            i += 1;
        }
        out
    }

    pub fn is_ancestor_or_self(&self, a: usize, b: usize) -> bool {
        let mut cur = Some(b);
        while let Some(c) = cur {
            if c == a {
                return true;
            }
            if self.nodes[c].t < self.nodes[a].t {
                return false;
            }
            cur = self.nodes[c].parent;
        }
        false
    }

    /// Position of `child` among the children of its parent.
    pub fn child_index(&self, child: usize) -> Option<usize> {
        let p = self.nodes[child].parent?;
        self.nodes[p].children.iter().position(|&c| c == child)
    }
}

fn index_of(new_id: &[usize], id: usize) -> usize {
    new_id.iter().position(|&n| n == id).unwrap()
}

/// Transition probabilities for every non-leaf node (child order of the tree).
#[derive(Debug, Clone, PartialEq)]
pub struct Law {
    pub probs: Vec<Vec<f64>>,
}

impl Law {
    pub fn uniform(tree: &Tree) -> Law {
        Law {
            probs: tree
                .nodes()
                .iter()
                .map(|n| vec![1.0 / n.children.len().max(1) as f64; n.children.len()])
                .collect(),
        }
    }

    pub fn at(&self, node: usize) -> &[f64] {
        &self.probs[node]
    }

    /// E[h(child) | node].
    pub fn expect(&self, tree: &Tree, node: usize, h: &[f64]) -> f64 {
        tree.children(node).iter().zip(&self.probs[node]).map(|(&c, p)| p * h[c]).sum()
    }

    /// Probability of reaching each node from the root.
    pub fn reach(&self, tree: &Tree) -> Vec<f64> {
        self.reach_from(tree, tree.root())
    }

    /// Probability of each node conditional on `from` (zero outside its subtree).
    pub fn reach_from(&self, tree: &Tree, from: usize) -> Vec<f64> {
        let mut out = vec![0.0; tree.len()];
        out[from] = 1.0;
        for n in tree.subtree(from) {
            for (k, &c) in tree.children(n).iter().enumerate() {
                out[c] = out[n] * self.probs[n][k];
            }
        }
        out
    }

    pub fn validate(&self, tree: &Tree) -> Result<()> {
        for n in tree.internal() {
            check_kernel(tree, n, &self.probs[n])?;
        }
        Ok(())
    }
}

pub fn check_kernel(tree: &Tree, node: usize, k: &[f64]) -> Result<()> {
    let nc = tree.children(node).len();
    if k.len() != nc {
        return Err(Error::node(
            node,
            format!("kernel not a probability: {} weights for {} children", k.len(), nc),
        ));
    }
    if k.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::node(node, "kernel not a probability: weights must be strictly positive"));
    }
    let s: f64 = k.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(Error::node(node, format!("kernel not a probability: weights sum to {s}")));
    }
    Ok(())
}

/// One kernel index per node (ignored at leaves).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Selection(pub Vec<usize>);

/// Per-node finite lists of admissible kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFamily {
    pub kernels: Vec<Vec<Vec<f64>>>,
}

impl KernelFamily {
    pub fn single(law: &Law) -> KernelFamily {
        KernelFamily { kernels: law.probs.iter().map(|p| vec![p.clone()]).collect() }
    }

    pub fn validate(&self, tree: &Tree) -> Result<()> {
        if self.kernels.len() != tree.len() {
            return Err(Error::invalid("kernel family does not cover every node"));
        }
        for n in tree.internal() {
            if self.kernels[n].is_empty() {
                return Err(Error::node(n, "no admissible kernel"));
            }
            for k in &self.kernels[n] {
                check_kernel(tree, n, k)?;
            }
        }
        Ok(())
    }

    pub fn count(&self, node: usize) -> usize {
        self.kernels[node].len()
    }

    pub fn law(&self, sel: &Selection) -> Law {
        Law {
            probs: self
                .kernels
                .iter()
                .zip(&sel.0)
                .map(|(ks, &i)| if ks.is_empty() { Vec::new() } else { ks[i].clone() })
                .collect(),
        }
    }

    pub fn first(&self) -> Selection {
        Selection(vec![0; self.kernels.len()])
    }

    /// Number of pastings on the subtree of `root` (as a float to avoid overflow).
    pub fn pasting_count(&self, tree: &Tree, root: usize) -> f64 {
        tree.subtree(root)
            .into_iter()
            .filter(|&n| !tree.is_leaf(n))
            .map(|n| self.kernels[n].len() as f64)
            .product()
    }

    /// All kernel choices on the subtree of `root`; nodes outside keep index 0.
    pub fn enumerate_pastings(&self, tree: &Tree, root: usize, cap: usize) -> Result<Vec<Selection>> {
        let count = self.pasting_count(tree, root);
        if count > cap as f64 {
            return Err(Error::CapExceeded { what: "pastings".into(), count, cap });
        }
        let free: Vec<usize> = tree
            .subtree(root)
            .into_iter()
            .filter(|&n| !tree.is_leaf(n) && self.kernels[n].len() > 1)
            .collect();
        let mut out = Vec::with_capacity(count as usize);
        let mut cur = vec![0usize; tree.len()];
        loop {
            out.push(Selection(cur.clone()));
            let mut i = 0;
            loop {
                if i == free.len() {
                    return Ok(out);
                }
                let n = free[i];
                cur[n] += 1;
                if cur[n] < self.kernels[n].len() {
                    break;
                }
                cur[n] = 0;
                i += 1;
            }
        }
    }

    /// Restriction to a shifted subtree.
    pub fn remap(&self, map: &[usize]) -> KernelFamily {
        KernelFamily { kernels: map.iter().map(|&o| self.kernels[o].clone()).collect() }
    }
}

/// Paste `other` into `base` on every node of `switch`.
pub fn paste(base: &Selection, other: &Selection, switch: &[bool]) -> Selection {
    Selection(
        base.0
            .iter()
            .zip(&other.0)
            .zip(switch)
            .map(|((a, b), s)| if *s { *b } else { *a })
            .collect(),
    )
}

/// E[h | F_t] for a process `h` given at level t+1; returned in the order of `tree.level(t)`.
pub fn conditional_expectation(tree: &Tree, law: &Law, h: &[f64], t: usize) -> Vec<f64> {
    tree.level(t).iter().map(|&n| law.expect(tree, n, h)).collect()
}

/// Martingale generated by leaf values: E[h_N | F_t] at every node.
pub fn tower(tree: &Tree, law: &Law, leaf_values: &[f64]) -> Vec<f64> {
    let mut v = leaf_values.to_vec();
    for t in (0..tree.horizon()).rev() {
        for &n in tree.level(t) {
            v[n] = law.expect(tree, n, &v);
        }
    }
    v
}

/// Translation data of a shifted subtree.
#[derive(Debug, Clone, PartialEq)]
pub struct Shift {
    pub origin: usize,
    pub t0: usize,
    pub x0: Vec<f64>,
    /// `map[new_id] = old_id`.
    pub map: Vec<usize>,
}

/// Re-roots the tree at `node`: time and X are re-based to zero.
pub fn shift_subtree(tree: &Tree, node: usize) -> (Tree, Shift) {
    let sub = tree.subtree(node);
    let specs: Vec<NodeSpec> = sub
        .iter()
        .map(|&o| NodeSpec {
            id: o,
            parent: if o == node { None } else { tree.node(o).parent },
            jump: if o == node { vec![0.0; tree.dim()] } else { tree.node(o).jump.clone() },
        })
        .collect();
    let t0 = tree.node(node).t;
    let shifted = Tree::from_nodes(Some(tree.horizon() - t0), &specs)
        .expect("a subtree of a valid tree is valid");
    // breadth-first renumbering of a breadth-first list is order preserving
    let shift = Shift { origin: node, t0, x0: tree.node(node).x.clone(), map: sub };
    (shifted, shift)
}

/// A stopping time given by the set of nodes at which it stops. Every path
/// meets exactly one stopping node.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StoppingTime {
    pub stop: Vec<bool>,
}

impl StoppingTime {
    pub fn constant(tree: &Tree, t: usize) -> StoppingTime {
        let t = t.min(tree.horizon());
        StoppingTime { stop: tree.nodes().iter().map(|n| n.t == t).collect() }
    }

    /// True when the path through `node` has not stopped strictly before it.
    pub fn reaches(&self, tree: &Tree, node: usize) -> bool {
        let mut cur = tree.node(node).parent;
        while let Some(p) = cur {
            if self.stop[p] {
                return false;
            }
            cur = tree.node(p).parent;
        }
        true
    }

    /// True when `node` is strictly before the stopping node on its path.
    pub fn is_running(&self, tree: &Tree, node: usize) -> bool {
        !self.stop[node] && self.reaches(tree, node)
    }

    /// The stopping node on the path through `node`.
    pub fn stopping_node(&self, tree: &Tree, node: usize) -> usize {
        let path = tree.path(node);
        for &p in &path {
            if self.stop[p] {
                return p;
            }
        }
        // below `node` the stop is not yet determined; `node` itself is returned
        node
    }

    pub fn min(&self, other: &StoppingTime, tree: &Tree) -> StoppingTime {
        let mut stop = vec![false; tree.len()];
        for n in 0..tree.len() {
            if (self.stop[n] || other.stop[n]) && self.reaches(tree, n) && other.reaches(tree, n) {
                stop[n] = true;
            }
        }
        StoppingTime { stop }
    }

    pub fn validate(&self, tree: &Tree) -> Result<()> {
        for &l in tree.leaves() {
            let hits = tree.path(l).iter().filter(|&&p| self.stop[p]).count();
            if hits != 1 {
                return Err(Error::node(l, format!("path meets {hits} stopping nodes")));
            }
        }
        Ok(())
    }
}

/// Number of stopping times of the subtree at `node`: 1 + product over children.
pub fn stopping_time_count(tree: &Tree, node: usize) -> f64 {
    if tree.is_leaf(node) {
        return 1.0;
    }
    1.0 + tree.children(node).iter().map(|&c| stopping_time_count(tree, c)).product::<f64>()
}

/// Every stopping time of the tree, leaves being forced stops.
pub fn enumerate_stopping_times(tree: &Tree, cap: usize) -> Result<Vec<StoppingTime>> {
    let count = stopping_time_count(tree, tree.root());
    if count > cap as f64 {
        return Err(Error::CapExceeded { what: "stopping times".into(), count, cap });
    }
    fn rec(tree: &Tree, node: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![node]];
        if tree.is_leaf(node) {
            return out;
        }
        let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
        for &c in tree.children(node) {
            let sub = rec(tree, c);
            let mut next = Vec::with_capacity(combos.len() * sub.len());
            for a in &combos {
                for b in &sub {
                    let mut v = a.clone();
                    v.extend_from_slice(b);
                    next.push(v);
                }
            }
            combos = next;
        }
        out.extend(combos);
        out
    }
    Ok(rec(tree, tree.root())
        .into_iter()
        .map(|nodes| {
            let mut stop = vec![false; tree.len()];
            for n in nodes {
                stop[n] = true;
            }
            StoppingTime { stop }
        })
        .collect())
}
