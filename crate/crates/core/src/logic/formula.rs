use std::collections::HashMap;
use std::fmt;

use super::PhaseTable;

/// Index of a node inside a [`Formula`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One operator record. Atoms hold a zero-based class index; in text they
/// are written one-based (`P1` is class 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Node {
    Const(bool),
    Atom(usize),
    Not(NodeId),
    Or(NodeId, NodeId),
    And(NodeId, NodeId),
    Next(NodeId),
    Eventually(NodeId),
    WeakUntil(NodeId, NodeId),
    Since(NodeId, NodeId),
}

impl Node {
    pub fn children(&self) -> impl Iterator<Item = NodeId> {
        let (a, b) = match *self {
            Node::Const(_) | Node::Atom(_) => (None, None),
            Node::Not(a) | Node::Next(a) | Node::Eventually(a) => (Some(a), None),
            Node::Or(a, b) | Node::And(a, b) | Node::WeakUntil(a, b) | Node::Since(a, b) => (Some(a), Some(b)),
        };
        a.into_iter().chain(b)
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Const(_) | Node::Atom(_))
    }
}

/// A temporal-logic formula stored as a DAG. Children always precede their
/// parents in the arena.
#[derive(Clone)]
pub struct Formula {
    nodes: Vec<Node>,
    root: NodeId,
}

impl Formula {
    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> Node {
        self.nodes[id.index()]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of non-leaf nodes.
    pub fn operator_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_leaf()).count()
    }

    /// Largest class index referenced by an atom.
    pub fn max_atom(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Atom(p) => Some(*p),
                _ => None,
            })
            .max()
    }

    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            depth[i] = n.children().map(|c| depth[c.index()] + 1).max().unwrap_or(0);
        }
        depth[self.root.index()]
    }

    /// Copy with every shared subterm duplicated, so the arena is a tree.
    pub fn unshared(&self) -> Formula {
        let mut b = FormulaBuilder::unshared();
        let root = b.copy_from(self, self.root);
        b.finish(root)
    }

    /// Canonical text with atoms rendered as phase names from `table`.
    pub fn display_with(&self, table: &PhaseTable) -> String {
        let mut out = String::new();
        self.write(self.root, &mut out, &|p| {
            table.name(p).map_or_else(|| format!("P{}", p + 1), str::to_owned)
        });
        out
    }

    fn write(&self, id: NodeId, out: &mut String, atom: &dyn Fn(usize) -> String) {
        let bin = |op: &str, a: NodeId, b: NodeId, out: &mut String| {
            out.push('(');
            self.write(a, out, atom);
            out.push(' ');
            out.push_str(op);
            out.push(' ');
            self.write(b, out, atom);
            out.push(')');
        };
        match self.node(id) {
            Node::Const(true) => out.push_str("True"),
            Node::Const(false) => out.push_str("False"),
            Node::Atom(p) => out.push_str(&atom(p)),
            Node::Not(a) => {
                out.push('!');
                self.write(a, out, atom);
            }
            Node::Next(a) => {
                out.push_str("X ");
                self.write(a, out, atom);
            }
            Node::Eventually(a) => {
                out.push_str("F ");
                self.write(a, out, atom);
            }
            Node::Or(a, b) => bin("|", a, b, out),
            Node::And(a, b) => bin("&", a, b, out),
            Node::WeakUntil(a, b) => bin("W", a, b, out),
            Node::Since(a, b) => bin("S", a, b, out),
        }
    }

    fn eq_at(&self, a: NodeId, other: &Formula, b: NodeId) -> bool {
        match (self.node(a), other.node(b)) {
            (Node::Const(x), Node::Const(y)) => x == y,
            (Node::Atom(x), Node::Atom(y)) => x == y,
            (Node::Not(x), Node::Not(y))
            | (Node::Next(x), Node::Next(y))
            | (Node::Eventually(x), Node::Eventually(y)) => self.eq_at(x, other, y),
            (Node::Or(x1, x2), Node::Or(y1, y2))
            | (Node::And(x1, x2), Node::And(y1, y2))
            | (Node::WeakUntil(x1, x2), Node::WeakUntil(y1, y2))
            | (Node::Since(x1, x2), Node::Since(y1, y2)) => {
                self.eq_at(x1, other, y1) && self.eq_at(x2, other, y2)
            }
            _ => false,
        }
    }
}

/// Structural equality of the formulas the DAGs denote.
impl PartialEq for Formula {
    fn eq(&self, other: &Self) -> bool {
        self.eq_at(self.root, other, other.root)
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        self.write(self.root, &mut out, &|p| format!("P{}", p + 1));
        f.write_str(&out)
    }
}

impl fmt::Debug for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Formula({self})")
    }
}

/// Incremental DAG construction with hash-consing.
pub struct FormulaBuilder {
    nodes: Vec<Node>,
    index: HashMap<Node, NodeId>,
    share: bool,
}

impl Default for FormulaBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl FormulaBuilder {
    pub fn new() -> Self {
        FormulaBuilder {
            nodes: Vec::new(),
            index: HashMap::new(),
            share: true,
        }
    }

    /// A builder that never merges identical subterms.
    pub fn unshared() -> Self {
        FormulaBuilder {
            share: false,
            ..Self::new()
        }
    }

    pub fn add(&mut self, node: Node) -> NodeId {
        if self.share {
            if let Some(&id) = self.index.get(&node) {
                return id;
            }
        }
        let id = NodeId(u32::try_from(self.nodes.len()).expect("formula too large"));
        self.nodes.push(node);
        if self.share {
            self.index.insert(node, id);
        }
        id
    }

    pub fn constant(&mut self, v: bool) -> NodeId {
        self.add(Node::Const(v))
    }

    pub fn atom(&mut self, class: usize) -> NodeId {
        self.add(Node::Atom(class))
    }

    pub fn not(&mut self, a: NodeId) -> NodeId {
        self.add(Node::Not(a))
    }

    pub fn or(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add(Node::Or(a, b))
    }

    pub fn and(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add(Node::And(a, b))
    }

    pub fn next(&mut self, a: NodeId) -> NodeId {
        self.add(Node::Next(a))
    }

    pub fn eventually(&mut self, a: NodeId) -> NodeId {
        self.add(Node::Eventually(a))
    }

    pub fn weak_until(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add(Node::WeakUntil(a, b))
    }

    pub fn since(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add(Node::Since(a, b))
    }

    fn copy_from(&mut self, src: &Formula, id: NodeId) -> NodeId {
        let node = match src.node(id) {
            n @ (Node::Const(_) | Node::Atom(_)) => n,
            Node::Not(a) => Node::Not(self.copy_from(src, a)),
            Node::Next(a) => Node::Next(self.copy_from(src, a)),
            Node::Eventually(a) => Node::Eventually(self.copy_from(src, a)),
            Node::Or(a, b) => Node::Or(self.copy_from(src, a), self.copy_from(src, b)),
            Node::And(a, b) => Node::And(self.copy_from(src, a), self.copy_from(src, b)),
            Node::WeakUntil(a, b) => Node::WeakUntil(self.copy_from(src, a), self.copy_from(src, b)),
            Node::Since(a, b) => Node::Since(self.copy_from(src, a), self.copy_from(src, b)),
        };
        self.add(node)
    }

    /// Finishes the formula rooted at `root`, dropping nodes it does not reach.
    pub fn finish(self, root: NodeId) -> Formula {
        let mut keep = vec![false; self.nodes.len()];
        keep[root.index()] = true;
        for i in (0..self.nodes.len()).rev() {
            if keep[i] {
                for c in self.nodes[i].children() {
                    keep[c.index()] = true;
                }
            }
        }
        let mut remap = vec![NodeId(0); self.nodes.len()];
        let mut nodes = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !keep[i] {
                continue;
            }
            let m = |c: NodeId| remap[c.index()];
            let moved = match *node {
                n @ (Node::Const(_) | Node::Atom(_)) => n,
                Node::Not(a) => Node::Not(m(a)),
                Node::Next(a) => Node::Next(m(a)),
                Node::Eventually(a) => Node::Eventually(m(a)),
                Node::Or(a, b) => Node::Or(m(a), m(b)),
                Node::And(a, b) => Node::And(m(a), m(b)),
                Node::WeakUntil(a, b) => Node::WeakUntil(m(a), m(b)),
                Node::Since(a, b) => Node::Since(m(a), m(b)),
            };
            remap[i] = NodeId(nodes.len() as u32);
            nodes.push(moved);
        }
        Formula {
            root: remap[root.index()],
            nodes,
        }
    }
}
