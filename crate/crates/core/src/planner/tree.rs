use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum NodeKind {
    /// Synthetic root over the planned task list.
    Root { tasks: Vec<Task> },
    /// Compound task expanded with the `method`-th alternative (0-based) of `name`.
    Compound { name: String, method: usize },
    Step { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub parent: Option<usize>,
    /// Position among the parent's subtasks.
    pub slot: usize,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    pub children: Vec<usize>,
}

/// Ordered decomposition tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecompositionTree {
    pub(super) fn with_root(tasks: Vec<Task>) -> Self {
        Self {
            nodes: vec![TreeNode {
                parent: None,
                slot: 0,
                kind: NodeKind::Root { tasks },
                task: None,
                children: Vec::new(),
            }],
        }
    }

    pub(super) fn push(&mut self, parent: usize, slot: usize, kind: NodeKind, task: Option<Task>) -> usize {
        self.nodes.push(TreeNode {
            parent: Some(parent),
            slot,
            kind,
            task,
            children: Vec::new(),
        });
        self.nodes.len() - 1
    }

    pub(super) fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub(super) fn root_tasks(&self) -> &[Task] {
        match &self.nodes[0].kind {
            NodeKind::Root { tasks } => tasks,
            _ => unreachable!("node 0 is the root"),
        }
    }

    /// Rebuilds child lists from parent links. Nodes are created in
    /// depth-first order, so creation order is left-to-right order.
    pub(super) fn finish(&mut self) {
        for n in &mut self.nodes {
            n.children.clear();
        }
        for i in 1..self.nodes.len() {
            let p = self.nodes[i].parent.expect("non-root node has a parent");
            self.nodes[p].children.push(i);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    /// Plan step indices of the leaves, read left to right.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if let NodeKind::Step { index } = node.kind {
                out.push(index);
            }
            stack.extend(node.children.iter().rev());
        }
        out
    }

    pub fn step_node(&self, step: usize) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| matches!(n.kind, NodeKind::Step { index } if index == step))
    }

    /// Labels of the compound ancestors of a step, outermost first.
    pub fn method_chain(&self, step: usize) -> Vec<String> {
        let mut chain = Vec::new();
        let mut cur = self.step_node(step).and_then(|n| self.nodes[n].parent);
        while let Some(n) = cur {
            if let NodeKind::Compound { name, method } = &self.nodes[n].kind {
                chain.push(format!("{name}#{}", method + 1));
            }
            cur = self.nodes[n].parent;
        }
        chain.reverse();
        chain
    }

    /// Number of compound ancestors of a step (excluding the root).
    pub fn compound_depth(&self, step: usize) -> usize {
        self.method_chain(step).len()
    }

    /// Tasks still to be achieved when `step` is next, restarting the
    /// `level`-th ancestor of that step (0 = the step itself).
    /// Returns `None` when `level` reaches past the root's children.
    pub fn remaining(&self, step: usize, level: usize) -> Option<Vec<Task>> {
        let mut n = self.step_node(step)?;
        for _ in 0..level {
            n = self.nodes[n].parent?;
            if self.nodes[n].parent.is_none() {
                return None;
            }
        }
        let mut out = vec![self.nodes[n].task.clone()?];
        loop {
            let node = &self.nodes[n];
            let p = node.parent?;
            let parent = &self.nodes[p];
            match &parent.kind {
                NodeKind::Root { tasks } => {
                    out.extend(tasks.iter().skip(node.slot + 1).cloned());
                    break;
                }
                _ => {
                    for &c in &parent.children {
                        if self.nodes[c].slot > node.slot {
                            out.push(self.nodes[c].task.clone()?);
                        }
                    }
                }
            }
            n = p;
        }
        Some(out)
    }

    /// Indented text outline, one node per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![(0usize, 0usize)];
        while let Some((n, depth)) = stack.pop() {
            let node = &self.nodes[n];
            let label = match (&node.kind, &node.task) {
                (NodeKind::Root { tasks }, _) => {
                    let t: Vec<String> = tasks.iter().map(|t| t.to_string()).collect();
                    format!("goal {}", t.join("; "))
                }
                (NodeKind::Compound { method, .. }, Some(t)) => format!("{t} [method {}]", method + 1),
                (NodeKind::Step { index }, Some(t)) => format!("{index}: {t}"),
                (_, None) => "?".into(),
            };
            let _ = writeln!(out, "{}{}", "  ".repeat(depth), label);
            for &c in node.children.iter().rev() {
                stack.push((c, depth + 1));
            }
        }
        out
    }
}
