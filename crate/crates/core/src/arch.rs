//! Backbone skeletons and discrete architectures (one op + one incoming edge per node).
//!
//! Searchable nodes are numbered `1..=K` across all stages. Index `0` is the
//! stem output; the input of a later stage is denoted by the index of the last
//! node of the previous stage (its output, after the fixed reduction block).
//! Each node may draw its input from up to three preceding positions within its
//! own stage.

use std::fmt::Write as _;

use crate::candidates::OperationKind;
use crate::error::{NtaaError, Result};

/// Maximum number of incoming-edge choices per node.
pub const MAX_EDGES: usize = 3;

/// Fixed skeleton: stem, stages of searchable nodes separated by stride-2 reductions, and a head.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Backbone {
    pub in_channels: usize,
    /// Channel width of each stage.
    pub widths: Vec<usize>,
    /// Searchable node count of each stage.
    pub nodes: Vec<usize>,
    pub num_classes: usize,
}

impl Backbone {
    /// The MiniRes chain: 16- and 32-channel stages of `k1` and `k2` nodes.
    pub fn mini_res(k1: usize, k2: usize, num_classes: usize) -> Self {
        Backbone { in_channels: 3, widths: vec![16, 32], nodes: vec![k1, k2], num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.nodes.len() {
            return Err(NtaaError::config("backbone needs one width per stage"));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(NtaaError::config("backbone channel counts must be positive"));
        }
        if self.num_classes < 2 {
            return Err(NtaaError::config("backbone needs at least two classes"));
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.iter().sum()
    }

    /// `(stage, first global index)` of every node, 1-based.
    pub fn stage_of(&self, node: usize) -> Option<(usize, usize)> {
        let mut first = 1;
        for (s, &k) in self.nodes.iter().enumerate() {
            if node >= first && node < first + k {
                return Some((s, first));
            }
            first += k;
        }
        None
    }

    pub fn channels_at(&self, node: usize) -> Option<usize> {
        self.stage_of(node).map(|(s, _)| self.widths[s])
    }

    /// Valid predecessor indices of `node`, nearest first.
    pub fn predecessors(&self, node: usize) -> Vec<usize> {
        let Some((_, first)) = self.stage_of(node) else { return Vec::new() };
        let stage_input = first - 1;
        (1..=MAX_EDGES).map_while(|d| node.checked_sub(d).filter(|&p| p >= stage_input)).collect()
    }

    pub fn descriptor(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "backbone in={} widths={} nodes={} classes={}",
            self.in_channels,
            join(&self.widths),
            join(&self.nodes),
            self.num_classes
        )
    }

    fn parse_descriptor(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("backbone") {
            return Err(NtaaError::arg(format!("expected backbone descriptor, got `{line}`")));
        }
        let list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|x| x.parse().map_err(|_| NtaaError::arg(format!("bad number `{x}`"))))
                .collect()
        };
        let (mut inc, mut widths, mut nodes, mut classes) = (None, None, None, None);
        for p in parts {
            let (k, v) =
                p.split_once('=').ok_or_else(|| NtaaError::arg(format!("bad field `{p}`")))?;
            match k {
                "in" => inc = v.parse().ok(),
                "widths" => widths = Some(list(v)?),
                "nodes" => nodes = Some(list(v)?),
                "classes" => classes = v.parse().ok(),
                _ => return Err(NtaaError::arg(format!("unknown backbone field `{k}`"))),
            }
        }
        let b = Backbone {
            in_channels: inc.ok_or_else(|| NtaaError::arg("backbone missing in="))?,
            widths: widths.ok_or_else(|| NtaaError::arg("backbone missing widths="))?,
            nodes: nodes.ok_or_else(|| NtaaError::arg("backbone missing nodes="))?,
            num_classes: classes.ok_or_else(|| NtaaError::arg("backbone missing classes="))?,
        };
        b.validate()?;
        Ok(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeChoice {
    pub op: OperationKind,
    /// Global index of the chosen predecessor.
    pub edge: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DiscreteArchitecture {
    pub backbone: Backbone,
    pub nodes: Vec<NodeChoice>,
}

impl DiscreteArchitecture {
    /// Every node fed by its immediate predecessor.
    pub fn chain(backbone: Backbone, ops: &[OperationKind]) -> Result<Self> {
        let nodes = ops.iter().enumerate().map(|(i, &op)| NodeChoice { op, edge: i }).collect();
        let a = DiscreteArchitecture { backbone, nodes };
        a.validate()?;
        Ok(a)
    }

    /// Uniform-op chain over `backbone`.
    pub fn uniform(backbone: Backbone, op: OperationKind) -> Self {
        let n = backbone.num_nodes();
        Self::chain(backbone, &vec![op; n]).expect("uniform chain is valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.nodes.len() != self.backbone.num_nodes() {
            return Err(NtaaError::arg(format!(
                "architecture has {} nodes, backbone expects {}",
                self.nodes.len(),
                self.backbone.num_nodes()
            )));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let idx = i + 1;
            if !self.backbone.predecessors(idx).contains(&n.edge) {
                return Err(NtaaError::arg(format!(
                    "node {idx}: edge {} is not a valid predecessor",
                    n.edge
                )));
            }
        }
        Ok(())
    }

    /// Position of the chosen edge among [`Backbone::predecessors`].
    pub fn edge_slot(&self, node: usize) -> usize {
        node - self.nodes[node - 1].edge - 1
    }

    pub fn ops(&self) -> Vec<OperationKind> {
        self.nodes.iter().map(|n| n.op).collect()
    }

    /// Number of weighted (convolution) choices.
    pub fn effective_depth(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.has_weights()).count()
    }

    /// Nodes whose operation or edge differs from `other`.
    pub fn diff_count(&self, other: &DiscreteArchitecture) -> usize {
        self.nodes.iter().zip(&other.nodes).filter(|(a, b)| a != b).count()
    }

    /// Canonical text: the backbone descriptor followed by `node <i>: op=<kind> edge=<j>` lines.
    pub fn to_text(&self) -> String {
        let mut s = self.backbone.descriptor();
        s.push('\n');
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(s, "node {}: op={} edge={}", i + 1, n.op, n.edge);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let backbone = Backbone::parse_descriptor(
            lines.next().ok_or_else(|| NtaaError::arg("empty architecture"))?,
        )?;
        let mut nodes = Vec::new();
        for line in lines {
            let bad = || NtaaError::arg(format!("bad architecture line `{line}`"));
            let rest = line.strip_prefix("node ").ok_or_else(bad)?;
            let (idx, rest) = rest.split_once(':').ok_or_else(bad)?;
            let idx: usize = idx.trim().parse().map_err(|_| bad())?;
            if idx != nodes.len() + 1 {
                return Err(NtaaError::arg(format!("node {idx} out of order")));
            }
            let mut op = None;
            let mut edge = None;
            for field in rest.split_whitespace() {
                match field.split_once('=') {
                    Some(("op", v)) => op = Some(v.parse::<OperationKind>()?),
                    Some(("edge", v)) => edge = Some(v.parse::<usize>().map_err(|_| bad())?),
                    _ => return Err(bad()),
                }
            }
            nodes.push(NodeChoice { op: op.ok_or_else(bad)?, edge: edge.ok_or_else(bad)? });
        }
        let a = DiscreteArchitecture { backbone, nodes };
        a.validate()?;
        Ok(a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_text().into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| NtaaError::arg(format!("architecture is not UTF-8: {e}")))?;
        Self::from_text(text)
    }

    /// Graphviz rendering: fixed blocks as boxes, searchable nodes labelled by their op.
    pub fn to_dot(&self) -> String {
        let b = &self.backbone;
        let mut s = String::from(
            "digraph architecture {\n  rankdir=LR;\n  node [shape=box, style=rounded];\n",
        );
        let _ = writeln!(s, "  input [label=\"input\\n{}ch\", shape=oval];", b.in_channels);
        let _ = writeln!(s, "  stem [label=\"stem\\nconv3 {}->{}\"];", b.in_channels, b.widths[0]);
        s.push_str("  input -> stem;\n");
        let mut first = 1;
        let mut stage_input = "stem".to_string();
        for (st, &k) in b.nodes.iter().enumerate() {
            if st > 0 {
                let red = format!("reduce{st}");
                let _ = writeln!(
                    s,
                    "  {red} [label=\"reduce\\nconv3/2 {}->{}\"];",
                    b.widths[st - 1],
                    b.widths[st]
                );
                let _ = writeln!(s, "  {stage_input} -> {red};");
                stage_input = red;
            }
            for idx in first..first + k {
                let n = self.nodes[idx - 1];
                let style = if n.op.has_weights() { "" } else { ", style=\"rounded,dashed\"" };
                let _ = writeln!(s, "  n{idx} [label=\"{idx}: {}\"{style}];", n.op);
                let src =
                    if n.edge == first - 1 { stage_input.clone() } else { format!("n{}", n.edge) };
                let attr = if n.edge + 1 == idx { "" } else { " [style=dashed, label=\"skip\"]" };
                let _ = writeln!(s, "  {src} -> n{idx}{attr};");
            }
            stage_input = if k == 0 { stage_input } else { format!("n{}", first + k - 1) };
            first += k;
        }
        let _ =
            writeln!(s, "  head [label=\"gap + linear\\n{} classes\", shape=oval];", b.num_classes);
        let _ = writeln!(s, "  {stage_input} -> head;");
        s.push_str("}\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predecessors_respect_stage_boundaries() {
        let b = Backbone::mini_res(4, 4, 4);
        assert_eq!(b.predecessors(1), vec![0]);
        assert_eq!(b.predecessors(2), vec![1, 0]);
        assert_eq!(b.predecessors(4), vec![3, 2, 1]);
        assert_eq!(b.predecessors(5), vec![4]);
        assert_eq!(b.predecessors(7), vec![6, 5, 4]);
        assert!(b.predecessors(9).is_empty());
    }

    #[test]
    fn text_form_is_canonical() {
        let mut a =
            DiscreteArchitecture::uniform(Backbone::mini_res(2, 2, 3), OperationKind::Conv3);
        a.nodes[1] = NodeChoice { op: OperationKind::Identity, edge: 0 };
        let text = a.to_text();
        assert_eq!(
            text,
            "backbone in=3 widths=16,32 nodes=2,2 classes=3\n\
             node 1: op=conv3 edge=0\n\
             node 2: op=identity edge=0\n\
             node 3: op=conv3 edge=2\n\
             node 4: op=conv3 edge=3\n"
        );
        assert_eq!(DiscreteArchitecture::from_text(&text).unwrap(), a);
        assert_eq!(a.effective_depth(), 3);
        assert!(a.to_dot().contains("n2 [label=\"2: identity\""));
    }

    #[test]
    fn invalid_edges_rejected() {
        let mut a =
            DiscreteArchitecture::uniform(Backbone::mini_res(2, 2, 3), OperationKind::Conv3);
        a.nodes[2].edge = 1;
        assert!(a.validate().is_err());
    }
}
