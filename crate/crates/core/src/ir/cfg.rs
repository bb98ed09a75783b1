//! Control-flow graph, dominators and post-dominators.

use std::collections::HashMap;

use super::{Function, Terminator};
use crate::ir::Diagnostic;

/// Index-based view of a function's control flow. Block `i` is
/// `f.blocks[i]`; block 0 is the entry.
#[derive(Debug, Clone)]
pub struct Cfg {
    pub labels: Vec<String>,
    pub index: HashMap<String, usize>,
    pub succs: Vec<Vec<usize>>,
    pub preds: Vec<Vec<usize>>,
    /// Reverse postorder of the blocks reachable from the entry.
    pub rpo: Vec<usize>,
    pub reachable: Vec<bool>,
}

impl Cfg {
    /// Builds the graph. Edges to unknown labels are dropped; the validator
    /// reports those separately. Duplicate edges (a condbr with both arms to
    /// one block) appear twice in `succs` and `preds`.
    pub fn new(f: &Function) -> Cfg {
        let labels: Vec<String> = f.blocks.iter().map(|b| b.label.clone()).collect();
        let mut index = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            index.entry(l.clone()).or_insert(i);
        }
        let n = labels.len();
        let mut succs = vec![Vec::new(); n];
        let mut preds = vec![Vec::new(); n];
        for (i, b) in f.blocks.iter().enumerate() {
            for s in b.term.successors() {
                if let Some(&j) = index.get(s) {
                    succs[i].push(j);
                    preds[j].push(i);
                }
            }
        }
        let rpo = if n == 0 { Vec::new() } else { reverse_postorder(0, &succs) };
        let mut reachable = vec![false; n];
        for &b in &rpo {
            reachable[b] = true;
        }
        Cfg { labels, index, succs, preds, rpo, reachable }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn idx(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Distinct predecessors, in first-seen order.
    pub fn unique_preds(&self, b: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &p in &self.preds[b] {
            if !out.contains(&p) {
                out.push(p);
            }
        }
        out
    }

    pub fn unique_succs(&self, b: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &s in &self.succs[b] {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    /// Blocks ending in `ret`.
    pub fn exits(&self, f: &Function) -> Vec<usize> {
        f.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| matches!(b.term, Terminator::Ret(_)))
            .map(|(i, _)| i)
            .collect()
    }
}

fn reverse_postorder(entry: usize, succs: &[Vec<usize>]) -> Vec<usize> {
    let n = succs.len();
    let mut seen = vec![false; n];
    let mut post = Vec::with_capacity(n);
    let mut stack: Vec<(usize, usize)> = vec![(entry, 0)];
    seen[entry] = true;
    while let Some((b, i)) = stack.pop() {
        if i < succs[b].len() {
            stack.push((b, i + 1));
            let s = succs[b][i];
            if !seen[s] {
                seen[s] = true;
                stack.push((s, 0));
            }
        } else {
            post.push(b);
        }
    }
    post.reverse();
    post
}

/// Cooper, Harvey and Kennedy's iterative algorithm on an arbitrary graph.
/// Returns `idom[b]` for every node reachable from `entry`; the entry maps to
/// itself and unreachable nodes to `None`.
fn immediate_dominators(entry: usize, succs: &[Vec<usize>], preds: &[Vec<usize>]) -> Vec<Option<usize>> {
    let n = succs.len();
    let rpo = reverse_postorder(entry, succs);
    let mut order = vec![usize::MAX; n];
    for (i, &b) in rpo.iter().enumerate() {
        order[b] = i;
    }
    let mut idom: Vec<Option<usize>> = vec![None; n];
    idom[entry] = Some(entry);
    let intersect = |idom: &[Option<usize>], mut a: usize, mut b: usize| {
        while a != b {
            while order[a] > order[b] {
                a = idom[a].expect("processed");
            }
            while order[b] > order[a] {
                b = idom[b].expect("processed");
            }
        }
        a
    };
    let mut changed = true;
    while changed {
        changed = false;
        for &b in rpo.iter().skip(1) {
            let mut new_idom: Option<usize> = None;
            for &p in &preds[b] {
                if idom[p].is_none() {
                    continue;
                }
                new_idom = Some(match new_idom {
                    None => p,
                    Some(cur) => intersect(&idom, p, cur),
                });
            }
            if new_idom.is_some() && idom[b] != new_idom {
                idom[b] = new_idom;
                changed = true;
            }
        }
    }
    idom
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomTree {
    /// Immediate dominator of each block; `None` for the entry and for
    /// unreachable blocks.
    pub idom: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    pub reachable: Vec<bool>,
}

impl DomTree {
    pub fn new(cfg: &Cfg) -> DomTree {
        let n = cfg.len();
        if n == 0 {
            return DomTree { idom: vec![], children: vec![], reachable: vec![] };
        }
        let raw = immediate_dominators(0, &cfg.succs, &cfg.preds);
        let mut idom = vec![None; n];
        let mut children = vec![Vec::new(); n];
        for b in 0..n {
            if b != 0 {
                if let Some(d) = raw[b] {
                    idom[b] = Some(d);
                    children[d].push(b);
                }
            }
        }
        let reachable = raw.iter().map(|d| d.is_some()).collect();
        DomTree { idom, children, reachable }
    }

    /// Builds the tree, refusing functions with unreachable blocks.
    pub fn of(f: &Function) -> Result<DomTree, Diagnostic> {
        let cfg = Cfg::new(f);
        let dt = DomTree::new(&cfg);
        if let Some(b) = dt.reachable.iter().position(|r| !r) {
            return Err(Diagnostic::new(
                format!("{}:{}", f.name, cfg.labels[b]),
                "unreachable block",
                "block is not reachable from the entry",
            ));
        }
        Ok(dt)
    }

    /// True when `a` dominates `b` (reflexive).
    pub fn dominates(&self, a: usize, b: usize) -> bool {
        if !self.reachable[b] {
            return false;
        }
        let mut cur = b;
        loop {
            if cur == a {
                return true;
            }
            match self.idom[cur] {
                Some(d) => cur = d,
                None => return false,
            }
        }
    }

    /// Depth-first preorder starting at the entry, children in block order.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if self.idom.is_empty() {
            return out;
        }
        let mut stack = vec![0usize];
        while let Some(b) = stack.pop() {
            out.push(b);
            for &c in self.children[b].iter().rev() {
                stack.push(c);
            }
        }
        out
    }

    pub fn depth(&self, b: usize) -> usize {
        let mut d = 0;
        let mut cur = b;
        while let Some(p) = self.idom[cur] {
            cur = p;
            d += 1;
        }
        d
    }
}

/// Post-dominator tree over the CFG augmented with a virtual exit that every
/// `ret` block flows into. `None` as an immediate post-dominator means the
/// virtual exit.
#[derive(Debug, Clone)]
pub struct PostDomTree {
    pub ipdom: Vec<Option<usize>>,
}

impl PostDomTree {
    pub fn new(f: &Function, cfg: &Cfg) -> PostDomTree {
        let n = cfg.len();
        let exit = n;
        // Reverse graph: edges point from a block to its predecessors.
        let mut rsuccs = vec![Vec::new(); n + 1];
        let mut rpreds = vec![Vec::new(); n + 1];
        for b in 0..n {
            for &s in &cfg.succs[b] {
                rsuccs[s].push(b);
                rpreds[b].push(s);
            }
        }
        for r in cfg.exits(f) {
            rsuccs[exit].push(r);
            rpreds[r].push(exit);
        }
        // Blocks that cannot reach a ret (infinite loops) hang off the exit too.
        let reach = reverse_postorder(exit, &rsuccs);
        let mut seen = vec![false; n + 1];
        for &b in &reach {
            seen[b] = true;
        }
        for b in 0..n {
            if !seen[b] && cfg.reachable[b] {
                rsuccs[exit].push(b);
                rpreds[b].push(exit);
            }
        }
        let raw = immediate_dominators(exit, &rsuccs, &rpreds);
        let ipdom = (0..n).map(|b| raw[b].filter(|&d| d != exit)).collect();
        PostDomTree { ipdom }
    }

    /// True when `a` post-dominates `b` (reflexive).
    pub fn post_dominates(&self, a: usize, b: usize) -> bool {
        let mut cur = b;
        loop {
            if cur == a {
                return true;
            }
            match self.ipdom[cur] {
                Some(d) => cur = d,
                None => return false,
            }
        }
    }
}

/// Blocks control dependent on the branch ending in block `e`: everything
/// reachable from `e`'s successors without passing through `e`'s immediate
/// post-dominator. Sorted by block index.
pub fn control_region(cfg: &Cfg, pdt: &PostDomTree, e: usize) -> Vec<usize> {
    let stop = pdt.ipdom[e];
    let mut seen = vec![false; cfg.len()];
    let mut stack: Vec<usize> = Vec::new();
    for &s in &cfg.succs[e] {
        if Some(s) != stop && !seen[s] {
            seen[s] = true;
            stack.push(s);
        }
    }
    while let Some(b) = stack.pop() {
        for &s in &cfg.succs[b] {
            if Some(s) != stop && !seen[s] {
                seen[s] = true;
                stack.push(s);
            }
        }
    }
    (0..cfg.len()).filter(|&b| seen[b]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn func(src: &str) -> Function {
        parse_module(src).unwrap().functions.remove(0)
    }

    #[test]
    fn single_block_is_root_only() {
        let f = func("fn main() -> i32 { b0: ret 0 }");
        let dt = DomTree::of(&f).unwrap();
        assert_eq!(dt.idom, vec![None]);
    }

    #[test]
    fn diamond_idoms() {
        let f = func(
            "fn main(c: i1) -> void { e: condbr %c, t, f  t: br x  f: br x  x: ret }",
        );
        let dt = DomTree::of(&f).unwrap();
        assert_eq!(dt.idom, vec![None, Some(0), Some(0), Some(0)]);
        let cfg = Cfg::new(&f);
        let pdt = PostDomTree::new(&f, &cfg);
        assert_eq!(pdt.ipdom, vec![Some(3), Some(3), Some(3), None]);
        assert_eq!(control_region(&cfg, &pdt, 0), vec![1, 2]);
    }

    #[test]
    fn unreachable_block_is_diagnosed() {
        let f = func("fn main() -> void { a: ret  b: ret }");
        let d = DomTree::of(&f).unwrap_err();
        assert_eq!(d.invariant, "unreachable block");
    }

    #[test]
    fn loop_region_includes_header_again() {
        let f = func(
            "fn main(c: i1) -> void { e: br h  h: condbr %c, body, x  body: br h  x: ret }",
        );
        let cfg = Cfg::new(&f);
        let pdt = PostDomTree::new(&f, &cfg);
        assert_eq!(pdt.ipdom[1], Some(3));
        assert_eq!(control_region(&cfg, &pdt, 1), vec![1, 2]);
    }
}
