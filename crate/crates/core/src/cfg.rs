//! Dominators and natural loops over per-function control-flow graphs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::pmir::{BlockId, FnCfg, FuncRef, FunctionDef, ProgramImage};

/// Dominator sets over block indices. Unreachable blocks have no entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomInfo {
    pub entry: usize,
    /// `dom[b]` is `None` for blocks unreachable from the entry.
    pub dom: Vec<Option<BTreeSet<usize>>>,
    pub idom: Vec<Option<usize>>,
    pub unreachable: Vec<usize>,
}

impl DomInfo {
    pub fn dominates(&self, a: usize, b: usize) -> bool {
        self.dom[b].as_ref().is_some_and(|d| d.contains(&a))
    }

    pub fn is_reachable(&self, b: usize) -> bool {
        self.dom[b].is_some()
    }
}

fn reverse_postorder(cfg: &FnCfg) -> Vec<usize> {
    let n = cfg.succs.len();
    let mut seen = vec![false; n];
    let mut post = Vec::with_capacity(n);
    if n == 0 {
        return post;
    }
    let mut stack = vec![(cfg.entry, 0usize)];
    seen[cfg.entry] = true;
    while let Some(&mut (b, ref mut i)) = stack.last_mut() {
        if let Some(&s) = cfg.succs[b].get(*i) {
            *i += 1;
            if !seen[s] {
                seen[s] = true;
                stack.push((s, 0));
            }
        } else {
            post.push(b);
            stack.pop();
        }
    }
    post.reverse();
    post
}

/// Iterates `dom(b) = {b} ∪ ⋂ dom(p)` over reachable predecessors until
/// nothing changes.
pub fn compute_dominators(cfg: &FnCfg) -> DomInfo {
    let n = cfg.succs.len();
    let order = reverse_postorder(cfg);
    let mut reachable = vec![false; n];
    for &b in &order {
        reachable[b] = true;
    }
    let all: BTreeSet<usize> = order.iter().copied().collect();
    let mut dom: Vec<Option<BTreeSet<usize>>> = vec![None; n];
    for &b in &order {
        dom[b] = Some(if b == cfg.entry {
            BTreeSet::from([b])
        } else {
            all.clone()
        });
    }
    let mut changed = true;
    while changed {
        changed = false;
        for &b in order.iter().filter(|&&b| b != cfg.entry) {
            let mut acc: Option<BTreeSet<usize>> = None;
            for &p in cfg.preds[b].iter().filter(|&&p| reachable[p]) {
                let dp = dom[p].as_ref().unwrap();
                acc = Some(match acc {
                    None => dp.clone(),
                    Some(a) => a.intersection(dp).copied().collect(),
                });
            }
            let mut new = acc.unwrap_or_default();
            new.insert(b);
            if dom[b].as_ref() != Some(&new) {
                dom[b] = Some(new);
                changed = true;
            }
        }
    }
    // Strict dominators form a chain; the immediate one has the largest set.
    let idom = (0..n)
        .map(|b| {
            let d = dom[b].as_ref()?;
            d.iter()
                .filter(|&&x| x != b)
                .max_by_key(|&&x| dom[x].as_ref().map_or(0, |s| s.len()))
                .copied()
        })
        .collect();
    DomInfo {
        entry: cfg.entry,
        dom,
        idom,
        unreachable: (0..n).filter(|&b| !reachable[b]).collect(),
    }
}

/// A natural loop; loops sharing a header are merged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Loop {
    pub header: BlockId,
    /// Back edges `(source, header)`.
    pub back_edges: Vec<(BlockId, BlockId)>,
    pub body: BTreeSet<BlockId>,
    /// First instruction of every block outside the body that a body block
    /// branches to.
    pub exit_addresses: BTreeSet<u64>,
    /// First instruction of the header.
    pub entry_address: u64,
    pub top_level: bool,
}

/// Loops of one function, by block index, before they are mapped to ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexLoop {
    pub header: usize,
    pub sources: Vec<usize>,
    pub body: BTreeSet<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionLoops {
    pub loops: Vec<Loop>,
    /// Retreating edges whose target does not dominate their source; these
    /// form irreducible regions and are not reported as loops.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub irreducible_edges: Vec<(BlockId, BlockId)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unreachable_blocks: Vec<BlockId>,
}

/// Natural loops by block index, sorted by header index. Bodies are the
/// header plus every block that reaches a back-edge source without passing
/// through the header.
pub fn natural_loops(cfg: &FnCfg, dom: &DomInfo) -> Vec<IndexLoop> {
    let mut by_header: BTreeMap<usize, IndexLoop> = BTreeMap::new();
    for (n, succs) in cfg.succs.iter().enumerate() {
        if !dom.is_reachable(n) {
            continue;
        }
        for &h in succs {
            if !dom.dominates(h, n) {
                continue;
            }
            let l = by_header.entry(h).or_insert_with(|| IndexLoop {
                header: h,
                sources: Vec::new(),
                body: BTreeSet::from([h]),
            });
            l.sources.push(n);
            let mut work = vec![n];
            while let Some(b) = work.pop() {
                if l.body.insert(b) {
                    work.extend(cfg.preds[b].iter().filter(|&&p| dom.is_reachable(p)));
                }
            }
        }
    }
    by_header.into_values().collect()
}

/// Edges `u → v` that retreat in a depth-first order (v is on the DFS stack)
/// but where `v` does not dominate `u`.
fn irreducible_edges(cfg: &FnCfg, dom: &DomInfo) -> Vec<(usize, usize)> {
    let n = cfg.succs.len();
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut state = vec![0u8; n]; // 0 new, 1 on stack, 2 done
    let mut stack = vec![(cfg.entry, 0usize)];
    state[cfg.entry] = 1;
    while let Some(&mut (b, ref mut i)) = stack.last_mut() {
        if let Some(&s) = cfg.succs[b].get(*i) {
            *i += 1;
            match state[s] {
                0 => {
                    state[s] = 1;
                    stack.push((s, 0));
                }
                1 if !dom.dominates(s, b) => out.push((b, s)),
                _ => {}
            }
        } else {
            state[b] = 2;
            stack.pop();
        }
    }
    out
}

/// Loops of one function with addresses and the top-level flag.
pub fn find_loops(f: &FunctionDef) -> FunctionLoops {
    let cfg = FnCfg::of(f);
    let dom = compute_dominators(&cfg);
    let raw = natural_loops(&cfg, &dom);
    let id = |i: usize| f.blocks[i].id;
    let first_addr = |i: usize| {
        f.blocks[i]
            .instructions
            .first()
            .map_or(f.blocks[i].address, |ins| ins.address)
    };
    // Hardening preheaders are transparent: an exit into one is reported
    // at the block it leads to.
    let through_synthetic = |mut s: usize| {
        for _ in 0..f.blocks.len() {
            match cfg.succs[s].as_slice() {
                [next] if f.blocks[s].synthetic => s = *next,
                _ => break,
            }
        }
        s
    };
    let loops = raw
        .iter()
        .map(|l| {
            let mut exit_addresses = BTreeSet::new();
            for &b in &l.body {
                for &s in &cfg.succs[b] {
                    if !l.body.contains(&s) {
                        exit_addresses.insert(first_addr(through_synthetic(s)));
                    }
                }
            }
            let top_level = !raw
                .iter()
                .any(|o| o.header != l.header && l.body.is_subset(&o.body));
            Loop {
                header: id(l.header),
                back_edges: l.sources.iter().map(|&s| (id(s), id(l.header))).collect(),
                body: l.body.iter().map(|&b| id(b)).collect(),
                exit_addresses,
                entry_address: first_addr(l.header),
                top_level,
            }
        })
        .collect();
    FunctionLoops {
        loops,
        irreducible_edges: irreducible_edges(&cfg, &dom)
            .into_iter()
            .map(|(a, b)| (id(a), id(b)))
            .collect(),
        unreachable_blocks: dom.unreachable.iter().map(|&b| id(b)).collect(),
    }
}

/// Loops of every function of every module in the image.
pub fn all_loops(image: &ProgramImage) -> BTreeMap<FuncRef, FunctionLoops> {
    let mut out = BTreeMap::new();
    for m in image.modules() {
        for f in &m.functions {
            let fl = find_loops(f);
            if !fl.irreducible_edges.is_empty() {
                log::warn!(
                    "{}::{}: irreducible region at edges {:?}, not treated as a loop",
                    m.name,
                    f.name,
                    fl.irreducible_edges
                );
            }
            out.insert(FuncRef::new(&m.name, &f.name), fl);
        }
    }
    out
}

/// Every top-level loop in the image, with its function.
pub fn top_level_loops(
    loops: &BTreeMap<FuncRef, FunctionLoops>,
) -> Vec<(FuncRef, Loop)> {
    loops
        .iter()
        .flat_map(|(f, fl)| {
            fl.loops
                .iter()
                .filter(|l| l.top_level)
                .map(move |l| (f.clone(), l.clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> FnCfg {
        let mut succs = vec![Vec::new(); n];
        let mut preds = vec![Vec::new(); n];
        for &(a, b) in edges {
            if !succs[a].contains(&b) {
                succs[a].push(b);
                preds[b].push(a);
            }
        }
        FnCfg {
            entry: 0,
            succs,
            preds,
        }
    }

    fn set(v: &[usize]) -> Option<BTreeSet<usize>> {
        Some(v.iter().copied().collect())
    }

    #[test]
    fn chain() {
        let d = compute_dominators(&graph(3, &[(0, 1), (1, 2)]));
        assert_eq!(d.dom[2], set(&[0, 1, 2]));
        assert_eq!(d.idom[2], Some(1));
    }

    #[test]
    fn diamond() {
        let d = compute_dominators(&graph(4, &[(0, 1), (0, 2), (1, 3), (2, 3)]));
        assert_eq!(d.dom[3], set(&[0, 3]));
        assert_eq!(d.idom[3], Some(0));
        assert_eq!(d.dom[0], set(&[0]));
    }

    #[test]
    fn unreachable_reported() {
        let d = compute_dominators(&graph(3, &[(0, 1), (2, 1)]));
        assert_eq!(d.unreachable, vec![2]);
        assert_eq!(d.dom[1], set(&[0, 1]));
    }

    #[test]
    fn self_loop() {
        let c = graph(2, &[(0, 1), (1, 1)]);
        let l = natural_loops(&c, &compute_dominators(&c));
        assert_eq!(l.len(), 1);
        assert_eq!(l[0].header, 1);
        assert_eq!(l[0].body, BTreeSet::from([1]));
    }

    #[test]
    fn merged_headers() {
        // 1 -> 2 -> 1 and 1 -> 3 -> 1
        let c = graph(5, &[(0, 1), (1, 2), (1, 3), (2, 1), (3, 1), (1, 4)]);
        let l = natural_loops(&c, &compute_dominators(&c));
        assert_eq!(l.len(), 1);
        assert_eq!(l[0].body, BTreeSet::from([1, 2, 3]));
        assert_eq!(l[0].sources.len(), 2);
    }

    #[test]
    fn irreducible_is_not_a_loop() {
        // 0 -> 1, 0 -> 2, 1 <-> 2
        let c = graph(3, &[(0, 1), (0, 2), (1, 2), (2, 1)]);
        let d = compute_dominators(&c);
        assert!(natural_loops(&c, &d).is_empty());
        assert_eq!(irreducible_edges(&c, &d).len(), 1);
    }

    /// Brute force: `a` dominates `b` iff removing `a` disconnects `b`.
    fn oracle_dom(c: &FnCfg, a: usize, b: usize) -> bool {
        if a == b {
            return true;
        }
        if a == c.entry {
            return true;
        }
        let n = c.succs.len();
        let mut seen = vec![false; n];
        let mut work = vec![c.entry];
        seen[c.entry] = true;
        while let Some(x) = work.pop() {
            if x == b {
                return false;
            }
            for &s in &c.succs[x] {
                if s != a && !seen[s] {
                    seen[s] = true;
                    work.push(s);
                }
            }
        }
        true
    }

    prop_compose! {
        fn arb_cfg()(n in 1usize..=12)
            (edges in prop::collection::vec((0..n, 0..n), 0..=n * 2), n in Just(n))
            -> FnCfg {
            graph(n, &edges)
        }
    }

    proptest! {
        #[test]
        fn dominators_match_removal_oracle(c in arb_cfg()) {
            let d = compute_dominators(&c);
            let n = c.succs.len();
            let reach = reverse_postorder(&c);
            for b in 0..n {
                prop_assert_eq!(d.is_reachable(b), reach.contains(&b));
                if !d.is_reachable(b) { continue; }
                for a in 0..n {
                    if !d.is_reachable(a) { continue; }
                    prop_assert_eq!(d.dominates(a, b), oracle_dom(&c, a, b), "a={} b={}", a, b);
                }
            }
        }

        #[test]
        fn dominator_equation_is_a_fixpoint(c in arb_cfg()) {
            let d = compute_dominators(&c);
            for b in 0..c.succs.len() {
                let Some(db) = &d.dom[b] else { continue };
                if b == c.entry {
                    prop_assert_eq!(db, &BTreeSet::from([b]));
                    continue;
                }
                let mut acc: Option<BTreeSet<usize>> = None;
                for &p in &c.preds[b] {
                    if let Some(dp) = &d.dom[p] {
                        acc = Some(match acc {
                            None => dp.clone(),
                            Some(a) => a.intersection(dp).copied().collect(),
                        });
                    }
                }
                let mut expect = acc.unwrap_or_default();
                expect.insert(b);
                prop_assert_eq!(db, &expect);
            }
        }

        #[test]
        fn loop_bodies_are_dominated_by_header(c in arb_cfg()) {
            let d = compute_dominators(&c);
            for l in natural_loops(&c, &d) {
                for &b in &l.body {
                    prop_assert!(d.dominates(l.header, b));
                }
            }
        }
    }
}
