// SPDX-License-Identifier: Apache-2.0
//! Transitive closure and transitive reduction of small DAGs.
//!
//! Reachability is kept as one bit row per node, so both operations are
//! `O(n · (n + m) / 64)` words. Floorplans have tens of dies, which keeps
//! every row within a couple of machine words.

use std::collections::VecDeque;

use super::RtcgError;

/// Dense reachability matrix, one bit row per node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reachability {
    n: usize,
    words: usize,
    bits: Vec<u64>,
}

impl Reachability {
    fn new(n: usize) -> Self {
        let words = n.div_ceil(64).max(1);
        Self {
            n,
            words,
            bits: vec![0; n * words],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[u * self.words + v / 64] >> (v % 64) & 1 == 1
    }

    fn set(&mut self, u: usize, v: usize) {
        self.bits[u * self.words + v / 64] |= 1 << (v % 64);
    }

    fn or_row_into(&mut self, src: usize, dst: usize) {
        for w in 0..self.words {
            let s = self.bits[src * self.words + w];
            self.bits[dst * self.words + w] |= s;
        }
    }

    /// All pairs `(u, v)` with `v` reachable from `u`, sorted.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for u in 0..self.n {
            for v in 0..self.n {
                if self.get(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }
}

fn check_edges(n: usize, edges: &[(usize, usize)]) -> Result<(), RtcgError> {
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(RtcgError::NodeOutOfRange { node: u.max(v), n });
        }
        if u == v {
            return Err(RtcgError::Cycle(vec![u]));
        }
    }
    Ok(())
}

/// Kahn topological order; on failure, returns one directed cycle.
pub fn topological_order(n: usize, edges: &[(usize, usize)]) -> Result<Vec<usize>, RtcgError> {
    check_edges(n, edges)?;
    let mut succ = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for &(u, v) in edges {
        succ[u].push(v);
    }
    for s in &mut succ {
        s.sort_unstable();
        s.dedup();
    }
    for s in &succ {
        for &v in s {
            indeg[v] += 1;
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &v in &succ[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                queue.push_back(v);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    Err(RtcgError::Cycle(find_cycle(&succ, &indeg)))
}

// Every node left with positive in-degree has a predecessor that is also
// left, so walking backwards among them must revisit a node.
fn find_cycle(succ: &[Vec<usize>], indeg: &[usize]) -> Vec<usize> {
    let n = succ.len();
    let mut pred = vec![usize::MAX; n];
    for u in 0..n {
        if indeg[u] == 0 {
            continue;
        }
        for &v in &succ[u] {
            if indeg[v] > 0 && pred[v] == usize::MAX {
                pred[v] = u;
            }
        }
    }
    let start = (0..n).find(|&v| indeg[v] > 0).expect("cycle exists");
    let mut seen = vec![false; n];
    let mut cur = start;
    while !seen[cur] {
        seen[cur] = true;
        cur = pred[cur];
    }
    let mut cycle = vec![cur];
    let mut x = pred[cur];
    while x != cur {
        cycle.push(x);
        x = pred[x];
    }
    cycle.reverse();
    cycle
}

/// Reachability of the DAG given by `edges` over nodes `0..n`.
pub fn reachability(n: usize, edges: &[(usize, usize)]) -> Result<Reachability, RtcgError> {
    let order = topological_order(n, edges)?;
    let mut succ = vec![Vec::new(); n];
    for &(u, v) in edges {
        succ[u].push(v);
    }
    let mut reach = Reachability::new(n);
    for &u in order.iter().rev() {
        for i in 0..succ[u].len() {
            let v = succ[u][i];
            reach.set(u, v);
            reach.or_row_into(v, u);
        }
    }
    Ok(reach)
}

/// Every pair `(u, v)` with a directed path `u → … → v`, sorted.
pub fn transitive_closure(n: usize, edges: &[(usize, usize)]) -> Result<Vec<(usize, usize)>, RtcgError> {
    Ok(reachability(n, edges)?.pairs())
}

/// The unique minimal edge set with the same reachability as `edges`.
///
/// An edge `(u, v)` of the closure survives iff no intermediate `w` has
/// `u ⇝ w ⇝ v`.
pub fn transitive_reduction(n: usize, edges: &[(usize, usize)]) -> Result<Vec<(usize, usize)>, RtcgError> {
    let reach = reachability(n, edges)?;
    let mut out = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if !reach.get(u, v) {
                continue;
            }
            let redundant = (0..n).any(|w| w != u && w != v && reach.get(u, w) && reach.get(w, v));
            if !redundant {
                out.push((u, v));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Reachability by plain DFS from every node: the oracle for the bitset path.
    fn dfs_closure(n: usize, edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for s in 0..n {
            let mut seen = vec![false; n];
            let mut stack = vec![s];
            while let Some(u) = stack.pop() {
                for &(a, b) in edges {
                    if a == u && !seen[b] {
                        seen[b] = true;
                        stack.push(b);
                    }
                }
            }
            for v in 0..n {
                if seen[v] {
                    out.push((s, v));
                }
            }
        }
        out
    }

    #[test]
    fn closure_of_chain() {
        assert_eq!(
            transitive_closure(3, &[(0, 1), (1, 2)]).unwrap(),
            vec![(0, 1), (0, 2), (1, 2)]
        );
        assert!(transitive_closure(0, &[]).unwrap().is_empty());
        assert!(transitive_closure(4, &[]).unwrap().is_empty());
    }

    #[test]
    fn closure_is_idempotent() {
        let closed = vec![(0, 1), (0, 2), (1, 2)];
        assert_eq!(transitive_closure(3, &closed).unwrap(), closed);
    }

    #[test]
    fn reduction_of_triangle() {
        assert_eq!(
            transitive_reduction(3, &[(0, 1), (1, 2), (0, 2)]).unwrap(),
            vec![(0, 1), (1, 2)]
        );
        assert_eq!(transitive_reduction(2, &[(0, 1)]).unwrap(), vec![(0, 1)]);
    }

    #[test]
    fn cycles_are_reported() {
        match transitive_closure(4, &[(0, 1), (1, 2), (2, 0), (2, 3)]) {
            Err(RtcgError::Cycle(c)) => {
                let mut c = c;
                c.sort();
                assert_eq!(c, vec![0, 1, 2]);
            }
            other => panic!("expected cycle, got {other:?}"),
        }
        assert!(matches!(transitive_reduction(1, &[(0, 0)]), Err(RtcgError::Cycle(_))));
    }

    // Exhaustive minimality oracle: no proper subset of the reduction
    // with one edge removed preserves reachability.
    fn is_minimal(n: usize, reduced: &[(usize, usize)], closure: &[(usize, usize)]) -> bool {
        (0..reduced.len()).all(|skip| {
            let fewer: Vec<_> = reduced
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != skip)
                .map(|(_, &e)| e)
                .collect();
            dfs_closure(n, &fewer) != closure
        })
    }

    fn arb_dag() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (1usize..9).prop_flat_map(|n| {
            let pairs: Vec<(usize, usize)> =
                (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
            let m = pairs.len();
            (Just(n), Just(pairs), proptest::collection::vec(any::<bool>(), m))
                .prop_map(|(n, pairs, keep)| {
                    let e = pairs
                        .into_iter()
                        .zip(keep)
                        .filter(|(_, k)| *k)
                        .map(|(e, _)| e)
                        .collect();
                    (n, e)
                })
        })
    }

    proptest! {
        #[test]
        fn closure_matches_dfs((n, edges) in arb_dag()) {
            prop_assert_eq!(transitive_closure(n, &edges).unwrap(), dfs_closure(n, &edges));
        }

        #[test]
        fn reduction_preserves_reachability_and_is_minimal((n, edges) in arb_dag()) {
            let closure = dfs_closure(n, &edges);
            let reduced = transitive_reduction(n, &edges).unwrap();
            prop_assert_eq!(dfs_closure(n, &reduced), closure.clone());
            prop_assert!(is_minimal(n, &reduced, &closure));
            prop_assert_eq!(transitive_reduction(n, &closure).unwrap(), reduced);
        }
    }
}
