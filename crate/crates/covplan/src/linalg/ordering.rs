//! Symmetric approximate minimum-degree ordering.
//!
//! Greedy elimination on a quotient graph: eliminating a variable turns its
//! neighborhood into an element (clique placeholder); adjacent elements are
//! absorbed so adjacency lists stay compact. Degrees are the usual AMD-style
//! upper bounds (element sizes summed without deduplication), which keeps the
//! update cost proportional to the lists touched.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::sparse::SparseSym;


/// Returns `perm` with `perm[k] = original index eliminated at step k`.
pub fn min_degree_ordering(pattern: &SparseSym) -> Vec<usize> {
    let n = pattern.dim();
    if n == 0 {
        return Vec::new();
    }

    // Variable-variable adjacency from the matrix pattern (no diagonal).
    let mut adj_vars: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..n {
        for (i, _) in pattern.col(j) {
            if i != j {
                adj_vars[j].push(i);
            }
        }
    }
    for list in &mut adj_vars {
        list.sort_unstable();
        list.dedup();
    }

    let mut adj_elems: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut elem_vars: Vec<Vec<usize>> = Vec::new();
    let mut elem_alive: Vec<bool> = Vec::new();
    let mut var_alive = vec![true; n];
    let mut degree: Vec<usize> = adj_vars.iter().map(|l| l.len()).collect();

    // stamp[v] == stamp_mark marks membership of v in the current front.
    let mut stamp = vec![0u64; n];
    let mut stamp_mark = 0u64;

    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = BinaryHeap::with_capacity(n * 2);
    for v in 0..n {
        heap.push(Reverse((degree[v], v)));
    }

    let mut perm = Vec::with_capacity(n);
    while perm.len() < n {
        let Reverse((d, v)) = heap.pop().expect("heap exhausted before ordering finished");
        if !var_alive[v] || d != degree[v] {
            continue; // stale entry
        }
        perm.push(v);
        var_alive[v] = false;

        // Gather the front Le: live variable neighbors plus members of
        // adjacent elements.
        stamp_mark += 1;
        stamp[v] = stamp_mark;
        let mut front: Vec<usize> = Vec::new();
        for &u in &adj_vars[v] {
            if var_alive[u] && stamp[u] != stamp_mark {
                stamp[u] = stamp_mark;
                front.push(u);
            }
        }
        for &e in &adj_elems[v] {
            if !elem_alive[e] {
                continue;
            }
            for &u in &elem_vars[e] {
                if var_alive[u] && stamp[u] != stamp_mark {
                    stamp[u] = stamp_mark;
                    front.push(u);
                }
            }
            elem_alive[e] = false; // absorbed into the new element
            elem_vars[e] = Vec::new();
        }
        front.sort_unstable();

        let elem_id = elem_vars.len();
        elem_vars.push(front.clone());
        elem_alive.push(true);

        for &u in &front {
            // Drop edges covered by the new element and dead neighbors.
            adj_vars[u].retain(|&w| var_alive[w] && stamp[w] != stamp_mark);
            adj_elems[u].retain(|&e| elem_alive[e]);
            adj_elems[u].push(elem_id);

            let mut deg = adj_vars[u].len();
            for &e in &adj_elems[u] {
                deg += elem_vars[e].len() - 1;
            }
            degree[u] = deg;
            heap.push(Reverse((deg, u)));
        }
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sparse::TripletBuilder;

    fn band_matrix(n: usize, band: usize) -> SparseSym {
        let mut b = TripletBuilder::new(n);
        for i in 0..n {
            b.add(i, i, 4.0);
            for k in 1..=band {
                if i + k < n {
                    b.add_sym(i, i + k, -1.0);
                }
            }
        }
        b.build()
    }

    #[test]
    fn ordering_is_a_permutation() {
        let m = band_matrix(50, 3);
        let mut perm = min_degree_ordering(&m);
        perm.sort_unstable();
        assert_eq!(perm, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn arrow_matrix_defers_the_hub() {
        // Dense first row/column: the hub must not be eliminated before the
        // spokes (ties at the very end may order it second to last).
        let n = 20;
        let mut b = TripletBuilder::new(n);
        for i in 0..n {
            b.add(i, i, 4.0);
        }
        for i in 1..n {
            b.add_sym(0, i, -1.0);
        }
        let perm = min_degree_ordering(&b.build());
        let hub_pos = perm.iter().position(|&v| v == 0).unwrap();
        assert!(hub_pos >= n - 2, "hub eliminated too early: {hub_pos}");
    }
}
