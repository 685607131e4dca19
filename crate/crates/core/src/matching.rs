//! One-to-one assignment between predictions and gold items.
//!
//! Candidate pairs are accepted greedily in caller-supplied preference order,
//! then augmenting paths are applied until the matching has maximum
//! cardinality. Augmentation never unmatches a vertex, so every greedy pick
//! stays matched (possibly to a different partner).

/// `edges` are `(left, right)` pairs, already sorted by preference.
/// Returns `match_of_left`, where `Some(r)` means `left` is matched to `r`.
pub(crate) fn assign(n_left: usize, n_right: usize, edges: &[(usize, usize)]) -> Vec<Option<usize>> {
    let mut left_to_right: Vec<Option<usize>> = vec![None; n_left];
    let mut right_to_left: Vec<Option<usize>> = vec![None; n_right];
    for &(l, r) in edges {
        if left_to_right[l].is_none() && right_to_left[r].is_none() {
            left_to_right[l] = Some(r);
            right_to_left[r] = Some(l);
        }
    }

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_left];
    for &(l, r) in edges {
        adj[l].push(r);
    }

    fn augment(
        l: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        left_to_right: &mut [Option<usize>],
        right_to_left: &mut [Option<usize>],
    ) -> bool {
        for &r in &adj[l] {
            if seen[r] {
                continue;
            }
            seen[r] = true;
            let free = match right_to_left[r] {
                None => true,
                Some(other) => augment(other, adj, seen, left_to_right, right_to_left),
            };
            if free {
                left_to_right[l] = Some(r);
                right_to_left[r] = Some(l);
                return true;
            }
        }
        false
    }

    let mut seen = vec![false; n_right];
    for l in 0..n_left {
        if left_to_right[l].is_some() || adj[l].is_empty() {
            continue;
        }
        seen.iter_mut().for_each(|s| *s = false);
        augment(l, &adj, &mut seen, &mut left_to_right, &mut right_to_left);
    }
    left_to_right
}

#[cfg(test)]
mod tests {
    use super::assign;

    fn size(m: &[Option<usize>]) -> usize {
        m.iter().flatten().count()
    }

    #[test]
    fn greedy_trap_is_escaped() {
        // Preferred pair (0,0) blocks the only partner of left 1.
        let m = assign(2, 2, &[(0, 0), (0, 1), (1, 0)]);
        assert_eq!(size(&m), 2);
        assert_eq!(m, vec![Some(1), Some(0)]);
    }

    #[test]
    fn greedy_order_kept_when_maximal() {
        let m = assign(2, 2, &[(1, 1), (0, 0), (0, 1)]);
        assert_eq!(m, vec![Some(0), Some(1)]);
    }

    #[test]
    fn empty() {
        assert!(assign(0, 3, &[]).is_empty());
        assert_eq!(assign(2, 0, &[]), vec![None, None]);
    }
}
