//! Attention mask for inter-instance self-attention.
//!
//! Query layout is `[group 0 | group 1 | ... | group g-1 | matching]`, each
//! group `2n` wide. Denoising groups cannot see each other, and matching
//! queries cannot see any denoising query. Matching columns are visible to
//! everyone.

/// Square boolean mask; `blocked(i, j)` means query `i` may not attend to `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    /// A mask that blocks nothing.
    pub fn open(size: usize) -> Self {
        Self {
            size,
            blocked: vec![false; size * size],
        }
    }

    /// Builds a mask from an arbitrary predicate. The diagonal is always open.
    pub fn from_fn(size: usize, mut blocked: impl FnMut(usize, usize) -> bool) -> Self {
        let mut out = Self::open(size);
        for i in 0..size {
            for j in 0..size {
                out.blocked[i * size + j] = i != j && blocked(i, j);
            }
        }
        out
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.size + j]
    }

    /// Column indices row `i` may attend to, in increasing order.
    pub fn visible(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.blocked[i * self.size..(i + 1) * self.size];
        row.iter().enumerate().filter(|(_, b)| !**b).map(|(j, _)| j)
    }
}

/// Mask for `g` denoising groups of `2n` queries followed by `k` matching queries.
pub fn build_mask(g: usize, n: usize, k: usize) -> AttentionMask {
    let width = 2 * n;
    let dn = g * width;
    AttentionMask::from_fn(dn + k, |i, j| j < dn && (i >= dn || i / width != j / width))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct transcription of the two blocking clauses.
    fn brute(g: usize, n: usize, i: usize, j: usize) -> bool {
        let dn = g * 2 * n;
        let clause1 = j < dn && (i / (2 * n)) != (j / (2 * n));
        let clause2 = j < dn && i >= dn;
        clause1 || clause2
    }

    #[test]
    fn small_example() {
        let m = build_mask(2, 1, 2);
        assert_eq!(m.size(), 6);
        for i in 4..6 {
            for j in 0..4 {
                assert!(m.blocked(i, j));
            }
            for j in 4..6 {
                assert!(!m.blocked(i, j));
            }
        }
        // group 0 = rows 0..2, group 1 = rows 2..4
        assert!(!m.blocked(0, 1));
        assert!(m.blocked(0, 2));
        assert!(m.blocked(3, 1));
        assert!(!m.blocked(0, 5));
    }

    #[test]
    fn matches_predicate_exhaustively() {
        for g in 1..=5 {
            for n in 1..=4 {
                for k in 0..=6 {
                    let m = build_mask(g, n, k);
                    assert_eq!(m.size(), g * 2 * n + k);
                    for i in 0..m.size() {
                        assert!(!m.blocked(i, i));
                        for j in 0..m.size() {
                            assert_eq!(m.blocked(i, j), brute(g, n, i, j), "g={g} n={n} k={k} i={i} j={j}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn isolation_properties() {
        let (g, n, k) = (4, 3, 5);
        let m = build_mask(g, n, k);
        let dn = g * 2 * n;
        for i in 0..m.size() {
            for j in 0..m.size() {
                if i >= dn && j < dn {
                    assert!(m.blocked(i, j), "matching row {i} sees dn column {j}");
                }
                if i < dn && j < dn {
                    assert_eq!(m.blocked(i, j), i / (2 * n) != j / (2 * n));
                }
                if j >= dn {
                    assert!(!m.blocked(i, j));
                }
            }
        }
        let visible: Vec<usize> = m.visible(dn).collect();
        assert_eq!(visible, (dn..dn + k).collect::<Vec<_>>());
    }
}
