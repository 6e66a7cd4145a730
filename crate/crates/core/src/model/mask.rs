use super::AttentionKind;

/// Row-major `n × n` allow matrix; `allowed(i, j)` means position `i` may
/// attend to position `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub n: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }

    pub fn count(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    pub fn is_full(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }
}

pub fn build_mask(n: usize, attention: AttentionKind) -> AttentionMask {
    let allow = match attention {
        AttentionKind::Full => vec![true; n * n],
        AttentionKind::SlidingWindowGlobal { window, global } => (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                i.abs_diff(j) <= window || i < global || j < global
            })
            .collect(),
    };
    AttentionMask { n, allow }
}
