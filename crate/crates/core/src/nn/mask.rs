//! Frame-structured attention masks.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Bidirectional,
    /// Bidirectional inside a frame, causal across frames.
    FrameCausal,
    /// Attention only inside the same frame.
    FrameDiagonal,
    /// Interleaved `[clean_1, noisy_1, clean_2, noisy_2, ...]` layout:
    /// clean_i sees clean_{<=i}; noisy_i sees clean_{<i} and itself.
    TeacherForcingInterleaved,
}

impl MaskKind {
    /// Whether a query in slot `qs` may read a key in slot `ks`.
    ///
    /// Slots are frame positions in the sequence; for the interleaved
    /// layout slot `2j` is clean frame `j` and slot `2j + 1` is noisy frame `j`.
    pub fn allows(self, qs: usize, ks: usize) -> bool {
        match self {
            MaskKind::Bidirectional => true,
            MaskKind::FrameCausal => ks <= qs,
            MaskKind::FrameDiagonal => ks == qs,
            MaskKind::TeacherForcingInterleaved => {
                let (qf, q_noisy) = (qs / 2, qs % 2 == 1);
                let (kf, k_noisy) = (ks / 2, ks % 2 == 1);
                if q_noisy {
                    (!k_noisy && kf < qf) || (k_noisy && kf == qf)
                } else {
                    !k_noisy && kf <= qf
                }
            }
        }
    }
}

/// Allowed keys for a run of consecutive queries that share the same key set.
#[derive(Debug, Clone)]
pub(crate) struct KeyGroup {
    pub q_start: usize,
    pub q_end: usize,
    pub keys: Vec<usize>,
    /// Start index when `keys` is one contiguous run.
    pub contiguous: Option<usize>,
}

/// Boolean `q_len x k_len` matrix, `true` where attention is allowed.
#[derive(Debug, Clone)]
pub struct Mask {
    q_len: usize,
    k_len: usize,
    allowed: Arc<Vec<bool>>,
    groups: Arc<Vec<KeyGroup>>,
}

impl PartialEq for Mask {
    fn eq(&self, other: &Self) -> bool {
        self.q_len == other.q_len && self.k_len == other.k_len && self.allowed == other.allowed
    }
}

impl Mask {
    pub fn from_fn(q_len: usize, k_len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(q_len * k_len);
        for q in 0..q_len {
            for k in 0..k_len {
                allowed.push(f(q, k));
            }
        }
        Self::from_allowed(q_len, k_len, allowed)
    }

    pub fn from_allowed(q_len: usize, k_len: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), q_len * k_len, "mask size");
        let mut groups: Vec<KeyGroup> = Vec::new();
        for q in 0..q_len {
            let row = &allowed[q * k_len..(q + 1) * k_len];
            let keys: Vec<usize> = (0..k_len).filter(|&k| row[k]).collect();
            if let Some(last) = groups.last_mut() {
                if last.keys == keys {
                    last.q_end = q + 1;
                    continue;
                }
            }
            let contiguous = match (keys.first(), keys.last()) {
                (Some(&a), Some(&b)) if b - a + 1 == keys.len() => Some(a),
                _ => None,
            };
            groups.push(KeyGroup {
                q_start: q,
                q_end: q + 1,
                keys,
                contiguous,
            });
        }
        Mask {
            q_len,
            k_len,
            allowed: Arc::new(allowed),
            groups: Arc::new(groups),
        }
    }

    pub fn all(q_len: usize, k_len: usize) -> Self {
        Self::from_allowed(q_len, k_len, vec![true; q_len * k_len])
    }

    pub fn q_len(&self) -> usize {
        self.q_len
    }

    pub fn k_len(&self) -> usize {
        self.k_len
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.k_len + k]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub(crate) fn groups(&self) -> &[KeyGroup] {
        &self.groups
    }

    /// Sub-mask made of query rows `[start, start + len)`.
    pub fn rows(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.q_len, "mask rows out of range");
        Self::from_allowed(
            len,
            self.k_len,
            self.allowed[start * self.k_len..(start + len) * self.k_len].to_vec(),
        )
    }

    /// Whether every allowed pair of `self` is allowed in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.q_len == other.q_len
            && self.k_len == other.k_len
            && self.allowed.iter().zip(other.allowed.iter()).all(|(&a, &b)| !a || b)
    }
}

/// Token-level mask for `num_frames` frames of `tokens_per_frame` tokens.
///
/// The interleaved teacher-forcing kind covers `2 * num_frames` slots.
///
/// Results are memoized; repeated calls share storage.
pub fn build_mask(num_frames: usize, tokens_per_frame: usize, kind: MaskKind) -> Mask {
    const CACHE_CAP: usize = 256;
    type Cache = Mutex<HashMap<(usize, usize, MaskKind), Mask>>;
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let key = (num_frames, tokens_per_frame, kind);
    let cache = CACHE.get_or_init(Default::default);
    if let Some(m) = cache.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
        return m.clone();
    }
    let m = compute_mask(num_frames, tokens_per_frame, kind);
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    if guard.len() >= CACHE_CAP {
        guard.clear();
    }
    guard.insert(key, m.clone());
    m
}

fn compute_mask(num_frames: usize, tokens_per_frame: usize, kind: MaskKind) -> Mask {
    let slots = match kind {
        MaskKind::TeacherForcingInterleaved => 2 * num_frames,
        _ => num_frames,
    };
    let len = slots * tokens_per_frame;
    Mask::from_fn(len, len, |q, k| kind.allows(q / tokens_per_frame, k / tokens_per_frame))
}

/// Mask for the newest frame of a cached sequence: the last `tokens_per_frame`
/// query rows of a `frames`-frame mask of the given kind.
pub fn last_frame_mask(frames: usize, tokens_per_frame: usize, kind: MaskKind) -> Mask {
    let full = build_mask(frames, tokens_per_frame, kind);
    full.rows((frames - 1) * tokens_per_frame, tokens_per_frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    const KINDS: [MaskKind; 4] = [
        MaskKind::Bidirectional,
        MaskKind::FrameCausal,
        MaskKind::FrameDiagonal,
        MaskKind::TeacherForcingInterleaved,
    ];

    #[test]
    fn single_frame_is_dense_for_plain_kinds() {
        for kind in [MaskKind::Bidirectional, MaskKind::FrameCausal, MaskKind::FrameDiagonal] {
            let m = build_mask(1, 3, kind);
            assert!(m.as_slice().iter().all(|&b| b), "{kind:?}");
        }
    }

    #[test]
    fn frame_diagonal_two_by_two() {
        let m = build_mask(2, 2, MaskKind::FrameDiagonal);
        let expect = [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]];
        for (q, row) in expect.iter().enumerate() {
            for (k, &e) in row.iter().enumerate() {
                assert_eq!(m.allowed(q, k), e == 1);
            }
        }
    }

    #[test]
    fn frame_causal_one_token() {
        let m = build_mask(2, 1, MaskKind::FrameCausal);
        assert_eq!(m.as_slice(), &[true, false, true, true]);
    }

    #[test]
    fn nesting_by_enumeration() {
        for n in 1..=4 {
            for tpf in 1..=4 {
                let diag = build_mask(n, tpf, MaskKind::FrameDiagonal);
                let causal = build_mask(n, tpf, MaskKind::FrameCausal);
                let bi = build_mask(n, tpf, MaskKind::Bidirectional);
                assert!(diag.is_subset_of(&causal));
                assert!(causal.is_subset_of(&bi));
            }
        }
    }

    #[test]
    fn teacher_forcing_layout() {
        // 2 frames, 1 token: slots c1, n1, c2, n2
        let m = build_mask(2, 1, MaskKind::TeacherForcingInterleaved);
        let expect = [
            [1, 0, 0, 0], // c1 -> c1
            [0, 1, 0, 0], // n1 -> n1
            [1, 0, 1, 0], // c2 -> c1, c2
            [1, 0, 0, 1], // n2 -> c1, n2
        ];
        for (q, row) in expect.iter().enumerate() {
            for (k, &e) in row.iter().enumerate() {
                assert_eq!(m.allowed(q, k), e == 1, "({q},{k})");
            }
        }
    }

    #[test]
    fn every_row_has_a_key() {
        for kind in KINDS {
            let m = build_mask(3, 2, kind);
            assert!(m.groups().iter().all(|g| !g.keys.is_empty()));
            let covered: usize = m.groups().iter().map(|g| g.q_end - g.q_start).sum();
            assert_eq!(covered, m.q_len());
        }
    }

    #[test]
    fn groups_merge_rows_of_same_frame() {
        let m = build_mask(3, 4, MaskKind::FrameCausal);
        assert_eq!(m.groups().len(), 3);
        assert_eq!(m.groups()[2].contiguous, Some(0));
        assert_eq!(m.groups()[2].keys.len(), 12);
    }
}
