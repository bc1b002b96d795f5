//! Descriptor database, candidate retrieval and loop detection.
//!
//! Detection for a query runs in four steps: row-sum key lookup in the
//! KD-tree (or a scan over every eligible frame), shift estimation per
//! candidate, a single similarity evaluation at that shift, and a max over
//! candidates. Frames closer than the exclusion window to the query are never
//! candidates.

pub mod kdtree;
pub mod similarity;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::descriptor::{AlignKey, Descriptor, SearchKey};
use crate::error::{NddError, Result};
use crate::pointcloud::write_atomic;
use crate::FrameId;

pub use kdtree::KdTree;
pub use similarity::{
    best_shift, binary_xnor_alignment, correlation, correlation_at_shift, full_shift_alignment,
    sc_cosine, sc_cosine_at_shift,
};

/// How the circular shift between query and candidate is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AlignmentStrategy {
    /// Cosine search over column-sum vectors.
    RowVector,
    /// Similarity of full matrices at every shift.
    FullShift,
    /// XNOR agreement of binarized matrices at every shift.
    BinaryXnor,
}

impl AlignmentStrategy {
    pub const ALL: [AlignmentStrategy; 3] = [
        AlignmentStrategy::RowVector,
        AlignmentStrategy::BinaryXnor,
        AlignmentStrategy::FullShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlignmentStrategy::RowVector => "row_vector",
            AlignmentStrategy::FullShift => "full_shift",
            AlignmentStrategy::BinaryXnor => "binary_xnor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RetrievalStrategy {
    KeyKdTree,
    FullLinearScan,
}

impl RetrievalStrategy {
    pub const ALL: [RetrievalStrategy; 2] = [
        RetrievalStrategy::KeyKdTree,
        RetrievalStrategy::FullLinearScan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RetrievalStrategy::KeyKdTree => "key_kdtree",
            RetrievalStrategy::FullLinearScan => "full_linear_scan",
        }
    }
}

/// Final similarity between query and aligned candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Matcher {
    Correlation,
    ScCosine,
}

impl Matcher {
    pub const ALL: [Matcher; 2] = [Matcher::ScCosine, Matcher::Correlation];

    pub fn name(self) -> &'static str {
        match self {
            Matcher::Correlation => "corr",
            Matcher::ScCosine => "cos",
        }
    }

    /// Similarity of `query.shift_columns(shift)` and `candidate`. Constant
    /// descriptors score 0.
    pub fn score_at_shift(self, query: &Descriptor, candidate: &Descriptor, shift: usize) -> f64 {
        let r = match self {
            Matcher::Correlation => correlation_at_shift(query, candidate, shift),
            Matcher::ScCosine => sc_cosine_at_shift(query, candidate, shift),
        };
        match r {
            Ok(v) => v,
            Err(NddError::UndefinedCorrelation) => 0.0,
            Err(e) => panic!("descriptor shapes diverged inside the database: {e}"),
        }
    }
}

macro_rules! impl_named {
    ($ty:ty, $what:literal, { $($alias:literal => $val:expr),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = NddError;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($alias => Ok($val),)*
                    _ => Err(NddError::InvalidConfig(format!(concat!("unknown ", $what, " '{}'"), s))),
                }
            }
        }
    };
}

impl_named!(AlignmentStrategy, "alignment strategy", {
    "row_vector" => AlignmentStrategy::RowVector,
    "row-vector" => AlignmentStrategy::RowVector,
    "full_shift" => AlignmentStrategy::FullShift,
    "full-shift" => AlignmentStrategy::FullShift,
    "binary_xnor" => AlignmentStrategy::BinaryXnor,
    "binary-xnor" => AlignmentStrategy::BinaryXnor,
});

impl_named!(RetrievalStrategy, "retrieval strategy", {
    "key_kdtree" => RetrievalStrategy::KeyKdTree,
    "key-kdtree" => RetrievalStrategy::KeyKdTree,
    "kdtree" => RetrievalStrategy::KeyKdTree,
    "full_linear_scan" => RetrievalStrategy::FullLinearScan,
    "full-linear-scan" => RetrievalStrategy::FullLinearScan,
    "linear" => RetrievalStrategy::FullLinearScan,
});

impl_named!(Matcher, "matcher", {
    "corr" => Matcher::Correlation,
    "correlation" => Matcher::Correlation,
    "cos" => Matcher::ScCosine,
    "cosine" => Matcher::ScCosine,
    "sc_cosine" => Matcher::ScCosine,
});

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalConfig {
    /// Number of key-space nearest neighbours re-ranked with full descriptors.
    pub k: usize,
    pub threshold: f64,
    pub alignment: AlignmentStrategy,
    pub retrieval: RetrievalStrategy,
    pub matcher: Matcher,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 25,
            threshold: 0.65,
            alignment: AlignmentStrategy::RowVector,
            retrieval: RetrievalStrategy::KeyKdTree,
            matcher: Matcher::Correlation,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(NddError::InvalidConfig("k must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(NddError::InvalidConfig(
                "threshold must lie in [-1, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchResult {
    pub matched_frame: FrameId,
    pub similarity: f64,
    /// `candidate ~= query.shift_columns(shift)`.
    pub shift: usize,
}

/// Outcome of one detection query. `best` is recorded even when it falls
/// below the threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopQuery {
    pub query_id: FrameId,
    pub best: Option<MatchResult>,
    pub accepted: bool,
}

impl LoopQuery {
    /// Best similarity, `-inf` when nothing was eligible.
    pub fn similarity(&self) -> f64 {
        self.best.map_or(f64::NEG_INFINITY, |m| m.similarity)
    }
}

pub const DEFAULT_EXCLUSION_WINDOW: usize = 50;

/// Frames with their keys plus an exact KD-tree over the search keys.
///
/// The tree is rebuilt over the whole database once the unindexed tail grows
/// past `max(64, 2 * sqrt(n))` frames; the tail is scanned linearly, so the
/// index always covers every stored key.
#[derive(Clone, Debug)]
pub struct DescriptorDatabase {
    ids: Vec<FrameId>,
    descriptors: Vec<Descriptor>,
    search_keys: Vec<f64>,
    align_keys: Vec<AlignKey>,
    key_dim: usize,
    tree: KdTree,
    exclusion_window: usize,
}

impl Default for DescriptorDatabase {
    fn default() -> Self {
        DescriptorDatabase::new(DEFAULT_EXCLUSION_WINDOW)
    }
}

impl DescriptorDatabase {
    pub fn new(exclusion_window: usize) -> Self {
        DescriptorDatabase {
            ids: Vec::new(),
            descriptors: Vec::new(),
            search_keys: Vec::new(),
            align_keys: Vec::new(),
            key_dim: 0,
            tree: KdTree::build(1, Vec::new()),
            exclusion_window,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn exclusion_window(&self) -> usize {
        self.exclusion_window
    }

    pub fn ids(&self) -> &[FrameId] {
        &self.ids
    }

    pub fn descriptor(&self, index: usize) -> &Descriptor {
        &self.descriptors[index]
    }

    pub fn align_key(&self, index: usize) -> &AlignKey {
        &self.align_keys[index]
    }

    pub fn search_key(&self, index: usize) -> &[f64] {
        &self.search_keys[index * self.key_dim..(index + 1) * self.key_dim]
    }

    /// Number of frames covered by the KD-tree (the rest are scanned).
    pub fn indexed_len(&self) -> usize {
        self.tree.len()
    }

    pub fn insert(&mut self, id: FrameId, desc: Descriptor) -> Result<()> {
        if let Some(&last) = self.ids.last() {
            if id <= last {
                return Err(NddError::NonMonotonicFrame { id, last });
            }
            if desc.shape() != self.descriptors[0].shape() {
                return Err(NddError::ShapeMismatch {
                    left: self.descriptors[0].shape(),
                    right: desc.shape(),
                });
            }
        } else {
            self.key_dim = desc.rows();
        }
        let key = desc.search_key();
        self.search_keys.extend_from_slice(&key.0);
        self.align_keys.push(desc.align_key());
        self.descriptors.push(desc);
        self.ids.push(id);

        let n = self.ids.len();
        let tail = n - self.tree.len();
        if tail > 64usize.max(2 * (n as f64).sqrt() as usize) {
            self.rebuild_index();
        }
        Ok(())
    }

    /// Re-indexes every stored key.
    pub fn rebuild_index(&mut self) {
        self.tree = KdTree::build(self.key_dim.max(1), self.search_keys.clone());
    }

    /// Count of stored frames with `id <= exclude_after`.
    fn eligible_len(&self, exclude_after: Option<FrameId>) -> usize {
        match exclude_after {
            Some(bound) => self.ids.partition_point(|&id| id <= bound),
            None => 0,
        }
    }

    /// Largest frame id a query may match, `None` if nothing can be eligible.
    pub fn eligible_bound(&self, query_id: FrameId) -> Option<FrameId> {
        query_id.checked_sub(self.exclusion_window)
    }

    /// The `k` frames nearest to `query` in key space among frames with
    /// `id <= exclude_after`, nearest first, as `(frame_id, distance)`. Ties
    /// go to the smaller frame id.
    pub fn knn_keys(
        &self,
        query: &SearchKey,
        k: usize,
        exclude_after: Option<FrameId>,
    ) -> Vec<(FrameId, f64)> {
        self.knn_indices(query, k, self.eligible_len(exclude_after))
            .into_iter()
            .map(|(i, d2)| (self.ids[i], d2.sqrt()))
            .collect()
    }

    fn knn_indices(&self, query: &SearchKey, k: usize, limit: usize) -> Vec<(usize, f64)> {
        if k == 0 || limit == 0 {
            return Vec::new();
        }
        assert_eq!(query.0.len(), self.key_dim, "search key dimension mismatch");
        let mut found = self.tree.knn(&query.0, k, limit);
        if limit > self.tree.len() {
            found.extend(
                (self.tree.len()..limit)
                    .map(|i| (i, kdtree::squared_distance(&query.0, self.search_key(i)))),
            );
            found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            found.truncate(k);
        }
        found
    }

    /// Estimates the shift of stored frame `index` relative to `query` and
    /// scores the aligned pair.
    fn score_candidate(
        &self,
        query: &Descriptor,
        query_align: &AlignKey,
        index: usize,
        cfg: &RetrievalConfig,
    ) -> (usize, f64) {
        let cand = &self.descriptors[index];
        let shift = match cfg.alignment {
            AlignmentStrategy::RowVector => {
                best_shift(query_align, &self.align_keys[index])
                    .expect("align key length")
                    .0
            }
            AlignmentStrategy::BinaryXnor => {
                binary_xnor_alignment(query, cand)
                    .expect("descriptor shape")
                    .0
            }
            AlignmentStrategy::FullShift => {
                return match cfg.matcher {
                    Matcher::Correlation => {
                        full_shift_alignment(query, cand).expect("descriptor shape")
                    }
                    m => (0..cand.cols())
                        .map(|s| (s, m.score_at_shift(query, cand, s)))
                        .fold(
                            (0, f64::NEG_INFINITY),
                            |best, x| if x.1 > best.1 { x } else { best },
                        ),
                };
            }
        };
        (shift, cfg.matcher.score_at_shift(query, cand, shift))
    }

    /// Runs loop detection for `query_desc` taken at frame `query_id` against
    /// the stored frames that are at least `exclusion_window` frames older.
    pub fn detect_loop(
        &self,
        query_id: FrameId,
        query_desc: &Descriptor,
        cfg: &RetrievalConfig,
    ) -> LoopQuery {
        let limit = self.eligible_len(self.eligible_bound(query_id));
        let candidates: Vec<usize> = match cfg.retrieval {
            RetrievalStrategy::KeyKdTree => self
                .knn_indices(&query_desc.search_key(), cfg.k, limit)
                .into_iter()
                .map(|(i, _)| i)
                .collect(),
            RetrievalStrategy::FullLinearScan => (0..limit).collect(),
        };
        let query_align = query_desc.align_key();
        let scored = crate::par::map(&candidates, |&i| {
            (i, self.score_candidate(query_desc, &query_align, i, cfg))
        });

        let mut best: Option<MatchResult> = None;
        for (i, (shift, similarity)) in scored {
            let id = self.ids[i];
            let better = match best {
                None => true,
                Some(b) => {
                    similarity > b.similarity
                        || (similarity == b.similarity && id < b.matched_frame)
                }
            };
            if better {
                best = Some(MatchResult {
                    matched_frame: id,
                    similarity,
                    shift,
                });
            }
        }
        LoopQuery {
            query_id,
            best,
            accepted: best.is_some_and(|b| b.similarity >= cfg.threshold),
        }
    }

    /// Writes `index.txt` plus one binary descriptor per frame into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| NddError::io(dir, e))?;
        let mut index = format!("# exclusion_window={}\n", self.exclusion_window);
        for (id, desc) in self.ids.iter().zip(&self.descriptors) {
            let name = format!("{id:06}.ndd");
            desc.write_binary(dir.join(&name))?;
            index.push_str(&format!("{id} {name}\n"));
        }
        write_atomic(&dir.join("index.txt"), index.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index_path = dir.join("index.txt");
        let text = fs::read_to_string(&index_path).map_err(|e| NddError::io(&index_path, e))?;
        let mut db = DescriptorDatabase::default();
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: String| NddError::MalformedLine {
                path: index_path.clone(),
                line: i + 1,
                reason,
            };
            let line = line.trim();
            if let Some(meta) = line.strip_prefix('#') {
                if let Some(v) = meta.trim().strip_prefix("exclusion_window=") {
                    db.exclusion_window = v.parse().map_err(|e| bad(format!("{e}")))?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (id, file) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| bad("expected '<frame_id> <file>'".into()))?;
            let id: FrameId = id.parse().map_err(|e| bad(format!("{e}")))?;
            db.insert(id, Descriptor::read_binary(dir.join(file.trim()))?)?;
        }
        db.rebuild_index();
        Ok(db)
    }
}

/// Detection log with columns `query_id,matched_id,similarity,shift,accepted`.
pub fn write_detection_log(path: impl AsRef<Path>, queries: &[LoopQuery]) -> Result<()> {
    let mut out = String::from("query_id,matched_id,similarity,shift,accepted\n");
    for q in queries {
        match q.best {
            Some(m) => out.push_str(&format!(
                "{},{},{:?},{},{}\n",
                q.query_id, m.matched_frame, m.similarity, m.shift, q.accepted
            )),
            None => out.push_str(&format!("{},,-inf,,false\n", q.query_id)),
        }
    }
    write_atomic(path.as_ref(), out.as_bytes())
}
