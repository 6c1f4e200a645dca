//! Episodic M-way K-shot task construction.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use thiserror::Error;

use crate::datastore::{DataError, UnlabeledPool};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid episode spec: {0}")]
    InvalidSpec(String),
    #[error("pool has {have} classes with at least {per_class} items, need {need}")]
    InsufficientClasses { have: usize, need: usize, per_class: usize },
    #[error("unlabeled pool has {have} eligible items, need {need}")]
    InsufficientUnlabeled { have: usize, need: usize },
    #[error(transparent)]
    Oracle(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnlabeledMode {
    None,
    /// Uniform draw from the whole unlabeled pool; never reads labels.
    Practical,
    /// Per-class draw using hidden labels. Marks the episode as tainted.
    ClassAwareOracle,
}

impl UnlabeledMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UnlabeledMode::None => "none",
            UnlabeledMode::Practical => "practical",
            UnlabeledMode::ClassAwareOracle => "class_aware_oracle",
        }
    }
}

impl std::str::FromStr for UnlabeledMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "practical" => Ok(Self::Practical),
            "class_aware_oracle" | "class_aware" => Ok(Self::ClassAwareOracle),
            _ => Err(format!("unknown unlabeled mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    /// Unlabeled items per episode class.
    pub unlabeled: usize,
    pub mode: UnlabeledMode,
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize, queries: usize) -> Self {
        Self { ways, shots, queries, unlabeled: 0, mode: UnlabeledMode::None }
    }

    pub fn with_unlabeled(mut self, per_class: usize, mode: UnlabeledMode) -> Self {
        self.unlabeled = per_class;
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        if self.ways < 2 {
            return Err(SampleError::InvalidSpec(format!("ways must be >= 2, got {}", self.ways)));
        }
        if self.shots == 0 || self.queries == 0 {
            return Err(SampleError::InvalidSpec("shots and queries must be >= 1".into()));
        }
        Ok(())
    }
}

/// Dataset rows grouped by class, in canonical (ascending) order so that
/// pools assembled from different sources but holding the same items are
/// identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPool {
    classes: Vec<usize>,
    rows: Vec<Vec<usize>>,
}

impl ClassPool {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut grouped: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, class) in pairs {
            grouped.entry(class).or_default().push(row);
        }
        let mut classes = Vec::with_capacity(grouped.len());
        let mut rows = Vec::with_capacity(grouped.len());
        for (c, mut r) in grouped {
            r.sort_unstable();
            r.dedup();
            classes.push(c);
            rows.push(r);
        }
        Self { classes, rows }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn rows_of(&self, class: usize) -> &[usize] {
        match self.classes.binary_search(&class) {
            Ok(i) => &self.rows[i],
            Err(_) => &[],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.classes.iter().zip(&self.rows).flat_map(|(&c, r)| r.iter().map(move |&row| (row, c)))
    }
}

/// One task. Support and query are grouped by local class; node order for
/// graph heads is support, then query, then unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    /// Pool class for each local index.
    pub class_map: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
    pub unlabeled: Vec<usize>,
    pub oracle_tainted: bool,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.class_map.len()
    }

    pub fn support_rows(&self) -> Vec<usize> {
        self.support.iter().map(|p| p.0).collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|p| p.1).collect()
    }

    pub fn query_rows(&self) -> Vec<usize> {
        self.query.iter().map(|p| p.0).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|p| p.1).collect()
    }

    /// Support, query and unlabeled rows in graph node order.
    pub fn node_rows(&self) -> Vec<usize> {
        let mut rows = self.support_rows();
        rows.extend(self.query.iter().map(|p| p.0));
        rows.extend_from_slice(&self.unlabeled);
        rows
    }

    /// Pool class of every support and query item, in node order.
    pub fn labeled_pool_classes(&self) -> Vec<usize> {
        self.support.iter().chain(&self.query).map(|&(_, l)| self.class_map[l]).collect()
    }

    /// Relabels local class `j` as `perm[j]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Episode {
        let mut class_map = vec![0; self.ways()];
        for (j, &p) in perm.iter().enumerate() {
            class_map[p] = self.class_map[j];
        }
        let remap = |v: &[(usize, usize)]| v.iter().map(|&(r, l)| (r, perm[l])).collect();
        Episode { class_map, support: remap(&self.support), query: remap(&self.query), ..self.clone() }
    }
}

pub fn sample_episode(pool: &ClassPool, spec: &EpisodeSpec, rng: &mut Rng) -> Result<Episode, SampleError> {
    spec.validate()?;
    let per_class = spec.shots + spec.queries;
    let eligible: Vec<usize> =
        pool.classes.iter().zip(&pool.rows).filter(|(_, r)| r.len() >= per_class).map(|(&c, _)| c).collect();
    if eligible.len() < spec.ways {
        return Err(SampleError::InsufficientClasses { have: eligible.len(), need: spec.ways, per_class });
    }
    let class_map: Vec<usize> = index::sample(rng, eligible.len(), spec.ways).iter().map(|i| eligible[i]).collect();
    let mut support = Vec::with_capacity(spec.ways * spec.shots);
    let mut query = Vec::with_capacity(spec.ways * spec.queries);
    for (local, &c) in class_map.iter().enumerate() {
        let rows = pool.rows_of(c);
        let picked = index::sample(rng, rows.len(), per_class);
        for (k, i) in picked.iter().enumerate() {
            if k < spec.shots {
                support.push((rows[i], local));
            } else {
                query.push((rows[i], local));
            }
        }
    }
    // group by local class; within a class keep draw order
    support.sort_by_key(|p| p.1);
    query.sort_by_key(|p| p.1);
    Ok(Episode { class_map, support, query, unlabeled: Vec::new(), oracle_tainted: false })
}

/// Adds unlabeled nodes to `episode`. Items already in the episode are never
/// attached. In practical mode `U·M` rows are drawn uniformly from the whole
/// pool; in class-aware oracle mode `U` rows are drawn from each episode
/// class using the hidden labels, and the episode is marked tainted.
pub fn attach_unlabeled(
    episode: Episode,
    pool: &UnlabeledPool,
    spec: &EpisodeSpec,
    rng: &mut Rng,
) -> Result<Episode, SampleError> {
    if spec.unlabeled == 0 || spec.mode == UnlabeledMode::None {
        return Err(SampleError::InvalidSpec("attach_unlabeled needs unlabeled > 0 and a mode".into()));
    }
    let used: HashSet<usize> = episode.support.iter().chain(&episode.query).map(|p| p.0).collect();
    let mut ep = episode;
    match spec.mode {
        UnlabeledMode::Practical => {
            let candidates: Vec<usize> = pool.rows().iter().copied().filter(|r| !used.contains(r)).collect();
            let need = spec.unlabeled * ep.ways();
            if candidates.len() < need {
                return Err(SampleError::InsufficientUnlabeled { have: candidates.len(), need });
            }
            ep.unlabeled = index::sample(rng, candidates.len(), need).iter().map(|i| candidates[i]).collect();
        }
        UnlabeledMode::ClassAwareOracle => {
            let oracle = pool.oracle()?;
            let mut attached = Vec::with_capacity(spec.unlabeled * ep.ways());
            for &c in &ep.class_map {
                let candidates: Vec<usize> = pool
                    .rows()
                    .iter()
                    .copied()
                    .filter(|r| !used.contains(r) && oracle.label_of(*r) == Some(c))
                    .collect();
                if candidates.len() < spec.unlabeled {
                    return Err(SampleError::InsufficientUnlabeled { have: candidates.len(), need: spec.unlabeled });
                }
                attached.extend(index::sample(rng, candidates.len(), spec.unlabeled).iter().map(|i| candidates[i]));
            }
            ep.unlabeled = attached;
            ep.oracle_tainted = true;
        }
        UnlabeledMode::None => unreachable!(),
    }
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn pool(classes: usize, per: usize) -> ClassPool {
        ClassPool::from_pairs((0..classes * per).map(|r| (r, r / per)))
    }

    #[test]
    fn exact_pool_uses_every_item() {
        let p = pool(3, 4);
        let spec = EpisodeSpec::new(3, 1, 3);
        let ep = sample_episode(&p, &spec, &mut stream(0, "t", &[])).unwrap();
        let mut rows = ep.node_rows();
        rows.sort_unstable();
        assert_eq!(rows, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn five_way_five_shot_sizes() {
        let p = pool(10, 30);
        let spec = EpisodeSpec::new(5, 5, 15);
        let ep = sample_episode(&p, &spec, &mut stream(1, "t", &[])).unwrap();
        assert_eq!((ep.support.len(), ep.query.len()), (25, 75));
        let s: HashSet<_> = ep.support_rows().into_iter().collect();
        assert!(ep.query_rows().iter().all(|r| !s.contains(r)));
        let mut distinct = ep.class_map.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 5);
        for l in 0..5 {
            assert_eq!(ep.support.iter().filter(|p| p.1 == l).count(), 5);
            assert_eq!(ep.query.iter().filter(|p| p.1 == l).count(), 15);
            assert!(ep.support.iter().filter(|p| p.1 == l).all(|p| p.0 / 30 == ep.class_map[l]));
        }
    }

    #[test]
    fn same_rng_state_same_episode() {
        let p = pool(8, 12);
        let spec = EpisodeSpec::new(4, 2, 3);
        let a = sample_episode(&p, &spec, &mut stream(5, "t", &[])).unwrap();
        let b = sample_episode(&p, &spec, &mut stream(5, "t", &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_pool_errors() {
        let p = pool(3, 4);
        assert!(matches!(
            sample_episode(&p, &EpisodeSpec::new(4, 1, 1), &mut stream(0, "t", &[])),
            Err(SampleError::InsufficientClasses { have: 3, need: 4, .. })
        ));
        assert!(matches!(
            sample_episode(&p, &EpisodeSpec::new(2, 3, 2), &mut stream(0, "t", &[])),
            Err(SampleError::InsufficientClasses { have: 0, .. })
        ));
        assert!(sample_episode(&p, &EpisodeSpec::new(1, 1, 1), &mut stream(0, "t", &[])).is_err());
    }

    #[test]
    fn practical_attaches_whole_pool() {
        let p = pool(5, 3);
        let spec = EpisodeSpec::new(5, 1, 2).with_unlabeled(2, UnlabeledMode::Practical);
        let ep = sample_episode(&p, &spec, &mut stream(0, "t", &[])).unwrap();
        let mut un = UnlabeledPool::sealed((100..110).collect(), |r| r % 5);
        un.disable_oracle();
        let ep = attach_unlabeled(ep, &un, &spec, &mut stream(0, "u", &[])).unwrap();
        let mut got = ep.unlabeled.clone();
        got.sort_unstable();
        assert_eq!(got, (100..110).collect::<Vec<_>>());
        assert!(!ep.oracle_tainted);
    }

    #[test]
    fn class_aware_draws_per_class_and_taints() {
        let p = pool(6, 3);
        let spec = EpisodeSpec::new(5, 1, 2).with_unlabeled(5, UnlabeledMode::ClassAwareOracle);
        let ep = sample_episode(&p, &spec, &mut stream(2, "t", &[])).unwrap();
        let un = UnlabeledPool::sealed((100..400).collect(), |r| r % 6);
        let ep = attach_unlabeled(ep, &un, &spec, &mut stream(0, "u", &[])).unwrap();
        assert_eq!(ep.unlabeled.len(), 25);
        assert!(ep.oracle_tainted);
        for &c in &ep.class_map {
            assert_eq!(ep.unlabeled.iter().filter(|&&r| r % 6 == c).count(), 5);
        }
    }

    #[test]
    fn class_aware_needs_oracle() {
        let p = pool(6, 3);
        let spec = EpisodeSpec::new(2, 1, 2).with_unlabeled(1, UnlabeledMode::ClassAwareOracle);
        let ep = sample_episode(&p, &spec, &mut stream(2, "t", &[])).unwrap();
        let mut un = UnlabeledPool::sealed((100..400).collect(), |r| r % 6);
        un.disable_oracle();
        let err = attach_unlabeled(ep, &un, &spec, &mut stream(0, "u", &[])).unwrap_err();
        assert!(matches!(err, SampleError::Oracle(DataError::OracleDisabled)));
    }

    #[test]
    fn attachments_skip_episode_items() {
        let p = pool(2, 3);
        let spec = EpisodeSpec::new(2, 1, 2).with_unlabeled(1, UnlabeledMode::Practical);
        let ep = sample_episode(&p, &spec, &mut stream(0, "t", &[])).unwrap();
        // the unlabeled pool is exactly the episode's own rows
        let un = UnlabeledPool::sealed((0..6).collect(), |r| r / 3);
        assert!(matches!(
            attach_unlabeled(ep, &un, &spec, &mut stream(0, "u", &[])),
            Err(SampleError::InsufficientUnlabeled { have: 0, need: 2 })
        ));
    }

    #[test]
    fn permutation_relabels_consistently() {
        let p = pool(6, 5);
        let ep = sample_episode(&p, &EpisodeSpec::new(3, 2, 2), &mut stream(3, "t", &[])).unwrap();
        let perm = [2, 0, 1];
        let q = ep.permute_classes(&perm);
        for (&(r, l), &(r2, l2)) in ep.support.iter().zip(&q.support) {
            assert_eq!(r, r2);
            assert_eq!(l2, perm[l]);
            assert_eq!(ep.class_map[l], q.class_map[l2]);
        }
    }
}
