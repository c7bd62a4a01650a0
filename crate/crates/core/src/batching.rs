//! Training batch assembly: flat labeled batches for the softmax family and
//! support/query episodes for the prototypical loss.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Items grouped by class name.
pub type ClassPool<I> = BTreeMap<String, Vec<I>>;

/// `N` items with class indices in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatBatch<I> {
    pub items: Vec<I>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<I> FlatBatch<I> {
    pub fn new(items: Vec<I>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("flat batch"));
        }
        if items.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: items.len(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(FlatBatch {
            items,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// `B` classes with `M` items each. The last item of every class is the
/// query; the first `M - 1` form its support set.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<I> {
    pub class_ids: Vec<String>,
    pub items: Vec<Vec<I>>,
}

impl<I> Episode<I> {
    pub fn new(class_ids: Vec<String>, items: Vec<Vec<I>>) -> Result<Self> {
        if class_ids.len() != items.len() {
            return Err(Error::DimensionMismatch {
                expected: class_ids.len(),
                actual: items.len(),
            });
        }
        if class_ids.len() < 2 {
            return Err(Error::InsufficientData("episode needs at least 2 classes".into()));
        }
        let m = items[0].len();
        if m < 2 {
            return Err(Error::InsufficientData(
                "episode needs at least 2 items per class".into(),
            ));
        }
        if let Some(row) = items.iter().find(|r| r.len() != m) {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: row.len(),
            });
        }
        Ok(Episode { class_ids, items })
    }

    /// Number of classes `B`.
    pub fn classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Items per class `M`.
    pub fn per_class(&self) -> usize {
        self.items[0].len()
    }

    pub fn query_index(&self) -> usize {
        self.per_class() - 1
    }

    pub fn query(&self, class: usize) -> &I {
        &self.items[class][self.query_index()]
    }

    pub fn support(&self, class: usize) -> &[I] {
        &self.items[class][..self.query_index()]
    }

    pub fn map<J>(&self, mut f: impl FnMut(&I) -> J) -> Episode<J> {
        Episode {
            class_ids: self.class_ids.clone(),
            items: self
                .items
                .iter()
                .map(|row| row.iter().map(&mut f).collect())
                .collect(),
        }
    }

    pub fn try_map<J>(&self, mut f: impl FnMut(&I) -> Result<J>) -> Result<Episode<J>> {
        let items = self
            .items
            .iter()
            .map(|row| row.iter().map(&mut f).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Episode {
            class_ids: self.class_ids.clone(),
            items,
        })
    }
}

/// Seeded source of episodes and shuffles. Cloning forks the state.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    rng: ChaCha8Rng,
}

impl EpisodeSampler {
    pub fn new(seed: u64) -> Self {
        EpisodeSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Draws `b` distinct classes uniformly, then `m` distinct items of each.
    pub fn sample_episode<I: Clone>(
        &mut self,
        pool: &ClassPool<I>,
        b: usize,
        m: usize,
    ) -> Result<Episode<I>> {
        if b < 2 || m < 2 {
            return Err(Error::InvalidArgument(format!(
                "episodes need B >= 2 and M >= 2, got B={b}, M={m}"
            )));
        }
        let eligible: Vec<(&String, &Vec<I>)> =
            pool.iter().filter(|(_, items)| items.len() >= m).collect();
        if eligible.len() < b {
            return Err(Error::InsufficientData(format!(
                "{} classes have at least {m} items, episode needs {b}",
                eligible.len()
            )));
        }
        let chosen = index::sample(&mut self.rng, eligible.len(), b);
        let mut class_ids = Vec::with_capacity(b);
        let mut items = Vec::with_capacity(b);
        for ci in chosen.iter() {
            let (name, pool_items) = eligible[ci];
            let picks = index::sample(&mut self.rng, pool_items.len(), m);
            class_ids.push(name.clone());
            items.push(picks.iter().map(|i| pool_items[i].clone()).collect());
        }
        Episode::new(class_ids, items)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.rng);
    }
}

/// The `B` same-class (query, centroid) pairings, as class ids.
pub fn positive_pairs<I>(ep: &Episode<I>) -> Vec<(&str, &str)> {
    ep.class_ids
        .iter()
        .map(|c| (c.as_str(), c.as_str()))
        .collect()
}

/// The `B(B-1)` cross-class pairings.
pub fn negative_pairs<I>(ep: &Episode<I>) -> Vec<(&str, &str)> {
    let ids = &ep.class_ids;
    ids.iter()
        .flat_map(|q| {
            ids.iter()
                .filter(move |c| *c != q)
                .map(move |c| (q.as_str(), c.as_str()))
        })
        .collect()
}
