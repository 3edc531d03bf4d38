//! n-way k-shot episode sampling and few-shot pool selection.

use std::collections::{BTreeMap, BTreeSet};

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::text::{tokenize, TextRegistry, TokenSeq, Vocab};
use super::{Annotation, BoxXyxy, Dataset, FeatureGrid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SupportInstance {
    pub class_id: u32,
    pub bbox: BoxXyxy,
    /// Source image; support crops are pooled from it.
    pub grid: FeatureGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryImage {
    pub grid: FeatureGrid,
    /// `(episode slot, box)` for every object of an episode class.
    pub targets: Vec<(usize, BoxXyxy)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Episode slot `i` holds class `class_ids[i]`.
    pub class_ids: Vec<u32>,
    pub class_names: Vec<String>,
    /// `support[i]` holds the k instances of slot `i`.
    pub support: Vec<Vec<SupportInstance>>,
    pub queries: Vec<QueryImage>,
    pub texts: Vec<TokenSeq>,
    pub seed: u64,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    pub fn slot(&self, class_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|c| *c == class_id)
    }
}

/// `(image index, annotation index)` of every instance, per class.
fn instances_by_class(ds: &Dataset) -> BTreeMap<u32, Vec<(usize, usize)>> {
    let mut out: BTreeMap<u32, Vec<(usize, usize)>> = ds.classes.keys().map(|k| (*k, Vec::new())).collect();
    for (i, anns) in ds.annotations.iter().enumerate() {
        for (j, a) in anns.iter().enumerate() {
            out.entry(a.class_id).or_default().push((i, j));
        }
    }
    out
}

fn query_targets(anns: &[Annotation], class_ids: &[u32]) -> Vec<(usize, BoxXyxy)> {
    anns.iter()
        .filter_map(|a| class_ids.iter().position(|c| *c == a.class_id).map(|s| (s, a.bbox)))
        .collect()
}

/// Builds an episode over the given classes in slot order, with `k_shot`
/// instances per class drawn by `rng` and no queries.
fn support_for(
    ds: &Dataset,
    registry: &TextRegistry,
    vocab: &Vocab,
    class_ids: &[u32],
    k_shot: usize,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<Episode> {
    let by_class = instances_by_class(ds);
    let mut support = Vec::with_capacity(class_ids.len());
    let mut texts = Vec::with_capacity(class_ids.len());
    let mut names = Vec::with_capacity(class_ids.len());
    for &c in class_ids {
        let pool = by_class.get(&c).map(Vec::as_slice).unwrap_or(&[]);
        if pool.len() < k_shot {
            return Err(Error::Insufficient {
                class: ds.class_name(c).unwrap_or("?").to_string(),
                needed: k_shot,
                available: pool.len(),
            });
        }
        let mut chosen = pool.to_vec();
        chosen.shuffle(rng);
        chosen.truncate(k_shot);
        support.push(
            chosen
                .into_iter()
                .map(|(i, j)| SupportInstance {
                    class_id: c,
                    bbox: ds.annotations[i][j].bbox,
                    grid: ds.images[i].clone(),
                })
                .collect(),
        );
        texts.push(tokenize(registry.description(ds, c)?, vocab)?);
        names.push(ds.class_name(c).unwrap_or_default().to_string());
    }
    Ok(Episode {
        class_ids: class_ids.to_vec(),
        class_names: names,
        support,
        queries: Vec::new(),
        texts,
        seed,
    })
}

/// Samples an n-way k-shot episode. Classes are drawn uniformly among those
/// with at least `k_shot` instances and their order fixes the slot indices.
/// Query images contain at least one episode-class object and avoid support
/// source images unless too few remain.
pub fn sample_episode(
    ds: &Dataset,
    registry: &TextRegistry,
    vocab: &Vocab,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || n_query == 0 {
        return Err(Error::Config("n_way, k_shot and n_query must be positive".into()));
    }
    let counts = ds.instance_counts();
    if counts.len() < n_way {
        return Err(Error::Data(format!("{n_way}-way episode needs {n_way} classes, dataset has {}", counts.len())));
    }
    let mut eligible: Vec<u32> = counts.iter().filter(|(_, n)| **n >= k_shot).map(|(c, _)| *c).collect();
    if eligible.len() < n_way {
        // Name the class that would have had to fill the last slot.
        let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let (c, n) = ranked[n_way - 1];
        return Err(Error::Insufficient {
            class: ds.class_name(c).unwrap_or("?").to_string(),
            needed: k_shot,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    eligible.truncate(n_way);
    let mut ep = support_for(ds, registry, vocab, &eligible, k_shot, &mut rng, seed)?;

    let support_ids: BTreeSet<u64> = ep.support.iter().flatten().map(|s| s.grid.image_id).collect();
    let with_class: Vec<usize> = (0..ds.images.len())
        .filter(|&i| !query_targets(&ds.annotations[i], &ep.class_ids).is_empty())
        .collect();
    let disjoint: Vec<usize> = with_class
        .iter()
        .copied()
        .filter(|&i| !support_ids.contains(&ds.images[i].image_id))
        .collect();
    let mut candidates = if disjoint.len() >= n_query {
        disjoint
    } else {
        debug!(
            "episode {seed}: only {} support-disjoint query images, reusing support images",
            disjoint.len()
        );
        with_class
    };
    candidates.shuffle(&mut rng);
    candidates.truncate(n_query);
    ep.queries = candidates
        .into_iter()
        .map(|i| QueryImage {
            grid: ds.images[i].clone(),
            targets: query_targets(&ds.annotations[i], &ep.class_ids),
        })
        .collect();
    Ok(ep)
}

/// Episode over every class of `ds`, in class-id order, with `k_shot`
/// support instances per class and the given images as queries.
pub fn evaluation_episode(
    pool: &Dataset,
    registry: &TextRegistry,
    vocab: &Vocab,
    k_shot: usize,
    queries: &Dataset,
    seed: u64,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ep = support_for(pool, registry, vocab, &pool.class_ids(), k_shot, &mut rng, seed)?;
    ep.queries = queries
        .images
        .iter()
        .zip(&queries.annotations)
        .map(|(g, anns)| QueryImage {
            grid: g.clone(),
            targets: query_targets(anns, &ep.class_ids),
        })
        .collect();
    Ok(ep)
}

/// Splits a novel dataset into a k-shot pool and a held-out test set.
/// Images are visited in seeded order; an image joins the pool while one of
/// its classes still needs instances, and keeps only the annotations that
/// fill a quota. Every other image goes to the test set untouched.
pub fn few_shot_split(ds: &Dataset, k_shot: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if k_shot == 0 {
        return Err(Error::Config("k_shot must be positive".into()));
    }
    let mut need: BTreeMap<u32, usize> = ds.classes.keys().map(|c| (*c, k_shot)).collect();
    let mut order: Vec<usize> = (0..ds.images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut pool_idx = Vec::new();
    let mut pool_anns = Vec::new();
    let mut test_idx = Vec::new();
    for i in order {
        let wanted = ds.annotations[i].iter().any(|a| need[&a.class_id] > 0);
        if !wanted {
            test_idx.push(i);
            continue;
        }
        let mut kept = Vec::new();
        for a in &ds.annotations[i] {
            let n = need.get_mut(&a.class_id).expect("validated class");
            if *n > 0 {
                *n -= 1;
                kept.push(a.clone());
            }
        }
        pool_idx.push(i);
        pool_anns.push(kept);
    }
    if let Some((c, n)) = need.iter().find(|(_, n)| **n > 0) {
        return Err(Error::Insufficient {
            class: ds.class_name(*c).unwrap_or("?").to_string(),
            needed: k_shot,
            available: k_shot - n,
        });
    }
    let mut pool = ds.subset(&pool_idx);
    pool.annotations = pool_anns;
    test_idx.sort_unstable();
    Ok((pool, ds.subset(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::text::{build_vocab, Provenance};
    use crate::data::Split;
    use crate::tensor::Tensor;

    /// `per_class[c]` single-object images for each class `c + 1`.
    fn toy(per_class: &[usize]) -> (Dataset, TextRegistry) {
        let mut images = Vec::new();
        let mut annotations = Vec::new();
        let mut classes = BTreeMap::new();
        let mut reg = TextRegistry::new();
        let mut id = 0;
        for (c, &n) in per_class.iter().enumerate() {
            let cid = c as u32 + 1;
            classes.insert(cid, format!("class{cid}"));
            reg.insert(&format!("class{cid}"), Provenance::NameOnly, &format!("class {cid}")).unwrap();
            for _ in 0..n {
                id += 1;
                let g = Tensor::full(&[2, 2, 1], id as f64);
                images.push(FeatureGrid::new(id, g, 32.0, 32.0, "toy").unwrap());
                annotations.push(vec![Annotation {
                    class_id: cid,
                    bbox: BoxXyxy::new(0.0, 0.0, 16.0, 16.0),
                }]);
            }
        }
        let ds = Dataset {
            images,
            annotations,
            classes,
            split: Split::Base,
        };
        (ds, reg)
    }

    #[test]
    fn forced_episode_is_unique() {
        let (ds, reg) = toy(&[1, 1]);
        let v = build_vocab(&reg).unwrap();
        for seed in 0..20 {
            let ep = sample_episode(&ds, &reg, &v, 2, 1, 1, seed).unwrap();
            let mut ids = ep.class_ids.clone();
            ids.sort();
            assert_eq!(ids, vec![1, 2]);
            for (slot, s) in ep.support.iter().enumerate() {
                assert_eq!(s.len(), 1);
                assert_eq!(s[0].grid.image_id, ep.class_ids[slot] as u64);
            }
            // Both images are support sources, so the query falls back.
            assert_eq!(ep.queries.len(), 1);
        }
    }

    #[test]
    fn insufficient_instances_name_the_class() {
        let (ds, reg) = toy(&[3, 1]);
        let v = build_vocab(&reg).unwrap();
        match sample_episode(&ds, &reg, &v, 2, 2, 1, 0) {
            Err(Error::Insufficient { class, needed, available }) => {
                assert_eq!((class.as_str(), needed, available), ("class2", 2, 1));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn same_seed_same_episode() {
        let (ds, reg) = toy(&[4, 4, 4, 4, 4]);
        let v = build_vocab(&reg).unwrap();
        let a = sample_episode(&ds, &reg, &v, 3, 2, 2, 17).unwrap();
        let b = sample_episode(&ds, &reg, &v, 3, 2, 2, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_subsets_follow_hypergeometric() {
        // Drawing 3 of 5 classes: a fresh subset equals a fixed one with
        // probability 1/C(5,3), and the overlap with it is hypergeometric
        // with mean 3·3/5.
        let (ds, reg) = toy(&[2, 2, 2, 2, 2]);
        let v = build_vocab(&reg).unwrap();
        let subset = |seed| {
            let ep = sample_episode(&ds, &reg, &v, 3, 1, 1, seed).unwrap();
            ep.class_ids.into_iter().collect::<BTreeSet<u32>>()
        };
        let reference = subset(1000);
        let mut differ = 0;
        let mut overlap = 0;
        for seed in 0..100 {
            let s = subset(seed);
            differ += (s != reference) as usize;
            overlap += s.intersection(&reference).count();
        }
        let p_differ = differ as f64 / 100.0;
        assert!((p_differ - 0.9).abs() <= 0.05, "{p_differ}");
        let mean_overlap = overlap as f64 / 100.0;
        assert!((mean_overlap / 1.8 - 1.0).abs() <= 0.05, "{mean_overlap}");
    }

    #[test]
    fn episode_invariants_over_random_configs() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..1000u64 {
            let n_classes = rng.random_range(2..6);
            let per: Vec<usize> = (0..n_classes).map(|_| rng.random_range(1..6)).collect();
            let (ds, reg) = toy(&per);
            let v = build_vocab(&reg).unwrap();
            let n = rng.random_range(1..=n_classes);
            let k = rng.random_range(1..4);
            match sample_episode(&ds, &reg, &v, n, k, 2, trial) {
                Ok(ep) => {
                    assert_eq!(ep.class_ids.iter().collect::<BTreeSet<_>>().len(), n);
                    assert!(ep.support.iter().all(|s| s.len() == k));
                    for (slot, s) in ep.support.iter().enumerate() {
                        assert!(s.iter().all(|i| i.class_id == ep.class_ids[slot]));
                        let ids: BTreeSet<u64> = s.iter().map(|i| i.grid.image_id).collect();
                        assert_eq!(ids.len(), k, "sampled without replacement");
                    }
                    assert!(!ep.queries.is_empty());
                    for q in &ep.queries {
                        assert!(!q.targets.is_empty() && q.targets.iter().all(|(s, _)| *s < n));
                    }
                    assert!(ep.texts.iter().all(|t| t.len() >= 2 && t.ids[0] == 1));
                }
                Err(Error::Insufficient { .. }) => {
                    assert!(per.iter().filter(|c| **c >= k).count() < n);
                }
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn few_shot_split_quota() {
        let (ds, _) = toy(&[4, 5]);
        let (pool, test) = few_shot_split(&ds, 2, 3).unwrap();
        assert_eq!(pool.instance_counts().values().copied().collect::<Vec<_>>(), vec![2, 2]);
        assert_eq!(pool.images.len() + test.images.len(), ds.images.len());
        let p: BTreeSet<u64> = pool.images.iter().map(|g| g.image_id).collect();
        assert!(test.images.iter().all(|g| !p.contains(&g.image_id)));
        assert!(matches!(few_shot_split(&ds, 6, 0), Err(Error::Insufficient { .. })));
    }
}
