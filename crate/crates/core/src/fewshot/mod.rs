//! N-way K-shot episodic evaluation with a cosine prototype classifier.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, kahan_sum, norm};

/// Labelled feature vectors, the input to episode sampling.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureBank {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl FeatureBank {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} features but {} labels",
                features.len(),
                labels.len()
            )));
        }
        Ok(FeatureBank { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Item indices per class id, classes in ascending id order.
    fn by_class(&self) -> Vec<(usize, Vec<usize>)> {
        let mut classes: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut sorted: Vec<usize> = (0..self.labels.len()).collect();
        sorted.sort_by_key(|&i| (self.labels[i], i));
        for i in sorted {
            match classes.last_mut() {
                Some((c, items)) if *c == self.labels[i] => items.push(i),
                _ => classes.push((self.labels[i], vec![i])),
            }
        }
        classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            way: 5,
            shot: 1,
            queries: 15,
            episodes: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeItem {
    pub feature: Vec<f64>,
    /// Episode-local class, `0..way`.
    pub label: usize,
    /// Index of the item in the source bank.
    pub source: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    /// Source class id of each episode-local class.
    pub classes: Vec<usize>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

/// Samples `way` classes uniformly among those with at least `shot + queries`
/// items, then `shot + queries` items of each without replacement.
pub fn sample_episode(
    bank: &FeatureBank,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if way == 0 || shot == 0 {
        return Err(Error::InvalidArgument("episodes need at least one class and one shot".into()));
    }
    let need = shot + queries;
    let eligible: Vec<(usize, Vec<usize>)> = bank.by_class().into_iter().filter(|(_, it)| it.len() >= need).collect();
    if eligible.len() < way {
        return Err(Error::InsufficientData(format!(
            "{way}-way {shot}-shot with {queries} queries needs {way} classes of {need} items, only {} qualify",
            eligible.len()
        )));
    }
    let mut episode = Episode {
        way,
        shot,
        classes: Vec::with_capacity(way),
        support: Vec::with_capacity(way * shot),
        query: Vec::with_capacity(way * queries),
    };
    for (local, pick) in sample(rng, eligible.len(), way).into_iter().enumerate() {
        let (class, items) = &eligible[pick];
        episode.classes.push(*class);
        for (n, idx) in sample(rng, items.len(), need).into_iter().enumerate() {
            let source = items[idx];
            let item = EpisodeItem {
                feature: bank.features[source].clone(),
                label: local,
                source,
            };
            if n < shot {
                episode.support.push(item);
            } else {
                episode.query.push(item);
            }
        }
    }
    Ok(episode)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

fn unit(v: &[f64], what: &str) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidArgument(format!("{what} has zero or non-finite norm")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Nearest normalised class-mean prototype by cosine similarity; ties go to
/// the lowest class index.
pub fn cosine_classify(episode: &Episode) -> Result<Classification> {
    let dim = episode
        .support
        .first()
        .map(|s| s.feature.len())
        .ok_or(Error::Empty("episode support set"))?;
    let mut sums = vec![vec![0.0; dim]; episode.way];
    for s in &episode.support {
        if s.feature.len() != dim {
            return Err(Error::shape("support features differ in length"));
        }
        unit(&s.feature, "support feature")?;
        for (a, b) in sums[s.label].iter_mut().zip(&s.feature) {
            *a += b;
        }
    }
    let prototypes = sums
        .iter()
        .map(|p| unit(p, "class prototype"))
        .collect::<Result<Vec<_>>>()?;
    let mut predictions = Vec::with_capacity(episode.query.len());
    let mut correct = 0usize;
    for q in &episode.query {
        if q.feature.len() != dim {
            return Err(Error::shape("query feature length differs from support"));
        }
        let qn = unit(&q.feature, "query feature")?;
        let mut best = (0, f64::NEG_INFINITY);
        for (c, p) in prototypes.iter().enumerate() {
            let s = dot(&qn, p);
            if s > best.1 {
                best = (c, s);
            }
        }
        if best.0 == q.label {
            correct += 1;
        }
        predictions.push(best.0);
    }
    let accuracy = if episode.query.is_empty() {
        0.0
    } else {
        correct as f64 / episode.query.len() as f64
    };
    Ok(Classification { predictions, accuracy })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub mean: f64,
    /// `1.96 · σ / √episodes` with the population standard deviation.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(protocol: Protocol, per_episode: Vec<f64>) -> Result<Self> {
        if per_episode.is_empty() {
            return Err(Error::Empty("episode accuracies"));
        }
        let n = per_episode.len() as f64;
        let mean = kahan_sum(per_episode.iter().copied()) / n;
        let var = kahan_sum(per_episode.iter().map(|a| (a - mean) * (a - mean))) / n;
        Ok(EvalReport {
            protocol,
            mean,
            ci95: 1.96 * var.sqrt() / n.sqrt(),
            per_episode,
        })
    }

    /// Single-line `key=value` summary.
    pub fn summary_line(&self) -> String {
        format!(
            "way={} shot={} queries={} episodes={} accuracy={:.6} ci95={:.6}",
            self.protocol.way,
            self.protocol.shot,
            self.protocol.queries,
            self.per_episode.len(),
            self.mean,
            self.ci95
        )
    }

    /// Tab-separated `episode<TAB>accuracy` rows under a `#` header.
    pub fn per_episode_tsv(&self) -> String {
        let mut out = String::from("# episode\taccuracy\n");
        for (i, a) in self.per_episode.iter().enumerate() {
            writeln!(out, "{i}\t{a:.17}").expect("writing to a string");
        }
        out
    }
}

/// Runs `protocol.episodes` episodes over a precomputed feature bank.
pub fn evaluate_features(bank: &FeatureBank, protocol: Protocol, rng: &mut impl Rng) -> Result<EvalReport> {
    let mut accuracies = Vec::with_capacity(protocol.episodes);
    for _ in 0..protocol.episodes {
        let ep = sample_episode(bank, protocol.way, protocol.shot, protocol.queries, rng)?;
        accuracies.push(cosine_classify(&ep)?.accuracy);
    }
    EvalReport::from_accuracies(protocol, accuracies)
}

/// Extracts a feature for every item, then evaluates episodically.
pub fn evaluate<T>(
    items: &[(T, usize)],
    mut extractor: impl FnMut(&T) -> Result<Vec<f64>>,
    protocol: Protocol,
    rng: &mut impl Rng,
) -> Result<EvalReport> {
    let mut features = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for (item, label) in items {
        features.push(extractor(item)?);
        labels.push(*label);
    }
    evaluate_features(&FeatureBank::new(features, labels)?, protocol, rng)
}
