//! Prototypical few-shot classification.
//!
//! An [`EmbeddingNet`] maps every correlation feature to a vector; a class
//! prototype is the mean embedding of that class's support samples and a
//! query is assigned to the nearest prototype under squared Euclidean
//! distance. Training first fits the network with a temporary linear
//! classification head and cross-entropy over all training classes, then
//! continues episodically on randomly drawn K-way N-shot tasks.

mod checkpoint;
mod classifier;
mod net;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{decode_model, encode_model, read_model, write_model, SavedModel};
pub use classifier::{train_classifier, Classifier, ClassifierConfig};
pub use net::{Adam, ArchSpec, EmbeddingNet, Linear, BN_EPS, BN_MOMENTUM};

use crate::fusion::ClassProbabilities;
use crate::linalg::Matrix;
use crate::prepare::CorrelationFeature;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FewShotError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("cannot build episode: {0}")]
    Episode(String),
    #[error("degenerate training set: {0}")]
    DegenerateTraining(String),
    #[error("non-finite loss during {stage} at step {step}")]
    NonFinite { stage: &'static str, step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model file: {reason} (byte offset {offset})")]
    Checkpoint { offset: usize, reason: String },
}

/// One K-way N-shot task. Samples are indices into the caller's dataset;
/// episode-local labels `0..way` map to `classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    /// Dataset class id of each local label, ascending.
    pub classes: Vec<usize>,
    /// `(sample index, local label)`, `shot` entries per class.
    pub support: Vec<(usize, usize)>,
    /// `(sample index, local label)`, `queries` entries per class.
    pub query: Vec<(usize, usize)>,
}

/// Draws episodes from a labeled dataset.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl EpisodeSampler {
    /// `labels[i]` is the class of sample `i`.
    pub fn new(labels: &[usize]) -> Self {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        EpisodeSampler { by_class }
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_class.keys().copied()
    }

    pub fn class_count(&self) -> usize {
        self.by_class.len()
    }

    /// Checks that `way` classes exist and every class has at least
    /// `shot + queries` samples.
    pub fn check(&self, way: usize, shot: usize, queries: usize) -> Result<(), FewShotError> {
        if way == 0 || shot == 0 {
            return Err(FewShotError::Config(format!(
                "way and shot must be positive (got {way}-way {shot}-shot)"
            )));
        }
        if self.by_class.len() < way {
            return Err(FewShotError::Episode(format!(
                "{way}-way tasks need {way} classes, dataset has {}",
                self.by_class.len()
            )));
        }
        let need = shot + queries;
        for (class, samples) in &self.by_class {
            if samples.len() < need {
                return Err(FewShotError::Episode(format!(
                    "class {class} has {} samples, {shot} shots + {queries} queries need {need}",
                    samples.len()
                )));
            }
        }
        Ok(())
    }

    pub fn sample(
        &self,
        way: usize,
        shot: usize,
        queries: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Episode, FewShotError> {
        self.check(way, shot, queries)?;
        let all: Vec<usize> = self.by_class.keys().copied().collect();
        let mut classes: Vec<usize> = index::sample(rng, all.len(), way)
            .into_iter()
            .map(|i| all[i])
            .collect();
        classes.sort_unstable();
        let mut support = Vec::with_capacity(way * shot);
        let mut query = Vec::with_capacity(way * queries);
        for (local, class) in classes.iter().enumerate() {
            let pool = &self.by_class[class];
            let picked = index::sample(rng, pool.len(), shot + queries);
            for (j, i) in picked.into_iter().enumerate() {
                if j < shot {
                    support.push((pool[i], local));
                } else {
                    query.push((pool[i], local));
                }
            }
        }
        Ok(Episode {
            way,
            shot,
            queries,
            classes,
            support,
            query,
        })
    }
}

/// Mean embedding of one class's support samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Vec<f64>,
}

/// Prototypes from precomputed embeddings, sorted by class id.
pub fn prototypes_from_embeddings(
    embeddings: &[&[f64]],
    labels: &[usize],
) -> Result<Vec<Prototype>, FewShotError> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(FewShotError::Episode(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let dim = embeddings[0].len();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (z, &l) in embeddings.iter().zip(labels) {
        if z.len() != dim {
            return Err(FewShotError::Shape(format!(
                "embedding of length {} among length {dim}",
                z.len()
            )));
        }
        let entry = sums.entry(l).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in entry.0.iter_mut().zip(z.iter()) {
            *s += v;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(class_id, (sum, n))| Prototype {
            class_id,
            vector: sum.into_iter().map(|s| s / n as f64).collect(),
        })
        .collect())
}

/// Embeds the support set (inference mode) and averages per class.
pub fn compute_prototypes(
    net: &EmbeddingNet,
    support: &[(&Matrix, usize)],
) -> Result<Vec<Prototype>, FewShotError> {
    let inputs: Vec<&Matrix> = support.iter().map(|(m, _)| *m).collect();
    let labels: Vec<usize> = support.iter().map(|(_, l)| *l).collect();
    let z = net.embed_all(&inputs)?;
    let refs: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
    prototypes_from_embeddings(&refs, &labels)
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Softmax over `-d^2` to every prototype, max-shifted. Entries are floored
/// at the smallest positive normal number so none is exactly zero.
pub fn prototype_probabilities(prototypes: &[Prototype], embedding: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = prototypes
        .iter()
        .map(|p| -squared_distance(embedding, &p.vector))
        .collect();
    softmax(&logits)
        .into_iter()
        .map(|p| p.max(f64::MIN_POSITIVE))
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Nearest prototype (lowest class id on ties) and the class probabilities
/// in prototype order.
pub fn classify_embedding(prototypes: &[Prototype], embedding: &[f64]) -> (usize, Vec<f64>) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in prototypes.iter().enumerate() {
        let d = squared_distance(embedding, &p.vector);
        if d < best_d || (d == best_d && p.class_id < prototypes[best].class_id) {
            best = i;
            best_d = d;
        }
    }
    (
        prototypes[best].class_id,
        prototype_probabilities(prototypes, embedding),
    )
}

/// Classifies one feature against the prototypes.
pub fn classify(
    net: &EmbeddingNet,
    prototypes: &[Prototype],
    feature: &CorrelationFeature,
) -> Result<(usize, ClassProbabilities), FewShotError> {
    if prototypes.is_empty() {
        return Err(FewShotError::Episode(
            "no prototypes to classify against".into(),
        ));
    }
    let z = net.embed(&feature.matrix)?;
    let (class, probs) = classify_embedding(prototypes, &z);
    Ok((class, ClassProbabilities::new(feature.receiver_id, probs)))
}

/// Episode loss and its gradients with respect to every embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeLoss {
    pub loss: f64,
    pub d_support: Vec<Vec<f64>>,
    pub d_query: Vec<Vec<f64>>,
}

/// Mean over queries of `-log softmax(-|z_q - p_k|^2)[y_q]`, where the
/// prototypes `p_k` are class means of the support embeddings. Labels are
/// local, `0..way`.
pub fn prototype_loss(
    support: &[&[f64]],
    support_labels: &[usize],
    query: &[&[f64]],
    query_labels: &[usize],
    way: usize,
) -> Result<PrototypeLoss, FewShotError> {
    if query.is_empty() || query.len() != query_labels.len() {
        return Err(FewShotError::Episode(
            "query set is empty or mislabeled".into(),
        ));
    }
    let protos = prototypes_from_embeddings(support, support_labels)?;
    if protos.len() != way || protos.iter().enumerate().any(|(i, p)| p.class_id != i) {
        return Err(FewShotError::Episode(format!(
            "support must cover local labels 0..{way} exactly"
        )));
    }
    let mut counts = vec![0usize; way];
    for &l in support_labels {
        counts[l] += 1;
    }
    let dim = protos[0].vector.len();
    let q = query.len() as f64;
    let mut loss = 0.0;
    let mut d_query = Vec::with_capacity(query.len());
    let mut d_proto = vec![vec![0.0; dim]; way];
    for (z, &y) in query.iter().zip(query_labels) {
        if y >= way {
            return Err(FewShotError::Episode(format!(
                "query label {y} outside 0..{way}"
            )));
        }
        let logits: Vec<f64> = protos
            .iter()
            .map(|p| -squared_distance(z, &p.vector))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - logits[y];
        let mut dz = vec![0.0; dim];
        for (k, p) in protos.iter().enumerate() {
            let prob = (logits[k] - lse).exp();
            let g = (prob - if k == y { 1.0 } else { 0.0 }) / q;
            if g == 0.0 {
                continue;
            }
            for i in 0..dim {
                let diff = z[i] - p.vector[i];
                dz[i] -= 2.0 * g * diff;
                d_proto[k][i] += 2.0 * g * diff;
            }
        }
        d_query.push(dz);
    }
    let d_support = support_labels
        .iter()
        .map(|&l| d_proto[l].iter().map(|g| g / counts[l] as f64).collect())
        .collect();
    Ok(PrototypeLoss {
        loss: loss / q,
        d_support,
        d_query,
    })
}

/// Batch layout of an episode: support first, then query.
fn episode_inputs<'a>(
    episode: &Episode,
    inputs: &[&'a Matrix],
) -> Result<Vec<&'a Matrix>, FewShotError> {
    episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|&(i, _)| {
            inputs
                .get(i)
                .copied()
                .ok_or_else(|| FewShotError::Episode(format!("sample index {i} out of range")))
        })
        .collect()
}

fn split_loss(
    net: &EmbeddingNet,
    episode: &Episode,
    embeddings: &[f64],
) -> Result<PrototypeLoss, FewShotError> {
    let d = net.embedding_dim();
    let rows: Vec<&[f64]> = embeddings.chunks(d).collect();
    let ns = episode.support.len();
    let s_labels: Vec<usize> = episode.support.iter().map(|s| s.1).collect();
    let q_labels: Vec<usize> = episode.query.iter().map(|s| s.1).collect();
    prototype_loss(&rows[..ns], &s_labels, &rows[ns..], &q_labels, episode.way)
}

/// Episode loss with support and query embedded together in one
/// training-mode batch (batch statistics, no state change).
pub fn episode_loss(
    net: &EmbeddingNet,
    episode: &Episode,
    inputs: &[&Matrix],
) -> Result<f64, FewShotError> {
    let batch = episode_inputs(episode, inputs)?;
    let x = net.input_batch(&batch)?;
    let fwd = net.forward_train(&x, batch.len());
    Ok(split_loss(net, episode, &fwd.embeddings)?.loss)
}

/// Loss and parameter gradients of one episode (weight, bias, gamma, beta
/// per block).
pub fn episode_gradients(
    net: &EmbeddingNet,
    episode: &Episode,
    inputs: &[&Matrix],
) -> Result<(f64, Vec<Vec<f64>>), FewShotError> {
    let (loss, grads, _) = episode_step(net, episode, inputs)?;
    Ok((loss, grads))
}

fn episode_step(
    net: &EmbeddingNet,
    episode: &Episode,
    inputs: &[&Matrix],
) -> Result<(f64, Vec<Vec<f64>>, net::TrainForward), FewShotError> {
    let batch = episode_inputs(episode, inputs)?;
    let x = net.input_batch(&batch)?;
    let fwd = net.forward_train(&x, batch.len());
    let pl = split_loss(net, episode, &fwd.embeddings)?;
    let d_emb: Vec<f64> = pl
        .d_support
        .into_iter()
        .chain(pl.d_query)
        .flatten()
        .collect();
    let grads = net.backward(&fwd, &d_emb);
    Ok((pl.loss, grads, fwd))
}

/// Mutable access to the trainable tensors, for tests that perturb them.
pub fn trainable_parameters(net: &mut EmbeddingNet) -> Vec<&mut Vec<f64>> {
    net.trainable_mut()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_halving_interval: usize,
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            lr_halving_interval: 2000,
            episodes: 500,
            way: 4,
            shot: 5,
            queries: 5,
            seed: 0,
            pretrain_epochs: 30,
            pretrain_batch: 32,
        }
    }
}

impl TrainConfig {
    /// `learning_rate * 0.5^floor(episode / lr_halving_interval)`.
    pub fn learning_rate_at(&self, episode: usize) -> f64 {
        let halvings = episode / self.lr_halving_interval.max(1);
        self.learning_rate * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
    }

    fn validate(&self) -> Result<(), FewShotError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FewShotError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.lr_halving_interval == 0 {
            return Err(FewShotError::Config(
                "lr halving interval must be positive".into(),
            ));
        }
        if self.pretrain_batch < 2 {
            return Err(FewShotError::Config(
                "pretraining batch must hold at least 2 samples".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean cross-entropy per pretraining epoch.
    pub pretrain_losses: Vec<f64>,
    pub episodes: Vec<EpisodeRecord>,
}

impl TrainLog {
    /// `episode,loss,lr` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,loss,lr\n");
        for r in &self.episodes {
            let _ = writeln!(out, "{},{},{}", r.episode, r.loss, r.lr);
        }
        out
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fresh network for `arch`, seeded.
pub fn init_net(arch: ArchSpec, seed: u64) -> Result<EmbeddingNet, FewShotError> {
    EmbeddingNet::new(arch, &mut rng_stream(seed, 1))
}

/// Cross-entropy pretraining with a temporary linear head over the training
/// classes; the head is dropped afterwards. Returns the mean loss of each
/// epoch.
pub fn pretrain_embedding(
    data: &[(&Matrix, usize)],
    arch: ArchSpec,
    config: &TrainConfig,
) -> Result<(EmbeddingNet, Vec<f64>), FewShotError> {
    config.validate()?;
    let net = init_net(arch, config.seed)?;
    let classes: std::collections::BTreeSet<usize> = data.iter().map(|d| d.1).collect();
    if classes.len() < 2 {
        return Err(FewShotError::DegenerateTraining(format!(
            "pretraining needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    if config.pretrain_epochs == 0 {
        return Ok((net, Vec::new()));
    }
    let cfg = ClassifierConfig {
        epochs: config.pretrain_epochs,
        batch_size: config.pretrain_batch,
        learning_rate: config.learning_rate,
    };
    let mut rng = rng_stream(config.seed, 2);
    let (classifier, losses) = train_classifier(net, &[], data, &cfg, &mut rng)?;
    Ok((classifier.net, losses))
}

/// Pretraining followed by `config.episodes` episodic updates.
pub fn train(
    data: &[CorrelationFeature],
    arch: ArchSpec,
    config: &TrainConfig,
) -> Result<(EmbeddingNet, TrainLog), FewShotError> {
    config.validate()?;
    let mut labeled = Vec::with_capacity(data.len());
    for (i, f) in data.iter().enumerate() {
        let l = f
            .label
            .ok_or_else(|| FewShotError::DegenerateTraining(format!("feature {i} has no label")))?;
        labeled.push((&f.matrix, l));
    }
    let labels: Vec<usize> = labeled.iter().map(|d| d.1).collect();
    let sampler = EpisodeSampler::new(&labels);
    if config.episodes > 0 {
        sampler.check(config.way, config.shot, config.queries)?;
    }

    let (mut net, pretrain_losses) = pretrain_embedding(&labeled, arch, config)?;
    let inputs: Vec<&Matrix> = labeled.iter().map(|d| d.0).collect();
    let mut rng = rng_stream(config.seed, 3);
    let mut adam = Adam::default();
    let mut episodes = Vec::with_capacity(config.episodes);
    for e in 0..config.episodes {
        let episode = sampler.sample(config.way, config.shot, config.queries, &mut rng)?;
        let (loss, grads, fwd) = episode_step(&net, &episode, &inputs)?;
        if !loss.is_finite() {
            return Err(FewShotError::NonFinite {
                stage: "episodic training",
                step: e,
            });
        }
        let lr = config.learning_rate_at(e);
        net.commit_batch_stats(&fwd);
        adam.update(net.trainable_mut(), &grads, lr);
        episodes.push(EpisodeRecord {
            episode: e,
            loss,
            lr,
        });
    }
    Ok((
        net,
        TrainLog {
            pretrain_losses,
            episodes,
        },
    ))
}
