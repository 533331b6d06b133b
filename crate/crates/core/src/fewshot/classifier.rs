//! Embedding trunk plus a fully connected head trained with cross-entropy.
//! Used for embedding pretraining (single linear layer, head discarded) and
//! as the supervised baseline (three layers).

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::net::{Adam, EmbeddingNet, Linear};
use super::{softmax, FewShotError};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
        }
    }
}

/// Network, head layers (ReLU between them) and the class id of every
/// output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub net: EmbeddingNet,
    pub head: Vec<Linear>,
    pub classes: Vec<usize>,
}

struct HeadCache {
    /// Input of every layer (after the ReLU of the previous one).
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn head_forward(head: &[Linear], embeddings: &[f64], batch: usize) -> HeadCache {
    let mut inputs = Vec::with_capacity(head.len());
    let mut x = embeddings.to_vec();
    for (i, layer) in head.iter().enumerate() {
        let mut y = layer.forward(&x, batch);
        if i + 1 < head.len() {
            for v in &mut y {
                *v = v.max(0.0);
            }
        }
        inputs.push(std::mem::replace(&mut x, y));
    }
    HeadCache { inputs, logits: x }
}

/// Returns head gradients (weight, bias per layer) and the embedding
/// gradient.
fn head_backward(
    head: &[Linear],
    cache: &HeadCache,
    d_logits: Vec<f64>,
    batch: usize,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut grads = vec![Vec::new(); 2 * head.len()];
    let mut dy = d_logits;
    for i in (0..head.len()).rev() {
        let (dw, db, mut dx) = head[i].backward(&cache.inputs[i], &dy, batch);
        grads[2 * i] = dw;
        grads[2 * i + 1] = db;
        if i > 0 {
            // ReLU of the previous layer: its output is this layer's input.
            for (d, x) in dx.iter_mut().zip(&cache.inputs[i]) {
                if *x <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        dy = dx;
    }
    (grads, dy)
}

impl Classifier {
    /// Class probabilities in `classes` order, inference mode.
    pub fn probabilities(&self, input: &Matrix) -> Result<Vec<f64>, FewShotError> {
        let z = self.net.embed(input)?;
        let cache = head_forward(&self.head, &z, 1);
        Ok(softmax(&cache.logits))
    }

    /// Most probable class id (lowest on ties) and the probabilities.
    pub fn predict(&self, input: &Matrix) -> Result<(usize, Vec<f64>), FewShotError> {
        let p = self.probabilities(input)?;
        let best = crate::fusion::argmax(&p);
        Ok((self.classes[best], p))
    }
}

/// Trains `net` with a freshly initialized head of hidden widths `hidden`
/// followed by one output unit per class present in `data`. Returns the
/// classifier and the mean loss of every epoch. Partial batches with fewer
/// than two samples are skipped (batch statistics need two).
pub fn train_classifier(
    net: EmbeddingNet,
    hidden: &[usize],
    data: &[(&Matrix, usize)],
    config: &ClassifierConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Classifier, Vec<f64>), FewShotError> {
    let mut classes: Vec<usize> = data.iter().map(|d| d.1).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(FewShotError::DegenerateTraining(format!(
            "classifier needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    if config.batch_size < 2 {
        return Err(FewShotError::Config("batch size must be at least 2".into()));
    }
    let mut dims = vec![net.embedding_dim()];
    dims.extend_from_slice(hidden);
    dims.push(classes.len());
    let head: Vec<Linear> = dims
        .windows(2)
        .map(|w| Linear::new(w[0], w[1], rng))
        .collect();
    let mut model = Classifier { net, head, classes };
    let targets: Vec<usize> = data
        .iter()
        .map(|d| {
            model
                .classes
                .binary_search(&d.1)
                .expect("class collected above")
        })
        .collect();

    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let b = chunk.len();
            let inputs: Vec<&Matrix> = chunk.iter().map(|&i| data[i].0).collect();
            let x = model.net.input_batch(&inputs)?;
            let fwd = model.net.forward_train(&x, b);
            let cache = head_forward(&model.head, &fwd.embeddings, b);
            let k = model.classes.len();
            let mut loss = 0.0;
            let mut d_logits = Vec::with_capacity(b * k);
            for (row, &i) in cache.logits.chunks(k).zip(chunk) {
                let p = softmax(row);
                let t = targets[i];
                loss -= p[t].max(f64::MIN_POSITIVE).ln();
                d_logits.extend(
                    p.iter()
                        .enumerate()
                        .map(|(c, pc)| (pc - if c == t { 1.0 } else { 0.0 }) / b as f64),
                );
            }
            if !loss.is_finite() {
                return Err(FewShotError::NonFinite {
                    stage: "classifier training",
                    step,
                });
            }
            let (head_grads, d_emb) = head_backward(&model.head, &cache, d_logits, b);
            let mut grads = model.net.backward(&fwd, &d_emb);
            grads.extend(head_grads);
            model.net.commit_batch_stats(&fwd);
            let mut params = model.net.trainable_mut();
            for layer in &mut model.head {
                params.push(&mut layer.weight);
                params.push(&mut layer.bias);
            }
            adam.update(params, &grads, config.learning_rate);
            total += loss;
            seen += b;
            step += 1;
        }
        losses.push(if seen > 0 { total / seen as f64 } else { 0.0 });
    }
    Ok((model, losses))
}
