//! Supervised CNN baseline: the embedding trunk followed by a three-layer
//! fully connected head, trained end to end with cross-entropy on the
//! source environment and applied to new environments without adaptation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::fewshot::{
    init_net, train_classifier, ArchSpec, Classifier, ClassifierConfig, FewShotError,
};
use crate::linalg::Matrix;
use crate::prepare::CorrelationFeature;

/// Hidden widths of the head; the output layer has one unit per class.
pub const BASELINE_HIDDEN: [usize; 2] = [64, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Trains the baseline on labeled features. Zero epochs returns the
/// randomly initialized model.
pub fn train_baseline(
    data: &[CorrelationFeature],
    arch: ArchSpec,
    config: &BaselineConfig,
) -> Result<(Classifier, Vec<f64>), FewShotError> {
    let mut labeled: Vec<(&Matrix, usize)> = Vec::with_capacity(data.len());
    for (i, f) in data.iter().enumerate() {
        let l = f
            .label
            .ok_or_else(|| FewShotError::DegenerateTraining(format!("feature {i} has no label")))?;
        labeled.push((&f.matrix, l));
    }
    let net = init_net(arch, config.seed ^ 0x5eed_ba5e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(7);
    let cfg = ClassifierConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
    };
    train_classifier(net, &BASELINE_HIDDEN, &labeled, &cfg, &mut rng)
}
