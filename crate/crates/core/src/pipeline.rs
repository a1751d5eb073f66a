//! End-to-end helpers chaining network features, transfer training,
//! prediction and boundary evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{evaluate_boundaries, nms_thin, MatchConfig, PRCurve};
use crate::error::{invalid, Result};
use crate::grid::ImageGrid;
use crate::network::{FeatureStack, Network};
use crate::seed::derive_seed;
use crate::transfer::{
    build_adaptive_kernel, default_schedule, default_sigma, predict_labeling, sample_training_pairs,
    train_transfer, Balance, DensityStep, TransferConfig, TransferModel,
};

/// Everything needed to fit the transfer stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSettings {
    /// Output patch side.
    pub side: usize,
    /// Kernel width; `side / 4` when absent.
    pub sigma: Option<f64>,
    /// Kernel thinning; the default schedule for `side` when absent.
    pub schedule: Option<Vec<DensityStep>>,
    /// Training pairs drawn from the corpus.
    pub samples: usize,
    /// Fraction of pairs centered on positive pixels (`None` samples
    /// uniformly).
    pub positive_fraction: Option<f64>,
    pub solver: TransferConfig,
}

impl Default for TransferSettings {
    fn default() -> Self {
        Self {
            side: 21,
            sigma: None,
            schedule: None,
            samples: 20_000,
            positive_fraction: Some(0.5),
            solver: TransferConfig::default(),
        }
    }
}

impl TransferSettings {
    pub fn balance(&self) -> Balance {
        self.positive_fraction.map_or(Balance::None, Balance::Positive)
    }
}

/// Features of every image.
pub fn compute_features(net: &Network, images: &[ImageGrid]) -> Result<Vec<FeatureStack>> {
    images.iter().map(|img| net.forward(img)).collect()
}

/// Fits a transfer model from precomputed features. `seed` drives both
/// pair sampling and, unless `settings.solver.drop_seed` is nonzero, the
/// feature drop masks.
pub fn fit_transfer(
    stacks: &[FeatureStack],
    truths: &[ImageGrid],
    settings: &TransferSettings,
    seed: u64,
) -> Result<TransferModel> {
    let sigma = settings.sigma.unwrap_or_else(|| default_sigma(settings.side));
    let schedule = settings.schedule.clone().unwrap_or_else(|| default_schedule(settings.side));
    let kernel = build_adaptive_kernel(settings.side, sigma, &schedule)?;
    let data = sample_training_pairs(
        stacks,
        truths,
        settings.side,
        settings.samples,
        derive_seed(seed, "transfer/pairs"),
        settings.balance(),
    )?;
    let mut solver = settings.solver.clone();
    if solver.drop_seed == 0 {
        solver.drop_seed = derive_seed(seed, "transfer/drop");
    }
    train_transfer(&data, &kernel, &solver)
}

/// Predicted label maps for precomputed features.
pub fn predict_all(stacks: &[FeatureStack], model: &TransferModel) -> Result<Vec<ImageGrid>> {
    stacks.iter().map(|s| predict_labeling(s, model)).collect()
}

/// Thins single-channel predictions and scores them against truths.
pub fn benchmark_predictions(
    predictions: &[ImageGrid],
    truths: &[Vec<ImageGrid>],
    cfg: &MatchConfig,
) -> Result<PRCurve> {
    if predictions.len() != truths.len() {
        return Err(invalid("prediction and truth counts differ"));
    }
    let thinned: Vec<ImageGrid> = predictions
        .par_iter()
        .map(nms_thin)
        .collect::<Result<_>>()?;
    let items: Vec<(ImageGrid, Vec<ImageGrid>)> = thinned.into_iter().zip(truths.iter().cloned()).collect();
    evaluate_boundaries(&items, cfg)
}
