//! Small trained models used by the examples, the CLI and the tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data_io::{synth_blobs, synth_subspace};
use crate::error::{Error, Result};
use crate::net::{train_fixture, Dataset, LayerWeight, Model, TrainConfig};

/// A trained classifier. `data` comes from the same distribution as `train`
/// but was not used for training; compression and evaluation use `data`.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub model: Model,
    pub train: Dataset,
    pub data: Dataset,
}

/// Hidden widths used when no architecture is given.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 32];

/// `d → 64 → 32 → classes` MLP trained with the default SGD settings.
pub fn train_mlp(data: &Dataset, hidden: &[usize], seed: u64, cfg: &TrainConfig) -> Result<Model> {
    let mut dims = vec![data.dim()];
    dims.extend_from_slice(hidden);
    dims.push(data.num_classes());
    let model = Model::mlp(&dims, seed)?;
    train_fixture(&model, data, &TrainConfig { seed, ..*cfg })
}

/// Ten Gaussian blobs in 20 dimensions; 1500 samples to train on and 1500
/// unseen ones.
pub fn blob_classifier(seed: u64) -> Result<Fixture> {
    let (train, data) = synth_blobs(10, 300, 20, seed)?.split(0.5, seed)?;
    let model = train_mlp(&train, &DEFAULT_HIDDEN, seed, &TrainConfig::default())?;
    Ok(Fixture { model, train, data })
}

/// Inputs confined to a 6-dimensional subspace of a 96-dimensional space
/// (plus faint isotropic noise) and a first layer initialised at rank 4 plus
/// a tiny full-rank jitter. Training moves that layer almost only within the
/// data span, so its weight stays numerically low rank with a random tail.
pub fn rank_deficient_classifier(seed: u64) -> Result<Fixture> {
    rank_deficient_with(seed, 1e-5, 1e-6)
}

/// [`rank_deficient_classifier`] with explicit input noise and weight jitter.
pub fn rank_deficient_with(seed: u64, input_noise: f64, jitter: f64) -> Result<Fixture> {
    let (train, data) = synth_subspace(4, 300, 96, 6, input_noise, seed)?.split(0.5, seed)?;
    let mut model = Model::mlp(&[96, 64, 32, 4], seed)?.with_low_rank_layer(0, 4, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a17);
    let normal = Normal::new(0.0, jitter).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    if let LayerWeight::Dense(w) = &mut model.layers_mut()[0].weight {
        w.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let model = train_fixture(&model, &train, &TrainConfig { seed, ..Default::default() })?;
    Ok(Fixture { model, train, data })
}
