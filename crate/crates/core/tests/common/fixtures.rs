//! Small models and datasets that train in well under a second, plus the
//! end-to-end finite-difference check of the training objective.

use hoi_core::data::{generate_dataset, Dataset, GeneratorConfig};
use hoi_core::deq::DeqConfig;
use hoi_core::losses::LossWeights;
use hoi_core::model::{LatentDims, Model, ModelConfig};
use hoi_core::nn::Binding;
use hoi_core::train::TrainConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_sa_blocks: 1,
        depth: 1,
        ffn_mult: 2,
        latent: LatentDims::uniform(4),
        heatmap_height: 16,
        heatmap_width: 16,
        n_verbs: 4,
        n_nouns: 4,
        ..ModelConfig::default()
    }
}

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        n_train: 24,
        n_test: 8,
        n_verbs: 4,
        n_nouns: 4,
        ..GeneratorConfig::default()
    }
}

pub fn tiny_data(seed: u64) -> Dataset {
    generate_dataset(&tiny_generator(), seed).unwrap()
}

pub fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

/// Compares the tape gradient of the full training objective on a frozen
/// two-sample batch against central differences (step 1e-5) on `count`
/// randomly chosen scalars. Latent noise is replayed from a fixed seed and
/// the equilibrium is solved tightly so the implicit gradient is exact.
/// Scalars whose gradient is below 1e-4 are skipped: there the relative
/// error measures only finite-difference round-off.
///
/// Returns the worst relative error.
pub fn end_to_end_grad_check(seed: u64, count: usize) -> f64 {
    let cfg = ModelConfig {
        deq: DeqConfig {
            tol: 1e-12,
            max_iter: 400,
            adjoint_max_iter: 400,
            ..DeqConfig::default()
        },
        ..tiny_model()
    };
    let data = tiny_data(seed);
    let model = Model::new(&cfg, seed).unwrap();
    let batch = model.batch(&[&data.train[0], &data.train[1]]).unwrap();
    let weights = LossWeights::default();
    // Loss value, and the gradients when `track` is set.
    let loss_with = |store: &hoi_core::nn::ParamStore, track: bool| {
        let p = Binding::new(store, track);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let (loss, _) = model.loss(&p, &batch, &weights, &mut rng).unwrap();
        let value = loss.item().unwrap();
        if track {
            loss.backward().unwrap();
        }
        (value, p.grads())
    };
    let grads = loss_with(&model.store, true).1;

    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for (k, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            for (j, &v) in g.iter().enumerate() {
                if v.abs() >= 1e-4 {
                    candidates.push((k, j, v));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    assert!(candidates.len() >= count, "only {} scalars carry gradient", candidates.len());

    let ids: Vec<_> = model.store.ids().collect();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for &(k, j, analytic) in candidates.iter().take(count) {
        let mut store = model.store.clone();
        let orig = store.entry(ids[k]).values[j];
        store.entry_mut(ids[k]).values[j] = orig + step;
        let up = hoi_autodiff::no_grad(|| loss_with(&store, false).0);
        store.entry_mut(ids[k]).values[j] = orig - step;
        let down = hoi_autodiff::no_grad(|| loss_with(&store, false).0);
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
    }
    worst
}
