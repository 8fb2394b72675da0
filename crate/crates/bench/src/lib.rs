//! Shared fixtures for the benchmarks under `benches/`.

use mcva_core::costvol::CostVolume;
use mcva_core::masking::{default_side_range, MaskPyramidSet, MaskStrategy};
use mcva_core::model::{Model, ModelConfig};
use mcva_core::rng::rng_for;
use mcva_core::synthdata::{make_scene, MotionParams, ScenePair};
use mcva_core::{ParamStore, Tensor};
use rand::Rng;

/// The acceptance-scale model: 64×64 frames give a 16×16 grid.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        feature_dim: 32,
        context_dim: 16,
        cost_dim: 16,
        num_latents: 4,
        token_dim: 32,
        agt_pairs: 1,
        ffn_hidden: 64,
        head_hidden: 64,
        gru_hidden: 32,
        encoder_seed: 1234,
    }
}

pub fn uniform(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = rng_for(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("sizes agree")
}

/// A built model with `count` scene pairs and their cost volumes.
pub struct Fixture {
    pub model: Model,
    pub store: ParamStore,
    pub pairs: Vec<ScenePair>,
    pub volumes: Vec<CostVolume>,
}

impl Fixture {
    pub fn new(count: u64, size: usize) -> Self {
        let (model, store) = Model::build::<f32>(&desk_model(), 0).expect("valid config");
        let pairs: Vec<_> = (0..count)
            .map(|i| make_scene(i, size, size, 0.01, &MotionParams::default()))
            .collect();
        let volumes = pairs
            .iter()
            .map(|p| model.cost_volume(&store, &p.frame1, &p.frame2).expect("frame sizes"))
            .collect();
        Fixture {
            model,
            store,
            pairs,
            volumes,
        }
    }

    /// Block-sharing masks at ratio 0.5 for every volume.
    pub fn masks(&self, seed: u64) -> Vec<MaskPyramidSet> {
        let mut rng = rng_for(seed, &[]);
        self.volumes
            .iter()
            .map(|v| {
                let src = v.source_dims();
                MaskStrategy::Block
                    .generate(src, v.map_dims(), 0.5, default_side_range(src.0, src.1), &mut rng)
                    .expect("valid ratio")
                    .expect("block strategy masks")
            })
            .collect()
    }
}
