//! Shared fixtures for the criterion benches.

use deltaedit::numerics::Init;
use deltaedit::training::PairBatch;
use deltaedit::world::gen_world;
use deltaedit::{EmbeddingDataset, MapperArch, MapperParams, SyntheticWorld, WorldConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub world: SyntheticWorld,
    pub dataset: EmbeddingDataset,
    pub params: MapperParams,
    pub images: Array2<f64>,
    pub styles: Array2<f64>,
}

impl Fixture {
    /// Default world with `records` samples and a freshly initialised mapper.
    pub fn new(records: usize) -> Self {
        let world = gen_world(&WorldConfig::default(), 1).expect("default world");
        let dataset = world.gen_dataset(records, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = MapperArch::new(world.layout(), world.clip_dim());
        let params = MapperParams::new(arch, Init::KaimingUniform, &mut rng).expect("mapper");
        let images = dataset.images().mapv(f64::from);
        let styles = dataset.styles().mapv(f64::from);
        Self {
            world,
            dataset,
            params,
            images,
            styles,
        }
    }

    /// Consecutive `(k, k + 1)` pairs, wrapping at the end.
    pub fn batch(&self, size: usize) -> PairBatch {
        let n = self.dataset.len();
        let pairs = (0..size).map(|k| (k % n, (k + 1) % n)).collect();
        PairBatch::gather(&self.images, &self.styles, pairs)
    }
}
