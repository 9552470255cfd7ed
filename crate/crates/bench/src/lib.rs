//! Shared fixtures for the benchmarks.

use discogp::mask::{MaskLogits, MaskMode};
use discogp::model::{GraphTopology, ModelConfig, ModelParams, WeightLayout};
use discogp::taskgen::{Suite, TaskExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The acceptance model shape on the IOI vocabulary, randomly initialized.
pub struct Fixture {
    pub params: ModelParams,
    pub topology: GraphTopology,
    pub layout: WeightLayout,
    pub logits: MaskLogits,
    pub examples: Vec<TaskExample>,
}

pub fn fixture(mode: MaskMode) -> Fixture {
    let (vocab, data) = Suite::Ioi.generate(64, 5).unwrap();
    let config = ModelConfig {
        layers: 4,
        heads: 4,
        d_model: 128,
        d_head: 32,
        d_ff: 256,
        vocab: vocab.len(),
        max_seq: 24,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = ModelParams::init(config, &mut rng).unwrap();
    let topology = GraphTopology::build(&config);
    let layout = WeightLayout::new(&config, &topology);
    let mut logits = MaskLogits::new(mode, 0.5, 1.0, &topology, &layout).unwrap();
    for l in logits.weight_logits.iter_mut().chain(logits.edge_logits.iter_mut()) {
        *l = rng.random_range(-1.0..3.0);
    }
    Fixture {
        params,
        topology,
        layout,
        logits,
        examples: data.examples,
    }
}
