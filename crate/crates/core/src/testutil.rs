use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{PrunedConvLayer, PRUNED};
use crate::scp::canonical_scp_set;

/// Canonical-pattern layer with each kernel pruned with probability `prune_p`.
pub(crate) fn random_pruned(rng: &mut ChaCha8Rng, f: usize, c: usize, prune_p: f64) -> PrunedConvLayer {
    let ids: Vec<u8> = (0..f * c).map(|_| if rng.gen_bool(prune_p) { PRUNED } else { rng.gen_range(0..4) }).collect();
    let retained = ids.iter().filter(|&&i| i != PRUNED).count();
    let w = (0..retained * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = (0..f).map(|_| rng.gen_range(-0.1..0.1)).collect();
    PrunedConvLayer::new(f, c, canonical_scp_set(), ids, w, b, false).unwrap()
}
