#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satnerf_core::rpc::RpcModel;
use satnerf_core::synth::{fabricate_rpc, SceneSpec};

/// A desk-scene camera with small random cubic terms added to every
/// polynomial, so that localization has to iterate.
pub fn cubic_rpc(view: usize, seed: u64) -> RpcModel {
    let spec = SceneSpec::default();
    let mut rpc = fabricate_rpc(&spec, &spec.views[view]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in rpc.line_num.iter_mut().chain(rpc.samp_num.iter_mut()) {
        *c += rng.random_range(-2e-3..2e-3);
    }
    for c in rpc.line_den.iter_mut().skip(1).chain(rpc.samp_den.iter_mut().skip(1)) {
        *c += rng.random_range(-1e-3..1e-3);
    }
    rpc.inverse = None;
    rpc
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
