//! Shared fixtures for the benchmarks.

use sbgc::data::GmmSpec;
use sbgc::score::AnalyticGmmScore;
use sbgc::{MlpArch, MlpScoreNet, SdeSpec};

pub fn ring() -> GmmSpec {
    GmmSpec::ring(3, 2, 0.5, 0.25, (-4.0, 4.0))
}

pub fn analytic() -> AnalyticGmmScore {
    ring().analytic_model(SdeSpec::default()).expect("valid mixture")
}

/// An untrained net with the default hidden sizes and a nonzero output
/// head, so solves see a nontrivial field.
pub fn mlp(dim: usize, classes: usize) -> MlpScoreNet {
    let mut net = MlpScoreNet::new(MlpArch::new(dim, classes, vec![128, 128]), SdeSpec::default(), 1).expect("valid arch");
    let n = net.params().len();
    let head = &mut net.params_mut()[n - 2];
    let cols = head.ncols();
    head.indexed_iter_mut()
        .for_each(|((i, j), v)| *v = 0.05 * (((i * cols + j) % 7) as f64 - 3.0));
    net
}
