use std::sync::Arc;
use sns_core::dynamics::SimConfig;
use sns_core::ergodicity::{duhamel_residual, EnsembleConfig, Observable};
use sns_core::field::GalerkinField;
use sns_core::lattice::{enumerate_modes, ModeIndex};
use sns_core::noise::{build_covariance, NoiseStream};
use sns_core::nonlinearity::InteractionTable;

fn main() {
    let modes = enumerate_modes(2).unwrap();
    let table = InteractionTable::new(&modes);
    let q = Arc::new(build_covariance(&modes, 1, 1.4).unwrap());
    let stream = NoiseStream::new(1008, 0).fork(9);
    let mut x0 = GalerkinField::zero(modes.clone());
    for idx in 0..modes.len() {
        let (a, b) = stream.normal_pair(0, idx as u32);
        x0.set_coeff(idx, [a, b]);
    }
    let x0 = x0.scaled(0.5 / x0.enstrophy().sqrt());
    let phi = Observable::bounded_coefficient(ModeIndex::new([1, 0, 1]).unwrap(), 0, 0.4);
    for seed in [84u64, 301, 302, 303, 304, 305, 306, 307] {
        let ens = EnsembleConfig {
            base: SimConfig { m: 2, dt: 5e-3, horizon: 0.25, fk_coeff: 10.0, seed, replica: 0, snapshot_stride: None },
            replicas: 10_000,
            replica_offset: 0,
            exclude_blowups: false,
        };
        let rep = duhamel_residual(&table, &q, &x0, &phi, &ens).unwrap();
        println!("seed={seed}: residual {:+.3e}  stderr {:.3e}  ratio {:+.2}", rep.residual, rep.stderr, rep.residual/rep.stderr);
    }
}
