//! Rough step timings at benchmark scale, for sizing step budgets.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use vcd_core::dataset::{generate, GenConfig};
use vcd_core::models::{ModelDims, MultiRssmModel, ParamStore, RssmModel, VcdModel};
use vcd_core::training::{training_env_specs, TrainConfig, Trainer};

fn main() {
    let data = generate(&GenConfig {
        train_per_env: 20,
        val_per_env: 1,
        ..Default::default()
    })
    .unwrap();
    let dims = ModelDims::default();
    let cfg = TrainConfig::default();
    let n = 20;

    {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let model = VcdModel::new(&mut store, dims, data.envs.len(), &mut rng);
        let specs = training_env_specs(&model, &data).unwrap();
        let mut trainer = Trainer::new(&store, vec![true; store.len()], cfg);
        trainer.step_vcd(&model, &mut store, &specs, data.horizon).unwrap();
        let t0 = Instant::now();
        for _ in 0..n {
            trainer.step_vcd(&model, &mut store, &specs, data.horizon).unwrap();
        }
        println!("vcd step: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let model = RssmModel::new(&mut store, dims, &mut rng);
        let envs: Vec<_> = data.envs.iter().map(|e| e.train.as_slice()).collect();
        let mut trainer = Trainer::new(&store, vec![true; store.len()], cfg);
        trainer.step_rssm(&model, &mut store, &envs, data.horizon).unwrap();
        let t0 = Instant::now();
        for _ in 0..n {
            trainer.step_rssm(&model, &mut store, &envs, data.horizon).unwrap();
        }
        println!("rssm step: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
    }
    {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let model = MultiRssmModel::new(&mut store, dims, data.envs.len(), &mut rng);
        let envs: Vec<_> = data
            .envs
            .iter()
            .enumerate()
            .map(|(e, env)| (e, env.train.as_slice()))
            .collect();
        let mut trainer = Trainer::new(&store, vec![true; store.len()], cfg);
        trainer.step_multi_rssm(&model, &mut store, &envs, data.horizon).unwrap();
        let t0 = Instant::now();
        for _ in 0..n {
            trainer.step_multi_rssm(&model, &mut store, &envs, data.horizon).unwrap();
        }
        println!("multi step: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
    }
}
