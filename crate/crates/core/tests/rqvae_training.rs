mod common;

use common::clustered;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semrec::linalg;
use semrec::rqvae::{init_codebooks, train, RqvaeConfig, RqvaeModel, TrainConfig};

fn small_config() -> RqvaeConfig {
    RqvaeConfig {
        input_dim: 16,
        hidden_dim: 24,
        code_dim: 8,
        codebook_size: 16,
        levels: 3,
        beta: 0.25,
    }
}

#[test]
fn repeated_vector_is_memorized() {
    let x = clustered(1, 64, 1, 1).remove(0);
    let inputs = vec![x; 64];
    let mut model = RqvaeModel::new(&RqvaeConfig::new(64), 1).unwrap();
    let config = TrainConfig {
        epochs: 50,
        batch_size: 8,
        lr: 0.01,
        seed: 3,
        ..TrainConfig::default()
    };
    let trace = train(&mut model, &inputs, &config).unwrap();
    let last = trace.last().unwrap();
    assert!(last.recon < 1e-6, "final recon {}", last.recon);
}

#[test]
fn same_seed_same_trace() {
    let data = clustered(200, 16, 4, 2);
    let config = TrainConfig {
        epochs: 5,
        batch_size: 16,
        lr: 0.01,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = RqvaeModel::new(&small_config(), 4).unwrap();
        let trace = train(&mut model, &data, &config).unwrap();
        (trace, model)
    };
    let (t1, m1) = run();
    let (t2, m2) = run();
    assert_eq!(t1, t2);
    assert_eq!(m1, m2);
}

#[test]
fn reconstruction_improves_on_clusters() {
    let data = clustered(400, 16, 4, 5);
    let mut model = RqvaeModel::new(&small_config(), 0).unwrap();
    let config = TrainConfig {
        epochs: 20,
        batch_size: 16,
        lr: 0.01,
        seed: 1,
        ..TrainConfig::default()
    };
    let trace = train(&mut model, &data, &config).unwrap();
    assert!(trace.last().unwrap().recon <= 0.5 * trace[0].recon);
    assert!(trace.iter().all(|e| e.recon >= 0.0 && e.rq >= 0.0));
}

#[test]
fn kmeans_initialization_refines_monotonically() {
    let data = clustered(300, 16, 6, 8);
    let mut model = RqvaeModel::new(&small_config(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    init_codebooks(&mut model, &data, 10, &mut rng);
    let quantized: Vec<_> = data
        .iter()
        .map(|x| model.stack.quantize(&model.encode(x)))
        .collect();
    let mean_level = |l: usize| {
        quantized
            .iter()
            .map(|q| linalg::squared_norm(&q.residuals[l]))
            .sum::<f64>()
            / quantized.len() as f64
    };
    for l in 0..model.stack.depth() {
        assert!(mean_level(l + 1) <= mean_level(l), "level {l}");
    }
}
