//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use semrec::embed::Embedding;
use semrec::fusion::{AttentionParams, FusedUserVector, UserReviews};
use semrec::linalg;
use semrec::rqvae::{init_codebooks, ForwardState, Gradients, RqvaeConfig, RqvaeModel};

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;

/// `n` points around `clusters` random unit centers, noise sd 0.02.
pub fn clustered(n: usize, dim: usize, clusters: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let centers: Vec<Vec<f64>> = (0..clusters)
        .map(|_| {
            let c: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let n = linalg::norm(&c);
            c.into_iter().map(|v| v / n).collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            centers[i % clusters]
                .iter()
                .map(|c| c + 0.02 * normal.sample(&mut rng))
                .collect()
        })
        .collect()
}

/// Index of the closest row by a plain scan; first index wins ties.
pub fn nearest_oracle(rows: &[Vec<f64>], r: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, row) in rows.iter().enumerate() {
        let mut d = 0.0;
        for j in 0..r.len() {
            d += (row[j] - r[j]) * (row[j] - r[j]);
        }
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Everything the loss treats as constant, captured at one forward pass.
pub struct Frozen {
    target: Vec<f64>,
    codes: Vec<usize>,
    residuals: Vec<Vec<f64>>,
    codewords: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

pub fn freeze(model: &RqvaeModel, state: &ForwardState) -> Frozen {
    let codewords: Vec<Vec<f64>> = model
        .stack
        .levels
        .iter()
        .zip(&state.quant.codes)
        .map(|(cb, &d)| cb.vector(d).to_vec())
        .collect();
    Frozen {
        target: state.target.clone(),
        codes: state.quant.codes.clone(),
        residuals: state.quant.residuals.clone(),
        codewords,
        offset: linalg::sub(&state.quant.quantized, state.z()),
    }
}

/// Loss with frozen assignments: the straight-through decoder input is
/// z + (z_q - z) with the offset held fixed.
pub fn surrogate(model: &RqvaeModel, input: &[f64], f: &Frozen) -> f64 {
    let z = model.encoder.forward(input).output;
    let dec_in: Vec<f64> = z.iter().zip(&f.offset).map(|(a, b)| a + b).collect();
    let x_hat = model.decoder.forward(&dec_in).output;
    let mut loss = linalg::squared_distance(&f.target, &x_hat);
    let mut live = z.clone();
    for (level, &d) in f.codes.iter().enumerate() {
        let v_live = model.stack.levels[level].vector(d);
        loss += linalg::squared_distance(&f.residuals[level], v_live);
        loss += model.beta * linalg::squared_distance(&live, &f.codewords[level]);
        live = linalg::sub(&live, &f.codewords[level]);
    }
    loss
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn central<F: Fn(f64) -> f64>(f: F) -> f64 {
    (f(STEP) - f(-STEP)) / (2.0 * STEP)
}

/// D=4, hidden 5, d_code=3, K=4, p=2, codebooks nudged off k-means.
pub fn tiny_model(seed: u64) -> RqvaeModel {
    let config = RqvaeConfig {
        input_dim: 4,
        hidden_dim: 5,
        code_dim: 3,
        codebook_size: 4,
        levels: 2,
        beta: 0.25,
    };
    let mut model = RqvaeModel::new(&config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<Vec<f64>> = (0..12)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    init_codebooks(&mut model, &data, 5, &mut rng);
    for cb in model.stack.levels.iter_mut() {
        for v in cb.vectors.data.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    model
}

/// Worst relative error over encoder, decoder and codebook parameters.
pub fn model_gradient_error(model: &RqvaeModel, input: &[f64]) -> f64 {
    let state = model.forward(input, input).unwrap();
    let frozen = freeze(model, &state);
    let mut grads = Gradients::zeros_like(model);
    model.backward(&state, &mut grads);
    let mut worst: f64 = 0.0;
    for which in 0..2 {
        for block in 0..4 {
            let analytic = if which == 0 {
                grads.encoder.params()[block].to_vec()
            } else {
                grads.decoder.params()[block].to_vec()
            };
            for (k, a) in analytic.iter().enumerate() {
                let numeric = central(|h| {
                    let mut m = model.clone();
                    let mlp = if which == 0 {
                        &mut m.encoder
                    } else {
                        &mut m.decoder
                    };
                    mlp.params_mut()[block][k] += h;
                    surrogate(&m, input, &frozen)
                });
                worst = worst.max(rel_err(*a, numeric));
            }
        }
    }
    for (level, g) in grads.codebooks.iter().enumerate() {
        for (k, a) in g.data.iter().enumerate() {
            let numeric = central(|h| {
                let mut m = model.clone();
                m.stack.levels[level].vectors.data[k] += h;
                surrogate(&m, input, &frozen)
            });
            worst = worst.max(rel_err(*a, numeric));
        }
    }
    worst
}

/// Worst relative error of the attention-matrix gradient, with the
/// reconstruction target frozen at the unperturbed fused vector.
pub fn attention_gradient_error(model: &RqvaeModel, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_emb =
        || Embedding::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let user = UserReviews {
        user_id: "u".into(),
        reviews: (0..3).map(|_| random_emb()).collect(),
        id_vec: random_emb(),
    };
    let attention = AttentionParams::init(4, seed + 5);
    let x = attention.fuse(&user).unwrap().x.into_inner();
    let state = model.forward(&x, &x).unwrap();
    let frozen = freeze(model, &state);
    let mut grads = Gradients::zeros_like(model);
    model.backward(&state, &mut grads);
    let analytic = attention
        .fusion_grad(&user.reviews, &user.id_vec, &grads.input)
        .unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..16 {
        let numeric = central(|h| {
            let mut a = attention.clone();
            a.a.data[k] += h;
            let input = a.fuse(&user).unwrap().x.into_inner();
            surrogate(model, &input, &frozen)
        });
        worst = worst.max(rel_err(analytic.data[k], numeric));
    }
    worst
}

/// Small model with k-means codebooks, for indexing stress tests.
pub fn index_model(k: usize, p: usize, seed: u64) -> RqvaeModel {
    let config = RqvaeConfig {
        input_dim: 4,
        hidden_dim: 8,
        code_dim: 3,
        codebook_size: k,
        levels: p,
        beta: 0.25,
    };
    let mut model = RqvaeModel::new(&config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    init_codebooks(&mut model, &data, 10, &mut rng);
    model
}

/// `n` users drawn from only `distinct` different vectors.
pub fn duplicated_users(n: usize, distinct: usize, seed: u64) -> Vec<FusedUserVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<Vec<f64>> = (0..distinct)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (0..n)
        .map(|i| FusedUserVector {
            user_id: format!("user{:04}", (i * 7919) % n),
            x: Embedding::new(pool[i % distinct].clone()).unwrap(),
        })
        .collect()
}

fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn all_tuples(k: usize, p: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..p {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..k).map(move |c| {
                    let mut t = t.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
    }
    out
}

/// Problems with a collision resolution: non-injective output, a kept tuple
/// that changed, or a displaced user placed farther (in Hamming distance)
/// than the nearest tuple free at its turn. Exhaustive over all K^p tuples.
pub fn resolution_violations(
    k: usize,
    p: usize,
    raw: &BTreeMap<String, Vec<usize>>,
    resolved: &BTreeMap<String, Vec<usize>>,
) -> Vec<String> {
    let mut problems = Vec::new();
    let distinct: HashSet<&Vec<usize>> = resolved.values().collect();
    if distinct.len() != resolved.len() || resolved.len() != raw.len() {
        problems.push(format!(
            "{} users but {} distinct ids",
            raw.len(),
            distinct.len()
        ));
    }
    let mut first_of: BTreeMap<&Vec<usize>, &String> = BTreeMap::new();
    for (user, codes) in raw {
        first_of.entry(codes).or_insert(user);
    }
    let mut taken: HashSet<Vec<usize>> = HashSet::new();
    for (codes, user) in &first_of {
        if &resolved[*user] != *codes {
            problems.push(format!("{user} kept a unique tuple but it changed"));
        }
        taken.insert((*codes).clone());
    }
    let tuples = all_tuples(k, p);
    for (user, codes) in raw {
        if first_of[codes] == user {
            continue;
        }
        let best = tuples
            .iter()
            .filter(|t| !taken.contains(*t))
            .map(|t| hamming(t, codes))
            .min()
            .unwrap_or(usize::MAX);
        let got = &resolved[user];
        if taken.contains(got) {
            problems.push(format!("{user} got a taken tuple"));
        }
        if hamming(got, codes) != best {
            problems.push(format!(
                "{user}: distance {} but {best} was free",
                hamming(got, codes)
            ));
        }
        taken.insert(got.clone());
    }
    problems
}
