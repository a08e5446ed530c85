#![allow(dead_code)]

use kdpcf_core::data::{build_matrix, load_movielens};
use kdpcf_core::{rng, RatingMatrix, UserId};
use rand::Rng;
use std::path::PathBuf;

/// Random matrix of `users` users over `items` items; every user rates at
/// least three items so similarities are informative.
pub fn random_matrix(seed: u64, users: u32, items: u32, density: f64) -> RatingMatrix {
    let mut rng = rng::seeded(seed);
    let mut triples = Vec::new();
    for u in 1..=users {
        let mut rated = 0;
        for i in 1..=items {
            if rng.random::<f64>() < density || (items - i) < 3 - rated.min(3) {
                triples.push((u, i, rng.random_range(1..=5u8)));
                rated += 1;
            }
        }
    }
    RatingMatrix::from_triples(triples)
}

/// Same users and items with one user's rating values redrawn.
pub fn perturb_user(matrix: &RatingMatrix, user: UserId, seed: u64) -> RatingMatrix {
    let mut rng = rng::seeded(seed);
    RatingMatrix::from_triples(
        matrix
            .triples()
            .map(|(u, i, r)| {
                if u == user {
                    (u, i, rng.random_range(1..=5u8))
                } else {
                    (u, i, r)
                }
            })
            .collect::<Vec<_>>(),
    )
}

/// `u.data` under `$KDPCF_DATA_DIR`, falling back to the workspace `data/ml-100k`.
pub fn movielens_path() -> PathBuf {
    match std::env::var_os("KDPCF_DATA_DIR") {
        Some(dir) => PathBuf::from(dir).join("u.data"),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k/u.data"),
    }
}

pub fn movielens() -> Option<RatingMatrix> {
    let path = movielens_path();
    path.exists()
        .then(|| build_matrix(&load_movielens(&path).expect("u.data parses")))
}
