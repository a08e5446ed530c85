mod common;

use kdpcf_core::data::{load_movielens, split};
use kdpcf_core::similarity::{pearson, SimilaritySource};
use kdpcf_core::SimilarityTable;

#[test]
fn movielens_loads_and_splits_four_to_one() {
    let Some(matrix) = common::movielens() else {
        eprintln!(
            "MovieLens not found at {}; skipping",
            common::movielens_path().display()
        );
        return;
    };
    assert_eq!(load_movielens(common::movielens_path()).unwrap().len(), 100_000);
    assert_eq!(
        (matrix.n_ratings(), matrix.n_users(), matrix.n_items()),
        (100_000, 943, 1682)
    );
    let s = split(&matrix, 0.2, 42).unwrap();
    assert!(s.test.n_ratings().abs_diff(20_000) <= 1, "{}", s.test.n_ratings());
    assert_eq!(s.train.n_ratings() + s.test.n_ratings(), 100_000);
    assert_eq!(s.train.n_users(), 943);

    let table = SimilarityTable::build(&s.train);
    for (u, v) in [(1, 2), (13, 405), (943, 1), (500, 501)] {
        assert_eq!(table.similarity(u, v).unwrap(), pearson(&s.train, u, v).unwrap());
        assert_eq!(table.similarity(u, v).unwrap(), table.similarity(v, u).unwrap());
    }
}
