//! Small hand-built rating matrices used by tests, the CLI audit, and the
//! Python smoke test.

use crate::data::RatingMatrix;
use crate::UserId;

/// The sibyl user added by [`sibyl_matrix`].
pub const SIBYL: UserId = 5;
/// The victim whose profile the sibyl copies.
pub const VICTIM: UserId = 3;

/// Four users over six items plus a sibyl (user 5) that copies user 3's
/// known ratings on items 2..4.
pub fn sibyl_matrix() -> RatingMatrix {
    RatingMatrix::from_triples(sibyl_triples())
}

/// The same population after user 3 rates item 5 with `rating`. Differs from
/// [`sibyl_matrix`] only in the victim's row.
pub fn sibyl_matrix_after(rating: u8) -> RatingMatrix {
    RatingMatrix::from_triples(sibyl_triples().into_iter().chain([(VICTIM, 5, rating)]))
}

fn sibyl_triples() -> Vec<(UserId, u32, u8)> {
    vec![
        (1, 1, 2),
        (1, 3, 4),
        (1, 5, 5),
        (2, 1, 3),
        (2, 2, 4),
        (2, 4, 5),
        (2, 6, 4),
        (3, 2, 3),
        (3, 3, 5),
        (3, 4, 4),
        (4, 1, 2),
        (4, 2, 3),
        (4, 4, 3),
        (4, 6, 5),
        (5, 2, 3),
        (5, 3, 5),
        (5, 4, 4),
    ]
}
