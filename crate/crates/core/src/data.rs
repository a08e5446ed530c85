//! Rating ingestion, the sparse rating matrix, and train/test splitting.

use crate::error::{Error, Result};
use crate::{rng, ItemId, UserId};
use rand::seq::SliceRandom;
use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};
use std::path::Path;

/// One `(user, item, rating, timestamp)` line of a MovieLens `u.data` file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RatingRecord {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub rating: u8,
    pub timestamp: i64,
}

impl RatingRecord {
    pub fn new(user_id: UserId, item_id: ItemId, rating: u8, timestamp: i64) -> Self {
        Self {
            user_id,
            item_id,
            rating,
            timestamp,
        }
    }
}

/// Parses MovieLens-format text: four integer fields per line separated by
/// tabs or runs of spaces. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn parse_movielens(text: &str) -> Result<Vec<RatingRecord>> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if let Some(record) = parse_line(line, idx + 1)? {
            records.push(record);
        }
    }
    Ok(records)
}

pub fn read_movielens<R: BufRead>(reader: R) -> Result<Vec<RatingRecord>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        if let Some(record) = parse_line(&line?, idx + 1)? {
            records.push(record);
        }
    }
    Ok(records)
}

pub fn load_movielens(path: impl AsRef<Path>) -> Result<Vec<RatingRecord>> {
    let file = std::fs::File::open(path)?;
    read_movielens(io::BufReader::new(file))
}

fn parse_line(line: &str, line_no: usize) -> Result<Option<RatingRecord>> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.is_empty() {
        return Ok(None);
    }
    if fields.len() != 4 {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected 4 fields, found {}", fields.len()),
        });
    }
    let int = |field: &str, name: &str| -> Result<i64> {
        field.parse::<i64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("{name} {field:?} is not an integer"),
        })
    };
    let id = |field: &str, name: &str| -> Result<u32> {
        let value = int(field, name)?;
        u32::try_from(value)
            .ok()
            .filter(|v| *v >= 1)
            .ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("{name} {value} must be a positive 32-bit integer"),
            })
    };
    let user_id = id(fields[0], "user id")?;
    let item_id = id(fields[1], "item id")?;
    let rating = int(fields[2], "rating")?;
    if !(1..=5).contains(&rating) {
        return Err(Error::RatingRange { line: line_no, rating });
    }
    let timestamp = int(fields[3], "timestamp")?;
    Ok(Some(RatingRecord::new(user_id, item_id, rating as u8, timestamp)))
}

/// Sparse user x item rating store.
///
/// Users are kept in ascending id order and addressed internally by their
/// position (the "user index"). Each row is sorted by item id. An absent
/// entry means "unrated"; no zero is ever stored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RatingMatrix {
    users: Vec<UserId>,
    user_index: HashMap<UserId, usize>,
    rows: Vec<Vec<(ItemId, u8)>>,
    means: Vec<f64>,
    items: Vec<ItemId>,
    // per row, the position of each item in `items`
    positions: Vec<Vec<u32>>,
}

impl RatingMatrix {
    /// Builds the matrix from records. For duplicate `(user, item)` pairs the
    /// last occurrence wins; timestamps are discarded.
    pub fn from_records<'a, I>(records: I) -> Self
    where
        I: IntoIterator<Item = &'a RatingRecord>,
    {
        let mut map: BTreeMap<UserId, BTreeMap<ItemId, u8>> = BTreeMap::new();
        for r in records {
            map.entry(r.user_id).or_default().insert(r.item_id, r.rating);
        }
        Self::from_map(map)
    }

    /// Builds the matrix from `(user, item, rating)` triples, last-wins.
    pub fn from_triples<I>(triples: I) -> Self
    where
        I: IntoIterator<Item = (UserId, ItemId, u8)>,
    {
        let mut map: BTreeMap<UserId, BTreeMap<ItemId, u8>> = BTreeMap::new();
        for (u, i, r) in triples {
            map.entry(u).or_default().insert(i, r);
        }
        Self::from_map(map)
    }

    fn from_map(map: BTreeMap<UserId, BTreeMap<ItemId, u8>>) -> Self {
        let mut users = Vec::with_capacity(map.len());
        let mut rows = Vec::with_capacity(map.len());
        let mut items = Vec::new();
        for (u, row) in map {
            if row.is_empty() {
                continue;
            }
            debug_assert!(row.values().all(|r| (1..=5).contains(r)));
            items.extend(row.keys().copied());
            users.push(u);
            rows.push(row.into_iter().collect::<Vec<_>>());
        }
        items.sort_unstable();
        items.dedup();
        let positions = rows
            .iter()
            .map(|row: &Vec<(ItemId, u8)>| {
                row.iter()
                    .map(|(i, _)| items.binary_search(i).expect("item collected above") as u32)
                    .collect()
            })
            .collect();
        let user_index = users.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let means = rows
            .iter()
            .map(|row: &Vec<(ItemId, u8)>| row.iter().map(|&(_, r)| f64::from(r)).sum::<f64>() / row.len() as f64)
            .collect();
        Self {
            users,
            user_index,
            rows,
            means,
            items,
            positions,
        }
    }

    /// Users with at least one rating, ascending.
    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    /// Items with at least one rating, ascending.
    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_ratings(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn contains_user(&self, u: UserId) -> bool {
        self.user_index.contains_key(&u)
    }

    pub fn index_of(&self, u: UserId) -> Option<usize> {
        self.user_index.get(&u).copied()
    }

    pub(crate) fn require_index(&self, u: UserId) -> Result<usize> {
        self.index_of(u).ok_or(Error::UnknownUser(u))
    }

    pub fn user_at(&self, idx: usize) -> UserId {
        self.users[idx]
    }

    /// The row of user `u`, sorted by item id.
    pub fn row(&self, u: UserId) -> Option<&[(ItemId, u8)]> {
        self.index_of(u).map(|idx| self.rows[idx].as_slice())
    }

    pub fn row_at(&self, idx: usize) -> &[(ItemId, u8)] {
        &self.rows[idx]
    }

    /// Dense item positions (indices into [`Self::items`]) of row `idx`.
    pub fn positions_at(&self, idx: usize) -> &[u32] {
        &self.positions[idx]
    }

    pub fn item_position(&self, item: ItemId) -> Option<usize> {
        self.items.binary_search(&item).ok()
    }

    /// Mean over the user's full rated set.
    pub fn mean_at(&self, idx: usize) -> f64 {
        self.means[idx]
    }

    pub fn rating(&self, u: UserId, i: ItemId) -> Option<u8> {
        let row = self.row(u)?;
        row.binary_search_by_key(&i, |&(item, _)| item)
            .ok()
            .map(|pos| row[pos].1)
    }

    /// All stored ratings as `(user, item, rating)` in user-then-item order.
    pub fn triples(&self) -> impl Iterator<Item = (UserId, ItemId, u8)> + '_ {
        self.users
            .iter()
            .zip(&self.rows)
            .flat_map(|(&u, row)| row.iter().map(move |&(i, r)| (u, i, r)))
    }

    /// Writes the matrix in MovieLens format. Timestamps are not retained,
    /// so the fourth field is always 0.
    pub fn write_movielens<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (u, i, r) in self.triples() {
            writeln!(out, "{u}\t{i}\t{r}\t0")?;
        }
        out.flush()
    }
}

/// Builds the sparse matrix from parsed records (last duplicate wins).
pub fn build_matrix(records: &[RatingRecord]) -> RatingMatrix {
    RatingMatrix::from_records(records)
}

/// A train/test partition of one rating matrix.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: RatingMatrix,
    pub test: RatingMatrix,
    pub seed: u64,
}

/// Randomly assigns `round(test_fraction * n)` ratings to the test side, the
/// rest to train. A user left with no training rating gets its test rating
/// with the smallest item id moved back to train.
pub fn split(matrix: &RatingMatrix, test_fraction: f64, seed: u64) -> Result<SplitDataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "test fraction {test_fraction} must lie strictly between 0 and 1"
        )));
    }
    if matrix.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let triples: Vec<(UserId, ItemId, u8)> = matrix.triples().collect();
    let n_test = (test_fraction * triples.len() as f64).round() as usize;

    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut in_test = vec![false; triples.len()];
    for &pos in &order[..n_test] {
        in_test[pos] = true;
    }

    // Triples are grouped by user with items ascending, so the first test
    // triple of a user with no train triple has its smallest item id.
    let mut start = 0;
    while start < triples.len() {
        let user = triples[start].0;
        let end = start + triples[start..].partition_point(|t| t.0 == user);
        if in_test[start..end].iter().all(|&t| t) {
            in_test[start] = false;
        }
        start = end;
    }

    let (test, train): (Vec<_>, Vec<_>) = triples.into_iter().zip(in_test).partition(|&(_, t)| t);
    Ok(SplitDataset {
        train: RatingMatrix::from_triples(train.into_iter().map(|(t, _)| t)),
        test: RatingMatrix::from_triples(test.into_iter().map(|(t, _)| t)),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_empty_input() {
        assert!(parse_movielens("").unwrap().is_empty());
        assert!(parse_movielens("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn parses_single_line() {
        let records = parse_movielens("1\t2\t3\t881250949").unwrap();
        assert_eq!(records, vec![RatingRecord::new(1, 2, 3, 881250949)]);
    }

    #[test]
    fn accepts_space_runs() {
        let records = parse_movielens("7   9  5 0\n\n8 9 1 12\n").unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[1], RatingRecord::new(8, 9, 1, 12));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match parse_movielens("1 2 3 4\n1 2 x 4\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse_movielens("1 2 3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_movielens("0 2 3 4"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn rating_out_of_range() {
        assert!(matches!(
            parse_movielens("1 2 3 4\n\n1 2 6 4"),
            Err(Error::RatingRange { line: 3, rating: 6 })
        ));
        assert!(matches!(
            parse_movielens("1 2 0 4"),
            Err(Error::RatingRange { rating: 0, .. })
        ));
    }

    #[test]
    fn build_matrix_cases() {
        let empty = build_matrix(&[]);
        assert_eq!((empty.n_users(), empty.n_items()), (0, 0));

        let single = build_matrix(&[RatingRecord::new(1, 2, 3, 0)]);
        assert_eq!(single.users(), &[1]);
        assert_eq!(single.items(), &[2]);
        assert_eq!(single.rating(1, 2), Some(3));
        assert_eq!(single.rating(1, 3), None);

        let dup = build_matrix(&[RatingRecord::new(1, 2, 3, 0), RatingRecord::new(1, 2, 5, 1)]);
        assert_eq!(dup.rating(1, 2), Some(5));
        assert_eq!(dup.n_ratings(), 1);
    }

    #[test]
    fn split_rejects_bad_input() {
        let m = build_matrix(&[RatingRecord::new(1, 2, 3, 0)]);
        assert!(split(&m, 0.0, 1).is_err());
        assert!(split(&m, 1.0, 1).is_err());
        assert!(matches!(
            split(&RatingMatrix::default(), 0.2, 1),
            Err(Error::EmptyMatrix)
        ));
    }

    #[test]
    fn split_keeps_one_training_rating() {
        let m = RatingMatrix::from_triples((1..=5).map(|i| (1, i, 3)));
        for seed in 0..20 {
            let s = split(&m, 0.8, seed).unwrap();
            assert!(s.train.row(1).is_some_and(|r| !r.is_empty()));
            assert_eq!(s.train.n_ratings() + s.test.n_ratings(), 5);
        }
        // at 0.99 every rating lands in test first; item 1 comes back
        let s = split(&m, 0.99, 3).unwrap();
        assert_eq!(s.train.row(1).unwrap(), &[(1, 3)]);
    }
}
