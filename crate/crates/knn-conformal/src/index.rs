//! Exact L2 nearest-neighbor search over a fixed set of exemplar vectors.
//!
//! Search is exact by design: the reliability signals built on top of it
//! (nearest-match agreement, distance-to-training) are defined on the exact
//! nearest neighbor, and an approximate index would silently change them.
//! Ties between equidistant rows break by ascending row index so queries
//! are fully deterministic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One search hit: a row of the index and its L2 distance to the query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub row: usize,
    pub distance: f64,
}

/// Immutable row-major matrix of vectors with aligned instance ids.
/// Queries are pure and may run in parallel.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    data: Vec<f64>,
    ids: Vec<String>,
    dim: usize,
}

impl VectorIndex {
    /// Build an index from rows. Rejects empty or ragged input.
    pub fn build(vectors: Vec<Vec<f64>>, ids: Vec<String>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::InvalidData("cannot index zero vectors".into()));
        }
        if vectors.len() != ids.len() {
            return Err(Error::InvalidData(format!(
                "row count {} != id count {}",
                vectors.len(),
                ids.len()
            )));
        }
        let dim = vectors[0].len();
        if dim == 0 {
            return Err(Error::InvalidData("zero-dimensional vectors".into()));
        }
        let mut data = Vec::with_capacity(vectors.len() * dim);
        for (i, row) in vectors.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has length {} != {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(VectorIndex { data, ids, dim })
    }

    /// Build from the exemplar vectors of a slice of instances.
    pub fn from_instances(instances: &[crate::data::Instance]) -> Result<Self> {
        Self::build(
            instances.iter().map(|i| i.exemplar.clone()).collect(),
            instances.iter().map(|i| i.id.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "query length {} != index dimension {}",
                query.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Squared L2 distances from `query` to every row.
    fn squared_distances(&self, query: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.dim)
            .map(|row| squared_distance(query, row))
            .collect()
    }

    /// The `min(k, N)` nearest rows, ascending by (distance, row).
    pub fn query_topk(&self, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        self.check_query(query)?;
        let k = k.max(1).min(self.len());
        let mut hits: Vec<(f64, usize)> = self
            .squared_distances(query)
            .into_iter()
            .enumerate()
            .map(|(row, d2)| (d2, row))
            .collect();
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, cmp_hit);
            hits.truncate(k);
        }
        hits.sort_unstable_by(cmp_hit);
        Ok(hits
            .into_iter()
            .map(|(d2, row)| Neighbor {
                row,
                distance: d2.sqrt(),
            })
            .collect())
    }

    /// Every row ordered by ascending (distance, row).
    pub fn query_all_sorted(&self, query: &[f64]) -> Result<Vec<Neighbor>> {
        self.query_topk(query, self.len())
    }

    /// `query_topk` over a batch of queries, in parallel. Output order
    /// matches input order, so results are deterministic.
    pub fn query_batch_topk(&self, queries: &[Vec<f64>], k: usize) -> Result<Vec<Vec<Neighbor>>> {
        queries
            .par_iter()
            .map(|q| self.query_topk(q, k))
            .collect()
    }

    /// For each query: distances to every row (indexed by row) plus the row
    /// order sorted ascending by (distance, row). This is the layout the
    /// calibration-mixture model consumes.
    pub fn query_batch_all(&self, queries: &[Vec<f64>]) -> Result<Vec<DistanceRow>> {
        queries
            .par_iter()
            .map(|q| {
                self.check_query(q)?;
                let dists: Vec<f64> = self
                    .squared_distances(q)
                    .into_iter()
                    .map(f64::sqrt)
                    .collect();
                let mut order: Vec<u32> = (0..self.len() as u32).collect();
                order.sort_unstable_by(|&a, &b| {
                    cmp_hit(&(dists[a as usize], a as usize), &(dists[b as usize], b as usize))
                });
                Ok(DistanceRow { dists, order })
            })
            .collect()
    }
}

/// Distances from one query to every indexed row.
#[derive(Debug, Clone)]
pub struct DistanceRow {
    /// L2 distance to each row, indexed by row.
    pub dists: Vec<f64>,
    /// Rows sorted ascending by (distance, row).
    pub order: Vec<u32>,
}

impl DistanceRow {
    pub fn nearest(&self) -> Neighbor {
        let row = self.order[0] as usize;
        Neighbor {
            row,
            distance: self.dists[row],
        }
    }

    pub fn neighbors_sorted(&self) -> impl Iterator<Item = Neighbor> + '_ {
        self.order.iter().map(|&r| Neighbor {
            row: r as usize,
            distance: self.dists[r as usize],
        })
    }
}

fn cmp_hit(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: per-pair scalar distance plus a full stable sort.
    fn oracle_topk(vectors: &[Vec<f64>], query: &[f64], k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = vectors
            .iter()
            .enumerate()
            .map(|(row, v)| {
                let mut s = 0.0;
                for d in 0..v.len() {
                    s += (v[d] - query[d]) * (v[d] - query[d]);
                }
                Neighbor {
                    row,
                    distance: s.sqrt(),
                }
            })
            .collect();
        all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.row.cmp(&b.row)));
        all.truncate(k.min(vectors.len()));
        all
    }

    fn random_vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i}")).collect()
    }

    #[test]
    fn single_vector_index() {
        let idx = VectorIndex::build(vec![vec![1.0, 2.0]], ids(1)).unwrap();
        assert_eq!(idx.len(), 1);
        let hits = idx.query_topk(&[1.0, 2.0], 5).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].row, 0);
        assert_eq!(hits[0].distance, 0.0);
    }

    #[test]
    fn ragged_input_is_rejected() {
        let err = VectorIndex::build(vec![vec![1.0, 2.0], vec![1.0]], ids(2)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
        assert!(VectorIndex::build(vec![], vec![]).is_err());
    }

    #[test]
    fn query_dimension_mismatch() {
        let idx = VectorIndex::build(vec![vec![0.0, 0.0]], ids(1)).unwrap();
        assert!(idx.query_topk(&[0.0], 1).is_err());
    }

    #[test]
    fn exact_match_has_distance_zero() {
        let idx =
            VectorIndex::build(vec![vec![3.0, 4.0], vec![0.0, 0.0]], ids(2)).unwrap();
        let hits = idx.query_topk(&[0.0, 0.0], 2).unwrap();
        assert_eq!(hits[0].row, 1);
        assert_eq!(hits[0].distance, 0.0);
        assert_eq!(hits[1].row, 0);
        assert!((hits[1].distance - 5.0).abs() < 1e-12);
    }

    #[test]
    fn equidistant_ties_break_by_row() {
        // rows 0 and 1 are both at distance 1 from the origin
        let idx = VectorIndex::build(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0]],
            ids(3),
        )
        .unwrap();
        let hits = idx.query_topk(&[0.0, 0.0], 2).unwrap();
        assert_eq!(hits[0].row, 0);
        assert_eq!(hits[1].row, 1);
        assert_eq!(hits[0].distance, hits[1].distance);
    }

    #[test]
    fn topk_matches_oracle_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vectors = random_vectors(&mut rng, 1000, 8);
        let idx = VectorIndex::build(vectors.clone(), ids(1000)).unwrap();
        for _ in 0..20 {
            let q: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let got = idx.query_topk(&q, 25).unwrap();
            let want = oracle_topk(&vectors, &q, 25);
            assert_eq!(got.len(), 25);
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.row, w.row);
                let rel = (g.distance - w.distance).abs() / w.distance.max(1e-300);
                assert!(rel < 1e-9, "rel err {rel}");
            }
        }
    }

    #[test]
    fn all_sorted_matches_oracle_and_topk_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vectors = random_vectors(&mut rng, 300, 5);
        let idx = VectorIndex::build(vectors.clone(), ids(300)).unwrap();
        let q: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        let all = idx.query_all_sorted(&q).unwrap();
        let want = oracle_topk(&vectors, &q, 300);
        assert_eq!(all.len(), 300);
        for (g, w) in all.iter().zip(&want) {
            assert_eq!(g.row, w.row);
        }
        for k in [1, 7, 100, 300] {
            let topk = idx.query_topk(&q, k).unwrap();
            assert_eq!(&all[..k], &topk[..]);
        }
    }

    #[test]
    fn returned_distances_match_independent_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vectors = random_vectors(&mut rng, 64, 6);
        let idx = VectorIndex::build(vectors.clone(), ids(64)).unwrap();
        let q: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
        for hit in idx.query_all_sorted(&q).unwrap() {
            let direct = l2_distance(&q, &vectors[hit.row]);
            let rel = (hit.distance - direct).abs() / direct.max(1e-300);
            assert!(rel < 1e-9);
        }
    }

    #[test]
    fn repeated_queries_are_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vectors = random_vectors(&mut rng, 128, 4);
        let idx = VectorIndex::build(vectors, ids(128)).unwrap();
        let q = vec![0.1, 0.2, 0.3, 0.4];
        let a = idx.query_topk(&q, 10).unwrap();
        let b = idx.query_topk(&q, 10).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.row, y.row);
            assert_eq!(x.distance.to_bits(), y.distance.to_bits());
        }
    }

    #[test]
    fn batch_all_orders_by_distance_then_row() {
        let idx = VectorIndex::build(
            vec![vec![2.0], vec![0.0], vec![1.0]],
            ids(3),
        )
        .unwrap();
        let rows = idx.query_batch_all(&[vec![0.0]]).unwrap();
        assert_eq!(rows[0].order, vec![1, 2, 0]);
        assert_eq!(rows[0].nearest().row, 1);
        let sorted: Vec<usize> = rows[0].neighbors_sorted().map(|n| n.row).collect();
        assert_eq!(sorted, vec![1, 2, 0]);
    }
}
