//! Cloud preprocessing and the shared exact nearest-neighbour graph.
//!
//! The preprocessing order is fixed: trim by norm on the raw cloud, then
//! mean-center, then build the graph. A single graph with `K_max` neighbours
//! is built per layer and reused by all four geometric estimators.
//!
//! k-NN is exact blocked brute force (Euclidean). N stays below ~50K at desk
//! scale, which keeps exactness affordable and removes approximation as a
//! confound in the estimator tests. Ties in distance break by ascending point
//! index. Duplicate points are retained in the graph with distance 0; the
//! TWO-NN consumer skips points whose first-neighbour distance is 0.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::dataio::{ActivationCloud, PrepStage};
use crate::error::{Error, Result};
use crate::numeric::{pairwise_sum, percentile_sorted};

/// Shared exact k-NN graph: per point, `k_max` neighbour ids ascending by
/// distance (self excluded) and the matching Euclidean distances.
#[derive(Debug, Clone)]
pub struct NeighbourGraph {
    pub indices: Vec<Vec<u32>>,
    pub distances: Vec<Vec<f64>>,
    pub k_max: usize,
}

impl NeighbourGraph {
    pub fn n_points(&self) -> usize {
        self.indices.len()
    }

    /// The first `k` neighbour ids of point `i`.
    pub fn neighbours(&self, i: usize, k: usize) -> &[u32] {
        &self.indices[i][..k]
    }
}

/// Drop the lowest `lower_frac` and highest `upper_frac` of points by norm.
/// Points whose norm equals a percentile bound are kept; order is preserved.
pub fn trim_by_norm(
    cloud: &ActivationCloud,
    lower_frac: f64,
    upper_frac: f64,
) -> Result<ActivationCloud> {
    if lower_frac < 0.0 || upper_frac < 0.0 || lower_frac + upper_frac >= 1.0 {
        return Err(Error::Config(format!(
            "trim fractions ({lower_frac}, {upper_frac}) must be >= 0 and sum below 1"
        )));
    }
    if cloud.stage == PrepStage::Centered {
        return Err(Error::Config(
            "norm trimming must precede centering (cloud already centered)".into(),
        ));
    }
    if lower_frac == 0.0 && upper_frac == 0.0 {
        return Ok(cloud.clone());
    }
    let norms: Vec<f64> = cloud
        .points
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut sorted = norms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = percentile_sorted(&sorted, lower_frac);
    let hi = percentile_sorted(&sorted, 1.0 - upper_frac);
    let keep: Vec<usize> = norms
        .iter()
        .enumerate()
        .filter_map(|(i, &n)| (n >= lo && n <= hi).then_some(i))
        .collect();
    if keep.len() < 10 {
        return Err(Error::TooFewSurvivors {
            min: 10,
            survivors: keep.len(),
        });
    }
    let d = cloud.dim();
    let mut pts = Array2::zeros((keep.len(), d));
    for (r, &src) in keep.iter().enumerate() {
        pts.row_mut(r).assign(&cloud.points.row(src));
    }
    let mut out = cloud.clone();
    out.points = pts;
    out.stage = PrepStage::Trimmed;
    Ok(out)
}

/// Subtract the global column mean. No whitening, no row normalisation.
pub fn center(cloud: &ActivationCloud) -> ActivationCloud {
    let (n, d) = cloud.points.dim();
    let mut means = vec![0.0; d];
    for (j, m) in means.iter_mut().enumerate() {
        let col: Vec<f64> = cloud.points.column(j).iter().copied().collect();
        *m = pairwise_sum(&col) / n as f64;
    }
    let mut pts = cloud.points.clone();
    for mut row in pts.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v -= means[j];
        }
    }
    let mut out = cloud.clone();
    out.points = pts;
    out.stage = PrepStage::Centered;
    out
}

/// Trim, then center: the fixed preprocessing order for geometry estimation.
pub fn preprocess(cloud: &ActivationCloud, lower_frac: f64, upper_frac: f64) -> Result<ActivationCloud> {
    Ok(center(&trim_by_norm(cloud, lower_frac, upper_frac)?))
}

/// Exact Euclidean k-NN by blocked brute force. Rows are sorted ascending by
/// (distance, index); deterministic and independent of thread count.
pub fn build_knn(cloud: &ActivationCloud, k_max: usize) -> Result<NeighbourGraph> {
    let (n, d) = cloud.points.dim();
    if k_max >= n {
        return Err(Error::Config(format!("K_max {k_max} must be < N {n}")));
    }
    if k_max == 0 {
        return Err(Error::Config("K_max must be >= 1".into()));
    }
    let flat = cloud
        .points
        .as_slice()
        .expect("cloud points are standard layout");

    let rows: Vec<(Vec<u32>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let qi = &flat[i * d..(i + 1) * d];
            // squared distances to every other point
            let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let pj = &flat[j * d..(j + 1) * d];
                let mut acc = 0.0;
                for t in 0..d {
                    let diff = qi[t] - pj[t];
                    acc += diff * diff;
                }
                cand.push((acc, j as u32));
            }
            let cmp = |a: &(f64, u32), b: &(f64, u32)| {
                a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
            };
            cand.select_nth_unstable_by(k_max - 1, cmp);
            cand.truncate(k_max);
            cand.sort_by(cmp);
            let idx: Vec<u32> = cand.iter().map(|c| c.1).collect();
            let dist: Vec<f64> = cand.iter().map(|c| c.0.sqrt()).collect();
            (idx, dist)
        })
        .collect();

    let mut indices = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    for (idx, dist) in rows {
        indices.push(idx);
        distances.push(dist);
    }
    Ok(NeighbourGraph {
        indices,
        distances,
        k_max,
    })
}

// --- optional binary graph cache -------------------------------------------

const CACHE_MAGIC: &[u8; 4] = b"KNNG";
const CACHE_VERSION: u32 = 1;

/// Cache file name for a cloud hash + K_max key.
pub fn cache_file_name(cloud_sha256: &str, k_max: usize) -> String {
    format!("{cloud_sha256}_k{k_max}.knng")
}

pub fn save_graph_cache(graph: &NeighbourGraph, path: &Path) -> Result<()> {
    let n = graph.n_points();
    let mut buf = Vec::with_capacity(16 + n * graph.k_max * 12);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(graph.k_max as u32).to_le_bytes());
    for row in &graph.indices {
        for &v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for row in &graph.distances {
        for &v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_graph_cache(path: &Path) -> Result<NeighbourGraph> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let display = path.display().to_string();
    if bytes.len() < 16 || &bytes[0..4] != CACHE_MAGIC {
        return Err(Error::FormatMismatch {
            path: display,
            reason: "bad graph cache header".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::FormatMismatch {
            path: display,
            reason: format!("unsupported cache version {version}"),
        });
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let k_max = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + n * k_max * 12;
    if bytes.len() != expected {
        return Err(Error::ShapeMismatch {
            path: display,
            expected,
            found: bytes.len(),
        });
    }
    let mut offset = 16;
    let mut indices = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<u32> = bytes[offset..offset + k_max * 4]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += k_max * 4;
        indices.push(row);
    }
    let mut distances = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = bytes[offset..offset + k_max * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += k_max * 8;
        distances.push(row);
    }
    Ok(NeighbourGraph {
        indices,
        distances,
        k_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Partition;
    use ndarray::arr2;

    fn cloud_from(points: Array2<f64>) -> ActivationCloud {
        ActivationCloud::new(points, "m", 0, Partition::Geometry, "c").unwrap()
    }

    /// Brute-force all-pairs oracle with the same tie rule.
    fn knn_oracle(points: &Array2<f64>, k: usize) -> (Vec<Vec<u32>>, Vec<Vec<f64>>) {
        let n = points.nrows();
        let mut indices = Vec::new();
        let mut distances = Vec::new();
        for i in 0..n {
            let mut all: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let diff = &points.row(i) - &points.row(j);
                    let dsq: f64 = diff.iter().map(|v| v * v).sum();
                    (dsq.sqrt(), j as u32)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            indices.push(all[..k].iter().map(|c| c.1).collect());
            distances.push(all[..k].iter().map(|c| c.0).collect());
        }
        (indices, distances)
    }

    #[test]
    fn line_points_match_hand_oracle() {
        let cloud = cloud_from(arr2(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0], [7.0, 0.0]]));
        let g = build_knn(&cloud, 2).unwrap();
        assert_eq!(g.indices[0], vec![1, 2]);
        assert_eq!(g.distances[0], vec![1.0, 3.0]);
    }

    #[test]
    fn full_graph_when_kmax_is_n_minus_one() {
        let cloud = cloud_from(arr2(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]));
        let g = build_knn(&cloud, 2).unwrap();
        for i in 0..3 {
            let mut ids = g.indices[i].clone();
            ids.sort();
            let expect: Vec<u32> = (0..3u32).filter(|&j| j as usize != i).collect();
            assert_eq!(ids, expect);
        }
    }

    #[test]
    fn lattice_interior_point_axis_neighbours() {
        // 10x10 integer lattice; interior point's 4 nearest are its axis
        // neighbours at distance 1 (diagonals are sqrt(2), ties none).
        let mut pts = Vec::new();
        for x in 0..10 {
            for y in 0..10 {
                pts.push([x as f64, y as f64]);
            }
        }
        let arr = Array2::from_shape_vec((100, 2), pts.concat()).unwrap();
        let cloud = cloud_from(arr);
        let g = build_knn(&cloud, 4).unwrap();
        let center = 5 * 10 + 5;
        let mut ids = g.indices[center].clone();
        ids.sort();
        let mut expect = vec![4 * 10 + 5, 6 * 10 + 5, 5 * 10 + 4, 5 * 10 + 6]
            .into_iter()
            .map(|v| v as u32)
            .collect::<Vec<_>>();
        expect.sort();
        assert_eq!(ids, expect);
        assert!(g.distances[center].iter().all(|&d| (d - 1.0).abs() < 1e-12));
    }

    #[test]
    fn matches_brute_force_oracle_on_random_cloud() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = Array2::from_shape_fn((300, 5), |_| rng.random::<f64>());
        let cloud = cloud_from(pts.clone());
        let g = build_knn(&cloud, 12).unwrap();
        let (oi, od) = knn_oracle(&pts, 12);
        assert_eq!(g.indices, oi);
        for (a, b) in g.distances.iter().zip(&od) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // rows sorted, self excluded
        for (i, (ids, ds)) in g.indices.iter().zip(&g.distances).enumerate() {
            assert!(ids.iter().all(|&j| j as usize != i));
            assert!(ds.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn permuting_points_permutes_neighbour_sets() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = Array2::from_shape_fn((120, 3), |_| rng.random::<f64>());
        let cloud = cloud_from(pts.clone());
        let g = build_knn(&cloud, 6).unwrap();

        let mut perm: Vec<usize> = (0..120).collect();
        perm.shuffle(&mut rng);
        let mut inv = vec![0usize; 120];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut ppts = Array2::zeros((120, 3));
        for (new, &old) in perm.iter().enumerate() {
            ppts.row_mut(new).assign(&pts.row(old));
        }
        let pg = build_knn(&cloud_from(ppts), 6).unwrap();
        for old in 0..120 {
            let mut a: Vec<u32> = g.indices[old].iter().map(|&j| inv[j as usize] as u32).collect();
            let mut b = pg.indices[inv[old]].clone();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn duplicate_points_keep_zero_distance_neighbour() {
        let cloud = cloud_from(arr2(&[[1.0, 1.0], [1.0, 1.0], [5.0, 5.0]]));
        let g = build_knn(&cloud, 2).unwrap();
        assert_eq!(g.indices[0][0], 1);
        assert_eq!(g.distances[0][0], 0.0);
    }

    #[test]
    fn trim_counts_and_survivors() {
        // 100 points with norms 1..=100 along the x axis
        let mut pts = Array2::zeros((100, 2));
        for i in 0..100 {
            pts[[i, 0]] = (i + 1) as f64;
        }
        let cloud = cloud_from(pts);
        let t = trim_by_norm(&cloud, 0.05, 0.05).unwrap();
        assert_eq!(t.n_points(), 90);
        // survivors are norms 6..=95 under the sort-and-slice oracle
        assert_eq!(t.points[[0, 0]], 6.0);
        assert_eq!(t.points[[89, 0]], 95.0);
        // zero-fraction trim is the identity
        let id = trim_by_norm(&cloud, 0.0, 0.0).unwrap();
        assert_eq!(id.points, cloud.points);
    }

    #[test]
    fn trim_rejects_too_few_survivors() {
        let pts = Array2::from_shape_fn((12, 2), |(i, _)| i as f64 + 1.0);
        let cloud = cloud_from(pts);
        assert!(matches!(
            trim_by_norm(&cloud, 0.4, 0.4),
            Err(Error::TooFewSurvivors { .. })
        ));
    }

    #[test]
    fn center_examples() {
        // constant cloud -> all zeros
        let c = cloud_from(arr2(&[[2.0, 3.0], [2.0, 3.0], [2.0, 3.0]]));
        let z = center(&c);
        assert!(z.points.iter().all(|&v| v.abs() < 1e-15));
        // two points
        let c2 = cloud_from(arr2(&[[0.0, 0.0], [2.0, 4.0]]));
        let z2 = center(&c2);
        assert_eq!(z2.points, arr2(&[[-1.0, -2.0], [1.0, 2.0]]));
        // idempotence
        let z3 = center(&z2);
        for (a, b) in z3.points.iter().zip(z2.points.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pipeline_order_enforced() {
        let pts = Array2::from_shape_fn((40, 2), |(i, j)| (i * 2 + j) as f64);
        let cloud = cloud_from(pts);
        let centered = center(&cloud);
        assert!(trim_by_norm(&centered, 0.05, 0.05).is_err());
        assert!(preprocess(&cloud, 0.05, 0.05).is_ok());
    }

    #[test]
    fn graph_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pts = Array2::from_shape_fn((50, 3), |(i, j)| ((i * 7 + j * 3) % 13) as f64);
        let cloud = cloud_from(pts);
        let g = build_knn(&cloud, 5).unwrap();
        let path = dir.path().join(cache_file_name("deadbeef", 5));
        save_graph_cache(&g, &path).unwrap();
        let back = load_graph_cache(&path).unwrap();
        assert_eq!(back.indices, g.indices);
        assert_eq!(back.distances, g.distances);
        assert_eq!(back.k_max, 5);
    }
}
