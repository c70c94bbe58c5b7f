//! Density-peak prototypes and the discrimination bank.
//!
//! Prototypes sit at local density peaks of the embedding cloud; every
//! instance is assigned to its nearest prototype by cosine similarity. The
//! discrimination bank keeps one bounded FIFO queue per prototype holding
//! batch-pooled instance representations (capacity 10, oldest evicted).

use crate::error::{Error, Result};
use crate::loss::{concentration, GAMMA_MIN};
use crate::tensor::{sc, Scalar, Tensor};
use std::collections::BTreeMap;
use std::collections::VecDeque;

/// Queue capacity of each prototype's instance bank.
pub const QUEUE_CAP: usize = 10;

/// A cluster representative with its concentration scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype<S> {
    pub id: usize,
    pub centroid: Vec<S>,
    pub gamma: S,
    pub member_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry<S> {
    pub z: Vec<S>,
    pub batch_id: u64,
    /// Prototype the entry was nearest to when enqueued.
    pub prototype: usize,
}

/// K = M bounded FIFO queues of pooled instance representations.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminationBank<S> {
    queues: Vec<VecDeque<BankEntry<S>>>,
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

fn euclid<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = (x - y).to_f64().unwrap();
        acc += d * d;
    }
    acc.sqrt()
}

/// Density radius heuristic: the distance at the given quantile of all
/// pairwise distances, so roughly that fraction of pairs count as neighbors.
pub fn suggest_density_radius<S: Scalar>(embeddings: &Tensor<S>, neighbor_fraction: f64) -> f64 {
    let d = *embeddings.shape().last().unwrap();
    let n = embeddings.numel() / d;
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(euclid(
                &embeddings.data()[i * d..(i + 1) * d],
                &embeddings.data()[j * d..(j + 1) * d],
            ));
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((dists.len() as f64) * neighbor_fraction).round() as usize;
    dists[idx.clamp(0, dists.len() - 1)].max(f64::MIN_POSITIVE)
}

/// Density-peak prototype estimation.
///
/// ρᵢ counts neighbors strictly within `d_c`; δᵢ is the distance to the
/// nearest strictly-higher-density point, or the maximum distance when no
/// higher-density point exists. The top-M points by ρ·δ (ties to the lower
/// index) become prototypes; every point is assigned to its nearest
/// prototype by cosine similarity, and centroids are the re-normalized
/// member means. γ comes from the member distances around each centroid.
pub fn density_peaks<S: Scalar>(
    embeddings: &Tensor<S>,
    m: usize,
    d_c: f64,
    beta: S,
) -> Result<(Vec<Prototype<S>>, Vec<usize>)> {
    let d = *embeddings.shape().last().unwrap();
    let n = embeddings.numel() / d;
    if m == 0 || m > n {
        return Err(Error::Contract(format!(
            "density_peaks: need 1 ≤ M ≤ n, got M={m}, n={n}"
        )));
    }
    let row = |i: usize| &embeddings.data()[i * d..(i + 1) * d];

    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dd = euclid(row(i), row(j));
            dist[i * n + j] = dd;
            dist[j * n + i] = dd;
        }
    }
    let rho: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && dist[i * n + j] < d_c).count())
        .collect();
    let delta: Vec<f64> = (0..n)
        .map(|i| {
            let mut best = f64::INFINITY;
            for j in 0..n {
                if rho[j] > rho[i] && dist[i * n + j] < best {
                    best = dist[i * n + j];
                }
            }
            if best.is_finite() {
                best
            } else {
                (0..n).map(|j| dist[i * n + j]).fold(0.0, f64::max)
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let sa = rho[a] as f64 * delta[a];
        let sb = rho[b] as f64 * delta[b];
        sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
    });
    let peaks: Vec<usize> = order[..m].to_vec();

    // nearest peak by cosine, ties to the lower prototype id
    let assignments: Vec<usize> = (0..n)
        .map(|i| {
            let mut best = S::neg_infinity();
            let mut best_id = 0usize;
            for (pid, &peak) in peaks.iter().enumerate() {
                let c = dot(row(i), row(peak));
                if c > best {
                    best = c;
                    best_id = pid;
                }
            }
            best_id
        })
        .collect();

    let mut prototypes = Vec::with_capacity(m);
    for (pid, _) in peaks.iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == pid).collect();
        let mut mean = vec![S::zero(); d];
        for &i in &members {
            for (mv, &xv) in mean.iter_mut().zip(row(i)) {
                *mv = *mv + xv;
            }
        }
        let count = S::from_usize(members.len().max(1)).unwrap();
        for mv in mean.iter_mut() {
            *mv = *mv / count;
        }
        let norm = dot(&mean, &mean).sqrt();
        let centroid: Vec<S> = if norm.to_f64().unwrap() > 1e-12 {
            mean.iter().map(|&v| v / norm).collect()
        } else {
            // members cancelled out; fall back to the peak point itself
            row(peaks[pid]).to_vec()
        };
        let member_rows: Vec<&[S]> = members.iter().map(|&i| row(i)).collect();
        let gamma = if member_rows.is_empty() {
            sc::<S>(GAMMA_MIN)
        } else {
            let g = concentration(&member_rows, &centroid, beta)?;
            if g < sc::<S>(GAMMA_MIN) {
                sc::<S>(GAMMA_MIN)
            } else {
                g
            }
        };
        prototypes.push(Prototype {
            id: pid,
            centroid,
            gamma,
            member_count: members.len(),
        });
    }
    Ok((prototypes, assignments))
}

/// Nearest prototype by cosine similarity, ties to the lowest id.
pub fn assign<S: Scalar>(v: &[S], prototypes: &[Prototype<S>]) -> usize {
    debug_assert!(!prototypes.is_empty());
    let mut best = S::neg_infinity();
    let mut best_id = 0usize;
    for p in prototypes {
        let c = dot(v, &p.centroid);
        if c > best {
            best = c;
            best_id = p.id;
        }
    }
    best_id
}

impl<S: Scalar> DiscriminationBank<S> {
    pub fn new(prototype_count: usize) -> Self {
        DiscriminationBank {
            queues: (0..prototype_count).map(|_| VecDeque::new()).collect(),
        }
    }

    pub fn prototype_count(&self) -> usize {
        self.queues.len()
    }

    /// Queue contents of one prototype's bank, oldest first (the contrastive
    /// set J for anchors assigned to that prototype).
    pub fn contrastive_set(&self, prototype: usize) -> &VecDeque<BankEntry<S>> {
        &self.queues[prototype]
    }

    pub fn occupancy(&self) -> usize {
        self.queues.iter().map(|q| q.len()).sum()
    }

    /// Bank concentration φ of one queue around the prototype centroid,
    /// floored at γ_min. `None` when the queue is empty.
    pub fn phi(&self, prototype: usize, centroid: &[S], beta: S) -> Option<S> {
        let q = &self.queues[prototype];
        if q.is_empty() {
            return None;
        }
        let members: Vec<&[S]> = q.iter().map(|e| e.z.as_slice()).collect();
        let g = concentration(&members, centroid, beta).ok()?;
        Some(if g < sc::<S>(GAMMA_MIN) { sc::<S>(GAMMA_MIN) } else { g })
    }

    /// Enqueue one batch: the embeddings assigned to each prototype are
    /// average-pooled into a single re-normalized entry; queues beyond
    /// capacity evict their oldest entry. Runs once per backward cycle.
    pub fn update(
        &mut self,
        embeddings: &Tensor<S>,
        assignments: &[usize],
        batch_id: u64,
    ) -> Result<()> {
        let dim = *embeddings.shape().last().unwrap();
        let n = embeddings.numel() / dim;
        if assignments.len() != n {
            return Err(Error::Contract(
                "bank update: one assignment per embedding required".into(),
            ));
        }
        if assignments.iter().any(|&a| a >= self.queues.len()) {
            return Err(Error::Contract("bank update: assignment out of range".into()));
        }
        for proto in 0..self.queues.len() {
            let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == proto).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![S::zero(); dim];
            for &i in &members {
                for (mv, &xv) in mean.iter_mut().zip(&embeddings.data()[i * dim..(i + 1) * dim]) {
                    *mv = *mv + xv;
                }
            }
            let count = S::from_usize(members.len()).unwrap();
            for mv in mean.iter_mut() {
                *mv = *mv / count;
            }
            let norm = dot(&mean, &mean).sqrt();
            if norm.to_f64().unwrap() <= 1e-12 {
                continue; // members cancelled; nothing representative to store
            }
            let z: Vec<S> = mean.iter().map(|&v| v / norm).collect();
            let q = &mut self.queues[proto];
            q.push_back(BankEntry {
                z,
                batch_id,
                prototype: proto,
            });
            while q.len() > QUEUE_CAP {
                q.pop_front();
            }
        }
        Ok(())
    }

    /// Serialize queues as checkpoint entries (f32 only).
    pub fn to_entries(&self) -> BTreeMap<String, Tensor<f32>>
    where
        S: Scalar,
    {
        let mut out = BTreeMap::new();
        for (m, q) in self.queues.iter().enumerate() {
            for (slot, e) in q.iter().enumerate() {
                let z32: Vec<f32> = e.z.iter().map(|v| v.to_f64().unwrap() as f32).collect();
                out.insert(
                    format!("bank.{m}.{slot}.z"),
                    Tensor::from_vec(vec![z32.len()], z32).unwrap(),
                );
                out.insert(
                    format!("bank.{m}.{slot}.tag"),
                    Tensor::scalar(e.batch_id as f32),
                );
            }
        }
        out
    }
}

/// Serialize prototypes as checkpoint entries.
pub fn prototypes_to_entries<S: Scalar>(protos: &[Prototype<S>]) -> BTreeMap<String, Tensor<f32>> {
    let mut out = BTreeMap::new();
    for p in protos {
        let c32: Vec<f32> = p.centroid.iter().map(|v| v.to_f64().unwrap() as f32).collect();
        out.insert(
            format!("proto.{}", p.id),
            Tensor::from_vec(vec![c32.len()], c32).unwrap(),
        );
        out.insert(
            format!("proto.{}.gamma", p.id),
            Tensor::scalar(p.gamma.to_f64().unwrap() as f32),
        );
        out.insert(
            format!("proto.{}.count", p.id),
            Tensor::scalar(p.member_count as f32),
        );
    }
    out
}

/// Rebuild prototypes from checkpoint entries.
pub fn prototypes_from_entries(entries: &BTreeMap<String, Tensor<f32>>) -> Vec<Prototype<f32>> {
    let mut out = Vec::new();
    let mut id = 0usize;
    while let Some(c) = entries.get(&format!("proto.{id}")) {
        let gamma = entries
            .get(&format!("proto.{id}.gamma"))
            .map(|t| t.item())
            .unwrap_or(1.0);
        let count = entries
            .get(&format!("proto.{id}.count"))
            .map(|t| t.item() as usize)
            .unwrap_or(0);
        out.push(Prototype {
            id,
            centroid: c.data().to_vec(),
            gamma,
            member_count: count,
        });
        id += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit<S: Scalar>(v: Vec<f64>) -> Vec<S> {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|&x| sc::<S>(x / n)).collect()
    }

    fn embeddings_from(rows: Vec<Vec<f64>>) -> Tensor<f64> {
        let d = rows[0].len();
        let mut data = Vec::new();
        for r in rows {
            data.extend(unit::<f64>(r));
        }
        Tensor::from_vec(vec![data.len() / d, d], data).unwrap()
    }

    /// Independent brute-force oracle mirroring the documented ρ/δ/top-M
    /// rules with its own plain code.
    pub fn brute_force_peaks(e: &Tensor<f64>, m: usize, d_c: f64) -> (Vec<usize>, Vec<usize>) {
        let d = *e.shape().last().unwrap();
        let n = e.numel() / d;
        let row = |i: usize| &e.data()[i * d..(i + 1) * d];
        let dist = |i: usize, j: usize| -> f64 {
            row(i)
                .iter()
                .zip(row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let rho: Vec<usize> = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && dist(i, j) < d_c).count())
            .collect();
        let mut delta = vec![0.0f64; n];
        for i in 0..n {
            let higher: Vec<usize> = (0..n).filter(|&j| rho[j] > rho[i]).collect();
            delta[i] = if higher.is_empty() {
                (0..n).map(|j| dist(i, j)).fold(0.0, f64::max)
            } else {
                higher.iter().map(|&j| dist(i, j)).fold(f64::INFINITY, f64::min)
            };
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            (rho[b] as f64 * delta[b])
                .partial_cmp(&(rho[a] as f64 * delta[a]))
                .unwrap()
                .then(a.cmp(&b))
        });
        let peaks = idx[..m].to_vec();
        let assignments = (0..n)
            .map(|i| {
                let mut best = f64::NEG_INFINITY;
                let mut bid = 0;
                for (pid, &p) in peaks.iter().enumerate() {
                    let c: f64 = row(i).iter().zip(row(p)).map(|(a, b)| a * b).sum();
                    if c > best {
                        best = c;
                        bid = pid;
                    }
                }
                bid
            })
            .collect();
        (peaks, assignments)
    }

    #[test]
    fn degenerate_case_every_point_its_own_prototype() {
        let e = embeddings_from(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let (protos, assignments) = density_peaks(&e, 3, 0.5, 10.0).unwrap();
        assert_eq!(protos.len(), 3);
        // every point maps to a distinct prototype
        let mut seen = assignments.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 3);
        // with itself as the only member, the centroid is the point
        for (i, &a) in assignments.iter().enumerate() {
            let c = &protos[a].centroid;
            let sim: f64 = c.iter().zip(&e.data()[i * 3..(i + 1) * 3]).map(|(x, y)| x * y).sum();
            assert!((sim - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_blobs_get_one_prototype_each() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rows = Vec::new();
        for _ in 0..10 {
            rows.push(vec![
                1.0 + rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                0.0,
            ]);
        }
        for _ in 0..10 {
            rows.push(vec![
                rng.gen_range(-0.05..0.05),
                1.0 + rng.gen_range(-0.05..0.05),
                0.0,
            ]);
        }
        let e = embeddings_from(rows);
        let dc = suggest_density_radius(&e, 0.2);
        let (protos, assignments) = density_peaks(&e, 2, dc, 10.0).unwrap();
        assert_eq!(protos.len(), 2);
        let first = &assignments[..10];
        let second = &assignments[10..];
        assert!(first.iter().all(|&a| a == first[0]));
        assert!(second.iter().all(|&a| a == second[0]));
        assert_ne!(first[0], second[0]);
        // oracle agreement
        let (_, oracle_assign) = brute_force_peaks(&e, 2, dc);
        assert_eq!(assignments, oracle_assign);
    }

    #[test]
    fn matches_brute_force_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _case in 0..10 {
            let n = rng.gen_range(4..32);
            let m = rng.gen_range(1..=n.min(6));
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let e = embeddings_from(rows);
            let dc = suggest_density_radius(&e, 0.1);
            let (protos, assignments) = density_peaks(&e, m, dc, 10.0).unwrap();
            let (_, oracle_assign) = brute_force_peaks(&e, m, dc);
            assert_eq!(assignments, oracle_assign);
            assert_eq!(protos.len(), m);
            for p in &protos {
                let norm: f64 = p.centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9);
                assert!(p.gamma >= GAMMA_MIN);
            }
        }
    }

    #[test]
    fn permutation_invariance_up_to_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let e = embeddings_from(rows.clone());
        let dc = suggest_density_radius(&e, 0.1);
        let (_, a1) = density_peaks(&e, 3, dc, 10.0).unwrap();
        let perm: Vec<usize> = vec![5, 2, 9, 0, 11, 7, 1, 3, 10, 4, 6, 8];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let e2 = embeddings_from(permuted);
        let (_, a2) = density_peaks(&e2, 3, dc, 10.0).unwrap();
        // same partition structure: co-membership must be preserved
        for x in 0..12 {
            for y in 0..12 {
                let together1 = a1[perm[x]] == a1[perm[y]];
                let together2 = a2[x] == a2[y];
                assert_eq!(together1, together2, "pair {x},{y}");
            }
        }
    }

    #[test]
    fn density_peaks_contract_errors() {
        let e = embeddings_from(vec![vec![1.0, 0.0]]);
        assert!(density_peaks(&e, 2, 0.5, 10.0).is_err());
        assert!(density_peaks(&e, 0, 0.5, 10.0).is_err());
    }

    #[test]
    fn assign_exact_match_ties_and_exhaustive_scan() {
        let protos: Vec<Prototype<f64>> = vec![
            Prototype {
                id: 0,
                centroid: unit(vec![1.0, 0.0]),
                gamma: 1.0,
                member_count: 1,
            },
            Prototype {
                id: 1,
                centroid: unit(vec![0.0, 1.0]),
                gamma: 1.0,
                member_count: 1,
            },
        ];
        assert_eq!(assign(&unit::<f64>(vec![1.0, 0.0]), &protos), 0);
        assert_eq!(assign(&unit::<f64>(vec![0.0, 1.0]), &protos), 1);
        // exactly between the two → lower id
        assert_eq!(assign(&unit::<f64>(vec![1.0, 1.0]), &protos), 0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let q = unit::<f64>(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let got = assign(&q, &protos);
            // exhaustive scan
            let sims: Vec<f64> = protos
                .iter()
                .map(|p| p.centroid.iter().zip(&q).map(|(a, b)| a * b).sum())
                .collect();
            let want = if sims[0] >= sims[1] { 0 } else { 1 };
            assert_eq!(got, want);
        }
    }

    #[test]
    fn fifo_capacity_and_eviction_order() {
        let mut bank = DiscriminationBank::<f64>::new(1);
        for batch in 1..=11u64 {
            let e = embeddings_from(vec![vec![batch as f64, 1.0]]);
            bank.update(&e, &[0], batch).unwrap();
        }
        let q = bank.contrastive_set(0);
        assert_eq!(q.len(), QUEUE_CAP);
        let tags: Vec<u64> = q.iter().map(|e| e.batch_id).collect();
        assert_eq!(tags, (2..=11).collect::<Vec<u64>>());
    }

    #[test]
    fn untouched_queue_is_unchanged_and_pooling_matches_recomputation() {
        let mut bank = DiscriminationBank::<f64>::new(2);
        let e = embeddings_from(vec![vec![1.0, 0.2], vec![0.9, -0.1], vec![0.1, 1.0]]);
        bank.update(&e, &[0, 0, 0], 1).unwrap();
        assert!(bank.contrastive_set(1).is_empty());
        assert_eq!(bank.contrastive_set(0).len(), 1);
        // pooled entry equals normalized mean of the members
        let d = 2;
        let mut mean = vec![0.0f64; d];
        for i in 0..3 {
            for (m, &v) in mean.iter_mut().zip(&e.data()[i * d..(i + 1) * d]) {
                *m += v / 3.0;
            }
        }
        let norm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let expect: Vec<f64> = mean.iter().map(|v| v / norm).collect();
        let got = &bank.contrastive_set(0)[0].z;
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_set_growth() {
        let mut bank = DiscriminationBank::<f64>::new(3);
        assert!(bank.contrastive_set(2).is_empty());
        let e = embeddings_from(vec![vec![0.3, 0.8]]);
        bank.update(&e, &[2], 7).unwrap();
        assert_eq!(bank.contrastive_set(2).len(), 1);
        assert!(bank.contrastive_set(2).len() <= QUEUE_CAP);
        assert_eq!(bank.contrastive_set(2)[0].prototype, 2);
    }
}
