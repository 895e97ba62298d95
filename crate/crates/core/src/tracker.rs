//! Identity tracking by constrained nearest-centre assignment.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

pub const DEFAULT_MAX_MISSES: u32 = 30;
/// Above this many tracks or detections the greedy assignment is used.
pub const EXACT_LIMIT: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonTrack {
    pub id: u64,
    pub last_bbox: BBox,
    pub last_center: (f32, f32),
    pub misses: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(track index, detection index)` pairs, sorted by track index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

impl Assignment {
    pub fn cost(&self, tracks: &[PersonTrack], detections: &[BBox]) -> f64 {
        self.pairs.iter().map(|&(t, d)| center_distance(&tracks[t], &detections[d])).sum()
    }
}

pub fn center_distance(track: &PersonTrack, det: &BBox) -> f64 {
    let (x, y) = det.center();
    let dx = (x - track.last_center.0) as f64;
    let dy = (y - track.last_center.1) as f64;
    (dx * dx + dy * dy).sqrt()
}

/// A detection may continue a track only if its centre lies inside the
/// track's last box.
pub fn admissible(track: &PersonTrack, det: &BBox) -> bool {
    let (x, y) = det.center();
    track.last_bbox.contains(x, y)
}

/// Among admissible pairs, picks a matching with the most pairs and, among
/// those, the least total centre distance. Exact up to [`EXACT_LIMIT`],
/// greedy nearest-first above it.
pub fn assign(tracks: &[PersonTrack], detections: &[BBox]) -> Assignment {
    let pairs = if tracks.len() <= EXACT_LIMIT && detections.len() <= EXACT_LIMIT {
        exact_pairs(tracks, detections)
    } else {
        greedy_pairs(tracks, detections)
    };
    finish(pairs, tracks.len(), detections.len())
}

fn finish(mut pairs: Vec<(usize, usize)>, n_tracks: usize, n_dets: usize) -> Assignment {
    pairs.sort_unstable();
    let mut t_used = vec![false; n_tracks];
    let mut d_used = vec![false; n_dets];
    for &(t, d) in &pairs {
        t_used[t] = true;
        d_used[d] = true;
    }
    Assignment {
        pairs,
        unmatched_tracks: (0..n_tracks).filter(|&t| !t_used[t]).collect(),
        unmatched_detections: (0..n_dets).filter(|&d| !d_used[d]).collect(),
    }
}

/// Greedy: repeatedly take the cheapest admissible pair; ties by track then detection.
pub fn greedy_pairs(tracks: &[PersonTrack], detections: &[BBox]) -> Vec<(usize, usize)> {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (t, tr) in tracks.iter().enumerate() {
        for (d, det) in detections.iter().enumerate() {
            if admissible(tr, det) {
                cand.push((center_distance(tr, det), t, d));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut t_used = vec![false; tracks.len()];
    let mut d_used = vec![false; detections.len()];
    let mut pairs = Vec::new();
    for (_, t, d) in cand {
        if !t_used[t] && !d_used[d] {
            t_used[t] = true;
            d_used[d] = true;
            pairs.push((t, d));
        }
    }
    pairs
}

/// Optimal assignment: inadmissible pairs cost more than every admissible
/// pair combined, so the optimum first maximizes the number of admissible
/// pairs and then minimizes their total distance.
fn exact_pairs(tracks: &[PersonTrack], detections: &[BBox]) -> Vec<(usize, usize)> {
    let (n, m) = (tracks.len(), detections.len());
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let mut cost = vec![vec![f64::NAN; m]; n];
    let mut total = 0.0;
    for (t, tr) in tracks.iter().enumerate() {
        for (d, det) in detections.iter().enumerate() {
            if admissible(tr, det) {
                let c = center_distance(tr, det);
                cost[t][d] = c;
                total += c;
            }
        }
    }
    let big = 2.0 * total + 1.0;
    // Square matrix; padding rows/columns and inadmissible cells cost `big`.
    let k = n.max(m);
    let matrix: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| if i < n && j < m && !cost[i][j].is_nan() { cost[i][j] } else { big })
                .collect()
        })
        .collect();
    let row_to_col = hungarian(&matrix);
    row_to_col
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < n && j < m && !cost[i][j].is_nan())
        .map(|(i, &j)| (i, j))
        .collect()
}

/// Minimum-cost perfect matching on a square matrix (shortest augmenting
/// paths with potentials). Returns the column assigned to each row.
pub fn hungarian(a: &[Vec<f64>]) -> Vec<usize> {
    let n = a.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub max_misses: u32,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            max_misses: DEFAULT_MAX_MISSES,
        }
    }
}

/// Result of one tracker update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackUpdate {
    /// Track id for each detection, in detection order.
    pub detection_ids: Vec<u64>,
    pub spawned: Vec<u64>,
    pub dropped: Vec<u64>,
}

/// Live tracks, kept in ascending id order.
#[derive(Clone, Debug, Default)]
pub struct Tracker {
    pub config: TrackerConfig,
    tracks: Vec<PersonTrack>,
    next_id: u64,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn tracks(&self) -> &[PersonTrack] {
        &self.tracks
    }

    pub fn update(&mut self, detections: &[BBox]) -> TrackUpdate {
        let a = assign(&self.tracks, detections);
        let mut ids = vec![0u64; detections.len()];
        for &(t, d) in &a.pairs {
            let tr = &mut self.tracks[t];
            tr.last_bbox = detections[d];
            tr.last_center = detections[d].center();
            tr.misses = 0;
            ids[d] = tr.id;
        }
        for &t in &a.unmatched_tracks {
            self.tracks[t].misses += 1;
        }
        let max = self.config.max_misses;
        let mut dropped = Vec::new();
        self.tracks.retain(|t| {
            let keep = t.misses < max;
            if !keep {
                dropped.push(t.id);
            }
            keep
        });
        let mut spawned = Vec::new();
        for &d in &a.unmatched_detections {
            let id = self.next_id;
            self.next_id += 1;
            self.tracks.push(PersonTrack {
                id,
                last_bbox: detections[d],
                last_center: detections[d].center(),
                misses: 0,
            });
            ids[d] = id;
            spawned.push(id);
        }
        TrackUpdate {
            detection_ids: ids,
            spawned,
            dropped,
        }
    }
}
