//! Outer level: target ordering (and, on the time grid, encounter epochs)
//! by simulated annealing over permutations.
//!
//! Three encodings share one permutation type. Time-free and time-uniform
//! tours are plain permutations of the target ids `1..=N`. Time-discrete
//! tours are permutations of `1..=N·D`: position `h` (1-based) stands for
//! grid epoch τ_h = h·ΔT, values `≤ N` are targets met at that epoch and larger
//! values are blanks.

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phasing_heuristic::CostTensor;

pub const MAX_BRUTE_FORCE_N: usize = 8;
pub const MAX_BRUTE_FORCE_SLOTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TourError {
    #[error("exhaustive search over {0} elements refused (limit {1})")]
    SizeGuard(usize, usize),
    #[error("not a permutation of 1..={0}")]
    NotPermutation(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentedPermutation(pub Vec<u32>);

impl AugmentedPermutation {
    pub fn identity(len: usize) -> Self {
        Self((1..=len as u32).collect())
    }

    pub fn random(len: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::identity(len);
        p.0.shuffle(rng);
        p
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Distinct and complete over `1..=len`.
    pub fn is_valid(&self) -> bool {
        let n = self.0.len();
        let mut seen = vec![false; n + 1];
        for &v in &self.0 {
            let v = v as usize;
            if v == 0 || v > n || seen[v] {
                return false;
            }
            seen[v] = true;
        }
        true
    }
}

/// Target sequence and grid epochs. `slots[k]` is the grid index h of the
/// k-th encounter, so `t[k] = slots[k]·ΔT`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecodedTour {
    pub p: Vec<u32>,
    pub slots: Vec<usize>,
}

impl DecodedTour {
    pub fn epochs(&self, dt_grid: f64) -> Vec<f64> {
        self.slots.iter().map(|&h| h as f64 * dt_grid).collect()
    }
}

/// Reads targets (values `≤ n`) and their 1-based positions out of `pi`.
pub fn decode(pi: &AugmentedPermutation, n: usize) -> DecodedTour {
    let (p, slots) =
        pi.0.iter()
            .enumerate()
            .filter(|(_, &v)| v as usize <= n)
            .map(|(h, &v)| (v, h + 1))
            .unzip();
    DecodedTour { p, slots }
}

/// Inverse of [`decode`]: targets at their slots, blanks `n+1..` filled in
/// ascending order.
pub fn encode(tour: &DecodedTour, n: usize, d: usize) -> AugmentedPermutation {
    let len = n * d;
    let mut out = vec![0u32; len];
    for (&v, &h) in tour.p.iter().zip(&tour.slots) {
        out[h - 1] = v;
    }
    let mut blank = n as u32;
    for slot in out.iter_mut().filter(|v| **v == 0) {
        blank += 1;
        *slot = blank;
    }
    AugmentedPermutation(out)
}

/// Time-free cost: Hohmann costs along `p` starting from the chaser.
pub fn tour_cost_time_free(p: &[u32], cost: &CostTensor) -> f64 {
    let mut prev = 0usize;
    let mut total = 0.0;
    for &v in p {
        total += cost.at2(prev, v as usize - 1);
        prev = v as usize;
    }
    total
}

/// Time-uniform cost: leg k uses slot k of the tensor.
pub fn tour_cost_time_uniform(p: &[u32], cost: &CostTensor) -> f64 {
    let mut prev = 0usize;
    let mut total = 0.0;
    for (k, &v) in p.iter().enumerate() {
        total += cost.at3(prev, v as usize - 1, k);
        prev = v as usize;
    }
    total
}

/// Time-discrete cost of an augmented permutation over `n` targets.
pub fn tour_cost_time_discrete(pi: &[u32], n: usize, cost: &CostTensor) -> f64 {
    let mut prev = 0usize;
    let mut prev_h = 0usize;
    let mut total = 0.0;
    for (pos, &v) in pi.iter().enumerate() {
        let v = v as usize;
        if v <= n {
            let h = pos + 1;
            total += cost.at4(prev, v - 1, prev_h, h - prev_h);
            prev = v;
            prev_h = h;
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Move {
    Insert,
    Swap,
    Reverse,
    Scramble,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::Insert, Move::Swap, Move::Reverse, Move::Scramble];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Applies `mv` with explicit positions `i`, `j` (any order).
pub fn apply_move(pi: &AugmentedPermutation, mv: Move, i: usize, j: usize, rng: &mut impl Rng) -> AugmentedPermutation {
    let mut v = pi.0.clone();
    match mv {
        Move::Insert => {
            let e = v.remove(i);
            v.insert(j, e);
        }
        Move::Swap => v.swap(i, j),
        Move::Reverse => {
            let (a, b) = (i.min(j), i.max(j));
            v[a..=b].reverse();
        }
        Move::Scramble => {
            let (a, b) = (i.min(j), i.max(j));
            v[a..=b].shuffle(rng);
        }
    }
    AugmentedPermutation(v)
}

/// Random neighbor of `pi` under `mv`.
pub fn neighbor(pi: &AugmentedPermutation, mv: Move, rng: &mut impl Rng) -> AugmentedPermutation {
    let n = pi.len();
    if n < 2 {
        return pi.clone();
    }
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    apply_move(pi, mv, i, j, rng)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SAConfig {
    pub t0: f64,
    pub tf: f64,
    pub alpha: f64,
    /// Moves per temperature level; 0 means `len(pi)`.
    pub plateau: usize,
    pub max_iters: u64,
    pub seed: u64,
    /// Relative selection weights for insert, swap, reverse, scramble.
    pub move_weights: [f64; 4],
}

impl Default for SAConfig {
    fn default() -> Self {
        Self {
            t0: 10.0,
            tf: 1e-6,
            alpha: 0.95,
            plateau: 0,
            max_iters: u64::MAX,
            seed: 0,
            move_weights: [1.0; 4],
        }
    }
}

impl SAConfig {
    pub fn plateau_for(&self, len: usize) -> usize {
        if self.plateau == 0 {
            len.max(1)
        } else {
            self.plateau
        }
    }

    /// Temperature at iteration `k`.
    pub fn temperature(&self, k: u64, plateau: usize) -> f64 {
        self.t0 * self.alpha.powi((k / plateau as u64) as i32)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveStats {
    pub attempts: [u64; 4],
    pub accepted: [u64; 4],
    /// Moves whose candidate was cheaper than the current state.
    pub improvements: [u64; 4],
}

impl MoveStats {
    /// Share of all improving moves produced by each operator.
    pub fn improvement_frequency(&self) -> [f64; 4] {
        let total: u64 = self.improvements.iter().sum();
        let mut out = [0.0; 4];
        if total > 0 {
            for (o, &c) in out.iter_mut().zip(&self.improvements) {
                *o = c as f64 / total as f64;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AnnealHistory {
    pub iterations: u64,
    /// One entry per temperature level: (temperature, current cost, best cost).
    pub levels: Vec<(f64, f64, f64)>,
    pub moves: MoveStats,
}

/// Metropolis rule on a normalized cost change.
pub fn metropolis_accept(delta: f64, temperature: f64, rng: &mut impl Rng) -> bool {
    delta <= 0.0 || rng.gen::<f64>() < (-delta / temperature).exp()
}

/// Simulated annealing with geometric cooling. Cost changes are divided by
/// the initial cost, so temperatures are relative.
pub fn anneal<F>(cost_fn: F, initial: AugmentedPermutation, config: &SAConfig) -> (AugmentedPermutation, f64, AnnealHistory)
where
    F: Fn(&[u32]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let plateau = config.plateau_for(initial.len());
    let weights: f64 = config.move_weights.iter().sum();
    let mut current = initial;
    let mut c_cur = cost_fn(&current.0);
    let norm = if c_cur.abs() > 0.0 { c_cur.abs() } else { 1.0 };
    let mut best = current.clone();
    let mut c_best = c_cur;
    let mut hist = AnnealHistory::default();
    let mut k = 0u64;
    loop {
        let temp = config.temperature(k, plateau);
        if temp < config.tf || k >= config.max_iters {
            break;
        }
        let mut pick = rng.gen::<f64>() * weights;
        let mut mv = Move::Scramble;
        for m in Move::ALL {
            pick -= config.move_weights[m.index()];
            if pick < 0.0 {
                mv = m;
                break;
            }
        }
        let cand = neighbor(&current, mv, &mut rng);
        let c = cost_fn(&cand.0);
        let idx = mv.index();
        hist.moves.attempts[idx] += 1;
        if c < c_cur {
            hist.moves.improvements[idx] += 1;
        }
        if metropolis_accept((c - c_cur) / norm, temp, &mut rng) {
            hist.moves.accepted[idx] += 1;
            current = cand;
            c_cur = c;
            if c_cur < c_best {
                c_best = c_cur;
                best = current.clone();
            }
        }
        k += 1;
        if k.is_multiple_of(plateau as u64) {
            hist.levels.push((temp, c_cur, c_best));
        }
    }
    hist.iterations = k;
    (best, c_best, hist)
}

/// Which encoding a brute-force search enumerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    /// Plain permutations of `1..=n`.
    Sequence,
    /// Augmented permutations of `1..=n·d`, deduplicated by decoded tour.
    Grid { d: usize },
}

/// Exact optimum by enumeration.
pub fn brute_force_tour<F>(cost_fn: F, n: usize, encoding: Encoding) -> Result<(AugmentedPermutation, f64), TourError>
where
    F: Fn(&[u32]) -> f64,
{
    let mut best: Option<(AugmentedPermutation, f64)> = None;
    let mut consider = |pi: AugmentedPermutation| {
        let c = cost_fn(&pi.0);
        if best.as_ref().is_none_or(|(_, b)| c < *b) {
            best = Some((pi, c));
        }
    };
    match encoding {
        Encoding::Sequence => {
            if n > MAX_BRUTE_FORCE_N {
                return Err(TourError::SizeGuard(n, MAX_BRUTE_FORCE_N));
            }
            for p in (1..=n as u32).permutations(n) {
                consider(AugmentedPermutation(p));
            }
        }
        Encoding::Grid { d } => {
            let len = n * d;
            if len > MAX_BRUTE_FORCE_SLOTS {
                return Err(TourError::SizeGuard(len, MAX_BRUTE_FORCE_SLOTS));
            }
            for slots in (1..=len).combinations(n) {
                for p in (1..=n as u32).permutations(n) {
                    let tour = DecodedTour { p, slots: slots.clone() };
                    consider(encode(&tour, n, d));
                }
            }
        }
    }
    Ok(best.expect("at least one tour"))
}
