//! Self-adaptive differential evolution on an archipelago of islands, and
//! the two inner-level refinement problems built on it.
//!
//! Each island evolves its own population with one fixed mutation strategy
//! (rand/1, best/1, target-to-best/1 or best/2, all with binomial crossover).
//! Every individual carries its own F and Cr (jDE). Islands exchange their
//! best agents along the topology edges every few generations; the direction
//! of the exchange flips at each event. A collapsed population is partially
//! restarted ("epidemic"), sparing its best members.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lambert::LambertSolver;
use crate::leg_geometry::{leg_cost, LegBounds, LegParameters};
use crate::phasing_heuristic::MissionProblem;
use crate::trajectory_model::{mission_cost, MissionPlan};

pub const F_MIN: f64 = 0.1;
pub const F_MAX: f64 = 1.0;
pub const MIN_POPULATION: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeError {
    #[error("population of {0} is too small (need at least {MIN_POPULATION})")]
    PopulationTooSmall(usize),
    #[error("bad configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Rand1Bin,
    Best1Bin,
    TargetToBest1Bin,
    Best2Bin,
}

impl Strategy {
    fn donors(self) -> usize {
        match self {
            Strategy::Rand1Bin => 3,
            Strategy::Best1Bin | Strategy::TargetToBest1Bin => 2,
            Strategy::Best2Bin => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub genes: Vec<f64>,
    pub f: f64,
    pub cr: f64,
    pub fitness: f64,
}

/// Box bounds of the search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, DeError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(DeError::Config("bounds must be nonempty and of equal length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u)) {
            return Err(DeError::Config("bounds must be finite with lower <= upper".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self, DeError> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| v >= l && v <= u)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| if u > l { rng.gen_range(l..=u) } else { l })
            .collect()
    }

    /// Reflects an out-of-range gene once about the violated bound, then clamps.
    pub fn repair(&self, x: &mut [f64]) {
        for (v, (&l, &u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            if *v < l {
                *v = l + (l - *v);
            } else if *v > u {
                *v = u - (*v - u);
            }
            *v = v.clamp(l, u);
        }
    }

    fn normalized(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| if u > l { (v - l) / (u - l) } else { 0.0 })
            .collect()
    }
}

/// Directed migration edges for the forward tide; the backward tide uses the
/// reversed edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub islands: usize,
    pub edges: Vec<(usize, usize)>,
}

impl Topology {
    pub fn isolated(islands: usize) -> Self {
        Self { islands, edges: vec![] }
    }

    /// i → i+1 (mod n).
    pub fn ring(islands: usize) -> Self {
        let mut edges: Vec<(usize, usize)> = (0..islands).map(|i| (i, (i + 1) % islands)).filter(|(a, b)| a != b).collect();
        edges.dedup();
        Self { islands, edges }
    }

    /// `rings` concentric rings of `spokes` islands each; island id is
    /// `ring·spokes + spoke`. Forward edges run outward along each spoke and
    /// clockwise around each ring.
    pub fn radial(rings: usize, spokes: usize) -> Self {
        let id = |r: usize, s: usize| r * spokes + s;
        let mut edges = Vec::new();
        for r in 0..rings {
            for s in 0..spokes {
                if r + 1 < rings {
                    edges.push((id(r, s), id(r + 1, s)));
                }
                if spokes > 1 {
                    edges.push((id(r, s), id(r, (s + 1) % spokes)));
                }
            }
        }
        Self {
            islands: rings * spokes,
            edges,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tide {
    Forward,
    Backward,
}

impl Tide {
    pub fn flip(self) -> Self {
        match self {
            Tide::Forward => Tide::Backward,
            Tide::Backward => Tide::Forward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpidemicConfig {
    /// Normalized diversity below which an epidemic fires.
    pub threshold: f64,
    pub spare: usize,
    pub max_events: usize,
    pub min_gap: usize,
}

impl Default for EpidemicConfig {
    fn default() -> Self {
        Self {
            threshold: 1e-3,
            spare: 3,
            max_events: 5,
            min_gap: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeConfig {
    pub topology: Topology,
    /// One strategy per island.
    pub strategies: Vec<Strategy>,
    /// Individuals per island; `None` means max(30, 5·dim).
    pub pop_size: Option<usize>,
    /// Total objective evaluations over all islands.
    pub max_evals: u64,
    /// Generations between migrations; 0 disables migration.
    pub migration_period: usize,
    pub n_b: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub epidemic: EpidemicConfig,
    pub seed: u64,
}

impl DeConfig {
    /// The 16-island radial archipelago: rings from the centre outward run
    /// rand/1, target-to-best/1, best/1 and best/2.
    pub fn archipelago(seed: u64, max_evals: u64) -> Self {
        let rings = [Strategy::Rand1Bin, Strategy::TargetToBest1Bin, Strategy::Best1Bin, Strategy::Best2Bin];
        Self {
            topology: Topology::radial(4, 4),
            strategies: rings.iter().flat_map(|&s| [s; 4]).collect(),
            ..Self::single_island(Strategy::Rand1Bin, seed, max_evals)
        }
    }

    /// One island per strategy on a ring.
    pub fn small_archipelago(seed: u64, max_evals: u64) -> Self {
        Self {
            topology: Topology::ring(4),
            strategies: vec![Strategy::Rand1Bin, Strategy::TargetToBest1Bin, Strategy::Best1Bin, Strategy::Best2Bin],
            ..Self::single_island(Strategy::Rand1Bin, seed, max_evals)
        }
    }

    pub fn single_island(strategy: Strategy, seed: u64, max_evals: u64) -> Self {
        Self {
            topology: Topology::isolated(1),
            strategies: vec![strategy],
            pop_size: None,
            max_evals,
            migration_period: 50,
            n_b: 2,
            tau1: 0.1,
            tau2: 0.1,
            epidemic: EpidemicConfig::default(),
            seed,
        }
    }

    pub fn population_for(&self, dim: usize) -> usize {
        self.pop_size.unwrap_or_else(|| (5 * dim).max(30))
    }

    pub fn validate(&self, dim: usize) -> Result<(), DeError> {
        if self.strategies.len() != self.topology.islands || self.topology.islands == 0 {
            return Err(DeError::Config("one strategy per island is required".into()));
        }
        if self
            .topology
            .edges
            .iter()
            .any(|&(a, b)| a >= self.topology.islands || b >= self.topology.islands)
        {
            return Err(DeError::Config("topology edge out of range".into()));
        }
        let np = self.population_for(dim);
        if np < MIN_POPULATION {
            return Err(DeError::PopulationTooSmall(np));
        }
        if self.n_b >= np {
            return Err(DeError::Config("n_b must be smaller than the population".into()));
        }
        Ok(())
    }
}

/// Independent per-island stream derived from the master seed.
pub fn island_rng(master: u64, island: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(island as u64 + 1);
    rng
}

/// `count` distinct indices in `0..n`, none equal to `exclude`.
pub fn pick_donors(n: usize, exclude: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    sample(rng, n - 1, count)
        .into_iter()
        .map(|i| if i >= exclude { i + 1 } else { i })
        .collect()
}

/// Mutant vector for `target` under `strategy`.
pub fn mutate(strategy: Strategy, population: &[Individual], target: usize, best: usize, f: f64, rng: &mut impl Rng) -> Result<Vec<f64>, DeError> {
    if population.len() < MIN_POPULATION {
        return Err(DeError::PopulationTooSmall(population.len()));
    }
    let d = pick_donors(population.len(), target, strategy.donors(), rng);
    let g = |i: usize| &population[i].genes;
    let x = g(target);
    let out = (0..x.len())
        .map(|j| match strategy {
            Strategy::Rand1Bin => g(d[0])[j] + f * (g(d[1])[j] - g(d[2])[j]),
            Strategy::Best1Bin => g(best)[j] + f * (g(d[0])[j] - g(d[1])[j]),
            Strategy::TargetToBest1Bin => x[j] + f * (g(best)[j] - x[j]) + f * (g(d[0])[j] - g(d[1])[j]),
            Strategy::Best2Bin => g(best)[j] + f * (g(d[0])[j] - g(d[1])[j]) + f * (g(d[2])[j] - g(d[3])[j]),
        })
        .collect();
    Ok(out)
}

/// Binomial crossover; at least one gene always comes from the mutant.
pub fn crossover(target: &[f64], mutant: &[f64], cr: f64, rng: &mut impl Rng) -> Vec<f64> {
    let forced = rng.gen_range(0..target.len());
    target
        .iter()
        .zip(mutant)
        .enumerate()
        .map(|(j, (&t, &m))| if j == forced || rng.gen::<f64>() < cr { m } else { t })
        .collect()
}

/// jDE resampling of the control parameters.
pub fn jde_update(f: f64, cr: f64, tau1: f64, tau2: f64, rng: &mut impl Rng) -> (f64, f64) {
    let f_new = if rng.gen::<f64>() < tau1 {
        F_MIN + rng.gen::<f64>() * (F_MAX - F_MIN)
    } else {
        f
    };
    let cr_new = if rng.gen::<f64>() < tau2 { rng.gen::<f64>() } else { cr };
    (f_new, cr_new)
}

/// RMS pairwise distance of the population in the unit-normalized box,
/// divided by the unit-box diagonal.
pub fn diversity(population: &[Individual], bounds: &Bounds) -> f64 {
    let n = population.len();
    if n < 2 {
        return 0.0;
    }
    let dim = bounds.dim();
    let mut mean = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for ind in population {
        for (j, v) in bounds.normalized(&ind.genes).into_iter().enumerate() {
            mean[j] += v;
            sq[j] += v * v;
        }
    }
    let nf = n as f64;
    // mean over pairs of |xi - xj|^2 = 2n/(n-1) * total variance
    let var: f64 = mean.iter().zip(&sq).map(|(m, s)| (s / nf - (m / nf).powi(2)).max(0.0)).sum();
    (2.0 * nf / (nf - 1.0) * var).sqrt() / (dim as f64).sqrt()
}

fn best_index(population: &[Individual]) -> usize {
    population
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.fitness.total_cmp(&b.1.fitness))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn random_individual(bounds: &Bounds, rng: &mut impl Rng) -> Individual {
    Individual {
        genes: bounds.sample(rng),
        f: F_MIN + rng.gen::<f64>() * (F_MAX - F_MIN),
        cr: rng.gen::<f64>(),
        fitness: f64::INFINITY,
    }
}

/// Reinitializes all but the `spare` best individuals when the diversity is
/// below `threshold`. Returns the indices that were reinitialized (their
/// fitness is left at +∞ for the caller to evaluate); empty when nothing fired.
pub fn epidemic_check(population: &mut [Individual], bounds: &Bounds, spare: usize, threshold: f64, rng: &mut impl Rng) -> Vec<usize> {
    if diversity(population, bounds) >= threshold {
        return vec![];
    }
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| population[a].fitness.total_cmp(&population[b].fitness));
    let hit: Vec<usize> = order.into_iter().skip(spare.max(1)).collect();
    for &i in &hit {
        population[i] = random_individual(bounds, rng);
    }
    hit
}

#[derive(Debug, Clone)]
pub struct Island {
    pub strategy: Strategy,
    pub population: Vec<Individual>,
    pub rng: ChaCha8Rng,
    pub generation: usize,
    pub epidemics: usize,
    last_epidemic: Option<usize>,
}

impl Island {
    /// Random population; `seeds` (clipped into bounds) replace its first members.
    pub fn new<O>(objective: &O, bounds: &Bounds, strategy: Strategy, size: usize, mut rng: ChaCha8Rng, seeds: &[Vec<f64>]) -> Result<Self, DeError>
    where
        O: Fn(&[f64]) -> f64 + Sync,
    {
        if size < MIN_POPULATION {
            return Err(DeError::PopulationTooSmall(size));
        }
        let mut population: Vec<Individual> = (0..size).map(|_| random_individual(bounds, &mut rng)).collect();
        for (ind, seed) in population.iter_mut().zip(seeds) {
            if seed.len() != bounds.dim() {
                return Err(DeError::Config("seed length differs from the problem dimension".into()));
            }
            ind.genes.clone_from(seed);
            bounds.repair(&mut ind.genes);
        }
        evaluate_all(objective, &mut population, None);
        Ok(Self {
            strategy,
            population,
            rng,
            generation: 0,
            epidemics: 0,
            last_epidemic: None,
        })
    }

    pub fn best(&self) -> &Individual {
        &self.population[best_index(&self.population)]
    }

    /// One synchronous generation plus the epidemic check. Returns the
    /// number of objective evaluations spent.
    pub fn evolve<O>(&mut self, objective: &O, bounds: &Bounds, config: &DeConfig) -> usize
    where
        O: Fn(&[f64]) -> f64 + Sync,
    {
        let best = best_index(&self.population);
        let mut trials: Vec<Individual> = Vec::with_capacity(self.population.len());
        for i in 0..self.population.len() {
            let ind = &self.population[i];
            let (f, cr) = jde_update(ind.f, ind.cr, config.tau1, config.tau2, &mut self.rng);
            let mutant = mutate(self.strategy, &self.population, i, best, f, &mut self.rng).expect("population size checked");
            let mut genes = crossover(&ind.genes, &mutant, cr, &mut self.rng);
            bounds.repair(&mut genes);
            trials.push(Individual {
                genes,
                f,
                cr,
                fitness: f64::INFINITY,
            });
        }
        evaluate_all(objective, &mut trials, None);
        let mut evals = trials.len();
        for (cur, trial) in self.population.iter_mut().zip(trials) {
            if trial.fitness <= cur.fitness {
                *cur = trial;
            }
        }
        self.generation += 1;

        let ep = &config.epidemic;
        let gap_ok = self.last_epidemic.is_none_or(|g| self.generation - g >= ep.min_gap);
        if self.epidemics < ep.max_events && gap_ok {
            let hit = epidemic_check(&mut self.population, bounds, ep.spare, ep.threshold, &mut self.rng);
            if !hit.is_empty() {
                evals += hit.len();
                evaluate_all(objective, &mut self.population, Some(&hit));
                self.epidemics += 1;
                self.last_epidemic = Some(self.generation);
            }
        }
        evals
    }
}

fn evaluate_all<O>(objective: &O, population: &mut [Individual], only: Option<&[usize]>)
where
    O: Fn(&[f64]) -> f64 + Sync,
{
    match only {
        None => population.par_iter_mut().for_each(|ind| ind.fitness = objective(&ind.genes)),
        Some(idx) => {
            let vals: Vec<f64> = idx.par_iter().map(|&i| objective(&population[i].genes)).collect();
            for (&i, v) in idx.iter().zip(vals) {
                population[i].fitness = v;
            }
        }
    }
}

/// Copies the `n_b` best of every island along the tide's edges, replacing
/// the destination's worst. All migrants are taken before any island is
/// modified.
pub fn migrate(islands: &mut [Island], topology: &Topology, n_b: usize, tide: Tide) {
    if n_b == 0 {
        return;
    }
    let emigrants: Vec<Vec<Individual>> = islands
        .iter()
        .map(|isl| {
            let mut order: Vec<usize> = (0..isl.population.len()).collect();
            order.sort_by(|&a, &b| isl.population[a].fitness.total_cmp(&isl.population[b].fitness));
            order.iter().take(n_b).map(|&i| isl.population[i].clone()).collect()
        })
        .collect();
    let mut incoming: Vec<Vec<Individual>> = vec![Vec::new(); islands.len()];
    for &(a, b) in &topology.edges {
        let (src, dst) = match tide {
            Tide::Forward => (a, b),
            Tide::Backward => (b, a),
        };
        incoming[dst].extend(emigrants[src].iter().cloned());
    }
    for (isl, mut arrivals) in islands.iter_mut().zip(incoming) {
        if arrivals.is_empty() {
            continue;
        }
        arrivals.sort_by(|a, b| a.fitness.total_cmp(&b.fitness));
        let mut order: Vec<usize> = (0..isl.population.len()).collect();
        order.sort_by(|&a, &b| isl.population[b].fitness.total_cmp(&isl.population[a].fitness));
        // never overwrite the island's own best
        let room = isl.population.len() - 1;
        for (slot, ind) in order.into_iter().take(room).zip(arrivals) {
            isl.population[slot] = ind;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeHistory {
    /// Global best fitness after every generation (index 0 is the initial population).
    pub best: Vec<f64>,
    pub evaluations: u64,
    pub generations: usize,
    pub migrations: usize,
    pub epidemics: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeResult {
    pub genes: Vec<f64>,
    pub fitness: f64,
    pub history: DeHistory,
}

pub fn de_optimize<O>(objective: O, bounds: &Bounds, config: &DeConfig) -> Result<DeResult, DeError>
where
    O: Fn(&[f64]) -> f64 + Sync,
{
    de_optimize_seeded(objective, bounds, config, &[])
}

/// [`de_optimize`] with `seeds` injected into every island's initial population.
pub fn de_optimize_seeded<O>(objective: O, bounds: &Bounds, config: &DeConfig, seeds: &[Vec<f64>]) -> Result<DeResult, DeError>
where
    O: Fn(&[f64]) -> f64 + Sync,
{
    config.validate(bounds.dim())?;
    let np = config.population_for(bounds.dim());
    let mut islands = config
        .strategies
        .iter()
        .enumerate()
        .map(|(i, &s)| Island::new(&objective, bounds, s, np, island_rng(config.seed, i), seeds))
        .collect::<Result<Vec<_>, _>>()?;
    let mut hist = DeHistory {
        evaluations: (np * islands.len()) as u64,
        ..DeHistory::default()
    };
    let global_best = |isl: &[Island]| {
        isl.iter()
            .map(|i| i.best())
            .min_by(|a, b| a.fitness.total_cmp(&b.fitness))
            .expect("at least one island")
            .clone()
    };
    hist.best.push(global_best(&islands).fitness);
    let per_gen = (np * islands.len()) as u64;
    let mut tide = Tide::Forward;
    while hist.evaluations + per_gen <= config.max_evals {
        let evals: usize = islands.par_iter_mut().map(|isl| isl.evolve(&objective, bounds, config)).sum();
        hist.evaluations += evals as u64;
        hist.generations += 1;
        if config.migration_period > 0 && hist.generations.is_multiple_of(config.migration_period) {
            migrate(&mut islands, &config.topology, config.n_b, tide);
            tide = tide.flip();
            hist.migrations += 1;
        }
        hist.best.push(global_best(&islands).fitness);
    }
    hist.epidemics = islands.iter().map(|i| i.epidemics).sum();
    let best = global_best(&islands);
    Ok(DeResult {
        genes: best.genes,
        fitness: best.fitness,
        history: hist,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InnerMode {
    TimeFixed,
    TimeFree,
}

/// A refinement problem over a fixed encounter sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerProblem {
    pub mode: InnerMode,
    pub sequence: Vec<u32>,
    /// Reference encounter epochs t̄_1..t̄_N, s.
    pub nominal_epochs: Vec<f64>,
    pub leg_bounds: LegBounds,
}

impl InnerProblem {
    /// Bounds of t_1..t_{N-1}: halfway to the neighboring reference epochs
    /// (t̄_0 = 0). The last epoch stays fixed.
    pub fn epoch_bounds(&self) -> Vec<(f64, f64)> {
        let t = &self.nominal_epochs;
        (0..t.len().saturating_sub(1))
            .map(|k| {
                let prev = if k == 0 { 0.0 } else { t[k - 1] };
                (t[k] - (t[k] - prev) / 2.0, t[k] + (t[k + 1] - t[k]) / 2.0)
            })
            .collect()
    }

    /// Search bounds of the time-free vector: 6 genes per leg, then the free epochs.
    pub fn time_free_bounds(&self) -> Bounds {
        let n = self.sequence.len();
        let (lo6, hi6) = (self.leg_bounds.lower(), self.leg_bounds.upper());
        let mut lo: Vec<f64> = (0..n).flat_map(|_| lo6).collect();
        let mut hi: Vec<f64> = (0..n).flat_map(|_| hi6).collect();
        for (l, h) in self.epoch_bounds() {
            lo.push(l);
            hi.push(h);
        }
        Bounds { lower: lo, upper: hi }
    }

    /// Epochs encoded by a time-free vector.
    pub fn epochs_of(&self, genes: &[f64]) -> Vec<f64> {
        let n = self.sequence.len();
        let mut t: Vec<f64> = genes[6 * n..].to_vec();
        t.push(*self.nominal_epochs.last().expect("nonempty sequence"));
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub plan: MissionPlan,
    /// Penalized objective of `plan` (equals the true ΔV when all legs are feasible).
    pub dv_total: f64,
    pub evaluations: u64,
    /// Global best per generation; for the time-fixed mode, the sum over legs
    /// of each leg's final best is the only entry.
    pub history: DeHistory,
}

fn leg_seed(master: u64, leg: usize) -> u64 {
    master ^ (leg as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Optimizes the leg parameters (and in time-free mode the free epochs) of a
/// fixed sequence. In time-fixed mode `config.max_evals` is spent per leg; in
/// time-free mode it is the budget of the single joint problem. Every plan in
/// `seed_plans` is injected into the initial populations.
pub fn solve_inner(
    problem: &InnerProblem,
    mission: &MissionProblem,
    solver: &LambertSolver,
    config: &DeConfig,
    seed_plans: &[MissionPlan],
) -> Result<InnerSolution, DeError> {
    let n = problem.sequence.len();
    if n == 0 || problem.nominal_epochs.len() != n {
        return Err(DeError::Config("sequence and epochs must be nonempty and of equal length".into()));
    }
    let k = &mission.constants;
    match problem.mode {
        InnerMode::TimeFixed => {
            let bounds = Bounds::new(problem.leg_bounds.lower().to_vec(), problem.leg_bounds.upper().to_vec())?;
            let t = &problem.nominal_epochs;
            let mut legs = Vec::with_capacity(n);
            let mut total = 0.0;
            let mut hist = DeHistory::default();
            for i in 0..n {
                let (dep_idx, t_dep) = if i == 0 {
                    (0, 0.0)
                } else {
                    (problem.sequence[i - 1] as usize, t[i - 1])
                };
                let dep = k.circular_state(mission.body(dep_idx), t_dep);
                let arr = mission.body(problem.sequence[i] as usize);
                let t_arr = t[i];
                let obj = |x: &[f64]| leg_cost(solver, &dep, arr, t_dep, t_arr, &LegParameters::from_slice(x));
                let seeds: Vec<Vec<f64>> = seed_plans.iter().map(|p| p.legs[i].to_array().to_vec()).collect();
                let cfg = DeConfig {
                    seed: leg_seed(config.seed, i),
                    ..config.clone()
                };
                let res = de_optimize_seeded(obj, &bounds, &cfg, &seeds)?;
                total += res.fitness;
                hist.evaluations += res.history.evaluations;
                hist.generations += res.history.generations;
                hist.migrations += res.history.migrations;
                hist.epidemics += res.history.epidemics;
                legs.push(LegParameters::from_slice(&res.genes));
            }
            hist.best.push(total);
            Ok(InnerSolution {
                plan: MissionPlan {
                    sequence: problem.sequence.clone(),
                    epochs: t.clone(),
                    legs,
                },
                dv_total: total,
                evaluations: hist.evaluations,
                history: hist,
            })
        }
        InnerMode::TimeFree => {
            let bounds = problem.time_free_bounds();
            let obj = |x: &[f64]| mission_cost(mission, solver, &problem.sequence, &problem.epochs_of(x), &x[..6 * n]);
            let seeds: Vec<Vec<f64>> = seed_plans
                .iter()
                .map(|p| {
                    let mut g: Vec<f64> = p.legs.iter().flat_map(|l| l.to_array()).collect();
                    g.extend_from_slice(&p.epochs[..n - 1]);
                    g
                })
                .collect();
            let res = de_optimize_seeded(obj, &bounds, config, &seeds)?;
            let legs = res.genes[..6 * n].chunks(6).map(LegParameters::from_slice).collect();
            Ok(InnerSolution {
                plan: MissionPlan {
                    sequence: problem.sequence.clone(),
                    epochs: problem.epochs_of(&res.genes),
                    legs,
                },
                dv_total: res.fitness,
                evaluations: res.history.evaluations,
                history: res.history,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn pop(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Individual> {
        let b = Bounds::uniform(dim, -5.0, 5.0).unwrap();
        (0..n)
            .map(|_| {
                let mut i = random_individual(&b, rng);
                i.fitness = sphere(&i.genes);
                i
            })
            .collect()
    }

    #[test]
    fn zero_scale_mutants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = pop(10, 3, &mut rng);
        let best = best_index(&p);
        let m = mutate(Strategy::Rand1Bin, &p, 4, best, 0.0, &mut rng).unwrap();
        assert!(p.iter().enumerate().any(|(i, ind)| i != 4 && ind.genes == m));
        let m = mutate(Strategy::Best1Bin, &p, 4, best, 0.0, &mut rng).unwrap();
        assert_eq!(m, p[best].genes);
        let m = mutate(Strategy::Best2Bin, &p, 4, best, 0.0, &mut rng).unwrap();
        assert_eq!(m, p[best].genes);
        assert!(matches!(
            mutate(Strategy::Best2Bin, &p[..4], 0, 0, 0.5, &mut rng),
            Err(DeError::PopulationTooSmall(4))
        ));
    }

    #[test]
    fn donors_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let n = rng.gen_range(5..40);
            let t = rng.gen_range(0..n);
            let d = pick_donors(n, t, 4, &mut rng);
            assert!(d.iter().all(|&i| i < n && i != t));
            for a in 0..4 {
                for b in a + 1..4 {
                    assert_ne!(d[a], d[b]);
                }
            }
        }
    }

    #[test]
    fn jde_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert_eq!(jde_update(0.5, 0.9, 0.0, 0.0, &mut rng), (0.5, 0.9));
            let (f, cr) = jde_update(0.5, 0.9, 1.0, 1.0, &mut rng);
            assert!((F_MIN..=F_MAX).contains(&f) && (0.0..=1.0).contains(&cr));
        }
    }

    #[test]
    fn repair_keeps_bounds() {
        let b = Bounds::uniform(3, -1.0, 1.0).unwrap();
        let mut x = vec![-1.5, 1.2, 7.0];
        b.repair(&mut x);
        assert_eq!(x[0], -0.5);
        assert!((x[1] - 0.8).abs() < 1e-15);
        assert_eq!(x[2], -1.0);
    }

    #[test]
    fn epidemic_branches() {
        let b = Bounds::uniform(4, -5.0, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = pop(20, 4, &mut rng);
        let before = p.clone();
        assert!(epidemic_check(&mut p, &b, 3, 1e-3, &mut rng).is_empty());
        assert_eq!(p, before);

        let mut same: Vec<Individual> = (0..20)
            .map(|i| Individual {
                genes: vec![1.0; 4],
                f: 0.5,
                cr: 0.5,
                fitness: 4.0 + i as f64,
            })
            .collect();
        same[7].fitness = 0.5;
        let hit = epidemic_check(&mut same, &b, 3, 1e-3, &mut rng);
        assert_eq!(hit.len(), 17);
        assert!(!hit.contains(&7));
        assert_eq!(same[7].fitness, 0.5);
        assert!(diversity(&same, &b) > 1e-3);
    }

    #[test]
    fn migration_semantics() {
        let b = Bounds::uniform(2, -5.0, 5.0).unwrap();
        let mk = |seed| Island::new(&sphere, &b, Strategy::Rand1Bin, 10, island_rng(seed, 0), &[]).unwrap();
        let mut isl = vec![mk(1), mk(2)];
        let (b0, b1) = (isl[0].best().clone(), isl[1].best().clone());
        let topo = Topology::ring(2);
        migrate(&mut isl, &topo, 0, Tide::Forward);
        assert_eq!(isl[0].best(), &b0);
        migrate(&mut isl, &topo, 2, Tide::Forward);
        migrate(&mut isl, &topo, 2, Tide::Backward);
        for i in &isl {
            assert!(i.population.contains(&b0) && i.population.contains(&b1));
        }
    }

    #[test]
    fn radial_topology_shape() {
        let t = Topology::radial(4, 4);
        assert_eq!(t.islands, 16);
        assert_eq!(t.edges.len(), 12 + 16);
        assert_eq!(Topology::ring(2).edges, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn epoch_bounds_are_half_gaps() {
        let p = InnerProblem {
            mode: InnerMode::TimeFree,
            sequence: vec![1, 2, 3],
            nominal_epochs: vec![10.0, 30.0, 40.0],
            leg_bounds: LegBounds::from_radii([7000.0], 200.0),
        };
        assert_eq!(p.epoch_bounds(), vec![(5.0, 20.0), (20.0, 35.0)]);
        let b = p.time_free_bounds();
        assert_eq!(b.dim(), 20);
        assert_eq!(
            p.epochs_of(&vec![0.0; 18].into_iter().chain([7.0, 33.0]).collect::<Vec<_>>()),
            vec![7.0, 33.0, 40.0]
        );
    }
}
