//! A constrained NSGA-II engine over real-valued genomes.
//!
//! All randomness comes from one [`ChaCha8Rng`] stream seeded from
//! [`MoeaConfig::seed`] and consumed in a fixed order:
//!
//! 1. initial population, individual by individual, gene by gene;
//! 2. per generation and per offspring pair: two binary tournaments (two
//!    index draws each), one crossover-rate draw, then per gene a 0.5 draw
//!    deciding whether it crosses and, when it does, a spread draw (taken
//!    even if the parents agree on the gene); finally polynomial mutation of
//!    the first child then the second, per gene a rate draw and, when
//!    mutating, a perturbation draw.
//!
//! Evaluations may run in parallel; they never touch the stream.

use std::cmp::Ordering;
use std::error::Error as StdError;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Inclusive `(lower, upper)` limits for one gene.
pub type Bounds = [(f64, f64)];

pub type EvalError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
pub enum MoeaError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("individual {0} has not been evaluated")]
    UnevaluatedIndividual(usize),
    #[error("evaluation failed: {0}")]
    Evaluation(#[source] EvalError),
}

/// Objective values (all minimized) plus constraint values (`<= 0` is
/// satisfied).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub objectives: Vec<f64>,
    pub constraints: Vec<f64>,
    pub feasible: bool,
}

impl Evaluation {
    /// Unconstrained, feasible evaluation.
    pub fn feasible(objectives: Vec<f64>) -> Self {
        Self {
            objectives,
            constraints: Vec::new(),
            feasible: true,
        }
    }

    /// Number of violated constraints, then the objective sum (which carries
    /// any penalty). Lower is better.
    pub fn violation(&self) -> (usize, f64) {
        (
            self.constraints.iter().filter(|&&c| c > 0.0).count(),
            self.objectives.iter().sum(),
        )
    }
}

/// Plain Pareto dominance for minimization.
pub fn pareto_dominates(a: &[f64], b: &[f64]) -> bool {
    debug_assert_eq!(a.len(), b.len());
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strictly = true;
        }
    }
    strictly
}

/// Constrained domination: a feasible evaluation beats an infeasible one,
/// two infeasible ones compare by [`Evaluation::violation`], two feasible
/// ones by Pareto dominance.
pub fn dominates(a: &Evaluation, b: &Evaluation) -> bool {
    match (a.feasible, b.feasible) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => pareto_dominates(&a.objectives, &b.objectives),
        (false, false) => {
            let (ca, sa) = a.violation();
            let (cb, sb) = b.violation();
            ca < cb || (ca == cb && sa < sb)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: Vec<f64>,
    pub evaluation: Option<Evaluation>,
    /// Front index, set by survival.
    pub rank: Option<usize>,
    pub crowding: Option<f64>,
}

impl Individual {
    pub fn new(genome: Vec<f64>) -> Self {
        Self {
            genome,
            evaluation: None,
            rank: None,
            crowding: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub sbx_eta: f64,
    pub sbx_rate: f64,
    pub mutation_eta: f64,
    /// Per-gene mutation probability; `None` means `1 / genome length`.
    pub mutation_rate: Option<f64>,
    pub seed: u64,
}

impl Default for MoeaConfig {
    fn default() -> Self {
        Self {
            population_size: 100,
            generations: 100,
            sbx_eta: 15.0,
            sbx_rate: 0.9,
            mutation_eta: 20.0,
            mutation_rate: None,
            seed: 0,
        }
    }
}

impl MoeaConfig {
    pub fn validate(&self) -> Result<(), MoeaError> {
        let bad = |m: String| Err(MoeaError::Config(m));
        if self.population_size < 2 || !self.population_size.is_multiple_of(2) {
            return bad(format!(
                "population_size must be even and at least 2, got {}",
                self.population_size
            ));
        }
        for (name, rate) in [
            ("sbx_rate", Some(self.sbx_rate)),
            ("mutation_rate", self.mutation_rate),
        ] {
            if let Some(r) = rate {
                if !(0.0..=1.0).contains(&r) {
                    return bad(format!("{name} must be in [0, 1], got {r}"));
                }
            }
        }
        for (name, eta) in [
            ("sbx_eta", self.sbx_eta),
            ("mutation_eta", self.mutation_eta),
        ] {
            if !(eta.is_finite() && eta > 0.0) {
                return bad(format!("{name} must be positive, got {eta}"));
            }
        }
        Ok(())
    }

    pub fn effective_mutation_rate(&self, genome_len: usize) -> f64 {
        self.mutation_rate.unwrap_or(1.0 / genome_len.max(1) as f64)
    }
}

/// Something the engine can optimize.
pub trait Problem: Sync {
    fn bounds(&self) -> &Bounds;
    fn evaluate(&self, genome: &[f64]) -> Result<Evaluation, EvalError>;
}

/// Uniform random genomes within `bounds`.
pub fn random_population<R: Rng>(bounds: &Bounds, size: usize, rng: &mut R) -> Vec<Individual> {
    (0..size)
        .map(|_| {
            Individual::new(
                bounds
                    .iter()
                    .map(|&(lo, hi)| {
                        if hi > lo {
                            lo + rng.random::<f64>() * (hi - lo)
                        } else {
                            lo
                        }
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Splits evaluations into successive non-dominated fronts of indices.
pub fn sort_evaluations(evals: &[&Evaluation]) -> Vec<Vec<usize>> {
    let n = evals.len();
    let mut dominated_by = vec![Vec::new(); n];
    let mut domination_count = vec![0usize; n];
    let mut fronts = vec![Vec::new()];

    for p in 0..n {
        for q in (p + 1)..n {
            if dominates(evals[p], evals[q]) {
                dominated_by[p].push(q);
                domination_count[q] += 1;
            } else if dominates(evals[q], evals[p]) {
                dominated_by[q].push(p);
                domination_count[p] += 1;
            }
        }
    }
    for (p, &count) in domination_count.iter().enumerate() {
        if count == 0 {
            fronts[0].push(p);
        }
    }

    let mut current = 0;
    while !fronts[current].is_empty() {
        let mut next = Vec::new();
        for &p in &fronts[current] {
            for &q in &dominated_by[p] {
                domination_count[q] -= 1;
                if domination_count[q] == 0 {
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        fronts.push(next);
        current += 1;
    }
    fronts.pop();
    fronts
}

/// Fast non-dominated sort over a population.
pub fn fast_nondominated_sort(population: &[Individual]) -> Result<Vec<Vec<usize>>, MoeaError> {
    let evals = population
        .iter()
        .enumerate()
        .map(|(i, ind)| {
            ind.evaluation
                .as_ref()
                .ok_or(MoeaError::UnevaluatedIndividual(i))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(sort_evaluations(&evals))
}

/// Crowding distance of each point in a front.
///
/// Per objective the points are stably sorted; the first and last get
/// infinity and interior points accumulate the normalized gap between their
/// neighbours. An objective with zero range adds nothing to interior points.
#[allow(clippy::needless_range_loop)]
pub fn crowding_distance(front: &[&[f64]]) -> Vec<f64> {
    let n = front.len();
    let mut distance = vec![0.0; n];
    if n == 0 {
        return distance;
    }
    let arity = front[0].len();
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..arity {
        order.sort_by(|&a, &b| front[a][k].total_cmp(&front[b][k]));
        let lo = front[order[0]][k];
        let hi = front[order[n - 1]][k];
        distance[order[0]] = f64::INFINITY;
        distance[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for w in order.windows(3) {
            let (prev, mid, next) = (w[0], w[1], w[2]);
            distance[mid] += (front[next][k] - front[prev][k]) / range;
        }
    }
    distance
}

/// Index of the tournament winner between two distinct random members.
///
/// Lower rank wins, then larger crowding, then the first one drawn.
pub fn binary_tournament<R: Rng>(population: &[Individual], rng: &mut R) -> usize {
    let n = population.len();
    assert!(n >= 2, "tournament needs at least two individuals");
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    let key = |i: usize| {
        let ind = &population[i];
        (ind.rank.unwrap_or(usize::MAX), ind.crowding.unwrap_or(0.0))
    };
    let (ra, ca) = key(a);
    let (rb, cb) = key(b);
    match ra.cmp(&rb) {
        Ordering::Less => a,
        Ordering::Greater => b,
        Ordering::Equal if cb > ca => b,
        Ordering::Equal => a,
    }
}

/// SBX spread factor for a uniform draw `u` in `[0, 1)`.
pub fn sbx_beta(u: f64, eta: f64) -> f64 {
    if u <= 0.5 {
        (2.0 * u).powf(1.0 / (eta + 1.0))
    } else {
        (1.0 / (2.0 * (1.0 - u))).powf(1.0 / (eta + 1.0))
    }
}

/// Unclipped SBX children of one gene pair. The children's mean equals the
/// parents' mean.
pub fn sbx_pair(x1: f64, x2: f64, beta: f64) -> (f64, f64) {
    (
        0.5 * ((1.0 + beta) * x1 + (1.0 - beta) * x2),
        0.5 * ((1.0 - beta) * x1 + (1.0 + beta) * x2),
    )
}

pub fn sbx_crossover<R: Rng>(
    a: &[f64],
    b: &[f64],
    bounds: &Bounds,
    eta: f64,
    rate: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let mut c1 = a.to_vec();
    let mut c2 = b.to_vec();
    if rng.random::<f64>() >= rate {
        return (c1, c2);
    }
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if rng.random::<f64>() >= 0.5 {
            continue;
        }
        let u = rng.random::<f64>();
        if (a[i] - b[i]).abs() <= 1e-14 {
            continue;
        }
        let (y1, y2) = sbx_pair(a[i], b[i], sbx_beta(u, eta));
        c1[i] = y1.clamp(lo, hi);
        c2[i] = y2.clamp(lo, hi);
    }
    (c1, c2)
}

/// Bounded polynomial mutation, applied per gene with probability `rate`.
pub fn polynomial_mutation<R: Rng>(
    genome: &[f64],
    bounds: &Bounds,
    eta: f64,
    rate: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = genome.to_vec();
    for (x, &(lo, hi)) in out.iter_mut().zip(bounds) {
        if rng.random::<f64>() >= rate {
            continue;
        }
        let u = rng.random::<f64>();
        if hi <= lo {
            continue;
        }
        let span = hi - lo;
        let d1 = (*x - lo) / span;
        let d2 = (hi - *x) / span;
        let pow = 1.0 / (eta + 1.0);
        let dq = if u < 0.5 {
            let xy = 1.0 - d1;
            let v = 2.0 * u + (1.0 - 2.0 * u) * xy.powf(eta + 1.0);
            v.powf(pow) - 1.0
        } else {
            let xy = 1.0 - d2;
            let v = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * xy.powf(eta + 1.0);
            1.0 - v.powf(pow)
        };
        *x = (*x + dq * span).clamp(lo, hi);
    }
    out
}

fn evaluate_all<P: Problem>(problem: &P, population: &mut [Individual]) -> Result<(), MoeaError> {
    let evals = population
        .par_iter()
        .map(|ind| problem.evaluate(&ind.genome))
        .collect::<Result<Vec<_>, _>>()
        .map_err(MoeaError::Evaluation)?;
    for (ind, ev) in population.iter_mut().zip(evals) {
        ind.evaluation = Some(ev);
    }
    Ok(())
}

/// Assigns rank and crowding to every member and returns the best `keep`
/// in (rank, crowding desc) order.
fn survive(mut pool: Vec<Individual>, keep: usize) -> Result<Vec<Individual>, MoeaError> {
    let fronts = fast_nondominated_sort(&pool)?;
    let mut order = Vec::with_capacity(pool.len());
    for (rank, front) in fronts.iter().enumerate() {
        let objs: Vec<&[f64]> = front
            .iter()
            .map(|&i| pool[i].evaluation.as_ref().unwrap().objectives.as_slice())
            .collect();
        let dist = crowding_distance(&objs);
        let mut members: Vec<(usize, f64)> = front.iter().copied().zip(dist).collect();
        members.sort_by(|x, y| y.1.total_cmp(&x.1));
        for (i, d) in members {
            pool[i].rank = Some(rank);
            pool[i].crowding = Some(d);
            order.push(i);
        }
    }
    order.truncate(keep);
    let mut slots: Vec<Option<Individual>> = pool.into_iter().map(Some).collect();
    Ok(order
        .into_iter()
        .map(|i| slots[i].take().expect("each index once"))
        .collect())
}

pub fn run<P: Problem>(problem: &P, config: &MoeaConfig) -> Result<Vec<Individual>, MoeaError> {
    run_with_observer(problem, config, |_, _| {})
}

/// Runs the engine, calling `observer(generation, population)` after the
/// initial population (generation 0) and after each generation's survival.
pub fn run_with_observer<P, F>(
    problem: &P,
    config: &MoeaConfig,
    mut observer: F,
) -> Result<Vec<Individual>, MoeaError>
where
    P: Problem,
    F: FnMut(usize, &[Individual]),
{
    config.validate()?;
    let bounds = problem.bounds();
    if let Some((i, _)) = bounds
        .iter()
        .enumerate()
        .find(|(_, (lo, hi))| !(lo.is_finite() && hi.is_finite() && lo <= hi))
    {
        return Err(MoeaError::Config(format!("gene {i} has invalid bounds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.population_size;
    let mutation_rate = config.effective_mutation_rate(bounds.len());

    let mut population = random_population(bounds, n, &mut rng);
    evaluate_all(problem, &mut population)?;
    population = survive(population, n)?;
    observer(0, &population);

    for generation in 1..=config.generations {
        let mut offspring = Vec::with_capacity(n);
        while offspring.len() < n {
            let p1 = binary_tournament(&population, &mut rng);
            let p2 = binary_tournament(&population, &mut rng);
            let (c1, c2) = sbx_crossover(
                &population[p1].genome,
                &population[p2].genome,
                bounds,
                config.sbx_eta,
                config.sbx_rate,
                &mut rng,
            );
            for child in [c1, c2] {
                let mutated = polynomial_mutation(
                    &child,
                    bounds,
                    config.mutation_eta,
                    mutation_rate,
                    &mut rng,
                );
                offspring.push(Individual::new(mutated));
            }
        }
        evaluate_all(problem, &mut offspring)?;
        population.extend(offspring);
        population = survive(population, n)?;
        observer(generation, &population);
    }
    Ok(population)
}

/// Area dominated by `points` (two minimized objectives) up to `reference`.
/// Points not strictly better than the reference in both objectives add
/// nothing.
pub fn hypervolume_2d(points: &[[f64; 2]], reference: [f64; 2]) -> f64 {
    let mut pts: Vec<[f64; 2]> = points
        .iter()
        .copied()
        .filter(|p| p[0] < reference[0] && p[1] < reference[1])
        .collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut volume = 0.0;
    let mut ceiling = reference[1];
    for p in pts {
        if p[1] < ceiling {
            volume += (reference[0] - p[0]) * (ceiling - p[1]);
            ceiling = p[1];
        }
    }
    volume
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feasible(o: &[f64]) -> Evaluation {
        Evaluation::feasible(o.to_vec())
    }

    fn infeasible(o: &[f64], violated: usize) -> Evaluation {
        Evaluation {
            objectives: o.to_vec(),
            constraints: (0..violated).map(|_| 1.0).collect(),
            feasible: false,
        }
    }

    #[test]
    fn dominance_cases() {
        assert!(dominates(&feasible(&[10.0, 5.0]), &feasible(&[12.0, 5.0])));
        assert!(!dominates(&feasible(&[10.0, 5.0]), &feasible(&[5.0, 10.0])));
        assert!(!dominates(&feasible(&[5.0, 10.0]), &feasible(&[10.0, 5.0])));
        assert!(dominates(
            &feasible(&[100.0, 100.0]),
            &infeasible(&[1.0, 1.0], 1)
        ));
        assert!(!dominates(
            &infeasible(&[1.0, 1.0], 1),
            &feasible(&[100.0, 100.0])
        ));
        assert!(dominates(
            &infeasible(&[9.0, 9.0], 1),
            &infeasible(&[1.0, 1.0], 2)
        ));
        assert!(dominates(
            &infeasible(&[1.0, 1.0], 1),
            &infeasible(&[9.0, 9.0], 1)
        ));
        let a = feasible(&[1.0, 1.0]);
        assert!(!dominates(&a, &a));
    }

    #[test]
    fn sort_small_case() {
        let evs = [
            feasible(&[1.0, 1.0]),
            feasible(&[2.0, 2.0]),
            feasible(&[1.0, 2.0]),
            feasible(&[2.0, 1.0]),
        ];
        let refs: Vec<_> = evs.iter().collect();
        assert_eq!(sort_evaluations(&refs), vec![vec![0], vec![2, 3], vec![1]]);
    }

    #[test]
    fn sort_identical_and_chain() {
        let same: Vec<_> = (0..5).map(|_| feasible(&[3.0, 3.0])).collect();
        let refs: Vec<_> = same.iter().collect();
        assert_eq!(sort_evaluations(&refs), vec![vec![0, 1, 2, 3, 4]]);

        let chain: Vec<_> = (0..4).map(|i| feasible(&[i as f64, i as f64])).collect();
        let refs: Vec<_> = chain.iter().rev().collect();
        assert_eq!(
            sort_evaluations(&refs),
            vec![vec![3], vec![2], vec![1], vec![0]]
        );
    }

    #[test]
    fn sort_requires_evaluation() {
        let pop = vec![Individual::new(vec![0.0])];
        assert!(matches!(
            fast_nondominated_sort(&pop),
            Err(MoeaError::UnevaluatedIndividual(0))
        ));
    }

    #[test]
    fn crowding_cases() {
        let two: [&[f64]; 2] = [&[0.0, 1.0], &[1.0, 0.0]];
        assert!(crowding_distance(&two).iter().all(|d| d.is_infinite()));

        let three: [&[f64]; 3] = [&[0.0, 2.0], &[1.0, 1.0], &[2.0, 0.0]];
        let d = crowding_distance(&three);
        assert!(d[0].is_infinite() && d[2].is_infinite());
        assert_eq!(d[1], 2.0);

        let same: [&[f64]; 4] = [&[1.0, 1.0]; 4];
        let d = crowding_distance(&same);
        assert!(d[0].is_infinite() && d[3].is_infinite());
        assert_eq!(&d[1..3], &[0.0, 0.0]);
    }

    fn ranked(rank: usize, crowding: f64) -> Individual {
        Individual {
            genome: vec![],
            evaluation: None,
            rank: Some(rank),
            crowding: Some(crowding),
        }
    }

    #[test]
    fn tournament_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pop = vec![ranked(0, 1.0), ranked(1, f64::INFINITY)];
        for _ in 0..20 {
            assert_eq!(binary_tournament(&pop, &mut rng), 0);
        }
        let pop = vec![ranked(0, 1.0), ranked(0, f64::INFINITY)];
        for _ in 0..20 {
            assert_eq!(binary_tournament(&pop, &mut rng), 1);
        }
        // equal keys: the first drawn index wins
        let pop = vec![ranked(0, 1.0), ranked(0, 1.0)];
        for seed in 0..20 {
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let mut b = a.clone();
            let first = b.random_range(0..2usize);
            assert_eq!(binary_tournament(&pop, &mut a), first);
        }
    }

    #[test]
    fn random_population_respects_bounds() {
        let bounds = [(0.0, 4.0), (0.0, 4.0), (0.0, 0.0)];
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = random_population(&bounds, 4, &mut r1);
        let b = random_population(&bounds, 4, &mut r2);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for ind in &a {
            assert!(ind.genome[..2].iter().all(|g| (0.0..=4.0).contains(g)));
            assert_eq!(ind.genome[2], 0.0);
        }
    }

    #[test]
    fn sbx_fixed_point_and_rate_zero() {
        let bounds = [(0.0, 10.0); 3];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = [1.0, 5.0, 9.0];
        let (c1, c2) = sbx_crossover(&p, &p, &bounds, 15.0, 1.0, &mut rng);
        assert_eq!(c1, p);
        assert_eq!(c2, p);
        let q = [2.0, 2.0, 2.0];
        let (c1, c2) = sbx_crossover(&p, &q, &bounds, 15.0, 0.0, &mut rng);
        assert_eq!((c1.as_slice(), c2.as_slice()), (&p[..], &q[..]));
    }

    #[test]
    fn sbx_pair_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let x1 = rng.random_range(-50.0..50.0);
            let x2 = rng.random_range(-50.0..50.0);
            let beta = sbx_beta(rng.random::<f64>(), 15.0);
            let (y1, y2) = sbx_pair(x1, x2, beta);
            let scale = x1.abs().max(x2.abs()).max(1.0);
            assert!(((y1 + y2) - (x1 + x2)).abs() <= 1e-12 * scale * beta.max(1.0));
        }
    }

    #[test]
    fn mutation_rate_zero_and_zero_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = [1.0, 2.0];
        assert_eq!(
            polynomial_mutation(&g, &[(0.0, 5.0); 2], 20.0, 0.0, &mut rng),
            g.to_vec()
        );
        assert_eq!(
            polynomial_mutation(&[0.0, 0.0], &[(0.0, 0.0); 2], 20.0, 1.0, &mut rng),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn config_validation() {
        let odd = MoeaConfig {
            population_size: 7,
            ..Default::default()
        };
        assert!(matches!(odd.validate(), Err(MoeaError::Config(_))));
        let rate = MoeaConfig {
            sbx_rate: 1.5,
            ..Default::default()
        };
        assert!(rate.validate().is_err());
        assert!(MoeaConfig::default().validate().is_ok());
        assert_eq!(MoeaConfig::default().effective_mutation_rate(6), 1.0 / 6.0);
    }

    #[test]
    fn hypervolume_of_staircase() {
        let hv = hypervolume_2d(&[[0.0, 1.0], [1.0, 0.0]], [2.0, 2.0]);
        // 2x1 + 1x1
        assert_eq!(hv, 3.0);
        assert_eq!(hypervolume_2d(&[[3.0, 0.0]], [2.0, 2.0]), 0.0);
    }
}
