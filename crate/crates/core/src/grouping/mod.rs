//! Partition each layer's heads into `G` equal groups maximizing the summed
//! within-group aligned similarity.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::similarity::{Criterion, SimilarityMatrix, Stage};

/// Which similarity drives the search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingMode {
    /// Adjacent heads, no search.
    Default,
    Key,
    Value,
}

impl std::str::FromStr for GroupingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Self::Default),
            "key" => Ok(Self::Key),
            "value" => Ok(Self::Value),
            other => Err(Error::InvalidArgument(format!("unknown grouping {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGrouping {
    pub groups: Vec<Vec<usize>>,
    pub score: f64,
}

impl LayerGrouping {
    /// Head order that makes every group contiguous: new slot `k` holds old
    /// head `permutation()[k]`.
    pub fn permutation(&self) -> Vec<usize> {
        self.groups.concat()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingPlan {
    pub mode: GroupingMode,
    pub criterion: Criterion,
    pub n_heads: usize,
    pub n_groups: usize,
    pub layers: Vec<LayerGrouping>,
}

impl GroupingPlan {
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_groups
    }

    pub fn validate(&self) -> Result<()> {
        check_divisible(self.n_heads, self.n_groups)?;
        for l in &self.layers {
            validate_partition(&l.groups, self.n_heads)?;
            if l.groups.len() != self.n_groups {
                return Err(Error::InvalidArgument(format!(
                    "plan declares {} groups, layer has {}",
                    self.n_groups,
                    l.groups.len()
                )));
            }
        }
        Ok(())
    }

    /// Default plan for every layer.
    pub fn adjacent(n_layers: usize, n_heads: usize, n_groups: usize, criterion: Criterion) -> Result<Self> {
        let layer = default_grouping(n_heads, n_groups)?;
        Ok(Self {
            mode: GroupingMode::Default,
            criterion,
            n_heads,
            n_groups,
            layers: vec![layer; n_layers],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub max_iter: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    /// Starting temperature for Metropolis acceptance of worse swaps,
    /// cooled linearly to zero. `None` accepts strictly improving swaps only.
    #[serde(default)]
    pub temperature: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            epochs: 50,
            rng_seed: 0,
            temperature: None,
        }
    }
}

fn check_divisible(h: usize, g: usize) -> Result<()> {
    if g == 0 || h == 0 || h % g != 0 {
        return Err(Error::InvalidArgument(format!(
            "{h} heads cannot be split into {g} equal groups"
        )));
    }
    Ok(())
}

pub fn validate_partition(groups: &[Vec<usize>], h: usize) -> Result<()> {
    let size = groups.first().map_or(0, Vec::len);
    if size == 0 || groups.iter().any(|g| g.len() != size) {
        return Err(Error::InvalidArgument("groups must be non-empty and equal-sized".into()));
    }
    let mut seen = vec![false; h];
    for &head in groups.iter().flatten() {
        if head >= h || seen[head] {
            return Err(Error::InvalidArgument(format!(
                "head {head} is out of range or assigned twice"
            )));
        }
        seen[head] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidArgument("not every head is assigned".into()));
    }
    Ok(())
}

fn raw_score(groups: &[Vec<usize>], sim: &SimilarityMatrix) -> f64 {
    groups
        .iter()
        .map(|g| {
            let mut s = 0.0;
            for a in 0..g.len() {
                for b in a + 1..g.len() {
                    s += sim.score(g[a], g[b]);
                }
            }
            s
        })
        .sum()
}

/// Sum over groups of all within-group unordered-pair scores.
pub fn score_grouping(groups: &[Vec<usize>], sim: &SimilarityMatrix) -> Result<f64> {
    if sim.stage != Stage::After {
        return Err(Error::InvalidArgument("grouping scores use aligned similarity".into()));
    }
    validate_partition(groups, sim.n_heads())?;
    Ok(raw_score(groups, sim))
}

pub fn default_grouping(h: usize, g: usize) -> Result<LayerGrouping> {
    check_divisible(h, g)?;
    let d = h / g;
    Ok(LayerGrouping {
        groups: (0..g).map(|k| (k * d..(k + 1) * d).collect()).collect(),
        score: 0.0,
    })
}

fn canonical(mut groups: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort_by_key(|g| g[0]);
    groups
}

/// Per-epoch record of the search: the score held after every iteration.
#[derive(Clone, Debug)]
pub struct EpochTrace {
    pub initial: f64,
    pub current: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub grouping: LayerGrouping,
    pub epochs: Vec<EpochTrace>,
}

/// Restarted random-swap search. Each epoch starts from a random partition
/// and swaps two heads from different groups `max_iter` times, keeping a
/// swap only if it raises the score (unless a temperature is configured).
pub fn search_grouping(sim: &SimilarityMatrix, g: usize, cfg: &SearchConfig) -> Result<LayerGrouping> {
    Ok(search_grouping_traced(sim, g, cfg)?.grouping)
}

pub fn search_grouping_traced(
    sim: &SimilarityMatrix,
    g: usize,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    let h = sim.n_heads();
    check_divisible(h, g)?;
    if sim.stage != Stage::After {
        return Err(Error::InvalidArgument("grouping search uses aligned similarity".into()));
    }
    if cfg.max_iter == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("max_iter and epochs must be at least 1".into()));
    }
    let epochs: Vec<u64> = (0..cfg.epochs as u64).collect();
    let runs = par::map(&epochs, |&e| run_epoch(sim, g, cfg, e));

    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    let mut traces = Vec::with_capacity(runs.len());
    // epochs in index order; strict comparison keeps the lowest sub-seed on ties
    for (score, groups, trace) in runs {
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, groups));
        }
        traces.push(trace);
    }
    let (_, groups) = best.expect("at least one epoch");
    let groups = canonical(groups);
    let score = raw_score(&groups, sim);
    Ok(SearchOutcome {
        grouping: LayerGrouping { groups, score },
        epochs: traces,
    })
}

fn run_epoch(
    sim: &SimilarityMatrix,
    g: usize,
    cfg: &SearchConfig,
    epoch: u64,
) -> (f64, Vec<Vec<usize>>, EpochTrace) {
    let h = sim.n_heads();
    let d = h / g;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(epoch);

    let mut heads: Vec<usize> = (0..h).collect();
    heads.shuffle(&mut rng);
    let mut current: Vec<Vec<usize>> = heads.chunks(d).map(<[usize]>::to_vec).collect();
    let mut current_score = raw_score(&current, sim);
    let initial = current_score;
    let mut best_score = current_score;
    let mut best = current.clone();
    let mut trace = Vec::with_capacity(cfg.max_iter);

    for it in 0..cfg.max_iter {
        if g > 1 {
            let ga = rng.random_range(0..g);
            let mut gb = rng.random_range(0..g - 1);
            if gb >= ga {
                gb += 1;
            }
            let (ia, ib) = (rng.random_range(0..d), rng.random_range(0..d));
            let mut candidate = current.clone();
            let tmp = candidate[ga][ia];
            candidate[ga][ia] = candidate[gb][ib];
            candidate[gb][ib] = tmp;
            let new_score = raw_score(&candidate, sim);

            let accept = match cfg.temperature {
                None => new_score > current_score,
                Some(t0) => {
                    let temp = t0 * (1.0 - it as f64 / cfg.max_iter as f64);
                    new_score > current_score
                        || (temp > 0.0
                            && rng.random::<f64>() < ((new_score - current_score) / temp).exp())
                }
            };
            if accept {
                current = candidate;
                current_score = new_score;
                if current_score > best_score {
                    best_score = current_score;
                    best = current.clone();
                }
            }
        }
        trace.push(current_score);
    }
    (
        best_score,
        best,
        EpochTrace {
            initial,
            current: trace,
        },
    )
}

const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

/// Number of ways to split `h` labelled heads into `g` unlabelled groups of
/// equal size: `h! / ((h/g)!^g · g!)`.
pub fn partition_count(h: usize, g: usize) -> Result<u128> {
    check_divisible(h, g)?;
    let d = h / g;
    // product over groups of C(remaining - 1, d - 1): the lowest free head
    // always opens the next group
    let mut count: u128 = 1;
    let mut remaining = h;
    for _ in 0..g {
        count = count.saturating_mul(binomial(remaining - 1, d - 1));
        remaining -= d;
    }
    Ok(count)
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul((n - i) as u128) / (i as u128 + 1))
}

/// Enumerates every partition and returns the best one together with the
/// number of candidates visited.
pub fn exhaustive_grouping(sim: &SimilarityMatrix, g: usize) -> Result<(LayerGrouping, usize)> {
    let h = sim.n_heads();
    let count = partition_count(h, g)?;
    if count > EXHAUSTIVE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "{count} partitions exceed the exhaustive limit of {EXHAUSTIVE_LIMIT}"
        )));
    }
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    let mut visited = 0;
    for_each_partition(h, h / g, &mut |groups| {
        visited += 1;
        let s = raw_score(groups, sim);
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, groups.to_vec()));
        }
    });
    let (score, groups) = best.expect("at least one partition");
    Ok((LayerGrouping { groups: canonical(groups), score }, visited))
}

/// Calls `visit` once per partition of `0..h` into groups of size `d`.
pub fn for_each_partition(h: usize, d: usize, visit: &mut dyn FnMut(&[Vec<usize>])) {
    fn rec(
        free: &mut Vec<usize>,
        d: usize,
        acc: &mut Vec<Vec<usize>>,
        visit: &mut dyn FnMut(&[Vec<usize>]),
    ) {
        if free.is_empty() {
            visit(acc);
            return;
        }
        let head = free.remove(0);
        let rest = free.clone();
        choose(&rest, d - 1, 0, &mut vec![head], &mut |group| {
            let mut left: Vec<usize> = free.iter().copied().filter(|x| !group.contains(x)).collect();
            acc.push(group.to_vec());
            rec(&mut left, d, acc, visit);
            acc.pop();
        });
        free.insert(0, head);
    }

    fn choose(
        pool: &[usize],
        k: usize,
        start: usize,
        cur: &mut Vec<usize>,
        f: &mut dyn FnMut(&[usize]),
    ) {
        if k == 0 {
            f(cur);
            return;
        }
        for i in start..pool.len() {
            if pool.len() - i < k {
                break;
            }
            cur.push(pool[i]);
            choose(pool, k - 1, i + 1, cur, f);
            cur.pop();
        }
    }

    let mut free: Vec<usize> = (0..h).collect();
    rec(&mut free, d, &mut Vec::new(), visit);
}

/// Plan for every layer: search on the matching aligned similarity, or the
/// adjacent default. `sims` must hold one `After` matrix per layer for the
/// target selected by `mode` (ignored for `Default`).
pub fn build_plan(
    mode: GroupingMode,
    criterion: Criterion,
    n_layers: usize,
    n_heads: usize,
    n_groups: usize,
    sims: &[SimilarityMatrix],
    cfg: &SearchConfig,
) -> Result<GroupingPlan> {
    check_divisible(n_heads, n_groups)?;
    let layers = match mode {
        GroupingMode::Default => vec![default_grouping(n_heads, n_groups)?; n_layers],
        GroupingMode::Key | GroupingMode::Value => {
            let target = if mode == GroupingMode::Key {
                crate::similarity::Target::Key
            } else {
                crate::similarity::Target::Value
            };
            (0..n_layers)
                .map(|l| {
                    let sim = sims
                        .iter()
                        .find(|s| {
                            s.layer == l
                                && s.target == target
                                && s.stage == Stage::After
                                && s.criterion == criterion
                        })
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!(
                                "no aligned {target} similarity for layer {l}"
                            ))
                        })?;
                    search_grouping(sim, n_groups, cfg)
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(GroupingPlan {
        mode,
        criterion,
        n_heads,
        n_groups,
        layers,
    })
}
