//! Splits a pooled dataset into per-client train/test index sets.
//!
//! All randomness comes from one PCG-64 generator (`rand_pcg::Pcg64`,
//! XSL-RR 128/64) seeded with `PartitionSpec::seed`.
//!
//! Allocation by case:
//!
//! * IID, balanced: shuffle, equal chunks of `N / clients`, remainder dropped.
//! * IID, unbalanced: client sizes from `Dirichlet(1.5)` over clients on top
//!   of a 10-sample floor, largest-remainder rounded to sum to `N`.
//! * Pathological `k`: classes shuffled and dealt round-robin so each client
//!   gets `k` distinct classes; each class is split over its assignees
//!   equally (balanced) or by `Dirichlet(1.0)` shares with one sample
//!   guaranteed per assignee (unbalanced).
//! * Dirichlet `α`, unbalanced: per class, shares `q ~ Dirichlet(α)` over
//!   clients, largest-remainder rounded; clients under 10 samples are topped
//!   up from the largest client.
//! * Dirichlet `α`, balanced: per-client class mixtures from the same draws;
//!   `N / clients` samples per client drawn greedily from the class pools.
//!
//! Every client is then split per class into 75% train / 25% test, with the
//! client's test total fixed at `round(0.25 * size)`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution as _, Gamma};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TEST_FRACTION: f64 = 0.25;
pub const MIN_CLIENT_SAMPLES: usize = 4;
/// Size floor for unbalanced allocations before the train/test split.
pub const SIZE_FLOOR: usize = 10;
const UNBALANCED_SIZE_ALPHA: f64 = 1.5;
const PATHOLOGICAL_SHARE_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    None,
    Pathological { classes_per_client: usize },
    Dirichlet { alpha: f64 },
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Pathological { classes_per_client } => write!(f, "pat:{classes_per_client}"),
            Self::Dirichlet { alpha } => write!(f, "dir:{alpha}"),
        }
    }
}

impl FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidPartitionSpec(format!("distribution {s:?} is not none, pat:<k> or dir:<alpha>"));
        if s == "none" {
            return Ok(Self::None);
        }
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "pat" => Ok(Self::Pathological {
                classes_per_client: arg.parse().map_err(|_| bad())?,
            }),
            "dir" => Ok(Self::Dirichlet {
                alpha: arg.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Distribution {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Distribution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub balance: bool,
    pub non_iid: bool,
    pub distribution: Distribution,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn iid(num_clients: usize, balance: bool, seed: u64) -> Self {
        Self {
            num_clients,
            balance,
            non_iid: false,
            distribution: Distribution::None,
            seed,
        }
    }

    pub fn non_iid(num_clients: usize, balance: bool, distribution: Distribution, seed: u64) -> Self {
        Self {
            num_clients,
            balance,
            non_iid: true,
            distribution,
            seed,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPartitionSpec(m));
        if self.num_clients == 0 {
            return bad("num_clients must be positive".into());
        }
        match (self.non_iid, self.distribution) {
            (false, Distribution::None) => Ok(()),
            (false, d) => bad(format!("distribution {d} requires non_iid = true")),
            (true, Distribution::None) => bad("non_iid = true requires a distribution".into()),
            (true, Distribution::Pathological { classes_per_client: k }) => {
                if k == 0 || k > num_classes {
                    bad(format!("classes per client {k} must lie in 1..={num_classes}"))
                } else if k * self.num_clients < num_classes {
                    bad(format!(
                        "{} clients x {k} classes cannot cover {num_classes} classes",
                        self.num_clients
                    ))
                } else {
                    Ok(())
                }
            }
            (true, Distribution::Dirichlet { alpha }) => {
                if alpha > 0.0 && alpha.is_finite() {
                    Ok(())
                } else {
                    bad(format!("dirichlet alpha {alpha} must be positive"))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Class counts over train and test together.
    pub histogram: Vec<usize>,
}

impl ClientSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub spec: PartitionSpec,
    pub num_classes: usize,
    pub clients: Vec<ClientSplit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub histogram: Vec<usize>,
}

/// Per-client sizes and class histograms, as stored in the experiment config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionRecord {
    pub num_classes: usize,
    pub clients: Vec<ClientRecord>,
}

pub fn describe(result: &PartitionResult) -> DistributionRecord {
    DistributionRecord {
        num_classes: result.num_classes,
        clients: result
            .clients
            .iter()
            .enumerate()
            .map(|(client, c)| ClientRecord {
                client,
                train_size: c.train.len(),
                test_size: c.test.len(),
                histogram: c.histogram.clone(),
            })
            .collect(),
    }
}

pub fn partition<T: Scalar>(dataset: &Dataset<T>, spec: &PartitionSpec) -> Result<PartitionResult> {
    partition_labels(dataset.labels(), dataset.num_classes(), spec)
}

/// Partitioning depends only on labels; this is the label-level entry point.
pub fn partition_labels(labels: &[u32], num_classes: usize, spec: &PartitionSpec) -> Result<PartitionResult> {
    spec.validate(num_classes)?;
    if labels.is_empty() {
        return Err(Error::InvalidDataset("cannot partition an empty dataset".into()));
    }
    let mut rng = Pcg64::seed_from_u64(spec.seed);
    let by_class = class_pools(labels, num_classes);
    let n = spec.num_clients;

    let allocation = match (spec.distribution, spec.balance) {
        (Distribution::None, true) => iid_balanced(labels.len(), n, &mut rng),
        (Distribution::None, false) => iid_unbalanced(labels.len(), n, &mut rng),
        (Distribution::Pathological { classes_per_client }, balance) => {
            pathological(&by_class, n, classes_per_client, balance, &mut rng)
        }
        (Distribution::Dirichlet { alpha }, false) => dirichlet_unbalanced(&by_class, labels, n, alpha, &mut rng),
        (Distribution::Dirichlet { alpha }, true) => dirichlet_balanced(&by_class, labels.len(), n, alpha, &mut rng),
    };

    let mut clients = Vec::with_capacity(n);
    for (client, indices) in allocation.into_iter().enumerate() {
        if indices.len() < MIN_CLIENT_SAMPLES {
            return Err(Error::ClientTooSmall {
                client,
                size: indices.len(),
            });
        }
        clients.push(stratified_split(&indices, labels, num_classes));
    }
    Ok(PartitionResult {
        spec: spec.clone(),
        num_classes,
        clients,
    })
}

fn class_pools(labels: &[u32], num_classes: usize) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); num_classes];
    for (i, l) in labels.iter().enumerate() {
        pools[*l as usize].push(i);
    }
    pools
}

/// Symmetric Dirichlet draw via normalised Gamma variates. If every variate
/// underflows (tiny `alpha`), all mass goes to one uniformly chosen entry,
/// the distribution's small-`alpha` limit.
pub fn dirichlet(rng: &mut Pcg64, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive alpha");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|d| *d /= total);
    } else {
        draws.iter_mut().for_each(|d| *d = 0.0);
        draws[rng.random_range(0..n)] = 1.0;
    }
    draws
}

/// Integer apportionment of `total` proportional to `weights` (Hamilton
/// method): floors first, leftover units to the largest fractional parts,
/// ties to the lower index. Zero total weight spreads evenly.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let shares: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| total as f64 * w / sum).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|a, b| {
        let (fa, fb) = (shares[*a] - shares[*a].floor(), shares[*b] - shares[*b].floor());
        fb.total_cmp(&fa).then(a.cmp(b))
    });
    // Float floors can overshoot by rounding; trim from the smallest remainders.
    if assigned > total {
        let mut excess = assigned - total;
        for i in order.iter().rev() {
            if excess == 0 {
                break;
            }
            if counts[*i] > 0 {
                counts[*i] -= 1;
                excess -= 1;
            }
        }
    } else {
        for i in order.iter().cycle().take(total - assigned) {
            counts[*i] += 1;
        }
    }
    counts
}

fn shuffled(n: usize, rng: &mut Pcg64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

fn slice_by_sizes(order: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|s| {
            let chunk = order[start..start + s].to_vec();
            start += s;
            chunk
        })
        .collect()
}

fn iid_balanced(total: usize, n: usize, rng: &mut Pcg64) -> Vec<Vec<usize>> {
    let order = shuffled(total, rng);
    slice_by_sizes(&order, &vec![total / n; n])
}

fn iid_unbalanced(total: usize, n: usize, rng: &mut Pcg64) -> Vec<Vec<usize>> {
    let shares = dirichlet(rng, UNBALANCED_SIZE_ALPHA, n);
    let floor = SIZE_FLOOR.min(total / n);
    let extra = largest_remainder(total - floor * n, &shares);
    let sizes: Vec<usize> = extra.iter().map(|e| e + floor).collect();
    let order = shuffled(total, rng);
    slice_by_sizes(&order, &sizes)
}

/// Client `i` takes slots `i*k .. (i+1)*k` of the shuffled class list
/// repeated end to end, so its `k` classes are distinct and class
/// multiplicities differ by at most one.
pub fn pathological_assignment(num_classes: usize, n: usize, k: usize, rng: &mut Pcg64) -> Vec<Vec<usize>> {
    let order = shuffled(num_classes, rng);
    (0..n)
        .map(|i| (i * k..(i + 1) * k).map(|slot| order[slot % num_classes]).collect())
        .collect()
}

fn pathological(by_class: &[Vec<usize>], n: usize, k: usize, balance: bool, rng: &mut Pcg64) -> Vec<Vec<usize>> {
    let assignment = pathological_assignment(by_class.len(), n, k, rng);
    let mut assignees = vec![Vec::new(); by_class.len()];
    for (client, classes) in assignment.iter().enumerate() {
        for c in classes {
            assignees[*c].push(client);
        }
    }
    let mut clients = vec![Vec::new(); n];
    for (pool, owners) in by_class.iter().zip(&assignees) {
        if owners.is_empty() {
            continue;
        }
        let mut pool = pool.clone();
        pool.shuffle(rng);
        let m = owners.len();
        let sizes = if balance {
            largest_remainder(pool.len(), &vec![1.0; m])
        } else {
            let shares = dirichlet(rng, PATHOLOGICAL_SHARE_ALPHA, m);
            // One sample per assignee keeps every assigned class present.
            let floor = usize::from(pool.len() >= m);
            largest_remainder(pool.len() - floor * m, &shares)
                .into_iter()
                .map(|s| s + floor)
                .collect()
        };
        for (owner, chunk) in owners.iter().zip(slice_by_sizes(&pool, &sizes)) {
            clients[*owner].extend(chunk);
        }
    }
    clients
}

fn dirichlet_unbalanced(
    by_class: &[Vec<usize>],
    labels: &[u32],
    n: usize,
    alpha: f64,
    rng: &mut Pcg64,
) -> Vec<Vec<usize>> {
    let mut clients = vec![Vec::new(); n];
    for pool in by_class {
        let shares = dirichlet(rng, alpha, n);
        let mut pool = pool.clone();
        pool.shuffle(rng);
        for (client, chunk) in slice_by_sizes(&pool, &largest_remainder(pool.len(), &shares))
            .into_iter()
            .enumerate()
        {
            clients[client].extend(chunk);
        }
    }
    top_up_small_clients(&mut clients, labels, by_class.len());
    clients
}

/// Moves samples from the largest client to any client under the size
/// floor, taking from the donor's most populous class.
fn top_up_small_clients(clients: &mut [Vec<usize>], labels: &[u32], num_classes: usize) {
    let total: usize = clients.iter().map(Vec::len).sum();
    let floor = SIZE_FLOOR.min(total / clients.len());
    loop {
        let (small, small_len) = clients
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.len()))
            .min_by_key(|(i, len)| (*len, *i))
            .unwrap();
        if small_len >= floor {
            return;
        }
        let donor = clients
            .iter()
            .enumerate()
            .max_by_key(|(i, c)| (c.len(), std::cmp::Reverse(*i)))
            .map(|(i, _)| i)
            .unwrap();
        if clients[donor].len() <= floor {
            return;
        }
        let mut counts = vec![0usize; num_classes];
        for i in &clients[donor] {
            counts[labels[*i] as usize] += 1;
        }
        let class = (0..num_classes).max_by_key(|c| (counts[*c], std::cmp::Reverse(*c))).unwrap();
        let pos = clients[donor].iter().rposition(|i| labels[*i] as usize == class).unwrap();
        let moved = clients[donor].remove(pos);
        clients[small].push(moved);
    }
}

fn dirichlet_balanced(by_class: &[Vec<usize>], total: usize, n: usize, alpha: f64, rng: &mut Pcg64) -> Vec<Vec<usize>> {
    let num_classes = by_class.len();
    // q[c][i]: share of class c assigned to client i, as in the unbalanced case.
    let q: Vec<Vec<f64>> = (0..num_classes).map(|_| dirichlet(rng, alpha, n)).collect();
    let mixtures: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let col: Vec<f64> = q.iter().map(|row| row[i]).collect();
            let s: f64 = col.iter().sum();
            if s > 0.0 {
                col.iter().map(|v| v / s).collect()
            } else {
                vec![1.0 / num_classes as f64; num_classes]
            }
        })
        .collect();
    let mut pools: Vec<Vec<usize>> = by_class
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.shuffle(rng);
            p
        })
        .collect();
    let target = total / n;
    let mut clients = vec![Vec::with_capacity(target); n];
    for _ in 0..target {
        for (client, mixture) in mixtures.iter().enumerate() {
            let weight: f64 = (0..num_classes).filter(|c| !pools[*c].is_empty()).map(|c| mixture[c]).sum();
            let class = if weight > 0.0 {
                let mut u = rng.random::<f64>() * weight;
                let mut chosen = None;
                for c in (0..num_classes).filter(|c| !pools[*c].is_empty()) {
                    chosen = Some(c);
                    if u < mixture[c] {
                        break;
                    }
                    u -= mixture[c];
                }
                chosen.unwrap()
            } else {
                (0..num_classes)
                    .max_by_key(|c| (pools[*c].len(), std::cmp::Reverse(*c)))
                    .unwrap()
            };
            clients[client].push(pools[class].pop().expect("target never exceeds the pooled total"));
        }
    }
    clients
}

/// Per-class 75/25 split. Each class first gets `floor(0.25 * count)` test
/// samples; the remaining test quota (up to `round(0.25 * size)`) goes to
/// classes with the largest fractional parts.
fn stratified_split(indices: &[usize], labels: &[u32], num_classes: usize) -> ClientSplit {
    let mut groups = vec![Vec::new(); num_classes];
    for i in indices {
        groups[labels[*i] as usize].push(*i);
    }
    let histogram: Vec<usize> = groups.iter().map(Vec::len).collect();
    let test_total = (TEST_FRACTION * indices.len() as f64).round() as usize;
    let exact: Vec<f64> = histogram.iter().map(|c| TEST_FRACTION * *c as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_classes).filter(|c| exact[*c] > exact[*c].floor()).collect();
    order.sort_by(|a, b| (exact[*b] - exact[*b].floor()).total_cmp(&(exact[*a] - exact[*a].floor())).then(a.cmp(b)));
    let extra = test_total - quota.iter().sum::<usize>();
    for c in order.into_iter().take(extra) {
        quota[c] += 1;
    }

    let mut train = Vec::with_capacity(indices.len() - test_total);
    let mut test = Vec::with_capacity(test_total);
    for (group, q) in groups.iter().zip(&quota) {
        let cut = group.len() - q;
        train.extend_from_slice(&group[..cut]);
        test.extend_from_slice(&group[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    ClientSplit { train, test, histogram }
}
