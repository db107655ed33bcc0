//! Server-side aggregation strategies.
//!
//! Every strategy starts from the sample-weighted mean `x̄` of the client
//! parameters and the pseudo-gradient `Δ = x̄ - x_t`:
//!
//! | kind      | update |
//! |-----------|--------|
//! | `fedavg`  | `x ← x̄` |
//! | `fedopt`  | `x ← x + η·Δ` |
//! | `fedavgm` | `m ← β·m + Δ`, `x ← x + η·m` |
//! | `fedyogi` | `m ← β1·m + (1-β1)·Δ`, `v ← v - (1-β2)·Δ²·sign(v - Δ²)`, `x ← x + η·m/(√v + τ)` |
//!
//! Yogi's second moment starts at `τ²`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::params::{weighted_mean, Params};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    FedAvg,
    FedAvgM,
    FedOpt,
    FedYogi,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FedAvg => "fedavg",
            Self::FedAvgM => "fedavgm",
            Self::FedOpt => "fedopt",
            Self::FedYogi => "fedyogi",
        })
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Self::FedAvg),
            "fedavgm" => Ok(Self::FedAvgM),
            "fedopt" => Ok(Self::FedOpt),
            "fedyogi" => Ok(Self::FedYogi),
            other => Err(Error::InvalidStrategy(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub server_lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::FedAvg,
            server_lr: 1.0,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
        }
    }
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidStrategy(format!("{name} = {v} must lie in [0, 1)")))
            }
        };
        unit("momentum", self.momentum)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidStrategy(format!("tau = {} must be positive", self.tau)));
        }
        if !self.server_lr.is_finite() {
            return Err(Error::InvalidStrategy("server_lr must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct FitResult<T: Scalar = f64> {
    pub client_id: u32,
    pub params: Params<T>,
    pub num_examples: u64,
    pub train_loss: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct EvalResult<T: Scalar = f64> {
    pub client_id: u32,
    pub loss: T,
    pub num_examples: u64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct StrategyState<T: Scalar = f64> {
    pub config: StrategyConfig,
    pub global: Params<T>,
    pub momentum: Option<Vec<T>>,
    pub second_moment: Option<Vec<T>>,
    pub round: u64,
}

impl<T: Scalar> StrategyState<T> {
    pub fn new(config: StrategyConfig, initial: Params<T>) -> Result<Self> {
        config.validate()?;
        let n = initial.len();
        let momentum = matches!(config.kind, StrategyKind::FedAvgM | StrategyKind::FedYogi).then(|| vec![T::zero(); n]);
        let second_moment = (config.kind == StrategyKind::FedYogi).then(|| {
            let tau = T::from_f64_lossy(config.tau);
            vec![tau * tau; n]
        });
        Ok(Self {
            config,
            global: initial,
            momentum,
            second_moment,
            round: 0,
        })
    }

    pub fn kind(&self) -> StrategyKind {
        self.config.kind
    }

    /// One server round. Results are ordered by `client_id` before
    /// averaging, so the outcome does not depend on arrival order.
    pub fn aggregate(&self, results: &[FitResult<T>]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::NoResults);
        }
        let mut ordered: Vec<&FitResult<T>> = results.iter().collect();
        ordered.sort_by_key(|r| r.client_id);
        for r in &ordered {
            self.global.ensure_compatible(&r.params)?;
        }
        let items: Vec<(&Params<T>, u64)> = ordered.iter().map(|r| (&r.params, r.num_examples)).collect();
        let mean = weighted_mean(&items)?;

        let x = self.global.values();
        let delta: Vec<T> = mean.values().iter().zip(x).map(|(a, b)| *a - *b).collect();
        let cfg = &self.config;
        let lr = T::from_f64_lossy(cfg.server_lr);
        let mut next = self.clone();
        next.round += 1;

        let values = match cfg.kind {
            StrategyKind::FedAvg => mean.into_values(),
            StrategyKind::FedOpt => x.iter().zip(&delta).map(|(w, d)| *w + lr * *d).collect(),
            StrategyKind::FedAvgM => {
                let beta = T::from_f64_lossy(cfg.momentum);
                let m = next.momentum.get_or_insert_with(|| vec![T::zero(); x.len()]);
                for (mi, d) in m.iter_mut().zip(&delta) {
                    *mi = beta * *mi + *d;
                }
                x.iter().zip(m.iter()).map(|(w, mi)| *w + lr * *mi).collect()
            }
            StrategyKind::FedYogi => {
                let b1 = T::from_f64_lossy(cfg.beta1);
                let b2 = T::from_f64_lossy(cfg.beta2);
                let tau = T::from_f64_lossy(cfg.tau);
                let m = next.momentum.get_or_insert_with(|| vec![T::zero(); x.len()]);
                for (mi, d) in m.iter_mut().zip(&delta) {
                    *mi = b1 * *mi + (T::one() - b1) * *d;
                }
                let v = next.second_moment.get_or_insert_with(|| vec![tau * tau; x.len()]);
                for (vi, d) in v.iter_mut().zip(&delta) {
                    let d2 = *d * *d;
                    *vi -= (T::one() - b2) * d2 * sign(*vi - d2);
                }
                x.iter()
                    .zip(m.iter().zip(v.iter()))
                    .map(|(w, (mi, vi))| *w + lr * *mi / (vi.sqrt() + tau))
                    .collect()
            }
        };
        next.global = self.global.with_values(values)?;
        Ok(next)
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `(loss_distributed, accuracy_distributed)`, both weighted by test-set size.
pub fn aggregate_eval<T: Scalar>(results: &[EvalResult<T>]) -> Result<(T, T)> {
    if results.is_empty() {
        return Err(Error::NoResults);
    }
    let total: u64 = results.iter().map(|r| r.num_examples).sum();
    if total == 0 {
        return Err(Error::ZeroTotalWeight);
    }
    let correct: u64 = results.iter().map(|r| r.confusion.correct()).sum();
    let count = |n: u64| T::from_u64(n).expect("count conversion");
    let total_t = count(total);
    let loss = results.iter().map(|r| count(r.num_examples) * r.loss).sum::<T>() / total_t;
    Ok((loss, count(correct) / total_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    fn pv(v: &[f64]) -> Params {
        Params::new(v.to_vec(), "t").unwrap()
    }

    fn fit(id: u32, v: &[f64], n: u64) -> FitResult {
        FitResult { client_id: id, params: pv(v), num_examples: n, train_loss: 0.0 }
    }

    fn random_results(rng: &mut Pcg64, clients: usize, len: usize) -> Vec<FitResult> {
        (0..clients)
            .map(|i| {
                let v: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
                fit(i as u32, &v, rng.random_range(1..1000))
            })
            .collect()
    }

    #[test]
    fn fedavg_single_client_identity() {
        let s = StrategyState::new(StrategyConfig::new(StrategyKind::FedAvg), pv(&[0.0, 0.0])).unwrap();
        let next = s.aggregate(&[fit(3, &[1.5, -2.0], 12)]).unwrap();
        assert_eq!(next.global.values(), &[1.5, -2.0]);
        assert_eq!(next.round, 1);
    }

    #[test]
    fn reductions_to_fedavg() {
        let mut rng = Pcg64::seed_from_u64(1);
        for _ in 0..20 {
            let init: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let results = random_results(&mut rng, 4, 8);
            let avg = StrategyState::new(StrategyConfig::new(StrategyKind::FedAvg), pv(&init)).unwrap();
            let opt = StrategyState::new(StrategyConfig::new(StrategyKind::FedOpt), pv(&init)).unwrap();
            let avgm = StrategyState::new(
                StrategyConfig { kind: StrategyKind::FedAvgM, momentum: 0.0, ..StrategyConfig::default() },
                pv(&init),
            )
            .unwrap();
            let a = avg.aggregate(&results).unwrap();
            for other in [opt.aggregate(&results).unwrap(), avgm.aggregate(&results).unwrap()] {
                for (x, y) in a.global.values().iter().zip(other.global.values()) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn fedyogi_two_round_hand_trace() {
        let cfg = StrategyConfig {
            kind: StrategyKind::FedYogi,
            server_lr: 0.5,
            beta1: 0.9,
            beta2: 0.99,
            tau: 0.1,
            ..StrategyConfig::default()
        };
        let s0 = StrategyState::new(cfg, pv(&[1.0])).unwrap();
        // Round 1: clients 3.0 (w=1) and 5.0 (w=3) -> mean 4.5, delta 3.5.
        // m1 = 0.1*3.5 = 0.35
        // v0 = 0.01 < 12.25, sign = -1 -> v1 = 0.01 + 0.01*12.25 = 0.1325
        // x1 = 1 + 0.5*0.35/(sqrt(0.1325)+0.1)
        let s1 = s0.aggregate(&[fit(0, &[3.0], 1), fit(1, &[5.0], 3)]).unwrap();
        let x1 = 1.0 + 0.5 * 0.35 / (0.1325f64.sqrt() + 0.1);
        assert!((s1.global.values()[0] - x1).abs() <= 1e-12);
        // Round 2: single client at 0.0 -> delta = -x1.
        let d2 = -x1;
        let m2 = 0.9 * 0.35 + 0.1 * d2;
        let sq = d2 * d2;
        let v2 = if 0.1325 > sq { 0.1325 - 0.01 * sq } else { 0.1325 + 0.01 * sq };
        let x2 = x1 + 0.5 * m2 / (v2.sqrt() + 0.1);
        let s2 = s1.aggregate(&[fit(7, &[0.0], 10)]).unwrap();
        assert!((s2.global.values()[0] - x2).abs() <= 1e-12);
        assert!((s2.momentum.as_ref().unwrap()[0] - m2).abs() <= 1e-12);
        assert!((s2.second_moment.as_ref().unwrap()[0] - v2).abs() <= 1e-12);
        assert_eq!(s2.round, 2);
    }

    #[test]
    fn arrival_order_does_not_matter() {
        let mut rng = Pcg64::seed_from_u64(3);
        let results = random_results(&mut rng, 5, 6);
        let mut reversed = results.clone();
        reversed.reverse();
        for kind in [StrategyKind::FedAvg, StrategyKind::FedAvgM, StrategyKind::FedOpt, StrategyKind::FedYogi] {
            let s = StrategyState::new(StrategyConfig::new(kind), pv(&[0.0; 6])).unwrap();
            assert_eq!(s.aggregate(&results).unwrap(), s.aggregate(&reversed).unwrap());
        }
    }

    #[test]
    fn aggregate_errors() {
        let s = StrategyState::new(StrategyConfig::default(), pv(&[0.0, 0.0])).unwrap();
        assert!(matches!(s.aggregate(&[]), Err(Error::NoResults)));
        assert!(matches!(s.aggregate(&[fit(0, &[1.0], 1)]), Err(Error::LayoutMismatch { .. })));
        let bad = StrategyConfig { tau: 0.0, ..StrategyConfig::default() };
        assert!(StrategyState::new(bad, pv(&[0.0])).is_err());
        let bad = StrategyConfig { beta2: 1.0, ..StrategyConfig::default() };
        assert!(StrategyState::new(bad, pv(&[0.0])).is_err());
    }

    #[test]
    fn state_round_trips_through_json() {
        let mut rng = Pcg64::seed_from_u64(4);
        let mut s = StrategyState::new(StrategyConfig::new(StrategyKind::FedYogi), pv(&[0.1; 5])).unwrap();
        for _ in 0..3 {
            s = s.aggregate(&random_results(&mut rng, 3, 5)).unwrap();
        }
        let text = serde_json::to_string(&s).unwrap();
        let back: StrategyState = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        // Resumed state continues identically.
        let next = random_results(&mut rng, 3, 5);
        assert_eq!(back.aggregate(&next).unwrap(), s.aggregate(&next).unwrap());
    }

    fn eval(id: u32, rows: &[Vec<u64>], loss: f64) -> EvalResult {
        let confusion = ConfusionMatrix::from_rows(rows).unwrap();
        EvalResult { client_id: id, loss, num_examples: confusion.total(), confusion }
    }

    #[test]
    fn eval_weighting() {
        let a = eval(0, &[vec![5, 0], vec![0, 5]], 0.2);
        let b = eval(1, &[vec![0, 15], vec![15, 0]], 1.0);
        let (loss, acc) = aggregate_eval(&[a.clone(), b]).unwrap();
        assert_eq!(acc, 0.25);
        assert!((loss - (10.0 * 0.2 + 30.0 * 1.0) / 40.0).abs() <= 1e-15);
        let (l2, acc2) = aggregate_eval(&[a.clone(), a.clone(), a]).unwrap();
        assert_eq!(acc2, 1.0);
        assert!((l2 - 0.2).abs() <= 1e-15);
        assert!(matches!(aggregate_eval::<f64>(&[]), Err(Error::NoResults)));
    }

    #[test]
    fn eval_matches_recount() {
        let mut rng = Pcg64::seed_from_u64(8);
        let results: Vec<EvalResult> = (0..5)
            .map(|i| {
                let rows: Vec<Vec<u64>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(0..20)).collect()).collect();
                eval(i, &rows, rng.random_range(0.0..3.0))
            })
            .collect();
        let (loss, acc) = aggregate_eval(&results).unwrap();
        let (mut correct, mut total, mut lsum) = (0u64, 0u64, 0.0);
        for r in &results {
            for t in 0..3 {
                for p in 0..3 {
                    total += r.confusion.get(t, p);
                    if t == p {
                        correct += r.confusion.get(t, p);
                    }
                }
            }
            lsum += r.loss * r.num_examples as f64;
        }
        assert!((acc - correct as f64 / total as f64).abs() <= 1e-12);
        assert!((loss - lsum / total as f64).abs() <= 1e-12);
    }

    fn kinds() -> impl Strategy<Value = StrategyKind> {
        prop_oneof![
            Just(StrategyKind::FedAvg),
            Just(StrategyKind::FedAvgM),
            Just(StrategyKind::FedOpt),
            Just(StrategyKind::FedYogi)
        ]
    }

    proptest! {
        #[test]
        fn layout_preserved_and_weight_scale_invariant(kind in kinds(), seed in any::<u64>(), k in 2u64..20) {
            let mut rng = Pcg64::seed_from_u64(seed);
            let results = random_results(&mut rng, 4, 7);
            let scaled: Vec<FitResult> = results.iter().cloned().map(|mut r| { r.num_examples *= k; r }).collect();
            let s = StrategyState::new(StrategyConfig::new(kind), Params::new(vec![0.5; 7], "t").unwrap()).unwrap();
            let a = s.aggregate(&results).unwrap();
            let b = s.aggregate(&scaled).unwrap();
            prop_assert_eq!(a.global.len(), 7);
            prop_assert_eq!(a.global.layout_id(), "t");
            for (x, y) in a.global.values().iter().zip(b.global.values()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn yogi_second_moment_stays_nonnegative() {
        let mut rng = Pcg64::seed_from_u64(12);
        for _ in 0..1000 {
            let cfg = StrategyConfig {
                kind: StrategyKind::FedYogi,
                beta2: rng.random_range(0.0..0.999),
                tau: rng.random_range(1e-6..1.0),
                ..StrategyConfig::default()
            };
            let mut s = StrategyState::new(cfg, pv(&[0.0; 3])).unwrap();
            for _ in 0..5 {
                let scale = 10f64.powf(rng.random_range(-4.0..3.0));
                let v: Vec<f64> = (0..3).map(|_| rng.random_range(-scale..scale)).collect();
                s = s.aggregate(&[fit(0, &v, 1)]).unwrap();
                assert!(s.second_moment.as_ref().unwrap().iter().all(|x| *x >= 0.0));
            }
        }
    }
}
