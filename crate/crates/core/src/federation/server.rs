//! Server state and the aggregation rules. Everything operates on client
//! deltas: the weighted mean delta is computed first and then fed through
//! the strategy's update.

use serde::{Deserialize, Serialize};

use super::local::ClientUpdate;
use super::opts::Strategy;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    /// Global rectification parameters.
    pub global_r: Vec<f64>,
    /// Global smoothing parameters; only kept when both streams are uploaded.
    pub global_s: Option<Vec<f64>>,
    /// Momentum buffer (FedAvgM).
    pub momentum: Option<Vec<f64>>,
    /// First moment (FedAdam, FedYogi).
    pub m: Option<Vec<f64>>,
    /// Second moment (FedAdam, FedYogi, FedAdagrad).
    pub v: Option<Vec<f64>>,
    pub round: usize,
}

impl ServerState {
    /// Fresh state with the buffers `strategy` needs, all zero.
    pub fn new(global_r: Vec<f64>, global_s: Option<Vec<f64>>, strategy: &Strategy) -> Self {
        let zeros = || Some(vec![0.0; global_r.len()]);
        let (momentum, m, v) = match strategy {
            Strategy::FedAvg | Strategy::FedProx { .. } => (None, None, None),
            Strategy::FedAvgM { .. } => (zeros(), None, None),
            Strategy::FedAdam { .. } | Strategy::FedYogi { .. } => (None, zeros(), zeros()),
            Strategy::FedAdagrad { .. } => (None, None, zeros()),
        };
        Self {
            global_r,
            global_s,
            momentum,
            m,
            v,
            round: 0,
        }
    }

    /// All buffers that are sized like `global_r`.
    pub fn buffers(&self) -> impl Iterator<Item = &Vec<f64>> {
        [&self.momentum, &self.m, &self.v].into_iter().flatten()
    }

    /// Applies already-averaged deltas and advances the round. Used directly
    /// when replaying a round log.
    pub fn apply_round(
        &mut self,
        mean_r: &[f64],
        mean_s: Option<&[f64]>,
        strategy: &Strategy,
    ) -> Result<()> {
        if mean_r.len() != self.global_r.len() {
            return Err(Error::dim(
                "aggregate",
                (mean_r.len(), 1),
                (self.global_r.len(), 1),
            ));
        }
        match (self.global_s.as_mut(), mean_s) {
            (Some(g), Some(d)) if g.len() == d.len() => {
                g.iter_mut().zip(d).for_each(|(g, d)| *g += d)
            }
            (None, None) => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "smoothing delta does not match server state".into(),
                ))
            }
        }
        self.apply_mean_delta(mean_r, strategy)
    }

    fn apply_mean_delta(&mut self, mean: &[f64], strategy: &Strategy) -> Result<()> {
        if mean.len() != self.global_r.len() {
            return Err(Error::dim(
                "aggregate",
                (mean.len(), 1),
                (self.global_r.len(), 1),
            ));
        }
        let missing = || {
            Error::InvalidArgument(format!(
                "server state lacks buffers for {}",
                strategy.name()
            ))
        };
        match *strategy {
            Strategy::FedAvg | Strategy::FedProx { .. } => {
                for (g, d) in self.global_r.iter_mut().zip(mean) {
                    *g += d;
                }
            }
            Strategy::FedAvgM { beta } => {
                let buf = self.momentum.as_mut().ok_or_else(missing)?;
                for ((g, b), d) in self.global_r.iter_mut().zip(buf.iter_mut()).zip(mean) {
                    *b = beta * *b + d;
                    *g += *b;
                }
            }
            Strategy::FedAdagrad { eta, tau } => {
                let v = self.v.as_mut().ok_or_else(missing)?;
                for ((g, v), d) in self.global_r.iter_mut().zip(v.iter_mut()).zip(mean) {
                    *v += d * d;
                    *g += eta * d / (v.sqrt() + tau);
                }
            }
            Strategy::FedAdam {
                eta,
                beta1,
                beta2,
                tau,
            } => {
                let m = self.m.as_mut().ok_or_else(missing)?;
                let v = self.v.as_mut().ok_or_else(missing)?;
                for (((g, m), v), d) in self
                    .global_r
                    .iter_mut()
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                    .zip(mean)
                {
                    *m = beta1 * *m + (1.0 - beta1) * d;
                    *v = beta2 * *v + (1.0 - beta2) * d * d;
                    *g += eta * *m / (v.sqrt() + tau);
                }
            }
            Strategy::FedYogi {
                eta,
                beta1,
                beta2,
                tau,
            } => {
                let m = self.m.as_mut().ok_or_else(missing)?;
                let v = self.v.as_mut().ok_or_else(missing)?;
                for (((g, m), v), d) in self
                    .global_r
                    .iter_mut()
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                    .zip(mean)
                {
                    let d2 = d * d;
                    *m = beta1 * *m + (1.0 - beta1) * d;
                    *v -= (1.0 - beta2) * d2 * sign(*v - d2);
                    *g += eta * *m / (v.sqrt() + tau);
                }
            }
        }
        self.round += 1;
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Aggregation weights `n_k / Σ n_j`, in the order given.
pub fn weights(updates: &[ClientUpdate]) -> Vec<f64> {
    let total: f64 = updates.iter().map(|u| u.n_k as f64).sum();
    updates.iter().map(|u| u.n_k as f64 / total).collect()
}

fn weighted_mean<'a>(
    weights: &[f64],
    deltas: impl Iterator<Item = &'a [f64]>,
    len: usize,
) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; len];
    for (w, delta) in weights.iter().zip(deltas) {
        if delta.len() != len {
            return Err(Error::dim("aggregate", (delta.len(), 1), (len, 1)));
        }
        for (m, d) in mean.iter_mut().zip(delta) {
            *m += w * d;
        }
    }
    Ok(mean)
}

/// The sample-weighted mean of the rectification deltas, reduced in
/// ascending client order.
pub fn mean_delta(updates: &[ClientUpdate], len: usize) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::EmptyUpdates);
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if sorted.iter().any(|u| u.n_k == 0) {
        return Err(Error::InvalidArgument("client update with n_k = 0".into()));
    }
    let total: f64 = sorted.iter().map(|u| u.n_k as f64).sum();
    let w: Vec<f64> = sorted.iter().map(|u| u.n_k as f64 / total).collect();
    weighted_mean(&w, sorted.iter().map(|u| u.delta_r.as_slice()), len)
}

/// Outcome of one aggregation, with the mean deltas kept for log replay.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregated {
    pub state: ServerState,
    pub mean_delta_r: Vec<f64>,
    pub mean_delta_s: Option<Vec<f64>>,
}

/// One server step: `Θ_r` moves by the strategy applied to the weighted mean
/// delta. When the state tracks `global_s`, every update must carry a
/// smoothing delta and their weighted mean is added plainly.
pub fn aggregate(
    state: &ServerState,
    updates: &[ClientUpdate],
    strategy: &Strategy,
) -> Result<ServerState> {
    aggregate_detailed(state, updates, strategy).map(|a| a.state)
}

pub fn aggregate_detailed(
    state: &ServerState,
    updates: &[ClientUpdate],
    strategy: &Strategy,
) -> Result<Aggregated> {
    let mean_delta_r = mean_delta(updates, state.global_r.len())?;
    let mean_delta_s = match &state.global_s {
        None => None,
        Some(global_s) => {
            let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
            sorted.sort_by_key(|u| u.client_id);
            let deltas: Option<Vec<&[f64]>> = sorted.iter().map(|u| u.delta_s.as_deref()).collect();
            let deltas = deltas.ok_or_else(|| {
                Error::InvalidArgument("dual upload without smoothing deltas".into())
            })?;
            let total: f64 = sorted.iter().map(|u| u.n_k as f64).sum();
            let w: Vec<f64> = sorted.iter().map(|u| u.n_k as f64 / total).collect();
            Some(weighted_mean(&w, deltas.into_iter(), global_s.len())?)
        }
    };
    let mut next = state.clone();
    next.apply_round(&mean_delta_r, mean_delta_s.as_deref(), strategy)?;
    Ok(Aggregated {
        state: next,
        mean_delta_r,
        mean_delta_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

    fn update(client_id: usize, n_k: usize, delta: Vec<f64>) -> ClientUpdate {
        ClientUpdate {
            client_id,
            delta_r: delta,
            delta_s: None,
            n_k,
            steps: Vec::new(),
            payload_bytes: 0,
        }
    }

    #[test]
    fn single_client_fedavg() {
        let s = ServerState::new(vec![1.0, 2.0], None, &Strategy::FedAvg);
        let next = aggregate(&s, &[update(0, 5, vec![0.5, -1.0])], &Strategy::FedAvg).unwrap();
        assert_eq!(next.global_r, vec![1.5, 1.0]);
        assert_eq!(next.round, 1);
    }

    #[test]
    fn opposite_deltas_cancel() {
        let s = ServerState::new(vec![0.3, -0.7], None, &Strategy::FedAvg);
        let ups = [
            update(0, 4, vec![0.25, -0.5]),
            update(1, 4, vec![-0.25, 0.5]),
        ];
        assert_eq!(
            aggregate(&s, &ups, &Strategy::FedAvg).unwrap().global_r,
            s.global_r
        );
    }

    #[test]
    fn scalar_fedadam_hand_oracle() {
        let strategy = Strategy::FedAdam {
            eta: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
        };
        let s = ServerState::new(vec![0.0], None, &strategy);
        let next = aggregate(&s, &[update(0, 1, vec![0.1])], &strategy).unwrap();
        // m = 0.1·0.1 = 0.01, v = 0.01·0.01 = 1e-4, step = 1e-2·0.01/(0.01 + 1e-3)
        assert!((next.m.as_ref().unwrap()[0] - 0.01).abs() < 1e-12);
        assert!((next.v.as_ref().unwrap()[0] - 1e-4).abs() < 1e-12);
        let step = 1e-2 * 0.01 / (0.01 + 1e-3);
        assert!((next.global_r[0] - step).abs() < 1e-12);
        assert!((next.global_r[0] - 9.0909e-3).abs() < 1e-7);
    }

    #[test]
    fn fedavgm_two_round_recursion() {
        let strategy = Strategy::fedavgm();
        let mut s = ServerState::new(vec![1.0], None, &strategy);
        s = aggregate(&s, &[update(0, 1, vec![0.2])], &strategy).unwrap();
        s = aggregate(&s, &[update(0, 1, vec![-0.1])], &strategy).unwrap();
        // buf1 = 0.2; g1 = 1.2; buf2 = 0.9·0.2 - 0.1 = 0.08; g2 = 1.28
        assert!((s.momentum.as_ref().unwrap()[0] - 0.08).abs() < 1e-12);
        assert!((s.global_r[0] - 1.28).abs() < 1e-12);
    }

    #[test]
    fn yogi_and_adagrad_scalar() {
        let yogi = Strategy::fedyogi();
        let s = ServerState::new(vec![0.0], None, &yogi);
        let n = aggregate(&s, &[update(0, 1, vec![0.1])], &yogi).unwrap();
        // v = 0 - 0.01·0.01·sign(0 - 0.01) = 1e-4
        assert!((n.v.as_ref().unwrap()[0] - 1e-4).abs() < 1e-15);
        assert!((n.global_r[0] - 1e-2 * 0.01 / (0.01 + 1e-3)).abs() < 1e-12);

        let ada = Strategy::fedadagrad();
        let s = ServerState::new(vec![0.0], None, &ada);
        let n = aggregate(&s, &[update(0, 1, vec![0.1])], &ada).unwrap();
        assert!((n.global_r[0] - 1e-2 * 0.1 / (0.1 + 1e-3)).abs() < 1e-12);
    }

    #[test]
    fn fedprox_server_step_is_fedavg() {
        let ups = [update(1, 3, vec![0.1, 0.2]), update(0, 7, vec![-0.3, 0.05])];
        let a = aggregate(
            &ServerState::new(vec![0.0; 2], None, &Strategy::FedAvg),
            &ups,
            &Strategy::FedAvg,
        )
        .unwrap();
        let p = Strategy::FedProx { mu: 0.0 };
        let b = aggregate(&ServerState::new(vec![0.0; 2], None, &p), &ups, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let s = ServerState::new(vec![0.0; 2], None, &Strategy::FedAvg);
        assert!(matches!(
            aggregate(&s, &[], &Strategy::FedAvg),
            Err(Error::EmptyUpdates)
        ));
        assert!(aggregate(&s, &[update(0, 1, vec![0.0; 3])], &Strategy::FedAvg).is_err());
    }

    #[test]
    fn buffers_match_global_shape() {
        for strategy in [
            Strategy::fedavgm(),
            Strategy::fedadam(),
            Strategy::fedyogi(),
            Strategy::fedadagrad(),
        ] {
            let s = ServerState::new(vec![0.0; 5], None, &strategy);
            assert!(s.buffers().count() > 0);
            assert!(s.buffers().all(|b| b.len() == 5));
        }
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_scale_free(ns in prop::collection::vec(1usize..1000, 1..10), c in 1usize..50, seed in any::<u64>()) {
            let mut rng = crate::rng::rng(seed);
            let ups: Vec<ClientUpdate> = ns.iter().enumerate().map(|(i, &n)| {
                update(i, n, (0..4).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
            }).collect();
            prop_assert!((weights(&ups).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let scaled: Vec<ClientUpdate> = ups.iter().map(|u| update(u.client_id, u.n_k * c, u.delta_r.clone())).collect();
            prop_assert_eq!(mean_delta(&ups, 4).unwrap(), mean_delta(&scaled, 4).unwrap());
            let mut reversed = ups.clone();
            reversed.reverse();
            prop_assert_eq!(mean_delta(&ups, 4).unwrap(), mean_delta(&reversed, 4).unwrap());
        }
    }
}
