//! Simulation time grids, including geometric refinement toward the horizon.
//!
//! The coupling drift scales like 1/xi_t ~ 1/(L(T-t)) as t -> T, so a fixed
//! step cannot resolve the terminal contraction. [`TimeGrid::geometric`]
//! therefore uses a uniform prefix of spacing T/n0 on [0, T(1-1/n0)] followed
//! by a geometrically shrinking tail t_{k+1} = T - q(T - t_k), truncated once
//! the remaining gap T - t would drop below h_min; the final node is the
//! effective horizon T_eff = T - h_min. Backward solvers, which have no
//! terminal singularity, use [`TimeGrid::uniform`] instead.

use crate::error::{Error, Result};

/// An ascending sequence of times 0 = t_0 < t_1 < ... < t_N.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    horizon: f64,
}

impl TimeGrid {
    /// Uniform grid with `n_steps` steps on [0, T].
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        check_horizon(horizon)?;
        if n_steps == 0 {
            return Err(Error::InvalidParam {
                name: "n_steps",
                message: "must be at least 1".into(),
            });
        }
        let nodes = (0..=n_steps)
            .map(|k| horizon * k as f64 / n_steps as f64)
            .collect();
        Ok(Self { nodes, horizon })
    }

    /// Uniform prefix plus geometric tail, ending at T_eff = T - h_min.
    ///
    /// * `n0` - prefix resolution: spacing T/n0 up to T(1-1/n0) (n0 >= 2);
    /// * `q` - tail ratio in (0,1): each step leaves a fraction q of the
    ///   remaining gap to T. For q >= 1/2, shrinking h_min only appends nodes
    ///   (apart from moving the final T_eff node);
    /// * `h_min` - terminal cutoff, 0 < h_min < T/n0.
    pub fn geometric(horizon: f64, n0: usize, q: f64, h_min: f64) -> Result<Self> {
        check_horizon(horizon)?;
        if n0 < 2 {
            return Err(Error::InvalidParam {
                name: "n0",
                message: format!("must be at least 2, got {n0}"),
            });
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidParam {
                name: "q",
                message: format!("must lie in (0, 1), got {q}"),
            });
        }
        if !(h_min > 0.0 && h_min < horizon / n0 as f64) {
            return Err(Error::InvalidParam {
                name: "h_min",
                message: format!("must lie in (0, T/n0) = (0, {}), got {h_min}", horizon / n0 as f64),
            });
        }
        let mut nodes: Vec<f64> = (0..n0)
            .map(|k| horizon * k as f64 / n0 as f64)
            .collect();
        let t_eff = horizon - h_min;
        loop {
            let t = *nodes.last().expect("prefix is non-empty");
            let cand = horizon - q * (horizon - t);
            if horizon - cand >= h_min {
                nodes.push(cand);
                if horizon - cand == h_min {
                    break;
                }
            } else {
                nodes.push(t_eff);
                break;
            }
        }
        Ok(Self { nodes, horizon })
    }

    /// Number of nodes (steps + 1).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Last node: T for uniform grids, T_eff = T - h_min for geometric ones.
    pub fn t_end(&self) -> f64 {
        *self.nodes.last().expect("grids are non-empty")
    }

    /// The problem horizon T (not necessarily the last node).
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Iterate over steps as (index, t_k, dt_k).
    pub fn steps(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        (0..self.n_steps()).map(move |k| (k, self.nodes[k], self.dt(k)))
    }

    /// Largest step size.
    pub fn max_dt(&self) -> f64 {
        (0..self.n_steps()).map(|k| self.dt(k)).fold(0.0, f64::max)
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidParam {
            name: "T",
            message: format!("horizon must be finite and positive, got {horizon}"),
        });
    }
    Ok(())
}
