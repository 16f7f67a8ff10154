//! Clone/split Gaussians with large screen-space positional gradients and
//! prune nearly transparent ones.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::raster::quat_to_matrix;
use crate::scene::Gaussian;
use crate::sigmoid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// Candidates dropped because of the Gaussian cap.
    pub capped: usize,
}

/// Densification pass over the statistics accumulated since the last one.
///
/// Small Gaussians above the gradient threshold are cloned in place; large
/// ones are replaced by two children sampled from the parent with scales
/// divided by `split_scale_divisor`. Children copy every other parameter,
/// including the appearance feature. Then every Gaussian below the opacity
/// floor is pruned. New rows get zero Adam moments and statistics restart.
pub fn densify_and_prune(state: &mut TrainState) -> DensifyOutcome {
    let cfg = state.config.densify;
    let n = state.model.cloud.len();
    let mut outcome = DensifyOutcome::default();

    let avg: Vec<f64> = (0..n)
        .map(|i| {
            if state.grad_count[i] > 0.0 {
                state.grad_accum[i] / state.grad_count[i]
            } else {
                0.0
            }
        })
        .collect();
    let prune: Vec<bool> = (0..n)
        .map(|i| sigmoid(state.model.cloud.opacity_logits[i]) < cfg.min_opacity)
        .collect();
    let mut candidates: Vec<usize> = (0..n).filter(|&i| avg[i] > cfg.grad_threshold && !prune[i]).collect();

    let survivors = n - prune.iter().filter(|p| **p).count();
    let big = |i: usize| {
        let ls = state.model.cloud.log_scale(i);
        ls.iter().cloned().fold(f64::MIN, f64::max).exp() > cfg.percent_dense * state.extent
    };
    // Clones add one row; splits add two and remove the parent.
    if survivors + candidates.len() > cfg.max_gaussians {
        candidates.sort_by(|&a, &b| avg[b].total_cmp(&avg[a]).then(a.cmp(&b)));
        let room = cfg.max_gaussians.saturating_sub(survivors);
        outcome.capped = candidates.len() - room.min(candidates.len());
        candidates.truncate(room);
        candidates.sort_unstable();
        log::warn!(
            "Gaussian cap {} reached: {} densification candidates dropped",
            cfg.max_gaussians,
            outcome.capped
        );
    }

    let cloud = &state.model.cloud;
    let mut added: Vec<Gaussian> = Vec::new();
    let mut remove = prune.clone();
    for &i in &candidates {
        let g = cloud.gaussian(i);
        if big(i) {
            let r = quat_to_matrix(g.rotation);
            let s = g.log_scale.map(f64::exp);
            for _ in 0..2 {
                let z: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(&mut state.rng));
                let local = [s[0] * z[0], s[1] * z[1], s[2] * z[2]];
                let mut child = g.clone();
                for a in 0..3 {
                    child.mean[a] += (0..3).map(|b| r[a][b] * local[b]).sum::<f64>();
                    child.log_scale[a] = g.log_scale[a] - cfg.split_scale_divisor.ln();
                }
                added.push(child);
            }
            remove[i] = true;
            outcome.split += 1;
        } else {
            added.push(g);
            outcome.cloned += 1;
        }
    }
    outcome.pruned = prune.iter().filter(|p| **p).count();

    let keep: Vec<bool> = remove.iter().map(|r| !r).collect();
    state.model.cloud.retain(&keep);
    for (adam, width) in state.optim.gaussian_groups() {
        adam.retain_rows(&keep, width);
        adam.push_zero_rows(added.len(), width);
    }
    for g in added {
        state.model.cloud.push(g);
    }
    let m = state.model.cloud.len();
    state.grad_accum = vec![0.0; m];
    state.grad_count = vec![0.0; m];
    state.model.appearance.invalidate();
    outcome
}
