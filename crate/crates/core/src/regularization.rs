//! Regularizers added to the scalarized training loss.
//!
//! * Orthogonal regularization pushes the flattened, normalized adapter
//!   products `wᵢ = vec(BᵢAᵢ)/‖BᵢAᵢ‖` of every layer toward mutual
//!   orthogonality: `R = ‖WᵀW − I‖²_F`, averaged over layers. With more than
//!   `stochastic_threshold` tasks a random task subset is used per iteration.
//! * Multi-forward regularization penalizes preference windows whose per-task
//!   losses are ordered against their preference weights.
//!
//! A zero adapter product (every adapter right after initialization, since
//! `B = 0`) has no direction. Such adapters are left out of the Gram matrix,
//! which is the same as treating them as orthogonal to everything, and they
//! receive no regularizer gradient.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{Adapter, LayerGradients};
use crate::network::{Bottom, ManifoldModel};
use crate::numeric::{dot, Matrix, PreferenceVector, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthConfig {
    pub lambda_o: f64,
    /// Subset sampling kicks in when the task count exceeds this.
    pub stochastic_threshold: usize,
    pub subset_size: usize,
}

impl Default for OrthConfig {
    fn default() -> Self {
        Self {
            lambda_o: 0.0,
            stochastic_threshold: 3,
            subset_size: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HingeOrientation {
    /// Hinge on `fᵢ(θ(α′)) − fᵢ(θ(α))` for `αᵢ < α′ᵢ`: the preference that
    /// weighs task `i` more should not have the larger task-`i` loss.
    #[default]
    PenalizeWrongOrdering,
    /// Hinge on `fᵢ(θ(α)) − fᵢ(θ(α′))`: the opposite sign, kept for comparison.
    PenalizeExpectedOrdering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MultiForwardConfig {
    pub lambda_p: f64,
    pub orientation: HingeOrientation,
}

/// State of one layer's orthogonality loss needed for the backward pass.
#[derive(Debug, Clone)]
pub struct OrthLayerCache {
    /// Task indices whose product entered the Gram matrix.
    used: Vec<usize>,
    factors: Vec<Adapter>,
    w: Vec<Vec<f64>>,
    norms: Vec<f64>,
    gram: Vec<Vec<f64>>,
    degenerate: bool,
    shape: (usize, usize),
}

impl OrthLayerCache {
    /// Fewer than two usable adapters: the loss is 0 by convention.
    pub fn degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn used_tasks(&self) -> &[usize] {
        &self.used
    }
}

/// `‖WᵀW − I‖²_F` over the selected adapters (all of them when `subset` is `None`).
pub fn orth_loss_layer(adapters: &[Adapter], subset: Option<&[usize]>) -> Result<(f64, OrthLayerCache)> {
    let selected: Vec<usize> = match subset {
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&i| i >= adapters.len()) {
                return Err(Error::contract(format!("subset index {bad} out of range")));
            }
            s.to_vec()
        }
        None => (0..adapters.len()).collect(),
    };
    let mut used = Vec::new();
    let mut factors = Vec::new();
    let mut w = Vec::new();
    let mut norms = Vec::new();
    let mut shape = (0, 0);
    for &i in &selected {
        let p = adapters[i].product();
        shape = p.shape();
        let n = p.frobenius_norm();
        if n == 0.0 {
            continue;
        }
        used.push(i);
        factors.push(adapters[i].clone());
        w.push(p.as_slice().iter().map(|v| v / n).collect::<Vec<f64>>());
        norms.push(n);
    }
    let k = used.len();
    let gram: Vec<Vec<f64>> = (0..k).map(|a| (0..k).map(|b| dot(&w[a], &w[b])).collect()).collect();
    let degenerate = k < 2;
    let value = if degenerate {
        0.0
    } else {
        let mut v = 0.0;
        for (a, row) in gram.iter().enumerate() {
            for (b, &g) in row.iter().enumerate() {
                let r = g - if a == b { 1.0 } else { 0.0 };
                v += r * r;
            }
        }
        v
    };
    Ok((
        value,
        OrthLayerCache {
            used,
            factors,
            w,
            norms,
            gram,
            degenerate,
            shape,
        },
    ))
}

/// Accumulates `coeff · ∂R/∂Bᵢ` and `coeff · ∂R/∂Aᵢ` for one layer.
pub fn orth_layer_backward(cache: &OrthLayerCache, grads: &mut LayerGradients, coeff: f64) -> Result<()> {
    if cache.degenerate || coeff == 0.0 {
        return Ok(());
    }
    let k = cache.used.len();
    let (d, cols) = cache.shape;
    for a in 0..k {
        // ∂R/∂w_a = 4 Σ_b (G_ab − δ_ab) w_b
        let mut g_w = vec![0.0; d * cols];
        for b in 0..k {
            let c = 4.0 * (cache.gram[a][b] - if a == b { 1.0 } else { 0.0 });
            if c != 0.0 {
                for (g, &x) in g_w.iter_mut().zip(&cache.w[b]) {
                    *g += c * x;
                }
            }
        }
        // Through w = p/‖p‖: ∂R/∂p = (g − w (wᵀg)) / ‖p‖.
        let wa = &cache.w[a];
        let proj = dot(wa, &g_w);
        let g_p: Vec<f64> = g_w
            .iter()
            .zip(wa)
            .map(|(g, x)| coeff * (g - x * proj) / cache.norms[a])
            .collect();
        let g_p = Matrix::new(d, cols, g_p)?;
        let task = cache.used[a];
        let ad = &cache.factors[a];
        let target = grads
            .g_adapters
            .get_mut(task)
            .ok_or_else(|| Error::contract("gradient buffer has too few adapters"))?;
        target.g_b.axpy(1.0, &g_p.matmul_transpose_b(&ad.a)?)?;
        target.g_a.axpy(1.0, &ad.b.transpose_matmul(&g_p)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct OrthNetworkCache {
    layers: Vec<OrthLayerCache>,
    subset: Option<Vec<usize>>,
}

impl OrthNetworkCache {
    /// The task subset drawn for this evaluation, if subset sampling was active.
    pub fn subset(&self) -> Option<&[usize]> {
        self.subset.as_deref()
    }

    pub fn layers(&self) -> &[OrthLayerCache] {
        &self.layers
    }
}

/// Draws the task subset used for one iteration, or `None` when every task is used.
pub fn draw_orth_subset(m: usize, config: &OrthConfig, rng: &mut SeededRng) -> Result<Option<Vec<usize>>> {
    if m <= config.stochastic_threshold {
        return Ok(None);
    }
    if config.subset_size < 2 || config.subset_size > m {
        return Err(Error::param(format!(
            "orthogonality subset size {} must lie in 2..={m}",
            config.subset_size
        )));
    }
    let mut s = sample(rng, m, config.subset_size).into_vec();
    s.sort_unstable();
    Ok(Some(s))
}

/// Mean of the per-layer orthogonality losses. One subset (if any) is shared by all layers.
pub fn orth_loss_network(model: &ManifoldModel, rng: &mut SeededRng, config: &OrthConfig) -> Result<(f64, OrthNetworkCache)> {
    let layers = match &model.bottom {
        Bottom::LowRank(ls) => ls,
        Bottom::Pamal(_) => return Err(Error::Unsupported("orthogonal regularization needs low-rank adapters".into())),
    };
    let subset = draw_orth_subset(model.num_tasks(), config, rng)?;
    let mut total = 0.0;
    let mut caches = Vec::with_capacity(layers.len());
    for l in layers {
        let (v, c) = orth_loss_layer(&l.adapters, subset.as_deref())?;
        total += v;
        caches.push(c);
    }
    Ok((total / layers.len() as f64, OrthNetworkCache { layers: caches, subset }))
}

/// Accumulates `λₒ · ∂Rₒ/∂{Bᵢ, Aᵢ}` into the per-layer gradient buffers.
pub fn orth_loss_backward(cache: &OrthNetworkCache, grads: &mut [LayerGradients], lambda_o: f64) -> Result<()> {
    if grads.len() != cache.layers.len() {
        return Err(Error::contract("gradient buffers and orthogonality cache differ in depth"));
    }
    let coeff = lambda_o / cache.layers.len() as f64;
    for (c, g) in cache.layers.iter().zip(grads) {
        orth_layer_backward(c, g, coeff)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiForwardOutput {
    pub value: f64,
    /// `∂R/∂fᵢ(θ(αʲ))`, indexed `[j][i]`.
    pub grad: Vec<Vec<f64>>,
    /// Window smaller than two: the loss is 0 by convention.
    pub degenerate: bool,
}

/// Sum over tasks of the log-mean-exp of hinged ordering violations.
///
/// `losses[j][i]` is task `i`'s loss under preference `alphas[j]`. Edges for
/// task `i` are pairs `(α, α′)` with `αᵢ < α′ᵢ`; tasks without edges add 0.
/// The gradient is a subgradient: 0 is taken at hinge kinks.
pub fn multi_forward_loss(
    losses: &[Vec<f64>],
    alphas: &[PreferenceVector],
    config: &MultiForwardConfig,
) -> Result<MultiForwardOutput> {
    let b = losses.len();
    if alphas.len() != b {
        return Err(Error::contract("one loss row is needed per preference"));
    }
    let m = alphas.first().map_or(0, PreferenceVector::len);
    let mut grad = vec![vec![0.0; m]; b];
    if b < 2 {
        return Ok(MultiForwardOutput {
            value: 0.0,
            grad,
            degenerate: true,
        });
    }
    if alphas.iter().any(|a| a.len() != m) || losses.iter().any(|l| l.len() != m) {
        return Err(Error::contract("preferences and losses disagree on the task count"));
    }

    let mut value = 0.0;
    for i in 0..m {
        // (lower-weight index, higher-weight index, hinge argument)
        let mut edges = Vec::new();
        for j in 0..b {
            for k in 0..b {
                if alphas[j].get(i) < alphas[k].get(i) {
                    let arg = match config.orientation {
                        HingeOrientation::PenalizeWrongOrdering => losses[k][i] - losses[j][i],
                        HingeOrientation::PenalizeExpectedOrdering => losses[j][i] - losses[k][i],
                    };
                    edges.push((j, k, arg));
                }
            }
        }
        if edges.is_empty() {
            continue;
        }
        let hinges: Vec<f64> = edges.iter().map(|e| e.2.max(0.0)).collect();
        let mx = hinges.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = hinges.iter().map(|h| (h - mx).exp()).sum();
        value += mx + (sum / edges.len() as f64).ln();

        for (&(j, k, arg), &h) in edges.iter().zip(&hinges) {
            if arg <= 0.0 {
                continue;
            }
            let weight = (h - mx).exp() / sum;
            let (plus, minus) = match config.orientation {
                HingeOrientation::PenalizeWrongOrdering => (k, j),
                HingeOrientation::PenalizeExpectedOrdering => (j, k),
            };
            grad[plus][i] += weight;
            grad[minus][i] -= weight;
        }
    }
    Ok(MultiForwardOutput {
        value,
        grad,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{gaussian_matrix, sample_dirichlet};
    use rand::Rng;

    fn adapter_from_product(p: &Matrix) -> Adapter {
        // B = P, A = I (rank = cols) is a valid factorization for testing.
        Adapter {
            b: p.clone(),
            a: Matrix::identity(p.cols()),
        }
    }

    fn random_adapters(m: usize, d: usize, k: usize, r: usize, rng: &mut SeededRng) -> Vec<Adapter> {
        (0..m)
            .map(|_| Adapter {
                b: gaussian_matrix(d, r, 1.0, rng),
                a: gaussian_matrix(r, k, 1.0, rng),
            })
            .collect()
    }

    #[test]
    fn orthogonal_adapters_have_zero_loss() {
        let ps: Vec<Matrix> = (0..3)
            .map(|i| Matrix::from_fn(2, 2, |r, c| if r * 2 + c == i { 1.0 + i as f64 } else { 0.0 }))
            .collect();
        let ads: Vec<Adapter> = ps.iter().map(adapter_from_product).collect();
        let (v, cache) = orth_loss_layer(&ads, None).unwrap();
        assert_eq!(v, 0.0);
        let mut grads = crate::lowrank::LowRankLayer::from_parts(Matrix::zeros(2, 2), vec![0.0; 2], ads, 1.0)
            .unwrap()
            .zero_gradients();
        orth_layer_backward(&cache, &mut grads, 1.0).unwrap();
        for g in &grads.g_adapters {
            assert_eq!(g.g_b.frobenius_norm(), 0.0);
            assert_eq!(g.g_a.frobenius_norm(), 0.0);
        }
    }

    #[test]
    fn identical_pair_gives_two() {
        let p = gaussian_matrix(3, 2, 1.0, &mut SeededRng::new(1));
        let ads = vec![adapter_from_product(&p), adapter_from_product(&p)];
        let (v, _) = orth_loss_layer(&ads, None).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    // Three unit vectors with pairwise cosine 1/2: e.g. (1,1,0)/√2, (1,0,1)/√2, (0,1,1)/√2.
    // Off-diagonal Gram entries are all 0.5, six of them: 6 · 0.25.
    #[test]
    fn equal_half_cosines_give_one_point_five() {
        let rows = [[1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];
        let ads: Vec<Adapter> = rows
            .iter()
            .map(|r| adapter_from_product(&Matrix::new(1, 3, r.to_vec()).unwrap()))
            .collect();
        let mut gram_sum = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    let c: f64 = (0..3).map(|t| rows[a][t] * rows[b][t]).sum::<f64>() / 2.0;
                    gram_sum += c * c;
                }
            }
        }
        let (v, _) = orth_loss_layer(&ads, None).unwrap();
        assert!((v - 1.5).abs() < 1e-12);
        assert!((v - gram_sum).abs() < 1e-12);
    }

    #[test]
    fn zero_products_are_skipped() {
        let mut rng = SeededRng::new(2);
        let mut ads = random_adapters(3, 4, 3, 2, &mut rng);
        ads[1].b.fill(0.0);
        let (_, cache) = orth_loss_layer(&ads, None).unwrap();
        assert_eq!(cache.used_tasks(), &[0, 2]);
        ads[2].b.fill(0.0);
        let (v, cache) = orth_loss_layer(&ads, None).unwrap();
        assert_eq!(v, 0.0);
        assert!(cache.degenerate());
    }

    #[test]
    fn invariant_to_positive_rescaling() {
        let mut rng = SeededRng::new(3);
        let ads = random_adapters(4, 5, 4, 2, &mut rng);
        let (v, _) = orth_loss_layer(&ads, None).unwrap();
        let mut scaled = ads.clone();
        scaled[2].b.scale(37.5);
        scaled[0].a.scale(0.01);
        let (v2, _) = orth_loss_layer(&scaled, None).unwrap();
        assert!((v - v2).abs() < 1e-10);
    }

    #[test]
    fn symmetric_under_task_permutation() {
        let mut rng = SeededRng::new(4);
        let ads = random_adapters(4, 3, 3, 1, &mut rng);
        let (v, _) = orth_loss_layer(&ads, None).unwrap();
        let perm = vec![ads[2].clone(), ads[0].clone(), ads[3].clone(), ads[1].clone()];
        let (v2, _) = orth_loss_layer(&perm, None).unwrap();
        assert!((v - v2).abs() < 1e-12);
    }

    #[test]
    fn layer_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        let ads = random_adapters(3, 4, 3, 2, &mut rng);
        let layer = crate::lowrank::LowRankLayer::from_parts(Matrix::zeros(4, 3), vec![0.0; 4], ads, 1.0).unwrap();
        let (_, cache) = orth_loss_layer(&layer.adapters, None).unwrap();
        let mut grads = layer.zero_gradients();
        orth_layer_backward(&cache, &mut grads, 0.7).unwrap();
        assert_eq!(grads.g_theta0.frobenius_norm(), 0.0);
        let h = 1e-6;
        for t in 0..3 {
            for which in 0..2 {
                let n = if which == 0 { 8 } else { 6 };
                for idx in 0..n {
                    let eval = |delta: f64| {
                        let mut ads = layer.adapters.clone();
                        let m = if which == 0 { &mut ads[t].b } else { &mut ads[t].a };
                        m.as_mut_slice()[idx] += delta;
                        0.7 * orth_loss_layer(&ads, None).unwrap().0
                    };
                    let num = (eval(h) - eval(-h)) / (2.0 * h);
                    let g = &grads.g_adapters[t];
                    let ana = if which == 0 { g.g_b.as_slice()[idx] } else { g.g_a.as_slice()[idx] };
                    let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
                    assert!(err < 1e-4, "task {t} factor {which} idx {idx}: {num} vs {ana}");
                }
            }
        }
    }

    #[test]
    fn multi_forward_flat_losses_are_free() {
        let alphas = vec![
            PreferenceVector::new(vec![0.2, 0.8]).unwrap(),
            PreferenceVector::new(vec![0.6, 0.4]).unwrap(),
            PreferenceVector::new(vec![0.9, 0.1]).unwrap(),
        ];
        let losses = vec![vec![1.0, 2.0]; 3];
        for orientation in [HingeOrientation::PenalizeWrongOrdering, HingeOrientation::PenalizeExpectedOrdering] {
            let out = multi_forward_loss(&losses, &alphas, &MultiForwardConfig { lambda_p: 1.0, orientation }).unwrap();
            assert_eq!(out.value, 0.0);
        }
    }

    #[test]
    fn multi_forward_correct_order_is_free() {
        let alphas = vec![
            PreferenceVector::new(vec![0.2, 0.8]).unwrap(),
            PreferenceVector::new(vec![0.9, 0.1]).unwrap(),
        ];
        // Task 0 loss lower where task 0 weighs more; same for task 1.
        let losses = vec![vec![2.0, 0.5], vec![1.0, 3.0]];
        let out = multi_forward_loss(&losses, &alphas, &MultiForwardConfig::default()).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn multi_forward_hand_case() {
        let alphas = vec![
            PreferenceVector::new(vec![0.7, 0.3]).unwrap(),
            PreferenceVector::new(vec![0.3, 0.7]).unwrap(),
        ];
        let losses = vec![vec![1.0, 0.4], vec![0.0, 0.4]];
        let out = multi_forward_loss(&losses, &alphas, &MultiForwardConfig::default()).unwrap();
        assert!((out.value - 1.0).abs() < 1e-15);

        let verbatim = MultiForwardConfig {
            lambda_p: 1.0,
            orientation: HingeOrientation::PenalizeExpectedOrdering,
        };
        assert_eq!(multi_forward_loss(&losses, &alphas, &verbatim).unwrap().value, 0.0);
    }

    #[test]
    fn multi_forward_small_window_is_degenerate() {
        let alphas = vec![PreferenceVector::uniform(2).unwrap()];
        let out = multi_forward_loss(&[vec![1.0, 2.0]], &alphas, &MultiForwardConfig::default()).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn multi_forward_subgradient_matches_finite_differences() {
        let mut rng = SeededRng::new(6);
        let mut checked = 0;
        for orientation in [HingeOrientation::PenalizeWrongOrdering, HingeOrientation::PenalizeExpectedOrdering] {
            let config = MultiForwardConfig { lambda_p: 1.0, orientation };
            for _ in 0..30 {
                let alphas: Vec<PreferenceVector> = (0..4).map(|_| sample_dirichlet(&[1.0; 3], &mut rng).unwrap()).collect();
                let losses: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
                let near_kink = (0..3).any(|i| {
                    (0..4).any(|j| (0..4).any(|k| j != k && (losses[j][i] - losses[k][i]).abs() < 1e-3))
                });
                if near_kink {
                    continue;
                }
                let out = multi_forward_loss(&losses, &alphas, &config).unwrap();
                let h = 1e-6;
                for j in 0..4 {
                    for i in 0..3 {
                        let mut up = losses.clone();
                        up[j][i] += h;
                        let mut down = losses.clone();
                        down[j][i] -= h;
                        let num = (multi_forward_loss(&up, &alphas, &config).unwrap().value
                            - multi_forward_loss(&down, &alphas, &config).unwrap().value)
                            / (2.0 * h);
                        let ana = out.grad[j][i];
                        let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
                        assert!(err < 1e-5, "{num} vs {ana}");
                    }
                }
                assert!(out.value >= 0.0);
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn multi_forward_zero_iff_all_hinges_zero() {
        let mut rng = SeededRng::new(7);
        for _ in 0..200 {
            let alphas: Vec<PreferenceVector> = (0..3).map(|_| sample_dirichlet(&[1.0; 2], &mut rng).unwrap()).collect();
            let losses: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let out = multi_forward_loss(&losses, &alphas, &MultiForwardConfig::default()).unwrap();
            let any_violation = (0..2).any(|i| {
                (0..3).any(|j| (0..3).any(|k| alphas[j].get(i) < alphas[k].get(i) && losses[k][i] > losses[j][i]))
            });
            assert!(out.value >= 0.0);
            assert_eq!(out.value > 0.0, any_violation);
        }
    }

    #[test]
    fn subset_drawn_only_above_threshold() {
        let mut rng = SeededRng::new(8);
        let config = OrthConfig::default();
        assert_eq!(draw_orth_subset(3, &config, &mut rng).unwrap(), None);
        let s = draw_orth_subset(7, &config, &mut rng).unwrap().unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.windows(2).all(|w| w[0] < w[1]) && s[2] < 7);
        let bad = OrthConfig { subset_size: 1, ..config };
        assert!(draw_orth_subset(7, &bad, &mut rng).is_err());
    }
}
