//! Adversarial attack generation: FGSM, BIM, PGD, AutoPGD, DeepFool, and
//! ZOO over an epsilon grid, producing one perturbed copy of the test
//! split per (attack, epsilon) cell.
//!
//! Bounded attacks stay inside the L-inf ball around each sample and
//! inside the per-feature domain box. DeepFool is a minimal-perturbation
//! attack: its knob is the overshoot, not a budget.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureBound, PreprocessState};
use crate::error::{Error, Result};
use crate::nn::{
    argmax_lowest, forward, input_gradient, logit_input_gradient, per_sample_ce, MlpModel,
};
use crate::seeding::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
    AutoPgd,
    DeepFool,
    Zoo,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::Fgsm,
        AttackKind::Bim,
        AttackKind::Pgd,
        AttackKind::AutoPgd,
        AttackKind::DeepFool,
        AttackKind::Zoo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
            AttackKind::AutoPgd => "auto_pgd",
            AttackKind::DeepFool => "deepfool",
            AttackKind::Zoo => "zoo",
        }
    }

    /// Whether the attack honors the L-inf epsilon budget (DeepFool does not;
    /// its epsilon is the overshoot).
    pub fn is_ball_bounded(self) -> bool {
        self != AttackKind::DeepFool
    }
}

/// Valid-input box in standardized feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimMismatch("bounds lo/hi lengths differ".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidArgument("bounds require lo <= hi".into()));
        }
        Ok(DomainBounds { lo, hi })
    }

    pub fn from_state(state: &PreprocessState) -> Self {
        let lo = state.clamp_bounds.iter().map(|b| b.lo).collect();
        let hi = state.clamp_bounds.iter().map(|b| b.hi).collect();
        DomainBounds { lo, hi }
    }

    pub fn from_features(features: &Array2<f64>) -> Self {
        let d = features.ncols();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for row in features.rows() {
            for (j, &v) in row.iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        DomainBounds { lo, hi }
    }

    pub fn to_feature_bounds(&self) -> Vec<FeatureBound> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&lo, &hi)| FeatureBound { lo, hi })
            .collect()
    }

    pub fn d(&self) -> usize {
        self.lo.len()
    }

    fn clamp_inplace(&self, x: &mut Array1<f64>) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[j], self.hi[j]);
        }
    }
}

fn clamp_to_ball(x: &mut Array1<f64>, center: ArrayView1<f64>, eps: f64) {
    for (v, &c) in x.iter_mut().zip(center.iter()) {
        *v = v.clamp(c - eps, c + eps);
    }
}

/// sign with sign(0) = 0.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn grad_for(model: &MlpModel, x: &Array1<f64>, y: usize) -> Result<Array1<f64>> {
    input_gradient(model, x.view(), y)
}

fn ce_at(model: &MlpModel, x: &Array1<f64>, y: usize) -> Result<f64> {
    let batch = x.view().insert_axis(Axis(0)).to_owned();
    let logits = forward(model, &batch)?;
    Ok(per_sample_ce(&logits, &[y])[0])
}

/// Single gradient-sign step clipped to the domain box.
pub fn fgsm(
    model: &MlpModel,
    x: ArrayView1<f64>,
    y: usize,
    eps: f64,
    bounds: &DomainBounds,
) -> Result<Array1<f64>> {
    let x = x.to_owned();
    let g = grad_for(model, &x, y)?;
    let mut out = x;
    for (v, gv) in out.iter_mut().zip(g.iter()) {
        *v += eps * sign(*gv);
    }
    bounds.clamp_inplace(&mut out);
    Ok(out)
}

/// Iterated gradient-sign steps, re-projected to the box and the epsilon
/// ball after each step. No random start.
pub fn bim(
    model: &MlpModel,
    x: ArrayView1<f64>,
    y: usize,
    eps: f64,
    steps: usize,
    alpha: f64,
    bounds: &DomainBounds,
) -> Result<Array1<f64>> {
    if alpha <= 0.0 {
        return Err(Error::InvalidArgument("bim step size must be > 0".into()));
    }
    let origin = x.to_owned();
    let mut cur = origin.clone();
    for _ in 0..steps {
        let g = grad_for(model, &cur, y)?;
        for (v, gv) in cur.iter_mut().zip(g.iter()) {
            *v += alpha * sign(*gv);
        }
        bounds.clamp_inplace(&mut cur);
        clamp_to_ball(&mut cur, origin.view(), eps);
    }
    Ok(cur)
}

/// BIM with a seeded uniform random start inside the epsilon ball.
pub fn pgd(
    model: &MlpModel,
    x: ArrayView1<f64>,
    y: usize,
    eps: f64,
    steps: usize,
    alpha: f64,
    bounds: &DomainBounds,
    seed: u64,
) -> Result<Array1<f64>> {
    if alpha <= 0.0 {
        return Err(Error::InvalidArgument("pgd step size must be > 0".into()));
    }
    let origin = x.to_owned();
    let mut cur = origin.clone();
    if eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in cur.iter_mut() {
            *v += rng.gen::<f64>() * 2.0 * eps - eps;
        }
        bounds.clamp_inplace(&mut cur);
    }
    for _ in 0..steps {
        let g = grad_for(model, &cur, y)?;
        for (v, gv) in cur.iter_mut().zip(g.iter()) {
            *v += alpha * sign(*gv);
        }
        bounds.clamp_inplace(&mut cur);
        clamp_to_ball(&mut cur, origin.view(), eps);
    }
    Ok(cur)
}

/// Momentum iterate with step-size halving at checkpoints; returns the
/// best-loss iterate seen. Also returns the losses recorded at each
/// checkpoint so the best-so-far contract is checkable.
pub(crate) fn auto_pgd_traced(
    model: &MlpModel,
    x: ArrayView1<f64>,
    y: usize,
    eps: f64,
    steps: usize,
    bounds: &DomainBounds,
    seed: u64,
) -> Result<(Array1<f64>, Vec<f64>)> {
    if steps < 2 {
        return Err(Error::InvalidArgument("auto_pgd needs steps >= 2".into()));
    }
    let origin = x.to_owned();
    if eps == 0.0 {
        return Ok((origin, Vec::new()));
    }

    // checkpoint fractions: 0.22, then shrinking intervals (min 0.06)
    let mut fracs: Vec<f64> = vec![0.0, 0.22];
    while *fracs.last().unwrap() < 1.0 {
        let last = fracs[fracs.len() - 1];
        let prev = fracs[fracs.len() - 2];
        fracs.push(last + (last - prev - 0.03).max(0.06));
    }
    let checkpoints: Vec<usize> = fracs
        .iter()
        .skip(1)
        .map(|f| ((f * steps as f64).ceil() as usize).min(steps))
        .collect();

    let project = |v: &mut Array1<f64>| {
        bounds.clamp_inplace(v);
        clamp_to_ball(v, origin.view(), eps);
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = origin.clone();
    for v in cur.iter_mut() {
        *v += rng.gen::<f64>() * 2.0 * eps - eps;
    }
    project(&mut cur);

    let mut eta = 2.0 * eps;
    let momentum = 0.75;

    let mut loss_cur = ce_at(model, &cur, y)?;
    let mut best = cur.clone();
    let mut best_loss = loss_cur;
    let mut prev = cur.clone();

    let mut improved_since_ckpt = 0usize;
    let mut last_ckpt = 0usize;
    let mut ckpt_cursor = 0usize;
    let mut checkpoint_losses = Vec::new();
    let mut eta_at_last_ckpt = eta;
    let mut best_at_last_ckpt = best_loss;

    for k in 0..steps {
        let g = grad_for(model, &cur, y)?;
        let mut z = cur.clone();
        for (v, gv) in z.iter_mut().zip(g.iter()) {
            *v += eta * sign(*gv);
        }
        project(&mut z);

        let next = if k == 0 {
            z
        } else {
            let mut n = cur.clone();
            for j in 0..n.len() {
                n[j] = cur[j] + momentum * (z[j] - cur[j]) + (1.0 - momentum) * (cur[j] - prev[j]);
            }
            project(&mut n);
            n
        };

        let loss_next = ce_at(model, &next, y)?;
        if loss_next > loss_cur {
            improved_since_ckpt += 1;
        }
        if loss_next > best_loss {
            best_loss = loss_next;
            best = next.clone();
        }
        prev = std::mem::replace(&mut cur, next.clone());
        loss_cur = loss_next;

        if ckpt_cursor < checkpoints.len() && k + 1 == checkpoints[ckpt_cursor] {
            checkpoint_losses.push(loss_cur);
            let interval = checkpoints[ckpt_cursor] - last_ckpt;
            let too_few_improvements =
                (improved_since_ckpt as f64) < 0.75 * interval as f64;
            let stalled = eta == eta_at_last_ckpt && best_loss == best_at_last_ckpt;
            if too_few_improvements || stalled {
                eta /= 2.0;
                cur = best.clone();
                loss_cur = best_loss;
                prev = cur.clone();
            }
            last_ckpt = checkpoints[ckpt_cursor];
            ckpt_cursor += 1;
            improved_since_ckpt = 0;
            eta_at_last_ckpt = eta;
            best_at_last_ckpt = best_loss;
        }
        let _ = next;
    }
    Ok((best, checkpoint_losses))
}

/// AutoPGD: step-size-adaptive PGD returning the best-loss iterate.
pub fn auto_pgd(
    model: &MlpModel,
    x: ArrayView1<f64>,
    y: usize,
    eps: f64,
    steps: usize,
    bounds: &DomainBounds,
    seed: u64,
) -> Result<Array1<f64>> {
    auto_pgd_traced(model, x, y, eps, steps, bounds, seed).map(|(x, _)| x)
}

/// Iterative multiclass linearization toward the nearest decision
/// boundary. Returns the perturbed input and a flag set when every class
/// direction had zero gradient (flat model).
pub fn deepfool(
    model: &MlpModel,
    x: ArrayView1<f64>,
    y: usize,
    max_iter: usize,
    overshoot: f64,
    bounds: &DomainBounds,
) -> Result<(Array1<f64>, bool)> {
    if max_iter < 1 {
        return Err(Error::InvalidArgument("deepfool needs max_iter >= 1".into()));
    }
    let origin = x.to_owned();
    let n_classes = model.output_dim();

    let prediction = |v: &Array1<f64>| -> Result<usize> {
        let logits = forward(model, &v.view().insert_axis(Axis(0)).to_owned())?;
        Ok(argmax_lowest(logits.row(0).iter().cloned()))
    };

    // already misclassified: nothing to do
    if prediction(&origin)? != y {
        return Ok((origin, false));
    }

    let mut r_total = Array1::<f64>::zeros(origin.len());
    let mut cur = origin.clone();
    for _ in 0..max_iter {
        if prediction(&cur)? != y {
            break;
        }
        let batch = cur.view().insert_axis(Axis(0)).to_owned();
        let logits = forward(model, &batch)?;
        let grad_y = logit_input_gradient(model, cur.view(), y)?;

        let mut best: Option<(f64, Array1<f64>, f64)> = None; // (ratio, w_k, |f_k|)
        for k in 0..n_classes {
            if k == y {
                continue;
            }
            let w_k = logit_input_gradient(model, cur.view(), k)? - &grad_y;
            let f_k = logits[(0, k)] - logits[(0, y)];
            let norm = w_k.mapv(|v| v * v).sum().sqrt();
            if norm < 1e-12 {
                continue;
            }
            let ratio = f_k.abs() / norm;
            if best.as_ref().map_or(true, |(r, _, _)| ratio < *r) {
                best = Some((ratio, w_k, f_k.abs()));
            }
        }
        let Some((_, w, f_abs)) = best else {
            return Ok((origin, true));
        };
        let norm_sq = w.mapv(|v| v * v).sum();
        let step = &w * (f_abs / norm_sq);
        r_total += &step;
        cur = &origin + &r_total;
    }

    let mut out = &origin + &(&r_total * (1.0 + overshoot));
    bounds.clamp_inplace(&mut out);
    Ok((out, false))
}

/// Symmetric finite difference, exact for quadratics.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, delta: f64) -> f64 {
    (f(x + delta) - f(x - delta)) / (2.0 * delta)
}

/// Gradient-free coordinate ascent: per iteration, estimate the gradient
/// on a sampled coordinate subset by symmetric differences of the
/// cross-entropy of the model's output probabilities, then take a signed
/// step projected to the box and the epsilon ball.
pub fn zoo(
    model: &MlpModel,
    x: ArrayView1<f64>,
    y: usize,
    eps: f64,
    iters: usize,
    delta: f64,
    step: f64,
    coords_per_iter: usize,
    bounds: &DomainBounds,
    seed: u64,
) -> Result<Array1<f64>> {
    if delta <= 0.0 {
        return Err(Error::InvalidArgument("zoo probe delta must be > 0".into()));
    }
    let origin = x.to_owned();
    if eps == 0.0 {
        return Ok(origin);
    }
    let d = origin.len();
    let n_coords = coords_per_iter.min(d).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = origin.clone();
    let mut pool: Vec<usize> = (0..d).collect();

    for _ in 0..iters {
        // partial Fisher-Yates: first n_coords entries are the sample
        for i in 0..n_coords {
            let j = rng.gen_range(i..d);
            pool.swap(i, j);
        }
        let mut updates = Vec::with_capacity(n_coords);
        for &coord in &pool[..n_coords] {
            let mut probe = cur.clone();
            probe[coord] = cur[coord] + delta;
            let plus = ce_at(model, &probe, y)?;
            probe[coord] = cur[coord] - delta;
            let minus = ce_at(model, &probe, y)?;
            let est = (plus - minus) / (2.0 * delta);
            updates.push((coord, sign(est)));
        }
        for (coord, s) in updates {
            cur[coord] += step * s;
        }
        bounds.clamp_inplace(&mut cur);
        clamp_to_ball(&mut cur, origin.view(), eps);
    }
    Ok(cur)
}

/// Per-attack iteration settings; the epsilon itself comes from the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackParams {
    pub bim_steps: usize,
    pub pgd_steps: usize,
    /// Step size as a fraction of epsilon for BIM/PGD/ZOO.
    pub step_fraction: f64,
    pub auto_pgd_steps: usize,
    pub deepfool_max_iter: usize,
    pub zoo_iters: usize,
    pub zoo_delta: f64,
    pub zoo_coords_per_iter: usize,
}

impl Default for AttackParams {
    fn default() -> Self {
        AttackParams {
            bim_steps: 10,
            pgd_steps: 10,
            step_fraction: 0.25,
            auto_pgd_steps: 20,
            deepfool_max_iter: 50,
            zoo_iters: 40,
            zoo_delta: 1e-3,
            zoo_coords_per_iter: 16,
        }
    }
}

impl AttackParams {
    pub fn validate(&self) -> Result<()> {
        if self.bim_steps < 1 || self.pgd_steps < 1 || self.zoo_iters < 1 {
            return Err(Error::InvalidArgument("attack steps must be >= 1".into()));
        }
        if self.auto_pgd_steps < 2 {
            return Err(Error::InvalidArgument("auto_pgd_steps must be >= 2".into()));
        }
        if !(self.step_fraction > 0.0) {
            return Err(Error::InvalidArgument("step_fraction must be > 0".into()));
        }
        if !(self.zoo_delta > 0.0) {
            return Err(Error::InvalidArgument("zoo_delta must be > 0".into()));
        }
        if self.deepfool_max_iter < 1 {
            return Err(Error::InvalidArgument("deepfool_max_iter must be >= 1".into()));
        }
        if self.zoo_coords_per_iter < 1 {
            return Err(Error::InvalidArgument("zoo_coords_per_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// Full attack description for one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::InvalidArgument("epsilon must be >= 0".into()));
        }
        if self.steps < 1 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// One grid cell: the perturbed copy of the test split for a single
/// (attack, epsilon) pair. Labels are copied from the source unchanged.
#[derive(Debug, Clone)]
pub struct AdvCell {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    /// Per-sample attack-failure markers (currently only DeepFool's
    /// flat-model case).
    pub flags: Vec<bool>,
    pub seed: u64,
}

impl AdvCell {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn id(&self) -> String {
        format!("{}_eps{}", self.kind.name(), self.epsilon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridProvenance {
    pub source_fingerprint: String,
    pub model_fingerprint: String,
    pub master_seed: u64,
}

/// The full attack-by-epsilon grid with enough source metadata to rebuild
/// per-cell datasets.
#[derive(Debug, Clone)]
pub struct AdversarialGrid {
    pub cells: Vec<AdvCell>,
    pub n_classes: usize,
    pub feature_names: Vec<String>,
    pub provenance: GridProvenance,
}

impl AdversarialGrid {
    pub fn cell(&self, kind: AttackKind, epsilon: f64) -> Option<&AdvCell> {
        self.cells
            .iter()
            .find(|c| c.kind == kind && c.epsilon.to_bits() == epsilon.to_bits())
    }

    pub fn cell_dataset(&self, cell: &AdvCell) -> Result<Dataset> {
        Dataset::new(
            cell.features.clone(),
            cell.labels.clone(),
            self.n_classes,
            self.feature_names.clone(),
        )
    }
}

fn attack_sample(
    kind: AttackKind,
    model: &MlpModel,
    x: ArrayView1<f64>,
    y: usize,
    eps: f64,
    bounds: &DomainBounds,
    params: &AttackParams,
    seed: u64,
) -> Result<(Array1<f64>, bool)> {
    let alpha = eps * params.step_fraction;
    match kind {
        AttackKind::Fgsm => Ok((fgsm(model, x, y, eps, bounds)?, false)),
        AttackKind::Bim => {
            if eps == 0.0 {
                return Ok((x.to_owned(), false));
            }
            Ok((bim(model, x, y, eps, params.bim_steps, alpha, bounds)?, false))
        }
        AttackKind::Pgd => {
            if eps == 0.0 {
                return Ok((x.to_owned(), false));
            }
            Ok((
                pgd(model, x, y, eps, params.pgd_steps, alpha, bounds, seed)?,
                false,
            ))
        }
        AttackKind::AutoPgd => Ok((
            auto_pgd(model, x, y, eps, params.auto_pgd_steps, bounds, seed)?,
            false,
        )),
        AttackKind::DeepFool => deepfool(model, x, y, params.deepfool_max_iter, eps, bounds),
        AttackKind::Zoo => Ok((
            zoo(
                model,
                x,
                y,
                eps,
                params.zoo_iters,
                params.zoo_delta,
                alpha,
                params.zoo_coords_per_iter,
                bounds,
                seed,
            )?,
            false,
        )),
    }
}

/// Generates one cell per (kind, epsilon). Cell seeds derive from the
/// master seed, the kind name, and the epsilon bits, so cells and samples
/// can be computed in any order. Per-sample failures become flags.
pub fn generate_grid(
    model: &MlpModel,
    test: &Dataset,
    kinds: &[AttackKind],
    epsilons: &[f64],
    bounds: &DomainBounds,
    seed: u64,
    params: &AttackParams,
) -> Result<AdversarialGrid> {
    if kinds.is_empty() || epsilons.is_empty() {
        return Err(Error::InvalidArgument(
            "grid needs at least one attack kind and one epsilon".into(),
        ));
    }
    params.validate()?;
    if bounds.d() != test.d() {
        return Err(Error::DimMismatch("bounds dimension != dataset dimension".into()));
    }

    let mut sorted_kinds = kinds.to_vec();
    sorted_kinds.sort();
    sorted_kinds.dedup();
    let mut sorted_eps = epsilons.to_vec();
    sorted_eps.sort_by(|a, b| a.total_cmp(b));
    sorted_eps.dedup_by(|a, b| a.to_bits() == b.to_bits());

    let mut cells = Vec::with_capacity(sorted_kinds.len() * sorted_eps.len());
    for &kind in &sorted_kinds {
        for &eps in &sorted_eps {
            if eps < 0.0 {
                return Err(Error::InvalidArgument("epsilon must be >= 0".into()));
            }
            let cell_seed =
                derive_seed(seed, &[b"cell", kind.name().as_bytes(), &eps.to_bits().to_le_bytes()]);
            let rows: Vec<Result<(Array1<f64>, bool)>> = (0..test.n())
                .into_par_iter()
                .map(|i| {
                    let sample_seed = derive_seed(cell_seed, &[b"sample", &(i as u64).to_le_bytes()]);
                    attack_sample(
                        kind,
                        model,
                        test.features().row(i),
                        test.labels()[i],
                        eps,
                        bounds,
                        params,
                        sample_seed,
                    )
                })
                .collect();

            let mut features = Array2::zeros((test.n(), test.d()));
            let mut flags = vec![false; test.n()];
            for (i, row) in rows.into_iter().enumerate() {
                let (x_adv, flag) = row?;
                features.row_mut(i).assign(&x_adv);
                flags[i] = flag;
            }
            cells.push(AdvCell {
                kind,
                epsilon: eps,
                features,
                labels: test.labels().to_vec(),
                flags,
                seed: cell_seed,
            });
        }
    }

    Ok(AdversarialGrid {
        cells,
        n_classes: test.n_classes(),
        feature_names: test.feature_names().to_vec(),
        provenance: GridProvenance {
            source_fingerprint: dataset_fingerprint(test),
            model_fingerprint: model.fingerprint(),
            master_seed: seed,
        },
    })
}

pub fn dataset_fingerprint(data: &Dataset) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(data.to_bytes());
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

// ---------------------------------------------------------------------------
// Grid serialization: one CSV per cell plus a JSON manifest.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CellManifest {
    kind: AttackKind,
    epsilon: f64,
    seed: u64,
    file: String,
    n: usize,
    flagged: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GridManifest {
    provenance: GridProvenance,
    n_classes: usize,
    feature_names: Vec<String>,
    cells: Vec<CellManifest>,
}

/// Writes `<kind>_eps<eps>.csv` per cell plus `manifest.json`. Floats are
/// written in shortest round-trip form, so loading is bit-exact.
pub fn save_grid(grid: &AdversarialGrid, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = GridManifest {
        provenance: grid.provenance.clone(),
        n_classes: grid.n_classes,
        feature_names: grid.feature_names.clone(),
        cells: Vec::new(),
    };
    for cell in &grid.cells {
        let file = format!("{}.csv", cell.id());
        let path = dir.join(&file);
        let mut out = String::new();
        out.push_str(&grid.feature_names.join(","));
        out.push_str(",label\n");
        for (row, &label) in cell.features.rows().into_iter().zip(&cell.labels) {
            let mut first = true;
            for v in row.iter() {
                if !first {
                    out.push(',');
                }
                out.push_str(&format!("{v}"));
                first = false;
            }
            out.push_str(&format!(",{label}\n"));
        }
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        manifest.cells.push(CellManifest {
            kind: cell.kind,
            epsilon: cell.epsilon,
            seed: cell.seed,
            file,
            n: cell.n(),
            flagged: cell
                .flags
                .iter()
                .enumerate()
                .filter(|(_, &f)| f)
                .map(|(i, _)| i)
                .collect(),
        });
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::corrupt(&manifest_path, e.to_string()))?;
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_grid(dir: impl AsRef<Path>) -> Result<AdversarialGrid> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let json = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: GridManifest =
        serde_json::from_str(&json).map_err(|e| Error::corrupt(&manifest_path, e.to_string()))?;
    let d = manifest.feature_names.len();
    let mut cells = Vec::with_capacity(manifest.cells.len());
    for cm in &manifest.cells {
        let path = dir.join(&cm.file);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::corrupt(&path, "empty cell file"))?;
        let expected_header = format!("{},label", manifest.feature_names.join(","));
        if header != expected_header {
            return Err(Error::corrupt(&path, "cell header does not match manifest"));
        }
        let mut values = Vec::with_capacity(cm.n * d);
        let mut labels = Vec::with_capacity(cm.n);
        for (row_i, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != d + 1 {
                return Err(Error::corrupt(
                    &path,
                    format!("row {row_i} has {} fields, expected {}", parts.len(), d + 1),
                ));
            }
            for p in &parts[..d] {
                let v: f64 = p
                    .parse()
                    .map_err(|_| Error::corrupt(&path, format!("bad float at row {row_i}")))?;
                values.push(v);
            }
            labels.push(
                parts[d]
                    .parse()
                    .map_err(|_| Error::corrupt(&path, format!("bad label at row {row_i}")))?,
            );
        }
        if labels.len() != cm.n {
            return Err(Error::corrupt(
                &path,
                format!("expected {} rows, found {}", cm.n, labels.len()),
            ));
        }
        let features = Array2::from_shape_vec((cm.n, d), values)
            .map_err(|_| Error::corrupt(&path, "shape mismatch"))?;
        let mut flags = vec![false; cm.n];
        for &i in &cm.flagged {
            if i < cm.n {
                flags[i] = true;
            }
        }
        cells.push(AdvCell {
            kind: cm.kind,
            epsilon: cm.epsilon,
            features,
            labels,
            flags,
            seed: cm.seed,
        });
    }
    Ok(AdversarialGrid {
        cells,
        n_classes: manifest.n_classes,
        feature_names: manifest.feature_names,
        provenance: manifest.provenance,
    })
}
