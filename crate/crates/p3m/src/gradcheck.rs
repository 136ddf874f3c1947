//! Randomized end-to-end gradient verification. Each instance draws a small
//! dataset, a fresh parameter vector, dropout masks, a mixup coefficient,
//! and anchors, builds the full training-step loss for one variant, and
//! compares the reverse-mode gradient against central finite differences.
//!
//! Instances whose clamp bracket sits within `KINK_MARGIN` of zero are
//! redrawn: the objective is not differentiable at the clamp boundary, so a
//! finite-difference probe straddling it measures nothing.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{finite_difference, max_rel_err, Gradient, NodeId, Tape};
use crate::datagen::{generate, stream_rng, GenSpec, PuDataset};
use crate::encoder::{init_params, sample_mask, DropoutMask, ModelParams, NetGraph, ParamLayout};
use crate::error::{Error, Result};
use crate::losses::{p3m_total, sample_mu, sample_ori_anchors, Batch, LossBreakdown};
use crate::priors::{build_prior_config, PriorConfig, PriorGlobals, Variant};

/// Every gradient component must agree to this relative error.
pub const GRAD_TOLERANCE: f64 = 1e-6;
/// Central-difference step.
pub const FD_EPSILON: f64 = 1e-6;
/// Minimum distance of any class's clamp bracket from zero.
const KINK_MARGIN: f64 = 1e-4;

/// Verification result for one variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantCheck {
    pub variant: Variant,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Verification results across all public variants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub instances_per_variant: usize,
    pub checks: Vec<VariantCheck>,
    pub passed: bool,
}

struct Instance {
    dataset: PuDataset,
    layout: ParamLayout,
    init: Vec<f64>,
    priors: PriorConfig,
    masks: Vec<DropoutMask>,
    aug_masks: Vec<Option<DropoutMask>>,
    mu: f64,
    anchors: Option<Vec<Vec<Option<usize>>>>,
}

/// Rebuilds the training-step loss graph at `values` with the instance's
/// frozen randomness. Returns the tape, the loss root, and the breakdown.
fn build_loss(inst: &Instance, values: &[f64]) -> Result<(Tape, NodeId, LossBreakdown)> {
    let params = ModelParams {
        layout: inst.layout.clone(),
        values: values.to_vec(),
    };
    let k = inst.dataset.k();
    let mut tape = Tape::new(values.len());
    let graph = NetGraph::bind(&mut tape, &params);
    let proxies: Vec<NodeId> = (0..=k).map(|i| graph.proxy(i)).collect();
    let emb: Vec<NodeId> = (0..inst.dataset.n())
        .map(|j| graph.encode(&mut tape, inst.dataset.features_row(j), Some(&inst.masks[j])))
        .collect();
    let emb_aug: Vec<Option<NodeId>> = (0..inst.dataset.n())
        .map(|j| {
            inst.aug_masks[j].as_ref().map(|mask| {
                graph.encode(&mut tape, inst.dataset.features_row(j), Some(mask))
            })
        })
        .collect();
    if let Some(op) = tape.poisoned() {
        return Err(Error::Numeric {
            op: Some(op),
            context: "gradient-check forward pass produced a non-finite value".into(),
        });
    }
    let mut pos: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut unl: Vec<Vec<usize>> = vec![Vec::new(); k];
    for j in 0..inst.dataset.n() {
        let s = inst.dataset.observed_row(j);
        for i in 0..k {
            if s[i] == 1 {
                pos[i].push(j);
            } else {
                unl[i].push(j);
            }
        }
    }
    let batch = Batch {
        emb,
        emb_aug,
        proxies,
        pos,
        unl,
        truth_pos: None,
        truth_neg: None,
        ori_anchors: inst.anchors.clone(),
    };
    let (root, breakdown) = p3m_total(&mut tape, &batch, &inst.priors, inst.mu)?;
    Ok((tape, root, breakdown))
}

/// Draws one instance, or `None` when the draw must be retried (prior table
/// invalid, degenerate batch, or a clamp bracket too close to its kink).
fn make_instance(variant: Variant, rng: &mut impl Rng) -> Result<Option<Instance>> {
    let n = rng.gen_range(4..=8usize);
    let k = rng.gen_range(1..=4usize);
    let d_in = rng.gen_range(k.max(3)..=6usize);
    let hidden_dims: Vec<usize> = if rng.gen::<bool>() {
        vec![rng.gen_range(3..=5usize)]
    } else {
        Vec::new()
    };
    let d_emb = rng.gen_range(3..=5usize);

    let spec = GenSpec {
        n,
        d_in,
        k,
        pi_true: (0..k).map(|_| rng.gen_range(0.2..0.5)).collect(),
        erasure: (0..k).map(|_| rng.gen_range(0.2..0.7)).collect(),
        separation: rng.gen_range(0.8..2.0),
        noise: rng.gen_range(0.2..0.5),
        seed: rng.gen(),
    };
    let dataset = generate(&spec)?;

    let globals = PriorGlobals {
        lambda: rng.gen_range(2.0..10.0),
        alpha: 1.0,
        nu: if variant.uses_mixup() {
            rng.gen_range(0.02..0.5)
        } else {
            0.0
        },
        dropout_rate: rng.gen_range(0.1..0.5),
        variant,
    };
    let multiplier = rng.gen_range(1.0..2.5);
    let priors = match build_prior_config(&dataset, multiplier, &globals) {
        Ok(p) => p,
        Err(_) => return Ok(None),
    };
    if !priors.classes.iter().any(|c| c.active) {
        return Ok(None);
    }

    let mut dims = vec![d_in];
    dims.extend_from_slice(&hidden_dims);
    dims.push(d_emb);
    let init = init_params(rng.gen(), &dims, k)?;

    let masks: Vec<DropoutMask> = (0..n)
        .map(|_| sample_mask(rng, globals.dropout_rate, &hidden_dims))
        .collect::<Result<_>>()?;
    let aug_masks: Vec<Option<DropoutMask>> = (0..n)
        .map(|j| {
            let wants = if variant.augments_all() {
                true
            } else if variant.augments_positives() {
                dataset.observed_row(j).iter().any(|&s| s == 1)
            } else {
                false
            };
            if wants {
                Ok(Some(sample_mask(rng, globals.dropout_rate, &hidden_dims)?))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let mu = sample_mu(rng, globals.alpha)?;
    let anchors = if variant == Variant::P3mOri && globals.nu > 0.0 {
        let mut pos: Vec<Vec<usize>> = vec![Vec::new(); k];
        let mut unl: Vec<Vec<usize>> = vec![Vec::new(); k];
        for j in 0..n {
            let s = dataset.observed_row(j);
            for i in 0..k {
                if s[i] == 1 {
                    pos[i].push(j);
                } else {
                    unl[i].push(j);
                }
            }
        }
        Some(sample_ori_anchors(rng, &pos, &unl))
    } else {
        None
    };

    let inst = Instance {
        layout: ParamLayout::new(dims, k)?,
        init: init.values,
        dataset,
        priors,
        masks,
        aug_masks,
        mu,
        anchors,
    };
    let breakdown = match build_loss(&inst, &inst.init) {
        Ok((_, _, b)) => b,
        Err(_) => return Ok(None),
    };
    let near_kink = breakdown
        .per_class
        .iter()
        .filter(|c| c.active)
        .any(|c| (c.unlabeled_term - c.correction_term).abs() < KINK_MARGIN);
    if near_kink {
        return Ok(None);
    }
    Ok(Some(inst))
}

fn check_variant(
    variant: Variant,
    seed: u64,
    instances: usize,
    perturbation: f64,
) -> Result<VariantCheck> {
    let variant_index = Variant::PUBLIC
        .iter()
        .position(|&v| v == variant)
        .unwrap_or(Variant::PUBLIC.len()) as u64;
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut inst = None;
        for attempt in 0..64u64 {
            let stream = variant_index * 1_000_000 + t as u64 * 1_000 + attempt;
            let mut rng = stream_rng(seed, stream);
            if let Some(found) = make_instance(variant, &mut rng)? {
                inst = Some(found);
                break;
            }
        }
        let inst = inst.ok_or_else(|| {
            Error::Domain(format!(
                "could not draw a usable gradient-check instance for {}",
                variant.name()
            ))
        })?;

        let (tape, root, _) = build_loss(&inst, &inst.init)?;
        let analytic = tape.backward(root)?;
        let fd = finite_difference(
            |values| Ok(build_loss(&inst, values)?.2.l_total),
            &inst.init,
            FD_EPSILON,
        )?;
        let compared = if perturbation == 0.0 {
            analytic
        } else {
            Gradient::from_values(
                analytic.values().iter().map(|g| g + perturbation).collect(),
            )
        };
        worst = worst.max(max_rel_err(&compared, &fd));
    }
    Ok(VariantCheck {
        variant,
        instances,
        max_rel_err: worst,
        passed: worst < GRAD_TOLERANCE,
    })
}

/// Checks every public variant on `instances` random instances each.
pub fn run(seed: u64, instances: usize) -> Result<GradCheckReport> {
    run_with_perturbation(seed, instances, 0.0)
}

/// Like [`run`], but adds `perturbation` to every analytic gradient
/// component first. A nonzero perturbation must make the check fail; it
/// exists to prove the comparison has teeth.
pub fn run_with_perturbation(
    seed: u64,
    instances: usize,
    perturbation: f64,
) -> Result<GradCheckReport> {
    if instances == 0 {
        return Err(Error::Usage("gradient check needs at least one instance".into()));
    }
    let checks: Vec<VariantCheck> = Variant::PUBLIC
        .iter()
        .map(|&v| check_variant(v, seed, instances, perturbation))
        .collect::<Result<_>>()?;
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        tolerance: GRAD_TOLERANCE,
        instances_per_variant: instances,
        checks,
        passed,
    })
}
