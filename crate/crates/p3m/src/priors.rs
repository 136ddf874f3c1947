//! Class-prior bookkeeping: estimating labeled priors from observed labels,
//! the prior-shift formula for the unlabeled pool, and the per-class
//! weights used by the risk estimators.

use serde::{Deserialize, Serialize};

use crate::datagen::PuDataset;
use crate::error::{Error, Result};

/// Which objective the trainer optimizes. The first five are the public
/// experiment variants; `NaivePn` trains the supervised risk on observed
/// labels as if they were complete and exists as the comparison baseline
/// (library-only, not selectable on the command line).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Pm,
    P2mAll,
    P2m,
    P3mOri,
    P3m,
    NaivePn,
}

impl Variant {
    /// The five CLI-selectable variants, in ablation order.
    pub const PUBLIC: [Variant; 5] = [
        Variant::Pm,
        Variant::P2mAll,
        Variant::P2m,
        Variant::P3mOri,
        Variant::P3m,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pm => "pm",
            Variant::P2mAll => "p2m-all",
            Variant::P2m => "p2m",
            Variant::P3mOri => "p3m-ori",
            Variant::P3m => "p3m",
            Variant::NaivePn => "naive-pn",
        }
    }

    /// Whether positives get a second dropout pass.
    pub fn augments_positives(self) -> bool {
        matches!(
            self,
            Variant::P2m | Variant::P2mAll | Variant::P3mOri | Variant::P3m
        )
    }

    /// Whether every sample gets a second dropout pass.
    pub fn augments_all(self) -> bool {
        self == Variant::P2mAll
    }

    /// Whether the mixup term participates (subject to nu > 0).
    pub fn uses_mixup(self) -> bool {
        matches!(self, Variant::P3mOri | Variant::P3m)
    }
}

/// Loss-family hyperparameters that are not per-class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorGlobals {
    /// Similarity scale inside the softmax loss.
    pub lambda: f64,
    /// Beta(alpha, alpha) parameter for mixup draws.
    pub alpha: f64,
    /// Weight of the mixup loss in the total objective.
    pub nu: f64,
    pub dropout_rate: f64,
    pub variant: Variant,
}

impl Default for PriorGlobals {
    fn default() -> Self {
        PriorGlobals {
            lambda: 10.0,
            alpha: 1.0,
            nu: 0.05,
            dropout_rate: 0.2,
            variant: Variant::P3m,
        }
    }
}

impl PriorGlobals {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.nu.is_finite() && self.nu >= 0.0) {
            return Err(Error::Config(format!("nu must be >= 0, got {}", self.nu)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Per-class prior state. Classes with no observed positives are inactive:
/// they contribute nothing to training losses but are still scored at
/// inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    /// 1-based class index.
    pub class: usize,
    pub active: bool,
    /// Assumed true prior pi_i = multiplier * pi_labeled_i.
    pub pi: f64,
    /// Observed-positive fraction p(s_i = +1).
    pub pi_labeled: f64,
    /// Positive prior inside the unlabeled pool.
    pub pi_u: f64,
    /// Class weight on the positive risk term.
    pub gamma: f64,
}

/// Everything the loss family needs to know about priors and globals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub classes: Vec<ClassPrior>,
    pub lambda: f64,
    pub alpha: f64,
    pub nu: f64,
    pub dropout_rate: f64,
    pub prior_multiplier: f64,
    pub variant: Variant,
}

impl PriorConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Per-class prior by 1-based class index.
    pub fn class(&self, i: usize) -> &ClassPrior {
        &self.classes[i - 1]
    }
}

/// Fraction of samples whose observed label for class `i` (1-based) is +1.
pub fn estimate_labeled_prior(dataset: &PuDataset, i: usize) -> Result<f64> {
    if dataset.n() == 0 {
        return Err(Error::Usage("cannot estimate priors on an empty dataset".into()));
    }
    if i == 0 || i > dataset.k() {
        return Err(Error::Usage(format!(
            "class index {i} out of range 1..={}",
            dataset.k()
        )));
    }
    let k = dataset.k();
    let pos = (0..dataset.n())
        .filter(|&j| dataset.observed[j * k + (i - 1)] == 1)
        .count();
    Ok(pos as f64 / dataset.n() as f64)
}

/// pi_u = (pi - pi_labeled) / (1 - pi_labeled): the positive prior left in
/// the unlabeled pool once the labeled positives are removed.
pub fn shift_prior(pi: f64, pi_labeled: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&pi) || !pi_labeled.is_finite() || pi_labeled < 0.0 {
        return Err(Error::Domain(format!(
            "shift_prior needs 0 <= pi_labeled <= pi < 1, got pi={pi}, pi_labeled={pi_labeled}"
        )));
    }
    if pi_labeled >= 1.0 {
        return Err(Error::Domain("pi_labeled = 1 leaves no unlabeled pool".into()));
    }
    if pi_labeled > pi {
        return Err(Error::Domain(format!(
            "labeled prior {pi_labeled} exceeds class prior {pi}"
        )));
    }
    Ok((pi - pi_labeled) / (1.0 - pi_labeled))
}

/// gamma = ((1 - pi) / pi)^0.5, the weight on the positive risk term.
pub fn class_weight(pi: f64) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Domain(format!(
            "class_weight needs pi in (0,1), got {pi}"
        )));
    }
    Ok(((1.0 - pi) / pi).sqrt())
}

/// Derives the full per-class prior table from observed label counts:
/// pi_labeled from the dataset, pi = multiplier * pi_labeled, then the
/// shifted unlabeled prior and the class weight.
pub fn build_prior_config(
    dataset: &PuDataset,
    multiplier: f64,
    globals: &PriorGlobals,
) -> Result<PriorConfig> {
    globals.validate()?;
    if !(multiplier.is_finite() && multiplier >= 1.0) {
        return Err(Error::Usage(format!(
            "prior multiplier must be >= 1, got {multiplier}"
        )));
    }
    let mut classes = Vec::with_capacity(dataset.k());
    for i in 1..=dataset.k() {
        let pi_labeled = estimate_labeled_prior(dataset, i)?;
        if pi_labeled == 0.0 {
            classes.push(ClassPrior {
                class: i,
                active: false,
                pi: 0.0,
                pi_labeled: 0.0,
                pi_u: 0.0,
                gamma: 0.0,
            });
            continue;
        }
        let pi = multiplier * pi_labeled;
        if pi >= 1.0 {
            return Err(Error::Config(format!(
                "class {i}: multiplier {multiplier} x pi_labeled {pi_labeled} gives pi {pi} >= 1"
            )));
        }
        classes.push(ClassPrior {
            class: i,
            active: true,
            pi,
            pi_labeled,
            pi_u: shift_prior(pi, pi_labeled)?,
            gamma: class_weight(pi)?,
        });
    }
    Ok(PriorConfig {
        classes,
        lambda: globals.lambda,
        alpha: globals.alpha,
        nu: globals.nu,
        dropout_rate: globals.dropout_rate,
        prior_multiplier: multiplier,
        variant: globals.variant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{DatasetMeta, FORMAT_VERSION};
    use proptest::prelude::*;

    fn dataset_with_observed(observed: Vec<i8>, n: usize, k: usize) -> PuDataset {
        PuDataset {
            meta: DatasetMeta {
                format_version: FORMAT_VERSION,
                n,
                d_in: 2,
                k,
                pi_true: vec![0.5; k],
                erasure: vec![0.0; k],
                seed: 0,
            },
            features: vec![0.0; n * 2],
            observed,
            truth: None,
        }
    }

    #[test]
    fn labeled_prior_counts_observed_positives() {
        let mut obs = vec![-1i8; 10];
        obs[0] = 1;
        obs[3] = 1;
        obs[7] = 1;
        let ds = dataset_with_observed(obs, 10, 1);
        assert_eq!(estimate_labeled_prior(&ds, 1).unwrap(), 0.3);
    }

    #[test]
    fn labeled_prior_zero_and_one() {
        let ds = dataset_with_observed(vec![-1; 5], 5, 1);
        assert_eq!(estimate_labeled_prior(&ds, 1).unwrap(), 0.0);
        let ds = dataset_with_observed(vec![1; 5], 5, 1);
        assert_eq!(estimate_labeled_prior(&ds, 1).unwrap(), 1.0);
        // All-positive class breaks the pi < 1 chain downstream.
        assert!(matches!(
            build_prior_config(&ds, 1.0, &PriorGlobals::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shift_prior_examples() {
        assert_eq!(shift_prior(0.3, 0.0).unwrap(), 0.3);
        assert!((shift_prior(0.3, 0.1).unwrap() - 0.2 / 0.9).abs() < 1e-15);
        assert_eq!(shift_prior(0.2, 0.2).unwrap(), 0.0);
        assert!(matches!(shift_prior(0.2, 0.3), Err(Error::Domain(_))));
        assert!(matches!(shift_prior(0.5, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weight(0.5).unwrap(), 1.0);
        assert!((class_weight(0.2).unwrap() - 2.0).abs() < 1e-12);
        assert!((class_weight(0.1).unwrap() - 3.0).abs() < 1e-12);
        assert!(matches!(class_weight(0.0), Err(Error::Domain(_))));
        assert!(matches!(class_weight(1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn build_chains_the_formulas() {
        let mut obs = vec![-1i8; 20];
        for j in 0..2 {
            obs[j * 1] = 1;
        }
        // 2 of 20 observed positive: pi_labeled = 0.1.
        let ds = dataset_with_observed(obs, 20, 1);
        let cfg = build_prior_config(&ds, 3.0, &PriorGlobals::default()).unwrap();
        let c = cfg.class(1);
        assert!(c.active);
        assert!((c.pi - 0.3).abs() < 1e-15);
        assert!((c.pi_u - 0.2 / 0.9).abs() < 1e-15);
        assert!((c.gamma - (0.7f64 / 0.3).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn multiplier_one_gives_zero_unlabeled_prior() {
        let mut obs = vec![-1i8; 40];
        for j in 0..8 {
            obs[j * 2] = 1;
            if j < 4 {
                obs[j * 2 + 1] = 1;
            }
        }
        let ds = dataset_with_observed(obs, 20, 2);
        let cfg = build_prior_config(&ds, 1.0, &PriorGlobals::default()).unwrap();
        for c in &cfg.classes {
            assert_eq!(c.pi_u, 0.0);
        }
    }

    #[test]
    fn empty_class_is_inactive() {
        let mut obs = vec![-1i8; 20];
        obs[0] = 1;
        let ds = dataset_with_observed(obs, 10, 2);
        let cfg = build_prior_config(&ds, 3.0, &PriorGlobals::default()).unwrap();
        assert!(cfg.class(1).active);
        assert!(!cfg.class(2).active);
        assert_eq!(cfg.class(2).gamma, 0.0);
    }

    #[test]
    fn config_error_names_the_class() {
        let mut obs = vec![-1i8; 20];
        for j in 0..10 {
            obs[j * 2 + 1] = 1;
        }
        obs[0] = 1;
        let ds = dataset_with_observed(obs, 10, 2);
        // Class 2 is fully labeled: multiplier 2 pushes pi to 2.0.
        match build_prior_config(&ds, 2.0, &PriorGlobals::default()) {
            Err(Error::Config(msg)) => assert!(msg.contains("class 2"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn build_is_deterministic() {
        let mut obs = vec![-1i8; 30];
        for j in [0usize, 4, 8, 13, 21, 27] {
            obs[j] = 1;
        }
        let ds = dataset_with_observed(obs, 10, 3);
        let a = build_prior_config(&ds, 2.5, &PriorGlobals::default()).unwrap();
        let b = build_prior_config(&ds, 2.5, &PriorGlobals::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multiplier_below_one_is_usage_error() {
        let ds = dataset_with_observed(vec![1, -1, -1, -1], 4, 1);
        assert!(matches!(
            build_prior_config(&ds, 0.5, &PriorGlobals::default()),
            Err(Error::Usage(_))
        ));
    }

    proptest! {
        #[test]
        fn shift_prior_identity_at_zero_label(pi in 0.0..0.999f64) {
            prop_assert!((shift_prior(pi, 0.0).unwrap() - pi).abs() < 1e-15);
        }

        #[test]
        fn shift_prior_monotone_in_pi(
            labeled in 0.0..0.5f64,
            lo in 0.0..0.99f64,
            bump in 1e-6..0.5f64,
        ) {
            let lo_pi = labeled.max(lo * (1.0 - labeled) + labeled);
            let hi_pi = (lo_pi + bump).min(0.9999);
            prop_assume!(hi_pi > lo_pi && hi_pi < 1.0);
            let a = shift_prior(lo_pi, labeled).unwrap();
            let b = shift_prior(hi_pi, labeled).unwrap();
            prop_assert!(b >= a);
        }
    }
}
