//! The loss family: a pairwise softmax loss over class proxies, the oracle
//! supervised risk, the clamped positive-unlabeled risk with prior shift,
//! dropout-pair averaging of positives, and the positive-mixup term. Every
//! experiment variant composes these pieces through [`p3m_total`].
//!
//! All risk builders construct nodes on a caller-supplied [`Tape`] and return
//! the root node alongside a [`LossBreakdown`] of the per-class terms read
//! off the eager forward values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, NodeId, Tape};
use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::priors::{PriorConfig, Variant};

/// Unit-norm tolerance for embeddings and proxies entering a loss.
const NORM_TOL: f64 = 1e-9;
/// Below this pre-normalization norm a mixed embedding is degenerate.
const MIX_NORM_FLOOR: f64 = 1e-9;

/// One training batch, already embedded on a tape.
///
/// Index sets refer to positions in `emb`. For every class the observed
/// positives and the unlabeled remainder partition the batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Per-sample embedding node, unit norm.
    pub emb: Vec<NodeId>,
    /// Per-sample second-pass embedding (a different dropout mask). At
    /// dropout rate zero this may be the same node as `emb[j]`, which the
    /// builders collapse back to a single loss evaluation.
    pub emb_aug: Vec<Option<NodeId>>,
    /// Proxy nodes, unit norm; index 0 is the none-of-the-above proxy,
    /// indices 1..=K the class proxies.
    pub proxies: Vec<NodeId>,
    /// Per class (0-based): indices of observed-positive samples.
    pub pos: Vec<Vec<usize>>,
    /// Per class: indices of unlabeled samples.
    pub unl: Vec<Vec<usize>>,
    /// Per class: true-positive indices, for oracle risks.
    pub truth_pos: Option<Vec<Vec<usize>>>,
    /// Per class: true-negative indices, for oracle risks.
    pub truth_neg: Option<Vec<Vec<usize>>>,
    /// Per class, per positive: mixup anchor. `Some(j)` mixes with sample
    /// `j`'s first-pass embedding, `None` falls back to the none proxy.
    pub ori_anchors: Option<Vec<Vec<Option<usize>>>>,
}

/// Which samples need a second-pass embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AugMode {
    None,
    Positives,
    All,
}

impl Batch {
    pub fn n(&self) -> usize {
        self.emb.len()
    }

    /// Number of classes (excluding the none proxy).
    pub fn k(&self) -> usize {
        self.pos.len()
    }

    fn check_unit(&self, tape: &Tape, node: NodeId, what: &str) -> Result<()> {
        let v = tape.value(node);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Usage(format!(
                "{what} has norm {norm}, expected unit length"
            )));
        }
        Ok(())
    }

    fn validate(&self, tape: &Tape, mode: AugMode) -> Result<()> {
        let n = self.n();
        let k = self.k();
        if self.unl.len() != k || self.emb_aug.len() != n {
            return Err(Error::Usage("batch index tables disagree in length".into()));
        }
        if self.proxies.len() != k + 1 {
            return Err(Error::Usage(format!(
                "expected {} proxies (none proxy plus {k} classes), got {}",
                k + 1,
                self.proxies.len()
            )));
        }
        let mut seen = vec![false; n];
        for i in 0..k {
            seen.iter_mut().for_each(|s| *s = false);
            for &j in self.pos[i].iter().chain(self.unl[i].iter()) {
                if j >= n || seen[j] {
                    return Err(Error::Usage(format!(
                        "class {}: sample sets do not partition the batch",
                        i + 1
                    )));
                }
                seen[j] = true;
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::Usage(format!(
                    "class {}: sample sets do not cover the batch",
                    i + 1
                )));
            }
        }
        for (j, &e) in self.emb.iter().enumerate() {
            self.check_unit(tape, e, &format!("embedding {j}"))?;
            if let Some(a) = self.emb_aug[j] {
                if a != e {
                    self.check_unit(tape, a, &format!("augmented embedding {j}"))?;
                }
            }
        }
        for (i, &p) in self.proxies.iter().enumerate() {
            self.check_unit(tape, p, &format!("proxy {i}"))?;
        }
        match mode {
            AugMode::None => {}
            AugMode::Positives => {
                for pos in &self.pos {
                    for &j in pos {
                        if self.emb_aug[j].is_none() {
                            return Err(Error::Usage(format!(
                                "sample {j} is positive but has no augmented embedding"
                            )));
                        }
                    }
                }
            }
            AugMode::All => {
                if let Some(j) = (0..n).find(|&j| self.emb_aug[j].is_none()) {
                    return Err(Error::Usage(format!(
                        "sample {j} has no augmented embedding"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-class pieces of a risk evaluation, recorded before any clamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTerms {
    /// 1-based class index.
    pub class: usize,
    /// False when the class was skipped (inactive prior, or no samples on
    /// either side of an oracle risk).
    pub active: bool,
    pub positive_term: f64,
    pub unlabeled_term: f64,
    pub correction_term: f64,
    /// True when `unlabeled_term - correction_term` went negative and the
    /// bracket was dropped from the total (and from the gradient).
    pub clamped: bool,
    pub mixup_term: f64,
}

impl ClassTerms {
    fn skipped(class: usize) -> ClassTerms {
        ClassTerms {
            class,
            active: false,
            positive_term: 0.0,
            unlabeled_term: 0.0,
            correction_term: 0.0,
            clamped: false,
            mixup_term: 0.0,
        }
    }
}

/// Everything a training step logs about one loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_class: Vec<ClassTerms>,
    /// The risk estimate before the mixup term.
    pub l_pm_or_p2m: f64,
    pub l_pmix: f64,
    /// `l_pm_or_p2m + nu * l_pmix`.
    pub l_total: f64,
    /// Set when a mixup variant found no active class with positives.
    pub mixup_warning: bool,
}

/// Cached per-risk tape constants: the scale factor and, per class, the
/// proxy differences entering the softmax loss in each direction.
struct Ctx {
    lambda: NodeId,
    half: NodeId,
    /// Per class (0-based): (c_0 - c_i, c_i - c_0).
    diffs: Vec<(NodeId, NodeId)>,
}

impl Ctx {
    fn new(tape: &mut Tape, batch: &Batch, lambda: f64) -> Ctx {
        let lambda_node = tape.constant_scalar(lambda);
        let half = tape.constant_scalar(0.5);
        let diffs = (1..=batch.k())
            .map(|i| {
                let fwd = tape.sub(batch.proxies[0], batch.proxies[i]);
                let rev = tape.sub(batch.proxies[i], batch.proxies[0]);
                (fwd, rev)
            })
            .collect();
        Ctx { lambda: lambda_node, half, diffs }
    }

    /// Loss pulling `f` toward class `i` (0-based) and away from the none
    /// proxy: softplus(lambda * (c_0 - c_i) . f).
    fn loss_toward(&self, tape: &mut Tape, f: NodeId, i: usize) -> NodeId {
        let d = tape.dot(self.diffs[i].0, f);
        let z = tape.mul(self.lambda, d);
        tape.softplus(z)
    }

    /// Loss pushing `f` away from class `i` toward the none proxy.
    fn loss_away(&self, tape: &mut Tape, f: NodeId, i: usize) -> NodeId {
        let d = tape.dot(self.diffs[i].1, f);
        let z = tape.mul(self.lambda, d);
        tape.softplus(z)
    }

    /// Average of a loss over the one or two embeddings of a sample,
    /// collapsing to a single evaluation when both passes share a node.
    fn pair<L>(&self, tape: &mut Tape, a: NodeId, b: Option<NodeId>, mut loss: L) -> NodeId
    where
        L: FnMut(&mut Tape, NodeId) -> NodeId,
    {
        match b {
            Some(b) if b != a => {
                let la = loss(tape, a);
                let lb = loss(tape, b);
                let s = tape.add(la, lb);
                tape.mul(self.half, s)
            }
            _ => loss(tape, a),
        }
    }
}

/// Mean of already-built scalar nodes. Empty input is the caller's problem;
/// every call site checks for it first.
fn mean_fold(tape: &mut Tape, items: &[NodeId]) -> NodeId {
    let inv = tape.constant_scalar(1.0 / items.len() as f64);
    let mut acc = items[0];
    for &it in &items[1..] {
        acc = tape.add(acc, it);
    }
    tape.mul(inv, acc)
}

fn validate_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Usage(format!("lambda must be > 0, got {lambda}")));
    }
    Ok(())
}

fn check_norm(v: &[f64], what: &str) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > NORM_TOL {
        return Err(Error::Usage(format!(
            "{what} has norm {norm}, expected unit length"
        )));
    }
    Ok(())
}

/// The pairwise softmax loss softplus(lambda * (c_neg - c_pos) . f),
/// i.e. -log of the two-way softmax probability that `f` matches `c_pos`
/// rather than `c_neg`. Always positive.
pub fn softmax_norm_loss(f: &[f64], c_pos: &[f64], c_neg: &[f64], lambda: f64) -> Result<f64> {
    validate_lambda(lambda)?;
    if f.len() != c_pos.len() || f.len() != c_neg.len() {
        return Err(Error::Usage("loss inputs differ in dimension".into()));
    }
    check_norm(f, "embedding")?;
    check_norm(c_pos, "positive proxy")?;
    check_norm(c_neg, "negative proxy")?;
    let z: f64 = f
        .iter()
        .zip(c_neg.iter().zip(c_pos))
        .map(|(fv, (nv, pv))| (nv - pv) * fv)
        .sum();
    Ok(softplus(lambda * z))
}

/// Tape form of [`softmax_norm_loss`]; norm checks are the batch builders'
/// responsibility.
pub fn softmax_norm_loss_node(
    tape: &mut Tape,
    f: NodeId,
    c_pos: NodeId,
    c_neg: NodeId,
    lambda: f64,
) -> NodeId {
    let diff = tape.sub(c_neg, c_pos);
    let d = tape.dot(diff, f);
    let l = tape.constant_scalar(lambda);
    let z = tape.mul(l, d);
    tape.softplus(z)
}

/// Supervised risk over true labels: per class,
/// pi * mean over positives of the toward-loss plus (1 - pi) * mean over
/// negatives of the away-loss. Usable as the training oracle, or as the
/// naive baseline when observed labels are passed as truth. The prior's
/// `active` flag is ignored here; classes with samples on neither side are
/// skipped and recorded as inactive in the breakdown.
pub fn pnm_risk(
    tape: &mut Tape,
    batch: &Batch,
    priors: &PriorConfig,
) -> Result<(NodeId, LossBreakdown)> {
    validate_lambda(priors.lambda)?;
    if priors.num_classes() != batch.k() {
        return Err(Error::Usage("prior table and batch disagree on K".into()));
    }
    batch.validate(tape, AugMode::None)?;
    let (tpos, tneg) = match (&batch.truth_pos, &batch.truth_neg) {
        (Some(p), Some(n)) if p.len() == batch.k() && n.len() == batch.k() => (p, n),
        _ => return Err(Error::Usage("oracle risk needs true-label sets per class".into())),
    };
    let ctx = Ctx::new(tape, batch, priors.lambda);
    let mut per_class = Vec::with_capacity(batch.k());
    let mut total: Option<NodeId> = None;
    for i in 0..batch.k() {
        if tpos[i].is_empty() && tneg[i].is_empty() {
            per_class.push(ClassTerms::skipped(i + 1));
            continue;
        }
        let pi = priors.class(i + 1).pi;
        let mut terms = ClassTerms {
            class: i + 1,
            active: true,
            ..ClassTerms::skipped(i + 1)
        };
        let mut class_node: Option<NodeId> = None;
        if !tpos[i].is_empty() {
            let losses: Vec<NodeId> = tpos[i]
                .iter()
                .map(|&j| ctx.loss_toward(tape, batch.emb[j], i))
                .collect();
            let mean = mean_fold(tape, &losses);
            let c = tape.constant_scalar(pi);
            let term = tape.mul(c, mean);
            terms.positive_term = tape.scalar(term);
            class_node = Some(term);
        }
        if !tneg[i].is_empty() {
            let losses: Vec<NodeId> = tneg[i]
                .iter()
                .map(|&j| ctx.loss_away(tape, batch.emb[j], i))
                .collect();
            let mean = mean_fold(tape, &losses);
            let c = tape.constant_scalar(1.0 - pi);
            let term = tape.mul(c, mean);
            terms.unlabeled_term = tape.scalar(term);
            class_node = Some(match class_node {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        if let Some(node) = class_node {
            total = Some(match total {
                Some(acc) => tape.add(acc, node),
                None => node,
            });
        }
        per_class.push(terms);
    }
    let root = total.unwrap_or_else(|| tape.constant_scalar(0.0));
    let value = tape.scalar(root);
    Ok((
        root,
        LossBreakdown {
            per_class,
            l_pm_or_p2m: value,
            l_pmix: 0.0,
            l_total: value,
            mixup_warning: false,
        },
    ))
}

/// Shared core of the positive-unlabeled risks. Per active class:
///
/// * positive term: gamma * pi * mean over positives of the toward-loss;
/// * unlabeled term: (1 - pi)/(1 - pi_u) * mean over unlabeled of the
///   away-loss;
/// * correction term: pi_u (1 - pi)/(1 - pi_u) * mean over positives of the
///   away-loss.
///
/// The class contributes positive + max(0, unlabeled - correction); a
/// negative bracket is clamped out of both the value and the gradient.
/// Positive-side means average the two dropout passes when `mode` says so.
fn risk_core(
    tape: &mut Tape,
    batch: &Batch,
    priors: &PriorConfig,
    mode: AugMode,
) -> Result<(NodeId, LossBreakdown)> {
    validate_lambda(priors.lambda)?;
    if priors.num_classes() != batch.k() {
        return Err(Error::Usage("prior table and batch disagree on K".into()));
    }
    batch.validate(tape, mode)?;
    if batch.unl.iter().all(|u| u.is_empty()) {
        return Err(Error::DegenerateBatch);
    }
    let ctx = Ctx::new(tape, batch, priors.lambda);
    let aug = |j: usize| -> Option<NodeId> {
        match mode {
            AugMode::None => None,
            AugMode::Positives | AugMode::All => batch.emb_aug[j],
        }
    };
    let unl_aug = |j: usize| -> Option<NodeId> {
        match mode {
            AugMode::All => batch.emb_aug[j],
            _ => None,
        }
    };
    let mut per_class = Vec::with_capacity(batch.k());
    let mut total: Option<NodeId> = None;
    for i in 0..batch.k() {
        let prior = priors.class(i + 1);
        if !prior.active {
            per_class.push(ClassTerms::skipped(i + 1));
            continue;
        }
        let mut terms = ClassTerms {
            class: i + 1,
            active: true,
            ..ClassTerms::skipped(i + 1)
        };
        let mut pos_node: Option<NodeId> = None;
        let mut corr_node: Option<NodeId> = None;
        if !batch.pos[i].is_empty() {
            let toward: Vec<NodeId> = batch.pos[i]
                .iter()
                .map(|&j| {
                    ctx.pair(tape, batch.emb[j], aug(j), |t, f| ctx.loss_toward(t, f, i))
                })
                .collect();
            let mean = mean_fold(tape, &toward);
            let c = tape.constant_scalar(prior.gamma * prior.pi);
            let node = tape.mul(c, mean);
            terms.positive_term = tape.scalar(node);
            pos_node = Some(node);

            let away: Vec<NodeId> = batch.pos[i]
                .iter()
                .map(|&j| {
                    ctx.pair(tape, batch.emb[j], aug(j), |t, f| ctx.loss_away(t, f, i))
                })
                .collect();
            let mean = mean_fold(tape, &away);
            let coeff = prior.pi_u * (1.0 - prior.pi) / (1.0 - prior.pi_u);
            let c = tape.constant_scalar(coeff);
            let node = tape.mul(c, mean);
            terms.correction_term = tape.scalar(node);
            corr_node = Some(node);
        }
        let mut unl_node: Option<NodeId> = None;
        if !batch.unl[i].is_empty() {
            let away: Vec<NodeId> = batch.unl[i]
                .iter()
                .map(|&j| {
                    ctx.pair(tape, batch.emb[j], unl_aug(j), |t, f| ctx.loss_away(t, f, i))
                })
                .collect();
            let mean = mean_fold(tape, &away);
            let c = tape.constant_scalar((1.0 - prior.pi) / (1.0 - prior.pi_u));
            let node = tape.mul(c, mean);
            terms.unlabeled_term = tape.scalar(node);
            unl_node = Some(node);
        }
        let bracket = terms.unlabeled_term - terms.correction_term;
        terms.clamped = bracket < 0.0;
        let bracket_node = if terms.clamped {
            None
        } else {
            match (unl_node, corr_node) {
                (Some(u), Some(c)) => Some(tape.sub(u, c)),
                (Some(u), None) => Some(u),
                (None, Some(_)) => None,
                (None, None) => None,
            }
        };
        let class_node = match (pos_node, bracket_node) {
            (Some(p), Some(b)) => Some(tape.add(p, b)),
            (Some(p), None) => Some(p),
            (None, b) => b,
        };
        if let Some(node) = class_node {
            total = Some(match total {
                Some(acc) => tape.add(acc, node),
                None => node,
            });
        }
        per_class.push(terms);
    }
    let root = total.unwrap_or_else(|| tape.constant_scalar(0.0));
    let value = tape.scalar(root);
    Ok((
        root,
        LossBreakdown {
            per_class,
            l_pm_or_p2m: value,
            l_pmix: 0.0,
            l_total: value,
            mixup_warning: false,
        },
    ))
}

/// Positive-unlabeled risk on single-pass embeddings.
pub fn pm_risk_empirical(
    tape: &mut Tape,
    batch: &Batch,
    priors: &PriorConfig,
) -> Result<(NodeId, LossBreakdown)> {
    risk_core(tape, batch, priors, AugMode::None)
}

/// Positive-unlabeled risk with dropout-pair averaging: positive-side means
/// run over both passes of each positive. Under [`Variant::P2mAll`] the
/// unlabeled means are pair-averaged too; the prior coefficients are
/// untouched either way.
pub fn p2m_risk_empirical(
    tape: &mut Tape,
    batch: &Batch,
    priors: &PriorConfig,
) -> Result<(NodeId, LossBreakdown)> {
    let mode = if priors.variant == Variant::P2mAll {
        AugMode::All
    } else {
        AugMode::Positives
    };
    risk_core(tape, batch, priors, mode)
}

/// L2-normalized interpolation mu * f + (1 - mu) * anchor.
pub fn mixup_embedding(f: &Embedding, anchor: &Embedding, mu: f64) -> Result<Embedding> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Usage(format!("mu must lie in [0,1], got {mu}")));
    }
    if f.len() != anchor.len() {
        return Err(Error::Usage("mixup inputs differ in dimension".into()));
    }
    let mixed: Vec<f64> = f
        .values()
        .iter()
        .zip(anchor.values())
        .map(|(a, b)| mu * a + (1.0 - mu) * b)
        .collect();
    let norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < MIX_NORM_FLOOR {
        return Err(Error::DegenerateMix { norm });
    }
    Embedding::normalize(mixed)
}

/// Tape form of [`mixup_embedding`]; `mu` and `one_minus_mu` are prebuilt
/// scalar constants so one step shares them across all mixes.
fn mixup_embedding_node(
    tape: &mut Tape,
    f: NodeId,
    anchor: NodeId,
    mu: NodeId,
    one_minus_mu: NodeId,
) -> Result<NodeId> {
    let a = tape.scale(mu, f);
    let b = tape.scale(one_minus_mu, anchor);
    let s = tape.add(a, b);
    let norm = tape.value(s).iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < MIX_NORM_FLOOR {
        return Err(Error::DegenerateMix { norm });
    }
    Ok(tape.l2norm(s))
}

/// One Beta(alpha, alpha) draw, shared by a whole optimization step.
pub fn sample_mu<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> Result<f64> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Usage(format!("alpha must be > 0, got {alpha}")));
    }
    let beta = rand_distr::Beta::new(alpha, alpha)
        .map_err(|e| Error::Usage(format!("invalid Beta parameter: {e}")))?;
    Ok(rng.sample(beta))
}

/// Draws one mixup anchor per positive, per class, uniformly from that
/// class's unlabeled samples without replacement (with replacement when the
/// positives outnumber them). A class with no unlabeled samples in the batch
/// gets `None` anchors, which mix against the none proxy instead.
pub fn sample_ori_anchors<R: Rng + ?Sized>(
    rng: &mut R,
    pos: &[Vec<usize>],
    unl: &[Vec<usize>],
) -> Vec<Vec<Option<usize>>> {
    pos.iter()
        .zip(unl)
        .map(|(p, u)| {
            if u.is_empty() {
                return vec![None; p.len()];
            }
            if p.len() <= u.len() {
                rand::seq::index::sample(rng, u.len(), p.len())
                    .iter()
                    .map(|idx| Some(u[idx]))
                    .collect()
            } else {
                (0..p.len())
                    .map(|_| Some(u[rng.gen_range(0..u.len())]))
                    .collect()
            }
        })
        .collect()
}

/// The mixup loss node plus its per-class values and the no-positives flag.
pub struct PmixLoss {
    pub node: NodeId,
    /// Per class (0-based), zero for skipped classes.
    pub per_class: Vec<f64>,
    /// Set when no active class had positives, in which case the loss is 0.
    pub no_positive_warning: bool,
}

/// Positive-mixup loss: every positive (both dropout passes) is interpolated
/// toward an anchor, and the mixed embedding is pulled toward its class with
/// weight mu and toward the none proxy with weight 1 - mu. The anchor is the
/// none proxy, unless the variant mixes with sampled unlabeled embeddings.
pub fn pmix_loss(
    tape: &mut Tape,
    batch: &Batch,
    mu: f64,
    priors: &PriorConfig,
) -> Result<PmixLoss> {
    validate_lambda(priors.lambda)?;
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Usage(format!("mu must lie in [0,1], got {mu}")));
    }
    if priors.num_classes() != batch.k() {
        return Err(Error::Usage("prior table and batch disagree on K".into()));
    }
    batch.validate(tape, AugMode::Positives)?;
    let anchors = if priors.variant == Variant::P3mOri {
        match &batch.ori_anchors {
            Some(a) if a.len() == batch.k() => Some(a),
            Some(_) => return Err(Error::Usage("anchor table and batch disagree on K".into())),
            None => {
                return Err(Error::Usage(
                    "variant p3m-ori needs sampled mixup anchors in the batch".into(),
                ))
            }
        }
    } else {
        None
    };
    let ctx = Ctx::new(tape, batch, priors.lambda);
    let mu_node = tape.constant_scalar(mu);
    let om_node = tape.constant_scalar(1.0 - mu);
    let mut per_class = vec![0.0; batch.k()];
    let mut total: Option<NodeId> = None;
    let mut any = false;
    for i in 0..batch.k() {
        if !priors.class(i + 1).active || batch.pos[i].is_empty() {
            continue;
        }
        if let Some(a) = anchors {
            if a[i].len() != batch.pos[i].len() {
                return Err(Error::Usage(format!(
                    "class {}: anchor count does not match positive count",
                    i + 1
                )));
            }
        }
        any = true;
        let mut toward = Vec::with_capacity(batch.pos[i].len());
        let mut away = Vec::with_capacity(batch.pos[i].len());
        for (slot, &j) in batch.pos[i].iter().enumerate() {
            let anchor = match anchors.and_then(|a| a[i][slot]) {
                Some(u) => batch.emb[u],
                None => batch.proxies[0],
            };
            let orig = batch.emb[j];
            let aug = batch.emb_aug[j].expect("validated above");
            let mix = mixup_embedding_node(tape, orig, anchor, mu_node, om_node)?;
            let mix_aug = if aug == orig {
                None
            } else {
                Some(mixup_embedding_node(tape, aug, anchor, mu_node, om_node)?)
            };
            toward.push(ctx.pair(tape, mix, mix_aug, |t, f| ctx.loss_toward(t, f, i)));
            away.push(ctx.pair(tape, mix, mix_aug, |t, f| ctx.loss_away(t, f, i)));
        }
        let mean_toward = mean_fold(tape, &toward);
        let mean_away = mean_fold(tape, &away);
        let wt = tape.mul(mu_node, mean_toward);
        let wa = tape.mul(om_node, mean_away);
        let class_node = tape.add(wt, wa);
        per_class[i] = tape.scalar(class_node);
        total = Some(match total {
            Some(acc) => tape.add(acc, class_node),
            None => class_node,
        });
    }
    let node = total.unwrap_or_else(|| tape.constant_scalar(0.0));
    Ok(PmixLoss {
        node,
        per_class,
        no_positive_warning: !any,
    })
}

/// Full objective for the configured variant: the plain risk, the
/// pair-averaged risk, or the pair-averaged risk plus nu times the mixup
/// loss. The baseline variant evaluates the supervised risk on whatever
/// truth sets the batch carries.
pub fn p3m_total(
    tape: &mut Tape,
    batch: &Batch,
    priors: &PriorConfig,
    mu: f64,
) -> Result<(NodeId, LossBreakdown)> {
    match priors.variant {
        Variant::NaivePn => pnm_risk(tape, batch, priors),
        Variant::Pm => pm_risk_empirical(tape, batch, priors),
        Variant::P2m | Variant::P2mAll => p2m_risk_empirical(tape, batch, priors),
        Variant::P3m | Variant::P3mOri => {
            let (risk_node, mut breakdown) = p2m_risk_empirical(tape, batch, priors)?;
            if priors.nu == 0.0 {
                return Ok((risk_node, breakdown));
            }
            let pmix = pmix_loss(tape, batch, mu, priors)?;
            let nu_node = tape.constant_scalar(priors.nu);
            let weighted = tape.mul(nu_node, pmix.node);
            let root = tape.add(risk_node, weighted);
            for (terms, &m) in breakdown.per_class.iter_mut().zip(&pmix.per_class) {
                terms.mixup_term = m;
            }
            breakdown.l_pmix = tape.scalar(pmix.node);
            breakdown.l_total = tape.scalar(root);
            breakdown.mixup_warning = pmix.no_positive_warning;
            Ok((root, breakdown))
        }
    }
}
