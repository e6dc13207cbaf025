//! Energies and training losses in canonical minimised form.
//!
//! Sign convention throughout: ID energy is pushed low (below `t_id`),
//! OOD energy high (above `t_ood`), and the OOD score is "higher means
//! more OOD-like". The divergence regulariser is a non-negative measure
//! that the combined objective ASCENDS, so it enters the minimised total
//! with a negative weight.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DetectorConfig, GcnConfig, GoldModel};
use crate::numerics::{adam_step, logsumexp_rows, AdamParams, Matrix, NodeId, Tape};

/// Energy margin thresholds for the bounded regulariser.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Margins {
    pub t_id: f64,
    pub t_ood: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Margins {
            t_id: -4.0,
            t_ood: 2.0,
        }
    }
}

impl Margins {
    pub fn validate(&self) -> Result<()> {
        if self.t_id >= self.t_ood {
            return Err(Error::contract(format!(
                "margins require t_id < t_ood, got {} >= {}",
                self.t_id, self.t_ood
            )));
        }
        Ok(())
    }
}

/// Weights (mu, lambda, gamma) for the combined divergence objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub mu: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mu: 1.0,
            lambda: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.mu < 0.0 || self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(Error::contract("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// e = -logsumexp(z) per row, on a plain matrix.
pub fn energy_score(logits: &Matrix) -> Result<Matrix> {
    Ok(logsumexp_rows(logits)?.scale(-1.0))
}

/// Tape version of the energy score.
pub fn energy_score_on(tape: &mut Tape, logits: NodeId) -> NodeId {
    let lse = tape.logsumexp_rows(logits);
    tape.scale(lse, -1.0)
}

/// e' = -log(exp(l0) + exp(l1)) per detector-logit row.
pub fn transformed_energy(logit_pairs: &Matrix) -> Result<Matrix> {
    if logit_pairs.cols() != 2 {
        return Err(Error::dimension(format!(
            "transformed energy expects 2 logits per row, got {}",
            logit_pairs.cols()
        )));
    }
    if !logit_pairs.all_finite() {
        return Err(Error::Numerical("non-finite detector logits".into()));
    }
    energy_score(logit_pairs)
}

pub fn transformed_energy_on(tape: &mut Tape, logit_pairs: NodeId) -> NodeId {
    energy_score_on(tape, logit_pairs)
}

/// Mean softmax cross-entropy over rows whose label must be present.
pub fn loss_cls(tape: &mut Tape, z_train: NodeId, labels: &[Option<usize>]) -> Result<NodeId> {
    let z = tape.value(z_train);
    if z.rows() != labels.len() {
        return Err(Error::contract(format!(
            "{} logit rows but {} labels",
            z.rows(),
            labels.len()
        )));
    }
    if z.rows() == 0 {
        return Err(Error::contract("loss_cls on empty logit matrix"));
    }
    let mut idx = Vec::with_capacity(labels.len());
    for (row, label) in labels.iter().enumerate() {
        match label {
            Some(c) if *c < z.cols() => idx.push(*c),
            Some(c) => {
                return Err(Error::contract(format!(
                    "label {c} out of range for {} classes",
                    z.cols()
                )))
            }
            None => {
                return Err(Error::contract(format!(
                    "training row {row} has no label"
                )))
            }
        }
    }
    let idx = Arc::new(idx);
    let lse = tape.logsumexp_rows(z_train);
    let mean_lse = tape.mean_all(lse);
    let picked = tape.pick_per_row(z_train, &idx);
    let mean_picked = tape.mean_all(picked);
    Ok(tape.sub(mean_lse, mean_picked))
}

/// mean over a column of relu(x)^2.
fn mean_squared_hinge(tape: &mut Tape, x: NodeId) -> NodeId {
    let r = tape.relu(x);
    let s = tape.square(r);
    tape.mean_all(s)
}

/// Bounded energy regulariser:
/// mean_ID relu(e - t_id)^2 + mean_pOOD relu(t_ood - e)^2.
/// Zero exactly when all ID energies sit below t_id and all pseudo-OOD
/// energies above t_ood.
pub fn loss_ereg(
    tape: &mut Tape,
    e_id: NodeId,
    e_pood: NodeId,
    margins: &Margins,
) -> Result<NodeId> {
    margins.validate()?;
    if tape.value(e_id).rows() == 0 || tape.value(e_pood).rows() == 0 {
        return Err(Error::contract("loss_ereg needs nonempty energy vectors"));
    }
    let over = tape.add_const(e_id, -margins.t_id);
    let id_term = mean_squared_hinge(tape, over);
    let neg = tape.scale(e_pood, -1.0);
    let under = tape.add_const(neg, margins.t_ood);
    let pood_term = mean_squared_hinge(tape, under);
    Ok(tape.add(id_term, pood_term))
}

/// Uncertainty loss in minimised form: negative log-likelihood of the
/// detector calling ID rows class 0 and pseudo-OOD rows class 1.
pub fn loss_unc(tape: &mut Tape, logits_id: NodeId, logits_pood: NodeId) -> Result<NodeId> {
    let id_term = fixed_class_nll(tape, logits_id, 0)?;
    let pood_term = fixed_class_nll(tape, logits_pood, 1)?;
    Ok(tape.add(id_term, pood_term))
}

fn fixed_class_nll(tape: &mut Tape, logits: NodeId, class: usize) -> Result<NodeId> {
    let l = tape.value(logits);
    if l.rows() == 0 {
        return Err(Error::contract("uncertainty loss on empty logits"));
    }
    if l.cols() != 2 {
        return Err(Error::dimension(format!(
            "detector logits must have 2 columns, got {}",
            l.cols()
        )));
    }
    let idx = Arc::new(vec![class; l.rows()]);
    let lse = tape.logsumexp_rows(logits);
    let mean_lse = tape.mean_all(lse);
    let picked = tape.pick_per_row(logits, &idx);
    let mean_picked = tape.mean_all(picked);
    Ok(tape.sub(mean_lse, mean_picked))
}

/// Divergence regulariser (ascended by the combined objective):
/// mean_ID relu(e - e')^2 + mean_pOOD relu(e' - e)^2. Grows as the
/// transformed energy drops below e on ID rows and rises above e on
/// pseudo-OOD rows.
pub fn loss_dreg(
    tape: &mut Tape,
    e_id: NodeId,
    eprime_id: NodeId,
    e_pood: NodeId,
    eprime_pood: NodeId,
) -> Result<NodeId> {
    let (n_id, n_pood) = (tape.value(e_id).rows(), tape.value(e_pood).rows());
    if tape.value(eprime_id).rows() != n_id || tape.value(eprime_pood).rows() != n_pood {
        return Err(Error::contract(
            "divergence regulariser needs paired e / e' lengths",
        ));
    }
    if n_id == 0 || n_pood == 0 {
        return Err(Error::contract("divergence regulariser on empty vectors"));
    }
    let id_gap = tape.sub(e_id, eprime_id);
    let id_term = mean_squared_hinge(tape, id_gap);
    let pood_gap = tape.sub(eprime_pood, e_pood);
    let pood_term = mean_squared_hinge(tape, pood_gap);
    Ok(tape.add(id_term, pood_term))
}

/// Component node ids of the combined divergence objective, kept around
/// for history records and tests.
#[derive(Debug, Clone, Copy)]
pub struct DivTotal {
    pub total: NodeId,
    pub cls: NodeId,
    pub ereg: NodeId,
    pub unc: NodeId,
    pub dreg: NodeId,
    pub eprime_id: NodeId,
    pub eprime_pood: NodeId,
}

/// Minimised total for the divergence phase:
/// L_cls + mu L_ereg + lambda L_unc - gamma L_dreg.
#[allow(clippy::too_many_arguments)]
pub fn loss_div_total(
    tape: &mut Tape,
    z_train: NodeId,
    labels: &[Option<usize>],
    e_id: NodeId,
    e_pood: NodeId,
    logits_id: NodeId,
    logits_pood: NodeId,
    weights: &LossWeights,
    margins: &Margins,
) -> Result<DivTotal> {
    weights.validate()?;
    let cls = loss_cls(tape, z_train, labels)?;
    let ereg = loss_ereg(tape, e_id, e_pood, margins)?;
    let unc = loss_unc(tape, logits_id, logits_pood)?;
    let eprime_id = transformed_energy_on(tape, logits_id);
    let eprime_pood = transformed_energy_on(tape, logits_pood);
    let dreg = loss_dreg(tape, e_id, eprime_id, e_pood, eprime_pood)?;

    let ereg_w = tape.scale(ereg, weights.mu);
    let unc_w = tape.scale(unc, weights.lambda);
    let dreg_w = tape.scale(dreg, -weights.gamma);
    let a = tape.add(cls, ereg_w);
    let b = tape.add(a, unc_w);
    let total = tape.add(b, dreg_w);
    Ok(DivTotal {
        total,
        cls,
        ereg,
        unc,
        dreg,
        eprime_id,
        eprime_pood,
    })
}

/// Outcome of the detector-only divergence probe: mean transformed
/// energies before and after running the detector updates.
#[derive(Debug, Clone, Copy)]
pub struct DirectionProbe {
    pub initial_mean_eprime_id: f64,
    pub final_mean_eprime_id: f64,
    pub initial_mean_eprime_pood: f64,
    pub final_mean_eprime_pood: f64,
}

/// Freezes the energies, initialises a detector that already assigns the
/// OOD class probability above 0.5 to every pseudo-OOD input (small random
/// weights under a shifted output bias), then runs `steps` updates that
/// descend lambda L_unc - gamma L_dreg over the detector parameters only.
/// The expected direction is mean e'_ID down, mean e'_pOOD up.
pub fn detector_divergence_probe(
    seed: u64,
    steps: usize,
    lambda: f64,
    gamma: f64,
) -> Result<DirectionProbe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 40;
    let id_dist = Normal::new(-4.0, 0.5).unwrap();
    let pood_dist = Normal::new(1.0, 0.5).unwrap();
    let e_id = Matrix::column(&(0..m).map(|_| id_dist.sample(&mut rng)).collect::<Vec<_>>());
    let e_pood = Matrix::column(&(0..m).map(|_| pood_dist.sample(&mut rng)).collect::<Vec<_>>());

    let mut model = GoldModel::init(
        GcnConfig {
            input_dim: 2,
            hidden_dim: 2,
            num_classes: 2,
            layers: 2,
        },
        DetectorConfig {
            hidden_dim: 16,
            layers: 2,
        },
        seed,
    )?;
    // Shrink the random detector weights so the output bias dominates and
    // the OOD logit starts ahead everywhere.
    for name in ["det.w1", "det.w2"] {
        let w = model.params.get_mut(name).unwrap();
        *w = w.scale(0.1);
    }
    *model.params.get_mut("det.b2").unwrap() =
        Matrix::from_vec(1, 2, vec![-4.0, -2.0]).unwrap();

    let eprime_means = |model: &GoldModel| -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let eid = tape.constant(e_id.clone());
        let epo = tape.constant(e_pood.clone());
        let lid = model.detector_forward(&mut tape, eid)?;
        let lpo = model.detector_forward(&mut tape, epo)?;
        let pid = transformed_energy_on(&mut tape, lid);
        let ppo = transformed_energy_on(&mut tape, lpo);
        Ok((tape.value(pid).mean_all(), tape.value(ppo).mean_all()))
    };

    // Precondition check: softmax(l)[1] > 0.5 on every pseudo-OOD input.
    {
        let mut tape = Tape::new();
        let epo = tape.constant(e_pood.clone());
        let lpo = model.detector_forward(&mut tape, epo)?;
        let l = tape.value(lpo);
        for i in 0..l.rows() {
            if l.get(i, 1) <= l.get(i, 0) {
                return Err(Error::contract(
                    "probe precondition violated: OOD logit not dominant",
                ));
            }
        }
    }

    let (initial_id, initial_pood) = eprime_means(&model)?;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let eid = tape.constant(e_id.clone());
        let epo = tape.constant(e_pood.clone());
        let lid = model.detector_forward(&mut tape, eid)?;
        let lpo = model.detector_forward(&mut tape, epo)?;
        let unc = loss_unc(&mut tape, lid, lpo)?;
        let pid = transformed_energy_on(&mut tape, lid);
        let ppo = transformed_energy_on(&mut tape, lpo);
        let dreg = loss_dreg(&mut tape, eid, pid, epo, ppo)?;
        let unc_w = tape.scale(unc, lambda);
        let dreg_w = tape.scale(dreg, -gamma);
        let loss = tape.add(unc_w, dreg_w);
        let grads = tape.backward(loss, &model.params)?;
        adam_step(&mut model.params, &grads, 1e-2, AdamParams::default())?;
    }
    let (final_id, final_pood) = eprime_means(&model)?;
    Ok(DirectionProbe {
        initial_mean_eprime_id: initial_id,
        final_mean_eprime_id: final_id,
        initial_mean_eprime_pood: initial_pood,
        final_mean_eprime_pood: final_pood,
    })
}
