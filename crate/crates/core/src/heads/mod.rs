//! Subactivity and affordance readouts, the joint loss, and metrics.

mod metrics;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};

pub use metrics::{
    argmax, confusion_matrix, macro_f1, topk_accuracy, ClassScores, F1Report, HeadMetrics,
    MetricsReport,
};

/// Hidden width of both readout MLPs.
pub const READOUT_HIDDEN: usize = 256;
pub const SUBACTIVITY_PREFIX: &str = "head.sub";
pub const AFFORDANCE_PREFIX: &str = "head.aff";

/// `(name, shape, is_bias)` of a two-layer MLP `input → hidden → classes`.
pub fn mlp_param_shapes(
    prefix: &str,
    input: usize,
    hidden: usize,
    classes: usize,
) -> Vec<(String, Vec<usize>, bool)> {
    vec![
        (format!("{prefix}.fc1.w"), vec![input, hidden], false),
        (format!("{prefix}.fc1.b"), vec![hidden], true),
        (format!("{prefix}.fc2.w"), vec![hidden, classes], false),
        (format!("{prefix}.fc2.b"), vec![classes], true),
    ]
}

/// Parameters of both heads for fused node width `fused` (= 2C).
pub fn head_param_shapes(
    fused: usize,
    hidden: usize,
    subactivities: usize,
    affordances: usize,
) -> Vec<(String, Vec<usize>, bool)> {
    let mut out = mlp_param_shapes(SUBACTIVITY_PREFIX, fused, hidden, subactivities);
    out.extend(mlp_param_shapes(
        AFFORDANCE_PREFIX,
        2 * fused,
        hidden,
        affordances,
    ));
    out
}

/// `fc2(relu(fc1(x)))` over rows of `x [R, in]`.
pub fn mlp(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let p = |tape: &mut Tape, name: &str| tape.param(store, &format!("{prefix}.{name}"));
    let (w1, b1, w2, b2) = (
        p(tape, "fc1.w")?,
        p(tape, "fc1.b")?,
        p(tape, "fc2.w")?,
        p(tape, "fc2.b")?,
    );
    let h = tape.linear(x, w1, Some(b1))?;
    let h = tape.relu(h)?;
    Ok(tape.linear(h, w2, Some(b2))?)
}

/// Subactivity logits `[K_s]` from the human's fused vector `[2C]`.
pub fn subactivity_readout(tape: &mut Tape, store: &ParamStore, human: Var) -> Result<Var> {
    let width = tape.shape(human).iter().product::<usize>();
    let row = tape.reshape(human, &[1, width])?;
    let logits = mlp(tape, store, SUBACTIVITY_PREFIX, row)?;
    let k = tape.shape(logits)[1];
    Ok(tape.reshape(logits, &[k])?)
}

/// Affordance logits `[M, K_a]`: the shared MLP applied to `human ⊕ object`
/// for each row of `objects [M, 2C]`.
pub fn affordance_readout(
    tape: &mut Tape,
    store: &ParamStore,
    human: Var,
    objects: Var,
) -> Result<Var> {
    let os = tape.shape(objects).to_vec();
    let width = tape.shape(human).iter().product::<usize>();
    if os.len() != 2 || os[1] != width {
        return Err(Error::Graph(format!(
            "affordance readout: objects {os:?} do not match human width {width}"
        )));
    }
    let row = tape.reshape(human, &[1, width])?;
    let repeated = tape.gather_rows(row, &vec![0; os[0]])?;
    let pairs = tape.concat(&[repeated, objects], 1)?;
    mlp(tape, store, AFFORDANCE_PREFIX, pairs)
}

/// Logit handles on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// `[K_s]`
    pub subactivity: Var,
    /// `[M, K_a]`, objects in entity order.
    pub affordance: Var,
}

/// Both heads on fused node features `[N, 2C]`.
pub fn readouts(
    tape: &mut Tape,
    store: &ParamStore,
    fused: Var,
    human: usize,
    objects: &[usize],
) -> Result<PredictionVars> {
    let h = tape.gather_rows(fused, &[human])?;
    let o = tape.gather_rows(fused, objects)?;
    Ok(PredictionVars {
        subactivity: subactivity_readout(tape, store, h)?,
        affordance: affordance_readout(tape, store, h, o)?,
    })
}

/// `CE(subactivity) + λ · mean over objects of CE(affordance)`.
pub fn joint_loss(
    tape: &mut Tape,
    pred: PredictionVars,
    subactivity_label: usize,
    affordance_labels: &[usize],
    lambda: f64,
) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let objects = tape.shape(pred.affordance)[0];
    if affordance_labels.len() != objects {
        return Err(Error::Graph(format!(
            "{} affordance labels for {objects} objects",
            affordance_labels.len()
        )));
    }
    let sub = tape.cross_entropy(pred.subactivity, &[subactivity_label])?;
    let aff = tape.cross_entropy(pred.affordance, affordance_labels)?;
    let aff = tape.scale(aff, lambda)?;
    Ok(tape.add(sub, aff)?)
}

/// Logit values detached from the tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subactivity_logits: Vec<f64>,
    /// One vector per object, in entity order.
    pub affordance_logits: Vec<Vec<f64>>,
}

impl Prediction {
    pub fn from_tape(tape: &Tape, vars: PredictionVars) -> Self {
        let aff = tape.value(vars.affordance);
        let k = aff.shape()[1];
        Prediction {
            subactivity_logits: tape.value(vars.subactivity).data().to_vec(),
            affordance_logits: aff.data().chunks(k).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn subactivity(&self) -> usize {
        argmax(&self.subactivity_logits)
    }

    pub fn affordances(&self) -> Vec<usize> {
        self.affordance_logits.iter().map(|l| argmax(l)).collect()
    }
}
