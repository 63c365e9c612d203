//! Finite-difference checks over every layer type and both losses, on small
//! random instances with fixed seeds.

use crate::affinity::KernelKind;
use crate::error::Result;
use crate::layers::{LayerSpec, ModelParams, ModelSpec};
use crate::ndcore::{compare_gradient, Matrix, Tape};
use crate::rng::SplitMix64;
use crate::training::{cox_nll, loss_gradients, masked_cross_entropy, Target, TrainData};

/// Relative error above which a check fails.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

const STEP: f64 = 1e-5;
const N: usize = 8;
const P: usize = 4;
const CLASSES: usize = 3;

/// Outcome of one check on one random instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub instance: usize,
    /// Max over coordinates of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADIENT_TOLERANCE
    }
}

/// Names of the checks run by [`gradient_suite`], in order.
pub fn check_names() -> Vec<String> {
    let mut names = vec!["feature_attention".to_string()];
    for kind in KERNELS {
        names.push(format!("knn_pooling_{}", kernel_name(kind)));
    }
    names.extend(
        ["affine_relu", "linear_head", "cox_head", "cross_entropy", "cox_nll"]
            .iter()
            .map(|s| s.to_string()),
    );
    names
}

const KERNELS: [KernelKind; 4] = [
    KernelKind::Cosine,
    KernelKind::InnerProduct,
    KernelKind::Perceptron,
    KernelKind::WeightedL2,
];

fn kernel_name(kind: KernelKind) -> &'static str {
    match kind {
        KernelKind::Cosine => "cosine",
        KernelKind::InnerProduct => "inner_product",
        KernelKind::Perceptron => "perceptron",
        KernelKind::WeightedL2 => "weighted_l2",
    }
}

/// Runs every check on `instances` random instances derived from `seed`.
///
/// `corrupt` names a check whose analytic gradient is deliberately perturbed
/// before comparison, to confirm that the suite notices a wrong rule.
pub fn gradient_suite(instances: usize, seed: u64, corrupt: Option<&str>) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for name in check_names() {
        for instance in 0..instances {
            let mut rng = SplitMix64::stream(seed, (out.len() as u64) << 8 | instance as u64);
            let bad = corrupt == Some(name.as_str());
            let err = run_check(&name, &mut rng, bad)?;
            out.push(GradCheck {
                name: name.clone(),
                instance,
                max_rel_error: err,
            });
        }
    }
    Ok(out)
}

fn run_check(name: &str, rng: &mut SplitMix64, corrupt: bool) -> Result<f64> {
    let pooling = |kind: KernelKind| LayerSpec::KnnPooling {
        out: 3,
        k: 2,
        attention_kernel: kind,
        graph_kernel: kind,
        lambda: 0.0,
        eta: 1.0,
    };
    let head = LayerSpec::LinearHead { classes: CLASSES };
    let layers = match name {
        "feature_attention" => vec![
            LayerSpec::FeatureAttention {
                k: 2,
                lambda: 0.0,
                eta: 1.0,
                frozen: false,
            },
            head,
        ],
        "affine_relu" => vec![LayerSpec::AffineRelu { out: 5 }, head],
        "linear_head" => vec![head],
        "cox_head" => vec![LayerSpec::CoxHead],
        "cross_entropy" => return loss_check(rng, false, corrupt),
        "cox_nll" => return loss_check(rng, true, corrupt),
        other => {
            let kind = KERNELS
                .into_iter()
                .find(|&k| other == format!("knn_pooling_{}", kernel_name(k)))
                .ok_or_else(|| crate::Error::InvalidParameter(format!("unknown check {other}")))?;
            vec![pooling(kind), head]
        }
    };
    let spec = ModelSpec {
        input_dim: P,
        layers,
    };
    model_check(&spec, rng, corrupt)
}

fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Survival records with deliberate ties in time.
fn random_survival(rng: &mut SplitMix64, n: usize) -> (Vec<f64>, Vec<bool>) {
    let time: Vec<f64> = (0..n).map(|_| 0.5 * (1 + rng.below(5)) as f64).collect();
    let mut event: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.7).collect();
    event[0] = true;
    (time, event)
}

fn model_check(spec: &ModelSpec, rng: &mut SplitMix64, corrupt: bool) -> Result<f64> {
    let mut params = ModelParams::<f64>::init(spec, rng.next_u64())?;
    // Move feature-attention logits off the uniform start so weights differ.
    for p in params.iter_mut() {
        if p.name == "logits" {
            p.value = random_matrix(rng, 1, P).scale(0.5);
        }
    }
    let x = random_matrix(rng, N, P);
    let labels: Vec<usize> = (0..N).map(|_| rng.below(CLASSES)).collect();
    let (time, event) = random_survival(rng, N);
    let mask: Vec<bool> = (0..N).map(|i| i < N - 2).collect();
    let target = match spec.head() {
        crate::layers::HeadKind::Cox => Target::Survival {
            time: &time,
            event: &event,
        },
        _ => Target::Classes(&labels),
    };
    let data = TrainData {
        x: &x,
        target,
        train_mask: &mask,
        test_mask: None,
        given: None,
    };
    let (_, grads) = loss_gradients(spec, &params, &data)?;
    let mut worst = 0.0f64;
    for (slot, grad) in grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let mut analytic = grad.clone();
        if corrupt && slot == 0 {
            perturb(&mut analytic);
        }
        let theta = params.iter().nth(slot).expect("slot").value.clone();
        let err = compare_gradient(
            |m: &Matrix<f64>| {
                let mut p = params.clone();
                p.iter_mut().nth(slot).expect("slot").value = m.clone();
                Ok(loss_gradients(spec, &p, &data)?.0)
            },
            &theta,
            &analytic,
            STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn loss_check(rng: &mut SplitMix64, cox: bool, corrupt: bool) -> Result<f64> {
    let cols = if cox { 1 } else { CLASSES };
    let theta = random_matrix(rng, N, cols);
    let labels: Vec<usize> = (0..N).map(|_| rng.below(CLASSES)).collect();
    let mask: Vec<bool> = (0..N).map(|i| i % 4 != 3).collect();
    let (time, event) = random_survival(rng, N);
    let loss = |tape: &mut Tape<f64>, leaf| {
        if cox {
            cox_nll(tape, leaf, &time, &event)
        } else {
            masked_cross_entropy(tape, leaf, &labels, &mask)
        }
    };
    let mut tape = Tape::new();
    let leaf = tape.param(theta.clone());
    let out = loss(&mut tape, leaf)?;
    tape.backward(out)?;
    let mut analytic = tape.grad(leaf).cloned().expect("leaf gradient");
    if corrupt {
        perturb(&mut analytic);
    }
    compare_gradient(
        |m: &Matrix<f64>| {
            let mut t = Tape::new();
            let leaf = t.constant(m.clone());
            let out = loss(&mut t, leaf)?;
            Ok(t.value(out).item())
        },
        &theta,
        &analytic,
        STEP,
    )
}

fn perturb(g: &mut Matrix<f64>) {
    let v = &mut g.data_mut()[0];
    *v += 1e-2 * v.abs().max(1.0);
}
