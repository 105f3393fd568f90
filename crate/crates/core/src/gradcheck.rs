//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baseline::RecurrentBaseline;
use crate::data::{StageRecord, WindowedSample};
use crate::error::{Error, Result};
use crate::losses::{full_sample_loss, LabelMode, LossConfig};
use crate::network::Network;
use crate::params::ParamSet;
use crate::prototypes::prototype_forward;
use crate::stage_modules::{ModularConfig, ModularNetwork};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Largest admissible finite-difference step.
pub const MAX_EPS: f64 = 1e-2;

fn evaluate<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    tape.check_finite()?;
    if tape.value(out).len() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    Ok(tape.scalar(out))
}

/// Compares reverse-mode gradients of `f` against central differences over
/// every coordinate of every tensor in `params`.
///
/// Returns `max |analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= MAX_EPS) {
        return Err(Error::Contract(format!("eps {eps} outside (0, {MAX_EPS}]")));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    tape.check_finite()?;
    let analytic = tape.backward(out)?.for_params(params);

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for id in params.ids() {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).values()[j];
            probe.get_mut(id).values_mut()[j] = orig + eps;
            let up = evaluate(&f, &probe)?;
            probe.get_mut(id).values_mut()[j] = orig - eps;
            let down = evaluate(&f, &probe)?;
            probe.get_mut(id).values_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[id.index()].values()[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Finite-difference step used by [`suite`].
pub const SUITE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Reduces any node to a scalar with fixed random coefficients, so every
/// output coordinate carries a distinct gradient.
fn project(tape: &mut Tape, node: NodeId, coef: &[f64]) -> Result<NodeId> {
    let n = tape.value(node).len();
    let flat = tape.reshape(node, vec![n])?;
    let c = tape.constant(Tensor::vector(coef[..n].to_vec()));
    tape.dot(flat, c)
}

type Primitive = fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Primitive)> {
    vec![
        ("affine", vec![vec![3, 4], vec![4], vec![3]], |t, p| t.affine(p[0], p[1], Some(p[2]))),
        ("matvec", vec![vec![3, 4], vec![4]], |t, p| t.matvec(p[0], p[1])),
        ("add", vec![vec![4], vec![4]], |t, p| t.add(p[0], p[1])),
        ("sub", vec![vec![4], vec![4]], |t, p| t.sub(p[0], p[1])),
        ("hadamard", vec![vec![4], vec![4]], |t, p| t.hadamard(p[0], p[1])),
        ("scale", vec![vec![4]], |t, p| Ok(t.scale(p[0], -1.7))),
        ("add_scalar", vec![vec![4]], |t, p| Ok(t.add_scalar(p[0], 0.3))),
        ("tanh", vec![vec![4]], |t, p| Ok(t.tanh(p[0]))),
        ("sigmoid", vec![vec![4]], |t, p| Ok(t.sigmoid(p[0]))),
        ("relu", vec![vec![4]], |t, p| {
            // Shifted away from the kink so the check is well posed.
            let sq = t.hadamard(p[0], p[0])?;
            let s = t.add_scalar(sq, 0.1);
            Ok(t.relu(s))
        }),
        ("concat", vec![vec![2], vec![3]], |t, p| t.concat(&[p[0], p[1]])),
        ("slice", vec![vec![5]], |t, p| t.slice(p[0], 1, 3)),
        ("reshape", vec![vec![6]], |t, p| t.reshape(p[0], vec![2, 3])),
        ("sum", vec![vec![4]], |t, p| Ok(t.sum(p[0]))),
        ("dot", vec![vec![4], vec![4]], |t, p| t.dot(p[0], p[1])),
        ("sq_dist", vec![vec![4], vec![4]], |t, p| t.sq_dist(p[0], p[1])),
        ("cosine", vec![vec![4], vec![4]], |t, p| t.cosine(p[0], p[1])),
        ("softmax", vec![vec![4]], |t, p| t.softmax(p[0])),
        ("softmax_columns", vec![vec![3, 4]], |t, p| t.softmax_columns(p[0])),
        ("weighted_sum", vec![vec![3], vec![4], vec![4], vec![4]], |t, p| t.weighted_sum(p[0], &p[1..])),
        ("mean", vec![vec![4], vec![4], vec![4]], |t, p| t.mean(p)),
        ("stack", vec![vec![3], vec![3]], |t, p| t.stack(p)),
        ("index", vec![vec![4]], |t, p| t.index(p[0], 2)),
        ("logsumexp", vec![vec![4]], |t, p| Ok(t.logsumexp(p[0]))),
        ("min", vec![vec![4]], |t, p| Ok(t.min(p[0]))),
        ("bce", vec![vec![4], vec![4]], |t, p| {
            let probs = t.sigmoid(p[0]);
            let w = t.sigmoid(p[1]);
            t.bce(probs, &[1.0, 0.0, 1.0, 0.0], w)
        }),
    ]
}

fn check_primitive(name: &str, shapes: &[Vec<usize>], op: Primitive, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut params = ParamSet::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, shape)| {
            let n = shape.iter().product();
            let t = Tensor::new(shape.clone(), random_vec(rng, n, 1.5))?;
            Ok(params.add(format!("{name}.{i}"), t))
        })
        .collect::<Result<_>>()?;
    let coef = random_vec(rng, 64, 1.0);
    let err = grad_check(
        |tape, p| {
            let nodes: Vec<NodeId> = ids.iter().map(|&id| tape.param(p, id)).collect();
            let out = op(tape, &nodes)?;
            project(tape, out, &coef)
        },
        &params,
        SUITE_EPS,
    )?;
    Ok(CheckResult {
        name: format!("primitive/{name}"),
        max_rel_error: err,
    })
}

/// A three-stage sample over two stage types, each stage running three mods.
fn toy_sample(rng: &mut ChaCha8Rng, sensors: usize, kqis: usize, mod_types: usize) -> WindowedSample {
    let stages = (0..3)
        .map(|t| {
            let labels: Vec<u8> = (0..kqis).map(|_| u8::from(rng.random_bool(0.5))).collect();
            let mut label_mask: Vec<u8> = (0..kqis).map(|_| u8::from(rng.random_bool(0.7))).collect();
            label_mask[0] = 1;
            StageRecord {
                process: format!("P{t}"),
                step: format!("S{t}"),
                stage_type: format!("T{}", t % 2),
                stage_type_id: t % 2,
                mod_sequence: (0..3).map(|_| rng.random_range(0..mod_types)).collect(),
                tool: "tool".into(),
                recipe: "recipe".into(),
                timestamp: t as i64,
                sensors: random_vec(rng, sensors, 1.0),
                sensor_presence: vec![1; sensors],
                labels,
                label_mask,
            }
        })
        .collect();
    WindowedSample {
        wafer_id: "W0".into(),
        product_type: "A".into(),
        product_group: "G".into(),
        start: 0,
        stages,
    }
}

fn with_params(net: &Network, params: &ParamSet) -> Network {
    let mut n = net.clone();
    *n.params_mut() = params.clone();
    n
}

/// Gradient checks for every tape primitive, a prototype, a three-mod stage
/// step, and the full sequence objective with all three losses (in both
/// label modes), plus the recurrent baseline. Toy dimensions keep one call
/// well under a second.
pub fn suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, op) in primitives() {
        out.push(check_primitive(name, &shapes, op, &mut rng)?);
    }

    let (sensors, kqis, mod_types) = (3, 2, 3);
    let cfg = ModularConfig {
        hidden: 4,
        prototypes: 4,
        ..ModularConfig::default()
    };
    let soft = ModularNetwork::new(cfg.clone(), sensors, kqis, mod_types, &[0, 1], true, rng.random())?;
    let sample = toy_sample(&mut rng, sensors, kqis, mod_types);
    let x = Tensor::vector(sample.stages[0].sensors.clone());
    let h0 = Tensor::vector(random_vec(&mut rng, cfg.hidden, 0.9));
    let coef = random_vec(&mut rng, 64, 1.0);

    let proto = soft.bank.prototypes[0].clone();
    let err = grad_check(
        |tape, p| {
            let (xn, hn) = (tape.constant(x.clone()), tape.constant(h0.clone()));
            let y = prototype_forward(tape, p, &proto, xn, hn)?;
            project(tape, y, &coef)
        },
        &soft.params,
        SUITE_EPS,
    )?;
    out.push(CheckResult {
        name: "prototype_forward".into(),
        max_rel_error: err,
    });

    let mods = sample.stages[0].mod_sequence.clone();
    let err = grad_check(
        |tape, p| {
            let net = ModularNetwork {
                params: p.clone(),
                ..soft.clone()
            };
            let (xn, hn) = (tape.constant(x.clone()), tape.constant(h0.clone()));
            let y = net.stage_forward(tape, 0, &mods, xn, hn)?;
            project(tape, y.hidden, &coef)
        },
        &soft.params,
        SUITE_EPS,
    )?;
    out.push(CheckResult {
        name: "stage_forward/3_mods".into(),
        max_rel_error: err,
    });

    let hard = Network::Modular(ModularNetwork::new(cfg, sensors, kqis, mod_types, &[0, 1], false, rng.random())?);
    let soft = Network::Modular(soft);
    let lstm = Network::RecurrentBaseline(RecurrentBaseline::new(sensors, 4, kqis, rng.random())?);
    let all = LossConfig::default();
    let soft_loss = LossConfig {
        label_mode: LabelMode::SoftAttention,
        ..all.clone()
    };
    for (name, net, loss) in [
        ("sequence_loss/hard_crop", &hard, &all),
        ("sequence_loss/soft_attention", &soft, &soft_loss),
        ("sequence_loss/recurrent_baseline", &lstm, &all),
    ] {
        let err = grad_check(
            |tape, p| full_sample_loss(tape, &with_params(net, p), &sample, loss),
            net.params(),
            SUITE_EPS,
        )?;
        out.push(CheckResult {
            name: name.into(),
            max_rel_error: err,
        });
    }
    Ok(out)
}
