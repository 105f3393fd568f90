//! Invariant checks shared by the property tests and the acceptance run.
//! Each check takes plain generated inputs (mostly a seed) and builds its own
//! random fixtures, so the same function can be driven by `proptest!` or by a
//! hand-configured runner.

#![allow(dead_code)]

use std::collections::BTreeSet;

use modfab::data::{
    knn_impute, make_windows, read_sequences, split_dataset, write_sequences, Dataset, Holdout, SplitMode,
    StageRecord, Vocabulary, WaferSequence, WindowedSample,
};
use modfab::harness::{auc, fit, TrainConfig};
use modfab::losses::{distinction_loss, full_sample_loss, measurement_loss, proximity_terms, LabelMask, LossConfig};
use modfab::network::Network;
use modfab::params::{ParamSet, Sgd};
use modfab::prototypes::{prototype_forward, PrototypeBank};
use modfab::stage_modules::{build_selector, ModularConfig, ModularNetwork};
use modfab::synth::{gen_dataset, gen_world, WorldConfig};
use modfab::tape::Tape;
use modfab::Tensor;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), TestCaseError>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub struct Dims {
    pub sensors: usize,
    pub kqis: usize,
    pub mod_types: usize,
    pub stage_types: usize,
}

pub const TOY: Dims = Dims {
    sensors: 3,
    kqis: 2,
    mod_types: 3,
    stage_types: 3,
};

pub fn random_stage(rng: &mut ChaCha8Rng, d: &Dims, scale: f64) -> StageRecord {
    let st = rng.random_range(0..d.stage_types);
    let mods = rng.random_range(1..=3);
    StageRecord {
        process: format!("PROC{}", rng.random_range(0..9)),
        step: format!("STP{}", rng.random_range(0..9)),
        stage_type: format!("STG{st}"),
        stage_type_id: st,
        mod_sequence: (0..mods).map(|_| rng.random_range(0..d.mod_types)).collect(),
        tool: format!("TOOL{}", rng.random_range(0..3)),
        recipe: format!("RCP{}", rng.random_range(0..3)),
        timestamp: rng.random_range(0..1_000_000),
        sensors: uniform(rng, d.sensors, scale),
        sensor_presence: (0..d.sensors).map(|_| u8::from(rng.random_bool(0.9))).collect(),
        labels: (0..d.kqis).map(|_| u8::from(rng.random_bool(0.5))).collect(),
        label_mask: (0..d.kqis).map(|_| u8::from(rng.random_bool(0.6))).collect(),
    }
}

pub fn random_sample(rng: &mut ChaCha8Rng, d: &Dims, len: usize, scale: f64) -> WindowedSample {
    WindowedSample {
        wafer_id: "W".into(),
        product_type: "P".into(),
        product_group: "G".into(),
        start: 0,
        stages: (0..len).map(|_| random_stage(rng, d, scale)).collect(),
    }
}

pub fn random_sequences(rng: &mut ChaCha8Rng, d: &Dims, n: usize, products: usize) -> Vec<WaferSequence> {
    (0..n)
        .map(|i| {
            let p = rng.random_range(0..products);
            let len = rng.random_range(1..=8);
            WaferSequence {
                wafer_id: format!("W{i:04}"),
                product_type: format!("PROD{p}"),
                product_group: format!("GRP{}", p % 2),
                stages: (0..len).map(|_| random_stage(rng, d, 2.0)).collect(),
            }
        })
        .collect()
}

pub fn vocabulary(d: &Dims) -> Vocabulary {
    Vocabulary {
        stage_types: (0..d.stage_types).map(|i| format!("STG{i}")).collect(),
        mod_types: (0..d.mod_types).map(|i| format!("MOD{i}")).collect(),
        sensors: (0..d.sensors).map(|i| format!("SENSOR{i}")).collect(),
        kqis: (0..d.kqis).map(|i| format!("KQI{i}")).collect(),
    }
}

pub fn toy_network(seed: u64, d: &Dims, hidden: usize, prototypes: usize) -> ModularNetwork {
    let cfg = ModularConfig {
        hidden,
        prototypes,
        ..ModularConfig::default()
    };
    let types: Vec<usize> = (0..d.stage_types).collect();
    ModularNetwork::new(cfg, d.sensors, d.kqis, d.mod_types, &types, false, seed).unwrap()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.values().iter().map(|v| v.to_bits()).collect()
}

// ---- core math ----

pub fn activations_bounded(x: f64) -> Check {
    let mut tape = Tape::new();
    let n = tape.constant(Tensor::vector(vec![x, -x, x * 1e3]));
    let t = tape.tanh(n);
    let s = tape.sigmoid(n);
    for v in tape.value(t).values() {
        prop_assert!(*v > -1.0 && *v < 1.0, "tanh({x}) = {v}");
    }
    for v in tape.value(s).values() {
        prop_assert!(*v > 0.0 && *v < 1.0, "sigmoid({x}) = {v}");
    }
    Ok(())
}

pub fn forward_is_deterministic(seed: u64) -> Check {
    let mut r = rng(seed);
    let sample = random_sample(&mut r, &TOY, 4, 2.0);
    let a = Network::Modular(toy_network(seed, &TOY, 4, 2));
    let b = Network::Modular(toy_network(seed, &TOY, 4, 2));
    prop_assert_eq!(a.params().checksum(), b.params().checksum());
    let (pa, pb) = (a.predict(&sample).unwrap(), b.predict(&sample).unwrap());
    prop_assert_eq!(bits(&pa.probs), bits(&pb.probs));
    prop_assert_eq!(bits(&pa.hidden), bits(&pb.hidden));
    Ok(())
}

// ---- prototypes ----

fn random_bank(r: &mut ChaCha8Rng, count: usize, sensors: usize, hidden: usize) -> (ParamSet, PrototypeBank) {
    let mut params = ParamSet::new();
    let masks = (0..count)
        .map(|_| Tensor::vector((0..sensors).map(|_| r.random_range(0.0..1.0)).collect()))
        .collect();
    let weights = (0..count)
        .map(|_| Tensor::matrix(hidden, sensors + hidden, uniform(r, hidden * (sensors + hidden), 1.0)).unwrap())
        .collect();
    let biases = (0..count).map(|_| Tensor::vector(uniform(r, hidden, 0.5))).collect();
    let bank = PrototypeBank::from_parts(&mut params, masks, weights, Some(biases), 1).unwrap();
    (params, bank)
}

pub fn sensor_locality(seed: u64, sensors: usize, hidden: usize) -> Check {
    let mut r = rng(seed);
    let (mut params, bank) = random_bank(&mut r, 1, sensors, hidden);
    let proto = &bank.prototypes[0];
    let j = r.random_range(0..sensors);
    params.get_mut(proto.mask).values_mut()[j] = 0.0;
    let x = uniform(&mut r, sensors, 3.0);
    let h = uniform(&mut r, hidden, 0.9);
    let mut x2 = x.clone();
    x2[j] += r.random_range(-100.0..100.0);
    let eval = |x: &[f64]| {
        let mut tape = Tape::new();
        let xn = tape.constant(Tensor::vector(x.to_vec()));
        let hn = tape.constant(Tensor::vector(h.clone()));
        let out = prototype_forward(&mut tape, &params, proto, xn, hn).unwrap();
        bits(tape.value(out))
    };
    prop_assert_eq!(eval(&x), eval(&x2));
    Ok(())
}

pub fn bank_rows_follow_permutation(seed: u64, count: usize) -> Check {
    let mut r = rng(seed);
    let (params, bank) = random_bank(&mut r, count, 3, 2);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut r);
    let pick = |id| params.get(id).clone();
    let mut permuted_params = ParamSet::new();
    let permuted = PrototypeBank::from_parts(
        &mut permuted_params,
        order.iter().map(|&i| pick(bank.prototypes[i].mask)).collect(),
        order.iter().map(|&i| pick(bank.prototypes[i].weight)).collect(),
        Some(order.iter().map(|&i| pick(bank.prototypes[i].bias.unwrap())).collect()),
        1,
    )
    .unwrap();
    let x = Tensor::vector(uniform(&mut r, 3, 2.0));
    let h = Tensor::vector(uniform(&mut r, 2, 0.9));
    let rows = |bank: &PrototypeBank, params: &ParamSet| {
        let mut tape = Tape::new();
        let (xn, hn) = (tape.constant(x.clone()), tape.constant(h.clone()));
        let out = bank.forward(&mut tape, params, xn, hn).unwrap();
        out.iter().map(|&n| bits(tape.value(n))).collect::<Vec<_>>()
    };
    let base = rows(&bank, &params);
    let perm = rows(&permuted, &permuted_params);
    for (k, &i) in order.iter().enumerate() {
        prop_assert_eq!(&perm[k], &base[i]);
    }
    Ok(())
}

pub fn one_step_moves_masks_and_weights(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut sample = random_sample(&mut r, &TOY, 3, 2.0);
    for s in &mut sample.stages {
        s.label_mask = vec![1; TOY.kqis];
        s.sensors.iter_mut().for_each(|v| *v += v.signum() * 0.1);
    }
    let mut net = Network::Modular(toy_network(seed, &TOY, 4, 2));
    let before = net.params().clone();
    let mut tape = Tape::new();
    let loss = full_sample_loss(&mut tape, &net, &sample, &LossConfig::measurement_only()).unwrap();
    prop_assert!(tape.scalar(loss) > 0.0);
    let grads = tape.backward(loss).unwrap().for_params(net.params());
    Sgd { lr: 0.1 }.step(net.params_mut(), &grads).unwrap();
    let modular = net.as_modular().unwrap();
    for p in &modular.bank.prototypes {
        for id in [p.mask, p.weight] {
            let moved = before.get(id).values() != net.params().get(id).values();
            prop_assert!(moved, "{} did not move", before.name(id));
        }
    }
    Ok(())
}

// ---- stage modules ----

pub fn selector_columns_are_one_hot(mods: Vec<usize>, mod_types: usize) -> Check {
    let sel = build_selector(&mods, mod_types).unwrap();
    prop_assert_eq!(sel.steps(), mods.len());
    for (r, &m) in mods.iter().enumerate() {
        let col = sel.column(r);
        prop_assert_eq!(col.values().iter().sum::<f64>(), 1.0);
        for (i, v) in col.values().iter().enumerate() {
            prop_assert_eq!(*v, if i == m { 1.0 } else { 0.0 });
        }
    }
    Ok(())
}

pub fn weight_columns_are_distributions(seed: u64, scale: f64) -> Check {
    let mut r = rng(seed);
    let net = toy_network(seed, &TOY, 4, 4);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(uniform(&mut r, TOY.sensors, scale)));
    let h = tape.constant(Tensor::vector(uniform(&mut r, 4, 0.99)));
    let st = r.random_range(0..TOY.stage_types);
    let w = net.inter_prototype_weights(&mut tape, st, x, h).unwrap();
    let w = tape.value(w);
    prop_assert_eq!(w.shape(), &[4, TOY.mod_types]);
    for c in 0..w.cols() {
        let col: Vec<f64> = (0..w.rows()).map(|i| w.at(i, c)).collect();
        prop_assert!(col.iter().all(|v| *v >= 0.0));
        prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    Ok(())
}

pub fn hidden_states_stay_open(seed: u64, scale: f64) -> Check {
    let mut r = rng(seed);
    let net = Network::Modular(toy_network(seed, &TOY, 5, 2));
    let sample = random_sample(&mut r, &TOY, 6, scale);
    let pred = net.predict(&sample).unwrap();
    prop_assert!(pred.hidden.values().iter().all(|v| *v > -1.0 && *v < 1.0));
    prop_assert!(pred.probs.values().iter().all(|v| *v > 0.0 && *v < 1.0));
    Ok(())
}

/// Same stage type means the same module: one module per type, and editing
/// that module changes every stage of the type.
pub fn stage_types_share_one_module(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut net = toy_network(seed, &TOY, 4, 2);
    prop_assert_eq!(net.modules.len(), TOY.stage_types);
    let names: BTreeSet<String> = net
        .params
        .ids()
        .map(|id| net.params.name(id).to_string())
        .filter(|n| n.starts_with("stage"))
        .collect();
    prop_assert_eq!(names.len(), 4 * TOY.stage_types);
    let st = r.random_range(0..TOY.stage_types);
    let xs = [uniform(&mut r, TOY.sensors, 1.0), uniform(&mut r, TOY.sensors, 1.0)];
    let run = |net: &ModularNetwork| {
        xs.iter()
            .map(|x| {
                let mut tape = Tape::new();
                let xn = tape.constant(Tensor::vector(x.clone()));
                let h = tape.constant(Tensor::zeros(&[4]));
                let out = net.stage_forward(&mut tape, st, &[0, 1, 2], xn, h).unwrap();
                bits(tape.value(out.hidden))
            })
            .collect::<Vec<_>>()
    };
    let before = run(&net);
    let bias = net.module(st).unwrap().output.bias;
    net.params.get_mut(bias).values_mut()[0] += 1.0;
    let after = run(&net);
    prop_assert_ne!(&before[0], &after[0]);
    prop_assert_ne!(&before[1], &after[1]);
    Ok(())
}

// ---- losses ----

fn l1_of(net: &Network, sample: &WindowedSample) -> f64 {
    let mut tape = Tape::new();
    let trace = net.forward(&mut tape, sample).unwrap();
    let probs: Vec<_> = trace.stages.iter().map(|s| s.probs).collect();
    let labels = modfab::losses::labels_of(sample).unwrap();
    let mask = LabelMask::from_sample(sample).unwrap();
    let l = measurement_loss(&mut tape, &probs, &labels, &mask, None).unwrap();
    tape.scalar(l)
}

pub fn masked_labels_are_invisible(seed: u64) -> Check {
    let mut r = rng(seed);
    let net = Network::Modular(toy_network(seed, &TOY, 4, 2));
    let sample = random_sample(&mut r, &TOY, 4, 2.0);
    let mut flipped = sample.clone();
    for s in &mut flipped.stages {
        for (l, m) in s.labels.iter_mut().zip(&s.label_mask) {
            if *m == 0 {
                *l = 1 - *l;
            }
        }
    }
    let (a, b) = (l1_of(&net, &sample), l1_of(&net, &flipped));
    prop_assert_eq!(a.to_bits(), b.to_bits());
    prop_assert!(a >= 0.0);
    Ok(())
}

pub fn margin_loss_properties(dists: Vec<f64>, target: usize, margin: f64) -> Check {
    let target = target % dists.len();
    let mut tape = Tape::new();
    let d = tape.constant(Tensor::vector(dists.clone()));
    let (dce, mcl) = proximity_terms(&mut tape, d, target, 1.0, margin).unwrap();
    prop_assert!(tape.scalar(dce) >= 0.0);
    let mcl = tape.scalar(mcl.unwrap());
    prop_assert!(mcl >= 0.0);
    let separated = dists
        .iter()
        .enumerate()
        .all(|(c, v)| c == target || dists[target] + margin <= *v);
    if separated {
        prop_assert_eq!(mcl, 0.0);
    }
    Ok(())
}

pub fn distinction_symmetric_and_scale_free(seed: u64, count: usize, factor: f64) -> Check {
    let mut r = rng(seed);
    let (params, bank) = random_bank(&mut r, count, 3, 2);
    let value = |params: &ParamSet, bank: &PrototypeBank| {
        let mut tape = Tape::new();
        let l = distinction_loss(&mut tape, params, bank, false).unwrap();
        tape.scalar(l)
    };
    let base = value(&params, &bank);
    prop_assert!(base.abs() <= 2.0 + 1e-12);

    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut r);
    let reordered = PrototypeBank {
        prototypes: order.iter().map(|&i| bank.prototypes[i].clone()).collect(),
        ..bank.clone()
    };
    prop_assert!((value(&params, &reordered) - base).abs() <= 1e-12);

    let mut scaled = params.clone();
    let victim = bank.prototypes[r.random_range(0..count)].weight;
    scaled.get_mut(victim).values_mut().iter_mut().for_each(|v| *v *= factor);
    prop_assert!((value(&scaled, &bank) - base).abs() <= 1e-12);
    Ok(())
}

// ---- data pipeline ----

pub fn window_law(t: usize, w: usize) -> Check {
    let mut r = rng((t * 31 + w) as u64);
    let seq = WaferSequence {
        wafer_id: "W".into(),
        product_type: "P".into(),
        product_group: "G".into(),
        stages: (0..t).map(|_| random_stage(&mut r, &TOY, 1.0)).collect(),
    };
    let windows = make_windows(&seq, w).unwrap();
    prop_assert_eq!(windows.len(), (t + 1).saturating_sub(w));
    for (i, win) in windows.iter().enumerate() {
        prop_assert_eq!(win.start, i);
        prop_assert_eq!(&win.stages[..], &seq.stages[i..i + w]);
    }
    Ok(())
}

fn random_finite(r: &mut ChaCha8Rng) -> f64 {
    loop {
        let v = f64::from_bits(r.random());
        if v.is_finite() {
            return v;
        }
    }
}

pub fn sequence_file_round_trip(seed: u64) -> Check {
    let mut r = rng(seed);
    let n = r.random_range(0..6);
    let mut sequences = random_sequences(&mut r, &TOY, n, 4);
    for s in sequences.iter_mut().flat_map(|s| s.stages.iter_mut()) {
        s.sensors.iter_mut().for_each(|v| *v = random_finite(&mut r));
        s.process = format!("{}\t\"ünï\"", s.process);
    }
    let data = Dataset {
        vocabulary: vocabulary(&TOY),
        sequences,
    };
    let mut buf = Vec::new();
    write_sequences(&mut buf, &data).unwrap();
    let back = read_sequences(buf.as_slice()).unwrap();
    prop_assert_eq!(&back, &data);
    for (a, b) in back.sequences.iter().flat_map(|s| &s.stages).zip(data.sequences.iter().flat_map(|s| &s.stages)) {
        prop_assert_eq!(bits(&Tensor::vector(a.sensors.clone())), bits(&Tensor::vector(b.sensors.clone())));
    }
    Ok(())
}

pub fn random_table(r: &mut ChaCha8Rng, n: usize, d: usize, missing: f64) -> Vec<Vec<Option<f64>>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| (!r.random_bool(missing)).then(|| r.random_range(-5.0..5.0)))
                .collect()
        })
        .collect()
}

pub fn imputation_keeps_observed_cells(seed: u64, n: usize, d: usize, k: usize) -> Check {
    let mut r = rng(seed);
    let table = random_table(&mut r, n, d, 0.3);
    let out = knn_impute(&table, k).unwrap();
    for (row, new) in table.iter().zip(&out.rows) {
        for (c, (a, b)) in row.iter().zip(new).enumerate() {
            match a {
                Some(v) => prop_assert_eq!(Some(v.to_bits()), b.map(f64::to_bits)),
                None => prop_assert_eq!(b.is_some(), !out.dropped.contains(&c)),
            }
        }
    }
    Ok(())
}

pub fn generalized_splits_are_disjoint(seed: u64, by_group: bool) -> Check {
    let mut r = rng(seed);
    let sequences = random_sequences(&mut r, &TOY, 30, 6);
    let mode = if by_group {
        SplitMode::ByProductGroup
    } else {
        SplitMode::ByProductType
    };
    let keys: Vec<String> = sequences
        .iter()
        .map(|s| mode.key(s).unwrap().to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    prop_assume!(keys.len() >= 2);
    let n = r.random_range(1..keys.len());
    let chosen: BTreeSet<String> = keys.choose_multiple(&mut r, n).cloned().collect();
    let (train, eval) = split_dataset(&sequences, mode, &Holdout::Values(chosen.clone()), seed).unwrap();
    let train_keys: BTreeSet<&str> = train.iter().map(|s| mode.key(s).unwrap()).collect();
    let eval_keys: BTreeSet<&str> = eval.iter().map(|s| mode.key(s).unwrap()).collect();
    prop_assert!(train_keys.is_disjoint(&eval_keys));
    prop_assert!(eval_keys.iter().all(|k| chosen.contains(*k)));
    prop_assert_eq!(train.len() + eval.len(), sequences.len());
    Ok(())
}

// ---- oracles ----

/// Pairwise AUC: each (positive, negative) pair scores 1 when ordered, 1/2 when tied.
pub fn auc_oracle(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut doubled = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 0 {
                doubled += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    (pos > 0 && neg > 0).then(|| doubled as f64 / (2 * pos * neg) as f64)
}

pub fn auc_matches_oracle(seed: u64, n: usize, levels: u32) -> Check {
    let mut r = rng(seed);
    let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..levels)) / 7.0).collect();
    let labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.4))).collect();
    let got = auc(&scores, &labels).unwrap();
    prop_assert_eq!(got.map(f64::to_bits), auc_oracle(&scores, &labels).map(f64::to_bits));
    Ok(())
}

/// Brute-force KNN fill following the documented rule, written without
/// sorting: neighbors are picked one at a time as the closest remaining row.
pub fn knn_oracle(rows: &[Vec<Option<f64>>], k: usize) -> Vec<Vec<Option<f64>>> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![None; d];
    let mut sd = vec![1.0; d];
    for c in 0..d {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r[c]).collect();
        if vals.is_empty() {
            continue;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        mean[c] = Some(m);
        if var.sqrt() > 1e-12 {
            sd[c] = var.sqrt();
        }
    }
    let kept = mean.iter().filter(|m| m.is_some()).count() as f64;
    let dist = |a: usize, b: usize| -> Option<f64> {
        let shared: Vec<f64> = (0..d)
            .filter_map(|c| match (rows[a][c], rows[b][c], mean[c]) {
                (Some(x), Some(y), Some(m)) => Some(((x - m) / sd[c] - (y - m) / sd[c]).powi(2)),
                _ => None,
            })
            .collect();
        (!shared.is_empty()).then(|| shared.iter().sum::<f64>().sqrt() * (kept / shared.len() as f64).sqrt())
    };
    let mut out = rows.to_vec();
    for i in 0..n {
        for c in 0..d {
            if rows[i][c].is_some() || mean[c].is_none() {
                continue;
            }
            let mut candidates: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i && rows[j][c].is_some())
                .filter_map(|j| dist(i, j).map(|dd| (dd, j)))
                .collect();
            let mut picked = Vec::new();
            while picked.len() < k && !candidates.is_empty() {
                let best = (0..candidates.len())
                    .min_by(|&a, &b| {
                        candidates[a]
                            .0
                            .partial_cmp(&candidates[b].0)
                            .unwrap()
                            .then(candidates[a].1.cmp(&candidates[b].1))
                    })
                    .unwrap();
                picked.push(rows[candidates.swap_remove(best).1][c].unwrap());
            }
            out[i][c] = Some(if picked.is_empty() {
                mean[c].unwrap()
            } else {
                picked.iter().sum::<f64>() / picked.len() as f64
            });
        }
    }
    out
}

pub fn knn_matches_oracle(seed: u64) -> Check {
    let mut r = rng(seed);
    let n = r.random_range(1..=20);
    let d = r.random_range(1..=6);
    let k = r.random_range(1..=6);
    let missing = r.random_range(0.0..0.6);
    let table = random_table(&mut r, n, d, missing);
    let got = knn_impute(&table, k).unwrap().rows;
    let want = knn_oracle(&table, k);
    for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
        match (a, b) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}"),
            (x, y) => prop_assert_eq!(x, y),
        }
    }
    Ok(())
}

// ---- synthetic world and training ----

pub fn small_world(seed: u64) -> WorldConfig {
    WorldConfig {
        n_stage_types: 6,
        n_products: 6,
        n_groups: 2,
        stages_per_product: (3, 4),
        pilot_wafers: 400,
        seed,
        ..WorldConfig::default()
    }
}

pub fn synth_regenerates_identically(seed: u64) -> Check {
    let cfg = small_world(seed);
    let (a, b) = (gen_world(&cfg).unwrap(), gen_world(&cfg).unwrap());
    prop_assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let (da, db) = (gen_dataset(&a, 30, seed).unwrap(), gen_dataset(&b, 30, seed).unwrap());
    prop_assert_eq!(&da.transactions, &db.transactions);
    prop_assert_eq!(&da.truth, &db.truth);
    Ok(())
}

pub fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        window: 2,
        modular: ModularConfig {
            hidden: 4,
            prototypes: 2,
            ..ModularConfig::default()
        },
        seed,
        ..TrainConfig::default()
    }
}

pub fn training_is_deterministic(seed: u64) -> Check {
    let mut r = rng(seed);
    let sequences = random_sequences(&mut r, &TOY, 12, 3);
    let vocab = vocabulary(&TOY);
    let cfg = tiny_train_config(seed);
    let a = fit(&sequences, &vocab, &cfg).unwrap();
    let b = fit(&sequences, &vocab, &cfg).unwrap();
    prop_assert_eq!(a.network.params().checksum(), b.network.params().checksum());
    prop_assert_eq!(&a.history, &b.history);
    Ok(())
}
