//! Synthetic compositional manufacturing world.
//!
//! A small latent state is rolled through each wafer's stages. Every mod is a
//! fixed blend of shared masked base functions, every stage type runs a mod
//! template with a stage-specific bias, and every product is a sequence of
//! stage types drawn from its group's pool. Sensors read the state before a
//! stage; KQI labels threshold fixed projections of the state after it.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MetaColumns, SchemaConfig, Transaction};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub sensors: usize,
    pub kqis: usize,
    pub latent: usize,
    pub base_functions: usize,
    pub n_stage_types: usize,
    pub n_mod_types: usize,
    pub n_products: usize,
    pub n_groups: usize,
    /// Inclusive range.
    pub stages_per_product: (usize, usize),
    /// Inclusive range of template length per stage type.
    pub mods_per_stage: (usize, usize),
    /// Probability of flipping each emitted label.
    pub label_noise: f64,
    pub sensor_noise: f64,
    pub process_noise: f64,
    /// Standard deviation of the initial latent state.
    pub init_spread: f64,
    /// Probability that a template mod runs one extra time on a wafer.
    pub repeat_prob: f64,
    /// Probability that a KQI is measured at a stage.
    pub measure_prob: f64,
    /// Probability that a sensor reading is randomly lost.
    pub env_missing_prob: f64,
    /// Probability that a stage type's second tool lacks one sensor entirely.
    pub systematic_missing_prob: f64,
    /// Target label base rates are drawn from this range.
    pub base_rate: (f64, f64),
    pub pilot_wafers: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            sensors: 8,
            kqis: 4,
            latent: 8,
            base_functions: 6,
            n_stage_types: 10,
            n_mod_types: 4,
            n_products: 12,
            n_groups: 3,
            stages_per_product: (5, 7),
            mods_per_stage: (1, 3),
            label_noise: 0.05,
            sensor_noise: 0.05,
            process_noise: 0.02,
            init_spread: 0.6,
            repeat_prob: 0.3,
            measure_prob: 0.7,
            env_missing_prob: 0.02,
            systematic_missing_prob: 0.3,
            base_rate: (0.3, 0.5),
            pilot_wafers: 10_000,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if [self.sensors, self.kqis, self.latent, self.base_functions, self.n_stage_types, self.n_mod_types]
            .contains(&0)
        {
            return fail("world dimensions must be positive");
        }
        if self.n_groups == 0 || self.n_products < 2 * self.n_groups {
            return fail("need n_groups >= 1 and n_products >= 2 * n_groups");
        }
        let (lo, hi) = self.stages_per_product;
        if lo == 0 || lo > hi || hi > self.n_stage_types {
            return fail("stages_per_product must satisfy 1 <= lo <= hi <= n_stage_types");
        }
        let (mlo, mhi) = self.mods_per_stage;
        if mlo == 0 || mlo > mhi {
            return fail("mods_per_stage must satisfy 1 <= lo <= hi");
        }
        if !(0.0..=0.2).contains(&self.label_noise) {
            return fail("label_noise must lie in [0, 0.2]");
        }
        let probs = [
            self.repeat_prob,
            self.measure_prob,
            self.env_missing_prob,
            self.systematic_missing_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return fail("probabilities must lie in [0, 1]");
        }
        if [self.sensor_noise, self.process_noise, self.init_spread].iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return fail("noise levels must be finite and nonnegative");
        }
        let (blo, bhi) = self.base_rate;
        if !(0.0 < blo && blo <= bhi && bhi < 1.0) {
            return fail("base_rate must satisfy 0 < lo <= hi < 1");
        }
        if self.pilot_wafers == 0 {
            return fail("pilot_wafers must be positive");
        }
        Ok(())
    }

    /// Transaction schema of the emitted files.
    pub fn schema(&self) -> SchemaConfig {
        SchemaConfig {
            meta: MetaColumns::default(),
            sensors: (1..=self.sensors).map(|i| format!("SENSOR{i:02}")).collect(),
            measurements: (1..=self.kqis).map(|k| format!("KQI{k}")).collect(),
        }
    }
}

/// `z ↦ A (z ∘ mask) + offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseFunction {
    pub matrix: Vec<Vec<f64>>,
    pub mask: Vec<u8>,
    pub offset: Vec<f64>,
}

impl BaseFunction {
    fn apply_into(&self, z: &[f64], weight: f64, acc: &mut [f64]) {
        for (i, row) in self.matrix.iter().enumerate() {
            let mut s = self.offset[i];
            for ((a, zj), m) in row.iter().zip(z).zip(&self.mask) {
                if *m == 1 {
                    s += a * zj;
                }
            }
            acc[i] += weight * s;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageType {
    pub name: String,
    pub template: Vec<usize>,
    pub bias: Vec<f64>,
    /// Sensor never reported by this stage type's second tool.
    pub tool_b_missing: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub name: String,
    pub group: usize,
    pub stages: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub base: Vec<BaseFunction>,
    /// Per mod type, the blend weight of every base function.
    pub mods: Vec<Vec<f64>>,
    pub stage_types: Vec<StageType>,
    pub products: Vec<Product>,
    pub groups: Vec<String>,
    /// `[D × latent]` sensor readout.
    pub readout: Vec<Vec<f64>>,
    /// `[K × latent]` KQI projections.
    pub kqi_directions: Vec<Vec<f64>>,
    pub thresholds: Vec<f64>,
}

/// Hidden per-wafer quantities needed to replay a generated wafer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaferTruth {
    pub wafer_id: String,
    pub product: usize,
    pub initial_state: Vec<f64>,
    /// Executed mod ids per stage.
    pub mods: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub transactions: Vec<Transaction>,
    pub truth: Vec<WaferTruth>,
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn wafer_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const PILOT_STREAM: u64 = 1 << 40;

pub fn gen_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = cfg.latent;

    let base: Vec<BaseFunction> = (0..cfg.base_functions)
        .map(|_| {
            let active = l.div_ceil(2);
            let chosen = index::sample(&mut rng, l, active);
            let mut mask = vec![0u8; l];
            for i in chosen.iter() {
                mask[i] = 1;
            }
            let gain = 1.5 / (active as f64).sqrt();
            BaseFunction {
                matrix: (0..l).map(|_| normal_vec(&mut rng, l, gain)).collect(),
                mask,
                offset: normal_vec(&mut rng, l, 0.3),
            }
        })
        .collect();

    let mods: Vec<Vec<f64>> = (0..cfg.n_mod_types)
        .map(|_| {
            let mut alpha = vec![0.0; cfg.base_functions];
            for b in index::sample(&mut rng, cfg.base_functions, cfg.base_functions.min(2)).iter() {
                alpha[b] = rng.random_range(0.5..1.0);
            }
            alpha
        })
        .collect();

    let stage_types: Vec<StageType> = (0..cfg.n_stage_types)
        .map(|j| {
            let len = rng.random_range(cfg.mods_per_stage.0..=cfg.mods_per_stage.1);
            StageType {
                name: format!("STG{:02}", j + 1),
                template: (0..len).map(|_| rng.random_range(0..cfg.n_mod_types)).collect(),
                bias: normal_vec(&mut rng, l, 0.5),
                tool_b_missing: rng
                    .random_bool(cfg.systematic_missing_prob)
                    .then(|| rng.random_range(0..cfg.sensors)),
            }
        })
        .collect();

    let products = assign_products(cfg, &mut rng)?;
    let readout = (0..cfg.sensors).map(|_| normal_vec(&mut rng, l, 1.0 / (l as f64).sqrt())).collect();
    let kqi_directions = (0..cfg.kqis)
        .map(|_| {
            let v = normal_vec(&mut rng, l, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let targets: Vec<f64> = (0..cfg.kqis).map(|_| rng.random_range(cfg.base_rate.0..=cfg.base_rate.1)).collect();

    let mut world = World {
        config: cfg.clone(),
        base,
        mods,
        stage_types,
        products,
        groups: (1..=cfg.n_groups).map(|g| format!("GRP{g}")).collect(),
        readout,
        kqi_directions,
        thresholds: vec![0.0; cfg.kqis],
    };
    world.thresholds = world.calibrate(&targets);
    Ok(world)
}

/// Group pools and product stage sequences, retried until every stage type
/// serves at least two products and every group's stage types also occur
/// outside the group.
fn assign_products(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Product>> {
    let g = cfg.n_groups;
    for _ in 0..1000 {
        let mut pools: Vec<Vec<usize>> = vec![Vec::new(); g];
        for j in 0..cfg.n_stage_types {
            let mut copies = g.min(2);
            if copies < g && rng.random_bool(0.25) {
                copies += 1;
            }
            for grp in index::sample(rng, g, copies).iter() {
                pools[grp].push(j);
            }
        }
        if pools.iter().any(|p| p.len() < cfg.stages_per_product.0) {
            continue;
        }
        let mut order: Vec<usize> = (0..cfg.n_products).collect();
        order.shuffle(rng);
        let mut group_of = vec![0; cfg.n_products];
        for (slot, p) in order.into_iter().enumerate() {
            group_of[p] = slot % g;
        }
        let products: Vec<Product> = (0..cfg.n_products)
            .map(|p| {
                let pool = &pools[group_of[p]];
                let hi = cfg.stages_per_product.1.min(pool.len());
                let len = rng.random_range(cfg.stages_per_product.0..=hi);
                let stages = index::sample(rng, pool.len(), len).iter().map(|i| pool[i]).collect();
                Product {
                    name: format!("PROD{:02}", p + 1),
                    group: group_of[p],
                    stages,
                }
            })
            .collect();
        if structure_ok(&products, cfg.n_stage_types, g) {
            return Ok(products);
        }
    }
    Err(Error::Config(
        "could not build products where every stage type is shared; widen stages_per_product or add products".into(),
    ))
}

fn structure_ok(products: &[Product], n_stage_types: usize, groups: usize) -> bool {
    let mut users = vec![0usize; n_stage_types];
    for p in products {
        for &j in &p.stages {
            users[j] += 1;
        }
    }
    if users.iter().any(|&u| u < 2) {
        return false;
    }
    if groups < 2 {
        return true;
    }
    (0..groups).all(|grp| {
        let inside: BTreeSet<usize> = products.iter().filter(|p| p.group == grp).flat_map(|p| p.stages.clone()).collect();
        let outside: BTreeSet<usize> = products.iter().filter(|p| p.group != grp).flat_map(|p| p.stages.clone()).collect();
        inside.is_subset(&outside)
    })
}

/// One simulated wafer before emission.
struct Rollout {
    initial: Vec<f64>,
    mods: Vec<Vec<usize>>,
    /// State entering each stage.
    before: Vec<Vec<f64>>,
    /// State leaving each stage.
    after: Vec<Vec<f64>>,
}

impl World {
    fn apply_mod(&self, z: &[f64], m: usize, stage: usize) -> Vec<f64> {
        let mut acc = self.stage_types[stage].bias.clone();
        for (b, f) in self.base.iter().enumerate() {
            let a = self.mods[m][b];
            if a != 0.0 {
                f.apply_into(z, a, &mut acc);
            }
        }
        acc.into_iter().map(f64::tanh).collect()
    }

    /// Runs `mods` of stage type `stage` on `z`, adding process noise after
    /// each mod when an rng is supplied.
    pub fn apply_stage(&self, z: &[f64], stage: usize, mods: &[usize], mut noise: Option<&mut ChaCha8Rng>) -> Vec<f64> {
        let mut z = z.to_vec();
        for &m in mods {
            z = self.apply_mod(&z, m, stage);
            if let Some(rng) = noise.as_deref_mut() {
                for v in &mut z {
                    *v += self.config.process_noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        z
    }

    fn executed_mods(&self, stage: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::new();
        for &m in &self.stage_types[stage].template {
            out.push(m);
            if rng.random_bool(self.config.repeat_prob) {
                out.push(m);
            }
        }
        out
    }

    fn rollout(&self, product: usize, rng: &mut ChaCha8Rng) -> Rollout {
        let initial = normal_vec(rng, self.config.latent, self.config.init_spread);
        let mut z = initial.clone();
        let mut r = Rollout {
            initial,
            mods: Vec::new(),
            before: Vec::new(),
            after: Vec::new(),
        };
        for &stage in &self.products[product].stages {
            let mods = self.executed_mods(stage, rng);
            r.before.push(z.clone());
            z = self.apply_stage(&z, stage, &mods, Some(&mut *rng));
            r.after.push(z.clone());
            r.mods.push(mods);
        }
        r
    }

    /// Raw KQI projections `u_k · z`.
    pub fn projections(&self, z: &[f64]) -> Vec<f64> {
        self.kqi_directions.iter().map(|u| u.iter().zip(z).map(|(a, b)| a * b).sum()).collect()
    }

    /// Noise-free label scores (projection minus threshold) after every stage.
    pub fn replay(&self, truth: &WaferTruth) -> Vec<Vec<f64>> {
        let mut z = truth.initial_state.clone();
        let mut out = Vec::new();
        for (&stage, mods) in self.products[truth.product].stages.iter().zip(&truth.mods) {
            z = self.apply_stage(&z, stage, mods, None);
            out.push(self.projections(&z).iter().zip(&self.thresholds).map(|(p, t)| p - t).collect());
        }
        out
    }

    /// Bisects per-KQI thresholds so that the fraction of stages above the
    /// threshold on a pilot draw matches `targets`.
    fn calibrate(&self, targets: &[f64]) -> Vec<f64> {
        let cfg = &self.config;
        let n_products = self.products.len();
        let projections: Vec<Vec<f64>> = (0..cfg.pilot_wafers)
            .into_par_iter()
            .flat_map_iter(|i| {
                let mut rng = wafer_rng(cfg.seed, PILOT_STREAM + i as u64);
                let product = rng.random_range(0..n_products);
                self.rollout(product, &mut rng).after.into_iter().map(|z| self.projections(&z))
            })
            .collect();
        (0..cfg.kqis)
            .map(|k| {
                let vals: Vec<f64> = projections.iter().map(|p| p[k]).collect();
                let rate = |t: f64| vals.iter().filter(|&&v| v > t).count() as f64 / vals.len() as f64;
                let (mut lo, mut hi) = (-(cfg.latent as f64).sqrt() - 1.0, (cfg.latent as f64).sqrt() + 1.0);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if rate(mid) > targets[k] {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            })
            .collect()
    }

    /// Number of products using each stage type.
    pub fn stage_reuse(&self) -> Vec<usize> {
        let mut users = vec![0; self.stage_types.len()];
        for p in &self.products {
            for &j in &p.stages {
                users[j] += 1;
            }
        }
        users
    }

    /// Stage-type sets of two products compared by Jaccard overlap.
    pub fn product_similarity(&self, a: usize, b: usize) -> f64 {
        let sa: BTreeSet<usize> = self.products[a].stages.iter().copied().collect();
        let sb: BTreeSet<usize> = self.products[b].stages.iter().copied().collect();
        let union = sa.union(&sb).count();
        if union == 0 {
            return 0.0;
        }
        sa.intersection(&sb).count() as f64 / union as f64
    }

    pub fn product_index(&self, name: &str) -> Option<usize> {
        self.products.iter().position(|p| p.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let world: World = serde_json::from_str(text).map_err(|e| Error::Format(format!("world file: {e}")))?;
        world.config.validate()?;
        Ok(world)
    }
}

/// Emits `n_wafers` wafers as transaction rows: one row per executed mod,
/// sensors on a stage's first row, measurements on its last.
pub fn gen_dataset(world: &World, n_wafers: usize, seed: u64) -> Result<SynthData> {
    if n_wafers == 0 {
        return Err(Error::Contract("gen_dataset needs at least one wafer".into()));
    }
    let cfg = &world.config;
    let sensor_noise = Normal::new(0.0, cfg.sensor_noise).map_err(|e| Error::Config(e.to_string()))?;
    let per_wafer: Vec<(Vec<Transaction>, WaferTruth)> = (0..n_wafers)
        .into_par_iter()
        .map(|i| {
            let mut rng = wafer_rng(seed, i as u64);
            let product = rng.random_range(0..world.products.len());
            let roll = world.rollout(product, &mut rng);
            let p = &world.products[product];
            let wafer_id = format!("W{i:06}");
            let start = 1_700_000_000_000i64 + i as i64 * 600_000;
            let mut rows = Vec::new();
            for (pos, &stage) in p.stages.iter().enumerate() {
                let st = &world.stage_types[stage];
                let tool_b = rng.random_bool(0.5);
                let sensors: Vec<Option<f64>> = world
                    .readout
                    .iter()
                    .enumerate()
                    .map(|(s, r)| {
                        let clean: f64 = r.iter().zip(&roll.before[pos]).map(|(a, b)| a * b).sum();
                        let value = clean + sensor_noise.sample(&mut rng);
                        let lost = rng.random_bool(cfg.env_missing_prob);
                        let systematic = tool_b && st.tool_b_missing == Some(s);
                        (!lost && !systematic).then_some(value)
                    })
                    .collect();
                let scores = world.projections(&roll.after[pos]);
                let measurements: Vec<Option<u8>> = scores
                    .iter()
                    .zip(&world.thresholds)
                    .map(|(v, t)| {
                        let label = u8::from(v > t) ^ u8::from(rng.random_bool(cfg.label_noise));
                        rng.random_bool(cfg.measure_prob).then_some(label)
                    })
                    .collect();
                let mods = &roll.mods[pos];
                for (r, &m) in mods.iter().enumerate() {
                    rows.push(Transaction {
                        wafer_id: wafer_id.clone(),
                        timestamp: start + pos as i64 * 3_600_000 + r as i64 * 60_000,
                        process: format!("PROC{:02}", pos + 1),
                        step: format!("STP{:02}", stage + 1),
                        stage_type: st.name.clone(),
                        mod_label: format!("MOD{:02}", m + 1),
                        recipe: format!("RCP{:02}", stage + 1),
                        tool: format!("TOOL{:02}{}", stage + 1, if tool_b { 'B' } else { 'A' }),
                        product_type: p.name.clone(),
                        product_group: world.groups[p.group].clone(),
                        sensors: if r == 0 { sensors.clone() } else { vec![None; cfg.sensors] },
                        measurements: if r + 1 == mods.len() {
                            measurements.clone()
                        } else {
                            vec![None; cfg.kqis]
                        },
                    });
                }
            }
            let truth = WaferTruth {
                wafer_id,
                product,
                initial_state: roll.initial,
                mods: roll.mods,
            };
            (rows, truth)
        })
        .collect();
    let mut out = SynthData {
        transactions: Vec::new(),
        truth: Vec::with_capacity(n_wafers),
    };
    for (rows, truth) in per_wafer {
        out.transactions.extend(rows);
        out.truth.push(truth);
    }
    Ok(out)
}
