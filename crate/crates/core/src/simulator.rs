//! Round-loop orchestration: clients, adversaries, aggregation, metric capture.
//!
//! An experiment is described by an [`ExperimentConfig`], which pins the dataset,
//! the model, the local training recipe, the aggregation rule, and the adversaries.
//! `run_experiment` builds everything from the master seed and plays `rounds`
//! federated iterations; every derived random stream is keyed by a label, a client
//! id, and a round number, so the (config, seed) pair fixes each artifact byte.
//!
//! Honest clients hold one class each (the non-IID partition). An adversary owns a
//! block of sybil clients that either train on relabeled source-class data
//! (label flipping, optionally divided among the sybils) or play the mimicry pair:
//! one copycat resubmitting an honest victim's update byte-for-byte while the
//! remaining sybils carry the poison.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate, update_model, AggregationDetail, AggregatorKind, UpdateHistory,
};
use crate::data::{
    generate_synthetic, load_idx, partition_non_iid, split_class_indices, Dataset, Shard,
};
use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::metrics::{
    attack_success_rate, estimated_poisoning_rate, true_poisoning_rate, AttackReport,
};
use crate::model::{
    evaluate, init_model, local_train, ClientUpdate, LocalTrainConfig, ModelArch, ModelState,
};
use crate::ClientId;

// ---------------------------------------------------------------------------
// Seed derivation
// ---------------------------------------------------------------------------

/// splitmix64 finalizer: a cheap, well-mixed 64-bit permutation.
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// Derives the seed for one random stream from the master seed.
///
/// The label (FNV-1a over its bytes) separates the major streams — "data",
/// "init", "local", "poison" — and the client id and round are folded in through
/// successive splitmix64 finalizations, so distinct (label, client, round)
/// triples practically never collide.
pub fn derive_seed(master: u64, label: &str, client: u64, round: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in label.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut s = mix(master ^ h);
    s = mix(s ^ client);
    s = mix(s ^ round);
    s
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Where the experiment's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataConfig {
    /// Seeded Gaussian class blobs rescaled to [0, 1]; split 80/20 per class.
    Synthetic { classes: usize, input_dim: usize, per_class: usize, spread: f64 },
    /// Big-endian image/label file pairs (the classic handwritten-digit layout).
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
        limit_per_class: Option<usize>,
    },
}

pub const DEFAULT_CLASSES: usize = 10;
pub const DEFAULT_INPUT_DIM: usize = 32;
pub const DEFAULT_PER_CLASS: usize = 100;
pub const DEFAULT_SPREAD: f64 = 0.15;

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            classes: DEFAULT_CLASSES,
            input_dim: DEFAULT_INPUT_DIM,
            per_class: DEFAULT_PER_CLASS,
            spread: DEFAULT_SPREAD,
        }
    }
}

impl<'de> Deserialize<'de> for DataConfig {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        use serde::de::Error as DeError;
        let value = serde_json::Value::deserialize(deserializer)?;
        let serde_json::Value::Object(mut map) = value else {
            return Err(DeError::custom(
                "data must be an object with a \"source\" of \"synthetic\" or \"idx\"",
            ));
        };
        let source = match map.remove("source") {
            Some(serde_json::Value::String(s)) => s,
            _ => return Err(DeError::custom("data needs a string \"source\" field")),
        };
        let rest = serde_json::Value::Object(map);
        let parsed = match source.as_str() {
            "synthetic" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct Fields {
                    #[serde(default = "d_classes")]
                    classes: usize,
                    #[serde(default = "d_input_dim")]
                    input_dim: usize,
                    #[serde(default = "d_per_class")]
                    per_class: usize,
                    #[serde(default = "d_spread")]
                    spread: f64,
                }
                fn d_classes() -> usize {
                    DEFAULT_CLASSES
                }
                fn d_input_dim() -> usize {
                    DEFAULT_INPUT_DIM
                }
                fn d_per_class() -> usize {
                    DEFAULT_PER_CLASS
                }
                fn d_spread() -> f64 {
                    DEFAULT_SPREAD
                }
                serde_json::from_value::<Fields>(rest).map(|x| DataConfig::Synthetic {
                    classes: x.classes,
                    input_dim: x.input_dim,
                    per_class: x.per_class,
                    spread: x.spread,
                })
            }
            "idx" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct Fields {
                    train_images: String,
                    train_labels: String,
                    test_images: String,
                    test_labels: String,
                    #[serde(default)]
                    limit_per_class: Option<usize>,
                }
                serde_json::from_value::<Fields>(rest).map(|x| DataConfig::Idx {
                    train_images: x.train_images,
                    train_labels: x.train_labels,
                    test_images: x.test_images,
                    test_labels: x.test_labels,
                    limit_per_class: x.limit_per_class,
                })
            }
            other => {
                return Err(DeError::custom(format!(
                    "unknown data source {other:?}; expected \"synthetic\" or \"idx\""
                )))
            }
        };
        parsed.map_err(|e| DeError::custom(format!("data ({source}): {e}")))
    }
}

/// Model shape knobs (input/output dims come from the dataset).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// 0 = softmax regression; otherwise one ReLU hidden layer of this width.
    #[serde(default)]
    pub hidden_dim: usize,
}

/// How an adversary's sybils behave.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyConfig {
    /// Every sybil trains on source-class data relabeled to its target.
    LabelFlip,
    /// The first sybil resubmits the victim's update byte-for-byte; the rest
    /// carry the poison. `victim` defaults to the source class's honest client.
    Mimicry {
        #[serde(skip_serializing_if = "Option::is_none")]
        victim: Option<usize>,
    },
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig::LabelFlip
    }
}

impl<'de> Deserialize<'de> for StrategyConfig {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        use serde::de::Error as DeError;
        let value = serde_json::Value::deserialize(deserializer)?;
        match value {
            serde_json::Value::String(name) => match name.as_str() {
                "label_flip" => Ok(StrategyConfig::LabelFlip),
                "mimicry" => Ok(StrategyConfig::Mimicry { victim: None }),
                other => Err(DeError::custom(format!(
                    "unknown strategy {other:?}; expected \"label_flip\" or \"mimicry\""
                ))),
            },
            serde_json::Value::Object(mut map) => {
                let kind = match map.remove("kind") {
                    Some(serde_json::Value::String(k)) => k,
                    _ => return Err(DeError::custom("strategy needs a string \"kind\" field")),
                };
                let rest = serde_json::Value::Object(map);
                match kind.as_str() {
                    "label_flip" => {
                        #[derive(Deserialize)]
                        #[serde(deny_unknown_fields)]
                        struct NoFields {}
                        serde_json::from_value::<NoFields>(rest)
                            .map(|_| StrategyConfig::LabelFlip)
                            .map_err(|e| DeError::custom(format!("strategy (label_flip): {e}")))
                    }
                    "mimicry" => {
                        #[derive(Deserialize)]
                        #[serde(deny_unknown_fields)]
                        struct Fields {
                            #[serde(default)]
                            victim: Option<usize>,
                        }
                        serde_json::from_value::<Fields>(rest)
                            .map(|x| StrategyConfig::Mimicry { victim: x.victim })
                            .map_err(|e| DeError::custom(format!("strategy (mimicry): {e}")))
                    }
                    other => Err(DeError::custom(format!(
                        "unknown strategy kind {other:?}; expected \"label_flip\" or \"mimicry\""
                    ))),
                }
            }
            _ => Err(DeError::custom(
                "strategy must be a name string or an object with a \"kind\" field",
            )),
        }
    }
}

/// One adversary: a block of colluding sybil clients with a shared goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    pub num_sybils: usize,
    pub source_class: usize,
    /// One entry = all sybils push the same target; several entries = one sybil
    /// per target (their count must equal `num_sybils`).
    pub targets: Vec<usize>,
    /// First round (1-based) the sybils participate in; 0 means from the start.
    #[serde(default)]
    pub join_round: u32,
    #[serde(default)]
    pub strategy: StrategyConfig,
    /// true: every sybil holds the full source-class pool; false: the pool is
    /// divided disjointly among them.
    #[serde(default)]
    pub duplicate_poison_data: bool,
}

/// Everything a run needs. Pair it with nothing else: the master seed fixes all
/// random streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "ExperimentConfig::default_rounds")]
    pub rounds: u32,
    #[serde(default = "ExperimentConfig::default_server_lr")]
    pub server_lr: f64,
    /// Defaults to one honest client per class, which is also the only supported
    /// shape (the non-IID partition assigns each class to exactly one client).
    #[serde(default)]
    pub honest_clients: Option<usize>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub local: LocalTrainConfig,
    pub aggregator: AggregatorKind,
    #[serde(default)]
    pub adversaries: Vec<AdversaryConfig>,
    /// Optional default output directory; command-line flags take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl ExperimentConfig {
    fn default_rounds() -> u32 {
        300
    }
    fn default_server_lr() -> f64 {
        1.0
    }

    /// A minimal config for the given aggregator; everything else at defaults.
    pub fn minimal(aggregator: AggregatorKind, seed: u64) -> Self {
        ExperimentConfig {
            seed,
            rounds: Self::default_rounds(),
            server_lr: Self::default_server_lr(),
            honest_clients: None,
            data: DataConfig::default(),
            arch: ArchConfig::default(),
            local: LocalTrainConfig::default(),
            aggregator,
            adversaries: Vec::new(),
            out_dir: None,
        }
    }

    /// Checks everything that does not need the dataset in hand.
    pub fn validate(&self) -> Result<()> {
        if !self.server_lr.is_finite() || self.server_lr <= 0.0 {
            return Err(Error::config(format!(
                "server_lr must be a positive real, got {}",
                self.server_lr
            )));
        }
        let l = &self.local;
        if !l.learning_rate.is_finite() || l.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "local.learning_rate must be a positive real, got {}",
                l.learning_rate
            )));
        }
        if l.batch_size == 0 {
            return Err(Error::config("local.batch_size must be at least 1"));
        }
        if l.local_steps == 0 {
            return Err(Error::config("local.local_steps must be at least 1"));
        }
        if let DataConfig::Synthetic { classes, input_dim, per_class, spread } = self.data {
            if classes < 2 {
                return Err(Error::config("data.classes must be at least 2"));
            }
            if input_dim == 0 {
                return Err(Error::config("data.input_dim must be at least 1"));
            }
            if per_class < 2 {
                return Err(Error::config(
                    "data.per_class must be at least 2 so both splits are inhabited",
                ));
            }
            if !spread.is_finite() || spread < 0.0 {
                return Err(Error::config(format!(
                    "data.spread must be a non-negative real, got {spread}"
                )));
            }
        }
        self.aggregator.validate()?;
        for (i, adv) in self.adversaries.iter().enumerate() {
            let fail =
                |msg: String| Err(Error::config(format!("adversaries[{i}]: {msg}")));
            if adv.num_sybils == 0 {
                return fail("num_sybils must be at least 1".into());
            }
            if adv.targets.is_empty() {
                return fail("targets must not be empty".into());
            }
            let mut seen = std::collections::BTreeSet::new();
            for &t in &adv.targets {
                if t == adv.source_class {
                    return fail(format!(
                        "target {t} equals source_class; the attack must relabel"
                    ));
                }
                if !seen.insert(t) {
                    return fail(format!("target {t} listed twice"));
                }
            }
            if adv.targets.len() > 1 && adv.targets.len() != adv.num_sybils {
                return fail(format!(
                    "multi-target mode assigns one sybil per target: {} targets need {} sybils, \
                     got {}",
                    adv.targets.len(),
                    adv.targets.len(),
                    adv.num_sybils
                ));
            }
            if let StrategyConfig::Mimicry { .. } = adv.strategy {
                if adv.num_sybils < 2 {
                    return fail(
                        "mimicry needs at least 2 sybils (one copycat, one poison carrier)"
                            .into(),
                    );
                }
                if adv.targets.len() != 1 {
                    return fail("mimicry supports a single target".into());
                }
            }
        }
        Ok(())
    }

    /// Fills the remaining defaults once the dataset's class count is known and
    /// runs the class-bound checks. The result is the config echoed into outputs.
    pub fn resolved(&self, classes: usize) -> Result<ExperimentConfig> {
        self.validate()?;
        let honest = self.honest_clients.unwrap_or(classes);
        if honest != classes {
            return Err(Error::config(format!(
                "honest_clients must equal the class count ({classes}): the non-IID partition \
                 assigns each class to exactly one honest client, got {honest}"
            )));
        }
        let mut cfg = self.clone();
        cfg.honest_clients = Some(honest);
        for (i, adv) in cfg.adversaries.iter_mut().enumerate() {
            let fail =
                |msg: String| Err(Error::config(format!("adversaries[{i}]: {msg}")));
            if adv.source_class >= classes {
                return fail(format!(
                    "source_class {} out of range for {classes} classes",
                    adv.source_class
                ));
            }
            if let Some(&bad) = adv.targets.iter().find(|&&t| t >= classes) {
                return fail(format!("target {bad} out of range for {classes} classes"));
            }
            if let StrategyConfig::Mimicry { victim } = &mut adv.strategy {
                let v = victim.unwrap_or(adv.source_class);
                if v >= honest {
                    return fail(format!(
                        "mimicry victim {v} is not an honest client (ids 0..{honest})"
                    ));
                }
                *victim = Some(v);
            }
        }
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Client plans
// ---------------------------------------------------------------------------

/// What a single sybil client does each round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SybilStrategy {
    /// Train on the (relabeled) shard like any client.
    LabelFlip,
    /// Resubmit this honest client's current-round update verbatim.
    Mimicry { victim: ClientId },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Role {
    Honest { class: usize },
    Sybil { adversary: usize, source_class: usize, target_class: usize, strategy: SybilStrategy },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientSpec {
    pub id: ClientId,
    pub role: Role,
    /// First round (1-based) this client participates in; 0 behaves like 1.
    pub join_round: u32,
}

impl ClientSpec {
    pub fn is_sybil(&self) -> bool {
        matches!(self.role, Role::Sybil { .. })
    }

    pub fn active_at(&self, round: u32) -> bool {
        self.join_round <= round
    }
}

/// A client spec plus its training data. Mimicry copycats train on nothing.
#[derive(Clone, Debug)]
pub struct ClientPlan {
    pub spec: ClientSpec,
    pub shard: Option<Shard>,
}

/// Builds the full client roster: honest clients 0..classes (client i holds
/// class i), then each adversary's sybil block in declaration order.
pub fn build_clients(cfg: &ExperimentConfig, train: &Dataset) -> Result<Vec<ClientPlan>> {
    let classes = train.num_classes();
    let mut plans: Vec<ClientPlan> = partition_non_iid(train, classes)?
        .into_iter()
        .enumerate()
        .map(|(c, shard)| ClientPlan {
            spec: ClientSpec { id: ClientId(c), role: Role::Honest { class: c }, join_round: 0 },
            shard: Some(shard),
        })
        .collect();

    let mut next_id = classes;
    for (a, adv) in cfg.adversaries.iter().enumerate() {
        let carriers = match adv.strategy {
            StrategyConfig::Mimicry { .. } => adv.num_sybils - 1,
            StrategyConfig::LabelFlip => adv.num_sybils,
        };
        let pool_seed = derive_seed(cfg.seed, "poison", a as u64, 0);
        let mut parts: Vec<Vec<usize>> = if carriers == 0 {
            Vec::new()
        } else if adv.duplicate_poison_data {
            (0..carriers).map(|_| train.class_indices(adv.source_class)).collect()
        } else {
            split_class_indices(train, adv.source_class, carriers, pool_seed)?
        };

        if let StrategyConfig::Mimicry { victim } = adv.strategy {
            let victim = ClientId(victim.expect("resolved() fills the victim"));
            plans.push(ClientPlan {
                spec: ClientSpec {
                    id: ClientId(next_id),
                    role: Role::Sybil {
                        adversary: a,
                        source_class: adv.source_class,
                        target_class: adv.targets[0],
                        strategy: SybilStrategy::Mimicry { victim },
                    },
                    join_round: adv.join_round,
                },
                shard: None,
            });
            next_id += 1;
        }

        for (s, indices) in parts.drain(..).enumerate() {
            let target = if adv.targets.len() > 1 { adv.targets[s] } else { adv.targets[0] };
            let id = ClientId(next_id);
            plans.push(ClientPlan {
                spec: ClientSpec {
                    id,
                    role: Role::Sybil {
                        adversary: a,
                        source_class: adv.source_class,
                        target_class: target,
                        strategy: SybilStrategy::LabelFlip,
                    },
                    join_round: adv.join_round,
                },
                shard: Some(Shard::new(id, indices, Some(target), train)?),
            });
            next_id += 1;
        }
    }
    Ok(plans)
}

// ---------------------------------------------------------------------------
// Round records and summaries
// ---------------------------------------------------------------------------

/// Attack rate of one (adversary, target) pair at one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRate {
    pub adversary: usize,
    pub source_class: usize,
    pub target_class: usize,
    pub rate: f64,
}

/// Everything measured after one round's aggregation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub attack_rates: Vec<TargetRate>,
    /// Grouping aggregators only; `None` elsewhere (reported as NA).
    pub est_poison_rate: Option<f64>,
    pub true_poison_rate: f64,
    /// The grouping threshold in force this round, where applicable.
    pub threshold: Option<f64>,
    pub diagnostics: AggregationDetail,
    /// Measured, not derived from the seed — never serialized.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Final metrics plus the full per-round trail, as written to summary.json.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// The fully resolved configuration this run executed.
    pub config: ExperimentConfig,
    pub final_train_loss: f64,
    pub final_train_accuracy: f64,
    pub final_val_loss: f64,
    pub final_val_accuracy: f64,
    pub attack_reports: Vec<AttackReport>,
    pub rounds: Vec<RoundRecord>,
}

/// A finished experiment.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub final_model: ModelState,
    pub summary: RunSummary,
}

// ---------------------------------------------------------------------------
// The round loop
// ---------------------------------------------------------------------------

/// Immutable per-run state shared by every round.
pub struct RoundContext<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub plans: &'a [ClientPlan],
    pub local: &'a LocalTrainConfig,
    pub aggregator: &'a AggregatorKind,
    pub server_lr: f64,
    pub master_seed: u64,
}

fn with_round_context(e: Error, t: u32) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("round {t}: {msg}")),
        other => other,
    }
}

/// The (adversary, source, target) pairs in stable reporting order.
fn attack_pairs(plans: &[ClientPlan]) -> Vec<(usize, usize, usize)> {
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for p in plans {
        if let Role::Sybil { adversary, source_class, target_class, .. } = p.spec.role {
            let key = (adversary, source_class, target_class);
            if !pairs.contains(&key) {
                pairs.push(key);
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Plays one federated round: local training (or mimicry copying) for every
/// active client, history accumulation, aggregation, the server update, and
/// metric capture on the updated model.
pub fn run_round(
    w_prev: &ModelState,
    ctx: &RoundContext,
    t: u32,
    histories: &mut BTreeMap<ClientId, ParamVector>,
) -> Result<(ModelState, RoundRecord)> {
    let started = Instant::now();

    let mut updates: Vec<ClientUpdate> = Vec::new();
    for plan in ctx.plans.iter().filter(|p| p.spec.active_at(t)) {
        let update = match (&plan.spec.role, &plan.shard) {
            (Role::Sybil { strategy: SybilStrategy::Mimicry { victim }, .. }, _) => {
                let victim_update = updates
                    .iter()
                    .find(|u| u.client == *victim)
                    .ok_or_else(|| {
                        Error::config(format!(
                            "round {t}: mimicry victim {victim} has no update to copy"
                        ))
                    })?;
                ClientUpdate {
                    client: plan.spec.id,
                    round: t,
                    delta: victim_update.delta.clone(),
                }
            }
            (_, Some(shard)) => {
                let seed = derive_seed(ctx.master_seed, "local", plan.spec.id.0 as u64, t as u64);
                local_train(w_prev, ctx.train, shard, ctx.local, t, seed)?
            }
            (_, None) => {
                return Err(Error::config(format!(
                    "round {t}: client {} has no shard and no mimicry victim",
                    plan.spec.id
                )))
            }
        };
        updates.push(update);
    }
    if updates.is_empty() {
        return Err(Error::config(format!("round {t}: no active clients")));
    }

    // Accumulate this round into each submitter's history, then snapshot the
    // aligned totals for the history-based aggregators.
    for u in &updates {
        match histories.get_mut(&u.client) {
            Some(total) => total.add_scaled(&u.delta, 1.0)?,
            None => {
                histories.insert(u.client, u.delta.clone());
            }
        }
    }
    let history_snapshot: Vec<UpdateHistory> = updates
        .iter()
        .map(|u| UpdateHistory { client: u.client, total: histories[&u.client].clone() })
        .collect();

    let outcome = aggregate(ctx.aggregator, &updates, &history_snapshot, t)
        .map_err(|e| with_round_context(e, t))?;
    let w_t = update_model(w_prev, &outcome.gamma, ctx.server_lr)?;

    let train_eval = evaluate(&w_t, ctx.train)?;
    let val_eval = evaluate(&w_t, ctx.test)?;
    let attack_rates = attack_pairs(ctx.plans)
        .into_iter()
        .map(|(adversary, source, target)| {
            Ok(TargetRate {
                adversary,
                source_class: source,
                target_class: target,
                rate: attack_success_rate(&w_t, ctx.test, source, target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let active: Vec<&ClientPlan> =
        ctx.plans.iter().filter(|p| p.spec.active_at(t)).collect();
    let active_sybils = active.iter().filter(|p| p.spec.is_sybil()).count();
    let threshold = match &outcome.detail {
        AggregationDetail::Safl { partition } => Some(partition.threshold_used),
        _ => None,
    };
    let record = RoundRecord {
        round: t,
        train_loss: train_eval.loss,
        val_loss: val_eval.loss,
        attack_rates,
        est_poison_rate: estimated_poisoning_rate(&outcome.detail, updates.len()),
        true_poison_rate: true_poisoning_rate(active_sybils, active.len()),
        threshold,
        diagnostics: outcome.detail,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((w_t, record))
}

/// Builds the dataset pair the config describes.
pub fn build_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataConfig::Synthetic { classes, input_dim, per_class, spread } => generate_synthetic(
            *classes,
            *input_dim,
            *per_class,
            *spread,
            derive_seed(cfg.seed, "data", 0, 0),
        ),
        DataConfig::Idx { train_images, train_labels, test_images, test_labels, limit_per_class } => {
            let train = load_idx(train_images, train_labels, *limit_per_class)?;
            let test = load_idx(test_images, test_labels, *limit_per_class)?;
            if test.input_dim() != train.input_dim() {
                return Err(Error::config(format!(
                    "train and test dimensions differ: {} vs {}",
                    train.input_dim(),
                    test.input_dim()
                )));
            }
            if test.num_classes() != train.num_classes() {
                return Err(Error::config(format!(
                    "train and test class counts differ: {} vs {}",
                    train.num_classes(),
                    test.num_classes()
                )));
            }
            Ok((train, test))
        }
    }
}

/// Runs a whole experiment from config to summary.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let (train, test) = build_data(cfg)?;
    let cfg = cfg.resolved(train.num_classes())?;
    let plans = build_clients(&cfg, &train)?;

    let arch = ModelArch {
        input_dim: train.input_dim(),
        num_classes: train.num_classes(),
        hidden_dim: cfg.arch.hidden_dim,
    };
    let mut model = init_model(&arch, derive_seed(cfg.seed, "init", 0, 0))?;

    let ctx = RoundContext {
        train: &train,
        test: &test,
        plans: &plans,
        local: &cfg.local,
        aggregator: &cfg.aggregator,
        server_lr: cfg.server_lr,
        master_seed: cfg.seed,
    };

    let mut histories: BTreeMap<ClientId, ParamVector> = BTreeMap::new();
    let mut rounds: Vec<RoundRecord> = Vec::with_capacity(cfg.rounds as usize);
    for t in 1..=cfg.rounds {
        let (next, record) = run_round(&model, &ctx, t, &mut histories)?;
        model = next;
        rounds.push(record);
    }

    let train_eval = evaluate(&model, &train)?;
    let val_eval = evaluate(&model, &test)?;
    let attack_reports = attack_pairs(&plans)
        .into_iter()
        .map(|(adversary, source, target)| {
            let series: Vec<f64> = rounds
                .iter()
                .map(|r| {
                    r.attack_rates
                        .iter()
                        .find(|x| {
                            x.adversary == adversary
                                && x.source_class == source
                                && x.target_class == target
                        })
                        .map(|x| x.rate)
                        .expect("every round records every attack pair")
                })
                .collect();
            Ok(AttackReport {
                adversary,
                source_class: source,
                target_class: target,
                rate: attack_success_rate(&model, &test, source, target)?,
                series,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = RunSummary {
        config: cfg,
        final_train_loss: train_eval.loss,
        final_train_accuracy: train_eval.accuracy,
        final_val_loss: val_eval.loss,
        final_val_accuracy: val_eval.accuracy,
        attack_reports,
        rounds,
    };
    Ok(ExperimentOutput { final_model: model, summary })
}
