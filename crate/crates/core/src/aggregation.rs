//! Server-side aggregation rules.
//!
//! Every rule consumes the round's client updates (and, where the rule calls for
//! it, each client's accumulated update history) and produces `gamma`: the list of
//! vectors whose mean, scaled by the server learning rate, moves the global model.
//!
//! | rule        | defends by                                        |
//! |-------------|---------------------------------------------------|
//! | `fedavg`    | nothing — plain mean of all updates               |
//! | `krum`      | keeping only the update(s) nearest their peers    |
//! | `foolsgold` | down-weighting clients with correlated histories  |
//! | `safl`      | collapsing cosine-similar clients to one median   |
//!
//! The sybil-grouping rule (`safl`) thresholds pairwise cosine distance: clients
//! whose vectors fall within the threshold form groups, each group contributes a
//! single element-wise median, and everyone else contributes their own vector.
//! The threshold is either fixed or decays as `lambda * (1 - r)^t`, tightening the
//! grouping criterion as training converges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, cosine_distance, elementwise_median, squared_euclidean, ParamVector};
use crate::model::{ClientUpdate, ModelState};
use crate::ClientId;

/// Cosine-distance threshold as a function of the round number.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ThresholdSchedule {
    /// The same threshold every round.
    Fixed { nu: f64 },
    /// `lambda * (1 - r)^t`: starts at `lambda`, decays by a factor `1 - r` per round.
    Decay { lambda: f64, r: f64 },
}

pub const DEFAULT_DECAY_LAMBDA: f64 = 0.8;
pub const DEFAULT_DECAY_RATE: f64 = 0.001;

impl ThresholdSchedule {
    /// The threshold for round `t` (t = 0 is the schedule's starting value).
    pub fn threshold_at(&self, t: u32) -> f64 {
        match *self {
            ThresholdSchedule::Fixed { nu } => nu,
            ThresholdSchedule::Decay { lambda, r } => lambda * (1.0 - r).powi(t as i32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdSchedule::Fixed { nu } => {
                if !nu.is_finite() || nu <= 0.0 || nu > 2.0 {
                    return Err(Error::config(format!(
                        "fixed threshold nu must lie in (0, 2], got {nu}"
                    )));
                }
            }
            ThresholdSchedule::Decay { lambda, r } => {
                if !lambda.is_finite() || lambda <= 0.0 || lambda > 2.0 {
                    return Err(Error::config(format!(
                        "decay lambda must lie in (0, 2], got {lambda}"
                    )));
                }
                if !r.is_finite() || r <= 0.0 || r >= 1.0 {
                    return Err(Error::config(format!("decay rate r must lie in (0, 1), got {r}")));
                }
            }
        }
        Ok(())
    }
}

/// Which vector a grouping decision (or median selection) reads per client.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorBasis {
    /// This round's update.
    Current,
    /// The running sum of all of the client's updates.
    Accumulated,
}

/// How the thresholded similarity graph becomes groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingMode {
    /// Connected components of the thresholded graph (components of size >= 2 group).
    Components,
    /// First-match pairing: scan pairs (i, j) with i < j in client-id order and open
    /// a new two-member group whenever both are still ungrouped. Order-dependent by
    /// design; kept for comparison against the component view.
    Literal,
}

/// Parameters of the sybil-grouping aggregator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaflParams {
    #[serde(default = "SaflParams::default_schedule")]
    pub schedule: ThresholdSchedule,
    /// Vectors compared when deciding who groups with whom. Histories accumulate
    /// evidence across rounds, which is what makes slowly-diverging sybils visible.
    #[serde(default = "SaflParams::default_distance_basis")]
    pub distance_basis: VectorBasis,
    #[serde(default = "SaflParams::default_grouping")]
    pub grouping: GroupingMode,
    /// Vectors the group median (and singleton contributions) are taken from.
    #[serde(default = "SaflParams::default_selection_basis")]
    pub selection_basis: VectorBasis,
}

impl SaflParams {
    fn default_schedule() -> ThresholdSchedule {
        ThresholdSchedule::Fixed { nu: 0.6 }
    }
    fn default_distance_basis() -> VectorBasis {
        VectorBasis::Accumulated
    }
    fn default_grouping() -> GroupingMode {
        GroupingMode::Components
    }
    fn default_selection_basis() -> VectorBasis {
        VectorBasis::Current
    }
}

impl Default for SaflParams {
    fn default() -> Self {
        SaflParams {
            schedule: Self::default_schedule(),
            distance_basis: Self::default_distance_basis(),
            grouping: Self::default_grouping(),
            selection_basis: Self::default_selection_basis(),
        }
    }
}

/// The aggregation rule an experiment runs, with its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum AggregatorKind {
    #[serde(rename = "fedavg")]
    FedAvg,
    /// Plain Krum: keep the single update closest to its `N - f - 2` nearest peers.
    #[serde(rename = "krum")]
    Krum { f: usize },
    /// Multi-Krum: average the `m` best-scoring updates (default `N - f - 2`).
    #[serde(rename = "multi_krum")]
    MultiKrum { f: usize, m: Option<usize> },
    #[serde(rename = "foolsgold")]
    FoolsGold { confidence: f64 },
    #[serde(rename = "safl")]
    Safl(SaflParams),
}

pub const DEFAULT_FOOLSGOLD_CONFIDENCE: f64 = 1.0;

impl AggregatorKind {
    /// Resolves a bare aggregator name to its default parameterization.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "fedavg" => Ok(AggregatorKind::FedAvg),
            "krum" => Ok(AggregatorKind::Krum { f: 1 }),
            "multi_krum" | "multikrum" => Ok(AggregatorKind::MultiKrum { f: 1, m: None }),
            "foolsgold" => {
                Ok(AggregatorKind::FoolsGold { confidence: DEFAULT_FOOLSGOLD_CONFIDENCE })
            }
            "safl" => Ok(AggregatorKind::Safl(SaflParams::default())),
            other => Err(Error::config(format!(
                "unknown aggregator {other:?}; expected one of fedavg, krum, multi_krum, \
                 foolsgold, safl"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AggregatorKind::FedAvg => Ok(()),
            AggregatorKind::Krum { .. } => Ok(()), // N-dependent check happens per round
            AggregatorKind::MultiKrum { .. } => Ok(()),
            AggregatorKind::FoolsGold { confidence } => {
                if !confidence.is_finite() || *confidence <= 0.0 {
                    return Err(Error::config(format!(
                        "foolsgold confidence must be a positive real, got {confidence}"
                    )));
                }
                Ok(())
            }
            AggregatorKind::Safl(params) => params.schedule.validate(),
        }
    }
}

// The JSON form accepts either a bare name ("fedavg") or an object with a "kind"
// tag. Parsing goes through serde_json::Value so each variant's field struct can
// enforce deny_unknown_fields — serde's internally-tagged derive cannot.
impl<'de> Deserialize<'de> for AggregatorKind {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        use serde::de::Error as DeError;
        let value = serde_json::Value::deserialize(deserializer)?;
        match value {
            serde_json::Value::String(name) => {
                AggregatorKind::from_name(&name).map_err(DeError::custom)
            }
            serde_json::Value::Object(mut map) => {
                let kind = match map.remove("kind") {
                    Some(serde_json::Value::String(k)) => k,
                    Some(_) => return Err(DeError::custom("aggregator \"kind\" must be a string")),
                    None => {
                        return Err(DeError::custom(
                            "aggregator object needs a \"kind\" field (or use a bare name string)",
                        ))
                    }
                };
                let rest = serde_json::Value::Object(map);
                let parsed = match kind.as_str() {
                    "fedavg" => {
                        #[derive(Deserialize)]
                        #[serde(deny_unknown_fields)]
                        struct NoFields {}
                        serde_json::from_value::<NoFields>(rest).map(|_| AggregatorKind::FedAvg)
                    }
                    "krum" => {
                        #[derive(Deserialize)]
                        #[serde(deny_unknown_fields)]
                        struct Fields {
                            f: usize,
                        }
                        serde_json::from_value::<Fields>(rest)
                            .map(|x| AggregatorKind::Krum { f: x.f })
                    }
                    "multi_krum" | "multikrum" => {
                        #[derive(Deserialize)]
                        #[serde(deny_unknown_fields)]
                        struct Fields {
                            f: usize,
                            #[serde(default)]
                            m: Option<usize>,
                        }
                        serde_json::from_value::<Fields>(rest)
                            .map(|x| AggregatorKind::MultiKrum { f: x.f, m: x.m })
                    }
                    "foolsgold" => {
                        #[derive(Deserialize)]
                        #[serde(deny_unknown_fields)]
                        struct Fields {
                            #[serde(default = "default_confidence")]
                            confidence: f64,
                        }
                        fn default_confidence() -> f64 {
                            DEFAULT_FOOLSGOLD_CONFIDENCE
                        }
                        serde_json::from_value::<Fields>(rest)
                            .map(|x| AggregatorKind::FoolsGold { confidence: x.confidence })
                    }
                    "safl" => serde_json::from_value::<SaflParams>(rest).map(AggregatorKind::Safl),
                    other => {
                        return Err(DeError::custom(format!(
                            "unknown aggregator kind {other:?}; expected one of fedavg, krum, \
                             multi_krum, foolsgold, safl"
                        )))
                    }
                };
                parsed.map_err(|e| DeError::custom(format!("aggregator ({kind}): {e}")))
            }
            _ => Err(DeError::custom(
                "aggregator must be a name string or an object with a \"kind\" field",
            )),
        }
    }
}

// ThresholdSchedule gets the same strict treatment.
impl<'de> Deserialize<'de> for ThresholdSchedule {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        use serde::de::Error as DeError;
        let value = serde_json::Value::deserialize(deserializer)?;
        let serde_json::Value::Object(mut map) = value else {
            return Err(DeError::custom(
                "schedule must be an object with a \"kind\" of \"fixed\" or \"decay\"",
            ));
        };
        let kind = match map.remove("kind") {
            Some(serde_json::Value::String(k)) => k,
            _ => return Err(DeError::custom("schedule needs a string \"kind\" field")),
        };
        let rest = serde_json::Value::Object(map);
        let parsed = match kind.as_str() {
            "fixed" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct Fields {
                    nu: f64,
                }
                serde_json::from_value::<Fields>(rest)
                    .map(|x| ThresholdSchedule::Fixed { nu: x.nu })
            }
            "decay" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct Fields {
                    #[serde(default = "default_lambda")]
                    lambda: f64,
                    #[serde(default = "default_r")]
                    r: f64,
                }
                fn default_lambda() -> f64 {
                    DEFAULT_DECAY_LAMBDA
                }
                fn default_r() -> f64 {
                    DEFAULT_DECAY_RATE
                }
                serde_json::from_value::<Fields>(rest)
                    .map(|x| ThresholdSchedule::Decay { lambda: x.lambda, r: x.r })
            }
            other => {
                return Err(DeError::custom(format!(
                    "unknown schedule kind {other:?}; expected \"fixed\" or \"decay\""
                )))
            }
        };
        parsed.map_err(|e| DeError::custom(format!("schedule ({kind}): {e}")))
    }
}

/// One client's running update total across every round it has participated in.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateHistory {
    pub client: ClientId,
    pub total: ParamVector,
}

/// The grouping decision for one round: groups of size >= 2 plus everyone left alone.
/// Groups are ordered by smallest member id; member lists and singletons ascend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub groups: Vec<Vec<ClientId>>,
    pub singletons: Vec<ClientId>,
    pub threshold_used: f64,
}

impl GroupPartition {
    /// Total number of clients the partition covers.
    pub fn client_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum::<usize>() + self.singletons.len()
    }

    /// Number of clients sitting inside some group.
    pub fn grouped_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

/// What the aggregator did this round, for diagnostics and reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "aggregator", rename_all = "snake_case")]
pub enum AggregationDetail {
    Fedavg,
    Krum { scores: Vec<(ClientId, f64)>, selected: Vec<ClientId> },
    Foolsgold { weights: Vec<(ClientId, f64)> },
    Safl { partition: GroupPartition },
}

/// An aggregation result: the vectors to average into the model, plus diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationOutcome {
    pub gamma: Vec<ParamVector>,
    pub detail: AggregationDetail,
}

fn check_sorted_unique(ids: impl Iterator<Item = ClientId>) -> Result<()> {
    let mut prev: Option<ClientId> = None;
    for id in ids {
        if let Some(p) = prev {
            if id <= p {
                return Err(Error::config(format!(
                    "client vectors must be sorted by strictly ascending id ({} follows {})",
                    id, p
                )));
            }
        }
        prev = Some(id);
    }
    Ok(())
}

fn check_common_dim<'a>(mut vectors: impl Iterator<Item = &'a ParamVector>) -> Result<usize> {
    let first = vectors.next().ok_or(Error::EmptyInput("aggregation needs at least one update"))?;
    let d = first.len();
    for v in vectors {
        if v.len() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: v.len() });
        }
    }
    Ok(d)
}

/// Partitions clients by thresholded pairwise cosine distance over `basis`.
///
/// Input must be sorted by strictly ascending client id. An edge exists between two
/// clients when their distance is strictly below `nu`; see [`GroupingMode`] for how
/// edges become groups.
pub fn safl_group(
    basis: &[(ClientId, ParamVector)],
    nu: f64,
    mode: GroupingMode,
) -> Result<GroupPartition> {
    check_sorted_unique(basis.iter().map(|(id, _)| *id))?;
    check_common_dim(basis.iter().map(|(_, v)| v))?;
    if !nu.is_finite() {
        return Err(Error::config("grouping threshold must be finite"));
    }
    let n = basis.len();

    let mut groups: Vec<Vec<usize>> = Vec::new();
    match mode {
        GroupingMode::Components => {
            // Union-find over the thresholded graph.
            let mut parent: Vec<usize> = (0..n).collect();
            fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
                while parent[x] != x {
                    parent[x] = parent[parent[x]];
                    x = parent[x];
                }
                x
            }
            for i in 0..n {
                for j in (i + 1)..n {
                    if cosine_distance(&basis[i].1, &basis[j].1)? < nu {
                        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                        if ri != rj {
                            // Root at the smaller index so group order is stable.
                            let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                            parent[hi] = lo;
                        }
                    }
                }
            }
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
            for i in 0..n {
                let root = find(&mut parent, i);
                members[root].push(i);
            }
            for m in members {
                if m.len() >= 2 {
                    groups.push(m);
                }
            }
        }
        GroupingMode::Literal => {
            // First-match pairing in pair-scan order; every group has exactly two members.
            let mut taken = vec![false; n];
            for i in 0..n {
                for j in (i + 1)..n {
                    if taken[i] || taken[j] {
                        continue;
                    }
                    if cosine_distance(&basis[i].1, &basis[j].1)? < nu {
                        taken[i] = true;
                        taken[j] = true;
                        groups.push(vec![i, j]);
                    }
                }
            }
        }
    }

    let mut grouped = vec![false; n];
    for g in &groups {
        for &i in g {
            grouped[i] = true;
        }
    }
    let singletons: Vec<ClientId> =
        (0..n).filter(|&i| !grouped[i]).map(|i| basis[i].0).collect();
    let groups: Vec<Vec<ClientId>> =
        groups.into_iter().map(|g| g.into_iter().map(|i| basis[i].0).collect()).collect();
    Ok(GroupPartition { groups, singletons, threshold_used: nu })
}

fn require_aligned_histories(
    updates: &[ClientUpdate],
    histories: &[UpdateHistory],
) -> Result<()> {
    if updates.len() != histories.len() {
        return Err(Error::config(format!(
            "histories must cover exactly the submitting clients ({} updates, {} histories)",
            updates.len(),
            histories.len()
        )));
    }
    for (u, h) in updates.iter().zip(histories) {
        if u.client != h.client {
            return Err(Error::config(format!(
                "history order mismatch: update from client {} paired with history of client {}",
                u.client, h.client
            )));
        }
        if u.delta.len() != h.total.len() {
            return Err(Error::DimensionMismatch {
                expected: u.delta.len(),
                actual: h.total.len(),
            });
        }
    }
    Ok(())
}

/// The sybil-grouping aggregation for round `t`.
///
/// Distances are taken over `distance_basis` vectors, the partition is formed at
/// the round's threshold, and gamma receives each singleton's `selection_basis`
/// vector (ascending id) followed by one element-wise median per group (groups
/// ordered by smallest member).
pub fn safl_aggregate(
    updates: &[ClientUpdate],
    histories: &[UpdateHistory],
    round: u32,
    params: &SaflParams,
) -> Result<AggregationOutcome> {
    check_sorted_unique(updates.iter().map(|u| u.client))?;
    check_common_dim(updates.iter().map(|u| &u.delta))?;
    require_aligned_histories(updates, histories)?;
    params.schedule.validate()?;

    let nu = params.schedule.threshold_at(round);
    let pick = |which: VectorBasis, i: usize| -> &ParamVector {
        match which {
            VectorBasis::Current => &updates[i].delta,
            VectorBasis::Accumulated => &histories[i].total,
        }
    };

    let basis: Vec<(ClientId, ParamVector)> = (0..updates.len())
        .map(|i| (updates[i].client, pick(params.distance_basis, i).clone()))
        .collect();
    let partition = safl_group(&basis, nu, params.grouping)?;

    let index_of = |id: ClientId| updates.binary_search_by_key(&id, |u| u.client).unwrap();
    let mut gamma = Vec::with_capacity(partition.singletons.len() + partition.groups.len());
    for &id in &partition.singletons {
        gamma.push(pick(params.selection_basis, index_of(id)).clone());
    }
    for group in &partition.groups {
        let members: Vec<ParamVector> =
            group.iter().map(|&id| pick(params.selection_basis, index_of(id)).clone()).collect();
        gamma.push(elementwise_median(&members)?);
    }
    Ok(AggregationOutcome { gamma, detail: AggregationDetail::Safl { partition } })
}

/// Plain federated averaging: every update goes into gamma as-is, in id order.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<AggregationOutcome> {
    check_sorted_unique(updates.iter().map(|u| u.client))?;
    check_common_dim(updates.iter().map(|u| &u.delta))?;
    Ok(AggregationOutcome {
        gamma: updates.iter().map(|u| u.delta.clone()).collect(),
        detail: AggregationDetail::Fedavg,
    })
}

/// Krum scoring and selection.
///
/// Each client's score is the sum of squared Euclidean distances to its
/// `N - f - 2` nearest peers (peer ties broken toward the lower id). `m` updates
/// with the lowest scores are kept — `m = None` defaults to `N - f - 2`
/// (the Multi-Krum default); plain Krum passes `Some(1)`. Score ties also resolve
/// toward the lower client id.
pub fn krum_select(
    updates: &[ClientUpdate],
    f: usize,
    m: Option<usize>,
) -> Result<AggregationOutcome> {
    check_sorted_unique(updates.iter().map(|u| u.client))?;
    check_common_dim(updates.iter().map(|u| &u.delta))?;
    let n = updates.len();
    if n < f + 3 {
        return Err(Error::config(format!(
            "krum requires N >= f + 3 clients (N = {n}, f = {f})"
        )));
    }
    let keep = n - f - 2;
    let m = m.unwrap_or(keep);
    if m == 0 || m > n {
        return Err(Error::config(format!(
            "multi-krum selection count must lie in 1..=N (m = {m}, N = {n})"
        )));
    }

    let mut scores: Vec<(ClientId, f64)> = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<(f64, ClientId)> = Vec::with_capacity(n - 1);
        for (j, other) in updates.iter().enumerate() {
            if j != i {
                dists.push((squared_euclidean(&updates[i].delta, &other.delta)?, other.client));
            }
        }
        dists.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let score: f64 = dists[..keep].iter().map(|(d, _)| d).sum();
        scores.push((updates[i].client, score));
    }

    let mut ranked = scores.clone();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let selected: Vec<ClientId> = ranked[..m].iter().map(|(id, _)| *id).collect();
    let index_of = |id: ClientId| updates.binary_search_by_key(&id, |u| u.client).unwrap();
    let gamma: Vec<ParamVector> =
        selected.iter().map(|&id| updates[index_of(id)].delta.clone()).collect();
    Ok(AggregationOutcome { gamma, detail: AggregationDetail::Krum { scores, selected } })
}

/// FoolsGold client weights from accumulated update histories.
///
/// Pipeline: pairwise cosine similarity of histories; per-client maximum `v_i`;
/// pardoning (`cs_ij *= v_i / v_j` wherever `v_j > v_i`); `alpha_i = 1 - max_j cs_ij`;
/// rescale by the maximum alpha; then the confidence-scaled logit
/// `kappa * (ln(alpha / (1 - alpha)) + 0.5)` clipped to [0, 1], with the pre-logit
/// endpoints mapping straight to weight 0 and 1.
pub fn foolsgold_weights(
    histories: &[UpdateHistory],
    confidence: f64,
) -> Result<Vec<(ClientId, f64)>> {
    check_sorted_unique(histories.iter().map(|h| h.client))?;
    check_common_dim(histories.iter().map(|h| &h.total))?;
    let n = histories.len();
    if n < 2 {
        return Err(Error::config(
            "foolsgold needs at least 2 clients to compare histories",
        ));
    }
    if !confidence.is_finite() || confidence <= 0.0 {
        return Err(Error::config(format!(
            "foolsgold confidence must be a positive real, got {confidence}"
        )));
    }

    let mut cs = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let sim = 1.0 - cosine_distance(&histories[i].total, &histories[j].total)?;
            cs[i][j] = sim;
            cs[j][i] = sim;
        }
    }
    let row_max = |row: &[f64], skip: usize| -> f64 {
        row.iter()
            .enumerate()
            .filter(|&(j, _)| j != skip)
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let v: Vec<f64> = (0..n).map(|i| row_max(&cs[i], i)).collect();

    // Pardoning: a client similar to a *more* suspicious one is partially excused.
    // v_j == 0 is skipped — there is nothing to normalize against.
    for i in 0..n {
        for j in 0..n {
            if i != j && v[j] > v[i] && v[j] != 0.0 {
                cs[i][j] *= v[i] / v[j];
            }
        }
    }

    let mut alpha: Vec<f64> = (0..n).map(|i| 1.0 - row_max(&cs[i], i)).collect();
    let max_alpha = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max_alpha <= 0.0 {
        // Every client looks maximally coordinated; nothing is trustworthy.
        return Ok(histories.iter().map(|h| (h.client, 0.0)).collect());
    }
    for a in &mut alpha {
        *a /= max_alpha;
    }

    let weights = alpha
        .iter()
        .zip(histories)
        .map(|(&a, h)| {
            let w = if a >= 1.0 {
                1.0
            } else if a <= 0.0 {
                0.0
            } else {
                (confidence * ((a / (1.0 - a)).ln() + 0.5)).clamp(0.0, 1.0)
            };
            (h.client, w)
        })
        .collect();
    Ok(weights)
}

/// FoolsGold aggregation: every client's current update enters gamma scaled by its
/// history-derived weight.
pub fn foolsgold_aggregate(
    updates: &[ClientUpdate],
    histories: &[UpdateHistory],
    confidence: f64,
) -> Result<AggregationOutcome> {
    check_sorted_unique(updates.iter().map(|u| u.client))?;
    check_common_dim(updates.iter().map(|u| &u.delta))?;
    require_aligned_histories(updates, histories)?;
    let weights = foolsgold_weights(histories, confidence)?;
    let gamma = updates
        .iter()
        .zip(&weights)
        .map(|(u, &(_, w))| {
            let mut v = u.delta.clone();
            v.scale(w);
            v
        })
        .collect();
    Ok(AggregationOutcome { gamma, detail: AggregationDetail::Foolsgold { weights } })
}

/// Applies an aggregation result: `w + server_lr * mean(gamma)`, mean summed in
/// gamma order.
pub fn update_model(m: &ModelState, gamma: &[ParamVector], server_lr: f64) -> Result<ModelState> {
    if !server_lr.is_finite() {
        return Err(Error::config("server_lr must be finite"));
    }
    let avg = linalg::mean(gamma)?;
    if avg.len() != m.params.len() {
        return Err(Error::DimensionMismatch { expected: m.params.len(), actual: avg.len() });
    }
    let mut next = m.clone();
    next.params.add_scaled(&avg, server_lr)?;
    Ok(next)
}

/// Dispatches one round of aggregation for the configured rule.
///
/// `updates` and `histories` must be sorted by ascending client id and cover the
/// same clients; FedAvg and the Krum family ignore histories (pass the aligned set
/// anyway — the simulator always has it).
pub fn aggregate(
    kind: &AggregatorKind,
    updates: &[ClientUpdate],
    histories: &[UpdateHistory],
    round: u32,
) -> Result<AggregationOutcome> {
    kind.validate()?;
    match kind {
        AggregatorKind::FedAvg => fedavg(updates),
        AggregatorKind::Krum { f } => krum_select(updates, *f, Some(1)),
        AggregatorKind::MultiKrum { f, m } => krum_select(updates, *f, *m),
        AggregatorKind::FoolsGold { confidence } => {
            foolsgold_aggregate(updates, histories, *confidence)
        }
        AggregatorKind::Safl(params) => safl_aggregate(updates, histories, round, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(values: &[f64]) -> ParamVector {
        ParamVector::new(values.to_vec())
    }

    fn upd(id: usize, values: &[f64]) -> ClientUpdate {
        ClientUpdate { client: ClientId(id), round: 1, delta: pv(values) }
    }

    fn hist(id: usize, values: &[f64]) -> UpdateHistory {
        UpdateHistory { client: ClientId(id), total: pv(values) }
    }

    fn ids(raw: &[usize]) -> Vec<ClientId> {
        raw.iter().map(|&i| ClientId(i)).collect()
    }

    // ---- threshold schedule ----

    #[test]
    fn fixed_schedule_is_constant() {
        let s = ThresholdSchedule::Fixed { nu: 0.6 };
        assert_eq!(s.threshold_at(0), 0.6);
        assert_eq!(s.threshold_at(999), 0.6);
    }

    #[test]
    fn decay_schedule_matches_frozen_values() {
        let s = ThresholdSchedule::Decay { lambda: 0.8, r: 0.001 };
        // Exponent zero leaves lambda untouched, bit for bit.
        assert_eq!(s.threshold_at(0), 0.8);
        assert!((s.threshold_at(1) - 0.7992).abs() < 1e-15);
        // High-precision reference values for 0.8 * 0.999^t.
        assert!((s.threshold_at(100) - 0.72383371769096723).abs() < 1e-9);
        assert!((s.threshold_at(300) - 0.59256562572487957).abs() < 1e-9);
    }

    #[test]
    fn decay_schedule_is_strictly_decreasing_and_bounded() {
        let s = ThresholdSchedule::Decay { lambda: 0.8, r: 0.001 };
        let mut prev = s.threshold_at(0);
        assert!(prev <= 0.8);
        for t in 1..=1000 {
            let now = s.threshold_at(t);
            assert!(now < prev, "not strictly decreasing at t={t}");
            assert!(now > 0.0);
            prev = now;
        }
    }

    #[test]
    fn schedule_validation_rejects_bad_parameters() {
        assert!(ThresholdSchedule::Fixed { nu: 0.0 }.validate().is_err());
        assert!(ThresholdSchedule::Fixed { nu: 2.5 }.validate().is_err());
        assert!(ThresholdSchedule::Decay { lambda: 0.8, r: 0.0 }.validate().is_err());
        assert!(ThresholdSchedule::Decay { lambda: 0.8, r: 1.0 }.validate().is_err());
        assert!(ThresholdSchedule::Decay { lambda: -1.0, r: 0.5 }.validate().is_err());
        assert!(ThresholdSchedule::Fixed { nu: 0.6 }.validate().is_ok());
    }

    // ---- grouping ----

    /// Brute-force connected components over the thresholded distance graph,
    /// written independently of the production path (BFS over an adjacency list,
    /// naive cosine).
    fn oracle_components(vectors: &[Vec<f64>], nu: f64) -> (Vec<Vec<usize>>, Vec<usize>) {
        let n = vectors.len();
        let naive_cos_dist = |a: &[f64], b: &[f64]| -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
            }
        };
        let mut adj = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                if i != j && naive_cos_dist(&vectors[i], &vectors[j]) < nu {
                    adj[i].push(j);
                }
            }
        }
        let mut seen = vec![false; n];
        let mut groups = Vec::new();
        let mut singles = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut queue = vec![start];
            let mut component = Vec::new();
            seen[start] = true;
            while let Some(x) = queue.pop() {
                component.push(x);
                for &y in &adj[x] {
                    if !seen[y] {
                        seen[y] = true;
                        queue.push(y);
                    }
                }
            }
            component.sort_unstable();
            if component.len() >= 2 {
                groups.push(component);
            } else {
                singles.push(component[0]);
            }
        }
        groups.sort_by_key(|g| g[0]);
        singles.sort_unstable();
        (groups, singles)
    }

    #[test]
    fn grouping_example_two_close_one_far() {
        let vectors =
            [vec![1.0, 0.0], vec![0.99, 0.14], vec![0.0, 1.0]];
        // Frozen pairwise distances from a high-precision evaluation.
        let d01 = cosine_distance(&pv(&vectors[0]), &pv(&vectors[1])).unwrap();
        let d12 = cosine_distance(&pv(&vectors[1]), &pv(&vectors[2])).unwrap();
        let d02 = cosine_distance(&pv(&vectors[0]), &pv(&vectors[2])).unwrap();
        assert!((d01 - 0.00985146657914).abs() < 1e-9);
        assert!((d12 - 0.859978995274).abs() < 1e-9);
        assert_eq!(d02, 1.0);

        let basis: Vec<(ClientId, ParamVector)> =
            vectors.iter().enumerate().map(|(i, v)| (ClientId(i), pv(v))).collect();
        for mode in [GroupingMode::Components, GroupingMode::Literal] {
            let p = safl_group(&basis, 0.6, mode).unwrap();
            assert_eq!(p.groups, vec![ids(&[0, 1])], "{mode:?}");
            assert_eq!(p.singletons, ids(&[2]), "{mode:?}");
            assert_eq!(p.threshold_used, 0.6);
        }
    }

    #[test]
    fn tiny_threshold_leaves_everyone_alone() {
        let basis: Vec<(ClientId, ParamVector)> = (0..4)
            .map(|i| (ClientId(i), pv(&[i as f64 + 1.0, (i * i) as f64, 1.0])))
            .collect();
        let p = safl_group(&basis, 1e-12, GroupingMode::Components).unwrap();
        assert!(p.groups.is_empty());
        assert_eq!(p.singletons, ids(&[0, 1, 2, 3]));
    }

    #[test]
    fn zero_update_is_orthogonal_to_everything() {
        // Distance to a zero vector is defined as 1, so under nu <= 1 it never groups,
        // not even with another zero vector.
        let basis = vec![
            (ClientId(0), ParamVector::zeros(3)),
            (ClientId(1), ParamVector::zeros(3)),
            (ClientId(2), pv(&[1.0, 2.0, 3.0])),
        ];
        let p = safl_group(&basis, 0.99, GroupingMode::Components).unwrap();
        assert!(p.groups.is_empty());
        assert_eq!(p.singletons, ids(&[0, 1, 2]));
    }

    #[test]
    fn component_and_literal_modes_differ_on_triples() {
        // Three mutually close vectors: components folds them into one group,
        // literal pairing grabs the first pair and leaves the third alone.
        let basis = vec![
            (ClientId(0), pv(&[1.0, 0.0])),
            (ClientId(1), pv(&[1.0, 0.01])),
            (ClientId(2), pv(&[1.0, 0.02])),
        ];
        let comp = safl_group(&basis, 0.5, GroupingMode::Components).unwrap();
        assert_eq!(comp.groups, vec![ids(&[0, 1, 2])]);
        assert!(comp.singletons.is_empty());

        let lit = safl_group(&basis, 0.5, GroupingMode::Literal).unwrap();
        assert_eq!(lit.groups, vec![ids(&[0, 1])]);
        assert_eq!(lit.singletons, ids(&[2]));
    }

    #[test]
    fn component_grouping_matches_brute_force_oracle() {
        // A seeded mini-sweep; the acceptance suite runs 1000 instances.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for trial in 0..50 {
            let n = 2 + (next() * 6.0) as usize;
            let d = 2 + (next() * 4.0) as usize;
            let vectors: Vec<Vec<f64>> =
                (0..n).map(|_| (0..d).map(|_| next() * 2.0 - 1.0).collect()).collect();
            for nu in [0.3, 0.6, 0.8] {
                let basis: Vec<(ClientId, ParamVector)> =
                    vectors.iter().enumerate().map(|(i, v)| (ClientId(i), pv(v))).collect();
                let got = safl_group(&basis, nu, GroupingMode::Components).unwrap();
                let (groups, singles) = oracle_components(&vectors, nu);
                let want_groups: Vec<Vec<ClientId>> =
                    groups.into_iter().map(|g| ids(&g)).collect();
                assert_eq!(got.groups, want_groups, "trial {trial} nu {nu}");
                assert_eq!(got.singletons, ids(&singles), "trial {trial} nu {nu}");
            }
        }
    }

    #[test]
    fn unsorted_ids_are_rejected() {
        let basis = vec![(ClientId(1), pv(&[1.0])), (ClientId(0), pv(&[1.0]))];
        assert!(safl_group(&basis, 0.5, GroupingMode::Components).is_err());
        let dup = vec![(ClientId(1), pv(&[1.0])), (ClientId(1), pv(&[1.0]))];
        assert!(safl_group(&dup, 0.5, GroupingMode::Components).is_err());
    }

    // ---- safl aggregation ----

    fn plain_safl(nu: f64) -> SaflParams {
        SaflParams { schedule: ThresholdSchedule::Fixed { nu }, ..SaflParams::default() }
    }

    #[test]
    fn ungrouped_round_reduces_to_fedavg_gamma() {
        let updates = vec![upd(0, &[1.0, 0.0]), upd(1, &[0.0, 1.0]), upd(2, &[-1.0, 0.0])];
        let histories: Vec<UpdateHistory> =
            updates.iter().map(|u| UpdateHistory { client: u.client, total: u.delta.clone() }).collect();
        let out = safl_aggregate(&updates, &histories, 1, &plain_safl(1e-9)).unwrap();
        let reference = fedavg(&updates).unwrap();
        assert_eq!(out.gamma, reference.gamma);
    }

    #[test]
    fn grouped_pair_contributes_one_median() {
        // Clients 1 and 2 share a direction; the group median replaces both.
        let updates = vec![
            upd(0, &[0.0, 2.0]),
            upd(1, &[0.0, 2.0]), // decoy values; selection reads these
            upd(2, &[2.0, 0.0]),
        ];
        let histories = vec![
            hist(0, &[0.0, 5.0]),
            hist(1, &[3.0, 0.0]),
            hist(2, &[3.0, 0.1]),
        ];
        let out = safl_aggregate(&updates, &histories, 1, &plain_safl(0.5)).unwrap();
        let AggregationDetail::Safl { partition } = &out.detail else { panic!() };
        assert_eq!(partition.groups, vec![ids(&[1, 2])]);
        assert_eq!(partition.singletons, ids(&[0]));
        // Gamma: singleton 0's current update, then the median of 1 and 2's currents.
        assert_eq!(out.gamma.len(), 2);
        assert_eq!(out.gamma[0], pv(&[0.0, 2.0]));
        assert_eq!(out.gamma[1], pv(&[1.0, 1.0]));
    }

    #[test]
    fn group_median_is_componentwise() {
        let updates = vec![upd(0, &[0.0, 2.0]), upd(1, &[2.0, 0.0]), upd(2, &[1.0, 1.0])];
        // Identical histories force one group of all three.
        let histories = vec![hist(0, &[1.0, 1.0]), hist(1, &[1.0, 1.0]), hist(2, &[1.0, 1.0])];
        let out = safl_aggregate(&updates, &histories, 1, &plain_safl(0.6)).unwrap();
        assert_eq!(out.gamma.len(), 1);
        assert_eq!(out.gamma[0], pv(&[1.0, 1.0]));
    }

    #[test]
    fn accumulated_selection_basis_feeds_histories_to_the_median() {
        let updates = vec![upd(0, &[0.0, 2.0]), upd(1, &[2.0, 0.0])];
        let histories = vec![hist(0, &[4.0, 4.0]), hist(1, &[4.0, 5.0])];
        let params = SaflParams {
            schedule: ThresholdSchedule::Fixed { nu: 0.5 },
            selection_basis: VectorBasis::Accumulated,
            ..SaflParams::default()
        };
        let out = safl_aggregate(&updates, &histories, 1, &params).unwrap();
        assert_eq!(out.gamma.len(), 1);
        assert_eq!(out.gamma[0], pv(&[4.0, 4.5]));
    }

    #[test]
    fn identical_sybil_updates_collapse_regardless_of_count() {
        // Orthogonal honest directions, k copies of one sybil direction: gamma is
        // identical for every k. Exact rays keep the distances at exactly 1 and 0.
        let honest_dirs = 3usize;
        let d = 6usize;
        let mut gammas = Vec::new();
        for k in [2usize, 3, 4] {
            let mut updates = Vec::new();
            let mut histories = Vec::new();
            for i in 0..honest_dirs {
                let mut v = vec![0.0; d];
                v[i] = 1.5;
                updates.push(upd(i, &v));
                histories.push(hist(i, &v));
            }
            for s in 0..k {
                let mut v = vec![0.0; d];
                v[d - 1] = -2.0;
                updates.push(upd(honest_dirs + s, &v));
                histories.push(hist(honest_dirs + s, &v));
            }
            let out = safl_aggregate(&updates, &histories, 1, &plain_safl(0.6)).unwrap();
            let AggregationDetail::Safl { partition } = &out.detail else { panic!() };
            assert_eq!(partition.groups.len(), 1);
            assert_eq!(partition.groups[0].len(), k);
            gammas.push(out.gamma);
        }
        assert_eq!(gammas[0], gammas[1]);
        assert_eq!(gammas[1], gammas[2]);
    }

    // ---- fedavg / update_model ----

    #[test]
    fn update_model_applies_scaled_mean() {
        let m = ModelState {
            arch: crate::model::ModelArch { input_dim: 1, num_classes: 2, hidden_dim: 0 },
            params: pv(&[1.0, 2.0, 3.0, 4.0]),
        };
        let gamma = vec![pv(&[2.0, 0.0, 0.0, 0.0]), pv(&[0.0, 2.0, 0.0, 0.0])];
        let next = update_model(&m, &gamma, 1.0).unwrap();
        assert_eq!(next.params, pv(&[2.0, 3.0, 3.0, 4.0]));
    }

    #[test]
    fn update_model_with_zero_gamma_is_identity() {
        let m = ModelState {
            arch: crate::model::ModelArch { input_dim: 1, num_classes: 2, hidden_dim: 0 },
            params: pv(&[1.0, -2.0, 0.5, 4.0]),
        };
        let next = update_model(&m, &[ParamVector::zeros(4)], 0.7).unwrap();
        assert_eq!(next.params, m.params);
        // Opposite updates cancel exactly.
        let gamma = vec![pv(&[1.0, 1.0, 1.0, 1.0]), pv(&[-1.0, -1.0, -1.0, -1.0])];
        assert_eq!(update_model(&m, &gamma, 0.7).unwrap().params, m.params);
    }

    #[test]
    fn fedavg_mean_is_idempotent_on_identical_updates() {
        let m = ModelState {
            arch: crate::model::ModelArch { input_dim: 1, num_classes: 2, hidden_dim: 0 },
            params: pv(&[0.1, 0.2, 0.3, 0.4]),
        };
        let u = pv(&[0.37, -1.2, 0.001, 3.4]);
        let one = fedavg(&[upd(0, u.as_slice())]).unwrap();
        let two = fedavg(&[upd(0, u.as_slice()), upd(1, u.as_slice())]).unwrap();
        let next_one = update_model(&m, &one.gamma, 0.5).unwrap();
        let next_two = update_model(&m, &two.gamma, 0.5).unwrap();
        assert_eq!(next_one.params, next_two.params);
        // Odd counts can differ by a rounding step, not more.
        let three = fedavg(&[upd(0, u.as_slice()), upd(1, u.as_slice()), upd(2, u.as_slice())])
            .unwrap();
        let next_three = update_model(&m, &three.gamma, 0.5).unwrap();
        for (a, b) in next_one.params.as_slice().iter().zip(next_three.params.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    // ---- krum ----

    #[test]
    fn krum_scores_match_brute_force_on_the_line_example() {
        let updates: Vec<ClientUpdate> =
            [0.0, 0.1, 0.2, 0.4, 10.0].iter().enumerate().map(|(i, &x)| upd(i, &[x])).collect();
        let out = krum_select(&updates, 1, Some(1)).unwrap();
        let AggregationDetail::Krum { scores, selected } = &out.detail else { panic!() };
        // Frozen from the brute-force oracle: sum of the two smallest squared
        // distances per client.
        let expected = [0.05, 0.02, 0.05, 0.13, 188.20];
        for ((id, score), want) in scores.iter().zip(expected) {
            assert!((score - want).abs() < 1e-12, "client {id}: {score} vs {want}");
        }
        assert_eq!(selected, &ids(&[1]));
        assert_eq!(out.gamma, vec![pv(&[0.1])]);
    }

    #[test]
    fn krum_score_ties_resolve_to_the_lower_id() {
        // Clients 0 and 2 tie at 0.05; multi-krum with m=2 must pick 1 then 0.
        let updates: Vec<ClientUpdate> =
            [0.0, 0.1, 0.2, 0.4, 10.0].iter().enumerate().map(|(i, &x)| upd(i, &[x])).collect();
        let out = krum_select(&updates, 1, Some(2)).unwrap();
        let AggregationDetail::Krum { selected, .. } = &out.detail else { panic!() };
        assert_eq!(selected, &ids(&[1, 0]));
    }

    #[test]
    fn krum_on_identical_updates_selects_lowest_id() {
        let updates: Vec<ClientUpdate> = (0..5).map(|i| upd(i, &[1.0, 2.0])).collect();
        let out = krum_select(&updates, 1, Some(1)).unwrap();
        let AggregationDetail::Krum { selected, scores } = &out.detail else { panic!() };
        assert_eq!(selected, &ids(&[0]));
        assert!(scores.iter().all(|&(_, s)| s == 0.0));
    }

    #[test]
    fn multi_krum_defaults_to_n_minus_f_minus_2_selections() {
        let updates: Vec<ClientUpdate> =
            [0.0, 0.1, 0.2, 0.4, 10.0].iter().enumerate().map(|(i, &x)| upd(i, &[x])).collect();
        let out = krum_select(&updates, 1, None).unwrap();
        let AggregationDetail::Krum { selected, .. } = &out.detail else { panic!() };
        assert_eq!(selected.len(), 2);
        assert_eq!(selected, &ids(&[1, 0]));
    }

    #[test]
    fn krum_outliers_are_never_selected() {
        let mut state = 42u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let n = 5 + (next() * 4.0) as usize;
            let d = 2 + (next() * 5.0) as usize;
            let center: Vec<f64> = (0..d).map(|_| next() * 4.0 - 2.0).collect();
            let mut updates: Vec<ClientUpdate> = (0..n - 1)
                .map(|i| {
                    let v: Vec<f64> =
                        center.iter().map(|c| c + 0.1 * (next() - 0.5)).collect();
                    upd(i, &v)
                })
                .collect();
            // Plant one far outlier: at least 10x the cluster diameter away.
            let outlier: Vec<f64> = center.iter().map(|c| c + 50.0).collect();
            updates.push(upd(n - 1, &outlier));
            let out = krum_select(&updates, 1, Some(1)).unwrap();
            let AggregationDetail::Krum { selected, .. } = &out.detail else { panic!() };
            assert_ne!(selected[0], ClientId(n - 1), "outlier won Krum");
        }
    }

    #[test]
    fn krum_rejects_too_few_clients() {
        let updates: Vec<ClientUpdate> = (0..3).map(|i| upd(i, &[i as f64])).collect();
        let err = krum_select(&updates, 1, Some(1)).unwrap_err();
        assert!(err.to_string().contains("f + 3"), "{err}");
    }

    // ---- foolsgold ----

    #[test]
    fn identical_sybil_histories_get_zero_weight() {
        let histories = vec![
            hist(0, &[3.0, 4.0, 0.0]),
            hist(1, &[3.0, 4.0, 0.0]),
            hist(2, &[0.0, 0.0, 5.0]),
        ];
        let weights = foolsgold_weights(&histories, 1.0).unwrap();
        assert_eq!(weights[0], (ClientId(0), 0.0));
        assert_eq!(weights[1], (ClientId(1), 0.0));
        assert_eq!(weights[2], (ClientId(2), 1.0));
    }

    #[test]
    fn mutually_orthogonal_histories_keep_full_weight() {
        let histories = vec![
            hist(0, &[1.0, 0.0, 0.0]),
            hist(1, &[0.0, 2.0, 0.0]),
            hist(2, &[0.0, 0.0, 3.0]),
        ];
        let weights = foolsgold_weights(&histories, 1.0).unwrap();
        assert!(weights.iter().all(|&(_, w)| w == 1.0), "{weights:?}");
    }

    #[test]
    fn copycat_pair_is_discarded_while_carrier_survives() {
        // Victim and copycat identical; the honest client correlates mildly with
        // the pair; the poison carrier's history points somewhere fresh.
        let histories = vec![
            hist(0, &[-1.0, 1.0, 0.0, 0.0]), // honest, faintly aligned with the pair
            hist(1, &[3.0, 4.0, 0.0, 0.0]),  // victim
            hist(2, &[3.0, 4.0, 0.0, 0.0]),  // copycat
            hist(3, &[0.0, 0.0, 1.0, 0.0]),  // carrier
        ];
        let weights = foolsgold_weights(&histories, 1.0).unwrap();
        assert_eq!(weights[1].1, 0.0, "victim should be zeroed: {weights:?}");
        assert_eq!(weights[2].1, 0.0, "copycat should be zeroed: {weights:?}");
        assert!(weights[3].1 >= 0.9, "carrier should survive: {weights:?}");
        assert!(weights[0].1 >= 0.9, "honest client should survive: {weights:?}");
    }

    #[test]
    fn foolsgold_needs_two_clients() {
        let histories = vec![hist(0, &[1.0])];
        assert!(foolsgold_weights(&histories, 1.0).is_err());
    }

    #[test]
    fn foolsgold_scales_updates_by_weight() {
        let updates = vec![upd(0, &[2.0, 0.0]), upd(1, &[2.0, 0.0]), upd(2, &[0.0, 4.0])];
        let histories = vec![
            hist(0, &[3.0, 4.0]),
            hist(1, &[3.0, 4.0]),
            hist(2, &[-4.0, 3.0]),
        ];
        let out = foolsgold_aggregate(&updates, &histories, 1.0).unwrap();
        assert_eq!(out.gamma[0], pv(&[0.0, 0.0]));
        assert_eq!(out.gamma[1], pv(&[0.0, 0.0]));
        assert_eq!(out.gamma[2], pv(&[0.0, 4.0]));
    }

    // ---- dispatcher ----

    #[test]
    fn aggregate_dispatches_by_kind() {
        let updates = vec![upd(0, &[1.0, 0.0]), upd(1, &[0.0, 1.0]), upd(2, &[1.0, 1.0]), upd(3, &[0.5, 0.5])];
        let histories: Vec<UpdateHistory> = updates
            .iter()
            .map(|u| UpdateHistory { client: u.client, total: u.delta.clone() })
            .collect();
        for kind in [
            AggregatorKind::FedAvg,
            AggregatorKind::Krum { f: 1 },
            AggregatorKind::MultiKrum { f: 1, m: None },
            AggregatorKind::FoolsGold { confidence: 1.0 },
            AggregatorKind::Safl(SaflParams::default()),
        ] {
            let out = aggregate(&kind, &updates, &histories, 1).unwrap();
            assert!(!out.gamma.is_empty(), "{kind:?} produced empty gamma");
        }
    }

    #[test]
    fn aggregator_names_resolve_to_defaults() {
        assert_eq!(AggregatorKind::from_name("fedavg").unwrap(), AggregatorKind::FedAvg);
        assert_eq!(
            AggregatorKind::from_name("safl").unwrap(),
            AggregatorKind::Safl(SaflParams::default())
        );
        assert!(AggregatorKind::from_name("median").is_err());
    }

    #[test]
    fn aggregator_json_accepts_shorthand_and_rejects_unknown_keys() {
        let k: AggregatorKind = serde_json::from_str("\"fedavg\"").unwrap();
        assert_eq!(k, AggregatorKind::FedAvg);
        let k: AggregatorKind = serde_json::from_str(r#"{"kind":"krum","f":2}"#).unwrap();
        assert_eq!(k, AggregatorKind::Krum { f: 2 });
        let k: AggregatorKind =
            serde_json::from_str(r#"{"kind":"safl","schedule":{"kind":"decay"}}"#).unwrap();
        assert_eq!(
            k,
            AggregatorKind::Safl(SaflParams {
                schedule: ThresholdSchedule::Decay { lambda: 0.8, r: 0.001 },
                ..SaflParams::default()
            })
        );

        let err = serde_json::from_str::<AggregatorKind>(r#"{"kind":"krum","f":2,"x":1}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("x"), "{err}");
        let err = serde_json::from_str::<AggregatorKind>(
            r#"{"kind":"safl","schedule":{"kind":"fixed","nu":0.6,"zz":1}}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("zz"), "{err}");
        assert!(serde_json::from_str::<AggregatorKind>("\"nonsense\"").is_err());
    }

    // ---- property tests ----

    fn client_vectors(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), n)
    }

    proptest! {
        #[test]
        fn partition_is_a_disjoint_cover(
            rows in client_vectors(6, 4),
            nu in 0.05f64..1.95,
            literal in any::<bool>(),
        ) {
            let basis: Vec<(ClientId, ParamVector)> =
                rows.iter().enumerate().map(|(i, v)| (ClientId(i), pv(v))).collect();
            let mode = if literal { GroupingMode::Literal } else { GroupingMode::Components };
            let p = safl_group(&basis, nu, mode).unwrap();
            let mut seen = std::collections::BTreeSet::new();
            for g in &p.groups {
                prop_assert!(g.len() >= 2);
                if literal {
                    prop_assert_eq!(g.len(), 2);
                }
                for id in g {
                    prop_assert!(seen.insert(*id), "duplicate {:?}", id);
                }
            }
            for id in &p.singletons {
                prop_assert!(seen.insert(*id), "duplicate {:?}", id);
            }
            prop_assert_eq!(seen.len(), rows.len());
        }

        #[test]
        fn foolsgold_weights_are_permutation_equivariant(
            rows in client_vectors(5, 4),
            swap_a in 0usize..5,
            swap_b in 0usize..5,
        ) {
            // Relabeling clients permutes weights with them, exactly.
            let histories: Vec<UpdateHistory> =
                rows.iter().enumerate().map(|(i, v)| hist(i, v)).collect();
            let base = foolsgold_weights(&histories, 1.0).unwrap();

            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.swap(swap_a, swap_b);
            let permuted: Vec<UpdateHistory> =
                (0..rows.len()).map(|i| hist(i, &rows[order[i]])).collect();
            let shuffled = foolsgold_weights(&permuted, 1.0).unwrap();
            for i in 0..rows.len() {
                prop_assert_eq!(shuffled[i].1.to_bits(), base[order[i]].1.to_bits());
            }
        }

        #[test]
        fn foolsgold_weights_stay_in_unit_interval(rows in client_vectors(4, 3)) {
            let histories: Vec<UpdateHistory> =
                rows.iter().enumerate().map(|(i, v)| hist(i, v)).collect();
            let weights = foolsgold_weights(&histories, 1.0).unwrap();
            for (_, w) in weights {
                prop_assert!((0.0..=1.0).contains(&w), "weight {} escaped [0,1]", w);
            }
        }

        #[test]
        fn krum_scores_match_oracle_on_random_instances(rows in client_vectors(6, 3)) {
            let updates: Vec<ClientUpdate> =
                rows.iter().enumerate().map(|(i, v)| upd(i, v)).collect();
            let f = 1;
            let out = krum_select(&updates, f, Some(1)).unwrap();
            let AggregationDetail::Krum { scores, .. } = &out.detail else { panic!() };
            // Independent re-computation: full distance matrix, sort, sum prefix.
            let n = rows.len();
            let keep = n - f - 2;
            for i in 0..n {
                let mut d: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum()
                    })
                    .collect();
                d.sort_by(f64::total_cmp);
                let want: f64 = d[..keep].iter().sum();
                prop_assert!((scores[i].1 - want).abs() <= 1e-9 * want.max(1.0));
            }
        }
    }
}
