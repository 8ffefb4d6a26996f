//! Classifier models: softmax regression, optionally with one hidden ReLU layer.
//!
//! Parameters live in a single flat vector with a fixed layer-major layout —
//! each layer's weights (row-major, output × input) followed by its biases. All
//! forward and backward passes accumulate in index order so that identical inputs
//! give bit-identical outputs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, Shard};
use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::ClientId;

/// Network shape. `hidden_dim == 0` means plain softmax regression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden_dim: usize,
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        Ok(())
    }

    /// Total number of parameters under the fixed layout.
    pub fn param_count(&self) -> usize {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
        if h == 0 {
            c * d + c
        } else {
            h * d + h + c * h + c
        }
    }
}

/// A model: its shape plus the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: ModelArch,
    pub params: ParamVector,
}

/// The weight matrices and bias vectors of a model, unpacked layer by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layers {
    /// Row-major weight matrices, one per layer, each `out_dim * in_dim` long.
    pub weights: Vec<Vec<f64>>,
    /// Bias vectors, one per layer.
    pub biases: Vec<Vec<f64>>,
}

/// Unpacks a flat parameter vector into per-layer weights and biases.
pub fn split_params(arch: &ModelArch, params: &ParamVector) -> Result<Layers> {
    if params.len() != arch.param_count() {
        return Err(Error::DimensionMismatch { expected: arch.param_count(), actual: params.len() });
    }
    let p = params.as_slice();
    let (d, c, h) = (arch.input_dim, arch.num_classes, arch.hidden_dim);
    let shapes: Vec<(usize, usize)> =
        if h == 0 { vec![(c, d)] } else { vec![(h, d), (c, h)] };
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut at = 0;
    for (out, inp) in shapes {
        weights.push(p[at..at + out * inp].to_vec());
        at += out * inp;
        biases.push(p[at..at + out].to_vec());
        at += out;
    }
    Ok(Layers { weights, biases })
}

/// Packs per-layer weights and biases back into the flat layout.
pub fn flatten_params(layers: &Layers) -> ParamVector {
    let mut out = Vec::new();
    for (w, b) in layers.weights.iter().zip(&layers.biases) {
        out.extend_from_slice(w);
        out.extend_from_slice(b);
    }
    ParamVector::new(out)
}

/// Glorot-uniform initialization: weights i.i.d. in [-s, s] with
/// s = sqrt(6 / (fan_in + fan_out)) per layer, biases zero. Fully determined by the seed.
pub fn init_model(arch: &ModelArch, seed: u64) -> Result<ModelState> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, c, h) = (arch.input_dim, arch.num_classes, arch.hidden_dim);
    let shapes: Vec<(usize, usize)> =
        if h == 0 { vec![(c, d)] } else { vec![(h, d), (c, h)] };
    let mut params = Vec::with_capacity(arch.param_count());
    for (out, inp) in shapes {
        let s = (6.0 / (inp + out) as f64).sqrt();
        for _ in 0..out * inp {
            params.push(rng.gen_range(-s..=s));
        }
        params.extend(std::iter::repeat(0.0).take(out));
    }
    Ok(ModelState { arch: *arch, params: ParamVector::new(params) })
}

/// Forward scratch space, reused across examples to avoid per-call allocation.
struct Scratch {
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl Scratch {
    fn new(arch: &ModelArch) -> Self {
        Scratch {
            pre_hidden: vec![0.0; arch.hidden_dim],
            hidden: vec![0.0; arch.hidden_dim],
            logits: vec![0.0; arch.num_classes],
            probs: vec![0.0; arch.num_classes],
        }
    }
}

fn check_example(arch: &ModelArch, ex: &Example) -> Result<()> {
    if ex.features.len() != arch.input_dim {
        return Err(Error::DimensionMismatch { expected: arch.input_dim, actual: ex.features.len() });
    }
    if ex.label >= arch.num_classes {
        return Err(Error::config(format!(
            "label {} out of range for {} classes",
            ex.label, arch.num_classes
        )));
    }
    Ok(())
}

/// Fills `scratch.logits` (and hidden activations when present) for one example.
fn forward_logits(m: &ModelState, x: &[f64], scratch: &mut Scratch) {
    let (d, c, h) = (m.arch.input_dim, m.arch.num_classes, m.arch.hidden_dim);
    let p = m.params.as_slice();
    if h == 0 {
        let bias_at = c * d;
        for cls in 0..c {
            let mut z = p[bias_at + cls];
            let row = &p[cls * d..(cls + 1) * d];
            for j in 0..d {
                z += row[j] * x[j];
            }
            scratch.logits[cls] = z;
        }
    } else {
        let b1_at = h * d;
        let w2_at = b1_at + h;
        let b2_at = w2_at + c * h;
        for u in 0..h {
            let mut z = p[b1_at + u];
            let row = &p[u * d..(u + 1) * d];
            for j in 0..d {
                z += row[j] * x[j];
            }
            scratch.pre_hidden[u] = z;
            scratch.hidden[u] = z.max(0.0);
        }
        for cls in 0..c {
            let mut z = p[b2_at + cls];
            let row = &p[w2_at + cls * h..w2_at + (cls + 1) * h];
            for u in 0..h {
                z += row[u] * scratch.hidden[u];
            }
            scratch.logits[cls] = z;
        }
    }
}

/// Computes log-softmax probabilities into `scratch.probs` (as plain probabilities)
/// and returns the negative log-likelihood of `label`. Max-subtraction keeps the
/// exponentials in range.
fn softmax_nll(scratch: &mut Scratch, label: usize) -> f64 {
    let z = &scratch.logits;
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (c, &zc) in z.iter().enumerate() {
        let e = (zc - zmax).exp();
        scratch.probs[c] = e;
        sum += e;
    }
    for pc in scratch.probs.iter_mut() {
        *pc /= sum;
    }
    // -log p_y, computed through the log-sum-exp for accuracy.
    zmax + sum.ln() - z[label]
}

/// Mean cross-entropy loss of a batch.
pub fn forward_loss(m: &ModelState, batch: &[Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("forward_loss batch"));
    }
    let mut scratch = Scratch::new(&m.arch);
    let mut total = 0.0;
    for ex in batch {
        check_example(&m.arch, ex)?;
        forward_logits(m, ex.features, &mut scratch);
        total += softmax_nll(&mut scratch, ex.label);
    }
    Ok(total / batch.len() as f64)
}

/// Analytic gradient of [`forward_loss`] with respect to every parameter,
/// in the same flat layout.
pub fn gradient(m: &ModelState, batch: &[Example]) -> Result<ParamVector> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("gradient batch"));
    }
    let (d, c, h) = (m.arch.input_dim, m.arch.num_classes, m.arch.hidden_dim);
    let p = m.params.as_slice();
    let mut scratch = Scratch::new(&m.arch);
    let mut g = vec![0.0; m.params.len()];
    for ex in batch {
        check_example(&m.arch, ex)?;
        forward_logits(m, ex.features, &mut scratch);
        softmax_nll(&mut scratch, ex.label);
        // dL/dlogit_c = p_c - [c == y]
        scratch.probs[ex.label] -= 1.0;
        if h == 0 {
            let bias_at = c * d;
            for cls in 0..c {
                let dz = scratch.probs[cls];
                let row = &mut g[cls * d..(cls + 1) * d];
                for j in 0..d {
                    row[j] += dz * ex.features[j];
                }
                g[bias_at + cls] += dz;
            }
        } else {
            let b1_at = h * d;
            let w2_at = b1_at + h;
            let b2_at = w2_at + c * h;
            let mut dhidden = vec![0.0; h];
            for cls in 0..c {
                let dz = scratch.probs[cls];
                for u in 0..h {
                    g[w2_at + cls * h + u] += dz * scratch.hidden[u];
                    dhidden[u] += dz * p[w2_at + cls * h + u];
                }
                g[b2_at + cls] += dz;
            }
            for u in 0..h {
                // ReLU gate: gradient flows only through active units.
                if scratch.pre_hidden[u] > 0.0 {
                    let dz = dhidden[u];
                    for j in 0..d {
                        g[u * d + j] += dz * ex.features[j];
                    }
                    g[b1_at + u] += dz;
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for gi in &mut g {
        *gi *= inv;
    }
    Ok(ParamVector::new(g))
}

/// Central-difference approximation of [`gradient`], used as a verification oracle.
///
/// Each parameter is displaced by ±h and the loss difference divided by 2h. This is
/// O(params × batch) per call — strictly a testing tool.
pub fn finite_difference_gradient(m: &ModelState, batch: &[Example], h: f64) -> Result<ParamVector> {
    let mut out = vec![0.0; m.params.len()];
    let mut probe = m.clone();
    for i in 0..m.params.len() {
        let orig = m.params[i];
        probe.params.as_mut_slice()[i] = orig + h;
        let up = forward_loss(&probe, batch)?;
        probe.params.as_mut_slice()[i] = orig - h;
        let down = forward_loss(&probe, batch)?;
        probe.params.as_mut_slice()[i] = orig;
        out[i] = (up - down) / (2.0 * h);
    }
    Ok(ParamVector::new(out))
}

/// The class with the highest logit; ties resolve to the lowest class index.
pub fn predict(m: &ModelState, features: &[f64]) -> Result<usize> {
    if features.len() != m.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: m.arch.input_dim,
            actual: features.len(),
        });
    }
    let mut scratch = Scratch::new(&m.arch);
    forward_logits(m, features, &mut scratch);
    let mut best = 0;
    for c in 1..m.arch.num_classes {
        if scratch.logits[c] > scratch.logits[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Whole-dataset evaluation: mean loss, accuracy, and a confusion matrix
/// indexed `[true_class][predicted_class]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(m: &ModelState, ds: &Dataset) -> Result<EvalReport> {
    if ds.num_classes() != m.arch.num_classes {
        return Err(Error::DimensionMismatch {
            expected: m.arch.num_classes,
            actual: ds.num_classes(),
        });
    }
    let c = m.arch.num_classes;
    let mut scratch = Scratch::new(&m.arch);
    let mut confusion = vec![vec![0usize; c]; c];
    let mut total = 0.0;
    let mut correct = 0usize;
    for i in 0..ds.len() {
        let ex = ds.example(i);
        check_example(&m.arch, &ex)?;
        forward_logits(m, ex.features, &mut scratch);
        total += softmax_nll(&mut scratch, ex.label);
        let mut pred = 0;
        for cls in 1..c {
            if scratch.logits[cls] > scratch.logits[pred] {
                pred = cls;
            }
        }
        confusion[ex.label][pred] += 1;
        if pred == ex.label {
            correct += 1;
        }
    }
    Ok(EvalReport {
        loss: total / ds.len() as f64,
        accuracy: correct as f64 / ds.len() as f64,
        confusion,
    })
}

/// Local SGD hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTrainConfig {
    #[serde(default = "LocalTrainConfig::default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "LocalTrainConfig::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "LocalTrainConfig::default_local_steps")]
    pub local_steps: usize,
}

impl LocalTrainConfig {
    fn default_learning_rate() -> f64 {
        0.1
    }
    fn default_batch_size() -> usize {
        16
    }
    fn default_local_steps() -> usize {
        4
    }
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        LocalTrainConfig {
            learning_rate: Self::default_learning_rate(),
            batch_size: Self::default_batch_size(),
            local_steps: Self::default_local_steps(),
        }
    }
}

/// One client's update for one round: the additive parameter delta
/// `w_after - w_before` it wants applied to the global model.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client: ClientId,
    pub round: u32,
    pub delta: ParamVector,
}

/// Runs local SGD from the global model over one shard and returns the update.
///
/// Batches are drawn without replacement within an epoch from a seeded shuffle;
/// when the shard is exhausted it is reshuffled. Within each batch the examples are
/// processed in canonical shard order, so batch *composition* is random but the
/// accumulation order is fixed. The returned delta is the exact sum of the
/// `-learning_rate * gradient` steps taken.
pub fn local_train(
    global: &ModelState,
    ds: &Dataset,
    shard: &Shard,
    cfg: &LocalTrainConfig,
    round: u32,
    seed: u64,
) -> Result<ClientUpdate> {
    if shard.is_empty() {
        return Err(Error::EmptyInput("local_train shard"));
    }
    if cfg.batch_size == 0 || cfg.local_steps == 0 {
        return Err(Error::config("batch_size and local_steps must be at least 1"));
    }
    if !cfg.learning_rate.is_finite() || cfg.learning_rate < 0.0 {
        return Err(Error::config("learning_rate must be a finite non-negative real"));
    }
    let n = shard.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut delta = ParamVector::zeros(global.params.len());
    let mut working = global.clone();
    for _ in 0..cfg.local_steps {
        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let take = cfg.batch_size.min(n - cursor);
        let mut batch_pos: Vec<usize> = order[cursor..cursor + take].to_vec();
        cursor += take;
        batch_pos.sort_unstable();
        let batch: Vec<Example> = batch_pos.iter().map(|&k| shard.example(ds, k)).collect();

        // working = global + delta, rebuilt so delta stays the exact step sum.
        working.params = global.params.clone();
        working.params.add_scaled(&delta, 1.0)?;
        let g = gradient(&working, &batch)?;
        delta.add_scaled(&g, -cfg.learning_rate)?;
    }
    Ok(ClientUpdate { client: shard.owner, round, delta })
}
