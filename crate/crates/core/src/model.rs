//! The full model: subgraph generator plus a shared graph encoder, and the
//! joint objective
//!
//! ```text
//! L = CE(G_sub, Y) + conn_weight · L_con + mi_weight · I(Z_sub, Z)
//! ```
//!
//! evaluated on one mini-batch. `Z` and `Z_sub` are the pooled embeddings of
//! the full graphs and of their masked subgraphs under the same encoder.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, EncoderParams, Mode};
use crate::entropy::{self, EntropyConfig};
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorParams, GumbelNoise, MaskMode, DEFAULT_GEN_HIDDEN};
use crate::graph::Graph;
use crate::params::{ParamKind, RunningStats, Visitor, VisitorMut};
use crate::tape::{BatchStats, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub gen_hidden: usize,
    pub mask_mode: MaskMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            gen_hidden: DEFAULT_GEN_HIDDEN,
            mask_mode: MaskMode::Edge,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.hidden == 0 || e.layers == 0 || e.pool_dim == 0 || self.gen_hidden == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&e.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", e.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub generator: GeneratorParams<T>,
    pub encoder: EncoderParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut Visitor<'_, T, U>) -> ModelParams<U> {
        ModelParams {
            generator: self.generator.map(f),
            encoder: self.encoder.map(f),
        }
    }

    pub fn for_each_mut(&mut self, f: &mut VisitorMut<'_, T>) {
        self.generator.for_each_mut(f);
        self.encoder.for_each_mut(f);
    }

    /// Leaves in canonical order.
    pub fn leaves(&self) -> Vec<(String, T, ParamKind)>
    where
        T: Clone,
    {
        let mut out = Vec::new();
        self.map(&mut |name, t, kind| out.push((name.to_string(), t.clone(), kind)));
        out
    }
}

/// Weights and hyperparameters of the objective that are not trained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub conn_weight: f64,
    pub mi_weight: f64,
    pub tau: f64,
    pub entropy: EntropyConfig,
    /// Fixed kernel widths `(σ_Z, σ_Zsub)`; `None` estimates them per batch.
    pub sigma_override: Option<(f64, f64)>,
}

/// Random draws for one stochastic forward pass.
#[derive(Debug, Clone)]
pub struct BatchNoise {
    pub gumbel: GumbelNoise,
    pub dropout: DMatrix<f64>,
}

/// Tape handles for one objective evaluation.
pub struct ForwardPass {
    pub total: Var,
    pub ce: Var,
    pub con: Var,
    pub mi: Var,
    pub logits: Var,
    pub probs: Var,
    pub mask: Var,
    pub z: Var,
    pub z_sub: Var,
    pub sigmas: (f64, f64),
    /// Train-mode batch statistics of the subgraph path.
    pub sub_stats: Vec<[BatchStats; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub n_rois: usize,
    pub params: ModelParams<DMatrix<f64>>,
    pub running: Vec<[RunningStats; 2]>,
}

impl Model {
    pub fn init(config: ModelConfig, n_rois: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if n_rois < 2 {
            return Err(Error::invalid("n_rois must be at least 2"));
        }
        let generator = GeneratorParams::init(n_rois, config.gen_hidden, rng);
        let e = &config.encoder;
        let encoder = EncoderParams::init(n_rois, e.hidden, e.layers, e.pool_dim, rng);
        let running = encoder.fresh_running_stats();
        Ok(Model {
            config,
            n_rois,
            params: ModelParams { generator, encoder },
            running,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.encoder.pool_dim * self.config.encoder.pool_dim
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.params.map(&mut |_, m, _| tape.leaf(m.clone()))
    }

    fn check_batch(&self, batch: &[&Graph]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if let Some(g) = batch.iter().find(|g| g.n_nodes() != self.n_rois) {
            return Err(Error::shape(
                format!("{0}x{0} graphs", self.n_rois),
                format!("{0}x{0}", g.n_nodes()),
            ));
        }
        Ok(())
    }

    /// Draws Gumbel and dropout noise for a batch of `blocks` graphs.
    pub fn draw_noise(&self, blocks: usize, gumbel_rng: &mut impl Rng, dropout_rng: &mut impl Rng) -> BatchNoise {
        BatchNoise {
            gumbel: GumbelNoise::draw(self.config.mask_mode, blocks, self.n_rois, gumbel_rng),
            dropout: encoder::dropout_mask(blocks, self.embedding_dim(), self.config.encoder.dropout, dropout_rng),
        }
    }

    /// Records the joint objective for `batch` on `tape`.
    ///
    /// With `noise` the subgraph mask is a relaxed Gumbel sample and dropout
    /// is applied to the classifier input; without it the mask is the edge
    /// probability matrix itself. `mode` selects batch-norm statistics.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &ModelParams<Var>,
        batch: &[&Graph],
        noise: Option<&BatchNoise>,
        mode: Mode,
        settings: &ObjectiveSettings,
    ) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        if batch.len() < 2 {
            return Err(Error::invalid("the objective needs at least 2 graphs per batch"));
        }
        let n = self.n_rois;
        let (x, adj) = generator::batch_features(batch);
        let labels: Vec<usize> = batch.iter().map(|g| g.label).collect();

        let x = tape.leaf(x);
        let probs = generator::edge_probs_on_tape(tape, &bound.generator, x, n);
        let mask = match noise {
            Some(noise) => generator::relaxed_mask_on_tape(tape, probs, &noise.gumbel, settings.tau, n),
            None => probs,
        };
        let x_sub = tape.mul(x, mask);

        let (h, _) = encoder::gin_on_tape(tape, &bound.encoder, &self.running, x, &adj, mode);
        let z = encoder::sopool_on_tape(tape, bound.encoder.pool, h, n);
        let (h_sub, sub_stats) = encoder::gin_on_tape(tape, &bound.encoder, &self.running, x_sub, &adj, mode);
        let z_sub = encoder::sopool_on_tape(tape, bound.encoder.pool, h_sub, n);

        let dropout = noise.map(|nz| nz.dropout.clone());
        let logits = encoder::logits_on_tape(tape, &bound.encoder.classifier, z_sub, dropout);
        let ce = tape.softmax_cross_entropy(logits, &labels);
        let con = tape.connectivity_loss(mask, &adj);

        let sigmas = match settings.sigma_override {
            Some(s) => s,
            None => (
                width_or_unit(tape.value(z), settings.entropy.knn_k)?,
                width_or_unit(tape.value(z_sub), settings.entropy.knn_k)?,
            ),
        };
        let mi = mutual_information_on_tape(tape, z, z_sub, sigmas, &settings.entropy)?;

        let con_w = tape.scale(con, settings.conn_weight);
        let mi_w = tape.scale(mi, settings.mi_weight);
        let total = tape.add(ce, con_w);
        let total = tape.add(total, mi_w);

        Ok(ForwardPass {
            total,
            ce,
            con,
            mi,
            logits,
            probs,
            mask,
            z,
            z_sub,
            sigmas,
            sub_stats,
        })
    }

    /// Evaluation-mode logits and edge probabilities, processed in chunks.
    pub fn infer(&self, graphs: &[&Graph]) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        self.check_batch(graphs)?;
        let n = self.n_rois;
        let mut logits = DMatrix::zeros(graphs.len(), 2);
        let mut masks = Vec::with_capacity(graphs.len());
        for (c, chunk) in graphs.chunks(64).enumerate() {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let (x, adj) = generator::batch_features(chunk);
            let x = tape.leaf(x);
            let probs = generator::edge_probs_on_tape(&mut tape, &bound.generator, x, n);
            let x_sub = tape.mul(x, probs);
            let (h, _) = encoder::gin_on_tape(&mut tape, &bound.encoder, &self.running, x_sub, &adj, Mode::Eval);
            let z = encoder::sopool_on_tape(&mut tape, bound.encoder.pool, h, n);
            let l = encoder::logits_on_tape(&mut tape, &bound.encoder.classifier, z, None);
            logits.rows_mut(c * 64, chunk.len()).copy_from(tape.value(l));
            let pv = tape.value(probs);
            masks.extend((0..chunk.len()).map(|b| pv.rows(b * n, n).into_owned()));
        }
        Ok((logits, masks))
    }

    /// Predicted class per graph (ties go to class 0).
    pub fn predict(&self, graphs: &[&Graph]) -> Result<Vec<usize>> {
        let (logits, _) = self.infer(graphs)?;
        Ok(logits
            .row_iter()
            .map(|r| usize::from(r[1] > r[0]))
            .collect())
    }

    pub fn accuracy(&self, graphs: &[&Graph]) -> Result<f64> {
        let pred = self.predict(graphs)?;
        let correct = pred.iter().zip(graphs).filter(|(p, g)| **p == g.label).count();
        Ok(correct as f64 / graphs.len() as f64)
    }

    /// Evaluation-mode edge probability matrix per graph.
    pub fn edge_probabilities(&self, graphs: &[&Graph]) -> Result<Vec<DMatrix<f64>>> {
        Ok(self.infer(graphs)?.1)
    }

    pub fn update_running_stats(&mut self, stats: &[[BatchStats; 2]]) {
        for (run, batch) in self.running.iter_mut().zip(stats) {
            run[0].update(&batch[0]);
            run[1].update(&batch[1]);
        }
    }
}

/// Kernel width, falling back to 1 when every embedding coincides (any
/// width then yields the same rank-one Gram matrix).
fn width_or_unit(z: &DMatrix<f64>, k: usize) -> Result<f64> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embeddings".into()));
    }
    let first = z.row(0);
    if z.row_iter().all(|r| r == first) {
        return Ok(1.0);
    }
    entropy::batch_kernel_width(z, k)
}

/// `H(Z) + H(Z_sub) - H(Z, Z_sub)` recorded on the tape.
pub(crate) fn mutual_information_on_tape(
    tape: &mut Tape,
    z: Var,
    z_sub: Var,
    sigmas: (f64, f64),
    cfg: &EntropyConfig,
) -> Result<Var> {
    let ka = tape.rbf_gram(z, sigmas.0);
    let kb = tape.rbf_gram(z_sub, sigmas.1);
    let da = tape.trace_normalize(ka);
    let db = tape.trace_normalize(kb);
    let ha = tape.renyi_entropy(da, cfg.renyi_alpha, cfg.eig_floor)?;
    let hb = tape.renyi_entropy(db, cfg.renyi_alpha, cfg.eig_floor)?;
    let joint = tape.mul(da, db);
    let dj = tape.trace_normalize(joint);
    let hab = tape.renyi_entropy(dj, cfg.renyi_alpha, cfg.eig_floor)?;
    let sum = tape.add(ha, hb);
    Ok(tape.sub(sum, hab))
}

// --- checkpoints -----------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "brainib-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    /// Row-major values.
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    n_rois: usize,
    model: ModelConfig,
    tensors: Vec<TensorRecord>,
    running_stats: Vec<[RunningStats; 2]>,
    /// Free-form echo of the run configuration that produced the weights.
    #[serde(default)]
    run_config: serde_json::Value,
}

impl Model {
    /// Serializes to a self-describing JSON checkpoint.
    pub fn to_checkpoint_json(&self, run_config: serde_json::Value) -> Result<String> {
        let tensors = self
            .params
            .leaves()
            .into_iter()
            .map(|(name, m, _)| TensorRecord {
                name,
                shape: [m.nrows(), m.ncols()],
                data: m.transpose().as_slice().to_vec(),
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            n_rois: self.n_rois,
            model: self.config,
            tensors,
            running_stats: self.running.clone(),
            run_config,
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Model> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("unsupported checkpoint format {:?}", file.format)));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Model::init(file.model, file.n_rois, &mut rng)?;
        let mut records = file.tensors.into_iter();
        let mut failure = None;
        model.params.for_each_mut(&mut |name, m, _| {
            if failure.is_some() {
                return;
            }
            match records.next() {
                Some(r) if r.name == name && r.shape == [m.nrows(), m.ncols()] && r.data.len() == m.len() => {
                    *m = DMatrix::from_row_slice(r.shape[0], r.shape[1], &r.data);
                }
                Some(r) => failure = Some(format!("tensor {:?} {:?} does not match {name}", r.name, r.shape)),
                None => failure = Some(format!("missing tensor {name}")),
            }
        });
        if let Some(msg) = failure {
            return Err(Error::invalid(msg));
        }
        if records.next().is_some() {
            return Err(Error::invalid("checkpoint has extra tensors"));
        }
        if file.running_stats.len() != model.running.len() {
            return Err(Error::invalid("checkpoint running statistics do not match the model"));
        }
        model.running = file.running_stats;
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path, run_config: serde_json::Value) -> Result<()> {
        let text = self.to_checkpoint_json(run_config)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_checkpoint_json(&text)
    }

    /// Reads the run-config echo stored alongside the weights.
    pub fn checkpoint_run_config(text: &str) -> Result<serde_json::Value> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        Ok(file.run_config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic, SyntheticConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                hidden: 8,
                layers: 2,
                pool_dim: 3,
                dropout: 0.5,
            },
            gen_hidden: 4,
            mask_mode: MaskMode::Edge,
        }
    }

    fn settings() -> ObjectiveSettings {
        ObjectiveSettings {
            conn_weight: 0.001,
            mi_weight: 0.1,
            tau: 1.0,
            entropy: EntropyConfig::default(),
            sigma_override: None,
        }
    }

    #[test]
    fn leaves_follow_canonical_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::init(small_config(), 6, &mut rng).unwrap();
        let names: Vec<String> = model.params.leaves().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names[0], "generator.lin1.weight");
        assert_eq!(names[4], "encoder.gin0.eps");
        assert_eq!(names.last().unwrap(), "encoder.classifier.bias");
        // generator (4) + per layer (1 + 2 + 2 + 2 + 2) + pool + classifier (2)
        assert_eq!(names.len(), 4 + 2 * 9 + 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = Model::init(small_config(), 6, &mut rng).unwrap();
        model.running[0][1].mean[2] = 0.25;
        let text = model.to_checkpoint_json(serde_json::json!({"seed": 2})).unwrap();
        let back = Model::from_checkpoint_json(&text).unwrap();
        assert_eq!(back, model);
        assert_eq!(Model::checkpoint_run_config(&text).unwrap()["seed"], 2);

        let other = Model::init(ModelConfig { gen_hidden: 5, ..small_config() }, 6, &mut rng).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&other.to_checkpoint_json(serde_json::Value::Null).unwrap()).unwrap();
        v["model"]["gen_hidden"] = 4.into();
        assert!(Model::from_checkpoint_json(&v.to_string()).is_err());
    }

    #[test]
    fn zero_weights_reduce_to_masked_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = generate_synthetic(&SyntheticConfig {
            n_rois: 6,
            n_per_class: 3,
            planted_edges: 3,
            ..Default::default()
        })
        .unwrap();
        let batch: Vec<&Graph> = ds.graphs.iter().collect();
        let model = Model::init(small_config(), 6, &mut rng).unwrap();
        let noise = model.draw_noise(batch.len(), &mut rng.clone(), &mut rng);
        let plain = ObjectiveSettings {
            conn_weight: 0.0,
            mi_weight: 0.0,
            ..settings()
        };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let pass = model.forward(&mut tape, &bound, &batch, Some(&noise), Mode::Train, &plain).unwrap();
        assert_eq!(tape.scalar(pass.total), tape.scalar(pass.ce));

        // recompute CE on explicitly masked graphs through the encoder alone
        let mask = tape.value(pass.mask).clone();
        let masked: Vec<Graph> = batch
            .iter()
            .enumerate()
            .map(|(b, g)| {
                let m = mask.rows(b * 6, 6).into_owned();
                generator::apply_mask(g, &generator::EdgeMask { probs: m.clone(), sampled: m }).unwrap()
            })
            .collect();
        let refs: Vec<&Graph> = masked.iter().collect();
        let mut t2 = Tape::new();
        let b2 = model.bind(&mut t2);
        let (x, adj) = generator::batch_features(&refs);
        let x = t2.leaf(x);
        let (h, _) = encoder::gin_on_tape(&mut t2, &b2.encoder, &model.running, x, &adj, Mode::Train);
        let z = encoder::sopool_on_tape(&mut t2, b2.encoder.pool, h, 6);
        let l = encoder::logits_on_tape(&mut t2, &b2.encoder.classifier, z, Some(noise.dropout.clone()));
        let labels: Vec<usize> = refs.iter().map(|g| g.label).collect();
        let ce = t2.softmax_cross_entropy(l, &labels);
        assert!((t2.scalar(ce) - tape.scalar(pass.ce)).abs() < 1e-12);
    }

    #[test]
    fn forward_components_are_well_formed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = generate_synthetic(&SyntheticConfig {
            n_rois: 6,
            n_per_class: 4,
            planted_edges: 3,
            ..Default::default()
        })
        .unwrap();
        let batch: Vec<&Graph> = ds.graphs.iter().collect();
        let model = Model::init(small_config(), 6, &mut rng).unwrap();
        let noise = model.draw_noise(batch.len(), &mut rng.clone(), &mut rng);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let pass = model.forward(&mut tape, &bound, &batch, Some(&noise), Mode::Train, &settings()).unwrap();
        assert!(tape.scalar(pass.ce) >= 0.0);
        assert!(tape.scalar(pass.con) >= 0.0);
        let mi = tape.scalar(pass.mi);
        assert!(mi >= -1e-6 && mi <= (batch.len() as f64).log2() + 1e-6);
        assert_eq!(tape.value(pass.z).shape(), (8, 9));
        assert_eq!(pass.sub_stats.len(), 2);

        let single = &batch[..1];
        assert!(model.forward(&mut Tape::new(), &bound, single, None, Mode::Eval, &settings()).is_err());
    }

    #[test]
    fn inference_masks_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = generate_synthetic(&SyntheticConfig {
            n_rois: 5,
            n_per_class: 40,
            planted_edges: 2,
            ..Default::default()
        })
        .unwrap();
        let graphs: Vec<&Graph> = ds.graphs.iter().collect();
        let model = Model::init(small_config(), 5, &mut rng).unwrap();
        let (logits, masks) = model.infer(&graphs).unwrap();
        assert_eq!(logits.nrows(), 80);
        assert_eq!(masks.len(), 80);
        for m in &masks {
            assert_eq!(crate::graph::max_asymmetry(m), 0.0);
            assert!((0..5).all(|i| m[(i, i)] == 0.0));
        }
        // chunked inference equals single-graph inference
        let one = model.infer(&graphs[70..71]).unwrap().0;
        assert!((one.row(0) - logits.row(70)).amax() < 1e-12);
    }
}
