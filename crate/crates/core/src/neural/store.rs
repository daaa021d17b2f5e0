//! Named parameter storage, the adaptive-moment optimizer, gradient
//! clipping, and the checkpoint format (JSON manifest + flat little-endian
//! binary of parameter values in manifest order).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::tensor::Tensor;

/// Handle to one parameter in a store. Ids are dense and follow insertion
/// order, which is also the checkpoint serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug)]
struct ParamEntry {
    name: String,
    value: Tensor,
    /// First and second moment estimates for the optimizer.
    m: Tensor,
    v: Tensor,
}

/// All weights of one model: values plus optimizer state.
#[derive(Debug)]
pub struct ParameterStore {
    params: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
    /// Optimizer timestep, shared by all parameters.
    step: u64,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> ParameterStore {
        ParameterStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter '{name}' registered twice"
        );
        let id = ParamId(self.params.len());
        let (rows, cols) = value.shape();
        self.params.push(ParamEntry {
            name: name.to_string(),
            m: Tensor::zeros(rows, cols),
            v: Tensor::zeros(rows, cols),
            value,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// New parameter with entries drawn uniformly from (−scale, scale).
    pub fn add_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Shift one coordinate; the probe used by finite-difference checks.
    pub fn nudge(&mut self, id: ParamId, index: usize, delta: f64) {
        self.params[id.0].value.as_mut_slice()[index] += delta;
    }

    /// One bias-corrected adaptive-moment update using the given gradients.
    /// Parameters absent from the gradient map are untouched. Increments
    /// the shared timestep.
    pub fn adam_step(&mut self, grads: &GradMap, hp: &AdamParams) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for (i, entry) in self.params.iter_mut().enumerate() {
            let Some(grad) = grads.get(ParamId(i)) else {
                continue;
            };
            assert_eq!(
                grad.shape(),
                entry.value.shape(),
                "gradient shape mismatch for '{}'",
                entry.name
            );
            if !grad.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient for parameter '{}' is not finite",
                    entry.name
                )));
            }
            let value = entry.value.as_mut_slice();
            let m = entry.m.as_mut_slice();
            let v = entry.v.as_mut_slice();
            for (k, &g) in grad.as_slice().iter().enumerate() {
                m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g;
                v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                value[k] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
            if !entry.value.all_finite() {
                return Err(Error::NonFinite(format!(
                    "parameter '{}' became non-finite after the optimizer step",
                    entry.name
                )));
            }
        }
        Ok(())
    }

    /// Snapshot all parameter values (not optimizer state), in `ParamId` order.
    /// Pair with [`restore_values`](Self::restore_values) to keep the best
    /// epoch while training continues past it.
    pub fn clone_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Overwrite parameter values from a snapshot taken on this same store.
    /// Optimizer state is left alone: a restored model is meant for
    /// inference or checkpointing, not for resuming the step sequence.
    pub fn restore_values(&mut self, snapshot: &[Tensor]) {
        assert_eq!(
            snapshot.len(),
            self.params.len(),
            "snapshot has {} parameters, store has {}",
            snapshot.len(),
            self.params.len()
        );
        for (entry, saved) in self.params.iter_mut().zip(snapshot) {
            assert_eq!(
                entry.value.shape(),
                saved.shape(),
                "snapshot shape mismatch for '{}'",
                entry.name
            );
            entry.value = saved.clone();
        }
    }

    /// Write `<prefix>.json` (manifest) and `<prefix>.bin` (values).
    pub fn save(&self, prefix: &Path, meta: &CheckpointMeta) -> Result<()> {
        let manifest = Manifest {
            format_version: 1,
            params: self
                .params
                .iter()
                .map(|p| ManifestParam {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    dtype: "f64le".to_string(),
                })
                .collect(),
            meta: meta.clone(),
        };
        let json_path = with_ext(prefix, "json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;
        fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

        let mut bytes = Vec::with_capacity(self.n_scalars() * 8);
        for p in &self.params {
            for &v in p.value.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bin_path = with_ext(prefix, "bin");
        fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
    }

    /// Read a checkpoint written by `save`. Optimizer state starts fresh.
    pub fn load(prefix: &Path) -> Result<(ParameterStore, CheckpointMeta)> {
        let json_path = with_ext(prefix, "json");
        let json = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: Manifest = serde_json::from_str(&json)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", json_path.display())))?;
        if manifest.format_version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                manifest.format_version
            )));
        }
        let bin_path = with_ext(prefix, "bin");
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let expected: usize = manifest.params.iter().map(|p| p.rows * p.cols * 8).sum();
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{}: expected {expected} bytes, found {}",
                bin_path.display(),
                bytes.len()
            )));
        }
        let mut store = ParameterStore::new();
        let mut offset = 0;
        for p in &manifest.params {
            if p.dtype != "f64le" {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has unsupported dtype '{}'",
                    p.name, p.dtype
                )));
            }
            let n = p.rows * p.cols;
            let mut data = Vec::with_capacity(n);
            for k in 0..n {
                let start = offset + k * 8;
                let v = f64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::Checkpoint(format!(
                        "parameter '{}' holds a non-finite value",
                        p.name
                    )));
                }
                data.push(v);
            }
            offset += n * 8;
            store.add(&p.name, Tensor::from_vec(p.rows, p.cols, data));
        }
        Ok((store, manifest.meta))
    }
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(ext);
    prefix.with_file_name(name)
}

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    rows: usize,
    cols: usize,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    params: Vec<ManifestParam>,
    meta: CheckpointMeta,
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Which architecture wrote this checkpoint.
    pub model_kind: String,
    pub seed: u64,
    /// Training epoch whose weights these are (1-based).
    pub epoch: usize,
    /// Name of the metric that selected this checkpoint.
    pub selection_metric: String,
    pub metric_value: f64,
    /// Architecture configuration, interpreted by the owning model type.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Per-parameter gradients, indexed by `ParamId`.
#[derive(Debug)]
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn new(n_params: usize) -> GradMap {
        GradMap {
            grads: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Add `delta` into the gradient for `id`.
    pub fn accumulate(&mut self, id: ParamId, delta: &Tensor) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(delta),
            slot => {
                *slot = Some(delta.clone());
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.squared_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients down so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm {
            let k = max_norm / norm;
            for g in self.grads.iter_mut().flatten() {
                g.scale_assign(k);
            }
        }
    }
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn adam_leaves_params_without_gradients_unchanged() {
        let mut store = ParameterStore::new();
        let id = store.add("w", Tensor::filled(2, 2, 1.5));
        let grads = GradMap::new(store.len());
        store.adam_step(&grads, &AdamParams::default()).unwrap();
        assert_eq!(store.get(id).as_slice(), &[1.5; 4]);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        // With bias correction, the first update is lr·g/(|g| + ε'), which
        // is within ε of lr regardless of the gradient's magnitude.
        let hp = AdamParams::default();
        for g in [3.0, -0.004, 250.0] {
            let mut store = ParameterStore::new();
            let id = store.add("w", Tensor::scalar(0.0));
            let mut grads = GradMap::new(1);
            grads.accumulate(id, &Tensor::scalar(g));
            store.adam_step(&grads, &hp).unwrap();
            let step = store.get(id).item();
            assert!(
                (step.abs() - hp.lr).abs() < 1e-6,
                "first step {step} for gradient {g}"
            );
            assert_eq!(step.signum(), -g.signum(), "moves against the gradient");
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize (a − 3)² + (b + 1)² from the origin.
        let mut store = ParameterStore::new();
        let a = store.add("a", Tensor::scalar(0.0));
        let b = store.add("b", Tensor::scalar(0.0));
        let hp = AdamParams {
            lr: 0.05,
            ..AdamParams::default()
        };
        let loss = |store: &ParameterStore| {
            let av = store.get(a).item();
            let bv = store.get(b).item();
            (av - 3.0).powi(2) + (bv + 1.0).powi(2)
        };
        let initial = loss(&store);
        for _ in 0..100 {
            let mut grads = GradMap::new(store.len());
            grads.accumulate(a, &Tensor::scalar(2.0 * (store.get(a).item() - 3.0)));
            grads.accumulate(b, &Tensor::scalar(2.0 * (store.get(b).item() + 1.0)));
            store.adam_step(&grads, &hp).unwrap();
        }
        assert!(
            loss(&store) < initial / 4.0,
            "loss {} did not drop from {initial}",
            loss(&store)
        );
    }

    #[test]
    fn adam_rejects_non_finite_gradients_by_name() {
        let mut store = ParameterStore::new();
        let id = store.add("bad_param", Tensor::scalar(0.0));
        let mut grads = GradMap::new(1);
        grads.accumulate(id, &Tensor::scalar(f64::NAN));
        let err = store.adam_step(&grads, &AdamParams::default()).unwrap_err();
        assert!(err.to_string().contains("bad_param"), "{err}");
    }

    #[test]
    fn gradient_accumulation_adds() {
        let mut grads = GradMap::new(1);
        let id = ParamId(0);
        grads.accumulate(id, &Tensor::scalar(1.0));
        grads.accumulate(id, &Tensor::scalar(2.5));
        assert_eq!(grads.get(id).unwrap().item(), 3.5);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut grads = GradMap::new(2);
        grads.accumulate(ParamId(0), &Tensor::from_vec(1, 2, vec![3.0, 0.0]));
        grads.accumulate(ParamId(1), &Tensor::scalar(4.0));
        assert_eq!(grads.global_norm(), 5.0);
        grads.clip_global_norm(1.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
        // Direction preserved.
        assert!((grads.get(ParamId(0)).unwrap().get(0, 0) - 0.6).abs() < 1e-12);

        // Already under the cap: untouched.
        let mut small = GradMap::new(1);
        small.accumulate(ParamId(0), &Tensor::scalar(0.5));
        small.clip_global_norm(1.0);
        assert_eq!(small.get(ParamId(0)).unwrap().item(), 0.5);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        store.add_uniform("emb", 7, 5, 0.1, &mut rng);
        store.add_uniform("w", 4, 7, 0.1, &mut rng);
        store.add_zeros("bias", 1, 4);
        let meta = CheckpointMeta {
            model_kind: "lm".to_string(),
            seed: 42,
            epoch: 3,
            selection_metric: "valid_perplexity".to_string(),
            metric_value: 17.25,
            config: serde_json::json!({"hidden": 4}),
        };
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("model");
        store.save(&prefix, &meta).unwrap();

        let (loaded, meta2) = ParameterStore::load(&prefix).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(meta2.model_kind, "lm");
        assert_eq!(meta2.metric_value, 17.25);
        assert_eq!(meta2.config["hidden"], 4);
        for name in ["emb", "w", "bias"] {
            let a = store.get(store.id(name).unwrap());
            let b = loaded.get(loaded.id(name).unwrap());
            assert_eq!(a, b, "parameter {name} changed across the round trip");
        }
    }

    #[test]
    fn checkpoint_rejects_truncated_binary() {
        let mut store = ParameterStore::new();
        store.add("w", Tensor::filled(2, 2, 1.0));
        let meta = CheckpointMeta {
            model_kind: "lm".into(),
            seed: 0,
            epoch: 0,
            selection_metric: "loss".into(),
            metric_value: 0.0,
            config: serde_json::Value::Null,
        };
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("m");
        store.save(&prefix, &meta).unwrap();
        let bin = dir.path().join("m.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes.pop();
        fs::write(&bin, bytes).unwrap();
        let err = ParameterStore::load(&prefix).unwrap_err();
        assert!(err.to_string().contains("bytes"), "{err}");
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_names_panic() {
        let mut store = ParameterStore::new();
        store.add("w", Tensor::scalar(0.0));
        store.add("w", Tensor::scalar(0.0));
    }

    #[test]
    fn snapshot_restores_values_but_not_step() {
        let mut store = ParameterStore::new();
        let w = store.add("w", Tensor::filled(1, 2, 3.0));
        let snap = store.clone_values();

        let mut grads = GradMap::new(store.len());
        grads.accumulate(w, &Tensor::filled(1, 2, 1.0));
        store.adam_step(&grads, &AdamParams::default()).unwrap();
        assert_ne!(store.get(w).as_slice(), &[3.0, 3.0]);

        store.restore_values(&snap);
        assert_eq!(store.get(w).as_slice(), &[3.0, 3.0]);
        assert_eq!(store.step, 1, "restore must not rewind the optimizer");
    }
}
