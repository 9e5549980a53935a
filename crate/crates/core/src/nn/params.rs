//! Named parameter storage and the per-pass forward context.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;
use crate::tnsr;

/// Ordered collection of named trainable arrays plus non-trainable buffers
/// (batch-norm running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing buffer `{name}`")))
    }

    /// Trainable arrays in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Scalars in arrays whose name starts with `prefix`.
    pub fn num_scalars_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Writes one TNSR file per array and a `manifest.txt` of
    /// `param|buffer <name> <file>` lines.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let all = self
            .params
            .iter()
            .map(|e| ("param", e))
            .chain(self.buffers.iter().map(|e| ("buffer", e)));
        for (i, (kind, (name, t))) in all.enumerate() {
            let file = format!("{i:04}.tnsr");
            tnsr::write(&dir.join(&file), t)?;
            manifest.push_str(&format!("{kind} {name} {file}\n"));
        }
        let path = dir.join("manifest.txt");
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut store = ParamStore::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [kind, name, file] = parts[..] else {
                return Err(Error::Parse {
                    path: path.clone(),
                    msg: format!("line {}: expected `kind name file`", lineno + 1),
                });
            };
            let t = tnsr::read(&dir.join(file))?;
            match kind {
                "param" => store.insert(name, t),
                "buffer" => store.insert_buffer(name, t),
                other => {
                    return Err(Error::Parse {
                        path: path.clone(),
                        msg: format!("line {}: unknown kind `{other}`", lineno + 1),
                    })
                }
            }
        }
        Ok(store)
    }
}

/// State for one forward (and optional backward) pass: owns the tape and
/// binds stored parameters onto it on first use.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    /// Batch-norm layers normalize with batch statistics when true.
    pub training: bool,
    track_grad: bool,
    bn_updates: Vec<(String, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, training: bool, track_grad: bool) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            training,
            track_grad,
            bn_updates: Vec::new(),
        }
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(tape: Tape, store: &'a ParamStore, training: bool, track_grad: bool) -> Self {
        Ctx {
            tape,
            ..Self::new(store, training, track_grad)
        }
    }

    /// Uses `var` for parameter `name` instead of a leaf taken from the store.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    /// Training pass: batch statistics, gradients tracked.
    pub fn train(store: &'a ParamStore) -> Self {
        Self::new(store, true, true)
    }

    /// Inference pass: running statistics, nothing tracked.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, false, false)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.tape.leaf(t, self.track_grad);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub(crate) fn record_bn(&mut self, layer: &str, stats: BatchStats) {
        self.bn_updates.push((layer.to_string(), stats));
    }

    /// Batch statistics gathered by training-mode batch norms, in call order.
    pub fn bn_updates(&self) -> &[(String, BatchStats)] {
        &self.bn_updates
    }

    /// Gradients of every bound parameter, zero-filled for parameters the
    /// backward pass did not reach.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .tape
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn bound(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("caga-params-{}", std::process::id()));
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::from_fn(&[2, 3], |i| i as crate::Real * 0.5));
        s.insert("a.bias", Tensor::zeros(&[2]));
        s.insert_buffer("bn.running_var", Tensor::ones(&[4]));
        s.save(&dir).unwrap();
        let back = ParamStore::load(&dir).unwrap();
        assert_eq!(back, s);
        let manifest = std::fs::read_to_string(dir.join("manifest.txt")).unwrap();
        assert_eq!(manifest.lines().count(), 3);
        std::fs::remove_dir_all(&dir).ok();
    }
}
