//! Self-attention key/value capture and injection.
//!
//! The reference branch runs once with capture hooks, filling a
//! write-once [`KVStore`] keyed by (denoising step, layer). Target-branch
//! forwards then run with inject hooks: wherever the edit gate is active
//! the branch's own K/V are swapped for the stored reference features,
//! while the query projection and everything downstream stay untouched.
//!
//! Step indices here are positions on the inference step grid, counted on
//! the descending denoising trajectory: the noisiest step is `t = T` and
//! the last one `t = 1`. Layers are block indices `0..l_max`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use image::GrayImage;

use crate::error::{Error, Result};
use crate::imgio;
use crate::numerics::Matrix;

/// Step/layer thresholds deciding where injection applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditGate {
    /// Step threshold S: inject while the descending step index exceeds it.
    pub start_step: usize,
    /// Layer threshold L: inject in layers strictly above it.
    pub start_layer: usize,
}

/// Strict-inequality gate: inject iff `step > S` and `layer > L`.
///
/// With `S = T` or `L = l_max` the gate never fires and a run reduces to
/// plain reconstruction. Lowering either threshold only grows the set of
/// injected (step, layer) pairs.
pub fn gate_active(gate: &EditGate, step: usize, layer: usize) -> bool {
    step > gate.start_step && layer > gate.start_layer
}

/// Number of (step, layer) pairs the gate injects for a `steps`-step
/// denoising pass over `l_max` layers.
pub fn gate_active_count(start_step: usize, start_layer: usize, steps: usize, l_max: usize) -> usize {
    let gate = EditGate {
        start_step,
        start_layer,
    };
    (1..=steps)
        .flat_map(|t| (0..l_max).map(move |l| (t, l)))
        .filter(|&(t, l)| gate_active(&gate, t, l))
        .count()
}

/// Write-once map from (step, layer) to captured reference (K, V).
#[derive(Debug, Clone, Default)]
pub struct KVStore {
    entries: HashMap<(usize, usize), (Matrix, Matrix)>,
}

impl KVStore {
    pub fn new() -> KVStore {
        KVStore::default()
    }

    pub fn insert(&mut self, step: usize, layer: usize, k: Matrix, v: Matrix) -> Result<()> {
        if k.rows() != v.rows() {
            return Err(Error::Injection(format!(
                "captured K has {} rows but V has {}",
                k.rows(),
                v.rows()
            )));
        }
        if self.entries.contains_key(&(step, layer)) {
            return Err(Error::Injection(format!(
                "features for step {step} layer {layer} captured twice"
            )));
        }
        self.entries.insert((step, layer), (k, v));
        Ok(())
    }

    pub fn get(&self, step: usize, layer: usize) -> Option<&(Matrix, Matrix)> {
        self.entries.get(&(step, layer))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Content equality at bit level, used by cache-soundness tests.
    pub fn bit_eq(&self, other: &KVStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(key, (k, v))| {
                other
                    .entries
                    .get(key)
                    .is_some_and(|(ok, ov)| k.bit_eq(ok) && v.bit_eq(ov))
            })
    }
}

/// One recorded attention map, kept raw (rows sum to 1) until dumped.
#[derive(Debug, Clone)]
pub struct AttnMapRecord {
    pub iteration: usize,
    pub step: usize,
    pub layer: usize,
    pub map: Matrix,
}

enum StoreSlot {
    None,
    Owned(KVStore),
    Shared(Arc<KVStore>),
}

/// Per-branch-run hook state handed to the denoiser forward pass.
///
/// Exactly one of three modes: `off` (pass-through), `capture` (record
/// every K/V into an owned store) or `inject` (substitute stored features
/// where the gate fires). A `HookSet` must not be shared across concurrent
/// forwards.
pub struct HookSet {
    gate: EditGate,
    store: StoreSlot,
    step: usize,
    iteration: usize,
    recording: bool,
    records: Vec<AttnMapRecord>,
}

impl HookSet {
    pub fn off() -> HookSet {
        HookSet {
            gate: EditGate {
                start_step: usize::MAX,
                start_layer: usize::MAX,
            },
            store: StoreSlot::None,
            step: 0,
            iteration: 0,
            recording: false,
            records: Vec::new(),
        }
    }

    pub fn capture() -> HookSet {
        HookSet {
            store: StoreSlot::Owned(KVStore::new()),
            ..HookSet::off()
        }
    }

    pub fn inject(store: Arc<KVStore>, gate: EditGate) -> HookSet {
        HookSet {
            gate,
            store: StoreSlot::Shared(store),
            ..HookSet::off()
        }
    }

    /// Step index on the descending denoising grid for subsequent forwards.
    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn set_iteration(&mut self, iteration: usize) {
        self.iteration = iteration;
    }

    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    /// Self-attention hook: the denoiser calls this once per (step, layer)
    /// per forward with its freshly projected K and V, and uses whatever
    /// comes back.
    pub fn on_self_attention(
        &mut self,
        step: usize,
        layer: usize,
        k: &Matrix,
        v: &Matrix,
    ) -> Result<(Matrix, Matrix)> {
        match &mut self.store {
            StoreSlot::None => Ok((k.clone(), v.clone())),
            StoreSlot::Owned(store) => {
                store.insert(step, layer, k.clone(), v.clone())?;
                Ok((k.clone(), v.clone()))
            }
            StoreSlot::Shared(store) => {
                if !gate_active(&self.gate, step, layer) {
                    return Ok((k.clone(), v.clone()));
                }
                let (ks, vs) = store.get(step, layer).ok_or_else(|| {
                    Error::Injection(format!(
                        "no reference features for step {step} layer {layer}; \
                         reference and target step grids do not match"
                    ))
                })?;
                if ks.shape() != k.shape() || vs.shape() != v.shape() {
                    return Err(Error::Injection(format!(
                        "stored K/V shapes {:?}/{:?} do not match branch shapes {:?}/{:?} \
                         at step {step} layer {layer}",
                        ks.shape(),
                        vs.shape(),
                        k.shape(),
                        v.shape()
                    )));
                }
                Ok((ks.clone(), vs.clone()))
            }
        }
    }

    /// Records the post-injection attention map when recording is on.
    pub fn record_map(&mut self, layer: usize, map: &Matrix) {
        if self.recording {
            self.records.push(AttnMapRecord {
                iteration: self.iteration,
                step: self.step,
                layer,
                map: map.clone(),
            });
        }
    }

    pub fn records(&self) -> &[AttnMapRecord] {
        &self.records
    }

    pub fn take_records(&mut self) -> Vec<AttnMapRecord> {
        std::mem::take(&mut self.records)
    }

    /// Consumes a capture hook set, yielding the filled store.
    pub fn into_store(self) -> Option<KVStore> {
        match self.store {
            StoreSlot::Owned(store) => Some(store),
            _ => None,
        }
    }
}

/// Writes each recorded map as an 8-bit grayscale PNG
/// (`iter{n}_t{t}_l{l}.png`, values scaled by the per-map maximum) plus a
/// plain-text `index.txt` listing key -> file.
pub fn dump_attention_maps(records: &[AttnMapRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for rec in records {
        let name = format!("iter{}_t{}_l{}.png", rec.iteration, rec.step, rec.layer);
        let (rows, cols) = rec.map.shape();
        let max = rec
            .map
            .data()
            .iter()
            .fold(0.0f32, |a, &b| a.max(b))
            .max(f32::MIN_POSITIVE);
        let pixels: Vec<u8> = rec
            .map
            .data()
            .iter()
            .map(|&v| ((v / max).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = GrayImage::from_raw(cols as u32, rows as u32, pixels)
            .ok_or_else(|| Error::Shape("attention map buffer mismatch".into()))?;
        imgio::write_atomic(&dir.join(&name), &imgio::encode_gray_png(&img)?)?;
        index.push_str(&format!(
            "iter={} t={} l={} -> {}\n",
            rec.iteration, rec.step, rec.layer, name
        ));
    }
    imgio::write_atomic(&dir.join("index.txt"), index.as_bytes())
}
