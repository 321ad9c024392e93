//! Windowing, standardization, imbalance handling (undersampling, SMOTE,
//! class weights), stratified splitting, and dataset persistence.
//!
//! Windows are always cut within a single recording, never across recording
//! boundaries. Standardization statistics come from the training split only
//! and are applied unchanged to validation and test data.

use crate::datagen::{LabeledRecording, Task, CHANNEL_NAMES};
use crate::error::{invalid, Result, XfddError};
use crate::tensor::{Scalar, Tensor};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Guard below which a channel counts as constant and standardizes to zero.
pub const STD_GUARD: f64 = 1e-12;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fixed-length multichannel windows with integer class labels.
/// Layout: data[i * channels * window ..] is window i, channel-major.
#[derive(Clone, Debug)]
pub struct LabeledWindowDataset<F: Scalar> {
    pub data: Vec<F>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub window: usize,
    pub step: usize,
    pub num_classes: usize,
    pub task: Task,
    pub channel_names: Vec<String>,
    /// Train-split statistics once standardized; None for raw data.
    pub stats: Option<ChannelStats>,
}

impl<F: Scalar> LabeledWindowDataset<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn stride(&self) -> usize {
        self.channels * self.window
    }

    pub fn window_slice(&self, i: usize) -> &[F] {
        let s = self.stride();
        &self.data[i * s..(i + 1) * s]
    }

    /// One window as a [channels, window] tensor.
    pub fn window_tensor(&self, i: usize) -> Tensor<F> {
        Tensor::new(vec![self.channels, self.window], self.window_slice(i).to_vec()).unwrap()
    }

    /// A batch as an [n, channels, window] tensor in the given index order.
    pub fn batch(&self, indices: &[usize]) -> Tensor<F> {
        let s = self.stride();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend_from_slice(self.window_slice(i));
        }
        Tensor::new(vec![indices.len(), self.channels, self.window], data).unwrap()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Subset by window indices, preserving metadata.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let s = self.stride();
        let mut data = Vec::with_capacity(indices.len() * s);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.window_slice(i));
            labels.push(self.labels[i]);
        }
        LabeledWindowDataset { data, labels, ..self.clone_meta() }
    }

    /// Keep only the named channel indices, in the given order.
    pub fn select_channels(&self, keep: &[usize]) -> Result<Self> {
        for &c in keep {
            if c >= self.channels {
                return invalid(format!("channel index {c} out of range ({})", self.channels));
            }
        }
        let w = self.window;
        let mut data = Vec::with_capacity(self.len() * keep.len() * w);
        for i in 0..self.len() {
            let row = self.window_slice(i);
            for &c in keep {
                data.extend_from_slice(&row[c * w..(c + 1) * w]);
            }
        }
        let channel_names = keep.iter().map(|&c| self.channel_names[c].clone()).collect();
        let stats = self.stats.as_ref().map(|s| ChannelStats {
            mean: keep.iter().map(|&c| s.mean[c]).collect(),
            std: keep.iter().map(|&c| s.std[c]).collect(),
        });
        Ok(LabeledWindowDataset {
            data,
            labels: self.labels.clone(),
            channels: keep.len(),
            channel_names,
            stats,
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> Self {
        LabeledWindowDataset {
            data: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            window: self.window,
            step: self.step,
            num_classes: self.num_classes,
            task: self.task,
            channel_names: self.channel_names.clone(),
            stats: self.stats.clone(),
        }
    }
}

// ---- windowing ----

pub fn window_count(n: usize, window: usize, step: usize) -> Result<usize> {
    if window == 0 || step == 0 {
        return invalid("window and step must be positive");
    }
    if n < window {
        return invalid(format!("series of {n} samples shorter than window {window}"));
    }
    Ok((n - window) / step + 1)
}

/// Cut [count, C, W] windows from a [C, N] series; window i covers
/// [i*step, i*step + window).
pub fn window_series<F: Scalar>(series: &Tensor<F>, window: usize, step: usize) -> Result<Tensor<F>> {
    let shape = series.shape();
    if shape.len() != 2 {
        return invalid(format!("expected [channels, samples] series, got {shape:?}"));
    }
    let (c, n) = (shape[0], shape[1]);
    let count = window_count(n, window, step)?;
    let src = series.data();
    let mut data = Vec::with_capacity(count * c * window);
    for i in 0..count {
        let start = i * step;
        for ch in 0..c {
            data.extend_from_slice(&src[ch * n + start..ch * n + start + window]);
        }
    }
    Tensor::new(vec![count, c, window], data)
}

/// Window every recording separately and concatenate; labels map through the
/// task's class table.
pub fn build_dataset<F: Scalar>(
    recs: &[LabeledRecording],
    task: Task,
    window: usize,
    step: usize,
) -> Result<LabeledWindowDataset<F>> {
    if recs.is_empty() {
        return invalid("no recordings to window");
    }
    let channels = CHANNEL_NAMES.len();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for lr in recs {
        let n = lr.recording.len();
        let count = window_count(n, window, step)?;
        let class = task
            .class_id(&lr.label)
            .ok_or_else(|| XfddError::InvalidArgument(format!("label '{}' not in task {task}", lr.label)))?;
        for i in 0..count {
            let start = i * step;
            for ch in &lr.recording.channels {
                for t in start..start + window {
                    data.push(F::from_f64(ch[t]));
                }
            }
            labels.push(class as u8);
        }
    }
    Ok(LabeledWindowDataset {
        data,
        labels,
        channels,
        window,
        step,
        num_classes: task.classes().len(),
        task,
        channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        stats: None,
    })
}

// ---- standardization ----

/// Fit per-channel mean/population-std on `train` in 64-bit, apply the same
/// z-score to every dataset. Constant channels (std below the guard) map to
/// zero instead of dividing by ~0.
pub fn standardize_fit_apply<F: Scalar>(
    train: &mut LabeledWindowDataset<F>,
    others: &mut [&mut LabeledWindowDataset<F>],
) -> Result<ChannelStats> {
    if train.is_empty() {
        return invalid("cannot fit standardization on an empty train set");
    }
    let c = train.channels;
    let w = train.window;
    let per_channel = train.len() * w;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for i in 0..train.len() {
        let row = train.window_slice(i);
        for ch in 0..c {
            for t in 0..w {
                mean[ch] += row[ch * w + t].to_f64();
            }
        }
    }
    for m in &mut mean {
        *m /= per_channel as f64;
    }
    for i in 0..train.len() {
        let row = train.window_slice(i);
        for ch in 0..c {
            for t in 0..w {
                let d = row[ch * w + t].to_f64() - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / per_channel as f64).sqrt()).collect();
    let stats = ChannelStats { mean, std };

    apply_stats(train, &stats);
    train.stats = Some(stats.clone());
    for ds in others {
        if ds.channels != c || ds.window != w {
            return Err(shape_mismatch(ds.channels, ds.window, c, w));
        }
        apply_stats(ds, &stats);
        ds.stats = Some(stats.clone());
    }
    Ok(stats)
}

fn shape_mismatch(c: usize, w: usize, ec: usize, ew: usize) -> XfddError {
    XfddError::ShapeMismatch { left: vec![c, w], right: vec![ec, ew] }
}

fn apply_stats<F: Scalar>(ds: &mut LabeledWindowDataset<F>, stats: &ChannelStats) {
    let c = ds.channels;
    let w = ds.window;
    for i in 0..ds.len() {
        let base = i * c * w;
        for ch in 0..c {
            let m = stats.mean[ch];
            let s = stats.std[ch];
            for t in 0..w {
                let v = &mut ds.data[base + ch * w + t];
                *v = if s < STD_GUARD {
                    F::zero()
                } else {
                    F::from_f64((v.to_f64() - m) / s)
                };
            }
        }
    }
}

/// Centered moving average of odd width; edges use the truncated window.
/// A config-off denoising option, not part of the default pipeline.
pub fn moving_average(series: &[f64], width: usize) -> Result<Vec<f64>> {
    if width == 0 || width % 2 == 0 {
        return invalid(format!("moving-average width {width} must be odd and positive"));
    }
    let half = width / 2;
    let n = series.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        out.push(series[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
    }
    Ok(out)
}

// ---- resampling ----

/// Balanced count every class reaches under undersampling: the minimum.
pub fn rus_target(counts: &[usize]) -> usize {
    counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(0)
}

/// Balanced count every class reaches under SMOTE: the maximum.
pub fn smote_target(counts: &[usize]) -> usize {
    counts.iter().copied().max().unwrap_or(0)
}

/// Uniform undersampling without replacement to the minimum class count,
/// output order shuffled by seed.
pub fn rus<F: Scalar>(ds: &LabeledWindowDataset<F>, seed: u64) -> Result<LabeledWindowDataset<F>> {
    let counts = ds.class_counts();
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return invalid("undersampling needs at least two classes present");
    }
    let target = rus_target(&counts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for class in 0..ds.num_classes {
        let mut members: Vec<usize> =
            (0..ds.len()).filter(|&i| ds.labels[i] as usize == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..target]);
    }
    keep.shuffle(&mut rng);
    Ok(ds.subset(&keep))
}

/// SMOTE oversampling: raise every class to the maximum count with synthetic
/// samples x + λ(x_nn − x), λ ~ U(0,1), x_nn one of the k nearest same-class
/// neighbors by Euclidean distance over the flattened window.
pub fn smote<F: Scalar>(
    ds: &LabeledWindowDataset<F>,
    k_neighbors: usize,
    seed: u64,
) -> Result<LabeledWindowDataset<F>> {
    if k_neighbors == 0 {
        return invalid("k_neighbors must be positive");
    }
    let counts = ds.class_counts();
    let target = smote_target(&counts);
    let class_names = ds.task.classes();
    for (class, &count) in counts.iter().enumerate() {
        if count > 0 && count < target && count < k_neighbors + 1 {
            let name = class_names.get(class).copied().unwrap_or("?");
            return invalid(format!(
                "class {name} has {count} samples, fewer than k_neighbors+1 = {}",
                k_neighbors + 1
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = ds.channels * ds.window;
    let mut out = ds.clone();
    for class in 0..ds.num_classes {
        let members: Vec<usize> =
            (0..ds.len()).filter(|&i| ds.labels[i] as usize == class).collect();
        if members.is_empty() || members.len() >= target {
            continue;
        }
        // distance matrix within the class; desk-scale brute force
        let m = members.len();
        let mut neighbor_lists: Vec<Vec<usize>> = Vec::with_capacity(m);
        for a in 0..m {
            let xa = ds.window_slice(members[a]);
            let mut dists: Vec<(f64, usize)> = (0..m)
                .filter(|&b| b != a)
                .map(|b| {
                    let xb = ds.window_slice(members[b]);
                    let d: f64 = xa
                        .iter()
                        .zip(xb)
                        .map(|(&p, &q)| {
                            let d = p.to_f64() - q.to_f64();
                            d * d
                        })
                        .sum();
                    (d, b)
                })
                .collect();
            dists.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
            neighbor_lists.push(dists.iter().take(k_neighbors).map(|&(_, b)| b).collect());
        }
        for _ in 0..target - m {
            let a = rng.gen_range(0..m);
            let nns = &neighbor_lists[a];
            let b = nns[rng.gen_range(0..nns.len())];
            let lambda = rng.gen::<f64>();
            let xa = ds.window_slice(members[a]).to_vec();
            let xb = ds.window_slice(members[b]);
            let mut synth = Vec::with_capacity(stride);
            for (&p, &q) in xa.iter().zip(xb) {
                let v = p.to_f64() + lambda * (q.to_f64() - p.to_f64());
                synth.push(F::from_f64(v));
            }
            out.data.extend_from_slice(&synth);
            out.labels.push(class as u8);
        }
    }
    Ok(out)
}

/// w_c = N_total / (K * n_c). Multiplies per-sample loss.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.iter().any(|&c| c == 0) {
        return invalid("class weights undefined for a zero-count class");
    }
    let total: usize = counts.iter().sum();
    let k = counts.len();
    Ok(counts.iter().map(|&c| total as f64 / (k as f64 * c as f64)).collect())
}

// ---- splitting ----

/// Stratified split with seeded per-class shuffles. Validation and test get
/// floor allocations; the remainder goes to train.
pub fn split<F: Scalar>(
    ds: &LabeledWindowDataset<F>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(LabeledWindowDataset<F>, LabeledWindowDataset<F>, LabeledWindowDataset<F>)> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return invalid(format!("split fractions sum to {sum}, expected 1"));
    }
    if fractions.iter().any(|&f| f < 0.0) {
        return invalid("split fractions must be non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = [Vec::new(), Vec::new(), Vec::new()];
    for class in 0..ds.num_classes {
        let mut members: Vec<usize> =
            (0..ds.len()).filter(|&i| ds.labels[i] as usize == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let n_val = (n as f64 * fractions[1]).floor() as usize;
        let n_test = (n as f64 * fractions[2]).floor() as usize;
        let n_train = n - n_val - n_test;
        if n_train == 0 || n_val == 0 || n_test == 0 {
            let name = ds.task.classes().get(class).copied().unwrap_or("?");
            return invalid(format!(
                "class {name} with {n} samples leaves an empty split ({n_train}/{n_val}/{n_test})"
            ));
        }
        idx[0].extend_from_slice(&members[..n_train]);
        idx[1].extend_from_slice(&members[n_train..n_train + n_val]);
        idx[2].extend_from_slice(&members[n_train + n_val..]);
    }
    for part in &mut idx {
        part.shuffle(&mut rng);
    }
    Ok((ds.subset(&idx[0]), ds.subset(&idx[1]), ds.subset(&idx[2])))
}

// ---- persistence ----

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    schema_version: u32,
    task: Task,
    window: usize,
    step: usize,
    channels: usize,
    channel_names: Vec<String>,
    num_classes: usize,
    class_counts: Vec<usize>,
    n: usize,
    stats: Option<ChannelStats>,
    seed: u64,
}

/// Write `{stem}.json` (manifest), `{stem}.f32` (window blob, little-endian),
/// and `{stem}.labels` (one byte per window).
pub fn save_dataset<F: Scalar>(stem: &Path, ds: &LabeledWindowDataset<F>, seed: u64) -> Result<()> {
    let manifest = DatasetManifest {
        schema_version: 1,
        task: ds.task,
        window: ds.window,
        step: ds.step,
        channels: ds.channels,
        channel_names: ds.channel_names.clone(),
        num_classes: ds.num_classes,
        class_counts: ds.class_counts(),
        n: ds.len(),
        stats: ds.stats.clone(),
        seed,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| XfddError::Format(e.to_string()))?;
    std::fs::write(stem.with_extension("json"), json)?;

    let mut blob = BufWriter::new(std::fs::File::create(stem.with_extension("f32"))?);
    for &v in &ds.data {
        blob.write_f32::<LittleEndian>(v.to_f64() as f32)?;
    }
    blob.flush()?;
    std::fs::write(stem.with_extension("labels"), &ds.labels)?;
    Ok(())
}

pub fn load_dataset<F: Scalar>(stem: &Path) -> Result<LabeledWindowDataset<F>> {
    let json_path = stem.with_extension("json");
    let json = std::fs::read_to_string(&json_path).map_err(|e| {
        XfddError::MissingPrerequisite(format!("{}: {e}", json_path.display()))
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&json).map_err(|e| XfddError::Format(e.to_string()))?;
    if manifest.schema_version != 1 {
        return Err(XfddError::Format(format!(
            "unsupported dataset schema version {}",
            manifest.schema_version
        )));
    }
    let want = manifest.n * manifest.channels * manifest.window;
    let mut blob = BufReader::new(std::fs::File::open(stem.with_extension("f32"))?);
    let mut data = Vec::with_capacity(want);
    for _ in 0..want {
        let v = blob.read_f32::<LittleEndian>().map_err(|_| {
            XfddError::Format(format!(
                "window blob truncated: expected {want} little-endian f32 values"
            ))
        })?;
        data.push(F::from_f64(v as f64));
    }
    let mut extra = [0u8; 1];
    if blob.read(&mut extra)? != 0 {
        return Err(XfddError::Format("window blob longer than manifest declares".into()));
    }
    let labels = std::fs::read(stem.with_extension("labels"))?;
    if labels.len() != manifest.n {
        return Err(XfddError::Format(format!(
            "label file has {} entries, manifest declares {}",
            labels.len(),
            manifest.n
        )));
    }
    Ok(LabeledWindowDataset {
        data,
        labels,
        channels: manifest.channels,
        window: manifest.window,
        step: manifest.step,
        num_classes: manifest.num_classes,
        task: manifest.task,
        channel_names: manifest.channel_names,
        stats: manifest.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatagenConfig};

    fn toy_dataset(labels: &[u8], num_classes: usize) -> LabeledWindowDataset<f64> {
        // 2 channels x 4 samples per window, deterministic distinct content
        let channels = 2;
        let window = 4;
        let mut data = Vec::new();
        for (i, _) in labels.iter().enumerate() {
            for c in 0..channels {
                for t in 0..window {
                    data.push(i as f64 + 0.1 * c as f64 + 0.01 * t as f64);
                }
            }
        }
        LabeledWindowDataset {
            data,
            labels: labels.to_vec(),
            channels,
            window,
            step: window,
            num_classes,
            task: Task::FaultType,
            channel_names: (0..channels).map(|c| format!("ch{c}")).collect(),
            stats: None,
        }
    }

    #[test]
    fn window_counts_match_closed_form() {
        assert_eq!(window_count(500, 500, 10).unwrap(), 1);
        assert_eq!(window_count(1000, 500, 10).unwrap(), 51);
        assert!(window_count(499, 500, 10).is_err());
    }

    #[test]
    fn window_layout_covers_series() {
        let series = Tensor::new(vec![2, 10], (0..20).map(|v| v as f64).collect()).unwrap();
        let w = window_series(&series, 4, 3).unwrap();
        assert_eq!(w.shape(), &[3, 2, 4]);
        // window 1 covers [3, 7) on both channels
        assert_eq!(&w.data()[8..12], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(&w.data()[12..16], &[13.0, 14.0, 15.0, 16.0]);
        // union of [i*S, i*S+W) = [0, 10): starts 0,3,6, last end 6+4=10
        let last_end = 2 * 3 + 4;
        assert_eq!(last_end, series.shape()[1]);
    }

    #[test]
    fn zscore_hand_example() {
        let mut ds = LabeledWindowDataset::<f64> {
            data: vec![1.0, 2.0, 3.0],
            labels: vec![0],
            channels: 1,
            window: 3,
            step: 3,
            num_classes: 1,
            task: Task::FaultType,
            channel_names: vec!["ch0".into()],
            stats: None,
        };
        let stats = standardize_fit_apply(&mut ds, &mut []).unwrap();
        assert!((stats.mean[0] - 2.0).abs() < 1e-12);
        assert!((stats.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let want = [-1.224744871, 0.0, 1.224744871];
        for (got, want) in ds.data.iter().zip(want) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn standardization_is_idempotent_and_guards_constants() {
        let mut ds = toy_dataset(&[0, 0, 1, 1], 2);
        // make channel 1 constant
        for i in 0..ds.len() {
            let base = i * ds.stride();
            for t in 0..ds.window {
                ds.data[base + ds.window + t] = 5.0;
            }
        }
        standardize_fit_apply(&mut ds, &mut []).unwrap();
        // constant channel mapped to zero
        for i in 0..ds.len() {
            let row = ds.window_slice(i).to_vec();
            for t in 0..ds.window {
                assert_eq!(row[ds.window + t], 0.0);
            }
        }
        // channel 0 now has mean 0, std 1
        let vals: Vec<f64> = (0..ds.len())
            .flat_map(|i| ds.window_slice(i)[..ds.window].to_vec())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);

        // applying a fresh fit to already standardized data changes nothing
        let snapshot = ds.data.clone();
        let mut again = ds.clone();
        standardize_fit_apply(&mut again, &mut []).unwrap();
        for (a, b) in snapshot.iter().zip(&again.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn train_stats_apply_to_other_splits() {
        let mut train = toy_dataset(&[0, 0, 1, 1], 2);
        let mut val = toy_dataset(&[0, 1], 2);
        let raw_val = val.data.clone();
        let stats = standardize_fit_apply(&mut train, &mut [&mut val]).unwrap();
        for (i, raw) in raw_val.iter().enumerate() {
            let ch = (i / train.window) % train.channels;
            let want = (raw - stats.mean[ch]) / stats.std[ch];
            assert!((val.data[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rus_balances_to_minimum() {
        let ds = toy_dataset(&[0, 0, 0, 0, 0, 1, 1, 2, 2, 2], 3);
        let out = rus(&ds, 9).unwrap();
        assert_eq!(out.class_counts(), vec![2, 2, 2]);
        // balanced input: counts are a fixed point
        let balanced = toy_dataset(&[0, 0, 1, 1], 2);
        let out = rus(&balanced, 1).unwrap();
        assert_eq!(out.class_counts(), vec![2, 2]);
        // single class rejected
        let single = toy_dataset(&[0, 0, 0], 1);
        assert!(rus(&single, 0).is_err());
    }

    #[test]
    fn smote_balances_to_maximum_on_segments() {
        let ds = toy_dataset(&[0, 0, 0, 0, 0, 0, 1, 1, 1], 2);
        let out = smote(&ds, 2, 33).unwrap();
        assert_eq!(out.class_counts(), vec![6, 6]);
        // every synthetic reconstructs lambda in [0,1] on a member/neighbor segment
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == 1).collect();
        let stride = ds.stride();
        for s in ds.len()..out.len() {
            let synth = out.window_slice(s);
            let mut found = false;
            'outer: for &a in &members {
                let xa = ds.window_slice(a);
                for &b in &members {
                    if a == b {
                        continue;
                    }
                    let xb = ds.window_slice(b);
                    // lambda from the first coordinate with a nonzero gap
                    let mut lambda = None;
                    for d in 0..stride {
                        let gap = xb[d] - xa[d];
                        if gap.abs() > 1e-12 {
                            lambda = Some((synth[d] - xa[d]) / gap);
                            break;
                        }
                    }
                    let Some(l) = lambda else { continue };
                    if !(-1e-9..=1.0 + 1e-9).contains(&l) {
                        continue;
                    }
                    let ok = (0..stride)
                        .all(|d| (synth[d] - (xa[d] + l * (xb[d] - xa[d]))).abs() < 1e-9);
                    if ok {
                        found = true;
                        break 'outer;
                    }
                }
            }
            assert!(found, "synthetic {s} not on any member segment");
        }
    }

    #[test]
    fn smote_rejects_tiny_class_by_name() {
        let ds = toy_dataset(&[0, 0, 0, 0, 0, 1, 1], 2);
        let err = smote(&ds, 5, 0).unwrap_err().to_string();
        assert!(err.contains("F1"), "err: {err}");
    }

    #[test]
    fn resampling_targets_match_count_fixtures() {
        let location = [232_899, 298_397, 244_901, 237_001, 254_700, 246_298, 252_996];
        let fault_type = [231_698, 240_899, 245_796, 239_198, 243_399, 256_998, 249_299];
        assert_eq!(rus_target(&location), 232_899);
        assert_eq!(smote_target(&location), 298_397);
        assert_eq!(rus_target(&fault_type), 231_698);
        assert_eq!(smote_target(&fault_type), 256_998);
    }

    #[test]
    fn class_weight_formula() {
        assert_eq!(class_weights(&[10, 10]).unwrap(), vec![1.0, 1.0]);
        let w = class_weights(&[100, 50]).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 1.5).abs() < 1e-12);
        assert_eq!(class_weights(&[7]).unwrap(), vec![1.0]);
        assert!(class_weights(&[3, 0]).is_err());
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let labels: Vec<u8> = (0..1000).map(|i| (i % 2) as u8).collect();
        let ds = toy_dataset(&labels, 2);
        let (tr, va, te) = split(&ds, [0.7, 0.15, 0.15], 5).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (700, 150, 150));
        for part in [&tr, &va, &te] {
            let counts = part.class_counts();
            assert!((counts[0] as i64 - counts[1] as i64).abs() <= 1, "{counts:?}");
        }
        let (tr2, ..) = split(&ds, [0.7, 0.15, 0.15], 5).unwrap();
        assert_eq!(tr.labels, tr2.labels);
        assert_eq!(tr.data, tr2.data);

        // a split that would leave an empty part is rejected
        let tiny = toy_dataset(&[0, 0, 1, 1], 2);
        assert!(split(&tiny, [0.7, 0.15, 0.15], 0).is_err());
    }

    #[test]
    fn moving_average_truncates_edges() {
        let out = moving_average(&[1.0, 2.0, 3.0, 4.0, 5.0], 3).unwrap();
        assert_eq!(out, vec![1.5, 2.0, 3.0, 4.0, 4.5]);
        assert!(moving_average(&[1.0], 2).is_err());
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let cfg = DatagenConfig {
            per_class_windows: 4,
            duration: 2.0,
            rate: 50.0,
            window: 25,
            step: 25,
            ..DatagenConfig::default()
        };
        let recs = generate_dataset(&cfg).unwrap();
        let mut ds = build_dataset::<f32>(&recs, cfg.task, 25, 25).unwrap();
        standardize_fit_apply(&mut ds, &mut []).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("train");
        save_dataset(&stem, &ds, 7).unwrap();
        let back = load_dataset::<f32>(&stem).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.data, ds.data); // f32 blob is bit-exact for f32 models
        assert_eq!(back.channel_names, ds.channel_names);
        assert_eq!(back.stats, ds.stats);

        // truncated blob is rejected with a format error
        let blob_path = stem.with_extension("f32");
        let bytes = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_dataset::<f32>(&stem), Err(XfddError::Format(_))));
    }

    #[test]
    fn channel_selection_preserves_order_and_stats() {
        let mut ds = toy_dataset(&[0, 1], 2);
        standardize_fit_apply(&mut ds, &mut []).unwrap();
        let sub = ds.select_channels(&[1]).unwrap();
        assert_eq!(sub.channels, 1);
        assert_eq!(sub.channel_names, vec!["ch1".to_string()]);
        for i in 0..ds.len() {
            assert_eq!(sub.window_slice(i), &ds.window_slice(i)[ds.window..]);
        }
        assert!(ds.select_channels(&[5]).is_err());
    }
}
