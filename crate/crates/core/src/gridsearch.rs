//! Desk-scale hyperparameter search: a mixed-radix enumeration over the
//! architecture and resampling axes, budget-capped seeded subsampling, and a
//! deterministic ranking (validation accuracy, then parameter count, then
//! enumeration order).

use crate::datagen::{LabeledRecording, Task};
use crate::error::{invalid, Result};
use crate::model::{count_params, Model, ModelSpec};
use crate::preprocess::{build_dataset, split, standardize_fit_apply};
use crate::train::{evaluate, train, Sampling, TrainConfig};
use crate::tensor::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchSpace {
    pub conv_layers: Vec<usize>,
    pub gru_layers: Vec<usize>,
    pub hidden: Vec<usize>,
    pub fc_layers: Vec<usize>,
    pub resampling: Vec<Sampling>,
    pub window: Vec<usize>,
    pub step: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            conv_layers: (1..=7).collect(),
            gru_layers: (1..=4).collect(),
            hidden: vec![32, 64, 256, 512],
            fc_layers: (1..=7).collect(),
            resampling: vec![Sampling::None, Sampling::Undersample, Sampling::Smote],
            window: vec![10, 50, 100, 500, 1000],
            step: vec![10, 50, 100, 500, 1000],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialAxes {
    /// Lexicographic enumeration index within the space.
    pub index: usize,
    pub conv_layers: usize,
    pub gru_layers: usize,
    pub hidden: usize,
    pub fc_layers: usize,
    pub resampling: Sampling,
    pub window: usize,
    pub step: usize,
}

impl SearchSpace {
    fn radices(&self) -> [usize; 7] {
        [
            self.conv_layers.len(),
            self.gru_layers.len(),
            self.hidden.len(),
            self.fc_layers.len(),
            self.resampling.len(),
            self.window.len(),
            self.step.len(),
        ]
    }

    pub fn size(&self) -> usize {
        self.radices().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.radices().contains(&0) {
            return invalid("every search axis needs at least one value");
        }
        Ok(())
    }

    /// Mixed-radix decode; conv_layers is the slowest axis, step the fastest,
    /// so index order is lexicographic over the axis order above.
    pub fn decode(&self, index: usize) -> Result<TrialAxes> {
        if index >= self.size() {
            return invalid(format!("trial index {index} outside space of {}", self.size()));
        }
        let r = self.radices();
        let mut rem = index;
        let mut digits = [0usize; 7];
        for i in (0..7).rev() {
            digits[i] = rem % r[i];
            rem /= r[i];
        }
        Ok(TrialAxes {
            index,
            conv_layers: self.conv_layers[digits[0]],
            gru_layers: self.gru_layers[digits[1]],
            hidden: self.hidden[digits[2]],
            fc_layers: self.fc_layers[digits[3]],
            resampling: self.resampling[digits[4]],
            window: self.window[digits[5]],
            step: self.step[digits[6]],
        })
    }
}

/// Desk-scale training knobs shared by every trial.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub split: [f64; 3],
    pub smote_k: usize,
    pub seed: u64,
}

impl Default for TrialSettings {
    fn default() -> Self {
        TrialSettings {
            epochs: 8,
            batch_size: 64,
            lr: 0.005,
            patience: 8,
            split: [0.7, 0.15, 0.15],
            smote_k: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialResult {
    pub axes: TrialAxes,
    pub feasible: bool,
    /// Error text for infeasible trials (e.g. window longer than recordings).
    pub note: String,
    pub val_accuracy: f64,
    pub param_count: usize,
    pub train_time_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchReport {
    /// Trials in evaluation (index) order.
    pub trials: Vec<TrialResult>,
    /// Positions into `trials`, best first; infeasible trials rank last.
    pub ranking: Vec<usize>,
    pub exhaustive: bool,
    pub space_size: usize,
}

impl SearchReport {
    pub fn best(&self) -> Option<&TrialResult> {
        self.ranking.first().map(|&i| &self.trials[i])
    }
}

/// Higher validation accuracy first; ties broken by smaller parameter count,
/// then by enumeration index. Infeasible trials sort after all feasible ones.
pub fn rank_trials(trials: &[TrialResult]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by(|&a, &b| {
        let (ta, tb) = (&trials[a], &trials[b]);
        tb.feasible
            .cmp(&ta.feasible)
            .then(tb.val_accuracy.partial_cmp(&ta.val_accuracy).unwrap())
            .then(ta.param_count.cmp(&tb.param_count))
            .then(ta.axes.index.cmp(&tb.axes.index))
    });
    order
}

/// Evaluate `budget` configurations (the whole space when the budget covers
/// it, else a seeded without-replacement sample) on validation accuracy.
pub fn grid_search<F: Scalar>(
    recs: &[LabeledRecording],
    task: Task,
    space: &SearchSpace,
    budget: usize,
    settings: &TrialSettings,
) -> Result<SearchReport> {
    space.validate()?;
    if budget == 0 {
        return invalid("search budget must be positive");
    }
    if recs.is_empty() {
        return invalid("no recordings to search over");
    }
    let size = space.size();
    let exhaustive = budget >= size;
    let mut indices: Vec<usize> = (0..size).collect();
    if !exhaustive {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        indices.shuffle(&mut rng);
        indices.truncate(budget);
        indices.sort_unstable();
    }

    let mut trials = Vec::with_capacity(indices.len());
    for index in indices {
        let axes = space.decode(index)?;
        trials.push(run_trial::<F>(recs, task, axes, settings));
    }
    let ranking = rank_trials(&trials);
    Ok(SearchReport { trials, ranking, exhaustive, space_size: size })
}

fn run_trial<F: Scalar>(
    recs: &[LabeledRecording],
    task: Task,
    axes: TrialAxes,
    settings: &TrialSettings,
) -> TrialResult {
    let infeasible = |note: String| TrialResult {
        axes,
        feasible: false,
        note,
        val_accuracy: 0.0,
        param_count: 0,
        train_time_s: 0.0,
    };
    let spec = ModelSpec::hybrid(
        24,
        axes.window,
        task.classes().len(),
        axes.conv_layers,
        axes.gru_layers,
        axes.hidden,
        axes.fc_layers,
    );
    let param_count = match count_params(&spec) {
        Ok(acc) => acc.grand_total,
        Err(e) => return infeasible(format!("architecture rejected: {e}")),
    };
    let trial_seed = settings.seed.wrapping_add(axes.index as u64);
    let result = (|| -> Result<(f64, f64)> {
        let ds = build_dataset::<F>(recs, task, axes.window, axes.step)?;
        let (mut tr, mut va, mut te) = split(&ds, settings.split, trial_seed)?;
        standardize_fit_apply(&mut tr, &mut [&mut va, &mut te])?;
        let cfg = TrainConfig {
            lr: settings.lr,
            batch_size: settings.batch_size.min(tr.len()),
            max_epochs: settings.epochs,
            patience: settings.patience.min(settings.epochs),
            dropout: 0.3,
            sampling: axes.resampling,
            smote_k: settings.smote_k,
            seed: trial_seed,
            ..TrainConfig::default()
        };
        let mut model = Model::<F>::build(spec.clone(), trial_seed)?;
        let outcome = train(&mut model, &tr, &va, &cfg)?;
        let report = evaluate(&model, &va)?;
        Ok((report.accuracy, outcome.train_time_s))
    })();
    match result {
        Ok((val_accuracy, train_time_s)) => TrialResult {
            axes,
            feasible: true,
            note: String::new(),
            val_accuracy,
            param_count,
            train_time_s,
        },
        Err(e) => infeasible(e.to_string()),
    }
}
