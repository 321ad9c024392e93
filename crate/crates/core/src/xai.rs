//! Post-hoc attribution over trained models: integrated gradients, DeepLIFT
//! (Rescale), gradient SHAP, DeepLIFT SHAP, an exact Shapley oracle for small
//! group counts, and the aggregation layers on top (global and per-class
//! feature importance, pairwise interaction screening, top-k selection).
//!
//! Attribution targets the pre-softmax logit of the chosen class; softmax
//! saturation would flatten gradients near confident predictions.

use crate::error::{invalid, Result, XfddError};
use crate::model::{Model, ModelSpec};
use crate::preprocess::LabeledWindowDataset;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::time::Instant;

// ---- baselines ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Zero,
    Mean,
    Median,
    Random,
}

impl std::str::FromStr for BaselineKind {
    type Err = XfddError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(BaselineKind::Zero),
            "mean" => Ok(BaselineKind::Mean),
            "median" => Ok(BaselineKind::Median),
            "random" => Ok(BaselineKind::Random),
            other => Err(XfddError::InvalidArgument(format!(
                "unknown baseline '{other}' (expected zero, mean, median, random)"
            ))),
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineKind::Zero => "zero",
            BaselineKind::Mean => "mean",
            BaselineKind::Median => "median",
            BaselineKind::Random => "random",
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    /// Number of windows drawn for the random kind; the statistic kinds
    /// always produce a single baseline.
    pub k: usize,
}

impl BaselineSpec {
    pub fn new(kind: BaselineKind) -> Self {
        BaselineSpec { kind, k: 10 }
    }
}

/// Build baseline window(s) of the reference set's [channels, window] shape.
/// Mean/median are taken per channel per timestep over the reference windows;
/// random draws k windows uniformly. Zero needs no reference rows.
pub fn make_baseline<F: Scalar>(
    spec: &BaselineSpec,
    reference: &LabeledWindowDataset<F>,
    seed: u64,
) -> Result<Vec<Tensor<F>>> {
    let (c, w) = (reference.channels, reference.window);
    if spec.kind != BaselineKind::Zero && reference.is_empty() {
        return invalid(format!("{} baseline needs a non-empty reference set", spec.kind));
    }
    match spec.kind {
        BaselineKind::Zero => Ok(vec![Tensor::zeros(&[c, w])]),
        BaselineKind::Mean => {
            let n = reference.len();
            let mut acc = vec![0.0f64; c * w];
            for i in 0..n {
                for (a, &v) in acc.iter_mut().zip(reference.window_slice(i)) {
                    *a += v.to_f64();
                }
            }
            let data: Vec<F> = acc.iter().map(|&a| F::from_f64(a / n as f64)).collect();
            Ok(vec![Tensor::new(vec![c, w], data)?])
        }
        BaselineKind::Median => {
            let n = reference.len();
            let mut data = Vec::with_capacity(c * w);
            let mut col = vec![0.0f64; n];
            for j in 0..c * w {
                for (i, slot) in col.iter_mut().enumerate() {
                    *slot = reference.window_slice(i)[j].to_f64();
                }
                col.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let med = if n % 2 == 1 {
                    col[n / 2]
                } else {
                    0.5 * (col[n / 2 - 1] + col[n / 2])
                };
                data.push(F::from_f64(med));
            }
            Ok(vec![Tensor::new(vec![c, w], data)?])
        }
        BaselineKind::Random => {
            if spec.k == 0 {
                return invalid("random baseline draw count must be positive");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..spec.k)
                .map(|_| reference.window_tensor(rng.gen_range(0..reference.len())))
                .collect())
        }
    }
}

// ---- attribution primitives ----

#[derive(Clone, Debug)]
pub struct Attribution<F> {
    /// Per-(channel, timestep) attribution, same shape as the input window.
    pub values: Tensor<F>,
    pub method: String,
    pub baseline: String,
    pub class: usize,
    pub output_at_x: f64,
    /// Mean model output over the baseline set.
    pub output_at_baseline: f64,
}

impl<F: Scalar> Attribution<F> {
    pub fn sum(&self) -> f64 {
        self.values.data().iter().map(|&v| v.to_f64()).sum()
    }
}

fn as_batch1<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let s = x.shape();
    match s.len() {
        2 => Tensor::new(vec![1, s[0], s[1]], x.data().to_vec()),
        3 if s[0] == 1 => Ok(x.clone()),
        _ => invalid(format!("expected a single [channels, window] input, got {s:?}")),
    }
}

fn check_pair<F: Scalar>(x: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if x.shape() != b.shape() {
        return Err(XfddError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn window_shape<F: Scalar>(x: &Tensor<F>) -> (usize, usize) {
    let s = x.shape();
    if s.len() == 3 {
        (s[1], s[2])
    } else {
        (s[0], s[1])
    }
}

/// Target-class logit for one window.
pub fn logit_of<F: Scalar>(model: &Model<F>, x: &Tensor<F>, class: usize) -> Result<f64> {
    check_class(model, class)?;
    let logits = model.logits(&as_batch1(x)?)?;
    Ok(logits.data()[class].to_f64())
}

fn check_class<F: Scalar>(model: &Model<F>, class: usize) -> Result<()> {
    if class >= model.spec().classes {
        return invalid(format!(
            "class {class} out of range ({} classes)",
            model.spec().classes
        ));
    }
    Ok(())
}

/// Logit and input gradient of the target class at one window.
pub fn logit_grad<F: Scalar>(
    model: &Model<F>,
    x: &Tensor<F>,
    class: usize,
) -> Result<(f64, Vec<f64>)> {
    check_class(model, class)?;
    let x1 = as_batch1(x)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(&x1, true);
    let pass = model.forward_eval(&mut tape, xv, false)?;
    let out = tape.select_col(pass.logits, class)?;
    let fx = tape.data(out)[0].to_f64();
    let grads = tape.backward(out)?;
    let g = grads
        .get(xv)
        .ok_or_else(|| XfddError::Numeric("input gradient missing from backward pass".into()))?
        .iter()
        .map(|&v| v.to_f64())
        .collect();
    Ok((fx, g))
}

/// Batched target-class logits for many masked variants of a window.
fn logits_batched<F: Scalar>(model: &Model<F>, rows: &[Tensor<F>], class: usize) -> Result<Vec<f64>> {
    check_class(model, class)?;
    let k = model.spec().classes;
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(128) {
        let (c, w) = window_shape(&chunk[0]);
        let mut data = Vec::with_capacity(chunk.len() * c * w);
        for t in chunk {
            data.extend_from_slice(t.data());
        }
        let batch = Tensor::new(vec![chunk.len(), c, w], data)?;
        let logits = model.logits(&batch)?;
        for i in 0..chunk.len() {
            out.push(logits.data()[i * k + class].to_f64());
        }
    }
    Ok(out)
}

// ---- integrated gradients ----

/// Midpoint-rule path integral of the class logit's input gradient from the
/// baseline to the input, scaled by the displacement. Exact for linear logits
/// at any step count.
pub fn integrated_gradients<F: Scalar>(
    model: &Model<F>,
    x: &Tensor<F>,
    baseline: &Tensor<F>,
    class: usize,
    steps: usize,
) -> Result<Attribution<F>> {
    if steps == 0 {
        return invalid("integrated gradients needs at least one step");
    }
    check_pair(x, baseline)?;
    let (c, w) = window_shape(x);
    let xd: Vec<f64> = x.data().iter().map(|&v| v.to_f64()).collect();
    let bd: Vec<f64> = baseline.data().iter().map(|&v| v.to_f64()).collect();
    let mut acc = vec![0.0f64; xd.len()];
    for i in 1..=steps {
        let alpha = (i as f64 - 0.5) / steps as f64;
        let point: Vec<F> = xd
            .iter()
            .zip(&bd)
            .map(|(&xj, &bj)| F::from_f64(bj + alpha * (xj - bj)))
            .collect();
        let pt = Tensor::new(vec![c, w], point)?;
        let (_, g) = logit_grad(model, &pt, class)?;
        for (a, gj) in acc.iter_mut().zip(&g) {
            *a += gj;
        }
    }
    let values: Vec<F> = xd
        .iter()
        .zip(&bd)
        .zip(&acc)
        .map(|((&xj, &bj), &sum)| F::from_f64((xj - bj) * sum / steps as f64))
        .collect();
    Ok(Attribution {
        values: Tensor::new(vec![c, w], values)?,
        method: "ig".into(),
        baseline: String::new(),
        class,
        output_at_x: logit_of(model, x, class)?,
        output_at_baseline: logit_of(model, baseline, class)?,
    })
}

// ---- DeepLIFT ----

/// Rescale-rule DeepLIFT: a paired forward pass at the input and at the
/// baseline, then a multiplier sweep that treats elementwise nonlinearities
/// as secants (Δy/Δx) and routes pools to the actual input's argmax. The
/// attribution is multiplier times displacement.
pub fn deeplift<F: Scalar>(
    model: &Model<F>,
    x: &Tensor<F>,
    baseline: &Tensor<F>,
    class: usize,
) -> Result<Attribution<F>> {
    check_pair(x, baseline)?;
    check_class(model, class)?;
    let (c, w) = window_shape(x);
    let x1 = as_batch1(x)?;
    let b1 = as_batch1(baseline)?;

    let mut t_x = Tape::new();
    let xv = t_x.leaf(&x1, true);
    let pass_x = model.forward_eval(&mut t_x, xv, false)?;
    let out_x = t_x.select_col(pass_x.logits, class)?;

    let mut t_b = Tape::new();
    let bv = t_b.leaf(&b1, true);
    let pass_b = model.forward_eval(&mut t_b, bv, false)?;
    let out_b = t_b.select_col(pass_b.logits, class)?;

    let fx = t_x.data(out_x)[0].to_f64();
    let fb = t_b.data(out_b)[0].to_f64();

    let mult = t_x.multiplier_sweep(&t_b, out_x)?;
    let m = mult
        .get(xv)
        .ok_or_else(|| XfddError::Numeric("input multipliers missing from sweep".into()))?;
    let values: Vec<F> = m
        .iter()
        .zip(x1.data().iter().zip(b1.data()))
        .map(|(&mj, (&xj, &bj))| F::from_f64(mj.to_f64() * (xj.to_f64() - bj.to_f64())))
        .collect();
    Ok(Attribution {
        values: Tensor::new(vec![c, w], values)?,
        method: "deeplift".into(),
        baseline: String::new(),
        class,
        output_at_x: fx,
        output_at_baseline: fb,
    })
}

// ---- gradient SHAP ----

/// Monte-Carlo SHAP approximation: displacement times gradient at jittered
/// points interpolated between a drawn baseline and the input.
pub fn gradient_shap<F: Scalar>(
    model: &Model<F>,
    x: &Tensor<F>,
    baselines: &[Tensor<F>],
    class: usize,
    samples: usize,
    sigma: f64,
    seed: u64,
) -> Result<Attribution<F>> {
    if samples == 0 {
        return invalid("gradient SHAP needs at least one sample");
    }
    if baselines.is_empty() {
        return invalid("gradient SHAP needs a non-empty baseline set");
    }
    if sigma < 0.0 {
        return invalid(format!("noise level {sigma} must be non-negative"));
    }
    for b in baselines {
        check_pair(x, b)?;
    }
    let (c, w) = window_shape(x);
    let xd: Vec<f64> = x.data().iter().map(|&v| v.to_f64()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f64; xd.len()];
    for _ in 0..samples {
        let b = &baselines[rng.gen_range(0..baselines.len())];
        let alpha: f64 = rng.gen();
        let point: Vec<F> = xd
            .iter()
            .zip(b.data())
            .map(|(&xj, &bj)| {
                let bj = bj.to_f64();
                let noise: f64 =
                    if sigma > 0.0 { rng.sample::<f64, _>(StandardNormal) * sigma } else { 0.0 };
                F::from_f64(bj + alpha * (xj - bj) + noise)
            })
            .collect();
        let pt = Tensor::new(vec![c, w], point)?;
        let (_, g) = logit_grad(model, &pt, class)?;
        for ((a, gj), (&xj, &bj)) in acc.iter_mut().zip(&g).zip(xd.iter().zip(b.data())) {
            *a += (xj - bj.to_f64()) * gj;
        }
    }
    let values: Vec<F> = acc.iter().map(|&a| F::from_f64(a / samples as f64)).collect();
    let mut fb = 0.0;
    for b in baselines {
        fb += logit_of(model, b, class)?;
    }
    Ok(Attribution {
        values: Tensor::new(vec![c, w], values)?,
        method: "gradshap".into(),
        baseline: String::new(),
        class,
        output_at_x: logit_of(model, x, class)?,
        output_at_baseline: fb / baselines.len() as f64,
    })
}

// ---- DeepLIFT SHAP ----

/// Mean of per-baseline DeepLIFT attributions. Deliberately unamortized: each
/// baseline pays for its own paired forward and sweep, which is what makes
/// this the slowest method in the timing table.
pub fn deeplift_shap<F: Scalar>(
    model: &Model<F>,
    x: &Tensor<F>,
    baselines: &[Tensor<F>],
    class: usize,
) -> Result<Attribution<F>> {
    if baselines.is_empty() {
        return invalid("DeepLIFT SHAP needs a non-empty baseline set");
    }
    let (c, w) = window_shape(x);
    // Running mean instead of sum-then-divide: identical baselines then
    // reproduce the single-baseline result bit for bit.
    let mut acc = vec![0.0f64; c * w];
    let mut fb = 0.0;
    let mut fx = 0.0;
    for (i, b) in baselines.iter().enumerate() {
        let inv = 1.0 / (i + 1) as f64;
        let single = deeplift(model, x, b, class)?;
        for (a, &v) in acc.iter_mut().zip(single.values.data()) {
            *a += (v.to_f64() - *a) * inv;
        }
        fb += (single.output_at_baseline - fb) * inv;
        fx = single.output_at_x;
    }
    let values: Vec<F> = acc.iter().map(|&a| F::from_f64(a)).collect();
    Ok(Attribution {
        values: Tensor::new(vec![c, w], values)?,
        method: "dlshap".into(),
        baseline: String::new(),
        class,
        output_at_x: fx,
        output_at_baseline: fb,
    })
}

// ---- exact Shapley oracle ----

/// Exact Shapley values over channel groups by full subset enumeration with
/// the combinatorial weights |S|! (|F|-|S|-1)! / |F|!. Masking replaces a
/// group's channels with the baseline across all timesteps. Test oracle only:
/// the evaluation count is 2^groups.
pub fn shapley_exact_oracle<F: Scalar>(
    model: &Model<F>,
    x: &Tensor<F>,
    baseline: &Tensor<F>,
    class: usize,
    groups: &[Vec<usize>],
) -> Result<Vec<f64>> {
    check_pair(x, baseline)?;
    let g = groups.len();
    if g == 0 {
        return invalid("Shapley oracle needs at least one feature group");
    }
    if g > 12 {
        return invalid(format!("Shapley oracle limited to 12 groups, got {g} (2^{g} evaluations)"));
    }
    let (c, w) = window_shape(x);
    let mut seen = vec![false; c];
    for (gi, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return invalid(format!("feature group {gi} is empty"));
        }
        for &ch in group {
            if ch >= c {
                return invalid(format!("group {gi} channel {ch} out of range ({c} channels)"));
            }
            if seen[ch] {
                return invalid(format!("channel {ch} appears in more than one group"));
            }
            seen[ch] = true;
        }
    }

    // f(S): groups in S keep the input, groups outside S take the baseline,
    // ungrouped channels always keep the input.
    let total = 1usize << g;
    let mut rows = Vec::with_capacity(total);
    for mask in 0..total {
        let mut data = x.data().to_vec();
        for (gi, group) in groups.iter().enumerate() {
            if mask & (1 << gi) == 0 {
                for &ch in group {
                    data[ch * w..(ch + 1) * w].copy_from_slice(&baseline.data()[ch * w..(ch + 1) * w]);
                }
            }
        }
        rows.push(Tensor::new(vec![c, w], data)?);
    }
    let f = logits_batched(model, &rows, class)?;

    let mut fact = [1.0f64; 13];
    for i in 1..13 {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight = |s: usize| fact[s] * fact[g - s - 1] / fact[g];

    let mut phi = vec![0.0f64; g];
    for (gi, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << gi;
        for mask in 0..total {
            if mask & bit != 0 {
                continue;
            }
            let s = (mask as u32).count_ones() as usize;
            *p += weight(s) * (f[mask | bit] - f[mask]);
        }
    }
    Ok(phi)
}

// ---- method dispatch ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ig,
    DeepLift,
    GradShap,
    DeepLiftShap,
}

pub const ALL_METHODS: [Method; 4] =
    [Method::Ig, Method::DeepLift, Method::GradShap, Method::DeepLiftShap];

impl std::str::FromStr for Method {
    type Err = XfddError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ig" | "integrated-gradients" => Ok(Method::Ig),
            "deeplift" => Ok(Method::DeepLift),
            "gradshap" | "gradient-shap" => Ok(Method::GradShap),
            "dlshap" | "deeplift-shap" => Ok(Method::DeepLiftShap),
            other => Err(XfddError::InvalidArgument(format!(
                "unknown method '{other}' (expected ig, deeplift, gradshap, dlshap)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Ig => "ig",
            Method::DeepLift => "deeplift",
            Method::GradShap => "gradshap",
            Method::DeepLiftShap => "dlshap",
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AttrConfig {
    pub ig_steps: usize,
    pub gs_samples: usize,
    pub gs_sigma: f64,
    pub seed: u64,
}

impl Default for AttrConfig {
    fn default() -> Self {
        AttrConfig { ig_steps: 50, gs_samples: 20, gs_sigma: 0.0, seed: 0 }
    }
}

/// One window through one method. Multi-baseline sets are averaged for the
/// single-baseline methods (for DeepLIFT that is exactly DeepLIFT SHAP).
pub fn attribute<F: Scalar>(
    model: &Model<F>,
    x: &Tensor<F>,
    baselines: &[Tensor<F>],
    class: usize,
    method: Method,
    cfg: &AttrConfig,
) -> Result<Attribution<F>> {
    if baselines.is_empty() {
        return invalid("attribution needs at least one baseline window");
    }
    match method {
        Method::Ig => {
            let (c, w) = window_shape(x);
            let mut acc = vec![0.0f64; c * w];
            let mut fb = 0.0;
            let mut fx = 0.0;
            for (i, b) in baselines.iter().enumerate() {
                let inv = 1.0 / (i + 1) as f64;
                let one = integrated_gradients(model, x, b, class, cfg.ig_steps)?;
                for (a, &v) in acc.iter_mut().zip(one.values.data()) {
                    *a += (v.to_f64() - *a) * inv;
                }
                fb += (one.output_at_baseline - fb) * inv;
                fx = one.output_at_x;
            }
            let values: Vec<F> = acc.iter().map(|&a| F::from_f64(a)).collect();
            Ok(Attribution {
                values: Tensor::new(vec![c, w], values)?,
                method: "ig".into(),
                baseline: String::new(),
                class,
                output_at_x: fx,
                output_at_baseline: fb,
            })
        }
        Method::DeepLift => {
            if baselines.len() == 1 {
                deeplift(model, x, &baselines[0], class)
            } else {
                let mut a = deeplift_shap(model, x, baselines, class)?;
                a.method = "deeplift".into();
                Ok(a)
            }
        }
        Method::GradShap => {
            gradient_shap(model, x, baselines, class, cfg.gs_samples, cfg.gs_sigma, cfg.seed)
        }
        Method::DeepLiftShap => deeplift_shap(model, x, baselines, class),
    }
}

/// Attribution for every window of a dataset, targeting each window's own
/// label. Sample i draws its stochastic choices from seed root+i, so the
/// result is independent of evaluation order.
pub fn attribute_dataset<F: Scalar>(
    model: &Model<F>,
    ds: &LabeledWindowDataset<F>,
    baselines: &[Tensor<F>],
    method: Method,
    cfg: &AttrConfig,
) -> Result<Vec<Attribution<F>>> {
    if ds.is_empty() {
        return invalid("cannot attribute an empty dataset");
    }
    let mut out = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let x = ds.window_tensor(i);
        let per_sample = AttrConfig { seed: cfg.seed.wrapping_add(i as u64), ..*cfg };
        out.push(attribute(model, &x, baselines, ds.labels[i] as usize, method, &per_sample)?);
    }
    Ok(out)
}

// ---- importance aggregation ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub method: String,
    pub baseline: String,
    pub channel_names: Vec<String>,
    /// Mean absolute attribution per channel over all samples and timesteps.
    pub gfi: Vec<f64>,
    /// Channel indices in descending score order (ties by channel index).
    pub ranking: Vec<usize>,
    /// Per-class rows; None marks a class absent from the sample set.
    pub pcfi: Vec<Option<Vec<f64>>>,
    pub pcfi_rankings: Vec<Option<Vec<usize>>>,
}

fn mean_abs_scores<F: Scalar>(attrs: &[&Attribution<F>], c: usize, w: usize) -> Vec<f64> {
    let mut scores = vec![0.0f64; c];
    for a in attrs {
        let d = a.values.data();
        for ch in 0..c {
            for t in 0..w {
                scores[ch] += d[ch * w + t].to_f64().abs();
            }
        }
    }
    let denom = (attrs.len() * w) as f64;
    for s in &mut scores {
        *s /= denom;
    }
    scores
}

fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order
}

/// Global feature importance: mean |attribution| per channel, ranked.
pub fn gfi<F: Scalar>(attrs: &[Attribution<F>], channel_names: &[String]) -> Result<ImportanceReport> {
    if attrs.is_empty() {
        return invalid("feature importance needs at least one attribution");
    }
    let (c, w) = window_shape(&attrs[0].values);
    if channel_names.len() != c {
        return invalid(format!("{} channel names for {c} channels", channel_names.len()));
    }
    let refs: Vec<&Attribution<F>> = attrs.iter().collect();
    let scores = mean_abs_scores(&refs, c, w);
    let ranking = rank_desc(&scores);
    Ok(ImportanceReport {
        method: attrs[0].method.clone(),
        baseline: attrs[0].baseline.clone(),
        channel_names: channel_names.to_vec(),
        gfi: scores,
        ranking,
        pcfi: Vec::new(),
        pcfi_rankings: Vec::new(),
    })
}

/// Per-class feature importance on top of the global scores. Classes with no
/// samples get an absent row, not a zero row.
pub fn pcfi<F: Scalar>(
    attrs: &[Attribution<F>],
    labels: &[u8],
    num_classes: usize,
    channel_names: &[String],
) -> Result<ImportanceReport> {
    if attrs.len() != labels.len() {
        return invalid(format!("{} attributions vs {} labels", attrs.len(), labels.len()));
    }
    let mut report = gfi(attrs, channel_names)?;
    let (c, w) = window_shape(&attrs[0].values);
    for class in 0..num_classes {
        let members: Vec<&Attribution<F>> = attrs
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l as usize == class)
            .map(|(a, _)| a)
            .collect();
        if members.is_empty() {
            report.pcfi.push(None);
            report.pcfi_rankings.push(None);
        } else {
            let scores = mean_abs_scores(&members, c, w);
            report.pcfi_rankings.push(Some(rank_desc(&scores)));
            report.pcfi.push(Some(scores));
        }
    }
    Ok(report)
}

// ---- pairwise interactions ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InteractionMatrix {
    pub channels: usize,
    pub channel_names: Vec<String>,
    /// Row-major [channels x channels]; diagonal 1.0, off-diagonal the
    /// normalized interaction clipped to [-1, 1].
    pub normalized: Vec<f64>,
    /// Diagonal holds the single-channel masking effect D(i); off-diagonal
    /// the raw interaction I(i,j) = A({i,j}) - D(i) - D(j).
    pub raw: Vec<f64>,
    /// Unordered pairs (i < j) whose combined masking effect strictly exceeds
    /// the sum of the individual effects (tolerance 1e-9).
    pub flagged: Vec<(usize, usize)>,
}

const INTERACTION_EPS: f64 = 1e-12;
const FLAG_TOL: f64 = 1e-9;

/// Masking-based pairwise interaction screen for the target class. The
/// masked effect A(S) is the mean output drop when channels in S are replaced
/// by the baseline; I(i,j) measures how far the joint drop deviates from
/// additivity.
pub fn feature_interactions<F: Scalar>(
    model: &Model<F>,
    xs: &[Tensor<F>],
    baseline: &Tensor<F>,
    class: usize,
    channel_names: &[String],
) -> Result<InteractionMatrix> {
    if xs.is_empty() {
        return invalid("interaction screen needs a non-empty sample set");
    }
    let (c, w) = window_shape(&xs[0]);
    if channel_names.len() != c {
        return invalid(format!("{} channel names for {c} channels", channel_names.len()));
    }
    let n = xs.len();
    let mut d = vec![0.0f64; c];
    let mut pair = vec![0.0f64; c * c];
    for x in xs {
        check_pair(x, baseline)?;
        let masked = |sets: &[usize]| -> Result<Tensor<F>> {
            let mut data = x.data().to_vec();
            for &ch in sets {
                data[ch * w..(ch + 1) * w].copy_from_slice(&baseline.data()[ch * w..(ch + 1) * w]);
            }
            Tensor::new(vec![c, w], data)
        };
        let mut rows = Vec::with_capacity(1 + c + c * (c - 1) / 2);
        rows.push(x.clone());
        for i in 0..c {
            rows.push(masked(&[i])?);
        }
        for i in 0..c {
            for j in i + 1..c {
                rows.push(masked(&[i, j])?);
            }
        }
        let f = logits_batched(model, &rows, class)?;
        let f_full = f[0];
        for i in 0..c {
            d[i] += f_full - f[1 + i];
        }
        let mut idx = 1 + c;
        for i in 0..c {
            for j in i + 1..c {
                let a_pair = f_full - f[idx];
                pair[i * c + j] += a_pair;
                pair[j * c + i] += a_pair;
                idx += 1;
            }
        }
    }
    for v in d.iter_mut().chain(pair.iter_mut()) {
        *v /= n as f64;
    }
    if d.iter().all(|&v| v == 0.0) {
        return invalid("interaction diagonal is all zero: the model output ignores every channel");
    }

    let mut raw = vec![0.0f64; c * c];
    let mut normalized = vec![0.0f64; c * c];
    let mut flagged = Vec::new();
    for i in 0..c {
        raw[i * c + i] = d[i];
        normalized[i * c + i] = 1.0;
        for j in i + 1..c {
            let inter = pair[i * c + j] - d[i] - d[j];
            raw[i * c + j] = inter;
            raw[j * c + i] = inter;
            let m = (inter / d[i].abs().max(d[j].abs()).max(INTERACTION_EPS)).clamp(-1.0, 1.0);
            normalized[i * c + j] = m;
            normalized[j * c + i] = m;
            if inter > FLAG_TOL {
                flagged.push((i, j));
            }
        }
    }
    Ok(InteractionMatrix {
        channels: c,
        channel_names: channel_names.to_vec(),
        normalized,
        raw,
        flagged,
    })
}

// ---- top-k selection ----

#[derive(Clone, Debug)]
pub struct TopKSelection<F: Scalar> {
    /// Selected channel indices in descending importance order.
    pub channels: Vec<usize>,
    pub names: Vec<String>,
    /// True when the score at the k-boundary tied; the tie was broken by
    /// channel index order.
    pub boundary_tie: bool,
    pub dataset: LabeledWindowDataset<F>,
    pub spec: ModelSpec,
}

/// Keep the k most important channels of a dataset and derive a model spec
/// for the reduced input.
pub fn select_top_k<F: Scalar>(
    report: &ImportanceReport,
    ds: &LabeledWindowDataset<F>,
    base_spec: &ModelSpec,
    k: usize,
) -> Result<TopKSelection<F>> {
    let c = report.gfi.len();
    if k == 0 || k > c {
        return invalid(format!("top-k selection needs 1 <= k <= {c}, got {k}"));
    }
    if ds.channels != c {
        return invalid(format!("dataset has {} channels, report has {c}", ds.channels));
    }
    let channels: Vec<usize> = report.ranking[..k].to_vec();
    let boundary_tie =
        k < c && report.gfi[report.ranking[k - 1]] == report.gfi[report.ranking[k]];
    let names = channels.iter().map(|&i| report.channel_names[i].clone()).collect();
    let dataset = ds.select_channels(&channels)?;
    let spec = base_spec.clone().with_input_channels(k);
    Ok(TopKSelection { channels, names, boundary_tie, dataset, spec })
}

// ---- timing ----

pub const ATTRIBUTION_COLUMNS: [&str; 4] = ["IGs", "DeepLIFT", "Gradient SHAP", "DeepLIFT SHAP"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimingTable {
    pub columns: Vec<String>,
    /// Wall-clock seconds over the whole sample budget, column order above.
    pub total_s: [f64; 4],
    pub per_window_s: [f64; 4],
    /// Reference costs for the work-multiplicity checks.
    pub single_gradient_s: f64,
    pub single_deeplift_s: f64,
    pub windows: usize,
    pub ig_steps: usize,
    pub gs_samples: usize,
    pub dlshap_baselines: usize,
}

/// Wall-clock comparison of the four methods over a fixed window budget.
pub fn attribution_timing<F: Scalar>(
    model: &Model<F>,
    xs: &[Tensor<F>],
    baselines: &[Tensor<F>],
    class: usize,
    cfg: &AttrConfig,
) -> Result<TimingTable> {
    if xs.is_empty() || baselines.is_empty() {
        return invalid("timing needs non-empty sample and baseline sets");
    }
    let b0 = &baselines[0];
    let n = xs.len() as f64;

    let t = Instant::now();
    for x in xs {
        integrated_gradients(model, x, b0, class, cfg.ig_steps)?;
    }
    let ig_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    for x in xs {
        deeplift(model, x, b0, class)?;
    }
    let dl_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    for (i, x) in xs.iter().enumerate() {
        gradient_shap(
            model,
            x,
            baselines,
            class,
            cfg.gs_samples,
            cfg.gs_sigma,
            cfg.seed.wrapping_add(i as u64),
        )?;
    }
    let gs_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    for x in xs {
        deeplift_shap(model, x, baselines, class)?;
    }
    let dls_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    for x in xs {
        logit_grad(model, x, class)?;
    }
    let grad_s = t.elapsed().as_secs_f64();

    Ok(TimingTable {
        columns: ATTRIBUTION_COLUMNS.iter().map(|s| s.to_string()).collect(),
        total_s: [ig_s, dl_s, gs_s, dls_s],
        per_window_s: [ig_s / n, dl_s / n, gs_s / n, dls_s / n],
        single_gradient_s: grad_s / n,
        single_deeplift_s: dl_s / n,
        windows: xs.len(),
        ig_steps: cfg.ig_steps,
        gs_samples: cfg.gs_samples,
        dlshap_baselines: baselines.len(),
    })
}
