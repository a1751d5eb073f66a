//! Sparse code transfer: per-position logistic classifiers that map the
//! feature vector of a pixel to a predicted label patch around it, and the
//! density-compensated Gaussian kernel used to average overlapping patches.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{extract_patch_into, ImageGrid, PatchGeometry};
use crate::logistic::{fit_logistic, sigmoid, LogisticFit, LogisticProblem, SolverOptions, SparseRows};
use crate::network::{rectify_vector, FeatureStack};
use crate::seed::{derive_indexed, derive_seed, rng};
use crate::sparse::{read_u32, SparseVector};

/// Density thinning beyond a radius: offsets farther than `radius` from
/// the center keep `fraction` of the lattice (until the next entry).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityStep {
    pub radius: f64,
    pub fraction: f64,
}

/// Patch averaging weights on a thinned set of offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragingKernel {
    side: usize,
    sigma: f64,
    schedule: Vec<DensityStep>,
    /// Retained offsets `(dx, dy)` in row-major order.
    offsets: Vec<(isize, isize)>,
    weights: Vec<f64>,
}

/// Unnormalized Gaussian `exp(-(x^2 + y^2) / (2 sigma^2))`.
pub fn gaussian(dx: isize, dy: isize, sigma: f64) -> f64 {
    (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp()
}

/// Whether lattice point `(x, y)` survives thinning to `fraction = 2^-k`.
/// Even `k` keeps the sublattice of spacing `2^(k/2)`; odd `k` keeps the
/// checkerboard of that sublattice.
fn lattice_keeps(x: isize, y: isize, k: u32) -> bool {
    let s = 1isize << (k / 2);
    if x.rem_euclid(s) != 0 || y.rem_euclid(s) != 0 {
        return false;
    }
    k % 2 == 0 || (x.div_euclid(s) + y.div_euclid(s)).rem_euclid(2) == 0
}

fn fraction_exponent(f: f64) -> Result<u32> {
    let k = -f.log2();
    let kr = k.round();
    if !(f > 0.0 && f <= 1.0) || (k - kr).abs() > 1e-9 || kr > 30.0 {
        return Err(invalid(format!(
            "keep fractions must be powers of two in (0, 1], got {f}"
        )));
    }
    Ok(kr as u32)
}

/// Schedule used when none is given. Sides below 11 keep every offset.
pub fn default_schedule(side: usize) -> Vec<DensityStep> {
    if side < 11 {
        return vec![DensityStep { radius: 0.0, fraction: 1.0 }];
    }
    let m = side as f64;
    vec![
        DensityStep { radius: m / 12.0, fraction: 0.5 },
        DensityStep { radius: m / 3.0, fraction: 0.25 },
    ]
}

/// Default Gaussian width for a patch side.
pub fn default_sigma(side: usize) -> f64 {
    side as f64 / 4.0
}

/// Builds the kernel: every offset within the first radius is kept, the
/// rest are thinned by the schedule's lattice patterns, and each retained
/// weight is the Gaussian divided by the local keep fraction.
pub fn build_adaptive_kernel(side: usize, sigma: f64, schedule: &[DensityStep]) -> Result<AveragingKernel> {
    if side % 2 == 0 {
        return Err(invalid(format!("kernel side must be odd, got {side}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    if schedule.is_empty() {
        return Err(invalid("empty density schedule"));
    }
    let mut exps = Vec::with_capacity(schedule.len());
    for (i, s) in schedule.iter().enumerate() {
        exps.push(fraction_exponent(s.fraction)?);
        if !(s.radius >= 0.0) {
            return Err(invalid("schedule radii must be >= 0"));
        }
        if i > 0 && (s.radius <= schedule[i - 1].radius || s.fraction > schedule[i - 1].fraction) {
            return Err(invalid(
                "schedule radii must increase and fractions must not increase",
            ));
        }
    }
    let r = (side / 2) as isize;
    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d = ((dx * dx + dy * dy) as f64).sqrt();
            let (k, frac) = schedule
                .iter()
                .zip(&exps)
                .filter(|(s, _)| d > s.radius)
                .last()
                .map_or((0, 1.0), |(s, &k)| (k, s.fraction));
            if lattice_keeps(dx, dy, k) {
                offsets.push((dx, dy));
                weights.push(gaussian(dx, dy, sigma) / frac);
            }
        }
    }
    Ok(AveragingKernel {
        side,
        sigma,
        schedule: schedule.to_vec(),
        offsets,
        weights,
    })
}

impl AveragingKernel {
    /// Every offset kept with Gaussian weights.
    pub fn full(side: usize, sigma: f64) -> Result<Self> {
        build_adaptive_kernel(side, sigma, &[DensityStep { radius: 0.0, fraction: 1.0 }])
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn schedule(&self) -> &[DensityStep] {
        &self.schedule
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Index of `(dx, dy)` in the truth patch layout.
    fn patch_position(&self, (dx, dy): (isize, isize)) -> usize {
        let r = (self.side / 2) as isize;
        ((dy + r) as usize) * self.side + (dx + r) as usize
    }
}

/// Appends the constant feature to an already rectified vector.
pub fn with_constant(features: &SparseVector) -> SparseVector {
    let dim = features.dim();
    let mut out = SparseVector::empty(dim + 1);
    for (i, v) in features.iter() {
        out.push_sorted(i, v);
    }
    out.push_sorted(dim, 1.0);
    out
}

/// Rectifies a signed code and appends the constant feature.
pub fn rectified_code(code: &SparseVector) -> SparseVector {
    with_constant(&rectify_vector(code))
}

/// Training pairs: feature vectors with the constant appended, and the
/// `side x side x channels` truth patch around each sampled pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPatchSet {
    geometry: PatchGeometry,
    codes: Vec<SparseVector>,
    patches: Vec<f64>,
}

impl LabelPatchSet {
    pub fn new(geometry: PatchGeometry, codes: Vec<SparseVector>, patches: Vec<f64>) -> Result<Self> {
        if patches.len() != codes.len() * geometry.len() {
            return Err(Error::DimensionMismatch {
                expected: codes.len() * geometry.len(),
                got: patches.len(),
            });
        }
        if let Some(c) = codes.first() {
            if codes.iter().any(|v| v.dim() != c.dim()) {
                return Err(invalid("codes of mixed dimensionality"));
            }
        }
        for c in &codes {
            if c.is_empty() || c.get(c.dim() - 1) != 1.0 || c.values().iter().any(|&v| v < 0.0) {
                return Err(invalid("codes must be nonnegative with a trailing constant 1"));
            }
        }
        Ok(Self {
            geometry,
            codes,
            patches,
        })
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[SparseVector] {
        &self.codes
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let n = self.geometry.len();
        &self.patches[i * n..(i + 1) * n]
    }

    /// Feature dimensionality including the constant.
    pub fn feature_dim(&self) -> usize {
        self.codes.first().map_or(0, |c| c.dim())
    }
}

/// Class balancing for pair sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Balance {
    /// Uniform over all pixels.
    None,
    /// This fraction of the samples is centered on pixels where some truth
    /// channel is positive.
    Positive(f64),
}

/// Draws `n` items from `pool`: without replacement when the pool is large
/// enough, otherwise every item once and the rest with replacement.
fn draw<T: Copy>(pool: &[T], n: usize, r: &mut crate::seed::Rng) -> Vec<T> {
    if n <= pool.len() {
        let mut idx = sample(r, pool.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i]).collect()
    } else {
        let mut out = pool.to_vec();
        out.extend((0..n - pool.len()).map(|_| pool[r.gen_range(0..pool.len())]));
        out
    }
}

/// Samples `(feature, truth patch)` pairs from aligned stacks and truths.
pub fn sample_training_pairs(
    stacks: &[FeatureStack],
    truths: &[ImageGrid],
    side: usize,
    count: usize,
    seed: u64,
    balance: Balance,
) -> Result<LabelPatchSet> {
    if stacks.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: stacks.len(),
            got: truths.len(),
        });
    }
    if count == 0 {
        return Err(invalid("sample count must be >= 1"));
    }
    let Some(first) = truths.first() else {
        return Err(invalid("no images to sample from"));
    };
    let h = first.channels();
    for (s, t) in stacks.iter().zip(truths) {
        if (s.width(), s.height()) != (t.width(), t.height()) {
            return Err(invalid(format!(
                "feature grid {}x{} does not match truth {}x{}",
                s.width(),
                s.height(),
                t.width(),
                t.height()
            )));
        }
        if t.channels() != h {
            return Err(Error::ChannelMismatch { expected: h, got: t.channels() });
        }
        if s.dim() != stacks[0].dim() {
            return Err(Error::DimensionMismatch { expected: stacks[0].dim(), got: s.dim() });
        }
    }
    let geom = PatchGeometry::new(side, h)?;

    let mut all = Vec::new();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (g, t) in truths.iter().enumerate() {
        for y in 0..t.height() {
            for x in 0..t.width() {
                let loc = (g, x, y);
                all.push(loc);
                if t.pixel(x, y).iter().any(|&v| v > 0.5) {
                    pos.push(loc);
                } else {
                    neg.push(loc);
                }
            }
        }
    }
    let mut r = rng(seed);
    let locations = match balance {
        Balance::None => draw(&all, count.min(all.len()), &mut r),
        Balance::Positive(frac) => {
            if !(0.0..=1.0).contains(&frac) {
                return Err(invalid(format!("positive fraction must lie in [0, 1], got {frac}")));
            }
            if pos.is_empty() && frac > 0.0 {
                return Err(Error::NoPositiveSamples);
            }
            let n_pos = (frac * count as f64).round() as usize;
            let n_neg = if neg.is_empty() { 0 } else { count - n_pos };
            let mut l = draw(&pos, n_pos, &mut r);
            l.extend(draw(&neg, n_neg, &mut r));
            l
        }
    };

    let mut codes = Vec::with_capacity(locations.len());
    let mut patches = vec![0.0; locations.len() * geom.len()];
    for (i, &(g, x, y)) in locations.iter().enumerate() {
        codes.push(with_constant(stacks[g].cell(x, y)));
        extract_patch_into(&truths[g], x, y, geom, &mut patches[i * geom.len()..(i + 1) * geom.len()])?;
    }
    LabelPatchSet::new(geom, codes, patches)
}

/// Transfer training knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub reg_strength: f64,
    /// Fraction of features each classifier ignores; 0 disables dropping.
    pub drop_fraction: f64,
    pub drop_seed: u64,
    pub max_iterations: usize,
    pub grad_tol: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            reg_strength: 1.0,
            drop_fraction: 0.5,
            drop_seed: 0,
            max_iterations: 200,
            grad_tol: 1e-6,
        }
    }
}

impl TransferConfig {
    fn solver(&self) -> SolverOptions {
        SolverOptions {
            max_iterations: self.max_iterations,
            grad_tol: self.grad_tol,
            ..Default::default()
        }
    }
}

/// Which stack features a classifier sees. Drawn from its own seed, so the
/// mask is reproducible from the seed alone.
pub fn feature_mask(seed: u64, stack_dim: usize, drop_fraction: f64) -> Vec<bool> {
    if drop_fraction <= 0.0 {
        return vec![true; stack_dim];
    }
    let mut r = rng(seed);
    (0..stack_dim).map(|_| !r.gen_bool(drop_fraction)).collect()
}

/// One logistic output: bias plus weights over stack features (zero for
/// dropped features).
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub drop_seed: u64,
    pub bias: f64,
    pub weights: Vec<f32>,
}

/// Classifier bank for one label patch geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferModel {
    channels: usize,
    kernel: AveragingKernel,
    feature_dim: usize,
    drop_fraction: f64,
    /// Indexed by `kernel position * channels + channel`.
    classifiers: Vec<Classifier>,
}

/// Per-classifier diagnostics from training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierReport {
    pub position: (isize, isize),
    pub channel: usize,
    pub fit: LogisticFit,
}

/// Training data in solver form: one sparse row per sample, constant removed.
pub fn design_rows(data: &LabelPatchSet) -> SparseRows {
    let dim = data.feature_dim() - 1;
    let mut rows = SparseRows::new(dim);
    for c in data.codes() {
        rows.push_row(c.iter().filter(|&(i, _)| i < dim));
    }
    rows
}

/// Trains one classifier per retained kernel offset and label channel.
pub fn train_transfer(
    data: &LabelPatchSet,
    kernel: &AveragingKernel,
    cfg: &TransferConfig,
) -> Result<TransferModel> {
    Ok(train_transfer_reported(data, kernel, cfg)?.0)
}

/// Like [`train_transfer`], also returning the unrounded fits.
pub fn train_transfer_reported(
    data: &LabelPatchSet,
    kernel: &AveragingKernel,
    cfg: &TransferConfig,
) -> Result<(TransferModel, Vec<ClassifierReport>)> {
    if data.is_empty() {
        return Err(invalid("empty training set"));
    }
    if kernel.side() != data.geometry().side() {
        return Err(invalid(format!(
            "kernel side {} does not match label patch side {}",
            kernel.side(),
            data.geometry().side()
        )));
    }
    if !(cfg.reg_strength >= 0.0) || !(0.0..1.0).contains(&cfg.drop_fraction) {
        return Err(invalid("reg_strength must be >= 0 and drop_fraction in [0, 1)"));
    }
    let h = data.geometry().channels();
    let rows = design_rows(data);
    let stack_dim = rows.dim();
    let jobs: Vec<(usize, usize)> = (0..kernel.len())
        .flat_map(|p| (0..h).map(move |ch| (p, ch)))
        .collect();
    let results: Vec<(Classifier, ClassifierReport)> = jobs
        .par_iter()
        .enumerate()
        .map(|(j, &(p, ch))| {
            let offset = kernel.offsets()[p];
            let slot = kernel.patch_position(offset) * h + ch;
            let targets: Vec<f64> = (0..data.len()).map(|i| data.patch(i)[slot]).collect();
            let drop_seed = derive_indexed(cfg.drop_seed, "feature-mask", j as u64);
            let mask = feature_mask(drop_seed, stack_dim, cfg.drop_fraction);
            let problem = LogisticProblem {
                rows: &rows,
                targets: &targets,
                active: Some(&mask),
                reg: cfg.reg_strength,
            };
            let fit = fit_logistic(&problem, &cfg.solver());
            if fit.bias_only {
                log::debug!("classifier at {offset:?} channel {ch} saw one class; bias only");
            }
            let classifier = Classifier {
                drop_seed,
                bias: fit.bias,
                weights: fit.weights.iter().map(|&w| w as f32).collect(),
            };
            (classifier, ClassifierReport { position: offset, channel: ch, fit })
        })
        .collect();
    let (classifiers, reports) = results.into_iter().unzip();
    Ok((
        TransferModel {
            channels: h,
            kernel: kernel.clone(),
            feature_dim: stack_dim + 1,
            drop_fraction: cfg.drop_fraction,
            classifiers,
        },
        reports,
    ))
}

const MODEL_MAGIC: &[u8; 4] = b"SLTM";
const MODEL_VERSION: u32 = 1;

impl TransferModel {
    /// Assembles a model from parts; `classifiers` are ordered by kernel
    /// position, then channel.
    pub fn from_parts(
        kernel: AveragingKernel,
        channels: usize,
        feature_dim: usize,
        drop_fraction: f64,
        classifiers: Vec<Classifier>,
    ) -> Result<Self> {
        if classifiers.len() != kernel.len() * channels {
            return Err(Error::DimensionMismatch {
                expected: kernel.len() * channels,
                got: classifiers.len(),
            });
        }
        for c in &classifiers {
            if c.weights.len() + 1 != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim - 1,
                    got: c.weights.len(),
                });
            }
            if !c.bias.is_finite() || c.weights.iter().any(|w| !w.is_finite()) {
                return Err(invalid("classifier weights must be finite"));
            }
        }
        Ok(Self {
            channels,
            kernel,
            feature_dim,
            drop_fraction,
            classifiers,
        })
    }

    pub fn side(&self) -> usize {
        self.kernel.side()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel(&self) -> &AveragingKernel {
        &self.kernel
    }

    /// Stack dimensionality plus one for the constant.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn drop_fraction(&self) -> f64 {
        self.drop_fraction
    }

    pub fn classifiers(&self) -> &[Classifier] {
        &self.classifiers
    }

    /// Pre-sigmoid score of classifier `j` on stack features `v` (without
    /// the constant). Reads one weight per stored nonzero plus the bias.
    pub fn score(&self, j: usize, v: &SparseVector) -> f64 {
        let c = &self.classifiers[j];
        c.bias + v.iter().map(|(i, x)| c.weights[i] as f64 * x).sum::<f64>()
    }

    /// Like [`Self::score`], counting weight reads into `lookups`.
    pub fn score_counted(&self, j: usize, v: &SparseVector, lookups: &AtomicUsize) -> f64 {
        let c = &self.classifiers[j];
        let mut s = c.bias;
        let mut n = 1;
        for (i, x) in v.iter() {
            s += c.weights[i] as f64 * x;
            n += 1;
        }
        lookups.fetch_add(n, Ordering::Relaxed);
        s
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let u32le = |v: usize| (v as u32).to_le_bytes();
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&u32le(self.side()))?;
        w.write_all(&u32le(self.channels))?;
        w.write_all(&self.kernel.sigma.to_le_bytes())?;
        w.write_all(&u32le(self.kernel.schedule.len()))?;
        for s in &self.kernel.schedule {
            w.write_all(&s.radius.to_le_bytes())?;
            w.write_all(&s.fraction.to_le_bytes())?;
        }
        w.write_all(&u32le(self.feature_dim))?;
        w.write_all(&self.drop_fraction.to_le_bytes())?;
        w.write_all(&u32le(self.kernel.len()))?;
        let r = (self.side() / 2) as isize;
        for &(dx, dy) in &self.kernel.offsets {
            w.write_all(&u32le((dx + r) as usize))?;
            w.write_all(&u32le((dy + r) as usize))?;
        }
        let stack_dim = self.feature_dim - 1;
        for c in &self.classifiers {
            w.write_all(&c.drop_seed.to_le_bytes())?;
            w.write_all(&c.bias.to_le_bytes())?;
            let mask = feature_mask(c.drop_seed, stack_dim, self.drop_fraction);
            for (wt, _) in c.weights.iter().zip(&mask).filter(|(_, &m)| m) {
                w.write_all(&wt.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("not a transfer model (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported transfer model version {version}")));
        }
        let side = read_u32(&mut r)? as usize;
        let channels = read_u32(&mut r)? as usize;
        let sigma = read_f64(&mut r)?;
        let steps = read_u32(&mut r)? as usize;
        let mut schedule = Vec::with_capacity(steps);
        for _ in 0..steps {
            let radius = read_f64(&mut r)?;
            let fraction = read_f64(&mut r)?;
            schedule.push(DensityStep { radius, fraction });
        }
        let kernel = build_adaptive_kernel(side, sigma, &schedule)?;
        let feature_dim = read_u32(&mut r)? as usize;
        if feature_dim == 0 {
            return Err(Error::Format("feature dimension must be >= 1".into()));
        }
        let drop_fraction = read_f64(&mut r)?;
        let positions = read_u32(&mut r)? as usize;
        let half = (side / 2) as isize;
        let mut offsets = Vec::with_capacity(positions);
        for _ in 0..positions {
            let x = read_u32(&mut r)? as isize - half;
            let y = read_u32(&mut r)? as isize - half;
            offsets.push((x, y));
        }
        if offsets != kernel.offsets {
            return Err(Error::Format("retained positions disagree with the kernel schedule".into()));
        }
        let stack_dim = feature_dim - 1;
        let mut classifiers = Vec::with_capacity(positions * channels);
        for _ in 0..positions * channels {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            let drop_seed = u64::from_le_bytes(b8);
            let bias = read_f64(&mut r)?;
            let mask = feature_mask(drop_seed, stack_dim, drop_fraction);
            let mut weights = vec![0f32; stack_dim];
            for (wt, _) in weights.iter_mut().zip(&mask).filter(|(_, &m)| m) {
                let mut b4 = [0u8; 4];
                r.read_exact(&mut b4)?;
                *wt = f32::from_le_bytes(b4);
            }
            classifiers.push(Classifier { drop_seed, bias, weights });
        }
        Self::from_parts(kernel, channels, feature_dim, drop_fraction, classifiers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Evaluates every classifier at every pixel, then forms each output
/// pixel as the kernel-weighted mean of the predictions that cover it.
pub fn predict_labeling(stack: &FeatureStack, model: &TransferModel) -> Result<ImageGrid> {
    predict_impl(stack, model, None)
}

/// [`predict_labeling`] that counts classifier weight reads.
pub fn predict_labeling_counted(
    stack: &FeatureStack,
    model: &TransferModel,
    lookups: &AtomicUsize,
) -> Result<ImageGrid> {
    predict_impl(stack, model, Some(lookups))
}

fn predict_impl(
    stack: &FeatureStack,
    model: &TransferModel,
    lookups: Option<&AtomicUsize>,
) -> Result<ImageGrid> {
    if model.feature_dim != stack.dim() + 1 {
        return Err(Error::DimensionMismatch {
            expected: model.feature_dim - 1,
            got: stack.dim(),
        });
    }
    let (w, h) = (stack.width(), stack.height());
    let nc = model.classifiers.len();
    let ch = model.channels;
    let probs: Vec<f64> = stack
        .cells()
        .par_iter()
        .flat_map_iter(|v| {
            (0..nc).map(move |j| {
                sigmoid(match lookups {
                    Some(counter) => model.score_counted(j, v, counter),
                    None => model.score(j, v),
                })
            })
        })
        .collect();
    let kernel = &model.kernel;
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|qy| {
            let mut row = vec![0.0; w * ch];
            for qx in 0..w {
                let mut total = 0.0;
                let acc = &mut row[qx * ch..(qx + 1) * ch];
                for (p, (&(dx, dy), &wt)) in kernel.offsets.iter().zip(&kernel.weights).enumerate() {
                    let px = qx as isize - dx;
                    let py = qy as isize - dy;
                    if px < 0 || py < 0 || px >= w as isize || py >= h as isize {
                        continue;
                    }
                    let base = (py as usize * w + px as usize) * nc + p * ch;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += wt * probs[base + c];
                    }
                    total += wt;
                }
                acc.iter_mut().for_each(|a| *a = (*a / total).clamp(0.0, 1.0));
            }
            row
        })
        .collect();
    ImageGrid::from_vec(w, h, ch, rows.concat())
}

/// Seed of the drop masks for a run rooted at `root`.
pub fn drop_seed(root: u64) -> u64 {
    derive_seed(root, "transfer/drop")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::SparseCodeMap;
    use rand::Rng;

    fn stack(w: usize, h: usize, dim: usize, seed: u64) -> FeatureStack {
        let mut r = rng(seed);
        let mut cells = Vec::new();
        for _ in 0..w * h {
            let mut pairs = Vec::new();
            for i in 0..dim {
                if r.gen_bool(0.3) {
                    pairs.push((i, r.gen_range(0.0..1.0)));
                }
            }
            cells.push(SparseVector::from_pairs(dim, pairs).unwrap());
        }
        FeatureStack::new(SparseCodeMap::new(w, h, dim, cells).unwrap()).unwrap()
    }

    fn random_model(kernel: AveragingKernel, channels: usize, dim: usize, seed: u64) -> TransferModel {
        let mut r = rng(seed);
        let classifiers = (0..kernel.len() * channels)
            .map(|_| Classifier {
                drop_seed: 0,
                bias: r.gen_range(-1.0..1.0),
                weights: (0..dim).map(|_| r.gen_range(-2.0f32..2.0)).collect(),
            })
            .collect();
        TransferModel::from_parts(kernel, channels, dim + 1, 0.0, classifiers).unwrap()
    }

    #[test]
    fn full_kernel_is_gaussian() {
        let k = AveragingKernel::full(21, 21.0 / 4.0).unwrap();
        assert_eq!(k.len(), 441);
        for (&(dx, dy), &w) in k.offsets().iter().zip(k.weights()) {
            let g = (-((dx * dx + dy * dy) as f64) / (2.0 * 5.25 * 5.25)).exp();
            assert_eq!(w, g);
        }
    }

    #[test]
    fn default_kernel_count_and_mass() {
        let k = build_adaptive_kernel(21, default_sigma(21), &default_schedule(21)).unwrap();
        assert!((141..=173).contains(&k.len()), "{} nonzeros", k.len());
        let full = AveragingKernel::full(21, default_sigma(21)).unwrap();
        let rel = k.total_weight() / full.total_weight();
        assert!((rel - 1.0).abs() < 0.05, "mass ratio {rel}");
        assert!(k.offsets().contains(&(0, 0)));
    }

    #[test]
    fn thinning_halves_lattice_density() {
        for k in 0..6u32 {
            let n = (0..16)
                .flat_map(|y| (0..16).map(move |x| (x, y)))
                .filter(|&(x, y)| lattice_keeps(x, y, k))
                .count();
            assert_eq!(n, 256 >> k);
        }
    }

    #[test]
    fn kernel_rejects_bad_input() {
        assert!(build_adaptive_kernel(4, 1.0, &default_schedule(5)).is_err());
        assert!(build_adaptive_kernel(5, 1.0, &[]).is_err());
        assert!(build_adaptive_kernel(5, 0.0, &default_schedule(5)).is_err());
        let s = [DensityStep { radius: 1.0, fraction: 0.3 }];
        assert!(build_adaptive_kernel(5, 1.0, &s).is_err());
        let s = [
            DensityStep { radius: 1.0, fraction: 0.25 },
            DensityStep { radius: 2.0, fraction: 0.5 },
        ];
        assert!(build_adaptive_kernel(5, 1.0, &s).is_err());
    }

    #[test]
    fn bias_only_model_predicts_constant() {
        let kernel = build_adaptive_kernel(21, 5.25, &default_schedule(21)).unwrap();
        let b = (0.8f64 / 0.2).ln();
        let classifiers = vec![
            Classifier { drop_seed: 0, bias: b, weights: vec![0.0; 4] };
            kernel.len()
        ];
        let model = TransferModel::from_parts(kernel, 1, 5, 0.0, classifiers).unwrap();
        let out = predict_labeling(&stack(9, 7, 4, 1), &model).unwrap();
        for &v in out.data() {
            assert!((v - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_kernel_is_direct_evaluation() {
        let kernel = AveragingKernel::full(1, 1.0).unwrap();
        let model = random_model(kernel, 2, 5, 3);
        let s = stack(6, 5, 5, 2);
        let out = predict_labeling(&s, &model).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                for c in 0..2 {
                    let u = model.score(c, s.cell(x, y));
                    assert!((out.get(x, y, c) - sigmoid(u)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn prediction_matches_dense_scatter() {
        let kernel = build_adaptive_kernel(5, 1.25, &[
            DensityStep { radius: 1.0, fraction: 0.5 },
        ])
        .unwrap();
        let model = random_model(kernel.clone(), 2, 6, 5);
        let s = stack(8, 8, 6, 4);
        let out = predict_labeling(&s, &model).unwrap();
        let mut num = vec![0.0; 8 * 8 * 2];
        let mut den = vec![0.0; 8 * 8];
        for py in 0..8isize {
            for px in 0..8isize {
                let z = s.cell(px as usize, py as usize).to_dense();
                for (p, (&(dx, dy), &wt)) in kernel.offsets().iter().zip(kernel.weights()).enumerate() {
                    let (qx, qy) = (px + dx, py + dy);
                    if !(0..8).contains(&qx) || !(0..8).contains(&qy) {
                        continue;
                    }
                    let q = (qy * 8 + qx) as usize;
                    den[q] += wt;
                    for c in 0..2 {
                        let cl = &model.classifiers()[p * 2 + c];
                        let u = cl.bias + z.iter().zip(&cl.weights).map(|(a, &b)| a * b as f64).sum::<f64>();
                        num[q * 2 + c] += wt / (1.0 + (-u).exp());
                    }
                }
            }
        }
        for q in 0..64 {
            for c in 0..2 {
                assert!((out.data()[q * 2 + c] - num[q * 2 + c] / den[q]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn evaluation_touches_only_nonzeros() {
        let kernel = build_adaptive_kernel(5, 1.25, &default_schedule(5)).unwrap();
        let model = random_model(kernel, 1, 40, 1);
        let s = stack(5, 4, 40, 8);
        let counter = AtomicUsize::new(0);
        predict_labeling_counted(&s, &model, &counter).unwrap();
        let bound: usize = s.cells().iter().map(|c| (c.nnz() + 1) * model.classifiers().len()).sum();
        assert_eq!(counter.load(Ordering::Relaxed), bound);
    }

    fn toy_data(seed: u64) -> (Vec<FeatureStack>, Vec<ImageGrid>) {
        let mut stacks = Vec::new();
        let mut truths = Vec::new();
        for g in 0..2 {
            let s = stack(10, 9, 8, seed + g);
            let t = ImageGrid::from_fn(10, 9, 1, |x, y, _| {
                if s.cell(x, y).get(0) > 0.3 { 1.0 } else { 0.0 }
            });
            stacks.push(s);
            truths.push(t);
        }
        (stacks, truths)
    }

    #[test]
    fn exhaustive_and_balanced_sampling() {
        let (stacks, truths) = toy_data(3);
        let all = sample_training_pairs(&stacks, &truths, 3, 180, 1, Balance::None).unwrap();
        assert_eq!(all.len(), 180);
        for (i, c) in all.codes().iter().enumerate() {
            let (g, p) = (i / 90, i % 90);
            assert_eq!(c, &with_constant(stacks[g].cell(p % 10, p / 10)));
            let mut expect = vec![0.0; 9];
            extract_patch_into(&truths[g], p % 10, p / 10, all.geometry(), &mut expect).unwrap();
            assert_eq!(all.patch(i), &expect[..]);
        }
        let bal = sample_training_pairs(&stacks, &truths, 3, 50, 7, Balance::Positive(0.5)).unwrap();
        let centers = (0..bal.len()).filter(|&i| bal.patch(i)[4] > 0.5).count();
        assert_eq!(centers, 25);
        let again = sample_training_pairs(&stacks, &truths, 3, 50, 7, Balance::Positive(0.5)).unwrap();
        assert_eq!(bal, again);

        let zero = vec![ImageGrid::zeros(10, 9, 1); 2];
        assert!(matches!(
            sample_training_pairs(&stacks, &zero, 3, 10, 1, Balance::Positive(0.5)),
            Err(Error::NoPositiveSamples)
        ));
        let small = vec![ImageGrid::zeros(9, 9, 1); 2];
        assert!(sample_training_pairs(&stacks, &small, 3, 10, 1, Balance::None).is_err());
    }

    #[test]
    fn training_is_deterministic_and_serializes() {
        let (stacks, truths) = toy_data(5);
        let data = sample_training_pairs(&stacks, &truths, 5, 120, 2, Balance::Positive(0.5)).unwrap();
        let kernel = build_adaptive_kernel(5, 1.25, &[DensityStep { radius: 1.0, fraction: 0.5 }]).unwrap();
        let cfg = TransferConfig { drop_seed: 9, ..Default::default() };
        let (a, reports) = train_transfer_reported(&data, &kernel, &cfg).unwrap();
        let b = train_transfer(&data, &kernel, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.classifiers().len(), kernel.len());
        assert!(kernel.len() < 25);
        for r in &reports {
            let f = &r.fit;
            assert!(f.grad_norm <= 1e-5 * (1.0 + f.weights.iter().map(|w| w * w).sum::<f64>().sqrt()));
        }
        // dropped features carry no weight
        for c in a.classifiers() {
            let mask = feature_mask(c.drop_seed, 8, 0.5);
            for (w, m) in c.weights.iter().zip(mask) {
                if !m {
                    assert_eq!(*w, 0.0);
                }
            }
        }
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let back = TransferModel::read_from(&buf[..]).unwrap();
        assert_eq!(back, a);
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert!(TransferModel::read_from(&b"SLTX"[..]).is_err());
    }

    #[test]
    fn center_classifier_learns_the_rule() {
        let (stacks, truths) = toy_data(8);
        let data = sample_training_pairs(&stacks, &truths, 1, 180, 2, Balance::None).unwrap();
        let kernel = AveragingKernel::full(1, 1.0).unwrap();
        let cfg = TransferConfig { drop_fraction: 0.0, reg_strength: 1e-3, ..Default::default() };
        let model = train_transfer(&data, &kernel, &cfg).unwrap();
        let out = predict_labeling(&stacks[0], &model).unwrap();
        let correct = out
            .data()
            .iter()
            .zip(truths[0].data())
            .filter(|(p, t)| (**p > 0.5) == (**t > 0.5))
            .count();
        assert!(correct >= 85, "{correct}/90");
    }
}
