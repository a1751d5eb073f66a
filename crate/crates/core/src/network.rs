//! Multipath, multiscale sparse feature extraction.
//!
//! Every scale of the input is encoded by a set of first-layer dictionaries.
//! Selected first-layer maps are rectified, pooled and subsampled, then coded
//! again by second-layer dictionaries. Chosen maps from both layers are
//! rectified, upsampled to the input grid and concatenated into one sparse
//! nonnegative vector per pixel.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dict::Dictionary;
use crate::encode::{encode_image_cached, GramCache};
use crate::error::{invalid, Error, Result};
use crate::grid::{
    extract_patch_into, nearest_source, rescale, scaled_len, zero_mean_in_place, ImageGrid,
    PatchGeometry, PatchMatrix, PatchOrigin,
};
use crate::ksvd::{mi_ksvd_train, MiKsvdConfig};
use crate::linalg::norm_sq;
use crate::seed::{derive_seed, rng};
use crate::sparse::{SparseCodeMap, SparseVector};

/// Pooling window and subsampling stride, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        let p = Self { window, stride };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.window < self.stride {
            return Err(invalid(format!(
                "pooling needs window >= stride >= 1, got window {} stride {}",
                self.window, self.stride
            )));
        }
        Ok(())
    }

    /// Output length along an axis of `len` input pixels.
    pub fn output_len(&self, len: usize) -> usize {
        len.div_ceil(self.stride)
    }

    /// First input coordinate covered by output cell `o` (may be negative).
    /// Windows are centered on the cell they subsample.
    pub fn window_start(&self, o: usize) -> isize {
        let offset = (self.stride as isize - self.window as isize).div_euclid(2);
        (self.stride * o) as isize + offset
    }
}

/// A first-layer path: one dictionary applied to raw image patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer1Path {
    pub name: String,
    pub side: usize,
    pub atoms: usize,
    pub sparsity: usize,
    #[serde(default = "default_true")]
    pub zero_mean: bool,
    #[serde(default)]
    pub feeds_layer2: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolSpec>,
    /// Dictionary file, relative to the spec document.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<String>,
}

/// A second-layer path coding the pooled, rectified map of a first-layer path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer2Path {
    pub name: String,
    pub source: String,
    pub side: usize,
    pub atoms: usize,
    pub sparsity: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<String>,
}

fn default_true() -> bool {
    true
}

/// Declarative description of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Resize factors, each in (0, 1].
    pub scales: Vec<f64>,
    /// Channels of the input image.
    pub channels: usize,
    pub layer1: Vec<Layer1Path>,
    #[serde(default)]
    pub layer2: Vec<Layer2Path>,
    /// Names of the paths whose rectified maps form the output.
    pub concat: Vec<String>,
}

/// Geometry, atom count and sparsity of one path's dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathShape {
    pub geometry: PatchGeometry,
    pub atoms: usize,
    pub sparsity: usize,
    pub zero_mean: bool,
}

/// Index range of one (scale, path) block in the output feature vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureBlock {
    pub scale: usize,
    pub path: String,
    pub offset: usize,
    pub len: usize,
}

const MULTISCALE_SPEC: &str = include_str!("../assets/multiscale.json");
const COMPACT_SPEC: &str = include_str!("../assets/compact.json");

impl NetworkSpec {
    /// The bundled six-scale, eight-dictionary architecture.
    pub fn multiscale() -> Self {
        serde_json::from_str(MULTISCALE_SPEC).expect("bundled spec parses")
    }

    /// A single-scale grayscale network: 5x5 and 11x11 first-layer paths
    /// with 64 atoms each, both feeding a 128-atom second layer. Small
    /// enough to train in minutes.
    pub fn compact() -> Self {
        serde_json::from_str(COMPACT_SPEC).expect("bundled spec parses")
    }

    /// The same network with every second-layer path removed.
    pub fn without_layer2(&self) -> Self {
        let mut spec = self.clone();
        let dropped: Vec<String> = spec.layer2.drain(..).map(|p| p.name).collect();
        spec.concat.retain(|n| !dropped.contains(n));
        for p in &mut spec.layer1 {
            p.feeds_layer2 = false;
        }
        spec
    }

    /// Scale factors `2^(-k/2)` for `k = 0..count`.
    pub fn geometric_scales(count: usize) -> Vec<f64> {
        (0..count).map(|k| 2f64.powf(-(k as f64) / 2.0)).collect()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn layer1_path(&self, name: &str) -> Option<&Layer1Path> {
        self.layer1.iter().find(|p| p.name == name)
    }

    fn layer2_path(&self, name: &str) -> Option<&Layer2Path> {
        self.layer2.iter().find(|p| p.name == name)
    }

    /// Names of every path, first layer first.
    pub fn path_names(&self) -> impl Iterator<Item = &str> {
        self.layer1
            .iter()
            .map(|p| p.name.as_str())
            .chain(self.layer2.iter().map(|p| p.name.as_str()))
    }

    /// Dictionary shape of the named path.
    pub fn path_shape(&self, name: &str) -> Result<PathShape> {
        if let Some(p) = self.layer1_path(name) {
            return Ok(PathShape {
                geometry: PatchGeometry::new(p.side, self.channels)?,
                atoms: p.atoms,
                sparsity: p.sparsity,
                zero_mean: p.zero_mean,
            });
        }
        if let Some(p) = self.layer2_path(name) {
            let src = self
                .layer1_path(&p.source)
                .ok_or_else(|| invalid(format!("unknown layer-2 source `{}`", p.source)))?;
            return Ok(PathShape {
                geometry: PatchGeometry::new(p.side, 2 * src.atoms)?,
                atoms: p.atoms,
                sparsity: p.sparsity,
                zero_mean: false,
            });
        }
        Err(invalid(format!("unknown path `{name}`")))
    }

    /// Dictionary file reference of the named path, if any.
    pub fn dictionary_ref(&self, name: &str) -> Option<&str> {
        self.layer1_path(name)
            .and_then(|p| p.dictionary.as_deref())
            .or_else(|| self.layer2_path(name).and_then(|p| p.dictionary.as_deref()))
    }

    /// Checks the wiring and returns the output feature dimensionality.
    pub fn validate(&self) -> Result<usize> {
        if self.scales.is_empty() {
            return Err(invalid("network needs at least one scale"));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
            return Err(invalid(format!("scale factors must lie in (0, 1], got {s}")));
        }
        if self.channels == 0 {
            return Err(invalid("input channel count must be >= 1"));
        }
        let mut names = HashSet::new();
        for name in self.path_names() {
            if !names.insert(name) {
                return Err(invalid(format!("duplicate path name `{name}`")));
            }
        }
        for name in self.path_names() {
            let shape = self.path_shape(name)?;
            if shape.sparsity == 0 || shape.sparsity > shape.atoms {
                return Err(invalid(format!(
                    "path `{name}` needs 1 <= sparsity <= atoms"
                )));
            }
        }
        for p in &self.layer2 {
            let src = self.layer1_path(&p.source).ok_or_else(|| {
                invalid(format!("layer-2 path `{}` has unknown source `{}`", p.name, p.source))
            })?;
            match src.pool {
                Some(pool) => pool.validate()?,
                None => {
                    return Err(invalid(format!(
                        "layer-2 source `{}` has no pooling spec",
                        src.name
                    )))
                }
            }
        }
        for p in &self.layer1 {
            let fed = self.layer2.iter().any(|q| q.source == p.name);
            if fed != p.feeds_layer2 {
                return Err(invalid(format!(
                    "path `{}` has feeds_layer2 = {} but is {}referenced by a layer-2 path",
                    p.name,
                    p.feeds_layer2,
                    if fed { "" } else { "not " }
                )));
            }
        }
        if self.concat.is_empty() {
            return Err(invalid("concat list is empty"));
        }
        let mut seen = HashSet::new();
        let mut per_scale = 0;
        for name in &self.concat {
            if !seen.insert(name) {
                return Err(invalid(format!("path `{name}` concatenated twice")));
            }
            per_scale += 2 * self.path_shape(name)?.atoms;
        }
        Ok(per_scale * self.scales.len())
    }

    /// Output blocks in feature order: scale-major, then concat order.
    pub fn feature_blocks(&self) -> Result<Vec<FeatureBlock>> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for scale in 0..self.scales.len() {
            for name in &self.concat {
                let len = 2 * self.path_shape(name)?.atoms;
                blocks.push(FeatureBlock {
                    scale,
                    path: name.clone(),
                    offset,
                    len,
                });
                offset += len;
            }
        }
        Ok(blocks)
    }

    /// Largest first-layer patch side; smaller rescaled images are skipped.
    pub fn min_side(&self) -> usize {
        self.layer1.iter().map(|p| p.side).max().unwrap_or(1)
    }
}

/// Splits each coefficient into positive and negative parts:
/// `v` at `i` becomes `max(v,0)` at `i` and `max(-v,0)` at `L+i`.
pub fn rectify(codes: &SparseCodeMap) -> SparseCodeMap {
    let l = codes.dim();
    let cells = codes.cells().iter().map(|c| rectify_vector(c)).collect();
    SparseCodeMap::new(codes.width(), codes.height(), 2 * l, cells).expect("shape preserved")
}

pub fn rectify_vector(v: &SparseVector) -> SparseVector {
    let l = v.dim();
    let mut out = SparseVector::empty(2 * l);
    for (i, x) in v.iter().filter(|(_, x)| *x > 0.0) {
        out.push_sorted(i, x);
    }
    for (i, x) in v.iter().filter(|(_, x)| *x < 0.0) {
        out.push_sorted(l + i, -x);
    }
    out
}

/// Hybrid average-max pooling: each output channel is the mean of the
/// strictly positive entries of that channel inside the window (0 when
/// there are none). Window positions outside the grid are ignored.
pub fn pool_hybrid_avg_max(codes: &SparseCodeMap, pool: PoolSpec) -> Result<SparseCodeMap> {
    pool.validate()?;
    if codes.cells().iter().any(|c| c.values().iter().any(|&v| v < 0.0)) {
        return Err(invalid("pooling expects rectified (nonnegative) input"));
    }
    let (w, h, dim) = (codes.width(), codes.height(), codes.dim());
    let (ow, oh) = (pool.output_len(w), pool.output_len(h));
    let range = |o: usize, len: usize| {
        let s = pool.window_start(o);
        let lo = s.max(0) as usize;
        let hi = ((s + pool.window as isize).min(len as isize)).max(0) as usize;
        lo..hi
    };
    let rows: Vec<Vec<SparseVector>> = (0..oh)
        .into_par_iter()
        .map(|oy| {
            let mut sum = vec![0.0; dim];
            let mut count = vec![0u32; dim];
            let mut touched: Vec<usize> = Vec::new();
            (0..ow)
                .map(|ox| {
                    for y in range(oy, h) {
                        for x in range(ox, w) {
                            for (i, v) in codes.cell(x, y).iter() {
                                if count[i] == 0 {
                                    touched.push(i);
                                }
                                sum[i] += v;
                                count[i] += 1;
                            }
                        }
                    }
                    touched.sort_unstable();
                    let mut out = SparseVector::empty(dim);
                    for &i in &touched {
                        out.push_sorted(i, sum[i] / count[i] as f64);
                        sum[i] = 0.0;
                        count[i] = 0;
                    }
                    touched.clear();
                    out
                })
                .collect()
        })
        .collect();
    SparseCodeMap::new(ow, oh, dim, rows.concat())
}

/// Per-pixel sparse nonnegative features on the input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    map: SparseCodeMap,
}

impl FeatureStack {
    pub fn new(map: SparseCodeMap) -> Result<Self> {
        if map.cells().iter().any(|c| c.values().iter().any(|&v| v < 0.0)) {
            return Err(invalid("feature stacks hold nonnegative values only"));
        }
        Ok(Self { map })
    }

    pub fn width(&self) -> usize {
        self.map.width()
    }

    pub fn height(&self) -> usize {
        self.map.height()
    }

    pub fn dim(&self) -> usize {
        self.map.dim()
    }

    pub fn cell(&self, x: usize, y: usize) -> &SparseVector {
        self.map.cell(x, y)
    }

    pub fn cells(&self) -> &[SparseVector] {
        self.map.cells()
    }

    pub fn map(&self) -> &SparseCodeMap {
        &self.map
    }

    pub fn max_nnz(&self) -> usize {
        self.map.cells().iter().map(SparseVector::nnz).max().unwrap_or(0)
    }
}

/// A spec together with its trained dictionaries and Gram caches.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    dim: usize,
    dicts: BTreeMap<String, (Dictionary, GramCache)>,
}

impl Network {
    /// Checks that every path has a dictionary of the declared shape.
    pub fn new(spec: NetworkSpec, dicts: BTreeMap<String, Dictionary>) -> Result<Self> {
        Self::build(spec, dicts, |d| Ok(GramCache::new(d)))
    }

    /// Like [`Network::new`], reusing Gram matrices stored under `dir`
    /// (and storing the missing ones there).
    pub fn with_gram_dir(
        spec: NetworkSpec,
        dicts: BTreeMap<String, Dictionary>,
        dir: impl AsRef<Path>,
    ) -> Result<Self> {
        Self::build(spec, dicts, |d| GramCache::load_or_build(d, dir.as_ref()))
    }

    fn build(
        spec: NetworkSpec,
        dicts: BTreeMap<String, Dictionary>,
        gram: impl Fn(&Dictionary) -> Result<GramCache>,
    ) -> Result<Self> {
        let dim = spec.validate()?;
        let mut out = BTreeMap::new();
        for name in spec.path_names() {
            let d = dicts
                .get(name)
                .ok_or_else(|| Error::MissingDictionary(name.to_string()))?;
            let shape = spec.path_shape(name)?;
            if d.geometry() != shape.geometry
                || d.atom_count() != shape.atoms
                || d.sparsity() != shape.sparsity
                || d.zero_mean_input() != shape.zero_mean
            {
                return Err(invalid(format!(
                    "dictionary for `{name}` does not match the spec (geometry {:?}, {} atoms, K={}, zero_mean={})",
                    d.geometry(),
                    d.atom_count(),
                    d.sparsity(),
                    d.zero_mean_input()
                )));
            }
            out.insert(name.to_string(), (d.clone(), gram(d)?));
        }
        Ok(Self {
            spec,
            dim,
            dicts: out,
        })
    }

    /// Loads every dictionary named by the spec's file references,
    /// resolved against `base`.
    pub fn load(spec: NetworkSpec, base: impl AsRef<Path>) -> Result<Self> {
        let mut dicts = BTreeMap::new();
        for name in spec.path_names() {
            let file = spec
                .dictionary_ref(name)
                .ok_or_else(|| Error::MissingDictionary(name.to_string()))?;
            let path: PathBuf = base.as_ref().join(file);
            dicts.insert(name.to_string(), Dictionary::load(path)?);
        }
        Self::new(spec, dicts)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dictionary(&self, name: &str) -> Option<&Dictionary> {
        self.dicts.get(name).map(|(d, _)| d)
    }

    pub fn dictionaries(&self) -> impl Iterator<Item = (&str, &Dictionary)> {
        self.dicts.iter().map(|(k, (d, _))| (k.as_str(), d))
    }

    fn entry(&self, name: &str) -> (&Dictionary, &GramCache) {
        let (d, c) = &self.dicts[name];
        (d, c)
    }

    /// Rectified code maps of every path at one scale, keyed by path name.
    /// Returns `None` when the rescaled image is smaller than the largest
    /// first-layer patch.
    pub fn scale_maps(&self, img: &ImageGrid, factor: f64) -> Result<Option<BTreeMap<String, SparseCodeMap>>> {
        let min = self.spec.min_side();
        if scaled_len(img.width(), factor) < min || scaled_len(img.height(), factor) < min {
            return Ok(None);
        }
        let scaled = rescale(img, factor)?;
        let layer1: Vec<(String, SparseCodeMap)> = self
            .spec
            .layer1
            .par_iter()
            .map(|p| {
                let (d, c) = self.entry(&p.name);
                Ok((p.name.clone(), rectify(&encode_image_cached(&scaled, d, c)?)))
            })
            .collect::<Result<_>>()?;
        let mut maps: BTreeMap<String, SparseCodeMap> = layer1.into_iter().collect();
        let layer2: Vec<(String, SparseCodeMap)> = self
            .spec
            .layer2
            .par_iter()
            .map(|p| {
                let pooled = self.pooled_source(&maps[&p.source], &p.source)?;
                let (d, c) = self.entry(&p.name);
                Ok((p.name.clone(), rectify(&encode_image_cached(&pooled, d, c)?)))
            })
            .collect::<Result<_>>()?;
        maps.extend(layer2);
        Ok(Some(maps))
    }

    fn pooled_source(&self, rectified: &SparseCodeMap, source: &str) -> Result<ImageGrid> {
        let pool = self
            .spec
            .layer1_path(source)
            .and_then(|p| p.pool)
            .ok_or_else(|| invalid(format!("layer-2 source `{source}` has no pooling spec")))?;
        Ok(pool_hybrid_avg_max(rectified, pool)?.to_dense_grid())
    }

    /// Computes the concatenated per-pixel features of `img`.
    pub fn forward(&self, img: &ImageGrid) -> Result<FeatureStack> {
        if img.channels() != self.spec.channels {
            return Err(Error::ChannelMismatch {
                expected: self.spec.channels,
                got: img.channels(),
            });
        }
        let (w, h) = (img.width(), img.height());
        let per_scale: Vec<Option<BTreeMap<String, SparseCodeMap>>> = self
            .spec
            .scales
            .par_iter()
            .map(|&f| self.scale_maps(img, f))
            .collect::<Result<_>>()?;

        let blocks = self.spec.feature_blocks()?;
        let sources: Vec<(usize, &SparseCodeMap)> = blocks
            .iter()
            .filter_map(|b| {
                per_scale[b.scale]
                    .as_ref()
                    .map(|m| (b.offset, &m[&b.path]))
            })
            .collect();
        let dim = self.dim;
        let rows: Vec<Vec<SparseVector>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let mut v = SparseVector::empty(dim);
                        for &(offset, map) in &sources {
                            let sx = nearest_source(x, map.width(), w);
                            let sy = nearest_source(y, map.height(), h);
                            for (i, val) in map.cell(sx, sy).iter() {
                                v.push_sorted(offset + i, val);
                            }
                        }
                        v
                    })
                    .collect()
            })
            .collect();
        FeatureStack::new(SparseCodeMap::new(w, h, dim, rows.concat())?)
    }
}

/// Convenience wrapper for [`Network::forward`].
pub fn forward(
    img: &ImageGrid,
    spec: &NetworkSpec,
    dicts: &BTreeMap<String, Dictionary>,
) -> Result<FeatureStack> {
    Network::new(spec.clone(), dicts.clone())?.forward(img)
}

/// Patch sampling budget for network training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Training patches drawn per dictionary.
    pub patches_per_dictionary: usize,
    /// Draws whose patch is (numerically) zero are retried up to this many
    /// times before being kept anyway.
    pub max_retries: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            patches_per_dictionary: 100_000,
            max_retries: 8,
        }
    }
}

/// Draws `count` patches for `geom` from uniformly random (grid, pixel)
/// locations. Zero-meaned when `zero_mean` is set.
pub fn sample_patches(
    grids: &[ImageGrid],
    geom: PatchGeometry,
    zero_mean: bool,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<PatchMatrix> {
    if grids.is_empty() {
        return Err(invalid("no grids to sample patches from"));
    }
    let mut rng = rng(seed);
    let mut out = PatchMatrix::new(geom);
    let mut patch = vec![0.0; geom.len()];
    for _ in 0..sampling.patches_per_dictionary {
        for attempt in 0..=sampling.max_retries {
            let g = rng.gen_range(0..grids.len());
            let grid = &grids[g];
            let x = rng.gen_range(0..grid.width());
            let y = rng.gen_range(0..grid.height());
            extract_patch_into(grid, x, y, geom, &mut patch)?;
            if zero_mean {
                zero_mean_in_place(&mut patch, geom.channels());
            }
            if norm_sq(&patch) > 1e-12 || attempt == sampling.max_retries {
                out.push_with_origin(&patch, PatchOrigin { image: g, x, y })?;
                break;
            }
        }
    }
    Ok(out)
}

/// Every rescaled corpus image that passes the minimum-size guard.
pub fn scaled_corpus(corpus: &[ImageGrid], spec: &NetworkSpec) -> Result<Vec<ImageGrid>> {
    let min = spec.min_side();
    let mut out = Vec::new();
    for img in corpus {
        for &f in &spec.scales {
            if scaled_len(img.width(), f) >= min && scaled_len(img.height(), f) >= min {
                out.push(rescale(img, f)?);
            }
        }
    }
    Ok(out)
}

/// Training configuration of the dictionary with the given path name:
/// the shared config with a path-specific seed.
pub fn path_config(cfg: &MiKsvdConfig, name: &str) -> MiKsvdConfig {
    MiKsvdConfig {
        seed: derive_seed(cfg.seed, &format!("dictionary/{name}")),
        ..cfg.clone()
    }
}

/// Seed for the patch sample of the given path.
pub fn sampling_seed(root: u64, name: &str) -> u64 {
    derive_seed(root, &format!("patches/{name}"))
}

/// Trains every dictionary of `spec`: first-layer paths on patches drawn
/// across all scales of the corpus, then second-layer paths on patches of
/// the pooled rectified maps produced by their trained sources.
pub fn train_network_dictionaries(
    corpus: &[ImageGrid],
    spec: &NetworkSpec,
    cfg: &MiKsvdConfig,
    sampling: &SamplingConfig,
) -> Result<BTreeMap<String, Dictionary>> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(invalid("empty training corpus"));
    }
    if let Some(img) = corpus.iter().find(|i| i.channels() != spec.channels) {
        return Err(Error::ChannelMismatch {
            expected: spec.channels,
            got: img.channels(),
        });
    }
    let scaled = scaled_corpus(corpus, spec)?;
    if scaled.is_empty() {
        return Err(invalid("every corpus image is smaller than the largest patch"));
    }

    let mut dicts = BTreeMap::new();
    for p in &spec.layer1 {
        let shape = spec.path_shape(&p.name)?;
        let x = sample_patches(
            &scaled,
            shape.geometry,
            shape.zero_mean,
            sampling,
            sampling_seed(cfg.seed, &p.name),
        )?;
        let (mut d, _) = mi_ksvd_train(&x, &path_config(cfg, &p.name), shape.atoms, shape.sparsity)?;
        d.set_zero_mean_input(shape.zero_mean);
        log::info!("trained layer-1 dictionary `{}` on {} patches", p.name, x.count());
        dicts.insert(p.name.clone(), d);
    }

    for p in &spec.layer2 {
        let src = spec.layer1_path(&p.source).expect("validated");
        let pool = src.pool.expect("validated");
        let d1 = &dicts[&p.source];
        let cache = GramCache::new(d1);
        let pooled: Vec<ImageGrid> = scaled
            .par_iter()
            .map(|img| {
                let codes = rectify(&encode_image_cached(img, d1, &cache)?);
                Ok(pool_hybrid_avg_max(&codes, pool)?.to_dense_grid())
            })
            .collect::<Result<_>>()?;
        let shape = spec.path_shape(&p.name)?;
        let x = sample_patches(
            &pooled,
            shape.geometry,
            false,
            sampling,
            sampling_seed(cfg.seed, &p.name),
        )?;
        let (d, _) = mi_ksvd_train(&x, &path_config(cfg, &p.name), shape.atoms, shape.sparsity)?;
        log::info!("trained layer-2 dictionary `{}` on {} patches", p.name, x.count());
        dicts.insert(p.name.clone(), d);
    }
    Ok(dicts)
}
