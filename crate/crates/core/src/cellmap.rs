//! State-to-cell mapping.
//!
//! Two representations are provided: downscaled frames, whose parameters are
//! re-tuned during a run by a randomized search over a sample of recent
//! frames, and domain features (room, bucketed position, held keys, level).

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use thiserror::Error;

use crate::env::{DomainFeatures, GrayFrame, Observation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CellError {
    #[error("target size {w}x{h} exceeds source frame {src_w}x{src_h}")]
    TargetTooLarge { w: usize, h: usize, src_w: usize, src_h: usize },
    #[error("invalid downscale parameters: {0}")]
    InvalidParams(String),
    #[error("probability {0} is not positive")]
    NonPositiveProbability(f64),
    #[error("distribution is empty")]
    EmptyDistribution,
    #[error("observation carries no frame")]
    MissingFrame,
}

/// Target width, height and pixel depth of the downscaled representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DownscaleParams {
    pub w: usize,
    pub h: usize,
    pub d: u32,
}

impl DownscaleParams {
    pub fn new(w: usize, h: usize, d: u32) -> Self {
        Self { w, h, d }
    }
}

impl fmt::Display for DownscaleParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.w, self.h, self.d)
    }
}

/// Inclusive upper bounds of the parameter search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBounds {
    pub max_w: usize,
    pub max_h: usize,
    pub max_d: u32,
}

impl ParamBounds {
    pub fn for_frame(width: usize, height: usize) -> Self {
        Self { max_w: width, max_h: height, max_d: 255 }
    }

    pub fn contains(&self, p: &DownscaleParams) -> bool {
        (1..=self.max_w).contains(&p.w) && (1..=self.max_h).contains(&p.h) && (1..=self.max_d).contains(&p.d)
    }
}

/// Heuristic minimum means of the geometric proposal distributions.
pub const MIN_MEAN_W: f64 = 8.0;
pub const MIN_MEAN_H: f64 = 10.5;
pub const MIN_MEAN_D: f64 = 12.0;

/// Discrete cell identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CellKey {
    Downscaled(Vec<u8>),
    Domain { room: u32, x: u32, y: u32, keys: Vec<u32>, level: u32 },
    /// Virtual cell recording the best end-of-episode trajectory.
    EpisodeEnd,
}

impl CellKey {
    pub fn domain(room: u32, x: u32, y: u32, mut keys: Vec<u32>, level: u32) -> Self {
        keys.sort_unstable();
        CellKey::Domain { room, x, y, keys, level }
    }

    pub fn is_episode_end(&self) -> bool {
        matches!(self, CellKey::EpisodeEnd)
    }

    /// Compact single-token text form used by archive files.
    pub fn encode(&self) -> String {
        match self {
            CellKey::EpisodeEnd => "E".to_string(),
            CellKey::Downscaled(bytes) => {
                let mut s = String::with_capacity(2 + 2 * bytes.len());
                s.push_str("D:");
                for b in bytes {
                    s.push_str(&format!("{b:02x}"));
                }
                s
            }
            CellKey::Domain { room, x, y, keys, level } => {
                let keys: Vec<String> = keys.iter().map(u32::to_string).collect();
                format!("K:{room},{x},{y},{},{level}", keys.join(";"))
            }
        }
    }

    pub fn decode(text: &str) -> Option<Self> {
        if text == "E" {
            return Some(CellKey::EpisodeEnd);
        }
        if let Some(hex) = text.strip_prefix("D:") {
            if hex.len() % 2 != 0 {
                return None;
            }
            let bytes = (0..hex.len())
                .step_by(2)
                .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).ok())
                .collect::<Option<Vec<_>>>()?;
            return Some(CellKey::Downscaled(bytes));
        }
        let body = text.strip_prefix("K:")?;
        let parts: Vec<&str> = body.split(',').collect();
        if parts.len() != 5 {
            return None;
        }
        let keys = if parts[3].is_empty() {
            Vec::new()
        } else {
            parts[3].split(';').map(|k| k.parse().ok()).collect::<Option<Vec<u32>>>()?
        };
        Some(CellKey::domain(parts[0].parse().ok()?, parts[1].parse().ok()?, parts[2].parse().ok()?, keys, parts[4].parse().ok()?))
    }
}

/// Reduces a grayscale frame to `w x h` by exact area averaging, then maps
/// each pixel p to floor(d * p / 255).
///
/// Block boundaries are rational, so the average is computed as an exact
/// integer ratio and never rounded before the depth reduction.
pub fn downscale(frame: &GrayFrame, params: DownscaleParams) -> Result<CellKey, CellError> {
    Ok(CellKey::Downscaled(downscale_pixels(frame, params)?))
}

pub fn downscale_pixels(frame: &GrayFrame, params: DownscaleParams) -> Result<Vec<u8>, CellError> {
    let (src_w, src_h) = (frame.width, frame.height);
    let DownscaleParams { w, h, d } = params;
    if w == 0 || h == 0 || d == 0 || d > 255 {
        return Err(CellError::InvalidParams(format!("{params} is outside the valid range")));
    }
    if w > src_w || h > src_h {
        return Err(CellError::TargetTooLarge { w, h, src_w, src_h });
    }
    // In units scaled by w (columns) and h (rows), input pixel i spans
    // [i*w, (i+1)*w) and output pixel j spans [j*src_w, (j+1)*src_w).
    let col_spans = overlap_table(src_w, w);
    let row_spans = overlap_table(src_h, h);
    let denom = 255u64 * src_w as u64 * src_h as u64;
    let mut out = Vec::with_capacity(w * h);
    let mut row_sums = vec![0u64; w];
    for rows in &row_spans {
        row_sums.iter_mut().for_each(|s| *s = 0);
        for &(sy, wy) in rows {
            let line = &frame.pixels[sy * src_w..(sy + 1) * src_w];
            for (ox, cols) in col_spans.iter().enumerate() {
                let mut acc = 0u64;
                for &(sx, wx) in cols {
                    acc += wx * line[sx] as u64;
                }
                row_sums[ox] += wy * acc;
            }
        }
        for &s in &row_sums {
            out.push((d as u64 * s / denom) as u8);
        }
    }
    Ok(out)
}

/// For each output index, the (input index, overlap length) pairs it covers.
fn overlap_table(src: usize, dst: usize) -> Vec<Vec<(usize, u64)>> {
    (0..dst)
        .map(|j| {
            let lo = j * src;
            let hi = (j + 1) * src;
            let first = lo / dst;
            let last = (hi - 1) / dst;
            (first..=last)
                .filter_map(|i| {
                    let a = (i * dst).max(lo);
                    let b = ((i + 1) * dst).min(hi);
                    (b > a).then_some((i, (b - a) as u64))
                })
                .collect()
        })
        .collect()
}

/// Occupancy probabilities of the cells a sample falls into.
#[derive(Debug, Clone, PartialEq)]
pub struct CellDistribution {
    p: Vec<f64>,
}

impl CellDistribution {
    pub fn new(p: Vec<f64>) -> Result<Self, CellError> {
        if p.is_empty() {
            return Err(CellError::EmptyDistribution);
        }
        if let Some(&bad) = p.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(CellError::NonPositiveProbability(bad));
        }
        Ok(Self { p })
    }

    pub fn from_counts<I: IntoIterator<Item = usize>>(counts: I) -> Result<Self, CellError> {
        let counts: Vec<usize> = counts.into_iter().collect();
        let total: usize = counts.iter().sum();
        Self::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }
}

/// Entropy of `p` divided by the entropy of the uniform distribution over the
/// same number of cells. A single cell is defined to have entropy 1.
pub fn normalized_entropy(p: &[f64]) -> Result<f64, CellError> {
    if p.is_empty() {
        return Err(CellError::EmptyDistribution);
    }
    if let Some(&bad) = p.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
        return Err(CellError::NonPositiveProbability(bad));
    }
    if p.len() == 1 {
        return Ok(1.0);
    }
    let h: f64 = -p.iter().map(|&x| x * x.ln()).sum::<f64>();
    Ok(h / (p.len() as f64).ln())
}

/// Penalty for deviating from the target cell count.
pub fn size_penalty(n: usize, target: f64) -> f64 {
    ((n as f64 / target - 1.0).abs() + 1.0).sqrt()
}

/// Balance quality of bucketing `sample` under `params`: H_n(p) / L(n, T) with
/// T = target_fraction * |sample|.
pub fn downscale_objective(sample: &FrameSampleSet, params: DownscaleParams, target_fraction: f64) -> Result<f64, CellError> {
    objective_of_frames(sample.frames(), params, target_fraction)
}

pub fn objective_of_frames<'a, I>(frames: I, params: DownscaleParams, target_fraction: f64) -> Result<f64, CellError>
where
    I: IntoIterator<Item = &'a GrayFrame>,
{
    let mut counts: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut total = 0usize;
    for frame in frames {
        *counts.entry(downscale_pixels(frame, params)?).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return Err(CellError::EmptyDistribution);
    }
    // Sorting makes the floating-point summation order independent of hashing.
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable();
    let dist = CellDistribution::from_counts(c)?;
    let target = target_fraction * total as f64;
    Ok(normalized_entropy(dist.probabilities())? / size_penalty(dist.n(), target))
}

/// Geometric variate on {1, 2, ...} with the given mean.
fn geometric_with_mean<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 1.0 {
        return 1;
    }
    let dist = Geometric::new(1.0 / mean).expect("probability within (0, 1]");
    1 + dist.sample(rng)
}

fn propose_one<R: Rng + ?Sized>(current: u64, min_mean: f64, max: u64, rng: &mut R) -> u64 {
    let mean = (current as f64).max(min_mean);
    loop {
        let v = geometric_with_mean(mean, rng);
        if v <= max {
            return v;
        }
    }
}

/// Independently re-samples w, h and d from geometric distributions centred on
/// the current values (floored at the heuristic minimum means), rejecting
/// values outside `bounds`.
pub fn propose_params<R: Rng + ?Sized>(current: DownscaleParams, bounds: ParamBounds, rng: &mut R) -> DownscaleParams {
    DownscaleParams {
        w: propose_one(current.w as u64, MIN_MEAN_W, bounds.max_w as u64, rng) as usize,
        h: propose_one(current.h as u64, MIN_MEAN_H, bounds.max_h as u64, rng) as usize,
        d: propose_one(current.d as u64, MIN_MEAN_D, bounds.max_d as u64, rng) as u32,
    }
}

/// Randomized hill climbing: a proposal replaces the incumbent only if its
/// objective is strictly greater. Returns the best parameters and their
/// objective.
pub fn search_representation<R: Rng + ?Sized>(
    sample: &FrameSampleSet,
    start: DownscaleParams,
    bounds: ParamBounds,
    iterations: usize,
    target_fraction: f64,
    rng: &mut R,
) -> Result<(DownscaleParams, f64), CellError> {
    search_representation_with(sample.frames().collect::<Vec<_>>().as_slice(), start, iterations, target_fraction, |p| {
        propose_params(*p, bounds, rng)
    })
}

/// [`search_representation`] over an explicit frame list and proposal function.
pub fn search_representation_with<F>(
    frames: &[&GrayFrame],
    start: DownscaleParams,
    iterations: usize,
    target_fraction: f64,
    mut propose: F,
) -> Result<(DownscaleParams, f64), CellError>
where
    F: FnMut(&DownscaleParams) -> DownscaleParams,
{
    let mut best = start;
    let mut best_obj = objective_of_frames(frames.iter().copied(), best, target_fraction)?;
    let mut cache: HashMap<DownscaleParams, f64> = HashMap::new();
    cache.insert(best, best_obj);
    for _ in 0..iterations {
        let candidate = propose(&best);
        let obj = match cache.get(&candidate) {
            Some(&o) => o,
            None => {
                let o = objective_of_frames(frames.iter().copied(), candidate, target_fraction)?;
                cache.insert(candidate, o);
                o
            }
        };
        if obj > best_obj {
            best = candidate;
            best_obj = obj;
        }
    }
    Ok((best, best_obj))
}

pub const FRAME_SAMPLE_CAPACITY: usize = 10_000;
pub const FRAME_SAMPLE_PROB: f64 = 0.01;

/// Running set of distinct recent frames; the oldest member is evicted first.
#[derive(Debug, Clone)]
pub struct FrameSampleSet {
    order: VecDeque<GrayFrame>,
    members: HashSet<GrayFrame>,
    capacity: usize,
    accept_prob: f64,
}

impl Default for FrameSampleSet {
    fn default() -> Self {
        Self::new(FRAME_SAMPLE_CAPACITY, FRAME_SAMPLE_PROB)
    }
}

impl FrameSampleSet {
    pub fn new(capacity: usize, accept_prob: f64) -> Self {
        Self { order: VecDeque::new(), members: HashSet::new(), capacity, accept_prob }
    }

    pub fn accept_prob(&self) -> f64 {
        self.accept_prob
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contains(&self, frame: &GrayFrame) -> bool {
        self.members.contains(frame)
    }

    pub fn frames(&self) -> impl Iterator<Item = &GrayFrame> {
        self.order.iter()
    }

    /// Unconditionally inserts a frame (if new), evicting the oldest when full.
    pub fn insert(&mut self, frame: GrayFrame) -> bool {
        if self.members.contains(&frame) {
            return false;
        }
        self.members.insert(frame.clone());
        self.order.push_back(frame);
        if self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.members.remove(&old);
            }
        }
        true
    }

    /// Adds an unseen frame with the configured probability. Returns whether
    /// it was added.
    pub fn maybe_sample<R: Rng + ?Sized>(&mut self, frame: &GrayFrame, rng: &mut R) -> bool {
        if self.members.contains(frame) {
            return false;
        }
        if rng.random::<f64>() >= self.accept_prob {
            return false;
        }
        self.insert(frame.clone())
    }
}

/// Domain-knowledge cell: room, bucketed position, sorted keys and level.
pub fn domain_cell(features: &DomainFeatures, bucket_x: u32, bucket_y: u32) -> CellKey {
    CellKey::domain(features.room, features.x / bucket_x.max(1), features.y / bucket_y.max(1), features.keys.clone(), features.level)
}

/// Which representation an exploration run maps observations with.
#[derive(Debug, Clone, PartialEq)]
pub enum CellMapper {
    Domain { bucket_x: u32, bucket_y: u32 },
    Downscale { params: DownscaleParams },
}

impl CellMapper {
    pub fn domain(bucket_x: u32, bucket_y: u32) -> Self {
        CellMapper::Domain { bucket_x, bucket_y }
    }

    pub fn map(&self, obs: &Observation) -> Result<CellKey, CellError> {
        match self {
            CellMapper::Domain { bucket_x, bucket_y } => Ok(domain_cell(&obs.domain, *bucket_x, *bucket_y)),
            CellMapper::Downscale { params } => downscale(obs.frame.as_ref().ok_or(CellError::MissingFrame)?, *params),
        }
    }

    pub fn params(&self) -> Option<DownscaleParams> {
        match self {
            CellMapper::Downscale { params } => Some(*params),
            CellMapper::Domain { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame4x4() -> GrayFrame {
        GrayFrame::new(4, 4, vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120, 130, 140, 150, 160])
    }

    #[test]
    fn zero_frame_maps_to_zero_key() {
        let f = GrayFrame::filled(12, 9, 0);
        assert_eq!(downscale(&f, DownscaleParams::new(5, 4, 200)).unwrap(), CellKey::Downscaled(vec![0; 20]));
    }

    #[test]
    fn white_frame_maps_to_depth() {
        let f = GrayFrame::filled(10, 10, 255);
        assert_eq!(downscale_pixels(&f, DownscaleParams::new(3, 7, 8)).unwrap(), vec![8; 21]);
    }

    #[test]
    fn block_means_on_4x4() {
        // Block means: (10+20+50+60)/4 = 35, 55, 115, 135.
        // d = 32: floor(32*35/255)=4, floor(32*55/255)=6, floor(32*115/255)=14, floor(32*135/255)=16.
        let out = downscale_pixels(&frame4x4(), DownscaleParams::new(2, 2, 32)).unwrap();
        assert_eq!(out, vec![4, 6, 14, 16]);
        // d = 255 returns the (integer) block means themselves.
        assert_eq!(downscale_pixels(&frame4x4(), DownscaleParams::new(2, 2, 255)).unwrap(), vec![35, 55, 115, 135]);
    }

    #[test]
    fn fractional_blocks_use_exact_area() {
        // 3 input columns into 2 outputs: out0 = (a*2 + b*1)/3, out1 = (b*1 + c*2)/3.
        let f = GrayFrame::new(3, 1, vec![0, 90, 255]);
        // out0 = 30 exactly; out1 = (90 + 510)/3 = 200.
        assert_eq!(downscale_pixels(&f, DownscaleParams::new(2, 1, 255)).unwrap(), vec![30, 200]);
    }

    #[test]
    fn oversized_target_is_error() {
        let err = downscale(&frame4x4(), DownscaleParams::new(5, 2, 8)).unwrap_err();
        assert!(matches!(err, CellError::TargetTooLarge { .. }));
    }

    #[test]
    fn entropy_cases() {
        assert!((normalized_entropy(&[1.0 / 16.0; 16]).unwrap() - 1.0).abs() < 1e-12);
        let expected = 1.5 * 2f64.ln() / 3f64.ln();
        assert!((normalized_entropy(&[0.5, 0.25, 0.25]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.946).abs() < 1e-3);
        let eps = 1e-9;
        let mut p = vec![eps / 9.0; 10];
        p[0] = 1.0 - eps;
        assert!(normalized_entropy(&p).unwrap() < 1e-6);
        assert_eq!(normalized_entropy(&[1.0]).unwrap(), 1.0);
        assert!(normalized_entropy(&[0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn size_penalty_cases() {
        assert_eq!(size_penalty(50, 50.0), 1.0);
        assert!((size_penalty(100, 50.0) - 2f64.sqrt()).abs() < 1e-15);
        assert!((size_penalty(25, 50.0) - 1.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sample_set_dedup_and_capacity() {
        let mut set = FrameSampleSet::new(3, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = |v| GrayFrame::filled(2, 2, v);
        assert!(set.maybe_sample(&f(1), &mut rng));
        assert!(!set.maybe_sample(&f(1), &mut rng));
        set.insert(f(2));
        set.insert(f(3));
        set.insert(f(4));
        assert_eq!(set.len(), 3);
        assert!(!set.contains(&f(1)));
        assert!(set.contains(&f(4)));
    }

    #[test]
    fn sample_set_evicts_oldest_at_default_capacity() {
        let mut set = FrameSampleSet::new(FRAME_SAMPLE_CAPACITY, 1.0);
        for i in 0..=FRAME_SAMPLE_CAPACITY {
            let v = i as u32;
            set.insert(GrayFrame::new(4, 1, v.to_le_bytes().to_vec()));
        }
        assert_eq!(set.len(), FRAME_SAMPLE_CAPACITY);
        assert!(!set.contains(&GrayFrame::new(4, 1, 0u32.to_le_bytes().to_vec())));
    }

    #[test]
    fn domain_cells_bucket_and_normalize() {
        let feat = |x, y, keys: Vec<u32>| DomainFeatures { room: 1, x, y, keys, level: 0 };
        assert_eq!(domain_cell(&feat(4, 5, vec![]), 3, 3), domain_cell(&feat(5, 3, vec![]), 3, 3));
        assert_ne!(domain_cell(&feat(4, 5, vec![1]), 3, 3), domain_cell(&feat(4, 5, vec![]), 3, 3));
        assert_eq!(domain_cell(&feat(4, 5, vec![1, 2]), 1, 1), domain_cell(&feat(4, 5, vec![2, 1]), 1, 1));
    }

    #[test]
    fn forced_identity_proposal_returns_start() {
        let frames: Vec<GrayFrame> = (0..10).map(|v| GrayFrame::filled(8, 8, v * 20)).collect();
        let refs: Vec<&GrayFrame> = frames.iter().collect();
        let start = DownscaleParams::new(2, 2, 4);
        let (best, _) = search_representation_with(&refs, start, 1, 0.1, |p| *p).unwrap();
        assert_eq!(best, start);
    }

    #[test]
    fn key_text_round_trip() {
        for key in [
            CellKey::EpisodeEnd,
            CellKey::Downscaled(vec![0, 7, 255]),
            CellKey::domain(2, 3, 4, vec![5, 1], 1),
            CellKey::domain(0, 0, 0, vec![], 0),
        ] {
            assert_eq!(CellKey::decode(&key.encode()), Some(key));
        }
    }
}
