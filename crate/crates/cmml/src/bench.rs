//! Adaptation cost of feed-forward modulation against gradient steps.

use std::alloc::{GlobalAlloc, Layout, System};
use std::hint::black_box;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use cmml_core::backbone::BackboneConfig;
use cmml_core::data::Example;
use cmml_core::metalearn::{
    baseline_adapt_and_score, cmml_infer, BaselineBundle, BaselineConfig, LossMode, ModelBundle,
};
use cmml_core::rng::rng_stream;
use cmml_core::ParamSet;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static CALLS: AtomicUsize = AtomicUsize::new(0);

/// System allocator that tracks live and peak bytes. Install it with
/// `#[global_allocator]` to get allocation figures in bench results.
pub struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
            CALLS.fetch_add(1, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

pub fn allocator_installed() -> bool {
    drop(black_box(Box::new(0u8)));
    CALLS.load(Ordering::Relaxed) > 0
}

/// Peak bytes allocated on top of the live heap while `f` runs, and its
/// result.
pub fn measure_peak<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let start = CURRENT.load(Ordering::Relaxed);
    PEAK.store(start, Ordering::Relaxed);
    let out = f();
    (out, PEAK.load(Ordering::Relaxed).saturating_sub(start))
}

/// Smallest nonzero step observed between consecutive clock reads.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Support and query size per adaptation.
    pub m_values: Vec<usize>,
    pub k_values: Vec<usize>,
    pub repeats: usize,
    pub warmups: usize,
    /// Id range of the random users and items.
    pub vocab: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            m_values: vec![64, 256],
            k_values: vec![1, 5, 10, 20],
            repeats: 5,
            warmups: 2,
            vocab: 1000,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 5 || self.warmups < 2 {
            return Err(Error::Config(
                "bench needs at least 5 repeats and 2 warmup rounds".into(),
            ));
        }
        if self.m_values.is_empty()
            || self.k_values.is_empty()
            || self.m_values.contains(&0)
            || self.k_values.contains(&0)
        {
            return Err(Error::Config(
                "bench m and k values must be positive".into(),
            ));
        }
        if self.vocab == 0 {
            return Err(Error::Config("bench vocab must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMethod {
    Cmml,
    Baseline,
}

impl BenchMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMethod::Cmml => "cmml",
            BenchMethod::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub method: BenchMethod,
    pub m: usize,
    /// Inner steps; `None` for CMML.
    pub k: Option<usize>,
    pub median_seconds: f64,
    /// Largest transient allocation seen in one adaptation.
    pub alloc_bytes: usize,
    pub repeats: usize,
}

/// Least-squares line through `(k, seconds)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub m: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_line(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if sxx > 0.0 && syy > 0.0 {
        sxy * sxy / (sxx * syy)
    } else {
        0.0
    };
    (slope, my - slope * mx, r2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub results: Vec<BenchResult>,
    /// CMML medians timed alongside each baseline `k`: `(m, k, seconds)`.
    pub cmml_by_k: Vec<(usize, usize, f64)>,
    pub fits: Vec<SlopeFit>,
}

impl BenchReport {
    pub fn median(&self, method: BenchMethod, m: usize, k: Option<usize>) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.method == method && r.m == m && r.k == k)
            .map(|r| r.median_seconds)
    }

    /// Relative spread `(max - min) / min` of the CMML medians over `k`.
    pub fn cmml_spread(&self, m: usize) -> Option<f64> {
        let t: Vec<f64> = self
            .cmml_by_k
            .iter()
            .filter(|c| c.0 == m)
            .map(|c| c.2)
            .collect();
        let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.iter().copied().fold(0.0, f64::max);
        (!t.is_empty()).then(|| (hi - lo) / lo)
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Parameters outside the embedding tables.
pub fn network_params(params: &ParamSet) -> usize {
    params
        .iter()
        .filter(|(_, e)| !e.name.starts_with("embedding."))
        .map(|(_, e)| e.value.len())
        .sum()
}

/// Baseline with the CMML backbone's depth whose width makes its network
/// parameter count closest to the whole CMML bundle's.
pub fn comparable_baseline(bundle: &ModelBundle, seed: u64) -> Result<BaselineBundle> {
    let target = network_params(&bundle.params) as f64;
    let depth = bundle.config.backbone.hidden.len();
    let input = bundle.config.backbone.schema.input_dim();
    let count = |w: usize| (input * w + w + (depth - 1) * (w * w + w) + w + 1) as f64;
    let width = (1..=1 << 14)
        .take_while(|&w| w == 1 || count(w - 1) <= target)
        .min_by(|&a, &b| {
            (count(a) / target)
                .ln()
                .abs()
                .total_cmp(&(count(b) / target).ln().abs())
        })
        .expect("at least one width tried");
    let cfg = BackboneConfig {
        hidden: vec![width; depth],
        ..bundle.config.backbone.clone()
    };
    Ok(BaselineBundle::new(cfg, seed)?)
}

/// Target duration of one timed batch of feed-forward adaptations.
const CMML_SAMPLE: f64 = 0.05;

fn random_examples(
    rng: &mut cmml_core::rng::Rng,
    n: usize,
    vocab: usize,
    users: bool,
) -> Vec<Example> {
    (0..n)
        .map(|_| Example {
            user: if users { rng.random_range(0..vocab) } else { 0 },
            item: rng.random_range(0..vocab),
            label: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        })
        .collect()
}

/// Times `baseline_adapt_and_score` for every `(m, k)` and `cmml_infer` for
/// every `m`, interleaved so both see the same machine state. Errors when
/// the clock is too coarse for the measured times.
pub fn run_inference_bench(
    bundle: &ModelBundle,
    baseline: &BaselineBundle,
    inner: &BaselineConfig,
    cfg: &BenchConfig,
    seed: u64,
) -> Result<BenchReport> {
    cfg.validate()?;
    let (a, b) = (
        network_params(&bundle.params) as f64,
        network_params(&baseline.params) as f64,
    );
    if !(0.8..=1.25).contains(&(a / b)) {
        return Err(Error::Bench(format!(
            "parameter counts not comparable: cmml {a}, baseline {b}"
        )));
    }
    let users = !bundle.config.backbone.schema.user_fields.is_empty();
    let vocab = bundle
        .config
        .backbone
        .schema
        .user_fields
        .iter()
        .chain(&bundle.config.backbone.schema.item_fields)
        .map(|f| f.vocab)
        .chain([cfg.vocab])
        .min()
        .unwrap_or(cfg.vocab);
    let resolution = timer_resolution().as_secs_f64();
    let mut report = BenchReport {
        results: Vec::new(),
        cmml_by_k: Vec::new(),
        fits: Vec::new(),
    };
    for &m in &cfg.m_values {
        let mut rng = rng_stream(seed, 0xbe4c ^ m as u64);
        let support = random_examples(&mut rng, m, vocab, users);
        let query = random_examples(&mut rng, m, vocab, users);
        let nk = cfg.k_values.len();
        let mut base_t = vec![Vec::new(); nk];
        let mut cmml_t = vec![Vec::new(); nk];
        let (mut base_bytes, mut cmml_bytes) = (vec![0usize; nk], 0usize);
        // Feed-forward calls are short, so each sample averages a batch
        // lasting about CMML_SAMPLE seconds.
        let t0 = Instant::now();
        black_box(cmml_infer(bundle, &support, &query)?);
        let batch = (CMML_SAMPLE / t0.elapsed().as_secs_f64().max(1e-9))
            .ceil()
            .clamp(1.0, 1e4) as usize;
        for round in 0..cfg.warmups + cfg.repeats {
            for (slot, &k) in cfg.k_values.iter().enumerate() {
                let inner = BaselineConfig {
                    inner_steps: k,
                    ..*inner
                };
                let t0 = Instant::now();
                let (out, bytes) = measure_peak(|| {
                    baseline_adapt_and_score(baseline, &support, &query, &inner, LossMode::Mse)
                });
                let dt = t0.elapsed().as_secs_f64();
                black_box(out?);
                let (out, cbytes) = measure_peak(|| cmml_infer(bundle, &support, &query));
                black_box(out?);
                let t1 = Instant::now();
                for _ in 0..batch {
                    black_box(cmml_infer(bundle, &support, &query)?);
                }
                let ct = t1.elapsed().as_secs_f64() / batch as f64;
                if round >= cfg.warmups {
                    base_t[slot].push(dt);
                    cmml_t[slot].push(ct);
                    base_bytes[slot] = base_bytes[slot].max(bytes);
                    cmml_bytes = cmml_bytes.max(cbytes);
                }
            }
        }
        let mut all_cmml: Vec<f64> = cmml_t.iter().flatten().copied().collect();
        let cmml_median = median(&mut all_cmml);
        report.results.push(BenchResult {
            method: BenchMethod::Cmml,
            m,
            k: None,
            median_seconds: cmml_median,
            alloc_bytes: cmml_bytes,
            repeats: all_cmml.len(),
        });
        let mut points = Vec::with_capacity(nk);
        for (slot, &k) in cfg.k_values.iter().enumerate() {
            let t = median(&mut base_t[slot]);
            points.push((k as f64, t));
            report.cmml_by_k.push((m, k, median(&mut cmml_t[slot])));
            report.results.push(BenchResult {
                method: BenchMethod::Baseline,
                m,
                k: Some(k),
                median_seconds: t,
                alloc_bytes: base_bytes[slot],
                repeats: cfg.repeats,
            });
        }
        let (slope, intercept, r_squared) = fit_line(&points);
        report.fits.push(SlopeFit {
            m,
            slope,
            intercept,
            r_squared,
        });
    }
    if let Some(r) = report
        .results
        .iter()
        .find(|r| resolution > 0.05 * r.median_seconds)
    {
        return Err(Error::Bench(format!(
            "timer resolution {resolution:.3e} s exceeds 5% of the {} median {:.3e} s at m = {}; use a larger m",
            r.method.as_str(),
            r.median_seconds,
            r.m
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_recovers_exact_lines() {
        let (s, c, r2) = fit_line(&[(1.0, 3.0), (5.0, 11.0), (10.0, 21.0), (20.0, 41.0)]);
        assert!((s - 2.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        assert_eq!(fit_line(&[(1.0, 2.0), (2.0, 2.0)]).2, 0.0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn too_few_repeats_rejected() {
        let cfg = BenchConfig {
            repeats: 4,
            ..BenchConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn clock_is_finer_than_a_millisecond() {
        assert!(timer_resolution() < Duration::from_millis(1));
    }
}
