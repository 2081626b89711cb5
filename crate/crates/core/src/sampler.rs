//! Balanced frame-pair sampling over ten variation bins with an adaptive interval.
//!
//! Each attempt draws a video uniformly (so short videos are revisited as often
//! as long ones) and a pair at the current interval. Pairs whose bin is full,
//! and exact repeats, are rejected. After every attempt the interval takes one
//! step toward the regime that should feed the emptiest bins: an exponentially
//! weighted estimate of the bin each interval tends to produce is compared with
//! the deficit-weighted mean of the bins still open.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{scenery_change_with_motion, SceneryLabel};
use crate::seeds;
use crate::synthgen::SyntheticVideo;

pub const NUM_BINS: usize = 10;

/// Bin `b` holds `[0.1 b, 0.1 (b + 1))`; the last bin is closed at 1.
pub fn bin_of(max_mfi: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&max_mfi) {
        return Err(Error::Domain(format!("max_mfi {max_mfi} outside [0, 1]")));
    }
    // exact decimal boundaries: 0.3 must land in bin 3 although 0.3 * 10 < 3 in binary
    let b = (0..NUM_BINS).rev().find(|&b| max_mfi >= b as f64 / 10.0).unwrap_or(0);
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramePairSample {
    pub video_id: String,
    pub frame_i: usize,
    pub frame_j: usize,
    pub interval: usize,
    pub max_mfi: f64,
    pub label: SceneryLabel,
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinLedger {
    pub counts: [usize; NUM_BINS],
    pub capacity: usize,
    /// Set for bins the attempt budget ran out on before they filled.
    pub exhausted: [bool; NUM_BINS],
    pub attempts: usize,
}

impl BinLedger {
    fn new(capacity: usize) -> Self {
        Self {
            counts: [0; NUM_BINS],
            capacity,
            exhausted: [false; NUM_BINS],
            attempts: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn is_full(&self) -> bool {
        self.counts.iter().all(|&c| c >= self.capacity)
    }

    /// Histogram of sample bins, for consistency checks.
    pub fn histogram(samples: &[FramePairSample]) -> [usize; NUM_BINS] {
        let mut h = [0; NUM_BINS];
        for s in samples {
            h[s.bin] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub bin_capacity: usize,
    pub initial_interval: usize,
    pub interval_bounds: [usize; 2],
    pub interval_step: usize,
    pub seed: u64,
    pub tau_var: f64,
    /// Attempts allowed per unit of total capacity.
    pub budget_factor: usize,
    /// Smoothing of the per-interval bin estimate.
    pub ewma_alpha: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            bin_capacity: 50,
            initial_interval: 4,
            interval_bounds: [1, 16],
            interval_step: 1,
            seed: 0,
            tau_var: 0.4,
            budget_factor: 200,
            ewma_alpha: 0.1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.interval_bounds;
        if !(1 <= lo && lo <= self.initial_interval && self.initial_interval <= hi) {
            return Err(Error::Config(format!(
                "interval bounds must satisfy 1 <= min <= initial <= max, got [{lo}, {hi}] with initial {}",
                self.initial_interval
            )));
        }
        if self.interval_step == 0 || self.bin_capacity == 0 || self.budget_factor == 0 {
            return Err(Error::Config("interval_step, bin_capacity and budget_factor must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau_var) {
            return Err(Error::Config(format!("tau_var {} outside [0, 1]", self.tau_var)));
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return Err(Error::Config("ewma_alpha must be in (0, 1]".into()));
        }
        Ok(())
    }
}

pub fn sample_balanced_pairs(
    videos: &[SyntheticVideo],
    config: &SamplerConfig,
) -> Result<(Vec<FramePairSample>, BinLedger)> {
    config.validate()?;
    let usable: Vec<&SyntheticVideo> = videos.iter().filter(|v| v.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Config("sampling needs at least one video with two or more frames".into()));
    }
    let [lo, hi] = config.interval_bounds;
    let budget = config.budget_factor * config.bin_capacity * NUM_BINS;
    let mut rng = seeds::rng(seeds::derive_named(config.seed, "sampler"));
    let mut ledger = BinLedger::new(config.bin_capacity);
    let mut samples = Vec::new();
    let mut seen: HashSet<(usize, usize, usize)> = HashSet::new();
    // expected bin per interval, None until observed
    let mut estimate: Vec<Option<f64>> = vec![None; hi + 1];
    let mut interval = config.initial_interval;

    while ledger.attempts < budget && !ledger.is_full() {
        ledger.attempts += 1;
        let vi = rng.gen_range(0..usable.len());
        let video = usable[vi];
        let step = interval.min(video.len() - 1);
        let i = rng.gen_range(0..video.len() - step);
        let j = i + step;

        let (max_mfi, label) = scenery_change_with_motion(
            &video.frames[i].annotations,
            &video.frames[j].annotations,
            config.tau_var,
        )?;
        let bin = bin_of(max_mfi)?;
        let e = &mut estimate[step];
        *e = Some(match *e {
            Some(old) => old + config.ewma_alpha * (bin as f64 - old),
            None => bin as f64,
        });

        if ledger.counts[bin] < config.bin_capacity && seen.insert((vi, i, j)) {
            ledger.counts[bin] += 1;
            samples.push(FramePairSample {
                video_id: video.video_id.clone(),
                frame_i: i,
                frame_j: j,
                interval: step,
                max_mfi,
                label,
                bin,
            });
        }

        let mut weight = 0.0;
        let mut weighted = 0.0;
        for (b, &c) in ledger.counts.iter().enumerate() {
            let deficit = config.bin_capacity.saturating_sub(c) as f64;
            weight += deficit;
            weighted += deficit * b as f64;
        }
        if weight == 0.0 {
            break;
        }
        let target = weighted / weight;
        let current = estimate[interval].unwrap_or(target);
        if current < target - 0.5 {
            interval = (interval + config.interval_step).min(hi);
        } else if current > target + 0.5 {
            interval = interval.saturating_sub(config.interval_step).max(lo);
        } else if estimate[interval].is_some() {
            // near the target: jitter to keep neighbouring intervals explored
            interval = if rng.gen_bool(0.5) {
                (interval + config.interval_step).min(hi)
            } else {
                interval.saturating_sub(config.interval_step).max(lo)
            };
        }
    }
    for b in 0..NUM_BINS {
        ledger.exhausted[b] = ledger.counts[b] < config.bin_capacity;
    }
    Ok((samples, ledger))
}

/// Label-stratified split into `(train, test)`. Within each label the samples
/// are shuffled and the train share is allocated by largest remainder so the
/// total train size is `round(n * fractions.0)`. Both parts keep input order.
pub fn split_dataset(
    samples: &[FramePairSample],
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Vec<FramePairSample>, Vec<FramePairSample>)> {
    let (ft, fs) = fractions;
    if !(0.0..=1.0).contains(&ft) || !(0.0..=1.0).contains(&fs) || (ft + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions ({ft}, {fs}) must lie in [0, 1] and sum to 1"
        )));
    }
    let mut rng = seeds::rng(seeds::derive_named(seed, "split"));
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); 2];
    for (k, s) in samples.iter().enumerate() {
        groups[s.label.index()].push(k);
    }
    let total_train = (samples.len() as f64 * ft).round() as usize;
    let quotas: Vec<f64> = groups.iter().map(|g| g.len() as f64 * ft).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut remaining = total_train.saturating_sub(alloc.iter().sum());
    for &g in &order {
        if remaining == 0 {
            break;
        }
        if alloc[g] < groups[g].len() {
            alloc[g] += 1;
            remaining -= 1;
        }
    }
    let mut in_train = vec![false; samples.len()];
    for (g, idx) in groups.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        for &k in idx.iter().take(alloc[g]) {
            in_train[k] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, s) in samples.iter().enumerate() {
        if in_train[k] {
            train.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    Ok((train, test))
}

/// One JSON object per line.
pub fn write_pairs(path: &Path, samples: &[FramePairSample]) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<FramePairSample>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: FramePairSample = serde_json::from_str(&line)
            .map_err(|e| Error::schema(path, format!("line {}: {e}", n + 1)))?;
        if s.frame_j <= s.frame_i || s.interval != s.frame_j - s.frame_i || bin_of(s.max_mfi).ok() != Some(s.bin) {
            return Err(Error::schema(path, format!("line {}: inconsistent pair record", n + 1)));
        }
        out.push(s);
    }
    Ok(out)
}
