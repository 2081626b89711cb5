//! Randomized scene builders: training corpora and mostly-static evaluation suites.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Background, FlickerRegion, MotionSegment, ObjectSpec, SceneConfig, Shape};
use crate::error::{Error, Result};
use crate::seeds;

fn check_range(name: &str, r: [f64; 2], lo: f64) -> Result<()> {
    if !(r[0] >= lo && r[1] >= r[0] && r[1].is_finite()) {
        return Err(Error::Config(format!("{name} range {r:?} must satisfy {lo} <= min <= max")));
    }
    Ok(())
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn random_color<R: Rng>(rng: &mut R, background: [f64; 3]) -> [f64; 3] {
    // keep object colors clearly separated from the background
    loop {
        let c = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let d: f64 = c.iter().zip(&background).map(|(a, b)| (a - b).abs()).sum();
        if d > 0.6 {
            return c;
        }
    }
}

fn random_object<R: Rng>(
    rng: &mut R,
    id: usize,
    classes: u32,
    size: [f64; 2],
    canvas: (usize, usize),
    background: [f64; 3],
) -> ObjectSpec {
    let width = uniform(rng, size).round();
    let height = uniform(rng, size).round();
    ObjectSpec {
        object_id: format!("obj{id}"),
        class_id: rng.gen_range(0..classes.max(1)),
        shape: if rng.gen_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse },
        x: rng.gen_range(0.0..=(canvas.0 as f64 - width)).round(),
        y: rng.gen_range(0.0..=(canvas.1 as f64 - height)).round(),
        width,
        height,
        color: random_color(rng, background),
        texture_amplitude: rng.gen_range(0.0..0.12),
        texture_period: rng.gen_range(4.0..12.0),
        motion: Vec::new(),
    }
}

fn random_background<R: Rng>(rng: &mut R) -> [f64; 3] {
    let base = rng.gen_range(0.25..0.6);
    [
        base + rng.gen_range(-0.08..0.08),
        base + rng.gen_range(-0.08..0.08),
        base + rng.gen_range(-0.08..0.08),
    ]
}

fn random_flicker<R: Rng>(rng: &mut R, canvas: (usize, usize), amplitude: f64) -> FlickerRegion {
    let w = rng.gen_range(canvas.0 / 8..=canvas.0 / 4).max(1);
    let h = rng.gen_range(canvas.1 / 8..=canvas.1 / 4).max(1);
    let x0 = rng.gen_range(0..=canvas.0 - w);
    let y0 = rng.gen_range(0..=canvas.1 - h);
    FlickerRegion {
        x0,
        y0,
        x1: x0 + w,
        y1: y0 + h,
        amplitude,
    }
}

/// Parameters of a randomized training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub num_videos: usize,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    /// Fraction of videos whose objects move; the rest are fully static.
    pub moving_fraction: f64,
    pub max_objects: usize,
    pub num_classes: u32,
    pub object_size: [f64; 2],
    /// Cruise speed range in px/frame for moving objects.
    pub speed: [f64; 2],
    /// Probability that a moving object's next segment is a pause.
    pub pause_prob: f64,
    /// Probability per moving object and frame of a jump to a random location.
    pub teleport_prob: f64,
    pub noise_sigma: [f64; 2],
    pub flicker_prob: f64,
    pub flicker_amplitude: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_videos: 40,
            num_frames: 48,
            width: 224,
            height: 224,
            moving_fraction: 0.5,
            max_objects: 2,
            num_classes: 1,
            object_size: [28.0, 56.0],
            speed: [1.0, 8.0],
            pause_prob: 0.25,
            teleport_prob: 0.02,
            noise_sigma: [0.005, 0.02],
            flicker_prob: 0.3,
            flicker_amplitude: 0.08,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 || self.num_frames < 2 || self.max_objects == 0 {
            return Err(Error::Config("corpus needs videos, >= 2 frames and >= 1 object".into()));
        }
        for (name, p) in [
            ("moving_fraction", self.moving_fraction),
            ("pause_prob", self.pause_prob),
            ("teleport_prob", self.teleport_prob),
            ("flicker_prob", self.flicker_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        check_range("object_size", self.object_size, 1.0)?;
        check_range("speed", self.speed, 0.0)?;
        check_range("noise_sigma", self.noise_sigma, 0.0)?;
        if self.object_size[1] > self.width.min(self.height) as f64 {
            return Err(Error::Config("object_size exceeds the canvas".into()));
        }
        Ok(())
    }
}

/// Piecewise-linear wander between random target points, with pauses and jumps.
fn wander<R: Rng>(rng: &mut R, obj: &ObjectSpec, cfg: &CorpusConfig) -> Vec<MotionSegment> {
    // targets keep half a pixel of slack so accumulated rounding never leaves the canvas
    let max_x = (cfg.width as f64 - obj.width - 0.5).max(0.5);
    let max_y = (cfg.height as f64 - obj.height - 0.5).max(0.5);
    let last = cfg.num_frames - 1;
    let mut segs = Vec::new();
    let (mut t, mut x, mut y) = (0usize, obj.x, obj.y);
    while t < last {
        if rng.gen_bool(cfg.teleport_prob) {
            let (tx, ty) = (rng.gen_range(0.5..=max_x), rng.gen_range(0.5..=max_y));
            segs.push(MotionSegment {
                start: t,
                end: t + 1,
                velocity: [tx - x, ty - y],
            });
            (x, y, t) = (tx, ty, t + 1);
            continue;
        }
        if rng.gen_bool(cfg.pause_prob) {
            t = (t + rng.gen_range(2..=8)).min(last);
            continue;
        }
        let (tx, ty) = (rng.gen_range(0.5..=max_x), rng.gen_range(0.5..=max_y));
        let dist = ((tx - x).powi(2) + (ty - y).powi(2)).sqrt();
        let speed = uniform(rng, cfg.speed).max(1e-3);
        let steps = ((dist / speed).ceil() as usize).max(1).min(last - t);
        // the final leg may be cut short by the end of the video; stopping early stays inside the canvas
        let full_steps = ((dist / speed).ceil() as usize).max(1);
        let v = [(tx - x) / full_steps as f64, (ty - y) / full_steps as f64];
        segs.push(MotionSegment {
            start: t,
            end: t + steps,
            velocity: v,
        });
        x += v[0] * steps as f64;
        y += v[1] * steps as f64;
        t += steps;
    }
    segs
}

/// Draws the scene configs of a randomized corpus. Video `k` is named `vid_{k:03}`.
pub fn generate_corpus_configs(cfg: &CorpusConfig) -> Result<Vec<SceneConfig>> {
    cfg.validate()?;
    let canvas = (cfg.width, cfg.height);
    let n_moving = (cfg.num_videos as f64 * cfg.moving_fraction).round() as usize;
    (0..cfg.num_videos)
        .map(|k| {
            let video_seed = seeds::derive(seeds::derive_named(cfg.seed, "corpus"), k as u64);
            let mut rng: ChaCha8Rng = seeds::rng(video_seed);
            let background_color = random_background(&mut rng);
            let n_obj = rng.gen_range(1..=cfg.max_objects);
            // spread moving videos evenly through the index range
            let moving = (k + 1) * n_moving / cfg.num_videos > k * n_moving / cfg.num_videos;
            let mut objects: Vec<ObjectSpec> = (0..n_obj)
                .map(|i| random_object(&mut rng, i, cfg.num_classes, cfg.object_size, canvas, background_color))
                .collect();
            if moving {
                for o in objects.iter_mut() {
                    o.motion = wander(&mut rng, o, cfg);
                }
            }
            let background = if rng.gen_bool(cfg.flicker_prob) {
                Background::Dynamic {
                    regions: vec![random_flicker(&mut rng, canvas, cfg.flicker_amplitude)],
                }
            } else {
                Background::Static
            };
            let scene = SceneConfig {
                video_id: format!("vid_{k:03}"),
                width: cfg.width,
                height: cfg.height,
                num_frames: cfg.num_frames,
                objects,
                background,
                background_color,
                noise_sigma: uniform(&mut rng, cfg.noise_sigma),
                seed: video_seed,
            };
            scene.validate()?;
            Ok(scene)
        })
        .collect()
}

/// A long, mostly static evaluation video: objects hold still except for short
/// fast bursts (each step a semantic change) and short sub-threshold drifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub video_id: String,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub num_objects: usize,
    pub object_size: [f64; 2],
    pub fast_bursts: usize,
    pub fast_burst_len: usize,
    pub fast_speed: f64,
    pub drift_bursts: usize,
    pub drift_burst_len: usize,
    pub drift_speed: f64,
    pub noise_sigma: f64,
    pub flicker: bool,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            video_id: "suite".into(),
            num_frames: 500,
            width: 224,
            height: 224,
            num_objects: 2,
            object_size: [28.0, 44.0],
            fast_bursts: 4,
            fast_burst_len: 5,
            fast_speed: 16.0,
            drift_bursts: 10,
            drift_burst_len: 3,
            drift_speed: 1.0,
            noise_sigma: 0.01,
            flicker: true,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn moving_frames(&self) -> usize {
        self.fast_bursts * self.fast_burst_len + self.drift_bursts * self.drift_burst_len
    }
}

/// Builds the scene for a [`SuiteConfig`]. Bursts are spread over evenly sized
/// slots of the timeline so they never overlap; drifts oscillate within
/// `drift_burst_len * drift_speed` px of the rest position.
pub fn mostly_static_scene(cfg: &SuiteConfig) -> Result<SceneConfig> {
    let bursts = cfg.fast_bursts + cfg.drift_bursts;
    let longest = cfg.fast_burst_len.max(cfg.drift_burst_len);
    if cfg.num_objects == 0 || bursts == 0 {
        return Err(Error::Config("suite needs objects and bursts".into()));
    }
    let slot = (cfg.num_frames.saturating_sub(1)) / bursts;
    if slot < longest + 2 {
        return Err(Error::Config(format!(
            "{bursts} bursts of up to {longest} frames do not fit in {} frames",
            cfg.num_frames
        )));
    }
    check_range("object_size", cfg.object_size, 1.0)?;
    let travel = cfg.fast_speed * cfg.fast_burst_len as f64;
    if cfg.object_size[1] + 2.0 * travel + cfg.drift_speed * cfg.drift_burst_len as f64 > cfg.width.min(cfg.height) as f64 {
        return Err(Error::Config("fast bursts do not fit on the canvas".into()));
    }
    let mut rng = seeds::rng(seeds::derive_named(cfg.seed, "suite"));
    let canvas = (cfg.width, cfg.height);
    let background_color = random_background(&mut rng);
    let mut objects: Vec<ObjectSpec> = (0..cfg.num_objects)
        .map(|i| random_object(&mut rng, i, 1, cfg.object_size, canvas, background_color))
        .collect();

    let mut kinds: Vec<bool> = std::iter::repeat(true)
        .take(cfg.fast_bursts)
        .chain(std::iter::repeat(false).take(cfg.drift_bursts))
        .collect();
    kinds.shuffle(&mut rng);

    let drift_span = cfg.drift_speed * cfg.drift_burst_len as f64;
    let mut pos: Vec<(f64, f64)> = objects.iter().map(|o| (o.x, o.y)).collect();
    let mut drift_out = vec![false; objects.len()];
    for (b, &fast) in kinds.iter().enumerate() {
        let len = if fast { cfg.fast_burst_len } else { cfg.drift_burst_len };
        let start = 1 + b * slot + rng.gen_range(0..=slot - len - 1);
        let k = rng.gen_range(0..objects.len());
        let o = &objects[k];
        let (x, y) = pos[k];
        let velocity = if fast {
            let horizontal = rng.gen_bool(0.5);
            let (p, room_hi) = if horizontal {
                (x, cfg.width as f64 - o.width - drift_span)
            } else {
                (y, cfg.height as f64 - o.height)
            };
            let sign = if p + travel <= room_hi && (p < travel || rng.gen_bool(0.5)) { 1.0 } else { -1.0 };
            let v = sign * cfg.fast_speed;
            if horizontal {
                [v, 0.0]
            } else {
                [0.0, v]
            }
        } else {
            // drift right from rest, then back
            let v = if drift_out[k] { -cfg.drift_speed } else { cfg.drift_speed };
            drift_out[k] = !drift_out[k];
            [v, 0.0]
        };
        pos[k] = (x + velocity[0] * len as f64, y + velocity[1] * len as f64);
        objects[k].motion.push(MotionSegment {
            start: start - 1,
            end: start - 1 + len,
            velocity,
        });
    }

    let background = if cfg.flicker {
        Background::Dynamic {
            regions: vec![random_flicker(&mut rng, canvas, 0.08)],
        }
    } else {
        Background::Static
    };
    let scene = SceneConfig {
        video_id: cfg.video_id.clone(),
        width: cfg.width,
        height: cfg.height,
        num_frames: cfg.num_frames,
        objects,
        background,
        background_color,
        noise_sigma: cfg.noise_sigma,
        seed: seeds::derive_named(cfg.seed, "suite-render"),
    };
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{scenery_change, SceneryLabel};
    use crate::synthgen::generate_video;

    #[test]
    fn corpus_configs_are_valid_and_deterministic() {
        let cfg = CorpusConfig {
            num_videos: 6,
            num_frames: 30,
            seed: 3,
            ..Default::default()
        };
        let a = generate_corpus_configs(&cfg).unwrap();
        assert_eq!(a, generate_corpus_configs(&cfg).unwrap());
        let moving = a.iter().filter(|s| s.objects.iter().any(|o| !o.motion.is_empty())).count();
        assert_eq!(moving, 3);
    }

    #[test]
    fn moving_fraction_extremes() {
        for (frac, expect) in [(0.0, 0), (1.0, 5)] {
            let cfg = CorpusConfig {
                num_videos: 5,
                num_frames: 10,
                moving_fraction: frac,
                ..Default::default()
            };
            let scenes = generate_corpus_configs(&cfg).unwrap();
            let moving = scenes.iter().filter(|s| s.objects.iter().any(|o| !o.motion.is_empty())).count();
            assert_eq!(moving, expect, "fraction {frac}");
        }
    }

    #[test]
    fn suite_schedule_matches_its_config() {
        let cfg = SuiteConfig::default();
        let scene = mostly_static_scene(&cfg).unwrap();
        assert_eq!(scene.num_frames - scene.static_frame_count(), cfg.moving_frames());
        assert!(scene.static_frame_count() as f64 >= 0.9 * cfg.num_frames as f64);
    }

    #[test]
    fn suite_fast_steps_change_and_drifts_do_not() {
        let cfg = SuiteConfig {
            noise_sigma: 0.0,
            flicker: false,
            width: 224,
            ..Default::default()
        };
        let scene = mostly_static_scene(&cfg).unwrap();
        let v = generate_video(&scene).unwrap();
        let mut changed = 0;
        for t in 1..v.len() {
            let sc = scenery_change(&v.frames[t - 1].annotations, &v.frames[t].annotations, 0.4).unwrap();
            if sc == SceneryLabel::Changed {
                changed += 1;
            }
        }
        assert_eq!(changed, cfg.fast_bursts * cfg.fast_burst_len);
        // drift never strays more than one burst from rest
        for o in &scene.objects {
            let drift: f64 = o
                .motion
                .iter()
                .filter(|s| s.velocity[0].abs() == cfg.drift_speed)
                .map(|s| s.velocity[0] * (s.end - s.start) as f64)
                .sum();
            assert!((0.0..=cfg.drift_speed * cfg.drift_burst_len as f64).contains(&drift));
        }
    }
}
