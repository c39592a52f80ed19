//! Synthetic demonstrations with an analytic success rule and a
//! controllable source/target appearance shift.
//!
//! Every demonstration renders one moving block (the "agent") approaching a
//! goal region over a background drawn from a domain palette, with static
//! distractor blocks. The agent moves along a straight line, so the rule
//! predicate, once true, stays true: labels are monotone and the success
//! onset is exact. Progress through the recording tracks the agent's
//! approach, which gives the timing head something to learn.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_dataset, Demonstration, Domain, Frame, Manifest, TaskDataset};
use crate::error::{Result, SclError};
use crate::rng::component_rng;

pub type Rgb = [u8; 3];

const AGENT_COLOR: Rgb = [220, 40, 40];
const GOAL_COLOR: Rgb = [235, 235, 235];
const DISTRACTOR_COLORS: [Rgb; 4] = [[230, 200, 40], [40, 200, 220], [200, 60, 200], [130, 90, 40]];

/// Frames between the first success frame and the agent coming to rest.
const SETTLE_FRAMES: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRule {
    /// Agent block ends fully inside the goal region.
    ReachTarget,
    /// Agent block comes to rest on top of a base block.
    StackBlocks,
    /// Agent block ends fully covering the goal region.
    CoverRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub background_palette_source: Vec<Rgb>,
    pub background_palette_target: Vec<Rgb>,
    pub distractor_count_source: usize,
    pub distractor_count_target: usize,
}

impl ShiftSpec {
    /// Same appearance in both domains.
    pub fn disabled() -> Self {
        let palette = vec![[30, 40, 90], [40, 80, 120], [70, 70, 70]];
        Self {
            background_palette_source: palette.clone(),
            background_palette_target: palette,
            distractor_count_source: 1,
            distractor_count_target: 1,
        }
    }

    pub fn is_enabled(&self) -> bool {
        let a: BTreeSet<_> = self.background_palette_source.iter().collect();
        let b: BTreeSet<_> = self.background_palette_target.iter().collect();
        a != b || self.distractor_count_source != self.distractor_count_target
    }
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            background_palette_source: vec![[30, 40, 90], [40, 80, 120], [70, 70, 70]],
            background_palette_target: vec![[160, 150, 70], [110, 160, 100], [180, 130, 100]],
            distractor_count_source: 1,
            distractor_count_target: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub task_id: String,
    pub num_demos_train: usize,
    pub num_demos_test: usize,
    /// Inclusive `[min, max]` frames per demonstration.
    pub frames_per_demo: [usize; 2],
    /// `[height, width]` of rendered frames.
    pub image_size: [usize; 2],
    pub task_rule: TaskRule,
    pub shift_spec: ShiftSpec,
    /// Per-pixel Gaussian noise, in 8-bit intensity units.
    pub noise_std: f64,
    /// Target fraction of Success frames in each demonstration.
    pub success_tail_fraction: f64,
    pub sampling_rate_hz: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            task_id: "synth_reach".into(),
            num_demos_train: 5,
            num_demos_test: 5,
            frames_per_demo: [30, 60],
            image_size: [60, 80],
            task_rule: TaskRule::ReachTarget,
            shift_spec: ShiftSpec::default(),
            noise_std: 6.0,
            success_tail_fraction: 0.2,
            sampling_rate_hz: 10.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SclError::Config(m));
        let [lo, hi] = self.frames_per_demo;
        if lo < 2 || hi < lo {
            return bad(format!("frames_per_demo must satisfy 2 <= min <= max, got [{lo}, {hi}]"));
        }
        if self.image_size[0] < 8 || self.image_size[1] < 8 {
            return bad(format!("image_size must be at least 8x8, got {:?}", self.image_size));
        }
        if self.num_demos_train == 0 {
            return bad("num_demos_train must be positive".into());
        }
        if !(0.0..=0.9).contains(&self.success_tail_fraction) {
            return bad(format!("success_tail_fraction must lie in [0, 0.9], got {}", self.success_tail_fraction));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and non-negative, got {}", self.noise_std));
        }
        if !(self.sampling_rate_hz > 0.0) {
            return bad("sampling_rate_hz must be positive".into());
        }
        let s = &self.shift_spec;
        if s.background_palette_source.is_empty() || s.background_palette_target.is_empty() {
            return bad("background palettes must be non-empty".into());
        }
        let src: BTreeSet<_> = s.background_palette_source.iter().collect();
        let tgt: BTreeSet<_> = s.background_palette_target.iter().collect();
        if src != tgt && src.intersection(&tgt).next().is_some() {
            return bad("source and target palettes must be identical (no shift) or disjoint".into());
        }
        Ok(())
    }
}

/// Axis-aligned rectangle in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    fn right(&self) -> f64 {
        self.x + self.w
    }

    fn bottom(&self) -> f64 {
        self.y + self.h
    }

    fn center_x(&self) -> f64 {
        self.x + self.w / 2.0
    }

    fn contains(&self, other: &Rect) -> bool {
        const TOL: f64 = 1e-9;
        other.x >= self.x - TOL
            && other.y >= self.y - TOL
            && other.right() <= self.right() + TOL
            && other.bottom() <= self.bottom() + TOL
    }

    /// Fraction of `self`'s area covered by `other`.
    pub fn overlap_fraction(&self, other: &Rect) -> f64 {
        let w = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let h = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        w * h / (self.w * self.h)
    }

    fn translated(&self, x: f64, y: f64) -> Rect {
        Rect { x, y, ..*self }
    }
}

/// Geometry attached to each generated frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub rule: TaskRule,
    pub agent: Rect,
    /// Goal region, or the base block for [`TaskRule::StackBlocks`].
    pub goal: Rect,
}

fn rule_holds(rule: TaskRule, agent: &Rect, goal: &Rect) -> bool {
    match rule {
        TaskRule::ReachTarget => goal.contains(agent),
        TaskRule::CoverRegion => agent.contains(goal),
        TaskRule::StackBlocks => {
            (agent.center_x() - goal.center_x()).abs() <= goal.w / 4.0 + 1e-9
                && (agent.bottom() - goal.y).abs() <= goal.h / 4.0 + 1e-9
        }
    }
}

/// Success predicate evaluated from a generated frame's scene geometry.
pub fn oracle_predict(frame: &Frame, rule: TaskRule) -> Result<u8> {
    let scene = frame
        .scene
        .as_ref()
        .ok_or_else(|| SclError::Validation("frame carries no scene geometry; only generated frames can be checked".into()))?;
    Ok(u8::from(rule_holds(rule, &scene.agent, &scene.goal)))
}

fn fill_rect(img: &mut Array3<u8>, r: &Rect, color: Rgb) {
    let (h, w, _) = img.dim();
    let y0 = r.y.round().max(0.0) as usize;
    let x0 = r.x.round().max(0.0) as usize;
    let y1 = (r.bottom().round().max(0.0) as usize).min(h);
    let x1 = (r.right().round().max(0.0) as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            for (c, &v) in color.iter().enumerate() {
                img[[y, x, c]] = v;
            }
        }
    }
}

struct DemoPlan {
    goal: Rect,
    start: Rect,
    end: Rect,
    background: Rgb,
    distractors: Vec<(Rect, Rgb)>,
    len: usize,
    idle: usize,
    onset: usize,
    onset_u: f64,
}

impl DemoPlan {
    fn agent_at(&self, t: usize) -> Rect {
        let u = if t <= self.idle {
            0.0
        } else if t < self.onset {
            self.onset_u * (t - self.idle) as f64 / (self.onset - self.idle) as f64
        } else {
            let settle = ((t - self.onset) as f64 / SETTLE_FRAMES).min(1.0);
            self.onset_u + (1.0 - self.onset_u) * settle
        };
        let x = self.start.x + u * (self.end.x - self.start.x);
        let y = self.start.y + u * (self.end.y - self.start.y);
        self.start.translated(x, y)
    }
}

fn plan_demo<R: Rng>(cfg: &SynthConfig, domain: Domain, rng: &mut R) -> DemoPlan {
    let [h, w] = cfg.image_size;
    let (hf, wf) = (h as f64, w as f64);
    let m = hf.min(wf);
    let (agent_size, goal_size) = match cfg.task_rule {
        TaskRule::ReachTarget => ((0.16 * m, 0.16 * m), (0.32 * m, 0.32 * m)),
        TaskRule::CoverRegion => ((0.32 * m, 0.32 * m), (0.18 * m, 0.18 * m)),
        TaskRule::StackBlocks => ((0.22 * m, 0.14 * m), (0.22 * m, 0.14 * m)),
    };

    let goal = {
        let gx = rng.random_range(0.05 * wf..(0.95 * wf - goal_size.0));
        // stacked agents need head room above the base
        let y_lo = match cfg.task_rule {
            TaskRule::StackBlocks => agent_size.1 + 0.05 * hf,
            _ => 0.05 * hf,
        };
        let gy = rng.random_range(y_lo..(0.95 * hf - goal_size.1));
        Rect {
            x: gx,
            y: gy,
            w: goal_size.0,
            h: goal_size.1,
        }
    };
    let end = match cfg.task_rule {
        TaskRule::ReachTarget | TaskRule::CoverRegion => Rect {
            x: goal.center_x() - agent_size.0 / 2.0,
            y: goal.y + goal.h / 2.0 - agent_size.1 / 2.0,
            w: agent_size.0,
            h: agent_size.1,
        },
        TaskRule::StackBlocks => Rect {
            x: goal.center_x() - agent_size.0 / 2.0,
            y: goal.y - agent_size.1,
            w: agent_size.0,
            h: agent_size.1,
        },
    };
    // start near the image corner farthest from the goal
    let corners = [
        (0.0, 0.0),
        (wf - agent_size.0, 0.0),
        (0.0, hf - agent_size.1),
        (wf - agent_size.0, hf - agent_size.1),
    ];
    let (cx, cy) = corners
        .iter()
        .copied()
        .max_by(|a, b| {
            let da = (a.0 - end.x).hypot(a.1 - end.y);
            let db = (b.0 - end.x).hypot(b.1 - end.y);
            da.total_cmp(&db)
        })
        .unwrap();
    let jitter = 0.05 * m;
    let start = end.translated(
        (cx + rng.random_range(-jitter..=jitter)).clamp(0.0, wf - agent_size.0),
        (cy + rng.random_range(-jitter..=jitter)).clamp(0.0, hf - agent_size.1),
    );
    debug_assert!(!rule_holds(cfg.task_rule, &start, &goal));

    // smallest path parameter at which the rule holds (monotone along the path)
    let holds = |u: f64| {
        let a = start.translated(start.x + u * (end.x - start.x), start.y + u * (end.y - start.y));
        rule_holds(cfg.task_rule, &a, &goal)
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }

    let len = rng.random_range(cfg.frames_per_demo[0]..=cfg.frames_per_demo[1]);
    let tail = (cfg.success_tail_fraction * len as f64).round() as usize;
    let onset = len - tail.min(len - 1);
    let idle = if onset > 1 { rng.random_range(0..=onset / 5) } else { 0 };
    let idle = idle.min(onset.saturating_sub(1));

    let (palette, n_distractors) = match domain {
        Domain::Source => (&cfg.shift_spec.background_palette_source, cfg.shift_spec.distractor_count_source),
        Domain::Target => (&cfg.shift_spec.background_palette_target, cfg.shift_spec.distractor_count_target),
    };
    let background = palette[rng.random_range(0..palette.len())];
    let ds = 0.12 * m;
    let distractors = (0..n_distractors)
        .map(|_| {
            let r = Rect {
                x: rng.random_range(0.0..wf - ds),
                y: rng.random_range(0.0..hf - ds),
                w: ds,
                h: ds,
            };
            (r, DISTRACTOR_COLORS[rng.random_range(0..DISTRACTOR_COLORS.len())])
        })
        .collect();

    DemoPlan {
        goal,
        start,
        end,
        background,
        distractors,
        len,
        idle,
        onset,
        onset_u: hi,
    }
}

fn render_demo<R: Rng>(cfg: &SynthConfig, plan: &DemoPlan, rng: &mut R) -> Vec<Frame> {
    let [h, w] = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    (0..plan.len)
        .map(|t| {
            let agent = plan.agent_at(t);
            let mut img = Array3::<u8>::zeros((h, w, 3));
            for y in 0..h {
                // mild vertical shading keeps backgrounds from being flat
                let shade = 1.0 - 0.15 * y as f64 / h as f64;
                for x in 0..w {
                    for c in 0..3 {
                        img[[y, x, c]] = (f64::from(plan.background[c]) * shade).round() as u8;
                    }
                }
            }
            for (r, color) in &plan.distractors {
                fill_rect(&mut img, r, *color);
            }
            fill_rect(&mut img, &plan.goal, GOAL_COLOR);
            fill_rect(&mut img, &agent, AGENT_COLOR);
            if cfg.noise_std > 0.0 {
                img.mapv_inplace(|v| (f64::from(v) + noise.sample(rng)).round().clamp(0.0, 255.0) as u8);
            }
            Frame {
                pixels: img,
                step_index: t,
                scene: Some(SceneMeta {
                    rule: cfg.task_rule,
                    agent,
                    goal: plan.goal,
                }),
            }
        })
        .collect()
}

fn generate_demo(cfg: &SynthConfig, domain: Domain, index: usize) -> Demonstration {
    let split = match domain {
        Domain::Source => "train",
        Domain::Target => "test",
    };
    let mut rng = component_rng(cfg.seed, &format!("synth/{split}/{index}"));
    let plan = plan_demo(cfg, domain, &mut rng);
    let frames = render_demo(cfg, &plan, &mut rng);
    let labels = frames
        .iter()
        .map(|f| oracle_predict(f, cfg.task_rule).expect("generated frames carry geometry"))
        .collect::<Vec<_>>();
    let onset = labels.iter().position(|&l| l == 1).unwrap_or(labels.len());
    debug_assert_eq!(onset, if plan.onset < plan.len { plan.onset } else { plan.len });
    Demonstration {
        demo_id: format!("{}_{split}_{index:03}", cfg.task_id),
        task_id: cfg.task_id.clone(),
        frames,
        labels,
        success_onset: onset,
        domain,
    }
}

/// Renders a full task dataset. Deterministic for a fixed config.
pub fn generate(config: &SynthConfig) -> Result<TaskDataset> {
    config.validate()?;
    let train_demos = (0..config.num_demos_train)
        .map(|i| generate_demo(config, Domain::Source, i))
        .collect();
    let test_demos = (0..config.num_demos_test)
        .map(|i| generate_demo(config, Domain::Target, i))
        .collect();
    let metadata = BTreeMap::from([
        (
            "description".to_string(),
            serde_json::json!(format!("synthetic {:?} task", config.task_rule)),
        ),
        ("sampling_rate_hz".to_string(), serde_json::json!(config.sampling_rate_hz)),
        ("synth_config".to_string(), serde_json::to_value(config)?),
    ]);
    let dataset = TaskDataset {
        task_id: config.task_id.clone(),
        train_demos,
        test_demos,
        metadata,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// [`generate`] and write the result as a manifest directory.
pub fn generate_to_dir(config: &SynthConfig, root: &Path) -> Result<(TaskDataset, Manifest)> {
    let dataset = generate(config)?;
    let manifest = write_dataset(&dataset, root, config.sampling_rate_hz)?;
    Ok((dataset, manifest))
}
