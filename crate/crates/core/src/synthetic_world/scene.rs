use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{CorpusConfig, TemplateSet};
use super::vocab::{COLOR_NAMES, SHAPE_NAMES, VERB_NAMES};

/// Centers are kept inside `[MARGIN, 1 − MARGIN]²` by reflection.
pub const MARGIN: f64 = 0.1;
pub const MAX_SPEED: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        SHAPE_NAMES[self as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Orange,
    ];

    pub fn name(self) -> &'static str {
        COLOR_NAMES[self as usize]
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Orange => [1.0, 0.5, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Moves,
    Bounces,
    Spins,
    Shrinks,
    Grows,
    Collides,
}

impl Action {
    pub fn name(self) -> &'static str {
        VERB_NAMES[self as usize]
    }
}

/// Detector class id: index into the shape × color product (24 classes).
pub fn class_id(shape: Shape, color: Color) -> usize {
    shape as usize * Color::ALL.len() + color as usize
}

pub fn class_parts(id: usize) -> (Shape, Color) {
    (Shape::ALL[id / Color::ALL.len()], Color::ALL[id % Color::ALL.len()])
}

/// One object and its motion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    /// Initial center in normalized coordinates (x, y).
    pub center: [f64; 2],
    /// Per-frame displacement, each component in [−0.1, 0.1].
    pub velocity: [f64; 2],
    /// Base radius in normalized units.
    pub size: f64,
    pub angle: f64,
    /// Radians per frame.
    pub spin: f64,
    /// Size multiplier at the first and last frame (linear in between).
    pub scale: [f64; 2],
}

impl ObjectSpec {
    pub fn still(shape: Shape, color: Color, center: [f64; 2], size: f64) -> Self {
        Self {
            shape,
            color,
            center,
            velocity: [0.0, 0.0],
            size,
            angle: 0.0,
            spin: 0.0,
            scale: [1.0, 1.0],
        }
    }

    pub fn class_id(&self) -> usize {
        class_id(self.shape, self.color)
    }

    /// Center, size multiplier and rotation at `frame` of a `frames`-long clip.
    pub fn state_at(&self, frame: usize, frames: usize) -> ([f64; 2], f64, f64) {
        let t = frame as f64;
        let center = [
            reflect(self.center[0] + self.velocity[0] * t),
            reflect(self.center[1] + self.velocity[1] * t),
        ];
        let alpha = if frames > 1 { t / (frames - 1) as f64 } else { 0.0 };
        let scale = self.scale[0] + (self.scale[1] - self.scale[0]) * alpha;
        (center, scale, self.angle + self.spin * t)
    }
}

/// Folds a coordinate back into `[MARGIN, 1 − MARGIN]` as if bouncing off walls.
pub fn reflect(x: f64) -> f64 {
    let lo = MARGIN;
    let span = 1.0 - 2.0 * MARGIN;
    let period = 2.0 * span;
    let mut u = (x - lo).rem_euclid(period);
    if u > span {
        u = period - u;
    }
    lo + u
}

/// A described event: one object with a verb, or a collision between two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionUnit {
    Single { object: usize, action: Action },
    Collision { subject: usize, target: usize },
}

impl ActionUnit {
    pub fn action(&self) -> Action {
        match self {
            ActionUnit::Single { action, .. } => *action,
            ActionUnit::Collision { .. } => Action::Collides,
        }
    }
}

/// Everything needed to render one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    pub actions: Vec<ActionUnit>,
}

impl SceneSpec {
    pub fn sample(seed: u64, config: &CorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=config.max_objects);
        Self::sample_inner(seed, config, n, &mut rng)
    }

    /// As [`SceneSpec::sample`] but with a fixed object count (may be 0).
    pub fn sample_with_count(seed: u64, config: &CorpusConfig, num_objects: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let _ = rng.gen_range(1..=config.max_objects);
        Self::sample_inner(seed, config, num_objects, &mut rng)
    }

    fn sample_inner(seed: u64, config: &CorpusConfig, n: usize, rng: &mut ChaCha8Rng) -> Self {
        let frames = config.frames;
        let classes = sample_classes(n, rng);
        let mut objects: Vec<ObjectSpec> = classes
            .iter()
            .map(|&(shape, color)| {
                let size = rng.gen_range(0.12..0.18);
                let center = [rng.gen_range(MARGIN..1.0 - MARGIN), rng.gen_range(MARGIN..1.0 - MARGIN)];
                let mut o = ObjectSpec::still(shape, color, center, size);
                o.angle = rng.gen_range(0.0..std::f64::consts::TAU);
                o
            })
            .collect();

        let mut actions = Vec::new();
        let mut i = 0;
        while i < n {
            let pair = config.templates == TemplateSet::Mixed && i + 1 < n && rng.gen_bool(0.35);
            if pair {
                place_collision(&mut objects, i, i + 1, frames, rng);
                actions.push(ActionUnit::Collision {
                    subject: i,
                    target: i + 1,
                });
                i += 2;
            } else {
                let action = choose_single_action(objects[i].shape, rng);
                apply_single_action(&mut objects[i], action, frames, rng);
                actions.push(ActionUnit::Single { object: i, action });
                i += 1;
            }
        }
        Self { seed, objects, actions }
    }
}

fn sample_classes(n: usize, rng: &mut ChaCha8Rng) -> Vec<(Shape, Color)> {
    let mut out: Vec<(Shape, Color)> = Vec::with_capacity(n);
    if n <= Shape::ALL.len() {
        let mut shapes = Shape::ALL.to_vec();
        shapes.shuffle(rng);
        for &shape in shapes.iter().take(n) {
            out.push((shape, *Color::ALL.choose(rng).expect("palette")));
        }
    } else {
        while out.len() < n.min(Shape::ALL.len() * Color::ALL.len()) {
            let c = (
                *Shape::ALL.choose(rng).expect("shapes"),
                *Color::ALL.choose(rng).expect("palette"),
            );
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    out
}

fn choose_single_action(shape: Shape, rng: &mut ChaCha8Rng) -> Action {
    // a rotating circle is invisible, so circles never spin
    let options: &[Action] = if shape == Shape::Circle {
        &[Action::Moves, Action::Bounces, Action::Shrinks, Action::Grows]
    } else {
        &[
            Action::Moves,
            Action::Bounces,
            Action::Spins,
            Action::Shrinks,
            Action::Grows,
        ]
    };
    *options.choose(rng).expect("non-empty")
}

fn signed(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let m = rng.gen_range(lo..hi);
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

fn apply_single_action(o: &mut ObjectSpec, action: Action, frames: usize, rng: &mut ChaCha8Rng) {
    let half = (frames.saturating_sub(1)) as f64 / 2.0;
    match action {
        Action::Moves => {
            o.velocity = [signed(rng, 0.05, MAX_SPEED), signed(rng, 0.0, MAX_SPEED)];
            if rng.gen_bool(0.5) {
                o.velocity.swap(0, 1);
            }
        }
        Action::Bounces => {
            // hits the top or bottom wall halfway through the clip
            let vy = signed(rng, 0.07, MAX_SPEED);
            o.velocity = [rng.gen_range(-0.03..0.03), vy];
            o.center[1] = if vy > 0.0 {
                (1.0 - MARGIN) - vy * half
            } else {
                MARGIN - vy * half
            };
        }
        Action::Spins => o.spin = signed(rng, std::f64::consts::PI / 8.0, std::f64::consts::PI / 4.0),
        Action::Shrinks => o.scale = [1.0, 0.55],
        Action::Grows => o.scale = [0.55, 1.0],
        Action::Collides => unreachable!("collisions are placed in pairs"),
    }
}

/// Places `subject` so it travels in a straight line and overlaps the static
/// `target` on the last frame.
fn place_collision(objects: &mut [ObjectSpec], subject: usize, target: usize, frames: usize, rng: &mut ChaCha8Rng) {
    let steps = frames.saturating_sub(1) as f64;
    let contact = 0.6 * (objects[subject].size + objects[target].size);
    for attempt in 0..64 {
        let target_center = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let dir = [theta.cos(), theta.sin()];
        // shrink the speed on later attempts so a placement always exists
        let speed = rng.gen_range(0.04..0.09) / (1.0 + attempt as f64 / 8.0);
        let travel = speed * steps;
        let start = [
            target_center[0] - dir[0] * (contact + travel),
            target_center[1] - dir[1] * (contact + travel),
        ];
        let inside = |c: f64| (MARGIN..=1.0 - MARGIN).contains(&c);
        if inside(start[0]) && inside(start[1]) {
            objects[target].center = target_center;
            objects[subject].center = start;
            objects[subject].velocity = [dir[0] * speed, dir[1] * speed];
            return;
        }
    }
    // fallback: a horizontal approach from the left always fits
    objects[target].center = [0.6, 0.5];
    let speed = (0.6 - contact - 0.15) / steps.max(1.0);
    let speed = speed.clamp(0.0, MAX_SPEED);
    objects[subject].center = [0.6 - contact - speed * steps, 0.5];
    objects[subject].velocity = [speed, 0.0];
}
