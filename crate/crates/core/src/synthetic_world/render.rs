use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::CorpusConfig;
use super::scene::{class_id, ActionUnit, ObjectSpec, SceneSpec, Shape};
use super::vocab::{Vocabulary, CLS, SEP};
use super::NUM_CLASSES;
use crate::error::Result;

/// `T × 3 × S × S` pixels in [0, 1], frame-major then channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    frames: usize,
    size: usize,
    data: Vec<f32>,
}

impl Frames {
    pub fn zeros(frames: usize, size: usize) -> Self {
        Self {
            frames,
            size,
            data: vec![0.0; frames * 3 * size * size],
        }
    }

    pub fn from_data(frames: usize, size: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), frames * 3 * size * size);
        Self { frames, size, data }
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, frame: usize, channel: usize, y: usize, x: usize) -> f32 {
        self.data[((frame * 3 + channel) * self.size + y) * self.size + x]
    }

    fn set_pixel(&mut self, frame: usize, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[((frame * 3 + c) * self.size + y) * self.size + x] = v;
        }
    }

    /// One frame's pixels (`3 × S × S`).
    pub fn frame(&self, frame: usize) -> &[f32] {
        let n = 3 * self.size * self.size;
        &self.data[frame * n..(frame + 1) * n]
    }

    pub fn frame_mut(&mut self, frame: usize) -> &mut [f32] {
        let n = 3 * self.size * self.size;
        &mut self.data[frame * n..(frame + 1) * n]
    }
}

/// One detector output: normalized `(x1, y1, x2, y2)` box, class, confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub class_id: usize,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosTag {
    #[serde(rename = "NOUN")]
    Noun,
    #[serde(rename = "VERB")]
    Verb,
    #[serde(rename = "OTHER")]
    Other,
    #[serde(rename = "SPECIAL")]
    Special,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<u32>,
    pub tags: Vec<PosTag>,
}

impl Caption {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One synthetic video-text pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub frames: Frames,
    /// Per frame, at most K detections sorted by descending confidence.
    pub detections: Vec<Vec<Detection>>,
    pub caption: Caption,
}

/// Pixel-exact rasterisation of a scene plus its annotations.
pub fn render_scene(scene: &SceneSpec, config: &CorpusConfig) -> Result<SampleRecord> {
    config.validate()?;
    let (t_len, s) = (config.frames, config.image_size);
    let mut frames = Frames::zeros(t_len, s);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x5EED_C0DE_D15C_0000);
    let base_conf: Vec<f64> = scene.objects.iter().map(|_| noise_rng.gen_range(0.6..1.0)).collect();

    let mut detections = Vec::with_capacity(t_len);
    for tau in 0..t_len {
        let mut frame_dets = Vec::new();
        for (i, obj) in scene.objects.iter().enumerate() {
            let jitter: f64 = noise_rng.gen_range(-0.1..0.1);
            let swap = noise_rng.gen::<f64>() < config.label_noise;
            let other = noise_rng.gen_range(1..NUM_CLASSES);
            let mask = object_mask(obj, tau, t_len, s);
            let Some(bbox) = mask_box(&mask, s) else {
                continue;
            };
            let rgb = obj.color.rgb();
            for (p, &inside) in mask.iter().enumerate() {
                if inside {
                    frames.set_pixel(tau, p / s, p % s, rgb);
                }
            }
            let mut cls = obj.class_id();
            if swap {
                cls = (cls + other) % NUM_CLASSES;
            }
            frame_dets.push(Detection {
                bbox,
                class_id: cls,
                confidence: (base_conf[i] + jitter).clamp(0.5, 1.0),
            });
        }
        frame_dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        frame_dets.truncate(config.max_objects);
        detections.push(frame_dets);
    }

    let caption = build_caption(scene, &config.vocab, config.max_text_len);
    Ok(SampleRecord {
        id: scene.seed,
        frames,
        detections,
        caption,
    })
}

/// Boolean coverage of `obj` at frame `tau`, row-major `S × S`.
pub fn object_mask(obj: &ObjectSpec, tau: usize, frames: usize, s: usize) -> Vec<bool> {
    let (center, scale, angle) = obj.state_at(tau, frames);
    let radius = obj.size * scale;
    let (sin, cos) = angle.sin_cos();
    let tri: Vec<[f64; 2]> = (0..3)
        .map(|k| {
            let a = angle - std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::TAU / 3.0;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect();
    let mut mask = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            let px = (x as f64 + 0.5) / s as f64;
            let py = (y as f64 + 0.5) / s as f64;
            let (dx, dy) = (px - center[0], py - center[1]);
            let inside = match obj.shape {
                Shape::Circle => dx * dx + dy * dy <= radius * radius,
                Shape::Square => {
                    let half = 0.85 * radius;
                    let u = cos * dx + sin * dy;
                    let v = -sin * dx + cos * dy;
                    u.abs() <= half && v.abs() <= half
                }
                Shape::Triangle => in_triangle([px, py], &tri),
            };
            mask[y * s + x] = inside;
        }
    }
    mask
}

fn in_triangle(p: [f64; 2], t: &[[f64; 2]]) -> bool {
    let edge = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let d0 = edge(t[0], t[1]);
    let d1 = edge(t[1], t[2]);
    let d2 = edge(t[2], t[0]);
    let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
    let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
    !(neg && pos)
}

/// Tight normalized box around the true pixels, `None` if the mask is empty.
pub fn mask_box(mask: &[bool], s: usize) -> Option<[f64; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (p, &m) in mask.iter().enumerate() {
        if m {
            let (y, x) = (p / s, p % s);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    let n = s as f64;
    Some([x0 as f64 / n, y0 as f64 / n, (x1 + 1) as f64 / n, (y1 + 1) as f64 / n])
}

/// Template caption: clauses joined by "and", truncated to whole clauses
/// that fit `max_len` tokens.
pub fn build_caption(scene: &SceneSpec, vocab: &Vocabulary, max_len: usize) -> Caption {
    let mut tokens = vec![vocab.known(CLS)];
    let mut tags = vec![PosTag::Special];
    if scene.objects.is_empty() {
        tokens.extend([vocab.known("empty"), vocab.known("scene"), vocab.known(SEP)]);
        tags.extend([PosTag::Other, PosTag::Other, PosTag::Special]);
        return Caption { tokens, tags };
    }
    let mut first = true;
    for unit in &scene.actions {
        let mut clause: Vec<(u32, PosTag)> = Vec::new();
        if !first {
            clause.push((vocab.known("and"), PosTag::Other));
        }
        let np = |o: &ObjectSpec| {
            [
                (vocab.known("the"), PosTag::Other),
                (vocab.known(o.color.name()), PosTag::Other),
                (vocab.known(o.shape.name()), PosTag::Noun),
            ]
        };
        match *unit {
            ActionUnit::Single { object, action } => {
                clause.extend(np(&scene.objects[object]));
                clause.push((vocab.known(action.name()), PosTag::Verb));
            }
            ActionUnit::Collision { subject, target } => {
                clause.extend(np(&scene.objects[subject]));
                clause.push((vocab.known("collides"), PosTag::Verb));
                clause.push((vocab.known("with"), PosTag::Other));
                clause.extend(np(&scene.objects[target]));
            }
        }
        if tokens.len() + clause.len() + 1 > max_len {
            break;
        }
        for (tok, tag) in clause {
            tokens.push(tok);
            tags.push(tag);
        }
        first = false;
    }
    tokens.push(vocab.known(SEP));
    tags.push(PosTag::Special);
    Caption { tokens, tags }
}

/// Class id named by each NOUN token (read from the preceding color word).
pub fn noun_classes(caption: &Caption, vocab: &Vocabulary) -> Vec<usize> {
    use super::scene::{Color, Shape as S};
    let mut out = Vec::new();
    for (i, tag) in caption.tags.iter().enumerate() {
        if *tag != PosTag::Noun || i == 0 {
            continue;
        }
        let shape_name = vocab.token(caption.tokens[i]).unwrap_or_default();
        let color_name = vocab.token(caption.tokens[i - 1]).unwrap_or_default();
        let shape = S::ALL.iter().find(|s| s.name() == shape_name);
        let color = Color::ALL.iter().find(|c| c.name() == color_name);
        if let (Some(&s), Some(&c)) = (shape, color) {
            out.push(class_id(s, c));
        }
    }
    out
}
