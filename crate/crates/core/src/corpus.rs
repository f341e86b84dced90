//! Seeded synthetic image/prompt corpus with a train/held-out split.

use crate::error::{Error, Result};
use crate::numerics::{ImageTensor, RngStream};
use crate::victim::Task;

const SHAPES: [&str; 4] = ["circle", "square", "triangle", "ring"];
const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.15, 0.75, 0.2]),
    ("blue", [0.1, 0.25, 0.9]),
    ("yellow", [0.95, 0.9, 0.15]),
    ("white", [0.97, 0.97, 0.97]),
    ("black", [0.05, 0.05, 0.05]),
];

fn templates(task: Task) -> &'static [&'static str] {
    match task {
        Task::Classification => &[
            "What is this?",
            "What object is shown?",
            "Name the main object.",
            "Which shape is this?",
            "Classify this image.",
        ],
        Task::Captioning => &[
            "Describe the image.",
            "Write a short caption.",
            "What does this picture show?",
            "Caption this scene.",
        ],
        Task::VqaGeneral => &[
            "Is there a {shape}?",
            "How many shapes are there?",
            "Is the background {color}?",
            "Are there any {shape}s here?",
        ],
        Task::VqaSpecific => &[
            "What color is the {shape}?",
            "Where is the {color} {shape}?",
            "How big is the {shape}?",
            "Is the {shape} on the left?",
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPrompt {
    pub text: String,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_images: usize,
    pub m_prompts: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Fraction of images, and of each task's prompts, held out.
    pub heldout_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 16,
            m_prompts: 8,
            height: 128,
            width: 128,
            channels: 3,
            heldout_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackCorpus {
    pub images: Vec<ImageTensor>,
    pub prompts: Vec<CorpusPrompt>,
    pub train_images: Vec<usize>,
    pub heldout_images: Vec<usize>,
    pub train_prompts: Vec<usize>,
    pub heldout_prompts: Vec<usize>,
}

impl AttackCorpus {
    /// Validates indices and the split invariants.
    pub fn new(
        images: Vec<ImageTensor>,
        prompts: Vec<CorpusPrompt>,
        train_images: Vec<usize>,
        heldout_images: Vec<usize>,
        train_prompts: Vec<usize>,
        heldout_prompts: Vec<usize>,
    ) -> Result<Self> {
        let c = Self {
            images,
            prompts,
            train_images,
            heldout_images,
            train_prompts,
            heldout_prompts,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("corpus: {m}")));
        if self.train_images.is_empty() || self.train_prompts.is_empty() {
            return bad("train split needs at least one image and one prompt");
        }
        for (split, n, name) in [
            (&self.train_images, self.images.len(), "image"),
            (&self.heldout_images, self.images.len(), "image"),
            (&self.train_prompts, self.prompts.len(), "prompt"),
            (&self.heldout_prompts, self.prompts.len(), "prompt"),
        ] {
            if split.iter().any(|&i| i >= n) {
                return bad(&format!("{name} index out of range"));
            }
        }
        if self.train_images.iter().any(|i| self.heldout_images.contains(i))
            || self.train_prompts.iter().any(|i| self.heldout_prompts.contains(i))
        {
            return bad("train and held-out splits overlap");
        }
        if let Some(first) = self.images.first() {
            if self.images.iter().any(|im| !im.same_shape(first)) {
                return bad("images differ in shape");
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(ImageTensor::shape)
    }

    /// All train `(image_id, prompt_id)` pairs in ascending order.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        cross(&self.train_images, &self.train_prompts)
    }

    pub fn heldout_pairs(&self) -> Vec<(usize, usize)> {
        cross(&self.heldout_images, &self.heldout_prompts)
    }
}

fn cross(images: &[usize], prompts: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = images
        .iter()
        .flat_map(|&i| prompts.iter().map(move |&p| (i, p)))
        .collect();
    out.sort_unstable();
    out
}

fn fill_template(template: &str, rng: &mut RngStream) -> String {
    let shape = SHAPES[rng.below(SHAPES.len())];
    let color = COLORS[rng.below(COLORS.len())].0;
    template.replace("{shape}", shape).replace("{color}", color)
}

fn gen_prompts(rng: &mut RngStream, m: usize) -> Vec<CorpusPrompt> {
    let mut out: Vec<CorpusPrompt> = Vec::with_capacity(m);
    for i in 0..m {
        let task = Task::ALL[i % Task::ALL.len()];
        let pool = templates(task);
        let mut text = fill_template(pool[rng.below(pool.len())], rng);
        // prefer distinct prompts while the template space allows it
        for _ in 0..16 {
            if !out.iter().any(|p| p.text == text) {
                break;
            }
            text = fill_template(pool[rng.below(pool.len())], rng);
        }
        out.push(CorpusPrompt { text, task });
    }
    out
}

fn color(rng: &mut RngStream, channels: usize) -> Vec<f32> {
    (0..channels).map(|_| rng.unit() as f32).collect()
}

fn gen_image(rng: &mut RngStream, h: usize, w: usize, c: usize) -> Result<ImageTensor> {
    let (c0, c1) = (color(rng, c), color(rng, c));
    let angle = rng.uniform(0.0, std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut data = vec![0.0f32; h * w * c];
    for r in 0..h {
        for col in 0..w {
            let u = (r as f64 / h as f64 - 0.5) * dy + (col as f64 / w as f64 - 0.5) * dx;
            let t = (u + 0.5).clamp(0.0, 1.0) as f32;
            let px = &mut data[(r * w + col) * c..(r * w + col + 1) * c];
            for ch in 0..c {
                px[ch] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }

    let n_shapes = 1 + rng.below(3);
    for _ in 0..n_shapes {
        let kind = rng.below(SHAPES.len());
        let fill: Vec<f32> = if c == 3 {
            COLORS[rng.below(COLORS.len())].1.to_vec()
        } else {
            color(rng, c)
        };
        let cy = rng.uniform(0.2, 0.8) * h as f64;
        let cx = rng.uniform(0.2, 0.8) * w as f64;
        let size = rng.uniform(0.1, 0.3) * h.min(w) as f64;
        for r in 0..h {
            for col in 0..w {
                let (y, x) = (r as f64 + 0.5 - cy, col as f64 + 0.5 - cx);
                let inside = match kind {
                    0 => x * x + y * y <= size * size,
                    1 => x.abs() <= size && y.abs() <= size,
                    2 => y <= size && y >= -size && x.abs() <= (y + size) / 2.0,
                    _ => {
                        let d = (x * x + y * y).sqrt();
                        d <= size && d >= 0.6 * size
                    }
                };
                if inside {
                    data[(r * w + col) * c..(r * w + col + 1) * c].copy_from_slice(&fill);
                }
            }
        }
    }

    // coarse value-noise texture on an 8x8 lattice
    let amp = rng.uniform(0.0, 0.08) as f32;
    let (gh, gw) = (h.div_ceil(8), w.div_ceil(8));
    let lattice: Vec<f32> = (0..gh * gw * c).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let v = &mut data[(r * w + col) * c + ch];
                *v = (*v + amp * lattice[((r / 8) * gw + col / 8) * c + ch]).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(h, w, c, data)
}

/// Number held out of `n` items: `round(n * fraction)`, keeping at least one
/// item for training.
fn heldout_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1))
}

pub fn gen_corpus(spec: &CorpusSpec) -> Result<AttackCorpus> {
    let probe = ImageTensor::zeros(spec.height.max(1), spec.width.max(1), spec.channels.max(1));
    probe.require_power_of_two(8)?;
    if spec.height == 0 || spec.width == 0 || !(spec.channels == 1 || spec.channels == 3) {
        return Err(Error::InvalidParameter(format!(
            "corpus dims {}x{}x{} invalid (channels must be 1 or 3)",
            spec.height, spec.width, spec.channels
        )));
    }
    if spec.n_images == 0 || spec.m_prompts == 0 {
        return Err(Error::InvalidParameter("corpus needs at least one image and one prompt".into()));
    }
    if !(0.0..1.0).contains(&spec.heldout_fraction) {
        return Err(Error::InvalidParameter(format!(
            "held-out fraction must be in [0, 1), got {}",
            spec.heldout_fraction
        )));
    }
    let root = RngStream::new(spec.seed, "corpus");
    let images = (0..spec.n_images)
        .map(|i| gen_image(&mut root.derive(format!("image{i}")), spec.height, spec.width, spec.channels))
        .collect::<Result<Vec<_>>>()?;
    let prompts = gen_prompts(&mut root.derive("prompts"), spec.m_prompts);

    let mut split = root.derive("split");
    let mut order: Vec<usize> = (0..spec.n_images).collect();
    split.shuffle(&mut order);
    let n_held = heldout_count(spec.n_images, spec.heldout_fraction);
    let mut heldout_images = order[..n_held].to_vec();
    let mut train_images = order[n_held..].to_vec();

    let (mut train_prompts, mut heldout_prompts) = (Vec::new(), Vec::new());
    for task in Task::ALL {
        let mut ids: Vec<usize> = (0..prompts.len()).filter(|&i| prompts[i].task == task).collect();
        split.shuffle(&mut ids);
        let k = heldout_count(ids.len(), spec.heldout_fraction);
        heldout_prompts.extend_from_slice(&ids[..k]);
        train_prompts.extend_from_slice(&ids[k..]);
    }
    for v in [&mut heldout_images, &mut train_images, &mut train_prompts, &mut heldout_prompts] {
        v.sort_unstable();
    }
    AttackCorpus::new(images, prompts, train_images, heldout_images, train_prompts, heldout_prompts)
}
