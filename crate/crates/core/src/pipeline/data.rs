//! Procedural toy corpus: one coloured shape on a solid or gradient
//! background, with a caption that is a pure function of the scene.

use perco_tensor::Rng;

use super::image::Image;

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];

pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.75, 0.20]),
    ("blue", [0.15, 0.25, 0.90]),
    ("yellow", [0.95, 0.90, 0.10]),
    ("cyan", [0.10, 0.85, 0.90]),
    ("magenta", [0.85, 0.15, 0.80]),
    ("orange", [1.00, 0.55, 0.05]),
    ("white", [0.95, 0.95, 0.95]),
];

pub const GRADIENT_FLOOR: f32 = 0.45;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Solid,
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scene {
    pub shape: usize,
    pub fg: usize,
    pub bg: usize,
    pub background: Background,
    /// Centre and size as fractions of the image side.
    pub cx: f32,
    pub cy: f32,
    pub r: f32,
}

#[derive(Clone, Debug)]
pub struct ToyDatasetSpec {
    pub size: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            size: 64,
            count: 512,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub caption: String,
    /// Present for procedurally generated samples.
    pub scene: Option<Scene>,
}

pub fn caption(scene: &Scene) -> String {
    let style = match scene.background {
        Background::Solid => "",
        Background::Gradient => " gradient",
    };
    format!(
        "a {} {} on a {}{style} background",
        COLORS[scene.fg].0, SHAPES[scene.shape], COLORS[scene.bg].0
    )
}

pub fn random_scene(rng: &mut Rng) -> Scene {
    let shape = rng.below(SHAPES.len());
    let fg = rng.below(COLORS.len());
    let bg = (fg + 1 + rng.below(COLORS.len() - 1)) % COLORS.len();
    let background = if rng.bernoulli(0.5) { Background::Gradient } else { Background::Solid };
    let r = rng.uniform_range(0.14, 0.30) as f32;
    let margin = r + 0.04;
    let cx = rng.uniform_range(margin as f64, (1.0 - margin) as f64) as f32;
    let cy = rng.uniform_range(margin as f64, (1.0 - margin) as f64) as f32;
    Scene {
        shape,
        fg,
        bg,
        background,
        cx,
        cy,
        r,
    }
}

fn inside(scene: &Scene, x: f32, y: f32) -> bool {
    let (dx, dy) = (x - scene.cx, y - scene.cy);
    match scene.shape {
        0 => dx * dx + dy * dy <= scene.r * scene.r,
        1 => dx.abs() <= scene.r * 0.85 && dy.abs() <= scene.r * 0.85,
        _ => {
            // upright triangle with circumradius r, apex up (y grows downwards)
            let r = scene.r;
            let s3 = 3f32.sqrt();
            let v = [(0.0, -r), (r * s3 / 2.0, r / 2.0), (-r * s3 / 2.0, r / 2.0)];
            let edge = |a: (f32, f32), b: (f32, f32)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
            let (e0, e1, e2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
            (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
        }
    }
}

pub fn render(scene: &Scene, size: usize) -> Image {
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    let fg = COLORS[scene.fg].1;
    let bg = COLORS[scene.bg].1;
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32) / size as f32;
                    let y = (py as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32) / size as f32;
                    let col = if inside(scene, x, y) {
                        fg
                    } else {
                        let k = match scene.background {
                            Background::Solid => 1.0,
                            Background::Gradient => 1.0 - (1.0 - GRADIENT_FLOOR) * y,
                        };
                        bg.map(|c| c * k)
                    };
                    for c in 0..3 {
                        acc[c] += col[c];
                    }
                }
            }
            for c in 0..3 {
                data[c * plane + py * size + px] = (acc[c] / n).clamp(0.0, 1.0);
            }
        }
    }
    Image {
        width: size,
        height: size,
        data,
    }
}

/// Deterministic corpus; sample `i` uses its own stream of `seed`.
pub fn generate_dataset(spec: &ToyDatasetSpec) -> Vec<Sample> {
    let base = Rng::new(spec.seed);
    (0..spec.count)
        .map(|i| {
            let mut rng = base.fork(i as u64 + 1);
            let scene = random_scene(&mut rng);
            Sample {
                image: render(&scene, spec.size),
                caption: caption(&scene),
                scene: Some(scene),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_caption() {
        let s = Scene {
            shape: 0,
            fg: 0,
            bg: 2,
            background: Background::Solid,
            cx: 0.5,
            cy: 0.5,
            r: 0.2,
        };
        assert_eq!(caption(&s), "a red circle on a blue background");
        let g = Scene {
            background: Background::Gradient,
            ..s
        };
        assert_eq!(caption(&g), "a red circle on a blue gradient background");
    }

    #[test]
    fn gradient_runs_from_colour_to_floor() {
        let s = Scene {
            shape: 0,
            fg: 0,
            bg: 7,
            background: Background::Gradient,
            cx: 0.5,
            cy: 0.5,
            r: 0.01,
        };
        let img = render(&s, 64);
        assert!((img.pixel(0, 0, 0) - 0.95 * (1.0 - 0.55 * 0.5 / 64.0)).abs() < 0.01);
        assert!((img.pixel(0, 63, 0) - 0.95 * 0.45).abs() < 0.01);
    }
}
