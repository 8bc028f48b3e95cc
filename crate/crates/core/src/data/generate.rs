use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{Corner, Dataset, GeneratorConfig, LabeledImage, Mnist, MnistSplit, PixelBox, SampleMeta, Sign, Split, Task};

pub const ARROW_SIZE: usize = 15;

/// Arrow pointing at the top-left corner: a diagonal shaft with the head
/// along the first row and column.
const ARROW_TOP_LEFT: [&str; ARROW_SIZE] = [
    "#######........",
    "##.............",
    "#.#............",
    "#..#...........",
    "#...#..........",
    "#....#.........",
    "#.....#........",
    ".......#.......",
    "........#......",
    ".........#.....",
    "..........#....",
    "...........#...",
    "............#..",
    ".............#.",
    "..............#",
];

/// The arrow glyph pointing at `corner`, as `ARROW_SIZE` rows of flags.
pub fn arrow_stencil(corner: Corner) -> [[bool; ARROW_SIZE]; ARROW_SIZE] {
    let mut out = [[false; ARROW_SIZE]; ARROW_SIZE];
    let last = ARROW_SIZE - 1;
    for (r, row) in ARROW_TOP_LEFT.iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            if ch != b'#' {
                continue;
            }
            let (rr, cc) = match corner {
                Corner::TopLeft => (r, c),
                Corner::TopRight => (c, last - r),
                Corner::BottomRight => (last - r, last - c),
                Corner::BottomLeft => (last - c, r),
            };
            out[rr][cc] = true;
        }
    }
    out
}

const MAX_PLACEMENT_TRIES: usize = 1000;

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas {
            size,
            px: vec![0.0; size * size],
        }
    }

    /// Max-composites a `w`-wide block of `src` at `(x, y)`.
    fn paste_max(&mut self, src: &[f64], w: usize, x: usize, y: usize) {
        let h = src.len() / w;
        debug_assert!(x + w <= self.size && y + h <= self.size);
        for r in 0..h {
            let dst = &mut self.px[(y + r) * self.size + x..(y + r) * self.size + x + w];
            for (d, s) in dst.iter_mut().zip(&src[r * w..(r + 1) * w]) {
                *d = d.max(*s);
            }
        }
    }

    fn set(&mut self, x: usize, y: usize) {
        self.px[y * self.size + x] = 1.0;
    }

    /// Integer-factor mean pooling or, otherwise, corner-aligned bilinear resampling.
    fn resize(&self, out: usize) -> Tensor {
        let n = self.size;
        let data = if n.is_multiple_of(out) {
            let f = n / out;
            let norm = 1.0 / (f * f) as f64;
            let mut v = vec![0.0; out * out];
            for r in 0..out {
                for c in 0..out {
                    let mut s = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += self.px[(r * f + dy) * n + c * f + dx];
                        }
                    }
                    v[r * out + c] = s * norm;
                }
            }
            v
        } else {
            let ratio = (n - 1) as f64 / (out - 1).max(1) as f64;
            let coord = |i: usize| {
                let s = i as f64 * ratio;
                let i0 = (s.floor() as usize).min(n - 1);
                (i0, (i0 + 1).min(n - 1), s - i0 as f64)
            };
            let mut v = vec![0.0; out * out];
            for r in 0..out {
                let (r0, r1, fr) = coord(r);
                for c in 0..out {
                    let (c0, c1, fc) = coord(c);
                    let top = self.px[r0 * n + c0] * (1.0 - fc) + self.px[r0 * n + c1] * fc;
                    let bot = self.px[r1 * n + c0] * (1.0 - fc) + self.px[r1 * n + c1] * fc;
                    v[r * out + c] = (top * (1.0 - fr) + bot * fr).clamp(0.0, 1.0);
                }
            }
            v
        };
        Tensor::new(vec![out, out], data).expect("canvas pixels are finite")
    }
}

/// Uniform class, then a uniform image of that class.
fn random_digit<'a>(split: &'a MnistSplit, rng: &mut Rng) -> (u8, &'a [f64]) {
    let class = rng.below(10) as u8;
    let pool = split.of_class(class);
    (class, split.image(pool[rng.below(pool.len())]))
}

fn add_clutter(canvas: &mut Canvas, cfg: &GeneratorConfig, clutter: &MnistSplit, rng: &mut Rng) {
    let s = cfg.clutter_size;
    let mut crop = vec![0.0; s * s];
    for _ in 0..cfg.clutter_count {
        let img = clutter.image(rng.below(clutter.len()));
        let (cx, cy) = (rng.range_inclusive(0, 28 - s), rng.range_inclusive(0, 28 - s));
        for r in 0..s {
            crop[r * s..(r + 1) * s].copy_from_slice(&img[(cy + r) * 28 + cx..(cy + r) * 28 + cx + s]);
        }
        let (x, y) = (rng.range_inclusive(0, canvas.size - s), rng.range_inclusive(0, canvas.size - s));
        canvas.paste_max(&crop, s, x, y);
    }
}

fn finish(canvas: Canvas, cfg: &GeneratorConfig, labels: Vec<u8>, digits: Vec<PixelBox>, sign: Option<Sign>) -> LabeledImage {
    LabeledImage {
        pixels: canvas.resize(cfg.out_size),
        labels,
        meta: SampleMeta {
            scale: cfg.out_size as f64 / cfg.canvas as f64,
            digits,
            sign,
        },
    }
}

fn cluttered(cfg: &GeneratorConfig, digits: &MnistSplit, clutter: &MnistSplit, rng: &mut Rng) -> LabeledImage {
    let mut canvas = Canvas::new(cfg.canvas);
    let (label, img) = random_digit(digits, rng);
    let (x, y) = (rng.range_inclusive(0, cfg.canvas - 28), rng.range_inclusive(0, cfg.canvas - 28));
    canvas.paste_max(img, 28, x, y);
    add_clutter(&mut canvas, cfg, clutter, rng);
    finish(canvas, cfg, vec![label], vec![PixelBox::digit(x, y)], None)
}

fn corner_origin(corner: Corner, canvas: usize) -> (usize, usize) {
    let far = canvas - 28;
    match corner {
        Corner::TopLeft => (0, 0),
        Corner::TopRight => (far, 0),
        Corner::BottomLeft => (0, far),
        Corner::BottomRight => (far, far),
    }
}

fn arrow(cfg: &GeneratorConfig, digits: &MnistSplit, rng: &mut Rng) -> LabeledImage {
    let mut canvas = Canvas::new(cfg.canvas);
    let target = Corner::ALL[rng.below(4)];
    let others: Vec<Corner> = Corner::ALL.into_iter().filter(|&c| c != target).collect();
    let other = others[rng.below(3)];
    let (label, img) = random_digit(digits, rng);
    let (_, distractor) = random_digit(digits, rng);
    let (tx, ty) = corner_origin(target, cfg.canvas);
    let (ox, oy) = corner_origin(other, cfg.canvas);
    canvas.paste_max(img, 28, tx, ty);
    canvas.paste_max(distractor, 28, ox, oy);
    let at = (cfg.canvas - ARROW_SIZE) / 2;
    for (r, row) in arrow_stencil(target).iter().enumerate() {
        for (c, &on) in row.iter().enumerate() {
            if on {
                canvas.set(at + c, at + r);
            }
        }
    }
    let boxes = vec![PixelBox::digit(tx, ty), PixelBox::digit(ox, oy)];
    finish(canvas, cfg, vec![label], boxes, Some(Sign::Arrow { corner: target, x: at, y: at }))
}

/// Side of the rectangle drawn around the target digit.
const RECT_SIZE: usize = 32;

fn rect(cfg: &GeneratorConfig, digits: &MnistSplit, rng: &mut Rng) -> Result<LabeledImage> {
    let margin = (RECT_SIZE - 28) / 2;
    let (label, img) = random_digit(digits, rng);
    let (_, distractor) = random_digit(digits, rng);
    for _ in 0..MAX_PLACEMENT_TRIES {
        let tx = rng.range_inclusive(margin, cfg.canvas - 28 - margin);
        let ty = rng.range_inclusive(margin, cfg.canvas - 28 - margin);
        let frame = PixelBox {
            x: tx - margin,
            y: ty - margin,
            w: RECT_SIZE,
            h: RECT_SIZE,
        };
        let (ox, oy) = (rng.range_inclusive(0, cfg.canvas - 28), rng.range_inclusive(0, cfg.canvas - 28));
        if PixelBox::digit(ox, oy).intersects(&frame) {
            continue;
        }
        let mut canvas = Canvas::new(cfg.canvas);
        canvas.paste_max(img, 28, tx, ty);
        canvas.paste_max(distractor, 28, ox, oy);
        for i in 0..RECT_SIZE {
            canvas.set(frame.x + i, frame.y);
            canvas.set(frame.x + i, frame.y + RECT_SIZE - 1);
            canvas.set(frame.x, frame.y + i);
            canvas.set(frame.x + RECT_SIZE - 1, frame.y + i);
        }
        let boxes = vec![PixelBox::digit(tx, ty), PixelBox::digit(ox, oy)];
        let sign = Sign::Rect {
            x: frame.x,
            y: frame.y,
            size: RECT_SIZE,
        };
        return Ok(finish(canvas, cfg, vec![label], boxes, Some(sign)));
    }
    Err(Error::Generation(format!(
        "no non-overlapping rectangle placement after {MAX_PLACEMENT_TRIES} tries"
    )))
}

/// Offsets are drawn first, then the first digit is placed uniformly among
/// the positions that keep the whole chain on the canvas, so no draw is
/// ever rejected.
fn sequence(cfg: &GeneratorConfig, digits: &MnistSplit, clutter: &MnistSplit, rng: &mut Rng) -> Result<LabeledImage> {
    let mut offsets = [(0i64, 0i64); 2];
    for o in &mut offsets {
        let theta = rng.uniform(-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4);
        let step = cfg.step as f64;
        *o = ((step * theta.cos()).round() as i64, (step * theta.sin()).round() as i64);
    }
    let span = cfg.canvas as i64 - 28;
    let dx_total = offsets[0].0 + offsets[1].0;
    let ys = [0, offsets[0].1, offsets[0].1 + offsets[1].1];
    let (y_min, y_max) = (*ys.iter().min().unwrap(), *ys.iter().max().unwrap());
    if dx_total > span || y_max - y_min > span {
        return Err(Error::Generation(format!("digit chain {offsets:?} exceeds the canvas")));
    }
    let x0 = rng.range_inclusive(0, (span - dx_total) as usize) as i64;
    let y0 = rng.range_inclusive((-y_min) as usize, (span - y_max) as usize) as i64;

    let mut canvas = Canvas::new(cfg.canvas);
    let mut labels = Vec::with_capacity(3);
    let mut boxes = Vec::with_capacity(3);
    let (mut x, mut y) = (x0, y0);
    for k in 0..3 {
        if k > 0 {
            x += offsets[k - 1].0;
            y += offsets[k - 1].1;
        }
        let (label, img) = random_digit(digits, rng);
        canvas.paste_max(img, 28, x as usize, y as usize);
        labels.push(label);
        boxes.push(PixelBox::digit(x as usize, y as usize));
    }
    add_clutter(&mut canvas, cfg, clutter, rng);
    Ok(finish(canvas, cfg, labels, boxes, None))
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Test => 2,
    }
}

/// One sample, a pure function of `(cfg, split, index, mnist)`.
pub fn generate_sample(cfg: &GeneratorConfig, mnist: &Mnist, split: Split, index: usize) -> Result<LabeledImage> {
    let mut rng = Rng::new(cfg.seed).split(split_stream(split)).split(index as u64);
    let digits = match split {
        Split::Train => &mnist.train,
        Split::Test => &mnist.test,
    };
    let clutter = &mnist.train;
    match cfg.task {
        Task::Cluttered => Ok(cluttered(cfg, digits, clutter, &mut rng)),
        Task::Arrow => Ok(arrow(cfg, digits, &mut rng)),
        Task::Rect => rect(cfg, digits, &mut rng),
        Task::Sequence => sequence(cfg, digits, clutter, &mut rng),
    }
}

/// Generates the `split` part of the dataset described by `cfg`. Test
/// samples use MNIST test digits; clutter always comes from the training set.
pub fn generate(cfg: &GeneratorConfig, mnist: &Mnist, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.count(split))
        .map(|i| generate_sample(cfg, mnist, split, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        split,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencil_rotations_point_at_corners() {
        let last = ARROW_SIZE - 1;
        let tl = arrow_stencil(Corner::TopLeft);
        assert!(tl[0][0] && tl[0][6] && tl[6][0] && tl[last][last]);
        let tr = arrow_stencil(Corner::TopRight);
        assert!(tr[0][last] && tr[0][last - 6] && tr[6][last] && tr[last][0]);
        let br = arrow_stencil(Corner::BottomRight);
        assert!(br[last][last] && br[last][last - 6] && br[0][0]);
        let bl = arrow_stencil(Corner::BottomLeft);
        assert!(bl[last][0] && bl[last][6] && bl[0][last]);
        let count = |s: [[bool; ARROW_SIZE]; ARROW_SIZE]| s.iter().flatten().filter(|&&b| b).count();
        for c in Corner::ALL {
            assert_eq!(count(arrow_stencil(c)), count(tl));
        }
    }

    #[test]
    fn mean_pool_and_bilinear_resize() {
        let mut c = Canvas::new(4);
        c.px = (0..16).map(|i| i as f64 / 15.0).collect();
        let t = c.resize(2);
        assert!((t.data()[0] - (0.0 + 1.0 + 4.0 + 5.0) / 60.0).abs() < 1e-15);
        // corner-aligned: corners are copied exactly, the ramp stays linear
        let mut c = Canvas::new(10);
        c.px = (0..100).map(|i| (i % 10) as f64 / 9.0).collect();
        let t = c.resize(4);
        for r in 0..4 {
            for q in 0..4 {
                assert!((t.get(&[r, q]) - q as f64 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn paste_is_max_composite() {
        let mut c = Canvas::new(3);
        c.paste_max(&[0.5, 1.0, 0.2, 0.0], 2, 1, 1);
        c.paste_max(&[0.7, 0.1, 0.1, 0.9], 2, 1, 1);
        assert_eq!(c.px, vec![0.0, 0.0, 0.0, 0.0, 0.7, 1.0, 0.0, 0.2, 0.9]);
    }
}
