//! Procedural sequence rendering.

use super::spec::{WorldSpec, MAX_SCALE, MIN_SCALE};
use crate::error::Result;
use crate::geom::BBox;
use crate::image::{gaussian_blur, Frame};
use crate::rng::Rng;

/// Sequence-level attribute flags.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Attributes {
    pub occlusion: bool,
    pub scale_change: bool,
    pub blur: bool,
    pub distractor: bool,
}

impl Attributes {
    pub fn from_spec(spec: &WorldSpec) -> Self {
        Attributes {
            occlusion: spec.occlusion.is_some(),
            scale_change: spec.scale_walk > 0.0,
            blur: spec.blur > 0.0,
            distractor: spec.distractors > 0,
        }
    }

    pub const NAMES: [&'static str; 4] = ["occlusion", "scale_change", "blur", "distractor"];

    pub fn flags(&self) -> [bool; 4] {
        [
            self.occlusion,
            self.scale_change,
            self.blur,
            self.distractor,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSequence {
    pub name: String,
    pub frames: Vec<Frame>,
    /// One ground-truth box per frame.
    pub boxes: Vec<BBox>,
    pub attributes: Attributes,
    /// Occluder placement per frame, when known.
    pub occluders: Vec<Option<BBox>>,
    pub spec: Option<WorldSpec>,
}

impl AnnotatedSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

type Rgb = [f64; 3];

fn lerp3(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn random_color(rng: &mut Rng) -> Rgb {
    [rng.uniform(), rng.uniform(), rng.uniform()]
}

fn dist(a: Rgb, b: Rgb) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
#[derive(Clone, Debug)]
struct ValueNoise {
    gx: usize,
    gy: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(gx: usize, gy: usize, rng: &mut Rng) -> Self {
        ValueNoise {
            gx,
            gy,
            lattice: (0..gx * gy).map(|_| rng.uniform()).collect(),
        }
    }

    /// `u, v` in lattice units, clamped to the lattice.
    fn sample(&self, u: f64, v: f64) -> f64 {
        let u = u.clamp(0.0, (self.gx - 1) as f64);
        let v = v.clamp(0.0, (self.gy - 1) as f64);
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        let (i1, j1) = ((i + 1).min(self.gx - 1), (j + 1).min(self.gy - 1));
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tu, tv) = (s(u - i as f64), s(v - j as f64));
        let at = |a: usize, b: usize| self.lattice[b * self.gx + a];
        let top = at(i, j) * (1.0 - tu) + at(i1, j) * tu;
        let bot = at(i, j1) * (1.0 - tu) + at(i1, j1) * tu;
        top * (1.0 - tv) + bot * tv
    }
}

/// Two-color noise texture in object-normalized coordinates.
#[derive(Clone, Debug)]
struct Texture {
    a: Rgb,
    b: Rgb,
    noise: ValueNoise,
}

impl Texture {
    fn new(a: Rgb, b: Rgb, cells: usize, rng: &mut Rng) -> Self {
        Texture {
            a,
            b,
            noise: ValueNoise::new(cells + 1, cells + 1, rng),
        }
    }

    /// `u, v` in `[0, 1]` across the object.
    fn color(&self, u: f64, v: f64, a: Rgb, b: Rgb) -> Rgb {
        let cells = (self.noise.gx - 1) as f64;
        lerp3(a, b, self.noise.sample(u * cells, v * cells))
    }
}

/// Random-walk motion with reflection at the frame border.
#[derive(Clone, Debug)]
struct Mover {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    scale: f64,
}

impl Mover {
    fn spawn(w: f64, h: f64, spec: &WorldSpec, rng: &mut Rng) -> Self {
        let mx = w * MAX_SCALE / 2.0;
        let my = h * MAX_SCALE / 2.0;
        Mover {
            cx: rng.uniform_in(mx, spec.width as f64 - mx),
            cy: rng.uniform_in(my, spec.height as f64 - my),
            vx: 0.0,
            vy: 0.0,
            scale: 1.0,
        }
    }

    fn advance(&mut self, w: f64, h: f64, spec: &WorldSpec, rng: &mut Rng) {
        let (nx, ny, ns) = (rng.normal(), rng.normal(), rng.normal());
        if spec.max_speed > 0.0 {
            self.vx += spec.accel * nx;
            self.vy += spec.accel * ny;
            let speed = self.vx.hypot(self.vy);
            if speed > spec.max_speed {
                self.vx *= spec.max_speed / speed;
                self.vy *= spec.max_speed / speed;
            }
        }
        if spec.scale_walk > 0.0 {
            self.scale = (self.scale * (spec.scale_walk * ns).exp()).clamp(MIN_SCALE, MAX_SCALE);
        }
        let hw = w * self.scale / 2.0;
        let hh = h * self.scale / 2.0;
        self.cx += self.vx;
        self.cy += self.vy;
        let (fw, fh) = (spec.width as f64, spec.height as f64);
        if self.cx - hw < 0.0 {
            self.cx = 2.0 * hw - self.cx;
            self.vx = self.vx.abs();
        }
        if self.cx + hw > fw {
            self.cx = 2.0 * (fw - hw) - self.cx;
            self.vx = -self.vx.abs();
        }
        if self.cy - hh < 0.0 {
            self.cy = 2.0 * hh - self.cy;
            self.vy = self.vy.abs();
        }
        if self.cy + hh > fh {
            self.cy = 2.0 * (fh - hh) - self.cy;
            self.vy = -self.vy.abs();
        }
        self.cx = self.cx.clamp(hw, fw - hw);
        self.cy = self.cy.clamp(hh, fh - hh);
    }

    fn bbox(&self, w: f64, h: f64) -> BBox {
        BBox::from_center(self.cx, self.cy, w * self.scale, h * self.scale)
    }
}

/// Fills the ellipse inscribed in `b` with a texture.
fn draw_ellipse(buf: &mut [f64], spec: &WorldSpec, b: &BBox, tex: &Texture, a: Rgb, c: Rgb) {
    let (w, h) = (spec.width as i64, spec.height as i64);
    let x0 = (b.x.floor() as i64).max(0);
    let x1 = ((b.x + b.w).ceil() as i64).min(w);
    let y0 = (b.y.floor() as i64).max(0);
    let y1 = ((b.y + b.h).ceil() as i64).min(h);
    let (cx, cy) = b.center();
    for y in y0..y1 {
        for x in x0..x1 {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let dx = (px - cx) / (b.w / 2.0);
            let dy = (py - cy) / (b.h / 2.0);
            if dx * dx + dy * dy > 1.0 {
                continue;
            }
            let col = tex.color((px - b.x) / b.w, (py - b.y) / b.h, a, c);
            buf[((y * w + x) * 3) as usize..][..3].copy_from_slice(&col);
        }
    }
}

fn fill_rect(buf: &mut [f64], spec: &WorldSpec, b: &BBox, tex: &Texture) {
    let (w, h) = (spec.width as i64, spec.height as i64);
    let x0 = (b.x.round() as i64).max(0);
    let x1 = ((b.x + b.w).round() as i64).min(w);
    let y0 = (b.y.round() as i64).max(0);
    let y1 = ((b.y + b.h).round() as i64).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            let col = tex.color(
                (x as f64 + 0.5 - b.x) / b.w,
                (y as f64 + 0.5 - b.y) / b.h,
                tex.a,
                tex.b,
            );
            buf[((y * w + x) * 3) as usize..][..3].copy_from_slice(&col);
        }
    }
}

/// Horizontal offset of the occluder relative to the target, as a
/// fraction of the target width. Same-size boxes overlap with IoU 2/3.
pub const OCCLUDER_OFFSET: f64 = 0.2;

/// Renders the sequence described by `spec`. Pure function of `spec`.
pub fn generate(spec: &WorldSpec) -> Result<AnnotatedSequence> {
    generate_named(spec, format!("synthetic-{}", spec.seed))
}

pub fn generate_named(spec: &WorldSpec, name: String) -> Result<AnnotatedSequence> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut rng_look = root.fork(1);
    let mut rng_target = root.fork(2);
    let mut rng_distract = root.fork(3);

    let bg_a = random_color(&mut rng_look);
    let bg_b = lerp3(bg_a, random_color(&mut rng_look), 0.5);
    let bg_mean = lerp3(bg_a, bg_b, 0.5);
    let mut tg_a = random_color(&mut rng_look);
    for _ in 0..16 {
        if dist(tg_a, bg_mean) >= 0.35 {
            break;
        }
        tg_a = random_color(&mut rng_look);
    }
    let tg_b = lerp3(tg_a, random_color(&mut rng_look), 0.6);
    let alt_a = random_color(&mut rng_look);
    let alt_b = random_color(&mut rng_look);

    let (fw, fh) = (spec.width, spec.height);
    let bg_noise = ValueNoise::new(fw / 16 + 2, fh / 16 + 2, &mut rng_look);
    let fine = ValueNoise::new(fw / 5 + 2, fh / 5 + 2, &mut rng_look);
    let mut background = vec![0.0; fw * fh * 3];
    for y in 0..fh {
        for x in 0..fw {
            let n = 0.7 * bg_noise.sample(x as f64 / 16.0, y as f64 / 16.0)
                + 0.3 * fine.sample(x as f64 / 5.0, y as f64 / 5.0);
            background[(y * fw + x) * 3..][..3].copy_from_slice(&lerp3(bg_a, bg_b, n));
        }
    }
    let target_tex = Texture::new(tg_a, tg_b, 3, &mut rng_look);
    let occluder_tex = Texture::new(lerp3(bg_b, [0.5; 3], 0.3), bg_a, 2, &mut rng_look);

    let (tw, th) = (spec.target_w, spec.target_h);
    let mut target = Mover::spawn(tw, th, spec, &mut rng_target);
    let mut distractors: Vec<(Mover, Texture, f64, f64)> = (0..spec.distractors)
        .map(|_| {
            let s = rng_distract.uniform_in(0.8, 1.2);
            let (dw, dh) = (tw * s, th * s);
            let a = lerp3(bg_mean, tg_a, spec.similarity);
            let b = lerp3(
                lerp3(bg_a, bg_b, rng_distract.uniform()),
                tg_b,
                spec.similarity,
            );
            let tex = Texture::new(a, b, 3, &mut rng_distract);
            (Mover::spawn(dw, dh, spec, &mut rng_distract), tex, dw, dh)
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.length);
    let mut boxes = Vec::with_capacity(spec.length);
    let mut occluders = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        if t > 0 {
            target.advance(tw, th, spec, &mut rng_target);
            for (m, _, dw, dh) in &mut distractors {
                m.advance(*dw, *dh, spec, &mut rng_distract);
            }
        }
        let mut buf = background.clone();
        for (m, tex, dw, dh) in &distractors {
            draw_ellipse(&mut buf, spec, &m.bbox(*dw, *dh), tex, tex.a, tex.b);
        }
        let tb = target.bbox(tw, th);
        let k = (spec.drift * t as f64).min(1.0);
        draw_ellipse(
            &mut buf,
            spec,
            &tb,
            &target_tex,
            lerp3(tg_a, alt_a, k),
            lerp3(tg_b, alt_b, k),
        );
        let occ = match spec.occlusion {
            Some((a, b)) if (a..=b).contains(&t) => {
                let ob = BBox::new(tb.x + OCCLUDER_OFFSET * tb.w, tb.y, tb.w, tb.h);
                fill_rect(&mut buf, spec, &ob, &occluder_tex);
                Some(ob)
            }
            _ => None,
        };
        gaussian_blur(&mut buf, fh, fw, 3, spec.blur);
        if spec.noise > 0.0 {
            let mut rn = root.fork(1000 + t as u64);
            for v in &mut buf {
                *v += spec.noise * rn.normal();
            }
        }
        frames.push(Frame::from_unit(fw, fh, &buf)?);
        boxes.push(tb);
        occluders.push(occ);
    }
    Ok(AnnotatedSequence {
        name,
        frames,
        boxes,
        attributes: Attributes::from_spec(spec),
        occluders,
        spec: Some(spec.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_world_repeats_the_first_frame() {
        let spec = WorldSpec {
            max_speed: 0.0,
            drift: 0.0,
            distractors: 0,
            length: 12,
            seed: 3,
            ..WorldSpec::default()
        };
        let s = generate(&spec).unwrap();
        assert!(s.frames.iter().all(|f| *f == s.frames[0]));
        assert!(s.boxes.iter().all(|b| *b == s.boxes[0]));
    }

    #[test]
    fn same_seed_same_sequence() {
        let spec = WorldSpec {
            length: 20,
            distractors: 2,
            similarity: 0.5,
            scale_walk: 0.02,
            noise: 0.02,
            blur: 0.7,
            seed: 17,
            ..WorldSpec::default()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = WorldSpec { seed: 18, ..spec };
        assert_ne!(
            generate(&other).unwrap().frames[0],
            generate(&spec).unwrap().frames[0]
        );
    }

    #[test]
    fn occluder_overlaps_exactly_during_schedule() {
        let spec = WorldSpec {
            length: 70,
            occlusion: Some((50, 60)),
            seed: 5,
            ..WorldSpec::default()
        };
        let s = generate(&spec).unwrap();
        for (t, (b, o)) in s.boxes.iter().zip(&s.occluders).enumerate() {
            let iou = o.map_or(0.0, |o| o.iou(b));
            assert_eq!(iou > 0.5, (50..=60).contains(&t), "frame {t}: iou {iou}");
        }
    }

    #[test]
    fn boxes_stay_inside_and_large_enough() {
        let spec = WorldSpec {
            length: 300,
            max_speed: 4.0,
            accel: 2.0,
            scale_walk: 0.05,
            seed: 23,
            ..WorldSpec::default()
        };
        let s = generate(&spec).unwrap();
        for b in &s.boxes {
            assert!(b.x >= -1e-9 && b.y >= -1e-9);
            assert!(b.x + b.w <= 128.0 + 1e-9 && b.y + b.h <= 128.0 + 1e-9);
            assert!(b.w >= 4.0 && b.h >= 4.0);
        }
    }
}
