//! Rasterisation into 8-bit frames, bouncing-ball distractors and ASCII
//! PGM/PPM dumps.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Rgb = [u8; 3];

pub const BACKGROUND: Rgb = [28, 30, 36];

/// Distractor colours, chosen away from every task body colour.
const BALL_COLOURS: [Rgb; 6] = [
    [60, 150, 230],
    [200, 70, 170],
    [90, 210, 110],
    [150, 110, 240],
    [60, 200, 200],
    [170, 170, 170],
];

/// Maps world coordinates (y up) to pixel centres of a square canvas.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub centre: [f64; 2],
    pub half_extent: f64,
}

/// RGB canvas with pixel values in `0..=254`, so that `v / 255 < 1`.
#[derive(Debug, Clone)]
pub struct Canvas {
    size: usize,
    pixels: Vec<Rgb>,
    view: View,
}

impl Canvas {
    pub fn new(size: usize, view: View) -> Self {
        Canvas {
            size,
            pixels: vec![BACKGROUND; size * size],
            view,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// World position of the centre of pixel `(row, col)`.
    fn world(&self, row: usize, col: usize) -> [f64; 2] {
        let s = self.size as f64;
        let u = (col as f64 + 0.5) / s * 2.0 - 1.0;
        let v = 1.0 - (row as f64 + 0.5) / s * 2.0;
        [
            self.view.centre[0] + u * self.view.half_extent,
            self.view.centre[1] + v * self.view.half_extent,
        ]
    }

    fn fill(&mut self, colour: Rgb, inside: impl Fn([f64; 2]) -> bool) {
        for row in 0..self.size {
            for col in 0..self.size {
                if inside(self.world(row, col)) {
                    self.pixels[row * self.size + col] = clamp_colour(colour);
                }
            }
        }
    }

    pub fn disc(&mut self, centre: [f64; 2], radius: f64, colour: Rgb) {
        self.fill(colour, |p| {
            let (dx, dy) = (p[0] - centre[0], p[1] - centre[1]);
            dx * dx + dy * dy <= radius * radius
        });
    }

    /// Thick line segment (a capsule) of half-width `half_width`.
    pub fn segment(&mut self, a: [f64; 2], b: [f64; 2], half_width: f64, colour: Rgb) {
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        self.fill(colour, |p| {
            let t = if len2 > 0.0 {
                (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (dx, dy) = (p[0] - a[0] - t * d[0], p[1] - a[1] - t * d[1]);
            dx * dx + dy * dy <= half_width * half_width
        });
    }

    pub fn rect(&mut self, centre: [f64; 2], half: [f64; 2], colour: Rgb) {
        self.fill(colour, |p| {
            (p[0] - centre[0]).abs() <= half[0] && (p[1] - centre[1]).abs() <= half[1]
        });
    }

    /// Disc given in pixel coordinates (column, row from the top left).
    pub fn pixel_disc(&mut self, centre: [f64; 2], radius: f64, colour: Rgb) {
        let colour = clamp_colour(colour);
        for row in 0..self.size {
            for col in 0..self.size {
                let dx = col as f64 + 0.5 - centre[0];
                let dy = row as f64 + 0.5 - centre[1];
                if dx * dx + dy * dy <= radius * radius {
                    self.pixels[row * self.size + col] = colour;
                }
            }
        }
    }

    /// Channel-major `[3, H, W]` or `[1, H, W]` bytes.
    pub fn to_chw(&self, grayscale: bool) -> Vec<u8> {
        if grayscale {
            return self.pixels.iter().map(|&c| luminance(c)).collect();
        }
        let n = self.pixels.len();
        let mut out = vec![0u8; 3 * n];
        for (i, c) in self.pixels.iter().enumerate() {
            for ch in 0..3 {
                out[ch * n + i] = c[ch];
            }
        }
        out
    }
}

fn clamp_colour(c: Rgb) -> Rgb {
    c.map(|v| v.min(254))
}

fn luminance(c: Rgb) -> u8 {
    let y = 0.299 * f64::from(c[0]) + 0.587 * f64::from(c[1]) + 0.114 * f64::from(c[2]);
    (y.round() as u8).min(254)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    pub count: usize,
    /// Radius in pixels.
    pub radius: f64,
    /// Speed in pixels per rendered frame.
    pub speed: f64,
}

impl Default for DistractorSpec {
    fn default() -> Self {
        DistractorSpec {
            count: 3,
            radius: 3.0,
            speed: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub radius: f64,
    pub colour: Rgb,
}

/// Balls bouncing elastically off the frame and each other. Their motion
/// never depends on the agent.
#[derive(Debug, Clone, PartialEq)]
pub struct DistractorField {
    pub balls: Vec<Ball>,
    size: f64,
}

impl DistractorField {
    pub fn new(spec: &DistractorSpec, size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64;
        let r = spec.radius.min(s / 4.0);
        let balls = (0..spec.count)
            .map(|i| {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Ball {
                    pos: [rng.random_range(r..s - r), rng.random_range(r..s - r)],
                    vel: [spec.speed * angle.cos(), spec.speed * angle.sin()],
                    radius: r,
                    colour: BALL_COLOURS[i % BALL_COLOURS.len()],
                }
            })
            .collect();
        DistractorField { balls, size: s }
    }

    pub fn advance(&mut self) {
        for b in &mut self.balls {
            for k in 0..2 {
                b.pos[k] += b.vel[k];
                let (lo, hi) = (b.radius, self.size - b.radius);
                if b.pos[k] < lo {
                    b.pos[k] = 2.0 * lo - b.pos[k];
                    b.vel[k] = b.vel[k].abs();
                } else if b.pos[k] > hi {
                    b.pos[k] = 2.0 * hi - b.pos[k];
                    b.vel[k] = -b.vel[k].abs();
                }
                b.pos[k] = b.pos[k].clamp(lo, hi);
            }
        }
        // Equal-mass elastic collisions: swap velocity components along the
        // line of centres for approaching pairs.
        let n = self.balls.len();
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&self.balls[i], &self.balls[j]);
                let d = [b.pos[0] - a.pos[0], b.pos[1] - a.pos[1]];
                let dist2 = d[0] * d[0] + d[1] * d[1];
                let reach = a.radius + b.radius;
                if dist2 == 0.0 || dist2 > reach * reach {
                    continue;
                }
                let rel = [a.vel[0] - b.vel[0], a.vel[1] - b.vel[1]];
                let approach = (rel[0] * d[0] + rel[1] * d[1]) / dist2;
                if approach <= 0.0 {
                    continue;
                }
                for k in 0..2 {
                    self.balls[i].vel[k] -= approach * d[k];
                    self.balls[j].vel[k] += approach * d[k];
                }
            }
        }
    }

    pub fn draw(&self, canvas: &mut Canvas) {
        for b in &self.balls {
            canvas.pixel_disc(b.pos, b.radius, b.colour);
        }
    }
}

/// ASCII PGM (`channels == 1`) or PPM (`channels == 3`) for one `[C, H, W]` frame.
pub fn to_netpbm(frame: &[u8], channels: usize, size: usize) -> String {
    let n = size * size;
    assert_eq!(frame.len(), channels * n, "frame length does not match [C, H, W]");
    let mut s = String::new();
    let magic = if channels == 1 { "P2" } else { "P3" };
    writeln!(s, "{magic}\n{size} {size}\n255").unwrap();
    for row in 0..size {
        let line: Vec<String> = (0..size)
            .flat_map(|col| {
                let i = row * size + col;
                (0..channels).map(move |c| frame[c * n + i].to_string())
            })
            .collect();
        writeln!(s, "{}", line.join(" ")).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn balls_stay_inside_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = DistractorSpec {
            count: 5,
            radius: 3.0,
            speed: 2.3,
        };
        let mut f = DistractorField::new(&spec, 32, &mut rng);
        for _ in 0..5000 {
            f.advance();
            for b in &f.balls {
                assert!(b.pos.iter().all(|&p| p >= b.radius && p <= 32.0 - b.radius));
            }
        }
    }

    #[test]
    fn collisions_conserve_momentum_and_energy() {
        let mut f = DistractorField {
            balls: vec![
                Ball {
                    pos: [10.0, 16.0],
                    vel: [1.0, 0.2],
                    radius: 3.0,
                    colour: BALL_COLOURS[0],
                },
                Ball {
                    pos: [14.5, 16.5],
                    vel: [-0.5, 0.0],
                    radius: 3.0,
                    colour: BALL_COLOURS[1],
                },
            ],
            size: 32.0,
        };
        let p0 = [f.balls[0].vel[0] + f.balls[1].vel[0], f.balls[0].vel[1] + f.balls[1].vel[1]];
        let e = |f: &DistractorField| f.balls.iter().map(|b| b.vel[0].powi(2) + b.vel[1].powi(2)).sum::<f64>();
        let e0 = e(&f);
        f.advance();
        let p1 = [f.balls[0].vel[0] + f.balls[1].vel[0], f.balls[0].vel[1] + f.balls[1].vel[1]];
        assert!((p0[0] - p1[0]).abs() < 1e-12 && (p0[1] - p1[1]).abs() < 1e-12);
        assert!((e0 - e(&f)).abs() < 1e-12);
        assert!(f.balls[0].vel[0] < 1.0);
    }

    #[test]
    fn netpbm_headers() {
        let ppm = to_netpbm(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12], 3, 2);
        assert!(ppm.starts_with("P3\n2 2\n255\n1 5 9 2 6 10\n"));
        let pgm = to_netpbm(&[0, 254, 7, 9], 1, 2);
        assert_eq!(pgm, "P2\n2 2\n255\n0 254\n7 9\n");
    }

    #[test]
    fn pixel_values_never_reach_255() {
        let mut c = Canvas::new(4, View { centre: [0.0, 0.0], half_extent: 1.0 });
        c.disc([0.0, 0.0], 2.0, [255, 255, 255]);
        assert!(c.to_chw(false).iter().all(|&v| v == 254));
        assert!(c.to_chw(true).iter().all(|&v| v == 254));
    }
}
