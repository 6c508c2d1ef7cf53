use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, VideoBatch};

pub const MIN_EXTENT: usize = 16;
const GLYPH: usize = 5;

const GLYPHS: [[&str; GLYPH]; 6] = [
    ["#####", "#####", "#####", "#####", "#####"],
    ["#####", "#...#", "#...#", "#...#", "#####"],
    ["..#..", "..#..", "#####", "..#..", "..#.."],
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    ["#####", "..#..", "..#..", "..#..", "..#.."],
    ["..#..", ".#.#.", "#...#", ".#.#.", "..#.."],
];

/// Per-frame displacement `(dy, dx)` of each motion class.
const MOTIONS: [(isize, isize); 8] = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1)];

pub const MAX_SHAPES: usize = GLYPHS.len();
pub const MAX_MOTIONS: usize = MOTIONS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Shape,
    Motion,
    Joint,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shape" => Ok(Task::Shape),
            "motion" => Ok(Task::Motion),
            "joint" => Ok(Task::Joint),
            _ => Err(Error::config(format!("unknown task {s:?}; expected shape, motion or joint"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Shape => "shape",
            Task::Motion => "motion",
            Task::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovingShapesConfig {
    pub n: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_shapes: usize,
    pub num_motions: usize,
    /// Standard deviation of additive background noise.
    #[serde(default)]
    pub noise: f64,
}

impl Default for MovingShapesConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            frames: 8,
            height: 32,
            width: 32,
            num_shapes: 4,
            num_motions: 4,
            noise: 0.0,
        }
    }
}

/// Single-channel clips of one glyph translating at one pixel per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingShapesDataset {
    /// `(n, 1, T, H, W)`.
    pub clips: VideoBatch<f32>,
    pub shape_labels: Vec<usize>,
    pub motion_labels: Vec<usize>,
    /// `shape * num_motions + motion`.
    pub joint_labels: Vec<usize>,
    pub num_shapes: usize,
    pub num_motions: usize,
    pub seed: u64,
}

fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn gen_moving_shapes(seed: u64, cfg: &MovingShapesConfig) -> Result<MovingShapesDataset> {
    let MovingShapesConfig {
        n,
        frames: t,
        height: h,
        width: w,
        num_shapes,
        num_motions,
        noise,
    } = *cfg;
    if t < 2 {
        return Err(Error::config("motion classes need at least two frames"));
    }
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(Error::config(format!("frames must be at least {MIN_EXTENT}x{MIN_EXTENT}, got {h}x{w}")));
    }
    let travel = GLYPH + t - 1;
    if travel > h || travel > w {
        return Err(Error::config(format!(
            "a {GLYPH}-pixel glyph moving for {t} frames does not fit in {h}x{w}"
        )));
    }
    if !(1..=MAX_SHAPES).contains(&num_shapes) || !(1..=MAX_MOTIONS).contains(&num_motions) {
        return Err(Error::config(format!(
            "need 1..={MAX_SHAPES} shapes and 1..={MAX_MOTIONS} motions"
        )));
    }
    if n == 0 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config("need at least one clip and a finite, non-negative noise level"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = num_shapes * num_motions;
    let mut joint: Vec<usize> = (0..n).map(|i| i % classes).collect();
    joint.shuffle(&mut rng);

    let frame = h * w;
    let mut data = vec![0f32; n * t * frame];
    for (clip, &label) in data.chunks_exact_mut(t * frame).zip(&joint) {
        let (shape, motion) = (label / num_motions, label % num_motions);
        let (dy, dx) = MOTIONS[motion];
        let mut start = |extent: usize, d: isize| {
            let span = extent - travel;
            let base = rng.gen_range(0..=span);
            if d < 0 {
                base + t - 1
            } else {
                base
            }
        };
        let (y0, x0) = (start(h, dy), start(w, dx));
        let intensity = rng.gen_range(0.6..1.0) as f32;
        for (f, img) in clip.chunks_exact_mut(frame).enumerate() {
            if noise > 0.0 {
                for v in img.iter_mut() {
                    *v = (noise * normal(&mut rng)) as f32;
                }
            }
            let oy = (y0 as isize + dy * f as isize) as usize;
            let ox = (x0 as isize + dx * f as isize) as usize;
            for (r, row) in GLYPHS[shape].iter().enumerate() {
                for (c, ch) in row.bytes().enumerate() {
                    if ch == b'#' {
                        img[(oy + r) * w + ox + c] += intensity;
                    }
                }
            }
        }
    }
    let clips = VideoBatch::new(Tensor::from_vec(&[n, 1, t, h, w], data)?)?;
    Ok(MovingShapesDataset {
        clips,
        shape_labels: joint.iter().map(|l| l / num_motions).collect(),
        motion_labels: joint.iter().map(|l| l % num_motions).collect(),
        joint_labels: joint,
        num_shapes,
        num_motions,
        seed,
    })
}

impl MovingShapesDataset {
    pub fn len(&self) -> usize {
        self.joint_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joint_labels.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.clips.frames()
    }

    pub fn labels(&self, task: Task) -> &[usize] {
        match task {
            Task::Shape => &self.shape_labels,
            Task::Motion => &self.motion_labels,
            Task::Joint => &self.joint_labels,
        }
    }

    pub fn num_classes(&self, task: Task) -> usize {
        match task {
            Task::Shape => self.num_shapes,
            Task::Motion => self.num_motions,
            Task::Joint => self.num_shapes * self.num_motions,
        }
    }

    /// One frame per clip as `(n, 1, H, W)` images; clip `i` contributes
    /// frame `i mod T`.
    pub fn images(&self) -> Tensor<f32> {
        let (t, h, w) = (self.clips.frames(), self.clips.height(), self.clips.width());
        let frame = h * w;
        let mut out = Vec::with_capacity(self.len() * frame);
        for (i, clip) in self.clips.data().chunks_exact(t * frame).enumerate() {
            let f = i % t;
            out.extend_from_slice(&clip[f * frame..(f + 1) * frame]);
        }
        Tensor::from_vec(&[self.len(), 1, h, w], out).expect("consistent dims")
    }
}

/// Gathers rows `idx` of the leading axis, cast to `T`.
pub fn gather<T: Element>(x: &Tensor<f32>, idx: &[usize]) -> Tensor<T> {
    let row: usize = x.dims()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend(x.data()[i * row..(i + 1) * row].iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    let mut dims = x.dims().to_vec();
    dims[0] = idx.len();
    Tensor::from_vec(&dims, data).expect("consistent dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, t: usize) -> MovingShapesConfig {
        MovingShapesConfig {
            n,
            frames: t,
            height: 16,
            width: 16,
            ..Default::default()
        }
    }

    #[test]
    fn single_frame_rejected() {
        assert!(gen_moving_shapes(0, &cfg(10, 1)).is_err());
    }

    #[test]
    fn small_or_crowded_frames_rejected() {
        let mut c = cfg(10, 4);
        c.height = 15;
        assert!(gen_moving_shapes(0, &c).is_err());
        assert!(gen_moving_shapes(0, &cfg(10, 13)).is_err());
        assert!(gen_moving_shapes(0, &cfg(10, 12)).is_ok());
    }

    #[test]
    fn deterministic() {
        let mut c = cfg(50, 4);
        c.noise = 0.2;
        let a = gen_moving_shapes(9, &c).unwrap();
        let b = gen_moving_shapes(9, &c).unwrap();
        assert!(a.clips.bits_eq(&b.clips));
        assert_eq!(a.joint_labels, b.joint_labels);
        let other = gen_moving_shapes(10, &c).unwrap();
        assert!(!a.clips.bits_eq(&other.clips));
    }

    #[test]
    fn balanced_classes() {
        let d = gen_moving_shapes(3, &cfg(1000, 4)).unwrap();
        let mut counts = [0usize; 16];
        for &l in &d.joint_labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 62 || c == 63), "{counts:?}");
        assert_eq!(counts.iter().sum::<usize>(), 1000);
    }

    #[test]
    fn frame_zero_shows_the_glyph_and_motion_shifts_it() {
        let d = gen_moving_shapes(5, &cfg(16, 3)).unwrap();
        let frame = 256;
        for i in 0..16 {
            let clip = &d.clips.data()[i * 3 * frame..(i + 1) * 3 * frame];
            let lit = |f: usize| clip[f * frame..(f + 1) * frame].iter().filter(|&&v| v > 0.0).count();
            let expected = GLYPHS[d.shape_labels[i]].iter().flat_map(|r| r.bytes()).filter(|&b| b == b'#').count();
            assert_eq!(lit(0), expected);
            assert_eq!(lit(2), expected);
            let (dy, dx) = MOTIONS[d.motion_labels[i]];
            let centroid = |f: usize| {
                let (mut sy, mut sx, mut m) = (0.0, 0.0, 0.0);
                for (p, &v) in clip[f * frame..(f + 1) * frame].iter().enumerate() {
                    sy += (p / 16) as f64 * v as f64;
                    sx += (p % 16) as f64 * v as f64;
                    m += v as f64;
                }
                (sy / m, sx / m)
            };
            let (a, b) = (centroid(0), centroid(1));
            assert!(((b.0 - a.0) - dy as f64).abs() < 1e-4 && ((b.1 - a.1) - dx as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn images_pick_one_frame_per_clip() {
        let d = gen_moving_shapes(1, &cfg(6, 4)).unwrap();
        let imgs = d.images();
        assert_eq!(imgs.dims(), &[6, 1, 16, 16]);
        let g = gather::<f64>(&imgs, &[5, 0]);
        assert_eq!(g.dims(), &[2, 1, 16, 16]);
        assert_eq!(g.data()[0], imgs.data()[5 * 256] as f64);
    }
}
