//! Synthetic clips whose labels can only be read from frame order.
//!
//! `direction4`: a textured bright patch slides 1 or 2 px per frame left,
//! right, up or down over a static random background. Motion wraps around
//! the frame edges and the start position is uniform, so in every frame the
//! patch position and the pixel distribution are independent of the class,
//! and reversing a clip in time gives a valid clip of the opposite direction.
//!
//! `appearance-vs-motion`: a coherent `direction4` clip (label 0) or the same
//! frames in a shuffled order (label 1), so every frame set is shared.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{rng, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor5};

pub const PATCH: usize = 6;
pub const BACKGROUND_MAX: f64 = 0.5;
pub const PATCH_RANGE: (f64, f64) = (0.6, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Direction4,
    AppearanceVsMotion,
}

impl Task {
    pub fn classes(self) -> usize {
        match self {
            Self::Direction4 => 4,
            Self::AppearanceVsMotion => 2,
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direction4" => Ok(Self::Direction4),
            "appearance-vs-motion" => Ok(Self::AppearanceVsMotion),
            other => Err(Error::ConfigInvalid(format!("unknown task `{other}`"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Direction4 => "direction4",
            Self::AppearanceVsMotion => "appearance-vs-motion",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Direction classes of `direction4`.
pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
pub const UP: usize = 2;
pub const DOWN: usize = 3;

/// Label of the time-reversed clip.
pub fn reversed_direction(label: usize) -> usize {
    match label {
        LEFT => RIGHT,
        RIGHT => LEFT,
        UP => DOWN,
        _ => UP,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task: Task,
    pub frames: usize,
    pub size: usize,
}

impl SyntheticTask {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            frames: 8,
            size: 32,
        }
    }

    pub fn clip_dims(&self) -> Dims {
        Dims::new(1, 1, self.frames, self.size, self.size)
    }

    fn validate(&self) -> Result<()> {
        if self.frames < 3 || self.size < 2 * PATCH {
            return Err(Error::ConfigInvalid(format!(
                "{}x{}x{} clips cannot hold a moving {PATCH}px patch",
                self.frames, self.size, self.size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub clips: Vec<Tensor5<S>>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Stacks the clips at `idx` into one batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor5<S>, Vec<usize>)> {
        let items: Vec<&Tensor5<S>> = idx.iter().map(|&i| &self.clips[i]).collect();
        Ok((Tensor5::stack_batch(&items)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// One `direction4` clip moving in `label`'s direction.
pub fn direction_clip<S: Scalar>(t: &SyntheticTask, label: usize, r: &mut SeededRng) -> Tensor5<S> {
    let (f, n) = (t.frames, t.size);
    let v = r.gen_range(1..=2usize);
    let (top, left) = (r.gen_range(0..n), r.gen_range(0..n));
    let background: Vec<f64> = (0..n * n).map(|_| r.gen_range(0.0..BACKGROUND_MAX)).collect();
    let texture: Vec<f64> = (0..PATCH * PATCH).map(|_| r.gen_range(PATCH_RANGE.0..=PATCH_RANGE.1)).collect();
    let mut clip = Tensor5::from_fn(t.clip_dims(), |_, _, _, h, w| S::lit(background[h * n + w]));
    let (dt, dl): (isize, isize) = match label {
        LEFT => (0, -1),
        RIGHT => (0, 1),
        UP => (-1, 0),
        _ => (1, 0),
    };
    let wrap = |x: usize, d: isize, step: usize| (x as isize + d * step as isize).rem_euclid(n as isize) as usize;
    for frame in 0..f {
        let (t0, l0) = (wrap(top, dt, v * frame), wrap(left, dl, v * frame));
        for i in 0..PATCH {
            for j in 0..PATCH {
                clip.set(0, 0, frame, (t0 + i) % n, (l0 + j) % n, S::lit(texture[i * PATCH + j]));
            }
        }
    }
    clip
}

pub fn reverse_time<S: Scalar>(clip: &Tensor5<S>) -> Tensor5<S> {
    let d = clip.dims();
    Tensor5::from_fn(d, |n, c, t, h, w| clip.get(n, c, d.t - 1 - t, h, w))
}

fn permute_frames<S: Scalar>(clip: &Tensor5<S>, order: &[usize]) -> Tensor5<S> {
    Tensor5::from_fn(clip.dims(), |n, c, t, h, w| clip.get(n, c, order[t], h, w))
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 0x7472_6169_6e00,
        Split::Val => 0x7661_6c00,
    }
}

/// Deterministic per `(task, split, seed)`; labels are balanced round-robin.
pub fn gen_synthetic<S: Scalar>(t: &SyntheticTask, split: Split, seed: u64, count: usize) -> Result<Dataset<S>> {
    t.validate()?;
    let mut r = rng(seed ^ split_salt(split));
    let classes = t.task.classes();
    let mut clips = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % classes;
        let clip = match t.task {
            Task::Direction4 => direction_clip(t, label, &mut r),
            Task::AppearanceVsMotion => {
                let base = direction_clip(t, r.gen_range(0..4), &mut r);
                if label == 0 {
                    base
                } else {
                    let f = t.frames;
                    let mut order: Vec<usize> = (0..f).collect();
                    let identity = order.clone();
                    let reversed: Vec<usize> = (0..f).rev().collect();
                    while order == identity || order == reversed {
                        order.shuffle(&mut r);
                    }
                    permute_frames(&base, &order)
                }
            }
        };
        clips.push(clip);
        labels.push(label);
    }
    Ok(Dataset { clips, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let t = SyntheticTask::new(Task::Direction4);
        let a = gen_synthetic::<f64>(&t, Split::Train, 3, 12).unwrap();
        let b = gen_synthetic::<f64>(&t, Split::Train, 3, 12).unwrap();
        assert_eq!(a, b);
        let v = gen_synthetic::<f64>(&t, Split::Val, 3, 12).unwrap();
        assert_ne!(a.clips, v.clips);
    }

    fn bright(c: &Tensor5<f64>, f: usize) -> Vec<(usize, usize)> {
        (0..32)
            .flat_map(|h| (0..32).map(move |w| (h, w)))
            .filter(|&(h, w)| c.get(0, 0, f, h, w) >= PATCH_RANGE.0)
            .collect()
    }

    fn shifted(p: &[(usize, usize)], dh: isize, dw: isize) -> Vec<(usize, usize)> {
        let mut q: Vec<(usize, usize)> = p
            .iter()
            .map(|&(h, w)| ((h as isize + dh).rem_euclid(32) as usize, (w as isize + dw).rem_euclid(32) as usize))
            .collect();
        q.sort();
        q
    }

    #[test]
    fn patch_translates_with_wrap() {
        let t = SyntheticTask::new(Task::Direction4);
        let mut r = rng(5);
        for label in 0..4 {
            for _ in 0..20 {
                let c: Tensor5<f64> = direction_clip(&t, label, &mut r);
                let (dh, dw) = match label {
                    LEFT => (0, -1),
                    RIGHT => (0, 1),
                    UP => (-1, 0),
                    _ => (1, 0),
                };
                let p0 = bright(&c, 0);
                assert_eq!(p0.len(), PATCH * PATCH);
                let p1 = bright(&c, 1);
                let ok = (1..=2).any(|v| shifted(&p0, dh * v, dw * v) == p1);
                assert!(ok, "label {label}");
            }
        }
    }

    #[test]
    fn reversal_flips_direction_onto_valid_clips() {
        let t = SyntheticTask::new(Task::Direction4);
        let mut r = rng(9);
        let c: Tensor5<f64> = direction_clip(&t, LEFT, &mut r);
        let rev = reverse_time(&c);
        let p0 = bright(&rev, 0);
        let p1 = bright(&rev, 1);
        assert!((1..=2).any(|v| shifted(&p0, 0, v) == p1));
        assert_eq!(reversed_direction(LEFT), RIGHT);
        assert_eq!(reverse_time(&rev), c);
    }

    #[test]
    fn per_frame_histograms_match_across_classes() {
        let t = SyntheticTask::new(Task::Direction4);
        let d = gen_synthetic::<f64>(&t, Split::Train, 1, 400).unwrap();
        let bins = 10;
        let mut hist = vec![vec![0f64; bins]; 4];
        for (clip, &l) in d.clips.iter().zip(&d.labels) {
            for v in &clip.data()[..32 * 32] {
                hist[l][((v * bins as f64) as usize).min(bins - 1)] += 1.0;
            }
        }
        for h in &mut hist {
            let total: f64 = h.iter().sum();
            h.iter_mut().for_each(|x| *x /= total);
        }
        for c in 1..4 {
            for b in 0..bins {
                assert!((hist[c][b] - hist[0][b]).abs() < 0.01, "class {c} bin {b}");
            }
        }
    }

    #[test]
    fn patch_position_is_uniform_per_frame() {
        // mean patch-pixel row and column of the last frame, per class
        let t = SyntheticTask::new(Task::Direction4);
        let d = gen_synthetic::<f64>(&t, Split::Train, 4, 2000).unwrap();
        let mut occ = vec![[0f64; 32]; 4];
        for (c, &l) in d.clips.iter().zip(&d.labels) {
            for (_, w) in bright(c, 7) {
                occ[l][w] += 1.0;
            }
        }
        for o in &occ {
            let total: f64 = o.iter().sum();
            for v in o {
                assert!((v / total - 1.0 / 32.0).abs() < 0.012);
            }
        }
    }

    #[test]
    fn shuffled_clips_share_frames() {
        let t = SyntheticTask::new(Task::AppearanceVsMotion);
        let d = gen_synthetic::<f64>(&t, Split::Val, 2, 6).unwrap();
        assert_eq!(d.labels, vec![0, 1, 0, 1, 0, 1]);
        assert!(SyntheticTask { frames: 8, size: 10, task: Task::Direction4 }.validate().is_err());
    }
}
