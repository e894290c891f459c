//! Deterministic synthetic video classification.
//!
//! A clip is divided into equal segments. In each segment a bright square
//! sprite travels in one direction; a class is a fixed ordering of a shared
//! pool of directions. The content of a segment depends only on its
//! direction and on `(seed, split, index)`, never on where in the clip the
//! segment sits. Permuted classes therefore produce the same multiset of
//! frames, and only frame order separates them.
//!
//! Randomness (start positions, pixel noise) is keyed by the clip's
//! instance number and the segment direction, so the clips of one instance
//! across all classes are exact reorderings of each other.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::splitmix64;
use crate::tensor::{Real, Tensor};

/// Unit motion vectors `(dx, dy)`; the first `segments` form the pool.
const DIRECTIONS: [(i32, i32); 8] = [
    (1, 0),
    (0, 1),
    (-1, 0),
    (0, -1),
    (1, 1),
    (-1, -1),
    (-1, 1),
    (1, -1),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub segments: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub source_frames: usize,
    pub image_size: usize,
    pub sprite_size: usize,
    /// Distance in pixels the sprite covers over one segment.
    pub travel: usize,
    /// Length in pixels of the fading trail drawn behind the sprite.
    pub trail: usize,
    pub noise_std: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            num_classes: 8,
            segments: 4,
            train_per_class: 256,
            eval_per_class: 32,
            source_frames: 128,
            image_size: 32,
            sprite_size: 5,
            travel: 12,
            trail: 4,
            noise_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e,
            Split::Eval => 0x6576_616c,
        }
    }
}

fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5fa1_u64, |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// All permutations of `0..n` in lexicographic order.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // Next lexicographic permutation.
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 || self.segments > DIRECTIONS.len() {
            return Err(Error::Config(format!(
                "segments must be in 1..={}",
                DIRECTIONS.len()
            )));
        }
        let orderings: usize = (1..=self.segments).product();
        if self.num_classes == 0 || self.num_classes > orderings {
            return Err(Error::Config(format!(
                "{} segments support at most {orderings} classes, got {}",
                self.segments, self.num_classes
            )));
        }
        if self.source_frames == 0 || self.source_frames % self.segments != 0 {
            return Err(Error::Config(format!(
                "source_frames {} must be a positive multiple of segments {}",
                self.source_frames, self.segments
            )));
        }
        if self.sprite_size + self.travel >= self.image_size {
            return Err(Error::Config(
                "sprite_size + travel must be smaller than image_size".into(),
            ));
        }
        Ok(())
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.num_classes
            * match split {
                Split::Train => self.train_per_class,
                Split::Eval => self.eval_per_class,
            }
    }

    /// Direction index (into the pool) for each segment of class `label`.
    pub fn class_order(&self, label: usize) -> Vec<usize> {
        let all = permutations(self.segments);
        let idx = label * all.len() / self.num_classes;
        all[idx].clone()
    }

    pub fn label_of(&self, index: usize) -> usize {
        index % self.num_classes
    }

    /// Clips `instance·K .. instance·K + K` share all per-segment randomness
    /// and differ only in segment order.
    pub fn instance_of(&self, index: usize) -> usize {
        index / self.num_classes
    }

    fn segment_len(&self) -> usize {
        self.source_frames / self.segments
    }

    /// Top-left sprite position of `frame` in clip `(split, index)`.
    pub fn sprite_position(&self, split: Split, index: usize, frame: usize) -> (usize, usize) {
        let order = self.class_order(self.label_of(index));
        let seg_len = self.segment_len();
        let dir = order[frame / seg_len];
        let offset = frame % seg_len;
        let (dx, dy) = (f64::from(DIRECTIONS[dir].0), f64::from(DIRECTIONS[dir].1));
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[
            self.seed,
            split.tag(),
            self.instance_of(index) as u64,
            dir as u64,
        ]));
        let free = (self.image_size - self.sprite_size) as f64;
        let travel = self.travel as f64;
        // Start anywhere the whole segment stays inside the frame.
        let mut axis = |d: f64| -> f64 {
            if d > 0.0 {
                rng.random_range(0.0..=free - travel)
            } else if d < 0.0 {
                rng.random_range(travel..=free)
            } else {
                rng.random_range(0.0..=free)
            }
        };
        let (sx, sy) = (axis(dx), axis(dy));
        let along = offset as f64 / (seg_len - 1).max(1) as f64 * travel;
        let x = (sx + dx * along).round().clamp(0.0, free);
        let y = (sy + dy * along).round().clamp(0.0, free);
        (x as usize, y as usize)
    }

    /// Pixels of one frame, `image_size²` values in `[0, 1]`.
    pub fn render_frame(&self, split: Split, index: usize, frame: usize) -> Vec<f32> {
        self.render(split, index, frame, self.trail)
    }

    /// The same frame without its motion trail: a still image carrying the
    /// sprite's position but no hint of its direction.
    pub fn render_still(&self, split: Split, index: usize, frame: usize) -> Vec<f32> {
        self.render(split, index, frame, 0)
    }

    /// Cell of a `grid × grid` partition of the frame holding the sprite,
    /// numbered row-major.
    pub fn grid_cell(&self, split: Split, index: usize, frame: usize, grid: usize) -> usize {
        let (x, y) = self.sprite_position(split, index, frame);
        let span = self.image_size - self.sprite_size + 1;
        (y * grid / span) * grid + x * grid / span
    }

    fn render(&self, split: Split, index: usize, frame: usize, trail: usize) -> Vec<f32> {
        let n = self.image_size;
        let mut px = vec![0.0f32; n * n];
        let (x, y) = self.sprite_position(split, index, frame);
        let order = self.class_order(self.label_of(index));
        let seg_len = self.segment_len();
        let (dx, dy) = DIRECTIONS[order[frame / seg_len]];
        let s = self.sprite_size as i64;
        // Trail first, farthest and faintest first, then the sprite on top.
        for k in (0..=trail as i64).rev() {
            let level = if k == 0 {
                1.0
            } else {
                0.6 * (1.0 - k as f32 / (trail as f32 + 1.0))
            };
            let (x0, y0) = (x as i64 - dx as i64 * k, y as i64 - dy as i64 * k);
            for yy in y0.max(0)..(y0 + s).min(n as i64) {
                for xx in x0.max(0)..(x0 + s).min(n as i64) {
                    let p = &mut px[yy as usize * n + xx as usize];
                    *p = p.max(level);
                }
            }
        }
        if self.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[
                self.seed,
                split.tag(),
                self.instance_of(index) as u64,
                order[frame / seg_len] as u64,
                (frame % seg_len) as u64,
                0x6e6f_6973_65,
            ]));
            let normal = Normal::new(0.0, self.noise_std).expect("valid noise std");
            for p in px.iter_mut() {
                let v: f64 = normal.sample(&mut rng);
                *p = (*p + v as f32).clamp(0.0, 1.0);
            }
        }
        px
    }

    /// Source frame indices kept when subsampling to `frames`: uniform
    /// stride, phase 0.
    pub fn frame_indices(&self, frames: usize) -> Result<Vec<usize>> {
        if frames == 0 || frames > self.source_frames {
            return Err(Error::FrameMismatch(format!(
                "cannot sample {frames} frames from {} source frames",
                self.source_frames
            )));
        }
        Ok((0..frames).map(|i| i * self.source_frames / frames).collect())
    }
}

/// Full-length clip `[source_frames, H, W, 1]` and its label.
pub fn make_clip<F: Real>(spec: &DatasetSpec, split: Split, index: usize) -> Result<(Tensor<F>, usize)> {
    let frames: Vec<usize> = (0..spec.source_frames).collect();
    let video = render_clip(spec, split, index, &frames);
    let n = spec.image_size;
    Ok((
        Tensor::new(&[spec.source_frames, n, n, 1], video)?,
        spec.label_of(index),
    ))
}

fn render_clip<F: Real>(spec: &DatasetSpec, split: Split, index: usize, frames: &[usize]) -> Vec<F> {
    frames
        .iter()
        .flat_map(|&f| spec.render_frame(split, index, f))
        .map(|v| F::from_f64_lossy(f64::from(v)))
        .collect()
}

/// Map pixel values from `[0, 1]` to `[-1, 1]`, the range the model is
/// trained on.
pub fn center_pixels<F: Real>(video: &Tensor<F>) -> Tensor<F> {
    let two = F::from_f64_lossy(2.0);
    let values = video.data().iter().map(|&v| v * two - F::one()).collect();
    Tensor::new(video.shape(), values).expect("same shape")
}

/// A batch of subsampled clips.
#[derive(Debug, Clone)]
pub struct Batch<F: Real> {
    /// `[B, T, H, W, 1]`.
    pub video: Tensor<F>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Assemble the clips at `indices` into one batch.
pub fn make_batch<F: Real>(
    spec: &DatasetSpec,
    split: Split,
    indices: &[usize],
    frame_indices: &[usize],
) -> Result<Batch<F>> {
    let n = spec.image_size;
    let mut video = Vec::with_capacity(indices.len() * frame_indices.len() * n * n);
    for &i in indices {
        video.extend(render_clip::<F>(spec, split, i, frame_indices));
    }
    Ok(Batch {
        video: Tensor::new(&[indices.len(), frame_indices.len(), n, n, 1], video)?,
        labels: indices.iter().map(|&i| spec.label_of(i)).collect(),
        indices: indices.to_vec(),
    })
}

/// One shuffled pass over a split in full batches (a short tail is dropped).
pub struct BatchIter<'a, F: Real> {
    spec: &'a DatasetSpec,
    split: Split,
    order: Vec<usize>,
    frame_indices: Vec<usize>,
    batch: usize,
    pos: usize,
    _marker: std::marker::PhantomData<F>,
}

pub fn batch_iter<F: Real>(
    spec: &DatasetSpec,
    split: Split,
    batch: usize,
    frames: usize,
    seed: u64,
) -> Result<BatchIter<'_, F>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let frame_indices = spec.frame_indices(frames)?;
    let mut order: Vec<usize> = (0..spec.split_len(split)).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[seed, split.tag(), 0x5348_5546])));
    Ok(BatchIter {
        spec,
        split,
        order,
        frame_indices,
        batch,
        pos: 0,
        _marker: std::marker::PhantomData,
    })
}

impl<F: Real> BatchIter<'_, F> {
    /// Number of full batches in the pass.
    pub fn num_batches(&self) -> usize {
        self.order.len() / self.batch
    }
}

impl<F: Real> Iterator for BatchIter<'_, F> {
    type Item = Batch<F>;

    fn next(&mut self) -> Option<Batch<F>> {
        if self.pos + self.batch > self.order.len() {
            return None;
        }
        let idx = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        Some(make_batch(self.spec, self.split, idx, &self.frame_indices).expect("consistent shapes"))
    }
}

/// In-order batches covering the whole split, including a short tail.
pub fn eval_batches<F: Real>(
    spec: &DatasetSpec,
    split: Split,
    batch: usize,
    frames: usize,
) -> Result<impl Iterator<Item = Batch<F>> + '_> {
    let frame_indices = spec.frame_indices(frames)?;
    let len = spec.split_len(split);
    let batch = batch.max(1);
    Ok((0..len).step_by(batch).map(move |start| {
        let idx: Vec<usize> = (start..(start + batch).min(len)).collect();
        make_batch(spec, split, &idx, &frame_indices).expect("consistent shapes")
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_are_lexicographic() {
        let p = permutations(3);
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], [0, 1, 2]);
        assert_eq!(p[1], [0, 2, 1]);
        assert_eq!(p[5], [2, 1, 0]);
    }

    #[test]
    fn class_orders_are_distinct() {
        let spec = DatasetSpec::default();
        let orders: std::collections::BTreeSet<_> =
            (0..spec.num_classes).map(|c| spec.class_order(c)).collect();
        assert_eq!(orders.len(), spec.num_classes);
    }

    #[test]
    fn stride_sampling() {
        let spec = DatasetSpec::default();
        assert_eq!(
            spec.frame_indices(8).unwrap(),
            [0, 16, 32, 48, 64, 80, 96, 112]
        );
        assert_eq!(spec.frame_indices(128).unwrap(), (0..128).collect::<Vec<_>>());
        assert!(spec.frame_indices(129).is_err());
        assert!(spec.frame_indices(0).is_err());
    }

    #[test]
    fn sprite_stays_inside_frame() {
        let spec = DatasetSpec::default();
        for index in 0..40 {
            for f in 0..spec.source_frames {
                let (x, y) = spec.sprite_position(Split::Train, index, f);
                assert!(x + spec.sprite_size <= spec.image_size);
                assert!(y + spec.sprite_size <= spec.image_size);
            }
        }
    }

    #[test]
    fn validation() {
        assert!(DatasetSpec::default().validate().is_ok());
        let spec = DatasetSpec {
            num_classes: 25,
            ..DatasetSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
