//! Fixed-capacity transition store with frame stacking and n-step sampling.
//!
//! Single frames are stored, not stacks; observation stacks are rebuilt at
//! sample time, so memory cost is one frame per step. Episode boundaries are
//! tracked so stacks and reward windows never mix episodes.

use std::collections::VecDeque;

use ndarray::{s, Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ObsBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub capacity: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig { capacity: 1_000_000 }
    }
}

/// One stored step: the observation frame seen before acting, the action
/// taken, and its outcome. A `Boundary` record carries the final observation
/// of a finished episode so o_{t+n} exists at episode ends.
#[derive(Debug, Clone)]
pub struct Record {
    pub episode: u64,
    pub rgb: Array3<u8>,
    pub depth: Array3<u8>,
    /// None marks a boundary record (terminal observation, no step taken).
    pub action: Option<Array1<f64>>,
    pub reward: f64,
    pub done: bool,
}

impl Record {
    pub fn is_boundary(&self) -> bool {
        self.action.is_none()
    }
}

/// Batch layout matching the n-step target: y = sum_i gamma^i * rewards[i]
/// + bootstrap * gamma^n * minQ(next_obs). `bootstrap` is 0 when a terminal
/// occurred inside the window (rewards past it are zeroed, no value term).
pub struct SampledBatch {
    pub obs: ObsBatch,
    pub actions: Array2<f64>,
    /// [B, n]
    pub rewards: Array2<f64>,
    /// [B] in {0,1}
    pub bootstrap: Array1<f64>,
    pub next_obs: ObsBatch,
}

pub struct ReplayBuffer {
    records: VecDeque<Record>,
    capacity: usize,
    n: usize,
    gamma: f64,
    frame_stack: usize,
    /// Count of non-boundary records currently stored.
    steps: usize,
    episode_counter: u64,
    episode_open: bool,
}

impl ReplayBuffer {
    pub fn new(cfg: &ReplayConfig, n: usize, gamma: f64, frame_stack: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::config("n-step must be at least 1"));
        }
        if cfg.capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        Ok(ReplayBuffer {
            records: VecDeque::new(),
            capacity: cfg.capacity,
            n,
            gamma,
            frame_stack,
            steps: 0,
            episode_counter: 0,
            episode_open: false,
        })
    }

    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn n_step(&self) -> usize {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    fn check_shapes(&self, rgb: &Array3<u8>, depth: &Array3<u8>) -> Result<()> {
        if let Some(first) = self.records.front() {
            if first.rgb.dim() != rgb.dim() || first.depth.dim() != depth.dim() {
                return Err(Error::shape(format!(
                    "frame shape {:?}/{:?} does not match buffer {:?}/{:?}",
                    rgb.dim(),
                    depth.dim(),
                    first.rgb.dim(),
                    first.depth.dim()
                )));
            }
        }
        let (c, h, w) = rgb.dim();
        let (dc, dh, dw) = depth.dim();
        if c != 3 || dc != 1 || dh != h || dw != w {
            return Err(Error::shape(format!(
                "expected single frame [3,H,W]/[1,H,W], got {:?}/{:?}",
                rgb.dim(),
                depth.dim()
            )));
        }
        Ok(())
    }

    /// Appends one step. `rgb`/`depth` are the single newest frame of the
    /// observation the action was taken from.
    pub fn push_step(
        &mut self,
        rgb: Array3<u8>,
        depth: Array3<u8>,
        action: Array1<f64>,
        reward: f64,
        done: bool,
    ) -> Result<()> {
        self.check_shapes(&rgb, &depth)?;
        if !self.episode_open {
            self.episode_open = true;
        }
        self.records.push_back(Record {
            episode: self.episode_counter,
            rgb,
            depth,
            action: Some(action),
            reward,
            done,
        });
        self.steps += 1;
        self.evict();
        Ok(())
    }

    /// Closes the current episode, storing its final observation frame.
    pub fn end_episode(&mut self, rgb: Array3<u8>, depth: Array3<u8>) -> Result<()> {
        self.check_shapes(&rgb, &depth)?;
        self.records.push_back(Record {
            episode: self.episode_counter,
            rgb,
            depth,
            action: None,
            reward: 0.0,
            done: false,
        });
        self.episode_counter += 1;
        self.episode_open = false;
        self.evict();
        Ok(())
    }

    /// FIFO eviction at step granularity; leading boundary records of fully
    /// consumed episodes are dropped with their last step.
    fn evict(&mut self) {
        while self.steps > self.capacity {
            if let Some(r) = self.records.pop_front() {
                if !r.is_boundary() {
                    self.steps -= 1;
                }
            }
        }
        while matches!(self.records.front(), Some(r) if r.is_boundary()) {
            self.records.pop_front();
        }
    }

    /// Reward window and bootstrap flag for a start index, or None when the
    /// index cannot form a complete n-step item.
    fn target_window(&self, i: usize) -> Option<(Vec<f64>, f64, usize)> {
        let base = self.records.get(i)?;
        if base.is_boundary() {
            return None;
        }
        let ep = base.episode;
        let mut rewards = vec![0.0; self.n];
        for j in 0..self.n {
            let r = self.records.get(i + j)?;
            if r.episode != ep || r.is_boundary() {
                return None;
            }
            rewards[j] = r.reward;
            if r.done {
                // terminal truncation: later rewards stay zero, no bootstrap
                return Some((rewards, 0.0, i + j));
            }
        }
        let nxt = self.records.get(i + self.n)?;
        if nxt.episode != ep {
            return None;
        }
        Some((rewards, 1.0, i + self.n))
    }

    /// Stacks `frame_stack` RGB frames ending at index `i` (oldest first),
    /// repeating the earliest same-episode frame when the history is short.
    fn stacked_obs(&self, i: usize) -> (Array3<f64>, Array3<f64>) {
        let rec = &self.records[i];
        let (_, h, w) = rec.rgb.dim();
        let k = self.frame_stack;
        let mut rgb = Array3::<f64>::zeros((3 * k, h, w));
        for slot in 0..k {
            // frame for stack position (oldest first): i - (k-1-slot)
            let back = k - 1 - slot;
            let mut j = i;
            for _ in 0..back {
                if j == 0 || self.records[j - 1].episode != rec.episode {
                    break;
                }
                j -= 1;
            }
            let f = &self.records[j];
            rgb.slice_mut(s![3 * slot..3 * (slot + 1), .., ..])
                .assign(&f.rgb.mapv(f64::from));
        }
        let depth = rec.depth.mapv(f64::from);
        (rgb, depth)
    }

    fn valid_indices(&self) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.target_window(i).is_some())
            .collect()
    }

    /// Uniformly samples `batch` start indices (with replacement) and
    /// materializes stacked observations and n-step reward windows.
    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<SampledBatch> {
        let valid = self.valid_indices();
        if valid.len() < batch {
            return Err(Error::InsufficientData(format!(
                "need {batch} valid start indices, have {}",
                valid.len()
            )));
        }
        let first = &self.records[valid[0]];
        let (_, h, w) = first.rgb.dim();
        let a_dim = first.action.as_ref().expect("valid index is a step").len();
        let k = self.frame_stack;
        let mut obs_rgb = Array4::<f64>::zeros((batch, 3 * k, h, w));
        let mut obs_d = Array4::<f64>::zeros((batch, 1, h, w));
        let mut next_rgb = Array4::<f64>::zeros((batch, 3 * k, h, w));
        let mut next_d = Array4::<f64>::zeros((batch, 1, h, w));
        let mut actions = Array2::<f64>::zeros((batch, a_dim));
        let mut rewards = Array2::<f64>::zeros((batch, self.n));
        let mut bootstrap = Array1::<f64>::zeros(batch);
        for b in 0..batch {
            let i = valid[rng.random_range(0..valid.len())];
            let (rw, boot, next_i) = self.target_window(i).expect("index pre-validated");
            let (r0, d0) = self.stacked_obs(i);
            obs_rgb.slice_mut(s![b, .., .., ..]).assign(&r0);
            obs_d.slice_mut(s![b, 0, .., ..]).assign(&d0.slice(s![0, .., ..]));
            let (r1, d1) = self.stacked_obs(next_i);
            next_rgb.slice_mut(s![b, .., .., ..]).assign(&r1);
            next_d.slice_mut(s![b, 0, .., ..]).assign(&d1.slice(s![0, .., ..]));
            actions
                .row_mut(b)
                .assign(self.records[i].action.as_ref().unwrap());
            for (j, &r) in rw.iter().enumerate() {
                rewards[(b, j)] = r;
            }
            bootstrap[b] = boot;
        }
        Ok(SampledBatch {
            obs: ObsBatch { rgb: obs_rgb, depth: obs_d },
            actions,
            rewards,
            bootstrap,
            next_obs: ObsBatch { rgb: next_rgb, depth: next_d },
        })
    }

    /// Discounted n-step reward sum for an item, matching the agent's use.
    pub fn nstep_return(&self, rewards: &[f64]) -> f64 {
        rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| self.gamma.powi(i as i32) * r)
            .sum()
    }

    /// Iterates stored records in order, for serialization and dumping.
    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.records.iter()
    }

    pub(crate) fn restore(
        cfg: &ReplayConfig,
        n: usize,
        gamma: f64,
        frame_stack: usize,
        records: Vec<Record>,
        episode_counter: u64,
        episode_open: bool,
    ) -> Result<Self> {
        let mut buf = Self::new(cfg, n, gamma, frame_stack)?;
        buf.steps = records.iter().filter(|r| !r.is_boundary()).count();
        buf.records = records.into();
        buf.episode_counter = episode_counter;
        buf.episode_open = episode_open;
        Ok(buf)
    }

    pub(crate) fn state(&self) -> (u64, bool) {
        (self.episode_counter, self.episode_open)
    }
}
