//! Flat parameter storage.
//!
//! All weights of a model live in one `Vec<f64>`; a [`Slot`] names a
//! row-major matrix inside it. Gradients, optimizer moments and checkpoints
//! share the same layout.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

pub fn mat(buf: &[f64], s: Slot) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((s.rows, s.cols), &buf[s.range()]).expect("slot within buffer")
}

pub fn mat_mut(buf: &mut [f64], s: Slot) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut buf[s.range()]).expect("slot within buffer")
}

/// A slot holding a vector (stored as a single row).
pub fn vector(buf: &[f64], s: Slot) -> ArrayView1<'_, f64> {
    ArrayView1::from(&buf[s.range()])
}

pub fn vector_mut(buf: &mut [f64], s: Slot) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut buf[s.range()])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub slot: Slot,
    pub init: Init,
}

#[derive(Clone, Debug, Default)]
pub struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl LayoutBuilder {
    pub fn matrix(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
    ) -> Slot {
        let slot = Slot {
            offset: self.len,
            rows,
            cols,
        };
        self.len += slot.len();
        self.entries.push(ParamEntry {
            name: name.into(),
            slot,
            init,
        });
        slot
    }

    pub fn vector(&mut self, name: impl Into<String>, n: usize, init: Init) -> Slot {
        self.matrix(name, 1, n, init)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn finish(self) -> Vec<ParamEntry> {
        self.entries
    }
}

/// Fills a fresh parameter buffer according to each entry's [`Init`].
pub fn init_params<R: Rng + ?Sized>(entries: &[ParamEntry], rng: &mut R) -> Vec<f64> {
    let total = entries
        .iter()
        .map(|e| e.slot.range().end)
        .max()
        .unwrap_or(0);
    let mut buf = vec![0.0; total];
    for e in entries {
        let dst = &mut buf[e.slot.range()];
        match e.init {
            Init::Zeros => dst.fill(0.0),
            Init::Ones => dst.fill(1.0),
            Init::Constant(c) => dst.fill(c),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                dst.iter_mut().for_each(|v| *v = normal.sample(rng));
            }
        }
    }
    buf
}
