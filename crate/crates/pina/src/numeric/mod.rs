//! Flat-vector numeric substrate: segmented parameter vectors, norms,
//! clipping, and seeded Gaussian sampling.

mod rng;

pub use rng::{gaussian_noise, RngStream, StreamId, StreamKind};

use crate::error::{Error, Result};
use std::sync::Arc;

/// A named contiguous slice of a parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered, contiguous, non-overlapping segments covering a flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    /// Builds a layout from `(name, len)` pairs; offsets are cumulative.
    pub fn new<S: Into<String>>(parts: Vec<(S, usize)>) -> Arc<Self> {
        let mut segments = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (name, len) in parts {
            segments.push(Segment {
                name: name.into(),
                offset,
                len,
            });
            offset += len;
        }
        Arc::new(Self {
            segments,
            total: offset,
        })
    }

    /// Single anonymous segment spanning the whole vector.
    pub fn flat(len: usize) -> Arc<Self> {
        Self::new(vec![("all", len)])
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Flat real-valued parameter/update vector with a layout descriptor.
///
/// Values are owned; operations return fresh vectors and never mutate their
/// inputs, so a `ParamVector` handed out by one operation can be shared
/// freely across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                got: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.len();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    /// Convenience constructor with a single-segment layout.
    pub fn from_values(values: Vec<f64>) -> Self {
        let layout = Layout::flat(values.len());
        Self { values, layout }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_layout(&self, other: &Self) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "{} vs {} entries",
                self.len(),
                other.len()
            )))
        }
    }

    /// Euclidean norm.
    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `v * min(1, s / ||v||)`: scales the vector down so its norm is at
    /// most `s`, leaving it untouched when already within the threshold.
    ///
    /// The result is guaranteed to satisfy `||out|| <= s` exactly (rescaling
    /// is repeated if rounding pushed the norm a few ulps above `s`), which
    /// makes clipping idempotent.
    pub fn clip(&self, s: f64) -> Result<Self> {
        if !(s > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "clip threshold must be positive, got {s}"
            )));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("clip input"));
        }
        let norm = self.l2_norm();
        if norm <= s {
            return Ok(self.clone());
        }
        let mut out = self.scale(s / norm);
        loop {
            let n = out.l2_norm();
            if n <= s {
                return Ok(out);
            }
            out = out.scale(s / n);
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_layout(other)?;
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
            layout: Arc::clone(&self.layout),
        })
    }

    /// Coordinatewise `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_layout(other)?;
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
            layout: Arc::clone(&self.layout),
        })
    }

    /// In-place `self += factor * other`.
    pub fn add_scaled_assign(&mut self, other: &Self, factor: f64) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn segment_values(&self, name: &str) -> Result<&[f64]> {
        let seg = self
            .layout
            .segment(name)
            .ok_or_else(|| Error::InvalidParameter(format!("no segment named {name}")))?;
        Ok(&self.values[seg.offset..seg.offset + seg.len])
    }

    pub fn segment_values_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let seg = self
            .layout
            .segment(name)
            .cloned()
            .ok_or_else(|| Error::InvalidParameter(format!("no segment named {name}")))?;
        Ok(&mut self.values[seg.offset..seg.offset + seg.len])
    }

    /// Concatenates the named segments, in layout order, into one flat vector.
    pub fn extract_segments(&self, names: &[&str]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for seg in &self.layout.segments {
            if names.contains(&seg.name.as_str()) {
                out.extend_from_slice(&self.values[seg.offset..seg.offset + seg.len]);
            }
        }
        let expect: usize = names
            .iter()
            .map(|n| self.layout.segment(n).map_or(0, |s| s.len))
            .sum();
        if out.len() != expect {
            return Err(Error::InvalidParameter("unknown segment in mask".into()));
        }
        Ok(out)
    }

    /// Adds `shift` into the named segments (concatenated in layout order),
    /// the inverse of [`extract_segments`](Self::extract_segments).
    pub fn add_into_segments(&mut self, names: &[&str], shift: &[f64]) -> Result<()> {
        let mut cursor = 0;
        for seg in self.layout.segments.clone() {
            if names.contains(&seg.name.as_str()) {
                if cursor + seg.len > shift.len() {
                    return Err(Error::DimensionMismatch {
                        expected: cursor + seg.len,
                        got: shift.len(),
                    });
                }
                for (v, s) in self.values[seg.offset..seg.offset + seg.len]
                    .iter_mut()
                    .zip(&shift[cursor..cursor + seg.len])
                {
                    *v += s;
                }
                cursor += seg.len;
            }
        }
        if cursor != shift.len() {
            return Err(Error::DimensionMismatch {
                expected: cursor,
                got: shift.len(),
            });
        }
        Ok(())
    }
}
