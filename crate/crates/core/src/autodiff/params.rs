use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Named slice of a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat parameter storage with a named-segment layout.
///
/// Segments are appended in order, so they are disjoint and cover the
/// whole vector by construction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<Segment>,
}

impl ParamVector {
    pub fn push_segment(&mut self, name: &str, values: &[f64]) -> Range<usize> {
        let offset = self.values.len();
        self.values.extend_from_slice(values);
        self.layout.push(Segment {
            name: name.to_string(),
            offset,
            len: values.len(),
        });
        offset..offset + values.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f64]> {
        self.segment(name).map(|s| &self.values[s.range()])
    }

    /// Segment containing flat index `i`.
    pub fn segment_of(&self, i: usize) -> Option<&Segment> {
        self.layout.iter().find(|s| s.range().contains(&i))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Checks the layout invariant: contiguous, disjoint, covering.
    pub fn layout_is_consistent(&self) -> bool {
        let mut next = 0;
        for s in &self.layout {
            if s.offset != next {
                return false;
            }
            next += s.len;
        }
        next == self.values.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_cover_the_vector() {
        let mut p = ParamVector::default();
        p.push_segment("a", &[1.0, 2.0]);
        p.push_segment("empty", &[]);
        p.push_segment("b", &[3.0]);
        assert!(p.layout_is_consistent());
        assert_eq!(p.segment_values("b"), Some(&[3.0][..]));
        assert_eq!(p.segment_of(1).unwrap().name, "a");
        assert_eq!(p.segment_of(2).unwrap().name, "b");
    }
}
