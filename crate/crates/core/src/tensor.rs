//! Dense row-major f32 tensors and the named, module-tagged parameter map
//! that every model and editing operation works on.
//!
//! Storage is 32-bit; all arithmetic elsewhere promotes to f64 and rounds
//! back when a tensor is materialized.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Which model module a parameter belongs to. Freeze settings operate on
/// whole tags, never on individual tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tag {
    Vision,
    Text,
    VisionProj,
    TextProj,
    Decoder,
}

impl Tag {
    pub const ALL: [Tag; 5] = [
        Tag::Vision,
        Tag::Text,
        Tag::VisionProj,
        Tag::TextProj,
        Tag::Decoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Vision => "vision",
            Tag::Text => "text",
            Tag::VisionProj => "vision_proj",
            Tag::TextProj => "text_proj",
            Tag::Decoder => "decoder",
        }
    }

    pub fn parse(s: &str) -> Result<Tag> {
        Tag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown tag `{s}`")))
    }

    pub fn code(self) -> u8 {
        match self {
            Tag::Vision => 0,
            Tag::Text => 1,
            Tag::VisionProj => 2,
            Tag::TextProj => 3,
            Tag::Decoder => 4,
        }
    }

    pub fn from_code(c: u8) -> Result<Tag> {
        Tag::ALL
            .into_iter()
            .find(|t| t.code() == c)
            .ok_or_else(|| Error::Parse(format!("unknown tag code {c}")))
    }

    fn index(self) -> usize {
        self.code() as usize
    }
}

/// Dense tensor, row-major. For matrices the shape is `[rows, cols]` and a
/// matrix-vector product treats rows as output dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                name: "<anonymous>".to_string(),
                expected: format!("{expected} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: alloc::vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f32>) -> Tensor {
        Tensor {
            shape: alloc::vec![data.len()],
            data,
        }
    }

    /// Round an f64 buffer down to storage precision.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Tensor> {
        Tensor::new(shape, data.iter().map(|&x| x as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Promoted copy for f64 kernels.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bit-level equality; the yardstick for every freeze/identity contract.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub tag: Tag,
}

/// Ordered map name -> tagged tensor. Iteration order is lexicographic by
/// name (BTreeMap), which is what makes serialization and accumulation
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, tag: Tag, tensor: Tensor) {
        self.entries.insert(name.to_string(), Param { tensor, tag });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn tag_of(&self, name: &str) -> Option<Tag> {
        self.entries.get(name).map(|p| p.tag)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lexicographic iteration over (name, param).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    /// Fetch a tensor or fail with a shape error naming it.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Consistency(format!("missing tensor `{name}`")))
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.iter().zip(other.iter()).all(|((na, pa), (nb, pb))| {
                na == nb && pa.tag == pb.tag && pa.tensor.bitwise_eq(&pb.tensor)
            })
    }

    /// Names carrying a given tag, in lexicographic order.
    pub fn names_with_tag(&self, tag: Tag) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.tag == tag)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Per-tag freeze switches. A frozen tag's tensors must stay bitwise
/// unchanged through any optimizer step or weight edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FreezeMask {
    frozen: [bool; 5],
}

impl FreezeMask {
    /// Nothing frozen: every tag trainable.
    pub fn none() -> FreezeMask {
        FreezeMask::default()
    }

    /// Everything frozen.
    pub fn all() -> FreezeMask {
        FreezeMask { frozen: [true; 5] }
    }

    pub fn freezing(tags: &[Tag]) -> FreezeMask {
        let mut mask = FreezeMask::none();
        for &t in tags {
            mask.frozen[t.index()] = true;
        }
        mask
    }

    pub fn freezes(&self, tag: Tag) -> bool {
        self.frozen[tag.index()]
    }

    pub fn frozen_tags(&self) -> Vec<Tag> {
        Tag::ALL
            .into_iter()
            .filter(|t| self.freezes(*t))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(alloc::vec![2, 3], alloc::vec![0.0; 6]).is_ok());
        assert!(Tensor::new(alloc::vec![2, 3], alloc::vec![0.0; 5]).is_err());
    }

    #[test]
    fn paramset_iterates_lexicographically() {
        let mut p = ParamSet::new();
        p.insert("vision.w1", Tag::Vision, Tensor::zeros(alloc::vec![1]));
        p.insert("decoder.h", Tag::Decoder, Tensor::zeros(alloc::vec![1]));
        p.insert("text.w1", Tag::Text, Tensor::zeros(alloc::vec![1]));
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, alloc::vec!["decoder.h", "text.w1", "vision.w1"]);
    }

    #[test]
    fn bitwise_eq_distinguishes_sign_of_zero() {
        let a = Tensor::vector(alloc::vec![0.0]);
        let b = Tensor::vector(alloc::vec![-0.0]);
        assert!(!a.bitwise_eq(&b));
        assert_eq!(a, b); // PartialEq on floats treats them equal
    }

    #[test]
    fn freeze_mask_roundtrip() {
        let m = FreezeMask::freezing(&[Tag::Text, Tag::TextProj]);
        assert!(m.freezes(Tag::Text));
        assert!(m.freezes(Tag::TextProj));
        assert!(!m.freezes(Tag::Vision));
        assert_eq!(m.frozen_tags(), alloc::vec![Tag::Text, Tag::TextProj]);
    }

    #[test]
    fn tag_codes_roundtrip() {
        for t in Tag::ALL {
            assert_eq!(Tag::from_code(t.code()).unwrap(), t);
            assert_eq!(Tag::parse(t.as_str()).unwrap(), t);
        }
    }
}
