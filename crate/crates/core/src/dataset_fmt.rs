//! Line-delimited dataset records: one object per line, UTF-8, fixed field
//! order, floats with 9 significant digits.
//!
//! Example line (wrapped here for readability):
//!
//! ```text
//! {"id":3,"attributes":{"bangs":0,"eyeglasses":1,"beard":3,"smiling":2,
//!  "age":4},"occupation":"engineer","gender":"male","stereotypical":true,
//!  "caption":"He has a beard and no bangs and no smile.",
//!  "image_features":[0.00000000e0,...]}
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::forge::{AttributeRatings, Caption, Gender, OccId, Sample, IMG_DIM};
use crate::tensor::Tensor;

/// 9 significant digits, scientific notation.
pub fn format_f32(x: f32) -> String {
    format!("{:.8e}", x)
}

pub fn encode_sample(s: &Sample) -> String {
    let mut line = String::with_capacity(256);
    line.push_str(&format!("{{\"id\":{}", s.id));
    line.push_str(&format!(
        ",\"attributes\":{{\"bangs\":{},\"eyeglasses\":{},\"beard\":{},\"smiling\":{},\"age\":{}}}",
        s.attributes.bangs,
        s.attributes.eyeglasses,
        s.attributes.beard,
        s.attributes.smiling,
        s.attributes.age
    ));
    line.push_str(&format!(",\"occupation\":\"{}\"", s.occupation.name()));
    line.push_str(&format!(",\"gender\":\"{}\"", s.gender.as_str()));
    line.push_str(&format!(",\"stereotypical\":{}", s.stereotypical));
    line.push_str(&format!(",\"caption\":\"{}\"", escape(&s.caption.text())));
    line.push_str(",\"image_features\":[");
    for (i, v) in s.image_features.data().iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        line.push_str(&format_f32(*v));
    }
    line.push_str("]}");
    line
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Strict cursor over one record line; every helper reports what it expected.
pub(crate) struct Scanner<'a> {
    rest: &'a str,
}

impl<'a> Scanner<'a> {
    pub(crate) fn new(line: &'a str) -> Self {
        Scanner { rest: line }
    }

    pub(crate) fn expect(&mut self, lit: &str) -> Result<()> {
        match self.rest.strip_prefix(lit) {
            Some(rest) => {
                self.rest = rest;
                Ok(())
            }
            None => Err(Error::Parse(format!(
                "expected `{lit}` at `{}`",
                truncate(self.rest)
            ))),
        }
    }

    pub(crate) fn take_until(&mut self, stops: &[char]) -> &'a str {
        let end = self
            .rest
            .find(|c| stops.contains(&c))
            .unwrap_or(self.rest.len());
        let (head, tail) = self.rest.split_at(end);
        self.rest = tail;
        head
    }

    pub(crate) fn parse_u64(&mut self) -> Result<u64> {
        let tok = self.take_until(&[',', '}', ']']);
        tok.parse::<u64>()
            .map_err(|_| Error::Parse(format!("expected integer, got `{}`", truncate(tok))))
    }

    fn parse_u8(&mut self) -> Result<u8> {
        let tok = self.take_until(&[',', '}', ']']);
        tok.parse::<u8>()
            .map_err(|_| Error::Parse(format!("expected rating, got `{}`", truncate(tok))))
    }

    pub(crate) fn parse_bool(&mut self) -> Result<bool> {
        let tok = self.take_until(&[',', '}', ']']);
        match tok {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Parse(format!(
                "expected boolean, got `{}`",
                truncate(other)
            ))),
        }
    }

    pub(crate) fn parse_string(&mut self) -> Result<String> {
        self.expect("\"")?;
        let mut out = String::new();
        let mut chars = self.rest.char_indices();
        loop {
            match chars.next() {
                Some((i, '"')) => {
                    self.rest = &self.rest[i + 1..];
                    return Ok(out);
                }
                Some((_, '\\')) => match chars.next() {
                    Some((_, '"')) => out.push('"'),
                    Some((_, '\\')) => out.push('\\'),
                    other => {
                        return Err(Error::Parse(format!("bad escape sequence {other:?}")));
                    }
                },
                Some((_, c)) => out.push(c),
                None => return Err(Error::Parse("unterminated string".to_string())),
            }
        }
    }

    pub(crate) fn parse_f32(&mut self) -> Result<f32> {
        let tok = self.take_until(&[',', ']']);
        tok.parse::<f32>()
            .map_err(|_| Error::Parse(format!("expected float, got `{}`", truncate(tok))))
    }

    pub(crate) fn done(&self) -> Result<()> {
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(Error::Parse(format!(
                "trailing content `{}`",
                truncate(self.rest)
            )))
        }
    }
}

fn truncate(s: &str) -> &str {
    &s[..s.len().min(24)]
}

pub fn parse_sample(line: &str) -> Result<Sample> {
    let mut sc = Scanner::new(line.trim_end());
    sc.expect("{\"id\":")?;
    let id = sc.parse_u64()?;
    sc.expect(",\"attributes\":{\"bangs\":")?;
    let bangs = sc.parse_u8()?;
    sc.expect(",\"eyeglasses\":")?;
    let eyeglasses = sc.parse_u8()?;
    sc.expect(",\"beard\":")?;
    let beard = sc.parse_u8()?;
    sc.expect(",\"smiling\":")?;
    let smiling = sc.parse_u8()?;
    sc.expect(",\"age\":")?;
    let age = sc.parse_u8()?;
    sc.expect("}")?;
    sc.expect(",\"occupation\":")?;
    let occupation = OccId::from_name(&sc.parse_string()?)?;
    sc.expect(",\"gender\":")?;
    let gender = Gender::parse(&sc.parse_string()?)?;
    sc.expect(",\"stereotypical\":")?;
    let stereotypical = sc.parse_bool()?;
    sc.expect(",\"caption\":")?;
    let caption = Caption::from_text(&sc.parse_string()?)?;
    sc.expect(",\"image_features\":[")?;
    let mut features = Vec::with_capacity(IMG_DIM);
    loop {
        features.push(sc.parse_f32()?);
        if sc.expect(",").is_ok() {
            continue;
        }
        sc.expect("]")?;
        break;
    }
    sc.expect("}")?;
    sc.done()?;

    if features.len() != IMG_DIM {
        return Err(Error::Parse(format!(
            "expected {IMG_DIM} image features, got {}",
            features.len()
        )));
    }
    let attributes = AttributeRatings {
        bangs,
        eyeglasses,
        beard,
        smiling,
        age,
    };
    attributes.validate()?;
    Ok(Sample {
        id,
        attributes,
        occupation,
        gender,
        stereotypical,
        caption,
        image_features: Tensor::vector(features),
    })
}
