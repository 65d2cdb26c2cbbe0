//! Pixel edits and their propagation through the conditional mean.

use std::io::Read;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::lowrank::LowRankGaussian;

/// Set channel `c` of pixel `(x, y)` to `value`. Indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelEdit {
    pub x: usize,
    pub y: usize,
    pub c: usize,
    pub value: f64,
}

/// Parse `x,y,c,value` lines. Blank lines and `#` comments are ignored, and
/// so is a leading `x,y,c,value` header.
pub fn parse_edits<R: Read>(reader: R) -> Result<Vec<PixelEdit>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut edits = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if line == 0 && record.get(0) == Some("x") {
            continue;
        }
        if record.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "edit line {}: expected 4 fields x,y,c,value, got {}",
                line + 1,
                record.len()
            )));
        }
        let field = |i: usize| record.get(i).unwrap();
        let bad = |what: &str| Error::InvalidArgument(format!("edit line {}: bad {what} {:?}", line + 1, record.as_slice()));
        edits.push(PixelEdit {
            x: field(0).parse().map_err(|_| bad("x"))?,
            y: field(1).parse().map_err(|_| bad("y"))?,
            c: field(2).parse().map_err(|_| bad("channel"))?,
            value: field(3).parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(edits)
}

/// Check bounds and values, return flat indices and values in input order.
pub fn resolve_edits(edits: &[PixelEdit], shape: ImageShape) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut seen = vec![false; shape.size()];
    let mut indices = Vec::with_capacity(edits.len());
    let mut values = Vec::with_capacity(edits.len());
    for e in edits {
        let idx = shape.index(e.x, e.y, e.c).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "edit ({}, {}, {}) outside {}x{}x{} image",
                e.x, e.y, e.c, shape.width, shape.height, shape.channels
            ))
        })?;
        if !(0.0..=1.0).contains(&e.value) {
            return Err(Error::InvalidArgument(format!(
                "edit value {} at ({}, {}, {}) outside [0, 1]",
                e.value, e.x, e.y, e.c
            )));
        }
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::InvalidArgument(format!("pixel ({}, {}, {}) edited twice", e.x, e.y, e.c)));
        }
        indices.push(idx);
        values.push(e.value);
    }
    Ok((indices, values))
}

/// Propagate `edits` into `current`: the covariance of `dist` is kept and
/// `current` takes the role of the mean, so unedited pixels move to
/// `current₁ + Σ₁₂ Σ₂₂⁻¹ (b − current₂)`. No edits returns `current`.
pub fn propagate_edits(
    dist: &LowRankGaussian,
    current: &DVector<f64>,
    edits: &[PixelEdit],
    shape: ImageShape,
    limit: usize,
) -> Result<DVector<f64>> {
    if current.len() != dist.dim() {
        return Err(Error::dim("current image", dist.dim(), current.len()));
    }
    if edits.is_empty() {
        return Ok(current.clone());
    }
    if edits.len() > limit {
        return Err(Error::EditLimit { k: edits.len(), limit });
    }
    let (indices, values) = resolve_edits(edits, shape)?;
    dist.with_mean(current.clone())?.apply_edit(&indices, &values, limit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn parses_with_header_and_comments() {
        let text = "x,y,c,value\n# a comment\n1, 2, 0, 0.5\n\n3,0,0,1\n";
        let edits = parse_edits(text.as_bytes()).unwrap();
        assert_eq!(
            edits,
            vec![
                PixelEdit { x: 1, y: 2, c: 0, value: 0.5 },
                PixelEdit { x: 3, y: 0, c: 0, value: 1.0 },
            ]
        );
        assert!(parse_edits("".as_bytes()).unwrap().is_empty());
        assert!(parse_edits("1,2,0".as_bytes()).is_err());
        assert!(parse_edits("a,2,0,0.1".as_bytes()).is_err());
    }

    #[test]
    fn validation() {
        let shape = ImageShape::grayscale(4, 4);
        let ok = PixelEdit { x: 3, y: 3, c: 0, value: 0.2 };
        assert_eq!(resolve_edits(&[ok], shape).unwrap(), (vec![15], vec![0.2]));
        assert!(resolve_edits(&[PixelEdit { x: 4, ..ok }], shape).is_err());
        assert!(resolve_edits(&[PixelEdit { c: 1, ..ok }], shape).is_err());
        assert!(resolve_edits(&[PixelEdit { value: 1.2, ..ok }], shape).is_err());
        assert!(resolve_edits(&[PixelEdit { value: -0.1, ..ok }], shape).is_err());
        assert!(resolve_edits(&[ok, ok], shape).is_err());
    }

    #[test]
    fn empty_edit_is_identity_and_limit_enforced() {
        let shape = ImageShape::grayscale(2, 2);
        let dist = LowRankGaussian::new(
            DVector::from_element(4, 0.5),
            DMatrix::from_element(4, 1, 0.1),
            DVector::from_element(4, 0.01),
        )
        .unwrap();
        let current = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(propagate_edits(&dist, &current, &[], shape, 4096).unwrap(), current);
        let edits = [
            PixelEdit { x: 0, y: 0, c: 0, value: 0.9 },
            PixelEdit { x: 1, y: 0, c: 0, value: 0.9 },
        ];
        assert!(matches!(
            propagate_edits(&dist, &current, &edits, shape, 1),
            Err(Error::EditLimit { k: 2, limit: 1 })
        ));
        let out = propagate_edits(&dist, &current, &edits[..1], shape, 4096).unwrap();
        assert_eq!(out[0], 0.9);
        assert!(out[3] > current[3], "positively correlated pixel follows the edit");
    }
}
