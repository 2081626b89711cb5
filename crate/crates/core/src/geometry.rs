//! Box arithmetic and the scenery-change ground truth.
//!
//! A pair of frames has *changed scenery* when the largest per-object motion
//! exceeds the variation threshold. Per-object motion is `1 - IoU` for objects
//! present in both frames and `1` for objects that appear or disappear.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates, origin top-left.
///
/// Construction rejects non-finite coordinates and non-positive extents, so
/// every value of this type has positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "non-finite coordinates ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::InvalidGeometry(format!(
                "degenerate box ({x0}, {y0}, {x1}, {y1}) requires x1 > x0 and y1 > y0"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Box from top-left corner and size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    /// Half-open point containment `[x0, x1) x [y0, y1)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Clip to `[0, width] x [0, height]`; `None` when nothing with positive area remains.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<Self> {
        Self::new(
            self.x0.clamp(0.0, width),
            self.y0.clamp(0.0, height),
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
        )
        .ok()
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union of two valid boxes. Always in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// IoU on raw corner arrays, validating both boxes first.
pub fn iou_coords(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    Ok(iou(&BoundingBox::try_from(a)?, &BoundingBox::try_from(b)?))
}

/// One annotated object of interest in a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub object_id: String,
    pub class_id: u32,
    pub bbox: BoundingBox,
}

impl ObjectAnnotation {
    pub fn new(object_id: impl Into<String>, class_id: u32, bbox: BoundingBox) -> Self {
        Self {
            object_id: object_id.into(),
            class_id,
            bbox,
        }
    }
}

/// Per-object motion values between two frames, keyed by object id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionField {
    pub entries: BTreeMap<String, f64>,
}

impl MotionField {
    /// Largest motion value; an empty field has no variation and yields 0.
    pub fn max(&self) -> f64 {
        self.entries.values().copied().fold(0.0, f64::max)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, object_id: &str) -> Option<f64> {
        self.entries.get(object_id).copied()
    }
}

/// Binary scenery-change label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneryLabel {
    Unchanged = 0,
    Changed = 1,
}

impl SceneryLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(SceneryLabel::Unchanged),
            1 => Ok(SceneryLabel::Changed),
            _ => Err(Error::Domain(format!("scenery label index {i} not in {{0, 1}}"))),
        }
    }

    /// Label for a given maximum motion; strictly greater than `tau_var` means changed.
    pub fn from_max_motion(max_mfi: f64, tau_var: f64) -> Self {
        if max_mfi > tau_var {
            SceneryLabel::Changed
        } else {
            SceneryLabel::Unchanged
        }
    }
}

impl fmt::Display for SceneryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneryLabel::Unchanged => f.write_str("unchanged"),
            SceneryLabel::Changed => f.write_str("changed"),
        }
    }
}

fn index_by_id(objs: &[ObjectAnnotation]) -> Result<BTreeMap<&str, &ObjectAnnotation>> {
    let mut map = BTreeMap::new();
    for o in objs {
        if map.insert(o.object_id.as_str(), o).is_some() {
            return Err(Error::Domain(format!(
                "object id {:?} appears more than once in a frame",
                o.object_id
            )));
        }
    }
    Ok(map)
}

/// Motion of every object seen in either frame: `1 - IoU` when present in
/// both, `1` when present in only one.
pub fn motion_field(objs_i: &[ObjectAnnotation], objs_j: &[ObjectAnnotation]) -> Result<MotionField> {
    let a = index_by_id(objs_i)?;
    let b = index_by_id(objs_j)?;
    let ids: BTreeSet<&str> = a.keys().chain(b.keys()).copied().collect();
    let entries = ids
        .into_iter()
        .map(|id| {
            let motion = match (a.get(id), b.get(id)) {
                (Some(oa), Some(ob)) => 1.0 - iou(&oa.bbox, &ob.bbox),
                _ => 1.0,
            };
            (id.to_string(), motion)
        })
        .collect();
    Ok(MotionField { entries })
}

fn check_tau(tau_var: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau_var) {
        return Err(Error::Domain(format!("variation threshold {tau_var} not in [0, 1]")));
    }
    Ok(())
}

/// Scenery-change label between two annotated frames.
pub fn scenery_change(
    objs_i: &[ObjectAnnotation],
    objs_j: &[ObjectAnnotation],
    tau_var: f64,
) -> Result<SceneryLabel> {
    check_tau(tau_var)?;
    let field = motion_field(objs_i, objs_j)?;
    Ok(SceneryLabel::from_max_motion(field.max(), tau_var))
}

/// Same as [`scenery_change`] but also returns the maximum motion.
pub fn scenery_change_with_motion(
    objs_i: &[ObjectAnnotation],
    objs_j: &[ObjectAnnotation],
    tau_var: f64,
) -> Result<(f64, SceneryLabel)> {
    check_tau(tau_var)?;
    let max = motion_field(objs_i, objs_j)?.max();
    Ok((max, SceneryLabel::from_max_motion(max, tau_var)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn obj(id: &str, b: BoundingBox) -> ObjectAnnotation {
        ObjectAnnotation::new(id, 0, b)
    }

    /// Counts sample points of a `pitch` grid falling in each box.
    fn raster_iou(a: &BoundingBox, b: &BoundingBox, pitch: f64) -> f64 {
        let xs = a.x0().min(b.x0());
        let ys = a.y0().min(b.y0());
        let nx = ((a.x1().max(b.x1()) - xs) / pitch).ceil() as usize;
        let ny = ((a.y1().max(b.y1()) - ys) / pitch).ceil() as usize;
        let (mut inter, mut union) = (0u64, 0u64);
        for iy in 0..ny {
            let y = ys + (iy as f64 + 0.5) * pitch;
            for ix in 0..nx {
                let x = xs + (ix as f64 + 0.5) * pitch;
                let (ia, ib) = (a.contains(x, y), b.contains(x, y));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(20.0, 20.0, 30.0, 30.0)), 0.0);
    }

    #[test]
    fn iou_half_overlap_matches_raster_oracle() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(5.0, 0.0, 15.0, 10.0);
        let oracle = raster_iou(&a, &b, 0.01);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-3, "oracle {oracle}");
        assert!((iou(&a, &b) - oracle).abs() < 1e-3);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(matches!(BoundingBox::new(0.0, 0.0, 0.0, 5.0), Err(Error::InvalidGeometry(_))));
        assert!(BoundingBox::new(3.0, 0.0, 1.0, 5.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 5.0).is_err());
        assert!(iou_coords([0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 2.0, 3.0]).is_err());
        let bad: std::result::Result<BoundingBox, _> = serde_json::from_str("[0, 0, -1, 4]");
        assert!(bad.is_err());
    }

    #[test]
    fn motion_field_cases() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let f = motion_field(&[obj("k", a)], &[obj("k", a)]).unwrap();
        assert_eq!(f.get("k"), Some(0.0));

        let f = motion_field(&[], &[obj("k", a)]).unwrap();
        assert_eq!(f.get("k"), Some(1.0));

        let f = motion_field(&[obj("k", a)], &[obj("k", bb(5.0, 0.0, 15.0, 10.0))]).unwrap();
        assert!((f.get("k").unwrap() - 2.0 / 3.0).abs() < 1e-12);

        let f = motion_field(&[obj("a", a), obj("b", a)], &[obj("b", a), obj("c", a)]).unwrap();
        let keys: Vec<_> = f.entries.keys().cloned().collect();
        assert_eq!(keys, ["a", "b", "c"]);
        assert!(motion_field(&[obj("a", a), obj("a", a)], &[]).is_err());
    }

    #[test]
    fn scenery_change_cases() {
        // moving object with motion 0.25 plus an object that appeared
        let base = bb(0.0, 0.0, 10.0, 10.0);
        let moved = bb(0.0, 0.0, 10.0, 7.5); // IoU 0.75
        let i = [obj("a", base)];
        let j = [obj("a", moved), obj("b", base)];
        let f = motion_field(&i, &j).unwrap();
        assert!((f.get("a").unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(f.get("b"), Some(1.0));
        assert_eq!(scenery_change(&i, &j, 0.4).unwrap(), SceneryLabel::Changed);

        let small = bb(0.0, 0.0, 10.0, 9.0); // IoU 0.9
        assert_eq!(
            scenery_change(&[obj("a", base)], &[obj("a", small)], 0.4).unwrap(),
            SceneryLabel::Unchanged
        );
        assert_eq!(scenery_change(&[], &[], 0.4).unwrap(), SceneryLabel::Unchanged);
        assert!(scenery_change(&[], &[], 1.5).is_err());
    }

    #[test]
    fn boundary_equal_to_threshold_is_unchanged() {
        let base = bb(0.0, 0.0, 10.0, 10.0);
        let half = bb(0.0, 0.0, 10.0, 5.0); // IoU 0.5, motion 0.5
        assert_eq!(
            scenery_change(&[obj("a", base)], &[obj("a", half)], 0.5).unwrap(),
            SceneryLabel::Unchanged
        );
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..200.0f64, 0.0..200.0f64, 0.5..60.0f64, 0.5..60.0f64)
            .prop_map(|(x, y, w, h)| BoundingBox::from_xywh(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), b in arb_box(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
            let ta = a.translate(dx, dy).unwrap();
            let tb = b.translate(dx, dy).unwrap();
            prop_assert!((iou(&a, &b) - iou(&ta, &tb)).abs() < 1e-9);
        }

        #[test]
        fn threshold_monotone(a in arb_box(), b in arb_box(), t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let i = [obj("x", a)];
            let j = [obj("x", b)];
            if scenery_change(&i, &j, hi).unwrap() == SceneryLabel::Changed {
                prop_assert_eq!(scenery_change(&i, &j, lo).unwrap(), SceneryLabel::Changed);
            }
        }
    }
}
