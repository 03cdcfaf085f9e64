//! Planar geometry kernel and buffered point-to-tract assignment.
//!
//! All coordinates are in a projected planar CRS (feet by convention). A point
//! belongs to a tract when its distance to the tract geometry is at most the
//! buffer distance; points on a boundary are inside. A point near a shared
//! border is assigned to every tract whose buffer covers it.

use rstar::{RTree, RTreeObject, AABB};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square feet per square mile.
pub const SQ_FEET_PER_SQ_MILE: f64 = 5280.0 * 5280.0;

/// Default buffer radius, in CRS units (feet).
pub const DEFAULT_BUFFER: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPoint {
    pub x: f64,
    pub y: f64,
}

impl PlanarPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A closed polygon ring set: one outer boundary plus zero or more holes.
///
/// Rings are stored closed (first point repeated at the end). Construct with
/// [`PolygonShape::new`], which rejects open, degenerate or self-intersecting
/// outer rings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonShape {
    outer: Vec<PlanarPoint>,
    holes: Vec<Vec<PlanarPoint>>,
}

impl PolygonShape {
    pub fn new(outer: Vec<PlanarPoint>, holes: Vec<Vec<PlanarPoint>>) -> Result<Self> {
        validate_ring(&outer, "outer ring")?;
        if ring_self_intersects(&outer) {
            return Err(Error::Geometry("outer ring is self-intersecting".into()));
        }
        for (i, hole) in holes.iter().enumerate() {
            validate_ring(hole, &format!("hole {i}"))?;
        }
        let shape = Self { outer, holes };
        if shape.planar_area() <= 0.0 {
            return Err(Error::Geometry("polygon has zero area".into()));
        }
        Ok(shape)
    }

    /// Axis-aligned rectangle, counter-clockwise.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let ring = vec![
            PlanarPoint::new(x0, y0),
            PlanarPoint::new(x1, y0),
            PlanarPoint::new(x1, y1),
            PlanarPoint::new(x0, y1),
            PlanarPoint::new(x0, y0),
        ];
        Self::new(ring, Vec::new())
    }

    pub fn outer(&self) -> &[PlanarPoint] {
        &self.outer
    }

    pub fn holes(&self) -> &[Vec<PlanarPoint>] {
        &self.holes
    }

    /// Shoelace area of the outer ring minus the holes, in squared CRS units.
    pub fn planar_area(&self) -> f64 {
        let holes: f64 = self.holes.iter().map(|h| signed_ring_area(h).abs()).sum();
        signed_ring_area(&self.outer).abs() - holes
    }

    fn rings(&self) -> impl Iterator<Item = &[PlanarPoint]> {
        std::iter::once(self.outer.as_slice()).chain(self.holes.iter().map(Vec::as_slice))
    }

    fn envelope(&self) -> (PlanarPoint, PlanarPoint) {
        bounds(&self.outer)
    }
}

fn validate_ring(ring: &[PlanarPoint], what: &str) -> Result<()> {
    if ring.len() < 4 {
        return Err(Error::Geometry(format!("{what} has fewer than 4 points")));
    }
    if ring.iter().any(|p| !p.is_finite()) {
        return Err(Error::Geometry(format!("{what} has a non-finite coordinate")));
    }
    if ring.first() != ring.last() {
        return Err(Error::Geometry(format!("{what} is not closed")));
    }
    if signed_ring_area(ring) == 0.0 {
        return Err(Error::Geometry(format!("{what} has zero area")));
    }
    Ok(())
}

/// Signed shoelace area; positive for counter-clockwise rings.
pub fn signed_ring_area(ring: &[PlanarPoint]) -> f64 {
    let twice: f64 = ring.windows(2).map(|w| w[0].x * w[1].y - w[1].x * w[0].y).sum();
    twice / 2.0
}

fn bounds(ring: &[PlanarPoint]) -> (PlanarPoint, PlanarPoint) {
    let mut lo = PlanarPoint::new(f64::INFINITY, f64::INFINITY);
    let mut hi = PlanarPoint::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in ring {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    (lo, hi)
}

fn cross(o: PlanarPoint, a: PlanarPoint, b: PlanarPoint) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(p: PlanarPoint, a: PlanarPoint, b: PlanarPoint) -> bool {
    cross(a, b, p) == 0.0 && p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

fn segments_intersect(a: PlanarPoint, b: PlanarPoint, c: PlanarPoint, d: PlanarPoint) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    on_segment(a, c, d) || on_segment(b, c, d) || on_segment(c, a, b) || on_segment(d, a, b)
}

/// O(n²) check over non-adjacent edge pairs.
fn ring_self_intersects(ring: &[PlanarPoint]) -> bool {
    let n = ring.len() - 1;
    for i in 0..n {
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // Adjacent edges share a vertex; they overlap only when collinear and folding back.
                let (shared, other_i, other_j) =
                    if j == i + 1 { (ring[j], ring[i], ring[j + 1]) } else { (ring[i], ring[i + 1], ring[j]) };
                let folds_back = cross(shared, other_i, other_j) == 0.0
                    && (other_i.x - shared.x) * (other_j.x - shared.x)
                        + (other_i.y - shared.y) * (other_j.y - shared.y)
                        > 0.0;
                if folds_back {
                    return true;
                }
                continue;
            }
            if segments_intersect(ring[i], ring[i + 1], ring[j], ring[j + 1]) {
                return true;
            }
        }
    }
    false
}

/// Even-odd crossing test for a single ring, boundary excluded.
fn strictly_inside_ring(p: PlanarPoint, ring: &[PlanarPoint]) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

fn on_ring_boundary(p: PlanarPoint, ring: &[PlanarPoint]) -> bool {
    ring.windows(2).any(|w| on_segment(p, w[0], w[1]))
}

/// Even-odd point-in-polygon test with boundary points (including hole
/// boundaries) counted as inside.
pub fn point_in_polygon(p: PlanarPoint, poly: &PolygonShape) -> bool {
    let in_outer = on_ring_boundary(p, &poly.outer) || strictly_inside_ring(p, &poly.outer);
    if !in_outer {
        return false;
    }
    !poly.holes.iter().any(|h| !on_ring_boundary(p, h) && strictly_inside_ring(p, h))
}

fn point_segment_distance(p: PlanarPoint, a: PlanarPoint, b: PlanarPoint) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.x + t * dx, a.y + t * dy);
    (p.x - cx).hypot(p.y - cy)
}

/// Zero when the point is inside (or on) the polygon, otherwise the minimum
/// Euclidean distance to any ring segment.
pub fn distance_point_polygon(p: PlanarPoint, poly: &PolygonShape) -> f64 {
    if point_in_polygon(p, poly) {
        return 0.0;
    }
    poly.rings().flat_map(|r| r.windows(2)).map(|w| point_segment_distance(p, w[0], w[1])).fold(f64::INFINITY, f64::min)
}

/// A census tract: identifier, (multi-)polygon and area in square miles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractGeometry {
    pub tract_id: String,
    pub shapes: Vec<PolygonShape>,
    pub area_sq_mi: f64,
}

/// Relative tolerance between a declared area and the shoelace area.
pub const AREA_TOLERANCE: f64 = 1e-3;

impl TractGeometry {
    /// Builds a tract, computing the area from geometry when `declared_area`
    /// is absent and validating it against the geometry otherwise.
    /// `sq_units_per_sq_mile` converts squared CRS units into square miles.
    pub fn new(
        tract_id: impl Into<String>,
        shapes: Vec<PolygonShape>,
        declared_area: Option<f64>,
        sq_units_per_sq_mile: f64,
    ) -> Result<Self> {
        let tract_id = tract_id.into();
        if shapes.is_empty() {
            return Err(Error::Geometry(format!("tract {tract_id} has no polygons")));
        }
        let computed = shapes.iter().map(PolygonShape::planar_area).sum::<f64>() / sq_units_per_sq_mile;
        let area_sq_mi = match declared_area {
            Some(a) => {
                if !(a > 0.0) || ((a - computed) / computed).abs() > AREA_TOLERANCE {
                    return Err(Error::Geometry(format!(
                        "tract {tract_id}: declared area {a} sq mi disagrees with geometry ({computed} sq mi)"
                    )));
                }
                a
            }
            None => computed,
        };
        if !(area_sq_mi > 0.0) {
            return Err(Error::Geometry(format!("tract {tract_id} has nonpositive area")));
        }
        Ok(Self { tract_id, shapes, area_sq_mi })
    }

    pub fn distance_to(&self, p: PlanarPoint) -> f64 {
        self.shapes.iter().map(|s| distance_point_polygon(p, s)).fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, p: PlanarPoint) -> bool {
        self.shapes.iter().any(|s| point_in_polygon(p, s))
    }

    fn envelope(&self) -> AABB<[f64; 2]> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for s in &self.shapes {
            let (a, b) = s.envelope();
            lo = [lo[0].min(a.x), lo[1].min(a.y)];
            hi = [hi[0].max(b.x), hi[1].max(b.y)];
        }
        AABB::from_corners(lo, hi)
    }
}

struct IndexEntry {
    slot: usize,
    envelope: AABB<[f64; 2]>,
}

impl RTreeObject for IndexEntry {
    type Envelope = AABB<[f64; 2]>;

    fn envelope(&self) -> Self::Envelope {
        self.envelope
    }
}

/// R-tree over tract bounding boxes. Immutable after construction.
///
/// Queries expand the point by the buffer radius and intersect it with the
/// raw boxes, so no tract whose buffered geometry holds the point is missed;
/// candidates are then filtered with the exact distance test.
pub struct SpatialIndex {
    tracts: Vec<TractGeometry>,
    tree: RTree<IndexEntry>,
}

impl SpatialIndex {
    pub fn new(tracts: Vec<TractGeometry>) -> Self {
        let entries = tracts.iter().enumerate().map(|(slot, t)| IndexEntry { slot, envelope: t.envelope() }).collect();
        Self { tracts, tree: RTree::bulk_load(entries) }
    }

    pub fn tracts(&self) -> &[TractGeometry] {
        &self.tracts
    }

    pub fn into_tracts(self) -> Vec<TractGeometry> {
        self.tracts
    }

    /// Positions (into [`SpatialIndex::tracts`]) of every tract within
    /// `buffer` of `p`, ascending.
    pub fn assign_slots(&self, p: PlanarPoint, buffer: f64) -> Vec<usize> {
        let query = AABB::from_corners([p.x - buffer, p.y - buffer], [p.x + buffer, p.y + buffer]);
        let mut slots: Vec<usize> = self
            .tree
            .locate_in_envelope_intersecting(&query)
            .filter(|e| self.tracts[e.slot].distance_to(p) <= buffer)
            .map(|e| e.slot)
            .collect();
        slots.sort_unstable();
        slots
    }

    /// Identifiers of every tract within `buffer` of `p`, in index order.
    pub fn assign_tracts(&self, p: PlanarPoint, buffer: f64) -> Vec<&str> {
        self.assign_slots(p, buffer).into_iter().map(|s| self.tracts[s].tract_id.as_str()).collect()
    }
}

/// Linear scan over every tract; reference for the index.
pub fn assign_slots_brute_force(tracts: &[TractGeometry], p: PlanarPoint, buffer: f64) -> Vec<usize> {
    tracts.iter().enumerate().filter(|(_, t)| t.distance_to(p) <= buffer).map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square() -> PolygonShape {
        PolygonShape::rectangle(0.0, 0.0, 100.0, 100.0).unwrap()
    }

    fn ring(pts: &[(f64, f64)]) -> Vec<PlanarPoint> {
        pts.iter().map(|&(x, y)| PlanarPoint::new(x, y)).collect()
    }

    fn square_with_hole() -> PolygonShape {
        let outer = square().outer().to_vec();
        let hole = ring(&[(40.0, 40.0), (60.0, 40.0), (60.0, 60.0), (40.0, 60.0), (40.0, 40.0)]);
        PolygonShape::new(outer, vec![hole]).unwrap()
    }

    #[test]
    fn interior_and_exterior_points() {
        assert!(point_in_polygon(PlanarPoint::new(50.0, 50.0), &square()));
        assert!(!point_in_polygon(PlanarPoint::new(150.0, 50.0), &square()));
    }

    #[test]
    fn point_inside_hole_is_outside() {
        let poly = square_with_hole();
        assert!(!point_in_polygon(PlanarPoint::new(50.0, 50.0), &poly));
        assert!(point_in_polygon(PlanarPoint::new(20.0, 50.0), &poly));
        // hole boundary belongs to the polygon
        assert!(point_in_polygon(PlanarPoint::new(40.0, 50.0), &poly));
        assert_eq!(distance_point_polygon(PlanarPoint::new(50.0, 50.0), &poly), 10.0);
    }

    #[test]
    fn boundary_points_are_inside() {
        let sq = square();
        for p in [(0.0, 50.0), (100.0, 100.0), (50.0, 0.0), (0.0, 0.0)] {
            assert!(point_in_polygon(PlanarPoint::new(p.0, p.1), &sq), "{p:?}");
        }
    }

    #[test]
    fn distances_to_square() {
        let sq = square();
        assert_eq!(distance_point_polygon(PlanarPoint::new(150.0, 50.0), &sq), 50.0);
        assert_eq!(distance_point_polygon(PlanarPoint::new(50.0, 50.0), &sq), 0.0);
        let d = distance_point_polygon(PlanarPoint::new(110.0, 110.0), &sq);
        assert!((d - 200f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unit_square_area_is_one() {
        let unit = PolygonShape::rectangle(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(signed_ring_area(unit.outer()), 1.0);
        assert_eq!(unit.planar_area(), 1.0);
    }

    #[test]
    fn rejects_invalid_rings() {
        let open = ring(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        assert!(PolygonShape::new(open, vec![]).is_err());
        let bowtie = ring(&[(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0), (0.0, 0.0)]);
        assert!(PolygonShape::new(bowtie, vec![]).is_err());
        let flat = ring(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (0.0, 0.0)]);
        assert!(PolygonShape::new(flat, vec![]).is_err());
        let short = ring(&[(0.0, 0.0), (1.0, 0.0), (0.0, 0.0)]);
        assert!(PolygonShape::new(short, vec![]).is_err());
    }

    #[test]
    fn tract_area_validation() {
        let shape = PolygonShape::rectangle(0.0, 0.0, 5280.0, 5280.0).unwrap();
        let t = TractGeometry::new("a", vec![shape.clone()], None, SQ_FEET_PER_SQ_MILE).unwrap();
        assert!((t.area_sq_mi - 1.0).abs() < 1e-12);
        assert!(TractGeometry::new("a", vec![shape.clone()], Some(1.0005), SQ_FEET_PER_SQ_MILE).is_ok());
        assert!(TractGeometry::new("a", vec![shape], Some(1.01), SQ_FEET_PER_SQ_MILE).is_err());
    }

    fn two_tracts() -> SpatialIndex {
        let a =
            TractGeometry::new("A", vec![PolygonShape::rectangle(0.0, 0.0, 100.0, 100.0).unwrap()], None, 1.0).unwrap();
        let b = TractGeometry::new("B", vec![PolygonShape::rectangle(100.0, 0.0, 200.0, 100.0).unwrap()], None, 1.0)
            .unwrap();
        let c = TractGeometry::new("C", vec![PolygonShape::rectangle(0.0, 400.0, 100.0, 500.0).unwrap()], None, 1.0)
            .unwrap();
        SpatialIndex::new(vec![a, b, c])
    }

    #[test]
    fn buffered_assignment() {
        let idx = two_tracts();
        // 30 ft below A's bottom edge, far from C
        let far =
            TractGeometry::new("A", vec![PolygonShape::rectangle(0.0, 0.0, 100.0, 100.0).unwrap()], None, 1.0).unwrap();
        let single = SpatialIndex::new(vec![far]);
        assert_eq!(single.assign_tracts(PlanarPoint::new(50.0, -30.0), 50.0), vec!["A"]);
        assert_eq!(idx.assign_tracts(PlanarPoint::new(100.0, 50.0), 50.0), vec!["A", "B"]);
        assert_eq!(idx.assign_tracts(PlanarPoint::new(50.0, 50.0), 0.0), vec!["A"]);
        assert!(idx.assign_tracts(PlanarPoint::new(50.0, 250.0), 50.0).is_empty());
        // 30 ft left of A: only A within 50 ft
        assert_eq!(idx.assign_tracts(PlanarPoint::new(-30.0, 50.0), 50.0), vec!["A"]);
    }

    proptest! {
        #[test]
        fn index_matches_brute_force(x in -100.0f64..300.0, y in -100.0f64..600.0, buffer in 0.0f64..120.0) {
            let idx = two_tracts();
            let p = PlanarPoint::new(x, y);
            prop_assert_eq!(idx.assign_slots(p, buffer), assign_slots_brute_force(idx.tracts(), p, buffer));
        }

        #[test]
        fn assignment_monotone_in_buffer(x in -100.0f64..300.0, y in -100.0f64..600.0, b1 in 0.0f64..100.0, extra in 0.0f64..100.0) {
            let idx = two_tracts();
            let p = PlanarPoint::new(x, y);
            let small = idx.assign_slots(p, b1);
            let large = idx.assign_slots(p, b1 + extra);
            prop_assert!(small.iter().all(|s| large.contains(s)));
        }

        #[test]
        fn zero_distance_iff_inside(x in -50.0f64..150.0, y in -50.0f64..150.0) {
            let poly = square_with_hole();
            let p = PlanarPoint::new(x, y);
            prop_assert_eq!(distance_point_polygon(p, &poly) == 0.0, point_in_polygon(p, &poly));
        }
    }
}
