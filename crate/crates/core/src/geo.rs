//! Geometric primitives shared by all spatial logic.
//!
//! Distances between pings and homes use the haversine formula. Gridding and
//! boundary distances use a local equirectangular projection, which keeps the
//! error under 0.1% at county extents (a few tens of kilometres) without
//! pulling in a projection library.

use std::cmp::Ordering;

use thiserror::Error;

/// Mean Earth radius used by both the projection and haversine, in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const EARTH_RADIUS_KM: f64 = 6_371.0;
pub const KM_PER_MILE: f64 = 1.609_344;
/// Five statute miles in kilometres (8.04672).
pub const FIVE_MILES_KM: f64 = 5.0 * KM_PER_MILE;

/// Tolerance (degrees) for treating a point as lying on a ring edge.
const BOUNDARY_EPS_DEG: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("point ({lat}, {lon}) lies outside the grid")]
    OutsideGrid { lat: f64, lon: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid ring: {0}")]
    InvalidRing(String),
    #[error("point lies inside the zone; boundary distance is only defined outside")]
    InsideZone,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub const fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Metres east and north of a projection origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Planar {
    pub east: f64,
    pub north: f64,
}

impl Planar {
    pub fn new(east: f64, north: f64) -> Self {
        Self { east, north }
    }

    fn sub(self, other: Planar) -> Planar {
        Planar::new(self.east - other.east, self.north - other.north)
    }

    fn dot(self, other: Planar) -> f64 {
        self.east * other.east + self.north * other.north
    }

    fn norm(self) -> f64 {
        self.east.hypot(self.north)
    }
}

/// Local equirectangular projection of `p` around `origin`.
pub fn project(p: GeoPoint, origin: GeoPoint) -> Planar {
    let cos0 = origin.lat.to_radians().cos();
    Planar {
        east: EARTH_RADIUS_M * (p.lon - origin.lon).to_radians() * cos0,
        north: EARTH_RADIUS_M * (p.lat - origin.lat).to_radians(),
    }
}

/// Inverse of [`project`].
pub fn unproject(q: Planar, origin: GeoPoint) -> GeoPoint {
    let cos0 = origin.lat.to_radians().cos();
    GeoPoint {
        lat: origin.lat + (q.north / EARTH_RADIUS_M).to_degrees(),
        lon: origin.lon + (q.east / (EARTH_RADIUS_M * cos0)).to_degrees(),
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn around(p: GeoPoint) -> Self {
        Self {
            min_lat: p.lat,
            min_lon: p.lon,
            max_lat: p.lat,
            max_lon: p.lon,
        }
    }

    pub fn from_points<I: IntoIterator<Item = GeoPoint>>(points: I) -> Option<Self> {
        let mut it = points.into_iter();
        let mut bbox = Self::around(it.next()?);
        for p in it {
            bbox.extend(p);
        }
        Some(bbox)
    }

    pub fn extend(&mut self, p: GeoPoint) {
        self.min_lat = self.min_lat.min(p.lat);
        self.min_lon = self.min_lon.min(p.lon);
        self.max_lat = self.max_lat.max(p.lat);
        self.max_lon = self.max_lon.max(p.lon);
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            min_lat: self.min_lat.min(other.min_lat),
            min_lon: self.min_lon.min(other.min_lon),
            max_lat: self.max_lat.max(other.max_lat),
            max_lon: self.max_lon.max(other.max_lon),
        }
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lat >= self.min_lat
            && p.lat <= self.max_lat
            && p.lon >= self.min_lon
            && p.lon <= self.max_lon
    }

    pub fn southwest(&self) -> GeoPoint {
        GeoPoint::new(self.min_lat, self.min_lon)
    }

    pub fn northeast(&self) -> GeoPoint {
        GeoPoint::new(self.max_lat, self.max_lon)
    }
}

/// Grid cell address. Ordered by `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellIndex {
    pub col: u32,
    pub row: u32,
}

impl CellIndex {
    pub fn new(col: u32, row: u32) -> Self {
        Self { col, row }
    }
}

impl Ord for CellIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.row, self.col).cmp(&(other.row, other.col))
    }
}

impl PartialOrd for CellIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A square metric grid anchored at its southwest corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: GeoPoint,
    pub cell_size_m: f64,
    pub n_cols: u32,
    pub n_rows: u32,
}

impl GridSpec {
    pub fn new(
        origin: GeoPoint,
        cell_size_m: f64,
        n_cols: u32,
        n_rows: u32,
    ) -> Result<Self, GeoError> {
        if !(cell_size_m.is_finite() && cell_size_m > 0.0) {
            return Err(GeoError::InvalidGrid(format!(
                "cell size must be positive, got {cell_size_m}"
            )));
        }
        if n_cols == 0 || n_rows == 0 {
            return Err(GeoError::InvalidGrid(
                "grid must have at least one row and column".into(),
            ));
        }
        if !origin.is_valid() {
            return Err(GeoError::InvalidGrid("origin out of range".into()));
        }
        Ok(Self {
            origin,
            cell_size_m,
            n_cols,
            n_rows,
        })
    }

    /// Grid covering `bbox` with one cell of padding on every side.
    pub fn covering(bbox: &BoundingBox, cell_size_m: f64) -> Result<Self, GeoError> {
        if !(cell_size_m.is_finite() && cell_size_m > 0.0) {
            return Err(GeoError::InvalidGrid(format!(
                "cell size must be positive, got {cell_size_m}"
            )));
        }
        let sw = bbox.southwest();
        // Pad by one cell in the projection anchored at the unpadded corner.
        let padded = unproject(Planar::new(-cell_size_m, -cell_size_m), sw);
        let origin = GeoPoint::new(padded.lat.max(-90.0), padded.lon.max(-180.0));
        let extent = project(bbox.northeast(), origin);
        let n_cols = (extent.east / cell_size_m).floor() as u64 + 2;
        let n_rows = (extent.north / cell_size_m).floor() as u64 + 2;
        if n_cols > u32::MAX as u64 || n_rows > u32::MAX as u64 {
            return Err(GeoError::InvalidGrid(
                "bounding box too large for cell size".into(),
            ));
        }
        Self::new(origin, cell_size_m, n_cols as u32, n_rows as u32)
    }

    /// Left-closed cell containing `p`.
    pub fn cell_index(&self, p: GeoPoint) -> Result<CellIndex, GeoError> {
        let q = project(p, self.origin);
        let col = (q.east / self.cell_size_m).floor();
        let row = (q.north / self.cell_size_m).floor();
        if col < 0.0
            || row < 0.0
            || col >= self.n_cols as f64
            || row >= self.n_rows as f64
            || col.is_nan()
            || row.is_nan()
        {
            return Err(GeoError::OutsideGrid {
                lat: p.lat,
                lon: p.lon,
            });
        }
        Ok(CellIndex::new(col as u32, row as u32))
    }

    pub fn cell_centroid(&self, c: CellIndex) -> GeoPoint {
        let s = self.cell_size_m;
        unproject(
            Planar::new((c.col as f64 + 0.5) * s, (c.row as f64 + 0.5) * s),
            self.origin,
        )
    }
}

/// A closed ring of vertices; first vertex equals the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Ring {
    vertices: Vec<GeoPoint>,
}

impl Ring {
    /// Validates closure, vertex count and simplicity.
    pub fn new(vertices: Vec<GeoPoint>) -> Result<Self, GeoError> {
        if vertices.len() < 4 {
            return Err(GeoError::InvalidRing(format!(
                "ring needs at least 4 vertices (closed triangle), got {}",
                vertices.len()
            )));
        }
        if let Some(bad) = vertices.iter().find(|p| !p.is_valid()) {
            return Err(GeoError::InvalidRing(format!(
                "vertex ({}, {}) out of range",
                bad.lat, bad.lon
            )));
        }
        if vertices.first() != vertices.last() {
            return Err(GeoError::InvalidRing(
                "ring is not closed (first vertex != last vertex)".into(),
            ));
        }
        let mut deduped = vertices;
        deduped.dedup();
        if deduped.len() < 4 {
            return Err(GeoError::InvalidRing(
                "ring collapses to fewer than 3 distinct vertices".into(),
            ));
        }
        let ring = Self { vertices: deduped };
        if let Some((i, j)) = ring.find_self_intersection() {
            return Err(GeoError::InvalidRing(format!(
                "ring self-intersects (edges {i} and {j})"
            )));
        }
        Ok(ring)
    }

    /// Axis-aligned rectangle, counterclockwise.
    pub fn rectangle(south: f64, west: f64, north: f64, east: f64) -> Result<Self, GeoError> {
        Self::new(vec![
            GeoPoint::new(south, west),
            GeoPoint::new(south, east),
            GeoPoint::new(north, east),
            GeoPoint::new(north, west),
            GeoPoint::new(south, west),
        ])
    }

    pub fn vertices(&self) -> &[GeoPoint] {
        &self.vertices
    }

    pub fn edges(&self) -> impl Iterator<Item = (GeoPoint, GeoPoint)> + '_ {
        self.vertices.windows(2).map(|w| (w[0], w[1]))
    }

    /// Twice the signed area in degree space; positive for counterclockwise.
    pub fn signed_area2(&self) -> f64 {
        self.edges()
            .map(|(a, b)| a.lon * b.lat - b.lon * a.lat)
            .sum()
    }

    fn on_boundary(&self, p: GeoPoint) -> bool {
        self.edges().any(|(a, b)| on_segment(p, a, b))
    }

    fn crossings(&self, p: GeoPoint) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.lat > p.lat) != (b.lat > p.lat) {
                let x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
                if p.lon < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    fn find_self_intersection(&self) -> Option<(usize, usize)> {
        let n = self.vertices.len() - 1;
        let mut order: Vec<usize> = (0..n).collect();
        let seg = |i: usize| (self.vertices[i], self.vertices[i + 1]);
        let min_lon = |i: usize| seg(i).0.lon.min(seg(i).1.lon);
        let max_lon = |i: usize| seg(i).0.lon.max(seg(i).1.lon);
        order.sort_by(|&i, &j| min_lon(i).total_cmp(&min_lon(j)));
        for (k, &i) in order.iter().enumerate() {
            let reach = max_lon(i);
            for &j in &order[k + 1..] {
                if min_lon(j) > reach {
                    break;
                }
                let (lo, hi) = if i < j { (i, j) } else { (j, i) };
                let adjacent = hi == lo + 1 || (lo == 0 && hi == n - 1);
                let (a, b) = seg(lo);
                let (c, d) = seg(hi);
                if adjacent {
                    // Shared vertex only; reject collinear overlap.
                    let shared_is_end = hi == lo + 1;
                    let (other_a, other_b) = if shared_is_end { (a, d) } else { (b, c) };
                    let pivot = if shared_is_end { b } else { a };
                    if cross(pivot, other_a, other_b) == 0.0
                        && (other_a.lat - pivot.lat) * (other_b.lat - pivot.lat)
                            + (other_a.lon - pivot.lon) * (other_b.lon - pivot.lon)
                            > 0.0
                    {
                        return Some((lo, hi));
                    }
                } else if segments_intersect(a, b, c, d) {
                    return Some((lo, hi));
                }
            }
        }
        None
    }
}

fn cross(o: GeoPoint, a: GeoPoint, b: GeoPoint) -> f64 {
    (a.lon - o.lon) * (b.lat - o.lat) - (a.lat - o.lat) * (b.lon - o.lon)
}

fn within_box(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> bool {
    p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
        && p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
}

fn segments_intersect(a: GeoPoint, b: GeoPoint, c: GeoPoint, d: GeoPoint) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && within_box(a, c, d))
        || (d2 == 0.0 && within_box(b, c, d))
        || (d3 == 0.0 && within_box(c, a, b))
        || (d4 == 0.0 && within_box(d, a, b))
}

fn on_segment(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> bool {
    let len = (b.lon - a.lon).hypot(b.lat - a.lat);
    if len == 0.0 {
        return (p.lon - a.lon).abs() <= BOUNDARY_EPS_DEG
            && (p.lat - a.lat).abs() <= BOUNDARY_EPS_DEG;
    }
    cross(a, b, p).abs() <= BOUNDARY_EPS_DEG * len
        && p.lon >= a.lon.min(b.lon) - BOUNDARY_EPS_DEG
        && p.lon <= a.lon.max(b.lon) + BOUNDARY_EPS_DEG
        && p.lat >= a.lat.min(b.lat) - BOUNDARY_EPS_DEG
        && p.lat <= a.lat.max(b.lat) + BOUNDARY_EPS_DEG
}

/// One outer ring with optional holes.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Ring,
    pub holes: Vec<Ring>,
}

impl Polygon {
    pub fn new(exterior: Ring, holes: Vec<Ring>) -> Self {
        Self { exterior, holes }
    }

    fn rings(&self) -> impl Iterator<Item = &Ring> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }

    fn contains(&self, p: GeoPoint) -> bool {
        if self.rings().any(|r| r.on_boundary(p)) {
            return true;
        }
        self.rings()
            .fold(false, |inside, r| inside ^ r.crossings(p))
    }
}

/// Zone or tract geometry: one or more polygons (a MultiPolygon).
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneGeometry {
    polygons: Vec<Polygon>,
    bbox: BoundingBox,
}

impl ZoneGeometry {
    pub fn new(polygons: Vec<Polygon>) -> Result<Self, GeoError> {
        let bbox = BoundingBox::from_points(
            polygons
                .iter()
                .flat_map(|poly| poly.exterior.vertices().iter().copied()),
        )
        .ok_or_else(|| GeoError::InvalidRing("geometry has no polygons".into()))?;
        Ok(Self { polygons, bbox })
    }

    pub fn from_ring(ring: Ring) -> Self {
        Self::new(vec![Polygon::new(ring, Vec::new())]).expect("ring is non-empty")
    }

    pub fn rectangle(south: f64, west: f64, north: f64, east: f64) -> Result<Self, GeoError> {
        Ok(Self::from_ring(Ring::rectangle(south, west, north, east)?))
    }

    pub fn polygons(&self) -> &[Polygon] {
        &self.polygons
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    /// Even-odd containment; boundary points are inside, hole interiors are not.
    pub fn contains(&self, p: GeoPoint) -> bool {
        let eps = BOUNDARY_EPS_DEG;
        if p.lat < self.bbox.min_lat - eps
            || p.lat > self.bbox.max_lat + eps
            || p.lon < self.bbox.min_lon - eps
            || p.lon > self.bbox.max_lon + eps
        {
            return false;
        }
        self.polygons.iter().any(|poly| poly.contains(p))
    }

    /// Distance from `p` (outside the zone) to the nearest boundary point.
    pub fn distance_to_boundary_km(&self, p: GeoPoint) -> Result<f64, GeoError> {
        if self.contains(p) {
            return Err(GeoError::InsideZone);
        }
        Ok(self.boundary_distance_km(p))
    }

    /// Distance to the nearest ring edge regardless of which side `p` is on.
    pub fn boundary_distance_km(&self, p: GeoPoint) -> f64 {
        let here = Planar::new(0.0, 0.0);
        let mut best = f64::INFINITY;
        for ring in self.polygons.iter().flat_map(|poly| poly.rings()) {
            let mut prev: Option<Planar> = None;
            for &v in ring.vertices() {
                let q = project(v, p);
                if let Some(a) = prev {
                    best = best.min(point_segment_distance(here, a, q));
                }
                prev = Some(q);
            }
        }
        best / 1000.0
    }

    pub fn vertex_count(&self) -> usize {
        self.polygons
            .iter()
            .flat_map(|poly| poly.rings())
            .map(|r| r.vertices().len())
            .sum()
    }
}

/// Euclidean distance from `p` to the segment `ab`, clamped to its endpoints.
pub fn point_segment_distance(p: Planar, a: Planar, b: Planar) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.sub(a).norm();
    }
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    let foot = Planar::new(a.east + t * ab.east, a.north + t * ab.north);
    p.sub(foot).norm()
}
