//! Observation windows and the geometric quantities derived from them.
//!
//! A [`Window`] is the spatial region `W` together with the study period
//! `(0, t_max]`. It is held as polygons (exterior rings with holes), as a
//! pixel mask, or both. Polygon evaluation is exact; the raster path treats
//! the window as the union of its inside cells and is exact for that union.

use alloc::vec::Vec;
use core::f64::consts::PI;

use thiserror::Error;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dist(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        libm::sqrt(dx * dx + dy * dy)
    }

    #[inline]
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    #[inline]
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    #[inline]
    fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }

    #[inline]
    fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    #[inline]
    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }
}

/// The closed disc `b(center, radius)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    pub center: Point,
    pub radius: f64,
}

impl Disc {
    pub fn new(center: Point, radius: f64) -> Result<Self, GeometryError> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(GeometryError::NegativeRadius(radius));
        }
        Ok(Self { center, radius })
    }

    pub fn area(&self) -> f64 {
        PI * self.radius * self.radius
    }

    fn bbox(&self) -> Rect {
        let r = self.radius;
        Rect::new(
            Point::new(self.center.x - r, self.center.y - r),
            Point::new(self.center.x + r, self.center.y + r),
        )
    }
}

/// Axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub const fn new(min: Point, max: Point) -> Self {
        Self { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn intersect(&self, o: &Rect) -> Option<Rect> {
        let min = Point::new(self.min.x.max(o.min.x), self.min.y.max(o.min.y));
        let max = Point::new(self.max.x.min(o.max.x), self.max.y.min(o.max.y));
        (min.x < max.x && min.y < max.y).then_some(Rect { min, max })
    }

    fn union(&self, o: &Rect) -> Rect {
        Rect::new(
            Point::new(self.min.x.min(o.min.x), self.min.y.min(o.min.y)),
            Point::new(self.max.x.max(o.max.x), self.max.y.max(o.max.y)),
        )
    }

    fn of_points(pts: &[Point]) -> Rect {
        let mut r = Rect::new(
            Point::new(f64::INFINITY, f64::INFINITY),
            Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        );
        for p in pts {
            r.min.x = r.min.x.min(p.x);
            r.min.y = r.min.y.min(p.y);
            r.max.x = r.max.x.max(p.x);
            r.max.y = r.max.y.max(p.y);
        }
        r
    }

    /// Counter-clockwise corner ring.
    fn ring(&self) -> [Point; 4] {
        [
            self.min,
            Point::new(self.max.x, self.min.y),
            self.max,
            Point::new(self.min.x, self.max.y),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("ring {ring} has {vertices} distinct vertices, at least 3 are required")]
    DegenerateRing { ring: usize, vertices: usize },
    #[error("ring {ring} is self-intersecting (edges {edge_a} and {edge_b})")]
    SelfIntersecting { ring: usize, edge_a: usize, edge_b: usize },
    #[error("polygons {first} and {second} share an edge; merge them before ingestion")]
    SharedEdge { first: usize, second: usize },
    #[error("non-finite coordinate in ring {ring}")]
    NonFinite { ring: usize },
    #[error("window area must be positive, got {0}")]
    NonPositiveArea(f64),
    #[error("study period length must be positive, got {0}")]
    InvalidPeriod(f64),
    #[error("raster area {raster} disagrees with polygon area {polygon} by more than 0.1%")]
    RasterMismatch { polygon: f64, raster: f64 },
    #[error("raster of {ncols}x{nrows} cells needs {expected} mask entries, got {got}")]
    RasterShape { ncols: usize, nrows: usize, expected: usize, got: usize },
    #[error("raster cell size must be positive, got {0}")]
    RasterCellSize(f64),
    #[error("window has no polygon representation")]
    NoPolygon,
    #[error("radius must be non-negative, got {0}")]
    NegativeRadius(f64),
    #[error("circle of radius {radius} around ({x}, {y}) lies entirely outside the window")]
    CircleOutside { x: f64, y: f64, radius: f64 },
    #[error("lag {lag} at time {t} has both endpoints outside (0, {t_max}]")]
    LagOutside { t: f64, lag: f64, t_max: f64 },
}

/// Polygon with an exterior ring and holes.
///
/// Rings are stored open (the closing vertex is not repeated), the exterior
/// counter-clockwise and holes clockwise, so the signed areas of all rings add
/// up to the polygon area.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    exterior: Vec<Point>,
    holes: Vec<Vec<Point>>,
    bbox: Rect,
}

fn ring_signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let o = ring[0];
    let mut acc = crate::sum::Kahan::new();
    for i in 1..n - 1 {
        acc.add(ring[i].sub(o).cross(ring[i + 1].sub(o)));
    }
    0.5 * acc.value()
}

fn normalize_ring(mut ring: Vec<Point>, idx: usize, ccw: bool) -> Result<Vec<Point>, GeometryError> {
    if ring.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(GeometryError::NonFinite { ring: idx });
    }
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    ring.dedup();
    let vertices = ring.len();
    if vertices < 3 {
        return Err(GeometryError::DegenerateRing { ring: idx, vertices });
    }
    let a = ring_signed_area(&ring);
    if a == 0.0 {
        return Err(GeometryError::DegenerateRing { ring: idx, vertices });
    }
    if (a > 0.0) != ccw {
        ring.reverse();
    }
    check_simple(&ring, idx)?;
    Ok(ring)
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    b.sub(a).cross(c.sub(a))
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

fn check_simple(ring: &[Point], idx: usize) -> Result<(), GeometryError> {
    let m = ring.len();
    let boxes: Vec<Rect> = (0..m).map(|i| Rect::of_points(&[ring[i], ring[(i + 1) % m]])).collect();
    for a in 0..m {
        let (a1, a2) = (ring[a], ring[(a + 1) % m]);
        for b in a + 1..m {
            let adjacent = b == a + 1 || (a == 0 && b == m - 1);
            let (b1, b2) = (ring[b], ring[(b + 1) % m]);
            if adjacent {
                // Adjacent edges share one vertex; they only overlap when folding back.
                let shared = if b == a + 1 { a2 } else { a1 };
                let (u, v) = if b == a + 1 { (a1, b2) } else { (a2, b1) };
                if orient(shared, u, v) == 0.0 && u.sub(shared).dot(v.sub(shared)) > 0.0 {
                    return Err(GeometryError::SelfIntersecting { ring: idx, edge_a: a, edge_b: b });
                }
                continue;
            }
            let (ba, bb) = (&boxes[a], &boxes[b]);
            if ba.max.x < bb.min.x || bb.max.x < ba.min.x || ba.max.y < bb.min.y || bb.max.y < ba.min.y {
                continue;
            }
            if segments_intersect(a1, a2, b1, b2) {
                return Err(GeometryError::SelfIntersecting { ring: idx, edge_a: a, edge_b: b });
            }
        }
    }
    Ok(())
}

/// Signed area of `b(0, r)` intersected with the triangle `(0, a, b)`.
///
/// Summing this over the directed edges of a ring (relative to the disc
/// centre) yields the signed area of the disc clipped to the ring.
fn tri_disc_signed(a: Point, b: Point, r: f64) -> f64 {
    let d = b.sub(a);
    let qa = d.dot(d);
    if qa == 0.0 {
        return 0.0;
    }
    let r2 = r * r;
    let qb = a.dot(d);
    let qc = a.dot(a) - r2;
    let disc = qb * qb - qa * qc;
    let mut cuts = [0.0, 1.0, 1.0, 1.0];
    let mut nc = 1;
    if disc > 0.0 {
        let s = libm::sqrt(disc);
        for root in [(-qb - s) / qa, (-qb + s) / qa] {
            if root > 0.0 && root < 1.0 {
                cuts[nc] = root;
                nc += 1;
            }
        }
    }
    cuts[nc] = 1.0;
    let mut total = 0.0;
    for k in 0..nc {
        let (s0, s1) = (cuts[k], cuts[k + 1]);
        if s1 <= s0 {
            continue;
        }
        let p = a.add(d.scale(s0));
        let q = a.add(d.scale(s1));
        let m = a.add(d.scale(0.5 * (s0 + s1)));
        if m.dot(m) <= r2 {
            total += 0.5 * p.cross(q);
        } else {
            total += 0.5 * r2 * libm::atan2(p.cross(q), p.dot(q));
        }
    }
    total
}

fn ring_disc_signed(ring: &[Point], disc: &Disc) -> f64 {
    let n = ring.len();
    let c = disc.center;
    let mut acc = crate::sum::Kahan::new();
    for i in 0..n {
        acc.add(tri_disc_signed(ring[i].sub(c), ring[(i + 1) % n].sub(c), disc.radius));
    }
    acc.value()
}

/// Angles (radians) at which the circle crosses segment `a -> b`.
fn circle_segment_angles(center: Point, r: f64, a: Point, b: Point, out: &mut Vec<f64>) {
    let a = a.sub(center);
    let d = b.sub(center).sub(a);
    let qa = d.dot(d);
    if qa == 0.0 {
        return;
    }
    let qb = a.dot(d);
    let qc = a.dot(a) - r * r;
    let disc = qb * qb - qa * qc;
    if disc < 0.0 {
        return;
    }
    let s = libm::sqrt(disc);
    for root in [(-qb - s) / qa, (-qb + s) / qa] {
        if (0.0..=1.0).contains(&root) {
            let p = a.add(d.scale(root));
            out.push(libm::atan2(p.y, p.x));
        }
    }
}

/// Fraction of the circle's circumference for which `inside` holds, given
/// every angle at which the circle may cross the region boundary.
fn arc_fraction(center: Point, r: f64, mut angles: Vec<f64>, inside: impl Fn(Point) -> bool) -> f64 {
    let at = |theta: f64| Point::new(center.x + r * libm::cos(theta), center.y + r * libm::sin(theta));
    if angles.is_empty() {
        return if inside(at(0.0)) { 1.0 } else { 0.0 };
    }
    angles.sort_by(f64::total_cmp);
    angles.dedup_by(|a, b| libm::fabs(*a - *b) < 1e-15);
    let n = angles.len();
    let mut inside_len = 0.0;
    for i in 0..n {
        let start = angles[i];
        let end = if i + 1 < n { angles[i + 1] } else { angles[0] + 2.0 * PI };
        let len = end - start;
        if len <= 0.0 {
            continue;
        }
        if inside(at(start + 0.5 * len)) {
            inside_len += len;
        }
    }
    (inside_len / (2.0 * PI)).clamp(0.0, 1.0)
}

/// Sutherland-Hodgman clip of a ring to a rectangle. The output may contain
/// degenerate edges along the rectangle boundary; signed-area integrals over
/// it are still exact.
fn clip_ring(ring: &[Point], rect: &Rect) -> Vec<Point> {
    let mut out: Vec<Point> = ring.to_vec();
    let planes: [(usize, f64, bool); 4] = [
        (0, rect.min.x, true),
        (0, rect.max.x, false),
        (1, rect.min.y, true),
        (1, rect.max.y, false),
    ];
    for (axis, bound, keep_greater) in planes {
        if out.is_empty() {
            break;
        }
        let coord = |p: &Point| if axis == 0 { p.x } else { p.y };
        let inside = |p: &Point| if keep_greater { coord(p) >= bound } else { coord(p) <= bound };
        let input = core::mem::take(&mut out);
        let n = input.len();
        for i in 0..n {
            let cur = input[i];
            let prev = input[(i + n - 1) % n];
            let (ci, pi) = (inside(&cur), inside(&prev));
            if ci != pi {
                let t = (bound - coord(&prev)) / (coord(&cur) - coord(&prev));
                let mut p = prev.add(cur.sub(prev).scale(t));
                if axis == 0 {
                    p.x = bound;
                } else {
                    p.y = bound;
                }
                out.push(p);
            }
            if ci {
                out.push(cur);
            }
        }
    }
    out
}

fn ring_contains(ring: &[Point], p: Point) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

impl Polygon {
    /// Builds a polygon, normalizing ring orientation and dropping a repeated
    /// closing vertex.
    pub fn new(exterior: Vec<Point>, holes: Vec<Vec<Point>>) -> Result<Self, GeometryError> {
        let exterior = normalize_ring(exterior, 0, true)?;
        let holes = holes
            .into_iter()
            .enumerate()
            .map(|(i, h)| normalize_ring(h, i + 1, false))
            .collect::<Result<Vec<_>, _>>()?;
        let bbox = Rect::of_points(&exterior);
        let poly = Self { exterior, holes, bbox };
        let area = poly.area();
        if !(area > 0.0) {
            return Err(GeometryError::NonPositiveArea(area));
        }
        Ok(poly)
    }

    pub fn rectangle(rect: Rect) -> Self {
        Self {
            exterior: rect.ring().to_vec(),
            holes: Vec::new(),
            bbox: rect,
        }
    }

    pub fn exterior(&self) -> &[Point] {
        &self.exterior
    }

    pub fn holes(&self) -> &[Vec<Point>] {
        &self.holes
    }

    fn rings(&self) -> impl Iterator<Item = &[Point]> {
        core::iter::once(self.exterior.as_slice()).chain(self.holes.iter().map(Vec::as_slice))
    }

    pub fn bbox(&self) -> Rect {
        self.bbox
    }

    /// Shoelace area with holes subtracted.
    pub fn area(&self) -> f64 {
        self.rings().map(ring_signed_area).sum()
    }

    pub fn contains(&self, p: Point) -> bool {
        if !self.bbox.contains(p) {
            return false;
        }
        self.rings().filter(|r| ring_contains(r, p)).count() % 2 == 1
    }

    /// `|disc ∩ polygon|`, exact.
    pub fn disc_area(&self, disc: &Disc) -> f64 {
        if disc.radius <= 0.0 || disc.bbox().intersect(&self.bbox).is_none() {
            return 0.0;
        }
        let a: f64 = self.rings().map(|r| ring_disc_signed(r, disc)).sum();
        a.max(0.0)
    }

    pub fn area_in_rect(&self, rect: &Rect) -> f64 {
        if rect.intersect(&self.bbox).is_none() {
            return 0.0;
        }
        let a: f64 = self.rings().map(|r| ring_signed_area(&clip_ring(r, rect))).sum();
        a.max(0.0)
    }

    pub fn disc_area_in_rect(&self, disc: &Disc, rect: &Rect) -> f64 {
        let Some(clip) = rect.intersect(&disc.bbox()) else {
            return 0.0;
        };
        if clip.intersect(&self.bbox).is_none() || disc.radius <= 0.0 {
            return 0.0;
        }
        let a: f64 = self
            .rings()
            .map(|r| {
                let c = clip_ring(r, rect);
                if c.len() < 3 {
                    0.0
                } else {
                    ring_disc_signed(&c, disc)
                }
            })
            .sum();
        a.max(0.0)
    }

    fn circle_angles(&self, center: Point, r: f64, out: &mut Vec<f64>) {
        let cb = Disc { center, radius: r }.bbox();
        for ring in self.rings() {
            let n = ring.len();
            for i in 0..n {
                let (a, b) = (ring[i], ring[(i + 1) % n]);
                if a.x.max(b.x) < cb.min.x || a.x.min(b.x) > cb.max.x || a.y.max(b.y) < cb.min.y || a.y.min(b.y) > cb.max.y {
                    continue;
                }
                circle_segment_angles(center, r, a, b, out);
            }
        }
    }

    /// Distance from `p` to the nearest boundary edge.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        let mut best = f64::INFINITY;
        for ring in self.rings() {
            let n = ring.len();
            for i in 0..n {
                best = best.min(segment_distance(p, ring[i], ring[(i + 1) % n]));
            }
        }
        best
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let d = b.sub(a);
    let len2 = d.dot(d);
    let t = if len2 == 0.0 { 0.0 } else { (p.sub(a).dot(d) / len2).clamp(0.0, 1.0) };
    p.dist(a.add(d.scale(t)))
}

/// Binary pixel mask; row 0 is the southernmost row.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    origin: Point,
    cell_size: f64,
    ncols: usize,
    nrows: usize,
    mask: Vec<bool>,
    inside: Vec<u32>,
}

impl Raster {
    /// `mask[row * ncols + col]`, rows counted from the bottom (`origin` is the
    /// lower-left corner).
    pub fn new(origin: Point, cell_size: f64, ncols: usize, nrows: usize, mask: Vec<bool>) -> Result<Self, GeometryError> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(GeometryError::RasterCellSize(cell_size));
        }
        if mask.len() != ncols * nrows {
            return Err(GeometryError::RasterShape {
                ncols,
                nrows,
                expected: ncols * nrows,
                got: mask.len(),
            });
        }
        let inside = (0..mask.len() as u32).filter(|&i| mask[i as usize]).collect::<Vec<_>>();
        if inside.is_empty() {
            return Err(GeometryError::NonPositiveArea(0.0));
        }
        Ok(Self {
            origin,
            cell_size,
            ncols,
            nrows,
            mask,
            inside,
        })
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.ncols, self.nrows)
    }

    pub fn is_inside(&self, col: usize, row: usize) -> bool {
        self.mask[row * self.ncols + col]
    }

    /// Flat indices of the inside cells.
    pub fn inside_cells(&self) -> &[u32] {
        &self.inside
    }

    pub fn cell_rect(&self, col: usize, row: usize) -> Rect {
        let h = self.cell_size;
        let min = Point::new(self.origin.x + col as f64 * h, self.origin.y + row as f64 * h);
        Rect::new(min, Point::new(min.x + h, min.y + h))
    }

    pub fn bbox(&self) -> Rect {
        let h = self.cell_size;
        Rect::new(
            self.origin,
            Point::new(self.origin.x + self.ncols as f64 * h, self.origin.y + self.nrows as f64 * h),
        )
    }

    pub fn area(&self) -> f64 {
        self.inside.len() as f64 * self.cell_size * self.cell_size
    }

    fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let fx = (p.x - self.origin.x) / self.cell_size;
        let fy = (p.y - self.origin.y) / self.cell_size;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (c, r) = (fx as usize, fy as usize);
        (c < self.ncols && r < self.nrows).then_some((c, r))
    }

    pub fn contains(&self, p: Point) -> bool {
        self.cell_of(p).is_some_and(|(c, r)| self.is_inside(c, r))
    }

    /// Column and row ranges of cells overlapping `rect`.
    fn span(&self, rect: &Rect) -> Option<(usize, usize, usize, usize)> {
        let h = self.cell_size;
        let c0 = libm::floor((rect.min.x - self.origin.x) / h).max(0.0);
        let r0 = libm::floor((rect.min.y - self.origin.y) / h).max(0.0);
        let c1 = libm::ceil((rect.max.x - self.origin.x) / h).min(self.ncols as f64);
        let r1 = libm::ceil((rect.max.y - self.origin.y) / h).min(self.nrows as f64);
        (c0 < c1 && r0 < r1).then_some((c0 as usize, c1 as usize, r0 as usize, r1 as usize))
    }

    pub fn disc_area(&self, disc: &Disc) -> f64 {
        self.disc_area_in_rect(disc, &disc.bbox())
    }

    pub fn area_in_rect(&self, rect: &Rect) -> f64 {
        let Some((c0, c1, r0, r1)) = self.span(rect) else {
            return 0.0;
        };
        let mut acc = crate::sum::Kahan::new();
        for row in r0..r1 {
            for col in c0..c1 {
                if self.is_inside(col, row) {
                    if let Some(cell) = self.cell_rect(col, row).intersect(rect) {
                        acc.add(cell.area());
                    }
                }
            }
        }
        acc.value()
    }

    pub fn disc_area_in_rect(&self, disc: &Disc, rect: &Rect) -> f64 {
        if disc.radius <= 0.0 {
            return 0.0;
        }
        let Some(clip) = rect.intersect(&disc.bbox()) else {
            return 0.0;
        };
        let Some((c0, c1, r0, r1)) = self.span(&clip) else {
            return 0.0;
        };
        let r2 = disc.radius * disc.radius;
        let c = disc.center;
        let mut acc = crate::sum::Kahan::new();
        for row in r0..r1 {
            for col in c0..c1 {
                if !self.is_inside(col, row) {
                    continue;
                }
                let Some(cell) = self.cell_rect(col, row).intersect(&clip) else {
                    continue;
                };
                let far = Point::new(
                    (cell.min.x - c.x).abs().max((cell.max.x - c.x).abs()),
                    (cell.min.y - c.y).abs().max((cell.max.y - c.y).abs()),
                );
                if far.dot(far) <= r2 {
                    acc.add(cell.area());
                    continue;
                }
                let near = Point::new(
                    (cell.min.x - c.x).max(0.0).max(c.x - cell.max.x),
                    (cell.min.y - c.y).max(0.0).max(c.y - cell.max.y),
                );
                if near.dot(near) >= r2 {
                    continue;
                }
                acc.add(ring_disc_signed(&cell.ring(), disc).max(0.0));
            }
        }
        acc.value()
    }

    fn circle_angles(&self, center: Point, r: f64, out: &mut Vec<f64>) {
        let h = self.cell_size;
        let Some((c0, c1, r0, r1)) = self.span(&Disc { center, radius: r }.bbox()) else {
            return;
        };
        let mut push_line = |a: Point, b: Point| circle_segment_angles(center, r, a, b, out);
        for col in c0..=c1 {
            let x = self.origin.x + col as f64 * h;
            push_line(
                Point::new(x, self.origin.y + r0 as f64 * h),
                Point::new(x, self.origin.y + r1 as f64 * h),
            );
        }
        for row in r0..=r1 {
            let y = self.origin.y + row as f64 * h;
            push_line(
                Point::new(self.origin.x + c0 as f64 * h, y),
                Point::new(self.origin.x + c1 as f64 * h, y),
            );
        }
    }
}

/// Which representation backs geometric evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum WindowSource {
    Polygon,
    Raster,
}

/// The observation region `W` and the study period `(0, t_max]`.
#[derive(Clone, Debug)]
pub struct Window {
    polygons: Vec<Polygon>,
    raster: Option<Raster>,
    source: WindowSource,
    area: f64,
    t_max: f64,
    bbox: Rect,
}

fn check_period(t_max: f64) -> Result<(), GeometryError> {
    if t_max > 0.0 && t_max.is_finite() {
        Ok(())
    } else {
        Err(GeometryError::InvalidPeriod(t_max))
    }
}

impl Window {
    pub fn from_polygons(polygons: Vec<Polygon>, t_max: f64) -> Result<Self, GeometryError> {
        check_period(t_max)?;
        if polygons.is_empty() {
            return Err(GeometryError::NonPositiveArea(0.0));
        }
        check_shared_edges(&polygons)?;
        let area: f64 = polygons.iter().map(Polygon::area).sum();
        if !(area > 0.0) {
            return Err(GeometryError::NonPositiveArea(area));
        }
        let bbox = polygons.iter().skip(1).fold(polygons[0].bbox, |b, p| b.union(&p.bbox));
        Ok(Self {
            polygons,
            raster: None,
            source: WindowSource::Polygon,
            area,
            t_max,
            bbox,
        })
    }

    pub fn from_raster(raster: Raster, t_max: f64) -> Result<Self, GeometryError> {
        check_period(t_max)?;
        let area = raster.area();
        let bbox = raster.bbox();
        Ok(Self {
            polygons: Vec::new(),
            raster: Some(raster),
            source: WindowSource::Raster,
            area,
            t_max,
            bbox,
        })
    }

    /// Axis-aligned rectangular window.
    pub fn rectangle(rect: Rect, t_max: f64) -> Result<Self, GeometryError> {
        Self::from_polygons(alloc::vec![Polygon::rectangle(rect)], t_max)
    }

    /// Attaches a raster discretisation to a polygon window. Polygons stay the
    /// evaluation source.
    pub fn with_raster(mut self, raster: Raster) -> Result<Self, GeometryError> {
        let ra = raster.area();
        if !self.polygons.is_empty() && libm::fabs(ra - self.area) > 1e-3 * self.area {
            return Err(GeometryError::RasterMismatch {
                polygon: self.area,
                raster: ra,
            });
        }
        if self.polygons.is_empty() {
            self.area = ra;
            self.bbox = raster.bbox();
        }
        self.raster = Some(raster);
        Ok(self)
    }

    /// Evaluates geometry on the raster even if polygons are present.
    pub fn prefer_raster(mut self) -> Self {
        if let Some(r) = &self.raster {
            self.source = WindowSource::Raster;
            self.area = r.area();
            self.bbox = r.bbox();
        }
        self
    }

    pub fn with_t_max(mut self, t_max: f64) -> Result<Self, GeometryError> {
        check_period(t_max)?;
        self.t_max = t_max;
        Ok(self)
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn bbox(&self) -> Rect {
        self.bbox
    }

    pub fn source(&self) -> WindowSource {
        self.source
    }

    pub fn polygons(&self) -> &[Polygon] {
        &self.polygons
    }

    pub fn raster(&self) -> Option<&Raster> {
        self.raster.as_ref()
    }

    fn raster_source(&self) -> Option<&Raster> {
        match self.source {
            WindowSource::Raster => self.raster.as_ref(),
            WindowSource::Polygon => None,
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        match self.raster_source() {
            Some(r) => r.contains(p),
            None => self.polygons.iter().any(|poly| poly.contains(p)),
        }
    }

    /// `|disc ∩ W|`, clamped to `[0, min(πr², |W|)]`.
    pub fn disc_area(&self, disc: &Disc) -> f64 {
        let a = match self.raster_source() {
            Some(r) => r.disc_area(disc),
            None => self.polygons.iter().map(|p| p.disc_area(disc)).sum(),
        };
        a.clamp(0.0, disc.area().min(self.area))
    }

    pub fn area_in_rect(&self, rect: &Rect) -> f64 {
        match self.raster_source() {
            Some(r) => r.area_in_rect(rect),
            None => self.polygons.iter().map(|p| p.area_in_rect(rect)).sum(),
        }
    }

    pub fn disc_area_in_rect(&self, disc: &Disc, rect: &Rect) -> f64 {
        match self.raster_source() {
            Some(r) => r.disc_area_in_rect(disc, rect),
            None => self.polygons.iter().map(|p| p.disc_area_in_rect(disc, rect)).sum(),
        }
    }

    /// Fraction of the circumference of the circle `(center, r)` inside `W`.
    pub fn circle_fraction(&self, center: Point, r: f64) -> f64 {
        let mut angles = Vec::new();
        match self.raster_source() {
            Some(ras) => ras.circle_angles(center, r, &mut angles),
            None => self.polygons.iter().for_each(|p| p.circle_angles(center, r, &mut angles)),
        }
        arc_fraction(center, r, angles, |p| self.contains(p))
    }
}

fn check_shared_edges(polygons: &[Polygon]) -> Result<(), GeometryError> {
    if polygons.len() < 2 {
        return Ok(());
    }
    let key = |p: Point| (p.x.to_bits(), p.y.to_bits());
    let mut edges = Vec::new();
    for (pi, poly) in polygons.iter().enumerate() {
        for ring in poly.rings() {
            let n = ring.len();
            for i in 0..n {
                let (a, b) = (key(ring[i]), key(ring[(i + 1) % n]));
                edges.push((a.min(b), a.max(b), pi));
            }
        }
    }
    edges.sort_unstable();
    for w in edges.windows(2) {
        if w[0].0 == w[1].0 && w[0].1 == w[1].1 && w[0].2 != w[1].2 {
            return Err(GeometryError::SharedEdge {
                first: w[0].2.min(w[1].2),
                second: w[0].2.max(w[1].2),
            });
        }
    }
    Ok(())
}

/// Shoelace area of the window's polygons, holes subtracted.
pub fn polygon_area(window: &Window) -> Result<f64, GeometryError> {
    if window.polygons.is_empty() {
        return Err(GeometryError::NoPolygon);
    }
    Ok(window.polygons.iter().map(Polygon::area).sum())
}

pub fn disc_window_area(disc: &Disc, window: &Window) -> f64 {
    window.disc_area(disc)
}

/// Ripley's isotropic edge-correction weight: the reciprocal of the fraction
/// of the circle through the partner point that lies inside `W`.
pub fn ripley_weight(center: Point, distance: f64, window: &Window) -> Result<f64, GeometryError> {
    if distance <= 0.0 {
        return Ok(1.0);
    }
    let frac = window.circle_fraction(center, distance);
    if frac <= 0.0 {
        return Err(GeometryError::CircleOutside {
            x: center.x,
            y: center.y,
            radius: distance,
        });
    }
    Ok(1.0 / frac)
}

/// One-dimensional analogue of [`ripley_weight`] on `(0, t_max]`.
pub fn temporal_weight(t: f64, lag: f64, t_max: f64) -> Result<f64, GeometryError> {
    let inside = |u: f64| u > 0.0 && u <= t_max;
    match (inside(t - lag), inside(t + lag)) {
        (true, true) => Ok(1.0),
        (true, false) | (false, true) => Ok(2.0),
        (false, false) => Err(GeometryError::LagOutside { t, lag, t_max }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square() -> Window {
        Window::rectangle(Rect::new(Point::new(0.0, 0.0), Point::new(1.0, 1.0)), 1.0).unwrap()
    }

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    #[test]
    fn square_area() {
        assert_eq!(polygon_area(&unit_square()).unwrap(), 1.0);
    }

    #[test]
    fn square_with_hole() {
        let hole = pts(&[(0.25, 0.25), (0.75, 0.25), (0.75, 0.75), (0.25, 0.75)]);
        let p = Polygon::new(pts(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.0)]), vec![hole]).unwrap();
        let w = Window::from_polygons(vec![p], 1.0).unwrap();
        assert!((polygon_area(&w).unwrap() - 0.75).abs() < 1e-15);
        assert!(!w.contains(Point::new(0.5, 0.5)));
        assert!(w.contains(Point::new(0.1, 0.5)));
    }

    #[test]
    fn orientation_is_normalized() {
        let cw = pts(&[(0.0, 0.0), (0.0, 2.0), (2.0, 2.0), (2.0, 0.0)]);
        let p = Polygon::new(cw, vec![]).unwrap();
        assert_eq!(p.area(), 4.0);
    }

    #[test]
    fn degenerate_ring_rejected() {
        let err = Polygon::new(pts(&[(0.0, 0.0), (1.0, 0.0), (0.0, 0.0)]), vec![]).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateRing { vertices: 2, .. }));
    }

    #[test]
    fn bowtie_rejected() {
        let err = Polygon::new(pts(&[(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)]), vec![]);
        assert!(matches!(err, Err(GeometryError::SelfIntersecting { .. }) | Err(GeometryError::DegenerateRing { .. })));
    }

    #[test]
    fn shared_edge_rejected() {
        let a = Polygon::rectangle(Rect::new(Point::new(0.0, 0.0), Point::new(1.0, 1.0)));
        let b = Polygon::rectangle(Rect::new(Point::new(1.0, 0.0), Point::new(2.0, 1.0)));
        let err = Window::from_polygons(vec![a, b], 1.0).unwrap_err();
        assert_eq!(err, GeometryError::SharedEdge { first: 0, second: 1 });
    }

    #[test]
    fn invalid_period_rejected() {
        let r = Rect::new(Point::new(0.0, 0.0), Point::new(1.0, 1.0));
        assert!(matches!(Window::rectangle(r, 0.0), Err(GeometryError::InvalidPeriod(_))));
    }

    #[test]
    fn random_convex_heptagon_matches_hit_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut angles: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        angles.sort_by(f64::total_cmp);
        let ring: Vec<Point> = angles.iter().map(|a| Point::new(libm::cos(*a), libm::sin(*a))).collect();
        let poly = Polygon::new(ring, vec![]).unwrap();
        let n = 1_000_000;
        let hits = (0..n)
            .filter(|_| poly.contains(Point::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))))
            .count();
        let p = hits as f64 / n as f64;
        let est = 4.0 * p;
        let se = 4.0 * libm::sqrt(p * (1.0 - p) / n as f64);
        assert!((est - poly.area()).abs() < 3.0 * se, "{est} vs {}", poly.area());
    }

    #[test]
    fn interior_disc_is_unclipped() {
        let w = unit_square();
        let d = Disc::new(Point::new(0.5, 0.5), 0.1).unwrap();
        assert!((w.disc_area(&d) - PI * 0.01).abs() < 1e-15);
    }

    #[test]
    fn corner_disc_is_quarter() {
        let w = unit_square();
        let d = Disc::new(Point::new(0.0, 0.0), 0.1).unwrap();
        assert!((w.disc_area(&d) - PI * 0.01 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn edge_disc_matches_rejection_sampling() {
        let w = unit_square();
        let d = Disc::new(Point::new(0.5, 0.1), 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mut hits = 0usize;
        for _ in 0..n {
            let p = Point::new(rng.random_range(0.2..0.8), rng.random_range(-0.2..0.4));
            if p.dist(d.center) <= 0.3 && w.contains(p) {
                hits += 1;
            }
        }
        let frac = hits as f64 / n as f64;
        let est = 0.36 * frac;
        let se = 0.36 * libm::sqrt(frac * (1.0 - frac) / n as f64);
        // Closed form: full disc minus the circular segment below y = 0.
        let h = 0.1_f64;
        let seg = 0.09 * libm::acos(h / 0.3) - h * libm::sqrt(0.09 - h * h);
        let a = w.disc_area(&d);
        assert!((a - (PI * 0.09 - seg)).abs() < 1e-14);
        assert!((est - a).abs() < 3.0 * se, "{est} vs {a}");
    }

    #[test]
    fn ripley_weights() {
        let w = unit_square();
        assert_eq!(ripley_weight(Point::new(0.5, 0.5), 0.1, &w).unwrap(), 1.0);
        let mid = ripley_weight(Point::new(0.5, 0.0), 0.01, &w).unwrap();
        assert!((mid - 2.0).abs() < 1e-12, "{mid}");
    }

    #[test]
    fn ripley_corner_matches_ray_sampling() {
        let w = unit_square();
        let c = Point::new(0.05, 0.08);
        let r = 0.12;
        let rays = 100_000;
        let inside = (0..rays)
            .filter(|k| {
                let th = 2.0 * PI * (*k as f64 + 0.5) / rays as f64;
                w.contains(Point::new(c.x + r * libm::cos(th), c.y + r * libm::sin(th)))
            })
            .count();
        let oracle = rays as f64 / inside as f64;
        let got = ripley_weight(c, r, &w).unwrap();
        assert!((got - oracle).abs() < 1e-3, "{got} vs {oracle}");
    }

    #[test]
    fn temporal_weights() {
        assert_eq!(temporal_weight(500.0, 10.0, 1000.0).unwrap(), 1.0);
        assert_eq!(temporal_weight(5.0, 10.0, 1000.0).unwrap(), 2.0);
        assert_eq!(temporal_weight(995.0, 10.0, 1000.0).unwrap(), 2.0);
        assert!(temporal_weight(5.0, 1000.0, 1000.0).is_err());
    }

    fn square_raster(n: usize) -> Raster {
        Raster::new(Point::new(0.0, 0.0), 1.0 / n as f64, n, n, vec![true; n * n]).unwrap()
    }

    #[test]
    fn raster_agrees_with_polygon() {
        let poly = unit_square();
        let ras = Window::from_raster(square_raster(20), 1.0).unwrap();
        assert!((ras.area() - 1.0).abs() < 1e-12);
        let cell = 1.0 / 400.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let d = Disc::new(
                Point::new(rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2)),
                rng.random_range(0.0..0.7),
            )
            .unwrap();
            assert!((poly.disc_area(&d) - ras.disc_area(&d)).abs() <= 2.0 * cell);
            if poly.contains(d.center) && d.radius > 0.0 {
                let a = poly.circle_fraction(d.center, d.radius);
                let b = ras.circle_fraction(d.center, d.radius);
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn raster_mismatch_rejected() {
        let w = unit_square();
        let small = Raster::new(Point::new(0.0, 0.0), 0.5, 2, 2, vec![true, true, true, false]).unwrap();
        assert!(matches!(w.with_raster(small), Err(GeometryError::RasterMismatch { .. })));
    }

    #[test]
    fn clipped_areas() {
        let hole = pts(&[(0.25, 0.25), (0.75, 0.25), (0.75, 0.75), (0.25, 0.75)]);
        let p = Polygon::new(pts(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]), vec![hole]).unwrap();
        let r = Rect::new(Point::new(0.0, 0.0), Point::new(0.5, 0.5));
        assert!((p.area_in_rect(&r) - (0.25 - 0.0625)).abs() < 1e-15);
        let d = Disc::new(Point::new(0.5, 0.5), 0.6).unwrap();
        let quads = [
            Rect::new(Point::new(0.0, 0.0), Point::new(0.5, 0.5)),
            Rect::new(Point::new(0.5, 0.0), Point::new(1.0, 0.5)),
            Rect::new(Point::new(0.0, 0.5), Point::new(0.5, 1.0)),
            Rect::new(Point::new(0.5, 0.5), Point::new(1.0, 1.0)),
        ];
        let total: f64 = quads.iter().map(|q| p.disc_area_in_rect(&d, q)).sum();
        assert!((total - p.disc_area(&d)).abs() < 1e-12);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn disc_area_monotone_and_bounded(x in -0.5f64..1.5, y in -0.5f64..1.5, r in 0.0f64..1.5, dr in 0.0f64..0.5) {
            let w = unit_square();
            let a = w.disc_area(&Disc::new(Point::new(x, y), r).unwrap());
            let b = w.disc_area(&Disc::new(Point::new(x, y), r + dr).unwrap());
            prop_assert!(a <= b + 1e-12);
            prop_assert!(a >= 0.0 && a <= (PI * r * r).min(1.0) + 1e-12);
        }

        #[test]
        fn ripley_at_least_one(x in 0.01f64..0.99, y in 0.01f64..0.99, r in 0.001f64..0.5) {
            let w = unit_square();
            let wgt = ripley_weight(Point::new(x, y), r, &w).unwrap();
            prop_assert!(wgt >= 1.0);
            let clear = x - r > 0.0 && x + r < 1.0 && y - r > 0.0 && y + r < 1.0;
            if clear {
                prop_assert_eq!(wgt, 1.0);
                let a = w.disc_area(&Disc::new(Point::new(x, y), r).unwrap());
                prop_assert!((a - PI * r * r).abs() <= 1e-9 * PI * r * r);
            }
        }
    }
}
