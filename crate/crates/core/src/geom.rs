//! Points and distances in map coordinates (metres).

use serde::{Deserialize, Serialize};

/// A point in map coordinates. Ground nodes sit at `z = 0`; the UAV flies at
/// the mission altitude. Serialized as an `[x, y, z]` triple.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn ground(&self) -> GroundPoint {
        GroundPoint {
            x: self.x,
            y: self.y,
        }
    }

    /// Horizontal (ground-projection) distance.
    pub fn ground_distance(&self, other: &Point3) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Full 3-D distance.
    pub fn distance(&self, other: &Point3) -> f64 {
        let dz = self.z - other.z;
        self.ground_distance(other).hypot(dz)
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(v: [f64; 3]) -> Self {
        Point3::new(v[0], v[1], v[2])
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        [p.x, p.y, p.z]
    }
}

/// A ground-level position. Serialized as an `[x, y]` pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct GroundPoint {
    pub x: f64,
    pub y: f64,
}

impl GroundPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        GroundPoint { x, y }
    }

    /// Lifts the point to altitude `z`.
    pub fn at(&self, z: f64) -> Point3 {
        Point3::new(self.x, self.y, z)
    }

    pub fn distance(&self, other: &GroundPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for GroundPoint {
    fn from(v: [f64; 2]) -> Self {
        GroundPoint::new(v[0], v[1])
    }
}

impl From<GroundPoint> for [f64; 2] {
    fn from(p: GroundPoint) -> Self {
        [p.x, p.y]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distances() {
        let a = Point3::new(0.0, 0.0, 60.0);
        let b = Point3::new(30.0, 40.0, 0.0);
        assert_eq!(a.ground_distance(&b), 50.0);
        let d = a.distance(&b);
        assert!((d - (50.0f64.powi(2) + 60.0f64.powi(2)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn point_serde_roundtrip() {
        let p = Point3::new(100.0, 100.0, 60.0);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, "[100.0,100.0,60.0]");
        let q: Point3 = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
    }
}
