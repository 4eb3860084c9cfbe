//! Web-Mercator tiles and quadkeys.
//!
//! Tiles follow the usual tile-system layout: level `L` splits the projected
//! world into `2^L × 2^L` square tiles of 256 pixels, `x` grows east and `y`
//! grows south. A quadkey interleaves the bits of `x` and `y` into one base-4
//! digit per level, so a quadkey prefix is exactly spatial containment.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const MIN_LEVEL: u8 = 1;
pub const MAX_LEVEL: u8 = 23;

pub const MIN_LATITUDE: f64 = -85.051_128_78;
pub const MAX_LATITUDE: f64 = 85.051_128_78;

const TILE_PIXELS: f64 = 256.0;

/// Upper bound on the number of tiles `cover_roi` is willing to enumerate.
pub const MAX_COVER_TILES: u64 = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TileError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180)")]
    Longitude(f64),
    #[error("zoom level {0} outside [1, 23]")]
    Level(u8),
    #[error("tile ({x}, {y}) out of range at level {level}")]
    TileRange { x: u32, y: u32, level: u8 },
    #[error("invalid quadkey digit {0:?}")]
    InvalidDigit(char),
    #[error("empty quadkey")]
    EmptyQuadKey,
    #[error("quadkey longer than {MAX_LEVEL} digits")]
    QuadKeyTooLong,
    #[error("invalid bounding box: {0}")]
    BoundingBox(String),
    #[error("cover of {0} tiles exceeds the {MAX_COVER_TILES}-tile guard")]
    CoverTooLarge(u64),
}

fn check_level(level: u8) -> Result<(), TileError> {
    if (MIN_LEVEL..=MAX_LEVEL).contains(&level) {
        Ok(())
    } else {
        Err(TileError::Level(level))
    }
}

/// A validated latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeoPosition {
    lat: f64,
    lon: f64,
}

impl GeoPosition {
    pub fn new(lat: f64, lon: f64) -> Result<Self, TileError> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(TileError::Latitude(lat));
        }
        if !lon.is_finite() || !(-180.0..180.0).contains(&lon) {
            return Err(TileError::Longitude(lon));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

impl<'de> Deserialize<'de> for GeoPosition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            lat: f64,
            lon: f64,
        }
        let raw = Raw::deserialize(d)?;
        GeoPosition::new(raw.lat, raw.lon).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Tile {
    x: u32,
    y: u32,
    level: u8,
}

impl Tile {
    pub fn new(x: u32, y: u32, level: u8) -> Result<Self, TileError> {
        check_level(level)?;
        let side = 1u32 << level;
        if x >= side || y >= side {
            return Err(TileError::TileRange { x, y, level });
        }
        Ok(Self { x, y, level })
    }

    pub fn x(&self) -> u32 {
        self.x
    }

    pub fn y(&self) -> u32 {
        self.y
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    /// Geographic extent of the tile.
    pub fn bounds(&self) -> BoundingBox {
        let n = (1u64 << self.level) as f64;
        let lon = |x: f64| x / n * 360.0 - 180.0;
        let lat = |y: f64| 90.0 - 360.0 * (-(0.5 - y / n) * 2.0 * PI).exp().atan() / PI;
        BoundingBox {
            south: lat(self.y as f64 + 1.0),
            west: lon(self.x as f64),
            north: lat(self.y as f64),
            east: lon(self.x as f64 + 1.0),
        }
    }

    /// Centre of the tile in projected (Mercator) space, mapped back to degrees.
    pub fn center(&self) -> (f64, f64) {
        let n = (1u64 << self.level) as f64;
        let lon = (self.x as f64 + 0.5) / n * 360.0 - 180.0;
        let lat = 90.0 - 360.0 * (-(0.5 - (self.y as f64 + 0.5) / n) * 2.0 * PI).exp().atan() / PI;
        (lat, lon)
    }
}

/// Quadkey digits, one per level, most significant first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QuadKey(String);

impl QuadKey {
    pub fn parse(s: &str) -> Result<Self, TileError> {
        if s.is_empty() {
            return Err(TileError::EmptyQuadKey);
        }
        if let Some(c) = s.chars().find(|c| !matches!(c, '0'..='3')) {
            return Err(TileError::InvalidDigit(c));
        }
        if s.len() > MAX_LEVEL as usize {
            return Err(TileError::QuadKeyTooLong);
        }
        Ok(Self(s.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn level(&self) -> u8 {
        self.0.len() as u8
    }

    /// True if `self` is a prefix of `other` (equality included).
    pub fn contains(&self, other: &QuadKey) -> bool {
        other.0.starts_with(&self.0)
    }

    /// True if either key contains the other.
    pub fn intersects(&self, other: &QuadKey) -> bool {
        self.contains(other) || other.contains(self)
    }

    pub fn parent(&self) -> Option<QuadKey> {
        if self.0.len() <= 1 {
            None
        } else {
            Some(QuadKey(self.0[..self.0.len() - 1].to_owned()))
        }
    }

    pub fn to_tile(&self) -> Tile {
        quadkey_to_tile(self)
    }
}

impl fmt::Display for QuadKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for QuadKey {
    type Err = TileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QuadKey::parse(s)
    }
}

impl Serialize for QuadKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for QuadKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        QuadKey::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// A region of interest in degrees. Boxes crossing the antimeridian are not supported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub south: f64,
    pub west: f64,
    pub north: f64,
    pub east: f64,
}

impl BoundingBox {
    pub fn new(south: f64, west: f64, north: f64, east: f64) -> Result<Self, TileError> {
        let b = Self { south, west, north, east };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), TileError> {
        let all = [self.south, self.west, self.north, self.east];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(TileError::BoundingBox("non-finite coordinate".into()));
        }
        if self.south > self.north {
            return Err(TileError::BoundingBox("south > north".into()));
        }
        if self.west > self.east {
            return Err(TileError::BoundingBox("west > east".into()));
        }
        if self.south < -90.0 || self.north > 90.0 {
            return Err(TileError::BoundingBox("latitude outside [-90, 90]".into()));
        }
        if self.west < -180.0 || self.east > 180.0 {
            return Err(TileError::BoundingBox("longitude outside [-180, 180]".into()));
        }
        Ok(())
    }
}

impl FromStr for BoundingBox {
    type Err = TileError;

    /// Parses `S,W,N,E`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| TileError::BoundingBox(e.to_string()))?;
        match parts.as_slice() {
            [s, w, n, e] => BoundingBox::new(*s, *w, *n, *e),
            _ => Err(TileError::BoundingBox("expected S,W,N,E".into())),
        }
    }
}

fn pixel_xy(lat: f64, lon: f64, level: u8) -> (u64, u64) {
    let lat = lat.clamp(MIN_LATITUDE, MAX_LATITUDE);
    let map_size = TILE_PIXELS * (1u64 << level) as f64;
    let sin_lat = (lat * PI / 180.0).sin();
    let px = (lon + 180.0) / 360.0 * map_size;
    let py = (0.5 - ((1.0 + sin_lat) / (1.0 - sin_lat)).ln() / (4.0 * PI)) * map_size;
    let max = map_size - 1.0;
    (px.clamp(0.0, max) as u64, py.clamp(0.0, max) as u64)
}

fn tile_of_degrees(lat: f64, lon: f64, level: u8) -> Tile {
    let (px, py) = pixel_xy(lat, lon, level);
    Tile {
        x: (px / 256) as u32,
        y: (py / 256) as u32,
        level,
    }
}

/// Projects a position onto the tile grid at `level`.
pub fn latlon_to_tile(pos: GeoPosition, level: u8) -> Result<Tile, TileError> {
    check_level(level)?;
    Ok(tile_of_degrees(pos.lat, pos.lon, level))
}

pub fn tile_to_quadkey(t: Tile) -> QuadKey {
    let mut key = String::with_capacity(t.level as usize);
    for i in (1..=t.level).rev() {
        let mask = 1u32 << (i - 1);
        let mut digit = b'0';
        if t.x & mask != 0 {
            digit += 1;
        }
        if t.y & mask != 0 {
            digit += 2;
        }
        key.push(digit as char);
    }
    QuadKey(key)
}

pub fn quadkey_to_tile(q: &QuadKey) -> Tile {
    let level = q.level();
    let (mut x, mut y) = (0u32, 0u32);
    for (i, c) in q.0.bytes().enumerate() {
        let mask = 1u32 << (level as usize - 1 - i);
        let d = c - b'0';
        if d & 1 != 0 {
            x |= mask;
        }
        if d & 2 != 0 {
            y |= mask;
        }
    }
    Tile { x, y, level }
}

/// Parses a raw digit string straight to a tile.
pub fn parse_quadkey_tile(s: &str) -> Result<Tile, TileError> {
    Ok(quadkey_to_tile(&QuadKey::parse(s)?))
}

pub fn quadkey_contains(ancestor: &QuadKey, other: &QuadKey) -> bool {
    ancestor.contains(other)
}

/// Quadkey of `pos` at `level`.
pub fn locate(pos: GeoPosition, level: u8) -> Result<QuadKey, TileError> {
    Ok(tile_to_quadkey(latlon_to_tile(pos, level)?))
}

/// All tiles at `level` intersecting `bbox`, as quadkeys.
pub fn cover_roi(bbox: &BoundingBox, level: u8) -> Result<BTreeSet<QuadKey>, TileError> {
    check_level(level)?;
    bbox.validate()?;
    let nw = tile_of_degrees(bbox.north, bbox.west, level);
    let se = tile_of_degrees(bbox.south, bbox.east, level);
    let cols = (se.x - nw.x) as u64 + 1;
    let rows = (se.y - nw.y) as u64 + 1;
    let count = cols * rows;
    if count > MAX_COVER_TILES {
        return Err(TileError::CoverTooLarge(count));
    }
    let mut out = BTreeSet::new();
    for y in nw.y..=se.y {
        for x in nw.x..=se.x {
            out.insert(tile_to_quadkey(Tile { x, y, level }));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos(lat: f64, lon: f64) -> GeoPosition {
        GeoPosition::new(lat, lon).unwrap()
    }

    fn qk(s: &str) -> QuadKey {
        QuadKey::parse(s).unwrap()
    }

    #[test]
    fn locate_examples() {
        assert_eq!(latlon_to_tile(pos(0.0, 0.0), 1).unwrap(), Tile::new(1, 1, 1).unwrap());
        assert_eq!(latlon_to_tile(pos(0.0, -180.0), 1).unwrap(), Tile::new(0, 1, 1).unwrap());
        assert_eq!(latlon_to_tile(pos(90.0, 0.0), 3).unwrap(), Tile::new(4, 0, 3).unwrap());
        assert_eq!(latlon_to_tile(pos(-90.0, 179.999), 3).unwrap(), Tile::new(7, 7, 3).unwrap());
    }

    #[test]
    fn encode_examples() {
        let cases = [((0, 0, 1), "0"), ((1, 0, 1), "1"), ((0, 1, 1), "2"), ((1, 1, 1), "3"), ((3, 5, 3), "213"), ((7, 7, 3), "333")];
        for ((x, y, l), key) in cases {
            assert_eq!(tile_to_quadkey(Tile::new(x, y, l).unwrap()).as_str(), key);
        }
    }

    #[test]
    fn decode_examples() {
        assert_eq!(parse_quadkey_tile("213").unwrap(), Tile::new(3, 5, 3).unwrap());
        assert_eq!(parse_quadkey_tile("0").unwrap(), Tile::new(0, 0, 1).unwrap());
        assert_eq!(parse_quadkey_tile("33").unwrap(), Tile::new(3, 3, 2).unwrap());
        assert_eq!(parse_quadkey_tile("124"), Err(TileError::InvalidDigit('4')));
        assert_eq!(parse_quadkey_tile(""), Err(TileError::EmptyQuadKey));
    }

    #[test]
    fn containment_examples() {
        assert!(quadkey_contains(&qk("21"), &qk("213")));
        assert!(!quadkey_contains(&qk("213"), &qk("21")));
        assert!(quadkey_contains(&qk("12"), &qk("12")));
        assert!(!quadkey_contains(&qk("12"), &qk("13")));
    }

    #[test]
    fn cover_examples() {
        let world = BoundingBox::new(-85.0, -180.0, 85.0, 180.0).unwrap();
        let keys: Vec<_> = cover_roi(&world, 1).unwrap().into_iter().map(|k| k.0).collect();
        assert_eq!(keys, ["0", "1", "2", "3"]);

        let point = BoundingBox::new(0.0, 0.0, 0.0, 0.0).unwrap();
        let cover = cover_roi(&point, 2).unwrap();
        assert_eq!(cover.len(), 1);
        assert!(cover.contains(&locate(pos(0.0, 0.0), 2).unwrap()));

        let around_origin = BoundingBox::new(-1.0, -1.0, 1.0, 1.0).unwrap();
        let keys: Vec<_> = cover_roi(&around_origin, 2).unwrap().into_iter().map(|k| k.0).collect();
        assert_eq!(keys, ["03", "12", "21", "30"]);
    }

    #[test]
    fn cover_guard() {
        let world = BoundingBox::new(-85.0, -180.0, 85.0, 180.0).unwrap();
        assert_eq!(cover_roi(&world, 7), Err(TileError::CoverTooLarge(16384)));
        assert_eq!(cover_roi(&world, 6).unwrap().len(), 4096);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(GeoPosition::new(123.0, 0.0).is_err());
        assert!(GeoPosition::new(0.0, 180.0).is_err());
        assert!(GeoPosition::new(f64::NAN, 0.0).is_err());
        assert!(Tile::new(2, 0, 1).is_err());
        assert!(Tile::new(0, 0, 0).is_err());
        assert!(Tile::new(0, 0, 24).is_err());
        assert!(BoundingBox::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 10.0, 1.0, -10.0).is_err());
        assert!("1,2,3".parse::<BoundingBox>().is_err());
        assert_eq!("-1,-1,1,1".parse::<BoundingBox>().unwrap(), BoundingBox::new(-1.0, -1.0, 1.0, 1.0).unwrap());
    }

    #[test]
    fn tile_bounds_contain_center() {
        let t = Tile::new(3, 5, 3).unwrap();
        let b = t.bounds();
        let (lat, lon) = t.center();
        assert!(b.south < lat && lat < b.north);
        assert!(b.west < lon && lon < b.east);
        assert_eq!(latlon_to_tile(pos(lat, lon), 3).unwrap(), t);
    }
}
