//! Hierarchical panoptic-parts label ids.
//!
//! A pixel label packs up to three levels into one decimal integer:
//!
//! | levels | value                         | range            |
//! |--------|-------------------------------|------------------|
//! | 1      | `sid`                         | `0..=99`         |
//! | 2      | `sid·10³ + iid`               | `1000..=99_999`  |
//! | 3      | `sid·10⁵ + iid·10² + pid`     | `100_000..=9_999_999` |
//!
//! Semantic id 0 cannot carry an instance or part, so values `100..=999`
//! are not valid encodings.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::raster_io::{ClassRaster, UidRaster, MAX_UID};

pub const MAX_SEMANTIC: u32 = 99;
pub const MAX_INSTANCE: u32 = 999;
pub const MAX_PART: u32 = 99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Uid {
    pub semantic: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance: Option<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub part: Option<u8>,
}

impl Uid {
    pub fn new(semantic: u32, instance: Option<u32>, part: Option<u32>) -> Result<Self> {
        if semantic > MAX_SEMANTIC {
            return Err(invalid(format!(
                "semantic id {semantic} exceeds {MAX_SEMANTIC}"
            )));
        }
        if let Some(i) = instance.filter(|&i| i > MAX_INSTANCE) {
            return Err(invalid(format!("instance id {i} exceeds {MAX_INSTANCE}")));
        }
        if let Some(p) = part.filter(|&p| p > MAX_PART) {
            return Err(invalid(format!("part id {p} exceeds {MAX_PART}")));
        }
        if part.is_some() && instance.is_none() {
            return Err(invalid("a part id requires an instance id"));
        }
        if semantic == 0 && instance.is_some() {
            return Err(invalid("semantic id 0 cannot carry instance or part ids"));
        }
        Ok(Uid {
            semantic: semantic as u8,
            instance: instance.map(|i| i as u16),
            part: part.map(|p| p as u8),
        })
    }

    pub fn levels(&self) -> u8 {
        match (self.instance, self.part) {
            (None, _) => 1,
            (Some(_), None) => 2,
            (Some(_), Some(_)) => 3,
        }
    }

    pub fn encode(&self) -> u32 {
        let sid = self.semantic as u32;
        match (self.instance, self.part) {
            (None, _) => sid,
            (Some(i), None) => sid * 1_000 + i as u32,
            (Some(i), Some(p)) => sid * 100_000 + i as u32 * 100 + p as u32,
        }
    }
}

/// Encodes a 1-, 2- or 3-level label.
pub fn encode(semantic: u32, instance: Option<u32>, part: Option<u32>) -> Result<u32> {
    Uid::new(semantic, instance, part).map(|u| u.encode())
}

/// Inverse of [`encode`]. The number of levels is implied by the magnitude.
pub fn decode(value: u32) -> Result<Uid> {
    if value > MAX_UID {
        return Err(invalid(format!("uid {value} exceeds {MAX_UID}")));
    }
    if value <= 99 {
        return Ok(Uid {
            semantic: value as u8,
            instance: None,
            part: None,
        });
    }
    if value <= 99_999 {
        let sid = value / 1_000;
        if sid == 0 {
            return Err(invalid(format!(
                "uid {value} is not canonical: semantic id 0 with an instance"
            )));
        }
        return Ok(Uid {
            semantic: sid as u8,
            instance: Some((value % 1_000) as u16),
            part: None,
        });
    }
    Ok(Uid {
        semantic: (value / 100_000) as u8,
        instance: Some((value / 100 % 1_000) as u16),
        part: Some((value % 100) as u8),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    /// Drop the part digits, keeping semantic and instance.
    Panoptic,
    /// Semantic id only.
    Semantic,
    /// Part id, 0 where the pixel has none.
    Parts,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Projection {
    Uid(UidRaster),
    Class(ClassRaster),
}

pub fn project(raster: &UidRaster, level: Level) -> Result<Projection> {
    let uids = raster
        .data()
        .iter()
        .map(|&v| decode(v))
        .collect::<Result<Vec<_>>>()?;
    let (w, h) = (raster.width(), raster.height());
    Ok(match level {
        Level::Panoptic => Projection::Uid(UidRaster::new(
            w,
            h,
            uids.iter()
                .map(|u| Uid { part: None, ..*u }.encode())
                .collect(),
        )?),
        Level::Semantic => Projection::Class(ClassRaster::new(
            w,
            h,
            uids.iter().map(|u| u.semantic as u16).collect(),
        )?),
        Level::Parts => Projection::Class(ClassRaster::new(
            w,
            h,
            uids.iter().map(|u| u.part.unwrap_or(0) as u16).collect(),
        )?),
    })
}

/// Scene and part class declaration of a panoptic-parts dataset.
///
/// `parts` maps a scene class to its number of part classes; valid part ids
/// are `1..=n`, with 0 reserved for void parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanopticSpec {
    #[serde(default)]
    pub stuff: BTreeSet<u8>,
    #[serde(default)]
    pub things: BTreeSet<u8>,
    #[serde(default)]
    pub parts: BTreeMap<u8, u8>,
    /// Semantic ids treated as unlabeled.
    #[serde(default = "default_void")]
    pub void: BTreeSet<u8>,
}

impl Default for PanopticSpec {
    fn default() -> Self {
        PanopticSpec {
            stuff: BTreeSet::new(),
            things: BTreeSet::new(),
            parts: BTreeMap::new(),
            void: default_void(),
        }
    }
}

fn default_void() -> BTreeSet<u8> {
    BTreeSet::from([0])
}

impl PanopticSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let spec: PanopticSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if let Some(c) = self.stuff.intersection(&self.things).next() {
            return Err(invalid(format!("class {c} declared both stuff and thing")));
        }
        if let Some(c) = self
            .void
            .iter()
            .find(|c| self.is_stuff(**c) || self.is_thing(**c))
        {
            return Err(invalid(format!(
                "void class {c} also declared as stuff or thing"
            )));
        }
        for (c, n) in &self.parts {
            if !self.is_stuff(*c) && !self.is_thing(*c) {
                return Err(invalid(format!("part class owner {c} is not declared")));
            }
            if *n == 0 || *n as u32 > MAX_PART {
                return Err(invalid(format!("class {c} declares {n} parts")));
            }
        }
        Ok(())
    }

    pub fn is_stuff(&self, sid: u8) -> bool {
        self.stuff.contains(&sid)
    }

    pub fn is_thing(&self, sid: u8) -> bool {
        self.things.contains(&sid)
    }

    pub fn is_void(&self, sid: u8) -> bool {
        self.void.contains(&sid)
    }

    pub fn part_count(&self, sid: u8) -> Option<u8> {
        self.parts.get(&sid).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum UidViolationKind {
    Undecodable,
    UnknownSemantic,
    InstanceOnStuff,
    PartsOnClassWithoutParts,
    PartOutOfRange,
}

/// One kind of problem for one distinct uid value, with its pixel count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UidViolation {
    pub kind: UidViolationKind,
    pub uid: u32,
    pub pixels: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct UidReport {
    pub violations: Vec<UidViolation>,
}

impl UidReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn classify(value: u32, spec: &PanopticSpec) -> Vec<UidViolationKind> {
    let uid = match decode(value) {
        Ok(u) => u,
        Err(_) => return vec![UidViolationKind::Undecodable],
    };
    let sid = uid.semantic;
    if spec.is_void(sid) {
        return if uid.instance.is_some() {
            vec![UidViolationKind::InstanceOnStuff]
        } else {
            Vec::new()
        };
    }
    if !spec.is_stuff(sid) && !spec.is_thing(sid) {
        return vec![UidViolationKind::UnknownSemantic];
    }
    let mut out = Vec::new();
    let parts = spec.part_count(sid);
    // stuff classes with parts carry instance 0 as the part carrier
    if spec.is_stuff(sid) {
        if let Some(i) = uid.instance {
            if parts.is_none() || i != 0 {
                out.push(UidViolationKind::InstanceOnStuff);
            }
        }
    }
    if let Some(p) = uid.part {
        match parts {
            None if p != 0 => out.push(UidViolationKind::PartsOnClassWithoutParts),
            None => {}
            Some(n) if p > n => out.push(UidViolationKind::PartOutOfRange),
            Some(_) => {}
        }
    }
    out
}

/// Checks a UID raster against the declared scene and part classes.
pub fn validate_raster(raster: &UidRaster, spec: &PanopticSpec) -> UidReport {
    let mut histogram: BTreeMap<u32, u64> = BTreeMap::new();
    for &v in raster.data() {
        *histogram.entry(v).or_default() += 1;
    }
    let mut violations: Vec<UidViolation> = histogram
        .into_iter()
        .flat_map(|(uid, pixels)| {
            classify(uid, spec)
                .into_iter()
                .map(move |kind| UidViolation { kind, uid, pixels })
        })
        .collect();
    violations.sort_by_key(|v| (v.kind, v.uid));
    UidReport { violations }
}
