//! Dataset catalog: image records, scenario metadata and splits.
//!
//! On disk a manifest is UTF-8 JSON lines. The first line is a header
//! `{"format":"eds-manifest/1","classes":[...]}`; every following line is one
//! record with the keys `id`, `image`, `label` (optional), `weather`, `time`,
//! `road_type` and `split`. Subset files reuse the format and add a
//! `provenance` key to each record plus a `subset` object in the header.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Provenance;

pub const FORMAT_VERSION: &str = "eds-manifest/1";

/// Background sink class followed by the 14 road-region classes.
pub const DEFAULT_CLASS_NAMES: [&str; 15] = [
    "background",
    "asphalt",
    "distress",
    "gravel",
    "boggy",
    "vegetation-misc",
    "crag-stone",
    "wet-surface",
    "road-grime",
    "drainage-grate",
    "earthen",
    "water-puddle",
    "misc",
    "concrete",
    "speed-breaker",
];

pub fn default_class_names() -> Vec<String> {
    DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

macro_rules! closed_enum {
    ($(#[$meta:meta])* $name:ident, $field:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::InvalidEnum {
                        field: $field,
                        value: other.to_string(),
                    }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

closed_enum!(
    Weather, "weather" {
        Sunny => "sunny",
        Cloudy => "cloudy",
        Rainy => "rainy",
        Foggy => "foggy",
        Snowy => "snowy",
        Unknown => "unknown",
    }
);

closed_enum!(
    TimeOfDay, "time" {
        Day => "day",
        Night => "night",
        DawnDusk => "dawn-dusk",
        Unknown => "unknown",
    }
);

closed_enum!(
    RoadType, "road_type" {
        Motorway => "motorway",
        Highway => "highway",
        Urban => "urban",
        Rural => "rural",
        Hilly => "hilly",
        Unknown => "unknown",
    }
);

closed_enum!(
    Split, "split" {
        LabeledTrain => "labeled-train",
        Unlabeled => "unlabeled",
        Val => "val",
        Test => "test",
    }
);

impl Split {
    pub fn requires_label(self) -> bool {
        !matches!(self, Split::Unlabeled)
    }
}

/// Physical capture conditions of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScenarioTag {
    pub weather: Weather,
    pub time: TimeOfDay,
    pub road_type: RoadType,
}

impl ScenarioTag {
    pub fn new(weather: Weather, time: TimeOfDay, road_type: RoadType) -> Self {
        ScenarioTag {
            weather,
            time,
            road_type,
        }
    }

    pub fn value(&self, axis: ScenarioAxis) -> &'static str {
        match axis {
            ScenarioAxis::Weather => self.weather.as_str(),
            ScenarioAxis::Time => self.time.as_str(),
            ScenarioAxis::RoadType => self.road_type.as_str(),
        }
    }
}

impl Default for ScenarioTag {
    fn default() -> Self {
        ScenarioTag::new(Weather::Unknown, TimeOfDay::Unknown, RoadType::Unknown)
    }
}

closed_enum!(
    /// One of the three scenario axes.
    ScenarioAxis, "axis" {
        Weather => "weather",
        Time => "time",
        RoadType => "road_type",
    }
);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub scenario: ScenarioTag,
    pub split: Split,
}

impl ImageRecord {
    fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidRecord {
                id: self.id.clone(),
                message: "empty id".into(),
            });
        }
        match (self.split.requires_label(), self.label_path.is_some()) {
            (true, false) => Err(Error::InvalidRecord {
                id: self.id.clone(),
                message: format!("split {} requires a label path", self.split),
            }),
            (false, true) => Err(Error::InvalidRecord {
                id: self.id.clone(),
                message: "unlabeled record must not carry a label path".into(),
            }),
            _ => Ok(()),
        }
    }
}

/// A validated, immutable catalog of image records.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    class_names: Vec<String>,
    records: Vec<ImageRecord>,
    index: HashMap<String, usize>,
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>, records: Vec<ImageRecord>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::invalid("class list is empty"));
        }
        if class_names.len() > 256 {
            return Err(Error::invalid("at most 256 classes fit an 8-bit mask"));
        }
        let mut seen = HashMap::new();
        for name in &class_names {
            if seen.insert(name.as_str(), ()).is_some() {
                return Err(Error::invalid(format!("duplicate class name {name:?}")));
            }
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(DatasetManifest {
            class_names,
            records,
            index,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn require(&self, id: &str) -> Result<&ImageRecord> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// Records of the given split, sorted by id.
    pub fn split_records(&self, split: Split) -> Vec<&ImageRecord> {
        let mut out: Vec<_> = self.records.iter().filter(|r| r.split == split).collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for r in &self.records {
            *counts.get_mut(&r.split).unwrap() += 1;
        }
        counts
    }

    /// Values of `axis` that occur anywhere in the manifest, in enum order.
    pub fn axis_support(&self, axis: ScenarioAxis) -> Vec<&'static str> {
        let present: std::collections::BTreeSet<_> =
            self.records.iter().map(|r| r.scenario.value(axis)).collect();
        axis_values(axis)
            .into_iter()
            .filter(|v| present.contains(v))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let parsed = parse_lines(text)?;
        Self::new(parsed.classes, parsed.records.into_iter().map(|(r, _)| r).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Canonical text form: header line then one line per record.
    pub fn to_text(&self) -> String {
        render_lines(&self.class_names, None, self.records.iter().map(|r| (r, None)))
    }
}

pub(crate) fn axis_values(axis: ScenarioAxis) -> Vec<&'static str> {
    match axis {
        ScenarioAxis::Weather => Weather::ALL.iter().map(|v| v.as_str()).collect(),
        ScenarioAxis::Time => TimeOfDay::ALL.iter().map(|v| v.as_str()).collect(),
        ScenarioAxis::RoadType => RoadType::ALL.iter().map(|v| v.as_str()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct SubsetHeader {
    pub method: String,
    pub seed: u64,
    pub target_size: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    format: String,
    classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subset: Option<SubsetHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    weather: String,
    time: String,
    road_type: String,
    split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

pub(crate) struct ParsedLines {
    pub classes: Vec<String>,
    pub subset: Option<SubsetHeader>,
    pub records: Vec<(ImageRecord, Option<Provenance>)>,
}

pub(crate) fn parse_lines(text: &str) -> Result<ParsedLines> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    let header: HeaderLine = serde_json::from_str(header).map_err(|e| Error::Parse {
        line: hline,
        message: format!("bad header: {e}"),
    })?;
    if header.format != FORMAT_VERSION {
        return Err(Error::Parse {
            line: hline,
            message: format!("unsupported format {:?}", header.format),
        });
    }
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    for (line, text) in lines {
        let raw: RecordLine = serde_json::from_str(text).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let record = ImageRecord {
            scenario: ScenarioTag {
                weather: raw.weather.parse()?,
                time: raw.time.parse()?,
                road_type: raw.road_type.parse()?,
            },
            split: raw.split.parse()?,
            id: raw.id,
            image_path: PathBuf::from(raw.image),
            label_path: raw.label.map(PathBuf::from),
        };
        record.validate()?;
        if seen.insert(record.id.clone(), ()).is_some() {
            return Err(Error::DuplicateId(record.id));
        }
        records.push((record, raw.provenance));
    }
    Ok(ParsedLines {
        classes: header.classes,
        subset: header.subset,
        records,
    })
}

pub(crate) fn render_lines<'a>(
    classes: &[String],
    subset: Option<&SubsetHeader>,
    records: impl Iterator<Item = (&'a ImageRecord, Option<Provenance>)>,
) -> String {
    let header = HeaderLine {
        format: FORMAT_VERSION.to_string(),
        classes: classes.to_vec(),
        subset: subset.cloned(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for (r, provenance) in records {
        let line = RecordLine {
            id: r.id.clone(),
            image: r.image_path.to_string_lossy().into_owned(),
            label: r.label_path.as_ref().map(|p| p.to_string_lossy().into_owned()),
            weather: r.scenario.weather.to_string(),
            time: r.scenario.time.to_string(),
            road_type: r.scenario.road_type.to_string(),
            split: r.split.to_string(),
            provenance,
        };
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    out
}
