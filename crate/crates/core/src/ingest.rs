//! Loaders for the five raw data families and the assembled, tract-assigned
//! [`RegionDataset`].
//!
//! Point records (incidents, venues, stations, taxi pick-ups and drop-offs)
//! are assigned to every tract whose buffered geometry holds them. The
//! assignment is computed once here and stored with the record.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime};
use geojson::{Feature, FeatureCollection, GeoJson, Geometry, JsonObject, Value};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::CategoryOntology;
use crate::geo::{PlanarPoint, PolygonShape, SpatialIndex, TractGeometry};

/// Crime categories carried by incident records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrimeType {
    GrandLarceny,
    Robbery,
    Burglary,
    Assault,
    VehicleLarceny,
    Other,
}

impl CrimeType {
    pub const ALL: [CrimeType; 6] = [
        CrimeType::GrandLarceny,
        CrimeType::Robbery,
        CrimeType::Burglary,
        CrimeType::Assault,
        CrimeType::VehicleLarceny,
        CrimeType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CrimeType::GrandLarceny => "grand_larceny",
            CrimeType::Robbery => "robbery",
            CrimeType::Burglary => "burglary",
            CrimeType::Assault => "assault",
            CrimeType::VehicleLarceny => "vehicle_larceny",
            CrimeType::Other => "other",
        }
    }

    /// Unknown labels fall back to [`CrimeType::Other`].
    pub fn from_label(label: &str) -> Self {
        let norm = label.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        Self::ALL.into_iter().find(|c| c.as_str() == norm).unwrap_or(CrimeType::Other)
    }
}

/// The dependent-variable families: total incidents or one crime type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentType {
    Total,
    GrandLarceny,
    Robbery,
    Burglary,
    Assault,
    VehicleLarceny,
}

impl IncidentType {
    pub const ALL: [IncidentType; 6] = [
        IncidentType::Total,
        IncidentType::GrandLarceny,
        IncidentType::Robbery,
        IncidentType::Burglary,
        IncidentType::Assault,
        IncidentType::VehicleLarceny,
    ];

    pub fn matches(self, crime: CrimeType) -> bool {
        match self {
            IncidentType::Total => true,
            IncidentType::GrandLarceny => crime == CrimeType::GrandLarceny,
            IncidentType::Robbery => crime == CrimeType::Robbery,
            IncidentType::Burglary => crime == CrimeType::Burglary,
            IncidentType::Assault => crime == CrimeType::Assault,
            IncidentType::VehicleLarceny => crime == CrimeType::VehicleLarceny,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IncidentType::Total => "total",
            IncidentType::GrandLarceny => "grand_larceny",
            IncidentType::Robbery => "robbery",
            IncidentType::Burglary => "burglary",
            IncidentType::Assault => "assault",
            IncidentType::VehicleLarceny => "vehicle_larceny",
        }
    }
}

impl std::str::FromStr for IncidentType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown incident type `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: String,
    pub timestamp: NaiveDateTime,
    pub location: PlanarPoint,
    pub crime_type: CrimeType,
}

/// Popular-hours buckets, weekday parts first.
pub const POPULAR_BUCKETS: [&str; 8] =
    ["wd_morning", "wd_afternoon", "wd_evening", "wd_night", "we_morning", "we_afternoon", "we_evening", "we_night"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VenueRecord {
    pub venue_id: String,
    pub location: PlanarPoint,
    /// Index into the dataset's [`CategoryOntology`]; `None` when uncategorized.
    pub category: Option<usize>,
    pub checkins_total: u64,
    /// Indexed like [`POPULAR_BUCKETS`].
    pub popular: [bool; 8],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationRecord {
    pub station_id: String,
    pub location: PlanarPoint,
}

/// Pre-differenced turnstile counts for one reporting interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnstileInterval {
    pub station_id: String,
    pub interval_start: NaiveDateTime,
    pub entries: u64,
    pub exits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxiTrip {
    pub pickup_time: NaiveDateTime,
    pub dropoff_time: NaiveDateTime,
    pub pickup: PlanarPoint,
    pub dropoff: PlanarPoint,
    pub passengers: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusRow {
    pub population: f64,
    pub frac_male: f64,
    pub frac_black: f64,
    pub frac_hispanic: f64,
    pub frac_poverty: f64,
    pub frac_vacant: f64,
    pub frac_rented: f64,
    pub frac_stable: f64,
    /// white, black, hispanic, asian, other
    pub race_counts: [f64; 5],
    /// under 18, 18-34, 35-64, 65 and over
    pub age_counts: [f64; 4],
    /// low, medium, high
    pub income_counts: [f64; 3],
}

impl CensusRow {
    pub fn fractions(&self) -> [f64; 7] {
        [
            self.frac_male,
            self.frac_black,
            self.frac_hispanic,
            self.frac_poverty,
            self.frac_vacant,
            self.frac_rented,
            self.frac_stable,
        ]
    }
}

pub type CensusTable = BTreeMap<String, CensusRow>;

pub const CENSUS_COLUMNS: [&str; 21] = [
    "tract_id",
    "population",
    "frac_male",
    "frac_black",
    "frac_hispanic",
    "frac_poverty",
    "frac_vacant",
    "frac_rented",
    "frac_stable",
    "race_white",
    "race_black",
    "race_hispanic",
    "race_asian",
    "race_other",
    "age_under18",
    "age_18_34",
    "age_35_64",
    "age_65plus",
    "income_low",
    "income_medium",
    "income_high",
];

/// Malformed rows abort the load (`Strict`) or are skipped and tallied (`Lenient`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

/// Records from one file plus what was dropped on the way.
#[derive(Debug, Clone, Default)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    /// Rows skipped as malformed (lenient mode only).
    pub skipped: usize,
    /// Rows outside the requested years.
    pub filtered_out: usize,
}

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in [TIMESTAMP_FORMAT, "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_local());
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0))
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

/// Header-addressed CSV row access with per-line error reporting.
struct CsvRows {
    path: PathBuf,
    reader: csv::Reader<BufReader<File>>,
    columns: HashMap<String, usize>,
}

impl CsvRows {
    fn open(path: &Path, required: &[&str]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader =
            csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(BufReader::new(file));
        let columns: HashMap<String, usize> = match reader.headers() {
            Ok(h) => h.iter().enumerate().map(|(i, name)| (name.to_string(), i)).collect(),
            Err(e) => return Err(Error::parse(path, 1, e.to_string())),
        };
        // an empty file has no header and yields no rows
        if !columns.is_empty() || fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false) {
            for col in required {
                if !columns.contains_key(*col) {
                    return Err(Error::parse(path, 1, format!("missing column `{col}`")));
                }
            }
        }
        Ok(Self { path: path.to_path_buf(), reader, columns })
    }

    /// Visits each data row; `parse` errors are fatal or tallied per `mode`.
    fn for_each<T>(
        mut self,
        mode: ParseMode,
        mut parse: impl FnMut(&Row<'_>) -> std::result::Result<Option<T>, String>,
    ) -> Result<Loaded<T>> {
        let mut out = Loaded { records: Vec::new(), skipped: 0, filtered_out: 0 };
        let mut record = csv::StringRecord::new();
        loop {
            let line = self.reader.position().line() + 1;
            let result = match self.reader.read_record(&mut record) {
                Ok(false) => break,
                Ok(true) => {
                    let row = Row { record: &record, columns: &self.columns };
                    parse(&row)
                }
                Err(e) => Err(e.to_string()),
            };
            match result {
                Ok(Some(r)) => out.records.push(r),
                Ok(None) => out.filtered_out += 1,
                Err(message) => match mode {
                    ParseMode::Strict => {
                        let line = record.position().map_or(line, |p| p.line());
                        return Err(Error::parse(&self.path, line, message));
                    }
                    ParseMode::Lenient => out.skipped += 1,
                },
            }
        }
        if out.skipped > 0 {
            warn!("{}: skipped {} malformed rows", self.path.display(), out.skipped);
        }
        if out.filtered_out > 0 {
            info!("{}: dropped {} rows outside the requested years", self.path.display(), out.filtered_out);
        }
        Ok(out)
    }
}

struct Row<'a> {
    record: &'a csv::StringRecord,
    columns: &'a HashMap<String, usize>,
}

impl Row<'_> {
    fn str(&self, col: &str) -> std::result::Result<&str, String> {
        self.columns.get(col).and_then(|&i| self.record.get(i)).ok_or_else(|| format!("missing field `{col}`"))
    }

    fn f64(&self, col: &str) -> std::result::Result<f64, String> {
        let raw = self.str(col)?;
        let v: f64 = raw.parse().map_err(|_| format!("`{col}`: not a number: {raw:?}"))?;
        if !v.is_finite() {
            return Err(format!("`{col}`: not finite"));
        }
        Ok(v)
    }

    fn count(&self, col: &str) -> std::result::Result<u64, String> {
        let raw = self.str(col)?;
        let v: i64 = raw.parse().map_err(|_| format!("`{col}`: not an integer: {raw:?}"))?;
        u64::try_from(v).map_err(|_| format!("`{col}`: negative count {v}"))
    }

    fn fraction(&self, col: &str) -> std::result::Result<f64, String> {
        let v = self.f64(col)?;
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("`{col}`: fraction {v} outside [0, 1]"));
        }
        Ok(v)
    }

    fn nonneg(&self, col: &str) -> std::result::Result<f64, String> {
        let v = self.f64(col)?;
        if v < 0.0 {
            return Err(format!("`{col}`: negative value {v}"));
        }
        Ok(v)
    }

    fn timestamp(&self, col: &str) -> std::result::Result<NaiveDateTime, String> {
        let raw = self.str(col)?;
        parse_timestamp(raw).ok_or_else(|| format!("`{col}`: bad timestamp {raw:?}"))
    }

    fn point(&self, x: &str, y: &str) -> std::result::Result<PlanarPoint, String> {
        Ok(PlanarPoint::new(self.f64(x)?, self.f64(y)?))
    }

    fn flag(&self, col: &str) -> std::result::Result<bool, String> {
        match self.str(col)? {
            "1" | "true" | "True" | "TRUE" => Ok(true),
            "0" | "false" | "False" | "FALSE" | "" => Ok(false),
            other => Err(format!("`{col}`: not a flag: {other:?}")),
        }
    }
}

fn in_years(years: Option<&[i32]>, t: &NaiveDateTime) -> bool {
    years.is_none_or(|ys| ys.contains(&t.year()))
}

pub fn load_events(path: &Path, years: Option<&[i32]>, mode: ParseMode) -> Result<Loaded<EventRecord>> {
    let rows = CsvRows::open(path, &["event_id", "timestamp", "x", "y", "crime_type"])?;
    rows.for_each(mode, |row| {
        let timestamp = row.timestamp("timestamp")?;
        let record = EventRecord {
            event_id: row.str("event_id")?.to_string(),
            timestamp,
            location: row.point("x", "y")?,
            crime_type: CrimeType::from_label(row.str("crime_type")?),
        };
        Ok(in_years(years, &timestamp).then_some(record))
    })
}

pub fn venue_columns() -> Vec<String> {
    let mut cols: Vec<String> =
        ["venue_id", "x", "y", "category", "checkins_total"].iter().map(|s| s.to_string()).collect();
    cols.extend(POPULAR_BUCKETS.iter().map(|b| format!("pop_{b}")));
    cols
}

/// Categories are matched against `ontology` by name; an empty category
/// means uncategorized and an unknown name is a malformed row.
pub fn load_venues(path: &Path, ontology: &CategoryOntology, mode: ParseMode) -> Result<Loaded<VenueRecord>> {
    let cols = venue_columns();
    let required: Vec<&str> = cols.iter().map(String::as_str).collect();
    let rows = CsvRows::open(path, &required)?;
    rows.for_each(mode, |row| {
        let raw_category = row.str("category")?;
        let category = if raw_category.is_empty() {
            None
        } else {
            Some(ontology.index_of(raw_category).ok_or_else(|| format!("unknown venue category {raw_category:?}"))?)
        };
        let mut popular = [false; 8];
        for (slot, bucket) in popular.iter_mut().zip(POPULAR_BUCKETS) {
            *slot = row.flag(&format!("pop_{bucket}"))?;
        }
        Ok(Some(VenueRecord {
            venue_id: row.str("venue_id")?.to_string(),
            location: row.point("x", "y")?,
            category,
            checkins_total: row.count("checkins_total")?,
            popular,
        }))
    })
}

pub fn load_stations(path: &Path, mode: ParseMode) -> Result<Loaded<StationRecord>> {
    let rows = CsvRows::open(path, &["station_id", "x", "y"])?;
    let mut seen = BTreeSet::new();
    rows.for_each(mode, |row| {
        let station_id = row.str("station_id")?.to_string();
        if !seen.insert(station_id.clone()) {
            return Err(format!("duplicate station_id {station_id:?}"));
        }
        Ok(Some(StationRecord { station_id, location: row.point("x", "y")? }))
    })
}

pub fn load_turnstile(path: &Path, years: Option<&[i32]>, mode: ParseMode) -> Result<Loaded<TurnstileInterval>> {
    let rows = CsvRows::open(path, &["station_id", "interval_start", "entries", "exits"])?;
    rows.for_each(mode, |row| {
        let interval_start = row.timestamp("interval_start")?;
        let record = TurnstileInterval {
            station_id: row.str("station_id")?.to_string(),
            interval_start,
            entries: row.count("entries")?,
            exits: row.count("exits")?,
        };
        Ok(in_years(years, &interval_start).then_some(record))
    })
}

pub fn load_taxi(path: &Path, years: Option<&[i32]>, mode: ParseMode) -> Result<Loaded<TaxiTrip>> {
    let rows = CsvRows::open(
        path,
        &["pickup_ts", "dropoff_ts", "pickup_x", "pickup_y", "dropoff_x", "dropoff_y", "passengers"],
    )?;
    rows.for_each(mode, |row| {
        let pickup_time = row.timestamp("pickup_ts")?;
        let dropoff_time = row.timestamp("dropoff_ts")?;
        if dropoff_time < pickup_time {
            return Err("dropoff before pickup".into());
        }
        let passengers = row.count("passengers")?;
        if passengers == 0 {
            return Err("trip with zero passengers".into());
        }
        let trip = TaxiTrip {
            pickup_time,
            dropoff_time,
            pickup: row.point("pickup_x", "pickup_y")?,
            dropoff: row.point("dropoff_x", "dropoff_y")?,
            passengers: u32::try_from(passengers).map_err(|_| "passenger count too large".to_string())?,
        };
        Ok(in_years(years, &pickup_time).then_some(trip))
    })
}

pub fn load_census(path: &Path, mode: ParseMode) -> Result<CensusTable> {
    let rows = CsvRows::open(path, &CENSUS_COLUMNS)?;
    let loaded = rows.for_each(mode, |row| {
        let tract_id = row.str("tract_id")?.to_string();
        let population = row.nonneg("population")?;
        let mut race_counts = [0.0; 5];
        for (slot, col) in race_counts.iter_mut().zip(&CENSUS_COLUMNS[9..14]) {
            *slot = row.nonneg(col)?;
        }
        let mut age_counts = [0.0; 4];
        for (slot, col) in age_counts.iter_mut().zip(&CENSUS_COLUMNS[14..18]) {
            *slot = row.nonneg(col)?;
        }
        let mut income_counts = [0.0; 3];
        for (slot, col) in income_counts.iter_mut().zip(&CENSUS_COLUMNS[18..21]) {
            *slot = row.nonneg(col)?;
        }
        let census = CensusRow {
            population,
            frac_male: row.fraction("frac_male")?,
            frac_black: row.fraction("frac_black")?,
            frac_hispanic: row.fraction("frac_hispanic")?,
            frac_poverty: row.fraction("frac_poverty")?,
            frac_vacant: row.fraction("frac_vacant")?,
            frac_rented: row.fraction("frac_rented")?,
            frac_stable: row.fraction("frac_stable")?,
            race_counts,
            age_counts,
            income_counts,
        };
        Ok(Some((tract_id, census)))
    })?;
    let mut table = CensusTable::new();
    for (tract_id, row) in loaded.records {
        let race: f64 = row.race_counts.iter().sum();
        let age: f64 = row.age_counts.iter().sum();
        if race > row.population * 1.01 + 1.0 || age > row.population * 1.01 + 1.0 {
            warn!("{}: tract {tract_id}: group counts exceed population {}", path.display(), row.population);
        }
        if table.insert(tract_id.clone(), row).is_some() {
            return Err(Error::parse(path, &tract_id, "duplicate tract_id"));
        }
    }
    Ok(table)
}

fn ring_from_positions(ring: &[Vec<f64>]) -> std::result::Result<Vec<PlanarPoint>, String> {
    ring.iter()
        .map(|pos| match pos.as_slice() {
            [x, y, ..] => Ok(PlanarPoint::new(*x, *y)),
            _ => Err("position with fewer than 2 coordinates".to_string()),
        })
        .collect()
}

fn shape_from_rings(rings: &[Vec<Vec<f64>>]) -> std::result::Result<PolygonShape, String> {
    let (outer, holes) = rings.split_first().ok_or("polygon without rings")?;
    let outer = ring_from_positions(outer)?;
    let holes = holes.iter().map(|h| ring_from_positions(h)).collect::<std::result::Result<_, _>>()?;
    PolygonShape::new(outer, holes).map_err(|e| e.to_string())
}

fn property_string(props: Option<&JsonObject>, key: &str) -> Option<String> {
    match props?.get(key)? {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Reads a feature collection of polygons/multipolygons with a required
/// `tract_id` property and optional `area_sq_mi`.
pub fn load_tracts(path: &Path, sq_units_per_sq_mile: f64) -> Result<Vec<TractGeometry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let geojson: GeoJson = text.parse().map_err(|e: geojson::Error| Error::parse(path, "document", e.to_string()))?;
    let features = match geojson {
        GeoJson::FeatureCollection(fc) => fc.features,
        GeoJson::Feature(f) => vec![f],
        GeoJson::Geometry(_) => {
            return Err(Error::parse(path, "document", "expected a feature collection"));
        }
    };
    let mut seen = BTreeSet::new();
    let mut tracts = Vec::with_capacity(features.len());
    for (i, feature) in features.iter().enumerate() {
        let locus = format!("feature {i}");
        let props = feature.properties.as_ref();
        let tract_id = property_string(props, "tract_id")
            .ok_or_else(|| Error::parse(path, &locus, "missing `tract_id` property"))?;
        let locus = format!("feature {i} (tract {tract_id})");
        if !seen.insert(tract_id.clone()) {
            return Err(Error::parse(path, &locus, format!("duplicate tract_id {tract_id:?}")));
        }
        let area = match props.and_then(|p| p.get("area_sq_mi")) {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => Some(v.as_f64().ok_or_else(|| Error::parse(path, &locus, "`area_sq_mi` is not a number"))?),
        };
        let geometry =
            feature.geometry.as_ref().ok_or_else(|| Error::parse(path, &locus, "feature without geometry"))?;
        let shapes = match &geometry.value {
            Value::Polygon(rings) => vec![shape_from_rings(rings)],
            Value::MultiPolygon(polys) => polys.iter().map(|p| shape_from_rings(p)).collect(),
            _ => vec![Err("geometry is not a polygon or multipolygon".to_string())],
        }
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|m| Error::parse(path, &locus, m))?;
        let tract = TractGeometry::new(tract_id, shapes, area, sq_units_per_sq_mile)
            .map_err(|e| Error::parse(path, &locus, e.to_string()))?;
        tracts.push(tract);
    }
    Ok(tracts)
}

fn shape_to_rings(shape: &PolygonShape) -> Vec<Vec<Vec<f64>>> {
    std::iter::once(shape.outer())
        .chain(shape.holes().iter().map(Vec::as_slice))
        .map(|ring| ring.iter().map(|p| vec![p.x, p.y]).collect())
        .collect()
}

/// GeoJSON feature for a tract carrying `tract_id`, `area_sq_mi` and any extra properties.
pub fn tract_feature(tract: &TractGeometry, extra: JsonObject) -> Feature {
    let value = if tract.shapes.len() == 1 {
        Value::Polygon(shape_to_rings(&tract.shapes[0]))
    } else {
        Value::MultiPolygon(tract.shapes.iter().map(shape_to_rings).collect())
    };
    let mut props = JsonObject::new();
    props.insert("tract_id".into(), tract.tract_id.clone().into());
    props.insert("area_sq_mi".into(), tract.area_sq_mi.into());
    props.extend(extra);
    Feature {
        bbox: None,
        geometry: Some(Geometry::new(value)),
        id: None,
        properties: Some(props),
        foreign_members: None,
    }
}

pub fn write_feature_collection(path: &Path, features: Vec<Feature>) -> Result<()> {
    let fc = FeatureCollection { bbox: None, features, foreign_members: None };
    let text = serde_json::to_string(&fc)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_tracts(path: &Path, tracts: &[TractGeometry]) -> Result<()> {
    let features = tracts.iter().map(|t| tract_feature(t, JsonObject::new())).collect();
    write_feature_collection(path, features)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn finish(path: &Path, writer: csv::Writer<BufWriter<File>>) -> Result<()> {
    writer.into_inner().map_err(|e| Error::io(path, e.into_error()))?.flush().map_err(|e| Error::io(path, e))
}

pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["event_id", "timestamp", "x", "y", "crime_type"])?;
    for e in events {
        w.write_record([
            e.event_id.clone(),
            format_timestamp(&e.timestamp),
            e.location.x.to_string(),
            e.location.y.to_string(),
            e.crime_type.as_str().to_string(),
        ])?;
    }
    finish(path, w)
}

pub fn write_venues(path: &Path, venues: &[VenueRecord], ontology: &CategoryOntology) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(venue_columns())?;
    for v in venues {
        let mut rec = vec![
            v.venue_id.clone(),
            v.location.x.to_string(),
            v.location.y.to_string(),
            v.category.map(|c| ontology.names()[c].clone()).unwrap_or_default(),
            v.checkins_total.to_string(),
        ];
        rec.extend(v.popular.iter().map(|&f| u8::from(f).to_string()));
        w.write_record(rec)?;
    }
    finish(path, w)
}

pub fn write_stations(path: &Path, stations: &[StationRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["station_id", "x", "y"])?;
    for s in stations {
        w.write_record([s.station_id.clone(), s.location.x.to_string(), s.location.y.to_string()])?;
    }
    finish(path, w)
}

pub fn write_turnstile(path: &Path, intervals: &[TurnstileInterval]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["station_id", "interval_start", "entries", "exits"])?;
    for t in intervals {
        w.write_record([
            t.station_id.clone(),
            format_timestamp(&t.interval_start),
            t.entries.to_string(),
            t.exits.to_string(),
        ])?;
    }
    finish(path, w)
}

pub fn write_taxi(path: &Path, trips: &[TaxiTrip]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["pickup_ts", "dropoff_ts", "pickup_x", "pickup_y", "dropoff_x", "dropoff_y", "passengers"])?;
    for t in trips {
        w.write_record([
            format_timestamp(&t.pickup_time),
            format_timestamp(&t.dropoff_time),
            t.pickup.x.to_string(),
            t.pickup.y.to_string(),
            t.dropoff.x.to_string(),
            t.dropoff.y.to_string(),
            t.passengers.to_string(),
        ])?;
    }
    finish(path, w)
}

pub fn write_census(path: &Path, table: &CensusTable) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(CENSUS_COLUMNS)?;
    for (tract_id, r) in table {
        let mut rec = vec![tract_id.clone(), r.population.to_string()];
        rec.extend(r.fractions().iter().map(f64::to_string));
        rec.extend(r.race_counts.iter().map(f64::to_string));
        rec.extend(r.age_counts.iter().map(f64::to_string));
        rec.extend(r.income_counts.iter().map(f64::to_string));
        w.write_record(rec)?;
    }
    finish(path, w)
}

/// A record together with the positions of the tracts it was assigned to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assigned<T> {
    pub record: T,
    pub tracts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignedTrip {
    pub trip: TaxiTrip,
    pub pickup_tracts: Vec<u32>,
    pub dropoff_tracts: Vec<u32>,
}

/// Everything `build_dataset` consumes, already parsed.
#[derive(Debug, Clone, Default)]
pub struct RawSources {
    pub tracts: Vec<TractGeometry>,
    pub census: BTreeMap<i32, CensusTable>,
    pub events: Vec<EventRecord>,
    pub venues: Vec<VenueRecord>,
    pub stations: Vec<StationRecord>,
    pub turnstile: Vec<TurnstileInterval>,
    pub taxi: Vec<TaxiTrip>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub buffer: f64,
    pub years: Vec<i32>,
    pub ontology: CategoryOntology,
    /// Tracts dropped before assignment (e.g. jail or military tracts).
    pub excluded_tracts: Vec<String>,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// The canonical per-region dataset. Tracts are sorted by `tract_id` and
/// every point record carries its (possibly empty) tract assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDataset {
    pub format_version: u32,
    pub buffer: f64,
    pub years: Vec<i32>,
    pub ontology: CategoryOntology,
    pub tracts: Vec<TractGeometry>,
    pub census: BTreeMap<i32, CensusTable>,
    pub events: BTreeMap<i32, Vec<Assigned<EventRecord>>>,
    /// One snapshot shared by all years.
    pub venues: Vec<Assigned<VenueRecord>>,
    pub stations: Vec<Assigned<StationRecord>>,
    pub turnstile: BTreeMap<i32, Vec<TurnstileInterval>>,
    pub taxi: BTreeMap<i32, Vec<AssignedTrip>>,
}

fn to_u32(slots: Vec<usize>) -> Vec<u32> {
    slots.into_iter().map(|s| s as u32).collect()
}

pub fn build_dataset(raw: RawSources, options: &BuildOptions) -> Result<RegionDataset> {
    if !(options.buffer >= 0.0) {
        return Err(Error::Argument(format!("buffer must be >= 0, got {}", options.buffer)));
    }
    let mut years = options.years.clone();
    years.sort_unstable();
    years.dedup();

    let excluded: BTreeSet<&str> = options.excluded_tracts.iter().map(String::as_str).collect();
    let mut tracts: Vec<TractGeometry> =
        raw.tracts.into_iter().filter(|t| !excluded.contains(t.tract_id.as_str())).collect();
    tracts.sort_by(|a, b| a.tract_id.cmp(&b.tract_id));
    if let Some(w) = tracts.windows(2).find(|w| w[0].tract_id == w[1].tract_id) {
        return Err(Error::Argument(format!("duplicate tract_id {:?}", w[0].tract_id)));
    }
    if tracts.is_empty() {
        return Err(Error::Argument("no tracts to build a dataset from".into()));
    }

    let mut census = BTreeMap::new();
    for &year in &years {
        let table =
            raw.census.get(&year).ok_or_else(|| Error::Argument(format!("no census table mapped to year {year}")))?;
        let mut kept = CensusTable::new();
        for t in &tracts {
            let row = table
                .get(&t.tract_id)
                .ok_or_else(|| Error::Argument(format!("census table for {year} lacks tract {}", t.tract_id)))?;
            kept.insert(t.tract_id.clone(), row.clone());
        }
        census.insert(year, kept);
    }

    let index = SpatialIndex::new(tracts);
    let buffer = options.buffer;
    let assign = |p: PlanarPoint| to_u32(index.assign_slots(p, buffer));

    let mut events: BTreeMap<i32, Vec<Assigned<EventRecord>>> = years.iter().map(|&y| (y, Vec::new())).collect();
    let assigned_events: Vec<Assigned<EventRecord>> =
        raw.events.into_par_iter().map(|e| Assigned { tracts: assign(e.location), record: e }).collect();
    for e in assigned_events {
        if let Some(bucket) = events.get_mut(&e.record.timestamp.year()) {
            bucket.push(e);
        }
    }

    let venues = raw.venues.into_par_iter().map(|v| Assigned { tracts: assign(v.location), record: v }).collect();
    let stations = raw.stations.into_par_iter().map(|s| Assigned { tracts: assign(s.location), record: s }).collect();

    let mut turnstile: BTreeMap<i32, Vec<TurnstileInterval>> = years.iter().map(|&y| (y, Vec::new())).collect();
    for t in raw.turnstile {
        if let Some(bucket) = turnstile.get_mut(&t.interval_start.year()) {
            bucket.push(t);
        }
    }

    let mut taxi: BTreeMap<i32, Vec<AssignedTrip>> = years.iter().map(|&y| (y, Vec::new())).collect();
    let assigned_trips: Vec<AssignedTrip> = raw
        .taxi
        .into_par_iter()
        .map(|trip| AssignedTrip { pickup_tracts: assign(trip.pickup), dropoff_tracts: assign(trip.dropoff), trip })
        .collect();
    for t in assigned_trips {
        if let Some(bucket) = taxi.get_mut(&t.trip.pickup_time.year()) {
            bucket.push(t);
        }
    }

    Ok(RegionDataset {
        format_version: DATASET_FORMAT_VERSION,
        buffer,
        years,
        ontology: options.ontology.clone(),
        tracts: index.into_tracts(),
        census,
        events,
        venues,
        stations,
        turnstile,
        taxi,
    })
}

/// Min, quartiles (linear interpolation), mean and max.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile by linear interpolation between closest ranks on sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl DescriptiveStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            min: sorted[0],
            q1: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            q3: quantile_sorted(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

/// How incident records were distributed over tracts in one year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentReport {
    pub incidents: usize,
    pub unassigned: usize,
    /// Assignments beyond the first for border incidents.
    pub extra_assignments: usize,
    /// Sum over tracts of per-tract counts.
    pub tract_total: usize,
}

impl RegionDataset {
    pub fn tract_ids(&self) -> Vec<&str> {
        self.tracts.iter().map(|t| t.tract_id.as_str()).collect()
    }

    /// Per-tract incident counts, in tract order. Border incidents count in
    /// every tract they were assigned to.
    pub fn crime_counts(&self, year: i32, kind: IncidentType) -> Result<Vec<u64>> {
        let events = self.events.get(&year).ok_or_else(|| Error::Argument(format!("dataset has no year {year}")))?;
        let mut counts = vec![0u64; self.tracts.len()];
        for e in events.iter().filter(|e| kind.matches(e.record.crime_type)) {
            for &t in &e.tracts {
                counts[t as usize] += 1;
            }
        }
        Ok(counts)
    }

    pub fn assignment_report(&self, year: i32) -> Result<AssignmentReport> {
        let events = self.events.get(&year).ok_or_else(|| Error::Argument(format!("dataset has no year {year}")))?;
        let tract_total: usize = events.iter().map(|e| e.tracts.len()).sum();
        Ok(AssignmentReport {
            incidents: events.len(),
            unassigned: events.iter().filter(|e| e.tracts.is_empty()).count(),
            extra_assignments: events.iter().map(|e| e.tracts.len().saturating_sub(1)).sum(),
            tract_total,
        })
    }

    /// Descriptive statistics of per-tract counts for every year and incident type.
    pub fn summary(&self) -> Result<BTreeMap<i32, BTreeMap<IncidentType, DescriptiveStats>>> {
        let mut out = BTreeMap::new();
        for &year in &self.years {
            let mut per_type = BTreeMap::new();
            for kind in IncidentType::ALL {
                let counts: Vec<f64> = self.crime_counts(year, kind)?.into_iter().map(|c| c as f64).collect();
                if let Some(stats) = DescriptiveStats::of(&counts) {
                    per_type.insert(kind, stats);
                }
            }
            out.insert(year, per_type);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tracts.len() as u32;
        let bad = |ids: &[u32]| ids.iter().any(|&t| t >= n);
        let broken = self.events.values().flatten().any(|e| bad(&e.tracts))
            || self.venues.iter().any(|v| bad(&v.tracts))
            || self.stations.iter().any(|s| bad(&s.tracts))
            || self.taxi.values().flatten().any(|t| bad(&t.pickup_tracts) || bad(&t.dropoff_tracts));
        if broken {
            return Err(Error::Cache("record assigned to a nonexistent tract".into()));
        }
        if self.venues.iter().any(|v| v.record.category.is_some_and(|c| c >= self.ontology.len())) {
            return Err(Error::Cache("venue category outside the ontology".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical serialization.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub const CACHE_DATA_FILE: &str = "dataset.json";
pub const CACHE_MANIFEST_FILE: &str = "manifest.json";
const CACHE_FORMAT: &str = "crimecast-region-dataset";

/// Manifest of a dataset cache directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub format: String,
    pub format_version: u32,
    pub data_file: String,
    pub data_sha256: String,
    pub n_tracts: usize,
    pub years: Vec<i32>,
    pub buffer: f64,
    /// Caller-supplied provenance (config hash, input hashes, tool version).
    pub provenance: BTreeMap<String, String>,
}

/// Writes `dataset.json` (canonical compact JSON, byte-stable for equal
/// datasets) and `manifest.json` into `dir`.
pub fn write_cache(dir: &Path, dataset: &RegionDataset, provenance: BTreeMap<String, String>) -> Result<CacheManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = serde_json::to_vec(dataset)?;
    let data_path = dir.join(CACHE_DATA_FILE);
    fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
    let manifest = CacheManifest {
        format: CACHE_FORMAT.into(),
        format_version: DATASET_FORMAT_VERSION,
        data_file: CACHE_DATA_FILE.into(),
        data_sha256: sha256_hex(&bytes),
        n_tracts: dataset.tracts.len(),
        years: dataset.years.clone(),
        buffer: dataset.buffer,
        provenance,
    };
    let manifest_path = dir.join(CACHE_MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn read_cache_manifest(dir: &Path) -> Result<CacheManifest> {
    let manifest_path = dir.join(CACHE_MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CacheManifest = serde_json::from_str(&text)?;
    if manifest.format != CACHE_FORMAT || manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Cache(format!("unsupported cache format {} v{}", manifest.format, manifest.format_version)));
    }
    Ok(manifest)
}

/// Loads and integrity-checks a cache written by [`write_cache`].
pub fn read_cache(dir: &Path) -> Result<(RegionDataset, CacheManifest)> {
    let manifest = read_cache_manifest(dir)?;
    let data_path = dir.join(&manifest.data_file);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    if sha256_hex(&bytes) != manifest.data_sha256 {
        return Err(Error::Cache(format!("{} does not match its manifest hash", data_path.display())));
    }
    let dataset: RegionDataset = serde_json::from_slice(&bytes)?;
    dataset.validate()?;
    Ok((dataset, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    const EVENTS: &str = "event_id,timestamp,x,y,crime_type
e1,2015-01-03T10:00:00,1,1,robbery
e2,2015-02-03T10:00:00,1,1,assault
e3,2014-12-31T23:59:59,1,1,burglary
e4,2015-03-03T10:00:00,1,1,grand_larceny
e5,2015-04-03T10:00:00,1,1,vehicle_larceny
e6,2014-05-03T10:00:00,1,1,robbery
e7,2015-06-03T10:00:00,1,1,arson
e8,2015-07-03T10:00:00,1,1,robbery
e9,2014-08-03T10:00:00,1,1,robbery
e10,2015-09-03 10:00:00,1,1,assault
";

    #[test]
    fn events_year_filter_and_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "events.csv", EVENTS);
        let loaded = load_events(&p, Some(&[2015]), ParseMode::Strict).unwrap();
        assert_eq!(loaded.records.len(), 7);
        assert_eq!(loaded.filtered_out, 3);
        let arson = loaded.records.iter().find(|e| e.event_id == "e7").unwrap();
        assert_eq!(arson.crime_type, CrimeType::Other);
    }

    #[test]
    fn empty_events_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "events.csv", "");
        assert!(load_events(&p, None, ParseMode::Strict).unwrap().records.is_empty());
        let p = write(dir.path(), "header_only.csv", "event_id,timestamp,x,y,crime_type\n");
        assert!(load_events(&p, None, ParseMode::Strict).unwrap().records.is_empty());
    }

    #[test]
    fn strict_reports_line_and_lenient_tallies() {
        let dir = tempfile::tempdir().unwrap();
        let body = "event_id,timestamp,x,y,crime_type\ne1,2015-01-01T00:00:00,1,1,robbery\ne2,notadate,1,1,robbery\n";
        let p = write(dir.path(), "events.csv", body);
        match load_events(&p, None, ParseMode::Strict) {
            Err(Error::Parse { locus, .. }) => assert_eq!(locus, "3"),
            other => panic!("expected parse error, got {other:?}"),
        }
        let loaded = load_events(&p, None, ParseMode::Lenient).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.skipped, 1);
    }

    #[test]
    fn turnstile_and_taxi_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "turnstile.csv",
            "station_id,interval_start,entries,exits\ns1,2015-01-01T00:00:00,-5,3\n",
        );
        assert!(load_turnstile(&p, None, ParseMode::Strict).is_err());
        let p = write(
            dir.path(),
            "taxi.csv",
            "pickup_ts,dropoff_ts,pickup_x,pickup_y,dropoff_x,dropoff_y,passengers\n\
             2015-01-01T10:00:00,2015-01-01T09:00:00,0,0,1,1,1\n",
        );
        let err = load_taxi(&p, None, ParseMode::Strict).unwrap_err();
        assert!(err.to_string().contains("dropoff before pickup"), "{err}");
    }

    #[test]
    fn venue_categories() {
        let dir = tempfile::tempdir().unwrap();
        let ontology = CategoryOntology::default();
        let header = venue_columns().join(",");
        let body = format!("{header}\nv1,0,0,Food,10,1,0,0,0,0,0,0,1\nv2,1,1,,3,0,0,0,0,0,0,0,0\n");
        let p = write(dir.path(), "venues.csv", &body);
        let venues = load_venues(&p, &ontology, ParseMode::Strict).unwrap().records;
        assert_eq!(venues[0].category, ontology.index_of("Food"));
        assert!(venues[0].popular[0] && venues[0].popular[7]);
        assert_eq!(venues[1].category, None);
        let bad = format!("{header}\nv1,0,0,Bogus,10,0,0,0,0,0,0,0,0\n");
        let p = write(dir.path(), "bad.csv", &bad);
        assert!(load_venues(&p, &ontology, ParseMode::Strict).is_err());
    }

    fn square_feature(id: &str, x0: f64, extra: &str) -> String {
        format!(
            r#"{{"type":"Feature","properties":{{"tract_id":"{id}"{extra}}},"geometry":{{"type":"Polygon","coordinates":[[[{x0},0],[{x1},0],[{x1},100],[{x0},100],[{x0},0]]]}}}}"#,
            x1 = x0 + 100.0
        )
    }

    fn collection(features: &[String]) -> String {
        format!(r#"{{"type":"FeatureCollection","features":[{}]}}"#, features.join(","))
    }

    #[test]
    fn tract_loading() {
        let dir = tempfile::tempdir().unwrap();
        let ok = collection(&[
            square_feature("A", 0.0, ""),
            square_feature("B", 100.0, r#","area_sq_mi":10000"#),
            square_feature("C", 200.0, ""),
        ]);
        let p = write(dir.path(), "tracts.geojson", &ok);
        let tracts = load_tracts(&p, 1.0).unwrap();
        assert_eq!(tracts.len(), 3);
        assert_eq!(tracts[1].area_sq_mi, 10000.0);

        let dup = collection(&[square_feature("A", 0.0, ""), square_feature("A", 100.0, "")]);
        let p = write(dir.path(), "dup.geojson", &dup);
        let err = load_tracts(&p, 1.0).unwrap_err().to_string();
        assert!(err.contains("\"A\""), "{err}");

        let open = r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{"tract_id":"X"},"geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1]]]}}]}"#;
        let p = write(dir.path(), "open.geojson", open);
        let err = load_tracts(&p, 1.0).unwrap_err().to_string();
        assert!(err.contains("not closed") && err.contains("feature 0"), "{err}");
    }

    fn census_row(population: f64) -> CensusRow {
        CensusRow {
            population,
            frac_male: 0.5,
            frac_black: 0.1,
            frac_hispanic: 0.2,
            frac_poverty: 0.1,
            frac_vacant: 0.05,
            frac_rented: 0.6,
            frac_stable: 0.7,
            race_counts: [population * 0.5, population * 0.1, population * 0.2, population * 0.1, population * 0.1],
            age_counts: [population * 0.25; 4],
            income_counts: [10.0, 20.0, 30.0],
        }
    }

    pub(crate) fn two_tract_sources() -> RawSources {
        let a =
            TractGeometry::new("A", vec![PolygonShape::rectangle(0.0, 0.0, 100.0, 100.0).unwrap()], None, 1.0).unwrap();
        let b = TractGeometry::new("B", vec![PolygonShape::rectangle(100.0, 0.0, 200.0, 100.0).unwrap()], None, 1.0)
            .unwrap();
        let table: CensusTable = [("A".to_string(), census_row(100.0)), ("B".to_string(), census_row(0.0))].into();
        let ts = parse_timestamp("2015-03-02T12:00:00").unwrap();
        let ev = |id: &str, x: f64| EventRecord {
            event_id: id.into(),
            timestamp: ts,
            location: PlanarPoint::new(x, 50.0),
            crime_type: CrimeType::Robbery,
        };
        RawSources {
            tracts: vec![b, a],
            census: [(2015, table)].into(),
            events: vec![ev("border", 100.0), ev("inside_a", 20.0), ev("outside", 500.0)],
            ..Default::default()
        }
    }

    fn options() -> BuildOptions {
        BuildOptions { buffer: 50.0, years: vec![2015], ontology: CategoryOntology::default(), excluded_tracts: vec![] }
    }

    #[test]
    fn border_incident_counts_in_both_tracts() {
        let ds = build_dataset(two_tract_sources(), &options()).unwrap();
        assert_eq!(ds.tract_ids(), vec!["A", "B"]);
        assert_eq!(ds.crime_counts(2015, IncidentType::Total).unwrap(), vec![2, 1]);
        assert_eq!(ds.crime_counts(2015, IncidentType::Assault).unwrap(), vec![0, 0]);
        let report = ds.assignment_report(2015).unwrap();
        assert_eq!(report, AssignmentReport { incidents: 3, unassigned: 1, extra_assignments: 1, tract_total: 3 });
        assert_eq!(report.tract_total, report.incidents - report.unassigned + report.extra_assignments);
    }

    #[test]
    fn exclusion_list_drops_tracts() {
        let mut opts = options();
        opts.excluded_tracts = vec!["B".into()];
        let ds = build_dataset(two_tract_sources(), &opts).unwrap();
        assert_eq!(ds.tract_ids(), vec!["A"]);
        assert_eq!(ds.crime_counts(2015, IncidentType::Total).unwrap(), vec![2]);
    }

    #[test]
    fn descriptive_stats_by_hand() {
        let s = DescriptiveStats::of(&[7.0, 1.0, 3.0, 10.0, 4.0]).unwrap();
        // sorted: 1 3 4 7 10
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (1.0, 3.0, 4.0, 7.0, 10.0));
        assert_eq!(s.mean, 5.0);
    }

    #[test]
    fn cache_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(two_tract_sources(), &options()).unwrap();
        write_cache(&dir.path().join("a"), &ds, BTreeMap::new()).unwrap();
        let (back, _) = read_cache(&dir.path().join("a")).unwrap();
        assert_eq!(back, ds);
        let again = build_dataset(two_tract_sources(), &options()).unwrap();
        write_cache(&dir.path().join("b"), &again, BTreeMap::new()).unwrap();
        let a = fs::read(dir.path().join("a").join(CACHE_DATA_FILE)).unwrap();
        let b = fs::read(dir.path().join("b").join(CACHE_DATA_FILE)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tampered_cache_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(two_tract_sources(), &options()).unwrap();
        write_cache(dir.path(), &ds, BTreeMap::new()).unwrap();
        let path = dir.path().join(CACHE_DATA_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(b' ');
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_cache(dir.path()), Err(Error::Cache(_))));
    }

    #[test]
    fn writers_round_trip_through_loaders() {
        let dir = tempfile::tempdir().unwrap();
        let raw = two_tract_sources();
        let p = dir.path().join("events.csv");
        write_events(&p, &raw.events).unwrap();
        assert_eq!(load_events(&p, None, ParseMode::Strict).unwrap().records, raw.events);
        let p = dir.path().join("census.csv");
        write_census(&p, &raw.census[&2015]).unwrap();
        assert_eq!(load_census(&p, ParseMode::Strict).unwrap(), raw.census[&2015]);
        let p = dir.path().join("tracts.geojson");
        write_tracts(&p, &raw.tracts).unwrap();
        assert_eq!(load_tracts(&p, 1.0).unwrap(), raw.tracts);
    }
}
