//! Weekly city series: ingestion, incidence rates, levels and the log
//! transform the Gaussian-process models work in.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Incidence rates are expressed per this many inhabitants.
pub const RATE_BASE: f64 = 100_000.0;

/// Lower DIR bound of the Medium level.
pub const MEDIUM_THRESHOLD: f64 = 25.0;

/// Lower DIR bound of the High level.
pub const HIGH_THRESHOLD: f64 = 75.0;

pub const EPI_HEADER: [&str; 4] = ["city_id", "week", "cases", "population"];
pub const TWEET_HEADER: [&str; 3] = ["city_id", "week", "tweet_count"];

/// Weekly incidence rate per 100,000 inhabitants.
pub fn compute_dir(cases: u64, population: u64) -> Result<f64> {
    if population == 0 {
        return Err(Error::domain("zero population"));
    }
    Ok(cases as f64 * RATE_BASE / population as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IncidenceLevel {
    Low,
    Medium,
    High,
}

impl IncidenceLevel {
    pub const ALL: [IncidenceLevel; 3] = [Self::Low, Self::Medium, Self::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
        }
    }
}

impl fmt::Display for IncidenceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IncidenceLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(Self::Low),
            "medium" | "med" => Ok(Self::Medium),
            "high" => Ok(Self::High),
            other => Err(Error::domain(format!("unknown incidence level `{other}`"))),
        }
    }
}

/// Bands are `[0, 25)` Low, `[25, 75)` Medium and `[75, inf)` High.
pub fn incidence_level(dir: f64) -> Result<IncidenceLevel> {
    if !(dir >= 0.0) {
        return Err(Error::domain(format!("incidence rate must be non-negative, got {dir}")));
    }
    Ok(if dir >= HIGH_THRESHOLD {
        IncidenceLevel::High
    } else if dir >= MEDIUM_THRESHOLD {
        IncidenceLevel::Medium
    } else {
        IncidenceLevel::Low
    })
}

/// One city's aligned weekly series. Week `w` (1-based) lives at index `w - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CitySeries {
    city_id: String,
    population: u64,
    cases: Vec<u64>,
    dir: Vec<f64>,
    tweets: Option<Vec<u64>>,
}

impl CitySeries {
    pub fn new(city_id: impl Into<String>, population: u64, cases: Vec<u64>) -> Result<Self> {
        let dir = cases
            .iter()
            .map(|&c| compute_dir(c, population))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            city_id: city_id.into(),
            population,
            cases,
            dir,
            tweets: None,
        })
    }

    pub fn with_tweets(mut self, tweets: Vec<u64>) -> Result<Self> {
        if tweets.len() != self.cases.len() {
            return Err(Error::Dimension(format!(
                "city {}: {} tweet weeks but {} case weeks",
                self.city_id,
                tweets.len(),
                self.cases.len()
            )));
        }
        self.tweets = Some(tweets);
        Ok(self)
    }

    pub fn without_tweets(mut self) -> Self {
        self.tweets = None;
        self
    }

    pub fn city_id(&self) -> &str {
        &self.city_id
    }

    pub fn population(&self) -> u64 {
        self.population
    }

    pub fn cases(&self) -> &[u64] {
        &self.cases
    }

    pub fn dir(&self) -> &[f64] {
        &self.dir
    }

    pub fn tweets(&self) -> Option<&[u64]> {
        self.tweets.as_deref()
    }

    pub fn n_weeks(&self) -> usize {
        self.cases.len()
    }

    /// Last week index (weeks are numbered from 1).
    pub fn last_week(&self) -> u32 {
        self.cases.len() as u32
    }

    pub fn dir_at(&self, week: u32) -> Option<f64> {
        week.checked_sub(1).and_then(|i| self.dir.get(i as usize).copied())
    }

    pub fn peak_level(&self) -> Option<IncidenceLevel> {
        self.dir.iter().filter_map(|&d| incidence_level(d).ok()).max()
    }
}

/// Log-scale view of a city used for model fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedSeries {
    pub training_horizon: u32,
    /// `log1p(dir)` for every week of the series.
    pub y_raw: Vec<f64>,
    /// Mean of `y_raw` over weeks `1..=training_horizon`.
    pub mean: f64,
    pub y_centered: Vec<f64>,
    pub x_tweets: Option<Vec<f64>>,
}

impl TransformedSeries {
    pub fn training_weeks(&self) -> std::ops::RangeInclusive<u32> {
        1..=self.training_horizon
    }
}

pub fn transform(series: &CitySeries, training_horizon: u32) -> Result<TransformedSeries> {
    if training_horizon == 0 {
        return Err(Error::domain("empty training horizon"));
    }
    if training_horizon > series.last_week() {
        return Err(Error::domain(format!(
            "training horizon {training_horizon} beyond last week {} of city {}",
            series.last_week(),
            series.city_id
        )));
    }
    let y_raw: Vec<f64> = series.dir.iter().map(|d| d.ln_1p()).collect();
    let mean = mean(&y_raw[..training_horizon as usize]);
    let y_centered = y_raw.iter().map(|y| y - mean).collect();
    let x_tweets = series
        .tweets
        .as_ref()
        .map(|t| t.iter().map(|&c| (c as f64).ln_1p()).collect());
    Ok(TransformedSeries {
        training_horizon,
        y_raw,
        mean,
        y_centered,
        x_tweets,
    })
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Keeps cities with `population > min_population` whose peak weekly level
/// reaches `min_peak_level`.
pub fn filter_cities(
    cities: Vec<CitySeries>,
    min_population: u64,
    min_peak_level: IncidenceLevel,
) -> Vec<CitySeries> {
    cities
        .into_iter()
        .filter(|c| c.population > min_population)
        .filter(|c| c.peak_level().is_some_and(|l| l >= min_peak_level))
        .collect()
}

fn header_index(
    path: &Path,
    headers: &csv::StringRecord,
    expected: &[&str],
) -> Result<Vec<usize>> {
    expected
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| Error::Schema {
                    path: path.to_path_buf(),
                    message: format!("missing column `{name}` (expected header {})", expected.join(",")),
                })
        })
        .collect()
}

fn parse_field<T: FromStr>(
    path: &Path,
    record: &csv::StringRecord,
    row: usize,
    col: usize,
    field: &str,
) -> Result<T>
where
    T::Err: fmt::Display,
{
    let raw = record.get(col).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        row,
        field: field.to_string(),
        message: "missing value".into(),
    })?;
    raw.trim().parse::<T>().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        row,
        field: field.to_string(),
        message: format!("cannot parse `{raw}`: {e}"),
    })
}

/// Signed parse so negative counts get a domain message instead of a generic
/// integer parse failure.
fn parse_count(
    path: &Path,
    record: &csv::StringRecord,
    row: usize,
    col: usize,
    field: &str,
) -> Result<u64> {
    let v: i64 = parse_field(path, record, row, col, field)?;
    u64::try_from(v).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        row,
        field: field.to_string(),
        message: format!("negative value {v}"),
    })
}

struct WeekRow<T> {
    row: usize,
    week: u32,
    value: T,
}

fn parse_week(path: &Path, record: &csv::StringRecord, row: usize, col: usize) -> Result<u32> {
    let week: i64 = parse_field(path, record, row, col, "week")?;
    if week < 1 || week > u32::MAX as i64 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row,
            field: "week".into(),
            message: format!("week must be an integer >= 1, got {week}"),
        });
    }
    Ok(week as u32)
}

/// Sorts one city's rows by week and checks they run 1, 2, ... without gaps
/// or duplicates.
fn contiguous_values<T: Copy>(path: &Path, city: &str, mut rows: Vec<WeekRow<T>>) -> Result<Vec<T>> {
    rows.sort_by_key(|r| (r.week, r.row));
    let mut expected = 1u32;
    let mut out = Vec::with_capacity(rows.len());
    for r in &rows {
        if r.week < expected {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: r.row,
                field: "week".into(),
                message: format!("duplicate week {} for city {city}", r.week),
            });
        }
        if r.week > expected {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: r.row,
                field: "week".into(),
                message: format!(
                    "missing week {expected} for city {city} (weeks must be contiguous from 1)"
                ),
            });
        }
        out.push(r.value);
        expected += 1;
    }
    Ok(out)
}

/// Reads the epidemiological table (`city_id,week,cases,population`).
/// Cities come back sorted by id.
pub fn load_epi_table(path: impl AsRef<Path>) -> Result<Vec<CitySeries>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_epi_table(path, file)
}

pub fn read_epi_table(path: &Path, reader: impl Read) -> Result<Vec<CitySeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let cols = header_index(path, rdr.headers()?, &EPI_HEADER)?;
    let mut by_city: BTreeMap<String, (u64, usize, Vec<WeekRow<u64>>)> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let record = record?;
        let city: String = parse_field(path, &record, row, cols[0], "city_id")?;
        if city.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row,
                field: "city_id".into(),
                message: "empty city id".into(),
            });
        }
        let week = parse_week(path, &record, row, cols[1])?;
        let cases = parse_count(path, &record, row, cols[2], "cases")?;
        let population = parse_count(path, &record, row, cols[3], "population")?;
        if population == 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row,
                field: "population".into(),
                message: "zero population".into(),
            });
        }
        let entry = by_city.entry(city.clone()).or_insert((population, row, Vec::new()));
        if entry.0 != population {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row,
                field: "population".into(),
                message: format!(
                    "population {population} differs from {} declared for city {city} on row {}",
                    entry.0, entry.1
                ),
            });
        }
        entry.2.push(WeekRow { row, week, value: cases });
    }
    by_city
        .into_iter()
        .map(|(city, (population, _, rows))| {
            let cases = contiguous_values(path, &city, rows)?;
            CitySeries::new(city, population, cases)
        })
        .collect()
}

/// Attaches tweet counts (`city_id,week,tweet_count`). Cities absent from the
/// file keep no tweet series.
pub fn load_tweet_table(path: impl AsRef<Path>, cities: Vec<CitySeries>) -> Result<Vec<CitySeries>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tweet_table(path, file, cities)
}

pub fn read_tweet_table(
    path: &Path,
    reader: impl Read,
    cities: Vec<CitySeries>,
) -> Result<Vec<CitySeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let cols = header_index(path, rdr.headers()?, &TWEET_HEADER)?;
    let weeks_of: BTreeMap<&str, u32> = cities.iter().map(|c| (c.city_id(), c.last_week())).collect();
    let mut by_city: BTreeMap<String, Vec<WeekRow<u64>>> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let city: String = parse_field(path, &record, row, cols[0], "city_id")?;
        let week = parse_week(path, &record, row, cols[1])?;
        let count = parse_count(path, &record, row, cols[2], "tweet_count")?;
        let Some(&last) = weeks_of.get(city.as_str()) else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row,
                field: "city_id".into(),
                message: format!("unknown city {city}"),
            });
        };
        if week > last {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row,
                field: "week".into(),
                message: format!("week {week} outside the epidemiological range 1..={last} of city {city}"),
            });
        }
        by_city.entry(city).or_default().push(WeekRow { row, week, value: count });
    }
    let mut tweets: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for (city, rows) in by_city {
        let last_row = rows.iter().map(|r| r.row).max().unwrap_or(0);
        let values = contiguous_values(path, &city, rows)?;
        if values.len() as u32 != weeks_of[city.as_str()] {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: last_row,
                field: "week".into(),
                message: format!(
                    "tweets for city {city} cover weeks 1..={} but epidemiological data covers 1..={}",
                    values.len(),
                    weeks_of[city.as_str()]
                ),
            });
        }
        tweets.insert(city, values);
    }
    cities
        .into_iter()
        .map(|c| match tweets.remove(c.city_id()) {
            Some(t) => c.with_tweets(t),
            None => Ok(c),
        })
        .collect()
}

/// Writes the canonical epidemiological table, sorted by city then week.
pub fn dump_epi_table(cities: &[CitySeries], out: impl Write) -> Result<()> {
    let mut sorted: Vec<&CitySeries> = cities.iter().collect();
    sorted.sort_by(|a, b| a.city_id.cmp(&b.city_id));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EPI_HEADER)?;
    for c in sorted {
        for (i, cases) in c.cases.iter().enumerate() {
            w.write_record([
                c.city_id.clone(),
                (i + 1).to_string(),
                cases.to_string(),
                c.population.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<epi writer>", e))?;
    Ok(())
}

/// Writes the canonical tweet table; cities without tweets are skipped.
pub fn dump_tweet_table(cities: &[CitySeries], out: impl Write) -> Result<()> {
    let mut sorted: Vec<&CitySeries> = cities.iter().collect();
    sorted.sort_by(|a, b| a.city_id.cmp(&b.city_id));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TWEET_HEADER)?;
    for c in sorted {
        let Some(tweets) = &c.tweets else { continue };
        for (i, count) in tweets.iter().enumerate() {
            w.write_record([c.city_id.clone(), (i + 1).to_string(), count.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<tweet writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn epi(text: &str) -> Result<Vec<CitySeries>> {
        read_epi_table(Path::new("epi.csv"), text.as_bytes())
    }

    #[test]
    fn dir_examples() {
        assert_eq!(compute_dir(300, 100_000).unwrap(), 300.0);
        assert_eq!(compute_dir(50, 200_000).unwrap(), 25.0);
        assert_eq!(compute_dir(0, 123_456).unwrap(), 0.0);
        assert!(matches!(compute_dir(1, 0), Err(Error::Domain(m)) if m == "zero population"));
    }

    #[test]
    fn level_boundaries() {
        assert_eq!(incidence_level(80.0).unwrap(), IncidenceLevel::High);
        assert_eq!(incidence_level(75.0).unwrap(), IncidenceLevel::High);
        assert_eq!(incidence_level(74.999).unwrap(), IncidenceLevel::Medium);
        assert_eq!(incidence_level(25.0).unwrap(), IncidenceLevel::Medium);
        assert_eq!(incidence_level(24.9).unwrap(), IncidenceLevel::Low);
        assert_eq!(incidence_level(10.0).unwrap(), IncidenceLevel::Low);
        assert_eq!(incidence_level(0.0).unwrap(), IncidenceLevel::Low);
        assert!(incidence_level(-0.1).is_err());
        assert!(incidence_level(f64::NAN).is_err());
        assert!(IncidenceLevel::Low < IncidenceLevel::Medium && IncidenceLevel::Medium < IncidenceLevel::High);
    }

    #[test]
    fn transform_examples() {
        let zeros = CitySeries::new("a", 1000, vec![0, 0, 0]).unwrap();
        let t = transform(&zeros, 3).unwrap();
        assert_eq!(t.y_raw, vec![0.0; 3]);
        assert_eq!(t.mean, 0.0);

        // dir = e - 1 exactly is not reachable from integer counts; check the
        // transform arithmetic directly.
        assert!(((std::f64::consts::E - 1.0).ln_1p() - 1.0).abs() < 1e-15);

        assert!(transform(&zeros, 0).is_err());
        assert!(transform(&zeros, 4).is_err());
    }

    #[test]
    fn mean_uses_training_horizon_only() {
        let c = CitySeries::new("a", 100_000, vec![1, 3, 1000, 5000]).unwrap();
        let t = transform(&c, 2).unwrap();
        let expected = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((t.mean - expected).abs() < 1e-15);
        assert!(t.y_centered[..2].iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn loads_two_cities() {
        let cities = epi("city_id,week,cases,population\nb,1,5,200000\nb,2,7,200000\na,2,3,100000\na,1,0,100000\n")
            .unwrap();
        assert_eq!(cities.len(), 2);
        assert_eq!(cities[0].city_id(), "a");
        assert_eq!(cities[0].cases(), &[0, 3]);
        assert_eq!(cities[1].dir(), &[2.5, 3.5]);
    }

    #[test]
    fn week_gap_is_reported() {
        let err = epi("city_id,week,cases,population\na,1,1,1000\na,2,1,1000\na,4,1,1000\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing week 3"), "{msg}");
        assert!(msg.contains("row 4"), "{msg}");
    }

    #[test]
    fn negative_cases_rejected() {
        let err = epi("city_id,week,cases,population\na,1,-1,1000\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("cases") && msg.contains("negative"), "{msg}");
    }

    #[test]
    fn missing_column_rejected() {
        let err = epi("city_id,week,cases\na,1,1\n").unwrap_err();
        assert!(err.to_string().contains("population"));
    }

    #[test]
    fn duplicate_epi_week_rejected() {
        let err = epi("city_id,week,cases,population\na,1,1,1000\na,1,2,1000\n").unwrap_err();
        assert!(err.to_string().contains("duplicate week 1"));
    }

    #[test]
    fn tweets_attach_and_stay_optional() {
        let cities = epi("city_id,week,cases,population\na,1,1,1000\na,2,1,1000\nb,1,1,1000\nb,2,2,1000\n").unwrap();
        let with = read_tweet_table(
            Path::new("tw.csv"),
            "city_id,week,tweet_count\na,1,4\na,2,9\n".as_bytes(),
            cities.clone(),
        )
        .unwrap();
        assert_eq!(with[0].tweets(), Some(&[4u64, 9][..]));
        assert_eq!(with[1].tweets(), None);

        let dup = read_tweet_table(
            Path::new("tw.csv"),
            "city_id,week,tweet_count\na,1,4\na,1,5\na,2,9\n".as_bytes(),
            cities.clone(),
        );
        assert!(dup.unwrap_err().to_string().contains("duplicate"));

        let out_of_range = read_tweet_table(
            Path::new("tw.csv"),
            "city_id,week,tweet_count\na,1,4\na,2,9\na,3,1\n".as_bytes(),
            cities,
        );
        assert!(out_of_range.unwrap_err().to_string().contains("outside"));
    }

    #[test]
    fn filter_examples() {
        let small = CitySeries::new("small", 99_000, vec![100]).unwrap();
        let low = CitySeries::new("low", 1_000_000, vec![249]).unwrap(); // peak 24.9
        let ok = CitySeries::new("ok", 1_000_000, vec![250]).unwrap();
        assert!((low.dir()[0] - 24.9).abs() < 1e-12);
        let kept = filter_cities(vec![small, low, ok], 100_000, IncidenceLevel::Medium);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].city_id(), "ok");
        assert!(filter_cities(vec![], 100_000, IncidenceLevel::Medium).is_empty());
    }

    #[test]
    fn dump_roundtrip_is_idempotent() {
        let text = "city_id,week,cases,population\nz,1,5,200000\nz,2,7,200000\na,1,0,100000\n";
        let cities = epi(text).unwrap();
        let cities = read_tweet_table(
            Path::new("tw.csv"),
            "city_id,week,tweet_count\nz,2,3\nz,1,1\n".as_bytes(),
            cities,
        )
        .unwrap();
        let mut first = Vec::new();
        dump_epi_table(&cities, &mut first).unwrap();
        let mut tw = Vec::new();
        dump_tweet_table(&cities, &mut tw).unwrap();
        let again = read_tweet_table(Path::new("tw.csv"), tw.as_slice(), epi(std::str::from_utf8(&first).unwrap()).unwrap())
            .unwrap();
        assert_eq!(again, cities);
        let mut second = Vec::new();
        dump_epi_table(&again, &mut second).unwrap();
        assert_eq!(first, second);
        assert_eq!(std::str::from_utf8(&tw).unwrap(), "city_id,week,tweet_count\nz,1,1\nz,2,3\n");
    }

    proptest! {
        #[test]
        fn dir_is_linear_in_cases(c in 0u64..1_000_000, p in 1u64..10_000_000) {
            let one = compute_dir(c, p).unwrap();
            let two = compute_dir(2 * c, p).unwrap();
            prop_assert!((two - 2.0 * one).abs() <= 1e-12 * two.abs().max(1.0));
        }

        #[test]
        fn level_is_monotone(a in 0.0f64..500.0, b in 0.0f64..500.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(incidence_level(lo).unwrap() <= incidence_level(hi).unwrap());
        }

        #[test]
        fn transform_inverts_and_centers(
            cases in proptest::collection::vec(0u64..50_000, 1..60),
            pop in 1_000u64..5_000_000,
            frac in 0.0f64..1.0,
        ) {
            let c = CitySeries::new("p", pop, cases).unwrap();
            let horizon = 1 + ((c.n_weeks() - 1) as f64 * frac) as u32;
            let t = transform(&c, horizon).unwrap();
            for (y, d) in t.y_raw.iter().zip(c.dir()) {
                let back = y.exp_m1();
                prop_assert!((back - d).abs() <= 1e-12 * d.max(1e-300) || (back == 0.0 && *d == 0.0));
            }
            let s: f64 = t.y_centered[..horizon as usize].iter().sum();
            prop_assert!(s.abs() < 1e-9 * horizon as f64);
        }
    }
}
