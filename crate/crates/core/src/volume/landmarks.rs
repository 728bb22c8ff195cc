use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Visible,
    Uncertain,
    Absent,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Visible => "visible",
            Status::Uncertain => "uncertain",
            Status::Absent => "absent",
        }
    }
}

impl FromStr for Status {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visible" => Ok(Status::Visible),
            "uncertain" => Ok(Status::Uncertain),
            "absent" => Ok(Status::Absent),
            other => Err(Error::format("landmark status", other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub name: String,
    /// World millimetres. Meaningless when `status` is `Absent`.
    pub position: [f64; 3],
    pub certainty: f64,
    pub status: Status,
}

impl Landmark {
    pub fn visible(name: impl Into<String>, position: [f64; 3]) -> Self {
        Self {
            name: name.into(),
            position,
            certainty: 1.0,
            status: Status::Visible,
        }
    }

    pub fn absent(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            position: [0.0; 3],
            certainty: 0.0,
            status: Status::Absent,
        }
    }

    pub fn is_visible(&self) -> bool {
        self.status == Status::Visible
    }
}

/// Named landmarks with unique names, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LandmarkSet {
    entries: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<Landmark>) -> Result<Self> {
        let mut set = Self::new();
        for e in entries {
            set.push(e)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, lm: Landmark) -> Result<()> {
        if self.get(&lm.name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate landmark name {:?}", lm.name)));
        }
        if lm.name.is_empty() || lm.name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("invalid landmark name {:?}", lm.name)));
        }
        if !(0.0..=1.0).contains(&lm.certainty) {
            return Err(Error::InvalidArgument(format!(
                "certainty {} of {:?} outside [0, 1]",
                lm.certainty, lm.name
            )));
        }
        self.entries.push(lm);
        Ok(())
    }

    /// Insert or overwrite by name.
    pub fn upsert(&mut self, lm: Landmark) {
        match self.entries.iter_mut().find(|e| e.name == lm.name) {
            Some(e) => *e = lm,
            None => self.entries.push(lm),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Landmark> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Landmark> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[Landmark] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Landmark] {
        &mut self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &Landmark> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn visible(&self) -> impl Iterator<Item = &Landmark> {
        self.entries.iter().filter(|e| e.is_visible())
    }

    pub fn position_map(&self) -> HashMap<&str, [f64; 3]> {
        self.visible().map(|e| (e.name.as_str(), e.position)).collect()
    }

    pub fn to_text(&self, header: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(h) = header {
            for line in h.lines() {
                let _ = writeln!(out, "# {line}");
            }
        }
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {}",
                e.name,
                e.position[0],
                e.position[1],
                e.position[2],
                e.certainty,
                e.status.as_str()
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut set = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(Error::format(
                    "landmark file",
                    format!("line {}: expected 6 fields, got {}", lineno + 1, f.len()),
                ));
            }
            let num = |s: &str| {
                s.parse::<f64>().map_err(|_| {
                    Error::format("landmark file", format!("line {}: bad number {s:?}", lineno + 1))
                })
            };
            let lm = Landmark {
                name: f[0].to_string(),
                position: [num(f[1])?, num(f[2])?, num(f[3])?],
                certainty: num(f[4])?,
                status: f[5].parse()?,
            };
            set.push(lm).map_err(|e| {
                Error::format("landmark file", format!("line {}: {e}", lineno + 1))
            })?;
        }
        Ok(set)
    }
}

impl<'a> IntoIterator for &'a LandmarkSet {
    type Item = &'a Landmark;
    type IntoIter = std::slice::Iter<'a, Landmark>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

pub fn save_landmarks(set: &LandmarkSet, path: impl AsRef<Path>, header: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, set.to_text(header)).map_err(|e| Error::io(path, e))
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LandmarkSet::parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print_round_trip() {
        let text = "# frame: atlas\nnose 1.5 -2 3 1 visible\n\neye_l 0.1 0.2 0.3 0.25 uncertain # trailing\ngone 0 0 0 0 absent\n";
        let set = LandmarkSet::parse(text).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.get("eye_l").unwrap().status, Status::Uncertain);
        assert_eq!(LandmarkSet::parse(&set.to_text(Some("frame: atlas"))).unwrap(), set);
        assert!(set.to_text(Some("frame: atlas")).starts_with("# frame: atlas\n"));
    }

    #[test]
    fn rejects_duplicates_and_bad_lines() {
        assert!(LandmarkSet::parse("a 0 0 0 1 visible\na 1 1 1 1 visible\n").is_err());
        assert!(LandmarkSet::parse("a 0 0 0 1\n").is_err());
        assert!(LandmarkSet::parse("a 0 0 x 1 visible\n").is_err());
        assert!(LandmarkSet::parse("a 0 0 0 1 hidden\n").is_err());
        assert!(LandmarkSet::parse("a 0 0 0 1.5 visible\n").is_err());
    }
}
