//! Samples, datasets, and their columnar text format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Knowledge category of a sample relative to a pretrained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KnowledgeTag {
    HighlyKnown,
    MaybeKnown,
    WeaklyKnown,
    Unknown,
}

impl KnowledgeTag {
    pub fn as_str(self) -> &'static str {
        match self {
            KnowledgeTag::HighlyKnown => "HighlyKnown",
            KnowledgeTag::MaybeKnown => "MaybeKnown",
            KnowledgeTag::WeaklyKnown => "WeaklyKnown",
            KnowledgeTag::Unknown => "Unknown",
        }
    }
}

impl fmt::Display for KnowledgeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KnowledgeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HighlyKnown" => Ok(KnowledgeTag::HighlyKnown),
            "MaybeKnown" => Ok(KnowledgeTag::MaybeKnown),
            "WeaklyKnown" => Ok(KnowledgeTag::WeaklyKnown),
            "Unknown" => Ok(KnowledgeTag::Unknown),
            other => Err(Error::invalid(format!("unknown knowledge tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
    pub oracle_tag: Option<KnowledgeTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub dim: usize,
}

impl Dataset {
    pub fn empty(classes: usize, dim: usize) -> Self {
        Dataset {
            samples: Vec::new(),
            classes,
            dim,
        }
    }

    /// Builds a dataset and checks every sample against `classes` and `dim`.
    pub fn new(samples: Vec<Sample>, classes: usize, dim: usize) -> Result<Self> {
        let ds = Dataset { samples, classes, dim };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("a dataset needs at least 2 classes"));
        }
        let mut ids = std::collections::HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            crate::error::check_len("sample features", self.dim, s.features.len())?;
            if s.label >= self.classes {
                return Err(Error::invalid(format!(
                    "sample {} has label {} but only {} classes",
                    s.id, s.label, self.classes
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("sample {} has non-finite features", s.id)));
            }
            if !ids.insert(s.id) {
                return Err(Error::invalid(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sort_by_id(&mut self) {
        self.samples.sort_by_key(|s| s.id);
    }

    pub fn count_tag(&self, tag: KnowledgeTag) -> usize {
        self.samples.iter().filter(|s| s.oracle_tag == Some(tag)).count()
    }

    /// Writes `id,label,tag,f0..f{d-1}` rows ordered by id.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "label".into(), "tag".into()];
        header.extend((0..self.dim).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        let mut order: Vec<&Sample> = self.samples.iter().collect();
        order.sort_by_key(|s| s.id);
        for s in order {
            let mut row = Vec::with_capacity(3 + self.dim);
            row.push(s.id.to_string());
            row.push(s.label.to_string());
            row.push(s.oracle_tag.map(|t| t.to_string()).unwrap_or_default());
            row.extend(s.features.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    /// Reads the format written by [`Dataset::write_csv`].
    pub fn read_csv(path: impl AsRef<Path>, classes: usize) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv_from(file, classes)
    }

    pub fn read_csv_from<R: std::io::Read>(input: R, classes: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "id" || &header[1] != "label" || &header[2] != "tag" {
            return Err(Error::invalid("dataset header must start with id,label,tag"));
        }
        let dim = header.len() - 3;
        for (j, name) in header.iter().skip(3).enumerate() {
            if name != format!("f{j}") {
                return Err(Error::invalid(format!("unexpected column {name:?}")));
            }
        }
        let parse_err = |what: &str, v: &str| Error::invalid(format!("cannot parse {what} {v:?}"));
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let id = rec[0].parse().map_err(|_| parse_err("id", &rec[0]))?;
            let label = rec[1].parse().map_err(|_| parse_err("label", &rec[1]))?;
            let oracle_tag = match &rec[2] {
                "" => None,
                t => Some(t.parse()?),
            };
            let features = rec
                .iter()
                .skip(3)
                .map(|v| v.parse::<f64>().map_err(|_| parse_err("feature", v)))
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                id,
                features,
                label,
                oracle_tag,
            });
        }
        Dataset::new(samples, classes, dim)
    }
}
