//! CI parameter catalogs and factorial vignette generation.
//!
//! A catalog holds the value lists for one dataset (senders, recipients,
//! attributes, transmission principles) and a scenario template. Every
//! combination of values yields one [`Vignette`]; when `include_null_tp` is
//! set, each (sender, recipient, attribute) triple gets one extra vignette
//! whose scenario omits the condition clause.

use std::cmp::Ordering;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const SENDER: &str = "{sender}";
pub const RECIPIENT: &str = "{recipient}";
pub const ATTRIBUTE: &str = "{attribute}";
pub const TRANSMISSION_PRINCIPLE: &str = "{transmission_principle}";
pub const SUBJECT: &str = "{subject}";

const FLOW_PLACEHOLDERS: [&str; 4] = [SENDER, RECIPIENT, ATTRIBUTE, TRANSMISSION_PRINCIPLE];

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("failed to read catalog {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("catalog is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("catalog is missing field `{0}`")]
    MissingField(&'static str),
    #[error("catalog list `{0}` is empty")]
    EmptyList(&'static str),
    #[error("catalog list `{field}` contains {value:?} more than once")]
    DuplicateValue { field: &'static str, value: String },
    #[error("catalog template is invalid: {0}")]
    BadTemplate(String),
    #[error("value {value:?} in `{field}` has an unresolved placeholder")]
    UnresolvedPlaceholder { field: &'static str, value: String },
    #[error("dataset_id {0:?} must be non-empty and free of ':' and whitespace")]
    BadDatasetId(String),
}

#[derive(Debug, thiserror::Error)]
pub enum VignetteIoError {
    #[error("vignette CSV I/O failed: {0}")]
    Io(#[from] io::Error),
    #[error("vignette CSV is malformed: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: bad vignette id {id:?}")]
    BadId { row: usize, id: String },
}

/// On-disk catalog schema. Every field is optional here so missing ones can
/// be reported by name.
#[derive(Debug, Deserialize)]
struct CatalogFile {
    dataset_id: Option<String>,
    subject_phrase: Option<String>,
    template: Option<String>,
    senders: Option<Vec<String>>,
    recipients: Option<Vec<String>>,
    attributes: Option<Vec<String>>,
    transmission_principles: Option<Vec<String>>,
    include_null_tp: Option<bool>,
}

/// A validated parameter catalog. Values are stored with `{subject}` already
/// substituted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContextCatalog {
    pub dataset_id: String,
    pub subject_phrase: String,
    pub template: String,
    pub senders: Vec<String>,
    pub recipients: Vec<String>,
    pub attributes: Vec<String>,
    pub transmission_principles: Vec<String>,
    pub include_null_tp: bool,
    #[serde(skip)]
    null_tp_template: String,
}

impl ContextCatalog {
    /// Validate raw parts. Values and template may still contain `{subject}`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dataset_id: impl Into<String>,
        subject_phrase: impl Into<String>,
        template: impl Into<String>,
        senders: Vec<String>,
        recipients: Vec<String>,
        attributes: Vec<String>,
        transmission_principles: Vec<String>,
        include_null_tp: bool,
    ) -> Result<Self, CatalogError> {
        let dataset_id = dataset_id.into();
        let subject_phrase = subject_phrase.into();
        if dataset_id.is_empty()
            || dataset_id.contains(':')
            || dataset_id.chars().any(char::is_whitespace)
        {
            return Err(CatalogError::BadDatasetId(dataset_id));
        }
        let subst = |s: &str| s.replace(SUBJECT, &subject_phrase);

        let template = subst(&template.into());
        validate_template(&template)?;

        let mut lists = [
            ("senders", senders),
            ("recipients", recipients),
            ("attributes", attributes),
            ("transmission_principles", transmission_principles),
        ];
        for (field, values) in lists.iter_mut() {
            if values.is_empty() {
                return Err(CatalogError::EmptyList(field));
            }
            for v in values.iter_mut() {
                *v = subst(v);
                if v.contains('{') || v.contains('}') {
                    return Err(CatalogError::UnresolvedPlaceholder {
                        field,
                        value: v.clone(),
                    });
                }
            }
            for (i, v) in values.iter().enumerate() {
                if values[..i].contains(v) {
                    return Err(CatalogError::DuplicateValue {
                        field,
                        value: v.clone(),
                    });
                }
            }
        }
        let [(_, senders), (_, recipients), (_, attributes), (_, transmission_principles)] = lists;
        let null_tp_template = strip_condition_clause(&template);

        Ok(Self {
            dataset_id,
            subject_phrase,
            template,
            senders,
            recipients,
            attributes,
            transmission_principles,
            include_null_tp,
            null_tp_template,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        let raw: CatalogFile = serde_json::from_str(text)?;
        Self::new(
            raw.dataset_id.ok_or(CatalogError::MissingField("dataset_id"))?,
            raw.subject_phrase
                .ok_or(CatalogError::MissingField("subject_phrase"))?,
            raw.template.ok_or(CatalogError::MissingField("template"))?,
            raw.senders.ok_or(CatalogError::MissingField("senders"))?,
            raw.recipients.ok_or(CatalogError::MissingField("recipients"))?,
            raw.attributes.ok_or(CatalogError::MissingField("attributes"))?,
            raw.transmission_principles
                .ok_or(CatalogError::MissingField("transmission_principles"))?,
            raw.include_null_tp
                .ok_or(CatalogError::MissingField("include_null_tp"))?,
        )
    }

    /// Number of transmission-principle slots per (sender, recipient, attribute).
    pub fn tp_slots(&self) -> usize {
        self.transmission_principles.len() + usize::from(self.include_null_tp)
    }

    pub fn vignette_count(&self) -> usize {
        self.senders.len() * self.recipients.len() * self.attributes.len() * self.tp_slots()
    }

    /// TP labels in slot order; the null slot (if any) is last and `None`.
    pub fn tp_slot_values(&self) -> Vec<Option<&str>> {
        let mut out: Vec<Option<&str>> = self
            .transmission_principles
            .iter()
            .map(|s| Some(s.as_str()))
            .collect();
        if self.include_null_tp {
            out.push(None);
        }
        out
    }

    pub fn render(&self, index: FlowIndex) -> Option<Vignette> {
        let sender = self.senders.get(index.sender)?;
        let recipient = self.recipients.get(index.recipient)?;
        let attribute = self.attributes.get(index.attribute)?;
        let tp = match index.tp {
            Some(t) => Some(self.transmission_principles.get(t)?),
            None if self.include_null_tp => None,
            None => return None,
        };
        let base = if tp.is_some() {
            &self.template
        } else {
            &self.null_tp_template
        };
        let scenario = base
            .replace(SENDER, sender)
            .replace(RECIPIENT, recipient)
            .replace(ATTRIBUTE, attribute)
            .replace(TRANSMISSION_PRINCIPLE, tp.map(String::as_str).unwrap_or(""));
        Some(Vignette {
            id: index.vignette_id(&self.dataset_id),
            dataset: self.dataset_id.clone(),
            index,
            sender: sender.clone(),
            recipient: recipient.clone(),
            attribute: attribute.clone(),
            transmission_principle: tp.cloned(),
            scenario,
        })
    }
}

fn validate_template(template: &str) -> Result<(), CatalogError> {
    for p in FLOW_PLACEHOLDERS {
        match template.matches(p).count() {
            1 => {}
            0 => return Err(CatalogError::BadTemplate(format!("missing {p}"))),
            n => return Err(CatalogError::BadTemplate(format!("{p} appears {n} times"))),
        }
    }
    let mut rest = template.to_string();
    for p in FLOW_PLACEHOLDERS {
        rest = rest.replace(p, "");
    }
    if rest.contains('{') || rest.contains('}') {
        return Err(CatalogError::BadTemplate(
            "unknown placeholder or stray brace".into(),
        ));
    }
    Ok(())
}

/// Drop `{transmission_principle}` together with the literal text that leads
/// into it (back to the end of the previous placeholder), so
/// `"... sent to {recipient} under the following condition: {transmission_principle}"`
/// becomes `"... sent to {recipient}"`.
fn strip_condition_clause(template: &str) -> String {
    let tp_start = template
        .find(TRANSMISSION_PRINCIPLE)
        .expect("validated template has a TP placeholder");
    let clause_start = [SENDER, RECIPIENT, ATTRIBUTE]
        .iter()
        .filter_map(|p| template.find(p).map(|i| i + p.len()))
        .filter(|&end| end <= tp_start)
        .max()
        .unwrap_or(0);
    let mut out = String::with_capacity(template.len());
    out.push_str(&template[..clause_start]);
    out.push_str(&template[tp_start + TRANSMISSION_PRINCIPLE.len()..]);
    out
}

pub fn load_catalog(path: &Path) -> Result<ContextCatalog, CatalogError> {
    let text = fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ContextCatalog::from_json(&text)
}

/// Position of one flow in the factorial product. `tp == None` is the null
/// transmission principle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowIndex {
    pub sender: usize,
    pub recipient: usize,
    pub attribute: usize,
    pub tp: Option<usize>,
}

impl FlowIndex {
    /// `dataset:s<i>:r<j>:a<k>:t<l>`, with `tnull` for the null TP.
    pub fn vignette_id(&self, dataset: &str) -> String {
        let tp = match self.tp {
            Some(t) => t.to_string(),
            None => "null".to_string(),
        };
        format!(
            "{dataset}:s{}:r{}:a{}:t{tp}",
            self.sender, self.recipient, self.attribute
        )
    }

    /// Inverse of [`FlowIndex::vignette_id`].
    pub fn parse_id(id: &str) -> Option<(&str, FlowIndex)> {
        let mut parts = id.split(':');
        let dataset = parts.next().filter(|d| !d.is_empty())?;
        let mut field = |prefix: char| -> Option<&str> { parts.next()?.strip_prefix(prefix) };
        let sender = field('s')?.parse().ok()?;
        let recipient = field('r')?.parse().ok()?;
        let attribute = field('a')?.parse().ok()?;
        let tp = match field('t')? {
            "null" => None,
            t => Some(t.parse().ok()?),
        };
        if parts.next().is_some() {
            return None;
        }
        Some((
            dataset,
            FlowIndex {
                sender,
                recipient,
                attribute,
                tp,
            },
        ))
    }

    fn order_key(&self) -> (usize, usize, usize, usize) {
        // null TP sorts after every explicit TP, matching generation order
        (
            self.sender,
            self.recipient,
            self.attribute,
            self.tp.unwrap_or(usize::MAX),
        )
    }
}

/// Order vignette ids by dataset and then by factorial index (numeric, not
/// lexicographic), falling back to plain string order for foreign ids.
pub fn compare_vignette_ids(a: &str, b: &str) -> Ordering {
    match (FlowIndex::parse_id(a), FlowIndex::parse_id(b)) {
        (Some((da, ia)), Some((db, ib))) => da
            .cmp(db)
            .then_with(|| ia.order_key().cmp(&ib.order_key())),
        _ => a.cmp(b),
    }
}

/// One concrete information flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vignette {
    pub id: String,
    pub dataset: String,
    pub index: FlowIndex,
    pub sender: String,
    pub recipient: String,
    pub attribute: String,
    pub transmission_principle: Option<String>,
    pub scenario: String,
}

/// Full factorial product, sender-major, then recipient, attribute and TP.
pub fn generate_vignettes(catalog: &ContextCatalog) -> Vec<Vignette> {
    let mut out = Vec::with_capacity(catalog.vignette_count());
    let tps: Vec<Option<usize>> = (0..catalog.transmission_principles.len())
        .map(Some)
        .chain(catalog.include_null_tp.then_some(None))
        .collect();
    for sender in 0..catalog.senders.len() {
        for recipient in 0..catalog.recipients.len() {
            for attribute in 0..catalog.attributes.len() {
                for &tp in &tps {
                    let index = FlowIndex {
                        sender,
                        recipient,
                        attribute,
                        tp,
                    };
                    out.push(catalog.render(index).expect("index within catalog bounds"));
                }
            }
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct VignetteRow {
    id: String,
    dataset: String,
    sender: String,
    recipient: String,
    attribute: String,
    transmission_principle: String,
    scenario: String,
}

pub fn write_vignettes<W: io::Write>(vignettes: &[Vignette], out: W) -> Result<(), VignetteIoError> {
    let mut w = csv::Writer::from_writer(out);
    for v in vignettes {
        w.serialize(VignetteRow {
            id: v.id.clone(),
            dataset: v.dataset.clone(),
            sender: v.sender.clone(),
            recipient: v.recipient.clone(),
            attribute: v.attribute.clone(),
            transmission_principle: v.transmission_principle.clone().unwrap_or_default(),
            scenario: v.scenario.clone(),
        })?;
    }
    if vignettes.is_empty() {
        w.write_record([
            "id",
            "dataset",
            "sender",
            "recipient",
            "attribute",
            "transmission_principle",
            "scenario",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_vignettes(vignettes: &[Vignette], path: &Path) -> Result<(), VignetteIoError> {
    let file = io::BufWriter::new(fs::File::create(path)?);
    write_vignettes(vignettes, file)
}

pub fn read_vignettes<R: io::Read>(input: R) -> Result<Vec<Vignette>, VignetteIoError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (row, rec) in r.deserialize::<VignetteRow>().enumerate() {
        let rec = rec?;
        let (_, index) = FlowIndex::parse_id(&rec.id).ok_or_else(|| VignetteIoError::BadId {
            row: row + 1,
            id: rec.id.clone(),
        })?;
        let transmission_principle = index.tp.map(|_| rec.transmission_principle);
        out.push(Vignette {
            id: rec.id,
            dataset: rec.dataset,
            index,
            sender: rec.sender,
            recipient: rec.recipient,
            attribute: rec.attribute,
            transmission_principle,
            scenario: rec.scenario,
        });
    }
    Ok(out)
}

pub fn import_vignettes(path: &Path) -> Result<Vec<Vignette>, VignetteIoError> {
    read_vignettes(io::BufReader::new(fs::File::open(path)?))
}
