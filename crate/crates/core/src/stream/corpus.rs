//! Schema-style corpus files.
//!
//! ```json
//! {"services": [{"name": "restaurants_1",
//!                "slots": [{"name": "date", "description": "date of the reservation"}],
//!                "dialogs": [{"text": "book a table on monday .", "values": {"date": "monday"}}]}]}
//! ```
//! A dialog may carry `"services": [...]`; dialogs naming more than one
//! service are skipped on ingestion.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dialog, Service, StreamError, TaskStream};
use crate::codec::{Slot, ValueMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusFile {
    pub services: Vec<CorpusService>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusService {
    pub name: String,
    pub slots: Vec<CorpusSlot>,
    pub dialogs: Vec<CorpusDialog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSlot {
    pub name: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusDialog {
    pub text: String,
    #[serde(default)]
    pub values: ValueMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub services: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub skipped_multi_service: usize,
}

impl CorpusFile {
    pub fn from_stream(stream: &TaskStream) -> Self {
        let services = stream
            .services
            .iter()
            .map(|s| CorpusService {
                name: s.name.clone(),
                slots: s
                    .slots
                    .iter()
                    .map(|sl| CorpusSlot { name: sl.name.clone(), description: sl.description.clone() })
                    .collect(),
                dialogs: s
                    .dialogs
                    .iter()
                    .map(|d| CorpusDialog { text: d.text.clone(), values: d.values.clone(), services: None })
                    .collect(),
            })
            .collect();
        Self { services }
    }

    pub fn into_stream(self, split_seed: u64) -> Result<(TaskStream, IngestReport), StreamError> {
        let mut report = IngestReport::default();
        let mut services = Vec::with_capacity(self.services.len());
        for s in self.services {
            let slots = s.slots.into_iter().map(|sl| Slot::new(sl.name, sl.description, s.name.clone())).collect();
            let mut dialogs = Vec::with_capacity(s.dialogs.len());
            for d in s.dialogs {
                if d.services.as_ref().is_some_and(|v| v.len() > 1) {
                    report.skipped_multi_service += 1;
                    continue;
                }
                dialogs.push(Dialog { text: d.text, values: d.values });
            }
            services.push(Service { id: s.name.clone(), name: s.name, slots, dialogs });
        }
        Ok((TaskStream::new(services, split_seed)?, report))
    }
}

pub fn ingest_schema_corpus(path: &Path, split_seed: u64) -> Result<(TaskStream, IngestReport), StreamError> {
    let raw = fs::read_to_string(path)?;
    let file: CorpusFile =
        serde_json::from_str(&raw).map_err(|source| StreamError::Parse { path: path.display().to_string(), source })?;
    file.into_stream(split_seed)
}

pub fn export_corpus(stream: &TaskStream, path: &Path) -> Result<(), StreamError> {
    fs::write(path, serde_json::to_string_pretty(&CorpusFile::from_stream(stream))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{generate_stream, GeneratorConfig};

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("c.json");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            r#"{"services": [{"name": "bank", "slots": [{"name": "amount", "description": "amount of money"}],
                "dialogs": [{"text": "send fifty dollars", "values": {"amount": "fifty"}},
                            {"text": "mixed", "services": ["bank", "hotel"]}]}]}"#,
        );
        let (s, report) = ingest_schema_corpus(&p, 0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.services[0].dialogs.len(), 1);
        assert_eq!(report.skipped_multi_service, 1);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            r#"{"services": [{"name": "x", "slots": [{"name": "a", "description": "d"}, {"name": "a", "description": "e"}], "dialogs": []}]}"#,
        );
        assert!(matches!(ingest_schema_corpus(&p, 0), Err(StreamError::Invalid { .. })));
        let p = write(&dir, "{\"services\": [{\"name\": \"x\",\n \"slots\": 3}]}");
        let err = ingest_schema_corpus(&p, 0).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn export_then_ingest_round_trips() {
        let cfg = GeneratorConfig { n_services: 4, min_samples: 40, max_samples: 60, seed: 2, ..Default::default() };
        let s = generate_stream(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.json");
        export_corpus(&s, &p).unwrap();
        let (back, report) = ingest_schema_corpus(&p, s.split_seed).unwrap();
        assert_eq!(report.skipped_multi_service, 0);
        assert_eq!(back, s);
    }
}
