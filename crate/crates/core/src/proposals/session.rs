use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::AnnotationRecord;
use crate::error::{Error, Result};

use super::ProposalMode;

/// First line of a session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub annotator: String,
    pub mode: ProposalMode,
    pub repetition: u32,
    #[serde(default)]
    pub manifest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSession {
    pub annotator_id: String,
    pub proposal_mode: ProposalMode,
    pub repetition: u32,
    pub manifest: String,
    pub started: Option<f64>,
    pub ended: Option<f64>,
    pub records: Vec<AnnotationRecord>,
}

impl AnnotationSession {
    pub fn header(&self) -> SessionHeader {
        SessionHeader {
            annotator: self.annotator_id.clone(),
            mode: self.proposal_mode,
            repetition: self.repetition,
            manifest: self.manifest.clone(),
            started: self.started,
        }
    }

    fn image_set(&self) -> Result<BTreeMap<&str, usize>> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            if out.insert(r.image_id.as_str(), r.class_index).is_some() {
                return Err(Error::MismatchedImageSets(format!(
                    "image {} annotated twice in repetition {}",
                    r.image_id, self.repetition
                )));
            }
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    session: SessionHeader,
}

/// Writes a JSON-lines log: a `{"session": …}` header, then one record per
/// line.
pub fn write_session_log(session: &AnnotationSession, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let header = HeaderLine {
        session: session.header(),
    };
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::json(path, e))?;
    out.push(b'\n');
    for r in &session.records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a session log. `ended` is the latest record timestamp.
pub fn read_session_log(path: &Path) -> Result<AnnotationSession> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::InvalidConfig(format!("{}: empty session log", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: HeaderLine = serde_json::from_str(&first).map_err(|e| Error::json(path, e))?;
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<AnnotationRecord>(&line).map_err(|e| Error::json(path, e))?);
    }
    let h = header.session;
    let ended = records.iter().filter_map(|r| r.timestamp).reduce(f64::max);
    Ok(AnnotationSession {
        annotator_id: h.annotator,
        proposal_mode: h.mode,
        repetition: h.repetition,
        manifest: h.manifest,
        started: h.started,
        ended,
        records,
    })
}

/// Mean pairwise exact agreement over repetitions of the same image set.
pub fn consistency(sessions: &[AnnotationSession]) -> Result<f64> {
    if sessions.len() < 2 {
        return Err(Error::MismatchedImageSets("consistency needs at least two repetitions".into()));
    }
    let sets = sessions.iter().map(|s| s.image_set()).collect::<Result<Vec<_>>>()?;
    let ids: BTreeSet<&str> = sets[0].keys().copied().collect();
    if ids.is_empty() {
        return Err(Error::MismatchedImageSets("no records".into()));
    }
    for (s, set) in sessions.iter().zip(&sets).skip(1) {
        if set.len() != ids.len() || !set.keys().all(|k| ids.contains(k)) {
            return Err(Error::MismatchedImageSets(format!(
                "repetition {} covers a different image set",
                s.repetition
            )));
        }
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let agree = ids.iter().filter(|id| sets[i][*id] == sets[j][*id]).count();
            total += agree as f64 / ids.len() as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean annotation duration over all records that carry one.
pub fn mean_time_per_image(sessions: &[&AnnotationSession]) -> Option<f64> {
    let d: Vec<f64> = sessions
        .iter()
        .flat_map(|s| s.records.iter().filter_map(|r| r.duration))
        .collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Mean per-image time without proposals divided by the mean time in `mode`.
pub fn speed_up(sessions: &[AnnotationSession], mode: ProposalMode) -> Result<f64> {
    let time = |m: ProposalMode| {
        let of_mode: Vec<&AnnotationSession> = sessions.iter().filter(|s| s.proposal_mode == m).collect();
        mean_time_per_image(&of_mode).ok_or_else(|| Error::MissingMode(m.to_string()))
    };
    let baseline = time(ProposalMode::None)?;
    let tested = time(mode)?;
    if tested <= 0.0 {
        return Err(Error::InvalidConfig(format!("mean time in mode {mode} is not positive")));
    }
    Ok(baseline / tested)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorSummary {
    pub annotator: String,
    pub mode: ProposalMode,
    pub repetitions: usize,
    pub records: usize,
    /// `None` with fewer than two repetitions or mismatched image sets.
    pub consistency: Option<f64>,
    pub mean_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: ProposalMode,
    pub sessions: usize,
    pub records: usize,
    /// Mean over annotators with a defined consistency.
    pub consistency: Option<f64>,
    pub mean_time: Option<f64>,
    /// Relative to mode `none`; absent for `none` itself or without a
    /// `none` baseline.
    pub speed_up: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub annotators: Vec<AnnotatorSummary>,
    pub modes: Vec<ModeSummary>,
    pub total_records: usize,
}

/// Per-(annotator, mode) and per-mode aggregates over a set of sessions.
pub fn build_report(sessions: &[AnnotationSession]) -> ConsistencyReport {
    let mut groups: BTreeMap<(String, ProposalMode), Vec<&AnnotationSession>> = BTreeMap::new();
    for s in sessions {
        groups.entry((s.annotator_id.clone(), s.proposal_mode)).or_default().push(s);
    }
    let annotators: Vec<AnnotatorSummary> = groups
        .iter()
        .map(|((annotator, mode), ss)| {
            let owned: Vec<AnnotationSession> = ss.iter().map(|s| (*s).clone()).collect();
            AnnotatorSummary {
                annotator: annotator.clone(),
                mode: *mode,
                repetitions: ss.len(),
                records: ss.iter().map(|s| s.records.len()).sum(),
                consistency: consistency(&owned).ok(),
                mean_time: mean_time_per_image(ss),
            }
        })
        .collect();
    let modes_present: BTreeSet<ProposalMode> = sessions.iter().map(|s| s.proposal_mode).collect();
    let modes = modes_present
        .into_iter()
        .map(|mode| {
            let of_mode: Vec<&AnnotationSession> = sessions.iter().filter(|s| s.proposal_mode == mode).collect();
            let cons: Vec<f64> = annotators
                .iter()
                .filter(|a| a.mode == mode)
                .filter_map(|a| a.consistency)
                .collect();
            ModeSummary {
                mode,
                sessions: of_mode.len(),
                records: of_mode.iter().map(|s| s.records.len()).sum(),
                consistency: (!cons.is_empty()).then(|| cons.iter().sum::<f64>() / cons.len() as f64),
                mean_time: mean_time_per_image(&of_mode),
                speed_up: if mode == ProposalMode::None {
                    None
                } else {
                    speed_up(sessions, mode).ok()
                },
            }
        })
        .collect();
    ConsistencyReport {
        annotators,
        modes,
        total_records: sessions.iter().map(|s| s.records.len()).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(rep: u32, mode: ProposalMode, classes: &[usize], time: f64) -> AnnotationSession {
        AnnotationSession {
            annotator_id: "ann".into(),
            proposal_mode: mode,
            repetition: rep,
            manifest: "m".into(),
            started: Some(0.0),
            ended: None,
            records: classes
                .iter()
                .enumerate()
                .map(|(i, &c)| AnnotationRecord {
                    duration: Some(time),
                    timestamp: Some(time * (i + 1) as f64),
                    repetition: rep,
                    ..AnnotationRecord::new(format!("img{i}"), "ann", c)
                })
                .collect(),
        }
    }

    #[test]
    fn consistency_examples() {
        let a = session(1, ProposalMode::None, &[0; 10], 1.0);
        assert_eq!(consistency(&[a.clone(), a.clone()]).unwrap(), 1.0);

        let mut b = a.clone();
        b.records[3].class_index = 1;
        assert!((consistency(&[a.clone(), b]).unwrap() - 0.9).abs() < 1e-12);

        let c = session(3, ProposalMode::None, &[1; 10], 1.0);
        let v = consistency(&[a.clone(), a.clone(), c.clone()]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        // symmetric in repetition order
        assert_eq!(consistency(&[c, a.clone(), a.clone()]).unwrap(), v);
    }

    #[test]
    fn consistency_rejects_mismatched_sets() {
        let a = session(1, ProposalMode::None, &[0; 10], 1.0);
        let b = session(2, ProposalMode::None, &[0; 9], 1.0);
        assert!(matches!(consistency(&[a.clone(), b]), Err(Error::MismatchedImageSets(_))));
        assert!(consistency(&[a]).is_err());
    }

    #[test]
    fn speed_up_examples() {
        let none = session(1, ProposalMode::None, &[0; 4], 12.0);
        let dc3 = session(1, ProposalMode::Dc3, &[0; 4], 5.0);
        assert!((speed_up(&[none.clone(), dc3], ProposalMode::Dc3).unwrap() - 2.4).abs() < 1e-12);
        let same = session(1, ProposalMode::Ssl, &[0; 4], 12.0);
        assert_eq!(speed_up(&[none.clone(), same], ProposalMode::Ssl).unwrap(), 1.0);
        let slow = session(1, ProposalMode::Dc3, &[0; 4], 20.0);
        assert!(speed_up(&[none.clone(), slow], ProposalMode::Dc3).unwrap() < 1.0);
        assert!(matches!(speed_up(&[none], ProposalMode::Dc3), Err(Error::MissingMode(_))));
    }

    #[test]
    fn log_round_trip() {
        let s = session(2, ProposalMode::Dc3, &[0, 1, 1], 2.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        write_session_log(&s, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("{\"session\":"));
        let back = read_session_log(&path).unwrap();
        assert_eq!(back.records, s.records);
        assert_eq!(back.ended, Some(7.5));
        assert_eq!(back.proposal_mode, ProposalMode::Dc3);
    }

    #[test]
    fn report_aggregates() {
        let sessions = vec![
            session(1, ProposalMode::None, &[0, 1, 0], 10.0),
            session(2, ProposalMode::None, &[0, 0, 0], 10.0),
            session(1, ProposalMode::Dc3, &[0, 1, 0], 4.0),
            session(2, ProposalMode::Dc3, &[0, 1, 0], 6.0),
        ];
        let r = build_report(&sessions);
        assert_eq!(r.total_records, 12);
        let none = r.modes.iter().find(|m| m.mode == ProposalMode::None).unwrap();
        assert!((none.consistency.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(none.speed_up, None);
        let dc3 = r.modes.iter().find(|m| m.mode == ProposalMode::Dc3).unwrap();
        assert_eq!(dc3.consistency, Some(1.0));
        assert_eq!(dc3.speed_up, Some(2.0));
    }
}
