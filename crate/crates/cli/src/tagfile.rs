//! Binary timetag files.
//!
//! Little-endian. A 16-byte header (`MCQT`, version u16, channel id u16 =
//! fiber core id, reserved u64 = 0) is followed by 16-byte records:
//! `time_ps` u64, channel u8, flags u8, 6 zero bytes. Channel 255 records
//! are markers: flags 0 / 1 open an HV / DA acquisition at `time_ps`, flags
//! 0x7F closes the last one.

use std::fs;
use std::path::{Path, PathBuf};

use mcfqkd_core::runner::MeasurementSchedule;
use mcfqkd_core::sim::{channel, Basis, TimeTag};

pub const MAGIC: &[u8; 4] = b"MCQT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 16;
pub const MARKER_END: u8 = 0x7F;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed timetag file at byte {offset}: {reason}")]
pub struct FormatError {
    pub offset: u64,
    pub reason: String,
}

#[derive(Debug, thiserror::Error)]
pub enum TagFileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    Start(Basis),
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    Tag(TimeTag),
    Marker { time: u64, marker: Marker },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagFile {
    pub core_id: u16,
    pub records: Vec<Record>,
}

/// One acquisition recovered from the markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileSegment {
    pub basis: Basis,
    pub start_ps: u64,
    pub end_ps: u64,
}

impl TagFile {
    /// Interleave `tags` (sorted) with the schedule markers of one party.
    pub fn from_stream(
        core_id: u16,
        tags: &[TimeTag],
        schedule: &MeasurementSchedule,
        alice: bool,
        keep_flags: bool,
    ) -> Self {
        let ps = |s: f64| (s * 1e12).round() as u64;
        let mut markers: Vec<(u64, Marker)> = schedule
            .segments
            .iter()
            .map(|s| (ps(s.start_s), Marker::Start(if alice { s.basis_a } else { s.basis_b })))
            .collect();
        markers.push((ps(schedule.total_duration_s()), Marker::End));
        let mut records = Vec::with_capacity(tags.len() + markers.len());
        let mut m = markers.into_iter().peekable();
        for t in tags {
            while let Some(&(time, marker)) = m.peek() {
                if time > t.time {
                    break;
                }
                records.push(Record::Marker { time, marker });
                m.next();
            }
            let flags = if keep_flags { t.flags } else { 0 };
            records.push(Record::Tag(TimeTag { flags, ..*t }));
        }
        records.extend(m.map(|(time, marker)| Record::Marker { time, marker }));
        Self { core_id, records }
    }

    pub fn tags(&self) -> Vec<TimeTag> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Tag(t) => Some(*t),
                Record::Marker { .. } => None,
            })
            .collect()
    }

    /// End marker time, if present.
    pub fn end_ps(&self) -> Option<u64> {
        self.records.iter().rev().find_map(|r| match r {
            Record::Marker { time, marker: Marker::End } => Some(*time),
            _ => None,
        })
    }

    /// Acquisitions delimited by consecutive markers. Without an end marker
    /// the last acquisition runs to one past the last record.
    pub fn segments(&self) -> Vec<FileSegment> {
        let last = self
            .records
            .iter()
            .map(|r| match r {
                Record::Tag(t) => t.time,
                Record::Marker { time, .. } => *time,
            })
            .max()
            .map_or(0, |t| t + 1);
        let end = self.end_ps().unwrap_or(last);
        let starts: Vec<(u64, Basis)> = self
            .records
            .iter()
            .filter_map(|r| match r {
                Record::Marker {
                    time,
                    marker: Marker::Start(b),
                } => Some((*time, *b)),
                _ => None,
            })
            .collect();
        starts
            .iter()
            .enumerate()
            .map(|(i, &(start, basis))| FileSegment {
                basis,
                start_ps: start,
                end_ps: starts.get(i + 1).map_or(end, |s| s.0),
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * self.records.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.core_id.to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes());
        for r in &self.records {
            let (time, ch, flags) = match *r {
                Record::Tag(t) => (t.time, t.channel, t.flags),
                Record::Marker { time, marker } => {
                    let code = match marker {
                        Marker::Start(b) => b.code(),
                        Marker::End => MARKER_END,
                    };
                    (time, channel::MARKER, code)
                }
            };
            out.extend_from_slice(&time.to_le_bytes());
            out.push(ch);
            out.push(flags);
            out.extend_from_slice(&[0; 6]);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let err = |offset: usize, reason: &str| FormatError {
            offset: offset as u64,
            reason: reason.to_string(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(err(bytes.len(), "truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(err(0, "bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(err(4, &format!("unsupported version {version}")));
        }
        let core_id = u16::from_le_bytes([bytes[6], bytes[7]]);
        if bytes[8..16].iter().any(|&b| b != 0) {
            return Err(err(8, "reserved header bytes are not zero"));
        }
        let body = &bytes[HEADER_LEN..];
        if !body.len().is_multiple_of(RECORD_LEN) {
            let at = HEADER_LEN + body.len() / RECORD_LEN * RECORD_LEN;
            return Err(err(at, "truncated record"));
        }
        let mut records = Vec::with_capacity(body.len() / RECORD_LEN);
        for (k, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
            let at = HEADER_LEN + k * RECORD_LEN;
            let time = u64::from_le_bytes(rec[0..8].try_into().expect("8 bytes"));
            let (ch, flags) = (rec[8], rec[9]);
            if rec[10..].iter().any(|&b| b != 0) {
                return Err(err(at + 10, "reserved record bytes are not zero"));
            }
            records.push(if ch == channel::MARKER {
                let marker = match flags {
                    MARKER_END => Marker::End,
                    code => Marker::Start(Basis::from_code(code).ok_or_else(|| err(at + 9, "unknown marker"))?),
                };
                Record::Marker { time, marker }
            } else {
                if ch > channel::BOB_R {
                    return Err(err(at + 8, &format!("unknown channel {ch}")));
                }
                Record::Tag(TimeTag { time, channel: ch, flags })
            });
        }
        Ok(Self { core_id, records })
    }

    pub fn write(&self, path: &Path) -> Result<(), TagFileError> {
        fs::write(path, self.encode()).map_err(|source| TagFileError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, TagFileError> {
        let bytes = fs::read(path).map_err(|source| TagFileError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes).map_err(|source| TagFileError::Format {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(time: u64, channel: u8, flags: u8) -> TimeTag {
        TimeTag { time, channel, flags }
    }

    fn sample() -> TagFile {
        let schedule = MeasurementSchedule::basis_scan(1e-6).unwrap();
        let tags = [tag(5, 0, 0), tag(999_999, 1, 1), tag(1_000_000, 0, 0), tag(1_500_000, 1, 0)];
        TagFile::from_stream(7, &tags, &schedule, true, true)
    }

    #[test]
    fn markers_interleave_and_segment() {
        let f = sample();
        assert_eq!(f.records.len(), 7);
        assert!(matches!(f.records[3], Record::Marker { time: 1_000_000, marker: Marker::Start(Basis::DA) }));
        let segs = f.segments();
        assert_eq!(
            segs,
            vec![
                FileSegment { basis: Basis::HV, start_ps: 0, end_ps: 1_000_000 },
                FileSegment { basis: Basis::DA, start_ps: 1_000_000, end_ps: 2_000_000 },
            ]
        );
        assert_eq!(f.tags().len(), 4);
    }

    #[test]
    fn encode_decode_is_bit_exact() {
        let f = sample();
        let bytes = f.encode();
        assert_eq!(bytes.len(), HEADER_LEN + 7 * RECORD_LEN);
        assert_eq!(&bytes[..8], b"MCQT\x01\x00\x07\x00");
        let back = TagFile::decode(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let bytes = sample().encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(TagFile::decode(&bad).unwrap_err().offset, 0);
        let mut bad = bytes.clone();
        bad[4] = 2;
        let e = TagFile::decode(&bad).unwrap_err();
        assert_eq!(e.offset, 4);
        assert!(e.to_string().contains("version 2"));
        let mut bad = bytes.clone();
        bad[HEADER_LEN + RECORD_LEN + 12] = 1;
        assert_eq!(TagFile::decode(&bad).unwrap_err().offset, (HEADER_LEN + RECORD_LEN + 10) as u64);
        assert_eq!(TagFile::decode(&bytes[..bytes.len() - 3]).unwrap_err().offset, (bytes.len() - RECORD_LEN) as u64);
        assert_eq!(TagFile::decode(b"MCQ").unwrap_err().offset, 3);
    }

    #[test]
    fn header_only_file_is_empty() {
        let f = TagFile { core_id: 3, records: vec![] };
        let back = TagFile::decode(&f.encode()).unwrap();
        assert!(back.segments().is_empty() && back.tags().is_empty());
    }

    #[test]
    fn flags_can_be_stripped() {
        let schedule = MeasurementSchedule::basis_scan(1.0).unwrap();
        let f = TagFile::from_stream(1, &[tag(3, 2, 1)], &schedule, false, false);
        assert_eq!(f.tags()[0].flags, 0);
    }
}
