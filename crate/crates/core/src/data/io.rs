//! On-disk EMG formats.
//!
//! Binary (little-endian, records back to back):
//!
//! ```text
//! magic "EMGU" | version u16 = 1 | channels u16 | sample_rate u32 | num_samples u64
//! user_id (u16 len + UTF-8) | session_id (u16 len + UTF-8) | label i16 (-1 = none)
//! channels * num_samples f32, channel-major
//! ```
//!
//! CSV: header `user,session,label,ch0..chN`, one time step per row, a new
//! record whenever `(user, session)` changes.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::record::EmgRecord;
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"EMGU";
pub const BINARY_VERSION: u16 = 1;
/// Sample rate assigned to CSV records, which carry none.
pub const CSV_SAMPLE_RATE_HZ: u32 = 2000;
pub const USER_FILE_EXTENSION: &str = "emgu";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv,
}

pub fn load_records(path: &Path, format: Format) -> Result<Vec<EmgRecord>> {
    match format {
        Format::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_binary(&bytes)
        }
        Format::Csv => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            read_csv(BufReader::new(file))
        }
    }
}

pub fn save_records(path: &Path, records: &[EmgRecord], format: Format) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        Format::Binary => w
            .write_all(&encode_binary(records)?)
            .map_err(|e| Error::io(path, e))?,
        Format::Csv => write_csv(&mut w, records)?,
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn encode_binary(records: &[EmgRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        let channels = u16::try_from(r.channels())
            .map_err(|_| Error::Format(format!("{} channels exceed u16", r.channels())))?;
        let label = match r.gesture_label {
            None => -1i16,
            Some(l) => i16::try_from(l)
                .map_err(|_| Error::Format(format!("label {l} exceeds i16")))?,
        };
        out.extend_from_slice(BINARY_MAGIC);
        out.write_u16::<LittleEndian>(BINARY_VERSION).unwrap();
        out.write_u16::<LittleEndian>(channels).unwrap();
        out.write_u32::<LittleEndian>(r.sample_rate_hz).unwrap();
        out.write_u64::<LittleEndian>(r.samples() as u64).unwrap();
        write_str(&mut out, &r.user_id)?;
        write_str(&mut out, &r.session_id)?;
        out.write_i16::<LittleEndian>(label).unwrap();
        for &v in r.data() {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    Ok(out)
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Format(format!("string too long: {s:.32}…")))?;
    out.write_u16::<LittleEndian>(len).unwrap();
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Cursor that reports the absolute byte offset of a short read.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncation {
                offset: self.pos as u64,
                detail: format!(
                    "needed {n} bytes for {what}, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.take(2, what)?.read_u16::<LittleEndian>().unwrap() as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Format(format!("{what} at byte {at} is not UTF-8")))
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<Vec<EmgRecord>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let start = cur.pos;
        let magic = cur.take(4, "magic")?;
        if magic != BINARY_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {magic:?} at byte {start} (expected \"EMGU\")"
            )));
        }
        let version = cur.take(2, "version")?.read_u16::<LittleEndian>().unwrap();
        if version != BINARY_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version} at byte {start}"
            )));
        }
        let channels = cur.take(2, "channel count")?.read_u16::<LittleEndian>().unwrap() as usize;
        let rate = cur.take(4, "sample rate")?.read_u32::<LittleEndian>().unwrap();
        let samples = cur.take(8, "sample count")?.read_u64::<LittleEndian>().unwrap() as usize;
        let user = cur.string("user id")?;
        let session = cur.string("session id")?;
        let label = cur.take(2, "label")?.read_i16::<LittleEndian>().unwrap();
        let n = channels
            .checked_mul(samples)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("record at byte {start} is impossibly large")))?;
        let mut payload = cur.take(n, &format!("{channels}x{samples} payload"))?;
        let mut data = vec![0f32; channels * samples];
        payload.read_f32_into::<LittleEndian>(&mut data).unwrap();
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(Error::Format(format!("invalid label {l} at byte {start}"))),
        };
        out.push(
            EmgRecord::new(user, session, label, rate, channels, data)
                .map_err(|e| e.context(format!("record at byte {start}")))?,
        );
    }
    Ok(out)
}

pub fn write_csv<W: Write>(w: W, records: &[EmgRecord]) -> Result<()> {
    let channels = records.first().map(EmgRecord::channels).unwrap_or(0);
    if let Some(r) = records.iter().find(|r| r.channels() != channels) {
        return Err(Error::Data(format!(
            "CSV needs a common channel count; {} has {} vs {channels}",
            r.record_id(),
            r.channels()
        )));
    }
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["user".to_string(), "session".into(), "label".into()];
    header.extend((0..channels).map(|c| format!("ch{c}")));
    wr.write_record(&header).map_err(csv_err)?;
    for r in records {
        let label = r.gesture_label.map_or("-1".to_string(), |l| l.to_string());
        for t in 0..r.samples() {
            let mut row = vec![r.user_id.clone(), r.session_id.clone(), label.clone()];
            row.extend((0..channels).map(|c| r.channel(c)[t].to_string()));
            wr.write_record(&row).map_err(csv_err)?;
        }
    }
    wr.flush().map_err(|e| Error::Data(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    if let csv::ErrorKind::UnequalLengths { pos, expected_len, len } = e.kind() {
        return Error::Truncation {
            offset: pos.as_ref().map_or(0, |p| p.byte()),
            detail: format!("row has {len} fields, header has {expected_len}"),
        };
    }
    Error::Format(format!("CSV: {e}"))
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<EmgRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    let fixed = ["user", "session", "label"];
    if header.len() < 4 || header.iter().take(3).ne(fixed.iter().copied()) {
        return Err(Error::Format(
            "CSV header must start with user,session,label,ch0".into(),
        ));
    }
    for (i, name) in header.iter().skip(3).enumerate() {
        if name != format!("ch{i}") {
            return Err(Error::Format(format!("CSV column `{name}` should be `ch{i}`")));
        }
    }
    let channels = header.len() - 3;

    struct Pending {
        user: String,
        session: String,
        label: i64,
        columns: Vec<Vec<f32>>,
    }
    let finish = |p: Pending| -> Result<EmgRecord> {
        let label = (p.label >= 0).then_some(p.label as usize);
        EmgRecord::new(p.user, p.session, label, CSV_SAMPLE_RATE_HZ, channels, p.columns.concat())
    };

    let mut out = Vec::new();
    let mut current: Option<Pending> = None;
    for row in rd.records() {
        let row = row.map_err(csv_err)?;
        let offset = row.position().map_or(0, |p| p.byte());
        let label: i64 = row[2].trim().parse().map_err(|_| {
            Error::Format(format!("bad label `{}` at byte {offset}", &row[2]))
        })?;
        let same = current
            .as_ref()
            .is_some_and(|p| p.user == row[0] && p.session == row[1]);
        if !same {
            if let Some(done) = current.take() {
                out.push(finish(done)?);
            }
            current = Some(Pending {
                user: row[0].to_string(),
                session: row[1].to_string(),
                label,
                columns: vec![Vec::new(); channels],
            });
        }
        let p = current.as_mut().unwrap();
        if p.label != label {
            return Err(Error::Data(format!(
                "label changes within record {}/{} at byte {offset}",
                p.user, p.session
            )));
        }
        for (c, field) in row.iter().skip(3).enumerate() {
            let v: f32 = field.trim().parse().map_err(|_| {
                Error::Format(format!("bad sample `{field}` at byte {offset}"))
            })?;
            p.columns[c].push(v);
        }
    }
    if let Some(done) = current {
        out.push(finish(done)?);
    }
    Ok(out)
}

/// A directory holding one binary file per user (`<user>.emgu`).
///
/// Every user file read is logged, so callers can audit which users'
/// data a computation touched.
#[derive(Debug)]
pub struct DataStore {
    dir: PathBuf,
    accessed: Mutex<Vec<String>>,
}

impl DataStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(Error::io(
                &dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
            ));
        }
        Ok(Self {
            dir,
            accessed: Mutex::new(Vec::new()),
        })
    }

    /// Writes records grouped by user, one file each.
    pub fn write(dir: impl Into<PathBuf>, records: &[EmgRecord]) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let users: BTreeSet<&str> = records.iter().map(|r| r.user_id.as_str()).collect();
        for user in users {
            validate_user_id(user)?;
            let mine: Vec<EmgRecord> = records.iter().filter(|r| r.user_id == user).cloned().collect();
            save_records(&user_path(&dir, user), &mine, Format::Binary)?;
        }
        Self::open(dir)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// User ids available in the store, from file names only.
    pub fn users(&self) -> Result<Vec<String>> {
        let mut users = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let path = entry.map_err(|e| Error::io(&self.dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some(USER_FILE_EXTENSION) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    users.push(stem.to_string());
                }
            }
        }
        users.sort();
        Ok(users)
    }

    pub fn load_user(&self, user: &str) -> Result<Vec<EmgRecord>> {
        let known = self.users()?;
        if !known.iter().any(|u| u == user) {
            return Err(Error::UnknownUser {
                user: user.to_string(),
                known,
            });
        }
        self.accessed.lock().unwrap().push(user.to_string());
        let records = load_records(&user_path(&self.dir, user), Format::Binary)?;
        if let Some(r) = records.iter().find(|r| r.user_id != user) {
            return Err(Error::Data(format!(
                "file for user `{user}` contains a record of `{}`",
                r.user_id
            )));
        }
        Ok(records)
    }

    pub fn load_users(&self, users: &[String]) -> Result<Vec<EmgRecord>> {
        let mut out = Vec::new();
        for u in users {
            out.extend(self.load_user(u)?);
        }
        Ok(out)
    }

    /// Users whose data has been read, in access order.
    pub fn accessed(&self) -> Vec<String> {
        self.accessed.lock().unwrap().clone()
    }
}

fn user_path(dir: &Path, user: &str) -> PathBuf {
    dir.join(format!("{user}.{USER_FILE_EXTENSION}"))
}

fn validate_user_id(user: &str) -> Result<()> {
    if user.is_empty() || user.contains(['/', '\\', '.']) {
        return Err(Error::Data(format!("user id `{user}` cannot be used as a file name")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> EmgRecord {
        EmgRecord::new(
            "alice",
            "s1",
            Some(3),
            2000,
            2,
            vec![0.1, -2.5, 3.25, f32::MIN_POSITIVE, 7.0, 1e-7, -0.0, 42.0],
        )
        .unwrap()
    }

    #[test]
    fn binary_round_trip_is_bit_identical() {
        let recs = vec![fixture(), fixture().without_label()];
        let bytes = encode_binary(&recs).unwrap();
        let back = decode_binary(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.user_id, b.user_id);
            assert_eq!(a.gesture_label, b.gesture_label);
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(encode_binary(&back).unwrap(), bytes);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode_binary(&[fixture()]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_binary(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_is_format_error() {
        let mut bytes = encode_binary(&[fixture()]).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_binary(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_reports_offset() {
        let one = encode_binary(&[fixture()]).unwrap();
        let mut two = encode_binary(&[fixture(), fixture()]).unwrap();
        two.truncate(two.len() - 3);
        match decode_binary(&two) {
            Err(Error::Truncation { offset, .. }) => {
                assert!(offset as usize > one.len(), "offset {offset} inside second record")
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn csv_fixture_makes_one_record() {
        let text = "user,session,label,ch0,ch1\nu1,s1,2,1.0,4.0\nu1,s1,2,2.0,5.0\nu1,s1,2,3.0,6.0\n";
        let recs = read_csv(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!((recs[0].channels(), recs[0].samples()), (2, 3));
        assert_eq!(recs[0].channel(1), &[4.0, 5.0, 6.0]);
        assert_eq!(recs[0].gesture_label, Some(2));
    }

    #[test]
    fn csv_splits_on_user_session_change_and_round_trips() {
        let text = "user,session,label,ch0\nu1,s1,-1,1\nu1,s2,0,2\nu1,s2,0,3\nu2,s1,1,4\n";
        let recs = read_csv(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].gesture_label, None);
        let mut buf = Vec::new();
        write_csv(&mut buf, &recs).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn csv_ragged_row_is_truncation_with_offset() {
        let text = "user,session,label,ch0,ch1\nu1,s1,0,1,2\nu1,s1,0,3\n";
        match read_csv(text.as_bytes()) {
            Err(Error::Truncation { offset, .. }) => assert_eq!(offset, 39),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn store_logs_access_and_rejects_unknown_users() {
        let dir = tempfile::tempdir().unwrap();
        let mut bob = fixture();
        bob.user_id = "bob".into();
        let store = DataStore::write(dir.path(), &[fixture(), bob]).unwrap();
        assert_eq!(store.users().unwrap(), vec!["alice", "bob"]);
        assert_eq!(store.load_user("bob").unwrap().len(), 1);
        assert_eq!(store.accessed(), vec!["bob"]);
        match store.load_user("carol") {
            Err(Error::UnknownUser { known, .. }) => assert_eq!(known, vec!["alice", "bob"]),
            other => panic!("{other:?}"),
        }
    }
}
