use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::OsError;

pub const PASSWD: &str = "/etc/passwd";
pub const SHADOW: &str = "/etc/shadow";
pub const SUDO: &str = "/usr/bin/sudo";

/// Offset of the privilege check branch inside the sudo image.
pub const SUDO_CHECK_OFFSET: usize = 0x2a;
/// `jne` in the unmodified image; one 1→0 flip of bit 0 turns it into `je`.
pub const OPCODE_JNE: u8 = 0x75;
pub const OPCODE_JE: u8 = 0x74;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileMode {
    pub owner: u32,
    pub owner_writable: bool,
    pub world_readable: bool,
}

impl FileMode {
    fn flags(&self) -> String {
        format!(
            "{}{}",
            if self.owner_writable { 'w' } else { '-' },
            if self.world_readable { 'r' } else { '-' }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileObject {
    pub content: Vec<u8>,
    pub mode: FileMode,
}

/// Simulated persistent storage.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Disk {
    files: BTreeMap<String, FileObject>,
}

impl Disk {
    pub fn get(&self, path: &str) -> Option<&FileObject> {
        self.files.get(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    pub(crate) fn put(&mut self, path: &str, file: FileObject) {
        self.files.insert(path.to_string(), file);
    }

    pub(crate) fn write_back(&mut self, path: &str, offset: usize, bytes: &[u8]) -> Result<(), OsError> {
        let f = self.files.get_mut(path).ok_or_else(|| OsError::NoSuchFile(path.into()))?;
        let end = (offset + bytes.len()).min(f.content.len());
        if offset < end {
            f.content[offset..end].copy_from_slice(&bytes[..end - offset]);
        }
        Ok(())
    }

    /// `file <path> owner=<uid> mode=<w|-><r|-> <hex>` per line.
    pub fn dump_manifest(&self) -> String {
        let mut out = String::new();
        for (path, f) in &self.files {
            let _ = writeln!(
                out,
                "file {path} owner={} mode={} {}",
                f.mode.owner,
                f.mode.flags(),
                hex::encode(&f.content)
            );
        }
        out
    }

    pub fn parse_manifest(text: &str) -> Result<Disk, OsError> {
        let bad = |n: usize, why: &str| OsError::Manifest {
            line: n,
            reason: why.to_string(),
        };
        let mut disk = Disk::default();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [kw, path, owner, mode, rest @ ..] = parts.as_slice() else {
                return Err(bad(n, "expected `file <path> owner= mode= <hex>`"));
            };
            if *kw != "file" || rest.len() > 1 {
                return Err(bad(n, "expected `file <path> owner= mode= <hex>`"));
            }
            let owner = owner
                .strip_prefix("owner=")
                .and_then(|o| o.parse().ok())
                .ok_or_else(|| bad(n, "bad owner"))?;
            let flags = mode.strip_prefix("mode=").ok_or_else(|| bad(n, "bad mode"))?;
            let (owner_writable, world_readable) = match flags {
                "wr" => (true, true),
                "w-" => (true, false),
                "-r" => (false, true),
                "--" => (false, false),
                _ => return Err(bad(n, "bad mode")),
            };
            let content = match rest.first() {
                Some(h) => hex::decode(h).map_err(|_| bad(n, "bad hex"))?,
                None => Vec::new(),
            };
            disk.put(
                path,
                FileObject {
                    content,
                    mode: FileMode {
                        owner,
                        owner_writable,
                        world_readable,
                    },
                },
            );
        }
        Ok(disk)
    }
}

/// A normal user, as seen by suid helpers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actor {
    pub uid: u32,
    pub name: String,
}

impl Actor {
    pub fn root() -> Self {
        Actor {
            uid: 0,
            name: "root".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PasswdField {
    Password,
    Uid,
    Gid,
    Gecos,
    Home,
    Shell,
}

impl PasswdField {
    fn index(self) -> usize {
        match self {
            PasswdField::Password => 1,
            PasswdField::Uid => 2,
            PasswdField::Gid => 3,
            PasswdField::Gecos => 4,
            PasswdField::Home => 5,
            PasswdField::Shell => 6,
        }
    }
}

/// Byte ranges of one `name:x:uid:gid:gecos:home:shell` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PasswdRecord {
    pub name: String,
    pub fields: Vec<Range<usize>>,
}

impl PasswdRecord {
    pub fn field(&self, f: PasswdField) -> Range<usize> {
        self.fields[f.index()].clone()
    }
}

/// Splits colon-separated records; works on flipped bytes too, since only
/// `:` and `\n` matter.
pub fn parse_records(bytes: &[u8]) -> Vec<PasswdRecord> {
    let mut out = Vec::new();
    let mut start = 0;
    for line in bytes.split(|&b| b == b'\n') {
        let end = start + line.len();
        if !line.is_empty() && line[0] != 0 {
            let mut fields = Vec::new();
            let mut fs = start;
            for part in line.split(|&b| b == b':') {
                fields.push(fs..fs + part.len());
                fs += part.len() + 1;
            }
            if fields.len() >= 7 {
                out.push(PasswdRecord {
                    name: String::from_utf8_lossy(&bytes[fields[0].clone()]).into_owned(),
                    fields,
                });
            }
        }
        start = end + 1;
    }
    out
}

/// Numeric UID of the record named `user`, as login would read it.
pub fn login_uid(bytes: &[u8], user: &str) -> Option<u32> {
    let rec = parse_records(bytes).into_iter().find(|r| r.name == user)?;
    std::str::from_utf8(&bytes[rec.field(PasswdField::Uid)]).ok()?.parse().ok()
}

pub fn default_passwd() -> Vec<u8> {
    b"root:x:0:0:root:/root:/bin/sh\nalice:x:1001:1001:alice:/home/alice:/bin/sh\n".to_vec()
}

pub fn default_shadow() -> Vec<u8> {
    b"root:!:19000:0:99999:7:::\nalice:$6$pe$Vq1ZUn2w:19000:0:99999:7:::\n".to_vec()
}

/// Tiny stand-in for a setuid binary: the byte at `SUDO_CHECK_OFFSET`
/// decides whether the password check is enforced.
pub fn default_sudo() -> Vec<u8> {
    let mut img = b"\x7fELF\x02\x01\x01\0\0\0\0\0\0\0\0\0".to_vec();
    img.resize(SUDO_CHECK_OFFSET - 2, 0x90);
    img.extend_from_slice(&[0x85, 0xc0, OPCODE_JNE, 0x10]);
    img.resize(96, 0x90);
    img
}

pub fn default_disk() -> Disk {
    let mut d = Disk::default();
    let root_rw = |world_readable| FileMode {
        owner: 0,
        owner_writable: true,
        world_readable,
    };
    d.put(PASSWD, FileObject { content: default_passwd(), mode: root_rw(true) });
    d.put(SHADOW, FileObject { content: default_shadow(), mode: root_rw(false) });
    d.put(
        SUDO,
        FileObject {
            content: default_sudo(),
            mode: FileMode {
                owner: 0,
                owner_writable: false,
                world_readable: true,
            },
        },
    );
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passwd_layout() {
        let p = default_passwd();
        let recs = parse_records(&p);
        assert_eq!(recs.len(), 2);
        let alice = &recs[1];
        assert_eq!(&p[alice.field(PasswdField::Uid)], b"1001");
        assert_eq!(&p[alice.field(PasswdField::Uid).start - 3..alice.field(PasswdField::Uid).end + 1], b":x:1001:");
        assert_eq!(&p[recs[0].field(PasswdField::Uid).start - 3..recs[0].field(PasswdField::Uid).end + 1], &[0x3a, 0x78, 0x3a, 0x30, 0x3a]);
        assert_eq!(login_uid(&p, "alice"), Some(1001));
    }

    #[test]
    fn flipped_uid_logs_in_as_root() {
        let mut p = default_passwd();
        let r = parse_records(&p)[1].field(PasswdField::Uid);
        p[r.start] &= !1;
        p[r.start + 3] &= !1;
        assert_eq!(&p[r.clone()], &[0x30, 0x30, 0x30, 0x30]);
        assert_eq!(login_uid(&p, "alice"), Some(0));
    }

    #[test]
    fn sudo_opcode_flip() {
        let s = default_sudo();
        assert_eq!(s[SUDO_CHECK_OFFSET], OPCODE_JNE);
        assert_eq!(s[SUDO_CHECK_OFFSET] & !1, OPCODE_JE);
    }

    #[test]
    fn manifest_round_trip() {
        let d = default_disk();
        let text = d.dump_manifest();
        assert!(text.lines().all(|l| l.starts_with("file /")));
        assert_eq!(Disk::parse_manifest(&text).unwrap(), d);
        assert!(Disk::parse_manifest("file /x owner=0 mode=zz 00").is_err());
    }
}
