use serde::{Deserialize, Serialize};

use super::files::{parse_records, Actor, PasswdField, PASSWD, SHADOW};
use super::{AllocKind, FrameTag, OsError, OsState, PhysMem};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageCacheEntry {
    pub path: String,
    pub index: u32,
    pub frame: u64,
    pub dirty: bool,
}

impl OsState {
    fn page_count(&self, path: &str) -> Result<u32, OsError> {
        let f = self.disk.get(path).ok_or_else(|| OsError::NoSuchFile(path.into()))?;
        Ok((f.content.len() as u64).div_ceil(self.page_bytes).max(1) as u32)
    }

    /// Brings every page of `path` into the page cache. Frames come from the
    /// reclaim ring first, then from the allocator.
    pub fn load_file(&mut self, path: &str, mem: &mut dyn PhysMem) -> Result<Vec<PageCacheEntry>, OsError> {
        let pages = self.page_count(path)?;
        let mut out = Vec::new();
        for index in 0..pages {
            let key = (path.to_string(), index);
            if let Some(e) = self.page_cache.get(&key) {
                out.push(e.clone());
                continue;
            }
            let frame = match self.reclaim.pop_front() {
                Some(f) => {
                    self.alloc.set_tag(f, FrameTag::PageCache);
                    f
                }
                None => self.alloc_frame(FrameTag::PageCache, AllocKind::PageCache)?,
            };
            let content = &self.disk.get(path).expect("checked").content;
            let start = (index as u64 * self.page_bytes) as usize;
            let end = (start + self.page_bytes as usize).min(content.len());
            let mut page = vec![0u8; self.page_bytes as usize];
            page[..end - start].copy_from_slice(&content[start..end]);
            mem.write(self.frame_phys(frame), &page)?;
            let e = PageCacheEntry {
                path: path.to_string(),
                index,
                frame,
                dirty: false,
            };
            self.page_cache.insert(key, e.clone());
            out.push(e);
        }
        Ok(out)
    }

    pub fn cached(&self, path: &str, index: u32) -> Option<&PageCacheEntry> {
        self.page_cache.get(&(path.to_string(), index))
    }

    pub fn page_cache_entries(&self) -> impl Iterator<Item = &PageCacheEntry> {
        self.page_cache.values()
    }

    pub fn reclaim_ring(&self) -> impl Iterator<Item = &u64> {
        self.reclaim.iter()
    }

    /// File bytes as currently cached (loading first if needed).
    pub fn read_file(&mut self, path: &str, mem: &mut dyn PhysMem) -> Result<Vec<u8>, OsError> {
        let len = self.disk.get(path).ok_or_else(|| OsError::NoSuchFile(path.into()))?.content.len();
        let mut bytes = Vec::with_capacity(len);
        for e in self.load_file(path, mem)? {
            bytes.extend(mem.read(self.frame_phys(e.frame), self.page_bytes as usize)?);
        }
        bytes.truncate(len);
        Ok(bytes)
    }

    /// Evicts clean pages of `path`; their frames join the reclaim ring.
    pub fn drop_clean(&mut self, path: &str) -> Result<usize, OsError> {
        let keys: Vec<(String, u32)> = self
            .page_cache
            .iter()
            .filter(|(k, e)| k.0 == path && !e.dirty)
            .map(|(k, _)| k.clone())
            .collect();
        for k in &keys {
            let e = self.page_cache.remove(k).expect("listed");
            if self.reclaim.len() >= self.config.reclaim_cycle {
                let old = self.reclaim.pop_front().expect("non-empty ring");
                self.free_frame(old)?;
            }
            self.alloc.set_tag(e.frame, FrameTag::Reclaim);
            self.reclaim.push_back(e.frame);
        }
        Ok(keys.len())
    }

    fn write_cached(&mut self, path: &str, offset: usize, bytes: &[u8], mem: &mut dyn PhysMem) -> Result<(), OsError> {
        self.load_file(path, mem)?;
        for (i, b) in bytes.iter().enumerate() {
            let at = (offset + i) as u64;
            let key = (path.to_string(), (at / self.page_bytes) as u32);
            let e = self.page_cache.get_mut(&key).ok_or_else(|| OsError::NoSuchFile(path.into()))?;
            e.dirty = true;
            let phys = e.frame * self.page_bytes + at % self.page_bytes;
            mem.write(phys, &[*b])?;
        }
        Ok(())
    }

    /// Field update through a setuid helper. A normal user may change only
    /// their own shell (`chsh`) or password (`passwd`, which edits the
    /// shadow file instead).
    pub fn legit_write(
        &mut self,
        user: &str,
        field: PasswdField,
        value: &[u8],
        actor: &Actor,
        mem: &mut dyn PhysMem,
    ) -> Result<(), OsError> {
        let own = actor.name == user;
        let allowed = actor.uid == 0 || (own && matches!(field, PasswdField::Shell | PasswdField::Password));
        if !allowed {
            return Err(OsError::PermissionDenied(format!("{} may not edit {field:?} of {user}", actor.name)));
        }
        let (path, index) = match field {
            PasswdField::Password => (SHADOW, 1),
            _ => (PASSWD, 0),
        };
        let bytes = self.read_file(path, mem)?;
        let rec = parse_records(&bytes)
            .into_iter()
            .find(|r| r.name == user)
            .ok_or_else(|| OsError::NoSuchRecord(user.into()))?;
        let range = if path == SHADOW {
            rec.fields[index].clone()
        } else {
            rec.field(field)
        };
        if range.len() != value.len() {
            return Err(OsError::LengthMismatch {
                expected: range.len(),
                got: value.len(),
            });
        }
        self.write_cached(path, range.start, value, mem)
    }

    /// Raw write to a file the actor may write.
    pub fn write_file(
        &mut self,
        path: &str,
        offset: usize,
        bytes: &[u8],
        actor: &Actor,
        mem: &mut dyn PhysMem,
    ) -> Result<(), OsError> {
        let f = self.disk.get(path).ok_or_else(|| OsError::NoSuchFile(path.into()))?;
        if !(actor.uid == 0 || (f.mode.owner == actor.uid && f.mode.owner_writable)) {
            return Err(OsError::PermissionDenied(format!("{} may not write {path}", actor.name)));
        }
        if offset + bytes.len() > f.content.len() {
            return Err(OsError::LengthMismatch {
                expected: f.content.len(),
                got: offset + bytes.len(),
            });
        }
        self.write_cached(path, offset, bytes, mem)
    }

    /// Writes every dirty page back to disk, whatever its bytes now are.
    pub fn sync_flush(&mut self, mem: &mut dyn PhysMem) -> Result<usize, OsError> {
        let dirty: Vec<(String, u32, u64)> = self
            .page_cache
            .values()
            .filter(|e| e.dirty)
            .map(|e| (e.path.clone(), e.index, e.frame))
            .collect();
        for (path, index, frame) in &dirty {
            let page = mem.read(self.frame_phys(*frame), self.page_bytes as usize)?;
            self.disk.write_back(path, (*index as u64 * self.page_bytes) as usize, &page)?;
            self.page_cache.get_mut(&(path.clone(), *index)).expect("listed").dirty = false;
            self.disk_writes += 1;
        }
        Ok(dirty.len())
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::world;
    use super::super::{default_passwd, FileMode};
    use super::*;

    fn alice() -> Actor {
        Actor { uid: 1001, name: "alice".into() }
    }

    fn uid_phys(os: &OsState) -> u64 {
        let e = os.cached(PASSWD, 0).unwrap();
        let r = parse_records(&default_passwd())[1].field(PasswdField::Uid);
        os.frame_phys(e.frame) + r.start as u64
    }

    #[test]
    fn cached_bytes_match_disk() {
        let (mut os, mut d) = world();
        assert_eq!(os.read_file(PASSWD, &mut d).unwrap(), default_passwd());
        assert!(!os.cached(PASSWD, 0).unwrap().dirty);
    }

    #[test]
    fn chsh_marks_dirty_and_uid_write_is_denied() {
        let (mut os, mut d) = world();
        os.legit_write("alice", PasswdField::Shell, b"/bin/zz", &alice(), &mut d).unwrap();
        assert!(os.cached(PASSWD, 0).unwrap().dirty);
        let err = os.legit_write("alice", PasswdField::Uid, b"0000", &alice(), &mut d);
        assert!(matches!(err, Err(OsError::PermissionDenied(_))));
        let err = os.legit_write("root", PasswdField::Shell, b"/bin/zz", &alice(), &mut d);
        assert!(matches!(err, Err(OsError::PermissionDenied(_))));
        assert!(matches!(
            os.legit_write("alice", PasswdField::Shell, b"/bin/bash", &alice(), &mut d),
            Err(OsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn passwd_command_dirties_shadow_not_passwd() {
        let (mut os, mut d) = world();
        os.load_file(PASSWD, &mut d).unwrap();
        os.legit_write("alice", PasswdField::Password, b"$6$pe$XXXXXXXX", &alice(), &mut d).unwrap();
        assert!(!os.cached(PASSWD, 0).unwrap().dirty);
        assert!(os.cached(SHADOW, 0).unwrap().dirty);
    }

    #[test]
    fn flip_without_write_is_not_persisted() {
        let (mut os, mut d) = world();
        os.load_file(PASSWD, &mut d).unwrap();
        let c = d.map(uid_phys(&os)).unwrap();
        d.inject_flip(&c).unwrap();
        assert_eq!(os.sync_flush(&mut d).unwrap(), 0);
        assert_eq!(os.disk().get(PASSWD).unwrap().content, default_passwd());
    }

    #[test]
    fn flip_with_chsh_is_persisted_and_survives_reload() {
        let (mut os, mut d) = world();
        os.load_file(PASSWD, &mut d).unwrap();
        let c = d.map(uid_phys(&os)).unwrap();
        d.inject_flip(&c).unwrap();
        os.legit_write("alice", PasswdField::Shell, b"/bin/zz", &alice(), &mut d).unwrap();
        let cached = os.read_file(PASSWD, &mut d).unwrap();
        assert_eq!(super::super::login_uid(&cached, "alice"), Some(1));
        assert_eq!(os.sync_flush(&mut d).unwrap(), 1);
        let disk = os.disk().get(PASSWD).unwrap().content.clone();
        assert_eq!(super::super::login_uid(&disk, "alice"), Some(1));
        assert!(disk.ends_with(b"/bin/zz\n"));
        os.drop_clean(PASSWD).unwrap();
        assert_eq!(os.read_file(PASSWD, &mut d).unwrap(), disk);
    }

    #[test]
    fn reload_after_drop_forgets_unflushed_flip() {
        let (mut os, mut d) = world();
        os.load_file(PASSWD, &mut d).unwrap();
        let c = d.map(uid_phys(&os)).unwrap();
        d.inject_flip(&c).unwrap();
        os.drop_clean(PASSWD).unwrap();
        assert_eq!(os.read_file(PASSWD, &mut d).unwrap(), default_passwd());
    }

    #[test]
    fn reclaim_ring_cycles_frames() {
        let (mut os, mut d) = world();
        let mode = FileMode { owner: 1001, owner_writable: true, world_readable: true };
        os.create_file("/home/alice/scratch", vec![7; 4 * 256], mode);
        let scratch: Vec<u64> = os
            .load_file("/home/alice/scratch", &mut d)
            .unwrap()
            .iter()
            .map(|e| e.frame)
            .collect();
        os.drop_clean("/home/alice/scratch").unwrap();
        assert_eq!(os.reclaim_ring().copied().collect::<Vec<_>>(), scratch);
        let first = os.load_file(PASSWD, &mut d).unwrap()[0].frame;
        assert_eq!(first, scratch[0]);
        let mut seen = vec![first];
        for _ in 0..4 {
            os.drop_clean(PASSWD).unwrap();
            seen.push(os.load_file(PASSWD, &mut d).unwrap()[0].frame);
        }
        assert_eq!(seen, vec![scratch[0], scratch[1], scratch[2], scratch[3], scratch[0]]);
    }
}
