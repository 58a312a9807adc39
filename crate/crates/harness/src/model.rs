//! In-memory reference file system and a canonical view of a tree that can
//! be compared against what a mounted image shows.

use std::collections::BTreeMap;
use std::fmt;

use bentoframe_core::fsapi::FileKind;
use bentoframe_core::Errno;

use crate::fsops::{components, Driver, Ops};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Node {
    Dir,
    /// `alias` is the smallest path naming the same file.
    File { data: Vec<u8>, alias: String },
    Symlink(String),
}

/// Every path in a tree and what it names.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Tree(pub BTreeMap<String, Node>);

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (p, n) in &self.0 {
            if !first {
                write!(f, " ")?;
            }
            first = false;
            match n {
                Node::Dir => write!(f, "{p}/")?,
                Node::File { data, alias } if alias != p => write!(f, "{p}={}b~{alias}", data.len())?,
                Node::File { data, .. } => write!(f, "{p}={}b", data.len())?,
                Node::Symlink(t) => write!(f, "{p}->{t}")?,
            }
        }
        if first {
            write!(f, "(empty)")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum MNode {
    Dir(BTreeMap<String, u64>),
    File(Vec<u8>),
    Symlink(String),
}

#[derive(Clone, Debug)]
pub struct Model {
    nodes: BTreeMap<u64, MNode>,
    next: u64,
}

const MROOT: u64 = 1;

impl Default for Model {
    fn default() -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(MROOT, MNode::Dir(BTreeMap::new()));
        Model { nodes, next: 2 }
    }
}

impl Model {
    fn dir(&self, id: u64) -> Result<&BTreeMap<String, u64>, Errno> {
        match &self.nodes[&id] {
            MNode::Dir(e) => Ok(e),
            _ => Err(Errno::ENOTDIR),
        }
    }

    fn dir_mut(&mut self, id: u64) -> &mut BTreeMap<String, u64> {
        match self.nodes.get_mut(&id) {
            Some(MNode::Dir(e)) => e,
            _ => unreachable!("not a directory"),
        }
    }

    fn resolve(&self, path: &str) -> Result<u64, Errno> {
        let mut id = MROOT;
        for c in components(path) {
            id = *self.dir(id)?.get(c).ok_or(Errno::ENOENT)?;
        }
        Ok(id)
    }

    fn resolve_parent<'p>(&self, path: &'p str) -> Result<(u64, &'p str), Errno> {
        let parts = components(path);
        let (name, dirs) = parts.split_last().ok_or(Errno::EINVAL)?;
        let mut id = MROOT;
        for c in dirs {
            id = *self.dir(id)?.get(*c).ok_or(Errno::ENOENT)?;
        }
        self.dir(id)?;
        Ok((id, name))
    }

    fn links_to(&self, id: u64) -> usize {
        self.nodes
            .values()
            .filter_map(|n| match n {
                MNode::Dir(e) => Some(e.values().filter(|&&c| c == id).count()),
                _ => None,
            })
            .sum()
    }

    fn drop_if_unlinked(&mut self, id: u64) {
        if self.links_to(id) == 0 {
            self.nodes.remove(&id);
        }
    }

    fn alloc(&mut self, n: MNode) -> u64 {
        let id = self.next;
        self.next += 1;
        self.nodes.insert(id, n);
        id
    }

    fn insert_new(&mut self, path: &str, n: MNode) -> Result<(), Errno> {
        let (p, name) = self.resolve_parent(path)?;
        if self.dir(p)?.contains_key(name) {
            return Err(Errno::EEXIST);
        }
        let id = self.alloc(n);
        self.dir_mut(p).insert(name.to_string(), id);
        Ok(())
    }

    pub fn mkdir(&mut self, path: &str) -> Result<(), Errno> {
        self.insert_new(path, MNode::Dir(BTreeMap::new()))
    }

    pub fn create(&mut self, path: &str) -> Result<(), Errno> {
        self.insert_new(path, MNode::File(Vec::new()))
    }

    pub fn symlink(&mut self, target: &str, path: &str) -> Result<(), Errno> {
        self.insert_new(path, MNode::Symlink(target.to_string()))
    }

    pub fn rmdir(&mut self, path: &str) -> Result<(), Errno> {
        let (p, name) = self.resolve_parent(path)?;
        let id = *self.dir(p)?.get(name).ok_or(Errno::ENOENT)?;
        match &self.nodes[&id] {
            MNode::Dir(e) if !e.is_empty() => return Err(Errno::ENOTEMPTY),
            MNode::Dir(_) => {}
            _ => return Err(Errno::ENOTDIR),
        }
        self.dir_mut(p).remove(name);
        self.nodes.remove(&id);
        Ok(())
    }

    pub fn unlink(&mut self, path: &str) -> Result<(), Errno> {
        let (p, name) = self.resolve_parent(path)?;
        let id = *self.dir(p)?.get(name).ok_or(Errno::ENOENT)?;
        if matches!(self.nodes[&id], MNode::Dir(_)) {
            return Err(Errno::EISDIR);
        }
        self.dir_mut(p).remove(name);
        self.drop_if_unlinked(id);
        Ok(())
    }

    fn file_mut(&mut self, path: &str) -> Result<&mut Vec<u8>, Errno> {
        let id = self.resolve(path)?;
        match self.nodes.get_mut(&id) {
            Some(MNode::File(d)) => Ok(d),
            Some(MNode::Dir(_)) => Err(Errno::EISDIR),
            _ => Err(Errno::ELOOP),
        }
    }

    pub fn write(&mut self, path: &str, offset: u64, data: &[u8]) -> Result<(), Errno> {
        let f = self.file_mut(path)?;
        let end = offset as usize + data.len();
        if !data.is_empty() && f.len() < end {
            f.resize(end, 0);
        }
        f[offset as usize..end].copy_from_slice(data);
        Ok(())
    }

    pub fn truncate(&mut self, path: &str, size: u64) -> Result<(), Errno> {
        let id = self.resolve(path)?;
        match self.nodes.get_mut(&id) {
            Some(MNode::File(d)) => {
                d.resize(size as usize, 0);
                Ok(())
            }
            Some(MNode::Dir(_)) => Err(Errno::EISDIR),
            _ => Err(Errno::EINVAL),
        }
    }

    pub fn link(&mut self, src: &str, dst: &str) -> Result<(), Errno> {
        let id = self.resolve(src)?;
        let (p, name) = self.resolve_parent(dst)?;
        if matches!(self.nodes[&id], MNode::Dir(_)) {
            return Err(Errno::EPERM);
        }
        if self.dir(p)?.contains_key(name) {
            return Err(Errno::EEXIST);
        }
        self.dir_mut(p).insert(name.to_string(), id);
        Ok(())
    }

    fn is_ancestor(&self, anc: u64, mut id: u64) -> bool {
        loop {
            if id == anc {
                return true;
            }
            if id == MROOT {
                return false;
            }
            id = *self
                .nodes
                .iter()
                .find(|(_, n)| matches!(n, MNode::Dir(e) if e.values().any(|&c| c == id)))
                .map(|(k, _)| k)
                .expect("orphan directory in model");
        }
    }

    pub fn rename(&mut self, src: &str, dst: &str) -> Result<(), Errno> {
        let (sp, sname) = self.resolve_parent(src)?;
        let (dp, dname) = self.resolve_parent(dst)?;
        let id = *self.dir(sp)?.get(sname).ok_or(Errno::ENOENT)?;
        let src_dir = matches!(self.nodes[&id], MNode::Dir(_));
        if sp != dp && src_dir && self.is_ancestor(id, dp) {
            return Err(Errno::EINVAL);
        }
        let existing = self.dir(dp)?.get(dname).copied();
        if existing == Some(id) {
            return Ok(());
        }
        if let Some(old) = existing {
            match (&self.nodes[&old], src_dir) {
                (MNode::Dir(_), false) => return Err(Errno::EISDIR),
                (MNode::Dir(e), true) if !e.is_empty() => return Err(Errno::ENOTEMPTY),
                (MNode::Dir(_), true) => {}
                (_, true) => return Err(Errno::ENOTDIR),
                (_, false) => {}
            }
        }
        self.dir_mut(sp).remove(sname);
        self.dir_mut(dp).insert(dname.to_string(), id);
        if let Some(old) = existing {
            self.drop_if_unlinked(old);
        }
        Ok(())
    }

    pub fn tree(&self) -> Tree {
        let mut paths: Vec<(String, u64)> = Vec::new();
        let mut stack = vec![(String::new(), MROOT)];
        while let Some((prefix, id)) = stack.pop() {
            if let MNode::Dir(e) = &self.nodes[&id] {
                for (name, &c) in e {
                    let p = format!("{prefix}{name}");
                    if matches!(self.nodes[&c], MNode::Dir(_)) {
                        stack.push((format!("{p}/"), c));
                    }
                    paths.push((p, c));
                }
            }
        }
        let mut first: BTreeMap<u64, String> = BTreeMap::new();
        for (p, id) in &paths {
            let e = first.entry(*id).or_insert_with(|| p.clone());
            if p < e {
                *e = p.clone();
            }
        }
        Tree(
            paths
                .into_iter()
                .map(|(p, id)| {
                    let n = match &self.nodes[&id] {
                        MNode::Dir(_) => Node::Dir,
                        MNode::File(d) => Node::File {
                            data: d.clone(),
                            alias: first[&id].clone(),
                        },
                        MNode::Symlink(t) => Node::Symlink(t.clone()),
                    };
                    (p, n)
                })
                .collect(),
        )
    }
}

/// Reads the whole tree of a mounted file system.
pub fn observe<D: Driver + ?Sized>(ops: &Ops<'_, D>) -> Result<Tree, Errno> {
    let mut out = BTreeMap::new();
    let mut first: BTreeMap<u64, String> = BTreeMap::new();
    let mut files: Vec<(String, u64)> = Vec::new();
    let mut stack = vec![(String::new(), crate::fsops::ROOT)];
    while let Some((prefix, dir)) = stack.pop() {
        for e in ops.list(dir)? {
            let p = format!("{prefix}{}", e.name);
            match e.kind {
                FileKind::Directory => {
                    out.insert(p.clone(), Node::Dir);
                    stack.push((format!("{p}/"), e.ino));
                }
                FileKind::Symlink => {
                    let t = ops.readlink(e.ino)?;
                    out.insert(p, Node::Symlink(String::from_utf8_lossy(&t).into_owned()));
                }
                FileKind::RegularFile => {
                    let a = first.entry(e.ino).or_insert_with(|| p.clone());
                    if p < *a {
                        *a = p.clone();
                    }
                    files.push((p, e.ino));
                }
            }
        }
    }
    let mut contents: BTreeMap<u64, Vec<u8>> = BTreeMap::new();
    for (p, ino) in files {
        if !contents.contains_key(&ino) {
            let o = ops.open(ino, bentoframe_core::fsapi::O_RDONLY)?;
            let data = ops.read_to_end(ino, o.fh, 0);
            ops.release(ino, o.fh)?;
            contents.insert(ino, data?);
        }
        out.insert(
            p,
            Node::File {
                data: contents[&ino].clone(),
                alias: first[&ino].clone(),
            },
        );
    }
    Ok(Tree(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_links_share_contents_and_alias() {
        let mut m = Model::default();
        m.mkdir("A").unwrap();
        m.create("A/foo").unwrap();
        m.link("A/foo", "bar").unwrap();
        m.write("bar", 0, b"xy").unwrap();
        let t = m.tree();
        assert_eq!(
            t.0["A/foo"],
            Node::File {
                data: b"xy".to_vec(),
                alias: "A/foo".into()
            }
        );
        assert_eq!(
            t.0["bar"],
            Node::File {
                data: b"xy".to_vec(),
                alias: "A/foo".into()
            }
        );
        m.unlink("A/foo").unwrap();
        assert_eq!(m.tree().0["bar"], Node::File { data: b"xy".to_vec(), alias: "bar".into() });
    }

    #[test]
    fn rename_rules() {
        let mut m = Model::default();
        m.mkdir("A").unwrap();
        m.mkdir("B").unwrap();
        m.create("A/foo").unwrap();
        assert_eq!(m.rename("A", "A/sub"), Err(Errno::EINVAL));
        assert_eq!(m.rename("B", "A"), Err(Errno::ENOTEMPTY));
        assert_eq!(m.rename("A/foo", "B"), Err(Errno::EISDIR));
        m.rename("A", "B").unwrap();
        assert_eq!(m.tree().to_string(), "B/ B/foo=0b");
        assert_eq!(m.rmdir("B/foo"), Err(Errno::ENOTDIR));
        assert_eq!(m.unlink("B"), Err(Errno::EISDIR));
    }
}
