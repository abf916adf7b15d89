use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::{Component, Path, PathBuf};

use sha2::{Digest, Sha256};

/// Recursively copies `src` (file or directory) to `dst`.
pub(crate) fn copy_tree(src: &Path, dst: &Path) -> io::Result<()> {
    let meta = fs::metadata(src)?;
    if meta.is_dir() {
        fs::create_dir_all(dst)?;
        let mut entries: Vec<_> = fs::read_dir(src)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            copy_tree(&entry.path(), &dst.join(entry.file_name()))?;
        }
    } else {
        fs::copy(src, dst)?;
    }
    Ok(())
}

/// Strips write permission below `path` (files 0444, directories 0555).
pub(crate) fn make_read_only(path: &Path) -> io::Result<()> {
    let meta = fs::symlink_metadata(path)?;
    if meta.is_dir() {
        for entry in fs::read_dir(path)? {
            make_read_only(&entry?.path())?;
        }
        fs::set_permissions(path, fs::Permissions::from_mode(0o555))
    } else if meta.file_type().is_symlink() {
        Ok(())
    } else {
        fs::set_permissions(path, fs::Permissions::from_mode(0o444))
    }
}

pub(crate) fn make_writable(path: &Path) -> io::Result<()> {
    let meta = fs::symlink_metadata(path)?;
    if meta.file_type().is_symlink() {
        return Ok(());
    }
    let mode = meta.permissions().mode() | 0o700;
    fs::set_permissions(path, fs::Permissions::from_mode(mode))?;
    if meta.is_dir() {
        for entry in fs::read_dir(path)? {
            make_writable(&entry?.path())?;
        }
    }
    Ok(())
}

/// Content hash over relative paths, entry types and file bytes.
pub fn hash_tree(root: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    hash_into(root, Path::new(""), &mut hasher)?;
    Ok(format!("{:x}", hasher.finalize()))
}

fn hash_into(path: &Path, rel: &Path, hasher: &mut Sha256) -> io::Result<()> {
    let meta = fs::symlink_metadata(path)?;
    let rel_str = rel.to_string_lossy();
    if meta.is_dir() {
        hasher.update(b"D\0");
        hasher.update(rel_str.as_bytes());
        hasher.update(b"\0");
        let mut names: Vec<_> = fs::read_dir(path)?.map(|e| e.map(|e| e.file_name())).collect::<Result<_, _>>()?;
        names.sort();
        for name in names {
            hash_into(&path.join(&name), &rel.join(&name), hasher)?;
        }
    } else if meta.file_type().is_symlink() {
        hasher.update(b"L\0");
        hasher.update(rel_str.as_bytes());
        hasher.update(b"\0");
        hasher.update(fs::read_link(path)?.to_string_lossy().as_bytes());
    } else {
        hasher.update(b"F\0");
        hasher.update(rel_str.as_bytes());
        hasher.update(b"\0");
        let bytes = fs::read(path)?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(())
}

/// Lexically resolves `arg` against `base`, without touching the filesystem.
pub(crate) fn normalize(base: &Path, arg: &str) -> PathBuf {
    let p = Path::new(arg);
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let mut out = PathBuf::new();
    for comp in joined.components() {
        match comp {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other.as_os_str()),
        }
    }
    out
}
