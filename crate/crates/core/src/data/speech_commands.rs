use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const TEST_LIST: &str = "testing_list.txt";
pub const VALIDATION_LIST: &str = "validation_list.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipRef {
    pub path: PathBuf,
    /// Path relative to the dataset root, `/`-separated.
    pub rel: String,
    pub label: usize,
}

/// File listing of a Speech-Commands-style tree, split by the list files.
#[derive(Clone, Debug, Default)]
pub struct Listing {
    pub classes: Vec<String>,
    pub train: Vec<ClipRef>,
    pub validation: Vec<ClipRef>,
    pub test: Vec<ClipRef>,
}

impl Listing {
    pub fn total(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

fn read_list(path: &Path) -> Result<HashSet<String>> {
    if !path.exists() {
        return Ok(HashSet::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim().replace('\\', "/"))
        .filter(|l| !l.is_empty())
        .collect())
}

/// Lists `<root>/<label>/<clip>.wav` in sorted path order. Labels are
/// mapped alphabetically. With `classes`, directories outside the list are
/// skipped with a warning; without, every directory not starting with `_`
/// is a class.
pub fn list_speech_commands(root: &Path, classes: Option<&[String]>) -> Result<Listing> {
    if !root.is_dir() {
        return Err(Error::Input(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut dirs = BTreeSet::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            dirs.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    let class_list: Vec<String> = match classes {
        Some(list) => {
            let mut v: Vec<String> = list.to_vec();
            v.sort();
            v.dedup();
            for c in &v {
                if !dirs.contains(c) {
                    log::warn!("class '{c}' has no directory under {}", root.display());
                }
            }
            for d in &dirs {
                if !v.contains(d) && !d.starts_with('_') {
                    log::warn!("skipping unknown label directory '{d}'");
                }
            }
            v
        }
        None => dirs.iter().filter(|d| !d.starts_with('_')).cloned().collect(),
    };
    let test = read_list(&root.join(TEST_LIST))?;
    let validation = read_list(&root.join(VALIDATION_LIST))?;
    let mut listing = Listing {
        classes: class_list.clone(),
        ..Listing::default()
    };
    for (label, class) in class_list.iter().enumerate() {
        let dir = root.join(class);
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<String> = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().is_file() && name.to_ascii_lowercase().ends_with(".wav") {
                files.push(name);
            }
        }
        files.sort();
        for name in files {
            let rel = format!("{class}/{name}");
            let clip = ClipRef {
                path: dir.join(&name),
                rel: rel.clone(),
                label,
            };
            if test.contains(&rel) {
                listing.test.push(clip);
            } else if validation.contains(&rel) {
                listing.validation.push(clip);
            } else {
                listing.train.push(clip);
            }
        }
    }
    if listing.total() == 0 {
        log::warn!("no clips found under {}", root.display());
    }
    Ok(listing)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(p: &Path) {
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, b"").unwrap();
    }

    #[test]
    fn empty_root_gives_empty_listing() {
        let dir = tempfile::tempdir().unwrap();
        let l = list_speech_commands(dir.path(), None).unwrap();
        assert_eq!(l.total(), 0);
        assert!(l.classes.is_empty());
        assert!(list_speech_commands(&dir.path().join("missing"), None).is_err());
    }

    #[test]
    fn labels_follow_alphabetical_order() {
        let dir = tempfile::tempdir().unwrap();
        for p in ["yes/b.wav", "yes/a.wav", "no/x.wav", "no/y.wav", "_background_noise_/n.wav"] {
            touch(&dir.path().join(p));
        }
        let l = list_speech_commands(dir.path(), None).unwrap();
        assert_eq!(l.classes, vec!["no", "yes"]);
        let got: Vec<(&str, usize)> = l.train.iter().map(|c| (c.rel.as_str(), c.label)).collect();
        assert_eq!(got, vec![("no/x.wav", 0), ("no/y.wav", 0), ("yes/a.wav", 1), ("yes/b.wav", 1)]);

        let only = list_speech_commands(dir.path(), Some(&["yes".to_string()])).unwrap();
        assert_eq!(only.total(), 2);
        assert!(only.train.iter().all(|c| c.label == 0));
    }

    #[test]
    fn split_lists_partition_the_clips() {
        let dir = tempfile::tempdir().unwrap();
        let mut all = Vec::new();
        for c in ["down", "go", "up"] {
            for i in 0..6 {
                let rel = format!("{c}/{i}.wav");
                touch(&dir.path().join(&rel));
                all.push(rel);
            }
        }
        fs::write(dir.path().join(TEST_LIST), "down/0.wav\ngo/1.wav\nup/2.wav\n").unwrap();
        fs::write(dir.path().join(VALIDATION_LIST), "down/3.wav\ngo/4.wav\n").unwrap();
        let l = list_speech_commands(dir.path(), None).unwrap();
        assert_eq!((l.train.len(), l.validation.len(), l.test.len()), (13, 2, 3));
        let mut seen = HashSet::new();
        for c in l.train.iter().chain(&l.validation).chain(&l.test) {
            assert!(seen.insert(c.rel.clone()), "{} in two splits", c.rel);
        }
        assert_eq!(seen.len(), all.len());
    }
}
