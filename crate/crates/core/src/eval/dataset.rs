//! On-disk evaluation inputs: HPatches-style sequence directories and
//! epipolar pair lists.

use std::path::{Path, PathBuf};

use nalgebra::Matrix3;

use crate::error::{Error, Result};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["ppm", "pgm", "pnm"];

/// Image `index` of a sequence directory (`1.ppm`, `1.pgm` or `1.pnm`).
pub fn find_image(dir: &Path, index: usize) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|e| dir.join(format!("{index}.{e}")))
        .find(|p| p.is_file())
}

/// Nine whitespace-separated numbers, row-major.
pub fn parse_matrix3(text: &str) -> Result<Matrix3<f64>> {
    let vals = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::format(format!("bad matrix entry {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != 9 {
        return Err(Error::format(format!("expected 9 matrix entries, found {}", vals.len())));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("non-finite matrix entry"));
    }
    Ok(Matrix3::from_row_slice(&vals))
}

pub fn read_matrix3(path: &Path) -> Result<Matrix3<f64>> {
    parse_matrix3(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceDir {
    pub name: String,
    pub dir: PathBuf,
}

/// `root` itself when it holds image 1, otherwise its subdirectories that do,
/// sorted by name.
pub fn discover_sequences(root: &Path) -> Result<Vec<SequenceDir>> {
    let name_of = |p: &Path| {
        p.file_name()
            .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
    };
    if find_image(root, 1).is_some() {
        return Ok(vec![SequenceDir {
            name: name_of(root),
            dir: root.to_path_buf(),
        }]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let path = entry?.path();
        if path.is_dir() && find_image(&path, 1).is_some() {
            out.push(SequenceDir {
                name: name_of(&path),
                dir: path,
            });
        }
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSpec {
    pub a: PathBuf,
    pub b: PathBuf,
    pub f: PathBuf,
}

impl PairSpec {
    pub fn name(&self) -> String {
        let stem = |p: &Path| p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        format!("{}:{}", stem(&self.a), stem(&self.b))
    }
}

/// Lines `imgA imgB F_file`; relative paths resolve against the list's
/// directory, blank lines and `#` comments are skipped.
pub fn parse_pair_list(text: &str, base: &Path) -> Result<Vec<PairSpec>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [a, b, f] = parts[..] else {
            return Err(Error::format(format!("pair list line {}: expected 3 fields", no + 1)));
        };
        out.push(PairSpec {
            a: base.join(a),
            b: base.join(b),
            f: base.join(f),
        });
    }
    Ok(out)
}

pub fn read_pair_list(path: &Path) -> Result<Vec<PairSpec>> {
    let base = path.parent().unwrap_or(Path::new("."));
    parse_pair_list(&std::fs::read_to_string(path)?, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_parsing() {
        let m = parse_matrix3("1 0 2\n0 1 3\n0 0 1\n").unwrap();
        assert_eq!(m[(0, 2)], 2.0);
        assert_eq!(m[(1, 2)], 3.0);
        assert!(parse_matrix3("1 2 3").is_err());
        assert!(parse_matrix3("1 2 3 4 5 6 7 8 x").is_err());
    }

    #[test]
    fn pair_list_parsing() {
        let l = parse_pair_list("# c\n\na.pgm b.pgm f.txt\n/abs/x.ppm y.ppm g\n", Path::new("/data")).unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(l[0].a, Path::new("/data/a.pgm"));
        assert_eq!(l[1].a, Path::new("/abs/x.ppm"));
        assert_eq!(l[0].name(), "a.pgm:b.pgm");
        assert!(parse_pair_list("a b\n", Path::new(".")).is_err());
    }

    #[test]
    fn sequence_discovery() {
        let root = tempfile::tempdir().unwrap();
        for s in ["v_b", "i_a"] {
            let d = root.path().join(s);
            std::fs::create_dir(&d).unwrap();
            std::fs::write(d.join("1.ppm"), b"").unwrap();
        }
        std::fs::create_dir(root.path().join("empty")).unwrap();
        let seqs = discover_sequences(root.path()).unwrap();
        assert_eq!(seqs.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["i_a", "v_b"]);
        let single = discover_sequences(&root.path().join("v_b")).unwrap();
        assert_eq!(single.len(), 1);
    }
}
