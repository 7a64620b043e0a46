//! Tensor files, sample manifests and the aleatoric / epistemic train-test splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imaging::Frame;

pub const TENSOR_MAGIC: &[u8; 4] = b"VIAL";
pub const TENSOR_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported tensor version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("truncated tensor file {0}")]
    TruncatedFile(PathBuf),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("group {group} has {size} samples, too few to split")]
    GroupTooSmall { group: String, size: usize },
    #[error("cannot hold out {requested} of {groups} groups")]
    TooManyHoldouts { requested: usize, groups: usize },
    #[error("train and test share sample {0}")]
    Leakage(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// T×H×W float32 stack, frame-major, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(t: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != t * h * w {
            return Err(DatasetError::ShapeMismatch(format!(
                "{} values for shape {t}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Tensor3 { t, h, w, data })
    }

    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let (h, w) = frames.first().map_or((0, 0), |f| (f.height, f.width));
        if frames.iter().any(|f| f.height != h || f.width != w) {
            return Err(DatasetError::ShapeMismatch("frames differ in size".into()));
        }
        let data = frames
            .iter()
            .flat_map(|f| f.pixels.iter().map(|&p| p as f32))
            .collect();
        Self::new(frames.len(), h, w, data)
    }

    pub fn to_frames(&self) -> Vec<Frame> {
        self.data
            .chunks(self.h * self.w)
            .map(|c| Frame {
                height: self.h,
                width: self.w,
                pixels: c.iter().map(|&p| p as f64).collect(),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        for v in [TENSOR_VERSION, self.t as u32, self.h as u32, self.w as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
            return Err(DatasetError::BadMagic(path.to_path_buf()));
        }
        if bytes.len() < 20 {
            return Err(DatasetError::TruncatedFile(path.to_path_buf()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != TENSOR_VERSION {
            return Err(DatasetError::VersionMismatch {
                found: version,
                expected: TENSOR_VERSION,
            });
        }
        let (t, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let n = t
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| DatasetError::ShapeMismatch(format!("{t}x{h}x{w} overflows")))?;
        let body = &bytes[20..];
        if body.len() < 4 * n {
            return Err(DatasetError::TruncatedFile(path.to_path_buf()));
        }
        if body.len() > 4 * n {
            return Err(DatasetError::ShapeMismatch(format!(
                "{} trailing bytes after {t}x{h}x{w} values",
                body.len() - 4 * n
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor3 { t, h, w, data })
    }
}

pub fn write_tensor(path: &Path, tensor: &Tensor3) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&tensor.to_bytes()).map_err(io_err(path))
}

pub fn read_tensor(path: &Path) -> Result<Tensor3> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    Tensor3::from_bytes(&bytes, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    /// Pa·s
    pub true_viscosity: f64,
    /// kg/m³
    pub density: f64,
    pub protocol_hash: String,
    /// Relative to the manifest directory unless absolute.
    pub tensor_path: PathBuf,
    pub group_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub schema_version: u32,
    /// Global generation parameters, written as `# key=value` header lines.
    pub params: BTreeMap<String, String>,
    pub records: Vec<SampleRecord>,
    /// Directory tensor paths are resolved against.
    pub root: PathBuf,
}

const COLUMNS: [&str; 6] = [
    "sample_id",
    "true_viscosity",
    "density",
    "protocol_hash",
    "tensor_path",
    "viscosity_group_id",
];

impl Manifest {
    pub fn new(records: Vec<SampleRecord>, root: PathBuf) -> Result<Self> {
        let m = Manifest {
            schema_version: MANIFEST_SCHEMA,
            params: BTreeMap::new(),
            records,
            root,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(r.sample_id.as_str()) {
                return Err(DatasetError::Manifest {
                    line: i + 1,
                    msg: format!("duplicate sample_id {}", r.sample_id),
                });
            }
            if !(r.true_viscosity > 0.0) {
                return Err(DatasetError::Manifest {
                    line: i + 1,
                    msg: format!("viscosity must be > 0, got {}", r.true_viscosity),
                });
            }
        }
        Ok(())
    }

    /// Same header, different records.
    pub fn with_records(&self, records: Vec<SampleRecord>) -> Manifest {
        Manifest {
            records,
            ..self.clone()
        }
    }

    pub fn resolve(&self, r: &SampleRecord) -> PathBuf {
        if r.tensor_path.is_absolute() {
            r.tensor_path.clone()
        } else {
            self.root.join(&r.tensor_path)
        }
    }

    pub fn load_tensor(&self, r: &SampleRecord) -> Result<Tensor3> {
        read_tensor(&self.resolve(r))
    }

    /// Group id → records, ordered by group id.
    pub fn groups(&self) -> BTreeMap<&str, Vec<&SampleRecord>> {
        let mut g: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
        for r in &self.records {
            g.entry(r.group_id.as_str()).or_default().push(r);
        }
        g
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# schema_version={}\n", self.schema_version);
        for (k, v) in &self.params {
            s.push_str(&format!("# {k}={v}\n"));
        }
        s.push_str(&format!("# {}\n", COLUMNS.join("\t")));
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{:e}\t{:e}\t{}\t{}\t{}\n",
                r.sample_id,
                r.true_viscosity,
                r.density,
                r.protocol_hash,
                r.tensor_path.display(),
                r.group_id
            ));
        }
        s
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut schema_version = MANIFEST_SCHEMA;
        let mut params = BTreeMap::new();
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| DatasetError::Manifest { line: i + 1, msg };
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((k, v)) = comment.trim().split_once('=') {
                    if k == "schema_version" {
                        schema_version = v.parse().map_err(|e| err(format!("schema_version: {e}")))?;
                        if schema_version != MANIFEST_SCHEMA {
                            return Err(err(format!("unsupported schema version {schema_version}")));
                        }
                    } else {
                        params.insert(k.to_string(), v.to_string());
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != COLUMNS.len() {
                return Err(err(format!("expected {} fields, found {}", COLUMNS.len(), f.len())));
            }
            let num = |s: &str, name: &str| s.parse::<f64>().map_err(|e| err(format!("{name}: {e}")));
            records.push(SampleRecord {
                sample_id: f[0].to_string(),
                true_viscosity: num(f[1], "true_viscosity")?,
                density: num(f[2], "density")?,
                protocol_hash: f[3].to_string(),
                tensor_path: PathBuf::from(f[4]),
                group_id: f[5].to_string(),
            });
        }
        let m = Manifest {
            schema_version,
            params,
            records,
            root,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }
}

/// 64-bit FNV-1a, hex encoded; used to fingerprint generation parameters.
pub fn fingerprint(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Fraction of each group held out by [`split_aleatoric`].
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Random per-group partition: `round(fraction·n)` test samples per group, at least one,
/// and at least one left for training.
pub fn split_aleatoric(manifest: &Manifest, seed: u64) -> Result<(Manifest, Manifest)> {
    split_aleatoric_with(manifest, seed, DEFAULT_TEST_FRACTION)
}

pub fn split_aleatoric_with(manifest: &Manifest, seed: u64, fraction: f64) -> Result<(Manifest, Manifest)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_ids = HashSet::new();
    for (group, recs) in manifest.groups() {
        let n = recs.len();
        let n_test = ((fraction * n as f64).round() as usize).max(1);
        if n_test >= n {
            return Err(DatasetError::GroupTooSmall {
                group: group.to_string(),
                size: n,
            });
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..n_test] {
            test_ids.insert(recs[i].sample_id.clone());
        }
    }
    Ok(partition(manifest, |r| test_ids.contains(&r.sample_id)))
}

fn partition(manifest: &Manifest, is_test: impl Fn(&SampleRecord) -> bool) -> (Manifest, Manifest) {
    let (test, train): (Vec<SampleRecord>, Vec<SampleRecord>) =
        manifest.records.iter().cloned().partition(|r| is_test(r));
    (manifest.with_records(train), manifest.with_records(test))
}

/// Group ids ordered by log₁₀ of their mean viscosity, with those values.
pub fn group_log_viscosities(manifest: &Manifest) -> Vec<(String, f64)> {
    let mut g: Vec<(String, f64)> = manifest
        .groups()
        .into_iter()
        .map(|(id, recs)| {
            let mean = recs.iter().map(|r| r.true_viscosity).sum::<f64>() / recs.len() as f64;
            (id.to_string(), mean.log10())
        })
        .collect();
    g.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    g
}

/// Indices (into the viscosity-ordered group list) chosen for holdout.
///
/// Greedy: each round holds out the interior group whose log-viscosity gap to the nearest
/// retained group is largest. Ties go to the group farthest from the extremes and the
/// groups already held out, then to the lowest index. The extremes are never held out.
pub fn select_holdouts(log_eta: &[f64], n_holdout: usize) -> Result<Vec<usize>> {
    let n = log_eta.len();
    if n_holdout > 0 && n_holdout + 2 >= n {
        return Err(DatasetError::TooManyHoldouts {
            requested: n_holdout,
            groups: n,
        });
    }
    const TIE: f64 = 1e-9;
    let mut held = vec![false; n];
    let mut chosen = Vec::with_capacity(n_holdout);
    for _ in 0..n_holdout {
        let mut best: Option<(usize, f64, f64)> = None;
        for c in 1..n - 1 {
            if held[c] {
                continue;
            }
            let gap = (0..n)
                .filter(|&j| j != c && !held[j])
                .map(|j| (log_eta[j] - log_eta[c]).abs())
                .fold(f64::INFINITY, f64::min);
            let spread = (0..n)
                .filter(|&j| held[j] || j == 0 || j == n - 1)
                .map(|j| (log_eta[j] - log_eta[c]).abs())
                .fold(f64::INFINITY, f64::min);
            let better = match best {
                None => true,
                Some((_, bg, bs)) => gap > bg + TIE || (gap > bg - TIE && spread > bs + TIE),
            };
            if better {
                best = Some((c, gap, spread));
            }
        }
        let (c, _, _) = best.expect("an interior group remains");
        held[c] = true;
        chosen.push(c);
    }
    Ok(chosen)
}

/// Holds out whole viscosity groups (see [`select_holdouts`]).
pub fn split_epistemic(manifest: &Manifest, n_holdout: usize) -> Result<(Manifest, Manifest)> {
    let groups = group_log_viscosities(manifest);
    let logs: Vec<f64> = groups.iter().map(|g| g.1).collect();
    let held: BTreeSet<&str> = select_holdouts(&logs, n_holdout)?
        .into_iter()
        .map(|i| groups[i].0.as_str())
        .collect();
    Ok(partition(manifest, |r| held.contains(r.group_id.as_str())))
}

/// Errors if any sample id occurs on both sides.
pub fn check_disjoint(train: &Manifest, test: &Manifest) -> Result<()> {
    let ids: HashSet<&str> = train.records.iter().map(|r| r.sample_id.as_str()).collect();
    match test.records.iter().find(|r| ids.contains(r.sample_id.as_str())) {
        Some(r) => Err(DatasetError::Leakage(r.sample_id.clone())),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn manifest(groups: usize, per: usize) -> Manifest {
        let mut recs = Vec::new();
        for g in 0..groups {
            for k in 0..per {
                recs.push(SampleRecord {
                    sample_id: format!("g{g:02}_s{k}"),
                    true_viscosity: 10f64.powf(-2.0 + g as f64 * 0.1),
                    density: 1000.0,
                    protocol_hash: "0".into(),
                    tensor_path: PathBuf::from(format!("g{g:02}_s{k}.bin")),
                    group_id: format!("g{g:02}"),
                });
            }
        }
        Manifest::new(recs, PathBuf::from(".")).unwrap()
    }

    #[test]
    fn tensor_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor3::new(3, 4, 5, (0..60).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()).unwrap();
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back, t);
        assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_tensor(&p), Err(DatasetError::TruncatedFile(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_tensor(&p), Err(DatasetError::BadMagic(_))));
        let mut ver = bytes.clone();
        ver[4] = 9;
        fs::write(&p, &ver).unwrap();
        assert!(matches!(read_tensor(&p), Err(DatasetError::VersionMismatch { found: 9, .. })));
        let mut long = bytes;
        long.push(0);
        fs::write(&p, &long).unwrap();
        assert!(matches!(read_tensor(&p), Err(DatasetError::ShapeMismatch(_))));
        assert!(Tensor3::new(2, 2, 2, vec![0.0; 7]).is_err());
    }

    #[test]
    fn header_is_little_endian() {
        let t = Tensor3::new(1, 1, 2, vec![1.0, -2.5]).unwrap();
        assert_eq!(
            t.to_bytes(),
            [
                b'V', b'I', b'A', b'L', 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0x80, 0x3f, 0, 0, 0x20,
                0xc0
            ]
        );
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(3, 2);
        m.params.insert("t_obs".into(), "60".into());
        m.root = dir.path().to_path_buf();
        let p = dir.path().join("manifest.tsv");
        m.write(&p).unwrap();
        let back = Manifest::read(&p).unwrap();
        assert_eq!(back, m);
        assert!(Manifest::parse("a\t1\t2\n", PathBuf::new()).is_err());
        let dup = "a\t1\t2\th\tp\tg\na\t1\t2\th\tp\tg\n";
        assert!(Manifest::parse(dup, PathBuf::new()).is_err());
        assert!(Manifest::parse("a\t-1\t2\th\tp\tg\n", PathBuf::new()).is_err());
    }

    #[test]
    fn aleatoric_counts() {
        let m = manifest(96, 10);
        let (train, test) = split_aleatoric(&m, 7).unwrap();
        assert_eq!((train.records.len(), test.records.len()), (768, 192));
        for recs in test.groups().values() {
            assert_eq!(recs.len(), 2);
        }
        assert_eq!(train.groups().len(), 96);
        let (a, b) = split_aleatoric(&manifest(24, 8), 1).unwrap();
        assert_eq!((a.records.len(), b.records.len()), (144, 48));
        assert_eq!(split_aleatoric(&m, 7).unwrap(), (train, test));
        assert!(matches!(
            split_aleatoric(&manifest(2, 1), 0),
            Err(DatasetError::GroupTooSmall { .. })
        ));
    }

    #[test]
    fn aleatoric_seeds_differ() {
        let m = manifest(10, 10);
        assert_ne!(split_aleatoric(&m, 1).unwrap().1, split_aleatoric(&m, 2).unwrap().1);
    }

    #[test]
    fn holdout_examples() {
        assert_eq!(select_holdouts(&[0.0, 1.0, 2.0, 3.0, 4.0], 1).unwrap(), vec![2]);
        assert_eq!(select_holdouts(&[0.0, 1.0, 2.0, 3.0, 4.0], 0).unwrap(), Vec::<usize>::new());
        // An isolated interior point wins on the gap key.
        assert_eq!(select_holdouts(&[0.0, 0.1, 0.2, 2.0, 4.0], 1).unwrap(), vec![3]);
        assert!(select_holdouts(&[0.0, 1.0, 2.0], 2).is_err());
        let even: Vec<f64> = (0..24).map(|i| i as f64).collect();
        assert_eq!(select_holdouts(&even, 4).unwrap(), vec![11, 17, 5, 8]);
    }

    #[test]
    fn holdout_matches_brute_force_single() {
        let logs = [0.0, 0.3, 1.4, 1.5, 2.9, 3.0];
        let brute = (1..5)
            .max_by(|&a, &b| {
                let gap = |c: usize| {
                    (0..6).filter(|&j| j != c).map(|j| (logs[j] - logs[c] as f64).abs()).fold(f64::INFINITY, f64::min)
                };
                gap(a).total_cmp(&gap(b)).then(b.cmp(&a))
            })
            .unwrap();
        assert_eq!(select_holdouts(&logs, 1).unwrap(), vec![brute]);
    }

    #[test]
    fn epistemic_split_holds_out_groups() {
        let m = manifest(96, 10);
        let (train, test) = split_epistemic(&m, 13).unwrap();
        assert_eq!(test.groups().len(), 13);
        assert_eq!(train.groups().len(), 83);
        check_disjoint(&train, &test).unwrap();
        let test_groups: BTreeSet<&str> = test.records.iter().map(|r| r.group_id.as_str()).collect();
        assert!(train.records.iter().all(|r| !test_groups.contains(r.group_id.as_str())));
        assert!(!test_groups.contains("g00") && !test_groups.contains("g95"));
        let (all, none) = split_epistemic(&m, 0).unwrap();
        assert_eq!((all.records.len(), none.records.len()), (960, 0));
        assert!(matches!(split_epistemic(&m, 95), Err(DatasetError::TooManyHoldouts { .. })));
    }

    #[test]
    fn leakage_detected() {
        let m = manifest(2, 3);
        assert!(matches!(check_disjoint(&m, &m), Err(DatasetError::Leakage(_))));
    }

    proptest! {
        #[test]
        fn splits_partition(groups in 2usize..12, per in 2usize..12, seed in 0u64..1000, hold in 0usize..4) {
            let m = manifest(groups, per);
            let (a, b) = split_aleatoric(&m, seed).unwrap();
            prop_assert_eq!(a.records.len() + b.records.len(), m.records.len());
            prop_assert!(check_disjoint(&a, &b).is_ok());
            if hold == 0 || hold + 2 < groups {
                let (a, b) = split_epistemic(&m, hold).unwrap();
                prop_assert_eq!(a.records.len() + b.records.len(), m.records.len());
                prop_assert_eq!(b.groups().len(), hold);
                prop_assert!(check_disjoint(&a, &b).is_ok());
            }
        }

        #[test]
        fn extremes_never_held_out(logs in proptest::collection::vec(-3.0f64..3.0, 3..20), frac in 0.0f64..1.0) {
            let mut logs = logs;
            logs.sort_by(f64::total_cmp);
            let n = ((logs.len() - 2) as f64 * frac) as usize;
            let h = select_holdouts(&logs, n).unwrap();
            prop_assert!(!h.contains(&0) && !h.contains(&(logs.len() - 1)));
            prop_assert_eq!(h.iter().collect::<BTreeSet<_>>().len(), n);
        }
    }
}
