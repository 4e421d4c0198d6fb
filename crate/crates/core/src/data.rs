//! Dataset enumeration, stratified splitting, label-fraction subsampling and image decoding.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageReader};
use log::warn;
use ndarray::Array3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// The four diagnostic categories. Index order is the classifier output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CxrClass {
    Covid,
    LungOpacity,
    Normal,
    ViralPneumonia,
}

impl CxrClass {
    pub const ALL: [CxrClass; 4] = [CxrClass::Covid, CxrClass::LungOpacity, CxrClass::Normal, CxrClass::ViralPneumonia];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<CxrClass> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CxrClass::Covid => "COVID",
            CxrClass::LungOpacity => "LungOpacity",
            CxrClass::Normal => "Normal",
            CxrClass::ViralPneumonia => "ViralPneumonia",
        }
    }
}

impl fmt::Display for CxrClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CxrClass {
    type Err = Error;

    /// Case, spaces, dashes and underscores are ignored, so `Lung_Opacity`
    /// and `Viral Pneumonia` both resolve.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "covid" | "covid19" => Ok(CxrClass::Covid),
            "lungopacity" => Ok(CxrClass::LungOpacity),
            "normal" => Ok(CxrClass::Normal),
            "viralpneumonia" => Ok(CxrClass::ViralPneumonia),
            _ => Err(Error::Data(format!("unknown class `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Unassigned,
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Unassigned => "unassigned",
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unassigned" | "" => Ok(Split::Unassigned),
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub class_label: CxrClass,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub seed: u64,
    /// Fraction of the training split retained; 1.0 means all of it.
    pub fraction: f64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest { records: Vec::new(), seed: 0, fraction: 1.0 }
    }
}

/// A file that was found under a class directory but not enumerated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ScanReport {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
    pub skipped: Vec<SkippedFile>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn is_hidden(path: &Path) -> bool {
    path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'))
}

/// Enumerates `<root>/<Class>/*.png`, also accepting `<root>/<Class>/images/*.png`.
///
/// Unknown directories and empty classes produce warnings; unreadable files
/// land in the skip report. A missing root is an error.
pub fn scan_dataset(root: &Path) -> Result<ScanReport> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut report = ScanReport::default();
    for class_dir in read_dir_sorted(root)? {
        if !class_dir.is_dir() || is_hidden(&class_dir) {
            continue;
        }
        let dir_name = class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let Ok(class) = dir_name.parse::<CxrClass>() else {
            report.warnings.push(format!("ignoring directory {} (not a known class)", class_dir.display()));
            continue;
        };
        let nested = class_dir.join("images");
        let image_dir = if nested.is_dir() { nested } else { class_dir.clone() };
        let before = report.manifest.records.len();
        for path in read_dir_sorted(&image_dir)? {
            if path.is_dir() || is_hidden(&path) {
                continue;
            }
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !ext.as_deref().is_some_and(|e| IMAGE_EXTENSIONS.contains(&e)) {
                report.skipped.push(SkippedFile { path, reason: "not an image file".into() });
                continue;
            }
            match probe(&path) {
                Ok(()) => report.manifest.records.push(SampleRecord { path, class_label: class, split: Split::Unassigned }),
                Err(e) => report.skipped.push(SkippedFile { path, reason: e.to_string() }),
            }
        }
        if report.manifest.records.len() == before {
            report.warnings.push(format!("class directory {} contains no usable images", class_dir.display()));
        }
    }
    if report.manifest.records.is_empty() {
        report.warnings.push(format!("no images found under {}", root.display()));
    }
    report.manifest.records.sort_by(|a, b| a.path.cmp(&b.path));
    for w in &report.warnings {
        warn!("{w}");
    }
    Ok(report)
}

fn probe(path: &Path) -> Result<()> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.into_dimensions().map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    Ok(())
}

/// `floor(ratio * n)` per class, then one extra for classes with a fractional
/// remainder, visited in seeded order, until the overall `floor(ratio * N)` is met.
fn stratified_counts(class_sizes: &BTreeMap<CxrClass, usize>, ratio: f64, rng: &mut impl rand::Rng) -> BTreeMap<CxrClass, usize> {
    const EPS: f64 = 1e-9;
    let total: usize = class_sizes.values().sum();
    let target = (ratio * total as f64 + EPS).floor() as usize;
    let mut counts: BTreeMap<CxrClass, usize> = class_sizes
        .iter()
        .map(|(&c, &n)| (c, ((ratio * n as f64 + EPS).floor() as usize).min(n)))
        .collect();
    let mut order: Vec<CxrClass> = class_sizes
        .iter()
        .filter(|(c, &n)| {
            let exact = ratio * n as f64;
            exact - counts[*c] as f64 > EPS && counts[*c] < n
        })
        .map(|(&c, _)| c)
        .collect();
    order.shuffle(rng);
    let mut missing = target.saturating_sub(counts.values().sum());
    for c in order {
        if missing == 0 {
            break;
        }
        *counts.get_mut(&c).unwrap() += 1;
        missing -= 1;
    }
    counts
}

/// Records of each class, sorted by path so that input order never matters.
fn by_class<'a>(records: impl Iterator<Item = &'a SampleRecord>) -> BTreeMap<CxrClass, Vec<&'a SampleRecord>> {
    let mut groups: BTreeMap<CxrClass, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.class_label).or_default().push(r);
    }
    for g in groups.values_mut() {
        g.sort_by(|a, b| a.path.cmp(&b.path));
    }
    groups
}

fn check_unique(manifest: &DatasetManifest) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in &manifest.records {
        if !seen.insert(&r.path) {
            return Err(Error::Data(format!("duplicate path {}", r.path.display())));
        }
    }
    Ok(())
}

/// Stratified train/test assignment. Depends only on the path set and `seed`.
pub fn split(manifest: &DatasetManifest, train_ratio: f64, seed: u64) -> Result<DatasetManifest> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("train ratio {train_ratio} must lie in (0, 1)")));
    }
    check_unique(manifest)?;
    let groups = by_class(manifest.records.iter());
    if let Some((c, g)) = groups.iter().find(|(_, g)| g.len() < 2) {
        return Err(Error::Data(format!("class {c} has {} sample(s); at least 2 are needed to stratify", g.len())));
    }
    let sizes = groups.iter().map(|(&c, g)| (c, g.len())).collect();
    let counts = stratified_counts(&sizes, train_ratio, &mut seed::rng(seed, &[stream::SPLIT]));
    let mut records = Vec::with_capacity(manifest.records.len());
    for (class, group) in &groups {
        let mut order: Vec<&SampleRecord> = group.clone();
        order.shuffle(&mut seed::rng(seed, &[stream::SPLIT, 1 + class.index() as u64]));
        for (i, r) in order.into_iter().enumerate() {
            let split = if i < counts[class] { Split::Train } else { Split::Test };
            records.push(SampleRecord { split, ..r.clone() });
        }
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(DatasetManifest { records, seed, fraction: 1.0 })
}

/// Keeps a stratified `fraction` of the training split; test records pass through untouched.
pub fn stratified_subsample(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} must lie in (0, 1]")));
    }
    check_unique(manifest)?;
    let groups = by_class(manifest.records.iter().filter(|r| r.split == Split::Train));
    if groups.is_empty() {
        return Err(Error::Data("manifest has no training split to subsample".into()));
    }
    let sizes = groups.iter().map(|(&c, g)| (c, g.len())).collect();
    let counts = stratified_counts(&sizes, fraction, &mut seed::rng(seed, &[stream::SUBSAMPLE]));
    if let Some((c, _)) = counts.iter().find(|(_, &k)| k == 0) {
        return Err(Error::Data(format!(
            "fraction {fraction} leaves class {c} with no samples ({} available)",
            sizes[c]
        )));
    }
    let mut records: Vec<SampleRecord> = manifest.records.iter().filter(|r| r.split != Split::Train).cloned().collect();
    for (class, group) in &groups {
        let mut order = group.clone();
        order.shuffle(&mut seed::rng(seed, &[stream::SUBSAMPLE, 1 + class.index() as u64]));
        records.extend(order.into_iter().take(counts[class]).cloned());
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(DatasetManifest { records, seed: manifest.seed, fraction: manifest.fraction * fraction })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.records_in(split).count()
    }

    pub fn class_counts(&self, split: Split) -> [usize; CxrClass::COUNT] {
        let mut counts = [0; CxrClass::COUNT];
        for r in self.records_in(split) {
            counts[r.class_label.index()] += 1;
        }
        counts
    }

    /// Training images with labels removed, for the self-supervised stage.
    pub fn unlabeled_train(&self) -> UnlabeledSet {
        UnlabeledSet { paths: self.records_in(Split::Train).map(|r| r.path.clone()).collect() }
    }

    /// Writes `path<TAB>class<TAB>split` lines preceded by `#` metadata lines.
    pub fn to_tsv(&self) -> Result<String> {
        let mut out = format!("# seed\t{}\n# fraction\t{}\n", self.seed, self.fraction);
        for r in &self.records {
            let p = r.path.to_str().ok_or_else(|| Error::Data(format!("path {} is not UTF-8", r.path.display())))?;
            if p.contains(['\t', '\n', '\r']) {
                return Err(Error::Data(format!("path {p:?} contains a tab or newline")));
            }
            out.push_str(&format!("{p}\t{}\t{}\n", r.class_label, r.split.name()));
        }
        Ok(out)
    }

    pub fn from_tsv(text: &str) -> Result<DatasetManifest> {
        let mut manifest = DatasetManifest::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let mut parts = meta.trim().splitn(2, '\t');
                let bad = || Error::Data(format!("line {}: malformed metadata `{line}`", lineno + 1));
                match (parts.next(), parts.next()) {
                    (Some("seed"), Some(v)) => manifest.seed = v.trim().parse().map_err(|_| bad())?,
                    (Some("fraction"), Some(v)) => manifest.fraction = v.trim().parse().map_err(|_| bad())?,
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Data(format!("line {}: expected 3 tab-separated fields, found {}", lineno + 1, fields.len())));
            }
            manifest.records.push(SampleRecord {
                path: PathBuf::from(fields[0]),
                class_label: fields[1].parse()?,
                split: fields[2].parse()?,
            });
        }
        check_unique(&manifest)?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        DatasetManifest::from_tsv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Image paths without class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlabeledSet {
    pub paths: Vec<PathBuf>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Fails if any path occurs in both sets.
pub fn check_disjoint<'a>(train: impl IntoIterator<Item = &'a Path>, test: impl IntoIterator<Item = &'a Path>) -> Result<()> {
    let test: BTreeSet<&Path> = test.into_iter().collect();
    for p in train {
        if test.contains(p) {
            return Err(Error::Data(format!("{} appears in both the training and the test split", p.display())));
        }
    }
    Ok(())
}

/// Decodes an 8-bit image into `channels x H x W` values in `[0, 1]`.
/// Colour input is reduced to luma first, then replicated.
pub fn load_image(path: &Path, channels: usize) -> Result<Array3<f32>> {
    if channels == 0 {
        return Err(Error::InvalidArgument("channel count must be positive".into()));
    }
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => img.to_luma8(),
        other => {
            return Err(Error::Data(format!(
                "{}: unsupported pixel format {:?}; expected 8 bits per channel",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = gray.into_raw();
    Ok(Array3::from_shape_fn((channels, h, w), |(_, i, j)| raw[i * w + j] as f32 / 255.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn synthetic(counts: &[(CxrClass, usize)]) -> DatasetManifest {
        let records = counts
            .iter()
            .flat_map(|&(c, n)| {
                (0..n).map(move |i| SampleRecord {
                    path: PathBuf::from(format!("{}/{i:05}.png", c.name())),
                    class_label: c,
                    split: Split::Unassigned,
                })
            })
            .collect();
        DatasetManifest { records, ..Default::default() }
    }

    #[test]
    fn class_names_parse_leniently() {
        assert_eq!("Lung_Opacity".parse::<CxrClass>().unwrap(), CxrClass::LungOpacity);
        assert_eq!("Viral Pneumonia".parse::<CxrClass>().unwrap(), CxrClass::ViralPneumonia);
        assert_eq!("COVID".parse::<CxrClass>().unwrap(), CxrClass::Covid);
        assert!("Tuberculosis".parse::<CxrClass>().is_err());
        for c in CxrClass::ALL {
            assert_eq!(c.name().parse::<CxrClass>().unwrap(), c);
            assert_eq!(CxrClass::from_index(c.index()), Some(c));
        }
    }

    #[test]
    fn single_class_ten_records() {
        let m = split(&synthetic(&[(CxrClass::Normal, 10)]), 0.8, 3).unwrap();
        assert_eq!((m.count(Split::Train), m.count(Split::Test)), (8, 2));
    }

    #[test]
    fn split_rejects_tiny_class_and_bad_ratio() {
        let m = synthetic(&[(CxrClass::Normal, 10), (CxrClass::Covid, 1)]);
        assert!(split(&m, 0.8, 0).is_err());
        let m = synthetic(&[(CxrClass::Normal, 10)]);
        assert!(split(&m, 0.0, 0).is_err());
        assert!(split(&m, 1.0, 0).is_err());
    }

    #[test]
    fn split_ignores_record_order() {
        let m = synthetic(&[(CxrClass::Normal, 37), (CxrClass::Covid, 11), (CxrClass::ViralPneumonia, 5)]);
        let mut reversed = m.clone();
        reversed.records.reverse();
        assert_eq!(split(&m, 0.7, 9).unwrap(), split(&reversed, 0.7, 9).unwrap());
        assert_ne!(split(&m, 0.7, 9).unwrap(), split(&m, 0.7, 10).unwrap());
    }

    #[test]
    fn subsample_hundred_at_ten_percent() {
        let m = split(&synthetic(&[(CxrClass::Normal, 125)]), 0.8, 0).unwrap();
        let s = stratified_subsample(&m, 0.1, 1).unwrap();
        assert_eq!(s.count(Split::Train), 10);
        assert_eq!(s.count(Split::Test), 25);
    }

    #[test]
    fn subsample_names_starved_class() {
        let m = split(&synthetic(&[(CxrClass::Normal, 500), (CxrClass::ViralPneumonia, 20)]), 0.5, 0).unwrap();
        let err = stratified_subsample(&m, 0.01, 0).unwrap_err().to_string();
        assert!(err.contains("ViralPneumonia"), "{err}");
    }

    #[test]
    fn subsample_is_a_subset_and_keeps_test() {
        let m = split(&synthetic(&[(CxrClass::Normal, 60), (CxrClass::Covid, 40)]), 0.8, 4).unwrap();
        let s = stratified_subsample(&m, 0.25, 4).unwrap();
        let train: BTreeSet<_> = m.records_in(Split::Train).map(|r| &r.path).collect();
        assert!(s.records_in(Split::Train).all(|r| train.contains(&r.path)));
        assert_eq!(s.count(Split::Test), m.count(Split::Test));
        assert_eq!(s, stratified_subsample(&m, 0.25, 4).unwrap());
    }

    #[test]
    fn tsv_round_trip() {
        let m = split(&synthetic(&[(CxrClass::Normal, 6), (CxrClass::LungOpacity, 4)]), 0.5, 2).unwrap();
        let text = m.to_tsv().unwrap();
        assert!(text.lines().nth(2).unwrap().split('\t').count() == 3);
        assert_eq!(DatasetManifest::from_tsv(&text).unwrap(), m);
        assert!(DatasetManifest::from_tsv("a.png\tNormal\n").is_err());
        assert!(DatasetManifest::from_tsv("a.png\tNormal\ttrain\na.png\tNormal\ttest\n").is_err());
    }

    #[test]
    fn disjointness_check() {
        let a = [Path::new("x.png"), Path::new("y.png")];
        assert!(check_disjoint(a, [Path::new("z.png")]).is_ok());
        assert!(check_disjoint(a, [Path::new("y.png")]).is_err());
    }

    #[test]
    fn unlabeled_view_lists_train_paths_only() {
        let m = split(&synthetic(&[(CxrClass::Normal, 10)]), 0.8, 0).unwrap();
        let u = m.unlabeled_train();
        assert_eq!(u.len(), 8);
        let test: BTreeSet<_> = m.records_in(Split::Test).map(|r| r.path.clone()).collect();
        assert!(u.paths.iter().all(|p| !test.contains(p)));
    }

    proptest! {
        #[test]
        fn split_partitions_and_stratifies(
            sizes in prop::collection::vec(2usize..80, 1..=4),
            ratio in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            let counts: Vec<_> = CxrClass::ALL.iter().copied().zip(sizes).collect();
            let m = synthetic(&counts);
            let s = split(&m, ratio, seed).unwrap();
            prop_assert_eq!(s.len(), m.len());
            prop_assert_eq!(s.count(Split::Unassigned), 0);
            let total = m.len() as f64;
            prop_assert_eq!(s.count(Split::Train), (ratio * total + 1e-9).floor() as usize);
            for (c, n) in &counts {
                let k = s.records_in(Split::Train).filter(|r| r.class_label == *c).count();
                prop_assert!((k as f64 / *n as f64 - ratio).abs() <= 1.0 / *n as f64);
            }
            prop_assert_eq!(split(&s, ratio, seed).unwrap(), s);
        }

        #[test]
        fn subsample_stratifies(
            sizes in prop::collection::vec(20usize..300, 1..=4),
            fraction in 0.05f64..=1.0,
            seed in any::<u64>(),
        ) {
            let counts: Vec<_> = CxrClass::ALL.iter().copied().zip(sizes).collect();
            let m = split(&synthetic(&counts), 0.8, seed).unwrap();
            let train = m.class_counts(Split::Train);
            let s = stratified_subsample(&m, fraction, seed).unwrap();
            let kept = s.class_counts(Split::Train);
            for c in 0..CxrClass::COUNT {
                if train[c] > 0 {
                    prop_assert!((kept[c] as f64 / train[c] as f64 - fraction).abs() <= 1.0 / train[c] as f64);
                }
            }
        }
    }
}
