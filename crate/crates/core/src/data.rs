//! Grouped datasets: synthetic spurious-correlation generator, grouped-CSV
//! reader/writer and within-group batch sampling.
//!
//! Grouped-CSV layout (UTF-8, LF):
//!
//! ```text
//! label,group,f0,f1,f2
//! 0,1,0.25,-1.5,3
//! 1,2,-0.75,0.125,0
//! ```
//!
//! A companion `<stem>.manifest` file holds `key = value` lines with `n`, `d`,
//! `classes`, `groups`, `split` and, for generated data, `generator` (JSON of
//! the [`SpuriousSpec`]) and `seed`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parameter(format!("unknown split `{other}`"))),
        }
    }
}

/// Examples partitioned into `num_groups` groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub num_classes: usize,
    pub num_groups: usize,
    pub split: Split,
    group_index: Vec<Vec<usize>>,
}

/// Rows drawn from a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub groups: Vec<usize>,
    pub rows: Vec<usize>,
}

impl GroupedDataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        groups: Vec<usize>,
        num_classes: usize,
        num_groups: usize,
        split: Split,
    ) -> Result<Self> {
        let n = features.rows();
        if features.shape().len() != 2 || labels.len() != n || groups.len() != n {
            return Err(Error::Data(format!(
                "features {:?}, {} labels, {} group ids",
                features.shape(),
                labels.len(),
                groups.len()
            )));
        }
        if num_groups == 0 || num_classes == 0 {
            return Err(Error::Data("dataset needs at least one class and one group".into()));
        }
        let mut group_index = vec![Vec::new(); num_groups];
        for (row, (&y, &g)) in labels.iter().zip(&groups).enumerate() {
            if y >= num_classes {
                return Err(Error::Data(format!(
                    "row {row}: label {y} out of range for {num_classes} classes"
                )));
            }
            if g >= num_groups {
                return Err(Error::Data(format!(
                    "row {row}: group id {g} out of range for {num_groups} groups"
                )));
            }
            group_index[g].push(row);
        }
        Ok(Self {
            features,
            labels,
            groups,
            num_classes,
            num_groups,
            split,
            group_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn group_rows(&self, g: usize) -> &[usize] {
        &self.group_index[g]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.group_index.iter().map(Vec::len).collect()
    }

    /// Errors naming the first empty group.
    pub fn require_nonempty_groups(&self) -> Result<()> {
        match self.group_index.iter().position(Vec::is_empty) {
            Some(g) => Err(Error::Data(format!("group {g} has no examples"))),
            None => Ok(()),
        }
    }

    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        Ok(Batch {
            x: self.features.select_rows(rows)?,
            y: rows.iter().map(|&r| self.labels[r]).collect(),
            groups: rows.iter().map(|&r| self.groups[r]).collect(),
            rows: rows.to_vec(),
        })
    }

    pub fn all(&self) -> Result<Batch> {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.batch(&rows)
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::with_capacity(self.len() * (d + 2) * 12);
        out.push_str("label,group");
        for j in 0..d {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&format!("{},{}", self.labels[i], self.groups[i]));
            for v in self.features.row(i) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Writes `path` and its companion manifest.
    pub fn save(&self, path: &Path, generator: Option<&SpuriousSpec>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        let manifest = DatasetManifest {
            n: self.len(),
            d: self.dim(),
            classes: self.num_classes,
            groups: self.num_groups,
            split: self.split,
            generator: generator.cloned(),
        };
        fs::write(manifest_path(path), manifest.to_text())?;
        Ok(())
    }
}

pub fn manifest_path(csv: &Path) -> PathBuf {
    csv.with_extension("manifest")
}

/// Companion metadata of a grouped-CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub groups: usize,
    pub split: Split,
    pub generator: Option<SpuriousSpec>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "n = {}\nd = {}\nclasses = {}\ngroups = {}\nsplit = {}\n",
            self.n, self.d, self.classes, self.groups, self.split
        );
        if let Some(g) = &self.generator {
            s.push_str(&format!(
                "generator = {}\nseed = {}\nnull_attribute = {}\n",
                serde_json::to_string(g).expect("spec serializes"),
                g.seed,
                g.spurious_strength == 0.0
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| {
            kv.get(k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::parse(0, format!("manifest missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            let (line, v) = kv
                .get(k)
                .ok_or_else(|| Error::parse(0, format!("manifest missing `{k}`")))?;
            v.parse()
                .map_err(|_| Error::parse(*line, format!("`{k}` is not an integer: `{v}`")))
        };
        let generator = match kv.get("generator") {
            Some((line, v)) => Some(
                serde_json::from_str(v)
                    .map_err(|e| Error::parse(*line, format!("bad generator spec: {e}")))?,
            ),
            None => None,
        };
        Ok(Self {
            n: num("n")?,
            d: num("d")?,
            classes: num("classes")?,
            groups: num("groups")?,
            split: get("split")?.parse()?,
            generator,
        })
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
/// Returns each key with its 1-based line number.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(i + 1, format!("expected `key = value`, got `{line}`")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::parse(i + 1, "empty key"));
        }
        if out
            .insert(k.to_string(), (i + 1, v.trim().to_string()))
            .is_some()
        {
            return Err(Error::parse(i + 1, format!("duplicate key `{k}`")));
        }
    }
    Ok(out)
}

/// Class and group counts a file must respect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arity {
    pub classes: usize,
    pub groups: usize,
}

/// Parses grouped-CSV text. Without `arity`, class and group counts are
/// inferred from the largest ids present.
pub fn parse_grouped_csv(text: &str, arity: Option<Arity>, split: Split) -> Result<GroupedDataset> {
    let mut lines = text.split('\n').enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim_end_matches('\r').is_empty() => continue,
            Some((i, l)) => break (i + 1, l.trim_end_matches('\r')),
            None => return Err(Error::parse(1, "empty file")),
        }
    };
    let cols: Vec<&str> = header.1.split(',').collect();
    if cols.len() < 3 || cols[0] != "label" || cols[1] != "group" {
        return Err(Error::parse(header.0, "header must be `label,group,f0,...`"));
    }
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::parse(header.0, format!("expected column `f{j}`, got `{c}`")));
        }
    }
    let d = cols.len() - 2;

    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut feats = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(Error::parse(
                line_no,
                format!("expected {} fields, got {}", d + 2, fields.len()),
            ));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad label `{}`", fields[0])))?;
        let group: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad group `{}`", fields[1])))?;
        if let Some(a) = arity {
            if label >= a.classes {
                return Err(Error::Data(format!(
                    "line {line_no}: label {label} out of range for {} classes",
                    a.classes
                )));
            }
            if group >= a.groups {
                return Err(Error::Data(format!(
                    "line {line_no}: group id {group} out of range for {} groups",
                    a.groups
                )));
            }
        }
        for f in &fields[2..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad feature `{f}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(line_no, format!("non-finite feature `{f}`")));
            }
            feats.push(v);
        }
        labels.push(label);
        groups.push(group);
    }
    if labels.is_empty() {
        return Err(Error::parse(header.0 + 1, "no examples"));
    }
    let arity = arity.unwrap_or(Arity {
        classes: labels.iter().max().map_or(2, |&m| (m + 1).max(2)),
        groups: groups.iter().max().map_or(1, |&m| m + 1),
    });
    let n = labels.len();
    GroupedDataset::new(
        Tensor::new(vec![n, d], feats)?,
        labels,
        groups,
        arity.classes,
        arity.groups,
        split,
    )
}

/// Reads a grouped-CSV file, honouring its companion manifest when present.
pub fn load(path: &Path) -> Result<GroupedDataset> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mpath = manifest_path(path);
    if mpath.exists() {
        let manifest = DatasetManifest::parse(&fs::read_to_string(&mpath)?)?;
        let ds = parse_grouped_csv(
            &text,
            Some(Arity {
                classes: manifest.classes,
                groups: manifest.groups,
            }),
            manifest.split,
        )?;
        if ds.len() != manifest.n || ds.dim() != manifest.d {
            return Err(Error::Data(format!(
                "{}: manifest says {}x{}, file has {}x{}",
                path.display(),
                manifest.n,
                manifest.d,
                ds.len(),
                ds.dim()
            )));
        }
        Ok(ds)
    } else {
        let split = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok())
            .unwrap_or(Split::Train);
        parse_grouped_csv(&text, None, split)
    }
}

/// Uniform with-replacement draw of `n` rows, optionally from one group.
pub fn sample_batch(
    ds: &GroupedDataset,
    rng: &mut RngState,
    n: usize,
    restrict_to_group: Option<usize>,
) -> Result<Batch> {
    let rows = sample_rows(ds, rng, n, restrict_to_group)?;
    ds.batch(&rows)
}

pub fn sample_rows(
    ds: &GroupedDataset,
    rng: &mut RngState,
    n: usize,
    restrict_to_group: Option<usize>,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    match restrict_to_group {
        Some(g) => {
            if g >= ds.num_groups {
                return Err(Error::Data(format!(
                    "group {g} out of range for {} groups",
                    ds.num_groups
                )));
            }
            let pool = &ds.group_index[g];
            if pool.is_empty() {
                return Err(Error::Data(format!("group {g} has no examples")));
            }
            Ok((0..n).map(|_| pool[rng.index(pool.len())]).collect())
        }
        None => {
            if ds.is_empty() {
                return Err(Error::Data("dataset is empty".into()));
            }
            Ok((0..n).map(|_| rng.index(ds.len())).collect())
        }
    }
}

/// Group id of label `y` with binary attribute `a`.
pub fn encode_group(y: usize, a: usize) -> usize {
    2 * y + a
}

pub fn decode_group(g: usize) -> (usize, usize) {
    (g / 2, g % 2)
}

/// Recipe for a four-group spurious-correlation dataset. Group order follows
/// `encode_group`: (y0,a0), (y0,a1), (y1,a0), (y1,a1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousSpec {
    pub train_sizes: [usize; 4],
    pub val_sizes: [usize; 4],
    pub test_sizes: [usize; 4],
    pub core_dims: usize,
    pub spurious_dims: usize,
    pub noise_dims: usize,
    pub core_strength: f64,
    pub spurious_strength: f64,
    pub seed: u64,
}

/// Training group sizes of the bird/background benchmark.
pub const WATERBIRDS_TRAIN: [usize; 4] = [3498, 184, 56, 1057];
/// Smallest group of its validation split, used for every group.
pub const WATERBIRDS_VAL_BALANCED: usize = 133;
/// Smallest group of its test split, used for every group.
pub const WATERBIRDS_TEST_BALANCED: usize = 642;

/// Rounds `count * scale` to the nearest integer, keeping at least one row.
pub fn scale_count(count: usize, scale: f64) -> usize {
    ((count as f64 * scale).round() as usize).max(1)
}

impl SpuriousSpec {
    /// Unbalanced training split with the benchmark's group proportions and
    /// balanced validation/test splits, all scaled by `scale`.
    pub fn waterbirds_analog(scale: f64, seed: u64) -> Self {
        let s = |c| scale_count(c, scale);
        Self {
            train_sizes: WATERBIRDS_TRAIN.map(s),
            val_sizes: [s(WATERBIRDS_VAL_BALANCED); 4],
            test_sizes: [s(WATERBIRDS_TEST_BALANCED); 4],
            core_dims: 2,
            spurious_dims: 2,
            noise_dims: 6,
            core_strength: 1.5,
            spurious_strength: 3.0,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.core_dims + self.spurious_dims + self.noise_dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.core_dims == 0 {
            return Err(Error::Parameter("core_dims must be at least 1".into()));
        }
        for (name, sizes) in [
            ("train", &self.train_sizes),
            ("val", &self.val_sizes),
            ("test", &self.test_sizes),
        ] {
            if sizes.contains(&0) {
                return Err(Error::Parameter(format!(
                    "{name} group sizes must be positive, got {sizes:?}"
                )));
            }
        }
        for (name, v) in [
            ("core_strength", self.core_strength),
            ("spurious_strength", self.spurious_strength),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Generated train/val/test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub test: GroupedDataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &GroupedDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn generate_split(spec: &SpuriousSpec, split: Split, sizes: &[usize; 4]) -> Result<GroupedDataset> {
    let mut rng = RngState::derived(spec.seed, &format!("data/{split}"));
    let d = spec.dim();
    let core_unit = spec.core_strength / (spec.core_dims as f64).sqrt();
    let sp_unit = if spec.spurious_dims > 0 {
        spec.spurious_strength / (spec.spurious_dims as f64).sqrt()
    } else {
        0.0
    };
    let n: usize = sizes.iter().sum();
    let mut feats = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for (g, &count) in sizes.iter().enumerate() {
        let (y, a) = decode_group(g);
        let ys = if y == 1 { 1.0 } else { -1.0 };
        let as_ = if a == 1 { 1.0 } else { -1.0 };
        for _ in 0..count {
            for _ in 0..spec.core_dims {
                feats.push(core_unit * ys + rng.standard_normal());
            }
            for _ in 0..spec.spurious_dims {
                feats.push(sp_unit * as_ + rng.standard_normal());
            }
            for _ in 0..spec.noise_dims {
                feats.push(rng.standard_normal());
            }
            labels.push(y);
            groups.push(g);
        }
    }
    GroupedDataset::new(Tensor::new(vec![n, d], feats)?, labels, groups, 2, 4, split)
}

/// Draws all three splits. Each split has its own stream derived from the seed.
pub fn generate(spec: &SpuriousSpec) -> Result<Splits> {
    spec.validate()?;
    Ok(Splits {
        train: generate_split(spec, Split::Train, &spec.train_sizes)?,
        val: generate_split(spec, Split::Val, &spec.val_sizes)?,
        test: generate_split(spec, Split::Test, &spec.test_sizes)?,
    })
}
