//! Synthetic multi-label corpora with known class priors, SCAR label
//! erasure, and the line-delimited dataset file format.
//!
//! Features are an additive prototype mixture: each class owns an
//! orthogonal direction, a sample's features are the sum of its positive
//! classes' prototypes plus isotropic Gaussian noise. Labels are erased
//! independently per (sample, class), so observed positives are an
//! unbiased subsample of true positives, exactly the assumption the risk
//! estimators rely on.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Everything `generate` needs. Output is a pure function of this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n: usize,
    pub d_in: usize,
    pub k: usize,
    /// True class priors, one per class.
    pub pi_true: Vec<f64>,
    /// Per-class erasure rate: the probability a true positive loses its label.
    pub erasure: Vec<f64>,
    /// Scale of the class prototype directions.
    pub separation: f64,
    /// Standard deviation of the isotropic feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Usage("n must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Usage("k must be >= 1".into()));
        }
        if self.d_in < self.k {
            return Err(Error::Usage(format!(
                "d_in {} < K {}: prototypes cannot be made orthogonal",
                self.d_in, self.k
            )));
        }
        if self.pi_true.len() != self.k || self.erasure.len() != self.k {
            return Err(Error::Usage(format!(
                "pi_true and erasure must each have K={} entries",
                self.k
            )));
        }
        if self.pi_true.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::Usage("every pi_true must lie in (0,1)".into()));
        }
        if self.erasure.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::Usage("every erasure rate must lie in [0,1]".into()));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::Usage("separation must be finite and >= 0".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Usage("noise must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Line-1 metadata of the dataset file; the generation parameters that fix
/// the labeling semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub n: usize,
    pub d_in: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub pi_true: Vec<f64>,
    pub erasure: Vec<f64>,
    pub seed: u64,
}

/// Features with observed PU labels `s` and, optionally, the true labels
/// `y`. Label matrices are row-major n x K with entries in {-1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct PuDataset {
    pub meta: DatasetMeta,
    pub features: Vec<f64>,
    pub observed: Vec<i8>,
    pub truth: Option<Vec<i8>>,
}

impl PuDataset {
    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn d_in(&self) -> usize {
        self.meta.d_in
    }

    pub fn k(&self) -> usize {
        self.meta.k
    }

    pub fn features_row(&self, j: usize) -> &[f64] {
        &self.features[j * self.meta.d_in..(j + 1) * self.meta.d_in]
    }

    pub fn observed_row(&self, j: usize) -> &[i8] {
        &self.observed[j * self.meta.k..(j + 1) * self.meta.k]
    }

    pub fn truth_row(&self, j: usize) -> Option<&[i8]> {
        self.truth
            .as_ref()
            .map(|t| &t[j * self.meta.k..(j + 1) * self.meta.k])
    }

    /// Drops the true labels (models a file delivered without them).
    pub fn without_truth(mut self) -> PuDataset {
        self.truth = None;
        self
    }
}

/// One seed, a distinct ChaCha stream per role, so independent consumers
/// never share a sequence. Generation uses stream 1+j for sample j and
/// 1+n+i for class i's erasure; samples could therefore be drawn in
/// parallel without changing the output. Training hangs its own streams off
/// the training seed the same way.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Class prototypes are drawn from this fixed seed, not from `GenSpec::seed`,
/// so two datasets that differ only in seed describe the same underlying
/// classes. That is what lets one seed serve as a held-out evaluation set for
/// a model trained on another.
const PROTOTYPE_SEED: u64 = 0x70726f746f;

/// Erases each true positive independently with probability `rate`;
/// negatives pass through. Returns the observed column.
pub fn erase_labels<R: Rng>(truth_col: &[i8], rate: f64, rng: &mut R) -> Vec<i8> {
    assert!((0.0..=1.0).contains(&rate), "erasure rate {rate} outside [0,1]");
    truth_col
        .iter()
        .map(|&y| {
            if y == 1 && rng.gen::<f64>() >= rate {
                1
            } else {
                -1
            }
        })
        .collect()
}

/// Draws the dataset described by `spec`: orthogonal prototypes, prototype
/// mixture features, independent per-class SCAR erasure.
pub fn generate(spec: &GenSpec) -> Result<PuDataset> {
    spec.validate()?;
    let (n, d, k) = (spec.n, spec.d_in, spec.k);

    let mut proto_rng = stream_rng(PROTOTYPE_SEED, (d * 31 + k) as u64);
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| proto_rng.sample(StandardNormal)).collect();
        for p in &protos {
            let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(p) {
                *vi -= dot * pi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return Err(Error::Domain("degenerate prototype draw (collinear)".into()));
        }
        for vi in &mut v {
            *vi /= norm;
        }
        protos.push(v);
    }

    let mut features = vec![0.0; n * d];
    let mut truth = vec![-1i8; n * k];
    for j in 0..n {
        let mut rng = stream_rng(spec.seed, 1 + j as u64);
        for i in 0..k {
            if rng.gen::<f64>() < spec.pi_true[i] {
                truth[j * k + i] = 1;
            }
        }
        let row = &mut features[j * d..(j + 1) * d];
        for i in 0..k {
            if truth[j * k + i] == 1 {
                for (rx, px) in row.iter_mut().zip(&protos[i]) {
                    *rx += spec.separation * px;
                }
            }
        }
        for rx in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *rx += spec.noise * z;
        }
    }

    let mut observed = vec![-1i8; n * k];
    for i in 0..k {
        let mut rng = stream_rng(spec.seed, 1 + n as u64 + i as u64);
        let col: Vec<i8> = (0..n).map(|j| truth[j * k + i]).collect();
        let obs = erase_labels(&col, spec.erasure[i], &mut rng);
        for (j, &o) in obs.iter().enumerate() {
            observed[j * k + i] = o;
        }
    }

    Ok(PuDataset {
        meta: DatasetMeta {
            format_version: FORMAT_VERSION,
            n,
            d_in: d,
            k,
            pi_true: spec.pi_true.clone(),
            erasure: spec.erasure.clone(),
            seed: spec.seed,
        },
        features,
        observed,
        truth: Some(truth),
    })
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: usize,
    x: Vec<f64>,
    s: Vec<i8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    y: Option<Vec<i8>>,
}

/// Writes the whole file to a temp sibling and renames it into place, so a
/// failed write never leaves a partial dataset at `path`.
pub fn write_dataset(ds: &PuDataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    serde_json::to_writer(&mut buf, &ds.meta)?;
    buf.push(b'\n');
    for j in 0..ds.n() {
        let rec = Record {
            id: j,
            x: ds.features_row(j).to_vec(),
            s: ds.observed_row(j).to_vec(),
            y: ds.truth_row(j).map(|r| r.to_vec()),
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn check_pm_one(name: &str, vals: &[i8], line: usize) -> Result<()> {
    if vals.iter().any(|&v| v != 1 && v != -1) {
        return Err(Error::Schema(format!(
            "line {line}: {name} entries must be -1 or +1"
        )));
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<PuDataset> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Usage(format!("cannot open dataset {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();

    let meta_line = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file, expected metadata object".into(),
    })??;
    let meta: DatasetMeta = serde_json::from_str(&meta_line).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "format_version {} unsupported (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    if meta.n == 0 || meta.d_in == 0 || meta.k == 0 {
        return Err(Error::Schema("metadata n, d_in, K must all be >= 1".into()));
    }
    if meta.pi_true.len() != meta.k || meta.erasure.len() != meta.k {
        return Err(Error::Schema(format!(
            "metadata pi_true/erasure must have K={} entries",
            meta.k
        )));
    }

    let mut features = Vec::with_capacity(meta.n * meta.d_in);
    let mut observed = Vec::with_capacity(meta.n * meta.k);
    let mut truth: Option<Vec<i8>> = None;
    let mut count = 0usize;
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if count == meta.n {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("more than the {} records announced in metadata", meta.n),
            });
        }
        if rec.id != count {
            return Err(Error::Schema(format!(
                "line {lineno}: record id {} out of order (expected {count})",
                rec.id
            )));
        }
        if rec.x.len() != meta.d_in {
            return Err(Error::Schema(format!(
                "line {lineno}: x has {} entries, metadata says d_in={}",
                rec.x.len(),
                meta.d_in
            )));
        }
        if rec.s.len() != meta.k {
            return Err(Error::Schema(format!(
                "line {lineno}: s has {} entries, metadata says K={}",
                rec.s.len(),
                meta.k
            )));
        }
        check_pm_one("s", &rec.s, lineno)?;
        match (&mut truth, &rec.y) {
            (slot @ None, Some(y)) if count == 0 => {
                check_pm_one("y", y, lineno)?;
                if y.len() != meta.k {
                    return Err(Error::Schema(format!(
                        "line {lineno}: y has {} entries, metadata says K={}",
                        y.len(),
                        meta.k
                    )));
                }
                let mut t = Vec::with_capacity(meta.n * meta.k);
                t.extend_from_slice(y);
                *slot = Some(t);
            }
            (Some(t), Some(y)) => {
                check_pm_one("y", y, lineno)?;
                if y.len() != meta.k {
                    return Err(Error::Schema(format!(
                        "line {lineno}: y has {} entries, metadata says K={}",
                        y.len(),
                        meta.k
                    )));
                }
                t.extend_from_slice(y);
            }
            (None, None) => {}
            _ => {
                return Err(Error::Schema(format!(
                    "line {lineno}: truth column y present on some records but not all"
                )));
            }
        }
        if let Some(y) = &rec.y {
            for (i, (&s, &yv)) in rec.s.iter().zip(y).enumerate() {
                if s == 1 && yv != 1 {
                    return Err(Error::Schema(format!(
                        "line {lineno}: class {}: observed positive without true positive",
                        i + 1
                    )));
                }
            }
        }
        features.extend_from_slice(&rec.x);
        observed.extend_from_slice(&rec.s);
        count += 1;
    }
    if count != meta.n {
        return Err(Error::Parse {
            line: count + 2,
            msg: format!("expected {} records, found {count}", meta.n),
        });
    }

    Ok(PuDataset {
        meta,
        features,
        observed,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, seed: u64) -> GenSpec {
        GenSpec {
            n,
            d_in: 8,
            k: 3,
            pi_true: vec![0.3, 0.2, 0.25],
            erasure: vec![0.5, 0.0, 1.0],
            separation: 1.0,
            noise: 0.3,
            seed,
        }
    }

    #[test]
    fn validate_catches_bad_specs() {
        let mut s = spec(10, 0);
        s.n = 0;
        assert!(matches!(s.validate(), Err(Error::Usage(_))));
        let mut s = spec(10, 0);
        s.d_in = 2;
        assert!(matches!(s.validate(), Err(Error::Usage(_))));
        let mut s = spec(10, 0);
        s.pi_true[0] = 0.0;
        assert!(matches!(s.validate(), Err(Error::Usage(_))));
        let mut s = spec(10, 0);
        s.erasure[1] = 1.5;
        assert!(matches!(s.validate(), Err(Error::Usage(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec(50, 9)).unwrap();
        let b = generate(&spec(50, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec(50, 10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn different_seeds_share_class_prototypes() {
        // With noise 0, a sample whose only positive class is i sits exactly
        // at separation * prototype_i. Matching such samples across two
        // datasets with different seeds must give identical features, or a
        // model trained on one seed could not be evaluated on another.
        let mut a_spec = spec(400, 9);
        a_spec.noise = 0.0;
        let mut b_spec = spec(400, 10);
        b_spec.noise = 0.0;
        let a = generate(&a_spec).unwrap();
        let b = generate(&b_spec).unwrap();
        let one_hot = |ds: &PuDataset, class: usize| -> Option<Vec<f64>> {
            let t = ds.truth.as_ref().unwrap();
            (0..ds.n())
                .find(|&j| {
                    (0..ds.k()).all(|i| (t[j * ds.k() + i] == 1) == (i == class))
                })
                .map(|j| ds.features_row(j).to_vec())
        };
        let mut matched = 0;
        for class in 0..3 {
            if let (Some(fa), Some(fb)) = (one_hot(&a, class), one_hot(&b, class)) {
                assert_eq!(fa, fb, "class {class} prototype differs across seeds");
                matched += 1;
            }
        }
        assert!(matched >= 2, "too few one-hot samples to compare");
    }

    #[test]
    fn erasure_never_creates_positives() {
        let ds = generate(&spec(500, 1)).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        for (o, t) in ds.observed.iter().zip(truth) {
            assert!(*o != 1 || *t == 1);
        }
    }

    #[test]
    fn zero_erasure_copies_truth_and_full_erasure_clears() {
        let ds = generate(&spec(300, 2)).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        for j in 0..ds.n() {
            // Class 2 has rate 0, class 3 rate 1.
            assert_eq!(ds.observed[j * 3 + 1], truth[j * 3 + 1]);
            assert_eq!(ds.observed[j * 3 + 2], -1);
        }
    }

    #[test]
    fn true_prior_within_binomial_bound() {
        let mut s = spec(10_000, 3);
        s.pi_true = vec![0.3, 0.3, 0.3];
        let ds = generate(&s).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        for i in 0..3 {
            let frac = (0..ds.n()).filter(|&j| truth[j * 3 + i] == 1).count() as f64 / 10_000.0;
            assert!((0.285..=0.315).contains(&frac), "class {i}: {frac}");
        }
    }

    #[test]
    fn scar_keep_fraction_within_binomial_bound() {
        let mut s = spec(20_000, 4);
        s.erasure = vec![0.5, 0.5, 0.5];
        let ds = generate(&s).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        for i in 0..3 {
            let pos: Vec<usize> = (0..ds.n()).filter(|&j| truth[j * 3 + i] == 1).collect();
            let kept = pos.iter().filter(|&&j| ds.observed[j * 3 + i] == 1).count();
            let frac = kept as f64 / pos.len() as f64;
            assert!((0.48..=0.52).contains(&frac), "class {i}: kept {frac}");
        }
    }

    #[test]
    fn erase_labels_endpoints() {
        let col = vec![1, -1, 1, 1, -1];
        let mut rng = stream_rng(0, 0);
        assert_eq!(erase_labels(&col, 0.0, &mut rng), col);
        assert_eq!(erase_labels(&col, 1.0, &mut rng), vec![-1; 5]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let ds = generate(&spec(40, 5)).unwrap();
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);

        // Same content twice: byte-identical files.
        let path2 = dir.path().join("data2.jsonl");
        write_dataset(&ds, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn round_trip_without_truth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pu.jsonl");
        let ds = generate(&spec(25, 6)).unwrap().without_truth();
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.truth, None);
        assert_eq!(ds, back);
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.jsonl");
        let ds = generate(&spec(30, 7)).unwrap();
        write_dataset(&ds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let keep: Vec<&str> = text.lines().take(11).collect();
        fs::write(&path, keep.join("\n")).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let ds = generate(&spec(5, 8)).unwrap();
        write_dataset(&ds, &path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text = text.replace("{\"id\":2", "{\"id\":2 oops");
        fs::write(&path, text).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dims.jsonl");
        let ds = generate(&spec(5, 8)).unwrap();
        write_dataset(&ds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"d_in\":8", "\"d_in\":9");
        fs::write(&path, text).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Schema(_))));
    }
}
