//! On-disk formats.
//!
//! Instance directory:
//! - `meta.json`: `n`, `d`, `sigma`, `p`, `seed`, `has_truth`
//! - `blocks.f64`: observed blocks `A_ij`, `i < j` ascending, each row-major,
//!   little-endian `f64`
//! - `mask.csv`: one `i,j` line (1-based, `i < j`) per observed pair
//! - `truth.f64`: the `n` ground-truth blocks, row-major (optional)
//!
//! Edge list: a `# n=<n> d=<d>` header, then `i j m11 m12 ... mdd` per edge
//! (1-based, row-major block). Other `#` lines are comments.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{BlockObservation, ObservationBuilder, SyncInstance, SynthParams};
use crate::blockmat::{BlockStack, SquareBlock};
use crate::error::{Result, SyncError};

pub const INSTANCE_SCHEMA_VERSION: u32 = 1;

/// Tolerance for reconciling a pair listed in both orientations.
const DUPLICATE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub schema_version: u32,
    pub n: usize,
    pub d: usize,
    pub sigma: Option<f64>,
    pub p: Option<f64>,
    pub seed: Option<u64>,
    pub has_truth: bool,
}

fn push_row_major(out: &mut Vec<u8>, m: &nalgebra::DMatrixView<'_, f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 8 {
        return Err(SyncError::Parse {
            line: 0,
            message: format!(
                "{} holds {} bytes, expected {}",
                path.display(),
                bytes.len(),
                expected * 8
            ),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Column-major storage of a row-major `d x d` block.
fn row_major_to_block(values: &[f64], d: usize) -> SquareBlock {
    DMatrix::from_row_slice(d, d, values)
}

pub fn save_instance(dir: &Path, instance: &SyncInstance) -> Result<()> {
    fs::create_dir_all(dir)?;
    let obs = &instance.observation;
    let meta = InstanceMeta {
        schema_version: INSTANCE_SCHEMA_VERSION,
        n: obs.n(),
        d: obs.d(),
        sigma: instance.params.map(|p| p.sigma),
        p: instance.params.map(|p| p.p),
        seed: instance.params.map(|p| p.seed),
        has_truth: instance.ground_truth.is_some(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;

    let mut bytes = Vec::with_capacity(obs.raw_blocks().len() * 8);
    let mut mask = String::new();
    for (e, &(i, j)) in obs.edges().iter().enumerate() {
        push_row_major(&mut bytes, &obs.edge_block(e));
        mask.push_str(&format!("{},{}\n", i + 1, j + 1));
    }
    fs::write(dir.join("blocks.f64"), bytes)?;
    fs::write(dir.join("mask.csv"), mask)?;

    let truth_path = dir.join("truth.f64");
    match &instance.ground_truth {
        Some(z) => {
            let mut bytes = Vec::with_capacity(z.as_slice().len() * 8);
            for b in z.blocks() {
                push_row_major(&mut bytes, &b);
            }
            fs::write(truth_path, bytes)?;
        }
        None if truth_path.exists() => fs::remove_file(truth_path)?,
        None => {}
    }
    Ok(())
}

pub fn load_instance(dir: &Path) -> Result<SyncInstance> {
    let meta: InstanceMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let (n, d) = (meta.n, meta.d);
    if n < 2 || d < 1 {
        return Err(SyncError::Parse {
            line: 0,
            message: format!("meta.json has invalid n={n}, d={d}"),
        });
    }
    let mask_text = fs::read_to_string(dir.join("mask.csv"))?;
    let mut pairs = Vec::new();
    for (lineno, line) in mask_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| SyncError::Parse {
            line: lineno + 1,
            message,
        };
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| parse_err(format!("expected `i,j`, got `{line}`")))?;
        let i: usize = a.trim().parse().map_err(|_| parse_err(format!("bad index `{a}`")))?;
        let j: usize = b.trim().parse().map_err(|_| parse_err(format!("bad index `{b}`")))?;
        if i == 0 || j == 0 || i > n || j > n || i >= j {
            return Err(parse_err(format!("pair ({i}, {j}) must satisfy 1 <= i < j <= {n}")));
        }
        if let Some(&(pi, pj)) = pairs.last() {
            if (pi, pj) >= (i - 1, j - 1) {
                return Err(parse_err("pairs must be strictly ascending".into()));
            }
        }
        pairs.push((i - 1, j - 1));
    }

    let dd = d * d;
    let values = read_f64s(&dir.join("blocks.f64"), pairs.len() * dd)?;
    let mut builder = ObservationBuilder::new(n, d);
    for (e, &(i, j)) in pairs.iter().enumerate() {
        let block = row_major_to_block(&values[e * dd..(e + 1) * dd], d);
        builder.push(i, j, block.as_slice());
    }
    let observation = builder.finish();

    let ground_truth = if meta.has_truth {
        let values = read_f64s(&dir.join("truth.f64"), n * dd)?;
        let blocks: Vec<SquareBlock> = values
            .chunks_exact(dd)
            .map(|c| row_major_to_block(c, d))
            .collect();
        Some(BlockStack::from_blocks(&blocks)?)
    } else {
        None
    };

    let params = match (meta.sigma, meta.p, meta.seed) {
        (Some(sigma), Some(p), Some(seed)) => Some(SynthParams {
            n,
            d,
            sigma,
            p,
            seed,
        }),
        _ => None,
    };
    Ok(SyncInstance {
        observation,
        ground_truth,
        params,
    })
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let rest = line.strip_prefix('#')?;
    let (mut n, mut d) = (None, None);
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("n=") {
            n = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("d=") {
            d = v.parse().ok();
        } else {
            return None;
        }
    }
    Some((n?, d?))
}

/// Reads an edge-list file. `truth` optionally names a pose file (see
/// [`load_poses`]) holding the ground truth.
pub fn load_edge_list(path: &Path, truth: Option<&Path>) -> Result<SyncInstance> {
    let text = fs::read_to_string(path)?;
    let mut header = None;
    let mut edges: Vec<(usize, usize, SquareBlock, usize)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| SyncError::Parse {
            line: lineno,
            message,
        };
        let Some((n, d)) = header else {
            let parsed = parse_header(line)
                .ok_or_else(|| parse_err(format!("expected header `# n=<n> d=<d>`, got `{line}`")))?;
            if parsed.0 < 2 || parsed.1 < 1 {
                return Err(parse_err("header needs n >= 2 and d >= 1".into()));
            }
            header = Some(parsed);
            continue;
        };
        if line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 + d * d {
            return Err(parse_err(format!(
                "expected {} fields (i, j and a {d}x{d} block), got {}",
                2 + d * d,
                toks.len()
            )));
        }
        let index = |s: &str| -> Result<usize> {
            let v: usize = s.parse().map_err(|_| parse_err(format!("bad node index `{s}`")))?;
            if v == 0 || v > n {
                return Err(parse_err(format!("node index {v} outside 1..={n}")));
            }
            Ok(v - 1)
        };
        let (i, j) = (index(toks[0])?, index(toks[1])?);
        if i == j {
            return Err(parse_err(format!("self-loop on node {}", i + 1)));
        }
        let mut vals = Vec::with_capacity(d * d);
        for t in &toks[2..] {
            let v: f64 = t.parse().map_err(|_| parse_err(format!("bad number `{t}`")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value `{t}`")));
            }
            vals.push(v);
        }
        let m = row_major_to_block(&vals, d);
        let (i, j, m) = if i < j { (i, j, m) } else { (j, i, m.transpose()) };
        edges.push((i, j, m, lineno));
    }
    let (n, d) = header.ok_or(SyncError::Parse {
        line: 0,
        message: "missing `# n=<n> d=<d>` header".into(),
    })?;

    edges.sort_by_key(|e| (e.0, e.1, e.3));
    let mut unique: Vec<(usize, usize, SquareBlock)> = Vec::with_capacity(edges.len());
    for (i, j, m, _) in edges {
        if let Some(last) = unique.last() {
            if (last.0, last.1) == (i, j) {
                if (&last.2 - &m).abs().max() > DUPLICATE_TOL {
                    return Err(SyncError::DuplicateEdge { i: i + 1, j: j + 1 });
                }
                continue;
            }
        }
        unique.push((i, j, m));
    }
    let mut builder = ObservationBuilder::new(n, d);
    for (i, j, m) in &unique {
        builder.push(*i, *j, m.as_slice());
    }
    let observation = builder.finish();

    let ground_truth = match truth {
        Some(p) => {
            let z = load_poses(p)?;
            if z.n() != n || z.d() != d {
                return Err(SyncError::DimensionMismatch(format!(
                    "truth has {}x{} blocks, edge list declares n={n}, d={d}",
                    z.n(),
                    z.d()
                )));
            }
            Some(z)
        }
        None => None,
    };
    Ok(SyncInstance {
        observation,
        ground_truth,
        params: None,
    })
}

/// Writes `obs` in edge-list format with full `f64` precision.
pub fn save_edge_list(path: &Path, obs: &BlockObservation) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# n={} d={}", obs.n(), obs.d())?;
    for (e, &(i, j)) in obs.edges().iter().enumerate() {
        let b = obs.edge_block(e);
        write!(w, "{} {}", i + 1, j + 1)?;
        for r in 0..obs.d() {
            for c in 0..obs.d() {
                write!(w, " {:e}", b[(r, c)])?;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Pose file: one line per node holding its `d x d` block row-major.
pub fn load_poses(path: &Path) -> Result<BlockStack> {
    let text = fs::read_to_string(path)?;
    let mut blocks = Vec::new();
    let mut d = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| SyncError::Parse {
            line: lineno + 1,
            message,
        };
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(format!("bad number `{t}`"))))
            .collect::<Result<Vec<f64>>>()?;
        let dim = (vals.len() as f64).sqrt().round() as usize;
        if dim == 0 || dim * dim != vals.len() || d.is_some_and(|d| d != dim) {
            return Err(parse_err(format!("{} values do not form the pose block", vals.len())));
        }
        d = Some(dim);
        blocks.push(row_major_to_block(&vals, dim));
    }
    BlockStack::from_blocks(&blocks)
}

pub fn save_poses(path: &Path, x: &BlockStack) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for b in x.blocks() {
        let mut first = true;
        for r in 0..x.d() {
            for c in 0..x.d() {
                if !first {
                    write!(w, " ")?;
                }
                write!(w, "{:e}", b[(r, c)])?;
                first = false;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SynthParams};

    fn rot_z(t: f64) -> [f64; 9] {
        [t.cos(), -t.sin(), 0.0, t.sin(), t.cos(), 0.0, 0.0, 0.0, 1.0]
    }

    fn line(i: usize, j: usize, m: &[f64]) -> String {
        let vals: Vec<String> = m.iter().map(|v| format!("{v:e}")).collect();
        format!("{i} {j} {}\n", vals.join(" "))
    }

    #[test]
    fn parses_three_node_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.txt");
        let text = format!(
            "# n=3 d=3\n# a comment\n{}{}",
            line(1, 2, &rot_z(0.3)),
            line(2, 3, &rot_z(-1.1))
        );
        fs::write(&path, text).unwrap();
        let inst = load_edge_list(&path, None).unwrap();
        assert_eq!(inst.n(), 3);
        assert_eq!(inst.observation.num_edges(), 2);
        assert!(!inst.observation.mask(0, 2));
        assert!(inst.ground_truth.is_none());
        assert_eq!(inst.observation.block(0, 1), DMatrix::from_row_slice(3, 3, &rot_z(0.3)));
    }

    #[test]
    fn reconciles_both_orientations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.txt");
        let m = DMatrix::from_row_slice(3, 3, &rot_z(0.7));
        // row-major M^T is column-major M
        let mt: Vec<f64> = m.as_slice().to_vec();
        fs::write(
            &path,
            format!("# n=2 d=3\n{}{}", line(1, 2, &rot_z(0.7)), line(2, 1, &mt)),
        )
        .unwrap();
        let inst = load_edge_list(&path, None).unwrap();
        assert_eq!(inst.observation.num_edges(), 1);
        assert!((inst.observation.block(0, 1) - m).abs().max() < 1e-15);
    }

    #[test]
    fn rejects_inconsistent_duplicate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.txt");
        fs::write(
            &path,
            format!("# n=2 d=3\n{}{}", line(1, 2, &rot_z(0.7)), line(1, 2, &rot_z(0.8))),
        )
        .unwrap();
        assert!(matches!(
            load_edge_list(&path, None),
            Err(SyncError::DuplicateEdge { i: 1, j: 2 })
        ));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.txt");
        fs::write(&path, "\n# n=3 dd=3\n1 2 1 0 0 1\n").unwrap();
        assert!(matches!(load_edge_list(&path, None), Err(SyncError::Parse { line: 2, .. })));

        fs::write(&path, "# n=3 d=2\n1 2 1 0 0 1\n1 4 1 0 0 1\n").unwrap();
        assert!(matches!(load_edge_list(&path, None), Err(SyncError::Parse { line: 3, .. })));

        fs::write(&path, "# n=3 d=2\n1 2 1 0 0\n").unwrap();
        assert!(matches!(load_edge_list(&path, None), Err(SyncError::Parse { line: 2, .. })));

        fs::write(&path, "# n=3 d=2\n2 2 1 0 0 1\n").unwrap();
        assert!(matches!(load_edge_list(&path, None), Err(SyncError::Parse { line: 2, .. })));
    }

    #[test]
    fn instance_directory_roundtrip() {
        let inst = generate(&SynthParams {
            n: 12,
            d: 3,
            sigma: 0.3,
            p: 0.6,
            seed: 5,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_instance(dir.path(), &inst).unwrap();
        let back = load_instance(dir.path()).unwrap();
        assert_eq!(back.observation, inst.observation);
        assert_eq!(back.ground_truth, inst.ground_truth);
        assert_eq!(back.params, inst.params);
        let mask = fs::read_to_string(dir.path().join("mask.csv")).unwrap();
        assert_eq!(mask.lines().count(), inst.observation.num_edges());
    }

    #[test]
    fn edge_list_and_pose_roundtrip() {
        let inst = generate(&SynthParams {
            n: 7,
            d: 2,
            sigma: 0.1,
            p: 0.7,
            seed: 9,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let edges = dir.path().join("edges.txt");
        let poses = dir.path().join("truth.txt");
        save_edge_list(&edges, &inst.observation).unwrap();
        save_poses(&poses, inst.ground_truth.as_ref().unwrap()).unwrap();
        let back = load_edge_list(&edges, Some(&poses)).unwrap();
        assert_eq!(back.observation, inst.observation);
        assert_eq!(back.ground_truth, inst.ground_truth);
    }
}
