//! File exporters: PE similarity maps and the batch score CSV.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::pe::{pe_similarity_map, write_similarity_csv, write_similarity_pgm, SimilarityMap};
use crate::scoring::{CategoryScores, ScoreConfig};

pub const PE_CSV: &str = "pe_similarity.csv";
pub const PE_PGM: &str = "pe_similarity.pgm";

/// Write the learnable PE similarity map as CSV and PGM under `dir`.
pub fn export_pe_viz(model: &DualEncoder, dir: &Path) -> Result<(SimilarityMap, PathBuf, PathBuf)> {
    let grid = model.pe_grid().ok_or_else(|| {
        Error::Input(format!("model with pe_mode {} has no learnable positional embedding", model.vit.pe_mode))
    })?;
    let map = pe_similarity_map(&grid);
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(PE_CSV);
    let pgm_path = dir.join(PE_PGM);
    let mut f = BufWriter::new(File::create(&csv_path)?);
    write_similarity_csv(&map, &mut f)?;
    f.flush()?;
    let mut f = BufWriter::new(File::create(&pgm_path)?);
    write_similarity_pgm(&map, &mut f)?;
    f.flush()?;
    Ok((map, csv_path, pgm_path))
}

/// One scored region from the score CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredRegion {
    pub region_id: String,
    pub scores: CategoryScores,
    pub top: Option<usize>,
}

fn column_id(name: &str, prefix: &str) -> Result<Option<usize>> {
    match name.strip_prefix(prefix) {
        None => Ok(None),
        Some(id) => id
            .parse()
            .map(Some)
            .map_err(|_| Error::Format(format!("column {name:?} has no numeric category id"))),
    }
}

/// Read `region_id, z_<id>..., p_<id>..., o` rows and fuse them under `cfg`.
/// Every category needs both `z_` and `p_`; the background needs only `p_`.
/// Output ids are ascending.
pub fn score_regions<R: Read>(input: R, cfg: &ScoreConfig) -> Result<(Vec<usize>, Vec<ScoredRegion>)> {
    cfg.validate()?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let mut region_col = None;
    let mut o_col = None;
    let mut z_cols = std::collections::BTreeMap::new();
    let mut p_cols = std::collections::BTreeMap::new();
    for (i, h) in headers.iter().enumerate() {
        if h == "region_id" {
            region_col = Some(i);
        } else if h == "o" {
            o_col = Some(i);
        } else if let Some(id) = column_id(h, "z_")? {
            z_cols.insert(id, i);
        } else if let Some(id) = column_id(h, "p_")? {
            p_cols.insert(id, i);
        } else {
            return Err(Error::Format(format!("unexpected column {h:?}")));
        }
    }
    let (region_col, o_col) = match (region_col, o_col) {
        (Some(r), Some(o)) => (r, o),
        _ => return Err(Error::Format("score CSV needs region_id and o columns".into())),
    };
    let ids: Vec<usize> = p_cols.keys().copied().collect();
    let zs: BTreeSet<usize> = z_cols.keys().copied().collect();
    for &id in &ids {
        if Some(id) != cfg.background_id && !zs.contains(&id) {
            return Err(Error::Format(format!("category {id} has p_{id} but no z_{id}")));
        }
    }
    if let Some(extra) = zs.iter().find(|id| !p_cols.contains_key(id)) {
        return Err(Error::Format(format!("category {extra} has z_{extra} but no p_{extra}")));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |col: usize| -> Result<f64> {
            let s = rec.get(col).unwrap_or("");
            let v: f64 = s
                .parse()
                .map_err(|_| Error::Format(format!("row {}: bad number {s:?}", line + 1)))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("row {}: score {v} outside [0, 1]", line + 1)));
            }
            Ok(v)
        };
        let z = ids
            .iter()
            .map(|id| z_cols.get(id).map_or(Ok(0.0), |&c| num(c)))
            .collect::<Result<Vec<_>>>()?;
        let p = ids.iter().map(|id| num(p_cols[id])).collect::<Result<Vec<_>>>()?;
        let scores = CategoryScores::compute(&ids, &z, &p, num(o_col)?, cfg)?;
        let top = scores.top_category(cfg.background_id);
        out.push(ScoredRegion { region_id: rec.get(region_col).unwrap_or("").to_string(), scores, top });
    }
    Ok((ids, out))
}

/// `region_id, S_<id>..., top` with ids ascending.
pub fn write_scores<W: Write>(ids: &[usize], rows: &[ScoredRegion], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["region_id".to_string()];
    header.extend(ids.iter().map(|id| format!("S_{id}")));
    header.push("top".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.region_id.clone()];
        rec.extend(r.scores.final_scores.iter().map(|s| format!("{s:.9}")));
        rec.push(r.top.map_or(String::new(), |t| t.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
