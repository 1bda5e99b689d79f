use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DiscretizeError, FeatureEpisode, Prep, Result, PREP_SCHEMA_VERSION};

/// Episodes plus the preprocessing that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub prep: Prep,
    pub episodes: Vec<FeatureEpisode>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeLine {
    schema_version: u32,
    prep_hash: String,
    #[serde(flatten)]
    episode: FeatureEpisode,
}

/// Writes `episodes.jsonl` and the `prep.json` sidecar into `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let io = |e: serde_json::Error| DiscretizeError::Io(e.to_string());
    std::fs::write(dir.join("prep.json"), serde_json::to_string_pretty(&ds.prep).map_err(io)?)?;
    let hash = ds.prep.hash();
    let mut w = BufWriter::new(File::create(dir.join("episodes.jsonl"))?);
    for ep in &ds.episodes {
        let line = EpisodeLine {
            schema_version: PREP_SCHEMA_VERSION,
            prep_hash: hash.clone(),
            episode: ep.clone(),
        };
        serde_json::to_writer(&mut w, &line).map_err(io)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let io = |e: serde_json::Error| DiscretizeError::Io(e.to_string());
    let prep: Prep = serde_json::from_str(&std::fs::read_to_string(dir.join("prep.json"))?).map_err(io)?;
    if prep.schema_version != PREP_SCHEMA_VERSION {
        return Err(DiscretizeError::PrepMismatch(format!("schema version {}", prep.schema_version)));
    }
    let hash = prep.hash();
    let mut episodes = Vec::new();
    for (i, line) in BufReader::new(File::open(dir.join("episodes.jsonl"))?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeLine =
            serde_json::from_str(&line).map_err(|e| DiscretizeError::Io(format!("episodes.jsonl:{}: {e}", i + 1)))?;
        if rec.prep_hash != hash {
            return Err(DiscretizeError::PrepMismatch(format!("episodes.jsonl:{}: prep hash differs", i + 1)));
        }
        episodes.push(rec.episode);
    }
    Ok(Dataset { prep, episodes })
}
