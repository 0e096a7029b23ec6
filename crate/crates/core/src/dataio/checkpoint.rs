//! Encoder checkpoints and dictionary files.
//!
//! An encoder checkpoint is a directory holding `encoder.json` (hyperparameters
//! and the parameter names) plus one `<name>.vwt` tensor per parameter. A
//! dictionary is `words.vwt` (`[num_words, d]`) plus `dictionary.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{read_tensor, write_tensor};
use super::{read_json, write_json, DataError, Result};
use crate::dictionary::{Birth, Dictionary, DictionaryConfig, VisualWord};
use crate::encoder::{EncoderConfig, EncoderParams};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderHeader {
    config: EncoderConfig,
    parameters: Vec<String>,
}

pub fn save_encoder(dir: &Path, params: &EncoderParams) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let named = params.named();
    for (name, t) in &named {
        write_tensor(&dir.join(format!("{name}.vwt")), t)?;
    }
    let header = EncoderHeader {
        config: params.config,
        parameters: named.into_iter().map(|(n, _)| n).collect(),
    };
    write_json(&dir.join("encoder.json"), &header)
}

pub fn load_encoder(dir: &Path) -> Result<EncoderParams> {
    let header: EncoderHeader = read_json(&dir.join("encoder.json"))?;
    let mut failure = None;
    let params = EncoderParams::from_named(header.config, |name| {
        if !header.parameters.iter().any(|p| p == name) {
            return None;
        }
        match read_tensor(&dir.join(format!("{name}.vwt"))) {
            Ok(t) => Some(t),
            Err(e) => {
                failure = Some(e);
                None
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    params.map_err(|e| DataError::Inconsistent(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DictionaryHeader {
    num_classes: usize,
    class_ids: Vec<u8>,
    member_counts: Vec<usize>,
    births: Vec<Birth>,
    config: DictionaryConfig,
}

pub fn save_dictionary(dir: &Path, dict: &Dictionary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    write_tensor(&dir.join("words.vwt"), &dict.word_matrix())?;
    let header = DictionaryHeader {
        num_classes: dict.num_classes,
        class_ids: dict.words.iter().map(|w| w.class_id).collect(),
        member_counts: dict.words.iter().map(|w| w.member_count).collect(),
        births: dict.words.iter().map(|w| w.birth).collect(),
        config: dict.config,
    };
    write_json(&dir.join("dictionary.json"), &header)
}

pub fn load_dictionary(dir: &Path) -> Result<Dictionary> {
    let header: DictionaryHeader = read_json(&dir.join("dictionary.json"))?;
    let words = read_tensor(&dir.join("words.vwt"))?;
    let n = header.class_ids.len();
    if words.rank() != 2 || words.shape()[0] != n || header.member_counts.len() != n || header.births.len() != n {
        return Err(DataError::Inconsistent(format!(
            "words {:?} vs {n} word records",
            words.shape()
        )));
    }
    let dim = words.shape()[1];
    let mut dict = Dictionary::new(dim, header.num_classes, header.config);
    for i in 0..n {
        dict.words.push(VisualWord {
            centroid: words.row(i).to_vec(),
            class_id: header.class_ids[i],
            member_count: header.member_counts[i],
            birth: header.births[i],
        });
    }
    Ok(dict)
}
