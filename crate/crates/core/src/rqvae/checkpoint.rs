use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochLoss, RqvaeModel};
use crate::error::{Error, Result};
use crate::fusion::AttentionParams;
use crate::linalg::Matrix;

pub const CHECKPOINT_FORMAT: &str = "semrec-rqvae";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON container for a trained model, the attention matrix it was
/// trained with, and its loss trace. Floats are written in shortest
/// round-trip form, so loading reproduces every weight bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: RqvaeModel,
    pub attention: Option<Matrix>,
    pub attention_seed: Option<u64>,
    pub trace: Vec<EpochLoss>,
}

impl Checkpoint {
    pub fn new(
        model: RqvaeModel,
        attention: Option<&AttentionParams>,
        trace: Vec<EpochLoss>,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model,
            attention: attention.map(|a| a.a.clone()),
            attention_seed: attention.map(|a| a.seed),
            trace,
        }
    }

    pub fn attention_params(&self) -> Result<Option<AttentionParams>> {
        match &self.attention {
            Some(a) => Ok(Some(AttentionParams::from_matrix(
                a.clone(),
                self.attention_seed.unwrap_or_default(),
            )?)),
            None => Ok(None),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::data(format!("checkpoint encode: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::data(format!("checkpoint decode: {e}")))?;
        ckpt.check()?;
        Ok(ckpt)
    }

    fn check(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!(
                "not a model checkpoint: {}",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        if self.model.encoder.output_dim() != self.model.stack.dim()
            || self.model.decoder.input_dim() != self.model.stack.dim()
            || self.model.decoder.output_dim() != self.model.encoder.input_dim()
        {
            return Err(Error::data("checkpoint layer shapes do not compose"));
        }
        if !self.model.is_finite() {
            return Err(Error::data("checkpoint holds non-finite weights"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, self)
            .map_err(|e| Error::data(format!("checkpoint encode: {e}")))?;
        out.write_all(b"\n")
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        ckpt.check()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rqvae::RqvaeConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut config = RqvaeConfig::new(5);
        config.hidden_dim = 7;
        config.code_dim = 3;
        config.codebook_size = 4;
        config.levels = 2;
        let mut model = RqvaeModel::new(&config, 42).unwrap();
        model.stack.levels[1].vectors.data[3] = 1.0 / 3.0;
        model.stack.levels[0].vectors.data[0] = -0.0;
        let attention = AttentionParams::init(5, 9);
        let ckpt = Checkpoint::new(model, Some(&attention), vec![]);
        let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let bits = |m: &RqvaeModel| -> Vec<u64> {
            m.encoder
                .params()
                .into_iter()
                .chain(m.decoder.params())
                .flat_map(|p| p.iter().map(|v| v.to_bits()))
                .chain(
                    m.stack
                        .levels
                        .iter()
                        .flat_map(|c| c.vectors.data.iter().map(|v| v.to_bits())),
                )
                .collect()
        };
        assert_eq!(bits(&back.model), bits(&ckpt.model));
        assert_eq!(back.attention_params().unwrap().unwrap(), attention);
    }

    #[test]
    fn wrong_format_is_rejected() {
        let model = RqvaeModel::new(&RqvaeConfig::new(4), 0).unwrap();
        let mut ckpt = Checkpoint::new(model, None, vec![]);
        ckpt.format = "other".into();
        assert!(Checkpoint::from_json(&ckpt.to_json().unwrap()).is_err());
    }
}
