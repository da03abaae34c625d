//! Loading checkpoints and running batched inference on tiles.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use mmcd_core::datapipe::{Batch, SamplePair};
use mmcd_core::dataset::read_json;
use mmcd_core::raster::{ClassMap, Raster, RasterTile};

use crate::decoder::{Model, ModelConfig};
use crate::error::Result;
use crate::objective::batch_inputs;
use crate::params::ParamStore;
use crate::train::{Normalization, CHECKPOINT_FILE, MODEL_CONFIG_FILE, NORMALIZATION_FILE};

/// Per-tile outputs of the enabled heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub semantic: Option<ClassMap>,
    /// Heights on the normalized scale.
    pub height_norm: Option<RasterTile>,
    pub pseudo_scalar: Option<RasterTile>,
}

pub struct Predictor {
    pub model: Model,
    pub params: ParamStore,
    pub normalization: Normalization,
}

impl Predictor {
    pub fn load(dir: &Path) -> Result<Self> {
        let config: ModelConfig = read_json(&dir.join(MODEL_CONFIG_FILE))?;
        let normalization: Normalization = read_json(&dir.join(NORMALIZATION_FILE))?;
        let mut params = ParamStore::new(0, DType::F32);
        let model = Model::new(&mut params, &config)?;
        params.load(&dir.join(CHECKPOINT_FILE))?;
        Ok(Self { model, params, normalization })
    }

    pub fn predict(&self, tiles: &[SamplePair], batch_size: usize) -> Result<Vec<Prediction>> {
        let device = Device::Cpu;
        let mut out = Vec::with_capacity(tiles.len());
        for chunk in tiles.chunks(batch_size.max(1)) {
            let refs: Vec<&SamplePair> = chunk.iter().collect();
            let batch = Batch::collate(&refs, &self.normalization.input_stats, &self.normalization.height_scale)?;
            let (dsm, image) = batch_inputs(&batch, self.params.dtype(), &device)?;
            let o = self.model.forward(&dsm, &image)?;
            let (h, w) = (batch.height, batch.width);
            let sem = o.sem_logits.as_ref().map(|l| l.argmax(1)).transpose()?;
            for (i, id) in batch.ids.iter().enumerate() {
                let semantic = sem
                    .as_ref()
                    .map(|s| -> Result<ClassMap> {
                        let v: Vec<u8> = s.get(i)?.flatten_all()?.to_dtype(DType::U8)?.to_vec1()?;
                        Ok(Raster::from_vec(1, h, w, v)?)
                    })
                    .transpose()?;
                let map = |t: &Option<Tensor>| -> Result<Option<RasterTile>> {
                    t.as_ref()
                        .map(|t| -> Result<RasterTile> {
                            let v: Vec<f32> = t.get(i)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
                            Ok(Raster::from_vec(1, h, w, v)?)
                        })
                        .transpose()
                };
                out.push(Prediction {
                    id: id.clone(),
                    semantic,
                    height_norm: map(&o.height_norm)?,
                    pseudo_scalar: map(&o.pseudo_scalar)?,
                });
            }
        }
        Ok(out)
    }
}
