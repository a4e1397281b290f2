use kgpl_tensor::Array;

use super::{predict, TrainError};
use crate::backbones::SegmentationModel;
use crate::data::{preprocess, Crop};
use crate::domain::{LabelMap, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    pub tissue: LabelMap,
    pub structure: LabelMap,
    /// Box cut from the input volume; both maps live on this grid.
    pub crop: Crop,
}

/// `(K, D, H, W)` one-hot of `tissue`, with the image as an extra last channel when given.
pub fn structure_input(tissue: &LabelMap, image: Option<&Volume>) -> Array {
    let one_hot = tissue.one_hot();
    let Some(v) = image else { return one_hot };
    let [d, h, w] = tissue.dims();
    let k = tissue.num_classes();
    let mut data = one_hot.into_vec();
    data.extend_from_slice(v.data());
    Array::from_vec(&[k + 1, d, h, w], data)
}

/// Tissue prediction on the preprocessed image, then structure prediction from its one-hot encoding.
pub fn cascade_predict(
    tissue_model: &SegmentationModel,
    structure_model: &SegmentationModel,
    volume: &Volume,
) -> Result<CascadeOutput, TrainError> {
    let k = tissue_model.config().num_classes;
    let in_s = structure_model.config().in_channels;
    let with_image = match in_s {
        c if c == k => false,
        c if c == k + 1 => true,
        c => {
            return Err(TrainError::ShapeMismatch(format!(
                "structure model takes {} channels, tissue model emits {} classes",
                c, k
            )))
        }
    };
    if tissue_model.config().input_dims != structure_model.config().input_dims {
        return Err(TrainError::ShapeMismatch("tissue and structure models disagree on grid size".into()));
    }
    let dims = tissue_model.config().input_dims;
    let (image, crop) = preprocess(volume, dims)?;
    let tissue = predict(tissue_model, &image.to_array(), *image.geometry())?;
    let input = structure_input(&tissue, with_image.then_some(&image));
    let structure = predict(structure_model, &input, *image.geometry())?;
    Ok(CascadeOutput { tissue, structure, crop })
}
