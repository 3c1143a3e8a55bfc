use super::graph::{attention_forward, AttnLayout, AttnMask};
use super::tensor::Tensor;
use crate::error::{Result, StoaError};

/// Single-head scaled dot-product attention on plain tensors.
///
/// Masked positions (`false`) are excluded before normalisation; rows with
/// no visible key produce zeros.
pub fn attention(queries: &Tensor, keys: &Tensor, values: &Tensor, mask: Option<&AttnMask>) -> Result<Tensor> {
    if queries.cols() != keys.cols() {
        return Err(StoaError::Shape(format!(
            "query width {} vs key width {}",
            queries.cols(),
            keys.cols()
        )));
    }
    if keys.rows() != values.rows() {
        return Err(StoaError::Shape(format!(
            "{} keys but {} values",
            keys.rows(),
            values.rows()
        )));
    }
    if values.cols() != queries.cols() {
        return Err(StoaError::Shape(format!(
            "value width {} vs query width {}",
            values.cols(),
            queries.cols()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != (queries.rows(), keys.rows()) {
            return Err(StoaError::Shape(format!(
                "mask {:?} vs scores ({}, {})",
                m.shape(),
                queries.rows(),
                keys.rows()
            )));
        }
    }
    Ok(attention_forward(queries, keys, values, mask, AttnLayout::single(1)).0)
}
