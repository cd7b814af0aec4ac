//! Versioned JSON documents for network parameters.
//!
//! Matrices are nested row-major arrays. Floats are written with 17
//! significant digits so a document round-trips bit-exactly.

use nalgebra::{DMatrix, DVector};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

use super::activation::ActivationKind;
use super::icnn::{IcnnLayer, IcnnParams};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// A float serialized in full `%.16e` precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Full(pub f64);

impl Serialize for Full {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom(format!(
                "cannot encode non-finite value {}",
                self.0
            )));
        }
        let raw =
            RawValue::from_string(format!("{:.16e}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Full {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if !v.is_finite() {
            return Err(D::Error::custom("non-finite number"));
        }
        Ok(Full(v))
    }
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<Full>> {
    m.row_iter()
        .map(|r| r.iter().map(|v| Full(*v)).collect())
        .collect()
}

pub(crate) fn rows_to_matrix(rows: &[Vec<Full>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidConfig(format!("{what}: ragged matrix rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c].0))
}

pub(crate) fn vector_to_list(v: &DVector<f64>) -> Vec<Full> {
    v.iter().map(|x| Full(*x)).collect()
}

pub(crate) fn list_to_vector(v: &[Full]) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().map(|x| x.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_gate: Option<Vec<Vec<Full>>>,
    pub w_input: Vec<Vec<Full>>,
    pub bias: Vec<Full>,
}

/// `{version, activation, dims, layers: [{w_gate?, w_input, bias}]}` where
/// `dims = [input, hidden..., 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcnnDoc {
    pub version: u32,
    pub activation: ActivationKind,
    pub dims: Vec<usize>,
    pub layers: Vec<LayerDoc>,
}

impl From<&IcnnParams> for IcnnDoc {
    fn from(p: &IcnnParams) -> Self {
        let mut dims = vec![p.input_dim];
        dims.extend(p.layers.iter().map(IcnnLayer::out_dim));
        IcnnDoc {
            version: FORMAT_VERSION,
            activation: p.activation,
            dims,
            layers: p
                .layers
                .iter()
                .map(|l| LayerDoc {
                    w_gate: l.w_gate.as_ref().map(matrix_to_rows),
                    w_input: matrix_to_rows(&l.w_input),
                    bias: vector_to_list(&l.bias),
                })
                .collect(),
        }
    }
}

impl TryFrom<&IcnnDoc> for IcnnParams {
    type Error = Error;

    fn try_from(doc: &IcnnDoc) -> Result<Self> {
        if doc.version != FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported ICNN format version {}",
                doc.version
            )));
        }
        if doc.dims.len() != doc.layers.len() + 1 {
            return Err(Error::InvalidConfig(
                "dims must list the input and every layer width".into(),
            ));
        }
        let layers = doc
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Ok(IcnnLayer {
                    w_gate: l
                        .w_gate
                        .as_deref()
                        .map(|r| rows_to_matrix(r, "w_gate"))
                        .transpose()?,
                    w_input: rows_to_matrix(&l.w_input, "w_input")?,
                    bias: list_to_vector(&l.bias),
                })
                .and_then(|layer: IcnnLayer| {
                    if layer.out_dim() != doc.dims[i + 1] {
                        Err(Error::InvalidConfig(format!(
                            "layer {i} width disagrees with dims"
                        )))
                    } else {
                        Ok(layer)
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = IcnnParams::new(layers, doc.activation, doc.dims[0])?;
        if params.min_gate_weight().is_some_and(|m| m < 0.0) {
            return Err(Error::InvalidConfig(
                "gate weights must be nonnegative".into(),
            ));
        }
        Ok(params)
    }
}

impl IcnnParams {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&IcnnDoc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: IcnnDoc = serde_json::from_str(s)?;
        IcnnParams::try_from(&doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convexnet::init::{init_icnn, InitScheme};
    use crate::convexnet::params::Parameters;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(seed in any::<u64>(), d in 1usize..4, h in 1usize..6) {
            let p = init_icnn(d, &[h, h], ActivationKind::Softplus, InitScheme::XavierClamp, seed).unwrap();
            let back = IcnnParams::from_json(&p.to_json().unwrap()).unwrap();
            let a: Vec<u64> = p.to_flat().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.to_flat().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn document_layout() {
        let p = init_icnn(2, &[3], ActivationKind::Relu, InitScheme::XavierClamp, 0).unwrap();
        let v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["activation"], "relu");
        assert_eq!(v["dims"], serde_json::json!([2, 3, 1]));
        assert!(v["layers"][0].get("w_gate").is_none());
        assert_eq!(v["layers"][1]["w_gate"].as_array().unwrap().len(), 1);
        assert_eq!(v["layers"][0]["w_input"].as_array().unwrap().len(), 3);
        assert_eq!(v["layers"][0]["w_input"][0].as_array().unwrap().len(), 2);
    }

    #[test]
    fn seventeen_significant_digits() {
        let s = serde_json::to_string(&Full(0.1)).unwrap();
        assert_eq!(s, "1.0000000000000001e-1");
        assert!(serde_json::to_string(&Full(f64::NAN)).is_err());
    }

    #[test]
    fn rejects_negative_gates_and_bad_versions() {
        let p = init_icnn(
            1,
            &[2],
            ActivationKind::Softplus,
            InitScheme::XavierClamp,
            0,
        )
        .unwrap();
        let mut doc = IcnnDoc::from(&p);
        doc.layers[1].w_gate.as_mut().unwrap()[0][0] = Full(-1.0);
        assert!(IcnnParams::try_from(&doc).is_err());
        let mut doc = IcnnDoc::from(&p);
        doc.version = 99;
        assert!(IcnnParams::try_from(&doc).is_err());
    }
}
