use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{
    dense_backward, dense_forward, matrix_layer_backward, matrix_layer_forward, Activation,
    LayerGrads,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Dense { weight: Tensor<T>, bias: Tensor<T>, activation: Activation },
    Matrix { u: Tensor<T>, v: Tensor<T>, b: Tensor<T>, activation: Activation },
}

impl<T: Scalar> Layer<T> {
    /// Shape this layer wants its input in.
    fn input_shape(&self) -> Vec<usize> {
        match self {
            Layer::Dense { weight, .. } => vec![weight.cols()],
            Layer::Matrix { u, v, .. } => vec![u.cols(), v.rows()],
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Dense { weight, bias, .. } => vec![("weight", weight), ("bias", bias)],
            Layer::Matrix { u, v, b, .. } => vec![("U", u), ("V", v), ("B", b)],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::Dense { weight, bias, .. } => vec![("weight", weight), ("bias", bias)],
            Layer::Matrix { u, v, b, .. } => vec![("U", u), ("V", v), ("B", b)],
        }
    }
}

/// A chain of dense and matrix layers with a recorded forward pass.
///
/// Between layers the activation is reshaped to whatever the next layer
/// consumes (flattened for dense, `p×q` for matrix), so a dense layer emitting
/// 400 units can feed a matrix layer reading a 20×20 input.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    layers: Vec<(String, Layer<T>)>,
    // (input, output) of each layer from the last forward pass
    tape: Option<Vec<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new(), tape: None }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer<T>) -> &mut Self {
        self.layers.push((name.into(), layer));
        self.tape = None;
        self
    }

    pub fn layers(&self) -> &[(String, Layer<T>)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(String, Layer<T>)] {
        self.tape = None;
        &mut self.layers
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (name, layer) in &self.layers {
            let shape = layer.input_shape();
            if shape.iter().product::<usize>() != x.len() {
                return Err(Error::Shape(format!(
                    "layer {name} expects input {shape:?}, got {:?}",
                    x.shape()
                )));
            }
            let xin = x.reshape(shape)?;
            let y = match layer {
                Layer::Dense { weight, bias, activation } => {
                    dense_forward(&xin, weight, bias, *activation)?
                }
                Layer::Matrix { u, v, b, activation } => {
                    matrix_layer_forward(&xin, u, v, b, *activation)?
                }
            };
            tape.push((xin, y.clone()));
            x = y;
        }
        self.tape = Some(tape);
        Ok(x)
    }

    /// Reverse-mode gradients for every parameter (keyed `layer.param`) and
    /// for the graph input, given the upstream gradient of the final output.
    pub fn backward(&self, upstream: &Tensor<T>) -> Result<LayerGrads<T>> {
        let tape = self.tape.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let mut grad = upstream.clone();
        let mut params = BTreeMap::new();
        for ((name, layer), (input, output)) in self.layers.iter().zip(tape).rev() {
            if grad.len() != output.len() {
                return Err(Error::Shape(format!(
                    "upstream gradient for {name}: expected {} values, got {}",
                    output.len(),
                    grad.len()
                )));
            }
            let g = grad.reshape(output.shape().to_vec())?;
            let lg = match layer {
                Layer::Dense { weight, activation, .. } => {
                    dense_backward(input, weight, output, &g, *activation)?
                }
                Layer::Matrix { u, v, b, activation } => {
                    matrix_layer_backward(input, u, v, b, output, &g, *activation)?
                }
            };
            for (pname, t) in lg.params {
                params.insert(format!("{name}.{pname}"), t);
            }
            grad = lg.input;
        }
        let shape = self
            .layers
            .first()
            .map(|(_, l)| l.input_shape())
            .unwrap_or_else(|| grad.shape().to_vec());
        Ok(LayerGrads { params, input: grad.reshape(shape)? })
    }
}

/// Convenience wrapper: record a forward pass and backpropagate `upstream`.
pub fn backprop<T: Scalar>(
    graph: &mut Graph<T>,
    input: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, LayerGrads<T>)> {
    let out = graph.forward(input)?;
    let grads = graph.backward(upstream)?;
    Ok((out, grads))
}
