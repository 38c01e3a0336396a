//! Text serialization of [`DenseNet`].
//!
//! ```text
//! DENSENET v1
//! FC 2 16 RELU FC 16 3 SOFTMAX
//! L0.weight 32 <values...>
//! L0.bias 16 <values...>
//! ...
//! ```
//!
//! Values are written with 17 significant digits, which round-trips every `f64`.

use std::fmt::Write as _;

use super::{parse_spec_tokens, spec_tokens, BnState, DenseNet, LayerParams, LayerSpec};
use crate::error::{Error, Result};

pub const DENSENET_MAGIC: &str = "DENSENET v1";

pub(crate) fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn tensor_line(out: &mut String, name: &str, values: &[f64]) {
    let _ = write!(out, "{name} {}", values.len());
    for v in values {
        out.push(' ');
        out.push_str(&format_value(*v));
    }
    out.push('\n');
}

/// Serializes the network; the output always ends with a newline.
pub fn write_dense_net(net: &DenseNet) -> String {
    let mut out = String::new();
    out.push_str(DENSENET_MAGIC);
    out.push('\n');
    out.push_str(&spec_tokens(net.spec()));
    out.push('\n');
    for (i, (params, bn)) in net.params().iter().zip(net.bn_state()).enumerate() {
        match params {
            LayerParams::None => {}
            LayerParams::Dense { weights, bias } => {
                tensor_line(&mut out, &format!("L{i}.weight"), weights);
                tensor_line(&mut out, &format!("L{i}.bias"), bias);
            }
            LayerParams::Norm { gamma, beta } => {
                tensor_line(&mut out, &format!("L{i}.gamma"), gamma);
                tensor_line(&mut out, &format!("L{i}.beta"), beta);
            }
        }
        if let Some(state) = bn {
            tensor_line(&mut out, &format!("L{i}.running_mean"), &state.running_mean);
            tensor_line(&mut out, &format!("L{i}.running_var"), &state.running_var);
            tensor_line(&mut out, &format!("L{i}.epsilon"), &[state.epsilon]);
            tensor_line(&mut out, &format!("L{i}.momentum"), &[state.momentum]);
        }
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    offset: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((i, line)) => Ok((i + 1 + self.offset, line)),
            None => Err(Error::parse(
                self.offset + 1,
                format!("unexpected end of model while reading {what}"),
            )),
        }
    }

    fn tensor(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let (no, line) = self.next_line(name)?;
        let mut tokens = line.split_whitespace();
        let found = tokens.next().unwrap_or("");
        if found != name {
            return Err(Error::parse(
                no,
                format!("expected tensor `{name}`, found `{found}`"),
            ));
        }
        let declared: usize = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::parse(no, format!("missing length for `{name}`")))?;
        if declared != len {
            return Err(Error::parse(
                no,
                format!("`{name}` declares {declared} values but the layer needs {len}"),
            ));
        }
        let values = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::parse(no, format!("bad number `{t}` in `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != len {
            return Err(Error::parse(
                no,
                format!("`{name}` has {} values, declared {len}", values.len()),
            ));
        }
        Ok(values)
    }
}

/// Parses a model written by [`write_dense_net`]. `line_offset` is added to
/// reported line numbers when the model is embedded after other header lines.
/// The returned network is in inference mode.
pub fn read_dense_net(text: &str, line_offset: usize) -> Result<DenseNet> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        offset: line_offset,
    };
    let (no, magic) = lines.next_line("header")?;
    if magic.trim() != DENSENET_MAGIC {
        return Err(Error::parse(
            no,
            format!("expected `{DENSENET_MAGIC}`, found `{magic}`"),
        ));
    }
    let (no, tokens) = lines.next_line("layer spec")?;
    let spec = parse_spec_tokens(tokens).map_err(|e| Error::parse(no, e.to_string()))?;
    super::validate_spec(&spec).map_err(|e| Error::parse(no, e.to_string()))?;
    let mut params = Vec::with_capacity(spec.len());
    let mut bn_state = Vec::with_capacity(spec.len());
    for (i, layer) in spec.iter().enumerate() {
        match *layer {
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                let weights = lines.tensor(&format!("L{i}.weight"), in_dim * out_dim)?;
                let bias = lines.tensor(&format!("L{i}.bias"), out_dim)?;
                params.push(LayerParams::Dense { weights, bias });
                bn_state.push(None);
            }
            LayerSpec::BatchNorm { dim } => {
                let gamma = lines.tensor(&format!("L{i}.gamma"), dim)?;
                let beta = lines.tensor(&format!("L{i}.beta"), dim)?;
                let running_mean = lines.tensor(&format!("L{i}.running_mean"), dim)?;
                let running_var = lines.tensor(&format!("L{i}.running_var"), dim)?;
                let epsilon = lines.tensor(&format!("L{i}.epsilon"), 1)?[0];
                let momentum = lines.tensor(&format!("L{i}.momentum"), 1)?[0];
                params.push(LayerParams::Norm { gamma, beta });
                bn_state.push(Some(BnState {
                    running_mean,
                    running_var,
                    epsilon,
                    momentum,
                }));
            }
            LayerSpec::Relu | LayerSpec::Softmax => {
                params.push(LayerParams::None);
                bn_state.push(None);
            }
        }
    }
    if let Some((i, line)) = lines.inner.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::parse(
            i + 1 + line_offset,
            format!("trailing content `{line}` after the last tensor"),
        ));
    }
    DenseNet::from_parts(spec, params, bn_state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;

    fn sample_net() -> DenseNet {
        let mut net = DenseNet::new(
            vec![
                LayerSpec::FullyConnected {
                    in_dim: 3,
                    out_dim: 2,
                },
                LayerSpec::Relu,
                LayerSpec::BatchNorm { dim: 2 },
                LayerSpec::FullyConnected {
                    in_dim: 2,
                    out_dim: 2,
                },
                LayerSpec::Softmax,
            ],
            1.0,
            0.9,
            1e-5,
            21,
        )
        .unwrap();
        net.set_mode(Mode::Infer);
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = sample_net();
        let text = write_dense_net(&net);
        assert!(text.starts_with("DENSENET v1\nFC 3 2 RELU BN 2 FC 2 2 SOFTMAX\nL0.weight 6 "));
        let back = read_dense_net(&text, 0).unwrap();
        assert_eq!(back.flat_params(), net.flat_params());
        assert_eq!(back.bn_state(), net.bn_state());
        assert_eq!(write_dense_net(&back), text);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = write_dense_net(&sample_net()).replace("L0.bias 2", "L0.bias 3");
        match read_dense_net(&text, 0).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        match read_dense_net("DENSENET v2\n", 1).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
