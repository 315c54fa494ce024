use serde::{Deserialize, Serialize};

use super::{NnError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Conv {
        k: usize,
        stride: usize,
        out_ch: usize,
        pad: usize,
        #[serde(default)]
        bias: bool,
    },
    BatchNorm,
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    GlobalAvgPool,
    /// Flattens its input and applies a dense layer with bias.
    FullyConnected { out: usize },
    /// Only valid as the last node.
    Softmax,
    /// Adds the output of node `from` to this node's input.
    ResidualAdd { from: usize },
}

/// A graph node. `input` names the producing node; `None` means the
/// previous node (or the network input for node 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    #[serde(flatten)]
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<usize>,
}

impl Node {
    pub fn new(op: Op) -> Self {
        Self { op, input: None }
    }

    pub fn from(op: Op, input: usize) -> Self {
        Self { op, input: Some(input) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    /// `(C, H, W)`.
    pub input: (usize, usize, usize),
    pub nodes: Vec<Node>,
}

/// Activation shape `(C, H, W)` of every node.
pub type Shapes = Vec<(usize, usize, usize)>;

impl ArchitectureSpec {
    /// Index of the node feeding node `i`, or `None` for the network input.
    pub fn input_of(&self, i: usize) -> Option<usize> {
        match self.nodes[i].input {
            Some(j) => Some(j),
            None => i.checked_sub(1),
        }
    }

    /// Propagates shapes and validates wiring.
    pub fn infer_shapes(&self) -> Result<Shapes> {
        let bad = |i: usize, m: String| Err(NnError::InvalidSpec(format!("node {i}: {m}")));
        let (c0, h0, w0) = self.input;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(NnError::InvalidSpec(format!("input {:?} has a zero extent", self.input)));
        }
        if self.nodes.is_empty() {
            return Err(NnError::InvalidSpec("no nodes".into()));
        }
        let mut shapes: Shapes = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(j) = node.input {
                if j >= i {
                    return bad(i, format!("input {j} is not an earlier node"));
                }
            }
            let (c, h, w) = self.input_of(i).map_or(self.input, |j| shapes[j]);
            let out = match node.op {
                Op::Conv { k, stride, out_ch, pad, .. } => {
                    if k == 0 || stride == 0 || out_ch == 0 {
                        return bad(i, "conv needs k, stride, out_ch >= 1".into());
                    }
                    if h + 2 * pad < k || w + 2 * pad < k {
                        return bad(i, format!("kernel {k} larger than padded input {h}x{w}"));
                    }
                    (out_ch, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
                }
                Op::MaxPool { k, stride, pad } => {
                    if k == 0 || stride == 0 || pad >= k {
                        return bad(i, "max_pool needs k, stride >= 1 and pad < k".into());
                    }
                    if h + 2 * pad < k || w + 2 * pad < k {
                        return bad(i, format!("pool {k} larger than padded input {h}x{w}"));
                    }
                    (c, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
                }
                Op::BatchNorm | Op::Relu => (c, h, w),
                Op::GlobalAvgPool => (c, 1, 1),
                Op::FullyConnected { out } => {
                    if out == 0 {
                        return bad(i, "fully_connected needs out >= 1".into());
                    }
                    (out, 1, 1)
                }
                Op::Softmax => {
                    if i + 1 != self.nodes.len() {
                        return bad(i, "softmax must be the last node".into());
                    }
                    (c, h, w)
                }
                Op::ResidualAdd { from } => {
                    if from >= i {
                        return bad(i, format!("residual source {from} is not an earlier node"));
                    }
                    if shapes[from] != (c, h, w) {
                        return bad(
                            i,
                            format!("residual operands differ: {:?} vs {:?}", shapes[from], (c, h, w)),
                        );
                    }
                    (c, h, w)
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Output width of the network (channels of the last node).
    pub fn num_outputs(&self) -> Result<usize> {
        let shapes = self.infer_shapes()?;
        let (c, h, w) = *shapes.last().expect("nonempty");
        Ok(c * h * w)
    }

    /// Index of the trailing `fully_connected` node when followed only by softmax.
    pub fn head_index(&self) -> Option<usize> {
        let n = self.nodes.len();
        let last_fc = match self.nodes.last()?.op {
            Op::Softmax if n >= 2 => n - 2,
            Op::FullyConnected { .. } => n - 1,
            _ => return None,
        };
        matches!(self.nodes[last_fc].op, Op::FullyConnected { .. }).then_some(last_fc)
    }

    /// Convolutions with a spatial kernel plus dense layers; 1×1 projections
    /// are not counted.
    pub fn weighted_layer_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Conv { k, .. } if k > 1) || matches!(n.op, Op::FullyConnected { .. }))
            .count()
    }

    /// Trainable parameter count: conv/FC weights and biases, BN gamma and beta.
    pub fn parameter_count(&self) -> Result<usize> {
        let shapes = self.infer_shapes()?;
        let mut total = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            let (c, h, w) = self.input_of(i).map_or(self.input, |j| shapes[j]);
            total += match node.op {
                Op::Conv { k, out_ch, bias, .. } => out_ch * c * k * k + if bias { out_ch } else { 0 },
                Op::BatchNorm => 2 * c,
                Op::FullyConnected { out } => out * c * h * w + out,
                _ => 0,
            };
        }
        Ok(total)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.infer_shapes()?;
        Ok(s)
    }
}

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, op: Op) -> usize {
        self.nodes.push(Node::new(op));
        self.nodes.len() - 1
    }

    fn push_from(&mut self, op: Op, input: usize) -> usize {
        self.nodes.push(Node::from(op, input));
        self.nodes.len() - 1
    }

    fn last(&self) -> usize {
        self.nodes.len() - 1
    }

    fn conv_bn(&mut self, k: usize, stride: usize, out_ch: usize, pad: usize) -> usize {
        self.push(Op::Conv { k, stride, out_ch, pad, bias: false });
        self.push(Op::BatchNorm)
    }

    /// Basic residual block: two 3×3 conv-BN pairs, with a strided 1×1
    /// projection on the shortcut when shape changes.
    fn basic_block(&mut self, out_ch: usize, stride: usize, project: bool) {
        let entry = self.last();
        self.conv_bn(3, stride, out_ch, 1);
        self.push(Op::Relu);
        let main = self.conv_bn(3, 1, out_ch, 1);
        let shortcut = if project {
            self.push_from(Op::Conv { k: 1, stride, out_ch, pad: 0, bias: false }, entry);
            self.push(Op::BatchNorm)
        } else {
            entry
        };
        self.push_from(Op::ResidualAdd { from: shortcut }, main);
        self.push(Op::Relu);
    }

    fn head(mut self, num_classes: usize) -> Vec<Node> {
        self.push(Op::GlobalAvgPool);
        self.push(Op::FullyConnected { out: num_classes });
        self.push(Op::Softmax);
        self.nodes
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(NnError::InvalidSpec(format!("need at least 2 classes, got {num_classes}")));
    }
    Ok(())
}

/// Desk-scale residual net: 3×3 stem to 16 channels, three stages of two
/// basic blocks (16, 32, 64 channels; stages two and three halve the
/// resolution), global average pooling and a dense head. 14 weighted layers.
pub fn build_mini_resnet(input: (usize, usize, usize), num_classes: usize) -> Result<ArchitectureSpec> {
    check_classes(num_classes)?;
    let mut b = Builder { nodes: Vec::new() };
    b.conv_bn(3, 1, 16, 1);
    b.push(Op::Relu);
    for (ch, stride) in [(16, 1), (32, 2), (64, 2)] {
        b.basic_block(ch, stride, stride != 1);
        b.basic_block(ch, 1, false);
    }
    let spec = ArchitectureSpec { name: "mini_resnet".into(), input, nodes: b.head(num_classes) };
    spec.infer_shapes()?;
    Ok(spec)
}

/// The 18-layer residual topology: 7×7/2 stem, 3×3/2 max pool, four stages
/// of two basic blocks at 64/128/256/512 channels, global pooling, dense head.
pub fn build_resnet18(input: (usize, usize, usize), num_classes: usize) -> Result<ArchitectureSpec> {
    check_classes(num_classes)?;
    let mut b = Builder { nodes: Vec::new() };
    b.conv_bn(7, 2, 64, 3);
    b.push(Op::Relu);
    b.push(Op::MaxPool { k: 3, stride: 2, pad: 1 });
    for (ch, stride) in [(64, 1), (128, 2), (256, 2), (512, 2)] {
        b.basic_block(ch, stride, stride != 1);
        b.basic_block(ch, 1, false);
    }
    let spec = ArchitectureSpec { name: "resnet18".into(), input, nodes: b.head(num_classes) };
    spec.infer_shapes()?;
    Ok(spec)
}

/// Plain (non-residual) net: five 3×3 convolutions with three max pools,
/// two hidden dense layers and a dense head.
pub fn build_mini_plain(input: (usize, usize, usize), num_classes: usize) -> Result<ArchitectureSpec> {
    check_classes(num_classes)?;
    let conv = |out_ch| Op::Conv { k: 3, stride: 1, out_ch, pad: 1, bias: true };
    let pool = Op::MaxPool { k: 2, stride: 2, pad: 0 };
    let nodes = [
        conv(16),
        Op::Relu,
        pool.clone(),
        conv(32),
        Op::Relu,
        pool.clone(),
        conv(64),
        Op::Relu,
        conv(64),
        Op::Relu,
        conv(64),
        Op::Relu,
        pool,
        Op::FullyConnected { out: 128 },
        Op::Relu,
        Op::FullyConnected { out: 64 },
        Op::Relu,
        Op::FullyConnected { out: num_classes },
        Op::Softmax,
    ]
    .into_iter()
    .map(Node::new)
    .collect();
    let spec = ArchitectureSpec { name: "mini_plain".into(), input, nodes };
    spec.infer_shapes()?;
    Ok(spec)
}

/// Single dense layer followed by softmax.
pub fn build_linear(input: (usize, usize, usize), num_classes: usize) -> Result<ArchitectureSpec> {
    check_classes(num_classes)?;
    let nodes = vec![Node::new(Op::FullyConnected { out: num_classes }), Node::new(Op::Softmax)];
    let spec = ArchitectureSpec { name: "linear".into(), input, nodes };
    spec.infer_shapes()?;
    Ok(spec)
}

/// Looks up a builder by name: `mini_resnet`, `resnet18`, `mini_plain`, `linear`.
pub fn build_named(name: &str, input: (usize, usize, usize), num_classes: usize) -> Result<ArchitectureSpec> {
    match name {
        "mini_resnet" => build_mini_resnet(input, num_classes),
        "resnet18" => build_resnet18(input, num_classes),
        "mini_plain" => build_mini_plain(input, num_classes),
        "linear" => build_linear(input, num_classes),
        other => Err(NnError::InvalidSpec(format!("unknown architecture {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent tally of the standard topology: stem + BN, then per stage
    /// two blocks of two 3×3 conv + BN, with a 1×1 projection + BN at the
    /// entry of stages 2–4.
    fn resnet18_body_params() -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
        let bn = |c: usize| 2 * c;
        let mut total = conv(3, 64, 7) + bn(64);
        let mut cin = 64;
        for cout in [64, 128, 256, 512] {
            total += conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout);
            if cin != cout {
                total += conv(cin, cout, 1) + bn(cout);
            }
            total += 2 * (conv(cout, cout, 3) + bn(cout));
            cin = cout;
        }
        total
    }

    #[test]
    fn mini_resnet_shape_and_depth() {
        for k in [3, 5] {
            let s = build_mini_resnet((3, 64, 64), k).unwrap();
            assert_eq!(s.num_outputs().unwrap(), k);
            assert_eq!(s.weighted_layer_count(), 14);
            let shapes = s.infer_shapes().unwrap();
            let gap = s.nodes.iter().position(|n| n.op == Op::GlobalAvgPool).unwrap();
            assert_eq!(shapes[gap - 1], (64, 16, 16));
            assert_eq!(s.head_index(), Some(s.nodes.len() - 2));
        }
        assert!(build_mini_resnet((3, 64, 64), 1).is_err());
    }

    #[test]
    fn resnet18_topology() {
        let s = build_resnet18((3, 224, 224), 1000).unwrap();
        assert_eq!(s.weighted_layer_count(), 18);
        let shapes = s.infer_shapes().unwrap();
        let gap = s.nodes.iter().position(|n| n.op == Op::GlobalAvgPool).unwrap();
        assert_eq!(shapes[gap - 1], (512, 7, 7));
        assert_eq!(s.num_outputs().unwrap(), 1000);
        let body = resnet18_body_params();
        assert_eq!(body, 11_176_512);
        assert_eq!(s.parameter_count().unwrap(), body + 512 * 1000 + 1000);
        let s3 = build_resnet18((3, 224, 224), 3).unwrap();
        assert_eq!(s3.parameter_count().unwrap(), body + 512 * 3 + 3);
    }

    #[test]
    fn plain_net_has_no_residuals() {
        let s = build_mini_plain((3, 64, 64), 4).unwrap();
        assert!(!s.nodes.iter().any(|n| matches!(n.op, Op::ResidualAdd { .. })));
        let convs = s.nodes.iter().filter(|n| matches!(n.op, Op::Conv { .. })).count();
        let pools = s.nodes.iter().filter(|n| matches!(n.op, Op::MaxPool { .. })).count();
        let fcs = s.nodes.iter().filter(|n| matches!(n.op, Op::FullyConnected { .. })).count();
        assert_eq!((convs, pools, fcs), (5, 3, 3));
        assert_eq!(s.num_outputs().unwrap(), 4);
    }

    #[test]
    fn invalid_wiring_rejected() {
        let mut s = build_mini_resnet((3, 32, 32), 3).unwrap();
        let add = s.nodes.iter().position(|n| matches!(n.op, Op::ResidualAdd { .. })).unwrap();
        s.nodes[add].op = Op::ResidualAdd { from: 0 };
        // node 0 is the stem conv (16 ch, full res) so the first block still matches
        assert!(s.infer_shapes().is_ok());
        let mut s = build_mini_resnet((3, 32, 32), 3).unwrap();
        let last_add = s.nodes.iter().rposition(|n| matches!(n.op, Op::ResidualAdd { .. })).unwrap();
        s.nodes[last_add].op = Op::ResidualAdd { from: 0 };
        assert!(matches!(s.infer_shapes(), Err(NnError::InvalidSpec(_))));
        let mut s = build_linear((1, 2, 2), 2).unwrap();
        s.nodes.swap(0, 1);
        assert!(s.infer_shapes().is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = build_mini_resnet((3, 64, 64), 3).unwrap();
        let back = ArchitectureSpec::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(s.to_json().unwrap().contains("\"op\": \"residual_add\""));
    }
}
