//! Temporal-convolution context: layerwise `{K1×s1; K2×s2}` settings and the
//! frame splicing that builds `x̃_t = [x_t; h_{t−s1}; …; h_{t−K1·s1}; h_{t+s2}; …; h_{t+K2·s2}]`
//! from the layer below.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// History order/stride and future order/stride for one layer.
///
/// A stride is meaningless when its order is 0; it is then stored as 1 so
/// that equal settings compare equal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ContextSpec {
    pub k1: usize,
    pub s1: usize,
    pub k2: usize,
    pub s2: usize,
}

impl ContextSpec {
    pub const NONE: ContextSpec = ContextSpec { k1: 0, s1: 1, k2: 0, s2: 1 };

    /// Panics if an active stride is 0; see [`ContextSpec::try_new`].
    pub fn new(k1: usize, s1: usize, k2: usize, s2: usize) -> Self {
        Self::try_new(k1, s1, k2, s2).expect("invalid context spec")
    }

    pub fn try_new(k1: usize, s1: usize, k2: usize, s2: usize) -> Result<Self> {
        if (k1 > 0 && s1 == 0) || (k2 > 0 && s2 == 0) {
            return Err(Error::InvalidConfig(format!(
                "context strides must be >= 1, got ({k1}, {s1}, {k2}, {s2})"
            )));
        }
        Ok(ContextSpec {
            k1,
            s1: if k1 == 0 { 1 } else { s1 },
            k2,
            s2: if k2 == 0 { 1 } else { s2 },
        })
    }

    pub fn future_only(k: usize, s: usize) -> Self {
        Self::new(0, 1, k, s)
    }

    pub fn is_empty(&self) -> bool {
        self.k1 == 0 && self.k2 == 0
    }

    /// Frames of history reached by the splice, `K1·s1`.
    pub fn history_reach(&self) -> usize {
        self.k1 * self.s1
    }

    /// Frames of future reached by the splice, `K2·s2`.
    pub fn future_reach(&self) -> usize {
        self.k2 * self.s2
    }

    /// Spliced width for a layer below of width `below`: `below · (1 + K1 + K2)`.
    pub fn spliced_width(&self, below: usize) -> usize {
        below * (1 + self.k1 + self.k2)
    }
}

impl Default for ContextSpec {
    fn default() -> Self {
        ContextSpec::NONE
    }
}

impl fmt::Display for ContextSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = |k: usize, s: usize| {
            if k == 0 {
                "0".to_string()
            } else {
                format!("{k}×{s}")
            }
        };
        write!(f, "{{{}; {}}}", side(self.k1, self.s1), side(self.k2, self.s2))
    }
}

impl From<ContextSpec> for String {
    fn from(spec: ContextSpec) -> String {
        spec.to_string()
    }
}

impl TryFrom<String> for ContextSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        parse_context_setting(&s)
    }
}

impl FromStr for ContextSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_context_setting(s)
    }
}

fn parse_err(token: &str, reason: impl Into<String>) -> Error {
    Error::Parse {
        token: token.to_string(),
        reason: reason.into(),
    }
}

fn parse_positive(token: &str, what: &str) -> Result<usize> {
    let t = token.trim();
    match t.parse::<usize>() {
        Ok(0) => Err(parse_err(t, format!("{what} must be a positive integer"))),
        Ok(v) => Ok(v),
        Err(_) => Err(parse_err(t, format!("{what} is not a positive integer"))),
    }
}

/// One side of a setting: `0` or `K×s` (`x`, `X` and `*` also accepted).
fn parse_side(token: &str) -> Result<(usize, usize)> {
    let t = token.trim();
    if t == "0" {
        return Ok((0, 1));
    }
    let Some((k, s)) = t.split_once(['×', 'x', 'X', '*']) else {
        return Err(parse_err(t, "expected `0` or `K×s`"));
    };
    Ok((parse_positive(k, "order")?, parse_positive(s, "stride")?))
}

/// Parses one `{K1×s1; K2×s2}` token.
pub fn parse_context_setting(text: &str) -> Result<ContextSpec> {
    let t = text.trim();
    let inner = t
        .strip_prefix('{')
        .and_then(|r| r.strip_suffix('}'))
        .ok_or_else(|| parse_err(t, "expected `{history; future}`"))?;
    let mut sides = inner.split(';');
    let (Some(hist), Some(fut), None) = (sides.next(), sides.next(), sides.next()) else {
        return Err(parse_err(t, "expected exactly one `;` between history and future"));
    };
    let (k1, s1) = parse_side(hist)?;
    let (k2, s2) = parse_side(fut)?;
    ContextSpec::try_new(k1, s1, k2, s2)
}

/// Context settings for layers `2..=L`; layer 1 reads the features directly
/// and never splices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerContextPlan {
    layers: Vec<ContextSpec>,
}

impl LayerContextPlan {
    /// `specs[i]` applies to layer `i + 2`.
    pub fn new(specs: Vec<ContextSpec>) -> Self {
        LayerContextPlan { layers: specs }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Plan where every layer `2..=layers` uses `spec`.
    pub fn uniform(layers: usize, spec: ContextSpec) -> Self {
        LayerContextPlan {
            layers: vec![spec; layers.saturating_sub(1)],
        }
    }

    pub fn specs(&self) -> &[ContextSpec] {
        &self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    /// Setting for 1-based `layer`; layer 1 and layers past the plan get none.
    pub fn for_layer(&self, layer: usize) -> ContextSpec {
        if layer < 2 {
            return ContextSpec::NONE;
        }
        self.layers.get(layer - 2).copied().unwrap_or(ContextSpec::NONE)
    }

    pub fn total_future_reach(&self) -> usize {
        self.layers.iter().map(ContextSpec::future_reach).sum()
    }

    pub fn total_history_reach(&self) -> usize {
        self.layers.iter().map(ContextSpec::history_reach).sum()
    }

    /// Parses a sequence of `{…}` tokens separated by whitespace or commas.
    /// An empty string (or `none`) is the empty plan.
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        if t.is_empty() || t.eq_ignore_ascii_case("none") {
            return Ok(Self::empty());
        }
        let mut layers = Vec::new();
        let mut rest = t;
        loop {
            rest = rest.trim_start_matches(|c: char| c.is_whitespace() || c == ',');
            if rest.is_empty() {
                break;
            }
            if !rest.starts_with('{') {
                let token: String = rest.chars().take_while(|c| *c != '{').collect();
                return Err(parse_err(token.trim(), "expected `{` starting a layer setting"));
            }
            let end = rest
                .find('}')
                .ok_or_else(|| parse_err(rest, "unterminated layer setting"))?;
            layers.push(parse_context_setting(&rest[..=end])?);
            rest = &rest[end + 1..];
        }
        Ok(LayerContextPlan { layers })
    }
}

impl fmt::Display for LayerContextPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.layers.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

fn clamp_frame(i: isize, frames: usize) -> usize {
    i.clamp(0, frames as isize - 1) as usize
}

/// Source frames spliced onto frame `t`: history nearest-first, then future
/// nearest-first, each clamped into `[0, frames − 1]`. Frame `t` itself is
/// not listed; it enters the splice as the current input.
pub fn splice_indices(t: usize, frames: usize, spec: &ContextSpec) -> Result<Vec<usize>> {
    if t >= frames {
        return Err(Error::OutOfRange {
            what: "frame",
            index: t,
            limit: frames,
        });
    }
    let t = t as isize;
    let hist = (1..=spec.k1).map(|i| clamp_frame(t - (spec.s1 * i) as isize, frames));
    let fut = (1..=spec.k2).map(|j| clamp_frame(t + (spec.s2 * j) as isize, frames));
    Ok(hist.chain(fut).collect())
}

fn check_splice_inputs(h_below: &Tensor, x_layer: &Tensor) -> Result<(usize, usize, usize)> {
    if h_below.rank() != 3 {
        return Err(Error::dim("splice", "[T, B, N] sequence", format!("{:?}", h_below.shape())));
    }
    x_layer.expect_shape("splice", h_below.shape())?;
    let s = h_below.shape();
    Ok((s[0], s[1], s[2]))
}

/// Builds the `[T, B, N·(1 + K1 + K2)]` spliced input of a layer.
///
/// Row `(t, b)` is `x_layer[t, b]` followed by `h_below[i, b]` for every
/// `i` in [`splice_indices`]. Above layer 1 both arguments are the output of
/// the layer below.
pub fn splice(h_below: &Tensor, x_layer: &Tensor, spec: &ContextSpec) -> Result<Tensor> {
    let (frames, batch, n) = check_splice_inputs(h_below, x_layer)?;
    let width = spec.spliced_width(n);
    let mut out = Tensor::zeros(&[frames, batch, width]);
    for t in 0..frames {
        let sources = splice_indices(t, frames, spec)?;
        let cur = x_layer.frame_slice(t);
        let dst = out.frame_slice_mut(t);
        for b in 0..batch {
            let row = &mut dst[b * width..(b + 1) * width];
            row[..n].copy_from_slice(&cur[b * n..(b + 1) * n]);
            for (slot, &src) in sources.iter().enumerate() {
                let from = &h_below.frame_slice(src)[b * n..(b + 1) * n];
                row[(slot + 1) * n..(slot + 2) * n].copy_from_slice(from);
            }
        }
    }
    Ok(out)
}

/// Future-only splice `[x_t; h_{t+s}; …; h_{t+K·s}]`, written independently of
/// [`splice`] so the two layouts can be cross-checked.
pub fn splice_future(h_below: &Tensor, x_layer: &Tensor, order: usize, stride: usize) -> Result<Tensor> {
    let (frames, batch, n) = check_splice_inputs(h_below, x_layer)?;
    if order > 0 && stride == 0 {
        return Err(Error::InvalidConfig("future stride must be >= 1".into()));
    }
    let mut data = Vec::with_capacity(frames * batch * n * (1 + order));
    for t in 0..frames {
        for b in 0..batch {
            data.extend_from_slice(&x_layer.frame_slice(t)[b * n..(b + 1) * n]);
            for i in 1..=order {
                let src = (t + stride * i).min(frames - 1);
                data.extend_from_slice(&h_below.frame_slice(src)[b * n..(b + 1) * n]);
            }
        }
    }
    Tensor::from_vec(&[frames, batch, n * (1 + order)], data)
}

/// Backward of [`splice`]: returns `(grad_x_layer, grad_h_below)`, scatter-adding
/// every spliced slot back onto its (possibly clamped) source frame.
pub fn splice_backward(grad: &Tensor, spec: &ContextSpec, below: usize) -> Result<(Tensor, Tensor)> {
    let width = spec.spliced_width(below);
    if grad.rank() != 3 || grad.cols() != width {
        return Err(Error::dim(
            "splice_backward",
            format!("[T, B, {width}]"),
            format!("{:?}", grad.shape()),
        ));
    }
    let (frames, batch) = (grad.shape()[0], grad.shape()[1]);
    let mut d_x = Tensor::zeros(&[frames, batch, below]);
    let mut d_h = Tensor::zeros(&[frames, batch, below]);
    for t in 0..frames {
        let sources = splice_indices(t, frames, spec)?;
        let g = grad.frame_slice(t).to_vec();
        {
            let dx = d_x.frame_slice_mut(t);
            for b in 0..batch {
                for c in 0..below {
                    dx[b * below + c] += g[b * width + c];
                }
            }
        }
        for (slot, &src) in sources.iter().enumerate() {
            let dh = d_h.frame_slice_mut(src);
            for b in 0..batch {
                let off = b * width + (slot + 1) * below;
                for c in 0..below {
                    dh[b * below + c] += g[off + c];
                }
            }
        }
    }
    Ok((d_x, d_h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parses_reference_settings() {
        assert_eq!(parse_context_setting("{0; 1×3}").unwrap(), ContextSpec::new(0, 1, 1, 3));
        assert_eq!(parse_context_setting("{1×6; 2×3}").unwrap(), ContextSpec::new(1, 6, 2, 3));
        assert_eq!(parse_context_setting("{2×6; 1×1}").unwrap(), ContextSpec::new(2, 6, 1, 1));
        assert_eq!(parse_context_setting(" {1x6;2*3} ").unwrap(), ContextSpec::new(1, 6, 2, 3));
        assert_eq!(parse_context_setting("{0; 0}").unwrap(), ContextSpec::NONE);
    }

    #[test]
    fn parse_errors_name_the_token() {
        let cases = [
            ("{1×6 2×3}", "{1×6 2×3}"),
            ("{1×0; 0}", "0"),
            ("{a×2; 0}", "a"),
            ("{0; 3}", "3"),
            ("1×6; 2×3", "1×6; 2×3"),
            ("{0; 1×1; 0}", "{0; 1×1; 0}"),
        ];
        for (text, token) in cases {
            match parse_context_setting(text) {
                Err(Error::Parse { token: t, .. }) => assert_eq!(t, token, "for {text}"),
                other => panic!("{text}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn display_round_trips() {
        for spec in [ContextSpec::new(1, 6, 2, 3), ContextSpec::future_only(1, 1), ContextSpec::NONE] {
            assert_eq!(spec.to_string().parse::<ContextSpec>().unwrap(), spec);
        }
        assert_eq!(ContextSpec::new(0, 1, 1, 3).to_string(), "{0; 1×3}");
    }

    #[test]
    fn plan_parsing() {
        let plan = LayerContextPlan::parse("{0;1×1} {0;1×3},{0; 1×3}  {0;1×3}").unwrap();
        assert_eq!(plan.len(), 4);
        assert_eq!(plan.total_future_reach(), 10);
        assert_eq!(plan.for_layer(1), ContextSpec::NONE);
        assert_eq!(plan.for_layer(2), ContextSpec::future_only(1, 1));
        assert!(LayerContextPlan::parse("").unwrap().is_empty());
        assert!(matches!(
            LayerContextPlan::parse("{0;1×1} junk {0;1×3}"),
            Err(Error::Parse { token, .. }) if token == "junk"
        ));
        let again = LayerContextPlan::parse(&plan.to_string()).unwrap();
        assert_eq!(again, plan);
    }

    #[test]
    fn splice_index_examples() {
        assert_eq!(splice_indices(10, 100, &ContextSpec::new(1, 6, 2, 3)).unwrap(), [4, 13, 16]);
        assert_eq!(splice_indices(0, 100, &ContextSpec::new(1, 6, 1, 3)).unwrap(), [0, 3]);
        assert_eq!(splice_indices(98, 100, &ContextSpec::future_only(2, 3)).unwrap(), [99, 99]);
        assert!(matches!(
            splice_indices(100, 100, &ContextSpec::NONE),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn empty_splice_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::uniform(&[5, 2, 3], 1.0, &mut rng);
        assert_eq!(splice(&h, &h, &ContextSpec::NONE).unwrap(), h);
    }

    #[test]
    fn single_future_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Tensor::uniform(&[5, 2, 3], 1.0, &mut rng);
        let x = Tensor::uniform(&[5, 2, 3], 1.0, &mut rng);
        let out = splice(&h, &x, &ContextSpec::future_only(1, 1)).unwrap();
        for t in 0..5 {
            let row = out.frame(t).unwrap();
            let nxt = h.frame((t + 1).min(4)).unwrap();
            let cur = x.frame(t).unwrap();
            for b in 0..2 {
                assert_eq!(&row.data()[b * 6..b * 6 + 3], &cur.data()[b * 3..b * 3 + 3]);
                assert_eq!(&row.data()[b * 6 + 3..b * 6 + 6], &nxt.data()[b * 3..b * 3 + 3]);
            }
        }
    }

    #[test]
    fn splice_shape_mismatch() {
        let a = Tensor::zeros(&[4, 2, 3]);
        let b = Tensor::zeros(&[4, 2, 2]);
        assert!(matches!(splice(&a, &b, &ContextSpec::NONE), Err(Error::Dimension { .. })));
    }

    /// `splice_backward` is the adjoint of `splice`: <splice(h), g> = <h, Sᵀg>.
    #[test]
    fn backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ContextSpec::new(2, 2, 1, 4);
        let h = Tensor::uniform(&[7, 2, 3], 1.0, &mut rng);
        let x = Tensor::uniform(&[7, 2, 3], 1.0, &mut rng);
        let g = Tensor::uniform(&[7, 2, 12], 1.0, &mut rng);
        let fwd = splice(&h, &x, &spec).unwrap().mul(&g).unwrap().sum();
        let (dx, dh) = splice_backward(&g, &spec, 3).unwrap();
        let adj = x.mul(&dx).unwrap().sum() + h.mul(&dh).unwrap().sum();
        assert!((fwd - adj).abs() < 1e-12);
    }
}
