//! Parametric convolutional encoder-decoder.

use serde::{Deserialize, Serialize};

use super::{init_side_mlp, side_mlp, Bound, GammaInput, Init, NnError};
use crate::autodiff::{Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcnnConfig {
    /// Output channels per level; its length is the number of levels.
    pub channels: Vec<usize>,
    /// Replace the second encoder convolution by a 1/3/5 Inception block.
    pub inception: bool,
    pub side_hidden: usize,
    pub recenter: bool,
    /// Adds the input to the network output.
    pub residual: bool,
}

impl Default for PcnnConfig {
    fn default() -> Self {
        Self { channels: vec![20, 40, 60, 80, 100, 120], inception: true, side_hidden: 32, recenter: true, residual: false }
    }
}

const INCEPTION_WIDTHS: [usize; 3] = [1, 3, 5];

/// Near-equal split of `c` channels over the Inception branches.
fn inception_split(c: usize) -> [usize; 3] {
    let base = c / 3;
    let extra = c % 3;
    [base + usize::from(extra > 0), base + usize::from(extra > 1), base]
}

impl PcnnConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.side_hidden == 0 {
            return Err(NnError::Config("channel schedule and side width must be non-empty and positive".into()));
        }
        if self.inception && self.channels.iter().any(|&c| c < 3) {
            return Err(NnError::Config("Inception levels need at least 3 channels".into()));
        }
        Ok(())
    }

    /// Total downsampling factor of the encoder.
    pub fn stride(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn check_mesh(&self, n: usize) -> Result<(), NnError> {
        if n % self.stride() != 0 || n / self.stride() < 1 {
            return Err(NnError::Config(format!("mesh size {n} is not divisible by {}", self.stride())));
        }
        Ok(())
    }

    fn conv_init(init: &mut Init, name: &str, cin: usize, cout: usize, width: usize) {
        init.dense(format!("{name}.w"), &[cout, cin, width], cin * width);
        init.zeros(format!("{name}.b"), &[cout]);
    }

    fn second_conv_init(&self, init: &mut Init, name: &str, c: usize) {
        if self.inception {
            for (width, part) in INCEPTION_WIDTHS.iter().zip(inception_split(c)) {
                Self::conv_init(init, &format!("{name}.k{width}"), c, part, *width);
            }
        } else {
            Self::conv_init(init, name, c, c, 3);
        }
    }

    pub(crate) fn init_weights(&self, init: &mut Init) {
        let mut cin = 1;
        for (l, &c) in self.channels.iter().enumerate() {
            for branch in ["enc", "encstar"] {
                Self::conv_init(init, &format!("{branch}{l}.c1"), cin, c, 3);
                self.second_conv_init(init, &format!("{branch}{l}.c2"), c);
            }
            init_side_mlp(init, &format!("side{l}"), self.side_hidden, 1);
            cin = c;
        }
        for l in (0..self.levels() - 1).rev() {
            let c = self.channels[l];
            Self::conv_init(init, &format!("dec{l}.c1"), self.channels[l + 1] + c, c, 3);
            Self::conv_init(init, &format!("dec{l}.c2"), c, c, 3);
        }
        Self::conv_init(init, "out", self.channels[0], 1, 3);
    }

    fn conv(g: &mut Graph, w: &Bound, name: &str, x: Var) -> Result<Var, NnError> {
        Ok(g.conv1d_periodic(x, w.get(&format!("{name}.w"))?, Some(w.get(&format!("{name}.b"))?))?)
    }

    fn second_conv(&self, g: &mut Graph, w: &Bound, name: &str, x: Var) -> Result<Var, NnError> {
        if self.inception {
            let mut parts = Vec::with_capacity(3);
            for width in INCEPTION_WIDTHS {
                parts.push(Self::conv(g, w, &format!("{name}.k{width}"), x)?);
            }
            Ok(g.concat(&parts)?)
        } else {
            Self::conv(g, w, name, x)
        }
    }

    fn branch(&self, g: &mut Graph, w: &Bound, name: &str, x: Var) -> Result<Var, NnError> {
        let h = Self::conv(g, w, &format!("{name}.c1"), x)?;
        let h = g.relu(h)?;
        let h = self.second_conv(g, w, &format!("{name}.c2"), h)?;
        Ok(g.relu(h)?)
    }

    pub(crate) fn forward(&self, g: &mut Graph, w: &Bound, v: Var, gamma: GammaInput) -> Result<Var, NnError> {
        let mut skips = Vec::with_capacity(self.levels());
        let mut x = v;
        for l in 0..self.levels() {
            if l > 0 {
                x = g.maxpool1d(x)?;
            }
            let e = self.branch(g, w, &format!("enc{l}"), x)?;
            let es = self.branch(g, w, &format!("encstar{l}"), x)?;
            let d = side_mlp(g, w, &format!("side{l}"), gamma)?;
            let d = g.reshape(d, &[1])?;
            let scaled = g.mul_scalar(es, d)?;
            x = g.add(e, scaled)?;
            skips.push(x);
        }
        let mut up = x;
        for l in (0..self.levels() - 1).rev() {
            let u = g.upsample_nearest(up)?;
            let cat = g.concat(&[u, skips[l]])?;
            let h = Self::conv(g, w, &format!("dec{l}.c1"), cat)?;
            let h = g.relu(h)?;
            let h = Self::conv(g, w, &format!("dec{l}.c2"), h)?;
            up = g.relu(h)?;
        }
        Self::conv(g, w, "out", up)
    }
}
